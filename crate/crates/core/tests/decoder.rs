use darn_core::decoder::{
    self, adm_apply, adm_rate, build_decoder_params, concrete_keep, dcg_apply, decode, decode_baseline, decoder_layout,
    dropout_rate, gate_factor, tcp_forward, tcp_param_count, Arm, DecoderConfig, DropoutMask, Mode, RecordingNoise,
    ReplayNoise, RngNoise,
};
use darn_core::encoder::{build_encoder, encoder_param_count, FeaturePyramid, DEFAULT_WIDTHS};
use darn_core::params::{param_count, ParamSet};
use darn_core::rng;
use darn_core::synth::{generate, SynthConfig};
use ndtensor::{Tape, Tensor};
use rand::Rng;

const WIDTHS: [usize; 4] = [8, 8, 16, 16];

fn pyramid(seed: u64, n: usize) -> FeaturePyramid {
    let data = generate(&SynthConfig::new(32, 3, 3, 0.5), seed, 0, n).unwrap();
    build_encoder(seed, 3, WIDTHS).unwrap().encode(&data.images).unwrap()
}

fn zero_tcp_head(params: &mut ParamSet) {
    for name in ["tcp.fc2.w", "tcp.fc2.b"] {
        params.get_mut(name).unwrap().data_mut().fill(0.0);
    }
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn rate_and_gate_constants_are_exact() {
    assert_eq!(dropout_rate(0.0, 0.1, 0.5), 0.5);
    assert_eq!(dropout_rate(1.0, 0.1, 0.5), 0.1);
    assert_eq!(dropout_rate(0.25, 0.1, 0.5), 0.4);
    assert_eq!(gate_factor(0.0, 0.3), 0.3);
    assert_eq!(gate_factor(0.5, 0.3), 0.65);
    assert_eq!(gate_factor(1.0, 0.3), 1.0);

    // Slopes through the tape.
    let mut tape = Tape::new();
    let c = tape.param(Tensor::from_vec(vec![3], vec![0.0, 0.5, 1.0]));
    let p = adm_rate(&mut tape, c, 0.1, 0.5).unwrap();
    assert_eq!(tape.value(p).data(), &[0.5, 0.3, 0.1]);
    let s = tape.sum(p, &[0]).unwrap();
    let g = tape.backward(s).unwrap();
    assert_eq!(g.data(c).unwrap(), &[-0.4, -0.4, -0.4]);

    let mut tape = Tape::new();
    let c = tape.param(Tensor::from_vec(vec![3], vec![0.0, 0.5, 1.0]));
    let f = decoder::gate_scale(&mut tape, c, 0.3).unwrap();
    assert_eq!(tape.value(f).data(), &[0.3, 0.65, 1.0]);
    let s = tape.sum(f, &[0]).unwrap();
    let g = tape.backward(s).unwrap();
    assert!(g.data(c).unwrap().iter().all(|&d| (d - 0.7).abs() < 1e-15));
}

#[test]
fn rate_and_gate_stay_in_range_and_are_monotone() {
    let mut prev = (f64::INFINITY, f64::NEG_INFINITY);
    for i in 0..=1000 {
        let c = i as f64 / 1000.0;
        let (p, g) = (dropout_rate(c, 0.1, 0.5), gate_factor(c, 0.3));
        assert!((0.1..=0.5).contains(&p) && (0.3..=1.0).contains(&g));
        assert!(p < prev.0 && g > prev.1);
        prev = (p, g);
    }
    let mut tape = Tape::new();
    let c = tape.constant(Tensor::from_vec(vec![1], vec![1.2]));
    assert!(adm_rate(&mut tape, c, 0.1, 0.5).is_err());
}

#[test]
fn zero_head_predicts_one_half() {
    let cfg = DecoderConfig::new(WIDTHS, 8, 3);
    let mut params = build_decoder_params(&cfg, 3).unwrap();
    zero_tcp_head(&mut params);
    let pyr = pyramid(3, 4);
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, true);
    let f1 = tape.constant(pyr.levels[0].clone());
    let c = tcp_forward(&mut tape, f1, &bound).unwrap();
    assert_eq!(tape.value(c).data(), &[0.5; 4]);

    // Random head: strictly inside (0, 1).
    let params = build_decoder_params(&cfg, 4).unwrap();
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, true);
    let f1 = tape.constant(pyr.levels[0].clone());
    let c = tcp_forward(&mut tape, f1, &bound).unwrap();
    assert!(tape.value(c).data().iter().all(|&v| v > 0.0 && v < 1.0));

    // Channel mismatch.
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, true);
    let f2 = tape.constant(Tensor::zeros(vec![1, 9, 4, 4]));
    assert!(tcp_forward(&mut tape, f2, &bound).is_err());
}

#[test]
fn tcp_count_closed_form() {
    assert_eq!(tcp_param_count(16), 9 * 16 * 64 + 64 + 2048 + 32 + 32 + 1);
    assert_eq!(tcp_param_count(16), 11_393);
    let cfg = DecoderConfig::new(DEFAULT_WIDTHS, 64, 3);
    let params = build_decoder_params(&cfg, 42).unwrap();
    let counts = param_count(&params);
    let tcp = counts.by_module.iter().find(|(m, _)| m == "tcp").unwrap().1;
    assert_eq!(tcp, 11_393);
    assert_eq!(counts.by_module.iter().map(|(_, n)| n).sum::<usize>(), counts.total);
}

#[test]
fn encoder_count_closed_form() {
    // Hand count: each stage has a 3×3 stride-2 conv and a 3×3 conv, with biases.
    let (cin, w) = (3, DEFAULT_WIDTHS);
    let mut want = 0;
    let mut prev = cin;
    for c in w {
        want += 9 * prev * c + c + 9 * c * c + c;
        prev = c;
    }
    assert_eq!(want, 293_520);
    assert_eq!(encoder_param_count(cin, w), want);
    assert_eq!(build_encoder(42, cin, w).unwrap().param_count(), want);
}

#[test]
fn baseline_shares_every_shape_outside_the_heads() {
    let full = DecoderConfig::new(DEFAULT_WIDTHS, 64, 3);
    let base = full.clone().with_arm(Arm::Baseline);
    let strip = |cfg: &DecoderConfig| -> Vec<(String, Vec<usize>)> {
        decoder_layout(cfg)
            .into_iter()
            .filter(|(n, _, _)| !n.starts_with("tcp.") && !n.starts_with("se."))
            .map(|(n, s, _)| (n, s))
            .collect()
    };
    assert_eq!(strip(&full), strip(&base));
    let diff = param_count(&build_decoder_params(&full, 1).unwrap()).total
        - param_count(&build_decoder_params(&base, 1).unwrap()).total;
    let se: usize = [32, 64, 128]
        .iter()
        .map(|&c| {
            let h = c / 4;
            h * c + h + c * h + c
        })
        .sum();
    assert_eq!(diff, tcp_param_count(16) + se);
}

#[test]
fn relaxed_mask_mean_matches_keep_probability() {
    let mut r = rng::stream(5, "mc");
    let n = 100_000;
    let mean = (0..n).map(|_| concrete_keep(0.3, rng::open_unit(&mut r), 0.1)).sum::<f64>() / n as f64;
    assert!((mean - 0.7).abs() < 0.01, "{mean}");
}

#[test]
fn cold_temperature_drops_high_draws() {
    assert!(concrete_keep(0.5, 0.99, 1e-4) < 1e-12);
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::ones(vec![1, 1, 1, 1]));
    let p = tape.constant(Tensor::from_vec(vec![1], vec![0.5]));
    let mask = DropoutMask {
        u: Tensor::full(vec![1, 1, 1, 1], 0.99),
        mode: Mode::Train,
    };
    let y = adm_apply(&mut tape, x, p, &mask, 1e-3).unwrap();
    assert!(tape.value(y).data()[0] < 1e-12);
}

#[test]
fn adm_matches_scalar_reference_and_eval_is_identity() {
    let mut r = rng::stream(6, "adm");
    let shape = vec![2, 3, 2, 2];
    let x = Tensor::from_vec(shape.clone(), (0..24).map(|_| r.gen_range(-1.0..1.0)).collect());
    let u = Tensor::from_vec(shape.clone(), (0..24).map(|_| rng::open_unit(&mut r)).collect());
    let p = [0.2, 0.45];
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let pv = tape.constant(Tensor::from_vec(vec![2], p.to_vec()));
    let y = adm_apply(&mut tape, xv, pv, &DropoutMask { u: u.clone(), mode: Mode::Train }, 0.1).unwrap();
    for i in 0..24 {
        let pi = p[i / 12];
        let want = x.data()[i] * concrete_keep(pi, u.data()[i], 0.1) / (1.0 - pi);
        assert!((tape.value(y).data()[i] - want).abs() < 1e-12);
    }
    let e = adm_apply(&mut tape, xv, pv, &DropoutMask { u, mode: Mode::Eval }, 0.1).unwrap();
    assert_eq!(e, xv);

    let bad = tape.constant(Tensor::from_vec(vec![2], vec![0.0, 0.3]));
    let u = Tensor::full(shape, 0.5);
    assert!(adm_apply(&mut tape, xv, bad, &DropoutMask { u, mode: Mode::Train }, 0.1).is_err());
}

#[test]
fn lower_complexity_keeps_fewer_units() {
    let mut r = rng::stream(8, "bottleneck");
    let n = 20_000;
    let draws: Vec<f64> = (0..n).map(|_| rng::open_unit(&mut r)).collect();
    let mean_keep = |c: f64| {
        let p = dropout_rate(c, 0.1, 0.5);
        draws.iter().map(|&u| concrete_keep(p, u, 0.1)).sum::<f64>() / n as f64
    };
    let mut prev = 0.0;
    for c in [0.0, 0.25, 0.5, 0.75, 1.0] {
        let m = mean_keep(c);
        assert!(m > prev, "c={c}: {m}");
        prev = m;
    }
}

#[test]
fn gate_examples() {
    let cfg = DecoderConfig::new(WIDTHS, 8, 3);
    let mut params = build_decoder_params(&cfg, 2).unwrap();
    for e in params.iter_mut().filter(|e| e.name.starts_with("se.2.")) {
        e.value.data_mut().fill(0.0);
    }
    let pyr = pyramid(2, 2);
    for (c, factor) in [(1.0, 0.5), (0.0, 0.3 * 0.5), (0.5, 0.65 * 0.5)] {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, true);
        let f = tape.constant(pyr.levels[1].clone());
        let cv = tape.constant(Tensor::full(vec![2], c));
        let y = dcg_apply(&mut tape, f, cv, 0.3, &bound, 2).unwrap();
        let want = pyr.levels[1].map(|v| v * factor);
        assert!(max_abs_diff(tape.value(y), &want) < 1e-15, "c={c}");
    }
}

#[test]
fn pinned_head_equals_fixed_baseline() {
    let cfg = DecoderConfig::new(WIDTHS, 8, 3);
    let mut params = build_decoder_params(&cfg, 11).unwrap();
    zero_tcp_head(&mut params);
    let pyr = pyramid(11, 4);

    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, true);
    let pv = pyr.bind(&mut tape);
    let mut rec = RecordingNoise::new(RngNoise(rng::stream(11, "noise")));
    let out = decode(&mut tape, &pv, &bound, &cfg, Mode::Train, &mut rec).unwrap();
    let state = out.state(&tape, &cfg).unwrap();
    assert_eq!(state.c.data(), &[0.5; 4]);
    assert!(state.p.data().iter().all(|&p| (p - 0.3).abs() < 1e-15));
    assert_eq!(state.gate_scale.data(), &[0.65; 4]);
    let full = tape.value(out.logits).clone();

    let mut base = cfg.clone();
    base.fixed_gate = Some(0.65);
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, true);
    let pv = pyr.bind(&mut tape);
    let mut replay = rec.into_replay();
    let logits = decode_baseline(&mut tape, &pv, &bound, &base, 0.3, Mode::Train, &mut replay).unwrap();
    let diff = max_abs_diff(&full, tape.value(logits));
    assert!(diff < 1e-10, "{diff:e}");
}

#[test]
fn decode_shapes_and_determinism() {
    for arm in Arm::LADDER {
        let cfg = DecoderConfig::new(WIDTHS, 8, 3).with_arm(arm);
        let params = build_decoder_params(&cfg, 9).unwrap();
        let pyr = pyramid(9, 3);
        let run = |mode: Mode, noise_seed: u64| {
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape, true);
            let pv = pyr.bind(&mut tape);
            let mut noise = RngNoise(rng::stream(noise_seed, "n"));
            let out = decode(&mut tape, &pv, &bound, &cfg, mode, &mut noise).unwrap();
            let c = out.complexity.map(|c| tape.value(c).clone());
            (tape.value(out.logits).clone(), c)
        };
        let (a, ca) = run(Mode::Train, 1);
        assert_eq!(a.shape(), &[3, 3, 32, 32]);
        let (b, cb) = run(Mode::Train, 1);
        assert_eq!(a.data(), b.data(), "{}", arm.slug());
        assert_eq!(ca, cb);
        let (e1, _) = run(Mode::Eval, 1);
        let (e2, _) = run(Mode::Eval, 2);
        assert_eq!(e1.data(), e2.data());
        // Eval mode never consumes noise.
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, true);
        let pv = pyr.bind(&mut tape);
        decode(&mut tape, &pv, &bound, &cfg, Mode::Eval, &mut ReplayNoise::default()).unwrap();
    }
}

#[test]
fn ladder_matches_component_table() {
    let labels: Vec<&str> = Arm::LADDER.iter().map(|a| a.label()).collect();
    assert_eq!(
        labels,
        [
            "Baseline Decoder",
            "+ TCP (Features Only)",
            "+ ADM (w/ TCP)",
            "+ DCG (w/ TCP, No ADM)",
            "Full DARN (TCP+ADM+DCG)"
        ]
    );
    assert_eq!(Arm::DcgWithTcpNoAdm.flags(), (true, false, true));
}
