//! Flat `key = value` run configuration.
//!
//! Blank lines and `#` comments are ignored. Unknown keys and malformed
//! values are rejected; a parse error lists every offending line.

use std::fmt::Write as _;
use std::path::PathBuf;

use crate::decoder::{DecoderConfig, PpmSource};
use crate::error::{DarnError, Result};
use crate::objectives::LossWeights;
use crate::optim::AdamWConfig;
use crate::synth::SynthConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub image_size: usize,
    pub in_channels: usize,
    pub num_classes: usize,
    pub encoder_widths: [usize; 4],
    pub decoder_width: usize,
    pub frozen: bool,
    pub tcp: bool,
    pub adm: bool,
    pub dcg: bool,
    pub fixed_p: f64,
    pub p_min: f64,
    pub p_max: f64,
    pub alpha: f64,
    pub beta: f64,
    pub lambda_dice: f64,
    pub variance_sign: f64,
    pub temperature: f64,
    pub lr: f64,
    pub min_lr: f64,
    pub warmup_steps: u64,
    pub weight_decay: f64,
    pub decay_biases: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub patience: usize,
    pub se_reduction: usize,
    pub adm_per_level: bool,
    pub ppm_input: PpmSource,
    pub dataset_count: usize,
    pub dataset_val_fraction: f64,
    pub dataset_complex_fraction: f64,
    pub dataset_palette_amplitude: f64,
    pub dataset_texture_amplitude: f64,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            image_size: 32,
            in_channels: 3,
            num_classes: 3,
            encoder_widths: [16, 32, 64, 128],
            decoder_width: 64,
            frozen: true,
            tcp: true,
            adm: true,
            dcg: true,
            fixed_p: 0.3,
            p_min: 0.1,
            p_max: 0.5,
            alpha: 0.3,
            beta: 0.05,
            lambda_dice: 1.0,
            variance_sign: 1.0,
            temperature: 0.1,
            lr: 1e-4,
            min_lr: 0.0,
            warmup_steps: 128,
            weight_decay: 0.05,
            decay_biases: true,
            epochs: 20,
            batch_size: 4,
            patience: 10,
            se_reduction: 4,
            adm_per_level: false,
            ppm_input: PpmSource::Deepest,
            dataset_count: 640,
            dataset_val_fraction: 0.2,
            dataset_complex_fraction: 0.5,
            dataset_palette_amplitude: 0.15,
            dataset_texture_amplitude: 0.3,
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

/// Every key with a one-line description, in file order.
pub const KEYS: &[(&str, &str)] = &[
    ("seed", "global seed for data, initialization, shuffling and dropout noise"),
    ("image_size", "square image extent in pixels, a multiple of 16"),
    ("in_channels", "image channels"),
    ("num_classes", "segmentation classes K"),
    ("encoder_widths", "four comma-separated encoder stage widths"),
    ("decoder_width", "decoder channel width"),
    ("frozen", "train the decoder only (true) or also the encoder (false)"),
    ("tcp", "enable the complexity predictor"),
    ("adm", "enable complexity-adaptive dropout (needs tcp)"),
    ("dcg", "enable complexity-gated channel attention (needs tcp)"),
    ("fixed_p", "dropout rate when adaptive dropout is off; 0 disables dropout"),
    ("p_min", "dropout rate at complexity 1"),
    ("p_max", "dropout rate at complexity 0"),
    ("alpha", "minimum gate strength"),
    ("beta", "weight of the complexity regularizer"),
    ("lambda_dice", "weight of the Dice term"),
    ("variance_sign", "+1 penalizes the batch variance of c, -1 rewards it"),
    ("temperature", "temperature of the relaxed dropout mask"),
    ("lr", "base learning rate"),
    ("min_lr", "learning rate at the end of the cosine schedule"),
    ("warmup_steps", "linear warmup length in optimizer steps"),
    ("weight_decay", "decoupled AdamW weight decay"),
    ("decay_biases", "apply weight decay to bias vectors"),
    ("epochs", "maximum training epochs"),
    ("batch_size", "training batch size"),
    ("patience", "epochs without validation improvement before stopping"),
    ("se_reduction", "squeeze-excitation reduction ratio"),
    ("adm_per_level", "also drop out the intermediate FPN levels"),
    ("ppm_input", "feature map fed to pyramid pooling: deepest | shallowest"),
    ("dataset.count", "total synthetic samples (train + validation)"),
    ("dataset.val_fraction", "fraction of samples held out for validation"),
    ("dataset.complex_fraction", "probability that a scene is complex"),
    ("dataset.palette_amplitude", "spread of class colors around mid-gray"),
    ("dataset.texture_amplitude", "texture amplitude of complex scenes"),
    ("out_dir", "output directory (overridden by DARN_OUT_DIR)"),
];

/// Keys whose values are numbers and can be swept.
pub fn is_numeric_key(key: &str) -> bool {
    KEYS.iter().any(|(k, _)| *k == key)
        && !matches!(
            key,
            "encoder_widths" | "frozen" | "tcp" | "adm" | "dcg" | "decay_biases" | "adm_per_level" | "ppm_input" | "out_dir"
        )
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| DarnError::config(format!("`{key}`: cannot parse `{v}` as a number")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(DarnError::config(format!("`{key}`: expected true or false, got `{v}`"))),
    }
}

fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

impl RunConfig {
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let v = v.trim();
        match key {
            "seed" => self.seed = parse_num(key, v)?,
            "image_size" => self.image_size = parse_num(key, v)?,
            "in_channels" => self.in_channels = parse_num(key, v)?,
            "num_classes" => self.num_classes = parse_num(key, v)?,
            "encoder_widths" => {
                let parts = v
                    .split(',')
                    .map(|p| parse_num::<usize>(key, p.trim()))
                    .collect::<Result<Vec<_>>>()?;
                self.encoder_widths = parts.try_into().map_err(|p: Vec<usize>| {
                    DarnError::config(format!("`{key}`: expected 4 widths, got {}", p.len()))
                })?;
            }
            "decoder_width" => self.decoder_width = parse_num(key, v)?,
            "frozen" => self.frozen = parse_bool(key, v)?,
            "tcp" => self.tcp = parse_bool(key, v)?,
            "adm" => self.adm = parse_bool(key, v)?,
            "dcg" => self.dcg = parse_bool(key, v)?,
            "fixed_p" => self.fixed_p = parse_num(key, v)?,
            "p_min" => self.p_min = parse_num(key, v)?,
            "p_max" => self.p_max = parse_num(key, v)?,
            "alpha" => self.alpha = parse_num(key, v)?,
            "beta" => self.beta = parse_num(key, v)?,
            "lambda_dice" => self.lambda_dice = parse_num(key, v)?,
            "variance_sign" => self.variance_sign = parse_num(key, v)?,
            "temperature" => self.temperature = parse_num(key, v)?,
            "lr" => self.lr = parse_num(key, v)?,
            "min_lr" => self.min_lr = parse_num(key, v)?,
            "warmup_steps" => self.warmup_steps = parse_num(key, v)?,
            "weight_decay" => self.weight_decay = parse_num(key, v)?,
            "decay_biases" => self.decay_biases = parse_bool(key, v)?,
            "epochs" => self.epochs = parse_num(key, v)?,
            "batch_size" => self.batch_size = parse_num(key, v)?,
            "patience" => self.patience = parse_num(key, v)?,
            "se_reduction" => self.se_reduction = parse_num(key, v)?,
            "adm_per_level" => self.adm_per_level = parse_bool(key, v)?,
            "ppm_input" => {
                self.ppm_input = match v {
                    "deepest" => PpmSource::Deepest,
                    "shallowest" => PpmSource::Shallowest,
                    _ => {
                        return Err(DarnError::config(format!(
                            "`{key}`: expected deepest or shallowest, got `{v}`"
                        )))
                    }
                }
            }
            "dataset.count" => self.dataset_count = parse_num(key, v)?,
            "dataset.val_fraction" => self.dataset_val_fraction = parse_num(key, v)?,
            "dataset.complex_fraction" => self.dataset_complex_fraction = parse_num(key, v)?,
            "dataset.palette_amplitude" => self.dataset_palette_amplitude = parse_num(key, v)?,
            "dataset.texture_amplitude" => self.dataset_texture_amplitude = parse_num(key, v)?,
            "out_dir" => self.out_dir = PathBuf::from(v),
            _ => return Err(DarnError::config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "seed" => self.seed.to_string(),
            "image_size" => self.image_size.to_string(),
            "in_channels" => self.in_channels.to_string(),
            "num_classes" => self.num_classes.to_string(),
            "encoder_widths" => self.encoder_widths.map(|w| w.to_string()).join(","),
            "decoder_width" => self.decoder_width.to_string(),
            "frozen" => self.frozen.to_string(),
            "tcp" => self.tcp.to_string(),
            "adm" => self.adm.to_string(),
            "dcg" => self.dcg.to_string(),
            "fixed_p" => fmt_f64(self.fixed_p),
            "p_min" => fmt_f64(self.p_min),
            "p_max" => fmt_f64(self.p_max),
            "alpha" => fmt_f64(self.alpha),
            "beta" => fmt_f64(self.beta),
            "lambda_dice" => fmt_f64(self.lambda_dice),
            "variance_sign" => fmt_f64(self.variance_sign),
            "temperature" => fmt_f64(self.temperature),
            "lr" => fmt_f64(self.lr),
            "min_lr" => fmt_f64(self.min_lr),
            "warmup_steps" => self.warmup_steps.to_string(),
            "weight_decay" => fmt_f64(self.weight_decay),
            "decay_biases" => self.decay_biases.to_string(),
            "epochs" => self.epochs.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "patience" => self.patience.to_string(),
            "se_reduction" => self.se_reduction.to_string(),
            "adm_per_level" => self.adm_per_level.to_string(),
            "ppm_input" => match self.ppm_input {
                PpmSource::Deepest => "deepest".into(),
                PpmSource::Shallowest => "shallowest".into(),
            },
            "dataset.count" => self.dataset_count.to_string(),
            "dataset.val_fraction" => fmt_f64(self.dataset_val_fraction),
            "dataset.complex_fraction" => fmt_f64(self.dataset_complex_fraction),
            "dataset.palette_amplitude" => fmt_f64(self.dataset_palette_amplitude),
            "dataset.texture_amplitude" => fmt_f64(self.dataset_texture_amplitude),
            "out_dir" => self.out_dir.display().to_string(),
            _ => return None,
        })
    }

    /// Parses a config file body on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut problems = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                problems.push(format!("line {}: expected key = value", n + 1));
                continue;
            };
            if let Err(e) = cfg.set(k.trim(), v) {
                let msg = match e {
                    DarnError::Config(m) => m,
                    other => other.to_string(),
                };
                problems.push(format!("line {}: {msg}", n + 1));
            }
        }
        if !problems.is_empty() {
            return Err(DarnError::Config(problems.join("; ")));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    /// Serializes every key; `parse(to_text())` reproduces `self`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, _) in KEYS {
            let _ = writeln!(s, "{k} = {}", self.get(k).expect("known key"));
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        self.synth_config().validate()?;
        self.decoder_config().validate()?;
        if self.batch_size == 0 {
            return Err(DarnError::config("batch_size must be positive"));
        }
        if self.encoder_widths.contains(&0) {
            return Err(DarnError::config("encoder widths must be positive"));
        }
        if !(self.dataset_val_fraction > 0.0 && self.dataset_val_fraction < 1.0) {
            return Err(DarnError::config("dataset.val_fraction must lie in (0, 1)"));
        }
        let (train, val) = self.split_sizes();
        if train == 0 || val == 0 {
            return Err(DarnError::config(format!(
                "dataset.count {} leaves an empty split ({train} train, {val} validation)",
                self.dataset_count
            )));
        }
        if self.variance_sign != 1.0 && self.variance_sign != -1.0 {
            return Err(DarnError::config("variance_sign must be 1 or -1"));
        }
        if !(self.lr >= 0.0 && self.min_lr >= 0.0 && self.min_lr <= self.lr) {
            return Err(DarnError::config("need 0 <= min_lr <= lr"));
        }
        if !(self.weight_decay >= 0.0) || !(self.beta >= 0.0) || !(self.lambda_dice >= 0.0) {
            return Err(DarnError::config("weight_decay, beta and lambda_dice must be >= 0"));
        }
        Ok(())
    }

    /// `(train, validation)` sample counts.
    pub fn split_sizes(&self) -> (usize, usize) {
        let val = (self.dataset_count as f64 * self.dataset_val_fraction).round() as usize;
        (self.dataset_count.saturating_sub(val), val)
    }

    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            height: self.image_size,
            width: self.image_size,
            in_channels: self.in_channels,
            num_classes: self.num_classes,
            complex_fraction: self.dataset_complex_fraction,
            palette_amplitude: self.dataset_palette_amplitude,
            texture_amplitude: self.dataset_texture_amplitude,
        }
    }

    pub fn decoder_config(&self) -> DecoderConfig {
        DecoderConfig {
            feature_widths: self.encoder_widths,
            width: self.decoder_width,
            num_classes: self.num_classes,
            tcp: self.tcp,
            adm: self.adm,
            dcg: self.dcg,
            fixed_p: self.fixed_p,
            p_min: self.p_min,
            p_max: self.p_max,
            alpha: self.alpha,
            temperature: self.temperature,
            se_reduction: self.se_reduction,
            adm_per_level: self.adm_per_level,
            ppm_source: self.ppm_input,
            fixed_gate: None,
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            beta: self.beta,
            lambda_dice: self.lambda_dice,
            variance_sign: self.variance_sign,
        }
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            weight_decay: self.weight_decay,
            decay_biases: self.decay_biases,
            ..AdamWConfig::default()
        }
    }
}
