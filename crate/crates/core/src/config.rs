//! Model and training hyperparameters.
//!
//! Config files are flat `key = value` lines with section prefixes:
//!
//! ```text
//! preset = desk
//! model.variant = haqae
//! model.M = 3
//! train.lr = 0.0005   # trailing comments are allowed
//! ```
//!
//! `preset` and `model.variant` pick the base values wherever they appear
//! in the file; every other key then overrides that base in file order.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Haqae,
    Nohier,
    Rnnlm,
    RnnlmRole,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Haqae,
        Variant::Nohier,
        Variant::Rnnlm,
        Variant::RnnlmRole,
    ];

    pub fn has_latents(self) -> bool {
        matches!(self, Variant::Haqae | Variant::Nohier)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Haqae => "haqae",
            Variant::Nohier => "nohier",
            Variant::Rnnlm => "rnnlm",
            Variant::RnnlmRole => "rnnlm_role",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown variant {s:?}; expected one of haqae, nohier, rnnlm, rnnlm_role"
                ))
            })
    }
}

/// How codebook rows get their starting values.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CodebookInit {
    /// Uniform in `±1/K`.
    Uniform,
    /// Uniform, then overwritten before the first update with encoder
    /// queries drawn from the training data.
    Data,
}

impl FromStr for CodebookInit {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(Self::Uniform),
            "data" => Ok(Self::Data),
            _ => Err(Error::Config(format!(
                "unknown codebook init {s:?} (uniform, data)"
            ))),
        }
    }
}

impl fmt::Display for CodebookInit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Uniform => "uniform",
            Self::Data => "data",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Paper,
    Desk,
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Preset::Paper),
            "desk" => Ok(Preset::Desk),
            _ => Err(Error::Config(format!(
                "unknown preset {s:?}; expected paper or desk"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HaqaeConfig {
    pub variant: Variant,
    /// Number of latent variables `M`.
    pub latents: usize,
    /// Codes per latent `K`.
    pub codes: usize,
    pub latent_dim: usize,
    /// Per direction; encoder states are twice this wide.
    pub enc_hidden: usize,
    /// Decoder hidden size, also the language-model hidden size.
    pub dec_hidden: usize,
    pub word_dim: usize,
    pub role_dim: usize,
    pub lm_layers: usize,
    /// Embedding and pre-projection dropout of the language-model
    /// variants. The latent variants train without dropout.
    pub dropout: f64,
    pub vocab_max: usize,
    pub beta: f64,
    pub lr: f64,
    pub clip_norm: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub max_steps: Option<u64>,
    pub eval_interval: u64,
    pub seed: u64,
    /// Latent whose embedding initializes the decoder in the flat ablation.
    pub init_latent: usize,
    /// Learned affine map from attention context to codebook space.
    pub project_queries: bool,
    pub tie_embeddings: bool,
    #[serde(default = "uniform_init")]
    pub codebook_init: CodebookInit,
    /// Codes unused for this many consecutive steps are moved onto a
    /// current encoder query. 0 disables.
    #[serde(default)]
    pub dead_code_steps: u64,
}

fn uniform_init() -> CodebookInit {
    CodebookInit::Uniform
}

impl HaqaeConfig {
    pub fn paper(variant: Variant) -> Self {
        let lm = !variant.has_latents();
        Self {
            variant,
            latents: 5,
            codes: 512,
            latent_dim: 256,
            enc_hidden: 512,
            dec_hidden: 512,
            word_dim: 300,
            role_dim: 300,
            lm_layers: 2,
            dropout: if lm { 0.15 } else { 0.0 },
            vocab_max: 50_000,
            beta: 0.25,
            lr: if lm { 0.001 } else { 0.0005 },
            clip_norm: if lm { 10.0 } else { 5.0 },
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 64,
            epochs: 2,
            max_steps: None,
            eval_interval: 1000,
            seed: 1,
            init_latent: 0,
            project_queries: true,
            tie_embeddings: false,
            codebook_init: CodebookInit::Uniform,
            dead_code_steps: 0,
        }
    }

    /// Small dimensions for synthetic corpora on one CPU core.
    pub fn desk(variant: Variant) -> Self {
        Self {
            latents: 3,
            codes: 16,
            latent_dim: 32,
            enc_hidden: 32,
            dec_hidden: 64,
            word_dim: 32,
            role_dim: 32,
            vocab_max: 5_000,
            batch_size: 16,
            epochs: 20,
            eval_interval: 500,
            // Small corpora collapse onto one or two codes per latent
            // without resets.
            dead_code_steps: 500,
            ..Self::paper(variant)
        }
    }

    pub fn preset(preset: Preset, variant: Variant) -> Self {
        match preset {
            Preset::Paper => Self::paper(variant),
            Preset::Desk => Self::desk(variant),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let dims = [
            ("model.word_dim", self.word_dim),
            ("model.dec_hidden", self.dec_hidden),
            ("train.batch_size", self.batch_size),
            ("train.epochs", self.epochs),
        ];
        for (k, v) in dims {
            if v == 0 {
                return bad(format!("{k} must be positive"));
            }
        }
        if self.vocab_max <= 6 {
            return bad("data.vocab_max must exceed the 6 reserved tokens".into());
        }
        if !(self.lr > 0.0) || !(self.clip_norm > 0.0) {
            return bad("train.lr and train.clip_norm must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("model.dropout {} outside [0, 1)", self.dropout));
        }
        if !(self.adam_eps > 0.0)
            || !(0.0..1.0).contains(&self.adam_beta1)
            || !(0.0..1.0).contains(&self.adam_beta2)
        {
            return bad("Adam betas must lie in [0, 1) and eps must be positive".into());
        }
        if self.eval_interval == 0 {
            return bad("train.eval_interval must be positive".into());
        }
        match self.variant {
            Variant::Haqae | Variant::Nohier => {
                for (k, v) in [
                    ("model.M", self.latents),
                    ("model.K", self.codes),
                    ("model.latent_dim", self.latent_dim),
                    ("model.enc_hidden", self.enc_hidden),
                ] {
                    if v == 0 {
                        return bad(format!("{k} must be positive"));
                    }
                }
                if !(self.beta > 0.0) {
                    return bad(format!("train.beta must be positive, got {}", self.beta));
                }
                if !self.project_queries && self.latent_dim != 2 * self.enc_hidden {
                    return bad(format!(
                        "model.project_queries = false needs latent_dim = 2 x enc_hidden ({} vs {})",
                        self.latent_dim,
                        2 * self.enc_hidden
                    ));
                }
                if self.variant == Variant::Nohier && self.init_latent >= self.latents {
                    return bad(format!(
                        "model.init_latent {} out of range for {} latents",
                        self.init_latent, self.latents
                    ));
                }
            }
            Variant::Rnnlm | Variant::RnnlmRole => {
                if self.lm_layers == 0 {
                    return bad("model.lm_layers must be positive".into());
                }
                if self.variant == Variant::RnnlmRole && self.role_dim == 0 {
                    return bad("model.role_dim must be positive".into());
                }
            }
        }
        Ok(())
    }

    /// Sets one `section.key` to `value`.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
        }
        fn flag(key: &str, v: &str) -> Result<bool> {
            match v {
                "true" | "1" | "yes" => Ok(true),
                "false" | "0" | "no" => Ok(false),
                _ => Err(Error::Config(format!(
                    "{key}: expected true or false, got {v:?}"
                ))),
            }
        }
        match key {
            "model.variant" => self.variant = value.parse()?,
            "model.M" => self.latents = num(key, value)?,
            "model.K" => self.codes = num(key, value)?,
            "model.latent_dim" => self.latent_dim = num(key, value)?,
            "model.enc_hidden" => self.enc_hidden = num(key, value)?,
            "model.dec_hidden" => self.dec_hidden = num(key, value)?,
            "model.word_dim" => self.word_dim = num(key, value)?,
            "model.role_dim" => self.role_dim = num(key, value)?,
            "model.lm_layers" => self.lm_layers = num(key, value)?,
            "model.dropout" => self.dropout = num(key, value)?,
            "model.init_latent" => self.init_latent = num(key, value)?,
            "model.project_queries" => self.project_queries = flag(key, value)?,
            "model.tie_embeddings" => self.tie_embeddings = flag(key, value)?,
            "model.codebook_init" => self.codebook_init = value.parse()?,
            "train.dead_code_steps" => self.dead_code_steps = num(key, value)?,
            "data.vocab_max" => self.vocab_max = num(key, value)?,
            "train.beta" => self.beta = num(key, value)?,
            "train.lr" => self.lr = num(key, value)?,
            "train.clip_norm" => self.clip_norm = num(key, value)?,
            "train.adam_beta1" => self.adam_beta1 = num(key, value)?,
            "train.adam_beta2" => self.adam_beta2 = num(key, value)?,
            "train.adam_eps" => self.adam_eps = num(key, value)?,
            "train.batch_size" => self.batch_size = num(key, value)?,
            "train.epochs" => self.epochs = num(key, value)?,
            "train.max_steps" => self.max_steps = Some(num(key, value)?),
            "train.eval_interval" => self.eval_interval = num(key, value)?,
            "train.seed" => self.seed = num(key, value)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Builds a config from `key = value` pairs: preset and variant first,
    /// then the remaining keys in order.
    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let pairs: Vec<(&str, &str)> = pairs.into_iter().collect();
        let mut preset = Preset::Paper;
        let mut variant = Variant::Haqae;
        for &(k, v) in &pairs {
            match k {
                "preset" => preset = v.parse()?,
                "model.variant" => variant = v.parse()?,
                _ => {}
            }
        }
        let mut cfg = Self::preset(preset, variant);
        for &(k, v) in &pairs {
            if k != "preset" && k != "model.variant" {
                cfg.set(k, v)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_pairs(parse_pairs(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Renders the config in the file format accepted by [`parse`](Self::parse).
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut line = |k: &str, v: String| s.push_str(&format!("{k} = {v}\n"));
        line("model.variant", self.variant.to_string());
        line("model.M", self.latents.to_string());
        line("model.K", self.codes.to_string());
        line("model.latent_dim", self.latent_dim.to_string());
        line("model.enc_hidden", self.enc_hidden.to_string());
        line("model.dec_hidden", self.dec_hidden.to_string());
        line("model.word_dim", self.word_dim.to_string());
        line("model.role_dim", self.role_dim.to_string());
        line("model.lm_layers", self.lm_layers.to_string());
        line("model.dropout", self.dropout.to_string());
        line("model.init_latent", self.init_latent.to_string());
        line("model.project_queries", self.project_queries.to_string());
        line("model.tie_embeddings", self.tie_embeddings.to_string());
        line("model.codebook_init", self.codebook_init.to_string());
        line("train.dead_code_steps", self.dead_code_steps.to_string());
        line("data.vocab_max", self.vocab_max.to_string());
        line("train.beta", self.beta.to_string());
        line("train.lr", self.lr.to_string());
        line("train.clip_norm", self.clip_norm.to_string());
        line("train.adam_beta1", self.adam_beta1.to_string());
        line("train.adam_beta2", self.adam_beta2.to_string());
        line("train.adam_eps", self.adam_eps.to_string());
        line("train.batch_size", self.batch_size.to_string());
        line("train.epochs", self.epochs.to_string());
        if let Some(m) = self.max_steps {
            line("train.max_steps", m.to_string());
        }
        line("train.eval_interval", self.eval_interval.to_string());
        line("train.seed", self.seed.to_string());
        s
    }
}

/// Splits config text into `(key, value)` pairs, skipping blank lines and
/// `#` comments.
pub fn parse_pairs(text: &str) -> Result<Vec<(&str, &str)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            line: i + 1,
            msg: format!("expected key = value, got {raw:?}"),
        })?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() || v.is_empty() {
            return Err(Error::Parse {
                line: i + 1,
                msg: format!("empty key or value in {raw:?}"),
            });
        }
        out.push((k, v));
    }
    Ok(out)
}
