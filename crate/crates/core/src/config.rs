//! Run configuration: flat `section.key = value` files with `GCDLAB_*`
//! environment overrides.
//!
//! ```text
//! # comment
//! data.separation = 3.0
//! loss.cdr_scope = both
//! train.epochs = 200
//! ```
//!
//! Unknown keys are errors. `GCDLAB_LOSS_TAU_C=0.2` overrides `loss.tau_c`:
//! the text after the prefix splits at its first underscore into section and
//! key, both lowercased.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::SynthConfig;
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::model::ModelConfig;

pub const ENV_PREFIX: &str = "GCDLAB_";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub lr_min: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            batch_size: 128,
            lr0: 0.1,
            lr_min: 0.0,
            momentum: 0.9,
            weight_decay: 0.0,
            seed: 0,
        }
    }
}

/// Architecture settings not implied by the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub d_model: usize,
    pub tokens: usize,
    pub heads: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            d_model: 32,
            tokens: 4,
            heads: 4,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub data: SynthConfig,
    /// Load this `GCDS` file instead of generating from `data`.
    pub dataset: Option<PathBuf>,
    pub model: ArchConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::config(format!("bad value `{v}` for `{key}`")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::config(format!("bad boolean `{v}` for `{key}`"))),
    }
}

impl RunConfig {
    /// Sets one dotted key.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let v = v.trim();
        match key {
            "data.k_all" => self.data.k_all = parse(key, v)?,
            "data.k_base" => self.data.k_base = parse(key, v)?,
            "data.n_per_class" => self.data.n_per_class = parse(key, v)?,
            "data.d_in" => self.data.d_in = parse(key, v)?,
            "data.separation" => self.data.separation = parse(key, v)?,
            "data.sigma" => self.data.sigma = parse(key, v)?,
            "data.label_ratio" => self.data.label_ratio = parse(key, v)?,
            "data.aug_sigma" => self.data.aug_sigma = parse(key, v)?,
            "data.seed" => self.data.seed = parse(key, v)?,
            "data.path" => self.dataset = if v.is_empty() { None } else { Some(PathBuf::from(v)) },
            "model.d_model" => self.model.d_model = parse(key, v)?,
            "model.tokens" => self.model.tokens = parse(key, v)?,
            "model.heads" => self.model.heads = parse(key, v)?,
            "loss.lambda" => self.loss.lambda = parse(key, v)?,
            "loss.epsilon" => self.loss.epsilon = parse(key, v)?,
            "loss.alpha" => self.loss.alpha = parse(key, v)?,
            "loss.beta" => self.loss.beta = parse(key, v)?,
            "loss.tau_c" => self.loss.tau_c = parse(key, v)?,
            "loss.tau_s" => self.loss.tau_s = parse(key, v)?,
            "loss.tau_t_start" => self.loss.tau_t.start = parse(key, v)?,
            "loss.tau_t_end" => self.loss.tau_t.end = parse(key, v)?,
            "loss.tau_t_epochs" => self.loss.tau_t.epochs = parse(key, v)?,
            "loss.uncertainty" => self.loss.uncertainty = v.parse()?,
            "loss.distill_scope" => self.loss.distill_scope = v.parse()?,
            "loss.cdr_scope" => self.loss.cdr_scope = v.parse()?,
            "loss.use_aux" => self.loss.use_aux = parse_bool(key, v)?,
            "loss.use_distill" => self.loss.use_distill = parse_bool(key, v)?,
            "loss.allow_distill_without_aux" => self.loss.allow_distill_without_aux = parse_bool(key, v)?,
            "train.epochs" => self.train.epochs = parse(key, v)?,
            "train.batch_size" => self.train.batch_size = parse(key, v)?,
            "train.lr0" => self.train.lr0 = parse(key, v)?,
            "train.lr_min" => self.train.lr_min = parse(key, v)?,
            "train.momentum" => self.train.momentum = parse(key, v)?,
            "train.weight_decay" => self.train.weight_decay = parse(key, v)?,
            "train.seed" => self.train.seed = parse(key, v)?,
            _ => return Err(Error::config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Applies a config text on top of `self`.
    pub fn merge_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected `key = value`, got `{line}`", n + 1)))?;
            self.set(k.trim(), v)
                .map_err(|e| Error::config(format!("line {}: {}", n + 1, strip(&e))))?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = RunConfig::default();
        c.merge_text(text)?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    /// Applies `GCDLAB_SECTION_KEY=value` pairs; other variables are ignored.
    pub fn apply_env<I, K, V>(&mut self, vars: I) -> Result<()>
    where
        I: IntoIterator<Item = (K, V)>,
        K: AsRef<str>,
        V: AsRef<str>,
    {
        let mut pairs: Vec<(String, String)> = vars
            .into_iter()
            .filter_map(|(k, v)| {
                let rest = k.as_ref().strip_prefix(ENV_PREFIX)?;
                let (section, key) = rest.split_once('_')?;
                Some((
                    format!("{}.{}", section.to_ascii_lowercase(), key.to_ascii_lowercase()),
                    v.as_ref().to_string(),
                ))
            })
            .collect();
        pairs.sort();
        for (k, v) in pairs {
            self.set(&k, &v)
                .map_err(|e| Error::config(format!("environment override: {}", strip(&e))))?;
        }
        Ok(())
    }

    /// Model configuration for data of the given shape.
    pub fn model_config(&self, d_in: usize, k_all: usize, k_base: usize) -> ModelConfig {
        ModelConfig {
            d_in,
            d_model: self.model.d_model,
            tokens: self.model.tokens,
            heads: self.model.heads,
            k_all,
            k_base,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dataset.is_none() {
            self.data.validate()?;
            self.model_config(self.data.d_in, self.data.k_all, self.data.k_base).validate()?;
        }
        if let Some(p) = &self.dataset {
            if !p.exists() {
                return Err(Error::config(format!("dataset file {} does not exist", p.display())));
            }
        }
        self.loss.validate()?;
        let t = &self.train;
        if t.epochs == 0 {
            return Err(Error::config("train.epochs must be >= 1"));
        }
        if t.batch_size < 2 {
            return Err(Error::config("train.batch_size must be >= 2"));
        }
        if !(t.lr0 > 0.0) || !(t.lr_min >= 0.0) || !(t.weight_decay >= 0.0) {
            return Err(Error::config("need train.lr0 > 0, train.lr_min >= 0, train.weight_decay >= 0"));
        }
        if !(0.0..1.0).contains(&t.momentum) {
            return Err(Error::config("train.momentum must lie in [0, 1)"));
        }
        Ok(())
    }

    /// Every key with its resolved value, in `merge_text` syntax.
    pub fn to_text(&self) -> String {
        let (d, m, l, t) = (&self.data, &self.model, &self.loss, &self.train);
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("data.k_all", d.k_all.to_string());
        kv("data.k_base", d.k_base.to_string());
        kv("data.n_per_class", d.n_per_class.to_string());
        kv("data.d_in", d.d_in.to_string());
        kv("data.separation", d.separation.to_string());
        kv("data.sigma", d.sigma.to_string());
        kv("data.label_ratio", d.label_ratio.to_string());
        kv("data.aug_sigma", d.aug_sigma.to_string());
        kv("data.seed", d.seed.to_string());
        kv(
            "data.path",
            self.dataset.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
        );
        kv("model.d_model", m.d_model.to_string());
        kv("model.tokens", m.tokens.to_string());
        kv("model.heads", m.heads.to_string());
        kv("loss.lambda", l.lambda.to_string());
        kv("loss.epsilon", l.epsilon.to_string());
        kv("loss.alpha", l.alpha.to_string());
        kv("loss.beta", l.beta.to_string());
        kv("loss.tau_c", l.tau_c.to_string());
        kv("loss.tau_s", l.tau_s.to_string());
        kv("loss.tau_t_start", l.tau_t.start.to_string());
        kv("loss.tau_t_end", l.tau_t.end.to_string());
        kv("loss.tau_t_epochs", l.tau_t.epochs.to_string());
        kv("loss.uncertainty", l.uncertainty.to_string());
        kv("loss.distill_scope", l.distill_scope.to_string());
        kv("loss.cdr_scope", l.cdr_scope.to_string());
        kv("loss.use_aux", l.use_aux.to_string());
        kv("loss.use_distill", l.use_distill.to_string());
        kv("loss.allow_distill_without_aux", l.allow_distill_without_aux.to_string());
        kv("train.epochs", t.epochs.to_string());
        kv("train.batch_size", t.batch_size.to_string());
        kv("train.lr0", t.lr0.to_string());
        kv("train.lr_min", t.lr_min.to_string());
        kv("train.momentum", t.momentum.to_string());
        kv("train.weight_decay", t.weight_decay.to_string());
        kv("train.seed", t.seed.to_string());
        s
    }

    /// Built-in presets: `easy` (separation 6), `hard` (separation 3) and
    /// `label25` (easy with a quarter of each base class labeled).
    ///
    /// All three use the schedule tuned for the synthetic benchmarks:
    /// lr0 0.03 and ε 3 instead of the defaults' 0.1 and 1.
    pub fn preset(name: &str) -> Result<Self> {
        let mut c = RunConfig::default();
        c.train.lr0 = 0.03;
        c.loss.epsilon = 3.0;
        match name {
            "easy" => {}
            "hard" => c.data.separation = 3.0,
            "label25" => c.data.label_ratio = 0.25,
            _ => return Err(Error::config(format!("unknown preset `{name}` (easy, hard, label25)"))),
        }
        Ok(c)
    }
}

fn strip(e: &Error) -> String {
    match e {
        Error::Config(m) => m.clone(),
        other => other.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::CdrScope;

    #[test]
    fn defaults_follow_the_reference_schedule() {
        let c = RunConfig::default();
        assert_eq!((c.train.epochs, c.train.batch_size), (200, 128));
        assert_eq!((c.train.lr0, c.train.momentum), (0.1, 0.9));
        assert_eq!((c.loss.lambda, c.loss.alpha, c.loss.beta), (0.35, 0.5, 0.5));
        assert_eq!((c.loss.tau_c, c.loss.tau_s), (0.1, 0.07));
        assert!(c.validate().is_ok());
    }

    #[test]
    fn parses_text_and_comments() {
        let c = RunConfig::from_text("# hard\ndata.separation = 3 # sigma units\n\nloss.cdr_scope = main_only\n").unwrap();
        assert_eq!(c.data.separation, 3.0);
        assert_eq!(c.loss.cdr_scope, CdrScope::MainOnly);
    }

    #[test]
    fn unknown_key_is_named() {
        let e = RunConfig::from_text("loss.alpah = 1").unwrap_err().to_string();
        assert!(e.contains("loss.alpah"), "{e}");
        assert!(RunConfig::from_text("no equals sign").is_err());
        assert!(RunConfig::from_text("train.epochs = many").is_err());
    }

    #[test]
    fn presets_share_the_tuned_schedule() {
        for name in ["easy", "hard", "label25"] {
            let c = RunConfig::preset(name).unwrap();
            assert_eq!((c.train.lr0, c.loss.epsilon), (0.03, 3.0));
            assert!(c.validate().is_ok());
        }
        assert_eq!(RunConfig::preset("hard").unwrap().data.separation, 3.0);
        assert!(RunConfig::preset("medium").is_err());
    }

    #[test]
    fn env_overrides() {
        let mut c = RunConfig::default();
        c.apply_env([("GCDLAB_LOSS_TAU_C", "0.2"), ("HOME", "/root"), ("GCDLAB_TRAIN_EPOCHS", "3")])
            .unwrap();
        assert_eq!(c.loss.tau_c, 0.2);
        assert_eq!(c.train.epochs, 3);
        assert!(c.apply_env([("GCDLAB_LOSS_NOPE", "1")]).is_err());
    }

    #[test]
    fn text_round_trip() {
        let mut c = RunConfig::preset("hard").unwrap();
        c.loss.uncertainty = crate::losses::UncertaintyMode::CosMain;
        c.train.seed = 17;
        assert_eq!(RunConfig::from_text(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn distill_without_aux_needs_the_flag() {
        let mut c = RunConfig::default();
        c.loss.use_aux = false;
        assert!(c.validate().is_err());
        c.loss.allow_distill_without_aux = true;
        assert!(c.validate().is_ok());
    }

    #[test]
    fn presets() {
        assert_eq!(RunConfig::preset("hard").unwrap().data.separation, 3.0);
        assert_eq!(RunConfig::preset("label25").unwrap().data.label_ratio, 0.25);
        assert!(RunConfig::preset("medium").is_err());
    }
}
