//! Plain-text `key = value` configuration files.
//!
//! Blank lines and `#` comments are ignored. Unknown keys and malformed values
//! are rejected with the offending line number.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use cfa_core::losses::SimKind;
use cfa_core::synth::{ExpansionMode, ExpansionProvider, Split};
use cfa_core::train::{Arm, TrainConfig};

use crate::LabError;

/// Everything a command needs: one training configuration plus the
/// experiment grids.
#[derive(Debug, Clone, PartialEq)]
pub struct LabConfig {
    pub train: TrainConfig,
    /// Experiment seeds. Seed `s` trains with seed `s` on data seed
    /// `data_seed + s`.
    pub seeds: Vec<u64>,
    pub fractions: Vec<f64>,
    pub lambda3_grid: Vec<f64>,
    /// Split every experiment reports on.
    pub eval_split: Split,
    pub expansion: ExpansionProvider,
    /// Records to train on instead of generating them.
    pub data_path: Option<PathBuf>,
}

impl Default for LabConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            seeds: vec![0, 1, 2],
            fractions: vec![1.0, 0.12],
            lambda3_grid: vec![0.1, 0.25, 0.5, 0.75, 1.0],
            eval_split: Split::Ood,
            expansion: ExpansionProvider::template(),
            data_path: None,
        }
    }
}

fn value<T: FromStr>(key: &str, raw: &str) -> Result<T, String> {
    raw.parse().map_err(|_| format!("invalid value {raw:?} for {key}"))
}

fn list<T: FromStr>(key: &str, raw: &str) -> Result<Vec<T>, String> {
    raw.split(',').map(|s| value(key, s.trim())).collect()
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl LabConfig {
    /// Applies one assignment.
    pub fn set(&mut self, key: &str, raw: &str) -> Result<(), String> {
        let t = &mut self.train;
        match key {
            "classes" => t.data.classes = value(key, raw)?,
            "n_total" => t.data.n_total = value(key, raw)?,
            "imbalance_rho" => t.data.imbalance_rho = value(key, raw)?,
            "n_patches" => t.data.n_patches = value(key, raw)?,
            "d_v" => t.data.d_v = value(key, raw)?,
            "vocab_size" => t.data.vocab_size = value(key, raw)?,
            "desc_len" => t.data.desc_len = value(key, raw)?,
            "noise_sigma" => t.data.noise_sigma = value(key, raw)?,
            "data_seed" => t.data.seed = value(key, raw)?,
            "eval_per_class" => t.data.eval_per_class = value(key, raw)?,
            "ood_angle" => t.data.ood_angle = value(key, raw)?,
            "d_enc" => t.model.d_enc = value(key, raw)?,
            "d_llm" => t.model.d_llm = value(key, raw)?,
            "d_k" => t.model.d_k = value(key, raw)?,
            "layers" => t.model.layers = value(key, raw)?,
            "lora_rank" => t.model.lora_rank = value(key, raw)?,
            "lora_alpha" => t.model.lora_alpha = value(key, raw)?,
            "fuse_pool" => t.model.fuse_pool = value(key, raw)?,
            "pretrained_seed" => t.model.pretrained_seed = value(key, raw)?,
            "lambda1" => t.loss.weights.lambda1 = value(key, raw)?,
            "lambda2" => t.loss.weights.lambda2 = value(key, raw)?,
            "lambda3" => t.loss.weights.lambda3 = value(key, raw)?,
            "gamma" => t.loss.gamma = value(key, raw)?,
            "tau" => t.loss.tau = value(key, raw)?,
            "sim" => {
                t.loss.sim = match raw {
                    "cosine" => SimKind::Cosine,
                    "dot" => SimKind::Dot,
                    _ => return Err(format!("sim must be cosine or dot, got {raw:?}")),
                }
            }
            "lr" => t.optim.adamw.lr = value(key, raw)?,
            "beta1" => t.optim.adamw.beta1 = value(key, raw)?,
            "beta2" => t.optim.adamw.beta2 = value(key, raw)?,
            "eps" => t.optim.adamw.eps = value(key, raw)?,
            "weight_decay" => t.optim.adamw.weight_decay = value(key, raw)?,
            "epochs" => t.optim.epochs = value(key, raw)?,
            "batch_size" => t.optim.batch_size = value(key, raw)?,
            "seed" => t.seed = value(key, raw)?,
            "arm" => t.arm = Arm::parse(raw).map_err(|e| e.to_string())?,
            "seeds" => self.seeds = list(key, raw)?,
            "fractions" => self.fractions = list(key, raw)?,
            "lambda3_grid" => self.lambda3_grid = list(key, raw)?,
            "eval_split" => self.eval_split = Split::parse(raw).map_err(|e| e.to_string())?,
            "expansion" => {
                self.expansion.mode = match raw {
                    "template" => ExpansionMode::Template,
                    "external" => ExpansionMode::External,
                    _ => return Err(format!("expansion must be template or external, got {raw:?}")),
                }
            }
            "endpoint" => self.expansion.endpoint = (!raw.is_empty()).then(|| raw.to_string()),
            "data" => self.data_path = (!raw.is_empty()).then(|| PathBuf::from(raw)),
            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self, LabError> {
        let mut cfg = Self::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |message: String| LabError::Config { line: i + 1, message };
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected key = value, got {line:?}")))?;
            cfg.set(k.trim(), v.trim()).map_err(err)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, LabError> {
        let text = std::fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<(), LabError> {
        self.train.validate()?;
        let bad = |message: &str| LabError::Config {
            line: 0,
            message: message.to_string(),
        };
        if self.seeds.is_empty() {
            return Err(bad("seeds must not be empty"));
        }
        if self.fractions.is_empty() || self.fractions.iter().any(|&f| !(f > 0.0 && f <= 1.0)) {
            return Err(bad("fractions must lie in (0, 1]"));
        }
        if self.lambda3_grid.is_empty() || self.lambda3_grid.iter().any(|&l| !(l >= 0.0)) {
            return Err(bad("lambda3_grid must be a nonempty list of nonnegative weights"));
        }
        if self.expansion.mode == ExpansionMode::External && self.expansion.endpoint.is_none() {
            return Err(bad("external expansion needs an endpoint"));
        }
        Ok(())
    }

    /// Canonical listing of every key; parsing it reproduces `self`.
    pub fn echo(&self) -> String {
        let t = &self.train;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("classes", t.data.classes.to_string());
        kv("n_total", t.data.n_total.to_string());
        kv("imbalance_rho", t.data.imbalance_rho.to_string());
        kv("n_patches", t.data.n_patches.to_string());
        kv("d_v", t.data.d_v.to_string());
        kv("vocab_size", t.data.vocab_size.to_string());
        kv("desc_len", t.data.desc_len.to_string());
        kv("noise_sigma", t.data.noise_sigma.to_string());
        kv("data_seed", t.data.seed.to_string());
        kv("eval_per_class", t.data.eval_per_class.to_string());
        kv("ood_angle", t.data.ood_angle.to_string());
        kv("d_enc", t.model.d_enc.to_string());
        kv("d_llm", t.model.d_llm.to_string());
        kv("d_k", t.model.d_k.to_string());
        kv("layers", t.model.layers.to_string());
        kv("lora_rank", t.model.lora_rank.to_string());
        kv("lora_alpha", t.model.lora_alpha.to_string());
        kv("fuse_pool", t.model.fuse_pool.to_string());
        kv("pretrained_seed", t.model.pretrained_seed.to_string());
        kv("lambda1", t.loss.weights.lambda1.to_string());
        kv("lambda2", t.loss.weights.lambda2.to_string());
        kv("lambda3", t.loss.weights.lambda3.to_string());
        kv("gamma", t.loss.gamma.to_string());
        kv("tau", t.loss.tau.to_string());
        kv("sim", t.loss.sim.name().to_string());
        kv("lr", t.optim.adamw.lr.to_string());
        kv("beta1", t.optim.adamw.beta1.to_string());
        kv("beta2", t.optim.adamw.beta2.to_string());
        kv("eps", t.optim.adamw.eps.to_string());
        kv("weight_decay", t.optim.adamw.weight_decay.to_string());
        kv("epochs", t.optim.epochs.to_string());
        kv("batch_size", t.optim.batch_size.to_string());
        kv("seed", t.seed.to_string());
        kv("arm", t.arm.name().to_string());
        kv("seeds", join(&self.seeds));
        kv("fractions", join(&self.fractions));
        kv("lambda3_grid", join(&self.lambda3_grid));
        kv("eval_split", self.eval_split.name().to_string());
        kv(
            "expansion",
            match self.expansion.mode {
                ExpansionMode::Template => "template",
                ExpansionMode::External => "external",
            }
            .to_string(),
        );
        kv("endpoint", self.expansion.endpoint.clone().unwrap_or_default());
        kv(
            "data",
            self.data_path.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
        );
        s
    }

    /// Copy configured for experiment seed `seed`.
    pub fn for_seed(&self, seed: u64) -> TrainConfig {
        let mut t = self.train.clone();
        t.seed = seed;
        t.data.seed = self.train.data.seed.wrapping_add(seed);
        t
    }
}
