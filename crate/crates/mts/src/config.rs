//! Flat key=value run configuration. Unknown keys are rejected; the fully
//! resolved config is serialized into every run directory.

use std::fmt::Write as _;
use std::path::Path;

use crate::data::ShiftConfig;
use crate::error::{MtsError, Result};
use crate::nn::{Hyperparams, UnknownWeightMode};
use crate::trainer::Ablation;

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub shift: ShiftConfig,
    pub hp: Hyperparams,
    pub ablation: Ablation,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            shift: ShiftConfig::default(),
            hp: Hyperparams::default(),
            ablation: Ablation::Full,
        }
    }
}

impl RunConfig {
    pub fn parse_file(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| MtsError::Config(format!("{}: {e}", path.display())))?;
        Self::parse_str(&text)
    }

    pub fn parse_str(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        for (idx, raw) in text.lines().enumerate() {
            let lineno = idx + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                MtsError::Config(format!("line {lineno}: expected key=value, got {line:?}"))
            })?;
            let key = key.trim();
            let value = value.trim();
            cfg.apply(key, value)
                .map_err(|e| MtsError::Config(format!("line {lineno}, key {key:?}: {e}")))?;
        }
        cfg.shift.validate()?;
        cfg.hp.validate()?;
        Ok(cfg)
    }

    fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(v: &str) -> Result<T> {
            v.parse().map_err(|_| MtsError::Config(format!("bad value {v:?}")))
        }
        match key {
            "dim" => self.shift.dim = num(value)?,
            "known_classes" => self.shift.k = num(value)?,
            "unknown_classes" => self.shift.u = num(value)?,
            "rotation_deg" => self.shift.rotation_deg = num(value)?,
            "translation" => {
                self.shift.translation = value
                    .split(',')
                    .map(|s| num::<f64>(s.trim()))
                    .collect::<Result<_>>()?;
            }
            "noise_sigma" => self.shift.noise_sigma = num(value)?,
            "n_source" => self.shift.n_source = num(value)?,
            "n_target" => self.shift.n_target = num(value)?,
            "seed" => {
                let s: u64 = num(value)?;
                self.shift.seed = s;
                self.hp.seed = s;
            }
            "alpha" => self.hp.alpha = num(value)?,
            "beta" => self.hp.beta = num(value)?,
            "lr" => self.hp.lr = num(value)?,
            "momentum" => self.hp.momentum = num(value)?,
            "weight_decay" => self.hp.weight_decay = num(value)?,
            "batch_size" => self.hp.batch_size = num(value)?,
            "epochs" => self.hp.epochs = num(value)?,
            "unknown_weight_mode" => {
                self.hp.unknown_weight_mode = UnknownWeightMode::from_name(value)?
            }
            "lr_decay" => {
                self.hp.lr_decay = match value {
                    "true" => true,
                    "false" => false,
                    _ => return Err(MtsError::Config(format!("bad boolean {value:?}"))),
                }
            }
            "tau" => self.hp.tau = num(value)?,
            "hidden_dim" => self.hp.hidden_dim = num(value)?,
            "feat_dim" => self.hp.feat_dim = num(value)?,
            "disc_hidden_dim" => self.hp.disc_hidden_dim = num(value)?,
            "ablation" => self.ablation = Ablation::from_name(value)?,
            _ => return Err(MtsError::Config("unknown key".into())),
        }
        Ok(())
    }

    /// Re-applying the seed after a --seed override keeps both sub-seeds in sync.
    pub fn override_seed(&mut self, seed: u64) {
        self.shift.seed = seed;
        self.hp.seed = seed;
    }

    /// Fully resolved key=value text; parsing it back reproduces this config.
    pub fn to_resolved_string(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# resolved run configuration");
        let _ = writeln!(s, "dim={}", self.shift.dim);
        let _ = writeln!(s, "known_classes={}", self.shift.k);
        let _ = writeln!(s, "unknown_classes={}", self.shift.u);
        let _ = writeln!(s, "rotation_deg={}", self.shift.rotation_deg);
        let translation: Vec<String> =
            self.shift.translation.iter().map(|v| format!("{v}")).collect();
        let _ = writeln!(s, "translation={}", translation.join(","));
        let _ = writeln!(s, "noise_sigma={}", self.shift.noise_sigma);
        let _ = writeln!(s, "n_source={}", self.shift.n_source);
        let _ = writeln!(s, "n_target={}", self.shift.n_target);
        let _ = writeln!(s, "seed={}", self.hp.seed);
        let _ = writeln!(s, "alpha={}", self.hp.alpha);
        let _ = writeln!(s, "beta={}", self.hp.beta);
        let _ = writeln!(s, "lr={}", self.hp.lr);
        let _ = writeln!(s, "momentum={}", self.hp.momentum);
        let _ = writeln!(s, "weight_decay={}", self.hp.weight_decay);
        let _ = writeln!(s, "batch_size={}", self.hp.batch_size);
        let _ = writeln!(s, "epochs={}", self.hp.epochs);
        let _ = writeln!(s, "unknown_weight_mode={}", self.hp.unknown_weight_mode.name());
        let _ = writeln!(s, "lr_decay={}", self.hp.lr_decay);
        let _ = writeln!(s, "tau={}", self.hp.tau);
        let _ = writeln!(s, "hidden_dim={}", self.hp.hidden_dim);
        let _ = writeln!(s, "feat_dim={}", self.hp.feat_dim);
        let _ = writeln!(s, "disc_hidden_dim={}", self.hp.disc_hidden_dim);
        let _ = writeln!(s, "ablation={}", self.ablation.name());
        s
    }
}
