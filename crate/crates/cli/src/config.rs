//! `key = value` pipeline configuration.

use crate::CliError;
use std::str::FromStr;
use vsr_core::cmm::{MergerConfig, MergerTrainConfig};
use vsr_core::germ::{GermConfig, GermTrainConfig};
use vsr_core::graph::CcmConfig;
use vsr_core::raster::Connectivity;
use vsr_core::synth::SynthConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MergerChoice {
    Geometric,
    Learned,
}

impl FromStr for MergerChoice {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "geometric" => Ok(Self::Geometric),
            "learned" => Ok(Self::Learned),
            _ => Err(format!("expected geometric or learned, got {s:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub seed: u64,
    pub threads: usize,
    pub k: usize,
    pub tau: f64,
    pub connectivity: Connectivity,
    pub gcn_layers: usize,
    pub heads: usize,
    pub hidden: usize,
    pub germ_epochs: usize,
    pub germ_batch: usize,
    pub germ_lr: f64,
    pub cmm_epochs: usize,
    pub cmm_batch: usize,
    pub cmm_lr: f64,
    pub cmm_channels: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub merger: MergerChoice,
    /// Edges predicted at or above this probability are kept.
    pub threshold: f64,
    /// Training graphs used by `train-germ`; 0 keeps all.
    pub max_graphs: usize,
    pub samples: usize,
    pub size: usize,
    pub ruptures: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let germ = GermConfig::default();
        let gt = GermTrainConfig::default();
        let mt = MergerTrainConfig::default();
        let ccm = CcmConfig::default();
        let synth = SynthConfig::default();
        Self {
            seed: gt.seed,
            threads: 1,
            k: ccm.k,
            tau: ccm.tau,
            connectivity: ccm.connectivity,
            gcn_layers: germ.depth,
            heads: germ.heads,
            hidden: germ.hidden,
            germ_epochs: gt.epochs,
            germ_batch: gt.batch,
            germ_lr: gt.lr,
            cmm_epochs: mt.epochs,
            cmm_batch: mt.batch,
            cmm_lr: mt.lr,
            cmm_channels: MergerConfig::default().base_channels,
            momentum: gt.momentum,
            weight_decay: gt.weight_decay,
            merger: MergerChoice::Geometric,
            threshold: 0.5,
            max_graphs: 0,
            samples: 100,
            size: synth.dims[0],
            ruptures: synth.ruptures,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, CliError>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e: T::Err| CliError::Config {
        key: key.into(),
        message: format!("{value:?}: {e}"),
    })
}

impl PipelineConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        match key {
            "seed" => self.seed = parse(key, value)?,
            "threads" => self.threads = parse(key, value)?,
            "k" => self.k = parse(key, value)?,
            "tau" => self.tau = parse(key, value)?,
            "connectivity" => {
                self.connectivity = match value {
                    "full" => Connectivity::Full,
                    "faces" => Connectivity::Faces,
                    _ => {
                        return Err(CliError::Config {
                            key: key.into(),
                            message: format!("expected full or faces, got {value:?}"),
                        })
                    }
                }
            }
            "gcn_layers" => self.gcn_layers = parse(key, value)?,
            "heads" => self.heads = parse(key, value)?,
            "hidden" => self.hidden = parse(key, value)?,
            "germ_epochs" => self.germ_epochs = parse(key, value)?,
            "germ_batch" => self.germ_batch = parse(key, value)?,
            "germ_lr" => self.germ_lr = parse(key, value)?,
            "cmm_epochs" => self.cmm_epochs = parse(key, value)?,
            "cmm_batch" => self.cmm_batch = parse(key, value)?,
            "cmm_lr" => self.cmm_lr = parse(key, value)?,
            "cmm_channels" => self.cmm_channels = parse(key, value)?,
            "momentum" => self.momentum = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "merger" => self.merger = parse(key, value)?,
            "threshold" => self.threshold = parse(key, value)?,
            "max_graphs" => self.max_graphs = parse(key, value)?,
            "samples" => self.samples = parse(key, value)?,
            "size" => self.size = parse(key, value)?,
            "ruptures" => self.ruptures = parse(key, value)?,
            _ => {
                return Err(CliError::Config {
                    key: key.into(),
                    message: "unknown key".into(),
                })
            }
        }
        Ok(())
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<(), CliError> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| CliError::Config {
                key: format!("line {}", n + 1),
                message: format!("expected key = value, got {raw:?}"),
            })?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// Applies overrides in order, later entries winning.
    pub fn apply_pairs(&mut self, pairs: &[(&str, String)]) -> Result<(), CliError> {
        for (k, v) in pairs {
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |key: &str, message: &str| {
            Err(CliError::Config {
                key: key.into(),
                message: message.into(),
            })
        };
        let positive = [
            ("threads", self.threads),
            ("k", self.k),
            ("gcn_layers", self.gcn_layers),
            ("heads", self.heads),
            ("hidden", self.hidden),
            ("germ_epochs", self.germ_epochs),
            ("germ_batch", self.germ_batch),
            ("cmm_epochs", self.cmm_epochs),
            ("cmm_batch", self.cmm_batch),
            ("cmm_channels", self.cmm_channels),
            ("samples", self.samples),
        ];
        for (key, v) in positive {
            if v == 0 {
                return bad(key, "must be positive");
            }
        }
        for (key, v) in [("tau", self.tau), ("germ_lr", self.germ_lr), ("cmm_lr", self.cmm_lr)] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(key, "must be a positive number");
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum", "must lie in [0, 1)");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay", "must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return bad("threshold", "must lie in [0, 1]");
        }
        if self.size < 32 {
            return bad("size", "must be at least 32");
        }
        self.synth().validate().map_err(|e| CliError::Config {
            key: "size".into(),
            message: e.to_string(),
        })?;
        Ok(())
    }

    pub fn ccm(&self) -> CcmConfig {
        CcmConfig {
            k: self.k,
            tau: self.tau,
            connectivity: self.connectivity,
        }
    }

    pub fn germ(&self) -> GermConfig {
        GermConfig {
            depth: self.gcn_layers,
            heads: self.heads,
            hidden: self.hidden,
            ..GermConfig::default()
        }
    }

    pub fn germ_train(&self) -> GermTrainConfig {
        GermTrainConfig {
            epochs: self.germ_epochs,
            batch: self.germ_batch,
            lr: self.germ_lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            seed: self.seed,
        }
    }

    pub fn merger(&self) -> MergerConfig {
        MergerConfig {
            base_channels: self.cmm_channels,
        }
    }

    pub fn merger_train(&self) -> MergerTrainConfig {
        MergerTrainConfig {
            epochs: self.cmm_epochs,
            batch: self.cmm_batch,
            lr: self.cmm_lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            seed: self.seed,
        }
    }

    pub fn synth(&self) -> SynthConfig {
        SynthConfig {
            dims: vec![self.size, self.size],
            ruptures: self.ruptures,
            seed: self.seed,
            ..SynthConfig::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_then_overrides() {
        let mut cfg = PipelineConfig::default();
        cfg.apply_text("# run a\nk = 9\ntau=12.5 # px\n\nmerger = learned\n")
            .unwrap();
        assert_eq!((cfg.k, cfg.tau, cfg.merger), (9, 12.5, MergerChoice::Learned));
        cfg.apply_pairs(&[("k", "5".to_string()), ("k", "3".to_string())])
            .unwrap();
        assert_eq!(cfg.k, 3);
        cfg.validate().unwrap();
    }

    #[test]
    fn errors_name_the_key() {
        let mut cfg = PipelineConfig::default();
        let e = cfg.apply_text("tau = fast").unwrap_err();
        assert!(matches!(e, CliError::Config { ref key, .. } if key == "tau"), "{e}");
        let e = cfg.apply_text("colour = red").unwrap_err();
        assert!(matches!(e, CliError::Config { ref key, .. } if key == "colour"));
        cfg.momentum = 1.0;
        let e = cfg.validate().unwrap_err();
        assert!(e.to_string().contains("momentum"));
    }
}
