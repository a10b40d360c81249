//! Variant configurations (Table-III-style presets plus a tiny test config)
//! and their validation.

use serde::{Deserialize, Serialize};

use crate::degc::GcnVariant;
use crate::error::{Error, Result};

/// Partition-count ceiling applied by validation unless explicitly lifted.
pub const KAPPA_MAX: usize = 6;

pub const DEFAULT_NUM_CLASSES: usize = 1000;
/// Hidden width of the two-FC classification head.
pub const DEFAULT_HEAD_HIDDEN: usize = 2048;

/// Stem shape: `k_h` stride-2 3x3 convs (BN + GeLU), `k_s` stride-1 3x3
/// convs (BN + GeLU), one final stride-1 3x3 conv. `channels` lists the
/// output width of each stride-2 conv; the last entry must equal the
/// backbone width.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StemConfig {
    pub k_h: usize,
    pub k_s: usize,
    pub channels: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub name: String,
    pub n_b: usize,
    pub c_iso: usize,
    pub n_iso: usize,
    pub kappa: usize,
    pub k_schedule: Vec<usize>,
    pub stem: StemConfig,
    pub num_classes: usize,
    pub head_hidden: usize,
    pub variant: GcnVariant,
    /// Lift the kappa <= 6 constraint (benchmarking only).
    #[serde(default)]
    pub allow_large_kappa: bool,
}

/// Per-block neighbor counts: round(9 + 9 l / (n_b - 1)), linear 9 -> 18.
pub fn default_k_schedule(n_b: usize) -> Vec<usize> {
    (0..n_b)
        .map(|l| {
            if n_b <= 1 {
                9
            } else {
                (9.0 + 9.0 * l as f64 / (n_b - 1) as f64).round() as usize
            }
        })
        .collect()
}

impl ModelConfig {
    /// Named presets: cvig-ti, cvig-s, cvig-b, cvig-b-hr, tiny.
    pub fn preset(name: &str) -> Result<ModelConfig> {
        let cfg = match name {
            "cvig-ti" => ModelConfig::isotropic("cvig-ti", 12, 192, 196, 4),
            "cvig-s" => ModelConfig::isotropic("cvig-s", 16, 320, 196, 4),
            "cvig-b" => ModelConfig::isotropic("cvig-b", 16, 640, 196, 4),
            "cvig-b-hr" => {
                let mut cfg = ModelConfig::isotropic("cvig-b-hr", 16, 640, 784, 6);
                cfg.stem = StemConfig {
                    k_h: 3,
                    k_s: 1,
                    channels: vec![160, 320, 640],
                };
                cfg
            }
            "tiny" => ModelConfig {
                name: "tiny".into(),
                n_b: 2,
                c_iso: 16,
                n_iso: 16,
                kappa: 2,
                k_schedule: vec![3, 3],
                stem: StemConfig {
                    k_h: 2,
                    k_s: 1,
                    channels: vec![8, 16],
                },
                num_classes: 3,
                head_hidden: 16,
                variant: GcnVariant::GGin,
                allow_large_kappa: false,
            },
            other => {
                return Err(Error::InvalidArg(format!("unknown preset '{}'", other)));
            }
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn preset_names() -> &'static [&'static str] {
        &["cvig-ti", "cvig-s", "cvig-b", "cvig-b-hr", "tiny"]
    }

    fn isotropic(name: &str, n_b: usize, c_iso: usize, n_iso: usize, kappa: usize) -> ModelConfig {
        ModelConfig {
            name: name.into(),
            n_b,
            c_iso,
            n_iso,
            kappa,
            k_schedule: default_k_schedule(n_b),
            stem: StemConfig {
                k_h: 4,
                k_s: 1,
                channels: vec![c_iso / 8, c_iso / 4, c_iso / 2, c_iso],
            },
            num_classes: DEFAULT_NUM_CLASSES,
            head_hidden: DEFAULT_HEAD_HIDDEN,
            variant: GcnVariant::GGin,
            allow_large_kappa: false,
        }
    }

    /// Token grid side; `n_iso` must be a perfect square.
    pub fn h_iso(&self) -> usize {
        (self.n_iso as f64).sqrt().round() as usize
    }

    /// Expected input resolution: h_iso * 2^k_h.
    pub fn img_size(&self) -> usize {
        self.h_iso() << self.stem.k_h
    }

    pub fn validate(&self) -> Result<()> {
        let h = self.h_iso();
        if h * h != self.n_iso {
            return Err(Error::InvalidArg(format!(
                "n_iso {} is not a perfect square",
                self.n_iso
            )));
        }
        if self.n_b < 1 || self.c_iso < 1 || self.num_classes < 1 || self.head_hidden < 1 {
            return Err(Error::InvalidArg("zero-sized config field".into()));
        }
        if self.kappa < 1 || self.kappa > self.n_iso {
            return Err(Error::InvalidArg(format!(
                "kappa {} outside [1, {}]",
                self.kappa, self.n_iso
            )));
        }
        if self.kappa > KAPPA_MAX && !self.allow_large_kappa {
            return Err(Error::InvalidArg(format!(
                "kappa {} exceeds the cap {} (set allow_large_kappa to lift)",
                self.kappa, KAPPA_MAX
            )));
        }
        if self.k_schedule.len() != self.n_b {
            return Err(Error::InvalidArg("k_schedule length != n_b".into()));
        }
        if self.k_schedule.iter().any(|&k| k < 1) {
            return Err(Error::InvalidArg("k_schedule entries must be >= 1".into()));
        }
        if self.stem.channels.len() != self.stem.k_h {
            return Err(Error::InvalidArg(
                "stem channel list length != k_h".into(),
            ));
        }
        if self.stem.channels.last() != Some(&self.c_iso) {
            return Err(Error::InvalidArg(
                "last stem channel must equal c_iso".into(),
            ));
        }
        Ok(())
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::InvalidArg(format!("config encode: {}", e)))
    }

    pub fn from_toml_str(s: &str) -> Result<ModelConfig> {
        let cfg: ModelConfig =
            toml::from_str(s).map_err(|e| Error::InvalidArg(format!("config parse: {}", e)))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn k_schedule_is_linear_9_to_18() {
        let k12 = default_k_schedule(12);
        assert_eq!(k12.len(), 12);
        assert_eq!(k12[0], 9);
        assert_eq!(k12[11], 18);
        for w in k12.windows(2) {
            assert!(w[1] >= w[0]);
        }
        let k16 = default_k_schedule(16);
        assert_eq!(k16[0], 9);
        assert_eq!(k16[15], 18);
    }

    #[test]
    fn presets_match_table() {
        let ti = ModelConfig::preset("cvig-ti").unwrap();
        assert_eq!((ti.n_b, ti.c_iso, ti.n_iso, ti.kappa), (12, 192, 196, 4));
        assert_eq!(ti.img_size(), 224);
        let s = ModelConfig::preset("cvig-s").unwrap();
        assert_eq!((s.n_b, s.c_iso, s.n_iso), (16, 320, 196));
        let b = ModelConfig::preset("cvig-b").unwrap();
        assert_eq!((b.n_b, b.c_iso, b.n_iso), (16, 640, 196));
        let bhr = ModelConfig::preset("cvig-b-hr").unwrap();
        assert_eq!((bhr.n_b, bhr.c_iso, bhr.n_iso, bhr.kappa), (16, 640, 784, 6));
        assert_eq!(bhr.img_size(), 224);
        assert!(ModelConfig::preset("cvig-xxl").is_err());
    }

    #[test]
    fn kappa_cap_enforced() {
        let mut cfg = ModelConfig::preset("tiny").unwrap();
        cfg.kappa = 7;
        assert!(cfg.validate().is_err());
        cfg.allow_large_kappa = true;
        cfg.validate().unwrap();
    }

    #[test]
    fn toml_round_trip() {
        let cfg = ModelConfig::preset("cvig-ti").unwrap();
        let s = cfg.to_toml_string().unwrap();
        let back = ModelConfig::from_toml_str(&s).unwrap();
        assert_eq!(cfg, back);
    }
}
