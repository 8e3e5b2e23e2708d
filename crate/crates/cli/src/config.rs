use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use geoadapt::net::ModelConfig;
use geoadapt::objectives::LossWeights;
use geoadapt::synthgeo::{make_domain_pair, DomainShiftSpec, PairSpec, SceneSpec};
use geoadapt::tensorstore::{read_domain, DomainData};
use geoadapt::trainer::{PretrainConfig, TrainConfig};

use crate::Failure;

/// Where the two domains come from: generated from a pair spec, or read from
/// dataset directories.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub synthetic: Option<PairSpec>,
    pub source_dir: Option<PathBuf>,
    pub target_dir: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        let scene = |seed| SceneSpec {
            height: 64,
            width: 64,
            class_count: 4,
            seed,
            region_scale: 16,
            channel_count: 4,
        };
        DataConfig {
            synthetic: Some(PairSpec {
                source: scene(1),
                target: scene(2),
                shift: DomainShiftSpec::uniform(4, 1.3, 0.1, 0.05),
                images_per_domain: 8,
                budget_per_class: 50,
                source_noise: 0.05,
            }),
            source_dir: None,
            target_dir: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub ratios: Vec<f64>,
    pub sweep_seed: u64,
    /// Write reconstruction tensors next to the sweep report.
    pub dump_tensors: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            ratios: vec![0.5, 0.75, 1.0],
            sweep_seed: 0,
            dump_tensors: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub pretrain: PretrainConfig,
    pub eval: EvalConfig,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: DataConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            pretrain: PretrainConfig::default(),
            eval: EvalConfig::default(),
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

/// Command-line values that win over the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seeds: Option<Vec<u64>>,
    pub lambda_da: Option<f64>,
    pub lambda_mae: Option<f64>,
    pub mask_ratio: Option<f64>,
    pub mask_ratios: Option<Vec<f64>>,
    pub out_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, Failure> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::config(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Failure::config(format!("invalid config {}: {e}", path.display())))
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<(), Failure> {
        if let Some(s) = &o.seeds {
            self.train.seeds = s.clone();
        }
        let w = LossWeights {
            lambda_da: o.lambda_da.unwrap_or(self.train.weights.lambda_da),
            lambda_mae: o.lambda_mae.unwrap_or(self.train.weights.lambda_mae),
        };
        self.train.weights = w;
        if let Some(r) = o.mask_ratio {
            self.train.mask_ratio = r;
        }
        if let Some(r) = &o.mask_ratios {
            self.eval.ratios = r.clone();
        }
        if let Some(d) = &o.out_dir {
            self.out_dir = d.clone();
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<(), Failure> {
        self.model.validate().map_err(Failure::config_err)?;
        self.train.validate().map_err(Failure::config_err)?;
        let d = &self.data;
        match (&d.synthetic, &d.source_dir, &d.target_dir) {
            (Some(_), None, None) | (None, Some(_), Some(_)) => {}
            _ => {
                return Err(Failure::config(
                    "data needs either `synthetic` or both `source_dir` and `target_dir`",
                ))
            }
        }
        if self.eval.ratios.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return Err(Failure::config("eval ratios must lie in [0, 1]"));
        }
        Ok(())
    }

    /// Digest of the sections that determine a trained model.
    pub fn digest(&self) -> Result<String, Failure> {
        #[derive(Serialize)]
        struct Key<'a> {
            data: &'a DataConfig,
            model: &'a ModelConfig,
            train: &'a TrainConfig,
        }
        geoadapt::trainer::config_digest(&Key {
            data: &self.data,
            model: &self.model,
            train: &self.train,
        })
        .map_err(|e| Failure::runtime("digest", e))
    }

    pub fn load_data(&self) -> Result<(DomainData, DomainData), Failure> {
        match (&self.data.synthetic, &self.data.source_dir, &self.data.target_dir) {
            (Some(spec), _, _) => make_domain_pair(spec).map_err(|e| Failure::runtime("data generation", e)),
            (None, Some(s), Some(t)) => {
                let src = read_domain(s).map_err(|e| Failure::runtime("data loading", e))?;
                let tgt = read_domain(t).map_err(|e| Failure::runtime("data loading", e))?;
                Ok((src, tgt))
            }
            _ => Err(Failure::config("no data source configured")),
        }
    }

    pub fn write_resolved(&self, dir: &Path) -> Result<(), Failure> {
        std::fs::create_dir_all(dir).map_err(|e| Failure::runtime("output", e))?;
        let text = serde_json::to_string_pretty(self).map_err(|e| Failure::runtime("output", e))?;
        std::fs::write(dir.join("config.json"), text + "\n").map_err(|e| Failure::runtime("output", e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_json() {
        let c = RunConfig::default();
        let text = serde_json::to_string(&c).unwrap();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(c, back);
        c.validate().unwrap();
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"trian": {}}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"train": {"lr": 1}}"#).is_err());
    }

    #[test]
    fn flags_win() {
        let mut c = RunConfig::default();
        c.apply(&Overrides {
            seeds: Some(vec![1, 2, 3]),
            lambda_da: Some(0.0),
            mask_ratio: Some(0.75),
            ..Default::default()
        })
        .unwrap();
        assert_eq!(c.train.seeds, vec![1, 2, 3]);
        assert_eq!(c.train.weights.lambda_da, 0.0);
        assert_eq!(c.train.weights.lambda_mae, 1.0);
        assert_eq!(c.train.mask_ratio, 0.75);
        let bad = c.apply(&Overrides {
            mask_ratio: Some(1.5),
            ..Default::default()
        });
        assert_eq!(bad.unwrap_err().code, 2);
    }
}
