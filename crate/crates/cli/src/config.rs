//! Run configuration, read from TOML. Unknown keys are rejected at every
//! level.

use std::path::Path;

use anyhow::{bail, Context, Result};
use g2a_core::ac::AcConfig;
use g2a_core::comm::{CommConfig, ReinforceConfig};
use g2a_core::env::{PPConfig, TJConfig};
use g2a_core::Aggregator;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    GaComm,
    GaAc,
    AblationSoftOnly,
    AblationMeanPool,
    Independent,
}

impl Algorithm {
    pub fn aggregator(self) -> Aggregator {
        match self {
            Algorithm::GaComm | Algorithm::GaAc => Aggregator::TwoStage,
            Algorithm::AblationSoftOnly => Aggregator::SoftOnly,
            Algorithm::AblationMeanPool => Aggregator::MeanPool,
            Algorithm::Independent => Aggregator::None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum EnvConfig {
    TrafficJunction(TJConfig),
    PredatorPrey(PPConfig),
}

/// Training stops at whichever limit is reached first.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Budget {
    pub env_steps: Option<u64>,
    pub episodes: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Training episodes between evaluations.
    pub interval: u64,
    pub episodes: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { interval: 100, episodes: 32, seed: 12345 }
    }
}

/// From update `epoch` on, the junction runs with `n_max` cars and arrival
/// probability `p_arrive`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurriculumStage {
    pub epoch: u64,
    pub n_max: usize,
    pub p_arrive: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub name: String,
    pub algorithm: Algorithm,
    pub seeds: Vec<u64>,
    pub env: EnvConfig,
    pub budget: Budget,
    #[serde(default)]
    pub eval: EvalConfig,
    /// Communication policy. `aggregator` is taken from `algorithm`.
    #[serde(default)]
    pub comm: CommConfig,
    #[serde(default)]
    pub reinforce: ReinforceConfig,
    /// Actor-critic learner. `aggregator` is taken from `algorithm`.
    #[serde(default)]
    pub ac: AcConfig,
    #[serde(default)]
    pub curriculum: Vec<CurriculumStage>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text).context("parsing run config")?;
        cfg.comm.aggregator = cfg.algorithm.aggregator();
        cfg.ac.aggregator = cfg.algorithm.aggregator();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.name.contains(['/', '\\']) || self.name.starts_with('.') {
            bail!("run name `{}` is not a plain directory name", self.name);
        }
        if self.seeds.is_empty() {
            bail!("at least one seed is required");
        }
        if self.budget.env_steps.is_none() && self.budget.episodes.is_none() {
            bail!("budget needs env_steps or episodes");
        }
        if self.eval.interval == 0 || self.eval.episodes == 0 {
            bail!("eval interval and episodes must be positive");
        }
        match (&self.env, self.algorithm) {
            (EnvConfig::TrafficJunction(tj), alg) => {
                if alg == Algorithm::GaAc {
                    bail!("ga-ac runs on predator-prey; use ga-comm for the traffic junction");
                }
                tj.validate()?;
                let mut last = None;
                for st in &self.curriculum {
                    if let Some((e, n)) = last {
                        if st.epoch <= e {
                            bail!("curriculum epochs must be strictly increasing");
                        }
                        if st.n_max < n {
                            bail!("curriculum may add cars but never remove them");
                        }
                    }
                    last = Some((st.epoch, st.n_max));
                    TJConfig { n_max: st.n_max, p_arrive: st.p_arrive, ..tj.clone() }.validate()?;
                }
            }
            (EnvConfig::PredatorPrey(pp), alg) => {
                if alg == Algorithm::GaComm {
                    bail!("ga-comm runs on the traffic junction; use ga-ac for predator-prey");
                }
                if !self.curriculum.is_empty() {
                    bail!("curriculum applies to the traffic junction only");
                }
                pp.validate()?;
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form; checkpoints record it.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }
}

/// Stage in force at update `epoch`: the last stage starting at or before
/// it. `None` before the first stage or without a curriculum.
pub fn curriculum_step(stages: &[CurriculumStage], epoch: u64) -> Option<&CurriculumStage> {
    stages.iter().take_while(|s| s.epoch <= epoch).last()
}

#[cfg(test)]
mod tests {
    use super::*;

    const TJ: &str = r#"
name = "t"
algorithm = "ga-comm"
seeds = [1]
[env]
kind = "traffic-junction"
difficulty = "easy"
dim = 7
n_max = 5
p_arrive = 0.3
max_steps = 20
[budget]
env_steps = 1000
"#;

    #[test]
    fn parses_and_sets_aggregator() {
        let cfg = RunConfig::from_toml(&TJ.replace("ga-comm", "ablation-soft-only")).unwrap();
        assert_eq!(cfg.comm.aggregator, Aggregator::SoftOnly);
        assert_eq!(cfg.eval, EvalConfig::default());
    }

    #[test]
    fn rejects_unknown_keys() {
        assert!(RunConfig::from_toml(&format!("{TJ}\nbogus = 1")).is_err());
        assert!(RunConfig::from_toml(&TJ.replace("dim = 7", "dim = 7\nwidth = 3")).is_err());
        assert!(RunConfig::from_toml(&format!("{TJ}\n[comm]\nhidden = 3")).is_err());
    }

    #[test]
    fn rejects_mismatched_algorithm() {
        assert!(RunConfig::from_toml(&TJ.replace("ga-comm", "ga-ac")).is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::from_toml(TJ).unwrap();
        let b = RunConfig::from_toml(&TJ.replace("[1]", "[2]")).unwrap();
        assert_eq!(a.hash(), RunConfig::from_toml(TJ).unwrap().hash());
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn curriculum_lookup() {
        let st = vec![
            CurriculumStage { epoch: 0, n_max: 3, p_arrive: 0.1 },
            CurriculumStage { epoch: 10, n_max: 5, p_arrive: 0.3 },
        ];
        assert_eq!(curriculum_step(&st, 0).unwrap().n_max, 3);
        assert_eq!(curriculum_step(&st, 9).unwrap().n_max, 3);
        assert_eq!(curriculum_step(&st, 10).unwrap().n_max, 5);
        assert!(curriculum_step(&st[1..], 3).is_none());
        assert!(curriculum_step(&[], 3).is_none());
    }

    #[test]
    fn curriculum_must_increase() {
        let text = format!("{TJ}\n[[curriculum]]\nepoch = 5\nn_max = 3\np_arrive = 0.1\n[[curriculum]]\nepoch = 5\nn_max = 4\np_arrive = 0.2\n");
        assert!(RunConfig::from_toml(&text).is_err());
        let shrink = format!("{TJ}\n[[curriculum]]\nepoch = 0\nn_max = 5\np_arrive = 0.1\n[[curriculum]]\nepoch = 5\nn_max = 4\np_arrive = 0.2\n");
        assert!(RunConfig::from_toml(&shrink).is_err());
    }
}
