//! TOML run configuration. Every section and key is optional; command-line
//! flags override file values.

use std::path::Path;

use aspnn::autodiff::Schedule;
use aspnn::combiner::Dominance;
use aspnn::rollout::PositionFeed;
use aspnn::simulator::SimConfig;
use aspnn::training::Case;
use serde::Deserialize;

use crate::Failure;

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    #[serde(default)]
    pub simulate: SimConfig,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub rollout: RolloutSection,
    #[serde(default)]
    pub mitosis: MitosisSection,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub case: Option<Case>,
    pub epochs: Option<usize>,
    pub lambda_d: Option<f64>,
    pub seed: Option<u64>,
    pub teacher_forcing: Option<bool>,
    pub dominance: Option<Dominance>,
    pub min_frames: Option<usize>,
    pub spnn: Option<Schedule>,
    pub conn: Option<Schedule>,
    pub combiner: Option<Schedule>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RolloutSection {
    pub frames: Option<usize>,
    pub feed: Option<PositionFeed>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MitosisSection {
    pub epochs: Option<usize>,
    pub seed: Option<u64>,
    pub schedule: Option<Schedule>,
    pub window: Option<u32>,
    pub threshold: Option<f64>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, Failure> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_sections() {
        let cfg: FileConfig = toml::from_str(
            r#"
            [simulate]
            n_cells = 5
            [train]
            case = "insilico-noise"
            epochs = 10
            spnn = { lr = 0.5, scheduler = { step_epochs = 3, gamma = 0.5 } }
            [rollout]
            feed = "observed"
            "#,
        )
        .unwrap();
        assert_eq!(cfg.simulate.n_cells, 5);
        assert_eq!(cfg.simulate.channel_width, 300.0);
        assert_eq!(cfg.train.case, Some(Case::InsilicoNoise));
        assert_eq!(cfg.train.spnn.unwrap().scheduler.step_epochs, 3);
        assert_eq!(cfg.rollout.feed, Some(PositionFeed::Observed));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<FileConfig>("[train]\nepoch = 3\n").is_err());
        assert!(toml::from_str::<FileConfig>("[plot]\n").is_err());
    }
}
