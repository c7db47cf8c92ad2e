//! The assembled predictor: gradient-matrix network, environmental network,
//! combiner, optional mitosis classifier and the frozen normalization
//! statistics, plus the JSON checkpoint container.

use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Activation, DenseNet, Layer};
use crate::combiner::{contribution_split, CombinerLayer, Contribution, CONN_SIZES};
use crate::dataset::{slot, CellState, FeatureVector, NormStats, FEATURE_DIM};
use crate::error::{Error, Result};
use crate::generic::{
    generic_step, predict_gradient_matrices, GenericOperators, GradientMatrices, SPNN_SIZES,
};

pub const CHECKPOINT_VERSION: u32 = 1;
const CHECKPOINT_FORMAT: &str = "aspnn-checkpoint";

/// Mitosis classifier with its own feature statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct MitosisModel {
    pub net: DenseNet,
    pub stats: NormStats,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct MitosisFile {
    format: String,
    version: u32,
    network: NetRecord,
    stats: NormStats,
}

const MITOSIS_FORMAT: &str = "aspnn-mitosis";

impl MitosisModel {
    /// Standalone JSON container, same conventions as the bundle checkpoint.
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(&MitosisFile {
            format: MITOSIS_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            network: NetRecord::from_net(&self.net),
            stats: self.stats.clone(),
        })
        .map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let f: MitosisFile =
            serde_json::from_str(text).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if f.format != MITOSIS_FORMAT || f.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported mitosis file {:?} version {}",
                f.format, f.version
            )));
        }
        Ok(Self {
            net: f.network.to_net()?,
            stats: f.stats,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub spnn: DenseNet,
    pub conn: DenseNet,
    pub combiner: CombinerLayer,
    pub mitosis: Option<MitosisModel>,
    pub state_stats: NormStats,
    pub feature_stats: NormStats,
    pub ops: GenericOperators,
    pub dt: f64,
    pub teacher_forcing: bool,
    pub config_hash: String,
}

/// Everything one pipeline step produces. Velocities are in normalized
/// units except `velocity`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutput {
    pub z_norm: CellState,
    pub gradients: GradientMatrices,
    /// GENERIC step of the normalized state.
    pub z_spnn: CellState,
    pub v_spnn: [f64; 2],
    pub v_conn: [f64; 2],
    pub contribution: Contribution,
    /// Combined velocity, pixels/frame.
    pub velocity: [f64; 2],
    /// Next physical state: position advanced by `velocity * dt`.
    pub next: CellState,
}

impl ModelBundle {
    pub fn validate(&self) -> Result<()> {
        if self.spnn.sizes() != SPNN_SIZES {
            return Err(Error::InvalidNet(format!(
                "SPNN widths {:?}, expected {:?}",
                self.spnn.sizes(),
                SPNN_SIZES
            )));
        }
        if self.conn.input_dim() != FEATURE_DIM || self.conn.output_dim() != 2 {
            return Err(Error::InvalidNet("CoNN must map 23 features to 2 outputs".into()));
        }
        if self.state_stats.dim() != CellState::DIM {
            return Err(Error::dim("state statistics", CellState::DIM, self.state_stats.dim()));
        }
        if self.feature_stats.dim() != FEATURE_DIM {
            return Err(Error::dim("feature statistics", FEATURE_DIM, self.feature_stats.dim()));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::Config("dt must be > 0".into()));
        }
        Ok(())
    }

    pub fn normalize_state(&self, z: &CellState) -> CellState {
        CellState::from_slice(&self.state_stats.normalize(&z.to_array()))
    }

    pub fn normalize_features(&self, f: &FeatureVector) -> FeatureVector {
        let v = self.feature_stats.normalize(f.as_slice());
        let mut out = [0.0; FEATURE_DIM];
        out.copy_from_slice(&v);
        FeatureVector(out)
    }

    /// One pipeline step from physical state `z` with raw features `f`. The
    /// feature vector is used as given; callers decide what goes into its
    /// position slots.
    pub fn step(&self, z: &CellState, f: &FeatureVector) -> Result<StepOutput> {
        let z_norm = self.normalize_state(z);
        let gradients = predict_gradient_matrices(&self.spnn, &z_norm)?;
        let z_spnn = generic_step(&z_norm, &self.ops, &gradients, self.dt)?;
        let v_spnn = [z_spnn.vx, z_spnn.vy];
        let out = self.conn.forward(self.normalize_features(f).as_slice())?;
        let v_conn = [out[0], out[1]];
        let contribution = contribution_split(&self.combiner, v_spnn, v_conn);
        let v = contribution.output();
        let velocity = [
            self.state_stats.denormalize_value(2, v[0]),
            self.state_stats.denormalize_value(3, v[1]),
        ];
        let next = CellState::new(
            z.x + velocity[0] * self.dt,
            z.y + velocity[1] * self.dt,
            velocity[0],
            velocity[1],
        );
        if !next.is_finite() {
            return Err(Error::Diverged {
                context: "pipeline produced a non-finite state".into(),
            });
        }
        Ok(StepOutput {
            z_norm,
            gradients,
            z_spnn,
            v_spnn,
            v_conn,
            contribution,
            velocity,
            next,
        })
    }

    /// Features with the cell-center slots replaced by `(x, y)`.
    pub fn with_position(f: &FeatureVector, x: f64, y: f64) -> FeatureVector {
        let mut out = *f;
        out.0[slot::CENTER] = x;
        out.0[slot::CENTER + 1] = y;
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::write_atomic(path, &self.to_json()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(&Checkpoint::from_bundle(self))
            .map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ckpt: Checkpoint =
            serde_json::from_str(text).map_err(|e| Error::Checkpoint(e.to_string()))?;
        ckpt.into_bundle()
    }
}

/// Serialized form of one layer; weights are row-major `out × in`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerRecord {
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NetRecord {
    pub layers: Vec<LayerRecord>,
}

impl NetRecord {
    pub fn from_net(net: &DenseNet) -> Self {
        Self {
            layers: net
                .layers()
                .iter()
                .map(|l| LayerRecord {
                    in_dim: l.in_dim(),
                    out_dim: l.out_dim(),
                    activation: l.activation,
                    weights: l.weight.iter().copied().collect(),
                    bias: l.bias.to_vec(),
                })
                .collect(),
        }
    }

    pub fn to_net(&self) -> Result<DenseNet> {
        let layers = self
            .layers
            .iter()
            .enumerate()
            .map(|(k, l)| {
                let weight = Array2::from_shape_vec((l.out_dim, l.in_dim), l.weights.clone())
                    .map_err(|_| {
                        Error::Checkpoint(format!(
                            "layer {k}: {} weights for a {}x{} matrix",
                            l.weights.len(),
                            l.out_dim,
                            l.in_dim
                        ))
                    })?;
                Ok(Layer {
                    weight,
                    bias: Array1::from(l.bias.clone()),
                    activation: l.activation,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        DenseNet::new(layers)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Networks {
    spnn: NetRecord,
    conn: NetRecord,
    combiner: NetRecord,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    mitosis: Option<NetRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    config_hash: String,
    teacher_forcing: bool,
    dt: f64,
    networks: Networks,
    state_stats: NormStats,
    feature_stats: NormStats,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    mitosis_stats: Option<NormStats>,
}

impl Checkpoint {
    fn from_bundle(b: &ModelBundle) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config_hash: b.config_hash.clone(),
            teacher_forcing: b.teacher_forcing,
            dt: b.dt,
            networks: Networks {
                spnn: NetRecord::from_net(&b.spnn),
                conn: NetRecord::from_net(&b.conn),
                combiner: NetRecord::from_net(b.combiner.net()),
                mitosis: b.mitosis.as_ref().map(|m| NetRecord::from_net(&m.net)),
            },
            state_stats: b.state_stats.clone(),
            feature_stats: b.feature_stats.clone(),
            mitosis_stats: b.mitosis.as_ref().map(|m| m.stats.clone()),
        }
    }

    fn into_bundle(self) -> Result<ModelBundle> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!("unknown format {:?}", self.format)));
        }
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {} (expected {CHECKPOINT_VERSION})",
                self.version
            )));
        }
        let mitosis = match (self.networks.mitosis, self.mitosis_stats) {
            (Some(net), Some(stats)) => Some(MitosisModel {
                net: net.to_net()?,
                stats,
            }),
            (None, None) => None,
            _ => {
                return Err(Error::Checkpoint(
                    "mitosis network and statistics must be stored together".into(),
                ))
            }
        };
        let bundle = ModelBundle {
            spnn: self.networks.spnn.to_net()?,
            conn: self.networks.conn.to_net()?,
            combiner: CombinerLayer::from_net(self.networks.combiner.to_net()?)?,
            mitosis,
            state_stats: self.state_stats,
            feature_stats: self.feature_stats,
            ops: GenericOperators::cell_migration(),
            dt: self.dt,
            teacher_forcing: self.teacher_forcing,
            config_hash: self.config_hash,
        };
        bundle.validate()?;
        Ok(bundle)
    }
}

/// Bundle with all-zero networks (and zero combiner), useful as a baseline.
pub fn zero_bundle(state_stats: NormStats, feature_stats: NormStats) -> ModelBundle {
    ModelBundle {
        spnn: DenseNet::zeros(&SPNN_SIZES, Activation::Tanh, Activation::Identity),
        conn: DenseNet::zeros(&CONN_SIZES, Activation::Tanh, Activation::Identity),
        combiner: CombinerLayer::new([[0.0; 4]; 2], [0.0; 2]),
        mitosis: None,
        state_stats,
        feature_stats,
        ops: GenericOperators::cell_migration(),
        dt: 1.0,
        teacher_forcing: true,
        config_hash: String::new(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::combiner::{conn_network, init_combiner, Dominance};
    use crate::generic::spnn_network;
    use rand::SeedableRng;

    fn stats() -> (NormStats, NormStats) {
        let s = NormStats {
            min: vec![0.0, 0.0, -1.0, -2.0],
            max: vec![300.0, 100.0, 3.0, 2.0],
        };
        let f = NormStats {
            min: vec![0.0; FEATURE_DIM],
            max: (0..FEATURE_DIM).map(|k| 1.0 + k as f64).collect(),
        };
        (s, f)
    }

    fn random_bundle() -> ModelBundle {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let (s, f) = stats();
        ModelBundle {
            spnn: spnn_network(&mut rng),
            conn: conn_network(&mut rng),
            combiner: init_combiner(Dominance::Spnn),
            ..zero_bundle(s, f)
        }
    }

    #[test]
    fn zero_bundle_keeps_position() {
        let (s, f) = stats();
        let b = zero_bundle(s, f);
        let z = CellState::new(10.0, 20.0, 0.5, 0.5);
        let out = b.step(&z, &FeatureVector([0.5; FEATURE_DIM])).unwrap();
        // zero combiner output is the normalized midpoint of the velocity range
        assert_eq!(out.velocity, [1.0, 0.0]);
        assert_eq!(out.next.x, 11.0);
        assert_eq!(out.next.y, 20.0);
    }

    #[test]
    fn position_advances_by_velocity() {
        let b = random_bundle();
        let z = CellState::new(50.0, 40.0, 0.2, -0.1);
        let out = b.step(&z, &FeatureVector([0.3; FEATURE_DIM])).unwrap();
        assert_eq!(out.next.x, z.x + out.velocity[0]);
        assert_eq!(out.next.y, z.y + out.velocity[1]);
        let v = out.contribution.output();
        assert!((b.state_stats.normalize_value(2, out.velocity[0]) - v[0]).abs() < 1e-12);
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let b = random_bundle();
        let back = ModelBundle::from_json(&b.to_json().unwrap()).unwrap();
        assert_eq!(back, b);
    }

    #[test]
    fn checkpoint_rejects_wrong_version() {
        let json = random_bundle().to_json().unwrap().replacen(
            "\"version\": 1",
            "\"version\": 99",
            1,
        );
        let err = ModelBundle::from_json(&json).unwrap_err();
        assert!(err.to_string().contains("version"), "{err}");
    }
}
