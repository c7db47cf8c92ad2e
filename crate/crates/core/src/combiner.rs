//! Environmental correction network (CoNN) and the affine layer that merges
//! its velocity with the GENERIC velocity.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Activation, DenseNet, Layer};
use crate::dataset::{FeatureVector, FEATURE_DIM};
use crate::error::{Error, Result};

/// 23 environmental features, four tanh hidden layers, 2 velocity outputs.
pub const CONN_SIZES: [usize; 6] = [FEATURE_DIM, 181, 297, 149, 295, 2];

pub fn conn_network<R: Rng + ?Sized>(rng: &mut R) -> DenseNet {
    DenseNet::glorot(&CONN_SIZES, Activation::Tanh, Activation::Identity, rng)
}

/// Velocity estimate (normalized units) from normalized features.
pub fn conn_forward(net: &DenseNet, features: &FeatureVector) -> Result<[f64; 2]> {
    let out = net.forward(features.as_slice())?;
    if out.len() != 2 {
        return Err(Error::dim("CoNN output", 2, out.len()));
    }
    Ok([out[0], out[1]])
}

/// Which submodel the combiner initially trusts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dominance {
    #[default]
    Spnn,
    Conn,
    Balanced,
}

impl FromStr for Dominance {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "spnn" => Ok(Dominance::Spnn),
            "conn" => Ok(Dominance::Conn),
            "balanced" => Ok(Dominance::Balanced),
            other => Err(Error::Config(format!(
                "unknown dominance {other:?} (expected spnn, conn or balanced)"
            ))),
        }
    }
}

impl fmt::Display for Dominance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Dominance::Spnn => "spnn",
            Dominance::Conn => "conn",
            Dominance::Balanced => "balanced",
        })
    }
}

/// Affine map from `(v_spnn_x, v_spnn_y, v_conn_x, v_conn_y)` to the output
/// velocity. No activation, so velocities stay unbounded.
#[derive(Debug, Clone, PartialEq)]
pub struct CombinerLayer {
    net: DenseNet,
}

impl CombinerLayer {
    pub fn new(weight: [[f64; 4]; 2], bias: [f64; 2]) -> Self {
        let weight = Array2::from_shape_fn((2, 4), |(r, c)| weight[r][c]);
        let layer = Layer {
            weight,
            bias: Array1::from(bias.to_vec()),
            activation: Activation::Identity,
        };
        Self {
            net: DenseNet::new(vec![layer]).expect("2x4 affine layer"),
        }
    }

    pub fn from_net(net: DenseNet) -> Result<Self> {
        if net.sizes() != [4, 2] || net.layers()[0].activation != Activation::Identity {
            return Err(Error::InvalidNet(
                "combiner must be a single 4 -> 2 identity layer".into(),
            ));
        }
        Ok(Self { net })
    }

    pub fn net(&self) -> &DenseNet {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut DenseNet {
        &mut self.net
    }

    pub fn weight(&self) -> [[f64; 4]; 2] {
        let w = &self.net.layers()[0].weight;
        [
            [w[[0, 0]], w[[0, 1]], w[[0, 2]], w[[0, 3]]],
            [w[[1, 0]], w[[1, 1]], w[[1, 2]], w[[1, 3]]],
        ]
    }

    pub fn bias(&self) -> [f64; 2] {
        let b = &self.net.layers()[0].bias;
        [b[0], b[1]]
    }
}

/// Per axis: 0.9 on the dominant submodel and 0.1 on the other (0.5 each
/// when balanced), zero bias.
pub fn init_combiner(dominance: Dominance) -> CombinerLayer {
    let (s, c) = match dominance {
        Dominance::Spnn => (0.9, 0.1),
        Dominance::Conn => (0.1, 0.9),
        Dominance::Balanced => (0.5, 0.5),
    };
    CombinerLayer::new([[s, 0.0, c, 0.0], [0.0, s, 0.0, c]], [0.0, 0.0])
}

/// What each input pair contributes to the combined velocity: the product of
/// the inputs with their weights, plus the bias.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Contribution {
    pub spnn: [f64; 2],
    pub conn: [f64; 2],
    pub bias: [f64; 2],
}

impl Contribution {
    pub fn output(&self) -> [f64; 2] {
        [
            self.spnn[0] + self.conn[0] + self.bias[0],
            self.spnn[1] + self.conn[1] + self.bias[1],
        ]
    }
}

pub fn contribution_split(layer: &CombinerLayer, v_spnn: [f64; 2], v_conn: [f64; 2]) -> Contribution {
    let w = layer.weight();
    let mut c = Contribution {
        bias: layer.bias(),
        ..Contribution::default()
    };
    for r in 0..2 {
        c.spnn[r] = w[r][0] * v_spnn[0] + w[r][1] * v_spnn[1];
        c.conn[r] = w[r][2] * v_conn[0] + w[r][3] * v_conn[1];
    }
    c
}

pub fn combine(v_spnn: [f64; 2], v_conn: [f64; 2], layer: &CombinerLayer) -> [f64; 2] {
    contribution_split(layer, v_spnn, v_conn).output()
}
