//! Loss assembly and the joint epoch loop over the three trainable parts.

use std::fmt::Write as _;
use std::str::FromStr;

use ndarray::{Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Adam, DenseNet, NetBinding, Schedule, Tape, Var};
use crate::combiner::{conn_network, init_combiner, Dominance};
use crate::dataset::{CellSeries, CellState, Dataset, FEATURE_DIM};
use crate::error::{Error, Result};
use crate::generic::{degeneracy_residual, spnn_network, GenericOperators, Mat4};
use crate::model::ModelBundle;

/// Preset schedules for the three experiment types.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Case {
    Insilico,
    InsilicoNoise,
    Real,
}

impl FromStr for Case {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "insilico" => Ok(Case::Insilico),
            "insilico-noise" => Ok(Case::InsilicoNoise),
            "real" => Ok(Case::Real),
            other => Err(Error::Config(format!(
                "unknown case {other:?} (expected insilico, insilico-noise or real)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub spnn: Schedule,
    pub conn: Schedule,
    pub combiner: Schedule,
    pub epochs: usize,
    pub lambda_d: f64,
    pub dominance: Dominance,
    pub seed: u64,
    pub teacher_forcing: bool,
    pub dt: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::for_case(Case::Insilico)
    }
}

impl TrainConfig {
    pub fn for_case(case: Case) -> Self {
        let (spnn, conn, combiner, dominance) = match case {
            Case::Insilico => (
                Schedule::new(1e-2, 500, 0.1),
                Schedule::new(1e-3, 500, 0.2),
                Schedule::new(1e-2, 500, 0.1),
                Dominance::Spnn,
            ),
            Case::InsilicoNoise => (
                Schedule::new(1e-2, 500, 0.1),
                Schedule::new(1e-2, 500, 0.1),
                Schedule::new(1e-2, 500, 0.1),
                Dominance::Spnn,
            ),
            Case::Real => (
                Schedule::new(5e-5, 100, 0.9),
                Schedule::new(5e-4, 100, 0.9),
                Schedule::new(5e-4, 100, 0.9),
                Dominance::Conn,
            ),
        };
        Self {
            spnn,
            conn,
            combiner,
            epochs: 5000,
            lambda_d: 100.0,
            dominance,
            seed: 0,
            teacher_forcing: true,
            dt: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.spnn.validate("spnn")?;
        self.conn.validate("conn")?;
        self.combiner.validate("combiner")?;
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if !(self.lambda_d >= 0.0 && self.lambda_d.is_finite()) {
            return Err(Error::Config("lambda_d must be >= 0".into()));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::Config("dt must be > 0".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, hex encoded.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

/// Mean squared error over all components of all rows.
pub fn data_loss(pred: &[f64], gt: &[f64]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::dim("data loss ground truth", pred.len(), gt.len()));
    }
    if pred.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = pred.iter().zip(gt).map(|(p, g)| (p - g) * (p - g)).sum();
    Ok(sum / pred.len() as f64)
}

pub fn total_loss(l_data: f64, l_deg: f64, lambda_d: f64) -> f64 {
    lambda_d * l_data + l_deg
}

/// Fresh bundle: seeded Glorot networks, combiner per dominance, statistics
/// from `data`.
pub fn init_bundle(config: &TrainConfig, data: &Dataset) -> ModelBundle {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let spnn = spnn_network(&mut rng);
    let conn = conn_network(&mut rng);
    ModelBundle {
        spnn,
        conn,
        combiner: init_combiner(config.dominance),
        mitosis: None,
        state_stats: data.state_stats.clone(),
        feature_stats: data.feature_stats.clone(),
        ops: GenericOperators::cell_migration(),
        dt: config.dt,
        teacher_forcing: config.teacher_forcing,
        config_hash: config.hash(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub l_data: f64,
    pub l_deg: f64,
    pub lr_spnn: f64,
    pub lr_conn: f64,
    pub lr_comb: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,l_data,l_deg,lr_spnn,lr_conn,lr_comb\n");
        for r in &self.epochs {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.epoch, r.l_data, r.l_deg, r.lr_spnn, r.lr_conn, r.lr_comb
            );
        }
        out
    }

    pub fn first(&self) -> Option<&EpochRecord> {
        self.epochs.first()
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub bundle: ModelBundle,
    pub history: TrainHistory,
}

/// Trains a freshly initialized bundle.
pub fn train(config: &TrainConfig, data: &Dataset) -> Result<TrainOutcome> {
    config.validate()?;
    let bundle = init_bundle(config, data);
    train_from(bundle, config, data, |_| {})
}

/// Continues training `bundle`; `on_epoch` sees every history row as it is
/// produced.
pub fn train_from(
    mut bundle: ModelBundle,
    config: &TrainConfig,
    data: &Dataset,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    config.validate()?;
    if data.transitions() == 0 {
        return Err(Error::Config("training data has no frame transitions".into()));
    }
    bundle.teacher_forcing = config.teacher_forcing;
    bundle.dt = config.dt;
    let mut opt_spnn = Adam::new(config.spnn);
    let mut opt_conn = Adam::new(config.conn);
    let mut opt_comb = Adam::new(config.combiner);
    let mut history = TrainHistory::default();
    let consts = Constants::new(&bundle);
    for epoch in 0..config.epochs {
        let lr_spnn = opt_spnn.scheduler_step(epoch);
        let lr_conn = opt_conn.scheduler_step(epoch);
        let lr_comb = opt_comb.scheduler_step(epoch);
        let (mut sum_data, mut sum_deg, mut weight) = (0.0, 0.0, 0.0);
        for series in &data.series {
            if series.len() < 2 {
                continue;
            }
            let context = || format!("epoch {epoch}, trajectory {}", series.cell_id);
            let mut tape = Tape::new();
            let bound = Bound::new(&bundle, &mut tape);
            let losses = if config.teacher_forcing {
                record_teacher_forced(&mut tape, &bundle, &bound, &consts, series)?
            } else {
                record_rollout(&mut tape, &bundle, &bound, &consts, series)?
            };
            let l_data = tape.value(losses.data)[[0, 0]];
            let l_deg = tape.value(losses.deg)[[0, 0]];
            if !(l_data.is_finite() && l_deg.is_finite()) {
                return Err(Error::Diverged {
                    context: format!("{}: non-finite loss", context()),
                });
            }
            let scaled = tape.scale(losses.data, config.lambda_d);
            let total = tape.add(scaled, losses.deg);
            let grads = tape.backward(total, &Array2::ones((1, 1)))?;
            let diverged = |e: Error| match e {
                Error::NonFiniteGradient { param } => Error::Diverged {
                    context: format!("{}: non-finite gradient (parameter {param})", context()),
                },
                other => other,
            };
            let g = bundle.spnn.collect_grads(&bound.spnn, &grads);
            opt_spnn.step(&mut bundle.spnn.params_mut(), &g).map_err(diverged)?;
            let g = bundle.conn.collect_grads(&bound.conn, &grads);
            opt_conn.step(&mut bundle.conn.params_mut(), &g).map_err(diverged)?;
            let net = bundle.combiner.net_mut();
            let g = net.collect_grads(&bound.comb, &grads);
            opt_comb.step(&mut net.params_mut(), &g).map_err(diverged)?;
            let n = (series.len() - 1) as f64;
            sum_data += l_data * n;
            sum_deg += l_deg * n;
            weight += n;
        }
        let rec = EpochRecord {
            epoch,
            l_data: sum_data / weight,
            l_deg: sum_deg / weight,
            lr_spnn,
            lr_conn,
            lr_comb,
        };
        on_epoch(&rec);
        history.epochs.push(rec);
    }
    bundle.config_hash = config.hash();
    Ok(TrainOutcome { bundle, history })
}

/// Teacher-forced `(l_data, l_deg)` of `bundle` over `data`, weighted by
/// transitions, without updating anything.
pub fn evaluate_losses(bundle: &ModelBundle, data: &Dataset) -> Result<(f64, f64)> {
    let (mut sum_data, mut sum_deg, mut n) = (0.0, 0.0, 0usize);
    for series in &data.series {
        for k in 0..series.len().saturating_sub(1) {
            let out = bundle.step(&series.states[k], &series.features[k])?;
            let pred = bundle.normalize_state(&out.next).to_array();
            let gt = bundle.normalize_state(&series.states[k + 1]).to_array();
            sum_data += data_loss(&pred, &gt)?;
            let (r_l, r_m) = degeneracy_residual(&bundle.ops, &out.gradients, &out.z_norm);
            sum_deg += r_l + r_m;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Config("evaluation data has no frame transitions".into()));
    }
    Ok((sum_data / n as f64, sum_deg / n as f64))
}

struct Bound {
    spnn: NetBinding,
    conn: NetBinding,
    comb: NetBinding,
}

impl Bound {
    fn new(bundle: &ModelBundle, tape: &mut Tape) -> Self {
        Self {
            spnn: bundle.spnn.bind(tape),
            conn: bundle.conn.bind(tape),
            comb: bundle.combiner.net().bind(tape),
        }
    }
}

/// Per-bundle affine maps between the normalized spaces.
struct Constants {
    l: Array2<f64>,
    m: Array2<f64>,
    /// normalized velocity -> normalized position increment
    pos_scale: [f64; 2],
    pos_shift: [f64; 2],
    /// normalized state position -> normalized feature position
    center_scale: [f64; 2],
    center_shift: [f64; 2],
}

fn mat(m: &Mat4) -> Array2<f64> {
    Array2::from_shape_fn((4, 4), |(r, c)| m[r][c])
}

impl Constants {
    fn new(b: &ModelBundle) -> Self {
        let s = &b.state_stats;
        let f = &b.feature_stats;
        let sx = s.scale();
        let fs = f.scale();
        let half = |st: &crate::dataset::NormStats, k: usize| (st.max[k] - st.min[k]) / 2.0;
        let mut c = Self {
            l: mat(b.ops.l()),
            m: mat(b.ops.m()),
            pos_scale: [0.0; 2],
            pos_shift: [0.0; 2],
            center_scale: [0.0; 2],
            center_shift: [0.0; 2],
        };
        for a in 0..2 {
            let hv = half(s, 2 + a);
            c.pos_scale[a] = sx[a] * b.dt * hv;
            c.pos_shift[a] = sx[a] * b.dt * (hv + s.min[2 + a]);
            if fs[a] > 0.0 {
                let hx = half(s, a);
                c.center_scale[a] = fs[a] * hx;
                c.center_shift[a] = fs[a] * (hx + s.min[a] - f.min[a]) - 1.0;
            }
        }
        c
    }
}

struct Losses {
    data: Var,
    deg: Var,
}

struct StepVars {
    z_pred: Var,
    /// Σ over rows of ‖L·B·z‖² + ‖M·A·z‖²
    deg_sum: Var,
}

/// Records the pipeline for a batch of normalized states `z` (B×4) and
/// normalized features `f` (B×23).
fn record_step(
    tape: &mut Tape,
    bundle: &ModelBundle,
    bound: &Bound,
    c: &Constants,
    z: Var,
    f: Var,
) -> Result<StepVars> {
    let ab = bundle.spnn.apply(tape, &bound.spnn, z)?;
    let a = tape.slice_cols(ab, 0, 16);
    let b = tape.slice_cols(ab, 16, 32);
    let az = tape.batch_matvec(a, z, 4);
    let bz = tape.batch_matvec(b, z, 4);
    let l = tape.constant(c.l.clone());
    let m = tape.constant(c.m.clone());
    let laz = tape.matmul_t(az, l);
    let mbz = tape.matmul_t(bz, m);
    let inc = tape.add(laz, mbz);
    let inc = tape.scale(inc, bundle.dt);
    let z_spnn = tape.add(z, inc);
    let v_spnn = tape.slice_cols(z_spnn, 2, 4);
    let v_conn = bundle.conn.apply(tape, &bound.conn, f)?;
    let both = tape.concat_cols(v_spnn, v_conn);
    let v = bundle.combiner.net().apply(tape, &bound.comb, both)?;
    let pos_inc = tape.affine_cols(v, &c.pos_scale, &c.pos_shift);
    let pos = tape.slice_cols(z, 0, 2);
    let pos_next = tape.add(pos, pos_inc);
    let z_pred = tape.concat_cols(pos_next, v);
    let lbz = tape.matmul_t(bz, l);
    let maz = tape.matmul_t(az, m);
    let r_l = tape.sum_squares(lbz);
    let r_m = tape.sum_squares(maz);
    let deg_sum = tape.add(r_l, r_m);
    Ok(StepVars { z_pred, deg_sum })
}

fn normalized_rows(series: &CellSeries, bundle: &ModelBundle) -> (Array2<f64>, Array2<f64>) {
    let n = series.len();
    let mut states = Array2::zeros((n, CellState::DIM));
    let mut feats = Array2::zeros((n, FEATURE_DIM));
    for k in 0..n {
        let z = bundle.normalize_state(&series.states[k]).to_array();
        states.row_mut(k).assign(&ndarray::ArrayView1::from(&z[..]));
        let f = bundle.normalize_features(&series.features[k]);
        feats.row_mut(k).assign(&ndarray::ArrayView1::from(f.as_slice()));
    }
    (states, feats)
}

fn record_teacher_forced(
    tape: &mut Tape,
    bundle: &ModelBundle,
    bound: &Bound,
    c: &Constants,
    series: &CellSeries,
) -> Result<Losses> {
    let (states, feats) = normalized_rows(series, bundle);
    let n = series.len();
    let rows = (n - 1) as f64;
    let z = tape.constant(states.slice(ndarray::s![..n - 1, ..]).to_owned());
    let f = tape.constant(feats.slice(ndarray::s![..n - 1, ..]).to_owned());
    let target = tape.constant(states.slice(ndarray::s![1.., ..]).to_owned());
    let out = record_step(tape, bundle, bound, c, z, f)?;
    let diff = tape.sub(out.z_pred, target);
    let sq = tape.sum_squares(diff);
    let data = tape.scale(sq, 1.0 / (rows * CellState::DIM as f64));
    let deg = tape.scale(out.deg_sum, 1.0 / rows);
    Ok(Losses { data, deg })
}

fn record_rollout(
    tape: &mut Tape,
    bundle: &ModelBundle,
    bound: &Bound,
    c: &Constants,
    series: &CellSeries,
) -> Result<Losses> {
    let (states, feats) = normalized_rows(series, bundle);
    let n = series.len();
    let rows = (n - 1) as f64;
    let row = |a: &Array2<f64>, k: usize, lo: usize| a.row(k).slice(ndarray::s![lo..]).to_owned().insert_axis(Axis(0));
    let mut z = tape.constant(row(&states, 0, 0));
    let mut data_sum: Option<Var> = None;
    let mut deg_sum: Option<Var> = None;
    for k in 0..n - 1 {
        let f = if k == 0 {
            tape.constant(row(&feats, 0, 0))
        } else {
            let pos = tape.slice_cols(z, 0, 2);
            let center = tape.affine_cols(pos, &c.center_scale, &c.center_shift);
            let rest = tape.constant(row(&feats, k, 2));
            tape.concat_cols(center, rest)
        };
        let out = record_step(tape, bundle, bound, c, z, f)?;
        let target = tape.constant(row(&states, k + 1, 0));
        let diff = tape.sub(out.z_pred, target);
        let sq = tape.sum_squares(diff);
        data_sum = Some(match data_sum {
            Some(acc) => tape.add(acc, sq),
            None => sq,
        });
        deg_sum = Some(match deg_sum {
            Some(acc) => tape.add(acc, out.deg_sum),
            None => out.deg_sum,
        });
        z = out.z_pred;
    }
    let data = tape.scale(data_sum.expect("n >= 2"), 1.0 / (rows * CellState::DIM as f64));
    let deg = tape.scale(deg_sum.expect("n >= 2"), 1.0 / rows);
    Ok(Losses { data, deg })
}

/// Teacher-forced losses of one series computed on a tape (used to check the
/// recorded pipeline against [`ModelBundle::step`]).
pub fn tape_losses(bundle: &ModelBundle, series: &CellSeries, teacher_forcing: bool) -> Result<(f64, f64)> {
    let mut tape = Tape::new();
    let bound = Bound::new(bundle, &mut tape);
    let c = Constants::new(bundle);
    let l = if teacher_forcing {
        record_teacher_forced(&mut tape, bundle, &bound, &c, series)?
    } else {
        record_rollout(&mut tape, bundle, &bound, &c, series)?
    };
    Ok((tape.value(l.data)[[0, 0]], tape.value(l.deg)[[0, 0]]))
}

/// Parameters of `net` flattened in binding order.
pub fn flat_params(net: &DenseNet) -> Vec<f64> {
    net.layers()
        .iter()
        .flat_map(|l| l.weight.iter().chain(l.bias.iter()).copied())
        .collect()
}
