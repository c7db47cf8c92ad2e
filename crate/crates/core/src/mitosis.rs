//! Per-frame mitosis probability: a softmax classifier on the environmental
//! features plus velocity and two recursive variations, trained with binary
//! cross-entropy and scored with a windowed detection protocol.

use std::fmt::Write as _;

use ndarray::{Array2, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{bce_term, Activation, Adam, DenseNet, Schedule, Tape};
use crate::dataset::{
    recursive_variation, CellSeries, ImageBounds, NormStats, TrajectoryRecord, FEATURE_DIM,
};
use crate::error::{Error, Result};
use crate::model::MitosisModel;

pub const MITOSIS_DIM: usize = FEATURE_DIM + 4;
pub const MITOSIS_SIZES: [usize; 6] = [MITOSIS_DIM, 48, 96, 64, 32, 2];
pub const AREA_WINDOW: usize = 2;
pub const BRIGHTNESS_WINDOW: usize = 3;
pub const DEFAULT_WINDOW: u32 = 3;
pub const DEFAULT_THRESHOLD: f64 = 0.6;

pub fn mitosis_network<R: Rng + ?Sized>(rng: &mut R) -> DenseNet {
    DenseNet::glorot(&MITOSIS_SIZES, Activation::Tanh, Activation::Softmax, rng)
}

/// `(p_neg, p_pos)` for one normalized 27-vector.
pub fn mitosis_forward(net: &DenseNet, input: &[f64]) -> Result<[f64; 2]> {
    let p = net.forward(input)?;
    if p.len() != 2 {
        return Err(Error::dim("mitosis output", 2, p.len()));
    }
    Ok([p[0], p[1]])
}

/// Binary cross-entropy of the positive-class probability, clipped at
/// `BCE_EPS`.
pub fn bce_loss(p_pos: f64, label: u8) -> f64 {
    bce_term(p_pos, f64::from(label))
}

/// Raw 27-component inputs of every frame of `series`: the 23 features,
/// `(vx, vy)`, area variation over 2 frames, brightness variation over 3.
pub fn mitosis_inputs(series: &CellSeries) -> Vec<[f64; MITOSIS_DIM]> {
    let area = recursive_variation(&series.area, AREA_WINDOW);
    let bright = recursive_variation(&series.brightness, BRIGHTNESS_WINDOW);
    (0..series.len())
        .map(|k| {
            let mut v = [0.0; MITOSIS_DIM];
            v[..FEATURE_DIM].copy_from_slice(series.features[k].as_slice());
            v[FEATURE_DIM] = series.states[k].vx;
            v[FEATURE_DIM + 1] = series.states[k].vy;
            v[FEATURE_DIM + 2] = area[k];
            v[FEATURE_DIM + 3] = bright[k];
            v
        })
        .collect()
}

/// Labeled frames of several series, one row each.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MitosisSamples {
    pub cell_ids: Vec<u32>,
    pub frames: Vec<u32>,
    pub inputs: Vec<[f64; MITOSIS_DIM]>,
    pub labels: Vec<u8>,
}

impl MitosisSamples {
    /// Frames without a label are skipped.
    pub fn from_series(series: &[CellSeries]) -> Self {
        let mut out = Self::default();
        for s in series {
            for (k, input) in mitosis_inputs(s).into_iter().enumerate() {
                if let Some(label) = s.labels[k] {
                    out.cell_ids.push(s.cell_id);
                    out.frames.push(s.frames[k]);
                    out.inputs.push(input);
                    out.labels.push(label);
                }
            }
        }
        out
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn stats(&self) -> Result<NormStats> {
        NormStats::from_rows(MITOSIS_DIM, self.inputs.iter().map(|r| &r[..]))
    }

    fn normalized(&self, stats: &NormStats) -> Array2<f64> {
        let mut x = Array2::zeros((self.len(), MITOSIS_DIM));
        for (k, row) in self.inputs.iter().enumerate() {
            x.row_mut(k)
                .assign(&ArrayView1::from(&stats.normalize(row)[..]));
        }
        x
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MitosisConfig {
    pub schedule: Schedule,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for MitosisConfig {
    fn default() -> Self {
        Self {
            schedule: Schedule::new(2e-4, 40000, 0.5),
            epochs: 20000,
            seed: 0,
        }
    }
}

impl MitosisConfig {
    pub fn validate(&self) -> Result<()> {
        self.schedule.validate("mitosis")?;
        if self.epochs == 0 {
            return Err(Error::Config("mitosis epochs must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MitosisEpoch {
    pub epoch: usize,
    pub bce: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct MitosisOutcome {
    pub model: MitosisModel,
    pub history: Vec<MitosisEpoch>,
}

pub fn mitosis_history_csv(history: &[MitosisEpoch]) -> String {
    let mut out = String::from("epoch,bce,lr\n");
    for h in history {
        let _ = writeln!(out, "{},{},{}", h.epoch, h.bce, h.lr);
    }
    out
}

/// Full-batch training over every labeled frame; one optimizer step per
/// epoch. Statistics are computed on `samples`.
pub fn train_mitosis(config: &MitosisConfig, samples: &MitosisSamples) -> Result<MitosisOutcome> {
    config.validate()?;
    if samples.is_empty() {
        return Err(Error::Config("no labeled frames to train the mitosis model".into()));
    }
    let stats = samples.stats()?;
    let x = samples.normalized(&stats);
    let y = Array2::from_shape_fn((samples.len(), 1), |(r, _)| f64::from(samples.labels[r]));
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut net = mitosis_network(&mut rng);
    let mut opt = Adam::new(config.schedule);
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let lr = opt.scheduler_step(epoch);
        let mut tape = Tape::new();
        let input = tape.constant(x.clone());
        let (p, binding) = net.record(&mut tape, input)?;
        let p_pos = tape.slice_cols(p, 1, 2);
        let loss = tape.bce(p_pos, y.clone());
        let bce = tape.value(loss)[[0, 0]];
        if !bce.is_finite() {
            return Err(Error::Diverged {
                context: format!("mitosis epoch {epoch}: non-finite loss"),
            });
        }
        let grads = tape.backward(loss, &Array2::ones((1, 1)))?;
        let g = net.collect_grads(&binding, &grads);
        opt.step(&mut net.params_mut(), &g).map_err(|e| match e {
            Error::NonFiniteGradient { param } => Error::Diverged {
                context: format!("mitosis epoch {epoch}: non-finite gradient (parameter {param})"),
            },
            other => other,
        })?;
        history.push(MitosisEpoch { epoch, bce, lr });
    }
    Ok(MitosisOutcome {
        model: MitosisModel { net, stats },
        history,
    })
}

/// Positive-class probability of every row of `samples`.
pub fn predict_mitosis(model: &MitosisModel, samples: &MitosisSamples) -> Result<Vec<f64>> {
    let x = samples.normalized(&model.stats);
    let p = model.net.forward_batch(&x)?;
    Ok(p.column(1).to_vec())
}

/// `frame,cell_id,p_pos,label`.
pub fn predictions_csv(samples: &MitosisSamples, p_pos: &[f64]) -> String {
    let mut out = String::from("frame,cell_id,p_pos,label\n");
    for k in 0..samples.len().min(p_pos.len()) {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            samples.frames[k], samples.cell_ids[k], p_pos[k], samples.labels[k]
        );
    }
    out
}

/// Predictions and labels of one cell, aligned by frame.
#[derive(Debug, Clone, PartialEq)]
pub struct MitosisTrack {
    pub cell_id: u32,
    pub frames: Vec<u32>,
    pub p_pos: Vec<f64>,
    pub labels: Vec<u8>,
}

impl MitosisTrack {
    /// Track over consecutive frames `0..n`.
    pub fn sequence(p_pos: &[f64], labels: &[u8]) -> Self {
        Self {
            cell_id: 0,
            frames: (0..p_pos.len() as u32).collect(),
            p_pos: p_pos.to_vec(),
            labels: labels.to_vec(),
        }
    }

    /// Splits flat samples and their predictions into per-cell tracks.
    pub fn from_samples(samples: &MitosisSamples, p_pos: &[f64]) -> Vec<Self> {
        let mut tracks: Vec<Self> = Vec::new();
        for k in 0..samples.len() {
            let id = samples.cell_ids[k];
            if tracks.last().map(|t| t.cell_id) != Some(id) {
                tracks.push(Self {
                    cell_id: id,
                    frames: Vec::new(),
                    p_pos: Vec::new(),
                    labels: Vec::new(),
                });
            }
            let t = tracks.last_mut().expect("just pushed");
            t.frames.push(samples.frames[k]);
            t.p_pos.push(p_pos[k]);
            t.labels.push(samples.labels[k]);
        }
        tracks
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventReport {
    pub cell_id: u32,
    pub frame: u32,
    pub detected: bool,
    /// Offsets (frame − event frame) of in-window predictions above the
    /// threshold.
    pub offsets: Vec<i64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MitosisReport {
    /// `None` when there are no labeled events.
    pub precision: Option<f64>,
    pub false_positive_rate: f64,
    pub false_positives: usize,
    pub negatives: usize,
    pub events: Vec<EventReport>,
}

impl MitosisReport {
    pub fn detected(&self) -> usize {
        self.events.iter().filter(|e| e.detected).count()
    }

    pub fn event_report(&self) -> String {
        let mut out = String::new();
        for e in &self.events {
            let offsets: Vec<String> = e.offsets.iter().map(|o| format!("{o:+}")).collect();
            let _ = writeln!(
                out,
                "cell {} frame {}: {} [{}]",
                e.cell_id,
                e.frame,
                if e.detected { "detected" } else { "missed" },
                offsets.join(" ")
            );
        }
        out
    }
}

/// An event at frame `f` is detected when some prediction in `[f − window,
/// f + window]` of the same cell exceeds `threshold`. False positives are
/// predictions above threshold outside every event window, counted against
/// all negative frames.
pub fn evaluate_mitosis(tracks: &[MitosisTrack], window: u32, threshold: f64) -> Result<MitosisReport> {
    let mut events = Vec::new();
    let (mut fp, mut negatives) = (0usize, 0usize);
    for t in tracks {
        if t.p_pos.len() != t.labels.len() || t.frames.len() != t.labels.len() {
            return Err(Error::dim("mitosis track", t.labels.len(), t.p_pos.len()));
        }
        let event_frames: Vec<u32> = t
            .frames
            .iter()
            .zip(&t.labels)
            .filter(|(_, &l)| l == 1)
            .map(|(&f, _)| f)
            .collect();
        let near = |f: u32, e: u32| f.abs_diff(e) <= window;
        for &e in &event_frames {
            let offsets: Vec<i64> = t
                .frames
                .iter()
                .zip(&t.p_pos)
                .filter(|(&f, &p)| near(f, e) && p > threshold)
                .map(|(&f, _)| i64::from(f) - i64::from(e))
                .collect();
            events.push(EventReport {
                cell_id: t.cell_id,
                frame: e,
                detected: !offsets.is_empty(),
                offsets,
            });
        }
        for ((&f, &p), &l) in t.frames.iter().zip(&t.p_pos).zip(&t.labels) {
            if l == 0 {
                negatives += 1;
            }
            if p > threshold && !event_frames.iter().any(|&e| near(f, e)) {
                fp += 1;
            }
        }
    }
    let precision = if events.is_empty() {
        None
    } else {
        Some(events.iter().filter(|e| e.detected).count() as f64 / events.len() as f64)
    };
    Ok(MitosisReport {
        precision,
        false_positive_rate: if negatives == 0 { 0.0 } else { fp as f64 / negatives as f64 },
        false_positives: fp,
        negatives,
        events,
    })
}

/// Generator of labeled trajectories with planted division signatures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlantedConfig {
    pub n_cells: usize,
    pub frames: u32,
    /// Events per cell, spaced at least `min_gap` frames apart.
    pub events_per_cell: usize,
    pub min_gap: u32,
    pub width: f64,
    pub height: f64,
    pub seed: u64,
}

impl Default for PlantedConfig {
    fn default() -> Self {
        Self {
            n_cells: 12,
            frames: 105,
            events_per_cell: 2,
            min_gap: 20,
            width: 400.0,
            height: 400.0,
            seed: 0,
        }
    }
}

/// Cells drifting slowly with noisy area and brightness. At each event frame
/// `f` the area dips to 85% at `f − 1` and 70% at `f`, and the brightness
/// rises by 15, 30, 45 over `f − 2 ..= f`; both return to baseline
/// afterwards. Only frame `f` is labeled 1.
pub fn planted_mitosis_records(config: &PlantedConfig) -> Result<(Vec<TrajectoryRecord>, ImageBounds)> {
    let lead = 5u32;
    let usable = config.frames.saturating_sub(2 * lead);
    if config.events_per_cell > 0
        && (config.events_per_cell as u32 - 1) * config.min_gap >= usable
    {
        return Err(Error::Config(format!(
            "{} events spaced {} apart do not fit in {} frames",
            config.events_per_cell, config.min_gap, config.frames
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let jitter = Normal::new(0.0, 1.0).expect("unit normal");
    let mut records = Vec::new();
    for cell in 0..config.n_cells as u32 {
        let events = loop {
            let mut ev: Vec<u32> = (0..config.events_per_cell)
                .map(|_| lead + rng.random_range(0..usable))
                .collect();
            ev.sort_unstable();
            if ev.windows(2).all(|w| w[1] - w[0] >= config.min_gap) {
                break ev;
            }
        };
        let mut x = rng.random_range(0.2 * config.width..0.8 * config.width);
        let mut y = rng.random_range(0.2 * config.height..0.8 * config.height);
        let (vx, vy) = (rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5));
        let base_area = rng.random_range(250.0..450.0);
        let base_bright = rng.random_range(80.0..140.0);
        for f in 0..config.frames {
            let mut area = base_area * (1.0 + 0.01 * jitter.sample(&mut rng));
            let mut bright = base_bright + 1.5 * jitter.sample(&mut rng);
            for &e in &events {
                if f + 1 == e {
                    area *= 0.85;
                }
                if f == e {
                    area *= 0.7;
                }
                if f + 2 >= e && f <= e {
                    bright += 15.0 * f64::from(3 - (e - f));
                }
            }
            records.push(TrajectoryRecord {
                frame: f,
                cell_id: cell,
                x: x.clamp(0.0, config.width),
                y: y.clamp(0.0, config.height),
                area,
                eccentricity: (0.2 + 0.02 * jitter.sample(&mut rng)).clamp(0.0, 0.99),
                brightness: bright.clamp(0.0, 255.0),
                mitosis: Some(u8::from(events.contains(&f))),
            });
            x += vx + 0.2 * jitter.sample(&mut rng);
            y += vy + 0.2 * jitter.sample(&mut rng);
        }
    }
    Ok((
        records,
        ImageBounds {
            width: config.width,
            height: config.height,
        },
    ))
}
