mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use aspnn::combiner::Dominance;
use aspnn::dataset::{
    feature_matrix_csv, filter_correct_trajectories, load_trajectories, write_trajectories,
    CellSeries, CellState, Dataset, Format, TrajectorySet, DEFAULT_MIN_FRAMES,
};
use aspnn::mitosis::{
    evaluate_mitosis, mitosis_history_csv, planted_mitosis_records, predict_mitosis,
    predictions_csv, train_mitosis, MitosisConfig, MitosisSamples, MitosisTrack, PlantedConfig,
    DEFAULT_THRESHOLD, DEFAULT_WINDOW,
};
use aspnn::model::{MitosisModel, ModelBundle};
use aspnn::rollout::{
    export_traces, rollout_series, velocity_accuracy, ExportPaths, PositionFeed, DEFAULT_EPS_V,
};
use aspnn::simulator::simulate;
use aspnn::training::{train_from, init_bundle, Case, TrainConfig};
use aspnn::{write_atomic, Error};
use clap::{Parser, Subcommand, ValueEnum};

use config::FileConfig;

/// Default roll-out length, in frames.
const DEFAULT_ROLLOUT_FRAMES: usize = 105;

#[derive(Debug)]
pub enum Failure {
    Config(String),
    Data(String),
    Diverged(String),
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Data(_) => 3,
            Failure::Diverged(_) => 4,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Config(m) => write!(f, "configuration error: {m}"),
            Failure::Data(m) => write!(f, "data error: {m}"),
            Failure::Diverged(m) => write!(f, "numerical divergence: {m}"),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::Config(_) | Error::InvalidNet(_) | Error::InfeasiblePacking { .. } => {
                Failure::Config(msg)
            }
            Error::Diverged { .. }
            | Error::NonFiniteGradient { .. }
            | Error::DegenerateCollision { .. } => Failure::Diverged(msg),
            _ => Failure::Data(msg),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum CaseArg {
    Insilico,
    InsilicoNoise,
    Real,
}

impl From<CaseArg> for Case {
    fn from(c: CaseArg) -> Self {
        match c {
            CaseArg::Insilico => Case::Insilico,
            CaseArg::InsilicoNoise => Case::InsilicoNoise,
            CaseArg::Real => Case::Real,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum DominanceArg {
    Spnn,
    Conn,
    Balanced,
}

impl From<DominanceArg> for Dominance {
    fn from(d: DominanceArg) -> Self {
        match d {
            DominanceArg::Spnn => Dominance::Spnn,
            DominanceArg::Conn => Dominance::Conn,
            DominanceArg::Balanced => Dominance::Balanced,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum FeedArg {
    Predicted,
    Observed,
}

impl From<FeedArg> for PositionFeed {
    fn from(f: FeedArg) -> Self {
        match f {
            FeedArg::Predicted => PositionFeed::Predicted,
            FeedArg::Observed => PositionFeed::Observed,
        }
    }
}

/// Structure-preserving cell-trajectory prediction.
#[derive(Debug, Parser)]
#[command(name = "aspnn", version)]
struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate cells in a channel and write a trajectory file.
    Simulate {
        /// Output trajectory file (.csv or .jsonl).
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Position noise as a fraction of the current speed (e.g. 0.10).
        #[arg(long)]
        noise: Option<f64>,
        /// Write a labeled data set with planted mitosis events instead.
        #[arg(long)]
        planted_mitosis: bool,
    },
    /// Train the predictor and write the checkpoint and loss history.
    Train {
        /// Preset learning-rate schedule.
        #[arg(long, value_enum)]
        case: Option<CaseArg>,
        /// Trajectory file (.csv or .jsonl).
        #[arg(long)]
        data: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lambda_d: Option<f64>,
        #[arg(long, value_enum)]
        teacher_forcing: Option<Switch>,
        #[arg(long, value_enum)]
        dominance: Option<DominanceArg>,
        /// Minimum trajectory length; longer ones are cut to it. Defaults to
        /// 105 for `real`, whole trajectories otherwise.
        #[arg(long)]
        min_frames: Option<usize>,
    },
    /// Roll out every cell from its first state and export traces.
    Rollout {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Only this cell.
        #[arg(long)]
        cell: Option<u32>,
        /// Maximum roll-out length (default 105).
        #[arg(long)]
        frames: Option<usize>,
        /// Source of the cell-center features during the roll-out.
        #[arg(long, value_enum)]
        feed: Option<FeedArg>,
    },
    /// Print velocity accuracy of a roll-out or of an exported trajectory.
    Eval {
        /// Exported trajectory CSV (`frame,x_pred,y_pred,x_gt,y_gt`).
        #[arg(long, conflicts_with_all = ["checkpoint", "data"])]
        trajectory: Option<PathBuf>,
        #[arg(long, requires = "data")]
        checkpoint: Option<PathBuf>,
        #[arg(long, requires = "checkpoint")]
        data: Option<PathBuf>,
        #[arg(long)]
        cell: Option<u32>,
        #[arg(long)]
        frames: Option<usize>,
        #[arg(long, value_enum)]
        feed: Option<FeedArg>,
    },
    /// Train and evaluate the mitosis classifier on labeled trajectories.
    Mitosis {
        /// Labeled training trajectories.
        #[arg(long)]
        data: PathBuf,
        /// Labeled evaluation trajectories (defaults to the training file).
        #[arg(long)]
        eval_data: Option<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Attach the trained classifier to this checkpoint (written to the
        /// output directory as `model.json`).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        window: Option<u32>,
        #[arg(long)]
        threshold: Option<f64>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("aspnn: {f}");
            ExitCode::from(f.exit_code())
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let file = FileConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::Simulate {
            out,
            seed,
            noise,
            planted_mitosis,
        } => cmd_simulate(&file, &out, seed, noise, planted_mitosis),
        Command::Train {
            case,
            data,
            out,
            seed,
            epochs,
            lambda_d,
            teacher_forcing,
            dominance,
            min_frames,
        } => {
            let t = &file.train;
            let case = case.map(Case::from).or(t.case).unwrap_or(Case::Insilico);
            let mut cfg = TrainConfig::for_case(case);
            cfg.spnn = t.spnn.unwrap_or(cfg.spnn);
            cfg.conn = t.conn.unwrap_or(cfg.conn);
            cfg.combiner = t.combiner.unwrap_or(cfg.combiner);
            cfg.epochs = epochs.or(t.epochs).unwrap_or(cfg.epochs);
            cfg.lambda_d = lambda_d.or(t.lambda_d).unwrap_or(cfg.lambda_d);
            cfg.seed = seed.or(t.seed).unwrap_or(cfg.seed);
            cfg.teacher_forcing = teacher_forcing
                .map(|s| s == Switch::On)
                .or(t.teacher_forcing)
                .unwrap_or(cfg.teacher_forcing);
            cfg.dominance = dominance.map(Dominance::from).or(t.dominance).unwrap_or(cfg.dominance);
            let min_frames = min_frames.or(t.min_frames).or(match case {
                Case::Real => Some(DEFAULT_MIN_FRAMES),
                _ => None,
            });
            cmd_train(&cfg, &data, &out, min_frames)
        }
        Command::Rollout {
            checkpoint,
            data,
            out,
            cell,
            frames,
            feed,
        } => {
            let frames = frames.or(file.rollout.frames).unwrap_or(DEFAULT_ROLLOUT_FRAMES);
            let feed = feed.map(PositionFeed::from).or(file.rollout.feed).unwrap_or_default();
            cmd_rollout(&checkpoint, &data, Some(&out), cell, frames, feed)
        }
        Command::Eval {
            trajectory,
            checkpoint,
            data,
            cell,
            frames,
            feed,
        } => {
            if let Some(path) = trajectory {
                return cmd_eval_trajectory(&path);
            }
            let (Some(checkpoint), Some(data)) = (checkpoint, data) else {
                return Err(Failure::Config(
                    "eval needs --trajectory or both --checkpoint and --data".into(),
                ));
            };
            let frames = frames.or(file.rollout.frames).unwrap_or(DEFAULT_ROLLOUT_FRAMES);
            let feed = feed.map(PositionFeed::from).or(file.rollout.feed).unwrap_or_default();
            cmd_rollout(&checkpoint, &data, None, cell, frames, feed)
        }
        Command::Mitosis {
            data,
            eval_data,
            out,
            checkpoint,
            seed,
            epochs,
            window,
            threshold,
        } => {
            let m = &file.mitosis;
            let defaults = MitosisConfig::default();
            let cfg = MitosisConfig {
                schedule: m.schedule.unwrap_or(defaults.schedule),
                epochs: epochs.or(m.epochs).unwrap_or(defaults.epochs),
                seed: seed.or(m.seed).unwrap_or(defaults.seed),
            };
            let window = window.or(m.window).unwrap_or(DEFAULT_WINDOW);
            let threshold = threshold.or(m.threshold).unwrap_or(DEFAULT_THRESHOLD);
            if !(0.0..=1.0).contains(&threshold) {
                return Err(Failure::Config("threshold must lie in [0, 1]".into()));
            }
            cmd_mitosis(
                &cfg,
                &data,
                eval_data.as_deref(),
                &out,
                checkpoint.as_deref(),
                window,
                threshold,
            )
        }
    }
}

fn cmd_simulate(
    file: &FileConfig,
    out: &Path,
    seed: Option<u64>,
    noise: Option<f64>,
    planted: bool,
) -> Result<(), Failure> {
    let format = Format::from_path(out);
    if planted {
        let cfg = PlantedConfig {
            seed: seed.unwrap_or(0),
            ..PlantedConfig::default()
        };
        let (records, bounds) = planted_mitosis_records(&cfg)?;
        write_trajectories(out, &records, Some(bounds), format)?;
        println!("wrote {} records to {}", records.len(), out.display());
        return Ok(());
    }
    let mut cfg = file.simulate.clone();
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(n) = noise {
        cfg.noise_fraction = n;
    }
    cfg.validate()?;
    let records = simulate(&cfg)?;
    write_trajectories(out, &records, Some(cfg.bounds()), format)?;
    println!("wrote {} records to {}", records.len(), out.display());
    Ok(())
}

fn load(path: &Path) -> Result<TrajectorySet, Failure> {
    Ok(load_trajectories(path, Format::from_path(path))?)
}

fn ensure_dir(dir: &Path) -> Result<(), Failure> {
    std::fs::create_dir_all(dir).map_err(|e| Failure::Data(format!("{}: {e}", dir.display())))
}

fn cmd_train(
    cfg: &TrainConfig,
    data: &Path,
    out: &Path,
    min_frames: Option<usize>,
) -> Result<(), Failure> {
    cfg.validate()?;
    let set = load(data)?;
    let (cells, max_frames) = match min_frames {
        Some(min) => (filter_correct_trajectories(&set, min).correct, min),
        None => (set.cell_ids().filter(|&c| set.trajectory_len(c) >= 2).collect(), usize::MAX),
    };
    if cells.is_empty() {
        return Err(Failure::Data(format!(
            "{}: no trajectory is long enough to train on",
            data.display()
        )));
    }
    let dataset = Dataset::build(&set, &cells, max_frames)?;
    let bundle = init_bundle(cfg, &dataset);
    let outcome = train_from(bundle, cfg, &dataset, |r| {
        if r.epoch % 100 == 0 {
            eprintln!("epoch {} l_data={:.3e} l_deg={:.3e}", r.epoch, r.l_data, r.l_deg);
        }
    })?;
    ensure_dir(out)?;
    outcome.bundle.save(&out.join("model.json"))?;
    write_atomic(&out.join("history.csv"), &outcome.history.to_csv())?;
    write_atomic(&out.join("features.csv"), &feature_matrix_csv(&dataset.series))?;
    let last = outcome.history.last().expect("epochs >= 1");
    println!(
        "trained {} trajectories for {} epochs: l_data={:e} l_deg={:e}",
        cells.len(),
        cfg.epochs,
        last.l_data,
        last.l_deg
    );
    Ok(())
}

fn cmd_rollout(
    checkpoint: &Path,
    data: &Path,
    out: Option<&Path>,
    cell: Option<u32>,
    frames: usize,
    feed: PositionFeed,
) -> Result<(), Failure> {
    let bundle = ModelBundle::load(checkpoint)?;
    let set = load(data)?;
    let cells: Vec<u32> = match cell {
        Some(c) if set.trajectory_len(c) >= 2 => vec![c],
        Some(c) => return Err(Failure::Data(format!("cell {c} has fewer than 2 frames"))),
        None => set.cell_ids().filter(|&c| set.trajectory_len(c) >= 2).collect(),
    };
    let mut results = Vec::new();
    for &c in &cells {
        let series = CellSeries::build(&set, c, frames.saturating_add(2))?;
        let r = rollout_series(&bundle, &series, frames, feed)?;
        let gt: Vec<[f64; 2]> = series.velocities()[1..=r.steps()].to_vec();
        let acc = velocity_accuracy(&r.velocities(), &gt, DEFAULT_EPS_V).ok();
        results.push((series, r, acc));
    }
    if let Some(dir) = out {
        ensure_dir(dir)?;
        for (series, r, _) in &results {
            export_traces(r, series, &ExportPaths::in_dir(dir, &format!("cell{}", series.cell_id)))?;
        }
    }
    let (mut sx, mut sy, mut n) = (0.0, 0.0, 0usize);
    for (series, _, acc) in &results {
        match acc {
            Some((ax, ay)) => {
                println!("cell={} acc_x={ax:.2}% acc_y={ay:.2}%", series.cell_id);
                sx += ax;
                sy += ay;
                n += 1;
            }
            None => println!("cell={} accuracy undefined (zero ground-truth velocity)", series.cell_id),
        }
    }
    if n == 0 {
        return Err(Failure::Data("accuracy undefined for every cell".into()));
    }
    println!("acc_x={:.2}% acc_y={:.2}%", sx / n as f64, sy / n as f64);
    Ok(())
}

fn cmd_eval_trajectory(path: &Path) -> Result<(), Failure> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::Data(format!("{}: {e}", path.display())))?;
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("frame,x_pred,y_pred,x_gt,y_gt") {
        return Err(Failure::Data(format!(
            "{}: expected header frame,x_pred,y_pred,x_gt,y_gt",
            path.display()
        )));
    }
    let mut pred = Vec::new();
    let mut gt = Vec::new();
    for (k, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let v: Vec<f64> = line
            .split(',')
            .map(|s| s.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| Failure::Data(format!("{}:{}: {e}", path.display(), k + 2)))?;
        if v.len() != 5 {
            return Err(Failure::Data(format!("{}:{}: expected 5 columns", path.display(), k + 2)));
        }
        pred.push(CellState::new(v[1], v[2], 0.0, 0.0));
        gt.push(CellState::new(v[3], v[4], 0.0, 0.0));
    }
    let diff = |s: &[CellState]| -> Vec<[f64; 2]> {
        s.windows(2).map(|w| [w[1].x - w[0].x, w[1].y - w[0].y]).collect()
    };
    let (ax, ay) = velocity_accuracy(&diff(&pred), &diff(&gt), DEFAULT_EPS_V)?;
    println!("acc_x={ax:.2}% acc_y={ay:.2}%");
    Ok(())
}

fn labeled_samples(path: &Path) -> Result<MitosisSamples, Failure> {
    let set = load(path)?;
    let series = set
        .cell_ids()
        .filter(|&c| set.trajectory_len(c) >= 2)
        .map(|c| CellSeries::build(&set, c, usize::MAX))
        .collect::<Result<Vec<_>, _>>()?;
    let samples = MitosisSamples::from_series(&series);
    if samples.is_empty() {
        return Err(Failure::Data(format!("{}: no frame carries a mitosis label", path.display())));
    }
    Ok(samples)
}

fn cmd_mitosis(
    cfg: &MitosisConfig,
    data: &Path,
    eval_data: Option<&Path>,
    out: &Path,
    checkpoint: Option<&Path>,
    window: u32,
    threshold: f64,
) -> Result<(), Failure> {
    cfg.validate()?;
    let bundle = checkpoint.map(ModelBundle::load).transpose()?;
    let train = labeled_samples(data)?;
    let eval = match eval_data {
        Some(p) => labeled_samples(p)?,
        None => train.clone(),
    };
    let outcome = train_mitosis(cfg, &train)?;
    let p = predict_mitosis(&outcome.model, &eval)?;
    let report = evaluate_mitosis(&MitosisTrack::from_samples(&eval, &p), window, threshold)?;
    ensure_dir(out)?;
    write_atomic(&out.join("mitosis_model.json"), &outcome.model.to_json()?)?;
    write_atomic(&out.join("mitosis_history.csv"), &mitosis_history_csv(&outcome.history))?;
    write_atomic(&out.join("mitosis_predictions.csv"), &predictions_csv(&eval, &p))?;
    write_atomic(&out.join("mitosis_events.txt"), &report.event_report())?;
    if let Some(mut b) = bundle {
        b.mitosis = Some(MitosisModel {
            net: outcome.model.net.clone(),
            stats: outcome.model.stats.clone(),
        });
        b.save(&out.join("model.json"))?;
    }
    match report.precision {
        Some(prec) => println!(
            "precision={:.2}% fp_rate={:.3}% events={} detected={} false_positives={}",
            100.0 * prec,
            100.0 * report.false_positive_rate,
            report.events.len(),
            report.detected(),
            report.false_positives
        ),
        None => println!(
            "precision=undefined (no labeled events) fp_rate={:.3}% false_positives={}",
            100.0 * report.false_positive_rate,
            report.false_positives
        ),
    }
    Ok(())
}
