//! Rigid discs in a walled 2-D channel driven by a uniform per-frame
//! velocity increment, with elastic cell-cell and cell-wall collisions.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{ImageBounds, TrajectoryRecord};
use crate::error::{Error, Result};

/// Where initial positions are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Spawn {
    /// The part of the channel from which the imposed drift over the whole
    /// run cannot reach a wall. Falls back to the full channel when the
    /// drift is longer than the channel.
    DriftClear,
    /// Anywhere in the channel.
    Channel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub channel_width: f64,
    pub channel_height: f64,
    pub n_cells: usize,
    pub radius: f64,
    /// Number of recorded frames, including the initial one.
    pub frames: usize,
    pub dvx: f64,
    pub dvy: f64,
    pub noise_fraction: f64,
    pub seed: u64,
    pub initial_velocity: [f64; 2],
    pub spawn: Spawn,
    pub brightness: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            channel_width: 300.0,
            channel_height: 100.0,
            n_cells: 20,
            radius: 5.0,
            frames: 100,
            dvx: 0.05,
            dvy: 0.005,
            noise_fraction: 0.0,
            seed: 0,
            initial_velocity: [0.0, 0.0],
            spawn: Spawn::DriftClear,
            brightness: 128.0,
        }
    }
}

impl SimConfig {
    pub fn bounds(&self) -> ImageBounds {
        ImageBounds {
            width: self.channel_width,
            height: self.channel_height,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("channel_width", self.channel_width),
            ("channel_height", self.channel_height),
            ("radius", self.radius),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.n_cells == 0 || self.frames == 0 {
            return Err(Error::Config("n_cells and frames must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.noise_fraction) {
            return Err(Error::Config(format!(
                "noise_fraction must lie in [0, 1], got {}",
                self.noise_fraction
            )));
        }
        if ![self.dvx, self.dvy, self.initial_velocity[0], self.initial_velocity[1], self.brightness]
            .iter()
            .all(|v| v.is_finite())
        {
            return Err(Error::Config("velocities and brightness must be finite".into()));
        }
        if 2.0 * self.radius > self.channel_width.min(self.channel_height) {
            return Err(Error::Config("a cell does not fit in the channel".into()));
        }
        Ok(())
    }

    /// Displacement accumulated over the run by the imposed acceleration.
    fn drift(&self) -> [f64; 2] {
        let steps = self.frames.saturating_sub(1) as f64;
        let ramp = steps * (steps + 1.0) / 2.0;
        [
            steps * self.initial_velocity[0] + ramp * self.dvx,
            steps * self.initial_velocity[1] + ramp * self.dvy,
        ]
    }

    /// Admissible ranges of initial centers along x and y.
    fn spawn_ranges(&self) -> [(f64, f64); 2] {
        let r = self.radius;
        let full = [(r, self.channel_width - r), (r, self.channel_height - r)];
        if self.spawn == Spawn::Channel {
            return full;
        }
        let drift = self.drift();
        let mut ranges = full;
        for axis in 0..2 {
            let (lo, hi) = full[axis];
            let d = drift[axis];
            let clear = if d >= 0.0 { (lo, hi - d) } else { (lo - d, hi) };
            if clear.1 >= clear.0 {
                ranges[axis] = clear;
            }
        }
        ranges
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimCell {
    pub id: u32,
    pub position: [f64; 2],
    pub velocity: [f64; 2],
    pub radius: f64,
    pub brightness: f64,
}

impl SimCell {
    pub fn area(&self) -> f64 {
        PI * self.radius * self.radius
    }

    /// Discs have zero eccentricity.
    pub fn eccentricity(&self) -> f64 {
        0.0
    }

    fn kinetic_energy(&self) -> f64 {
        0.5 * (self.velocity[0].powi(2) + self.velocity[1].powi(2))
    }
}

/// Equal-mass elastic collision: the velocity components along the line of
/// centers are exchanged, tangential components are kept.
pub fn resolve_elastic_collision(a: SimCell, b: SimCell) -> Result<(SimCell, SimCell)> {
    let dx = b.position[0] - a.position[0];
    let dy = b.position[1] - a.position[1];
    let dist = dx.hypot(dy);
    if dist == 0.0 {
        return Err(Error::DegenerateCollision { a: a.id as usize, b: b.id as usize });
    }
    let (nx, ny) = (dx / dist, dy / dist);
    let ua = a.velocity[0] * nx + a.velocity[1] * ny;
    let ub = b.velocity[0] * nx + b.velocity[1] * ny;
    let d = ub - ua;
    let mut a2 = a;
    let mut b2 = b;
    a2.velocity = [a.velocity[0] + d * nx, a.velocity[1] + d * ny];
    b2.velocity = [b.velocity[0] - d * nx, b.velocity[1] - d * ny];
    Ok((a2, b2))
}

/// Worst conservation errors seen over all resolved collisions.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CollisionStats {
    pub cell_collisions: usize,
    pub wall_contacts: usize,
    pub max_momentum_error: f64,
    pub max_energy_error: f64,
}

const MAX_SEPARATION_SWEEPS: usize = 10_000;
const PLACEMENT_ATTEMPTS: usize = 20_000;
const PLACEMENT_RESTARTS: usize = 50;

#[derive(Debug, Clone)]
pub struct Simulation {
    config: SimConfig,
    cells: Vec<SimCell>,
    frame: u32,
    stats: CollisionStats,
}

impl Simulation {
    pub fn new(config: SimConfig) -> Result<Self> {
        config.validate()?;
        let cells = place_cells(&config)?;
        Ok(Self {
            config,
            cells,
            frame: 0,
            stats: CollisionStats::default(),
        })
    }

    pub fn cells(&self) -> &[SimCell] {
        &self.cells
    }

    pub fn frame(&self) -> u32 {
        self.frame
    }

    pub fn stats(&self) -> CollisionStats {
        self.stats
    }

    pub fn records(&self) -> Vec<TrajectoryRecord> {
        self.cells
            .iter()
            .map(|c| TrajectoryRecord {
                frame: self.frame,
                cell_id: c.id,
                x: c.position[0],
                y: c.position[1],
                area: c.area(),
                eccentricity: c.eccentricity(),
                brightness: c.brightness,
                mitosis: None,
            })
            .collect()
    }

    /// Smallest pairwise center distance minus the contact distance;
    /// negative means overlap.
    pub fn min_clearance(&self) -> f64 {
        let mut best = f64::INFINITY;
        for i in 0..self.cells.len() {
            for j in i + 1..self.cells.len() {
                let (a, b) = (&self.cells[i], &self.cells[j]);
                let d = (b.position[0] - a.position[0]).hypot(b.position[1] - a.position[1]);
                best = best.min(d - a.radius - b.radius);
            }
        }
        best
    }

    /// Advances one frame (Δt = 1).
    pub fn step(&mut self) -> Result<()> {
        let (dvx, dvy) = (self.config.dvx, self.config.dvy);
        for c in &mut self.cells {
            c.velocity[0] += dvx;
            c.velocity[1] += dvy;
            c.position[0] += c.velocity[0];
            c.position[1] += c.velocity[1];
        }
        self.frame += 1;
        for i in 0..self.cells.len() {
            self.stats.wall_contacts += self.reflect_walls(i);
        }
        self.collide_pairs()?;
        self.separate()?;
        Ok(())
    }

    fn reflect_walls(&mut self, i: usize) -> usize {
        let limits = [self.config.channel_width, self.config.channel_height];
        let c = &mut self.cells[i];
        let r = c.radius;
        let mut contacts = 0;
        for axis in 0..2 {
            let (lo, hi) = (r, limits[axis] - r);
            // Mirror until inside; more than one bounce only for absurd speeds.
            for _ in 0..64 {
                let p = c.position[axis];
                if p < lo {
                    c.position[axis] = 2.0 * lo - p;
                    c.velocity[axis] = c.velocity[axis].abs();
                    contacts += 1;
                } else if p > hi {
                    c.position[axis] = 2.0 * hi - p;
                    c.velocity[axis] = -c.velocity[axis].abs();
                    contacts += 1;
                } else {
                    break;
                }
            }
            c.position[axis] = c.position[axis].clamp(lo, hi);
        }
        contacts
    }

    fn collide_pairs(&mut self) -> Result<()> {
        for i in 0..self.cells.len() {
            for j in i + 1..self.cells.len() {
                let (a, b) = (self.cells[i], self.cells[j]);
                let dx = b.position[0] - a.position[0];
                let dy = b.position[1] - a.position[1];
                let contact = a.radius + b.radius;
                let approaching = (b.velocity[0] - a.velocity[0]) * dx
                    + (b.velocity[1] - a.velocity[1]) * dy
                    < 0.0;
                if dx * dx + dy * dy > contact * contact || !approaching {
                    continue;
                }
                let (a2, b2) = resolve_elastic_collision(a, b)?;
                let p_err = (0..2)
                    .map(|k| {
                        ((a2.velocity[k] + b2.velocity[k]) - (a.velocity[k] + b.velocity[k])).abs()
                    })
                    .fold(0.0, f64::max);
                let e_err = ((a2.kinetic_energy() + b2.kinetic_energy())
                    - (a.kinetic_energy() + b.kinetic_energy()))
                .abs();
                self.stats.max_momentum_error = self.stats.max_momentum_error.max(p_err);
                self.stats.max_energy_error = self.stats.max_energy_error.max(e_err);
                self.stats.cell_collisions += 1;
                self.cells[i] = a2;
                self.cells[j] = b2;
            }
        }
        Ok(())
    }

    /// Pushes overlapping pairs apart along their center line, half each,
    /// keeping centers inside the walls; repeats until no pair overlaps.
    fn separate(&mut self) -> Result<()> {
        let limits = [self.config.channel_width, self.config.channel_height];
        for _ in 0..MAX_SEPARATION_SWEEPS {
            let mut moved = false;
            for i in 0..self.cells.len() {
                for j in i + 1..self.cells.len() {
                    let (a, b) = (self.cells[i], self.cells[j]);
                    let dx = b.position[0] - a.position[0];
                    let dy = b.position[1] - a.position[1];
                    let dist = dx.hypot(dy);
                    let contact = a.radius + b.radius;
                    if dist >= contact {
                        continue;
                    }
                    if dist == 0.0 {
                        return Err(Error::DegenerateCollision { a: a.id as usize, b: b.id as usize });
                    }
                    let push = 0.5 * (contact - dist) * (1.0 + 1e-9) + 1e-12;
                    let (nx, ny) = (dx / dist, dy / dist);
                    for (k, sign) in [(i, -1.0), (j, 1.0)] {
                        let c = &mut self.cells[k];
                        c.position[0] = (c.position[0] + sign * push * nx)
                            .clamp(c.radius, limits[0] - c.radius);
                        c.position[1] = (c.position[1] + sign * push * ny)
                            .clamp(c.radius, limits[1] - c.radius);
                    }
                    moved = true;
                }
            }
            if !moved {
                return Ok(());
            }
        }
        Err(Error::Diverged {
            context: format!("overlap resolution at frame {}", self.frame),
        })
    }
}

fn place_cells(config: &SimConfig) -> Result<Vec<SimCell>> {
    let r = config.radius;
    let [(x0, x1), (y0, y1)] = config.spawn_ranges();
    let infeasible = |reason: String| Error::InfeasiblePacking {
        n_cells: config.n_cells,
        radius: r,
        reason,
    };
    // Discs whose centers lie in the spawn box occupy the box inflated by r;
    // hexagonal packing is the densest arrangement possible.
    let available = (x1 - x0 + 2.0 * r) * (y1 - y0 + 2.0 * r);
    let needed = config.n_cells as f64 * PI * r * r;
    let hex_limit = PI / (2.0 * 3f64.sqrt());
    if needed > hex_limit * available {
        return Err(infeasible(format!(
            "cells need {needed:.1} px² but the spawn region holds at most {:.1} px²",
            hex_limit * available
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    for _ in 0..PLACEMENT_RESTARTS {
        let mut placed: Vec<[f64; 2]> = Vec::with_capacity(config.n_cells);
        'cells: for _ in 0..config.n_cells {
            for _ in 0..PLACEMENT_ATTEMPTS {
                let p = [sample(&mut rng, x0, x1), sample(&mut rng, y0, y1)];
                if placed
                    .iter()
                    .all(|q| (p[0] - q[0]).hypot(p[1] - q[1]) >= 2.0 * r)
                {
                    placed.push(p);
                    continue 'cells;
                }
            }
            break;
        }
        if placed.len() == config.n_cells {
            return Ok(placed
                .into_iter()
                .enumerate()
                .map(|(id, position)| SimCell {
                    id: id as u32,
                    position,
                    velocity: config.initial_velocity,
                    radius: r,
                    brightness: config.brightness,
                })
                .collect());
        }
    }
    Err(infeasible("rejection sampling found no non-overlapping placement".into()))
}

fn sample(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}

/// Runs the full simulation and returns every cell in every frame, noisy
/// when `noise_fraction > 0`.
pub fn simulate(config: &SimConfig) -> Result<Vec<TrajectoryRecord>> {
    let (records, _) = simulate_with_stats(config)?;
    Ok(records)
}

pub fn simulate_with_stats(config: &SimConfig) -> Result<(Vec<TrajectoryRecord>, CollisionStats)> {
    let mut sim = Simulation::new(config.clone())?;
    let mut records = Vec::with_capacity(config.frames * config.n_cells);
    records.extend(sim.records());
    for _ in 1..config.frames {
        sim.step()?;
        records.extend(sim.records());
    }
    if config.noise_fraction > 0.0 {
        records = add_noise(&records, config.noise_fraction, config.seed);
    }
    Ok((records, sim.stats()))
}

/// Zero-mean Gaussian with standard deviation `bound / 3`, clamped to
/// `±bound`.
pub fn truncated_gaussian<R: Rng + ?Sized>(rng: &mut R, bound: f64) -> f64 {
    if bound <= 0.0 {
        return 0.0;
    }
    let normal = Normal::new(0.0, bound / 3.0).expect("positive sigma");
    normal.sample(rng).clamp(-bound, bound)
}

/// Perturbs every position by at most `noise_fraction` of the cell's speed in
/// that frame, per axis. Speed is the displacement from the previous frame
/// (from the next frame for a trajectory's first record).
pub fn add_noise(records: &[TrajectoryRecord], noise_fraction: f64, seed: u64) -> Vec<TrajectoryRecord> {
    if noise_fraction <= 0.0 {
        return records.to_vec();
    }
    let mut pos: BTreeMap<(u32, u32), (f64, f64)> = BTreeMap::new();
    for r in records {
        pos.insert((r.cell_id, r.frame), (r.x, r.y));
    }
    let speed = |r: &TrajectoryRecord| {
        let step = |a: (f64, f64), b: (f64, f64)| (b.0 - a.0).hypot(b.1 - a.1);
        let here = (r.x, r.y);
        if let Some(&prev) = r.frame.checked_sub(1).and_then(|f| pos.get(&(r.cell_id, f))) {
            step(prev, here)
        } else if let Some(&next) = pos.get(&(r.cell_id, r.frame + 1)) {
            step(here, next)
        } else {
            0.0
        }
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    records
        .iter()
        .map(|r| {
            let bound = noise_fraction * speed(r);
            let mut out = *r;
            out.x += truncated_gaussian(&mut rng, bound);
            out.y += truncated_gaussian(&mut rng, bound);
            out
        })
        .collect()
}
