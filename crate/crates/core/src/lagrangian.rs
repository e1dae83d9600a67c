//! Stochastic parcel solver used as the reference solution. Droplets are
//! bundled into weighted parcels marched in time with exact exponential
//! drag/evaporation updates; collisions are sampled per cell with Poisson
//! counts. The steady state of the time-marched system is the stationary
//! spatial profile the Eulerian solvers compute directly.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};

use crate::physics::{
    radius_from_volume, surface_from_volume, volume_from_radius, DragLaw, EvaporationLaw,
    GasField, Population, SprayProblem, RHO_LIQUID,
};

/// Hard upper bound on the time step; above this the first-order transport
/// scheme visibly distorts the steep entrance region.
pub const MAX_DT: f64 = 1.0e-6;

/// Default number of cells on [z0, z_end].
pub const DEFAULT_CELLS: usize = 130;

/// Cells below this average population make the per-cell collision
/// statistics unreliable.
pub const MIN_PARCELS_PER_CELL: f64 = 20.0;

/// One numerical parcel: `n` droplets of volume `v` moving together.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Parcel {
    pub n: f64,
    pub z: f64,
    pub u: f64,
    pub v: f64,
}

impl Parcel {
    pub fn radius(&self) -> f64 {
        radius_from_volume(self.v)
    }
}

/// Spatial cells for collision sampling and averaged statistics. Boundaries
/// are uniform in z^(3/10), which concentrates cells near the entrance where
/// the gas decelerates hardest. Volumes are the exact conical slices of a
/// unit-area inlet cone, vol = (z_hi^3 - z_lo^3) / (3 z0^2); with parcel
/// weights fixed by the inlet mass budget (see `parcel_liquid_volume`) this
/// makes steady per-cell densities reproduce the analytic profile with no
/// free constant.
#[derive(Debug, Clone)]
pub struct CellGrid {
    edges: Vec<f64>,
    volumes: Vec<f64>,
}

impl CellGrid {
    pub fn new(z0: f64, z_end: f64) -> CellGrid {
        CellGrid::with_cells(DEFAULT_CELLS, z0, z_end)
    }

    pub fn with_cells(n: usize, z0: f64, z_end: f64) -> CellGrid {
        assert!(n >= 1 && z0 > 0.0 && z_end > z0);
        let (w0, w1) = (z0.powf(0.3), z_end.powf(0.3));
        let mut edges: Vec<f64> = (0..=n)
            .map(|j| {
                let w = w0 + (w1 - w0) * j as f64 / n as f64;
                w.powf(10.0 / 3.0)
            })
            .collect();
        // the powf round trip perturbs the endpoints by a few ulps; pin them
        // so boundary parcels always classify
        edges[0] = z0;
        edges[n] = z_end;
        let volumes = edges
            .windows(2)
            .map(|e| (e[1].powi(3) - e[0].powi(3)) / (3.0 * z0 * z0))
            .collect();
        CellGrid { edges, volumes }
    }

    pub fn len(&self) -> usize {
        self.volumes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.volumes.is_empty()
    }

    pub fn z0(&self) -> f64 {
        self.edges[0]
    }

    pub fn z_end(&self) -> f64 {
        *self.edges.last().unwrap()
    }

    pub fn center(&self, j: usize) -> f64 {
        0.5 * (self.edges[j] + self.edges[j + 1])
    }

    pub fn volume(&self, j: usize) -> f64 {
        self.volumes[j]
    }

    pub fn min_width(&self) -> f64 {
        self.edges.windows(2).map(|e| e[1] - e[0]).fold(f64::INFINITY, f64::min)
    }

    /// Containing cell, clamped to the grid (a parcel exactly at z_end has
    /// not yet been retired).
    pub fn cell_of(&self, z: f64) -> usize {
        debug_assert!(z >= self.z0() && z <= self.z_end());
        let n = self.len();
        self.edges[1..n].partition_point(|&e| e <= z).min(n - 1)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct DsmcConfig {
    /// time step, s; capped at MAX_DT
    pub dt: f64,
    /// parcels injected per second
    pub injection_rate: f64,
    pub rng_seed: u64,
    /// statistics accumulation length, steps
    pub averaging_window: usize,
}

/// What happened to a parcel over one transport step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Fate {
    Alive,
    /// surface regressed to zero (nonlinear evaporation only)
    Evaporated,
}

/// Exact-exponential update over one step: drag relaxes the velocity toward
/// the local gas speed with the rate frozen at the step start, the position
/// advances with the end-of-step velocity, and the volume follows the closed
/// form of the active evaporation law.
pub fn transport_step(
    p: &mut Parcel,
    dt: f64,
    gas: &GasField,
    drag: &DragLaw,
    evap: &EvaporationLaw,
) -> Fate {
    debug_assert!(dt > 0.0 && p.v > 0.0);
    let decay = (-dt * drag.relaxation_rate(p.v)).exp();
    p.u = p.u * decay + gas.axial_velocity(p.z) * (1.0 - decay);
    p.z += dt * p.u;
    match *evap {
        EvaporationLaw::None => {}
        EvaporationLaw::LinearVolume { ev } => p.v *= (-ev * dt).exp(),
        EvaporationLaw::NonlinearSurface { es } => {
            let s = surface_from_volume(p.v) - es * dt;
            if s <= 0.0 {
                return Fate::Evaporated;
            }
            p.v = s.powf(1.5) / (6.0 * PI.sqrt());
        }
    }
    Fate::Alive
}

/// Collision bookkeeping over one or more steps.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CollisionTally {
    /// pairs examined
    pub pairs: u64,
    /// pairs with at least one collision
    pub colliding: u64,
    /// pairs where the sampled count overdrew the heavy parcel (nu n2 > n1);
    /// the time step is too large when these are more than rare
    pub overdrawn: u64,
    /// liquid volume created by overdrawn removals, Sum n v bookkeeping;
    /// exact conservation holds up to this recorded amount
    pub volume_created: f64,
    /// same bookkeeping for Sum n v u
    pub momentum_created: f64,
}

impl CollisionTally {
    pub fn absorb(&mut self, other: &CollisionTally) {
        self.pairs += other.pairs;
        self.colliding += other.colliding;
        self.overdrawn += other.overdrawn;
        self.volume_created += other.volume_created;
        self.momentum_created += other.momentum_created;
    }
}

/// One collision stage: bin parcels into cells, draw disjoint random pairs
/// per cell, sample a Poisson collision count per pair, and apply the
/// outcomes. The heavier-weighted parcel of a pair loses nu of its droplets
/// to each of the lighter parcel's, which grow and take the mass-averaged
/// velocity; weights `n2` never change, so repeated collisions cannot
/// multiply parcels. `bins` is caller-owned scratch to avoid re-allocating
/// the cell lists every step.
pub fn collision_step(
    parcels: &mut Vec<Parcel>,
    grid: &CellGrid,
    dt: f64,
    efficiency: f64,
    rng: &mut ChaCha8Rng,
    bins: &mut Vec<Vec<usize>>,
) -> CollisionTally {
    let mut tally = CollisionTally::default();
    if efficiency == 0.0 || parcels.len() < 2 {
        return tally;
    }
    bins.resize(grid.len(), Vec::new());
    for b in bins.iter_mut() {
        b.clear();
    }
    for (i, p) in parcels.iter().enumerate() {
        bins[grid.cell_of(p.z)].push(i);
    }

    let mut doomed: Vec<usize> = Vec::new();
    for (j, bin) in bins.iter_mut().enumerate() {
        let n_j = bin.len();
        if n_j < 2 {
            continue;
        }
        bin.shuffle(rng);
        let vol = grid.volume(j);
        for pair in bin.chunks_exact(2) {
            tally.pairs += 1;
            let (mut i1, mut i2) = (pair[0], pair[1]);
            if parcels[i1].n < parcels[i2].n {
                std::mem::swap(&mut i1, &mut i2);
            }
            let (p1, p2) = (parcels[i1], parcels[i2]);
            let rsum = p1.radius() + p2.radius();
            let lambda = efficiency * PI * p1.n * (n_j - 1) as f64 * dt / vol
                * rsum
                * rsum
                * (p1.u - p2.u).abs();
            if lambda <= 0.0 {
                continue;
            }
            let nu = Poisson::new(lambda).unwrap().sample(rng).round() as u64;
            if nu == 0 {
                continue;
            }
            tally.colliding += 1;
            let nu = nu as f64;
            let grown_v = p2.v + nu * p1.v;
            parcels[i2].u = (p2.v * p2.u + nu * p1.v * p1.u) / grown_v;
            parcels[i2].v = grown_v;
            let n1_left = p1.n - nu * p2.n;
            if n1_left <= 0.0 {
                tally.overdrawn += 1;
                tally.volume_created += -n1_left * p1.v;
                tally.momentum_created += -n1_left * p1.v * p1.u;
                doomed.push(i1);
            } else {
                parcels[i1].n = n1_left;
            }
        }
    }
    // remove in descending index order so swap_remove cannot disturb a
    // smaller doomed index
    doomed.sort_unstable_by(|a, b| b.cmp(a));
    for i in doomed {
        parcels.swap_remove(i);
    }
    tally
}

/// Draws injection volumes from the population's mass distribution, so that
/// equal-liquid-volume parcels reproduce the number distribution through
/// their weights.
#[derive(Debug, Clone)]
pub enum VolumeSampler {
    /// coin-flip between discrete sizes with mass-fraction probabilities
    Peaks { volumes: Vec<f64>, mass_cdf: Vec<f64> },
    /// inverse-CDF table of the smooth mass density, linear in radius
    Table { r: Vec<f64>, cdf: Vec<f64> },
}

impl VolumeSampler {
    pub fn new(pop: &Population) -> VolumeSampler {
        match pop {
            Population::Peaks(peaks) => {
                let masses: Vec<f64> =
                    peaks.iter().map(|&(n, r)| n * volume_from_radius(r)).collect();
                let total: f64 = masses.iter().sum();
                let mut acc = 0.0;
                let mass_cdf = masses
                    .iter()
                    .map(|m| {
                        acc += m / total;
                        acc
                    })
                    .collect();
                VolumeSampler::Peaks {
                    volumes: peaks.iter().map(|&(_, r)| volume_from_radius(r)).collect(),
                    mass_cdf,
                }
            }
            Population::Smooth(p) => {
                let k = 2048;
                let r: Vec<f64> = (0..=k).map(|i| p.r_max * i as f64 / k as f64).collect();
                let q: Vec<f64> =
                    r.iter().map(|&ri| volume_from_radius(ri) * p.density(ri)).collect();
                let mut cdf = vec![0.0];
                for i in 0..k {
                    cdf.push(cdf[i] + 0.5 * (q[i] + q[i + 1]) * (r[i + 1] - r[i]));
                }
                let total = *cdf.last().unwrap();
                for c in cdf.iter_mut() {
                    *c /= total;
                }
                VolumeSampler::Table { r, cdf }
            }
        }
    }

    pub fn sample_volume(&self, rng: &mut ChaCha8Rng) -> f64 {
        let x: f64 = rng.gen();
        match self {
            VolumeSampler::Peaks { volumes, mass_cdf } => {
                let i = mass_cdf.partition_point(|&c| c < x).min(volumes.len() - 1);
                volumes[i]
            }
            VolumeSampler::Table { r, cdf } => {
                let i = cdf.partition_point(|&c| c < x).clamp(1, r.len() - 1);
                let t = (x - cdf[i - 1]) / (cdf[i] - cdf[i - 1]);
                volume_from_radius(r[i - 1] + t * (r[i] - r[i - 1]))
            }
        }
    }
}

/// Liquid volume carried by every parcel, fixed by the inlet mass budget:
/// the population's mass density enters at V0 through the unit inlet area,
/// split evenly over `rate` parcels per second.
pub fn parcel_liquid_volume(pop: &Population, v0: f64, rate: f64) -> f64 {
    assert!(rate > 0.0);
    pop.mass_density() * v0 / (RHO_LIQUID * rate)
}

pub fn inject_parcels(
    parcels: &mut Vec<Parcel>,
    count: usize,
    sampler: &VolumeSampler,
    liquid_volume: f64,
    z0: f64,
    u0: f64,
    rng: &mut ChaCha8Rng,
) {
    for _ in 0..count {
        let v = sampler.sample_volume(rng);
        parcels.push(Parcel { n: liquid_volume / v, z: z0, u: u0, v });
    }
}

/// Size/velocity histogram request for the snapshot stations.
#[derive(Debug, Clone, Copy)]
pub struct HistogramSpec {
    pub r_max: f64,
    pub r_bins: usize,
    pub u_bins: usize,
    pub u_max: f64,
}

impl HistogramSpec {
    pub fn for_radius(r_max: f64) -> HistogramSpec {
        HistogramSpec { r_max, r_bins: 64, u_bins: 128, u_max: 6.0 }
    }
}

/// Time-averaged cell diagnostics. The standard errors come from splitting
/// the averaging window into eight blocks; cells with fewer than two
/// mass-carrying blocks report an infinite error (pure noise).
#[derive(Debug, Clone, PartialEq)]
pub struct CellProfile {
    pub z: Vec<f64>,
    /// droplets per m^3
    pub number_density: Vec<f64>,
    /// liquid kg per m^3
    pub mass_density: Vec<f64>,
    /// mass-weighted axial velocity, m/s
    pub mean_velocity: Vec<f64>,
    /// Sauter mean radius, m
    pub sauter_radius: Vec<f64>,
    /// standard error of mass_density, kg per m^3
    pub mass_se: Vec<f64>,
    /// standard error of mean_velocity, m/s
    pub velocity_se: Vec<f64>,
}

/// Size-conditioned statistics at one station: mass density per unit radius
/// and the mass-weighted mean velocity per radius bin, with the half-peak
/// interval of the conditional velocity PDF (the outermost velocities where
/// the binned PDF is half its peak; a delta-like PDF collapses the interval
/// to one bin width). Bins that collected no mass hold zeros.
#[derive(Debug, Clone)]
pub struct StationCurve {
    pub station_z: f64,
    pub cell: usize,
    pub r: Vec<f64>,
    pub mass_per_radius: Vec<f64>,
    pub mean_u: Vec<f64>,
    pub u_lo: Vec<f64>,
    pub u_hi: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub profile: CellProfile,
    pub stations: Vec<StationCurve>,
    /// inflow/outflow parcel balance settled within tolerance before
    /// averaging started
    pub steady: bool,
    /// quarter-window probation blocks consumed by the balance check
    pub blocks_waited: usize,
    /// smallest time-averaged parcel count over the cells
    pub min_parcels_per_cell: f64,
    pub low_parcel_warning: bool,
    pub collisions: CollisionTally,
    /// droplets and liquid mass injected per second of simulated time
    pub injected_mass_rate: f64,
    pub steps_run: usize,
    pub final_parcel_count: usize,
}

struct StationAccum {
    station_z: f64,
    cell: usize,
    /// mass weight per (r bin, u bin)
    grid: Vec<f64>,
    /// mass weight and mass-velocity product per r bin
    mass: Vec<f64>,
    mu: Vec<f64>,
}

/// March the parcel system to a statistically steady state and average the
/// cell statistics over one window. Deterministic for a fixed seed: the run
/// is single-threaded and every random draw comes from one seeded stream.
pub fn run_to_steady_state(
    problem: &SprayProblem,
    pop: &Population,
    cfg: &DsmcConfig,
    grid: &CellGrid,
    stations: &[f64],
    hist: &HistogramSpec,
) -> Result<RunReport, String> {
    let gas = &problem.gas;
    assert!(
        (grid.z0() - gas.z0).abs() < 1e-12,
        "cell grid must start at the nozzle entrance"
    );
    if cfg.dt > MAX_DT {
        return Err(format!("time step {:e} exceeds the {:e} s transport limit", cfg.dt, MAX_DT));
    }
    // worst-case speed is the injection speed; the gas only decelerates
    let cfl = gas.v0 * cfg.dt / grid.min_width();
    if cfl >= 0.5 {
        return Err(format!(
            "CFL violation: fastest parcel crosses {:.2} of the smallest cell per step",
            cfl
        ));
    }
    if cfg.averaging_window == 0 || cfg.injection_rate <= 0.0 {
        return Err("averaging window and injection rate must be positive".into());
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let sampler = VolumeSampler::new(pop);
    let liquid_volume = parcel_liquid_volume(pop, gas.v0, cfg.injection_rate);
    let efficiency = problem.coal.efficiency();
    let mut parcels: Vec<Parcel> = Vec::new();
    let mut bins: Vec<Vec<usize>> = Vec::new();
    let mut tally = CollisionTally::default();
    let mut steps_run = 0usize;

    let inj = Poisson::new(cfg.injection_rate * cfg.dt)
        .map_err(|e| format!("injection rate: {e:?}"))?;
    let z_end = grid.z_end();

    let mut injected = 0u64;
    let mut retired = 0u64;
    let step = |parcels: &mut Vec<Parcel>,
                    rng: &mut ChaCha8Rng,
                    bins: &mut Vec<Vec<usize>>,
                    injected: &mut u64,
                    retired: &mut u64|
     -> CollisionTally {
        let born = inj.sample(rng).round() as usize;
        inject_parcels(parcels, born, &sampler, liquid_volume, gas.z0, gas.v0, rng);
        *injected += born as u64;
        let mut i = 0;
        while i < parcels.len() {
            let fate = transport_step(&mut parcels[i], cfg.dt, gas, &problem.drag, &problem.evap);
            if fate == Fate::Evaporated || parcels[i].z > z_end {
                parcels.swap_remove(i);
                *retired += 1;
            } else {
                i += 1;
            }
        }
        if efficiency > 0.0 {
            collision_step(parcels, grid, cfg.dt, efficiency, rng, bins)
        } else {
            CollisionTally::default()
        }
    };

    // deterministic fill: the domain transit time at gas speed bounds the
    // droplet transit from above (drag keeps droplets at or above the gas
    // speed in this decelerating flow)
    let t_fill = (z_end.powi(3) - gas.z0.powi(3)) / (3.0 * gas.z0 * gas.z0 * gas.v0);
    let warmup = (1.5 * t_fill / cfg.dt).ceil() as usize;
    for _ in 0..warmup {
        tally.absorb(&step(&mut parcels, &mut rng, &mut bins, &mut injected, &mut retired));
    }
    steps_run += warmup;

    // probation: parcel throughput must balance before averaging starts; the
    // tolerance floor acknowledges the Poisson noise of the block counts
    let block = (cfg.averaging_window / 4).max(1);
    let mut steady = false;
    let mut blocks_waited = 0usize;
    for _ in 0..8 {
        (injected, retired) = (0, 0);
        for _ in 0..block {
            tally.absorb(&step(&mut parcels, &mut rng, &mut bins, &mut injected, &mut retired));
        }
        steps_run += block;
        blocks_waited += 1;
        if injected > 0 {
            let imbalance = (retired as f64 / injected as f64 - 1.0).abs();
            if imbalance <= 0.005f64.max(4.0 / (injected as f64).sqrt()) {
                steady = true;
                break;
            }
        }
    }

    // averaging window
    let n = grid.len();
    let (mut s0, mut s1, mut su, mut s23) =
        (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    let mut mean_count = vec![0.0; n];
    const NOISE_BLOCKS: usize = 8;
    let mut blk1 = vec![vec![0.0; n]; NOISE_BLOCKS];
    let mut blku = vec![vec![0.0; n]; NOISE_BLOCKS];
    let mut blk_steps = [0usize; NOISE_BLOCKS];
    let mut accums: Vec<StationAccum> = stations
        .iter()
        .map(|&z| StationAccum {
            station_z: z,
            cell: grid.cell_of(z),
            grid: vec![0.0; hist.r_bins * hist.u_bins],
            mass: vec![0.0; hist.r_bins],
            mu: vec![0.0; hist.r_bins],
        })
        .collect();
    let dr = hist.r_max / hist.r_bins as f64;
    let du = hist.u_max / hist.u_bins as f64;

    for i in 0..cfg.averaging_window {
        tally.absorb(&step(&mut parcels, &mut rng, &mut bins, &mut injected, &mut retired));
        let blk = i * NOISE_BLOCKS / cfg.averaging_window;
        blk_steps[blk] += 1;
        for p in &parcels {
            let j = grid.cell_of(p.z);
            s0[j] += p.n;
            s1[j] += p.n * p.v;
            su[j] += p.n * p.v * p.u;
            s23[j] += p.n * p.v.powf(2.0 / 3.0);
            mean_count[j] += 1.0;
            blk1[blk][j] += p.n * p.v;
            blku[blk][j] += p.n * p.v * p.u;
        }
        for acc in accums.iter_mut() {
            let j = acc.cell;
            for p in &parcels {
                if grid.cell_of(p.z) != j {
                    continue;
                }
                let rb = ((p.radius() / dr) as usize).min(hist.r_bins - 1);
                let ub = ((p.u / du) as usize).min(hist.u_bins - 1);
                let w = p.n * p.v;
                acc.grid[rb * hist.u_bins + ub] += w;
                acc.mass[rb] += w;
                acc.mu[rb] += w * p.u;
            }
        }
    }
    steps_run += cfg.averaging_window;

    let samples = cfg.averaging_window as f64;
    let mut profile = CellProfile {
        z: (0..n).map(|j| grid.center(j)).collect(),
        number_density: vec![0.0; n],
        mass_density: vec![0.0; n],
        mean_velocity: vec![0.0; n],
        sauter_radius: vec![0.0; n],
        mass_se: vec![0.0; n],
        velocity_se: vec![0.0; n],
    };
    for j in 0..n {
        let vol = grid.volume(j) * samples;
        profile.number_density[j] = s0[j] / vol;
        profile.mass_density[j] = RHO_LIQUID * s1[j] / vol;
        if s1[j] > 0.0 {
            profile.mean_velocity[j] = su[j] / s1[j];
            profile.sauter_radius[j] = (3.0 / (4.0 * PI)).cbrt() * s1[j] / s23[j];
        }
        let masses: Vec<f64> = (0..NOISE_BLOCKS)
            .filter(|&b| blk_steps[b] > 0)
            .map(|b| RHO_LIQUID * blk1[b][j] / (grid.volume(j) * blk_steps[b] as f64))
            .collect();
        profile.mass_se[j] = block_standard_error(&masses);
        let vels: Vec<f64> = (0..NOISE_BLOCKS)
            .filter(|&b| blk1[b][j] > 0.0)
            .map(|b| blku[b][j] / blk1[b][j])
            .collect();
        profile.velocity_se[j] = block_standard_error(&vels);
    }

    let curves = accums
        .iter()
        .map(|acc| {
            let vol = grid.volume(acc.cell) * samples;
            let mut curve = StationCurve {
                station_z: acc.station_z,
                cell: acc.cell,
                r: (0..hist.r_bins).map(|b| (b as f64 + 0.5) * dr).collect(),
                mass_per_radius: vec![0.0; hist.r_bins],
                mean_u: vec![0.0; hist.r_bins],
                u_lo: vec![0.0; hist.r_bins],
                u_hi: vec![0.0; hist.r_bins],
            };
            for b in 0..hist.r_bins {
                if acc.mass[b] == 0.0 {
                    continue;
                }
                curve.mass_per_radius[b] = RHO_LIQUID * acc.mass[b] / (vol * dr);
                curve.mean_u[b] = acc.mu[b] / acc.mass[b];
                let row = &acc.grid[b * hist.u_bins..(b + 1) * hist.u_bins];
                (curve.u_lo[b], curve.u_hi[b]) = half_peak_interval(row, du);
            }
            curve
        })
        .collect();

    let min_parcels = mean_count.iter().fold(f64::INFINITY, |m, &c| m.min(c / samples));
    Ok(RunReport {
        profile,
        stations: curves,
        steady,
        blocks_waited,
        min_parcels_per_cell: min_parcels,
        low_parcel_warning: min_parcels < MIN_PARCELS_PER_CELL,
        collisions: tally,
        injected_mass_rate: pop.mass_density() * gas.v0,
        steps_run,
        final_parcel_count: parcels.len(),
    })
}

/// Standard error of the mean over block samples; fewer than two samples
/// cannot be resolved and report infinity.
fn block_standard_error(samples: &[f64]) -> f64 {
    if samples.len() < 2 {
        return f64::INFINITY;
    }
    let nb = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / nb;
    let var = samples.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / (nb - 1.0);
    (var / nb).sqrt()
}

/// Outermost velocities at which a binned PDF crosses half its peak value,
/// interpolated linearly between bin centers. A single occupied bin reports
/// an interval of one bin width around its center.
fn half_peak_interval(row: &[f64], du: f64) -> (f64, f64) {
    let peak = row.iter().fold(0.0f64, |m, &w| m.max(w));
    if peak <= 0.0 {
        return (0.0, 0.0);
    }
    let half = 0.5 * peak;
    let first = row.iter().position(|&w| w >= half).unwrap();
    let last = row.iter().rposition(|&w| w >= half).unwrap();
    let center = |b: usize| (b as f64 + 0.5) * du;
    let lo = if first == 0 {
        center(0)
    } else {
        center(first - 1) + du * (half - row[first - 1]) / (row[first] - row[first - 1])
    };
    let hi = if last == row.len() - 1 {
        center(last)
    } else {
        center(last) + du * (row[last] - half) / (row[last] - row[last + 1])
    };
    (lo, hi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::physics::{self, Coalescence};
    use approx::assert_relative_eq;

    const UM: f64 = 1.0e-6;

    fn gas() -> GasField {
        GasField::monomodal()
    }

    #[test]
    fn ballistic_limit_leaves_velocity_unchanged() {
        let mut p = Parcel { n: 1.0, z: 0.12, u: 4.2, v: volume_from_radius(10.0 * UM) };
        let fate = transport_step(
            &mut p,
            1e-6,
            &gas(),
            &DragLaw { alpha: 0.0 },
            &EvaporationLaw::None,
        );
        assert_eq!(fate, Fate::Alive);
        assert_eq!(p.u, 4.2);
        assert_relative_eq!(p.z, 0.12 + 1e-6 * 4.2, max_relative = 1e-15);
    }

    #[test]
    fn long_step_equilibrates_to_gas_velocity() {
        let mut p = Parcel { n: 1.0, z: 0.15, u: 5.0, v: volume_from_radius(1.0 * UM) };
        let g = gas();
        transport_step(&mut p, 1.0, &g, &DragLaw::default(), &EvaporationLaw::None);
        assert_eq!(p.u, g.axial_velocity(0.15));
    }

    #[test]
    fn one_step_matches_exponential_relaxation() {
        let g = gas();
        let v = volume_from_radius(14.0 * UM);
        let mut p = Parcel { n: 1.0, z: 0.13, u: 5.0, v };
        let dt = 1e-6;
        transport_step(&mut p, dt, &g, &DragLaw::default(), &EvaporationLaw::None);
        let x = (-dt * DragLaw::default().relaxation_rate(v)).exp();
        let expect_u = 5.0 * x + g.axial_velocity(0.13) * (1.0 - x);
        assert_relative_eq!(p.u, expect_u, max_relative = 1e-15);
        assert_relative_eq!(p.z, 0.13 + dt * expect_u, max_relative = 1e-15);
    }

    #[test]
    fn linear_volume_decay_is_exact() {
        let v0 = volume_from_radius(12.0 * UM);
        let mut p = Parcel { n: 1.0, z: 0.11, u: 5.0, v: v0 };
        let ev = physics::EV_MONOMODAL;
        for _ in 0..100 {
            transport_step(&mut p, 1e-4, &gas(), &DragLaw { alpha: 0.0 }, &EvaporationLaw::LinearVolume { ev });
        }
        assert_relative_eq!(p.v, v0 * (-ev * 1e-2).exp(), max_relative = 1e-12);
    }

    #[test]
    fn surface_law_vanishes_exactly_at_lifetime() {
        // a 10 um droplet carries surface 4 pi e-10; at regression rate Es
        // it survives s0/Es = 6.3148e-3 s and not a step longer
        let es = physics::ES_NONLINEAR;
        let v0 = volume_from_radius(10.0 * UM);
        let lifetime = surface_from_volume(v0) / es;
        assert_relative_eq!(lifetime, 6.314759102693051e-3, max_relative = 1e-12);
        let mut p = Parcel { n: 1.0, z: 0.11, u: 5.0, v: v0 };
        let fate = transport_step(
            &mut p,
            lifetime,
            &gas(),
            &DragLaw { alpha: 0.0 },
            &EvaporationLaw::NonlinearSurface { es },
        );
        assert_eq!(fate, Fate::Evaporated);
        // one part in a million shorter and it survives
        let mut q = Parcel { n: 1.0, z: 0.11, u: 5.0, v: v0 };
        let fate = transport_step(
            &mut q,
            lifetime * (1.0 - 1e-6),
            &gas(),
            &DragLaw { alpha: 0.0 },
            &EvaporationLaw::NonlinearSurface { es },
        );
        assert_eq!(fate, Fate::Alive);
    }

    #[test]
    fn cell_grid_follows_the_three_tenths_rule() {
        let grid = CellGrid::new(0.10, 0.30);
        assert_eq!(grid.len(), DEFAULT_CELLS);
        assert_eq!(grid.z0(), 0.10);
        assert_relative_eq!(grid.z_end(), 0.30, max_relative = 1e-12);
        // edges uniform in z^0.3
        let w: Vec<f64> = grid.edges.iter().map(|&z| z.powf(0.3)).collect();
        let dw = w[1] - w[0];
        for pair in w.windows(2) {
            assert_relative_eq!(pair[1] - pair[0], dw, max_relative = 1e-9);
        }
        // entrance cells smaller than exit cells
        assert!(grid.edges[1] - grid.edges[0] < grid.edges[130] - grid.edges[129]);
        // volumes are exact cone slices of a unit inlet area
        let vol0 = (grid.edges[1].powi(3) - 0.1f64.powi(3)) / 0.03;
        assert_relative_eq!(grid.volume(0), vol0, max_relative = 1e-12);
        assert_eq!(grid.cell_of(0.10), 0);
        assert_eq!(grid.cell_of(0.30), 129);
        let mid = grid.center(64);
        assert_eq!(grid.cell_of(mid), 64);
    }

    #[test]
    fn collisions_require_velocity_contrast_and_efficiency() {
        let grid = CellGrid::with_cells(1, 0.10, 0.30);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut bins = Vec::new();
        let v = volume_from_radius(20.0 * UM);
        let make = || {
            vec![
                Parcel { n: 1e8, z: 0.15, u: 3.0, v },
                Parcel { n: 1e8, z: 0.16, u: 3.0, v },
            ]
        };
        // same velocity: lambda = 0, nothing happens
        let mut parcels = make();
        let t = collision_step(&mut parcels, &grid, 1e-3, 1.0, &mut rng, &mut bins);
        assert_eq!(t.colliding, 0);
        assert_eq!(parcels, make());
        // efficiency zero: not even examined
        let mut parcels = make();
        parcels[1].u = 1.0;
        let t = collision_step(&mut parcels, &grid, 1e-3, 0.0, &mut rng, &mut bins);
        assert_eq!(t.pairs, 0);
    }

    #[test]
    fn single_collision_of_equal_volumes_averages_velocity() {
        // force nu = 1 odds overwhelmingly via a huge weight imbalance and a
        // lambda around 1e-2, then retry until exactly one collision fires
        let grid = CellGrid::with_cells(1, 0.10, 0.30);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut bins = Vec::new();
        let v = volume_from_radius(20.0 * UM);
        for _ in 0..10_000 {
            let mut parcels = vec![
                Parcel { n: 1e9, z: 0.15, u: 4.0, v },
                Parcel { n: 1e3, z: 0.16, u: 2.0, v },
            ];
            let t = collision_step(&mut parcels, &grid, 1e-5, 1.0, &mut rng, &mut bins);
            if t.colliding == 1 && parcels[1].v == 2.0 * v {
                // nu = 1: light parcel doubled its volume and averaged the
                // velocities; heavy parcel lost 1e3 droplets
                assert_relative_eq!(parcels[1].u, 3.0, max_relative = 1e-12);
                assert_relative_eq!(parcels[0].n, 1e9 - 1e3, max_relative = 1e-12);
                assert_eq!(t.overdrawn, 0);
                return;
            }
        }
        panic!("no single collision observed in 10000 attempts");
    }

    #[test]
    fn collision_steps_conserve_liquid_volume_and_momentum() {
        let grid = CellGrid::with_cells(4, 0.10, 0.30);
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut bins = Vec::new();
        let mut parcels: Vec<Parcel> = (0..240)
            .map(|i| Parcel {
                n: 1e7 * (1.0 + (i % 97) as f64),
                z: 0.10 + 0.199 * ((i * 37 % 240) as f64 / 240.0),
                u: 2.0 + 3.0 * ((i * 61 % 240) as f64 / 240.0),
                v: volume_from_radius((8.0 + (i % 13) as f64) * UM),
            })
            .collect();
        let before_v: f64 = parcels.iter().map(|p| p.n * p.v).sum();
        let before_mom: f64 = parcels.iter().map(|p| p.n * p.v * p.u).sum();
        let mut tally = CollisionTally::default();
        for _ in 0..50 {
            tally.absorb(&collision_step(&mut parcels, &grid, 2e-5, 1.0, &mut rng, &mut bins));
        }
        assert!(tally.colliding > 20, "want real collision activity, got {}", tally.colliding);
        // conservation is exact up to the recorded overdraw corrections,
        // whatever the seed produced
        let after_v: f64 = parcels.iter().map(|p| p.n * p.v).sum();
        let after_mom: f64 = parcels.iter().map(|p| p.n * p.v * p.u).sum();
        assert_relative_eq!(after_v, before_v + tally.volume_created, max_relative = 1e-12);
        assert_relative_eq!(after_mom, before_mom + tally.momentum_created, max_relative = 1e-12);
    }

    #[test]
    fn overdrawn_removals_are_accounted_exactly() {
        let grid = CellGrid::with_cells(1, 0.10, 0.30);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut bins = Vec::new();
        // equal weights and a large lambda force nu >= 2 overdraws
        let v = volume_from_radius(25.0 * UM);
        let mut parcels: Vec<Parcel> = (0..40)
            .map(|i| Parcel { n: 1e8, z: 0.12 + 1e-4 * i as f64, u: (i % 2) as f64 * 2.0 + 2.0, v })
            .collect();
        let before: f64 = parcels.iter().map(|p| p.n * p.v).sum();
        let mut tally = CollisionTally::default();
        for _ in 0..40 {
            tally.absorb(&collision_step(&mut parcels, &grid, 1e-4, 1.0, &mut rng, &mut bins));
        }
        assert!(tally.overdrawn > 0, "parameters chosen to overdraw, none seen");
        let after: f64 = parcels.iter().map(|p| p.n * p.v).sum();
        assert_relative_eq!(after, before + tally.volume_created, max_relative = 1e-12);
    }

    #[test]
    fn bimodal_injection_splits_liquid_evenly() {
        let pop = Population::bimodal(physics::INJECTED_MASS_DENSITY);
        let sampler = VolumeSampler::new(&pop);
        let liquid = parcel_liquid_volume(&pop, physics::V0, 56_000.0);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut parcels = Vec::new();
        inject_parcels(&mut parcels, 20_000, &sampler, liquid, 0.05, physics::V0, &mut rng);
        let v_small = volume_from_radius(10.0 * UM);
        let (mut small, mut large) = (0.0f64, 0.0f64);
        for p in &parcels {
            assert_relative_eq!(p.n * p.v, liquid, max_relative = 1e-12);
            assert_eq!(p.u, physics::V0);
            if (p.v - v_small).abs() < 1e-20 {
                small += p.n * p.v;
            } else {
                assert_relative_eq!(p.v, volume_from_radius(30.0 * UM), max_relative = 1e-12);
                large += p.n * p.v;
            }
        }
        let frac = small / (small + large);
        assert!((frac - 0.5).abs() < 0.02, "small-droplet mass fraction {frac}");
    }

    #[test]
    fn smooth_injection_reproduces_the_mass_weighted_radius() {
        let pop = Population::monomodal(physics::INJECTED_MASS_DENSITY);
        let sampler = VolumeSampler::new(&pop);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let k = 40_000;
        let mean_r: f64 =
            (0..k).map(|_| radius_from_volume(sampler.sample_volume(&mut rng))).sum::<f64>()
                / k as f64;
        // mass-weighted mean radius <r^4>/<r^3> of the injected population
        let expect = match &pop {
            Population::Smooth(p) => p.radius_moment(4.0) / p.radius_moment(3.0),
            _ => unreachable!(),
        };
        assert_relative_eq!(mean_r, expect, max_relative = 5e-3);
    }

    fn short_run_config(seed: u64) -> (SprayProblem, Population, DsmcConfig, CellGrid) {
        let problem = SprayProblem {
            gas: GasField::monomodal(),
            drag: DragLaw::default(),
            evap: EvaporationLaw::LinearVolume { ev: physics::EV_MONOMODAL },
            coal: Coalescence::Off,
        };
        let pop = Population::monomodal(physics::INJECTED_MASS_DENSITY);
        let cfg = DsmcConfig {
            dt: 1e-6,
            injection_rate: 30_000.0,
            rng_seed: seed,
            averaging_window: 20_000,
        };
        let grid = CellGrid::with_cells(16, 0.10, 0.13);
        (problem, pop, cfg, grid)
    }

    #[test]
    fn same_seed_reproduces_the_run_bit_for_bit() {
        let (problem, pop, cfg, grid) = short_run_config(97);
        let spec = HistogramSpec::for_radius(40.0 * UM);
        let a = run_to_steady_state(&problem, &pop, &cfg, &grid, &[0.12], &spec).unwrap();
        let b = run_to_steady_state(&problem, &pop, &cfg, &grid, &[0.12], &spec).unwrap();
        assert_eq!(a.profile, b.profile);
        assert_eq!(a.collisions, b.collisions);
        assert_eq!(a.final_parcel_count, b.final_parcel_count);
        assert!(a.steady);
    }

    #[test]
    fn rejects_oversized_time_step_and_cfl_violations() {
        let (problem, pop, mut cfg, grid) = short_run_config(1);
        cfg.dt = 2e-6;
        let spec = HistogramSpec::for_radius(40.0 * UM);
        let err = run_to_steady_state(&problem, &pop, &cfg, &grid, &[], &spec).unwrap_err();
        assert!(err.contains("transport limit"), "{err}");
        // a pathologically fine grid trips the crossing check instead
        let fine = CellGrid::with_cells(40_000, 0.10, 0.13);
        cfg.dt = 1e-6;
        let err = run_to_steady_state(&problem, &pop, &cfg, &fine, &[], &spec).unwrap_err();
        assert!(err.contains("CFL"), "{err}");
    }

    #[test]
    fn ballistic_steady_state_matches_the_analytic_cone_density() {
        // no drag, no evaporation, no collisions: every parcel rides at V0
        // and the steady cell mass density is rho_inj Delta z 3 z0^2 /
        // (z_hi^3 - z_lo^3), the exact cone dilution
        let problem = SprayProblem {
            gas: GasField::monomodal(),
            drag: DragLaw { alpha: 0.0 },
            evap: EvaporationLaw::None,
            coal: Coalescence::Off,
        };
        let pop = Population::monomodal(physics::INJECTED_MASS_DENSITY);
        let cfg = DsmcConfig {
            dt: 1e-6,
            injection_rate: 50_000.0,
            rng_seed: 23,
            averaging_window: 20_000,
        };
        let grid = CellGrid::with_cells(10, 0.10, 0.12);
        let spec = HistogramSpec::for_radius(40.0 * UM);
        let report = run_to_steady_state(&problem, &pop, &cfg, &grid, &[], &spec).unwrap();
        assert!(report.steady);
        let m_inj = physics::INJECTED_MASS_DENSITY;
        let mut worst: f64 = 0.0;
        for j in 0..grid.len() {
            let (zl, zr) = (grid.edges[j], grid.edges[j + 1]);
            let expect = m_inj * (zr - zl) * 3.0 * 0.1f64.powi(2) / (zr.powi(3) - zl.powi(3));
            let rel = (report.profile.mass_density[j] / expect - 1.0).abs();
            worst = worst.max(rel);
        }
        assert!(worst < 0.08, "worst cell density error {worst:.3}");
        // velocities stay at injection speed without drag (the averaged
        // quotient su/s1 carries a few ulps of accumulation noise per sample)
        for &u in &report.profile.mean_velocity {
            assert_relative_eq!(u, physics::V0, max_relative = 1e-8);
        }
    }

    #[test]
    fn halving_the_time_step_stays_inside_the_noise_band() {
        let (problem, pop, mut cfg, grid) = short_run_config(31);
        let spec = HistogramSpec::for_radius(40.0 * UM);
        let coarse = run_to_steady_state(&problem, &pop, &cfg, &grid, &[], &spec).unwrap();
        cfg.dt = 5e-7;
        cfg.averaging_window *= 2;
        let fine = run_to_steady_state(&problem, &pop, &cfg, &grid, &[], &spec).unwrap();
        let total_coarse: f64 = coarse.profile.mass_density.iter().sum();
        let total_fine: f64 = fine.profile.mass_density.iter().sum();
        assert_relative_eq!(total_coarse, total_fine, max_relative = 0.05);
        for j in 0..grid.len() {
            let rel = (coarse.profile.mass_density[j] / fine.profile.mass_density[j] - 1.0).abs();
            assert!(rel < 0.25, "cell {j} moved {rel:.3} under dt halving");
        }
    }

    #[test]
    fn coalescence_widens_the_size_conditioned_velocity_spread() {
        // bimodal injection over a short bimodal-nozzle domain: collision
        // products mix the velocities of 10 um and 30 um droplets, so the
        // velocity spread conditioned on large radius opens up; without
        // collisions every parcel of a given size has the same deterministic
        // history and the spread stays statistically zero
        let pop = Population::bimodal(physics::INJECTED_MASS_DENSITY);
        let cfg = DsmcConfig {
            dt: 1e-6,
            injection_rate: 56_000.0,
            rng_seed: 19,
            averaging_window: 40_000,
        };
        let grid = CellGrid::with_cells(30, 0.05, 0.11);
        let spec = HistogramSpec::for_radius(45.0 * UM);
        let run = |coal: Coalescence| {
            let problem = SprayProblem {
                gas: GasField::bimodal(),
                drag: DragLaw::default(),
                evap: EvaporationLaw::LinearVolume { ev: physics::EV_BIMODAL },
                coal,
            };
            run_to_steady_state(&problem, &pop, &cfg, &grid, &[0.105], &spec).unwrap()
        };
        let with = run(Coalescence::On);
        let without = run(Coalescence::Off);
        assert!(with.collisions.colliding > 100, "coalescing run barely collided");
        let spread = |curve: &StationCurve| {
            // mass-weighted mean spread over occupied large-radius bins
            let (mut acc, mut w) = (0.0, 0.0);
            for b in 0..curve.r.len() {
                if curve.r[b] > 30.0 * UM && curve.mass_per_radius[b] > 0.0 {
                    acc += (curve.u_hi[b] - curve.u_lo[b]) * curve.mass_per_radius[b];
                    w += curve.mass_per_radius[b];
                }
            }
            if w > 0.0 {
                acc / w
            } else {
                0.0
            }
        };
        let s_on = spread(&with.stations[0]);
        let s_off = spread(&without.stations[0]);
        assert!(
            s_on > 3.0 * s_off + 0.01,
            "coalescence spread {s_on:.4} m/s vs transport-only {s_off:.4} m/s"
        );
    }
}
