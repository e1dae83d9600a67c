//! Nozzle case catalog, per-method drivers, shared diagnostics, and
//! cross-method comparison. Everything downstream of the solvers that the
//! command line needs lives here: the ten case definitions with their
//! per-method defaults, the common diagnostic record the three methods are
//! compared on, station snapshots of the size distribution, and the error
//! report against a reference run.

use std::f64::consts::PI;

use crate::dqmom::{
    self, AlphaClosure, DqmomConfig, FluxModel, MomentSetKind, QuadratureState,
};
use crate::lagrangian::{self, CellGrid, DsmcConfig, HistogramSpec};
use crate::multifluid::{
    self, build_sections, SectionConfig, SectionGrid, SectionState, Spacing,
};
use crate::physics::{
    self, Coalescence, DragLaw, EvaporationLaw, GasField, Population, SprayProblem,
};
use crate::quadrature::{moments_from_population, qmom_invert, MomentBasis, PublishedInit};

/// The ten nozzle cases: initial distribution x evaporation law x
/// coalescence switch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CaseId {
    MonoNoevapNocoal,
    MonoNoevapCoal,
    MonoLinNocoal,
    MonoLinCoal,
    MonoNonlinNocoal,
    MonoNonlinCoal,
    BiLinNocoal,
    BiLinCoal,
    BiNonlinNocoal,
    BiNonlinCoal,
}

impl CaseId {
    pub const ALL: [CaseId; 10] = [
        CaseId::MonoNoevapNocoal,
        CaseId::MonoNoevapCoal,
        CaseId::MonoLinNocoal,
        CaseId::MonoLinCoal,
        CaseId::MonoNonlinNocoal,
        CaseId::MonoNonlinCoal,
        CaseId::BiLinNocoal,
        CaseId::BiLinCoal,
        CaseId::BiNonlinNocoal,
        CaseId::BiNonlinCoal,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            CaseId::MonoNoevapNocoal => "mono_noevap_nocoal",
            CaseId::MonoNoevapCoal => "mono_noevap_coal",
            CaseId::MonoLinNocoal => "mono_lin_nocoal",
            CaseId::MonoLinCoal => "mono_lin_coal",
            CaseId::MonoNonlinNocoal => "mono_nonlin_nocoal",
            CaseId::MonoNonlinCoal => "mono_nonlin_coal",
            CaseId::BiLinNocoal => "bi_lin_nocoal",
            CaseId::BiLinCoal => "bi_lin_coal",
            CaseId::BiNonlinNocoal => "bi_nonlin_nocoal",
            CaseId::BiNonlinCoal => "bi_nonlin_coal",
        }
    }

    pub fn parse(s: &str) -> Result<CaseId, String> {
        CaseId::ALL
            .iter()
            .find(|c| c.name() == s)
            .copied()
            .ok_or_else(|| {
                let known: Vec<&str> = CaseId::ALL.iter().map(|c| c.name()).collect();
                format!("unknown case '{}'; known cases: {}", s, known.join(", "))
            })
    }

    pub fn bimodal(&self) -> bool {
        matches!(
            self,
            CaseId::BiLinNocoal | CaseId::BiLinCoal | CaseId::BiNonlinNocoal | CaseId::BiNonlinCoal
        )
    }

    pub fn coalescing(&self) -> bool {
        matches!(
            self,
            CaseId::MonoNoevapCoal
                | CaseId::MonoLinCoal
                | CaseId::MonoNonlinCoal
                | CaseId::BiLinCoal
                | CaseId::BiNonlinCoal
        )
    }

    pub fn problem(&self) -> SprayProblem {
        let gas = if self.bimodal() { GasField::bimodal() } else { GasField::monomodal() };
        let evap = match self {
            CaseId::MonoNoevapNocoal | CaseId::MonoNoevapCoal => EvaporationLaw::None,
            CaseId::MonoLinNocoal | CaseId::MonoLinCoal => {
                EvaporationLaw::LinearVolume { ev: physics::EV_MONOMODAL }
            }
            CaseId::BiLinNocoal | CaseId::BiLinCoal => {
                EvaporationLaw::LinearVolume { ev: physics::EV_BIMODAL }
            }
            CaseId::MonoNonlinNocoal
            | CaseId::MonoNonlinCoal
            | CaseId::BiNonlinNocoal
            | CaseId::BiNonlinCoal => EvaporationLaw::NonlinearSurface { es: physics::ES_NONLINEAR },
        };
        let coal = if self.coalescing() { Coalescence::On } else { Coalescence::Off };
        SprayProblem { gas, drag: DragLaw::default(), evap, coal }
    }

    pub fn population(&self) -> Population {
        if self.bimodal() {
            Population::bimodal(physics::INJECTED_MASS_DENSITY)
        } else {
            Population::monomodal(physics::INJECTED_MASS_DENSITY)
        }
    }

    /// Domain exit, matching the published plot extents.
    pub fn z_end(&self) -> f64 {
        if self.bimodal() {
            0.16
        } else {
            0.30
        }
    }

    /// Default snapshot stations (m).
    pub fn default_stations(&self) -> Vec<f64> {
        if self.bimodal() {
            vec![0.11]
        } else {
            vec![0.16, 0.22]
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Dqmom,
    Multifluid,
    Lagrangian,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Dqmom => "dqmom",
            Method::Multifluid => "multifluid",
            Method::Lagrangian => "lagrangian",
        }
    }

    pub fn parse(s: &str) -> Result<Method, String> {
        match s {
            "dqmom" => Ok(Method::Dqmom),
            "multifluid" => Ok(Method::Multifluid),
            "lagrangian" => Ok(Method::Lagrangian),
            other => Err(format!(
                "unknown method '{}'; known methods: dqmom, multifluid, lagrangian",
                other
            )),
        }
    }
}

/// What to sample: one case, a diagnostic grid, and snapshot stations.
#[derive(Debug, Clone)]
pub struct CaseSpec {
    pub case: CaseId,
    /// diagnostic grid resolution from z0 to z_end inclusive
    pub z_points: usize,
    /// snapshot stations, m
    pub stations: Vec<f64>,
}

impl CaseSpec {
    pub fn new(case: CaseId) -> CaseSpec {
        CaseSpec { case, z_points: 200, stations: case.default_stations() }
    }
}

/// How to start the DQMOM quadrature.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DqmomInit {
    /// Invert moments of the injected population (Dirac populations split
    /// their peaks over the nodes directly).
    FromPopulation,
    /// One of the published starting quadratures (monomodal only).
    Published(PublishedInit),
}

#[derive(Debug, Clone)]
pub struct DqmomSettings {
    pub n: usize,
    pub moment_set: MomentSetKind,
    pub flux_model: FluxModel,
    pub alpha_closure: AlphaClosure,
    pub init: DqmomInit,
    pub rtol: f64,
}

impl DqmomSettings {
    pub fn for_case(case: CaseId) -> DqmomSettings {
        let n = match (case.bimodal(), case.coalescing()) {
            (false, false) => 4,
            (true, false) => 2,
            (_, true) => 6,
        };
        DqmomSettings {
            n,
            moment_set: MomentSetKind::ThirdSizePowers,
            // the stationary-ratio flux needs a smooth population; a handful
            // of peaks evaporates node by node with the flux set to zero
            flux_model: if case.bimodal() { FluxModel::Zero } else { FluxModel::Ratio },
            alpha_closure: AlphaClosure::SizeSquared,
            init: DqmomInit::FromPopulation,
            rtol: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MultifluidSettings {
    pub sections: usize,
    pub r_max: f64,
    pub spacing: Spacing,
    pub rtol: f64,
}

impl MultifluidSettings {
    /// Published section counts per case; coalescing grids extend beyond the
    /// injected sizes so product droplets stay resolved.
    pub fn for_case(case: CaseId) -> MultifluidSettings {
        let um = 1e-6;
        let (sections, r_max, spacing) = match case {
            CaseId::MonoNoevapNocoal => (10, 35.0 * um, Spacing::UniformRadius),
            CaseId::MonoLinNocoal => (10, 35.0 * um, Spacing::UniformRadius),
            CaseId::MonoNonlinNocoal => (12, 35.0 * um, Spacing::Optimal12),
            CaseId::MonoNoevapCoal => (500, 200.0 * um, Spacing::UniformRadius),
            CaseId::MonoLinCoal => (30, 105.0 * um, Spacing::UniformRadius),
            CaseId::MonoNonlinCoal => (15, 70.0 * um, Spacing::UniformRadius),
            CaseId::BiLinNocoal => (30, 35.0 * um, Spacing::UniformRadius),
            CaseId::BiNonlinNocoal => (30, 35.0 * um, Spacing::UniformRadius),
            CaseId::BiLinCoal => (500, 50.0 * um, Spacing::UniformRadius),
            CaseId::BiNonlinCoal => (30, 50.0 * um, Spacing::UniformRadius),
        };
        MultifluidSettings { sections, r_max, spacing, rtol: 1e-7 }
    }
}

#[derive(Debug, Clone)]
pub struct LagrangianSettings {
    pub dt: f64,
    pub injection_rate: f64,
    pub seed: u64,
    pub averaging_window: usize,
    pub cells: usize,
}

impl LagrangianSettings {
    /// Desk-scale defaults: the published injection rates divided by ten,
    /// with the averaging window doubled to compensate. Cases without a
    /// published rate borrow the nearest comparable one.
    pub fn for_case(case: CaseId) -> LagrangianSettings {
        let injection_rate = match case {
            CaseId::MonoLinNocoal => 10_000.0,
            CaseId::MonoNoevapNocoal => 10_000.0,
            CaseId::MonoNonlinNocoal => 100_000.0,
            CaseId::BiNonlinNocoal => 20_000.0,
            CaseId::BiLinNocoal => 20_000.0,
            CaseId::MonoLinCoal => 20_000.0,
            CaseId::BiLinCoal => 56_000.0,
            CaseId::MonoNonlinCoal => 130_000.0,
            CaseId::MonoNoevapCoal => 30_000.0,
            CaseId::BiNonlinCoal => 56_000.0,
        };
        LagrangianSettings {
            dt: 1e-6,
            injection_rate,
            seed: 20_260_815,
            averaging_window: 40_000,
            cells: lagrangian::DEFAULT_CELLS,
        }
    }
}

/// The moments every method is compared on, in display units. A station
/// with no liquid mass reports the velocity and radius as absent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiagnosticRecord {
    pub z_cm: f64,
    pub m0_per_cm3: f64,
    pub m1_mg_per_cm3: f64,
    /// mean droplet velocity minus the local gas velocity
    pub ud_m_per_s: Option<f64>,
    pub r32_um: Option<f64>,
}

/// kg/m^3 and mg/cm^3 are the same number; only m0 and r32 need scaling.
const M0_PER_CM3: f64 = 1e-6;
const UM_PER_M: f64 = 1e6;

pub fn dqmom_diagnostics(z: f64, state: &QuadratureState, gas: &GasField) -> DiagnosticRecord {
    let dil = gas.dilution(z);
    let k0 = state.star_size_moment(0.0);
    let k1 = state.star_size_moment(1.0);
    let k23 = state.star_size_moment(2.0 / 3.0);
    let momentum: f64 = state
        .w_star
        .iter()
        .zip(&state.v)
        .zip(&state.xi)
        .map(|((&w, &v), &xi)| w * v * xi)
        .sum();
    let m1 = physics::RHO_LIQUID * k1 / dil;
    DiagnosticRecord {
        z_cm: z * 100.0,
        m0_per_cm3: k0 / dil * M0_PER_CM3,
        m1_mg_per_cm3: m1,
        ud_m_per_s: (k1 > 0.0).then(|| momentum / k1 - gas.axial_velocity(z)),
        r32_um: (k23 > 0.0).then(|| (3.0 / (4.0 * PI)).cbrt() * k1 / k23 * UM_PER_M),
    }
}

pub fn multifluid_diagnostics(
    z: f64,
    state: &SectionState,
    grid: &SectionGrid,
    gas: &GasField,
) -> DiagnosticRecord {
    let m = multifluid::section_moments(state, grid);
    DiagnosticRecord {
        z_cm: z * 100.0,
        m0_per_cm3: m.number * M0_PER_CM3,
        m1_mg_per_cm3: m.mass,
        ud_m_per_s: (m.mass > 0.0).then(|| m.mean_velocity - gas.axial_velocity(z)),
        r32_um: (m.mass > 0.0).then(|| m.sauter_radius * UM_PER_M),
    }
}

/// Distribution snapshot at one station, in display units (radius in
/// micrometers, mass columns in mg/cm^3; densities are per micrometer).
#[derive(Debug, Clone)]
pub enum SnapshotData {
    /// one quadrature node per row, carrying its full node mass
    Points { r_um: Vec<f64>, mass: Vec<f64>, u: Vec<f64> },
    /// sampled presumed-shape curve with per-sample widths
    Curve { r_um: Vec<f64>, width_um: Vec<f64>, mass_per_radius: Vec<f64>, u: Vec<f64> },
    /// parcel histogram with half-peak conditional-velocity intervals
    Histogram {
        r_um: Vec<f64>,
        width_um: f64,
        mass_per_radius: Vec<f64>,
        u: Vec<f64>,
        p50_lo: Vec<f64>,
        p50_hi: Vec<f64>,
    },
}

#[derive(Debug, Clone)]
pub struct DistributionSnapshot {
    pub z_cm: f64,
    pub data: SnapshotData,
}

impl DistributionSnapshot {
    /// Total liquid mass carried by the snapshot, mg/cm^3; must match the
    /// m1 diagnostic at the same station.
    pub fn total_mass(&self) -> f64 {
        match &self.data {
            SnapshotData::Points { mass, .. } => mass.iter().sum(),
            SnapshotData::Curve { width_um, mass_per_radius, .. } => {
                mass_per_radius.iter().zip(width_um).map(|(&m, &w)| m * w).sum()
            }
            SnapshotData::Histogram { width_um, mass_per_radius, .. } => {
                mass_per_radius.iter().map(|&m| m * width_um).sum()
            }
        }
    }
}

/// One comparison curve: m1 and u_d over z with 95% noise bands (zero for
/// the deterministic methods). Absent u_d values are carried as NaN.
#[derive(Debug, Clone)]
pub struct MethodCurves {
    pub label: String,
    pub z_cm: Vec<f64>,
    pub m1: Vec<f64>,
    pub ud: Vec<f64>,
    pub m1_band: Vec<f64>,
    pub ud_band: Vec<f64>,
}

/// Everything one (case, method) execution produces.
#[derive(Debug, Clone)]
pub struct CaseRun {
    pub case: CaseId,
    pub method: Method,
    pub label: String,
    pub records: Vec<DiagnosticRecord>,
    /// 95% noise band per record on m1 (mg/cm^3); zeros unless Lagrangian
    pub m1_band: Vec<f64>,
    /// 95% noise band per record on u_d (m/s)
    pub ud_band: Vec<f64>,
    pub snapshots: Vec<DistributionSnapshot>,
    pub notes: Vec<String>,
}

impl CaseRun {
    pub fn curves(&self) -> MethodCurves {
        MethodCurves {
            label: self.label.clone(),
            z_cm: self.records.iter().map(|r| r.z_cm).collect(),
            m1: self.records.iter().map(|r| r.m1_mg_per_cm3).collect(),
            ud: self.records.iter().map(|r| r.ud_m_per_s.unwrap_or(f64::NAN)).collect(),
            m1_band: self.m1_band.clone(),
            ud_band: self.ud_band.clone(),
        }
    }
}

/// Diagnostic grid: `z_points` evenly spaced samples from z0 to z_end with
/// the stations spliced in. Returns the grid and the station indices.
fn sample_grid(spec: &CaseSpec, z0: f64, z_end: f64) -> Result<(Vec<f64>, Vec<usize>), String> {
    let n = spec.z_points.max(2);
    let mut zs: Vec<f64> = (0..n).map(|i| z0 + (z_end - z0) * i as f64 / (n - 1) as f64).collect();
    zs[n - 1] = z_end;
    for &s in &spec.stations {
        if s < z0 || s > z_end {
            return Err(format!(
                "station {:.4} m outside the domain [{:.4}, {:.4}] m",
                s, z0, z_end
            ));
        }
        zs.push(s);
    }
    zs.sort_by(f64::total_cmp);
    zs.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
    let idx = spec
        .stations
        .iter()
        .map(|&s| zs.partition_point(|&z| z < s - 1e-12))
        .collect();
    Ok((zs, idx))
}

/// Starting quadrature for a case population.
pub fn initial_quadrature(
    pop: &Population,
    n: usize,
    u0: f64,
    init: DqmomInit,
) -> Result<QuadratureState, String> {
    match init {
        DqmomInit::Published(p) => {
            let nodes = crate::quadrature::published_initial_nodes(p, pop.mass_density());
            if nodes.len() != n {
                return Err(format!(
                    "published quadrature carries {} nodes, settings ask for {}",
                    nodes.len(),
                    n
                ));
            }
            Ok(QuadratureState::from_volume_nodes(&nodes, u0))
        }
        DqmomInit::FromPopulation => match pop {
            Population::Smooth(_) => {
                let moments = moments_from_population(pop, MomentBasis::Volume, 2 * n);
                let nodes = qmom_invert(&moments, n).map_err(|e| e.to_string())?;
                Ok(QuadratureState::from_volume_nodes(&nodes, u0))
            }
            Population::Peaks(peaks) => {
                if n % peaks.len() != 0 {
                    return Err(format!(
                        "peak population needs a node count divisible by {}, got {}",
                        peaks.len(),
                        n
                    ));
                }
                Ok(QuadratureState::from_peaks_split(peaks, n / peaks.len(), u0, 5e-3))
            }
        },
    }
}

pub fn run_dqmom(spec: &CaseSpec, s: &DqmomSettings) -> Result<CaseRun, String> {
    let problem = spec.case.problem();
    let pop = spec.case.population();
    let gas = problem.gas;
    let z_end = spec.case.z_end();
    let (zs, station_idx) = sample_grid(spec, gas.z0, z_end)?;

    let init = initial_quadrature(&pop, s.n, gas.v0, s.init)?;
    let cfg = DqmomConfig {
        problem,
        flux_model: s.flux_model,
        alpha_closure: s.alpha_closure,
    };
    let run = dqmom::integrate_nozzle(&init, &cfg, s.moment_set, z_end, &zs[1..], s.rtol)
        .map_err(|e| e.to_string())?;

    let mut records = vec![dqmom_diagnostics(zs[0], &init, &gas)];
    for (&z, state) in zs[1..].iter().zip(&run.states) {
        records.push(dqmom_diagnostics(z, state, &gas));
    }
    let snapshots = station_idx
        .iter()
        .map(|&i| {
            let state = if i == 0 { &init } else { &run.states[i - 1] };
            dqmom_snapshot(zs[i], state, &gas)
        })
        .collect();
    let nrec = records.len();
    let mut notes: Vec<String> = run
        .removals
        .iter()
        .map(|r| {
            format!(
                "node removed at z = {:.4} m (radius {:.3} um, scaled weight {:.3e})",
                r.z,
                physics::radius_from_volume(r.v) * UM_PER_M,
                r.w_star
            )
        })
        .collect();
    notes.push(format!("integrator steps: {}", run.stats.n_steps));
    Ok(CaseRun {
        case: spec.case,
        method: Method::Dqmom,
        label: format!("dqmom_n{}", s.n),
        records,
        m1_band: vec![0.0; nrec],
        ud_band: vec![0.0; nrec],
        snapshots,
        notes,
    })
}

fn dqmom_snapshot(z: f64, state: &QuadratureState, gas: &GasField) -> DistributionSnapshot {
    let dil = gas.dilution(z);
    DistributionSnapshot {
        z_cm: z * 100.0,
        data: SnapshotData::Points {
            r_um: state.v.iter().map(|&v| physics::radius_from_volume(v) * UM_PER_M).collect(),
            mass: state
                .w_star
                .iter()
                .zip(&state.v)
                .map(|(&w, &v)| physics::RHO_LIQUID * w * v / dil)
                .collect(),
            u: state.xi.clone(),
        },
    }
}

pub fn run_multifluid(spec: &CaseSpec, s: &MultifluidSettings) -> Result<CaseRun, String> {
    let problem = spec.case.problem();
    let pop = spec.case.population();
    let gas = problem.gas;
    let z_end = spec.case.z_end();
    let (zs, station_idx) = sample_grid(spec, gas.z0, z_end)?;

    let grid = build_sections(s.sections, s.r_max, s.spacing).map_err(|e| e.to_string())?;
    let init = multifluid::initial_sections(&pop, &grid, gas.v0);
    let cfg = SectionConfig::new(problem, grid);
    let run = multifluid::integrate_sections(&init, &cfg, z_end, &zs[1..], s.rtol)
        .map_err(|e| e.to_string())?;

    let mut records = vec![multifluid_diagnostics(zs[0], &init, &cfg.grid, &gas)];
    for (&z, state) in zs[1..].iter().zip(&run.states) {
        records.push(multifluid_diagnostics(z, state, &cfg.grid, &gas));
    }
    let snapshots = station_idx
        .iter()
        .map(|&i| {
            let state = if i == 0 { &init } else { &run.states[i - 1] };
            multifluid_snapshot(zs[i], state, &cfg.grid)
        })
        .collect();
    let nrec = records.len();
    Ok(CaseRun {
        case: spec.case,
        method: Method::Multifluid,
        label: format!("multifluid_n{}", s.sections),
        records,
        m1_band: vec![0.0; nrec],
        ud_band: vec![0.0; nrec],
        snapshots,
        notes: vec![format!("integrator steps: {}", run.stats.n_steps)],
    })
}

const CURVE_SAMPLES_PER_SECTION: usize = 8;

fn multifluid_snapshot(z: f64, state: &SectionState, grid: &SectionGrid) -> DistributionSnapshot {
    let curve = multifluid::reconstruct_ndf(state, grid, CURVE_SAMPLES_PER_SECTION);
    let width_um: Vec<f64> = (0..grid.len())
        .flat_map(|j| {
            let w =
                (grid.bounds_r[j + 1] - grid.bounds_r[j]) / CURVE_SAMPLES_PER_SECTION as f64;
            std::iter::repeat(w * UM_PER_M).take(CURVE_SAMPLES_PER_SECTION)
        })
        .collect();
    DistributionSnapshot {
        z_cm: z * 100.0,
        data: SnapshotData::Curve {
            r_um: curve.r.iter().map(|&r| r * UM_PER_M).collect(),
            width_um,
            // kg/m^3 per meter of radius -> mg/cm^3 per micrometer
            mass_per_radius: curve.mass_per_radius.iter().map(|&m| m / UM_PER_M).collect(),
            u: curve.velocity,
        },
    }
}

pub fn run_lagrangian(spec: &CaseSpec, s: &LagrangianSettings) -> Result<CaseRun, String> {
    let problem = spec.case.problem();
    let pop = spec.case.population();
    let gas = problem.gas;
    let grid = CellGrid::with_cells(s.cells, gas.z0, spec.case.z_end());
    let hist = HistogramSpec::for_radius(MultifluidSettings::for_case(spec.case).r_max);
    let cfg = DsmcConfig {
        dt: s.dt,
        injection_rate: s.injection_rate,
        rng_seed: s.seed,
        averaging_window: s.averaging_window,
    };
    let report = lagrangian::run_to_steady_state(&problem, &pop, &cfg, &grid, &spec.stations, &hist)?;

    let profile = &report.profile;
    let mut records = Vec::with_capacity(profile.z.len());
    let mut m1_band = Vec::with_capacity(profile.z.len());
    let mut ud_band = Vec::with_capacity(profile.z.len());
    for (j, &z) in profile.z.iter().enumerate() {
        let m1 = profile.mass_density[j];
        records.push(DiagnosticRecord {
            z_cm: z * 100.0,
            m0_per_cm3: profile.number_density[j] * M0_PER_CM3,
            m1_mg_per_cm3: m1,
            ud_m_per_s: (m1 > 0.0).then(|| profile.mean_velocity[j] - gas.axial_velocity(z)),
            r32_um: (m1 > 0.0).then(|| profile.sauter_radius[j] * UM_PER_M),
        });
        m1_band.push(2.0 * profile.mass_se[j]);
        ud_band.push(2.0 * profile.velocity_se[j]);
    }

    let snapshots = report
        .stations
        .iter()
        .map(|c| DistributionSnapshot {
            z_cm: c.station_z * 100.0,
            data: SnapshotData::Histogram {
                r_um: c.r.iter().map(|&r| r * UM_PER_M).collect(),
                width_um: if c.r.len() >= 2 { (c.r[1] - c.r[0]) * UM_PER_M } else { 0.0 },
                mass_per_radius: c.mass_per_radius.iter().map(|&m| m / UM_PER_M).collect(),
                u: c.mean_u.clone(),
                p50_lo: c.u_lo.clone(),
                p50_hi: c.u_hi.clone(),
            },
        })
        .collect();

    let mut notes = Vec::new();
    if !report.steady {
        notes.push(format!(
            "parcel throughput did not balance within {} probation blocks",
            report.blocks_waited
        ));
    }
    if report.low_parcel_warning {
        notes.push(format!(
            "thinnest cell averaged {:.1} parcels; statistics there are unreliable",
            report.min_parcels_per_cell
        ));
    }
    if report.collisions.pairs > 0 {
        let frac = report.collisions.overdrawn as f64 / report.collisions.pairs as f64;
        notes.push(format!(
            "collision pairs: {}, colliding: {}, overdrawn fraction: {:.2e}",
            report.collisions.pairs, report.collisions.colliding, frac
        ));
    }
    notes.push(format!(
        "steps: {}, final parcels: {}",
        report.steps_run, report.final_parcel_count
    ));
    Ok(CaseRun {
        case: spec.case,
        method: Method::Lagrangian,
        label: "lagrangian".into(),
        records,
        m1_band,
        ud_band,
        snapshots,
        notes,
    })
}

/// Run a case with the method's per-case default settings.
pub fn run_case(spec: &CaseSpec, method: Method) -> Result<CaseRun, String> {
    match method {
        Method::Dqmom => run_dqmom(spec, &DqmomSettings::for_case(spec.case)),
        Method::Multifluid => run_multifluid(spec, &MultifluidSettings::for_case(spec.case)),
        Method::Lagrangian => run_lagrangian(spec, &LagrangianSettings::for_case(spec.case)),
    }
}

/// DQMOM node-count sweep with otherwise-default settings.
pub fn dqmom_sweep(spec: &CaseSpec, ns: &[usize]) -> Result<Vec<CaseRun>, String> {
    ns.iter()
        .map(|&n| {
            let mut s = DqmomSettings::for_case(spec.case);
            s.n = n;
            run_dqmom(spec, &s)
        })
        .collect()
}

/// Per-quantity error norms over the points that survived noise gating.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorSummary {
    pub max_rel: f64,
    pub mean_rel: f64,
    /// length-weighted |candidate - reference| over |reference|
    pub integrated_rel: f64,
    pub points_used: usize,
    pub points_noise_limited: usize,
}

#[derive(Debug, Clone)]
pub struct CandidateErrors {
    pub label: String,
    pub resampled: bool,
    /// signed relative errors; None where the reference carries no signal
    pub rel_err_m1: Vec<Option<f64>>,
    pub rel_err_ud: Vec<Option<f64>>,
    pub m1: ErrorSummary,
    pub ud: ErrorSummary,
}

#[derive(Debug, Clone)]
pub struct ComparisonReport {
    pub reference: String,
    pub z_cm: Vec<f64>,
    /// reference 95% band relative to the reference m1
    pub noise_rel_m1: Vec<f64>,
    /// reference 95% band on u_d, m/s
    pub noise_band_ud: Vec<f64>,
    pub candidates: Vec<CandidateErrors>,
}

/// Linear interpolation onto `xt`; NaN outside the source range or across
/// NaN source values.
fn interp(xs: &[f64], ys: &[f64], xt: &[f64]) -> Vec<f64> {
    let tiny = 1e-9 * (xs.last().copied().unwrap_or(1.0) - xs.first().copied().unwrap_or(0.0));
    xt.iter()
        .map(|&x| {
            if xs.len() < 2 || x < xs[0] - tiny || x > xs[xs.len() - 1] + tiny {
                return f64::NAN;
            }
            let i = xs.partition_point(|&v| v <= x).clamp(1, xs.len() - 1);
            let t = (x - xs[i - 1]) / (xs[i] - xs[i - 1]);
            ys[i - 1] + t * (ys[i] - ys[i - 1])
        })
        .collect()
}

/// Pointwise relative errors of each candidate against the reference, with
/// the reference noise band gating which points count toward the norms.
/// Candidates on a different z grid are resampled by linear interpolation
/// and flagged. m1 errors are skipped where the reference mass is below
/// 1e-6 of its peak (post-evaporation zeros); u_d errors where |u_d| of the
/// reference is below 5% of its peak (the difference starts at zero).
pub fn compare(reference: &MethodCurves, candidates: &[&MethodCurves]) -> ComparisonReport {
    let zr = &reference.z_cm;
    let npts = zr.len();
    let m1_peak = reference.m1.iter().fold(0.0f64, |a, &b| a.max(b));
    let ud_peak =
        reference.ud.iter().filter(|u| u.is_finite()).fold(0.0f64, |a, &b| a.max(b.abs()));

    // trapezoid-style weights for the integrated norm
    let weight = |i: usize| -> f64 {
        let lo = if i == 0 { zr[0] } else { zr[i - 1] };
        let hi = if i + 1 == npts { zr[npts - 1] } else { zr[i + 1] };
        0.5 * (hi - lo)
    };

    let noise_rel_m1: Vec<f64> = (0..npts)
        .map(|i| {
            if reference.m1[i] > 0.0 {
                reference.m1_band[i] / reference.m1[i]
            } else {
                f64::INFINITY
            }
        })
        .collect();
    let noise_band_ud = reference.ud_band.clone();

    let candidates = candidates
        .iter()
        .map(|cand| {
            let resampled = cand.z_cm != *zr;
            let (m1c, udc) = if resampled {
                (interp(&cand.z_cm, &cand.m1, zr), interp(&cand.z_cm, &cand.ud, zr))
            } else {
                (cand.m1.clone(), cand.ud.clone())
            };

            let mut rel_err_m1 = Vec::with_capacity(npts);
            let mut rel_err_ud = Vec::with_capacity(npts);
            for i in 0..npts {
                let m1r = reference.m1[i];
                rel_err_m1.push(
                    (m1r > 1e-6 * m1_peak && m1c[i].is_finite())
                        .then(|| (m1c[i] - m1r) / m1r),
                );
                let udr = reference.ud[i];
                rel_err_ud.push(
                    (udr.is_finite() && udr.abs() > 0.05 * ud_peak && udc[i].is_finite())
                        .then(|| (udc[i] - udr) / udr.abs()),
                );
            }

            let summarize = |errs: &[Option<f64>], noise_rel: &dyn Fn(usize) -> f64| {
                let (mut maxe, mut sume, mut used, mut gated) = (0.0f64, 0.0f64, 0usize, 0usize);
                let (mut int_num, mut int_den) = (0.0f64, 0.0f64);
                for (i, e) in errs.iter().enumerate() {
                    let Some(e) = *e else { continue };
                    int_num += e.abs() * weight(i);
                    int_den += weight(i);
                    // a zero band means a deterministic reference, not an
                    // infinitely tight one
                    let noise = noise_rel(i);
                    if noise > 0.0 && e.abs() <= noise {
                        gated += 1;
                        continue;
                    }
                    maxe = maxe.max(e.abs());
                    sume += e.abs();
                    used += 1;
                }
                ErrorSummary {
                    max_rel: maxe,
                    mean_rel: if used > 0 { sume / used as f64 } else { 0.0 },
                    integrated_rel: if int_den > 0.0 { int_num / int_den } else { 0.0 },
                    points_used: used,
                    points_noise_limited: gated,
                }
            };

            let m1_summary = summarize(&rel_err_m1, &|i| noise_rel_m1[i]);
            let ud_summary = summarize(&rel_err_ud, &|i| {
                let udr = reference.ud[i];
                if udr.is_finite() && udr != 0.0 {
                    noise_band_ud[i] / udr.abs()
                } else {
                    f64::INFINITY
                }
            });

            CandidateErrors {
                label: cand.label.clone(),
                resampled,
                rel_err_m1,
                rel_err_ud,
                m1: m1_summary,
                ud: ud_summary,
            }
        })
        .collect();

    ComparisonReport {
        reference: reference.label.clone(),
        z_cm: zr.clone(),
        noise_rel_m1,
        noise_band_ud,
        candidates,
    }
}

/// z locations of the `count` largest downward steps in a sampled curve.
/// Drops are measured relative to the value they start from, so a step that
/// wipes out most of what remains registers the same whether it comes first
/// or last. Adjacent drop intervals above a tenth of the steepest relative
/// drop merge into one step (a single discontinuity can straddle a sample
/// point), located at the drop-weighted midpoint.
pub fn step_locations(z: &[f64], values: &[f64], count: usize) -> Vec<f64> {
    assert_eq!(z.len(), values.len());
    if values.len() < 2 {
        return Vec::new();
    }
    let drops: Vec<f64> = values
        .windows(2)
        .map(|w| if w[0] > 0.0 { (w[0] - w[1]).max(0.0) / w[0] } else { 0.0 })
        .collect();
    let dmax = drops.iter().fold(0.0f64, |a, &b| a.max(b));
    if dmax <= 0.0 {
        return Vec::new();
    }
    let thresh = 0.1 * dmax;
    let mut clusters: Vec<(f64, f64)> = Vec::new();
    let mut i = 0;
    while i < drops.len() {
        if drops[i] <= thresh {
            i += 1;
            continue;
        }
        let (mut w, mut zw) = (0.0, 0.0);
        while i < drops.len() && drops[i] > thresh {
            w += drops[i];
            zw += drops[i] * 0.5 * (z[i] + z[i + 1]);
            i += 1;
        }
        clusters.push((w, zw / w));
    }
    clusters.sort_by(|a, b| b.0.total_cmp(&a.0));
    clusters.truncate(count);
    let mut zs: Vec<f64> = clusters.into_iter().map(|(_, zc)| zc).collect();
    zs.sort_by(f64::total_cmp);
    zs
}

fn fmt(x: f64) -> String {
    format!("{:.8e}", x)
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(fmt).unwrap_or_default()
}

pub const DIAGNOSTICS_HEADER: &str = "z_cm,m0_per_cm3,m1_mg_per_cm3,ud_m_per_s,r32_um";

pub fn diagnostics_csv(records: &[DiagnosticRecord]) -> String {
    let mut out = String::from(DIAGNOSTICS_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            fmt(r.z_cm),
            fmt(r.m0_per_cm3),
            fmt(r.m1_mg_per_cm3),
            fmt_opt(r.ud_m_per_s),
            fmt_opt(r.r32_um),
        ));
    }
    out
}

pub const SNAPSHOT_HEADER: &str = "r_um,mass_density,uz_m_per_s";
pub const SNAPSHOT_HEADER_BANDS: &str = "r_um,mass_density,uz_m_per_s,p50_lo,p50_hi";

pub fn snapshot_csv(snap: &DistributionSnapshot) -> String {
    let mut out = String::new();
    match &snap.data {
        SnapshotData::Points { r_um, mass, u } => {
            out.push_str(SNAPSHOT_HEADER);
            out.push('\n');
            for i in 0..r_um.len() {
                out.push_str(&format!("{},{},{}\n", fmt(r_um[i]), fmt(mass[i]), fmt(u[i])));
            }
        }
        SnapshotData::Curve { r_um, mass_per_radius, u, .. } => {
            out.push_str(SNAPSHOT_HEADER);
            out.push('\n');
            for i in 0..r_um.len() {
                out.push_str(&format!(
                    "{},{},{}\n",
                    fmt(r_um[i]),
                    fmt(mass_per_radius[i]),
                    fmt(u[i])
                ));
            }
        }
        SnapshotData::Histogram { r_um, mass_per_radius, u, p50_lo, p50_hi, .. } => {
            out.push_str(SNAPSHOT_HEADER_BANDS);
            out.push('\n');
            for i in 0..r_um.len() {
                out.push_str(&format!(
                    "{},{},{},{},{}\n",
                    fmt(r_um[i]),
                    fmt(mass_per_radius[i]),
                    fmt(u[i]),
                    fmt(p50_lo[i]),
                    fmt(p50_hi[i])
                ));
            }
        }
    }
    out
}

pub fn comparison_csv(report: &ComparisonReport) -> String {
    let mut header = String::from("z_cm,m1_noise_rel,ud_noise_band");
    for c in &report.candidates {
        header.push_str(&format!(",m1_rel_err_{},ud_rel_err_{}", c.label, c.label));
    }
    let mut out = header;
    out.push('\n');
    for i in 0..report.z_cm.len() {
        out.push_str(&format!(
            "{},{},{}",
            fmt(report.z_cm[i]),
            fmt(report.noise_rel_m1[i]),
            fmt(report.noise_band_ud[i])
        ));
        for c in &report.candidates {
            out.push_str(&format!(
                ",{},{}",
                fmt_opt(c.rel_err_m1[i]),
                fmt_opt(c.rel_err_ud[i])
            ));
        }
        out.push('\n');
    }
    out
}

pub const SUMMARY_HEADER: &str =
    "candidate,quantity,max_rel_err,mean_rel_err,integrated_rel_err,points_used,points_noise_limited,resampled";

pub fn summary_csv(report: &ComparisonReport) -> String {
    let mut out = String::from(SUMMARY_HEADER);
    out.push('\n');
    for c in &report.candidates {
        for (q, s) in [("m1", &c.m1), ("ud", &c.ud)] {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                c.label,
                q,
                fmt(s.max_rel),
                fmt(s.mean_rel),
                fmt(s.integrated_rel),
                s.points_used,
                s.points_noise_limited,
                c.resampled
            ));
        }
    }
    out
}
