//! Sectional multi-fluid solver: droplet volume space is cut into sections,
//! each carrying one mass density m_j and one axial velocity u_j. Inside a
//! section the size distribution keeps a presumed shape kappa_j, normalized
//! to unit mass, which makes every exchange coefficient (evaporation fluxes,
//! mean drag volume, collision integrals) a pure geometry quantity that can
//! be tabulated once per grid and reused for the whole march down the nozzle.

use std::f64::consts::PI;
use std::sync::OnceLock;

use crate::integrator::{self, IntegrationStats, Method, OdeError, OdeOptions};
use crate::physics::{
    beta_kernel, radius_from_volume, volume_from_radius, Coalescence, DragLaw, EvaporationLaw,
    Population, SprayProblem, RHO_LIQUID,
};

/// Section boundary layout in radius.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Spacing {
    /// Equal radius width r_max / N.
    UniformRadius,
    /// First boundary at `r_first`, then a constant ratio up to r_max.
    Geometric { r_first: f64 },
    /// Twelve sections biased toward small radii: eight uniform on
    /// [0, r_max/2], four uniform on [r_max/2, r_max].
    Optimal12,
}

#[derive(Debug, Clone, thiserror::Error, PartialEq)]
pub enum GridError {
    #[error("a section grid needs at least one section")]
    NoSections,
    #[error("nonpositive maximum radius {0:e}")]
    BadRadius(f64),
    #[error("geometric spacing needs 0 < r_first < r_max, got {0:e}")]
    BadFirstBoundary(f64),
    #[error("the refined twelve-section layout is defined for N = 12, got {0}")]
    LayoutNeedsTwelve(usize),
    #[error("radius boundaries must start at 0 and increase strictly")]
    UnsortedBounds,
}

/// Presumed in-section shape, stored with its mass normalization baked in.
/// Both variants are number densities per unit radius; working in the radius
/// variable keeps the flat shape polynomial and avoids the v^(-2/3) weight a
/// volume-variable quadrature would see at the origin.
#[derive(Debug, Clone, Copy)]
enum Kappa {
    /// n(r) = c on the section.
    FlatRadius { c: f64 },
    /// n(s) = a exp(-theta (s - s_lo)) per unit surface, i.e.
    /// n(r) = 8 pi r a exp(-theta (s(r) - s_lo)); used for the top section so
    /// the distribution decays toward the upper size boundary.
    ExpSurface { a: f64, theta: f64, s_lo: f64 },
}

/// Size sections with their presumed shapes. Boundaries are stored both in
/// radius and volume; bounds_v[0] = 0 and the top boundary is finite (the
/// coalescence tables treat the last section as a catch-all so that product
/// droplets beyond r_max still conserve mass and momentum).
#[derive(Debug, Clone)]
pub struct SectionGrid {
    pub bounds_r: Vec<f64>,
    pub bounds_v: Vec<f64>,
    kappa: Vec<Kappa>,
}

pub fn build_sections(n: usize, r_max: f64, spacing: Spacing) -> Result<SectionGrid, GridError> {
    if n == 0 {
        return Err(GridError::NoSections);
    }
    if !(r_max > 0.0) {
        return Err(GridError::BadRadius(r_max));
    }
    let bounds_r: Vec<f64> = match spacing {
        Spacing::UniformRadius => (0..=n).map(|j| r_max * j as f64 / n as f64).collect(),
        Spacing::Geometric { r_first } => {
            if !(r_first > 0.0 && r_first < r_max) {
                return Err(GridError::BadFirstBoundary(r_first));
            }
            if n == 1 {
                vec![0.0, r_max]
            } else {
                let ratio = (r_max / r_first).powf(1.0 / (n - 1) as f64);
                let mut b: Vec<f64> =
                    std::iter::once(0.0).chain((0..n).map(|j| r_first * ratio.powi(j as i32))).collect();
                b[n] = r_max;
                b
            }
        }
        Spacing::Optimal12 => {
            if n != 12 {
                return Err(GridError::LayoutNeedsTwelve(n));
            }
            let half = 0.5 * r_max;
            (0..8)
                .map(|j| half * j as f64 / 8.0)
                .chain((0..=4).map(|j| half + half * j as f64 / 4.0))
                .collect()
        }
    };
    SectionGrid::from_radius_bounds(&bounds_r)
}

impl SectionGrid {
    /// Build a grid from explicit radius boundaries (first must be 0).
    /// Sections below the top use the flat-in-radius shape; the top section
    /// uses the exponential-in-surface shape with the decay rate chosen so
    /// its number-mean radius sits at the section midpoint. A single-section
    /// grid has no interior boundary to damp toward and stays flat.
    pub fn from_radius_bounds(bounds_r: &[f64]) -> Result<SectionGrid, GridError> {
        if bounds_r.len() < 2 {
            return Err(GridError::NoSections);
        }
        if bounds_r[0] != 0.0 || bounds_r.windows(2).any(|w| w[0] >= w[1]) {
            return Err(GridError::UnsortedBounds);
        }
        let n = bounds_r.len() - 1;
        let kappa = (0..n)
            .map(|j| {
                let (ra, rb) = (bounds_r[j], bounds_r[j + 1]);
                if j + 1 == n && n >= 2 {
                    Kappa::exp_surface(ra, rb)
                } else {
                    Kappa::FlatRadius { c: 3.0 / (RHO_LIQUID * PI * (rb.powi(4) - ra.powi(4))) }
                }
            })
            .collect();
        Ok(SectionGrid {
            bounds_r: bounds_r.to_vec(),
            bounds_v: bounds_r.iter().map(|&r| volume_from_radius(r)).collect(),
            kappa,
        })
    }

    pub fn len(&self) -> usize {
        self.kappa.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kappa.is_empty()
    }

    /// Containing section for a radius; sections are half-open [r_lo, r_hi)
    /// with the last one closed above, and radii beyond the grid fall into
    /// the last section (same catch-all convention as the collision tables).
    pub fn section_of_radius(&self, r: f64) -> usize {
        debug_assert!(r >= 0.0);
        let n = self.len();
        self.bounds_r[1..n].partition_point(|&b| b <= r).min(n - 1)
    }

    /// Normalized number density per unit radius of section j at r, such
    /// that int rho v(r) shape dr = 1 over the section. Zero outside.
    pub fn number_density_shape(&self, j: usize, r: f64) -> f64 {
        if r < self.bounds_r[j] || r > self.bounds_r[j + 1] {
            return 0.0;
        }
        match self.kappa[j] {
            Kappa::FlatRadius { c } => c,
            Kappa::ExpSurface { a, theta, s_lo } => {
                a * 8.0 * PI * r * (-theta * (4.0 * PI * r * r - s_lo)).exp()
            }
        }
    }

    /// int f(r) shape_j(r) dr over section j; composite Gauss, accurate to
    /// machine precision for the smooth shapes used here.
    fn section_integral(&self, j: usize, f: impl Fn(f64) -> f64) -> f64 {
        let (nodes, weights) = gauss16();
        let (ra, rb) = (self.bounds_r[j], self.bounds_r[j + 1]);
        let panels = 8;
        let h = (rb - ra) / panels as f64;
        let mut total = 0.0;
        for p in 0..panels {
            let lo = ra + p as f64 * h;
            let mut acc = 0.0;
            for (x, w) in nodes.iter().zip(weights) {
                let r = lo + 0.5 * h * (x + 1.0);
                acc += w * f(r) * self.number_density_shape(j, r);
            }
            total += 0.5 * h * acc;
        }
        total
    }

    /// Volume moment of the section shape, int v^p kappa_j dv. p = 1 gives
    /// 1/rho by the mass normalization.
    pub fn kappa_moment(&self, j: usize, p: f64) -> f64 {
        self.section_integral(j, |r| volume_from_radius(r).powf(p))
    }
}

impl Kappa {
    /// Exponential-in-surface shape on [ra, rb]: pick the decay rate theta
    /// so the number-mean radius equals the midpoint, then normalize to unit
    /// mass. The mean is (2/3)(rb^3-ra^3)/(rb^2-ra^2) > midpoint at theta = 0
    /// and tends to ra as theta grows, so a positive root always exists and
    /// bisection cannot fail.
    fn exp_surface(ra: f64, rb: f64) -> Kappa {
        let s_lo = 4.0 * PI * ra * ra;
        let s_hi = 4.0 * PI * rb * rb;
        let target = 0.5 * (ra + rb);
        let mean_radius = |theta: f64| {
            let (nodes, weights) = gauss16();
            let panels = 8;
            let h = (rb - ra) / panels as f64;
            let (mut num, mut den) = (0.0, 0.0);
            for p in 0..panels {
                let lo = ra + p as f64 * h;
                for (x, w) in nodes.iter().zip(weights) {
                    let r = lo + 0.5 * h * (x + 1.0);
                    let psi = 8.0 * PI * r * (-theta * (4.0 * PI * r * r - s_lo)).exp();
                    num += w * r * psi;
                    den += w * psi;
                }
            }
            num / den
        };
        let mut lo = 0.0;
        let mut hi = 1.0 / (s_hi - s_lo);
        let mut guard = 0;
        while mean_radius(hi) > target {
            hi *= 2.0;
            guard += 1;
            assert!(guard < 200, "exp-tail decay rate bracket failed to close");
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break; // interval below representable resolution
            }
            if mean_radius(mid) > target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let theta = 0.5 * (lo + hi);
        // unit-mass normalization, int rho v(r) a psi(r) dr = 1
        let (nodes, weights) = gauss16();
        let panels = 8;
        let h = (rb - ra) / panels as f64;
        let mut mass = 0.0;
        for p in 0..panels {
            let plo = ra + p as f64 * h;
            for (x, w) in nodes.iter().zip(weights) {
                let r = plo + 0.5 * h * (x + 1.0);
                let psi = 8.0 * PI * r * (-theta * (4.0 * PI * r * r - s_lo)).exp();
                mass += 0.5 * h * w * RHO_LIQUID * volume_from_radius(r) * psi;
            }
        }
        Kappa::ExpSurface { a: 1.0 / mass, theta, s_lo }
    }
}

fn gauss16() -> (&'static [f64], &'static [f64]) {
    static TABLE: OnceLock<(Vec<f64>, Vec<f64>)> = OnceLock::new();
    let (x, w) = TABLE.get_or_init(|| crate::quadrature::gauss_legendre(16));
    (x, w)
}

/// Per-section exchange coefficients that do not depend on z: evaporation
/// boundary flux e1 (out through the lower size boundary, into the section
/// below), in-section vapor loss e2, mean drag volume v_u and the drag
/// relaxation rate evaluated there.
#[derive(Debug, Clone)]
pub struct EvapDragTables {
    pub e1: Vec<f64>,
    pub e2: Vec<f64>,
    pub v_u: Vec<f64>,
    pub rate_u: Vec<f64>,
}

pub fn precompute_evap_drag(
    grid: &SectionGrid,
    evap: &EvaporationLaw,
    drag: &DragLaw,
) -> EvapDragTables {
    let n = grid.len();
    let mut e1 = Vec::with_capacity(n);
    let mut e2 = Vec::with_capacity(n);
    let mut v_u = Vec::with_capacity(n);
    let mut rate_u = Vec::with_capacity(n);
    for j in 0..n {
        let r_lo = grid.bounds_r[j];
        // e1 = -rho v R_v(v) kappa(v) at the lower boundary; kappa in the
        // volume variable is shape(r)/(4 pi r^2). The first section's lower
        // boundary is v = 0 where v R_v kappa vanishes for both laws.
        let flux = if j == 0 {
            0.0
        } else {
            let v_lo = grid.bounds_v[j];
            -RHO_LIQUID * v_lo * evap.volume_rate(v_lo) * grid.number_density_shape(j, r_lo)
                / (4.0 * PI * r_lo * r_lo)
        };
        e1.push(flux);
        e2.push(-grid.section_integral(j, |r| {
            RHO_LIQUID * evap.volume_rate(volume_from_radius(r))
        }));
        // v_u = [int v kappa dv / int v^(1/3) kappa dv]^(3/2), the volume at
        // which a single droplet feels the section's mass-mean drag
        let vu = (grid.kappa_moment(j, 1.0) / grid.kappa_moment(j, 1.0 / 3.0)).powf(1.5);
        debug_assert!(vu >= grid.bounds_v[j] && vu <= grid.bounds_v[j + 1]);
        v_u.push(vu);
        rate_u.push(drag.relaxation_rate(vu));
    }
    debug_assert!(e1.iter().chain(&e2).all(|&e| e >= 0.0));
    EvapDragTables { e1, e2, v_u, rate_u }
}

/// One polygon of the pairwise collision domain, landing product droplets in
/// a receiving section: partners are sections `from_hi` > `from_lo`, and the
/// piece contributes mass m_hi m_lo |u_hi - u_lo| (q_hi + q_lo) with momentum
/// split q_hi against u_hi and q_lo against u_lo (pairwise momentum is
/// conserved exactly, so each partner's share arrives at its own velocity).
#[derive(Debug, Clone, Copy)]
pub struct GainPiece {
    pub from_hi: usize,
    pub from_lo: usize,
    pub q_hi: f64,
    pub q_lo: f64,
}

/// Collision geometry tables, independent of z and of the state.
#[derive(Debug, Clone)]
pub struct CoalescenceTables {
    /// loss[j][k]: rate coefficient for section-j mass removed by collisions
    /// with section k, int int rho v beta kappa_j(v) kappa_k(v*) over the
    /// full section rectangle. The velocity factor |u_j - u_k| multiplies at
    /// runtime, so the diagonal never contributes.
    pub loss: Vec<Vec<f64>>,
    /// gains[j]: pieces whose product volume v + v* lands in section j. The
    /// last section's band extends to infinity so that every product lands
    /// somewhere and the tables conserve mass by construction.
    pub gains: Vec<Vec<GainPiece>>,
}

pub fn precompute_coalescence(grid: &SectionGrid) -> CoalescenceTables {
    let n = grid.len();
    let (nodes, weights) = gauss16();

    let mut loss = vec![vec![0.0; n]; n];
    for j in 0..n {
        for k in j..n {
            let (w_j, w_k) = rect_mass_integrals(grid, j, k, nodes, weights);
            loss[j][k] = w_j;
            loss[k][j] = w_k;
        }
    }

    let mut gains: Vec<Vec<GainPiece>> = vec![Vec::new(); n];
    for k in 1..n {
        for l in 0..k {
            let lo_prod = grid.bounds_v[k] + grid.bounds_v[l];
            let hi_prod = grid.bounds_v[k + 1] + grid.bounds_v[l + 1];
            // first section whose band reaches above the smallest product
            let start = grid.bounds_v[1..n].partition_point(|&b| b <= lo_prod);
            for jr in start..n {
                if grid.bounds_v[jr] >= hi_prod {
                    break;
                }
                let w_lo = grid.bounds_v[jr];
                let w_hi = if jr + 1 == n { f64::INFINITY } else { grid.bounds_v[jr + 1] };
                let (q_hi, q_lo) = strip_piece(grid, k, l, w_lo, w_hi, nodes, weights);
                if q_hi + q_lo > 0.0 {
                    gains[jr].push(GainPiece { from_hi: k, from_lo: l, q_hi, q_lo });
                }
            }
        }
    }
    debug_assert!(gains[0].is_empty());
    CoalescenceTables { loss, gains }
}

/// (v1-weighted, v2-weighted) collision integrals of sections (j, k) over
/// their full rectangle; the v2-weighted value is loss[k][j] by symmetry,
/// which fills both triangles of the table in one pass.
fn rect_mass_integrals(
    grid: &SectionGrid,
    j: usize,
    k: usize,
    nodes: &[f64],
    weights: &[f64],
) -> (f64, f64) {
    let (ra1, rb1) = (grid.bounds_r[j], grid.bounds_r[j + 1]);
    let (ra2, rb2) = (grid.bounds_r[k], grid.bounds_r[k + 1]);
    let (h1, h2) = (0.5 * (rb1 - ra1), 0.5 * (rb2 - ra2));
    let (mut acc1, mut acc2) = (0.0, 0.0);
    for (x1, w1) in nodes.iter().zip(weights) {
        let r1 = ra1 + h1 * (x1 + 1.0);
        let v1 = volume_from_radius(r1);
        let n1 = grid.number_density_shape(j, r1);
        for (x2, w2) in nodes.iter().zip(weights) {
            let r2 = ra2 + h2 * (x2 + 1.0);
            let v2 = volume_from_radius(r2);
            let common =
                w1 * w2 * RHO_LIQUID * beta_kernel(v1, v2) * n1 * grid.number_density_shape(k, r2);
            acc1 += common * v1;
            acc2 += common * v2;
        }
    }
    (acc1 * h1 * h2, acc2 * h1 * h2)
}

/// Collision integrals over the part of rectangle (hi = k, lo = l) whose
/// product volume falls in the band [w_lo, w_hi]. Outer variable is the lo
/// partner's size; the inner volume limits max(a, w_lo - v2), min(b, w_hi - v2)
/// switch expression (or pinch shut) at four candidate v2 values, so the
/// outer range is cut there and each smooth slab gets its own Gauss rule.
fn strip_piece(
    grid: &SectionGrid,
    k: usize,
    l: usize,
    w_lo: f64,
    w_hi: f64,
    nodes: &[f64],
    weights: &[f64],
) -> (f64, f64) {
    let (a, b) = (grid.bounds_v[k], grid.bounds_v[k + 1]);
    let (c, d) = (grid.bounds_v[l], grid.bounds_v[l + 1]);
    let mut cuts = vec![c, d];
    for t in [w_lo - a, w_hi - b, w_hi - a, w_lo - b] {
        if t.is_finite() && t > c && t < d {
            cuts.push(t);
        }
    }
    cuts.sort_by(f64::total_cmp);
    let (mut q_hi, mut q_lo) = (0.0, 0.0);
    for pair in cuts.windows(2) {
        let (ca, cb) = (pair[0], pair[1]);
        if cb - ca <= 0.0 {
            continue;
        }
        let mid = 0.5 * (ca + cb);
        if (w_hi - mid).min(b) <= (w_lo - mid).max(a) {
            continue; // slab outside the band
        }
        let r_out_lo = radius_from_volume(ca);
        let r_out_hi = radius_from_volume(cb);
        let h_out = 0.5 * (r_out_hi - r_out_lo);
        for (x2, w2) in nodes.iter().zip(weights) {
            let r2 = r_out_lo + h_out * (x2 + 1.0);
            let v2 = volume_from_radius(r2);
            let lo_v = (w_lo - v2).max(a);
            let hi_v = (w_hi - v2).min(b);
            if hi_v <= lo_v {
                continue; // rounding at a slab edge
            }
            let r_in_lo = radius_from_volume(lo_v);
            let r_in_hi = radius_from_volume(hi_v);
            let h_in = 0.5 * (r_in_hi - r_in_lo);
            let n2 = grid.number_density_shape(l, r2);
            for (x1, w1) in nodes.iter().zip(weights) {
                let r1 = r_in_lo + h_in * (x1 + 1.0);
                let v1 = volume_from_radius(r1);
                let rsum = r1 + r2;
                // geometric cross-section pi (r1 + r2)^2: beta_kernel in the
                // radius variables
                let common = w1 * w2 * h_in * h_out
                    * RHO_LIQUID
                    * PI
                    * rsum
                    * rsum
                    * grid.number_density_shape(k, r1)
                    * n2;
                q_hi += common * v1;
                q_lo += common * v2;
            }
        }
    }
    (q_hi, q_lo)
}

/// Mass fluxes below this fraction of the largest one are integrator dust:
/// fully drained sections keep wandering at the absolute-tolerance scale
/// (about 1e-12 of the initial maximum, and larger relative to the current
/// maximum once dilution has shrunk the whole state), where even the
/// momentum flux crosses zero freely. The quotients m = g^2/h and u = h/g are
/// regularized at this scale rather than gated: a hard on/off classification
/// makes the right-hand side discontinuous exactly where the evaporation
/// cascade refills a drained section, and the implicit corrector then
/// converges onto the discontinuity and stalls the step size into underflow.
const DUST_FLUX_FRACTION: f64 = 1e-10;

fn dust_flux_scale(y: &[f64]) -> f64 {
    DUST_FLUX_FRACTION * y.iter().step_by(2).fold(0.0f64, |m, &g| m.max(g.abs()))
}

/// Smooth recovery of (m, u) from one flux pair. eps_g is the dust scale of
/// the mass flux; the velocity scale v0 converts it to the momentum flux.
/// For a live section (g, h far above the dust scale) both formulas agree
/// with the exact quotients to within double-precision roundoff; for dust
/// they roll off to zero instead of dividing noise by noise, and exact zero
/// fluxes map to exact zeros.
fn regularized_m_u(g: f64, h: f64, eps_g: f64, v0: f64) -> (f64, f64) {
    if g == 0.0 && h == 0.0 {
        return (0.0, 0.0);
    }
    let eps_h = v0 * eps_g;
    (g * g * h / (h * h + eps_h * eps_h), g * h / (g * g + eps_g * eps_g))
}

/// Mass density and axial velocity per section.
#[derive(Debug, Clone)]
pub struct SectionState {
    pub m: Vec<f64>,
    pub u: Vec<f64>,
}

impl SectionState {
    fn to_fluxes(&self) -> Vec<f64> {
        self.m
            .iter()
            .zip(&self.u)
            .flat_map(|(&m, &u)| [m * u, m * u * u])
            .collect()
    }

    /// Recover (m, u) from the flux pair (m u, m u^2); sections whose mass
    /// flux is at the dust scale report m = 0, u = 0.
    fn from_fluxes(y: &[f64]) -> SectionState {
        let eps_g = dust_flux_scale(y);
        let (mut m, mut u) = (Vec::new(), Vec::new());
        for pair in y.chunks_exact(2) {
            let (g, h) = (pair[0], pair[1]);
            if g > 2.0 * eps_g && h > 0.0 {
                m.push(g * g / h);
                u.push(h / g);
            } else {
                m.push(0.0);
                u.push(0.0);
            }
        }
        SectionState { m, u }
    }

    pub fn total_mass(&self) -> f64 {
        self.m.iter().sum()
    }
}

/// One nozzle configuration with all tables precomputed for its grid.
#[derive(Debug, Clone)]
pub struct SectionConfig {
    pub problem: SprayProblem,
    pub grid: SectionGrid,
    pub evap: EvapDragTables,
    pub coal: Option<CoalescenceTables>,
}

impl SectionConfig {
    pub fn new(problem: SprayProblem, grid: SectionGrid) -> SectionConfig {
        let evap = precompute_evap_drag(&grid, &problem.evap, &problem.drag);
        let coal = match problem.coal {
            Coalescence::On => Some(precompute_coalescence(&grid)),
            Coalescence::Off => None,
        };
        SectionConfig { problem, grid, evap, coal }
    }
}

/// Project an injected population onto the grid: smooth densities by direct
/// mass quadrature per section, Dirac peaks into their containing sections.
/// Every section starts at the injection velocity.
pub fn initial_sections(pop: &Population, grid: &SectionGrid, u0: f64) -> SectionState {
    assert!(u0 > 0.0);
    let n = grid.len();
    let mut m = vec![0.0; n];
    match pop {
        Population::Smooth(p) => {
            let (nodes, weights) = gauss16();
            for (j, mj) in m.iter_mut().enumerate() {
                let (ra, rb) = (grid.bounds_r[j], grid.bounds_r[j + 1]);
                let panels = 16;
                let h = (rb - ra) / panels as f64;
                for q in 0..panels {
                    let lo = ra + q as f64 * h;
                    for (x, w) in nodes.iter().zip(weights) {
                        let r = lo + 0.5 * h * (x + 1.0);
                        *mj += 0.5 * h * w * RHO_LIQUID * volume_from_radius(r) * p.density(r);
                    }
                }
            }
        }
        Population::Peaks(peaks) => {
            for &(number, r) in peaks {
                m[grid.section_of_radius(r)] += number * RHO_LIQUID * volume_from_radius(r);
            }
        }
    }
    SectionState { m, u: vec![u0; n] }
}

/// d/dz of the interleaved fluxes y = [m_1 u_1, m_1 u_1^2, m_2 u_2, ...]:
/// evaporation cascade, drag at the section's mean volume, collision losses
/// and gains, and the -2y/z geometric dilution of the conical flow. The
/// (m, u) recovery is regularized at the dust scale, so drained sections
/// contribute only dust-sized sources; a section with real mass flux but
/// nonpositive momentum flux is a genuinely broken state and aborts the
/// step.
pub fn multifluid_rhs(z: f64, y: &[f64], cfg: &SectionConfig, out: &mut [f64]) -> Result<(), String> {
    let n = cfg.grid.len();
    debug_assert_eq!(y.len(), 2 * n);
    let gas_u = cfg.problem.gas.axial_velocity(z);

    let eps_g = dust_flux_scale(y);
    let mut m = vec![0.0; n];
    let mut u = vec![0.0; n];
    for j in 0..n {
        let (g, h) = (y[2 * j], y[2 * j + 1]);
        if g > 2.0 * eps_g && h <= 0.0 {
            return Err(format!(
                "section {}: nonpositive axial velocity (mass flux {:e}, momentum flux {:e})",
                j + 1,
                g,
                h
            ));
        }
        let (mj, uj) = regularized_m_u(g, h, eps_g, cfg.problem.gas.v0);
        m[j] = mj;
        u[j] = uj;
    }

    let (e1, e2) = (&cfg.evap.e1, &cfg.evap.e2);
    for j in 0..n {
        let drain = (e1[j] + e2[j]) * m[j];
        let mut s_m = -drain;
        let mut s_h = -drain * u[j] + m[j] * cfg.evap.rate_u[j] * (gas_u - u[j]);
        if j + 1 < n {
            let inflow = e1[j + 1] * m[j + 1];
            s_m += inflow;
            s_h += inflow * u[j + 1];
        }
        out[2 * j] = s_m;
        out[2 * j + 1] = s_h;
    }

    if let Some(tables) = &cfg.coal {
        let eff = cfg.problem.coal.efficiency();
        if eff > 0.0 {
            for j in 0..n {
                if m[j] == 0.0 {
                    continue;
                }
                let mut rate = 0.0;
                for k in 0..n {
                    if k != j && m[k] > 0.0 {
                        rate += m[k] * (u[j] - u[k]).abs() * tables.loss[j][k];
                    }
                }
                let lost = eff * m[j] * rate;
                out[2 * j] -= lost;
                out[2 * j + 1] -= lost * u[j];
            }
            for (jr, pieces) in tables.gains.iter().enumerate() {
                for piece in pieces {
                    let (mh, ml) = (m[piece.from_hi], m[piece.from_lo]);
                    if mh == 0.0 || ml == 0.0 {
                        continue;
                    }
                    let (uh, ul) = (u[piece.from_hi], u[piece.from_lo]);
                    let w = eff * mh * ml * (uh - ul).abs();
                    out[2 * jr] += w * (piece.q_hi + piece.q_lo);
                    out[2 * jr + 1] += w * (uh * piece.q_hi + ul * piece.q_lo);
                }
            }
        }
    }

    for (i, o) in out.iter_mut().enumerate() {
        *o -= 2.0 * y[i] / z;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct SectionRun {
    pub z_grid: Vec<f64>,
    pub states: Vec<SectionState>,
    pub final_state: SectionState,
    pub stats: IntegrationStats,
}

/// Tolerance policy: absolute tolerances follow each component's initial
/// magnitude, with a floor tied to the largest initial flux so that sections
/// that start empty (and fill by coalescence or the cascade) stay
/// error-controlled without chasing roundoff.
fn section_opts(y0: &[f64], rtol: f64) -> OdeOptions {
    let ymax = y0.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
    assert!(ymax > 0.0, "initial state carries no mass");
    let atol = y0.iter().map(|&v| (1e-2 * rtol * v.abs()).max(1e-12 * ymax)).collect();
    OdeOptions { rtol, atol, method: Method::Bdf, max_step: f64::INFINITY, first_step: None }
}

/// March the section fluxes from the nozzle exit to z_end, sampling at
/// z_grid (ascending, within (z0, z_end]).
pub fn integrate_sections(
    init: &SectionState,
    cfg: &SectionConfig,
    z_end: f64,
    z_grid: &[f64],
    rtol: f64,
) -> Result<SectionRun, OdeError> {
    let z0 = cfg.problem.gas.z0;
    assert!(z_end > z0);
    debug_assert!(z_grid.windows(2).all(|w| w[0] <= w[1]));
    let y0 = init.to_fluxes();
    let opts = section_opts(&y0, rtol);
    let mut rhs = |zz: f64, yy: &[f64], dd: &mut [f64]| multifluid_rhs(zz, yy, cfg, dd);
    let res = integrator::integrate(&mut rhs, (z0, z_end), &y0, &opts, z_grid, None)?;
    Ok(SectionRun {
        z_grid: z_grid.to_vec(),
        states: res.y_samples.iter().map(|y| SectionState::from_fluxes(y)).collect(),
        final_state: SectionState::from_fluxes(&res.y_final),
        stats: res.stats,
    })
}

/// Integral diagnostics of a section state.
#[derive(Debug, Clone, Copy)]
pub struct SectionMoments {
    /// droplet number density, 1/m^3
    pub number: f64,
    /// liquid mass density, kg/m^3
    pub mass: f64,
    /// mass-weighted mean axial velocity, m/s
    pub mean_velocity: f64,
    /// Sauter mean radius, m
    pub sauter_radius: f64,
}

pub fn section_moments(state: &SectionState, grid: &SectionGrid) -> SectionMoments {
    let n = grid.len();
    let (mut number, mut mass, mut momentum, mut m1, mut m23) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for j in 0..n {
        if state.m[j] == 0.0 {
            continue;
        }
        number += state.m[j] * grid.kappa_moment(j, 0.0);
        mass += state.m[j];
        momentum += state.m[j] * state.u[j];
        m1 += state.m[j] * grid.kappa_moment(j, 1.0);
        m23 += state.m[j] * grid.kappa_moment(j, 2.0 / 3.0);
    }
    SectionMoments {
        number,
        mass,
        mean_velocity: if mass > 0.0 { momentum / mass } else { 0.0 },
        sauter_radius: if m23 > 0.0 { (3.0 / (4.0 * PI)).powf(1.0 / 3.0) * m1 / m23 } else { 0.0 },
    }
}

/// Piecewise reconstruction n(v) = m_j kappa_j(v), sampled per section and
/// expressed per unit radius, with the section velocity as a step function.
#[derive(Debug, Clone)]
pub struct NdfCurve {
    pub r: Vec<f64>,
    pub number_per_radius: Vec<f64>,
    pub mass_per_radius: Vec<f64>,
    pub velocity: Vec<f64>,
}

pub fn reconstruct_ndf(state: &SectionState, grid: &SectionGrid, per_section: usize) -> NdfCurve {
    assert!(per_section >= 1);
    let mut curve = NdfCurve {
        r: Vec::new(),
        number_per_radius: Vec::new(),
        mass_per_radius: Vec::new(),
        velocity: Vec::new(),
    };
    for j in 0..grid.len() {
        let (ra, rb) = (grid.bounds_r[j], grid.bounds_r[j + 1]);
        for q in 0..per_section {
            // subinterval midpoints: sampling never lands on a boundary where
            // two sections would both claim the point
            let r = ra + (rb - ra) * (q as f64 + 0.5) / per_section as f64;
            let dens = state.m[j] * grid.number_density_shape(j, r);
            curve.r.push(r);
            curve.number_per_radius.push(dens);
            curve.mass_per_radius.push(RHO_LIQUID * volume_from_radius(r) * dens);
            curve.velocity.push(state.u[j]);
        }
    }
    curve
}
