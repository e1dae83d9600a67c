//! Quadrature-based moment solver for the self-similar nozzle spray.
//!
//! The droplet population is carried by N quadrature nodes, each holding a
//! scaled weight w*_n = w_n (z/z0)^2, a volume abscissa v_n and an axial
//! velocity xi_n. Transport moves the conserved per-node fluxes
//! (w* xi, w* v xi, w* v xi^2) downstream; the physics enters as sources:
//!
//!   - coalescence: a linear system forces the per-node sources to
//!     reproduce the exact collision rate of 3N chosen moments;
//!   - evaporation: stationary-ratio constraints on consecutive abscissas,
//!     solved in closed form by a bidiagonal recursion, plus a moment
//!     closure for the number flux psi of droplets vanishing at zero size;
//!   - drag and the smooth part of evaporation are added in closed form.
//!
//! Everything here works on the starred weights; physical densities are
//! recovered by dividing by the geometric dilution (z/z0)^2.

use nalgebra::{DMatrix, DVector};

use crate::integrator::{self, IntegrationStats, Method, OdeError, OdeOptions, RhsResult};
use crate::linsolve::{self, Solution, SolveError};
use crate::physics::{
    collision_frequency, volume_from_radius, Coalescence, DragLaw, EvaporationLaw, GasField,
    SprayProblem,
};
use crate::quadrature::{MomentBasis, QuadratureNodes};

/// x^k with the common exponents short-circuited so that k = 0 rows carry
/// exact ones and k = 1 rows carry x itself.
fn powk(x: f64, k: f64) -> f64 {
    if k == 0.0 {
        1.0
    } else if k == 1.0 {
        x
    } else {
        x.powf(k)
    }
}

/// x^e for small integer velocity exponents.
fn vel_pow(x: f64, e: u32) -> f64 {
    match e {
        0 => 1.0,
        1 => x,
        _ => x.powi(e as i32),
    }
}

/// Moment exponent pairs (k, m): size power k (thirds of integers) and
/// velocity power m in {0, 1}. 3N pairs close the reduced system: the 2N
/// velocity-free rows determine the number and volume sources, and the N
/// velocity rows then determine the momentum sources.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentSet {
    pairs: Vec<(f64, u32)>,
}

/// Which size powers the N velocity-weighted rows use. Both choices keep
/// the velocity-free block identical and decouple the momentum solve; the
/// results they produce are nearly identical, so the pick is a matter of
/// taste.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MomentSetKind {
    /// Velocity rows at integer size powers k = 1..N.
    IntegerSizePowers,
    /// Velocity rows at k = (2i-1)/3, on the same thirds grid as the
    /// velocity-free rows.
    ThirdSizePowers,
}

impl MomentSetKind {
    pub fn build(self, n: usize) -> MomentSet {
        let mut pairs = Vec::with_capacity(3 * n);
        for i in 1..=(2 * n) {
            pairs.push(((i as f64 - 1.0) / 3.0, 0));
        }
        for i in 1..=n {
            let k = match self {
                MomentSetKind::IntegerSizePowers => i as f64,
                MomentSetKind::ThirdSizePowers => (2.0 * i as f64 - 1.0) / 3.0,
            };
            pairs.push((k, 1));
        }
        MomentSet { pairs }
    }
}

impl MomentSet {
    pub fn pairs(&self) -> &[(f64, u32)] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// N-node quadrature of the droplet distribution at one station.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureState {
    /// scaled weights w_n (z/z0)^2, 1/m^3
    pub w_star: Vec<f64>,
    /// volume abscissas, m^3
    pub v: Vec<f64>,
    /// axial velocities, m/s
    pub xi: Vec<f64>,
}

impl QuadratureState {
    /// Build a state sorted by ascending volume.
    pub fn new(w_star: Vec<f64>, v: Vec<f64>, xi: Vec<f64>) -> QuadratureState {
        assert_eq!(w_star.len(), v.len());
        assert_eq!(w_star.len(), xi.len());
        let mut order: Vec<usize> = (0..v.len()).collect();
        order.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
        QuadratureState {
            w_star: order.iter().map(|&i| w_star[i]).collect(),
            v: order.iter().map(|&i| v[i]).collect(),
            xi: order.iter().map(|&i| xi[i]).collect(),
        }
    }

    /// Inject a size quadrature at the nozzle entrance (where w* = w), all
    /// nodes moving at the common velocity `xi`.
    pub fn from_volume_nodes(nodes: &QuadratureNodes, xi: f64) -> QuadratureState {
        let nodes = match nodes.basis {
            MomentBasis::Volume => nodes.clone(),
            MomentBasis::Radius => nodes.to_volume_basis(),
        };
        let n = nodes.len();
        QuadratureState::new(nodes.weights.clone(), nodes.abscissas.clone(), vec![xi; n])
    }

    /// Spread each Dirac peak (number density, radius) over `copies` nodes,
    /// fanned out to +-`spread` in relative volume with weights compensated
    /// so every copy carries an equal share of the peak's mass. The spread
    /// must be wide enough for the moment matrix: two twin pairs at 1e-6
    /// separation already compound to a condition number near 1e19, while a
    /// fraction of a percent is invisible in every observable. 5e-3 is a
    /// good default.
    pub fn from_peaks_split(
        peaks: &[(f64, f64)],
        copies: usize,
        xi: f64,
        spread: f64,
    ) -> QuadratureState {
        assert!(copies >= 1);
        let mut w = Vec::new();
        let mut v = Vec::new();
        for &(number, radius) in peaks {
            let volume = volume_from_radius(radius);
            let mass_share = number * volume / copies as f64;
            for t in 0..copies {
                let factor = if copies == 1 {
                    1.0
                } else {
                    1.0 + (2.0 * t as f64 / (copies as f64 - 1.0) - 1.0) * spread
                };
                v.push(volume * factor);
                w.push(mass_share / (volume * factor));
            }
        }
        let n = w.len();
        QuadratureState::new(w, v, vec![xi; n])
    }

    pub fn len(&self) -> usize {
        self.w_star.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w_star.is_empty()
    }

    /// Starred size moment sum_n w*_n v_n^k.
    pub fn star_size_moment(&self, k: f64) -> f64 {
        self.w_star
            .iter()
            .zip(&self.v)
            .map(|(&w, &v)| w * powk(v, k))
            .sum()
    }

    /// Pack the conserved per-node fluxes, node-major:
    /// [w* xi, w* v xi, w* v xi^2] per node.
    pub fn to_fluxes(&self) -> Vec<f64> {
        let mut y = Vec::with_capacity(3 * self.len());
        for i in 0..self.len() {
            let f1 = self.w_star[i] * self.xi[i];
            y.push(f1);
            y.push(f1 * self.v[i]);
            y.push(f1 * self.v[i] * self.xi[i]);
        }
        y
    }

    /// Recover the state from packed fluxes. Fails on nonfinite input and
    /// on nonpositive velocity or volume: the reduction assumes downstream
    /// flow, so flow reversal aborts the integration rather than silently
    /// producing a meaningless state.
    pub fn from_fluxes(y: &[f64]) -> Result<QuadratureState, String> {
        assert_eq!(y.len() % 3, 0);
        let n = y.len() / 3;
        let mut w_star = Vec::with_capacity(n);
        let mut v = Vec::with_capacity(n);
        let mut xi = Vec::with_capacity(n);
        for i in 0..n {
            let (f1, f2, f3) = (y[3 * i], y[3 * i + 1], y[3 * i + 2]);
            if !(f1.is_finite() && f2.is_finite() && f3.is_finite()) {
                return Err(format!("node {i}: nonfinite flux"));
            }
            let xi_i = f3 / f2;
            let v_i = f2 / f1;
            let w_i = f1 / xi_i;
            if !(xi_i > 0.0) {
                return Err(format!("node {i}: nonpositive axial velocity {xi_i:e}"));
            }
            if !(v_i > 0.0) {
                return Err(format!("node {i}: nonpositive volume {v_i:e}"));
            }
            if !(w_i >= 0.0) {
                return Err(format!("node {i}: negative weight {w_i:e}"));
            }
            w_star.push(w_i);
            v.push(v_i);
            xi.push(xi_i);
        }
        Ok(QuadratureState { w_star, v, xi })
    }
}

/// Per-node source triplet plus the evaporative number flux.
#[derive(Debug, Clone)]
pub struct SourceTerms {
    /// number source, 1/(m^3 s)
    pub a: Vec<f64>,
    /// constrained part of the volume source (coalescence + flux model)
    pub b_star: Vec<f64>,
    /// full volume source b = b* + w* R_v
    pub b: Vec<f64>,
    /// constrained part of the axial momentum source
    pub c_star: Vec<f64>,
    /// full momentum source including smooth evaporation and drag
    pub c: Vec<f64>,
    /// number flux of droplets vanishing at zero size, >= 0
    pub psi: f64,
}

/// How the number flux of totally evaporated droplets is modelled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FluxModel {
    /// Stationary-ratio constraints with a moment closure for psi. The
    /// physical choice for smooth populations.
    Ratio,
    /// psi forced to zero; the number density then drops discontinuously
    /// whenever an abscissa reaches zero size. Preferred for populations
    /// that start as a handful of peaks.
    Zero,
}

/// Moment used to close the proportionality constant in a_n = alpha w*_n.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AlphaClosure {
    /// Second size moment, velocity-free. The default: with nonnegative
    /// pair couplings it keeps alpha nonpositive, hence psi nonnegative.
    SizeSquared,
    /// Second size moment weighted by axial velocity.
    SizeSquaredVelocity,
    /// Zeroth size moment weighted by velocity, referenced to the gas
    /// velocity; degenerates to alpha = 0 when all nodes move with the gas.
    VelocityWeighted,
}

/// Full solver configuration for one nozzle case.
#[derive(Debug, Clone)]
pub struct DqmomConfig {
    pub problem: SprayProblem,
    pub flux_model: FluxModel,
    pub alpha_closure: AlphaClosure,
}

#[derive(Debug, thiserror::Error)]
pub enum SourceError {
    #[error("volume abscissas {i} and {j} coincide at {v:.6e} m^3; perturb the state first")]
    CoincidentAbscissas { i: usize, j: usize, v: f64 },
    #[error("coalescence moment system: {0}")]
    Solve(#[from] SolveError),
}

/// Exact rate of change of moment (k, m) under pairwise coalescence, for
/// every pair in the moment set. Merging nodes n and q creates volume
/// v_n + v_q moving at the mass-weighted mean velocity; the (z0/z)^2
/// factor appears because the collision rate is quadratic in the physical
/// weights while the state carries starred ones.
pub fn coalescence_rhs(
    state: &QuadratureState,
    mset: &MomentSet,
    z: f64,
    gas: &GasField,
    coal: Coalescence,
) -> Vec<f64> {
    let n = state.len();
    let geometric = 1.0 / gas.dilution(z);
    mset.pairs()
        .iter()
        .map(|&(k, m)| {
            let mut acc = 0.0;
            // each unordered pair once: the 1/2 in front of the full double
            // sum cancels against symmetry, and self-pairs have no slip.
            for i in 0..n {
                for j in (i + 1)..n {
                    let freq = collision_frequency(
                        coal,
                        state.xi[i] - state.xi[j],
                        state.v[i],
                        state.v[j],
                    );
                    if freq == 0.0 {
                        continue;
                    }
                    let vs = state.v[i] + state.v[j];
                    let mean_xi = (state.v[i] * state.xi[i] + state.v[j] * state.xi[j]) / vs;
                    let bracket = powk(vs, k) * vel_pow(mean_xi, m)
                        - powk(state.v[i], k) * vel_pow(state.xi[i], m)
                        - powk(state.v[j], k) * vel_pow(state.xi[j], m);
                    acc += state.w_star[i] * state.w_star[j] * freq * bracket;
                }
            }
            geometric * acc
        })
        .collect()
}

/// Scaled coalescence moment system. Row (k, m) is divided by v_s^k u_s^m
/// and the unknowns are substituted as a = w_s^2 a~, b* = w_s^2 v_s b~,
/// c* = w_s^2 v_s u_s c~, which turns every matrix entry into an O(1)
/// combination of v_n/v_s and xi_n/u_s regardless of how far the abscissas
/// have grown.
#[derive(Debug, Clone)]
pub struct LinearSystem {
    pub matrix: DMatrix<f64>,
    pub rhs: DVector<f64>,
    pub v_scale: f64,
    pub u_scale: f64,
    pub w_scale: f64,
}

/// Assemble the scaled system for a physical right-hand side (one entry per
/// moment pair). Columns are [a_1..a_N, b*_1..b*_N, c*_1..c*_N].
pub fn assemble_coalescence_system(
    state: &QuadratureState,
    mset: &MomentSet,
    rhs_physical: &[f64],
) -> Result<LinearSystem, SourceError> {
    let n = state.len();
    assert_eq!(mset.len(), 3 * n);
    assert_eq!(rhs_physical.len(), 3 * n);
    let v_scale = state.v.iter().fold(0.0f64, |m, &v| m.max(v));
    let u_scale = state.xi.iter().fold(0.0f64, |m, &x| m.max(x.abs()));
    let w_scale: f64 = state.w_star.iter().sum();
    assert!(v_scale > 0.0 && u_scale > 0.0 && w_scale > 0.0);
    // Exactly duplicated abscissas make the size block a degenerate
    // Vandermonde system; no amount of refinement recovers from that.
    for i in 0..n {
        for j in (i + 1)..n {
            if (state.v[i] - state.v[j]).abs() <= 1e-14 * v_scale {
                return Err(SourceError::CoincidentAbscissas { i, j, v: state.v[i] });
            }
        }
    }
    let mut matrix = DMatrix::zeros(3 * n, 3 * n);
    let mut rhs = DVector::zeros(3 * n);
    for (row, &(k, m)) in mset.pairs().iter().enumerate() {
        for nd in 0..n {
            let vt = state.v[nd] / v_scale;
            let xt = state.xi[nd] / u_scale;
            let xm = vel_pow(xt, m);
            matrix[(row, nd)] = (1.0 - k) * powk(vt, k) * xm;
            let bcoef = k - m as f64;
            matrix[(row, n + nd)] = if bcoef == 0.0 {
                0.0
            } else {
                bcoef * powk(vt, k - 1.0) * xm
            };
            matrix[(row, 2 * n + nd)] = if m == 0 {
                0.0
            } else {
                m as f64 * powk(vt, k - 1.0) * vel_pow(xt, m - 1)
            };
        }
        rhs[row] = rhs_physical[row] / (w_scale * w_scale * powk(v_scale, k) * vel_pow(u_scale, m));
    }
    Ok(LinearSystem { matrix, rhs, v_scale, u_scale, w_scale })
}

/// Coalescence contribution to the per-node sources, in physical units.
#[derive(Debug, Clone)]
pub struct CoalescenceSources {
    pub a: Vec<f64>,
    pub b_star: Vec<f64>,
    pub c_star: Vec<f64>,
    pub rel_residual: f64,
}

/// Solve the scaled system with iterative refinement (at most three passes,
/// scaled residual within 1e-12 of the right-hand side) and undo the
/// scaling.
///
/// The size rows never involve c*, so the system is block triangular and is
/// solved the way the structure suggests: the 2N x 2N size block gives
/// (a, b*), then the velocity block reduces to an N x N Vandermonde-type
/// solve for c* with the (a, b*) coupling moved to the right-hand side.
/// Solving the blocks separately also keeps each block's conditioning
/// independent of the other's row scales.
///
/// Two situations defeat LU plus refinement even though the moment rates
/// themselves are fine: nodes drifting close together make a block
/// numerically rank deficient (refinement diverges once cond * eps exceeds
/// one), and right-hand sides with heavy internal cancellation leave the
/// residual stuck at the rounding floor eps * |A||x| / |b| relative to b.
/// Both get a truncated-SVD fallback, accepted only when the compensated
/// residual is at rounding level for the gauge |b| + |A||x|. In the rank
/// deficient case the node-level split of the sources is genuinely not
/// unique; the minimum-norm representative reproduces every resolvable
/// moment, which is all the transported quantities ever see.
pub fn solve_with_refinement(sys: &LinearSystem) -> Result<CoalescenceSources, SolveError> {
    const TOL: f64 = 1e-12;
    let n = sys.matrix.nrows() / 3;
    #[cfg(debug_assertions)]
    for row in 0..2 * n {
        for col in 2 * n..3 * n {
            debug_assert_eq!(sys.matrix[(row, col)], 0.0, "size rows must not touch c*");
        }
    }
    let solve_block = |a: DMatrix<f64>, b: DVector<f64>| -> Result<Solution, SolveError> {
        match linsolve::solve_refined(&a, &b, 3, TOL) {
            Ok(sol) => Ok(sol),
            Err(err) => svd_minimum_norm(&a, &b, TOL).ok_or(err),
        }
    };

    let ab = solve_block(
        sys.matrix.view((0, 0), (2 * n, 2 * n)).into_owned(),
        sys.rhs.rows(0, 2 * n).into_owned(),
    )?;
    let coupling = sys.matrix.view((2 * n, 0), (n, 2 * n));
    let c_rhs = sys.rhs.rows(2 * n, n) - coupling * &ab.x;
    let c = solve_block(sys.matrix.view((2 * n, 2 * n), (n, n)).into_owned(), c_rhs)?;

    let ws2 = sys.w_scale * sys.w_scale;
    let a: Vec<f64> = (0..n).map(|i| ab.x[i] * ws2).collect();
    let b_star: Vec<f64> = (0..n).map(|i| ab.x[n + i] * ws2 * sys.v_scale).collect();
    let c_star: Vec<f64> = (0..n)
        .map(|i| c.x[i] * ws2 * sys.v_scale * sys.u_scale)
        .collect();
    Ok(CoalescenceSources {
        a,
        b_star,
        c_star,
        rel_residual: ab.rel_residual.max(c.rel_residual),
    })
}

fn svd_minimum_norm(a: &DMatrix<f64>, b: &DVector<f64>, tol: f64) -> Option<Solution> {
    let svd = a.clone().svd(true, true);
    let sigma_max = svd.singular_values.iter().cloned().fold(0.0f64, f64::max);
    if !(sigma_max > 0.0) {
        return None;
    }
    let x = svd.solve(b, sigma_max * 1e-13).ok()?;
    if !x.iter().all(|v| v.is_finite()) {
        return None;
    }
    let r = linsolve::compensated_residual(a, &x, b);
    let gauge = linsolve::inf_norm_vec(b) + linsolve::inf_norm_mat(a) * linsolve::inf_norm_vec(&x);
    let rel = linsolve::inf_norm_vec(&r) / gauge;
    (rel <= tol).then_some(Solution { x, rel_residual: rel, refinement_passes: 0 })
}

/// Evaporation contribution under the stationary-ratio constraints.
#[derive(Debug, Clone)]
pub struct FluxSources {
    pub a: Vec<f64>,
    pub b_star: Vec<f64>,
    pub c_star: Vec<f64>,
    pub alpha: f64,
    pub psi: f64,
}

impl FluxSources {
    fn zero(n: usize) -> FluxSources {
        FluxSources {
            a: vec![0.0; n],
            b_star: vec![0.0; n],
            c_star: vec![0.0; n],
            alpha: 0.0,
            psi: 0.0,
        }
    }
}

/// Sources that keep the ratios of consecutive volume abscissas stationary
/// under evaporation, so that nodes shrink in formation instead of
/// collapsing onto each other.
///
/// With nodes ordered by ascending volume, the constraints are
///
///   sum_n b*_n = 0,
///   W_{n+1} b*_n - W_n b*_{n+1} = E_n,        W_n = w*_n v_n,
///   E_n = w*_n w*_{n+1} [v_n R_v(v_{n+1}) - v_{n+1} R_v(v_n)],
///
/// and the analogous momentum set with W_n = w*_n v_n xi_n and right-hand
/// side xi_n xi_{n+1} E_n. Both are bidiagonal and solved exactly by a
/// forward recursion. E_n vanishes identically when R_v is proportional
/// to -v and is positive for any law that decays slower than linear; the
/// default closure then keeps alpha <= 0 and psi >= 0. A negative psi
/// (possible under the alternative closures) means the model would create
/// droplets at zero size; in that case the whole contribution is dropped.
pub fn evaporative_flux_sources(
    state: &QuadratureState,
    evap: &EvaporationLaw,
    closure: AlphaClosure,
    u_gas: f64,
) -> FluxSources {
    let n = state.len();
    if n == 0 || evap.is_none() {
        return FluxSources::zero(n);
    }
    let w_total: f64 = state.w_star.iter().sum();
    if !(w_total > 0.0) {
        return FluxSources::zero(n);
    }
    // Nodes with (nearly) extinct weights would put a zero denominator in
    // the recursion; they are left with zero sources and the constraints
    // are applied across the survivors.
    let mut order: Vec<usize> = (0..n)
        .filter(|&i| state.w_star[i] > 1e-30 * w_total)
        .collect();
    order.sort_by(|&i, &j| state.v[i].total_cmp(&state.v[j]));
    let s = order.len();
    if s == 0 {
        return FluxSources::zero(n);
    }
    let w = |t: usize| state.w_star[order[t]];
    let vv = |t: usize| state.v[order[t]];
    let xi = |t: usize| state.xi[order[t]];
    let e: Vec<f64> = (0..s.saturating_sub(1))
        .map(|t| w(t) * w(t + 1) * (vv(t) * evap.volume_rate(vv(t + 1)) - vv(t + 1) * evap.volume_rate(vv(t))))
        .collect();

    // b*_{t+1} = (W_{t+1} b*_t - rhs_t) / W_t, with the first value fixed
    // by the zero-sum row: write b*_t = p_t b*_0 + q_t and solve for b*_0.
    let chain = |wgt: &dyn Fn(usize) -> f64, rhs: &dyn Fn(usize) -> f64| -> Vec<f64> {
        let mut p = vec![1.0; s];
        let mut q = vec![0.0; s];
        for t in 0..s - 1 {
            p[t + 1] = wgt(t + 1) * p[t] / wgt(t);
            q[t + 1] = (wgt(t + 1) * q[t] - rhs(t)) / wgt(t);
        }
        let first = -q.iter().sum::<f64>() / p.iter().sum::<f64>();
        (0..s).map(|t| p[t] * first + q[t]).collect()
    };
    let b_chain = chain(&|t| w(t) * vv(t), &|t| e[t]);
    let c_chain = chain(&|t| w(t) * vv(t) * xi(t), &|t| xi(t) * xi(t + 1) * e[t]);

    let mut b_star = vec![0.0; n];
    let mut c_star = vec![0.0; n];
    for (t, &i) in order.iter().enumerate() {
        b_star[i] = b_chain[t];
        c_star[i] = c_chain[t];
    }

    let alpha = match closure {
        AlphaClosure::SizeSquared => {
            let num: f64 = state.v.iter().zip(&b_star).map(|(&v, &b)| v * b).sum();
            let den: f64 = state.v.iter().zip(&state.w_star).map(|(&v, &w)| v * v * w).sum();
            2.0 * num / den
        }
        AlphaClosure::SizeSquaredVelocity => {
            let num: f64 = (0..n)
                .map(|i| state.v[i] * state.xi[i] * b_star[i] + state.v[i] * c_star[i])
                .sum();
            let den: f64 = (0..n)
                .map(|i| state.v[i] * state.v[i] * state.xi[i] * state.w_star[i])
                .sum();
            num / den
        }
        AlphaClosure::VelocityWeighted => {
            let num: f64 = (0..n)
                .map(|i| (state.xi[i] * b_star[i] - c_star[i]) / state.v[i])
                .sum();
            let den: f64 = (0..n).map(|i| (state.xi[i] - u_gas) * state.w_star[i]).sum();
            let gauge = state
                .xi
                .iter()
                .fold(u_gas.abs(), |m, &x| m.max(x.abs()));
            if den.abs() <= 1e-14 * w_total * gauge {
                0.0
            } else {
                num / den
            }
        }
    };
    let psi = -alpha * w_total;
    if psi < 0.0 {
        // the model would inject droplets at zero size; no flux instead
        return FluxSources::zero(n);
    }
    let a = state.w_star.iter().map(|&w| alpha * w).collect();
    FluxSources { a, b_star, c_star, alpha, psi }
}

/// Complete per-node sources at station z: constrained coalescence and
/// evaporation contributions plus the closed-form evaporation and drag
/// terms.
pub fn total_sources(
    state: &QuadratureState,
    z: f64,
    cfg: &DqmomConfig,
    mset: &MomentSet,
) -> Result<SourceTerms, SourceError> {
    let n = state.len();
    let mut a = vec![0.0; n];
    let mut b_star = vec![0.0; n];
    let mut c_star = vec![0.0; n];
    let mut psi = 0.0;

    if matches!(cfg.problem.coal, Coalescence::On) && n > 0 {
        let p = coalescence_rhs(state, mset, z, &cfg.problem.gas, cfg.problem.coal);
        let sys = assemble_coalescence_system(state, mset, &p)?;
        let sol = solve_with_refinement(&sys)?;
        for i in 0..n {
            a[i] += sol.a[i];
            b_star[i] += sol.b_star[i];
            c_star[i] += sol.c_star[i];
        }
        #[cfg(debug_assertions)]
        check_moment_match(state, mset, &p, &a, &b_star, &c_star);
    }

    if !cfg.problem.evap.is_none() && matches!(cfg.flux_model, FluxModel::Ratio) && n > 0 {
        let flux = evaporative_flux_sources(
            state,
            &cfg.problem.evap,
            cfg.alpha_closure,
            cfg.problem.gas.axial_velocity(z),
        );
        for i in 0..n {
            a[i] += flux.a[i];
            b_star[i] += flux.b_star[i];
            c_star[i] += flux.c_star[i];
        }
        psi = flux.psi;
    }

    let v_gas = cfg.problem.gas.axial_velocity(z);
    let mut b = vec![0.0; n];
    let mut c = vec![0.0; n];
    for i in 0..n {
        let rv = cfg.problem.evap.volume_rate(state.v[i]);
        b[i] = b_star[i] + state.w_star[i] * rv;
        c[i] = c_star[i]
            + state.w_star[i] * state.xi[i] * rv
            + state.w_star[i]
                * state.v[i]
                * cfg.problem.drag.accel(state.v[i], state.xi[i], v_gas);
    }
    Ok(SourceTerms { a, b_star, b, c_star, c, psi })
}

/// Debug check: the solved sources must reproduce every constrained moment
/// rate. Rows are compared in the same scaled frame the solver is judged
/// in, against the largest scaled term anywhere in the system: for nearly
/// rank deficient states (twin nodes) the small rows sit below what any
/// solver can resolve and only the global gauge is meaningful.
#[cfg(debug_assertions)]
fn check_moment_match(
    state: &QuadratureState,
    mset: &MomentSet,
    rhs: &[f64],
    a: &[f64],
    b_star: &[f64],
    c_star: &[f64],
) {
    let v_scale = state.v.iter().cloned().fold(f64::MIN_POSITIVE, f64::max);
    let u_scale = state.xi.iter().map(|x| x.abs()).fold(f64::MIN_POSITIVE, f64::max);
    let mut gauge = f64::MIN_POSITIVE;
    let mut rows = Vec::with_capacity(mset.len());
    for (row, &(k, m)) in mset.pairs().iter().enumerate() {
        let unit = powk(v_scale, k) * vel_pow(u_scale, m);
        let mut lhs = 0.0;
        gauge = gauge.max(rhs[row].abs() / unit);
        for i in 0..state.len() {
            let va = (1.0 - k) * powk(state.v[i], k) * vel_pow(state.xi[i], m) * a[i];
            let bcoef = k - m as f64;
            let vb = if bcoef == 0.0 {
                0.0
            } else {
                bcoef * powk(state.v[i], k - 1.0) * vel_pow(state.xi[i], m) * b_star[i]
            };
            let vc = if m == 0 {
                0.0
            } else {
                m as f64 * powk(state.v[i], k - 1.0) * vel_pow(state.xi[i], m - 1) * c_star[i]
            };
            lhs += va + vb + vc;
            gauge = gauge.max(va.abs() / unit).max(vb.abs() / unit).max(vc.abs() / unit);
        }
        rows.push((k, m, (lhs - rhs[row]) / unit, rhs[row]));
    }
    for (k, m, scaled_err, rhs_row) in rows {
        debug_assert!(
            scaled_err.abs() <= 1e-10 * gauge,
            "moment ({k}, {m}) mismatch: scaled error {scaled_err:e} gauge {gauge:e} rhs {rhs_row:e}",
        );
    }
}

/// Separate abscissa pairs closer than rel_eps * max(v) so the coalescence
/// matrix is invertible. Each cluster of nearly equal abscissas is fanned
/// out multiplicatively around its mean and every weight is compensated so
/// the node's mass w* v is exactly preserved; the number density shifts by
/// O(rel_eps).
pub fn perturb_coincident_abscissas(state: &QuadratureState, rel_eps: f64) -> QuadratureState {
    let n = state.len();
    if n < 2 {
        return state.clone();
    }
    let sorted = QuadratureState::new(state.w_star.clone(), state.v.clone(), state.xi.clone());
    let v_scale = sorted.v[n - 1];
    let mut out = sorted.clone();
    let mut start = 0;
    while start < n {
        let mut end = start + 1;
        while end < n && (sorted.v[end] - sorted.v[end - 1]).abs() < rel_eps * v_scale {
            end += 1;
        }
        let c = end - start;
        if c > 1 {
            let mean = sorted.v[start..end].iter().sum::<f64>() / c as f64;
            for (t, i) in (start..end).enumerate() {
                // factors 1 + (2t - (c-1)) eps: symmetric, spaced 2 eps apart
                let factor = 1.0 + (2.0 * t as f64 - (c as f64 - 1.0)) * rel_eps;
                let v_new = mean * factor;
                out.w_star[i] = sorted.w_star[i] * sorted.v[i] / v_new;
                out.v[i] = v_new;
            }
        }
        start = end;
    }
    out
}

/// Derivative of the packed fluxes: d/dz (w* xi, w* v xi, w* v xi^2) equals
/// the per-node (number, volume, momentum) sources.
pub fn dqmom_rhs(
    z: f64,
    y: &[f64],
    cfg: &DqmomConfig,
    mset: &MomentSet,
    dy: &mut [f64],
) -> RhsResult {
    let state = QuadratureState::from_fluxes(y)?;
    let s = total_sources(&state, z, cfg, mset).map_err(|e| e.to_string())?;
    for i in 0..state.len() {
        dy[3 * i] = s.a[i];
        dy[3 * i + 1] = s.b[i];
        dy[3 * i + 2] = s.c[i];
    }
    Ok(())
}

/// A node dropped from the quadrature after shrinking to nothing.
#[derive(Debug, Clone, Copy)]
pub struct NodeRemoval {
    pub z: f64,
    /// volume abscissa at removal, m^3
    pub v: f64,
    /// starred weight carried by the node at removal, 1/m^3
    pub w_star: f64,
}

/// Radius below which an evaporating node is removed from the quadrature.
/// At 0.05 um the node carries ~3e-7 of the initial node mass, far below
/// every tolerance in use, while keeping the moment systems well away from
/// the v -> 0 singularity of the drag and evaporation rates.
pub const REMOVAL_RADIUS: f64 = 5.0e-8;

/// A node whose velocity falls below this fraction of the fastest node's is
/// removed as degenerate. Healthy configurations in this flow family keep
/// node velocities within a factor of a few of each other; a node an order
/// of magnitude slower than its peers no longer represents any droplet
/// population. The failure mode is the moment system's internal
/// redistribution driving a nearly drained node's velocity to zero, seen
/// with the integer velocity-moment set under coalescence. Left in place
/// the quotient state turns singular and stalls the integrator; removing
/// the node costs only the sliver of mass it still carries, which the
/// removal log accounts for.
pub const REMOVAL_VELOCITY_FRACTION: f64 = 0.1;

/// Result of one downstream integration.
#[derive(Debug, Clone)]
pub struct NozzleRun {
    /// requested sample stations
    pub z_grid: Vec<f64>,
    /// quadrature at each station; empty once the spray has fully evaporated
    pub states: Vec<QuadratureState>,
    pub final_state: QuadratureState,
    pub removals: Vec<NodeRemoval>,
    pub stats: IntegrationStats,
}

/// Integrate a quadrature state from the nozzle exit to `z_end`, sampling
/// at `z_grid` (ascending, within (z0, z_end]). Nodes whose abscissa
/// falls to the removal radius, whose number flux collapses to ~1e-12 of
/// the segment's largest, or whose velocity degenerates to a tenth of the
/// fastest node's are dropped and the integration restarts with N-1 nodes;
/// under the zero-flux model this is where the number density jumps.
pub fn integrate_nozzle(
    init: &QuadratureState,
    cfg: &DqmomConfig,
    kind: MomentSetKind,
    z_end: f64,
    z_grid: &[f64],
    rtol: f64,
) -> Result<NozzleRun, OdeError> {
    let z0 = cfg.problem.gas.z0;
    assert!(z_end > z0);
    debug_assert!(z_grid.windows(2).all(|w| w[0] <= w[1]));
    let v_cut = volume_from_radius(REMOVAL_RADIUS);
    let mut state = perturb_coincident_abscissas(init, 1e-6);
    let mut z = z0;
    let mut states = Vec::with_capacity(z_grid.len());
    let mut removals = Vec::new();
    let mut stats = IntegrationStats::default();
    let mut cursor = 0;

    while !state.is_empty() && z < z_end {
        let mset = kind.build(state.len());
        let y0 = state.to_fluxes();
        let number_flux_floor =
            1e-12 * y0.iter().step_by(3).fold(0.0f64, |m, &f| m.max(f.abs()));
        let opts = nozzle_opts(&y0, rtol);
        let seg_grid = &z_grid[cursor..];
        let mut rhs =
            |zz: f64, yy: &[f64], dd: &mut [f64]| dqmom_rhs(zz, yy, cfg, &mset, dd);
        let mut event = |_zz: f64, yy: &[f64]| {
            // xi = momentum flux / mass flux per node
            let xi_max = yy
                .chunks_exact(3)
                .fold(0.0f64, |m, c| if c[1] > 0.0 { m.max(c[2] / c[1]) } else { m });
            let u_floor = REMOVAL_VELOCITY_FRACTION * xi_max;
            yy.chunks_exact(3).any(|c| {
                c[0] <= number_flux_floor || c[1] <= v_cut * c[0] || c[2] <= u_floor * c[1]
            })
        };
        let res = integrator::integrate(
            &mut rhs,
            (z, z_end),
            &y0,
            &opts,
            seg_grid,
            Some(&mut event),
        )?;
        for y in &res.y_samples {
            states.push(QuadratureState::from_fluxes(y).expect("accepted state must be valid"));
        }
        cursor += res.y_samples.len();
        accumulate(&mut stats, &res.stats);
        z = res.z_reached;
        state = QuadratureState::from_fluxes(&res.y_final).expect("accepted state must be valid");
        if res.event_z.is_none() {
            break;
        }
        // drop every node at or just past a trigger; bisection can leave the
        // state a hair on either side, so pad the thresholds slightly
        let mut keep_w = Vec::new();
        let mut keep_v = Vec::new();
        let mut keep_xi = Vec::new();
        let mut dropped = 0;
        let xi_max = state.xi.iter().fold(0.0f64, |m, &x| m.max(x));
        let u_floor = REMOVAL_VELOCITY_FRACTION * xi_max;
        for i in 0..state.len() {
            let f1 = state.w_star[i] * state.xi[i];
            if f1 <= number_flux_floor * 1.001
                || state.v[i] <= v_cut * 1.001
                || state.xi[i] <= u_floor * 1.001
            {
                removals.push(NodeRemoval { z, v: state.v[i], w_star: state.w_star[i] });
                dropped += 1;
            } else {
                keep_w.push(state.w_star[i]);
                keep_v.push(state.v[i]);
                keep_xi.push(state.xi[i]);
            }
        }
        if dropped == 0 {
            // event localization stopped just short of the threshold; remove
            // the node closest to its own trigger rather than looping forever
            let (i, _) = (0..state.len())
                .map(|i| {
                    let f1 = state.w_star[i] * state.xi[i];
                    let margin = if number_flux_floor > 0.0 {
                        (f1 / number_flux_floor).min(state.v[i] / v_cut)
                    } else {
                        state.v[i] / v_cut
                    }
                    .min(state.xi[i] / u_floor);
                    (i, margin)
                })
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .expect("nonempty state");
            removals.push(NodeRemoval { z, v: state.v[i], w_star: state.w_star[i] });
            keep_w = state.w_star.clone();
            keep_v = state.v.clone();
            keep_xi = state.xi.clone();
            keep_w.remove(i);
            keep_v.remove(i);
            keep_xi.remove(i);
        }
        state = QuadratureState { w_star: keep_w, v: keep_v, xi: keep_xi };
    }

    // spray fully evaporated before the end: the remaining stations are empty
    while cursor < z_grid.len() {
        states.push(QuadratureState { w_star: vec![], v: vec![], xi: vec![] });
        cursor += 1;
    }
    Ok(NozzleRun {
        z_grid: z_grid.to_vec(),
        states,
        final_state: state,
        removals,
        stats,
    })
}

fn accumulate(total: &mut IntegrationStats, seg: &IntegrationStats) {
    total.n_steps += seg.n_steps;
    total.n_rhs += seg.n_rhs;
    total.n_jacobians += seg.n_jacobians;
    total.n_lu += seg.n_lu;
    total.n_rejected += seg.n_rejected;
}

/// Error-control weights for the packed fluxes. The three flux families
/// live on wildly different scales (w* xi ~ 1e12, w* v xi ~ 1e-3 in SI), so
/// each component gets a floor tied to its own family's largest entry
/// rather than the global maximum.
fn nozzle_opts(y0: &[f64], rtol: f64) -> OdeOptions {
    let mut family = [0.0f64; 3];
    for (i, &v) in y0.iter().enumerate() {
        family[i % 3] = family[i % 3].max(v.abs());
    }
    let atol = y0
        .iter()
        .enumerate()
        .map(|(i, &v)| (1e-9 * v.abs()).max(1e-14 * family[i % 3]).max(1e-300))
        .collect();
    OdeOptions { rtol, atol, method: Method::Bdf, max_step: f64::INFINITY, first_step: None }
}

/// Full moment source for exponents (k; l, m, p) in (size; u1, u2, u3) for
/// an unreduced three-velocity quadrature: number flux at zero size, smooth
/// evaporation, drag against a uniform gas velocity, and pairwise
/// coalescence. Reference implementation used to validate the reduced
/// assembly; not part of the transported system.
#[allow(clippy::too_many_arguments)]
pub fn general_source_moments(
    w: &[f64],
    v: &[f64],
    u: &[[f64; 3]],
    k: f64,
    lmp: (u32, u32, u32),
    psi: f64,
    u_f: [f64; 3],
    evap: &EvaporationLaw,
    drag: Option<(&DragLaw, [f64; 3])>,
    coal: Coalescence,
) -> f64 {
    assert_eq!(w.len(), v.len());
    assert_eq!(w.len(), u.len());
    let (l, m, p) = lmp;
    let upow =
        |uu: &[f64; 3]| vel_pow(uu[0], l) * vel_pow(uu[1], m) * vel_pow(uu[2], p);
    let mut total = 0.0;
    if k == 0.0 {
        total += psi * upow(&u_f);
    }
    for i in 0..w.len() {
        if k != 0.0 {
            total += k * w[i] * powk(v[i], k - 1.0) * upow(&u[i]) * evap.volume_rate(v[i]);
        }
        if let Some((law, u_gas)) = drag {
            let rate = law.relaxation_rate(v[i]);
            let mut accel_sum = 0.0;
            for (comp, exp) in [(0usize, l), (1, m), (2, p)] {
                if exp > 0 {
                    accel_sum += exp as f64 * rate * (u_gas[comp] - u[i][comp]) / u[i][comp];
                }
            }
            total += w[i] * powk(v[i], k) * upow(&u[i]) * accel_sum;
        }
        for j in 0..w.len() {
            let du = ((u[i][0] - u[j][0]).powi(2)
                + (u[i][1] - u[j][1]).powi(2)
                + (u[i][2] - u[j][2]).powi(2))
            .sqrt();
            let freq = collision_frequency(coal, du, v[i], v[j]);
            if freq == 0.0 {
                continue;
            }
            let vs = v[i] + v[j];
            let merged = [
                (v[i] * u[i][0] + v[j] * u[j][0]) / vs,
                (v[i] * u[i][1] + v[j] * u[j][1]) / vs,
                (v[i] * u[i][2] + v[j] * u[j][2]) / vs,
            ];
            let bracket =
                powk(vs, k) * upow(&merged) - powk(v[i], k) * upow(&u[i]) - powk(v[j], k) * upow(&u[j]);
            total += 0.5 * w[i] * w[j] * freq * bracket;
        }
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::physics::{self, ES_NONLINEAR, EV_MONOMODAL};
    use proptest::prelude::*;

    fn sample_state() -> QuadratureState {
        QuadratureState::new(
            vec![4.0e11, 1.5e12, 6.0e11],
            vec![
                volume_from_radius(8.0e-6),
                volume_from_radius(14.0e-6),
                volume_from_radius(26.0e-6),
            ],
            vec![4.2, 3.1, 2.4],
        )
    }

    fn problem(evap: EvaporationLaw, coal: Coalescence, drag_alpha: f64) -> SprayProblem {
        SprayProblem {
            gas: GasField::monomodal(),
            drag: DragLaw { alpha: drag_alpha },
            evap,
            coal,
        }
    }

    fn config(evap: EvaporationLaw, coal: Coalescence, drag_alpha: f64) -> DqmomConfig {
        DqmomConfig {
            problem: problem(evap, coal, drag_alpha),
            flux_model: FluxModel::Ratio,
            alpha_closure: AlphaClosure::SizeSquared,
        }
    }

    /// Independent oracle: the full double sum over ordered pairs with the
    /// half factor, built from the primitive kernel pieces.
    fn brute_force_moment_rate(
        state: &QuadratureState,
        k: f64,
        m: u32,
        z: f64,
        gas: &GasField,
    ) -> f64 {
        let mut acc = 0.0;
        for n in 0..state.len() {
            for q in 0..state.len() {
                let du = (state.xi[n] - state.xi[q]).abs();
                let freq = physics::beta_kernel(state.v[n], state.v[q]) * du;
                let vs = state.v[n] + state.v[q];
                let mean = (state.v[n] * state.xi[n] + state.v[q] * state.xi[q]) / vs;
                let bracket = vs.powf(k) * mean.powi(m as i32)
                    - state.v[n].powf(k) * state.xi[n].powi(m as i32)
                    - state.v[q].powf(k) * state.xi[q].powi(m as i32);
                acc += state.w_star[n] * state.w_star[q] * freq * bracket;
            }
        }
        0.5 * (gas.z0 / z) * (gas.z0 / z) * acc
    }

    /// Same loop with the bracket replaced by its absolute terms: a gauge
    /// for deciding when a moment rate is "zero" relative to the sums that
    /// produced it.
    fn brute_force_gauge(state: &QuadratureState, k: f64, m: u32, z: f64, gas: &GasField) -> f64 {
        let mut acc: f64 = 0.0;
        for n in 0..state.len() {
            for q in 0..state.len() {
                let du = (state.xi[n] - state.xi[q]).abs();
                let freq = physics::beta_kernel(state.v[n], state.v[q]) * du;
                let vs = state.v[n] + state.v[q];
                let mean = (state.v[n] * state.xi[n] + state.v[q] * state.xi[q]) / vs;
                acc += state.w_star[n]
                    * state.w_star[q]
                    * freq
                    * (vs.powf(k) * mean.powi(m as i32)).abs();
            }
        }
        0.5 * (gas.z0 / z) * (gas.z0 / z) * acc
    }

    /// Dense Gauss elimination with full pivoting; independent of the LU +
    /// refinement path under test.
    fn full_pivot_solve(a: &DMatrix<f64>, b: &DVector<f64>) -> Vec<f64> {
        let n = a.nrows();
        let mut m = a.clone();
        let mut rhs = b.clone();
        let mut col_perm: Vec<usize> = (0..n).collect();
        for step in 0..n {
            let (mut pi, mut pj, mut best) = (step, step, 0.0f64);
            for i in step..n {
                for j in step..n {
                    if m[(i, j)].abs() > best {
                        best = m[(i, j)].abs();
                        pi = i;
                        pj = j;
                    }
                }
            }
            assert!(best > 0.0, "oracle: singular matrix");
            m.swap_rows(step, pi);
            rhs.swap_rows(step, pi);
            m.swap_columns(step, pj);
            col_perm.swap(step, pj);
            for i in (step + 1)..n {
                let f = m[(i, step)] / m[(step, step)];
                for j in step..n {
                    m[(i, j)] -= f * m[(step, j)];
                }
                rhs[i] -= f * rhs[step];
            }
        }
        let mut y = vec![0.0; n];
        for i in (0..n).rev() {
            let mut s = rhs[i];
            for j in (i + 1)..n {
                s -= m[(i, j)] * y[j];
            }
            y[i] = s / m[(i, i)];
        }
        let mut x = vec![0.0; n];
        for i in 0..n {
            x[col_perm[i]] = y[i];
        }
        x
    }

    #[test]
    fn moment_set_layout() {
        let integer = MomentSetKind::IntegerSizePowers.build(3);
        assert_eq!(integer.len(), 9);
        let ks: Vec<f64> = integer.pairs().iter().map(|p| p.0).collect();
        let ms: Vec<u32> = integer.pairs().iter().map(|p| p.1).collect();
        for (i, &k) in ks.iter().take(6).enumerate() {
            assert!((k - i as f64 / 3.0).abs() < 1e-15);
        }
        assert_eq!(&ks[6..], &[1.0, 2.0, 3.0]);
        assert_eq!(ms, vec![0, 0, 0, 0, 0, 0, 1, 1, 1]);

        let thirds = MomentSetKind::ThirdSizePowers.build(3);
        assert_eq!(thirds.pairs()[..6], integer.pairs()[..6]);
        let ks: Vec<f64> = thirds.pairs()[6..].iter().map(|p| p.0).collect();
        for (i, &k) in ks.iter().enumerate() {
            assert!((k - (2.0 * (i + 1) as f64 - 1.0) / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn coalescence_rhs_matches_brute_force() {
        let state = sample_state();
        let gas = GasField::monomodal();
        let z = 1.3 * gas.z0;
        for kind in [MomentSetKind::IntegerSizePowers, MomentSetKind::ThirdSizePowers] {
            let mset = kind.build(state.len());
            let got = coalescence_rhs(&state, &mset, z, &gas, Coalescence::On);
            for (row, &(k, m)) in mset.pairs().iter().enumerate() {
                let want = brute_force_moment_rate(&state, k, m, z, &gas);
                let gauge = brute_force_gauge(&state, k, m, z, &gas);
                assert!(
                    (got[row] - want).abs() <= 1e-12 * gauge,
                    "({k}, {m}): got {:e}, oracle {want:e}",
                    got[row]
                );
            }
        }
    }

    #[test]
    fn mass_and_momentum_rows_vanish() {
        let state = sample_state();
        let gas = GasField::monomodal();
        let z = 1.2 * gas.z0;
        let mset = MomentSetKind::IntegerSizePowers.build(state.len());
        let p = coalescence_rhs(&state, &mset, z, &gas, Coalescence::On);
        // row 3 is (k, m) = (1, 0), row 6 is (1, 1)
        assert_eq!(mset.pairs()[3], (1.0, 0));
        assert_eq!(mset.pairs()[6], (1.0, 1));
        assert!(p[3].abs() <= 1e-12 * brute_force_gauge(&state, 1.0, 0, z, &gas));
        assert!(p[6].abs() <= 1e-12 * brute_force_gauge(&state, 1.0, 1, z, &gas));
    }

    #[test]
    fn equal_velocities_produce_no_coalescence() {
        let state = QuadratureState::new(
            vec![1.0e12, 2.0e12],
            vec![volume_from_radius(10.0e-6), volume_from_radius(20.0e-6)],
            vec![3.0, 3.0],
        );
        let gas = GasField::monomodal();
        let mset = MomentSetKind::IntegerSizePowers.build(2);
        let p = coalescence_rhs(&state, &mset, 1.1 * gas.z0, &gas, Coalescence::On);
        assert!(p.iter().all(|&x| x == 0.0));
        // kernel switched off entirely: sliding velocities, zero rates
        let slipping = sample_state();
        let mset3 = MomentSetKind::IntegerSizePowers.build(slipping.len());
        let off = coalescence_rhs(&slipping, &mset3, 1.1 * gas.z0, &gas, Coalescence::Off);
        assert_eq!(off.len(), 3 * slipping.len());
        assert!(off.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn number_moment_is_pure_loss() {
        let state = sample_state();
        let gas = GasField::monomodal();
        let z = 1.4 * gas.z0;
        let mset = MomentSetKind::IntegerSizePowers.build(state.len());
        let p = coalescence_rhs(&state, &mset, z, &gas, Coalescence::On);
        assert!(p[0] < 0.0);
        // each merger removes exactly one droplet
        let mut loss = 0.0;
        for n in 0..state.len() {
            for q in (n + 1)..state.len() {
                loss -= state.w_star[n]
                    * state.w_star[q]
                    * physics::beta_kernel(state.v[n], state.v[q])
                    * (state.xi[n] - state.xi[q]).abs();
            }
        }
        loss *= (gas.z0 / z) * (gas.z0 / z);
        assert!((p[0] - loss).abs() <= 1e-13 * loss.abs());
    }

    #[test]
    fn reduced_rhs_consistent_with_general_assembly() {
        let state = sample_state();
        let gas = GasField::monomodal();
        let z = 1.25 * gas.z0;
        let mset = MomentSetKind::ThirdSizePowers.build(state.len());
        let p = coalescence_rhs(&state, &mset, z, &gas, Coalescence::On);
        let u: Vec<[f64; 3]> = state.xi.iter().map(|&x| [x, 0.0, 0.0]).collect();
        for (row, &(k, m)) in mset.pairs().iter().enumerate() {
            let general = general_source_moments(
                &state.w_star,
                &state.v,
                &u,
                k,
                (m, 0, 0),
                0.0,
                [0.0; 3],
                &EvaporationLaw::None,
                None,
                Coalescence::On,
            );
            let want = general / gas.dilution(z);
            let gauge = brute_force_gauge(&state, k, m, z, &gas).max(1e-300);
            assert!(
                (p[row] - want).abs() <= 1e-12 * gauge,
                "({k}, {m}): reduced {:e} vs general {want:e}",
                p[row]
            );
        }
    }

    #[test]
    fn assembled_system_solution_matches_full_pivot_oracle() {
        let state = sample_state();
        let gas = GasField::monomodal();
        let z = 1.2 * gas.z0;
        let mset = MomentSetKind::ThirdSizePowers.build(state.len());
        let p = coalescence_rhs(&state, &mset, z, &gas, Coalescence::On);
        let sys = assemble_coalescence_system(&state, &mset, &p).unwrap();
        let sol = solve_with_refinement(&sys).unwrap();
        assert!(sol.rel_residual <= 1e-12);

        let oracle = full_pivot_solve(&sys.matrix, &sys.rhs);
        let n = state.len();
        let ws2 = sys.w_scale * sys.w_scale;
        let scale_a: f64 = sol.a.iter().fold(0.0f64, |m, &x| m.max(x.abs()));
        let scale_b: f64 = sol.b_star.iter().fold(0.0f64, |m, &x| m.max(x.abs()));
        let scale_c: f64 = sol.c_star.iter().fold(0.0f64, |m, &x| m.max(x.abs()));
        for i in 0..n {
            assert!((sol.a[i] - oracle[i] * ws2).abs() <= 1e-10 * scale_a);
            assert!(
                (sol.b_star[i] - oracle[n + i] * ws2 * sys.v_scale).abs() <= 1e-10 * scale_b
            );
            assert!(
                (sol.c_star[i] - oracle[2 * n + i] * ws2 * sys.v_scale * sys.u_scale).abs()
                    <= 1e-10 * scale_c
            );
        }
    }

    #[test]
    fn solved_sources_reproduce_every_moment_rate() {
        let state = sample_state();
        let gas = GasField::monomodal();
        let z = 1.2 * gas.z0;
        for kind in [MomentSetKind::IntegerSizePowers, MomentSetKind::ThirdSizePowers] {
            let mset = kind.build(state.len());
            let p = coalescence_rhs(&state, &mset, z, &gas, Coalescence::On);
            let sys = assemble_coalescence_system(&state, &mset, &p).unwrap();
            let sol = solve_with_refinement(&sys).unwrap();
            for (row, &(k, m)) in mset.pairs().iter().enumerate() {
                let mut lhs = 0.0;
                let mut gauge = p[row].abs();
                for i in 0..state.len() {
                    let ta = (1.0 - k)
                        * powk(state.v[i], k)
                        * vel_pow(state.xi[i], m)
                        * sol.a[i];
                    let tb = (k - m as f64)
                        * powk(state.v[i], k - 1.0)
                        * vel_pow(state.xi[i], m)
                        * sol.b_star[i];
                    let tc = if m == 0 {
                        0.0
                    } else {
                        m as f64
                            * powk(state.v[i], k - 1.0)
                            * vel_pow(state.xi[i], m - 1)
                            * sol.c_star[i]
                    };
                    lhs += ta + tb + tc;
                    gauge = gauge.max(ta.abs()).max(tb.abs()).max(tc.abs());
                }
                assert!(
                    (lhs - p[row]).abs() <= 1e-10 * gauge,
                    "({k}, {m}): lhs {lhs:e} vs rhs {:e}",
                    p[row]
                );
            }
        }
    }

    #[test]
    fn conservation_rows_force_zero_sum_sources() {
        let state = sample_state();
        let gas = GasField::monomodal();
        let z = 1.15 * gas.z0;
        let mset = MomentSetKind::IntegerSizePowers.build(state.len());
        let p = coalescence_rhs(&state, &mset, z, &gas, Coalescence::On);
        let sys = assemble_coalescence_system(&state, &mset, &p).unwrap();
        let sol = solve_with_refinement(&sys).unwrap();
        let b_scale = sol.b_star.iter().fold(0.0f64, |m, &x| m.max(x.abs()));
        let c_scale = sol.c_star.iter().fold(0.0f64, |m, &x| m.max(x.abs()));
        assert!(sol.b_star.iter().sum::<f64>().abs() <= 1e-12 * b_scale / 1e-2);
        assert!(sol.c_star.iter().sum::<f64>().abs() <= 1e-12 * c_scale / 1e-2);
    }

    #[test]
    fn coincident_abscissas_rejected() {
        let v = volume_from_radius(12.0e-6);
        let state = QuadratureState::new(vec![1e12, 1e12], vec![v, v], vec![2.0, 4.0]);
        let mset = MomentSetKind::IntegerSizePowers.build(2);
        let err = assemble_coalescence_system(&state, &mset, &vec![0.0; 6]).unwrap_err();
        match err {
            SourceError::CoincidentAbscissas { i, j, .. } => {
                assert_eq!((i, j), (0, 1));
            }
            other => panic!("wrong error: {other}"),
        }
    }

    #[test]
    fn linear_evaporation_has_no_flux_correction() {
        // v R_v(v') - v' R_v(v) = 0 identically when R_v is linear in v, so
        // the pair couplings, alpha and psi all vanish.
        let state = sample_state();
        let flux = evaporative_flux_sources(
            &state,
            &EvaporationLaw::LinearVolume { ev: EV_MONOMODAL },
            AlphaClosure::SizeSquared,
            3.0,
        );
        assert!(flux.a.iter().all(|&x| x == 0.0));
        assert!(flux.b_star.iter().all(|&x| x == 0.0));
        assert!(flux.c_star.iter().all(|&x| x == 0.0));
        assert_eq!(flux.alpha, 0.0);
        assert_eq!(flux.psi, 0.0);
    }

    #[test]
    fn nonlinear_flux_satisfies_ratio_constraints() {
        let state = QuadratureState::new(
            vec![8.0e11, 1.1e12, 9.0e11, 2.0e11],
            vec![
                volume_from_radius(5.0e-6),
                volume_from_radius(11.0e-6),
                volume_from_radius(19.0e-6),
                volume_from_radius(30.0e-6),
            ],
            vec![4.8, 3.9, 3.1, 2.5],
        );
        let evap = EvaporationLaw::NonlinearSurface { es: ES_NONLINEAR };
        let flux = evaporative_flux_sources(&state, &evap, AlphaClosure::SizeSquared, 3.0);
        let n = state.len();
        let b_scale = flux.b_star.iter().fold(0.0f64, |m, &x| m.max(x.abs()));
        let c_scale = flux.c_star.iter().fold(0.0f64, |m, &x| m.max(x.abs()));
        assert!(flux.b_star.iter().sum::<f64>().abs() <= 1e-12 * b_scale * n as f64);
        assert!(flux.c_star.iter().sum::<f64>().abs() <= 1e-12 * c_scale * n as f64);
        for t in 0..n - 1 {
            // recomputed pair couplings must be positive for a sub-linear law
            let e = state.w_star[t]
                * state.w_star[t + 1]
                * (state.v[t] * evap.volume_rate(state.v[t + 1])
                    - state.v[t + 1] * evap.volume_rate(state.v[t]));
            assert!(e > 0.0);
            let lhs_b = state.w_star[t + 1] * state.v[t + 1] * flux.b_star[t]
                - state.w_star[t] * state.v[t] * flux.b_star[t + 1];
            assert!((lhs_b - e).abs() <= 1e-12 * e);
            let lhs_c = state.w_star[t + 1]
                * state.v[t + 1]
                * state.xi[t + 1]
                * flux.c_star[t]
                - state.w_star[t] * state.v[t] * state.xi[t] * flux.c_star[t + 1];
            let rhs_c = state.xi[t] * state.xi[t + 1] * e;
            assert!((lhs_c - rhs_c).abs() <= 1e-12 * rhs_c.abs());
        }
        assert!(flux.alpha <= 0.0);
        assert!(flux.psi >= 0.0);
    }

    #[test]
    fn two_node_flux_sources_hand_solved() {
        // Hand solve of the two-node constraint set for w* = {1, 1},
        // v = {1, 8}e-15, xi = {2, 3} under the surface-regression law:
        //   E_1 = v_1 R_v(v_2) - v_2 R_v(v_1) > 0,
        //   b*_1 = E_1 / (w_1 v_1 + w_2 v_2) = -b*_2,
        //   c*_1 = xi_1 xi_2 E_1 / (w_1 v_1 xi_1 + w_2 v_2 xi_2) = -c*_2,
        //   alpha = 2 (v_1 b*_1 + v_2 b*_2) / (v_1^2 w_1 + v_2^2 w_2) < 0.
        // The first node gains volume source (+) and the last loses (-):
        // the couplings push mass down the size ladder while psi drains
        // number, which is what keeps the abscissa ratios stationary.
        let state = QuadratureState::new(
            vec![1.0, 1.0],
            vec![1.0e-15, 8.0e-15],
            vec![2.0, 3.0],
        );
        let evap = EvaporationLaw::NonlinearSurface { es: ES_NONLINEAR };
        let flux = evaporative_flux_sources(&state, &evap, AlphaClosure::SizeSquared, 5.0);
        let expect = |got: f64, want: f64| {
            assert!(
                (got - want).abs() <= 1e-12 * want.abs(),
                "got {got:e}, want {want:e}"
            );
        };
        assert!(flux.b_star[0] > 0.0 && flux.b_star[1] < 0.0);
        expect(flux.b_star[0], 4.1149915896326886e-13);
        expect(flux.b_star[1], -4.1149915896326886e-13);
        expect(flux.c_star[0], 8.546520993852508e-13);
        expect(flux.c_star[1], -8.546520993852508e-13);
        expect(flux.alpha, -88.63058808439638);
        expect(flux.psi, 177.26117616879276);
        assert!(flux.a.iter().all(|&a| (a - flux.alpha).abs() <= 1e-12 * flux.alpha.abs()));
    }

    #[test]
    fn velocity_weighted_closure_clamps_against_fast_gas() {
        let state = QuadratureState::new(
            vec![1.0, 1.0],
            vec![1.0e-15, 8.0e-15],
            vec![2.0, 3.0],
        );
        let evap = EvaporationLaw::NonlinearSurface { es: ES_NONLINEAR };
        // gas faster than every node: the velocity-weighted denominator goes
        // negative, alpha comes out positive, and the whole contribution is
        // dropped rather than creating droplets at zero size
        let clamped =
            evaporative_flux_sources(&state, &evap, AlphaClosure::VelocityWeighted, 5.0);
        assert_eq!(clamped.psi, 0.0);
        assert!(clamped.a.iter().all(|&x| x == 0.0));
        assert!(clamped.b_star.iter().all(|&x| x == 0.0));
        assert!(clamped.c_star.iter().all(|&x| x == 0.0));
        // stagnant gas flips the denominator sign and the flux survives
        let kept = evaporative_flux_sources(&state, &evap, AlphaClosure::VelocityWeighted, 0.0);
        assert!(kept.psi > 0.0);
        assert!(kept.alpha < 0.0);
        // the closure identity it came from: both sides recomputed here
        let num: f64 = (0..2)
            .map(|i| (state.xi[i] * kept.b_star[i] - kept.c_star[i]) / state.v[i])
            .sum();
        let den: f64 = (0..2).map(|i| state.xi[i] * state.w_star[i]).sum();
        assert!((kept.alpha - num / den).abs() <= 1e-12 * kept.alpha.abs());
    }

    #[test]
    fn size_velocity_closure_agrees_with_its_moment() {
        let state = sample_state();
        let evap = EvaporationLaw::NonlinearSurface { es: ES_NONLINEAR };
        let flux =
            evaporative_flux_sources(&state, &evap, AlphaClosure::SizeSquaredVelocity, 3.0);
        if flux.psi > 0.0 {
            let num: f64 = (0..3)
                .map(|i| {
                    state.v[i] * state.xi[i] * flux.b_star[i] + state.v[i] * flux.c_star[i]
                })
                .sum();
            let den: f64 = (0..3)
                .map(|i| state.v[i] * state.v[i] * state.xi[i] * state.w_star[i])
                .sum();
            assert!((flux.alpha - num / den).abs() <= 1e-12 * flux.alpha.abs());
        }
    }

    #[test]
    fn total_sources_vanish_without_processes() {
        let state = sample_state();
        let cfg = config(EvaporationLaw::None, Coalescence::Off, 0.0);
        let mset = MomentSetKind::IntegerSizePowers.build(state.len());
        let s = total_sources(&state, 0.12, &cfg, &mset).unwrap();
        assert!(s.a.iter().all(|&x| x == 0.0));
        assert!(s.b.iter().all(|&x| x == 0.0));
        assert!(s.c.iter().all(|&x| x == 0.0));
        assert_eq!(s.psi, 0.0);
    }

    #[test]
    fn coalescence_conserves_mass_and_momentum_sources() {
        let state = sample_state();
        let cfg = config(EvaporationLaw::None, Coalescence::On, 0.0);
        let mset = MomentSetKind::IntegerSizePowers.build(state.len());
        let s = total_sources(&state, 0.13, &cfg, &mset).unwrap();
        let b_scale = s.b.iter().fold(0.0f64, |m, &x| m.max(x.abs()));
        let c_scale = s.c.iter().fold(0.0f64, |m, &x| m.max(x.abs()));
        assert!(s.b.iter().sum::<f64>().abs() <= 1e-10 * b_scale);
        assert!(s.c.iter().sum::<f64>().abs() <= 1e-10 * c_scale);
        // number must strictly decrease under coalescence
        assert!(s.a.iter().sum::<f64>() < 0.0);
    }

    #[test]
    fn perturbation_leaves_distinct_states_alone() {
        let state = sample_state();
        let out = perturb_coincident_abscissas(&state, 1e-6);
        assert_eq!(out, state);
    }

    #[test]
    fn perturbation_splits_duplicates_and_preserves_mass() {
        let v = volume_from_radius(15.0e-6);
        let state = QuadratureState::new(
            vec![1.0e12, 2.0e12],
            vec![v, v],
            vec![3.0, 4.0],
        );
        let out = perturb_coincident_abscissas(&state, 1e-6);
        let sep = (out.v[1] - out.v[0]).abs();
        assert!((sep - 2e-6 * v).abs() <= 1e-9 * v);
        let mass_in = state.star_size_moment(1.0);
        let mass_out = out.star_size_moment(1.0);
        assert!((mass_in - mass_out).abs() <= 1e-14 * mass_in);

        // a triple collapses into a fan with all pairs separated
        let three = QuadratureState::new(
            vec![1.0e12, 1.0e12, 1.0e12],
            vec![v, v, v],
            vec![3.0, 4.0, 5.0],
        );
        let out = perturb_coincident_abscissas(&three, 1e-6);
        for i in 0..3 {
            for j in (i + 1)..3 {
                assert!((out.v[i] - out.v[j]).abs() >= 1.9e-6 * v);
            }
        }
        let mset = MomentSetKind::IntegerSizePowers.build(3);
        assert!(assemble_coalescence_system(&out, &mset, &vec![0.0; 9]).is_ok());
    }

    #[test]
    fn rhs_is_zero_without_sources() {
        let state = sample_state();
        let cfg = config(EvaporationLaw::None, Coalescence::Off, 0.0);
        let mset = MomentSetKind::IntegerSizePowers.build(state.len());
        let y = state.to_fluxes();
        let mut dy = vec![f64::NAN; y.len()];
        dqmom_rhs(0.11, &y, &cfg, &mset, &mut dy).unwrap();
        assert!(dy.iter().all(|&d| d == 0.0));
        let back = QuadratureState::from_fluxes(&y).unwrap();
        for i in 0..state.len() {
            assert!((back.w_star[i] - state.w_star[i]).abs() <= 1e-12 * state.w_star[i]);
            assert!((back.v[i] - state.v[i]).abs() <= 1e-12 * state.v[i]);
            assert!((back.xi[i] - state.xi[i]).abs() <= 1e-12 * state.xi[i]);
        }
    }

    #[test]
    fn rhs_rejects_flow_reversal() {
        let state = sample_state();
        let cfg = config(EvaporationLaw::None, Coalescence::Off, 0.0);
        let mset = MomentSetKind::IntegerSizePowers.build(state.len());
        let mut y = state.to_fluxes();
        y[2] = -y[2]; // flip one node's velocity flux
        let mut dy = vec![0.0; y.len()];
        assert!(dqmom_rhs(0.11, &y, &cfg, &mset, &mut dy).is_err());
    }

    #[test]
    fn constant_state_run_without_sources() {
        let state = sample_state();
        let cfg = config(EvaporationLaw::None, Coalescence::Off, 0.0);
        let z0 = cfg.problem.gas.z0;
        let grid = vec![1.3 * z0, 1.7 * z0, 2.0 * z0];
        let run = integrate_nozzle(
            &state,
            &cfg,
            MomentSetKind::IntegerSizePowers,
            2.0 * z0,
            &grid,
            1e-8,
        )
        .unwrap();
        assert_eq!(run.states.len(), 3);
        assert!(run.removals.is_empty());
        for st in &run.states {
            for i in 0..state.len() {
                assert!((st.w_star[i] - state.w_star[i]).abs() <= 1e-13 * state.w_star[i]);
                assert!((st.v[i] - state.v[i]).abs() <= 1e-13 * state.v[i]);
                assert!((st.xi[i] - state.xi[i]).abs() <= 1e-13 * state.xi[i]);
            }
        }
    }

    #[test]
    fn infinite_drag_locks_nodes_to_gas() {
        let state = QuadratureState::new(
            vec![5.0e11, 8.0e11],
            vec![volume_from_radius(9.0e-6), volume_from_radius(16.0e-6)],
            vec![5.0, 5.0],
        );
        let state = perturb_coincident_abscissas(&state, 1e-6);
        // 1000x the physical drag: relaxation length ~ 30 um << z0
        let cfg = config(EvaporationLaw::None, Coalescence::Off, physics::DRAG_ALPHA * 1e3);
        let gas = cfg.problem.gas;
        let z_end = 1.5 * gas.z0;
        let run = integrate_nozzle(
            &state,
            &cfg,
            MomentSetKind::IntegerSizePowers,
            z_end,
            &[z_end],
            1e-8,
        )
        .unwrap();
        let fin = &run.states[0];
        let v_gas = gas.axial_velocity(z_end);
        for i in 0..fin.len() {
            assert!(
                (fin.xi[i] - v_gas).abs() <= 1e-3 * v_gas,
                "node {i}: xi {} vs gas {v_gas}",
                fin.xi[i]
            );
            // physical weight w = w* (z0/z)^2 stays constant in this limit
            let w_phys = fin.w_star[i] / gas.dilution(z_end);
            assert!((w_phys - state.w_star[i]).abs() <= 1e-3 * state.w_star[i]);
        }
    }

    #[test]
    fn single_node_linear_evaporation_matches_direct_integration() {
        let v0 = volume_from_radius(14.0e-6);
        let state = QuadratureState::new(vec![7.0e11], vec![v0], vec![5.0]);
        let cfg = config(
            EvaporationLaw::LinearVolume { ev: EV_MONOMODAL },
            Coalescence::Off,
            physics::DRAG_ALPHA,
        );
        let gas = cfg.problem.gas;
        let z_end = 2.0 * gas.z0;
        let run = integrate_nozzle(
            &state,
            &cfg,
            MomentSetKind::IntegerSizePowers,
            z_end,
            &[z_end],
            1e-9,
        )
        .unwrap();
        let fin = &run.states[0];

        // independent route: primitive-variable ODEs for (xi, v) with the
        // explicit pair integrator
        let drag = cfg.problem.drag;
        let mut rhs = |z: f64, y: &[f64], dy: &mut [f64]| -> RhsResult {
            let (xi, v) = (y[0], y[1]);
            dy[0] = drag.accel(v, xi, gas.axial_velocity(z)) / xi;
            dy[1] = -EV_MONOMODAL * v / xi;
            Ok(())
        };
        let opts = OdeOptions {
            rtol: 1e-10,
            atol: vec![1e-12, 1e-10 * v0],
            method: Method::Rk45,
            max_step: f64::INFINITY,
            first_step: None,
        };
        let direct = integrator::integrate(
            &mut rhs,
            (gas.z0, z_end),
            &[5.0, v0],
            &opts,
            &[],
            None,
        )
        .unwrap();
        assert!((fin.xi[0] - direct.y_final[0]).abs() <= 1e-6 * direct.y_final[0]);
        assert!((fin.v[0] - direct.y_final[1]).abs() <= 1e-6 * direct.y_final[1]);
        // without coalescence and with a linear law, a_1 = 0, so the number
        // flux w* xi is exactly conserved
        let f1_in = state.w_star[0] * state.xi[0];
        let f1_out = fin.w_star[0] * fin.xi[0];
        assert!((f1_in - f1_out).abs() <= 1e-10 * f1_in);
    }

    #[test]
    fn peak_split_initialization_survives_coalescence_run() {
        let pop = physics::Population::bimodal(physics::INJECTED_MASS_DENSITY);
        let peaks = match pop {
            physics::Population::Peaks(p) => p,
            _ => unreachable!(),
        };
        let state = QuadratureState::from_peaks_split(&peaks, 2, 5.0, 5.0e-3);
        assert_eq!(state.len(), 4);
        let cfg = DqmomConfig {
            problem: SprayProblem {
                gas: GasField::bimodal(),
                drag: DragLaw::default(),
                evap: EvaporationLaw::LinearVolume { ev: physics::EV_BIMODAL },
                coal: Coalescence::On,
            },
            flux_model: FluxModel::Zero,
            alpha_closure: AlphaClosure::SizeSquared,
        };
        let z0 = cfg.problem.gas.z0;
        let grid = vec![1.5 * z0, 2.0 * z0];
        let run = integrate_nozzle(
            &state,
            &cfg,
            MomentSetKind::ThirdSizePowers,
            2.0 * z0,
            &grid,
            1e-7,
        )
        .unwrap();
        assert!(run.removals.is_empty());
        // mass flux sum(w* v xi) decays through evaporation alone; the
        // density moment sum(w* v) is not monotone here because the spray
        // decelerates
        let mass_flux = |s: &QuadratureState| -> f64 {
            (0..s.len()).map(|i| s.w_star[i] * s.v[i] * s.xi[i]).sum()
        };
        let f_in = mass_flux(&state);
        let f_end = mass_flux(&run.states[1]);
        assert!(
            f_end > 0.0 && f_end < f_in,
            "mass flux did not decay: {f_in:e} -> {f_end:e} (n_end {})",
            run.states[1].len()
        );
        // linear-volume shrinkage bounds the decay: dv/dz = -ev v / xi with
        // xi <= V0 gives at least exp(-ev dz / V0) per droplet
        let upper = f_in * (-physics::EV_BIMODAL * z0 / physics::V0).exp();
        assert!(f_end < upper, "evaporation too weak: {f_end:e} vs {upper:e}");
    }

    #[test]
    fn evaporating_nodes_are_removed() {
        let state = QuadratureState::new(
            vec![1.0e12, 1.0e12],
            vec![volume_from_radius(2.0e-6), volume_from_radius(4.0e-6)],
            vec![5.0, 5.0],
        );
        let state = perturb_coincident_abscissas(&state, 1e-6);
        let cfg = config(
            EvaporationLaw::NonlinearSurface { es: ES_NONLINEAR },
            Coalescence::Off,
            physics::DRAG_ALPHA,
        );
        let gas = cfg.problem.gas;
        let z_end = 1.2 * gas.z0;
        let run = integrate_nozzle(
            &state,
            &cfg,
            MomentSetKind::IntegerSizePowers,
            z_end,
            &[1.1 * gas.z0, z_end],
            1e-8,
        )
        .unwrap();
        // both nodes evaporate within ~5 mm of travel; the run carries on
        // with an empty quadrature and pads the remaining stations
        assert_eq!(run.removals.len(), 2);
        assert!(run.final_state.is_empty());
        assert_eq!(run.states.len(), 2);
        assert!(run.states[0].is_empty() && run.states[1].is_empty());
        for r in &run.removals {
            assert!(physics::radius_from_volume(r.v) <= REMOVAL_RADIUS * 1.01);
        }
    }

    #[test]
    fn zero_flux_keeps_number_until_removal() {
        let state = QuadratureState::new(
            vec![1.0e12, 8.0e11],
            vec![volume_from_radius(3.0e-6), volume_from_radius(20.0e-6)],
            vec![5.0, 5.0],
        );
        let evap = EvaporationLaw::NonlinearSurface { es: ES_NONLINEAR };
        let mk = |flux_model| DqmomConfig {
            problem: problem(evap, Coalescence::Off, physics::DRAG_ALPHA),
            flux_model,
            alpha_closure: AlphaClosure::SizeSquared,
        };
        let gas = GasField::monomodal();
        let z_end = 1.5 * gas.z0;

        let zero = integrate_nozzle(
            &state,
            &mk(FluxModel::Zero),
            MomentSetKind::IntegerSizePowers,
            z_end,
            &[],
            1e-8,
        )
        .unwrap();
        assert_eq!(zero.removals.len(), 1);
        let z_removal = zero.removals[0].z;
        // sample just short of the removal station
        let probe = gas.z0 + 0.99 * (z_removal - gas.z0);

        let total_number_flux = |st: &QuadratureState| -> f64 {
            (0..st.len()).map(|i| st.w_star[i] * st.xi[i]).sum()
        };
        let f0 = total_number_flux(&state);

        let zero = integrate_nozzle(
            &state,
            &mk(FluxModel::Zero),
            MomentSetKind::IntegerSizePowers,
            z_end,
            &[probe],
            1e-8,
        )
        .unwrap();
        // psi = 0: no number leaves until the abscissa crosses zero size
        assert!((total_number_flux(&zero.states[0]) - f0).abs() <= 1e-8 * f0);

        let ratio = integrate_nozzle(
            &state,
            &mk(FluxModel::Ratio),
            MomentSetKind::IntegerSizePowers,
            z_end,
            &[probe],
            1e-8,
        )
        .unwrap();
        // the ratio model drains number continuously on the way down
        assert!(total_number_flux(&ratio.states[0]) < f0 * (1.0 - 1e-3));
    }

    #[test]
    fn moment_set_choice_is_immaterial() {
        // same init, same N, only the velocity-moment rows differ. The
        // comparison window ends where the integer set's smallest node
        // degenerates (velocity cull near z = 1.53 z0 for this case); past
        // that point the production runs use the thirds set anyway.
        use crate::quadrature::{published_initial_nodes, PublishedInit};
        let cfg = config(EvaporationLaw::None, Coalescence::On, physics::DRAG_ALPHA);
        let z0 = cfg.problem.gas.z0;
        let grid = [1.2 * z0, 1.4 * z0, 1.5 * z0];
        let nodes =
            published_initial_nodes(PublishedInit::VolumeN4, physics::INJECTED_MASS_DENSITY);
        let state = QuadratureState::from_volume_nodes(&nodes, physics::V0);
        let m1: Vec<Vec<f64>> = [MomentSetKind::IntegerSizePowers, MomentSetKind::ThirdSizePowers]
            .iter()
            .map(|&kind| {
                let run =
                    integrate_nozzle(&state, &cfg, kind, 1.5 * z0, &grid, 1e-8).unwrap();
                assert!(run.removals.is_empty());
                run.states.iter().map(|s| s.star_size_moment(1.0)).collect()
            })
            .collect();
        for (station, (a, b)) in m1[0].iter().zip(&m1[1]).enumerate() {
            assert!(
                (a - b).abs() <= 1e-2 * a.abs(),
                "mass moments diverge at station {station}: {a:e} vs {b:e}",
            );
        }
    }

    #[test]
    fn full_assembly_conserves_mass_and_momentum() {
        let w = [2.0e11, 7.0e11, 4.0e11];
        let v = [
            volume_from_radius(7.0e-6),
            volume_from_radius(13.0e-6),
            volume_from_radius(24.0e-6),
        ];
        let u = [[4.0, 0.3, -0.2], [3.0, -0.1, 0.4], [2.2, 0.2, 0.1]];
        for exps in [(1.0, (0, 0, 0)), (1.0, (1, 0, 0)), (1.0, (0, 1, 0)), (1.0, (0, 0, 1))] {
            let p = general_source_moments(
                &w,
                &v,
                &u,
                exps.0,
                exps.1,
                0.0,
                [0.0; 3],
                &EvaporationLaw::None,
                None,
                Coalescence::On,
            );
            // gauge: the same double sum with all bracket terms made positive
            let mut gauge = 0.0;
            for i in 0..3 {
                for j in 0..3 {
                    let du = ((u[i][0] - u[j][0]).powi(2)
                        + (u[i][1] - u[j][1]).powi(2)
                        + (u[i][2] - u[j][2]).powi(2))
                    .sqrt();
                    gauge += w[i] * w[j] * physics::beta_kernel(v[i], v[j]) * du * (v[i] + v[j]);
                }
            }
            assert!(p.abs() <= 1e-10 * gauge, "exponents {exps:?}: {p:e}");
        }
    }

    #[test]
    fn number_moment_counts_flux_and_collision_loss() {
        let w = [2.0e11, 7.0e11];
        let v = [volume_from_radius(9.0e-6), volume_from_radius(21.0e-6)];
        let u = [[4.0, 0.0, 0.0], [2.5, 0.0, 0.0]];
        let psi = 3.7;
        let p = general_source_moments(
            &w,
            &v,
            &u,
            0.0,
            (0, 0, 0),
            psi,
            [5.0, 0.0, 0.0],
            &EvaporationLaw::None,
            None,
            Coalescence::On,
        );
        let loss =
            -w[0] * w[1] * physics::beta_kernel(v[0], v[1]) * (u[0][0] - u[1][0]).abs();
        assert!((p - (psi + loss)).abs() <= 1e-12 * (psi.abs() + loss.abs()));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn random_states_conserve_and_solve(
            n in 2usize..=4,
            seed in any::<u64>(),
        ) {
            // deterministic scrambled state from the seed
            let mut s = seed | 1;
            let mut next = move || {
                s ^= s << 13;
                s ^= s >> 7;
                s ^= s << 17;
                (s >> 11) as f64 / (1u64 << 53) as f64
            };
            let mut radii: Vec<f64> = (0..n).map(|_| 2e-6 + 33e-6 * next()).collect();
            radii.sort_by(f64::total_cmp);
            // enforce distinctness so the moment matrix is well posed
            for i in 1..n {
                if radii[i] - radii[i - 1] < 0.5e-6 {
                    radii[i] = radii[i - 1] + 0.5e-6;
                }
            }
            let w: Vec<f64> = (0..n).map(|_| 1e10 * 10f64.powf(3.0 * next())).collect();
            let xi: Vec<f64> = (0..n).map(|i| 0.5 + 4.5 * next() + i as f64 * 1e-3).collect();
            let v: Vec<f64> = radii.iter().map(|&r| volume_from_radius(r)).collect();
            let state = QuadratureState::new(w, v, xi);
            let gas = GasField::monomodal();
            let z = gas.z0 * (1.0 + next());
            let mset = MomentSetKind::ThirdSizePowers.build(n);

            let p = coalescence_rhs(&state, &mset, z, &gas, Coalescence::On);
            // mass and momentum rows vanish for arbitrary states
            let k1_row = mset.pairs().iter().position(|&(k, m)| k == 1.0 && m == 0).unwrap();
            prop_assert!(p[k1_row].abs() <= 1e-12 * brute_force_gauge(&state, 1.0, 0, z, &gas));
            let k11_row = mset.pairs().iter().position(|&(k, m)| k == 1.0 && m == 1).unwrap();
            prop_assert!(p[k11_row].abs() <= 1e-12 * brute_force_gauge(&state, 1.0, 1, z, &gas));

            let sys = assemble_coalescence_system(&state, &mset, &p).unwrap();
            let sol = solve_with_refinement(&sys).unwrap();
            prop_assert!(sol.rel_residual <= 1e-12);
            let b_scale = sol.b_star.iter().fold(1e-300f64, |m, &x| m.max(x.abs()));
            let c_scale = sol.c_star.iter().fold(1e-300f64, |m, &x| m.max(x.abs()));
            prop_assert!(sol.b_star.iter().sum::<f64>().abs() <= 1e-9 * b_scale);
            prop_assert!(sol.c_star.iter().sum::<f64>().abs() <= 1e-9 * c_scale);

            // evaporative flux: psi never negative under the default closure
            let flux = evaporative_flux_sources(
                &state,
                &EvaporationLaw::NonlinearSurface { es: ES_NONLINEAR },
                AlphaClosure::SizeSquared,
                gas.axial_velocity(z),
            );
            prop_assert!(flux.psi >= 0.0);
        }
    }
}
