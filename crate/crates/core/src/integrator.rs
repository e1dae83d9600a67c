//! Adaptive ODE integration for the spatial march in z.
//!
//! The workhorse is a variable-order BDF method (orders 1 to 5) with a
//! modified-Newton corrector, dense finite-difference Jacobian and LU reuse,
//! which handles the stiffness from drag relaxation of small droplets. An
//! embedded Runge-Kutta pair is available as a cross-check for non-stiff
//! cases. Both methods share sampling at caller-supplied points (via dense
//! output, so the step sequence never depends on the sample grid) and a
//! stop-event mechanism used for evaporation cutoff and node removal.

use nalgebra::{DMatrix, DVector};

const MAX_ORDER: usize = 5;
const NEWTON_MAXITER: usize = 4;
const MIN_FACTOR: f64 = 0.2;
const MAX_FACTOR: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Bdf,
    Rk45,
}

#[derive(Debug, Clone)]
pub struct OdeOptions {
    pub rtol: f64,
    pub atol: Vec<f64>,
    pub method: Method,
    pub max_step: f64,
    pub first_step: Option<f64>,
}

impl OdeOptions {
    /// Default tolerance policy: rtol 1e-4, per-component atol proportional
    /// to the component's initial magnitude with a floor tied to the largest
    /// initial component (so components that start at zero, e.g. empty
    /// sections, are not error-controlled against 1e-30).
    pub fn for_initial_state(y0: &[f64], rtol: f64) -> OdeOptions {
        let ymax = y0.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
        let atol = y0
            .iter()
            .map(|&v| (1e-6 * v.abs()).max(1e-12 * ymax).max(1e-30))
            .collect();
        OdeOptions { rtol, atol, method: Method::Bdf, max_step: f64::INFINITY, first_step: None }
    }
}

#[derive(Debug, Clone, Default)]
pub struct IntegrationStats {
    pub n_steps: usize,
    pub n_rhs: usize,
    pub n_jacobians: usize,
    pub n_lu: usize,
    pub n_rejected: usize,
}

#[derive(Debug, Clone)]
pub struct IntegrationResult {
    /// States at the requested sample points, in order; shorter than the
    /// request if a stop event ended the run early.
    pub y_samples: Vec<Vec<f64>>,
    pub z_reached: f64,
    pub y_final: Vec<f64>,
    /// z where the stop event first held, if it fired.
    pub event_z: Option<f64>,
    pub stats: IntegrationStats,
}

#[derive(Debug, Clone, thiserror::Error)]
pub enum OdeError {
    #[error("step size underflow at z = {z:.6e} (h = {h:.3e}): problem too stiff at this tolerance")]
    StepUnderflow { z: f64, h: f64, last_state: Vec<f64> },
    #[error("right-hand side failed at z = {z:.6e}: {message}")]
    RhsFailed { z: f64, message: String, last_state: Vec<f64> },
}

pub type RhsResult = Result<(), String>;

fn rms_norm(v: &[f64]) -> f64 {
    (v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64).sqrt()
}

/// Polynomial segment over one accepted step, used for sampling and event
/// location without constraining the step sequence.
enum DenseSegment {
    /// Newton backward-difference form anchored at the step end.
    Bdf { t_ref: f64, h: f64, order: usize, d_rows: Vec<Vec<f64>> },
    /// Cubic Hermite from endpoint values and slopes.
    Hermite { t0: f64, h: f64, y0: Vec<f64>, f0: Vec<f64>, y1: Vec<f64>, f1: Vec<f64> },
}

impl DenseSegment {
    fn eval(&self, x: f64, out: &mut [f64]) {
        match self {
            DenseSegment::Bdf { t_ref, h, order, d_rows } => {
                out.copy_from_slice(&d_rows[0]);
                let mut p = 1.0;
                for j in 1..=*order {
                    let i = (j - 1) as f64;
                    p *= (x - (t_ref - i * h)) / ((i + 1.0) * h);
                    for (o, dv) in out.iter_mut().zip(&d_rows[j]) {
                        *o += p * dv;
                    }
                }
            }
            DenseSegment::Hermite { t0, h, y0, f0, y1, f1 } => {
                let th = (x - t0) / h;
                let th2 = th * th;
                let th3 = th2 * th;
                let c00 = 2.0 * th3 - 3.0 * th2 + 1.0;
                let c10 = th3 - 2.0 * th2 + th;
                let c01 = -2.0 * th3 + 3.0 * th2;
                let c11 = th3 - th2;
                for i in 0..out.len() {
                    out[i] = c00 * y0[i] + c10 * h * f0[i] + c01 * y1[i] + c11 * h * f1[i];
                }
            }
        }
    }
}

/// Shared post-step bookkeeping: fills samples inside (t_old, t_new] and
/// locates the first point where `event` holds, by bisection on the dense
/// segment. Returns Some((z*, y*)) when the event fired.
struct StepConsumer<'a> {
    samples: &'a [f64],
    cursor: usize,
    filled: Vec<Vec<f64>>,
}

impl<'a> StepConsumer<'a> {
    fn new(samples: &'a [f64]) -> Self {
        StepConsumer { samples, cursor: 0, filled: Vec::with_capacity(samples.len()) }
    }

    fn take_up_to(&mut self, limit: f64, seg: &DenseSegment, n: usize) {
        while self.cursor < self.samples.len() && self.samples[self.cursor] <= limit {
            let mut y = vec![0.0; n];
            seg.eval(self.samples[self.cursor], &mut y);
            self.filled.push(y);
            self.cursor += 1;
        }
    }
}

fn locate_event(
    seg: &DenseSegment,
    t_old: f64,
    t_new: f64,
    n: usize,
    event: &mut dyn FnMut(f64, &[f64]) -> bool,
) -> (f64, Vec<f64>) {
    // event is false at t_old, true at t_new; find the first switch.
    let mut lo = t_old;
    let mut hi = t_new;
    let mut y = vec![0.0; n];
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        seg.eval(mid, &mut y);
        if event(mid, &y) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    seg.eval(hi, &mut y);
    (hi, y)
}

/// Integrate y' = rhs(z, y) over z_span, sampling at `samples` (sorted,
/// inside the span). `event` stops the run at the first accepted step end
/// where it returns true, localized by bisection within that step.
pub fn integrate(
    rhs: &mut dyn FnMut(f64, &[f64], &mut [f64]) -> RhsResult,
    z_span: (f64, f64),
    y0: &[f64],
    opts: &OdeOptions,
    samples: &[f64],
    mut event: Option<&mut dyn FnMut(f64, &[f64]) -> bool>,
) -> Result<IntegrationResult, OdeError> {
    assert!(z_span.1 > z_span.0, "forward integration only");
    assert_eq!(opts.atol.len(), y0.len());
    debug_assert!(samples.windows(2).all(|w| w[0] <= w[1]));

    let mut consumer = StepConsumer::new(samples);
    // Samples at or before the start are the initial state.
    while consumer.cursor < samples.len() && samples[consumer.cursor] <= z_span.0 {
        consumer.filled.push(y0.to_vec());
        consumer.cursor += 1;
    }
    if let Some(ev) = event.as_deref_mut() {
        if ev(z_span.0, y0) {
            return Ok(IntegrationResult {
                y_samples: consumer.filled,
                z_reached: z_span.0,
                y_final: y0.to_vec(),
                event_z: Some(z_span.0),
                stats: IntegrationStats::default(),
            });
        }
    }
    match opts.method {
        Method::Bdf => integrate_bdf(rhs, z_span, y0, opts, consumer, event),
        Method::Rk45 => integrate_rk45(rhs, z_span, y0, opts, consumer, event),
    }
}

fn scale_vec(y: &[f64], opts: &OdeOptions, out: &mut [f64]) {
    for i in 0..y.len() {
        out[i] = opts.atol[i] + opts.rtol * y[i].abs();
    }
}

fn checked_rhs(
    rhs: &mut dyn FnMut(f64, &[f64], &mut [f64]) -> RhsResult,
    t: f64,
    y: &[f64],
    out: &mut [f64],
    stats: &mut IntegrationStats,
) -> RhsResult {
    stats.n_rhs += 1;
    rhs(t, y, out)?;
    if out.iter().any(|v| !v.is_finite()) {
        return Err("non-finite derivative".to_string());
    }
    Ok(())
}

/// Standard two-probe startup heuristic for the first step size.
fn initial_step(
    rhs: &mut dyn FnMut(f64, &[f64], &mut [f64]) -> RhsResult,
    t0: f64,
    y0: &[f64],
    f0: &[f64],
    span: f64,
    opts: &OdeOptions,
    stats: &mut IntegrationStats,
) -> f64 {
    let n = y0.len();
    let mut scale = vec![0.0; n];
    scale_vec(y0, opts, &mut scale);
    let d0 = rms_norm(&y0.iter().zip(&scale).map(|(y, s)| y / s).collect::<Vec<_>>());
    let d1 = rms_norm(&f0.iter().zip(&scale).map(|(f, s)| f / s).collect::<Vec<_>>());
    let h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
    let h0 = h0.min(span);
    let y1: Vec<f64> = y0.iter().zip(f0).map(|(y, f)| y + h0 * f).collect();
    let mut f1 = vec![0.0; n];
    if checked_rhs(rhs, t0 + h0, &y1, &mut f1, stats).is_err() {
        return (span * 1e-8).max(1e-12);
    }
    let d2 = rms_norm(
        &f1.iter()
            .zip(f0)
            .zip(&scale)
            .map(|((a, b), s)| (a - b) / s)
            .collect::<Vec<_>>(),
    ) / h0;
    let h1 = if d1 <= 1e-15 && d2 <= 1e-15 {
        (h0 * 1e-3).max(1e-6)
    } else {
        (0.01 / d1.max(d2)).sqrt()
    };
    (100.0 * h0).min(h1).min(span).min(opts.max_step)
}

fn fd_jacobian(
    rhs: &mut dyn FnMut(f64, &[f64], &mut [f64]) -> RhsResult,
    t: f64,
    y: &[f64],
    f0: &[f64],
    opts: &OdeOptions,
    stats: &mut IntegrationStats,
) -> Result<DMatrix<f64>, String> {
    let n = y.len();
    stats.n_jacobians += 1;
    let mut jac = DMatrix::zeros(n, n);
    let mut yp = y.to_vec();
    let mut fp = vec![0.0; n];
    for j in 0..n {
        // Floor the perturbation at atol, never at a global state norm: in
        // multiscale states a norm floor swamps the small components and can
        // push the trial state out of the admissible region entirely.
        let delta = f64::EPSILON.sqrt() * y[j].abs().max(opts.atol[j]);
        if delta == 0.0 {
            continue;
        }
        yp[j] = y[j] + delta;
        if checked_rhs(rhs, t, &yp, &mut fp, stats).is_err() {
            // Retry on the other side before giving up.
            yp[j] = y[j] - delta;
            checked_rhs(rhs, t, &yp, &mut fp, stats)?;
            for i in 0..n {
                jac[(i, j)] = (f0[i] - fp[i]) / delta;
            }
        } else {
            for i in 0..n {
                jac[(i, j)] = (fp[i] - f0[i]) / delta;
            }
        }
        yp[j] = y[j];
    }
    Ok(jac)
}

/// R[i][j] = prod_{m=1..i} (m-1-j*factor)/m; R(1)^-1 R(factor) rebases the
/// backward-difference table to a step scaled by `factor`.
fn compute_r(order: usize, factor: f64) -> Vec<Vec<f64>> {
    let r = order + 1;
    let mut m = vec![vec![1.0; r]; r];
    for i in 1..r {
        for j in 0..r {
            m[i][j] = (i as f64 - 1.0 - factor * j as f64) / i as f64;
        }
    }
    for i in 1..r {
        for j in 0..r {
            let prev = m[i - 1][j];
            m[i][j] *= prev;
        }
    }
    m
}

fn change_d(d: &mut [Vec<f64>], order: usize, factor: f64) {
    let r = compute_r(order, factor);
    let u = compute_r(order, 1.0);
    let k = order + 1;
    let n = d[0].len();
    // RU = R * U, then D[0..=order] <- (RU)^T D[0..=order]
    let mut ru = vec![vec![0.0; k]; k];
    for i in 0..k {
        for j in 0..k {
            let mut s = 0.0;
            for l in 0..k {
                s += r[i][l] * u[l][j];
            }
            ru[i][j] = s;
        }
    }
    let old: Vec<Vec<f64>> = d[..k].to_vec();
    for i in 0..k {
        for c in 0..n {
            let mut s = 0.0;
            for j in 0..k {
                s += ru[j][i] * old[j][c];
            }
            d[i][c] = s;
        }
    }
}

enum FailKind {
    Newton,
    Rhs,
}

#[allow(clippy::too_many_arguments)]
fn integrate_bdf(
    rhs: &mut dyn FnMut(f64, &[f64], &mut [f64]) -> RhsResult,
    z_span: (f64, f64),
    y0: &[f64],
    opts: &OdeOptions,
    mut consumer: StepConsumer,
    mut event: Option<&mut dyn FnMut(f64, &[f64]) -> bool>,
) -> Result<IntegrationResult, OdeError> {
    let n = y0.len();
    let (t0, t_bound) = z_span;
    let mut stats = IntegrationStats::default();

    let mut gamma = [0.0f64; MAX_ORDER + 2];
    for k in 1..=MAX_ORDER + 1 {
        gamma[k] = gamma[k - 1] + 1.0 / k as f64;
    }
    let alpha = gamma; // plain BDF
    let mut error_const = [0.0f64; MAX_ORDER + 2];
    for (k, e) in error_const.iter_mut().enumerate() {
        *e = 1.0 / (k as f64 + 1.0);
    }
    let newton_tol = (10.0 * f64::EPSILON / opts.rtol).max((opts.rtol.sqrt()).min(0.03));

    let mut f0 = vec![0.0; n];
    checked_rhs(rhs, t0, y0, &mut f0, &mut stats).map_err(|message| OdeError::RhsFailed {
        z: t0,
        message,
        last_state: y0.to_vec(),
    })?;
    let mut h = opts
        .first_step
        .unwrap_or_else(|| initial_step(rhs, t0, y0, &f0, t_bound - t0, opts, &mut stats))
        .min(opts.max_step)
        .min(t_bound - t0);

    let mut d_tab: Vec<Vec<f64>> = vec![vec![0.0; n]; MAX_ORDER + 3];
    d_tab[0].copy_from_slice(y0);
    for i in 0..n {
        d_tab[1][i] = h * f0[i];
    }
    let mut order = 1usize;
    let mut n_equal = 0usize;
    let mut t = t0;

    let mut jac: Option<DMatrix<f64>> = None;
    let mut current_jac = false;
    let mut lu: Option<(nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>, f64)> = None;

    let mut scale = vec![0.0; n];
    let mut fwork = vec![0.0; n];

    while t < t_bound * (1.0 - 1e-14) - 1e-300 {
        let min_step = 16.0 * f64::EPSILON * t.abs().max(t_bound.abs());
        if h > opts.max_step {
            change_d(&mut d_tab, order, opts.max_step / h);
            h = opts.max_step;
            n_equal = 0;
        }

        // Attempt loop: adjust h (and Jacobian freshness) until a step passes
        // both the Newton corrector and the local error test.
        let mut safety;
        let d_vec;
        let err_norm_acc;
        loop {
            if h < min_step {
                let last_state = d_tab[0].clone();
                return Err(OdeError::StepUnderflow { z: t, h, last_state });
            }
            let mut t_new = t + h;
            if t_new > t_bound {
                t_new = t_bound;
                let factor = (t_new - t) / h;
                change_d(&mut d_tab, order, factor);
                h = t_new - t;
                n_equal = 0;
                lu = None;
            }

            let mut y_predict = vec![0.0; n];
            for row in d_tab.iter().take(order + 1) {
                for i in 0..n {
                    y_predict[i] += row[i];
                }
            }
            scale_vec(&y_predict, opts, &mut scale);
            let mut psi = vec![0.0; n];
            for (k, row) in d_tab.iter().enumerate().take(order + 1).skip(1) {
                for i in 0..n {
                    psi[i] += row[i] * gamma[k];
                }
            }
            for p in psi.iter_mut() {
                *p /= alpha[order];
            }
            let c = h / alpha[order];

            if jac.is_none() {
                checked_rhs(rhs, t, &d_tab[0], &mut fwork, &mut stats).ok();
                match fd_jacobian(rhs, t, &d_tab[0], &fwork, opts, &mut stats) {
                    Ok(j) => {
                        jac = Some(j);
                        current_jac = true;
                        lu = None;
                    }
                    Err(message) => {
                        return Err(OdeError::RhsFailed { z: t, message, last_state: d_tab[0].clone() })
                    }
                }
            }

            // Reuse the factorization while c stays close to the one it was
            // built with; the corrector only needs an approximate matrix.
            let rebuild = match &lu {
                Some((_, c_lu)) => (c / c_lu - 1.0).abs() > 0.2,
                None => true,
            };
            if rebuild {
                let j = jac.as_ref().unwrap();
                let mut m = j * (-c);
                for i in 0..n {
                    m[(i, i)] += 1.0;
                }
                stats.n_lu += 1;
                lu = Some((m.lu(), c));
            }

            // Modified Newton on the BDF algebraic system.
            let mut y_new = y_predict.clone();
            let mut d_corr = vec![0.0; n];
            let mut converged = false;
            let mut n_iter = 0;
            let mut rate: Option<f64> = None;
            let mut dy_norm_old: Option<f64> = None;
            let mut fail: FailKind = FailKind::Newton;
            for it in 0..NEWTON_MAXITER {
                n_iter = it + 1;
                if checked_rhs(rhs, t_new, &y_new, &mut fwork, &mut stats).is_err() {
                    fail = FailKind::Rhs;
                    break;
                }
                let mut rhs_vec = DVector::zeros(n);
                for i in 0..n {
                    rhs_vec[i] = c * fwork[i] - psi[i] - d_corr[i];
                }
                let dy = match lu.as_ref().unwrap().0.solve(&rhs_vec) {
                    Some(dy) => dy,
                    None => break,
                };
                let dy_norm = rms_norm(
                    &dy.iter().zip(&scale).map(|(d, s)| d / s).collect::<Vec<_>>(),
                );
                if let Some(old) = dy_norm_old {
                    let r = dy_norm / old;
                    rate = Some(r);
                    if r >= 1.0
                        || r.powi((NEWTON_MAXITER - it) as i32) / (1.0 - r) * dy_norm > newton_tol
                    {
                        break;
                    }
                }
                for i in 0..n {
                    y_new[i] += dy[i];
                    d_corr[i] += dy[i];
                }
                if dy_norm == 0.0
                    || rate.map_or(false, |r| r / (1.0 - r) * dy_norm < newton_tol)
                {
                    converged = true;
                    break;
                }
                dy_norm_old = Some(dy_norm);
            }

            if !converged {
                match fail {
                    FailKind::Rhs => {
                        // A bad trial state (e.g. transient flow reversal in
                        // the predictor); shrink the step.
                        change_d(&mut d_tab, order, 0.5);
                        h *= 0.5;
                        n_equal = 0;
                        lu = None;
                        stats.n_rejected += 1;
                        continue;
                    }
                    _ => {
                        if let Some((_, c_lu)) = &lu {
                            if (c / c_lu - 1.0).abs() > 1e-12 {
                                // Stale factorization was the likely culprit.
                                lu = None;
                                continue;
                            }
                        }
                        if !current_jac {
                            jac = None; // force refresh at current state
                            continue;
                        }
                        change_d(&mut d_tab, order, 0.5);
                        h *= 0.5;
                        n_equal = 0;
                        lu = None;
                        stats.n_rejected += 1;
                        continue;
                    }
                }
            }

            safety = 0.9 * (2.0 * NEWTON_MAXITER as f64 + 1.0)
                / (2.0 * NEWTON_MAXITER as f64 + n_iter as f64);
            let err: Vec<f64> = d_corr
                .iter()
                .zip(&scale)
                .map(|(d, s)| error_const[order] * d / s)
                .collect();
            let err_norm = rms_norm(&err);
            if err_norm > 1.0 {
                let factor = (safety * err_norm.powf(-1.0 / (order as f64 + 1.0))).max(MIN_FACTOR);
                change_d(&mut d_tab, order, factor);
                h *= factor;
                n_equal = 0;
                lu = None;
                stats.n_rejected += 1;
                continue;
            }

            // Accepted.
            d_vec = d_corr;
            err_norm_acc = err_norm;
            t = t_new;
            break;
        }
        let _ = err_norm_acc;
        stats.n_steps += 1;
        n_equal += 1;
        current_jac = false;

        let t_old = t - h;
        for i in 0..n {
            d_tab[order + 2][i] = d_vec[i] - d_tab[order + 1][i];
            d_tab[order + 1][i] = d_vec[i];
        }
        for k in (0..=order).rev() {
            for i in 0..n {
                let up = d_tab[k + 1][i];
                d_tab[k][i] += up;
            }
        }

        let seg = DenseSegment::Bdf {
            t_ref: t,
            h,
            order,
            d_rows: d_tab[..=order].to_vec(),
        };
        if let Some(ev) = event.as_deref_mut() {
            if ev(t, &d_tab[0]) {
                let (tz, yz) = locate_event(&seg, t_old, t, n, ev);
                consumer.take_up_to(tz, &seg, n);
                return Ok(IntegrationResult {
                    y_samples: consumer.filled,
                    z_reached: tz,
                    y_final: yz,
                    event_z: Some(tz),
                    stats,
                });
            }
        }
        consumer.take_up_to(t, &seg, n);

        if t >= t_bound * (1.0 - 1e-14) {
            break;
        }
        if n_equal < order + 1 {
            continue;
        }

        // Step and order adaptation from the three candidate error norms.
        scale_vec(&d_tab[0], opts, &mut scale);
        let norm_at = |row: &Vec<f64>, k: usize| -> f64 {
            rms_norm(
                &row.iter()
                    .zip(&scale)
                    .map(|(d, s)| error_const[k] * d / s)
                    .collect::<Vec<_>>(),
            )
        };
        let err_same = norm_at(&d_tab[order + 1], order);
        let err_minus = if order > 1 { norm_at(&d_tab[order], order - 1) } else { f64::INFINITY };
        let err_plus = if order < MAX_ORDER {
            norm_at(&d_tab[order + 2], order + 1)
        } else {
            f64::INFINITY
        };
        let to_factor = |err: f64, k: usize| -> f64 {
            if err == 0.0 {
                MAX_FACTOR
            } else {
                err.powf(-1.0 / (k as f64 + 1.0))
            }
        };
        let cands = [
            (to_factor(err_minus, order - 1), order.saturating_sub(1).max(1)),
            (to_factor(err_same, order), order),
            (to_factor(err_plus, order + 1), order + 1),
        ];
        let (best_factor, best_order) =
            cands.iter().copied().fold((f64::MIN, order), |acc, c| if c.0 > acc.0 { c } else { acc });
        order = best_order;
        let factor = (safety * best_factor).min(MAX_FACTOR);
        change_d(&mut d_tab, order, factor);
        h *= factor;
        n_equal = 0;
        lu = None;
    }

    Ok(IntegrationResult {
        y_samples: consumer.filled,
        z_reached: t,
        y_final: d_tab[0].clone(),
        event_z: None,
        stats,
    })
}

// Dormand-Prince 5(4) coefficients.
const RK_C: [f64; 6] = [0.0, 0.2, 0.3, 0.8, 8.0 / 9.0, 1.0];
const RK_A: [[f64; 5]; 6] = [
    [0.0, 0.0, 0.0, 0.0, 0.0],
    [0.2, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0],
];
const RK_B: [f64; 6] = [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0];
const RK_E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

fn integrate_rk45(
    rhs: &mut dyn FnMut(f64, &[f64], &mut [f64]) -> RhsResult,
    z_span: (f64, f64),
    y0: &[f64],
    opts: &OdeOptions,
    mut consumer: StepConsumer,
    mut event: Option<&mut dyn FnMut(f64, &[f64]) -> bool>,
) -> Result<IntegrationResult, OdeError> {
    let n = y0.len();
    let (t0, t_bound) = z_span;
    let mut stats = IntegrationStats::default();
    let mut t = t0;
    let mut y = y0.to_vec();
    let mut f = vec![0.0; n];
    checked_rhs(rhs, t, &y, &mut f, &mut stats).map_err(|message| OdeError::RhsFailed {
        z: t,
        message,
        last_state: y.clone(),
    })?;
    let mut h = opts
        .first_step
        .unwrap_or_else(|| initial_step(rhs, t0, &y, &f, t_bound - t0, opts, &mut stats))
        .min(opts.max_step)
        .min(t_bound - t0);

    let mut k = vec![vec![0.0; n]; 7];
    let mut scale = vec![0.0; n];
    while t < t_bound * (1.0 - 1e-14) - 1e-300 {
        let min_step = 16.0 * f64::EPSILON * t.abs().max(t_bound.abs());
        if h < min_step {
            return Err(OdeError::StepUnderflow { z: t, h, last_state: y });
        }
        h = h.min(opts.max_step).min(t_bound - t);
        k[0].copy_from_slice(&f);
        let mut failed_rhs = None;
        let mut y_new = vec![0.0; n];
        for s in 1..6 {
            let mut ys = y.clone();
            for (j, kj) in k.iter().enumerate().take(s) {
                let a = RK_A[s][j];
                if a != 0.0 {
                    for i in 0..n {
                        ys[i] += h * a * kj[i];
                    }
                }
            }
            let (head, tail) = k.split_at_mut(s);
            let _ = head;
            if let Err(m) = checked_rhs(rhs, t + RK_C[s] * h, &ys, &mut tail[0], &mut stats) {
                failed_rhs = Some(m);
                break;
            }
        }
        if failed_rhs.is_none() {
            for i in 0..n {
                let mut acc = y[i];
                for (j, bj) in RK_B.iter().enumerate() {
                    acc += h * bj * k[j][i];
                }
                y_new[i] = acc;
            }
            let (head, tail) = k.split_at_mut(6);
            let _ = head;
            if let Err(m) = checked_rhs(rhs, t + h, &y_new, &mut tail[0], &mut stats) {
                failed_rhs = Some(m);
            }
        }
        if failed_rhs.is_some() {
            h *= 0.25;
            stats.n_rejected += 1;
            continue;
        }

        scale_vec(&y_new, opts, &mut scale);
        let mut err = vec![0.0; n];
        for i in 0..n {
            let mut e = 0.0;
            for (j, ej) in RK_E.iter().enumerate() {
                e += ej * k[j][i];
            }
            err[i] = h * e / scale[i];
        }
        let err_norm = rms_norm(&err);
        if err_norm > 1.0 {
            h = (h * (0.9 * err_norm.powf(-0.2)).max(MIN_FACTOR)).max(min_step * 0.5);
            stats.n_rejected += 1;
            continue;
        }

        let t_old = t;
        let seg = DenseSegment::Hermite {
            t0: t_old,
            h,
            y0: y.clone(),
            f0: k[0].clone(),
            y1: y_new.clone(),
            f1: k[6].clone(),
        };
        t += h;
        y = y_new;
        f.copy_from_slice(&k[6]);
        stats.n_steps += 1;

        if let Some(ev) = event.as_deref_mut() {
            if ev(t, &y) {
                let (tz, yz) = locate_event(&seg, t_old, t, n, ev);
                consumer.take_up_to(tz, &seg, n);
                return Ok(IntegrationResult {
                    y_samples: consumer.filled,
                    z_reached: tz,
                    y_final: yz,
                    event_z: Some(tz),
                    stats,
                });
            }
        }
        consumer.take_up_to(t, &seg, n);

        let factor = if err_norm == 0.0 { MAX_FACTOR } else { 0.9 * err_norm.powf(-0.2) };
        h *= factor.clamp(MIN_FACTOR, MAX_FACTOR);
    }

    Ok(IntegrationResult {
        y_samples: consumer.filled,
        z_reached: t,
        y_final: y,
        event_z: None,
        stats,
    })
}
