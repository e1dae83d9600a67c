//! Moment vectors, Gaussian quadrature and moment inversion.
//!
//! The moment inversion (Wheeler's recurrence, moments to Jacobi matrix to
//! eigenvalues) initializes the moment solver from a droplet population and
//! also serves as a standalone consistency check: a realizable moment vector
//! must round-trip through nodes and back to machine-level accuracy.

use nalgebra::{DMatrix, SymmetricEigen};
use std::f64::consts::PI;

use crate::physics::{volume_from_radius, Population, RHO_LIQUID};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MomentBasis {
    /// moments of droplet volume v
    Volume,
    /// moments of droplet radius r
    Radius,
}

/// Ordered moments m_k, k = 0..count-1, over the chosen size variable.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentVector {
    pub values: Vec<f64>,
    pub basis: MomentBasis,
}

/// Weighted nodes (w_n, x_n). Weights are number densities (1/m^3), the
/// abscissa variable follows `basis` (m^3 or m).
#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureNodes {
    pub weights: Vec<f64>,
    pub abscissas: Vec<f64>,
    pub basis: MomentBasis,
}

impl QuadratureNodes {
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// Σ w x^k in the node basis.
    pub fn moment(&self, k: f64) -> f64 {
        self.weights
            .iter()
            .zip(&self.abscissas)
            .map(|(w, x)| w * x.powf(k))
            .sum()
    }

    /// Liquid mass density carried by the nodes, kg/m^3.
    pub fn total_mass_density(&self) -> f64 {
        match self.basis {
            MomentBasis::Volume => RHO_LIQUID * self.moment(1.0),
            MomentBasis::Radius => RHO_LIQUID * 4.0 / 3.0 * PI * self.moment(3.0),
        }
    }

    /// Radius nodes map to volume nodes with weights unchanged.
    pub fn to_volume_basis(&self) -> QuadratureNodes {
        match self.basis {
            MomentBasis::Volume => self.clone(),
            MomentBasis::Radius => QuadratureNodes {
                weights: self.weights.clone(),
                abscissas: self.abscissas.iter().map(|&r| volume_from_radius(r)).collect(),
                basis: MomentBasis::Volume,
            },
        }
    }

    /// Collapse abscissas closer than `rel_tol` (relative to the largest)
    /// into single nodes; weights add, abscissas average weight-wise.
    pub fn merge_coincident(&self, rel_tol: f64) -> QuadratureNodes {
        let span = self.abscissas.iter().fold(0.0f64, |m, &x| m.max(x.abs()));
        let mut weights: Vec<f64> = Vec::new();
        let mut abscissas: Vec<f64> = Vec::new();
        for (&w, &x) in self.weights.iter().zip(&self.abscissas) {
            match abscissas.last_mut() {
                Some(last) if (x - *last).abs() <= rel_tol * span => {
                    let wl = *weights.last().unwrap();
                    *last = (wl * *last + w * x) / (wl + w);
                    *weights.last_mut().unwrap() += w;
                }
                _ => {
                    weights.push(w);
                    abscissas.push(x);
                }
            }
        }
        QuadratureNodes { weights, abscissas, basis: self.basis }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum InversionError {
    #[error("moments are not realizable: Hankel minor of order {hankel_index} is not positive")]
    NonRealizable { hankel_index: usize },
    #[error("{nodes}-node inversion needs {need} moments, got {have}")]
    TooFewMoments { have: usize, need: usize, nodes: usize },
}

/// m_k of the population in the requested basis, k = 0..count-1.
pub fn moments_from_population(pop: &Population, basis: MomentBasis, count: usize) -> MomentVector {
    let values = (0..count)
        .map(|k| match basis {
            MomentBasis::Radius => pop.radius_moment(k as f64),
            // ∫ v^k n dr = (4π/3)^k ∫ r^{3k} n dr
            MomentBasis::Volume => {
                (4.0 / 3.0 * PI).powi(k as i32) * pop.radius_moment(3.0 * k as f64)
            }
        })
        .collect();
    MomentVector { values, basis }
}

/// Relative drop below which a recurrence coefficient is treated as exact
/// zero (degenerate distribution, fewer true nodes than requested).
const TRUNCATE_REL: f64 = 1e-10;

/// Invert 2N moments into at most N weighted nodes (Wheeler's recurrence).
///
/// The moments are first scaled by m0 and the mean abscissa so the recurrence
/// runs on O(1) numbers. A vanishing continued-fraction coefficient b_k means
/// the input carries only k distinct abscissas; the result is then truncated
/// to k nodes rather than padded with spurious ones. A negative b_k beyond
/// rounding noise is a genuine realizability violation and is reported with
/// the order of the offending Hankel minor.
pub fn qmom_invert(moments: &MomentVector, n: usize) -> Result<QuadratureNodes, InversionError> {
    let m = &moments.values;
    if n == 0 || m.len() < 2 * n {
        return Err(InversionError::TooFewMoments { have: m.len(), need: 2 * n, nodes: n });
    }
    if !(m[0] > 0.0) {
        return Err(InversionError::NonRealizable { hankel_index: 0 });
    }
    let m0 = m[0];
    let s = m[1] / m[0];
    if !(s > 0.0) || !s.is_finite() {
        return Err(InversionError::NonRealizable { hankel_index: 1 });
    }
    let nm = 2 * n;
    let mu: Vec<f64> = (0..nm).map(|k| m[k] / (m0 * s.powi(k as i32))).collect();

    // Recurrence coefficients of the orthogonal polynomials of mu.
    let mut a = vec![0.0; n];
    let mut b = vec![0.0; n];
    a[0] = mu[1]; // = 1 by construction
    let mut sigma_prev = vec![0.0; nm];
    let mut sigma_curr = mu.clone();
    let mut bmax = 1.0f64;
    let mut eff = n;
    for k in 1..n {
        let mut row = vec![0.0; nm];
        for l in k..(nm - k) {
            row[l] = sigma_curr[l + 1] - a[k - 1] * sigma_curr[l] - b[k - 1] * sigma_prev[l];
        }
        let bk = row[k] / sigma_curr[k - 1];
        if bk < -TRUNCATE_REL * bmax {
            return Err(InversionError::NonRealizable { hankel_index: k });
        }
        if bk <= TRUNCATE_REL * bmax {
            eff = k;
            break;
        }
        b[k] = bk;
        a[k] = row[k + 1] / row[k] - sigma_curr[k] / sigma_curr[k - 1];
        bmax = bmax.max(bk);
        sigma_prev = sigma_curr;
        sigma_curr = row;
    }

    let mut jac = DMatrix::zeros(eff, eff);
    for i in 0..eff {
        jac[(i, i)] = a[i];
    }
    for i in 1..eff {
        let sb = b[i].sqrt();
        jac[(i, i - 1)] = sb;
        jac[(i - 1, i)] = sb;
    }
    let eig = SymmetricEigen::new(jac);
    let mut pairs: Vec<(f64, f64)> = (0..eff)
        .map(|i| {
            let x = s * eig.eigenvalues[i];
            let w = m0 * eig.eigenvectors[(0, i)].powi(2);
            (x, w)
        })
        .collect();
    pairs.sort_by(|p, q| p.0.total_cmp(&q.0));
    if pairs[0].0 <= 0.0 {
        // Positive-support moments cannot produce a node at or below zero.
        return Err(InversionError::NonRealizable { hankel_index: eff });
    }
    let nodes = QuadratureNodes {
        abscissas: pairs.iter().map(|p| p.0).collect(),
        weights: pairs.iter().map(|p| p.1).collect(),
        basis: moments.basis,
    };
    Ok(nodes.merge_coincident(1e-12))
}

/// Gauss-Legendre rule on [-1, 1] via the Jacobi matrix of the Legendre
/// recurrence (Golub-Welsch). Returns (nodes, weights) sorted ascending.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let mut jac = DMatrix::zeros(n, n);
    for k in 1..n {
        let kk = k as f64;
        let sb = (kk * kk / (4.0 * kk * kk - 1.0)).sqrt();
        jac[(k, k - 1)] = sb;
        jac[(k - 1, k)] = sb;
    }
    let eig = SymmetricEigen::new(jac);
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|i| (eig.eigenvalues[i], 2.0 * eig.eigenvectors[(0, i)].powi(2)))
        .collect();
    pairs.sort_by(|p, q| p.0.total_cmp(&q.0));
    pairs.into_iter().unzip()
}

/// Published starting quadratures for the nozzle cases (weights relative to
/// an unstated total number density, radii in μm).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PublishedInit {
    VolumeN4,
    RadiusN4,
    RadiusN6,
    RadiusN8,
}

/// The raw published columns: (w/N0, r in μm), verbatim including the known
/// inconsistency of the six-node weight column (it sums to 0.424).
pub fn published_relative_nodes(case: PublishedInit) -> (Vec<f64>, Vec<f64>) {
    match case {
        PublishedInit::VolumeN4 => (
            vec![0.7323, 0.2545, 1.288e-2, 2.279e-4],
            vec![9.9955, 18.5282, 27.5630, 36.0142],
        ),
        PublishedInit::RadiusN4 => (
            vec![0.1845, 0.5397, 0.2635, 1.212e-2],
            vec![4.4079, 11.0409, 18.2840, 28.3910],
        ),
        PublishedInit::RadiusN6 => (
            vec![8.5573e-2, 0.2779, 5.5339e-2, 4.9778e-3, 3.1137e-4, 1.6671e-5],
            vec![3.3423, 7.5262, 12.9743, 18.8823, 26.3693, 34.7171],
        ),
        PublishedInit::RadiusN8 => (
            vec![
                4.6445e-2, 0.1488, 0.3089, 0.3438, 0.12931, 2.0905e-2, 1.6982e-3, 6.5627e-5,
            ],
            vec![2.8465, 5.5373, 9.6916, 14.2697, 19.2986, 25.2866, 31.5808, 37.5149],
        ),
    }
}

/// Published starting nodes in SI radius basis, rescaled so the carried
/// liquid mass density equals `mass_density` (the only absolute anchor; the
/// published weights are relative).
pub fn published_initial_nodes(case: PublishedInit, mass_density: f64) -> QuadratureNodes {
    let (w_rel, r_um) = published_relative_nodes(case);
    let radii: Vec<f64> = r_um.iter().map(|&r| r * 1e-6).collect();
    let mass_rel: f64 = w_rel
        .iter()
        .zip(&radii)
        .map(|(&w, &r)| RHO_LIQUID * w * volume_from_radius(r))
        .sum();
    let scale = mass_density / mass_rel;
    QuadratureNodes {
        weights: w_rel.iter().map(|&w| w * scale).collect(),
        abscissas: radii,
        basis: MomentBasis::Radius,
    }
}
