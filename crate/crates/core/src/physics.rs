//! Physical closures shared by every solver: gas field, drag, evaporation,
//! coalescence kernel, and the injected droplet populations.
//!
//! All quantities are SI internally (m, s, kg). The conventional output
//! units (mg/cm^3, 1/cm^3, um) appear only at the I/O boundary in the
//! harness. Liquid density enters number<->mass conversions only; the drag
//! relaxation time is defined directly as tau = r^2/alpha so that all three
//! solvers share the drag law exactly.

use std::f64::consts::PI;

/// Liquid density (heptane near 325 K), kg/m^3. Used only to convert
/// between number and mass densities.
pub const RHO_LIQUID: f64 = 649.4;

/// Drag coefficient alpha in 1/tau = alpha/r^2, m^2/s.
pub const DRAG_ALPHA: f64 = 1.566e-7;

/// Injected liquid mass density, kg/m^3 (numerically equal to mg/cm^3).
pub const INJECTED_MASS_DENSITY: f64 = 3.609;

/// Linear volume evaporation rate for the monomodal cases, 1/s.
pub const EV_MONOMODAL: f64 = 7.1262;
/// Linear volume evaporation rate for the bimodal cases, 1/s.
pub const EV_BIMODAL: f64 = 14.2524;
/// Surface regression rate for the nonlinear law, m^2/s.
pub const ES_NONLINEAR: f64 = 1.99e-7;

/// Gas velocity at the nozzle entrance, m/s (both geometries).
pub const V0: f64 = 5.0;
/// Nozzle entrance coordinate, m.
pub const Z0_MONOMODAL: f64 = 0.10;
pub const Z0_BIMODAL: f64 = 0.05;

/// Monomodal population support and shape targets (radius, m).
pub const MONO_R_MAX: f64 = 35.0e-6;
pub const MONO_MEAN_RADIUS: f64 = 12.0e-6;
pub const MONO_STD_RADIUS: f64 = 5.0e-6;
pub const MONO_SAUTER_RADIUS: f64 = 15.6e-6;

/// Bimodal peak radii, m.
pub const BI_R_SMALL: f64 = 10.0e-6;
pub const BI_R_LARGE: f64 = 30.0e-6;

pub fn volume_from_radius(r: f64) -> f64 {
    4.0 / 3.0 * PI * r * r * r
}

pub fn radius_from_volume(v: f64) -> f64 {
    (3.0 * v / (4.0 * PI)).cbrt()
}

/// Droplet surface s = 4 pi r^2 = (36 pi)^(1/3) v^(2/3).
pub fn surface_from_volume(v: f64) -> f64 {
    (36.0 * PI).cbrt() * v.powf(2.0 / 3.0)
}

/// Decelerating self-similar nozzle field. On the axis the gas moves at
/// V(z) = z0^2 V0 / z^2; the reduced radial velocity U(z) = V(z)/z drives
/// the geometric dilution (z/z0)^2 of the one-dimensional reduction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GasField {
    pub z0: f64,
    pub v0: f64,
}

impl GasField {
    pub fn monomodal() -> Self {
        GasField { z0: Z0_MONOMODAL, v0: V0 }
    }

    pub fn bimodal() -> Self {
        GasField { z0: Z0_BIMODAL, v0: V0 }
    }

    pub fn axial_velocity(&self, z: f64) -> f64 {
        self.z0 * self.z0 * self.v0 / (z * z)
    }

    pub fn radial_strain(&self, z: f64) -> f64 {
        self.axial_velocity(z) / z
    }

    /// (z/z0)^2, the ratio between starred (flux-scaled) and physical densities.
    pub fn dilution(&self, z: f64) -> f64 {
        (z / self.z0) * (z / self.z0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DragLaw {
    /// m^2/s; relaxation rate 1/tau = alpha/r^2.
    pub alpha: f64,
}

impl Default for DragLaw {
    fn default() -> Self {
        DragLaw { alpha: DRAG_ALPHA }
    }
}

impl DragLaw {
    /// 1/tau expressed in the volume variable: alpha (4 pi / 3v)^(2/3) = alpha/r^2.
    pub fn relaxation_rate(&self, v: f64) -> f64 {
        debug_assert!(v > 0.0);
        self.alpha * (4.0 * PI / (3.0 * v)).powf(2.0 / 3.0)
    }

    /// Axial acceleration on a droplet of volume v at velocity xi in gas at v_gas.
    pub fn accel(&self, v: f64, xi: f64, v_gas: f64) -> f64 {
        self.relaxation_rate(v) * (v_gas - xi)
    }

    pub fn tau(&self, r: f64) -> f64 {
        r * r / self.alpha
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EvaporationLaw {
    None,
    /// dv/dt = -ev * v. Droplets shrink but never vanish in finite time.
    LinearVolume { ev: f64 },
    /// Surface s = 4 pi r^2 regresses at ds/dt = -es, i.e.
    /// dv/dt = -(es/2) (3v/4pi)^(1/3). Finite disappearance time s0/es.
    NonlinearSurface { es: f64 },
}

impl EvaporationLaw {
    /// R_v(v) = dv/dt <= 0.
    pub fn volume_rate(&self, v: f64) -> f64 {
        match *self {
            EvaporationLaw::None => 0.0,
            EvaporationLaw::LinearVolume { ev } => -ev * v,
            EvaporationLaw::NonlinearSurface { es } => {
                -(es / 2.0) * (3.0 * v / (4.0 * PI)).cbrt()
            }
        }
    }

    pub fn is_none(&self) -> bool {
        matches!(self, EvaporationLaw::None)
    }

    /// Time for a droplet of radius r to evaporate completely, where finite.
    pub fn disappearance_time(&self, r: f64) -> Option<f64> {
        match *self {
            EvaporationLaw::NonlinearSurface { es } => Some(4.0 * PI * r * r / es),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Coalescence {
    Off,
    On,
}

impl Coalescence {
    pub fn efficiency(&self) -> f64 {
        match self {
            Coalescence::Off => 0.0,
            Coalescence::On => 1.0,
        }
    }
}

/// Geometric collision cross-section beta(v, v*) = pi (r + r*)^2, m^2.
/// Symmetric in its arguments.
pub fn beta_kernel(v: f64, v_star: f64) -> f64 {
    debug_assert!(v > 0.0 && v_star > 0.0);
    let rsum = radius_from_volume(v) + radius_from_volume(v_star);
    PI * rsum * rsum
}

/// Collision frequency kernel B = E_coal * beta * |du|, m^3/s.
pub fn collision_frequency(coal: Coalescence, du: f64, v: f64, v_star: f64) -> f64 {
    match coal {
        Coalescence::Off => 0.0,
        Coalescence::On => beta_kernel(v, v_star) * du.abs(),
    }
}

/// Everything the solvers need to know about one nozzle configuration:
/// the carrier flow, the drag law, and the droplet source processes.
#[derive(Debug, Clone)]
pub struct SprayProblem {
    pub gas: GasField,
    pub drag: DragLaw,
    pub evap: EvaporationLaw,
    pub coal: Coalescence,
}

/// Injected droplet population at the nozzle entrance.
#[derive(Debug, Clone)]
pub enum Population {
    /// Smooth number density in radius, tabulated plus its analytic shape.
    Smooth(SmoothPopulation),
    /// Dirac peaks: (number density 1/m^3, radius m).
    Peaks(Vec<(f64, f64)>),
}

/// Beta-shaped number density n(r) = scale * (r/L)^(a-1) (1-r/L)^(b-1) on
/// [0, L], fitted to the published mean/std and anchored to the injected
/// mass density. Tabulated on 512 points for consumers that want a grid;
/// integrals go through the analytic shape for accuracy.
#[derive(Debug, Clone)]
pub struct SmoothPopulation {
    pub r_grid: Vec<f64>,
    /// number density per unit radius, 1/m^4
    pub n_grid: Vec<f64>,
    pub r_max: f64,
    a: f64,
    b: f64,
    scale: f64,
}

const TABLE_POINTS: usize = 512;

impl SmoothPopulation {
    /// Density per unit radius at r, 1/m^4.
    pub fn density(&self, r: f64) -> f64 {
        if r <= 0.0 || r >= self.r_max {
            return 0.0;
        }
        let x = r / self.r_max;
        self.scale * x.powf(self.a - 1.0) * (1.0 - x).powf(self.b - 1.0)
    }

    /// Radius moment ⟨r^k⟩ = ∫ r^k n(r) dr with k any nonnegative real.
    /// 256-panel composite Gauss-Legendre; the integrand is smooth inside
    /// the support so this is accurate to near machine precision.
    pub fn radius_moment(&self, k: f64) -> f64 {
        let (nodes, weights) = crate::quadrature::gauss_legendre(24);
        let panels = 256;
        let h = self.r_max / panels as f64;
        let mut total = 0.0;
        for p in 0..panels {
            let lo = p as f64 * h;
            let mut acc = 0.0;
            for (x, w) in nodes.iter().zip(&weights) {
                let r = lo + 0.5 * h * (x + 1.0);
                acc += w * r.powf(k) * self.density(r);
            }
            total += acc * 0.5 * h;
        }
        total
    }
}

impl Population {
    /// Monomodal: beta shape in radius on [0, 35 um] with mean 12 um and
    /// std 5 um, scaled so the liquid mass density equals `mass_density`.
    pub fn monomodal(mass_density: f64) -> Population {
        let l = MONO_R_MAX;
        let m = MONO_MEAN_RADIUS / l;
        let s2 = (MONO_STD_RADIUS / l) * (MONO_STD_RADIUS / l);
        // Beta(a, b) on [0, 1]: mean m = a/(a+b), var = m(1-m)/(a+b+1).
        let sum = m * (1.0 - m) / s2 - 1.0;
        let a = m * sum;
        let b = (1.0 - m) * sum;
        let mut pop = SmoothPopulation {
            r_grid: Vec::new(),
            n_grid: Vec::new(),
            r_max: l,
            a,
            b,
            scale: 1.0,
        };
        // Fix the number scale by the total-mass anchor.
        let mass_unscaled = RHO_LIQUID * (4.0 / 3.0 * PI) * pop.radius_moment(3.0);
        pop.scale = mass_density / mass_unscaled;
        pop.r_grid = (0..TABLE_POINTS)
            .map(|i| l * i as f64 / (TABLE_POINTS - 1) as f64)
            .collect();
        pop.n_grid = pop.r_grid.iter().map(|&r| pop.density(r)).collect();
        Population::Smooth(pop)
    }

    /// Bimodal: Dirac peaks at 10 um and 30 um carrying equal halves of
    /// `mass_density`; the number weights then sit at the ratio 27:1.
    pub fn bimodal(mass_density: f64) -> Population {
        let peaks = [BI_R_SMALL, BI_R_LARGE]
            .iter()
            .map(|&r| {
                let n = 0.5 * mass_density / (RHO_LIQUID * volume_from_radius(r));
                (n, r)
            })
            .collect();
        Population::Peaks(peaks)
    }

    /// ⟨r^k⟩ = ∫ r^k n(r) dr.
    pub fn radius_moment(&self, k: f64) -> f64 {
        match self {
            Population::Smooth(p) => p.radius_moment(k),
            Population::Peaks(peaks) => peaks.iter().map(|&(n, r)| n * r.powf(k)).sum(),
        }
    }

    /// Total number density, 1/m^3.
    pub fn number_density(&self) -> f64 {
        self.radius_moment(0.0)
    }

    /// Total liquid mass density, kg/m^3.
    pub fn mass_density(&self) -> f64 {
        RHO_LIQUID * 4.0 / 3.0 * PI * self.radius_moment(3.0)
    }

    /// Sauter mean radius ⟨r^3⟩/⟨r^2⟩, m.
    pub fn sauter_radius(&self) -> f64 {
        self.radius_moment(3.0) / self.radius_moment(2.0)
    }
}
