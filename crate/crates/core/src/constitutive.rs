//! Memory kernels, strain measures and the model catalog.
//!
//! The extra-stress is `τ = ∫₀^∞ m(s) S(G(s)) ds`. A [`MemoryKernel`] is a
//! (possibly truncated) sum of exponential modes and a [`StrainMeasure`] maps
//! the deformation tensor `G` to a 2-tensor, usually in the separable K-BKZ
//! form `S(G) = h(I1) GᵀG` with damping function `h`.
//!
//! The assumption checks ([`verify_h1`], [`verify_h2`]) are empirical: they
//! sample the kernel on a log grid and the measure on random deformations
//! with `I1` spanning `[2, 1e8]`.

use std::fmt;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Mat2, Tensor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConstitutiveError {
    #[error("negative age s = {0}")]
    NegativeAge(f64),
    #[error("kernel is singular at the origin; density at s = 0 is undefined")]
    SingularOrigin,
    #[error("interval [{a}, {b}] is reversed")]
    ReversedInterval { a: f64, b: f64 },
    #[error("relaxation time must be positive, got {0}")]
    NonPositiveRelaxationTime(f64),
    #[error("mode weights must be nonnegative with positive sum")]
    BadWeights,
    #[error("weights and relaxation times differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("unknown model `{0}`")]
    UnknownModel(String),
    #[error("invalid parameter `{name}`: {reason}")]
    BadParameter { name: &'static str, reason: String },
    #[error("damping derivative disagrees with finite differences at x = {x} (given {given}, fd {fd})")]
    DerivativeMismatch { x: f64, given: f64, fd: f64 },
}

/// Which closed-form family a kernel belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum KernelFamily {
    SingleExponential,
    MultiMode,
    DoiEdwards,
    /// Arbitrary amplitude/rate pairs, not validated. Used for counterexamples.
    Custom,
}

/// One exponential mode `amplitude · exp(-rate · s)`.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Mode {
    amplitude: f64,
    rate: f64,
}

/// Memory density `m(s) = Σ_k a_k exp(-r_k s)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryKernel {
    family: KernelFamily,
    modes: Vec<Mode>,
    singular: bool,
}

impl MemoryKernel {
    /// `m(s) = exp(-s/λ)/λ`.
    pub fn single_exponential(lambda: f64) -> Result<Self, ConstitutiveError> {
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(ConstitutiveError::NonPositiveRelaxationTime(lambda));
        }
        Ok(Self {
            family: KernelFamily::SingleExponential,
            modes: vec![Mode {
                amplitude: 1.0 / lambda,
                rate: 1.0 / lambda,
            }],
            singular: false,
        })
    }

    /// `m(s) = Σ g_k λ_k⁻¹ exp(-s/λ_k)` with the weights rescaled to unit sum.
    pub fn multi_mode(weights: &[f64], times: &[f64]) -> Result<Self, ConstitutiveError> {
        if weights.len() != times.len() {
            return Err(ConstitutiveError::LengthMismatch(weights.len(), times.len()));
        }
        if let Some(&bad) = times.iter().find(|&&t| !(t > 0.0 && t.is_finite())) {
            return Err(ConstitutiveError::NonPositiveRelaxationTime(bad));
        }
        let total: f64 = weights.iter().sum();
        if weights.is_empty() || weights.iter().any(|&w| !(w >= 0.0)) || !(total > 0.0) {
            return Err(ConstitutiveError::BadWeights);
        }
        let modes = weights
            .iter()
            .zip(times)
            .filter(|(&g, _)| g > 0.0)
            .map(|(&g, &lam)| Mode {
                amplitude: g / total / lam,
                rate: 1.0 / lam,
            })
            .collect();
        Ok(Self {
            family: KernelFamily::MultiMode,
            modes,
            singular: false,
        })
    }

    /// Doi–Edwards relaxation spectrum truncated to odd modes `p ≤ max_mode`:
    /// weights ∝ 1/p², relaxation times λ/p², renormalized to unit mass.
    /// Treated as singular at the origin.
    pub fn doi_edwards(lambda: f64, max_mode: usize) -> Result<Self, ConstitutiveError> {
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(ConstitutiveError::NonPositiveRelaxationTime(lambda));
        }
        if max_mode == 0 {
            return Err(ConstitutiveError::BadParameter {
                name: "max_mode",
                reason: "need at least one odd mode".into(),
            });
        }
        let ps: Vec<f64> = (1..=max_mode).step_by(2).map(|p| p as f64).collect();
        let weights: Vec<f64> = ps.iter().map(|p| 1.0 / (p * p)).collect();
        let times: Vec<f64> = ps.iter().map(|p| lambda / (p * p)).collect();
        let mut k = Self::multi_mode(&weights, &times)?;
        k.family = KernelFamily::DoiEdwards;
        k.singular = true;
        Ok(k)
    }

    /// Raw `Σ a_k exp(-r_k s)` without any validation. A negative rate
    /// produces an increasing density.
    pub fn from_modes_unchecked(amplitudes: &[f64], rates: &[f64]) -> Self {
        Self {
            family: KernelFamily::Custom,
            modes: amplitudes
                .iter()
                .zip(rates)
                .map(|(&amplitude, &rate)| Mode { amplitude, rate })
                .collect(),
            singular: false,
        }
    }

    pub fn family(&self) -> KernelFamily {
        self.family
    }

    pub fn is_singular(&self) -> bool {
        self.singular
    }

    /// Longest relaxation time among the modes (infinite for nonpositive rates).
    pub fn max_relaxation_time(&self) -> f64 {
        self.modes
            .iter()
            .map(|m| if m.rate > 0.0 { 1.0 / m.rate } else { f64::INFINITY })
            .fold(0.0, f64::max)
    }

    fn check_age(&self, s: f64) -> Result<(), ConstitutiveError> {
        if s < 0.0 || s.is_nan() {
            return Err(ConstitutiveError::NegativeAge(s));
        }
        if self.singular && s == 0.0 {
            return Err(ConstitutiveError::SingularOrigin);
        }
        Ok(())
    }

    pub fn density(&self, s: f64) -> Result<f64, ConstitutiveError> {
        self.check_age(s)?;
        Ok(self.density_unchecked(s))
    }

    pub(crate) fn density_unchecked(&self, s: f64) -> f64 {
        self.modes
            .iter()
            .map(|m| m.amplitude * (-m.rate * s).exp())
            .sum()
    }

    /// `m'(s)`
    pub fn density_derivative(&self, s: f64) -> Result<f64, ConstitutiveError> {
        self.check_age(s)?;
        Ok(self
            .modes
            .iter()
            .map(|m| -m.rate * m.amplitude * (-m.rate * s).exp())
            .sum())
    }

    /// Closed-form `∫_a^b m(s) ds`; `b` may be `f64::INFINITY`.
    pub fn interval_mass(&self, a: f64, b: f64) -> Result<f64, ConstitutiveError> {
        if a < 0.0 || a.is_nan() {
            return Err(ConstitutiveError::NegativeAge(a));
        }
        if a > b || b.is_nan() {
            return Err(ConstitutiveError::ReversedInterval { a, b });
        }
        let mut total = 0.0;
        for m in &self.modes {
            let part = if m.rate == 0.0 {
                m.amplitude * (b - a)
            } else if b.is_infinite() {
                if m.rate > 0.0 {
                    m.amplitude / m.rate * (-m.rate * a).exp()
                } else {
                    m.amplitude * f64::INFINITY
                }
            } else {
                // e^{-ra}(1 - e^{-r(b-a)}) keeps small intervals accurate
                m.amplitude / m.rate * (-m.rate * a).exp() * -(-m.rate * (b - a)).exp_m1()
            };
            total += part;
        }
        Ok(total)
    }
}

/// Scalar damping function `h(I1)` of a separable measure.
#[derive(Clone)]
pub enum Damping {
    Constant(f64),
    /// `1/(1+x)`
    PsmRaw,
    /// `α/(α-2+x)`, normalized so `h(2) = 1`
    PsmNormalized { alpha: f64 },
    /// `exp(-√x)`
    WagnerRaw,
    /// `exp(-β(√x - √2))`, normalized so `h(2) = 1`
    WagnerNormalized { beta: f64 },
    /// `1/(1 + a·x^p)`
    Rational { a: f64, p: f64 },
    Custom(CustomDamping),
}

/// A user-supplied damping function together with its derivative.
#[derive(Clone)]
pub struct CustomDamping {
    h: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    dh: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
}

impl CustomDamping {
    /// Accepts `h` and `h'` after checking `h'` against central differences
    /// at log-spaced points in `[1e-3, 1e6]`.
    pub fn new(
        h: impl Fn(f64) -> f64 + Send + Sync + 'static,
        dh: impl Fn(f64) -> f64 + Send + Sync + 'static,
    ) -> Result<Self, ConstitutiveError> {
        for x in log_grid(1e-3, 1e6, 64) {
            let eps = 1e-5 * x;
            let fd = (h(x + eps) - h(x - eps)) / (2.0 * eps);
            let given = dh(x);
            let scale = fd.abs().max(given.abs()).max(1e-12 * h(x).abs()).max(1e-300);
            if !((fd - given).abs() <= 1e-4 * scale) {
                return Err(ConstitutiveError::DerivativeMismatch { x, given, fd });
            }
        }
        Ok(Self {
            h: Arc::new(h),
            dh: Arc::new(dh),
        })
    }
}

impl fmt::Debug for Damping {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Damping::Constant(c) => write!(f, "Constant({c})"),
            Damping::PsmRaw => write!(f, "PsmRaw"),
            Damping::PsmNormalized { alpha } => write!(f, "PsmNormalized(α={alpha})"),
            Damping::WagnerRaw => write!(f, "WagnerRaw"),
            Damping::WagnerNormalized { beta } => write!(f, "WagnerNormalized(β={beta})"),
            Damping::Rational { a, p } => write!(f, "Rational(a={a}, p={p})"),
            Damping::Custom(_) => write!(f, "Custom"),
        }
    }
}

impl Damping {
    #[inline]
    pub fn value(&self, x: f64) -> f64 {
        match self {
            Damping::Constant(c) => *c,
            Damping::PsmRaw => 1.0 / (1.0 + x),
            Damping::PsmNormalized { alpha } => alpha / (alpha - 2.0 + x),
            Damping::WagnerRaw => (-x.sqrt()).exp(),
            Damping::WagnerNormalized { beta } => (-beta * (x.sqrt() - std::f64::consts::SQRT_2)).exp(),
            Damping::Rational { a, p } => 1.0 / (1.0 + a * x.powf(*p)),
            Damping::Custom(c) => (c.h)(x),
        }
    }

    #[inline]
    pub fn derivative(&self, x: f64) -> f64 {
        match self {
            Damping::Constant(_) => 0.0,
            Damping::PsmRaw => -1.0 / ((1.0 + x) * (1.0 + x)),
            Damping::PsmNormalized { alpha } => {
                let d = alpha - 2.0 + x;
                -alpha / (d * d)
            }
            Damping::WagnerRaw => {
                let r = x.sqrt();
                -(-r).exp() / (2.0 * r)
            }
            Damping::WagnerNormalized { beta } => {
                let r = x.sqrt();
                -beta / (2.0 * r) * (-beta * (r - std::f64::consts::SQRT_2)).exp()
            }
            Damping::Rational { a, p } => {
                if *a == 0.0 {
                    return 0.0;
                }
                let d = 1.0 + a * x.powf(*p);
                -a * p * x.powf(p - 1.0) / (d * d)
            }
            Damping::Custom(c) => (c.dh)(x),
        }
    }
}

/// General age-dependent law `F(s, G)` with envelopes `|F| ≤ m1(s)` and
/// `|G||∂_G F| ≤ m2(s)`.
pub trait AgeDependentLaw: Send + Sync + fmt::Debug {
    fn eval(&self, s: f64, g: &Mat2) -> Mat2;
    fn deriv(&self, s: f64, g: &Mat2, h: &Mat2) -> Mat2;
    fn stress_envelope(&self, s: f64) -> f64;
    fn gradient_envelope(&self, s: f64) -> f64;
}

/// `F(s, G) = m(s) S(G)` for a separable pair; the envelopes are `m·S∞` and `m·S′∞`.
#[derive(Debug, Clone)]
pub struct KernelWeightedLaw {
    pub kernel: MemoryKernel,
    pub measure: StrainMeasure,
}

impl AgeDependentLaw for KernelWeightedLaw {
    fn eval(&self, s: f64, g: &Mat2) -> Mat2 {
        self.measure.eval(g) * self.kernel.density_unchecked(s)
    }
    fn deriv(&self, s: f64, g: &Mat2, h: &Mat2) -> Mat2 {
        self.measure.deriv(g, h) * self.kernel.density_unchecked(s)
    }
    fn stress_envelope(&self, s: f64) -> f64 {
        let b = self.measure.bounds().map_or(f64::INFINITY, |b| b.stress);
        b * self.kernel.density_unchecked(s)
    }
    fn gradient_envelope(&self, s: f64) -> f64 {
        let b = self.measure.bounds().map_or(f64::INFINITY, |b| b.gradient);
        b * self.kernel.density_unchecked(s)
    }
}

#[derive(Clone, Debug)]
pub enum StrainForm {
    /// `S(G) = h(I1)·GᵀG − shift·δ`
    Separable { damping: Damping, identity_shift: f64 },
    NonSeparable(Arc<dyn AgeDependentLaw>),
    /// `Σ c_i S_i(G)`
    Linear(Vec<(f64, StrainMeasure)>),
}

/// Declared bounds `S∞ ≥ |S(G)|` and `S′∞ ≥ |G||S′(G)|`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct DeclaredBounds {
    pub stress: f64,
    pub gradient: f64,
}

#[derive(Clone, Debug)]
pub struct StrainMeasure {
    name: String,
    form: StrainForm,
    bounds: Option<DeclaredBounds>,
}

/// `√6`: Frobenius norm of `∂(GᵀG)/∂G` divided by `|G|`.
const GRAM_DERIV_NORM: f64 = 2.449_489_742_783_178;

impl StrainMeasure {
    pub fn separable(
        name: impl Into<String>,
        damping: Damping,
        identity_shift: f64,
        bounds: Option<DeclaredBounds>,
    ) -> Self {
        Self {
            name: name.into(),
            form: StrainForm::Separable {
                damping,
                identity_shift,
            },
            bounds,
        }
    }

    pub fn non_separable(name: impl Into<String>, law: Arc<dyn AgeDependentLaw>) -> Self {
        Self {
            name: name.into(),
            form: StrainForm::NonSeparable(law),
            bounds: None,
        }
    }

    /// Linear combination; bounds combine by the triangle inequality when all terms have them.
    pub fn linear(name: impl Into<String>, terms: Vec<(f64, StrainMeasure)>) -> Self {
        let bounds = terms.iter().try_fold(
            DeclaredBounds {
                stress: 0.0,
                gradient: 0.0,
            },
            |acc, (c, m)| {
                m.bounds.map(|b| DeclaredBounds {
                    stress: acc.stress + c.abs() * b.stress,
                    gradient: acc.gradient + c.abs() * b.gradient,
                })
            },
        );
        Self {
            name: name.into(),
            form: StrainForm::Linear(terms),
            bounds,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn form(&self) -> &StrainForm {
        &self.form
    }

    pub fn bounds(&self) -> Option<DeclaredBounds> {
        self.bounds
    }

    pub fn h2_satisfied(&self) -> bool {
        self.bounds.is_some()
    }

    /// Whether the quadrature must multiply by the memory density.
    pub fn is_kernel_weighted(&self) -> bool {
        match &self.form {
            StrainForm::Separable { .. } => true,
            StrainForm::NonSeparable(_) => false,
            StrainForm::Linear(t) => t.iter().all(|(_, m)| m.is_kernel_weighted()),
        }
    }

    pub fn damping(&self) -> Option<&Damping> {
        match &self.form {
            StrainForm::Separable { damping, .. } => Some(damping),
            _ => None,
        }
    }

    #[inline]
    pub fn eval(&self, g: &Mat2) -> Mat2 {
        self.eval_at_age(0.0, g)
    }

    #[inline]
    pub fn eval_at_age(&self, s: f64, g: &Mat2) -> Mat2 {
        match &self.form {
            StrainForm::Separable {
                damping,
                identity_shift,
            } => {
                let gram = g.gram();
                let h = damping.value(gram.trace());
                let mut out = gram * h;
                if *identity_shift != 0.0 {
                    out.0[0] -= identity_shift;
                    out.0[3] -= identity_shift;
                }
                out
            }
            StrainForm::NonSeparable(law) => law.eval(s, g),
            StrainForm::Linear(terms) => terms
                .iter()
                .fold(Mat2::ZERO, |acc, (c, m)| acc + m.eval_at_age(s, g) * *c),
        }
    }

    /// Directional derivative `S′(G):H`.
    pub fn deriv(&self, g: &Mat2, h: &Mat2) -> Mat2 {
        self.deriv_at_age(0.0, g, h)
    }

    pub fn deriv_at_age(&self, s: f64, g: &Mat2, dir: &Mat2) -> Mat2 {
        match &self.form {
            StrainForm::Separable { damping, .. } => {
                let gram = g.gram();
                let x = gram.trace();
                let d_gram = dir.transpose().matmul(g) + g.transpose().matmul(dir);
                gram * (damping.derivative(x) * 2.0 * g.ddot(dir)) + d_gram * damping.value(x)
            }
            StrainForm::NonSeparable(law) => law.deriv(s, g, dir),
            StrainForm::Linear(terms) => terms
                .iter()
                .fold(Mat2::ZERO, |acc, (c, m)| acc + m.deriv_at_age(s, g, dir) * *c),
        }
    }

    /// Full order-4 derivative: component `(i,j,k,l)` is `∂S_kl/∂G_ij`.
    pub fn derivative_tensor(&self, g: &Mat2) -> Tensor {
        let mut comps = [0.0; 16];
        for ij in 0..4 {
            let mut e = Mat2::ZERO;
            e.0[ij] = 1.0;
            let d = self.deriv(g, &e);
            comps[4 * ij..4 * ij + 4].copy_from_slice(&d.0);
        }
        Tensor::from_slice(4, &comps).expect("static shape")
    }
}

/// `n` log-spaced points in `[lo, hi]`.
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    assert!(lo > 0.0 && hi > lo && n >= 2);
    let (a, b) = (lo.ln(), hi.ln());
    (0..n)
        .map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp())
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct H1Report {
    pub positive: bool,
    pub decreasing: bool,
    pub unit_mass: bool,
    pub mass: f64,
    pub pass: bool,
}

/// Checks positivity, monotonicity and unit mass of the kernel on `grid`.
pub fn verify_h1(kernel: &MemoryKernel, grid: &[f64], tol: f64) -> H1Report {
    let values: Vec<f64> = grid
        .iter()
        .map(|&s| kernel.density(s).unwrap_or(f64::NAN))
        .collect();
    let positive = values.iter().all(|&v| v > 0.0);
    let decreasing = values.windows(2).all(|w| w[1] <= w[0]);
    let mass = kernel.interval_mass(0.0, f64::INFINITY).unwrap_or(f64::NAN);
    let unit_mass = (mass - 1.0).abs() <= tol;
    H1Report {
        positive,
        decreasing,
        unit_mass,
        mass,
        pass: positive && decreasing && unit_mass,
    }
}

/// The standard H1 sample grid: 400 log-spaced ages in `[1e-6, 50·λ_max]`.
pub fn default_h1_grid(kernel: &MemoryKernel) -> Vec<f64> {
    let hi = 50.0 * kernel.max_relaxation_time();
    let hi = if hi.is_finite() && hi > 1e-5 { hi } else { 50.0 };
    log_grid(1e-6, hi, 400)
}

/// Result of a grid search for `sup_x f(x)` on `[1e-6, 1e8]`.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct SupEstimate {
    pub value: f64,
    pub argmax: f64,
    /// `false` when `f` is still growing at the top of the grid.
    pub bounded: bool,
}

const SUP_GRID_LO: f64 = 1e-6;
const SUP_GRID_HI: f64 = 1e8;

/// Log-grid maximization with golden-section refinement around the best node.
pub fn sup_on_log_grid(f: impl Fn(f64) -> f64) -> SupEstimate {
    let grid = log_grid(SUP_GRID_LO, SUP_GRID_HI, 2801);
    let vals: Vec<f64> = grid.iter().map(|&x| f(x)).collect();
    if vals.iter().any(|v| !v.is_finite()) {
        return SupEstimate {
            value: f64::INFINITY,
            argmax: f64::NAN,
            bounded: false,
        };
    }
    let (imax, _) = vals
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best });
    let mut value = vals[imax];
    let mut argmax = grid[imax];
    if imax > 0 && imax + 1 < grid.len() {
        // golden section in log x
        let (mut a, mut b) = (grid[imax - 1].ln(), grid[imax + 1].ln());
        let phi = 0.5 * (5f64.sqrt() - 1.0);
        let mut c = b - phi * (b - a);
        let mut d = a + phi * (b - a);
        let (mut fc, mut fd) = (f(c.exp()), f(d.exp()));
        for _ in 0..80 {
            if fc > fd {
                b = d;
                d = c;
                fd = fc;
                c = b - phi * (b - a);
                fc = f(c.exp());
            } else {
                a = c;
                c = d;
                fc = fd;
                d = a + phi * (b - a);
                fd = f(d.exp());
            }
        }
        let (xr, fr) = if fc > fd { (c.exp(), fc) } else { (d.exp(), fd) };
        if fr > value {
            value = fr;
            argmax = xr;
        }
    }
    // growth over the last decade decides boundedness
    let top = vals[vals.len() - 1];
    let decade_below = f(SUP_GRID_HI / 10.0);
    let bounded = !(top > decade_below * (1.0 + 1e-3) && top > 0.0);
    SupEstimate {
        value,
        argmax,
        bounded,
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct H2Report {
    pub measure: String,
    pub h2_declared: bool,
    pub declared: Option<DeclaredBounds>,
    /// Empirical `sup |S(G)|` over the samples.
    pub stress_sup_est: f64,
    /// Empirical `sup |G||S′(G)|` over the samples.
    pub gradient_sup_est: f64,
    /// `sup x|h(x)|` for separable measures.
    pub sup_xh: Option<SupEstimate>,
    /// `sup x²|h′(x)|` for separable measures.
    pub sup_x2dh: Option<SupEstimate>,
    pub pass: bool,
}

/// Random deformations with `I1` log-uniform in `[2, 1e8]`.
pub fn sample_deformation(rng: &mut impl Rng) -> Mat2 {
    let log_i1 = rng.gen_range(2f64.ln()..1e8f64.ln());
    let raw = Mat2(std::array::from_fn(|_| rng.sample::<f64, _>(StandardNormal)));
    let n = raw.norm();
    if n == 0.0 {
        return Mat2::IDENTITY;
    }
    raw * (log_i1.exp().sqrt() / n)
}

/// Empirical certification of the bounded-stress and bounded-gradient
/// conditions with `budget` random samples (seeded, deterministic).
pub fn verify_h2(measure: &StrainMeasure, seed: u64, budget: usize, tol: f64) -> H2Report {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut stress_sup: f64 = 0.0;
    let mut grad_sup: f64 = 0.0;
    for _ in 0..budget {
        let g = sample_deformation(&mut rng);
        let s = measure.eval(&g).norm();
        let gs = g.norm() * measure.derivative_tensor(&g).frobenius_norm();
        stress_sup = if s.is_finite() { stress_sup.max(s) } else { f64::INFINITY };
        grad_sup = if gs.is_finite() { grad_sup.max(gs) } else { f64::INFINITY };
    }
    let (sup_xh, sup_x2dh) = match measure.damping() {
        Some(h) => (
            Some(sup_on_log_grid(|x| x * h.value(x).abs())),
            Some(sup_on_log_grid(|x| x * x * h.derivative(x).abs())),
        ),
        None => (None, None),
    };
    let declared = measure.bounds();
    let functions_ok = match (sup_xh, sup_x2dh) {
        (Some(a), Some(b)) => a.bounded && b.bounded && a.value.is_finite() && b.value.is_finite(),
        _ => true,
    };
    let pass = match declared {
        Some(b) => {
            functions_ok
                && stress_sup.is_finite()
                && grad_sup.is_finite()
                && stress_sup <= b.stress + tol
                && grad_sup <= b.gradient + tol
        }
        None => false,
    };
    H2Report {
        measure: measure.name().to_string(),
        h2_declared: declared.is_some(),
        declared,
        stress_sup_est: stress_sup,
        gradient_sup_est: grad_sup,
        sup_xh,
        sup_x2dh,
        pass,
    }
}

/// Bounds for a separable measure from `C = sup x|h|` and `C′ = sup x²|h′|`:
/// `S∞ = C` (since `|GᵀG| ≤ Tr GᵀG`) and `S′∞ = 2C′ + √6·C`.
pub fn separable_bounds(sup_xh: f64, sup_x2dh: f64) -> DeclaredBounds {
    DeclaredBounds {
        stress: sup_xh,
        gradient: 2.0 * sup_x2dh + GRAM_DERIV_NORM * sup_xh,
    }
}

/// Parameters accepted by [`model_catalog`]. Unused fields are ignored by a given model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelParams {
    #[serde(default = "one")]
    pub lambda: f64,
    /// Polymer viscosity for Oldroyd-B.
    #[serde(default = "one")]
    pub mu_p: f64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "one")]
    pub beta: f64,
    /// Optional multi-mode spectrum (weights, times) replacing the single exponential.
    #[serde(default)]
    pub mode_weights: Option<Vec<f64>>,
    #[serde(default)]
    pub mode_times: Option<Vec<f64>>,
    #[serde(default = "default_de_modes")]
    pub de_max_mode: usize,
    /// `h(x) = 1/(1 + a·x^p)` for `kbkz-custom`.
    #[serde(default)]
    pub custom_a: f64,
    #[serde(default = "one")]
    pub custom_p: f64,
}

fn one() -> f64 {
    1.0
}
fn default_alpha() -> f64 {
    3.0
}
fn default_de_modes() -> usize {
    31
}

impl Default for ModelParams {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            mu_p: 1.0,
            alpha: default_alpha(),
            beta: 1.0,
            mode_weights: None,
            mode_times: None,
            de_max_mode: default_de_modes(),
            custom_a: 0.0,
            custom_p: 1.0,
        }
    }
}

pub const MODEL_NAMES: &[&str] = &[
    "oldroyd-b",
    "psm-raw",
    "psm-normalized",
    "wagner-raw",
    "wagner-normalized",
    "kbkz-custom",
    "doi-edwards",
];

fn exp_kernel(p: &ModelParams) -> Result<MemoryKernel, ConstitutiveError> {
    match (&p.mode_weights, &p.mode_times) {
        (Some(w), Some(t)) => MemoryKernel::multi_mode(w, t),
        (None, None) => MemoryKernel::single_exponential(p.lambda),
        _ => Err(ConstitutiveError::BadParameter {
            name: "mode_weights",
            reason: "mode_weights and mode_times must be given together".into(),
        }),
    }
}

/// Builds a `(kernel, measure)` pair by name.
pub fn model_catalog(
    name: &str,
    p: &ModelParams,
) -> Result<(MemoryKernel, StrainMeasure), ConstitutiveError> {
    let e2 = (-2f64).exp();
    let e3 = (-3f64).exp();
    match name {
        "oldroyd-b" => {
            if !(p.mu_p > 0.0) {
                return Err(ConstitutiveError::BadParameter {
                    name: "mu_p",
                    reason: format!("must be positive, got {}", p.mu_p),
                });
            }
            let kernel = exp_kernel(p)?;
            // UCM in integral form: τ = (μ_p/λ) ∫ m(s) (GᵀG − δ) ds
            let c = p.mu_p / p.lambda;
            Ok((
                kernel,
                StrainMeasure::separable(name, Damping::Constant(c), c, None),
            ))
        }
        "psm-raw" => Ok((
            exp_kernel(p)?,
            StrainMeasure::separable(name, Damping::PsmRaw, 0.0, Some(separable_bounds(1.0, 1.0))),
        )),
        "psm-normalized" => {
            if !(p.alpha > 2.0) {
                return Err(ConstitutiveError::BadParameter {
                    name: "alpha",
                    reason: format!("must exceed 2, got {}", p.alpha),
                });
            }
            Ok((
                exp_kernel(p)?,
                StrainMeasure::separable(
                    name,
                    Damping::PsmNormalized { alpha: p.alpha },
                    0.0,
                    Some(separable_bounds(p.alpha, p.alpha)),
                ),
            ))
        }
        "wagner-raw" => Ok((
            exp_kernel(p)?,
            StrainMeasure::separable(
                name,
                Damping::WagnerRaw,
                0.0,
                Some(separable_bounds(4.0 * e2, 13.5 * e3)),
            ),
        )),
        "wagner-normalized" => {
            let b = p.beta;
            if !(b > 0.0) {
                return Err(ConstitutiveError::BadParameter {
                    name: "beta",
                    reason: format!("must be positive, got {b}"),
                });
            }
            // x e^{-β√x} peaks at β√x = 2, x^{3/2} e^{-β√x} at β√x = 3
            let lift = (b * std::f64::consts::SQRT_2).exp();
            Ok((
                exp_kernel(p)?,
                StrainMeasure::separable(
                    name,
                    Damping::WagnerNormalized { beta: b },
                    0.0,
                    Some(separable_bounds(
                        lift * 4.0 * e2 / (b * b),
                        lift * 13.5 * e3 / (b * b),
                    )),
                ),
            ))
        }
        "kbkz-custom" => {
            if !(p.custom_a >= 0.0) || !(p.custom_p >= 1.0) {
                return Err(ConstitutiveError::BadParameter {
                    name: "custom_a",
                    reason: "need custom_a ≥ 0 and custom_p ≥ 1".into(),
                });
            }
            let damping = Damping::Rational {
                a: p.custom_a,
                p: p.custom_p,
            };
            Ok((exp_kernel(p)?, custom_measure(name, damping)))
        }
        "doi-edwards" => Ok((
            MemoryKernel::doi_edwards(p.lambda, p.de_max_mode)?,
            StrainMeasure::separable(name, Damping::PsmRaw, 0.0, Some(separable_bounds(1.0, 1.0))),
        )),
        other => Err(ConstitutiveError::UnknownModel(other.to_string())),
    }
}

/// A separable measure whose bounds are estimated from the damping function.
/// When either `x|h|` or `x²|h′|` keeps growing, no bounds are declared.
pub fn custom_measure(name: &str, damping: Damping) -> StrainMeasure {
    let a = sup_on_log_grid(|x| x * damping.value(x).abs());
    let b = sup_on_log_grid(|x| x * x * damping.derivative(x).abs());
    let bounds = (a.bounded && b.bounded && a.value.is_finite() && b.value.is_finite()).then(|| {
        let pad = 1.0 + 1e-6;
        separable_bounds(a.value * pad, b.value * pad)
    });
    StrainMeasure::separable(name, damping, 0.0, bounds)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_exponential_values() {
        let k = MemoryKernel::single_exponential(1.0).unwrap();
        assert_eq!(k.density(0.0).unwrap(), 1.0);
        assert!((k.density(2f64.ln()).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(k.interval_mass(0.0, f64::INFINITY).unwrap(), 1.0);
        assert!((k.interval_mass(7.5, f64::INFINITY).unwrap() - (-7.5f64).exp()).abs() < 1e-18);
    }

    #[test]
    fn two_mode_kernel() {
        let k = MemoryKernel::multi_mode(&[0.5, 0.5], &[1.0, 2.0]).unwrap();
        assert!((k.density(0.0).unwrap() - 0.75).abs() < 1e-15);
        assert!((k.interval_mass(0.0, f64::INFINITY).unwrap() - 1.0).abs() < 1e-15);
        // unnormalized weights are rescaled
        let k2 = MemoryKernel::multi_mode(&[2.0, 2.0], &[1.0, 2.0]).unwrap();
        assert!((k2.density(0.0).unwrap() - 0.75).abs() < 1e-15);
    }

    #[test]
    fn kernel_errors() {
        let k = MemoryKernel::single_exponential(1.0).unwrap();
        assert_eq!(k.density(-1.0), Err(ConstitutiveError::NegativeAge(-1.0)));
        assert!(matches!(
            k.interval_mass(2.0, 1.0),
            Err(ConstitutiveError::ReversedInterval { .. })
        ));
        let de = MemoryKernel::doi_edwards(1.0, 31).unwrap();
        assert_eq!(de.density(0.0), Err(ConstitutiveError::SingularOrigin));
        assert!(de.density(1e-9).unwrap() > 0.0);
        assert!(MemoryKernel::single_exponential(0.0).is_err());
        assert!(MemoryKernel::multi_mode(&[1.0], &[-1.0]).is_err());
        assert!(MemoryKernel::multi_mode(&[-1.0, 2.0], &[1.0, 1.0]).is_err());
    }

    #[test]
    fn interval_mass_is_additive() {
        let k = MemoryKernel::doi_edwards(2.0, 31).unwrap();
        for (a, b, c) in [(0.0, 0.3, 1.7), (0.01, 0.02, 40.0), (1.0, 1.0, 5.0)] {
            let lhs = k.interval_mass(a, b).unwrap() + k.interval_mass(b, c).unwrap();
            assert!((lhs - k.interval_mass(a, c).unwrap()).abs() < 1e-14);
        }
    }

    #[test]
    fn h1_checks() {
        let k = MemoryKernel::single_exponential(1.0).unwrap();
        assert!(verify_h1(&k, &default_h1_grid(&k), 1e-12).pass);
        let de = MemoryKernel::doi_edwards(1.0, 31).unwrap();
        let rep = verify_h1(&de, &default_h1_grid(&de), 1e-12);
        assert!(rep.pass, "{rep:?}");
        let bad = MemoryKernel::from_modes_unchecked(&[1.0], &[-0.5]);
        let rep = verify_h1(&bad, &log_grid(1e-6, 50.0, 200), 1e-12);
        assert!(!rep.decreasing && !rep.pass);
    }

    #[test]
    fn strain_at_identity() {
        let d = Mat2::IDENTITY;
        let p = ModelParams::default();
        let (_, ob) = model_catalog("oldroyd-b", &p).unwrap();
        assert_eq!(ob.eval(&d), Mat2::ZERO);
        assert!(!ob.h2_satisfied());
        let (_, psm) = model_catalog("psm-raw", &p).unwrap();
        let s = psm.eval(&d);
        for (a, b) in s.0.iter().zip((d * (1.0 / 3.0)).0.iter()) {
            assert!((a - b).abs() < 1e-15);
        }
        let (_, wag) = model_catalog("wagner-raw", &p).unwrap();
        let w = (-2f64.sqrt()).exp();
        assert!((wag.eval(&d).0[0] - w).abs() < 1e-15);
        // normalized variants give S(δ) = δ
        for name in ["psm-normalized", "wagner-normalized"] {
            let (_, m) = model_catalog(name, &p).unwrap();
            let s = m.eval(&d);
            assert!((s - d).norm() < 1e-14, "{name}: {s:?}");
        }
    }

    #[test]
    fn oldroyd_derivative_at_identity() {
        let (_, ob) = model_catalog("oldroyd-b", &ModelParams::default()).unwrap();
        let d = ob.deriv(&Mat2::IDENTITY, &Mat2::IDENTITY);
        assert_eq!(d, Mat2::new(2.0, 0.0, 0.0, 2.0));
        assert_eq!(ob.deriv(&Mat2::new(1.0, 2.0, 3.0, 4.0), &Mat2::ZERO), Mat2::ZERO);
    }

    #[test]
    fn derivative_tensor_index_convention() {
        // ∂(GᵀG)_kl/∂G_ij = δ_jk G_il + G_ik δ_jl
        let (_, ob) = model_catalog("oldroyd-b", &ModelParams::default()).unwrap();
        let g = Mat2::new(1.0, 2.0, 3.0, 4.0);
        let t = ob.derivative_tensor(&g);
        let kd = |a: usize, b: usize| if a == b { 1.0 } else { 0.0 };
        for i in 0..2 {
            for j in 0..2 {
                for k in 0..2 {
                    for l in 0..2 {
                        let expect = kd(j, k) * g.at(i, l) + g.at(i, k) * kd(j, l);
                        assert_eq!(t.get(&[i, j, k, l]), expect);
                    }
                }
            }
        }
        // |∂(GᵀG)| = √6 |G|
        assert!((t.frobenius_norm() - GRAM_DERIV_NORM * g.norm()).abs() < 1e-12);
    }

    #[test]
    fn sup_estimates() {
        let psm = sup_on_log_grid(|x| x / (1.0 + x));
        assert!(psm.bounded && (psm.value - 1.0).abs() < 1e-6);
        let w = sup_on_log_grid(|x| x * (-x.sqrt()).exp());
        assert!((w.value - 4.0 * (-2f64).exp()).abs() < 1e-9);
        assert!((w.argmax - 4.0).abs() < 1e-3);
        let grow = sup_on_log_grid(|x| x);
        assert!(!grow.bounded);
        let r = sup_on_log_grid(|x| x / (1.0 + x * x));
        assert!((r.value - 0.5).abs() < 1e-9 && (r.argmax - 1.0).abs() < 1e-3);
    }

    #[test]
    fn custom_damping_validation() {
        assert!(CustomDamping::new(|x| 1.0 / (1.0 + x), |x| -1.0 / ((1.0 + x) * (1.0 + x))).is_ok());
        assert!(matches!(
            CustomDamping::new(|x| 1.0 / (1.0 + x), |_| 0.0),
            Err(ConstitutiveError::DerivativeMismatch { .. })
        ));
    }

    #[test]
    fn catalog_errors() {
        assert!(matches!(
            model_catalog("maxwell", &ModelParams::default()),
            Err(ConstitutiveError::UnknownModel(_))
        ));
        let p = ModelParams {
            lambda: -1.0,
            ..Default::default()
        };
        assert!(matches!(
            model_catalog("psm-raw", &p),
            Err(ConstitutiveError::NonPositiveRelaxationTime(_))
        ));
    }

    #[test]
    fn separable_measures_are_frame_indifferent() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for name in ["psm-raw", "wagner-raw", "psm-normalized", "oldroyd-b"] {
            let (_, m) = model_catalog(name, &ModelParams::default()).unwrap();
            for _ in 0..200 {
                let g = Mat2(std::array::from_fn(|_| rng.gen_range(-3.0..3.0)));
                let q = Mat2::rotation(rng.gen_range(0.0..std::f64::consts::TAU));
                let diff = m.eval(&q.matmul(&g)) - m.eval(&g);
                assert!(diff.norm() <= 1e-12 * (1.0 + m.eval(&g).norm()));
            }
        }
    }

    #[test]
    fn kernel_weighted_law_matches_separable_product() {
        let (kernel, measure) = model_catalog("psm-raw", &ModelParams::default()).unwrap();
        let law = KernelWeightedLaw {
            kernel: kernel.clone(),
            measure: measure.clone(),
        };
        let g = Mat2::new(1.0, 0.3, -0.2, 1.1);
        let s = 0.7;
        let direct = measure.eval(&g) * kernel.density(s).unwrap();
        assert!((law.eval(s, &g) - direct).norm() < 1e-15);
        assert!(law.stress_envelope(s) <= kernel.density(s).unwrap() + 1e-15);
    }
}
