//! Per-step monitors for the a priori bounds, and independent oracles.

use std::fmt;

use serde::Serialize;
use thiserror::Error;

use crate::constitutive::{MemoryKernel, StrainForm, StrainMeasure};
use crate::history::{DeformationStats, VelocitySample};
use crate::spectral::{Spectral, SpectralField, TensorField2};
use crate::tensor::Mat2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OracleError {
    #[error("adaptive quadrature failed on [{a}, {b}] (estimate {estimate:.3e})")]
    QuadratureFailure { a: f64, b: f64, estimate: f64 },
    #[error("shear rate must be finite, got {0}")]
    BadShearRate(f64),
    #[error("non-finite oracle stress at t = {0}")]
    NonFinite(f64),
    #[error("need at least 10 records, got {0}")]
    TooFewRecords(usize),
    #[error("relaxation time and viscosity must be positive")]
    BadParameters,
}

/// Violated monitors for one record.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct Flags {
    pub stress: bool,
    pub det: bool,
    pub norm: bool,
    pub divergence: bool,
    pub gradient: bool,
}

impl Flags {
    pub fn any(&self) -> bool {
        self.stress || self.det || self.norm || self.divergence || self.gradient
    }
}

impl fmt::Display for Flags {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = [
            (self.stress, "stress"),
            (self.det, "det"),
            (self.norm, "norm"),
            (self.divergence, "div"),
            (self.gradient, "gradient"),
        ]
        .iter()
        .filter(|(on, _)| *on)
        .map(|(_, n)| *n)
        .collect();
        if names.is_empty() {
            write!(f, "ok")
        } else {
            write!(f, "{}", names.join("|"))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DiagnosticsRecord {
    pub t: f64,
    pub stress_sup: f64,
    pub min_det_g: f64,
    pub max_det_g: f64,
    pub min_abs_g: f64,
    pub energy: f64,
    pub gradu_sup: f64,
    pub divu_sup: f64,
    pub y_value: f64,
    pub y_integrand: f64,
    pub stress_grad_norm: f64,
    pub flags: Flags,
}

impl DiagnosticsRecord {
    /// `max(1 − min det G, max det G − 1)`
    pub fn det_deviation(&self) -> f64 {
        (1.0 - self.min_det_g).max(self.max_det_g - 1.0)
    }

    pub fn is_finite(&self) -> bool {
        [
            self.t,
            self.stress_sup,
            self.min_det_g,
            self.max_det_g,
            self.min_abs_g,
            self.energy,
            self.gradu_sup,
            self.divu_sup,
            self.y_value,
            self.y_integrand,
            self.stress_grad_norm,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// Thresholds for the monitors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MonitorConfig {
    /// Lower bound on `det G₀`.
    pub mu: f64,
    pub det_tol: f64,
    pub norm_tol: f64,
    pub div_tol: f64,
    /// Discrete `‖τ‖∞` bound, when the measure declares one.
    pub stress_bound: Option<f64>,
    /// `S′∞`, when declared.
    pub gradient_constant: Option<f64>,
    pub gradient_tol: f64,
    pub q: f64,
    pub r: f64,
}

impl MonitorConfig {
    pub fn new(mu: f64, q: f64, r: f64) -> Self {
        Self {
            mu,
            det_tol: 1e-2,
            norm_tol: 1e-2,
            div_tol: 1e-10,
            stress_bound: None,
            gradient_constant: None,
            gradient_tol: 1e-6,
            q,
            r,
        }
    }

    pub fn det_floor(&self) -> f64 {
        self.mu.min(1.0) - self.det_tol
    }

    pub fn norm_floor(&self) -> f64 {
        (2.0 * self.mu.min(1.0)).sqrt() - self.norm_tol
    }
}

/// Everything [`monitor`] reads, captured at one instant.
#[derive(Debug, Clone, Copy)]
pub struct MonitorInput<'a> {
    pub t: f64,
    pub u: &'a VelocitySample,
    pub tau: &'a TensorField2,
    pub deformation: DeformationStats,
    pub y_value: f64,
    pub y_integrand: f64,
}

/// Computes a record and its violation flags.
pub fn monitor(sp: &Spectral, input: MonitorInput<'_>, cfg: &MonitorConfig) -> DiagnosticsRecord {
    let u = &input.u.u;
    let stress_sup = input.tau.sup_norm();
    let gradu_sup = input.u.grad.sup_norm();
    let divu_sup = input
        .u
        .grad
        .comp(0)
        .iter()
        .zip(input.u.grad.comp(3))
        .map(|(a, b)| (a + b).abs())
        .fold(0.0, f64::max);
    let stress_grad_norm = crate::stress::stress_gradient_norm(sp, input.tau, cfg.q);
    let d = input.deformation;
    let flags = Flags {
        stress: cfg.stress_bound.is_some_and(|b| stress_sup > b),
        det: d.min_det < cfg.det_floor(),
        norm: d.min_norm < cfg.norm_floor(),
        divergence: divu_sup > cfg.div_tol * u.sup_norm().max(1.0),
        gradient: cfg.gradient_constant.is_some_and(|c| {
            stress_grad_norm.powf(cfg.r) > c.powf(cfg.r) * input.y_integrand + cfg.gradient_tol
        }),
    };
    DiagnosticsRecord {
        t: input.t,
        stress_sup,
        min_det_g: d.min_det,
        max_det_g: d.max_det,
        min_abs_g: d.min_norm,
        energy: crate::flow::kinetic_energy(u),
        gradu_sup,
        divu_sup,
        y_value: input.y_value,
        y_integrand: input.y_integrand,
        stress_grad_norm,
        flags,
    }
}

/// Differential Oldroyd-B stress, stepped alongside the integral model.
#[derive(Debug, Clone)]
pub struct OracleState {
    pub tau: TensorField2,
    pub lambda: f64,
    pub mu_p: f64,
    pub t: f64,
}

impl OracleState {
    pub fn new(tau: TensorField2, lambda: f64, mu_p: f64) -> Result<Self, OracleError> {
        if !(lambda > 0.0 && mu_p > 0.0) {
            return Err(OracleError::BadParameters);
        }
        Ok(Self {
            tau,
            lambda,
            mu_p,
            t: 0.0,
        })
    }
}

/// `−u·∇τ + Γᵀτ + τΓ + (2μ_p D − τ)/λ` with `Γ_{ℓk} = ∂_ℓ u_k`, dealiased.
fn oldroyd_rhs(sp: &Spectral, tau: &TensorField2, v: &VelocitySample, lambda: f64, mu_p: f64) -> TensorField2 {
    let grid = sp.grid();
    let th = sp.forward(tau);
    let mut dth = SpectralField::<4>::zeros(&grid);
    let mut out = TensorField2::zeros(&grid);
    for dir in 1..=2 {
        for c in 0..4 {
            sp.derivative_spec(th.comp(c), dir, dth.comp_mut(c));
        }
        let d = sp.inverse(&dth);
        let ud = v.u.comp(dir - 1);
        for c in 0..4 {
            for ((o, &w), &g) in out.comp_mut(c).iter_mut().zip(ud).zip(d.comp(c)) {
                *o -= w * g;
            }
        }
    }
    for p in 0..grid.points() {
        let t = tau.mat(p);
        let g = v.grad.mat(p);
        let d = (g + g.transpose()) * 0.5;
        let r = g.transpose().matmul(&t) + t.matmul(&g) + (d * (2.0 * mu_p) - t) * (1.0 / lambda);
        out.set_mat(p, out.mat(p) + r);
    }
    let mut s = sp.forward(&out);
    for c in 0..4 {
        sp.dealias_spec(s.comp_mut(c));
    }
    sp.inverse(&s)
}

/// Heun step of the upper-convected Maxwell law with velocities at both ends.
pub fn oldroyd_differential_step(
    sp: &Spectral,
    o: &mut OracleState,
    v0: &VelocitySample,
    v1: &VelocitySample,
    dt: f64,
) -> Result<(), OracleError> {
    let k1 = oldroyd_rhs(sp, &o.tau, v0, o.lambda, o.mu_p);
    let mut star = o.tau.clone();
    star.axpy(dt, &k1);
    let k2 = oldroyd_rhs(sp, &star, v1, o.lambda, o.mu_p);
    o.tau.axpy(0.5 * dt, &k1);
    o.tau.axpy(0.5 * dt, &k2);
    o.t += dt;
    if !o.tau.is_finite() {
        return Err(OracleError::NonFinite(o.t));
    }
    Ok(())
}

/// Relative `L²` gap `‖a − b‖ / ‖b‖`.
pub fn relative_l2_gap(a: &TensorField2, b: &TensorField2) -> f64 {
    let mut d = a.clone();
    d.axpy(-1.0, b);
    d.l2_norm() / b.l2_norm().max(f64::MIN_POSITIVE)
}

/// Steady simple-shear stress `∫₀^∞ m(s) S([[1,0],[γ̇s,1]]) ds` by adaptive
/// double-exponential quadrature on doubling panels, to absolute `tol`.
pub fn steady_shear_stress(
    measure: &StrainMeasure,
    kernel: &MemoryKernel,
    rate: f64,
    tol: f64,
) -> Result<Mat2, OracleError> {
    if !rate.is_finite() {
        return Err(OracleError::BadShearRate(rate));
    }
    let weighted = !matches!(measure.form(), StrainForm::NonSeparable(_));
    let integrand = |s: f64, c: usize| -> f64 {
        let g = Mat2::new(1.0, 0.0, rate * s, 1.0);
        if weighted {
            let s = if kernel.is_singular() { s.max(f64::MIN_POSITIVE) } else { s };
            kernel.density_unchecked(s) * measure.eval(&g).0[c]
        } else {
            measure.eval_at_age(s, &g).0[c]
        }
    };
    let panel_tol = tol / 64.0;
    let mut out = [0.0; 4];
    let mut a = 0.0;
    let mut b = kernel.max_relaxation_time().clamp(1e-3, 1.0);
    let mut quiet = 0;
    for _ in 0..200 {
        let mut biggest: f64 = 0.0;
        for (c, o) in out.iter_mut().enumerate() {
            let r = quadrature::integrate(|s| integrand(s, c), a, b, panel_tol);
            if !r.integral.is_finite() || !(r.error_estimate <= panel_tol * 10.0) {
                return Err(OracleError::QuadratureFailure {
                    a,
                    b,
                    estimate: r.error_estimate,
                });
            }
            *o += r.integral;
            biggest = biggest.max(r.integral.abs());
        }
        quiet = if biggest < panel_tol * 1e-2 { quiet + 1 } else { 0 };
        if quiet >= 3 {
            return Ok(Mat2(out));
        }
        a = b;
        b *= 2.0;
    }
    Err(OracleError::QuadratureFailure {
        a,
        b,
        estimate: f64::INFINITY,
    })
}

/// Closed-form Oldroyd-B (UCM) steady shear stress.
pub fn ucm_viscometric(mu_p: f64, lambda: f64, rate: f64) -> Mat2 {
    Mat2::new(2.0 * mu_p * lambda * rate * rate, mu_p * rate, mu_p * rate, 0.0)
}

/// Series-level verdict on the monitored bounds.
#[derive(Debug, Clone, Serialize)]
pub struct BoundReport {
    pub records: usize,
    pub stress_violations: usize,
    pub gradient_violations: usize,
    pub divergence_violations: usize,
    pub min_det: f64,
    pub max_det_deviation: f64,
    pub min_abs_g: f64,
    pub det_ok: bool,
    pub norm_ok: bool,
    pub y_monotone: bool,
    pub y_finite: bool,
    /// Least-squares slope of `ln ln(e + y)` against `t`; reported only.
    pub loglog_slope: f64,
    pub failures: Vec<String>,
    pub pass: bool,
}

pub fn theorem_bound_report(
    records: &[DiagnosticsRecord],
    cfg: &MonitorConfig,
) -> Result<BoundReport, OracleError> {
    if records.len() < 10 {
        return Err(OracleError::TooFewRecords(records.len()));
    }
    let stress_violations = records.iter().filter(|r| r.flags.stress).count();
    let gradient_violations = records.iter().filter(|r| r.flags.gradient).count();
    let divergence_violations = records.iter().filter(|r| r.flags.divergence).count();
    let min_det = records.iter().map(|r| r.min_det_g).fold(f64::INFINITY, f64::min);
    let max_det_deviation = records.iter().map(|r| r.det_deviation()).fold(0.0, f64::max);
    let min_abs_g = records.iter().map(|r| r.min_abs_g).fold(f64::INFINITY, f64::min);
    let det_ok = min_det >= cfg.det_floor();
    let norm_ok = min_abs_g >= cfg.norm_floor();
    let y_monotone = records.windows(2).all(|w| w[1].y_value >= w[0].y_value);
    let y_finite = records.iter().all(|r| r.y_value.is_finite());

    let pts: Vec<(f64, f64)> = records
        .iter()
        .map(|r| (r.t, (std::f64::consts::E + r.y_value).ln().ln()))
        .collect();
    let n = pts.len() as f64;
    let (mt, my) = pts.iter().fold((0.0, 0.0), |(a, b), (t, y)| (a + t / n, b + y / n));
    let (sxy, sxx) = pts
        .iter()
        .fold((0.0, 0.0), |(a, b), (t, y)| (a + (t - mt) * (y - my), b + (t - mt) * (t - mt)));
    let loglog_slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };

    let mut failures = Vec::new();
    if stress_violations > 0 {
        failures.push(format!("stress bound exceeded at {stress_violations} records"));
    }
    if gradient_violations > 0 {
        failures.push(format!("gradient control violated at {gradient_violations} records"));
    }
    if divergence_violations > 0 {
        failures.push(format!("divergence above tolerance at {divergence_violations} records"));
    }
    if !det_ok {
        failures.push(format!("min det G = {min_det:.6} below {:.6}", cfg.det_floor()));
    }
    if !norm_ok {
        failures.push(format!("min |G| = {min_abs_g:.6} below {:.6}", cfg.norm_floor()));
    }
    if !y_monotone {
        failures.push("y not monotone".to_string());
    }
    if !y_finite {
        failures.push("y not finite".to_string());
    }
    Ok(BoundReport {
        records: records.len(),
        stress_violations,
        gradient_violations,
        divergence_violations,
        min_det,
        max_det_deviation,
        min_abs_g,
        det_ok,
        norm_ok,
        y_monotone,
        y_finite,
        loglog_slope,
        pass: failures.is_empty(),
        failures,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constitutive::{model_catalog, ModelParams};
    use crate::history::{DeformationHistory, InitHistory};
    use crate::spectral::{TorusGrid, VectorField};

    fn quiet_record(t: f64) -> DiagnosticsRecord {
        DiagnosticsRecord {
            t,
            stress_sup: 0.0,
            min_det_g: 1.0,
            max_det_g: 1.0,
            min_abs_g: 2f64.sqrt(),
            energy: 0.0,
            gradu_sup: 0.0,
            divu_sup: 0.0,
            y_value: 0.0,
            y_integrand: 0.0,
            stress_grad_norm: 0.0,
            flags: Flags::default(),
        }
    }

    #[test]
    fn quiescent_monitor() {
        let g = TorusGrid::new(16).unwrap();
        let sp = Spectral::new(g);
        let v = VelocitySample::zero(&g);
        let tau = TensorField2::zeros(&g);
        let k = crate::constitutive::MemoryKernel::single_exponential(1.0).unwrap();
        let ages = crate::age::build_age_grid(&k, 0.1, 1e-3, 1000).unwrap();
        let h = DeformationHistory::init(InitHistory::Identity, &g, &ages, None).unwrap();
        let cfg = MonitorConfig::new(1.0, 8.0, 4.0);
        let r = monitor(
            &sp,
            MonitorInput {
                t: 0.0,
                u: &v,
                tau: &tau,
                deformation: h.stats(),
                y_value: 0.0,
                y_integrand: 0.0,
            },
            &cfg,
        );
        assert_eq!(r, quiet_record(0.0).with_energy(0.0));
        assert!(!r.flags.any());
        assert_eq!(r.flags.to_string(), "ok");

        let mut hb = h.clone();
        hb.set_slice(2, TensorField2::constant(&g, Mat2::new(1.0, 1.0, 1.0, 1.0)));
        let r = monitor(
            &sp,
            MonitorInput {
                t: 0.0,
                u: &v,
                tau: &tau,
                deformation: hb.stats(),
                y_value: 0.0,
                y_integrand: 0.0,
            },
            &cfg,
        );
        assert!(r.flags.det);
        assert_eq!(r.flags.to_string(), "det");
    }

    impl DiagnosticsRecord {
        fn with_energy(mut self, e: f64) -> Self {
            self.energy = e;
            self
        }
    }

    #[test]
    fn pure_relaxation() {
        let g = TorusGrid::new(16).unwrap();
        let sp = Spectral::new(g);
        let t0 = TensorField2::constant(&g, Mat2::new(1.0, 0.5, 0.5, -2.0));
        let mut o = OracleState::new(t0.clone(), 2.0, 1.0).unwrap();
        let v = VelocitySample::zero(&g);
        let dt = 1e-3;
        for _ in 0..1000 {
            oldroyd_differential_step(&sp, &mut o, &v, &v, dt).unwrap();
        }
        let mut expect = t0;
        expect.scale((-0.5f64).exp());
        assert!(o.tau.max_abs_diff(&expect) < 1e-7);
    }

    #[test]
    fn homogeneous_shear_reaches_viscometric_state() {
        let g = TorusGrid::new(16).unwrap();
        let sp = Spectral::new(g);
        let mut grad = TensorField2::zeros(&g);
        grad.comp_mut(2).fill(1.0);
        let v = VelocitySample {
            u: VectorField::zeros(&g),
            grad,
        };
        let mut o = OracleState::new(TensorField2::zeros(&g), 1.0, 1.0).unwrap();
        for _ in 0..3000 {
            oldroyd_differential_step(&sp, &mut o, &v, &v, 1e-2).unwrap();
        }
        let t = o.tau.mat(3);
        assert!((t - ucm_viscometric(1.0, 1.0, 1.0)).norm() < 1e-9, "{t:?}");
    }

    #[test]
    fn steady_shear_oracle() {
        let p = ModelParams::default();
        let (k, ob) = model_catalog("oldroyd-b", &p).unwrap();
        assert!(steady_shear_stress(&ob, &k, 0.0, 1e-10).unwrap().norm() < 1e-14);
        let t = steady_shear_stress(&ob, &k, 1.0, 1e-10).unwrap();
        assert!((t - ucm_viscometric(1.0, 1.0, 1.0)).norm() < 1e-12, "{t:?}");
        let (k, psm) = model_catalog("psm-raw", &p).unwrap();
        let t = steady_shear_stress(&psm, &k, 1.0, 1e-10).unwrap();
        let direct = quadrature::integrate(|s: f64| (-s).exp() * s / (3.0 + s * s), 0.0, 60.0, 1e-13).integral;
        assert!((t.at(0, 1) - direct).abs() < 1e-10);
    }

    #[test]
    fn report_on_quiescent_and_broken_series() {
        let cfg = MonitorConfig::new(1.0, 8.0, 4.0);
        let quiet: Vec<_> = (0..12).map(|i| quiet_record(i as f64 * 0.1)).collect();
        let rep = theorem_bound_report(&quiet, &cfg).unwrap();
        assert!(rep.pass && rep.loglog_slope == 0.0);
        let mut broken = quiet.clone();
        broken[5].y_value = 1.0;
        let rep = theorem_bound_report(&broken, &cfg).unwrap();
        assert!(!rep.pass && rep.failures.iter().any(|f| f == "y not monotone"));
        assert!(matches!(
            theorem_bound_report(&quiet[..4], &cfg),
            Err(OracleError::TooFewRecords(4))
        ));
    }
}
