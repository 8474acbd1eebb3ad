//! Convergence studies against exact, manufactured and self-referenced solutions.

use std::fmt;

use rustfft::num_complex::Complex64;
use serde::Serialize;
use thiserror::Error;

use crate::age::{build_age_grid, AgeError, AgeGrid, NeumaierSum};
use crate::cli::config::SimulationConfig;
use crate::cli::sim::{taylor_green, SimError, Simulation};
use crate::constitutive::{MemoryKernel, StrainMeasure};
use crate::diagnostics::BoundReport;
use crate::flow::{FlowError, FlowState, FlowStepper};
use crate::history::HomogeneousHistory;
use crate::spectral::{GridError, Spectral, SpectralField, TensorField2, TorusGrid};
use crate::tensor::Mat2;

#[derive(Debug, Error)]
pub enum ConvergenceError {
    #[error("need at least {need} levels, got {got}")]
    TooFewLevels { got: usize, need: usize },
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Age(#[from] AgeError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("start-up oracle quadrature did not converge on [0, {0}]")]
    Quadrature(f64),
}

/// One refinement level: grid size, flow step and number of age nodes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Level {
    pub n: usize,
    pub dt: f64,
    pub n_s: usize,
}

/// Least-squares slope of `ln e` against `ln h` and the RMS residual of the fit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FittedOrder {
    pub order: f64,
    pub residual: f64,
}

pub fn fit_order(h: &[f64], e: &[f64]) -> FittedOrder {
    let pts: Vec<(f64, f64)> = h
        .iter()
        .zip(e)
        .filter(|(&h, &e)| h > 0.0 && e > 0.0)
        .map(|(h, e)| (h.ln(), e.ln()))
        .collect();
    if pts.len() < 2 {
        return FittedOrder {
            order: f64::NAN,
            residual: f64::NAN,
        };
    }
    let n = pts.len() as f64;
    let (mx, my) = pts.iter().fold((0.0, 0.0), |(a, b), (x, y)| (a + x / n, b + y / n));
    let (sxy, sxx) = pts
        .iter()
        .fold((0.0, 0.0), |(a, b), (x, y)| (a + (x - mx) * (y - my), b + (x - mx).powi(2)));
    let order = sxy / sxx;
    let residual = (pts
        .iter()
        .map(|(x, y)| (y - my - order * (x - mx)).powi(2))
        .sum::<f64>()
        / n)
        .sqrt();
    FittedOrder { order, residual }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QuantityErrors {
    pub name: String,
    /// One entry per level (or per consecutive level pair for self-convergence).
    pub errors: Vec<f64>,
    pub fit: FittedOrder,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceReport {
    pub study: String,
    pub levels: Vec<Level>,
    /// Step sizes the errors are fitted against.
    pub steps: Vec<f64>,
    pub quantities: Vec<QuantityErrors>,
}

impl ConvergenceReport {
    fn new(study: &str, levels: Vec<Level>, steps: Vec<f64>) -> Self {
        Self {
            study: study.to_string(),
            levels,
            steps,
            quantities: Vec::new(),
        }
    }

    fn push(&mut self, name: &str, errors: Vec<f64>) {
        let fit = fit_order(&self.steps[..errors.len()], &errors);
        self.quantities.push(QuantityErrors {
            name: name.to_string(),
            errors,
            fit,
        });
    }

    pub fn quantity(&self, name: &str) -> Option<&QuantityErrors> {
        self.quantities.iter().find(|q| q.name == name)
    }

    /// Successive error ratios `e_i / e_{i+1}`.
    pub fn ratios(&self, name: &str) -> Vec<f64> {
        self.quantity(name)
            .map(|q| q.errors.windows(2).map(|w| w[0] / w[1]).collect())
            .unwrap_or_default()
    }

    /// Rows `study,quantity,level,n,dt,n_s,step,error`.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["study", "quantity", "level", "n", "dt", "n_s", "step", "error"])
            .expect("in-memory write");
        for q in &self.quantities {
            for (i, e) in q.errors.iter().enumerate() {
                let l = self.levels[i];
                w.write_record([
                    self.study.clone(),
                    q.name.clone(),
                    i.to_string(),
                    l.n.to_string(),
                    l.dt.to_string(),
                    l.n_s.to_string(),
                    self.steps[i].to_string(),
                    e.to_string(),
                ])
                .expect("in-memory write");
            }
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
    }
}

impl fmt::Display for ConvergenceReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{}", self.study)?;
        for (i, l) in self.levels.iter().enumerate() {
            writeln!(f, "  level {i}: N = {}, dt = {:.3e}, N_s = {}", l.n, l.dt, l.n_s)?;
        }
        for q in &self.quantities {
            let errs: Vec<String> = q.errors.iter().map(|e| format!("{e:.3e}")).collect();
            writeln!(
                f,
                "  {:<14} errors [{}]  order {:.3} (fit residual {:.2e})",
                q.name,
                errs.join(", "),
                q.fit.order,
                q.fit.residual
            )?;
        }
        Ok(())
    }
}

fn taylor_green_error(n: usize, eta: f64, dt: f64, t_final: f64) -> Result<f64, ConvergenceError> {
    let grid = TorusGrid::new(n)?;
    let sp = Spectral::new(grid);
    let fs = FlowStepper::new(sp.clone(), eta)?;
    let mut st = FlowState::new(&sp, 0.0, &taylor_green(&grid, 1.0));
    let steps = (t_final / dt).round() as usize;
    let zero = SpectralField::<2>::zeros(&grid);
    for _ in 0..steps {
        fs.step(&mut st, dt, &zero, None)?;
    }
    let exact = taylor_green(&grid, (-2.0 * eta * steps as f64 * dt).exp());
    Ok(st.u.max_abs_diff(&exact) / exact.sup_norm())
}

/// Unforced Taylor–Green decay against `e^{−2ηt}` for each `(N, dt)`.
pub fn taylor_green_decay_study(
    levels: &[(usize, f64)],
    eta: f64,
    t_final: f64,
) -> Result<ConvergenceReport, ConvergenceError> {
    if levels.len() < 3 {
        return Err(ConvergenceError::TooFewLevels {
            got: levels.len(),
            need: 3,
        });
    }
    let mut report = ConvergenceReport::new(
        "taylor-green decay",
        levels.iter().map(|&(n, dt)| Level { n, dt, n_s: 0 }).collect(),
        levels.iter().map(|l| l.1).collect(),
    );
    let errors = levels
        .iter()
        .map(|&(n, dt)| taylor_green_error(n, eta, dt, t_final))
        .collect::<Result<Vec<_>, _>>()?;
    report.push("u", errors);
    Ok(report)
}

/// Manufactured solution `u* = cos(t)·TG(x)` driven by the body force
/// `(2η cos t − sin t)·TG(x)`; the advection term is a pure gradient.
pub fn manufactured_study(
    n: usize,
    eta: f64,
    dts: &[f64],
    t_final: f64,
) -> Result<ConvergenceReport, ConvergenceError> {
    if dts.len() < 3 {
        return Err(ConvergenceError::TooFewLevels {
            got: dts.len(),
            need: 3,
        });
    }
    let grid = TorusGrid::new(n)?;
    let sp = Spectral::new(grid);
    let shape = sp.forward(&taylor_green(&grid, 1.0));
    let forcing = move |t: f64| -> SpectralField<2> {
        let a = 2.0 * eta * t.cos() - t.sin();
        let mut f = shape.clone();
        for c in 0..2 {
            f.comp_mut(c).iter_mut().for_each(|z: &mut Complex64| *z *= a);
        }
        f
    };
    let fs = FlowStepper::new(sp.clone(), eta)?;
    let zero = SpectralField::<2>::zeros(&grid);
    let mut errors = Vec::new();
    for &dt in dts {
        let steps = (t_final / dt).round() as usize;
        let mut st = FlowState::new(&sp, 0.0, &taylor_green(&grid, 1.0));
        for _ in 0..steps {
            fs.step(&mut st, dt, &zero, Some(&forcing))?;
        }
        let exact = taylor_green(&grid, st.t.cos());
        errors.push(st.u.max_abs_diff(&exact));
    }
    let mut report = ConvergenceReport::new(
        "manufactured forcing",
        dts.iter().map(|&dt| Level { n, dt, n_s: 0 }).collect(),
        dts.to_vec(),
    );
    report.push("u", errors);
    Ok(report)
}

/// `∫₀^{s_max} m(s) S(G(s)) ds` on the age grid for a homogeneous history.
pub fn homogeneous_stress(measure: &StrainMeasure, ages: &AgeGrid, h: &HomogeneousHistory) -> Mat2 {
    let kernel_weighted = measure.is_kernel_weighted();
    let mut acc = [NeumaierSum::default(); 4];
    for (j, g) in h.slices().enumerate() {
        let (w, s) = if kernel_weighted {
            (ages.node_masses()[j], measure.eval(g))
        } else {
            (ages.weights()[j], measure.eval_at_age(ages.nodes()[j], g))
        };
        for (a, v) in acc.iter_mut().zip(s.0) {
            a.add(w * v);
        }
    }
    Mat2(acc.map(|a| a.total()))
}

/// Shear-rate gradient `Γ` with `Γ_{21} = ∂₂u₁ = γ̇`.
pub fn shear_gradient(rate: f64) -> Mat2 {
    Mat2::new(0.0, 0.0, rate, 0.0)
}

/// Start-up of homogeneous shear from rest: `τ(t^n)` for `n = 0..=steps`.
pub fn shear_startup_series(
    kernel: &MemoryKernel,
    measure: &StrainMeasure,
    rate: f64,
    ds: f64,
    eps_tail: f64,
    steps: usize,
) -> Result<Vec<Mat2>, ConvergenceError> {
    let ages = build_age_grid(kernel, ds, eps_tail, 10_000_000)?;
    let mut h = HomogeneousHistory::identity(ages.len());
    let l = shear_gradient(rate);
    let mut out = vec![homogeneous_stress(measure, &ages, &h)];
    for _ in 0..steps {
        h.advance(&l, &l, ds);
        out.push(homogeneous_stress(measure, &ages, &h));
    }
    Ok(out)
}

/// Adaptive-quadrature stress for the exact start-up history
/// `G(s) = δ + min(s, t)·Γ`.
pub fn shear_startup_oracle(
    kernel: &MemoryKernel,
    measure: &StrainMeasure,
    rate: f64,
    t: f64,
    tol: f64,
) -> Result<Mat2, ConvergenceError> {
    let l = shear_gradient(rate);
    let g_at = |s: f64| Mat2::IDENTITY + l * s.min(t);
    let eval = |s: f64, g: &Mat2| -> Mat2 {
        if measure.is_kernel_weighted() {
            measure.eval(g) * kernel.density_unchecked(s.max(f64::MIN_POSITIVE))
        } else {
            measure.eval_at_age(s, g)
        }
    };
    let mut out = [0.0; 4];
    if t > 0.0 {
        for (c, o) in out.iter_mut().enumerate() {
            let r = quadrature::integrate(|s| eval(s, &g_at(s)).0[c], 0.0, t, tol);
            if !r.integral.is_finite() || r.error_estimate > 10.0 * tol {
                return Err(ConvergenceError::Quadrature(t));
            }
            *o = r.integral;
        }
    }
    let tail = if measure.is_kernel_weighted() {
        let mass = kernel
            .interval_mass(t, f64::INFINITY)
            .map_err(|_| ConvergenceError::Quadrature(t))?;
        measure.eval(&g_at(t)) * mass
    } else {
        Mat2::ZERO
    };
    Ok(Mat2(out) + tail)
}

/// Grid-quadrature start-up stress at `t_final` against the adaptive oracle,
/// for each age step in `ds_levels`.
pub fn shear_startup_study(
    kernel: &MemoryKernel,
    measure: &StrainMeasure,
    rate: f64,
    ds_levels: &[f64],
    t_final: f64,
) -> Result<ConvergenceReport, ConvergenceError> {
    if ds_levels.len() < 3 {
        return Err(ConvergenceError::TooFewLevels {
            got: ds_levels.len(),
            need: 3,
        });
    }
    let eps = 1e-12;
    let oracle = shear_startup_oracle(kernel, measure, rate, t_final, 1e-13)?;
    let mut levels = Vec::new();
    let (mut e12, mut e11) = (Vec::new(), Vec::new());
    for &ds in ds_levels {
        let steps = (t_final / ds).round() as usize;
        let ages = build_age_grid(kernel, ds, eps, 10_000_000)?;
        let tau = *shear_startup_series(kernel, measure, rate, ds, eps, steps)?
            .last()
            .expect("nonempty");
        levels.push(Level {
            n: 1,
            dt: ds,
            n_s: ages.len(),
        });
        e12.push((tau.at(0, 1) - oracle.at(0, 1)).abs());
        e11.push((tau.at(0, 0) - oracle.at(0, 0)).abs());
    }
    let mut report = ConvergenceReport::new(
        &format!("shear start-up ({}, rate {rate})", measure.name()),
        levels,
        ds_levels.to_vec(),
    );
    report.push("tau12", e12);
    report.push("tau11", e11);
    Ok(report)
}

/// Per-level outcome of a coupled run.
#[derive(Debug, Clone)]
pub struct CoupledLevel {
    pub level: Level,
    pub u: crate::spectral::VectorField,
    pub tau: TensorField2,
    pub det_drift: f64,
    pub y_final: f64,
    pub bounds: Option<BoundReport>,
}

/// Richardson self-convergence: level `ℓ` halves `dt` (and with it `Δs`)
/// `ℓ` times at fixed `N`. Errors are the `L²` differences between
/// consecutive levels.
pub fn coupled_self_convergence(
    cfg: &SimulationConfig,
    levels: usize,
) -> Result<(ConvergenceReport, Vec<CoupledLevel>), ConvergenceError> {
    if levels < 3 {
        return Err(ConvergenceError::TooFewLevels { got: levels, need: 3 });
    }
    let mut runs = Vec::new();
    for l in 0..levels {
        let mut c = cfg.clone();
        c.time.dt = cfg.time.dt / f64::powi(2.0, l as i32);
        c.oracle.enabled = false;
        let mut sim = Simulation::new(&c)?;
        let records: Vec<_> = sim.run_to_end()?.into_iter().map(|r| r.record).collect();
        let det_drift = records.iter().map(|r| r.det_deviation()).fold(0.0, f64::max);
        let y_final = records.last().map_or(0.0, |r| r.y_value);
        let bounds = crate::diagnostics::theorem_bound_report(&records, sim.monitor_config()).ok();
        runs.push(CoupledLevel {
            level: Level {
                n: c.grid.n,
                dt: c.time.dt,
                n_s: sim.ages().len(),
            },
            u: sim.velocity().clone(),
            tau: sim.stress().clone(),
            det_drift,
            y_final,
            bounds,
        });
    }
    let steps: Vec<f64> = runs.iter().map(|r| r.level.dt * cfg.time.age_step_factor as f64).collect();
    let mut report = ConvergenceReport::new(
        "coupled self-convergence",
        runs.iter().map(|r| r.level).collect(),
        steps,
    );
    let diff = |f: &dyn Fn(&CoupledLevel) -> f64| runs.windows(2).map(|w| f(&w[0]) - f(&w[1])).collect::<Vec<_>>();
    let du: Vec<f64> = runs
        .windows(2)
        .map(|w| {
            let mut d = w[0].u.clone();
            d.axpy(-1.0, &w[1].u);
            d.l2_norm()
        })
        .collect();
    let dtau: Vec<f64> = runs
        .windows(2)
        .map(|w| {
            let mut d = w[0].tau.clone();
            d.axpy(-1.0, &w[1].tau);
            d.l2_norm()
        })
        .collect();
    report.push("u", du);
    report.push("tau", dtau);
    report.push("y_final", diff(&|r| r.y_final).into_iter().map(f64::abs).collect());
    Ok((report, runs))
}
