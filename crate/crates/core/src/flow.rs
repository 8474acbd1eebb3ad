//! Velocity update for `∂t u + u·∇u + ∇p − ηΔu = div τ`, `div u = 0`.
//!
//! Integrating-factor Heun: with `E = exp(−η|k|² dt)` and the projected,
//! dealiased right side `N = P[−u·∇u + div τ + f]`,
//!
//! ```text
//! û* = E(û + dt N(û, t))
//! û' = E û + dt/2 (E N(û, t) + N(û*, t + dt))
//! ```

use rustfft::num_complex::Complex64;
use thiserror::Error;

use crate::spectral::{Spectral, SpectralField, TensorField2, TorusGrid, VectorField};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FlowError {
    #[error("viscosity must be positive, got {0}")]
    BadViscosity(f64),
    #[error("non-finite velocity at t = {t} (|u|∞ before the step {sup_before:.3e})")]
    NonFinite { t: f64, sup_before: f64 },
}

/// Spectral body force `f̂(t)`; used for manufactured solutions.
pub type Forcing<'a> = &'a (dyn Fn(f64) -> SpectralField<2> + Sync);

#[derive(Debug, Clone)]
pub struct FlowState {
    pub t: f64,
    pub u: VectorField,
}

impl FlowState {
    /// Projects `u` onto divergence-free fields.
    pub fn new(sp: &Spectral, t: f64, u: &VectorField) -> Self {
        Self {
            t,
            u: sp.leray_project(u),
        }
    }
}

#[derive(Debug, Clone)]
pub struct FlowStepper {
    sp: Spectral,
    eta: f64,
}

/// Lower bound on `|u|∞` in the CFL estimate.
pub const U_FLOOR: f64 = 1e-12;

/// `min(base_dt, safety·Δx / max(|u|∞, floor))`
pub fn cfl_dt(u: &VectorField, grid: &TorusGrid, safety: f64, base_dt: f64) -> f64 {
    let adv = safety * grid.spacing() / u.sup_norm().max(U_FLOOR);
    adv.min(base_dt)
}

/// `½ ‖u‖²` under the discrete `L²` norm.
pub fn kinetic_energy(u: &VectorField) -> f64 {
    0.5 * u.l2_norm().powi(2)
}

impl FlowStepper {
    pub fn new(sp: Spectral, eta: f64) -> Result<Self, FlowError> {
        if !(eta > 0.0 && eta.is_finite()) {
            return Err(FlowError::BadViscosity(eta));
        }
        Ok(Self { sp, eta })
    }

    pub fn spectral(&self) -> &Spectral {
        &self.sp
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    /// `div τ` in spectral form, held fixed over the substeps of one age step.
    pub fn stress_forcing(&self, tau: &TensorField2) -> SpectralField<2> {
        let s = self.sp.forward(tau);
        let mut out = SpectralField::<2>::zeros(&self.sp.grid());
        for m in 0..self.sp.grid().modes() {
            let (k1, k2) = self.sp.wavenumber_odd(m);
            for i in 0..2 {
                let z = s.comp(2 * i)[m] * k1 + s.comp(2 * i + 1)[m] * k2;
                out.comp_mut(i)[m] = Complex64::new(-z.im, z.re);
            }
        }
        out
    }

    /// `N(û) = P[−u·∇u + div τ + f]`, dealiased.
    fn rhs(&self, uhat: &SpectralField<2>, stress: &SpectralField<2>, force: Option<&SpectralField<2>>) -> SpectralField<2> {
        let sp = &self.sp;
        let grid = sp.grid();
        let u = sp.inverse(uhat);
        let mut du = SpectralField::<2>::zeros(&grid);
        let mut adv = VectorField::zeros(&grid);
        for dir in 1..=2 {
            for c in 0..2 {
                sp.derivative_spec(uhat.comp(c), dir, du.comp_mut(c));
            }
            let d = sp.inverse(&du);
            let ud = u.comp(dir - 1);
            for c in 0..2 {
                for ((a, &w), &g) in adv.comp_mut(c).iter_mut().zip(ud).zip(d.comp(c)) {
                    *a += w * g;
                }
            }
        }
        let mut n = sp.forward(&adv);
        for c in 0..2 {
            let nc = n.comp_mut(c);
            for (m, v) in nc.iter_mut().enumerate() {
                *v = stress.comp(c)[m] - *v;
                if let Some(f) = force {
                    *v += f.comp(c)[m];
                }
            }
            sp.dealias_spec(nc);
        }
        let [a, b] = n.comps_mut();
        sp.leray_spec(a, b);
        n
    }

    /// One step of size `dt` with frozen stress divergence `stress`.
    pub fn step(
        &self,
        state: &mut FlowState,
        dt: f64,
        stress: &SpectralField<2>,
        forcing: Option<Forcing>,
    ) -> Result<(), FlowError> {
        let sp = &self.sp;
        let modes = sp.grid().modes();
        let e: Vec<f64> = (0..modes).map(|m| sp.viscous_factor(m, self.eta, dt)).collect();
        let uhat = sp.forward(&state.u);
        let f0 = forcing.map(|f| f(state.t));
        let n0 = self.rhs(&uhat, stress, f0.as_ref());
        let mut ustar = uhat.clone();
        for c in 0..2 {
            for m in 0..modes {
                ustar.comp_mut(c)[m] = (uhat.comp(c)[m] + n0.comp(c)[m] * dt) * e[m];
            }
        }
        let f1 = forcing.map(|f| f(state.t + dt));
        let n1 = self.rhs(&ustar, stress, f1.as_ref());
        let mut unew = uhat;
        for c in 0..2 {
            for m in 0..modes {
                let v = unew.comp(c)[m];
                unew.comp_mut(c)[m] = v * e[m] + (n0.comp(c)[m] * e[m] + n1.comp(c)[m]) * (0.5 * dt);
            }
        }
        let u = sp.inverse(&unew);
        if !u.is_finite() {
            return Err(FlowError::NonFinite {
                t: state.t + dt,
                sup_before: state.u.sup_norm(),
            });
        }
        state.u = u;
        state.t += dt;
        Ok(())
    }

    /// Convenience wrapper taking the stress field directly.
    pub fn step_velocity(&self, state: &mut FlowState, tau: &TensorField2, dt: f64) -> Result<(), FlowError> {
        let s = self.stress_forcing(tau);
        self.step(state, dt, &s, None)
    }
}
