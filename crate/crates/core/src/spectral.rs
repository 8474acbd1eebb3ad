//! Fields on the periodic square `[0, 2π)²` and Fourier-space operators.
//!
//! Physical data is row-major: point `(i1, i2)` sits at `i1·N + i2`, with
//! `x_a = 2π i_a / N`. Spectra use half-plane (Hermitian) storage with
//! `k2 ∈ 0..=N/2` outermost: mode `(k1, k2)` sits at `k2_idx·N + k1_idx`.
//! The forward transform is unnormalized; the inverse divides by `N²`.

use std::f64::consts::TAU;
use std::fmt;
use std::sync::Arc;

use realfft::{ComplexToReal, RealFftPlanner, RealToComplex};
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use thiserror::Error;

use crate::tensor::Mat2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GridError {
    #[error("grid size must be a power of two and at least 16, got {0}")]
    BadSize(usize),
}

/// Uniform `N × N` discretization of the torus.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TorusGrid {
    n: usize,
}

impl TorusGrid {
    pub fn new(n: usize) -> Result<Self, GridError> {
        if n < 16 || !n.is_power_of_two() {
            return Err(GridError::BadSize(n));
        }
        Ok(Self { n })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn points(&self) -> usize {
        self.n * self.n
    }

    pub fn spacing(&self) -> f64 {
        TAU / self.n as f64
    }

    /// Number of stored `k2` columns, `N/2 + 1`.
    pub fn half(&self) -> usize {
        self.n / 2 + 1
    }

    pub fn modes(&self) -> usize {
        self.half() * self.n
    }

    /// Coordinates of point `idx`.
    pub fn coords(&self, idx: usize) -> (f64, f64) {
        let h = self.spacing();
        ((idx / self.n) as f64 * h, (idx % self.n) as f64 * h)
    }

    /// Largest retained wavenumber under the two-thirds rule.
    pub fn dealias_cutoff(&self) -> usize {
        self.n / 3
    }
}

/// Real field with `C` components per point.
#[derive(Clone, PartialEq)]
pub struct Field<const C: usize> {
    n: usize,
    comps: [Vec<f64>; C],
}

pub type ScalarField = Field<1>;
pub type VectorField = Field<2>;
/// Component `2i + j` holds entry `(i, j)`.
pub type TensorField2 = Field<4>;

impl<const C: usize> fmt::Debug for Field<C> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Field<{C}>(N={}, sup={:.3e})", self.n, self.sup_norm())
    }
}

impl<const C: usize> Field<C> {
    pub fn zeros(grid: &TorusGrid) -> Self {
        Self {
            n: grid.n(),
            comps: std::array::from_fn(|_| vec![0.0; grid.points()]),
        }
    }

    pub fn from_fn(grid: &TorusGrid, f: impl Fn(f64, f64) -> [f64; C]) -> Self {
        let mut out = Self::zeros(grid);
        for idx in 0..grid.points() {
            let (x1, x2) = grid.coords(idx);
            for (c, v) in f(x1, x2).into_iter().enumerate() {
                out.comps[c][idx] = v;
            }
        }
        out
    }

    pub fn from_components(grid: &TorusGrid, comps: [Vec<f64>; C]) -> Self {
        assert!(comps.iter().all(|c| c.len() == grid.points()), "component length");
        Self { n: grid.n(), comps }
    }

    pub fn grid(&self) -> TorusGrid {
        TorusGrid { n: self.n }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn len(&self) -> usize {
        self.n * self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn comp(&self, c: usize) -> &[f64] {
        &self.comps[c]
    }

    pub fn comp_mut(&mut self, c: usize) -> &mut [f64] {
        &mut self.comps[c]
    }

    pub fn comps(&self) -> &[Vec<f64>; C] {
        &self.comps
    }

    pub fn into_components(self) -> [Vec<f64>; C] {
        self.comps
    }

    pub fn point(&self, idx: usize) -> [f64; C] {
        std::array::from_fn(|c| self.comps[c][idx])
    }

    /// Euclidean (Frobenius) magnitude at point `idx`.
    pub fn magnitude(&self, idx: usize) -> f64 {
        self.comps.iter().map(|c| c[idx] * c[idx]).sum::<f64>().sqrt()
    }

    pub fn sup_norm(&self) -> f64 {
        (0..self.len()).map(|i| self.magnitude(i)).fold(0.0, f64::max)
    }

    /// Discrete `L^q` norm `(2π)^{2/q} · mean(|f|^q)^{1/q}` of the pointwise magnitude.
    pub fn lq_norm(&self, q: f64) -> f64 {
        lq_norm_of(&(0..self.len()).map(|i| self.magnitude(i)).collect::<Vec<_>>(), q)
    }

    pub fn l2_norm(&self) -> f64 {
        self.lq_norm(2.0)
    }

    pub fn is_finite(&self) -> bool {
        self.comps.iter().all(|c| c.iter().all(|v| v.is_finite()))
    }

    pub fn scale(&mut self, a: f64) {
        for c in &mut self.comps {
            c.iter_mut().for_each(|v| *v *= a);
        }
    }

    /// `self += a·other`
    pub fn axpy(&mut self, a: f64, other: &Self) {
        for (c, o) in self.comps.iter_mut().zip(&other.comps) {
            c.iter_mut().zip(o).for_each(|(v, w)| *v += a * w);
        }
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.comps
            .iter()
            .zip(&other.comps)
            .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max)
    }

    pub fn mean(&self) -> [f64; C] {
        std::array::from_fn(|c| self.comps[c].iter().sum::<f64>() / self.len() as f64)
    }
}

/// `(2π)^{2/q} · mean(|v|^q)^{1/q}` for pointwise magnitudes `v`.
pub fn lq_norm_of(values: &[f64], q: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    if q.is_infinite() {
        return values.iter().fold(0.0, |m, v| m.max(v.abs()));
    }
    let mean = values.iter().map(|v| v.abs().powf(q)).sum::<f64>() / values.len() as f64;
    TAU.powf(2.0 / q) * mean.powf(1.0 / q)
}

impl TensorField2 {
    pub fn constant(grid: &TorusGrid, m: Mat2) -> Self {
        Self {
            n: grid.n(),
            comps: std::array::from_fn(|c| vec![m.0[c]; grid.points()]),
        }
    }

    pub fn from_mat_fn(grid: &TorusGrid, f: impl Fn(f64, f64) -> Mat2) -> Self {
        Self::from_fn(grid, |x1, x2| f(x1, x2).0)
    }

    #[inline]
    pub fn mat(&self, idx: usize) -> Mat2 {
        Mat2(self.point(idx))
    }

    #[inline]
    pub fn set_mat(&mut self, idx: usize, m: Mat2) {
        for c in 0..4 {
            self.comps[c][idx] = m.0[c];
        }
    }
}

/// Spectral coefficients of a `C`-component field.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralField<const C: usize> {
    n: usize,
    comps: [Vec<Complex64>; C],
}

impl<const C: usize> SpectralField<C> {
    pub fn zeros(grid: &TorusGrid) -> Self {
        Self {
            n: grid.n(),
            comps: std::array::from_fn(|_| vec![Complex64::new(0.0, 0.0); grid.modes()]),
        }
    }

    pub fn comp(&self, c: usize) -> &[Complex64] {
        &self.comps[c]
    }

    pub fn comp_mut(&mut self, c: usize) -> &mut [Complex64] {
        &mut self.comps[c]
    }

    pub fn comps_mut(&mut self) -> &mut [Vec<Complex64>; C] {
        &mut self.comps
    }
}

/// Scratch buffers for one thread of transforms.
pub struct Workspace {
    rows: Vec<Complex64>,
    row_real: Vec<f64>,
    scratch_real: Vec<Complex64>,
    scratch_cplx: Vec<Complex64>,
}

/// Transform plans, wavenumber tables and masks for one grid size.
#[derive(Clone)]
pub struct Spectral {
    grid: TorusGrid,
    r2c: Arc<dyn RealToComplex<f64>>,
    c2r: Arc<dyn ComplexToReal<f64>>,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
    /// `k1` by index, Nyquist as `+N/2`.
    k1: Vec<f64>,
    k2: Vec<f64>,
    /// Wavenumbers for odd derivatives, Nyquist zeroed.
    k1_odd: Vec<f64>,
    k2_odd: Vec<f64>,
    keep: Vec<bool>,
}

impl fmt::Debug for Spectral {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Spectral(N={})", self.grid.n())
    }
}

impl Spectral {
    pub fn new(grid: TorusGrid) -> Self {
        let n = grid.n();
        let mut rp = RealFftPlanner::<f64>::new();
        let mut cp = FftPlanner::<f64>::new();
        let k1: Vec<f64> = (0..n)
            .map(|i| if i <= n / 2 { i as f64 } else { i as f64 - n as f64 })
            .collect();
        let k2: Vec<f64> = (0..grid.half()).map(|i| i as f64).collect();
        let nyq = (n / 2) as f64;
        let odd = |k: &f64| if k.abs() == nyq { 0.0 } else { *k };
        let cut = grid.dealias_cutoff() as f64;
        let keep = (0..grid.modes())
            .map(|m| k1[m % n].abs() <= cut && k2[m / n] <= cut)
            .collect();
        Self {
            grid,
            r2c: rp.plan_fft_forward(n),
            c2r: rp.plan_fft_inverse(n),
            fwd: cp.plan_fft_forward(n),
            inv: cp.plan_fft_inverse(n),
            k1_odd: k1.iter().map(odd).collect(),
            k2_odd: k2.iter().map(odd).collect(),
            k1,
            k2,
            keep,
        }
    }

    pub fn grid(&self) -> TorusGrid {
        self.grid
    }

    pub fn workspace(&self) -> Workspace {
        let n = self.grid.n();
        let scr = self
            .r2c
            .get_scratch_len()
            .max(self.c2r.get_scratch_len());
        let cplx = self
            .fwd
            .get_inplace_scratch_len()
            .max(self.inv.get_inplace_scratch_len());
        Workspace {
            rows: vec![Complex64::new(0.0, 0.0); self.grid.modes()],
            row_real: vec![0.0; n],
            scratch_real: vec![Complex64::new(0.0, 0.0); scr],
            scratch_cplx: vec![Complex64::new(0.0, 0.0); cplx],
        }
    }

    /// Wavenumber pair of mode index `m`.
    #[inline]
    pub fn wavenumber(&self, m: usize) -> (f64, f64) {
        let n = self.grid.n();
        (self.k1[m % n], self.k2[m / n])
    }

    /// Wavenumber pair used by first derivatives (Nyquist zeroed).
    #[inline]
    pub fn wavenumber_odd(&self, m: usize) -> (f64, f64) {
        let n = self.grid.n();
        (self.k1_odd[m % n], self.k2_odd[m / n])
    }

    #[inline]
    pub fn is_kept(&self, m: usize) -> bool {
        self.keep[m]
    }

    /// Hermitian multiplicity of mode index `m` in the full spectrum.
    #[inline]
    pub fn multiplicity(&self, m: usize) -> f64 {
        let k2 = m / self.grid.n();
        if k2 == 0 || k2 == self.grid.n() / 2 {
            1.0
        } else {
            2.0
        }
    }

    /// Forward transform of one real component.
    pub fn forward_into(&self, ws: &mut Workspace, input: &[f64], out: &mut [Complex64]) {
        let n = self.grid.n();
        let h = self.grid.half();
        debug_assert_eq!(input.len(), n * n);
        debug_assert_eq!(out.len(), h * n);
        for i1 in 0..n {
            ws.row_real.copy_from_slice(&input[i1 * n..(i1 + 1) * n]);
            let row = &mut ws.rows[i1 * h..(i1 + 1) * h];
            self.r2c
                .process_with_scratch(&mut ws.row_real, row, &mut ws.scratch_real)
                .expect("buffer sizes match plan");
        }
        for i1 in 0..n {
            for k2 in 0..h {
                out[k2 * n + i1] = ws.rows[i1 * h + k2];
            }
        }
        self.fwd.process_with_scratch(out, &mut ws.scratch_cplx);
    }

    /// Normalized inverse transform of one component. `input` is left untouched.
    pub fn inverse_into(&self, ws: &mut Workspace, input: &[Complex64], out: &mut [f64]) {
        let n = self.grid.n();
        let h = self.grid.half();
        let mut cols = std::mem::take(&mut ws.rows);
        cols.copy_from_slice(input);
        self.inv.process_with_scratch(&mut cols, &mut ws.scratch_cplx);
        let norm = 1.0 / (n * n) as f64;
        let mut row = vec![Complex64::new(0.0, 0.0); h];
        for i1 in 0..n {
            for k2 in 0..h {
                row[k2] = cols[k2 * n + i1] * norm;
            }
            row[0].im = 0.0;
            row[h - 1].im = 0.0;
            self.c2r
                .process_with_scratch(&mut row, &mut out[i1 * n..(i1 + 1) * n], &mut ws.scratch_real)
                .expect("buffer sizes match plan");
        }
        ws.rows = cols;
    }

    pub fn forward<const C: usize>(&self, f: &Field<C>) -> SpectralField<C> {
        let mut ws = self.workspace();
        let mut out = SpectralField::zeros(&self.grid);
        for c in 0..C {
            self.forward_into(&mut ws, &f.comps[c], &mut out.comps[c]);
        }
        out
    }

    pub fn inverse<const C: usize>(&self, s: &SpectralField<C>) -> Field<C> {
        let mut ws = self.workspace();
        let mut out = Field::zeros(&self.grid);
        for c in 0..C {
            self.inverse_into(&mut ws, &s.comps[c], &mut out.comps[c]);
        }
        out
    }

    /// `out = i k_dir · input` with the Nyquist mode zeroed. `dir` is 1 or 2.
    pub fn derivative_spec(&self, input: &[Complex64], dir: usize, out: &mut [Complex64]) {
        for (m, (o, v)) in out.iter_mut().zip(input).enumerate() {
            let (k1, k2) = self.wavenumber_odd(m);
            let k = if dir == 1 { k1 } else { k2 };
            *o = Complex64::new(-k * v.im, k * v.re);
        }
    }

    pub fn dealias_spec(&self, s: &mut [Complex64]) {
        for (v, &keep) in s.iter_mut().zip(&self.keep) {
            if !keep {
                *v = Complex64::new(0.0, 0.0);
            }
        }
    }

    /// Mode-wise Leray projection of a vector spectrum.
    pub fn leray_spec(&self, v1: &mut [Complex64], v2: &mut [Complex64]) {
        for m in 0..v1.len() {
            let (k1, k2) = self.wavenumber_odd(m);
            let kk = k1 * k1 + k2 * k2;
            if kk == 0.0 {
                continue;
            }
            let dot = (v1[m] * k1 + v2[m] * k2) / kk;
            v1[m] -= dot * k1;
            v2[m] -= dot * k2;
        }
    }

    /// Derivative of every component in direction `dir` (1 or 2).
    pub fn spectral_derivative<const C: usize>(&self, f: &Field<C>, dir: usize) -> Field<C> {
        assert!(dir == 1 || dir == 2, "direction must be 1 or 2");
        let mut s = self.forward(f);
        let mut tmp = vec![Complex64::new(0.0, 0.0); self.grid.modes()];
        for c in s.comps.iter_mut() {
            self.derivative_spec(c, dir, &mut tmp);
            c.copy_from_slice(&tmp);
        }
        self.inverse(&s)
    }

    pub fn dealias<const C: usize>(&self, f: &Field<C>) -> Field<C> {
        let mut s = self.forward(f);
        for c in s.comps.iter_mut() {
            self.dealias_spec(c);
        }
        self.inverse(&s)
    }

    pub fn leray_project(&self, v: &VectorField) -> VectorField {
        let mut s = self.forward(v);
        let [a, b] = &mut s.comps;
        self.leray_spec(a, b);
        self.inverse(&s)
    }

    /// `∂_1 v_1 + ∂_2 v_2`
    pub fn divergence(&self, v: &VectorField) -> ScalarField {
        let s = self.forward(v);
        let mut out = SpectralField::<1>::zeros(&self.grid);
        for m in 0..self.grid.modes() {
            let (k1, k2) = self.wavenumber_odd(m);
            let z = s.comps[0][m] * k1 + s.comps[1][m] * k2;
            out.comps[0][m] = Complex64::new(-z.im, z.re);
        }
        self.inverse(&out)
    }

    /// Velocity gradient with component `2ℓ + k` equal to `∂_ℓ u_k`.
    pub fn gradient(&self, u: &VectorField) -> TensorField2 {
        let s = self.forward(u);
        let mut out = SpectralField::<4>::zeros(&self.grid);
        for l in 0..2 {
            for k in 0..2 {
                self.derivative_spec(&s.comps[k], l + 1, &mut out.comps[2 * l + k]);
            }
        }
        self.inverse(&out)
    }

    /// Row divergence `(div τ)_i = ∂_j τ_ij`.
    pub fn tensor_divergence(&self, tau: &TensorField2) -> VectorField {
        let s = self.forward(tau);
        let mut out = SpectralField::<2>::zeros(&self.grid);
        for m in 0..self.grid.modes() {
            let (k1, k2) = self.wavenumber_odd(m);
            for i in 0..2 {
                let z = s.comps[2 * i][m] * k1 + s.comps[2 * i + 1][m] * k2;
                out.comps[i][m] = Complex64::new(-z.im, z.re);
            }
        }
        self.inverse(&out)
    }

    /// `p = −(−Δ)⁻¹ div div (τ − u⊗u)` with zero mean.
    pub fn pressure_recover(&self, tau: &TensorField2, u: &VectorField) -> ScalarField {
        let grid = self.grid;
        let mut a = tau.clone();
        for idx in 0..grid.points() {
            let (u1, u2) = (u.comps[0][idx], u.comps[1][idx]);
            a.comps[0][idx] -= u1 * u1;
            a.comps[1][idx] -= u1 * u2;
            a.comps[2][idx] -= u2 * u1;
            a.comps[3][idx] -= u2 * u2;
        }
        let s = self.forward(&a);
        let mut p = SpectralField::<1>::zeros(&grid);
        for m in 0..grid.modes() {
            let (k1, k2) = self.wavenumber_odd(m);
            let kk = k1 * k1 + k2 * k2;
            if kk == 0.0 {
                continue;
            }
            let kak = s.comps[0][m] * (k1 * k1)
                + (s.comps[1][m] + s.comps[2][m]) * (k1 * k2)
                + s.comps[3][m] * (k2 * k2);
            p.comps[0][m] = kak / kk;
        }
        self.inverse(&p)
    }

    /// `e^{−η|k|² dt}` for mode index `m`.
    #[inline]
    pub fn viscous_factor(&self, m: usize, eta: f64, dt: f64) -> f64 {
        let (k1, k2) = self.wavenumber(m);
        (-eta * (k1 * k1 + k2 * k2) * dt).exp()
    }

    pub fn viscous_propagate(&self, u: &VectorField, eta: f64, dt: f64) -> VectorField {
        let mut s = self.forward(u);
        for c in s.comps.iter_mut() {
            for (m, v) in c.iter_mut().enumerate() {
                *v *= self.viscous_factor(m, eta, dt);
            }
        }
        self.inverse(&s)
    }

    /// `L²` norm from the coefficients, for Parseval checks.
    pub fn spectral_l2_norm<const C: usize>(&self, s: &SpectralField<C>) -> f64 {
        let n2 = (self.grid.points()) as f64;
        let total: f64 = s
            .comps
            .iter()
            .flat_map(|c| c.iter().enumerate().map(|(m, v)| self.multiplicity(m) * v.norm_sqr()))
            .sum();
        TAU * (total / (n2 * n2)).sqrt()
    }

    /// Relative sup of the spectral divergence, `‖div v‖∞ / max(‖v‖∞, tiny)`.
    pub fn relative_divergence(&self, v: &VectorField) -> f64 {
        let d = self.divergence(v).sup_norm();
        d / v.sup_norm().max(f64::MIN_POSITIVE)
    }
}
