//! Age-structured deformation history `G(s_j, t, x)`.
//!
//! A step shifts every slice one age cell (the newest slice is `δ`) and then
//! integrates `∂t G + u·∇G = G·∇u` over one age step with Heun's method,
//! where `(G·∇u)_{jk} = G_{jℓ} ∂_ℓ u_k`.
//!
//! Slices are reference counted. Consecutive slices that hold identical data
//! share one allocation, so an initially quiescent history costs one field,
//! and every run of shared slices is advanced once.

use std::collections::VecDeque;
use std::sync::Arc;

use log::warn;
use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use thiserror::Error;

use crate::age::AgeGrid;
use crate::spectral::{lq_norm_of, Spectral, TensorField2, TorusGrid, VectorField, Workspace};
use crate::tensor::Mat2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HistoryError {
    #[error("initial history slice {slice} has det G = {det:.6e} at point {point}, below μ = {mu}")]
    DeterminantTooSmall {
        slice: usize,
        point: usize,
        det: f64,
        mu: f64,
    },
    #[error("expected {expected} history slices, got {got}")]
    SliceCount { got: usize, expected: usize },
    #[error("slice grid size {got} differs from the solver grid {expected}")]
    GridMismatch { got: usize, expected: usize },
    #[error("non-finite deformation in slice {slice} after step {step}")]
    NonFinite { step: u64, slice: usize },
}

/// Initial history specification.
#[derive(Debug, Clone)]
pub enum InitHistory {
    /// Quiescent past: every slice is `δ`.
    Identity,
    /// One field per age node.
    Explicit(Vec<TensorField2>),
}

/// Velocity and its gradient (component `2ℓ + k` is `∂_ℓ u_k`).
#[derive(Debug, Clone)]
pub struct VelocitySample {
    pub u: VectorField,
    pub grad: TensorField2,
}

impl VelocitySample {
    pub fn new(sp: &Spectral, u: &VectorField) -> Self {
        Self {
            u: u.clone(),
            grad: sp.gradient(u),
        }
    }

    pub fn zero(grid: &TorusGrid) -> Self {
        Self {
            u: VectorField::zeros(grid),
            grad: TensorField2::zeros(grid),
        }
    }
}

/// Extent statistics over all slices and points.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeformationStats {
    pub min_det: f64,
    pub max_det: f64,
    pub min_norm: f64,
    pub max_norm: f64,
}

#[derive(Debug, Clone)]
pub struct DeformationHistory {
    grid: TorusGrid,
    slices: VecDeque<Arc<TensorField2>>,
    identity: Arc<TensorField2>,
    generation: u64,
}

/// Probe output: `‖∇G/|G|‖_q` for each slice at the start of the step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepProbe {
    pub gradient_ratio_norms: Vec<f64>,
}

impl DeformationHistory {
    pub fn init(
        spec: InitHistory,
        grid: &TorusGrid,
        ages: &AgeGrid,
        mu: Option<f64>,
    ) -> Result<Self, HistoryError> {
        let identity = Arc::new(TensorField2::constant(grid, Mat2::IDENTITY));
        match spec {
            InitHistory::Identity => Ok(Self {
                grid: *grid,
                slices: std::iter::repeat_n(identity.clone(), ages.len()).collect(),
                identity,
                generation: 0,
            }),
            InitHistory::Explicit(fields) => {
                if fields.len() != ages.len() {
                    return Err(HistoryError::SliceCount {
                        got: fields.len(),
                        expected: ages.len(),
                    });
                }
                let floor = mu.unwrap_or(0.0);
                for (j, f) in fields.iter().enumerate() {
                    if f.n() != grid.n() {
                        return Err(HistoryError::GridMismatch {
                            got: f.n(),
                            expected: grid.n(),
                        });
                    }
                    for p in 0..grid.points() {
                        let det = f.mat(p).det();
                        let bad = if mu.is_some() { det < floor } else { det <= 0.0 } || det.is_nan();
                        if bad {
                            return Err(HistoryError::DeterminantTooSmall {
                                slice: j,
                                point: p,
                                det,
                                mu: floor,
                            });
                        }
                    }
                }
                let mut h = Self::from_slices(grid, fields, 0)?;
                if !Arc::ptr_eq(&h.slices[0], &h.identity) {
                    warn!("initial history slice 0 differs from δ; replacing it");
                    h.slices[0] = h.identity.clone();
                }
                Ok(h)
            }
        }
    }

    /// Builds a history from explicit slices, sharing storage between equal
    /// consecutive slices and with the identity.
    pub fn from_slices(
        grid: &TorusGrid,
        fields: Vec<TensorField2>,
        generation: u64,
    ) -> Result<Self, HistoryError> {
        let identity = Arc::new(TensorField2::constant(grid, Mat2::IDENTITY));
        let mut slices: VecDeque<Arc<TensorField2>> = VecDeque::with_capacity(fields.len());
        for f in fields {
            if f.n() != grid.n() {
                return Err(HistoryError::GridMismatch {
                    got: f.n(),
                    expected: grid.n(),
                });
            }
            let shared = match slices.back() {
                Some(prev) if **prev == f => prev.clone(),
                _ if *identity == f => identity.clone(),
                _ => Arc::new(f),
            };
            slices.push_back(shared);
        }
        Ok(Self {
            grid: *grid,
            slices,
            identity,
            generation,
        })
    }

    pub fn grid(&self) -> TorusGrid {
        self.grid
    }

    pub fn len(&self) -> usize {
        self.slices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slices.is_empty()
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn slice(&self, j: usize) -> &TensorField2 {
        &self.slices[j]
    }

    pub fn slices(&self) -> impl Iterator<Item = &TensorField2> {
        self.slices.iter().map(|a| a.as_ref())
    }

    /// Whether slice `j` is the shared identity field.
    pub fn is_identity_slice(&self, j: usize) -> bool {
        Arc::ptr_eq(&self.slices[j], &self.identity)
    }

    /// Maximal runs `(start, len)` of slices sharing one allocation.
    pub fn runs(&self) -> Vec<(usize, usize)> {
        let mut out: Vec<(usize, usize)> = Vec::new();
        for j in 0..self.slices.len() {
            match out.last_mut() {
                Some((s, l)) if Arc::ptr_eq(&self.slices[*s], &self.slices[j]) => *l += 1,
                _ => out.push((j, 1)),
            }
        }
        out
    }

    /// Number of distinct allocations held.
    pub fn unique_slices(&self) -> usize {
        self.runs().len()
    }

    /// Exact age shift: slice `j` takes slice `j−1`, slice 0 becomes `δ`,
    /// and the oldest slice is dropped.
    pub fn age_shift(&mut self) {
        self.slices.pop_back();
        self.slices.push_front(self.identity.clone());
    }

    /// Replaces slice `j`; used by tests and snapshot tooling.
    pub fn set_slice(&mut self, j: usize, f: TensorField2) {
        self.slices[j] = Arc::new(f);
    }

    /// Shift, then advance slices `1..` over `h` with velocity samples at
    /// the start and end of the step. With `probe_q`, also returns
    /// `‖∇G/|G|‖_q` for every slice as it was before the step.
    pub fn advance(
        &mut self,
        sp: &Spectral,
        v0: &VelocitySample,
        v1: &VelocitySample,
        h: f64,
        probe_q: Option<f64>,
    ) -> Result<Option<StepProbe>, HistoryError> {
        let n_s = self.slices.len();
        let dropped = self.slices[n_s - 1].clone();
        let dropped_unique = n_s < 2 || !Arc::ptr_eq(&dropped, &self.slices[n_s - 2]);
        self.age_shift();
        self.generation += 1;

        // runs among slices 1.. after the shift
        let mut runs: Vec<(usize, usize)> = Vec::new();
        for j in 1..n_s {
            match runs.last_mut() {
                Some((s, l)) if Arc::ptr_eq(&self.slices[*s], &self.slices[j]) => *l += 1,
                _ => runs.push((j, 1)),
            }
        }
        let inputs: Vec<Arc<TensorField2>> = runs.iter().map(|&(s, _)| self.slices[s].clone()).collect();
        let identity = self.identity.clone();
        let results: Vec<(Arc<TensorField2>, Option<f64>)> = inputs
            .par_iter()
            .map_init(
                || sp.workspace(),
                |ws, g| {
                    let (next, probe) = evolve_slice(sp, ws, g, v0, v1, h, probe_q);
                    (Arc::new(next), probe)
                },
            )
            .collect();

        let step = self.generation;
        for (r, ((start, len), (field, _))) in runs.iter().zip(&results).enumerate() {
            if !field.is_finite() {
                return Err(HistoryError::NonFinite { step, slice: runs[r].0 });
            }
            for j in *start..start + len {
                self.slices[j] = field.clone();
            }
        }

        let Some(q) = probe_q else {
            return Ok(None);
        };
        // map per-run probes back to the pre-shift slice indices
        let mut norms = vec![0.0; n_s];
        for ((start, len), (_, p)) in runs.iter().zip(&results) {
            for j in *start..start + len {
                norms[j - 1] = p.unwrap_or(0.0);
            }
        }
        let last = n_s - 1;
        norms[last] = if Arc::ptr_eq(&dropped, &identity) {
            0.0
        } else if dropped_unique {
            let mut ws = sp.workspace();
            gradient_ratio_norm(sp, &mut ws, &dropped, q)
        } else {
            norms[last - 1]
        };
        Ok(Some(StepProbe {
            gradient_ratio_norms: norms,
        }))
    }

    /// Extremes of `det G` and `|G|` over all slices.
    pub fn stats(&self) -> DeformationStats {
        let runs = self.runs();
        runs.par_iter()
            .map(|&(s, _)| field_stats(&self.slices[s]))
            .collect::<Vec<_>>()
            .into_iter()
            .fold(
                DeformationStats {
                    min_det: f64::INFINITY,
                    max_det: f64::NEG_INFINITY,
                    min_norm: f64::INFINITY,
                    max_norm: 0.0,
                },
                |a, b| DeformationStats {
                    min_det: a.min_det.min(b.min_det),
                    max_det: a.max_det.max(b.max_det),
                    min_norm: a.min_norm.min(b.min_norm),
                    max_norm: a.max_norm.max(b.max_norm),
                },
            )
    }

    /// True when every slice is exactly `δ`.
    pub fn is_all_identity(&self) -> bool {
        self.slices
            .iter()
            .all(|s| Arc::ptr_eq(s, &self.identity) || **s == *self.identity)
    }
}

fn field_stats(f: &TensorField2) -> DeformationStats {
    let mut st = DeformationStats {
        min_det: f64::INFINITY,
        max_det: f64::NEG_INFINITY,
        min_norm: f64::INFINITY,
        max_norm: 0.0,
    };
    for p in 0..f.len() {
        let g = f.mat(p);
        let (d, n) = (g.det(), g.norm());
        st.min_det = st.min_det.min(d);
        st.max_det = st.max_det.max(d);
        st.min_norm = st.min_norm.min(n);
        st.max_norm = st.max_norm.max(n);
    }
    st
}

fn czero() -> Complex64 {
    Complex64::new(0.0, 0.0)
}

/// Spectral gradient of the 4 components: output index `4(m−1) + c` is `∂_m G_c`.
fn gradient_from_spec(sp: &Spectral, ws: &mut Workspace, ghat: &[Vec<Complex64>; 4], out: &mut [Vec<f64>; 8]) {
    let mut tmp = vec![czero(); ghat[0].len()];
    for m in 0..2 {
        for c in 0..4 {
            sp.derivative_spec(&ghat[c], m + 1, &mut tmp);
            sp.inverse_into(ws, &tmp, &mut out[4 * m + c]);
        }
    }
}

/// Physical `R = −u·∇G + G·∇u`.
fn reaction(g: &[Vec<f64>; 4], dg: &[Vec<f64>; 8], v: &VelocitySample, out: &mut [Vec<f64>; 4]) {
    let (u1, u2) = (v.u.comp(0), v.u.comp(1));
    for p in 0..u1.len() {
        let gm = Mat2([g[0][p], g[1][p], g[2][p], g[3][p]]);
        let stretch = gm.matmul(&v.grad.mat(p));
        for c in 0..4 {
            out[c][p] = stretch.0[c] - (u1[p] * dg[c][p] + u2[p] * dg[4 + c][p]);
        }
    }
}

fn ratio_norm(g: &[Vec<f64>; 4], dg: &[Vec<f64>; 8], q: f64) -> f64 {
    let vals: Vec<f64> = (0..g[0].len())
        .map(|p| {
            let gn = (0..4).map(|c| g[c][p] * g[c][p]).sum::<f64>().sqrt();
            let dn = (0..8).map(|c| dg[c][p] * dg[c][p]).sum::<f64>().sqrt();
            if dn == 0.0 {
                0.0
            } else {
                dn / gn
            }
        })
        .collect();
    lq_norm_of(&vals, q)
}

/// `‖∇G/|G|‖_q` for one slice. Infinite when `|G|` vanishes where `∇G` does not.
pub fn gradient_ratio_norm(sp: &Spectral, ws: &mut Workspace, f: &TensorField2, q: f64) -> f64 {
    let modes = sp.grid().modes();
    let pts = sp.grid().points();
    let mut ghat: [Vec<Complex64>; 4] = std::array::from_fn(|_| vec![czero(); modes]);
    for c in 0..4 {
        sp.forward_into(ws, f.comp(c), &mut ghat[c]);
    }
    let mut dg: [Vec<f64>; 8] = std::array::from_fn(|_| vec![0.0; pts]);
    gradient_from_spec(sp, ws, &ghat, &mut dg);
    ratio_norm(f.comps(), &dg, q)
}

/// One Heun step of `∂t G = −u·∇G + G·∇u` with dealiased increments.
fn evolve_slice(
    sp: &Spectral,
    ws: &mut Workspace,
    g: &TensorField2,
    v0: &VelocitySample,
    v1: &VelocitySample,
    h: f64,
    probe_q: Option<f64>,
) -> (TensorField2, Option<f64>) {
    let grid = sp.grid();
    let (modes, pts) = (grid.modes(), grid.points());
    let mut ghat: [Vec<Complex64>; 4] = std::array::from_fn(|_| vec![czero(); modes]);
    for c in 0..4 {
        sp.forward_into(ws, g.comp(c), &mut ghat[c]);
    }
    let mut dg: [Vec<f64>; 8] = std::array::from_fn(|_| vec![0.0; pts]);
    gradient_from_spec(sp, ws, &ghat, &mut dg);
    let probe = probe_q.map(|q| ratio_norm(g.comps(), &dg, q));

    let mut r: [Vec<f64>; 4] = std::array::from_fn(|_| vec![0.0; pts]);
    reaction(g.comps(), &dg, v0, &mut r);
    let mut r1: [Vec<Complex64>; 4] = std::array::from_fn(|_| vec![czero(); modes]);
    for c in 0..4 {
        sp.forward_into(ws, &r[c], &mut r1[c]);
        sp.dealias_spec(&mut r1[c]);
    }

    // predictor in both spaces
    let mut gstar: [Vec<f64>; 4] = std::array::from_fn(|_| vec![0.0; pts]);
    for c in 0..4 {
        sp.inverse_into(ws, &r1[c], &mut gstar[c]);
        for (s, &v) in gstar[c].iter_mut().zip(g.comp(c)) {
            *s = v + h * *s;
        }
        for (gh, &rh) in ghat[c].iter_mut().zip(&r1[c]) {
            *gh += rh * h;
        }
    }
    gradient_from_spec(sp, ws, &ghat, &mut dg);
    reaction(&gstar, &dg, v1, &mut r);

    let mut out = g.clone();
    let mut incr = vec![czero(); modes];
    let mut phys = vec![0.0; pts];
    for c in 0..4 {
        sp.forward_into(ws, &r[c], &mut incr);
        sp.dealias_spec(&mut incr);
        for (a, &b) in incr.iter_mut().zip(&r1[c]) {
            *a = (*a + b) * (0.5 * h);
        }
        sp.inverse_into(ws, &incr, &mut phys);
        for (o, &d) in out.comp_mut(c).iter_mut().zip(&phys) {
            *o += d;
        }
    }
    (out, probe)
}

/// History for a spatially uniform velocity gradient: one matrix per age node.
#[derive(Debug, Clone, PartialEq)]
pub struct HomogeneousHistory {
    slices: VecDeque<Mat2>,
}

impl HomogeneousHistory {
    pub fn identity(n_slices: usize) -> Self {
        Self {
            slices: std::iter::repeat_n(Mat2::IDENTITY, n_slices).collect(),
        }
    }

    pub fn slices(&self) -> impl Iterator<Item = &Mat2> {
        self.slices.iter()
    }

    pub fn slice(&self, j: usize) -> Mat2 {
        self.slices[j]
    }

    pub fn len(&self) -> usize {
        self.slices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slices.is_empty()
    }

    /// Shift, then Heun for `dG/dt = G·L` with gradients `l0`, `l1` at the step ends.
    pub fn advance(&mut self, l0: &Mat2, l1: &Mat2, h: f64) {
        self.slices.pop_back();
        self.slices.push_front(Mat2::IDENTITY);
        for g in self.slices.iter_mut().skip(1) {
            let k1 = g.matmul(l0);
            let gs = *g + k1 * h;
            let k2 = gs.matmul(l1);
            *g += (k1 + k2) * (0.5 * h);
        }
    }
}
