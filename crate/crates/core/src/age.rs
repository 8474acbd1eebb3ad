//! Uniform age grid on `[0, S_max]` and quadrature against the memory kernel.

use thiserror::Error;

use crate::constitutive::{ConstitutiveError, MemoryKernel};
use crate::tensor::Mat2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AgeError {
    #[error("age step must be positive and finite, got {0}")]
    BadStep(f64),
    #[error("tail tolerance must lie in (0, 1), got {0}")]
    BadTolerance(f64),
    #[error("history too long: {} age nodes required, memory cap is {cap}",
        .required.map_or("unboundedly many".to_string(), |n| n.to_string()))]
    HistoryTooLong { required: Option<usize>, cap: usize },
    #[error("expected {expected} samples, got {got}")]
    LengthMismatch { got: usize, expected: usize },
    #[error(transparent)]
    Kernel(#[from] ConstitutiveError),
}

/// Immutable age discretization with precomputed node masses `c_j ≈ ∫ m` near `s_j`.
#[derive(Debug, Clone, PartialEq)]
pub struct AgeGrid {
    step: f64,
    nodes: Vec<f64>,
    weights: Vec<f64>,
    node_mass: Vec<f64>,
    tail_error: f64,
    quad_tol: f64,
    lumped: bool,
}

/// Largest search index; beyond it a history is reported as unbounded.
const SEARCH_LIMIT: u64 = 1 << 52;

/// Builds the grid with spacing `ds` and the shortest `S_max = n·ds` whose
/// tail mass is at most `eps_tail`. Fails if more than `max_nodes` nodes are needed.
pub fn build_age_grid(
    kernel: &MemoryKernel,
    ds: f64,
    eps_tail: f64,
    max_nodes: usize,
) -> Result<AgeGrid, AgeError> {
    if !(ds > 0.0 && ds.is_finite()) {
        return Err(AgeError::BadStep(ds));
    }
    if !(eps_tail > 0.0 && eps_tail < 1.0) {
        return Err(AgeError::BadTolerance(eps_tail));
    }
    let tail = |n: u64| kernel.interval_mass(n as f64 * ds, f64::INFINITY);
    let ok = |n: u64| -> Result<bool, AgeError> { Ok(tail(n)? <= eps_tail) };

    // exponential bracketing, then integer bisection
    let mut hi: u64 = 1;
    while !ok(hi)? {
        if hi >= SEARCH_LIMIT {
            return Err(AgeError::HistoryTooLong {
                required: None,
                cap: max_nodes,
            });
        }
        hi *= 2;
    }
    let mut lo = hi / 2;
    if lo == 0 || ok(lo)? {
        lo = 0;
    }
    // invariant: !ok(lo) or lo == 0, ok(hi)
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if ok(mid)? {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let n_cells = if lo == 0 && ok(0)? { 0 } else { hi };
    let n_nodes = n_cells as usize + 1;
    if n_nodes > max_nodes {
        return Err(AgeError::HistoryTooLong {
            required: Some(n_nodes),
            cap: max_nodes,
        });
    }
    AgeGrid::with_cells(kernel, ds, n_cells as usize)
}

impl AgeGrid {
    /// Grid with exactly `n_cells` cells of width `ds`.
    pub fn with_cells(kernel: &MemoryKernel, ds: f64, n_cells: usize) -> Result<Self, AgeError> {
        if !(ds > 0.0 && ds.is_finite()) {
            return Err(AgeError::BadStep(ds));
        }
        let n = n_cells + 1;
        let nodes: Vec<f64> = (0..n).map(|j| j as f64 * ds).collect();
        let s_max = nodes[n - 1];
        let weights: Vec<f64> = (0..n)
            .map(|j| if n == 1 { 0.0 } else if j == 0 || j == n - 1 { 0.5 * ds } else { ds })
            .collect();
        let tail_error = kernel.interval_mass(s_max, f64::INFINITY)?;
        let lumped = kernel.is_singular();
        let node_mass: Vec<f64> = if lumped {
            (0..n)
                .map(|j| {
                    let a = (nodes[j] - 0.5 * ds).max(0.0);
                    let b = (nodes[j] + 0.5 * ds).min(s_max);
                    kernel.interval_mass(a, b)
                })
                .collect::<Result<_, _>>()?
        } else {
            nodes
                .iter()
                .zip(&weights)
                .map(|(&s, &w)| kernel.density(s).map(|m| w * m))
                .collect::<Result<_, _>>()?
        };
        let roundoff = 64.0 * f64::EPSILON;
        let quad_tol = if lumped {
            roundoff
        } else {
            // convex integrand: trapezoid excess per cell ≤ h²/8 (m'(b) − m'(a))
            let slope_gap =
                (kernel.density_derivative(s_max)? - kernel.density_derivative(0.0)?).abs();
            ds * ds / 8.0 * slope_gap + roundoff
        };
        Ok(Self {
            step: ds,
            nodes,
            weights,
            node_mass,
            tail_error,
            quad_tol,
            lumped,
        })
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn s_max(&self) -> f64 {
        self.nodes[self.nodes.len() - 1]
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    /// Composite trapezoid weights `w_j`.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Kernel-weighted node masses `c_j`; `Σ c_j f_j` approximates `∫ m f`.
    pub fn node_masses(&self) -> &[f64] {
        &self.node_mass
    }

    pub fn tail_error(&self) -> f64 {
        self.tail_error
    }

    pub fn quad_tol(&self) -> f64 {
        self.quad_tol
    }

    /// True when node masses are exact cell masses (singular kernels).
    pub fn is_lumped(&self) -> bool {
        self.lumped
    }

    fn check_len(&self, got: usize) -> Result<(), AgeError> {
        if got != self.len() {
            return Err(AgeError::LengthMismatch {
                got,
                expected: self.len(),
            });
        }
        Ok(())
    }

    /// `Σ_j c_j f_j` with compensated summation.
    pub fn quadrate(&self, samples: &[f64]) -> Result<f64, AgeError> {
        self.check_len(samples.len())?;
        let mut acc = NeumaierSum::default();
        for (c, f) in self.node_mass.iter().zip(samples) {
            acc.add(c * f);
        }
        Ok(acc.total())
    }

    /// Componentwise tensor version of [`AgeGrid::quadrate`].
    pub fn quadrate_mat(&self, samples: &[Mat2]) -> Result<Mat2, AgeError> {
        self.check_len(samples.len())?;
        let mut acc = [NeumaierSum::default(); 4];
        for (c, f) in self.node_mass.iter().zip(samples) {
            for (a, v) in acc.iter_mut().zip(f.0) {
                a.add(c * v);
            }
        }
        Ok(Mat2(acc.map(|a| a.total())))
    }
}

/// Neumaier's improved Kahan–Babuška summation.
#[derive(Debug, Clone, Copy, Default)]
pub struct NeumaierSum {
    sum: f64,
    comp: f64,
}

impl NeumaierSum {
    #[inline]
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    #[inline]
    pub fn total(&self) -> f64 {
        self.sum + self.comp
    }
}

impl FromIterator<f64> for NeumaierSum {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut s = Self::default();
        for x in iter {
            s.add(x);
        }
        s
    }
}
