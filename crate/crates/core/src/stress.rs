//! Stress assembly `τ = ∫ m S(G) ds` and the gradient-control quantities.

use rayon::prelude::*;
use thiserror::Error;

use crate::age::{AgeGrid, NeumaierSum};
use crate::constitutive::StrainMeasure;
use crate::history::{gradient_ratio_norm, DeformationHistory};
use crate::spectral::{lq_norm_of, Spectral, SpectralField, TensorField2};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StressError {
    #[error("history has {history} slices but the age grid has {grid} nodes")]
    SliceMismatch { history: usize, grid: usize },
    #[error("degenerate deformation: |G| = {norm:.6e} in slice {slice}, floor {floor:.6e}")]
    Degenerate { slice: usize, norm: f64, floor: f64 },
    #[error("norm exponents must satisfy 1/q + 1/r < 1/2, got q = {q}, r = {r}")]
    BadExponents { q: f64, r: f64 },
}

/// Checks `1/q + 1/r < 1/2` with finite exponents.
pub fn check_exponents(q: f64, r: f64) -> Result<(), StressError> {
    if q.is_finite() && r.is_finite() && q > 0.0 && r > 0.0 && 1.0 / q + 1.0 / r < 0.5 {
        Ok(())
    } else {
        Err(StressError::BadExponents { q, r })
    }
}

fn check_len(h: &DeformationHistory, ages: &AgeGrid) -> Result<(), StressError> {
    if h.len() != ages.len() {
        return Err(StressError::SliceMismatch {
            history: h.len(),
            grid: ages.len(),
        });
    }
    Ok(())
}

/// Extra-stress from the history by age quadrature. Slices that share
/// storage are evaluated once with their summed node mass.
pub fn assemble_stress(
    h: &DeformationHistory,
    measure: &StrainMeasure,
    ages: &AgeGrid,
) -> Result<TensorField2, StressError> {
    check_len(h, ages)?;
    let grid = h.grid();
    let pts = grid.points();
    let kernel_weighted = measure.is_kernel_weighted();

    // (slice index, weight, age) per evaluation
    let terms: Vec<(usize, f64, f64)> = if kernel_weighted {
        h.runs()
            .into_iter()
            .map(|(s, l)| {
                let w: NeumaierSum = ages.node_masses()[s..s + l].iter().copied().collect();
                (s, w.total(), ages.nodes()[s])
            })
            .collect()
    } else {
        (0..h.len())
            .map(|j| (j, ages.weights()[j], ages.nodes()[j]))
            .collect()
    };

    const CHUNK: usize = 1024;
    let mut acc = vec![[NeumaierSum::default(); 4]; pts];
    acc.par_chunks_mut(CHUNK).enumerate().for_each(|(ci, chunk)| {
        let base = ci * CHUNK;
        for &(j, w, s) in &terms {
            if w == 0.0 {
                continue;
            }
            let slice = h.slice(j);
            for (off, a) in chunk.iter_mut().enumerate() {
                let sv = measure.eval_at_age(s, &slice.mat(base + off));
                for c in 0..4 {
                    a[c].add(w * sv.0[c]);
                }
            }
        }
    });
    let comps: [Vec<f64>; 4] = std::array::from_fn(|c| acc.iter().map(|a| a[c].total()).collect());
    Ok(TensorField2::from_components(&grid, comps))
}

/// `Σ_j c_j ‖∇G_j/|G_j|‖_q^r` from per-slice norms.
pub fn y_integrand_from_norms(norms: &[f64], ages: &AgeGrid, r: f64) -> f64 {
    norms
        .iter()
        .zip(ages.node_masses())
        .map(|(&p, &c)| if p == 0.0 { 0.0 } else { c * p.powf(r) })
        .collect::<NeumaierSum>()
        .total()
}

/// `∫ m(s) ‖∇G/|G|‖_q^r ds` at the current time.
///
/// Fails when some `|G|` falls below `√(2·min(μ,1))/2`.
pub fn y_integrand_now(
    sp: &Spectral,
    h: &DeformationHistory,
    ages: &AgeGrid,
    q: f64,
    r: f64,
    mu: f64,
) -> Result<f64, StressError> {
    check_len(h, ages)?;
    check_exponents(q, r)?;
    let floor = (2.0 * mu.min(1.0)).sqrt() / 2.0;
    let runs = h.runs();
    let per_run: Vec<Result<f64, StressError>> = runs
        .par_iter()
        .map_init(
            || sp.workspace(),
            |ws, &(s, _)| {
                if h.is_identity_slice(s) {
                    return Ok(0.0);
                }
                let f = h.slice(s);
                let min_norm = (0..f.len()).map(|p| f.magnitude(p)).fold(f64::INFINITY, f64::min);
                if min_norm < floor {
                    return Err(StressError::Degenerate {
                        slice: s,
                        norm: min_norm,
                        floor,
                    });
                }
                Ok(gradient_ratio_norm(sp, ws, f, q))
            },
        )
        .collect();
    let mut norms = vec![0.0; h.len()];
    for ((s, l), v) in runs.iter().zip(per_run) {
        let v = v?;
        norms[*s..s + l].fill(v);
    }
    Ok(y_integrand_from_norms(&norms, ages, r))
}

/// Discrete `L^q` norm of the order-3 field `∇τ`.
pub fn stress_gradient_norm(sp: &Spectral, tau: &TensorField2, q: f64) -> f64 {
    let s = sp.forward(tau);
    let mut d = SpectralField::<4>::zeros(&sp.grid());
    let pts = sp.grid().points();
    let mut sq = vec![0.0; pts];
    for dir in 1..=2 {
        for c in 0..4 {
            sp.derivative_spec(s.comp(c), dir, d.comp_mut(c));
        }
        let f = sp.inverse(&d);
        for c in 0..4 {
            for (a, v) in sq.iter_mut().zip(f.comp(c)) {
                *a += v * v;
            }
        }
    }
    let mags: Vec<f64> = sq.into_iter().map(f64::sqrt).collect();
    lq_norm_of(&mags, q)
}

/// Sound discrete bound on `‖τ‖∞` for measures with declared bounds.
pub fn stress_sup_bound(measure: &StrainMeasure, ages: &AgeGrid) -> Option<f64> {
    measure
        .bounds()
        .map(|b| b.stress * (1.0 - ages.tail_error() + ages.quad_tol()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::age::build_age_grid;
    use crate::constitutive::{model_catalog, MemoryKernel, ModelParams};
    use crate::history::{HomogeneousHistory, InitHistory};
    use crate::spectral::{ScalarField, TorusGrid};
    use crate::tensor::Mat2;

    fn setup(n: usize, ds: f64, eps: f64) -> (TorusGrid, Spectral, AgeGrid) {
        let g = TorusGrid::new(n).unwrap();
        let k = MemoryKernel::single_exponential(1.0).unwrap();
        (g, Spectral::new(g), build_age_grid(&k, ds, eps, 1_000_000).unwrap())
    }

    #[test]
    fn identity_history_examples() {
        let (g, _, ages) = setup(16, 0.05, 1e-8);
        let h = DeformationHistory::init(InitHistory::Identity, &g, &ages, None).unwrap();
        let p = ModelParams::default();
        let (_, psm) = model_catalog("psm-normalized", &p).unwrap();
        let tau = assemble_stress(&h, &psm, &ages).unwrap();
        let mass = ages.quadrate(&vec![1.0; ages.len()]).unwrap();
        assert!((mass - (1.0 - ages.tail_error())).abs() <= ages.quad_tol());
        assert!((tau.mat(5) - Mat2::IDENTITY * mass).norm() < 1e-14);
        let (_, ob) = model_catalog("oldroyd-b", &p).unwrap();
        assert_eq!(assemble_stress(&h, &ob, &ages).unwrap().sup_norm(), 0.0);
    }

    #[test]
    fn homogeneous_shear_gamma_integrals() {
        let (g, _, ages) = setup(16, 2e-3, 1e-12);
        let mut hom = HomogeneousHistory::identity(ages.len());
        let l = Mat2::new(0.0, 0.0, 1.0, 0.0);
        for _ in 0..ages.len() {
            hom.advance(&l, &l, ages.step());
        }
        let fields: Vec<TensorField2> = hom.slices().map(|m| TensorField2::constant(&g, *m)).collect();
        let h = DeformationHistory::from_slices(&g, fields, 0).unwrap();
        let (_, ob) = model_catalog("oldroyd-b", &ModelParams::default()).unwrap();
        let tau = assemble_stress(&h, &ob, &ages).unwrap().mat(0);
        assert!((tau.at(0, 0) - 2.0).abs() < 1e-6);
        assert!((tau.at(0, 1) - 1.0).abs() < 1e-6);
        assert!(tau.at(1, 1).abs() < 1e-12);
    }

    #[test]
    fn assembly_is_linear_in_the_measure() {
        let (g, sp, ages) = setup(16, 0.1, 1e-3);
        let u = crate::spectral::VectorField::from_fn(&g, |x, y| [x.sin() * y.cos(), -x.cos() * y.sin()]);
        let v = crate::history::VelocitySample::new(&sp, &u);
        let mut h = DeformationHistory::init(InitHistory::Identity, &g, &ages, None).unwrap();
        for _ in 0..15 {
            h.advance(&sp, &v, &v, 0.1, None).unwrap();
        }
        let p = ModelParams::default();
        let (_, a) = model_catalog("psm-raw", &p).unwrap();
        let (_, b) = model_catalog("wagner-raw", &p).unwrap();
        let combo = StrainMeasure::linear("combo", vec![(2.0, a.clone()), (-0.5, b.clone())]);
        let mut expect = assemble_stress(&h, &a, &ages).unwrap();
        expect.scale(2.0);
        expect.axpy(-0.5, &assemble_stress(&h, &b, &ages).unwrap());
        assert!(assemble_stress(&h, &combo, &ages).unwrap().max_abs_diff(&expect) < 1e-12);
    }

    #[test]
    fn y_integrand_examples() {
        let (g, sp, ages) = setup(64, 0.1, 1e-4);
        let h = DeformationHistory::init(InitHistory::Identity, &g, &ages, None).unwrap();
        assert_eq!(y_integrand_now(&sp, &h, &ages, 8.0, 4.0, 1.0).unwrap(), 0.0);

        let shear = TensorField2::constant(&g, Mat2::new(1.0, 0.0, 0.7, 1.0));
        let hs = DeformationHistory::from_slices(&g, vec![shear; ages.len()], 0).unwrap();
        assert_eq!(y_integrand_now(&sp, &hs, &ages, 8.0, 4.0, 1.0).unwrap(), 0.0);

        // G = g(x1)·δ: |∇G|/|G| = |g′|/g; the x2 integral contributes 2π
        let gf = |x: f64| 1.0 + 0.5 * x.sin();
        let field = TensorField2::from_mat_fn(&g, |x, _| Mat2::IDENTITY * gf(x));
        let hm = DeformationHistory::from_slices(&g, vec![field; ages.len()], 0).unwrap();
        let (q, r) = (8.0, 4.0);
        let oracle = quadrature::integrate(
            |x: f64| (0.5 * x.cos() / gf(x)).abs().powf(q),
            0.0,
            std::f64::consts::TAU,
            1e-14,
        )
        .integral;
        let norm = (std::f64::consts::TAU * oracle).powf(1.0 / q);
        let mass = ages.quadrate(&vec![1.0; ages.len()]).unwrap();
        let expect = mass * norm.powf(r);
        let got = y_integrand_now(&sp, &hm, &ages, q, r, 0.25).unwrap();
        assert!((got - expect).abs() < 1e-10 * expect, "{got} {expect}");
    }

    #[test]
    fn degenerate_deformation_is_reported() {
        let (g, sp, ages) = setup(16, 0.1, 1e-2);
        let tiny = TensorField2::from_mat_fn(&g, |x, _| Mat2::IDENTITY * (0.3 + 0.1 * x.sin()));
        let h = DeformationHistory::from_slices(&g, vec![tiny; ages.len()], 0).unwrap();
        assert!(matches!(
            y_integrand_now(&sp, &h, &ages, 8.0, 4.0, 1.0),
            Err(StressError::Degenerate { .. })
        ));
    }

    #[test]
    fn exponent_condition() {
        assert!(check_exponents(8.0, 4.0).is_ok());
        assert!(check_exponents(4.0, 4.0).is_err());
        assert!(check_exponents(f64::INFINITY, 4.0).is_err());
    }

    #[test]
    fn stress_gradient_examples() {
        let g = TorusGrid::new(32).unwrap();
        let sp = Spectral::new(g);
        let c = TensorField2::constant(&g, Mat2::new(1.0, 2.0, 2.0, 3.0));
        assert!(stress_gradient_norm(&sp, &c, 2.0) < 1e-13);
        let t = TensorField2::from_mat_fn(&g, |x, _| Mat2::new(x.sin(), 0.0, 0.0, 0.0));
        let expect = ScalarField::from_fn(&g, |x, _| [x.cos()]).l2_norm();
        assert!((expect - (2.0 * std::f64::consts::PI.powi(2)).sqrt()).abs() < 1e-12);
        assert!((stress_gradient_norm(&sp, &t, 2.0) - expect).abs() < 1e-12);
    }
}
