//! Dense tensor algebra in dimension 2.
//!
//! Two representations live here. [`Tensor`] is the general object of order
//! 1 to 4 with the generalized contraction `A (s): B`; it is used for the
//! order-4 derivative of a strain measure and for property checks. [`Mat2`]
//! is the small `Copy` 2-tensor used in every inner loop of the solver.
//!
//! Index convention: row-major, first index slowest. A 2-tensor `a` has
//! components `[a11, a12, a21, a22]`.

use std::fmt;
use std::ops::{Add, AddAssign, Mul, Neg, Sub};

use thiserror::Error;

pub const DIM: usize = 2;
pub const MAX_ORDER: usize = 4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("tensor order {0} outside 1..=4")]
    BadOrder(usize),
    #[error("component count {got} does not match order {order} (expected {expected})")]
    BadLength {
        order: usize,
        got: usize,
        expected: usize,
    },
    #[error("contraction depth {s} exceeds min({p}, {q})")]
    BadContraction { p: usize, q: usize, s: usize },
    #[error("result order {0} is not representable (must be 0..=4)")]
    ResultOrder(usize),
}

/// A dense tensor of order 1..=4 over R^2 (orders 0 appear only as scalars
/// returned by a full contraction).
#[derive(Clone, Copy, PartialEq)]
pub struct Tensor {
    order: usize,
    data: [f64; 16],
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("order", &self.order)
            .field("components", &self.components())
            .finish()
    }
}

#[inline]
fn len_of(order: usize) -> usize {
    1 << order
}

impl Tensor {
    pub fn zeros(order: usize) -> Result<Self, TensorError> {
        if order > MAX_ORDER {
            return Err(TensorError::BadOrder(order));
        }
        Ok(Self {
            order,
            data: [0.0; 16],
        })
    }

    pub fn from_slice(order: usize, components: &[f64]) -> Result<Self, TensorError> {
        if order == 0 || order > MAX_ORDER {
            return Err(TensorError::BadOrder(order));
        }
        let expected = len_of(order);
        if components.len() != expected {
            return Err(TensorError::BadLength {
                order,
                got: components.len(),
                expected,
            });
        }
        let mut data = [0.0; 16];
        data[..expected].copy_from_slice(components);
        Ok(Self { order, data })
    }

    /// The identity 2-tensor δ.
    pub fn identity() -> Self {
        Self::from_slice(2, &[1.0, 0.0, 0.0, 1.0]).expect("static shape")
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn components(&self) -> &[f64] {
        &self.data[..len_of(self.order)]
    }

    pub fn components_mut(&mut self) -> &mut [f64] {
        let n = len_of(self.order);
        &mut self.data[..n]
    }

    /// Component at a multi-index (each entry 0 or 1).
    pub fn get(&self, index: &[usize]) -> f64 {
        debug_assert_eq!(index.len(), self.order);
        self.data[flat_index(index)]
    }

    pub fn scaled(&self, c: f64) -> Self {
        let mut out = *self;
        out.components_mut().iter_mut().for_each(|v| *v *= c);
        out
    }

    /// Scalar value of an order-0 result (e.g. a full contraction).
    pub fn scalar(&self) -> Option<f64> {
        (self.order == 0).then_some(self.data[0])
    }

    pub fn frobenius_norm(&self) -> f64 {
        frobenius_norm(self)
    }
}

#[inline]
fn flat_index(index: &[usize]) -> usize {
    index.iter().fold(0, |acc, &i| (acc << 1) | i)
}

/// Generalized contraction over the last `s` indices of `a` and the first `s`
/// indices of `b`. `s = 0` is the outer product, `s = 1` the dot product and
/// `s = 2` the double contraction.
pub fn contract(a: &Tensor, b: &Tensor, s: usize) -> Result<Tensor, TensorError> {
    let (p, q) = (a.order, b.order);
    if s > p.min(q) {
        return Err(TensorError::BadContraction { p, q, s });
    }
    let out_order = p + q - 2 * s;
    if out_order > MAX_ORDER {
        return Err(TensorError::ResultOrder(out_order));
    }
    let free_a = p - s;
    let free_b = q - s;
    let mut out = Tensor {
        order: out_order,
        data: [0.0; 16],
    };
    // With binary digits, flat indices split cleanly into (free, summed) bit fields.
    for ia in 0..len_of(free_a) {
        for jb in 0..len_of(free_b) {
            let mut acc = 0.0;
            for k in 0..len_of(s) {
                acc += a.data[(ia << s) | k] * b.data[(k << free_b) | jb];
            }
            out.data[(ia << free_b) | jb] = acc;
        }
    }
    Ok(out)
}

pub fn frobenius_norm(a: &Tensor) -> f64 {
    a.components().iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Trace, determinant and first invariant `I1 = Tr(GᵀG)` of a 2-tensor.
pub fn invariants2(g: &Tensor) -> Result<(f64, f64, f64), TensorError> {
    if g.order != 2 {
        return Err(TensorError::BadOrder(g.order));
    }
    let m = Mat2::from_tensor(g)?;
    Ok((m.trace(), m.det(), m.i1()))
}

/// 2×2 real matrix stored row-major `[a11, a12, a21, a22]`.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct Mat2(pub [f64; 4]);

impl Mat2 {
    pub const ZERO: Mat2 = Mat2([0.0; 4]);
    pub const IDENTITY: Mat2 = Mat2([1.0, 0.0, 0.0, 1.0]);

    #[inline]
    pub const fn new(a11: f64, a12: f64, a21: f64, a22: f64) -> Self {
        Mat2([a11, a12, a21, a22])
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.0[2 * i + j]
    }

    #[inline]
    pub fn transpose(&self) -> Self {
        let [a, b, c, d] = self.0;
        Mat2([a, c, b, d])
    }

    #[inline]
    pub fn matmul(&self, o: &Mat2) -> Self {
        let [a, b, c, d] = self.0;
        let [e, f, g, h] = o.0;
        Mat2([a * e + b * g, a * f + b * h, c * e + d * g, c * f + d * h])
    }

    /// `GᵀG`
    #[inline]
    pub fn gram(&self) -> Self {
        let [a, b, c, d] = self.0;
        let off = a * b + c * d;
        Mat2([a * a + c * c, off, off, b * b + d * d])
    }

    #[inline]
    pub fn trace(&self) -> f64 {
        self.0[0] + self.0[3]
    }

    #[inline]
    pub fn det(&self) -> f64 {
        self.0[0] * self.0[3] - self.0[1] * self.0[2]
    }

    /// Squared Frobenius norm, equal to `Tr(GᵀG)`.
    #[inline]
    pub fn i1(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum()
    }

    #[inline]
    pub fn norm(&self) -> f64 {
        self.i1().sqrt()
    }

    /// Double contraction `A : B`.
    #[inline]
    pub fn ddot(&self, o: &Mat2) -> f64 {
        self.0.iter().zip(o.0.iter()).map(|(a, b)| a * b).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_slice(2, &self.0).expect("static shape")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self, TensorError> {
        if t.order != 2 {
            return Err(TensorError::BadOrder(t.order));
        }
        let c = t.components();
        Ok(Mat2([c[0], c[1], c[2], c[3]]))
    }

    /// Rotation by `theta`.
    pub fn rotation(theta: f64) -> Self {
        let (s, c) = theta.sin_cos();
        Mat2([c, -s, s, c])
    }
}

impl Add for Mat2 {
    type Output = Mat2;
    #[inline]
    fn add(self, o: Mat2) -> Mat2 {
        Mat2(std::array::from_fn(|i| self.0[i] + o.0[i]))
    }
}

impl AddAssign for Mat2 {
    #[inline]
    fn add_assign(&mut self, o: Mat2) {
        for i in 0..4 {
            self.0[i] += o.0[i];
        }
    }
}

impl Sub for Mat2 {
    type Output = Mat2;
    #[inline]
    fn sub(self, o: Mat2) -> Mat2 {
        Mat2(std::array::from_fn(|i| self.0[i] - o.0[i]))
    }
}

impl Neg for Mat2 {
    type Output = Mat2;
    #[inline]
    fn neg(self) -> Mat2 {
        Mat2(self.0.map(|v| -v))
    }
}

impl Mul<f64> for Mat2 {
    type Output = Mat2;
    #[inline]
    fn mul(self, c: f64) -> Mat2 {
        Mat2(self.0.map(|v| v * c))
    }
}

impl Mul<Mat2> for f64 {
    type Output = Mat2;
    #[inline]
    fn mul(self, m: Mat2) -> Mat2 {
        m * self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn basis(i: usize, j: usize) -> Tensor {
        let mut c = [0.0; 4];
        c[2 * i + j] = 1.0;
        Tensor::from_slice(2, &c).unwrap()
    }

    #[test]
    fn identity_is_neutral_for_dot() {
        let b = Tensor::from_slice(2, &[1.5, -2.0, 0.25, 7.0]).unwrap();
        let r = contract(&Tensor::identity(), &b, 1).unwrap();
        assert_eq!(r, b);
    }

    #[test]
    fn double_contraction_is_squared_norm() {
        let a = Tensor::from_slice(2, &[1.0, 2.0, -3.0, 0.5]).unwrap();
        let r = contract(&a, &a, 2).unwrap();
        assert_eq!(r.order(), 0);
        assert!((r.scalar().unwrap() - 14.25).abs() < 1e-15);
    }

    #[test]
    fn basis_dot_product() {
        // e1⊗e2 · e2⊗e1 = e1⊗e1
        let r = contract(&basis(0, 1), &basis(1, 0), 1).unwrap();
        assert_eq!(r.components(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn outer_product_layout() {
        let a = Tensor::from_slice(1, &[1.0, 2.0]).unwrap();
        let b = Tensor::from_slice(1, &[3.0, 5.0]).unwrap();
        let r = contract(&a, &b, 0).unwrap();
        assert_eq!(r.components(), &[3.0, 5.0, 6.0, 10.0]);
        assert_eq!(r.get(&[1, 0]), 6.0);
    }

    #[test]
    fn order_three_against_vector() {
        // (A·v)_{ij} = Σ_k a_{ijk} v_k
        let comps: Vec<f64> = (0..8).map(|v| v as f64).collect();
        let a = Tensor::from_slice(3, &comps).unwrap();
        let v = Tensor::from_slice(1, &[1.0, -1.0]).unwrap();
        let r = contract(&a, &v, 1).unwrap();
        assert_eq!(r.components(), &[-1.0, -1.0, -1.0, -1.0]);
    }

    #[test]
    fn rejects_bad_depth_and_order() {
        let a = Tensor::from_slice(1, &[1.0, 0.0]).unwrap();
        let b = Tensor::identity();
        assert!(matches!(
            contract(&a, &b, 2),
            Err(TensorError::BadContraction { .. })
        ));
        let four = Tensor::zeros(4).unwrap();
        assert!(matches!(
            contract(&four, &four, 1),
            Err(TensorError::ResultOrder(6))
        ));
        assert!(Tensor::from_slice(2, &[1.0]).is_err());
        assert!(Tensor::from_slice(5, &[0.0; 32]).is_err());
    }

    #[test]
    fn norms_and_invariants() {
        assert!((frobenius_norm(&Tensor::identity()) - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(frobenius_norm(&Tensor::zeros(3).unwrap()), 0.0);
        let gs = 0.7 * 1.3;
        let shear = Tensor::from_slice(2, &[1.0, 0.0, gs, 1.0]).unwrap();
        assert!((frobenius_norm(&shear) - (2.0 + gs * gs).sqrt()).abs() < 1e-15);
        let (tr, det, i1) = invariants2(&shear).unwrap();
        assert_eq!((tr, det), (2.0, 1.0));
        assert!((i1 - (2.0 + gs * gs)).abs() < 1e-15);
        assert_eq!(invariants2(&Tensor::identity()).unwrap(), (2.0, 1.0, 2.0));
        assert_eq!(
            invariants2(&Tensor::identity().scaled(2.0)).unwrap(),
            (4.0, 4.0, 8.0)
        );
        assert!(invariants2(&Tensor::zeros(3).unwrap()).is_err());
    }

    #[test]
    fn mat2_matches_general_contraction() {
        let a = Mat2::new(1.0, 2.0, 3.0, 4.0);
        let b = Mat2::new(-1.0, 0.5, 2.0, 0.0);
        let via_tensor = contract(&a.to_tensor(), &b.to_tensor(), 1).unwrap();
        assert_eq!(a.matmul(&b).to_tensor(), via_tensor);
        let gram = contract(&a.transpose().to_tensor(), &a.to_tensor(), 1).unwrap();
        assert_eq!(a.gram().to_tensor(), gram);
        assert_eq!(a.ddot(&b), contract(&a.to_tensor(), &b.to_tensor(), 2).unwrap().scalar().unwrap());
    }
}
