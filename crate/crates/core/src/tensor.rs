//! Dense row-major tensors and the primitive kernels the layers are built on.
//!
//! Storage is a flat `Vec<T>` with the last axis fastest. `T` is `f32` for
//! training and inference; `f64` is used by gradient checks, which need the
//! extra headroom for central differences.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, NumCast};

use crate::error::{Error, Result};

/// Floating-point element type usable in tensors.
pub trait Scalar:
    Float + FromPrimitive + AddAssign + SubAssign + MulAssign + Sum + Default + Debug + Display + Send + Sync + 'static
{
    /// `c = alpha * a·b + beta * c` over strided row/column layouts.
    ///
    /// Callers guarantee every addressed element lies inside its slice;
    /// [`gemm`] checks this before dispatching.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    #[inline]
    fn lit(v: f64) -> Self {
        <Self as NumCast>::from(v).expect("literal representable")
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Scalar for f64 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// Strided matrix view used by [`gemm`]: `(slice, row stride, column stride)`.
pub(crate) type MatRef<'a, T> = (&'a [T], usize, usize);

fn last_index(rows: usize, cols: usize, rs: usize, cs: usize) -> usize {
    (rows - 1) * rs + (cols - 1) * cs
}

/// Safe strided GEMM: `c[m,n] = alpha * a[m,k]·b[k,n] + beta * c`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: MatRef<'_, T>,
    b: MatRef<'_, T>,
    beta: T,
    c: &mut [T],
    rsc: usize,
    csc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                let idx = i * rsc + j * csc;
                c[idx] = beta * c[idx];
            }
        }
        return;
    }
    assert!(last_index(m, k, a.1, a.2) < a.0.len(), "gemm: lhs out of bounds");
    assert!(last_index(k, n, b.1, b.2) < b.0.len(), "gemm: rhs out of bounds");
    assert!(last_index(m, n, rsc, csc) < c.len(), "gemm: output out of bounds");
    // SAFETY: all addressed elements were bounds-checked above and `c` is
    // exclusively borrowed, so it cannot alias `a` or `b`.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.0.as_ptr(),
            a.1 as isize,
            a.2 as isize,
            b.0.as_ptr(),
            b.1 as isize,
            b.2 as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// Activation layout `batch × channel × depth × height × width`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct Shape5 {
    pub n: usize,
    pub c: usize,
    pub d: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape5 {
    pub fn new(n: usize, c: usize, d: usize, h: usize, w: usize) -> Result<Self> {
        let s = Shape5 { n, c, d, h, w };
        if s.dims().contains(&0) {
            return Err(Error::InvalidShape(s.dims().to_vec()));
        }
        Ok(s)
    }

    pub fn dims(&self) -> [usize; 5] {
        [self.n, self.c, self.d, self.h, self.w]
    }

    /// Voxels per channel.
    pub fn spatial(&self) -> usize {
        self.d * self.h * self.w
    }

    pub fn numel(&self) -> usize {
        self.n * self.c * self.spatial()
    }
}

impl std::fmt::Display for Shape5 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}x{}x{}", self.n, self.c, self.d, self.h, self.w)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

/// Dense n-dimensional array, row-major with the last axis fastest.
#[derive(Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Debug> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let preview: Vec<_> = self.data.iter().take(8).collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data[..8]", &preview)
            .finish()
    }
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(Error::InvalidShape(shape.to_vec()));
    }
    Ok(shape.iter().product())
}

impl<T: Scalar> Tensor<T> {
    /// Tensor of the given shape with every element set to `fill`.
    pub fn full(shape: &[usize], fill: T) -> Result<Self> {
        let len = check_shape(shape)?;
        Ok(Tensor {
            shape: shape.to_vec(),
            data: vec![fill; len],
        })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::full(shape, T::zero())
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let len = check_shape(shape)?;
        if len != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} needs {len} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros_like(other: &Tensor<T>) -> Self {
        Tensor {
            shape: other.shape.clone(),
            data: vec![T::zero(); other.data.len()],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// Interprets the tensor as an NCDHW activation.
    pub fn dims5(&self) -> Result<Shape5> {
        match *self.shape.as_slice() {
            [n, c, d, h, w] => Shape5::new(n, c, d, h, w),
            _ => Err(Error::shape(format!(
                "expected a rank-5 NCDHW tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        self.clone().into_reshape(shape)
    }

    pub fn into_reshape(self, shape: &[usize]) -> Result<Self> {
        let len = check_shape(shape)?;
        if len != self.data.len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} ({} elements) into {shape:?}",
                self.shape,
                self.data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data,
        })
    }

    /// Sequential left-to-right sum; fixed order keeps results reproducible.
    pub fn sum(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc + v)
    }

    pub fn sum_f64(&self) -> f64 {
        self.data.iter().map(|v| v.to_f64_lossy()).sum()
    }

    pub fn sum_squares(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc + v * v)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|&v| <U as NumCast>::from(v).unwrap_or_else(U::nan))
                .collect(),
        }
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: T, other: &Tensor<T>) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "axpy shape mismatch {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        for (d, &s) in self.data.iter_mut().zip(&other.data) {
            *d += alpha * s;
        }
        Ok(())
    }

    pub fn fill(&mut self, value: T) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    pub fn add(&self, other: &Tensor<T>) -> Result<Self> {
        elementwise(self, other, BinaryOp::Add)
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Self> {
        elementwise(self, other, BinaryOp::Sub)
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Self> {
        elementwise(self, other, BinaryOp::Mul)
    }

    /// Concatenates equally shaped tensors along a new leading axis.
    pub fn stack(items: &[&Tensor<T>]) -> Result<Self> {
        let first = items.first().ok_or_else(|| Error::shape("cannot stack zero tensors"))?;
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        let mut data = Vec::with_capacity(first.len() * items.len());
        for t in items {
            if t.shape != first.shape {
                return Err(Error::shape(format!(
                    "stack shape mismatch {:?} vs {:?}",
                    t.shape, first.shape
                )));
            }
            data.extend_from_slice(&t.data);
        }
        Ok(Tensor { shape, data })
    }
}

/// `out[i] = op(a[i], b[i])` for equally shaped tensors.
pub fn elementwise<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, op: BinaryOp) -> Result<Tensor<T>> {
    if a.shape != b.shape {
        return Err(Error::shape(format!(
            "elementwise shape mismatch {:?} vs {:?}",
            a.shape, b.shape
        )));
    }
    let f = match op {
        BinaryOp::Add => |x: T, y: T| x + y,
        BinaryOp::Sub => |x: T, y: T| x - y,
        BinaryOp::Mul => |x: T, y: T| x * y,
    };
    Ok(Tensor {
        shape: a.shape.clone(),
        data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
    })
}

/// Matrix product of rank-2 tensors `[m,k]·[k,n]`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = match *a.shape() {
        [m, k] => (m, k),
        _ => return Err(Error::shape(format!("matmul lhs must be rank 2, got {:?}", a.shape))),
    };
    let (k2, n) = match *b.shape() {
        [k2, n] => (k2, n),
        _ => return Err(Error::shape(format!("matmul rhs must be rank 2, got {:?}", b.shape))),
    };
    if k != k2 {
        return Err(Error::shape(format!(
            "matmul inner extents differ: {:?} x {:?}",
            a.shape, b.shape
        )));
    }
    let mut out = vec![T::zero(); m * n];
    gemm(
        m,
        k,
        n,
        T::one(),
        (&a.data, k, 1),
        (&b.data, n, 1),
        T::zero(),
        &mut out,
        n,
        1,
    );
    Tensor::from_vec(&[m, n], out)
}

/// Per-axis `(before, after)` padding for the three spatial axes.
pub type Pad3 = [(usize, usize); 3];

/// Pads the spatial axes of an NCDHW tensor with a constant.
pub fn pad3d<T: Scalar>(x: &Tensor<T>, pad: Pad3, value: T) -> Result<Tensor<T>> {
    let s = x.dims5()?;
    let [(zb, za), (yb, ya), (xb, xa)] = pad;
    let (pd, ph, pw) = (s.d + zb + za, s.h + yb + ya, s.w + xb + xa);
    let mut out = vec![value; s.n * s.c * pd * ph * pw];
    for plane in 0..s.n * s.c {
        let src = &x.data[plane * s.spatial()..(plane + 1) * s.spatial()];
        let dst = &mut out[plane * pd * ph * pw..(plane + 1) * pd * ph * pw];
        for z in 0..s.d {
            for y in 0..s.h {
                let from = (z * s.h + y) * s.w;
                let to = ((z + zb) * ph + y + yb) * pw + xb;
                dst[to..to + s.w].copy_from_slice(&src[from..from + s.w]);
            }
        }
    }
    Tensor::from_vec(&[s.n, s.c, pd, ph, pw], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn create_fills() {
        let t = Tensor::<f32>::zeros(&[2, 3]).unwrap();
        assert_eq!(t.data(), &[0.0; 6]);
        let t = Tensor::full(&[1], 7.5f32).unwrap();
        assert_eq!(t.data(), &[7.5]);
        let t = Tensor::full(&[2, 2, 2], 1.0f32).unwrap();
        assert_eq!(t.sum(), 8.0);
    }

    #[test]
    fn create_rejects_zero_extent() {
        assert!(matches!(Tensor::<f32>::zeros(&[2, 0]), Err(Error::InvalidShape(_))));
        assert!(Tensor::<f32>::zeros(&[]).is_err());
        assert!(Shape5::new(1, 1, 0, 1, 1).is_err());
    }

    #[test]
    fn elementwise_examples() {
        let a = Tensor::from_vec(&[2], vec![1.0f32, 2.0]).unwrap();
        let b = Tensor::from_vec(&[2], vec![3.0f32, 4.0]).unwrap();
        assert_eq!(a.add(&b).unwrap().data(), &[4.0, 6.0]);
        assert_eq!(a.sub(&a).unwrap().data(), &[0.0, 0.0]);
        let c = Tensor::from_vec(&[2], vec![2.0f32, 3.0]).unwrap();
        let d = Tensor::from_vec(&[2], vec![4.0f32, 5.0]).unwrap();
        assert_eq!(c.mul(&d).unwrap().data(), &[8.0, 15.0]);
        let e = Tensor::<f32>::zeros(&[3]).unwrap();
        assert!(matches!(a.add(&e), Err(Error::Shape(_))));
    }

    #[test]
    fn matmul_examples() {
        let eye = Tensor::from_vec(&[2, 2], vec![1.0f32, 0.0, 0.0, 1.0]).unwrap();
        let m = Tensor::from_vec(&[2, 2], vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(matmul(&eye, &m).unwrap(), m);
        let r = Tensor::from_vec(&[1, 2], vec![1.0f32, 2.0]).unwrap();
        let c = Tensor::from_vec(&[2, 1], vec![3.0f32, 4.0]).unwrap();
        assert_eq!(matmul(&r, &c).unwrap().data(), &[11.0]);
        assert!(matches!(matmul(&r, &r), Err(Error::Shape(_))));
    }

    #[test]
    fn pad_examples() {
        let x = Tensor::full(&[1, 1, 1, 1, 1], 5.0f32).unwrap();
        let p = pad3d(&x, [(1, 1); 3], 0.0).unwrap();
        assert_eq!(p.shape(), &[1, 1, 3, 3, 3]);
        assert_eq!(p.data()[13], 5.0);
        assert_eq!(p.data().iter().filter(|&&v| v != 0.0).count(), 1);
        let z = Tensor::<f32>::zeros(&[1, 2, 2, 3, 2]).unwrap();
        assert!(pad3d(&z, [(0, 2), (1, 0), (3, 1)], 0.0)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn reshape_keeps_length() {
        let t = Tensor::<f32>::zeros(&[2, 6]).unwrap();
        assert_eq!(t.reshape(&[3, 4]).unwrap().len(), 12);
        assert!(t.reshape(&[5]).is_err());
    }

    fn small_vec(len: usize) -> impl Strategy<Value = Vec<f32>> {
        proptest::collection::vec(-100.0f32..100.0, len)
    }

    proptest! {
        #[test]
        fn fill_sum_exact(dims in proptest::collection::vec(1usize..6, 1..4), ones in any::<bool>()) {
            let fill = if ones { 1.0f32 } else { 0.0 };
            let t = Tensor::full(&dims, fill).unwrap();
            prop_assert_eq!(t.sum(), fill * t.len() as f32);
        }

        #[test]
        fn add_commutative_associative((a, b, c) in (1usize..32).prop_flat_map(|n| (small_vec(n), small_vec(n), small_vec(n)))) {
            let n = a.len();
            let ta = Tensor::from_vec(&[n], a).unwrap();
            let tb = Tensor::from_vec(&[n], b).unwrap();
            let tc = Tensor::from_vec(&[n], c).unwrap();
            prop_assert_eq!(ta.add(&tb).unwrap(), tb.add(&ta).unwrap());
            let l = ta.add(&tb).unwrap().add(&tc).unwrap();
            let r = ta.add(&tb.add(&tc).unwrap()).unwrap();
            for (x, y) in l.data().iter().zip(r.data()) {
                let scale = x.abs().max(y.abs()).max(1.0);
                prop_assert!((x - y).abs() <= 1e-6 * scale * 100.0);
            }
        }

        #[test]
        fn matmul_matches_triple_loop(m in 1usize..17, k in 1usize..17, n in 1usize..17, seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let a: Vec<f32> = (0..m * k).map(|_| rng.random_range(-1.0..1.0)).collect();
            let b: Vec<f32> = (0..k * n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let out = matmul(&Tensor::from_vec(&[m, k], a.clone()).unwrap(), &Tensor::from_vec(&[k, n], b.clone()).unwrap()).unwrap();
            for i in 0..m {
                for j in 0..n {
                    let mut acc = 0.0f64;
                    let mut mag = 0.0f64;
                    for p in 0..k {
                        acc += a[i * k + p] as f64 * b[p * n + j] as f64;
                        mag += (a[i * k + p] as f64 * b[p * n + j] as f64).abs();
                    }
                    let got = out.data()[i * n + j] as f64;
                    prop_assert!((got - acc).abs() <= 1e-5 * mag.max(1e-3), "{got} vs {acc}");
                }
            }
        }

        #[test]
        fn zero_pad_preserves_sum(d in 1usize..4, h in 1usize..4, w in 1usize..4, p in 0usize..3, seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let data: Vec<f32> = (0..2 * d * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
            let x = Tensor::from_vec(&[1, 2, d, h, w], data).unwrap();
            let y = pad3d(&x, [(p, 1), (0, p), (p, p)], 0.0).unwrap();
            prop_assert_eq!(y.sum(), x.sum());
        }
    }
}
