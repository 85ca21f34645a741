use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// Strided view of a row-major buffer used by [`gemm`].
#[derive(Debug, Clone, Copy)]
pub struct Layout {
    pub off: usize,
    pub rs: usize,
    pub cs: usize,
}

impl Layout {
    /// Plain row-major matrix with `cols` columns.
    pub fn rows(cols: usize) -> Self {
        Layout {
            off: 0,
            rs: cols,
            cs: 1,
        }
    }

    /// Transposed view of a row-major matrix stored with `cols` columns.
    pub fn trans(cols: usize) -> Self {
        Layout {
            off: 0,
            rs: 1,
            cs: cols,
        }
    }

    pub fn at(self, off: usize) -> Self {
        Layout { off, ..self }
    }

    fn span(self, rows: usize, cols: usize) -> usize {
        if rows == 0 || cols == 0 {
            return 0;
        }
        self.off + (rows - 1) * self.rs + (cols - 1) * self.cs + 1
    }
}

/// Floating point element type of the substrate (`f32` for training, `f64`
/// for oracles and gradient checks).
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + 'static
{
    const DTYPE: DType;

    /// `C = alpha * A B + beta * C` over strided views.
    ///
    /// # Safety
    /// The caller guarantees every view fits in its buffer.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        la: Layout,
        b: *const Self,
        lb: Layout,
        beta: Self,
        c: *mut Self,
        lc: Layout,
    );

    fn write_le(values: &[Self], out: &mut Vec<u8>);

    fn read_le(bytes: &[u8]) -> Vec<Self>;

    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("representable literal")
    }
}

macro_rules! impl_real {
    ($t:ty, $dtype:expr, $gemm:path, $n:expr) => {
        impl Real for $t {
            const DTYPE: DType = $dtype;

            unsafe fn gemm_raw(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: *const Self,
                la: Layout,
                b: *const Self,
                lb: Layout,
                beta: Self,
                c: *mut Self,
                lc: Layout,
            ) {
                $gemm(
                    m,
                    k,
                    n,
                    alpha,
                    a.add(la.off),
                    la.rs as isize,
                    la.cs as isize,
                    b.add(lb.off),
                    lb.rs as isize,
                    lb.cs as isize,
                    beta,
                    c.add(lc.off),
                    lc.rs as isize,
                    lc.cs as isize,
                );
            }

            fn write_le(values: &[Self], out: &mut Vec<u8>) {
                out.reserve(values.len() * $n);
                for v in values {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }

            fn read_le(bytes: &[u8]) -> Vec<Self> {
                bytes
                    .chunks_exact($n)
                    .map(|c| <$t>::from_le_bytes(c.try_into().unwrap()))
                    .collect()
            }
        }
    };
}

impl_real!(f32, DType::F32, matrixmultiply::sgemm, 4);
impl_real!(f64, DType::F64, matrixmultiply::dgemm, 8);

/// Bounds-checked strided matrix product `C = alpha * A(m×k) B(k×n) + beta * C`.
#[allow(clippy::too_many_arguments)]
pub fn gemm<F: Real>(
    m: usize,
    k: usize,
    n: usize,
    alpha: F,
    a: &[F],
    la: Layout,
    b: &[F],
    lb: Layout,
    beta: F,
    c: &mut [F],
    lc: Layout,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        let lc_span = lc.span(m, n);
        assert!(lc_span <= c.len());
        for i in 0..m {
            for j in 0..n {
                let idx = lc.off + i * lc.rs + j * lc.cs;
                c[idx] = if beta == F::zero() {
                    F::zero()
                } else {
                    beta * c[idx]
                };
            }
        }
        return;
    }
    assert!(la.span(m, k) <= a.len(), "gemm: A view out of bounds");
    assert!(lb.span(k, n) <= b.len(), "gemm: B view out of bounds");
    assert!(lc.span(m, n) <= c.len(), "gemm: C view out of bounds");
    // SAFETY: every view was checked against its buffer above and `c` is
    // borrowed mutably, so it cannot alias `a` or `b`.
    unsafe {
        F::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            la,
            b.as_ptr(),
            lb,
            beta,
            c.as_mut_ptr(),
            lc,
        )
    }
}

/// `A(m×k) · B(k×n)`, both row-major.
pub fn matmul_nn<F: Real>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut c = vec![F::zero(); m * n];
    gemm(
        m,
        k,
        n,
        F::one(),
        a,
        Layout::rows(k),
        b,
        Layout::rows(n),
        F::zero(),
        &mut c,
        Layout::rows(n),
    );
    c
}

/// `A(m×k) · B(n×k)ᵀ`.
pub fn matmul_nt<F: Real>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut c = vec![F::zero(); m * n];
    gemm(
        m,
        k,
        n,
        F::one(),
        a,
        Layout::rows(k),
        b,
        Layout::trans(k),
        F::zero(),
        &mut c,
        Layout::rows(n),
    );
    c
}

/// `C += A(m×k) · B(k×n)`.
pub fn acc_nn<F: Real>(c: &mut [F], a: &[F], b: &[F], m: usize, k: usize, n: usize) {
    gemm(
        m,
        k,
        n,
        F::one(),
        a,
        Layout::rows(k),
        b,
        Layout::rows(n),
        F::one(),
        c,
        Layout::rows(n),
    );
}

/// `C += A(m×k) · B(n×k)ᵀ`.
pub fn acc_nt<F: Real>(c: &mut [F], a: &[F], b: &[F], m: usize, k: usize, n: usize) {
    gemm(
        m,
        k,
        n,
        F::one(),
        a,
        Layout::rows(k),
        b,
        Layout::trans(k),
        F::one(),
        c,
        Layout::rows(n),
    );
}

/// `C += A(k×m)ᵀ · B(k×n)`.
pub fn acc_tn<F: Real>(c: &mut [F], a: &[F], b: &[F], m: usize, k: usize, n: usize) {
    gemm(
        m,
        k,
        n,
        F::one(),
        a,
        Layout::trans(m),
        b,
        Layout::rows(n),
        F::one(),
        c,
        Layout::rows(n),
    );
}
