//! Scalar types the network engine is generic over.
//!
//! `f64` drives ordinary loss and gradient evaluation. [`Dual`] carries a
//! directional tangent alongside every value; running the reverse pass in
//! dual arithmetic with parameter tangents `v` yields the gradient in the
//! value parts and the Hessian-vector product `H·v` in the tangent parts.

use std::fmt::Debug;
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

/// Dense matrix operand: row-major by default, arbitrary strides allowed.
#[derive(Clone, Copy, Debug)]
pub struct MatRef<'a, T> {
    pub data: &'a [T],
    pub rows: usize,
    pub cols: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a, T> MatRef<'a, T> {
    pub fn row_major(data: &'a [T], rows: usize, cols: usize) -> Self {
        Self {
            data,
            rows,
            cols,
            row_stride: cols,
            col_stride: 1,
        }
    }

    /// View of the transpose without copying.
    pub fn t(self) -> Self {
        Self {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            row_stride: self.col_stride,
            col_stride: self.row_stride,
        }
    }

    fn check(&self) {
        if self.rows > 0 && self.cols > 0 {
            let last = (self.rows - 1) * self.row_stride + (self.cols - 1) * self.col_stride;
            assert!(last < self.data.len(), "matrix view exceeds its buffer");
        }
    }
}

/// Mutable destination of a matrix product.
#[derive(Debug)]
pub struct MatMut<'a, T> {
    pub data: &'a mut [T],
    pub rows: usize,
    pub cols: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a, T> MatMut<'a, T> {
    pub fn row_major(data: &'a mut [T], rows: usize, cols: usize) -> Self {
        Self {
            data,
            rows,
            cols,
            row_stride: cols,
            col_stride: 1,
        }
    }

    fn check(&self) {
        if self.rows > 0 && self.cols > 0 {
            let last = (self.rows - 1) * self.row_stride + (self.cols - 1) * self.col_stride;
            assert!(last < self.data.len(), "matrix view exceeds its buffer");
        }
    }
}

pub trait Scalar:
    Copy
    + Debug
    + Default
    + Send
    + Sync
    + 'static
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
{
    fn from_f64(x: f64) -> Self;
    fn value(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn tanh(self) -> Self;

    #[inline]
    fn zero() -> Self {
        Self::from_f64(0.0)
    }

    #[inline]
    fn scale(self, k: f64) -> Self {
        self * Self::from_f64(k)
    }

    /// `c = a·b` when `accumulate` is false, `c += a·b` otherwise.
    fn gemm(a: MatRef<'_, Self>, b: MatRef<'_, Self>, c: MatMut<'_, Self>, accumulate: bool);
}

fn check_dims<T>(a: &MatRef<'_, T>, b: &MatRef<'_, T>, c: &MatMut<'_, T>) {
    assert_eq!(a.cols, b.rows, "inner dimensions differ");
    assert_eq!(a.rows, c.rows, "output rows differ");
    assert_eq!(b.cols, c.cols, "output columns differ");
    a.check();
    b.check();
    c.check();
}

impl Scalar for f64 {
    #[inline]
    fn from_f64(x: f64) -> Self {
        x
    }
    #[inline]
    fn value(self) -> f64 {
        self
    }
    #[inline]
    fn exp(self) -> Self {
        f64::exp(self)
    }
    #[inline]
    fn ln(self) -> Self {
        f64::ln(self)
    }
    #[inline]
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    #[inline]
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
    #[inline]
    fn scale(self, k: f64) -> Self {
        self * k
    }

    fn gemm(a: MatRef<'_, f64>, b: MatRef<'_, f64>, c: MatMut<'_, f64>, accumulate: bool) {
        check_dims(&a, &b, &c);
        let (m, k, n) = (a.rows, a.cols, b.cols);
        if m == 0 || n == 0 {
            return;
        }
        if k == 0 {
            if !accumulate {
                for r in 0..m {
                    for col in 0..n {
                        c.data[r * c.row_stride + col * c.col_stride] = 0.0;
                    }
                }
            }
            return;
        }
        let beta = if accumulate { 1.0 } else { 0.0 };
        // SAFETY: every view was bounds-checked against its buffer above and
        // `c` is uniquely borrowed.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.data.as_ptr(),
                a.row_stride as isize,
                a.col_stride as isize,
                b.data.as_ptr(),
                b.row_stride as isize,
                b.col_stride as isize,
                beta,
                c.data.as_mut_ptr(),
                c.row_stride as isize,
                c.col_stride as isize,
            );
        }
    }
}

/// First-order dual number `value + tangent·ε` with `ε² = 0`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
#[repr(C)]
pub struct Dual {
    pub value: f64,
    pub tangent: f64,
}

impl Dual {
    #[inline]
    pub const fn new(value: f64, tangent: f64) -> Self {
        Self { value, tangent }
    }

    #[inline]
    pub const fn constant(value: f64) -> Self {
        Self {
            value,
            tangent: 0.0,
        }
    }
}

impl Add for Dual {
    type Output = Dual;
    #[inline]
    fn add(self, o: Dual) -> Dual {
        Dual::new(self.value + o.value, self.tangent + o.tangent)
    }
}

impl Sub for Dual {
    type Output = Dual;
    #[inline]
    fn sub(self, o: Dual) -> Dual {
        Dual::new(self.value - o.value, self.tangent - o.tangent)
    }
}

impl Mul for Dual {
    type Output = Dual;
    #[inline]
    fn mul(self, o: Dual) -> Dual {
        Dual::new(
            self.value * o.value,
            self.value * o.tangent + self.tangent * o.value,
        )
    }
}

impl Div for Dual {
    type Output = Dual;
    #[inline]
    fn div(self, o: Dual) -> Dual {
        let q = self.value / o.value;
        Dual::new(q, (self.tangent - q * o.tangent) / o.value)
    }
}

impl Neg for Dual {
    type Output = Dual;
    #[inline]
    fn neg(self) -> Dual {
        Dual::new(-self.value, -self.tangent)
    }
}

impl AddAssign for Dual {
    #[inline]
    fn add_assign(&mut self, o: Dual) {
        *self = *self + o;
    }
}

impl SubAssign for Dual {
    #[inline]
    fn sub_assign(&mut self, o: Dual) {
        *self = *self - o;
    }
}

impl MulAssign for Dual {
    #[inline]
    fn mul_assign(&mut self, o: Dual) {
        *self = *self * o;
    }
}

impl Scalar for Dual {
    #[inline]
    fn from_f64(x: f64) -> Self {
        Dual::constant(x)
    }
    #[inline]
    fn value(self) -> f64 {
        self.value
    }
    #[inline]
    fn exp(self) -> Self {
        let e = self.value.exp();
        Dual::new(e, e * self.tangent)
    }
    #[inline]
    fn ln(self) -> Self {
        Dual::new(self.value.ln(), self.tangent / self.value)
    }
    #[inline]
    fn sqrt(self) -> Self {
        let s = self.value.sqrt();
        Dual::new(s, self.tangent / (2.0 * s))
    }
    #[inline]
    fn tanh(self) -> Self {
        let t = self.value.tanh();
        Dual::new(t, (1.0 - t * t) * self.tangent)
    }
    #[inline]
    fn scale(self, k: f64) -> Self {
        Dual::new(self.value * k, self.tangent * k)
    }

    /// Three real products: `(Av + At ε)(Bv + Bt ε) = AvBv + (AvBt + AtBv) ε`.
    fn gemm(a: MatRef<'_, Dual>, b: MatRef<'_, Dual>, c: MatMut<'_, Dual>, accumulate: bool) {
        check_dims(&a, &b, &c);
        let (m, k, n) = (a.rows, a.cols, b.cols);
        if m == 0 || n == 0 {
            return;
        }
        if k == 0 {
            if !accumulate {
                for r in 0..m {
                    for col in 0..n {
                        c.data[r * c.row_stride + col * c.col_stride] = Dual::default();
                    }
                }
            }
            return;
        }
        let moves = |x: &MatRef<'_, Dual>| {
            let extent = (x.rows - 1) * x.row_stride + (x.cols - 1) * x.col_stride + 1;
            x.data[..extent].iter().any(|d| d.tangent != 0.0)
        };
        let (a_moves, b_moves) = (moves(&a), moves(&b));
        // `Dual` is `repr(C)`: values and tangents interleave with stride 2.
        let part = |x: &MatRef<'_, Dual>, offset: usize| {
            // SAFETY: offset is 0 or 1 and stays inside the first element.
            unsafe { (x.data.as_ptr() as *const f64).add(offset) }
        };
        let (ars, acs) = (2 * a.row_stride as isize, 2 * a.col_stride as isize);
        let (brs, bcs) = (2 * b.row_stride as isize, 2 * b.col_stride as isize);
        let (crs, ccs) = (2 * c.row_stride as isize, 2 * c.col_stride as isize);
        let c_base = c.data.as_mut_ptr() as *mut f64;
        let beta = if accumulate { 1.0 } else { 0.0 };
        // SAFETY: every view was bounds-checked in units of `Dual` and the
        // f64 strides address the matching fields; `c` is uniquely borrowed
        // and never aliases `a` or `b`.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                part(&a, 0),
                ars,
                acs,
                part(&b, 0),
                brs,
                bcs,
                beta,
                c_base,
                crs,
                ccs,
            );
            let mut tangent_beta = beta;
            if b_moves {
                matrixmultiply::dgemm(
                    m,
                    k,
                    n,
                    1.0,
                    part(&a, 0),
                    ars,
                    acs,
                    part(&b, 1),
                    brs,
                    bcs,
                    tangent_beta,
                    c_base.add(1),
                    crs,
                    ccs,
                );
                tangent_beta = 1.0;
            }
            if a_moves {
                matrixmultiply::dgemm(
                    m,
                    k,
                    n,
                    1.0,
                    part(&a, 1),
                    ars,
                    acs,
                    part(&b, 0),
                    brs,
                    bcs,
                    tangent_beta,
                    c_base.add(1),
                    crs,
                    ccs,
                );
                tangent_beta = 1.0;
            }
            if tangent_beta == 0.0 {
                for r in 0..m {
                    for col in 0..n {
                        *c_base.add(1).offset(r as isize * crs + col as isize * ccs) = 0.0;
                    }
                }
            }
        }
    }
}
