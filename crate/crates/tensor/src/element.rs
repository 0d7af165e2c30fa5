use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::Float;

/// Scalar type the engine can compute with.
///
/// Only `f32` and `f64` are implemented. Matrix products go through the
/// blocked GEMM kernels of `matrixmultiply`; every other reduction widens to
/// `f64` before accumulating.
pub trait Element: Float + Sum + Default + Debug + Display + Send + Sync + 'static {
    fn lift(v: f64) -> Self;
    fn widen(self) -> f64;

    /// Standard normal CDF and density at `self`.
    fn normal_cdf_pdf(self) -> (Self, Self);

    /// `c = alpha * a·b + beta * c` for an `m×k` by `k×n` product with
    /// explicit row/column strides (in elements, non-negative).
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: usize,
        csa: usize,
        b: &[Self],
        rsb: usize,
        csb: usize,
        beta: Self,
        c: &mut [Self],
        rsc: usize,
        csc: usize,
    );
}

fn extent(rows: usize, cols: usize, rs: usize, cs: usize) -> usize {
    if rows == 0 || cols == 0 {
        0
    } else {
        (rows - 1) * rs + (cols - 1) * cs + 1
    }
}

macro_rules! impl_element {
    ($t:ty, $kernel:path, $erf:path) => {
        impl Element for $t {
            #[inline]
            fn lift(v: f64) -> Self {
                v as $t
            }

            #[inline]
            fn widen(self) -> f64 {
                self as f64
            }

            #[inline]
            fn normal_cdf_pdf(self) -> (Self, Self) {
                $erf(self)
            }

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                rsa: usize,
                csa: usize,
                b: &[Self],
                rsb: usize,
                csb: usize,
                beta: Self,
                c: &mut [Self],
                rsc: usize,
                csc: usize,
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                assert!(extent(m, k, rsa, csa) <= a.len(), "gemm: lhs out of bounds");
                assert!(extent(k, n, rsb, csb) <= b.len(), "gemm: rhs out of bounds");
                assert!(extent(m, n, rsc, csc) <= c.len(), "gemm: output out of bounds");
                // SAFETY: every index the kernel touches lies inside the
                // slices, as asserted above; `c` is uniquely borrowed.
                unsafe {
                    $kernel(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        rsa as isize,
                        csa as isize,
                        b.as_ptr(),
                        rsb as isize,
                        csb as isize,
                        beta,
                        c.as_mut_ptr(),
                        rsc as isize,
                        csc as isize,
                    );
                }
            }
        }
    };
}

impl_element!(f32, matrixmultiply::sgemm, normal_f32);
impl_element!(f64, matrixmultiply::dgemm, normal_f64);

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

fn normal_f64(x: f64) -> (f64, f64) {
    let cdf = 0.5 * libm::erfc(-x * std::f64::consts::FRAC_1_SQRT_2);
    (cdf, FRAC_1_SQRT_2PI * (-0.5 * x * x).exp())
}

/// Single-precision variant built on the Abramowitz and Stegun rational
/// approximation of erfc (absolute error below 1.5e-7), sharing one
/// exponential between the CDF and the density.
fn normal_f32(x: f32) -> (f32, f32) {
    let e = (-0.5 * x * x).exp();
    let z = x.abs() * std::f32::consts::FRAC_1_SQRT_2;
    let t = 1.0 / (1.0 + 0.327_591_1 * z);
    let poly = t * (0.254_829_6 + t * (-0.284_496_74 + t * (1.421_413_7 + t * (-1.453_152 + t * 1.061_405_4))));
    let tail = 0.5 * poly * e;
    let cdf = if x >= 0.0 { 1.0 - tail } else { tail };
    (cdf, FRAC_1_SQRT_2PI as f32 * e)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_precision_normal_tracks_double() {
        for i in -2000..=2000 {
            let x = i as f64 * 0.005;
            let (c64, p64) = normal_f64(x);
            let (c32, p32) = normal_f32(x as f32);
            assert!((c64 - c32 as f64).abs() < 3e-7, "cdf at {x}: {}", (c64 - c32 as f64).abs());
            assert!((p64 - p32 as f64).abs() < 1e-7, "pdf at {x}");
        }
    }
}
