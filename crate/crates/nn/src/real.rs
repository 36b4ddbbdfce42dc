use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Scalar type the network is generic over: `f32` for runs, `f64` for
/// gradient checks.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Sum + AddAssign + SubAssign + MulAssign + Send + Sync + 'static
{
    /// `c = alpha * a(m x k) * b(k x n) + beta * c`, strides in elements.
    #[allow(clippy::too_many_arguments)]
    fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        a_strides: (isize, isize),
        b: &[Self],
        b_strides: (isize, isize),
        beta: Self,
        c: &mut [Self],
        c_strides: (isize, isize),
    );

    /// Elementwise logistic function in place.
    fn sigmoid_slice(values: &mut [Self]) {
        values.iter_mut().for_each(|v| *v = sigmoid(*v));
    }
}

fn extent(rows: usize, cols: usize, (rs, cs): (isize, isize)) -> usize {
    if rows == 0 || cols == 0 {
        0
    } else {
        (rows as isize - 1) as usize * rs as usize + (cols as isize - 1) as usize * cs as usize + 1
    }
}

macro_rules! impl_real {
    ($t:ty, $gemm:path, $sigmoid:path) => {
        impl Real for $t {
            fn gemm_raw(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                a_strides: (isize, isize),
                b: &[Self],
                b_strides: (isize, isize),
                beta: Self,
                c: &mut [Self],
                c_strides: (isize, isize),
            ) {
                assert!(a.len() >= extent(m, k, a_strides), "gemm: lhs too short");
                assert!(b.len() >= extent(k, n, b_strides), "gemm: rhs too short");
                assert!(c.len() >= extent(m, n, c_strides), "gemm: output too short");
                // SAFETY: every strided access stays inside the slices checked above.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        a_strides.0,
                        a_strides.1,
                        b.as_ptr(),
                        b_strides.0,
                        b_strides.1,
                        beta,
                        c.as_mut_ptr(),
                        c_strides.0,
                        c_strides.1,
                    )
                }
            }

            fn sigmoid_slice(values: &mut [Self]) {
                $sigmoid(values)
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm, fast_sigmoid_f32);
impl_real!(f64, matrixmultiply::dgemm, exact_sigmoid);

fn exact_sigmoid<T: Real>(values: &mut [T]) {
    values.iter_mut().for_each(|v| *v = sigmoid(*v));
}

/// Branch-free `exp` for f32 (Cephes polynomial, ~1 ulp on the clamped
/// range) so the logistic loop vectorizes.
#[inline(always)]
fn expf_poly(x: f32) -> f32 {
    let x = x.clamp(-87.0, 88.0);
    let t = x * std::f32::consts::LOG2_E + 0.5;
    let mut n = t as i32;
    if t < n as f32 {
        n -= 1;
    }
    let nf = n as f32;
    let r = x - nf * 0.693_359_4 + nf * 2.121_944_4e-4;
    let p = ((((1.987_569_1e-4 * r + 1.398_2e-3) * r + 8.333_452e-3) * r + 4.166_579_6e-2) * r + 0.166_666_65) * r + 0.5;
    let y = p * r * r + r + 1.0;
    y * f32::from_bits(((n + 127) as u32) << 23)
}

fn fast_sigmoid_f32(values: &mut [f32]) {
    for v in values.iter_mut() {
        *v = 1.0 / (1.0 + expf_poly(-*v));
    }
}

#[inline]
pub fn real<T: Real>(x: f64) -> T {
    T::from_f64(x).expect("representable constant")
}

/// Row-major helpers. `a` is m x k, `b` is k x n, `c` is m x n.
pub fn gemm_nn<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], beta: T, c: &mut [T]) {
    T::gemm_raw(m, k, n, T::one(), a, (k as isize, 1), b, (n as isize, 1), beta, c, (n as isize, 1));
}

/// `c = a * b^T (+ beta c)` with `a` m x k and `b` n x k.
pub fn gemm_nt<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], beta: T, c: &mut [T]) {
    T::gemm_raw(m, k, n, T::one(), a, (k as isize, 1), b, (1, k as isize), beta, c, (n as isize, 1));
}

/// `c = a^T * b (+ beta c)` with `a` k x m and `b` k x n.
pub fn gemm_tn<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], beta: T, c: &mut [T]) {
    T::gemm_raw(m, k, n, T::one(), a, (1, m as isize), b, (n as isize, 1), beta, c, (n as isize, 1));
}

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `log(1 + exp(x))` without overflow.
#[inline]
pub fn softplus<T: Real>(x: T) -> T {
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                c[i * n + j] = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
            }
        }
        c
    }

    fn transpose(rows: usize, cols: usize, a: &[f64]) -> Vec<f64> {
        let mut t = vec![0.0; a.len()];
        for i in 0..rows {
            for j in 0..cols {
                t[j * rows + i] = a[i * cols + j];
            }
        }
        t
    }

    #[test]
    fn gemm_variants_match_triple_loop() {
        let (m, k, n) = (3, 5, 4);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.91).cos()).collect();
        let want = naive(m, k, n, &a, &b);

        let mut c = vec![0.0; m * n];
        gemm_nn(m, k, n, &a, &b, 0.0, &mut c);
        let close = |c: &[f64]| c.iter().zip(&want).all(|(x, y)| (x - y).abs() < 1e-12);
        assert!(close(&c));

        let bt = transpose(k, n, &b);
        gemm_nt(m, k, n, &a, &bt, 0.0, &mut c);
        assert!(close(&c));

        let at = transpose(m, k, &a);
        gemm_tn(m, k, n, &at, &b, 0.0, &mut c);
        assert!(close(&c));

        gemm_nn(m, k, n, &a, &b, 1.0, &mut c);
        assert!(c.iter().zip(&want).all(|(x, y)| (x - 2.0 * y).abs() < 1e-12));
    }

    #[test]
    fn polynomial_exp_tracks_libm() {
        let mut worst: f32 = 0.0;
        for i in -8700..8800 {
            let x = i as f32 * 0.01;
            worst = worst.max((expf_poly(x) - x.exp()).abs() / x.exp());
        }
        assert!(worst < 1e-6, "worst relative error {worst}");
        let mut v: Vec<f32> = (-50..50).map(|i| i as f32 * 0.5).collect();
        let want: Vec<f32> = v.iter().map(|&x| sigmoid(x)).collect();
        f32::sigmoid_slice(&mut v);
        assert!(v.iter().zip(&want).all(|(a, b)| (a - b).abs() < 1e-6));
    }

    #[test]
    fn stable_logistic_pieces() {
        assert_eq!(sigmoid(0.0f64), 0.5);
        assert!(sigmoid(-800.0f64) >= 0.0 && sigmoid(800.0f64) == 1.0);
        assert!((softplus(800.0f64) - 800.0).abs() < 1e-12);
        assert!((softplus(0.0f64) - std::f64::consts::LN_2).abs() < 1e-15);
    }
}
