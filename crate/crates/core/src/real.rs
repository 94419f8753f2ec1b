use core::fmt::{Debug, Display};
use core::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating point element type: `f32` for training and inference, `f64` for gradient checks.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Display + Sum + Send + Sync + 'static
{
    /// `c = alpha * a·b + beta * c` over strided row-major views.
    ///
    /// Every (offset, stride) pair must address elements inside the given slices.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: (&[Self], isize, isize),
        b: (&[Self], isize, isize),
        beta: Self,
        c: (&mut [Self], isize, isize),
    );

    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("representable literal")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    /// Exponential used by the softmax and GELU kernels.
    fn fast_exp(self) -> Self;

    fn fast_tanh(self) -> Self {
        let e = (self + self).fast_exp();
        Self::one() - (Self::one() + Self::one()) / (e + Self::one())
    }
}

/// Branch-free `exp` for `f32`: range reduction by `ln 2` and a degree-6 polynomial,
/// within a few ulp of the correctly rounded result.
pub fn exp_f32(x: f32) -> f32 {
    const SHIFT: f32 = 12_582_912.0;
    let x = x.clamp(-87.0, 88.0);
    let t = x * core::f32::consts::LOG2_E + SHIFT;
    let n = t - SHIFT;
    let r = x - n * 0.693_145_75 - n * 1.428_606_8e-6;
    let mut p = 1.987_569_1e-4_f32;
    p = p * r + 1.398_199_9e-3;
    p = p * r + 8.333_452e-3;
    p = p * r + 4.166_579_6e-2;
    p = p * r + 1.666_666_5e-1;
    p = p * r + 5.000_000_1e-1;
    let y = p * r * r + r + 1.0;
    let bits = (t.to_bits() as i32 - 0x4B40_0000 + 127) << 23;
    y * f32::from_bits(bits as u32)
}

fn max_index(rows: usize, cols: usize, rs: isize, cs: isize) -> usize {
    if rows == 0 || cols == 0 {
        return 0;
    }
    ((rows as isize - 1) * rs + (cols as isize - 1) * cs) as usize
}

macro_rules! impl_real {
    ($t:ty, $f:path, $e:path) => {
        impl Real for $t {
            fn fast_exp(self) -> Self {
                $e(self)
            }

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: (&[Self], isize, isize),
                b: (&[Self], isize, isize),
                beta: Self,
                c: (&mut [Self], isize, isize),
            ) {
                assert!(a.1 >= 0 && a.2 >= 0 && b.1 >= 0 && b.2 >= 0 && c.1 >= 0 && c.2 >= 0);
                if m * n == 0 {
                    return;
                }
                assert!(k == 0 || max_index(m, k, a.1, a.2) < a.0.len(), "gemm: lhs view out of bounds");
                assert!(k == 0 || max_index(k, n, b.1, b.2) < b.0.len(), "gemm: rhs view out of bounds");
                assert!(max_index(m, n, c.1, c.2) < c.0.len(), "gemm: output view out of bounds");
                // SAFETY: all three strided views were bounds-checked above and `c` is a
                // unique borrow, so the kernel reads and writes only owned memory.
                unsafe {
                    $f(
                        m,
                        k,
                        n,
                        1.0,
                        a.0.as_ptr(),
                        a.1,
                        a.2,
                        b.0.as_ptr(),
                        b.1,
                        b.2,
                        beta,
                        c.0.as_mut_ptr(),
                        c.1,
                        c.2,
                    );
                }
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm, exp_f32);
impl_real!(f64, matrixmultiply::dgemm, libm::exp);
