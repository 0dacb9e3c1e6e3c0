//! Scalar abstraction for the numeric core.
//!
//! All geometry, dynamics and tensor math is generic over [`Real`] so the
//! same code runs in f32 (learned components) and f64 (solver stack, and
//! high-precision gradient checks). Concrete aliases live at the crate root.

use num_traits::{FromPrimitive, ToPrimitive};

/// Floating-point scalar usable across the tensor engine, the rigid-body
/// stack and the solvers. `f32` and `f64` implement it.
pub trait Real:
    nalgebra::RealField + Copy + Default + FromPrimitive + ToPrimitive + std::iter::Sum
{
    /// Lossy conversion from an `f64` constant.
    fn of(x: f64) -> Self {
        <Self as FromPrimitive>::from_f64(x).expect("scalar conversion")
    }

    /// Widen to f64 (exact for f32 and f64).
    fn as_f64(self) -> f64 {
        <Self as ToPrimitive>::to_f64(&self).expect("scalar conversion")
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Sum of `terms` in ascending value order.
///
/// The result depends only on the multiset of values, not on their input
/// order, which makes reductions over unordered token/slot axes exactly
/// permutation-invariant. Only used on short axes (slots, condition tokens).
pub fn ordered_sum<S: Real>(terms: &mut [S]) -> S {
    terms.sort_unstable_by(|a, b| a.partial_cmp(b).expect("NaN in ordered_sum"));
    let mut acc = S::zero();
    for &t in terms.iter() {
        acc += t;
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ordered_sum_is_permutation_invariant() {
        let vals: Vec<f32> = vec![1.0e-3, 7.25, -3.5e2, 0.1234, 9.0e4, -1.0e-6];
        let mut a = vals.clone();
        let sa = ordered_sum(&mut a);
        // try a handful of permutations
        let perms = [
            [5usize, 4, 3, 2, 1, 0],
            [2, 0, 5, 1, 4, 3],
            [3, 5, 0, 4, 2, 1],
        ];
        for p in perms {
            let mut b: Vec<f32> = p.iter().map(|&i| vals[i]).collect();
            assert_eq!(sa.to_bits(), ordered_sum(&mut b).to_bits());
        }
    }

    #[test]
    fn conversions_round_trip() {
        assert_eq!(<f32 as Real>::of(0.25).as_f64(), 0.25);
        assert_eq!(<f64 as Real>::of(-3.5), -3.5);
    }
}
