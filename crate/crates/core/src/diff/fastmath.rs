//! Branch-free `tanh` that the compiler can vectorize.
//!
//! libm's `tanh` dominates the cost of wide hidden layers, so this computes it
//! from a reduced-argument `expm1` with plain arithmetic and bit tricks only.

const LN2_HI: f64 = 6.931_471_803_691_238e-1;
const LN2_LO: f64 = 1.908_214_929_270_587_7e-10;
const INV_LN2: f64 = std::f64::consts::LOG2_E;
const ROUNDING_SHIFT: f64 = 6_755_399_441_055_744.0;

const SIGN_BIT: u64 = 1 << 63;

/// Beyond this `tanh` rounds to ±1.
const SATURATION: f64 = 22.0;

/// `expm1(x)` for `x` in `[-2·SATURATION, 0]`.
#[inline(always)]
fn expm1_nonpositive(x: f64) -> f64 {
    // Round to nearest via the 1.5·2^52 shift; k also sits in the low bits.
    let shifted = x * INV_LN2 + ROUNDING_SHIFT;
    let k = shifted - ROUNDING_SHIFT;
    let k_int = shifted.to_bits().wrapping_sub(ROUNDING_SHIFT.to_bits());
    // Cody-Waite reduction; r lies in [-ln2/2, ln2/2].
    let r = (x - k * LN2_HI) - k * LN2_LO;
    // Taylor series of expm1(r) through r^13; truncation below 1e-17 relative.
    let mut p = 1.0 / 6_227_020_800.0;
    p = p * r + 1.0 / 479_001_600.0;
    p = p * r + 1.0 / 39_916_800.0;
    p = p * r + 1.0 / 3_628_800.0;
    p = p * r + 1.0 / 362_880.0;
    p = p * r + 1.0 / 40_320.0;
    p = p * r + 1.0 / 5_040.0;
    p = p * r + 1.0 / 720.0;
    p = p * r + 1.0 / 120.0;
    p = p * r + 1.0 / 24.0;
    p = p * r + 1.0 / 6.0;
    p = p * r + 0.5;
    let em1_r = r + r * r * p;
    // expm1(x) = 2^k·expm1(r) + (2^k − 1); k ≥ −64 so 2^k stays normal.
    let two_k = f64::from_bits(k_int.wrapping_add(1023) << 52);
    two_k * em1_r + (two_k - 1.0)
}

/// Hyperbolic tangent, within a few ulp of `f64::tanh`.
#[inline(always)]
pub(crate) fn tanh(x: f64) -> f64 {
    let sign = x.to_bits() & SIGN_BIT;
    let a = f64::from_bits(x.to_bits() & !SIGN_BIT);
    // Not `min`: NaN must propagate.
    let a = if a > SATURATION { SATURATION } else { a };
    let t = expm1_nonpositive(-2.0 * a);
    let mag = -t / (2.0 + t);
    f64::from_bits((mag.to_bits() & !SIGN_BIT) | sign)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ulps(a: f64, b: f64) -> u64 {
        (a.to_bits() as i64 - b.to_bits() as i64).unsigned_abs()
    }

    #[test]
    fn dense_sweep_against_libm() {
        let mut worst = 0;
        let mut x = -30.0;
        while x <= 30.0 {
            worst = worst.max(ulps(tanh(x), x.tanh()));
            x += 1.0e-4;
        }
        assert!(worst <= 4, "worst error {worst} ulp");
    }

    #[test]
    fn tiny_and_special_arguments() {
        for &x in &[0.0, -0.0, 1e-300, -1e-300, 1e-12, -3e-9, 5e-5] {
            assert!(ulps(tanh(x), x.tanh()) <= 2, "x = {x}");
        }
        assert_eq!(tanh(0.0).to_bits(), 0.0f64.to_bits());
        assert_eq!(tanh(-0.0).to_bits(), (-0.0f64).to_bits());
        assert_eq!(tanh(f64::INFINITY), 1.0);
        assert_eq!(tanh(f64::NEG_INFINITY), -1.0);
        assert_eq!(tanh(1e10), 1.0);
        assert!(tanh(f64::NAN).is_nan());
    }

    proptest! {
        #[test]
        fn close_to_libm(x in -40.0f64..40.0) {
            prop_assert!(ulps(tanh(x), x.tanh()) <= 4);
        }

        #[test]
        fn odd_function(x in -40.0f64..40.0) {
            prop_assert_eq!(tanh(-x), -tanh(x));
        }
    }
}
