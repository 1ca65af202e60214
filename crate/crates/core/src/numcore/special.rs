//! Deterministic elementary functions and the standard normal CDF.
//!
//! The augmentation and sampling paths must produce identical bytes on every
//! platform, so nothing here calls the system libm. `det_exp`, `det_ln`,
//! `det_sin` and `det_cos` use explicit range reduction plus fixed
//! polynomials; `sqrt` is IEEE-exact already and used directly.
//!
//! `std_normal_cdf` evaluates Phi via the complementary error function with
//! the classic Cody rational minimax approximation (SPECFUN coefficients),
//! giving ~1e-15 absolute error, far inside the 1e-7 contract.

use crate::error::{Error, Result};

const LOG2E: f64 = 1.442_695_040_888_963_4;
const LN2_HI: f64 = 6.931_471_803_691_238_16e-1;
const LN2_LO: f64 = 1.908_214_929_270_587_700_02e-10;

/// Reciprocal factorials 1/2! .. 1/13! for the exp kernel.
const EXP_C: [f64; 12] = [
    5.0e-1,
    1.666_666_666_666_666_6e-1,
    4.166_666_666_666_666_4e-2,
    8.333_333_333_333_333e-3,
    1.388_888_888_888_889e-3,
    1.984_126_984_126_984e-4,
    2.480_158_730_158_73e-5,
    2.755_731_922_398_589_3e-6,
    2.755_731_922_398_589e-7,
    2.505_210_838_544_172e-8,
    2.087_675_698_786_81e-9,
    1.605_904_383_682_161_3e-10,
];

/// exp(x) with explicit range reduction: x = k*ln2 + r, |r| <= ln2/2,
/// exp(r) by degree-13 Taylor, scaling by 2^k through the exponent bits.
pub fn det_exp(x: f64) -> f64 {
    if x.is_nan() {
        return f64::NAN;
    }
    if x > 709.8 {
        return f64::INFINITY;
    }
    if x < -745.2 {
        return 0.0;
    }
    let k = (x * LOG2E).round();
    let r = (x - k * LN2_HI) - k * LN2_LO;
    let mut poly = EXP_C[EXP_C.len() - 1];
    for c in EXP_C.iter().rev().skip(1) {
        poly = poly * r + c;
    }
    let er = 1.0 + r + poly * r * r;
    scale_by_pow2(er, k as i64)
}

fn scale_by_pow2(v: f64, k: i64) -> f64 {
    if k >= -1021 && k <= 1023 {
        v * f64::from_bits(((k + 1023) as u64) << 52)
    } else if k > 1023 {
        f64::INFINITY
    } else {
        // Subnormal landing zone: scale in two exact steps.
        let first = f64::from_bits(((-1000i64 + 1023) as u64) << 52);
        let rest = k + 1000;
        if rest < -1074 {
            0.0
        } else {
            (v * first) * f64::from_bits(((rest.max(-1074) + 1023).max(0) as u64) << 52)
        }
    }
}

/// Coefficients 2/3, 2/5, ... 2/19 for the atanh series in `det_ln`.
const LN_C: [f64; 9] = [
    6.666_666_666_666_666e-1,
    4.0e-1,
    2.857_142_857_142_857e-1,
    2.222_222_222_222_222e-1,
    1.818_181_818_181_818_2e-1,
    1.538_461_538_461_538_5e-1,
    1.333_333_333_333_333_3e-1,
    1.176_470_588_235_294_1e-1,
    1.052_631_578_947_368_4e-1,
];

/// ln(x) via mantissa/exponent split and the atanh series at
/// s = (m-1)/(m+1), m in [sqrt(2)/2, sqrt(2)).
pub fn det_ln(x: f64) -> f64 {
    if x.is_nan() || x < 0.0 {
        return f64::NAN;
    }
    if x == 0.0 {
        return f64::NEG_INFINITY;
    }
    if x.is_infinite() {
        return f64::INFINITY;
    }
    let mut x = x;
    let mut shift = 0i64;
    if x < f64::MIN_POSITIVE {
        // Subnormal: renormalize first.
        x *= f64::from_bits((54 + 1023) << 52);
        shift -= 54;
    }
    let bits = x.to_bits();
    let mut e = ((bits >> 52) & 0x7ff) as i64 - 1022 + shift;
    let mut m = f64::from_bits((bits & 0x000f_ffff_ffff_ffff) | (1022u64 << 52));
    if m < std::f64::consts::FRAC_1_SQRT_2 {
        m *= 2.0;
        e -= 1;
    }
    let s = (m - 1.0) / (m + 1.0);
    let s2 = s * s;
    let mut poly = LN_C[LN_C.len() - 1];
    for c in LN_C.iter().rev().skip(1) {
        poly = poly * s2 + c;
    }
    let r = s * (2.0 + s2 * poly);
    let ef = e as f64;
    ef * LN2_HI + (r + ef * LN2_LO)
}

const PIO2_HI: f64 = 1.570_796_326_794_896_558e0;
const PIO2_LO: f64 = 6.123_233_995_736_766_04e-17;
const FRAC_2_PI: f64 = 0.636_619_772_367_581_3;

const SIN_C: [f64; 7] = [
    -1.666_666_666_666_666_6e-1,
    8.333_333_333_333_333e-3,
    -1.984_126_984_126_984e-4,
    2.755_731_922_398_589_3e-6,
    -2.505_210_838_544_172e-8,
    1.605_904_383_682_161_3e-10,
    -7.647_163_731_819_816e-13,
];
const COS_C: [f64; 7] = [
    -5.0e-1,
    4.166_666_666_666_666_4e-2,
    -1.388_888_888_888_888_9e-3,
    2.480_158_730_158_73e-5,
    -2.755_731_922_398_589e-7,
    2.087_675_698_786_81e-9,
    -1.147_074_559_772_972_5e-11,
];

fn sin_kernel(r: f64) -> f64 {
    let r2 = r * r;
    let mut p = SIN_C[6];
    for c in SIN_C.iter().rev().skip(1) {
        p = p * r2 + c;
    }
    r + r * r2 * p
}

fn cos_kernel(r: f64) -> f64 {
    let r2 = r * r;
    let mut p = COS_C[6];
    for c in COS_C.iter().rev().skip(1) {
        p = p * r2 + c;
    }
    1.0 + r2 * p
}

/// sin(x) for |x| <= 1e4 (sufficient range reduction for small rotations).
pub fn det_sin(x: f64) -> f64 {
    let k = (x * FRAC_2_PI).round();
    let r = (x - k * PIO2_HI) - k * PIO2_LO;
    match (k as i64).rem_euclid(4) {
        0 => sin_kernel(r),
        1 => cos_kernel(r),
        2 => -sin_kernel(r),
        _ => -cos_kernel(r),
    }
}

/// cos(x) for |x| <= 1e4.
pub fn det_cos(x: f64) -> f64 {
    let k = (x * FRAC_2_PI).round();
    let r = (x - k * PIO2_HI) - k * PIO2_LO;
    match (k as i64).rem_euclid(4) {
        0 => cos_kernel(r),
        1 => -sin_kernel(r),
        2 => -cos_kernel(r),
        _ => sin_kernel(r),
    }
}

// Cody's rational minimax coefficients for erf/erfc (SPECFUN).
const ERF_A: [f64; 5] = [
    3.161_123_743_870_565_6e0,
    1.138_641_541_510_501_56e2,
    3.774_852_376_853_020_2e2,
    3.209_377_589_138_469_47e3,
    1.857_777_061_846_031_53e-1,
];
const ERF_B: [f64; 4] = [
    2.360_129_095_234_412_09e1,
    2.440_246_379_344_441_73e2,
    1.282_616_526_077_372_28e3,
    2.844_236_833_439_170_62e3,
];
const ERF_C: [f64; 9] = [
    5.641_884_969_886_700_89e-1,
    8.883_149_794_388_375_94e0,
    6.611_919_063_714_162_95e1,
    2.986_351_381_974_001_31e2,
    8.819_522_212_417_690_9e2,
    1.712_047_612_634_070_58e3,
    2.051_078_377_826_071_47e3,
    1.230_339_354_797_997_25e3,
    2.153_115_354_744_038_46e-8,
];
const ERF_D: [f64; 8] = [
    1.574_492_611_070_983_47e1,
    1.176_939_508_913_124_99e2,
    5.371_811_018_620_098_58e2,
    1.621_389_574_566_690_19e3,
    3.290_799_235_733_459_63e3,
    4.362_619_090_143_247_16e3,
    3.439_367_674_143_721_64e3,
    1.230_339_354_803_749_42e3,
];
const ERF_P: [f64; 6] = [
    3.053_266_349_612_323_44e-1,
    3.603_448_999_498_044_39e-1,
    1.257_817_261_112_292_46e-1,
    1.608_378_514_874_227_66e-2,
    6.587_491_615_298_378_03e-4,
    1.631_538_713_730_209_78e-2,
];
const ERF_Q: [f64; 5] = [
    2.568_520_192_289_822_42e0,
    1.872_952_849_923_460_47e0,
    5.279_051_029_514_284_12e-1,
    6.051_834_131_244_131_91e-2,
    2.335_204_976_268_691_85e-3,
];
const SQRPI: f64 = 5.641_895_835_477_562_87e-1;

/// erfc(y) for y >= 0.46875 (shared tail of Cody's regions 2 and 3).
fn erfc_tail(y: f64) -> f64 {
    let result = if y <= 4.0 {
        let mut xnum = ERF_C[8] * y;
        let mut xden = y;
        for i in 0..7 {
            xnum = (xnum + ERF_C[i]) * y;
            xden = (xden + ERF_D[i]) * y;
        }
        (xnum + ERF_C[7]) / (xden + ERF_D[7])
    } else {
        if y >= 26.55 {
            return 0.0;
        }
        let ysq = 1.0 / (y * y);
        let mut xnum = ERF_P[5] * ysq;
        let mut xden = ysq;
        for i in 0..4 {
            xnum = (xnum + ERF_P[i]) * ysq;
            xden = (xden + ERF_Q[i]) * ysq;
        }
        let r = ysq * (xnum + ERF_P[4]) / (xden + ERF_Q[4]);
        (SQRPI - r) / y
    };
    // exp(-y^2) split into an exactly representable square plus a remainder
    // to avoid cancellation (Cody's trick).
    let ysq = (y * 16.0).trunc() / 16.0;
    let del = (y - ysq) * (y + ysq);
    det_exp(-ysq * ysq) * det_exp(-del) * result
}

/// Error function, |error| ~ 1e-15.
pub fn erf(x: f64) -> f64 {
    if x.is_nan() {
        return f64::NAN;
    }
    let y = x.abs();
    if y <= 0.46875 {
        let ysq = y * y;
        let mut xnum = ERF_A[4] * ysq;
        let mut xden = ysq;
        for i in 0..3 {
            xnum = (xnum + ERF_A[i]) * ysq;
            xden = (xden + ERF_B[i]) * ysq;
        }
        return x * (xnum + ERF_A[3]) / (xden + ERF_B[3]);
    }
    let r = 1.0 - erfc_tail(y);
    if x < 0.0 {
        -r
    } else {
        r
    }
}

/// Complementary error function.
pub fn erfc(x: f64) -> f64 {
    if x.is_nan() {
        return f64::NAN;
    }
    let y = x.abs();
    if y <= 0.46875 {
        return 1.0 - erf(x);
    }
    let r = erfc_tail(y);
    if x < 0.0 {
        2.0 - r
    } else {
        r
    }
}

/// Standard normal CDF. Computed entirely in f64; NaN input is rejected.
pub fn std_normal_cdf(x: f64) -> Result<f64> {
    if x.is_nan() {
        return Err(Error::Numeric("std_normal_cdf: NaN input".into()));
    }
    Ok(0.5 * erfc(-x * std::f64::consts::FRAC_1_SQRT_2))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Quadrature oracle: Phi(x) = 1/2 + integral of the standard normal
    /// density from 0 to x, composite Simpson with 4000 panels. Independent
    /// of the rational approximation above.
    fn phi_oracle(x: f64) -> f64 {
        let n = 4000usize;
        let h = x / n as f64;
        let dens = |t: f64| (-0.5 * t * t).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let mut s = dens(0.0) + dens(x);
        for i in 1..n {
            let t = h * i as f64;
            s += dens(t) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        0.5 + s * h / 3.0
    }

    #[test]
    fn det_exp_matches_std() {
        let mut x = -700.0f64;
        while x <= 700.0 {
            let got = det_exp(x);
            let want = x.exp();
            let rel = (got - want).abs() / want.max(f64::MIN_POSITIVE);
            assert!(rel < 1e-13, "exp({x}): {got} vs {want}");
            x += 0.37;
        }
        assert_eq!(det_exp(f64::NEG_INFINITY), 0.0);
        assert_eq!(det_exp(f64::INFINITY), f64::INFINITY);
        assert_eq!(det_exp(0.0), 1.0);
    }

    #[test]
    fn det_ln_matches_std() {
        let mut x = 1e-300f64;
        while x < 1e300 {
            let got = det_ln(x);
            let want = x.ln();
            assert!((got - want).abs() <= 1e-13 * want.abs().max(1.0), "ln({x}): {got} vs {want}");
            x *= 3.7;
        }
        for &x in &[0.9999f64, 1.0, 1.0001, 2.0, std::f64::consts::E] {
            assert!((det_ln(x) - x.ln()).abs() < 1e-15);
        }
        assert_eq!(det_ln(0.0), f64::NEG_INFINITY);
        assert!(det_ln(-1.0).is_nan());
    }

    #[test]
    fn det_trig_matches_std() {
        let mut x = -9.0f64;
        while x <= 9.0 {
            assert!((det_sin(x) - x.sin()).abs() < 1e-13, "sin({x})");
            assert!((det_cos(x) - x.cos()).abs() < 1e-13, "cos({x})");
            x += 0.013;
        }
    }

    #[test]
    fn phi_pinned_values() {
        assert_eq!(std_normal_cdf(0.0).unwrap(), 0.5);
        let p2 = std_normal_cdf(2.0).unwrap();
        assert!((p2 - 0.9772499).abs() <= 1e-7, "Phi(2) = {p2}");
    }

    #[test]
    fn phi_matches_quadrature_oracle() {
        let mut x = -6.0f64;
        while x <= 6.0 {
            let got = std_normal_cdf(x).unwrap();
            let want = phi_oracle(x);
            assert!((got - want).abs() < 1e-10, "Phi({x}): {got} vs oracle {want}");
            x += 0.23;
        }
    }

    #[test]
    fn phi_symmetry_and_monotonicity() {
        let mut prev = -1.0f64;
        let mut x = -6.0f64;
        while x <= 6.0 {
            let p = std_normal_cdf(x).unwrap();
            let q = std_normal_cdf(-x).unwrap();
            assert!((p + q - 1.0).abs() < 1e-7);
            assert!(p > prev, "not strictly increasing at {x}");
            prev = p;
            x += 0.01;
        }
    }

    #[test]
    fn phi_rejects_nan_and_handles_extremes() {
        assert!(std_normal_cdf(f64::NAN).is_err());
        assert_eq!(std_normal_cdf(f64::INFINITY).unwrap(), 1.0);
        assert_eq!(std_normal_cdf(f64::NEG_INFINITY).unwrap(), 0.0);
        assert!(std_normal_cdf(40.0).unwrap() <= 1.0);
        assert!(std_normal_cdf(-40.0).unwrap() >= 0.0);
    }

    #[test]
    fn erf_basic_identities() {
        assert_eq!(erf(0.0), 0.0);
        for &x in &[0.1f64, 0.5, 1.0, 2.5, 5.0] {
            assert!((erf(x) + erf(-x)).abs() < 1e-15);
            assert!((erf(x) + erfc(x) - 1.0).abs() < 1e-14);
        }
        assert!((erf(1.0) - 0.842_700_792_949_714_9).abs() < 1e-12);
    }
}
