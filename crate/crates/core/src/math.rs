//! Hot-path elementary functions.

const LOG2_E: f64 = core::f64::consts::LOG2_E;
const LN2_HI: f64 = 6.931_471_803_691_238_2e-1;
const LN2_LO: f64 = 1.908_214_929_270_587_7e-10;
// adding this rounds to the nearest integer and leaves it in the low mantissa bits
const ROUND: f64 = 6_755_399_441_055_744.0;
const FLOOR: f64 = -700.0;

/// `exp(x)` for `x <= 0`, branch-free so that loops over it vectorize.
/// Below `-700` the result is flushed to zero. Relative error is a few ulp.
#[inline(always)]
pub(crate) fn exp_nonpositive(x: f64) -> f64 {
    let xc = if x < FLOOR { FLOOR } else { x };
    let t = xc * LOG2_E + ROUND;
    let k = t - ROUND;
    let r = (xc - k * LN2_HI) - k * LN2_LO;
    // Taylor to degree 13 on |r| <= ln2 / 2
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
    p = p * r + 1.0;
    p = p * r + 1.0;
    let scale = f64::from_bits(t.to_bits().wrapping_add(1023) << 52);
    let y = p * scale;
    if x < FLOOR {
        0.0
    } else {
        y
    }
}
