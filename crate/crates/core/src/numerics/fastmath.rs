//! Vectorizable elementwise kernels: exponential, row softmax and GELU.
//!
//! On x86-64 the slice kernels are compiled a second time with AVX2 enabled
//! and picked at runtime. Both builds perform the same IEEE operations in the
//! same order, so results do not depend on the path taken.

const INV_FACTORIAL: [f64; 13] = [
    1.0,
    1.0,
    1.0 / 2.0,
    1.0 / 6.0,
    1.0 / 24.0,
    1.0 / 120.0,
    1.0 / 720.0,
    1.0 / 5_040.0,
    1.0 / 40_320.0,
    1.0 / 362_880.0,
    1.0 / 3_628_800.0,
    1.0 / 39_916_800.0,
    1.0 / 479_001_600.0,
];

/// `exp(x)` for `x <= 0`, within a few ulp of libm. Arguments below -708
/// are clamped there.
#[inline(always)]
pub fn exp_nonpositive(x: f64) -> f64 {
    const ROUND: f64 = 6_755_399_441_055_744.0; // 1.5 * 2^52
    const LN2_HI: f64 = 6.931_471_803_691_238_2e-1;
    const LN2_LO: f64 = 1.908_214_929_270_587_7e-10;
    let x = x.max(-708.0);
    let shifted = x * std::f64::consts::LOG2_E + ROUND;
    let n = shifted - ROUND;
    let r = x - n * LN2_HI - n * LN2_LO;
    let mut p = INV_FACTORIAL[12];
    for k in (0..12).rev() {
        p = p * r + INV_FACTORIAL[k];
    }
    let e = shifted.to_bits().wrapping_sub(ROUND.to_bits()).wrapping_add(1023) << 52;
    p * f64::from_bits(e)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

/// GELU (tanh approximation) and its derivative.
#[inline(always)]
pub fn gelu_with_grad(x: f64) -> (f64, f64) {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let e = exp_nonpositive(-2.0 * u.abs());
    let t = ((1.0 - e) / (1.0 + e)).copysign(u);
    let y = 0.5 * x * (1.0 + t);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    (y, dy)
}

#[inline(always)]
fn lanes_max(row: &[f64]) -> f64 {
    let mut m = [f64::NEG_INFINITY; 4];
    let mut chunks = row.chunks_exact(4);
    for c in &mut chunks {
        for l in 0..4 {
            m[l] = if c[l] > m[l] { c[l] } else { m[l] };
        }
    }
    chunks.remainder().iter().fold(m[0].max(m[1]).max(m[2].max(m[3])), |a, &b| a.max(b))
}

#[inline(always)]
fn lanes_sum(row: &[f64]) -> f64 {
    let mut s = [0.0; 4];
    let mut chunks = row.chunks_exact(4);
    for c in &mut chunks {
        for l in 0..4 {
            s[l] += c[l];
        }
    }
    chunks.remainder().iter().fold((s[0] + s[1]) + (s[2] + s[3]), |a, &b| a + b)
}

#[inline(always)]
fn softmax_rows_generic(data: &mut [f64], width: usize) {
    for row in data.chunks_exact_mut(width) {
        let max = lanes_max(row);
        for x in row.iter_mut() {
            *x = exp_nonpositive(*x - max);
        }
        let inv = 1.0 / lanes_sum(row);
        for x in row.iter_mut() {
            *x *= inv;
        }
    }
}

#[inline(always)]
fn gelu_generic(x: &[f64], out: &mut [f64], deriv: &mut [f64]) {
    for ((&v, y), dy) in x.iter().zip(out.iter_mut()).zip(deriv.iter_mut()) {
        (*y, *dy) = gelu_with_grad(v);
    }
}

#[cfg(target_arch = "x86_64")]
mod avx2 {
    #[target_feature(enable = "avx2")]
    pub unsafe fn softmax_rows(data: &mut [f64], width: usize) {
        super::softmax_rows_generic(data, width)
    }

    #[target_feature(enable = "avx2")]
    pub unsafe fn gelu(x: &[f64], out: &mut [f64], deriv: &mut [f64]) {
        super::gelu_generic(x, out, deriv)
    }
}

#[cfg(target_arch = "x86_64")]
fn has_avx2() -> bool {
    std::is_x86_feature_detected!("avx2")
}

/// Softmax of each consecutive `width`-long row of `data`, in place.
pub fn softmax_rows(data: &mut [f64], width: usize) {
    #[cfg(target_arch = "x86_64")]
    if has_avx2() {
        // SAFETY: the CPU supports AVX2.
        return unsafe { avx2::softmax_rows(data, width) };
    }
    softmax_rows_generic(data, width)
}

/// Writes GELU values and derivatives of `x`.
pub fn gelu_slice(x: &[f64], out: &mut [f64], deriv: &mut [f64]) {
    assert!(out.len() == x.len() && deriv.len() == x.len());
    #[cfg(target_arch = "x86_64")]
    if has_avx2() {
        // SAFETY: the CPU supports AVX2.
        return unsafe { avx2::gelu(x, out, deriv) };
    }
    gelu_generic(x, out, deriv)
}
