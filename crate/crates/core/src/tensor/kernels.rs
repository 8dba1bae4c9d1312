//! Slice-level numeric kernels shared by the tensor ops and the fused layers.

use super::Scalar;

pub const LN_EPS: f64 = 1e-5;

/// In-place softmax over consecutive rows of width `cols`.
pub fn softmax_rows<T: Scalar>(data: &mut [T], cols: usize) {
    for row in data.chunks_mut(cols) {
        softmax_in_place(row);
    }
}

pub fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = sum.recip();
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// Softmax vector-Jacobian product for one row: `gx = y ∘ (gy − ⟨gy, y⟩)`.
pub fn softmax_row_backward<T: Scalar>(y: &[T], gy: &[T], gx: &mut [T]) {
    let dot: T = y.iter().zip(gy).map(|(&a, &b)| a * b).sum();
    for ((g, &yi), &gyi) in gx.iter_mut().zip(y).zip(gy) {
        *g += yi * (gyi - dot);
    }
}

/// Returns the normalized output and the per-row `(mean, rstd)` pairs.
pub fn layer_norm_forward<T: Scalar>(
    x: &[T],
    gain: &[T],
    bias: &[T],
    cols: usize,
    eps: f64,
) -> (Vec<T>, Vec<(T, T)>) {
    let eps = T::from_f64_lossy(eps);
    let n = T::from_usize(cols).unwrap();
    let mut out = vec![T::zero(); x.len()];
    let mut stats = Vec::with_capacity(x.len() / cols);
    for (row, orow) in x.chunks(cols).zip(out.chunks_mut(cols)) {
        let mean = row.iter().copied().sum::<T>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let rstd = (var + eps).sqrt().recip();
        for (((o, &v), &g), &b) in orow.iter_mut().zip(row).zip(gain).zip(bias) {
            *o = (v - mean) * rstd * g + b;
        }
        stats.push((mean, rstd));
    }
    (out, stats)
}

/// Accumulates gradients of layer normalization into `gx`, `ggain`, `gbias`.
#[allow(clippy::too_many_arguments)]
pub fn layer_norm_backward<T: Scalar>(
    x: &[T],
    gain: &[T],
    stats: &[(T, T)],
    gy: &[T],
    cols: usize,
    gx: Option<&mut [T]>,
    ggain: Option<&mut [T]>,
    gbias: Option<&mut [T]>,
) {
    let n = T::from_usize(cols).unwrap();
    let mut ggain = ggain;
    let mut gbias = gbias;
    let mut gx = gx;
    let mut gxhat = vec![T::zero(); cols];
    for (r, ((row, grow), &(mean, rstd))) in x.chunks(cols).zip(gy.chunks(cols)).zip(stats).enumerate() {
        let mut sum_g = T::zero();
        let mut sum_gx = T::zero();
        for j in 0..cols {
            let xhat = (row[j] - mean) * rstd;
            if let Some(gg) = ggain.as_deref_mut() {
                gg[j] += grow[j] * xhat;
            }
            if let Some(gb) = gbias.as_deref_mut() {
                gb[j] += grow[j];
            }
            gxhat[j] = grow[j] * gain[j];
            sum_g += gxhat[j];
            sum_gx += gxhat[j] * xhat;
        }
        if let Some(gxs) = gx.as_deref_mut() {
            let mg = sum_g / n;
            let mgx = sum_gx / n;
            let out = &mut gxs[r * cols..(r + 1) * cols];
            for j in 0..cols {
                let xhat = (row[j] - mean) * rstd;
                out[j] += rstd * (gxhat[j] - mg - xhat * mgx);
            }
        }
    }
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        (T::one() + (-x).exp()).recip()
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub fn silu<T: Scalar>(x: T) -> T {
    x * sigmoid(x)
}

#[inline]
pub fn silu_grad<T: Scalar>(x: T) -> T {
    let s = sigmoid(x);
    s * (T::one() + x * (T::one() - s))
}

/// `ln(1 + e^x)` without overflow.
#[inline]
pub fn softplus<T: Scalar>(x: T) -> T {
    if x > T::from_f64_lossy(20.0) {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of [`softplus`] for `y > 0`.
pub fn inverse_softplus(y: f64) -> f64 {
    if y > 20.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softplus_roundtrip() {
        for y in [1e-3, 0.01, 0.1, 1.0, 5.0] {
            let x = inverse_softplus(y);
            assert!((softplus(x) - y).abs() < 1e-12 * y.max(1.0));
        }
    }

    #[test]
    fn sigmoid_saturates_without_nan() {
        assert_eq!(sigmoid(1000.0f32), 1.0);
        assert_eq!(sigmoid(-1000.0f32), 0.0);
        assert!(silu(-1000.0f32).abs() < 1e-30);
    }
}
