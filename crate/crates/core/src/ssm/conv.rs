//! Causal depthwise convolution over ragged segments.
//!
//! `y[t, e] = bias[e] + Σ_k w[e, k] · x[t − (K−1) + k, e]`, with rows before
//! the segment start (or before the carried window) read as zero.

use crate::tensor::{CustomOp, Graph, Scalar, Var};

/// Convolves `x` (`L×E`). `window` holds the last
/// `K−1` input rows (`(K−1)×E`, oldest first) and is updated when given.
pub fn conv_forward<T: Scalar>(
    x: &[T],
    w: &[T],
    bias: &[T],
    channels: usize,
    width: usize,
    window: Option<&mut Vec<T>>,
) -> Vec<T> {
    let e_dim = channels;
    let l = x.len() / e_dim;
    let pad = width - 1;
    let mut padded = match &window {
        Some(win) => {
            assert_eq!(win.len(), pad * e_dim, "conv window must be (K−1)×E");
            win.to_vec()
        }
        None => vec![T::zero(); pad * e_dim],
    };
    padded.extend_from_slice(x);
    let mut y = vec![T::zero(); l * e_dim];
    for t in 0..l {
        for e in 0..e_dim {
            let mut acc = bias[e];
            for k in 0..width {
                acc += w[e * width + k] * padded[(t + k) * e_dim + e];
            }
            y[t * e_dim + e] = acc;
        }
    }
    if let Some(win) = window {
        win.copy_from_slice(&padded[l * e_dim..]);
    }
    y
}

/// Differentiable form; `x: R×E`, `w: E×K`, `bias: E`.
pub fn causal_conv<'g, T: Scalar>(
    g: &'g Graph<T>,
    x: Var<'g, T>,
    w: Var<'g, T>,
    bias: Var<'g, T>,
    segs: &[usize],
) -> Var<'g, T> {
    let segs = segs.to_vec();
    g.custom(&[x, w, bias], move |v, shapes| {
        let e_dim = *shapes[0].last().unwrap();
        assert_eq!(shapes[1], [e_dim, shapes[1][1]], "conv weight must be E×K");
        let width = shapes[1][1];
        let rows = v[0].len() / e_dim;
        assert_eq!(segs.iter().sum::<usize>(), rows, "segments must cover every row");
        let mut y = Vec::with_capacity(v[0].len());
        let mut start = 0;
        for &len in &segs {
            y.extend(conv_forward(&v[0][start * e_dim..(start + len) * e_dim], v[1], v[2], e_dim, width, None));
            start += len;
        }
        let op = ConvOp {
            segs: segs.clone(),
            channels: e_dim,
            width,
        };
        (vec![rows, e_dim], y, Box::new(op) as Box<dyn CustomOp<T>>)
    })
}

struct ConvOp {
    segs: Vec<usize>,
    channels: usize,
    width: usize,
}

impl<T: Scalar> CustomOp<T> for ConvOp {
    fn name(&self) -> &'static str {
        "causal_conv"
    }

    fn backward(&self, inputs: &[&[T]], _output: &[T], gy: &[T], _needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let (x, w) = (inputs[0], inputs[1]);
        let (ed, kw) = (self.channels, self.width);
        let mut gx = vec![T::zero(); x.len()];
        let mut gw = vec![T::zero(); w.len()];
        let mut gb = vec![T::zero(); ed];
        let mut start = 0;
        for &len in &self.segs {
            for t in 0..len {
                for e in 0..ed {
                    let g = gy[(start + t) * ed + e];
                    gb[e] += g;
                    for k in 0..kw {
                        // input row read by tap k at output t
                        let Some(s) = (t + k).checked_sub(kw - 1) else { continue };
                        let xi = (start + s) * ed + e;
                        gw[e * kw + k] += g * x[xi];
                        gx[xi] += g * w[e * kw + k];
                    }
                }
            }
            start += len;
        }
        vec![Some(gx), Some(gw), Some(gb)]
    }
}
