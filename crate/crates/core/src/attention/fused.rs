//! Fused causal multi-head attention over ragged segments.

use crate::tensor::kernels::{softmax_in_place, softmax_row_backward};
use crate::tensor::{CustomOp, Graph, Rng, Scalar, Var};

/// Single-head causal attention for one sequence of `l` rows.
///
/// Returns `(out, weights)` where `weights` is `l×l` row-major with zeros
/// above the diagonal. `q`, `k`, `v` are `l×dh`.
pub fn attend<T: Scalar>(q: &[T], k: &[T], v: &[T], l: usize, dh: usize) -> (Vec<T>, Vec<T>) {
    assert_eq!(q.len(), l * dh, "q must be L×dh");
    assert_eq!(k.len(), l * dh, "k must be L×dh");
    assert_eq!(v.len(), l * dh, "v must be L×dh");
    let scale = T::from_usize(dh).unwrap().sqrt().recip();
    let mut w = vec![T::zero(); l * l];
    for i in 0..l {
        let qi = &q[i * dh..(i + 1) * dh];
        let row = &mut w[i * l..i * l + i + 1];
        for (j, s) in row.iter_mut().enumerate() {
            *s = dot(qi, &k[j * dh..(j + 1) * dh]) * scale;
        }
        softmax_in_place(row);
    }
    let out = mix(&w, v, l, dh);
    (out, w)
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

/// `out_i = Σ_{j≤i} w_ij v_j`.
fn mix<T: Scalar>(w: &[T], v: &[T], l: usize, dh: usize) -> Vec<T> {
    let mut out = vec![T::zero(); l * dh];
    for i in 0..l {
        let o = &mut out[i * dh..(i + 1) * dh];
        for j in 0..=i {
            let wij = w[i * l + j];
            for (ov, &vv) in o.iter_mut().zip(&v[j * dh..(j + 1) * dh]) {
                *ov += wij * vv;
            }
        }
    }
    out
}

fn gather_head<T: Scalar>(x: &[T], width: usize, rows: std::ops::Range<usize>, col: usize, dh: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(rows.len() * dh);
    for r in rows {
        out.extend_from_slice(&x[r * width + col..r * width + col + dh]);
    }
    out
}

fn scatter_head<T: Scalar>(dst: &mut [T], src: &[T], width: usize, start: usize, col: usize, dh: usize) {
    for (i, chunk) in src.chunks(dh).enumerate() {
        let at = (start + i) * width + col;
        dst[at..at + dh].copy_from_slice(chunk);
    }
}

/// Causal attention with `heads` heads over `q`, `k`, `v` (`R×(heads·dh)`),
/// segment by segment. With `dropout = Some((p, rng))`, attention weights are
/// dropped with probability `p` and rescaled by `1/(1−p)`.
pub fn causal_attention<'g, T: Scalar>(
    g: &'g Graph<T>,
    q: Var<'g, T>,
    k: Var<'g, T>,
    v: Var<'g, T>,
    heads: usize,
    segs: &[usize],
    dropout: Option<(f64, &mut Rng)>,
) -> Var<'g, T> {
    let segs = segs.to_vec();
    let recording = g.is_recording();
    g.custom(&[q, k, v], move |vals, shapes| {
        let width = *shapes[0].last().unwrap();
        assert!(
            shapes[1] == shapes[0] && shapes[2] == shapes[0],
            "attention: q/k/v shapes differ ({:?}, {:?}, {:?})",
            shapes[0],
            shapes[1],
            shapes[2]
        );
        assert_eq!(width % heads, 0, "attention width {width} not divisible by {heads} heads");
        let dh = width / heads;
        let rows = vals[0].len() / width;
        assert_eq!(segs.iter().sum::<usize>(), rows, "segments must cover every row");
        let mut dropout = dropout;
        let mut out = vec![T::zero(); rows * width];
        let mut saved = Vec::new();
        let mut start = 0;
        for &l in &segs {
            for h in 0..heads {
                let col = h * dh;
                let range = start..start + l;
                let qh = gather_head(vals[0], width, range.clone(), col, dh);
                let kh = gather_head(vals[1], width, range.clone(), col, dh);
                let vh = gather_head(vals[2], width, range, col, dh);
                let (mut o, probs) = attend(&qh, &kh, &vh, l, dh);
                let mask = match dropout.as_mut() {
                    Some((p, rng)) if *p > 0.0 => {
                        let keep = T::from_f64_lossy(1.0 / (1.0 - *p));
                        let mask: Vec<T> = (0..l * l)
                            .map(|_| if rng.bernoulli(*p) { T::zero() } else { keep })
                            .collect();
                        let dropped: Vec<T> = probs.iter().zip(&mask).map(|(&a, &m)| a * m).collect();
                        o = mix(&dropped, &vh, l, dh);
                        Some(mask)
                    }
                    _ => None,
                };
                scatter_head(&mut out, &o, width, start, col, dh);
                if recording {
                    saved.push((probs, mask));
                }
            }
            start += l;
        }
        let op = AttentionOp {
            segs: segs.clone(),
            heads,
            saved,
        };
        (vec![rows, width], out, Box::new(op) as Box<dyn CustomOp<T>>)
    })
}

struct AttentionOp<T> {
    segs: Vec<usize>,
    heads: usize,
    /// Softmax weights and optional dropout mask per (segment, head).
    saved: Vec<(Vec<T>, Option<Vec<T>>)>,
}

impl<T: Scalar> CustomOp<T> for AttentionOp<T> {
    fn name(&self) -> &'static str {
        "causal_attention"
    }

    fn backward(&self, inputs: &[&[T]], _output: &[T], gy: &[T], _needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let width = inputs[0].len() / self.segs.iter().sum::<usize>().max(1);
        let dh = width / self.heads;
        let scale = T::from_usize(dh).unwrap().sqrt().recip();
        let mut gq = vec![T::zero(); inputs[0].len()];
        let mut gk = vec![T::zero(); inputs[1].len()];
        let mut gv = vec![T::zero(); inputs[2].len()];
        let mut saved = self.saved.iter();
        let mut start = 0;
        for &l in &self.segs {
            for h in 0..self.heads {
                let (probs, mask) = saved.next().expect("saved attention state");
                let col = h * dh;
                let range = start..start + l;
                let qh = gather_head(inputs[0], width, range.clone(), col, dh);
                let kh = gather_head(inputs[1], width, range.clone(), col, dh);
                let vh = gather_head(inputs[2], width, range.clone(), col, dh);
                let go = gather_head(gy, width, range, col, dh);
                let eff: Vec<T> = match mask {
                    Some(m) => probs.iter().zip(m).map(|(&p, &mv)| p * mv).collect(),
                    None => probs.clone(),
                };
                let mut gqh = vec![T::zero(); l * dh];
                let mut gkh = vec![T::zero(); l * dh];
                let mut gvh = vec![T::zero(); l * dh];
                let mut gw = vec![T::zero(); l];
                let mut gs = vec![T::zero(); l];
                for i in 0..l {
                    let goi = &go[i * dh..(i + 1) * dh];
                    let gw = &mut gw[..i + 1];
                    for j in 0..=i {
                        let vj = &vh[j * dh..(j + 1) * dh];
                        gw[j] = dot(goi, vj);
                        let e = eff[i * l + j];
                        for (g, &x) in gvh[j * dh..(j + 1) * dh].iter_mut().zip(goi) {
                            *g += e * x;
                        }
                    }
                    if let Some(m) = mask {
                        for (j, g) in gw.iter_mut().enumerate() {
                            *g *= m[i * l + j];
                        }
                    }
                    let gs = &mut gs[..i + 1];
                    gs.iter_mut().for_each(|v| *v = T::zero());
                    softmax_row_backward(&probs[i * l..i * l + i + 1], gw, gs);
                    for (j, &s) in gs.iter().enumerate() {
                        let s = s * scale;
                        for d in 0..dh {
                            gqh[i * dh + d] += s * kh[j * dh + d];
                            gkh[j * dh + d] += s * qh[i * dh + d];
                        }
                    }
                }
                scatter_head(&mut gq, &gqh, width, start, col, dh);
                scatter_head(&mut gk, &gkh, width, start, col, dh);
                scatter_head(&mut gv, &gvh, width, start, col, dh);
            }
            start += l;
        }
        vec![Some(gq), Some(gk), Some(gv)]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{check_inputs, random_tensor};
    use crate::tensor::Tensor;

    #[test]
    fn single_token_returns_value() {
        let (out, w) = attend(&[0.3f64, -2.0], &[5.0, 1.0], &[7.0, 8.0], 1, 2);
        assert_eq!(out, vec![7.0, 8.0]);
        assert_eq!(w, vec![1.0]);
    }

    #[test]
    fn sharp_query_selects_key() {
        // orthogonal keys; query for row 2 aligned with key 1 at large scale
        let k = [1.0f64, 0.0, 0.0, 1.0, 1.0, 0.0];
        let q = [0.0, 0.0, 0.0, 0.0, 0.0, 1000.0];
        let v = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let (out, _) = attend(&q, &k, &v, 3, 2);
        assert!((out[4] - 3.0).abs() < 1e-9 && (out[5] - 4.0).abs() < 1e-9);
    }

    #[test]
    fn weights_are_causal_and_normalized() {
        let mut rng = Rng::new(1);
        let l = 7;
        let mk = |rng: &mut Rng| (0..l * 4).map(|_| rng.normal() as f32).collect::<Vec<_>>();
        let (q, k, v) = (mk(&mut rng), mk(&mut rng), mk(&mut rng));
        let (_, w) = attend(&q, &k, &v, l, 4);
        for i in 0..l {
            let row = &w[i * l..(i + 1) * l];
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
            assert!(row[i + 1..].iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn perturbing_later_token_leaves_prefix() {
        let mut rng = Rng::new(2);
        let (l, dh) = (6, 3);
        let mk = |rng: &mut Rng| (0..l * dh).map(|_| rng.normal() as f32).collect::<Vec<_>>();
        let (q, k, v) = (mk(&mut rng), mk(&mut rng), mk(&mut rng));
        let (base, _) = attend(&q, &k, &v, l, dh);
        let (mut q2, mut k2, mut v2) = (q.clone(), k.clone(), v.clone());
        for d in 0..dh {
            q2[4 * dh + d] += 1.0;
            k2[4 * dh + d] -= 2.0;
            v2[4 * dh + d] *= 3.0;
        }
        let (out, _) = attend(&q2, &k2, &v2, l, dh);
        assert_eq!(&out[..4 * dh], &base[..4 * dh]);
        assert_ne!(&out[4 * dh..5 * dh], &base[4 * dh..5 * dh]);
    }

    #[test]
    fn gradients_multi_head_segments() {
        let mut rng = Rng::new(3);
        let segs = vec![3usize, 5];
        let shape = [8, 6];
        let ins: Vec<Tensor<f64>> = (0..4).map(|_| random_tensor(&shape, 1.0, &mut rng)).collect();
        let r = check_inputs(&ins, 1e-5, |g, v| (causal_attention(g, v[0], v[1], v[2], 2, &segs, None) * v[3]).sum());
        assert!(r.max_rel_err < 1e-6, "{r:?}");
    }

    #[test]
    fn gradients_with_fixed_dropout_mask() {
        let mut rng = Rng::new(4);
        let segs = vec![4usize];
        let ins: Vec<Tensor<f64>> = (0..4).map(|_| random_tensor(&[4, 4], 1.0, &mut rng)).collect();
        // the same mask stream on every evaluation
        let r = check_inputs(&ins, 1e-5, |g, v| {
            let mut mrng = Rng::new(77);
            (causal_attention(g, v[0], v[1], v[2], 2, &segs, Some((0.3, &mut mrng))) * v[3]).sum()
        });
        assert!(r.max_rel_err < 1e-6, "{r:?}");
    }
}
