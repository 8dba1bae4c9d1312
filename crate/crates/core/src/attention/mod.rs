//! GPT-style causal transformer stack and per-modality token embedders.

pub mod fused;

use serde::{Deserialize, Serialize};

use crate::tensor::{kernels, Graph, ParamId, ParamStore, Rng, Scalar, Tensor, Var};
pub use fused::{attend, causal_attention};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum AttentionError {
    #[error("context of {len} tokens exceeds capacity {max}")]
    ContextOverflow { len: usize, max: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttentionConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub embed_dim: usize,
    pub dropout: f64,
    /// Longest segment accepted by [`Transformer::forward`]; `0` is unbounded.
    pub max_context_tokens: usize,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self {
            n_layers: 3,
            n_heads: 3,
            embed_dim: 128,
            dropout: 0.1,
            max_context_tokens: 20,
        }
    }
}

impl AttentionConfig {
    /// Per-head width: `ceil(embed_dim / n_heads)`.
    pub fn head_dim(&self) -> usize {
        self.embed_dim.div_ceil(self.n_heads)
    }

    /// Width of the concatenated heads.
    pub fn inner_dim(&self) -> usize {
        self.head_dim() * self.n_heads
    }
}

/// Inverted dropout on a recording training graph; identity otherwise.
pub fn dropout<'g, T: Scalar>(x: Var<'g, T>, p: f64, rng: Option<&mut Rng>) -> Var<'g, T> {
    let g = x.graph();
    match rng {
        Some(rng) if p > 0.0 && g.is_training() => {
            let keep = 1.0 / (1.0 - p);
            let mask = Tensor::from_fn(&x.shape(), |_| {
                T::from_f64_lossy(if rng.bernoulli(p) { 0.0 } else { keep })
            });
            x * g.constant(mask)
        }
        _ => x,
    }
}

#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub ln1_gain: ParamId,
    pub ln1_bias: ParamId,
    /// `D × 3·inner`: queries, keys, values.
    pub w_qkv: ParamId,
    pub b_qkv: ParamId,
    pub w_o: ParamId,
    pub b_o: ParamId,
    pub ln2_gain: ParamId,
    pub ln2_bias: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

/// Pre-LN blocks: `x + attn(ln(x))`, then `x + mlp(ln(x))` with a ReLU MLP of
/// width `4·D`. No final norm, so a zero-layer stack is the identity.
#[derive(Clone, Debug)]
pub struct Transformer {
    pub cfg: AttentionConfig,
    pub blocks: Vec<TransformerBlock>,
}

impl Transformer {
    pub fn new<T: Scalar>(cfg: &AttentionConfig, store: &mut ParamStore<T>, prefix: &str, rng: &mut Rng) -> Self {
        assert!(cfg.n_heads > 0 && cfg.embed_dim > 0, "attention dimensions must be positive");
        assert!((0.0..1.0).contains(&cfg.dropout), "dropout must lie in [0, 1)");
        let (d, inner) = (cfg.embed_dim, cfg.inner_dim());
        let depth = (2.0 * cfg.n_layers.max(1) as f64).sqrt();
        let blocks = (0..cfg.n_layers)
            .map(|i| {
                let p = |s: &str| format!("{prefix}.{i}.{s}");
                TransformerBlock {
                    ln1_gain: store.add_const(p("ln1.gain"), &[d], 1.0),
                    ln1_bias: store.add_const(p("ln1.bias"), &[d], 0.0),
                    w_qkv: store.add_normal(p("w_qkv"), &[d, 3 * inner], (d as f64).powf(-0.5), rng),
                    b_qkv: store.add_const(p("b_qkv"), &[3 * inner], 0.0),
                    w_o: store.add_normal(p("w_o"), &[inner, d], (inner as f64).powf(-0.5) / depth, rng),
                    b_o: store.add_const(p("b_o"), &[d], 0.0),
                    ln2_gain: store.add_const(p("ln2.gain"), &[d], 1.0),
                    ln2_bias: store.add_const(p("ln2.bias"), &[d], 0.0),
                    w1: store.add_normal(p("w1"), &[d, 4 * d], (d as f64).powf(-0.5), rng),
                    b1: store.add_const(p("b1"), &[4 * d], 0.0),
                    w2: store.add_normal(p("w2"), &[4 * d, d], (4.0 * d as f64).powf(-0.5) / depth, rng),
                    b2: store.add_const(p("b2"), &[d], 0.0),
                }
            })
            .collect();
        Self { cfg: cfg.clone(), blocks }
    }

    /// Runs the stack over `x` (`R×D`), independent causal segments of
    /// lengths `segs`. Dropout is active only on a training graph with `rng`.
    pub fn forward<'g, T: Scalar>(
        &self,
        g: &'g Graph<T>,
        store: &ParamStore<T>,
        x: Var<'g, T>,
        segs: &[usize],
        mut rng: Option<&mut Rng>,
    ) -> Result<Var<'g, T>, AttentionError> {
        let max = self.cfg.max_context_tokens;
        if let Some(&len) = segs.iter().find(|&&l| max > 0 && l > max) {
            return Err(AttentionError::ContextOverflow { len, max });
        }
        assert_eq!(x.cols(), self.cfg.embed_dim, "transformer input width");
        assert_eq!(segs.iter().sum::<usize>(), x.rows(), "segments must cover every row");
        let inner = self.cfg.inner_dim();
        let p = self.cfg.dropout;
        let mut x = x;
        for b in &self.blocks {
            let pv = |id| g.param(store, id);
            let h = x.layer_norm(pv(b.ln1_gain), pv(b.ln1_bias));
            let qkv = h.matmul(pv(b.w_qkv)).add_row(pv(b.b_qkv));
            let (q, k, v) = (qkv.slice_cols(0, inner), qkv.slice_cols(inner, inner), qkv.slice_cols(2 * inner, inner));
            let attn_drop = match rng.as_deref_mut() {
                Some(r) if g.is_training() && p > 0.0 => Some((p, r)),
                _ => None,
            };
            let a = causal_attention(g, q, k, v, self.cfg.n_heads, segs, attn_drop);
            x = x + a.matmul(pv(b.w_o)).add_row(pv(b.b_o));
            let h = x.layer_norm(pv(b.ln2_gain), pv(b.ln2_bias));
            let m = h.matmul(pv(b.w1)).add_row(pv(b.b1)).relu().matmul(pv(b.w2)).add_row(pv(b.b2));
            x = x + dropout(m, p, rng.as_deref_mut());
        }
        Ok(x)
    }
}

/// Keys and values of every processed token, per layer, for incremental
/// decoding with [`Transformer::step`].
#[derive(Clone, Debug, Default)]
pub struct KvCache<T = f32> {
    keys: Vec<Vec<T>>,
    values: Vec<Vec<T>>,
    len: usize,
}

impl<T> KvCache<T> {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn clear(&mut self) {
        self.keys.iter_mut().for_each(Vec::clear);
        self.values.iter_mut().for_each(Vec::clear);
        self.len = 0;
    }
}

fn affine<T: Scalar>(x: &[T], w: &[T], b: &[T]) -> Vec<T> {
    let mut out = b.to_vec();
    T::gemm(1, x.len(), b.len(), x, false, w, false, &mut out, true);
    out
}

impl Transformer {
    pub fn init_cache<T: Scalar>(&self) -> KvCache<T> {
        KvCache {
            keys: vec![Vec::new(); self.blocks.len()],
            values: vec![Vec::new(); self.blocks.len()],
            len: 0,
        }
    }

    /// Appends one token (`D` values) to the cached sequence and returns its
    /// output row; equal to the last row of an inference [`forward`](Self::forward)
    /// over the whole sequence up to summation order.
    pub fn step<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        cache: &mut KvCache<T>,
        token: &[T],
    ) -> Result<Vec<T>, AttentionError> {
        let max = self.cfg.max_context_tokens;
        if max > 0 && cache.len + 1 > max {
            return Err(AttentionError::ContextOverflow { len: cache.len + 1, max });
        }
        let d = self.cfg.embed_dim;
        assert_eq!(token.len(), d, "transformer token width");
        let (inner, dh, heads) = (self.cfg.inner_dim(), self.cfg.head_dim(), self.cfg.n_heads);
        let scale = T::from_usize(dh).unwrap().sqrt().recip();
        let l = cache.len + 1;
        let mut x = token.to_vec();
        for (bi, b) in self.blocks.iter().enumerate() {
            let w = |id| store.get(id).data();
            let (h, _) = kernels::layer_norm_forward(&x, w(b.ln1_gain), w(b.ln1_bias), d, kernels::LN_EPS);
            let qkv = affine(&h, w(b.w_qkv), w(b.b_qkv));
            let (keys, values) = (&mut cache.keys[bi], &mut cache.values[bi]);
            keys.extend_from_slice(&qkv[inner..2 * inner]);
            values.extend_from_slice(&qkv[2 * inner..]);
            let mut a = vec![T::zero(); inner];
            let mut scores = vec![T::zero(); l];
            for hd in 0..heads {
                let q = &qkv[hd * dh..(hd + 1) * dh];
                for (j, s) in scores.iter_mut().enumerate() {
                    let k = &keys[j * inner + hd * dh..j * inner + (hd + 1) * dh];
                    *s = q.iter().zip(k).map(|(&u, &v)| u * v).sum::<T>() * scale;
                }
                kernels::softmax_in_place(&mut scores);
                let out = &mut a[hd * dh..(hd + 1) * dh];
                for (j, &p) in scores.iter().enumerate() {
                    let v = &values[j * inner + hd * dh..j * inner + (hd + 1) * dh];
                    for (o, &vv) in out.iter_mut().zip(v) {
                        *o += p * vv;
                    }
                }
            }
            for (xv, av) in x.iter_mut().zip(affine(&a, w(b.w_o), w(b.b_o))) {
                *xv += av;
            }
            let (h, _) = kernels::layer_norm_forward(&x, w(b.ln2_gain), w(b.ln2_bias), d, kernels::LN_EPS);
            let mut hidden = affine(&h, w(b.w1), w(b.b1));
            hidden.iter_mut().for_each(|v| *v = v.max(T::zero()));
            for (xv, mv) in x.iter_mut().zip(affine(&hidden, w(b.w2), w(b.b2))) {
                *xv += mv;
            }
        }
        cache.len = l;
        Ok(x)
    }
}

/// Token kinds with their own embedding maps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    SubGoal,
    State,
    Action,
    Reward,
    Done,
    ReturnToGo,
}

#[derive(Clone, Debug)]
struct ModalityEmbed {
    modality: Modality,
    in_dim: usize,
    w: ParamId,
    b: ParamId,
    ln_gain: ParamId,
    ln_bias: ParamId,
}

/// Per-modality `linear → layer norm`, plus a learned timestep table shared
/// by all modalities of the set.
#[derive(Clone, Debug)]
pub struct TokenEmbedder {
    pub dim: usize,
    pub max_timestep: usize,
    entries: Vec<ModalityEmbed>,
    time_table: ParamId,
}

impl TokenEmbedder {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        dim: usize,
        modalities: &[(Modality, usize)],
        max_timestep: usize,
        rng: &mut Rng,
    ) -> Self {
        let entries = modalities
            .iter()
            .map(|&(modality, in_dim)| {
                let name = serde_json::to_value(modality).unwrap();
                let p = |s: &str| format!("{prefix}.{}.{s}", name.as_str().unwrap());
                ModalityEmbed {
                    modality,
                    in_dim,
                    w: store.add_normal(p("w"), &[in_dim, dim], (in_dim as f64).powf(-0.5), rng),
                    b: store.add_normal(p("b"), &[dim], 0.02, rng),
                    ln_gain: store.add_const(p("ln.gain"), &[dim], 1.0),
                    ln_bias: store.add_const(p("ln.bias"), &[dim], 0.0),
                }
            })
            .collect();
        let time_table = store.add_normal(format!("{prefix}.time"), &[max_timestep + 1, dim], 0.02, rng);
        Self {
            dim,
            max_timestep,
            entries,
            time_table,
        }
    }

    fn entry(&self, m: Modality) -> &ModalityEmbed {
        self.entries
            .iter()
            .find(|e| e.modality == m)
            .unwrap_or_else(|| panic!("modality {m:?} is not part of this embedder"))
    }

    pub fn in_dim(&self, m: Modality) -> usize {
        self.entry(m).in_dim
    }

    pub fn has(&self, m: Modality) -> bool {
        self.entries.iter().any(|e| e.modality == m)
    }

    /// Embeds `raw` (`R×in_dim`) whose rows sit at within-episode `timesteps`.
    ///
    /// # Panics
    /// If `m` is not configured or a timestep exceeds the table.
    pub fn embed<'g, T: Scalar>(
        &self,
        g: &'g Graph<T>,
        store: &ParamStore<T>,
        m: Modality,
        raw: Var<'g, T>,
        timesteps: &[usize],
    ) -> Var<'g, T> {
        let e = self.entry(m);
        assert_eq!(raw.cols(), e.in_dim, "{m:?} input width");
        assert_eq!(raw.rows(), timesteps.len(), "one timestep per row");
        if let Some(&t) = timesteps.iter().find(|&&t| t > self.max_timestep) {
            panic!("timestep {t} exceeds embedding table size {}", self.max_timestep + 1);
        }
        let pv = |id| g.param(store, id);
        let lin = raw.matmul(pv(e.w)).add_row(pv(e.b)).layer_norm(pv(e.ln_gain), pv(e.ln_bias));
        lin + pv(self.time_table).gather_rows(timesteps)
    }

    /// Embedding of a single token, evaluated without recording.
    pub fn embed_one<T: Scalar>(&self, store: &ParamStore<T>, m: Modality, raw: &[T], timestep: usize) -> Vec<T> {
        let g = Graph::inference();
        let x = g.constant(Tensor::from_vec(&[1, raw.len()], raw.to_vec()));
        self.embed(&g, store, m, x, &[timestep]).value()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{check_params, random_tensor};

    fn cfg(layers: usize, d: usize, heads: usize) -> AttentionConfig {
        AttentionConfig {
            n_layers: layers,
            n_heads: heads,
            embed_dim: d,
            dropout: 0.1,
            max_context_tokens: 16,
        }
    }

    fn eval(tf: &Transformer, store: &ParamStore<f64>, x: &Tensor<f64>, segs: &[usize]) -> Vec<f64> {
        let g = Graph::inference();
        let v = g.constant(x.clone());
        tf.forward(&g, store, v, segs, Some(&mut Rng::new(0))).unwrap().value()
    }

    #[test]
    fn head_dim_rounds_up() {
        let c = AttentionConfig::default();
        assert_eq!(c.head_dim(), 43);
        assert_eq!(c.inner_dim(), 129);
    }

    #[test]
    fn zero_layers_is_identity() {
        let mut store = ParamStore::new();
        let tf = Transformer::new(&cfg(0, 8, 2), &mut store, "t", &mut Rng::new(1));
        let x = random_tensor(&[5, 8], 1.0, &mut Rng::new(2));
        assert_eq!(eval(&tf, &store, &x, &[5]), x.data());
    }

    #[test]
    fn capacity_error() {
        let mut store = ParamStore::<f64>::new();
        let tf = Transformer::new(&cfg(1, 8, 2), &mut store, "t", &mut Rng::new(1));
        let g = Graph::inference();
        let x = g.constant(Tensor::zeros(&[17, 8]));
        assert_eq!(
            tf.forward(&g, &store, x, &[17], None).unwrap_err(),
            AttentionError::ContextOverflow { len: 17, max: 16 }
        );
    }

    #[test]
    fn evaluation_is_repeatable_and_causal() {
        let mut store = ParamStore::new();
        let tf = Transformer::new(&cfg(3, 12, 3), &mut store, "t", &mut Rng::new(1));
        let mut rng = Rng::new(3);
        let x = random_tensor(&[6, 12], 1.0, &mut rng);
        let base = eval(&tf, &store, &x, &[6]);
        assert_eq!(base, eval(&tf, &store, &x, &[6]));
        for p in 0..6 {
            let mut y = x.clone();
            for j in p * 12..6 * 12 {
                y.data_mut()[j] += rng.normal();
            }
            let out = eval(&tf, &store, &y, &[6]);
            assert_eq!(&out[..p * 12], &base[..p * 12], "prefix {p}");
        }
    }

    #[test]
    fn training_mode_applies_dropout() {
        let mut store = ParamStore::new();
        let tf = Transformer::new(&cfg(1, 8, 2), &mut store, "t", &mut Rng::new(1));
        let x = random_tensor(&[4, 8], 1.0, &mut Rng::new(2));
        let g = Graph::new();
        let v = g.constant(x.clone());
        let train = tf.forward(&g, &store, v, &[4], Some(&mut Rng::new(9))).unwrap().value();
        assert_ne!(train, eval(&tf, &store, &x, &[4]));
    }

    #[test]
    fn gradient_check_two_layers_l8() {
        let mut store = ParamStore::new();
        let tf = Transformer::new(&cfg(2, 8, 2), &mut store, "t", &mut Rng::new(4));
        let mut rng = Rng::new(5);
        for p in store.iter_mut() {
            for v in p.tensor.data_mut() {
                *v += rng.uniform_range(-0.1, 0.1);
            }
        }
        let x = random_tensor(&[8, 8], 1.0, &mut rng);
        let m = random_tensor(&[8, 8], 1.0, &mut rng);
        let r = check_params(&store, 1e-5, 10, &mut rng, |g, s| {
            let xv = g.constant(x.clone());
            (tf.forward(g, s, xv, &[5, 3], None).unwrap() * g.constant(m.clone())).sum()
        });
        assert!(r.max_rel_err < 1e-3, "{r:?}");
    }

    #[test]
    fn cached_steps_match_forward() {
        let mut store = ParamStore::new();
        let tf = Transformer::new(&cfg(3, 12, 3), &mut store, "t", &mut Rng::new(1));
        let x = random_tensor(&[9, 12], 1.0, &mut Rng::new(6));
        let full = eval(&tf, &store, &x, &[9]);
        let mut cache = tf.init_cache();
        for r in 0..9 {
            let y = tf.step(&store, &mut cache, &x.data()[r * 12..(r + 1) * 12]).unwrap();
            for (a, b) in y.iter().zip(&full[r * 12..(r + 1) * 12]) {
                assert!((a - b).abs() < 1e-12, "row {r}: {a} vs {b}");
            }
        }
        assert_eq!(cache.len(), 9);
        cache.clear();
        let y0 = tf.step(&store, &mut cache, &x.data()[..12]).unwrap();
        assert!(y0.iter().zip(&full[..12]).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn cache_respects_capacity() {
        let mut store = ParamStore::<f64>::new();
        let tf = Transformer::new(&cfg(1, 8, 2), &mut store, "t", &mut Rng::new(1));
        let mut cache = tf.init_cache();
        for _ in 0..16 {
            tf.step(&store, &mut cache, &[0.5; 8]).unwrap();
        }
        assert_eq!(
            tf.step(&store, &mut cache, &[0.5; 8]).unwrap_err(),
            AttentionError::ContextOverflow { len: 17, max: 16 }
        );
    }

    fn embedder(store: &mut ParamStore<f64>) -> TokenEmbedder {
        TokenEmbedder::new(
            store,
            "emb",
            8,
            &[(Modality::State, 2), (Modality::Action, 5), (Modality::Reward, 1), (Modality::SubGoal, 8)],
            10,
            &mut Rng::new(7),
        )
    }

    #[test]
    fn modalities_are_independent() {
        let mut store = ParamStore::new();
        let e = embedder(&mut store);
        let a = e.embed_one(&store, Modality::Reward, &[0.0], 0);
        let b = e.embed_one(&store, Modality::State, &[0.0, 0.0], 0);
        assert_ne!(a, b);
    }

    #[test]
    fn timestep_is_additive() {
        let mut store = ParamStore::new();
        let e = embedder(&mut store);
        let t0 = e.embed_one(&store, Modality::State, &[3.0, 4.0], 0);
        let t1 = e.embed_one(&store, Modality::State, &[3.0, 4.0], 1);
        let table = store.get(store.find("emb.time").unwrap()).data();
        for j in 0..8 {
            let delta = table[8 + j] - table[j];
            assert!((t1[j] - t0[j] - delta).abs() < 1e-12);
        }
        assert_eq!(t0, e.embed_one(&store, Modality::State, &[3.0, 4.0], 0));
    }

    #[test]
    #[should_panic(expected = "not part of this embedder")]
    fn unknown_modality_panics() {
        let mut store = ParamStore::new();
        let e = embedder(&mut store);
        e.embed_one(&store, Modality::Done, &[1.0], 0);
    }

    #[test]
    fn embedder_gradients() {
        let mut store = ParamStore::new();
        let e = embedder(&mut store);
        let mut rng = Rng::new(8);
        let s = random_tensor(&[3, 2], 2.0, &mut rng);
        let m = random_tensor(&[3, 8], 1.0, &mut rng);
        let r = check_params(&store, 1e-5, 16, &mut rng, |g, st| {
            let x = e.embed(g, st, Modality::State, g.constant(s.clone()), &[0, 4, 10]);
            (x * g.constant(m.clone())).sum()
        });
        assert!(r.max_rel_err < 1e-3, "{r:?}");
    }
}
