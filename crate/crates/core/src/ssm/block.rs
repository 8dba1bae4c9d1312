use super::conv::{causal_conv, conv_forward};
use super::scan::{scan_parallel, scan_sequential, selective_scan, ScanInputs, ScanState};
use super::SsmConfig;
use crate::tensor::kernels::{self, inverse_softplus, silu, softplus};
use crate::tensor::{Graph, ParamId, ParamStore, Rng, Scalar, Tensor, Var};

/// How the scan inside each layer is evaluated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ScanMode {
    #[default]
    Sequential,
    /// Blelloch scan; only on non-recording graphs.
    Parallel,
}

/// Parameter handles of one residual layer.
#[derive(Clone, Debug)]
pub struct MambaLayer {
    pub ln_gain: ParamId,
    pub ln_bias: ParamId,
    /// `D × 2E`: value branch then gate branch.
    pub w_in: ParamId,
    pub conv_w: ParamId,
    pub conv_b: ParamId,
    /// `E × (r + 2N)`: Δ low-rank input, then B, then C.
    pub w_x: ParamId,
    pub w_dt: ParamId,
    pub dt_bias: ParamId,
    /// `E × N`, `A = −exp(a_log)`.
    pub a_log: ParamId,
    pub d: ParamId,
    pub w_out: ParamId,
}

#[derive(Clone, Debug)]
pub struct MambaStack {
    pub cfg: SsmConfig,
    pub layers: Vec<MambaLayer>,
}

/// Recurrent inference state: one conv window and scan state per layer.
#[derive(Clone, Debug, PartialEq)]
pub struct MambaState<T = f32> {
    pub windows: Vec<Vec<T>>,
    pub scans: Vec<ScanState<T>>,
}

impl<T: Scalar> MambaState<T> {
    pub fn steps(&self) -> usize {
        self.scans.first().map_or(0, |s| s.step)
    }
}

impl MambaStack {
    /// Registers `cfg.n_layers` layers under `prefix` in `store`.
    pub fn new<T: Scalar>(cfg: &SsmConfig, store: &mut ParamStore<T>, prefix: &str, rng: &mut Rng) -> Self {
        let (d, e, n, k) = (cfg.embed_dim, cfg.inner_dim(), cfg.state_size, cfg.conv_width);
        let r = cfg.resolved_dt_rank();
        let out_std = (e as f64).powf(-0.5) / (2.0 * cfg.n_layers.max(1) as f64).sqrt();
        let layers = (0..cfg.n_layers)
            .map(|i| {
                let p = |s: &str| format!("{prefix}.{i}.{s}");
                let conv_bound = (k as f64).powf(-0.5);
                let conv_w = Tensor::from_fn(&[e, k], |_| T::from_f64_lossy(rng.uniform_range(-conv_bound, conv_bound)));
                let (lo, hi) = (cfg.dt_min.ln(), cfg.dt_max.ln());
                let dt_bias = Tensor::from_fn(&[e], |_| {
                    T::from_f64_lossy(inverse_softplus(rng.uniform_range(lo, hi).exp()))
                });
                let a_log = Tensor::from_fn(&[e, n], |j| T::from_f64_lossy(((j % n + 1) as f64).ln()));
                MambaLayer {
                    ln_gain: store.add_const(p("ln.gain"), &[d], 1.0),
                    ln_bias: store.add_const(p("ln.bias"), &[d], 0.0),
                    w_in: store.add_normal(p("w_in"), &[d, 2 * e], (d as f64).powf(-0.5), rng),
                    conv_w: store.add(p("conv.w"), conv_w, true),
                    conv_b: store.add_const(p("conv.b"), &[e], 0.0),
                    w_x: store.add_normal(p("w_x"), &[e, r + 2 * n], (e as f64).powf(-0.5), rng),
                    w_dt: store.add_normal(p("w_dt"), &[r, e], (r as f64).powf(-0.5), rng),
                    dt_bias: store.add(p("dt_bias"), dt_bias, true),
                    a_log: store.add(p("a_log"), a_log, true),
                    d: store.add_const(p("d"), &[e], 1.0),
                    w_out: store.add_normal(p("w_out"), &[e, d], out_std, rng),
                }
            })
            .collect();
        Self { cfg: cfg.clone(), layers }
    }

    /// Runs every layer over `x` (`R×D`), a row-stack of independent
    /// sequences with lengths `segs`.
    pub fn forward<'g, T: Scalar>(
        &self,
        g: &'g Graph<T>,
        store: &ParamStore<T>,
        x: Var<'g, T>,
        segs: &[usize],
    ) -> Var<'g, T> {
        self.forward_with(g, store, x, segs, ScanMode::Sequential)
    }

    pub fn forward_with<'g, T: Scalar>(
        &self,
        g: &'g Graph<T>,
        store: &ParamStore<T>,
        x: Var<'g, T>,
        segs: &[usize],
        mode: ScanMode,
    ) -> Var<'g, T> {
        assert!(
            mode == ScanMode::Sequential || !g.is_recording(),
            "parallel scan has no backward; use an inference graph"
        );
        assert_eq!(x.cols(), self.cfg.embed_dim, "mamba input width");
        assert_eq!(segs.iter().sum::<usize>(), x.rows(), "segments must cover every row");
        let (e, n) = (self.cfg.inner_dim(), self.cfg.state_size);
        let r = self.cfg.resolved_dt_rank();
        let mut x = x;
        for l in &self.layers {
            let pv = |id| g.param(store, id);
            let h = x.layer_norm(pv(l.ln_gain), pv(l.ln_bias));
            let xz = h.matmul(pv(l.w_in));
            let z = xz.slice_cols(e, e);
            let xc = causal_conv(g, xz.slice_cols(0, e), pv(l.conv_w), pv(l.conv_b), segs).silu();
            let proj = xc.matmul(pv(l.w_x));
            let delta = proj.slice_cols(0, r).matmul(pv(l.w_dt)).add_row(pv(l.dt_bias)).softplus();
            let (bm, cm) = (proj.slice_cols(r, n), proj.slice_cols(r + n, n));
            let a = pv(l.a_log).exp().scale(-1.0);
            let y = match mode {
                ScanMode::Sequential => selective_scan(g, xc, delta, a, bm, cm, pv(l.d), segs),
                ScanMode::Parallel => {
                    let (uv, dv, av, bv, cv, skip) =
                        (xc.value(), delta.value(), a.value(), bm.value(), cm.value(), pv(l.d).value());
                    let mut y = Vec::with_capacity(uv.len());
                    let mut start = 0;
                    for &len in segs {
                        let inp = ScanInputs {
                            u: &uv[start * e..(start + len) * e],
                            delta: &dv[start * e..(start + len) * e],
                            a: &av,
                            b: &bv[start * n..(start + len) * n],
                            c: &cv[start * n..(start + len) * n],
                            d: Some(&skip),
                            channels: e,
                            state: n,
                        };
                        y.extend(scan_parallel(&inp, None));
                        start += len;
                    }
                    g.constant(Tensor::from_vec(&[uv.len() / e, e], y))
                }
            };
            x = x + (y * z.silu()).matmul(pv(l.w_out));
        }
        x
    }

    pub fn init_state<T: Scalar>(&self) -> MambaState<T> {
        let e = self.cfg.inner_dim();
        MambaState {
            windows: self.layers.iter().map(|_| vec![T::zero(); (self.cfg.conv_width - 1) * e]).collect(),
            scans: self.layers.iter().map(|_| ScanState::zeros(e, self.cfg.state_size)).collect(),
        }
    }

    /// Advances the recurrent state by one token (`D` values) and returns
    /// the stack output for it. Agrees with [`forward`](Self::forward) up to
    /// floating-point summation order.
    pub fn step<T: Scalar>(&self, store: &ParamStore<T>, state: &mut MambaState<T>, token: &[T]) -> Vec<T> {
        let cfg = &self.cfg;
        let (dm, e, n, k) = (cfg.embed_dim, cfg.inner_dim(), cfg.state_size, cfg.conv_width);
        let r = cfg.resolved_dt_rank();
        assert_eq!(token.len(), dm, "mamba token width");
        let mut x = token.to_vec();
        for (i, l) in self.layers.iter().enumerate() {
            let w = |id| store.get(id).data();
            let (h, _) = kernels::layer_norm_forward(&x, w(l.ln_gain), w(l.ln_bias), dm, kernels::LN_EPS);
            let mut xz = vec![T::zero(); 2 * e];
            T::gemm(1, dm, 2 * e, &h, false, w(l.w_in), false, &mut xz, false);
            let mut xc = conv_forward(&xz[..e], w(l.conv_w), w(l.conv_b), e, k, Some(&mut state.windows[i]));
            xc.iter_mut().for_each(|v| *v = silu(*v));
            let mut proj = vec![T::zero(); r + 2 * n];
            T::gemm(1, e, r + 2 * n, &xc, false, w(l.w_x), false, &mut proj, false);
            let mut delta = vec![T::zero(); e];
            T::gemm(1, r, e, &proj[..r], false, w(l.w_dt), false, &mut delta, false);
            for (dv, &b) in delta.iter_mut().zip(w(l.dt_bias)) {
                *dv = softplus(*dv + b);
            }
            let a: Vec<T> = w(l.a_log).iter().map(|&v| -v.exp()).collect();
            let inp = ScanInputs {
                u: &xc,
                delta: &delta,
                a: &a,
                b: &proj[r..r + n],
                c: &proj[r + n..],
                d: Some(w(l.d)),
                channels: e,
                state: n,
            };
            let mut y = scan_sequential(&inp, Some(&mut state.scans[i]));
            for (yv, &zv) in y.iter_mut().zip(&xz[e..]) {
                *yv *= silu(zv);
            }
            let mut out = vec![T::zero(); dm];
            T::gemm(1, e, dm, &y, false, w(l.w_out), false, &mut out, false);
            for (xv, o) in x.iter_mut().zip(out) {
                *xv += o;
            }
        }
        x
    }
}
