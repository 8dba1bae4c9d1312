//! Diagonal selective scan: ZOH discretization, the sequential recurrence,
//! a Blelloch scan over affine maps, and the fused differentiable op.
//!
//! Layout for a sequence of `L` rows and `E` channels with state size `N`:
//! `u`, `delta`: `L×E`; `a`: `E×N`; `b`, `c`: `L×N`; `d`: `E`.

use std::cmp::Ordering;

use rayon::prelude::*;

use super::SsmError;
use crate::tensor::{CustomOp, Graph, Scalar, Var};

/// Zero-order-hold input factor `(e^{ΔA} − 1) / A`, so that `B̄ = factor · B`.
#[inline]
pub fn zoh_factor<T: Scalar>(delta: T, a: T) -> T {
    (delta * a).exp_m1() / a
}

/// `∂/∂A [(e^{ΔA} − 1)/A]`, with a series near `ΔA = 0`.
#[inline]
fn zoh_factor_da<T: Scalar>(delta: T, a: T) -> T {
    let x = delta * a;
    if x.abs() < T::one() {
        // Σ_{k≥2} x^{k−2} (k−1)/k!, scaled by Δ².
        let mut terms = [0.0f64; 18];
        let mut fact = 1.0f64;
        for (k, t) in terms.iter_mut().enumerate().skip(1) {
            fact *= k as f64;
            *t = (k as f64 - 1.0) / fact;
        }
        let mut coef = T::zero();
        for &t in terms[2..].iter().rev() {
            coef = coef * x + T::from_f64_lossy(t);
        }
        delta * delta * coef
    } else {
        (x * x.exp() - x.exp_m1()) / (a * a)
    }
}

/// Discretizes a diagonal `(A, B)` with step `Δ`: returns `(Ā, B̄)`.
pub fn discretize<T: Scalar>(a: &[T], b: &[T], delta: T) -> Result<(Vec<T>, Vec<T>), SsmError> {
    if delta.partial_cmp(&T::zero()) != Some(Ordering::Greater) {
        return Err(SsmError::NonPositiveStep(delta.to_f64().unwrap_or(f64::NAN)));
    }
    if a.len() != b.len() {
        return Err(SsmError::Length(format!("A has {} entries, B has {}", a.len(), b.len())));
    }
    if let Some(&bad) = a.iter().find(|&&v| v.partial_cmp(&T::zero()) != Some(Ordering::Less)) {
        return Err(SsmError::NonNegativeA(bad.to_f64().unwrap_or(f64::NAN)));
    }
    let abar = a.iter().map(|&ai| (delta * ai).exp()).collect();
    let bbar = a.iter().zip(b).map(|(&ai, &bi)| zoh_factor(delta, ai) * bi).collect();
    Ok((abar, bbar))
}

/// Borrowed inputs of one scan.
#[derive(Clone, Copy, Debug)]
pub struct ScanInputs<'a, T> {
    pub u: &'a [T],
    pub delta: &'a [T],
    pub a: &'a [T],
    pub b: &'a [T],
    pub c: &'a [T],
    /// Optional per-channel skip `y += d ∘ u`.
    pub d: Option<&'a [T]>,
    pub channels: usize,
    pub state: usize,
}

impl<T: Scalar> ScanInputs<'_, T> {
    pub fn len(&self) -> usize {
        self.u.len() / self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.u.is_empty()
    }

    fn validate(&self) {
        let (e, n, l) = (self.channels, self.state, self.len());
        assert!(e > 0 && n > 0, "scan needs at least one channel and state");
        assert_eq!(self.u.len(), l * e, "u must be L×E");
        assert_eq!(self.delta.len(), l * e, "delta must be L×E");
        assert_eq!(self.a.len(), e * n, "a must be E×N");
        assert_eq!(self.b.len(), l * n, "b must be L×N");
        assert_eq!(self.c.len(), l * n, "c must be L×N");
        if let Some(d) = self.d {
            assert_eq!(d.len(), e, "d must have E entries");
        }
    }

    #[inline]
    fn coeffs(&self, t: usize, e: usize, n: usize) -> (T, T) {
        let (ch, st) = (self.channels, self.state);
        let dt = self.delta[t * ch + e];
        let a = self.a[e * st + n];
        let abar = (dt * a).exp();
        let bu = zoh_factor(dt, a) * self.b[t * st + n] * self.u[t * ch + e];
        (abar, bu)
    }

    #[inline]
    fn skip(&self, t: usize, e: usize) -> T {
        match self.d {
            Some(d) => d[e] * self.u[t * self.channels + e],
            None => T::zero(),
        }
    }
}

/// Recurrent state carried between calls: `h` is `E×N`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScanState<T = f32> {
    pub h: Vec<T>,
    pub step: usize,
}

impl<T: Scalar> ScanState<T> {
    pub fn zeros(channels: usize, state: usize) -> Self {
        Self {
            h: vec![T::zero(); channels * state],
            step: 0,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.h.iter().all(|v| v.is_finite())
    }
}

/// `h_t = Ā_t h_{t−1} + B̄_t u_t`, `y_t = C_t h_t (+ d u_t)`.
///
/// Starts from `carry` when given and leaves the final state in it.
pub fn scan_sequential<T: Scalar>(inp: &ScanInputs<'_, T>, carry: Option<&mut ScanState<T>>) -> Vec<T> {
    inp.validate();
    let (e_dim, n_dim, l) = (inp.channels, inp.state, inp.len());
    let mut local;
    let st = match carry {
        Some(s) => {
            assert_eq!(s.h.len(), e_dim * n_dim, "carried state must be E×N");
            s
        }
        None => {
            local = ScanState::zeros(e_dim, n_dim);
            &mut local
        }
    };
    let y = scan_core(inp, st, None);
    st.step += l;
    y
}

fn scan_core<T: Scalar>(inp: &ScanInputs<'_, T>, st: &mut ScanState<T>, mut hs: Option<&mut Vec<T>>) -> Vec<T> {
    let (e_dim, n_dim, l) = (inp.channels, inp.state, inp.len());
    let mut y = vec![T::zero(); l * e_dim];
    for t in 0..l {
        for e in 0..e_dim {
            let mut acc = T::zero();
            for n in 0..n_dim {
                let (abar, bu) = inp.coeffs(t, e, n);
                let h = &mut st.h[e * n_dim + n];
                *h = abar * *h + bu;
                acc += inp.c[t * n_dim + n] * *h;
            }
            y[t * e_dim + e] = acc + inp.skip(t, e);
        }
        if let Some(hs) = hs.as_deref_mut() {
            hs.extend_from_slice(&st.h);
        }
    }
    y
}

/// Composition of affine maps `x ↦ a x + b`: `first` applied, then `second`.
#[inline]
pub fn compose<T: Scalar>(first: (T, T), second: (T, T)) -> (T, T) {
    (second.0 * first.0, second.0 * first.1 + second.1)
}

/// In-place inclusive Blelloch scan of affine maps: afterwards element `t`
/// holds the composition of elements `0..=t`.
pub fn affine_scan<T: Scalar>(a: &mut [T], b: &mut [T]) {
    assert_eq!(a.len(), b.len());
    let n = a.len();
    if n <= 1 {
        return;
    }
    let m = n.next_power_of_two();
    let mut ta = vec![T::one(); m];
    let mut tb = vec![T::zero(); m];
    ta[..n].copy_from_slice(a);
    tb[..n].copy_from_slice(b);

    let mut half = 1;
    while half < m {
        let stride = 2 * half;
        for i in (stride - 1..m).step_by(stride) {
            let l = i - half;
            (ta[i], tb[i]) = compose((ta[l], tb[l]), (ta[i], tb[i]));
        }
        half = stride;
    }

    ta[m - 1] = T::one();
    tb[m - 1] = T::zero();
    let mut half = m / 2;
    while half >= 1 {
        let stride = 2 * half;
        for i in (stride - 1..m).step_by(stride) {
            let l = i - half;
            let left = (ta[l], tb[l]);
            let parent = (ta[i], tb[i]);
            (ta[l], tb[l]) = parent;
            (ta[i], tb[i]) = compose(parent, left);
        }
        half /= 2;
    }

    for t in 0..n {
        (a[t], b[t]) = compose((ta[t], tb[t]), (a[t], b[t]));
    }
}

/// Same result as [`scan_sequential`] computed with [`affine_scan`], one
/// channel per task. Reads but does not advance `init`.
pub fn scan_parallel<T: Scalar>(inp: &ScanInputs<'_, T>, init: Option<&ScanState<T>>) -> Vec<T> {
    inp.validate();
    let (e_dim, n_dim, l) = (inp.channels, inp.state, inp.len());
    if let Some(s) = init {
        assert_eq!(s.h.len(), e_dim * n_dim, "initial state must be E×N");
    }
    let columns: Vec<Vec<T>> = (0..e_dim)
        .into_par_iter()
        .map(|e| {
            let mut col = vec![T::zero(); l];
            let mut a = vec![T::zero(); l];
            let mut b = vec![T::zero(); l];
            for n in 0..n_dim {
                for t in 0..l {
                    (a[t], b[t]) = inp.coeffs(t, e, n);
                }
                affine_scan(&mut a, &mut b);
                let h0 = init.map_or(T::zero(), |s| s.h[e * n_dim + n]);
                for t in 0..l {
                    col[t] += inp.c[t * n_dim + n] * (a[t] * h0 + b[t]);
                }
            }
            for (t, v) in col.iter_mut().enumerate() {
                *v += inp.skip(t, e);
            }
            col
        })
        .collect();
    let mut y = vec![T::zero(); l * e_dim];
    for (e, col) in columns.iter().enumerate() {
        for (t, &v) in col.iter().enumerate() {
            y[t * e_dim + e] = v;
        }
    }
    y
}

/// Fused selective scan over ragged segments; the state resets at each
/// segment start. Inputs: `u, delta: R×E`, `a: E×N`, `b, c: R×N`, `d: E`.
#[allow(clippy::too_many_arguments)]
pub fn selective_scan<'g, T: Scalar>(
    g: &'g Graph<T>,
    u: Var<'g, T>,
    delta: Var<'g, T>,
    a: Var<'g, T>,
    b: Var<'g, T>,
    c: Var<'g, T>,
    d: Var<'g, T>,
    segs: &[usize],
) -> Var<'g, T> {
    let segs = segs.to_vec();
    let recording = g.is_recording();
    g.custom(&[u, delta, a, b, c, d], move |v, shapes| {
        let e_dim = *shapes[0].last().unwrap();
        let n_dim = *shapes[2].last().unwrap();
        let rows = v[0].len() / e_dim;
        assert_eq!(segs.iter().sum::<usize>(), rows, "segments must cover every row");
        let mut y = Vec::with_capacity(rows * e_dim);
        let mut hs = if recording { Vec::with_capacity(rows * e_dim * n_dim) } else { Vec::new() };
        let mut start = 0;
        for &len in &segs {
            let inp = ScanInputs {
                u: &v[0][start * e_dim..(start + len) * e_dim],
                delta: &v[1][start * e_dim..(start + len) * e_dim],
                a: v[2],
                b: &v[3][start * n_dim..(start + len) * n_dim],
                c: &v[4][start * n_dim..(start + len) * n_dim],
                d: Some(v[5]),
                channels: e_dim,
                state: n_dim,
            };
            inp.validate();
            let mut st = ScanState::zeros(e_dim, n_dim);
            y.extend(scan_core(&inp, &mut st, recording.then_some(&mut hs)));
            start += len;
        }
        let op = ScanOp {
            segs: segs.clone(),
            hs,
            channels: e_dim,
            state: n_dim,
        };
        (vec![rows, e_dim], y, Box::new(op) as Box<dyn CustomOp<T>>)
    })
}

struct ScanOp<T> {
    segs: Vec<usize>,
    /// Post-update state per row, `R×E×N`.
    hs: Vec<T>,
    channels: usize,
    state: usize,
}

impl<T: Scalar> CustomOp<T> for ScanOp<T> {
    fn name(&self) -> &'static str {
        "selective_scan"
    }

    fn backward(&self, inputs: &[&[T]], _output: &[T], gy: &[T], _needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let (u, delta, a, b, c, d) = (inputs[0], inputs[1], inputs[2], inputs[3], inputs[4], inputs[5]);
        let (ed, nd) = (self.channels, self.state);
        let mut gu = vec![T::zero(); u.len()];
        let mut gdelta = vec![T::zero(); delta.len()];
        let mut ga = vec![T::zero(); a.len()];
        let mut gb = vec![T::zero(); b.len()];
        let mut gc = vec![T::zero(); c.len()];
        let mut gd = vec![T::zero(); d.len()];
        let mut carry = vec![T::zero(); ed * nd];

        let mut end = u.len() / ed;
        for &len in self.segs.iter().rev() {
            let start = end - len;
            carry.iter_mut().for_each(|v| *v = T::zero());
            for t in (start..end).rev() {
                for e in 0..ed {
                    let gyt = gy[t * ed + e];
                    let ut = u[t * ed + e];
                    let dt = delta[t * ed + e];
                    gd[e] += gyt * ut;
                    gu[t * ed + e] += gyt * d[e];
                    for n in 0..nd {
                        let k = e * nd + n;
                        let h = self.hs[t * ed * nd + k];
                        let h_prev = if t > start { self.hs[(t - 1) * ed * nd + k] } else { T::zero() };
                        let an = a[k];
                        let bt = b[t * nd + n];
                        let ct = c[t * nd + n];
                        gc[t * nd + n] += gyt * h;
                        let gh = carry[k] + ct * gyt;
                        let abar = (dt * an).exp();
                        let phi = zoh_factor(dt, an);
                        // through Ā = exp(ΔA)
                        let g_abar = gh * h_prev * abar;
                        gdelta[t * ed + e] += g_abar * an;
                        ga[k] += g_abar * dt;
                        // through φ(Δ, A) · B · u
                        let g_phi = gh * bt * ut;
                        gdelta[t * ed + e] += g_phi * abar;
                        ga[k] += g_phi * zoh_factor_da(dt, an);
                        gb[t * nd + n] += gh * phi * ut;
                        gu[t * ed + e] += gh * phi * bt;
                        carry[k] = gh * abar;
                    }
                }
            }
            end = start;
        }
        vec![Some(gu), Some(gdelta), Some(ga), Some(gb), Some(gc), Some(gd)]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{check_inputs, random_tensor};
    use crate::tensor::{Rng, Tensor};

    fn random_inputs(l: usize, e: usize, n: usize, rng: &mut Rng) -> [Vec<f64>; 6] {
        let u = (0..l * e).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
        let delta = (0..l * e).map(|_| rng.uniform_range(0.001, 0.5)).collect();
        let a = (0..e * n).map(|_| -rng.uniform_range(0.1, 4.0)).collect();
        let b = (0..l * n).map(|_| rng.normal()).collect();
        let c = (0..l * n).map(|_| rng.normal()).collect();
        let d = (0..e).map(|_| rng.normal()).collect();
        [u, delta, a, b, c, d]
    }

    fn view<'a>(v: &'a [Vec<f64>; 6], e: usize, n: usize) -> ScanInputs<'a, f64> {
        ScanInputs {
            u: &v[0],
            delta: &v[1],
            a: &v[2],
            b: &v[3],
            c: &v[4],
            d: Some(&v[5]),
            channels: e,
            state: n,
        }
    }

    fn simpson(f: impl Fn(f64) -> f64, lo: f64, hi: f64, intervals: usize) -> f64 {
        let h = (hi - lo) / intervals as f64;
        let mut s = f(lo) + f(hi);
        for i in 1..intervals {
            s += f(lo + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        s * h / 3.0
    }

    #[test]
    fn discretize_closed_form() {
        let (abar, bbar) = discretize(&[-1.0f64], &[1.0], 2f64.ln()).unwrap();
        assert!((abar[0] - 0.5).abs() < 1e-15);
        assert!((bbar[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn discretize_small_step_limit() {
        let dt = 1e-9f64;
        let (abar, bbar) = discretize(&[-3.0], &[2.0], dt).unwrap();
        assert!((abar[0] - 1.0).abs() < 1e-8);
        assert!((bbar[0] / (dt * 2.0) - 1.0).abs() < 1e-8);
    }

    #[test]
    fn discretize_matches_quadrature() {
        let mut rng = Rng::new(17);
        for _ in 0..50 {
            let a = -rng.uniform_range(0.01, 10.0);
            let b = rng.uniform_range(-2.0, 2.0);
            let dt = rng.uniform_range(1e-4, 2.0);
            let (_, bbar) = discretize(&[a], &[b], dt).unwrap();
            let integral = simpson(|tau| (tau * a).exp() * b, 0.0, dt, 2000);
            assert!((bbar[0] - integral).abs() < 1e-6, "a={a} b={b} dt={dt}");
        }
    }

    #[test]
    fn discretize_rejects_bad_inputs() {
        assert!(matches!(discretize(&[-1.0f64], &[1.0], 0.0), Err(SsmError::NonPositiveStep(_))));
        assert!(matches!(discretize(&[-1.0f64], &[1.0], -0.1), Err(SsmError::NonPositiveStep(_))));
        assert!(matches!(discretize(&[0.0f64], &[1.0], 0.1), Err(SsmError::NonNegativeA(_))));
        assert!(matches!(discretize(&[-1.0f64, -2.0], &[1.0], 0.1), Err(SsmError::Length(_))));
    }

    #[test]
    fn abar_in_unit_interval() {
        let mut rng = Rng::new(3);
        for _ in 0..200 {
            let a = -rng.uniform_range(1e-3, 50.0);
            let dt = rng.uniform_range(1e-4, 3.0);
            let (abar, _) = discretize(&[a], &[1.0], dt).unwrap();
            assert!(abar[0] > 0.0 && abar[0] < 1.0);
        }
    }

    #[test]
    fn zoh_derivative_matches_differences() {
        for &(dt, a) in &[(0.01f64, -0.5f64), (0.3, -2.0), (1.0, -0.9), (2.0, -3.0), (0.999, -1.0), (1.001, -1.0)] {
            let h = 1e-6 * a.abs();
            let num = (zoh_factor(dt, a + h) - zoh_factor(dt, a - h)) / (2.0 * h);
            let ana = zoh_factor_da(dt, a);
            assert!((num - ana).abs() <= 1e-6 * ana.abs(), "dt={dt} a={a}: {ana} vs {num}");
        }
        // tiny ΔA: leading terms Δ²(1/2 + x/3)
        let (dt, a) = (1e-4f64, -1e-3f64);
        let x = dt * a;
        assert!((zoh_factor_da(dt, a) - dt * dt * (0.5 + x / 3.0)).abs() < 1e-13 * dt * dt);
    }

    #[test]
    fn geometric_recurrence() {
        // Ā = 0.5, B̄ = 0.5 with A = −1, Δ = ln 2, B = 1.
        let ln2 = 2f64.ln();
        let inp = ScanInputs {
            u: &[1.0, 0.0, 0.0],
            delta: &[ln2; 3],
            a: &[-1.0],
            b: &[1.0; 3],
            c: &[1.0; 3],
            d: None,
            channels: 1,
            state: 1,
        };
        let y = scan_sequential(&inp, None);
        for (got, want) in y.iter().zip([0.5, 0.25, 0.125]) {
            assert!((got - want).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_input_zero_output() {
        let mut rng = Rng::new(1);
        let mut v = random_inputs(16, 3, 4, &mut rng);
        v[0].iter_mut().for_each(|x| *x = 0.0);
        assert!(scan_sequential(&view(&v, 3, 4), None).iter().all(|&y| y == 0.0));
        assert!(scan_parallel(&view(&v, 3, 4), None).iter().all(|&y| y == 0.0));
    }

    #[test]
    fn split_with_carried_state_is_bit_identical() {
        let mut rng = Rng::new(8);
        let (l, e, n) = (40, 3, 5);
        let v = random_inputs(l, e, n, &mut rng);
        let whole = scan_sequential(&view(&v, e, n), None);
        let half = l / 2;
        let part = |r: std::ops::Range<usize>, w: usize, x: &Vec<f64>| x[r.start * w..r.end * w].to_vec();
        let first: [Vec<f64>; 6] = [
            part(0..half, e, &v[0]),
            part(0..half, e, &v[1]),
            v[2].clone(),
            part(0..half, n, &v[3]),
            part(0..half, n, &v[4]),
            v[5].clone(),
        ];
        let second: [Vec<f64>; 6] = [
            part(half..l, e, &v[0]),
            part(half..l, e, &v[1]),
            v[2].clone(),
            part(half..l, n, &v[3]),
            part(half..l, n, &v[4]),
            v[5].clone(),
        ];
        let mut st = ScanState::zeros(e, n);
        let mut y = scan_sequential(&view(&first, e, n), Some(&mut st));
        assert_eq!(st.step, half);
        let from_mid = scan_parallel(&view(&second, e, n), Some(&st));
        y.extend(scan_sequential(&view(&second, e, n), Some(&mut st)));
        assert_eq!(y, whole);
        for (p, s) in from_mid.iter().zip(&whole[half * e..]) {
            assert!((p - s).abs() <= 1e-12 * s.abs().max(1.0));
        }
    }

    #[test]
    fn single_step_parallel_is_exact() {
        let mut rng = Rng::new(2);
        let v = random_inputs(1, 4, 3, &mut rng);
        assert_eq!(scan_parallel(&view(&v, 4, 3), None), scan_sequential(&view(&v, 4, 3), None));
    }

    #[test]
    fn parallel_matches_sequential_f32() {
        let mut rng = Rng::new(11);
        let (l, e, n) = (2048, 2, 4);
        let v = random_inputs(l, e, n, &mut rng);
        let v32: Vec<Vec<f32>> = v.iter().map(|x| x.iter().map(|&f| f as f32).collect()).collect();
        let inp = ScanInputs {
            u: &v32[0],
            delta: &v32[1],
            a: &v32[2],
            b: &v32[3],
            c: &v32[4],
            d: Some(&v32[5]),
            channels: e,
            state: n,
        };
        let seq = scan_sequential(&inp, None);
        let par = scan_parallel(&inp, None);
        let scale = seq.iter().fold(0f32, |m, v| m.max(v.abs()));
        let dev = seq.iter().zip(&par).fold(0f32, |m, (a, b)| m.max((a - b).abs()));
        assert!(dev / scale < 1e-5, "relative deviation {}", dev / scale);
    }

    #[test]
    fn composition_is_associative() {
        let mut rng = Rng::new(4);
        for _ in 0..100 {
            let mut el = || (rng.uniform_range(0.0, 1.0), rng.uniform_range(-2.0, 2.0));
            let (x, y, z) = (el(), el(), el());
            let left = compose(compose(x, y), z);
            let right = compose(x, compose(y, z));
            assert!((left.0 - right.0).abs() < 1e-6 && (left.1 - right.1).abs() < 1e-6);
        }
    }

    #[test]
    fn affine_scan_matches_running_fold() {
        let mut rng = Rng::new(6);
        for n in [1, 2, 3, 5, 8, 13, 64, 100] {
            let mut a: Vec<f64> = (0..n).map(|_| rng.uniform_range(0.0, 1.0)).collect();
            let mut b: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
            let mut acc = (1.0, 0.0);
            let expect: Vec<(f64, f64)> = a
                .iter()
                .zip(&b)
                .map(|(&x, &y)| {
                    acc = compose(acc, (x, y));
                    acc
                })
                .collect();
            affine_scan(&mut a, &mut b);
            for t in 0..n {
                assert!((a[t] - expect[t].0).abs() < 1e-12 && (b[t] - expect[t].1).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fused_scan_gradients() {
        let mut rng = Rng::new(21);
        let (e, n, segs) = (3, 2, vec![4usize, 3]);
        let r: usize = segs.iter().sum();
        let u = random_tensor(&[r, e], 1.0, &mut rng);
        let delta = Tensor::from_fn(&[r, e], |_| rng.uniform_range(0.05, 0.8));
        let a = Tensor::from_fn(&[e, n], |_| -rng.uniform_range(0.2, 2.0));
        let b = random_tensor(&[r, n], 1.0, &mut rng);
        let c = random_tensor(&[r, n], 1.0, &mut rng);
        let d = random_tensor(&[e], 1.0, &mut rng);
        let w = random_tensor(&[r, e], 1.0, &mut rng);
        let report = check_inputs(&[u, delta, a, b, c, d, w], 1e-5, |g, v| {
            (selective_scan(g, v[0], v[1], v[2], v[3], v[4], v[5], &segs) * v[6]).sum()
        });
        assert!(report.max_rel_err < 1e-6, "{report:?}");
    }

    #[test]
    fn fused_scan_resets_at_segment_starts() {
        let mut rng = Rng::new(5);
        let (e, n) = (2, 3);
        let v = random_inputs(6, e, n, &mut rng);
        let g = Graph::<f64>::inference();
        let t = |x: &Vec<f64>, w: usize| g.constant(Tensor::from_vec(&[x.len() / w, w], x.clone()));
        let y = selective_scan(&g, t(&v[0], e), t(&v[1], e), t(&v[2], n), t(&v[3], n), t(&v[4], n), g.constant(Tensor::from_vec(&[e], v[5].clone())), &[2, 4]);
        let tail: [Vec<f64>; 6] = [
            v[0][2 * e..].to_vec(),
            v[1][2 * e..].to_vec(),
            v[2].clone(),
            v[3][2 * n..].to_vec(),
            v[4][2 * n..].to_vec(),
            v[5].clone(),
        ];
        assert_eq!(&y.value()[2 * e..], &scan_sequential(&view(&tail, e, n), None)[..]);
    }
}
