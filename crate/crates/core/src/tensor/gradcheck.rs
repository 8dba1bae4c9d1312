//! Central finite-difference checks of tape gradients, in 64-bit.
//!
//! The numeric side only ever evaluates forward passes, so it is independent
//! of every backward rule it checks.

use super::{Graph, ParamStore, Rng, Tensor, Var};

/// Magnitudes below this are compared absolutely.
pub const REL_FLOOR: f64 = 1e-5;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Clone, Debug, Default)]
pub struct GradReport {
    pub max_rel_err: f64,
    pub worst: String,
    pub checked: usize,
}

impl GradReport {
    fn record(&mut self, what: impl FnOnce() -> String, analytic: f64, numeric: f64) {
        self.checked += 1;
        let e = rel_err(analytic, numeric);
        if e >= self.max_rel_err {
            self.max_rel_err = e;
            self.worst = format!("{} analytic={analytic:e} numeric={numeric:e}", what());
        }
    }
}

/// Checks d(f)/d(inputs) for every input element.
pub fn check_inputs<F>(inputs: &[Tensor<f64>], h: f64, f: F) -> GradReport
where
    F: for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Var<'g, f64>,
{
    let eval = |xs: &[Tensor<f64>]| -> f64 {
        let g = Graph::new_eval();
        let vars: Vec<_> = xs.iter().map(|x| g.constant(x.clone())).collect();
        f(&g, &vars).item()
    };

    let g = Graph::new_eval();
    let vars: Vec<_> = inputs.iter().map(|x| g.leaf(x.clone())).collect();
    let loss = f(&g, &vars);
    let grads = g.backward(loss);

    let mut report = GradReport::default();
    let mut work = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.wrt(*v).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; inputs[i].numel()]);
        for (j, &an) in analytic.iter().enumerate() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let up = eval(&work);
            work[i].data_mut()[j] = orig - h;
            let down = eval(&work);
            work[i].data_mut()[j] = orig;
            report.record(|| format!("input {i}[{j}]"), an, (up - down) / (2.0 * h));
        }
    }
    report
}

/// Checks d(f)/d(params) on up to `per_param` randomly chosen entries of
/// every trainable parameter.
pub fn check_params<F>(store: &ParamStore<f64>, h: f64, per_param: usize, rng: &mut Rng, f: F) -> GradReport
where
    F: for<'g> Fn(&'g Graph<f64>, &ParamStore<f64>) -> Var<'g, f64>,
{
    let mut analytic = store.clone();
    analytic.zero_grad();
    {
        let g = Graph::new_eval();
        let loss = f(&g, &analytic);
        g.backward(loss).accumulate_into(&mut analytic);
    }

    let mut report = GradReport::default();
    let mut work = store.clone();
    for id in store.ids() {
        if !store.get(id).requires_grad {
            continue;
        }
        let n = store.get(id).numel();
        let picks: Vec<usize> = if n <= per_param {
            (0..n).collect()
        } else {
            (0..per_param).map(|_| rng.below(n)).collect()
        };
        let grad = analytic.get(id).grad.clone().unwrap_or_else(|| vec![0.0; n]);
        for j in picks {
            let orig = work.get(id).data()[j];
            work.get_mut(id).data_mut()[j] = orig + h;
            let up = {
                let g = Graph::new_eval();
                f(&g, &work).item()
            };
            work.get_mut(id).data_mut()[j] = orig - h;
            let down = {
                let g = Graph::new_eval();
                f(&g, &work).item()
            };
            work.get_mut(id).data_mut()[j] = orig;
            report.record(|| format!("{}[{j}]", store.name(id)), grad[j], (up - down) / (2.0 * h));
        }
    }
    report
}

/// Random tensor with entries uniform in `[-scale, scale]`.
pub fn random_tensor(shape: &[usize], scale: f64, rng: &mut Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.uniform_range(-scale, scale))
}
