//! Central finite-difference gradient checking.
//!
//! The checker only ever evaluates the forward pass of the function under
//! test, so it is independent of the reverse-mode implementation it audits.

use super::{Graph, ParamStore, Tensor, Var};

/// Outcome of a gradient check over all inputs.
#[derive(Clone, Debug)]
pub struct GradCheck {
    /// Largest per-input relative error `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖, 1e-3)`.
    pub max_rel_err: f64,
    /// Relative error for each input, in order.
    pub per_input: Vec<f64>,
}

/// Compares reverse-mode gradients of the scalar built by `f` with central
/// differences of step `h`.
pub fn check<F>(inputs: &[Tensor], h: f64, f: F) -> GradCheck
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = f(&mut g, &vars);
    let grads = g.backward(out);
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| {
            grads
                .wrt(*v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.shape()))
        })
        .collect();

    let eval = |ins: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.input(t.clone())).collect();
        let out = f(&mut g, &vars);
        g.value(out).item()
    };

    let mut per_input = Vec::with_capacity(inputs.len());
    for (k, t) in inputs.iter().enumerate() {
        let mut numeric = vec![0.0; t.len()];
        let mut work: Vec<Tensor> = inputs.to_vec();
        for (i, num) in numeric.iter_mut().enumerate() {
            let x0 = t.data()[i];
            work[k].data_mut()[i] = x0 + h;
            let fp = eval(&work);
            work[k].data_mut()[i] = x0 - h;
            let fm = eval(&work);
            work[k].data_mut()[i] = x0;
            *num = (fp - fm) / (2.0 * h);
        }
        per_input.push(rel_err(analytic[k].data(), &numeric));
    }
    GradCheck {
        max_rel_err: per_input.iter().copied().fold(0.0, f64::max),
        per_input,
    }
}

/// Like [`check`], but differentiates with respect to every tensor of a
/// [`ParamStore`]; `f` pulls parameters into the graph by name.
pub fn check_params<F>(store: &ParamStore, h: f64, f: F) -> GradCheck
where
    F: Fn(&mut Graph, &ParamStore) -> Var,
{
    let mut g = Graph::new();
    let out = f(&mut g, store);
    let grads = g.backward(out);
    let analytic = g.param_grads(&grads, store);

    let eval = |p: &ParamStore| -> f64 {
        let mut g = Graph::new();
        let out = f(&mut g, p);
        g.value(out).item()
    };

    let mut per_input = Vec::with_capacity(store.len());
    let mut work = store.clone();
    for (name, t) in store.iter() {
        let mut numeric = vec![0.0; t.len()];
        for (i, num) in numeric.iter_mut().enumerate() {
            let x0 = t.data()[i];
            work.get_mut(name).unwrap().data_mut()[i] = x0 + h;
            let fp = eval(&work);
            work.get_mut(name).unwrap().data_mut()[i] = x0 - h;
            let fm = eval(&work);
            work.get_mut(name).unwrap().data_mut()[i] = x0;
            *num = (fp - fm) / (2.0 * h);
        }
        per_input.push(rel_err(analytic.get(name).unwrap().data(), &numeric));
    }
    GradCheck {
        max_rel_err: per_input.iter().copied().fold(0.0, f64::max),
        per_input,
    }
}

fn rel_err(a: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = a
        .iter()
        .zip(numeric)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|x| x * x).sum::<f64>().sqrt();
    // Gradients that vanish analytically (e.g. key biases under softmax)
    // are compared absolutely.
    diff / na.max(nn).max(1e-3)
}
