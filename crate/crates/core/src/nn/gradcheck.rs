//! Central finite-difference gradient checks.
//!
//! The numeric side only ever evaluates forward passes, so it stays
//! independent of the backward implementation it verifies.
//!
//! Error metric per checked tensor: `max|analytic - numeric| /
//! max(max|analytic|, max|numeric|, 1e-3)`; the report keeps the worst
//! tensor.

use rand::{seq::index::sample, SeedableRng};

use super::{Graph, NnError, ParamStore, Rng, Session, Tensor, Var};

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst: String,
    pub checked: usize,
}

impl GradCheckReport {
    fn new() -> Self {
        Self {
            max_rel_error: 0.0,
            worst: String::new(),
            checked: 0,
        }
    }

    fn record(&mut self, name: &str, analytic: &[f64], numeric: &[f64]) {
        let diff = analytic
            .iter()
            .zip(numeric)
            .map(|(a, n)| (a - n).abs())
            .fold(0.0, f64::max);
        let scale = analytic
            .iter()
            .chain(numeric)
            .map(|v| v.abs())
            .fold(1e-3, f64::max);
        let err = diff / scale;
        self.checked += analytic.len();
        if err > self.max_rel_error || self.worst.is_empty() {
            self.max_rel_error = self.max_rel_error.max(err);
            self.worst = name.to_string();
        }
    }
}

fn pick_indices(n: usize, max: Option<usize>, seed: u64) -> Vec<usize> {
    match max {
        Some(m) if m < n => {
            let mut rng = Rng::seed_from_u64(seed);
            let mut idx = sample(&mut rng, n, m).into_vec();
            idx.sort_unstable();
            idx
        }
        _ => (0..n).collect(),
    }
}

/// Checks `f(inputs)` (a scalar-valued graph) w.r.t. every input tensor.
pub fn check_inputs<F>(inputs: &[Tensor<f64>], step: f64, f: F) -> Result<GradCheckReport, NnError>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var, NnError>,
{
    let eval = |vals: &[Tensor<f64>]| -> Result<f64, NnError> {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).data().iter().sum())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;

    let mut report = GradCheckReport::new();
    let mut work = inputs.to_vec();
    for (i, &v) in vars.iter().enumerate() {
        let analytic = g
            .grad(v)
            .map(|t| t.into_data())
            .unwrap_or_else(|| vec![0.0; inputs[i].len()]);
        let mut numeric = vec![0.0; analytic.len()];
        for j in 0..analytic.len() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + step;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - step;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            numeric[j] = (plus - minus) / (2.0 * step);
        }
        report.record(&format!("input{i}"), &analytic, &numeric);
    }
    Ok(report)
}

/// Checks a session-level function w.r.t. the parameters in `store`.
///
/// Every evaluation gets a fresh RNG seeded with `seed`, so training-mode
/// dropout draws the same mask each time. At most `max_per_param` entries of
/// each parameter are perturbed.
pub fn check_params<F>(
    store: &mut ParamStore<f64>,
    train: bool,
    seed: u64,
    step: f64,
    max_per_param: Option<usize>,
    f: F,
) -> Result<GradCheckReport, NnError>
where
    F: Fn(&mut Session<'_, f64>) -> Result<Var, NnError>,
{
    let eval = |store: &mut ParamStore<f64>| -> Result<f64, NnError> {
        let mut rng = Rng::seed_from_u64(seed);
        let mut s = Session::new(store, train, &mut rng);
        let out = f(&mut s)?;
        Ok(s.value(out).data().iter().sum())
    };

    store.zero_grad();
    {
        let mut rng = Rng::seed_from_u64(seed);
        let mut s = Session::new(store, train, &mut rng);
        let out = f(&mut s)?;
        s.backward(out)?;
    }

    let names: Vec<String> = store.param_names().map(str::to_string).collect();
    let mut report = GradCheckReport::new();
    for (pi, name) in names.iter().enumerate() {
        let Some(grad) = store.grad(name).map(<[f64]>::to_vec) else {
            continue;
        };
        let idx = pick_indices(grad.len(), max_per_param, seed ^ pi as u64);
        let mut analytic = Vec::with_capacity(idx.len());
        let mut numeric = Vec::with_capacity(idx.len());
        for &j in &idx {
            let orig = store.param(name)?.data()[j];
            store.param_mut(name)?.data_mut()[j] = orig + step;
            let plus = eval(store)?;
            store.param_mut(name)?.data_mut()[j] = orig - step;
            let minus = eval(store)?;
            store.param_mut(name)?.data_mut()[j] = orig;
            analytic.push(grad[j]);
            numeric.push((plus - minus) / (2.0 * step));
        }
        report.record(name, &analytic, &numeric);
    }
    store.zero_grad();
    Ok(report)
}
