//! Central finite-difference gradient oracle.
//!
//! The oracle only ever evaluates the forward pass; it never touches
//! `Graph::backward`, so it stays independent of the analytic path it checks.

use ldag_core::autodiff::{Graph, Precision, Var};
use ldag_core::error::Result;

/// One differentiable input: its shape and starting values.
#[derive(Clone, Debug)]
pub struct Input {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl Input {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, values: Vec<f64>) -> Self {
        Self {
            name: name.into(),
            shape,
            values,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Tolerance {
    pub rtol: f64,
    pub atol: f64,
}

/// 64-bit verification mode: step 1e-6, rtol 1e-6, absolute floor 1e-8.
pub const F64_CHECK: (f64, Tolerance) = (
    1e-6,
    Tolerance {
        rtol: 1e-6,
        atol: 1e-8,
    },
);

/// 32-bit path: step 1e-3, rtol 1e-4, absolute floor 1e-8.
pub const F32_CHECK: (f64, Tolerance) = (
    1e-3,
    Tolerance {
        rtol: 1e-4,
        atol: 1e-8,
    },
);

#[derive(Clone, Debug, Default)]
pub struct Report {
    pub checked: usize,
    pub failures: Vec<String>,
    /// Largest `|analytic - numeric| / (atol + rtol * |numeric|)`; must stay <= 1.
    pub worst_ratio: f64,
    /// Largest `|analytic - numeric| / max(|numeric|, atol)`.
    pub max_rel_err: f64,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.failures.is_empty() && self.checked > 0
    }

    pub fn merge(&mut self, other: Report) {
        self.checked += other.checked;
        self.failures.extend(other.failures);
        self.worst_ratio = self.worst_ratio.max(other.worst_ratio);
        self.max_rel_err = self.max_rel_err.max(other.max_rel_err);
    }
}

fn record(
    g: &mut Graph,
    inputs: &[Input],
    values: &[Vec<f64>],
    build: &impl Fn(&mut Graph, &[Var]) -> Result<Var>,
) -> Result<(Vec<Var>, Var)> {
    let vars = inputs
        .iter()
        .zip(values)
        .map(|(input, v)| g.leaf(input.shape.clone(), v.clone(), true))
        .collect::<Result<Vec<_>>>()?;
    let loss = build(g, &vars)?;
    Ok((vars, loss))
}

/// Compare `build`'s analytic gradients (recorded in `analytic`) with central
/// differences evaluated in `numeric` precision. `sample` limits how many
/// elements per input are probed (evenly strided); `None` probes all.
pub fn check(
    analytic: Precision,
    numeric: Precision,
    step: f64,
    tol: Tolerance,
    inputs: &[Input],
    sample: Option<usize>,
    build: impl Fn(&mut Graph, &[Var]) -> Result<Var>,
) -> Result<Report> {
    let base: Vec<Vec<f64>> = inputs.iter().map(|i| i.values.clone()).collect();
    let mut g = Graph::new(analytic);
    let (vars, loss) = record(&mut g, inputs, &base, &build)?;
    let grads = g.backward(loss)?;

    let mut report = Report::default();
    for (k, input) in inputs.iter().enumerate() {
        let analytic_grad = grads.get_or_zero(&g, vars[k]);
        let len = input.values.len();
        let stride = sample.map_or(1, |s| (len / s.max(1)).max(1));
        for idx in (0..len).step_by(stride) {
            let eval = |delta: f64| -> Result<(f64, f64)> {
                let mut values = base.clone();
                values[k][idx] += delta;
                let mut g = Graph::new(numeric);
                let (vars, loss) = record(&mut g, inputs, &values, &build)?;
                // the step actually taken after any rounding of the leaf
                Ok((g.scalar(loss), g.value(vars[k])[idx]))
            };
            let (up, x_up) = eval(step)?;
            let (down, x_down) = eval(-step)?;
            let numeric_grad = (up - down) / (x_up - x_down);
            let a = analytic_grad[idx];
            let err = (a - numeric_grad).abs();
            let ratio = err / (tol.atol + tol.rtol * numeric_grad.abs());
            report.checked += 1;
            report.worst_ratio = report.worst_ratio.max(ratio);
            report.max_rel_err = report.max_rel_err.max(err / numeric_grad.abs().max(tol.atol));
            if ratio > 1.0 {
                report.failures.push(format!(
                    "{}[{idx}]: analytic {a:e} vs numeric {numeric_grad:e}",
                    input.name
                ));
            }
        }
    }
    Ok(report)
}

/// Every trainable tensor as an input, with a builder that records the episode
/// and returns the loss picked by `pick`.
pub fn pipeline(
    t: super::Tiny,
    seed: u64,
    cfg: ldag_core::pipeline::ForwardConfig,
    pick: fn(&ldag_core::pipeline::EpisodeGraph) -> Var,
) -> Report {
    let (params, ep) = super::tiny_episode(t, seed);
    let decoder = ldag_core::model::FrozenDecoder::for_params(&params);
    let inputs: Vec<Input> = params
        .iter()
        .map(|(name, tensor)| Input::new(name, tensor.shape().to_vec(), tensor.to_f64()))
        .collect();
    let (step, tol) = F64_CHECK;
    check(Precision::F64, Precision::F64, step, tol, &inputs, None, |g, vars| {
        let bound = ldag_core::model::BoundParams::from_vars(t.n, vars.to_vec())?;
        let eg = ldag_core::pipeline::record_episode(g, &bound, &ep, &decoder, &cfg)?;
        Ok(pick(&eg))
    })
    .unwrap()
}
