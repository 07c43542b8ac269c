use std::collections::BTreeMap;

use crate::array::Array;
use crate::error::{AutodiffError, Result};
use crate::tape::{Tape, Var};

pub type NamedArrays = BTreeMap<String, Array>;

/// Named inputs bound as gradient-receiving leaves on a tape.
#[derive(Clone, Debug, Default)]
pub struct Bindings {
    vars: BTreeMap<String, Var>,
}

impl Bindings {
    pub fn bind(tape: &mut Tape, inputs: &NamedArrays) -> Self {
        let vars = inputs
            .iter()
            .map(|(name, value)| (name.clone(), tape.param(value.clone())))
            .collect();
        Bindings { vars }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| AutodiffError::UnboundInput(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

/// A computation that builds its nodes on a tape from named inputs.
pub trait Graph {
    fn build(&self, tape: &mut Tape, inputs: &Bindings) -> Result<Var>;
}

impl<F> Graph for F
where
    F: Fn(&mut Tape, &Bindings) -> Result<Var>,
{
    fn build(&self, tape: &mut Tape, inputs: &Bindings) -> Result<Var> {
        self(tape, inputs)
    }
}

/// Runs the graph forward on a fresh tape.
pub fn evaluate(graph: &impl Graph, inputs: &NamedArrays) -> Result<Array> {
    let mut tape = Tape::new();
    let bound = Bindings::bind(&mut tape, inputs);
    let out = graph.build(&mut tape, &bound)?;
    Ok(tape.value(out).clone())
}

/// Scalar output and its gradient with respect to every named input.
pub fn value_and_grad(graph: &impl Graph, inputs: &NamedArrays) -> Result<(f64, NamedArrays)> {
    let mut tape = Tape::new();
    let bound = Bindings::bind(&mut tape, inputs);
    let out = graph.build(&mut tape, &bound)?;
    let grads = tape.backward(out)?;
    let value = tape.value(out).item();
    let named = bound
        .iter()
        .map(|(name, v)| (name.to_string(), grads.wrt(v)))
        .collect();
    Ok((value, named))
}

/// Largest `|analytic − central FD| / max(1, |central FD|)` over every
/// coordinate of every input.
pub fn grad_check(graph: &impl Graph, point: &NamedArrays, step: f64) -> Result<f64> {
    if step.is_nan() || step <= 0.0 {
        return Err(AutodiffError::InvalidStep(step));
    }
    let (_, analytic) = value_and_grad(graph, point)?;
    let mut worst = 0.0f64;
    let mut probe = point.clone();
    for (name, value) in point {
        for k in 0..value.len() {
            let x0 = value.data()[k];
            probe.get_mut(name).expect("bound").data_mut()[k] = x0 + step;
            let plus = scalar_of(graph, &probe)?;
            probe.get_mut(name).expect("bound").data_mut()[k] = x0 - step;
            let minus = scalar_of(graph, &probe)?;
            probe.get_mut(name).expect("bound").data_mut()[k] = x0;
            let fd = (plus - minus) / (2.0 * step);
            let an = analytic[name].data()[k];
            worst = worst.max((an - fd).abs() / fd.abs().max(1.0));
        }
    }
    Ok(worst)
}

fn scalar_of(graph: &impl Graph, inputs: &NamedArrays) -> Result<f64> {
    let out = evaluate(graph, inputs)?;
    if out.len() != 1 {
        return Err(AutodiffError::NonScalarOutput(out.shape().to_vec()));
    }
    Ok(out.item())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn named(pairs: &[(&str, Array)]) -> NamedArrays {
        pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
    }

    #[test]
    fn identity_graph() {
        let inputs = named(&[("x", Array::vector(vec![1.0, 2.0, 3.0]))]);
        let out = evaluate(&|_: &mut Tape, b: &Bindings| b.get("x"), &inputs).unwrap();
        assert_eq!(out.data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn unbound_name_errors() {
        let inputs = named(&[("x", Array::scalar(1.0))]);
        let err = evaluate(&|_: &mut Tape, b: &Bindings| b.get("y"), &inputs).unwrap_err();
        assert_eq!(err, AutodiffError::UnboundInput("y".into()));
    }

    #[test]
    fn linear_graph_is_exact_under_fd() {
        let inputs = named(&[("x", Array::vector(vec![0.3, -1.2, 2.5]))]);
        let graph = |t: &mut Tape, b: &Bindings| {
            let x = b.get("x")?;
            let y = t.scale(x, 3.0);
            let y = t.add_scalar(y, 1.0);
            Ok(t.sum(y))
        };
        assert!(grad_check(&graph, &inputs, 1e-5).unwrap() <= 1e-10);
    }

    #[test]
    fn zero_step_is_rejected() {
        let inputs = named(&[("x", Array::scalar(1.0))]);
        let graph = |_: &mut Tape, b: &Bindings| b.get("x");
        assert!(grad_check(&graph, &inputs, 0.0).is_err());
    }
}
