use std::collections::BTreeMap;

use crate::error::{GradError, Result};
use crate::params::ParameterSet;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    first: BTreeMap<String, Tensor>,
    second: BTreeMap<String, Tensor>,
}

impl AdamState {
    pub fn new(learning_rate: f64) -> Self {
        Self {
            step: 0,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }
}

/// One bias-corrected Adam update of every parameter in `params`.
///
/// Fails without touching anything if a parameter has no gradient.
pub fn adam_step(params: &mut ParameterSet, grads: &BTreeMap<String, Tensor>, state: &mut AdamState) -> Result<()> {
    for (name, p) in params.iter() {
        let g = grads
            .get(name)
            .ok_or_else(|| GradError::MissingGradient(name.clone()))?;
        if g.shape() != p.shape() {
            return Err(GradError::Shape {
                op: "adam_step",
                detail: format!(
                    "gradient of `{name}` has shape {:?}, parameter {:?}",
                    g.shape(),
                    p.shape()
                ),
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let names: Vec<String> = params.names().cloned().collect();
    for name in names {
        let g = &grads[&name];
        let p = params.get_mut(&name)?;
        let m = state
            .first
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(p.shape()));
        let v = state.second.entry(name).or_insert_with(|| Tensor::zeros(p.shape()));
        for (((pi, gi), mi), vi) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mi = b1 * *mi + (1.0 - b1) * gi;
            *vi = b2 * *vi + (1.0 - b2) * gi * gi;
            let mhat = *mi / c1;
            let vhat = *vi / c2;
            *pi -= state.learning_rate * mhat / (vhat.sqrt() + state.epsilon);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(p: f64) -> ParameterSet {
        let mut ps = ParameterSet::new(0);
        ps.insert("p", Tensor::scalar(p)).unwrap();
        ps
    }

    fn grad(g: f64) -> BTreeMap<String, Tensor> {
        BTreeMap::from([("p".to_string(), Tensor::scalar(g))])
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut ps = single(1.0);
        let mut st = AdamState::new(0.1);
        adam_step(&mut ps, &grad(1.0), &mut st).unwrap();
        // m̂ = 1, v̂ = 1 → Δ = 0.1 / (1 + 1e-8)
        let expected = 1.0 - 0.1 / (1.0 + 1e-8);
        assert!((ps.get("p").unwrap().data()[0] - expected).abs() < 1e-15);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut ps = single(0.7);
        let mut st = AdamState::new(0.1);
        for _ in 0..5 {
            adam_step(&mut ps, &grad(0.0), &mut st).unwrap();
        }
        assert_eq!(ps.get("p").unwrap().data()[0], 0.7);
    }

    #[test]
    fn missing_gradient_errors_without_side_effects() {
        let mut ps = single(1.0);
        ps.insert("q", Tensor::scalar(2.0)).unwrap();
        let mut st = AdamState::new(0.1);
        let err = adam_step(&mut ps, &grad(1.0), &mut st).unwrap_err();
        assert_eq!(err, GradError::MissingGradient("q".into()));
        assert_eq!(st.step, 0);
        assert_eq!(ps.get("p").unwrap().data()[0], 1.0);
    }

    #[test]
    fn repeated_runs_agree() {
        let run = || {
            let mut ps = single(1.0);
            let mut st = AdamState::new(0.01);
            for k in 0..10 {
                adam_step(&mut ps, &grad((k as f64).sin()), &mut st).unwrap();
            }
            (ps, st)
        };
        assert_eq!(run(), run());
    }
}
