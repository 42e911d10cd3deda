use std::collections::BTreeMap;

use crate::arch::Model;
use crate::container::{tensor_slots, TensorRole};
use crate::error::{Error, Result};
use crate::tensor::Scalar;

use super::tape::GradMap;

/// Default EMA decay for weight averaging.
pub const EMA_DECAY: f64 = 0.9995;
pub const SGD_MOMENTUM: f64 = 0.9;

/// Optimizer state over every trainable (`Param`) tensor of a model.
/// Values are kept in f64 regardless of the model's element type.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: BTreeMap<String, Vec<f64>>,
    pub velocity: BTreeMap<String, Vec<f64>>,
    pub ema: BTreeMap<String, Vec<f64>>,
    pub step: usize,
    pub total_steps: usize,
    pub momentum: f64,
    pub ema_decay: f64,
}

impl TrainState {
    pub fn from_model<T: Scalar>(model: &mut Model<T>, total_steps: usize) -> Self {
        let params: BTreeMap<String, Vec<f64>> = tensor_slots(model)
            .into_iter()
            .filter(|s| s.role == TensorRole::Param)
            .map(|s| (s.name, s.data.iter().map(|v| v.as_f64()).collect()))
            .collect();
        let velocity = params.iter().map(|(k, v)| (k.clone(), vec![0.0; v.len()])).collect();
        Self {
            ema: params.clone(),
            params,
            velocity,
            step: 0,
            total_steps,
            momentum: SGD_MOMENTUM,
            ema_decay: EMA_DECAY,
        }
    }

    /// One SGD step with momentum and L2 weight decay, followed by the EMA
    /// update:
    /// `g ← g + wd·p; v ← m·v + g; p ← p − lr·v; ema ← d·ema + (1 − d)·p`.
    pub fn sgd_step<T: Scalar>(&mut self, grads: &GradMap<T>, lr: f64, wd: f64) -> Result<()> {
        for name in grads.keys() {
            if !self.params.contains_key(name) {
                return Err(Error::InvalidArgument(format!("gradient for unknown tensor {name}")));
            }
        }
        for (name, p) in &mut self.params {
            let g = grads
                .get(name)
                .ok_or_else(|| Error::InvalidArgument(format!("missing gradient for {name}")))?;
            if g.len() != p.len() {
                return Err(Error::Shape {
                    op: "sgd_step",
                    dim: "gradient length",
                    expected: p.len(),
                    actual: g.len(),
                });
            }
            let v = self.velocity.get_mut(name).expect("velocity mirrors params");
            let e = self.ema.get_mut(name).expect("ema mirrors params");
            for i in 0..p.len() {
                let gi = g[i].as_f64() + wd * p[i];
                v[i] = self.momentum * v[i] + gi;
                p[i] -= lr * v[i];
                e[i] = self.ema_decay * e[i] + (1.0 - self.ema_decay) * p[i];
            }
        }
        self.step += 1;
        Ok(())
    }

    /// Copies the current parameters into `model`.
    pub fn write_params<T: Scalar>(&self, model: &mut Model<T>) -> Result<()> {
        write(&self.params, model)
    }

    /// Copies the EMA weights into `model`.
    pub fn write_ema<T: Scalar>(&self, model: &mut Model<T>) -> Result<()> {
        write(&self.ema, model)
    }
}

fn write<T: Scalar>(src: &BTreeMap<String, Vec<f64>>, model: &mut Model<T>) -> Result<()> {
    for slot in tensor_slots(model) {
        if slot.role != TensorRole::Param {
            continue;
        }
        let v = src
            .get(&slot.name)
            .ok_or_else(|| Error::InvalidArgument(format!("state has no tensor {}", slot.name)))?;
        if v.len() != slot.data.len() {
            return Err(Error::Shape {
                op: "write_params",
                dim: "tensor length",
                expected: slot.data.len(),
                actual: v.len(),
            });
        }
        for (d, &x) in slot.data.iter_mut().zip(v) {
            *d = T::of(x);
        }
    }
    Ok(())
}

/// Functional form of [`TrainState::sgd_step`] with an explicit momentum.
pub fn sgd_step<T: Scalar>(
    mut state: TrainState,
    grads: &GradMap<T>,
    lr: f64,
    wd: f64,
    momentum: f64,
) -> Result<TrainState> {
    state.momentum = momentum;
    state.sgd_step(grads, lr, wd)?;
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn state(p: Vec<f64>) -> TrainState {
        let mut params = BTreeMap::new();
        params.insert("w".to_string(), p.clone());
        TrainState {
            velocity: [("w".to_string(), vec![0.0; p.len()])].into(),
            ema: params.clone(),
            params,
            step: 0,
            total_steps: 10,
            momentum: 0.9,
            ema_decay: 0.5,
        }
    }

    #[test]
    fn hand_computed_steps() {
        let mut s = state(vec![1.0]);
        let g: GradMap<f64> = [("w".to_string(), vec![0.5])].into();
        s.sgd_step(&g, 0.1, 0.1).unwrap();
        // g = 0.5 + 0.1 = 0.6; v = 0.6; p = 1 - 0.06 = 0.94; ema = 0.5 + 0.47
        assert!((s.params["w"][0] - 0.94).abs() < 1e-15);
        assert!((s.ema["w"][0] - 0.97).abs() < 1e-15);
        s.sgd_step(&g, 0.1, 0.0).unwrap();
        // v = 0.54 + 0.5 = 1.04; p = 0.94 - 0.104
        assert!((s.params["w"][0] - 0.836).abs() < 1e-12);
        assert_eq!(s.step, 2);
    }

    #[test]
    fn zero_gradient_with_decay_shrinks_weights() {
        let mut s = state(vec![2.0, -3.0]);
        let g: GradMap<f32> = [("w".to_string(), vec![0.0, 0.0])].into();
        for _ in 0..5 {
            s.sgd_step(&g, 0.1, 0.01).unwrap();
        }
        assert!(s.params["w"][0] < 2.0 && s.params["w"][0] > 0.0);
        assert!(s.params["w"][1] > -3.0 && s.params["w"][1] < 0.0);
    }

    #[test]
    fn mismatched_gradients_are_rejected() {
        let s = state(vec![1.0]);
        let missing: GradMap<f64> = GradMap::new();
        assert!(sgd_step(s.clone(), &missing, 0.1, 0.0, 0.9).is_err());
        let extra: GradMap<f64> = [("w".to_string(), vec![0.0]), ("x".to_string(), vec![0.0])].into();
        assert!(sgd_step(s.clone(), &extra, 0.1, 0.0, 0.9).is_err());
        let short: GradMap<f64> = [("w".to_string(), vec![])].into();
        assert!(sgd_step(s, &short, 0.1, 0.0, 0.9).is_err());
    }
}
