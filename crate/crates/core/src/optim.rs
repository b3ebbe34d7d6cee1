//! Client SGD and server Adam over the trainable subset of a tree.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::tree::{check_keys, ParamMap, ParameterTree};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sgd {
    pub learning_rate: f64,
}

impl Sgd {
    pub fn new(learning_rate: f64) -> Self {
        Self { learning_rate }
    }

    /// `θ ← θ − lr·g` on every trainable leaf.
    pub fn step(&self, tree: &mut ParameterTree, grads: &ParamMap) -> Result<()> {
        check_keys(tree, grads)?;
        for (path, g) in grads {
            let theta = tree.tensor_mut(path)?;
            same_shape(theta, g)?;
            for (t, &gv) in theta.data_mut().iter_mut().zip(g.data()) {
                *t -= self.learning_rate * gv;
            }
        }
        Ok(())
    }
}

fn same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op: "optimizer step",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    Ok(())
}

/// Bias-corrected Adam with moments for exactly the trainable leaves.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    first: ParamMap,
    second: ParamMap,
}

impl Adam {
    pub fn new(learning_rate: f64, tree: &ParameterTree) -> Self {
        Self::with_moments(learning_rate, 0.9, 0.999, 1e-8, tree)
    }

    pub fn with_moments(learning_rate: f64, beta1: f64, beta2: f64, epsilon: f64, tree: &ParameterTree) -> Self {
        let zeros: ParamMap = tree
            .trainable_paths()
            .map(|p| (p.clone(), Tensor::zeros(tree.tensor(p).expect("listed").shape())))
            .collect();
        Self {
            learning_rate,
            beta1,
            beta2,
            epsilon,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    /// Restores a saved state.
    pub fn from_parts(
        learning_rate: f64,
        beta1: f64,
        beta2: f64,
        epsilon: f64,
        step: u64,
        first: ParamMap,
        second: ParamMap,
    ) -> Result<Self> {
        if first.keys().ne(second.keys()) {
            return Err(Error::Format("adam moment key sets differ".into()));
        }
        Ok(Self {
            learning_rate,
            beta1,
            beta2,
            epsilon,
            step,
            first,
            second,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &ParamMap {
        &self.first
    }

    pub fn second_moments(&self) -> &ParamMap {
        &self.second
    }

    pub fn step(&mut self, tree: &mut ParameterTree, grads: &ParamMap) -> Result<()> {
        check_keys(tree, grads)?;
        if grads.keys().ne(self.first.keys()) {
            return Err(Error::Config("adam state does not match the trainable leaves".into()));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (path, g) in grads {
            let theta = tree.tensor_mut(path)?;
            same_shape(theta, g)?;
            let m = self.first.get_mut(path).expect("keys checked");
            let v = self.second.get_mut(path).expect("keys checked");
            for (((th, &gv), mv), vv) in theta
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                let m_hat = *mv / c1;
                let v_hat = *vv / c2;
                *th -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}
