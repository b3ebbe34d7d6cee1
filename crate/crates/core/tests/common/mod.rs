//! Helpers shared by the integration tests.
#![allow(dead_code)]

use fedadapt::data::{generate_domain, DomainSpec, Example};
use fedadapt::metrics::EvalMetrics;
use fedadapt::model::{AdapterSpec, Model, ModelConfig};
use fedadapt::tasks::Objective;
use fedadapt::tensor::Tensor;
use fedadapt::tree::{ParamMap, ParameterTree};
use fedadapt::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Two layers, d = 16: small enough for exhaustive checks.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        model_dim: 16,
        layers: 2,
        ..ModelConfig::desk()
    }
}

pub fn source(n: usize, seed: u64) -> Vec<Example> {
    generate_domain(&DomainSpec::source(), n, seed).unwrap().examples
}

pub fn target(n: usize, seed: u64) -> Vec<Example> {
    generate_domain(&DomainSpec::target(), n, seed).unwrap().examples
}

/// Built model whose every leaf is jittered so that no gradient path is
/// trivially zero (zero-initialized up projections, unit gains).
pub fn jittered(cfg: ModelConfig, adapter: Option<AdapterSpec>, seed: u64) -> (Model, ParameterTree) {
    let (model, mut tree) = Model::build(cfg, adapter, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
    let paths: Vec<String> = tree.paths().cloned().collect();
    for p in paths {
        for v in tree.tensor_mut(&p).unwrap().data_mut() {
            *v += rng.gen_range(-0.2..0.2);
        }
    }
    (model, tree)
}

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::uniform(shape, 1.0, &mut rng)
}

/// Linear toy loss `mean_batch(x) · w` over a single scalar leaf `w`.
/// Its gradient is the batch mean of the example features.
pub struct LinearToy;

impl Objective for LinearToy {
    fn loss_and_grads(&self, tree: &ParameterTree, batch: &[&Example]) -> Result<(f64, ParamMap)> {
        let g = batch.iter().map(|e| e.features.data()[0]).sum::<f64>() / batch.len() as f64;
        let w = tree.tensor("w")?.item();
        Ok((g * w, [("w".to_string(), Tensor::scalar(g))].into_iter().collect()))
    }

    fn evaluate(&self, _tree: &ParameterTree, _examples: &[Example]) -> Result<EvalMetrics> {
        Ok(EvalMetrics {
            wer: 0.0,
            loss: 0.0,
            errors: 0,
            reference_tokens: 0,
        })
    }
}

pub fn scalar_example(x: f64) -> Example {
    Example {
        features: Tensor::new(vec![1, 1], vec![x]).unwrap(),
        frame_labels: vec![0],
        tokens: vec![0],
    }
}
