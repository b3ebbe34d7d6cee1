//! FedAvg simulation with client SGD and an adaptive server optimizer.
//!
//! Each round every client copies the global trainable leaves, takes its
//! local SGD steps, and uploads only the parameter delta. The server
//! averages deltas in canonical order (lexicographic path, ascending client
//! id) and applies the average either through Adam, as the pseudo-gradient
//! `−avgΔ`, or directly (`θ ← θ + avgΔ`).

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Precision;
use crate::data::Example;
use crate::error::{Error, Result};
use crate::metrics::EvalMetrics;
use crate::optim::{Adam, Sgd};
use crate::tasks::Objective;
use crate::tensor::Tensor;
use crate::tree::{ParamMap, ParameterTree};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ServerUpdate {
    /// Adam on the pseudo-gradient `−avgΔ`.
    #[default]
    Adam,
    /// `θ ← θ + avgΔ`.
    PlainAverage,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FedConfig {
    pub num_clients: usize,
    pub client_batch: usize,
    pub rounds: usize,
    pub local_iterations: usize,
    pub client_lr: f64,
    pub server_lr: f64,
    pub server_update: ServerUpdate,
    pub precision: Precision,
    pub seed: u64,
}

impl Default for FedConfig {
    /// 64 clients, batch 10, 1000 rounds, one local step, client SGD 1e-4, server Adam 2e-4.
    fn default() -> Self {
        Self {
            num_clients: 64,
            client_batch: 10,
            rounds: 1000,
            local_iterations: 1,
            client_lr: 1e-4,
            server_lr: 2e-4,
            server_update: ServerUpdate::Adam,
            precision: Precision::F64,
            seed: 0,
        }
    }
}

impl FedConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_clients == 0 || self.client_batch == 0 || self.local_iterations == 0 {
            return Err(Error::Config("num_clients, client_batch and local_iterations must be positive".into()));
        }
        if !(self.client_lr > 0.0 && self.server_lr > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        Ok(())
    }

    pub fn samples_per_round(&self) -> u64 {
        (self.num_clients * self.client_batch * self.local_iterations) as u64
    }

    /// Training samples consumed across all rounds.
    pub fn total_samples(&self) -> u64 {
        self.samples_per_round() * self.rounds as u64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CentralConfig {
    pub iterations: usize,
    pub batch: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub precision: Precision,
    pub seed: u64,
}

impl Default for CentralConfig {
    /// 5000 iterations of batch 128: the same 640k samples as the federated default.
    fn default() -> Self {
        Self {
            iterations: 5000,
            batch: 128,
            lr: 2e-4,
            optimizer: OptimizerKind::Adam,
            precision: Precision::F64,
            seed: 0,
        }
    }
}

impl CentralConfig {
    pub fn total_samples(&self) -> u64 {
        (self.iterations * self.batch) as u64
    }
}

/// Per-round communication volume.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommLedger {
    pub trainable_count: u64,
    pub bytes_per_value: u64,
    pub num_clients: u64,
    pub bytes_up: u64,
    pub bytes_down: u64,
}

impl CommLedger {
    pub fn new(trainable_count: u64, bytes_per_value: u64, num_clients: u64) -> Self {
        let bytes = trainable_count * bytes_per_value * num_clients;
        Self {
            trainable_count,
            bytes_per_value,
            num_clients,
            bytes_up: bytes,
            bytes_down: bytes,
        }
    }
}

/// One line of the training ledger; shared by federated and centralized runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    /// 1-based.
    pub round: usize,
    pub samples: u64,
    pub train_loss: f64,
    pub client_delta_norms: Vec<f64>,
    pub aggregate_delta_norm: f64,
    /// `None` for centralized training.
    pub comm: Option<CommLedger>,
    pub eval: BTreeMap<String, EvalMetrics>,
}

/// The only client-to-server payload.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClientUpdate {
    pub client_id: usize,
    /// `θ_client − θ_global` for each trainable leaf.
    pub delta: ParamMap,
    pub train_loss: f64,
}

/// A simulated device: its private shard and a batch cursor.
#[derive(Clone, Debug)]
pub struct Client {
    id: usize,
    shard: Vec<Example>,
    cursor: usize,
    sgd: Sgd,
}

impl Client {
    pub fn new(id: usize, shard: Vec<Example>, lr: f64) -> Result<Self> {
        if shard.is_empty() {
            return Err(Error::EmptyShard(id));
        }
        Ok(Self {
            id,
            shard,
            cursor: 0,
            sgd: Sgd::new(lr),
        })
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn shard_len(&self) -> usize {
        self.shard.len()
    }

    fn next_batch(&mut self, size: usize) -> Vec<&Example> {
        let n = self.shard.len();
        let start = self.cursor;
        self.cursor = (self.cursor + size) % n;
        (0..size).map(|j| &self.shard[(start + j) % n]).collect()
    }

    /// Runs local SGD from the global parameters and returns the delta.
    pub fn local_update(
        &mut self,
        global: &ParameterTree,
        objective: &dyn Objective,
        batch: usize,
        iterations: usize,
    ) -> Result<ClientUpdate> {
        let mut local = global.clone();
        let mut loss_sum = 0.0;
        for _ in 0..iterations {
            let sgd = self.sgd;
            let examples = self.next_batch(batch);
            let (loss, grads) = objective.loss_and_grads(&local, &examples)?;
            sgd.step(&mut local, &grads)?;
            loss_sum += loss;
        }
        let mut delta = ParamMap::new();
        for path in global.trainable_paths() {
            delta.insert(path.clone(), local.tensor(path)?.sub(global.tensor(path)?)?);
        }
        Ok(ClientUpdate {
            client_id: self.id,
            delta,
            train_loss: loss_sum / iterations as f64,
        })
    }
}

/// Disjoint IID shards whose sizes differ by at most one.
pub fn partition_dataset(examples: &[Example], num_clients: usize, seed: u64) -> Result<Vec<Vec<Example>>> {
    if num_clients == 0 || examples.len() < num_clients {
        return Err(Error::TooFewExamples {
            examples: examples.len(),
            clients: num_clients,
        });
    }
    let order = shuffled_indices(examples.len(), seed);
    let (base, extra) = (examples.len() / num_clients, examples.len() % num_clients);
    let mut shards = Vec::with_capacity(num_clients);
    let mut next = 0;
    for k in 0..num_clients {
        let size = base + usize::from(k < extra);
        shards.push(order[next..next + size].iter().map(|&i| examples[i].clone()).collect());
        next += size;
    }
    Ok(shards)
}

fn shuffled_indices(n: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order
}

pub fn setup_clients(shards: Vec<Vec<Example>>, client_lr: f64) -> Result<Vec<Client>> {
    shards
        .into_iter()
        .enumerate()
        .map(|(id, shard)| Client::new(id, shard, client_lr))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub enum ServerOptimizer {
    Adam(Adam),
    PlainAverage,
}

impl ServerOptimizer {
    pub fn new(cfg: &FedConfig, global: &ParameterTree) -> Self {
        match cfg.server_update {
            ServerUpdate::Adam => ServerOptimizer::Adam(Adam::new(cfg.server_lr, global)),
            ServerUpdate::PlainAverage => ServerOptimizer::PlainAverage,
        }
    }

    pub fn adam(&self) -> Option<&Adam> {
        match self {
            ServerOptimizer::Adam(a) => Some(a),
            ServerOptimizer::PlainAverage => None,
        }
    }
}

/// Mean of the client deltas, summed in ascending client id per path.
pub fn average_deltas(updates: &[ClientUpdate]) -> Result<ParamMap> {
    let mut ordered: Vec<&ClientUpdate> = updates.iter().collect();
    ordered.sort_by_key(|u| u.client_id);
    let first = ordered.first().ok_or_else(|| Error::Config("no client updates".into()))?;
    let k = ordered.len() as f64;
    let mut avg = ParamMap::new();
    for (path, t) in &first.delta {
        let mut acc = vec![0.0; t.numel()];
        for u in &ordered {
            let d = u.delta.get(path).ok_or_else(|| Error::MissingGradient(path.clone()))?;
            if d.shape() != t.shape() {
                return Err(Error::ShapeMismatch {
                    op: "average_deltas",
                    left: t.shape().to_vec(),
                    right: d.shape().to_vec(),
                });
            }
            for (a, &v) in acc.iter_mut().zip(d.data()) {
                *a += v;
            }
        }
        avg.insert(path.clone(), Tensor::new(t.shape().to_vec(), acc.into_iter().map(|v| v / k).collect())?);
    }
    Ok(avg)
}

fn map_norm(m: &ParamMap) -> f64 {
    m.values().map(|t| t.data().iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt()
}

/// Applies an averaged delta to the global tree.
pub fn apply_server_update(global: &mut ParameterTree, server: &mut ServerOptimizer, avg: &ParamMap) -> Result<()> {
    match server {
        ServerOptimizer::Adam(adam) => {
            let pseudo: ParamMap = avg.iter().map(|(p, t)| (p.clone(), t.scaled(-1.0))).collect();
            adam.step(global, &pseudo)
        }
        ServerOptimizer::PlainAverage => {
            crate::tree::check_keys(global, avg)?;
            for (path, d) in avg {
                let theta = global.tensor_mut(path)?;
                for (t, &v) in theta.data_mut().iter_mut().zip(d.data()) {
                    *t += v;
                }
            }
            Ok(())
        }
    }
}

/// One broadcast, local-train, aggregate cycle.
pub fn run_round(
    round: usize,
    global: &mut ParameterTree,
    clients: &mut [Client],
    cfg: &FedConfig,
    server: &mut ServerOptimizer,
    objective: &dyn Objective,
) -> Result<RoundRecord> {
    let snapshot: &ParameterTree = global;
    let mut updates = clients
        .par_iter_mut()
        .map(|c| c.local_update(snapshot, objective, cfg.client_batch, cfg.local_iterations))
        .collect::<Result<Vec<_>>>()?;
    updates.sort_by_key(|u| u.client_id);
    let avg = average_deltas(&updates)?;
    apply_server_update(global, server, &avg)?;
    let trainable = global.trainable_count() as u64;
    Ok(RoundRecord {
        round,
        samples: (clients.len() * cfg.client_batch * cfg.local_iterations) as u64,
        train_loss: updates.iter().map(|u| u.train_loss).sum::<f64>() / updates.len() as f64,
        client_delta_norms: updates.iter().map(|u| map_norm(&u.delta)).collect(),
        aggregate_delta_norm: map_norm(&avg),
        comm: Some(CommLedger::new(
            trainable,
            cfg.precision.bytes_per_value(),
            clients.len() as u64,
        )),
        eval: BTreeMap::new(),
    })
}

/// A named held-out set evaluated during training.
pub struct EvalSet<'a> {
    pub name: String,
    pub examples: &'a [Example],
}

impl<'a> EvalSet<'a> {
    pub fn new(name: impl Into<String>, examples: &'a [Example]) -> Self {
        Self {
            name: name.into(),
            examples,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub tree: ParameterTree,
    pub records: Vec<RoundRecord>,
    pub initial_eval: BTreeMap<String, EvalMetrics>,
    pub server_adam: Option<Adam>,
}

fn eval_all(objective: &dyn Objective, tree: &ParameterTree, sets: &[EvalSet<'_>]) -> Result<BTreeMap<String, EvalMetrics>> {
    sets.iter()
        .map(|s| Ok((s.name.clone(), objective.evaluate(tree, s.examples)?)))
        .collect()
}

fn due(round: usize, total: usize, every: usize) -> bool {
    (every > 0 && round.is_multiple_of(every)) || round == total
}

/// Full federated run: IID partition with `cfg.seed`, then `cfg.rounds` rounds.
///
/// Evaluation runs every `eval_every` rounds and after the last one.
pub fn run_federated(
    global: ParameterTree,
    objective: &dyn Objective,
    train: &[Example],
    cfg: &FedConfig,
    eval_sets: &[EvalSet<'_>],
    eval_every: usize,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let shards = partition_dataset(train, cfg.num_clients, cfg.seed)?;
    let mut clients = setup_clients(shards, cfg.client_lr)?;
    let mut server = ServerOptimizer::new(cfg, &global);
    run_federated_with(global, objective, &mut clients, cfg, &mut server, eval_sets, eval_every)
}

/// As [`run_federated`] with caller-built clients and server state.
pub fn run_federated_with(
    mut global: ParameterTree,
    objective: &dyn Objective,
    clients: &mut [Client],
    cfg: &FedConfig,
    server: &mut ServerOptimizer,
    eval_sets: &[EvalSet<'_>],
    eval_every: usize,
) -> Result<TrainOutcome> {
    let initial_eval = eval_all(objective, &global, eval_sets)?;
    let mut records = Vec::with_capacity(cfg.rounds);
    for round in 1..=cfg.rounds {
        let mut rec = run_round(round, &mut global, clients, cfg, server, objective)?;
        if due(round, cfg.rounds, eval_every) {
            rec.eval = eval_all(objective, &global, eval_sets)?;
        }
        log::debug!("round {round}: loss {:.5}", rec.train_loss);
        records.push(rec);
    }
    Ok(TrainOutcome {
        tree: global,
        records,
        initial_eval,
        server_adam: server.adam().cloned(),
    })
}

/// Plain minibatch training over `train`, cycling through it in an order
/// shuffled once with `cfg.seed`.
pub fn run_centralized(
    mut global: ParameterTree,
    objective: &dyn Objective,
    train: &[Example],
    cfg: &CentralConfig,
    eval_sets: &[EvalSet<'_>],
    eval_every: usize,
) -> Result<TrainOutcome> {
    if train.is_empty() || cfg.batch == 0 {
        return Err(Error::Config("centralized training needs data and a positive batch".into()));
    }
    let order = shuffled_indices(train.len(), cfg.seed);
    let mut adam = match cfg.optimizer {
        OptimizerKind::Adam => Some(Adam::new(cfg.lr, &global)),
        OptimizerKind::Sgd => None,
    };
    let sgd = Sgd::new(cfg.lr);
    let initial_eval = eval_all(objective, &global, eval_sets)?;
    let mut records = Vec::with_capacity(cfg.iterations);
    let mut cursor = 0;
    for it in 1..=cfg.iterations {
        let batch: Vec<&Example> = (0..cfg.batch).map(|j| &train[order[(cursor + j) % train.len()]]).collect();
        cursor = (cursor + cfg.batch) % train.len();
        let before = global.trainable_values();
        let (loss, grads) = objective.loss_and_grads(&global, &batch)?;
        match adam.as_mut() {
            Some(a) => a.step(&mut global, &grads)?,
            None => sgd.step(&mut global, &grads)?,
        }
        let mut moved = 0.0;
        for (p, t) in &before {
            moved += global.tensor(p)?.sub(t)?.data().iter().map(|v| v * v).sum::<f64>();
        }
        let mut rec = RoundRecord {
            round: it,
            samples: cfg.batch as u64,
            train_loss: loss,
            client_delta_norms: Vec::new(),
            aggregate_delta_norm: moved.sqrt(),
            comm: None,
            eval: BTreeMap::new(),
        };
        if due(it, cfg.iterations, eval_every) {
            rec.eval = eval_all(objective, &global, eval_sets)?;
        }
        records.push(rec);
    }
    Ok(TrainOutcome {
        tree: global,
        records,
        initial_eval,
        server_adam: adam,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_examples(n: usize) -> Vec<Example> {
        (0..n)
            .map(|i| Example {
                features: Tensor::new(vec![1, 1], vec![i as f64]).unwrap(),
                frame_labels: vec![0],
                tokens: vec![0],
            })
            .collect()
    }

    #[test]
    fn even_partition() {
        let shards = partition_dataset(&toy_examples(640), 64, 1).unwrap();
        assert!(shards.iter().all(|s| s.len() == 10));
    }

    #[test]
    fn uneven_partition() {
        let shards = partition_dataset(&toy_examples(65), 64, 1).unwrap();
        assert_eq!(shards.iter().filter(|s| s.len() == 2).count(), 1);
        assert_eq!(shards.iter().filter(|s| s.len() == 1).count(), 63);
    }

    #[test]
    fn partition_is_exact_cover() {
        let data = toy_examples(37);
        let shards = partition_dataset(&data, 5, 9).unwrap();
        let mut seen: Vec<i64> = shards
            .iter()
            .flatten()
            .map(|e| e.features.item() as i64)
            .collect();
        seen.sort();
        assert_eq!(seen, (0..37).collect::<Vec<_>>());
    }

    #[test]
    fn too_few_examples() {
        assert!(matches!(
            partition_dataset(&toy_examples(3), 4, 0),
            Err(Error::TooFewExamples { .. })
        ));
    }

    #[test]
    fn empty_shard_rejected() {
        assert!(matches!(setup_clients(vec![vec![]], 0.1), Err(Error::EmptyShard(0))));
    }

    #[test]
    fn budgets() {
        assert_eq!(FedConfig::default().total_samples(), 640_000);
        assert_eq!(CentralConfig::default().total_samples(), 640_000);
    }

    #[test]
    fn ledger_bytes() {
        let l = CommLedger::new(1000, 8, 64);
        assert_eq!(l.bytes_up, 512_000);
        assert_eq!(l.bytes_down, l.bytes_up);
    }
}
