//! Three-stage pipeline: SSL encoder pretraining, decoder pretraining (with
//! or without adapters), and federated adapter tuning, plus the
//! federated-versus-centralized ablation.
//!
//! Every stage function works in memory; [`run_stage`] wires them to
//! fixture files, checkpoints, JSON-lines logs, CSV tables and manifests.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::accounting::{account, BackboneSize};
use crate::checkpoint::Checkpoint;
use crate::data::{
    generate_domain, load_dataset, make_ssl_batch, save_dataset, DomainSpec, Example, MaskConfig,
    RandomProjectionQuantizer,
};
use crate::error::{Error, Result};
use crate::fed::{run_centralized, run_federated, CentralConfig, EvalSet, FedConfig, RoundRecord, TrainOutcome};
use crate::metrics::EvalMetrics;
use crate::model::{AdapterSpec, AdapterVariant, Model, ModelConfig};
use crate::optim::Adam;
use crate::tasks::{ssl_loss, ssl_loss_and_grads, FrameObjective};
use crate::tree::FreezePolicy;

pub const SOURCE: &str = "source";
pub const TARGET: &str = "target";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SslStageConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub codebook_size: usize,
    pub code_dim: usize,
    pub mask: MaskConfig,
}

impl Default for SslStageConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            batch: 8,
            lr: 1e-3,
            codebook_size: 16,
            code_dim: 8,
            mask: MaskConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderStrategy {
    WithoutAdapters,
    WithAdapters,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderStageConfig {
    pub strategy: DecoderStrategy,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
}

impl Default for DecoderStageConfig {
    fn default() -> Self {
        Self {
            strategy: DecoderStrategy::WithoutAdapters,
            steps: 400,
            batch: 16,
            lr: 3e-3,
        }
    }
}

/// Fixture locations. Relative paths resolve against the config file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataPaths {
    pub ssl: Option<PathBuf>,
    pub source_train: Option<PathBuf>,
    pub source_eval: Option<PathBuf>,
    pub target_train: Option<PathBuf>,
    pub target_eval: Option<PathBuf>,
}

/// Generator settings for `gen-data`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataGenConfig {
    pub source: DomainSpec,
    pub target: DomainSpec,
    pub ssl_examples: usize,
    pub source_train_examples: usize,
    pub source_eval_examples: usize,
    pub target_train_examples: usize,
    pub target_eval_examples: usize,
}

impl Default for DataGenConfig {
    fn default() -> Self {
        Self {
            source: DomainSpec::source(),
            target: DomainSpec::target(),
            ssl_examples: 400,
            source_train_examples: 400,
            source_eval_examples: 100,
            target_train_examples: 320,
            target_eval_examples: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointPaths {
    pub encoder: Option<PathBuf>,
    pub pretrained: Option<PathBuf>,
    pub tuned: Option<PathBuf>,
}

/// Structured experiment description; unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub adapter: Option<AdapterSpec>,
    #[serde(default)]
    pub data: DataPaths,
    #[serde(default)]
    pub data_gen: DataGenConfig,
    #[serde(default)]
    pub ssl: SslStageConfig,
    #[serde(default)]
    pub decoder: DecoderStageConfig,
    #[serde(default)]
    pub fed: FedConfig,
    #[serde(default)]
    pub central: CentralConfig,
    #[serde(default)]
    pub ablation_variants: Option<Vec<AdapterVariant>>,
    #[serde(default)]
    pub eval_every: usize,
    #[serde(default)]
    pub checkpoints: Option<CheckpointPaths>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Loads and resolves relative paths against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let mut cfg = Self::from_toml(&std::fs::read_to_string(path)?)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.out_dir);
        for p in [
            &mut self.data.ssl,
            &mut self.data.source_train,
            &mut self.data.source_eval,
            &mut self.data.target_train,
            &mut self.data.target_eval,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
        if let Some(ck) = &mut self.checkpoints {
            for p in [&mut ck.encoder, &mut ck.pretrained, &mut ck.tuned].into_iter().flatten() {
                fix(p);
            }
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// SHA-256 of the canonical TOML rendering.
    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_toml()?.as_bytes())))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if let Some(spec) = &self.adapter {
            spec.validate(self.model.model_dim)?;
        }
        self.fed.validate()
    }
}

/// Stage 1: masked-label SSL on unlabeled frames.
pub struct EncoderPretraining {
    pub checkpoint: Checkpoint,
    pub losses: Vec<f64>,
    /// Loss on a fixed probe set before and after training.
    pub probe_before: f64,
    pub probe_after: f64,
}

pub fn pretrain_encoder(model_cfg: &ModelConfig, ssl: &SslStageConfig, unlabeled: &[Example], seed: u64) -> Result<EncoderPretraining> {
    if unlabeled.is_empty() {
        return Err(Error::Config("ssl stage needs unlabeled data".into()));
    }
    let (model, mut tree) = Model::build_encoder(model_cfg.clone(), None, seed)?;
    model.add_ssl_head(&mut tree, ssl.codebook_size, seed)?;
    let quantizer = RandomProjectionQuantizer::new(model_cfg.input_dim, ssl.code_dim, ssl.codebook_size, seed ^ 0x9e37)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut probe_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7072_6f62);
    let probe = unlabeled
        .iter()
        .take(16)
        .map(|ex| make_ssl_batch(&ex.features, &ssl.mask, &quantizer, &mut probe_rng))
        .collect::<Result<Vec<_>>>()?;
    let probe_before = ssl_loss(&model, &tree, &probe)?;

    let mut adam = Adam::new(ssl.lr, &tree);
    let mut losses = Vec::with_capacity(ssl.steps);
    let mut cursor = 0;
    for step in 0..ssl.steps {
        let batch = (0..ssl.batch)
            .map(|j| {
                let ex = &unlabeled[(cursor + j) % unlabeled.len()];
                make_ssl_batch(&ex.features, &ssl.mask, &quantizer, &mut rng)
            })
            .collect::<Result<Vec<_>>>()?;
        cursor = (cursor + ssl.batch) % unlabeled.len();
        let (loss, grads) = ssl_loss_and_grads(&model, &tree, &batch)?;
        adam.step(&mut tree, &grads)?;
        log::debug!("ssl step {step}: {loss:.5}");
        losses.push(loss);
    }
    let probe_after = ssl_loss(&model, &tree, &probe)?;
    Ok(EncoderPretraining {
        checkpoint: Checkpoint::new(model, tree),
        losses,
        probe_before,
        probe_after,
    })
}

/// Stage 2 result.
pub struct DecoderPretraining {
    pub checkpoint: Checkpoint,
    pub outcome: TrainOutcome,
}

/// Stage 2: frozen encoder base; trains the decoder (and adapters for
/// `WithAdapters`) on the source domain.
#[allow(clippy::too_many_arguments)]
pub fn pretrain_decoder(
    encoder: &Checkpoint,
    strategy: DecoderStrategy,
    adapter: Option<AdapterSpec>,
    stage: &DecoderStageConfig,
    source_train: &[Example],
    eval_sets: &[EvalSet<'_>],
    eval_every: usize,
    seed: u64,
) -> Result<DecoderPretraining> {
    let mut tree = encoder.tree.clone();
    tree.remove_prefix("ssl_head/");
    let mut model = encoder.model.clone();
    match (strategy, adapter) {
        (DecoderStrategy::WithoutAdapters, None) => {}
        (DecoderStrategy::WithAdapters, Some(spec)) => {
            if !tree.has_adapters() {
                model.insert_adapters(&mut tree, spec, seed)?;
            }
        }
        (DecoderStrategy::WithAdapters, None) => {
            return Err(Error::Config("with_adapters strategy needs an adapter spec".into()))
        }
        (DecoderStrategy::WithoutAdapters, Some(_)) => {
            return Err(Error::Config("without_adapters strategy must not carry an adapter spec".into()))
        }
    }
    if !tree.paths().any(|p| p.starts_with("decoder/")) {
        model.add_decoder(&mut tree, seed)?;
    }
    tree.set_freeze(FreezePolicy::FreezeEncoderBase)?;
    let objective = FrameObjective::new(model.clone());
    let central = CentralConfig {
        iterations: stage.steps,
        batch: stage.batch,
        lr: stage.lr,
        optimizer: crate::fed::OptimizerKind::Adam,
        precision: Default::default(),
        seed,
    };
    let outcome = run_centralized(tree, &objective, source_train, &central, eval_sets, eval_every)?;
    Ok(DecoderPretraining {
        checkpoint: Checkpoint::new(model, outcome.tree.clone()),
        outcome,
    })
}

/// Stage 3 entry: ensures the requested adapters exist and only they train.
pub fn prepare_for_tuning(pretrained: &Checkpoint, spec: AdapterSpec, seed: u64) -> Result<Checkpoint> {
    let mut model = pretrained.model.clone();
    let mut tree = pretrained.tree.clone();
    tree.remove_prefix("ssl_head/");
    match model.adapter {
        None => model.insert_adapters(&mut tree, spec, seed)?,
        Some(existing) if existing.variant != spec.variant || existing.bottleneck != spec.bottleneck => {
            return Err(Error::VariantMismatch {
                found: format!("{} (b={})", existing.variant, existing.bottleneck),
                requested: format!("{} (b={})", spec.variant, spec.bottleneck),
            })
        }
        Some(_) => {}
    }
    model.check_tree(&tree)?;
    tree.set_freeze(FreezePolicy::FreezeAllButAdapters)?;
    Ok(Checkpoint::new(model, tree))
}

pub struct TuningRun {
    pub start: Checkpoint,
    pub checkpoint: Checkpoint,
    pub outcome: TrainOutcome,
}

impl TuningRun {
    pub fn initial(&self, set: &str) -> Option<&EvalMetrics> {
        self.outcome.initial_eval.get(set)
    }

    pub fn final_eval(&self, set: &str) -> Option<&EvalMetrics> {
        self.outcome.records.iter().rev().find_map(|r| r.eval.get(set))
    }
}

/// Stage 3: federated adapter tuning on the target domain.
pub fn fedtune(
    pretrained: &Checkpoint,
    spec: AdapterSpec,
    fed: &FedConfig,
    target_train: &[Example],
    eval_sets: &[EvalSet<'_>],
    eval_every: usize,
    seed: u64,
) -> Result<TuningRun> {
    let start = prepare_for_tuning(pretrained, spec, seed)?;
    let objective = FrameObjective {
        model: start.model.clone(),
        precision: fed.precision,
    };
    let outcome = run_federated(start.tree.clone(), &objective, target_train, fed, eval_sets, eval_every)?;
    let checkpoint = Checkpoint {
        model: start.model.clone(),
        tree: outcome.tree.clone(),
        adam: outcome.server_adam.clone(),
    };
    Ok(TuningRun {
        start,
        checkpoint,
        outcome,
    })
}

/// Centralized counterpart of [`fedtune`].
pub fn centralized_tune(
    pretrained: &Checkpoint,
    spec: AdapterSpec,
    central: &CentralConfig,
    target_train: &[Example],
    eval_sets: &[EvalSet<'_>],
    eval_every: usize,
    seed: u64,
) -> Result<TuningRun> {
    let start = prepare_for_tuning(pretrained, spec, seed)?;
    let objective = FrameObjective {
        model: start.model.clone(),
        precision: central.precision,
    };
    let outcome = run_centralized(start.tree.clone(), &objective, target_train, central, eval_sets, eval_every)?;
    let checkpoint = Checkpoint {
        model: start.model.clone(),
        tree: outcome.tree.clone(),
        adam: outcome.server_adam.clone(),
    };
    Ok(TuningRun {
        start,
        checkpoint,
        outcome,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: AdapterVariant,
    pub start_digest: String,
    pub initial_target_wer: f64,
    pub fed_target_wer: f64,
    pub central_target_wer: f64,
    pub initial_source_wer: f64,
    pub fed_source_wer: f64,
    pub central_source_wer: f64,
}

impl AblationRow {
    pub fn target_gap(&self) -> f64 {
        (self.fed_target_wer - self.central_target_wer).abs()
    }
}

pub struct AblationResult {
    pub rows: Vec<AblationRow>,
    pub fed_runs: Vec<TuningRun>,
    pub central_runs: Vec<TuningRun>,
}

/// Hard check that both arms see the same number of training samples.
pub fn check_budgets(fed: &FedConfig, central: &CentralConfig) -> Result<()> {
    if fed.total_samples() != central.total_samples() {
        return Err(Error::BudgetMismatch {
            federated: fed.total_samples(),
            centralized: central.total_samples(),
        });
    }
    Ok(())
}

/// Federated and centralized tuning from the same checkpoint, per variant.
#[allow(clippy::too_many_arguments)]
pub fn ablation(
    pretrained: &Checkpoint,
    variants: &[AdapterVariant],
    bottleneck: usize,
    fed: &FedConfig,
    central: &CentralConfig,
    target_train: &[Example],
    eval_sets: &[EvalSet<'_>],
    eval_every: usize,
    seed: u64,
) -> Result<AblationResult> {
    check_budgets(fed, central)?;
    let mut rows = Vec::new();
    let mut fed_runs = Vec::new();
    let mut central_runs = Vec::new();
    for &variant in variants {
        let spec = AdapterSpec {
            variant,
            bottleneck,
            ..pretrained.model.adapter.unwrap_or(AdapterSpec::new(variant, bottleneck))
        };
        let f = fedtune(pretrained, spec, fed, target_train, eval_sets, eval_every, seed)?;
        let c = centralized_tune(pretrained, spec, central, target_train, eval_sets, eval_every, seed)?;
        let wer = |run: &TuningRun, set: &str, initial: bool| -> f64 {
            let m = if initial { run.initial(set) } else { run.final_eval(set) };
            m.map_or(f64::NAN, |m| m.wer)
        };
        rows.push(AblationRow {
            variant,
            start_digest: f.start.tree.digest(),
            initial_target_wer: wer(&f, TARGET, true),
            fed_target_wer: wer(&f, TARGET, false),
            central_target_wer: wer(&c, TARGET, false),
            initial_source_wer: wer(&f, SOURCE, true),
            fed_source_wer: wer(&f, SOURCE, false),
            central_source_wer: wer(&c, SOURCE, false),
        });
        debug_assert_eq!(f.start.tree.digest(), c.start.tree.digest());
        fed_runs.push(f);
        central_runs.push(c);
    }
    Ok(AblationResult {
        rows,
        fed_runs,
        central_runs,
    })
}

/// One stage-3 model of the family tree.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FamilyMember {
    pub index: usize,
    pub strategy: DecoderStrategy,
    pub variant: AdapterVariant,
}

/// The ten stage-3 combinations: every variant inserted fresh into the
/// adapter-free pretrained model, then every variant continuing from a
/// pretrained model that already carries it.
pub fn model_family() -> Vec<FamilyMember> {
    let strategies = [DecoderStrategy::WithoutAdapters, DecoderStrategy::WithAdapters];
    strategies
        .iter()
        .flat_map(|&s| AdapterVariant::ALL.iter().map(move |&v| (s, v)))
        .enumerate()
        .map(|(i, (strategy, variant))| FamilyMember {
            index: i + 1,
            strategy,
            variant,
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamsRow {
    pub variant: String,
    pub adapter_params: u64,
    pub total_params: u64,
    pub trainable_params: u64,
    pub updated_percent: f64,
    pub bytes_per_round: u64,
}

/// Parameter accounting for every variant and the adapter-free model.
pub fn params_report(model: &ModelConfig, bottleneck: usize, backbone: BackboneSize) -> Vec<ParamsRow> {
    let mut rows = vec![{
        let r = account(model, None, backbone);
        ParamsRow {
            variant: "none".into(),
            adapter_params: r.adapter_params,
            total_params: r.total,
            trainable_params: r.trainable,
            updated_percent: r.updated_percent,
            bytes_per_round: r.bytes_per_round,
        }
    }];
    for v in AdapterVariant::ALL {
        let r = account(model, Some(&AdapterSpec::new(v, bottleneck)), backbone);
        rows.push(ParamsRow {
            variant: v.name().into(),
            adapter_params: r.adapter_params,
            total_params: r.total,
            trainable_params: r.trainable,
            updated_percent: r.updated_percent,
            bytes_per_round: r.bytes_per_round,
        });
    }
    rows
}

pub fn params_csv(rows: &[ParamsRow]) -> String {
    let mut out = String::from("variant,adapter_params,total_params,trainable_params,updated_percent,bytes_per_round\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{:.4},{}",
            r.variant, r.adapter_params, r.total_params, r.trainable_params, r.updated_percent, r.bytes_per_round
        );
    }
    out
}

/// Variant, updated-param %, source WER, target WER.
pub fn summary_csv(rows: &[(String, f64, f64, f64)]) -> String {
    let mut out = String::from("variant,updated_percent,source_wer,target_wer\n");
    for (name, pct, src, tgt) in rows {
        let _ = writeln!(out, "{name},{pct:.4},{src:.6},{tgt:.6}");
    }
    out
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from(
        "variant,initial_target_wer,fed_target_wer,central_target_wer,target_gap,initial_source_wer,fed_source_wer,central_source_wer\n",
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            r.variant,
            r.initial_target_wer,
            r.fed_target_wer,
            r.central_target_wer,
            r.target_gap(),
            r.initial_source_wer,
            r.fed_source_wer,
            r.central_source_wer
        );
    }
    out
}

/// WER change relative to the start, per arm, against the fraction of the
/// sample budget consumed.
pub fn ablation_curves_csv(result: &AblationResult) -> String {
    let mut out = String::from("variant,arm,budget_fraction,source_wer_delta,target_wer_delta\n");
    for (f, c) in result.fed_runs.iter().zip(&result.central_runs) {
        let variant = f.start.model.adapter.map_or("none".to_string(), |a| a.variant.to_string());
        for (arm, run) in [("federated", f), ("centralized", c)] {
            let total: u64 = run.outcome.records.iter().map(|r| r.samples).sum();
            let (s0, t0) = (
                run.initial(SOURCE).map_or(f64::NAN, |m| m.wer),
                run.initial(TARGET).map_or(f64::NAN, |m| m.wer),
            );
            let mut seen = 0u64;
            for rec in &run.outcome.records {
                seen += rec.samples;
                if rec.eval.is_empty() {
                    continue;
                }
                let s = rec.eval.get(SOURCE).map_or(f64::NAN, |m| m.wer - s0);
                let t = rec.eval.get(TARGET).map_or(f64::NAN, |m| m.wer - t0);
                let _ = writeln!(out, "{variant},{arm},{:.4},{s:.6},{t:.6}", seen as f64 / total.max(1) as f64);
            }
        }
    }
    out
}

pub fn records_jsonl(records: &[RoundRecord]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub config_hash: String,
    pub seed: u64,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

fn file_digest(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(std::fs::read(path)?)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    GenData,
    PretrainEncoder,
    PretrainDecoder,
    Fedtune,
    CentralizedTune,
    Ablation,
    Eval,
    ParamsReport,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::GenData => "gen-data",
            Stage::PretrainEncoder => "pretrain-encoder",
            Stage::PretrainDecoder => "pretrain-decoder",
            Stage::Fedtune => "fedtune",
            Stage::CentralizedTune => "centralized-tune",
            Stage::Ablation => "ablation",
            Stage::Eval => "eval",
            Stage::ParamsReport => "params-report",
        }
    }
}

/// Options that only make sense on the command line.
#[derive(Clone, Debug, Default)]
pub struct StageOptions {
    /// Input checkpoint overriding the config's `checkpoints` table.
    pub checkpoint: Option<PathBuf>,
    /// Use full-scale shapes and backbone constants for `params-report`.
    pub full_scale: bool,
}

struct Run<'a> {
    cfg: &'a ExperimentConfig,
    stage: Stage,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
}

impl<'a> Run<'a> {
    fn new(cfg: &'a ExperimentConfig, stage: Stage) -> Result<Self> {
        std::fs::create_dir_all(&cfg.out_dir)?;
        Ok(Self {
            cfg,
            stage,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        })
    }

    fn dataset(&mut self, name: &str, path: &Option<PathBuf>) -> Result<Vec<Example>> {
        let path = path
            .as_ref()
            .ok_or_else(|| Error::Config(format!("stage {} needs data.{name}", self.stage.name())))?;
        let ds = load_dataset(path)?;
        self.inputs.insert(name.to_string(), file_digest(path)?);
        Ok(ds.examples)
    }

    fn checkpoint(&mut self, opts: &StageOptions, pick: impl Fn(&CheckpointPaths) -> Option<PathBuf>, default: &str) -> Result<Checkpoint> {
        let path = opts
            .checkpoint
            .clone()
            .or_else(|| self.cfg.checkpoints.as_ref().and_then(&pick))
            .unwrap_or_else(|| self.cfg.out_dir.join(default));
        let ck = Checkpoint::load(&path)?;
        self.inputs.insert("checkpoint".into(), ck.digest()?);
        Ok(ck)
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.cfg.out_dir.join(name);
        std::fs::write(&path, bytes)?;
        self.outputs.insert(name.to_string(), hex::encode(Sha256::digest(bytes)));
        Ok(path)
    }

    fn write_checkpoint(&mut self, name: &str, ck: &Checkpoint) -> Result<PathBuf> {
        let bytes = ck.encode()?;
        self.write(name, &bytes)
    }

    fn finish(self) -> Result<Manifest> {
        let manifest = Manifest {
            stage: self.stage.name().to_string(),
            config_hash: self.cfg.hash()?,
            seed: self.cfg.seed,
            inputs: self.inputs,
            outputs: self.outputs,
        };
        let path = self.cfg.out_dir.join(format!("{}.manifest.json", self.stage.name()));
        std::fs::write(path, serde_json::to_string_pretty(&manifest)?)?;
        Ok(manifest)
    }
}

fn require_adapter(cfg: &ExperimentConfig) -> Result<AdapterSpec> {
    cfg.adapter
        .ok_or_else(|| Error::Config("this stage needs an [adapter] table".into()))
}

/// Runs one stage end to end against the filesystem.
pub fn run_stage(stage: Stage, cfg: &ExperimentConfig, opts: &StageOptions) -> Result<Manifest> {
    cfg.validate()?;
    let mut run = Run::new(cfg, stage)?;
    match stage {
        Stage::GenData => {
            let g = &cfg.data_gen;
            let sets = [
                ("ssl.bin", &g.source, g.ssl_examples, 1u64),
                ("source_train.bin", &g.source, g.source_train_examples, 2),
                ("source_eval.bin", &g.source, g.source_eval_examples, 3),
                ("target_train.bin", &g.target, g.target_train_examples, 4),
                ("target_eval.bin", &g.target, g.target_eval_examples, 5),
            ];
            for (name, spec, n, salt) in sets {
                let ds = generate_domain(spec, n, cfg.seed.wrapping_mul(31).wrapping_add(salt))?;
                let path = cfg.out_dir.join(name);
                save_dataset(&ds, &path)?;
                run.outputs.insert(name.to_string(), file_digest(&path)?);
            }
        }
        Stage::PretrainEncoder => {
            let data = run.dataset("ssl", &cfg.data.ssl)?;
            let res = pretrain_encoder(&cfg.model, &cfg.ssl, &data, cfg.seed)?;
            let mut log = String::new();
            for (i, l) in res.losses.iter().enumerate() {
                let _ = writeln!(log, "{{\"step\":{},\"ssl_loss\":{l}}}", i + 1);
            }
            run.write("ssl_loss.jsonl", log.as_bytes())?;
            run.write_checkpoint("encoder.ckpt", &res.checkpoint)?;
        }
        Stage::PretrainDecoder => {
            let encoder = run.checkpoint(opts, |c| c.encoder.clone(), "encoder.ckpt")?;
            let train = run.dataset("source_train", &cfg.data.source_train)?;
            let source_eval = run.dataset("source_eval", &cfg.data.source_eval)?;
            let target_eval = run.dataset("target_eval", &cfg.data.target_eval)?;
            let sets = [EvalSet::new(SOURCE, &source_eval), EvalSet::new(TARGET, &target_eval)];
            let adapter = match cfg.decoder.strategy {
                DecoderStrategy::WithAdapters => Some(require_adapter(cfg)?),
                DecoderStrategy::WithoutAdapters => None,
            };
            let res = pretrain_decoder(&encoder, cfg.decoder.strategy, adapter, &cfg.decoder, &train, &sets, cfg.eval_every, cfg.seed)?;
            run.write("decoder_records.jsonl", records_jsonl(&res.outcome.records)?.as_bytes())?;
            run.write_checkpoint("pretrained.ckpt", &res.checkpoint)?;
        }
        Stage::Fedtune | Stage::CentralizedTune => {
            let spec = require_adapter(cfg)?;
            let pretrained = run.checkpoint(opts, |c| c.pretrained.clone(), "pretrained.ckpt")?;
            let train = run.dataset("target_train", &cfg.data.target_train)?;
            let source_eval = run.dataset("source_eval", &cfg.data.source_eval)?;
            let target_eval = run.dataset("target_eval", &cfg.data.target_eval)?;
            let sets = [EvalSet::new(SOURCE, &source_eval), EvalSet::new(TARGET, &target_eval)];
            let (res, prefix) = if stage == Stage::Fedtune {
                (fedtune(&pretrained, spec, &cfg.fed, &train, &sets, cfg.eval_every, cfg.seed)?, "fedtune")
            } else {
                (
                    centralized_tune(&pretrained, spec, &cfg.central, &train, &sets, cfg.eval_every, cfg.seed)?,
                    "central",
                )
            };
            let pct = 100.0 * res.start.tree.trainable_count() as f64 / res.start.tree.total_count() as f64;
            let fin = |s: &str| res.final_eval(s).or(res.initial(s)).map_or(f64::NAN, |m| m.wer);
            let init = |s: &str| res.initial(s).map_or(f64::NAN, |m| m.wer);
            let rows = vec![
                ("pretrained".to_string(), pct, init(SOURCE), init(TARGET)),
                (spec.variant.to_string(), pct, fin(SOURCE), fin(TARGET)),
            ];
            run.write(&format!("{prefix}_records.jsonl"), records_jsonl(&res.outcome.records)?.as_bytes())?;
            run.write(&format!("{prefix}_summary.csv"), summary_csv(&rows).as_bytes())?;
            run.write_checkpoint(&format!("{prefix}.ckpt"), &res.checkpoint)?;
        }
        Stage::Ablation => {
            let pretrained = run.checkpoint(opts, |c| c.pretrained.clone(), "pretrained.ckpt")?;
            let train = run.dataset("target_train", &cfg.data.target_train)?;
            let source_eval = run.dataset("source_eval", &cfg.data.source_eval)?;
            let target_eval = run.dataset("target_eval", &cfg.data.target_eval)?;
            let sets = [EvalSet::new(SOURCE, &source_eval), EvalSet::new(TARGET, &target_eval)];
            let variants = cfg.ablation_variants.clone().unwrap_or_else(|| AdapterVariant::ALL.to_vec());
            let bottleneck = require_adapter(cfg)?.bottleneck;
            let res = ablation(&pretrained, &variants, bottleneck, &cfg.fed, &cfg.central, &train, &sets, cfg.eval_every, cfg.seed)?;
            run.write("ablation.csv", ablation_csv(&res.rows).as_bytes())?;
            run.write("ablation_curves.csv", ablation_curves_csv(&res).as_bytes())?;
        }
        Stage::Eval => {
            let ck = run.checkpoint(opts, |c| c.tuned.clone().or(c.pretrained.clone()), "pretrained.ckpt")?;
            let objective = FrameObjective::new(ck.model.clone());
            let mut out = BTreeMap::new();
            for (name, path) in [(SOURCE, &cfg.data.source_eval), (TARGET, &cfg.data.target_eval)] {
                if path.is_some() {
                    let data = run.dataset(&format!("{name}_eval"), path)?;
                    out.insert(name.to_string(), crate::tasks::Objective::evaluate(&objective, &ck.tree, &data)?);
                }
            }
            run.write("eval.json", serde_json::to_string_pretty(&out)?.as_bytes())?;
        }
        Stage::ParamsReport => {
            let bottleneck = cfg.adapter.map_or(8, |a| a.bottleneck);
            let rows = if opts.full_scale {
                params_report(&ModelConfig::full_scale(), 256, BackboneSize::full_scale())
            } else {
                params_report(&cfg.model, bottleneck, BackboneSize::Counted)
            };
            run.write("params.csv", params_csv(&rows).as_bytes())?;
        }
    }
    run.finish()
}
