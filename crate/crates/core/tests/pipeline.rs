//! Stage functions of the three-stage pipeline and the file-driven runner.

mod common;

use std::sync::OnceLock;

use common::tiny_config;
use fedadapt::checkpoint::Checkpoint;
use fedadapt::data::Example;
use fedadapt::fed::{CentralConfig, EvalSet, FedConfig};
use fedadapt::harness::{
    ablation, centralized_tune, fedtune, model_family, pretrain_decoder, pretrain_encoder, run_stage,
    DecoderStageConfig, DecoderStrategy, ExperimentConfig, SslStageConfig, Stage, StageOptions, SOURCE, TARGET,
};
use fedadapt::metrics::evaluate;
use fedadapt::model::{AdapterSpec, AdapterVariant, Model, ModelConfig};
use fedadapt::tree::{is_adapter_path, is_encoder_path};
use fedadapt::Error;

struct Fixture {
    source_train: Vec<Example>,
    source_eval: Vec<Example>,
    target_train: Vec<Example>,
    target_eval: Vec<Example>,
    encoder: Checkpoint,
    pretrained: Checkpoint,
}

fn ssl_stage(steps: usize) -> SslStageConfig {
    SslStageConfig {
        steps,
        batch: 4,
        ..SslStageConfig::default()
    }
}

fn decoder_stage(strategy: DecoderStrategy, steps: usize) -> DecoderStageConfig {
    DecoderStageConfig {
        strategy,
        steps,
        batch: 8,
        lr: 3e-3,
    }
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let source_train = common::source(120, 1);
        let source_eval = common::source(40, 2);
        let target_train = common::target(80, 3);
        let target_eval = common::target(40, 4);
        let encoder = pretrain_encoder(&tiny_config(), &ssl_stage(20), &source_train, 5).unwrap().checkpoint;
        let pretrained = pretrain_decoder(
            &encoder,
            DecoderStrategy::WithoutAdapters,
            None,
            &decoder_stage(DecoderStrategy::WithoutAdapters, 150),
            &source_train,
            &[],
            0,
            6,
        )
        .unwrap()
        .checkpoint;
        Fixture {
            source_train,
            source_eval,
            target_train,
            target_eval,
            encoder,
            pretrained,
        }
    })
}

fn sets(f: &Fixture) -> [EvalSet<'_>; 2] {
    [EvalSet::new(SOURCE, &f.source_eval), EvalSet::new(TARGET, &f.target_eval)]
}

fn small_fed() -> FedConfig {
    FedConfig {
        num_clients: 4,
        client_batch: 4,
        rounds: 5,
        client_lr: 0.05,
        server_lr: 5e-3,
        ..FedConfig::default()
    }
}

#[test]
fn zero_ssl_steps_leave_initialization() {
    let f = fixture();
    let out = pretrain_encoder(&tiny_config(), &ssl_stage(0), &f.source_train, 11).unwrap();
    let (model, mut init) = Model::build_encoder(tiny_config(), None, 11).unwrap();
    model.add_ssl_head(&mut init, 16, 11).unwrap();
    assert_eq!(out.checkpoint.tree.digest(), init.digest());
    assert!(out.losses.is_empty());
}

#[test]
fn ssl_pretraining_is_deterministic() {
    let f = fixture();
    let a = pretrain_encoder(&tiny_config(), &ssl_stage(3), &f.source_train, 12).unwrap();
    let b = pretrain_encoder(&tiny_config(), &ssl_stage(3), &f.source_train, 12).unwrap();
    assert_eq!(a.checkpoint.digest().unwrap(), b.checkpoint.digest().unwrap());
    assert_eq!(a.losses, b.losses);
}

#[test]
fn ssl_loss_drops_over_500_desk_steps() {
    let data = common::source(200, 21);
    let ssl = SslStageConfig {
        steps: 500,
        ..SslStageConfig::default()
    };
    let out = pretrain_encoder(&ModelConfig::desk(), &ssl, &data, 22).unwrap();
    assert!(out.probe_after < out.probe_before, "{} -> {}", out.probe_before, out.probe_after);
    assert!(!out.checkpoint.tree.paths().any(|p| !(is_encoder_path(p) || p.starts_with("ssl_head/"))));
}

#[test]
fn decoder_stage_without_adapters() {
    let f = fixture();
    assert!(!f.pretrained.tree.has_adapters());
    assert!(!f.pretrained.tree.paths().any(|p| p.starts_with("ssl_head/")));
    for (path, leaf) in f.pretrained.tree.iter() {
        if is_encoder_path(path) {
            assert!(leaf.value.bit_eq(f.encoder.tree.tensor(path).unwrap()), "{path}");
        }
    }
    let model = &f.pretrained.model;
    let (untrained_model, untrained) = Model::build(model.config.clone(), None, 6).unwrap();
    let before = evaluate(&untrained_model, &untrained, &f.source_eval).unwrap();
    let after = evaluate(model, &f.pretrained.tree, &f.source_eval).unwrap();
    assert!(before.wer > 0.9, "random-init wer {}", before.wer);
    assert!(after.wer < before.wer);
    let target = evaluate(model, &f.pretrained.tree, &f.target_eval).unwrap();
    assert!(target.loss > after.loss, "target {} source {}", target.loss, after.loss);
}

#[test]
fn decoder_stage_with_adapters_keeps_encoder_base() {
    let f = fixture();
    let spec = AdapterSpec::new(AdapterVariant::ParallelEnd, 4);
    let out = pretrain_decoder(
        &f.encoder,
        DecoderStrategy::WithAdapters,
        Some(spec),
        &decoder_stage(DecoderStrategy::WithAdapters, 5),
        &f.source_train,
        &sets(f),
        0,
        7,
    )
    .unwrap();
    let tree = &out.checkpoint.tree;
    assert!(tree.has_adapters());
    for (path, leaf) in tree.iter() {
        if is_encoder_path(path) && !is_adapter_path(path) {
            assert!(leaf.value.bit_eq(f.encoder.tree.tensor(path).unwrap()), "{path}");
        }
    }
    let source = out.outcome.records.last().unwrap().eval.get(SOURCE).unwrap();
    assert!(source.wer.is_finite());
}

#[test]
fn decoder_strategy_and_spec_must_agree() {
    let f = fixture();
    let stage = decoder_stage(DecoderStrategy::WithAdapters, 1);
    let spec = AdapterSpec::new(AdapterVariant::SeqEnd, 4);
    assert!(pretrain_decoder(&f.encoder, DecoderStrategy::WithAdapters, None, &stage, &f.source_train, &[], 0, 1).is_err());
    assert!(pretrain_decoder(&f.encoder, DecoderStrategy::WithoutAdapters, Some(spec), &stage, &f.source_train, &[], 0, 1).is_err());
}

#[test]
fn fedtune_rejects_other_variant() {
    let f = fixture();
    let with = pretrain_decoder(
        &f.encoder,
        DecoderStrategy::WithAdapters,
        Some(AdapterSpec::new(AdapterVariant::SeqEnd, 4)),
        &decoder_stage(DecoderStrategy::WithAdapters, 1),
        &f.source_train,
        &[],
        0,
        1,
    )
    .unwrap()
    .checkpoint;
    let err = fedtune(&with, AdapterSpec::new(AdapterVariant::SeqBoth, 4), &small_fed(), &f.target_train, &[], 0, 1);
    assert!(matches!(err, Err(Error::VariantMismatch { .. })));
}

#[test]
fn fresh_adapters_start_at_pretrained_metrics() {
    let f = fixture();
    let base = evaluate(&f.pretrained.model, &f.pretrained.tree, &f.target_eval).unwrap();
    let run = fedtune(
        &f.pretrained,
        AdapterSpec::new(AdapterVariant::SeqBoth, 4),
        &FedConfig { rounds: 0, ..small_fed() },
        &f.target_train,
        &sets(f),
        0,
        3,
    )
    .unwrap();
    assert_eq!(run.initial(TARGET).unwrap(), &base);
}

#[test]
fn whole_model_family_runs() {
    let f = fixture();
    let fed = FedConfig { rounds: 1, ..small_fed() };
    for member in model_family() {
        let spec = AdapterSpec::new(member.variant, 4);
        let start = match member.strategy {
            DecoderStrategy::WithoutAdapters => f.pretrained.clone(),
            DecoderStrategy::WithAdapters => pretrain_decoder(
                &f.encoder,
                DecoderStrategy::WithAdapters,
                Some(spec),
                &decoder_stage(DecoderStrategy::WithAdapters, 1),
                &f.source_train,
                &[],
                0,
                2,
            )
            .unwrap()
            .checkpoint,
        };
        let run = fedtune(&start, spec, &fed, &f.target_train, &[], 0, 2).unwrap();
        assert_eq!(run.checkpoint.model.adapter.unwrap().variant, member.variant, "member {}", member.index);
        assert_eq!(run.outcome.records.len(), 1);
    }
}

#[test]
fn ablation_arms_share_start_and_budget() {
    let f = fixture();
    let fed = small_fed();
    let central = CentralConfig {
        iterations: 5,
        batch: 16,
        lr: 5e-3,
        ..CentralConfig::default()
    };
    let res = ablation(&f.pretrained, &[AdapterVariant::SeqEnd], 4, &fed, &central, &f.target_train, &sets(f), 0, 9).unwrap();
    assert_eq!(res.rows.len(), 1);
    assert_eq!(res.fed_runs[0].start.tree.digest(), res.central_runs[0].start.tree.digest());
    let bad = CentralConfig { iterations: 4, ..central.clone() };
    assert!(matches!(
        ablation(&f.pretrained, &[AdapterVariant::SeqEnd], 4, &fed, &bad, &f.target_train, &sets(f), 0, 9),
        Err(Error::BudgetMismatch { .. })
    ));
    let c = centralized_tune(&f.pretrained, AdapterSpec::new(AdapterVariant::SeqEnd, 4), &central, &f.target_train, &[], 0, 9).unwrap();
    assert_eq!(c.outcome.records.len(), 5);
}

fn file_config(dir: &std::path::Path) -> ExperimentConfig {
    let text = format!(
        r#"
seed = 4
out_dir = "{out}"
eval_every = 2

[model]
input_dim = 16
model_dim = 16
layers = 1
ff_mult = 2
conv_kernel = 3
attention = true
conv = true
vocab_size = 12
layernorm_eps = 1e-5

[adapter]
variant = "seq_end"
bottleneck = 4

[data]
ssl = "{out}/ssl.bin"
source_train = "{out}/source_train.bin"
source_eval = "{out}/source_eval.bin"
target_train = "{out}/target_train.bin"
target_eval = "{out}/target_eval.bin"

[data_gen]
ssl_examples = 20
source_train_examples = 20
source_eval_examples = 10
target_train_examples = 16
target_eval_examples = 10

[ssl]
steps = 2
batch = 2

[decoder]
steps = 2
batch = 4

[fed]
num_clients = 2
client_batch = 2
rounds = 2
client_lr = 0.05
server_lr = 0.01

[central]
iterations = 2
batch = 4
lr = 0.01
"#,
        out = dir.display()
    );
    ExperimentConfig::from_toml(&text).unwrap()
}

#[test]
fn file_driven_stages_write_manifests() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = file_config(dir.path());
    let opts = StageOptions::default();
    let missing = run_stage(Stage::PretrainEncoder, &cfg, &opts).unwrap_err();
    assert!(missing.to_string().contains("ssl.bin"), "{missing}");

    let mut digests = Vec::new();
    for stage in [
        Stage::GenData,
        Stage::PretrainEncoder,
        Stage::PretrainDecoder,
        Stage::Fedtune,
        Stage::CentralizedTune,
        Stage::Ablation,
        Stage::Eval,
        Stage::ParamsReport,
    ] {
        let m = run_stage(stage, &cfg, &opts).unwrap();
        assert_eq!(m.config_hash, cfg.hash().unwrap());
        assert!(!m.outputs.is_empty());
        assert!(dir.path().join(format!("{}.manifest.json", stage.name())).exists());
        digests.push(m);
    }
    // the fedtune manifest's input checkpoint is the decoder stage's output
    assert_eq!(digests[3].inputs["checkpoint"], digests[2].outputs["pretrained.ckpt"]);
    let summary = std::fs::read_to_string(dir.path().join("fedtune_summary.csv")).unwrap();
    assert!(summary.starts_with("variant,updated_percent,source_wer,target_wer\n"));
    let curves = std::fs::read_to_string(dir.path().join("ablation_curves.csv")).unwrap();
    assert!(curves.lines().count() > 1);
    let log = std::fs::read_to_string(dir.path().join("fedtune_records.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);

    // reruns reproduce every output byte
    let again = run_stage(Stage::Fedtune, &cfg, &opts).unwrap();
    assert_eq!(again.outputs, digests[3].outputs);
}
