//! Parameter accounting against brute-force leaf enumeration.

use fedadapt::accounting::{account, account_with_policy, adapter_params, BackboneSize};
use fedadapt::autodiff::Precision;
use fedadapt::model::{AdapterSpec, AdapterVariant, Model, ModelConfig};
use fedadapt::tree::{is_adapter_path, FreezePolicy};

fn desk_grid() -> Vec<ModelConfig> {
    let mut out = Vec::new();
    for layers in [1, 2, 4] {
        for model_dim in [16, 32] {
            for (attention, conv) in [(true, true), (false, true), (true, false)] {
                out.push(ModelConfig {
                    layers,
                    model_dim,
                    attention,
                    conv,
                    ..ModelConfig::desk()
                });
            }
        }
    }
    out
}

#[test]
fn counted_accounting_matches_tree() {
    for cfg in desk_grid() {
        for adapter in std::iter::once(None).chain(AdapterVariant::ALL.map(|v| Some(AdapterSpec::new(v, 8)))) {
            let (_, mut tree) = Model::build(cfg.clone(), adapter, 1).unwrap();
            let report = account(&cfg, adapter.as_ref(), BackboneSize::Counted);
            let brute_total: usize = tree.iter().map(|(_, l)| l.value.numel()).sum();
            let brute_adapter: usize = tree.iter().filter(|(p, _)| is_adapter_path(p)).map(|(_, l)| l.value.numel()).sum();
            let brute_decoder: usize = tree.iter().filter(|(p, _)| p.starts_with("decoder/")).map(|(_, l)| l.value.numel()).sum();
            assert_eq!(report.total as usize, brute_total);
            assert_eq!(report.adapter_params as usize, brute_adapter);
            assert_eq!(report.decoder_params as usize, brute_decoder);
            assert_eq!(
                report.encoder_base_params as usize,
                brute_total - brute_adapter - brute_decoder
            );
            if adapter.is_some() {
                tree.set_freeze(FreezePolicy::FreezeAllButAdapters).unwrap();
                assert_eq!(report.trainable as usize, tree.trainable_count());
            }
            tree.set_freeze(FreezePolicy::FreezeEncoderBase).unwrap();
            let r = account_with_policy(&cfg, adapter.as_ref(), BackboneSize::Counted, FreezePolicy::FreezeEncoderBase, Precision::F32);
            assert_eq!(r.trainable as usize, tree.trainable_count());
            assert_eq!(r.bytes_per_round, 4 * r.trainable);
        }
    }
}

#[test]
fn full_scale_adapter_bridge() {
    let cfg = ModelConfig::full_scale();
    let spec = AdapterSpec::new(AdapterVariant::SeqEnd, 256);
    assert_eq!(adapter_params(&cfg, &spec), 17 * (2 * 512 * 256 + 256 + 512));
    assert_eq!(adapter_params(&cfg, &spec), 4_469_504);
    let both = AdapterSpec::new(AdapterVariant::ParallelBoth, 256);
    assert_eq!(adapter_params(&cfg, &both), 8_939_008);
}

#[test]
fn full_scale_updated_percentages() {
    let cfg = ModelConfig::full_scale();
    let backbone = BackboneSize::full_scale();
    for v in AdapterVariant::ALL {
        let r = account(&cfg, Some(&AdapterSpec::new(v, 256)), backbone);
        let expected = if v.per_layer() == 2 { 7.71 } else { 4.01 };
        assert!((r.updated_percent - expected).abs() <= 0.02, "{v}: {}", r.updated_percent);
    }
}

#[test]
fn no_adapter_means_everything_trainable() {
    let r = account(&ModelConfig::desk(), None, BackboneSize::Counted);
    assert_eq!(r.trainable, r.total);
    assert_eq!(r.updated_percent, 100.0);
    assert_eq!(r.bytes_per_round, 8 * r.total);
}
