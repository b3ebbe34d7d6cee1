//! Closed-form parameter and communication accounting.
//!
//! Desk-scale configs are counted from layer shapes. The full-scale backbone
//! cannot be reconstructed leaf by leaf (its front end and decoder internals
//! are not specified), so its encoder-base and decoder totals are fixed
//! constants while adapter counts are always computed from shapes.

use serde::{Deserialize, Serialize};

use crate::autodiff::Precision;
use crate::model::{AdapterSpec, ModelConfig};
use crate::tree::FreezePolicy;

/// Full-scale encoder without adapters (103.05M).
pub const FULL_SCALE_ENCODER_PARAMS: u64 = 103_050_000;
/// Full-scale decoder (3.91M).
pub const FULL_SCALE_DECODER_PARAMS: u64 = 3_910_000;

/// How backbone sizes are obtained.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum BackboneSize {
    /// Count every base leaf from the config's shapes.
    Counted,
    Fixed { encoder_base: u64, decoder: u64 },
}

impl BackboneSize {
    pub fn full_scale() -> Self {
        BackboneSize::Fixed {
            encoder_base: FULL_SCALE_ENCODER_PARAMS,
            decoder: FULL_SCALE_DECODER_PARAMS,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccountingReport {
    pub encoder_base_params: u64,
    pub decoder_params: u64,
    pub adapter_params: u64,
    pub adapter_instances: u64,
    pub total: u64,
    pub trainable: u64,
    pub updated_percent: f64,
    /// Bytes one client sends (or receives) per round.
    pub bytes_per_round: u64,
}

fn linear(fan_in: u64, fan_out: u64) -> u64 {
    fan_in * fan_out + fan_out
}

/// Encoder parameters excluding adapters.
pub fn encoder_base_params(cfg: &ModelConfig) -> u64 {
    let d = cfg.model_dim as u64;
    let ff = d * cfg.ff_mult as u64;
    let norm = 2 * d;
    let ffm = norm + linear(d, ff) + linear(ff, d);
    let attn = if cfg.attention { norm + 4 * linear(d, d) } else { 0 };
    let conv = if cfg.conv {
        norm + linear(d, d) + linear(cfg.conv_kernel as u64, d) + linear(d, d)
    } else {
        0
    };
    let layer = 2 * ffm + attn + conv + norm;
    linear(cfg.input_dim as u64, d) + cfg.layers as u64 * layer
}

pub fn decoder_params(cfg: &ModelConfig) -> u64 {
    linear(cfg.model_dim as u64, cfg.output_classes() as u64)
}

pub fn adapter_instances(cfg: &ModelConfig, spec: &AdapterSpec) -> u64 {
    (cfg.layers * spec.variant.per_layer()) as u64
}

pub fn adapter_params(cfg: &ModelConfig, spec: &AdapterSpec) -> u64 {
    adapter_instances(cfg, spec) * spec.params_per_instance(cfg.model_dim) as u64
}

/// Accounting under the policy the tuning stage uses: adapters only when
/// present, otherwise everything trainable.
pub fn account(cfg: &ModelConfig, adapter: Option<&AdapterSpec>, backbone: BackboneSize) -> AccountingReport {
    let policy = if adapter.is_some() {
        FreezePolicy::FreezeAllButAdapters
    } else {
        FreezePolicy::AllTrainable
    };
    account_with_policy(cfg, adapter, backbone, policy, Precision::F64)
}

pub fn account_with_policy(
    cfg: &ModelConfig,
    adapter: Option<&AdapterSpec>,
    backbone: BackboneSize,
    policy: FreezePolicy,
    precision: Precision,
) -> AccountingReport {
    let (encoder_base, decoder) = match backbone {
        BackboneSize::Counted => (encoder_base_params(cfg), decoder_params(cfg)),
        BackboneSize::Fixed { encoder_base, decoder } => (encoder_base, decoder),
    };
    let (adapters, instances) = adapter.map_or((0, 0), |s| (adapter_params(cfg, s), adapter_instances(cfg, s)));
    let total = encoder_base + decoder + adapters;
    let trainable = match policy {
        FreezePolicy::AllTrainable => total,
        FreezePolicy::FreezeEncoderBase => decoder + adapters,
        FreezePolicy::FreezeAllButAdapters => adapters,
    };
    AccountingReport {
        encoder_base_params: encoder_base,
        decoder_params: decoder,
        adapter_params: adapters,
        adapter_instances: instances,
        total,
        trainable,
        updated_percent: 100.0 * trainable as f64 / total as f64,
        bytes_per_round: trainable * precision.bytes_per_value(),
    }
}
