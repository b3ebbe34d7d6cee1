//! Conformer-lite encoder, adapter placement, and the frame-classifier head.
//!
//! Parameter layout (all under one [`ParameterTree`]):
//!
//! ```text
//! encoder/frontend/{w,b}                         input projection d_in -> d
//! encoder/layerNN/ffm{1,2}/{ln_gain,ln_bias,w1,b1,w2,b2}
//! encoder/layerNN/attn/{ln_gain,ln_bias,wq,bq,wk,bk,wv,bv,wo,bo}
//! encoder/layerNN/conv/{ln_gain,ln_bias,pw1_w,pw1_b,dw_w,dw_b,pw2_w,pw2_b}
//! encoder/layerNN/final_ln/{gain,bias}
//! encoder/layerNN/adapter_{begin,end,between}/{w_down,b_down,w_up,b_up}
//! decoder/{w,b}                                  d -> V + 1 (blank is index V)
//! ssl_head/{w,b}                                 d -> codebook size
//! ```

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Activation, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::tree::{is_adapter_path, Bound, ParameterTree};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub model_dim: usize,
    pub layers: usize,
    pub ff_mult: usize,
    pub conv_kernel: usize,
    pub attention: bool,
    pub conv: bool,
    pub vocab_size: usize,
    pub layernorm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// Desk-scale default: d=32, four layers.
    pub fn desk() -> Self {
        Self {
            input_dim: 16,
            model_dim: 32,
            layers: 4,
            ff_mult: 4,
            conv_kernel: 7,
            attention: true,
            conv: true,
            vocab_size: 12,
            layernorm_eps: 1e-5,
        }
    }

    /// Full-scale shapes (17 layers, d=512, kernel 32); used for accounting only.
    pub fn full_scale() -> Self {
        Self {
            input_dim: 80,
            model_dim: 512,
            layers: 17,
            ff_mult: 4,
            conv_kernel: 32,
            attention: true,
            conv: true,
            vocab_size: 1024,
            layernorm_eps: 1e-5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.model_dim < 2 {
            return Err(Error::InvalidConfig(format!("model_dim must be >= 2, got {}", self.model_dim)));
        }
        if self.layers < 1 {
            return Err(Error::InvalidConfig("layers must be >= 1".into()));
        }
        if self.input_dim < 1 || self.ff_mult < 1 || self.vocab_size < 1 {
            return Err(Error::InvalidConfig("input_dim, ff_mult and vocab_size must be positive".into()));
        }
        if self.conv && self.conv_kernel < 1 {
            return Err(Error::InvalidConfig("conv_kernel must be >= 1".into()));
        }
        if self.layernorm_eps <= 0.0 {
            return Err(Error::InvalidConfig("layernorm_eps must be > 0".into()));
        }
        Ok(())
    }

    pub fn blank(&self) -> usize {
        self.vocab_size
    }

    pub fn output_classes(&self) -> usize {
        self.vocab_size + 1
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterVariant {
    Separate,
    SeqEnd,
    SeqBoth,
    ParallelEnd,
    ParallelBoth,
}

impl AdapterVariant {
    pub const ALL: [AdapterVariant; 5] = [
        AdapterVariant::Separate,
        AdapterVariant::SeqEnd,
        AdapterVariant::SeqBoth,
        AdapterVariant::ParallelEnd,
        AdapterVariant::ParallelBoth,
    ];

    pub fn per_layer(self) -> usize {
        match self {
            AdapterVariant::SeqBoth | AdapterVariant::ParallelBoth => 2,
            _ => 1,
        }
    }

    pub fn is_parallel(self) -> bool {
        matches!(self, AdapterVariant::ParallelEnd | AdapterVariant::ParallelBoth)
    }

    /// Slot names used in parameter paths.
    pub fn slots(self) -> &'static [&'static str] {
        match self {
            AdapterVariant::Separate => &["adapter_between"],
            AdapterVariant::SeqEnd | AdapterVariant::ParallelEnd => &["adapter_end"],
            AdapterVariant::SeqBoth | AdapterVariant::ParallelBoth => &["adapter_begin", "adapter_end"],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            AdapterVariant::Separate => "separate",
            AdapterVariant::SeqEnd => "seq_end",
            AdapterVariant::SeqBoth => "seq_both",
            AdapterVariant::ParallelEnd => "parallel_end",
            AdapterVariant::ParallelBoth => "parallel_both",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::InvalidAdapterSpec(format!("unknown variant `{s}`")))
    }
}

impl fmt::Display for AdapterVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterSpec {
    pub variant: AdapterVariant,
    pub bottleneck: usize,
    #[serde(default)]
    pub nonlinearity: Activation,
    #[serde(default = "default_true")]
    pub internal_residual: bool,
}

impl AdapterSpec {
    pub fn new(variant: AdapterVariant, bottleneck: usize) -> Self {
        Self {
            variant,
            bottleneck,
            nonlinearity: Activation::Relu,
            internal_residual: true,
        }
    }

    pub fn validate(&self, model_dim: usize) -> Result<()> {
        if self.bottleneck < 1 {
            return Err(Error::InvalidAdapterSpec("bottleneck must be >= 1".into()));
        }
        if self.bottleneck >= model_dim {
            return Err(Error::InvalidAdapterSpec(format!(
                "bottleneck {} must be smaller than model dim {model_dim}",
                self.bottleneck
            )));
        }
        Ok(())
    }

    /// `2·d·b + b + d`.
    pub fn params_per_instance(&self, model_dim: usize) -> usize {
        2 * model_dim * self.bottleneck + self.bottleneck + model_dim
    }
}

/// One adapter's weights as plain tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct Adapter {
    pub w_down: Tensor,
    pub b_down: Tensor,
    pub w_up: Tensor,
    pub b_up: Tensor,
}

impl Adapter {
    pub fn param_count(&self) -> usize {
        self.w_down.numel() + self.b_down.numel() + self.w_up.numel() + self.b_up.numel()
    }

    /// `σ(h·W_down + b_down)·W_up + b_up`, plus `h` when `residual` is set.
    pub fn forward(&self, h: &Tensor, act: Activation, residual: bool) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = AdapterVars {
            w_down: tape.constant(self.w_down.clone()),
            b_down: tape.constant(self.b_down.clone()),
            w_up: tape.constant(self.w_up.clone()),
            b_up: tape.constant(self.b_up.clone()),
        };
        let h = tape.constant(h.clone());
        let out = adapter_forward(&mut tape, vars, h, act, residual)?;
        Ok(tape.value(out).clone())
    }
}

#[derive(Clone, Copy)]
pub struct AdapterVars {
    pub w_down: Var,
    pub b_down: Var,
    pub w_up: Var,
    pub b_up: Var,
}

/// Records one adapter application on the tape.
pub fn adapter_forward(tape: &mut Tape, a: AdapterVars, h: Var, act: Activation, residual: bool) -> Result<Var> {
    let down = tape.matmul(h, a.w_down)?;
    let down = tape.add_bias(down, a.b_down)?;
    let z = tape.activate(down, act);
    let up = tape.matmul(z, a.w_up)?;
    let up = tape.add_bias(up, a.b_up)?;
    if residual {
        tape.add(h, up)
    } else {
        Ok(up)
    }
}

#[derive(Clone, Copy, Debug)]
enum Init {
    Uniform(f64),
    Zeros,
    Ones,
}

struct LeafSpec {
    path: String,
    shape: Vec<usize>,
    init: Init,
}

fn leaf(path: String, shape: &[usize], init: Init) -> LeafSpec {
    LeafSpec {
        path,
        shape: shape.to_vec(),
        init,
    }
}

fn linear(prefix: &str, w: &str, b: &str, fan_in: usize, fan_out: usize) -> [LeafSpec; 2] {
    [
        leaf(format!("{prefix}/{w}"), &[fan_in, fan_out], Init::Uniform(1.0 / (fan_in as f64).sqrt())),
        leaf(format!("{prefix}/{b}"), &[fan_out], Init::Zeros),
    ]
}

fn norm(prefix: &str, g: &str, b: &str, d: usize) -> [LeafSpec; 2] {
    [
        leaf(format!("{prefix}/{g}"), &[d], Init::Ones),
        leaf(format!("{prefix}/{b}"), &[d], Init::Zeros),
    ]
}

pub fn layer_prefix(layer: usize) -> String {
    format!("encoder/layer{layer:02}")
}

fn encoder_base_leaves(cfg: &ModelConfig) -> Vec<LeafSpec> {
    let d = cfg.model_dim;
    let ff = d * cfg.ff_mult;
    let mut out = Vec::new();
    out.extend(linear("encoder/frontend", "w", "b", cfg.input_dim, d));
    for l in 0..cfg.layers {
        let lp = layer_prefix(l);
        for ffm in ["ffm1", "ffm2"] {
            let p = format!("{lp}/{ffm}");
            out.extend(norm(&p, "ln_gain", "ln_bias", d));
            out.extend(linear(&p, "w1", "b1", d, ff));
            out.extend(linear(&p, "w2", "b2", ff, d));
        }
        if cfg.attention {
            let p = format!("{lp}/attn");
            out.extend(norm(&p, "ln_gain", "ln_bias", d));
            for (w, b) in [("wq", "bq"), ("wk", "bk"), ("wv", "bv"), ("wo", "bo")] {
                out.extend(linear(&p, w, b, d, d));
            }
        }
        if cfg.conv {
            let p = format!("{lp}/conv");
            out.extend(norm(&p, "ln_gain", "ln_bias", d));
            out.extend(linear(&p, "pw1_w", "pw1_b", d, d));
            out.extend(linear(&p, "dw_w", "dw_b", cfg.conv_kernel, d));
            out.extend(linear(&p, "pw2_w", "pw2_b", d, d));
        }
        out.extend(norm(&format!("{lp}/final_ln"), "gain", "bias", d));
    }
    out
}

fn adapter_leaves(cfg: &ModelConfig, spec: &AdapterSpec) -> Vec<LeafSpec> {
    let (d, b) = (cfg.model_dim, spec.bottleneck);
    let bound = 1.0 / (d as f64).sqrt();
    let up_init = if spec.internal_residual {
        Init::Zeros
    } else {
        Init::Uniform(bound)
    };
    let mut out = Vec::new();
    for l in 0..cfg.layers {
        for slot in spec.variant.slots() {
            let p = format!("{}/{slot}", layer_prefix(l));
            out.push(leaf(format!("{p}/w_down"), &[d, b], Init::Uniform(bound)));
            out.push(leaf(format!("{p}/b_down"), &[b], Init::Zeros));
            out.push(leaf(format!("{p}/w_up"), &[b, d], up_init));
            out.push(leaf(format!("{p}/b_up"), &[d], Init::Zeros));
        }
    }
    out
}

fn path_seed(seed: u64, path: &str) -> u64 {
    // FNV-1a, mixed with the run seed
    let mut h: u64 = 0xcbf29ce484222325;
    for b in path.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h ^ seed.wrapping_mul(0x9e3779b97f4a7c15)
}

fn materialize(tree: &mut ParameterTree, leaves: Vec<LeafSpec>, seed: u64) -> Result<()> {
    for spec in leaves {
        let value = match spec.init {
            Init::Zeros => Tensor::zeros(&spec.shape),
            Init::Ones => Tensor::filled(&spec.shape, 1.0),
            Init::Uniform(bound) => {
                let mut rng = ChaCha8Rng::seed_from_u64(path_seed(seed, &spec.path));
                Tensor::uniform(&spec.shape, bound, &mut rng)
            }
        };
        tree.insert(spec.path, value, false)?;
    }
    Ok(())
}

/// Executable encoder plus decoder head; parameters live in a [`ParameterTree`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub config: ModelConfig,
    pub adapter: Option<AdapterSpec>,
}

impl Model {
    pub fn new(config: ModelConfig, adapter: Option<AdapterSpec>) -> Result<Self> {
        config.validate()?;
        if let Some(spec) = &adapter {
            spec.validate(config.model_dim)?;
        }
        Ok(Self { config, adapter })
    }

    /// Encoder parameters only (plus adapters when `adapter` is set).
    pub fn build_encoder(config: ModelConfig, adapter: Option<AdapterSpec>, seed: u64) -> Result<(Self, ParameterTree)> {
        let model = Self::new(config, adapter)?;
        let mut tree = ParameterTree::new();
        materialize(&mut tree, encoder_base_leaves(&model.config), seed)?;
        if let Some(spec) = &model.adapter {
            materialize(&mut tree, adapter_leaves(&model.config, spec), seed)?;
        }
        Ok((model, tree))
    }

    /// Encoder, adapters and decoder head.
    pub fn build(config: ModelConfig, adapter: Option<AdapterSpec>, seed: u64) -> Result<(Self, ParameterTree)> {
        let (model, mut tree) = Self::build_encoder(config, adapter, seed)?;
        model.add_decoder(&mut tree, seed)?;
        Ok((model, tree))
    }

    pub fn add_decoder(&self, tree: &mut ParameterTree, seed: u64) -> Result<()> {
        let leaves = linear("decoder", "w", "b", self.config.model_dim, self.config.output_classes());
        materialize(tree, leaves.into_iter().collect(), seed)
    }

    pub fn add_ssl_head(&self, tree: &mut ParameterTree, codebook_size: usize, seed: u64) -> Result<()> {
        let leaves = linear("ssl_head", "w", "b", self.config.model_dim, codebook_size);
        materialize(tree, leaves.into_iter().collect(), seed)
    }

    /// Adds freshly initialized adapters to a tree that has none.
    pub fn insert_adapters(&mut self, tree: &mut ParameterTree, spec: AdapterSpec, seed: u64) -> Result<()> {
        spec.validate(self.config.model_dim)?;
        if self.adapter.is_some() || tree.has_adapters() {
            return Err(Error::InvalidAdapterSpec("tree already carries adapters".into()));
        }
        materialize(tree, adapter_leaves(&self.config, &spec), seed)?;
        self.adapter = Some(spec);
        Ok(())
    }

    /// Number of adapter instances the configured variant places.
    pub fn adapter_instances(&self) -> usize {
        self.adapter
            .map_or(0, |s| s.variant.per_layer() * self.config.layers)
    }

    /// Paths the model expects in a tree (excluding ssl head).
    pub fn expected_paths(&self) -> Vec<(String, Vec<usize>)> {
        let mut leaves = encoder_base_leaves(&self.config);
        if let Some(spec) = &self.adapter {
            leaves.extend(adapter_leaves(&self.config, spec));
        }
        leaves.extend(linear("decoder", "w", "b", self.config.model_dim, self.config.output_classes()));
        leaves.into_iter().map(|l| (l.path, l.shape)).collect()
    }

    fn linear(&self, tape: &mut Tape, bound: &Bound, x: Var, w: &str, b: &str) -> Result<Var> {
        let y = tape.matmul(x, bound.var(w)?)?;
        tape.add_bias(y, bound.var(b)?)
    }

    fn layernorm(&self, tape: &mut Tape, bound: &Bound, x: Var, g: &str, b: &str) -> Result<Var> {
        tape.layernorm(x, bound.var(g)?, bound.var(b)?, self.config.layernorm_eps)
    }

    fn ffm(&self, tape: &mut Tape, bound: &Bound, x: Var, p: &str) -> Result<Var> {
        let n = self.layernorm(tape, bound, x, &format!("{p}/ln_gain"), &format!("{p}/ln_bias"))?;
        let hdn = self.linear(tape, bound, n, &format!("{p}/w1"), &format!("{p}/b1"))?;
        let hdn = tape.swish(hdn);
        let out = self.linear(tape, bound, hdn, &format!("{p}/w2"), &format!("{p}/b2"))?;
        let half = tape.scale(out, 0.5);
        tape.add(x, half)
    }

    fn attention(&self, tape: &mut Tape, bound: &Bound, x: Var, p: &str) -> Result<Var> {
        let n = self.layernorm(tape, bound, x, &format!("{p}/ln_gain"), &format!("{p}/ln_bias"))?;
        let q = self.linear(tape, bound, n, &format!("{p}/wq"), &format!("{p}/bq"))?;
        let k = self.linear(tape, bound, n, &format!("{p}/wk"), &format!("{p}/bk"))?;
        let v = self.linear(tape, bound, n, &format!("{p}/wv"), &format!("{p}/bv"))?;
        let kt = tape.transpose(k)?;
        let scores = tape.matmul(q, kt)?;
        let scores = tape.scale(scores, 1.0 / (self.config.model_dim as f64).sqrt());
        let weights = tape.softmax_rows(scores);
        let ctx = tape.matmul(weights, v)?;
        let out = self.linear(tape, bound, ctx, &format!("{p}/wo"), &format!("{p}/bo"))?;
        tape.add(x, out)
    }

    fn convolution(&self, tape: &mut Tape, bound: &Bound, x: Var, p: &str) -> Result<Var> {
        let n = self.layernorm(tape, bound, x, &format!("{p}/ln_gain"), &format!("{p}/ln_bias"))?;
        let a = self.linear(tape, bound, n, &format!("{p}/pw1_w"), &format!("{p}/pw1_b"))?;
        let a = tape.swish(a);
        let c = tape.depthwise_conv1d(a, bound.var(&format!("{p}/dw_w"))?)?;
        let c = tape.add_bias(c, bound.var(&format!("{p}/dw_b"))?)?;
        let c = tape.swish(c);
        let out = self.linear(tape, bound, c, &format!("{p}/pw2_w"), &format!("{p}/pw2_b"))?;
        tape.add(x, out)
    }

    fn adapter_vars(&self, bound: &Bound, p: &str) -> Result<AdapterVars> {
        Ok(AdapterVars {
            w_down: bound.var(&format!("{p}/w_down"))?,
            b_down: bound.var(&format!("{p}/b_down"))?,
            w_up: bound.var(&format!("{p}/w_up"))?,
            b_up: bound.var(&format!("{p}/b_up"))?,
        })
    }

    /// Combines an FFM's input `x` and output `h` with the adapter at `slot`.
    ///
    /// Sequential: `f_A(h)`. Parallel: `h + σ(x·W_down + b_down)·W_up + b_up`;
    /// the module's own residual already carries `x`, so the branch never adds
    /// an internal skip.
    fn adapt_ffm(&self, tape: &mut Tape, bound: &Bound, spec: &AdapterSpec, x: Var, h: Var, p: &str) -> Result<Var> {
        let vars = self.adapter_vars(bound, p)?;
        if spec.variant.is_parallel() {
            let branch = adapter_forward(tape, vars, x, spec.nonlinearity, false)?;
            tape.add(h, branch)
        } else {
            adapter_forward(tape, vars, h, spec.nonlinearity, spec.internal_residual)
        }
    }

    fn layer(&self, tape: &mut Tape, bound: &Bound, x: Var, l: usize) -> Result<Var> {
        let lp = layer_prefix(l);
        let spec = self.adapter.as_ref();
        let mut h = self.ffm(tape, bound, x, &format!("{lp}/ffm1"))?;
        if let Some(s) = spec.filter(|s| s.variant.per_layer() == 2) {
            h = self.adapt_ffm(tape, bound, s, x, h, &format!("{lp}/adapter_begin"))?;
        }
        if self.config.attention {
            h = self.attention(tape, bound, h, &format!("{lp}/attn"))?;
        }
        if self.config.conv {
            h = self.convolution(tape, bound, h, &format!("{lp}/conv"))?;
        }
        let ffm2_in = h;
        let mut h = self.ffm(tape, bound, ffm2_in, &format!("{lp}/ffm2"))?;
        if let Some(s) = spec.filter(|s| s.variant != AdapterVariant::Separate) {
            h = self.adapt_ffm(tape, bound, s, ffm2_in, h, &format!("{lp}/adapter_end"))?;
        }
        let mut out = self.layernorm(tape, bound, h, &format!("{lp}/final_ln/gain"), &format!("{lp}/final_ln/bias"))?;
        if let Some(s) = spec.filter(|s| s.variant == AdapterVariant::Separate) {
            let vars = self.adapter_vars(bound, &format!("{lp}/adapter_between"))?;
            out = adapter_forward(tape, vars, out, s.nonlinearity, s.internal_residual)?;
        }
        Ok(out)
    }

    /// `[T, d_in]` features to `[T, d]` hidden states.
    pub fn encode(&self, tape: &mut Tape, bound: &Bound, features: Var) -> Result<Var> {
        let fv = tape.value(features);
        if fv.shape().len() != 2 || fv.shape()[1] != self.config.input_dim || fv.shape()[0] == 0 {
            return Err(Error::ShapeMismatch {
                op: "encode",
                left: fv.shape().to_vec(),
                right: vec![0, self.config.input_dim],
            });
        }
        let mut h = self.linear(tape, bound, features, "encoder/frontend/w", "encoder/frontend/b")?;
        for l in 0..self.config.layers {
            h = self.layer(tape, bound, h, l)?;
        }
        Ok(h)
    }

    /// `[T, d_in]` features to `[T, V+1]` frame logits.
    pub fn logits(&self, tape: &mut Tape, bound: &Bound, features: Var) -> Result<Var> {
        let h = self.encode(tape, bound, features)?;
        self.linear(tape, bound, h, "decoder/w", "decoder/b")
    }

    /// Forward pass without gradients.
    pub fn encode_value(&self, tree: &ParameterTree, features: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = bind_frozen(tree, &mut tape, |p| p.starts_with("encoder/"));
        let x = tape.constant(features.clone());
        let h = self.encode(&mut tape, &bound, x)?;
        Ok(tape.value(h).clone())
    }

    pub fn logits_value(&self, tree: &ParameterTree, features: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = bind_frozen(tree, &mut tape, |p| !p.starts_with("ssl_head/"));
        let x = tape.constant(features.clone());
        let l = self.logits(&mut tape, &bound, x)?;
        Ok(tape.value(l).clone())
    }

    /// Checks that every adapter path in `tree` matches this model's variant.
    pub fn check_tree(&self, tree: &ParameterTree) -> Result<()> {
        for (path, shape) in self.expected_paths() {
            let t = tree.tensor(&path)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::ShapeMismatch {
                    op: "check_tree",
                    left: t.shape().to_vec(),
                    right: shape,
                });
            }
        }
        let expected: std::collections::BTreeSet<String> =
            self.expected_paths().into_iter().map(|(p, _)| p).collect();
        if let Some(extra) = tree.paths().find(|p| is_adapter_path(p) && !expected.contains(*p)) {
            return Err(Error::UnknownPath(extra.clone()));
        }
        Ok(())
    }
}

/// Binds the selected leaves as constants.
fn bind_frozen(tree: &ParameterTree, tape: &mut Tape, keep: impl Fn(&str) -> bool) -> Bound {
    let mut sub = ParameterTree::new();
    for (p, l) in tree.iter().filter(|(p, _)| keep(p)) {
        sub.insert(p.clone(), l.value.clone(), true).expect("unique paths");
    }
    sub.bind(tape)
}

/// Per-frame argmax, collapse adjacent repeats, drop blanks.
pub fn decode_greedy(logits: &Tensor, blank: usize) -> Vec<usize> {
    let frames: Vec<usize> = (0..logits.rows())
        .map(|r| {
            let row = logits.row(r);
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect();
    collapse(&frames, blank)
}

/// Collapse rule applied to a frame label sequence.
pub fn collapse(frames: &[usize], blank: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &f in frames {
        if Some(f) != prev && f != blank {
            out.push(f);
        }
        prev = Some(f);
    }
    out
}
