//! Synthetic two-domain sequence corpora and the masked random-projection
//! SSL task.
//!
//! Each utterance is a run of frames. Frame labels alternate a blank frame
//! with a token held for a few frames, so the token sequence is exactly the
//! greedy collapse of the frame labels. Features are the (transformed) mean
//! of the frame's class plus Gaussian noise.

use std::path::Path;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::binfmt::{Reader, Writer};
use crate::error::{Error, Result};
use crate::model::collapse;
use crate::tensor::Tensor;

/// Rotation, bias and token-prior shift separating a target domain from the source.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainTransform {
    /// Givens rotation angle per plane as a fraction of a right angle.
    pub rotation: f64,
    pub bias_scale: f64,
    /// Log-odds tilt of the token prior across the vocabulary.
    pub prior_shift: f64,
    pub seed: u64,
}

impl DomainTransform {
    pub fn identity() -> Self {
        Self {
            rotation: 0.0,
            bias_scale: 0.0,
            prior_shift: 0.0,
            seed: 0,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.rotation == 0.0 && self.bias_scale == 0.0
    }

    /// Orthogonal `[d, d]` matrix built from Givens rotations on a random
    /// pairing of axes.
    pub fn rotation_matrix(&self, dim: usize) -> Tensor {
        let mut m = vec![0.0; dim * dim];
        for i in 0..dim {
            m[i * dim + i] = 1.0;
        }
        if self.rotation != 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
            let mut axes: Vec<usize> = (0..dim).collect();
            axes.shuffle(&mut rng);
            let angle = self.rotation * std::f64::consts::FRAC_PI_2;
            let (s, c) = angle.sin_cos();
            for pair in axes.chunks_exact(2) {
                let (i, j) = (pair[0], pair[1]);
                m[i * dim + i] = c;
                m[i * dim + j] = -s;
                m[j * dim + i] = s;
                m[j * dim + j] = c;
            }
        }
        Tensor::new(vec![dim, dim], m).expect("square")
    }

    pub fn bias(&self, dim: usize) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x5eed_b1a5);
        (0..dim)
            .map(|_| self.bias_scale * rng.sample::<f64, _>(StandardNormal))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub domain_id: u32,
    pub vocab_size: usize,
    pub input_dim: usize,
    pub min_frames: usize,
    pub max_frames: usize,
    /// Inclusive range of frames a token is held for.
    pub token_frames: (usize, usize),
    pub mean_scale: f64,
    pub noise_scale: f64,
    /// Seed for the class means; shared by source and target.
    pub means_seed: u64,
    pub transform: DomainTransform,
}

impl DomainSpec {
    pub fn source() -> Self {
        Self {
            domain_id: 0,
            vocab_size: 12,
            input_dim: 16,
            min_frames: 8,
            max_frames: 32,
            token_frames: (2, 3),
            mean_scale: 1.0,
            noise_scale: 0.5,
            means_seed: 7,
            transform: DomainTransform::identity(),
        }
    }

    /// Default target domain: source means rotated, shifted, with a tilted prior.
    pub fn target() -> Self {
        Self {
            domain_id: 1,
            transform: DomainTransform {
                rotation: 0.5,
                bias_scale: 0.3,
                prior_shift: 1.5,
                seed: 11,
            },
            ..Self::source()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidDataSpec(m.to_string()));
        if self.vocab_size < 2 {
            return bad("vocab_size must be >= 2");
        }
        if self.input_dim < 1 {
            return bad("input_dim must be >= 1");
        }
        if self.min_frames < 2 || self.min_frames > self.max_frames {
            return bad("need 2 <= min_frames <= max_frames");
        }
        if self.token_frames.0 < 1 || self.token_frames.0 > self.token_frames.1 {
            return bad("need 1 <= token_frames.0 <= token_frames.1");
        }
        if self.noise_scale < 0.0 || self.mean_scale <= 0.0 {
            return bad("noise_scale must be >= 0 and mean_scale > 0");
        }
        Ok(())
    }

    /// Blank uses index `vocab_size`.
    pub fn blank(&self) -> usize {
        self.vocab_size
    }

    /// Untransformed class means, `[V + 1, d_in]`.
    pub fn class_means(&self) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(self.means_seed);
        let classes = self.vocab_size + 1;
        let data = (0..classes * self.input_dim)
            .map(|_| self.mean_scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Tensor::new(vec![classes, self.input_dim], data).expect("shape")
    }

    /// Class means after the domain transform.
    pub fn domain_means(&self) -> Tensor {
        let means = self.class_means();
        if self.transform.is_identity() {
            return means;
        }
        let d = self.input_dim;
        let rot = self.transform.rotation_matrix(d);
        let bias = self.transform.bias(d);
        let mut out = vec![0.0; means.numel()];
        for r in 0..means.rows() {
            let m = means.row(r);
            for i in 0..d {
                let mut acc = bias[i];
                for j in 0..d {
                    acc += rot.get2(i, j) * m[j];
                }
                out[r * d + i] = acc;
            }
        }
        Tensor::new(means.shape().to_vec(), out).expect("shape")
    }

    pub fn token_prior(&self) -> Vec<f64> {
        let v = self.vocab_size as f64;
        (0..self.vocab_size)
            .map(|i| (self.transform.prior_shift * (2.0 * i as f64 / (v - 1.0) - 1.0)).exp())
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Example {
    /// `[T, d_in]`.
    pub features: Tensor,
    /// Per-frame class, blank included.
    pub frame_labels: Vec<usize>,
    pub tokens: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DomainDataset {
    pub spec: DomainSpec,
    pub seed: u64,
    pub examples: Vec<Example>,
}

impl DomainDataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn domain_id(&self) -> u32 {
        self.spec.domain_id
    }
}

/// Deterministic corpus of `n` utterances.
pub fn generate_domain(spec: &DomainSpec, n: usize, seed: u64) -> Result<DomainDataset> {
    spec.validate()?;
    if n < 1 {
        return Err(Error::InvalidDataSpec("need at least one example".into()));
    }
    let means = spec.domain_means();
    let prior = WeightedIndex::new(spec.token_prior()).map_err(|e| Error::InvalidDataSpec(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((spec.domain_id as u64) << 32));
    let d = spec.input_dim;
    let blank = spec.blank();
    let mut examples = Vec::with_capacity(n);
    for _ in 0..n {
        let t_len = rng.gen_range(spec.min_frames..=spec.max_frames);
        let mut labels = vec![blank];
        while labels.len() < t_len {
            let tok = prior.sample(&mut rng);
            let hold = rng.gen_range(spec.token_frames.0..=spec.token_frames.1);
            labels.extend(std::iter::repeat_n(tok, hold));
            labels.push(blank);
        }
        labels.truncate(t_len);
        let mut feats = Vec::with_capacity(t_len * d);
        for &l in &labels {
            for &m in means.row(l) {
                let noise = if spec.noise_scale > 0.0 {
                    spec.noise_scale * rng.sample::<f64, _>(StandardNormal)
                } else {
                    0.0
                };
                feats.push(m + noise);
            }
        }
        let tokens = collapse(&labels, blank);
        examples.push(Example {
            features: Tensor::new(vec![t_len, d], feats)?,
            frame_labels: labels,
            tokens,
        });
    }
    Ok(DomainDataset {
        spec: spec.clone(),
        seed,
        examples,
    })
}

const FIXTURE_MAGIC: &[u8; 8] = b"FADADATA";
const FIXTURE_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct FixtureHeader {
    format_version: u32,
    spec: DomainSpec,
    seed: u64,
    examples: u64,
}

/// Header JSON, then per example: features tensor, frame labels, tokens.
pub fn encode_dataset(ds: &DomainDataset) -> Result<Vec<u8>> {
    let mut w = Writer::new();
    w.bytes(FIXTURE_MAGIC);
    w.u32(FIXTURE_VERSION);
    let header = FixtureHeader {
        format_version: FIXTURE_VERSION,
        spec: ds.spec.clone(),
        seed: ds.seed,
        examples: ds.examples.len() as u64,
    };
    w.str(&serde_json::to_string(&header)?);
    for ex in &ds.examples {
        w.tensor(&ex.features);
        for seq in [&ex.frame_labels, &ex.tokens] {
            w.u32(seq.len() as u32);
            for &v in seq.iter() {
                w.u32(v as u32);
            }
        }
    }
    Ok(w.finish())
}

pub fn decode_dataset(bytes: &[u8]) -> Result<DomainDataset> {
    let mut r = Reader::new(bytes);
    if r.take(8)? != FIXTURE_MAGIC {
        return Err(Error::Format("not a dataset fixture".into()));
    }
    let version = r.u32()?;
    if version != FIXTURE_VERSION {
        return Err(Error::Format(format!("unsupported fixture version {version}")));
    }
    let header: FixtureHeader = serde_json::from_str(&r.str()?)?;
    let mut examples = Vec::new();
    for _ in 0..header.examples {
        let features = r.tensor()?;
        let mut seqs = Vec::with_capacity(2);
        for _ in 0..2 {
            let n = r.u32()? as usize;
            seqs.push((0..n).map(|_| r.u32().map(|v| v as usize)).collect::<Result<Vec<_>>>()?);
        }
        let tokens = seqs.pop().expect("two");
        let frame_labels = seqs.pop().expect("two");
        examples.push(Example {
            features,
            frame_labels,
            tokens,
        });
    }
    r.expect_end()?;
    Ok(DomainDataset {
        spec: header.spec,
        seed: header.seed,
        examples,
    })
}

pub fn save_dataset(ds: &DomainDataset, path: &Path) -> Result<()> {
    std::fs::write(path, encode_dataset(ds)?)?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<DomainDataset> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    decode_dataset(&std::fs::read(path)?)
}

/// Frozen projection and codebook mapping frames to discrete labels.
///
/// Never stored in a [`ParameterTree`](crate::tree::ParameterTree), so it
/// cannot be trained.
#[derive(Clone, Debug, PartialEq)]
pub struct RandomProjectionQuantizer {
    projection: Tensor,
    codebook: Tensor,
}

impl RandomProjectionQuantizer {
    pub fn new(input_dim: usize, code_dim: usize, codebook_size: usize, seed: u64) -> Result<Self> {
        if input_dim == 0 || code_dim == 0 || codebook_size == 0 {
            return Err(Error::InvalidDataSpec("quantizer dimensions must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (input_dim as f64).sqrt();
        let proj = (0..input_dim * code_dim)
            .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let mut book = Vec::with_capacity(codebook_size * code_dim);
        for _ in 0..codebook_size {
            let v: Vec<f64> = (0..code_dim).map(|_| rng.sample(StandardNormal)).collect();
            book.extend(normalized(&v));
        }
        Ok(Self {
            projection: Tensor::new(vec![input_dim, code_dim], proj)?,
            codebook: Tensor::new(vec![codebook_size, code_dim], book)?,
        })
    }

    pub fn projection(&self) -> &Tensor {
        &self.projection
    }

    pub fn codebook(&self) -> &Tensor {
        &self.codebook
    }

    pub fn codebook_size(&self) -> usize {
        self.codebook.shape()[0]
    }

    /// Projects `x` and L2-normalizes the result.
    pub fn project(&self, x: &[f64]) -> Vec<f64> {
        let (din, dq) = (self.projection.shape()[0], self.projection.shape()[1]);
        let mut p = vec![0.0; dq];
        for i in 0..din {
            for (j, pj) in p.iter_mut().enumerate() {
                *pj += x[i] * self.projection.get2(i, j);
            }
        }
        normalized(&p)
    }

    /// Nearest codebook entry; ties go to the lowest index.
    pub fn code(&self, x: &[f64]) -> usize {
        self.nearest(&self.project(x))
    }

    pub fn nearest(&self, p: &[f64]) -> usize {
        let mut best = (0, f64::INFINITY);
        for c in 0..self.codebook_size() {
            let dist: f64 = self.codebook.row(c).iter().zip(p).map(|(a, b)| (a - b) * (a - b)).sum();
            if dist < best.1 {
                best = (c, dist);
            }
        }
        best.0
    }

    pub fn codes(&self, features: &Tensor) -> Vec<usize> {
        (0..features.rows()).map(|r| self.code(features.row(r))).collect()
    }
}

fn normalized(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 {
        v.to_vec()
    } else {
        v.iter().map(|x| x / n).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskConfig {
    pub mask_prob: f64,
    pub span_len: usize,
    /// Constant written into masked frames.
    pub mask_value: f64,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self {
            mask_prob: 0.1,
            span_len: 3,
            mask_value: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SslBatch {
    pub features: Tensor,
    pub mask: Vec<bool>,
    /// Quantizer code of the unmasked frame, present exactly where `mask` is set.
    pub labels: Vec<Option<usize>>,
}

impl SslBatch {
    pub fn masked_frames(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Labels with a placeholder at unmasked frames, for the masked loss.
    pub fn dense_labels(&self) -> Vec<usize> {
        self.labels.iter().map(|l| l.unwrap_or(0)).collect()
    }
}

/// Masks spans of `span_len` frames started by Bernoulli(`mask_prob`) draws.
/// Resamples until at least one frame is masked.
pub fn make_ssl_batch<R: Rng + ?Sized>(
    features: &Tensor,
    cfg: &MaskConfig,
    quantizer: &RandomProjectionQuantizer,
    rng: &mut R,
) -> Result<SslBatch> {
    if !(cfg.mask_prob > 0.0 && cfg.mask_prob <= 1.0) {
        return Err(Error::InvalidMasking(format!("mask_prob {} outside (0, 1]", cfg.mask_prob)));
    }
    if cfg.span_len < 1 {
        return Err(Error::InvalidMasking("span_len must be >= 1".into()));
    }
    let t_len = features.rows();
    if t_len < cfg.span_len {
        return Err(Error::InvalidMasking(format!(
            "sequence of {t_len} frames shorter than span {}",
            cfg.span_len
        )));
    }
    let mut mask = vec![false; t_len];
    while !mask.iter().any(|&m| m) {
        for t in 0..t_len {
            if rng.gen_bool(cfg.mask_prob) {
                for m in mask.iter_mut().skip(t).take(cfg.span_len) {
                    *m = true;
                }
            }
        }
    }
    let codes = quantizer.codes(features);
    let d = features.last_dim();
    let mut masked = features.clone();
    let data = masked.data_mut();
    let mut labels = Vec::with_capacity(t_len);
    for t in 0..t_len {
        if mask[t] {
            data[t * d..(t + 1) * d].iter_mut().for_each(|v| *v = cfg.mask_value);
            labels.push(Some(codes[t]));
        } else {
            labels.push(None);
        }
    }
    Ok(SslBatch {
        features: masked,
        mask,
        labels,
    })
}
