//! Shared-parameter transformer encoder forward pass with per-head attention
//! span predication, stable masked softmax, layer normalization, and
//! early-exit off-ramp classifiers.
//!
//! One weight set is reused by every layer. Matrix products run on the
//! quantized PU datapath ([`crate::numerics::matmul_tiled`]); softmax, layer
//! norm and the off-ramp entropies run in double precision (the SFU path),
//! with an optional 16-bit fixed-point emulation mode.

use alloc::{format, vec, vec::Vec};
use core::ops::AddAssign;

use crate::error::{CoreError, Result};
use crate::numerics::{exp2i, matmul_tiled, FloatFormat, QuantTensor};
use crate::sparse::{decode_bitmask, encode_bitmask, magnitude_prune, BitmaskTensor};

/// Encoder dimensions and numeric options.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub hidden_dim: usize,
    pub embed_dim: usize,
    pub ffn_dim: usize,
    pub seq_len: usize,
    pub num_classes: usize,
    pub vocab_size: usize,
    /// Exponent width of the 8-bit activation/weight format.
    pub exponent_bits: u8,
    pub layer_norm_eps: f64,
    /// `None`: binary span window. `Some(width)`: soft ramp of that width.
    pub span_ramp: Option<f64>,
    /// Emulate the 16-bit fixed-point SFU instead of double precision.
    pub sfu_fixed_point: bool,
}

impl EncoderConfig {
    /// Desk-scale configuration used throughout the tests.
    pub fn toy() -> Self {
        Self {
            num_layers: 4,
            num_heads: 2,
            hidden_dim: 32,
            embed_dim: 16,
            ffn_dim: 64,
            seq_len: 16,
            num_classes: 2,
            vocab_size: 100,
            exponent_bits: FloatFormat::DEFAULT_EXPONENT_BITS,
            layer_norm_eps: 1e-5,
            span_ramp: None,
            sfu_fixed_point: false,
        }
    }

    /// The full-scale shared-parameter encoder dimensions.
    pub fn albert_base() -> Self {
        Self {
            num_layers: 12,
            num_heads: 12,
            hidden_dim: 768,
            embed_dim: 128,
            ffn_dim: 3072,
            seq_len: 128,
            num_classes: 3,
            vocab_size: 30000,
            exponent_bits: FloatFormat::DEFAULT_EXPONENT_BITS,
            layer_norm_eps: 1e-5,
            span_ramp: None,
            sfu_fixed_point: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0
            || self.num_heads == 0
            || !self.hidden_dim.is_multiple_of(self.num_heads)
        {
            return Err(CoreError::InvalidFormat(format!(
                "hidden_dim {} must be a nonzero multiple of num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        if self.seq_len == 0 {
            return Err(CoreError::InvalidFormat("seq_len must be >= 1".into()));
        }
        if self.num_layers == 0 || self.num_classes < 2 || self.vocab_size == 0 {
            return Err(CoreError::InvalidFormat(
                "num_layers, num_classes and vocab_size must be positive".into(),
            ));
        }
        FloatFormat::new(self.exponent_bits, 0)?;
        Ok(())
    }

    #[inline]
    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }
}

/// Per-head learned attention spans; a head with span 0 is fully disabled.
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AttentionSpans {
    spans: Vec<usize>,
}

impl AttentionSpans {
    pub fn new(spans: Vec<usize>, seq_len: usize) -> Result<Self> {
        if let Some(&bad) = spans.iter().find(|&&s| s > seq_len) {
            return Err(CoreError::InvalidInput(format!(
                "span {bad} exceeds seq_len {seq_len}"
            )));
        }
        Ok(Self { spans })
    }

    pub fn full(num_heads: usize, seq_len: usize) -> Self {
        Self {
            spans: vec![seq_len; num_heads],
        }
    }

    #[inline]
    pub fn spans(&self) -> &[usize] {
        &self.spans
    }

    #[inline]
    pub fn num_heads(&self) -> usize {
        self.spans.len()
    }

    pub fn active_heads(&self) -> usize {
        self.spans.iter().filter(|&&s| s > 0).count()
    }

    /// Learned spans of the twelve heads on the four evaluation tasks
    /// (sequence length 128).
    pub fn mnli() -> Self {
        Self {
            spans: vec![20, 0, 0, 0, 0, 0, 36, 81, 0, 0, 0, 10],
        }
    }

    pub fn qqp() -> Self {
        Self {
            spans: vec![16, 0, 0, 0, 0, 0, 40, 75, 0, 0, 0, 2],
        }
    }

    pub fn sst2() -> Self {
        Self {
            spans: vec![31, 0, 0, 0, 0, 101, 14, 5, 0, 36, 0, 0],
        }
    }

    pub fn qnli() -> Self {
        Self {
            spans: vec![39, 0, 0, 0, 0, 105, 22, 19, 0, 51, 0, 0],
        }
    }
}

/// Learnable scale and shift of one normalization site.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LayerNormParams {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

impl LayerNormParams {
    pub fn identity(dim: usize) -> Self {
        Self {
            gamma: vec![1.0; dim],
            beta: vec![0.0; dim],
        }
    }
}

/// Shared encoder weights, sparse embedding table, norm parameters, per-layer
/// off-ramps and the learned spans.
#[derive(Debug, Clone)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EncoderBundle {
    pub config: EncoderConfig,
    /// `[vocab, embed]`, bitmask-encoded.
    pub embedding: BitmaskTensor,
    /// `[embed, hidden]` factorized projection.
    pub embed_proj: QuantTensor,
    /// `[hidden, hidden]` query/key/value/output projections.
    pub wq: QuantTensor,
    pub wk: QuantTensor,
    pub wv: QuantTensor,
    pub wo: QuantTensor,
    /// `[hidden, ffn]` and `[ffn, hidden]`.
    pub w_ffn1: QuantTensor,
    pub w_ffn2: QuantTensor,
    pub ln_attn: LayerNormParams,
    pub ln_ffn: LayerNormParams,
    /// One `[hidden, num_classes]` classifier per layer.
    pub offramps: Vec<QuantTensor>,
    pub spans: AttentionSpans,
}

impl EncoderBundle {
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let c = &self.config;
        let check = |t: &QuantTensor, shape: &[usize], name: &str| -> Result<()> {
            if t.shape() != shape {
                return Err(CoreError::ShapeMismatch(format!(
                    "{name}: expected {shape:?}, got {:?}",
                    t.shape()
                )));
            }
            Ok(())
        };
        if self.embedding.shape() != [c.vocab_size, c.embed_dim] {
            return Err(CoreError::ShapeMismatch(format!(
                "embedding: expected {:?}, got {:?}",
                [c.vocab_size, c.embed_dim],
                self.embedding.shape()
            )));
        }
        check(&self.embed_proj, &[c.embed_dim, c.hidden_dim], "embed_proj")?;
        for (t, name) in [
            (&self.wq, "wq"),
            (&self.wk, "wk"),
            (&self.wv, "wv"),
            (&self.wo, "wo"),
        ] {
            check(t, &[c.hidden_dim, c.hidden_dim], name)?;
        }
        check(&self.w_ffn1, &[c.hidden_dim, c.ffn_dim], "w_ffn1")?;
        check(&self.w_ffn2, &[c.ffn_dim, c.hidden_dim], "w_ffn2")?;
        if self.offramps.len() != c.num_layers {
            return Err(CoreError::ShapeMismatch(format!(
                "expected {} off-ramps, got {}",
                c.num_layers,
                self.offramps.len()
            )));
        }
        for (l, t) in self.offramps.iter().enumerate() {
            check(t, &[c.hidden_dim, c.num_classes], &format!("offramp[{l}]"))?;
        }
        if self.spans.num_heads() != c.num_heads {
            return Err(CoreError::ShapeMismatch(format!(
                "expected {} spans, got {}",
                c.num_heads,
                self.spans.num_heads()
            )));
        }
        if self.ln_attn.gamma.len() != c.hidden_dim
            || self.ln_attn.beta.len() != c.hidden_dim
            || self.ln_ffn.gamma.len() != c.hidden_dim
            || self.ln_ffn.beta.len() != c.hidden_dim
        {
            return Err(CoreError::ShapeMismatch(
                "layer-norm parameter length != hidden_dim".into(),
            ));
        }
        Ok(())
    }

    /// Seeded random bundle for desk-scale experiments. The embedding table
    /// is magnitude-pruned to `embedding_density`; off-ramp gains grow with
    /// depth so the off-ramp entropy decays across layers.
    pub fn synthetic(
        cfg: &EncoderConfig,
        spans: AttentionSpans,
        embedding_density: f64,
        seed: u64,
    ) -> Result<Self> {
        Self::synthetic_with_gain(cfg, spans, embedding_density, 1.0, seed)
    }

    /// [`EncoderBundle::synthetic`] with an explicit off-ramp gain; the
    /// layer-`l` off-ramp is scaled by `gain * l`.
    pub fn synthetic_with_gain(
        cfg: &EncoderConfig,
        spans: AttentionSpans,
        embedding_density: f64,
        offramp_gain: f64,
        seed: u64,
    ) -> Result<Self> {
        use rand::{Rng, SeedableRng};
        cfg.validate()?;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let ebits = cfg.exponent_bits;
        let uniform = |n: usize, scale: f64, rng: &mut rand_chacha::ChaCha8Rng| -> Vec<f64> {
            (0..n).map(|_| rng.gen_range(-scale..scale)).collect()
        };
        let h = cfg.hidden_dim;
        let inv_sqrt_h = 1.0 / libm::sqrt(h as f64);
        let quant = |vals: &[f64], shape: Vec<usize>| QuantTensor::quantize_fit(vals, shape, ebits);

        let embed_vals = uniform(cfg.vocab_size * cfg.embed_dim, 1.0, &mut rng);
        let embed_pruned = magnitude_prune(&embed_vals, embedding_density)?;
        let embedding = encode_bitmask(&quant(&embed_pruned, vec![cfg.vocab_size, cfg.embed_dim])?);

        let embed_proj = quant(
            &uniform(
                cfg.embed_dim * h,
                1.0 / libm::sqrt(cfg.embed_dim as f64),
                &mut rng,
            ),
            vec![cfg.embed_dim, h],
        )?;
        let proj = |rng: &mut rand_chacha::ChaCha8Rng| -> Result<QuantTensor> {
            quant(&uniform(h * h, inv_sqrt_h, rng), vec![h, h])
        };
        let wq = proj(&mut rng)?;
        let wk = proj(&mut rng)?;
        let wv = proj(&mut rng)?;
        let wo = proj(&mut rng)?;
        let w_ffn1 = quant(
            &uniform(h * cfg.ffn_dim, inv_sqrt_h, &mut rng),
            vec![h, cfg.ffn_dim],
        )?;
        let w_ffn2 = quant(
            &uniform(
                cfg.ffn_dim * h,
                1.0 / libm::sqrt(cfg.ffn_dim as f64),
                &mut rng,
            ),
            vec![cfg.ffn_dim, h],
        )?;

        let ln = |rng: &mut rand_chacha::ChaCha8Rng| LayerNormParams {
            gamma: (0..h).map(|_| rng.gen_range(0.9..1.1)).collect(),
            beta: (0..h).map(|_| rng.gen_range(-0.05..0.05)).collect(),
        };
        let ln_attn = ln(&mut rng);
        let ln_ffn = ln(&mut rng);

        let offramps = (1..=cfg.num_layers)
            .map(|l| {
                let scale = offramp_gain * l as f64 * inv_sqrt_h;
                quant(
                    &uniform(h * cfg.num_classes, scale, &mut rng),
                    vec![h, cfg.num_classes],
                )
            })
            .collect::<Result<Vec<_>>>()?;

        let bundle = Self {
            config: cfg.clone(),
            embedding,
            embed_proj,
            wq,
            wk,
            wv,
            wo,
            w_ffn1,
            w_ffn2,
            ln_attn,
            ln_ffn,
            offramps,
            spans,
        };
        bundle.validate()?;
        Ok(bundle)
    }
}

/// Shape-derived operation counts of one pipeline stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LayerCounts {
    /// Padded MAC volume of every matmul in the stage.
    pub macs: u64,
    pub vmac_invocations: u64,
    pub vmacs_skipped: u64,
    pub softmax_rows: u64,
    pub softmax_elems: u64,
    pub layernorm_rows: u64,
    pub layernorm_elems: u64,
    pub elementwise_ops: u64,
    pub entropy_evals: u64,
    pub entropy_elems: u64,
    pub lut_lookups: u64,
}

impl LayerCounts {
    fn absorb(&mut self, stats: crate::numerics::MatmulStats) {
        self.macs += stats.macs;
        self.vmac_invocations += stats.vmac_invocations;
        self.vmacs_skipped += stats.vmacs_skipped;
    }
}

impl AddAssign for LayerCounts {
    fn add_assign(&mut self, rhs: Self) {
        self.macs += rhs.macs;
        self.vmac_invocations += rhs.vmac_invocations;
        self.vmacs_skipped += rhs.vmacs_skipped;
        self.softmax_rows += rhs.softmax_rows;
        self.softmax_elems += rhs.softmax_elems;
        self.layernorm_rows += rhs.layernorm_rows;
        self.layernorm_elems += rhs.layernorm_elems;
        self.elementwise_ops += rhs.elementwise_ops;
        self.entropy_evals += rhs.entropy_evals;
        self.entropy_elems += rhs.entropy_elems;
        self.lut_lookups += rhs.lut_lookups;
    }
}

/// Per-stage operation counts of a forward pass. Counts are pure functions
/// of shapes, spans and the tile size, never of operand values.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct OpTrace {
    pub tile_n: usize,
    pub embedding: LayerCounts,
    pub layers: Vec<LayerCounts>,
    pub heads_skipped: u64,
}

impl OpTrace {
    pub fn new(tile_n: usize) -> Self {
        Self {
            tile_n,
            ..Self::default()
        }
    }

    pub fn totals(&self) -> LayerCounts {
        let mut total = self.embedding;
        for layer in &self.layers {
            total += *layer;
        }
        total
    }

    /// Clock cycles of the whole trace on an `n`-wide datapath: the PU
    /// finishes `n^2` MACs per cycle; the SFU streams softmax in three tiled
    /// passes, layer norm in two, entropy in three, element-wise ops at `n`
    /// per cycle and LUT lookups in one.
    pub fn cycle_count(&self, n: usize) -> u64 {
        assert!(n >= 1);
        let c = self.totals();
        let nn = n as u64;
        let row_passes = |rows: u64, elems: u64, passes: u64| {
            if rows == 0 {
                0
            } else {
                rows * passes * (elems / rows).div_ceil(nn)
            }
        };
        c.macs.div_ceil(nn * nn)
            + row_passes(c.softmax_rows, c.softmax_elems, 3)
            + row_passes(c.layernorm_rows, c.layernorm_elems, 2)
            + row_passes(c.entropy_evals, c.entropy_elems, 3)
            + c.elementwise_ops.div_ceil(nn)
            + c.lut_lookups
    }
}

/// Round to the 16-bit fixed-point SFU grid (Q6.10).
#[inline]
fn sfu_round(v: f64) -> f64 {
    libm::round(v * 1024.0) * exp2i(-10)
}

/// Per-row masked softmax in three tiled passes (max, log-sum-exp,
/// normalize-and-mask); no division is performed and the max shift prevents
/// exponential overflow by construction.
pub fn masked_softmax(
    scores: &[f64],
    mask: &[f64],
    rows: usize,
    cols: usize,
    tile_n: usize,
) -> Vec<f64> {
    assert_eq!(scores.len(), rows * cols);
    assert_eq!(mask.len(), rows * cols);
    assert!(tile_n >= 1);
    let mut out = vec![0.0f64; rows * cols];
    for i in 0..rows {
        let row = &scores[i * cols..(i + 1) * cols];
        let mrow = &mask[i * cols..(i + 1) * cols];

        let mut max = f64::NEG_INFINITY;
        for tile in row.chunks(tile_n) {
            for &v in tile {
                if v > max {
                    max = v;
                }
            }
        }

        let mut sum_exp = 0.0f64;
        for tile in row.chunks(tile_n) {
            let mut tile_sum = 0.0;
            for &v in tile {
                tile_sum += libm::exp(v - max);
            }
            sum_exp += tile_sum;
        }
        let log_sum_exp = libm::log(sum_exp);

        let orow = &mut out[i * cols..(i + 1) * cols];
        for t in 0..cols.div_ceil(tile_n) {
            let lo = t * tile_n;
            let hi = (lo + tile_n).min(cols);
            for j in lo..hi {
                orow[j] = libm::exp(row[j] - max - log_sum_exp) * mrow[j];
            }
        }
    }
    out
}

/// Normalize one vector: running-average mean, `Var = E[X^2] - E[X]^2`, then
/// scale and shift.
pub fn layer_norm(x: &[f64], gamma: &[f64], beta: &[f64], eps: f64) -> Vec<f64> {
    assert_eq!(x.len(), gamma.len());
    assert_eq!(x.len(), beta.len());
    assert!(eps > 0.0);
    let mut mean = 0.0f64;
    let mut mean_sq = 0.0f64;
    for (k, &v) in x.iter().enumerate() {
        let n = (k + 1) as f64;
        mean += (v - mean) / n;
        mean_sq += (v * v - mean_sq) / n;
    }
    let var = mean_sq - mean * mean;
    let inv = 1.0 / libm::sqrt(var + eps);
    x.iter()
        .zip(gamma.iter().zip(beta))
        .map(|(&v, (&g, &b))| (v - mean) * inv * g + b)
        .collect()
}

/// Span window over key positions: position `j` is masked for query `i` when
/// `|i - j|` exceeds the span. With `ramp`, the mask falls off linearly over
/// that width instead of cutting hard.
pub fn span_mask(seq_len: usize, span: usize, ramp: Option<f64>) -> Vec<f64> {
    let mut mask = vec![0.0f64; seq_len * seq_len];
    for i in 0..seq_len {
        for j in 0..seq_len {
            let dist = i.abs_diff(j) as f64;
            mask[i * seq_len + j] = match ramp {
                None => {
                    if dist <= span as f64 {
                        1.0
                    } else {
                        0.0
                    }
                }
                Some(r) => ((span as f64 + r - dist) / r).clamp(0.0, 1.0),
            };
        }
    }
    mask
}

fn gelu(x: f64) -> f64 {
    const SQRT_2_OVER_PI: f64 = 0.7978845608028654;
    0.5 * x * (1.0 + libm::tanh(SQRT_2_OVER_PI * (x + 0.044715 * x * x * x)))
}

struct HeadWeights {
    wq: QuantTensor,
    wk: QuantTensor,
    wv: QuantTensor,
}

/// One attention head. A zero span cancels the head outright: the context is
/// written as zeros and no operation is charged beyond the skip itself.
pub fn attention_head(
    hidden: &QuantTensor,
    wq: &QuantTensor,
    wk: &QuantTensor,
    wv: &QuantTensor,
    span: usize,
    cfg: &EncoderConfig,
    tile_n: usize,
) -> Result<(QuantTensor, LayerCounts)> {
    let head_dim = wq.shape()[1];
    let seq = hidden.shape()[0];
    if span > cfg.seq_len {
        return Err(CoreError::InvalidInput(format!(
            "span {span} exceeds seq_len {}",
            cfg.seq_len
        )));
    }
    let mut counts = LayerCounts::default();
    if span == 0 {
        let fmt = FloatFormat::new(cfg.exponent_bits, 0)?;
        return Ok((QuantTensor::zeros(vec![seq, head_dim], fmt), counts));
    }

    let (q, s) = matmul_tiled(hidden, wq, tile_n)?;
    counts.absorb(s);
    let (k, s) = matmul_tiled(hidden, wk, tile_n)?;
    counts.absorb(s);
    let (v, s) = matmul_tiled(hidden, wv, tile_n)?;
    counts.absorb(s);

    let (scores_q, s) = matmul_tiled(&q, &k.transpose()?, tile_n)?;
    counts.absorb(s);

    let inv_sqrt_d = 1.0 / libm::sqrt(head_dim as f64);
    let mut scores = scores_q.dequantize();
    for v in scores.iter_mut() {
        *v *= inv_sqrt_d;
    }
    counts.elementwise_ops += (seq * seq) as u64;

    let mask = span_mask(seq, span, cfg.span_ramp);
    let mut probs = masked_softmax(&scores, &mask, seq, seq, tile_n);
    if cfg.sfu_fixed_point {
        for p in probs.iter_mut() {
            *p = sfu_round(*p);
        }
    }
    counts.softmax_rows += seq as u64;
    counts.softmax_elems += (seq * seq) as u64;

    let probs_q = QuantTensor::quantize_fit(&probs, vec![seq, seq], cfg.exponent_bits)?;
    let (context, s) = matmul_tiled(&probs_q, &v, tile_n)?;
    counts.absorb(s);
    Ok((context, counts))
}

/// Output of a (possibly truncated) forward pass.
#[derive(Debug, Clone)]
pub struct EncoderOutput {
    /// Hidden state after each computed layer.
    pub hidden_states: Vec<QuantTensor>,
    /// Off-ramp logits after each computed layer.
    pub logits: Vec<Vec<f64>>,
    pub trace: OpTrace,
}

/// Incremental forward pass: embed once, then step shared encoder layers.
pub struct EncoderState<'a> {
    bundle: &'a EncoderBundle,
    tile_n: usize,
    hidden: QuantTensor,
    heads: Vec<HeadWeights>,
    next_layer: usize,
}

impl<'a> EncoderState<'a> {
    /// Embedding lookup through the bitmask decode, then the factorized
    /// projection into the hidden space.
    pub fn embed(
        tokens: &[u32],
        bundle: &'a EncoderBundle,
        tile_n: usize,
    ) -> Result<(Self, LayerCounts)> {
        let cfg = &bundle.config;
        if tokens.len() != cfg.seq_len {
            return Err(CoreError::ShapeMismatch(format!(
                "expected {} tokens, got {}",
                cfg.seq_len,
                tokens.len()
            )));
        }
        for &t in tokens {
            if t as usize >= cfg.vocab_size {
                return Err(CoreError::TokenOutOfRange {
                    token: t,
                    vocab: cfg.vocab_size,
                });
            }
        }
        let table = decode_bitmask(&bundle.embedding)?;
        let indices: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let gathered = table.gather_rows(&indices)?;
        let mut counts = LayerCounts::default();
        let (hidden, s) = matmul_tiled(&gathered, &bundle.embed_proj, tile_n)?;
        counts.absorb(s);

        let d = cfg.head_dim();
        let heads = (0..cfg.num_heads)
            .map(|h| {
                Ok(HeadWeights {
                    wq: bundle.wq.column_block(h * d, d)?,
                    wk: bundle.wk.column_block(h * d, d)?,
                    wv: bundle.wv.column_block(h * d, d)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;

        Ok((
            Self {
                bundle,
                tile_n,
                hidden,
                heads,
                next_layer: 1,
            },
            counts,
        ))
    }

    #[inline]
    pub fn hidden(&self) -> &QuantTensor {
        &self.hidden
    }

    /// 1-based index of the next layer to run.
    #[inline]
    pub fn next_layer(&self) -> usize {
        self.next_layer
    }

    fn add_and_norm(
        &self,
        a: &[f64],
        b: &[f64],
        params: &LayerNormParams,
        counts: &mut LayerCounts,
    ) -> Vec<f64> {
        let cfg = &self.bundle.config;
        let h = cfg.hidden_dim;
        let seq = cfg.seq_len;
        let mut out = Vec::with_capacity(seq * h);
        for i in 0..seq {
            let row: Vec<f64> = (0..h).map(|j| a[i * h + j] + b[i * h + j]).collect();
            let mut normed = layer_norm(&row, &params.gamma, &params.beta, cfg.layer_norm_eps);
            if cfg.sfu_fixed_point {
                for v in normed.iter_mut() {
                    *v = sfu_round(*v);
                }
            }
            out.extend_from_slice(&normed);
        }
        counts.elementwise_ops += (seq * h) as u64;
        counts.layernorm_rows += seq as u64;
        counts.layernorm_elems += (seq * h) as u64;
        out
    }

    /// Run one shared encoder block and the off-ramp of the current layer.
    pub fn step_layer(&mut self, compute_offramp: bool) -> Result<LayerStep> {
        let bundle = self.bundle;
        let cfg = &bundle.config;
        if self.next_layer > cfg.num_layers {
            return Err(CoreError::InvalidInput(format!(
                "layer {} beyond num_layers {}",
                self.next_layer, cfg.num_layers
            )));
        }
        let (seq, h) = (cfg.seq_len, cfg.hidden_dim);
        let d = cfg.head_dim();
        let mut counts = LayerCounts::default();
        let mut heads_skipped = 0u64;

        // Multi-head attention with span predication.
        let mut context = vec![0.0f64; seq * h];
        for (idx, head) in self.heads.iter().enumerate() {
            let span = bundle.spans.spans()[idx];
            if span == 0 {
                heads_skipped += 1;
                continue;
            }
            let (ctx, c) = attention_head(
                &self.hidden,
                &head.wq,
                &head.wk,
                &head.wv,
                span,
                cfg,
                self.tile_n,
            )?;
            counts += c;
            let vals = ctx.dequantize();
            for i in 0..seq {
                context[i * h + idx * d..i * h + (idx + 1) * d]
                    .copy_from_slice(&vals[i * d..(i + 1) * d]);
            }
        }
        let context_q = QuantTensor::quantize_fit(&context, vec![seq, h], cfg.exponent_bits)?;
        let (attn_out, s) = matmul_tiled(&context_q, &bundle.wo, self.tile_n)?;
        counts.absorb(s);

        let h1 = self.add_and_norm(
            &self.hidden.dequantize(),
            &attn_out.dequantize(),
            &bundle.ln_attn,
            &mut counts,
        );
        let h1_q = QuantTensor::quantize_fit(&h1, vec![seq, h], cfg.exponent_bits)?;

        // Feed-forward with GELU.
        let (f1, s) = matmul_tiled(&h1_q, &bundle.w_ffn1, self.tile_n)?;
        counts.absorb(s);
        let mut f1_vals = f1.dequantize();
        for v in f1_vals.iter_mut() {
            *v = gelu(*v);
        }
        counts.elementwise_ops += (seq * cfg.ffn_dim) as u64;
        let f1_q = QuantTensor::quantize_fit(&f1_vals, vec![seq, cfg.ffn_dim], cfg.exponent_bits)?;
        let (f2, s) = matmul_tiled(&f1_q, &bundle.w_ffn2, self.tile_n)?;
        counts.absorb(s);

        let h2 = self.add_and_norm(&h1, &f2.dequantize(), &bundle.ln_ffn, &mut counts);
        self.hidden = QuantTensor::quantize_fit(&h2, vec![seq, h], cfg.exponent_bits)?;

        let logits = if compute_offramp {
            let cls = self.hidden.row(0)?;
            let (raw, s) = matmul_tiled(&cls, &bundle.offramps[self.next_layer - 1], self.tile_n)?;
            counts.absorb(s);
            Some(raw.dequantize())
        } else {
            None
        };

        self.next_layer += 1;
        Ok(LayerStep {
            logits,
            counts,
            heads_skipped,
        })
    }
}

/// Result of one encoder-block step.
#[derive(Debug, Clone)]
pub struct LayerStep {
    pub logits: Option<Vec<f64>>,
    pub counts: LayerCounts,
    pub heads_skipped: u64,
}

/// Full forward pass through `upto_layer` applications of the shared block,
/// with off-ramp logits after each layer.
pub fn encoder_forward(
    tokens: &[u32],
    bundle: &EncoderBundle,
    upto_layer: usize,
    tile_n: usize,
) -> Result<EncoderOutput> {
    let cfg = &bundle.config;
    if upto_layer == 0 || upto_layer > cfg.num_layers {
        return Err(CoreError::InvalidInput(format!(
            "upto_layer {upto_layer} outside 1..={}",
            cfg.num_layers
        )));
    }
    let mut trace = OpTrace::new(tile_n);
    let (mut state, embed_counts) = EncoderState::embed(tokens, bundle, tile_n)?;
    trace.embedding = embed_counts;
    trace.heads_skipped = 0;

    let mut hidden_states = Vec::with_capacity(upto_layer);
    let mut logits = Vec::with_capacity(upto_layer);
    for _ in 0..upto_layer {
        let step = state.step_layer(true)?;
        trace.layers.push(step.counts);
        trace.heads_skipped += step.heads_skipped;
        hidden_states.push(state.hidden().clone());
        logits.push(step.logits.expect("off-ramp requested"));
    }
    Ok(EncoderOutput {
        hidden_states,
        logits,
        trace,
    })
}

/// Analytic FLOP counts under span predication (two FLOPs per MAC).
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct FlopsCount {
    pub dense_flops: u64,
    pub predicated_flops: u64,
    pub ratio: f64,
}

/// Encoder FLOPs with and without head predication. A span-0 head sheds its
/// whole cost (Q/K/V projections, scores, context); the output projection
/// and the FFN always run.
pub fn flops_count(spans: &AttentionSpans, cfg: &EncoderConfig) -> FlopsCount {
    let t = cfg.seq_len as u64;
    let h = cfg.hidden_dim as u64;
    let f = cfg.ffn_dim as u64;
    let d = (cfg.hidden_dim / cfg.num_heads) as u64;
    let heads = cfg.num_heads as u64;
    let layers = cfg.num_layers as u64;

    let per_head = 3 * t * h * d + 2 * t * t * d;
    let fixed = t * h * h + 2 * t * h * f;
    let active = spans.active_heads() as u64;

    let dense_macs = layers * (heads * per_head + fixed);
    let pred_macs = layers * (active * per_head + fixed);
    FlopsCount {
        dense_flops: 2 * dense_macs,
        predicated_flops: 2 * pred_macs,
        ratio: dense_macs as f64 / pred_macs as f64,
    }
}
