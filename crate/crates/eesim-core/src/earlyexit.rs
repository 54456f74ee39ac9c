//! Entropy computation (naive and numerically stable), exit assessment, and
//! the exit-layer predictor: a small ReLU MLP on the layer-1 entropy,
//! distilled into a lookup table for O(1) forecasting.

use alloc::{format, vec, vec::Vec};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{CoreError, Result};

/// Entropy straight off the definition:
/// `H = ln(sum e^x) - (sum x e^x) / (sum e^x)`.
///
/// Overflows for large logits by design; it serves as the oracle for
/// [`entropy_stable`] on moderate inputs.
pub fn entropy_naive(logits: &[f64]) -> f64 {
    let sum_exp: f64 = logits.iter().map(|&x| libm::exp(x)).sum();
    let weighted: f64 = logits.iter().map(|&x| x * libm::exp(x)).sum();
    libm::log(sum_exp) - weighted / sum_exp
}

/// Max-shifted entropy, finite for any logit magnitude and exactly invariant
/// under adding a constant to all logits. Equals [`entropy_naive`] wherever
/// the latter does not overflow; clamped at zero against fp undershoot.
pub fn entropy_stable(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum_exp = 0.0f64;
    let mut weighted = 0.0f64;
    for &x in logits {
        let e = libm::exp(x - max);
        sum_exp += e;
        weighted += (x - max) * e;
    }
    (libm::log(sum_exp) - weighted / sum_exp).max(0.0)
}

/// The early-exit condition: strictly `H < E_T`.
#[inline]
pub fn assess_exit(entropy: f64, threshold: f64) -> bool {
    entropy < threshold
}

/// Off-ramp entropies of one sentence, one entry per layer.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EntropyTrace {
    pub per_layer: Vec<f64>,
}

impl EntropyTrace {
    pub fn new(per_layer: Vec<f64>) -> Result<Self> {
        if per_layer.iter().any(|&h| h < 0.0 || h.is_nan()) {
            return Err(CoreError::InvalidInput(
                "entropy trace entries must be >= 0".into(),
            ));
        }
        Ok(Self { per_layer })
    }
}

/// First layer (1-based) whose entropy clears the threshold; the final layer
/// when none does (forced exit).
pub fn true_exit_layer(trace: &EntropyTrace, threshold: f64, num_layers: usize) -> usize {
    trace
        .per_layer
        .iter()
        .take(num_layers)
        .position(|&h| assess_exit(h, threshold))
        .map(|i| i + 1)
        .unwrap_or(num_layers)
}

/// How to read "five-layer perceptron": three hidden layers (the listed
/// 1-64-64-64-out sizes, the default) or four (five weight layers).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum HiddenDepth {
    #[default]
    Three,
    Four,
}

/// Training hyperparameters of the exit predictor.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrainParams {
    pub epochs: usize,
    pub learning_rate: f64,
    pub hidden_width: usize,
    pub hidden_depth: HiddenDepth,
    pub seed: u64,
    /// Number of classifier classes; sets the entropy domain `[0, ln K]`.
    pub num_classes: usize,
}

impl Default for TrainParams {
    fn default() -> Self {
        Self {
            epochs: 300,
            learning_rate: 0.01,
            hidden_width: 64,
            hidden_depth: HiddenDepth::Three,
            seed: 0,
            num_classes: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
struct Dense {
    weights: Vec<f64>,
    biases: Vec<f64>,
    inputs: usize,
    outputs: usize,
}

impl Dense {
    fn random(inputs: usize, outputs: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = libm::sqrt(6.0 / inputs as f64);
        Self {
            weights: (0..inputs * outputs)
                .map(|_| rng.gen_range(-bound..bound))
                .collect(),
            biases: vec![0.0; outputs],
            inputs,
            outputs,
        }
    }
}

/// Scalar-in/scalar-out ReLU perceptron.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Mlp {
    layers: Vec<Dense>,
    /// Input scale so the entropy domain maps near [0, 1].
    input_scale: f64,
}

impl Mlp {
    fn new(
        hidden_width: usize,
        hidden_depth: HiddenDepth,
        input_scale: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let depth = match hidden_depth {
            HiddenDepth::Three => 3,
            HiddenDepth::Four => 4,
        };
        let mut sizes = vec![1usize];
        sizes.extend(core::iter::repeat_n(hidden_width, depth));
        sizes.push(1);
        let layers = sizes
            .windows(2)
            .map(|w| Dense::random(w[0], w[1], rng))
            .collect();
        Self {
            layers,
            input_scale,
        }
    }

    /// Forward pass; also returns per-layer activations when training.
    fn forward_full(&self, x: f64) -> (f64, Vec<Vec<f64>>) {
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        let mut current = vec![x * self.input_scale];
        activations.push(current.clone());
        for (idx, layer) in self.layers.iter().enumerate() {
            let mut next = vec![0.0f64; layer.outputs];
            for (o, slot) in next.iter_mut().enumerate() {
                let mut acc = layer.biases[o];
                for (i, &v) in current.iter().enumerate() {
                    acc += layer.weights[o * layer.inputs + i] * v;
                }
                *slot = if idx + 1 < self.layers.len() {
                    acc.max(0.0)
                } else {
                    acc
                };
            }
            activations.push(next.clone());
            current = next;
        }
        (current[0], activations)
    }

    pub fn eval(&self, x: f64) -> f64 {
        self.forward_full(x).0
    }
}

/// Adam state per parameter tensor.
struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Distilled lookup table over the layer-1 entropy domain.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ExitLut {
    /// Upper edge of the covered domain (`ln K`).
    pub h_max: f64,
    /// Predicted exit layer per uniform bin.
    pub bins: Vec<u32>,
}

impl ExitLut {
    pub fn num_bins(&self) -> usize {
        self.bins.len()
    }

    /// `(bin_upper_edge, predicted_layer)` pairs of the serialized form.
    pub fn entries(&self) -> Vec<(f64, u32)> {
        let width = self.h_max / self.bins.len() as f64;
        self.bins
            .iter()
            .enumerate()
            .map(|(i, &layer)| ((i + 1) as f64 * width, layer))
            .collect()
    }

    pub fn from_entries(entries: &[(f64, u32)]) -> Result<Self> {
        if entries.is_empty() {
            return Err(CoreError::InvalidInput("empty LUT".into()));
        }
        Ok(Self {
            h_max: entries[entries.len() - 1].0,
            bins: entries.iter().map(|&(_, l)| l).collect(),
        })
    }

    pub fn lookup(&self, h1: f64) -> usize {
        let width = self.h_max / self.bins.len() as f64;
        let idx = if width > 0.0 {
            (libm::floor(h1 / width) as usize).min(self.bins.len() - 1)
        } else {
            0
        };
        self.bins[idx] as usize
    }
}

/// Loss bookkeeping of a training run.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrainingSummary {
    pub initial_loss: f64,
    pub final_loss: f64,
    pub epochs: usize,
}

/// Exit-layer predictor: MLP on the layer-1 entropy, optionally distilled to
/// a LUT. Immutable once trained.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ExitPredictor {
    pub mlp: Mlp,
    pub lut: Option<ExitLut>,
    pub entropy_threshold: f64,
    pub num_layers: usize,
    /// Entropy domain upper edge, `ln K`.
    pub h_max: f64,
    pub training: TrainingSummary,
}

/// Anything that can forecast an exit layer from the layer-1 entropy.
pub trait ExitForecaster {
    fn forecast(&self, h1: f64) -> usize;
}

impl ExitForecaster for ExitPredictor {
    fn forecast(&self, h1: f64) -> usize {
        predict_exit_layer(self, h1)
    }
}

/// Fixed-output forecaster; handy for degenerate and oracle setups.
#[derive(Debug, Clone, Copy)]
pub struct ConstForecaster(pub usize);

impl ExitForecaster for ConstForecaster {
    fn forecast(&self, _h1: f64) -> usize {
        self.0
    }
}

impl ExitForecaster for ExitLut {
    fn forecast(&self, h1: f64) -> usize {
        self.lookup(h1)
    }
}

/// Train the MLP to regress the true entropy-based exit layer from the
/// layer-1 entropy. Full-batch Adam on mean squared error; deterministic
/// under a fixed seed.
pub fn train_predictor(
    traces: &[EntropyTrace],
    num_layers: usize,
    entropy_threshold: f64,
    params: &TrainParams,
) -> Result<ExitPredictor> {
    if traces.len() < 100 {
        return Err(CoreError::InsufficientData(format!(
            "need >= 100 traces, got {}",
            traces.len()
        )));
    }
    if num_layers == 0 || params.num_classes < 2 {
        return Err(CoreError::InvalidInput(
            "num_layers and num_classes must be positive".into(),
        ));
    }
    let h_max = libm::log(params.num_classes as f64);
    let xs: Vec<f64> = traces.iter().map(|t| t.per_layer[0]).collect();
    let ys: Vec<f64> = traces
        .iter()
        .map(|t| true_exit_layer(t, entropy_threshold, num_layers) as f64)
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let input_scale = if h_max > 0.0 { 1.0 / h_max } else { 1.0 };
    let mut mlp = Mlp::new(
        params.hidden_width,
        params.hidden_depth,
        input_scale,
        &mut rng,
    );

    let mut adam: Vec<(AdamState, AdamState)> = mlp
        .layers
        .iter()
        .map(|l| {
            (
                AdamState {
                    m: vec![0.0; l.weights.len()],
                    v: vec![0.0; l.weights.len()],
                },
                AdamState {
                    m: vec![0.0; l.biases.len()],
                    v: vec![0.0; l.biases.len()],
                },
            )
        })
        .collect();

    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;
    let n = xs.len() as f64;
    let mut initial_loss = 0.0;
    let mut final_loss = 0.0;

    for epoch in 0..params.epochs {
        // Gradient accumulators per layer.
        let mut grads_w: Vec<Vec<f64>> = mlp
            .layers
            .iter()
            .map(|l| vec![0.0; l.weights.len()])
            .collect();
        let mut grads_b: Vec<Vec<f64>> = mlp
            .layers
            .iter()
            .map(|l| vec![0.0; l.biases.len()])
            .collect();
        let mut loss = 0.0f64;

        for (&x, &y) in xs.iter().zip(&ys) {
            let (out, acts) = mlp.forward_full(x);
            let err = out - y;
            loss += err * err;

            // Backprop through the ReLU stack.
            let mut delta = vec![2.0 * err / n];
            for layer_idx in (0..mlp.layers.len()).rev() {
                let layer = &mlp.layers[layer_idx];
                let input = &acts[layer_idx];
                let gw = &mut grads_w[layer_idx];
                let gb = &mut grads_b[layer_idx];
                let mut next_delta = vec![0.0f64; layer.inputs];
                for o in 0..layer.outputs {
                    let d = delta[o];
                    if d == 0.0 {
                        continue;
                    }
                    gb[o] += d;
                    for i in 0..layer.inputs {
                        gw[o * layer.inputs + i] += d * input[i];
                        next_delta[i] += d * layer.weights[o * layer.inputs + i];
                    }
                }
                if layer_idx > 0 {
                    // ReLU gate of the previous layer's outputs.
                    for (i, nd) in next_delta.iter_mut().enumerate() {
                        if acts[layer_idx][i] <= 0.0 {
                            *nd = 0.0;
                        }
                    }
                }
                delta = next_delta;
            }
        }

        loss /= n;
        if epoch == 0 {
            initial_loss = loss;
        }
        final_loss = loss;

        let t = (epoch + 1) as f64;
        let corr1 = 1.0 - libm::pow(BETA1, t);
        let corr2 = 1.0 - libm::pow(BETA2, t);
        for (layer_idx, layer) in mlp.layers.iter_mut().enumerate() {
            let (ref mut aw, ref mut ab) = adam[layer_idx];
            for (w, (g, (m, v))) in layer.weights.iter_mut().zip(
                grads_w[layer_idx]
                    .iter()
                    .zip(aw.m.iter_mut().zip(aw.v.iter_mut())),
            ) {
                *m = BETA1 * *m + (1.0 - BETA1) * g;
                *v = BETA2 * *v + (1.0 - BETA2) * g * g;
                *w -= params.learning_rate * (*m / corr1) / (libm::sqrt(*v / corr2) + EPS);
            }
            for (b, (g, (m, v))) in layer.biases.iter_mut().zip(
                grads_b[layer_idx]
                    .iter()
                    .zip(ab.m.iter_mut().zip(ab.v.iter_mut())),
            ) {
                *m = BETA1 * *m + (1.0 - BETA1) * g;
                *v = BETA2 * *v + (1.0 - BETA2) * g * g;
                *b -= params.learning_rate * (*m / corr1) / (libm::sqrt(*v / corr2) + EPS);
            }
        }
    }

    Ok(ExitPredictor {
        mlp,
        lut: None,
        entropy_threshold,
        num_layers,
        h_max,
        training: TrainingSummary {
            initial_loss,
            final_loss,
            epochs: params.epochs,
        },
    })
}

/// Fill the predictor's LUT: each uniform bin over `[0, ln K]` stores the MLP
/// output at the bin center, rounded to the nearest valid layer.
pub fn distill_lut(predictor: &ExitPredictor, num_bins: usize) -> Result<ExitPredictor> {
    if num_bins == 0 {
        return Err(CoreError::InvalidInput("num_bins must be >= 1".into()));
    }
    let width = predictor.h_max / num_bins as f64;
    let bins = (0..num_bins)
        .map(|i| {
            let center = (i as f64 + 0.5) * width;
            round_to_layer(predictor.mlp.eval(center), predictor.num_layers) as u32
        })
        .collect();
    let mut out = predictor.clone();
    out.lut = Some(ExitLut {
        h_max: predictor.h_max,
        bins,
    });
    Ok(out)
}

/// Default LUT resolution.
pub const DEFAULT_LUT_BINS: usize = 256;

#[inline]
fn round_to_layer(raw: f64, num_layers: usize) -> usize {
    let r = libm::round(raw);
    if r < 1.0 {
        1
    } else if r > num_layers as f64 {
        num_layers
    } else {
        r as usize
    }
}

/// Forecast the exit layer from the layer-1 entropy. Uses the LUT when
/// distilled (entropies above the last bin edge clamp to the last bin), the
/// MLP otherwise.
pub fn predict_exit_layer(predictor: &ExitPredictor, h1: f64) -> usize {
    debug_assert!(h1 >= 0.0);
    match &predictor.lut {
        Some(lut) => round_to_layer(lut.lookup(h1) as f64, predictor.num_layers),
        None => round_to_layer(predictor.mlp.eval(h1), predictor.num_layers),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const LN_2: f64 = core::f64::consts::LN_2;

    #[test]
    fn uniform_logits_hit_ln_k() {
        for k in 2..8usize {
            let logits = vec![1.7f64; k];
            let want = libm::log(k as f64);
            assert!((entropy_naive(&logits) - want).abs() < 1e-12);
            assert!((entropy_stable(&logits) - want).abs() < 1e-12);
        }
    }

    #[test]
    fn near_one_hot_is_near_zero() {
        let h = entropy_naive(&[10.0, -10.0]);
        assert!((0.0..1e-3).contains(&h));
    }

    #[test]
    fn naive_matches_definitional_oracle() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..500 {
            let k = rng.gen_range(2..10usize);
            let logits: Vec<f64> = (0..k).map(|_| rng.gen_range(-6.0..6.0)).collect();
            let denom: f64 = logits.iter().map(|&x| libm::exp(x)).sum();
            let want: f64 = logits
                .iter()
                .map(|&x| {
                    let p = libm::exp(x) / denom;
                    -p * libm::log(p)
                })
                .sum();
            assert!((entropy_naive(&logits) - want).abs() < 1e-10);
        }
    }

    #[test]
    fn stable_equals_naive_on_moderate_logits() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..1000 {
            let k = rng.gen_range(2..12usize);
            let logits: Vec<f64> = (0..k).map(|_| rng.gen_range(-20.0..20.0)).collect();
            assert!((entropy_stable(&logits) - entropy_naive(&logits)).abs() <= 1e-9);
        }
    }

    #[test]
    fn stable_survives_huge_logits() {
        let h = entropy_stable(&[1000.0, 0.0]);
        assert!(h.is_finite());
        assert!((0.0..1e-9).contains(&h));
        // The naive formula overflows here.
        assert!(!entropy_naive(&[1000.0, 0.0]).is_finite());
    }

    #[test]
    fn stable_is_shift_invariant() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let k = rng.gen_range(2..8usize);
            let logits: Vec<f64> = (0..k).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let shift = rng.gen_range(-100.0..100.0);
            let shifted: Vec<f64> = logits.iter().map(|&x| x + shift).collect();
            assert!((entropy_stable(&logits) - entropy_stable(&shifted)).abs() < 1e-12);
        }
    }

    #[test]
    fn entropy_bounds_hold() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..500 {
            let k = rng.gen_range(2..10usize);
            let logits: Vec<f64> = (0..k).map(|_| rng.gen_range(-50.0..50.0)).collect();
            let h = entropy_stable(&logits);
            assert!(h >= 0.0);
            assert!(h <= libm::log(k as f64) + 1e-12);
        }
    }

    #[test]
    fn assess_exit_is_strict() {
        assert!(assess_exit(0.2, 0.4));
        assert!(!assess_exit(0.4, 0.4));
        assert!(assess_exit(LN_2, 1.0));
    }

    #[test]
    fn assess_exit_monotone_in_threshold() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let h = rng.gen_range(0.0..2.0);
            let t = rng.gen_range(0.0..2.0);
            if assess_exit(h, t) {
                assert!(assess_exit(h, t + rng.gen_range(0.0..1.0) + 1e-9));
            }
        }
    }

    fn synthetic_traces(count: usize, num_layers: usize, seed: u64) -> Vec<EntropyTrace> {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count)
            .map(|_| {
                let h1 = rng.gen_range(0.02..LN_2);
                // Strictly decreasing and fully determined by H1.
                let per_layer = (0..num_layers)
                    .map(|l| h1 * libm::pow(0.55, l as f64))
                    .collect();
                EntropyTrace::new(per_layer).unwrap()
            })
            .collect()
    }

    #[test]
    fn true_exit_layer_rules() {
        let t = EntropyTrace::new(vec![0.9, 0.5, 0.1, 0.05]).unwrap();
        assert_eq!(true_exit_layer(&t, 0.6, 4), 2);
        assert_eq!(true_exit_layer(&t, 0.01, 4), 4);
        assert_eq!(true_exit_layer(&t, 10.0, 4), 1);
    }

    #[test]
    fn training_needs_enough_traces() {
        let traces = synthetic_traces(50, 4, 0);
        assert!(matches!(
            train_predictor(&traces, 4, 0.3, &TrainParams::default()),
            Err(CoreError::InsufficientData(_))
        ));
    }

    #[test]
    fn separable_traces_train_to_high_exact_match() {
        let num_layers = 6;
        let traces = synthetic_traces(400, num_layers, 10);
        let held_out = synthetic_traces(200, num_layers, 11);
        let e_t = 0.12;
        let params = TrainParams {
            epochs: 400,
            num_classes: 2,
            ..TrainParams::default()
        };
        let predictor = train_predictor(&traces, num_layers, e_t, &params).unwrap();
        assert!(predictor.training.final_loss < predictor.training.initial_loss);
        let distilled = distill_lut(&predictor, DEFAULT_LUT_BINS).unwrap();
        let hits = held_out
            .iter()
            .filter(|t| {
                predict_exit_layer(&distilled, t.per_layer[0])
                    == true_exit_layer(t, e_t, num_layers)
            })
            .count();
        let rate = hits as f64 / held_out.len() as f64;
        assert!(rate >= 0.95, "exact match rate {rate}");
    }

    #[test]
    fn zero_threshold_trains_constant_last_layer() {
        let num_layers = 5;
        let traces = synthetic_traces(150, num_layers, 12);
        let predictor = train_predictor(&traces, num_layers, 0.0, &TrainParams::default()).unwrap();
        let distilled = distill_lut(&predictor, 64).unwrap();
        for h1 in [0.0, 0.1, 0.3, LN_2] {
            assert_eq!(predict_exit_layer(&distilled, h1), num_layers);
        }
    }

    #[test]
    fn threshold_at_ln_k_trains_constant_first_layer() {
        let num_layers = 5;
        let traces = synthetic_traces(150, num_layers, 13);
        let predictor =
            train_predictor(&traces, num_layers, LN_2 + 1e-9, &TrainParams::default()).unwrap();
        let distilled = distill_lut(&predictor, 64).unwrap();
        for h1 in [0.0, 0.2, 0.5, LN_2] {
            assert_eq!(predict_exit_layer(&distilled, h1), 1);
        }
    }

    #[test]
    fn lut_agrees_with_mlp_at_bin_centers() {
        let num_layers = 6;
        let traces = synthetic_traces(200, num_layers, 14);
        let predictor = train_predictor(&traces, num_layers, 0.1, &TrainParams::default()).unwrap();
        let distilled = distill_lut(&predictor, 128).unwrap();
        let lut = distilled.lut.as_ref().unwrap();
        let width = lut.h_max / lut.num_bins() as f64;
        for (i, &layer) in lut.bins.iter().enumerate() {
            let center = (i as f64 + 0.5) * width;
            assert_eq!(
                layer as usize,
                round_to_layer(predictor.mlp.eval(center), num_layers)
            );
        }
    }

    #[test]
    fn lut_error_bounded_by_within_bin_variation() {
        use rand::Rng;
        let num_layers = 8;
        let traces = synthetic_traces(250, num_layers, 16);
        let predictor =
            train_predictor(&traces, num_layers, 0.08, &TrainParams::default()).unwrap();
        let distilled = distill_lut(&predictor, 64).unwrap();
        let lut = distilled.lut.as_ref().unwrap();
        let bins = lut.num_bins();
        let width = lut.h_max / bins as f64;

        // Dense sampling: per-bin MLP variation plus the layer-rounding
        // half-step bounds the distillation error.
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let samples: Vec<f64> = (0..10_000).map(|_| rng.gen_range(0.0..lut.h_max)).collect();
        let mut bin_min = vec![f64::INFINITY; bins];
        let mut bin_max = vec![f64::NEG_INFINITY; bins];
        for &h in &samples {
            let b = ((h / width) as usize).min(bins - 1);
            let y = predictor.mlp.eval(h);
            bin_min[b] = bin_min[b].min(y);
            bin_max[b] = bin_max[b].max(y);
        }
        for (b, (&lo, &hi)) in bin_min.iter().zip(&bin_max).enumerate() {
            let center = (b as f64 + 0.5) * width;
            let variation = (hi - lo).max(0.0);
            // Fold the center into the observed envelope.
            let lo = lo.min(predictor.mlp.eval(center));
            let hi = hi.max(predictor.mlp.eval(center));
            for &h in &samples {
                if ((h / width) as usize).min(bins - 1) != b {
                    continue;
                }
                let err = (lut.lookup(h) as f64 - predictor.mlp.eval(h)).abs();
                assert!(
                    err <= (hi - lo) + 0.5 + 1e-9,
                    "bin {b}: err {err} variation {variation}"
                );
            }
        }
    }

    #[test]
    fn lut_lookup_clamps_at_edges() {
        let lut = ExitLut {
            h_max: 1.0,
            bins: vec![2, 3, 4, 5],
        };
        assert_eq!(lut.lookup(0.0), 2); // below the first upper edge
        assert_eq!(lut.lookup(0.6), 4); // interior
        assert_eq!(lut.lookup(5.0), 5); // above the last edge clamps
    }

    #[test]
    fn lut_serialization_entries_roundtrip() {
        let lut = ExitLut {
            h_max: LN_2,
            bins: vec![1, 2, 2, 3],
        };
        let entries = lut.entries();
        assert_eq!(entries.len(), 4);
        assert!((entries[3].0 - LN_2).abs() < 1e-12);
        let back = ExitLut::from_entries(&entries).unwrap();
        assert_eq!(back.bins, lut.bins);
        assert!((back.h_max - lut.h_max).abs() < 1e-12);
    }

    #[test]
    fn four_hidden_layer_reading_also_trains() {
        let num_layers = 5;
        let traces = synthetic_traces(150, num_layers, 18);
        let params = TrainParams {
            epochs: 150,
            hidden_depth: HiddenDepth::Four,
            ..TrainParams::default()
        };
        let predictor = train_predictor(&traces, num_layers, 0.1, &params).unwrap();
        assert!(predictor.training.final_loss < predictor.training.initial_loss);
        let p = predict_exit_layer(&predictor, 0.3);
        assert!((1..=num_layers).contains(&p));
    }

    #[test]
    fn training_is_deterministic() {
        let traces = synthetic_traces(150, 4, 15);
        let params = TrainParams {
            epochs: 50,
            ..TrainParams::default()
        };
        let a = train_predictor(&traces, 4, 0.2, &params).unwrap();
        let b = train_predictor(&traces, 4, 0.2, &params).unwrap();
        assert_eq!(a.mlp, b.mlp);
    }
}
