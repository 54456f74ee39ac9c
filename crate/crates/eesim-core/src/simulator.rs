//! Sentence-stream simulation of the three inference policies: full-depth
//! baseline, conventional entropy early exit, and latency-aware inference
//! (exit prediction after layer 1 plus sentence-level DVFS), charging
//! cycles, latency and energy per sentence.

use alloc::{format, vec, vec::Vec};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dvfs::{
    energy, required_frequency, select_vf, transition, EnergyModel, LdoAdpllModel, Transition,
    VfTable,
};
use crate::earlyexit::{assess_exit, entropy_stable, EntropyTrace, ExitForecaster};
use crate::error::{CoreError, Result};
use crate::model::{EncoderBundle, EncoderState, LayerCounts, OpTrace};

/// Inference policy of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Policy {
    Base,
    ConventionalEe,
    LatencyAware,
}

/// Policy knobs of one simulation run.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PolicyConfig {
    pub policy: Policy,
    pub entropy_threshold: f64,
    /// Per-sentence deadline; required for the latency-aware policy.
    pub latency_target_s: Option<f64>,
    /// PU MAC vector size.
    pub mac_tile: usize,
    /// Charge gated VMACs the skip fraction (bitmask sparse execution) or
    /// full price (dense execution). Results and cycles are unaffected.
    pub sparse_execution: bool,
}

impl PolicyConfig {
    pub const VALID_TILES: [usize; 5] = [2, 4, 8, 16, 32];

    pub fn new(policy: Policy, entropy_threshold: f64) -> Self {
        Self {
            policy,
            entropy_threshold,
            latency_target_s: None,
            mac_tile: 16,
            sparse_execution: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !Self::VALID_TILES.contains(&self.mac_tile) {
            return Err(CoreError::InvalidFormat(format!(
                "mac_tile must be one of {:?}, got {}",
                Self::VALID_TILES,
                self.mac_tile
            )));
        }
        if self.entropy_threshold < 0.0 {
            return Err(CoreError::InvalidFormat(
                "entropy_threshold must be >= 0".into(),
            ));
        }
        match (self.policy, self.latency_target_s) {
            (Policy::LatencyAware, None) => Err(CoreError::InvalidFormat(
                "latency-aware policy needs a latency target".into(),
            )),
            (Policy::LatencyAware, Some(t)) if t <= 0.0 || t.is_nan() => Err(
                CoreError::InvalidFormat("latency target must be > 0".into()),
            ),
            _ => Ok(()),
        }
    }
}

/// Layers run at one operating point.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct VfSegment {
    pub first_layer: usize,
    pub last_layer: usize,
    pub voltage: f64,
    pub frequency_hz: f64,
}

/// Per-sentence outcome.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SentenceResult {
    pub exit_layer: usize,
    /// Forecast exit layer; only set when the latency-aware controller
    /// actually consulted the predictor.
    pub predicted_layer: Option<usize>,
    /// Inference completion time, transitions included.
    pub latency_s: f64,
    /// Active inference energy (standby leakage is stream-level).
    pub energy_j: f64,
    /// Whether the sentence finished within the latency target.
    pub deadline_met: bool,
    /// Whether the DVFS plan was feasible (deadline not already missed and
    /// the required frequency within the table). Always true for Base/EE.
    pub dvfs_feasible: bool,
    pub vf_schedule: Vec<VfSegment>,
    /// Off-ramp logits at the exit layer.
    pub logits: Vec<f64>,
    pub entropy_at_exit: f64,
}

/// Aggregates over one sentence stream.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct StreamReport {
    pub results: Vec<SentenceResult>,
    pub mean_exit_layer: f64,
    pub mean_predicted_layer: Option<f64>,
    pub mean_latency_s: f64,
    pub mean_energy_j: f64,
    pub total_energy_j: f64,
    /// Leakage parked at the standby voltage between sentences (latency-
    /// aware streams arrive once per target period).
    pub standby_energy_j: f64,
    pub deadline_miss_rate: f64,
}

/// PU + SFU cycle count of a trace on an `n`-wide datapath.
pub fn account_cycles(trace: &OpTrace, n: usize) -> u64 {
    trace.cycle_count(n)
}

/// Seeded synthetic sentence stream: uniform token indices.
pub fn synth_sentences(count: usize, seq_len: usize, vocab: usize, seed: u64) -> Vec<Vec<u32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            (0..seq_len)
                .map(|_| rng.gen_range(0..vocab as u32))
                .collect()
        })
        .collect()
}

/// Everything a policy run needs.
pub struct Simulator<'a> {
    pub bundle: &'a EncoderBundle,
    pub vf: &'a VfTable,
    pub ldo: &'a LdoAdpllModel,
    pub energy_model: &'a EnergyModel,
    pub policy: &'a PolicyConfig,
}

impl<'a> Simulator<'a> {
    pub fn new(
        bundle: &'a EncoderBundle,
        vf: &'a VfTable,
        ldo: &'a LdoAdpllModel,
        energy_model: &'a EnergyModel,
        policy: &'a PolicyConfig,
    ) -> Result<Self> {
        bundle.validate()?;
        vf.validate()?;
        energy_model.validate()?;
        policy.validate()?;
        Ok(Self {
            bundle,
            vf,
            ldo,
            energy_model,
            policy,
        })
    }

    fn charged_energy(&self, voltage: f64, trace: &OpTrace, freq: f64) -> f64 {
        if self.policy.sparse_execution {
            energy(self.energy_model, voltage, trace, freq)
        } else {
            let mut dense = trace.clone();
            dense.embedding.vmacs_skipped = 0;
            for layer in dense.layers.iter_mut() {
                layer.vmacs_skipped = 0;
            }
            energy(self.energy_model, voltage, &dense, freq)
        }
    }

    fn charge_entropy(&self, counts: &mut LayerCounts) {
        counts.entropy_evals += 1;
        counts.entropy_elems += self.bundle.config.num_classes as u64;
    }

    /// All layers at nominal voltage and maximum frequency; exit at the
    /// final layer, classifier evaluated there only.
    pub fn run_base(&self, tokens: &[u32]) -> Result<SentenceResult> {
        let n = self.policy.mac_tile;
        let layers = self.bundle.config.num_layers;
        let nominal = self.vf.nominal();
        let mut trace = OpTrace::new(n);
        let (mut state, embed_counts) = EncoderState::embed(tokens, self.bundle, n)?;
        trace.embedding = embed_counts;
        let mut logits = Vec::new();
        for l in 1..=layers {
            let step = state.step_layer(l == layers)?;
            trace.layers.push(step.counts);
            trace.heads_skipped += step.heads_skipped;
            if let Some(out) = step.logits {
                logits = out;
            }
        }
        let cycles = trace.cycle_count(n);
        let latency_s = cycles as f64 / nominal.max_frequency_hz;
        let energy_j = self.charged_energy(nominal.voltage, &trace, nominal.max_frequency_hz);
        let entropy_at_exit = entropy_stable(&logits);
        Ok(SentenceResult {
            exit_layer: layers,
            predicted_layer: None,
            latency_s,
            energy_j,
            deadline_met: self
                .policy
                .latency_target_s
                .map(|t| latency_s <= t)
                .unwrap_or(true),
            dvfs_feasible: true,
            vf_schedule: vec![VfSegment {
                first_layer: 1,
                last_layer: layers,
                voltage: nominal.voltage,
                frequency_hz: nominal.max_frequency_hz,
            }],
            logits,
            entropy_at_exit,
        })
    }

    /// Entropy check after every layer at nominal V/F; exit on the first
    /// sub-threshold entropy.
    pub fn run_conventional_ee(&self, tokens: &[u32]) -> Result<SentenceResult> {
        let n = self.policy.mac_tile;
        let layers = self.bundle.config.num_layers;
        let threshold = self.policy.entropy_threshold;
        let nominal = self.vf.nominal();
        let mut trace = OpTrace::new(n);
        let (mut state, embed_counts) = EncoderState::embed(tokens, self.bundle, n)?;
        trace.embedding = embed_counts;

        let mut exit_layer = layers;
        let mut logits = Vec::new();
        let mut entropy_at_exit = 0.0;
        for l in 1..=layers {
            let step = state.step_layer(true)?;
            let mut counts = step.counts;
            self.charge_entropy(&mut counts);
            trace.layers.push(counts);
            trace.heads_skipped += step.heads_skipped;
            logits = step.logits.expect("off-ramp requested");
            entropy_at_exit = entropy_stable(&logits);
            if assess_exit(entropy_at_exit, threshold) {
                exit_layer = l;
                break;
            }
        }
        let cycles = trace.cycle_count(n);
        let latency_s = cycles as f64 / nominal.max_frequency_hz;
        let energy_j = self.charged_energy(nominal.voltage, &trace, nominal.max_frequency_hz);
        Ok(SentenceResult {
            exit_layer,
            predicted_layer: None,
            latency_s,
            energy_j,
            deadline_met: self
                .policy
                .latency_target_s
                .map(|t| latency_s <= t)
                .unwrap_or(true),
            dvfs_feasible: true,
            vf_schedule: vec![VfSegment {
                first_layer: 1,
                last_layer: exit_layer,
                voltage: nominal.voltage,
                frequency_hz: nominal.max_frequency_hz,
            }],
            logits,
            entropy_at_exit,
        })
    }

    /// Latency-aware inference: layer 1 at nominal, exit-layer forecast from
    /// the layer-1 entropy, then the remaining layers at the lowest V/F that
    /// still meets the deadline (transition cap reserved), with per-layer
    /// early stopping and a forced exit at the predicted layer.
    pub fn run_latency_aware<F: ExitForecaster + ?Sized>(
        &self,
        tokens: &[u32],
        forecaster: &F,
    ) -> Result<SentenceResult> {
        let n = self.policy.mac_tile;
        let cfg = &self.bundle.config;
        let layers = cfg.num_layers;
        let threshold = self.policy.entropy_threshold;
        let target_s = self.policy.latency_target_s.ok_or_else(|| {
            CoreError::InvalidFormat("latency-aware policy needs a latency target".into())
        })?;
        let nominal = self.vf.nominal();
        let f_nom = nominal.max_frequency_hz;

        let mut nom_trace = OpTrace::new(n);
        let (mut state, embed_counts) = EncoderState::embed(tokens, self.bundle, n)?;
        nom_trace.embedding = embed_counts;

        // Layer 1 at nominal voltage and maximum frequency.
        let step = state.step_layer(true)?;
        let mut l1_counts = step.counts;
        self.charge_entropy(&mut l1_counts);
        nom_trace.heads_skipped += step.heads_skipped;
        let logits1 = step.logits.expect("off-ramp requested");
        let h1 = entropy_stable(&logits1);
        // Per-layer cycle template: every layer shares one weight set and
        // one shape, so the remaining-cycle estimate is exact.
        let layer_template = l1_counts;

        if assess_exit(h1, threshold) {
            nom_trace.layers.push(l1_counts);
            let latency_s = nom_trace.cycle_count(n) as f64 / f_nom;
            let energy_j = self.charged_energy(nominal.voltage, &nom_trace, f_nom);
            return Ok(SentenceResult {
                exit_layer: 1,
                predicted_layer: None,
                latency_s,
                energy_j,
                deadline_met: latency_s <= target_s,
                dvfs_feasible: true,
                vf_schedule: vec![VfSegment {
                    first_layer: 1,
                    last_layer: 1,
                    voltage: nominal.voltage,
                    frequency_hz: f_nom,
                }],
                logits: logits1,
                entropy_at_exit: h1,
            });
        }

        // Forecast and plan V/F for layers 2..=predicted.
        let predicted = forecaster.forecast(h1).clamp(1, layers);
        l1_counts.lut_lookups += 1;
        nom_trace.layers.push(l1_counts);
        let elapsed_cycles = nom_trace.cycle_count(n);
        let t_elapsed = elapsed_cycles as f64 / f_nom;

        if predicted == 1 {
            // Forced exit at the predicted layer, entropy notwithstanding.
            let latency_s = t_elapsed;
            let energy_j = self.charged_energy(nominal.voltage, &nom_trace, f_nom);
            return Ok(SentenceResult {
                exit_layer: 1,
                predicted_layer: Some(1),
                latency_s,
                energy_j,
                deadline_met: latency_s <= target_s,
                dvfs_feasible: true,
                vf_schedule: vec![VfSegment {
                    first_layer: 1,
                    last_layer: 1,
                    voltage: nominal.voltage,
                    frequency_hz: f_nom,
                }],
                logits: logits1,
                entropy_at_exit: h1,
            });
        }

        let template_trace = OpTrace {
            tile_n: n,
            embedding: LayerCounts::default(),
            layers: vec![layer_template],
            heads_skipped: 0,
        };
        let per_layer_cycles = template_trace.cycle_count(n);
        let remaining_cycles = (predicted as u64 - 1) * per_layer_cycles;

        // Reserve the worst-case settle time so the deadline survives the
        // voltage transition.
        let reserve_s = self.ldo.settle_cap_ns * 1e-9;
        let mut feasible = true;
        let mut point = nominal;
        let mut freq = f_nom;
        let mut ramp: Option<(Transition, Transition)> = None;
        match required_frequency(remaining_cycles, target_s, t_elapsed + reserve_s) {
            Err(_) => feasible = false,
            Ok(f_req) => {
                let (p, ok) = select_vf(self.vf, f_req);
                if !ok {
                    feasible = false;
                } else if libm::fabs(p.voltage - nominal.voltage) > 1e-12 {
                    // Scale down; a same-point selection keeps nominal and
                    // skips the pointless relock.
                    point = p;
                    freq = f_req;
                    ramp = Some((
                        transition(self.ldo, nominal, p),
                        transition(self.ldo, p, nominal),
                    ));
                }
            }
        }

        // Layers 2..=predicted with early stopping.
        let mut red_trace = OpTrace::new(n);
        let mut exit_layer = predicted;
        let mut logits = logits1;
        let mut entropy_at_exit = h1;
        for l in 2..=predicted {
            let step = state.step_layer(true)?;
            let mut counts = step.counts;
            self.charge_entropy(&mut counts);
            red_trace.layers.push(counts);
            red_trace.heads_skipped += step.heads_skipped;
            logits = step.logits.expect("off-ramp requested");
            entropy_at_exit = entropy_stable(&logits);
            if assess_exit(entropy_at_exit, threshold) {
                exit_layer = l;
                break;
            }
        }

        let (down_time_s, transition_energy) = match &ramp {
            Some((down, up)) => (down.time_ns * 1e-9, down.energy_j + up.energy_j),
            None => (0.0, 0.0),
        };
        let seg_time = red_trace.cycle_count(n) as f64 / freq;
        let latency_s = t_elapsed + down_time_s + seg_time;
        let energy_j = self.charged_energy(nominal.voltage, &nom_trace, f_nom)
            + self.charged_energy(point.voltage, &red_trace, freq)
            + transition_energy;

        let mut vf_schedule = vec![VfSegment {
            first_layer: 1,
            last_layer: 1,
            voltage: nominal.voltage,
            frequency_hz: f_nom,
        }];
        vf_schedule.push(VfSegment {
            first_layer: 2,
            last_layer: exit_layer,
            voltage: point.voltage,
            frequency_hz: freq,
        });

        Ok(SentenceResult {
            exit_layer,
            predicted_layer: Some(predicted),
            latency_s,
            energy_j,
            deadline_met: latency_s <= target_s,
            dvfs_feasible: feasible,
            vf_schedule,
            logits,
            entropy_at_exit,
        })
    }

    /// Run a whole stream under the configured policy and aggregate.
    pub fn run_stream<F: ExitForecaster + ?Sized>(
        &self,
        sentences: &[Vec<u32>],
        forecaster: Option<&F>,
    ) -> Result<StreamReport> {
        if sentences.is_empty() {
            return Err(CoreError::InvalidInput("empty sentence stream".into()));
        }
        let mut results = Vec::with_capacity(sentences.len());
        for tokens in sentences {
            let result = match self.policy.policy {
                Policy::Base => self.run_base(tokens)?,
                Policy::ConventionalEe => self.run_conventional_ee(tokens)?,
                Policy::LatencyAware => {
                    let f = forecaster.ok_or_else(|| {
                        CoreError::InvalidInput("latency-aware stream needs a forecaster".into())
                    })?;
                    self.run_latency_aware(tokens, f)?
                }
            };
            results.push(result);
        }

        let count = results.len() as f64;
        let mean_exit_layer = results.iter().map(|r| r.exit_layer as f64).sum::<f64>() / count;
        let predicted: Vec<f64> = results
            .iter()
            .filter_map(|r| r.predicted_layer.map(|p| p as f64))
            .collect();
        let mean_predicted_layer = if predicted.is_empty() {
            None
        } else {
            Some(predicted.iter().sum::<f64>() / predicted.len() as f64)
        };
        let mean_latency_s = results.iter().map(|r| r.latency_s).sum::<f64>() / count;
        let inference_energy: f64 = results.iter().map(|r| r.energy_j).sum();
        let misses = results.iter().filter(|r| !r.deadline_met).count();

        // Latency-aware streams arrive once per target period; the gap is
        // parked at the standby voltage.
        let standby_energy_j = match (self.policy.policy, self.policy.latency_target_s) {
            (Policy::LatencyAware, Some(t)) => results
                .iter()
                .map(|r| (t - r.latency_s).max(0.0) * self.energy_model.standby_power_w)
                .sum(),
            _ => 0.0,
        };

        Ok(StreamReport {
            mean_exit_layer,
            mean_predicted_layer,
            mean_latency_s,
            mean_energy_j: inference_energy / count,
            total_energy_j: inference_energy + standby_energy_j,
            standby_energy_j,
            deadline_miss_rate: misses as f64 / count,
            results,
        })
    }

    /// Full-depth forward passes recording the off-ramp entropy of every
    /// layer; the training food for the exit predictor.
    pub fn collect_traces(&self, sentences: &[Vec<u32>]) -> Result<Vec<EntropyTrace>> {
        let layers = self.bundle.config.num_layers;
        sentences
            .iter()
            .map(|tokens| {
                let out = crate::model::encoder_forward(
                    tokens,
                    self.bundle,
                    layers,
                    self.policy.mac_tile,
                )?;
                EntropyTrace::new(out.logits.iter().map(|l| entropy_stable(l)).collect())
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::earlyexit::ConstForecaster;
    use crate::model::{AttentionSpans, EncoderConfig};

    fn toy_setup(seed: u64) -> (EncoderBundle, VfTable, LdoAdpllModel, EnergyModel) {
        let cfg = EncoderConfig::toy();
        let spans = AttentionSpans::full(cfg.num_heads, cfg.seq_len);
        let bundle = EncoderBundle::synthetic_with_gain(&cfg, spans, 0.5, 3.0, seed).unwrap();
        (
            bundle,
            VfTable::default_sweep(),
            LdoAdpllModel::default(),
            EnergyModel::default(),
        )
    }

    fn one_sentence(bundle: &EncoderBundle, seed: u64) -> Vec<u32> {
        synth_sentences(1, bundle.config.seq_len, bundle.config.vocab_size, seed)
            .pop()
            .unwrap()
    }

    #[test]
    fn base_runs_all_layers_at_nominal() {
        let (bundle, vf, ldo, em) = toy_setup(1);
        let policy = PolicyConfig::new(Policy::Base, 0.0);
        let sim = Simulator::new(&bundle, &vf, &ldo, &em, &policy).unwrap();
        let r = sim.run_base(&one_sentence(&bundle, 1)).unwrap();
        assert_eq!(r.exit_layer, bundle.config.num_layers);
        assert_eq!(r.vf_schedule.len(), 1);
        assert!((r.vf_schedule[0].voltage - 0.8).abs() < 1e-12);
        assert!(r.latency_s > 0.0 && r.energy_j > 0.0);
    }

    #[test]
    fn base_is_the_energy_model_applied_to_the_full_trace() {
        let (bundle, vf, ldo, em) = toy_setup(1);
        let policy = PolicyConfig::new(Policy::Base, 0.0);
        let sim = Simulator::new(&bundle, &vf, &ldo, &em, &policy).unwrap();
        let tokens = one_sentence(&bundle, 1);
        let r = sim.run_base(&tokens).unwrap();

        // Rebuild the same trace by hand: embed, then every layer, the
        // classifier only at the last one.
        let n = policy.mac_tile;
        let layers = bundle.config.num_layers;
        let mut trace = OpTrace::new(n);
        let (mut state, embed_counts) = EncoderState::embed(&tokens, &bundle, n).unwrap();
        trace.embedding = embed_counts;
        for l in 1..=layers {
            let step = state.step_layer(l == layers).unwrap();
            trace.layers.push(step.counts);
        }
        let nominal = vf.nominal();
        assert_eq!(
            r.latency_s,
            trace.cycle_count(n) as f64 / nominal.max_frequency_hz
        );
        assert_eq!(
            r.energy_j,
            energy(&em, nominal.voltage, &trace, nominal.max_frequency_hz)
        );
    }

    #[test]
    fn ee_with_zero_threshold_matches_base_exit() {
        let (bundle, vf, ldo, em) = toy_setup(2);
        let policy = PolicyConfig::new(Policy::ConventionalEe, 0.0);
        let sim = Simulator::new(&bundle, &vf, &ldo, &em, &policy).unwrap();
        let tokens = one_sentence(&bundle, 2);
        let ee = sim.run_conventional_ee(&tokens).unwrap();
        let base = sim.run_base(&tokens).unwrap();
        assert_eq!(ee.exit_layer, base.exit_layer);
        assert_eq!(ee.logits, base.logits);
    }

    #[test]
    fn ee_with_huge_threshold_exits_at_one() {
        let (bundle, vf, ldo, em) = toy_setup(3);
        let policy = PolicyConfig::new(Policy::ConventionalEe, 10.0);
        let sim = Simulator::new(&bundle, &vf, &ldo, &em, &policy).unwrap();
        let r = sim.run_conventional_ee(&one_sentence(&bundle, 3)).unwrap();
        assert_eq!(r.exit_layer, 1);
    }

    #[test]
    fn ee_exit_layer_monotone_in_threshold() {
        let (bundle, vf, ldo, em) = toy_setup(4);
        for s in 0..5u64 {
            let tokens = one_sentence(&bundle, 100 + s);
            let mut last_exit = usize::MAX;
            for et in [0.0, 0.05, 0.1, 0.2, 0.4, 0.69, 10.0] {
                let policy = PolicyConfig::new(Policy::ConventionalEe, et);
                let sim = Simulator::new(&bundle, &vf, &ldo, &em, &policy).unwrap();
                let r = sim.run_conventional_ee(&tokens).unwrap();
                assert!(r.exit_layer <= last_exit, "E_T={et}");
                last_exit = r.exit_layer;
            }
        }
    }

    #[test]
    fn lai_exit_at_layer_one_skips_dvfs() {
        let (bundle, vf, ldo, em) = toy_setup(5);
        let mut policy = PolicyConfig::new(Policy::LatencyAware, 10.0);
        policy.latency_target_s = Some(50e-3);
        let sim = Simulator::new(&bundle, &vf, &ldo, &em, &policy).unwrap();
        let r = sim
            .run_latency_aware(&one_sentence(&bundle, 4), &ConstForecaster(4))
            .unwrap();
        assert_eq!(r.exit_layer, 1);
        assert_eq!(r.predicted_layer, None);
        assert_eq!(r.vf_schedule.len(), 1);
    }

    #[test]
    fn lai_degenerate_forecaster_runs_to_last_layer() {
        let (bundle, vf, ldo, em) = toy_setup(6);
        let layers = bundle.config.num_layers;
        let mut policy = PolicyConfig::new(Policy::LatencyAware, 0.0);
        policy.latency_target_s = Some(50e-3);
        let sim = Simulator::new(&bundle, &vf, &ldo, &em, &policy).unwrap();
        let tokens = one_sentence(&bundle, 5);
        let r = sim
            .run_latency_aware(&tokens, &ConstForecaster(layers))
            .unwrap();
        assert_eq!(r.exit_layer, layers);
        assert_eq!(r.predicted_layer, Some(layers));
        // Plenty of slack: the tail runs below nominal voltage.
        assert!(r.vf_schedule[1].voltage < 0.8);
        let base = sim.run_base(&tokens).unwrap();
        assert_eq!(r.logits, base.logits);
    }

    #[test]
    fn lai_never_computes_beyond_prediction() {
        let (bundle, vf, ldo, em) = toy_setup(7);
        let mut policy = PolicyConfig::new(Policy::LatencyAware, 0.2);
        policy.latency_target_s = Some(50e-3);
        let sim = Simulator::new(&bundle, &vf, &ldo, &em, &policy).unwrap();
        for s in 0..10u64 {
            let tokens = one_sentence(&bundle, 200 + s);
            for p in 1..=bundle.config.num_layers {
                let r = sim.run_latency_aware(&tokens, &ConstForecaster(p)).unwrap();
                if let Some(pred) = r.predicted_layer {
                    assert!(r.exit_layer <= pred);
                    assert_eq!(pred, p);
                }
            }
        }
    }

    #[test]
    fn lai_tight_deadline_is_flagged_infeasible() {
        let (bundle, vf, ldo, em) = toy_setup(8);
        let layers = bundle.config.num_layers;
        let mut policy = PolicyConfig::new(Policy::LatencyAware, 0.0);
        // One nanosecond: nothing fits.
        policy.latency_target_s = Some(1e-9);
        let sim = Simulator::new(&bundle, &vf, &ldo, &em, &policy).unwrap();
        let r = sim
            .run_latency_aware(&one_sentence(&bundle, 6), &ConstForecaster(layers))
            .unwrap();
        assert!(!r.dvfs_feasible);
        assert!(!r.deadline_met);
        // Runs on at nominal.
        assert!((r.vf_schedule[1].voltage - 0.8).abs() < 1e-12);
    }

    #[test]
    fn lai_feasible_runs_meet_the_deadline() {
        let (bundle, vf, ldo, em) = toy_setup(9);
        let layers = bundle.config.num_layers;
        // Base latency at nominal sets the scale for a tight-but-feasible
        // target.
        let policy_base = PolicyConfig::new(Policy::Base, 0.0);
        let sim_base = Simulator::new(&bundle, &vf, &ldo, &em, &policy_base).unwrap();
        let base_latency = sim_base
            .run_base(&one_sentence(&bundle, 7))
            .unwrap()
            .latency_s;

        for (i, scale) in [1.05, 1.3, 2.0, 10.0].iter().enumerate() {
            let mut policy = PolicyConfig::new(Policy::LatencyAware, 0.1);
            policy.latency_target_s = Some(base_latency * scale);
            let sim = Simulator::new(&bundle, &vf, &ldo, &em, &policy).unwrap();
            for s in 0..8u64 {
                let tokens = one_sentence(&bundle, 300 + s + i as u64 * 100);
                let r = sim
                    .run_latency_aware(&tokens, &ConstForecaster(layers))
                    .unwrap();
                if r.dvfs_feasible {
                    assert!(
                        r.latency_s <= policy.latency_target_s.unwrap(),
                        "scale={scale} s={s}: latency {} > target {}",
                        r.latency_s,
                        policy.latency_target_s.unwrap()
                    );
                    assert!(r.deadline_met);
                }
            }
        }
    }

    #[test]
    fn oracle_forecaster_matches_ee_and_saves_energy() {
        let (bundle, vf, ldo, em) = toy_setup(10);
        let threshold = 0.35;
        let mut policy = PolicyConfig::new(Policy::ConventionalEe, threshold);
        policy.latency_target_s = Some(50e-3);
        let sim = Simulator::new(&bundle, &vf, &ldo, &em, &policy).unwrap();
        let mut lai_policy = policy.clone();
        lai_policy.policy = Policy::LatencyAware;
        let lai = Simulator::new(&bundle, &vf, &ldo, &em, &lai_policy).unwrap();
        let base_policy = PolicyConfig::new(Policy::Base, 0.0);
        let base = Simulator::new(&bundle, &vf, &ldo, &em, &base_policy).unwrap();

        for s in 0..12u64 {
            let tokens = one_sentence(&bundle, 400 + s);
            let ee = sim.run_conventional_ee(&tokens).unwrap();
            let oracle = ConstForecaster(ee.exit_layer);
            let la = lai.run_latency_aware(&tokens, &oracle).unwrap();
            assert_eq!(la.exit_layer, ee.exit_layer, "s={s}");
            if la.dvfs_feasible && ee.exit_layer < bundle.config.num_layers {
                let b = base.run_base(&tokens).unwrap();
                assert!(la.energy_j <= ee.energy_j, "s={s}");
                assert!(ee.energy_j <= b.energy_j, "s={s}");
            }
        }
    }

    #[test]
    fn stream_aggregates_are_consistent() {
        let (bundle, vf, ldo, em) = toy_setup(11);
        let policy = PolicyConfig::new(Policy::ConventionalEe, 0.3);
        let sim = Simulator::new(&bundle, &vf, &ldo, &em, &policy).unwrap();
        let sentences = synth_sentences(20, bundle.config.seq_len, bundle.config.vocab_size, 8);
        let report = sim.run_stream::<ConstForecaster>(&sentences, None).unwrap();
        assert_eq!(report.results.len(), 20);
        let mean: f64 = report
            .results
            .iter()
            .map(|r| r.exit_layer as f64)
            .sum::<f64>()
            / 20.0;
        assert!((report.mean_exit_layer - mean).abs() < 1e-12);
        assert_eq!(report.standby_energy_j, 0.0);

        let single = sim
            .run_stream::<ConstForecaster>(&sentences[..1], None)
            .unwrap();
        assert_eq!(
            single.results[0],
            sim.run_conventional_ee(&sentences[0]).unwrap()
        );
        assert!((single.mean_latency_s - single.results[0].latency_s).abs() < 1e-18);
    }

    #[test]
    fn stream_charges_standby_between_latency_aware_sentences() {
        let (bundle, vf, ldo, em) = toy_setup(12);
        let mut policy = PolicyConfig::new(Policy::LatencyAware, 0.3);
        policy.latency_target_s = Some(1e-3);
        let sim = Simulator::new(&bundle, &vf, &ldo, &em, &policy).unwrap();
        let sentences = synth_sentences(5, bundle.config.seq_len, bundle.config.vocab_size, 9);
        let f = ConstForecaster(bundle.config.num_layers);
        let report = sim.run_stream(&sentences, Some(&f)).unwrap();
        assert!(report.standby_energy_j > 0.0);
        assert!(report.total_energy_j > report.mean_energy_j * 5.0);
    }

    #[test]
    fn sparse_flag_changes_energy_not_results_or_cycles() {
        let cfg = EncoderConfig::toy();
        let spans = AttentionSpans::new(vec![3, 0], cfg.seq_len).unwrap();
        // Half-density embeddings give the PU something to skip.
        let bundle = EncoderBundle::synthetic_with_gain(&cfg, spans, 0.3, 3.0, 13).unwrap();
        let vf = VfTable::default_sweep();
        let ldo = LdoAdpllModel::default();
        let em = EnergyModel::default();
        let mut sparse_policy = PolicyConfig::new(Policy::ConventionalEe, 0.2);
        sparse_policy.sparse_execution = true;
        let mut dense_policy = sparse_policy.clone();
        dense_policy.sparse_execution = false;

        let tokens = synth_sentences(1, cfg.seq_len, cfg.vocab_size, 10)
            .pop()
            .unwrap();
        let sparse = Simulator::new(&bundle, &vf, &ldo, &em, &sparse_policy)
            .unwrap()
            .run_conventional_ee(&tokens)
            .unwrap();
        let dense = Simulator::new(&bundle, &vf, &ldo, &em, &dense_policy)
            .unwrap()
            .run_conventional_ee(&tokens)
            .unwrap();
        assert_eq!(sparse.exit_layer, dense.exit_layer);
        assert_eq!(sparse.logits, dense.logits);
        assert_eq!(sparse.latency_s, dense.latency_s);
        assert!(sparse.energy_j < dense.energy_j);
    }

    #[test]
    fn energy_nonincreasing_in_latency_target() {
        let (bundle, vf, ldo, em) = toy_setup(15);
        let layers = bundle.config.num_layers;
        let tokens = one_sentence(&bundle, 16);
        // Anchor the grid to the nominal full-model latency.
        let base_policy = PolicyConfig::new(Policy::Base, 0.0);
        let base = Simulator::new(&bundle, &vf, &ldo, &em, &base_policy).unwrap();
        let t0 = base.run_base(&tokens).unwrap().latency_s;

        let mut last = f64::INFINITY;
        for scale in [0.5, 0.9, 1.05, 1.2, 1.5, 2.0, 4.0, 20.0, 1000.0] {
            let mut policy = PolicyConfig::new(Policy::LatencyAware, 0.0);
            policy.latency_target_s = Some(t0 * scale);
            let sim = Simulator::new(&bundle, &vf, &ldo, &em, &policy).unwrap();
            let r = sim
                .run_latency_aware(&tokens, &ConstForecaster(layers))
                .unwrap();
            assert!(
                r.energy_j <= last + 1e-18,
                "scale={scale}: {} > {last}",
                r.energy_j
            );
            last = r.energy_j;
        }
    }

    #[test]
    fn account_cycles_shrinks_quadratically_with_tile() {
        use crate::numerics::{matmul_tiled, QuantTensor};
        let vals: Vec<f64> = (0..128 * 128)
            .map(|i| (i % 13) as f64 / 7.0 - 0.9)
            .collect();
        let a = QuantTensor::quantize_fit(&vals, vec![128, 128], 4).unwrap();
        let mut t8 = OpTrace::new(8);
        let (_, s8) = matmul_tiled(&a, &a, 8).unwrap();
        t8.layers.push(LayerCounts {
            macs: s8.macs,
            vmac_invocations: s8.vmac_invocations,
            ..LayerCounts::default()
        });
        let mut t16 = OpTrace::new(16);
        let (_, s16) = matmul_tiled(&a, &a, 16).unwrap();
        t16.layers.push(LayerCounts {
            macs: s16.macs,
            vmac_invocations: s16.vmac_invocations,
            ..LayerCounts::default()
        });
        let c8 = account_cycles(&t8, 8);
        let c16 = account_cycles(&t16, 16);
        assert_eq!(c8, 4 * c16);
        assert_eq!(account_cycles(&OpTrace::new(16), 16), 0);
    }

    #[test]
    fn collect_traces_yields_per_layer_entropies() {
        let (bundle, vf, ldo, em) = toy_setup(14);
        let policy = PolicyConfig::new(Policy::Base, 0.0);
        let sim = Simulator::new(&bundle, &vf, &ldo, &em, &policy).unwrap();
        let sentences = synth_sentences(3, bundle.config.seq_len, bundle.config.vocab_size, 11);
        let traces = sim.collect_traces(&sentences).unwrap();
        assert_eq!(traces.len(), 3);
        for t in &traces {
            assert_eq!(t.per_layer.len(), bundle.config.num_layers);
            assert!(t.per_layer.iter().all(|&h| h >= 0.0));
        }
    }
}
