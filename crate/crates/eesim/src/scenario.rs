//! Scenario execution: load a scenario file, sweep (policy, MAC size,
//! latency target, entropy threshold) points over one seeded sentence
//! stream, and emit JSON and CSV reports. Optionally runs an eNVM
//! fault-injection campaign against the bundle's embedding table.

use std::path::{Path, PathBuf};

use eesim_core::dvfs::{EnergyModel, LdoAdpllModel, VfTable};
use eesim_core::earlyexit::ExitLut;
use eesim_core::envm::{
    envm_geometry, power_on_cost, run_trials, EnvmGeometry, PowerOnCost, TrialStats,
};
use eesim_core::model::{encoder_forward, EncoderBundle, EncoderConfig};
use eesim_core::simulator::{synth_sentences, Policy, PolicyConfig, Simulator, StreamReport};
use eesim_core::sparse::BitmaskTensor;
use serde::{Deserialize, Serialize};

use crate::files::{
    load_bundle, load_energy_model, load_lut, load_vf_table, read_json, write_json, EnvmFileConfig,
};
use crate::{AppError, AppResult};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepAxes {
    pub mac_tiles: Vec<usize>,
    pub latency_targets_ms: Vec<f64>,
    pub entropy_thresholds: Vec<f64>,
}

/// Scenario file: which bundle, which policies, which sweep grid, and the
/// master seed everything derives from.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    pub bundle: PathBuf,
    pub policies: Vec<Policy>,
    pub sweep: SweepAxes,
    #[serde(default)]
    pub predictor_lut: Option<PathBuf>,
    #[serde(default)]
    pub vf_table: Option<PathBuf>,
    #[serde(default)]
    pub energy_model: Option<PathBuf>,
    #[serde(default)]
    pub envm: Option<PathBuf>,
    #[serde(default = "default_true")]
    pub sparse_execution: bool,
    pub num_sentences: usize,
    pub master_seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

fn default_true() -> bool {
    true
}

impl Scenario {
    pub fn load(path: &Path) -> AppResult<Self> {
        let mut scenario: Scenario = read_json(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut scenario.bundle);
        for opt in [
            &mut scenario.predictor_lut,
            &mut scenario.vf_table,
            &mut scenario.energy_model,
            &mut scenario.envm,
        ] {
            if let Some(p) = opt.as_mut() {
                resolve(p);
            }
        }
        if let Some(p) = scenario.output_dir.as_mut() {
            resolve(p);
        }
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn validate(&self) -> AppResult<()> {
        if self.policies.is_empty() {
            return Err(AppError::config("scenario lists no policies"));
        }
        if self.sweep.mac_tiles.is_empty()
            || self.sweep.latency_targets_ms.is_empty()
            || self.sweep.entropy_thresholds.is_empty()
        {
            return Err(AppError::config("sweep axes must be nonempty"));
        }
        if self.num_sentences == 0 {
            return Err(AppError::config("num_sentences must be >= 1"));
        }
        if !self.bundle.join(crate::files::BUNDLE_MANIFEST).is_file() {
            return Err(AppError::config(format!(
                "bundle not found: {}",
                self.bundle.display()
            )));
        }
        for (label, path) in [
            ("predictor_lut", &self.predictor_lut),
            ("vf_table", &self.vf_table),
            ("energy_model", &self.energy_model),
            ("envm", &self.envm),
        ] {
            if let Some(p) = path {
                if !p.is_file() {
                    return Err(AppError::config(format!(
                        "{label} not found: {}",
                        p.display()
                    )));
                }
            }
        }
        if self.policies.contains(&Policy::LatencyAware) && self.predictor_lut.is_none() {
            return Err(AppError::config("latency_aware policy needs predictor_lut"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SentenceRow {
    pub sentence_id: usize,
    pub exit_layer: usize,
    pub predicted_layer: Option<usize>,
    pub latency_ms: f64,
    pub energy_j: f64,
    pub deadline_met: bool,
    pub entropy_at_exit: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Aggregate {
    pub mean_exit_layer: f64,
    pub mean_predicted_layer: Option<f64>,
    pub mean_latency_ms: f64,
    pub mean_energy_j: f64,
    pub total_energy_j: f64,
    pub standby_energy_j: f64,
    pub deadline_miss_rate: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunRow {
    pub policy: Policy,
    pub mac_tile: usize,
    pub latency_target_ms: f64,
    pub entropy_threshold: f64,
    pub aggregate: Aggregate,
    pub sentences: Vec<SentenceRow>,
}

#[derive(Debug, Clone, Serialize)]
pub struct EnvmSection {
    pub config: EnvmFileConfig,
    pub stats: TrialStats,
    pub geometry: EnvmGeometry,
    pub power_on: PowerOnCost,
    /// Sigma and cost constants are calibrated stand-ins.
    pub calibrated: bool,
}

/// Everything the run resolved, defaults included, for reproducibility.
#[derive(Debug, Clone, Serialize)]
pub struct ResolvedConfig {
    pub encoder: EncoderConfig,
    pub spans: Vec<usize>,
    pub vf_table: VfTable,
    pub energy_model: EnergyModel,
    pub sparse_execution: bool,
    pub num_sentences: usize,
    pub policies: Vec<Policy>,
    pub sweep: SweepAxes,
}

#[derive(Debug, Clone, Serialize)]
pub struct Report {
    pub version: u32,
    pub scenario: String,
    pub master_seed: u64,
    /// Energy/cost constants in this report are calibrated stand-ins.
    pub calibrated: bool,
    pub resolved: ResolvedConfig,
    pub runs: Vec<RunRow>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub envm: Option<EnvmSection>,
}

pub struct ReportPaths {
    pub json: PathBuf,
    pub csv: PathBuf,
}

/// Final-layer argmax classes of the bundle on a fixed sentence set.
pub fn model_predictions(
    bundle: &EncoderBundle,
    sentences: &[Vec<u32>],
    mac_tile: usize,
) -> AppResult<Vec<usize>> {
    sentences
        .iter()
        .map(|tokens| {
            let out = encoder_forward(tokens, bundle, bundle.config.num_layers, mac_tile)
                .map_err(AppError::from)?;
            let logits = out.logits.last().expect("at least one layer");
            Ok(argmax(logits))
        })
        .collect()
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

/// Accuracy of a faulty embedding: agreement with the fault-free model's
/// predictions on the evaluation sentences.
pub fn embedding_agreement_eval<'a>(
    bundle: &'a EncoderBundle,
    sentences: &'a [Vec<u32>],
    clean_predictions: &'a [usize],
    mac_tile: usize,
) -> impl FnMut(&BitmaskTensor) -> eesim_core::error::Result<f64> + 'a {
    move |tensor: &BitmaskTensor| {
        let mut faulty = bundle.clone();
        faulty.embedding = tensor.clone();
        let mut hits = 0usize;
        for (tokens, &clean) in sentences.iter().zip(clean_predictions) {
            let out = encoder_forward(tokens, &faulty, faulty.config.num_layers, mac_tile)?;
            let logits = out.logits.last().expect("at least one layer");
            if argmax(logits) == clean {
                hits += 1;
            }
        }
        Ok(hits as f64 / sentences.len() as f64)
    }
}

/// Number of evaluation sentences behind the eNVM accuracy closure.
pub const ENVM_EVAL_SENTENCES: usize = 16;

fn run_envm_section(
    scenario: &Scenario,
    bundle: &EncoderBundle,
    master_seed: u64,
    mac_tile: usize,
) -> AppResult<EnvmSection> {
    let cfg: EnvmFileConfig = match &scenario.envm {
        Some(path) => read_json(path)?,
        None => EnvmFileConfig::default(),
    };
    let sentences = synth_sentences(
        ENVM_EVAL_SENTENCES,
        bundle.config.seq_len,
        bundle.config.vocab_size,
        master_seed.wrapping_add(1),
    );
    let clean = model_predictions(bundle, &sentences, mac_tile)?;
    let eval = embedding_agreement_eval(bundle, &sentences, &clean, mac_tile);
    let stats = run_trials(
        &bundle.embedding,
        &cfg.data,
        &cfg.mask,
        eval,
        cfg.trials,
        master_seed,
    )?;
    let geometry = envm_geometry(&cfg.data, cfg.megabytes)?;
    let power_on = power_on_cost(
        &bundle.embedding,
        &cfg.data,
        &cfg.mask,
        &cfg.conventional,
        cfg.power_cycles,
    )?;
    Ok(EnvmSection {
        config: cfg,
        stats,
        geometry,
        power_on,
        calibrated: true,
    })
}

/// Execute every (policy, sweep point) against one seeded sentence stream
/// and write `report.json` and `sentences.csv` into the output directory.
pub fn run_scenario(
    scenario_path: &Path,
    out_override: Option<&Path>,
    seed_override: Option<u64>,
) -> AppResult<(Report, ReportPaths)> {
    let scenario = Scenario::load(scenario_path)?;
    let master_seed = seed_override.unwrap_or(scenario.master_seed);
    let out_dir = out_override
        .map(Path::to_path_buf)
        .or_else(|| scenario.output_dir.clone())
        .ok_or_else(|| AppError::config("no output directory (scenario output_dir or --out)"))?;

    let bundle = load_bundle(&scenario.bundle)?;
    let vf = match &scenario.vf_table {
        Some(p) => load_vf_table(p)?,
        None => VfTable::default_sweep(),
    };
    let energy_model = match &scenario.energy_model {
        Some(p) => load_energy_model(p)?,
        None => EnergyModel::default(),
    };
    let ldo = LdoAdpllModel::default();
    let lut: Option<ExitLut> = match &scenario.predictor_lut {
        Some(p) => Some(load_lut(p)?),
        None => None,
    };

    let sentences = synth_sentences(
        scenario.num_sentences,
        bundle.config.seq_len,
        bundle.config.vocab_size,
        master_seed,
    );

    let mut runs = Vec::new();
    for &policy in &scenario.policies {
        for &mac_tile in &scenario.sweep.mac_tiles {
            for &target_ms in &scenario.sweep.latency_targets_ms {
                for &threshold in &scenario.sweep.entropy_thresholds {
                    let mut pc = PolicyConfig::new(policy, threshold);
                    pc.mac_tile = mac_tile;
                    pc.sparse_execution = scenario.sparse_execution;
                    if policy == Policy::LatencyAware {
                        pc.latency_target_s = Some(target_ms * 1e-3);
                    }
                    let sim = Simulator::new(&bundle, &vf, &ldo, &energy_model, &pc)?;
                    let report = sim.run_stream(&sentences, lut.as_ref())?;
                    runs.push(to_run_row(policy, mac_tile, target_ms, threshold, report));
                }
            }
        }
    }

    let envm = if scenario.envm.is_some() {
        Some(run_envm_section(
            &scenario,
            &bundle,
            master_seed,
            scenario.sweep.mac_tiles[0],
        )?)
    } else {
        None
    };

    let report = Report {
        version: 1,
        scenario: scenario.name.clone(),
        master_seed,
        calibrated: true,
        resolved: ResolvedConfig {
            encoder: bundle.config.clone(),
            spans: bundle.spans.spans().to_vec(),
            vf_table: vf.clone(),
            energy_model,
            sparse_execution: scenario.sparse_execution,
            num_sentences: scenario.num_sentences,
            policies: scenario.policies.clone(),
            sweep: scenario.sweep.clone(),
        },
        runs,
        envm,
    };

    let paths = ReportPaths {
        json: out_dir.join("report.json"),
        csv: out_dir.join("sentences.csv"),
    };
    write_json(&paths.json, &report)?;
    crate::files::atomic_write(&paths.csv, &render_csv(&report)?)?;
    Ok((report, paths))
}

fn to_run_row(
    policy: Policy,
    mac_tile: usize,
    latency_target_ms: f64,
    entropy_threshold: f64,
    report: StreamReport,
) -> RunRow {
    let sentences = report
        .results
        .iter()
        .enumerate()
        .map(|(i, r)| SentenceRow {
            sentence_id: i,
            exit_layer: r.exit_layer,
            predicted_layer: r.predicted_layer,
            latency_ms: r.latency_s * 1e3,
            energy_j: r.energy_j,
            deadline_met: r.deadline_met,
            entropy_at_exit: r.entropy_at_exit,
        })
        .collect();
    RunRow {
        policy,
        mac_tile,
        latency_target_ms,
        entropy_threshold,
        aggregate: Aggregate {
            mean_exit_layer: report.mean_exit_layer,
            mean_predicted_layer: report.mean_predicted_layer,
            mean_latency_ms: report.mean_latency_s * 1e3,
            mean_energy_j: report.mean_energy_j,
            total_energy_j: report.total_energy_j,
            standby_energy_j: report.standby_energy_j,
            deadline_miss_rate: report.deadline_miss_rate,
        },
        sentences,
    }
}

pub fn policy_name(policy: Policy) -> &'static str {
    match policy {
        Policy::Base => "base",
        Policy::ConventionalEe => "conventional_ee",
        Policy::LatencyAware => "latency_aware",
    }
}

/// Per-sentence CSV across every run:
/// `sentence_id,policy,n,T_ms,E_T,exit_layer,predicted_layer,latency_ms,energy,deadline_met`.
pub fn render_csv(report: &Report) -> AppResult<Vec<u8>> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    writer
        .write_record([
            "sentence_id",
            "policy",
            "n",
            "T_ms",
            "E_T",
            "exit_layer",
            "predicted_layer",
            "latency_ms",
            "energy",
            "deadline_met",
        ])
        .map_err(|e| AppError::Runtime(e.into()))?;
    for run in &report.runs {
        for s in &run.sentences {
            writer
                .write_record([
                    s.sentence_id.to_string(),
                    policy_name(run.policy).to_string(),
                    run.mac_tile.to_string(),
                    format_f64(run.latency_target_ms),
                    format_f64(run.entropy_threshold),
                    s.exit_layer.to_string(),
                    s.predicted_layer.map(|p| p.to_string()).unwrap_or_default(),
                    format_f64(s.latency_ms),
                    format_f64(s.energy_j),
                    s.deadline_met.to_string(),
                ])
                .map_err(|e| AppError::Runtime(e.into()))?;
        }
    }
    writer
        .into_inner()
        .map_err(|e| AppError::Runtime(anyhow::anyhow!("csv flush: {e}")))
}

fn format_f64(v: f64) -> String {
    let mut buf = ryu::Buffer::new();
    buf.format(v).to_string()
}
