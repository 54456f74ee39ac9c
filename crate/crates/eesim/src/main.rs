//! Command-line front end: scenario runs, predictor training, fault
//! campaigns, FLOPs reports, and synthetic bundle/trace generation.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use eesim::files::{
    self, load_bitmask_tensor, read_json, resolve_encoder_config, save_bundle, save_lut,
    span_preset, write_json, EnvmFileConfig, TracesFile,
};
use eesim::scenario::{policy_name, run_scenario};
use eesim::{AppError, AppResult};
use eesim_core::dvfs::{EnergyModel, LdoAdpllModel, VfTable};
use eesim_core::earlyexit::{
    distill_lut, train_predictor, EntropyTrace, TrainParams, DEFAULT_LUT_BINS,
};
use eesim_core::envm::{envm_geometry, power_on_cost, run_trials};
use eesim_core::model::{flops_count, AttentionSpans, EncoderBundle};
use eesim_core::simulator::{synth_sentences, Policy, PolicyConfig, Simulator};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "eesim", version, about = "Early-exit accelerator simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum OutFormat {
    Json,
    Csv,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario file: every (policy, MAC size, latency target,
    /// entropy threshold) point over one seeded sentence stream.
    Run {
        scenario: PathBuf,
        /// Output directory (overrides the scenario's output_dir).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Master seed (overrides the scenario's master_seed).
        #[arg(long)]
        seed: Option<u64>,
        /// Stdout summary format; report.json and sentences.csv are always
        /// written.
        #[arg(long, value_enum, default_value = "json")]
        format: OutFormat,
    },
    /// Train the exit predictor on an entropy-trace file and distill it to
    /// a LUT.
    TrainPredictor {
        #[arg(long)]
        traces: PathBuf,
        #[arg(long)]
        entropy_threshold: f64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 300)]
        epochs: usize,
        #[arg(long, default_value_t = DEFAULT_LUT_BINS)]
        bins: usize,
    },
    /// Fault-injection campaign over a stored bitmask tensor.
    EnvmTrials {
        #[arg(long)]
        tensor: PathBuf,
        /// Campaign config JSON; defaults to MLC2 data + SLC mask.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the config's trial count.
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Analytic FLOPs under attention-span predication.
    Flops {
        /// JSON array of per-head spans.
        #[arg(long, conflicts_with = "preset")]
        spans: Option<PathBuf>,
        /// Task preset: mnli, qqp, sst2, qnli.
        #[arg(long)]
        preset: Option<String>,
        /// Encoder config: preset name (toy, albert-base) or JSON path.
        #[arg(long, default_value = "albert-base")]
        config: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a seeded synthetic weight bundle.
    GenBundle {
        #[arg(long)]
        out: PathBuf,
        /// Encoder config: preset name (toy, albert-base) or JSON path.
        #[arg(long, default_value = "toy")]
        config: String,
        /// Embedding density after magnitude pruning.
        #[arg(long, default_value_t = 0.4)]
        density: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Per-head spans: task preset name or comma-separated integers;
        /// full span everywhere when omitted.
        #[arg(long)]
        spans: Option<String>,
        /// Off-ramp gain growth per layer (drives entropy decay).
        #[arg(long, default_value_t = 3.0)]
        offramp_gain: f64,
    },
    /// Run the bundle over synthetic sentences and record per-layer
    /// off-ramp entropies for predictor training.
    GenTraces {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long, default_value_t = 500)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 16)]
        mac_tile: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}

fn dispatch(command: Command) -> AppResult<()> {
    match command {
        Command::Run {
            scenario,
            out,
            seed,
            format,
        } => cmd_run(&scenario, out.as_deref(), seed, format),
        Command::TrainPredictor {
            traces,
            entropy_threshold,
            out,
            seed,
            epochs,
            bins,
        } => cmd_train_predictor(&traces, entropy_threshold, &out, seed, epochs, bins),
        Command::EnvmTrials {
            tensor,
            config,
            trials,
            seed,
            out,
        } => cmd_envm_trials(&tensor, config.as_deref(), trials, seed, out.as_deref()),
        Command::Flops {
            spans,
            preset,
            config,
            out,
        } => cmd_flops(spans.as_deref(), preset.as_deref(), &config, out.as_deref()),
        Command::GenBundle {
            out,
            config,
            density,
            seed,
            spans,
            offramp_gain,
        } => cmd_gen_bundle(&out, &config, density, seed, spans.as_deref(), offramp_gain),
        Command::GenTraces {
            bundle,
            count,
            seed,
            mac_tile,
            out,
        } => cmd_gen_traces(&bundle, count, seed, mac_tile, &out),
    }
}

fn cmd_run(
    scenario: &Path,
    out: Option<&Path>,
    seed: Option<u64>,
    format: OutFormat,
) -> AppResult<()> {
    let (report, paths) = run_scenario(scenario, out, seed)?;
    match format {
        OutFormat::Json => {
            for run in &report.runs {
                println!(
                    "{}",
                    serde_json::json!({
                        "policy": policy_name(run.policy),
                        "n": run.mac_tile,
                        "T_ms": run.latency_target_ms,
                        "E_T": run.entropy_threshold,
                        "mean_exit_layer": run.aggregate.mean_exit_layer,
                        "mean_latency_ms": run.aggregate.mean_latency_ms,
                        "mean_energy_j": run.aggregate.mean_energy_j,
                        "deadline_miss_rate": run.aggregate.deadline_miss_rate,
                    })
                );
            }
        }
        OutFormat::Csv => {
            println!(
                "policy,n,T_ms,E_T,mean_exit_layer,mean_latency_ms,mean_energy_j,deadline_miss_rate"
            );
            for run in &report.runs {
                println!(
                    "{},{},{},{},{},{},{},{}",
                    policy_name(run.policy),
                    run.mac_tile,
                    run.latency_target_ms,
                    run.entropy_threshold,
                    run.aggregate.mean_exit_layer,
                    run.aggregate.mean_latency_ms,
                    run.aggregate.mean_energy_j,
                    run.aggregate.deadline_miss_rate,
                );
            }
        }
    }
    println!("wrote {}", paths.json.display());
    println!("wrote {}", paths.csv.display());
    Ok(())
}

fn cmd_train_predictor(
    traces_path: &Path,
    entropy_threshold: f64,
    out: &Path,
    seed: u64,
    epochs: usize,
    bins: usize,
) -> AppResult<()> {
    let file: TracesFile = read_json(traces_path)?;
    let traces = file
        .traces
        .iter()
        .map(|t| EntropyTrace::new(t.clone()))
        .collect::<Result<Vec<_>, _>>()?;
    let params = TrainParams {
        epochs,
        seed,
        num_classes: file.num_classes,
        ..TrainParams::default()
    };
    let predictor = train_predictor(&traces, file.num_layers, entropy_threshold, &params)?;
    let distilled = distill_lut(&predictor, bins)?;
    save_lut(out, distilled.lut.as_ref().expect("distilled"))?;
    println!(
        "trained on {} traces: loss {:.6} -> {:.6}; wrote {}",
        traces.len(),
        predictor.training.initial_loss,
        predictor.training.final_loss,
        out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct EnvmTrialsReport {
    config: EnvmFileConfig,
    seed: u64,
    /// Accuracy here is element fidelity: the fraction of elements that
    /// read back bit-exact.
    stats: eesim_core::envm::TrialStats,
    geometry: eesim_core::envm::EnvmGeometry,
    power_on: eesim_core::envm::PowerOnCost,
    calibrated: bool,
}

fn cmd_envm_trials(
    tensor_path: &Path,
    config: Option<&Path>,
    trials: Option<usize>,
    seed: u64,
    out: Option<&Path>,
) -> AppResult<()> {
    let tensor = load_bitmask_tensor(tensor_path)?;
    let mut cfg: EnvmFileConfig = match config {
        Some(p) => read_json(p)?,
        None => EnvmFileConfig::default(),
    };
    if let Some(t) = trials {
        cfg.trials = t;
    }
    let reference = eesim_core::sparse::decode_bitmask(&tensor)?;
    let total = reference.len().max(1);
    let stats = run_trials(
        &tensor,
        &cfg.data,
        &cfg.mask,
        |read| {
            let decoded = eesim_core::sparse::decode_bitmask(read)?;
            let same = decoded
                .codes()
                .iter()
                .zip(reference.codes())
                .filter(|(a, b)| a == b)
                .count();
            Ok(same as f64 / total as f64)
        },
        cfg.trials,
        seed,
    )?;
    let report = EnvmTrialsReport {
        geometry: envm_geometry(&cfg.data, cfg.megabytes)?,
        power_on: power_on_cost(
            &tensor,
            &cfg.data,
            &cfg.mask,
            &cfg.conventional,
            cfg.power_cycles,
        )?,
        config: cfg,
        seed,
        stats,
        calibrated: true,
    };
    println!(
        "trials {}: mean {:.6} min {:.6}",
        report.stats.trials, report.stats.mean_accuracy, report.stats.min_accuracy
    );
    if let Some(path) = out {
        write_json(path, &report)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

#[derive(Serialize)]
struct FlopsReport {
    spans: Vec<usize>,
    dense_flops: u64,
    predicated_flops: u64,
    ratio: f64,
    heads_disabled: usize,
}

fn cmd_flops(
    spans_path: Option<&Path>,
    preset: Option<&str>,
    config: &str,
    out: Option<&Path>,
) -> AppResult<()> {
    let cfg = resolve_encoder_config(config)?;
    let spans = match (spans_path, preset) {
        (Some(path), _) => {
            let raw: Vec<usize> = read_json(path)?;
            AttentionSpans::new(raw, cfg.seq_len)?
        }
        (None, Some(name)) => span_preset(name)
            .ok_or_else(|| AppError::config(format!("unknown span preset {name}")))?,
        (None, None) => AttentionSpans::full(cfg.num_heads, cfg.seq_len),
    };
    if spans.num_heads() != cfg.num_heads {
        return Err(AppError::config(format!(
            "{} spans for {} heads",
            spans.num_heads(),
            cfg.num_heads
        )));
    }
    let count = flops_count(&spans, &cfg);
    let report = FlopsReport {
        heads_disabled: spans.spans().iter().filter(|&&s| s == 0).count(),
        spans: spans.spans().to_vec(),
        dense_flops: count.dense_flops,
        predicated_flops: count.predicated_flops,
        ratio: count.ratio,
    };
    println!(
        "dense {} predicated {} ratio {:.4}",
        report.dense_flops, report.predicated_flops, report.ratio
    );
    if let Some(path) = out {
        write_json(path, &report)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn parse_spans(arg: &str, num_heads: usize, seq_len: usize) -> AppResult<AttentionSpans> {
    if let Some(preset) = span_preset(arg) {
        return Ok(preset);
    }
    let values = arg
        .split(',')
        .map(|s| s.trim().parse::<usize>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| AppError::config(format!("bad span list: {e}")))?;
    if values.len() != num_heads {
        return Err(AppError::config(format!(
            "{} spans for {num_heads} heads",
            values.len()
        )));
    }
    Ok(AttentionSpans::new(values, seq_len)?)
}

fn cmd_gen_bundle(
    out: &Path,
    config: &str,
    density: f64,
    seed: u64,
    spans: Option<&str>,
    offramp_gain: f64,
) -> AppResult<()> {
    let cfg = resolve_encoder_config(config)?;
    let spans = match spans {
        Some(arg) => parse_spans(arg, cfg.num_heads, cfg.seq_len)?,
        None => AttentionSpans::full(cfg.num_heads, cfg.seq_len),
    };
    let bundle = EncoderBundle::synthetic_with_gain(&cfg, spans, density, offramp_gain, seed)?;
    save_bundle(out, &bundle)?;
    println!("wrote bundle to {}", out.display());
    Ok(())
}

fn cmd_gen_traces(
    bundle_dir: &Path,
    count: usize,
    seed: u64,
    mac_tile: usize,
    out: &Path,
) -> AppResult<()> {
    let bundle = files::load_bundle(bundle_dir)?;
    let policy = {
        let mut p = PolicyConfig::new(Policy::Base, 0.0);
        p.mac_tile = mac_tile;
        p
    };
    let vf = VfTable::default_sweep();
    let ldo = LdoAdpllModel::default();
    let em = EnergyModel::default();
    let sim = Simulator::new(&bundle, &vf, &ldo, &em, &policy)?;
    let sentences = synth_sentences(count, bundle.config.seq_len, bundle.config.vocab_size, seed);
    let traces = sim.collect_traces(&sentences)?;
    let file = TracesFile {
        version: 1,
        num_layers: bundle.config.num_layers,
        num_classes: bundle.config.num_classes,
        traces: traces.into_iter().map(|t| t.per_layer).collect(),
    };
    write_json(out, &file)?;
    println!("wrote {} traces to {}", file.traces.len(), out.display());
    Ok(())
}
