//! On-disk formats: weight bundles (JSON manifest plus raw code blobs),
//! bitmask tensor files, V/F and energy configs, exit-predictor LUTs,
//! entropy-trace sets and eNVM campaign configs.
//!
//! All writes go through a temp-file rename so partially written outputs
//! never shadow good ones.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use eesim_core::dvfs::{EnergyModel, VfTable};
use eesim_core::earlyexit::ExitLut;
use eesim_core::envm::{CellConfig, ConventionalCostModel};
use eesim_core::model::{AttentionSpans, EncoderBundle, EncoderConfig, LayerNormParams};
use eesim_core::numerics::{FloatFormat, QuantTensor};
use eesim_core::sparse::BitmaskTensor;
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::{AppError, AppResult};

/// Write bytes atomically (temp file + rename).
pub fn atomic_write(path: &Path, bytes: &[u8]) -> AppResult<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)
                .map_err(|e| AppError::config(format!("create {}: {e}", parent.display())))?;
        }
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)
        .map_err(|e| AppError::config(format!("write {}: {e}", tmp.display())))?;
    fs::rename(&tmp, path)
        .map_err(|e| AppError::config(format!("rename to {}: {e}", path.display())))?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> AppResult<()> {
    let mut bytes = serde_json::to_vec_pretty(value)
        .map_err(|e| AppError::config(format!("serialize {}: {e}", path.display())))?;
    bytes.push(b'\n');
    atomic_write(path, &bytes)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> AppResult<T> {
    let bytes =
        fs::read(path).map_err(|e| AppError::config(format!("read {}: {e}", path.display())))?;
    serde_json::from_slice(&bytes)
        .map_err(|e| AppError::config(format!("parse {}: {e}", path.display())))
}

/// Shape, format and blob pointer of one quantized tensor.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorMeta {
    pub shape: Vec<usize>,
    pub exponent_bits: u8,
    pub exponent_bias: i32,
    pub file: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerNormFile {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

/// Manifest of a weight-bundle directory. Tensor blobs are raw 8-bit code
/// arrays in row-major order; the embedding rides in the bitmask layout.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BundleManifest {
    pub version: u32,
    pub config: EncoderConfig,
    pub spans: Vec<usize>,
    pub layer_norm_attn: LayerNormFile,
    pub layer_norm_ffn: LayerNormFile,
    pub tensors: BTreeMap<String, TensorMeta>,
    pub embedding_file: String,
}

pub const BUNDLE_MANIFEST: &str = "manifest.json";
pub const BUNDLE_VERSION: u32 = 1;

fn offramp_key(layer: usize) -> String {
    format!("offramp_{layer:02}")
}

pub fn save_bundle(dir: &Path, bundle: &EncoderBundle) -> AppResult<()> {
    bundle.validate()?;
    fs::create_dir_all(dir)
        .map_err(|e| AppError::config(format!("create {}: {e}", dir.display())))?;

    let mut tensors = BTreeMap::new();
    let mut dump = |name: &str, t: &QuantTensor| -> AppResult<()> {
        let file = format!("{name}.bin");
        atomic_write(&dir.join(&file), t.codes())?;
        tensors.insert(
            name.to_string(),
            TensorMeta {
                shape: t.shape().to_vec(),
                exponent_bits: t.format().exponent_bits,
                exponent_bias: t.format().exponent_bias,
                file,
            },
        );
        Ok(())
    };
    dump("embed_proj", &bundle.embed_proj)?;
    dump("wq", &bundle.wq)?;
    dump("wk", &bundle.wk)?;
    dump("wv", &bundle.wv)?;
    dump("wo", &bundle.wo)?;
    dump("ffn1", &bundle.w_ffn1)?;
    dump("ffn2", &bundle.w_ffn2)?;
    for (i, ramp) in bundle.offramps.iter().enumerate() {
        dump(&offramp_key(i + 1), ramp)?;
    }

    let embedding_file = "embedding.bmt".to_string();
    atomic_write(&dir.join(&embedding_file), &bundle.embedding.to_bytes())?;

    let manifest = BundleManifest {
        version: BUNDLE_VERSION,
        config: bundle.config.clone(),
        spans: bundle.spans.spans().to_vec(),
        layer_norm_attn: LayerNormFile {
            gamma: bundle.ln_attn.gamma.clone(),
            beta: bundle.ln_attn.beta.clone(),
        },
        layer_norm_ffn: LayerNormFile {
            gamma: bundle.ln_ffn.gamma.clone(),
            beta: bundle.ln_ffn.beta.clone(),
        },
        tensors,
        embedding_file,
    };
    write_json(&dir.join(BUNDLE_MANIFEST), &manifest)
}

pub fn load_bundle(dir: &Path) -> AppResult<EncoderBundle> {
    let manifest: BundleManifest = read_json(&dir.join(BUNDLE_MANIFEST))?;
    if manifest.version != BUNDLE_VERSION {
        return Err(AppError::config(format!(
            "unsupported bundle version {}",
            manifest.version
        )));
    }
    let load = |name: &str| -> AppResult<QuantTensor> {
        let meta = manifest
            .tensors
            .get(name)
            .ok_or_else(|| AppError::config(format!("bundle is missing tensor {name}")))?;
        let codes = fs::read(dir.join(&meta.file))
            .map_err(|e| AppError::config(format!("read {}: {e}", meta.file)))?;
        let format = FloatFormat::new(meta.exponent_bits, meta.exponent_bias)?;
        Ok(QuantTensor::from_codes(meta.shape.clone(), codes, format)?)
    };
    let embedding_bytes = fs::read(dir.join(&manifest.embedding_file))
        .map_err(|e| AppError::config(format!("read {}: {e}", manifest.embedding_file)))?;
    let embedding = BitmaskTensor::from_bytes(&embedding_bytes)?;

    let offramps = (1..=manifest.config.num_layers)
        .map(|l| load(&offramp_key(l)))
        .collect::<AppResult<Vec<_>>>()?;
    let bundle = EncoderBundle {
        spans: AttentionSpans::new(manifest.spans.clone(), manifest.config.seq_len)?,
        embedding,
        embed_proj: load("embed_proj")?,
        wq: load("wq")?,
        wk: load("wk")?,
        wv: load("wv")?,
        wo: load("wo")?,
        w_ffn1: load("ffn1")?,
        w_ffn2: load("ffn2")?,
        ln_attn: LayerNormParams {
            gamma: manifest.layer_norm_attn.gamma.clone(),
            beta: manifest.layer_norm_attn.beta.clone(),
        },
        ln_ffn: LayerNormParams {
            gamma: manifest.layer_norm_ffn.gamma.clone(),
            beta: manifest.layer_norm_ffn.beta.clone(),
        },
        config: manifest.config,
        offramps,
    };
    bundle.validate()?;
    Ok(bundle)
}

/// Exit-predictor LUT file: a JSON array of `(bin_upper_edge,
/// predicted_layer)` pairs.
pub fn save_lut(path: &Path, lut: &ExitLut) -> AppResult<()> {
    write_json(path, &lut.entries())
}

pub fn load_lut(path: &Path) -> AppResult<ExitLut> {
    let entries: Vec<(f64, u32)> = read_json(path)?;
    Ok(ExitLut::from_entries(&entries)?)
}

/// Entropy traces for predictor training.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TracesFile {
    pub version: u32,
    pub num_layers: usize,
    pub num_classes: usize,
    pub traces: Vec<Vec<f64>>,
}

pub fn save_bitmask_tensor(path: &Path, tensor: &BitmaskTensor) -> AppResult<()> {
    atomic_write(path, &tensor.to_bytes())
}

pub fn load_bitmask_tensor(path: &Path) -> AppResult<BitmaskTensor> {
    let bytes =
        fs::read(path).map_err(|e| AppError::config(format!("read {}: {e}", path.display())))?;
    Ok(BitmaskTensor::from_bytes(&bytes)?)
}

/// eNVM campaign configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EnvmFileConfig {
    pub data: CellConfig,
    pub mask: CellConfig,
    pub trials: usize,
    pub power_cycles: u64,
    /// Capacity used for the geometry report.
    pub megabytes: f64,
    pub conventional: ConventionalCostModel,
}

impl Default for EnvmFileConfig {
    fn default() -> Self {
        Self {
            data: CellConfig::mlc2(),
            mask: CellConfig::slc(),
            trials: eesim_core::envm::DEFAULT_TRIALS,
            power_cycles: 1,
            megabytes: 2.0,
            conventional: ConventionalCostModel::default(),
        }
    }
}

pub fn load_vf_table(path: &Path) -> AppResult<VfTable> {
    let table: VfTable = read_json(path)?;
    table.validate()?;
    Ok(table)
}

pub fn load_energy_model(path: &Path) -> AppResult<EnergyModel> {
    let model: EnergyModel = read_json(path)?;
    model.validate()?;
    Ok(model)
}

/// Named encoder presets accepted wherever a config file is allowed.
pub fn encoder_preset(name: &str) -> Option<EncoderConfig> {
    match name {
        "toy" => Some(EncoderConfig::toy()),
        "albert-base" | "albert" => Some(EncoderConfig::albert_base()),
        _ => None,
    }
}

/// Named span presets from the evaluation tasks.
pub fn span_preset(name: &str) -> Option<AttentionSpans> {
    match name {
        "mnli" => Some(AttentionSpans::mnli()),
        "qqp" => Some(AttentionSpans::qqp()),
        "sst2" | "sst-2" => Some(AttentionSpans::sst2()),
        "qnli" => Some(AttentionSpans::qnli()),
        _ => None,
    }
}

/// Resolve a config argument: preset name or JSON file path.
pub fn resolve_encoder_config(arg: &str) -> AppResult<EncoderConfig> {
    if let Some(preset) = encoder_preset(arg) {
        return Ok(preset);
    }
    let cfg: EncoderConfig = read_json(PathBuf::from(arg).as_path())?;
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use eesim_core::model::EncoderBundle;

    #[test]
    fn bundle_save_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = EncoderConfig::toy();
        let spans = AttentionSpans::new(vec![5, 0], cfg.seq_len).unwrap();
        let bundle = EncoderBundle::synthetic(&cfg, spans, 0.4, 9).unwrap();
        save_bundle(dir.path(), &bundle).unwrap();
        let back = load_bundle(dir.path()).unwrap();
        assert_eq!(back.wq, bundle.wq);
        assert_eq!(back.embedding, bundle.embedding);
        assert_eq!(back.spans.spans(), bundle.spans.spans());
        assert_eq!(back.offramps, bundle.offramps);
        assert_eq!(back.ln_attn, bundle.ln_attn);
        assert_eq!(back.config, bundle.config);
    }

    #[test]
    fn missing_bundle_is_config_error() {
        let err = load_bundle(Path::new("/nonexistent/bundle")).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn lut_file_is_a_pair_array() {
        let dir = tempfile::tempdir().unwrap();
        let lut = ExitLut {
            h_max: std::f64::consts::LN_2,
            bins: vec![1, 2, 3, 3],
        };
        let path = dir.path().join("lut.json");
        save_lut(&path, &lut).unwrap();
        let raw: serde_json::Value = read_json(&path).unwrap();
        assert!(raw.as_array().unwrap().len() == 4);
        assert!(raw[0].as_array().unwrap().len() == 2);
        let back = load_lut(&path).unwrap();
        assert_eq!(back.bins, lut.bins);
    }

    #[test]
    fn envm_config_defaults_fill_missing_fields() {
        let parsed: EnvmFileConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(parsed.trials, 100);
        assert_eq!(parsed.data.bits_per_cell, 2);
        assert_eq!(parsed.mask.bits_per_cell, 1);
    }

    #[test]
    fn shipped_default_configs_match_code_defaults() {
        let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
        let vf = load_vf_table(&root.join("default_vf_table.json")).unwrap();
        assert_eq!(vf, VfTable::default_sweep());
        let em = load_energy_model(&root.join("default_energy_model.json")).unwrap();
        assert_eq!(em, EnergyModel::default());
        let envm: EnvmFileConfig = read_json(&root.join("default_envm.json")).unwrap();
        assert_eq!(envm.trials, EnvmFileConfig::default().trials);
        assert_eq!(envm.data, EnvmFileConfig::default().data);
    }
}
