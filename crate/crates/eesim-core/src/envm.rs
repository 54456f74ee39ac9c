//! Multi-level-cell ReRAM storage model for the bitmask-encoded embeddings:
//! packing (mask bits into SLC cells, payload bytes into MLC cells),
//! Monte-Carlo fault injection, readout, trial statistics, and geometry and
//! power-on cost reporting.
//!
//! The cell error model is a Gaussian analog read value around the
//! programmed level with nearest-level decode. The default sigmas are
//! calibrated stand-ins (per-cell misread about 1e-12 for SLC, 1e-9 for
//! MLC2, 1e-4 for MLC3), not device data.

use alloc::{format, vec, vec::Vec};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{CoreError, Result};
use crate::numerics::FloatFormat;
use crate::sparse::BitmaskTensor;

/// One ReRAM array configuration.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CellConfig {
    pub bits_per_cell: u8,
    /// Gaussian noise of the analog read value, normalized to unit level
    /// spacing. Calibrated, not measured.
    pub level_sigma: f64,
    pub area_density_mm2_per_mb: f64,
    pub read_latency_ns: f64,
    /// Read energy per stored bit; calibrated.
    pub read_energy_pj_per_bit: f64,
    /// Bits delivered per array access.
    pub read_width_bits: u32,
}

impl CellConfig {
    pub fn slc() -> Self {
        Self {
            bits_per_cell: 1,
            level_sigma: 0.071078,
            area_density_mm2_per_mb: 0.28,
            read_latency_ns: 1.21,
            read_energy_pj_per_bit: 0.0005,
            read_width_bits: 64,
        }
    }

    pub fn mlc2() -> Self {
        Self {
            bits_per_cell: 2,
            level_sigma: 0.082463,
            area_density_mm2_per_mb: 0.08,
            read_latency_ns: 1.54,
            read_energy_pj_per_bit: 0.001,
            read_width_bits: 64,
        }
    }

    pub fn mlc3() -> Self {
        Self {
            bits_per_cell: 3,
            level_sigma: 0.129598,
            area_density_mm2_per_mb: 0.04,
            read_latency_ns: 2.96,
            read_energy_pj_per_bit: 0.002,
            read_width_bits: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=3).contains(&self.bits_per_cell) {
            return Err(CoreError::InvalidFormat(format!(
                "bits_per_cell must be 1..=3, got {}",
                self.bits_per_cell
            )));
        }
        if self.level_sigma < 0.0 {
            return Err(CoreError::InvalidFormat("level_sigma must be >= 0".into()));
        }
        if self.read_width_bits == 0 {
            return Err(CoreError::InvalidFormat(
                "read_width_bits must be > 0".into(),
            ));
        }
        Ok(())
    }

    #[inline]
    pub fn levels(&self) -> u8 {
        1 << self.bits_per_cell
    }

    #[inline]
    pub fn cells_per_byte(&self) -> usize {
        8usize.div_ceil(self.bits_per_cell as usize)
    }
}

/// Cell-level image of one bitmask tensor: mask bits in SLC cells, payload
/// bytes split MSB-first across MLC cells.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EnvmImage {
    mask_cells: Vec<u8>,
    data_cells: Vec<u8>,
    mask_cfg: CellConfig,
    data_cfg: CellConfig,
    shape: Vec<usize>,
    format: FloatFormat,
    payload_len: usize,
}

impl EnvmImage {
    #[inline]
    pub fn mask_cells(&self) -> &[u8] {
        &self.mask_cells
    }

    #[inline]
    pub fn data_cells(&self) -> &[u8] {
        &self.data_cells
    }

    #[inline]
    pub fn cell_count(&self) -> usize {
        self.mask_cells.len() + self.data_cells.len()
    }

    /// Cells whose stored level differs between two images of the same
    /// tensor.
    pub fn flips_vs(&self, other: &Self) -> u64 {
        let mask = self
            .mask_cells
            .iter()
            .zip(&other.mask_cells)
            .filter(|(a, b)| a != b)
            .count();
        let data = self
            .data_cells
            .iter()
            .zip(&other.data_cells)
            .filter(|(a, b)| a != b)
            .count();
        (mask + data) as u64
    }
}

/// Split one byte into `ceil(8/b)` cell levels, MSB-first; a final partial
/// cell is left-padded with zero bits.
fn byte_to_levels(byte: u8, bits_per_cell: u8, out: &mut Vec<u8>) {
    let b = bits_per_cell as u32;
    let cells = 8u32.div_ceil(b);
    let mut remaining = 8u32;
    for _ in 0..cells {
        let take = b.min(remaining);
        remaining -= take;
        let level = (byte >> remaining) & ((1u16 << take) - 1) as u8;
        out.push(level);
    }
}

fn levels_to_byte(levels: &[u8], bits_per_cell: u8) -> u8 {
    let b = bits_per_cell as u32;
    let mut remaining = 8u32;
    let mut byte = 0u8;
    for &level in levels {
        let take = b.min(remaining);
        remaining -= take;
        byte |= (level & ((1u16 << take) - 1) as u8) << remaining;
    }
    byte
}

/// Pack a bitmask tensor into cells: one SLC cell per mask bit, plus
/// `ceil(8/b)` MLC cells per payload byte. Lossless; fault-free readout is
/// the identity.
pub fn pack_embeddings(
    s: &BitmaskTensor,
    data_cfg: &CellConfig,
    mask_cfg: &CellConfig,
) -> Result<EnvmImage> {
    data_cfg.validate()?;
    mask_cfg.validate()?;
    if mask_cfg.bits_per_cell != 1 {
        return Err(CoreError::InvalidFormat(
            "mask cells must be single-level (bits_per_cell = 1)".into(),
        ));
    }
    let elements = s.elements();
    let mut mask_cells = Vec::with_capacity(elements);
    for i in 0..elements {
        mask_cells.push(s.mask_bit(i) as u8);
    }
    let mut data_cells = Vec::with_capacity(s.payload().len() * data_cfg.cells_per_byte());
    for &byte in s.payload() {
        byte_to_levels(byte, data_cfg.bits_per_cell, &mut data_cells);
    }
    Ok(EnvmImage {
        mask_cells,
        data_cells,
        mask_cfg: *mask_cfg,
        data_cfg: *data_cfg,
        shape: s.shape().to_vec(),
        format: *s.format(),
        payload_len: s.payload().len(),
    })
}

/// Standard normal via Box-Muller; deterministic for a given rng state.
#[inline]
fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    libm::sqrt(-2.0 * libm::log(u1)) * libm::cos(2.0 * core::f64::consts::PI * u2)
}

fn perturb(cells: &[u8], sigma: f64, levels: u8, rng: &mut ChaCha8Rng) -> Vec<u8> {
    if sigma == 0.0 {
        return cells.to_vec();
    }
    cells
        .iter()
        .map(|&level| {
            let analog = level as f64 + sigma * standard_normal(rng);
            let decoded = libm::round(analog);
            decoded.clamp(0.0, (levels - 1) as f64) as u8
        })
        .collect()
}

/// One Monte-Carlo fault trial: every cell's analog read value is drawn from
/// `Normal(level, sigma)` and decoded to the nearest level. Mask and data
/// cells use independent random streams, so a zero mask sigma protects the
/// mask regardless of the data process.
pub fn inject_faults(img: &EnvmImage, rng_seed: u64) -> EnvmImage {
    let mut mask_rng = ChaCha8Rng::seed_from_u64(rng_seed);
    mask_rng.set_stream(0);
    let mut data_rng = ChaCha8Rng::seed_from_u64(rng_seed);
    data_rng.set_stream(1);
    EnvmImage {
        mask_cells: perturb(
            &img.mask_cells,
            img.mask_cfg.level_sigma,
            img.mask_cfg.levels(),
            &mut mask_rng,
        ),
        data_cells: perturb(
            &img.data_cells,
            img.data_cfg.level_sigma,
            img.data_cfg.levels(),
            &mut data_rng,
        ),
        ..img.clone()
    }
}

/// Decoded tensor plus a corruption flag: mask faults can desynchronize the
/// popcount from the stored payload, in which case the payload is truncated
/// or zero-padded and the flag is set (never an error).
#[derive(Debug, Clone, PartialEq)]
pub struct ReadoutResult {
    pub tensor: BitmaskTensor,
    pub mask_payload_mismatch: bool,
}

pub fn readout(img: &EnvmImage) -> Result<ReadoutResult> {
    let elements: usize = img.shape.iter().product();
    let mut mask = vec![0u8; elements.div_ceil(8)];
    let mut popcount = 0usize;
    for (i, &cell) in img.mask_cells.iter().enumerate() {
        if cell != 0 {
            mask[i / 8] |= 1 << (i % 8);
            popcount += 1;
        }
    }
    let cpb = img.data_cfg.cells_per_byte();
    let mut payload: Vec<u8> = img
        .data_cells
        .chunks(cpb)
        .map(|chunk| levels_to_byte(chunk, img.data_cfg.bits_per_cell))
        .collect();
    let mask_payload_mismatch = popcount != payload.len();
    payload.resize(popcount, 0x00);
    let tensor = BitmaskTensor::new(img.shape.clone(), mask, payload, img.format)?;
    Ok(ReadoutResult {
        tensor,
        mask_payload_mismatch,
    })
}

/// Outcome of a fault-injection campaign.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrialStats {
    pub trials: usize,
    pub mean_accuracy: f64,
    pub min_accuracy: f64,
    /// Flipped-cell count per trial.
    pub flip_counts: Vec<u64>,
}

/// Default number of fault-injection trials per storage configuration.
pub const DEFAULT_TRIALS: usize = 100;

/// Run `trials` independently seeded fault injections (seed + trial index)
/// and evaluate the model closure on each faulty readout.
pub fn run_trials<F>(
    s: &BitmaskTensor,
    data_cfg: &CellConfig,
    mask_cfg: &CellConfig,
    mut evaluate: F,
    trials: usize,
    seed: u64,
) -> Result<TrialStats>
where
    F: FnMut(&BitmaskTensor) -> Result<f64>,
{
    if trials == 0 {
        return Err(CoreError::InvalidInput("trials must be >= 1".into()));
    }
    let clean = pack_embeddings(s, data_cfg, mask_cfg)?;
    let mut flip_counts = Vec::with_capacity(trials);
    let mut sum = 0.0f64;
    let mut min = f64::INFINITY;
    for t in 0..trials {
        let faulty = inject_faults(&clean, seed.wrapping_add(t as u64));
        flip_counts.push(faulty.flips_vs(&clean));
        let read = readout(&faulty)?;
        let acc = evaluate(&read.tensor)?;
        sum += acc;
        if acc < min {
            min = acc;
        }
    }
    Ok(TrialStats {
        trials,
        mean_accuracy: sum / trials as f64,
        min_accuracy: min,
        flip_counts,
    })
}

/// Array geometry at a given capacity.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EnvmGeometry {
    pub area_mm2: f64,
    pub read_latency_ns: f64,
}

pub fn envm_geometry(cfg: &CellConfig, megabytes: f64) -> Result<EnvmGeometry> {
    if megabytes < 0.0 {
        return Err(CoreError::InvalidInput("megabytes must be >= 0".into()));
    }
    Ok(EnvmGeometry {
        area_mm2: cfg.area_density_mm2_per_mb * megabytes,
        read_latency_ns: cfg.read_latency_ns,
    })
}

/// Conventional power-on path: DRAM read, SRAM write, SRAM read. All
/// constants are calibrated stand-ins.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ConventionalCostModel {
    pub dram_read_ns_per_byte: f64,
    pub dram_read_pj_per_byte: f64,
    pub sram_write_ns_per_byte: f64,
    pub sram_write_pj_per_byte: f64,
    pub sram_read_ns_per_byte: f64,
    pub sram_read_pj_per_byte: f64,
}

impl Default for ConventionalCostModel {
    fn default() -> Self {
        Self {
            dram_read_ns_per_byte: 9.0,
            dram_read_pj_per_byte: 320.0,
            sram_write_ns_per_byte: 0.2,
            sram_write_pj_per_byte: 16.0,
            sram_read_ns_per_byte: 0.2,
            sram_read_pj_per_byte: 16.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CostPair {
    pub latency_ns: f64,
    pub energy_j: f64,
}

/// Power-on cost of having the embeddings readable: the eNVM pays one array
/// sweep ever (the data persists), the conventional path reloads on every
/// power cycle — so the advantage scales linearly with cycle count.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PowerOnCost {
    pub envm: CostPair,
    pub conventional: CostPair,
    pub latency_ratio: f64,
    pub energy_ratio: f64,
    pub power_cycles: u64,
    /// The cost constants are calibration targets, not derivations.
    pub calibrated: bool,
}

pub fn power_on_cost(
    s: &BitmaskTensor,
    data_cfg: &CellConfig,
    mask_cfg: &CellConfig,
    conventional: &ConventionalCostModel,
    power_cycles: u64,
) -> Result<PowerOnCost> {
    data_cfg.validate()?;
    mask_cfg.validate()?;
    let mask_bits = s.elements() as f64;
    let payload_bits = (s.payload().len() * 8) as f64;
    let accesses = |bits: f64, width: u32| libm::ceil(bits / width as f64);
    let envm = CostPair {
        latency_ns: accesses(mask_bits, mask_cfg.read_width_bits) * mask_cfg.read_latency_ns
            + accesses(payload_bits, data_cfg.read_width_bits) * data_cfg.read_latency_ns,
        energy_j: (mask_bits * mask_cfg.read_energy_pj_per_bit
            + payload_bits * data_cfg.read_energy_pj_per_bit)
            * 1e-12,
    };
    let bytes = (s.elements().div_ceil(8) + s.payload().len()) as f64;
    let per_cycle_ns = bytes
        * (conventional.dram_read_ns_per_byte
            + conventional.sram_write_ns_per_byte
            + conventional.sram_read_ns_per_byte);
    let per_cycle_j = bytes
        * (conventional.dram_read_pj_per_byte
            + conventional.sram_write_pj_per_byte
            + conventional.sram_read_pj_per_byte)
        * 1e-12;
    let conv = CostPair {
        latency_ns: per_cycle_ns * power_cycles as f64,
        energy_j: per_cycle_j * power_cycles as f64,
    };
    let ratio = |c: f64, e: f64| if e > 0.0 { c / e } else { 0.0 };
    Ok(PowerOnCost {
        latency_ratio: ratio(conv.latency_ns, envm.latency_ns),
        energy_ratio: ratio(conv.energy_j, envm.energy_j),
        envm,
        conventional: conv,
        power_cycles,
        calibrated: true,
    })
}

/// Gaussian upper-tail `Q(x)`.
#[inline]
pub fn gaussian_q(x: f64) -> f64 {
    0.5 * libm::erfc(x / core::f64::consts::SQRT_2)
}

/// Analytic per-cell misread probability for a stored level (interior levels
/// can fall off both sides).
pub fn misread_probability(cfg: &CellConfig, level: u8) -> f64 {
    if cfg.level_sigma == 0.0 {
        return 0.0;
    }
    let q = gaussian_q(0.5 / cfg.level_sigma);
    let interior = level > 0 && level < cfg.levels() - 1;
    if interior {
        2.0 * q
    } else {
        q
    }
}
