//! Sentence-level DVFS: required-frequency computation, energy-optimal
//! voltage/frequency selection, LDO/ADPLL transition modeling, and the
//! quadratic energy model.
//!
//! The default voltage-to-max-frequency curve is a calibrated stand-in (the
//! nominal 0.8 V / 1 GHz endpoint is fixed, the rest is linear with a 0.3 V
//! threshold) and is fully overridable through the table file.

use alloc::{format, vec::Vec};

use crate::error::{CoreError, Result};
use crate::model::OpTrace;

/// One operating point of the voltage/frequency sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct VfPoint {
    pub voltage: f64,
    pub max_frequency_hz: f64,
}

/// Voltage step of the regulator sweep.
pub const VOLTAGE_STEP: f64 = 0.025;
/// Lowest operational voltage; also the standby level.
pub const MIN_VOLTAGE: f64 = 0.5;
/// Nominal voltage.
pub const NOMINAL_VOLTAGE: f64 = 0.8;
/// Frequency at the nominal point.
pub const NOMINAL_FREQUENCY_HZ: f64 = 1.0e9;

/// Ordered voltage/frequency operating points (ascending voltage).
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct VfTable {
    pub points: Vec<VfPoint>,
    pub standby_voltage: f64,
}

impl VfTable {
    /// 0.500 V to 0.800 V in 25 mV steps; max frequency is linear in the
    /// overdrive with the 0.8 V / 1 GHz endpoint pinned.
    pub fn default_sweep() -> Self {
        let points = (0..=12)
            .map(|i| {
                let voltage = MIN_VOLTAGE + i as f64 * VOLTAGE_STEP;
                VfPoint {
                    voltage,
                    max_frequency_hz: NOMINAL_FREQUENCY_HZ * (voltage - 0.3)
                        / (NOMINAL_VOLTAGE - 0.3),
                }
            })
            .collect();
        Self {
            points,
            standby_voltage: MIN_VOLTAGE,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.points.is_empty() {
            return Err(CoreError::InvalidFormat("empty V/F table".into()));
        }
        for pair in self.points.windows(2) {
            if pair[1].voltage <= pair[0].voltage
                || pair[1].max_frequency_hz <= pair[0].max_frequency_hz
            {
                return Err(CoreError::InvalidFormat(
                    "V/F table must be strictly increasing in voltage and frequency".into(),
                ));
            }
        }
        for p in &self.points {
            if p.voltage < MIN_VOLTAGE - 1e-9 || p.voltage > NOMINAL_VOLTAGE + 1e-9 {
                return Err(CoreError::InvalidFormat(format!(
                    "voltage {} outside [{MIN_VOLTAGE}, {NOMINAL_VOLTAGE}]",
                    p.voltage
                )));
            }
            let steps = (p.voltage - MIN_VOLTAGE) / VOLTAGE_STEP;
            if libm::fabs(steps - libm::round(steps)) > 1e-6 {
                return Err(CoreError::InvalidFormat(format!(
                    "voltage {} not on the 25 mV grid",
                    p.voltage
                )));
            }
        }
        let nominal = self.points[self.points.len() - 1];
        if libm::fabs(nominal.voltage - NOMINAL_VOLTAGE) > 1e-9 {
            return Err(CoreError::InvalidFormat(
                "table must contain the 0.8 V nominal point".into(),
            ));
        }
        Ok(())
    }

    /// The nominal (highest-voltage) point.
    pub fn nominal(&self) -> VfPoint {
        self.points[self.points.len() - 1]
    }
}

impl Default for VfTable {
    fn default() -> Self {
        Self::default_sweep()
    }
}

/// `Freq_opt = N_cycles / (T - T_elapsed)`.
pub fn required_frequency(n_cycles: u64, target_s: f64, elapsed_s: f64) -> Result<f64> {
    if elapsed_s < 0.0 || elapsed_s.is_nan() || !target_s.is_finite() {
        return Err(CoreError::InvalidInput(
            "invalid target or elapsed time".into(),
        ));
    }
    if target_s <= elapsed_s {
        return Err(CoreError::DeadlineMissed {
            target_s,
            elapsed_s,
        });
    }
    Ok(n_cycles as f64 / (target_s - elapsed_s))
}

/// Lowest-voltage point whose max frequency covers `f_req`; the operating
/// frequency stays `f_req`, not the point's max. Returns the nominal point
/// with `false` when even it cannot reach `f_req`.
pub fn select_vf(table: &VfTable, f_req: f64) -> (VfPoint, bool) {
    for p in &table.points {
        if p.max_frequency_hz >= f_req {
            return (*p, true);
        }
    }
    (table.nominal(), false)
}

/// LDO and ADPLL actuation parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LdoAdpllModel {
    /// LDO response per 50 mV step.
    pub ldo_slew_ns_per_step: f64,
    pub ldo_step_volts: f64,
    /// Relock time after a frequency update request.
    pub adpll_relock_ns: f64,
    /// Upper bound on any transition within the table range.
    pub settle_cap_ns: f64,
    pub adpll_power_w: f64,
    pub ldo_peak_efficiency: f64,
    /// Switching charge cost per LDO step.
    pub ldo_step_energy_j: f64,
}

impl Default for LdoAdpllModel {
    fn default() -> Self {
        Self {
            ldo_slew_ns_per_step: 3.8,
            ldo_step_volts: 0.050,
            adpll_relock_ns: 50.0,
            settle_cap_ns: 100.0,
            adpll_power_w: 2.46e-3,
            ldo_peak_efficiency: 0.992,
            ldo_step_energy_j: 10.0e-12,
        }
    }
}

/// Time and energy of one V/F transition.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Transition {
    pub time_ns: f64,
    pub energy_j: f64,
}

/// Transition between two operating points:
/// `min(ceil(|dV| / 50 mV) * slew + relock, cap)`; symmetric in direction.
pub fn transition(model: &LdoAdpllModel, from: VfPoint, to: VfPoint) -> Transition {
    let dv = libm::fabs(to.voltage - from.voltage);
    let steps = libm::ceil(dv / model.ldo_step_volts - 1e-9).max(0.0);
    let raw_ns = steps * model.ldo_slew_ns_per_step + model.adpll_relock_ns;
    let time_ns = raw_ns.min(model.settle_cap_ns);
    let energy_j = (model.adpll_power_w * time_ns * 1e-9 + steps * model.ldo_step_energy_j)
        / model.ldo_peak_efficiency;
    Transition { time_ns, energy_j }
}

/// Quadratic energy model: `alpha * C * V^2 * N_cycles` plus per-op weights,
/// all scaled by `V^2`. Defaults are calibrated at a MAC vector size of 16
/// so that gating every VMAC saves at most 1.65x on a matmul-only trace.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EnergyModel {
    /// Switching activity factor in [0, 1].
    pub alpha: f64,
    /// Effective switched capacitance, J per V^2 per cycle.
    pub cap_effective_j_per_v2_cycle: f64,
    pub vmac_energy_j_per_v2: f64,
    /// Fraction of the VMAC energy still burned when the skip gate fires.
    pub vmac_skip_fraction: f64,
    /// Operand-fetch cost per VMAC invocation.
    pub memory_energy_j_per_v2: f64,
    pub softmax_row_energy_j_per_v2: f64,
    pub layernorm_row_energy_j_per_v2: f64,
    pub elementwise_energy_j_per_v2: f64,
    pub entropy_eval_energy_j_per_v2: f64,
    pub lut_lookup_energy_j_per_v2: f64,
    /// Leakage power parked at the standby voltage.
    pub standby_power_w: f64,
}

impl Default for EnergyModel {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            cap_effective_j_per_v2_cycle: 16.0e-12,
            vmac_energy_j_per_v2: 1.0e-12,
            vmac_skip_fraction: 0.2,
            memory_energy_j_per_v2: 0.05e-12,
            softmax_row_energy_j_per_v2: 2.0e-12,
            layernorm_row_energy_j_per_v2: 2.0e-12,
            elementwise_energy_j_per_v2: 0.05e-12,
            entropy_eval_energy_j_per_v2: 2.0e-12,
            lut_lookup_energy_j_per_v2: 0.5e-12,
            standby_power_w: 50.0e-6,
        }
    }
}

impl EnergyModel {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(CoreError::InvalidFormat("alpha must be in [0, 1]".into()));
        }
        if !(0.0..1.0).contains(&self.vmac_skip_fraction) {
            return Err(CoreError::InvalidFormat(
                "vmac_skip_fraction must be in [0, 1)".into(),
            ));
        }
        let weights = [
            self.cap_effective_j_per_v2_cycle,
            self.vmac_energy_j_per_v2,
            self.memory_energy_j_per_v2,
            self.softmax_row_energy_j_per_v2,
            self.layernorm_row_energy_j_per_v2,
            self.elementwise_energy_j_per_v2,
            self.entropy_eval_energy_j_per_v2,
            self.lut_lookup_energy_j_per_v2,
            self.standby_power_w,
        ];
        if weights.iter().any(|&w| w < 0.0) {
            return Err(CoreError::InvalidFormat(
                "energy weights must be >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// Energy of running a trace at supply voltage `v`. The frequency does not
/// enter the dynamic energy (power does scale with it, energy per cycle does
/// not); it is accepted to mirror the operating point.
pub fn energy(model: &EnergyModel, v: f64, trace: &OpTrace, _f: f64) -> f64 {
    let c = trace.totals();
    let cycles = trace.cycle_count(trace.tile_n.max(1)) as f64;
    let executed = (c.vmac_invocations - c.vmacs_skipped) as f64;
    let skipped = c.vmacs_skipped as f64;
    let ops = executed * model.vmac_energy_j_per_v2
        + skipped * model.vmac_energy_j_per_v2 * model.vmac_skip_fraction
        + c.vmac_invocations as f64 * model.memory_energy_j_per_v2
        + c.softmax_rows as f64 * model.softmax_row_energy_j_per_v2
        + c.layernorm_rows as f64 * model.layernorm_row_energy_j_per_v2
        + c.elementwise_ops as f64 * model.elementwise_energy_j_per_v2
        + c.entropy_evals as f64 * model.entropy_eval_energy_j_per_v2
        + c.lut_lookups as f64 * model.lut_lookup_energy_j_per_v2;
    v * v * (model.alpha * model.cap_effective_j_per_v2_cycle * cycles + ops)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::LayerCounts;

    fn matmul_trace(invocations: u64, skipped: u64, n: usize) -> OpTrace {
        let mut trace = OpTrace::new(n);
        trace.layers.push(LayerCounts {
            macs: invocations * n as u64,
            vmac_invocations: invocations,
            vmacs_skipped: skipped,
            ..LayerCounts::default()
        });
        trace
    }

    #[test]
    fn default_table_shape() {
        let table = VfTable::default_sweep();
        table.validate().unwrap();
        assert_eq!(table.points.len(), 13);
        assert_eq!(table.standby_voltage, 0.5);
        let nominal = table.nominal();
        assert!((nominal.voltage - 0.8).abs() < 1e-12);
        assert!((nominal.max_frequency_hz - 1.0e9).abs() < 1.0);
    }

    #[test]
    fn table_validation_rejects_bad_tables() {
        let mut t = VfTable::default_sweep();
        t.points[3].max_frequency_hz = t.points[2].max_frequency_hz;
        assert!(t.validate().is_err());

        let mut t = VfTable::default_sweep();
        t.points[0].voltage = 0.51;
        assert!(t.validate().is_err());

        let mut t = VfTable::default_sweep();
        t.points.pop();
        assert!(t.validate().is_err());
    }

    #[test]
    fn required_frequency_formula() {
        let f = required_frequency(5_000_000, 50e-3, 10e-3).unwrap();
        assert!((f - 125.0e6).abs() < 1e-3);
        assert_eq!(required_frequency(0, 1.0, 0.0).unwrap(), 0.0);
        // Halving the remaining time doubles the frequency.
        let f2 = required_frequency(5_000_000, 30e-3, 10e-3).unwrap();
        assert!((f2 / f - 2.0).abs() < 1e-12);
        assert!(matches!(
            required_frequency(100, 1e-3, 2e-3),
            Err(crate::CoreError::DeadlineMissed { .. })
        ));
    }

    #[test]
    fn select_vf_cases() {
        let table = VfTable::default_sweep();
        let (p, ok) = select_vf(&table, 1.0e6);
        assert!(ok);
        assert!((p.voltage - 0.5).abs() < 1e-12);

        let (p, ok) = select_vf(&table, 1.0e9);
        assert!(ok);
        assert!((p.voltage - 0.8).abs() < 1e-12);

        let (p, ok) = select_vf(&table, 1.2e9);
        assert!(!ok);
        assert!((p.voltage - 0.8).abs() < 1e-12);
    }

    #[test]
    fn select_vf_monotone_in_frequency() {
        let table = VfTable::default_sweep();
        let mut last_v = 0.0;
        for i in 0..200 {
            let f = i as f64 * 6.0e6;
            let (p, _) = select_vf(&table, f);
            assert!(p.voltage >= last_v, "f={f}");
            last_v = p.voltage;
        }
    }

    #[test]
    fn transition_cases() {
        let m = LdoAdpllModel::default();
        let table = VfTable::default_sweep();
        let lo = table.points[0];
        let hi = table.nominal();

        let same = transition(&m, hi, hi);
        assert!((same.time_ns - m.adpll_relock_ns).abs() < 1e-12);

        let down = transition(&m, hi, lo);
        // 0.3 V in 50 mV steps: 6 * 3.8 ns + relock, capped at 100 ns.
        assert!((down.time_ns - (6.0 * 3.8 + 50.0)).abs() < 1e-9);
        assert!(down.time_ns <= m.settle_cap_ns);

        let up = transition(&m, lo, hi);
        assert_eq!(down.time_ns, up.time_ns);
        assert_eq!(down.energy_j, up.energy_j);
    }

    #[test]
    fn transition_never_exceeds_cap_in_range() {
        let m = LdoAdpllModel::default();
        let table = VfTable::default_sweep();
        for &a in &table.points {
            for &b in &table.points {
                assert!(transition(&m, a, b).time_ns <= m.settle_cap_ns);
            }
        }
    }

    #[test]
    fn energy_scales_quadratically_with_voltage() {
        let em = EnergyModel::default();
        let trace = matmul_trace(4096, 1024, 16);
        let e1 = energy(&em, 0.4, &trace, 1e9);
        let e2 = energy(&em, 0.8, &trace, 1e9);
        assert!((e2 / e1 - 4.0).abs() < 1e-12);
    }

    #[test]
    fn zero_trace_zero_energy() {
        let em = EnergyModel::default();
        let trace = OpTrace::new(16);
        assert_eq!(energy(&em, 0.8, &trace, 1e9), 0.0);
    }

    #[test]
    fn skip_gating_saves_at_most_1p65() {
        let em = EnergyModel::default();
        let inv = 1_000_000u64;
        let dense = matmul_trace(inv, 0, 16);
        let gated = matmul_trace(inv, inv, 16);
        let ratio = energy(&em, 0.8, &dense, 1e9) / energy(&em, 0.8, &gated, 1e9);
        assert!(ratio <= 1.65, "ratio {ratio}");
        assert!(ratio > 1.5, "calibration drifted low: {ratio}");
    }

    #[test]
    fn energy_monotone_in_voltage_and_skips_cheaper() {
        let em = EnergyModel::default();
        let table = VfTable::default_sweep();
        let trace = matmul_trace(10_000, 3_000, 16);
        let mut last = 0.0;
        for p in &table.points {
            let e = energy(&em, p.voltage, &trace, p.max_frequency_hz);
            assert!(e > last);
            last = e;
        }
        let denser = matmul_trace(10_000, 0, 16);
        assert!(energy(&em, 0.8, &denser, 1e9) > energy(&em, 0.8, &trace, 1e9));
    }
}
