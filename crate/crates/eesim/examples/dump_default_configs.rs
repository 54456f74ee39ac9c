//! Regenerate the shipped default config files from the in-code defaults:
//! `cargo run -p eesim --example dump_default_configs`

use eesim_core::dvfs::{EnergyModel, VfTable};
use eesim_core::envm::{CellConfig, ConventionalCostModel};

fn main() -> anyhow::Result<()> {
    let root = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    std::fs::create_dir_all(&root)?;
    let dump = |name: &str, value: serde_json::Value| -> anyhow::Result<()> {
        let mut bytes = serde_json::to_vec_pretty(&value)?;
        bytes.push(b'\n');
        std::fs::write(root.join(name), bytes)?;
        println!("wrote configs/{name}");
        Ok(())
    };
    dump(
        "default_vf_table.json",
        serde_json::to_value(VfTable::default_sweep())?,
    )?;
    dump(
        "default_energy_model.json",
        serde_json::to_value(EnergyModel::default())?,
    )?;
    dump(
        "default_envm.json",
        serde_json::to_value(eesim::files::EnvmFileConfig::default())?,
    )?;
    dump(
        "cells.json",
        serde_json::json!({
            "slc": CellConfig::slc(),
            "mlc2": CellConfig::mlc2(),
            "mlc3": CellConfig::mlc3(),
            "conventional": ConventionalCostModel::default(),
        }),
    )?;
    Ok(())
}
