#![allow(dead_code)]

use eplab::model::{HardwareSpec, MoEShape, MuTable};

/// Small machine with round numbers: one unsaturated w=8 flow moves 1 GB/s.
pub fn toy_spec(n_sm: u32, world: u32) -> HardwareSpec {
    HardwareSpec {
        name: "toy".into(),
        n_sm,
        p_peak: 4e12,
        bw_hbm: 1.28e11,
        bw_nvl: 1.28e11,
        w_sat: 1024.0,
        tau_sync: 1e-6,
        world_size: world,
    }
}

pub fn toy_shape(h_dim: u64, h_inter: u64, n_exp: u32, topk: u32, n_tok: u64) -> MoEShape {
    MoEShape {
        name: "toy".into(),
        h_dim,
        h_inter,
        n_exp,
        topk,
        n_tok,
        s_tok: None,
        b_m: 128,
        b_n: 256,
        mu_table: MuTable::default(),
    }
}

pub fn fixture_dir() -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

pub fn load_hardware(name: &str) -> HardwareSpec {
    HardwareSpec::load(fixture_dir().join("hardware").join(format!("{name}.toml"))).expect("hardware fixture")
}

pub fn load_shapes() -> Vec<MoEShape> {
    (1..=12)
        .map(|i| MoEShape::load(fixture_dir().join("shapes").join(format!("moe{i}.toml"))).expect("shape fixture"))
        .collect()
}
