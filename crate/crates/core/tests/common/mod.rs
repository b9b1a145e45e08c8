#![allow(dead_code)]

use std::path::{Path, PathBuf};

use mcsnet::config::{load_config, load_scenario, Scenario, SystemConfig};

pub fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

pub fn fig1() -> SystemConfig {
    let dir = root().join("configs/fig1");
    load_config(&dir.join("topology.toml"), &dir.join("services.toml")).expect("shipped config loads")
}

pub fn shipped(name: &str) -> Scenario {
    load_scenario(&root().join("scenarios").join(format!("{name}.toml")), &fig1()).expect("shipped scenario loads")
}

pub const SHIPPED: [&str; 4] = ["s1_placement", "s2_linkfail", "s3_nodefail", "s4_attack"];
