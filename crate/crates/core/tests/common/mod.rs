#![allow(dead_code)]

use std::path::PathBuf;

use autoac::graph::{build_graph, HeteroGraph};
use autoac::io::read_toml;
use autoac::search::SearchConfig;
use autoac::synth::{gen_synthetic, PlantedSpec, PlantedTruth};

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

pub fn planted_spec() -> PlantedSpec {
    read_toml(&fixture("planted_spec.toml")).expect("shipped planted spec")
}

pub fn planted_config() -> SearchConfig {
    read_toml(&fixture("planted_search.toml")).expect("shipped search config")
}

pub fn planted_graph() -> (HeteroGraph, PlantedTruth) {
    let (desc, truth) = gen_synthetic(&planted_spec()).expect("planted graph");
    (build_graph(&desc).expect("valid graph"), truth)
}

/// A planted graph small enough for exhaustive finite differences.
pub fn tiny_planted() -> (HeteroGraph, PlantedTruth) {
    let text = r#"
        seed = 3
        mean_pool = 4
        ppnp_pool = 2
        onehot_fanout = 2
        [[groups]]
        operator = "Mean"
        size = 2
        [[groups]]
        operator = "Ppnp"
        size = 2
        [[groups]]
        operator = "OneHot"
        size = 4
    "#;
    let spec: PlantedSpec = toml::from_str(text).expect("tiny spec");
    let (desc, truth) = gen_synthetic(&spec).expect("tiny graph");
    (build_graph(&desc).expect("valid graph"), truth)
}
