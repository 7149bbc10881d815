//! Shared fixtures for the criterion benchmarks.

use netdelay_core::sim::{gen_flow_packets, gen_unlabeled_scenario, GenConfig};
use netdelay_core::trace::fit_normalization;
use netdelay_core::{ModelConfig, ModelParams, NetworkScenario, NormStats, TrafficSpec};
use netdelay_core::scenario::TrafficKind;

/// A mid-sized scenario with its fitted normalization, for forward-pass and
/// training-step benchmarks.
pub fn bench_scenario(seed: u64) -> (NetworkScenario, NormStats) {
    let scenario = gen_unlabeled_scenario(seed, 6, 4).expect("bench scenario");
    let stats = fit_normalization(std::slice::from_ref(&scenario)).expect("stats");
    (scenario, stats)
}

pub fn bench_params(cfg: &ModelConfig) -> ModelParams {
    ModelParams::init(42, cfg).expect("params")
}

pub fn bench_traffic() -> TrafficSpec {
    TrafficSpec {
        distribution: TrafficKind::Mb,
        avg_load_bps: 4e5,
        packet_size_bits: 8000.0,
        burst_length_packets: 20,
    }
}

pub fn bench_gen_config() -> GenConfig {
    GenConfig {
        scenarios: 1,
        devices: (6, 6),
        flows: (4, 4),
        duration_s: 10.0,
        capture_window_s: 5.0,
        ..GenConfig::default()
    }
}

pub use netdelay_core::sim::gen_scenario;

/// Re-exported so benches measure the same generator the datasets use.
pub fn packets_for_bench(seed: u64) -> Vec<netdelay_core::PacketRecord> {
    gen_flow_packets(&bench_traffic(), 10.0, seed)
}
