use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use netdelay_bench::{bench_gen_config, bench_params, bench_scenario, packets_for_bench};
use netdelay_core::model::{DelayModel, MessagePassingConfig};
use netdelay_core::sim::gen_scenario;
use netdelay_core::trace::bin_packets;
use netdelay_core::train::log_mse_loss_on_tape;
use netdelay_core::{ModelConfig, Tape};

fn forward_pass(c: &mut Criterion) {
    let (scenario, stats) = bench_scenario(3);
    let cfg = ModelConfig::tiny(16, 16, 8);
    let params = bench_params(&cfg);
    let mp = MessagePassingConfig {
        t_max: 8,
        ..MessagePassingConfig::default()
    };
    let mut tape = Tape::new();
    c.bench_function("forward_6dev_4flow_w16", |b| {
        b.iter(|| {
            tape.reset();
            let model = DelayModel {
                config: &cfg,
                params: &params,
                stats: &stats,
            };
            black_box(model.forward(&scenario, &mut tape, &mp).unwrap());
        })
    });
}

fn training_step(c: &mut Criterion) {
    let (scenario, stats) = bench_scenario(4);
    let cfg = ModelConfig::tiny(16, 16, 8);
    let params = bench_params(&cfg);
    let labels: Vec<f64> = (0..scenario.flows().len()).map(|i| 0.01 + i as f64 * 0.003).collect();
    let mp = MessagePassingConfig {
        t_max: 8,
        ..MessagePassingConfig::default()
    };
    let mut tape = Tape::new();
    c.bench_function("forward_backward_6dev_4flow_w16", |b| {
        b.iter(|| {
            tape.reset();
            let model = DelayModel {
                config: &cfg,
                params: &params,
                stats: &stats,
            };
            let out = model.forward(&scenario, &mut tape, &mp).unwrap();
            let loss = log_mse_loss_on_tape(&mut tape, &out.prediction_vars, &labels).unwrap();
            let grads = tape.backward(loss).unwrap();
            black_box(out.bound.named_gradients(&tape, &grads));
        })
    });
}

fn simulate_scenario(c: &mut Criterion) {
    let cfg = bench_gen_config();
    c.bench_function("simulate_6dev_4flow_10s", |b| {
        b.iter(|| black_box(gen_scenario(&cfg, 0).unwrap()))
    });
}

fn binning(c: &mut Criterion) {
    let packets = packets_for_bench(9);
    c.bench_function("bin_packets_10s_mb", |b| {
        b.iter(|| black_box(bin_packets(&packets, 8000.0).unwrap()))
    });
}

criterion_group!(benches, forward_pass, training_step, simulate_scenario, binning);
criterion_main!(benches);
