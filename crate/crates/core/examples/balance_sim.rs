//! Per-device load of a 64-expert, top-8 layer sharded over 8 devices, routed
//! two ways: plain global top-K and grouped top-1-per-device.

use moelab::epsim;
use moelab::experiments;
use moelab::{MoeLayerSpec, RoutingMode};

/// Worst `max_over_mean` seen for each routing mode over a handful of batches.
pub fn run_example() -> moelab::Result<(f64, f64)> {
    let spec = MoeLayerSpec::new(64, 8, 8, 32, 1, 1.0)?;
    let devices = 8;
    let mut worst = (1.0_f64, 1.0_f64);
    for seed in 0..20 {
        let (w_r, batch) = experiments::balance_batch(seed, &spec, 256);
        let plain = epsim::dispatch(&batch, &w_r, &spec, devices, RoutingMode::PlainTopK)?;
        let grouped = epsim::dispatch(&batch, &w_r, &spec, devices, RoutingMode::Grouped)?;
        if seed == 0 {
            println!("plain   per-device counts: {:?}", plain.device_counts);
            println!("grouped per-device counts: {:?}", grouped.device_counts);
        }
        worst.0 = worst.0.max(epsim::balance_metrics(&plain).max_over_mean);
        worst.1 = worst.1.max(epsim::balance_metrics(&grouped).max_over_mean);
    }
    Ok(worst)
}

pub fn main() -> moelab::Result<()> {
    let (plain, grouped) = run_example()?;
    println!("worst max/mean load over 20 batches: plain {plain:.3}, grouped {grouped:.3}");
    Ok(())
}
