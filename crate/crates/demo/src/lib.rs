//! WebAssembly bindings for the static demo page in `www/`.

use std::fmt::Write as _;

use blockxfer::bench::{self, ExperimentConfig};
use blockxfer::engine::{Callback, EngineConfig, TransferParameters};
use blockxfer::transport::{LinkModel, SimConfig, Simulation};
/// Limits that keep a single call responsive in a browser tab.
const MAX_TRACE_BYTES: u32 = 2_000_000;
const MAX_CURVE_BYTES: u32 = 4_000_000;
const TRACE_LINES: usize = 400;

fn params(block_size: u32, window: u32, interval_ms: u32) -> Result<TransferParameters, String> {
    let p = TransferParameters {
        block_size,
        window_size: window,
        retransmit_interval_ms: u64::from(interval_ms),
        ..Default::default()
    };
    p.validate().map_err(|e| e.to_string())?;
    Ok(p)
}

fn link(loss: f64, latency_ms: u32, seed: u64) -> Result<LinkModel, String> {
    let l = LinkModel {
        loss_probability: loss,
        latency_base_ms: u64::from(latency_ms),
        seed,
        ..Default::default()
    };
    l.validate().map_err(|e| e.to_string())?;
    Ok(l)
}

/// Runs one simulated transfer and returns its packet trace followed by a
/// summary line. Long traces are cut after the first few hundred packets.
pub fn simulate_transfer(
    size: u32,
    block_size: u32,
    window: u32,
    loss: f64,
    latency_ms: u32,
    seed: u64,
) -> Result<String, String> {
    if size > MAX_TRACE_BYTES {
        return Err(format!("size is limited to {MAX_TRACE_BYTES} bytes here"));
    }
    let params = params(block_size, window, 500.max(latency_ms * 4))?;
    let mut sim = Simulation::new(SimConfig {
        link: link(loss, latency_ms, seed)?,
        trace: true,
        ..Default::default()
    });
    let config = EngineConfig {
        params,
        record_batches: false,
    };
    let a = sim.add_node(config.clone(), seed);
    let b = sim.add_node(config, seed ^ 1);
    let data = bench::pattern(seed, size as usize);
    sim.engine_mut(a)
        .start_transfer(b, "demo", Vec::new(), data, None, 0)
        .map_err(|e| e.to_string())?;
    sim.run(3_600_000);

    let mut out = String::new();
    for entry in sim.trace().iter().take(TRACE_LINES) {
        let _ = writeln!(out, "{entry:#}");
    }
    if sim.trace().len() > TRACE_LINES {
        let _ = writeln!(out, "... {} more datagrams", sim.trace().len() - TRACE_LINES);
    }
    let counters = sim.counters();
    let _ = writeln!(
        out,
        "datagrams sent {}, dropped {}",
        counters.datagrams_sent, counters.datagrams_dropped
    );
    for (t, node, cb) in sim.events() {
        match cb {
            Callback::Complete { .. } => {
                let _ = writeln!(out, "{node} completed at {t} ms");
            }
            Callback::Errored { code, .. } => {
                let _ = writeln!(out, "{node} failed at {t} ms: {code}");
            }
            Callback::Progress { .. } => {}
        }
    }
    Ok(out)
}

/// Mean simulated throughput for each block size at one window size, as
/// `B,throughput_Bps` lines.
pub fn block_size_curve(
    window: u32,
    loss: f64,
    latency_ms: u32,
    size: u32,
    iterations: u32,
    seed: u64,
) -> Result<String, String> {
    if size > MAX_CURVE_BYTES {
        return Err(format!("size is limited to {MAX_CURVE_BYTES} bytes here"));
    }
    let defaults = ExperimentConfig::default();
    let config = ExperimentConfig {
        window_sizes: vec![window],
        iterations: iterations.clamp(1, 5),
        data_size: u64::from(size),
        link: link(loss, latency_ms, 0)?,
        seed,
        ..defaults
    };
    config.validate().map_err(|e| e.to_string())?;
    let rows = bench::sweep(&config).map_err(|e| e.to_string())?;
    let mut out = String::from("B,throughput_Bps\n");
    for cell in bench::summarize(&rows) {
        let _ = writeln!(out, "{},{:.1}", cell.block_size, cell.mean_throughput_bps);
    }
    Ok(out)
}

/// Window sizes after successive timeouts, starting from `window`, until
/// the floor is reached.
pub fn downscale_sequence(window: u32, min_window: u32) -> Result<Vec<u32>, String> {
    let mut p = TransferParameters {
        window_size: window,
        min_window,
        ..Default::default()
    };
    p.validate().map_err(|e| e.to_string())?;
    let mut out = vec![p.window_size];
    loop {
        let next = p.downscale_window().window_size;
        if next == p.window_size {
            return Ok(out);
        }
        p.window_size = next;
        out.push(next);
    }
}

mod bindings {
    use wasm_bindgen::prelude::*;

    fn js(e: String) -> JsError {
        JsError::new(&e)
    }

    #[wasm_bindgen(js_name = simulateTransfer)]
    pub fn simulate_transfer(
        size: u32,
        block_size: u32,
        window: u32,
        loss: f64,
        latency_ms: u32,
        seed: u64,
    ) -> Result<String, JsError> {
        super::simulate_transfer(size, block_size, window, loss, latency_ms, seed).map_err(js)
    }

    #[wasm_bindgen(js_name = blockSizeCurve)]
    pub fn block_size_curve(
        window: u32,
        loss: f64,
        latency_ms: u32,
        size: u32,
        iterations: u32,
        seed: u64,
    ) -> Result<String, JsError> {
        super::block_size_curve(window, loss, latency_ms, size, iterations, seed).map_err(js)
    }

    #[wasm_bindgen(js_name = downscaleSequence)]
    pub fn downscale_sequence(window: u32, min_window: u32) -> Result<Vec<u32>, JsError> {
        super::downscale_sequence(window, min_window).map_err(js)
    }
}
