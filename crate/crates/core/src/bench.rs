//! Parameter sweeps and large-transfer evaluation.
//!
//! Each run moves one seeded pseudo-random blob between two engines and
//! reads its statistics from the engine counters. Runs for the same base
//! seed and iteration share a link seed across every (B, W) cell, so cells
//! are compared under the same loss pattern draws.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::engine::{Callback, Completion, EngineConfig, TransferCounters, TransferParameters};
use crate::transport::{LinkModel, SimConfig, Simulation};
use crate::wire::ErrorCode;

pub const DEFAULT_BLOCK_SIZES: [u32; 7] = [600, 700, 800, 900, 1000, 1100, 1200];
pub const DEFAULT_WINDOW_SIZES: [u32; 8] = [16, 32, 48, 64, 80, 96, 112, 128];
pub const DEFAULT_ITERATIONS: u32 = 5;
pub const DEFAULT_SWEEP_DATA_SIZE: u64 = 10 << 20;
/// Sweep retransmit interval; a few round trips of the default link.
pub const DEFAULT_SWEEP_INTERVAL_MS: u64 = 200;
pub const LARGE_DATA_SIZE: u64 = 250 << 20;
pub const LARGE_REPETITIONS: u32 = 10;
/// Loss rate giving roughly one lost block per fifty windows of 80.
pub const CALIBRATED_LOSS: f64 = 2.6e-4;

pub const CSV_HEADER: [&str; 10] = [
    "B",
    "W",
    "iteration",
    "seed",
    "duration_ms",
    "throughput_Bps",
    "lost_blocks",
    "retx_windows",
    "retx_acks",
    "completed",
];

/// Simulated time budget for one run.
const RUN_LIMIT_MS: u64 = 24 * 3600 * 1000;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("invalid experiment: {0}")]
    Config(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[cfg(feature = "udp")]
    #[error(transparent)]
    Transport(#[from] crate::transport::TransportError),
    #[error("transfer failed: {0}")]
    Failed(ErrorCode),
}

#[derive(Clone, Debug)]
pub struct ExperimentConfig {
    pub block_sizes: Vec<u32>,
    pub window_sizes: Vec<u32>,
    pub iterations: u32,
    pub data_size: u64,
    pub link: LinkModel,
    /// Interval, attempt budget and size cap for every run; block and
    /// window size come from the grid.
    pub params: TransferParameters,
    pub header_tax: usize,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            block_sizes: DEFAULT_BLOCK_SIZES.to_vec(),
            window_sizes: DEFAULT_WINDOW_SIZES.to_vec(),
            iterations: DEFAULT_ITERATIONS,
            data_size: DEFAULT_SWEEP_DATA_SIZE,
            link: LinkModel {
                loss_probability: 0.01,
                latency_base_ms: 20,
                ..Default::default()
            },
            params: TransferParameters {
                retransmit_interval_ms: DEFAULT_SWEEP_INTERVAL_MS,
                ..Default::default()
            },
            header_tax: 0,
            seed: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), BenchError> {
        if self.block_sizes.is_empty() || self.window_sizes.is_empty() {
            return Err(BenchError::Config("parameter grids must not be empty".into()));
        }
        if self.iterations == 0 {
            return Err(BenchError::Config("at least one iteration is required".into()));
        }
        self.link.validate().map_err(|e| BenchError::Config(e.to_string()))?;
        for &b in &self.block_sizes {
            for &w in &self.window_sizes {
                self.cell_params(b, w)
                    .validate()
                    .map_err(|e| BenchError::Config(format!("B={b} W={w}: {e}")))?;
            }
        }
        Ok(())
    }

    fn cell_params(&self, block_size: u32, window_size: u32) -> TransferParameters {
        TransferParameters {
            block_size,
            window_size,
            ..self.params
        }
    }

    /// Every run of the sweep in output order.
    pub fn runs(&self) -> Vec<RunSpec> {
        let mut out = Vec::new();
        for &b in &self.block_sizes {
            for &w in &self.window_sizes {
                for iteration in 0..self.iterations {
                    out.push(self.run_spec(b, w, iteration));
                }
            }
        }
        out
    }

    pub fn run_spec(&self, block_size: u32, window_size: u32, iteration: u32) -> RunSpec {
        let seed = iteration_seed(self.seed, iteration);
        RunSpec {
            iteration,
            seed,
            data_size: self.data_size,
            link: LinkModel { seed, ..self.link },
            params: self.cell_params(block_size, window_size),
            header_tax: self.header_tax,
            silent_after_window: None,
        }
    }
}

/// Seed shared by every cell's `iteration`-th run.
pub fn iteration_seed(base: u64, iteration: u32) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(base);
    rng.set_stream(u64::from(iteration));
    rng.next_u64()
}

/// Deterministic blob contents for a run.
pub fn pattern(seed: u64, len: usize) -> Vec<u8> {
    let mut data = vec![0; len];
    ChaCha8Rng::seed_from_u64(seed ^ 0x5EED).fill_bytes(&mut data);
    data
}

/// Whether `data` equals `pattern(seed, data.len())`, without building a copy.
pub fn matches_pattern(seed: u64, data: &[u8]) -> bool {
    const CHUNK: usize = 1 << 16;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED);
    let mut expected = vec![0; CHUNK];
    data.chunks(CHUNK).all(|chunk| {
        let expected = &mut expected[..chunk.len()];
        rng.fill_bytes(expected);
        chunk == expected
    })
}

/// One transfer of an experiment.
#[derive(Clone, Debug)]
pub struct RunSpec {
    pub iteration: u32,
    pub seed: u64,
    pub data_size: u64,
    pub link: LinkModel,
    pub params: TransferParameters,
    pub header_tax: usize,
    /// Cut the link for good once the sender reaches this window.
    pub silent_after_window: Option<u32>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct TransferStats {
    pub duration_ms: u64,
    pub throughput_bps: f64,
    pub lost_blocks: u64,
    pub retransmitted_windows: u64,
    pub retransmitted_acks: u64,
    pub blocks_sent: u64,
    pub block_count: u32,
    pub completed: bool,
    /// Set when the transfer ended in an error.
    pub error: Option<ErrorCode>,
}

impl TransferStats {
    fn from_counters(sender: Option<TransferCounters>, receiver: Option<TransferCounters>) -> Self {
        let mut stats = Self::default();
        if let Some(TransferCounters::Sender(s)) = sender {
            stats.lost_blocks = s.lost_blocks;
            stats.retransmitted_windows = s.retransmitted_windows;
            stats.blocks_sent = s.data_packets_sent;
        }
        if let Some(TransferCounters::Receiver(r)) = receiver {
            stats.retransmitted_acks = r.retransmitted_acks;
        }
        stats
    }

    fn finish(&mut self, data_size: u64, duration_ms: u64) {
        self.duration_ms = duration_ms;
        self.throughput_bps = if duration_ms == 0 {
            0.0
        } else {
            data_size as f64 * 1000.0 / duration_ms as f64
        };
    }
}

/// Runs one transfer over the simulator.
pub fn run_experiment(spec: &RunSpec) -> TransferStats {
    let mut sim = Simulation::new(SimConfig {
        link: spec.link,
        header_tax: spec.header_tax,
        trace: false,
        keep_progress: false,
    });
    let config = EngineConfig {
        params: spec.params,
        record_batches: false,
    };
    let a = sim.add_node(config.clone(), spec.seed);
    let b = sim.add_node(config, spec.seed.rotate_left(17));
    let data = pattern(spec.seed, spec.data_size as usize);
    let block_count = crate::wire::block_count_for(spec.data_size, spec.params.block_size).unwrap_or(0);
    let start = sim.now();
    if let Err(e) = sim.engine_mut(a).start_transfer(b, "bench", Vec::new(), data, None, start) {
        return TransferStats {
            block_count,
            error: e.code(),
            ..Default::default()
        };
    }
    if let Some(k) = spec.silent_after_window {
        sim.run_until(RUN_LIMIT_MS, |s| {
            s.engine(a).sender(&b).is_none_or(|snd| snd.window_index() >= k)
        });
        sim.set_partitioned(true);
    }

    let mut sender = None;
    let mut receiver = None;
    let mut sender_done = None;
    let mut error = None;
    let mut intact = false;
    while sender_done.is_none() && error.is_none() {
        if !sim.step() {
            break;
        }
        if sim.now() > RUN_LIMIT_MS {
            break;
        }
        for (t, node, cb) in sim.take_events() {
            match cb {
                Callback::Complete { outcome, counters, .. } => {
                    if node == a {
                        sender = Some(counters);
                        sender_done = Some(t);
                    } else {
                        receiver = Some(counters);
                        if let Completion::Received { data, .. } = outcome {
                            intact = data.len() as u64 == spec.data_size && matches_pattern(spec.seed, &data);
                        }
                    }
                }
                Callback::Errored { code, counters, .. } => {
                    if node == a {
                        sender = counters;
                        error = Some(code);
                    } else {
                        receiver = counters;
                    }
                }
                Callback::Progress { .. } => {}
            }
        }
    }
    if receiver.is_none() {
        receiver = sim.engine(b).receiver(&a).map(|r| TransferCounters::Receiver(*r.counters()));
    }
    if sender.is_none() {
        sender = sim.engine(a).sender(&b).map(|s| TransferCounters::Sender(*s.counters()));
    }
    let mut stats = TransferStats::from_counters(sender, receiver);
    stats.block_count = block_count;
    stats.error = error;
    stats.completed = sender_done.is_some() && intact;
    stats.finish(spec.data_size, sender_done.unwrap_or(sim.now()) - start);
    stats
}

/// One CSV row.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub block_size: u32,
    pub window_size: u32,
    pub iteration: u32,
    pub seed: u64,
    pub stats: TransferStats,
}

impl SweepRow {
    fn record(&self) -> [String; 10] {
        let s = &self.stats;
        [
            self.block_size.to_string(),
            self.window_size.to_string(),
            self.iteration.to_string(),
            self.seed.to_string(),
            s.duration_ms.to_string(),
            format!("{:.1}", s.throughput_bps),
            s.lost_blocks.to_string(),
            s.retransmitted_windows.to_string(),
            s.retransmitted_acks.to_string(),
            u8::from(s.completed).to_string(),
        ]
    }

    fn from_record(r: &csv::StringRecord) -> Option<Self> {
        let f = |i: usize| r.get(i);
        Some(Self {
            block_size: f(0)?.parse().ok()?,
            window_size: f(1)?.parse().ok()?,
            iteration: f(2)?.parse().ok()?,
            seed: f(3)?.parse().ok()?,
            stats: TransferStats {
                duration_ms: f(4)?.parse().ok()?,
                throughput_bps: f(5)?.parse().ok()?,
                lost_blocks: f(6)?.parse().ok()?,
                retransmitted_windows: f(7)?.parse().ok()?,
                retransmitted_acks: f(8)?.parse().ok()?,
                completed: f(9)? == "1",
                ..Default::default()
            },
        })
    }

    fn key(&self) -> (u32, u32, u32) {
        (self.block_size, self.window_size, self.iteration)
    }
}

fn run_row(spec: &RunSpec) -> SweepRow {
    SweepRow {
        block_size: spec.params.block_size,
        window_size: spec.params.window_size,
        iteration: spec.iteration,
        seed: spec.seed,
        stats: run_experiment(spec),
    }
}

/// Runs every cell and iteration. Rows come back in grid order regardless
/// of how the runs were scheduled.
pub fn sweep(config: &ExperimentConfig) -> Result<Vec<SweepRow>, BenchError> {
    sweep_resume(config, &[])
}

/// Like [`sweep`], reusing rows from an earlier partial run whose seed matches.
pub fn sweep_resume(config: &ExperimentConfig, done: &[SweepRow]) -> Result<Vec<SweepRow>, BenchError> {
    config.validate()?;
    let done: BTreeMap<_, _> = done.iter().map(|r| (r.key(), r)).collect();
    let todo: Vec<RunSpec> = config
        .runs()
        .into_iter()
        .filter(|s| {
            let key = (s.params.block_size, s.params.window_size, s.iteration);
            done.get(&key).is_none_or(|r| r.seed != s.seed)
        })
        .collect();
    let fresh = run_all(&todo);
    let mut fresh = fresh.into_iter();
    Ok(config
        .runs()
        .iter()
        .map(|s| {
            let key = (s.params.block_size, s.params.window_size, s.iteration);
            match done.get(&key) {
                Some(r) if r.seed == s.seed => (*r).clone(),
                _ => fresh.next().expect("one fresh row per pending run"),
            }
        })
        .collect())
}

#[cfg(feature = "parallel")]
fn run_all(specs: &[RunSpec]) -> Vec<SweepRow> {
    use rayon::prelude::*;
    specs.par_iter().map(run_row).collect()
}

#[cfg(not(feature = "parallel"))]
fn run_all(specs: &[RunSpec]) -> Vec<SweepRow> {
    specs.iter().map(run_row).collect()
}

pub fn write_csv<W: io::Write>(out: W, rows: &[SweepRow]) -> Result<(), BenchError> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    w.write_record(CSV_HEADER)?;
    for row in rows {
        w.write_record(row.record())?;
    }
    w.flush()?;
    Ok(())
}

/// Reads rows written by [`write_csv`], skipping malformed lines.
pub fn read_csv<R: io::Read>(input: R) -> Result<Vec<SweepRow>, BenchError> {
    let mut r = csv::Reader::from_reader(input);
    let mut rows = Vec::new();
    for record in r.records() {
        if let Some(row) = SweepRow::from_record(&record?) {
            rows.push(row);
        }
    }
    Ok(rows)
}

/// Per-cell means.
#[derive(Clone, Debug, PartialEq)]
pub struct CellSummary {
    pub block_size: u32,
    pub window_size: u32,
    pub runs: u32,
    pub completed: u32,
    pub mean_duration_ms: f64,
    pub mean_throughput_bps: f64,
    pub mean_lost_blocks: f64,
    pub mean_retx_windows: f64,
    pub mean_retx_acks: f64,
}

pub fn summarize(rows: &[SweepRow]) -> Vec<CellSummary> {
    let mut cells: BTreeMap<(u32, u32), Vec<&TransferStats>> = BTreeMap::new();
    for r in rows {
        cells.entry((r.block_size, r.window_size)).or_default().push(&r.stats);
    }
    cells
        .into_iter()
        .map(|((block_size, window_size), stats)| {
            let n = stats.len() as f64;
            let mean = |f: fn(&TransferStats) -> f64| stats.iter().map(|s| f(s)).sum::<f64>() / n;
            CellSummary {
                block_size,
                window_size,
                runs: stats.len() as u32,
                completed: stats.iter().filter(|s| s.completed).count() as u32,
                mean_duration_ms: mean(|s| s.duration_ms as f64),
                mean_throughput_bps: mean(|s| s.throughput_bps),
                mean_lost_blocks: mean(|s| s.lost_blocks as f64),
                mean_retx_windows: mean(|s| s.retransmitted_windows as f64),
                mean_retx_acks: mean(|s| s.retransmitted_acks as f64),
            }
        })
        .collect()
}

/// Aligned per-cell table.
pub fn summary_table(cells: &[CellSummary]) -> String {
    let mut out = format!(
        "{:>5} {:>4} {:>5} {:>12} {:>14} {:>10} {:>11} {:>9}\n",
        "B", "W", "done", "duration_ms", "throughput_Bps", "lost", "retx_win", "retx_ack"
    );
    for c in cells {
        let _ = writeln!(
            out,
            "{:>5} {:>4} {:>2}/{:<2} {:>12.1} {:>14.1} {:>10.2} {:>11.2} {:>9.2}",
            c.block_size,
            c.window_size,
            c.completed,
            c.runs,
            c.mean_duration_ms,
            c.mean_throughput_bps,
            c.mean_lost_blocks,
            c.mean_retx_windows,
            c.mean_retx_acks
        );
    }
    out
}

/// Mean throughput in kB/s with B down the side and W across the top.
pub fn throughput_matrix(cells: &[CellSummary]) -> String {
    let windows: std::collections::BTreeSet<u32> = cells.iter().map(|c| c.window_size).collect();
    let blocks: std::collections::BTreeSet<u32> = cells.iter().map(|c| c.block_size).collect();
    let mut out = format!("{:>6}", "B\\W");
    for w in &windows {
        let _ = write!(out, " {w:>8}");
    }
    out.push('\n');
    for b in &blocks {
        let _ = write!(out, "{b:>6}");
        for w in &windows {
            match cells.iter().find(|c| c.block_size == *b && c.window_size == *w) {
                Some(c) => {
                    let _ = write!(out, " {:>8.1}", c.mean_throughput_bps / 1000.0);
                }
                None => out.push_str(&format!(" {:>8}", "-")),
            }
        }
        out.push('\n');
    }
    out
}

/// Cells at a fixed W whose mean throughput drops as B grows.
pub fn block_size_regressions(cells: &[CellSummary]) -> Vec<(u32, u32, u32)> {
    let mut by_window: BTreeMap<u32, Vec<&CellSummary>> = BTreeMap::new();
    for c in cells {
        by_window.entry(c.window_size).or_default().push(c);
    }
    let mut out = Vec::new();
    for (w, mut row) in by_window {
        row.sort_by_key(|c| c.block_size);
        for pair in row.windows(2) {
            if pair[1].mean_throughput_bps < pair[0].mean_throughput_bps {
                out.push((w, pair[0].block_size, pair[1].block_size));
            }
        }
    }
    out
}

/// Mean throughput of a single cell at several blob sizes.
pub fn size_study(
    config: &ExperimentConfig,
    block_size: u32,
    window_size: u32,
    sizes: &[u64],
) -> Result<Vec<(u64, f64)>, BenchError> {
    config.validate()?;
    let specs: Vec<RunSpec> = sizes
        .iter()
        .flat_map(|&size| {
            (0..config.iterations).map(move |i| RunSpec {
                data_size: size,
                ..config.run_spec(block_size, window_size, i)
            })
        })
        .collect();
    let rows = run_all(&specs);
    Ok(sizes
        .iter()
        .zip(rows.chunks(config.iterations as usize))
        .map(|(&size, chunk)| {
            let mean = chunk.iter().map(|r| r.stats.throughput_bps).sum::<f64>() / chunk.len() as f64;
            (size, mean)
        })
        .collect())
}

/// Where the large transfer runs.
#[derive(Clone, Copy, Debug)]
pub enum Carrier {
    Simulated(LinkModel),
    #[cfg(feature = "udp")]
    Loopback,
}

#[derive(Clone, Debug)]
pub struct LargeConfig {
    pub data_size: u64,
    pub params: TransferParameters,
    pub repetitions: u32,
    pub carrier: Carrier,
    pub seed: u64,
}

impl Default for LargeConfig {
    fn default() -> Self {
        Self {
            data_size: LARGE_DATA_SIZE,
            params: TransferParameters::default(),
            repetitions: LARGE_REPETITIONS,
            carrier: Carrier::Simulated(LinkModel {
                loss_probability: CALIBRATED_LOSS,
                latency_base_ms: 20,
                ..Default::default()
            }),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LargeSummary {
    pub runs: Vec<TransferStats>,
    pub mean_throughput_bps: f64,
    pub min_throughput_bps: f64,
    pub max_throughput_bps: f64,
    pub total_lost_blocks: u64,
    pub total_retx_windows: u64,
    pub total_retx_acks: u64,
}

impl LargeSummary {
    fn new(runs: Vec<TransferStats>) -> Self {
        let tp = runs.iter().map(|s| s.throughput_bps);
        Self {
            mean_throughput_bps: tp.clone().sum::<f64>() / runs.len().max(1) as f64,
            min_throughput_bps: tp.clone().fold(f64::INFINITY, f64::min),
            max_throughput_bps: tp.fold(0.0, f64::max),
            total_lost_blocks: runs.iter().map(|s| s.lost_blocks).sum(),
            total_retx_windows: runs.iter().map(|s| s.retransmitted_windows).sum(),
            total_retx_acks: runs.iter().map(|s| s.retransmitted_acks).sum(),
            runs,
        }
    }

    pub fn report(&self) -> String {
        let mut out = format!(
            "{:>4} {:>12} {:>14} {:>8} {:>9} {:>9}\n",
            "run", "duration_ms", "throughput_Bps", "lost", "retx_win", "retx_ack"
        );
        for (i, s) in self.runs.iter().enumerate() {
            let _ = writeln!(
                out,
                "{:>4} {:>12} {:>14.1} {:>8} {:>9} {:>9}",
                i, s.duration_ms, s.throughput_bps, s.lost_blocks, s.retransmitted_windows, s.retransmitted_acks
            );
        }
        let _ = writeln!(
            out,
            "throughput mean {:.1} min {:.1} max {:.1} B/s; lost {} retx_win {} retx_ack {}",
            self.mean_throughput_bps,
            self.min_throughput_bps,
            self.max_throughput_bps,
            self.total_lost_blocks,
            self.total_retx_windows,
            self.total_retx_acks
        );
        out
    }
}

/// Repeated transfers of one large blob.
pub fn evaluate_large(config: &LargeConfig) -> Result<LargeSummary, BenchError> {
    config.params.validate().map_err(|e| BenchError::Config(e.to_string()))?;
    let mut runs = Vec::new();
    for rep in 0..config.repetitions {
        let seed = iteration_seed(config.seed, rep);
        let stats = match config.carrier {
            Carrier::Simulated(link) => run_experiment(&RunSpec {
                iteration: rep,
                seed,
                data_size: config.data_size,
                link: LinkModel { seed, ..link },
                params: config.params,
                header_tax: 0,
                silent_after_window: None,
            }),
            #[cfg(feature = "udp")]
            Carrier::Loopback => loopback::run(config.data_size, config.params, seed)?,
        };
        if let Some(code) = stats.error {
            return Err(BenchError::Failed(code));
        }
        runs.push(stats);
    }
    Ok(LargeSummary::new(runs))
}

#[cfg(feature = "udp")]
pub mod loopback {
    //! One transfer between two UDP endpoints on 127.0.0.1.

    use std::net::SocketAddr;
    use std::time::{Duration, Instant};

    use super::{matches_pattern, pattern, TransferStats};
    use crate::crypto::IdentityCipher;
    use crate::engine::{Callback, Completion, EngineConfig, TransferCounters, TransferParameters};
    use crate::transport::{TransportError, UdpDriver, UdpEndpoint};

    const STEP: Duration = Duration::from_millis(50);

    fn receive(
        mut driver: UdpDriver<IdentityCipher>,
        expected_len: usize,
        seed: u64,
        linger: Duration,
    ) -> Result<(Option<TransferCounters>, bool), TransportError> {
        let mut done: Option<Instant> = None;
        let mut counters = None;
        let mut intact = false;
        loop {
            if done.is_some_and(|t| t.elapsed() >= linger) {
                return Ok((counters, intact));
            }
            for cb in driver.step(STEP)?.callbacks {
                match cb {
                    Callback::Complete {
                        outcome: Completion::Received { data, .. },
                        counters: c,
                        ..
                    } => {
                        intact = data.len() == expected_len && matches_pattern(seed, &data);
                        counters = Some(c);
                        done = Some(Instant::now());
                    }
                    Callback::Errored { counters: c, .. } => {
                        counters = c;
                        done = Some(Instant::now());
                    }
                    _ => {}
                }
            }
        }
    }

    pub fn run(data_size: u64, params: TransferParameters, seed: u64) -> Result<TransferStats, TransportError> {
        let config = EngineConfig {
            params,
            record_batches: false,
        };
        let rx_endpoint = UdpEndpoint::bind("127.0.0.1:0")?;
        let rx_addr: SocketAddr = rx_endpoint.local_addr()?;
        let rx = UdpDriver::new(rx_endpoint, config.clone(), seed.rotate_left(17), IdentityCipher);
        let linger = Duration::from_millis(2 * params.retransmit_interval_ms);
        let handle = std::thread::spawn(move || receive(rx, data_size as usize, seed, linger));

        let mut tx = UdpDriver::new(UdpEndpoint::bind("127.0.0.1:0")?, config, seed, IdentityCipher);
        let data = pattern(seed, data_size as usize);
        let start = tx.now_ms();
        let mut stats = TransferStats::default();
        if let Err(e) = tx.engine_mut().start_transfer(rx_addr, "bench", Vec::new(), data, None, start) {
            stats.error = e.code();
            return Ok(stats);
        }
        let mut sender = None;
        let mut finished = None;
        while finished.is_none() {
            for cb in tx.step(STEP)?.callbacks {
                match cb {
                    Callback::Complete { counters, .. } => {
                        sender = Some(counters);
                        finished = Some(tx.now_ms());
                    }
                    Callback::Errored { code, counters, .. } => {
                        sender = counters;
                        stats.error = Some(code);
                        finished = Some(tx.now_ms());
                    }
                    _ => {}
                }
            }
        }
        let (receiver, intact) = handle.join().expect("receiver thread panicked")?;
        let error = stats.error;
        stats = TransferStats::from_counters(sender, receiver);
        stats.error = error;
        stats.block_count = crate::wire::block_count_for(data_size, params.block_size).unwrap_or(0);
        stats.completed = error.is_none() && intact;
        stats.finish(data_size, finished.unwrap_or(start) - start);
        Ok(stats)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ExperimentConfig {
        ExperimentConfig {
            block_sizes: vec![600, 1200],
            window_sizes: vec![16, 80],
            iterations: 2,
            data_size: 200_000,
            seed: 3,
            ..Default::default()
        }
    }

    #[test]
    fn streaming_pattern_check() {
        let data = pattern(9, 200_003);
        assert!(matches_pattern(9, &data));
        assert!(!matches_pattern(8, &data));
        let mut bad = data.clone();
        bad[150_000] ^= 1;
        assert!(!matches_pattern(9, &bad));
        assert!(matches_pattern(9, &[]));
    }

    #[test]
    fn lossless_run_has_no_recovery() {
        let spec = RunSpec {
            link: LinkModel::lossless(20),
            ..small().run_spec(1000, 32, 0)
        };
        let s = run_experiment(&spec);
        assert!(s.completed);
        assert_eq!((s.lost_blocks, s.retransmitted_windows, s.retransmitted_acks), (0, 0, 0));
        assert_eq!(s.blocks_sent, u64::from(s.block_count));
    }

    #[test]
    fn silent_link_times_out() {
        let spec = RunSpec {
            silent_after_window: Some(3),
            params: TransferParameters {
                max_attempts: 3,
                block_size: 1000,
                window_size: 16,
                retransmit_interval_ms: 200,
                ..Default::default()
            },
            ..small().run_spec(1000, 16, 0)
        };
        let s = run_experiment(&spec);
        assert!(!s.completed);
        assert_eq!(s.error, Some(ErrorCode::Timeout));
    }

    #[test]
    fn larger_blocks_are_faster() {
        let config = ExperimentConfig {
            data_size: 10 << 20,
            iterations: 1,
            ..Default::default()
        };
        let fast = run_experiment(&config.run_spec(1200, 80, 0));
        let slow = run_experiment(&config.run_spec(600, 80, 0));
        assert!(fast.completed && slow.completed);
        assert!(fast.throughput_bps > slow.throughput_bps);
    }

    #[test]
    fn sweep_rows_follow_grid_order() {
        let rows = sweep(&small()).unwrap();
        assert_eq!(rows.len(), 8);
        let keys: Vec<_> = rows.iter().map(SweepRow::key).collect();
        let mut sorted = keys.clone();
        sorted.sort();
        assert_eq!(keys, sorted);
        assert!(rows.iter().all(|r| r.stats.completed));
        assert!(rows
            .iter()
            .all(|r| r.stats.blocks_sent >= u64::from(r.stats.block_count)));
    }

    #[test]
    fn single_cell_gives_iterations_rows() {
        let config = ExperimentConfig {
            block_sizes: vec![800],
            window_sizes: vec![48],
            data_size: 50_000,
            ..Default::default()
        };
        assert_eq!(sweep(&config).unwrap().len(), 5);
    }

    #[test]
    fn csv_roundtrip_and_resume() {
        let config = small();
        let rows = sweep(&config).unwrap();
        let mut buf = Vec::new();
        write_csv(&mut buf, &rows).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("B,W,iteration,seed,duration_ms,throughput_Bps,lost_blocks,retx_windows,retx_acks,completed\n"));
        assert!(!text.contains('\r'));
        let back = read_csv(buf.as_slice()).unwrap();
        assert_eq!(back.len(), rows.len());
        let resumed = sweep_resume(&config, &back[..3]).unwrap();
        let mut again = Vec::new();
        write_csv(&mut again, &resumed).unwrap();
        assert_eq!(again, buf);
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut c = small();
        c.iterations = 0;
        assert!(c.validate().is_err());
        let mut c = small();
        c.window_sizes.clear();
        assert!(c.validate().is_err());
        let mut c = small();
        c.block_sizes = vec![1300];
        assert!(c.validate().is_err());
    }

    #[test]
    fn summaries_and_tables() {
        let rows = sweep(&small()).unwrap();
        let cells = summarize(&rows);
        assert_eq!(cells.len(), 4);
        assert!(cells.iter().all(|c| c.runs == 2));
        let table = summary_table(&cells);
        assert_eq!(table.lines().count(), 5);
        let matrix = throughput_matrix(&cells);
        assert_eq!(matrix.lines().count(), 3);
    }

    #[test]
    fn single_repetition_single_row() {
        let config = LargeConfig {
            data_size: 100_000,
            repetitions: 1,
            ..Default::default()
        };
        let summary = evaluate_large(&config).unwrap();
        assert_eq!(summary.runs.len(), 1);
        assert_eq!(summary.min_throughput_bps, summary.max_throughput_bps);
        assert_eq!(summary.report().lines().count(), 3);
    }

    #[test]
    fn size_list_reports_each_size() {
        let got = size_study(&small(), 1200, 80, &[10_000, 100_000]).unwrap();
        assert_eq!(got.iter().map(|g| g.0).collect::<Vec<_>>(), [10_000, 100_000]);
        assert!(got.iter().all(|g| g.1 > 0.0));
    }

    #[cfg(feature = "udp")]
    #[test]
    fn loopback_run_completes() {
        let params = TransferParameters {
            retransmit_interval_ms: 200,
            ..Default::default()
        };
        let stats = loopback::run(300_000, params, 1).unwrap();
        assert!(stats.completed, "{stats:?}");
        assert_eq!(stats.error, None);
    }
}
