use blockxfer::engine::{BatchKind, Callback, Completion, EngineConfig, TransferCounters, TransferParameters};
use blockxfer::transport::{LinkModel, SimConfig, Simulation};
use blockxfer::wire::block_count_for;
use proptest::prelude::*;

struct Run {
    sender: blockxfer::engine::SenderCounters,
    batches: Vec<blockxfer::engine::Batch>,
    progress: Vec<u32>,
    received: Vec<u8>,
    block_count: u32,
}

fn run(size: usize, params: TransferParameters, link: LinkModel) -> Run {
    let mut sim = Simulation::new(SimConfig {
        link,
        keep_progress: true,
        ..Default::default()
    });
    let config = EngineConfig {
        params,
        record_batches: true,
    };
    let a = sim.add_node(config.clone(), 1);
    let b = sim.add_node(config, 2);
    let data: Vec<u8> = (0..size).map(|i| (i * 7 + i / 251) as u8).collect();
    let id = sim.engine_mut(a).start_transfer(b, "p", vec![], data.clone(), None, 0).unwrap();
    sim.run(u64::MAX);
    let mut out = Run {
        sender: Default::default(),
        batches: sim.engine_mut(a).take_batches(id).unwrap_or_default(),
        progress: Vec::new(),
        received: Vec::new(),
        block_count: block_count_for(size as u64, params.block_size).unwrap(),
    };
    for (_, _, cb) in sim.events() {
        match cb {
            Callback::Progress { received_blocks, .. } => out.progress.push(*received_blocks),
            Callback::Complete {
                counters: TransferCounters::Sender(s),
                ..
            } => out.sender = *s,
            Callback::Complete {
                outcome: Completion::Received { data: d, .. },
                ..
            } => out.received = d.clone(),
            Callback::Errored { code, .. } => panic!("transfer failed with {code}"),
            _ => {}
        }
    }
    assert_eq!(out.received, data);
    out
}

fn lossy(seed: u64, loss: f64, dup: f64, reorder: f64) -> LinkModel {
    LinkModel {
        loss_probability: loss,
        latency_base_ms: 15,
        latency_jitter_ms: 25,
        reorder_probability: reorder,
        duplicate_probability: dup,
        seed,
    }
}

fn params(block_size: u32, window_size: u32) -> TransferParameters {
    TransferParameters {
        block_size,
        window_size,
        retransmit_interval_ms: 400,
        max_attempts: 50,
        ..Default::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn sent_packets_are_accounted_for(
        size in 0usize..400_000,
        b in 200u32..=1200,
        w in 16u32..=128,
        loss in 0.0f64..0.25,
        seed in any::<u64>(),
    ) {
        let r = run(size, params(b, w), lossy(seed, loss, 0.02, 0.05));
        let s = r.sender;
        prop_assert_eq!(s.fresh_blocks_sent, u64::from(r.block_count));
        prop_assert_eq!(s.data_packets_sent, s.fresh_blocks_sent + s.lost_blocks + s.retransmitted_window_blocks);
        let logged: usize = r.batches.iter().map(|bt| bt.blocks.len()).sum();
        prop_assert_eq!(logged as u64, s.data_packets_sent);
    }

    #[test]
    fn lost_blocks_match_piggybacked_entries(
        size in 1usize..300_000,
        b in 200u32..=1200,
        w in 16u32..=96,
        seed in any::<u64>(),
    ) {
        let r = run(size, params(b, w), lossy(seed, 0.1, 0.0, 0.05));
        let mut piggybacked = 0u64;
        for bt in &r.batches {
            match bt.kind {
                BatchKind::Window => {
                    let start = bt.window_index * w;
                    piggybacked += bt.blocks.iter().filter(|&&n| n < start).count() as u64;
                    prop_assert!(bt.blocks.windows(2).all(|p| p[0] < p[1]));
                }
                BatchKind::Drain => piggybacked += bt.blocks.len() as u64,
                BatchKind::Retransmit => {}
            }
        }
        prop_assert_eq!(r.sender.lost_blocks, piggybacked);
    }

    #[test]
    fn progress_never_goes_backwards(
        size in 1usize..300_000,
        w in 16u32..=64,
        seed in any::<u64>(),
    ) {
        let r = run(size, params(1000, w), lossy(seed, 0.15, 0.1, 0.1));
        prop_assert!(r.progress.windows(2).all(|p| p[0] < p[1]));
        prop_assert_eq!(r.progress.last().copied(), Some(r.block_count));
    }

    #[test]
    fn downscale_halves_until_floor(w in 1u32..=100_000, floor in 1u32..=64) {
        let mut p = TransferParameters { window_size: w.max(floor), min_window: floor, ..Default::default() };
        let mut seen = vec![p.window_size];
        while p.window_size > floor {
            p = p.downscale_window();
            seen.push(p.window_size);
        }
        prop_assert!(seen.windows(2).all(|s| s[1] < s[0] && s[1] == (s[0] / 2).max(floor)));
        prop_assert_eq!(p.downscale_window().window_size, floor);
    }
}

#[test]
fn heavy_duplication_and_reordering_completes() {
    for seed in 0..20 {
        let r = run(250_000, params(900, 32), lossy(seed, 0.05, 0.5, 0.5));
        assert_eq!(r.sender.fresh_blocks_sent, u64::from(r.block_count));
    }
}
