use bitvec::slice::BitSlice;

/// Cuts `data` into `block_size` pieces; only the last may be shorter.
pub fn split_into_blocks(data: &[u8], block_size: u32) -> impl ExactSizeIterator<Item = &[u8]> {
    assert!(block_size >= 1, "block size must be positive");
    data.chunks(block_size as usize)
}

/// Byte range of `block` inside a blob of `data_size` bytes.
pub(crate) fn block_range(block: u32, block_size: u32, data_size: u64) -> std::ops::Range<usize> {
    let start = u64::from(block) * u64::from(block_size);
    let end = (start + u64::from(block_size)).min(data_size);
    start as usize..end as usize
}

/// Number of windows needed for `block_count` blocks.
pub fn window_count(block_count: u32, window_size: u32) -> u32 {
    block_count.div_ceil(window_size)
}

/// Blocks of window `window_index` that have never been sent before.
pub(crate) fn window_blocks(window_index: u32, window_size: u32, block_count: u32) -> std::ops::Range<u32> {
    let start = u64::from(window_index) * u64::from(window_size);
    let end = (start + u64::from(window_size)).min(u64::from(block_count));
    start.min(end) as u32..end as u32
}

/// Every block below the end of window `window_index` that is not marked in
/// `received`, ascending. Losses from earlier windows are included.
pub fn compute_missing(received: &BitSlice, window_index: u32, window_size: u32, block_count: u32) -> Vec<u32> {
    missing_from(received, 0, window_index, window_size, block_count, usize::MAX)
}

/// [`compute_missing`] starting the scan at `from` and stopping after `limit` entries.
pub(crate) fn missing_from(
    received: &BitSlice,
    from: u32,
    window_index: u32,
    window_size: u32,
    block_count: u32,
    limit: usize,
) -> Vec<u32> {
    let end = window_blocks(window_index, window_size, block_count).end as usize;
    let from = (from as usize).min(end);
    received[from..end]
        .iter_zeros()
        .take(limit)
        .map(|i| (i + from) as u32)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use bitvec::prelude::*;

    fn brute_missing(received: &[bool], window_index: u32, w: u32, count: u32) -> Vec<u32> {
        let end = ((window_index + 1) * w).min(count);
        (0..end).filter(|&n| !received[n as usize]).collect()
    }

    #[test]
    fn split_lengths() {
        let data = vec![7u8; 2500];
        let lens: Vec<usize> = split_into_blocks(&data, 1200).map(<[u8]>::len).collect();
        assert_eq!(lens, [1200, 1200, 100]);
        let exact = vec![0u8; 1200];
        assert_eq!(split_into_blocks(&exact, 1200).map(<[u8]>::len).collect::<Vec<_>>(), [1200]);
        assert_eq!(split_into_blocks(&[], 1200).len(), 0);
    }

    #[test]
    fn split_250_mib() {
        let size: u64 = 250 * (1 << 20);
        assert_eq!(crate::wire::block_count_for(size, 1200), Some(218_454));
        assert_eq!(size.div_ceil(1200), 218_454);
    }

    #[test]
    fn missing_direct_complement() {
        let mut received = bitvec![0; 5];
        for i in [0, 1, 3] {
            received.set(i, true);
        }
        assert_eq!(compute_missing(&received, 0, 5, 5), [2, 4]);
        let all = bitvec![1; 80];
        assert!(compute_missing(&all, 0, 80, 80).is_empty());
    }

    #[test]
    fn missing_spans_earlier_windows() {
        let count = 200;
        let mut flags = vec![false; count];
        for (i, f) in flags.iter_mut().enumerate().take(80) {
            *f = i != 17;
        }
        for i in (80..160).step_by(3) {
            flags[i] = true;
        }
        let received: BitVec = flags.iter().copied().collect();
        let expected = brute_missing(&flags, 1, 80, count as u32);
        assert_eq!(expected[0], 17);
        assert!(expected[1..].iter().all(|&n| (80..160).contains(&n)));
        assert_eq!(compute_missing(&received, 1, 80, count as u32), expected);
    }

    #[test]
    fn missing_last_partial_window() {
        let received = bitvec![0; 7];
        assert_eq!(compute_missing(&received, 1, 5, 7), [0, 1, 2, 3, 4, 5, 6]);
        assert_eq!(missing_from(&received, 2, 1, 5, 7, 3), [2, 3, 4]);
    }

    #[test]
    fn window_helpers() {
        assert_eq!(window_count(0, 80), 0);
        assert_eq!(window_count(3, 80), 1);
        assert_eq!(window_count(160, 80), 2);
        assert_eq!(window_count(161, 80), 3);
        assert_eq!(window_blocks(2, 80, 200), 160..200);
        assert_eq!(window_blocks(3, 80, 200), 200..200);
        assert_eq!(block_range(2, 1200, 2500), 2400..2500);
    }

    proptest::proptest! {
        #[test]
        fn missing_matches_brute_force(
            flags in proptest::collection::vec(proptest::bool::ANY, 1..400),
            w in 1u32..64,
            k_seed in 0u32..1000,
        ) {
            let count = flags.len() as u32;
            let k = k_seed % window_count(count, w);
            let received: BitVec = flags.iter().copied().collect();
            proptest::prop_assert_eq!(
                compute_missing(&received, k, w, count),
                brute_missing(&flags, k, w, count)
            );
        }

        #[test]
        fn split_concatenates(data in proptest::collection::vec(proptest::num::u8::ANY, 0..5000), b in 1u32..1300) {
            let blocks: Vec<&[u8]> = split_into_blocks(&data, b).collect();
            proptest::prop_assert_eq!(blocks.len() as u64, (data.len() as u64).div_ceil(u64::from(b)));
            proptest::prop_assert_eq!(blocks.concat(), data.clone());
            if let Some((last, rest)) = blocks.split_last() {
                proptest::prop_assert!(rest.iter().all(|x| x.len() == b as usize));
                proptest::prop_assert!(!last.is_empty() && last.len() <= b as usize);
            }
        }
    }
}
