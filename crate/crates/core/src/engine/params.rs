use thiserror::Error;

use crate::wire::MAX_BLOCK_SIZE;

/// Size cap for one transfer; both ends hold the whole blob in memory.
pub const DEFAULT_MAX_TRANSFER_SIZE: u64 = 250 * 1024 * 1024;
pub const DEFAULT_BLOCK_SIZE: u32 = 1200;
pub const DEFAULT_WINDOW_SIZE: u32 = 80;
pub const DEFAULT_RETRANSMIT_INTERVAL_MS: u64 = 2000;
pub const DEFAULT_MAX_ATTEMPTS: u32 = 5;
pub const DEFAULT_MIN_WINDOW: u32 = 16;

/// Per-transfer tunables. The initiator announces block and window size in
/// its write request; interval and attempt budget are local to each side.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TransferParameters {
    /// Bytes per block, at most [`MAX_BLOCK_SIZE`].
    pub block_size: u32,
    /// Blocks sent per window without intermediate acknowledgement.
    pub window_size: u32,
    pub retransmit_interval_ms: u64,
    /// Consecutive silent intervals tolerated before the transfer times out.
    pub max_attempts: u32,
    pub max_transfer_size: u64,
    /// Floor for [`TransferParameters::downscale_window`].
    pub min_window: u32,
}

impl Default for TransferParameters {
    fn default() -> Self {
        Self {
            block_size: DEFAULT_BLOCK_SIZE,
            window_size: DEFAULT_WINDOW_SIZE,
            retransmit_interval_ms: DEFAULT_RETRANSMIT_INTERVAL_MS,
            max_attempts: DEFAULT_MAX_ATTEMPTS,
            max_transfer_size: DEFAULT_MAX_TRANSFER_SIZE,
            min_window: DEFAULT_MIN_WINDOW,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum ParamError {
    #[error("block size {0} outside [1, {MAX_BLOCK_SIZE}]")]
    BlockSize(u32),
    #[error("window size must be at least 1")]
    WindowSize,
    #[error("retransmit interval must be positive")]
    Interval,
    #[error("attempt budget must be at least 1")]
    Attempts,
    #[error("minimum window {min} must be in [1, window size {window}]")]
    MinWindow { min: u32, window: u32 },
}

impl TransferParameters {
    pub fn validate(&self) -> Result<(), ParamError> {
        if self.block_size == 0 || self.block_size > MAX_BLOCK_SIZE {
            return Err(ParamError::BlockSize(self.block_size));
        }
        if self.window_size == 0 {
            return Err(ParamError::WindowSize);
        }
        if self.retransmit_interval_ms == 0 {
            return Err(ParamError::Interval);
        }
        if self.max_attempts == 0 {
            return Err(ParamError::Attempts);
        }
        if self.min_window == 0 || self.min_window > self.window_size {
            return Err(ParamError::MinWindow {
                min: self.min_window,
                window: self.window_size,
            });
        }
        Ok(())
    }

    /// Halves the window, never going below `min_window`.
    pub fn downscale_window(&self) -> Self {
        Self {
            window_size: (self.window_size / 2).max(self.min_window),
            ..*self
        }
    }
}

/// Free-function form of [`TransferParameters::downscale_window`].
pub fn downscale_window(params: &TransferParameters) -> TransferParameters {
    params.downscale_window()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn with_window(window_size: u32) -> TransferParameters {
        TransferParameters {
            window_size,
            ..Default::default()
        }
    }

    #[test]
    fn downscale_examples() {
        assert_eq!(downscale_window(&with_window(80)).window_size, 40);
        assert_eq!(downscale_window(&with_window(20)).window_size, 16);
        assert_eq!(downscale_window(&with_window(16)).window_size, 16);
    }

    #[test]
    fn downscale_only_touches_window() {
        let p = with_window(128);
        let q = p.downscale_window();
        assert_eq!(TransferParameters { window_size: 128, ..q }, p);
    }

    #[test]
    fn downscale_sequence_from_128() {
        let mut p = with_window(128);
        let mut seq = vec![p.window_size];
        for _ in 0..5 {
            p = p.downscale_window();
            seq.push(p.window_size);
        }
        assert_eq!(seq, [128, 64, 32, 16, 16, 16]);
    }

    #[test]
    fn validation() {
        assert!(TransferParameters::default().validate().is_ok());
        let bad = TransferParameters {
            block_size: 1201,
            ..Default::default()
        };
        assert_eq!(bad.validate(), Err(ParamError::BlockSize(1201)));
        let bad = TransferParameters {
            window_size: 8,
            ..Default::default()
        };
        assert!(matches!(bad.validate(), Err(ParamError::MinWindow { .. })));
        let bad = TransferParameters {
            max_attempts: 0,
            ..Default::default()
        };
        assert_eq!(bad.validate(), Err(ParamError::Attempts));
    }
}
