//! The shared experiment clock.
//!
//! The orchestrator broadcasts one epoch timestamp at launch; every instance
//! measures offsets and timestamps in milliseconds relative to it, so
//! sub-second settlement rounds line up across processes.

use std::time::{Duration, SystemTime, UNIX_EPOCH};

use tokio::time::Instant;

use crate::model::Ms;

/// Maps between wall-clock unix time, epoch-relative milliseconds, and tokio
/// instants. Cheap to copy.
#[derive(Debug, Clone, Copy)]
pub struct EpochClock {
    epoch_unix_ms: i64,
    /// Instant corresponding to the epoch on this host's monotonic clock.
    epoch_instant: Instant,
}

pub fn unix_now_ms() -> i64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .expect("system clock before 1970")
        .as_millis() as i64
}

impl EpochClock {
    /// Clock for an epoch given as unix milliseconds (possibly in the future).
    pub fn from_unix_ms(epoch_unix_ms: i64) -> Self {
        let now_unix = unix_now_ms();
        let now_instant = Instant::now();
        let delta_ms = now_unix - epoch_unix_ms;
        let epoch_instant = if delta_ms >= 0 {
            now_instant
                .checked_sub(Duration::from_millis(delta_ms as u64))
                .unwrap_or(now_instant)
        } else {
            now_instant + Duration::from_millis((-delta_ms) as u64)
        };
        EpochClock {
            epoch_unix_ms,
            epoch_instant,
        }
    }

    /// Clock whose epoch is right now.
    pub fn starting_now() -> Self {
        Self::from_unix_ms(unix_now_ms())
    }

    pub fn epoch_unix_ms(&self) -> i64 {
        self.epoch_unix_ms
    }

    /// Milliseconds elapsed since the epoch (negative before it).
    pub fn now_ms(&self) -> Ms {
        let now = Instant::now();
        if now >= self.epoch_instant {
            (now - self.epoch_instant).as_millis() as Ms
        } else {
            -((self.epoch_instant - now).as_millis() as Ms)
        }
    }

    /// The instant at which `offset_ms` after the epoch occurs.
    pub fn instant_at(&self, offset_ms: Ms) -> Instant {
        if offset_ms >= 0 {
            self.epoch_instant + Duration::from_millis(offset_ms as u64)
        } else {
            self.epoch_instant
                .checked_sub(Duration::from_millis((-offset_ms) as u64))
                .unwrap_or(self.epoch_instant)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[tokio::test]
    async fn relative_time_tracks_epoch() {
        let clock = EpochClock::from_unix_ms(unix_now_ms() - 250);
        let rel = clock.now_ms();
        assert!((200..2000).contains(&rel), "rel = {rel}");

        let future = EpochClock::from_unix_ms(unix_now_ms() + 10_000);
        assert!(future.now_ms() < 0);
    }

    #[tokio::test]
    async fn instants_order_with_offsets() {
        let clock = EpochClock::starting_now();
        assert!(clock.instant_at(100) < clock.instant_at(200));
        tokio::time::sleep_until(clock.instant_at(20)).await;
        assert!(clock.now_ms() >= 20);
    }
}
