//! Frame replication and elimination for redundancy.
//!
//! Talkers stamp every frame of a stream with a 16-bit sequence number and
//! send one copy per member path. Listeners run a windowed sequence
//! recovery function that passes the first copy of each sequence number and
//! eliminates the rest.

use serde::Serialize;
use thiserror::Error;

use crate::model::{MacAddress, StreamId};

pub const DEFAULT_HISTORY_LENGTH: u16 = 16;
pub const DEFAULT_RESET_TIMEOUT_US: u64 = 100_000;
pub const MAX_HISTORY_LENGTH: u16 = 128;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FrerError {
    #[error("stream `{0}` has no member paths configured")]
    NoPathsConfigured(StreamId),
    #[error("frame of stream `{frame}` offered to recovery state of `{state}`")]
    StreamMismatch { state: StreamId, frame: StreamId },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TaggedFrame {
    pub stream: StreamId,
    pub seq: u16,
    pub member_path_index: u16,
    pub payload_bytes: u32,
    pub src_mac: MacAddress,
}

/// Talker-side sequence numbering for one stream.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SequenceGenerator {
    stream: StreamId,
    next_seq: u16,
}

impl SequenceGenerator {
    pub fn new(stream: StreamId) -> Self {
        Self::starting_at(stream, 0)
    }

    pub fn starting_at(stream: StreamId, seq: u16) -> Self {
        Self { stream, next_seq: seq }
    }

    pub fn stream(&self) -> &StreamId {
        &self.stream
    }

    pub fn next_seq(&self) -> u16 {
        self.next_seq
    }

    /// One frame per member path, all carrying the current sequence number;
    /// the generator then advances modulo 2^16.
    pub fn replicate(
        &mut self,
        payload_bytes: u32,
        src_mac: MacAddress,
        path_count: usize,
    ) -> Result<Vec<TaggedFrame>, FrerError> {
        if path_count == 0 {
            return Err(FrerError::NoPathsConfigured(self.stream.clone()));
        }
        let seq = self.next_seq;
        self.next_seq = seq.wrapping_add(1);
        Ok((0..path_count)
            .map(|i| TaggedFrame {
                stream: self.stream.clone(),
                seq,
                member_path_index: i as u16,
                payload_bytes,
                src_mac,
            })
            .collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RecoveryOutcome {
    Accept,
    DiscardDuplicate,
    DiscardStale,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct RecoveryCounters {
    pub passed: u64,
    pub duplicates: u64,
    pub stale: u64,
    pub resets: u64,
}

/// Signed distance from `base` to `seq` in half-range convention:
/// `[-2^15, 2^15)`, so exactly half a cycle away counts as behind.
pub fn seq_delta(seq: u16, base: u16) -> i32 {
    i32::from(seq.wrapping_sub(base) as i16)
}

/// Listener-side vector recovery state for one stream.
///
/// `history` bit `i` records whether `recov_seq - i` has been accepted;
/// bit 0 is `recov_seq` itself.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecoveryState {
    stream: StreamId,
    recov_seq: Option<u16>,
    history: u128,
    history_length: u16,
    reset_timeout_us: u64,
    last_accept_time_us: u64,
    counters: RecoveryCounters,
}

impl RecoveryState {
    pub fn new(stream: StreamId) -> Self {
        Self::with_params(stream, DEFAULT_HISTORY_LENGTH, DEFAULT_RESET_TIMEOUT_US)
    }

    /// `history_length` is clamped to `1..=128`.
    pub fn with_params(stream: StreamId, history_length: u16, reset_timeout_us: u64) -> Self {
        Self {
            stream,
            recov_seq: None,
            history: 0,
            history_length: history_length.clamp(1, MAX_HISTORY_LENGTH),
            reset_timeout_us,
            last_accept_time_us: 0,
            counters: RecoveryCounters::default(),
        }
    }

    pub fn stream(&self) -> &StreamId {
        &self.stream
    }

    pub fn recov_seq(&self) -> Option<u16> {
        self.recov_seq
    }

    pub fn history_length(&self) -> u16 {
        self.history_length
    }

    pub fn last_accept_time_us(&self) -> u64 {
        self.last_accept_time_us
    }

    pub fn counters(&self) -> RecoveryCounters {
        self.counters
    }

    fn window_mask(&self) -> u128 {
        if self.history_length >= 128 {
            u128::MAX
        } else {
            (1u128 << self.history_length) - 1
        }
    }

    pub fn recover(&mut self, frame: &TaggedFrame, now_us: u64) -> Result<RecoveryOutcome, FrerError> {
        if frame.stream != self.stream {
            return Err(FrerError::StreamMismatch { state: self.stream.clone(), frame: frame.stream.clone() });
        }
        let outcome = match self.recov_seq {
            None => {
                self.recov_seq = Some(frame.seq);
                self.history = 1;
                RecoveryOutcome::Accept
            }
            Some(recov) => {
                let delta = seq_delta(frame.seq, recov);
                if delta > 0 {
                    let shift = delta as u32;
                    self.history = if shift >= u32::from(self.history_length) { 0 } else { self.history << shift };
                    self.history = (self.history | 1) & self.window_mask();
                    self.recov_seq = Some(frame.seq);
                    RecoveryOutcome::Accept
                } else {
                    let back = delta.unsigned_abs();
                    if back >= u32::from(self.history_length) {
                        RecoveryOutcome::DiscardStale
                    } else if self.history & (1u128 << back) != 0 {
                        RecoveryOutcome::DiscardDuplicate
                    } else {
                        self.history |= 1u128 << back;
                        RecoveryOutcome::Accept
                    }
                }
            }
        };
        match outcome {
            RecoveryOutcome::Accept => {
                self.last_accept_time_us = now_us;
                self.counters.passed += 1;
            }
            RecoveryOutcome::DiscardDuplicate => self.counters.duplicates += 1,
            RecoveryOutcome::DiscardStale => self.counters.stale += 1,
        }
        Ok(outcome)
    }

    /// Forget the window after `reset_timeout_us` without an accepted frame,
    /// so the next frame is taken unconditionally. Returns true on reset.
    pub fn maybe_reset(&mut self, now_us: u64) -> bool {
        if self.recov_seq.is_some() && now_us.saturating_sub(self.last_accept_time_us) > self.reset_timeout_us {
            self.recov_seq = None;
            self.history = 0;
            self.counters.resets += 1;
            true
        } else {
            false
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::BTreeSet;

    fn frame(seq: u16, member: u16) -> TaggedFrame {
        TaggedFrame {
            stream: "video".into(),
            seq,
            member_path_index: member,
            payload_bytes: 1200,
            src_mac: MacAddress::local(1),
        }
    }

    #[test]
    fn replicate_one_frame_per_path() {
        let mut gen = SequenceGenerator::new("video".into());
        let frames = gen.replicate(100, MacAddress::local(1), 2).unwrap();
        assert_eq!(frames.iter().map(|f| (f.seq, f.member_path_index)).collect::<Vec<_>>(), [(0, 0), (0, 1)]);
        assert_eq!(gen.next_seq(), 1);
    }

    #[test]
    fn replicate_wraps() {
        let mut gen = SequenceGenerator::starting_at("video".into(), 65535);
        let frames = gen.replicate(100, MacAddress::local(1), 1).unwrap();
        assert_eq!(frames[0].seq, 65535);
        assert_eq!(gen.next_seq(), 0);
    }

    #[test]
    fn replicate_without_paths_fails() {
        let mut gen = SequenceGenerator::new("video".into());
        assert_eq!(gen.replicate(1, MacAddress::local(1), 0), Err(FrerError::NoPathsConfigured("video".into())));
        assert_eq!(gen.next_seq(), 0);
    }

    #[test]
    fn thousand_replications_over_two_paths() {
        let mut gen = SequenceGenerator::new("video".into());
        let frames: Vec<_> =
            (0..1000).flat_map(|_| gen.replicate(64, MacAddress::local(1), 2).unwrap()).collect();
        assert_eq!(frames.len(), 2000);
        assert_eq!(frames.iter().map(|f| f.seq).collect::<BTreeSet<_>>().len(), 1000);
    }

    #[test]
    fn first_frame_accepted_then_duplicate_eliminated() {
        let mut st = RecoveryState::new("video".into());
        assert_eq!(st.recover(&frame(5, 0), 0), Ok(RecoveryOutcome::Accept));
        assert_eq!(st.recov_seq(), Some(5));
        assert_eq!(st.recover(&frame(5, 1), 1), Ok(RecoveryOutcome::DiscardDuplicate));
    }

    #[test]
    fn late_copy_inside_window_is_accepted_once() {
        let mut st = RecoveryState::new("video".into());
        st.recover(&frame(10, 0), 0).unwrap();
        assert_eq!(st.recover(&frame(12, 0), 0), Ok(RecoveryOutcome::Accept));
        assert_eq!(st.recover(&frame(11, 1), 0), Ok(RecoveryOutcome::Accept));
        assert_eq!(st.recover(&frame(11, 0), 0), Ok(RecoveryOutcome::DiscardDuplicate));
        assert_eq!(st.recov_seq(), Some(12));
    }

    #[test]
    fn frames_behind_window_are_stale() {
        let mut st = RecoveryState::new("video".into());
        st.recover(&frame(100, 0), 0).unwrap();
        assert_eq!(st.recover(&frame(84, 0), 0), Ok(RecoveryOutcome::DiscardStale));
        assert_eq!(st.recover(&frame(85, 0), 0), Ok(RecoveryOutcome::Accept));
        // exactly half a cycle away is behind
        assert_eq!(st.recover(&frame(100u16.wrapping_add(32768), 0), 0), Ok(RecoveryOutcome::DiscardStale));
    }

    #[test]
    fn wraparound_is_forward() {
        let mut st = RecoveryState::new("video".into());
        st.recover(&frame(65534, 0), 0).unwrap();
        assert_eq!(st.recover(&frame(1, 0), 0), Ok(RecoveryOutcome::Accept));
        assert_eq!(st.recover(&frame(65535, 1), 0), Ok(RecoveryOutcome::Accept));
        assert_eq!(st.recover(&frame(0, 1), 0), Ok(RecoveryOutcome::Accept));
        assert_eq!(st.recover(&frame(65534, 1), 0), Ok(RecoveryOutcome::DiscardDuplicate));
    }

    #[test]
    fn stream_mismatch_is_an_error() {
        let mut st = RecoveryState::new("other".into());
        assert!(matches!(st.recover(&frame(1, 0), 0), Err(FrerError::StreamMismatch { .. })));
    }

    #[test]
    fn reset_after_timeout_only() {
        let mut st = RecoveryState::new("video".into());
        st.recover(&frame(37, 0), 1_000).unwrap();
        assert!(!st.maybe_reset(51_000));
        assert_eq!(st.recov_seq(), Some(37));
        assert!(st.maybe_reset(151_000));
        assert_eq!(st.recov_seq(), None);
        // a restarted talker begins again at zero
        assert_eq!(st.recover(&frame(0, 0), 151_000), Ok(RecoveryOutcome::Accept));
    }

    #[test]
    fn without_reset_restart_is_stale() {
        let mut st = RecoveryState::new("video".into());
        st.recover(&frame(37, 0), 0).unwrap();
        assert_eq!(st.recover(&frame(0, 0), 10), Ok(RecoveryOutcome::DiscardStale));
    }

    /// Brute-force reference: the first copy of each unwrapped sequence
    /// number is the one that must be accepted.
    fn first_copy_oracle(arrivals: &[(u64, u16)]) -> Vec<usize> {
        let mut seen = BTreeSet::new();
        arrivals.iter().enumerate().filter(|(_, (id, _))| seen.insert(*id)).map(|(i, _)| i).collect()
    }

    fn arrivals_strategy() -> impl Strategy<Value = (u16, Vec<(u64, u16)>)> {
        (any::<u16>(), proptest::collection::vec((0u8..8, 0u8..8, any::<bool>(), any::<bool>()), 1..400)).prop_map(
            |(start, per_seq)| {
                let mut keyed = Vec::new();
                for (i, (j0, j1, lose0, lose1)) in per_seq.into_iter().enumerate() {
                    let i = i as u64;
                    if !lose0 {
                        keyed.push((i * 2 + u64::from(j0), 0u8, i));
                    }
                    if !lose1 {
                        keyed.push((i * 2 + 6 + u64::from(j1), 1u8, i));
                    }
                }
                keyed.sort();
                let arrivals = keyed.into_iter().map(|(_, _, i)| (i, start.wrapping_add(i as u16))).collect();
                (start, arrivals)
            },
        )
    }

    proptest! {
        #[test]
        fn accepted_frames_match_first_copy_oracle((_start, arrivals) in arrivals_strategy()) {
            let mut st = RecoveryState::new("video".into());
            let accepted: Vec<usize> = arrivals
                .iter()
                .enumerate()
                .filter(|(_, (_, seq))| st.recover(&frame(*seq, 0), 0).unwrap() == RecoveryOutcome::Accept)
                .map(|(i, _)| i)
                .collect();
            prop_assert_eq!(accepted, first_copy_oracle(&arrivals));
        }

        #[test]
        fn each_seq_accepted_at_most_once(seqs in proptest::collection::vec(0u16..40, 0..200)) {
            let mut st = RecoveryState::new("video".into());
            let mut accepted = BTreeSet::new();
            for s in seqs {
                if st.recover(&frame(s, 0), 0).unwrap() == RecoveryOutcome::Accept {
                    prop_assert!(accepted.insert(s));
                }
            }
        }

        #[test]
        fn single_path_failure_is_seamless(n in 1usize..500, fail_at in 0usize..500, failed in 0u16..2) {
            let mut st = RecoveryState::new("video".into());
            let mut gen = SequenceGenerator::new("video".into());
            let mut accepted = Vec::new();
            for i in 0..n {
                for f in gen.replicate(1, MacAddress::local(1), 2).unwrap() {
                    if i >= fail_at && f.member_path_index == failed {
                        continue;
                    }
                    if st.recover(&f, i as u64).unwrap() == RecoveryOutcome::Accept {
                        accepted.push(f.seq);
                    }
                }
            }
            prop_assert_eq!(accepted, (0..n as u16).collect::<Vec<_>>());
        }
    }
}
