//! Passive FRER traffic monitor attached to one bridge.
//!
//! The monitor sees a copy of each tagged frame its bridge handles, keeps
//! per-stream statistics, and raises alerts. It never alters traffic.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use serde::Serialize;

use crate::frer::{seq_delta, TaggedFrame, DEFAULT_HISTORY_LENGTH, DEFAULT_RESET_TIMEOUT_US};
use crate::model::{BridgeId, MacAddress, StreamId};

pub const DEFAULT_JUMP_THRESHOLD: u16 = 64;
pub const DEFAULT_SILENCE_PERIODS: u64 = 5;
pub const DEFAULT_SILENCE_CHECK_US: u64 = 100_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum AlertKind {
    ReplayAttack,
    SequenceJump,
    UnknownStream,
    PathSilence,
    SourceMacChange,
}

impl fmt::Display for AlertKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Severity {
    Alert,
    Info,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Alert {
    pub time_us: u64,
    pub kind: AlertKind,
    pub severity: Severity,
    pub stream: StreamId,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seq: Option<u16>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ingress_port: Option<String>,
    /// Number of frames the monitor had observed when the alert was raised.
    pub observed: u64,
    pub evidence: String,
}

impl fmt::Display for Alert {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:>10} µs {} stream={}", self.time_us, self.kind, self.stream)?;
        if let Some(seq) = self.seq {
            write!(f, " seq={seq}")?;
        }
        if let Some(port) = &self.ingress_port {
            write!(f, " port={port}")?;
        }
        write!(f, " ({})", self.evidence)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MonitorConfig {
    pub jump_threshold: u16,
    pub history_length: u16,
    pub reset_timeout_us: u64,
    pub silence_periods: u64,
}

impl Default for MonitorConfig {
    fn default() -> Self {
        Self {
            jump_threshold: DEFAULT_JUMP_THRESHOLD,
            history_length: DEFAULT_HISTORY_LENGTH,
            reset_timeout_us: DEFAULT_RESET_TIMEOUT_US,
            silence_periods: DEFAULT_SILENCE_PERIODS,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct PathStats {
    pub ingress_port: String,
    pub frames: u64,
    pub last_seen_us: Option<u64>,
    #[serde(skip)]
    silent: bool,
}

/// What the monitor has learned about one stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct StreamObservation {
    pub stream: StreamId,
    pub period_us: u64,
    /// Member paths that cross the tapped bridge, by member index.
    pub paths: BTreeMap<u16, PathStats>,
    pub frames: u64,
    pub last_seen_us: Option<u64>,
    pub last_src_mac: Option<MacAddress>,
    recov_seq: Option<u16>,
    /// `seen[i]` counts the copies of `recov_seq - i` observed.
    #[serde(skip)]
    seen: VecDeque<u8>,
}

impl StreamObservation {
    fn new(stream: StreamId, period_us: u64) -> Self {
        Self {
            stream,
            period_us,
            paths: BTreeMap::new(),
            frames: 0,
            last_seen_us: None,
            last_src_mac: None,
            recov_seq: None,
            seen: VecDeque::new(),
        }
    }

    fn expected_copies(&self) -> u8 {
        self.paths.len().clamp(1, u8::MAX as usize) as u8
    }
}

enum WindowVerdict {
    Fresh,
    Repeat { copies: u8 },
    Stale,
    Jump { delta: i32 },
}

#[derive(Debug, Clone)]
pub struct Monitor {
    bridge: BridgeId,
    config: MonitorConfig,
    streams: BTreeMap<StreamId, StreamObservation>,
    observed: u64,
    alerts: Vec<Alert>,
}

impl Monitor {
    pub fn new(bridge: BridgeId, config: MonitorConfig) -> Self {
        Self { bridge, config, streams: BTreeMap::new(), observed: 0, alerts: Vec::new() }
    }

    pub fn bridge(&self) -> &BridgeId {
        &self.bridge
    }

    pub fn observed(&self) -> u64 {
        self.observed
    }

    pub fn alerts(&self) -> &[Alert] {
        &self.alerts
    }

    pub fn stream(&self, id: &str) -> Option<&StreamObservation> {
        self.streams.get(id)
    }

    /// Declares a stream as expected traffic.
    pub fn configure_stream(&mut self, stream: StreamId, period_us: u64) {
        self.streams.entry(stream.clone()).or_insert_with(|| StreamObservation::new(stream, period_us));
    }

    /// Replaces the member paths of a stream that cross this bridge, each
    /// with the port it is expected to enter on. Statistics of paths that
    /// keep their ingress port carry over.
    pub fn set_paths(&mut self, stream: &str, paths: BTreeMap<u16, String>) {
        let Some(obs) = self.streams.get_mut(stream) else {
            return;
        };
        let old = std::mem::take(&mut obs.paths);
        obs.paths = paths
            .into_iter()
            .map(|(member, port)| {
                let stats = match old.get(&member) {
                    Some(s) if s.ingress_port == port => s.clone(),
                    _ => PathStats { ingress_port: port, ..PathStats::default() },
                };
                (member, stats)
            })
            .collect();
    }

    /// Stops monitoring a stream; later frames of it count as unknown.
    pub fn deconfigure_stream(&mut self, stream: &str) {
        self.streams.remove(stream);
    }

    pub fn observe(&mut self, frame: &TaggedFrame, ingress_port: &str, now_us: u64) -> Vec<Alert> {
        self.observed += 1;
        let observed = self.observed;
        let cfg = self.config;
        let mut raised = Vec::new();
        let alert = |kind, severity, evidence: String| Alert {
            time_us: now_us,
            kind,
            severity,
            stream: frame.stream.clone(),
            seq: Some(frame.seq),
            ingress_port: Some(ingress_port.to_owned()),
            observed,
            evidence,
        };

        let Some(obs) = self.streams.get_mut(&frame.stream) else {
            raised.push(alert(AlertKind::UnknownStream, Severity::Alert, format!("stream not configured at {}", self.bridge)));
            self.alerts.extend(raised.iter().cloned());
            return raised;
        };

        if !obs.paths.values().any(|p| p.ingress_port == ingress_port) {
            let expected: BTreeSet<&str> = obs.paths.values().map(|p| p.ingress_port.as_str()).collect();
            raised.push(alert(
                AlertKind::ReplayAttack,
                Severity::Alert,
                format!("frame entered on unconfigured port; expected one of {expected:?}"),
            ));
            self.alerts.extend(raised.iter().cloned());
            return raised;
        }

        if let Some(prev) = obs.last_src_mac {
            if prev != frame.src_mac {
                raised.push(alert(
                    AlertKind::SourceMacChange,
                    Severity::Info,
                    format!("source MAC changed from {prev} to {}", frame.src_mac),
                ));
            }
        }

        let gap = obs.last_seen_us.map(|t| now_us.saturating_sub(t));
        if gap.is_some_and(|g| g > cfg.reset_timeout_us) {
            obs.recov_seq = None;
            obs.seen.clear();
        }
        match Self::window(obs, frame.seq, cfg) {
            WindowVerdict::Jump { delta } => {
                raised.push(alert(
                    AlertKind::SequenceJump,
                    Severity::Alert,
                    format!("seq {} is {delta} from expected {}", frame.seq, obs.recov_seq.unwrap_or(0)),
                ));
                self.alerts.extend(raised.iter().cloned());
                return raised;
            }
            WindowVerdict::Repeat { copies } if copies > obs.expected_copies() => {
                raised.push(alert(
                    AlertKind::ReplayAttack,
                    Severity::Alert,
                    format!("seq seen {copies} times over {} member path(s)", obs.expected_copies()),
                ));
            }
            WindowVerdict::Fresh | WindowVerdict::Repeat { .. } | WindowVerdict::Stale => {}
        }

        obs.frames += 1;
        obs.last_seen_us = Some(now_us);
        obs.last_src_mac = Some(frame.src_mac);
        if let Some(path) = obs.paths.get_mut(&frame.member_path_index).filter(|p| p.ingress_port == ingress_port) {
            path.frames += 1;
            path.last_seen_us = Some(now_us);
            path.silent = false;
        }
        self.alerts.extend(raised.iter().cloned());
        raised
    }

    /// Seen-count window with the same geometry as the listener's recovery
    /// state. Jumps leave the window untouched.
    fn window(obs: &mut StreamObservation, seq: u16, cfg: MonitorConfig) -> WindowVerdict {
        let len = usize::from(cfg.history_length.max(1));
        let Some(base) = obs.recov_seq else {
            obs.recov_seq = Some(seq);
            obs.seen = VecDeque::from(vec![0; len]);
            obs.seen[0] = 1;
            return WindowVerdict::Fresh;
        };
        let delta = seq_delta(seq, base);
        if delta.unsigned_abs() > u32::from(cfg.jump_threshold) {
            return WindowVerdict::Jump { delta };
        }
        if delta > 0 {
            for _ in 0..delta.min(len as i32) {
                obs.seen.push_front(0);
                obs.seen.pop_back();
            }
            obs.seen[0] = 1;
            obs.recov_seq = Some(seq);
            return WindowVerdict::Fresh;
        }
        let back = delta.unsigned_abs() as usize;
        if back >= len {
            return WindowVerdict::Stale;
        }
        obs.seen[back] = obs.seen[back].saturating_add(1);
        match obs.seen[back] {
            1 => WindowVerdict::Fresh,
            copies => WindowVerdict::Repeat { copies },
        }
    }

    /// Paths of configured streams that have gone quiet for longer than the
    /// silence threshold. Each silence episode is reported once; paths never
    /// seen are not reported.
    pub fn check_silence(&mut self, now_us: u64) -> Vec<Alert> {
        let mut raised = Vec::new();
        for obs in self.streams.values_mut() {
            let threshold = self.config.silence_periods * obs.period_us;
            for (member, path) in obs.paths.iter_mut() {
                let Some(last) = path.last_seen_us else {
                    continue;
                };
                let quiet = now_us.saturating_sub(last);
                if quiet > threshold && !path.silent {
                    path.silent = true;
                    raised.push(Alert {
                        time_us: now_us,
                        kind: AlertKind::PathSilence,
                        severity: Severity::Alert,
                        stream: obs.stream.clone(),
                        seq: None,
                        ingress_port: Some(path.ingress_port.clone()),
                        observed: self.observed,
                        evidence: format!("member path {member} silent for {quiet} µs (last frame at {last} µs)"),
                    });
                }
            }
        }
        self.alerts.extend(raised.iter().cloned());
        raised
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame(stream: &str, seq: u16, mac: u32) -> TaggedFrame {
        TaggedFrame { stream: stream.into(), seq, member_path_index: 1, payload_bytes: 1200, src_mac: MacAddress::local(mac) }
    }

    fn monitor() -> Monitor {
        let mut m = Monitor::new("TSN2".into(), MonitorConfig::default());
        m.configure_stream("7".into(), 10_000);
        m.set_paths("7", [(1, "TSN1".to_owned())].into());
        m
    }

    fn kinds(alerts: &[Alert]) -> Vec<AlertKind> {
        alerts.iter().map(|a| a.kind).collect()
    }

    #[test]
    fn clean_stream_raises_nothing() {
        let mut m = monitor();
        for i in 0..20_000u32 {
            let t = u64::from(i) * 10_000;
            assert!(m.observe(&frame("7", i as u16, 1), "TSN1", t).is_empty());
            assert!(m.check_silence(t).is_empty());
        }
    }

    #[test]
    fn replay_from_attacker_port() {
        let mut m = monitor();
        for seq in 0..50 {
            m.observe(&frame("7", seq, 1), "TSN1", u64::from(seq) * 10_000);
        }
        let alerts = m.observe(&frame("7", 42, 1), "attacker", 500_000);
        assert_eq!(kinds(&alerts), [AlertKind::ReplayAttack]);
    }

    #[test]
    fn replay_on_configured_port_is_counted() {
        let mut m = monitor();
        for seq in 0..50 {
            m.observe(&frame("7", seq, 1), "TSN1", u64::from(seq) * 10_000);
        }
        assert_eq!(kinds(&m.observe(&frame("7", 45, 1), "TSN1", 500_000)), [AlertKind::ReplayAttack]);
        assert_eq!(kinds(&m.observe(&frame("7", 2, 1), "TSN1", 500_001)), []);
    }

    #[test]
    fn unknown_stream() {
        let mut m = monitor();
        assert_eq!(kinds(&m.observe(&frame("99", 0, 1), "TSN1", 0)), [AlertKind::UnknownStream]);
    }

    #[test]
    fn mac_change_is_informational() {
        let mut m = monitor();
        m.observe(&frame("7", 0, 1), "TSN1", 0);
        let alerts = m.observe(&frame("7", 1, 2), "TSN1", 10_000);
        assert_eq!(kinds(&alerts), [AlertKind::SourceMacChange]);
        assert_eq!(alerts[0].severity, Severity::Info);
    }

    #[test]
    fn jump_without_gap_but_not_after_gap() {
        let mut m = monitor();
        m.observe(&frame("7", 100, 1), "TSN1", 0);
        assert_eq!(kinds(&m.observe(&frame("7", 300, 1), "TSN1", 10_000)), [AlertKind::SequenceJump]);
        assert_eq!(kinds(&m.observe(&frame("7", 101, 1), "TSN1", 20_000)), []);
        // A restarted talker after a quiet spell starts over without alert.
        assert_eq!(kinds(&m.observe(&frame("7", 0, 1), "TSN1", 500_000)), []);
    }

    #[test]
    fn silence_reported_once_and_only_after_threshold() {
        let mut m = monitor();
        m.observe(&frame("7", 0, 1), "TSN1", 5_000_000);
        assert!(m.check_silence(5_050_000).is_empty());
        let alerts = m.check_silence(5_100_000);
        assert_eq!(kinds(&alerts), [AlertKind::PathSilence]);
        assert!(m.check_silence(5_200_000).is_empty());
    }

    #[test]
    fn deconfigured_stream_is_not_monitored() {
        let mut m = monitor();
        m.observe(&frame("7", 0, 1), "TSN1", 0);
        m.deconfigure_stream("7");
        assert!(m.check_silence(10_000_000).is_empty());
    }

    #[test]
    fn observation_is_a_function_of_input() {
        let frames: Vec<(TaggedFrame, &str, u64)> = (0..500u16)
            .map(|i| {
                let port = if i % 97 == 0 { "attacker" } else { "TSN1" };
                (frame(if i % 131 == 0 { "x" } else { "7" }, i.wrapping_mul(7) % 300, 1), port, u64::from(i) * 1000)
            })
            .collect();
        let run = || {
            let mut m = monitor();
            for (f, p, t) in &frames {
                m.observe(f, p, *t);
                m.check_silence(*t);
            }
            m.alerts().to_vec()
        };
        assert_eq!(run(), run());
    }
}
