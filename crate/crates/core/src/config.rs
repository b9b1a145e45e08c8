//! TOML configuration: topology, services and streams, and scenario
//! scripts.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::frer::{DEFAULT_HISTORY_LENGTH, DEFAULT_RESET_TIMEOUT_US};
use crate::model::{
    validate_topology, BridgeId, DomainSplit, LinkSpec, MacAddress, Resources, ServiceSpec, StreamId, StreamSpec,
    Topology, VNodeId, VNodeSpec,
};
use crate::monitor::{DEFAULT_JUMP_THRESHOLD, DEFAULT_SILENCE_CHECK_US, DEFAULT_SILENCE_PERIODS};
use crate::supervisor::DEFAULT_MISS_THRESHOLD;
use crate::vnode::{DEFAULT_CONTAINER_START_DELAY_US, DEFAULT_HEARTBEAT_PERIOD_US};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{}:{line}:{column}: {message}", path.display())]
    Parse { path: PathBuf, line: usize, column: usize, message: String },
    #[error("{}: invalid configuration:\n  {}", path.display(), problems.join("\n  "))]
    Invalid { path: PathBuf, problems: Vec<String> },
}

impl ConfigError {
    fn invalid(path: &Path, problems: Vec<String>) -> Self {
        ConfigError::Invalid { path: path.to_owned(), problems }
    }
}

fn parse_toml<T: for<'de> Deserialize<'de>>(text: &str, path: &Path) -> Result<T, ConfigError> {
    toml::from_str(text).map_err(|e| {
        let offset = e.span().map_or(0, |s| s.start);
        let before = &text[..offset.min(text.len())];
        let line = before.matches('\n').count() + 1;
        let column = before.rsplit('\n').next().map_or(0, |l| l.chars().count()) + 1;
        ConfigError::Parse { path: path.to_owned(), line, column, message: e.message().to_owned() }
    })
}

fn read(path: &Path) -> Result<String, ConfigError> {
    std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_owned(), source })
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TopologyFile {
    bridges: Vec<BridgeId>,
    supervisor_attachment: BridgeId,
    #[serde(default)]
    vnodes: Vec<VNodeEntry>,
    #[serde(default)]
    links: Vec<LinkEntry>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct VNodeEntry {
    id: VNodeId,
    capacity: Resources,
    attached_bridge: BridgeId,
    mac: Option<MacAddress>,
    domain_split: Option<DomainSplit>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct LinkEntry {
    a: String,
    b: String,
    latency_us: u64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ServicesFile {
    #[serde(default)]
    services: Vec<ServiceSpec>,
    #[serde(default)]
    streams: Vec<StreamSpec>,
}

/// Validated topology plus the services and streams to run on it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SystemConfig {
    pub topology: Topology,
    pub services: Vec<ServiceSpec>,
    pub streams: Vec<StreamSpec>,
}

pub fn parse_topology(text: &str, path: &Path) -> Result<Topology, ConfigError> {
    let file: TopologyFile = parse_toml(text, path)?;
    let topology = Topology {
        bridges: file.bridges,
        vnodes: file
            .vnodes
            .into_iter()
            .enumerate()
            .map(|(i, v)| VNodeSpec {
                id: v.id,
                capacity: v.capacity,
                attached_bridge: v.attached_bridge,
                mac: v.mac.unwrap_or_else(|| MacAddress::local(i as u32 + 1)),
                domain_split: v.domain_split.unwrap_or_default(),
            })
            .collect(),
        links: file.links.into_iter().map(|l| LinkSpec::new(&l.a, &l.b, l.latency_us)).collect(),
        supervisor_attachment: file.supervisor_attachment,
    };
    let violations = validate_topology(&topology);
    if !violations.is_empty() {
        return Err(ConfigError::invalid(path, violations.iter().map(ToString::to_string).collect()));
    }
    Ok(topology)
}

pub fn parse_services(text: &str, path: &Path, topology: &Topology) -> Result<(Vec<ServiceSpec>, Vec<StreamSpec>), ConfigError> {
    let file: ServicesFile = parse_toml(text, path)?;
    let mut problems = Vec::new();
    let mut ids = BTreeSet::new();
    for s in &file.services {
        if !ids.insert(s.id.clone()) {
            problems.push(format!("duplicate service `{}`", s.id));
        }
        if let Some(node) = &s.standby_on {
            if topology.vnode(node).is_none() {
                problems.push(format!("service `{}` has standby on unknown vnode `{node}`", s.id));
            }
        }
    }
    let mut stream_ids = BTreeSet::new();
    for st in &file.streams {
        if !stream_ids.insert(st.id.clone()) {
            problems.push(format!("duplicate stream `{}`", st.id));
        }
        for end in [&st.source, &st.sink] {
            if !ids.contains(end) {
                problems.push(format!("stream `{}` references unknown service `{end}`", st.id));
            }
        }
        if st.source == st.sink {
            problems.push(format!("stream `{}` has the same source and sink", st.id));
        }
        if st.period_us == 0 {
            problems.push(format!("stream `{}` has a zero period", st.id));
        }
        if st.payload_bytes == 0 {
            problems.push(format!("stream `{}` has an empty payload", st.id));
        }
    }
    if !problems.is_empty() {
        return Err(ConfigError::invalid(path, problems));
    }
    Ok((file.services, file.streams))
}

pub fn load_config(topology_path: &Path, services_path: &Path) -> Result<SystemConfig, ConfigError> {
    let topology = parse_topology(&read(topology_path)?, topology_path)?;
    let (services, streams) = parse_services(&read(services_path)?, services_path, &topology)?;
    Ok(SystemConfig { topology, services, streams })
}

/// Tunables of a run. Every field has a default.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Settings {
    pub heartbeat_period_us: u64,
    pub miss_threshold: u64,
    pub container_start_delay_us: u64,
    pub history_length: u16,
    pub reset_timeout_us: u64,
    pub jump_threshold: u16,
    pub silence_periods: u64,
    pub silence_check_us: u64,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            heartbeat_period_us: DEFAULT_HEARTBEAT_PERIOD_US,
            miss_threshold: DEFAULT_MISS_THRESHOLD,
            container_start_delay_us: DEFAULT_CONTAINER_START_DELAY_US,
            history_length: DEFAULT_HISTORY_LENGTH,
            reset_timeout_us: DEFAULT_RESET_TIMEOUT_US,
            jump_threshold: DEFAULT_JUMP_THRESHOLD,
            silence_periods: DEFAULT_SILENCE_PERIODS,
            silence_check_us: DEFAULT_SILENCE_CHECK_US,
        }
    }
}

/// One scripted action.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Directive {
    FailLink(String, String),
    RestoreLink(String, String),
    FailNode(VNodeId),
    RestoreNode(VNodeId),
    AttackReplay { stream: StreamId, seq: u16, port: String },
    StopStream(StreamId),
    End,
}

impl fmt::Display for Directive {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Directive::FailLink(a, b) => write!(f, "fail_link {a} {b}"),
            Directive::RestoreLink(a, b) => write!(f, "restore_link {a} {b}"),
            Directive::FailNode(n) => write!(f, "fail_node {n}"),
            Directive::RestoreNode(n) => write!(f, "restore_node {n}"),
            Directive::AttackReplay { stream, seq, port } => write!(f, "attack_replay {stream} {seq} {port}"),
            Directive::StopStream(s) => write!(f, "stop_stream {s}"),
            Directive::End => f.write_str("end"),
        }
    }
}

impl FromStr for Directive {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let words: Vec<&str> = s.split_whitespace().collect();
        let usage = |form: &str| format!("expected `{form}`, got `{s}`");
        Ok(match words.as_slice() {
            ["fail_link", a, b] => Directive::FailLink((*a).into(), (*b).into()),
            ["restore_link", a, b] => Directive::RestoreLink((*a).into(), (*b).into()),
            ["fail_node", n] => Directive::FailNode((*n).into()),
            ["restore_node", n] => Directive::RestoreNode((*n).into()),
            ["attack_replay", stream, seq, port] => Directive::AttackReplay {
                stream: (*stream).into(),
                seq: seq.parse().map_err(|_| format!("sequence number `{seq}` is not in 0..=65535"))?,
                port: (*port).into(),
            },
            ["stop_stream", stream] => Directive::StopStream((*stream).into()),
            ["end"] => Directive::End,
            ["fail_link" | "restore_link", ..] => return Err(usage(&format!("{} <a> <b>", words[0]))),
            ["fail_node" | "restore_node", ..] => return Err(usage(&format!("{} <vnode>", words[0]))),
            ["attack_replay", ..] => return Err(usage("attack_replay <stream> <seq> <port>")),
            ["stop_stream", ..] => return Err(usage("stop_stream <stream>")),
            _ => return Err(format!("unknown directive `{s}`")),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScriptEvent {
    pub at_us: u64,
    pub directive: Directive,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Scenario {
    pub seed: u64,
    pub settings: Settings,
    pub tap_bridge: Option<BridgeId>,
    /// Sorted by time; contains no `end`.
    pub events: Vec<ScriptEvent>,
    pub end_us: u64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioFile {
    #[serde(default)]
    seed: u64,
    #[serde(default)]
    settings: Settings,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    monitor: Option<MonitorSection>,
    #[serde(default)]
    events: Vec<EventEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MonitorSection {
    tap_bridge: BridgeId,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EventEntry {
    at_us: u64,
    directive: String,
}

impl Scenario {
    /// A script that only places services.
    pub fn empty(seed: u64) -> Self {
        Self { seed, settings: Settings::default(), tap_bridge: None, events: Vec::new(), end_us: 0 }
    }

    /// Serializes back into the scenario file format, `end` included.
    pub fn to_toml(&self) -> String {
        let mut events: Vec<EventEntry> =
            self.events.iter().map(|e| EventEntry { at_us: e.at_us, directive: e.directive.to_string() }).collect();
        events.push(EventEntry { at_us: self.end_us, directive: Directive::End.to_string() });
        let file = ScenarioFile {
            seed: self.seed,
            settings: self.settings,
            monitor: self.tap_bridge.clone().map(|tap_bridge| MonitorSection { tap_bridge }),
            events,
        };
        toml::to_string(&file).expect("scenario serializes")
    }

    /// Checks that a directive names declared entities.
    pub fn check_directive(directive: &Directive, system: &SystemConfig, tap: Option<&BridgeId>) -> Result<(), String> {
        let t = &system.topology;
        match directive {
            Directive::FailLink(a, b) | Directive::RestoreLink(a, b) => {
                t.find_link(a, b).map(|_| ()).ok_or_else(|| format!("no link between `{a}` and `{b}`"))
            }
            Directive::FailNode(n) | Directive::RestoreNode(n) => {
                t.vnode(n).map(|_| ()).ok_or_else(|| format!("unknown vnode `{n}`"))
            }
            Directive::AttackReplay { .. } => {
                // The attacker may forge any stream id; it only needs a
                // bridge to connect to.
                tap.map(|_| ()).ok_or_else(|| "attack_replay needs [monitor] tap_bridge".to_owned())
            }
            Directive::StopStream(s) => system
                .streams
                .iter()
                .any(|x| &x.id == s)
                .then_some(())
                .ok_or_else(|| format!("unknown stream `{s}`")),
            Directive::End => Ok(()),
        }
    }
}

pub fn parse_scenario(text: &str, path: &Path, system: &SystemConfig) -> Result<Scenario, ConfigError> {
    let file: ScenarioFile = parse_toml(text, path)?;
    let mut problems = Vec::new();
    if let Some(m) = &file.monitor {
        if !system.topology.has_bridge(&m.tap_bridge) {
            problems.push(format!("monitor tap on unknown bridge `{}`", m.tap_bridge));
        }
    }
    if file.settings.heartbeat_period_us == 0 || file.settings.miss_threshold == 0 || file.settings.silence_check_us == 0 {
        problems.push("heartbeat_period_us, miss_threshold and silence_check_us must be positive".into());
    }
    let tap = file.monitor.as_ref().map(|m| &m.tap_bridge);
    let mut events = Vec::new();
    let mut end_us = None;
    let mut last = 0;
    for (i, e) in file.events.iter().enumerate() {
        if e.at_us < last {
            problems.push(format!("event {} at {} µs is earlier than the one before it", i + 1, e.at_us));
        }
        last = last.max(e.at_us);
        let directive = match e.directive.parse::<Directive>() {
            Ok(d) => d,
            Err(msg) => {
                problems.push(format!("event {}: {msg}", i + 1));
                continue;
            }
        };
        if let Err(msg) = Scenario::check_directive(&directive, system, tap) {
            problems.push(format!("event {}: {msg}", i + 1));
        }
        if end_us.is_some() {
            problems.push(format!("event {} comes after `end`", i + 1));
        }
        match directive {
            Directive::End => end_us = Some(e.at_us),
            directive => events.push(ScriptEvent { at_us: e.at_us, directive }),
        }
    }
    if !problems.is_empty() {
        return Err(ConfigError::invalid(path, problems));
    }
    let end_us = end_us.unwrap_or(last);
    Ok(Scenario { seed: file.seed, settings: file.settings, tap_bridge: file.monitor.map(|m| m.tap_bridge), events, end_us })
}

pub fn load_scenario(path: &Path, system: &SystemConfig) -> Result<Scenario, ConfigError> {
    parse_scenario(&read(path)?, path, system)
}

#[cfg(test)]
mod tests {
    use super::*;

    const TOPOLOGY: &str = r#"
bridges = ["TSN1", "TSN2", "TSN3"]
supervisor_attachment = "TSN2"

[[vnodes]]
id = "VNode1"
capacity = { cpu_millicores = 4000, memory_mib = 4096 }
attached_bridge = "TSN1"

[[vnodes]]
id = "VNode3"
capacity = { cpu_millicores = 4000, memory_mib = 4096 }
attached_bridge = "TSN3"
domain_split = "shared"

[[links]]
a = "TSN1"
b = "TSN2"
latency_us = 10

[[links]]
a = "TSN2"
b = "TSN3"
latency_us = 10

[[links]]
a = "TSN1"
b = "TSN3"
latency_us = 10

[[links]]
a = "VNode1"
b = "TSN1"
latency_us = 10

[[links]]
a = "VNode3"
b = "TSN3"
latency_us = 10

[[links]]
a = "supervisor"
b = "TSN2"
latency_us = 10
"#;

    const SERVICES: &str = r#"
[[services]]
id = "video-send"
criticality = "critical"
demand = { cpu_millicores = 1000, memory_mib = 1024 }

[[services]]
id = "video-recv"
criticality = "critical"
demand = { cpu_millicores = 1000, memory_mib = 1024 }

[[streams]]
id = "video"
source = "video-send"
sink = "video-recv"
period_us = 10000
payload_bytes = 1200
redundant = true
"#;

    fn system() -> SystemConfig {
        let p = Path::new("t.toml");
        let topology = parse_topology(TOPOLOGY, p).unwrap();
        let (services, streams) = parse_services(SERVICES, p, &topology).unwrap();
        SystemConfig { topology, services, streams }
    }

    #[test]
    fn parses_topology_and_services() {
        let s = system();
        assert_eq!(s.topology.bridges.len(), 3);
        assert_eq!(s.topology.vnodes[1].domain_split, DomainSplit::Shared);
        assert_eq!(s.topology.vnodes[0].mac, MacAddress::local(1));
        assert_eq!(s.streams[0].period_us, 10_000);
    }

    #[test]
    fn missing_field_is_named_with_position() {
        let text = TOPOLOGY.replacen("capacity = { cpu_millicores = 4000, memory_mib = 4096 }\n", "", 1);
        match parse_topology(&text, Path::new("t.toml")) {
            Err(ConfigError::Parse { message, line, .. }) => {
                assert!(message.contains("capacity"), "{message}");
                assert!(line > 1);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn syntax_error_has_line_and_column() {
        let err = parse_topology("bridges = [\"TSN1\"\nsupervisor_attachment = 3", Path::new("x.toml")).unwrap_err();
        assert!(matches!(err, ConfigError::Parse { line: 2, .. }), "{err}");
    }

    #[test]
    fn disconnected_topology_is_rejected() {
        let text = TOPOLOGY.replace("a = \"TSN1\"\nb = \"TSN3\"", "a = \"TSN1\"\nb = \"TSN2\"");
        let text = text.replace("a = \"TSN2\"\nb = \"TSN3\"", "a = \"VNode1\"\nb = \"TSN2\"");
        assert!(matches!(parse_topology(&text, Path::new("t.toml")), Err(ConfigError::Invalid { .. })));
    }

    #[test]
    fn scenario_round_trip() {
        let s = system();
        let text = r#"
seed = 9
[monitor]
tap_bridge = "TSN2"
[[events]]
at_us = 5000000
directive = "fail_link TSN2 TSN3"
[[events]]
at_us = 6000000
directive = "attack_replay video 42 attacker"
[[events]]
at_us = 20000000
directive = "end"
"#;
        let sc = parse_scenario(text, Path::new("s.toml"), &s).unwrap();
        assert_eq!(sc.end_us, 20_000_000);
        assert_eq!(sc.events.len(), 2);
        assert_eq!(parse_scenario(&sc.to_toml(), Path::new("s.toml"), &s).unwrap(), sc);
    }

    #[test]
    fn empty_script_ends_at_zero() {
        let sc = parse_scenario("", Path::new("s.toml"), &system()).unwrap();
        assert_eq!((sc.end_us, sc.events.len()), (0, 0));
    }

    #[test]
    fn bad_scripts_are_rejected() {
        let s = system();
        for text in [
            "[[events]]\nat_us = 5\ndirective = \"fail_node VNode9\"",
            "[[events]]\nat_us = 5\ndirective = \"fail_link TSN1 VNode3\"",
            "[[events]]\nat_us = 5\ndirective = \"explode\"",
            "[[events]]\nat_us = 5\ndirective = \"attack_replay video 1 attacker\"",
            "[[events]]\nat_us = 5\ndirective = \"end\"\n[[events]]\nat_us = 6\ndirective = \"fail_node VNode1\"",
            "[[events]]\nat_us = 5\ndirective = \"fail_node VNode1\"\n[[events]]\nat_us = 4\ndirective = \"end\"",
        ] {
            assert!(matches!(parse_scenario(text, Path::new("s.toml"), &s), Err(ConfigError::Invalid { .. })), "{text}");
        }
    }
}
