//! The assembled simulation: nodes, bridges, supervisor and monitor driven
//! by one event queue.

use std::collections::{BTreeMap, VecDeque};
use std::fmt::{self, Write as _};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;

use crate::config::{Directive, Scenario, ScriptEvent, SystemConfig};
use crate::frer::{RecoveryOutcome, RecoveryState, TaggedFrame};
use crate::metrics::{payload, Category, Metrics};
use crate::model::{
    free_resources, EndpointKind, LinkId, LinkPath, MacAddress, ServiceId, StreamId, StreamSpec, VNodeId,
    SUPERVISOR,
};
use crate::monitor::{Alert, AlertKind, Monitor, MonitorConfig};
use crate::netsim::{Event, EventHandle, EventKind, EventPayload, Fault, Network, Simulator, TraceRecord, Transmit};
use crate::placement::PlacementError;
use crate::supervisor::{Action, Supervisor, SupervisorConfig};
use crate::vnode::{Ack, Command, Heartbeat, ReadyTimer, VNode, VNodeError};

/// Messages between the supervisor and the nodes.
#[derive(Debug, Clone)]
pub enum ControlMsg {
    Command { id: u64, command: Command },
    Reply { id: u64, result: Result<Ack, VNodeError> },
    Heartbeat(Heartbeat),
    ServiceRunning { service: ServiceId, running_at_us: u64 },
    Unreachable { id: u64 },
}

impl ControlMsg {
    fn label(&self) -> String {
        match self {
            ControlMsg::Command { id, command } => format!("cmd#{id} {command}"),
            ControlMsg::Reply { id, result: Ok(_) } => format!("ack#{id}"),
            ControlMsg::Reply { id, result: Err(_) } => format!("err#{id}"),
            ControlMsg::Heartbeat(hb) => format!("heartbeat#{}", hb.seqno),
            ControlMsg::ServiceRunning { service, .. } => format!("running {service}"),
            ControlMsg::Unreachable { id } => format!("unreachable#{id}"),
        }
    }
}

#[derive(Debug, Clone)]
pub enum Timer {
    ContainerReady { node: VNodeId, epoch: u64, ready: ReadyTimer },
    Deadline { node: VNodeId },
    MonitorCheck,
    SupervisorTick,
    ForgetStream { stream: StreamId },
}

#[derive(Debug, Clone)]
pub enum Payload {
    /// A data frame arriving at `at` over `link`.
    Frame { link: LinkId, at: String, from: String, frame: TaggedFrame, sent_at_us: u64 },
    StreamTick { stream: StreamId, generation: u64 },
    HeartbeatDue { node: VNodeId, epoch: u64 },
    Control { from: String, to: String, sent_at_us: u64, msg: ControlMsg },
    Fault(Fault),
    Attack { stream: StreamId, seq: u16, port: String },
    StopStream { stream: StreamId },
    Timer(Timer),
}

impl EventPayload for Payload {
    fn kind(&self) -> EventKind {
        match self {
            Payload::Frame { .. } => EventKind::FrameArrival,
            Payload::HeartbeatDue { .. } => EventKind::HeartbeatDue,
            Payload::Control { .. } => EventKind::CommandDelivery,
            Payload::Fault(Fault::LinkFail(_)) => EventKind::LinkFail,
            Payload::Fault(Fault::LinkRestore(_)) => EventKind::LinkRestore,
            Payload::Fault(Fault::NodeFail(_)) => EventKind::NodeFail,
            Payload::Fault(Fault::NodeRestore(_)) => EventKind::NodeRestore,
            Payload::Attack { .. } => EventKind::AttackInject,
            Payload::StreamTick { .. } | Payload::StopStream { .. } | Payload::Timer(_) => EventKind::TimerExpiry,
        }
    }

    fn subject(&self) -> String {
        match self {
            Payload::Frame { link, at, from, frame, .. } => {
                format!("{from}->{at} {link} {}#{}/{}", frame.stream, frame.seq, frame.member_path_index)
            }
            Payload::StreamTick { stream, .. } => format!("tick {stream}"),
            Payload::HeartbeatDue { node, .. } => format!("heartbeat {node}"),
            Payload::Control { from, to, msg, .. } => format!("{from}->{to} {}", msg.label()),
            Payload::Fault(f) => match f {
                Fault::LinkFail(l) => format!("fail {l}"),
                Fault::LinkRestore(l) => format!("restore {l}"),
                Fault::NodeFail(n) => format!("fail {n}"),
                Fault::NodeRestore(n) => format!("restore {n}"),
            },
            Payload::Attack { stream, seq, port } => format!("replay {stream}#{seq} on {port}"),
            Payload::StopStream { stream } => format!("stop {stream}"),
            Payload::Timer(t) => match t {
                Timer::ContainerReady { node, ready, .. } => format!("ready {} on {node}", ready.service),
                Timer::Deadline { node } => format!("deadline {node}"),
                Timer::MonitorCheck => "monitor check".to_owned(),
                Timer::SupervisorTick => "supervisor tick".to_owned(),
                Timer::ForgetStream { stream } => format!("forget {stream}"),
            },
        }
    }
}

/// One frame handed to a listener service.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Delivery {
    pub time_us: u64,
    pub stream: StreamId,
    pub seq: u16,
    pub member: u16,
    pub node: VNodeId,
    pub outcome: RecoveryOutcome,
    pub position: Option<u64>,
}

/// One injected replay and what the monitor made of it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct AttackRecord {
    pub time_us: u64,
    pub stream: StreamId,
    pub seq: u16,
    pub port: String,
    /// Frames the monitor had observed before the injected one.
    pub observed_before: u64,
    pub alerts: Vec<AlertKind>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RunStatus {
    Completed,
    InvariantViolation,
    Infeasible(PlacementError),
}

impl RunStatus {
    pub fn exit_code(&self) -> i32 {
        match self {
            RunStatus::Completed => 0,
            RunStatus::InvariantViolation => 1,
            RunStatus::Infeasible(_) => 3,
        }
    }
}

impl fmt::Display for RunStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RunStatus::Completed => f.write_str("completed"),
            RunStatus::InvariantViolation => f.write_str("invariant violation"),
            RunStatus::Infeasible(e) => write!(f, "infeasible placement: {e}"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub metrics: Metrics,
    pub trace: Vec<TraceRecord>,
    pub violations: Vec<String>,
    pub alerts: Vec<Alert>,
    pub deliveries: Vec<Delivery>,
    pub attacks: Vec<AttackRecord>,
    pub status: RunStatus,
    pub end_us: u64,
    /// The script as it actually ran, interactive injections included.
    pub realized: Scenario,
}

impl RunReport {
    pub fn metrics_jsonl(&self) -> String {
        let mut out = Vec::new();
        self.metrics.write_jsonl(&mut out).expect("writing to memory");
        String::from_utf8(out).expect("json is utf-8")
    }

    pub fn trace_jsonl(&self) -> String {
        let mut out = Vec::new();
        crate::netsim::write_trace(&self.trace, &mut out).expect("writing to memory");
        String::from_utf8(out).expect("json is utf-8")
    }
}

struct Route {
    src: VNodeId,
    dst: VNodeId,
    /// Full member paths, access links included.
    members: Vec<LinkPath>,
}

struct StreamRuntime {
    spec: StreamSpec,
    route: Option<Route>,
    generation: u64,
    stopped: bool,
}

pub struct World {
    system: SystemConfig,
    scenario: Scenario,
    sim: Simulator<Payload>,
    net: Network,
    nodes: BTreeMap<VNodeId, VNode>,
    supervisor: Supervisor,
    monitor: Option<Monitor>,
    metrics: Metrics,
    streams: BTreeMap<StreamId, StreamRuntime>,
    fdb: BTreeMap<(String, StreamId, u16), LinkId>,
    eliminators: BTreeMap<(String, StreamId), RecoveryState>,
    fifo: BTreeMap<(String, String), u64>,
    deadlines: BTreeMap<VNodeId, EventHandle>,
    in_flight: BTreeMap<LinkId, u64>,
    pending: VecDeque<ScriptEvent>,
    realized: Vec<ScriptEvent>,
    violations: Vec<String>,
    deliveries: Vec<Delivery>,
    attacks: Vec<AttackRecord>,
    last_seqno: BTreeMap<VNodeId, u64>,
    last_event_us: u64,
    infeasible: Option<PlacementError>,
}

impl World {
    /// Builds the world, computes the initial placement and schedules the
    /// periodic activity. Script events are released as time advances.
    pub fn new(system: SystemConfig, scenario: Scenario) -> Self {
        let s = scenario.settings;
        let supervisor = Supervisor::new(
            SupervisorConfig {
                heartbeat_period_us: s.heartbeat_period_us,
                miss_threshold: s.miss_threshold,
                container_start_delay_us: s.container_start_delay_us,
            },
            system.topology.clone(),
            system.services.clone(),
            system.streams.clone(),
        );
        let monitor = scenario.tap_bridge.clone().map(|bridge| {
            let mut m = Monitor::new(
                bridge,
                MonitorConfig {
                    jump_threshold: s.jump_threshold,
                    history_length: s.history_length,
                    reset_timeout_us: s.reset_timeout_us,
                    silence_periods: s.silence_periods,
                },
            );
            for st in &system.streams {
                m.configure_stream(st.id.clone(), st.period_us);
            }
            m
        });
        let nodes = system
            .topology
            .vnodes
            .iter()
            .map(|v| (v.id.clone(), VNode::with_recovery_params(v.clone(), s.history_length, s.reset_timeout_us)))
            .collect();
        let streams = system
            .streams
            .iter()
            .map(|st| (st.id.clone(), StreamRuntime { spec: st.clone(), route: None, generation: 0, stopped: false }))
            .collect();
        let mut world = Self {
            net: Network::new(&system.topology),
            pending: scenario.events.iter().cloned().collect(),
            system,
            scenario,
            sim: Simulator::new(),
            nodes,
            supervisor,
            monitor,
            metrics: Metrics::new(),
            streams,
            fdb: BTreeMap::new(),
            eliminators: BTreeMap::new(),
            fifo: BTreeMap::new(),
            deadlines: BTreeMap::new(),
            in_flight: BTreeMap::new(),
            realized: Vec::new(),
            violations: Vec::new(),
            deliveries: Vec::new(),
            attacks: Vec::new(),
            last_seqno: BTreeMap::new(),
            last_event_us: 0,
            infeasible: None,
        };
        world.start();
        world
    }

    fn start(&mut self) {
        let s = self.scenario.settings;
        let mut rng = ChaCha8Rng::seed_from_u64(self.scenario.seed);
        let ids: Vec<VNodeId> = self.nodes.keys().cloned().collect();
        for node in ids {
            let phase = rng.random_range(0..s.heartbeat_period_us);
            self.schedule(phase, Payload::HeartbeatDue { node, epoch: 0 });
        }
        self.schedule(s.heartbeat_period_us, Payload::Timer(Timer::SupervisorTick));
        if self.monitor.is_some() {
            self.schedule(s.silence_check_us, Payload::Timer(Timer::MonitorCheck));
        }
        match self.supervisor.bootstrap(0) {
            Ok(actions) => self.perform(actions),
            Err(e) => {
                self.metrics.push(0, Category::Placement, payload(json!({"event": "infeasible", "error": e.to_string()})));
                self.infeasible = Some(e);
            }
        }
    }

    pub fn now(&self) -> u64 {
        self.sim.now()
    }

    pub fn end_us(&self) -> u64 {
        self.scenario.end_us
    }

    pub fn is_infeasible(&self) -> bool {
        self.infeasible.is_some()
    }

    pub fn supervisor(&self) -> &Supervisor {
        &self.supervisor
    }

    pub fn node(&self, id: &str) -> Option<&VNode> {
        self.nodes.get(id)
    }

    pub fn monitor(&self) -> Option<&Monitor> {
        self.monitor.as_ref()
    }

    pub fn metrics(&self) -> &Metrics {
        &self.metrics
    }

    pub fn deliveries(&self) -> &[Delivery] {
        &self.deliveries
    }

    pub fn violations(&self) -> &[String] {
        &self.violations
    }

    fn schedule(&mut self, at_us: u64, p: Payload) -> EventHandle {
        self.sim.schedule(at_us, p).expect("scheduling in the future")
    }

    /// Advances virtual time to `t_us`, releasing script events on the way.
    /// A directive at time T runs after every other event at T.
    pub fn run_until(&mut self, t_us: u64) {
        if self.infeasible.is_some() {
            return;
        }
        while self.pending.front().is_some_and(|e| e.at_us <= t_us) {
            let ev = self.pending.pop_front().expect("peeked");
            let at = ev.at_us.max(self.sim.now());
            self.process_until(at);
            self.release(ScriptEvent { at_us: at, directive: ev.directive });
        }
        self.process_until(t_us);
    }

    /// Runs a directive now, as an operator would.
    pub fn inject(&mut self, directive: Directive) -> Result<(), String> {
        Scenario::check_directive(&directive, &self.system, self.scenario.tap_bridge.as_ref())?;
        if directive == Directive::End {
            return Err("`end` cannot be injected".into());
        }
        let now = self.sim.now();
        self.run_until(now);
        self.release(ScriptEvent { at_us: now, directive });
        Ok(())
    }

    fn release(&mut self, ev: ScriptEvent) {
        let at = ev.at_us;
        let t = &self.system.topology;
        let p = match &ev.directive {
            Directive::FailLink(a, b) => Payload::Fault(Fault::LinkFail(t.find_link(a, b).expect("checked link"))),
            Directive::RestoreLink(a, b) => Payload::Fault(Fault::LinkRestore(t.find_link(a, b).expect("checked link"))),
            Directive::FailNode(n) => Payload::Fault(Fault::NodeFail(n.clone())),
            Directive::RestoreNode(n) => Payload::Fault(Fault::NodeRestore(n.clone())),
            Directive::AttackReplay { stream, seq, port } => {
                Payload::Attack { stream: stream.clone(), seq: *seq, port: port.clone() }
            }
            Directive::StopStream(s) => Payload::StopStream { stream: s.clone() },
            Directive::End => return,
        };
        self.realized.push(ev);
        self.schedule(at, p);
        self.process_until(at);
    }

    fn process_until(&mut self, t_us: u64) {
        while let Some(ev) = self.sim.next_event(t_us) {
            self.handle(ev);
        }
        self.sim.advance_to(t_us);
    }

    fn handle(&mut self, ev: Event<Payload>) {
        let now = ev.time_us;
        if now < self.last_event_us {
            self.violations.push(format!("clock went back from {} to {now} µs", self.last_event_us));
        }
        self.last_event_us = now;
        match ev.payload {
            Payload::Frame { link, at, from, frame, sent_at_us } => {
                if sent_at_us > now {
                    self.violations.push(format!("frame on {link} arrived at {now} µs before it was sent"));
                }
                self.frame_arrival(link, &at, &from, frame, now)
            }
            Payload::StreamTick { stream, generation } => self.stream_tick(&stream, generation, now),
            Payload::HeartbeatDue { node, epoch } => self.heartbeat_due(&node, epoch, now),
            Payload::Control { from, to, sent_at_us, msg } => {
                if sent_at_us > now {
                    self.violations.push(format!("control message {from}->{to} delivered before it was sent"));
                }
                self.control_delivery(&from, &to, msg, now)
            }
            Payload::Fault(f) => self.fault(f, now),
            Payload::Attack { stream, seq, port } => self.attack(stream, seq, port, now),
            Payload::StopStream { stream } => self.stop_stream(&stream, now),
            Payload::Timer(t) => self.timer(t, now),
        }
    }

    fn perform(&mut self, actions: Vec<Action>) {
        let now = self.sim.now();
        for a in actions {
            match a {
                Action::Send { to, id, command } => {
                    self.send_control(SUPERVISOR, to.as_str(), ControlMsg::Command { id, command }, now)
                }
                Action::InstallRoute { stream, src, dst, paths } => self.install_route(&stream, src, dst, &paths, now),
                Action::ScheduleDeadline { node, at_us } => {
                    if let Some(h) = self.deadlines.remove(&node) {
                        self.sim.cancel(h);
                    }
                    let h = self.schedule(at_us, Payload::Timer(Timer::Deadline { node: node.clone() }));
                    self.deadlines.insert(node, h);
                }
                Action::Metric { category, payload } => self.metrics.push(now, category, payload),
            }
        }
    }

    fn send_control(&mut self, from: &str, to: &str, msg: ControlMsg, now: u64) {
        match self.net.route(from, to) {
            Some((latency, _)) => {
                let slot = self.fifo.entry((from.to_owned(), to.to_owned())).or_insert(0);
                let at = (*slot).max(now + latency);
                *slot = at;
                self.schedule(at, Payload::Control { from: from.to_owned(), to: to.to_owned(), sent_at_us: now, msg });
            }
            None => {
                if let ControlMsg::Command { id, .. } = msg {
                    self.schedule(
                        now,
                        Payload::Control {
                            from: to.to_owned(),
                            to: SUPERVISOR.to_owned(),
                            sent_at_us: now,
                            msg: ControlMsg::Unreachable { id },
                        },
                    );
                } else {
                    self.metrics.push(
                        now,
                        Category::Drop,
                        payload(json!({"reason": "control_unroutable", "from": from, "to": to, "message": msg.label()})),
                    );
                }
            }
        }
    }

    fn control_delivery(&mut self, from: &str, to: &str, msg: ControlMsg, now: u64) {
        if to == SUPERVISOR {
            let actions = match msg {
                ControlMsg::Heartbeat(hb) => match self.supervisor.on_heartbeat(&hb, now) {
                    Ok(a) => a,
                    Err(e) => {
                        self.violations.push(e.to_string());
                        Vec::new()
                    }
                },
                ControlMsg::Reply { id, result } => self.supervisor.on_reply(id, &result, now),
                ControlMsg::Unreachable { id } => self.supervisor.on_unreachable(id, now),
                ControlMsg::ServiceRunning { service, running_at_us } => {
                    self.supervisor.on_service_running(&VNodeId::new(from), &service, running_at_us, now)
                }
                ControlMsg::Command { .. } => Vec::new(),
            };
            self.perform(actions);
            return;
        }
        let Some(node) = self.nodes.get_mut(to) else {
            return;
        };
        if !node.is_alive() {
            self.metrics.push(
                now,
                Category::Drop,
                payload(json!({"reason": "node_down", "from": from, "to": to, "message": msg.label()})),
            );
            return;
        }
        let ControlMsg::Command { id, command } = msg else {
            return;
        };
        let result = node.handle_command(&command, now);
        let epoch = node.epoch();
        if let Ok(Ack { ready_timer: Some(ready), .. }) = &result {
            let node = VNodeId::new(to);
            self.schedule(ready.at_us, Payload::Timer(Timer::ContainerReady { node, epoch, ready: ready.clone() }));
        }
        self.check_node(to);
        self.send_control(to, SUPERVISOR, ControlMsg::Reply { id, result }, now);
    }

    fn check_node(&mut self, id: &str) {
        if let Some(node) = self.nodes.get(id) {
            let found = node.check_invariants();
            self.violations.extend(found);
        }
    }

    fn heartbeat_due(&mut self, id: &VNodeId, epoch: u64, now: u64) {
        let period = self.scenario.settings.heartbeat_period_us;
        let Some(node) = self.nodes.get_mut(id) else {
            return;
        };
        if node.epoch() != epoch {
            return;
        }
        let Some(hb) = node.emit_heartbeat(now) else {
            return;
        };
        let reserving: Vec<_> = node
            .domains()
            .values()
            .flat_map(|d| d.containers.values())
            .filter(|c| c.status.reserves())
            .map(|c| c.spec.clone())
            .collect();
        match free_resources(&node.spec().capacity, &reserving) {
            Ok(free) if free == hb.free => {}
            Ok(free) => self.violations.push(format!("{id} reports free {} but hosts {}", hb.free, free)),
            Err(e) => self.violations.push(format!("{id}: {e}")),
        }
        if self.last_seqno.get(id).is_some_and(|&last| hb.seqno <= last) {
            self.violations.push(format!("{id} heartbeat seqno {} did not increase", hb.seqno));
        }
        self.last_seqno.insert(id.clone(), hb.seqno);
        self.schedule(now + period, Payload::HeartbeatDue { node: id.clone(), epoch });
        self.send_control(id.as_str(), SUPERVISOR, ControlMsg::Heartbeat(hb), now);
    }

    fn timer(&mut self, t: Timer, now: u64) {
        match t {
            Timer::ContainerReady { node, epoch, ready } => {
                let Some(n) = self.nodes.get_mut(&node) else {
                    return;
                };
                if n.epoch() == epoch && n.container_ready(&ready, now) {
                    let msg = ControlMsg::ServiceRunning { service: ready.service, running_at_us: now };
                    self.send_control(node.as_str(), SUPERVISOR, msg, now);
                }
            }
            Timer::Deadline { node } => {
                self.deadlines.remove(&node);
                let actions = self.supervisor.on_deadline(now);
                self.perform(actions);
            }
            Timer::SupervisorTick => {
                let actions = self.supervisor.on_tick(now);
                self.perform(actions);
                let found = self.supervisor.check_invariants();
                self.violations.extend(found);
                let period = self.scenario.settings.heartbeat_period_us;
                self.schedule(now + period, Payload::Timer(Timer::SupervisorTick));
            }
            Timer::MonitorCheck => {
                if let Some(m) = self.monitor.as_mut() {
                    let raised = m.check_silence(now);
                    self.record_alerts(&raised, now);
                }
                let every = self.scenario.settings.silence_check_us;
                self.schedule(now + every, Payload::Timer(Timer::MonitorCheck));
            }
            Timer::ForgetStream { stream } => {
                if let Some(m) = self.monitor.as_mut() {
                    m.deconfigure_stream(&stream);
                }
            }
        }
    }

    fn record_alerts(&mut self, alerts: &[Alert], now: u64) {
        for a in alerts {
            let mut record = payload(a);
            record.remove("time_us");
            self.metrics.push(now, Category::Alert, record);
        }
    }

    fn fault(&mut self, f: Fault, now: u64) {
        let t = &self.system.topology;
        let label = match &f {
            Fault::LinkFail(l) => format!("fail_link {}", t.link_label(*l)),
            Fault::LinkRestore(l) => format!("restore_link {}", t.link_label(*l)),
            Fault::NodeFail(n) => format!("fail_node {n}"),
            Fault::NodeRestore(n) => format!("restore_node {n}"),
        };
        let changed = match self.net.apply_fault(&f) {
            Ok(c) => c,
            Err(e) => {
                self.violations.push(e.to_string());
                return;
            }
        };
        self.metrics.push(now, Category::Failover, payload(json!({"event": "fault", "fault": label, "changed": changed})));
        match f {
            Fault::NodeFail(n) => {
                if let Some(node) = self.nodes.get_mut(&n) {
                    node.fail();
                }
            }
            Fault::NodeRestore(n) => {
                if let Some(node) = self.nodes.get_mut(&n) {
                    if !node.is_alive() {
                        node.restore();
                        let epoch = node.epoch();
                        self.schedule(now, Payload::HeartbeatDue { node: n.clone(), epoch });
                    }
                }
            }
            Fault::LinkFail(_) | Fault::LinkRestore(_) => {}
        }
    }

    fn install_route(&mut self, stream: &StreamId, src: VNodeId, dst: VNodeId, paths: &[LinkPath], now: u64) {
        let t = &self.system.topology;
        let (Some(up), Some(down)) = (t.access_link(src.as_str()), t.access_link(dst.as_str())) else {
            self.violations.push(format!("no access link for {src} or {dst}"));
            return;
        };
        let members: Vec<LinkPath> = paths
            .iter()
            .map(|p| std::iter::once(up).chain(p.iter().copied()).chain(std::iter::once(down)).collect())
            .collect();
        self.fdb.retain(|(_, s, _), _| s != stream);
        self.eliminators.retain(|(_, s), _| s != stream);
        let mut ports = BTreeMap::new();
        let tap = self.monitor.as_ref().map(|m| m.bridge().to_string());
        for (i, member) in members.iter().enumerate() {
            let mut at = src.to_string();
            for (j, link) in member.iter().enumerate() {
                let next = t.link(*link).and_then(|l| l.other_end(&at)).expect("route links connect").to_string();
                if t.endpoint_kind(&next) == Some(EndpointKind::Bridge) {
                    if let Some(egress) = member.get(j + 1) {
                        self.fdb.insert((next.clone(), stream.clone(), i as u16), *egress);
                    }
                    if tap.as_deref() == Some(next.as_str()) {
                        ports.insert(i as u16, at.clone());
                    }
                }
                at = next;
            }
        }
        if let Some(m) = self.monitor.as_mut() {
            m.set_paths(stream, ports);
        }
        let Some(rt) = self.streams.get_mut(stream) else {
            return;
        };
        rt.route = Some(Route { src, dst, members });
        rt.generation += 1;
        let generation = rt.generation;
        if !rt.stopped {
            self.schedule(now, Payload::StreamTick { stream: stream.clone(), generation });
        }
    }

    fn stream_tick(&mut self, stream: &StreamId, generation: u64, now: u64) {
        let Some(rt) = self.streams.get(stream) else {
            return;
        };
        if rt.generation != generation || rt.stopped {
            return;
        }
        let Some(route) = &rt.route else {
            return;
        };
        let (src, members, spec) = (route.src.clone(), route.members.clone(), rt.spec.clone());
        self.schedule(now + spec.period_us, Payload::StreamTick { stream: stream.clone(), generation });
        let Some(node) = self.nodes.get_mut(&src) else {
            return;
        };
        let frames = match node.talk(stream, &spec.source, spec.payload_bytes, members.len()) {
            Ok(Some(f)) => f,
            Ok(None) => return,
            Err(e) => {
                self.violations.push(e.to_string());
                return;
            }
        };
        if let Some(f) = frames.first() {
            self.metrics.push(
                now,
                Category::Frame,
                payload(json!({"event": "tx", "stream": stream, "seq": f.seq, "node": src, "copies": frames.len()})),
            );
        }
        for (frame, member) in frames.into_iter().zip(&members) {
            self.send_frame(member[0], src.as_str(), frame, now);
        }
    }

    fn send_frame(&mut self, link: LinkId, from: &str, frame: TaggedFrame, now: u64) {
        let t = &self.system.topology;
        let Some(to) = t.link(link).and_then(|l| l.other_end(from)).map(ToString::to_string) else {
            self.violations.push(format!("{from} is not an end of {link}"));
            return;
        };
        let p = Payload::Frame { link, at: to, from: from.to_owned(), frame: frame.clone(), sent_at_us: now };
        match self.net.transmit(&mut self.sim, link, p) {
            Ok(Transmit::Scheduled { .. }) => *self.in_flight.entry(link).or_insert(0) += 1,
            Ok(Transmit::Dropped) => self.drop_frame(&frame, link, "link_down", now),
            Err(e) => self.violations.push(e.to_string()),
        }
    }

    fn drop_frame(&mut self, frame: &TaggedFrame, link: LinkId, reason: &str, now: u64) {
        let label = self.system.topology.link_label(link);
        self.metrics.push(
            now,
            Category::Drop,
            payload(json!({
                "reason": reason,
                "link": label,
                "stream": frame.stream,
                "seq": frame.seq,
                "member": frame.member_path_index,
            })),
        );
    }

    fn frame_arrival(&mut self, link: LinkId, at: &str, from: &str, frame: TaggedFrame, now: u64) {
        if let Some(n) = self.in_flight.get_mut(&link) {
            *n = n.saturating_sub(1);
        }
        match self.net.deliver(link) {
            Ok(true) => {}
            Ok(false) => return self.drop_frame(&frame, link, "link_down_in_flight", now),
            Err(e) => return self.violations.push(e.to_string()),
        }
        match self.system.topology.endpoint_kind(at) {
            Some(EndpointKind::Bridge) => self.bridge_forward(at, from, link, frame, now),
            Some(EndpointKind::VNode) => self.listener_receive(at, link, frame, now),
            _ => self.drop_frame(&frame, link, "no_listener", now),
        }
    }

    fn bridge_forward(&mut self, bridge: &str, from: &str, link: LinkId, frame: TaggedFrame, now: u64) {
        let egress = self.fdb.get(&(bridge.to_owned(), frame.stream.clone(), frame.member_path_index)).copied();
        if self.monitor.as_ref().is_some_and(|m| m.bridge().as_str() == bridge) {
            // Egress mirror: the tap sees what the bridge actually sends on,
            // plus anything it has no entry for.
            if egress.is_none_or(|e| self.net.usable(e)) {
                let raised = self.monitor.as_mut().expect("checked").observe(&frame, from, now);
                self.record_alerts(&raised, now);
            }
        }
        let Some(egress) = egress else {
            return self.drop_frame(&frame, link, "no_forwarding_entry", now);
        };
        if let Some(spec) = self.streams.get(&frame.stream).map(|rt| &rt.spec) {
            let sink_bridge = self
                .streams
                .get(&frame.stream)
                .and_then(|rt| rt.route.as_ref())
                .and_then(|r| self.system.topology.vnode(r.dst.as_str()))
                .map(|v| v.attached_bridge.to_string());
            if spec.bridge_elimination && sink_bridge.as_deref() == Some(bridge) {
                let s = self.scenario.settings;
                let st = self
                    .eliminators
                    .entry((bridge.to_owned(), frame.stream.clone()))
                    .or_insert_with(|| RecoveryState::with_params(frame.stream.clone(), s.history_length, s.reset_timeout_us));
                st.maybe_reset(now);
                match st.recover(&frame, now) {
                    Ok(RecoveryOutcome::Accept) => {}
                    Ok(_) => return self.drop_frame(&frame, link, "eliminated", now),
                    Err(e) => return self.violations.push(e.to_string()),
                }
            }
        }
        self.send_frame(egress, bridge, frame, now);
    }

    fn listener_receive(&mut self, at: &str, link: LinkId, frame: TaggedFrame, now: u64) {
        let Some(sink) = self.streams.get(&frame.stream).map(|rt| rt.spec.sink.clone()) else {
            return self.drop_frame(&frame, link, "unknown_stream", now);
        };
        let Some(node) = self.nodes.get_mut(at) else {
            return;
        };
        match node.listen(&frame, &sink, now) {
            Ok(Some(r)) => {
                self.metrics.push(
                    now,
                    Category::Frame,
                    payload(json!({
                        "event": "rx",
                        "stream": frame.stream,
                        "seq": frame.seq,
                        "member": frame.member_path_index,
                        "node": at,
                        "outcome": r.outcome,
                        "position": r.position,
                    })),
                );
                self.deliveries.push(Delivery {
                    time_us: now,
                    stream: frame.stream,
                    seq: frame.seq,
                    member: frame.member_path_index,
                    node: VNodeId::new(at),
                    outcome: r.outcome,
                    position: r.position,
                });
            }
            Ok(None) => self.drop_frame(&frame, link, "listener_not_running", now),
            Err(e) => self.violations.push(e.to_string()),
        }
    }

    fn attack(&mut self, stream: StreamId, seq: u16, port: String, now: u64) {
        let Some(tap) = self.monitor.as_ref().map(|m| m.bridge().to_string()) else {
            return;
        };
        let rt = self.streams.get(&stream);
        let src_mac = rt
            .and_then(|rt| rt.route.as_ref())
            .and_then(|r| self.nodes.get(&r.src))
            .map_or(MacAddress::local(0xFFFF), |n| n.spec().mac);
        let member = self
            .monitor
            .as_ref()
            .and_then(|m| m.stream(&stream))
            .and_then(|o| o.paths.keys().next().copied())
            .unwrap_or(0);
        let payload_bytes = rt.map_or(64, |rt| rt.spec.payload_bytes);
        let frame = TaggedFrame { stream: stream.clone(), seq, member_path_index: member, payload_bytes, src_mac };
        let observed_before = self.monitor.as_ref().map_or(0, Monitor::observed);
        self.metrics.push(
            now,
            Category::Alert,
            payload(json!({"event": "attack_injected", "stream": stream, "seq": seq, "port": port, "bridge": tap})),
        );
        let egress = self.fdb.get(&(tap.clone(), stream.clone(), member)).copied();
        let raised = self.monitor.as_mut().expect("checked").observe(&frame, &port, now);
        self.record_alerts(&raised, now);
        self.attacks.push(AttackRecord {
            time_us: now,
            stream,
            seq,
            port,
            observed_before,
            alerts: raised.iter().map(|a| a.kind).collect(),
        });
        // The bridge forwards the injected frame like any other.
        if let Some(egress) = egress {
            self.send_frame(egress, &tap, frame, now);
        }
    }

    fn stop_stream(&mut self, stream: &StreamId, now: u64) {
        self.supervisor.stop_stream(stream);
        let Some(rt) = self.streams.get_mut(stream) else {
            return;
        };
        rt.stopped = true;
        let period = rt.spec.period_us;
        self.metrics.push(now, Category::Failover, payload(json!({"event": "stream_stopped", "stream": stream})));
        if self.monitor.is_some() {
            self.schedule(now + period, Payload::Timer(Timer::ForgetStream { stream: stream.clone() }));
        }
    }

    /// Final consistency checks, then the report.
    pub fn finish(mut self) -> RunReport {
        let end_us = self.sim.now();
        for i in 0..self.net.link_count() {
            let link = LinkId(i);
            let c = self.net.counters(link).expect("link exists");
            let flying = self.in_flight.get(&link).copied().unwrap_or(0);
            if c.sent != c.delivered + c.dropped + flying {
                self.violations.push(format!(
                    "{}: sent {} != delivered {} + dropped {} + in flight {flying}",
                    self.system.topology.link_label(link),
                    c.sent,
                    c.delivered,
                    c.dropped
                ));
            }
        }
        for id in self.nodes.keys().cloned().collect::<Vec<_>>() {
            self.check_node(id.as_str());
        }
        if !self.metrics.is_time_ordered() {
            self.violations.push("metrics are not time-ordered".into());
        }
        let status = match (&self.infeasible, self.violations.is_empty()) {
            (Some(e), _) => RunStatus::Infeasible(e.clone()),
            (None, true) => RunStatus::Completed,
            (None, false) => RunStatus::InvariantViolation,
        };
        let realized = Scenario { events: self.realized, end_us, ..self.scenario };
        RunReport {
            trace: self.sim.trace().to_vec(),
            alerts: self.monitor.map(|m| m.alerts().to_vec()).unwrap_or_default(),
            metrics: self.metrics,
            violations: self.violations,
            deliveries: self.deliveries,
            attacks: self.attacks,
            status,
            end_us,
            realized,
        }
    }

    /// Operator view of the running system.
    pub fn render_status(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "t = {} µs", self.sim.now());
        out.push_str(&self.supervisor.view().render());
        out.push_str("links down:");
        let t = &self.system.topology;
        let down: Vec<String> = (0..self.net.link_count())
            .map(LinkId)
            .filter(|l| !self.net.usable(*l))
            .map(|l| t.link_label(l))
            .collect();
        let _ = writeln!(out, " {}", if down.is_empty() { "none".to_owned() } else { down.join(", ") });
        out.push_str("streams:\n");
        for (id, rt) in &self.streams {
            let state = match (&rt.route, rt.stopped) {
                (_, true) => "stopped".to_owned(),
                (None, false) => "not routed".to_owned(),
                (Some(r), false) => {
                    let paths: Vec<String> = r.members.iter().map(|m| t.path_label(r.src.as_str(), m)).collect();
                    format!("{} -> {} via {}", r.src, r.dst, paths.join(" | "))
                }
            };
            let _ = writeln!(out, "  {id:<10} {state}");
        }
        if let Some(m) = &self.monitor {
            let _ = writeln!(out, "monitor at {}: {} frames observed, {} alerts", m.bridge(), m.observed(), m.alerts().len());
        }
        out
    }

    pub fn render_alerts(&self) -> String {
        match &self.monitor {
            None => "no monitor configured\n".to_owned(),
            Some(m) if m.alerts().is_empty() => "no alerts\n".to_owned(),
            Some(m) => m.alerts().iter().map(|a| format!("{a}\n")).collect(),
        }
    }

    /// Handles one operator command line.
    pub fn dispatch(&mut self, line: &str) -> Reply {
        let words: Vec<&str> = line.split_whitespace().collect();
        let directive = match words.as_slice() {
            [] => return Reply::Text(String::new()),
            ["status"] => return Reply::Text(self.render_status()),
            ["alerts"] => return Reply::Text(self.render_alerts()),
            ["help"] => return Reply::Text(REPL_HELP.to_owned()),
            ["quit" | "exit"] => return Reply::Quit,
            ["fail-link", a, b] => Directive::FailLink((*a).into(), (*b).into()),
            ["restore-link", a, b] => Directive::RestoreLink((*a).into(), (*b).into()),
            ["fail-node", n] => Directive::FailNode((*n).into()),
            ["restore-node", n] => Directive::RestoreNode((*n).into()),
            ["attack", stream, seq, port] => match seq.parse() {
                Ok(seq) => Directive::AttackReplay { stream: (*stream).into(), seq, port: (*port).into() },
                Err(_) => return Reply::Text(format!("bad sequence number `{seq}`\n")),
            },
            _ => return Reply::Text(format!("unrecognized command `{}`\n{REPL_HELP}", line.trim())),
        };
        let shown = directive.to_string();
        match self.inject(directive) {
            Ok(()) => Reply::Text(format!("{shown} at {} µs\n", self.sim.now())),
            Err(e) => Reply::Text(format!("rejected: {e}\n")),
        }
    }
}

/// Result of an operator command.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Reply {
    Text(String),
    Quit,
}

pub const REPL_HELP: &str = "\
commands:
  status                      placement, node health, routes
  alerts                      monitor alerts so far
  fail-link <a> <b>           take a link down
  restore-link <a> <b>        bring it back
  fail-node <vnode>           crash a node
  restore-node <vnode>        reboot it
  attack <stream> <seq> <port>  inject a replayed frame at the tap
  help                        this text
  quit                        stop the run
";

/// Runs a scenario to its end without pacing.
pub fn run_scenario(system: SystemConfig, scenario: Scenario) -> RunReport {
    let end = scenario.end_us;
    let mut world = World::new(system, scenario);
    world.run_until(end);
    world.finish()
}
