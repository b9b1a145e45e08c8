//! Controller and failure manager.
//!
//! The supervisor keeps a global view built from heartbeats, compares it
//! against the desired placement, declares nodes failed when their
//! heartbeats stop, and drives failover. It is a pure state machine: every
//! entry point returns [`Action`]s for the event loop to carry out.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};

use serde::Serialize;
use serde_json::{json, Map, Value};
use thiserror::Error;

use crate::metrics::{payload, Category};
use crate::model::{
    plan_usage, Criticality, LinkPath, PlacementPlan, Resources, ServiceId, ServiceSpec, StreamId, StreamSpec,
    Topology, VNodeId, VNodeSpec,
};
use crate::placement::{self, PlacementError, PlacementProblem};
use crate::vnode::{
    Ack, Command, ContainerStatus, Heartbeat, ServiceReport, VNodeError, DEFAULT_CONTAINER_START_DELAY_US,
    DEFAULT_HEARTBEAT_PERIOD_US,
};

pub const DEFAULT_MISS_THRESHOLD: u64 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SupervisorConfig {
    pub heartbeat_period_us: u64,
    pub miss_threshold: u64,
    pub container_start_delay_us: u64,
}

impl Default for SupervisorConfig {
    fn default() -> Self {
        Self {
            heartbeat_period_us: DEFAULT_HEARTBEAT_PERIOD_US,
            miss_threshold: DEFAULT_MISS_THRESHOLD,
            container_start_delay_us: DEFAULT_CONTAINER_START_DELAY_US,
        }
    }
}

impl SupervisorConfig {
    /// Silence longer than this declares a node failed.
    pub fn failure_timeout_us(&self) -> u64 {
        self.miss_threshold * self.heartbeat_period_us
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SupervisorError {
    #[error("heartbeat from unknown node `{0}`")]
    UnknownNode(VNodeId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeHealth {
    Alive,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct NodeView {
    pub health: NodeHealth,
    pub last_heartbeat_us: Option<u64>,
    pub last_seqno: Option<u64>,
    pub services: BTreeMap<ServiceId, ServiceReport>,
    pub free: Resources,
    pub domain_free: BTreeMap<Criticality, Resources>,
    #[serde(skip)]
    spec: VNodeSpec,
}

impl NodeView {
    /// Free resources usable by a service of the given criticality.
    pub fn free_for(&self, kind: Criticality) -> Resources {
        let d = self.domain_free.get(&kind).copied().unwrap_or(self.free);
        Resources::new(d.cpu_millicores.min(self.free.cpu_millicores), d.memory_mib.min(self.free.memory_mib))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct GlobalView {
    pub nodes: BTreeMap<VNodeId, NodeView>,
    pub desired: PlacementPlan,
    pub standby: BTreeMap<ServiceId, VNodeId>,
    /// Last application position reported for each service.
    pub checkpoints: BTreeMap<ServiceId, u64>,
}

impl GlobalView {
    pub fn node_of(&self, service: &str) -> Option<&VNodeId> {
        self.desired.assignment.get(service)
    }

    pub fn status_of(&self, service: &str) -> Option<ContainerStatus> {
        let node = self.node_of(service)?;
        self.nodes.get(node)?.services.get(service).map(|r| r.status)
    }

    /// Text rendering for interactive use.
    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str("nodes:\n");
        for (id, n) in &self.nodes {
            let hb = n.last_heartbeat_us.map_or("never".to_owned(), |t| format!("{t} µs"));
            let _ = writeln!(
                out,
                "  {id:<10} {:<6} last heartbeat {hb}, free {}",
                match n.health {
                    NodeHealth::Alive => "alive",
                    NodeHealth::Failed => "FAILED",
                },
                n.free
            );
        }
        out.push_str("services:\n");
        for (svc, node) in &self.desired.assignment {
            let status = self.status_of(svc).map_or("unknown".to_owned(), |s| s.to_string());
            let standby = self.standby.get(svc).map(|n| format!(" (standby on {n})")).unwrap_or_default();
            let _ = writeln!(out, "  {svc:<14} {status} on {node}{standby}");
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Inconsistency {
    ServiceDown { service: ServiceId, node: VNodeId, status: ContainerStatus },
    ServiceMissing { service: ServiceId, node: VNodeId, standby: bool },
    MissedHeartbeats { node: VNodeId, missed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Primary,
    Standby,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StepKind {
    /// First deployment of the desired placement.
    Initial,
    ActivateStandby,
    Migrate,
    /// Redeploy on the same node after a reported inconsistency.
    Reinitiate,
    RestoreStandby,
    /// No live node can take the service; availability is not ensured.
    Degraded,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum PlannedCommand {
    /// Addressed to an unreachable node; recorded but not sent.
    Skipped { node: VNodeId, command: Command },
    Send { node: VNodeId, command: Command },
    AwaitRunning { node: VNodeId },
    Reroute { streams: Vec<StreamId> },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct MigrationStep {
    pub service: ServiceId,
    pub role: Role,
    pub kind: StepKind,
    pub from: Option<VNodeId>,
    pub target: Option<VNodeId>,
    pub checkpoint: Option<u64>,
    pub commands: Vec<PlannedCommand>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct MigrationPlan {
    pub failed: VNodeId,
    pub steps: Vec<MigrationStep>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CommandOutcome {
    Ack,
    Err(String),
    Unreachable,
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StepStatus {
    InProgress,
    Completed,
    Failed,
    Unreachable,
    Degraded,
}

/// How one step of a plan went, command by command.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ApplyReport {
    pub service: ServiceId,
    pub kind: StepKind,
    pub target: Option<VNodeId>,
    pub outcomes: Vec<(String, CommandOutcome)>,
    pub status: StepStatus,
    pub started_at_us: u64,
    pub finished_at_us: Option<u64>,
    pub running_at_us: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Action {
    Send { to: VNodeId, id: u64, command: Command },
    InstallRoute { stream: StreamId, src: VNodeId, dst: VNodeId, paths: Vec<LinkPath> },
    ScheduleDeadline { node: VNodeId, at_us: u64 },
    Metric { category: Category, payload: Map<String, Value> },
}

fn metric(category: Category, value: Value) -> Action {
    Action::Metric { category, payload: payload(value) }
}

type StepKey = (ServiceId, Role);

#[derive(Debug, Clone, PartialEq, Eq)]
enum Await {
    Nothing,
    Reply(u64),
    Running(VNodeId),
}

#[derive(Debug, Clone)]
struct ActiveStep {
    step: MigrationStep,
    next: usize,
    awaiting: Await,
    report: usize,
}

#[derive(Debug, Clone)]
pub struct Supervisor {
    config: SupervisorConfig,
    topology: Topology,
    services: BTreeMap<ServiceId, ServiceSpec>,
    streams: Vec<StreamSpec>,
    view: GlobalView,
    next_command: u64,
    steps: BTreeMap<StepKey, ActiveStep>,
    inflight: BTreeMap<u64, StepKey>,
    reports: Vec<ApplyReport>,
    running: BTreeMap<ServiceId, BTreeSet<VNodeId>>,
    installed: BTreeMap<StreamId, (VNodeId, VNodeId)>,
    stopped_streams: BTreeSet<StreamId>,
    degraded: BTreeSet<ServiceId>,
    dirty: bool,
}

impl Supervisor {
    pub fn new(config: SupervisorConfig, topology: Topology, services: Vec<ServiceSpec>, streams: Vec<StreamSpec>) -> Self {
        let nodes = topology
            .vnodes
            .iter()
            .map(|spec| {
                let view = NodeView {
                    health: NodeHealth::Alive,
                    last_heartbeat_us: None,
                    last_seqno: None,
                    services: BTreeMap::new(),
                    free: spec.capacity,
                    domain_free: [Criticality::Critical, Criticality::NonCritical]
                        .into_iter()
                        .map(|k| (k, spec.domain_capacity(k)))
                        .collect(),
                    spec: spec.clone(),
                };
                (spec.id.clone(), view)
            })
            .collect();
        Self {
            config,
            topology,
            services: services.into_iter().map(|s| (s.id.clone(), s)).collect(),
            streams,
            view: GlobalView {
                nodes,
                desired: PlacementPlan::default(),
                standby: BTreeMap::new(),
                checkpoints: BTreeMap::new(),
            },
            next_command: 0,
            steps: BTreeMap::new(),
            inflight: BTreeMap::new(),
            reports: Vec::new(),
            running: BTreeMap::new(),
            installed: BTreeMap::new(),
            stopped_streams: BTreeSet::new(),
            degraded: BTreeSet::new(),
            dirty: false,
        }
    }

    pub fn config(&self) -> &SupervisorConfig {
        &self.config
    }

    pub fn view(&self) -> &GlobalView {
        &self.view
    }

    /// A copy of the global view, safe to hand to another thread.
    pub fn snapshot(&self) -> GlobalView {
        self.view.clone()
    }

    pub fn reports(&self) -> &[ApplyReport] {
        &self.reports
    }

    fn start_delay(&self, spec: &ServiceSpec) -> u64 {
        spec.start_delay_us.unwrap_or(self.config.container_start_delay_us)
    }

    fn deploy(&self, spec: &ServiceSpec, standby: bool) -> Command {
        Command::DeployService { spec: spec.clone(), standby, start_delay_us: self.start_delay(spec) }
    }

    /// Computes the initial placement and deploys it.
    pub fn bootstrap(&mut self, now_us: u64) -> Result<Vec<Action>, PlacementError> {
        let services: Vec<ServiceSpec> = self.services.values().cloned().collect();
        let problem = PlacementProblem::new(&self.topology, &services, &self.streams);
        let (plan, solver) = match placement::solve_exact(&problem) {
            Ok(plan) => (plan, "exact"),
            Err(PlacementError::ScaleGuard { .. }) => (placement::solve_greedy(&problem)?, "greedy"),
            Err(e) => return Err(e),
        };
        let objective = placement::max_utilization(&self.topology, &services, &plan.assignment);
        let mut actions = vec![metric(
            Category::Placement,
            json!({
                "event": "plan",
                "solver": solver,
                "objective": objective.as_f64(),
                "assignment": plan.assignment,
                "routing": plan.routing.iter().map(|(s, paths)| {
                    let src = &plan.assignment[&self.streams.iter().find(|x| &x.id == s).expect("routed stream").source];
                    let from = &self.topology.vnode(src.as_str()).expect("placed node").attached_bridge;
                    (s.to_string(), paths.iter().map(|p| self.topology.path_label(from.as_str(), p)).collect::<Vec<_>>())
                }).collect::<BTreeMap<_, _>>(),
            }),
        )];
        self.view.desired = plan;
        for svc in services.iter() {
            if let Some(node) = &svc.standby_on {
                self.view.standby.insert(svc.id.clone(), node.clone());
            }
        }
        let timeout = self.config.failure_timeout_us();
        for node in self.view.nodes.keys() {
            actions.push(Action::ScheduleDeadline { node: node.clone(), at_us: now_us + timeout + 1 });
        }
        let mut steps = Vec::new();
        for (svc, node) in self.view.desired.assignment.clone() {
            let spec = self.services[&svc].clone();
            steps.push(MigrationStep {
                service: svc.clone(),
                role: Role::Primary,
                kind: StepKind::Initial,
                from: None,
                target: Some(node.clone()),
                checkpoint: None,
                commands: vec![PlannedCommand::Send { node, command: self.deploy(&spec, false) }],
            });
        }
        for (svc, node) in self.view.standby.clone() {
            let spec = self.services[&svc].clone();
            steps.push(MigrationStep {
                service: svc.clone(),
                role: Role::Standby,
                kind: StepKind::Initial,
                from: None,
                target: Some(node.clone()),
                checkpoint: None,
                commands: vec![PlannedCommand::Send { node, command: self.deploy(&spec, true) }],
            });
        }
        for step in steps {
            actions.extend(self.start_step(step, now_us));
        }
        Ok(actions)
    }

    /// Updates the view from a heartbeat and reports where it disagrees
    /// with the desired state.
    pub fn process_heartbeat(&mut self, hb: &Heartbeat, now_us: u64) -> Result<Vec<Inconsistency>, SupervisorError> {
        let node = self.view.nodes.get_mut(&hb.node).ok_or_else(|| SupervisorError::UnknownNode(hb.node.clone()))?;
        let mut found = Vec::new();
        if let Some(last) = node.last_seqno {
            if hb.seqno <= last {
                return Ok(found);
            }
            if hb.seqno > last + 1 {
                found.push(Inconsistency::MissedHeartbeats { node: hb.node.clone(), missed: hb.seqno - last - 1 });
            }
        }
        node.last_seqno = Some(hb.seqno);
        node.last_heartbeat_us = Some(now_us);
        node.services = hb.services.clone();
        node.free = hb.free;
        node.domain_free = hb.domains.iter().map(|(k, d)| (*k, d.free)).collect();
        if node.health == NodeHealth::Failed {
            node.health = NodeHealth::Alive;
            self.dirty = true;
        }

        for set in self.running.values_mut() {
            set.remove(&hb.node);
        }
        for (svc, report) in &hb.services {
            if report.status == ContainerStatus::Running {
                self.running.entry(svc.clone()).or_default().insert(hb.node.clone());
                if self.view.desired.assignment.get(svc) == Some(&hb.node) {
                    self.view.checkpoints.insert(svc.clone(), report.position);
                }
            }
        }

        let busy = |svc: &ServiceId, role| self.steps.contains_key(&(svc.clone(), role));
        for (svc, desired_node) in &self.view.desired.assignment {
            if desired_node != &hb.node || busy(svc, Role::Primary) {
                continue;
            }
            match hb.services.get(svc).map(|r| r.status) {
                Some(status @ (ContainerStatus::Failed | ContainerStatus::Stopped)) => {
                    found.push(Inconsistency::ServiceDown { service: svc.clone(), node: hb.node.clone(), status })
                }
                None => found.push(Inconsistency::ServiceMissing {
                    service: svc.clone(),
                    node: hb.node.clone(),
                    standby: false,
                }),
                Some(_) => {}
            }
        }
        for (svc, standby_node) in &self.view.standby {
            if standby_node == &hb.node && !busy(svc, Role::Standby) && !hb.services.contains_key(svc) {
                found.push(Inconsistency::ServiceMissing { service: svc.clone(), node: hb.node.clone(), standby: true });
            }
        }
        Ok(found)
    }

    /// Heartbeat handler for the event loop: updates the view, re-arms the
    /// node's failure deadline, and reinitiates inconsistent services.
    pub fn on_heartbeat(&mut self, hb: &Heartbeat, now_us: u64) -> Result<Vec<Action>, SupervisorError> {
        let was_failed = self.view.nodes.get(&hb.node).is_some_and(|n| n.health == NodeHealth::Failed);
        let found = self.process_heartbeat(hb, now_us)?;
        let mut actions = vec![
            metric(
                Category::Heartbeat,
                json!({
                    "node": hb.node,
                    "seqno": hb.seqno,
                    "sent_at_us": hb.sent_at_us,
                    "free_cpu": hb.free.cpu_millicores,
                    "free_mem": hb.free.memory_mib,
                    "services": hb.services.iter().map(|(s, r)| (s.to_string(), r.status.to_string())).collect::<BTreeMap<_, _>>(),
                }),
            ),
            Action::ScheduleDeadline {
                node: hb.node.clone(),
                at_us: now_us + self.config.failure_timeout_us() + 1,
            },
        ];
        if was_failed {
            actions.push(metric(Category::Failover, json!({"event": "node_rejoined", "node": hb.node})));
        }
        for inc in found {
            let category = match inc {
                Inconsistency::MissedHeartbeats { .. } => Category::Heartbeat,
                _ => Category::Failover,
            };
            let mut record = payload(&inc);
            record.insert("event".into(), json!("inconsistency"));
            actions.push(Action::Metric { category, payload: record });
            actions.extend(self.reinitiate(&inc, now_us));
        }
        actions.extend(self.sync_streams());
        Ok(actions)
    }

    fn reinitiate(&mut self, inc: &Inconsistency, now_us: u64) -> Vec<Action> {
        let (service, node, down, role) = match inc {
            Inconsistency::ServiceDown { service, node, .. } => (service, node, true, Role::Primary),
            Inconsistency::ServiceMissing { service, node, standby } => {
                (service, node, false, if *standby { Role::Standby } else { Role::Primary })
            }
            Inconsistency::MissedHeartbeats { .. } => return Vec::new(),
        };
        let spec = self.services[service].clone();
        let mut commands = Vec::new();
        if down {
            commands.push(PlannedCommand::Send { node: node.clone(), command: Command::RemoveService { service: service.clone() } });
        }
        commands.push(PlannedCommand::Send { node: node.clone(), command: self.deploy(&spec, role == Role::Standby) });
        let checkpoint = self.view.checkpoints.get(service).copied();
        if role == Role::Primary {
            commands.push(PlannedCommand::AwaitRunning { node: node.clone() });
            commands.push(PlannedCommand::Send {
                node: node.clone(),
                command: Command::Resume { service: service.clone(), checkpoint },
            });
            commands.push(PlannedCommand::Reroute { streams: self.streams_of(service) });
        }
        let step = MigrationStep {
            service: service.clone(),
            role,
            kind: if role == Role::Standby { StepKind::RestoreStandby } else { StepKind::Reinitiate },
            from: Some(node.clone()),
            target: Some(node.clone()),
            checkpoint,
            commands,
        };
        self.start_step(step, now_us)
    }

    fn streams_of(&self, service: &ServiceId) -> Vec<StreamId> {
        self.streams.iter().filter(|s| &s.source == service || &s.sink == service).map(|s| s.id.clone()).collect()
    }

    /// Nodes still believed alive whose heartbeats have been silent longer
    /// than the failure timeout. Nodes that never reported count from time
    /// zero.
    pub fn detect_failures(&self, now_us: u64) -> Vec<VNodeId> {
        let timeout = self.config.failure_timeout_us();
        self.view
            .nodes
            .iter()
            .filter(|(_, n)| n.health == NodeHealth::Alive)
            .filter(|(_, n)| now_us.saturating_sub(n.last_heartbeat_us.unwrap_or(0)) > timeout)
            .map(|(id, _)| id.clone())
            .collect()
    }

    /// A node's failure deadline fired.
    pub fn on_deadline(&mut self, now_us: u64) -> Vec<Action> {
        let mut actions = Vec::new();
        for failed in self.detect_failures(now_us) {
            actions.extend(self.declare_failed(&failed, now_us));
        }
        actions
    }

    fn declare_failed(&mut self, failed: &VNodeId, now_us: u64) -> Vec<Action> {
        let node = self.view.nodes.get_mut(failed).expect("detected node is registered");
        node.health = NodeHealth::Failed;
        let last = node.last_heartbeat_us;
        for set in self.running.values_mut() {
            set.remove(failed);
        }
        let mut actions = vec![metric(
            Category::Failover,
            json!({"event": "node_failed", "node": failed, "last_heartbeat_us": last, "detected_at_us": now_us}),
        )];

        // Steps waiting on the failed node can no longer finish.
        let stuck: Vec<StepKey> = self
            .steps
            .iter()
            .filter(|(_, s)| s.step.target.as_ref() == Some(failed))
            .map(|(k, _)| k.clone())
            .collect();
        for key in stuck {
            actions.extend(self.abort_step(&key, StepStatus::Unreachable, now_us));
        }

        let lost_standby: Vec<ServiceId> =
            self.view.standby.iter().filter(|(_, n)| *n == failed).map(|(s, _)| s.clone()).collect();
        for svc in lost_standby {
            self.view.standby.remove(&svc);
            actions.push(metric(Category::Failover, json!({"event": "standby_lost", "service": svc, "node": failed})));
        }

        actions.extend(self.reconcile_failovers(now_us));
        actions
    }

    /// Failover plan for the services desired on `failed` that have no step
    /// in flight. Targets are chosen one service at a time against a working
    /// copy of the believed free resources.
    pub fn plan_failover(&self, failed: &VNodeId) -> MigrationPlan {
        let mut free: BTreeMap<VNodeId, (Resources, Resources)> = self
            .view
            .nodes
            .iter()
            .filter(|(id, n)| *id != failed && n.health == NodeHealth::Alive)
            .map(|(id, n)| (id.clone(), (n.free_for(Criticality::Critical), n.free_for(Criticality::NonCritical))))
            .collect();
        // Deployments in flight that heartbeats may not reflect yet.
        for active in self.steps.values() {
            let (Some(target), Some(spec)) = (&active.step.target, self.services.get(&active.step.service)) else {
                continue;
            };
            let reported = self.view.nodes.get(target).is_some_and(|n| n.services.contains_key(&spec.id));
            if matches!(active.step.kind, StepKind::Migrate | StepKind::Reinitiate) && !reported {
                if let Some(slot) = free.get_mut(target) {
                    charge(slot, spec);
                }
            }
        }

        let mut steps = Vec::new();
        let services: Vec<ServiceId> = self
            .view
            .desired
            .assignment
            .iter()
            .filter(|(s, n)| *n == failed && !self.steps.contains_key(&((*s).clone(), Role::Primary)))
            .map(|(s, _)| s.clone())
            .collect();
        for svc in services {
            let spec = &self.services[&svc];
            let checkpoint = self.view.checkpoints.get(&svc).copied();
            let mut commands = vec![
                PlannedCommand::Skipped { node: failed.clone(), command: Command::StopService { service: svc.clone() } },
                PlannedCommand::Skipped { node: failed.clone(), command: Command::RemoveService { service: svc.clone() } },
            ];
            let standby = self
                .view
                .standby
                .get(&svc)
                .filter(|n| self.view.nodes.get(*n).is_some_and(|v| v.health == NodeHealth::Alive))
                .cloned();
            let (kind, target) = match standby {
                Some(node) => {
                    commands.push(PlannedCommand::Send {
                        node: node.clone(),
                        command: Command::StartService { service: svc.clone() },
                    });
                    (StepKind::ActivateStandby, Some(node))
                }
                None => {
                    let candidates: BTreeMap<VNodeId, Resources> =
                        free.iter().map(|(id, (c, n))| (id.clone(), pick(spec.criticality, *c, *n))).collect();
                    match placement::select_failover_target(failed, &candidates, &spec.demand) {
                        Ok(node) => {
                            charge(free.get_mut(&node).expect("candidate"), spec);
                            commands.push(PlannedCommand::Send { node: node.clone(), command: self.deploy(spec, false) });
                            (StepKind::Migrate, Some(node))
                        }
                        Err(_) => (StepKind::Degraded, None),
                    }
                }
            };
            if let Some(node) = &target {
                commands.push(PlannedCommand::AwaitRunning { node: node.clone() });
                commands.push(PlannedCommand::Send {
                    node: node.clone(),
                    command: Command::Resume { service: svc.clone(), checkpoint },
                });
                commands.push(PlannedCommand::Reroute { streams: self.streams_of(&svc) });
            } else {
                commands.clear();
            }
            steps.push(MigrationStep {
                service: svc.clone(),
                role: Role::Primary,
                kind,
                from: Some(failed.clone()),
                target,
                checkpoint,
                commands,
            });
        }
        MigrationPlan { failed: failed.clone(), steps }
    }

    /// Dispatches a plan's steps. Each service's commands run in order;
    /// different services proceed independently.
    pub fn apply_plan(&mut self, plan: MigrationPlan, now_us: u64) -> Vec<Action> {
        let mut actions = Vec::new();
        if !plan.steps.is_empty() {
            actions.push(metric(Category::Failover, json!({"event": "plan", "failed": plan.failed, "steps": plan.steps})));
        }
        for step in plan.steps {
            if step.kind == StepKind::Degraded {
                if self.degraded.insert(step.service.clone()) {
                    self.reports.push(ApplyReport {
                        service: step.service.clone(),
                        kind: step.kind,
                        target: None,
                        outcomes: Vec::new(),
                        status: StepStatus::Degraded,
                        started_at_us: now_us,
                        finished_at_us: Some(now_us),
                        running_at_us: None,
                    });
                    actions.push(metric(
                        Category::Failover,
                        json!({"event": "degraded", "service": step.service, "from": step.from}),
                    ));
                }
                continue;
            }
            self.degraded.remove(&step.service);
            actions.extend(self.start_step(step, now_us));
        }
        actions
    }

    fn reconcile_failovers(&mut self, now_us: u64) -> Vec<Action> {
        let failed: Vec<VNodeId> =
            self.view.nodes.iter().filter(|(_, n)| n.health == NodeHealth::Failed).map(|(id, _)| id.clone()).collect();
        let mut actions = Vec::new();
        for node in failed {
            let plan = self.plan_failover(&node);
            actions.extend(self.apply_plan(plan, now_us));
        }
        actions
    }

    fn start_step(&mut self, step: MigrationStep, now_us: u64) -> Vec<Action> {
        let key = (step.service.clone(), step.role);
        self.reports.push(ApplyReport {
            service: step.service.clone(),
            kind: step.kind,
            target: step.target.clone(),
            outcomes: Vec::new(),
            status: StepStatus::InProgress,
            started_at_us: now_us,
            finished_at_us: None,
            running_at_us: None,
        });
        let report = self.reports.len() - 1;
        self.steps.insert(key.clone(), ActiveStep { step, next: 0, awaiting: Await::Nothing, report });
        self.advance(&key, now_us)
    }

    fn advance(&mut self, key: &StepKey, now_us: u64) -> Vec<Action> {
        let mut actions = Vec::new();
        loop {
            let Some(active) = self.steps.get_mut(key) else {
                return actions;
            };
            let Some(cmd) = active.step.commands.get(active.next).cloned() else {
                actions.extend(self.complete_step(key, now_us));
                return actions;
            };
            match cmd {
                PlannedCommand::Skipped { command, .. } => {
                    self.reports[active.report].outcomes.push((command.to_string(), CommandOutcome::Skipped));
                    active.next += 1;
                }
                PlannedCommand::Send { node, command } => {
                    let id = self.next_command;
                    self.next_command += 1;
                    active.awaiting = Await::Reply(id);
                    self.inflight.insert(id, key.clone());
                    actions.push(Action::Send { to: node, id, command });
                    return actions;
                }
                PlannedCommand::AwaitRunning { node } => {
                    if self.running.get(&key.0).is_some_and(|s| s.contains(&node)) {
                        active.next += 1;
                    } else {
                        active.awaiting = Await::Running(node);
                        return actions;
                    }
                }
                PlannedCommand::Reroute { .. } => {
                    active.next += 1;
                }
            }
        }
    }

    fn complete_step(&mut self, key: &StepKey, now_us: u64) -> Vec<Action> {
        let active = self.steps.remove(key).expect("completing an active step");
        let step = active.step;
        let report = &mut self.reports[active.report];
        report.status = StepStatus::Completed;
        report.finished_at_us = Some(now_us);
        let running_at_us = report.running_at_us;
        let target = step.target.clone().expect("non-degraded step has a target");
        match step.kind {
            StepKind::Migrate | StepKind::ActivateStandby | StepKind::Reinitiate => {
                self.view.desired.assignment.insert(step.service.clone(), target.clone());
                if step.kind == StepKind::ActivateStandby {
                    self.view.standby.remove(&step.service);
                }
            }
            StepKind::Initial | StepKind::RestoreStandby | StepKind::Degraded => {}
        }
        let mut actions = Vec::new();
        if !matches!(step.kind, StepKind::Initial) {
            actions.push(metric(
                Category::Failover,
                json!({
                    "event": "step_complete",
                    "service": step.service,
                    "kind": step.kind,
                    "from": step.from,
                    "target": target,
                    "checkpoint": step.checkpoint,
                    "running_at_us": running_at_us,
                }),
            ));
        }
        actions.extend(self.sync_streams());
        actions
    }

    fn abort_step(&mut self, key: &StepKey, status: StepStatus, now_us: u64) -> Vec<Action> {
        let Some(active) = self.steps.remove(key) else {
            return Vec::new();
        };
        self.inflight.retain(|_, k| k != key);
        let report = &mut self.reports[active.report];
        report.status = status.clone();
        report.finished_at_us = Some(now_us);
        self.dirty = true;
        vec![metric(
            Category::Failover,
            json!({"event": "step_aborted", "service": key.0, "kind": active.step.kind, "target": active.step.target, "status": status}),
        )]
    }

    /// Reply to command `id`.
    pub fn on_reply(&mut self, id: u64, result: &Result<Ack, VNodeError>, now_us: u64) -> Vec<Action> {
        let Some(key) = self.inflight.remove(&id) else {
            return Vec::new();
        };
        let Some(active) = self.steps.get_mut(&key) else {
            return Vec::new();
        };
        if active.awaiting != Await::Reply(id) {
            return Vec::new();
        }
        let label = match &active.step.commands[active.next] {
            PlannedCommand::Send { command, .. } => command.to_string(),
            other => format!("{other:?}"),
        };
        let target = active.step.target.clone();
        match result {
            Ok(ack) => {
                self.reports[active.report].outcomes.push((label.clone(), CommandOutcome::Ack));
                active.next += 1;
                active.awaiting = Await::Nothing;
                let mut actions = Vec::new();
                if ack.warning_no_checkpoint {
                    actions.push(metric(
                        Category::Failover,
                        json!({"event": "warning", "reason": "resume_without_checkpoint", "service": key.0, "node": target}),
                    ));
                }
                actions.push(metric(
                    Category::Failover,
                    json!({"event": "command_result", "command": label, "node": target, "outcome": "ack", "status": ack.status}),
                ));
                actions.extend(self.advance(&key, now_us));
                actions
            }
            Err(e) => {
                self.reports[active.report].outcomes.push((label.clone(), CommandOutcome::Err(e.to_string())));
                let mut actions = vec![metric(
                    Category::Failover,
                    json!({"event": "command_result", "command": label, "node": target, "outcome": "err", "error": e.to_string()}),
                )];
                actions.extend(self.abort_step(&key, StepStatus::Failed, now_us));
                actions
            }
        }
    }

    /// Command `id` could not be delivered.
    pub fn on_unreachable(&mut self, id: u64, now_us: u64) -> Vec<Action> {
        let Some(key) = self.inflight.remove(&id) else {
            return Vec::new();
        };
        let Some(active) = self.steps.get(&key) else {
            return Vec::new();
        };
        let label = match &active.step.commands[active.next] {
            PlannedCommand::Send { command, .. } => command.to_string(),
            other => format!("{other:?}"),
        };
        self.reports[active.report].outcomes.push((label.clone(), CommandOutcome::Unreachable));
        let mut actions = vec![metric(
            Category::Failover,
            json!({"event": "command_result", "command": label, "node": active.step.target, "outcome": "unreachable"}),
        )];
        actions.extend(self.abort_step(&key, StepStatus::Unreachable, now_us));
        actions
    }

    /// A node reports that a service's container finished starting.
    pub fn on_service_running(&mut self, node: &VNodeId, service: &ServiceId, running_at_us: u64, now_us: u64) -> Vec<Action> {
        if self.view.nodes.get(node).is_none_or(|n| n.health != NodeHealth::Alive) {
            return Vec::new();
        }
        self.running.entry(service.clone()).or_default().insert(node.clone());
        if let Some(v) = self.view.nodes.get_mut(node) {
            let report = v.services.entry(service.clone()).or_insert(ServiceReport { status: ContainerStatus::Running, position: 0 });
            report.status = ContainerStatus::Running;
        }
        let mut actions = vec![metric(
            Category::Failover,
            json!({"event": "service_running", "service": service, "node": node, "running_at_us": running_at_us}),
        )];
        let key = (service.clone(), Role::Primary);
        if let Some(active) = self.steps.get_mut(&key) {
            if active.awaiting == Await::Running(node.clone()) {
                self.reports[active.report].running_at_us = Some(running_at_us);
                active.awaiting = Await::Nothing;
                active.next += 1;
                actions.extend(self.advance(&key, now_us));
            }
        }
        actions.extend(self.sync_streams());
        actions
    }

    /// Periodic housekeeping: retries failovers after relevant changes and
    /// keeps stream routes in line with the desired placement.
    pub fn on_tick(&mut self, now_us: u64) -> Vec<Action> {
        let mut actions = Vec::new();
        if std::mem::take(&mut self.dirty) {
            self.degraded.clear();
            actions.extend(self.reconcile_failovers(now_us));
        }
        actions.extend(self.sync_streams());
        actions
    }

    /// The stream is no longer wanted; it is never rerouted again.
    pub fn stop_stream(&mut self, stream: &StreamId) {
        self.stopped_streams.insert(stream.clone());
        self.installed.remove(stream);
    }

    fn is_running_on(&self, service: &ServiceId, node: &VNodeId) -> bool {
        self.running.get(service).is_some_and(|s| s.contains(node))
            && self.view.nodes.get(node).is_some_and(|n| n.health == NodeHealth::Alive)
    }

    /// Installs routes for streams whose endpoints both run where they are
    /// desired and whose current route points elsewhere.
    fn sync_streams(&mut self) -> Vec<Action> {
        let mut actions = Vec::new();
        for stream in self.streams.clone() {
            if self.stopped_streams.contains(&stream.id) {
                continue;
            }
            let assignment = &self.view.desired.assignment;
            let (Some(src), Some(dst)) = (assignment.get(&stream.source).cloned(), assignment.get(&stream.sink).cloned()) else {
                continue;
            };
            if !self.is_running_on(&stream.source, &src) || !self.is_running_on(&stream.sink, &dst) {
                continue;
            }
            if self.installed.get(&stream.id) == Some(&(src.clone(), dst.clone())) {
                continue;
            }
            match placement::route_between(&self.topology, &src, &dst, &stream) {
                Ok(paths) => {
                    let from = self.topology.vnode(src.as_str()).expect("placed node").attached_bridge.clone();
                    let labels: Vec<String> = paths.iter().map(|p| self.topology.path_label(from.as_str(), p)).collect();
                    actions.push(metric(
                        Category::Failover,
                        json!({"event": "reroute", "stream": stream.id, "src": src, "dst": dst, "paths": labels}),
                    ));
                    self.view.desired.routing.insert(stream.id.clone(), paths.clone());
                    self.installed.insert(stream.id.clone(), (src.clone(), dst.clone()));
                    actions.push(Action::InstallRoute { stream: stream.id.clone(), src, dst, paths });
                }
                Err(e) => actions.push(metric(
                    Category::Failover,
                    json!({"event": "route_failed", "stream": stream.id, "error": e.to_string()}),
                )),
            }
        }
        actions
    }

    /// Desired state must stay admissible on every node believed alive.
    pub fn check_invariants(&self) -> Vec<String> {
        let services: Vec<ServiceSpec> = self
            .services
            .values()
            .map(|s| ServiceSpec { standby_on: self.view.standby.get(&s.id).cloned(), ..s.clone() })
            .collect();
        let mut out = Vec::new();
        for (node, (crit, non)) in plan_usage(&self.view.desired.assignment, &services) {
            let Some(view) = self.view.nodes.get(&node) else {
                out.push(format!("desired placement names unknown node {node}"));
                continue;
            };
            if view.health == NodeHealth::Alive && !view.spec.admits(&crit, &non) {
                out.push(format!("desired placement overloads {node}"));
            }
        }
        out
    }
}

fn pick(kind: Criticality, critical: Resources, non_critical: Resources) -> Resources {
    match kind {
        Criticality::Critical => critical,
        Criticality::NonCritical => non_critical,
    }
}

fn charge(slot: &mut (Resources, Resources), spec: &ServiceSpec) {
    let r = match spec.criticality {
        Criticality::Critical => &mut slot.0,
        Criticality::NonCritical => &mut slot.1,
    };
    *r = r.saturating_sub(&spec.demand);
}

impl fmt::Display for Inconsistency {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Inconsistency::ServiceDown { service, node, status } => write!(f, "{service} {status} on {node}"),
            Inconsistency::ServiceMissing { service, node, .. } => write!(f, "{service} missing on {node}"),
            Inconsistency::MissedHeartbeats { node, missed } => write!(f, "{missed} heartbeats missed from {node}"),
        }
    }
}
