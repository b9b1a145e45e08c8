mod common;

use mcsnet::config::{parse_scenario, Directive, Scenario, ScriptEvent};
use mcsnet::frer::RecoveryOutcome;
use mcsnet::metrics::Category;
use mcsnet::monitor::AlertKind;
use mcsnet::world::{run_scenario, Reply, RunStatus, World};

#[test]
fn s1_places_services_and_routes_video() {
    let report = run_scenario(common::fig1(), common::shipped("s1_placement"));
    assert_eq!(report.status, RunStatus::Completed);
    let plan = report
        .metrics
        .by_category(Category::Placement)
        .find(|r| r.str("event") == Some("plan"))
        .expect("plan record");
    let line = serde_json::to_string(&plan.payload).unwrap();
    for (svc, node) in [("autopilot", "VNode1"), ("cabin-display", "VNode2"), ("video-recv", "VNode3"), ("video-send", "VNode1")] {
        assert!(line.contains(&format!("\"{svc}\":\"{node}\"")), "{svc} not on {node}: {line}");
    }
    assert!(report.deliveries.iter().any(|d| d.outcome == RecoveryOutcome::Accept));
}

#[test]
fn empty_script_runs_bootstrap_only() {
    let report = run_scenario(common::fig1(), Scenario::empty(7));
    assert_eq!(report.status, RunStatus::Completed);
    assert_eq!(report.end_us, 0);
    assert!(report.metrics.by_category(Category::Placement).count() > 0);
}

#[test]
fn status_after_failover_shows_new_host() {
    let mut world = World::new(common::fig1(), common::shipped("s3_nodefail"));
    world.run_until(world.end_us());
    let status = world.render_status();
    let line = status.lines().find(|l| l.contains("video-recv")).expect("video-recv in status");
    assert!(line.contains("VNode2"), "{status}");
    assert_eq!(world.supervisor().view().node_of("video-recv").map(|n| n.as_str()), Some("VNode2"));
}

#[test]
fn talker_migration_changes_source_mac() {
    let mut scenario = common::shipped("s3_nodefail");
    scenario.events = vec![ScriptEvent { at_us: 10_000_000, directive: Directive::FailNode("VNode1".into()) }];
    let report = run_scenario(common::fig1(), scenario);
    assert_eq!(report.status, RunStatus::Completed, "{:?}", report.violations);
    let moved = report
        .metrics
        .by_category(Category::Failover)
        .any(|r| r.str("event") == Some("step_complete") && r.str("service") == Some("video-send"));
    assert!(moved, "video-send never migrated");
    assert!(
        report.alerts.iter().any(|a| a.kind == AlertKind::SourceMacChange),
        "alerts: {:?}",
        report.alerts.iter().map(|a| a.to_string()).collect::<Vec<_>>()
    );
}

#[test]
fn unknown_stream_replay_is_flagged() {
    let mut scenario = common::shipped("s4_attack");
    scenario.events =
        vec![ScriptEvent { at_us: 6_000_000, directive: Directive::AttackReplay { stream: "telemetry".into(), seq: 3, port: "attacker".into() } }];
    let report = run_scenario(common::fig1(), scenario);
    assert_eq!(report.status, RunStatus::Completed);
    assert!(report.alerts.iter().any(|a| a.kind == AlertKind::UnknownStream && a.stream.as_str() == "telemetry"));
}

#[test]
fn restored_node_rejoins() {
    let mut scenario = common::shipped("s3_nodefail");
    scenario.events.push(ScriptEvent { at_us: 15_000_000, directive: Directive::RestoreNode("VNode3".into()) });
    let report = run_scenario(common::fig1(), scenario);
    assert_eq!(report.status, RunStatus::Completed, "{:?}", report.violations);
    let rejoined = report
        .metrics
        .by_category(Category::Failover)
        .find(|r| r.str("event") == Some("node_rejoined") && r.str("node") == Some("VNode3"))
        .expect("VNode3 rejoined");
    assert!(rejoined.time_us >= 15_000_000);
    let failed = report
        .metrics
        .by_category(Category::Failover)
        .filter(|r| r.str("event") == Some("node_failed") && r.str("node") == Some("VNode3"))
        .count();
    assert_eq!(failed, 1);
}

#[test]
fn operator_injection_replays_identically() {
    let system = common::fig1();
    let mut live = World::new(system.clone(), Scenario { end_us: 8_000_000, ..Scenario::empty(2) });
    live.run_until(3_000_000);
    assert!(matches!(live.dispatch("fail-link TSN1 TSN3"), Reply::Text(t) if t.contains("fail_link")));
    live.run_until(8_000_000);
    let first = live.finish();

    let text = first.realized.to_toml();
    let replay = parse_scenario(&text, "recorded.toml".as_ref(), &system).expect("recorded script parses");
    let second = run_scenario(system, replay);
    assert_eq!(first.metrics_jsonl(), second.metrics_jsonl());
    assert_eq!(first.trace_jsonl(), second.trace_jsonl());
}

#[test]
fn rejected_commands_leave_the_run_untouched() {
    let mut world = World::new(common::fig1(), Scenario { end_us: 1_000_000, ..Scenario::empty(0) });
    assert!(matches!(world.dispatch("fail-node VNode9"), Reply::Text(t) if t.starts_with("rejected")));
    assert!(matches!(world.dispatch("attack video 1 x"), Reply::Text(t) if t.starts_with("rejected")));
    assert!(matches!(world.dispatch("frobnicate"), Reply::Text(t) if t.contains("unrecognized")));
    assert_eq!(world.dispatch("quit"), Reply::Quit);
    world.run_until(1_000_000);
    assert!(world.finish().realized.events.is_empty());
}

#[test]
fn failed_member_path_goes_silent_at_the_tap() {
    let scenario = Scenario { tap_bridge: Some("TSN2".into()), ..common::shipped("s2_linkfail") };
    let report = run_scenario(common::fig1(), scenario);
    assert_eq!(report.status, RunStatus::Completed);
    let silent: Vec<_> = report.alerts.iter().filter(|a| a.kind == AlertKind::PathSilence).collect();
    assert_eq!(silent.len(), 1, "{silent:?}");
    let delay = silent[0].time_us - 5_000_000;
    assert!((50_000..=150_000).contains(&delay), "silence after {delay} µs");
    assert!(report.alerts.iter().all(|a| a.kind == AlertKind::PathSilence));
}
