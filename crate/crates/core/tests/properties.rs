mod common;

use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;

use mcsnet::config::{Directive, Scenario, ScriptEvent};
use mcsnet::frer::RecoveryOutcome;
use mcsnet::metrics::Category;
use mcsnet::model::{free_resources, Criticality, Resources, ServiceSpec};
use mcsnet::world::{run_scenario, RunStatus};

fn demand() -> impl Strategy<Value = Resources> {
    (0u64..2000, 0u64..2000).prop_map(|(c, m)| Resources::new(c, m))
}

proptest! {
    #[test]
    fn adding_a_service_never_frees_resources(cap in demand(), deployed in prop::collection::vec(demand(), 0..6), extra in demand()) {
        let specs: Vec<ServiceSpec> = deployed
            .iter()
            .enumerate()
            .map(|(i, d)| ServiceSpec::new(format!("s{i}"), Criticality::Critical, *d))
            .collect();
        let mut more = specs.clone();
        more.push(ServiceSpec::new("x", Criticality::NonCritical, extra));
        if let (Ok(before), Ok(after)) = (free_resources(&cap, &specs), free_resources(&cap, &more)) {
            prop_assert!(after.cpu_millicores <= before.cpu_millicores);
            prop_assert!(after.memory_mib <= before.memory_mib);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn fault_free_runs_detect_nothing(seed in any::<u64>()) {
        let scenario = Scenario { end_us: 6_000_000, ..Scenario::empty(seed) };
        let report = run_scenario(common::fig1(), scenario);
        prop_assert_eq!(&report.status, &RunStatus::Completed, "{:?}", report.violations);
        let failures = report
            .metrics
            .by_category(Category::Failover)
            .filter(|r| r.str("event") == Some("node_failed"))
            .count();
        prop_assert_eq!(failures, 0);

        let mut seqnos: BTreeMap<String, Vec<u64>> = BTreeMap::new();
        for r in report.metrics.by_category(Category::Heartbeat) {
            if let (Some(node), Some(seqno)) = (r.str("node"), r.u64("seqno")) {
                seqnos.entry(node.to_owned()).or_default().push(seqno);
            }
        }
        prop_assert_eq!(seqnos.len(), 3);
        for (node, s) in &seqnos {
            prop_assert!(s.windows(2).all(|w| w[1] == w[0] + 1), "{} heartbeats have gaps: {:?}", node, s);
        }

        let trace = report.trace_jsonl();
        let times: Vec<u64> = trace
            .lines()
            .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["time_us"].as_u64().unwrap())
            .collect();
        prop_assert!(times.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn link_faults_keep_books_balanced(
        faults in prop::collection::vec((1u64..80, 0usize..3, any::<bool>()), 0..8),
        seed in 0u64..1000,
    ) {
        let links = [("TSN1", "TSN2"), ("TSN2", "TSN3"), ("TSN1", "TSN3")];
        let mut events: Vec<ScriptEvent> = faults
            .iter()
            .map(|&(at, l, up)| {
                let (a, b) = (links[l].0.into(), links[l].1.into());
                let directive = if up { Directive::RestoreLink(a, b) } else { Directive::FailLink(a, b) };
                ScriptEvent { at_us: at * 50_000, directive }
            })
            .collect();
        events.sort_by_key(|e| e.at_us);
        let scenario = Scenario { events, end_us: 4_500_000, ..Scenario::empty(seed) };
        let report = run_scenario(common::fig1(), scenario);
        // Conservation and causality are checked when the run finishes.
        prop_assert_eq!(&report.status, &RunStatus::Completed, "{:?}", report.violations);
        let accepted: Vec<u16> =
            report.deliveries.iter().filter(|d| d.outcome == RecoveryOutcome::Accept).map(|d| d.seq).collect();
        let distinct: BTreeSet<u16> = accepted.iter().copied().collect();
        prop_assert_eq!(distinct.len(), accepted.len());
    }
}
