mod common;

use hacommit::audit::{audit, Check};
use hacommit::experiment::run_experiment;
use hacommit::trace::Protocol;

use common::faulty_config;

fn sweep(protocol: Protocol, seeds: std::ops::Range<u64>) {
    let mut failures = Vec::new();
    for seed in seeds {
        let c = faulty_config(protocol, seed);
        let out = run_experiment(&c).unwrap_or_else(|e| panic!("seed {seed}: {e}"));
        let report = audit(&out.trace);
        let m = &out.metrics;
        assert_eq!(m.committed + m.aborted_final, m.issued, "seed {seed}");
        if !report.passed() {
            let checks: Vec<Check> = report.violations.iter().map(|v| v.check).collect();
            failures.push((seed, checks, report.violations[0].detail.clone()));
        }
    }
    assert!(
        failures.is_empty(),
        "{} failing seeds: {failures:#?}",
        failures.len()
    );
}

#[test]
fn hacommit_survives_random_faults() {
    sweep(Protocol::HaCommit, 0..60);
}

#[test]
fn hacommit_read_committed_survives_random_faults() {
    sweep(Protocol::HaCommitRc, 0..60);
}

#[test]
fn rcommit_survives_random_faults() {
    sweep(Protocol::RCommit, 0..60);
}

#[test]
fn two_pc_stays_safe_under_random_faults() {
    sweep(Protocol::TwoPc, 0..60);
}
