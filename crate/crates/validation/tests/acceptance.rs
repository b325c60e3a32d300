//! Runs every acceptance criterion and prints one line per criterion.
//! Lines go straight to stdout so they show without `--nocapture`.

use std::io::Write;

use sacflow_validation::{criteria, Verdict};

fn report(verdict: sacflow::Result<Verdict>) {
    let verdict = verdict.expect("criterion ran to completion");
    writeln!(std::io::stdout().lock(), "{verdict}").expect("stdout");
    assert!(verdict.holds(), "{verdict}");
}

#[test]
fn gradient_oracle() {
    report(criteria::gradient_oracle());
}

#[test]
fn marginal_preservation() {
    report(criteria::marginal_preservation());
}

#[test]
fn pathwise_score_identity() {
    report(criteria::score_identity());
}

#[test]
fn gradient_stability_ablation() {
    report(criteria::gradient_stability());
}

#[test]
fn multimodality() {
    report(criteria::multimodality());
}

#[test]
fn from_scratch_training() {
    report(criteria::from_scratch());
}

#[test]
fn offline_to_online() {
    report(criteria::offline_to_online());
}

#[test]
fn determinism_and_persistence() {
    report(criteria::determinism_and_persistence());
}
