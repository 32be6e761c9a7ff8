//! One test per acceptance criterion. Each prints a single PASS/FAIL line.

use seqmodel::verify::{self, CriterionReport};

fn report(r: CriterionReport) {
    println!("{r}");
    assert!(r.passed, "{r}");
}

#[test]
fn criterion_1_perfect_learning() {
    report(verify::perfect_learning());
}

#[test]
fn criterion_2_lossless_reconstruction() {
    report(verify::lossless_reconstruction());
}

#[test]
fn criterion_3_oracle_equivalence() {
    report(verify::oracle_equivalence());
}

#[test]
fn criterion_4_closed_form_eigen() {
    report(verify::closed_form_eigen());
}

#[test]
fn criterion_5_replay_identity() {
    report(verify::replay_identity());
}

#[test]
fn criterion_6_transfer_matrix() {
    report(verify::transfer_matrix());
}

#[test]
fn criterion_7_sampler_exactness() {
    report(verify::sampler_exactness());
}

#[test]
fn criterion_8_hypergeometric_estimator() {
    report(verify::hypergeometric_estimator());
}

#[test]
fn criterion_9_figure_shape() {
    let dir = tempfile::tempdir().unwrap();
    report(verify::figure_shape(dir.path()));
}
