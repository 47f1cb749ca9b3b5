//! Finite-difference gradient checks for primitives and whole networks.

mod common;

use common::gradcheck::{assert_network, check_primitives, NetCase};
use spikekit::architecture::{ResidualMode, StemConfig};

#[test]
fn every_primitive_matches_finite_differences() {
    for (name, n, worst) in check_primitives() {
        println!("{name:<28} coords={n:<3} max_rel_err={worst:.2e}");
    }
}

#[test]
fn relaxed_two_block_network_matches_finite_differences() {
    let summary = assert_network(NetCase { stem: StemConfig::sps_small(), residual: ResidualMode::Add, learnable_scale: false, seed: 5 });
    println!("{summary}");
}

#[test]
fn relaxed_convolutional_stem_network_matches_finite_differences() {
    let summary = assert_network(NetCase { stem: StemConfig::scs_small(), residual: ResidualMode::Iand, learnable_scale: true, seed: 9 });
    println!("{summary}");
}
