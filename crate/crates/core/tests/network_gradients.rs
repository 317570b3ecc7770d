//! Finite-difference checks of whole-network losses with respect to the
//! parameter store.

mod common;

use common::tiny_loss_check;
use prunenet::backbones::BuildVariant;

#[test]
fn dense_tiny_loss_matches_finite_differences() {
    for seed in 0..3 {
        let (worst, checked) = tiny_loss_check(BuildVariant::Unpruned, seed, 60);
        assert!(worst < 1e-4, "seed {seed}: {worst}");
        assert!(checked >= 30, "seed {seed}: only {checked} smooth coordinates");
    }
}

#[test]
fn gated_tiny_loss_matches_finite_differences() {
    for seed in 0..3 {
        let (worst, checked) = tiny_loss_check(BuildVariant::Adaptive, seed, 80);
        assert!(worst < 1e-4, "seed {seed}: {worst}");
        assert!(checked >= 40, "seed {seed}: only {checked} smooth coordinates");
    }
}
