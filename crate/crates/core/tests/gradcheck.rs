//! Finite-difference gradient checks, one test per primitive family.

use dac_vlm::block::VariantKind;

#[path = "common/fd.rs"]
mod fd;

fn over_seeds(f: fn(u64) -> fd::Errors) {
    for seed in 0..fd::SEEDS {
        fd::assert_within(&f(seed));
    }
}

#[test]
fn matmul_and_transpose() {
    over_seeds(fd::matmul_and_transpose);
}

#[test]
fn elementwise_ops() {
    over_seeds(fd::elementwise);
}

#[test]
fn layer_norm_and_softmax() {
    over_seeds(fd::normalizers);
}

#[test]
fn conv2d() {
    over_seeds(fd::conv2d);
}

#[test]
fn cross_entropy_with_mask() {
    over_seeds(fd::cross_entropy);
}

#[test]
fn select_rows_gathers_and_accumulates() {
    over_seeds(fd::select_rows);
}

#[test]
fn rope() {
    over_seeds(fd::rope);
}

#[test]
fn causal_attention_over_packed_segments() {
    over_seeds(fd::attention);
}

#[test]
fn block_forward_every_variant() {
    for kind in VariantKind::ALL {
        for seed in 0..4 {
            fd::assert_within(&fd::block(kind, seed));
        }
    }
}

#[test]
fn rel_err_is_scale_free() {
    assert_eq!(fd::rel_err(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
    let a = fd::rel_err(&[1.0, 2.0], &[1.1, 2.0]);
    let b = fd::rel_err(&[10.0, 20.0], &[11.0, 20.0]);
    assert!((a - b).abs() < 1e-12);
}
