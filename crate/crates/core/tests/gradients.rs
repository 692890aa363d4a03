//! Reverse-mode gradients against central finite differences.

mod common;

use common::{suite, FD_REL_TOL};
use rebq::backbone::InjectionMode;
use rebq::pipeline::VariantSpec;

fn assert_small(name: &str, e: f64) {
    assert!(e < FD_REL_TOL, "{name}: relative error {e:e}");
}

#[test]
fn primitive_operations() {
    let results = suite::primitive_ops();
    let bad: Vec<_> = results.iter().filter(|(_, e)| e.is_nan() || *e >= FD_REL_TOL).collect();
    assert!(bad.is_empty(), "{bad:?}");
}

#[test]
fn prompt_selection() {
    assert_small("select_prompt", suite::selection());
}

#[test]
fn prompted_backbone_forward() {
    assert_small("attention", suite::injected_forward(InjectionMode::Attention));
    assert_small("input", suite::injected_forward(InjectionMode::Input));
}

#[test]
fn backbone_pretraining_loss() {
    assert_small("pretraining", suite::backbone_pretraining());
}

#[test]
fn total_loss_canonical() {
    assert_small("rebq", suite::end_to_end(VariantSpec::canonical(), 0.5));
}

#[test]
fn total_loss_variants() {
    for name in ["naive", "no_memory_pool", "unified_pool", "no_modality_specific_query"] {
        assert_small(name, suite::end_to_end(VariantSpec::preset(name).unwrap(), 0.5));
    }
}
