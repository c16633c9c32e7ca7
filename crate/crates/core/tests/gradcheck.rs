//! Reverse-mode gradients against central differences in f64.

mod common;

use common::{gradient_suite, MAX_REL_ERR};

#[test]
fn every_op_matches_finite_differences() {
    let results = gradient_suite(2024);
    assert!(results.len() >= 20);
    for (name, err) in &results {
        println!("{:<28} max rel err {:.3e}", name, err);
    }
    let bad: Vec<_> = results.iter().filter(|(_, e)| !(*e < MAX_REL_ERR)).collect();
    assert!(bad.is_empty(), "gradient mismatch: {:?}", bad);
}
