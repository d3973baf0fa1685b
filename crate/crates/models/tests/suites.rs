//! Finite-difference suites over twenty seeds.

use std::time::Instant;

use baris_models::suites::{bace_suite, decoder_suite, era_suite};

fn run(name: &str, suite: fn(u64) -> baris_core::Result<Vec<baris_core::suite::SuiteCheck>>) {
    let start = Instant::now();
    let mut worst = (0.0f64, String::new());
    for seed in 0..20 {
        for check in suite(seed).unwrap() {
            assert!(check.passed(), "{name} seed {seed} {}: {:e} ({} vs {})", check.name, check.max_rel_error, check.analytic, check.numeric);
            if check.max_rel_error > worst.0 {
                worst = (check.max_rel_error, format!("{} ({:e} vs {:e})", check.name, check.analytic, check.numeric));
            }
        }
    }
    println!("{name}: worst {:e} at {} in {:?}", worst.0, worst.1, start.elapsed());
}

#[test]
fn decoder_gradients() {
    run("decoder", decoder_suite);
}

#[test]
fn era_gradients() {
    run("era", era_suite);
}

#[test]
fn bace_gradients() {
    run("bace", bace_suite);
}
