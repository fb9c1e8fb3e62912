//! Runs every acceptance criterion and prints one PASS/FAIL line per criterion.

mod common;

use std::time::Instant;

fn main() {
    let criteria: [(&str, fn() -> common::Check); 9] = [
        ("gradient suite", common::gradient_suite),
        ("normalization suite", common::normalization_suite),
        ("toy pattern attention", common::toy_reproduction),
        ("graphical lasso oracle", common::glasso_oracle),
        ("graph recovery", common::graph_recovery),
        ("ablation ladder", common::ablation_ladder),
        ("standard attention equivalence", common::standard_attention_equivalence),
        ("metrics conformance", common::metrics_conformance),
        ("determinism and persistence", common::determinism),
    ];
    let only: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, run) in criteria {
        if !only.is_empty() && !only.iter().any(|o| name.contains(o.as_str())) {
            continue;
        }
        let start = Instant::now();
        let result = run();
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("PASS {name} ({secs:.1}s): {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name} ({secs:.1}s): {detail}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
