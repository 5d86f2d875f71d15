use std::time::Instant;

use cadunet::oracles::{run_oracle_suite, Scope};

#[test]
fn full_oracle_suite_agrees() {
    let start = Instant::now();
    let report = run_oracle_suite(Scope::All);
    print!("{report}");
    let failures: Vec<String> = report.failures().map(|r| r.to_string()).collect();
    assert!(failures.is_empty(), "oracle failures:\n{}", failures.join("\n"));
    assert!(start.elapsed().as_secs() < 60);
}

#[test]
fn each_scope_runs_alone() {
    for (scope, n) in [(Scope::Complex, 2), (Scope::Dft, 1), (Scope::Attention, 4), (Scope::Metrics, 3)] {
        assert_eq!(run_oracle_suite(scope).results.len(), n, "{scope}");
    }
}
