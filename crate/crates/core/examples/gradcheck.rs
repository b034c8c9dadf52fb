//! Verify every backward rule, layer and model loss against central finite
//! differences, then show that a deliberately wrong rule is caught.
//!
//! ```text
//! cargo run --release -p saits --example gradcheck
//! ```

use std::time::Instant;

use saits::config::SaitsConfig;
use saits::gradcheck::{corrupted_case, full_suite, run_cases};
use saits::tensor::GradCheckOptions;

fn main() -> anyhow::Result<()> {
    let start = Instant::now();
    let config = SaitsConfig::gradcheck(4, 3);
    let report = run_cases(&full_suite(&config, 0)?, GradCheckOptions::default())?;
    for case in &report.cases {
        println!(
            "{:<7} {:<48} {:>6} elements  max rel error {:.2e}",
            if case.report.passed() { "ok" } else { "FAILED" },
            case.name,
            case.report.checked,
            case.report.max_rel_error
        );
    }
    println!(
        "suite: {} elements, max rel error {:.2e}, {:.1?}",
        report.checked(),
        report.max_rel_error(),
        start.elapsed()
    );

    let control = corrupted_case().run(GradCheckOptions::default())?;
    println!(
        "negative control caught: {} ({} mismatching elements)",
        !control.report.passed(),
        control.report.failures.len()
    );
    anyhow::ensure!(report.passed(), "gradient suite failed");
    Ok(())
}
