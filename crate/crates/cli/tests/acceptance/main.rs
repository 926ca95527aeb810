//! Acceptance checks, one line per criterion.
//!
//! Criteria 9, 10 and 12 train models for tens of minutes to hours; they
//! run only with `SCBCT_ACCEPTANCE_SLOW=1`. `SCBCT_ACCEPTANCE_ONLY=9,10`
//! restricts the run to the listed criteria.

mod criteria;
mod desk;
mod oracles;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

pub type Outcome = Result<String, String>;

#[macro_export]
macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

struct Criterion {
    id: usize,
    name: &'static str,
    slow: bool,
    run: fn(&mut desk::Shared) -> Outcome,
}

const CRITERIA: &[Criterion] = &[
    Criterion { id: 1, name: "shape contract", slow: false, run: criteria::shape_contract },
    Criterion { id: 2, name: "gaussian bias", slow: false, run: criteria::gaussian_bias },
    Criterion { id: 3, name: "neighbor attention", slow: false, run: criteria::attention },
    Criterion { id: 4, name: "gradient suite", slow: false, run: criteria::gradients },
    Criterion { id: 5, name: "knn oracle", slow: false, run: criteria::knn_oracle },
    Criterion { id: 6, name: "interpolation", slow: false, run: criteria::interpolation },
    Criterion { id: 7, name: "projector physics", slow: false, run: criteria::projector },
    Criterion { id: 8, name: "sart", slow: false, run: criteria::sart },
    Criterion { id: 9, name: "desk overfit", slow: true, run: desk::overfit },
    Criterion { id: 10, name: "trans2 vs trans", slow: true, run: desk::variants },
    Criterion { id: 11, name: "determinism", slow: false, run: criteria::determinism },
    Criterion { id: 12, name: "ablation harness", slow: true, run: desk::ablation },
];

fn main() {
    let slow = std::env::var("SCBCT_ACCEPTANCE_SLOW").is_ok_and(|v| v == "1");
    let only: Option<Vec<usize>> = std::env::var("SCBCT_ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let mut shared = desk::Shared::default();
    let mut failed = 0;
    for c in CRITERIA {
        if only.as_ref().is_some_and(|o| !o.contains(&c.id)) {
            continue;
        }
        if c.slow && !slow {
            println!("SKIP {:>2} {}: slow, set SCBCT_ACCEPTANCE_SLOW=1", c.id, c.name);
            continue;
        }
        let t = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(|| (c.run)(&mut shared)))
            .unwrap_or_else(|p| {
                let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
                Err(format!("panicked: {}", msg.unwrap_or_default()))
            });
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {:>2} {}: {detail} [{secs:.1} s]", c.id, c.name),
            Err(detail) => {
                failed += 1;
                println!("FAIL {:>2} {}: {detail} [{secs:.1} s]", c.id, c.name);
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
