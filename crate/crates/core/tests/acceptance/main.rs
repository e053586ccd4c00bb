//! Acceptance run: every criterion once, in order, one line each.
//!
//! Runs as a plain binary so the long experiments share their artifacts.
//! `ACCEPTANCE_ONLY=1,4,8` restricts the run to the listed criteria.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

#[path = "../common/mod.rs"]
mod common;
mod properties;
mod study;
mod training;

use std::panic::{self, AssertUnwindSafe};
use std::time::Instant;

/// `Ok(detail)` on success, `Err(reason)` on failure.
pub type Check = Result<String, String>;

#[macro_export]
macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

struct Criterion {
    id: usize,
    name: &'static str,
    budget_secs: f64,
    run: fn() -> Check,
}

const CRITERIA: [Criterion; 9] = [
    Criterion {
        id: 1,
        name: "loss decomposition and gradients",
        budget_secs: 60.0,
        run: properties::loss_decomposition,
    },
    Criterion {
        id: 2,
        name: "memory selection equals enumeration",
        budget_secs: 60.0,
        run: properties::memory_oracle,
    },
    Criterion {
        id: 3,
        name: "guidance no-op and determinism",
        budget_secs: 120.0,
        run: properties::guidance_noop,
    },
    Criterion {
        id: 4,
        name: "guidance analytic cases",
        budget_secs: 10.0,
        run: properties::guidance_analytic,
    },
    Criterion {
        id: 5,
        name: "distillation dominance",
        budget_secs: 300.0,
        run: training::distillation_dominance,
    },
    Criterion {
        id: 6,
        name: "forgetting direction, full vs fine-tuning",
        budget_secs: 45.0 * 60.0,
        run: study::forgetting_direction,
    },
    Criterion {
        id: 7,
        name: "attention guidance lifts neglected tokens",
        budget_secs: 600.0,
        run: study::neglect_mitigation,
    },
    Criterion {
        id: 8,
        name: "metric identities",
        budget_secs: 10.0,
        run: properties::metric_identities,
    },
    Criterion {
        id: 9,
        name: "persistence and resume",
        budget_secs: 120.0,
        run: training::persistence,
    },
];

fn main() {
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    let mut ran = 0;
    for c in CRITERIA.iter().filter(|c| only.as_ref().is_none_or(|o| o.contains(&c.id))) {
        let start = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(c.run)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        let outcome = match outcome {
            Ok(d) if secs > c.budget_secs => Err(format!("{d}; over the {:.0} s budget", c.budget_secs)),
            o => o,
        };
        let (tag, detail) = match &outcome {
            Ok(d) => ("PASS", d),
            Err(e) => ("FAIL", e),
        };
        println!("{tag} criterion {}: {} - {detail} [{secs:.1} s]", c.id, c.name);
        ran += 1;
        failed += usize::from(outcome.is_err());
    }
    println!("acceptance: {} of {ran} criteria passed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
