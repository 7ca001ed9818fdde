//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.
//!
//! Criteria can be selected by number: `cargo test --test acceptance -- 1 3`.

mod gradients;
mod oracles;
mod pipeline;

use std::process::ExitCode;
use std::time::{Duration, Instant};

use xbl_core::Result;

struct Verdict {
    passed: bool,
    detail: String,
}

fn criterion_1() -> Result<Verdict> {
    let start = Instant::now();
    let mut failures = Vec::new();
    let mut worst32 = 0.0f64;
    let mut worst64 = 0.0f64;
    for case in gradients::CASES {
        let errs = gradients::worst_errors(case)?;
        let (e32, e64) = (errs.f32, errs.f64);
        let note = if errs.shortened > 0 {
            format!("  ({} stencils shortened at kinks)", errs.shortened)
        } else {
            String::new()
        };
        println!("    {:<20} f32 {e32:.2e}  f64 {e64:.2e}{note}", case.name);
        if !(e32 < gradients::TOL_F32) || !(e64 < gradients::TOL_F64) {
            failures.push(case.name);
        }
        worst32 = worst32.max(e32);
        worst64 = worst64.max(e64);
    }
    let elapsed = start.elapsed();
    let fast = elapsed < Duration::from_secs(60);
    Ok(Verdict {
        passed: failures.is_empty() && fast,
        detail: format!(
            "{} cases x {} trials, worst f32 {worst32:.2e}, worst f64 {worst64:.2e}, {:.1} s{}",
            gradients::CASES.len(),
            gradients::TRIALS,
            elapsed.as_secs_f64(),
            if failures.is_empty() {
                String::new()
            } else {
                format!(", failing: {}", failures.join(" "))
            }
        ),
    })
}

fn criterion_2() -> Result<Verdict> {
    let errors = oracles::loss_errors()?;
    let mut parts = Vec::new();
    let mut passed = true;
    for (name, e) in &errors {
        println!("    {name:<22} worst relative error {e:.2e}");
        passed &= *e < oracles::LOSS_TOL;
        parts.push(format!("{name} {e:.1e}"));
    }
    Ok(Verdict {
        passed,
        detail: format!("{} seeded inputs each, {}", oracles::INPUTS, parts.join(", ")),
    })
}

fn criterion_3() -> Result<Verdict> {
    let (wrong, constant, tied) = oracles::ap_disagreements()?;
    Ok(Verdict {
        passed: wrong == 0,
        detail: format!(
            "{wrong} of {} triples differ ({constant} constant maps, {tied} with ties)",
            oracles::AP_TRIPLES
        ),
    })
}

fn criterion_4() -> Result<Verdict> {
    let u = pipeline::unrefined(0)?;
    let gap = u.clean_acc - u.swapped_acc;
    Ok(Verdict {
        passed: u.train_acc >= pipeline::TRAIN_MIN
            && u.swapped_acc <= u.clean_acc - pipeline::RELIANCE_GAP
            && u.elapsed < pipeline::TRAIN_BUDGET,
        detail: format!(
            "seed 0 train acc {:.3}, clean {:.3}, swapped {:.3} (gap {gap:.3}), training {:.1} s",
            u.train_acc,
            u.clean_acc,
            u.swapped_acc,
            u.elapsed.as_secs_f64()
        ),
    })
}

fn criterion_5() -> Result<Verdict> {
    let runs = pipeline::seed_runs()?;
    let ap = pipeline::median(runs.iter().map(|r| r.after.ap_clean - r.before.ap_clean).collect());
    let acc = pipeline::median(runs.iter().map(|r| r.after.acc_clean - r.before.acc_clean).collect());
    Ok(Verdict {
        passed: ap >= pipeline::AP_GAIN && acc >= pipeline::ACC_DROP,
        detail: format!(
            "median over {} seeds: AP change {ap:+.3} (need >= {:+.2}), clean accuracy change {acc:+.3} (need >= {:+.2})",
            runs.len(),
            pipeline::AP_GAIN,
            pipeline::ACC_DROP
        ),
    })
}

fn criterion_6() -> Result<Verdict> {
    let runs = pipeline::seed_runs()?;
    let change = pipeline::median(
        runs.iter()
            .map(|r| r.after.confounder_mass - r.before.confounder_mass)
            .collect(),
    );
    let before = pipeline::median(runs.iter().map(|r| r.before.confounder_mass).collect());
    let after = pipeline::median(runs.iter().map(|r| r.after.confounder_mass).collect());
    Ok(Verdict {
        passed: change < 0.0 && after < before,
        detail: format!(
            "test_swapped confounder mass, median over {} seeds: {before:.4} -> {after:.4}, median change {change:+.4}",
            runs.len()
        ),
    })
}

fn criterion_7() -> Result<Verdict> {
    let c = pipeline::determinism()?;
    let kinds: Vec<String> = c.by_extension.iter().map(|(e, n)| format!("{n} .{e}")).collect();
    let mut detail = format!("{} files compared ({})", c.files, kinds.join(", "));
    if !c.differing.is_empty() {
        let names: Vec<String> = c.differing.iter().take(5).map(|p| p.display().to_string()).collect();
        detail.push_str(&format!("; {} differ: {}", c.differing.len(), names.join(" ")));
    }
    let has = |e: &str| c.by_extension.contains_key(e);
    Ok(Verdict {
        passed: c.differing.is_empty() && has("xblw") && has("csv") && has("pgm"),
        detail,
    })
}

fn criterion_8() -> Result<Verdict> {
    let mut passed = true;
    let mut parts = Vec::new();

    let ap = invariants::ap_rescaling_failures()?;
    passed &= ap == 0;
    parts.push(format!(
        "AP rescaling {ap} of {} changed",
        invariants::AP_MAPS * 4
    ));

    let (tie, tried) = invariants::triplet_tie_failures()?;
    passed &= tie == 0;
    parts.push(format!("triplet tie {tie} of {tried} not exactly the margin"));

    for (name, e, tol) in invariants::permutation_errors()? {
        println!("    batch order, {name:<22} worst relative change {e:.2e} (tolerance {tol:.0e})");
        passed &= e <= tol;
    }
    parts.push(format!("batch order over {} shuffles", invariants::PERMUTATIONS));

    let (problems, prefixes) = invariants::freeze_violations()?;
    for p in &problems {
        println!("    {p}");
    }
    passed &= problems.is_empty();
    parts.push(format!(
        "freeze contract {} violations over {prefixes} prefixes x {} Adam steps",
        problems.len(),
        invariants::ADAM_STEPS
    ));
    Ok(Verdict {
        passed,
        detail: parts.join(", "),
    })
}

type Criterion = (u32, &'static str, fn() -> Result<Verdict>);

const CRITERIA: &[Criterion] = &[
    (1, "gradient soundness", criterion_1),
    (2, "loss oracles", criterion_2),
    (3, "activation precision oracle", criterion_3),
    (4, "decoy reliance", criterion_4),
    (5, "refinement raises activation precision", criterion_5),
    (6, "confounder mass falls", criterion_6),
    (7, "determinism", criterion_7),
    (8, "invariance suite", criterion_8),
];

fn main() -> ExitCode {
    let selected: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut all_passed = true;
    for &(n, title, run) in CRITERIA {
        if !selected.is_empty() && !selected.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let verdict = run().unwrap_or_else(|e| Verdict {
            passed: false,
            detail: format!("error: {e}"),
        });
        all_passed &= verdict.passed;
        println!(
            "criterion {n} {} {title}: {} [{:.1} s]",
            if verdict.passed { "PASS" } else { "FAIL" },
            verdict.detail,
            start.elapsed().as_secs_f64()
        );
    }
    if all_passed {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
