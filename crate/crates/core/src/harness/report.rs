//! Result files: CSV tables, the summary, and the timing log.

use std::fmt::Write as _;

use crate::metatest::{mean_std, EvalReport};

/// Formats with six significant digits.
pub fn sig6(x: f64) -> String {
    if x == 0.0 {
        return "0.00000".into();
    }
    if !x.is_finite() {
        return x.to_string();
    }
    let sci = format!("{x:.5e}");
    let exp: i32 = sci.rsplit('e').next().and_then(|e| e.parse().ok()).unwrap_or(0);
    if (-4..=5).contains(&exp) {
        format!("{:.*}", (5 - exp).max(0) as usize, x)
    } else {
        sci
    }
}

pub const EVAL_HEADER: &str = "seed,mode,task_index,accuracy\n";

/// Per-task rows followed by `mean` and `std` summary rows.
pub fn eval_rows(out: &mut String, seed: u64, label: &str, report: &EvalReport) {
    for (i, acc) in report.accuracies.iter().enumerate() {
        let _ = writeln!(out, "{seed},{label},{i},{}", sig6(*acc));
    }
    let _ = writeln!(out, "{seed},{label},mean,{}", sig6(report.mean));
    let _ = writeln!(out, "{seed},{label},std,{}", sig6(report.std));
}

pub const DELTA_HEADER: &str = "seed,layer,mean_delta_l2\n";

pub fn delta_rows(out: &mut String, seed: u64, deltas: &[(String, f64)]) {
    for (layer, d) in deltas {
        let _ = writeln!(out, "{seed},{layer},{}", sig6(*d));
    }
}

/// `mean=... std=... n=...` over per-seed means.
pub fn across(means: &[f64]) -> String {
    let (m, s) = mean_std(means);
    format!("mean={} std={} n={}", sig6(m), sig6(s), means.len())
}

/// Reads `(seed, mode, task_index, accuracy)` rows back from an eval CSV,
/// skipping the header and the summary rows.
pub fn parse_eval_csv(text: &str) -> Vec<(u64, String, usize, f64)> {
    text.lines()
        .skip(1)
        .filter_map(|line| {
            let mut f = line.split(',');
            let seed = f.next()?.parse().ok()?;
            let mode = f.next()?.to_string();
            let index = f.next()?.parse().ok()?;
            let acc = f.next()?.parse().ok()?;
            Some((seed, mode, index, acc))
        })
        .collect()
}
