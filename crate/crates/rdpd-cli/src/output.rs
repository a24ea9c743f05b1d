//! Result writers: every artifact is emitted twice, as JSON records for
//! scripts and as aligned text for humans.

use std::fmt::Write as _;
use std::path::Path;

use rdpd::metrics::EvalResult;
use rdpd::train::{SeedOutcome, SummaryStats};
use rdpd::{Error, Result};

pub fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("json serializes");
    std::fs::write(path, text + "\n").map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

pub fn write_jsonl<T: serde::Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut text = String::new();
    for row in rows {
        text.push_str(&serde_json::to_string(row).expect("json serializes"));
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

pub fn eval_text(label: &str, eval: &EvalResult) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{label}");
    let _ = writeln!(s, "  n_samples {:>8}", eval.n_samples);
    let _ = writeln!(s, "  seed      {:>8}", eval.seed);
    let _ = writeln!(s, "  roc_auc   {:>10.6}", eval.roc_auc);
    let _ = writeln!(s, "  pr_auc    {:>10.6}", eval.pr_auc);
    let _ = writeln!(s, "  macro_f1  {:>10.6}", eval.macro_f1);
    let _ = writeln!(s, "  {:<16} {:>6} {:>10} {:>10} {:>10}", "class", "n_pos", "roc_auc", "pr_auc", "f1");
    for c in &eval.per_class {
        let fmt = |v: Option<f64>| match v {
            Some(x) => format!("{x:>10.6}"),
            None => format!("{:>10}", "absent"),
        };
        let _ = writeln!(
            s,
            "  {:<16} {:>6} {} {} {:>10.6}",
            c.class_name,
            c.n_positive,
            fmt(c.roc_auc),
            fmt(c.pr_auc),
            c.f1
        );
    }
    s
}

pub fn seed_rows_text(mode: &str, rows: &[SeedOutcome], summary: &SummaryStats) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<10} {:>6} {:>10} {:>10} {:>10} {:>12} {:>12}",
        "mode", "seed", "roc_auc", "pr_auc", "macro_f1", "best_epoch", "valid_metric"
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{:<10} {:>6} {:>10.6} {:>10.6} {:>10.6} {:>12} {:>12.6}",
            mode, r.seed, r.eval.roc_auc, r.eval.pr_auc, r.eval.macro_f1, r.best_epoch, r.best_valid_metric
        );
    }
    let _ = writeln!(
        s,
        "{:<10} {:>6} {:>4.4}±{:>.4} {:>4.4}±{:>.4} {:>4.4}±{:>.4}",
        mode,
        "mean",
        summary.roc_auc_mean,
        summary.roc_auc_std,
        summary.pr_auc_mean,
        summary.pr_auc_std,
        summary.macro_f1_mean,
        summary.macro_f1_std
    );
    s
}
