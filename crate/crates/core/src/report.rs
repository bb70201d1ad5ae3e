//! Plain-text reports: a reproducibility header, column-aligned tables and a
//! trailing `[values]` section of `key = value` lines.
//!
//! Nothing in a report depends on wall-clock time or absolute paths, so
//! reruns with the same inputs and seed produce identical bytes. Timings go
//! to separate log files.

use std::fmt::Write as _;

use crate::eval::{EvalReport, ImageVerdict};
use crate::localize::BBox;
use crate::patch::PatchCorpus;
use crate::train::TrialSummary;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Header {
    pub command: String,
    pub seed: Option<u64>,
    pub config: Vec<(String, String)>,
}

impl Header {
    pub fn new(command: &str, seed: Option<u64>) -> Self {
        Header {
            command: command.to_string(),
            seed,
            config: Vec::new(),
        }
    }

    pub fn with(mut self, key: &str, value: impl ToString) -> Self {
        self.config.push((key.to_string(), value.to_string()));
        self
    }

    pub fn render(&self) -> String {
        let mut s = format!("# missmarple {VERSION}\n# command: {}\n", self.command);
        match self.seed {
            Some(seed) => {
                let _ = writeln!(s, "# seed: {seed}");
            }
            None => s.push_str("# seed: none\n"),
        }
        for (k, v) in &self.config {
            let _ = writeln!(s, "# config.{k} = {v}");
        }
        s.push('\n');
        s
    }
}

/// Column-aligned table; the first column is left-aligned, the rest right.
#[derive(Clone, Debug, Default)]
pub struct Table {
    pub headers: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(headers: &[&str]) -> Self {
        Table {
            headers: headers.iter().map(|h| h.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn row(&mut self, cells: Vec<String>) {
        self.rows.push(cells);
    }

    pub fn render(&self) -> String {
        let cols = self.headers.len();
        let mut widths: Vec<usize> = self.headers.iter().map(String::len).collect();
        for r in &self.rows {
            for (i, c) in r.iter().enumerate().take(cols) {
                widths[i] = widths[i].max(c.len());
            }
        }
        let line = |cells: &[String]| {
            let mut out = String::new();
            for (i, w) in widths.iter().enumerate() {
                let c = cells.get(i).map(String::as_str).unwrap_or("");
                if i > 0 {
                    out.push_str("  ");
                }
                if i == 0 {
                    let _ = write!(out, "{c:<w$}");
                } else {
                    let _ = write!(out, "{c:>w$}");
                }
            }
            out.trim_end().to_string() + "\n"
        };
        let mut s = line(&self.headers);
        for r in &self.rows {
            s.push_str(&line(r));
        }
        s
    }
}

/// Four decimals, or `undefined`.
pub fn metric(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".to_string(), |x| format!("{x:.4}"))
}

fn values(pairs: &[(String, String)]) -> String {
    let mut s = String::from("[values]\n");
    for (k, v) in pairs {
        let _ = writeln!(s, "{k} = {v}");
    }
    s
}

/// Patch and image counts of a corpus.
pub fn corpus_report(header: &Header, corpus: &PatchCorpus) -> String {
    let (tr, va) = (corpus.train_counts(), corpus.val_counts());
    let total = tr.total() + va.total();
    let pct = |n: usize| if total == 0 { 0.0 } else { 100.0 * n as f64 / total as f64 };
    let mut t = Table::new(&["dataset", "split", "authentic", "spliced", "total", "percent"]);
    t.row(vec![
        corpus.dataset.clone(),
        "train".into(),
        tr.authentic.to_string(),
        tr.spliced.to_string(),
        tr.total().to_string(),
        format!("{:.2}", pct(tr.total())),
    ]);
    t.row(vec![
        corpus.dataset.clone(),
        "val".into(),
        va.authentic.to_string(),
        va.spliced.to_string(),
        va.total().to_string(),
        format!("{:.2}", pct(va.total())),
    ]);
    let test: Vec<String> = corpus.test_images.iter().map(u32::to_string).collect();
    let mut s = header.render();
    s.push_str(&t.render());
    s.push('\n');
    s.push_str(&values(&[
        ("dataset".into(), corpus.dataset.clone()),
        ("patch_size".into(), corpus.patch_size.to_string()),
        ("train_authentic".into(), tr.authentic.to_string()),
        ("train_spliced".into(), tr.spliced.to_string()),
        ("val_authentic".into(), va.authentic.to_string()),
        ("val_spliced".into(), va.spliced.to_string()),
        ("test_images".into(), corpus.test_images.len().to_string()),
        ("test_image_ids".into(), test.join(",")),
    ]));
    s
}

/// Per-iteration rows plus averages, in the layout of a trial table.
pub fn training_report(header: &Header, dataset: &str, trial: &TrialSummary) -> String {
    let mut t = Table::new(&[
        "iteration", "seed", "epochs", "stopped_early", "best_epoch", "train_acc", "train_loss", "val_acc", "val_loss",
    ]);
    for r in &trial.runs {
        let b = r.best();
        t.row(vec![
            r.iteration.to_string(),
            r.seed.to_string(),
            r.history.len().to_string(),
            r.stopped_early.to_string(),
            b.epoch.to_string(),
            format!("{:.4}", b.train_acc),
            format!("{:.4}", b.train_loss),
            format!("{:.4}", b.val_acc),
            format!("{:.4}", b.val_loss),
        ]);
    }
    let best = trial.best_run();
    let mut s = header.render();
    let _ = writeln!(s, "model {} on {dataset}", trial.model);
    s.push_str(&t.render());
    for a in &trial.aborted {
        let _ = writeln!(s, "aborted iteration {} (seed {}): {}", a.iteration, a.seed, a.reason);
    }
    s.push('\n');
    let mut avg = Table::new(&["model", "dataset", "train_acc", "train_loss", "val_acc", "val_loss"]);
    avg.row(trial_average_row(trial, dataset));
    s.push_str(&avg.render());
    s.push('\n');
    s.push_str(&values(&[
        ("model".into(), trial.model.clone()),
        ("dataset".into(), dataset.to_string()),
        ("iterations_completed".into(), trial.runs.len().to_string()),
        ("iterations_aborted".into(), trial.aborted.len().to_string()),
        ("avg_train_acc".into(), format!("{:.4}", trial.averages.train_acc)),
        ("avg_train_loss".into(), format!("{:.4}", trial.averages.train_loss)),
        ("avg_val_acc".into(), format!("{:.4}", trial.averages.val_acc)),
        ("avg_val_loss".into(), format!("{:.4}", trial.averages.val_loss)),
        ("selected_iteration".into(), best.iteration.to_string()),
        ("selected_seed".into(), best.seed.to_string()),
        ("selected_epoch".into(), best.best().epoch.to_string()),
        ("selected_val_acc".into(), format!("{:.4}", best.best().val_acc)),
    ]));
    s
}

fn trial_average_row(trial: &TrialSummary, dataset: &str) -> Vec<String> {
    let a = &trial.averages;
    vec![
        trial.model.clone(),
        dataset.to_string(),
        format!("{:.4}", a.train_acc),
        format!("{:.4}", a.train_loss),
        format!("{:.4}", a.val_acc),
        format!("{:.4}", a.val_loss),
    ]
}

/// One epoch per line, including elapsed wall time. Not deterministic.
pub fn training_log(trial: &TrialSummary) -> String {
    let mut s = String::new();
    for r in &trial.runs {
        for e in &r.history {
            let _ = writeln!(
                s,
                "iteration={} epoch={} train_acc={:.4} train_loss={:.4} val_acc={:.4} val_loss={:.4} elapsed_ms={}",
                r.iteration,
                e.epoch,
                e.train_acc,
                e.train_loss,
                e.val_acc,
                e.val_loss,
                e.elapsed.as_millis()
            );
        }
    }
    s
}

/// One evaluated model in a comparison table.
#[derive(Clone, Debug)]
pub struct EvalRow {
    pub model: String,
    pub dataset: String,
    pub iteration: Option<usize>,
    pub report: EvalReport,
}

fn eval_table(rows: &[EvalRow]) -> Table {
    let mut t = Table::new(&[
        "model", "dataset", "iteration", "T", "TP", "TN", "FP", "FN", "acc", "recall", "prec", "F1", "MCC",
    ]);
    for r in rows {
        let e = &r.report;
        t.row(vec![
            r.model.clone(),
            r.dataset.clone(),
            r.iteration.map_or("-".into(), |i| i.to_string()),
            format!("{:.2}", e.threshold),
            e.tp.to_string(),
            e.tn.to_string(),
            e.fp.to_string(),
            e.fn_.to_string(),
            metric(e.accuracy),
            metric(e.recall),
            metric(e.precision),
            metric(e.f1),
            metric(e.mcc),
        ]);
    }
    t
}

fn eval_values(rows: &[EvalRow]) -> Vec<(String, String)> {
    let mut v = Vec::new();
    for (i, r) in rows.iter().enumerate() {
        let e = &r.report;
        let k = |name: &str| format!("row{}.{name}", i + 1);
        v.push((k("model"), r.model.clone()));
        v.push((k("dataset"), r.dataset.clone()));
        v.push((k("threshold"), format!("{:.2}", e.threshold)));
        for (name, n) in [("tp", e.tp), ("tn", e.tn), ("fp", e.fp), ("fn", e.fn_)] {
            v.push((k(name), n.to_string()));
        }
        for (name, m) in [
            ("accuracy", e.accuracy),
            ("recall", e.recall),
            ("precision", e.precision),
            ("f1", e.f1),
            ("mcc", e.mcc),
        ] {
            v.push((k(name), metric(m)));
        }
    }
    v
}

/// Image-level results of one or more models on held-out images.
pub fn eval_report(header: &Header, rows: &[EvalRow], verdicts: &[(String, Vec<(String, String, ImageVerdict)>)]) -> String {
    let mut s = header.render();
    s.push_str(&eval_table(rows).render());
    s.push_str("\nT is the minimum fraction of windows scoring above 0.5 for a spliced verdict.\n\n");
    for (model, list) in verdicts {
        let _ = writeln!(s, "verdicts of {model}");
        let mut t = Table::new(&["image", "truth", "windows", "fake", "fraction", "verdict"]);
        for (name, truth, v) in list {
            t.row(vec![
                name.clone(),
                truth.clone(),
                v.patches.to_string(),
                v.fake_patches.to_string(),
                format!("{:.4}", v.fake_fraction),
                v.label.as_str().to_string(),
            ]);
        }
        s.push_str(&t.render());
        s.push('\n');
    }
    s.push_str(&values(&eval_values(rows)));
    s
}

/// Training averages and test metrics of several models side by side, with
/// the direction of every metric difference against the first row.
pub fn comparative_report(header: &Header, trials: &[(&TrialSummary, &str)], rows: &[EvalRow]) -> String {
    let mut s = header.render();
    s.push_str("training (averages of per-iteration best epochs)\n");
    let mut t = Table::new(&["model", "dataset", "train_acc", "train_loss", "val_acc", "val_loss"]);
    for (trial, dataset) in trials {
        t.row(trial_average_row(trial, dataset));
    }
    s.push_str(&t.render());
    s.push_str("\ntest images\n");
    s.push_str(&eval_table(rows).render());
    if let Some((base, rest)) = rows.split_first() {
        s.push('\n');
        for r in rest {
            let metrics = [
                ("acc", base.report.accuracy, r.report.accuracy),
                ("recall", base.report.recall, r.report.recall),
                ("prec", base.report.precision, r.report.precision),
                ("F1", base.report.f1, r.report.f1),
                ("MCC", base.report.mcc, r.report.mcc),
            ];
            for (name, a, b) in metrics {
                let dir = match (a, b) {
                    (Some(a), Some(b)) if b > a => "higher",
                    (Some(a), Some(b)) if b < a => "lower",
                    (Some(_), Some(_)) => "equal",
                    _ => "undefined",
                };
                let _ = writeln!(
                    s,
                    "{} vs {} on {}: {name} {dir} ({} vs {})",
                    r.model,
                    base.model,
                    r.dataset,
                    metric(b),
                    metric(a)
                );
            }
        }
    }
    s.push('\n');
    s.push_str(&values(&eval_values(rows)));
    s
}

/// Box coordinates per localized image.
pub fn localize_report(header: &Header, rows: &[(String, ImageVerdict, Option<BBox>)]) -> String {
    let mut s = header.render();
    let mut t = Table::new(&["image", "fraction", "verdict", "top", "left", "bottom", "right"]);
    for (name, v, b) in rows {
        let cells = match b {
            Some(b) => [b.top, b.left, b.bottom, b.right].map(|x| x.to_string()),
            None => ["-", "-", "-", "-"].map(String::from),
        };
        let mut row = vec![name.clone(), format!("{:.4}", v.fake_fraction), v.label.as_str().to_string()];
        row.extend(cells);
        t.row(row);
    }
    s.push_str(&t.render());
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::compute_metrics;

    #[test]
    fn header_and_table_layout() {
        let h = Header::new("cost", Some(3)).with("preset", "table3");
        let r = h.render();
        assert!(r.starts_with("# missmarple "));
        assert!(r.contains("# seed: 3\n# config.preset = table3\n"));
        let mut t = Table::new(&["a", "bb"]);
        t.row(vec!["long".into(), "1".into()]);
        assert_eq!(t.render(), "a     bb\nlong   1\n");
    }

    #[test]
    fn undefined_metrics_are_spelled_out() {
        assert_eq!(metric(None), "undefined");
        assert_eq!(metric(Some(0.84088)), "0.8409");
        let rows = vec![EvalRow {
            model: "MM-V".into(),
            dataset: "d".into(),
            iteration: Some(2),
            report: EvalReport {
                threshold: 0.05,
                ..compute_metrics(0, 3, 0, 0).unwrap()
            },
        }];
        let s = eval_report(&Header::new("eval", None), &rows, &[]);
        assert!(s.contains("undefined"));
        assert!(s.contains("row1.recall = undefined"));
    }

    #[test]
    fn comparison_states_direction() {
        let row = |model: &str, tp| EvalRow {
            model: model.into(),
            dataset: "fine".into(),
            iteration: None,
            report: EvalReport {
                threshold: 0.1,
                ..compute_metrics(tp, 5, 1, 6 - tp).unwrap()
            },
        };
        let s = comparative_report(&Header::new("compare", Some(1)), &[], &[row("MM-V", 3), row("MM-V-A", 4)]);
        assert!(s.contains("MM-V-A vs MM-V on fine: recall higher"), "{s}");
    }
}
