//! Result files and plots.
//!
//! Experiments write a machine-readable `summary.json` plus per-condition
//! CSV curves; `render_*` turns those back into SVG line plots and CSV
//! tables without re-running any training. All output is built from plain
//! string formatting with fixed precision, so identical inputs produce
//! byte-identical files.

use std::fmt::Write as _;
use std::path::Path;

use crate::harness::{ConditionResult, ConvergenceOutcome, ExtendOutcome};

#[derive(Debug, thiserror::Error)]
pub enum ReportError {
    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("missing result files in {dir}: expected one of {expected:?}")]
    MissingSummary { dir: String, expected: Vec<String> },
    #[error("summary parse error: {0}")]
    Parse(#[from] serde_json::Error),
}

fn write_file(path: &Path, content: &str) -> Result<(), ReportError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|source| ReportError::Io {
            path: parent.display().to_string(),
            source,
        })?;
    }
    std::fs::write(path, content).map_err(|source| ReportError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub struct Series<'a> {
    pub label: &'a str,
    pub points: &'a [(f64, f64)],
}

const PALETTE: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b",
];

fn fmt_tick(v: f64) -> String {
    if v == 0.0 {
        "0".to_string()
    } else if v.abs() >= 1000.0 {
        format!("{v:.0}")
    } else if v.abs() >= 1.0 {
        format!("{v:.2}")
    } else {
        format!("{v:.3}")
    }
}

/// A fixed-size line chart. Deterministic: same series, same bytes.
pub fn line_chart_svg(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    const W: f64 = 640.0;
    const H: f64 = 400.0;
    const L: f64 = 64.0;
    const R: f64 = 150.0;
    const T: f64 = 36.0;
    const B: f64 = 48.0;
    let plot_w = W - L - R;
    let plot_h = H - T - B;

    let all: Vec<(f64, f64)> = series.iter().flat_map(|s| s.points.iter().copied()).collect();
    let (mut x0, mut x1) = all
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
            (lo.min(p.0), hi.max(p.0))
        });
    let (mut y0, mut y1) = all
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
            (lo.min(p.1), hi.max(p.1))
        });
    if all.is_empty() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x0 == x1 {
        x1 = x0 + 1.0;
    }
    if y0 == y1 {
        y1 = y0 + 1.0;
    }
    let pad = (y1 - y0) * 0.05;
    let (y0, y1) = (y0 - pad, y1 + pad);

    let sx = |x: f64| L + (x - x0) / (x1 - x0) * plot_w;
    let sy = |y: f64| T + (y1 - y) / (y1 - y0) * plot_h;

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">"
    );
    let _ = writeln!(svg, "<rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>");
    let _ = writeln!(
        svg,
        "<text x=\"{:.1}\" y=\"22\" font-family=\"sans-serif\" font-size=\"15\" text-anchor=\"middle\">{title}</text>",
        L + plot_w / 2.0
    );

    // Axes, ticks, grid.
    let _ = writeln!(
        svg,
        "<rect x=\"{L:.1}\" y=\"{T:.1}\" width=\"{plot_w:.1}\" height=\"{plot_h:.1}\" fill=\"none\" stroke=\"#333\" stroke-width=\"1\"/>"
    );
    for i in 0..=4 {
        let fx = x0 + (x1 - x0) * i as f64 / 4.0;
        let fy = y0 + (y1 - y0) * i as f64 / 4.0;
        let gx = sx(fx);
        let gy = sy(fy);
        let _ = writeln!(
            svg,
            "<line x1=\"{gx:.1}\" y1=\"{T:.1}\" x2=\"{gx:.1}\" y2=\"{:.1}\" stroke=\"#ddd\" stroke-width=\"0.5\"/>",
            T + plot_h
        );
        let _ = writeln!(
            svg,
            "<line x1=\"{L:.1}\" y1=\"{gy:.1}\" x2=\"{:.1}\" y2=\"{gy:.1}\" stroke=\"#ddd\" stroke-width=\"0.5\"/>",
            L + plot_w
        );
        let _ = writeln!(
            svg,
            "<text x=\"{gx:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"middle\">{}</text>",
            T + plot_h + 16.0,
            fmt_tick(fx)
        );
        let _ = writeln!(
            svg,
            "<text x=\"{:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"end\">{}</text>",
            L - 6.0,
            gy + 4.0,
            fmt_tick(fy)
        );
    }
    let _ = writeln!(
        svg,
        "<text x=\"{:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"middle\">{x_label}</text>",
        L + plot_w / 2.0,
        H - 10.0
    );
    let _ = writeln!(
        svg,
        "<text x=\"16\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"middle\" transform=\"rotate(-90 16 {:.1})\">{y_label}</text>",
        T + plot_h / 2.0,
        T + plot_h / 2.0
    );

    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        if !s.points.is_empty() {
            let mut path = String::new();
            for (j, (x, y)) in s.points.iter().enumerate() {
                let _ = write!(
                    path,
                    "{}{:.2},{:.2}",
                    if j == 0 { "M" } else { " L" },
                    sx(*x),
                    sy(*y)
                );
            }
            let _ = writeln!(
                svg,
                "<path d=\"{path}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"/>"
            );
        }
        // Legend.
        let ly = T + 14.0 + i as f64 * 18.0;
        let _ = writeln!(
            svg,
            "<line x1=\"{:.1}\" y1=\"{ly:.1}\" x2=\"{:.1}\" y2=\"{ly:.1}\" stroke=\"{color}\" stroke-width=\"2\"/>",
            L + plot_w + 8.0,
            L + plot_w + 28.0
        );
        let _ = writeln!(
            svg,
            "<text x=\"{:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"11\">{}</text>",
            L + plot_w + 32.0,
            ly + 4.0,
            s.label
        );
    }
    svg.push_str("</svg>\n");
    svg
}

pub fn curve_csv(header: (&str, &str), curve: &[(u64, f64)]) -> String {
    let mut out = format!("{},{}\n", header.0, header.1);
    for (x, y) in curve {
        let _ = writeln!(out, "{x},{y:.6}");
    }
    out
}

fn curve_f64(curve: &[(u64, f64)]) -> Vec<(f64, f64)> {
    curve.iter().map(|&(x, y)| (x as f64, y)).collect()
}

/// summary.csv rows: per-seed and mean F1 per condition.
pub fn extend_summary_csv(outcome: &ExtendOutcome) -> String {
    let mut out = String::from("condition,seed,precision,recall,f1\n");
    for cond in outcome.all_conditions() {
        for (i, &seed) in cond.seeds.iter().enumerate() {
            let _ = writeln!(
                out,
                "{},{},{:.6},{:.6},{:.6}",
                cond.condition,
                seed,
                cond.precision_per_seed[i],
                cond.recall_per_seed[i],
                cond.f1_per_seed[i]
            );
        }
        let _ = writeln!(out, "{},mean,,,{:.6}", cond.condition, cond.mean_f1);
    }
    let _ = writeln!(out, "unk_rate_base,,,,{:.6}", outcome.unk_rate_base);
    let _ = writeln!(out, "unk_rate_extended,,,,{:.6}", outcome.unk_rate_extended);
    out
}

impl ExtendOutcome {
    pub fn all_conditions(&self) -> [&ConditionResult; 5] {
        [
            &self.base_target,
            &self.extended_target,
            &self.scratch_target,
            &self.base_source,
            &self.extended_source,
        ]
    }
}

/// Spec'd metrics.json shape for one condition.
pub fn metrics_json(cond: &ConditionResult) -> String {
    let n = cond.f1_per_seed.len() as f64;
    let mean = |xs: &[f64]| xs.iter().sum::<f64>() / n;
    let value = serde_json::json!({
        "precision": mean(&cond.precision_per_seed),
        "recall": mean(&cond.recall_per_seed),
        "f1": cond.mean_f1,
        "n_runs": cond.f1_per_seed.len(),
        "f1_per_run": cond.f1_per_seed,
    });
    let mut text = serde_json::to_string_pretty(&value).expect("static shape");
    text.push('\n');
    text
}

/// Writes the aggregate files of an extend experiment into `dir`
/// (summary.json, summary.csv, per-condition metrics.json and pretraining
/// loss curves).
pub fn write_extend_summary(outcome: &ExtendOutcome, dir: &Path) -> Result<(), ReportError> {
    let mut json = serde_json::to_string_pretty(outcome)?;
    json.push('\n');
    write_file(&dir.join("summary.json"), &json)?;
    write_file(&dir.join("summary.csv"), &extend_summary_csv(outcome))?;
    for cond in outcome.all_conditions() {
        let cdir = dir.join(&cond.condition);
        write_file(&cdir.join("metrics.json"), &metrics_json(cond))?;
        write_file(
            &cdir.join("pretrain").join("loss.csv"),
            &curve_csv(("step", "loss"), &cond.loss_curve),
        )?;
    }
    Ok(())
}

pub fn write_convergence_summary(
    outcome: &ConvergenceOutcome,
    dir: &Path,
) -> Result<(), ReportError> {
    let mut json = serde_json::to_string_pretty(outcome)?;
    json.push('\n');
    write_file(&dir.join("summary.json"), &json)?;
    for cond in [&outcome.extended, &outcome.scratch] {
        write_file(
            &dir.join(&cond.condition).join("eval_loss.csv"),
            &curve_csv(("step", "heldout_mlm_loss"), &cond.eval_curve),
        )?;
    }
    let mut csv = String::from("condition,threshold,steps\n");
    for cond in [&outcome.extended, &outcome.scratch] {
        for (th, step) in &cond.steps_to_threshold {
            let steps = step
                .map(|s| s.to_string())
                .unwrap_or_else(|| "not reached within budget".to_string());
            let _ = writeln!(csv, "{},{th:.6},{steps}", cond.condition);
        }
    }
    write_file(&dir.join("steps_to_threshold.csv"), &csv)?;
    Ok(())
}

/// Regenerates plots and tables from the summaries in `results_dir`.
/// Looks for `extend/summary.json` and `convergence/summary.json` (or a
/// summary.json directly in `results_dir`).
pub fn generate_report(results_dir: &Path, out_dir: &Path) -> Result<Vec<String>, ReportError> {
    let mut written = Vec::new();
    let mut found = false;

    for sub in ["extend", "."] {
        let summary = results_dir.join(sub).join("summary.json");
        if summary.exists() {
            let text = std::fs::read_to_string(&summary).map_err(|source| ReportError::Io {
                path: summary.display().to_string(),
                source,
            })?;
            if let Ok(outcome) = serde_json::from_str::<ExtendOutcome>(&text) {
                found = true;
                render_extend_report(&outcome, out_dir, &mut written)?;
                break;
            }
        }
    }
    let summary = results_dir.join("convergence").join("summary.json");
    if summary.exists() {
        let text = std::fs::read_to_string(&summary).map_err(|source| ReportError::Io {
            path: summary.display().to_string(),
            source,
        })?;
        let outcome: ConvergenceOutcome = serde_json::from_str(&text)?;
        found = true;
        render_convergence_report(&outcome, out_dir, &mut written)?;
    }

    if !found {
        return Err(ReportError::MissingSummary {
            dir: results_dir.display().to_string(),
            expected: vec![
                "extend/summary.json".into(),
                "convergence/summary.json".into(),
                "summary.json".into(),
            ],
        });
    }
    Ok(written)
}

fn render_extend_report(
    outcome: &ExtendOutcome,
    out_dir: &Path,
    written: &mut Vec<String>,
) -> Result<(), ReportError> {
    let conds = outcome.all_conditions();
    let curves: Vec<(String, Vec<(f64, f64)>)> = conds
        .iter()
        .take(3) // target-side conditions have distinct pretraining runs
        .map(|c| (c.condition.clone(), curve_f64(&c.loss_curve)))
        .collect();
    let series: Vec<Series> = curves
        .iter()
        .map(|(label, points)| Series { label, points })
        .collect();
    let svg = line_chart_svg("Pretraining loss", "step", "loss", &series);
    write_file(&out_dir.join("pretrain_loss.svg"), &svg)?;
    written.push("pretrain_loss.svg".into());

    let f1_points: Vec<(String, Vec<(f64, f64)>)> = conds
        .iter()
        .map(|c| {
            let pts = c
                .f1_per_seed
                .iter()
                .enumerate()
                .map(|(i, &f)| (i as f64 + 1.0, f))
                .collect();
            (c.condition.clone(), pts)
        })
        .collect();
    let series: Vec<Series> = f1_points
        .iter()
        .map(|(label, points)| Series { label, points })
        .collect();
    let svg = line_chart_svg("Zero-shot span F1 by seed", "seed #", "F1", &series);
    write_file(&out_dir.join("f1_by_seed.svg"), &svg)?;
    written.push("f1_by_seed.svg".into());

    write_file(&out_dir.join("summary.csv"), &extend_summary_csv(outcome))?;
    written.push("summary.csv".into());
    Ok(())
}

fn render_convergence_report(
    outcome: &ConvergenceOutcome,
    out_dir: &Path,
    written: &mut Vec<String>,
) -> Result<(), ReportError> {
    let curves = [
        ("extended".to_string(), curve_f64(&outcome.extended.eval_curve)),
        ("scratch".to_string(), curve_f64(&outcome.scratch.eval_curve)),
    ];
    let series: Vec<Series> = curves
        .iter()
        .map(|(label, points)| Series { label, points })
        .collect();
    let svg = line_chart_svg(
        "Held-out target MLM loss",
        "pretraining step",
        "loss",
        &series,
    );
    write_file(&out_dir.join("convergence.svg"), &svg)?;
    written.push("convergence.svg".into());
    Ok(())
}
