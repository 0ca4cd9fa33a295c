//! Cross-fold report rendering: a Markdown accuracy/coverage table and a
//! standalone SVG chart of the same rows.

use std::fmt::Write as _;

use crate::error::FormatError;
use crate::selective::{aggregate_splits, fmt_sig, mean_std, AggregateTuple, SweepRow, DEFAULT_FIXED};

/// One `(n, p)` row aggregated over folds.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub aggregate: AggregateTuple,
    pub mean_total: f64,
    pub mean_skipped: f64,
    /// Mean over folds with a defined baseline.
    pub mean_baseline: Option<f64>,
}

/// Aggregates per-fold sweeps row by row. All folds must list the same
/// `(n, p)` sequence.
pub fn aggregate_folds(folds: &[Vec<SweepRow>]) -> Result<Vec<ReportRow>, FormatError> {
    let first = folds
        .first()
        .ok_or_else(|| FormatError::Document("no sweep tables given".into()))?;
    for (f, fold) in folds.iter().enumerate().skip(1) {
        let same = fold.len() == first.len()
            && fold
                .iter()
                .zip(first)
                .all(|(a, b)| a.tuple.n == b.tuple.n && a.tuple.p == b.tuple.p);
        if !same {
            return Err(FormatError::Document(format!(
                "sweep table {} has a different (n, p) grid than the first",
                f + 1
            )));
        }
    }
    (0..first.len())
        .map(|r| {
            let rows: Vec<&SweepRow> = folds.iter().map(|fold| &fold[r]).collect();
            let tuples: Vec<_> = rows.iter().map(|row| row.tuple).collect();
            let aggregate =
                aggregate_splits(&tuples).map_err(|e| FormatError::Document(e.to_string()))?;
            let k = rows.len() as f64;
            let baselines: Vec<f64> = rows.iter().filter_map(|row| row.baseline_accuracy).collect();
            Ok(ReportRow {
                aggregate,
                mean_total: rows.iter().map(|row| row.tuple.total as f64).sum::<f64>() / k,
                mean_skipped: rows.iter().map(|row| row.tuple.skipped as f64).sum::<f64>() / k,
                mean_baseline: mean_std(&baselines).map(|(m, _)| m),
            })
        })
        .collect()
}

fn fmt3(v: f64) -> String {
    fmt_sig(v, 3)
}

pub fn markdown_table(rows: &[ReportRow], folds: usize) -> String {
    let mut out = String::new();
    writeln!(out, "# Accuracy and coverage vs N and P\n").unwrap();
    writeln!(
        out,
        "Accuracy is the mean over {folds} fold(s) ± population standard deviation.\n"
    )
    .unwrap();
    out.push_str(
        "| N | P | Total Images | Skipped Images | Accuracy ± st. dev. | Coverage | Baseline Accuracy |\n",
    );
    out.push_str("|---|---|---|---|---|---|---|\n");
    for r in rows {
        let a = &r.aggregate;
        let acc = match (a.mean_accuracy, a.std_accuracy) {
            (Some(m), Some(s)) => format!("{} ± {}", fmt3(m), fmt3(s)),
            _ => "NA".to_string(),
        };
        writeln!(
            out,
            "| {} | {} | {} | {} | {} | {} | {} |",
            fmt_sig(a.n, 6),
            fmt_sig(a.p, 6),
            fmt_sig(r.mean_total, 6),
            fmt_sig(r.mean_skipped, 6),
            acc,
            fmt3(a.mean_coverage),
            r.mean_baseline.map_or_else(|| "NA".to_string(), fmt3)
        )
        .unwrap();
    }
    out
}

/// Rows of one chart panel: the varied knob's value and the row.
struct Panel<'a> {
    knob: &'static str,
    fixed: String,
    points: Vec<(f64, &'a ReportRow)>,
}

fn panels(rows: &[ReportRow]) -> Vec<Panel<'_>> {
    let mut out = Vec::new();
    let fixed_p = if rows.iter().any(|r| r.aggregate.p == DEFAULT_FIXED) {
        Some(DEFAULT_FIXED)
    } else if rows.iter().all(|r| r.aggregate.n != DEFAULT_FIXED) {
        rows.first().map(|r| r.aggregate.p)
    } else {
        None
    };
    if let Some(p) = fixed_p {
        let mut points: Vec<(f64, &ReportRow)> = rows
            .iter()
            .filter(|r| r.aggregate.p == p)
            .map(|r| (r.aggregate.n, r))
            .collect();
        points.sort_by(|a, b| a.0.total_cmp(&b.0));
        out.push(Panel {
            knob: "N",
            fixed: format!("P = {}", fmt_sig(p, 6)),
            points,
        });
    }
    let mut points: Vec<(f64, &ReportRow)> = rows
        .iter()
        .filter(|r| r.aggregate.n == DEFAULT_FIXED)
        .map(|r| (r.aggregate.p, r))
        .collect();
    if !points.is_empty() {
        points.sort_by(|a, b| a.0.total_cmp(&b.0));
        out.push(Panel {
            knob: "P",
            fixed: format!("N = {}", fmt_sig(DEFAULT_FIXED, 6)),
            points,
        });
    }
    out
}

const PANEL_W: f64 = 420.0;
const PANEL_H: f64 = 300.0;
const MARGIN_L: f64 = 50.0;
const MARGIN_R: f64 = 20.0;
const MARGIN_T: f64 = 40.0;
const MARGIN_B: f64 = 70.0;

struct Series<'a> {
    name: &'static str,
    color: &'static str,
    dash: Option<&'static str>,
    value: &'a dyn Fn(&ReportRow) -> Option<f64>,
}

/// Accuracy and coverage (solid) and baseline accuracy (dotted) against the
/// varied knob, one panel per knob.
pub fn svg_chart(rows: &[ReportRow]) -> String {
    let panels = panels(rows);
    let count = panels.len().max(1) as f64;
    let width = PANEL_W * count;
    let mut out = String::new();
    writeln!(
        out,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">",
        w = width,
        h = PANEL_H
    )
    .unwrap();
    writeln!(out, "<rect width=\"{width}\" height=\"{PANEL_H}\" fill=\"white\"/>").unwrap();

    let accuracy = |r: &ReportRow| r.aggregate.mean_accuracy;
    let coverage = |r: &ReportRow| Some(r.aggregate.mean_coverage);
    let baseline = |r: &ReportRow| r.mean_baseline;
    let series = [
        Series {
            name: "accuracy",
            color: "#1f77b4",
            dash: None,
            value: &accuracy,
        },
        Series {
            name: "coverage",
            color: "#ff7f0e",
            dash: None,
            value: &coverage,
        },
        Series {
            name: "baseline accuracy",
            color: "#555555",
            dash: Some("2,4"),
            value: &baseline,
        },
    ];

    for (k, panel) in panels.iter().enumerate() {
        let x0 = k as f64 * PANEL_W + MARGIN_L;
        let x1 = (k + 1) as f64 * PANEL_W - MARGIN_R;
        let y0 = MARGIN_T;
        let y1 = PANEL_H - MARGIN_B;
        let (lo, hi) = match (panel.points.first(), panel.points.last()) {
            (Some(a), Some(b)) if b.0 > a.0 => (a.0, b.0),
            (Some(a), _) => (a.0 - 0.5, a.0 + 0.5),
            _ => (0.0, 1.0),
        };
        let sx = |v: f64| x0 + (v - lo) / (hi - lo) * (x1 - x0);
        let sy = |v: f64| y1 - v * (y1 - y0);

        writeln!(
            out,
            "<text x=\"{:.2}\" y=\"24\" font-family=\"sans-serif\" font-size=\"14\" text-anchor=\"middle\">Accuracy and coverage vs {} ({})</text>",
            (x0 + x1) / 2.0,
            panel.knob,
            panel.fixed
        )
        .unwrap();
        writeln!(
            out,
            "<path d=\"M{x0:.2},{y0:.2} L{x0:.2},{y1:.2} L{x1:.2},{y1:.2}\" fill=\"none\" stroke=\"black\"/>"
        )
        .unwrap();
        for tick in 0..=4 {
            let v = tick as f64 / 4.0;
            writeln!(
                out,
                "<text x=\"{:.2}\" y=\"{:.2}\" font-family=\"sans-serif\" font-size=\"10\" text-anchor=\"end\">{}</text>",
                x0 - 6.0,
                sy(v) + 3.0,
                fmt_sig(v, 3)
            )
            .unwrap();
        }
        for (v, _) in &panel.points {
            writeln!(
                out,
                "<text x=\"{:.2}\" y=\"{:.2}\" font-family=\"sans-serif\" font-size=\"10\" text-anchor=\"middle\">{}</text>",
                sx(*v),
                y1 + 14.0,
                fmt_sig(*v, 6)
            )
            .unwrap();
        }
        writeln!(
            out,
            "<text x=\"{:.2}\" y=\"{:.2}\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"middle\">{}</text>",
            (x0 + x1) / 2.0,
            y1 + 32.0,
            panel.knob
        )
        .unwrap();

        for (j, s) in series.iter().enumerate() {
            let mut d = String::new();
            let mut pen_down = false;
            for (v, row) in &panel.points {
                match (s.value)(row) {
                    Some(y) => {
                        let cmd = if pen_down { 'L' } else { 'M' };
                        write!(d, "{cmd}{:.2},{:.2} ", sx(*v), sy(y)).unwrap();
                        pen_down = true;
                    }
                    None => pen_down = false,
                }
            }
            let dash = s
                .dash
                .map(|a| format!(" stroke-dasharray=\"{a}\""))
                .unwrap_or_default();
            writeln!(
                out,
                "<path class=\"{}\" d=\"{}\" fill=\"none\" stroke=\"{}\" stroke-width=\"2\"{}/>",
                s.name.replace(' ', "-"),
                d.trim_end(),
                s.color,
                dash
            )
            .unwrap();
            let lx = x0 + 10.0 + j as f64 * 115.0;
            let ly = PANEL_H - 14.0;
            writeln!(
                out,
                "<path d=\"M{:.2},{ly:.2} L{:.2},{ly:.2}\" stroke=\"{}\" stroke-width=\"2\"{}/>",
                lx,
                lx + 18.0,
                s.color,
                dash
            )
            .unwrap();
            writeln!(
                out,
                "<text x=\"{:.2}\" y=\"{:.2}\" font-family=\"sans-serif\" font-size=\"10\">{}</text>",
                lx + 22.0,
                ly + 3.0,
                s.name
            )
            .unwrap();
        }
    }
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::selective::EvalTuple;

    fn row(n: f64, p: f64, covered: usize, accuracy: Option<f64>) -> SweepRow {
        SweepRow {
            tuple: EvalTuple {
                n,
                p,
                total: 100,
                skipped: 100 - covered,
                covered,
                correct: 0,
                coverage: covered as f64 / 100.0,
                accuracy,
            },
            baseline_accuracy: accuracy.map(|_| 0.8),
        }
    }

    #[test]
    fn identical_folds_have_zero_std() {
        let fold = vec![row(0.5, 0.5, 80, Some(0.9))];
        let folds = vec![fold.clone(); 5];
        let rows = aggregate_folds(&folds).unwrap();
        assert_eq!(rows[0].aggregate.std_accuracy, Some(0.0));
        assert!(markdown_table(&rows, 5).contains("| 0.9 ± 0 |"));
    }

    #[test]
    fn two_fold_mean_and_std() {
        let folds = vec![
            vec![row(0.5, 0.5, 80, Some(0.95))],
            vec![row(0.5, 0.5, 80, Some(0.97))],
        ];
        let rows = aggregate_folds(&folds).unwrap();
        assert!(markdown_table(&rows, 2).contains("0.96 ± 0.01"));
    }

    #[test]
    fn mismatched_grids_are_rejected() {
        let folds = vec![vec![row(0.5, 0.5, 80, Some(0.9))], vec![row(0.6, 0.5, 80, Some(0.9))]];
        assert!(aggregate_folds(&folds).is_err());
        let folds = vec![vec![row(0.5, 0.5, 80, Some(0.9))], vec![]];
        assert!(aggregate_folds(&folds).is_err());
        assert!(aggregate_folds(&[]).is_err());
    }

    #[test]
    fn na_rows_render() {
        let rows = aggregate_folds(&[vec![row(0.95, 0.5, 0, None)]]).unwrap();
        let md = markdown_table(&rows, 1);
        assert!(md.contains("| 0.95 | 0.5 | 100 | 100 | NA | 0 | NA |"));
        let svg = svg_chart(&rows);
        assert!(svg.starts_with("<svg"));
        assert!(svg.trim_end().ends_with("</svg>"));
    }

    #[test]
    fn chart_has_both_panels_for_default_layout() {
        let fold: Vec<SweepRow> = [0.95, 0.85, 0.35]
            .iter()
            .map(|&n| row(n, 0.5, 50, Some(0.9)))
            .chain([0.95, 0.2].iter().map(|&p| row(0.5, p, 60, Some(0.85))))
            .collect();
        let rows = aggregate_folds(&[fold]).unwrap();
        let svg = svg_chart(&rows);
        assert_eq!(svg.matches("class=\"coverage\"").count(), 2);
        assert!(svg.contains("stroke-dasharray"));
        assert_eq!(svg, svg_chart(&rows));
    }
}
