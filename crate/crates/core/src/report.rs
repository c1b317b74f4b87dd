//! Aggregates evaluation reports into accuracy, cost and latency tables.
//!
//! Every table renders both as Markdown text and as JSON built from the
//! same cells, so the two forms always carry identical numbers.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::dataset::Difficulty;
use crate::sqlharness::{EvalReport, LatencyStats};

/// Rounds half up at `decimals` places. Representation noise below 1e-6 of
/// the last place is discarded first, so `59.245` rounds to `59.25`.
pub fn round_half_up(x: f64, decimals: u32) -> f64 {
    let scale = 10f64.powi(decimals as i32);
    let scaled: f64 = format!("{:.6}", x * scale)
        .parse()
        .expect("formatted float parses");
    scaled.round() / scale
}

/// `326.0` → `"5m26s"`.
pub fn format_duration(seconds: f64) -> String {
    let total = seconds.max(0.0).round() as u64;
    format!("{}m{}s", total / 60, total % 60)
}

/// `6495` → `"6,495"`.
pub fn format_thousands(n: usize) -> String {
    let digits = n.to_string();
    let mut out = String::with_capacity(digits.len() + digits.len() / 3);
    for (i, c) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(c);
    }
    out
}

/// Seconds shown with four decimals, or in scientific notation below 1 ms.
pub fn format_seconds(s: f64) -> String {
    if s != 0.0 && s.abs() < 1e-3 {
        format!("{s:.1e}")
    } else {
        format!("{s:.4}")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    /// Percent per labelled difficulty that has at least one item.
    pub accuracy_by_difficulty: BTreeMap<Difficulty, f64>,
    /// `(correct, total)` per difficulty, including `unknown`.
    pub bucket_counts: BTreeMap<Difficulty, (usize, usize)>,
    pub total_accuracy: f64,
    pub prompt_tokens: usize,
    pub optimization_wall_time: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latency_profile: Option<LatencyStats>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub qps: Option<f64>,
}

impl MethodSummary {
    /// Percentages are unrounded; rounding happens at render time.
    pub fn from_report(
        method: impl Into<String>,
        report: &EvalReport,
        optimization_wall_time: f64,
    ) -> Self {
        let bucket_counts = report.counts_by_difficulty();
        let accuracy_by_difficulty = bucket_counts
            .iter()
            .filter(|(d, (_, total))| **d != Difficulty::Unknown && *total > 0)
            .map(|(d, (c, t))| (*d, 100.0 * *c as f64 / *t as f64))
            .collect();
        let (correct, total) = bucket_counts
            .values()
            .fold((0, 0), |acc, (c, t)| (acc.0 + c, acc.1 + t));
        Self {
            method: method.into(),
            accuracy_by_difficulty,
            bucket_counts,
            total_accuracy: if total == 0 {
                0.0
            } else {
                100.0 * correct as f64 / total as f64
            },
            prompt_tokens: report.prompt_tokens,
            optimization_wall_time,
            latency_profile: report.latency,
            qps: Some(report.qps),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub value: Option<f64>,
    pub display: String,
    pub best: bool,
}

impl Cell {
    fn number(value: f64, display: String) -> Self {
        Self {
            value: Some(value),
            display,
            best: false,
        }
    }

    fn empty() -> Self {
        Self {
            value: None,
            display: String::new(),
            best: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub name: String,
    pub cells: Vec<Cell>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub title: String,
    pub columns: Vec<String>,
    pub rows: Vec<Row>,
}

#[derive(Clone, Copy)]
enum Better {
    Higher,
    Lower,
}

impl Table {
    fn mark_best(&mut self, col: usize, better: Better) {
        let values = self.rows.iter().filter_map(|r| r.cells[col].value);
        let target = match better {
            Better::Higher => values.fold(f64::NEG_INFINITY, f64::max),
            Better::Lower => values.fold(f64::INFINITY, f64::min),
        };
        for row in &mut self.rows {
            let cell = &mut row.cells[col];
            cell.best = cell.value == Some(target);
        }
    }

    /// Markdown table; best cells wrapped in `**`.
    pub fn to_text(&self) -> String {
        let mut grid: Vec<Vec<String>> = vec![std::iter::once("Method".to_owned())
            .chain(self.columns.iter().cloned())
            .collect()];
        for r in &self.rows {
            let mut line = vec![r.name.clone()];
            line.extend(r.cells.iter().map(|c| {
                if c.best {
                    format!("**{}**", c.display)
                } else {
                    c.display.clone()
                }
            }));
            grid.push(line);
        }
        let widths: Vec<usize> = (0..grid[0].len())
            .map(|i| {
                grid.iter()
                    .map(|l| l[i].chars().count())
                    .max()
                    .unwrap_or(0)
                    .max(3)
            })
            .collect();
        let fmt_line = |cells: &[String]| {
            let padded: Vec<String> = cells
                .iter()
                .zip(&widths)
                .map(|(c, w)| format!("{c:<w$}"))
                .collect();
            format!("| {} |", padded.join(" | "))
        };
        let mut out = format!("{}\n\n{}\n", self.title, fmt_line(&grid[0]));
        let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
        out.push_str(&format!("|-{}-|\n", rule.join("-|-")));
        for line in &grid[1..] {
            out.push_str(&fmt_line(line));
            out.push('\n');
        }
        out
    }

    pub fn to_json(&self) -> Value {
        let rows: Vec<Value> = self
            .rows
            .iter()
            .map(|r| {
                let cells: serde_json::Map<String, Value> = self
                    .columns
                    .iter()
                    .zip(&r.cells)
                    .map(|(col, c)| {
                        (
                            col.clone(),
                            json!({ "value": c.value, "display": c.display, "best": c.best }),
                        )
                    })
                    .collect();
                json!({ "method": r.name, "cells": cells })
            })
            .collect();
        json!({ "title": self.title, "columns": self.columns, "rows": rows })
    }
}

fn percent_cell(p: Option<f64>) -> Cell {
    match p {
        Some(p) => {
            let v = round_half_up(p, 2);
            Cell::number(v, format!("{v:.2}"))
        }
        None => Cell::empty(),
    }
}

/// Simple/Moderate/Challenging/Total execution accuracy in percent.
pub fn accuracy_table(summaries: &[MethodSummary]) -> Table {
    let mut table = Table {
        title: "Execution accuracy (%)".into(),
        columns: ["Simple", "Moderate", "Challenging", "Total"]
            .map(String::from)
            .to_vec(),
        rows: summaries
            .iter()
            .map(|s| {
                let mut cells: Vec<Cell> = Difficulty::LABELLED
                    .iter()
                    .map(|d| percent_cell(s.accuracy_by_difficulty.get(d).copied()))
                    .collect();
                cells.push(percent_cell(Some(s.total_accuracy)));
                Row {
                    name: s.method.clone(),
                    cells,
                }
            })
            .collect(),
    };
    for col in 0..table.columns.len() {
        table.mark_best(col, Better::Higher);
    }
    table
}

/// Prompt length and optimization time.
pub fn cost_table(summaries: &[MethodSummary]) -> Table {
    let mut table = Table {
        title: "Optimization cost".into(),
        columns: vec!["Prompt Length (#tokens)".into(), "Optimization Time".into()],
        rows: summaries
            .iter()
            .map(|s| {
                let secs = s.optimization_wall_time.max(0.0).round();
                Row {
                    name: s.method.clone(),
                    cells: vec![
                        Cell::number(s.prompt_tokens as f64, format_thousands(s.prompt_tokens)),
                        Cell::number(secs, format_duration(secs)),
                    ],
                }
            })
            .collect(),
    };
    table.mark_best(0, Better::Lower);
    table.mark_best(1, Better::Lower);
    table
}

fn seconds_cell(s: f64) -> Cell {
    let display = format_seconds(s);
    let value = display.parse().expect("formatted seconds parse");
    Cell::number(value, display)
}

fn latency_cells(stats: Option<&LatencyStats>) -> Vec<Cell> {
    match stats {
        Some(l) => [l.min, l.max, l.stddev, l.mean].map(seconds_cell).to_vec(),
        None => (0..4).map(|_| Cell::empty()).collect(),
    }
}

/// Latency distribution of the gold queries and of each run's predictions,
/// with accuracy and generation throughput. The gold row leaves accuracy and
/// QPS empty.
pub fn latency_table(gt: &LatencyStats, runs: &[(String, EvalReport)]) -> Table {
    let mut rows = vec![Row {
        name: "GT".into(),
        cells: latency_cells(Some(gt))
            .into_iter()
            .chain([Cell::empty(), Cell::empty()])
            .collect(),
    }];
    for (name, report) in runs {
        let mut cells = latency_cells(report.latency.as_ref());
        cells.push(percent_cell(Some(100.0 * report.accuracy)));
        let qps = round_half_up(report.qps, 2);
        cells.push(Cell::number(qps, format!("{qps:.2}")));
        rows.push(Row {
            name: name.clone(),
            cells,
        });
    }
    Table {
        title: "Latency of generated SQL (s)".into(),
        columns: ["Min", "Max", "σ", "μ", "Acc (Ex)", "Gen-Time QPS"]
            .map(String::from)
            .to_vec(),
        rows,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rounding() {
        assert_eq!(round_half_up(59.245, 2), 59.25);
        assert_eq!(round_half_up(59.2449, 2), 59.24);
        assert_eq!(round_half_up(100.0, 2), 100.0);
        assert_eq!(round_half_up(2.0 / 3.0 * 100.0, 2), 66.67);
    }

    #[test]
    fn durations_and_counts() {
        assert_eq!(format_duration(326.0), "5m26s");
        assert_eq!(format_duration(533.0), "8m53s");
        assert_eq!(format_duration(0.4), "0m0s");
        assert_eq!(format_thousands(6495), "6,495");
        assert_eq!(format_thousands(84519), "84,519");
        assert_eq!(format_thousands(1234567), "1,234,567");
        assert_eq!(format_thousands(12), "12");
    }

    #[test]
    fn seconds_display() {
        assert_eq!(format_seconds(8.761), "8.7610");
        assert_eq!(format_seconds(1e-5), "1.0e-5");
        assert_eq!(format_seconds(0.0), "0.0000");
    }
}
