//! Four-class UAR and the challenge's SE / SP / AS scores, plus table emitters.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::{Class, N_CLASSES};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Rows are truth, columns are prediction, in [`Class::ALL`] order.
    pub confusion: [[usize; N_CLASSES]; N_CLASSES],
    pub uar: f64,
    pub se: f64,
    pub sp: f64,
    pub as_score: f64,
    pub n: usize,
    /// Per-class recall; `None` for classes absent from the truth labels.
    pub recall: [Option<f64>; N_CLASSES],
}

/// Confusion-matrix metrics. UAR averages recall over the classes present in
/// `truth`. SE counts only exact-class hits among abnormal cycles. A score with
/// an empty denominator (no abnormal or no normal cycles) is reported as 0.
pub fn compute(truth: &[Class], predicted: &[Class]) -> Result<MetricsReport> {
    if truth.len() != predicted.len() {
        return Err(Error::LengthMismatch(truth.len(), predicted.len()));
    }
    if truth.is_empty() {
        return Err(Error::Empty("metrics input"));
    }
    let mut confusion = [[0usize; N_CLASSES]; N_CLASSES];
    for (t, p) in truth.iter().zip(predicted) {
        confusion[t.index()][p.index()] += 1;
    }
    let support: Vec<usize> = confusion.iter().map(|r| r.iter().sum()).collect();
    let mut recall = [None; N_CLASSES];
    for c in 0..N_CLASSES {
        if support[c] > 0 {
            recall[c] = Some(confusion[c][c] as f64 / support[c] as f64);
        } else {
            log::warn!("class {} has no samples; excluded from UAR", Class::ALL[c]);
        }
    }
    let present: Vec<f64> = recall.iter().flatten().copied().collect();
    let uar = present.iter().sum::<f64>() / present.len() as f64;

    let abnormal_total: usize = support[1..].iter().sum();
    let abnormal_hits: usize = (1..N_CLASSES).map(|c| confusion[c][c]).sum();
    let ratio = |num: usize, den: usize, what: &str| {
        if den == 0 {
            log::warn!("no {what} samples; score set to 0");
            0.0
        } else {
            num as f64 / den as f64
        }
    };
    let se = ratio(abnormal_hits, abnormal_total, "abnormal");
    let sp = ratio(confusion[0][0], support[0], "normal");
    Ok(MetricsReport { confusion, uar, se, sp, as_score: (se + sp) / 2.0, n: truth.len(), recall })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TableStyle {
    /// Dev UAR, Test UAR, Dev AS, Test SE, Test SP, Test AS.
    Ablation,
    /// SE, SP, AS, UAR on the test set.
    Sota,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Column {
    DevUar,
    TestUar,
    DevAs,
    TestSe,
    TestSp,
    TestAs,
}

impl TableStyle {
    pub fn columns(self) -> &'static [(Column, &'static str)] {
        match self {
            TableStyle::Ablation => &[
                (Column::DevUar, "Dev UAR"),
                (Column::TestUar, "Test UAR"),
                (Column::DevAs, "Dev AS"),
                (Column::TestSe, "Test SE"),
                (Column::TestSp, "Test SP"),
                (Column::TestAs, "Test AS"),
            ],
            TableStyle::Sota => &[
                (Column::TestSe, "SE"),
                (Column::TestSp, "SP"),
                (Column::TestAs, "AS"),
                (Column::TestUar, "UAR"),
            ],
        }
    }

    fn first_header(self) -> &'static str {
        match self {
            TableStyle::Ablation => "Model",
            TableStyle::Sota => "Method",
        }
    }
}

/// One table row. Values are fractions in [0, 1]; missing cells print as `--`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TableRow {
    pub name: String,
    pub dev_uar: Option<f64>,
    pub test_uar: Option<f64>,
    pub dev_as: Option<f64>,
    pub test_se: Option<f64>,
    pub test_sp: Option<f64>,
    pub test_as: Option<f64>,
}

impl TableRow {
    pub fn from_reports(name: impl Into<String>, dev: Option<&MetricsReport>, test: Option<&MetricsReport>) -> Self {
        TableRow {
            name: name.into(),
            dev_uar: dev.map(|r| r.uar),
            dev_as: dev.map(|r| r.as_score),
            test_uar: test.map(|r| r.uar),
            test_se: test.map(|r| r.se),
            test_sp: test.map(|r| r.sp),
            test_as: test.map(|r| r.as_score),
        }
    }

    pub fn get(&self, c: Column) -> Option<f64> {
        match c {
            Column::DevUar => self.dev_uar,
            Column::TestUar => self.test_uar,
            Column::DevAs => self.dev_as,
            Column::TestSe => self.test_se,
            Column::TestSp => self.test_sp,
            Column::TestAs => self.test_as,
        }
    }
}

pub fn percent(v: f64) -> String {
    format!("{:.2}", 100.0 * v)
}

/// Markdown table in percent with two decimals. In every column the highest value
/// is bold; ties go to the earlier row.
pub fn format_table(rows: &[TableRow], style: TableStyle) -> String {
    let cols = style.columns();
    let best: Vec<Option<usize>> = cols
        .iter()
        .map(|(c, _)| {
            let mut best: Option<(usize, f64)> = None;
            for (i, r) in rows.iter().enumerate() {
                if let Some(v) = r.get(*c) {
                    if best.is_none_or(|(_, b)| v > b) {
                        best = Some((i, v));
                    }
                }
            }
            best.map(|(i, _)| i)
        })
        .collect();

    let mut out = format!("| {} |", style.first_header());
    for (_, h) in cols {
        out += &format!(" {h} |");
    }
    out += "\n|---|";
    out += &"---:|".repeat(cols.len());
    out.push('\n');
    for (i, r) in rows.iter().enumerate() {
        out += &format!("| {} |", r.name);
        for ((c, _), b) in cols.iter().zip(&best) {
            let cell = match r.get(*c) {
                None => "--".to_string(),
                Some(v) if *b == Some(i) => format!("**{}**", percent(v)),
                Some(v) => percent(v),
            };
            out += &format!(" {cell} |");
        }
        out.push('\n');
    }
    out
}
