//! Aligned-text tables with fixed column widths.
//!
//! Widths come from the column definitions, never from the data, so a
//! changed value only changes its own line in a diff. A cell wider than its
//! column is written in full and pushes the rest of that line right.

use std::fmt::Write as _;

use crate::attribution::CategoryAttribution;
use crate::behavior::{FiveWayRescore, GapDecomposition, ShuffleReport};
use crate::invariance::{CiRecord, MaskRow, StratumRow};
use crate::probes::ProbeResult;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Align {
    Left,
    Right,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Column {
    pub header: &'static str,
    pub width: usize,
    pub align: Align,
}

impl Column {
    pub const fn left(header: &'static str, width: usize) -> Self {
        Column {
            header,
            width,
            align: Align::Left,
        }
    }

    pub const fn right(header: &'static str, width: usize) -> Self {
        Column {
            header,
            width,
            align: Align::Right,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Table {
    pub title: String,
    pub columns: Vec<Column>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(title: impl Into<String>, columns: Vec<Column>) -> Self {
        Table {
            title: title.into(),
            columns,
            rows: Vec::new(),
        }
    }

    /// Appends a row; missing trailing cells render blank.
    pub fn push(&mut self, cells: Vec<String>) {
        debug_assert!(cells.len() <= self.columns.len());
        self.rows.push(cells);
    }

    fn line(&self, cells: &[String]) -> String {
        let mut out = String::new();
        for (i, col) in self.columns.iter().enumerate() {
            if i > 0 {
                out.push_str("  ");
            }
            let cell = cells.get(i).map(String::as_str).unwrap_or("");
            match col.align {
                Align::Left => write!(out, "{cell:<w$}", w = col.width),
                Align::Right => write!(out, "{cell:>w$}", w = col.width),
            }
            .expect("write to String");
        }
        out.trim_end().to_owned()
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        if !self.title.is_empty() {
            out.push_str(&self.title);
            out.push('\n');
        }
        let headers: Vec<String> = self.columns.iter().map(|c| c.header.to_owned()).collect();
        out.push_str(&self.line(&headers));
        out.push('\n');
        let rule: Vec<String> = self.columns.iter().map(|c| "-".repeat(c.width)).collect();
        out.push_str(&self.line(&rule));
        out.push('\n');
        for r in &self.rows {
            out.push_str(&self.line(r));
            out.push('\n');
        }
        out
    }
}

/// Fixed-precision number; `-0.000` is printed as `0.000`.
pub fn num(v: f64, prec: usize) -> String {
    let s = format!("{v:.prec$}");
    if s.starts_with('-') && s[1..].chars().all(|c| c == '0' || c == '.') {
        s[1..].to_owned()
    } else {
        s
    }
}

pub fn opt_num(v: Option<f64>, prec: usize) -> String {
    v.map_or_else(|| "n/a".to_owned(), |x| num(x, prec))
}

pub fn pct(v: f64, prec: usize) -> String {
    format!("{}%", num(100.0 * v, prec))
}

pub fn opt_pct(v: Option<f64>, prec: usize) -> String {
    v.map_or_else(|| "n/a".to_owned(), |x| pct(x, prec))
}

/// `[lower, upper]` at `prec` decimals.
pub fn interval(ci: &CiRecord, prec: usize) -> String {
    format!("[{}, {}]", num(ci.lower, prec), num(ci.upper, prec))
}

pub fn stratum_table(title: &str, rows: &[StratumRow]) -> Table {
    let mut t = Table::new(
        title,
        vec![
            Column::left("stratum", 16),
            Column::right("n", 4),
            Column::right("dsMAPE", 8),
            Column::left("95% CI", 18),
            Column::right("dcos", 8),
            Column::left("95% CI", 18),
            Column::right("n_cos", 5),
        ],
    );
    for r in rows {
        t.push(vec![
            r.stratum.clone(),
            r.n.to_string(),
            num(r.d_smape.point, 3),
            interval(&r.d_smape, 3),
            r.d_cos.map_or_else(|| "n/a".into(), |c| num(c.point, 3)),
            r.d_cos.map_or_else(|| "n/a".into(), |c| interval(&c, 3)),
            r.n_cos.to_string(),
        ]);
    }
    t
}

pub fn mask_table(title: &str, rows: &[MaskRow]) -> Table {
    let mut t = Table::new(
        title,
        vec![
            Column::left("mask", 12),
            Column::right("n", 4),
            Column::right("medical", 8),
            Column::right("random", 8),
        ],
    );
    for r in rows {
        t.push(vec![
            r.mask.as_str().to_owned(),
            r.n.to_string(),
            opt_num(r.medical, 3),
            opt_num(r.random, 3),
        ]);
    }
    t
}

pub fn shuffle_table(title: &str, r: &ShuffleReport) -> Table {
    let mut t = Table::new(
        title,
        vec![
            Column::left("measure", 20),
            Column::right("hits", 5),
            Column::right("total", 5),
            Column::right("rate", 7),
            Column::left("95% CI", 18),
        ],
    );
    for (name, e) in [
        ("same letter", &r.same_letter),
        ("same content", &r.same_content),
        ("shuffled accuracy", &r.shuffled_accuracy),
        ("ER-now content", &r.er_now_content),
    ] {
        t.push(vec![
            name.to_owned(),
            e.hits.to_string(),
            e.total.to_string(),
            pct(e.ci.point, 1),
            format!("[{}, {}]", pct(e.ci.lower, 1), pct(e.ci.upper, 1)),
        ]);
    }
    t.push(vec![
        "canonical accuracy".into(),
        String::new(),
        r.n_cases.to_string(),
        pct(r.canonical_accuracy, 1),
    ]);
    t
}

pub fn gap_table(title: &str, g: &GapDecomposition) -> Table {
    let mut t = Table::new(title, vec![Column::left("quantity", 28), Column::right("value", 10)]);
    t.push(vec!["cases".into(), g.n.to_string()]);
    for (label, n) in &g.strata {
        t.push(vec![format!("stratum {}", label.as_str()), n.to_string()]);
    }
    t.push(vec!["net gap (NF-only - NL-only)".into(), (g.nf_only_right as i64 - g.nl_only_right as i64).to_string()]);
    t.push(vec!["NF deferrals".into(), g.deferred.to_string()]);
    t.push(vec![
        "deferrals in gap (min-max)".into(),
        format!("{}-{}", g.deferred_in_gap.0, g.deferred_in_gap.1),
    ]);
    for (name, a) in [("NF-only adjacent", &g.nf_only_adjacency), ("NL-only adjacent", &g.nl_only_adjacency)] {
        t.push(vec![name.into(), format!("{}/{} of {}", a.adjacent, a.defined, a.total)]);
    }
    t
}

pub fn five_way_table(title: &str, r: &FiveWayRescore) -> Table {
    let mut t = Table::new(
        title,
        vec![
            Column::left("judge", 16),
            Column::right("4-way", 8),
            Column::right("5-way", 8),
            Column::right("deferred", 8),
        ],
    );
    for (judge, s) in &r.per_judge {
        t.push(vec![judge.clone(), pct(s.four_way, 1), pct(s.five_way, 1), s.deferred.to_string()]);
    }
    t.push(vec![
        "all judges".into(),
        pct(r.all_judges_four_way, 1),
        pct(r.all_judges_five_way, 1),
        format!("{}+{}", r.unanimous_deferred.len(), r.split_deferred.len()),
    ]);
    t
}

pub fn attribution_table(title: &str, rows: &[CategoryAttribution]) -> Table {
    let mut t = Table::new(
        title,
        vec![
            Column::left("case", 10),
            Column::left("pred", 4),
            Column::left("category", 10),
            Column::right("active", 6),
            Column::right("abs share", 9),
            Column::right("margin", 9),
        ],
    );
    for a in rows {
        for c in &a.categories {
            t.push(vec![
                a.case_id.clone(),
                a.predicted.to_string(),
                format!("{:?}", c.category).to_lowercase(),
                c.n_active.to_string(),
                opt_pct(c.abs_fraction, 1),
                opt_pct(c.margin_share, 1),
            ]);
        }
    }
    t
}

pub fn probe_table(title: &str, rows: &[ProbeResult]) -> Table {
    let mut t = Table::new(
        title,
        vec![
            Column::right("layer", 5),
            Column::left("transition", 10),
            Column::right("n", 4),
            Column::right("pos", 4),
            Column::right("ROC", 6),
            Column::right("p", 6),
            Column::right("PR", 6),
            Column::right("p", 6),
            Column::right("base", 6),
        ],
    );
    for r in rows {
        let (p_roc, p_pr) = r
            .permutation
            .map_or(("n/a".into(), "n/a".into()), |p| (num(p.roc_auc, 3), num(p.pr_auc, 3)));
        t.push(vec![
            r.layer.to_string(),
            r.transition.clone(),
            r.n.to_string(),
            r.positives.to_string(),
            num(r.roc_auc, 3),
            p_roc,
            num(r.pr_auc, 3),
            p_pr,
            num(r.prevalence, 3),
        ]);
    }
    t
}
