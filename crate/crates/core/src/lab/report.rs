//! CSV tables, grid matrices and plot data from a persisted sweep report.
//! Output depends only on the report, so re-emission is byte-identical.

use std::path::Path;

use super::diagnose::{short_name, LayerChangeReport};
use super::sweep::{PointResult, SweepReport};
use crate::error::{Error, Result};
use crate::grid::{Contrast, Verdict};
use crate::io::write_file;
use crate::metrics::EvalReport;

pub const EVAL_HEADER: &[&str] = &[
    "axis",
    "value",
    "dataset",
    "measure",
    "base_pnd",
    "tuned_pnd",
    "improvement_pct",
    "z",
    "significant",
    "base_errors",
    "tuned_errors",
    "total",
    "base_mrr",
    "tuned_mrr",
    "base_map",
    "tuned_map",
    "base_p_at_1",
    "tuned_p_at_1",
];

pub const GRID_HEADER: &[&str] = &[
    "axis",
    "value",
    "measure",
    "contrast",
    "improved",
    "worsened",
    "not_significant",
    "base_avg_pnd",
    "tuned_avg_pnd",
];

pub const PLOT_HEADER: &[&str] = &["axis", "value", "x", "series", "y", "significant"];

pub const LAYER_HEADER: &[&str] = &["name", "short_name", "w_o", "w_t", "changed", "metric_a", "metric_b", "rank_a", "rank_b"];

/// Rows shown in the top-change tables.
const TOP_K: usize = 10;

struct Table(csv::Writer<Vec<u8>>);

impl Table {
    fn new(header: &[&str]) -> Result<Self> {
        let mut t = Table(csv::Writer::from_writer(Vec::new()));
        t.row(header.iter().map(|s| s.to_string()))?;
        Ok(t)
    }

    fn row(&mut self, fields: impl IntoIterator<Item = String>) -> Result<()> {
        self.0
            .write_record(fields.into_iter().collect::<Vec<_>>())
            .map_err(|e| Error::Lab(e.to_string()))
    }

    fn save(self, path: &Path) -> Result<()> {
        let bytes = self.0.into_inner().map_err(|e| Error::Lab(e.to_string()))?;
        write_file(path, bytes)
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn x_value(p: &PointResult, index: usize) -> String {
    p.x.unwrap_or(index as f64).to_string()
}

fn eval_table(report: &SweepReport) -> Result<Table> {
    let mut t = Table::new(EVAL_HEADER)?;
    for p in &report.points {
        for r in &p.eval {
            t.row([
                report.axis_name().to_string(),
                p.label.clone(),
                r.dataset.clone(),
                r.measure.as_str().to_string(),
                r.base.pnd.to_string(),
                r.tuned.pnd.to_string(),
                opt(r.improvement_pct),
                opt(r.z),
                r.significant.to_string(),
                r.base.errors.to_string(),
                r.tuned.errors.to_string(),
                r.base.total.to_string(),
                opt(r.base.mrr),
                opt(r.tuned.mrr),
                opt(r.base.map),
                opt(r.tuned.map),
                opt(r.base.p_at_1),
                opt(r.tuned.p_at_1),
            ])?;
        }
    }
    Ok(t)
}

fn grid_table(report: &SweepReport) -> Result<Table> {
    let mut t = Table::new(GRID_HEADER)?;
    for p in &report.points {
        for g in &p.grids {
            for tally in &g.tallies {
                t.row([
                    report.axis_name().to_string(),
                    p.label.clone(),
                    g.measure.as_str().to_string(),
                    tally.contrast.tag().to_string(),
                    tally.improved.to_string(),
                    tally.worsened.to_string(),
                    tally.not_significant.to_string(),
                    g.base.average_pnd(tally.contrast).to_string(),
                    g.tuned.average_pnd(tally.contrast).to_string(),
                ])?;
            }
        }
    }
    Ok(t)
}

/// Improvement per dataset and measure (bracketed when not significant),
/// then `improved/worsened` grid cell counts per contrast and measure.
fn summary_table(report: &SweepReport) -> Result<Table> {
    let mut header = vec![report.axis_name().to_string()];
    if let Some(first) = report.points.first() {
        header.extend(first.eval.iter().map(|r| format!("{} {}%", r.dataset, r.measure.tag())));
        for c in Contrast::BOTH {
            header.extend(first.grids.iter().map(|g| format!("{} {}+/-", c.tag(), g.measure.tag())));
        }
    }
    let mut t = Table(csv::Writer::from_writer(Vec::new()));
    t.row(header)?;
    for p in &report.points {
        let mut row = vec![p.label.clone()];
        row.extend(p.eval.iter().map(|r| match r.improvement_pct {
            Some(v) if r.significant => format!("{v:.2}"),
            Some(v) => format!("({v:.2})"),
            None => String::new(),
        }));
        for c in Contrast::BOTH {
            for g in &p.grids {
                let tally = g.tallies.iter().find(|t| t.contrast == c);
                row.push(tally.map_or(String::new(), |t| format!("{}/{}", t.improved, t.worsened)));
            }
        }
        t.row(row)?;
    }
    Ok(t)
}

fn plot_table(report: &SweepReport) -> Result<Table> {
    let mut t = Table::new(PLOT_HEADER)?;
    for (i, p) in report.points.iter().enumerate() {
        for r in &p.eval {
            t.row([
                report.axis_name().to_string(),
                p.label.clone(),
                x_value(p, i),
                format!("{}/{}", r.dataset, r.measure.as_str()),
                opt(r.improvement_pct),
                r.significant.to_string(),
            ])?;
        }
        for g in &p.grids {
            for tally in &g.tallies {
                t.row([
                    report.axis_name().to_string(),
                    p.label.clone(),
                    x_value(p, i),
                    format!("grid/{}/{}", tally.contrast.tag(), g.measure.as_str()),
                    (tally.improved as i64 - tally.worsened as i64).to_string(),
                    String::new(),
                ])?;
            }
        }
    }
    Ok(t)
}

fn layer_table(layers: &LayerChangeReport) -> Result<Table> {
    let mut rank_a = vec![String::new(); layers.layers.len()];
    let mut rank_b = vec![String::new(); layers.layers.len()];
    for (r, &i) in layers.rank_a.iter().enumerate() {
        rank_a[i] = (r + 1).to_string();
    }
    for (r, &i) in layers.rank_b.iter().enumerate() {
        rank_b[i] = (r + 1).to_string();
    }
    let mut t = Table::new(LAYER_HEADER)?;
    for (i, l) in layers.layers.iter().enumerate() {
        t.row([
            l.name.clone(),
            short_name(&l.name).to_string(),
            l.w_o.to_string(),
            l.w_t.to_string(),
            l.changed.to_string(),
            opt(l.metric_a),
            opt(l.metric_b),
            rank_a[i].clone(),
            rank_b[i].clone(),
        ])?;
    }
    Ok(t)
}

fn top_table(layers: &LayerChangeReport) -> Result<Table> {
    let mut t = Table::new(&["rank", "layer_a", "metric_a", "layer_b", "metric_b"])?;
    let a = layers.top_a(TOP_K);
    let b = layers.top_b(TOP_K);
    for i in 0..a.len().max(b.len()) {
        t.row([
            (i + 1).to_string(),
            a.get(i).map_or(String::new(), |l| short_name(&l.name).to_string()),
            a.get(i).map_or(String::new(), |l| opt(l.metric_a)),
            b.get(i).map_or(String::new(), |l| short_name(&l.name).to_string()),
            b.get(i).map_or(String::new(), |l| opt(l.metric_b)),
        ])?;
    }
    Ok(t)
}

fn verdict_csv(languages: &[String], verdicts: &[Verdict]) -> Result<Table> {
    let mut header = vec!["query\\text".to_string()];
    header.extend(languages.iter().cloned());
    let mut t = Table(csv::Writer::from_writer(Vec::new()));
    t.row(header)?;
    let n = languages.len();
    for (q, lang) in languages.iter().enumerate() {
        let mut row = vec![lang.clone()];
        row.extend(verdicts[q * n..(q + 1) * n].iter().map(|v| {
            match v {
                Verdict::Improved => "+",
                Verdict::Worsened => "-",
                Verdict::NotSignificant => "0",
            }
            .to_string()
        }));
        t.row(row)?;
    }
    Ok(t)
}

/// `{stem}.csv` with every layer and `{stem}_top.csv` with the top changes.
pub fn emit_layers(layers: &LayerChangeReport, dir: &Path, stem: &str) -> Result<()> {
    layer_table(layers)?.save(&dir.join(format!("{stem}.csv")))?;
    top_table(layers)?.save(&dir.join(format!("{stem}_top.csv")))
}

pub const SCORE_HEADER: &[&str] = &["dataset", "measure", "pnd", "pooled_pnd", "errors", "total", "mrr", "map", "p_at_1"];

/// Plain (single-model) evaluation table.
pub fn emit_scores(rows: &[(String, EvalReport)], path: &Path) -> Result<()> {
    let mut t = Table::new(SCORE_HEADER)?;
    for (name, r) in rows {
        t.row([
            name.clone(),
            r.measure.as_str().to_string(),
            r.pnd.to_string(),
            r.pooled_pnd().to_string(),
            r.errors.to_string(),
            r.total.to_string(),
            opt(r.mrr),
            opt(r.map),
            opt(r.p_at_1),
        ])?;
    }
    t.save(path)
}

fn emit_point(p: &PointResult, index: usize, out: &Path) -> Result<()> {
    let dir = out.join("points").join(p.dir_name(index));
    emit_layers(&p.layers, &dir, "layers")?;
    if let Some(text) = &p.text_layers {
        emit_layers(text, &dir, "text_layers")?;
    }
    for g in &p.grids {
        for tally in &g.tallies {
            let stem = format!("grid-{}-{}", tally.contrast.tag(), g.measure.as_str());
            write_file(&dir.join(format!("{stem}-base.csv")), g.base.matrix_csv(tally.contrast)?)?;
            write_file(&dir.join(format!("{stem}-tuned.csv")), g.tuned.matrix_csv(tally.contrast)?)?;
            verdict_csv(&g.base.languages, &tally.verdicts)?.save(&dir.join(format!("{stem}-verdict.csv")))?;
        }
    }
    Ok(())
}

/// Writes `eval.csv`, `grid.csv`, `table.csv`, `plot.csv` and per-point
/// layer tables and grid matrices under `out`.
pub fn emit_report(report: &SweepReport, out: &Path) -> Result<()> {
    eval_table(report)?.save(&out.join("eval.csv"))?;
    grid_table(report)?.save(&out.join("grid.csv"))?;
    summary_table(report)?.save(&out.join("table.csv"))?;
    plot_table(report)?.save(&out.join("plot.csv"))?;
    for (i, p) in report.points.iter().enumerate() {
        emit_point(p, i, out)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_sweep_is_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let report = SweepReport {
            axis: None,
            points: vec![],
        };
        emit_report(&report, dir.path()).unwrap();
        let eval = std::fs::read_to_string(dir.path().join("eval.csv")).unwrap();
        assert_eq!(eval.lines().count(), 1);
        assert!(eval.starts_with("axis,value,dataset"));
        let plot = std::fs::read_to_string(dir.path().join("plot.csv")).unwrap();
        assert_eq!(plot.trim_end(), PLOT_HEADER.join(","));
    }
}
