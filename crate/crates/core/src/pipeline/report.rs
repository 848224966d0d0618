//! Aggregation of cell reports into summary tables and heatmaps.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::sweep::{CELLS_DIR, REPORT_JSON};
use crate::error::{FlipError, Result};
use crate::evaluation::EvalReport;

/// Headline metrics and whether larger values are better.
pub const METRICS: [(&str, bool); 7] = [
    ("ber", true),
    ("ncb", true),
    ("a_ncb", true),
    ("identifiability", false),
    ("downstream_auc", true),
    ("statistical_parity", false),
    ("equalized_odds", false),
];

fn metric(r: &EvalReport, name: &str) -> Option<f64> {
    match name {
        "ber" => Some(r.ber),
        "ncb" => Some(r.ncb),
        "a_ncb" => Some(r.a_ncb),
        "identifiability" => Some(r.identifiability),
        "downstream_auc" => r.downstream_auc,
        "statistical_parity" => r.statistical_parity,
        "equalized_odds" => r.equalized_odds,
        _ => None,
    }
    .filter(|v| v.is_finite())
}

/// Mean and sample standard deviation (0 for a single value).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl Stat {
    pub fn of(values: &[f64]) -> Option<Stat> {
        let n = values.len();
        if n == 0 {
            return None;
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Some(Stat { mean, std, n })
    }
}

/// Grid key with a total order: λ ascending, then ε ascending with the
/// non-private setting last.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridKey {
    pub lambda: f64,
    pub epsilon: Option<f64>,
}

impl GridKey {
    fn eps_order(&self) -> f64 {
        self.epsilon.unwrap_or(f64::INFINITY)
    }

    pub fn epsilon_label(&self) -> String {
        self.epsilon.map(|e| format!("{e}")).unwrap_or_else(|| "inf".into())
    }
}

fn sorted_unique(mut v: Vec<f64>) -> Vec<f64> {
    v.sort_by(f64::total_cmp);
    v.dedup();
    v
}

/// Reports collected from a sweep directory, in cell-name order.
#[derive(Debug, Clone)]
pub struct Aggregate {
    pub reports: Vec<EvalReport>,
    pub lambdas: Vec<f64>,
    /// ε values with `f64::INFINITY` standing for no privacy.
    pub epsilons: Vec<f64>,
}

fn key_of(r: &EvalReport) -> Result<GridKey> {
    let lambda = r
        .metadata
        .lambda
        .ok_or_else(|| FlipError::InvalidArgument("report without lambda metadata".into()))?;
    Ok(GridKey {
        lambda,
        epsilon: r.metadata.epsilon,
    })
}

impl Aggregate {
    pub fn new(reports: Vec<EvalReport>) -> Result<Self> {
        if reports.is_empty() {
            return Err(FlipError::InvalidArgument("no cell reports to aggregate".into()));
        }
        let keys = reports.iter().map(key_of).collect::<Result<Vec<_>>>()?;
        let lambdas = sorted_unique(keys.iter().map(|k| k.lambda).collect());
        let epsilons = sorted_unique(keys.iter().map(GridKey::eps_order).collect());
        Ok(Self {
            reports,
            lambdas,
            epsilons,
        })
    }

    /// Read every `cells/*/report.json` under `out`.
    pub fn load(out: &Path) -> Result<Self> {
        let cells = out.join(CELLS_DIR);
        let mut paths: Vec<PathBuf> = match fs::read_dir(&cells) {
            Ok(entries) => entries
                .filter_map(|e| e.ok())
                .map(|e| e.path().join(REPORT_JSON))
                .filter(|p| p.is_file())
                .collect(),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
            Err(e) => return Err(FlipError::io(&cells, e)),
        };
        paths.sort();
        if paths.is_empty() {
            return Err(FlipError::InvalidArgument(format!("no cell reports under {}", cells.display())));
        }
        let reports = paths.iter().map(EvalReport::read_json).collect::<Result<Vec<_>>>()?;
        Self::new(reports)
    }

    fn cell_reports(&self, lambda: f64, eps: f64) -> impl Iterator<Item = &EvalReport> {
        self.reports.iter().filter(move |r| {
            let k = key_of(r).expect("validated in new");
            k.lambda == lambda && k.eps_order() == eps
        })
    }

    pub fn stat(&self, lambda: f64, eps: f64, name: &str) -> Option<Stat> {
        let v: Vec<f64> = self.cell_reports(lambda, eps).filter_map(|r| metric(r, name)).collect();
        Stat::of(&v)
    }

    /// Task-fairness statistics keyed by feature name.
    pub fn task_stats(&self, lambda: f64, eps: f64) -> BTreeMap<String, (String, Stat)> {
        let mut vals: BTreeMap<String, (String, Vec<f64>)> = BTreeMap::new();
        for r in self.cell_reports(lambda, eps) {
            for (name, tf) in &r.task_fairness {
                if tf.value.is_finite() {
                    let kind = format!("{:?}", tf.kind).to_lowercase();
                    vals.entry(name.clone()).or_insert((kind, Vec::new())).1.push(tf.value);
                }
            }
        }
        vals.into_iter()
            .filter_map(|(k, (kind, v))| Stat::of(&v).map(|s| (k, (kind, s))))
            .collect()
    }

    fn eps_label(e: f64) -> String {
        if e.is_infinite() { "inf".into() } else { format!("{e}") }
    }
}

fn fmt(v: f64) -> String {
    format!("{v:.6}")
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| FlipError::io(path, e))
}

fn write_csv(path: &Path, rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush().map_err(|e| FlipError::io(path, e))
}

/// Shade from white (worst) to dark green (best).
fn shade(goodness: f64) -> String {
    let g = goodness.clamp(0.0, 1.0);
    let lerp = |a: f64, b: f64| (a + (b - a) * g).round() as u8;
    format!("#{:02x}{:02x}{:02x}", lerp(247.0, 0.0), lerp(252.0, 90.0), lerp(245.0, 50.0))
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Heatmap with labelled rows and columns; `None` cells stay grey.
struct Heatmap<'a> {
    title: &'a str,
    row_axis: &'a str,
    col_axis: &'a str,
    rows: Vec<String>,
    cols: Vec<String>,
    cells: Vec<Vec<Option<Stat>>>,
    higher_is_better: bool,
}

impl Heatmap<'_> {
    fn svg(&self) -> String {
        let (cw, ch, left, top) = (110.0, 44.0, 150.0, 70.0);
        let width = left + cw * self.cols.len() as f64 + 20.0;
        let height = top + ch * self.rows.len() as f64 + 40.0;
        let means: Vec<f64> = self.cells.iter().flatten().flatten().map(|s| s.mean).collect();
        let lo = means.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = means.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="12">"#
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="20" font-size="15" text-anchor="middle">{}</text>"#,
            width / 2.0,
            escape(self.title)
        );
        let direction = if self.higher_is_better { "higher is better" } else { "lower is better" };
        let _ = writeln!(
            s,
            r##"<text x="{}" y="38" text-anchor="middle" fill="#555">{direction}; darker is better</text>"##,
            width / 2.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
            left + cw * self.cols.len() as f64 / 2.0,
            height - 10.0,
            escape(self.col_axis)
        );
        let _ = writeln!(s, r#"<text x="10" y="{}">{}</text>"#, top - 8.0, escape(self.row_axis));
        for (j, c) in self.cols.iter().enumerate() {
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
                left + cw * (j as f64 + 0.5),
                top + ch * self.rows.len() as f64 + 16.0,
                escape(c)
            );
        }
        for (i, r) in self.rows.iter().enumerate() {
            let y = top + ch * i as f64;
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#,
                left - 8.0,
                y + ch / 2.0 + 4.0,
                escape(r)
            );
            for (j, cell) in self.cells[i].iter().enumerate() {
                let x = left + cw * j as f64;
                let (fill, label, ink) = match cell {
                    Some(st) => {
                        let t = if hi > lo { (st.mean - lo) / (hi - lo) } else { 0.5 };
                        let good = if self.higher_is_better { t } else { 1.0 - t };
                        let ink = if good > 0.55 { "#fff" } else { "#000" };
                        (shade(good), format!("{:.3} ± {:.3}", st.mean, st.std), ink)
                    }
                    None => ("#ddd".to_string(), "n/a".to_string(), "#000"),
                };
                let _ = writeln!(
                    s,
                    r##"<rect x="{x}" y="{y}" width="{cw}" height="{ch}" fill="{fill}" stroke="#fff"/>"##
                );
                let _ = writeln!(
                    s,
                    r#"<text x="{}" y="{}" text-anchor="middle" fill="{ink}">{}</text>"#,
                    x + cw / 2.0,
                    y + ch / 2.0 + 4.0,
                    escape(&label)
                );
            }
        }
        s.push_str("</svg>\n");
        s
    }
}

/// Files written by [`write_report`].
#[derive(Debug, Clone)]
pub struct ReportFiles {
    pub summary: PathBuf,
    pub heatmaps: Vec<PathBuf>,
    pub task_fairness: Option<PathBuf>,
}

/// Aggregate the cell reports under `out` into `out/report/`.
pub fn write_report(out: &Path) -> Result<ReportFiles> {
    let agg = Aggregate::load(out)?;
    let dest = out.join("report");
    fs::create_dir_all(&dest).map_err(|e| FlipError::io(&dest, e))?;
    write_aggregate(&agg, &dest)
}

pub fn write_aggregate(agg: &Aggregate, dest: &Path) -> Result<ReportFiles> {
    let eps_labels: Vec<String> = agg.epsilons.iter().map(|&e| Aggregate::eps_label(e)).collect();
    let lambda_labels: Vec<String> = agg.lambdas.iter().map(|l| format!("{l}")).collect();

    let mut summary = vec![["lambda", "epsilon", "metric", "mean", "std", "n"].map(String::from).to_vec()];
    for &l in &agg.lambdas {
        for &e in &agg.epsilons {
            for (name, _) in METRICS {
                if let Some(st) = agg.stat(l, e, name) {
                    summary.push(vec![
                        format!("{l}"),
                        Aggregate::eps_label(e),
                        name.to_string(),
                        fmt(st.mean),
                        fmt(st.std),
                        st.n.to_string(),
                    ]);
                }
            }
        }
    }
    let summary_path = dest.join("summary.csv");
    write_csv(&summary_path, &summary)?;

    let mut heatmaps = Vec::new();
    for (name, higher) in METRICS {
        let cells: Vec<Vec<Option<Stat>>> = agg
            .lambdas
            .iter()
            .map(|&l| agg.epsilons.iter().map(|&e| agg.stat(l, e, name)).collect())
            .collect();
        if cells.iter().flatten().all(Option::is_none) {
            continue;
        }
        let mut rows = vec![std::iter::once("lambda".to_string()).chain(eps_labels.iter().cloned()).collect::<Vec<_>>()];
        for (l, row) in lambda_labels.iter().zip(&cells) {
            let mut r = vec![l.clone()];
            r.extend(row.iter().map(|c| c.map(|s| fmt(s.mean)).unwrap_or_default()));
            rows.push(r);
        }
        write_csv(&dest.join(format!("heatmap_{name}.csv")), &rows)?;
        let svg = Heatmap {
            title: name,
            row_axis: "lambda",
            col_axis: "epsilon",
            rows: lambda_labels.clone(),
            cols: eps_labels.clone(),
            cells,
            higher_is_better: higher,
        }
        .svg();
        let path = dest.join(format!("heatmap_{name}.svg"));
        write_file(&path, &svg)?;
        heatmaps.push(path);
    }

    let mut tf_rows = vec![["lambda", "epsilon", "feature", "kind", "mean", "std", "n"].map(String::from).to_vec()];
    let mut features: Vec<String> = Vec::new();
    let mut grid: Vec<(String, BTreeMap<String, (String, Stat)>)> = Vec::new();
    for &l in &agg.lambdas {
        for &e in &agg.epsilons {
            let stats = agg.task_stats(l, e);
            if stats.is_empty() {
                continue;
            }
            for (f, (kind, st)) in &stats {
                if !features.contains(f) {
                    features.push(f.clone());
                }
                tf_rows.push(vec![
                    format!("{l}"),
                    Aggregate::eps_label(e),
                    f.clone(),
                    kind.clone(),
                    fmt(st.mean),
                    fmt(st.std),
                    st.n.to_string(),
                ]);
            }
            grid.push((format!("λ={l}, ε={}", Aggregate::eps_label(e)), stats));
        }
    }
    let task_fairness = if grid.is_empty() {
        None
    } else {
        features.sort();
        write_csv(&dest.join("task_fairness.csv"), &tf_rows)?;
        let svg = Heatmap {
            title: "task fairness",
            row_axis: "feature",
            col_axis: "cell",
            rows: features.clone(),
            cols: grid.iter().map(|(c, _)| c.clone()).collect(),
            cells: features
                .iter()
                .map(|f| grid.iter().map(|(_, st)| st.get(f).map(|(_, s)| *s)).collect())
                .collect(),
            higher_is_better: false,
        }
        .svg();
        let path = dest.join("task_fairness.svg");
        write_file(&path, &svg)?;
        Some(path)
    };

    Ok(ReportFiles {
        summary: summary_path,
        heatmaps,
        task_fairness,
    })
}
