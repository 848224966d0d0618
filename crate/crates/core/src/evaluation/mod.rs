//! Fairness, privacy and utility evaluation of a synthetic table.

mod cluster;
mod gbdt;
mod measures;
mod privacy;

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use cluster::{famd_encode, gmm_cluster, GmmFit};
pub use gbdt::{Gbdt, GbdtConfig, Objective};
pub use measures::{
    auc, ber, downstream_parity, ncb, task_fairness_categorical, task_fairness_numerical, Parity,
};
pub use privacy::{gower_distance, identifiability, GowerMetric};

use crate::error::{FlipError, Result};
use crate::rng::{derive_seed, derived_stream};
use crate::schema_io::{Dataset, FeatureKind};

/// Nearest-neighbour rule recorded with every report.
pub const IDENTIFIABILITY_RULE: &str =
    "share of real training records whose nearest synthetic record (entropy-weighted Gower) is strictly closer than their nearest other real record";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdversaryConfig {
    pub model: GbdtConfig,
    /// Share of synthetic rows the adversary is fitted on.
    pub split_fraction: f64,
    pub clusters: usize,
    pub seed: u64,
}

impl Default for AdversaryConfig {
    fn default() -> Self {
        Self {
            model: GbdtConfig::default(),
            split_fraction: 0.5,
            clusters: 2,
            seed: 0,
        }
    }
}

impl AdversaryConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.split_fraction > 0.0 && self.split_fraction < 1.0) {
            return Err(FlipError::InvalidArgument(format!(
                "split fraction {} must lie in (0, 1)",
                self.split_fraction
            )));
        }
        if self.clusters == 0 {
            return Err(FlipError::InvalidArgument("at least one cluster required".into()));
        }
        self.model.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskFairness {
    pub value: f64,
    pub kind: FeatureKind,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalMetadata {
    pub fold: Option<usize>,
    pub lambda: Option<f64>,
    /// Privacy budget; absent for runs without differential privacy.
    pub epsilon: Option<f64>,
    pub seeds: BTreeMap<String, u64>,
    pub identifiability_rule: String,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ber: f64,
    pub ncb: f64,
    pub a_ncb: f64,
    pub identifiability: f64,
    pub downstream_auc: Option<f64>,
    pub statistical_parity: Option<f64>,
    pub equalized_odds: Option<f64>,
    pub task_fairness: BTreeMap<String, TaskFairness>,
    pub metadata: EvalMetadata,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

impl EvalReport {
    pub fn csv_header(&self) -> Vec<String> {
        let mut h: Vec<String> = [
            "fold",
            "lambda",
            "epsilon",
            "ber",
            "ncb",
            "a_ncb",
            "identifiability",
            "downstream_auc",
            "statistical_parity",
            "equalized_odds",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        h.extend(self.task_fairness.keys().map(|k| format!("tf_{k}")));
        h
    }

    pub fn csv_row(&self) -> Vec<String> {
        let m = &self.metadata;
        let mut r = vec![
            m.fold.map(|f| f.to_string()).unwrap_or_default(),
            fmt_opt(m.lambda),
            m.epsilon.map(|e| format!("{e}")).unwrap_or_else(|| "inf".into()),
            format!("{}", self.ber),
            format!("{}", self.ncb),
            format!("{}", self.a_ncb),
            format!("{}", self.identifiability),
            fmt_opt(self.downstream_auc),
            fmt_opt(self.statistical_parity),
            fmt_opt(self.equalized_odds),
        ];
        r.extend(self.task_fairness.values().map(|t| format!("{}", t.value)));
        r
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| FlipError::io(path, e))
    }

    pub fn read_json(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| FlipError::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Header plus one row.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(self.csv_header())?;
        w.write_record(self.csv_row())?;
        w.flush().map_err(|e| FlipError::io(path, e))
    }
}

/// Numericals as-is and categoricals one-hot, over `cols`.
pub fn design_matrix(d: &Dataset, cols: &[usize]) -> Array2<f64> {
    let mut columns: Vec<Vec<f64>> = Vec::new();
    for &j in cols {
        let f = &d.schema.features[j];
        if f.is_categorical() {
            for c in 0..f.n_categories() {
                columns.push((0..d.n()).map(|i| (d.category(i, j) == c) as u8 as f64).collect());
            }
        } else {
            columns.push(d.values().column(j).to_vec());
        }
    }
    Array2::from_shape_fn((d.n(), columns.len()), |(i, j)| columns[j][i])
}

/// Every column except the protected one and those in `also_skip`.
fn predictor_columns(d: &Dataset, also_skip: &[usize]) -> Vec<usize> {
    let p = d.schema.protected_index();
    (0..d.k()).filter(|&j| j != p && !also_skip.contains(&j)).collect()
}

/// Per-group shuffled split; returns (fit rows, held-out rows), sorted.
fn stratified_split(groups: &[usize], fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut fit = Vec::new();
    let mut held = Vec::new();
    for g in 0..2 {
        let mut rows: Vec<usize> = (0..groups.len()).filter(|&i| groups[i] == g).collect();
        rows.shuffle(&mut derived_stream(seed, &[g as u64]));
        let cut = if rows.len() < 2 {
            rows.len()
        } else {
            ((rows.len() as f64 * fraction).round() as usize).clamp(1, rows.len() - 1)
        };
        fit.extend_from_slice(&rows[..cut]);
        held.extend_from_slice(&rows[cut..]);
    }
    fit.sort_unstable();
    held.sort_unstable();
    (fit, held)
}

/// Adversary predicting S̃ from the other synthetic features.
#[derive(Debug, Clone, PartialEq)]
pub struct AdversaryOutcome {
    /// Balanced error rate on the held-out rows.
    pub ber: f64,
    /// Predicted group for every row (fitted rows included).
    pub predictions: Vec<usize>,
}

pub fn adversary(synth: &Dataset, cfg: &AdversaryConfig) -> Result<AdversaryOutcome> {
    cfg.validate()?;
    let s = synth.groups();
    for g in 0..2 {
        if !s.contains(&g) {
            return Err(FlipError::MissingGroup(g));
        }
    }
    let (fit, held) = stratified_split(&s, cfg.split_fraction, derive_seed(cfg.seed, &[0]));
    let x = design_matrix(synth, &predictor_columns(synth, &[]));
    let xf = x.select(ndarray::Axis(0), &fit);
    let yf: Vec<f64> = fit.iter().map(|&i| s[i] as f64).collect();
    let model = Gbdt::fit(&xf, &yf, Objective::Classification(2), &cfg.model)?;
    let predictions = model.predict_class(&x);
    let hp: Vec<usize> = held.iter().map(|&i| predictions[i]).collect();
    let hs: Vec<usize> = held.iter().map(|&i| s[i]).collect();
    Ok(AdversaryOutcome {
        ber: ber(&hp, &hs)?,
        predictions,
    })
}

/// Clusters of the synthetic predictors (protected feature excluded).
pub fn predictor_clusters(synth: &Dataset, cfg: &AdversaryConfig) -> Result<Vec<usize>> {
    let (scores, _) = famd_encode(synth, &predictor_columns(synth, &[]))?;
    Ok(gmm_cluster(&scores, cfg.clusters, derive_seed(cfg.seed, &[1]))?.labels)
}

/// Train on the synthetic table, predict every non-protected feature of
/// the real test table from the remaining non-protected features.
pub fn task_fairness(synth: &Dataset, real_test: &Dataset, model: &GbdtConfig) -> Result<BTreeMap<String, TaskFairness>> {
    let s = real_test.groups();
    let mut out = BTreeMap::new();
    for j in predictor_columns(synth, &[]) {
        let f = &synth.schema.features[j];
        let cols = predictor_columns(synth, &[j]);
        let xs = design_matrix(synth, &cols);
        let xt = design_matrix(real_test, &cols);
        let y: Vec<f64> = synth.values().column(j).to_vec();
        let value = if f.is_categorical() {
            let k = f.n_categories();
            let m = Gbdt::fit(&xs, &y, Objective::Classification(k), model)?;
            task_fairness_categorical(&m.predict_class(&xt), &s, k)?
        } else {
            let m = Gbdt::fit(&xs, &y, Objective::Regression, model)?;
            let p = m.predict(&xt);
            let g1: Vec<f64> = (0..s.len()).filter(|&i| s[i] == 1).map(|i| p[[i, 0]]).collect();
            let g0: Vec<f64> = (0..s.len()).filter(|&i| s[i] == 0).map(|i| p[[i, 0]]).collect();
            task_fairness_numerical(&g1, &g0)?
        };
        out.insert(f.name.clone(), TaskFairness { value, kind: f.kind });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Downstream {
    pub auc: f64,
    pub parity: Parity,
}

/// Train-on-synthetic, test-on-real classifier for the schema's binary
/// target. `None` when the schema has no binary categorical target.
pub fn downstream(synth: &Dataset, real_test: &Dataset, model: &GbdtConfig) -> Result<Option<Downstream>> {
    let Some(t) = synth.schema.target_index() else {
        return Ok(None);
    };
    let f = &synth.schema.features[t];
    if !f.is_categorical() || f.n_categories() != 2 {
        return Ok(None);
    }
    let cols = predictor_columns(synth, &[t]);
    let y: Vec<f64> = synth.values().column(t).to_vec();
    let m = Gbdt::fit(&design_matrix(synth, &cols), &y, Objective::Classification(2), model)?;
    let p = m.predict(&design_matrix(real_test, &cols));
    let scores: Vec<f64> = p.column(1).to_vec();
    let labels: Vec<usize> = (0..real_test.n()).map(|i| real_test.category(i, t)).collect();
    let preds: Vec<usize> = scores.iter().map(|&v| usize::from(v > 0.5)).collect();
    Ok(Some(Downstream {
        auc: auc(&scores, &labels)?,
        parity: downstream_parity(&preds, &labels, &real_test.groups())?,
    }))
}

/// Full evaluation of `synth` against the real training rows (privacy) and
/// the held-out real rows (task fairness and utility).
pub fn evaluate(real_train: &Dataset, real_test: &Dataset, synth: &Dataset, cfg: &AdversaryConfig) -> Result<EvalReport> {
    cfg.validate()?;
    for d in [real_test, synth] {
        if d.schema != real_train.schema {
            return Err(FlipError::Schema("evaluated tables do not share one schema".into()));
        }
    }
    let mut warnings = Vec::new();
    let adv = adversary(synth, cfg)?;
    let clusters = predictor_clusters(synth, cfg)?;
    let (plain_ncb, undefined) = ncb(&clusters, &synth.groups())?;
    if undefined > 0 {
        warnings.push(format!("{undefined} undefined balance ratios in cluster balance"));
    }
    let (a_ncb, undefined) = ncb(&clusters, &adv.predictions)?;
    if undefined > 0 {
        warnings.push(format!(
            "adversary predicted a single group; {undefined} undefined balance ratios scored 0"
        ));
    }
    let metric = GowerMetric::fit(real_train)?;
    let ident = identifiability(real_train, synth, &metric)?;
    let tf = task_fairness(synth, real_test, &cfg.model)?;
    let ds = match downstream(synth, real_test, &cfg.model) {
        Ok(d) => d,
        Err(e) => {
            warnings.push(format!("downstream classifier skipped: {e}"));
            None
        }
    };
    if let Some(d) = &ds {
        if d.parity.skipped_cells > 0 {
            warnings.push(format!("{} empty (group, label) cells skipped in equalized odds", d.parity.skipped_cells));
        }
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    let mut seeds = BTreeMap::new();
    seeds.insert("adversary".to_string(), cfg.seed);
    Ok(EvalReport {
        ber: adv.ber,
        ncb: plain_ncb,
        a_ncb,
        identifiability: ident,
        downstream_auc: ds.map(|d| d.auc),
        statistical_parity: ds.map(|d| d.parity.statistical_parity),
        equalized_odds: ds.map(|d| d.parity.equalized_odds),
        task_fairness: tf,
        metadata: EvalMetadata {
            seeds,
            identifiability_rule: IDENTIFIABILITY_RULE.to_string(),
            warnings,
            ..EvalMetadata::default()
        },
    })
}
