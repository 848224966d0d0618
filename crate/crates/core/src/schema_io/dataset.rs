use std::path::Path;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;

use super::schema::{FeatureKind, TabularSchema};
use crate::error::{FlipError, Result};
use crate::rng;

/// A typed table: numerical cells hold reals, categorical cells hold the
/// category index (stored exactly as a small integer in `f64`).
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub schema: TabularSchema,
    values: Array2<f64>,
}

impl Dataset {
    pub fn new(schema: TabularSchema, values: Array2<f64>) -> Result<Self> {
        if values.ncols() != schema.k() {
            return Err(FlipError::Shape(format!(
                "table has {} columns, schema declares {}",
                values.ncols(),
                schema.k()
            )));
        }
        for (j, f) in schema.features.iter().enumerate() {
            for (i, &v) in values.column(j).iter().enumerate() {
                if !v.is_finite() {
                    return Err(FlipError::MissingCell {
                        row: i,
                        column: f.name.clone(),
                    });
                }
                if f.is_categorical() && (v < 0.0 || v.fract() != 0.0 || v as usize >= f.n_categories())
                {
                    return Err(FlipError::UnknownCategory {
                        row: i,
                        column: f.name.clone(),
                        value: v.to_string(),
                    });
                }
            }
        }
        Ok(Self { schema, values })
    }

    pub fn n(&self) -> usize {
        self.values.nrows()
    }

    pub fn k(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn value(&self, row: usize, col: usize) -> f64 {
        self.values[[row, col]]
    }

    pub fn category(&self, row: usize, col: usize) -> usize {
        self.values[[row, col]] as usize
    }

    /// Protected group index per row.
    pub fn groups(&self) -> Vec<usize> {
        let p = self.schema.protected_index();
        (0..self.n()).map(|i| self.category(i, p)).collect()
    }

    pub fn group_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.schema.n_groups()];
        for g in self.groups() {
            counts[g] += 1;
        }
        counts
    }

    /// Row indices partitioned by protected group.
    pub fn group_members(&self) -> Vec<Vec<usize>> {
        let mut members = vec![Vec::new(); self.schema.n_groups()];
        for (i, g) in self.groups().into_iter().enumerate() {
            members[g].push(i);
        }
        members
    }

    pub fn select_rows(&self, rows: &[usize]) -> Dataset {
        Dataset {
            schema: self.schema.clone(),
            values: self.values.select(Axis(0), rows),
        }
    }

    pub fn with_column(&self, col: usize, column: &[f64]) -> Result<Dataset> {
        let mut values = self.values.clone();
        for (i, &v) in column.iter().enumerate() {
            values[[i, col]] = v;
        }
        Dataset::new(self.schema.clone(), values)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| FlipError::io(path, e))?;
        let mut w = csv::Writer::from_writer(file);
        w.write_record(self.schema.names())?;
        for row in self.values.rows() {
            let rec: Vec<String> = row
                .iter()
                .zip(&self.schema.features)
                .map(|(&v, f)| match f.kind {
                    FeatureKind::Numerical => format!("{v}"),
                    FeatureKind::Categorical => f.categories[v as usize].clone(),
                })
                .collect();
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| FlipError::io(path, e))?;
        Ok(())
    }
}

/// Read a CSV file that conforms to `schema`.
pub fn load_dataset(path: impl AsRef<Path>, schema: &TabularSchema) -> Result<Dataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| FlipError::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let header: Vec<String> = reader.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let expected = schema.names();
    if header != expected {
        return Err(FlipError::HeaderMismatch {
            expected,
            found: header,
        });
    }
    let mut data = Vec::new();
    let mut n = 0;
    for (row, rec) in reader.records().enumerate() {
        let rec = rec?;
        if rec.len() != schema.k() {
            return Err(FlipError::Shape(format!(
                "row {row} has {} cells, expected {}",
                rec.len(),
                schema.k()
            )));
        }
        for (cell, f) in rec.iter().zip(&schema.features) {
            let cell = cell.trim();
            if cell.is_empty() {
                return Err(FlipError::MissingCell {
                    row,
                    column: f.name.clone(),
                });
            }
            let v = match f.kind {
                FeatureKind::Numerical => {
                    let v: f64 = cell.parse().map_err(|_| FlipError::NonNumeric {
                        row,
                        column: f.name.clone(),
                        value: cell.to_string(),
                    })?;
                    if !v.is_finite() {
                        return Err(FlipError::NonNumeric {
                            row,
                            column: f.name.clone(),
                            value: cell.to_string(),
                        });
                    }
                    v
                }
                FeatureKind::Categorical => f.category_index(cell).ok_or_else(|| {
                    FlipError::UnknownCategory {
                        row,
                        column: f.name.clone(),
                        value: cell.to_string(),
                    }
                })? as f64,
            };
            data.push(v);
        }
        n += 1;
    }
    let values = Array2::from_shape_vec((n, schema.k()), data)
        .map_err(|e| FlipError::Shape(e.to_string()))?;
    Dataset::new(schema.clone(), values)
}

pub fn write_dataset(d: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    d.write_csv(path)
}

/// One cross-validation fold.
#[derive(Debug, Clone)]
pub struct Fold {
    pub train: Dataset,
    pub test: Dataset,
    pub test_rows: Vec<usize>,
}

/// Assign rows to test-fold ids, stratified on the protected attribute.
///
/// Each group is shuffled and dealt round-robin; the dealing offset carries
/// over between groups so overall fold sizes differ by at most one.
pub fn stratified_assignment(groups: &[usize], n_groups: usize, folds: usize, seed: u64) -> Vec<usize> {
    let mut members = vec![Vec::new(); n_groups];
    for (i, &g) in groups.iter().enumerate() {
        members[g].push(i);
    }
    let mut assignment = vec![0; groups.len()];
    let mut offset = 0;
    for (g, rows) in members.iter_mut().enumerate() {
        let mut r = rng::derived_stream(seed, &[g as u64]);
        rows.shuffle(&mut r);
        for (pos, &row) in rows.iter().enumerate() {
            assignment[row] = (offset + pos) % folds;
        }
        offset = (offset + rows.len()) % folds;
    }
    assignment
}

pub fn split_cv(d: &Dataset, folds: usize, seed: u64) -> Result<Vec<Fold>> {
    if folds < 2 {
        return Err(FlipError::InvalidArgument("folds must be at least 2".into()));
    }
    if folds > d.n() {
        return Err(FlipError::InvalidArgument(format!(
            "{folds} folds requested for {} rows",
            d.n()
        )));
    }
    let assignment = stratified_assignment(&d.groups(), d.schema.n_groups(), folds, seed);
    Ok((0..folds)
        .map(|f| {
            let test_rows: Vec<usize> = (0..d.n()).filter(|&i| assignment[i] == f).collect();
            let train_rows: Vec<usize> = (0..d.n()).filter(|&i| assignment[i] != f).collect();
            Fold {
                train: d.select_rows(&train_rows),
                test: d.select_rows(&test_rows),
                test_rows,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema_io::schema::FeatureSpec;
    use std::io::Write;

    fn schema() -> TabularSchema {
        TabularSchema::new(
            vec![
                FeatureSpec::numerical("x"),
                FeatureSpec::categorical("s", ["a", "b"]),
                FeatureSpec::categorical("c", ["u", "v", "w"]),
            ],
            "s",
            None,
        )
        .unwrap()
    }

    fn write(dir: &tempfile::TempDir, body: &str) -> std::path::PathBuf {
        let p = dir.path().join("d.csv");
        std::fs::File::create(&p).unwrap().write_all(body.as_bytes()).unwrap();
        p
    }

    #[test]
    fn loads_and_roundtrips() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "x,s,c\n1.5,a,w\n-2,b,u\n0.1,a,v\n");
        let d = load_dataset(&p, &schema()).unwrap();
        assert_eq!(d.n(), 3);
        assert_eq!(d.groups(), vec![0, 1, 0]);
        assert_eq!(d.category(0, 2), 2);
        let q = dir.path().join("out.csv");
        d.write_csv(&q).unwrap();
        assert_eq!(load_dataset(&q, &schema()).unwrap(), d);
    }

    #[test]
    fn empty_file_with_header() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "x,s,c\n");
        assert_eq!(load_dataset(&p, &schema()).unwrap().n(), 0);
    }

    #[test]
    fn rejects_bad_cells() {
        let dir = tempfile::tempdir().unwrap();
        let s = schema();
        let p = write(&dir, "x,s,c\n1,a,z\n");
        assert!(matches!(load_dataset(&p, &s), Err(FlipError::UnknownCategory { .. })));
        let p = write(&dir, "x,s,c\nabc,a,u\n");
        assert!(matches!(load_dataset(&p, &s), Err(FlipError::NonNumeric { .. })));
        let p = write(&dir, "x,s,c\n,a,u\n");
        assert!(matches!(load_dataset(&p, &s), Err(FlipError::MissingCell { .. })));
        let p = write(&dir, "x,c,s\n1,u,a\n");
        assert!(matches!(load_dataset(&p, &s), Err(FlipError::HeaderMismatch { .. })));
        assert!(matches!(
            load_dataset(dir.path().join("missing.csv"), &s),
            Err(FlipError::Io { .. })
        ));
    }

    fn table(groups: &[usize]) -> Dataset {
        let n = groups.len();
        let mut v = Array2::zeros((n, 3));
        for (i, &g) in groups.iter().enumerate() {
            v[[i, 0]] = i as f64;
            v[[i, 1]] = g as f64;
        }
        Dataset::new(schema(), v).unwrap()
    }

    #[test]
    fn cv_partition_of_nine() {
        let d = table(&[0, 0, 0, 0, 0, 0, 1, 1, 1]);
        let folds = split_cv(&d, 3, 11).unwrap();
        let mut all: Vec<usize> = folds.iter().flat_map(|f| f.test_rows.clone()).collect();
        all.sort();
        assert_eq!(all, (0..9).collect::<Vec<_>>());
        for f in &folds {
            assert_eq!(f.test.n(), 3);
            assert_eq!(f.train.n(), 6);
            // 6 zeros and 3 ones over 3 folds: exactly 2 and 1 per fold.
            assert_eq!(f.test.group_counts(), vec![2, 1]);
        }
        let again = split_cv(&d, 3, 11).unwrap();
        for (a, b) in folds.iter().zip(&again) {
            assert_eq!(a.test_rows, b.test_rows);
        }
        assert!(split_cv(&d, 10, 1).is_err());
        assert!(split_cv(&d, 1, 1).is_err());
    }

    proptest::proptest! {
        #[test]
        fn cv_is_stratified_partition(
            groups in proptest::collection::vec(0usize..2, 4..80),
            folds in 2usize..5,
            seed in 0u64..1000,
        ) {
            proptest::prop_assume!(folds <= groups.len());
            let d = table(&groups);
            let parts = split_cv(&d, folds, seed).unwrap();
            let sizes: Vec<usize> = parts.iter().map(|f| f.test.n()).collect();
            let (lo, hi) = (*sizes.iter().min().unwrap(), *sizes.iter().max().unwrap());
            proptest::prop_assert!(hi - lo <= 1);
            proptest::prop_assert_eq!(sizes.iter().sum::<usize>(), groups.len());
            let totals = d.group_counts();
            for f in &parts {
                for (g, &c) in f.test.group_counts().iter().enumerate() {
                    let ideal = totals[g] as f64 / folds as f64;
                    proptest::prop_assert!((c as f64 - ideal).abs() <= 1.0);
                }
            }
        }
    }
}
