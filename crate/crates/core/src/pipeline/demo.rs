//! Constructed biased table for demonstrations and tests.

use ndarray::Array2;
use rand::Rng;

use crate::error::Result;
use crate::rng::{sample_normal, stream};
use crate::schema_io::{Dataset, FeatureSpec, TabularSchema};

/// Schema of [`biased_dataset`]: two numericals and two categoricals that
/// all depend on the binary protected attribute `sex`; `income` is the
/// downstream target.
pub fn biased_schema() -> TabularSchema {
    TabularSchema::new(
        vec![
            FeatureSpec::numerical("hours"),
            FeatureSpec::numerical("capital"),
            FeatureSpec::categorical("occupation", ["clerical", "craft", "managerial"]),
            FeatureSpec::categorical("sex", ["female", "male"]),
            FeatureSpec::categorical("income", ["low", "high"]),
        ],
        "sex",
        Some("income".into()),
    )
    .expect("static schema is valid")
}

/// `n` records with one third in the protected group `female`.
pub fn biased_dataset(n: usize, seed: u64) -> Result<Dataset> {
    let mut rng = stream(seed);
    let mut v = Array2::zeros((n, 5));
    for i in 0..n {
        let s = if rng.random::<f64>() < 1.0 / 3.0 { 0.0 } else { 1.0 };
        let hours = 35.0 + 8.0 * s + 6.0 * sample_normal(&mut rng);
        let capital = (0.5 * sample_normal(&mut rng) + 0.8 * s).exp();
        let u: f64 = rng.random();
        let occupation = if s == 1.0 {
            if u < 0.2 { 0.0 } else if u < 0.6 { 1.0 } else { 2.0 }
        } else if u < 0.65 {
            0.0
        } else if u < 0.85 {
            1.0
        } else {
            2.0
        };
        let score = 0.12 * (hours - 40.0) + 0.8 * capital.ln() + 0.7 * (occupation == 2.0) as u8 as f64 - 0.3;
        let income = (rng.random::<f64>() < 1.0 / (1.0 + (-score).exp())) as u8 as f64;
        v.row_mut(i).assign(&ndarray::arr1(&[hours, capital, occupation, s, income]));
    }
    Dataset::new(biased_schema(), v)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn groups_are_imbalanced_and_features_biased() {
        let d = biased_dataset(3000, 1).unwrap();
        let counts = d.group_counts();
        let share = counts[0] as f64 / 3000.0;
        assert!((share - 1.0 / 3.0).abs() < 0.03, "{share}");
        let mean = |g: usize| {
            let rows: Vec<usize> = (0..3000).filter(|&i| d.category(i, 3) == g).collect();
            rows.iter().map(|&i| d.values()[[i, 0]]).sum::<f64>() / rows.len() as f64
        };
        assert!(mean(1) - mean(0) > 6.0);
    }
}
