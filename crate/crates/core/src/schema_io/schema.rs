use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{FlipError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    Numerical,
    Categorical,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub name: String,
    pub kind: FeatureKind,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub categories: Vec<String>,
}

impl FeatureSpec {
    pub fn numerical(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            kind: FeatureKind::Numerical,
            categories: Vec::new(),
        }
    }

    pub fn categorical<S: Into<String>>(
        name: impl Into<String>,
        categories: impl IntoIterator<Item = S>,
    ) -> Self {
        Self {
            name: name.into(),
            kind: FeatureKind::Categorical,
            categories: categories.into_iter().map(Into::into).collect(),
        }
    }

    pub fn is_categorical(&self) -> bool {
        self.kind == FeatureKind::Categorical
    }

    pub fn n_categories(&self) -> usize {
        self.categories.len()
    }

    pub fn category_index(&self, label: &str) -> Option<usize> {
        self.categories.iter().position(|c| c == label)
    }
}

/// Ordered feature declarations plus the binary protected attribute.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularSchema {
    pub features: Vec<FeatureSpec>,
    pub protected: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<String>,
}

impl TabularSchema {
    pub fn new(
        features: Vec<FeatureSpec>,
        protected: impl Into<String>,
        target: Option<String>,
    ) -> Result<Self> {
        let schema = Self {
            features,
            protected: protected.into(),
            target,
        };
        schema.validate()?;
        Ok(schema)
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| FlipError::io(path, e))?;
        let schema: TabularSchema = serde_json::from_str(&text)?;
        schema.validate()?;
        Ok(schema)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for f in &self.features {
            if !seen.insert(f.name.as_str()) {
                return Err(FlipError::Schema(format!("duplicate feature '{}'", f.name)));
            }
            match f.kind {
                FeatureKind::Categorical => {
                    if f.categories.len() < 2 {
                        return Err(FlipError::Schema(format!(
                            "categorical feature '{}' declares fewer than 2 categories",
                            f.name
                        )));
                    }
                    let uniq: HashSet<_> = f.categories.iter().collect();
                    if uniq.len() != f.categories.len() {
                        return Err(FlipError::Schema(format!(
                            "categorical feature '{}' repeats a category",
                            f.name
                        )));
                    }
                }
                FeatureKind::Numerical => {
                    if !f.categories.is_empty() {
                        return Err(FlipError::Schema(format!(
                            "numerical feature '{}' declares categories",
                            f.name
                        )));
                    }
                }
            }
        }
        let protected = self
            .feature(&self.protected)
            .ok_or_else(|| FlipError::Schema(format!("protected '{}' is not a feature", self.protected)))?;
        if !protected.is_categorical() || protected.n_categories() != 2 {
            return Err(FlipError::Schema(format!(
                "protected feature '{}' must be categorical with exactly 2 categories",
                self.protected
            )));
        }
        if let Some(t) = &self.target {
            if t == &self.protected {
                return Err(FlipError::Schema("target must differ from protected".into()));
            }
            if self.feature(t).is_none() {
                return Err(FlipError::Schema(format!("target '{t}' is not a feature")));
            }
        }
        Ok(())
    }

    pub fn k(&self) -> usize {
        self.features.len()
    }

    pub fn feature(&self, name: &str) -> Option<&FeatureSpec> {
        self.features.iter().find(|f| f.name == name)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.features.iter().position(|f| f.name == name)
    }

    pub fn protected_index(&self) -> usize {
        self.index_of(&self.protected)
            .expect("validated schema contains its protected feature")
    }

    pub fn target_index(&self) -> Option<usize> {
        self.target.as_deref().and_then(|t| self.index_of(t))
    }

    pub fn n_groups(&self) -> usize {
        self.features[self.protected_index()].n_categories()
    }

    pub fn names(&self) -> Vec<String> {
        self.features.iter().map(|f| f.name.clone()).collect()
    }

    pub fn numerical_indices(&self) -> Vec<usize> {
        (0..self.k())
            .filter(|&j| !self.features[j].is_categorical())
            .collect()
    }

    pub fn categorical_indices(&self) -> Vec<usize> {
        (0..self.k())
            .filter(|&j| self.features[j].is_categorical())
            .collect()
    }
}
