use std::collections::HashMap;

use crate::error::{Error, Result};

/// Dense model x sample score table, stored model-major so each model's
/// responses over the pool are one contiguous row.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMatrix {
    model_ids: Vec<String>,
    sample_ids: Vec<String>,
    values: Vec<f64>,
    sample_index: HashMap<String, usize>,
    model_index: HashMap<String, usize>,
}

impl ScoreMatrix {
    pub fn from_rows(model_ids: Vec<String>, sample_ids: Vec<String>, rows: Vec<Vec<f64>>) -> Result<Self> {
        if rows.len() != model_ids.len() {
            return Err(Error::invalid(format!(
                "{} rows for {} models",
                rows.len(),
                model_ids.len()
            )));
        }
        let mut values = Vec::with_capacity(model_ids.len() * sample_ids.len());
        for (m, row) in rows.into_iter().enumerate() {
            if row.len() != sample_ids.len() {
                return Err(Error::invalid(format!(
                    "row for `{}` has {} entries, expected {}",
                    model_ids[m],
                    row.len(),
                    sample_ids.len()
                )));
            }
            if let Some(j) = row.iter().position(|v| !v.is_finite()) {
                return Err(Error::invalid(format!(
                    "non-finite score for `{}` on `{}`",
                    model_ids[m], sample_ids[j]
                )));
            }
            values.extend(row);
        }
        let sample_index = index_of(&sample_ids)?;
        let model_index = index_of(&model_ids).map_err(|e| match e {
            Error::DuplicateId(id) => Error::invalid(format!("duplicate model id `{id}`")),
            other => other,
        })?;
        Ok(ScoreMatrix {
            model_ids,
            sample_ids,
            values,
            sample_index,
            model_index,
        })
    }

    pub fn n_models(&self) -> usize {
        self.model_ids.len()
    }

    pub fn n_samples(&self) -> usize {
        self.sample_ids.len()
    }

    pub fn model_ids(&self) -> &[String] {
        &self.model_ids
    }

    pub fn sample_ids(&self) -> &[String] {
        &self.sample_ids
    }

    pub fn row(&self, model: usize) -> &[f64] {
        let n = self.n_samples();
        &self.values[model * n..(model + 1) * n]
    }

    pub fn row_by_id(&self, model_id: &str) -> Result<&[f64]> {
        Ok(self.row(self.model_position(model_id)?))
    }

    pub fn model_position(&self, model_id: &str) -> Result<usize> {
        self.model_index
            .get(model_id)
            .copied()
            .ok_or_else(|| Error::UnknownModel(model_id.to_string()))
    }

    pub fn sample_position(&self, sample_id: &str) -> Option<usize> {
        self.sample_index.get(sample_id).copied()
    }

    pub fn get(&self, model: usize, sample: usize) -> f64 {
        self.values[model * self.n_samples() + sample]
    }

    /// Per-sample column across all models.
    pub fn column(&self, sample: usize) -> Vec<f64> {
        (0..self.n_models()).map(|m| self.get(m, sample)).collect()
    }

    /// Sub-matrix restricted to the given model positions.
    pub fn select_models(&self, models: &[usize]) -> Result<ScoreMatrix> {
        ScoreMatrix::from_rows(
            models.iter().map(|&m| self.model_ids[m].clone()).collect(),
            self.sample_ids.clone(),
            models.iter().map(|&m| self.row(m).to_vec()).collect(),
        )
    }
}

fn index_of(ids: &[String]) -> Result<HashMap<String, usize>> {
    let mut map = HashMap::with_capacity(ids.len());
    for (i, id) in ids.iter().enumerate() {
        if map.insert(id.clone(), i).is_some() {
            return Err(Error::DuplicateId(id.clone()));
        }
    }
    Ok(map)
}
