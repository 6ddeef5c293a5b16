use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use super::catalog::{AgeGroup, ItemCatalog};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub center_id: String,
    pub class_id: String,
    pub item_id: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassroomInfo {
    pub class_id: String,
    pub center_id: String,
    pub group: AgeGroup,
}

/// Location and scale used to standardize one item.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ItemScale {
    pub mean: f64,
    pub sd: f64,
    pub n_obs: usize,
}

/// Long-format item scores plus the classroom table.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationFrame {
    rows: Vec<Observation>,
    classrooms: BTreeMap<String, ClassroomInfo>,
    standardization: BTreeMap<String, ItemScale>,
}

impl ObservationFrame {
    pub fn new(rows: Vec<Observation>, classrooms: Vec<ClassroomInfo>) -> Result<Self> {
        let classrooms: BTreeMap<String, ClassroomInfo> = classrooms
            .into_iter()
            .map(|c| (c.class_id.clone(), c))
            .collect();
        let mut seen = HashSet::with_capacity(rows.len());
        for row in &rows {
            let info = classrooms
                .get(&row.class_id)
                .ok_or_else(|| Error::UnknownClassroom(row.class_id.clone()))?;
            if info.center_id != row.center_id {
                return Err(Error::DimensionMismatch(format!(
                    "classroom {} listed in center {} but observed in center {}",
                    row.class_id, info.center_id, row.center_id
                )));
            }
            if !row.value.is_finite() {
                return Err(Error::DimensionMismatch(format!(
                    "non-finite value for ({}, {})",
                    row.class_id, row.item_id
                )));
            }
            if !seen.insert((row.class_id.as_str(), row.item_id.as_str())) {
                return Err(Error::DuplicateRow {
                    class_id: row.class_id.clone(),
                    item_id: row.item_id.clone(),
                });
            }
        }
        Ok(Self {
            rows,
            classrooms,
            standardization: BTreeMap::new(),
        })
    }

    pub fn rows(&self) -> &[Observation] {
        &self.rows
    }

    pub fn classrooms(&self) -> impl Iterator<Item = &ClassroomInfo> {
        self.classrooms.values()
    }

    pub fn classroom(&self, class_id: &str) -> Option<&ClassroomInfo> {
        self.classrooms.get(class_id)
    }

    pub fn standardization(&self) -> &BTreeMap<String, ItemScale> {
        &self.standardization
    }

    pub fn is_standardized(&self) -> bool {
        !self.standardization.is_empty()
    }

    /// Sign-flips items the catalog marks as reverse keyed.
    pub fn apply_reverse_coding(&self, catalog: &ItemCatalog) -> Self {
        let mut out = self.clone();
        for row in &mut out.rows {
            if let Some(i) = catalog.item_index(&row.item_id) {
                if catalog.item(i).reverse {
                    row.value = -row.value;
                }
            }
        }
        out
    }

    /// Centers and scales each item over its observed rows (sample SD with
    /// divisor n - 1). Scales compose with any earlier standardization so the
    /// recorded map always inverts to the original raw values.
    pub fn standardize_items(&self) -> Result<Self> {
        let mut by_item: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (r, row) in self.rows.iter().enumerate() {
            by_item.entry(row.item_id.as_str()).or_default().push(r);
        }
        let mut out = self.clone();
        let mut scales = BTreeMap::new();
        for (item, idx) in by_item {
            let n = idx.len();
            if n < 2 {
                return Err(Error::TooFewObservations {
                    item_id: item.to_string(),
                    n,
                });
            }
            let mean = idx.iter().map(|&r| self.rows[r].value).sum::<f64>() / n as f64;
            let ss: f64 = idx
                .iter()
                .map(|&r| (self.rows[r].value - mean).powi(2))
                .sum();
            let sd = (ss / (n - 1) as f64).sqrt();
            if !(sd > 0.0) || sd <= 1e-14 * mean.abs().max(1.0) {
                return Err(Error::ConstantItem {
                    item_id: item.to_string(),
                });
            }
            for &r in &idx {
                out.rows[r].value = (self.rows[r].value - mean) / sd;
            }
            let composed = match self.standardization.get(item) {
                Some(prev) => ItemScale {
                    mean: prev.mean + prev.sd * mean,
                    sd: prev.sd * sd,
                    n_obs: n,
                },
                None => ItemScale { mean, sd, n_obs: n },
            };
            scales.insert(item.to_string(), composed);
        }
        out.standardization = scales;
        Ok(out)
    }
}
