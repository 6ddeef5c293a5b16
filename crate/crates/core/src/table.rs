use std::collections::HashMap;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Numeric classroom-level columns (covariates or outcomes). Missing cells
/// are NaN.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassroomTable {
    pub columns: Vec<String>,
    pub class_ids: Vec<String>,
    /// Center of each row when the source carries one.
    pub center_ids: Option<Vec<String>>,
    pub values: DMatrix<f64>,
    index: HashMap<String, usize>,
}

impl ClassroomTable {
    pub fn new(
        columns: Vec<String>,
        class_ids: Vec<String>,
        center_ids: Option<Vec<String>>,
        values: DMatrix<f64>,
    ) -> Result<Self> {
        if values.shape() != (class_ids.len(), columns.len()) {
            return Err(Error::DimensionMismatch(format!(
                "table of {} rows x {} columns given a {}x{} value matrix",
                class_ids.len(),
                columns.len(),
                values.nrows(),
                values.ncols()
            )));
        }
        if let Some(c) = &center_ids {
            if c.len() != class_ids.len() {
                return Err(Error::DimensionMismatch("center ids do not match rows".into()));
            }
        }
        let mut index = HashMap::with_capacity(class_ids.len());
        for (r, id) in class_ids.iter().enumerate() {
            if index.insert(id.clone(), r).is_some() {
                return Err(Error::DimensionMismatch(format!("duplicate class_id {id}")));
            }
        }
        Ok(Self {
            columns,
            class_ids,
            center_ids,
            values,
            index,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.class_ids.len()
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    pub fn row_of(&self, class_id: &str) -> Option<usize> {
        self.index.get(class_id).copied()
    }

    /// Row of `class_id` if every column is present.
    pub fn complete_row(&self, class_id: &str) -> Option<Vec<f64>> {
        let r = self.row_of(class_id)?;
        let row: Vec<f64> = self.values.row(r).iter().copied().collect();
        row.iter().all(|v| v.is_finite()).then_some(row)
    }

    pub fn get(&self, class_id: &str, column: usize) -> Option<f64> {
        let v = self.values[(self.row_of(class_id)?, column)];
        v.is_finite().then_some(v)
    }
}
