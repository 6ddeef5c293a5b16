use std::collections::BTreeMap;

use super::catalog::{design_observable, AgeGroup, Block, ItemCatalog};
use super::frame::ObservationFrame;
use crate::error::{Error, Result};

/// Observed items of one classroom, sorted by catalog index.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassroomBlock {
    pub class_id: String,
    pub group: AgeGroup,
    pub items: Vec<usize>,
    pub values: Vec<f64>,
}

impl ClassroomBlock {
    pub fn n_obs(&self) -> usize {
        self.items.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CenterBlock {
    pub center_id: String,
    pub classrooms: Vec<ClassroomBlock>,
}

impl CenterBlock {
    pub fn n_obs(&self) -> usize {
        self.classrooms.iter().map(ClassroomBlock::n_obs).sum()
    }
}

/// Center-stacked long-format design consumed by the likelihood and the
/// factor scorer. Centers are sorted by id, classrooms by id within center.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignBundle {
    pub n_items: usize,
    pub n_factors: usize,
    pub centers: Vec<CenterBlock>,
}

impl DesignBundle {
    pub fn n_rows(&self) -> usize {
        self.centers.iter().map(CenterBlock::n_obs).sum()
    }

    pub fn n_classrooms(&self) -> usize {
        self.centers.iter().map(|c| c.classrooms.len()).sum()
    }

    /// Number of rows per item.
    pub fn item_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_items];
        for c in &self.centers {
            for cl in &c.classrooms {
                for &i in &cl.items {
                    counts[i] += 1;
                }
            }
        }
        counts
    }
}

/// Groups rows by center and classroom, enforcing the block design and the
/// requirement that every classroom carries at least one common-block item.
/// Incidentally missing items are simply absent rows.
pub fn assemble_design(frame: &ObservationFrame, catalog: &ItemCatalog) -> Result<DesignBundle> {
    let mut centers: BTreeMap<&str, BTreeMap<&str, Vec<(usize, f64)>>> = BTreeMap::new();
    for row in frame.rows() {
        let i = catalog
            .item_index(&row.item_id)
            .ok_or_else(|| Error::UnknownItem(row.item_id.clone()))?;
        let info = frame
            .classroom(&row.class_id)
            .ok_or_else(|| Error::UnknownClassroom(row.class_id.clone()))?;
        if !design_observable(catalog.item(i).block, info.group) {
            return Err(Error::ForbiddenRow {
                class_id: row.class_id.clone(),
                item_id: row.item_id.clone(),
                group: info.group.to_string(),
            });
        }
        centers
            .entry(info.center_id.as_str())
            .or_default()
            .entry(row.class_id.as_str())
            .or_default()
            .push((i, row.value));
    }

    let mut out = Vec::with_capacity(centers.len());
    for (center_id, rooms) in centers {
        let mut classrooms = Vec::with_capacity(rooms.len());
        for (class_id, mut obs) in rooms {
            obs.sort_by_key(|&(i, _)| i);
            if !obs.iter().any(|&(i, _)| catalog.item(i).block == Block::Qcit) {
                return Err(Error::UnbridgedClassroom {
                    class_id: class_id.to_string(),
                });
            }
            let group = frame.classroom(class_id).expect("checked above").group;
            classrooms.push(ClassroomBlock {
                class_id: class_id.to_string(),
                group,
                items: obs.iter().map(|&(i, _)| i).collect(),
                values: obs.iter().map(|&(_, v)| v).collect(),
            });
        }
        out.push(CenterBlock {
            center_id: center_id.to_string(),
            classrooms,
        });
    }
    Ok(DesignBundle {
        n_items: catalog.n_items(),
        n_factors: catalog.n_factors(),
        centers: out,
    })
}
