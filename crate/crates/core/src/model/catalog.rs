use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Instrument block an item belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Block {
    #[serde(rename = "QCIT")]
    Qcit,
    #[serde(rename = "CLASS_T")]
    ClassT,
    #[serde(rename = "CLASS_I")]
    ClassI,
}

impl fmt::Display for Block {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Block::Qcit => "QCIT",
            Block::ClassT => "CLASS_T",
            Block::ClassI => "CLASS_I",
        })
    }
}

/// Classroom age group, which decides the administered CLASS block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AgeGroup {
    Infant,
    Toddler,
}

impl AgeGroup {
    pub const ALL: [AgeGroup; 2] = [AgeGroup::Infant, AgeGroup::Toddler];

    pub fn parse(s: &str) -> Option<AgeGroup> {
        match s.trim().to_ascii_lowercase().as_str() {
            "infant" | "i" => Some(AgeGroup::Infant),
            "toddler" | "t" => Some(AgeGroup::Toddler),
            _ => None,
        }
    }
}

impl fmt::Display for AgeGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AgeGroup::Infant => "Infant",
            AgeGroup::Toddler => "Toddler",
        })
    }
}

/// Design rule: the common block is administered everywhere, each CLASS
/// block only in its own age group.
pub fn design_observable(block: Block, group: AgeGroup) -> bool {
    matches!(
        (block, group),
        (Block::Qcit, _) | (Block::ClassT, AgeGroup::Toddler) | (Block::ClassI, AgeGroup::Infant)
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemSpec {
    pub item_id: String,
    pub block: Block,
    /// 1-based factor index as written in catalog files.
    pub factor: usize,
    #[serde(default)]
    pub anchor: bool,
    #[serde(default)]
    pub label: String,
    /// Reverse-keyed items are sign-flipped before standardization.
    #[serde(default)]
    pub reverse: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorSpec {
    pub index: usize,
    pub name: String,
}

#[derive(Serialize, Deserialize)]
struct CatalogFile {
    #[serde(default, rename = "factor")]
    factors: Vec<FactorSpec>,
    #[serde(rename = "item")]
    items: Vec<ItemSpec>,
}

/// Validated item-to-factor assignment with one marker item per factor.
#[derive(Debug, Clone, PartialEq)]
pub struct ItemCatalog {
    factors: Vec<FactorSpec>,
    items: Vec<ItemSpec>,
    index: HashMap<String, usize>,
    anchors: Vec<usize>,
}

impl ItemCatalog {
    pub fn new(factors: Vec<FactorSpec>, items: Vec<ItemSpec>) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::InvalidCatalog("catalog has no items".into()));
        }
        let mut index = HashMap::with_capacity(items.len());
        for (i, item) in items.iter().enumerate() {
            if index.insert(item.item_id.clone(), i).is_some() {
                return Err(Error::InvalidCatalog(format!(
                    "duplicate item_id {}",
                    item.item_id
                )));
            }
        }
        let used: BTreeSet<usize> = items.iter().map(|it| it.factor).collect();
        let n_factors = *used.iter().next_back().unwrap();
        if used.len() != n_factors || used.contains(&0) {
            return Err(Error::InvalidCatalog(format!(
                "factor indices must form 1..F, got {:?}",
                used
            )));
        }

        let mut anchors = vec![usize::MAX; n_factors];
        for (i, item) in items.iter().enumerate() {
            if item.anchor {
                let slot = &mut anchors[item.factor - 1];
                if *slot != usize::MAX {
                    return Err(Error::InvalidCatalog(format!(
                        "factor {} has more than one anchor",
                        item.factor
                    )));
                }
                *slot = i;
            }
        }
        if let Some(f) = anchors.iter().position(|&a| a == usize::MAX) {
            return Err(Error::InvalidCatalog(format!("factor {} has no anchor", f + 1)));
        }

        for f in 1..=n_factors {
            let blocks: BTreeSet<Block> = items
                .iter()
                .filter(|it| it.factor == f)
                .map(|it| it.block)
                .collect();
            if blocks.len() > 1 {
                return Err(Error::InvalidCatalog(format!(
                    "factor {f} mixes instrument blocks {blocks:?}"
                )));
            }
        }

        let mut factors = factors;
        if factors.is_empty() {
            factors = (1..=n_factors)
                .map(|f| FactorSpec {
                    index: f,
                    name: format!("F{f}"),
                })
                .collect();
        }
        factors.sort_by_key(|fs| fs.index);
        let declared: Vec<usize> = factors.iter().map(|fs| fs.index).collect();
        if declared != (1..=n_factors).collect::<Vec<_>>() {
            return Err(Error::InvalidCatalog(format!(
                "factor table {declared:?} does not match item factor indices 1..{n_factors}"
            )));
        }

        Ok(Self {
            factors,
            items,
            index,
            anchors,
        })
    }

    pub fn from_toml_str(text: &str) -> std::result::Result<Self, String> {
        let file: CatalogFile = toml::from_str(text).map_err(|e| e.to_string())?;
        Self::new(file.factors, file.items).map_err(|e| e.to_string())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|m| Error::parse(path, m))
    }

    pub fn to_toml_string(&self) -> String {
        let file = CatalogFile {
            factors: self.factors.clone(),
            items: self.items.clone(),
        };
        toml::to_string(&file).expect("catalog serializes")
    }

    pub fn n_items(&self) -> usize {
        self.items.len()
    }

    pub fn n_factors(&self) -> usize {
        self.factors.len()
    }

    pub fn items(&self) -> &[ItemSpec] {
        &self.items
    }

    pub fn item(&self, i: usize) -> &ItemSpec {
        &self.items[i]
    }

    pub fn item_index(&self, item_id: &str) -> Option<usize> {
        self.index.get(item_id).copied()
    }

    /// Zero-based factor of item `i`.
    pub fn factor_of(&self, i: usize) -> usize {
        self.items[i].factor - 1
    }

    /// Zero-based factor assignment for every item.
    pub fn factor_assignment(&self) -> Vec<usize> {
        (0..self.n_items()).map(|i| self.factor_of(i)).collect()
    }

    /// Item index of the marker item of zero-based factor `f`.
    pub fn anchor_of(&self, f: usize) -> usize {
        self.anchors[f]
    }

    pub fn anchors(&self) -> &[usize] {
        &self.anchors
    }

    pub fn factor_name(&self, f: usize) -> &str {
        &self.factors[f].name
    }

    pub fn factor_names(&self) -> Vec<String> {
        self.factors.iter().map(|f| f.name.clone()).collect()
    }

    pub fn factor_block(&self, f: usize) -> Block {
        self.items
            .iter()
            .find(|it| it.factor == f + 1)
            .map(|it| it.block)
            .expect("every factor has at least one item")
    }

    pub fn permitted_items(&self, group: AgeGroup) -> Vec<usize> {
        (0..self.n_items())
            .filter(|&i| design_observable(self.items[i].block, group))
            .collect()
    }

    /// Entry (f, g) is true when some age group observes indicators of both
    /// factors, so that their covariance enters the likelihood.
    pub fn identified_mask(&self) -> Vec<Vec<bool>> {
        let nf = self.n_factors();
        let mut mask = vec![vec![false; nf]; nf];
        for group in AgeGroup::ALL {
            let seen: Vec<bool> = (0..nf)
                .map(|f| design_observable(self.factor_block(f), group))
                .collect();
            for f in 0..nf {
                for g in 0..nf {
                    if seen[f] && seen[g] {
                        mask[f][g] = true;
                    }
                }
            }
        }
        mask
    }

    /// Six-factor, 25-item configuration: three common-block factors, two
    /// toddler CLASS factors, one infant CLASS factor.
    pub fn default_six_factor() -> Self {
        const ROWS: &[(&str, Block, usize, bool, &str)] = &[
            ("resp_social_cues", Block::Qcit, 1, true, "Responding to social cues"),
            ("resp_emotional_cues", Block::Qcit, 1, false, "Responding to emotional cues"),
            ("builds_pos_relation", Block::Qcit, 1, false, "Builds positive relationship"),
            ("sup_peer_interaction", Block::Qcit, 1, false, "Supporting peer interaction"),
            ("sup_object_explore", Block::Qcit, 2, true, "Supporting object exploration"),
            ("scaff_problem_solve", Block::Qcit, 2, false, "Scaffolding problem solving"),
            ("unique_concepts_7cat", Block::Qcit, 2, false, "Number of unique concepts"),
            ("caregiver_varied_vocab", Block::Qcit, 3, true, "Use of varied vocabulary"),
            ("caregiver_questions", Block::Qcit, 3, false, "Use of questions"),
            ("conv_turn_taking", Block::Qcit, 3, false, "Conversational turn-taking"),
            ("extend_child_lang", Block::Qcit, 3, false, "Extending child language"),
            ("engage_in_books", Block::Qcit, 3, false, "Engaging children in books"),
            ("variety_words", Block::Qcit, 3, false, "Variety of words"),
            ("variety_sent_types", Block::Qcit, 3, false, "Variety of sentence styles"),
            ("toddler_pos_climate", Block::ClassT, 4, true, "Positive climate"),
            ("toddler_teacher_sens", Block::ClassT, 4, false, "Teacher sensitivity (Toddler)"),
            ("toddler_child_persp", Block::ClassT, 4, false, "Regard for child perspectives"),
            ("toddler_behav_guidance", Block::ClassT, 4, false, "Behavioral guidance"),
            ("toddler_fac_learning", Block::ClassT, 5, true, "Facilitation of learning/dev."),
            ("toddler_quality_feedback", Block::ClassT, 5, false, "Quality of feedback"),
            ("toddler_lang_model", Block::ClassT, 5, false, "Language modeling"),
            ("infant_rel_climate", Block::ClassI, 6, true, "Relational climate"),
            ("infant_teacher_sens", Block::ClassI, 6, false, "Teacher sensitivity (Infant)"),
            ("infant_fac_explore", Block::ClassI, 6, false, "Facilitated exploration"),
            ("infant_early_lang", Block::ClassI, 6, false, "Early language support"),
        ];
        const FACTORS: [&str; 6] = [
            "QCIT Social-Emotional",
            "QCIT Cognitive",
            "QCIT Language-Literacy",
            "CLASS-T Emotional-Behavioral",
            "CLASS-T Learning",
            "CLASS-I Responsive",
        ];
        let factors = FACTORS
            .iter()
            .enumerate()
            .map(|(i, name)| FactorSpec {
                index: i + 1,
                name: (*name).to_string(),
            })
            .collect();
        let items = ROWS
            .iter()
            .map(|&(id, block, factor, anchor, label)| ItemSpec {
                item_id: id.to_string(),
                block,
                factor,
                anchor,
                label: label.to_string(),
                reverse: false,
            })
            .collect();
        Self::new(factors, items).expect("bundled catalog is valid")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(id: &str, block: Block, factor: usize, anchor: bool) -> ItemSpec {
        ItemSpec {
            item_id: id.into(),
            block,
            factor,
            anchor,
            label: String::new(),
            reverse: false,
        }
    }

    #[test]
    fn design_rule_table() {
        assert!(design_observable(Block::ClassT, AgeGroup::Toddler));
        assert!(!design_observable(Block::ClassT, AgeGroup::Infant));
        assert!(design_observable(Block::Qcit, AgeGroup::Infant));
        assert!(design_observable(Block::Qcit, AgeGroup::Toddler));
        assert!(!design_observable(Block::ClassI, AgeGroup::Toddler));
        assert!(design_observable(Block::ClassI, AgeGroup::Infant));
    }

    #[test]
    fn default_catalog_partitions_into_18_and_21() {
        let cat = ItemCatalog::default_six_factor();
        assert_eq!(cat.n_items(), 25);
        assert_eq!(cat.n_factors(), 6);
        assert_eq!(cat.permitted_items(AgeGroup::Infant).len(), 18);
        assert_eq!(cat.permitted_items(AgeGroup::Toddler).len(), 21);
    }

    #[test]
    fn identified_mask_excludes_cross_class_block() {
        let cat = ItemCatalog::default_six_factor();
        let mask = cat.identified_mask();
        for f in 0..6 {
            for g in 0..6 {
                let cross = (f == 5 && (g == 3 || g == 4)) || (g == 5 && (f == 3 || f == 4));
                assert_eq!(mask[f][g], !cross, "({f},{g})");
            }
        }
    }

    #[test]
    fn rejects_missing_or_double_anchor() {
        let err = ItemCatalog::new(
            vec![],
            vec![spec("a", Block::Qcit, 1, false), spec("b", Block::Qcit, 1, false)],
        );
        assert!(matches!(err, Err(Error::InvalidCatalog(_))));
        let err = ItemCatalog::new(
            vec![],
            vec![spec("a", Block::Qcit, 1, true), spec("b", Block::Qcit, 1, true)],
        );
        assert!(matches!(err, Err(Error::InvalidCatalog(_))));
    }

    #[test]
    fn rejects_gap_in_factor_indices_and_duplicate_ids() {
        let err = ItemCatalog::new(
            vec![],
            vec![spec("a", Block::Qcit, 1, true), spec("b", Block::Qcit, 3, true)],
        );
        assert!(matches!(err, Err(Error::InvalidCatalog(_))));
        let err = ItemCatalog::new(
            vec![],
            vec![spec("a", Block::Qcit, 1, true), spec("a", Block::Qcit, 1, false)],
        );
        assert!(matches!(err, Err(Error::InvalidCatalog(_))));
    }

    #[test]
    fn toml_round_trip() {
        let cat = ItemCatalog::default_six_factor();
        let text = cat.to_toml_string();
        let back = ItemCatalog::from_toml_str(&text).unwrap();
        assert_eq!(back, cat);
    }
}
