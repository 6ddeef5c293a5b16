//! Domain types, standardization, the block-design rule and assembly of the
//! center-stacked design used by the fitter.

mod catalog;
mod design;
mod frame;
mod params;

pub use catalog::{design_observable, AgeGroup, Block, FactorSpec, ItemCatalog, ItemSpec};
pub use design::{assemble_design, CenterBlock, ClassroomBlock, DesignBundle};
pub use frame::{ClassroomInfo, ItemScale, Observation, ObservationFrame};
pub use params::{ConstraintMeta, ParameterSet, StartValues};
