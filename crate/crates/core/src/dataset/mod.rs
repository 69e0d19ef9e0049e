mod synthetic;
mod voc;

pub use synthetic::{
    class_color, class_family, generate_synthetic_dataset, ShapeFamily, SyntheticSpec,
};
pub use voc::{load_voc_format, write_voc_format};
