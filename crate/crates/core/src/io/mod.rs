//! Model files and datasets.

pub mod data;
pub mod format;
pub mod model;

pub use data::{load_dataset, Augment, Dataset, DatasetSource, Splits, SyntheticSpec};
pub use format::{Block, Entry, EntryData, TernModelFile};
pub use model::{
    adopt_policies, init_from_pretrained, is_ternary_file, load_fp, load_ternary, save_fp,
    save_ternary, weight_entries,
};
