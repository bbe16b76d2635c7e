//! Synthetic datasets, parameterized transformations and induced domains.

mod dataset;
mod family;
mod io;
mod transform;

pub use dataset::{
    induce_domain, make_concat_shortcut_dataset, make_gaussian_mixture, make_shortcut_dataset,
    make_toy_axis_dataset, toy_label, Dataset, DatasetSpec, Domain, ShortcutLayout,
};
pub use family::{
    sample_transformations, toy_axis_family, FamilyKind, FamilySpec, ParamDomain, Sampling,
    TransformationFamily,
};
pub use io::{
    dataset_to_string, header_for, parse_dataset, read_dataset, write_dataset, DatasetHeader,
    HEADER_PREFIX,
};
pub use transform::{apply_transformation, Transformation};
