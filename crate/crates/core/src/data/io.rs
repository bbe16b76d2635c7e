use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::dataset::{Dataset, DatasetSpec};
use crate::error::{Error, Result};
use crate::numcore::Tensor;

/// Metadata carried on the first line of a dataset file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetHeader {
    pub n: usize,
    pub d: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub seed: u64,
    pub generator: Option<DatasetSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

pub const HEADER_PREFIX: &str = "#JSON";

/// Renders a `#JSON{...}` line followed by `x_1,...,x_d,label` rows.
/// Unlabelled rows leave the label column empty.
pub fn dataset_to_string(ds: &Dataset, header: &DatasetHeader) -> Result<String> {
    let mut out = String::new();
    out.push_str(HEADER_PREFIX);
    out.push_str(&serde_json::to_string(header)?);
    out.push('\n');
    let cols: Vec<String> = (1..=ds.dim())
        .map(|j| format!("x_{j}"))
        .chain(["label".to_string()])
        .collect();
    out.push_str(&cols.join(","));
    out.push('\n');
    for i in 0..ds.n() {
        for v in ds.sample(i) {
            out.push_str(&format!("{v:?},"));
        }
        if let Some(labels) = ds.labels() {
            out.push_str(&labels[i].to_string());
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn header_for(
    ds: &Dataset,
    seed: u64,
    generator: Option<DatasetSpec>,
    config_hash: Option<String>,
) -> DatasetHeader {
    DatasetHeader {
        n: ds.n(),
        d: ds.dim(),
        k: ds.class_count(),
        seed,
        generator,
        config_hash,
    }
}

pub fn write_dataset(path: &Path, ds: &Dataset, header: &DatasetHeader) -> Result<()> {
    let text = dataset_to_string(ds, header)?;
    let mut f = fs::File::create(path)?;
    f.write_all(text.as_bytes())?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<(Dataset, DatasetHeader)> {
    let text = fs::read_to_string(path)?;
    parse_dataset(&text).map_err(|e| match e {
        Error::Format { reason, .. } => Error::Format {
            path: path.to_path_buf(),
            reason,
        },
        other => other,
    })
}

pub fn parse_dataset(text: &str) -> Result<(Dataset, DatasetHeader)> {
    let bad = |reason: String| Error::Format {
        path: Default::default(),
        reason,
    };
    let (first, rest) = text
        .split_once('\n')
        .ok_or_else(|| bad("missing header line".into()))?;
    let json = first
        .strip_prefix(HEADER_PREFIX)
        .ok_or_else(|| bad(format!("first line must start with {HEADER_PREFIX}")))?;
    let header: DatasetHeader = serde_json::from_str(json)?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(rest.as_bytes());
    let mut data = Vec::with_capacity(header.n * header.d);
    let mut labels = Vec::with_capacity(header.n);
    let mut labelled = None;
    for (r, record) in reader.records().enumerate() {
        let record = record?;
        if record.len() != header.d + 1 {
            return Err(bad(format!(
                "row {r}: expected {} fields, got {}",
                header.d + 1,
                record.len()
            )));
        }
        for j in 0..header.d {
            let v: f64 = record[j]
                .trim()
                .parse()
                .map_err(|_| bad(format!("row {r}: bad value {:?}", &record[j])))?;
            data.push(v);
        }
        let lab = record[header.d].trim();
        let has = !lab.is_empty();
        if *labelled.get_or_insert(has) != has {
            return Err(bad(format!("row {r}: mixed labelled and unlabelled rows")));
        }
        if has {
            labels.push(
                lab.parse::<usize>()
                    .map_err(|_| bad(format!("row {r}: bad label {lab:?}")))?,
            );
        }
    }
    let n = data.len() / header.d.max(1);
    if n != header.n {
        return Err(bad(format!(
            "header says n = {}, file has {n} rows",
            header.n
        )));
    }
    let ds = Dataset::new(
        Tensor::matrix(n, header.d, data)?,
        labelled.unwrap_or(false).then_some(labels),
        header.k,
    )?;
    Ok((ds, header))
}
