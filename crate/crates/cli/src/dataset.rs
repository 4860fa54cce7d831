//! CSV ingestion and export, plus loading the dataset a config names.

use std::io::{Read, Write};
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use unlearn_core::{gaussian_blobs, BlobSpec, DatasetTable, SampleId};

use crate::config::{DataSource, DatasetConfig};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CsvSchema {
    pub label_column: String,
    /// Without an id column, rows get ids `0..n` in file order.
    pub id_column: Option<String>,
    /// Inferred as `max(label) + 1` (at least 2) when absent.
    pub class_count: Option<u32>,
}

impl CsvSchema {
    pub fn labelled(label_column: &str) -> Self {
        Self { label_column: label_column.into(), id_column: None, class_count: None }
    }
}

/// Reads a headed CSV. Every column other than the label and id is a feature.
pub fn ingest_csv<R: Read>(reader: R, schema: &CsvSchema) -> Result<DatasetTable> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers().context("reading CSV header")?.clone();
    let find = |name: &str| headers.iter().position(|h| h == name);
    let label_col = find(&schema.label_column)
        .with_context(|| format!("label column `{}` not found in header", schema.label_column))?;
    let id_col = match &schema.id_column {
        Some(name) => Some(find(name).with_context(|| format!("id column `{name}` not found in header"))?),
        None => None,
    };
    let feature_cols: Vec<usize> = (0..headers.len()).filter(|&c| c != label_col && Some(c) != id_col).collect();

    let (mut features, mut labels, mut ids) = (Vec::new(), Vec::new(), Vec::new());
    for (row, record) in rdr.records().enumerate() {
        // Line 1 is the header.
        let line = row + 2;
        let record = record.with_context(|| format!("line {line}: malformed record"))?;
        ensure!(record.len() == headers.len(), "line {line}: expected {} fields, found {}", headers.len(), record.len());
        for &c in &feature_cols {
            let v: f64 = record[c]
                .parse()
                .with_context(|| format!("line {line}: column `{}` value `{}` is not a number", &headers[c], &record[c]))?;
            ensure!(v.is_finite(), "line {line}: column `{}` is not finite", &headers[c]);
            features.push(v);
        }
        labels.push(
            record[label_col]
                .parse::<u32>()
                .with_context(|| format!("line {line}: label `{}` is not a non-negative integer", &record[label_col]))?,
        );
        ids.push(SampleId(match id_col {
            Some(c) => record[c].parse().with_context(|| format!("line {line}: id `{}` is not an integer", &record[c]))?,
            None => row as u64,
        }));
    }
    let class_count = match schema.class_count {
        Some(k) => k,
        None => labels.iter().max().map_or(2, |&m| (m + 1).max(2)),
    };
    DatasetTable::new(feature_cols.len(), features, labels, ids, class_count).context("building dataset")
}

pub fn read_csv(path: &Path, schema: &CsvSchema) -> Result<DatasetTable> {
    let file = std::fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    ingest_csv(std::io::BufReader::new(file), schema).with_context(|| format!("reading {}", path.display()))
}

/// Writes `id,x0..x{p-1},label`. Floats use the shortest representation that
/// parses back to the same bits.
pub fn export_csv<W: Write>(data: &DatasetTable, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["id".to_string()];
    header.extend((0..data.p()).map(|j| format!("x{j}")));
    header.push("label".into());
    w.write_record(&header)?;
    let mut rec = Vec::with_capacity(data.p() + 2);
    for i in 0..data.n() {
        rec.clear();
        rec.push(data.id(i).0.to_string());
        rec.extend(data.row(i).iter().map(|v| v.to_string()));
        rec.push(data.label(i).to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_csv(data: &DatasetTable, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    export_csv(data, std::io::BufWriter::new(file))
}

/// Schema matching `export_csv` output.
pub fn exported_schema(class_count: u32) -> CsvSchema {
    CsvSchema { label_column: "label".into(), id_column: Some("id".into()), class_count: Some(class_count) }
}

pub fn load_dataset(cfg: &DatasetConfig) -> Result<DatasetTable> {
    match cfg.source {
        DataSource::Synthetic => {
            let mut spec = BlobSpec::new(cfg.n, cfg.p, cfg.class_sep, cfg.seed);
            if let Some(k) = cfg.informative {
                spec = spec.with_informative(k);
            }
            Ok(gaussian_blobs(&spec)?)
        }
        DataSource::Csv => {
            let Some(path) = &cfg.path else { bail!("dataset.path is required for csv sources") };
            let schema = CsvSchema {
                label_column: cfg.label_column.clone(),
                id_column: cfg.id_column.clone(),
                class_count: None,
            };
            read_csv(path, &schema)
        }
    }
}
