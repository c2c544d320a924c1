//! Dataset ingestion, target encoding, train/test splitting, and the two
//! federation partitioners.

use std::fs::File;
use std::io::Read;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default low/high values for one-hot target encoding. They keep the
/// logistic inverse finite at +-ln(19).
pub const DEFAULT_ENCODING_LOW: f64 = 0.05;
pub const DEFAULT_ENCODING_HIGH: f64 = 0.95;

/// An in-memory labeled dataset. Features are stored feature-major
/// (`num_raw_features x num_samples`), labels as indices into the sorted,
/// deduplicated class list.
#[derive(Debug, Clone)]
pub struct Dataset {
    features: Array2<f64>,
    labels: Vec<u32>,
    class_list: Vec<String>,
}

impl Dataset {
    /// Builds a dataset from raw string labels, interning them against a
    /// sorted deduplicated class list.
    pub fn from_labeled(features: Array2<f64>, labels: Vec<String>) -> Result<Self> {
        if features.ncols() != labels.len() {
            return Err(Error::Shape(format!(
                "{} feature columns but {} labels",
                features.ncols(),
                labels.len()
            )));
        }
        let mut class_list: Vec<String> = labels.to_vec();
        class_list.sort();
        class_list.dedup();
        let ids = labels
            .iter()
            .map(|l| class_list.binary_search(l).unwrap() as u32)
            .collect();
        Self::from_parts(features, ids, class_list)
    }

    /// Builds a dataset from already-interned label ids.
    pub fn from_parts(
        features: Array2<f64>,
        labels: Vec<u32>,
        class_list: Vec<String>,
    ) -> Result<Self> {
        if features.ncols() != labels.len() {
            return Err(Error::Shape(format!(
                "{} feature columns but {} labels",
                features.ncols(),
                labels.len()
            )));
        }
        if class_list.is_empty() {
            return Err(Error::Argument("class list is empty".into()));
        }
        if !class_list.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Argument(
                "class list must be sorted and deduplicated".into(),
            ));
        }
        if let Some(bad) = labels.iter().find(|&&id| id as usize >= class_list.len()) {
            return Err(Error::Encoding(format!(
                "label id {bad} outside class list of size {}",
                class_list.len()
            )));
        }
        Ok(Self {
            features,
            labels,
            class_list,
        })
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    /// Interned label ids, one per sample.
    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn class_list(&self) -> &[String] {
        &self.class_list
    }

    pub fn num_samples(&self) -> usize {
        self.features.ncols()
    }

    pub fn num_raw_features(&self) -> usize {
        self.features.nrows()
    }

    pub fn num_classes(&self) -> usize {
        self.class_list.len()
    }

    /// One-hot target encoding of this dataset's labels.
    pub fn encode_targets(&self, low: f64, high: f64) -> Result<Array2<f64>> {
        encode_targets(&self.labels, self.num_classes(), low, high)
    }

    /// New dataset holding the selected sample columns, class list shared.
    pub fn select(&self, indices: &[u32]) -> Dataset {
        let mut features = Array2::zeros((self.num_raw_features(), indices.len()));
        let mut labels = Vec::with_capacity(indices.len());
        for (dst, &src) in indices.iter().enumerate() {
            features
                .column_mut(dst)
                .assign(&self.features.column(src as usize));
            labels.push(self.labels[src as usize]);
        }
        Dataset {
            features,
            labels,
            class_list: self.class_list.clone(),
        }
    }

    /// Tiles the dataset `factor` times, in memory.
    pub fn replicate(&self, factor: usize) -> Result<Dataset> {
        if factor == 0 {
            return Err(Error::Argument("replication factor must be >= 1".into()));
        }
        let n = self.num_samples();
        let mut features = Array2::zeros((self.num_raw_features(), n * factor));
        let mut labels = Vec::with_capacity(n * factor);
        for rep in 0..factor {
            features
                .slice_mut(ndarray::s![.., rep * n..(rep + 1) * n])
                .assign(&self.features);
            labels.extend_from_slice(&self.labels);
        }
        Ok(Dataset {
            features,
            labels,
            class_list: self.class_list.clone(),
        })
    }
}

/// Min-max scales every feature row to [0, 1]. Constant rows collapse
/// to zero. Off by default everywhere; exposed for callers that want it.
pub fn min_max_scale(ds: &Dataset) -> Dataset {
    let mut features = ds.features().clone();
    for mut row in features.rows_mut() {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for &v in row.iter() {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        let span = hi - lo;
        if span > 0.0 {
            row.mapv_inplace(|v| (v - lo) / span);
        } else {
            row.fill(0.0);
        }
    }
    Dataset {
        features,
        labels: ds.labels.clone(),
        class_list: ds.class_list.clone(),
    }
}

/// Which CSV column holds the class label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LabelColumn {
    Index(usize),
    Name(String),
}

/// Loads a CSV file (gzip-compressed when the name ends in `.gz`) into a
/// dataset. All non-label columns must parse as numbers; the label column
/// is taken verbatim and interned.
pub fn load_csv(path: &Path, label_column: &LabelColumn, has_header: bool) -> Result<Dataset> {
    let file = File::open(path)?;
    let reader: Box<dyn Read> = if path.extension().is_some_and(|e| e == "gz") {
        Box::new(flate2::read::GzDecoder::new(file))
    } else {
        Box::new(file)
    };
    load_csv_reader(reader, label_column, has_header)
}

fn load_csv_reader(
    reader: impl Read,
    label_column: &LabelColumn,
    has_header: bool,
) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(has_header)
        .flexible(false)
        .trim(csv::Trim::All)
        .from_reader(reader);

    let label_idx = match label_column {
        LabelColumn::Index(i) => *i,
        LabelColumn::Name(name) => {
            if !has_header {
                return Err(Error::Argument(
                    "label column by name requires a header row".into(),
                ));
            }
            let headers = rdr.headers().map_err(csv_error)?;
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| Error::Format(format!("no column named {name:?} in header")))?
        }
    };

    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut labels: Vec<String> = Vec::new();
    let mut width = None;
    for (row_idx, record) in rdr.records().enumerate() {
        let record = record.map_err(csv_error)?;
        let w = *width.get_or_insert(record.len());
        if record.len() != w {
            return Err(Error::Format(format!(
                "row {row_idx} has {} fields, expected {w}",
                record.len()
            )));
        }
        if label_idx >= w {
            return Err(Error::Format(format!(
                "label column {label_idx} out of range for {w}-field rows"
            )));
        }
        let mut feats = Vec::with_capacity(w - 1);
        for (col, cell) in record.iter().enumerate() {
            if col == label_idx {
                labels.push(cell.to_string());
            } else {
                feats.push(cell.parse::<f64>().map_err(|_| Error::Ingest {
                    row: row_idx,
                    col,
                    message: format!("cannot parse {cell:?} as a number"),
                })?);
            }
        }
        rows.push(feats);
    }
    if rows.is_empty() {
        return Err(Error::Ingest {
            row: 0,
            col: 0,
            message: "file contains no data rows".into(),
        });
    }

    let num_features = rows[0].len();
    if num_features == 0 {
        return Err(Error::Format("rows have no feature columns".into()));
    }
    let mut features = Array2::zeros((num_features, rows.len()));
    for (j, row) in rows.iter().enumerate() {
        for (i, &v) in row.iter().enumerate() {
            features[[i, j]] = v;
        }
    }
    Dataset::from_labeled(features, labels)
}

fn csv_error(e: csv::Error) -> Error {
    match e.kind() {
        csv::ErrorKind::UnequalLengths { .. } => Error::Format(e.to_string()),
        _ => Error::Format(format!("csv read failed: {e}")),
    }
}

/// One-hot target encoding: `high` at the label's class index, `low`
/// elsewhere. `n x num_classes`.
pub fn encode_targets(
    label_ids: &[u32],
    num_classes: usize,
    low: f64,
    high: f64,
) -> Result<Array2<f64>> {
    if !(0.0 < low && low < high && high < 1.0) {
        return Err(Error::Argument(format!(
            "encoding bounds must satisfy 0 < low < high < 1, got ({low}, {high})"
        )));
    }
    if num_classes == 0 {
        return Err(Error::Argument("cannot encode against zero classes".into()));
    }
    let mut out = Array2::from_elem((label_ids.len(), num_classes), low);
    for (i, &id) in label_ids.iter().enumerate() {
        if id as usize >= num_classes {
            return Err(Error::Encoding(format!(
                "label id {id} outside class list of size {num_classes}"
            )));
        }
        out[[i, id as usize]] = high;
    }
    Ok(out)
}

/// Seeded 70/30-style split: shuffle, first `floor(fraction * n)` samples
/// to train, rest to test.
pub fn split_train_test(
    ds: &Dataset,
    train_fraction: f64,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    let n = ds.num_samples();
    if n < 2 {
        return Err(Error::Argument(format!(
            "need at least 2 samples to split, got {n}"
        )));
    }
    if !(0.0 < train_fraction && train_fraction < 1.0) {
        return Err(Error::Argument(format!(
            "train fraction must lie in (0, 1), got {train_fraction}"
        )));
    }
    let n_train = (train_fraction * n as f64).floor() as usize;
    if n_train == 0 || n_train == n {
        return Err(Error::Argument(format!(
            "split of {n} samples at fraction {train_fraction} leaves an empty side"
        )));
    }
    let mut indices: Vec<u32> = (0..n as u32).collect();
    indices.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok((
        ds.select(&indices[..n_train]),
        ds.select(&indices[n_train..]),
    ))
}

/// How training samples are distributed across federated clients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionMode {
    /// Seeded shuffle then round-robin deal, approximately preserving the
    /// class proportions at every client.
    IidShuffle,
    /// Stable sort by class label then contiguous chunks: a pathological
    /// split where most clients see a single class.
    LabelSorted,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionPlan {
    pub mode: PartitionMode,
    pub num_clients: usize,
    pub seed: u64,
}

/// Assigns sample indices to `plan.num_clients` shards. Shard sizes differ
/// by at most one and together they cover `0..labels.len()` exactly.
pub fn partition_indices(labels: &[u32], plan: &PartitionPlan) -> Result<Vec<Vec<u32>>> {
    let n = labels.len();
    let p = plan.num_clients;
    if p == 0 {
        return Err(Error::Argument("partition needs at least one client".into()));
    }
    if p > n {
        return Err(Error::Argument(format!(
            "cannot partition {n} samples across {p} clients"
        )));
    }
    match plan.mode {
        PartitionMode::IidShuffle => {
            let mut order: Vec<u32> = (0..n as u32).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(plan.seed));
            // Stable class grouping before the round-robin deal keeps the
            // assignment stratified: every shard receives each class in
            // proportion, within one sample.
            order.sort_by_key(|&i| labels[i as usize]);
            let mut shards = vec![Vec::with_capacity(n / p + 1); p];
            for (pos, idx) in order.into_iter().enumerate() {
                shards[pos % p].push(idx);
            }
            Ok(shards)
        }
        PartitionMode::LabelSorted => {
            let mut order: Vec<u32> = (0..n as u32).collect();
            order.sort_by_key(|&i| labels[i as usize]);
            let base = n / p;
            let extra = n % p;
            let mut shards = Vec::with_capacity(p);
            let mut start = 0;
            for shard_idx in 0..p {
                let size = base + usize::from(shard_idx < extra);
                shards.push(order[start..start + size].to_vec());
                start += size;
            }
            Ok(shards)
        }
    }
}

/// Materializes the shards of a partition plan as datasets sharing the
/// parent's class list.
pub fn partition(ds: &Dataset, plan: &PartitionPlan) -> Result<Vec<Dataset>> {
    let shards = partition_indices(ds.labels(), plan)?;
    Ok(shards.iter().map(|idx| ds.select(idx)).collect())
}
