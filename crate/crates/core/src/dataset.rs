//! Labeled fingerprint datasets: the instance CSV format, seeded train/test
//! splitting, category relabeling and duplicate removal.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::fingerprint::{Fingerprint, LabeledInstance, FEATURE_NAMES};
use crate::numfmt::format_g17;
use crate::rng::Xoshiro256StarStar;

pub const INSTANCE_HEADER: [&str; 5] = [
    "label",
    "iplen_mu",
    "iplen_sigma",
    "tcpwin_mu",
    "tcpwin_sigma",
];
pub const CATEGORY_HEADER: [&str; 2] = ["device_label", "category"];
pub const DEFAULT_TRAIN_FRACTION: f64 = 0.8;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("dataset is empty")]
    Empty,
    #[error("train fraction must lie strictly between 0 and 1, got {0}")]
    InvalidFraction(f64),
    #[error("label `{0}` has no category mapping")]
    UncoveredLabel(String),
    #[error("invalid instance: {0}")]
    InvalidInstance(String),
    #[error("row {row}: {message}")]
    Format { row: u64, message: String },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
}

fn format_err(row: u64, message: impl Into<String>) -> DatasetError {
    DatasetError::Format {
        row,
        message: message.into(),
    }
}

/// Immutable set of labeled fingerprints.
///
/// Labels are interned: `labels` is the sorted set of distinct labels and
/// each instance stores an index into it.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    features: Vec<[f64; 4]>,
    label_ids: Vec<u32>,
    labels: Vec<String>,
}

impl Dataset {
    pub fn feature_names() -> [&'static str; 4] {
        FEATURE_NAMES
    }

    pub fn from_instances<I>(instances: I) -> Result<Self, DatasetError>
    where
        I: IntoIterator<Item = LabeledInstance>,
    {
        let instances: Vec<LabeledInstance> = instances.into_iter().collect();
        for inst in &instances {
            if inst.label.is_empty() {
                return Err(DatasetError::InvalidInstance("empty label".into()));
            }
            if !inst.fingerprint.is_valid() {
                return Err(DatasetError::InvalidInstance(format!(
                    "{:?}",
                    inst.fingerprint
                )));
            }
        }
        let labels: Vec<String> = instances
            .iter()
            .map(|i| i.label.as_str())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .map(str::to_owned)
            .collect();
        let index: HashMap<&str, u32> = labels
            .iter()
            .enumerate()
            .map(|(i, l)| (l.as_str(), i as u32))
            .collect();
        let label_ids = instances.iter().map(|i| index[i.label.as_str()]).collect();
        let features = instances.iter().map(|i| i.fingerprint.to_array()).collect();
        Ok(Self {
            features,
            label_ids,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    /// Distinct labels, sorted lexicographically.
    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn features(&self) -> &[[f64; 4]] {
        &self.features
    }

    /// Per-instance indices into [`Dataset::labels`].
    pub fn label_ids(&self) -> &[u32] {
        &self.label_ids
    }

    pub fn label(&self, i: usize) -> &str {
        &self.labels[self.label_ids[i] as usize]
    }

    pub fn instance(&self, i: usize) -> LabeledInstance {
        LabeledInstance {
            fingerprint: Fingerprint::from_array(self.features[i]),
            label: self.label(i).to_owned(),
        }
    }

    pub fn instances(&self) -> impl Iterator<Item = LabeledInstance> + '_ {
        (0..self.len()).map(|i| self.instance(i))
    }

    /// Instance count per label, in label order.
    pub fn class_counts(&self) -> Vec<(String, usize)> {
        let mut counts = vec![0usize; self.labels.len()];
        for &id in &self.label_ids {
            counts[id as usize] += 1;
        }
        self.labels.iter().cloned().zip(counts).collect()
    }

    /// New dataset of the instances at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        let mut remap = vec![u32::MAX; self.labels.len()];
        for &i in indices {
            remap[self.label_ids[i] as usize] = 0;
        }
        let mut labels = Vec::new();
        for (old, slot) in remap.iter_mut().enumerate() {
            if *slot == 0 {
                *slot = labels.len() as u32;
                labels.push(self.labels[old].clone());
            }
        }
        Dataset {
            features: indices.iter().map(|&i| self.features[i]).collect(),
            label_ids: indices
                .iter()
                .map(|&i| remap[self.label_ids[i] as usize])
                .collect(),
            labels,
        }
    }

    /// Replaces every label by its category.
    pub fn relabel(&self, map: &CategoryMap) -> Result<Dataset, DatasetError> {
        let categories = self
            .labels
            .iter()
            .map(|l| {
                map.category(l)
                    .ok_or_else(|| DatasetError::UncoveredLabel(l.clone()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let new_labels: Vec<String> = categories
            .iter()
            .copied()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .map(str::to_owned)
            .collect();
        let remap: Vec<u32> = categories
            .iter()
            .map(|c| new_labels.binary_search_by(|l| l.as_str().cmp(c)).unwrap() as u32)
            .collect();
        Ok(Dataset {
            features: self.features.clone(),
            label_ids: self
                .label_ids
                .iter()
                .map(|&id| remap[id as usize])
                .collect(),
            labels: new_labels,
        })
    }

    /// Drops instances equal (label and all four features) to an earlier one.
    pub fn dedupe(&self) -> (Dataset, usize) {
        let mut seen = HashSet::with_capacity(self.len());
        let keep: Vec<usize> = (0..self.len())
            .filter(|&i| {
                // +0.0 folds -0.0 onto 0.0 so they compare equal
                let bits = self.features[i].map(|v| (v + 0.0).to_bits());
                seen.insert((self.label_ids[i], bits))
            })
            .collect();
        let removed = self.len() - keep.len();
        (self.select(&keep), removed)
    }

    /// Shuffled train/test partition; see [`SplitSpec`].
    pub fn split(&self, spec: &SplitSpec) -> Result<(Dataset, Dataset), DatasetError> {
        let (train, test) = self.split_indices(spec)?;
        Ok((self.select(&train), self.select(&test)))
    }

    /// Index form of [`Dataset::split`].
    pub fn split_indices(
        &self,
        spec: &SplitSpec,
    ) -> Result<(Vec<usize>, Vec<usize>), DatasetError> {
        spec.validate()?;
        if self.is_empty() {
            return Err(DatasetError::Empty);
        }
        let mut rng = Xoshiro256StarStar::seed_from_u64(spec.seed);
        if !spec.stratified {
            let mut order: Vec<usize> = (0..self.len()).collect();
            rng.shuffle(&mut order);
            let test = order.split_off(train_size(self.len(), spec.train_fraction));
            return Ok((order, test));
        }
        let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); self.labels.len()];
        for (i, &id) in self.label_ids.iter().enumerate() {
            by_class[id as usize].push(i);
        }
        let (mut train, mut test) = (Vec::new(), Vec::new());
        for mut members in by_class {
            rng.shuffle(&mut members);
            let k = train_size(members.len(), spec.train_fraction);
            test.extend_from_slice(&members[k..]);
            members.truncate(k);
            train.extend(members);
        }
        Ok((train, test))
    }
}

/// Training-set size for `n` instances: `fraction · n` rounded half away
/// from zero.
pub fn train_size(n: usize, fraction: f64) -> usize {
    ((fraction * n as f64).round() as usize).min(n)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub seed: u64,
    /// Split each class separately with the same fraction.
    pub stratified: bool,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train_fraction: DEFAULT_TRAIN_FRACTION,
            seed: 1,
            stratified: false,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<(), DatasetError> {
        if self.train_fraction > 0.0 && self.train_fraction < 1.0 {
            Ok(())
        } else {
            Err(DatasetError::InvalidFraction(self.train_fraction))
        }
    }
}

/// Device label → category label (e.g. `iot` / `non-iot`).
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CategoryMap(pub BTreeMap<String, String>);

impl CategoryMap {
    pub fn category(&self, label: &str) -> Option<&str> {
        self.0.get(label).map(String::as_str)
    }

    /// Reads the two-column `device_label,category` CSV.
    pub fn from_reader<R: Read>(reader: R) -> Result<Self, DatasetError> {
        let mut rdr = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_reader(reader);
        let headers = rdr.headers()?.clone();
        if headers.iter().collect::<Vec<_>>() != CATEGORY_HEADER {
            return Err(format_err(
                1,
                format!("expected header `{}`", CATEGORY_HEADER.join(",")),
            ));
        }
        let mut map = BTreeMap::new();
        for (i, row) in rdr.records().enumerate() {
            let row_no = i as u64 + 2;
            let row = row.map_err(|e| format_err(row_no, e.to_string()))?;
            let (device, category) = (&row[0], &row[1]);
            if device.is_empty() || category.is_empty() {
                return Err(format_err(row_no, "empty device label or category"));
            }
            if map.insert(device.to_owned(), category.to_owned()).is_some() {
                return Err(format_err(
                    row_no,
                    format!("duplicate device label `{device}`"),
                ));
            }
        }
        Ok(CategoryMap(map))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self, DatasetError> {
        Self::from_reader(BufReader::new(File::open(path)?))
    }
}

fn parse_feature(row: u64, name: &str, text: &str) -> Result<f64, DatasetError> {
    let v: f64 = text
        .trim()
        .parse()
        .map_err(|_| format_err(row, format!("{name}: cannot parse `{text}` as a number")))?;
    if !v.is_finite() {
        return Err(format_err(row, format!("{name}: value must be finite")));
    }
    Ok(v)
}

/// Parses an instance CSV (`label,iplen_mu,iplen_sigma,tcpwin_mu,tcpwin_sigma`).
pub fn read_instances_from<R: Read>(reader: R) -> Result<Dataset, DatasetError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| format_err(1, e.to_string()))?
        .clone();
    if headers.iter().map(str::trim).collect::<Vec<_>>() != INSTANCE_HEADER {
        return Err(format_err(
            1,
            format!("expected header `{}`", INSTANCE_HEADER.join(",")),
        ));
    }
    let mut instances = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let row_no = i as u64 + 2;
        let row = row.map_err(|e| format_err(row_no, e.to_string()))?;
        let label = &row[0];
        if label.is_empty() {
            return Err(format_err(row_no, "empty label"));
        }
        let mut values = [0.0; 4];
        for (k, v) in values.iter_mut().enumerate() {
            *v = parse_feature(row_no, FEATURE_NAMES[k], &row[k + 1])?;
        }
        let fingerprint = Fingerprint::from_array(values);
        if fingerprint.iplen_sigma < 0.0 || fingerprint.tcpwin_sigma < 0.0 {
            return Err(format_err(
                row_no,
                "standard deviations must be non-negative",
            ));
        }
        instances.push(LabeledInstance {
            fingerprint,
            label: label.to_owned(),
        });
    }
    Dataset::from_instances(instances)
}

pub fn read_instances(path: impl AsRef<Path>) -> Result<Dataset, DatasetError> {
    read_instances_from(BufReader::new(File::open(path)?))
}

/// Writes the instance CSV with 17 significant digits per feature.
pub fn write_instances_to<W: Write>(dataset: &Dataset, writer: W) -> Result<(), DatasetError> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(INSTANCE_HEADER)?;
    for i in 0..dataset.len() {
        let f = dataset.features()[i];
        wtr.write_record([
            dataset.label(i),
            &format_g17(f[0]),
            &format_g17(f[1]),
            &format_g17(f[2]),
            &format_g17(f[3]),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn write_instances(dataset: &Dataset, path: impl AsRef<Path>) -> Result<(), DatasetError> {
    write_instances_to(dataset, BufWriter::new(File::create(path)?))
}
