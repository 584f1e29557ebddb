//! `mac,label[,category]` files that name the devices in a capture.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{self, BufReader, Read};
use std::path::Path;

use thiserror::Error;

use crate::dataset::CategoryMap;
use crate::mac::MacAddress;

#[derive(Debug, Error)]
pub enum DeviceMapError {
    #[error("row {row}: {message}")]
    Format { row: u64, message: String },
    #[error("device `{0}` has no category")]
    MissingCategory(String),
    #[error("device label `{label}` is mapped to both `{a}` and `{b}`")]
    ConflictingCategory { label: String, a: String, b: String },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeviceEntry {
    pub label: String,
    pub category: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DeviceMap {
    pub entries: BTreeMap<MacAddress, DeviceEntry>,
}

impl DeviceMap {
    pub fn from_reader<R: Read>(reader: R) -> Result<Self, DeviceMapError> {
        let err = |row: u64, m: String| DeviceMapError::Format { row, message: m };
        let mut rdr = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .flexible(true)
            .from_reader(reader);
        let headers: Vec<String> = rdr.headers()?.iter().map(str::to_owned).collect();
        let with_category = match headers.iter().map(String::as_str).collect::<Vec<_>>()[..] {
            ["mac", "label"] => false,
            ["mac", "label", "category"] => true,
            _ => {
                return Err(err(
                    1,
                    "expected header `mac,label` or `mac,label,category`".into(),
                ))
            }
        };
        let mut entries = BTreeMap::new();
        for (i, row) in rdr.records().enumerate() {
            let row_no = i as u64 + 2;
            let row = row.map_err(|e| err(row_no, e.to_string()))?;
            if row.len() != headers.len() {
                return Err(err(
                    row_no,
                    format!("expected {} fields, found {}", headers.len(), row.len()),
                ));
            }
            let mac: MacAddress = row[0]
                .parse()
                .map_err(|e: crate::mac::MacParseError| err(row_no, e.to_string()))?;
            if row[1].is_empty() {
                return Err(err(row_no, "empty device label".into()));
            }
            let category = with_category
                .then(|| row[2].to_owned())
                .filter(|c| !c.is_empty());
            let entry = DeviceEntry {
                label: row[1].to_owned(),
                category,
            };
            if entries.insert(mac, entry).is_some() {
                return Err(err(row_no, format!("duplicate MAC {mac}")));
            }
        }
        Ok(DeviceMap { entries })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self, DeviceMapError> {
        Self::from_reader(BufReader::new(File::open(path)?))
    }

    pub fn macs(&self) -> HashSet<MacAddress> {
        self.entries.keys().copied().collect()
    }

    /// MAC → device label.
    pub fn device_labels(&self) -> BTreeMap<MacAddress, String> {
        self.entries
            .iter()
            .map(|(m, e)| (*m, e.label.clone()))
            .collect()
    }

    /// MAC → category; every device must have one.
    pub fn category_labels(&self) -> Result<BTreeMap<MacAddress, String>, DeviceMapError> {
        self.entries
            .iter()
            .map(|(m, e)| {
                e.category
                    .clone()
                    .map(|c| (*m, c))
                    .ok_or_else(|| DeviceMapError::MissingCategory(e.label.clone()))
            })
            .collect()
    }

    /// Device label → category, for relabeling instance files.
    pub fn category_map(&self) -> Result<CategoryMap, DeviceMapError> {
        let mut map: BTreeMap<String, String> = BTreeMap::new();
        for e in self.entries.values() {
            let c = e
                .category
                .clone()
                .ok_or_else(|| DeviceMapError::MissingCategory(e.label.clone()))?;
            if let Some(prev) = map.get(&e.label) {
                if *prev != c {
                    return Err(DeviceMapError::ConflictingCategory {
                        label: e.label.clone(),
                        a: prev.clone(),
                        b: c,
                    });
                }
            }
            map.insert(e.label.clone(), c);
        }
        Ok(CategoryMap(map))
    }
}
