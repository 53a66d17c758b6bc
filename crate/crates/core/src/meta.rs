//! Per-image metadata and the gallery tracklet partition.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetaRecord {
    pub image_id: String,
    pub tracklet_id: String,
    pub identity_id: Option<String>,
    pub camera_id: Option<String>,
}

/// One record per embedding row, positionally aligned with the row ids.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CatalogMeta {
    records: Vec<MetaRecord>,
}

impl CatalogMeta {
    pub fn new(records: Vec<MetaRecord>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(records.len());
        for (row, r) in records.iter().enumerate() {
            if r.image_id.is_empty() {
                return Err(Error::Metadata(format!("row {row}: empty image_id")));
            }
            if r.tracklet_id.is_empty() {
                return Err(Error::Metadata(format!("row {row}: empty tracklet_id")));
            }
            if !seen.insert(r.image_id.as_str()) {
                return Err(Error::DuplicateId(r.image_id.clone()));
            }
        }
        Ok(Self { records })
    }

    pub fn records(&self) -> &[MetaRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn image_ids(&self) -> impl Iterator<Item = &str> {
        self.records.iter().map(|r| r.image_id.as_str())
    }

    /// True when every record carries an identity label.
    pub fn has_identities(&self) -> bool {
        self.records.iter().all(|r| r.identity_id.is_some())
    }

    /// Reorders the records to follow `ids`. Fails unless the image id set
    /// equals `ids` exactly.
    pub fn align_to(&self, ids: &[String]) -> Result<CatalogMeta> {
        if ids.len() != self.records.len() {
            return Err(Error::Metadata(format!(
                "{} metadata records for {} embedding rows",
                self.records.len(),
                ids.len()
            )));
        }
        if self.image_ids().zip(ids).all(|(a, b)| a == b) {
            return Ok(self.clone());
        }
        let by_id: HashMap<&str, &MetaRecord> = self.records.iter().map(|r| (r.image_id.as_str(), r)).collect();
        let records = ids
            .iter()
            .map(|id| {
                by_id
                    .get(id.as_str())
                    .map(|r| (*r).clone())
                    .ok_or_else(|| Error::Metadata(format!("no metadata for image `{id}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(CatalogMeta { records })
    }

    pub fn tracklet_table(&self) -> TrackletTable {
        TrackletTable::from_labels(&self.records.iter().map(|r| &r.tracklet_id).collect::<Vec<_>>())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tracklet {
    pub id: String,
    /// Gallery row indices, ascending.
    pub members: Vec<usize>,
}

/// Partition of the gallery rows into tracklets, ordered by smallest member.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrackletTable {
    tracklets: Vec<Tracklet>,
    row_to_tracklet: Vec<usize>,
}

impl TrackletTable {
    pub fn new(groups: Vec<(String, Vec<usize>)>, n_rows: usize) -> Result<Self> {
        let mut owner = vec![usize::MAX; n_rows];
        let mut tracklets = Vec::with_capacity(groups.len());
        let mut ids = HashSet::new();
        for (id, mut members) in groups {
            if members.is_empty() {
                return Err(Error::InvalidPartition(format!("tracklet `{id}` is empty")));
            }
            if !ids.insert(id.clone()) {
                return Err(Error::InvalidPartition(format!("tracklet `{id}` listed twice")));
            }
            members.sort_unstable();
            for &m in &members {
                if m >= n_rows {
                    return Err(Error::InvalidPartition(format!(
                        "tracklet `{id}` references row {m} of {n_rows}"
                    )));
                }
                if owner[m] != usize::MAX {
                    return Err(Error::InvalidPartition(format!("row {m} is in two tracklets")));
                }
                owner[m] = 0;
            }
            tracklets.push(Tracklet { id, members });
        }
        if let Some(row) = owner.iter().position(|&o| o == usize::MAX) {
            return Err(Error::InvalidPartition(format!("row {row} has no tracklet")));
        }
        tracklets.sort_by_key(|t| t.members[0]);
        for (t, tr) in tracklets.iter().enumerate() {
            for &m in &tr.members {
                owner[m] = t;
            }
        }
        Ok(Self {
            tracklets,
            row_to_tracklet: owner,
        })
    }

    /// Groups rows sharing a label.
    pub fn from_labels<S: AsRef<str>>(labels: &[S]) -> Self {
        let mut order: Vec<(String, Vec<usize>)> = Vec::new();
        let mut slot: HashMap<&str, usize> = HashMap::new();
        for (row, label) in labels.iter().enumerate() {
            let label = label.as_ref();
            let t = *slot.entry(label).or_insert_with(|| {
                order.push((label.to_string(), Vec::new()));
                order.len() - 1
            });
            order[t].1.push(row);
        }
        let row_to_tracklet = labels.iter().map(|l| slot[l.as_ref()]).collect();
        let tracklets = order
            .into_iter()
            .map(|(id, members)| Tracklet { id, members })
            .collect();
        Self {
            tracklets,
            row_to_tracklet,
        }
    }

    /// Every row its own tracklet.
    pub fn singletons(n_rows: usize) -> Self {
        let labels: Vec<String> = (0..n_rows).map(|i| i.to_string()).collect();
        Self::from_labels(&labels)
    }

    pub fn len(&self) -> usize {
        self.tracklets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tracklets.is_empty()
    }

    pub fn n_rows(&self) -> usize {
        self.row_to_tracklet.len()
    }

    pub fn tracklets(&self) -> &[Tracklet] {
        &self.tracklets
    }

    pub fn tracklet_of(&self, row: usize) -> usize {
        self.row_to_tracklet[row]
    }
}
