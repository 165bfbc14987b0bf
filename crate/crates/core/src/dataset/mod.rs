//! Respiratory cycles, ICBHI-format ingestion, subject-independent splits and
//! the synthetic desk-scale corpus.

mod icbhi;
mod synthetic;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::{Class, N_CLASSES};

pub use icbhi::{ingest_icbhi, parse_split_listing, read_split_listing, write_corpus, RecordingName};
pub use synthetic::{generate_synthetic, synthetic_listing, SyntheticSpec};

/// One annotated breathing cycle cut out of a recording.
#[derive(Clone, Debug, PartialEq)]
pub struct RespiratoryCycle {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
    pub label: Class,
    pub patient_id: String,
    pub recording_id: String,
    pub chest_location: String,
    pub device: String,
    /// Seconds within the source recording.
    pub t_begin: f64,
    pub t_end: f64,
    /// Zero-based annotation row within the recording.
    pub index: usize,
}

impl RespiratoryCycle {
    /// Stable identifier, `recording_id#row`.
    pub fn id(&self) -> String {
        format!("{}#{}", self.recording_id, self.index)
    }

    pub fn cycle_ref(&self) -> CycleRef {
        CycleRef {
            id: self.id(),
            recording_id: self.recording_id.clone(),
            index: self.index,
            patient_id: self.patient_id.clone(),
            label: self.label,
            t_begin: self.t_begin,
            t_end: self.t_end,
        }
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Provenance of a cycle without its samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CycleRef {
    pub id: String,
    pub recording_id: String,
    pub index: usize,
    pub patient_id: String,
    pub label: Class,
    pub t_begin: f64,
    pub t_end: f64,
}

/// Partition of the training data named by the official challenge listing.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OfficialSubset {
    Train,
    Test,
}

pub type SplitListing = BTreeMap<String, OfficialSubset>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Subset {
    Train,
    Devel,
    Test,
}

impl Subset {
    pub const ALL: [Subset; 3] = [Subset::Train, Subset::Devel, Subset::Test];

    pub fn name(self) -> &'static str {
        match self {
            Subset::Train => "train",
            Subset::Devel => "devel",
            Subset::Test => "test",
        }
    }
}

impl fmt::Display for Subset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Subset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Subset::Train),
            "devel" | "dev" => Ok(Subset::Devel),
            "test" => Ok(Subset::Test),
            other => Err(Error::Config(format!("unknown split {other:?} (train, devel, test)"))),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<RespiratoryCycle>,
    pub devel: Vec<RespiratoryCycle>,
    pub test: Vec<RespiratoryCycle>,
}

impl DatasetSplit {
    pub fn get(&self, subset: Subset) -> &[RespiratoryCycle] {
        match subset {
            Subset::Train => &self.train,
            Subset::Devel => &self.devel,
            Subset::Test => &self.test,
        }
    }

    /// `counts[subset][class]` in `Subset::ALL` order.
    pub fn class_counts(&self) -> [[usize; N_CLASSES]; 3] {
        let mut out = [[0; N_CLASSES]; 3];
        for (row, s) in out.iter_mut().zip(Subset::ALL) {
            *row = class_counts(self.get(s));
        }
        out
    }

    /// Class × split count table with a totals row and column.
    pub fn summary_table(&self) -> String {
        let counts = self.class_counts();
        let mut s = String::from("| Class | Train | Devel | Test | Total |\n|---|---:|---:|---:|---:|\n");
        let mut totals = [0usize; 4];
        for c in Class::ALL {
            let row: Vec<usize> = (0..3).map(|k| counts[k][c.index()]).collect();
            let sum: usize = row.iter().sum();
            for (t, v) in totals.iter_mut().zip(row.iter().chain([&sum])) {
                *t += v;
            }
            s += &format!("| {} | {} | {} | {} | {} |\n", c, row[0], row[1], row[2], sum);
        }
        s += &format!("| Total | {} | {} | {} | {} |\n", totals[0], totals[1], totals[2], totals[3]);
        s
    }
}

pub fn class_counts(cycles: &[RespiratoryCycle]) -> [usize; N_CLASSES] {
    let mut out = [0; N_CLASSES];
    for c in cycles {
        out[c.label.index()] += 1;
    }
    out
}

/// Minimum share of official-train cycles that go to the train subset.
pub const TRAIN_FRACTION: f64 = 0.7;

/// Test cycles follow the listing; the official training portion is split into
/// train/devel by whole patients. Patients are visited in a seeded shuffled order
/// and assigned to train until it holds at least 70% of the training cycles.
pub fn split_official(cycles: &[RespiratoryCycle], listing: &SplitListing, seed: u64) -> Result<DatasetSplit> {
    let present: BTreeSet<&str> = cycles.iter().map(|c| c.recording_id.as_str()).collect();
    if let Some(unknown) = listing.keys().find(|k| !present.contains(k.as_str())) {
        return Err(Error::UnknownRecording(unknown.clone()));
    }
    let mut split = DatasetSplit::default();
    let mut pool = Vec::new();
    for c in cycles {
        match listing.get(&c.recording_id) {
            Some(OfficialSubset::Test) => split.test.push(c.clone()),
            Some(OfficialSubset::Train) => pool.push(c),
            None => return Err(Error::UnlistedRecording(c.recording_id.clone())),
        }
    }

    let mut per_patient: BTreeMap<&str, usize> = BTreeMap::new();
    for c in &pool {
        *per_patient.entry(c.patient_id.as_str()).or_default() += 1;
    }
    let mut patients: Vec<&str> = per_patient.keys().copied().collect();
    patients.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let target = TRAIN_FRACTION * pool.len() as f64;
    let mut in_train = BTreeSet::new();
    let mut n_train = 0usize;
    for p in patients {
        if (n_train as f64) >= target {
            break;
        }
        n_train += per_patient[p];
        in_train.insert(p);
    }
    for c in pool {
        if in_train.contains(c.patient_id.as_str()) {
            split.train.push(c.clone());
        } else {
            split.devel.push(c.clone());
        }
    }
    if split.devel.is_empty() && !split.train.is_empty() {
        log::warn!(
            "devel subset is empty: the training portion has {} patient(s) and cannot be divided",
            per_patient.len()
        );
    }
    Ok(split)
}
