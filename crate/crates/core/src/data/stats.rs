//! Dataset summary table: patients, sequences, frames per interval, boxes.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use super::manifest::{Interval, SequenceManifest, View};

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatsRow {
    pub patients: usize,
    pub sequences: usize,
    pub no_contrast: usize,
    pub introducing: usize,
    pub optimal: usize,
    pub vanishing: usize,
    pub boxes: usize,
}

impl StatsRow {
    pub fn frames(&self) -> usize {
        self.no_contrast + self.introducing + self.optimal + self.vanishing
    }

    fn interval_mut(&mut self, i: Interval) -> &mut usize {
        match i {
            Interval::NoContrast => &mut self.no_contrast,
            Interval::Introducing => &mut self.introducing,
            Interval::Optimal => &mut self.optimal,
            Interval::Vanishing => &mut self.vanishing,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub total: StatsRow,
    /// Keyed by `"<Lesion|No Lesion> <view>"`.
    pub rows: BTreeMap<String, StatsRow>,
}

pub fn manifest_stats(manifests: &[SequenceManifest]) -> DatasetStats {
    let mut stats = DatasetStats::default();
    let mut patients: BTreeSet<&str> = BTreeSet::new();
    let mut row_patients: BTreeMap<String, BTreeSet<&str>> = BTreeMap::new();
    for m in manifests {
        let key = row_key(m.has_lesions(), m.view);
        patients.insert(&m.patient_id);
        row_patients.entry(key.clone()).or_default().insert(&m.patient_id);
        let row = stats.rows.entry(key).or_default();
        for r in [&mut stats.total, row] {
            r.sequences += 1;
            for f in &m.frames {
                *r.interval_mut(f.interval) += 1;
                r.boxes += f.boxes.len();
            }
        }
    }
    stats.total.patients = patients.len();
    for (k, p) in row_patients {
        stats.rows.get_mut(&k).expect("row exists").patients = p.len();
    }
    stats
}

fn row_key(lesion: bool, view: View) -> String {
    format!("{} {}", if lesion { "Lesion" } else { "No Lesion" }, view)
}

impl fmt::Display for DatasetStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<16} {:>8} {:>9} {:>11} {:>11} {:>8} {:>9} {:>7}",
            "", "patients", "sequences", "no_contrast", "introducing", "optimal", "vanishing", "boxes"
        )?;
        let line = |f: &mut fmt::Formatter<'_>, name: &str, r: &StatsRow| {
            writeln!(
                f,
                "{:<16} {:>8} {:>9} {:>11} {:>11} {:>8} {:>9} {:>7}",
                name, r.patients, r.sequences, r.no_contrast, r.introducing, r.optimal, r.vanishing, r.boxes
            )
        };
        for (k, r) in &self.rows {
            line(f, k, r)?;
        }
        line(f, "Total", &self.total)
    }
}
