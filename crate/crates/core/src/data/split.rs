//! Group-atomic stratified k-fold splitting.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::manifest::SequenceManifest;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitItem {
    pub id: String,
    pub group: String,
    pub class: String,
}

impl SplitItem {
    pub fn new(id: impl Into<String>, group: impl Into<String>, class: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            group: group.into(),
            class: class.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupingKey {
    Patient,
    Sequence,
}

impl GroupingKey {
    pub fn items(self, manifests: &[SequenceManifest]) -> Vec<SplitItem> {
        manifests
            .iter()
            .map(|m| {
                let group = match self {
                    GroupingKey::Patient => m.patient_id.clone(),
                    GroupingKey::Sequence => m.sequence_id.clone(),
                };
                SplitItem::new(m.sequence_id.clone(), group, m.view.as_str())
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub k: usize,
    pub seed: u64,
    pub grouping: GroupingKey,
    pub stratify_by: String,
    /// Item ids per fold.
    pub folds: Vec<Vec<String>>,
}

impl SplitPlan {
    /// Training ids and validation ids for fold `i`.
    pub fn fold(&self, i: usize) -> (Vec<String>, Vec<String>) {
        let train = self
            .folds
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != i)
            .flat_map(|(_, f)| f.iter().cloned())
            .collect();
        (train, self.folds[i].clone())
    }
}

struct Group {
    ids: Vec<String>,
    class_counts: BTreeMap<String, usize>,
}

/// Splits `items` into `k` folds. Groups are assigned whole, largest first
/// (ties in seeded random order), each to the fold currently holding the
/// fewest items of the group's classes, then the smallest fold.
pub fn stratified_kfold(items: &[SplitItem], k: usize, seed: u64, grouping: GroupingKey) -> Result<SplitPlan> {
    if k < 2 {
        return Err(Error::param("k", "need at least 2 folds"));
    }
    let mut by_group: BTreeMap<&str, Group> = BTreeMap::new();
    for it in items {
        let g = by_group.entry(&it.group).or_insert_with(|| Group {
            ids: Vec::new(),
            class_counts: BTreeMap::new(),
        });
        g.ids.push(it.id.clone());
        *g.class_counts.entry(it.class.clone()).or_default() += 1;
    }
    if by_group.len() < k {
        return Err(Error::param("k", format!("{} groups cannot fill {k} folds", by_group.len())));
    }

    let classes: Vec<String> = {
        let mut c: Vec<String> = items.iter().map(|i| i.class.clone()).collect();
        c.sort();
        c.dedup();
        c
    };
    let class_idx = |c: &str| classes.binary_search_by(|x| x.as_str().cmp(c)).expect("known class");

    let mut groups: Vec<Group> = by_group.into_values().collect();
    groups.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    groups.sort_by_key(|g| std::cmp::Reverse(g.ids.len()));

    let mut counts = vec![vec![0usize; classes.len()]; k];
    let mut folds: Vec<Vec<String>> = vec![Vec::new(); k];
    for g in groups {
        let add: Vec<(usize, usize)> = g.class_counts.iter().map(|(c, &n)| (class_idx(c), n)).collect();
        let f = (0..k)
            .min_by_key(|&f| {
                let occupancy: usize = add.iter().map(|&(ci, n)| n * counts[f][ci]).sum();
                (!folds[f].is_empty(), occupancy, folds[f].len(), f)
            })
            .expect("k >= 2");
        for &(ci, n) in &add {
            counts[f][ci] += n;
        }
        folds[f].extend(g.ids);
    }
    for f in &mut folds {
        f.sort();
    }
    Ok(SplitPlan {
        k,
        seed,
        grouping,
        stratify_by: "view".into(),
        folds,
    })
}
