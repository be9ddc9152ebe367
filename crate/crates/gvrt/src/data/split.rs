//! Train/validation/test split construction for domain-rotation experiments.
//!
//! Content ids are split once, independent of domains: a held-out test pool is
//! carved first (per class, so the pool stays balanced), and the remaining ids
//! are dealt into three disjoint groups, again stratified by class. In
//! multi-source mode each source domain trains on a *different* group, so no
//! content id is ever seen by two source domains — sibling renderings of one
//! image never leak across domains. In single-source mode the lone source
//! domain uses all three groups. Validation ids are carved from each source
//! domain's training pool; test ids come exclusively from the test pool,
//! evaluated in the target domains.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::MultiDomainDataset;
use crate::error::{GvrtError, Result};
use crate::rng::component_rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitMode {
    MultiSource,
    SingleSource,
}

/// Id lists for one domain. Source domains have empty `test`; target domains
/// have empty `train` and `val`.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct DomainRoles {
    pub train: Vec<u32>,
    pub val: Vec<u32>,
    pub test: Vec<u32>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitPlan {
    pub mode: SplitMode,
    pub target_domains: Vec<u16>,
    /// Indexed by domain id.
    pub domains: Vec<DomainRoles>,
    /// Group (0, 1, or 2) of every non-test content id.
    pub groups: BTreeMap<u32, u8>,
    pub seed: u64,
    pub val_fraction: f64,
    pub test_fraction: f64,
}

impl SplitPlan {
    /// Source domains, ascending.
    pub fn sources(&self) -> Vec<u16> {
        (0..self.domains.len() as u16)
            .filter(|d| !self.target_domains.contains(d))
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self).unwrap())
            .map_err(|e| GvrtError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = fs::read_to_string(path).map_err(|e| GvrtError::io(path, e))?;
        serde_json::from_str(&raw).map_err(|e| GvrtError::Format {
            path: path.into(),
            reason: e.to_string(),
        })
    }
}

/// Build a split for the given rotation.
///
/// `test_fraction` of each class's ids (rounded, at least one) forms the test
/// pool; the rest are dealt into the three groups.
pub fn build_split_plan(
    dataset: &MultiDomainDataset,
    mode: SplitMode,
    target_domains: &[u16],
    val_fraction: f64,
    test_fraction: f64,
    seed: u64,
) -> Result<SplitPlan> {
    let m = dataset.num_domains as u16;
    if target_domains.is_empty() {
        return Err(GvrtError::Config("no target domains given".into()));
    }
    let mut targets: Vec<u16> = target_domains.to_vec();
    targets.sort_unstable();
    targets.dedup();
    if let Some(&bad) = targets.iter().find(|&&d| d >= m) {
        return Err(GvrtError::Config(format!("target domain {bad} out of range (M={m})")));
    }
    if !(0.0..1.0).contains(&val_fraction) || val_fraction == 0.0 {
        return Err(GvrtError::Config("val_fraction must be in (0, 1)".into()));
    }
    if !(0.0..1.0).contains(&test_fraction) || test_fraction == 0.0 {
        return Err(GvrtError::Config("test_fraction must be in (0, 1)".into()));
    }
    let sources: Vec<u16> = (0..m).filter(|d| !targets.contains(d)).collect();
    if sources.is_empty() {
        return Err(GvrtError::Config("every domain is a target; nothing to train on".into()));
    }
    match mode {
        SplitMode::MultiSource if sources.len() > 3 => {
            return Err(GvrtError::Unsupported(format!(
                "multi-source mode supports at most 3 source domains (got {})",
                sources.len()
            )));
        }
        SplitMode::SingleSource if sources.len() != 1 => {
            return Err(GvrtError::Config(format!(
                "single-source mode needs exactly one source domain (got {})",
                sources.len()
            )));
        }
        _ => {}
    }

    // Ids per class, ascending; carve the test pool and deal out groups.
    let mut by_class: Vec<Vec<u32>> = vec![Vec::new(); dataset.num_classes];
    for id in dataset.ids() {
        let label = dataset.label_of(id).expect("id from dataset");
        by_class[label as usize].push(id);
    }
    let mut rng = component_rng(seed, "split");
    let mut test_pool: Vec<u32> = Vec::new();
    let mut group_ids: [Vec<u32>; 3] = Default::default();
    let mut groups: BTreeMap<u32, u8> = BTreeMap::new();
    for ids in by_class.iter_mut() {
        ids.shuffle(&mut rng);
        let n_test = ((ids.len() as f64 * test_fraction).round() as usize)
            .clamp(1, ids.len().saturating_sub(1));
        for (i, &id) in ids.iter().enumerate() {
            if i < n_test {
                test_pool.push(id);
            } else {
                let g = ((i - n_test) % 3) as u8;
                groups.insert(id, g);
                group_ids[g as usize].push(id);
            }
        }
    }
    test_pool.sort_unstable();

    let mut domains = vec![DomainRoles::default(); m as usize];
    for (slot, &d) in sources.iter().enumerate() {
        let mut pool: Vec<u32> = match mode {
            SplitMode::MultiSource => group_ids[slot % 3].clone(),
            SplitMode::SingleSource => {
                group_ids.iter().flat_map(|g| g.iter().copied()).collect()
            }
        };
        pool.sort_unstable();
        pool.shuffle(&mut rng);
        if pool.len() < 2 {
            return Err(GvrtError::Config(format!(
                "source domain {d} has only {} training ids; split is empty",
                pool.len()
            )));
        }
        let n_val = ((pool.len() as f64 * val_fraction).round() as usize).clamp(1, pool.len() - 1);
        let mut val: Vec<u32> = pool[..n_val].to_vec();
        let mut train: Vec<u32> = pool[n_val..].to_vec();
        val.sort_unstable();
        train.sort_unstable();
        domains[d as usize] = DomainRoles { train, val, test: Vec::new() };
    }
    for &d in &targets {
        domains[d as usize].test = test_pool.clone();
    }

    Ok(SplitPlan {
        mode,
        target_domains: targets,
        domains,
        groups,
        seed,
        val_fraction,
        test_fraction,
    })
}
