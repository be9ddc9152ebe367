//! Training batch stream: equal quotas from every source domain.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::split::SplitPlan;
use crate::data::MultiDomainDataset;
use crate::error::{GvrtError, Result};
use crate::rng::component_rng;

/// Which description accompanies a sample in a batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TextMode {
    /// One of the sample's own sentences, drawn per visit.
    PerImage,
    /// The single canonical sentence of the sample's class.
    PerClass,
}

/// One training batch: sample indices (grouped by source domain, in ascending
/// domain order) and the sentence chosen for each.
pub struct Batch {
    pub indices: Vec<usize>,
    pub sentences: Vec<String>,
}

/// Endless deterministic stream of training batches. Every batch holds
/// exactly `per_domain` samples from each source domain; pools reshuffle on
/// wrap-around when shuffling is on.
pub struct BatchStream<'a> {
    dataset: &'a MultiDomainDataset,
    pools: Vec<Vec<usize>>,
    cursors: Vec<usize>,
    per_domain: usize,
    shuffle: bool,
    text_mode: TextMode,
    rng: ChaCha8Rng,
    /// True when some source pool is smaller than one per-domain quota, so
    /// batches resample ids with wrap-around.
    pub wrapped: bool,
}

impl<'a> BatchStream<'a> {
    pub fn new(
        dataset: &'a MultiDomainDataset,
        plan: &SplitPlan,
        per_domain: usize,
        text_mode: TextMode,
        seed: u64,
        shuffle: bool,
    ) -> Result<Self> {
        if per_domain == 0 {
            return Err(GvrtError::Config("per-domain batch size must be >= 1".into()));
        }
        let mut rng = component_rng(seed, "batches");
        let mut pools = Vec::new();
        for &d in &plan.sources() {
            let mut pool: Vec<usize> = plan.domains[d as usize]
                .train
                .iter()
                .map(|&id| {
                    dataset.sample_index(id, d).ok_or_else(|| {
                        GvrtError::Config(format!("plan id {id} missing in domain {d}"))
                    })
                })
                .collect::<Result<_>>()?;
            if pool.is_empty() {
                return Err(GvrtError::Config(format!("source domain {d} has an empty train pool")));
            }
            if shuffle {
                pool.shuffle(&mut rng);
            }
            pools.push(pool);
        }
        let wrapped = pools.iter().any(|p| p.len() < per_domain);
        Ok(BatchStream {
            dataset,
            cursors: vec![0; pools.len()],
            pools,
            per_domain,
            shuffle,
            text_mode,
            rng,
            wrapped,
        })
    }

    fn sentence_for(&mut self, sample_idx: usize) -> String {
        let s = &self.dataset.samples[sample_idx];
        match self.text_mode {
            TextMode::PerClass => self
                .dataset
                .canonical_sentence(s.label)
                .expect("class has samples")
                .to_string(),
            TextMode::PerImage => {
                let pick = self.rng.gen_range(0..s.texts.len());
                s.texts[pick].clone()
            }
        }
    }

    /// Produce the next batch; never exhausts.
    pub fn next_batch(&mut self) -> Batch {
        let mut indices = Vec::with_capacity(self.per_domain * self.pools.len());
        for p in 0..self.pools.len() {
            let mut taken = 0;
            while taken < self.per_domain {
                if self.cursors[p] >= self.pools[p].len() {
                    if self.shuffle {
                        // Reshuffle in place at each wrap; split the borrow so
                        // the stream RNG can drive the shuffle.
                        let (pools, rng) = (&mut self.pools, &mut self.rng);
                        pools[p].shuffle(rng);
                    }
                    self.cursors[p] = 0;
                }
                indices.push(self.pools[p][self.cursors[p]]);
                self.cursors[p] += 1;
                taken += 1;
            }
        }
        let sentences = indices.iter().map(|&i| self.sentence_for(i)).collect();
        Batch { indices, sentences }
    }
}

/// Fixed-order evaluation batches over one domain's id list.
pub fn eval_batches(
    dataset: &MultiDomainDataset,
    ids: &[u32],
    domain: u16,
    batch_size: usize,
) -> Result<Vec<Vec<usize>>> {
    let mut indices = Vec::with_capacity(ids.len());
    for &id in ids {
        indices.push(dataset.sample_index(id, domain).ok_or_else(|| {
            GvrtError::Config(format!("id {id} missing in domain {domain}"))
        })?);
    }
    Ok(indices.chunks(batch_size.max(1)).map(|c| c.to_vec()).collect())
}
