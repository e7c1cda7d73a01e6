//! Image samplers over a COCO dataset.

use std::collections::BTreeMap;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::coco::Dataset;
use crate::error::{Error, Result};

/// Instance count per category id. Every declared category is present.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ClassHistogram {
    pub counts: BTreeMap<u32, usize>,
}

impl ClassHistogram {
    pub fn get(&self, class: u32) -> usize {
        self.counts.get(&class).copied().unwrap_or(0)
    }

    pub fn total(&self) -> usize {
        self.counts.values().sum()
    }
}

/// Non-crowd instances per category.
pub fn class_histogram(ds: &Dataset) -> ClassHistogram {
    let mut counts: BTreeMap<u32, usize> = ds.categories.iter().map(|c| (c.id, 0)).collect();
    for a in ds.annotations.iter().filter(|a| !a.iscrowd) {
        *counts.entry(a.category_id).or_default() += 1;
    }
    ClassHistogram { counts }
}

/// Sampling weight of each image: the sum over its instances of
/// `1 / count(class)`. Rare-class images are drawn more often so that every
/// class contributes the same expected number of instances.
pub fn instance_balanced_weights(ds: &Dataset) -> Vec<f64> {
    let hist = class_histogram(ds);
    let index = ds.image_index();
    let mut w = vec![0.0; ds.images.len()];
    for a in ds.annotations.iter().filter(|a| !a.iscrowd) {
        if let Some(&i) = index.get(&a.image_id) {
            w[i] += 1.0 / hist.get(a.category_id) as f64;
        }
    }
    w
}

/// `n` image indices drawn with replacement in proportion to
/// [`instance_balanced_weights`]. Falls back to uniform sampling when the
/// dataset has no instances.
pub fn instance_balanced_sample(ds: &Dataset, n: usize, seed: u64) -> Result<Vec<usize>> {
    if ds.images.is_empty() {
        return Err(Error::Empty("dataset has no images"));
    }
    let weights = instance_balanced_weights(ds);
    if weights.iter().all(|&w| w == 0.0) {
        return random_sample(ds, n, seed);
    }
    let dist = WeightedIndex::new(&weights).map_err(|e| Error::invalid(format!("sampling weights: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n).map(|_| dist.sample(&mut rng)).collect())
}

/// `n` image indices drawn uniformly with replacement.
pub fn random_sample(ds: &Dataset, n: usize, seed: u64) -> Result<Vec<usize>> {
    if ds.images.is_empty() {
        return Err(Error::Empty("dataset has no images"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n).map(|_| rng.random_range(0..ds.images.len())).collect())
}
