//! Episodic sampling: one few-shot task per draw.

use super::index::{ClassEntry, DatasetIndex, Split};
use super::raster::{Mask, Raster};
use super::transforms::HardTag;
use crate::error::{Error, Result};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// One sampled task: K clean supports and a hard query of the same class.
/// `seed` drives any per-episode randomness downstream (query
/// initialization), so replaying a seeded sampler replays the whole task.
#[derive(Clone, Debug)]
pub struct Episode {
    pub class: String,
    pub supports: Vec<(Raster, Mask)>,
    pub query_image: Raster,
    pub query_mask: Mask,
    pub query_tags: Vec<HardTag>,
    pub seed: u64,
}

/// Draw one episode: the class uniformly among classes that can serve K
/// supports and a query, then K distinct supports without replacement and
/// one query.
pub fn sample_episode(
    index: &DatasetIndex,
    split: Split,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Episode> {
    if k == 0 {
        return Err(Error::Config("shot count K must be at least 1".into()));
    }
    let eligible: Vec<&ClassEntry> = index
        .split(split)
        .iter()
        .filter(|c| c.supports.len() >= k && !c.queries.is_empty())
        .collect();
    if eligible.is_empty() {
        return Err(Error::Contract(format!(
            "no class in the {} split has {k} supports and a query",
            split.name()
        )));
    }
    let class = eligible[rng.random_range(0..eligible.len())];
    let support_idx = rand::seq::index::sample(rng, class.supports.len(), k);
    let supports = support_idx
        .iter()
        .map(|i| (class.supports[i].image.clone(), class.supports[i].mask.clone()))
        .collect();
    let query = &class.queries[rng.random_range(0..class.queries.len())];
    Ok(Episode {
        class: class.name.clone(),
        supports,
        query_image: query.image.clone(),
        query_mask: query.mask.clone(),
        query_tags: query.tags.clone(),
        seed: rng.random::<u64>(),
    })
}
