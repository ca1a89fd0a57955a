use std::collections::BTreeMap;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{DemoError, Result};

/// Identity-balanced batches for one epoch.
///
/// Identities are shuffled and split into groups of `p` (an incomplete last
/// group is dropped). Each identity contributes exactly `k` instances: a
/// shuffled pass over its instances, topped up by sampling with replacement
/// when it has fewer than `k`. The order depends only on `(seed, epoch)`.
pub fn pk_sample(
    groups: &BTreeMap<usize, Vec<usize>>,
    p: usize,
    k: usize,
    seed: u64,
    epoch: usize,
) -> Result<Vec<Vec<usize>>> {
    if p == 0 || k == 0 {
        return Err(DemoError::Config("P and K must be positive".into()));
    }
    let ids: Vec<usize> = groups
        .iter()
        .filter(|(_, v)| !v.is_empty())
        .map(|(&id, _)| id)
        .collect();
    if ids.len() < p {
        return Err(DemoError::Config(format!(
            "dataset has {} identities, fewer than P = {p}",
            ids.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut order = ids;
    order.shuffle(&mut rng);
    let mut batches = Vec::with_capacity(order.len() / p);
    for chunk in order.chunks_exact(p) {
        let mut batch = Vec::with_capacity(p * k);
        for id in chunk {
            let pool = &groups[id];
            let mut picked = pool.clone();
            picked.shuffle(&mut rng);
            picked.truncate(k);
            while picked.len() < k {
                picked.push(*pool.choose(&mut rng).expect("non-empty pool"));
            }
            batch.extend(picked);
        }
        batches.push(batch);
    }
    Ok(batches)
}
