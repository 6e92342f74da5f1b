use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const MIN_SPLIT_IDS: usize = 10;

/// Disjoint train/validation/test partition of stimulus ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
    pub seed: u64,
}

/// Seeded 80/10/10 shuffle split. Validation and test each take `round(n / 10)`.
pub fn make_split(ids: &[String], seed: u64) -> Result<SplitAssignment> {
    if ids.len() < MIN_SPLIT_IDS {
        return Err(Error::invalid(format!(
            "need at least {MIN_SPLIT_IDS} ids to split, got {}",
            ids.len()
        )));
    }
    let mut seen = HashSet::with_capacity(ids.len());
    if let Some(dup) = ids.iter().find(|id| !seen.insert(id.as_str())) {
        return Err(Error::invalid(format!("duplicate id {dup}")));
    }

    let mut order: Vec<String> = ids.to_vec();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let n = ids.len();
    let tenth = (n as f64 / 10.0).round() as usize;
    let test = order.split_off(n - tenth);
    let validation = order.split_off(n - 2 * tenth);
    Ok(SplitAssignment {
        train: order,
        validation,
        test,
        seed,
    })
}
