use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::rng::{stream_rng, streams};

/// Index sets of a train/tune/validation partition.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub tune: Vec<usize>,
    pub valid: Vec<usize>,
}

/// Randomly partitions `0..n`. Train and tune sizes are the rounded exact
/// shares; validation receives the remainder.
pub fn split_dataset(n: usize, ratios: [f64; 3], seed: u64) -> Result<Split> {
    for (name, r) in ["train", "tune", "valid"].iter().zip(ratios) {
        if !(r > 0.0 && r < 1.0) {
            return Err(config_err(format!("split ratio `{name}` = {r} must lie in (0, 1)")));
        }
    }
    let total: f64 = ratios.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(config_err(format!("split ratios sum to {total}, not 1")));
    }
    let n_train = (n as f64 * ratios[0]).round() as usize;
    let n_tune = ((n as f64 * ratios[1]).round() as usize).min(n - n_train);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut stream_rng(seed, streams::SPLIT));
    let valid = idx.split_off(n_train + n_tune);
    let tune = idx.split_off(n_train);
    Ok(Split {
        train: idx,
        tune,
        valid,
    })
}
