use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bytedata::{sample_probe_pair, ProbeSpec, BYTE_OFFSET};
use crate::downsamplers::{perturbation_sensitivity, random_instance, DownsamplerConfig};
use crate::error::{Error, Result};

pub const DEFAULT_ORACLE_SEEDS: [u64; 3] = [11, 22, 33];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReachabilitySet {
    pub config: String,
    /// `reachable[t]` for 0-based target position `t`.
    pub reachable: Vec<bool>,
    /// Input positions that move the block predicting target `t`.
    pub derivation: Vec<Vec<usize>>,
}

impl ReachabilitySet {
    /// 1-based reachable target positions.
    pub fn positions(&self) -> Vec<usize> {
        self.reachable
            .iter()
            .enumerate()
            .filter(|(_, &r)| r)
            .map(|(t, _)| t + 1)
            .collect()
    }
}

/// Static leak detector: bumps each embedded input row of a probe input
/// under randomly initialised layers and records which blocks respond.
/// Target `t` is reachable iff block `⌊t/δ⌋` responds to input position
/// `t + pδ`, for any of `seeds`.
pub fn reachability_oracle(config: &DownsamplerConfig, spec: &ProbeSpec, seeds: &[u64]) -> Result<ReachabilitySet> {
    spec.validate()?;
    if config.delta != spec.delta {
        return Err(Error::Config("oracle: config and probe delta differ".into()));
    }
    let config = DownsamplerConfig {
        vocab_size: BYTE_OFFSET as usize + spec.probe_vocab,
        ..config.clone()
    };
    let blocks = spec.seq_len / spec.delta;
    let mut inputs: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); blocks];
    for &seed in seeds {
        let (ds, store) = random_instance(&config, seed)?;
        let table = store.to_table::<f64>();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pair = sample_probe_pair(spec, &mut rng);
        let ids: Vec<usize> = pair.input.ids.iter().map(|&i| i as usize).collect();
        let sens = perturbation_sensitivity(&ds, &table, &ids, seed, 1e-6);
        for (j, row) in sens.iter().enumerate() {
            for (b, set) in inputs.iter_mut().enumerate() {
                if row[b] {
                    set.insert(j);
                }
            }
        }
    }
    let pad = spec.pad_len();
    let reachable: Vec<bool> = (0..spec.seq_len)
        .map(|t| inputs[t / spec.delta].contains(&(t + pad)))
        .collect();
    let derivation = (0..spec.seq_len)
        .map(|t| inputs[t / spec.delta].iter().copied().collect())
        .collect();
    Ok(ReachabilitySet {
        config: super::report::cell_label(&config, spec.pad_multiplier),
        reachable,
        derivation,
    })
}
