//! The operations behind each subcommand. Each takes a [`RunContext`] and a
//! mutable manifest, writes its artifacts under the context's output
//! directory, and returns its in-memory results for downstream stages.

pub mod eval;
pub mod gradcheck;
pub mod otstudy;
pub mod pairgen;
pub mod reproduce;
pub mod train;

use std::path::{Path, PathBuf};

use flowlab::dist::Rng;
use sha2::{Digest, Sha256};

use crate::config::{ExperimentConfig, LoadedConfig};

/// Smoke-mode budget caps: every stage completes in seconds, exercising the
/// full pipeline shape without the full cost.
pub const SMOKE_ITERS: usize = 50;
pub const SMOKE_BATCH: usize = 64;
pub const SMOKE_PAIRS: usize = 512;
pub const SMOKE_FLOW_PAIRS: usize = 256;
pub const SMOKE_FLOW_STEPS: usize = 16;
pub const SMOKE_TRAJECTORIES: usize = 32;
pub const SMOKE_TRIALS: usize = 200;
pub const SMOKE_COLLAPSE_SAMPLES: usize = 256;
pub const SMOKE_PERMUTATIONS: usize = 19;

/// Everything an operation needs: the validated (possibly smoke-clamped)
/// config, its identity hash, and where to read and write.
pub struct RunContext {
    pub config: ExperimentConfig,
    /// Canonical hash of the original document; smoke clamping does not
    /// change it, which is why smoke artifacts carry a marker in their names.
    pub hash: String,
    /// Original document text, preserved for the config-copy artifact.
    pub raw: String,
    pub base_dir: PathBuf,
    pub out_dir: PathBuf,
    pub seed: u64,
    pub smoke: bool,
}

impl RunContext {
    pub fn new(
        loaded: LoadedConfig,
        seed_override: Option<u64>,
        out_override: Option<&Path>,
        smoke: bool,
    ) -> Self {
        let out_dir = loaded.out_dir(out_override);
        let seed = seed_override.unwrap_or(loaded.config.seed);
        let mut config = loaded.config;
        if smoke {
            smoke_clamp(&mut config);
        }
        RunContext {
            config,
            hash: loaded.hash,
            raw: loaded.raw,
            base_dir: loaded.base_dir,
            out_dir,
            seed,
            smoke,
        }
    }

    /// Resolves a config-relative path.
    pub fn resolve(&self, rel: &str) -> PathBuf {
        let p = Path::new(rel);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }
}

/// Stable stream label for a named purpose: the run seed XORed with the
/// first eight bytes of SHA-256(name). Independent of declaration order.
pub fn seed_for(seed: u64, name: &str) -> u64 {
    let digest = Sha256::digest(name.as_bytes());
    let mut first = [0u8; 8];
    first.copy_from_slice(&digest[..8]);
    seed ^ u64::from_le_bytes(first)
}

/// A fresh generator for a named purpose under the run seed.
pub fn named_rng(seed: u64, name: &str) -> Rng {
    Rng::seed_from(seed_for(seed, name))
}

/// Caps budgets in place. The clamped document still satisfies every
/// validation invariant: holdout stays below the pair count and at or above
/// the isoline demand it has to serve.
fn smoke_clamp(config: &mut ExperimentConfig) {
    for m in &mut config.methods {
        m.iters = m.iters.min(SMOKE_ITERS);
        m.batch = m.batch.min(SMOKE_BATCH);
        if let Some(v) = &mut m.finetune_iters {
            *v = (*v).min(SMOKE_ITERS);
        }
        if let Some(v) = &mut m.flow_pairs {
            *v = (*v).min(SMOKE_FLOW_PAIRS);
        }
        if let Some(v) = &mut m.flow_steps {
            *v = (*v).min(SMOKE_FLOW_STEPS);
        }
    }
    if let Some(pairs) = &mut config.pairs {
        pairs.count = pairs.count.min(SMOKE_PAIRS);
        pairs.holdout = pairs.holdout.min(pairs.count / 2);
        config.probes.isoline_pairs = config.probes.isoline_pairs.min(pairs.holdout);
    }
    config.sampling.trajectories = config.sampling.trajectories.min(SMOKE_TRAJECTORIES);
    config.probes.collapse_samples =
        config.probes.collapse_samples.min(SMOKE_COLLAPSE_SAMPLES);
    config.probes.energy_permutations =
        config.probes.energy_permutations.min(SMOKE_PERMUTATIONS);
    if let Some(ot) = &mut config.otstudy {
        ot.trials = ot.trials.min(SMOKE_TRIALS);
    }
}
