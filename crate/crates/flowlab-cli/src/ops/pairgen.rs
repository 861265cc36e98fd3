//! Deterministic teacher-pair generation with a content-addressed cache:
//! the artifact name is keyed by (config hash, run seed), so rerunning the
//! same request reuses the existing file and rerunning after deletion
//! regenerates it byte for byte.

use std::path::PathBuf;

use flowlab::pairing::{generate_pairs, PairDataset};
use flowlab::sampler::{AnalyticScore, ModelKind, NetModel};
use flowlab::{Error, Result};

use crate::config::TeacherSpec;
use crate::manifest::RunManifest;
use crate::ops::{seed_for, RunContext};

pub const PAIRS_ARTIFACT: &str = "pairs";

pub struct PairgenOutcome {
    pub path: PathBuf,
    pub count: usize,
    pub dim: usize,
    /// True when an existing artifact satisfied the request.
    pub reused: bool,
}

/// File name for this run's pair cache, unique per (config hash, seed) and
/// per smoke mode, since smoke clamps the record count.
pub fn pairs_rel(ctx: &RunContext) -> String {
    let marker = if ctx.smoke { "-smoke" } else { "" };
    format!("pairs-{}-s{}{}.fpairs", &ctx.hash[..8], ctx.seed, marker)
}

pub fn run(ctx: &RunContext, manifest: &mut RunManifest) -> Result<PairgenOutcome> {
    let spec = ctx
        .config
        .pairs
        .as_ref()
        .ok_or_else(|| Error::invalid("config has no pairs section"))?;
    let dim = ctx.config.target.dim();
    let rel = pairs_rel(ctx);
    let full = ctx.out_dir.join(&rel);

    let mut reused = false;
    if full.exists() {
        match PairDataset::load(&full) {
            Ok(ds) if ds.len() == spec.count && ds.dim() == dim => reused = true,
            // Wrong shape or unreadable: regenerate below.
            _ => {}
        }
    }

    if !reused {
        let sched = ctx.config.ve_schedule.build()?;
        let seed = seed_for(ctx.seed, "pairs");
        let ds = match &spec.teacher {
            TeacherSpec::Analytic => {
                let teacher = AnalyticScore(ctx.config.target.build()?);
                generate_pairs(&teacher, &sched, spec.count, dim, "analytic", seed)?
            }
            TeacherSpec::Checkpoint { path } => {
                let ck = ctx.resolve(path);
                let teacher = NetModel::load(&ck).map_err(|e| Error::Format {
                    path: ck.display().to_string(),
                    detail: format!("teacher checkpoint unusable: {e}"),
                })?;
                if teacher.kind() != ModelKind::Score {
                    return Err(Error::invalid(
                        "teacher checkpoint must hold a score model",
                    ));
                }
                if teacher.dim() != dim {
                    return Err(Error::shape(format!(
                        "teacher works in {} dimensions, target in {dim}",
                        teacher.dim()
                    )));
                }
                let tag = format!("checkpoint:{path}");
                generate_pairs(&teacher, &sched, spec.count, dim, &tag, seed)?
            }
        };
        ds.save(&full)?;
    }

    manifest.record_artifact(&ctx.out_dir, PAIRS_ARTIFACT, &rel)?;
    manifest.stage_completed(
        "pairgen",
        format!("{} pairs in {rel}{}", spec.count, if reused { " (reused)" } else { "" }),
    );
    Ok(PairgenOutcome { path: full, count: spec.count, dim, reused })
}

/// Runs pair generation if needed and loads the dataset.
pub fn ensure_pairs(ctx: &RunContext, manifest: &mut RunManifest) -> Result<PairDataset> {
    let outcome = run(ctx, manifest)?;
    PairDataset::load(&outcome.path)
}
