//! Subcommand entry points. Each one locks the output directory, opens or
//! creates its manifest, runs the operation, and persists the manifest. A
//! directory belongs to one (config, seed) identity for its whole life.

use std::path::{Path, PathBuf};

use flowlab::{Error, Result};

use crate::config::load_config;
use crate::manifest::{DirLock, RunManifest};
use crate::ops::{eval, gradcheck, otstudy, pairgen, reproduce, train, RunContext};

#[derive(Clone, Debug)]
pub struct CommonArgs {
    pub config: PathBuf,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub smoke: bool,
}

struct Session {
    ctx: RunContext,
    manifest: RunManifest,
    _lock: DirLock,
}

impl Session {
    fn open(args: &CommonArgs) -> Result<Session> {
        let loaded = load_config(&args.config)?;
        let ctx = RunContext::new(loaded, args.seed, args.out.as_deref(), args.smoke);
        let lock = DirLock::acquire(&ctx.out_dir)?;
        let manifest = open_manifest(&ctx)?;
        Ok(Session { ctx, manifest, _lock: lock })
    }

    fn close(self) -> Result<()> {
        self.manifest.save(&self.ctx.out_dir)
    }
}

/// Loads the directory's manifest if one exists, enforcing that it was
/// written by the same (config, seed); otherwise starts a fresh one.
fn open_manifest(ctx: &RunContext) -> Result<RunManifest> {
    if ctx.out_dir.join("manifest.json").exists() {
        let m = RunManifest::load(&ctx.out_dir)?;
        if m.config_hash != ctx.hash || m.seed != ctx.seed {
            return Err(Error::invalid(format!(
                "{} already holds a run for config {} seed {}; \
                 this invocation is config {} seed {}. Point --out somewhere fresh.",
                ctx.out_dir.display(),
                &m.config_hash[..12.min(m.config_hash.len())],
                m.seed,
                &ctx.hash[..12],
                ctx.seed
            )));
        }
        Ok(m)
    } else {
        Ok(RunManifest::new(&ctx.hash, ctx.seed))
    }
}

pub fn cmd_pairgen(args: &CommonArgs) -> Result<()> {
    let mut s = Session::open(args)?;
    let out = pairgen::run(&s.ctx, &mut s.manifest)?;
    println!(
        "pairs: {} ({} rows, dim {}{})",
        out.path.display(),
        out.count,
        out.dim,
        if out.reused { ", reused" } else { "" }
    );
    s.close()
}

pub fn cmd_train(args: &CommonArgs) -> Result<()> {
    let mut s = Session::open(args)?;
    let trained = train::run(&s.ctx, &mut s.manifest)?;
    for t in &trained {
        for ck in &t.checkpoints {
            println!("trained {}: {}", ck.eval_label, s.ctx.out_dir.join(&ck.rel).display());
        }
    }
    s.close()
}

pub fn cmd_eval(args: &CommonArgs) -> Result<()> {
    let mut s = Session::open(args)?;
    let trained = train::load_trained(&s.ctx, &s.manifest)?;
    let report = eval::run(&s.ctx, &mut s.manifest, &trained)?;
    println!(
        "eval: {} rows over {} methods -> {}",
        report.rows.len(),
        report.straightness.len(),
        s.ctx.out_dir.join("report.json").display()
    );
    s.close()
}

pub fn cmd_otstudy(args: &CommonArgs) -> Result<()> {
    let mut s = Session::open(args)?;
    let report = otstudy::run(&s.ctx, &mut s.manifest)?;
    println!(
        "otstudy: {} cells, {} trials each, all under the bound",
        report.cells().len(),
        report.trials()
    );
    s.close()
}

pub fn cmd_reproduce(args: &CommonArgs) -> Result<()> {
    let mut s = Session::open(args)?;
    let out = reproduce::run(&s.ctx, &mut s.manifest)?;
    print!("{}", reproduce::render_table(&out.table));
    s.close()
}

pub fn cmd_gradcheck(args: &CommonArgs) -> Result<()> {
    let mut s = Session::open(args)?;
    let report = gradcheck::run(&s.ctx, &mut s.manifest)?;
    for row in &report.rows {
        println!(
            "gradcheck {}: max rel error {:.3e} over {} trials",
            row.loss, row.max_rel_error, row.trials
        );
    }
    s.close()
}

/// Re-hashes every recorded artifact and reports mismatches.
pub fn cmd_verify(config: &Path, out: Option<&Path>) -> Result<()> {
    let loaded = load_config(config)?;
    let out_dir = loaded.out_dir(out);
    let manifest = RunManifest::load(&out_dir)?;
    manifest.verify(&out_dir)?;
    println!(
        "verified {} artifacts in {}",
        manifest.artifacts.len(),
        out_dir.display()
    );
    Ok(())
}
