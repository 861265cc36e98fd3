//! Random-matching scaling study: how far the best of `n` candidate noise
//! draws aligns with a fixed direction as `n` and the dimension grow.

use std::fmt::Write as _;

use flowlab::metrics::{ot_scaling_study, to_json_pretty, OtScalingReport};
use flowlab::{Error, Result};

use crate::manifest::RunManifest;
use crate::ops::{named_rng, RunContext};

pub fn run(ctx: &RunContext, manifest: &mut RunManifest) -> Result<OtScalingReport> {
    let spec = ctx
        .config
        .otstudy
        .as_ref()
        .ok_or_else(|| Error::invalid("config has no otstudy section"))?;
    let rng = named_rng(ctx.seed, "otstudy");
    let report = ot_scaling_study(&spec.ds, &spec.ns, spec.trials, &rng)?;

    std::fs::write(ctx.out_dir.join("otstudy.json"), to_json_pretty(&report)?)?;
    std::fs::write(ctx.out_dir.join("otstudy.csv"), csv_of(&report))?;
    manifest.record_artifact(&ctx.out_dir, "otstudy:json", "otstudy.json")?;
    manifest.record_artifact(&ctx.out_dir, "otstudy:csv", "otstudy.csv")?;

    // The study is also an assertion: selection strength must stay under the
    // analytic envelope wherever that envelope is meaningful (n ≥ 2).
    for cell in report.cells() {
        if cell.n >= 2 && cell.mean_max_dot > cell.bound {
            manifest.stage_failed(
                "otstudy",
                format!(
                    "d={} n={}: mean max dot {:.6} exceeds bound {:.6}",
                    cell.d, cell.n, cell.mean_max_dot, cell.bound
                ),
            );
            return Err(Error::invalid(format!(
                "scaling bound violated at d={} n={}",
                cell.d, cell.n
            )));
        }
    }
    manifest.stage_completed(
        "otstudy",
        format!("{} cells, {} trials each", report.cells().len(), report.trials()),
    );
    Ok(report)
}

fn csv_of(report: &OtScalingReport) -> String {
    let mut out = String::from("d,n,trials,mean_max_dot,stderr,bound,var_dot\n");
    for cell in report.cells() {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            cell.d,
            cell.n,
            report.trials(),
            cell.mean_max_dot,
            cell.stderr,
            cell.bound,
            cell.var_dot
        )
        .expect("string write cannot fail");
    }
    out
}
