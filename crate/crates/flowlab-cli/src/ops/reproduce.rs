//! One-command pipeline for the high-dimensional two-mode straightness
//! comparison: pair generation, training of every configured method, full
//! evaluation, and a fixed-order summary table of mean path straightness.

use std::fmt::Write as _;

use flowlab::metrics::to_json_pretty;
use flowlab::{Error, Result};

use crate::config::{ExperimentConfig, MethodKind};
use crate::manifest::RunManifest;
use crate::ops::eval::{self, EvalReport};
use crate::ops::train::{self, TrainedMethod};
use crate::ops::{pairgen, RunContext};
use serde::{Deserialize, Serialize};

/// Display names in the order the summary table must list them.
const TABLE_ORDER: [&str; 6] = ["EDM", "OT-CFM", "BOT-CFM", "1-RF", "2-RF", "LMM"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajTableRow {
    pub method: String,
    pub trajectories: usize,
    pub straightness_mean: f64,
    pub straightness_std: f64,
    pub normalized_mean: f64,
    pub normalized_std: f64,
}

pub struct ReproduceOutcome {
    pub table: Vec<TrajTableRow>,
    pub eval: EvalReport,
    pub trained: Vec<TrainedMethod>,
}

/// The eval label each display name resolves to, or the reason it cannot.
fn resolve_labels(cfg: &ExperimentConfig) -> Result<Vec<(String, String)>> {
    let find = |pred: &dyn Fn(&MethodKind) -> bool| {
        cfg.methods.iter().find(|m| m.kind().map(|k| pred(&k)).unwrap_or(false))
    };
    let mut missing = Vec::new();
    let mut pairs = Vec::new();

    match find(&|k| *k == MethodKind::Dsm) {
        Some(m) => pairs.push(("EDM".to_string(), m.label())),
        None => missing.push("a dsm method (EDM row)"),
    }
    match find(&|k| *k == MethodKind::Cfm) {
        Some(m) => pairs.push(("OT-CFM".to_string(), m.label())),
        None => missing.push("a cfm method (OT-CFM row)"),
    }
    match cfg
        .methods
        .iter()
        .find(|m| m.label() == "botcfm" && m.kind().ok() == Some(MethodKind::BotCfm))
    {
        Some(m) => pairs.push(("BOT-CFM".to_string(), m.label())),
        None => missing.push("a batch-paired cfm labelled \"botcfm\" (BOT-CFM row)"),
    }
    match find(&|k| matches!(k, MethodKind::Rectflow { rounds } if *rounds >= 2)) {
        Some(m) => {
            pairs.push(("1-RF".to_string(), format!("{}-k1", m.label())));
            pairs.push(("2-RF".to_string(), format!("{}-k2", m.label())));
        }
        None => missing.push("a rectflow method with at least two rounds (1-RF and 2-RF rows)"),
    }
    match find(&|k| *k == MethodKind::Lmm) {
        Some(m) => pairs.push(("LMM".to_string(), m.label())),
        None => missing.push("an lmm method (LMM row)"),
    }

    if !missing.is_empty() {
        return Err(Error::invalid(format!(
            "config cannot feed the summary table; it lacks {}",
            missing.join(", ")
        )));
    }
    Ok(pairs)
}

fn table_from(eval: &EvalReport, labels: &[(String, String)]) -> Result<Vec<TrajTableRow>> {
    let mut table = Vec::with_capacity(labels.len());
    for (display, label) in labels {
        let rep = eval.straightness_for(label).ok_or_else(|| {
            Error::invalid(format!("evaluation produced no straightness report for {label:?}"))
        })?;
        table.push(TrajTableRow {
            method: display.clone(),
            trajectories: rep.count(),
            straightness_mean: rep.mean(),
            straightness_std: rep.std(),
            normalized_mean: rep.normalized_mean(),
            normalized_std: rep.normalized_std(),
        });
    }
    debug_assert!(table.iter().map(|r| r.method.as_str()).eq(TABLE_ORDER));
    Ok(table)
}

fn table_csv(table: &[TrajTableRow]) -> String {
    let mut out = String::from(
        "method,trajectories,straightness_mean,straightness_std,normalized_mean,normalized_std\n",
    );
    for row in table {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            row.method,
            row.trajectories,
            row.straightness_mean,
            row.straightness_std,
            row.normalized_mean,
            row.normalized_std
        )
        .expect("string write cannot fail");
    }
    out
}

pub fn run(ctx: &RunContext, manifest: &mut RunManifest) -> Result<ReproduceOutcome> {
    // Resolve the table before spending any compute so a config that cannot
    // produce all six rows fails immediately.
    let labels = resolve_labels(&ctx.config)?;

    std::fs::write(ctx.out_dir.join("config.json"), &ctx.raw)?;
    manifest.record_artifact(&ctx.out_dir, "config", "config.json")?;

    let guard = |manifest: &mut RunManifest, stage: &str, err: &Error| {
        manifest.stage_failed(stage, err.to_string());
        let _ = manifest.save(&ctx.out_dir);
    };

    if let Err(e) = pairgen::run(ctx, manifest) {
        guard(manifest, "pairgen", &e);
        return Err(e);
    }
    manifest.save(&ctx.out_dir)?;

    let trained = match train::run(ctx, manifest) {
        Ok(t) => t,
        Err(e) => {
            guard(manifest, "train", &e);
            return Err(e);
        }
    };
    manifest.save(&ctx.out_dir)?;

    let eval = match eval::run(ctx, manifest, &trained) {
        Ok(r) => r,
        Err(e) => {
            guard(manifest, "eval", &e);
            return Err(e);
        }
    };
    manifest.save(&ctx.out_dir)?;

    let table = match table_from(&eval, &labels) {
        Ok(t) => t,
        Err(e) => {
            guard(manifest, "table", &e);
            return Err(e);
        }
    };
    std::fs::write(ctx.out_dir.join("traj_table.json"), to_json_pretty(&table)?)?;
    std::fs::write(ctx.out_dir.join("traj_table.csv"), table_csv(&table))?;
    manifest.record_artifact(&ctx.out_dir, "table:json", "traj_table.json")?;
    manifest.record_artifact(&ctx.out_dir, "table:csv", "traj_table.csv")?;
    manifest.stage_completed("table", format!("{} rows", table.len()));

    Ok(ReproduceOutcome { table, eval, trained })
}

pub fn render_table(table: &[TrajTableRow]) -> String {
    let mut out = String::new();
    writeln!(out, "{:<8} {:>12} {:>14} {:>14}", "method", "trajectories", "mean", "normalized")
        .expect("string write cannot fail");
    for row in table {
        writeln!(
            out,
            "{:<8} {:>12} {:>14.6} {:>14.6}",
            row.method, row.trajectories, row.straightness_mean, row.normalized_mean
        )
        .expect("string write cannot fail");
    }
    out
}
