//! Evaluation: samples trajectories from every checkpoint with its native
//! solver, scores straightness on each solver's own time grid, runs the
//! configured probes, and writes one JSON and one CSV report. Reports are
//! byte-stable for a fixed (config, seed).

use std::fs::File;
use std::io::{BufWriter, Write as _};

use flowlab::dist::{mixture_mean, sample_mixture, Rng};
use flowlab::metrics::{
    collapse_probe_cfm, collapse_probe_ddpm, collapse_probe_ncsn, energy_distance,
    energy_distance_permutation_null, isoline_probe, quantile, to_json_pretty, write_metric_csv,
    CollapseReport, MetricRow, StraightnessReport,
};
use flowlab::nn::Tensor;
use flowlab::pairing::PairDataset;
use flowlab::sampler::{
    ddpm_reverse_sample, euler_flow_sample, heun_sample, line_path_sample, lmm_sample,
    trajectories_from_snapshots, write_trajectories_csv, ModelKind, NetModel, Trajectory,
};
use flowlab::{Error, Result};

use crate::config::MethodKind;
use crate::manifest::RunManifest;
use crate::ops::train::TrainedMethod;
use crate::ops::{named_rng, pairgen, RunContext};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IsolineEntry {
    pub method: String,
    /// Worst relative endpoint error over the held-out pairs and σ grid.
    pub worst: f64,
    pub pairs: usize,
    pub sigma_points: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyEntry {
    pub method: String,
    pub distance: f64,
    /// 95th percentile of the permutation null for this comparison.
    pub null_q95: f64,
    pub permutations: usize,
    pub samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config_hash: String,
    pub seed: u64,
    pub trajectories: usize,
    pub straightness: Vec<StraightnessReport>,
    pub collapse: Vec<CollapseReport>,
    pub isoline: Vec<IsolineEntry>,
    pub energy: Vec<EnergyEntry>,
    pub rows: Vec<MetricRow>,
}

impl EvalReport {
    pub fn straightness_for(&self, method: &str) -> Option<&StraightnessReport> {
        self.straightness.iter().find(|r| r.method() == method)
    }
}

/// Flat rows for a set of straightness reports, in report order.
pub fn straightness_rows(reports: &[StraightnessReport]) -> Vec<MetricRow> {
    reports.iter().flat_map(|r| r.rows()).collect()
}

fn standard_normal(rows: usize, cols: usize, rng: &mut Rng) -> Tensor {
    let mut t = Tensor::zeros(rows, cols);
    rng.fill_standard_normal(t.data_mut());
    t
}

fn scaled_normal(rows: usize, cols: usize, scale: f64, rng: &mut Rng) -> Tensor {
    let mut t = standard_normal(rows, cols, rng);
    for v in t.data_mut() {
        *v *= scale;
    }
    t
}

/// The σ ladder with its trailing zero, mapped onto [0, 1] as elapsed noise
/// span. This is the physical time grid of ladder-driven solvers.
fn ladder_grid(sigmas_with_zero: &[f64]) -> Vec<f64> {
    let top = sigmas_with_zero[0];
    sigmas_with_zero.iter().map(|&s| (top - s) / top).collect()
}

struct MethodRun {
    eval_label: String,
    /// Straightness-ready paths; ancestral samplers have none.
    trajs: Option<Vec<Trajectory>>,
    /// Grid for [`StraightnessReport::from_paths`]; None means uniform.
    grid: Option<Vec<f64>>,
    /// Generative output of the method's native sampler.
    samples: Tensor,
    nfe: usize,
}

pub fn run(
    ctx: &RunContext,
    manifest: &mut RunManifest,
    trained: &[TrainedMethod],
) -> Result<EvalReport> {
    let cfg = &ctx.config;
    let mix = cfg.target.build()?;
    let ve = cfg.ve_schedule.build()?;
    let vp = cfg.vp_schedule.as_ref().map(|s| s.build()).transpose()?;
    let dim = cfg.target.dim();
    let r = cfg.sampling.trajectories;
    let metric_on = |name: &str| cfg.metrics.iter().any(|m| m == name);

    let mut runs: Vec<MethodRun> = Vec::new();
    for t in trained {
        for ck in &t.checkpoints {
            let label = &ck.eval_label;
            let model = &ck.model;
            let mut init_rng = named_rng(ctx.seed, &format!("eval/init/{label}"));
            let run = match model.kind() {
                ModelKind::Score => {
                    let init = scaled_normal(r, dim, ve.sigma_max, &mut init_rng);
                    let out = heun_sample(model, &ve, &init, true)?;
                    let snaps = out.snapshots.expect("recording was requested");
                    MethodRun {
                        eval_label: label.clone(),
                        trajs: Some(trajectories_from_snapshots(label, ctx.seed, out.nfe, &snaps)?),
                        grid: Some(ladder_grid(&ve.sigmas_with_zero())),
                        samples: out.x_final,
                        nfe: out.nfe,
                    }
                }
                ModelKind::Velocity => {
                    let init = standard_normal(r, dim, &mut init_rng);
                    let out = euler_flow_sample(model, cfg.sampling.euler_steps, &init, true)?;
                    let snaps = out.snapshots.expect("recording was requested");
                    MethodRun {
                        eval_label: label.clone(),
                        trajs: Some(trajectories_from_snapshots(label, ctx.seed, out.nfe, &snaps)?),
                        grid: None,
                        samples: out.x_final,
                        nfe: out.nfe,
                    }
                }
                ModelKind::Endpoint => {
                    // Straightness follows the deterministic line path down
                    // the full ladder; generation uses the few-step sampler.
                    let init = scaled_normal(r, dim, ve.sigma_max, &mut init_rng);
                    let path = line_path_sample(model, &ve, &init, true)?;
                    let snaps = path.snapshots.expect("recording was requested");
                    let steps = few_step_indices(t, cfg);
                    let sigma_first = ve.sigma(steps[0])?;
                    let mut few_rng = named_rng(ctx.seed, &format!("eval/fewstep/{label}"));
                    let few_init = scaled_normal(r, dim, sigma_first, &mut few_rng);
                    let few =
                        lmm_sample(model, &ve, steps, &few_init, &mut few_rng, false)?;
                    MethodRun {
                        eval_label: label.clone(),
                        trajs: Some(trajectories_from_snapshots(
                            label,
                            ctx.seed,
                            path.nfe,
                            &snaps,
                        )?),
                        grid: Some(ladder_grid(&ve.sigmas_with_zero())),
                        samples: few.x_final,
                        nfe: few.nfe,
                    }
                }
                ModelKind::Noise => {
                    let vp = vp.as_ref().ok_or_else(|| {
                        Error::invalid("discrete-time sampling needs a vp_schedule")
                    })?;
                    let init = standard_normal(r, dim, &mut init_rng);
                    let mut noise_rng = named_rng(ctx.seed, &format!("eval/ancestral/{label}"));
                    let samples = ddpm_reverse_sample(model, vp, &init, &mut noise_rng)?;
                    MethodRun {
                        eval_label: label.clone(),
                        trajs: None,
                        grid: None,
                        samples,
                        nfe: vp.steps(),
                    }
                }
            };
            runs.push(run);
        }
    }

    let mut report = EvalReport {
        config_hash: ctx.hash.clone(),
        seed: ctx.seed,
        trajectories: r,
        straightness: Vec::new(),
        collapse: Vec::new(),
        isoline: Vec::new(),
        energy: Vec::new(),
        rows: Vec::new(),
    };

    for run in &runs {
        report.rows.push(MetricRow::scalar("nfe", &run.eval_label, run.nfe as f64));
    }

    if metric_on("straightness") {
        for run in &runs {
            if let Some(trajs) = &run.trajs {
                let rep = match &run.grid {
                    Some(grid) => {
                        StraightnessReport::from_paths(&run.eval_label, grid, trajs)?
                    }
                    None => StraightnessReport::from_trajectories(&run.eval_label, trajs)?,
                };
                report.straightness.push(rep);
            }
        }
        report.rows.extend(straightness_rows(&report.straightness));
    }

    if metric_on("collapse") {
        let mu = mixture_mean(&mix);
        let sigma_terminal = ve.sigma_max;
        let n = cfg.probes.collapse_samples;

        let dsm = model_of(trained, &MethodKind::Dsm)?;
        let mut rng = named_rng(ctx.seed, "eval/collapse/ncsn");
        let states = scaled_normal(n, dim, sigma_terminal, &mut rng);
        report.collapse.push(collapse_probe_ncsn(dsm, &states, sigma_terminal, &mu)?);

        let ddpm = model_of(trained, &MethodKind::Ddpm)?;
        let mut rng = named_rng(ctx.seed, "eval/collapse/ddpm");
        let states = standard_normal(n, dim, &mut rng);
        report.collapse.push(collapse_probe_ddpm(ddpm, &states, 1.0)?);

        let cfm = model_of(trained, &MethodKind::Cfm)?;
        let mut rng = named_rng(ctx.seed, "eval/collapse/cfm");
        let source = standard_normal(n, dim, &mut rng);
        report.collapse.push(collapse_probe_cfm(cfm, &source, &mu)?);

        for rep in &report.collapse {
            report.rows.extend(rep.rows());
        }
    }

    if metric_on("isoline") {
        let holdout = holdout_pairs(ctx, manifest)?;
        let grid = isoline_sigma_grid(&ve, cfg.probes.isoline_sigma_points);
        for t in trained {
            if !t.kind.is_endpoint() {
                continue;
            }
            let ck = t.checkpoints.last().expect("every method saves one");
            let worst = isoline_probe(&ck.model, holdout.x0(), holdout.x1(), &grid)?;
            report.isoline.push(IsolineEntry {
                method: ck.eval_label.clone(),
                worst,
                pairs: holdout.len(),
                sigma_points: grid.len(),
            });
            report.rows.push(MetricRow::scalar("isoline_probe", &ck.eval_label, worst));
        }
    }

    if metric_on("energy") {
        let perms = cfg.probes.energy_permutations;
        for run in &runs {
            let label = &run.eval_label;
            let mut fresh_rng = named_rng(ctx.seed, &format!("eval/fresh/{label}"));
            let fresh = sample_mixture(&mix, r, &mut fresh_rng);
            let distance = energy_distance(&run.samples, &fresh)?;
            let mut null_rng = named_rng(ctx.seed, &format!("eval/null/{label}"));
            let null =
                energy_distance_permutation_null(&run.samples, &fresh, perms, &mut null_rng)?;
            let null_q95 = quantile(&null, 0.95)?;
            report.energy.push(EnergyEntry {
                method: label.clone(),
                distance,
                null_q95,
                permutations: perms,
                samples: r,
            });
            report.rows.push(MetricRow::scalar("energy_distance", label, distance));
            report.rows.push(MetricRow::scalar("energy_null_q95", label, null_q95));
        }
    }

    if cfg.sampling.write_trajectories {
        for run in &runs {
            if let Some(trajs) = &run.trajs {
                let rel = format!("traj-{}.csv", run.eval_label);
                let mut out = BufWriter::new(File::create(ctx.out_dir.join(&rel))?);
                write_trajectories_csv(trajs, &mut out)?;
                out.flush()?;
                drop(out);
                manifest.record_artifact(&ctx.out_dir, &format!("traj:{}", run.eval_label), &rel)?;
            }
        }
    }

    std::fs::write(ctx.out_dir.join("report.json"), to_json_pretty(&report)?)?;
    let mut csv = BufWriter::new(File::create(ctx.out_dir.join("report.csv"))?);
    write_metric_csv(&report.rows, &mut csv)?;
    csv.flush()?;
    drop(csv);
    manifest.record_artifact(&ctx.out_dir, "report:json", "report.json")?;
    manifest.record_artifact(&ctx.out_dir, "report:csv", "report.csv")?;
    manifest.stage_completed(
        "eval",
        format!("{} methods, {} rows", runs.len(), report.rows.len()),
    );
    Ok(report)
}

/// Few-step schedule indices for an endpoint method: its own restriction if
/// it trained with one, else the shared sampling setting.
fn few_step_indices<'a>(t: &'a TrainedMethod, cfg: &'a crate::config::ExperimentConfig) -> &'a [usize] {
    match &t.spec.inference_steps {
        Some(steps) => steps,
        None => &cfg.sampling.lmm_steps,
    }
}

fn model_of<'a>(trained: &'a [TrainedMethod], kind: &MethodKind) -> Result<&'a NetModel> {
    trained
        .iter()
        .find(|t| &t.kind == kind)
        .map(|t| &t.checkpoints[0].model)
        .ok_or_else(|| Error::invalid(format!("no trained method of kind {kind:?}")))
}

/// The trailing holdout of the pair cache, reserved at training time.
fn holdout_pairs(ctx: &RunContext, manifest: &mut RunManifest) -> Result<PairDataset> {
    let full = pairgen::ensure_pairs(ctx, manifest)?;
    let want = ctx.config.probes.isoline_pairs;
    let holdout = ctx.config.pairs.as_ref().map(|p| p.holdout).unwrap_or(0);
    if holdout < want {
        return Err(Error::invalid(format!(
            "isoline probe wants {want} held-out pairs but only {holdout} are reserved"
        )));
    }
    let (_, tail) = full.split_at(full.len() - want)?;
    Ok(tail)
}

/// Log-spaced σ levels spanning the schedule's range, endpoints included.
fn isoline_sigma_grid(ve: &flowlab::sched::VeSchedule, points: usize) -> Vec<f64> {
    let lo = ve.sigma_min.ln();
    let hi = ve.sigma_max.ln();
    (0..points)
        .map(|i| (lo + (hi - lo) * i as f64 / (points - 1) as f64).exp())
        .collect()
}
