//! Training dispatch: one configured method per entry, each yielding one or
//! more checkpoints plus a loss curve. Divergence fails the stage but saves
//! the last good snapshot and names it in the error.

use flowlab::nn::{Activation, Conditioning, Mlp, Tensor};
use flowlab::pairing::PairDataset;
use flowlab::sampler::{ModelKind, NetModel};
use flowlab::train::{
    adversarial_finetune, rectflow_iterate, required_kind, sot_filter, train, write_curve_csv,
    DataSource, Method, Schedules, SigmaLaw, TrainConfig,
};
use flowlab::{Error, Result};

use crate::config::{MethodKind, MethodSpec, NetSpec};
use crate::manifest::RunManifest;
use crate::ops::{named_rng, pairgen, seed_for, RunContext};

pub struct Checkpoint {
    /// Row label in reports; rectification rounds get a `-k<r>` suffix.
    pub eval_label: String,
    /// Artifact path relative to the output directory.
    pub rel: String,
    pub model: NetModel,
}

pub struct TrainedMethod {
    pub label: String,
    pub kind: MethodKind,
    pub spec: MethodSpec,
    pub checkpoints: Vec<Checkpoint>,
    /// The coupling the final rectification round trained on.
    pub rf_coupling: Option<(Tensor, Tensor)>,
    /// Adaptive-weight trace of the adversarial fine-tune, one per iteration.
    pub lambda_history: Option<Vec<f64>>,
    pub lambda_zero_warnings: Option<u64>,
}

fn base_method(kind: &MethodKind) -> Method {
    match kind {
        MethodKind::Dsm => Method::Dsm,
        MethodKind::Ddpm => Method::Ddpm,
        MethodKind::Cfm | MethodKind::Rectflow { .. } => Method::Cfm,
        MethodKind::BotCfm => Method::BotCfm,
        MethodKind::Lmm | MethodKind::LmmAdv { .. } => Method::Lmm,
    }
}

fn activation_of(name: &str) -> Activation {
    match name {
        "linear" => Activation::Linear,
        _ => Activation::Silu,
    }
}

/// Fresh network for a method, seeded by purpose name. Rebuilding with the
/// same arguments reproduces the parameters bit for bit.
pub fn fresh_model(
    dim: usize,
    net: &NetSpec,
    model_kind: ModelKind,
    seed: u64,
    name: &str,
) -> Result<NetModel> {
    let mut rng = named_rng(seed, name);
    let mlp = Mlp::new(
        dim,
        &net.hidden,
        dim,
        activation_of(&net.activation),
        model_kind.expected_conditioning(),
        net.embed,
        &mut rng,
    )?;
    NetModel::new(mlp, model_kind, net.sigma_data)
}

fn train_cfg(spec: &MethodSpec, method: Method, iters: usize, seed: u64, name: &str) -> TrainConfig {
    let mut cfg = TrainConfig::new(method, spec.batch, iters, spec.lr, seed_for(seed, name));
    match spec.sigma_law.as_deref() {
        Some("log_uniform") => cfg.sigma_law = SigmaLaw::LogUniform,
        Some("schedule_uniform") => cfg.sigma_law = SigmaLaw::ScheduleUniform,
        _ => {}
    }
    if let Some(every) = spec.curve_every {
        cfg.curve_every = every;
    }
    cfg
}

/// On divergence, persists the last good snapshot and rewraps the error so
/// it names the saved checkpoint. Other errors pass through.
fn surface_divergence(
    ctx: &RunContext,
    manifest: &mut RunManifest,
    label: &str,
    model_kind: ModelKind,
    sigma_data: f64,
    err: Error,
) -> Error {
    match err {
        Error::TrainingDiverged { iteration, detail, last_good: Some(net) } => {
            let rel = format!("ck-{label}-diverged.fcpt");
            let saved = NetModel::new(*net, model_kind, sigma_data)
                .and_then(|m| m.save(&ctx.out_dir.join(&rel)))
                .and_then(|()| {
                    manifest.record_artifact(&ctx.out_dir, &format!("ck:{label}:diverged"), &rel)
                });
            let where_ = match saved {
                Ok(()) => format!("last good checkpoint at {rel}"),
                Err(e) => format!("failed to save last good checkpoint: {e}"),
            };
            Error::invalid(format!(
                "training {label:?} diverged at iteration {iteration}: {detail}; {where_}"
            ))
        }
        other => other,
    }
}

fn save_checkpoint(
    ctx: &RunContext,
    manifest: &mut RunManifest,
    eval_label: &str,
    model: &NetModel,
) -> Result<String> {
    let rel = format!("ck-{eval_label}.fcpt");
    model.save(&ctx.out_dir.join(&rel))?;
    manifest.record_artifact(&ctx.out_dir, &format!("ck:{eval_label}"), &rel)?;
    Ok(rel)
}

fn save_curve(
    ctx: &RunContext,
    manifest: &mut RunManifest,
    name: &str,
    curve: &[flowlab::train::CurvePoint],
) -> Result<()> {
    let rel = format!("curve-{name}.csv");
    write_curve_csv(ctx.out_dir.join(&rel), curve)?;
    manifest.record_artifact(&ctx.out_dir, &format!("curve:{name}"), &rel)
}

/// Trains every configured method in order. Methods that share the pair
/// cache trigger pair generation on first use.
pub fn run(ctx: &RunContext, manifest: &mut RunManifest) -> Result<Vec<TrainedMethod>> {
    let mix = ctx.config.target.build()?;
    let dim = ctx.config.target.dim();
    let ve = ctx.config.ve_schedule.build()?;
    let vp = ctx.config.vp_schedule.as_ref().map(|s| s.build()).transpose()?;
    let scheds = Schedules { ve: Some(&ve), vp: vp.as_ref() };

    let needs_pairs = ctx
        .config
        .methods
        .iter()
        .any(|m| m.kind().map(|k| k.needs_pairs()).unwrap_or(false));
    let train_pairs: Option<PairDataset> = if needs_pairs {
        let full = pairgen::ensure_pairs(ctx, manifest)?;
        let holdout = ctx.config.pairs.as_ref().map(|p| p.holdout).unwrap_or(0);
        Some(if holdout > 0 { full.split_at(full.len() - holdout)?.0 } else { full })
    } else {
        None
    };

    let mut trained: Vec<TrainedMethod> = Vec::new();
    for spec in &ctx.config.methods {
        let label = spec.label();
        let kind = spec.kind()?;
        let one = train_one(ctx, manifest, spec, &label, &kind, TrainInputs {
            mix: &mix,
            dim,
            ve: &ve,
            scheds: &scheds,
            pairs: train_pairs.as_ref(),
            trained: &trained,
        })?;
        manifest.stage_completed(
            &format!("train:{label}"),
            format!("{} checkpoint(s)", one.checkpoints.len()),
        );
        trained.push(one);
    }
    Ok(trained)
}

struct TrainInputs<'a> {
    mix: &'a flowlab::dist::MixtureSpec,
    dim: usize,
    ve: &'a flowlab::sched::VeSchedule,
    scheds: &'a Schedules<'a>,
    pairs: Option<&'a PairDataset>,
    trained: &'a [TrainedMethod],
}

fn train_one(
    ctx: &RunContext,
    manifest: &mut RunManifest,
    spec: &MethodSpec,
    label: &str,
    kind: &MethodKind,
    inputs: TrainInputs,
) -> Result<TrainedMethod> {
    let net_spec = spec.net.as_ref().unwrap_or(&ctx.config.net);
    let method = base_method(kind);
    let model_kind = required_kind(method);
    let sigma_data = net_spec.sigma_data;
    let mut outcome = TrainedMethod {
        label: label.to_string(),
        kind: kind.clone(),
        spec: spec.clone(),
        checkpoints: Vec::new(),
        rf_coupling: None,
        lambda_history: None,
        lambda_zero_warnings: None,
    };

    match kind {
        MethodKind::Rectflow { rounds } => {
            let flow_pairs = spec.flow_pairs.expect("validated");
            let flow_steps = spec.flow_steps.expect("validated");
            let mut prev: Option<NetModel> = None;
            for r in 1..=*rounds {
                let init = fresh_model(
                    inputs.dim,
                    net_spec,
                    model_kind,
                    ctx.seed,
                    &format!("init/{label}/k{r}"),
                )?;
                let cfg =
                    train_cfg(spec, method, spec.iters, ctx.seed, &format!("train/{label}/k{r}"));
                let out =
                    rectflow_iterate(prev.as_ref(), init, inputs.mix, &cfg, flow_pairs, flow_steps)
                        .map_err(|e| {
                            surface_divergence(ctx, manifest, label, model_kind, sigma_data, e)
                        })?;
                let eval_label = format!("{label}-k{r}");
                let rel = save_checkpoint(ctx, manifest, &eval_label, &out.model)?;
                save_curve(ctx, manifest, &eval_label, &out.curve)?;
                outcome.checkpoints.push(Checkpoint {
                    eval_label,
                    rel,
                    model: out.model.clone(),
                });
                if r == *rounds {
                    outcome.rf_coupling = Some((out.x0, out.x1));
                }
                prev = Some(out.model);
            }
        }
        MethodKind::LmmAdv { sot } => {
            let pairs = inputs.pairs.expect("validated: lmm methods have a pairs section");
            let mut base = match &spec.init_from {
                Some(from) => {
                    let donor = inputs
                        .trained
                        .iter()
                        .find(|t| &t.label == from)
                        .ok_or_else(|| {
                            Error::invalid(format!("init_from {from:?} has not trained yet"))
                        })?;
                    donor.checkpoints.last().expect("every method saves one").model.clone()
                }
                None => fresh_model(
                    inputs.dim,
                    net_spec,
                    model_kind,
                    ctx.seed,
                    &format!("init/{label}"),
                )?,
            };
            if spec.iters > 0 {
                let cfg =
                    train_cfg(spec, Method::Lmm, spec.iters, ctx.seed, &format!("train/{label}"));
                let out = train(base, &cfg, &DataSource::Pairs(pairs), inputs.scheds)
                    .map_err(|e| {
                        surface_divergence(ctx, manifest, label, model_kind, sigma_data, e)
                    })?;
                save_curve(ctx, manifest, &format!("{label}-pretrain"), &out.curve)?;
                base = out.model;
            }

            let disc_hidden = spec.disc_hidden.as_ref().expect("validated");
            let mut disc_rng = named_rng(ctx.seed, &format!("disc/{label}"));
            let disc = Mlp::new(
                inputs.dim,
                disc_hidden,
                1,
                Activation::Silu,
                Conditioning::Unconditioned,
                0,
                &mut disc_rng,
            )?;
            let mut cfg = train_cfg(
                spec,
                Method::Lmm,
                spec.finetune_iters.expect("validated"),
                ctx.seed,
                &format!("adv/{label}"),
            );
            cfg.adversarial = true;
            cfg.disc_lr = spec.disc_lr.expect("validated");
            cfg.lambda_lines = spec.lambda_lines.expect("validated");
            cfg.non_saturating = spec.non_saturating.unwrap_or(false);
            if *sot {
                let steps = spec.inference_steps.as_ref().expect("validated");
                cfg.sigma_law = sot_filter(steps, inputs.ve)?;
            }
            let out = adversarial_finetune(base, disc, pairs, inputs.ve, &cfg).map_err(|e| {
                surface_divergence(ctx, manifest, label, model_kind, sigma_data, e)
            })?;
            let rel = save_checkpoint(ctx, manifest, label, &out.model)?;
            save_curve(ctx, manifest, label, &out.curve)?;
            outcome.checkpoints.push(Checkpoint {
                eval_label: label.to_string(),
                rel,
                model: out.model,
            });
            outcome.lambda_history = Some(out.lambda_history);
            outcome.lambda_zero_warnings = Some(out.lambda_zero_warnings);
        }
        _ => {
            let model = fresh_model(
                inputs.dim,
                net_spec,
                model_kind,
                ctx.seed,
                &format!("init/{label}"),
            )?;
            let source = match kind {
                MethodKind::Lmm => {
                    DataSource::Pairs(inputs.pairs.expect("validated: pairs section present"))
                }
                _ => DataSource::Mixture(inputs.mix),
            };
            let cfg = train_cfg(spec, method, spec.iters, ctx.seed, &format!("train/{label}"));
            let out = train(model, &cfg, &source, inputs.scheds).map_err(|e| {
                surface_divergence(ctx, manifest, label, model_kind, sigma_data, e)
            })?;
            let rel = save_checkpoint(ctx, manifest, label, &out.model)?;
            save_curve(ctx, manifest, label, &out.curve)?;
            outcome.checkpoints.push(Checkpoint {
                eval_label: label.to_string(),
                rel,
                model: out.model,
            });
        }
    }
    Ok(outcome)
}

/// Rebuilds the trained-method list from checkpoints recorded in a previous
/// run's manifest. In-memory extras (couplings, weight traces) are absent.
pub fn load_trained(ctx: &RunContext, manifest: &RunManifest) -> Result<Vec<TrainedMethod>> {
    let mut trained = Vec::new();
    for spec in &ctx.config.methods {
        let label = spec.label();
        let kind = spec.kind()?;
        let eval_labels: Vec<String> = match &kind {
            MethodKind::Rectflow { rounds } => {
                (1..=*rounds).map(|r| format!("{label}-k{r}")).collect()
            }
            _ => vec![label.clone()],
        };
        let mut checkpoints = Vec::new();
        for eval_label in eval_labels {
            let name = format!("ck:{eval_label}");
            let record = manifest.artifact(&name).ok_or_else(|| {
                Error::invalid(format!(
                    "no checkpoint for {eval_label:?} in this output directory; train first"
                ))
            })?;
            let model = NetModel::load(&ctx.out_dir.join(&record.path))?;
            checkpoints.push(Checkpoint { eval_label, rel: record.path.clone(), model });
        }
        trained.push(TrainedMethod {
            label,
            kind,
            spec: spec.clone(),
            checkpoints,
            rf_coupling: None,
            lambda_history: None,
            lambda_zero_warnings: None,
        });
    }
    Ok(trained)
}
