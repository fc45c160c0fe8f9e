//! Variant initialization from the pretrained priors and the action
//! fine-tuning loop. The fine-tuning data iterator is typed over episodes
//! alone: probe items cannot enter it.

use rand::Rng;
use rayon::prelude::*;

use super::{drive, merge_grads, AdamState, AdamW, BatchOut, FreezeSpec, GradAcc, TrainConfig, TrainOutcome};
use crate::error::{Error, Result};
use crate::heads::{action_loss_flow, action_loss_mlp, compose_total, wm_loss, ActionChunk, FlowSample};
use crate::layout::VariantId;
use crate::model::{BoundModel, ModelBundle, ModelConfig};
use crate::rng;
use crate::tensor::{Graph, Tensor};
use crate::world::{Episode, QAItem};

const GRAD_CHUNK: usize = 4;

/// Parameter names forming the visual-language prior (what `init_variant`
/// copies into every bundle).
fn vlm_prior_names(model: &ModelBundle) -> Vec<String> {
    let mut names = Vec::new();
    model.for_each_param(|n, _| {
        let in_vlm = n.starts_with("expert.sem.")
            || n == "enc.text"
            || n.starts_with("enc.sem.")
            || n == "pos.text"
            || n == "pos.sem_vision"
            || n.starts_with("head.qa.");
        if in_vlm {
            names.push(n.to_string());
        }
    });
    names
}

/// Parameter names forming the generative prior's dorsal pathway.
fn gen_prior_names(model: &ModelBundle) -> Vec<String> {
    let mut names = Vec::new();
    model.for_each_param(|n, _| {
        let in_gen = n.starts_with("expert.dor.")
            || n.starts_with("enc.dor.")
            || n == "pos.dor_vision"
            || n.starts_with("enc.genact.")
            || n.starts_with("head.wm.")
            || n.starts_with("head.pix.");
        if in_gen {
            names.push(n.to_string());
        }
    });
    names
}

/// Build a variant's starting bundle: the semantic pathway always loads the
/// visual-language prior; the dorsal expert is absent, random, a copy of
/// the semantic prior expert, or the generative prior, per variant; the
/// action expert is always fresh.
pub fn init_variant(
    variant: VariantId,
    config: &ModelConfig,
    vlm_prior: &ModelBundle,
    gen_prior: Option<&ModelBundle>,
    init_seed: u64,
) -> Result<ModelBundle> {
    let mut model = ModelBundle::init(variant, config.clone(), init_seed)?;
    if vlm_prior.config != *config {
        return Err(Error::config(
            "visual-language prior was trained with a different model config",
        ));
    }
    for name in vlm_prior_names(&model) {
        let t = vlm_prior
            .get_param(&name)
            .ok_or_else(|| Error::config(format!("prior is missing '{name}'")))?;
        model.set_param(&name, t)?;
    }
    match variant {
        VariantId::TwoExpert
        | VariantId::FreezeVlmMlp
        | VariantId::MlpHead
        | VariantId::RandomInit => {}
        VariantId::VlmInitVision | VariantId::VlmInitQuery => {
            // duplicate the semantic expert weights into the dorsal expert
            let mut names = Vec::new();
            model.for_each_param(|n, _| {
                if n.starts_with("expert.dor.") {
                    names.push(n.to_string());
                }
            });
            for dor_name in names {
                let sem_name = dor_name.replacen("expert.dor.", "expert.sem.", 1);
                let t = vlm_prior
                    .get_param(&sem_name)
                    .ok_or_else(|| Error::config(format!("prior is missing '{sem_name}'")))?;
                model.set_param(&dor_name, t)?;
            }
        }
        VariantId::GenInit | VariantId::Uam => {
            let gen = gen_prior.ok_or_else(|| {
                Error::config(format!("variant {variant} requires the generative prior"))
            })?;
            if gen.config != *config {
                return Err(Error::config(
                    "generative prior was trained with a different model config",
                ));
            }
            for name in gen_prior_names(&model) {
                let t = gen
                    .get_param(&name)
                    .ok_or_else(|| Error::config(format!("generative prior is missing '{name}'")))?;
                model.set_param(&name, t)?;
            }
        }
    }
    Ok(model)
}

/// One sampled training example: an episode step with its target chunk.
/// The iterator is typed over episode references alone; probe items cannot
/// flow through it.
struct ActionSample<'a> {
    episode: &'a Episode,
    t: usize,
    slot: u64,
}

fn target_chunk(ep: &Episode, t: usize, horizon: usize) -> ActionChunk {
    let mut rows = Vec::with_capacity(horizon);
    for i in 0..horizon {
        rows.push(*ep.actions.get(t + i).unwrap_or(&[0.0, 0.0, 0.0]));
    }
    ActionChunk { rows }
}

/// Action-only fine-tuning. Per batch: the variant's loss (flow or
/// sequential head, plus the weighted dorsal prediction term for the
/// dynamics-supervised variant), backward, global-norm clip, optimizer step
/// on non-frozen groups. With an evaluation cadence set, the probe score is
/// recorded every `eval_every` steps.
pub fn finetune_actions(
    model: ModelBundle,
    cfg: &TrainConfig,
    freeze: &FreezeSpec,
    episodes: &[Episode],
    probe: Option<&[QAItem]>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    freeze.validate(&model)?;
    if episodes.is_empty() {
        return Err(Error::usage("fine-tuning requires a non-empty dataset"));
    }
    let variant = model.variant;
    let horizon = model.config.horizon;
    let lambda = if variant.wm_supervised() { cfg.lambda } else { 0.0 };
    let batch_seed = rng::derive(cfg.seed, "ft-batch");
    let flow_seed = rng::derive(cfg.seed, "ft-flow");
    let noise_seed = rng::derive(cfg.seed, "ft-dnoise");
    let inv_b = 1.0 / cfg.batch_size as f64;
    let opt = AdamW {
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
        ..AdamW::default()
    };
    let mut model = model;
    let mut state = AdamState::default();
    let mut metrics = Vec::new();
    let mut probe_rows = Vec::new();

    let example_losses = |sample: &ActionSample,
                          step: usize,
                          model: &ModelBundle,
                          g: &mut Graph,
                          bm: &BoundModel|
     -> Result<(f64, f64, crate::tensor::Var)> {
        let target = target_chunk(sample.episode, sample.t, horizon);
        if variant.is_mlp_coupling() {
            let (_, l) = action_loss_mlp(
                g,
                bm,
                &sample.episode.frames[sample.t],
                &sample.episode.instruction,
                &target,
            )?;
            return Ok((g.value(l).scalar(), 0.0, l));
        }
        let mut fr = rng::from_seed(rng::child(flow_seed, ((step as u64) << 8) | sample.slot));
        let fs = FlowSample::draw(&mut fr, &target);
        let dnoise = if model.config.dorsal_noise > 0.0 && variant.dorsal_takes_vision() {
            let mut nr =
                rng::from_seed(rng::child(noise_seed, ((step as u64) << 8) | sample.slot));
            Some(Tensor::randn(
                vec![model.config.n_dor(), model.config.width],
                model.config.dtype,
                model.config.dorsal_noise,
                &mut nr,
            ))
        } else {
            None
        };
        let (trace, l_act) = action_loss_flow(
            g,
            bm,
            &sample.episode.frames[sample.t],
            &sample.episode.instruction,
            sample.episode.proprio(sample.t),
            &target,
            &fs,
            dnoise.as_ref(),
        )?;
        if lambda > 0.0 {
            let l_wm = wm_loss(g, bm, &trace, &sample.episode.frames[sample.t + 1])?;
            let total = compose_total(g, l_act, Some(l_wm), lambda)?;
            Ok((g.value(l_act).scalar(), g.value(l_wm).scalar(), total))
        } else {
            Ok((g.value(l_act).scalar(), 0.0, l_act))
        }
    };

    let step_fn = |step: usize, model: &ModelBundle| -> Result<BatchOut> {
        let mut r = rng::from_seed(rng::child(batch_seed, step as u64));
        let picks: Vec<(usize, usize)> = (0..cfg.batch_size)
            .map(|_| {
                let e = r.gen_range(0..episodes.len());
                let t = r.gen_range(0..episodes[e].len());
                (e, t)
            })
            .collect();
        let parts: Vec<Result<(f64, f64, GradAcc)>> = picks
            .par_chunks(GRAD_CHUNK)
            .enumerate()
            .map(|(ci, chunk)| {
                let mut act_sum = 0.0;
                let mut wm_sum = 0.0;
                let mut grads = GradAcc::default();
                for (k, &(e, t)) in chunk.iter().enumerate() {
                    let sample = ActionSample {
                        episode: &episodes[e],
                        t,
                        slot: (ci * GRAD_CHUNK + k) as u64,
                    };
                    let mut g = Graph::new(model.config.dtype);
                    // frozen parameters skip gradient tracking entirely
                    let bm =
                        BoundModel::bind_filtered(&mut g, model, &|n| !freeze.is_frozen(n))?;
                    let (l_act, l_wm, total) = example_losses(&sample, step, model, &mut g, &bm)?;
                    g.backward(total)?;
                    grads.add(bm.grads(&g));
                    act_sum += l_act;
                    wm_sum += l_wm;
                }
                Ok((act_sum, wm_sum, grads))
            })
            .collect();
        let mut out = BatchOut {
            grads: Default::default(),
            loss: 0.0,
            l_act: 0.0,
            l_wm: 0.0,
        };
        for p in parts {
            let (act, wm, grads) = p?;
            out.l_act += act * inv_b;
            out.l_wm += wm * inv_b;
            merge_grads(&mut out.grads, grads, inv_b);
        }
        out.loss = out.l_act + lambda * out.l_wm;
        Ok(out)
    };

    let mut next = 0;
    while next < cfg.steps {
        let end = if cfg.eval_every > 0 {
            (next + cfg.eval_every).min(cfg.steps)
        } else {
            cfg.steps
        };
        drive(
            &mut model,
            &opt,
            &mut state,
            freeze,
            cfg.clip_norm,
            next,
            end,
            cfg.log_every,
            &mut metrics,
            step_fn,
        )?;
        if cfg.eval_every > 0 {
            if let Some(suite) = probe {
                let sub = &suite[..suite.len().min(100)];
                let (acc, _) = crate::eval::vlm_score(&model, sub)?;
                probe_rows.push((end, acc));
            }
        }
        next = end;
    }

    Ok(TrainOutcome {
        model,
        opt: state,
        metrics,
        final_step: cfg.steps,
        probe_rows,
    })
}
