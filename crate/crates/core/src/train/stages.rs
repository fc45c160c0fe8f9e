//! The two pretraining stages that manufacture the toy priors: a
//! visual-language prior trained on the probe suite, and a generative prior
//! trained on action-conditioned next-frame latent prediction.

use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;

use super::{drive, merge_grads, AdamState, AdamW, BatchOut, FreezeSpec, GradAcc, TrainConfig, TrainOutcome};
use crate::encode::{dorsal_latent, embed_qa, encode_dorsal};
use crate::error::{Error, Result};
use crate::heads::{pixel_decode, qa_logits, wm_prediction};
use crate::layout::{ExpertId, VariantId};
use crate::model::{forward, forward_with_runs, BoundModel, ModelBundle, ModelConfig, Trace};
use crate::rng;
use crate::tensor::{BoolMat, Graph, Tensor};
use crate::world::{Episode, QAItem};

const GRAD_CHUNK: usize = 4;

/// Train a semantic-pathway-only stack (text + semantic vision tokens,
/// classification head) on the probe suite. The result is the
/// visual-language prior every variant is initialized from.
pub fn pretrain_vlm(
    cfg: &TrainConfig,
    model_cfg: &ModelConfig,
    qa_train: &[QAItem],
    init_seed: u64,
    resume: Option<(ModelBundle, AdamState, usize, Vec<super::MetricRow>)>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if qa_train.is_empty() {
        return Err(Error::usage("probe training set is empty"));
    }
    let (mut model, mut state, start_step, mut metrics) = match resume {
        Some((m, s, step, rows)) => (m, s, step, rows),
        None => (
            ModelBundle::init(VariantId::TwoExpert, model_cfg.clone(), init_seed)?,
            AdamState::default(),
            0,
            Vec::new(),
        ),
    };
    let opt = AdamW {
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
        ..AdamW::default()
    };
    let freeze = FreezeSpec::none();
    let batch_seed = rng::derive(cfg.seed, "vlm-batch");
    let inv_b = 1.0 / cfg.batch_size as f64;

    drive(
        &mut model,
        &opt,
        &mut state,
        &freeze,
        cfg.clip_norm,
        start_step,
        cfg.steps,
        cfg.log_every,
        &mut metrics,
        |step, model| {
            let mut r = rng::from_seed(rng::child(batch_seed, step as u64));
            let idx: Vec<usize> = (0..cfg.batch_size)
                .map(|_| r.gen_range(0..qa_train.len()))
                .collect();
            let parts: Vec<Result<(f64, GradAcc)>> = idx
                .par_chunks(GRAD_CHUNK)
                .map(|chunk| {
                    let mut loss_sum = 0.0;
                    let mut grads = GradAcc::default();
                    for &i in chunk {
                        let item = &qa_train[i];
                        let mut g = Graph::new(model.config.dtype);
                        let bm = BoundModel::bind(&mut g, model, true)?;
                        let (layout, embedded) = embed_qa(&mut g, &bm, &item.image, &item.question)?;
                        let trace = forward(&mut g, &bm, &layout, embedded)?;
                        let logits = qa_logits(&mut g, &bm, &trace)?;
                        let loss = g.cross_entropy(logits, &[item.answer])?;
                        loss_sum += g.value(loss).scalar();
                        g.backward(loss)?;
                        grads.add(bm.grads(&g));
                    }
                    Ok((loss_sum, grads))
                })
                .collect();
            let mut out = BatchOut {
                grads: Default::default(),
                loss: 0.0,
                l_act: 0.0,
                l_wm: 0.0,
            };
            for p in parts {
                let (loss_sum, grads) = p?;
                out.loss += loss_sum * inv_b;
                merge_grads(&mut out.grads, grads, inv_b);
            }
            out.l_act = out.loss;
            Ok(out)
        },
    )?;

    Ok(TrainOutcome {
        model,
        opt: state,
        metrics,
        final_step: cfg.steps,
        probe_rows: Vec::new(),
    })
}

/// Sample (frame, action, next frame) indices for the generative stage.
fn sample_transition(r: &mut impl Rng, episodes: &[Episode]) -> (usize, usize) {
    let e = r.gen_range(0..episodes.len());
    let t = r.gen_range(0..episodes[e].len());
    (e, t)
}

/// The dorsal stack on one transition: dorsal tokens of frame t plus an
/// action-conditioning token, run through the dorsal expert alone, then the
/// latent prediction head. Returns the predicted-latent loss and the pixel
/// reconstruction anchor.
fn gen_step_losses(
    g: &mut Graph,
    bm: &BoundModel,
    ep: &Episode,
    t: usize,
    target_latent: &Tensor,
) -> Result<(crate::tensor::Var, crate::tensor::Var)> {
    let cfg = &bm.model.config;
    let dtype = g.dtype();
    let img_v = g.constant(&ep.frames[t].to_tensor(dtype))?;
    let (dor_tokens, grid) = encode_dorsal(g, bm, img_v)?;
    let pos = g.slice_rows(bm.enc.pos_dor, 0, grid.len())?;
    let dor_tokens = g.add(dor_tokens, pos)?;
    let action = Tensor::from_f64(vec![1, cfg.action_dims], ep.actions[t].to_vec())
        .expect("finite action")
        .cast(dtype);
    let av = g.constant(&action)?;
    let a_tok = g.matmul(av, bm.enc.genact_w)?;
    let a_tok = g.add_bias(a_tok, bm.enc.genact_b)?;
    let seq = g.concat_rows(&[dor_tokens, a_tok])?;
    let n = grid.len() + 1;
    let runs = [(ExpertId::Dor, 0..n)];
    let mask = Arc::new(BoolMat::new(n, n, true));
    let hidden = forward_with_runs(g, bm, &runs, &mask, seq)?;

    // latent prediction over the dorsal token positions
    let layout = crate::layout::build_layout(
        VariantId::Uam,
        &crate::layout::TokenCounts {
            dor_vision: Some(grid),
            ..Default::default()
        },
    )?;
    let trace = Trace {
        hidden: g.slice_rows(hidden, 0, grid.len())?,
        attn: vec![],
        layout,
    };
    let z_hat = wm_prediction(g, bm, &trace)?;
    let t_latent = g.constant(&target_latent.cast(dtype))?;
    let l_latent = g.mse(z_hat, t_latent)?;

    // pixel anchor: decode predicted latents against the next frame
    let px = pixel_decode(g, bm, z_hat)?;
    let next_v = g.constant(&ep.frames[t + 1].to_tensor(dtype))?;
    let next_patches = g.patches(next_v, cfg.p_dor)?;
    let l_pix = g.mse(px, next_patches)?;
    Ok((l_latent, l_pix))
}

/// Train the dorsal encoder, dorsal expert stack, prediction head and pixel
/// decoder on next-frame latent prediction. The checkpoint is the
/// generative prior.
pub fn pretrain_generative(
    cfg: &TrainConfig,
    model_cfg: &ModelConfig,
    episodes: &[Episode],
    init_seed: u64,
    resume: Option<(ModelBundle, AdamState, usize, Vec<super::MetricRow>)>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if episodes.is_empty() {
        return Err(Error::usage("no episodes for generative pretraining"));
    }
    let (mut model, mut state, start_step, mut metrics) = match resume {
        Some((m, s, step, rows)) => (m, s, step, rows),
        None => (
            ModelBundle::init(VariantId::Uam, model_cfg.clone(), init_seed)?,
            AdamState::default(),
            0,
            Vec::new(),
        ),
    };
    let opt = AdamW {
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
        ..AdamW::default()
    };
    let freeze = FreezeSpec::none();
    let batch_seed = rng::derive(cfg.seed, "gen-batch");
    let inv_b = 1.0 / cfg.batch_size as f64;

    drive(
        &mut model,
        &opt,
        &mut state,
        &freeze,
        cfg.clip_norm,
        start_step,
        cfg.steps,
        cfg.log_every,
        &mut metrics,
        |step, model| {
            let mut r = rng::from_seed(rng::child(batch_seed, step as u64));
            let idx: Vec<(usize, usize)> = (0..cfg.batch_size)
                .map(|_| sample_transition(&mut r, episodes))
                .collect();
            let parts: Vec<Result<(f64, f64, GradAcc)>> = idx
                .par_chunks(GRAD_CHUNK)
                .map(|chunk| {
                    let mut latent_sum = 0.0;
                    let mut pix_sum = 0.0;
                    let mut grads = GradAcc::default();
                    for &(e, t) in chunk {
                        let ep = &episodes[e];
                        let target = dorsal_latent(model, &ep.frames[t + 1])?;
                        let mut g = Graph::new(model.config.dtype);
                        let bm = BoundModel::bind(&mut g, model, true)?;
                        let (l_latent, l_pix) = gen_step_losses(&mut g, &bm, ep, t, &target)?;
                        let total = g.add(l_latent, l_pix)?;
                        latent_sum += g.value(l_latent).scalar();
                        pix_sum += g.value(l_pix).scalar();
                        g.backward(total)?;
                        grads.add(bm.grads(&g));
                    }
                    Ok((latent_sum, pix_sum, grads))
                })
                .collect();
            let mut out = BatchOut {
                grads: Default::default(),
                loss: 0.0,
                l_act: 0.0,
                l_wm: 0.0,
            };
            for p in parts {
                let (latent, pix, grads) = p?;
                out.l_wm += latent * inv_b;
                out.l_act += pix * inv_b;
                merge_grads(&mut out.grads, grads, inv_b);
            }
            out.loss = out.l_wm + out.l_act;
            Ok(out)
        },
    )?;

    Ok(TrainOutcome {
        model,
        opt: state,
        metrics,
        final_step: cfg.steps,
        probe_rows: Vec::new(),
    })
}

/// Held-out next-frame prediction error of a generative prior, with the
/// copy-current-latent baseline on the same transitions.
pub fn gen_holdout_mse(
    model: &ModelBundle,
    episodes: &[Episode],
    max_transitions: usize,
) -> Result<(f64, f64)> {
    let mut pairs = Vec::new();
    'outer: for ep in episodes {
        for t in 0..ep.len() {
            pairs.push((ep, t));
            if pairs.len() >= max_transitions {
                break 'outer;
            }
        }
    }
    if pairs.is_empty() {
        return Err(Error::usage("no held-out transitions"));
    }
    let results: Vec<Result<(f64, f64)>> = pairs
        .par_iter()
        .map(|(ep, t)| {
            let z_now = dorsal_latent(model, &ep.frames[*t])?;
            let z_next = dorsal_latent(model, &ep.frames[*t + 1])?;
            let mut g = Graph::new(model.config.dtype);
            let bm = BoundModel::bind(&mut g, model, false)?;
            let (l_latent, _) = gen_step_losses(&mut g, &bm, ep, *t, &z_next)?;
            let pred = g.value(l_latent).scalar();
            let copy: f64 = {
                let a = z_now.to_f64_vec();
                let b = z_next.to_f64_vec();
                a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
            };
            Ok((pred, copy))
        })
        .collect();
    let mut pred_sum = 0.0;
    let mut copy_sum = 0.0;
    let n = results.len() as f64;
    for r in results {
        let (p, c) = r?;
        pred_sum += p;
        copy_sum += c;
    }
    Ok((pred_sum / n, copy_sum / n))
}
