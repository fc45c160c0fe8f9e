//! Objective heads: the flow-matching action head with Euler sampling (one
//! forward pass per integration step), the sequential regression head used
//! by the baseline couplings, the next-frame latent prediction loss on the
//! dorsal pathway, and their weighted composition.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::encode::{dorsal_latent, embed_policy, embed_qa, Image, Instruction, PolicyInputs};
use crate::error::{Error, Result};
use crate::layout::{TokenKind, VariantId};
use crate::model::{forward, BoundModel, ModelBundle, Trace};
use crate::tensor::{Dtype, Graph, Tensor, Var};

/// A horizon of future actions: per step (dx, dy, gripper), with motion in
/// world cells and the gripper channel in [0, 1] after sampling.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionChunk {
    pub rows: Vec<[f64; 3]>,
}

impl ActionChunk {
    pub fn zeros(horizon: usize) -> ActionChunk {
        ActionChunk {
            rows: vec![[0.0; 3]; horizon],
        }
    }

    pub fn horizon(&self) -> usize {
        self.rows.len()
    }

    pub fn to_tensor(&self, dtype: Dtype) -> Tensor {
        let flat: Vec<f64> = self.rows.iter().flatten().copied().collect();
        Tensor::from_f64(vec![self.rows.len(), 3], flat)
            .expect("finite action chunk")
            .cast(dtype)
    }

    pub fn from_tensor(t: &Tensor) -> Result<ActionChunk> {
        if t.rank() != 2 || t.shape()[1] != 3 {
            return Err(Error::Shape {
                op: "action-chunk",
                lhs: t.shape().to_vec(),
                rhs: vec![0, 3],
            });
        }
        let v = t.to_f64_vec();
        Ok(ActionChunk {
            rows: v.chunks(3).map(|c| [c[0], c[1], c[2]]).collect(),
        })
    }

    pub fn clamp_gripper(&mut self) {
        for r in self.rows.iter_mut() {
            r[2] = r[2].clamp(0.0, 1.0);
        }
    }
}

/// One draw of the conditional flow: noise sample, time, and the point on
/// the straight-line path x_tau = (1 - tau) x0 + tau a.
#[derive(Clone, Debug)]
pub struct FlowSample {
    pub tau: f64,
    pub x0: Tensor,
    pub x_tau: Tensor,
}

impl FlowSample {
    pub fn draw(rng: &mut impl Rng, target: &ActionChunk) -> FlowSample {
        let h = target.horizon();
        let x0: Vec<f64> = (0..h * 3).map(|_| rng.sample(StandardNormal)).collect();
        let tau: f64 = rng.gen_range(0.0..1.0);
        FlowSample::from_parts(
            tau,
            Tensor::from_f64(vec![h, 3], x0).expect("finite noise"),
            target,
        )
    }

    pub fn from_parts(tau: f64, x0: Tensor, target: &ActionChunk) -> FlowSample {
        let a = target.to_tensor(Dtype::F64);
        let x0v = x0.to_f64_vec();
        let av = a.to_f64_vec();
        let x_tau: Vec<f64> = x0v
            .iter()
            .zip(&av)
            .map(|(n, t)| (1.0 - tau) * n + tau * t)
            .collect();
        FlowSample {
            tau,
            x_tau: Tensor::from_f64(x0.shape().to_vec(), x_tau).expect("finite path point"),
            x0,
        }
    }

    /// Velocity regression target a - x0.
    pub fn velocity_target(&self, target: &ActionChunk) -> Tensor {
        let av = target.to_tensor(Dtype::F64).to_f64_vec();
        let x0 = self.x0.to_f64_vec();
        let v: Vec<f64> = av.iter().zip(&x0).map(|(a, n)| a - n).collect();
        Tensor::from_f64(self.x0.shape().to_vec(), v).expect("finite velocity")
    }
}

/// Scalar loss components with their exact composition.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub l_act: f64,
    pub l_wm: f64,
    pub lambda: f64,
    pub l_total: f64,
}

/// l_total = l_act + lambda * l_wm, composed in f64.
pub fn total_loss(l_act: f64, l_wm: f64, lambda: f64) -> Result<LossBundle> {
    if lambda < 0.0 {
        return Err(Error::config(format!("lambda must be >= 0, got {lambda}")));
    }
    Ok(LossBundle {
        l_act,
        l_wm,
        lambda,
        l_total: l_act + lambda * l_wm,
    })
}

/// Graph-side composition. With lambda = 0 the auxiliary term is skipped
/// entirely, so the training computation is identical to the
/// action-loss-only objective.
pub fn compose_total(g: &mut Graph, l_act: Var, l_wm: Option<Var>, lambda: f64) -> Result<Var> {
    if lambda < 0.0 {
        return Err(Error::config(format!("lambda must be >= 0, got {lambda}")));
    }
    match l_wm {
        Some(wm) if lambda > 0.0 => {
            let scaled = g.scale(wm, lambda)?;
            g.add(l_act, scaled)
        }
        _ => Ok(l_act),
    }
}

/// Flow-matching action loss: embed the noised chunk and the flow time into
/// the Action tokens, run the trunk, regress per-token velocities against
/// a - x0. Returns the trace for further heads on the same forward pass.
#[allow(clippy::too_many_arguments)]
pub fn action_loss_flow(
    g: &mut Graph,
    bm: &BoundModel,
    img: &Image,
    instruction: &Instruction,
    proprio: [f64; 3],
    target: &ActionChunk,
    sample: &FlowSample,
    dorsal_noise: Option<&Tensor>,
) -> Result<(Trace, Var)> {
    let cfg = &bm.model.config;
    if target.horizon() != cfg.horizon {
        return Err(Error::config(format!(
            "action chunk horizon {} does not match model horizon {}",
            target.horizon(),
            cfg.horizon
        )));
    }
    let (layout, embedded) = embed_policy(
        g,
        bm,
        &PolicyInputs {
            img,
            instruction,
            proprio,
            x_tau: &sample.x_tau,
            tau: sample.tau,
        },
        dorsal_noise,
    )?;
    let trace = forward(g, bm, &layout, embedded)?;
    let loss = velocity_loss_from_trace(g, bm, &trace, target, sample)?;
    Ok((trace, loss))
}

/// Velocity head and MSE given an existing trace.
pub fn velocity_loss_from_trace(
    g: &mut Graph,
    bm: &BoundModel,
    trace: &Trace,
    target: &ActionChunk,
    sample: &FlowSample,
) -> Result<Var> {
    let range = trace
        .layout
        .range_of(TokenKind::Action)
        .ok_or_else(|| Error::config("trace has no Action segment"))?;
    let hidden = g.slice_rows(trace.hidden, range.start, range.end - range.start)?;
    let v_hat = g.matmul(hidden, bm.heads.vel_w)?;
    let v_hat = g.add_bias(v_hat, bm.heads.vel_b)?;
    let v_target = g.constant(&sample.velocity_target(target).cast(g.dtype()))?;
    g.mse(v_hat, v_target)
}

/// Sampled chunk plus the exact number of trunk forward passes performed.
#[derive(Clone, Debug)]
pub struct SampledChunk {
    pub chunk: ActionChunk,
    pub forward_passes: usize,
}

/// Euler integration of the learned velocity field from gaussian noise over
/// `n_steps` equal sub-intervals; one forward pass per step. n_steps = 1 is
/// the single-step mode a = x0 + v(x0, 0).
pub fn sample_actions(
    model: &ModelBundle,
    img: &Image,
    instruction: &Instruction,
    proprio: [f64; 3],
    n_steps: usize,
    rng: &mut impl Rng,
) -> Result<SampledChunk> {
    if n_steps == 0 {
        return Err(Error::usage("sample_actions requires n_steps >= 1"));
    }
    let cfg = &model.config;
    let h = cfg.horizon;
    let mut x: Vec<f64> = (0..h * cfg.action_dims)
        .map(|_| rng.sample(StandardNormal))
        .collect();
    let mut forward_passes = 0;
    for step in 0..n_steps {
        let tau = step as f64 / n_steps as f64;
        let x_tau = Tensor::from_f64(vec![h, cfg.action_dims], x.clone())
            .map_err(|_| Error::Run {
                step,
                msg: "non-finite sampler state".into(),
            })?;
        let mut g = Graph::new(cfg.dtype);
        let bm = BoundModel::bind(&mut g, model, false)?;
        let (layout, embedded) = embed_policy(
            &mut g,
            &bm,
            &PolicyInputs {
                img,
                instruction,
                proprio,
                x_tau: &x_tau,
                tau,
            },
            None,
        )?;
        let trace = forward(&mut g, &bm, &layout, embedded)?;
        forward_passes += 1;
        let range = trace.layout.range_of(TokenKind::Action).expect("action segment");
        let hidden = g.slice_rows(trace.hidden, range.start, range.end - range.start)?;
        let v_hat = g.matmul(hidden, bm.heads.vel_w)?;
        let v_hat = g.add_bias(v_hat, bm.heads.vel_b)?;
        let v = g.value(v_hat).to_f64_vec();
        let dt = 1.0 / n_steps as f64;
        for (xi, vi) in x.iter_mut().zip(&v) {
            *xi += vi * dt;
        }
    }
    let mut chunk = ActionChunk {
        rows: x.chunks(3).map(|c| [c[0], c[1], c[2]]).collect(),
    };
    chunk.clamp_gripper();
    Ok(SampledChunk {
        chunk,
        forward_passes,
    })
}

/// Sequential-head action loss: mean-pool the final Text and SemVision
/// hiddens, two-layer feed-forward regression to the flattened chunk.
pub fn action_loss_mlp(
    g: &mut Graph,
    bm: &BoundModel,
    img: &Image,
    instruction: &Instruction,
    target: &ActionChunk,
) -> Result<(Trace, Var)> {
    let variant = bm.model.variant;
    if !variant.is_mlp_coupling() {
        return Err(Error::config(format!(
            "sequential action head called on mixture variant {variant}"
        )));
    }
    let cfg = &bm.model.config;
    if target.horizon() != cfg.horizon {
        return Err(Error::config(format!(
            "action chunk horizon {} does not match model horizon {}",
            target.horizon(),
            cfg.horizon
        )));
    }
    let (layout, embedded) = embed_qa(g, bm, img, instruction)?;
    let trace = forward(g, bm, &layout, embedded)?;
    let loss = mlp_loss_from_trace(g, bm, &trace, target)?;
    Ok((trace, loss))
}

fn mlp_loss_from_trace(
    g: &mut Graph,
    bm: &BoundModel,
    trace: &Trace,
    target: &ActionChunk,
) -> Result<Var> {
    let cfg = &bm.model.config;
    let pooled = g.mean_rows(trace.hidden)?;
    let pooled = g.reshape(pooled, vec![1, cfg.width])?;
    let h1 = g.matmul(pooled, bm.heads.mlp_w1)?;
    let h1 = g.add_bias(h1, bm.heads.mlp_b1)?;
    let a = g.gelu(h1)?;
    let out = g.matmul(a, bm.heads.mlp_w2)?;
    let out = g.add_bias(out, bm.heads.mlp_b2)?;
    let flat = target
        .to_tensor(g.dtype())
        .reshaped(vec![1, cfg.horizon * cfg.action_dims])?;
    let t = g.constant(&flat)?;
    g.mse(out, t)
}

/// Predict the chunk with the sequential head (deterministic, no sampling).
pub fn predict_mlp(
    model: &ModelBundle,
    img: &Image,
    instruction: &Instruction,
) -> Result<SampledChunk> {
    let cfg = &model.config;
    let mut g = Graph::new(cfg.dtype);
    let bm = BoundModel::bind(&mut g, model, false)?;
    let (layout, embedded) = embed_qa(&mut g, &bm, img, instruction)?;
    let trace = forward(&mut g, &bm, &layout, embedded)?;
    let pooled = g.mean_rows(trace.hidden)?;
    let pooled = g.reshape(pooled, vec![1, cfg.width])?;
    let h1 = g.matmul(pooled, bm.heads.mlp_w1)?;
    let h1 = g.add_bias(h1, bm.heads.mlp_b1)?;
    let a = g.gelu(h1)?;
    let out = g.matmul(a, bm.heads.mlp_w2)?;
    let out = g.add_bias(out, bm.heads.mlp_b2)?;
    let v = g.value(out).to_f64_vec();
    let mut chunk = ActionChunk {
        rows: v.chunks(3).map(|c| [c[0], c[1], c[2]]).collect(),
    };
    chunk.clamp_gripper();
    Ok(SampledChunk {
        chunk,
        forward_passes: 1,
    })
}

/// Next-frame latent prediction on the dorsal pathway: a linear head maps
/// each DorVision hidden to the stop-gradient dorsal encoding of the next
/// frame.
pub fn wm_loss(g: &mut Graph, bm: &BoundModel, trace: &Trace, next_img: &Image) -> Result<Var> {
    if bm.model.variant != VariantId::Uam {
        return Err(Error::config(format!(
            "visual-dynamics loss called on variant {}",
            bm.model.variant
        )));
    }
    // Target computed outside this graph: the gradient path through the
    // target encoder is structurally absent.
    let target = dorsal_latent(bm.model, next_img)?;
    wm_loss_with_target(g, bm, trace, &target)
}

/// Same loss with an explicit (already stop-gradient) target latent.
pub fn wm_loss_with_target(
    g: &mut Graph,
    bm: &BoundModel,
    trace: &Trace,
    target: &Tensor,
) -> Result<Var> {
    let z_hat = wm_prediction(g, bm, trace)?;
    let t = g.constant(&target.cast(g.dtype()))?;
    g.mse(z_hat, t)
}

/// Predicted next-frame latents from the DorVision hiddens.
pub fn wm_prediction(g: &mut Graph, bm: &BoundModel, trace: &Trace) -> Result<Var> {
    let range = trace
        .layout
        .range_of(TokenKind::DorVision)
        .ok_or_else(|| Error::config("trace has no DorVision segment"))?;
    let hidden = g.slice_rows(trace.hidden, range.start, range.end - range.start)?;
    let z = g.matmul(hidden, bm.heads.wm_w)?;
    g.add_bias(z, bm.heads.wm_b)
}

/// Decode latent tokens to patch pixels (the inspection decoder; also the
/// reconstruction anchor of the generative pretraining stage).
pub fn pixel_decode(g: &mut Graph, bm: &BoundModel, z: Var) -> Result<Var> {
    let p = g.matmul(z, bm.heads.pix_w)?;
    g.add_bias(p, bm.heads.pix_b)
}

/// Render predicted latents to an image for eyeballing. Values are clamped
/// to [0, 1].
pub fn render_latent(model: &ModelBundle, z: &Tensor) -> Result<Image> {
    let cfg = &model.config;
    let mut g = Graph::new(cfg.dtype);
    let bm = BoundModel::bind(&mut g, model, false)?;
    let zv = g.constant(&z.cast(cfg.dtype))?;
    let px = pixel_decode(&mut g, &bm, zv)?;
    let vals = g.value(px).to_f64_vec();
    let p = cfg.p_dor;
    let grid = cfg.dor_grid();
    let mut img = Image::new(cfg.img_h, cfg.img_w);
    for gy in 0..grid.rows {
        for gx in 0..grid.cols {
            let row = &vals[(gy * grid.cols + gx) * p * p * 3..];
            for dy in 0..p {
                for dx in 0..p {
                    let o = (dy * p + dx) * 3;
                    img.set(
                        gy * p + dy,
                        gx * p + dx,
                        [
                            row[o].clamp(0.0, 1.0) as f32,
                            row[o + 1].clamp(0.0, 1.0) as f32,
                            row[o + 2].clamp(0.0, 1.0) as f32,
                        ],
                    );
                }
            }
        }
    }
    Ok(img)
}

/// Answer logits for the question-answering probe: mean-pooled final
/// hiddens through the classification head.
pub fn qa_logits(g: &mut Graph, bm: &BoundModel, trace: &Trace) -> Result<Var> {
    let pooled = g.mean_rows(trace.hidden)?;
    let pooled = g.reshape(pooled, vec![1, bm.model.config.width])?;
    let logits = g.matmul(pooled, bm.heads.qa_w)?;
    g.add_bias(logits, bm.heads.qa_b)
}
