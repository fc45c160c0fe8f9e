//! Typed token embeddings: semantic patch tokens, dorsal strided latent
//! tokens, instruction tokens, learnable queries, the proprioceptive token,
//! and noised-action tokens. Everything ends at the model width and gets a
//! per-kind learned position embedding.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layout::{Grid, SequenceLayout, TokenCounts};
use crate::model::BoundModel;
use crate::tensor::{Dtype, Graph, Tensor, Var};

/// RGB image with values in [0, 1], row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(h: usize, w: usize) -> Image {
        Image {
            h,
            w,
            data: vec![0.0; h * w * 3],
        }
    }

    pub fn filled(h: usize, w: usize, rgb: [f32; 3]) -> Image {
        let mut img = Image::new(h, w);
        for px in img.data.chunks_mut(3) {
            px.copy_from_slice(&rgb);
        }
        img
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        let i = (y * self.w + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.w + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn to_tensor(&self, dtype: Dtype) -> Tensor {
        let t = Tensor::from_f32(vec![self.h, self.w, 3], self.data.clone())
            .expect("image data is finite");
        t.cast(dtype)
    }

    pub fn from_tensor(t: &Tensor) -> Result<Image> {
        if t.rank() != 3 || t.shape()[2] != 3 {
            return Err(Error::Shape {
                op: "image-from-tensor",
                lhs: t.shape().to_vec(),
                rhs: vec![0, 0, 3],
            });
        }
        Ok(Image {
            h: t.shape()[0],
            w: t.shape()[1],
            data: t.to_f64_vec().iter().map(|v| *v as f32).collect(),
        })
    }

    pub fn bit_eq(&self, other: &Image) -> bool {
        self.h == other.h
            && self.w == other.w
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// Tokenized instruction or question over the fixed synthetic vocabulary.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instruction {
    pub ids: Vec<usize>,
    pub text: String,
}

impl Instruction {
    pub fn new(ids: Vec<usize>, text: impl Into<String>) -> Instruction {
        Instruction {
            ids,
            text: text.into(),
        }
    }

    pub fn validate(&self, vocab: usize, max_len: usize) -> Result<()> {
        if self.ids.len() > max_len {
            return Err(Error::config(format!(
                "instruction of {} tokens exceeds max_text {max_len}",
                self.ids.len()
            )));
        }
        if let Some(&bad) = self.ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::config(format!(
                "instruction token {bad} outside vocabulary of {vocab}"
            )));
        }
        Ok(())
    }
}

/// Patch-projected semantic tokens: non-overlapping p x p patches flattened
/// row-major then linearly projected. Returns the token grid.
pub fn encode_semantic(g: &mut Graph, bm: &BoundModel, img: Var) -> Result<(Var, Grid)> {
    let p = bm.model.config.p_sem;
    let shape = g.shape_of(img).to_vec();
    let patches = g.patches(img, p)?;
    let proj = g.matmul(patches, bm.enc.sem_w)?;
    let tokens = g.add_bias(proj, bm.enc.sem_b)?;
    Ok((tokens, Grid::new(shape[0] / p, shape[1] / p)))
}

/// Dorsal pathway: strided patch projection with parameters independent of
/// the semantic pathway.
pub fn encode_dorsal(g: &mut Graph, bm: &BoundModel, img: Var) -> Result<(Var, Grid)> {
    let p = bm.model.config.p_dor;
    let shape = g.shape_of(img).to_vec();
    let patches = g.patches(img, p)?;
    let proj = g.matmul(patches, bm.enc.dor_w)?;
    let tokens = g.add_bias(proj, bm.enc.dor_b)?;
    Ok((tokens, Grid::new(shape[0] / p, shape[1] / p)))
}

/// Sinusoidal features of the flow time in [0, 1].
pub fn time_features(tau: f64, n: usize) -> Vec<f64> {
    let mut f = Vec::with_capacity(n);
    let mut freq = std::f64::consts::PI;
    while f.len() + 2 <= n {
        f.push((freq * tau).sin());
        f.push((freq * tau).cos());
        freq *= 2.0;
    }
    while f.len() < n {
        f.push(tau);
    }
    f
}

/// Inputs to a policy-sequence embedding.
pub struct PolicyInputs<'a> {
    pub img: &'a Image,
    pub instruction: &'a Instruction,
    /// Effector x, y and gripper state.
    pub proprio: [f64; 3],
    /// Noised action chunk x_tau, [horizon, action_dims].
    pub x_tau: &'a Tensor,
    pub tau: f64,
}

fn pos_slice(g: &mut Graph, table: Var, len: usize) -> Result<Var> {
    g.slice_rows(table, 0, len)
}

/// Embed a full policy sequence in canonical order, returning the layout
/// and the [T, d] embedded tokens. For query variants the dorsal segment
/// comes from the query bank instead of the dorsal encoder.
pub fn embed_policy(
    g: &mut Graph,
    bm: &BoundModel,
    inputs: &PolicyInputs,
    dorsal_noise: Option<&Tensor>,
) -> Result<(SequenceLayout, Var)> {
    let cfg = &bm.model.config;
    let variant = bm.model.variant;
    if variant.is_mlp_coupling() {
        return Err(Error::config(format!(
            "variant {variant} has no action-token sequence; use the sequential head path"
        )));
    }
    inputs.instruction.validate(cfg.vocab, cfg.max_text)?;
    if inputs.x_tau.shape() != [cfg.horizon, cfg.action_dims] {
        return Err(Error::Shape {
            op: "embed-policy",
            lhs: inputs.x_tau.shape().to_vec(),
            rhs: vec![cfg.horizon, cfg.action_dims],
        });
    }
    let dtype = g.dtype();
    let mut parts: Vec<Var> = Vec::new();

    // Text
    let text_emb = g.embed(bm.enc.text_table, &inputs.instruction.ids)?;
    let text_pos = pos_slice(g, bm.enc.pos_text, inputs.instruction.ids.len())?;
    parts.push(g.add(text_emb, text_pos)?);

    // Semantic vision
    let img_t = inputs.img.to_tensor(dtype);
    let img_v = g.constant(&img_t)?;
    let (sem_tokens, sem_grid) = encode_semantic(g, bm, img_v)?;
    let sem_pos = pos_slice(g, bm.enc.pos_sem, sem_grid.len())?;
    parts.push(g.add(sem_tokens, sem_pos)?);

    // Dorsal pathway
    let mut dor_grid = None;
    let mut n_query = 0;
    if variant.dorsal_takes_vision() {
        let img_v2 = g.constant(&img_t)?;
        let (mut dor_tokens, grid) = encode_dorsal(g, bm, img_v2)?;
        if let Some(noise) = dorsal_noise {
            let nv = g.constant(noise)?;
            dor_tokens = g.add(dor_tokens, nv)?;
        }
        let dor_pos = pos_slice(g, bm.enc.pos_dor, grid.len())?;
        parts.push(g.add(dor_tokens, dor_pos)?);
        dor_grid = Some(grid);
    } else if variant.dorsal_takes_query() {
        let bank = bm.enc.query_bank.ok_or_else(|| {
            Error::config(format!("variant {variant} requires a query bank"))
        })?;
        let q_pos = pos_slice(g, bm.enc.pos_query, cfg.n_query)?;
        parts.push(g.add(bank, q_pos)?);
        n_query = cfg.n_query;
    }

    // Proprio
    let proprio_t = Tensor::from_f64(vec![1, cfg.action_dims], inputs.proprio.to_vec())
        .expect("finite proprio")
        .cast(dtype);
    let pv = g.constant(&proprio_t)?;
    let pp = g.matmul(pv, bm.enc.proprio_w)?;
    let pp = g.add_bias(pp, bm.enc.proprio_b)?;
    parts.push(g.add(pp, bm.enc.pos_proprio)?);

    // Action tokens: noised chunk plus flow-time features
    let x_tau_v = g.constant(&inputs.x_tau.cast(dtype))?;
    let a_emb = g.matmul(x_tau_v, bm.enc.action_w)?;
    let a_emb = g.add_bias(a_emb, bm.enc.action_b)?;
    let tf = Tensor::from_f64(
        vec![1, cfg.time_feats],
        time_features(inputs.tau, cfg.time_feats),
    )
    .expect("finite time features")
    .cast(dtype);
    let tf_v = g.constant(&tf)?;
    let t_emb = g.matmul(tf_v, bm.enc.time_w)?;
    let t_emb = g.add_bias(t_emb, bm.enc.time_b)?;
    let t_row = g.reshape(t_emb, vec![cfg.width])?;
    let a_emb = g.add_bias(a_emb, t_row)?;
    let a_emb = g.add(a_emb, bm.enc.pos_action)?;
    parts.push(a_emb);

    let counts = TokenCounts {
        text: inputs.instruction.ids.len(),
        sem_vision: Some(sem_grid),
        dor_vision: dor_grid,
        dor_query: n_query,
        proprio: 1,
        action: cfg.horizon,
    };
    let layout = crate::layout::build_layout(variant, &counts)?;
    let embedded = g.concat_rows(&parts)?;
    debug_assert_eq!(g.shape_of(embedded)[0], layout.total_len);
    Ok((layout, embedded))
}

/// Embed a question-answering sequence: text plus semantic vision only.
/// Every variant accepts this layout, which is what makes the probe
/// comparable across checkpoints.
pub fn embed_qa(
    g: &mut Graph,
    bm: &BoundModel,
    img: &Image,
    question: &Instruction,
) -> Result<(SequenceLayout, Var)> {
    let cfg = &bm.model.config;
    question.validate(cfg.vocab, cfg.max_text)?;
    let text_emb = g.embed(bm.enc.text_table, &question.ids)?;
    let text_pos = pos_slice(g, bm.enc.pos_text, question.ids.len())?;
    let text = g.add(text_emb, text_pos)?;

    let img_v = g.constant(&img.to_tensor(g.dtype()))?;
    let (sem_tokens, sem_grid) = encode_semantic(g, bm, img_v)?;
    let sem_pos = pos_slice(g, bm.enc.pos_sem, sem_grid.len())?;
    let sem = g.add(sem_tokens, sem_pos)?;

    let counts = TokenCounts {
        text: question.ids.len(),
        sem_vision: Some(sem_grid),
        ..TokenCounts::default()
    };
    let layout = crate::layout::build_layout(bm.model.variant, &counts)?;
    let embedded = g.concat_rows(&[text, sem])?;
    Ok((layout, embedded))
}

/// Dorsal latent of an image under the current encoder parameters, computed
/// outside any training graph (the stop-gradient target path).
pub fn dorsal_latent(model: &crate::model::ModelBundle, img: &Image) -> Result<Tensor> {
    let mut g = Graph::new(model.config.dtype);
    let bm = BoundModel::bind(&mut g, model, false)?;
    let img_v = g.constant(&img.to_tensor(model.config.dtype))?;
    let (tokens, _) = encode_dorsal(&mut g, &bm, img_v)?;
    Ok(g.value(tokens))
}
