//! The mixture-of-transformers stack: one shared joint self-attention over
//! the full token sequence per layer, with per-token expert-specific
//! projections and feed-forward blocks. Experts are selected by token kind;
//! the canonical segment order keeps expert runs contiguous so routing is a
//! handful of row slices.

use std::ops::Range;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layout::{ExpertId, Grid, SequenceLayout, VariantId};
use crate::rng;
use crate::tensor::{BoolMat, Dtype, Graph, Tensor, Var};

/// Model dimensions and desk-scale knobs.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct ModelConfig {
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    pub ff_mult: usize,
    pub img_h: usize,
    pub img_w: usize,
    pub p_sem: usize,
    pub p_dor: usize,
    pub vocab: usize,
    pub max_text: usize,
    pub n_query: usize,
    pub horizon: usize,
    pub action_dims: usize,
    pub n_classes: usize,
    pub time_feats: usize,
    /// Std of gaussian noise added to dorsal tokens during training; 0
    /// feeds clean latents.
    pub dorsal_noise: f64,
    pub dtype: Dtype,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            layers: 4,
            width: 64,
            heads: 4,
            ff_mult: 4,
            img_h: 24,
            img_w: 24,
            p_sem: 4,
            p_dor: 8,
            vocab: 64,
            max_text: 8,
            n_query: 9,
            horizon: 8,
            action_dims: 3,
            n_classes: 16,
            time_feats: 8,
            dorsal_noise: 0.0,
            dtype: Dtype::F32,
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    pub fn ff_hidden(&self) -> usize {
        self.ff_mult * self.width
    }

    pub fn sem_grid(&self) -> Grid {
        Grid::new(self.img_h / self.p_sem, self.img_w / self.p_sem)
    }

    pub fn dor_grid(&self) -> Grid {
        Grid::new(self.img_h / self.p_dor, self.img_w / self.p_dor)
    }

    pub fn n_sem(&self) -> usize {
        self.sem_grid().len()
    }

    pub fn n_dor(&self) -> usize {
        self.dor_grid().len()
    }

    /// 1-indexed mid layer used by the attention extraction.
    pub fn mid_layer(&self) -> usize {
        self.layers.div_ceil(2)
    }

    pub fn validate(&self) -> Result<()> {
        if self.width % self.heads != 0 {
            return Err(Error::config(format!(
                "heads {} must divide width {}",
                self.heads, self.width
            )));
        }
        if self.img_h % self.p_sem != 0 || self.img_w % self.p_sem != 0 {
            return Err(Error::config(format!(
                "semantic patch {} does not divide image {}x{}",
                self.p_sem, self.img_h, self.img_w
            )));
        }
        if self.img_h % self.p_dor != 0 || self.img_w % self.p_dor != 0 {
            return Err(Error::config(format!(
                "dorsal stride {} does not divide image {}x{}",
                self.p_dor, self.img_h, self.img_w
            )));
        }
        Ok(())
    }
}

/// One layer's projections and feed-forward for a single expert.
#[derive(Clone, Debug)]
pub struct LayerParams {
    pub attn_norm: Tensor,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub ff_norm: Tensor,
    pub w1: Tensor,
    pub w2: Tensor,
}

/// Full per-expert parameter set. Every expert of the same width has an
/// identical parameter count.
#[derive(Clone, Debug)]
pub struct ExpertParams {
    pub layers: Vec<LayerParams>,
    pub final_norm: Tensor,
}

/// Token-type embeddings and input projections.
#[derive(Clone, Debug)]
pub struct EncoderParams {
    pub text_table: Tensor,
    pub sem_w: Tensor,
    pub sem_b: Tensor,
    pub dor_w: Tensor,
    pub dor_b: Tensor,
    pub proprio_w: Tensor,
    pub proprio_b: Tensor,
    pub action_w: Tensor,
    pub action_b: Tensor,
    pub time_w: Tensor,
    pub time_b: Tensor,
    /// Action-conditioning token projection for the generative pretraining
    /// stage.
    pub genact_w: Tensor,
    pub genact_b: Tensor,
    pub pos_text: Tensor,
    pub pos_sem: Tensor,
    pub pos_dor: Tensor,
    pub pos_query: Tensor,
    pub pos_proprio: Tensor,
    pub pos_action: Tensor,
    pub query_bank: Option<Tensor>,
}

/// Output heads. Regression heads are zero-initialized.
#[derive(Clone, Debug)]
pub struct HeadParams {
    pub qa_w: Tensor,
    pub qa_b: Tensor,
    pub vel_w: Tensor,
    pub vel_b: Tensor,
    pub wm_w: Tensor,
    pub wm_b: Tensor,
    pub pix_w: Tensor,
    pub pix_b: Tensor,
    pub mlp_w1: Tensor,
    pub mlp_b1: Tensor,
    pub mlp_w2: Tensor,
    pub mlp_b2: Tensor,
}

/// The three expert parameter sets plus encoders and heads.
#[derive(Clone, Debug)]
pub struct ModelBundle {
    pub variant: VariantId,
    pub config: ModelConfig,
    pub sem: ExpertParams,
    pub dor: Option<ExpertParams>,
    pub act: ExpertParams,
    pub enc: EncoderParams,
    pub heads: HeadParams,
}

const INIT_STD: f64 = 0.02;

fn init_weight(name: &str, shape: Vec<usize>, cfg: &ModelConfig, seed: u64) -> Tensor {
    let mut r = rng::stream(seed, &format!("init/{name}"));
    Tensor::randn(shape, cfg.dtype, INIT_STD, &mut r).with_grad()
}

fn init_zeros(shape: Vec<usize>, cfg: &ModelConfig) -> Tensor {
    Tensor::zeros(shape, cfg.dtype).with_grad()
}

fn init_ones(shape: Vec<usize>, cfg: &ModelConfig) -> Tensor {
    Tensor::full(shape, cfg.dtype, 1.0).with_grad()
}

fn init_expert(name: &str, cfg: &ModelConfig, seed: u64) -> ExpertParams {
    let d = cfg.width;
    let f = cfg.ff_hidden();
    let layers = (0..cfg.layers)
        .map(|i| LayerParams {
            attn_norm: init_ones(vec![d], cfg),
            wq: init_weight(&format!("{name}.layer{i}.wq"), vec![d, d], cfg, seed),
            wk: init_weight(&format!("{name}.layer{i}.wk"), vec![d, d], cfg, seed),
            wv: init_weight(&format!("{name}.layer{i}.wv"), vec![d, d], cfg, seed),
            wo: init_weight(&format!("{name}.layer{i}.wo"), vec![d, d], cfg, seed),
            ff_norm: init_ones(vec![d], cfg),
            w1: init_weight(&format!("{name}.layer{i}.w1"), vec![d, f], cfg, seed),
            w2: init_weight(&format!("{name}.layer{i}.w2"), vec![f, d], cfg, seed),
        })
        .collect();
    ExpertParams {
        layers,
        final_norm: init_ones(vec![d], cfg),
    }
}

impl ModelBundle {
    /// Fresh bundle with per-name seeded init: a parameter's initial value
    /// depends only on (seed, name), so shared names are identical across
    /// variants.
    pub fn init(variant: VariantId, config: ModelConfig, seed: u64) -> Result<ModelBundle> {
        config.validate()?;
        let cfg = &config;
        let d = cfg.width;
        let sem_in = cfg.p_sem * cfg.p_sem * 3;
        let dor_in = cfg.p_dor * cfg.p_dor * 3;
        let enc = EncoderParams {
            text_table: init_weight("enc.text", vec![cfg.vocab, d], cfg, seed),
            sem_w: init_weight("enc.sem.w", vec![sem_in, d], cfg, seed),
            sem_b: init_zeros(vec![d], cfg),
            dor_w: init_weight("enc.dor.w", vec![dor_in, d], cfg, seed),
            dor_b: init_zeros(vec![d], cfg),
            proprio_w: init_weight("enc.proprio.w", vec![cfg.action_dims, d], cfg, seed),
            proprio_b: init_zeros(vec![d], cfg),
            action_w: init_weight("enc.action.w", vec![cfg.action_dims, d], cfg, seed),
            action_b: init_zeros(vec![d], cfg),
            time_w: init_weight("enc.time.w", vec![cfg.time_feats, d], cfg, seed),
            time_b: init_zeros(vec![d], cfg),
            genact_w: init_weight("enc.genact.w", vec![cfg.action_dims, d], cfg, seed),
            genact_b: init_zeros(vec![d], cfg),
            pos_text: init_weight("pos.text", vec![cfg.max_text, d], cfg, seed),
            pos_sem: init_weight("pos.sem_vision", vec![cfg.n_sem(), d], cfg, seed),
            pos_dor: init_weight("pos.dor_vision", vec![cfg.n_dor(), d], cfg, seed),
            pos_query: init_weight("pos.dor_query", vec![cfg.n_query, d], cfg, seed),
            pos_proprio: init_weight("pos.proprio", vec![1, d], cfg, seed),
            pos_action: init_weight("pos.action", vec![cfg.horizon, d], cfg, seed),
            query_bank: if variant.dorsal_takes_query() {
                Some(init_weight("enc.query_bank", vec![cfg.n_query, d], cfg, seed))
            } else {
                None
            },
        };
        let heads = HeadParams {
            qa_w: init_zeros(vec![d, cfg.n_classes], cfg),
            qa_b: init_zeros(vec![cfg.n_classes], cfg),
            vel_w: init_zeros(vec![d, cfg.action_dims], cfg),
            vel_b: init_zeros(vec![cfg.action_dims], cfg),
            wm_w: init_zeros(vec![d, d], cfg),
            wm_b: init_zeros(vec![d], cfg),
            pix_w: init_zeros(vec![d, dor_in], cfg),
            pix_b: init_zeros(vec![dor_in], cfg),
            mlp_w1: init_weight("head.mlp.w1", vec![d, d], cfg, seed),
            mlp_b1: init_zeros(vec![d], cfg),
            mlp_w2: init_zeros(vec![d, cfg.horizon * cfg.action_dims], cfg),
            mlp_b2: init_zeros(vec![cfg.horizon * cfg.action_dims], cfg),
        };
        let sem = init_expert("expert.sem", cfg, seed);
        let dor = variant
            .has_dorsal()
            .then(|| init_expert("expert.dor", cfg, seed));
        let act = init_expert("expert.act", cfg, seed);
        Ok(ModelBundle {
            variant,
            config,
            sem,
            dor,
            act,
            enc,
            heads,
        })
    }

    pub fn expert(&self, e: ExpertId) -> Result<&ExpertParams> {
        match e {
            ExpertId::Sem => Ok(&self.sem),
            ExpertId::Act => Ok(&self.act),
            ExpertId::Dor => self.dor.as_ref().ok_or_else(|| {
                Error::config(format!(
                    "variant {} has no dorsal expert parameters",
                    self.variant
                ))
            }),
        }
    }

    /// Visit every parameter with its stable name.
    pub fn for_each_param(&self, f: impl FnMut(&str, &Tensor)) {
        self.walk(f);
    }

    /// Replace parameters by name; `f` returns Some for those to swap.
    pub fn map_params(&mut self, mut f: impl FnMut(&str, &Tensor) -> Option<Tensor>) {
        let mut updates: Vec<(String, Tensor)> = Vec::new();
        self.walk(|name, t| {
            if let Some(new) = f(name, t) {
                updates.push((name.to_string(), new));
            }
        });
        for (name, t) in updates {
            self.set_param(&name, t).expect("walker produced the name");
        }
    }

    fn walk(&self, mut f: impl FnMut(&str, &Tensor)) {
        let mut visit = |name: String, t: &Tensor| {
            f(&name, t);
        };
        for (ename, expert) in self.experts_iter() {
            for (i, l) in expert.layers.iter().enumerate() {
                visit(format!("expert.{ename}.layer{i}.attn_norm"), &l.attn_norm);
                visit(format!("expert.{ename}.layer{i}.wq"), &l.wq);
                visit(format!("expert.{ename}.layer{i}.wk"), &l.wk);
                visit(format!("expert.{ename}.layer{i}.wv"), &l.wv);
                visit(format!("expert.{ename}.layer{i}.wo"), &l.wo);
                visit(format!("expert.{ename}.layer{i}.ff_norm"), &l.ff_norm);
                visit(format!("expert.{ename}.layer{i}.w1"), &l.w1);
                visit(format!("expert.{ename}.layer{i}.w2"), &l.w2);
            }
            visit(format!("expert.{ename}.final_norm"), &expert.final_norm);
        }
        let e = &self.enc;
        visit("enc.text".into(), &e.text_table);
        visit("enc.sem.w".into(), &e.sem_w);
        visit("enc.sem.b".into(), &e.sem_b);
        visit("enc.dor.w".into(), &e.dor_w);
        visit("enc.dor.b".into(), &e.dor_b);
        visit("enc.proprio.w".into(), &e.proprio_w);
        visit("enc.proprio.b".into(), &e.proprio_b);
        visit("enc.action.w".into(), &e.action_w);
        visit("enc.action.b".into(), &e.action_b);
        visit("enc.time.w".into(), &e.time_w);
        visit("enc.time.b".into(), &e.time_b);
        visit("enc.genact.w".into(), &e.genact_w);
        visit("enc.genact.b".into(), &e.genact_b);
        visit("pos.text".into(), &e.pos_text);
        visit("pos.sem_vision".into(), &e.pos_sem);
        visit("pos.dor_vision".into(), &e.pos_dor);
        visit("pos.dor_query".into(), &e.pos_query);
        visit("pos.proprio".into(), &e.pos_proprio);
        visit("pos.action".into(), &e.pos_action);
        if let Some(q) = &e.query_bank {
            visit("enc.query_bank".into(), q);
        }
        let h = &self.heads;
        visit("head.qa.w".into(), &h.qa_w);
        visit("head.qa.b".into(), &h.qa_b);
        visit("head.vel.w".into(), &h.vel_w);
        visit("head.vel.b".into(), &h.vel_b);
        visit("head.wm.w".into(), &h.wm_w);
        visit("head.wm.b".into(), &h.wm_b);
        visit("head.pix.w".into(), &h.pix_w);
        visit("head.pix.b".into(), &h.pix_b);
        visit("head.mlp.w1".into(), &h.mlp_w1);
        visit("head.mlp.b1".into(), &h.mlp_b1);
        visit("head.mlp.w2".into(), &h.mlp_w2);
        visit("head.mlp.b2".into(), &h.mlp_b2);
    }

    fn experts_iter(&self) -> Vec<(&'static str, &ExpertParams)> {
        let mut v = vec![("sem", &self.sem)];
        if let Some(dor) = &self.dor {
            v.push(("dor", dor));
        }
        v.push(("act", &self.act));
        v
    }

    /// Replace a parameter by name. The replacement must match shape and
    /// dtype.
    pub fn set_param(&mut self, name: &str, t: Tensor) -> Result<()> {
        let slot = self.param_slot(name)?;
        if slot.shape() != t.shape() || slot.dtype() != t.dtype() {
            return Err(Error::Shape {
                op: "set-param",
                lhs: slot.shape().to_vec(),
                rhs: t.shape().to_vec(),
            });
        }
        *slot = t.with_grad();
        Ok(())
    }

    pub fn get_param(&self, name: &str) -> Option<Tensor> {
        let mut found = None;
        self.for_each_param(|n, t| {
            if n == name {
                found = Some(t.clone());
            }
        });
        found
    }

    fn param_slot(&mut self, name: &str) -> Result<&mut Tensor> {
        let err = || Error::config(format!("unknown parameter '{name}'"));
        let parts: Vec<&str> = name.split('.').collect();
        match parts.as_slice() {
            ["expert", ename, rest @ ..] => {
                let expert = match *ename {
                    "sem" => &mut self.sem,
                    "act" => &mut self.act,
                    "dor" => self.dor.as_mut().ok_or_else(err)?,
                    _ => return Err(err()),
                };
                match rest {
                    ["final_norm"] => Ok(&mut expert.final_norm),
                    [layer, field] if layer.starts_with("layer") => {
                        let i: usize = layer[5..].parse().map_err(|_| err())?;
                        let l = expert.layers.get_mut(i).ok_or_else(err)?;
                        Ok(match *field {
                            "attn_norm" => &mut l.attn_norm,
                            "wq" => &mut l.wq,
                            "wk" => &mut l.wk,
                            "wv" => &mut l.wv,
                            "wo" => &mut l.wo,
                            "ff_norm" => &mut l.ff_norm,
                            "w1" => &mut l.w1,
                            "w2" => &mut l.w2,
                            _ => return Err(err()),
                        })
                    }
                    _ => Err(err()),
                }
            }
            ["enc", "text"] => Ok(&mut self.enc.text_table),
            ["enc", "sem", "w"] => Ok(&mut self.enc.sem_w),
            ["enc", "sem", "b"] => Ok(&mut self.enc.sem_b),
            ["enc", "dor", "w"] => Ok(&mut self.enc.dor_w),
            ["enc", "dor", "b"] => Ok(&mut self.enc.dor_b),
            ["enc", "proprio", "w"] => Ok(&mut self.enc.proprio_w),
            ["enc", "proprio", "b"] => Ok(&mut self.enc.proprio_b),
            ["enc", "action", "w"] => Ok(&mut self.enc.action_w),
            ["enc", "action", "b"] => Ok(&mut self.enc.action_b),
            ["enc", "time", "w"] => Ok(&mut self.enc.time_w),
            ["enc", "time", "b"] => Ok(&mut self.enc.time_b),
            ["enc", "genact", "w"] => Ok(&mut self.enc.genact_w),
            ["enc", "genact", "b"] => Ok(&mut self.enc.genact_b),
            ["pos", "text"] => Ok(&mut self.enc.pos_text),
            ["pos", "sem_vision"] => Ok(&mut self.enc.pos_sem),
            ["pos", "dor_vision"] => Ok(&mut self.enc.pos_dor),
            ["pos", "dor_query"] => Ok(&mut self.enc.pos_query),
            ["pos", "proprio"] => Ok(&mut self.enc.pos_proprio),
            ["pos", "action"] => Ok(&mut self.enc.pos_action),
            ["enc", "query_bank"] => self.enc.query_bank.as_mut().ok_or_else(err),
            ["head", "qa", "w"] => Ok(&mut self.heads.qa_w),
            ["head", "qa", "b"] => Ok(&mut self.heads.qa_b),
            ["head", "vel", "w"] => Ok(&mut self.heads.vel_w),
            ["head", "vel", "b"] => Ok(&mut self.heads.vel_b),
            ["head", "wm", "w"] => Ok(&mut self.heads.wm_w),
            ["head", "wm", "b"] => Ok(&mut self.heads.wm_b),
            ["head", "pix", "w"] => Ok(&mut self.heads.pix_w),
            ["head", "pix", "b"] => Ok(&mut self.heads.pix_b),
            ["head", "mlp", "w1"] => Ok(&mut self.heads.mlp_w1),
            ["head", "mlp", "b1"] => Ok(&mut self.heads.mlp_b1),
            ["head", "mlp", "w2"] => Ok(&mut self.heads.mlp_w2),
            ["head", "mlp", "b2"] => Ok(&mut self.heads.mlp_b2),
            _ => Err(err()),
        }
    }

    /// Total parameter count of one expert stack.
    pub fn expert_param_count(&self) -> usize {
        let mut n = 0;
        for l in &self.sem.layers {
            n += l.attn_norm.len()
                + l.wq.len()
                + l.wk.len()
                + l.wv.len()
                + l.wo.len()
                + l.ff_norm.len()
                + l.w1.len()
                + l.w2.len();
        }
        n + self.sem.final_norm.len()
    }

    /// Digest over every parameter's bytes, in name order.
    pub fn param_digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        self.for_each_param(|name, t| {
            hasher.update(name.as_bytes());
            hasher.update(crate::tensor::serial::to_bytes(t));
        });
        hex_str(&hasher.finalize())
    }
}

pub fn hex_str(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

// ── graph binding ──────────────────────────────────────────────────────

pub struct BoundLayer {
    pub attn_norm: Var,
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub ff_norm: Var,
    pub w1: Var,
    pub w2: Var,
}

pub struct BoundExpert {
    pub layers: Vec<BoundLayer>,
    pub final_norm: Var,
}

pub struct BoundEncoders {
    pub text_table: Var,
    pub sem_w: Var,
    pub sem_b: Var,
    pub dor_w: Var,
    pub dor_b: Var,
    pub proprio_w: Var,
    pub proprio_b: Var,
    pub action_w: Var,
    pub action_b: Var,
    pub time_w: Var,
    pub time_b: Var,
    pub genact_w: Var,
    pub genact_b: Var,
    pub pos_text: Var,
    pub pos_sem: Var,
    pub pos_dor: Var,
    pub pos_query: Var,
    pub pos_proprio: Var,
    pub pos_action: Var,
    pub query_bank: Option<Var>,
}

pub struct BoundHeads {
    pub qa_w: Var,
    pub qa_b: Var,
    pub vel_w: Var,
    pub vel_b: Var,
    pub wm_w: Var,
    pub wm_b: Var,
    pub pix_w: Var,
    pub pix_b: Var,
    pub mlp_w1: Var,
    pub mlp_b1: Var,
    pub mlp_w2: Var,
    pub mlp_b2: Var,
}

/// A model bundle bound into one graph as leaves.
pub struct BoundModel<'m> {
    pub model: &'m ModelBundle,
    pub sem: BoundExpert,
    pub dor: Option<BoundExpert>,
    pub act: BoundExpert,
    pub enc: BoundEncoders,
    pub heads: BoundHeads,
}

fn bind_expert(
    g: &mut Graph,
    name: &str,
    e: &ExpertParams,
    track: &dyn Fn(&str) -> bool,
) -> Result<BoundExpert> {
    let mut layers = Vec::with_capacity(e.layers.len());
    for (i, l) in e.layers.iter().enumerate() {
        let t = track(&format!("expert.{name}.layer{i}.wq"));
        layers.push(BoundLayer {
            attn_norm: g.leaf_with(&l.attn_norm, t)?,
            wq: g.leaf_with(&l.wq, t)?,
            wk: g.leaf_with(&l.wk, t)?,
            wv: g.leaf_with(&l.wv, t)?,
            wo: g.leaf_with(&l.wo, t)?,
            ff_norm: g.leaf_with(&l.ff_norm, t)?,
            w1: g.leaf_with(&l.w1, t)?,
            w2: g.leaf_with(&l.w2, t)?,
        });
    }
    Ok(BoundExpert {
        layers,
        final_norm: g.leaf_with(&e.final_norm, track(&format!("expert.{name}.final_norm")))?,
    })
}

impl<'m> BoundModel<'m> {
    /// Bind every parameter as a leaf. `trainable` controls gradient
    /// tracking for the whole bundle.
    pub fn bind(g: &mut Graph, model: &'m ModelBundle, trainable: bool) -> Result<BoundModel<'m>> {
        BoundModel::bind_filtered(g, model, &|_| trainable)
    }

    /// Bind with per-parameter gradient tracking; parameters whose names
    /// fail `track` never accumulate gradients, which spares the backward
    /// pass their work (their forward contribution is unchanged).
    pub fn bind_filtered(
        g: &mut Graph,
        model: &'m ModelBundle,
        track: &dyn Fn(&str) -> bool,
    ) -> Result<BoundModel<'m>> {
        let sem = bind_expert(g, "sem", &model.sem, track)?;
        let dor = match &model.dor {
            Some(d) => Some(bind_expert(g, "dor", d, track)?),
            None => None,
        };
        let act = bind_expert(g, "act", &model.act, track)?;
        let e = &model.enc;
        let enc = BoundEncoders {
            text_table: g.leaf_with(&e.text_table, track("enc.text"))?,
            sem_w: g.leaf_with(&e.sem_w, track("enc.sem.w"))?,
            sem_b: g.leaf_with(&e.sem_b, track("enc.sem.b"))?,
            dor_w: g.leaf_with(&e.dor_w, track("enc.dor.w"))?,
            dor_b: g.leaf_with(&e.dor_b, track("enc.dor.b"))?,
            proprio_w: g.leaf_with(&e.proprio_w, track("enc.proprio.w"))?,
            proprio_b: g.leaf_with(&e.proprio_b, track("enc.proprio.b"))?,
            action_w: g.leaf_with(&e.action_w, track("enc.action.w"))?,
            action_b: g.leaf_with(&e.action_b, track("enc.action.b"))?,
            time_w: g.leaf_with(&e.time_w, track("enc.time.w"))?,
            time_b: g.leaf_with(&e.time_b, track("enc.time.b"))?,
            genact_w: g.leaf_with(&e.genact_w, track("enc.genact.w"))?,
            genact_b: g.leaf_with(&e.genact_b, track("enc.genact.b"))?,
            pos_text: g.leaf_with(&e.pos_text, track("pos.text"))?,
            pos_sem: g.leaf_with(&e.pos_sem, track("pos.sem_vision"))?,
            pos_dor: g.leaf_with(&e.pos_dor, track("pos.dor_vision"))?,
            pos_query: g.leaf_with(&e.pos_query, track("pos.dor_query"))?,
            pos_proprio: g.leaf_with(&e.pos_proprio, track("pos.proprio"))?,
            pos_action: g.leaf_with(&e.pos_action, track("pos.action"))?,
            query_bank: match &e.query_bank {
                Some(q) => Some(g.leaf_with(q, track("enc.query_bank"))?),
                None => None,
            },
        };
        let h = &model.heads;
        let heads = BoundHeads {
            qa_w: g.leaf_with(&h.qa_w, track("head.qa.w"))?,
            qa_b: g.leaf_with(&h.qa_b, track("head.qa.b"))?,
            vel_w: g.leaf_with(&h.vel_w, track("head.vel.w"))?,
            vel_b: g.leaf_with(&h.vel_b, track("head.vel.b"))?,
            wm_w: g.leaf_with(&h.wm_w, track("head.wm.w"))?,
            wm_b: g.leaf_with(&h.wm_b, track("head.wm.b"))?,
            pix_w: g.leaf_with(&h.pix_w, track("head.pix.w"))?,
            pix_b: g.leaf_with(&h.pix_b, track("head.pix.b"))?,
            mlp_w1: g.leaf_with(&h.mlp_w1, track("head.mlp.w1"))?,
            mlp_b1: g.leaf_with(&h.mlp_b1, track("head.mlp.b1"))?,
            mlp_w2: g.leaf_with(&h.mlp_w2, track("head.mlp.w2"))?,
            mlp_b2: g.leaf_with(&h.mlp_b2, track("head.mlp.b2"))?,
        };
        Ok(BoundModel {
            model,
            sem,
            dor,
            act,
            enc,
            heads,
        })
    }

    pub fn expert(&self, e: ExpertId) -> Result<&BoundExpert> {
        match e {
            ExpertId::Sem => Ok(&self.sem),
            ExpertId::Act => Ok(&self.act),
            ExpertId::Dor => self.dor.as_ref().ok_or_else(|| {
                Error::config(format!(
                    "variant {} routes to a dorsal expert it does not have",
                    self.model.variant
                ))
            }),
        }
    }

    /// Gradient of a named parameter after backward, if one flowed.
    pub fn grads(&self, g: &Graph) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        let mut names: Vec<String> = Vec::new();
        self.model.for_each_param(|n, _| names.push(n.to_string()));
        for (name, var) in names.iter().zip(self.all_vars()) {
            if let Some(grad) = g.grad(var) {
                out.push((name.clone(), grad));
            }
        }
        out
    }

    /// Vars in the same order as `for_each_param` visits names.
    pub fn all_vars(&self) -> Vec<Var> {
        let mut v = Vec::new();
        let mut push_expert = |e: &BoundExpert| {
            for l in &e.layers {
                v.extend([l.attn_norm, l.wq, l.wk, l.wv, l.wo, l.ff_norm, l.w1, l.w2]);
            }
            v.push(e.final_norm);
        };
        push_expert(&self.sem);
        if let Some(d) = &self.dor {
            push_expert(d);
        }
        push_expert(&self.act);
        let e = &self.enc;
        v.extend([
            e.text_table,
            e.sem_w,
            e.sem_b,
            e.dor_w,
            e.dor_b,
            e.proprio_w,
            e.proprio_b,
            e.action_w,
            e.action_b,
            e.time_w,
            e.time_b,
            e.genact_w,
            e.genact_b,
            e.pos_text,
            e.pos_sem,
            e.pos_dor,
            e.pos_query,
            e.pos_proprio,
            e.pos_action,
        ]);
        if let Some(q) = e.query_bank {
            v.push(q);
        }
        let h = &self.heads;
        v.extend([
            h.qa_w, h.qa_b, h.vel_w, h.vel_b, h.wm_w, h.wm_b, h.pix_w, h.pix_b, h.mlp_w1,
            h.mlp_b1, h.mlp_w2, h.mlp_b2,
        ]);
        v
    }
}

// ── forward ────────────────────────────────────────────────────────────

/// Live forward result: hidden states as graph vars plus per-layer
/// attention weights.
#[derive(Debug)]
pub struct Trace {
    pub hidden: Var,
    pub attn: Vec<Var>,
    pub layout: SequenceLayout,
}

/// Materialized forward result for retention and serialization.
pub struct ForwardTrace {
    pub hiddens: Tensor,
    pub attn: Option<Vec<Tensor>>,
    pub layout: SequenceLayout,
}

impl Trace {
    pub fn realize(&self, g: &Graph, retain_attention: bool) -> ForwardTrace {
        ForwardTrace {
            hiddens: g.value(self.hidden),
            attn: retain_attention
                .then(|| self.attn.iter().map(|v| g.value(*v)).collect()),
            layout: self.layout.clone(),
        }
    }
}

type Runs = [(ExpertId, Range<usize>)];

/// Apply `f` per expert run and reassemble the sequence.
fn per_run<F>(g: &mut Graph, x: Var, runs: &Runs, mut f: F) -> Result<Var>
where
    F: FnMut(&mut Graph, ExpertId, Var) -> Result<Var>,
{
    if runs.len() == 1 {
        return f(g, runs[0].0, x);
    }
    let mut parts = Vec::with_capacity(runs.len());
    for (e, range) in runs {
        let s = g.slice_rows(x, range.start, range.end - range.start)?;
        parts.push(f(g, *e, s)?);
    }
    g.concat_rows(&parts)
}

pub const NORM_EPS: f64 = 1e-6;

/// One mixture-of-transformers layer: per-expert pre-norm and projections,
/// joint attention over the whole sequence, per-expert output projection and
/// feed-forward, residual connections around both sublayers.
pub fn mot_layer_forward(
    g: &mut Graph,
    bm: &BoundModel,
    layer: usize,
    x: Var,
    runs: &Runs,
    mask: &Arc<BoolMat>,
) -> Result<Var> {
    mot_layer_with_weights(g, bm, layer, x, runs, mask).map(|(x, _)| x)
}

/// Same as [`mot_layer_forward`] but returning the attention weights.
fn mot_layer_with_weights(
    g: &mut Graph,
    bm: &BoundModel,
    layer: usize,
    x: Var,
    runs: &Runs,
    mask: &Arc<BoolMat>,
) -> Result<(Var, Var)> {
    let heads = bm.model.config.heads;
    let normed = per_run(g, x, runs, |g, e, s| {
        let l = &bm.expert(e)?.layers[layer];
        g.rms_norm(s, l.attn_norm, NORM_EPS)
    })?;
    let q = per_run(g, normed, runs, |g, e, s| {
        g.matmul(s, bm.expert(e)?.layers[layer].wq)
    })?;
    let k = per_run(g, normed, runs, |g, e, s| {
        g.matmul(s, bm.expert(e)?.layers[layer].wk)
    })?;
    let v = per_run(g, normed, runs, |g, e, s| {
        g.matmul(s, bm.expert(e)?.layers[layer].wv)
    })?;
    let qh = g.split_heads(q, heads)?;
    let kh = g.split_heads(k, heads)?;
    let vh = g.split_heads(v, heads)?;
    let (attn, weights) = g.attention(qh, kh, vh, Arc::clone(mask))?;
    let merged = g.merge_heads(attn)?;
    let o = per_run(g, merged, runs, |g, e, s| {
        g.matmul(s, bm.expert(e)?.layers[layer].wo)
    })?;
    let x = g.add(x, o)?;

    let normed2 = per_run(g, x, runs, |g, e, s| {
        let l = &bm.expert(e)?.layers[layer];
        g.rms_norm(s, l.ff_norm, NORM_EPS)
    })?;
    let ff = per_run(g, normed2, runs, |g, e, s| {
        let l = &bm.expert(e)?.layers[layer];
        let h1 = g.matmul(s, l.w1)?;
        let a = g.gelu(h1)?;
        g.matmul(a, l.w2)
    })?;
    Ok((g.add(x, ff)?, weights))
}

/// Run the full trunk over an embedded sequence: all layers, then the
/// per-expert final norm.
pub fn forward(
    g: &mut Graph,
    bm: &BoundModel,
    layout: &SequenceLayout,
    embedded: Var,
) -> Result<Trace> {
    let d = bm.model.config.width;
    if g.shape_of(embedded) != [layout.total_len, d] {
        return Err(Error::Shape {
            op: "forward",
            lhs: g.shape_of(embedded).to_vec(),
            rhs: vec![layout.total_len, d],
        });
    }
    let runs = layout.expert_runs();
    // Routing must cover every token with an existing expert.
    for (e, _) in &runs {
        bm.expert(*e)?;
    }
    let mask = Arc::new(crate::layout::build_mask(layout));
    let mut x = embedded;
    let mut attn = Vec::with_capacity(bm.model.config.layers);
    for layer in 0..bm.model.config.layers {
        let (nx, w) = mot_layer_with_weights(g, bm, layer, x, &runs, &mask)?;
        x = nx;
        attn.push(w);
    }
    let hidden = per_run(g, x, &runs, |g, e, s| {
        g.rms_norm(s, bm.expert(e)?.final_norm, NORM_EPS)
    })?;
    Ok(Trace {
        hidden,
        attn,
        layout: layout.clone(),
    })
}

/// Run the trunk with an explicit routing override (used by the generative
/// pretraining stage, which drives the dorsal stack alone).
pub fn forward_with_runs(
    g: &mut Graph,
    bm: &BoundModel,
    runs: &Runs,
    mask: &Arc<BoolMat>,
    embedded: Var,
) -> Result<Var> {
    let mut x = embedded;
    for layer in 0..bm.model.config.layers {
        x = mot_layer_forward(g, bm, layer, x, runs, mask)?;
    }
    per_run(g, x, runs, |g, e, s| {
        g.rms_norm(s, bm.expert(e)?.final_norm, NORM_EPS)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layout::{build_layout, Grid, TokenCounts};

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            layers: 2,
            width: 8,
            heads: 2,
            ff_mult: 2,
            img_h: 8,
            img_w: 8,
            p_sem: 4,
            p_dor: 8,
            vocab: 16,
            max_text: 4,
            n_query: 2,
            horizon: 3,
            dtype: Dtype::F64,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn init_is_deterministic_and_name_keyed() {
        let cfg = tiny_config();
        let a = ModelBundle::init(VariantId::Uam, cfg.clone(), 7).unwrap();
        let b = ModelBundle::init(VariantId::Uam, cfg.clone(), 7).unwrap();
        assert_eq!(a.param_digest(), b.param_digest());
        // shared names equal across variants with different param sets
        let c = ModelBundle::init(VariantId::GenInit, cfg, 7).unwrap();
        assert!(a
            .get_param("expert.sem.layer0.wq")
            .unwrap()
            .bit_eq(&c.get_param("expert.sem.layer0.wq").unwrap()));
    }

    #[test]
    fn two_expert_has_no_dorsal_params() {
        let b = ModelBundle::init(VariantId::TwoExpert, tiny_config(), 3).unwrap();
        assert!(b.dor.is_none());
        assert!(matches!(b.expert(ExpertId::Dor), Err(Error::Config(_))));
        let mut names = Vec::new();
        b.for_each_param(|n, _| names.push(n.to_string()));
        assert!(!names.iter().any(|n| n.starts_with("expert.dor")));
    }

    #[test]
    fn expert_param_counts_match() {
        let b = ModelBundle::init(VariantId::Uam, tiny_config(), 3).unwrap();
        let count = |e: &ExpertParams| {
            e.layers
                .iter()
                .map(|l| {
                    l.attn_norm.len()
                        + l.wq.len()
                        + l.wk.len()
                        + l.wv.len()
                        + l.wo.len()
                        + l.ff_norm.len()
                        + l.w1.len()
                        + l.w2.len()
                })
                .sum::<usize>()
                + e.final_norm.len()
        };
        assert_eq!(count(&b.sem), count(b.dor.as_ref().unwrap()));
        assert_eq!(count(&b.sem), count(&b.act));
    }

    #[test]
    fn zero_layer_forward_is_final_norm_only() {
        let cfg = ModelConfig {
            layers: 0,
            ..tiny_config()
        };
        let bundle = ModelBundle::init(VariantId::TwoExpert, cfg.clone(), 5).unwrap();
        let counts = TokenCounts {
            text: 2,
            sem_vision: Some(Grid::new(2, 2)),
            proprio: 1,
            action: 3,
            ..TokenCounts::default()
        };
        let layout = build_layout(VariantId::TwoExpert, &counts).unwrap();
        let mut g = Graph::new(Dtype::F64);
        let bm = BoundModel::bind(&mut g, &bundle, false).unwrap();
        let mut r = rng::stream(9, "zero-layer");
        let x = Tensor::randn(vec![layout.total_len, cfg.width], Dtype::F64, 1.0, &mut r);
        let xv = g.constant(&x).unwrap();
        let trace = forward(&mut g, &bm, &layout, xv).unwrap();
        assert!(trace.attn.is_empty());
        // hidden equals rms_norm(x) with unit gains
        let mut g2 = Graph::new(Dtype::F64);
        let xv2 = g2.constant(&x).unwrap();
        let gain = g2
            .constant(&Tensor::full(vec![cfg.width], Dtype::F64, 1.0))
            .unwrap();
        let want = g2.rms_norm(xv2, gain, NORM_EPS).unwrap();
        assert!(
            g.value(trace.hidden).max_abs_diff(&g2.value(want)) < 1e-15,
            "zero-layer trunk must be the final norm alone"
        );
    }

    #[test]
    fn forward_weights_are_row_stochastic_over_visible() {
        let cfg = tiny_config();
        let bundle = ModelBundle::init(VariantId::Uam, cfg.clone(), 5).unwrap();
        let counts = TokenCounts {
            text: 2,
            sem_vision: Some(Grid::new(2, 2)),
            dor_vision: Some(Grid::new(1, 1)),
            proprio: 1,
            action: 3,
            ..TokenCounts::default()
        };
        let layout = build_layout(VariantId::Uam, &counts).unwrap();
        let mut g = Graph::new(Dtype::F64);
        let bm = BoundModel::bind(&mut g, &bundle, false).unwrap();
        let mut r = rng::stream(9, "fwd");
        let x = g
            .constant(&Tensor::randn(
                vec![layout.total_len, cfg.width],
                Dtype::F64,
                1.0,
                &mut r,
            ))
            .unwrap();
        let trace = forward(&mut g, &bm, &layout, x).unwrap();
        assert_eq!(trace.attn.len(), cfg.layers);
        let mask = crate::layout::build_mask(&layout);
        for w in &trace.attn {
            let t = g.value(*w);
            let (h, tq, tk) = (t.shape()[0], t.shape()[1], t.shape()[2]);
            let v = t.to_f64_vec();
            for hh in 0..h {
                for i in 0..tq {
                    let row = &v[(hh * tq + i) * tk..(hh * tq + i + 1) * tk];
                    let sum: f64 = row.iter().sum();
                    assert!((sum - 1.0).abs() < 1e-9, "row sum {sum}");
                    for (j, val) in row.iter().enumerate() {
                        if !mask.get(i, j) {
                            assert_eq!(*val, 0.0);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn missing_expert_is_a_configuration_error() {
        let cfg = tiny_config();
        let bundle = ModelBundle::init(VariantId::TwoExpert, cfg.clone(), 5).unwrap();
        let counts = TokenCounts {
            text: 2,
            sem_vision: Some(Grid::new(2, 2)),
            dor_vision: Some(Grid::new(1, 1)),
            proprio: 1,
            action: 3,
            ..TokenCounts::default()
        };
        // UAM layout routed through a TwoExpert bundle
        let layout = build_layout(VariantId::Uam, &counts).unwrap();
        let mut g = Graph::new(Dtype::F64);
        let bm = BoundModel::bind(&mut g, &bundle, false).unwrap();
        let x = g
            .constant(&Tensor::zeros(
                vec![layout.total_len, cfg.width],
                Dtype::F64,
            ))
            .unwrap();
        assert!(matches!(
            forward(&mut g, &bm, &layout, x),
            Err(Error::Config(_))
        ));
    }
}
