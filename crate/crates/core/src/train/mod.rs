//! Training stages: the two pretraining phases that manufacture the toy
//! priors, variant initialization, and the action fine-tuning loop with
//! freeze specifications.

pub mod finetune;
pub mod optim;
pub mod stages;
pub mod sweep;

pub use finetune::{finetune_actions, init_variant};
pub use optim::{AdamState, AdamW};
pub use stages::{pretrain_generative, pretrain_vlm};
pub use sweep::{run_sweep, SweepCellResult, SweepCellSpec, SweepManifest, SweepOutcome};

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layout::ExpertId;
use crate::model::ModelBundle;

/// Named parameter groups that can be frozen as units. Encoder groups carry
/// their position tables.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ParamGroup {
    SemExpert,
    DorExpert,
    ActExpert,
    TextEncoder,
    SemEncoder,
    DorEncoder,
    QueryBank,
    ProprioEncoder,
    ActionEncoder,
    QaHead,
    VelHead,
    WmHead,
    PixHead,
    MlpHead,
}

/// Group membership of every parameter name.
pub fn group_of_param(name: &str) -> ParamGroup {
    use ParamGroup::*;
    if let Some(rest) = name.strip_prefix("expert.") {
        return match rest.split('.').next() {
            Some("sem") => SemExpert,
            Some("dor") => DorExpert,
            _ => ActExpert,
        };
    }
    match name {
        "enc.text" | "pos.text" => TextEncoder,
        "enc.sem.w" | "enc.sem.b" | "pos.sem_vision" => SemEncoder,
        "enc.dor.w" | "enc.dor.b" | "pos.dor_vision" | "enc.genact.w" | "enc.genact.b" => {
            DorEncoder
        }
        "enc.query_bank" | "pos.dor_query" => QueryBank,
        "enc.proprio.w" | "enc.proprio.b" | "pos.proprio" => ProprioEncoder,
        "enc.action.w" | "enc.action.b" | "enc.time.w" | "enc.time.b" | "pos.action" => {
            ActionEncoder
        }
        "head.qa.w" | "head.qa.b" => QaHead,
        "head.vel.w" | "head.vel.b" => VelHead,
        "head.wm.w" | "head.wm.b" => WmHead,
        "head.pix.w" | "head.pix.b" => PixHead,
        _ => MlpHead,
    }
}

/// Parameter groups excluded from optimizer updates. Frozen tensors are
/// bit-identical across any number of steps.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FreezeSpec {
    pub groups: BTreeSet<ParamGroup>,
}

impl FreezeSpec {
    pub fn none() -> FreezeSpec {
        FreezeSpec::default()
    }

    /// Freeze the whole visual-language component: the semantic expert, its
    /// encoders and position tables, and the answer head. This is what
    /// makes the probe score of a frozen run coincide with its prior's
    /// bit-for-bit.
    pub fn vlm() -> FreezeSpec {
        use ParamGroup::*;
        FreezeSpec {
            groups: [SemExpert, TextEncoder, SemEncoder, QaHead].into_iter().collect(),
        }
    }

    pub fn expert(e: ExpertId) -> FreezeSpec {
        let g = match e {
            ExpertId::Sem => ParamGroup::SemExpert,
            ExpertId::Dor => ParamGroup::DorExpert,
            ExpertId::Act => ParamGroup::ActExpert,
        };
        FreezeSpec {
            groups: [g].into_iter().collect(),
        }
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.groups.contains(&group_of_param(name))
    }

    /// Every referenced group must exist in the bundle.
    pub fn validate(&self, model: &ModelBundle) -> Result<()> {
        let variant = model.variant;
        if self.groups.contains(&ParamGroup::DorExpert) && model.dor.is_none() {
            return Err(Error::config(format!(
                "cannot freeze the dorsal expert: variant {variant} has none"
            )));
        }
        if self.groups.contains(&ParamGroup::QueryBank) && model.enc.query_bank.is_none() {
            return Err(Error::config(format!(
                "cannot freeze the query bank: variant {variant} has none"
            )));
        }
        Ok(())
    }

    /// Partition parameter names into (trainable, frozen).
    pub fn partition(&self, model: &ModelBundle) -> (Vec<String>, Vec<String>) {
        let mut trainable = Vec::new();
        let mut frozen = Vec::new();
        model.for_each_param(|name, _| {
            if self.is_frozen(name) {
                frozen.push(name.to_string());
            } else {
                trainable.push(name.to_string());
            }
        });
        (trainable, frozen)
    }
}

/// Shared training hyperparameters.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub lambda: f64,
    pub seed: u64,
    pub eval_every: usize,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            batch_size: 32,
            lr: 3e-4,
            weight_decay: 0.01,
            clip_norm: 1.0,
            lambda: 1.0,
            seed: 0,
            eval_every: 0,
            log_every: 50,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if !(self.lr > 0.0) || !(self.clip_norm > 0.0) {
            return Err(Error::config("lr and clip_norm must be positive"));
        }
        if self.weight_decay < 0.0 || self.lambda < 0.0 {
            return Err(Error::config("weight_decay and lambda must be >= 0"));
        }
        Ok(())
    }
}

/// One metric-log line: (step, loss, l_act, l_wm, lr).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: usize,
    pub loss: f64,
    pub l_act: f64,
    pub l_wm: f64,
    pub lr: f64,
}

pub fn metrics_to_csv(rows: &[MetricRow]) -> String {
    let mut out = String::from("step,loss,l_act,l_wm,lr\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.step, r.loss, r.l_act, r.l_wm, r.lr
        ));
    }
    out
}

/// Result of a training stage.
pub struct TrainOutcome {
    pub model: ModelBundle,
    pub opt: AdamState,
    pub metrics: Vec<MetricRow>,
    pub final_step: usize,
    /// (step, probe accuracy) rows when an evaluation cadence was set.
    pub probe_rows: Vec<(usize, f64)>,
}

/// Per-batch gradient and loss summary produced by a stage's step function.
pub struct BatchOut {
    pub grads: BTreeMap<String, Vec<f64>>,
    pub loss: f64,
    pub l_act: f64,
    pub l_wm: f64,
}

/// Gradient accumulator in the model's native dtype; sums stay cheap
/// inside a batch chunk and convert to f64 once on merge.
#[derive(Default)]
pub(crate) struct GradAcc {
    map: BTreeMap<String, crate::tensor::Buf>,
}

impl GradAcc {
    pub(crate) fn add(&mut self, from: Vec<(String, crate::tensor::Tensor)>) {
        use crate::tensor::Buf;
        for (name, g) in from {
            match self.map.get_mut(&name) {
                Some(acc) => match (acc, g.data()) {
                    (Buf::F32(a), Buf::F32(b)) => crate::tensor::kernels::axpy(a, b, 1.0),
                    (Buf::F64(a), Buf::F64(b)) => crate::tensor::kernels::axpy(a, b, 1.0),
                    _ => unreachable!("one dtype per run"),
                },
                None => {
                    self.map.insert(name, g.data().clone());
                }
            }
        }
    }
}

/// Merge a chunk's accumulated gradients (scaled by 1/batch) in a fixed
/// order.
pub(crate) fn merge_grads(into: &mut BTreeMap<String, Vec<f64>>, from: GradAcc, scale: f64) {
    for (name, g) in from.map {
        let v = g.to_f64_vec();
        match into.get_mut(&name) {
            Some(acc) => {
                for (a, x) in acc.iter_mut().zip(&v) {
                    *a += x * scale;
                }
            }
            None => {
                into.insert(name, v.iter().map(|x| x * scale).collect());
            }
        }
    }
}

/// The shared optimization driver: runs `step_fn` for each step, clips the
/// global gradient norm over trainable parameters, applies the optimizer,
/// and records metrics. Divergence (non-finite loss) is a run error naming
/// the step.
#[allow(clippy::too_many_arguments)]
pub(crate) fn drive(
    model: &mut ModelBundle,
    opt: &AdamW,
    state: &mut AdamState,
    freeze: &FreezeSpec,
    clip_norm: f64,
    start_step: usize,
    end_step: usize,
    log_every: usize,
    metrics: &mut Vec<MetricRow>,
    mut step_fn: impl FnMut(usize, &ModelBundle) -> Result<BatchOut>,
) -> Result<()> {
    for step in start_step..end_step {
        let mut out = step_fn(step, model).map_err(|e| Error::Run {
            step,
            msg: e.to_string(),
        })?;
        if !out.loss.is_finite() {
            return Err(Error::Run {
                step,
                msg: format!("loss diverged to {}", out.loss),
            });
        }
        // keep only trainable gradients, then clip their global norm
        out.grads.retain(|name, _| !freeze.is_frozen(name));
        let norm: f64 = out
            .grads
            .values()
            .flat_map(|g| g.iter().map(|v| v * v))
            .sum::<f64>()
            .sqrt();
        if norm > clip_norm {
            let s = clip_norm / norm;
            for g in out.grads.values_mut() {
                for v in g.iter_mut() {
                    *v *= s;
                }
            }
        }
        opt.apply(model, &out.grads, state)?;
        if log_every > 0 && (step + 1) % log_every == 0 {
            metrics.push(MetricRow {
                step: step + 1,
                loss: out.loss,
                l_act: out.l_act,
                l_wm: out.l_wm,
                lr: opt.lr,
            });
        }
    }
    Ok(())
}
