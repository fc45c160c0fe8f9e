//! The design-space sweep: every dorsal variant under both freeze regimes,
//! plus the two sequential-head couplings, trained on a shared data seed
//! and consolidated into one table. Per-cell failures are recorded and the
//! sweep continues.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{finetune_actions, init_variant, FreezeSpec, TrainConfig};
use crate::ckpt;
use crate::error::{Error, Result};
use crate::eval::{evaluate_checkpoint, vlm_score, EvalConfig, EvalReport};
use crate::layout::VariantId;
use crate::model::{ModelBundle, ModelConfig};
use crate::report::{CouplingTable, ReportRow, ReportTable};
use crate::world::Dataset;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SweepCellSpec {
    pub variant: VariantId,
    pub frozen: bool,
}

impl SweepCellSpec {
    pub fn regime(&self) -> &'static str {
        if self.frozen {
            "frozen-vlm"
        } else {
            "unfrozen"
        }
    }

    pub fn name(&self) -> String {
        format!("{}-{}", self.variant, self.regime())
    }
}

/// Which cells to run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepManifest {
    pub cells: Vec<SweepCellSpec>,
}

impl Default for SweepManifest {
    fn default() -> Self {
        SweepManifest::full_grid()
    }
}

impl SweepManifest {
    /// Six design points x {unfrozen, frozen} plus the two coupling cells.
    pub fn full_grid() -> SweepManifest {
        let mut cells = Vec::new();
        for variant in VariantId::DESIGN_POINTS {
            cells.push(SweepCellSpec {
                variant,
                frozen: false,
            });
            cells.push(SweepCellSpec {
                variant,
                frozen: true,
            });
        }
        cells.push(SweepCellSpec {
            variant: VariantId::FreezeVlmMlp,
            frozen: true,
        });
        cells.push(SweepCellSpec {
            variant: VariantId::MlpHead,
            frozen: false,
        });
        SweepManifest { cells }
    }

    /// The twelve design-point cells only.
    pub fn design_grid() -> SweepManifest {
        let mut m = SweepManifest::full_grid();
        m.cells.retain(|c| !c.variant.is_mlp_coupling());
        m
    }
}

pub struct SweepCellResult {
    pub spec: SweepCellSpec,
    pub checkpoint: Option<PathBuf>,
    pub report: Option<EvalReport>,
    pub error: Option<String>,
}

pub struct SweepOutcome {
    pub prior_score: f64,
    pub cells: Vec<SweepCellResult>,
    pub table: ReportTable,
    pub couplings: CouplingTable,
}

impl SweepOutcome {
    pub fn report_of(&self, variant: VariantId, frozen: bool) -> Option<&EvalReport> {
        self.cells
            .iter()
            .find(|c| c.spec.variant == variant && c.spec.frozen == frozen)
            .and_then(|c| c.report.as_ref())
    }
}

/// Run every cell: initialize from the priors, fine-tune under the cell's
/// regime, evaluate, and (optionally) save a checkpoint per cell.
#[allow(clippy::too_many_arguments)]
pub fn run_sweep(
    manifest: &SweepManifest,
    dataset: &Dataset,
    config: &ModelConfig,
    train_cfg: &TrainConfig,
    eval_cfg: &EvalConfig,
    vlm_prior: &ModelBundle,
    gen_prior: Option<&ModelBundle>,
    init_seed: u64,
    out_dir: Option<&Path>,
) -> Result<SweepOutcome> {
    if manifest.cells.is_empty() {
        return Err(Error::usage("sweep manifest lists no cells"));
    }
    let (prior_score, _) = vlm_score(vlm_prior, &dataset.qa_eval)?;
    let mut cells = Vec::new();
    let mut table = ReportTable::default();
    for spec in &manifest.cells {
        let run = || -> Result<(EvalReport, Option<PathBuf>)> {
            let model = init_variant(spec.variant, config, vlm_prior, gen_prior, init_seed)?;
            let freeze = if spec.frozen || spec.variant == VariantId::FreezeVlmMlp {
                FreezeSpec::vlm()
            } else {
                FreezeSpec::none()
            };
            let outcome = finetune_actions(model, train_cfg, &freeze, &dataset.train, None)?;
            let report = evaluate_checkpoint(
                &outcome.model,
                prior_score,
                &dataset.qa_eval,
                dataset,
                eval_cfg,
                spec.regime(),
            )?;
            let path = match out_dir {
                Some(dir) => Some(ckpt::save_checkpoint(
                    dir,
                    &spec.name(),
                    &outcome.model,
                    "finetuned",
                    outcome.final_step,
                    &BTreeMap::new(),
                    &outcome.metrics,
                )?),
                None => None,
            };
            Ok((report, path))
        };
        match run() {
            Ok((report, checkpoint)) => {
                table.rows.push(ReportRow::from_report(&report));
                cells.push(SweepCellResult {
                    spec: *spec,
                    checkpoint,
                    report: Some(report),
                    error: None,
                });
            }
            Err(e) => {
                table
                    .rows
                    .push(ReportRow::failed(spec.variant, spec.regime(), &e.to_string()));
                cells.push(SweepCellResult {
                    spec: *spec,
                    checkpoint: None,
                    report: None,
                    error: Some(e.to_string()),
                });
            }
        }
    }
    let couplings = CouplingTable::from_rows(&table);
    Ok(SweepOutcome {
        prior_score,
        cells,
        table,
        couplings,
    })
}
