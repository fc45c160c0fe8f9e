//! Consolidated result tables: the (variant x regime) grid of probe score,
//! forgetting and per-split success rates, plus the coupling comparison
//! pair. Tables serialize to CSV (full precision, exact round-trip) and
//! aligned text (fixed decimals).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::EvalReport;
use crate::layout::VariantId;
use crate::world::SplitTag;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub variant: VariantId,
    pub regime: String,
    pub s: f64,
    pub delta: f64,
    pub in_domain: f64,
    pub ood_unseen_object: f64,
    pub ood_composition: f64,
    pub ood_instruction: f64,
    pub status: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ReportTable {
    pub rows: Vec<ReportRow>,
}

const CSV_HEADER: &str =
    "variant,regime,s,delta,in_domain,ood_unseen_object,ood_composition,ood_instruction,status";

impl ReportRow {
    pub fn from_report(r: &EvalReport) -> ReportRow {
        ReportRow {
            variant: r.variant,
            regime: r.regime.clone(),
            s: r.s_vla,
            delta: r.delta,
            in_domain: r.action_rate(SplitTag::InDomain).unwrap_or(0.0),
            ood_unseen_object: r.action_rate(SplitTag::OodUnseenObject).unwrap_or(0.0),
            ood_composition: r.action_rate(SplitTag::OodComposition).unwrap_or(0.0),
            ood_instruction: r
                .action_rate(SplitTag::OodInstructionVariation)
                .unwrap_or(0.0),
            status: "ok".into(),
        }
    }

    pub fn failed(variant: VariantId, regime: &str, msg: &str) -> ReportRow {
        ReportRow {
            variant,
            regime: regime.to_string(),
            s: f64::NAN,
            delta: f64::NAN,
            in_domain: f64::NAN,
            ood_unseen_object: f64::NAN,
            ood_composition: f64::NAN,
            ood_instruction: f64::NAN,
            status: format!("failed: {}", msg.replace([',', '\n'], ";")),
        }
    }

    pub fn mean_ood(&self) -> f64 {
        (self.ood_unseen_object + self.ood_composition + self.ood_instruction) / 3.0
    }
}

impl ReportTable {
    /// Full-precision CSV; floats print in Rust's shortest round-trip form.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                r.variant,
                r.regime,
                r.s,
                r.delta,
                r.in_domain,
                r.ood_unseen_object,
                r.ood_composition,
                r.ood_instruction,
                r.status
            ));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<ReportTable> {
        let mut lines = text.lines();
        let header = lines.next().unwrap_or_default();
        if header != CSV_HEADER {
            return Err(Error::Format {
                path: "<report-csv>".into(),
                msg: format!("unexpected header '{header}'"),
            });
        }
        let mut rows = Vec::new();
        for line in lines {
            if line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.splitn(9, ',').collect();
            if parts.len() != 9 {
                return Err(Error::Format {
                    path: "<report-csv>".into(),
                    msg: format!("bad row '{line}'"),
                });
            }
            let f = |s: &str| -> Result<f64> {
                s.parse().map_err(|_| Error::Format {
                    path: "<report-csv>".into(),
                    msg: format!("bad float '{s}'"),
                })
            };
            rows.push(ReportRow {
                variant: VariantId::parse(parts[0])?,
                regime: parts[1].to_string(),
                s: f(parts[2])?,
                delta: f(parts[3])?,
                in_domain: f(parts[4])?,
                ood_unseen_object: f(parts[5])?,
                ood_composition: f(parts[6])?,
                ood_instruction: f(parts[7])?,
                status: parts[8].to_string(),
            });
        }
        Ok(ReportTable { rows })
    }

    /// Human-readable aligned table at four decimals.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<16} {:<10} {:>8} {:>8} {:>10} {:>12} {:>12} {:>12}  {}\n",
            "variant", "regime", "s", "delta", "in-domain", "ood-unseen", "ood-comp", "ood-instr",
            "status"
        ));
        for r in &self.rows {
            out.push_str(&format!(
                "{:<16} {:<10} {:>8.4} {:>8.4} {:>10.4} {:>12.4} {:>12.4} {:>12.4}  {}\n",
                r.variant.name(),
                r.regime,
                r.s,
                r.delta,
                r.in_domain,
                r.ood_unseen_object,
                r.ood_composition,
                r.ood_instruction,
                r.status
            ));
        }
        out
    }

    /// Parse the aligned form back (values carry the printed precision).
    pub fn from_text(text: &str) -> Result<ReportTable> {
        let mut rows = Vec::new();
        for line in text.lines().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split_whitespace().collect();
            if parts.len() < 9 {
                return Err(Error::Format {
                    path: "<report-text>".into(),
                    msg: format!("bad row '{line}'"),
                });
            }
            let f = |s: &str| -> Result<f64> {
                s.parse().map_err(|_| Error::Format {
                    path: "<report-text>".into(),
                    msg: format!("bad float '{s}'"),
                })
            };
            rows.push(ReportRow {
                variant: VariantId::parse(parts[0])?,
                regime: parts[1].to_string(),
                s: f(parts[2])?,
                delta: f(parts[3])?,
                in_domain: f(parts[4])?,
                ood_unseen_object: f(parts[5])?,
                ood_composition: f(parts[6])?,
                ood_instruction: f(parts[7])?,
                status: parts[8..].join(" "),
            });
        }
        Ok(ReportTable { rows })
    }

    pub fn find(&self, variant: VariantId, regime: &str) -> Option<&ReportRow> {
        self.rows
            .iter()
            .find(|r| r.variant == variant && r.regime == regime)
    }
}

/// The coupling comparison: probe score next to in-domain action accuracy
/// for the frozen sequential-head, mixture, and unfrozen sequential-head
/// builds.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CouplingTable {
    pub rows: Vec<(String, f64, f64)>,
}

impl CouplingTable {
    pub fn from_rows(table: &ReportTable) -> CouplingTable {
        let mut rows = Vec::new();
        let mut push = |label: &str, variant, regime: &str| {
            if let Some(r) = table.find(variant, regime) {
                rows.push((label.to_string(), r.s, r.in_domain));
            }
        };
        push("freeze-vlm (mlp head)", VariantId::FreezeVlmMlp, "frozen-vlm");
        push("mixture routing", VariantId::TwoExpert, "unfrozen");
        push("mlp head", VariantId::MlpHead, "unfrozen");
        CouplingTable { rows }
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<24} {:>10} {:>16}\n",
            "coupling", "vlm-score", "action-accuracy"
        ));
        for (label, s, acc) in &self.rows {
            out.push_str(&format!("{label:<24} {s:>10.4} {acc:>16.4}\n"));
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("coupling,vlm_score,action_accuracy\n");
        for (label, s, acc) in &self.rows {
            out.push_str(&format!("{label},{s},{acc}\n"));
        }
        out
    }
}
