//! Typed token sequences, per-token expert assignment, and the
//! variant-specific attention masks.
//!
//! Mask rules:
//!   R1: context tokens (Text, SemVision, DorVision, DorQuery) attend
//!       bidirectionally among all context tokens present in their variant.
//!   R2: Action and Proprio tokens attend to all context tokens and to each
//!       other.
//!   R3: no context token attends to Action or Proprio tokens.
//!   R4: dorsal and semantic context attend to each other bidirectionally
//!       (a special case of R1, stated separately because it is what makes
//!       the dorsal pathway conditionable on semantics).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{BoolMat, Dtype, Tensor};

/// What a token position carries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TokenKind {
    Text,
    SemVision,
    DorVision,
    DorQuery,
    Proprio,
    Action,
}

impl TokenKind {
    pub const ALL: [TokenKind; 6] = [
        TokenKind::Text,
        TokenKind::SemVision,
        TokenKind::DorVision,
        TokenKind::DorQuery,
        TokenKind::Proprio,
        TokenKind::Action,
    ];

    /// Context tokens form the bidirectional half of the mask; Proprio and
    /// Action form the isolated action branch.
    pub fn is_context(self) -> bool {
        !matches!(self, TokenKind::Proprio | TokenKind::Action)
    }

    pub fn expert(self) -> ExpertId {
        match self {
            TokenKind::Text | TokenKind::SemVision => ExpertId::Sem,
            TokenKind::DorVision | TokenKind::DorQuery => ExpertId::Dor,
            TokenKind::Proprio | TokenKind::Action => ExpertId::Act,
        }
    }

    fn tag(self) -> u32 {
        match self {
            TokenKind::Text => 0,
            TokenKind::SemVision => 1,
            TokenKind::DorVision => 2,
            TokenKind::DorQuery => 3,
            TokenKind::Proprio => 4,
            TokenKind::Action => 5,
        }
    }

    fn from_tag(t: u32) -> Option<TokenKind> {
        TokenKind::ALL.get(t as usize).copied()
    }
}

/// Expert a token routes to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ExpertId {
    Sem,
    Dor,
    Act,
}

impl ExpertId {
    pub const ALL: [ExpertId; 3] = [ExpertId::Sem, ExpertId::Dor, ExpertId::Act];

    pub fn name(self) -> &'static str {
        match self {
            ExpertId::Sem => "sem",
            ExpertId::Dor => "dor",
            ExpertId::Act => "act",
        }
    }
}

/// Patch-grid metadata for vision segments.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Grid {
    pub rows: usize,
    pub cols: usize,
}

impl Grid {
    pub fn new(rows: usize, cols: usize) -> Grid {
        Grid { rows, cols }
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A run of same-kind tokens in the sequence.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub kind: TokenKind,
    pub length: usize,
    pub grid: Option<Grid>,
    pub source_view: Option<u32>,
}

/// Architecture variant: the dorsal design points plus the two
/// sequential-head couplings used for the baseline comparison.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum VariantId {
    TwoExpert,
    RandomInit,
    VlmInitVision,
    VlmInitQuery,
    GenInit,
    Uam,
    FreezeVlmMlp,
    MlpHead,
}

impl VariantId {
    /// The six dorsal design points, in sweep order.
    pub const DESIGN_POINTS: [VariantId; 6] = [
        VariantId::TwoExpert,
        VariantId::RandomInit,
        VariantId::VlmInitVision,
        VariantId::VlmInitQuery,
        VariantId::GenInit,
        VariantId::Uam,
    ];

    pub const ALL: [VariantId; 8] = [
        VariantId::TwoExpert,
        VariantId::RandomInit,
        VariantId::VlmInitVision,
        VariantId::VlmInitQuery,
        VariantId::GenInit,
        VariantId::Uam,
        VariantId::FreezeVlmMlp,
        VariantId::MlpHead,
    ];

    pub fn name(self) -> &'static str {
        match self {
            VariantId::TwoExpert => "two-expert",
            VariantId::RandomInit => "random-init",
            VariantId::VlmInitVision => "vlm-init-vision",
            VariantId::VlmInitQuery => "vlm-init-query",
            VariantId::GenInit => "gen-init",
            VariantId::Uam => "uam",
            VariantId::FreezeVlmMlp => "freeze-vlm-mlp",
            VariantId::MlpHead => "mlp-head",
        }
    }

    pub fn parse(s: &str) -> Result<VariantId> {
        VariantId::ALL
            .iter()
            .copied()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::config(format!("unknown variant '{s}'")))
    }

    /// Dorsal expert present?
    pub fn has_dorsal(self) -> bool {
        matches!(
            self,
            VariantId::RandomInit
                | VariantId::VlmInitVision
                | VariantId::VlmInitQuery
                | VariantId::GenInit
                | VariantId::Uam
        )
    }

    /// Dorsal pathway input: raw observation tokens or learnable queries.
    pub fn dorsal_takes_vision(self) -> bool {
        matches!(
            self,
            VariantId::RandomInit | VariantId::VlmInitVision | VariantId::GenInit | VariantId::Uam
        )
    }

    pub fn dorsal_takes_query(self) -> bool {
        self == VariantId::VlmInitQuery
    }

    /// Sequential regression head instead of action tokens.
    pub fn is_mlp_coupling(self) -> bool {
        matches!(self, VariantId::FreezeVlmMlp | VariantId::MlpHead)
    }

    /// Next-frame prediction auxiliary supervision.
    pub fn wm_supervised(self) -> bool {
        self == VariantId::Uam
    }

    fn tag(self) -> u32 {
        VariantId::ALL.iter().position(|v| *v == self).unwrap() as u32
    }

    fn from_tag(t: u32) -> Option<VariantId> {
        VariantId::ALL.get(t as usize).copied()
    }
}

impl std::fmt::Display for VariantId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Per-kind token counts that a layout is built from. Vision kinds carry
/// their grids; a zero count omits the segment.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct TokenCounts {
    pub text: usize,
    pub sem_vision: Option<Grid>,
    pub dor_vision: Option<Grid>,
    pub dor_query: usize,
    pub proprio: usize,
    pub action: usize,
}

/// Ordered typed segments of one model input sequence.
///
/// Canonical order: Text, SemVision, DorVision or DorQuery, Proprio, Action.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequenceLayout {
    pub segments: Vec<Segment>,
    pub total_len: usize,
    pub variant: VariantId,
}

/// Per-token expert assignment, derived from token kinds.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RoutingTable {
    pub expert_of: Vec<ExpertId>,
}

/// Build the canonical-order layout for a variant, validating that the
/// supplied kinds are legal for it.
pub fn build_layout(variant: VariantId, counts: &TokenCounts) -> Result<SequenceLayout> {
    let reject = |kind: &str| {
        Err(Error::config(format!(
            "variant {variant} does not accept {kind} tokens"
        )))
    };
    if counts.dor_vision.is_some() && !variant.dorsal_takes_vision() {
        return reject("DorVision");
    }
    if counts.dor_query > 0 && !variant.dorsal_takes_query() {
        return reject("DorQuery");
    }
    if variant.is_mlp_coupling() && (counts.proprio > 0 || counts.action > 0) {
        return reject("Proprio/Action");
    }

    let mut segments = Vec::new();
    if counts.text > 0 {
        segments.push(Segment {
            kind: TokenKind::Text,
            length: counts.text,
            grid: None,
            source_view: None,
        });
    }
    if let Some(grid) = counts.sem_vision {
        segments.push(Segment {
            kind: TokenKind::SemVision,
            length: grid.len(),
            grid: Some(grid),
            source_view: Some(0),
        });
    }
    if let Some(grid) = counts.dor_vision {
        segments.push(Segment {
            kind: TokenKind::DorVision,
            length: grid.len(),
            grid: Some(grid),
            source_view: Some(0),
        });
    }
    if counts.dor_query > 0 {
        segments.push(Segment {
            kind: TokenKind::DorQuery,
            length: counts.dor_query,
            grid: None,
            source_view: None,
        });
    }
    if counts.proprio > 0 {
        segments.push(Segment {
            kind: TokenKind::Proprio,
            length: counts.proprio,
            grid: None,
            source_view: None,
        });
    }
    if counts.action > 0 {
        segments.push(Segment {
            kind: TokenKind::Action,
            length: counts.action,
            grid: None,
            source_view: None,
        });
    }
    let total_len = segments.iter().map(|s| s.length).sum();
    if total_len == 0 {
        return Err(Error::config("layout would contain no tokens"));
    }
    Ok(SequenceLayout {
        segments,
        total_len,
        variant,
    })
}

impl SequenceLayout {
    /// Token kind at a flat position.
    pub fn kind_at(&self, index: usize) -> TokenKind {
        let mut offset = 0;
        for s in &self.segments {
            if index < offset + s.length {
                return s.kind;
            }
            offset += s.length;
        }
        panic!("token index {index} out of range {}", self.total_len);
    }

    /// Flat range of the first segment of the given kind.
    pub fn range_of(&self, kind: TokenKind) -> Option<std::ops::Range<usize>> {
        let mut offset = 0;
        for s in &self.segments {
            if s.kind == kind {
                return Some(offset..offset + s.length);
            }
            offset += s.length;
        }
        None
    }

    pub fn segment_of(&self, kind: TokenKind) -> Option<&Segment> {
        self.segments.iter().find(|s| s.kind == kind)
    }

    /// Contiguous same-expert runs in sequence order, adjacent segments
    /// merged. The canonical order guarantees at most three.
    pub fn expert_runs(&self) -> Vec<(ExpertId, std::ops::Range<usize>)> {
        let mut runs: Vec<(ExpertId, std::ops::Range<usize>)> = Vec::new();
        let mut offset = 0;
        for s in &self.segments {
            let e = s.kind.expert();
            match runs.last_mut() {
                Some((last, range)) if *last == e && range.end == offset => {
                    range.end = offset + s.length;
                }
                _ => runs.push((e, offset..offset + s.length)),
            }
            offset += s.length;
        }
        runs
    }

    /// Encode as a small integer tensor for the binary record format:
    /// row 0 = [variant, total_len, n_segments, 0], then one
    /// [kind, length, grid_rows, grid_cols] row per segment (zeros when no
    /// grid).
    pub fn to_tensor(&self) -> Tensor {
        let mut vals = vec![
            f64::from(self.variant.tag()),
            self.total_len as f64,
            self.segments.len() as f64,
            0.0,
        ];
        for s in &self.segments {
            vals.push(f64::from(s.kind.tag()));
            vals.push(s.length as f64);
            vals.push(s.grid.map_or(0.0, |g| g.rows as f64));
            vals.push(s.grid.map_or(0.0, |g| g.cols as f64));
        }
        Tensor::from_f64(vec![self.segments.len() + 1, 4], vals).expect("layout tensor")
    }

    pub fn from_tensor(t: &Tensor) -> Result<SequenceLayout> {
        let bad = |msg: &str| Error::Format {
            path: "<layout>".into(),
            msg: msg.into(),
        };
        if t.rank() != 2 || t.shape()[1] != 4 || t.shape()[0] < 2 {
            return Err(bad("layout tensor must be [n+1, 4]"));
        }
        let v = t.to_f64_vec();
        let variant =
            VariantId::from_tag(v[0] as u32).ok_or_else(|| bad("unknown variant tag"))?;
        let n_seg = v[2] as usize;
        if t.shape()[0] != n_seg + 1 {
            return Err(bad("segment count mismatch"));
        }
        let mut segments = Vec::with_capacity(n_seg);
        for i in 0..n_seg {
            let row = &v[(i + 1) * 4..(i + 2) * 4];
            let kind = TokenKind::from_tag(row[0] as u32)
                .ok_or_else(|| bad("unknown token kind tag"))?;
            let grid = if row[2] > 0.0 {
                Some(Grid::new(row[2] as usize, row[3] as usize))
            } else {
                None
            };
            segments.push(Segment {
                kind,
                length: row[1] as usize,
                grid,
                source_view: None,
            });
        }
        let total_len = segments.iter().map(|s| s.length).sum();
        if total_len != v[1] as usize {
            return Err(bad("total_len mismatch"));
        }
        Ok(SequenceLayout {
            segments,
            total_len,
            variant,
        })
    }
}

/// Attention mask under rules R1-R4: the only forbidden direction is
/// context attending into the action branch.
pub fn build_mask(layout: &SequenceLayout) -> BoolMat {
    let t = layout.total_len;
    let mut mask = BoolMat::new(t, t, true);
    let mut row_off = 0;
    for si in &layout.segments {
        if si.kind.is_context() {
            let mut col_off = 0;
            for sj in &layout.segments {
                if !sj.kind.is_context() {
                    for i in row_off..row_off + si.length {
                        for j in col_off..col_off + sj.length {
                            mask.set(i, j, false);
                        }
                    }
                }
                col_off += sj.length;
            }
        }
        row_off += si.length;
    }
    mask
}

/// Mask converted to a 0/1 tensor for checkpoint embedding.
pub fn mask_to_tensor(mask: &BoolMat) -> Tensor {
    mask.to_tensor(Dtype::F32)
}

/// Per-token expert assignment; a pure function of token kinds.
pub fn route(layout: &SequenceLayout) -> RoutingTable {
    let mut expert_of = Vec::with_capacity(layout.total_len);
    for s in &layout.segments {
        for _ in 0..s.length {
            expert_of.push(s.kind.expert());
        }
    }
    RoutingTable { expert_of }
}
