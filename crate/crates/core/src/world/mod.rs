//! Deterministic synthetic embodied environment: rendered scenes over a
//! continuous workspace with an 8x8-cell coordinate system, templated
//! instructions over a fixed vocabulary, scripted expert trajectories,
//! out-of-distribution splits, and a question-answering probe suite.

pub mod dataset;
pub mod policy;
pub mod render;
pub mod vocab;

pub use dataset::{generate_dataset, DataSizes, Dataset, HoldoutConfig};
pub use policy::{expert_policy, instruction_satisfied, step, CELL, GOAL_TOL, PICK_RADIUS};
pub use render::render;

use serde::{Deserialize, Serialize};

use crate::encode::{Image, Instruction};
use crate::error::{Error, Result};

/// Object glyph shapes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Shape {
    Circle,
    Square,
    Triangle,
    Bar,
}

impl Shape {
    pub const ALL: [Shape; 4] = [Shape::Circle, Shape::Square, Shape::Triangle, Shape::Bar];

    pub fn index(self) -> usize {
        Shape::ALL.iter().position(|s| *s == self).unwrap()
    }
}

/// Target region kinds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TargetKind {
    Plate,
    Box,
}

impl TargetKind {
    pub const ALL: [TargetKind; 2] = [TargetKind::Plate, TargetKind::Box];

    pub fn index(self) -> usize {
        TargetKind::ALL.iter().position(|k| *k == self).unwrap()
    }
}

/// The eight-color palette (index is the color id everywhere).
pub const PALETTE: [[f32; 3]; 8] = [
    [0.95, 0.10, 0.10], // red
    [0.10, 0.85, 0.10], // green
    [0.15, 0.25, 0.95], // blue
    [0.95, 0.90, 0.10], // yellow
    [0.90, 0.10, 0.90], // magenta
    [0.10, 0.90, 0.90], // cyan
    [0.95, 0.55, 0.10], // orange
    [0.55, 0.15, 0.90], // purple
];

pub const N_COLORS: usize = PALETTE.len();

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub shape: Shape,
    pub color: usize,
    pub pos: [f64; 2],
    pub held: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetRegion {
    pub kind: TargetKind,
    pub color: usize,
    pub pos: [f64; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Effector {
    pub pos: [f64; 2],
    pub closed: bool,
}

/// Full world state on the unit workspace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub objects: Vec<SceneObject>,
    pub targets: Vec<TargetRegion>,
    pub effector: Effector,
}

impl Scene {
    pub fn empty() -> Scene {
        Scene {
            objects: Vec::new(),
            targets: Vec::new(),
            effector: Effector {
                pos: [0.5, 0.5],
                closed: false,
            },
        }
    }

    pub fn held_index(&self) -> Option<usize> {
        self.objects.iter().position(|o| o.held)
    }

    pub fn validate(&self) -> Result<()> {
        let in_bounds = |p: [f64; 2]| (0.0..=1.0).contains(&p[0]) && (0.0..=1.0).contains(&p[1]);
        if !in_bounds(self.effector.pos)
            || self.objects.iter().any(|o| !in_bounds(o.pos))
            || self.targets.iter().any(|t| !in_bounds(t.pos))
        {
            return Err(Error::Domain("scene position out of bounds".into()));
        }
        if self.objects.iter().filter(|o| o.held).count() > 1 {
            return Err(Error::Domain("more than one held object".into()));
        }
        Ok(())
    }

    /// The unique object matching (color, shape), if exactly one exists.
    pub fn find_object(&self, color: usize, shape: Shape) -> Option<usize> {
        let mut found = None;
        for (i, o) in self.objects.iter().enumerate() {
            if o.color == color && o.shape == shape {
                if found.is_some() {
                    return None;
                }
                found = Some(i);
            }
        }
        found
    }

    pub fn find_target(&self, color: usize, kind: TargetKind) -> Option<usize> {
        let mut found = None;
        for (i, t) in self.targets.iter().enumerate() {
            if t.color == color && t.kind == kind {
                if found.is_some() {
                    return None;
                }
                found = Some(i);
            }
        }
        found
    }
}

/// A manipulation task: put the (color, shape) object into the
/// (color, kind) target.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Task {
    pub obj_color: usize,
    pub obj_shape: Shape,
    pub tgt_color: usize,
    pub tgt_kind: TargetKind,
}

/// Evaluation split membership.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SplitTag {
    InDomain,
    OodUnseenObject,
    OodComposition,
    OodInstructionVariation,
}

impl SplitTag {
    pub const ALL: [SplitTag; 4] = [
        SplitTag::InDomain,
        SplitTag::OodUnseenObject,
        SplitTag::OodComposition,
        SplitTag::OodInstructionVariation,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SplitTag::InDomain => "in-domain",
            SplitTag::OodUnseenObject => "ood-unseen-object",
            SplitTag::OodComposition => "ood-composition",
            SplitTag::OodInstructionVariation => "ood-instruction",
        }
    }
}

/// One synthetic trajectory. Scenes and frames carry T+1 entries; actions
/// carry T, with frame t the observation before action t and frame t+1 its
/// deterministic consequence.
#[derive(Clone, Debug)]
pub struct Episode {
    pub instruction: Instruction,
    pub task: Task,
    pub scenes: Vec<Scene>,
    pub frames: Vec<Image>,
    pub actions: Vec<[f64; 3]>,
    pub split: SplitTag,
    pub seed: u64,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    /// Effector state before action t: x, y, gripper.
    pub fn proprio(&self, t: usize) -> [f64; 3] {
        let s = &self.scenes[t];
        [
            s.effector.pos[0],
            s.effector.pos[1],
            if s.effector.closed { 1.0 } else { 0.0 },
        ]
    }
}

/// Question category of the probe suite.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum QaCategory {
    Color,
    Shape,
    Count,
    SpatialRelation,
}

impl QaCategory {
    pub const ALL: [QaCategory; 4] = [
        QaCategory::Color,
        QaCategory::Shape,
        QaCategory::Count,
        QaCategory::SpatialRelation,
    ];

    pub fn name(self) -> &'static str {
        match self {
            QaCategory::Color => "color",
            QaCategory::Shape => "shape",
            QaCategory::Count => "count",
            QaCategory::SpatialRelation => "spatial-relation",
        }
    }
}

/// Number of answer classes: 8 colors, 4 shapes, counts 1-4.
pub const QA_CLASSES: usize = 16;

/// Answer id layout.
pub fn color_answer(color: usize) -> usize {
    color
}

pub fn shape_answer(shape: Shape) -> usize {
    8 + shape.index()
}

pub fn count_answer(count: usize) -> usize {
    debug_assert!((1..=4).contains(&count));
    11 + count
}

/// One probe item. The answer is derivable from the scene by
/// [`qa_oracle`].
#[derive(Clone, Debug)]
pub struct QAItem {
    pub image: Image,
    pub scene: Scene,
    pub question: Instruction,
    pub answer: usize,
    pub category: QaCategory,
    pub seed: u64,
}

/// Scripted oracle: answer a templated question from scene ground truth.
/// Returns None for malformed questions or scenes that do not determine a
/// unique answer.
pub fn qa_oracle(scene: &Scene, question: &[usize]) -> Option<usize> {
    use vocab as v;
    match question {
        // what color is the <shape>
        [w, c, i, t, shape_id] if [*w, *c, *i, *t] == [v::WHAT, v::COLOR, v::IS, v::THE] => {
            let shape = v::shape_of_token(*shape_id)?;
            let matches: Vec<&SceneObject> =
                scene.objects.iter().filter(|o| o.shape == shape).collect();
            match matches.as_slice() {
                [only] => Some(color_answer(only.color)),
                _ => None,
            }
        }
        // what shape is the <color> object
        [w, s, i, t, color_id, o]
            if [*w, *s, *i, *t, *o] == [v::WHAT, v::SHAPE, v::IS, v::THE, v::OBJECT] =>
        {
            let color = v::color_of_token(*color_id)?;
            let matches: Vec<&SceneObject> =
                scene.objects.iter().filter(|ob| ob.color == color).collect();
            match matches.as_slice() {
                [only] => Some(shape_answer(only.shape)),
                _ => None,
            }
        }
        // how many <shape-plural> are there
        [h, m, plural, a, t] if [*h, *m, *a, *t] == [v::HOW, v::MANY, v::ARE, v::THERE] => {
            if *plural == v::OBJECTS {
                let n = scene.objects.len();
                (1..=4).contains(&n).then(|| count_answer(n))
            } else {
                let shape = v::shape_of_plural_token(*plural)?;
                let n = scene.objects.iter().filter(|o| o.shape == shape).count();
                (1..=4).contains(&n).then(|| count_answer(n))
            }
        }
        // what color is the <extremal> object
        [w, c, i, t, ext, o]
            if [*w, *c, *i, *t, *o] == [v::WHAT, v::COLOR, v::IS, v::THE, v::OBJECT] =>
        {
            let axis_max = v::extremal_of_token(*ext)?;
            let mut best: Option<(&SceneObject, f64)> = None;
            for obj in &scene.objects {
                let key = match axis_max {
                    v::Extremal::Leftmost => -obj.pos[0],
                    v::Extremal::Rightmost => obj.pos[0],
                    v::Extremal::Topmost => -obj.pos[1],
                    v::Extremal::Bottommost => obj.pos[1],
                };
                match best {
                    Some((_, k)) if k >= key => {}
                    _ => best = Some((obj, key)),
                }
            }
            best.map(|(o, _)| color_answer(o.color))
        }
        _ => None,
    }
}
