//! Fixed synthetic vocabulary: question words, color/shape/target nouns,
//! extremal adjectives, and the verb/preposition synonym lexicon whose
//! held-out entries power the instruction-variation split.

use super::{Shape, TargetKind};
use crate::encode::Instruction;

pub const PAD: usize = 0;
pub const WHAT: usize = 1;
pub const COLOR: usize = 2;
pub const SHAPE: usize = 3;
pub const IS: usize = 4;
pub const THE: usize = 5;
pub const OBJECT: usize = 6;
pub const OBJECTS: usize = 7;
pub const HOW: usize = 8;
pub const MANY: usize = 9;
pub const ARE: usize = 10;
pub const THERE: usize = 11;
pub const COLOR_BASE: usize = 12; // 12..20
pub const SHAPE_BASE: usize = 20; // 20..24
pub const PLURAL_BASE: usize = 24; // 24..28
pub const TARGET_BASE: usize = 28; // 28..30
pub const EXTREMAL_BASE: usize = 30; // 30..34
pub const VERB_TRAIN_BASE: usize = 34; // 34..38
pub const VERB_HELD_BASE: usize = 38; // 38..42
pub const PREP_TRAIN_BASE: usize = 42; // 42..46
pub const PREP_HELD_BASE: usize = 46; // 46..50

pub const WORDS: [&str; 50] = [
    "<pad>", "what", "color", "shape", "is", "the", "object", "objects", "how", "many", "are",
    "there", "red", "green", "blue", "yellow", "magenta", "cyan", "orange", "purple", "circle",
    "square", "triangle", "bar", "circles", "squares", "triangles", "bars", "plate", "box",
    "leftmost", "rightmost", "topmost", "bottommost", "put", "place", "move", "set", "bring",
    "carry", "shift", "stow", "in", "into", "inside", "within", "onto", "to", "at", "toward",
];

pub fn word(id: usize) -> &'static str {
    WORDS.get(id).copied().unwrap_or("<?>")
}

pub fn text_of(ids: &[usize]) -> String {
    ids.iter()
        .map(|i| word(*i))
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn color_token(color: usize) -> usize {
    COLOR_BASE + color
}

pub fn shape_token(shape: Shape) -> usize {
    SHAPE_BASE + shape.index()
}

pub fn plural_token(shape: Shape) -> usize {
    PLURAL_BASE + shape.index()
}

pub fn target_token(kind: TargetKind) -> usize {
    TARGET_BASE + kind.index()
}

pub fn color_of_token(id: usize) -> Option<usize> {
    (COLOR_BASE..COLOR_BASE + 8).contains(&id).then(|| id - COLOR_BASE)
}

pub fn shape_of_token(id: usize) -> Option<Shape> {
    (SHAPE_BASE..SHAPE_BASE + 4)
        .contains(&id)
        .then(|| Shape::ALL[id - SHAPE_BASE])
}

pub fn shape_of_plural_token(id: usize) -> Option<Shape> {
    (PLURAL_BASE..PLURAL_BASE + 4)
        .contains(&id)
        .then(|| Shape::ALL[id - PLURAL_BASE])
}

pub fn target_of_token(id: usize) -> Option<TargetKind> {
    (TARGET_BASE..TARGET_BASE + 2)
        .contains(&id)
        .then(|| TargetKind::ALL[id - TARGET_BASE])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Extremal {
    Leftmost,
    Rightmost,
    Topmost,
    Bottommost,
}

impl Extremal {
    pub const ALL: [Extremal; 4] = [
        Extremal::Leftmost,
        Extremal::Rightmost,
        Extremal::Topmost,
        Extremal::Bottommost,
    ];
}

pub fn extremal_token(e: Extremal) -> usize {
    EXTREMAL_BASE + Extremal::ALL.iter().position(|x| *x == e).unwrap()
}

pub fn extremal_of_token(id: usize) -> Option<Extremal> {
    (EXTREMAL_BASE..EXTREMAL_BASE + 4)
        .contains(&id)
        .then(|| Extremal::ALL[id - EXTREMAL_BASE])
}

/// Verb/preposition phrasing slot. Four synonyms are seen during action
/// training; four are held out for the instruction-variation split.
pub const N_SYNONYMS: usize = 4;

pub fn verb_token(index: usize, held_out: bool) -> usize {
    debug_assert!(index < N_SYNONYMS);
    if held_out {
        VERB_HELD_BASE + index
    } else {
        VERB_TRAIN_BASE + index
    }
}

pub fn prep_token(index: usize, held_out: bool) -> usize {
    debug_assert!(index < N_SYNONYMS);
    if held_out {
        PREP_HELD_BASE + index
    } else {
        PREP_TRAIN_BASE + index
    }
}

pub fn is_held_out_phrasing(ids: &[usize]) -> bool {
    ids.iter().any(|&i| {
        (VERB_HELD_BASE..VERB_HELD_BASE + N_SYNONYMS).contains(&i)
            || (PREP_HELD_BASE..PREP_HELD_BASE + N_SYNONYMS).contains(&i)
    })
}

fn instruction_from(ids: Vec<usize>) -> Instruction {
    let text = text_of(&ids);
    Instruction::new(ids, text)
}

/// "<verb> the <color> <shape> <prep> the <color> <target>"
pub fn task_instruction(
    task: &super::Task,
    verb_index: usize,
    prep_index: usize,
    held_out: bool,
) -> Instruction {
    instruction_from(vec![
        verb_token(verb_index, held_out),
        THE,
        color_token(task.obj_color),
        shape_token(task.obj_shape),
        prep_token(prep_index, held_out),
        THE,
        color_token(task.tgt_color),
        target_token(task.tgt_kind),
    ])
}

pub fn qa_color_question(shape: Shape) -> Instruction {
    instruction_from(vec![WHAT, COLOR, IS, THE, shape_token(shape)])
}

pub fn qa_shape_question(color: usize) -> Instruction {
    instruction_from(vec![WHAT, SHAPE, IS, THE, color_token(color), OBJECT])
}

pub fn qa_count_question(shape: Option<Shape>) -> Instruction {
    let noun = shape.map(plural_token).unwrap_or(OBJECTS);
    instruction_from(vec![HOW, MANY, noun, ARE, THERE])
}

pub fn qa_spatial_question(e: Extremal) -> Instruction {
    instruction_from(vec![WHAT, COLOR, IS, THE, extremal_token(e), OBJECT])
}
