//! Dataset generation and storage: training episodes over seen
//! object/target combinations, three out-of-distribution evaluation splits
//! with disjoint combinatorics, and the balanced question-answering probe
//! suite. Generation is keyed by per-item seeds derived from the master
//! seed, with training and evaluation namespaces kept disjoint.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::policy::{expert_policy, instruction_satisfied, step};
use super::render::{render, render_without_effector};
use super::vocab;
use super::{
    count_answer, qa_oracle, Effector, Episode, QAItem, QaCategory, Scene, SceneObject, Shape,
    SplitTag, TargetKind, TargetRegion, Task, N_COLORS,
};
use crate::encode::{Image, Instruction};
use crate::error::{Error, Result};
use crate::rng::{self, NS_EVAL, NS_TRAIN};
use crate::tensor::Tensor;

/// Which combinations are withheld from action training.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HoldoutConfig {
    /// (color, shape) object types never seen in training episodes.
    pub unseen_object_pairs: Vec<(usize, Shape)>,
    /// (object type, target type) task combinations whose components are
    /// both seen, withheld as combinations.
    pub composition_holdout: Vec<((usize, Shape), (usize, TargetKind))>,
}

impl Default for HoldoutConfig {
    fn default() -> Self {
        let unseen_object_pairs = vec![
            (1, Shape::Circle),
            (3, Shape::Square),
            (5, Shape::Triangle),
            (7, Shape::Bar),
            (6, Shape::Circle),
            (0, Shape::Triangle),
        ];
        let mut composition_holdout = Vec::new();
        for oc in 0..N_COLORS {
            for os in Shape::ALL {
                if unseen_object_pairs.contains(&(oc, os)) {
                    continue;
                }
                for tc in 0..N_COLORS {
                    for tk in TargetKind::ALL {
                        let key = oc * 3 + os.index() * 5 + tc * 7 + tk.index() * 11;
                        if key % 6 == 0 {
                            composition_holdout.push(((oc, os), (tc, tk)));
                        }
                    }
                }
            }
        }
        HoldoutConfig {
            unseen_object_pairs,
            composition_holdout,
        }
    }
}

impl HoldoutConfig {
    pub fn seen_object_pairs(&self) -> Vec<(usize, Shape)> {
        let mut v = Vec::new();
        for c in 0..N_COLORS {
            for s in Shape::ALL {
                if !self.unseen_object_pairs.contains(&(c, s)) {
                    v.push((c, s));
                }
            }
        }
        v
    }

    pub fn all_target_types() -> Vec<(usize, TargetKind)> {
        let mut v = Vec::new();
        for c in 0..N_COLORS {
            for k in TargetKind::ALL {
                v.push((c, k));
            }
        }
        v
    }

    fn is_composition_held_out(&self, obj: (usize, Shape), tgt: (usize, TargetKind)) -> bool {
        self.composition_holdout.contains(&(obj, tgt))
    }

    pub fn validate(&self) -> Result<()> {
        if self.unseen_object_pairs.is_empty() {
            return Err(Error::Generation(
                "holdout config has no unseen object pairs for the ood-unseen-object split".into(),
            ));
        }
        if self.composition_holdout.is_empty() {
            return Err(Error::Generation(
                "holdout config has no held-out combinations for the ood-composition split".into(),
            ));
        }
        let seen = self.seen_object_pairs();
        if seen.len() < 4 {
            return Err(Error::Generation(
                "too few seen object pairs to build training scenes".into(),
            ));
        }
        // every seen object must keep at least one trainable target
        for obj in &seen {
            let open = Self::all_target_types()
                .iter()
                .filter(|t| !self.is_composition_held_out(*obj, **t))
                .count();
            if open == 0 {
                return Err(Error::Generation(format!(
                    "object {obj:?} has no trainable target combination left"
                )));
            }
        }
        for ((oc, os), _) in &self.composition_holdout {
            if self.unseen_object_pairs.contains(&(*oc, *os)) {
                return Err(Error::Generation(
                    "composition holdout references an unseen object pair".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Per-split dataset sizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataSizes {
    pub train_episodes: usize,
    pub eval_episodes_per_split: usize,
    pub qa_train: usize,
    pub qa_eval: usize,
}

impl Default for DataSizes {
    fn default() -> Self {
        DataSizes {
            train_episodes: 3000,
            eval_episodes_per_split: 200,
            qa_train: 2000,
            qa_eval: 500,
        }
    }
}

/// The generated corpus.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub seed: u64,
    pub sizes: DataSizes,
    pub holdout: HoldoutConfig,
    pub train: Vec<Episode>,
    pub eval_in_domain: Vec<Episode>,
    pub ood_unseen_object: Vec<Episode>,
    pub ood_composition: Vec<Episode>,
    pub ood_instruction: Vec<Episode>,
    pub qa_train: Vec<QAItem>,
    pub qa_eval: Vec<QAItem>,
}

// ── scene sampling ──────────────────────────────────────────────────────

const POS_LO: f64 = 0.15;
const POS_HI: f64 = 0.85;
const MIN_SEP: f64 = 0.28;

fn sample_positions(rng: &mut impl Rng, n: usize) -> Option<Vec<[f64; 2]>> {
    let mut out: Vec<[f64; 2]> = Vec::with_capacity(n);
    'outer: for _ in 0..400 {
        if out.len() == n {
            break;
        }
        let p = [
            rng.gen_range(POS_LO..POS_HI),
            rng.gen_range(POS_LO..POS_HI),
        ];
        for q in &out {
            if (p[0] - q[0]).abs().max((p[1] - q[1]).abs()) < MIN_SEP {
                continue 'outer;
            }
        }
        out.push(p);
    }
    (out.len() == n).then_some(out)
}

fn sample_effector(rng: &mut impl Rng, occupied: &[[f64; 2]]) -> Option<[f64; 2]> {
    for _ in 0..200 {
        let p = [rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9)];
        if occupied
            .iter()
            .all(|q| (p[0] - q[0]).abs().max((p[1] - q[1]).abs()) >= 0.125)
        {
            return Some(p);
        }
    }
    None
}

struct TaskDraw {
    task: Task,
    held_out_phrasing: bool,
    distractor_pool: Vec<(usize, Shape)>,
}

fn draw_task(rng: &mut impl Rng, split: SplitTag, holdout: &HoldoutConfig) -> Result<TaskDraw> {
    let seen = holdout.seen_object_pairs();
    let targets = HoldoutConfig::all_target_types();
    let (obj, tgt, held_out_phrasing, distractor_pool) = match split {
        SplitTag::InDomain | SplitTag::OodInstructionVariation => {
            let mut obj;
            let mut tgt;
            loop {
                obj = *seen.choose(rng).expect("seen pairs");
                tgt = *targets.choose(rng).expect("targets");
                if !holdout.is_composition_held_out(obj, tgt) {
                    break;
                }
            }
            (
                obj,
                tgt,
                split == SplitTag::OodInstructionVariation,
                seen.clone(),
            )
        }
        SplitTag::OodUnseenObject => {
            let obj = *holdout
                .unseen_object_pairs
                .choose(rng)
                .ok_or_else(|| Error::Generation("no unseen object pairs configured".into()))?;
            let tgt = *targets.choose(rng).expect("targets");
            // the whole scene is built from held-out object types
            (obj, tgt, false, holdout.unseen_object_pairs.clone())
        }
        SplitTag::OodComposition => {
            let (obj, tgt) = *holdout
                .composition_holdout
                .choose(rng)
                .ok_or_else(|| Error::Generation("no held-out compositions configured".into()))?;
            (obj, tgt, false, seen.clone())
        }
    };
    Ok(TaskDraw {
        task: Task {
            obj_color: obj.0,
            obj_shape: obj.1,
            tgt_color: tgt.0,
            tgt_kind: tgt.1,
        },
        held_out_phrasing,
        distractor_pool,
    })
}

fn build_scene(rng: &mut impl Rng, draw: &TaskDraw) -> Option<(Scene, Task)> {
    let task = draw.task;
    let n_distractors = rng.gen_range(0..=2usize);
    let n_extra_targets = rng.gen_range(0..=1usize);
    let n = 1 + n_distractors + 1 + n_extra_targets;
    let positions = sample_positions(rng, n)?;

    let mut objects = vec![SceneObject {
        shape: task.obj_shape,
        color: task.obj_color,
        pos: positions[0],
        held: false,
    }];
    let mut used_pairs = vec![(task.obj_color, task.obj_shape)];
    for i in 0..n_distractors {
        let mut pool: Vec<(usize, Shape)> = draw
            .distractor_pool
            .iter()
            .copied()
            .filter(|p| !used_pairs.contains(p))
            .collect();
        if pool.is_empty() {
            break;
        }
        pool.sort();
        let pick = *pool.choose(rng)?;
        used_pairs.push(pick);
        objects.push(SceneObject {
            shape: pick.1,
            color: pick.0,
            pos: positions[1 + i],
            held: false,
        });
    }
    let mut targets = vec![TargetRegion {
        kind: task.tgt_kind,
        color: task.tgt_color,
        pos: positions[1 + n_distractors],
    }];
    let mut used_targets = vec![(task.tgt_color, task.tgt_kind)];
    for i in 0..n_extra_targets {
        let pool: Vec<(usize, TargetKind)> = HoldoutConfig::all_target_types()
            .into_iter()
            .filter(|t| !used_targets.contains(t))
            .collect();
        let pick = *pool.choose(rng)?;
        used_targets.push(pick);
        targets.push(TargetRegion {
            kind: pick.1,
            color: pick.0,
            pos: positions[1 + n_distractors + 1 + i],
        });
    }
    let all_pos: Vec<[f64; 2]> = objects
        .iter()
        .map(|o| o.pos)
        .chain(targets.iter().map(|t| t.pos))
        .collect();
    let eff = sample_effector(rng, &all_pos)?;
    Some((
        Scene {
            objects,
            targets,
            effector: Effector {
                pos: eff,
                closed: false,
            },
        },
        task,
    ))
}

fn generate_episode(seed: u64, split: SplitTag, holdout: &HoldoutConfig) -> Result<Episode> {
    for attempt in 0..32u64 {
        let mut r = rng::from_seed(rng::child(seed, attempt));
        let draw = draw_task(&mut r, split, holdout)?;
        let Some((scene0, task)) = build_scene(&mut r, &draw) else {
            continue;
        };
        let actions = match expert_policy(&scene0, &task) {
            Ok(a) => a,
            Err(_) => continue,
        };
        let verb = r.gen_range(0..vocab::N_SYNONYMS);
        let prep = r.gen_range(0..vocab::N_SYNONYMS);
        let instruction = vocab::task_instruction(&task, verb, prep, draw.held_out_phrasing);

        let mut scenes = vec![scene0.clone()];
        let mut frames = vec![render(&scene0)];
        let mut s = scene0;
        for a in &actions {
            s = step(&s, *a);
            scenes.push(s.clone());
            frames.push(render(&s));
        }
        if !instruction_satisfied(&s, &task) {
            continue;
        }
        return Ok(Episode {
            instruction,
            task,
            scenes,
            frames,
            actions,
            split,
            seed,
        });
    }
    Err(Error::Generation(format!(
        "could not generate a valid episode for {split:?} from seed {seed:#x}"
    )))
}

// ── probe suite ─────────────────────────────────────────────────────────

fn qa_scene_base(rng: &mut impl Rng, objects: Vec<(usize, Shape)>) -> Option<Scene> {
    let with_target = rng.gen_bool(0.5);
    let n = objects.len() + usize::from(with_target);
    let positions = sample_positions(rng, n)?;
    let mut scene = Scene::empty();
    scene.effector.pos = [0.5, 0.5];
    for (i, (c, s)) in objects.iter().enumerate() {
        scene.objects.push(SceneObject {
            shape: *s,
            color: *c,
            pos: positions[i],
            held: false,
        });
    }
    if with_target {
        scene.targets.push(TargetRegion {
            kind: *TargetKind::ALL.choose(rng).unwrap(),
            color: rng.gen_range(0..N_COLORS),
            pos: positions[n - 1],
        });
    }
    Some(scene)
}

fn other_shapes(rng: &mut impl Rng, not: Shape, k: usize) -> Vec<Shape> {
    let mut pool: Vec<Shape> = Shape::ALL.iter().copied().filter(|s| *s != not).collect();
    pool.shuffle(rng);
    pool.truncate(k);
    pool
}

/// Build one probe item. Answers cycle within each category so the suite
/// is balanced: a constant predictor scores 1/16 macro-averaged.
fn generate_qa_item(seed: u64, index: usize) -> Result<QAItem> {
    let category = QaCategory::ALL[index % 4];
    let cycle = index / 4;
    for attempt in 0..64u64 {
        let mut r = rng::from_seed(rng::child(seed, attempt));
        let item = try_qa_item(&mut r, category, cycle, seed);
        if let Some(mut item) = item {
            // the oracle must agree with the constructed answer
            if qa_oracle(&item.scene, &item.question.ids) == Some(item.answer) {
                item.image = render_without_effector(&item.scene);
                return Ok(item);
            }
        }
    }
    Err(Error::Generation(format!(
        "could not generate a probe item from seed {seed:#x}"
    )))
}

fn try_qa_item(
    r: &mut impl Rng,
    category: QaCategory,
    cycle: usize,
    seed: u64,
) -> Option<QAItem> {
    let (scene, question, answer) = match category {
        QaCategory::Color => {
            let color = cycle % N_COLORS;
            let shape = Shape::ALL[r.gen_range(0..4)];
            let mut objs = vec![(color, shape)];
            let k = r.gen_range(0..=2);
            for s in other_shapes(r, shape, k) {
                objs.push((r.gen_range(0..N_COLORS), s));
            }
            let scene = qa_scene_base(r, objs)?;
            (scene, vocab::qa_color_question(shape), super::color_answer(color))
        }
        QaCategory::Shape => {
            let shape = Shape::ALL[cycle % 4];
            let color = r.gen_range(0..N_COLORS);
            let mut objs = vec![(color, shape)];
            let n_extra = r.gen_range(0..=2);
            for _ in 0..n_extra {
                let mut c = r.gen_range(0..N_COLORS);
                while c == color {
                    c = r.gen_range(0..N_COLORS);
                }
                objs.push((c, Shape::ALL[r.gen_range(0..4)]));
            }
            let scene = qa_scene_base(r, objs)?;
            (
                scene,
                vocab::qa_shape_question(color),
                super::shape_answer(shape),
            )
        }
        QaCategory::Count => {
            let n = cycle % 4 + 1;
            let by_shape = cycle % 2 == 0;
            if by_shape {
                let shape = Shape::ALL[r.gen_range(0..4)];
                let mut objs: Vec<(usize, Shape)> =
                    (0..n).map(|_| (r.gen_range(0..N_COLORS), shape)).collect();
                let k = r.gen_range(0..=1);
                for s in other_shapes(r, shape, k) {
                    objs.push((r.gen_range(0..N_COLORS), s));
                }
                let scene = qa_scene_base(r, objs)?;
                (scene, vocab::qa_count_question(Some(shape)), count_answer(n))
            } else {
                let objs: Vec<(usize, Shape)> = (0..n)
                    .map(|_| (r.gen_range(0..N_COLORS), Shape::ALL[r.gen_range(0..4)]))
                    .collect();
                let scene = qa_scene_base(r, objs)?;
                (scene, vocab::qa_count_question(None), count_answer(n))
            }
        }
        QaCategory::SpatialRelation => {
            let e = vocab::Extremal::ALL[r.gen_range(0..4)];
            let color = cycle % N_COLORS;
            let n = r.gen_range(2..=4);
            let objs: Vec<(usize, Shape)> = (0..n)
                .map(|_| (r.gen_range(0..N_COLORS), Shape::ALL[r.gen_range(0..4)]))
                .collect();
            let mut scene = qa_scene_base(r, objs)?;
            // move the answer-colored object to the extreme of the axis
            let axis = match e {
                vocab::Extremal::Leftmost | vocab::Extremal::Rightmost => 0,
                _ => 1,
            };
            let positive = matches!(
                e,
                vocab::Extremal::Rightmost | vocab::Extremal::Bottommost
            );
            let mut idx = 0;
            for (i, o) in scene.objects.iter().enumerate() {
                let better = if positive {
                    o.pos[axis] > scene.objects[idx].pos[axis]
                } else {
                    o.pos[axis] < scene.objects[idx].pos[axis]
                };
                if better {
                    idx = i;
                }
            }
            // margin: the extreme object must stand clear on the axis
            let sorted_ok = scene.objects.iter().enumerate().all(|(i, o)| {
                i == idx
                    || if positive {
                        scene.objects[idx].pos[axis] - o.pos[axis] > 0.09
                    } else {
                        o.pos[axis] - scene.objects[idx].pos[axis] > 0.09
                    }
            });
            if !sorted_ok {
                return None;
            }
            scene.objects[idx].color = color;
            (scene, vocab::qa_spatial_question(e), super::color_answer(color))
        }
    };
    Some(QAItem {
        image: Image::new(1, 1), // rendered by the caller after the oracle check
        scene,
        question,
        answer,
        category,
        seed,
    })
}

// ── top-level generation ────────────────────────────────────────────────

/// Generate the full corpus. The same seed always produces byte-identical
/// data.
pub fn generate_dataset(
    seed: u64,
    sizes: &DataSizes,
    holdout: &HoldoutConfig,
) -> Result<Dataset> {
    holdout.validate()?;
    let gen_split = |name: &str, split: SplitTag, n: usize, ns: u8| -> Result<Vec<Episode>> {
        let base = rng::derive(seed, name);
        (0..n)
            .map(|i| generate_episode(rng::tag(rng::child(base, i as u64), ns), split, holdout))
            .collect()
    };
    let train = gen_split("episodes/train", SplitTag::InDomain, sizes.train_episodes, NS_TRAIN)?;
    let eval_in_domain = gen_split(
        "episodes/eval-in-domain",
        SplitTag::InDomain,
        sizes.eval_episodes_per_split,
        NS_EVAL,
    )?;
    let ood_unseen_object = gen_split(
        "episodes/ood-unseen-object",
        SplitTag::OodUnseenObject,
        sizes.eval_episodes_per_split,
        NS_EVAL,
    )?;
    let ood_composition = gen_split(
        "episodes/ood-composition",
        SplitTag::OodComposition,
        sizes.eval_episodes_per_split,
        NS_EVAL,
    )?;
    let ood_instruction = gen_split(
        "episodes/ood-instruction",
        SplitTag::OodInstructionVariation,
        sizes.eval_episodes_per_split,
        NS_EVAL,
    )?;

    let qa_base_train = rng::derive(seed, "qa/train");
    let qa_train = (0..sizes.qa_train)
        .map(|i| generate_qa_item(rng::tag(rng::child(qa_base_train, i as u64), NS_TRAIN), i))
        .collect::<Result<Vec<QAItem>>>()?;
    let qa_base_eval = rng::derive(seed, "qa/eval");
    let qa_eval = (0..sizes.qa_eval)
        .map(|i| generate_qa_item(rng::tag(rng::child(qa_base_eval, i as u64), NS_EVAL), i))
        .collect::<Result<Vec<QAItem>>>()?;

    Ok(Dataset {
        seed,
        sizes: *sizes,
        holdout: holdout.clone(),
        train,
        eval_in_domain,
        ood_unseen_object,
        ood_composition,
        ood_instruction,
        qa_train,
        qa_eval,
    })
}

impl Dataset {
    pub fn split(&self, tag: SplitTag) -> &[Episode] {
        match tag {
            SplitTag::InDomain => &self.eval_in_domain,
            SplitTag::OodUnseenObject => &self.ood_unseen_object,
            SplitTag::OodComposition => &self.ood_composition,
            SplitTag::OodInstructionVariation => &self.ood_instruction,
        }
    }

    fn object_pairs(episodes: &[Episode]) -> BTreeSet<(usize, usize)> {
        let mut set = BTreeSet::new();
        for ep in episodes {
            for o in &ep.scenes[0].objects {
                set.insert((o.color, o.shape.index()));
            }
        }
        set
    }

    /// Split-disjointness audits over the generated data.
    pub fn audit_splits(&self) -> Result<()> {
        let train_pairs = Self::object_pairs(&self.train);
        let unseen_pairs = Self::object_pairs(&self.ood_unseen_object);
        if !train_pairs.is_disjoint(&unseen_pairs) {
            return Err(Error::Generation(format!(
                "unseen-object split shares object types with training: {:?}",
                train_pairs.intersection(&unseen_pairs).collect::<Vec<_>>()
            )));
        }
        let train_combos: BTreeSet<_> = self
            .train
            .iter()
            .map(|e| {
                (
                    e.task.obj_color,
                    e.task.obj_shape.index(),
                    e.task.tgt_color,
                    e.task.tgt_kind.index(),
                )
            })
            .collect();
        for e in &self.ood_composition {
            let combo = (
                e.task.obj_color,
                e.task.obj_shape.index(),
                e.task.tgt_color,
                e.task.tgt_kind.index(),
            );
            if train_combos.contains(&combo) {
                return Err(Error::Generation(format!(
                    "composition split contains trained combination {combo:?}"
                )));
            }
            if self
                .holdout
                .unseen_object_pairs
                .contains(&(e.task.obj_color, e.task.obj_shape))
            {
                return Err(Error::Generation(
                    "composition split uses a held-out object type".into(),
                ));
            }
        }
        for e in &self.train {
            if vocab::is_held_out_phrasing(&e.instruction.ids) {
                return Err(Error::Generation(
                    "training episode uses held-out phrasing".into(),
                ));
            }
        }
        for e in &self.ood_instruction {
            if !vocab::is_held_out_phrasing(&e.instruction.ids) {
                return Err(Error::Generation(
                    "instruction-variation episode uses training phrasing".into(),
                ));
            }
        }
        Ok(())
    }

    /// Dynamics-consistency audit: every stored episode replays bit-exactly
    /// and every training trajectory succeeds.
    pub fn audit_replay(&self) -> Result<()> {
        let all = self
            .train
            .iter()
            .chain(&self.eval_in_domain)
            .chain(&self.ood_unseen_object)
            .chain(&self.ood_composition)
            .chain(&self.ood_instruction);
        for ep in all {
            if ep.scenes.len() != ep.actions.len() + 1 || ep.frames.len() != ep.scenes.len() {
                return Err(Error::Generation(format!(
                    "episode {:#x} has inconsistent lengths",
                    ep.seed
                )));
            }
            let mut s = ep.scenes[0].clone();
            if !render(&s).bit_eq(&ep.frames[0]) {
                return Err(Error::Generation(format!(
                    "episode {:#x} frame 0 does not replay",
                    ep.seed
                )));
            }
            for (t, a) in ep.actions.iter().enumerate() {
                s = step(&s, *a);
                if s != ep.scenes[t + 1] {
                    return Err(Error::Generation(format!(
                        "episode {:#x} scene {} does not replay",
                        ep.seed,
                        t + 1
                    )));
                }
                if !render(&s).bit_eq(&ep.frames[t + 1]) {
                    return Err(Error::Generation(format!(
                        "episode {:#x} frame {} does not replay",
                        ep.seed,
                        t + 1
                    )));
                }
            }
            if !instruction_satisfied(&s, &ep.task) {
                return Err(Error::Generation(format!(
                    "episode {:#x} does not end in success",
                    ep.seed
                )));
            }
        }
        Ok(())
    }

    /// The scripted oracle must answer every probe item.
    pub fn audit_qa(&self) -> Result<()> {
        for item in self.qa_train.iter().chain(&self.qa_eval) {
            if item.answer >= super::QA_CLASSES {
                return Err(Error::Generation("answer id out of range".into()));
            }
            match qa_oracle(&item.scene, &item.question.ids) {
                Some(a) if a == item.answer => {}
                other => {
                    return Err(Error::Generation(format!(
                        "oracle disagrees on probe item {:#x}: got {other:?}, stored {}",
                        item.seed, item.answer
                    )))
                }
            }
        }
        Ok(())
    }
}

// ── file format ─────────────────────────────────────────────────────────

#[derive(Serialize, Deserialize)]
struct EpisodeMeta {
    seed: u64,
    split: SplitTag,
    task: Task,
    instruction: Instruction,
    scene0: Scene,
    steps: usize,
}

#[derive(Serialize, Deserialize)]
struct QaMeta {
    seed: u64,
    category: QaCategory,
    answer: usize,
    question: Instruction,
    scene: Scene,
}

#[derive(Serialize, Deserialize)]
struct DatasetManifest {
    kind: String,
    seed: u64,
    sizes: DataSizes,
    holdout: HoldoutConfig,
    splits: Vec<(String, Vec<EpisodeMeta>)>,
    qa_train: Vec<QaMeta>,
    qa_eval: Vec<QaMeta>,
    blob: String,
}

fn split_files(ds: &Dataset) -> Vec<(&'static str, &[Episode])> {
    vec![
        ("train", &ds.train),
        ("eval-in-domain", &ds.eval_in_domain),
        ("ood-unseen-object", &ds.ood_unseen_object),
        ("ood-composition", &ds.ood_composition),
        ("ood-instruction", &ds.ood_instruction),
    ]
}

impl Dataset {
    /// Write `manifest.json` plus a binary blob of frame and action tensors.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        let mut entries: Vec<(String, Tensor)> = Vec::new();
        let mut splits = Vec::new();
        for (name, episodes) in split_files(self) {
            let mut metas = Vec::with_capacity(episodes.len());
            for (i, ep) in episodes.iter().enumerate() {
                metas.push(EpisodeMeta {
                    seed: ep.seed,
                    split: ep.split,
                    task: ep.task,
                    instruction: ep.instruction.clone(),
                    scene0: ep.scenes[0].clone(),
                    steps: ep.actions.len(),
                });
                let t1 = ep.frames.len();
                let mut frames = Vec::with_capacity(t1 * ep.frames[0].data.len());
                for f in &ep.frames {
                    frames.extend_from_slice(&f.data);
                }
                let (h, w) = (ep.frames[0].h, ep.frames[0].w);
                entries.push((
                    format!("e/{name}/{i}/frames"),
                    Tensor::from_f32(vec![t1, h, w, 3], frames)?,
                ));
                let actions: Vec<f64> = ep.actions.iter().flatten().copied().collect();
                entries.push((
                    format!("e/{name}/{i}/actions"),
                    Tensor::from_f64(vec![ep.actions.len(), 3], actions)?,
                ));
            }
            splits.push((name.to_string(), metas));
        }
        let qa_meta = |items: &[QAItem]| -> Vec<QaMeta> {
            items
                .iter()
                .map(|q| QaMeta {
                    seed: q.seed,
                    category: q.category,
                    answer: q.answer,
                    question: q.question.clone(),
                    scene: q.scene.clone(),
                })
                .collect()
        };
        let manifest = DatasetManifest {
            kind: "dataset".into(),
            seed: self.seed,
            sizes: self.sizes,
            holdout: self.holdout.clone(),
            splits,
            qa_train: qa_meta(&self.qa_train),
            qa_eval: qa_meta(&self.qa_eval),
            blob: "data.bin".into(),
        };
        crate::ckpt::write_named_blob(&dir.join("data.bin"), &entries)?;
        let path = dir.join("manifest.json");
        let json = serde_json::to_string(&manifest).map_err(|e| Error::Json {
            path: path.display().to_string(),
            source: e,
        })?;
        std::fs::write(&path, json).map_err(|e| Error::io(path.display().to_string(), e))
    }

    /// Load a saved corpus; intermediate scenes are recovered by replaying
    /// the deterministic dynamics from the stored initial scene.
    pub fn load(dir: &Path) -> Result<Dataset> {
        let path = dir.join("manifest.json");
        let text =
            std::fs::read_to_string(&path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::Json {
            path: path.display().to_string(),
            source: e,
        })?;
        let blob = crate::ckpt::read_named_blob(&dir.join(&manifest.blob))?;
        let mut splits_out: Vec<Vec<Episode>> = Vec::new();
        for (name, metas) in &manifest.splits {
            let mut episodes = Vec::with_capacity(metas.len());
            for (i, meta) in metas.iter().enumerate() {
                let frames_t = blob.get(&format!("e/{name}/{i}/frames")).ok_or_else(|| {
                    Error::Format {
                        path: manifest.blob.clone(),
                        msg: format!("missing frames for {name}/{i}"),
                    }
                })?;
                let actions_t = blob.get(&format!("e/{name}/{i}/actions")).ok_or_else(|| {
                    Error::Format {
                        path: manifest.blob.clone(),
                        msg: format!("missing actions for {name}/{i}"),
                    }
                })?;
                let t1 = frames_t.shape()[0];
                let (h, w) = (frames_t.shape()[1], frames_t.shape()[2]);
                let raw = frames_t.data().as_f32();
                let frames: Vec<Image> = (0..t1)
                    .map(|t| Image {
                        h,
                        w,
                        data: raw[t * h * w * 3..(t + 1) * h * w * 3].to_vec(),
                    })
                    .collect();
                let av = actions_t.to_f64_vec();
                let actions: Vec<[f64; 3]> =
                    av.chunks(3).map(|c| [c[0], c[1], c[2]]).collect();
                let mut scenes = vec![meta.scene0.clone()];
                for a in &actions {
                    scenes.push(step(scenes.last().unwrap(), *a));
                }
                episodes.push(Episode {
                    instruction: meta.instruction.clone(),
                    task: meta.task,
                    scenes,
                    frames,
                    actions,
                    split: meta.split,
                    seed: meta.seed,
                });
            }
            splits_out.push(episodes);
        }
        let mut it = splits_out.into_iter();
        let qa_items = |metas: &[QaMeta]| -> Vec<QAItem> {
            metas
                .iter()
                .map(|m| QAItem {
                    image: render_without_effector(&m.scene),
                    scene: m.scene.clone(),
                    question: m.question.clone(),
                    answer: m.answer,
                    category: m.category,
                    seed: m.seed,
                })
                .collect()
        };
        Ok(Dataset {
            seed: manifest.seed,
            sizes: manifest.sizes,
            holdout: manifest.holdout.clone(),
            train: it.next().unwrap_or_default(),
            eval_in_domain: it.next().unwrap_or_default(),
            ood_unseen_object: it.next().unwrap_or_default(),
            ood_composition: it.next().unwrap_or_default(),
            ood_instruction: it.next().unwrap_or_default(),
            qa_train: qa_items(&manifest.qa_train),
            qa_eval: qa_items(&manifest.qa_eval),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_sizes() -> DataSizes {
        DataSizes {
            train_episodes: 12,
            eval_episodes_per_split: 6,
            qa_train: 16,
            qa_eval: 16,
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let sizes = small_sizes();
        let holdout = HoldoutConfig::default();
        let a = generate_dataset(7, &sizes, &holdout).unwrap();
        let b = generate_dataset(7, &sizes, &holdout).unwrap();
        assert_eq!(a.train.len(), b.train.len());
        for (x, y) in a.train.iter().zip(&b.train) {
            assert_eq!(x.seed, y.seed);
            assert_eq!(x.actions, y.actions);
            assert!(x.frames[0].bit_eq(&y.frames[0]));
        }
        for (x, y) in a.qa_eval.iter().zip(&b.qa_eval) {
            assert_eq!(x.answer, y.answer);
            assert!(x.image.bit_eq(&y.image));
        }
    }

    #[test]
    fn audits_pass_on_generated_data() {
        let ds = generate_dataset(11, &small_sizes(), &HoldoutConfig::default()).unwrap();
        ds.audit_splits().unwrap();
        ds.audit_replay().unwrap();
        ds.audit_qa().unwrap();
    }

    #[test]
    fn qa_answers_stay_in_range_and_balanced_within_category() {
        let ds = generate_dataset(13, &small_sizes(), &HoldoutConfig::default()).unwrap();
        for q in ds.qa_train.iter().chain(&ds.qa_eval) {
            assert!(q.answer < super::super::QA_CLASSES);
        }
        // every category appears
        for cat in QaCategory::ALL {
            assert!(
                ds.qa_eval.iter().any(|q| q.category == cat),
                "missing {cat:?}"
            );
        }
    }

    #[test]
    fn empty_holdout_is_a_generation_error() {
        let holdout = HoldoutConfig {
            unseen_object_pairs: vec![],
            ..HoldoutConfig::default()
        };
        assert!(matches!(
            generate_dataset(1, &small_sizes(), &holdout),
            Err(Error::Generation(_))
        ));
    }

    #[test]
    fn save_load_round_trips_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_dataset(17, &small_sizes(), &HoldoutConfig::default()).unwrap();
        ds.save(dir.path()).unwrap();
        let back = Dataset::load(dir.path()).unwrap();
        assert_eq!(back.train.len(), ds.train.len());
        for (a, b) in ds.train.iter().zip(&back.train) {
            assert_eq!(a.actions, b.actions);
            assert_eq!(a.scenes, b.scenes);
            for (fa, fb) in a.frames.iter().zip(&b.frames) {
                assert!(fa.bit_eq(fb));
            }
            assert_eq!(a.instruction, b.instruction);
        }
        back.audit_replay().unwrap();
        for (a, b) in ds.qa_eval.iter().zip(&back.qa_eval) {
            assert!(a.image.bit_eq(&b.image));
            assert_eq!(a.answer, b.answer);
        }
    }
}
