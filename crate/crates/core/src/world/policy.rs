//! Kinematic world rules and the scripted expert.
//!
//! Actions are (dx, dy, gripper) with motion in cells, clamped to one cell
//! per axis per step. The gripper thresholds at 0.5; a grasp happens on the
//! open-to-closed transition when an object is within the pick radius, and
//! opening releases the held object in place.

use super::{Scene, Task};
use crate::error::{Error, Result};

/// One workspace cell on the unit square (8x8 cells).
pub const CELL: f64 = 0.125;
/// Grasp reach, in workspace units (1.5 cells).
pub const PICK_RADIUS: f64 = 1.5 * CELL;
/// Placement tolerance for the goal predicate (1 cell, max-norm).
pub const GOAL_TOL: f64 = CELL;
/// Scripted trajectories never exceed this many steps.
pub const MAX_EXPERT_STEPS: usize = 24;

/// Advance the world by one action row.
pub fn step(scene: &Scene, action: [f64; 3]) -> Scene {
    let mut next = scene.clone();
    let dx = action[0].clamp(-1.0, 1.0) * CELL;
    let dy = action[1].clamp(-1.0, 1.0) * CELL;
    next.effector.pos[0] = (next.effector.pos[0] + dx).clamp(0.0, 1.0);
    next.effector.pos[1] = (next.effector.pos[1] + dy).clamp(0.0, 1.0);
    let close = action[2] > 0.5;
    let was_closed = next.effector.closed;
    next.effector.closed = close;

    if close && !was_closed && next.held_index().is_none() {
        // grasp the nearest object within reach
        let e = next.effector.pos;
        let mut best: Option<(usize, f64)> = None;
        for (i, o) in next.objects.iter().enumerate() {
            let d = ((o.pos[0] - e[0]).powi(2) + (o.pos[1] - e[1]).powi(2)).sqrt();
            if d <= PICK_RADIUS {
                match best {
                    Some((_, bd)) if bd <= d => {}
                    _ => best = Some((i, d)),
                }
            }
        }
        if let Some((i, _)) = best {
            next.objects[i].held = true;
        }
    } else if !close && was_closed {
        if let Some(i) = next.held_index() {
            next.objects[i].held = false;
        }
    }
    if let Some(i) = next.held_index() {
        next.objects[i].pos = next.effector.pos;
    }
    next
}

/// Goal predicate: the instructed object is released inside the instructed
/// target region (max-norm within one cell of its center).
pub fn instruction_satisfied(scene: &Scene, task: &Task) -> bool {
    let (Some(oi), Some(ti)) = (
        scene.find_object(task.obj_color, task.obj_shape),
        scene.find_target(task.tgt_color, task.tgt_kind),
    ) else {
        return false;
    };
    let o = &scene.objects[oi];
    let t = &scene.targets[ti];
    !o.held
        && (o.pos[0] - t.pos[0]).abs() <= GOAL_TOL
        && (o.pos[1] - t.pos[1]).abs() <= GOAL_TOL
}

fn axis_step(from: f64, to: f64) -> f64 {
    // per-axis move toward the goal, in cells, clamped to one cell
    ((to - from) / CELL).clamp(-1.0, 1.0)
}

const APPROACH_TOL: f64 = 0.25 * CELL;

/// Scripted go-to / grasp / go-to / release trajectory that succeeds under
/// [`step`]. Returns the action rows; the caller replays them for frames.
pub fn expert_policy(scene: &Scene, task: &Task) -> Result<Vec<[f64; 3]>> {
    let oi = scene
        .find_object(task.obj_color, task.obj_shape)
        .ok_or_else(|| Error::Generation("instructed object missing or ambiguous".into()))?;
    let _ti = scene
        .find_target(task.tgt_color, task.tgt_kind)
        .ok_or_else(|| Error::Generation("instructed target missing or ambiguous".into()))?;

    let mut actions = Vec::new();
    let mut s = scene.clone();
    if instruction_satisfied(&s, task) {
        // already solved; a single no-op keeps the episode well-formed
        actions.push([0.0, 0.0, 0.0]);
        return Ok(actions);
    }

    let mut advance = |s: &mut Scene, a: [f64; 3], actions: &mut Vec<[f64; 3]>| {
        actions.push(a);
        *s = step(s, a);
    };

    // leg 1: reach the object
    for _ in 0..MAX_EXPERT_STEPS {
        let o = s.objects[oi].pos;
        let e = s.effector.pos;
        if (o[0] - e[0]).abs() <= APPROACH_TOL && (o[1] - e[1]).abs() <= APPROACH_TOL {
            break;
        }
        let a = [axis_step(e[0], o[0]), axis_step(e[1], o[1]), 0.0];
        advance(&mut s, a, &mut actions);
    }
    // grasp
    advance(&mut s, [0.0, 0.0, 1.0], &mut actions);
    if s.held_index() != Some(oi) {
        return Err(Error::Generation("expert failed to grasp".into()));
    }
    // leg 2: carry to the target
    let ti = s
        .find_target(task.tgt_color, task.tgt_kind)
        .expect("target checked above");
    for _ in 0..MAX_EXPERT_STEPS {
        let t = s.targets[ti].pos;
        let e = s.effector.pos;
        if (t[0] - e[0]).abs() <= APPROACH_TOL && (t[1] - e[1]).abs() <= APPROACH_TOL {
            break;
        }
        let a = [axis_step(e[0], t[0]), axis_step(e[1], t[1]), 1.0];
        advance(&mut s, a, &mut actions);
    }
    // release
    advance(&mut s, [0.0, 0.0, 0.0], &mut actions);

    if !instruction_satisfied(&s, task) {
        return Err(Error::Generation("expert trajectory did not succeed".into()));
    }
    if actions.len() > MAX_EXPERT_STEPS {
        return Err(Error::Generation(format!(
            "expert trajectory of {} steps exceeds the bound",
            actions.len()
        )));
    }
    Ok(actions)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{Effector, SceneObject, Shape, TargetKind, TargetRegion};

    fn pick_scene() -> (Scene, Task) {
        let scene = Scene {
            objects: vec![SceneObject {
                shape: Shape::Circle,
                color: 0,
                pos: [0.25, 0.25],
                held: false,
            }],
            targets: vec![TargetRegion {
                kind: TargetKind::Plate,
                color: 2,
                pos: [0.75, 0.75],
            }],
            effector: Effector {
                pos: [0.5, 0.125],
                closed: false,
            },
        };
        let task = Task {
            obj_color: 0,
            obj_shape: Shape::Circle,
            tgt_color: 2,
            tgt_kind: TargetKind::Plate,
        };
        (scene, task)
    }

    #[test]
    fn zero_action_is_identity() {
        let (scene, _) = pick_scene();
        assert_eq!(step(&scene, [0.0, 0.0, 0.0]), scene);
    }

    #[test]
    fn closing_over_an_object_grasps_it() {
        let (mut scene, _) = pick_scene();
        scene.effector.pos = [0.26, 0.24];
        let next = step(&scene, [0.0, 0.0, 1.0]);
        assert_eq!(next.held_index(), Some(0));
        // held object tracks the effector
        let carried = step(&next, [1.0, 0.0, 1.0]);
        assert_eq!(carried.objects[0].pos, carried.effector.pos);
        // opening releases in place
        let released = step(&carried, [0.0, 0.0, 0.0]);
        assert_eq!(released.held_index(), None);
    }

    #[test]
    fn out_of_reach_close_grasps_nothing() {
        let (scene, _) = pick_scene();
        let next = step(&scene, [0.0, 0.0, 1.0]);
        assert_eq!(next.held_index(), None);
    }

    #[test]
    fn motion_is_clamped_to_one_cell_and_bounds() {
        let (mut scene, _) = pick_scene();
        scene.effector.pos = [0.0, 0.0];
        let next = step(&scene, [-5.0, 9.0, 0.0]);
        assert_eq!(next.effector.pos[0], 0.0);
        assert!((next.effector.pos[1] - CELL).abs() < 1e-12);
    }

    #[test]
    fn expert_succeeds_and_stays_bounded() {
        let (scene, task) = pick_scene();
        let actions = expert_policy(&scene, &task).unwrap();
        assert!(actions.len() <= MAX_EXPERT_STEPS);
        let mut s = scene;
        for a in &actions {
            s = step(&s, *a);
        }
        assert!(instruction_satisfied(&s, &task));
    }

    #[test]
    fn solved_scene_gives_near_empty_trajectory() {
        let (mut scene, task) = pick_scene();
        scene.objects[0].pos = [0.75, 0.75];
        let actions = expert_policy(&scene, &task).unwrap();
        assert_eq!(actions.len(), 1);
        let s = step(&scene, actions[0]);
        assert!(instruction_satisfied(&s, &task));
    }

    #[test]
    fn replay_is_deterministic() {
        let (scene, task) = pick_scene();
        let actions = expert_policy(&scene, &task).unwrap();
        let run = |scene: &Scene| {
            let mut s = scene.clone();
            let mut frames = Vec::new();
            for a in &actions {
                s = step(&s, *a);
                frames.push(super::super::render(&s));
            }
            frames
        };
        let a = run(&scene);
        let b = run(&scene);
        for (x, y) in a.iter().zip(&b) {
            assert!(x.bit_eq(y));
        }
    }
}
