//! Deterministic rasterization at 24x24: no anti-aliasing, fixed draw
//! order (targets, loose objects, held object, effector), so one scene
//! always produces bit-identical pixels.

use super::{Scene, SceneObject, Shape, TargetKind, PALETTE};
use crate::encode::Image;

pub const IMG: usize = 24;
const BACKGROUND: [f32; 3] = [0.08, 0.08, 0.08];
const EFFECTOR_COLOR: [f32; 3] = [1.0, 1.0, 1.0];

/// Glyph footprints. Objects are 5x5, targets 7x7 outlines, the effector
/// 3x3.
const OBJ_HALF: i64 = 2;
const TGT_HALF: i64 = 3;
const EFF_HALF: i64 = 1;

#[inline]
fn center_px(p: f64) -> i64 {
    // continuous [0,1] to pixel centers, clamped into the frame
    ((p * IMG as f64).floor() as i64).clamp(0, IMG as i64 - 1)
}

fn put(img: &mut Image, y: i64, x: i64, rgb: [f32; 3]) {
    if (0..IMG as i64).contains(&y) && (0..IMG as i64).contains(&x) {
        img.set(y as usize, x as usize, rgb);
    }
}

fn object_mask(shape: Shape, dy: i64, dx: i64) -> bool {
    // offsets in -2..=2
    match shape {
        Shape::Square => true,
        Shape::Circle => dy * dy + dx * dx <= 5,
        Shape::Triangle => {
            // apex up: row -2 narrow, row +2 full
            let width = dy + 2; // 0..4 allowed half-width grows with row
            dx.abs() <= (width + 1) / 2
        }
        Shape::Bar => dy.abs() <= 1 && dx.abs() <= 2 && dy != -1,
    }
}

fn draw_object(img: &mut Image, o: &SceneObject) {
    let cy = center_px(o.pos[1]);
    let cx = center_px(o.pos[0]);
    let rgb = PALETTE[o.color];
    for dy in -OBJ_HALF..=OBJ_HALF {
        for dx in -OBJ_HALF..=OBJ_HALF {
            if object_mask(o.shape, dy, dx) {
                put(img, cy + dy, cx + dx, rgb);
            }
        }
    }
}

fn draw_target(img: &mut Image, kind: TargetKind, color: usize, pos: [f64; 2]) {
    let cy = center_px(pos[1]);
    let cx = center_px(pos[0]);
    let rgb = PALETTE[color];
    for dy in -TGT_HALF..=TGT_HALF {
        for dx in -TGT_HALF..=TGT_HALF {
            let on = match kind {
                TargetKind::Box => dy.abs() == TGT_HALF || dx.abs() == TGT_HALF,
                TargetKind::Plate => {
                    let r2 = dy * dy + dx * dx;
                    (7..=10).contains(&r2)
                }
            };
            if on {
                put(img, cy + dy, cx + dx, rgb);
            }
        }
    }
}

fn draw_effector(img: &mut Image, pos: [f64; 2], closed: bool) {
    let cy = center_px(pos[1]);
    let cx = center_px(pos[0]);
    for dy in -EFF_HALF..=EFF_HALF {
        for dx in -EFF_HALF..=EFF_HALF {
            // open gripper renders as a cross, closed as a filled block
            let on = closed || dy == 0 || dx == 0;
            if on {
                put(img, cy + dy, cx + dx, EFFECTOR_COLOR);
            }
        }
    }
}

/// Rasterize a scene. Same scene, same pixels.
pub fn render(scene: &Scene) -> Image {
    render_with(scene, true)
}

/// Probe-suite rendering: scenes only, no effector marker. The probe world
/// never shows a manipulator, which is exactly what makes its statistics
/// differ from embodied frames.
pub fn render_without_effector(scene: &Scene) -> Image {
    render_with(scene, false)
}

fn render_with(scene: &Scene, with_effector: bool) -> Image {
    let mut img = Image::filled(IMG, IMG, BACKGROUND);
    for t in &scene.targets {
        draw_target(&mut img, t.kind, t.color, t.pos);
    }
    for o in scene.objects.iter().filter(|o| !o.held) {
        draw_object(&mut img, o);
    }
    for o in scene.objects.iter().filter(|o| o.held) {
        draw_object(&mut img, o);
    }
    if with_effector {
        draw_effector(&mut img, scene.effector.pos, scene.effector.closed);
    }
    img
}

/// Pixel bounding box (y0, x0, y1, x1), inclusive, of an object glyph.
pub fn object_bbox(o: &SceneObject) -> (usize, usize, usize, usize) {
    let cy = center_px(o.pos[1]);
    let cx = center_px(o.pos[0]);
    clamp_box(cy, cx, OBJ_HALF)
}

/// Pixel bounding box of the effector marker.
pub fn effector_bbox(scene: &Scene) -> (usize, usize, usize, usize) {
    let cy = center_px(scene.effector.pos[1]);
    let cx = center_px(scene.effector.pos[0]);
    clamp_box(cy, cx, EFF_HALF)
}

fn clamp_box(cy: i64, cx: i64, half: i64) -> (usize, usize, usize, usize) {
    let lim = IMG as i64 - 1;
    (
        (cy - half).clamp(0, lim) as usize,
        (cx - half).clamp(0, lim) as usize,
        (cy + half).clamp(0, lim) as usize,
        (cx + half).clamp(0, lim) as usize,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{Effector, TargetRegion};

    #[test]
    fn empty_scene_is_uniform_background_except_effector() {
        let scene = Scene {
            objects: vec![],
            targets: vec![],
            effector: Effector {
                pos: [0.5, 0.5],
                closed: false,
            },
        };
        let img = render(&scene);
        let (y0, x0, y1, x1) = effector_bbox(&scene);
        for y in 0..IMG {
            for x in 0..IMG {
                let inside = (y0..=y1).contains(&y) && (x0..=x1).contains(&x);
                if !inside {
                    assert_eq!(img.get(y, x), BACKGROUND, "pixel ({y},{x})");
                }
            }
        }
    }

    #[test]
    fn rendering_is_bit_deterministic() {
        let scene = Scene {
            objects: vec![SceneObject {
                shape: Shape::Triangle,
                color: 3,
                pos: [0.3, 0.7],
                held: false,
            }],
            targets: vec![TargetRegion {
                kind: TargetKind::Plate,
                color: 5,
                pos: [0.75, 0.25],
            }],
            effector: Effector {
                pos: [0.1, 0.1],
                closed: true,
            },
        };
        assert!(render(&scene).bit_eq(&render(&scene)));
    }

    #[test]
    fn moving_an_object_touches_only_the_box_union() {
        let base = Scene {
            objects: vec![
                SceneObject {
                    shape: Shape::Circle,
                    color: 0,
                    pos: [0.3, 0.3],
                    held: false,
                },
                SceneObject {
                    shape: Shape::Square,
                    color: 2,
                    pos: [0.8, 0.8],
                    held: false,
                },
            ],
            targets: vec![],
            effector: Effector {
                pos: [0.1, 0.9],
                closed: false,
            },
        };
        let mut moved = base.clone();
        moved.objects[0].pos[0] += super::super::policy::CELL; // one cell right
        let a = render(&base);
        let b = render(&moved);
        let (ay0, ax0, ay1, ax1) = object_bbox(&base.objects[0]);
        let (by0, bx0, by1, bx1) = object_bbox(&moved.objects[0]);
        let union = |y: usize, x: usize| {
            ((ay0..=ay1).contains(&y) && (ax0..=ax1).contains(&x))
                || ((by0..=by1).contains(&y) && (bx0..=bx1).contains(&x))
        };
        for y in 0..IMG {
            for x in 0..IMG {
                if !union(y, x) {
                    assert_eq!(a.get(y, x), b.get(y, x), "pixel ({y},{x}) changed");
                }
            }
        }
        // and the move is visible
        assert!(!a.bit_eq(&b));
    }

    #[test]
    fn shapes_have_distinct_glyphs() {
        let imgs: Vec<Image> = Shape::ALL
            .iter()
            .map(|s| {
                render(&Scene {
                    objects: vec![SceneObject {
                        shape: *s,
                        color: 0,
                        pos: [0.5, 0.5],
                        held: false,
                    }],
                    targets: vec![],
                    effector: Effector {
                        pos: [0.05, 0.05],
                        closed: false,
                    },
                })
            })
            .collect();
        for i in 0..imgs.len() {
            for j in i + 1..imgs.len() {
                assert!(!imgs[i].bit_eq(&imgs[j]), "glyphs {i} and {j} identical");
            }
        }
    }

    #[test]
    fn gripper_state_is_visible() {
        let mut scene = Scene::empty();
        scene.effector.pos = [0.5, 0.5];
        let open = render(&scene);
        scene.effector.closed = true;
        let closed = render(&scene);
        assert!(!open.bit_eq(&closed));
    }
}
