//! Attention-map extraction and rendering: mid-layer action-to-visual
//! attention averaged over heads and action tokens, reshaped onto the
//! pathway's token grid, bicubically upsampled, colormapped and overlaid on
//! the source frame as a binary PPM.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encode::Image;
use crate::error::{Error, Result};
use crate::layout::{Grid, Segment, SequenceLayout, TokenKind};
use crate::model::ForwardTrace;
use crate::tensor::Tensor;

/// Which visual pathway a map describes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Pathway {
    Semantic,
    Dorsal,
}

impl Pathway {
    pub fn name(self) -> &'static str {
        match self {
            Pathway::Semantic => "semantic",
            Pathway::Dorsal => "dorsal",
        }
    }

    fn kind(self) -> TokenKind {
        match self {
            Pathway::Semantic => TokenKind::SemVision,
            Pathway::Dorsal => TokenKind::DorVision,
        }
    }
}

/// Normalized attention mass over one pathway's token grid.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AttentionMap {
    pub pathway: Pathway,
    pub grid: Grid,
    pub values: Vec<f64>,
    /// 1-indexed source layer.
    pub layer: usize,
}

impl AttentionMap {
    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }
}

/// Token grid of a vision segment; the reshape never guesses a
/// factorization.
pub fn grid_of(segment: &Segment) -> Result<Grid> {
    segment.grid.ok_or_else(|| {
        Error::usage(format!(
            "segment of kind {:?} carries no grid metadata",
            segment.kind
        ))
    })
}

/// Extracted maps for the pathways present in a layout.
pub struct ExtractedMaps {
    pub semantic: AttentionMap,
    pub dorsal: Option<AttentionMap>,
}

/// Pull the action-to-visual attention out of a retained trace: mid-layer
/// weights, rows restricted to Action queries, columns to the pathway's
/// keys, averaged over heads and rows, renormalized to sum one.
pub fn extract(trace: &ForwardTrace) -> Result<ExtractedMaps> {
    let attn = trace
        .attn
        .as_ref()
        .ok_or_else(|| Error::usage("trace was produced without attention retention"))?;
    if attn.is_empty() {
        return Err(Error::usage("trace has no attention layers"));
    }
    let mid = attn.len().div_ceil(2); // 1-indexed mid layer
    let weights = &attn[mid - 1];
    let layout = &trace.layout;
    let semantic = extract_pathway(weights, layout, Pathway::Semantic, mid)?;
    let dorsal = match layout.segment_of(TokenKind::DorVision) {
        Some(_) => Some(extract_pathway(weights, layout, Pathway::Dorsal, mid)?),
        None => None,
    };
    Ok(ExtractedMaps { semantic, dorsal })
}

fn extract_pathway(
    weights: &Tensor,
    layout: &SequenceLayout,
    pathway: Pathway,
    layer: usize,
) -> Result<AttentionMap> {
    let action = layout
        .range_of(TokenKind::Action)
        .ok_or_else(|| Error::usage("layout has no Action segment to read queries from"))?;
    let segment = layout
        .segment_of(pathway.kind())
        .ok_or_else(|| Error::usage(format!("layout has no {} segment", pathway.name())))?;
    let grid = grid_of(segment)?;
    let cols = layout
        .range_of(pathway.kind())
        .expect("segment_of succeeded");
    let shape = weights.shape();
    let (h, t) = (shape[0], shape[1]);
    let w = weights.to_f64_vec();
    let mut values = vec![0.0; grid.len()];
    for hh in 0..h {
        for q in action.clone() {
            for (ci, c) in cols.clone().enumerate() {
                values[ci] += w[(hh * t + q) * t + c];
            }
        }
    }
    let norm: f64 = values.iter().sum();
    if norm <= 0.0 {
        return Err(Error::Domain(format!(
            "no attention mass reaches the {} pathway",
            pathway.name()
        )));
    }
    for v in values.iter_mut() {
        *v /= norm;
    }
    Ok(AttentionMap {
        pathway,
        grid,
        values,
        layer,
    })
}

/// Average maps across control steps of a rollout, then renormalize.
pub fn average_maps(maps: &[AttentionMap]) -> Result<AttentionMap> {
    let first = maps
        .first()
        .ok_or_else(|| Error::usage("no attention maps to average"))?;
    let mut values = vec![0.0; first.values.len()];
    for m in maps {
        if m.grid != first.grid || m.pathway != first.pathway {
            return Err(Error::usage("cannot average maps over mismatched grids"));
        }
        for (a, v) in values.iter_mut().zip(&m.values) {
            *a += v;
        }
    }
    let norm: f64 = values.iter().sum();
    for v in values.iter_mut() {
        *v /= norm;
    }
    Ok(AttentionMap {
        pathway: first.pathway,
        grid: first.grid,
        values,
        layer: first.layer,
    })
}

// ── bicubic resampling ─────────────────────────────────────────────────

fn catmull_rom(x: f64) -> f64 {
    // the a = -0.5 cubic kernel
    let a = -0.5;
    let x = x.abs();
    if x < 1.0 {
        (a + 2.0) * x.powi(3) - (a + 3.0) * x * x + 1.0
    } else if x < 2.0 {
        a * x.powi(3) - 5.0 * a * x * x + 8.0 * a * x - 4.0 * a
    } else {
        0.0
    }
}

/// Separable Catmull-Rom bicubic resampling with edge-clamped sampling and
/// half-pixel source mapping.
pub fn upsample_bicubic(src: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Result<Vec<f64>> {
    if src.len() != h * w || h == 0 || w == 0 || oh < h || ow < w {
        return Err(Error::usage(format!(
            "bicubic upsample wants output >= {h}x{w} grid, got {oh}x{ow}"
        )));
    }
    // horizontal pass: h x w -> h x ow
    let mut mid = vec![0.0; h * ow];
    for ox in 0..ow {
        let sx = (ox as f64 + 0.5) * w as f64 / ow as f64 - 0.5;
        let x0 = sx.floor() as isize;
        let wx: Vec<(usize, f64)> = (-1..=2)
            .map(|dx| {
                let xx = (x0 + dx).clamp(0, w as isize - 1) as usize;
                (xx, catmull_rom(sx - (x0 + dx) as f64))
            })
            .collect();
        for y in 0..h {
            let mut acc = 0.0;
            for (xx, k) in &wx {
                acc += src[y * w + xx] * k;
            }
            mid[y * ow + ox] = acc;
        }
    }
    // vertical pass: h x ow -> oh x ow
    let mut out = vec![0.0; oh * ow];
    for oy in 0..oh {
        let sy = (oy as f64 + 0.5) * h as f64 / oh as f64 - 0.5;
        let y0 = sy.floor() as isize;
        let wy: Vec<(usize, f64)> = (-1..=2)
            .map(|dy| {
                let yy = (y0 + dy).clamp(0, h as isize - 1) as usize;
                (yy, catmull_rom(sy - (y0 + dy) as f64))
            })
            .collect();
        for ox in 0..ow {
            let mut acc = 0.0;
            for (yy, k) in &wy {
                acc += mid[yy * ow + ox] * k;
            }
            out[oy * ow + ox] = acc;
        }
    }
    Ok(out)
}

/// Min-max normalize to [0, 1]; a constant field maps to zeros.
pub fn normalize_field(field: &mut [f64]) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for v in field.iter() {
        lo = lo.min(*v);
        hi = hi.max(*v);
    }
    let span = hi - lo;
    if span <= 0.0 {
        for v in field.iter_mut() {
            *v = 0.0;
        }
    } else {
        for v in field.iter_mut() {
            *v = (*v - lo) / span;
        }
    }
}

// ── colormap and overlay ───────────────────────────────────────────────

/// Piecewise-linear node table: deep blue, blue, cyan, green, yellow, red,
/// dark red. The center node pins jet(0.5) to pure green.
const JET_NODES: [(f64, [f64; 3]); 7] = [
    (0.0, [0.0, 0.0, 0.5]),
    (0.125, [0.0, 0.0, 1.0]),
    (0.375, [0.0, 1.0, 1.0]),
    (0.5, [0.0, 1.0, 0.0]),
    (0.625, [1.0, 1.0, 0.0]),
    (0.875, [1.0, 0.0, 0.0]),
    (1.0, [0.5, 0.0, 0.0]),
];

/// JET colormap over [0, 1].
pub fn jet(x: f64) -> [f64; 3] {
    let x = x.clamp(0.0, 1.0);
    for win in JET_NODES.windows(2) {
        let (x0, c0) = win[0];
        let (x1, c1) = win[1];
        if x <= x1 {
            let t = if x1 > x0 { (x - x0) / (x1 - x0) } else { 0.0 };
            return [
                c0[0] + t * (c1[0] - c0[0]),
                c0[1] + t * (c1[1] - c0[1]),
                c0[2] + t * (c1[2] - c0[2]),
            ];
        }
    }
    JET_NODES[JET_NODES.len() - 1].1
}

fn quantize(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Blend a [0,1] heat field onto a frame: out = (1-alpha) frame + alpha
/// jet(field), quantized to 8 bits.
pub fn overlay(field: &[f64], frame: &Image, alpha: f64) -> Result<Vec<u8>> {
    if field.len() != frame.h * frame.w {
        return Err(Error::Shape {
            op: "overlay",
            lhs: vec![field.len()],
            rhs: vec![frame.h, frame.w],
        });
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::usage(format!("alpha must be in [0,1], got {alpha}")));
    }
    let mut rgb = Vec::with_capacity(field.len() * 3);
    for (i, v) in field.iter().enumerate() {
        let j = jet(*v);
        let px = frame.get(i / frame.w, i % frame.w);
        for c in 0..3 {
            rgb.push(quantize((1.0 - alpha) * f64::from(px[c]) + alpha * j[c]));
        }
    }
    Ok(rgb)
}

/// Binary PPM (P6, maxval 255) bytes for an RGB buffer.
pub fn ppm_bytes(w: usize, h: usize, rgb: &[u8]) -> Vec<u8> {
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(rgb);
    out
}

/// Overlay and write a P6 PPM file.
pub fn overlay_and_write(field: &[f64], frame: &Image, alpha: f64, path: &Path) -> Result<()> {
    let rgb = overlay(field, frame, alpha)?;
    let bytes = ppm_bytes(frame.w, frame.h, &rgb);
    let mut f =
        std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    f.write_all(&bytes)
        .map_err(|e| Error::io(path.display().to_string(), e))
}

/// Full pipeline for one map: upsample to the frame size, normalize,
/// overlay, write.
pub fn render_map(map: &AttentionMap, frame: &Image, alpha: f64, path: &Path) -> Result<()> {
    let mut field = upsample_bicubic(
        &map.values,
        map.grid.rows,
        map.grid.cols,
        frame.h,
        frame.w,
    )?;
    normalize_field(&mut field);
    overlay_and_write(&field, frame, alpha, path)
}

/// Fraction of a map's mass inside a pixel box (inclusive bounds), using
/// exact cell-box overlap areas.
pub fn box_mass(
    map: &AttentionMap,
    img_h: usize,
    img_w: usize,
    bbox: (usize, usize, usize, usize),
) -> f64 {
    let (y0, x0, y1, x1) = bbox;
    let (by0, bx0, by1, bx1) = (y0 as f64, x0 as f64, y1 as f64 + 1.0, x1 as f64 + 1.0);
    let ch = img_h as f64 / map.grid.rows as f64;
    let cw = img_w as f64 / map.grid.cols as f64;
    let mut mass = 0.0;
    for r in 0..map.grid.rows {
        for c in 0..map.grid.cols {
            let (cy0, cy1) = (r as f64 * ch, (r + 1) as f64 * ch);
            let (cx0, cx1) = (c as f64 * cw, (c + 1) as f64 * cw);
            let oy = (cy1.min(by1) - cy0.max(by0)).max(0.0);
            let ox = (cx1.min(bx1) - cx0.max(bx0)).max(0.0);
            let frac = (oy * ox) / (ch * cw);
            mass += map.values[r * map.grid.cols + c] * frac;
        }
    }
    mass
}

// ── trace files ────────────────────────────────────────────────────────

#[derive(Serialize, Deserialize)]
struct TraceMeta {
    kind: String,
    layout: SequenceLayout,
    layers: usize,
    blob: String,
}

/// Serialize a retained trace as manifest + named tensor blob.
pub fn save_trace(dir: &Path, name: &str, trace: &ForwardTrace) -> Result<()> {
    let attn = trace
        .attn
        .as_ref()
        .ok_or_else(|| Error::usage("cannot serialize a trace without retained attention"))?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let mut entries = vec![
        ("hidden".to_string(), trace.hiddens.clone()),
        ("layout".to_string(), trace.layout.to_tensor()),
    ];
    for (i, w) in attn.iter().enumerate() {
        entries.push((format!("attn.{i}"), w.clone()));
    }
    let bin = format!("{name}.bin");
    crate::ckpt::write_named_blob(&dir.join(&bin), &entries)?;
    let meta = TraceMeta {
        kind: "trace".into(),
        layout: trace.layout.clone(),
        layers: attn.len(),
        blob: bin,
    };
    let path = dir.join(format!("{name}.json"));
    let json = serde_json::to_string_pretty(&meta).map_err(|e| Error::Json {
        path: path.display().to_string(),
        source: e,
    })?;
    std::fs::write(&path, json).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load_trace(json_path: &Path) -> Result<ForwardTrace> {
    let text =
        std::fs::read_to_string(json_path).map_err(|e| Error::io(json_path.display().to_string(), e))?;
    let meta: TraceMeta = serde_json::from_str(&text).map_err(|e| Error::Json {
        path: json_path.display().to_string(),
        source: e,
    })?;
    let bin = json_path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(&meta.blob);
    let tensors = crate::ckpt::read_named_blob(&bin)?;
    let hiddens = tensors
        .get("hidden")
        .ok_or_else(|| Error::Format {
            path: bin.display().to_string(),
            msg: "missing hidden tensor".into(),
        })?
        .clone();
    let mut attn = Vec::new();
    for i in 0..meta.layers {
        attn.push(
            tensors
                .get(&format!("attn.{i}"))
                .ok_or_else(|| Error::Format {
                    path: bin.display().to_string(),
                    msg: format!("missing attn.{i}"),
                })?
                .clone(),
        );
    }
    Ok(ForwardTrace {
        hiddens,
        attn: Some(attn),
        layout: meta.layout,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jet_hits_the_pinned_colors() {
        assert_eq!(jet(0.0), [0.0, 0.0, 0.5]);
        let g = jet(0.5);
        assert_eq!(
            [quantize(g[0]), quantize(g[1]), quantize(g[2])],
            [0, 255, 0],
            "jet(0.5) must quantize to pure green"
        );
        assert_eq!(jet(1.0), [0.5, 0.0, 0.0]);
        assert_eq!(jet(0.125), [0.0, 0.0, 1.0]);
        assert_eq!(jet(0.375), [0.0, 1.0, 1.0]);
        assert_eq!(jet(0.875), [1.0, 0.0, 0.0]);
    }

    #[test]
    fn bicubic_identity_and_constant() {
        let src = vec![0.1, 0.7, 0.4, 0.9, 0.2, 0.5];
        let same = upsample_bicubic(&src, 2, 3, 2, 3).unwrap();
        for (a, b) in same.iter().zip(&src) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
        let constant = vec![0.25; 4];
        let up = upsample_bicubic(&constant, 2, 2, 7, 5).unwrap();
        for v in &up {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn normalize_maps_constants_to_zero() {
        let mut f = vec![0.3; 6];
        normalize_field(&mut f);
        assert!(f.iter().all(|v| *v == 0.0));
        let mut f = vec![1.0, 3.0, 2.0];
        normalize_field(&mut f);
        assert_eq!(f, vec![0.0, 1.0, 0.5]);
    }

    #[test]
    fn overlay_alpha_zero_reproduces_the_frame() {
        let mut frame = Image::new(2, 2);
        frame.set(0, 0, [0.2, 0.4, 0.6]);
        frame.set(1, 1, [1.0, 0.0, 0.5]);
        let field = vec![0.9, 0.1, 0.4, 0.7];
        let rgb = overlay(&field, &frame, 0.0).unwrap();
        for y in 0..2 {
            for x in 0..2 {
                let px = frame.get(y, x);
                for c in 0..3 {
                    assert_eq!(rgb[(y * 2 + x) * 3 + c], quantize(f64::from(px[c])));
                }
            }
        }
    }

    #[test]
    fn zero_field_tints_uniform_deep_blue() {
        let frame = Image::filled(2, 2, [0.0, 0.0, 0.0]);
        let rgb = overlay(&[0.0; 4], &frame, 1.0).unwrap();
        for px in rgb.chunks(3) {
            assert_eq!(px, [0, 0, 128]);
        }
    }

    #[test]
    fn ppm_header_is_exact() {
        let bytes = ppm_bytes(3, 2, &[7u8; 18]);
        assert!(bytes.starts_with(b"P6\n3 2\n255\n"));
        assert_eq!(bytes.len(), 11 + 18);
    }

    #[test]
    fn box_mass_is_exact_on_aligned_cells() {
        let map = AttentionMap {
            pathway: Pathway::Dorsal,
            grid: Grid::new(2, 2),
            values: vec![0.4, 0.3, 0.2, 0.1],
            layer: 1,
        };
        // 8x8 image, cells are 4x4 pixels; the top-left cell exactly
        let m = box_mass(&map, 8, 8, (0, 0, 3, 3));
        assert!((m - 0.4).abs() < 1e-12);
        // a 2x2 box straddling the center picks up a quarter of each cell's
        // overlap region
        let m = box_mass(&map, 8, 8, (3, 3, 4, 4));
        let want = 0.4 / 16.0 + 0.3 / 16.0 + 0.2 / 16.0 + 0.1 / 16.0;
        assert!((m - want).abs() < 1e-12);
    }

    #[test]
    fn grid_of_requires_metadata() {
        let seg = Segment {
            kind: TokenKind::DorQuery,
            length: 9,
            grid: None,
            source_view: None,
        };
        assert!(grid_of(&seg).is_err());
        let seg = Segment {
            kind: TokenKind::SemVision,
            length: 252,
            grid: Some(Grid::new(14, 18)),
            source_view: Some(0),
        };
        assert_eq!(grid_of(&seg).unwrap(), Grid::new(14, 18));
    }
}
