//! Shared test oracles, kept independent of the library's compute paths:
//! central finite differences, a dense attention reference, a brute-force
//! mask-rule evaluator, and a direct-convolution bicubic reference.

#![allow(dead_code)]

use uam_core::{Dtype, Graph, Tensor, Var};

/// Max relative error with the agreed denominator floor.
pub fn rel_err(got: f64, want: f64) -> f64 {
    (got - want).abs() / want.abs().max(1e-8)
}

/// Central finite differences of `f` at `x` with the given step.
pub fn finite_diff<F: FnMut(&[f64]) -> f64>(mut f: F, x: &[f64], step: f64) -> Vec<f64> {
    let mut g = Vec::with_capacity(x.len());
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        let orig = xp[i];
        xp[i] = orig + step;
        let hi = f(&xp);
        xp[i] = orig - step;
        let lo = f(&xp);
        xp[i] = orig;
        g.push((hi - lo) / (2.0 * step));
    }
    g
}

/// Check recorded gradients of a scalar loss against central finite
/// differences over every input, with rel. err < tol under the
/// max(|fd|, 1e-8) denominator. `build` must be a pure function of the
/// inputs.
pub fn gradcheck<F>(name: &str, inputs: &[(Vec<usize>, Vec<f64>)], build: F, step: f64, tol: f64)
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let mut g = Graph::new(Dtype::F64);
    let leaves: Vec<Var> = inputs
        .iter()
        .map(|(shape, data)| {
            let t = Tensor::from_f64(shape.clone(), data.clone()).unwrap();
            g.leaf_with(&t, true).unwrap()
        })
        .collect();
    let loss = build(&mut g, &leaves);
    assert_eq!(g.value(loss).len(), 1, "{name}: loss must be scalar");
    g.backward(loss).unwrap();
    let grads: Vec<Vec<f64>> = leaves
        .iter()
        .zip(inputs)
        .map(|(l, (shape, _))| {
            g.grad(*l)
                .map(|t| t.to_f64_vec())
                .unwrap_or_else(|| vec![0.0; shape.iter().product()])
        })
        .collect();

    let eval = |xs: &[Vec<f64>]| -> f64 {
        let mut g = Graph::new(Dtype::F64);
        let leaves: Vec<Var> = xs
            .iter()
            .zip(inputs)
            .map(|(data, (shape, _))| {
                let t = Tensor::from_f64(shape.clone(), data.clone()).unwrap();
                g.leaf_with(&t, true).unwrap()
            })
            .collect();
        let loss = build(&mut g, &leaves);
        g.value(loss).scalar()
    };

    let mut xs: Vec<Vec<f64>> = inputs.iter().map(|(_, d)| d.clone()).collect();
    for (i, grad) in grads.iter().enumerate() {
        for j in 0..grad.len() {
            let orig = xs[i][j];
            xs[i][j] = orig + step;
            let hi = eval(&xs);
            xs[i][j] = orig - step;
            let lo = eval(&xs);
            xs[i][j] = orig;
            let fd = (hi - lo) / (2.0 * step);
            let err = (grad[j] - fd).abs() / fd.abs().max(1e-8);
            assert!(
                err < tol,
                "{name}: input {i} coord {j}: autodiff {} vs fd {} (rel err {err:.3e})",
                grad[j],
                fd
            );
        }
    }
}

/// Plain dense soft attention in f64, written directly from the definition.
/// Returns (out [h, tq, dv], weights [h, tq, tk]).
pub fn dense_attention_reference(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    mask: &[bool],
    h: usize,
    tq: usize,
    tk: usize,
    dk: usize,
    dv: usize,
) -> (Vec<f64>, Vec<f64>) {
    let mut out = vec![0.0; h * tq * dv];
    let mut weights = vec![0.0; h * tq * tk];
    let scale = 1.0 / (dk as f64).sqrt();
    for hh in 0..h {
        for i in 0..tq {
            let mut scores = vec![f64::NEG_INFINITY; tk];
            for j in 0..tk {
                if mask[i * tk + j] {
                    let mut s = 0.0;
                    for c in 0..dk {
                        s += q[(hh * tq + i) * dk + c] * k[(hh * tk + j) * dk + c];
                    }
                    scores[j] = s * scale;
                }
            }
            let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..tk {
                if mask[i * tk + j] {
                    z += (scores[j] - mx).exp();
                }
            }
            for j in 0..tk {
                if mask[i * tk + j] {
                    weights[(hh * tq + i) * tk + j] = (scores[j] - mx).exp() / z;
                }
            }
            for c in 0..dv {
                let mut acc = 0.0;
                for j in 0..tk {
                    acc += weights[(hh * tq + i) * tk + j] * v[(hh * tk + j) * dv + c];
                }
                out[(hh * tq + i) * dv + c] = acc;
            }
        }
    }
    (out, weights)
}

/// Catmull-Rom cubic kernel (a = -0.5), written as the direct piecewise
/// polynomial.
pub fn catmull_rom_weight(x: f64) -> f64 {
    let a = -0.5;
    let x = x.abs();
    if x < 1.0 {
        (a + 2.0) * x * x * x - (a + 3.0) * x * x + 1.0
    } else if x < 2.0 {
        a * x * x * x - 5.0 * a * x * x + 8.0 * a * x - 4.0 * a
    } else {
        0.0
    }
}

/// Direct-convolution bicubic resampling with edge clamping and the
/// half-pixel source mapping. Independent of the library's separable
/// implementation.
pub fn bicubic_reference(src: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let mut out = vec![0.0; oh * ow];
    for oy in 0..oh {
        for ox in 0..ow {
            let sy = (oy as f64 + 0.5) * h as f64 / oh as f64 - 0.5;
            let sx = (ox as f64 + 0.5) * w as f64 / ow as f64 - 0.5;
            let y0 = sy.floor() as isize;
            let x0 = sx.floor() as isize;
            let mut acc = 0.0;
            for dy in -1..=2 {
                for dx in -1..=2 {
                    let yy = (y0 + dy).clamp(0, h as isize - 1) as usize;
                    let xx = (x0 + dx).clamp(0, w as isize - 1) as usize;
                    let wy = catmull_rom_weight(sy - (y0 + dy) as f64);
                    let wx = catmull_rom_weight(sx - (x0 + dx) as f64);
                    acc += src[yy * w + xx] * wy * wx;
                }
            }
            out[oy * ow + ox] = acc;
        }
    }
    out
}

// ── mask rule oracle ────────────────────────────────────────────────────

use uam_core::layout::{SequenceLayout, TokenKind};

/// Brute-force evaluation of the mask rules R1-R4, written as an explicit
/// per-pair cascade, independent of `build_mask`'s block fills.
pub fn mask_rule_oracle(layout: &SequenceLayout) -> Vec<bool> {
    let t = layout.total_len;
    let kinds: Vec<TokenKind> = (0..t).map(|i| layout.kind_at(i)).collect();
    let is_context = |k: TokenKind| {
        matches!(
            k,
            TokenKind::Text | TokenKind::SemVision | TokenKind::DorVision | TokenKind::DorQuery
        )
    };
    let is_action_branch =
        |k: TokenKind| matches!(k, TokenKind::Proprio | TokenKind::Action);
    let mut m = vec![false; t * t];
    for i in 0..t {
        for j in 0..t {
            let (ki, kj) = (kinds[i], kinds[j]);
            let visible = if is_context(ki) && is_context(kj) {
                // R1 (and R4 for the dorsal/semantic pairs)
                true
            } else if is_action_branch(ki) {
                // R2: the action branch sees everything, itself included
                true
            } else {
                // R3: context never looks into the action branch
                debug_assert!(is_context(ki) && is_action_branch(kj));
                false
            };
            m[i * t + j] = visible;
        }
    }
    m
}

/// Random legal layout for a variant, for oracle comparisons.
pub fn random_layout(
    rng: &mut impl rand::Rng,
    variant: uam_core::layout::VariantId,
) -> SequenceLayout {
    use uam_core::layout::{build_layout, Grid, TokenCounts, VariantId};
    loop {
        let mut counts = TokenCounts {
            text: rng.gen_range(0..=8),
            sem_vision: if rng.gen_bool(0.9) {
                Some(Grid::new(rng.gen_range(1..=6), rng.gen_range(1..=6)))
            } else {
                None
            },
            ..TokenCounts::default()
        };
        if variant.dorsal_takes_vision() && rng.gen_bool(0.9) {
            counts.dor_vision = Some(Grid::new(rng.gen_range(1..=4), rng.gen_range(1..=4)));
        }
        if variant.dorsal_takes_query() {
            counts.dor_query = rng.gen_range(1..=9);
        }
        if !matches!(variant, VariantId::FreezeVlmMlp | VariantId::MlpHead) {
            counts.proprio = rng.gen_range(0..=1);
            counts.action = rng.gen_range(0..=8);
        }
        if let Ok(l) = build_layout(variant, &counts) {
            return l;
        }
    }
}

// ── mixture-of-transformers gather/scatter reference ───────────────────

use uam_core::model::{ExpertParams, ModelBundle, NORM_EPS};

fn ref_rmsnorm(x: &[f64], gain: &[f64], eps: f64) -> Vec<f64> {
    let d = gain.len();
    let ms = x.iter().map(|v| v * v).sum::<f64>() / d as f64;
    let r = 1.0 / (ms + eps).sqrt();
    x.iter().zip(gain).map(|(v, g)| v * r * g).collect()
}

fn ref_gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let u = c * (x + 0.044715 * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn ref_vec_mat(x: &[f64], w: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c] += x[r] * w[r * cols + c];
        }
    }
    out
}

struct RefExpert {
    layers: Vec<RefLayerParams>,
    final_norm: Vec<f64>,
}

struct RefLayerParams {
    attn_norm: Vec<f64>,
    wq: Vec<f64>,
    wk: Vec<f64>,
    wv: Vec<f64>,
    wo: Vec<f64>,
    ff_norm: Vec<f64>,
    w1: Vec<f64>,
    w2: Vec<f64>,
}

fn ref_expert(e: &ExpertParams) -> RefExpert {
    RefExpert {
        layers: e
            .layers
            .iter()
            .map(|l| RefLayerParams {
                attn_norm: l.attn_norm.to_f64_vec(),
                wq: l.wq.to_f64_vec(),
                wk: l.wk.to_f64_vec(),
                wv: l.wv.to_f64_vec(),
                wo: l.wo.to_f64_vec(),
                ff_norm: l.ff_norm.to_f64_vec(),
                w1: l.w1.to_f64_vec(),
                w2: l.w2.to_f64_vec(),
            })
            .collect(),
        final_norm: e.final_norm.to_f64_vec(),
    }
}

/// Per-token gather/scatter reference for the full trunk: every token looks
/// up its expert's weights individually; attention is a plain dense loop
/// over the joint sequence.
pub fn mot_trunk_reference(
    bundle: &ModelBundle,
    layout: &SequenceLayout,
    mask: &[bool],
    x0: &[f64],
) -> Vec<f64> {
    use uam_core::layout::ExpertId;
    let cfg = &bundle.config;
    let (t, d, h) = (layout.total_len, cfg.width, cfg.heads);
    let dk = d / h;
    let experts: Vec<ExpertId> = (0..t).map(|i| layout.kind_at(i).expert()).collect();
    let table = |e: ExpertId| ref_expert(bundle.expert(e).unwrap());
    let sem = table(ExpertId::Sem);
    let act = table(ExpertId::Act);
    let dor = bundle.dor.as_ref().map(ref_expert);
    let of = |e: ExpertId| -> &RefExpert {
        match e {
            ExpertId::Sem => &sem,
            ExpertId::Act => &act,
            ExpertId::Dor => dor.as_ref().expect("dorsal expert present"),
        }
    };

    let mut x = x0.to_vec();
    for li in 0..cfg.layers {
        // attention sublayer
        let mut q = vec![0.0; t * d];
        let mut k = vec![0.0; t * d];
        let mut v = vec![0.0; t * d];
        for i in 0..t {
            let l = &of(experts[i]).layers[li];
            let n = ref_rmsnorm(&x[i * d..(i + 1) * d], &l.attn_norm, NORM_EPS);
            q[i * d..(i + 1) * d].copy_from_slice(&ref_vec_mat(&n, &l.wq, d, d));
            k[i * d..(i + 1) * d].copy_from_slice(&ref_vec_mat(&n, &l.wk, d, d));
            v[i * d..(i + 1) * d].copy_from_slice(&ref_vec_mat(&n, &l.wv, d, d));
        }
        let mut attn = vec![0.0; t * d];
        for hh in 0..h {
            for i in 0..t {
                let qi = &q[i * d + hh * dk..i * d + hh * dk + dk];
                let mut scores = vec![f64::NEG_INFINITY; t];
                for j in 0..t {
                    if mask[i * t + j] {
                        let kj = &k[j * d + hh * dk..j * d + hh * dk + dk];
                        scores[j] = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>()
                            / (dk as f64).sqrt();
                    }
                }
                let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = scores
                    .iter()
                    .filter(|s| s.is_finite())
                    .map(|s| (s - mx).exp())
                    .sum();
                for j in 0..t {
                    if mask[i * t + j] {
                        let w = (scores[j] - mx).exp() / z;
                        for c in 0..dk {
                            attn[i * d + hh * dk + c] += w * v[j * d + hh * dk + c];
                        }
                    }
                }
            }
        }
        for i in 0..t {
            let l = &of(experts[i]).layers[li];
            let o = ref_vec_mat(&attn[i * d..(i + 1) * d], &l.wo, d, d);
            for c in 0..d {
                x[i * d + c] += o[c];
            }
        }
        // feed-forward sublayer
        let snapshot = x.clone();
        for i in 0..t {
            let l = &of(experts[i]).layers[li];
            let n = ref_rmsnorm(&snapshot[i * d..(i + 1) * d], &l.ff_norm, NORM_EPS);
            let h1 = ref_vec_mat(&n, &l.w1, d, l.w1.len() / d);
            let a: Vec<f64> = h1.iter().map(|v| ref_gelu(*v)).collect();
            let h2 = ref_vec_mat(&a, &l.w2, a.len(), d);
            for c in 0..d {
                x[i * d + c] += h2[c];
            }
        }
    }
    let mut out = vec![0.0; t * d];
    for i in 0..t {
        let fin = &of(experts[i]).final_norm;
        out[i * d..(i + 1) * d]
            .copy_from_slice(&ref_rmsnorm(&x[i * d..(i + 1) * d], fin, NORM_EPS));
    }
    out
}
