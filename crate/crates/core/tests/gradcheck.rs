//! Finite-difference gradient checks for every differentiable primitive:
//! >= 20 random f64 instances each, central differences at step 1e-4,
//! rel. err < 1e-4 with denominator max(|fd|, 1e-8).

mod common;

use std::sync::Arc;

use rand::Rng;
use uam_core::rng::stream;
use uam_core::{BoolMat, Graph, Var};

const STEP: f64 = 1e-4;
const TOL: f64 = 1e-4;
const INSTANCES: usize = 20;

fn randv(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect()
}

/// Weighted sum against fixed coefficients turns any output into a scalar
/// loss with non-uniform adjoints.
fn weighted_sum(g: &mut Graph, x: Var, coeffs: &[f64]) -> Var {
    let t = uam_core::Tensor::from_f64(g.shape_of(x).to_vec(), coeffs.to_vec()).unwrap();
    let c = g.constant(&t).unwrap();
    let prod = g.mul(x, c).unwrap();
    g.sum(prod).unwrap()
}

#[test]
fn matmul_gradients_match_finite_differences() {
    let mut rng = stream(11, "gradcheck-matmul");
    for i in 0..INSTANCES {
        let (m, k, n) = (2 + i % 3, 3 + i % 2, 2 + i % 4);
        let coeffs = randv(&mut rng, m * n);
        let inputs = vec![
            (vec![m, k], randv(&mut rng, m * k)),
            (vec![k, n], randv(&mut rng, k * n)),
        ];
        common::gradcheck(
            "matmul",
            &inputs,
            |g, l| {
                let c = g.matmul(l[0], l[1]).unwrap();
                weighted_sum(g, c, &coeffs)
            },
            STEP,
            TOL,
        );
    }
}

#[test]
fn matmul_transposed_views_match_finite_differences() {
    let mut rng = stream(12, "gradcheck-matmul-t");
    for i in 0..INSTANCES {
        let (m, k, n) = (2 + i % 2, 2 + i % 3, 3);
        let (ta, tb) = (i % 2 == 0, i % 3 == 0);
        let sa = if ta { vec![k, m] } else { vec![m, k] };
        let sb = if tb { vec![n, k] } else { vec![k, n] };
        let coeffs = randv(&mut rng, m * n);
        let inputs = vec![
            (sa.clone(), randv(&mut rng, m * k)),
            (sb.clone(), randv(&mut rng, k * n)),
        ];
        common::gradcheck(
            "matmul-t",
            &inputs,
            |g, l| {
                let c = g.matmul_t(l[0], l[1], ta, tb).unwrap();
                weighted_sum(g, c, &coeffs)
            },
            STEP,
            TOL,
        );
    }
}

#[test]
fn gradient_of_matmul_sum_matches_reference_case() {
    // random 3x4 by 4x2, gradient of the plain sum.
    let mut rng = stream(13, "gradcheck-matmul-sum");
    for _ in 0..INSTANCES {
        let inputs = vec![
            (vec![3, 4], randv(&mut rng, 12)),
            (vec![4, 2], randv(&mut rng, 8)),
        ];
        common::gradcheck(
            "matmul-sum",
            &inputs,
            |g, l| {
                let c = g.matmul(l[0], l[1]).unwrap();
                g.sum(c).unwrap()
            },
            STEP,
            1e-6,
        );
    }
}

#[test]
fn bmm_gradients_match_finite_differences() {
    let mut rng = stream(14, "gradcheck-bmm");
    for i in 0..INSTANCES {
        let (b, m, k, n) = (2, 2 + i % 2, 3, 2);
        let tb = i % 2 == 0;
        let sb = if tb { vec![b, n, k] } else { vec![b, k, n] };
        let coeffs = randv(&mut rng, b * m * n);
        let inputs = vec![
            (vec![b, m, k], randv(&mut rng, b * m * k)),
            (sb, randv(&mut rng, b * k * n)),
        ];
        common::gradcheck(
            "bmm",
            &inputs,
            |g, l| {
                let c = g.bmm_t(l[0], l[1], false, tb).unwrap();
                weighted_sum(g, c, &coeffs)
            },
            STEP,
            TOL,
        );
    }
}

#[test]
fn elementwise_ops_match_finite_differences() {
    let mut rng = stream(15, "gradcheck-elementwise");
    for i in 0..INSTANCES {
        let n = 4 + i % 5;
        let coeffs = randv(&mut rng, n);
        let inputs = vec![(vec![n], randv(&mut rng, n)), (vec![n], randv(&mut rng, n))];
        common::gradcheck(
            "add-mul-scale",
            &inputs,
            |g, l| {
                let s = g.add(l[0], l[1]).unwrap();
                let p = g.mul(s, l[0]).unwrap();
                let sc = g.scale(p, 0.7).unwrap();
                let sh = g.add_scalar(sc, 0.3).unwrap();
                weighted_sum(g, sh, &coeffs)
            },
            STEP,
            TOL,
        );
    }
}

#[test]
fn gelu_matches_finite_differences() {
    let mut rng = stream(16, "gradcheck-gelu");
    for i in 0..INSTANCES {
        let n = 3 + i % 6;
        let coeffs = randv(&mut rng, n);
        let inputs = vec![(vec![n], randv(&mut rng, n))];
        common::gradcheck(
            "gelu",
            &inputs,
            |g, l| {
                let y = g.gelu(l[0]).unwrap();
                weighted_sum(g, y, &coeffs)
            },
            STEP,
            TOL,
        );
    }
}

#[test]
fn softmax_masked_and_unmasked_match_finite_differences() {
    let mut rng = stream(17, "gradcheck-softmax");
    for i in 0..INSTANCES {
        let (rows, n) = (2, 3 + i % 3);
        let mut mask = BoolMat::new(rows, n, true);
        if i % 2 == 0 {
            mask.set(0, i % n, false);
        }
        let mask = Arc::new(mask);
        let coeffs = randv(&mut rng, rows * n);
        let inputs = vec![(vec![rows, n], randv(&mut rng, rows * n))];
        let use_mask = i % 3 != 1;
        common::gradcheck(
            "softmax",
            &inputs,
            |g, l| {
                let m = if use_mask { Some(Arc::clone(&mask)) } else { None };
                let y = g.softmax_rows(l[0], m).unwrap();
                weighted_sum(g, y, &coeffs)
            },
            STEP,
            TOL,
        );
    }
}

#[test]
fn rms_norm_matches_finite_differences() {
    // random 2x8 slices; both input and gain gradients.
    let mut rng = stream(18, "gradcheck-rmsnorm");
    for _ in 0..INSTANCES {
        let (rows, d) = (2, 8);
        let coeffs = randv(&mut rng, rows * d);
        let inputs = vec![
            (vec![rows, d], randv(&mut rng, rows * d)),
            (vec![d], randv(&mut rng, d)),
        ];
        common::gradcheck(
            "rms-norm",
            &inputs,
            |g, l| {
                let y = g.rms_norm(l[0], l[1], 1e-5).unwrap();
                weighted_sum(g, y, &coeffs)
            },
            STEP,
            1e-5,
        );
    }
}

#[test]
fn attention_matches_finite_differences() {
    let mut rng = stream(19, "gradcheck-attention");
    for i in 0..INSTANCES {
        let (h, tq, tk, dk, dv) = (2, 2, 3, 2 + i % 2, 2);
        let mut mask = BoolMat::new(tq, tk, true);
        if i % 2 == 0 {
            mask.set(1, i % tk, false);
        }
        let mask = Arc::new(mask);
        let coeffs = randv(&mut rng, h * tq * dv);
        let inputs = vec![
            (vec![h, tq, dk], randv(&mut rng, h * tq * dk)),
            (vec![h, tk, dk], randv(&mut rng, h * tk * dk)),
            (vec![h, tk, dv], randv(&mut rng, h * tk * dv)),
        ];
        common::gradcheck(
            "attention",
            &inputs,
            |g, l| {
                let (out, _w) = g.attention(l[0], l[1], l[2], Arc::clone(&mask)).unwrap();
                weighted_sum(g, out, &coeffs)
            },
            STEP,
            TOL,
        );
    }
}

#[test]
fn embedding_lookup_matches_finite_differences() {
    let mut rng = stream(20, "gradcheck-embed");
    for i in 0..INSTANCES {
        let (v, d) = (5, 3);
        let ids: Vec<usize> = (0..4).map(|j| (i + j) % v).collect();
        let coeffs = randv(&mut rng, ids.len() * d);
        let inputs = vec![(vec![v, d], randv(&mut rng, v * d))];
        let ids2 = ids.clone();
        common::gradcheck(
            "embed",
            &inputs,
            |g, l| {
                let e = g.embed(l[0], &ids2).unwrap();
                weighted_sum(g, e, &coeffs)
            },
            STEP,
            TOL,
        );
    }
}

#[test]
fn cross_entropy_matches_finite_differences() {
    let mut rng = stream(21, "gradcheck-ce");
    for i in 0..INSTANCES {
        let (n, k) = (3, 4 + i % 3);
        let targets: Vec<usize> = (0..n).map(|j| (i + j) % k).collect();
        let inputs = vec![(vec![n, k], randv(&mut rng, n * k))];
        let t2 = targets.clone();
        common::gradcheck(
            "cross-entropy",
            &inputs,
            |g, l| g.cross_entropy(l[0], &t2).unwrap(),
            STEP,
            TOL,
        );
    }
}

#[test]
fn mse_matches_finite_differences() {
    let mut rng = stream(22, "gradcheck-mse");
    for i in 0..INSTANCES {
        let n = 4 + i % 4;
        let inputs = vec![(vec![n], randv(&mut rng, n)), (vec![n], randv(&mut rng, n))];
        common::gradcheck("mse", &inputs, |g, l| g.mse(l[0], l[1]).unwrap(), STEP, TOL);
    }
}

#[test]
fn concat_slice_reshape_match_finite_differences() {
    let mut rng = stream(23, "gradcheck-concat");
    for i in 0..INSTANCES {
        let d = 3;
        let (r1, r2) = (2, 1 + i % 3);
        let coeffs = randv(&mut rng, 2 * d);
        let inputs = vec![
            (vec![r1, d], randv(&mut rng, r1 * d)),
            (vec![r2, d], randv(&mut rng, r2 * d)),
        ];
        common::gradcheck(
            "concat-slice",
            &inputs,
            |g, l| {
                let c = g.concat_rows(&[l[0], l[1]]).unwrap();
                let s = g.slice_rows(c, 1, 2).unwrap();
                let r = g.reshape(s, vec![2 * d]).unwrap();
                let r2d = g.reshape(r, vec![2, d]).unwrap();
                weighted_sum(g, r2d, &coeffs)
            },
            STEP,
            TOL,
        );
    }
}

#[test]
fn patch_extraction_matches_finite_differences() {
    let mut rng = stream(24, "gradcheck-patches");
    for i in 0..INSTANCES {
        let (h, w, c, p) = (4, 6, 1 + i % 2, 2);
        let n = (h / p) * (w / p) * p * p * c;
        let coeffs = randv(&mut rng, n);
        let inputs = vec![(vec![h, w, c], randv(&mut rng, h * w * c))];
        common::gradcheck(
            "patches",
            &inputs,
            |g, l| {
                let pt = g.patches(l[0], p).unwrap();
                weighted_sum(g, pt, &coeffs)
            },
            STEP,
            TOL,
        );
    }
}

#[test]
fn pooling_and_bias_match_finite_differences() {
    let mut rng = stream(25, "gradcheck-pool");
    for i in 0..INSTANCES {
        let (t, d) = (3 + i % 2, 4);
        let coeffs = randv(&mut rng, d);
        let inputs = vec![
            (vec![t, d], randv(&mut rng, t * d)),
            (vec![d], randv(&mut rng, d)),
        ];
        common::gradcheck(
            "mean-rows-bias",
            &inputs,
            |g, l| {
                let b = g.add_bias(l[0], l[1]).unwrap();
                let m = g.mean_rows(b).unwrap();
                weighted_sum(g, m, &coeffs)
            },
            STEP,
            TOL,
        );
    }
}

#[test]
fn head_split_merge_match_finite_differences() {
    let mut rng = stream(26, "gradcheck-heads");
    for i in 0..INSTANCES {
        let (t, d, h) = (3, 8, if i % 2 == 0 { 2 } else { 4 });
        let coeffs = randv(&mut rng, t * d);
        let inputs = vec![(vec![t, d], randv(&mut rng, t * d))];
        common::gradcheck(
            "split-merge-heads",
            &inputs,
            |g, l| {
                let s = g.split_heads(l[0], h).unwrap();
                let m = g.merge_heads(s).unwrap();
                weighted_sum(g, m, &coeffs)
            },
            STEP,
            TOL,
        );
    }
}

#[test]
fn attention_matches_dense_reference() {
    // 1 head, Tq=2, Tk=3 random, against the independently coded dense
    // implementation in f64.
    let mut rng = stream(27, "attention-reference");
    for i in 0..INSTANCES {
        let (h, tq, tk, dk, dv) = (1, 2, 3, 4, 3);
        let q = randv(&mut rng, h * tq * dk);
        let k = randv(&mut rng, h * tk * dk);
        let v = randv(&mut rng, h * tk * dv);
        let mut mask = BoolMat::new(tq, tk, true);
        if i % 2 == 0 {
            mask.set(0, i % tk, false);
        }
        let (ref_out, ref_w) = common::dense_attention_reference(
            &q,
            &k,
            &v,
            mask.data(),
            h,
            tq,
            tk,
            dk,
            dv,
        );

        let mut g = Graph::new(uam_core::Dtype::F64);
        let qv = g
            .constant(&uam_core::Tensor::from_f64(vec![h, tq, dk], q.clone()).unwrap())
            .unwrap();
        let kv = g
            .constant(&uam_core::Tensor::from_f64(vec![h, tk, dk], k.clone()).unwrap())
            .unwrap();
        let vv = g
            .constant(&uam_core::Tensor::from_f64(vec![h, tk, dv], v.clone()).unwrap())
            .unwrap();
        let (out, w) = g.attention(qv, kv, vv, Arc::new(mask)).unwrap();
        let got_out = g.value(out).to_f64_vec();
        let got_w = g.value(w).to_f64_vec();
        for (a, b) in got_out.iter().zip(&ref_out) {
            assert!((a - b).abs() < 1e-10, "out {a} vs {b}");
        }
        for (a, b) in got_w.iter().zip(&ref_w) {
            assert!((a - b).abs() < 1e-10, "weights {a} vs {b}");
        }
    }
}
