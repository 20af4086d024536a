mod common;

use common::*;
use css_core::localpod::{
    embedding_var, local_pod_embedding, local_pod_loss, local_pod_loss_value, old_embeddings, pod_embedding,
    pod_loss_value, PodConfig,
};
use css_core::tensor::{pyramid_pool, Tape, Tensor};
use proptest::prelude::*;

/// Straight transcription of the pyramid layout: for every division, every
/// region in row-major order, the width-pooled means per (row, channel) then
/// the height-pooled means per (column, channel).
fn brute_embedding(x: &Tensor<f64>, divisions: &[usize], square: bool) -> Vec<f64> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let val = |ch: usize, r: usize, q: usize| {
        let v = x.at(&[ch, r, q]);
        if square {
            v * v
        } else {
            v
        }
    };
    let mut out = Vec::new();
    for &d in divisions {
        let (rh, rw) = (h / d, w / d);
        for i in 0..d {
            for j in 0..d {
                for r in i * rh..(i + 1) * rh {
                    for ch in 0..c {
                        let s: f64 = (j * rw..(j + 1) * rw).map(|q| val(ch, r, q)).sum();
                        out.push(s / rw as f64);
                    }
                }
                for q in j * rw..(j + 1) * rw {
                    for ch in 0..c {
                        let s: f64 = (i * rh..(i + 1) * rh).map(|r| val(ch, r, q)).sum();
                        out.push(s / rh as f64);
                    }
                }
            }
        }
    }
    out
}

fn brute_loss(old: &[Tensor<f64>], new: &[Tensor<f64>], cfg: &PodConfig, n_old: usize, n_new: usize) -> f64 {
    let a = if cfg.adaptive_weighting {
        ((n_old + n_new) as f64 / n_new as f64).sqrt()
    } else {
        1.0
    };
    let l = old.len();
    let mut total = 0.0;
    for k in 0..l {
        let logits = k == l - 1;
        let square = cfg.square_values && !logits;
        let lambda = if logits { cfg.lambda_logits } else { cfg.lambda_features };
        let eo = brute_embedding(&old[k], &cfg.divisions, square);
        let en = brute_embedding(&new[k], &cfg.divisions, square);
        let d: f64 = eo.iter().zip(&en).map(|(a, b)| (a - b) * (a - b)).sum();
        total += lambda * a * d;
    }
    total / l as f64
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}

#[test]
fn embedding_matches_brute_force() {
    let mut r = rng(11);
    for _ in 0..20 {
        let x = random_tensor(vec![4, 8, 8], 2.0, &mut r);
        for square in [false, true] {
            let want = brute_embedding(&x, &[1, 2, 4], square);
            let cfg = PodConfig {
                square_values: square,
                ..PodConfig::default()
            };
            let got = local_pod_embedding(&x, &cfg).unwrap();
            let kernel = pyramid_pool(&x, &[1, 2, 4], square).unwrap();
            let mut tape = Tape::new();
            let v = tape.constant(x.clone());
            let e = embedding_var(&mut tape, v, &[1, 2, 4], square).unwrap();
            let composed = tape.value(e).clone();
            assert_eq!(got.values.len(), want.len());
            for (k, w) in want.iter().enumerate() {
                assert!(close(got.values.data()[k], *w, 1e-12));
                assert!(close(kernel.data()[k], *w, 1e-12));
                assert!(close(composed.data()[k], *w, 1e-12));
            }
        }
    }
}

#[test]
fn hand_examples() {
    let x = Tensor::<f64>::from_f64(vec![1, 2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
    assert_eq!(pod_embedding(&x, false).unwrap().values.data(), &[1.5, 3.5, 2.0, 3.0]);
    assert_eq!(pod_embedding(&x, true).unwrap().values.data(), &[2.5, 12.5, 5.0, 10.0]);
    let cfg = PodConfig {
        divisions: vec![1, 2],
        square_values: false,
        ..PodConfig::default()
    };
    let e = local_pod_embedding(&x, &cfg).unwrap();
    assert_eq!(
        e.values.data(),
        &[1.5, 3.5, 2.0, 3.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0]
    );
}

#[test]
fn loss_matches_brute_force() {
    let mut r = rng(12);
    for trial in 0..20 {
        let shapes = [vec![4, 8, 8], vec![3, 8, 8], vec![2, 8, 8]];
        let old: Vec<_> = shapes.iter().map(|s| random_tensor(s.clone(), 1.5, &mut r)).collect();
        let new: Vec<_> = shapes.iter().map(|s| random_tensor(s.clone(), 1.5, &mut r)).collect();
        let cfg = PodConfig {
            adaptive_weighting: trial % 2 == 0,
            square_values: trial % 3 != 0,
            ..PodConfig::default()
        };
        let (n_old, n_new) = (1 + trial % 4, 1 + trial % 3);
        let want = brute_loss(&old, &new, &cfg, n_old, n_new);
        let value = local_pod_loss_value(&old, &new, &cfg, n_old, n_new).unwrap();
        let mut tape = Tape::new();
        let ov: Vec<_> = old.iter().map(|t| tape.constant(t.clone())).collect();
        let nv: Vec<_> = new.iter().map(|t| tape.leaf(t.clone().with_requires_grad(true))).collect();
        let l = local_pod_loss(&mut tape, &ov, &nv, &cfg, n_old, n_new).unwrap();
        assert!(close(value, want, 1e-12), "{value} vs {want}");
        assert!(close(tape.value(l).item(), want, 1e-12));
        assert_eq!(old_embeddings(&old, &cfg).unwrap().len(), 3);
    }
}

#[test]
fn single_division_is_plain_pod() {
    let mut r = rng(13);
    let cfg = PodConfig {
        divisions: vec![1],
        ..PodConfig::default()
    };
    for _ in 0..20 {
        let old = vec![random_tensor(vec![3, 6, 10], 1.0, &mut r), random_tensor(vec![2, 6, 10], 1.0, &mut r)];
        let new = vec![random_tensor(vec![3, 6, 10], 1.0, &mut r), random_tensor(vec![2, 6, 10], 1.0, &mut r)];
        let a = local_pod_loss_value(&old, &new, &cfg, 3, 1).unwrap();
        let b = pod_loss_value(&old, &new, &cfg, 3, 1).unwrap();
        assert!((a - b).abs() <= 1e-12);
    }
}

/// Swapping diagonal quadrant blocks keeps every row and column mean, so plain
/// POD cannot see it, while the 2x2 level of the pyramid does.
#[test]
fn local_statistics_catch_what_global_pooling_misses() {
    let mut r = rng(14);
    for _ in 0..10 {
        let a = random_tensor(vec![2, 2, 2], 1.0, &mut r);
        let b = random_tensor(vec![2, 2, 2], 1.0, &mut r);
        let build = |tl: &Tensor<f64>, tr: &Tensor<f64>| {
            let mut x = Tensor::zeros(vec![2, 4, 4]);
            for c in 0..2 {
                for i in 0..2 {
                    for j in 0..2 {
                        let (p, q) = (tl.at(&[c, i, j]), tr.at(&[c, i, j]));
                        x.data_mut()[c * 16 + i * 4 + j] = p;
                        x.data_mut()[c * 16 + i * 4 + j + 2] = q;
                        x.data_mut()[c * 16 + (i + 2) * 4 + j] = q;
                        x.data_mut()[c * 16 + (i + 2) * 4 + j + 2] = p;
                    }
                }
            }
            x
        };
        let x = vec![build(&a, &b)];
        let y = vec![build(&b, &a)];
        let global = PodConfig {
            divisions: vec![1],
            ..PodConfig::default()
        };
        let local = PodConfig {
            divisions: vec![1, 2],
            ..PodConfig::default()
        };
        assert!(pod_loss_value(&x, &y, &global, 1, 1).unwrap() < 1e-15);
        assert!(local_pod_loss_value(&x, &y, &local, 1, 1).unwrap() > 1e-6);
    }
}

#[test]
fn identical_taps_give_exact_zero() {
    let mut r = rng(15);
    let taps = vec![random_tensor(vec![4, 8, 8], 3.0, &mut r), random_tensor(vec![3, 8, 8], 3.0, &mut r)];
    let cfg = PodConfig::default();
    assert_eq!(local_pod_loss_value(&taps, &taps, &cfg, 2, 1).unwrap(), 0.0);
    let mut tape = Tape::new();
    let ov: Vec<_> = taps.iter().map(|t| tape.constant(t.clone())).collect();
    let nv: Vec<_> = taps.iter().map(|t| tape.leaf(t.clone().with_requires_grad(true))).collect();
    let l = local_pod_loss(&mut tape, &ov, &nv, &cfg, 2, 1).unwrap();
    assert_eq!(tape.value(l).item(), 0.0);
}

#[test]
fn rejects_bad_inputs() {
    let x = Tensor::<f64>::zeros(vec![2, 6, 6]);
    let cfg = PodConfig::default();
    let err = local_pod_embedding(&x, &cfg).unwrap_err().to_string();
    assert!(err.contains('4') && err.contains('6'), "{err}");
    let a = vec![Tensor::<f64>::zeros(vec![2, 8, 8])];
    let b = vec![Tensor::<f64>::zeros(vec![3, 8, 8])];
    assert!(local_pod_loss_value(&a, &b, &cfg, 1, 1).is_err());
    assert!(local_pod_loss_value(&a, &[], &cfg, 1, 1).is_err());
}

proptest! {
    #[test]
    fn embedding_length_and_constants(c in 1usize..4, h4 in 1usize..4, w4 in 1usize..4, k in -3.0f64..3.0) {
        let (h, w) = (4 * h4, 4 * w4);
        let x = Tensor::full(vec![c, h, w], k);
        let cfg = PodConfig { square_values: false, ..PodConfig::default() };
        let e = local_pod_embedding(&x, &cfg).unwrap();
        prop_assert_eq!(e.values.len(), (1 + 2 + 4) * (h + w) * c);
        prop_assert_eq!(e.layout.iter().map(|s| s.len).sum::<usize>(), e.values.len());
        for v in e.values.data() {
            prop_assert!((v - k).abs() < 1e-12);
        }
    }

    #[test]
    fn loss_is_nonnegative_and_symmetric(seed in 0u64..1000) {
        let mut r = rng(seed);
        let a = vec![random_tensor(vec![2, 4, 4], 1.0, &mut r)];
        let b = vec![random_tensor(vec![2, 4, 4], 1.0, &mut r)];
        let cfg = PodConfig::default();
        let ab = local_pod_loss_value(&a, &b, &cfg, 1, 1).unwrap();
        let ba = local_pod_loss_value(&b, &a, &cfg, 1, 1).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - ba).abs() <= 1e-15 * ab.max(1.0));
    }
}
