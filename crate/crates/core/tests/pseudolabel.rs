mod common;

use common::*;
use css_core::data::LabelMap;
use css_core::pseudolabel::{
    build_pseudo_target, compute_thresholds, pixel_entropy, pseudo_ce_loss, pseudo_ce_value, EntropyThresholds,
    PseudoTarget,
};
use css_core::tensor::{Tape, Tensor};
use proptest::prelude::*;

fn build(c: &PseudoCase) -> PseudoTarget {
    build_pseudo_target(&c.gt, &c.current, &c.probs, &c.u, &c.thr).unwrap()
}

#[test]
fn matches_per_pixel_oracle() {
    for seed in 0..1000 {
        let c = pseudo_case(seed, 8, 8);
        assert_eq!(build(&c), brute_pseudo_target(&c), "seed {seed}");
    }
}

#[test]
fn raising_a_threshold_never_loses_pixels() {
    for seed in 0..200 {
        let mut c = pseudo_case(seed, 8, 8);
        let before = build(&c);
        let k = seed as usize % c.thr.tau.len();
        c.thr.tau[k] += 0.1;
        let after = build(&c);
        assert!(after.n_accepted() >= before.n_accepted());
        assert!(after.nu >= before.nu);
        for (a, b) in before.accepted.iter().zip(&after.accepted) {
            assert!(!a || *b);
        }
    }
}

#[test]
fn infinite_cap_labels_every_background_pixel() {
    for seed in 0..50 {
        let mut c = pseudo_case(seed, 8, 8);
        c.thr = EntropyThresholds::uniform(c.thr.tau.len(), f64::INFINITY, true);
        let t = build(&c);
        assert!(t.accepted.iter().all(|&a| a));
        assert_eq!(t.nu, 1.0);
        let argmax = c.probs.argmax_channel();
        for (i, &g) in c.gt.data().iter().enumerate() {
            let want = if g == 0 { argmax[i] as u8 } else { g };
            assert_eq!(t.target.data()[i], want);
        }
    }
}

#[test]
fn rejects_unknown_labels() {
    let mut c = pseudo_case(3, 4, 4);
    c.gt.set(0, 0, 99);
    let err = build_pseudo_target(&c.gt, &c.current, &c.probs, &c.u, &c.thr).unwrap_err();
    assert!(err.to_string().contains("99"), "{err}");
}

#[test]
fn thresholds_from_a_model() {
    let mut r = rng(5);
    let net = css_core::model::SegNet::<f64>::new(small_arch(), vec![0, 1, 2], 4).unwrap();
    let images: Vec<_> = (0..4).map(|_| random_tensor(vec![3, 8, 8], 1.0, &mut r)).collect();
    let thr = compute_thresholds(&net, images.iter(), 0.9, true).unwrap();
    let mut by_class: Vec<Vec<f64>> = vec![Vec::new(); 3];
    for img in &images {
        let p = net.logits(img).unwrap().softmax_channel().unwrap();
        let u = pixel_entropy(&p, true).unwrap();
        for (i, c) in p.argmax_channel().into_iter().enumerate() {
            by_class[c].push(u.data()[i]);
        }
    }
    for (c, mut v) in by_class.into_iter().enumerate() {
        if v.is_empty() {
            assert_eq!(thr.tau[c], 0.9);
            continue;
        }
        v.sort_by(f64::total_cmp);
        let n = v.len();
        let m = if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 };
        assert_eq!(thr.tau[c], m.min(0.9));
        assert_eq!(thr.pixels[c], n);
    }
    assert!(compute_thresholds(&net, std::iter::empty(), 0.9, true).is_err());
}

#[test]
fn loss_oracle() {
    let mut r = rng(6);
    for seed in 0..50 {
        let t = random_target(4, 5, 5, &mut r);
        let logits = random_tensor(vec![4, 5, 5], 3.0, &mut r);
        let mut want = 0.0;
        for p in 0..25 {
            if !t.accepted[p] {
                continue;
            }
            let col: Vec<f64> = (0..4).map(|c| logits.data()[c * 25 + p]).collect();
            let lse = col.iter().map(|v| v.exp()).sum::<f64>().ln();
            want -= col[t.target.data()[p] as usize] - lse;
        }
        want *= t.nu / t.n_accepted() as f64;
        let got = pseudo_ce_value(&logits, &t, true).unwrap();
        assert!((got - want).abs() < 1e-12 * want.max(1.0), "seed {seed}");
        let mut tape = Tape::new();
        let v = tape.constant(logits.clone());
        let l = pseudo_ce_loss(&mut tape, v, &t, true).unwrap();
        assert!((tape.value(l).item() - want).abs() < 1e-12 * want.max(1.0));
    }
}

#[test]
fn all_rejected_gives_zero() {
    let gt = LabelMap::filled(3, 3, 0);
    let t = PseudoTarget {
        target: gt.clone(),
        accepted: vec![false; 9],
        nu: 0.0,
    };
    let logits = Tensor::<f64>::zeros(vec![3, 3, 3]);
    assert_eq!(pseudo_ce_value(&logits, &t, true).unwrap(), 0.0);
}

#[test]
fn first_step_is_plain_cross_entropy() {
    let gt = LabelMap::new(2, 2, vec![0, 1, 2, 0]).unwrap();
    let t = PseudoTarget::from_ground_truth(&gt);
    let logits = Tensor::<f64>::zeros(vec![3, 2, 2]);
    assert!((pseudo_ce_value(&logits, &t, true).unwrap() - 3f64.ln()).abs() < 1e-15);
}

proptest! {
    #[test]
    fn nu_in_unit_interval_and_loss_nonnegative(seed in 0u64..100_000) {
        let c = pseudo_case(seed, 6, 6);
        let t = build(&c);
        prop_assert!((0.0..=1.0).contains(&t.nu));
        let mut r = rng(seed);
        let k = c.current.last().map(|&v| v as usize + 1).unwrap();
        let logits = random_tensor(vec![k, 6, 6], 4.0, &mut r);
        prop_assert!(pseudo_ce_value(&logits, &t, true).unwrap() >= 0.0);
    }

    #[test]
    fn entropy_in_unit_interval(seed in 0u64..100_000) {
        let c = pseudo_case(seed, 4, 4);
        let u = pixel_entropy(&c.probs, true).unwrap();
        for &v in u.data() {
            prop_assert!((-1e-12..=1.0 + 1e-12).contains(&v));
        }
    }
}
