#![allow(dead_code)]

use css_core::data::LabelMap;
use css_core::model::{Architecture, SegNet};
use css_core::pseudolabel::PseudoTarget;
use css_core::tensor::{Tape, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    css_core::seed::rng(seed, &[0xfd])
}

pub fn random_tensor(shape: Vec<usize>, scale: f64, rng: &mut impl Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-scale..scale)).collect();
    Tensor::from_f64(shape, &data).unwrap()
}

pub fn small_arch() -> Architecture {
    Architecture {
        in_channels: 3,
        channels: vec![4, 4],
        kernel: 3,
    }
}

/// Random target over `k` channels with a random acceptance mask and nu.
pub fn random_target(k: usize, h: usize, w: usize, rng: &mut impl Rng) -> PseudoTarget {
    let data = (0..h * w).map(|_| rng.gen_range(0..k) as u8).collect();
    let target = LabelMap::new(h, w, data).unwrap();
    let mut accepted: Vec<bool> = (0..h * w).map(|_| rng.gen_bool(0.7)).collect();
    accepted[0] = true;
    PseudoTarget {
        target,
        accepted,
        nu: rng.gen_range(0.1..1.0),
    }
}

/// Loss recorded on a fresh tape from the current network's forward pass.
pub type LossFn<'a> = dyn Fn(&mut Tape<f64>, &SegNet<f64>, &css_core::model::TapeForward) -> Var + 'a;

fn value(net: &SegNet<f64>, image: &Tensor<f64>, loss: &LossFn<'_>) -> f64 {
    let mut tape = Tape::new();
    let fwd = net.forward_tape(&mut tape, image).unwrap();
    let l = loss(&mut tape, net, &fwd);
    tape.value(l).item()
}

/// Worst norm-relative error `|a - n| / max(|a|, |n|)` over parameter tensors,
/// with central differences of step `eps`. Tensors whose gradients are both
/// below `floor` in norm count as agreeing.
pub fn max_relative_error(net: &SegNet<f64>, image: &Tensor<f64>, loss: &LossFn<'_>, eps: f64, floor: f64) -> f64 {
    let mut tape = Tape::new();
    let fwd = net.forward_tape(&mut tape, image).unwrap();
    let l = loss(&mut tape, net, &fwd);
    let grads = tape.backward(l).unwrap();
    let mut worst: f64 = 0.0;
    for (pi, &pv) in fwd.params.iter().enumerate() {
        let analytic = grads.get(pv);
        let mut numeric = vec![0.0; analytic.len()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let mut plus = net.clone();
            plus.params_mut()[pi].data_mut()[j] += eps;
            let mut minus = net.clone();
            minus.params_mut()[pi].data_mut()[j] -= eps;
            *slot = (value(&plus, image, loss) - value(&minus, image, loss)) / (2.0 * eps);
        }
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let diff: Vec<f64> = analytic.data().iter().zip(&numeric).map(|(a, b)| a - b).collect();
        let scale = norm(analytic.data()).max(norm(&numeric));
        if scale > floor {
            worst = worst.max(norm(&diff) / scale);
        }
    }
    worst
}

/// Pre-activations closer than this to zero are treated as sitting on a relu
/// kink, where central differences are not a valid oracle.
pub const KINK_MARGIN: f64 = 1e-3;

/// Random old/current network pair with one new class, a 4x4 image and a
/// random pseudo target.
pub struct GradCase {
    pub old: SegNet<f64>,
    pub net: SegNet<f64>,
    pub image: Tensor<f64>,
    pub target: PseudoTarget,
}

/// Draws instances from `seed` until no current-network pre-activation lies
/// within [`KINK_MARGIN`] of zero.
pub fn grad_case(seed: u64) -> GradCase {
    for attempt in 0.. {
        let mut r = css_core::seed::rng(seed, &[0x9c, attempt]);
        let init = r.gen::<u64>();
        let old = SegNet::new(small_arch(), vec![0, 1, 2], init).unwrap();
        let mut net = old.extend_head(&[3], init).unwrap();
        for p in net.params_mut() {
            for v in p.data_mut() {
                *v += r.gen_range(-0.2..0.2);
            }
        }
        let image = random_tensor(vec![3, 4, 4], 1.0, &mut r);
        let taps = net.forward_with_taps(&image).unwrap().taps;
        let near_kink = taps[..taps.len() - 1]
            .iter()
            .flat_map(|t| t.data().iter())
            .any(|v| v.abs() < KINK_MARGIN);
        if near_kink {
            continue;
        }
        return GradCase {
            old: old.freeze_as_old(),
            net,
            image,
            target: random_target(4, 4, 4, &mut r),
        };
    }
    unreachable!()
}

/// Local POD between the frozen old model and the current forward pass, with
/// unit weights so the term is not negligible next to the others.
pub fn pod_term(tape: &mut Tape<f64>, c: &GradCase, fwd: &css_core::model::TapeForward) -> Var {
    let old = c.old.forward_with_taps(&c.image).unwrap();
    let old_taps: Vec<_> = old.taps.into_iter().map(|t| tape.constant(t)).collect();
    let mut new_taps = fwd.taps[..fwd.taps.len() - 1].to_vec();
    new_taps.push(tape.slice(fwd.logits, 0, 0, 3).unwrap());
    let cfg = css_core::localpod::PodConfig {
        lambda_features: 1.0,
        lambda_logits: 1.0,
        ..Default::default()
    };
    css_core::localpod::local_pod_loss(tape, &old_taps, &new_taps, &cfg, 2, 1).unwrap()
}

pub fn pseudo_term(tape: &mut Tape<f64>, c: &GradCase, fwd: &css_core::model::TapeForward) -> Var {
    css_core::pseudolabel::pseudo_ce_loss(tape, fwd.logits, &c.target, true).unwrap()
}

pub fn total_term(tape: &mut Tape<f64>, c: &GradCase, fwd: &css_core::model::TapeForward) -> Var {
    let a = pseudo_term(tape, c, fwd);
    let b = pod_term(tape, c, fwd);
    css_core::pseudolabel::total_loss(tape, a, b).unwrap()
}

/// Random instance for the pseudo-label oracle: ground truth in head-channel
/// space, old-model probabilities, entropies and thresholds.
pub struct PseudoCase {
    pub gt: LabelMap,
    pub current: Vec<u8>,
    pub probs: Tensor<f64>,
    pub u: Tensor<f64>,
    pub thr: css_core::pseudolabel::EntropyThresholds<f64>,
}

pub fn pseudo_case(seed: u64, h: usize, w: usize) -> PseudoCase {
    let mut r = css_core::seed::rng(seed, &[0x9e]);
    let k_old = r.gen_range(2..6);
    let n_new = r.gen_range(1..3);
    let current: Vec<u8> = (k_old..k_old + n_new).map(|c| c as u8).collect();
    let bg_rate = r.gen_range(0.0..1.0);
    let gt: Vec<u8> = (0..h * w)
        .map(|_| if r.gen_bool(bg_rate) { 0 } else { current[r.gen_range(0..n_new)] })
        .collect();
    let mut probs = vec![0.0; k_old * h * w];
    for p in 0..h * w {
        let style = r.gen_range(0..4);
        let raw: Vec<f64> = (0..k_old)
            .map(|_| match style {
                0 => 1.0,
                1 => r.gen_range(0..2) as f64,
                _ => r.gen_range(0.0..1.0f64).powi(3),
            })
            .collect();
        let raw = if raw.iter().all(|&v| v == 0.0) { vec![1.0; k_old] } else { raw };
        let s: f64 = raw.iter().sum();
        for c in 0..k_old {
            probs[c * h * w + p] = raw[c] / s;
        }
    }
    let tau: Vec<f64> = (0..k_old).map(|_| if r.gen_bool(0.2) { 0.0 } else { r.gen_range(0.0..0.5) }).collect();
    let u: Vec<f64> = (0..h * w)
        .map(|_| {
            if r.gen_bool(0.15) {
                tau[r.gen_range(0..k_old)]
            } else {
                r.gen_range(0.0..0.6)
            }
        })
        .collect();
    let mut thr = css_core::pseudolabel::EntropyThresholds::uniform(k_old, 0.5, true);
    thr.tau = tau;
    PseudoCase {
        gt: LabelMap::new(h, w, gt).unwrap(),
        current,
        probs: Tensor::from_f64(vec![k_old, h, w], &probs).unwrap(),
        u: Tensor::from_f64(vec![h, w], &u).unwrap(),
        thr,
    }
}

/// Per-pixel transcription of the pseudo-labeling rule. Rejected pixels keep
/// their background label and are masked out.
pub fn brute_pseudo_target(c: &PseudoCase) -> PseudoTarget {
    let (h, w) = (c.gt.height(), c.gt.width());
    let k_old = c.probs.shape()[0];
    let mut target = c.gt.clone();
    let mut accepted = vec![false; h * w];
    let mut background = 0;
    let mut kept = 0;
    for y in 0..h {
        for x in 0..w {
            let g = c.gt.get(y, x);
            if g != 0 {
                accepted[y * w + x] = true;
                continue;
            }
            background += 1;
            let mut best = 0;
            for k in 1..k_old {
                if c.probs.at(&[k, y, x]) > c.probs.at(&[best, y, x]) {
                    best = k;
                }
            }
            if c.u.at(&[y, x]) < c.thr.tau[best] {
                kept += 1;
                accepted[y * w + x] = true;
                target.set(y, x, best as u8);
            }
        }
    }
    PseudoTarget {
        target,
        accepted,
        nu: if background == 0 { 1.0 } else { kept as f64 / background as f64 },
    }
}

/// Grouped IoU by direct pixel counting: `(per-class, initial, incremented,
/// all)` with classes that never occur in either map left out of the means.
pub fn brute_miou(pairs: &[(Vec<usize>, Vec<usize>)], k: usize, initial: &[usize]) -> (Vec<Option<f64>>, f64, f64, f64) {
    let mut per_class = Vec::new();
    for c in 0..k {
        let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
        for (gt, pred) in pairs {
            for (&g, &p) in gt.iter().zip(pred) {
                match (g == c, p == c) {
                    (true, true) => tp += 1,
                    (false, true) => fp += 1,
                    (true, false) => fn_ += 1,
                    _ => {}
                }
            }
        }
        let denom = tp + fp + fn_;
        per_class.push((denom > 0).then(|| tp as f64 / denom as f64));
    }
    let mean = |keep: &dyn Fn(usize) -> bool| {
        let vals: Vec<f64> = (0..k).filter(|&c| keep(c)).filter_map(|c| per_class[c]).collect();
        if vals.is_empty() {
            f64::NAN
        } else {
            vals.iter().sum::<f64>() / vals.len() as f64
        }
    };
    let a = mean(&|c| initial.contains(&c));
    let b = mean(&|c| !initial.contains(&c));
    let all = mean(&|_| true);
    (per_class, a, b, all)
}
