//! Entropy-filtered pseudo-labels for background pixels and the
//! acceptance-weighted cross-entropy built on them.

use std::fmt::Write as _;

use crate::data::LabelMap;
use crate::error::{Error, Result};
use crate::model::SegNet;
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};

pub const DEFAULT_TAU_MAX: f64 = 1e-3;

/// Per-pixel entropy of channel-first probabilities `[K, H, W]`, optionally
/// divided by `ln K`.
pub fn pixel_entropy<S: Scalar>(probs: &Tensor<S>, normalized: bool) -> Result<Tensor<S>> {
    if probs.rank() != 3 {
        return Err(Error::invalid(format!("entropy needs [K,H,W], got {:?}", probs.shape())));
    }
    let (k, h, w) = (probs.shape()[0], probs.shape()[1], probs.shape()[2]);
    if k < 2 {
        return Err(Error::invalid(format!("entropy needs at least 2 classes, got {k}")));
    }
    let plane = h * w;
    let norm = if normalized { S::of_usize(k).ln() } else { S::one() };
    let p = probs.data();
    let out = (0..plane)
        .map(|i| {
            let e: S = (0..k)
                .map(|c| p[c * plane + i])
                .filter(|&q| q > S::zero())
                .map(|q| -q * q.ln())
                .sum();
            e / norm
        })
        .collect();
    Tensor::new(vec![h, w], out)
}

/// Per-class entropy thresholds of the frozen model, indexed by its head channel.
#[derive(Clone, Debug, PartialEq)]
pub struct EntropyThresholds<S> {
    pub tau: Vec<S>,
    pub tau_max: S,
    pub normalized: bool,
    /// Pixels predicted as each channel during collection.
    pub pixels: Vec<usize>,
    /// Uncapped medians; `None` for channels never predicted.
    pub medians: Vec<Option<S>>,
}

impl<S: Scalar> EntropyThresholds<S> {
    /// Every channel at the same threshold.
    pub fn uniform(n_channels: usize, tau: S, normalized: bool) -> Self {
        EntropyThresholds {
            tau: vec![tau; n_channels],
            tau_max: tau,
            normalized,
            pixels: vec![0; n_channels],
            medians: vec![None; n_channels],
        }
    }

    pub fn n_channels(&self) -> usize {
        self.tau.len()
    }

    /// Tab-separated table: channel, class id, pixel count, raw median, tau.
    pub fn to_tsv(&self, class_ids: &[usize]) -> String {
        let mut out = String::from("channel\tclass\tpixels\tmedian\ttau\n");
        for c in 0..self.tau.len() {
            let median = self.medians[c].map_or_else(|| "none".to_string(), |m| format!("{:e}", m.to_f64_lossy()));
            let id = class_ids.get(c).copied().unwrap_or(c);
            let _ = writeln!(out, "{c}\t{id}\t{}\t{median}\t{:e}", self.pixels[c], self.tau[c].to_f64_lossy());
        }
        out
    }
}

/// Gathers entropies by predicted channel, then reduces to capped medians.
#[derive(Clone, Debug)]
pub struct ThresholdCollector<S> {
    entropies: Vec<Vec<S>>,
    normalized: bool,
    images: usize,
}

impl<S: Scalar> ThresholdCollector<S> {
    pub fn new(n_channels: usize, normalized: bool) -> Self {
        ThresholdCollector {
            entropies: vec![Vec::new(); n_channels],
            normalized,
            images: 0,
        }
    }

    /// Adds one image worth of old-model probabilities `[K, H, W]`.
    pub fn add_probs(&mut self, probs: &Tensor<S>) -> Result<()> {
        if probs.rank() != 3 || probs.shape()[0] != self.entropies.len() {
            return Err(Error::ShapeMismatch {
                op: "threshold collection",
                lhs: vec![self.entropies.len(), 0, 0],
                rhs: probs.shape().to_vec(),
            });
        }
        let u = pixel_entropy(probs, self.normalized)?;
        for (&c, &e) in probs.argmax_channel().iter().zip(u.data()) {
            self.entropies[c].push(e);
        }
        self.images += 1;
        Ok(())
    }

    /// Combines two collectors; the result does not depend on merge order
    /// because [`finish`](Self::finish) sorts before taking medians.
    pub fn merge(&mut self, other: ThresholdCollector<S>) -> Result<()> {
        if other.entropies.len() != self.entropies.len() || other.normalized != self.normalized {
            return Err(Error::invalid("merging incompatible threshold collectors"));
        }
        for (a, b) in self.entropies.iter_mut().zip(other.entropies) {
            a.extend(b);
        }
        self.images += other.images;
        Ok(())
    }

    pub fn finish(mut self, tau_max: S) -> Result<EntropyThresholds<S>> {
        if self.images == 0 {
            return Err(Error::invalid("thresholds need at least one image"));
        }
        if tau_max.is_nan() || tau_max < S::zero() {
            return Err(Error::invalid(format!("tau_max must be >= 0, got {tau_max}")));
        }
        let pixels = self.entropies.iter().map(Vec::len).collect();
        let medians: Vec<Option<S>> = self.entropies.iter_mut().map(|v| median(v)).collect();
        let tau = medians
            .iter()
            .map(|m| m.map_or(tau_max, |m| if m < tau_max { m } else { tau_max }))
            .collect();
        Ok(EntropyThresholds {
            tau,
            tau_max,
            normalized: self.normalized,
            pixels,
            medians,
        })
    }
}

/// Median; mean of the middle two for even counts. Sorts `v` in place.
pub fn median<S: Scalar>(v: &mut [S]) -> Option<S> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite entropies"));
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / S::of(2.0)
    })
}

/// Thresholds of `old` over the step's training images.
pub fn compute_thresholds<'a, S: Scalar>(
    old: &SegNet<S>,
    images: impl IntoIterator<Item = &'a Tensor<S>>,
    tau_max: S,
    normalized: bool,
) -> Result<EntropyThresholds<S>> {
    let mut col = ThresholdCollector::new(old.n_outputs(), normalized);
    for img in images {
        col.add_probs(&old.logits(img)?.softmax_channel()?)?;
    }
    col.finish(tau_max)
}

/// Training target for one image, in head-channel space.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoTarget {
    pub target: LabelMap,
    /// Pixels that contribute to the loss, row-major.
    pub accepted: Vec<bool>,
    pub nu: f64,
}

impl PseudoTarget {
    /// Plain supervision: every pixel accepted, `nu = 1`.
    pub fn from_ground_truth(gt: &LabelMap) -> Self {
        PseudoTarget {
            target: gt.clone(),
            accepted: vec![true; gt.data().len()],
            nu: 1.0,
        }
    }

    /// Supervision on non-background pixels only, `nu = 1`.
    pub fn foreground_only(gt: &LabelMap) -> Self {
        PseudoTarget {
            target: gt.clone(),
            accepted: gt.data().iter().map(|&v| v != 0).collect(),
            nu: 1.0,
        }
    }

    pub fn n_accepted(&self) -> usize {
        self.accepted.iter().filter(|&&a| a).count()
    }
}

/// Ground truth of current classes plus confident old-model labels on
/// background pixels.
///
/// `gt` is in head-channel space of the current model and may only hold 0 or
/// channels listed in `current`. `old_probs` is `[K_old, H, W]`; `u` holds the
/// entropies used against `thr`. A background pixel is kept iff
/// `u < tau[argmax]` (strict).
pub fn build_pseudo_target<S: Scalar>(
    gt: &LabelMap,
    current: &[u8],
    old_probs: &Tensor<S>,
    u: &Tensor<S>,
    thr: &EntropyThresholds<S>,
) -> Result<PseudoTarget> {
    let (h, w) = (gt.height(), gt.width());
    if old_probs.rank() != 3 || old_probs.shape()[1..] != [h, w] || u.shape() != [h, w] {
        return Err(Error::ShapeMismatch {
            op: "pseudo target",
            lhs: vec![h, w],
            rhs: [old_probs.shape(), u.shape()].concat(),
        });
    }
    let k_old = old_probs.shape()[0];
    if thr.n_channels() != k_old {
        return Err(Error::invalid(format!(
            "{} thresholds for {k_old} old channels",
            thr.n_channels()
        )));
    }
    if let Some(&bad) = gt.data().iter().find(|&&v| v != 0 && !current.contains(&v)) {
        return Err(Error::invalid(format!(
            "label {bad} is neither background nor a current class {current:?}"
        )));
    }
    let argmax = old_probs.argmax_channel();
    let mut target = gt.clone();
    let mut accepted = vec![true; h * w];
    let (mut bg, mut bg_acc) = (0usize, 0usize);
    for (i, &g) in gt.data().iter().enumerate() {
        if g != 0 {
            continue;
        }
        bg += 1;
        let c = argmax[i];
        if u.data()[i] < thr.tau[c] {
            bg_acc += 1;
            target.set(i / w, i % w, c as u8);
        } else {
            accepted[i] = false;
        }
    }
    let nu = if bg == 0 { 1.0 } else { bg_acc as f64 / bg as f64 };
    Ok(PseudoTarget { target, accepted, nu })
}

fn ce_mask<S: Scalar>(n_channels: usize, tgt: &PseudoTarget, use_nu: bool) -> Result<Tensor<S>> {
    let (h, w) = (tgt.target.height(), tgt.target.width());
    let plane = h * w;
    let n_acc = tgt.n_accepted();
    let mut mask = vec![S::zero(); n_channels * plane];
    if n_acc > 0 {
        let nu = if use_nu { tgt.nu } else { 1.0 };
        let weight = S::of(-nu) / S::of_usize(n_acc);
        for (i, (&c, &a)) in tgt.target.data().iter().zip(&tgt.accepted).enumerate() {
            if !a {
                continue;
            }
            if c as usize >= n_channels {
                return Err(Error::invalid(format!("target channel {c} with {n_channels} logits")));
            }
            mask[c as usize * plane + i] = weight;
        }
    }
    Tensor::new(vec![n_channels, h, w], mask)
}

fn check_logits(shape: &[usize], tgt: &PseudoTarget) -> Result<()> {
    if shape.len() != 3 || shape[1] != tgt.target.height() || shape[2] != tgt.target.width() {
        return Err(Error::ShapeMismatch {
            op: "pseudo cross-entropy",
            lhs: shape.to_vec(),
            rhs: vec![tgt.target.height(), tgt.target.width()],
        });
    }
    Ok(())
}

/// `nu / N_acc * sum_accepted -log softmax(logits)[target]`, or 0 when no
/// pixel is accepted. `use_nu = false` drops the `nu` factor.
pub fn pseudo_ce_loss<S: Scalar>(tape: &mut Tape<S>, logits: Var, tgt: &PseudoTarget, use_nu: bool) -> Result<Var> {
    let shape = tape.shape(logits).to_vec();
    check_logits(&shape, tgt)?;
    let mask = tape.constant(ce_mask(shape[0], tgt, use_nu)?);
    let logp = tape.log_softmax_channel(logits)?;
    let prod = tape.mul(mask, logp)?;
    Ok(tape.sum(prod))
}

/// Value of [`pseudo_ce_loss`] on a plain tensor.
pub fn pseudo_ce_value<S: Scalar>(logits: &Tensor<S>, tgt: &PseudoTarget, use_nu: bool) -> Result<S> {
    check_logits(logits.shape(), tgt)?;
    let mask = ce_mask(logits.shape()[0], tgt, use_nu)?;
    Ok(mask.mul(&logits.log_softmax_channel()?)?.sum())
}

/// Classification plus distillation.
pub fn total_loss<S: Scalar>(tape: &mut Tape<S>, pseudo: Var, distill: Var) -> Result<Var> {
    tape.add(pseudo, distill)
}
