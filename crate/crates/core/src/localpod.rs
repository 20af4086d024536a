//! Pooled-output distillation: width/height pooled statistics of feature maps,
//! computed globally (POD) and over a spatial pyramid of sub-regions (Local POD),
//! and the L2 distillation loss between old and current model embeddings.
//!
//! Embedding layout is canonical: divisions ascending, regions row-major,
//! the width-pooled part before the height-pooled part, channels innermost.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{pyramid_pool, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct PodConfig {
    /// Grid divisions `d`; each contributes `d x d` sub-regions.
    pub divisions: Vec<usize>,
    /// Square feature values before pooling (not applied to logits).
    pub square_values: bool,
    pub lambda_features: f64,
    pub lambda_logits: f64,
    /// Scale weights by `sqrt(seen classes / new classes)`.
    pub adaptive_weighting: bool,
}

impl Default for PodConfig {
    fn default() -> Self {
        PodConfig {
            divisions: vec![1, 2, 4],
            square_values: true,
            lambda_features: 1e-2,
            lambda_logits: 5e-4,
            adaptive_weighting: true,
        }
    }
}

impl PodConfig {
    pub fn validate(&self) -> Result<()> {
        if self.divisions.is_empty() || self.divisions[0] == 0 {
            return Err(Error::Config(format!("invalid POD divisions {:?}", self.divisions)));
        }
        if self.divisions.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "POD divisions must be strictly increasing, got {:?}",
                self.divisions
            )));
        }
        if !(self.lambda_features >= 0.0 && self.lambda_logits >= 0.0) {
            return Err(Error::Config("POD weights must be non-negative".into()));
        }
        Ok(())
    }

    pub fn max_division(&self) -> usize {
        self.divisions.iter().copied().max().unwrap_or(1)
    }

    /// Rejects a spatial size not divisible by every grid division.
    pub fn check_divides(&self, h: usize, w: usize) -> Result<()> {
        check_divisions(&self.divisions, h, w)
    }

    /// Multiplier applied to both weights: `sqrt((n_old + n_new) / n_new)` when adaptive.
    pub fn adaptive_factor(&self, n_old: usize, n_new: usize) -> f64 {
        if self.adaptive_weighting {
            ((n_old + n_new) as f64 / n_new as f64).sqrt()
        } else {
            1.0
        }
    }

    /// Embedding length for a `[C, H, W]` map: `sum_d d * (H + W) * C`.
    pub fn embedding_len(&self, c: usize, h: usize, w: usize) -> usize {
        self.divisions.iter().map(|d| d * (h + w) * c).sum()
    }
}

fn check_divisions(divisions: &[usize], h: usize, w: usize) -> Result<()> {
    for &d in divisions {
        if d == 0 || h % d != 0 || w % d != 0 {
            return Err(Error::invalid(format!(
                "division {d} does not divide feature size H={h}, W={w}"
            )));
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolPart {
    /// Mean over the width axis: one entry per (row, channel).
    WidthPooled,
    /// Mean over the height axis: one entry per (column, channel).
    HeightPooled,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segment {
    pub division: usize,
    pub region: (usize, usize),
    pub part: PoolPart,
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PodEmbedding<S> {
    pub values: Tensor<S>,
    pub layout: Vec<Segment>,
}

fn chw<S: Scalar>(x: &Tensor<S>) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(Error::invalid(format!("POD expects a [C, H, W] map, got {:?}", x.shape()))),
    }
}

/// Appends the POD statistics of `x[:, rows, cols]` to `out`.
fn pool_region<S: Scalar>(
    x: &Tensor<S>,
    rows: std::ops::Range<usize>,
    cols: std::ops::Range<usize>,
    square: bool,
    out: &mut Vec<S>,
) {
    let (c_n, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let d = x.data();
    let val = |c: usize, y: usize, xx: usize| {
        let v = d[(c * h + y) * w + xx];
        if square {
            v * v
        } else {
            v
        }
    };
    let inv_w = S::one() / S::of_usize(cols.len());
    let inv_h = S::one() / S::of_usize(rows.len());
    for y in rows.clone() {
        for c in 0..c_n {
            let s: S = cols.clone().map(|xx| val(c, y, xx)).sum();
            out.push(s * inv_w);
        }
    }
    for xx in cols.clone() {
        for c in 0..c_n {
            let s: S = rows.clone().map(|y| val(c, y, xx)).sum();
            out.push(s * inv_h);
        }
    }
}

/// Width-pooled then height-pooled means of `x` (optionally squared first),
/// length `(H + W) * C`.
pub fn pod_embedding<S: Scalar>(x: &Tensor<S>, square_values: bool) -> Result<PodEmbedding<S>> {
    pyramid_embedding(x, &[1], square_values)
}

/// Concatenated POD embeddings of every sub-region at every division.
pub fn local_pod_embedding<S: Scalar>(x: &Tensor<S>, cfg: &PodConfig) -> Result<PodEmbedding<S>> {
    cfg.validate()?;
    pyramid_embedding(x, &cfg.divisions, cfg.square_values)
}

fn pyramid_embedding<S: Scalar>(x: &Tensor<S>, divisions: &[usize], square: bool) -> Result<PodEmbedding<S>> {
    let (c, h, w) = chw(x)?;
    check_divisions(divisions, h, w)?;
    let mut values = Vec::new();
    let mut layout = Vec::new();
    for &d in divisions {
        let (rh, rw) = (h / d, w / d);
        for i in 0..d {
            for j in 0..d {
                pool_region(x, i * rh..(i + 1) * rh, j * rw..(j + 1) * rw, square, &mut values);
                layout.push(Segment {
                    division: d,
                    region: (i, j),
                    part: PoolPart::WidthPooled,
                    len: rh * c,
                });
                layout.push(Segment {
                    division: d,
                    region: (i, j),
                    part: PoolPart::HeightPooled,
                    len: rw * c,
                });
            }
        }
    }
    let n = values.len();
    Ok(PodEmbedding {
        values: Tensor::new(vec![n], values)?,
        layout,
    })
}

/// Records the pyramid embedding of `x` on the tape; same layout as
/// [`local_pod_embedding`].
pub fn embedding_var<S: Scalar>(tape: &mut Tape<S>, x: Var, divisions: &[usize], square: bool) -> Result<Var> {
    let (_, h, w) = match *tape.shape(x) {
        [c, h, w] => (c, h, w),
        ref s => return Err(Error::invalid(format!("POD expects a [C, H, W] map, got {s:?}"))),
    };
    check_divisions(divisions, h, w)?;
    let src = if square { tape.square(x)? } else { x };
    let mut parts = Vec::new();
    for &d in divisions {
        let (rh, rw) = (h / d, w / d);
        for i in 0..d {
            let band = tape.slice(src, 1, i * rh, (i + 1) * rh)?;
            for j in 0..d {
                let region = tape.slice(band, 2, j * rw, (j + 1) * rw)?;
                for axis in [2, 1] {
                    let pooled = tape.mean_axis(region, axis)?;
                    let t = tape.transpose2(pooled)?;
                    parts.push(tape.flatten(t)?);
                }
            }
        }
    }
    tape.concat(&parts, 0)
}

struct TapWeights {
    features: f64,
    logits: f64,
}

fn tap_weights(cfg: &PodConfig, n_old: usize, n_new: usize, n_taps: usize) -> Result<TapWeights> {
    if n_new == 0 {
        return Err(Error::invalid("Local POD needs at least one new class"));
    }
    let a = cfg.adaptive_factor(n_old, n_new) / n_taps as f64;
    Ok(TapWeights {
        features: cfg.lambda_features * a,
        logits: cfg.lambda_logits * a,
    })
}

fn check_pairs(old: &[&[usize]], new: &[&[usize]]) -> Result<()> {
    if old.is_empty() || old.len() != new.len() {
        return Err(Error::invalid(format!(
            "Local POD needs equal, non-empty tap lists (old {}, new {})",
            old.len(),
            new.len()
        )));
    }
    for (o, n) in old.iter().zip(new) {
        if o != n {
            return Err(Error::ShapeMismatch {
                op: "local_pod_loss",
                lhs: o.to_vec(),
                rhs: n.to_vec(),
            });
        }
    }
    Ok(())
}

/// Multi-scale distillation loss
/// `(1/L) * sum_l w_l * ||Psi(new_l) - Psi(old_l)||^2`.
///
/// The last tap pair is the logits entry: weighted by `lambda_logits` and never
/// squared. All other taps use `lambda_features`. `n_old` counts classes seen
/// before this step, `n_new` those introduced by it. Only `new_taps` receive
/// gradients; old taps must not require them.
pub fn local_pod_loss<S: Scalar>(
    tape: &mut Tape<S>,
    old_taps: &[Var],
    new_taps: &[Var],
    cfg: &PodConfig,
    n_old: usize,
    n_new: usize,
) -> Result<Var> {
    if old_taps.iter().any(|v| tape.requires_grad(*v)) {
        return Err(Error::invalid("old-model taps must not require gradients"));
    }
    let old: Vec<Tensor<S>> = old_taps.iter().map(|v| tape.value(*v).clone()).collect();
    let new_shapes: Vec<&[usize]> = new_taps.iter().map(|v| tape.shape(*v)).collect();
    check_pairs(&old.iter().map(|t| t.shape()).collect::<Vec<_>>(), &new_shapes)?;
    let old_emb = old_embeddings(&old, cfg)?;
    local_pod_loss_from_embeddings(tape, &old_emb, new_taps, cfg, n_old, n_new)
}

/// Embeddings of the old model's taps as used by the loss: the last entry
/// (logits) is never squared.
pub fn old_embeddings<S: Scalar>(old_taps: &[Tensor<S>], cfg: &PodConfig) -> Result<Vec<Tensor<S>>> {
    cfg.validate()?;
    let last = old_taps.len().saturating_sub(1);
    old_taps
        .iter()
        .enumerate()
        .map(|(l, t)| pyramid_pool(t, &cfg.divisions, l != last && cfg.square_values))
        .collect()
}

/// [`local_pod_loss`] with the old side given as precomputed
/// [`old_embeddings`].
pub fn local_pod_loss_from_embeddings<S: Scalar>(
    tape: &mut Tape<S>,
    old_emb: &[Tensor<S>],
    new_taps: &[Var],
    cfg: &PodConfig,
    n_old: usize,
    n_new: usize,
) -> Result<Var> {
    cfg.validate()?;
    if old_emb.is_empty() || old_emb.len() != new_taps.len() {
        return Err(Error::invalid(format!(
            "Local POD needs equal, non-empty tap lists (old {}, new {})",
            old_emb.len(),
            new_taps.len()
        )));
    }
    let w = tap_weights(cfg, n_old, n_new, new_taps.len())?;
    let last = new_taps.len() - 1;
    let mut total: Option<Var> = None;
    for (l, (o, &n)) in old_emb.iter().zip(new_taps).enumerate() {
        let (weight, square) = if l == last {
            (w.logits, false)
        } else {
            (w.features, cfg.square_values)
        };
        let en = tape.pyramid_pool(n, &cfg.divisions, square)?;
        if tape.shape(en) != o.shape() {
            return Err(Error::ShapeMismatch {
                op: "local_pod_loss",
                lhs: o.shape().to_vec(),
                rhs: tape.shape(en).to_vec(),
            });
        }
        let eo = tape.constant(o.clone());
        let diff = tape.sub(en, eo)?;
        let sq = tape.square(diff)?;
        let dist = tape.sum(sq);
        let term = tape.scale(dist, S::of(weight));
        total = Some(match total {
            None => term,
            Some(acc) => tape.add(acc, term)?,
        });
    }
    Ok(total.expect("at least one tap"))
}

/// Value of [`local_pod_loss`] on plain tensors.
pub fn local_pod_loss_value<S: Scalar>(
    old_taps: &[Tensor<S>],
    new_taps: &[Tensor<S>],
    cfg: &PodConfig,
    n_old: usize,
    n_new: usize,
) -> Result<S> {
    cfg.validate()?;
    let old_shapes: Vec<&[usize]> = old_taps.iter().map(|t| t.shape()).collect();
    let new_shapes: Vec<&[usize]> = new_taps.iter().map(|t| t.shape()).collect();
    check_pairs(&old_shapes, &new_shapes)?;
    let w = tap_weights(cfg, n_old, n_new, old_taps.len())?;
    let last = old_taps.len() - 1;
    let mut total = S::zero();
    for (l, (o, n)) in old_taps.iter().zip(new_taps).enumerate() {
        let (weight, square) = if l == last {
            (w.logits, false)
        } else {
            (w.features, cfg.square_values)
        };
        let eo = pyramid_embedding(o, &cfg.divisions, square)?;
        let en = pyramid_embedding(n, &cfg.divisions, square)?;
        let dist: S = eo
            .values
            .data()
            .iter()
            .zip(en.values.data())
            .map(|(&a, &b)| (b - a) * (b - a))
            .sum();
        total += dist * S::of(weight);
    }
    Ok(total)
}

/// Global (single-scale) POD loss, computed directly from row and column means
/// with the same tap weighting as [`local_pod_loss`]. `cfg.divisions` is ignored.
pub fn pod_loss_value<S: Scalar>(
    old_taps: &[Tensor<S>],
    new_taps: &[Tensor<S>],
    cfg: &PodConfig,
    n_old: usize,
    n_new: usize,
) -> Result<S> {
    let old_shapes: Vec<&[usize]> = old_taps.iter().map(|t| t.shape()).collect();
    let new_shapes: Vec<&[usize]> = new_taps.iter().map(|t| t.shape()).collect();
    check_pairs(&old_shapes, &new_shapes)?;
    let w = tap_weights(cfg, n_old, n_new, old_taps.len())?;
    let last = old_taps.len() - 1;
    let mut total = S::zero();
    for (l, (o, n)) in old_taps.iter().zip(new_taps).enumerate() {
        let (weight, square) = if l == last {
            (w.logits, false)
        } else {
            (w.features, cfg.square_values)
        };
        let prep = |t: &Tensor<S>| if square { t.mul(t) } else { Ok(t.clone()) };
        let (po, pn) = (prep(o)?, prep(n)?);
        let (_, h, wd) = chw(o)?;
        let c = o.shape()[0];
        // row means: mean over width -> [C, H]; column means: mean over height -> [C, W]
        let rows = (po.mean_axis(2)?, pn.mean_axis(2)?);
        let cols = (po.mean_axis(1)?, pn.mean_axis(1)?);
        debug_assert_eq!(rows.0.len(), c * h);
        debug_assert_eq!(cols.0.len(), c * wd);
        let dist = |a: &Tensor<S>, b: &Tensor<S>| -> S {
            a.data().iter().zip(b.data()).map(|(&x, &y)| (y - x) * (y - x)).sum()
        };
        total += (dist(&rows.0, &rows.1) + dist(&cols.0, &cols.1)) * S::of(weight);
    }
    Ok(total)
}
