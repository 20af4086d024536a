//! Step-by-step continual training and evaluation.

use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::config::{DataSource, Method, RunConfig, Timing, VERSION};
use crate::data::{self, Dataset, LabelMap, Sample};
use crate::error::{Error, Result};
use crate::localpod::{local_pod_loss_from_embeddings, old_embeddings};
use crate::metrics::{self, ConfusionMatrix, StepReport};
use crate::model::{CheckpointMeta, ModelPair, SegNet};
use crate::protocol::{build_step_dataset, Mode, Scenario, TaskSchedule};
use crate::pseudolabel::{self, EntropyThresholds, PseudoTarget};
use crate::scalar::Scalar;
use crate::seed;
use crate::tensor::{Sgd, Tape, Tensor, Var};

pub const CONFIG_FILE: &str = "config.txt";
pub const CSV_FILE: &str = "report.csv";
pub const TEXT_FILE: &str = "report.txt";
pub const THRESHOLDS_FILE: &str = "thresholds.tsv";

pub fn step_dir(run: &Path, t: usize) -> std::path::PathBuf {
    run.join(format!("step_{t}"))
}

/// Train and test sets named by the config.
pub fn load_data(cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    match &cfg.data {
        DataSource::Shapes(s) => data::generate(s),
        DataSource::Files { train, test } => {
            let (train, test) = (data::load_dataset(train)?, data::load_dataset(test)?);
            if train.n_classes != test.n_classes {
                return Err(Error::Config(format!(
                    "train set has {} classes, test set {}",
                    train.n_classes, test.n_classes
                )));
            }
            Ok((train, test))
        }
    }
}

pub fn schedule_for(cfg: &RunConfig, train: &Dataset) -> Result<TaskSchedule> {
    let scenario: Scenario = cfg.scenario.parse()?;
    let s = TaskSchedule::new(&scenario, cfg.mode, train.n_classes, train.n_domains())?;
    match &cfg.ordering {
        Some(perm) => s.apply_ordering(perm),
        None => Ok(s),
    }
}

/// Confusion matrix over head channels. Ground-truth pixels of classes the
/// model does not know are skipped.
pub fn evaluate<'a, S: Scalar>(model: &SegNet<S>, samples: impl IntoIterator<Item = &'a Sample>) -> Result<ConfusionMatrix> {
    let ids = model.class_ids();
    let mut channel = [usize::MAX; 256];
    for (ch, &id) in ids.iter().enumerate() {
        if id < 256 {
            channel[id] = ch;
        }
    }
    let mut cm = ConfusionMatrix::new(ids.len());
    let (mut gt, mut pred) = (Vec::new(), Vec::new());
    for s in samples {
        let p = model.predict(&s.image.to_tensor())?;
        gt.clear();
        pred.clear();
        for (&g, &q) in s.mask.data().iter().zip(&p) {
            let ch = channel[g as usize];
            if ch != usize::MAX {
                gt.push(ch);
                pred.push(q);
            }
        }
        cm.accumulate(&gt, &pred)?;
    }
    Ok(cm)
}

/// Test samples used after step `t`: all of them in class modes, those of
/// seen domains in domain mode.
pub fn test_samples<'a>(test: &'a Dataset, schedule: &TaskSchedule, t: usize) -> Vec<&'a Sample> {
    let domains = schedule.seen_domains(t);
    test.samples
        .iter()
        .filter(|s| schedule.mode != Mode::DomainIncremental || domains.contains(&s.domain))
        .collect()
}

/// Metric part of a step report for `model` on `samples`.
pub fn report_for<'a, S: Scalar>(
    step: usize,
    model: &SegNet<S>,
    samples: impl IntoIterator<Item = &'a Sample>,
    initial: &[usize],
) -> Result<StepReport> {
    let cm = evaluate(model, samples)?;
    let mut with_bg = vec![0];
    with_bg.extend_from_slice(initial);
    StepReport::from_confusion(step, &cm, model.class_ids(), &with_bg)
}

/// Emitted after every epoch.
pub struct EpochEvent<'a, S> {
    pub step: usize,
    pub epoch: usize,
    pub model: &'a SegNet<S>,
}

pub struct RunOutcome<S> {
    pub reports: Vec<StepReport>,
    /// Trained model after each step.
    pub models: Vec<SegNet<S>>,
    /// Thresholds used at each step (`None` where no pseudo-labels were built).
    pub thresholds: Vec<Option<EntropyThresholds<S>>>,
}

pub fn run_continual<S: Scalar>(cfg: &RunConfig, out: Option<&Path>) -> Result<RunOutcome<S>> {
    run_continual_observed(cfg, out, &mut |_: &EpochEvent<S>| {})
}

struct StepContext<'a, S> {
    t: usize,
    cfg: &'a RunConfig,
    old: Option<&'a SegNet<S>>,
    thresholds: Option<&'a EntropyThresholds<S>>,
    /// Head channels of the classes introduced at this step.
    current: Vec<u8>,
    n_old: usize,
    n_new: usize,
}

struct ImageLoss {
    total: Var,
    classification: f64,
    distillation: f64,
}

/// What the frozen old model contributes for one (image, flip) pair. The old
/// model does not change within a step, so this is computed once per pair.
struct OldView<S> {
    probs: Tensor<S>,
    embeddings: Vec<Tensor<S>>,
    target: Option<PseudoTarget>,
}

fn old_view<S: Scalar>(ctx: &StepContext<'_, S>, old: &SegNet<S>, image: &Tensor<S>, label: &LabelMap) -> Result<OldView<S>> {
    let cfg = ctx.cfg;
    let out = old.forward_with_taps(image)?;
    let probs = out.logits.softmax_channel()?;
    if cfg.method != Method::Plop {
        return Ok(OldView {
            probs,
            embeddings: Vec::new(),
            target: None,
        });
    }
    let thr = ctx.thresholds.expect("thresholds computed for plop");
    let u = pseudolabel::pixel_entropy(&probs, cfg.pseudo.normalized)?;
    let target = pseudolabel::build_pseudo_target(label, &ctx.current, &probs, &u, thr)?;
    let embeddings = old_embeddings(&out.taps, &cfg.pod)?;
    Ok(OldView {
        probs,
        embeddings,
        target: Some(target),
    })
}

fn image_loss<S: Scalar>(
    tape: &mut Tape<S>,
    ctx: &StepContext<'_, S>,
    logits: Var,
    taps: &[Var],
    view: Option<&OldView<S>>,
    label: &LabelMap,
) -> Result<ImageLoss> {
    let cfg = ctx.cfg;
    let plain = |label: &LabelMap| {
        if cfg.method == Method::Finetune && cfg.finetune_ignore_background && ctx.t > 1 {
            PseudoTarget::foreground_only(label)
        } else {
            PseudoTarget::from_ground_truth(label)
        }
    };
    let Some(view) = view else {
        let cls = pseudolabel::pseudo_ce_loss(tape, logits, &plain(label), true)?;
        let v = tape.value(cls).item().to_f64_lossy();
        return Ok(ImageLoss {
            total: cls,
            classification: v,
            distillation: 0.0,
        });
    };
    let k_old = view.probs.shape()[0];
    let new_old_logits = tape.slice(logits, 0, 0, k_old)?;
    let (cls, distill) = match cfg.method {
        Method::Plop => {
            let target = view.target.as_ref().expect("plop view has a target");
            let cls = pseudolabel::pseudo_ce_loss(tape, logits, target, cfg.pseudo.nu_weighting)?;
            let mut new_taps = taps[..taps.len() - 1].to_vec();
            new_taps.push(new_old_logits);
            let pod = local_pod_loss_from_embeddings(tape, &view.embeddings, &new_taps, &cfg.pod, ctx.n_old, ctx.n_new)?;
            (cls, pod)
        }
        Method::Kd => {
            let cls = pseudolabel::pseudo_ce_loss(tape, logits, &plain(label), true)?;
            let pixels = (label.height() * label.width()) as f64;
            let mask = tape.constant(view.probs.scale(S::of(-cfg.kd_weight / pixels)));
            let logp = tape.log_softmax_channel(new_old_logits)?;
            let prod = tape.mul(mask, logp)?;
            (cls, tape.sum(prod))
        }
        Method::Finetune => unreachable!("finetune never builds an old view"),
    };
    let total = pseudolabel::total_loss(tape, cls, distill)?;
    Ok(ImageLoss {
        total,
        classification: tape.value(cls).item().to_f64_lossy(),
        distillation: tape.value(distill).item().to_f64_lossy(),
    })
}

/// Labels in dataset id space to head channels.
fn to_channels(label: &LabelMap, class_ids: &[usize]) -> Result<LabelMap> {
    let mut channel = [u8::MAX; 256];
    for (ch, &id) in class_ids.iter().enumerate() {
        channel[id] = ch as u8;
    }
    if let Some(&bad) = label.data().iter().find(|&&v| channel[v as usize] == u8::MAX) {
        return Err(Error::invalid(format!("label {bad} has no head channel")));
    }
    Ok(label.map(|v| channel[v as usize]))
}

#[derive(Default)]
struct EpochLosses {
    classification: f64,
    distillation: f64,
}

fn train_step<S: Scalar>(
    model: &mut SegNet<S>,
    ctx: &StepContext<'_, S>,
    images: &[Tensor<S>],
    labels: &[LabelMap],
    observer: &mut dyn FnMut(&EpochEvent<S>),
) -> Result<EpochLosses> {
    let cfg = ctx.cfg;
    let t = ctx.t;
    let (lr0, epochs) = if t == 1 {
        (cfg.optim.lr_first, cfg.optim.epochs_first)
    } else {
        (cfg.optim.lr_next, cfg.optim.epochs_next)
    };
    let mut sgd = Sgd::new(S::of(lr0), S::of(cfg.optim.momentum))?;
    let mut last = EpochLosses::default();
    let old = ctx.old.filter(|_| cfg.method != Method::Finetune);
    let mut views: Vec<[Option<OldView<S>>; 2]> = (0..images.len()).map(|_| [None, None]).collect();
    for epoch in 0..epochs {
        sgd.set_lr(S::of(lr0 * cfg.optim.lr_decay.powi(epoch as i32)));
        let mut order: Vec<usize> = (0..images.len()).collect();
        order.shuffle(&mut seed::rng(cfg.seed, &[seed::SHUFFLE, t as u64, epoch as u64]));
        let mut flip_rng = seed::rng(cfg.seed, &[seed::FLIP, t as u64, epoch as u64]);
        let flips: Vec<bool> = order.iter().map(|_| cfg.flip && flip_rng.gen_bool(0.5)).collect();
        let mut sums = EpochLosses::default();
        for (batch, batch_flips) in order.chunks(cfg.optim.batch_size).zip(flips.chunks(cfg.optim.batch_size)) {
            let mut acc: Option<Vec<Tensor<S>>> = None;
            for (&i, &flip) in batch.iter().zip(batch_flips) {
                let (image, label) = if flip {
                    (images[i].flip_last(), labels[i].flip_horizontal())
                } else {
                    (images[i].clone(), labels[i].clone())
                };
                let view = match old {
                    Some(old) => {
                        let slot = &mut views[i][flip as usize];
                        if slot.is_none() {
                            *slot = Some(old_view(ctx, old, &image, &label)?);
                        }
                        slot.as_ref()
                    }
                    None => None,
                };
                let mut tape = Tape::new();
                let fwd = model.forward_tape(&mut tape, &image)?;
                let loss = image_loss(&mut tape, ctx, fwd.logits, &fwd.taps, view, &label)?;
                if !tape.value(loss.total).is_finite() {
                    return Err(Error::Numerical { step: t, epoch: epoch + 1 });
                }
                sums.classification += loss.classification;
                sums.distillation += loss.distillation;
                let mut grads = tape.backward(loss.total)?;
                let g: Vec<Tensor<S>> = fwd.params.iter().map(|&p| grads.take(p)).collect();
                acc = Some(match acc {
                    None => g,
                    Some(a) => a.iter().zip(&g).map(|(x, y)| x.add(y)).collect::<Result<_>>()?,
                });
            }
            let inv = S::one() / S::of_usize(batch.len());
            let grads: Vec<Tensor<S>> = acc.expect("non-empty batch").iter().map(|g| g.scale(inv)).collect();
            if grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::Numerical { step: t, epoch: epoch + 1 });
            }
            sgd.step(&mut model.params_mut(), &grads)?;
        }
        let n = images.len() as f64;
        last = EpochLosses {
            classification: sums.classification / n,
            distillation: sums.distillation / n,
        };
        observer(&EpochEvent {
            step: t,
            epoch: epoch + 1,
            model,
        });
    }
    Ok(last)
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Trains every step of the configured scenario. When `out` is given, writes
/// the config, per-step checkpoints and threshold tables, and the reports.
pub fn run_continual_observed<S: Scalar>(
    cfg: &RunConfig,
    out: Option<&Path>,
    observer: &mut dyn FnMut(&EpochEvent<S>),
) -> Result<RunOutcome<S>> {
    cfg.validate()?;
    let (train, test) = load_data(cfg)?;
    let schedule = schedule_for(cfg, &train)?;
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_file(&dir.join(CONFIG_FILE), &format!("# css {VERSION}\n{}", cfg.to_text()))?;
    }
    let initial = schedule.current_classes(1).to_vec();
    let mut outcome = RunOutcome {
        reports: Vec::new(),
        models: Vec::new(),
        thresholds: Vec::new(),
    };
    let mut pair: Option<ModelPair<S>> = None;
    for t in 1..=schedule.n_steps() {
        let started = Instant::now();
        let step = (|| -> Result<(StepReport, ModelPair<S>, Option<EntropyThresholds<S>>)> {
            let step_ds = build_step_dataset(&train, &schedule, t)?;
            let images: Vec<Tensor<S>> = step_ds.indices.iter().map(|&i| train.samples[i].image.to_tensor()).collect();
            let current_ids = schedule.current_classes(t).to_vec();
            let mut p = match pair.take() {
                None => {
                    let mut ids = vec![0];
                    ids.extend_from_slice(&current_ids);
                    ModelPair::first(SegNet::new(cfg.model.clone(), ids, cfg.seed)?)
                }
                Some(p) => p.advance(&current_ids, cfg.seed)?,
            };
            let labels: Vec<LabelMap> = step_ds
                .labels
                .iter()
                .map(|l| to_channels(l, p.current.class_ids()))
                .collect::<Result<_>>()?;
            let thresholds = match (&p.old, cfg.method) {
                (Some(old), Method::Plop) => Some(pseudolabel::compute_thresholds(
                    old,
                    &images,
                    S::of(cfg.pseudo.tau_max),
                    cfg.pseudo.normalized,
                )?),
                _ => None,
            };
            let domain = cfg.mode == Mode::DomainIncremental;
            let k = p.current.n_outputs();
            let k_old = p.old.as_ref().map_or(0, |o| o.n_outputs());
            let current: Vec<u8> = if domain {
                (1..k as u8).collect()
            } else {
                (k_old as u8..k as u8).collect()
            };
            let ctx = StepContext {
                t,
                cfg,
                old: p.old.as_ref(),
                thresholds: thresholds.as_ref(),
                current,
                n_old: if domain { 0 } else { k_old.saturating_sub(1) },
                n_new: if domain { k - 1 } else { current_ids.len() },
            };
            let mut model = p.current.clone();
            let losses = train_step(&mut model, &ctx, &images, &labels, observer)?;
            p.current = model;
            let mut report = report_for(t, &p.current, test_samples(&test, &schedule, t), &initial)?;
            report.loss_pseudo = losses.classification;
            report.loss_distill = losses.distillation;
            Ok((report, p, thresholds))
        })()
        .map_err(|e| e.at_step(t))?;
        let (mut report, p, thresholds) = step;
        let history: Vec<f64> = outcome
            .reports
            .iter()
            .map(|r| r.miou_all)
            .chain([report.miou_all])
            .collect();
        report.avg_so_far = metrics::avg_metric(&history)?;
        report.seconds = match cfg.timing {
            Timing::Wall => started.elapsed().as_secs_f64(),
            Timing::Off => 0.0,
        };
        outcome.reports.push(report);
        if let Some(dir) = out {
            let sd = step_dir(dir, t);
            let meta = CheckpointMeta {
                step: t,
                seed: cfg.seed,
                initial_classes: initial.clone(),
            };
            p.current.save(&sd, &meta).map_err(|e| e.at_step(t))?;
            if let Some(thr) = &thresholds {
                let ids = p.old.as_ref().expect("thresholds need an old model").class_ids();
                write_file(&sd.join(THRESHOLDS_FILE), &thr.to_tsv(ids))?;
            }
            write_file(&dir.join(CSV_FILE), &metrics::to_csv(&outcome.reports))?;
            write_file(&dir.join(TEXT_FILE), &metrics::to_text(&outcome.reports))?;
        }
        outcome.models.push(p.current.clone());
        outcome.thresholds.push(thresholds);
        pair = Some(p);
    }
    Ok(outcome)
}
