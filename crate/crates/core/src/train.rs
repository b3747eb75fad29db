//! Training loop, validation and top-k checkpoint retention.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use gastwin_tensor::{no_grad, Real, RngState, TensorError};
use serde::Serialize;

use crate::checkpoint;
use crate::data::{augment, collate, resize_pair, Sample};
use crate::error::{Error, Result};
use crate::losses::multi_task_loss;
use crate::metrics::{diet_metrics, miou_mf1, ConfusionMatrix, DietScores, SegScores};
use crate::model::{segment, GasTwinFormer, Mode};
use crate::optim::{lr_at, AdamW};

/// Validation batch size; does not affect results.
const EVAL_BATCH: usize = 16;

/// One line of the metric log.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LogLine {
    pub iter: usize,
    pub lr: f64,
    /// Mean training losses since the previous log line (`null` at
    /// iteration 0).
    pub loss_total: Option<f64>,
    pub loss_seg: Option<f64>,
    pub loss_cls: Option<f64>,
    pub val_miou: f64,
    pub val_mf1: f64,
    pub val_diet_acc: f64,
}

impl LogLine {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("log line serializes")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Evaluation {
    pub seg: SegScores,
    pub diet: DietScores,
}

impl Evaluation {
    /// Foreground-class IoU as a fraction in [0, 1].
    pub fn foreground_iou(&self) -> f64 {
        self.seg.per_class.get(1).and_then(|c| c.iou).unwrap_or(0.0) / 100.0
    }
}

/// Inference over a sample set: confusion matrix and diet predictions.
pub fn evaluate<T: Real>(model: &GasTwinFormer<T>, samples: &[Sample]) -> Result<Evaluation> {
    let k = model.config.decoder.num_classes;
    let mut cm = ConfusionMatrix::new(k);
    let (mut preds, mut gts) = (Vec::new(), Vec::new());
    no_grad(|| -> Result<()> {
        for chunk in samples.chunks(EVAL_BATCH) {
            let refs: Vec<&Sample> = chunk.iter().collect();
            let (x, mask, diet) = collate::<T>(&refs)?;
            let out = model.forward(&x, &mut Mode::Eval)?;
            cm.accumulate(&segment(&out.seg_logits)?, &mask)?;
            let logits = out.diet_logits.to_f64_vec();
            let c = out.diet_logits.dim(1);
            for row in logits.chunks(c) {
                preds.push(argmax(row));
            }
            gts.extend(diet);
        }
        Ok(())
    })?;
    Ok(Evaluation {
        seg: miou_mf1(&cm),
        diet: diet_metrics(&preds, &gts, model.config.classifier.num_classes)?,
    })
}

/// Index of the largest value; ties go to the lower index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug)]
pub struct TrainOptions {
    /// Where checkpoints and `metrics.jsonl` go; nothing is written when
    /// `None`.
    pub out_dir: Option<PathBuf>,
    /// Echo each log line to stderr.
    pub verbose: bool,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub log: Vec<LogLine>,
    pub evaluations: Vec<(usize, Evaluation)>,
    /// `(val mIoU, iteration, path)` of retained checkpoints, best first.
    pub kept: Vec<(f64, usize, Option<PathBuf>)>,
}

impl TrainReport {
    pub fn log_text(&self) -> String {
        self.log.iter().map(|l| l.to_json() + "\n").collect()
    }

    pub fn final_evaluation(&self) -> Option<&Evaluation> {
        self.evaluations.last().map(|(_, e)| e)
    }
}

/// Resizes every sample to the model's input size.
pub fn prepare(samples: &[Sample], size: (usize, usize)) -> Result<Vec<Sample>> {
    samples.iter().map(|s| resize_pair(s, size)).collect()
}

struct Window {
    total: f64,
    seg: f64,
    cls: f64,
    n: usize,
}

impl Window {
    fn new() -> Self {
        Self {
            total: 0.0,
            seg: 0.0,
            cls: 0.0,
            n: 0,
        }
    }

    fn mean(&self, v: f64) -> Option<f64> {
        (self.n > 0).then(|| v / self.n as f64)
    }
}

fn checkpoint_path(dir: &Path, iter: usize) -> PathBuf {
    dir.join(format!("iter_{iter:06}.gtwf"))
}

/// Runs `optim.total_iters` AdamW steps on `train` with the configured
/// schedule. Validates at iteration 0, every `val_every` iterations and at
/// the end; keeps the `keep_top_k` checkpoints with the best validation mIoU.
///
/// Shuffling, augmentation and dropout each draw from their own stream of
/// the config seed, so a run is fully determined by its config and data.
pub fn train<T: Real>(
    model: &GasTwinFormer<T>,
    train: &[Sample],
    val: &[Sample],
    opts: &TrainOptions,
) -> Result<TrainReport> {
    let cfg = &model.config;
    if train.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    if val.is_empty() {
        return Err(Error::Data("validation set is empty".into()));
    }
    let train = prepare(train, cfg.input_size)?;
    let val = prepare(val, cfg.input_size)?;
    let sched = &cfg.schedule;
    let params = model.named_params();
    let mut optim = AdamW::new(&cfg.optim, &params);
    let mut aug_rng = RngState::stream(cfg.seed, 1);
    let mut drop_rng = RngState::stream(cfg.seed, 2);

    let mut log_file = match &opts.out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let p = dir.join("metrics.jsonl");
            Some((fs::File::create(&p).map_err(|e| Error::io(&p, e))?, p))
        }
        None => None,
    };
    let mut report = TrainReport {
        log: Vec::new(),
        evaluations: Vec::new(),
        kept: Vec::new(),
    };

    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut epoch = 0u64;
    let mut window = Window::new();
    let total = cfg.optim.total_iters;

    for iter in 0..=total {
        if iter % sched.val_every == 0 || iter == total {
            let eval = evaluate(model, &val)?;
            let line = LogLine {
                iter,
                lr: lr_at(iter, &cfg.optim),
                loss_total: window.mean(window.total),
                loss_seg: window.mean(window.seg),
                loss_cls: window.mean(window.cls),
                val_miou: eval.seg.miou,
                val_mf1: eval.seg.mf1,
                val_diet_acc: eval.diet.accuracy,
            };
            if opts.verbose {
                eprintln!("{}", line.to_json());
            }
            if let Some((f, p)) = &mut log_file {
                writeln!(f, "{}", line.to_json()).map_err(|e| Error::io(p.as_path(), e))?;
            }
            retain(
                model,
                &optim,
                iter,
                eval.seg.miou,
                sched.keep_top_k,
                opts,
                &mut report.kept,
            )?;
            report.log.push(line);
            report.evaluations.push((iter, eval));
            window = Window::new();
        }
        if iter == total {
            break;
        }

        let mut batch = Vec::with_capacity(sched.batch_size);
        while batch.len() < sched.batch_size {
            if cursor == order.len() {
                if !batch.is_empty() && !order.is_empty() {
                    // last partial batch of the epoch is kept as is
                    break;
                }
                order = (0..train.len()).collect();
                RngState::stream(cfg.seed, 1_000 + epoch).shuffle(&mut order);
                epoch += 1;
                cursor = 0;
            }
            let s = &train[order[cursor]];
            cursor += 1;
            batch.push(if sched.augment {
                augment(s, &mut aug_rng, sched)
            } else {
                s.clone()
            });
        }

        let mut step = || -> Result<(f64, f64, f64)> {
            let refs: Vec<&Sample> = batch.iter().collect();
            let (x, mask, diet) = collate::<T>(&refs)?;
            let out = model.forward(&x, &mut Mode::Train(&mut drop_rng))?;
            let loss = multi_task_loss(&out.seg_logits, &mask, &out.diet_logits, &diet, &cfg.loss)?;
            let parts = (
                loss.total.item().as_f64(),
                loss.seg.item().as_f64(),
                loss.cls.item().as_f64(),
            );
            if !(parts.0.is_finite() && parts.1.is_finite() && parts.2.is_finite()) {
                return Err(Error::Numerical(format!(
                    "non-finite loss (total {}, seg {}, cls {})",
                    parts.0, parts.1, parts.2
                )));
            }
            model.zero_grad();
            loss.total.backward()?;
            optim.step(&params, lr_at(iter, &cfg.optim))?;
            Ok(parts)
        };
        let (t, s, c) = step().map_err(|e| match e {
            Error::Tensor(TensorError::NonFinite { op }) => Error::Numerical(format!(
                "iteration {iter}: non-finite value produced by {op}"
            )),
            Error::Numerical(m) => Error::Numerical(format!("iteration {iter}: {m}")),
            other => other,
        })?;
        window.total += t;
        window.seg += s;
        window.cls += c;
        window.n += 1;
    }
    if let Some(dir) = &opts.out_dir {
        checkpoint::save(&dir.join("last.gtwf"), model, Some(&optim), total as u64)?;
    }
    Ok(report)
}

/// Inserts this validation into the top-k list (ties keep the earlier
/// checkpoint), writing and deleting checkpoint files as needed.
fn retain<T: Real>(
    model: &GasTwinFormer<T>,
    optim: &AdamW,
    iter: usize,
    miou: f64,
    k: usize,
    opts: &TrainOptions,
    kept: &mut Vec<(f64, usize, Option<PathBuf>)>,
) -> Result<()> {
    let pos = kept
        .iter()
        .position(|(m, _, _)| miou > *m)
        .unwrap_or(kept.len());
    if pos >= k {
        return Ok(());
    }
    let path = match &opts.out_dir {
        Some(dir) => {
            let p = checkpoint_path(dir, iter);
            checkpoint::save(&p, model, Some(optim), iter as u64)?;
            Some(p)
        }
        None => None,
    };
    kept.insert(pos, (miou, iter, path));
    while kept.len() > k {
        if let Some((_, _, Some(p))) = kept.pop() {
            fs::remove_file(&p).map_err(|e| Error::io(&p, e))?;
        }
    }
    Ok(())
}
