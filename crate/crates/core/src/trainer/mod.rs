//! Training loop, evaluation, run logs and checkpoints.

pub mod checkpoint;
mod config;
mod runlog;

pub use checkpoint::{Checkpoint, CheckpointError};
pub use config::{apply_imd, Ablation, TrainConfig};
pub use runlog::{EvalRecord, RunLog, StepRecord, RUNLOG_HEADER};

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use crate::data::{next_batch, Batch, DatasetSplit, Volume};
use crate::error::{Error, Result};
use crate::losses::{
    deep_supervised_loss, diagonal_consistency_loss, mutual_consistency_loss, total_loss, LossBreakdown,
};
use crate::metrics::{evaluate_masks, mean_report, report_csv, BinaryMask, MetricReport};
use crate::network::{ensemble_forward, EnsembleConfig, Ensemble, MultiScalePrediction, SubModel};
use crate::tensor::{narrow, no_grad, Sgd, Tensor};

pub const FINAL_CHECKPOINT: &str = "final.dckp";
pub const BEST_CHECKPOINT: &str = "best.dckp";
pub const RUNLOG_FILE: &str = "runlog.csv";
pub const EVAL_LOG_FILE: &str = "eval_log.csv";
pub const EVAL_FILE: &str = "eval.csv";

/// Labelled evaluation cases.
pub type EvalSet = [(Volume, BinaryMask)];

/// Mean over voxels of `|p1-p2| + |p2-p3| + |p1-p3|` on the scale-1 maps.
pub fn disagreement(preds: &[MultiScalePrediction]) -> f64 {
    let maps: Vec<Vec<f32>> = preds.iter().map(|p| p.scale(1).to_vec()).collect();
    if maps.len() < 2 || maps[0].is_empty() {
        return 0.0;
    }
    let mut acc = 0.0f64;
    for i in 0..maps.len() {
        for j in i + 1..maps.len() {
            acc += maps[i].iter().zip(&maps[j]).map(|(&a, &b)| (a as f64 - b as f64).abs()).sum::<f64>();
        }
    }
    acc / maps[0].len() as f64
}

/// Scores `predict(volume)` probabilities against every mask.
pub fn evaluate_with(
    set: &EvalSet,
    mut predict: impl FnMut(&Volume) -> Result<Vec<f32>>,
) -> Result<Vec<MetricReport>> {
    if set.is_empty() {
        return Err(Error::Config("evaluation set is empty".into()));
    }
    set.iter()
        .map(|(v, gt)| {
            let pred = BinaryMask::from_probs(v.shape(), &predict(v)?)?;
            evaluate_masks(&pred, gt)
        })
        .collect()
}

/// Model-1 scale-1 evaluation in inference mode.
pub fn evaluate(models: &mut [SubModel], set: &EvalSet) -> Result<Vec<MetricReport>> {
    let m1 = models
        .iter_mut()
        .find(|m| m.cfg.model_index == 1)
        .ok_or_else(|| Error::Config("no model 1 to evaluate".into()))?;
    evaluate_with(set, |v| predict(m1, v))
}

/// Scale-1 foreground probabilities of one model for a raw volume.
pub fn predict(model: &mut SubModel, v: &Volume) -> Result<Vec<f32>> {
    let _g = no_grad();
    let [d, h, w] = v.shape();
    let x = Tensor::new(&[1, 1, d, h, w], v.zscore().data().to_vec())?;
    Ok(model.forward_multiscale(&x, false)?.scale(1).to_vec())
}

/// Owns the three sub-models and the optimizer state.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub models: Vec<SubModel>,
    params: Vec<Tensor>,
    opt: Sgd,
    step: usize,
    best_dice: Option<f64>,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let ens_cfg = EnsembleConfig { models: cfg.submodel_configs(), patch: cfg.patch, seed: cfg.seed };
        let ens = Ensemble::build(&ens_cfg)?;
        let params = ens.parameters();
        let mut opt = Sgd::new(cfg.lr, cfg.momentum, cfg.weight_decay);
        opt.set_velocity(params.iter().map(|p| vec![0.0; p.numel()]).collect());
        Ok(Self { cfg, models: ens.models, params, opt, step: 0, best_dice: None })
    }

    /// Next step index to run.
    pub fn step(&self) -> usize {
        self.step
    }

    pub fn best_dice(&self) -> Option<f64> {
        self.best_dice
    }

    pub fn parameters(&self) -> &[Tensor] {
        &self.params
    }

    /// Loss terms for a forward pass, before any parameter update.
    pub fn losses(&self, preds: &[MultiScalePrediction], batch: &Batch, t: usize) -> Result<(Tensor, LossBreakdown)> {
        let cfg = &self.cfg;
        let nl = batch.labelled_slots.len();
        let ns = cfg.supervised_scales();
        let labelled = preds
            .iter()
            .map(|p| {
                let probs = p.probs[..ns]
                    .iter()
                    .map(|s| if s.shape()[0] == nl { Ok(s.clone()) } else { narrow(s, 0, nl) })
                    .collect::<Result<Vec<_>>>()?;
                Ok(MultiScalePrediction { model_index: p.model_index, probs })
            })
            .collect::<Result<Vec<_>>>()?;
        let finite = |name: &str, r: Result<Tensor>| -> Result<Tensor> {
            let v = r.map_err(|e| match e {
                Error::NonFinite(m) => Error::NonFinite(format!("loss term {name} at step {t}: {m}")),
                other => other,
            })?;
            let x = v.item();
            if !x.is_finite() {
                return Err(Error::NonFinite(format!("loss term {name} = {x} at step {t}")));
            }
            Ok(v)
        };
        let l_sup = finite("l_sup", deep_supervised_loss(&labelled, &batch.y, ns))?;
        let (w, sharpen) = (cfg.consistency_weights(), cfg.sharpen());
        let l_mc = finite("l_mc", mutual_consistency_loss(preds, &w, &sharpen, cfg.detach_pseudo))?;
        let l_dihc = if cfg.enable_dihc {
            finite("l_dihc", diagonal_consistency_loss(preds, &w, &sharpen, cfg.detach_pseudo))?
        } else {
            Tensor::scalar(0.0)
        };
        total_loss(&l_sup, &l_mc, &l_dihc, t, &cfg.ramp_schedule())
    }

    /// Forward, loss, backward and one SGD update over all three models.
    pub fn train_step(&mut self, batch: &Batch) -> Result<StepRecord> {
        let t = self.step;
        if t >= self.cfg.t_max {
            return Err(Error::Config(format!("step {t} is past t_max {}", self.cfg.t_max)));
        }
        let preds = ensemble_forward(&mut self.models, &batch.x, true)?;
        let (total, breakdown) = self.losses(&preds, batch, t)?;
        let terms = [
            ("l_sup", breakdown.l_sup),
            ("l_mc", breakdown.l_mc),
            ("l_dihc", breakdown.l_dihc),
            ("l_total", breakdown.l_total),
        ];
        if let Some((name, v)) = terms.iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "loss term {name} = {v} at step {t} (l_sup={}, l_mc={}, l_dihc={}, lambda_cst={})",
                breakdown.l_sup, breakdown.l_mc, breakdown.l_dihc, breakdown.lambda_cst
            )));
        }
        let disagreement = disagreement(&preds);
        drop(preds);
        total.backward()?;
        self.opt.step_present(&self.params);
        self.step += 1;
        Ok(StepRecord { step: t, breakdown, disagreement })
    }

    pub fn evaluate(&mut self, set: &EvalSet) -> Result<Vec<MetricReport>> {
        evaluate(&mut self.models, set)
    }

    pub fn checkpoint(&mut self) -> Checkpoint {
        let mut blobs = Vec::new();
        let mut k = 0;
        let velocity = self.opt.velocity().to_vec();
        let mut vel_blobs = Vec::new();
        for m in self.models.iter_mut() {
            let i = m.cfg.model_index;
            for p in m.parameters() {
                let name = p.name().unwrap_or("?");
                blobs.push((format!("m{i}.{name}"), p.to_vec()));
                vel_blobs.push((format!("opt.m{i}.{name}"), velocity[k].clone()));
                k += 1;
            }
            for (n, st) in m.norm_states_mut().into_iter().enumerate() {
                blobs.push((format!("m{i}.norm{n}.running_mean"), st.running_mean.clone()));
                blobs.push((format!("m{i}.norm{n}.running_var"), st.running_var.clone()));
            }
        }
        blobs.extend(vel_blobs);
        Checkpoint { step: self.step as u64, best_dice: self.best_dice, config: self.cfg.to_text(), blobs }
    }

    /// Rebuilds a trainer whose next step continues exactly where the
    /// checkpointed run stopped.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let cfg = TrainConfig::from_text(&ckpt.config)?;
        let mut tr = Self::new(cfg)?;
        let mut used = 0;
        let mut velocity = Vec::with_capacity(tr.params.len());
        for m in tr.models.iter_mut() {
            let i = m.cfg.model_index;
            for p in m.parameters() {
                let name = p.name().unwrap_or("?");
                ckpt.read_into(&format!("m{i}.{name}"), &mut p.data_mut())?;
                let mut v = vec![0.0; p.numel()];
                ckpt.read_into(&format!("opt.m{i}.{name}"), &mut v)?;
                velocity.push(v);
                used += 2;
            }
            for (n, st) in m.norm_states_mut().into_iter().enumerate() {
                ckpt.read_into(&format!("m{i}.norm{n}.running_mean"), &mut st.running_mean)?;
                ckpt.read_into(&format!("m{i}.norm{n}.running_var"), &mut st.running_var)?;
                used += 2;
            }
        }
        if used != ckpt.blobs.len() {
            return Err(CheckpointError::UnusedBlobs(ckpt.blobs.len() - used).into());
        }
        tr.opt.set_velocity(velocity);
        tr.step = usize::try_from(ckpt.step).map_err(|_| Error::Config("checkpoint step overflows".into()))?;
        if tr.step > tr.cfg.t_max {
            return Err(Error::Config(format!("checkpoint step {} exceeds t_max {}", tr.step, tr.cfg.t_max)));
        }
        tr.best_dice = ckpt.best_dice;
        Ok(tr)
    }

    /// Trains until `t_max`, evaluating every `eval_every` steps and at the
    /// end. With an output directory, writes the run log, evaluation CSVs,
    /// the final checkpoint and a checkpoint at each new best mean Dice.
    pub fn run(&mut self, split: &DatasetSplit, eval_set: Option<&EvalSet>, out: Option<&Path>) -> Result<RunLog> {
        let spec = self.cfg.batch_spec();
        let mut log = RunLog::default();
        let mut sink = match out {
            Some(dir) => {
                fs::create_dir_all(dir)?;
                let path = dir.join(RUNLOG_FILE);
                // a resumed run keeps the rows logged before its starting step
                let earlier: Vec<String> = match fs::read_to_string(&path) {
                    Ok(text) if self.step > 0 => text
                        .lines()
                        .skip(1)
                        .filter(|l| l.split(',').next().and_then(|s| s.parse::<usize>().ok()).is_some_and(|s| s < self.step))
                        .map(str::to_owned)
                        .collect(),
                    _ => Vec::new(),
                };
                let mut f = std::io::BufWriter::new(fs::File::create(&path)?);
                writeln!(f, "{RUNLOG_HEADER}")?;
                for row in &earlier {
                    writeln!(f, "{row}")?;
                }
                Some(f)
            }
            None => None,
        };
        let mut last_cases = None;
        while self.step < self.cfg.t_max {
            let t = self.step;
            let batch = next_batch(split, &spec, t)?;
            let rec = match self.train_step(&batch) {
                Ok(r) => r,
                Err(e) => {
                    if let (Some(dir), Error::NonFinite(msg)) = (out, &e) {
                        fs::write(dir.join("abort.txt"), format!("{msg}\n"))?;
                    }
                    return Err(e);
                }
            };
            log::debug!("step {t}: total {:.6}", rec.breakdown.l_total);
            if let Some(f) = sink.as_mut() {
                writeln!(f, "{}", rec.csv_row())?;
                f.flush()?;
            }
            log.steps.push(rec);
            let done = self.step == self.cfg.t_max;
            if let Some(set) = eval_set.filter(|_| done || self.step % self.cfg.eval_every == 0) {
                let cases = self.evaluate(set)?;
                let mean = mean_report(&cases).expect("non-empty evaluation");
                log::info!("step {}: mean dice {:.2}", self.step, mean.dice);
                log.evals.push(EvalRecord { step: self.step, mean });
                if self.best_dice.is_none_or(|b| mean.dice > b) {
                    self.best_dice = Some(mean.dice);
                    if let Some(dir) = out {
                        self.checkpoint().save(&dir.join(BEST_CHECKPOINT))?;
                    }
                }
                last_cases = Some(cases);
            }
        }
        if let Some(dir) = out {
            self.checkpoint().save(&dir.join(FINAL_CHECKPOINT))?;
            if eval_set.is_some() {
                fs::write(dir.join(EVAL_LOG_FILE), log.eval_csv())?;
            }
            if let Some(cases) = last_cases {
                let rows: Vec<(String, MetricReport)> =
                    cases.into_iter().enumerate().map(|(i, r)| (format!("case_{i:03}"), r)).collect();
                fs::write(dir.join(EVAL_FILE), report_csv(&rows))?;
            }
        }
        Ok(log)
    }
}

/// Output paths written by [`Trainer::run`] into `dir`.
pub fn run_outputs(dir: &Path) -> Vec<PathBuf> {
    [RUNLOG_FILE, EVAL_LOG_FILE, EVAL_FILE, FINAL_CHECKPOINT, BEST_CHECKPOINT].iter().map(|f| dir.join(f)).collect()
}
