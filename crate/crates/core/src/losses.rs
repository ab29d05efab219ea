//! Training objectives: deep-supervised Dice, temperature sharpening,
//! mutual consistency, diagonal hierarchical consistency, the consistency
//! warm-up, and their weighted total.

use crate::error::{Error, Result};
use crate::network::{MultiScalePrediction, NUM_MODELS};
use crate::tensor::{add, check_same_shape, mse, scalar_mul, Backward, Tensor};

pub const DICE_SMOOTH: f32 = 1e-5;
/// Probabilities are clamped to `[SHARPEN_CLAMP, 1 - SHARPEN_CLAMP]` before exponentiation.
pub const SHARPEN_CLAMP: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SharpenConfig {
    pub temperature: f32,
}

impl Default for SharpenConfig {
    fn default() -> Self {
        Self { temperature: 0.1 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConsistencyWeights {
    pub alpha1: f32,
    pub alpha2: f32,
    pub alpha3: f32,
}

impl Default for ConsistencyWeights {
    fn default() -> Self {
        Self { alpha1: 1.0, alpha2: 0.75, alpha3: 0.5 }
    }
}

impl ConsistencyWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha1 >= self.alpha2 && self.alpha2 >= self.alpha3 && self.alpha3 > 0.0) {
            return Err(Error::Config(format!(
                "consistency weights must satisfy alpha1 >= alpha2 >= alpha3 > 0, got {self:?}"
            )));
        }
        Ok(())
    }

    /// Weight applied to a consumer map at 1-based `scale`.
    pub fn for_scale(&self, scale: usize) -> f32 {
        match scale {
            1 => self.alpha1,
            2 => self.alpha2,
            3 => self.alpha3,
            _ => 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RampSchedule {
    pub base: f64,
    pub t_max: usize,
    pub lambda_sup: f64,
    /// Use `exp(-5 (1 - t/t_max)^2)` instead of `exp(-5 (1 - t/t_max))`.
    pub squared: bool,
}

impl RampSchedule {
    pub fn new(t_max: usize) -> Self {
        Self { base: 0.1, t_max, lambda_sup: 1.0, squared: false }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub l_sup: f64,
    pub l_mc: f64,
    pub l_dihc: f64,
    pub lambda_cst: f64,
    pub l_total: f64,
}

/// One sharpened-target → prediction MSE term.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConsistencyPair {
    /// 1-based model whose sharpened scale-1 output is the target.
    pub producer: usize,
    /// 1-based model whose prediction is pulled toward the target.
    pub consumer: usize,
    pub consumer_scale: usize,
    pub weight: f32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairingTable {
    pub mc_pairs: Vec<ConsistencyPair>,
    pub dihc_pairs: Vec<ConsistencyPair>,
}

impl PairingTable {
    /// Mutual pairs: every ordered `(i, j)`, `i != j`, at scale 1.
    /// Diagonal pairs: producer `m` targets model `m + 2` (cyclic) at scale 2 and
    /// model `m + 1` at scale 3, which never pairs a model with itself.
    pub fn new(w: &ConsistencyWeights) -> Self {
        let mut mc_pairs = Vec::with_capacity(NUM_MODELS * (NUM_MODELS - 1));
        for producer in 1..=NUM_MODELS {
            for consumer in 1..=NUM_MODELS {
                if producer != consumer {
                    mc_pairs.push(ConsistencyPair { producer, consumer, consumer_scale: 1, weight: w.alpha1 });
                }
            }
        }
        let cyc = |m: usize, k: usize| (m - 1 + k) % NUM_MODELS + 1;
        let dihc_pairs = (1..=NUM_MODELS)
            .flat_map(|m| {
                [
                    ConsistencyPair { producer: m, consumer: cyc(m, 2), consumer_scale: 2, weight: w.alpha2 },
                    ConsistencyPair { producer: m, consumer: cyc(m, 1), consumer_scale: 3, weight: w.alpha3 },
                ]
            })
            .collect();
        Self { mc_pairs, dihc_pairs }
    }
}

struct DiceLoss {
    y: Vec<f32>,
    num: f64,
    den: f64,
}

impl Backward for DiceLoss {
    fn op_name(&self) -> &'static str {
        "dice_loss"
    }
    fn backward(&self, _inputs: &[Tensor], g: &[f32]) -> Vec<Option<Vec<f32>>> {
        // L = 1 - num/den, num = 2Σpy + s, den = Σp + Σy + s
        let den2 = self.den * self.den;
        let dp = self
            .y
            .iter()
            .map(|&y| (g[0] as f64 * -(2.0 * y as f64 * self.den - self.num) / den2) as f32)
            .collect();
        vec![Some(dp), None]
    }
}

/// `1 − (2·Σpy + smooth) / (Σp + Σy + smooth)`, differentiable in `p`.
pub fn dice_loss(p: &Tensor, y: &Tensor, smooth: f32) -> Result<Tensor> {
    check_same_shape("dice_loss", p, y)?;
    let yv = y.to_vec();
    let (mut inter, mut sp, mut sy) = (0.0f64, 0.0f64, 0.0f64);
    for (&pv, &yv) in p.data().iter().zip(&yv) {
        inter += (pv * yv) as f64;
        sp += pv as f64;
        sy += yv as f64;
    }
    let num = 2.0 * inter + smooth as f64;
    let den = sp + sy + smooth as f64;
    let loss = (1.0 - num / den) as f32;
    let saved = if p.requires_grad() { yv } else { Vec::new() };
    Ok(Tensor::from_op(
        Vec::new(),
        vec![loss],
        vec![p.clone(), y.clone()],
        Box::new(DiceLoss { y: saved, num, den }),
    ))
}

/// Unweighted sum of Dice losses over every model and the first `num_scales`
/// scales against the same mask.
pub fn deep_supervised_loss(preds: &[MultiScalePrediction], y: &Tensor, num_scales: usize) -> Result<Tensor> {
    let mut total: Option<Tensor> = None;
    for pred in preds {
        if num_scales == 0 || num_scales > pred.probs.len() {
            return Err(Error::invalid(
                "deep_supervised_loss",
                format!("num_scales {num_scales} outside 1..={}", pred.probs.len()),
            ));
        }
        for s in 1..=num_scales {
            let term = dice_loss(pred.scale(s), y, DICE_SMOOTH)?;
            total = Some(match total {
                Some(t) => add(&t, &term)?,
                None => term,
            });
        }
    }
    total.ok_or_else(|| Error::invalid("deep_supervised_loss", "no predictions"))
}

/// Temperature sharpening of one probability, evaluated in `f64` on the clamped value.
pub fn sharpen_value(p: f64, temperature: f64) -> f64 {
    let p = p.clamp(SHARPEN_CLAMP, 1.0 - SHARPEN_CLAMP);
    let inv_t = 1.0 / temperature;
    // p^(1/T) / (p^(1/T) + (1-p)^(1/T)) rewritten to avoid underflow
    1.0 / (1.0 + ((1.0 - p) / p).powf(inv_t))
}

struct Sharpen {
    temperature: f64,
}

impl Backward for Sharpen {
    fn op_name(&self) -> &'static str {
        "sharpen"
    }
    fn backward(&self, inputs: &[Tensor], g: &[f32]) -> Vec<Option<Vec<f32>>> {
        let p = inputs[0].data();
        let dp = p
            .iter()
            .zip(g)
            .map(|(&pv, &gv)| {
                let pv = pv as f64;
                if !(SHARPEN_CLAMP..=1.0 - SHARPEN_CLAMP).contains(&pv) {
                    return 0.0;
                }
                let s = sharpen_value(pv, self.temperature);
                (gv as f64 * s * (1.0 - s) / (self.temperature * pv * (1.0 - pv))) as f32
            })
            .collect();
        vec![Some(dp)]
    }
}

/// Differentiable sharpening; see [`sharpen`] for the stop-gradient form.
pub fn sharpen_attached(p: &Tensor, cfg: &SharpenConfig) -> Result<Tensor> {
    if !(cfg.temperature > 0.0) {
        return Err(Error::Config(format!("temperature must be positive, got {}", cfg.temperature)));
    }
    let t = cfg.temperature as f64;
    let data = p.data();
    if let Some(i) = data.iter().position(|v| v.is_nan()) {
        return Err(Error::NonFinite(format!("sharpen input element {i}")));
    }
    let out = data.iter().map(|&v| sharpen_value(v as f64, t) as f32).collect();
    drop(data);
    Ok(Tensor::from_op(p.shape().to_vec(), out, vec![p.clone()], Box::new(Sharpen { temperature: t })))
}

/// Soft pseudo label from a probability map, detached from the graph.
pub fn sharpen(p: &Tensor, cfg: &SharpenConfig) -> Result<Tensor> {
    Ok(sharpen_attached(p, cfg)?.detach())
}

fn find<'a>(preds: &'a [MultiScalePrediction], model: usize) -> Result<&'a MultiScalePrediction> {
    preds
        .iter()
        .find(|p| p.model_index == model)
        .ok_or_else(|| Error::invalid("consistency", format!("no prediction for model {model}")))
}

fn pairwise_loss(
    preds: &[MultiScalePrediction],
    pairs: &[ConsistencyPair],
    cfg: &SharpenConfig,
    detach_pseudo: bool,
) -> Result<Tensor> {
    let mut targets: Vec<(usize, Tensor)> = Vec::new();
    let mut total: Option<Tensor> = None;
    for pair in pairs {
        let target = match targets.iter().find(|(m, _)| *m == pair.producer) {
            Some((_, t)) => t.clone(),
            None => {
                let p1 = find(preds, pair.producer)?.scale(1);
                let t = if detach_pseudo { sharpen(p1, cfg)? } else { sharpen_attached(p1, cfg)? };
                targets.push((pair.producer, t.clone()));
                t
            }
        };
        let consumer = find(preds, pair.consumer)?.scale(pair.consumer_scale);
        let term = scalar_mul(&mse(&target, consumer)?, pair.weight);
        total = Some(match total {
            Some(t) => add(&t, &term)?,
            None => term,
        });
    }
    Ok(total.unwrap_or_else(|| Tensor::scalar(0.0)))
}

/// Σ over ordered model pairs `i != j` of `α1·MSE(sharpen(p_i^1), p_j^1)`.
pub fn mutual_consistency_loss(
    preds: &[MultiScalePrediction],
    w: &ConsistencyWeights,
    cfg: &SharpenConfig,
    detach_pseudo: bool,
) -> Result<Tensor> {
    pairwise_loss(preds, &PairingTable::new(w).mc_pairs, cfg, detach_pseudo)
}

/// The six diagonal terms of [`PairingTable::dihc_pairs`].
pub fn diagonal_consistency_loss(
    preds: &[MultiScalePrediction],
    w: &ConsistencyWeights,
    cfg: &SharpenConfig,
    detach_pseudo: bool,
) -> Result<Tensor> {
    pairwise_loss(preds, &PairingTable::new(w).dihc_pairs, cfg, detach_pseudo)
}

/// Consistency weight `base·exp(−5(1 − t/t_max))`; `t` is clamped to `t_max`.
pub fn ramp_weight(t: usize, sched: &RampSchedule) -> f64 {
    let t_max = sched.t_max.max(1);
    let phase = 1.0 - t.min(t_max) as f64 / t_max as f64;
    let phase = if sched.squared { phase * phase } else { phase };
    sched.base * (-5.0 * phase).exp()
}

/// `λ_sup·l_sup + λ(t)·(l_mc + l_dihc)` with its logged breakdown.
pub fn total_loss(
    l_sup: &Tensor,
    l_mc: &Tensor,
    l_dihc: &Tensor,
    t: usize,
    sched: &RampSchedule,
) -> Result<(Tensor, LossBreakdown)> {
    let lambda_cst = ramp_weight(t, sched);
    let cst = add(l_mc, l_dihc)?;
    let total = add(&scalar_mul(l_sup, sched.lambda_sup as f32), &scalar_mul(&cst, lambda_cst as f32))?;
    let (s, m, d) = (l_sup.item() as f64, l_mc.item() as f64, l_dihc.item() as f64);
    let breakdown = LossBreakdown {
        l_sup: s,
        l_mc: m,
        l_dihc: d,
        lambda_cst,
        l_total: sched.lambda_sup * s + lambda_cst * (m + d),
    };
    Ok((total, breakdown))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{sum, Graph};

    fn pred(model_index: usize, maps: Vec<Vec<f32>>, shape: &[usize]) -> MultiScalePrediction {
        MultiScalePrediction {
            model_index,
            probs: maps
                .into_iter()
                .enumerate()
                .map(|(s, v)| Tensor::parameter(format!("m{model_index}s{}", s + 1), shape, v).unwrap())
                .collect(),
        }
    }

    #[test]
    fn dice_perfect_disjoint_and_half() {
        let y = Tensor::new(&[8], vec![1.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0]).unwrap();
        assert!(dice_loss(&y, &y, DICE_SMOOTH).unwrap().item().abs() < 1e-6);
        let inv = Tensor::new(&[8], y.data().iter().map(|v| 1.0 - v).collect()).unwrap();
        let l = dice_loss(&inv, &y, DICE_SMOOTH).unwrap().item() as f64;
        assert!((l - (1.0 - 1e-5 / (8.0 + 1e-5))).abs() < 1e-6);
        let half = Tensor::full(&[2, 2, 2], 0.5);
        let y3 = Tensor::new(&[2, 2, 2], vec![1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        assert!((dice_loss(&half, &y3, DICE_SMOOTH).unwrap().item() - 0.5).abs() < 1e-6);
    }

    #[test]
    fn dice_gradient_matches_quotient_rule() {
        let p = Tensor::parameter("p", &[4], vec![0.2, 0.7, 0.4, 0.9]).unwrap();
        let y = Tensor::new(&[4], vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        dice_loss(&p, &y, 1.0).unwrap().backward().unwrap();
        let (num, den) = (2.0 * 1.6 + 1.0, 2.2 + 2.0 + 1.0);
        for (i, g) in p.grad().unwrap().iter().enumerate() {
            let yi = [0.0, 1.0, 0.0, 1.0][i];
            let expect = -(2.0 * yi * den - num) / (den * den);
            assert!((*g as f64 - expect).abs() < 1e-6);
        }
    }

    #[test]
    fn sharpen_fixed_points_and_identity_temperature() {
        let p = Tensor::new(&[5], vec![0.5, 0.1, 0.3, 0.77, 0.9]).unwrap();
        for t in [0.05, 0.1, 0.5, 2.0] {
            let s = sharpen(&p, &SharpenConfig { temperature: t }).unwrap();
            assert!((s.data()[0] - 0.5).abs() < 1e-7);
        }
        let s1 = sharpen(&p, &SharpenConfig { temperature: 1.0 }).unwrap();
        for (a, b) in s1.data().iter().zip(p.data().iter()) {
            assert!((a - b).abs() < 1e-6);
        }
        let v = sharpen_value(0.9, 0.1);
        assert!((v - 0.999_999_999_71).abs() < 1e-11, "{v}");
    }

    #[test]
    fn sharpen_rejects_nan_and_is_detached() {
        let p = Tensor::new(&[2], vec![0.3, f32::NAN]).unwrap();
        assert!(sharpen(&p, &SharpenConfig::default()).is_err());
        let q = Tensor::parameter("q", &[2], vec![0.3, 0.6]).unwrap();
        assert!(!sharpen(&q, &SharpenConfig::default()).unwrap().requires_grad());
        assert!(sharpen(&q, &SharpenConfig { temperature: 0.0 }).is_err());
    }

    #[test]
    fn pairing_table_shape() {
        let t = PairingTable::new(&ConsistencyWeights::default());
        assert_eq!(t.mc_pairs.len(), 6);
        assert_eq!(t.dihc_pairs.len(), 6);
        assert!(t.dihc_pairs.iter().all(|p| p.producer != p.consumer && p.consumer_scale != 4));
        let got: Vec<_> = t.dihc_pairs.iter().map(|p| (p.producer, p.consumer, p.consumer_scale, p.weight)).collect();
        assert_eq!(
            got,
            vec![(1, 3, 2, 0.75), (1, 2, 3, 0.5), (2, 1, 2, 0.75), (2, 3, 3, 0.5), (3, 2, 2, 0.75), (3, 1, 3, 0.5)]
        );
    }

    #[test]
    fn weights_validation() {
        assert!(ConsistencyWeights::default().validate().is_ok());
        assert!(ConsistencyWeights { alpha1: 0.5, alpha2: 0.75, alpha3: 0.5 }.validate().is_err());
        assert!(ConsistencyWeights { alpha1: 1.0, alpha2: 0.75, alpha3: 0.0 }.validate().is_err());
    }

    #[test]
    fn mutual_loss_has_six_mse_terms_and_routes_gradient_to_consumers() {
        let shape = [1, 2, 2];
        let preds: Vec<_> = (1..=3)
            .map(|m| pred(m, (0..4).map(|s| (0..4).map(|i| 0.1 + 0.2 * ((m + s + i) % 4) as f32).collect()).collect(), &shape))
            .collect();
        let cfg = SharpenConfig::default();
        let loss = mutual_consistency_loss(&preds, &ConsistencyWeights::default(), &cfg, true).unwrap();
        assert_eq!(Graph::trace(&loss).count("mse"), 6);
        loss.backward().unwrap();
        // model 1 is the consumer of targets from models 2 and 3
        let p1 = preds[0].scale(1).to_vec();
        let t2 = sharpen(preds[1].scale(1), &cfg).unwrap().to_vec();
        let t3 = sharpen(preds[2].scale(1), &cfg).unwrap().to_vec();
        let g = preds[0].scale(1).grad().unwrap();
        for i in 0..4 {
            let expect = 2.0 * (p1[i] - t2[i]) / 4.0 + 2.0 * (p1[i] - t3[i]) / 4.0;
            assert!((g[i] - expect).abs() < 1e-6);
        }
        assert!(preds[0].scale(2).grad().is_none());
    }

    #[test]
    fn attached_pseudo_labels_also_feed_the_producer() {
        let shape = [4];
        let mk = || (1..=3).map(|m| pred(m, vec![vec![0.2 * m as f32, 0.6, 0.45, 0.8]; 4], &shape)).collect::<Vec<_>>();
        let cfg = SharpenConfig::default();
        let w = ConsistencyWeights::default();
        let det = mk();
        diagonal_consistency_loss(&det, &w, &cfg, true).unwrap().backward().unwrap();
        assert!(det[0].scale(1).grad().is_none());
        let att = mk();
        diagonal_consistency_loss(&att, &w, &cfg, false).unwrap().backward().unwrap();
        assert!(att[0].scale(1).grad().is_some());
    }

    #[test]
    fn ramp_values() {
        let s = RampSchedule::new(1000);
        assert_eq!(ramp_weight(1000, &s), 0.1);
        assert!((ramp_weight(0, &s) - 6.737_946_999e-4).abs() < 1e-12);
        assert!((ramp_weight(500, &s) - 8.208_499_862e-3).abs() < 1e-12);
        assert_eq!(ramp_weight(5000, &s), 0.1);
        let sq = RampSchedule { squared: true, ..s };
        assert!((ramp_weight(500, &sq) - 0.1 * (-1.25f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn total_loss_plug_in() {
        let sched = RampSchedule::new(10);
        let (t, b) = total_loss(&Tensor::scalar(0.0), &Tensor::scalar(1.0), &Tensor::scalar(1.0), 10, &sched).unwrap();
        assert!((t.item() - 0.2).abs() < 1e-7);
        assert!((b.l_total - 0.2).abs() < 1e-12);
        let (t, _) = total_loss(&Tensor::scalar(0.7), &Tensor::scalar(0.0), &Tensor::scalar(0.0), 3, &sched).unwrap();
        assert_eq!(t.item(), 0.7);
    }

    #[test]
    fn deep_supervision_sums_all_heads() {
        let y = Tensor::new(&[1, 2, 2], vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        let perfect: Vec<_> = (1..=3).map(|m| pred(m, vec![y.to_vec(); 4], &[1, 2, 2])).collect();
        assert!(deep_supervised_loss(&perfect, &y, 4).unwrap().item().abs() < 1e-6);
        let half: Vec<_> = (1..=3).map(|m| pred(m, vec![vec![0.5; 4]; 4], &[1, 2, 2])).collect();
        let l = deep_supervised_loss(&half, &y, 4).unwrap();
        let single = dice_loss(half[0].scale(1), &y, DICE_SMOOTH).unwrap().item();
        assert!((l.item() - 12.0 * single).abs() < 1e-5);
        let l1 = deep_supervised_loss(&half, &y, 1).unwrap();
        assert!((l1.item() - 3.0 * single).abs() < 1e-6);
        assert!(deep_supervised_loss(&half, &y, 5).is_err());
        sum(&l).backward().unwrap();
    }
}
