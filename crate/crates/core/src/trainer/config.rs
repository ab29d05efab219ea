use std::fmt::Write as _;

use crate::data::BatchSpec;
use crate::error::{Error, Result};
use crate::losses::{ConsistencyWeights, RampSchedule, SharpenConfig};
use crate::network::{NormKind, SubModelConfig, UpsampleKind, NUM_MODELS};

/// Everything a training run depends on. Rendered as flat `key = value`
/// text for config files, manifests and checkpoints.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub t_max: usize,
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    pub seed: u64,
    pub labelled_fraction: f64,
    pub enable_imd: bool,
    pub enable_ms: bool,
    pub enable_dihc: bool,
    pub detach_pseudo: bool,
    pub ramp_squared: bool,
    /// Consistency weight reached at the last step; 0 disables consistency.
    pub ramp_base: f64,
    pub eval_every: usize,
    pub labelled_per_batch: usize,
    pub unlabelled_per_batch: usize,
    pub augment: bool,
    pub patch: [usize; 3],
    pub base_channels: usize,
    pub depth: usize,
    pub temperature: f32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            t_max: 1000,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            seed: 0,
            labelled_fraction: 0.1,
            enable_imd: true,
            enable_ms: true,
            enable_dihc: true,
            detach_pseudo: true,
            ramp_squared: false,
            ramp_base: 0.1,
            eval_every: 100,
            labelled_per_batch: 2,
            unlabelled_per_batch: 2,
            augment: true,
            patch: [32, 32, 32],
            base_channels: 8,
            depth: 4,
            temperature: 0.1,
        }
    }
}

/// Table-style ablation flags.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Ablation {
    pub imd: bool,
    pub ms: bool,
    pub dihc: bool,
}

impl Ablation {
    pub const FULL: Ablation = Ablation { imd: true, ms: true, dihc: true };
    pub const NONE: Ablation = Ablation { imd: false, ms: false, dihc: false };

    /// `none`, `full`, or a comma list drawn from `imd`, `ms`, `dihc`.
    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        match s {
            "none" => return Ok(Self::NONE),
            "full" => return Ok(Self::FULL),
            _ => {}
        }
        let mut a = Self::NONE;
        for part in s.split(',').map(str::trim) {
            match part {
                "imd" => a.imd = true,
                "ms" => a.ms = true,
                "dihc" => a.dihc = true,
                other => return Err(Error::Config(format!("unknown ablation component `{other}`"))),
            }
        }
        Ok(a)
    }

    /// Canonical label such as `imd,ms` or `none`.
    pub fn label(&self) -> String {
        let parts: Vec<&str> = [(self.imd, "imd"), (self.ms, "ms"), (self.dihc, "dihc")]
            .iter()
            .filter(|(on, _)| *on)
            .map(|(_, n)| *n)
            .collect();
        match parts.len() {
            0 => "none".into(),
            3 => "full".into(),
            _ => parts.join(","),
        }
    }
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true/false, got `{v}`"))),
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("{key}: cannot parse `{v}`")))
}

impl TrainConfig {
    pub const KEYS: [&'static str; 20] = [
        "t_max",
        "lr",
        "momentum",
        "weight_decay",
        "seed",
        "labelled_fraction",
        "enable_imd",
        "enable_ms",
        "enable_dihc",
        "detach_pseudo",
        "ramp_squared",
        "ramp_base",
        "eval_every",
        "labelled_per_batch",
        "unlabelled_per_batch",
        "augment",
        "patch",
        "base_channels",
        "depth",
        "temperature",
    ];

    pub fn ablation(&self) -> Ablation {
        Ablation { imd: self.enable_imd, ms: self.enable_ms, dihc: self.enable_dihc }
    }

    pub fn set_ablation(&mut self, a: Ablation) {
        self.enable_imd = a.imd;
        self.enable_ms = a.ms;
        self.enable_dihc = a.dihc;
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.t_max == 0 {
            return fail("t_max must be positive".into());
        }
        if self.enable_dihc && !self.enable_ms {
            return fail("enable_dihc requires enable_ms".into());
        }
        if !(self.labelled_fraction > 0.0 && self.labelled_fraction <= 1.0) {
            return fail(format!("labelled_fraction {} outside (0, 1]", self.labelled_fraction));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail(format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return fail("momentum must lie in [0, 1) and weight_decay be non-negative".into());
        }
        if !(self.ramp_base >= 0.0 && self.ramp_base.is_finite()) {
            return fail(format!("ramp_base must be non-negative, got {}", self.ramp_base));
        }
        if self.eval_every == 0 {
            return fail("eval_every must be positive".into());
        }
        if !(self.temperature > 0.0) {
            return fail(format!("temperature must be positive, got {}", self.temperature));
        }
        self.batch_spec().validate()?;
        for c in self.submodel_configs() {
            c.validate(self.patch)?;
        }
        Ok(())
    }

    pub fn batch_spec(&self) -> BatchSpec {
        BatchSpec {
            labelled_per_batch: self.labelled_per_batch,
            unlabelled_per_batch: self.unlabelled_per_batch,
            seed: self.seed,
            augment: self.augment,
        }
    }

    /// Sub-model configurations after applying the IMD switch.
    pub fn submodel_configs(&self) -> [SubModelConfig; NUM_MODELS] {
        apply_imd(&SubModelConfig::diversified(), self.enable_imd)
            .map(|c| SubModelConfig { base_channels: self.base_channels, depth: self.depth, ..c })
    }

    /// Ramp horizon is `t_max - 1` so the last logged step reaches the base weight.
    pub fn ramp_schedule(&self) -> RampSchedule {
        RampSchedule {
            base: self.ramp_base,
            t_max: self.t_max.saturating_sub(1).max(1),
            squared: self.ramp_squared,
            ..RampSchedule::new(self.t_max)
        }
    }

    pub fn sharpen(&self) -> SharpenConfig {
        SharpenConfig { temperature: self.temperature }
    }

    pub fn consistency_weights(&self) -> ConsistencyWeights {
        ConsistencyWeights::default()
    }

    /// Number of supervised scales per model.
    pub fn supervised_scales(&self) -> usize {
        if self.enable_ms { self.depth } else { 1 }
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "t_max" => self.t_max.to_string(),
            "lr" => self.lr.to_string(),
            "momentum" => self.momentum.to_string(),
            "weight_decay" => self.weight_decay.to_string(),
            "seed" => self.seed.to_string(),
            "labelled_fraction" => self.labelled_fraction.to_string(),
            "enable_imd" => self.enable_imd.to_string(),
            "enable_ms" => self.enable_ms.to_string(),
            "enable_dihc" => self.enable_dihc.to_string(),
            "detach_pseudo" => self.detach_pseudo.to_string(),
            "ramp_squared" => self.ramp_squared.to_string(),
            "ramp_base" => self.ramp_base.to_string(),
            "eval_every" => self.eval_every.to_string(),
            "labelled_per_batch" => self.labelled_per_batch.to_string(),
            "unlabelled_per_batch" => self.unlabelled_per_batch.to_string(),
            "augment" => self.augment.to_string(),
            "patch" => format!("{},{},{}", self.patch[0], self.patch[1], self.patch[2]),
            "base_channels" => self.base_channels.to_string(),
            "depth" => self.depth.to_string(),
            "temperature" => self.temperature.to_string(),
            _ => return None,
        })
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "t_max" => self.t_max = parse_num(key, v)?,
            "lr" => self.lr = parse_num(key, v)?,
            "momentum" => self.momentum = parse_num(key, v)?,
            "weight_decay" => self.weight_decay = parse_num(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,
            "labelled_fraction" => self.labelled_fraction = parse_num(key, v)?,
            "enable_imd" => self.enable_imd = parse_bool(key, v)?,
            "enable_ms" => self.enable_ms = parse_bool(key, v)?,
            "enable_dihc" => self.enable_dihc = parse_bool(key, v)?,
            "detach_pseudo" => self.detach_pseudo = parse_bool(key, v)?,
            "ramp_squared" => self.ramp_squared = parse_bool(key, v)?,
            "ramp_base" => self.ramp_base = parse_num(key, v)?,
            "eval_every" => self.eval_every = parse_num(key, v)?,
            "labelled_per_batch" => self.labelled_per_batch = parse_num(key, v)?,
            "unlabelled_per_batch" => self.unlabelled_per_batch = parse_num(key, v)?,
            "augment" => self.augment = parse_bool(key, v)?,
            "patch" => {
                let dims: Vec<usize> = v.split(',').map(|d| parse_num(key, d.trim())).collect::<Result<_>>()?;
                self.patch = match dims[..] {
                    [s] => [s; 3],
                    [d, h, w] => [d, h, w],
                    _ => return Err(Error::Config(format!("patch: expected 1 or 3 sizes, got `{v}`"))),
                };
            }
            "base_channels" => self.base_channels = parse_num(key, v)?,
            "depth" => self.depth = parse_num(key, v)?,
            "temperature" => self.temperature = parse_num(key, v)?,
            _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", no + 1)))?;
            self.set(k.trim(), v).map_err(|e| Error::Config(format!("line {}: {e}", no + 1)))?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text)?;
        Ok(c)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for k in Self::KEYS {
            writeln!(s, "{k} = {}", self.get(k).expect("listed key")).unwrap();
        }
        s
    }
}

/// IMD on: the three diversified configurations. Off: three copies of the
/// model-2 configuration that differ only through their seeds.
pub fn apply_imd(cfgs: &[SubModelConfig; NUM_MODELS], enable_imd: bool) -> [SubModelConfig; NUM_MODELS] {
    if enable_imd {
        return cfgs.clone();
    }
    let template = cfgs.iter().find(|c| c.model_index == 2).cloned().unwrap_or_else(|| {
        SubModelConfig::new(2, NormKind::Batch, UpsampleKind::TransposedConv)
    });
    std::array::from_fn(|i| SubModelConfig { model_index: i + 1, ..template.clone() })
}
