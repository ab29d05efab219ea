use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::losses::LossBreakdown;
use crate::metrics::{MetricReport, UNDEFINED};

pub const RUNLOG_HEADER: &str = "step,l_sup,l_mc,l_dihc,lambda_cst,l_total,disagreement";
pub const EVAL_LOG_HEADER: &str = "step,dice,jaccard,asd,hd95";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub breakdown: LossBreakdown,
    pub disagreement: f64,
}

impl StepRecord {
    pub fn csv_row(&self) -> String {
        let b = &self.breakdown;
        format!(
            "{},{},{},{},{},{},{}",
            self.step, b.l_sup, b.l_mc, b.l_dihc, b.lambda_cst, b.l_total, self.disagreement
        )
    }

    pub fn parse_row(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 7 {
            return Err(Error::Config(format!("run log row has {} fields: `{line}`", f.len())));
        }
        let num = |i: usize| -> Result<f64> {
            f[i].parse().map_err(|_| Error::Config(format!("run log field `{}` is not a number", f[i])))
        };
        Ok(Self {
            step: f[0].parse().map_err(|_| Error::Config(format!("bad step `{}`", f[0])))?,
            breakdown: LossBreakdown {
                l_sup: num(1)?,
                l_mc: num(2)?,
                l_dihc: num(3)?,
                lambda_cst: num(4)?,
                l_total: num(5)?,
            },
            disagreement: num(6)?,
        })
    }
}

/// Mean evaluation metrics after `step` updates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalRecord {
    pub step: usize,
    pub mean: MetricReport,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunLog {
    pub steps: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| UNDEFINED.to_string(), |x| x.to_string())
}

impl RunLog {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{RUNLOG_HEADER}\n");
        for r in &self.steps {
            writeln!(s, "{}", r.csv_row()).unwrap();
        }
        s
    }

    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some(RUNLOG_HEADER) {
            return Err(Error::Config("run log header mismatch".into()));
        }
        let steps = lines.filter(|l| !l.trim().is_empty()).map(StepRecord::parse_row).collect::<Result<_>>()?;
        Ok(Self { steps, evals: Vec::new() })
    }

    pub fn eval_csv(&self) -> String {
        let mut s = format!("{EVAL_LOG_HEADER}\n");
        for e in &self.evals {
            let m = &e.mean;
            writeln!(s, "{},{},{},{},{}", e.step, m.dice, m.jaccard, opt(m.asd), opt(m.hd95)).unwrap();
        }
        s
    }
}
