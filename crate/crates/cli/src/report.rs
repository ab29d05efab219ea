use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use dihc_core::metrics::{parse_metric, UNDEFINED};
use dihc_core::trainer::{RunLog, TrainConfig, EVAL_FILE, RUNLOG_FILE};

use crate::commands::RUN_MANIFEST;
use crate::{CliResult, Failure};

pub const TABLE_HEADER: &str = "imd,ms,dihc,labelled_fraction,runs,dice,jaccard,asd,hd95";
pub const CURVES_HEADER: &str = "run,step,l_sup,l_mc,l_dihc,lambda_cst,l_total,disagreement";

struct Run {
    name: String,
    cfg: TrainConfig,
    /// Mean-row metrics from `eval.csv`, if the run was evaluated.
    metrics: Option<[Option<f64>; 4]>,
    log: RunLog,
}

fn config_from_manifest(text: &str) -> CliResult<TrainConfig> {
    let mut cfg = TrainConfig::default();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some((k, v)) = line.split_once('=') {
            if TrainConfig::KEYS.contains(&k.trim()) {
                cfg.set(k.trim(), v)?;
            }
        }
    }
    Ok(cfg)
}

fn mean_row(eval_csv: &str) -> Option<[Option<f64>; 4]> {
    let row = eval_csv.lines().find(|l| l.starts_with("mean,"))?;
    let f: Vec<&str> = row.split(',').collect();
    (f.len() == 5).then(|| std::array::from_fn(|i| parse_metric(f[i + 1])))
}

fn load_run(dir: &Path) -> CliResult<Run> {
    let name = dir.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| ".".into());
    let cfg = config_from_manifest(&fs::read_to_string(dir.join(RUN_MANIFEST))?)?;
    let log = match fs::read_to_string(dir.join(RUNLOG_FILE)) {
        Ok(t) => RunLog::parse_csv(&t).map_err(|e| Failure::Usage(format!("{}: {e}", dir.display())))?,
        Err(_) => RunLog::default(),
    };
    let metrics = fs::read_to_string(dir.join(EVAL_FILE)).ok().and_then(|t| mean_row(&t));
    Ok(Run { name, cfg, metrics, log })
}

fn find_runs(root: &Path) -> CliResult<Vec<PathBuf>> {
    if root.join(RUN_MANIFEST).is_file() {
        return Ok(vec![root.to_path_buf()]);
    }
    let entries = fs::read_dir(root).map_err(|e| Failure::Usage(format!("{}: {e}", root.display())))?;
    let mut dirs: Vec<PathBuf> =
        entries.filter_map(|e| e.ok()).map(|e| e.path()).filter(|p| p.join(RUN_MANIFEST).is_file()).collect();
    dirs.sort();
    Ok(dirs)
}

fn fmt_mean(values: &[Option<f64>]) -> String {
    let defined: Vec<f64> = values.iter().flatten().copied().collect();
    if defined.is_empty() {
        UNDEFINED.into()
    } else {
        (defined.iter().sum::<f64>() / defined.len() as f64).to_string()
    }
}

/// Comparison table with one row per (ablation, labelled fraction), metrics
/// averaged over that group's runs, plus per-step curves of every run.
pub fn render(runs_dir: &Path) -> CliResult<(String, String)> {
    let runs = find_runs(runs_dir)?.iter().map(|d| load_run(d)).collect::<CliResult<Vec<_>>>()?;
    if runs.is_empty() {
        return Err(Failure::Usage(format!("{}: no runs found", runs_dir.display())));
    }
    // key orders rows by fraction, then from the bare baseline to the full method
    let mut groups: BTreeMap<(String, bool, bool, bool), Vec<&Run>> = BTreeMap::new();
    for r in &runs {
        let key = (format!("{}", r.cfg.labelled_fraction), r.cfg.enable_imd, r.cfg.enable_ms, r.cfg.enable_dihc);
        groups.entry(key).or_default().push(r);
    }
    let mut table = format!("{TABLE_HEADER}\n");
    let flag = |b: bool| if b { "1" } else { "0" };
    for ((fraction, imd, ms, dihc), members) in &groups {
        let col = |i: usize| -> Vec<Option<f64>> { members.iter().map(|r| r.metrics.and_then(|m| m[i])).collect() };
        writeln!(
            table,
            "{},{},{},{fraction},{},{},{},{},{}",
            flag(*imd),
            flag(*ms),
            flag(*dihc),
            members.len(),
            fmt_mean(&col(0)),
            fmt_mean(&col(1)),
            fmt_mean(&col(2)),
            fmt_mean(&col(3))
        )
        .unwrap();
    }
    let mut curves = format!("{CURVES_HEADER}\n");
    for r in &runs {
        for s in &r.log.steps {
            writeln!(curves, "{},{}", r.name, s.csv_row()).unwrap();
        }
    }
    Ok((table, curves))
}

/// `table.csv` -> `table_curves.csv`.
pub fn curves_path(out: &Path) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "report".into());
    out.with_file_name(format!("{stem}_curves.csv"))
}

pub fn report(runs_dir: &Path, out: &Path) -> CliResult {
    let (table, curves) = render(runs_dir)?;
    let write = |p: &Path, s: &str| fs::write(p, s).map_err(|e| Failure::Usage(format!("{}: {e}", p.display())));
    write(out, &table)?;
    write(&curves_path(out), &curves)?;
    Ok(())
}
