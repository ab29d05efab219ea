use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;

use dihc_core::data::{generate_synthetic, load_dataset, split_available, write_dataset, Manifest, Volume};
use dihc_core::gradcheck;
use dihc_core::metrics::{report_csv, BinaryMask, MetricReport};
use dihc_core::tensor::set_conv3d_backward_corruption;
use dihc_core::trainer::{evaluate, run_outputs, Ablation, Checkpoint, Trainer, TrainConfig};

use crate::{CliResult, Failure};

pub const RUN_MANIFEST: &str = "run_manifest.txt";

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Dataset directory written by `gen-data`.
    #[arg(long)]
    pub data: PathBuf,
    /// Held-out labelled dataset for periodic evaluation.
    #[arg(long)]
    pub eval_data: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// `key = value` file; flags given here take precedence over it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub labelled_fraction: Option<f64>,
    #[arg(long)]
    pub t_max: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// `full`, `none`, or a comma list of `imd`, `ms`, `dihc`.
    #[arg(long)]
    pub ablation: Option<String>,
    #[arg(long)]
    pub eval_every: Option<usize>,
    /// Continue from a checkpoint; its stored configuration is used.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

pub fn gen_data(out: &Path, n: usize, shape: usize, seed: u64) -> CliResult {
    if n == 0 {
        return Err(Failure::Usage("--n must be at least 1".into()));
    }
    let samples = generate_synthetic(n, [shape; 3], seed)?;
    let manifest = write_dataset(out, &samples).map_err(|e| Failure::Usage(format!("{}: {e}", out.display())))?;
    log::info!("wrote {} volumes to {}", manifest.entries.len(), out.display());
    Ok(())
}

/// Worker threads requested through `DIHC_THREADS`; training itself runs on
/// one thread, which is what gets recorded.
fn thread_setting() -> CliResult<(Option<usize>, usize)> {
    let requested = match std::env::var("DIHC_THREADS") {
        Ok(v) => Some(
            v.trim()
                .parse::<usize>()
                .ok()
                .filter(|&t| t > 0)
                .ok_or_else(|| Failure::Usage(format!("DIHC_THREADS must be a positive integer, got `{v}`")))?,
        ),
        Err(_) => None,
    };
    Ok((requested, 1))
}

fn effective_config(args: &TrainArgs) -> CliResult<TrainConfig> {
    let mut cfg = TrainConfig::default();
    if let Some(path) = &args.config {
        let text = fs::read_to_string(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
        cfg.apply_text(&text)?;
    }
    if let Some(v) = args.labelled_fraction {
        cfg.labelled_fraction = v;
    }
    if let Some(v) = args.t_max {
        cfg.t_max = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.eval_every {
        cfg.eval_every = v;
    }
    if let Some(a) = &args.ablation {
        cfg.set_ablation(Ablation::parse(a)?);
    }
    Ok(cfg)
}

fn load(dir: &Path) -> CliResult<Vec<(Volume, Option<BinaryMask>)>> {
    load_dataset(dir).map_err(|e| Failure::Usage(format!("{}: {e}", dir.display())))
}

fn labelled_cases(data: Vec<(Volume, Option<BinaryMask>)>) -> Vec<(Volume, BinaryMask)> {
    data.into_iter().filter_map(|(v, m)| m.map(|m| (v, m))).collect()
}

fn write_run_manifest(args: &TrainArgs, cfg: &TrainConfig, threads: (Option<usize>, usize)) -> CliResult {
    let mut s = String::new();
    writeln!(s, "# effective configuration").unwrap();
    s.push_str(&cfg.to_text());
    writeln!(s, "# run").unwrap();
    writeln!(s, "ablation = {}", cfg.ablation().label()).unwrap();
    writeln!(s, "code_version = {}", env!("CARGO_PKG_VERSION")).unwrap();
    writeln!(s, "threads_requested = {}", threads.0.map_or("unset".into(), |t| t.to_string())).unwrap();
    writeln!(s, "threads = {}", threads.1).unwrap();
    writeln!(s, "data = {}", args.data.display()).unwrap();
    if let Some(e) = &args.eval_data {
        writeln!(s, "eval_data = {}", e.display()).unwrap();
    }
    if let Some(r) = &args.resume {
        writeln!(s, "resume = {}", r.display()).unwrap();
    }
    for p in run_outputs(&args.out) {
        writeln!(s, "output = {}", p.display()).unwrap();
    }
    fs::write(args.out.join(RUN_MANIFEST), s)?;
    Ok(())
}

pub fn train(args: &TrainArgs) -> CliResult {
    let threads = thread_setting()?;
    let data = load(&args.data)?;
    let shape = data[0].0.shape();
    let mut trainer = match &args.resume {
        Some(path) => {
            let ck = Checkpoint::load(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
            let tr = Trainer::from_checkpoint(&ck)?;
            log::info!("resuming at step {} of {}", tr.step(), tr.cfg.t_max);
            tr
        }
        None => {
            let mut cfg = effective_config(args)?;
            if args.config.is_some() && cfg.patch != shape {
                return Err(Failure::Usage(format!("config patch {:?} differs from data shape {shape:?}", cfg.patch)));
            }
            cfg.patch = shape;
            Trainer::new(cfg)?
        }
    };
    let cfg = trainer.cfg.clone();
    let split = split_available(&data, cfg.labelled_fraction, cfg.seed)?;
    log::info!(
        "{} labelled / {} unlabelled volumes, ablation {}",
        split.num_labelled(),
        split.num_unlabelled(),
        cfg.ablation().label()
    );
    let eval_set = match &args.eval_data {
        Some(dir) => {
            let cases = labelled_cases(load(dir)?);
            if cases.is_empty() {
                return Err(Failure::Usage(format!("{}: no labelled volumes to evaluate", dir.display())));
            }
            Some(cases)
        }
        None => None,
    };
    fs::create_dir_all(&args.out).map_err(|e| Failure::Usage(format!("{}: {e}", args.out.display())))?;
    write_run_manifest(args, &cfg, threads)?;
    let log = trainer.run(&split, eval_set.as_deref(), Some(&args.out))?;
    if let Some(e) = log.evals.last() {
        log::info!("final mean dice {:.2}", e.mean.dice);
    }
    Ok(())
}

pub fn eval(checkpoint: &Path, data: &Path, out: &Path) -> CliResult {
    let ck = Checkpoint::load(checkpoint).map_err(|e| Failure::Usage(format!("{}: {e}", checkpoint.display())))?;
    let mut trainer = Trainer::from_checkpoint(&ck)?;
    let manifest = Manifest::load(data).map_err(|e| Failure::Usage(format!("{}: {e}", data.display())))?;
    let cases = load(data)?;
    let mut ids = Vec::new();
    let mut set = Vec::new();
    for (entry, (v, m)) in manifest.entries.iter().zip(cases) {
        if let Some(m) = m {
            if v.shape() != trainer.cfg.patch {
                return Err(Failure::Usage(format!(
                    "{}: volume shape {:?} does not match the checkpoint patch {:?}",
                    entry.path.display(),
                    v.shape(),
                    trainer.cfg.patch
                )));
            }
            ids.push(entry.path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default());
            set.push((v, m));
        }
    }
    if set.is_empty() {
        return Err(Failure::Usage(format!("{}: no labelled volumes to evaluate", data.display())));
    }
    let reports = evaluate(&mut trainer.models, &set)?;
    let rows: Vec<(String, MetricReport)> = ids.into_iter().zip(reports).collect();
    fs::write(out, report_csv(&rows)).map_err(|e| Failure::Usage(format!("{}: {e}", out.display())))?;
    Ok(())
}

pub fn gradcheck(seed: u64, corrupt_conv3d: bool) -> CliResult {
    set_conv3d_backward_corruption(corrupt_conv3d);
    let report = gradcheck::run_all(seed)?;
    println!("{:<18} {:>12}  {:>6}  worst case", "op", "rel_err", "status");
    for r in &report.ops {
        let status = if r.passed() { "ok" } else { "FAIL" };
        println!("{:<18} {:>12.3e}  {:>6}  {}", r.op, r.worst_rel_err, status, r.worst_variant);
    }
    if report.passed() {
        Ok(())
    } else {
        Err(Failure::Check(format!(
            "gradient check failed for: {} (tolerance {:e})",
            report.failures().join(", "),
            gradcheck::TOLERANCE
        )))
    }
}
