use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use dauction::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use dauction::evaluation::{
    baseline_report, grid_sweep, sampled_testset, table_eval, write_metrics_csv, write_sweep_csv, MetricsReport,
    Setting, SweepSpec,
};
use dauction::mechanism::{LearnedMechanism, McAfee, Mechanism, Vcg};
use dauction::training::Trainer;
use dauction::verify::{run_all, Fault, VerifyOptions};
use serde::Serialize;

use crate::config::{resolve_out_dir, RunConfig};
use crate::{CliError, Common, Protocol};

const CHECKPOINT: &str = "checkpoint.ckpt";
const TRAIN_LOG: &str = "train_log.csv";

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    version: &'a str,
    seed: u64,
    threads: usize,
    args: Vec<String>,
    config: &'a RunConfig,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn prepare(common: &Common) -> Result<(RunConfig, PathBuf), CliError> {
    let mut config = RunConfig::load(common.config.as_deref(), &common.overrides)?;
    let out = resolve_out_dir(common.out.as_deref(), config.out_dir.as_deref());
    fs::create_dir_all(&out).map_err(io_err(&out))?;
    config.out_dir = Some(out.clone());
    Ok((config, out))
}

fn write_file(path: &Path, write: impl FnOnce(&mut BufWriter<File>) -> Result<(), CliError>) -> Result<(), CliError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    write(&mut w)?;
    w.flush().map_err(io_err(path))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    write_file(path, |w| {
        serde_json::to_writer_pretty(&mut *w, value).map_err(dauction::Error::from)?;
        writeln!(w).map_err(io_err(path))
    })
}

fn write_manifest(out: &Path, command: &str, config: &RunConfig, threads: usize) -> Result<(), CliError> {
    let manifest = Manifest {
        command,
        version: env!("CARGO_PKG_VERSION"),
        seed: config.train.seed,
        threads,
        args: std::env::args().skip(1).collect(),
        config,
    };
    write_json(&out.join(format!("{command}.manifest.json")), &manifest)
}

pub fn train(common: &Common, resume: Option<&Path>, threads: usize) -> Result<(), CliError> {
    let (config, out) = prepare(common)?;
    let mut trainer = match resume {
        Some(path) => {
            let ckpt = load_checkpoint(path)?;
            ckpt.expect_network(&config.network)?;
            let trainer = ckpt.into_trainer()?;
            if trainer.config != config.train {
                return Err(CliError::Config(format!(
                    "{} was trained with a different [train] section",
                    path.display()
                )));
            }
            trainer
        }
        None => Trainer::new(config.network.clone(), config.train.clone())?,
    };
    write_manifest(&out, "train", &config, threads)?;
    let ckpt_path = out.join(CHECKPOINT);
    let log_path = out.join(TRAIN_LOG);
    println!(
        "training {}x{} for {} epochs of {} iterations into {}",
        config.network.n,
        config.network.m,
        config.train.epochs,
        config.train.iterations_per_epoch(),
        out.display()
    );
    while !trainer.is_done() {
        let r = trainer.run_epoch()?;
        println!(
            "epoch {:>3}  loss {:+.5}  welfare {:.5}  rgt {:.5}/{:.5}  bbp {:.5}  rho {}",
            r.epoch, r.loss, r.welfare, r.rgt_buyer, r.rgt_seller, r.bbp, r.rho
        );
        save_checkpoint(&Checkpoint::from_trainer(&trainer), &ckpt_path)?;
        write_file(&log_path, |w| Ok(trainer.state.log.write_csv(w)?))?;
    }
    println!("wrote {} and {}", ckpt_path.display(), log_path.display());
    Ok(())
}

fn load_model(path: &Path) -> Result<LearnedMechanism, CliError> {
    Ok(load_checkpoint(path)?.into_mechanism()?)
}

#[derive(Serialize)]
struct MetricsDocument<'a> {
    rows: &'a [MetricsReport],
}

fn emit_metrics(out: &Path, stem: &str, rows: &[MetricsReport]) -> Result<(), CliError> {
    let csv = out.join(format!("{stem}.csv"));
    write_file(&csv, |w| Ok(write_metrics_csv(rows, w)?))?;
    write_json(&out.join(format!("{stem}.json")), &MetricsDocument { rows })?;
    println!("{:<8} {:<10} {:>9} {:>9} {:>9} {:>9}", "setting", "mechanism", "welfare", "bbp", "rgt", "entropy");
    let opt = |x: Option<f64>| x.map_or("-".to_string(), |v| format!("{v:.5}"));
    for r in rows {
        println!(
            "{:<8} {:<10} {:>9.5} {:>9.5} {:>9} {:>9}",
            r.setting,
            r.mechanism,
            r.welfare,
            r.bbp,
            opt(r.rgt),
            opt(r.entropy)
        );
    }
    println!("wrote {}", csv.display());
    Ok(())
}

pub fn eval(common: &Common, checkpoint: Option<&Path>, setting: Option<String>, threads: usize) -> Result<(), CliError> {
    let (mut config, out) = prepare(common)?;
    if let Some(s) = setting {
        config.eval.setting = s;
    }
    let setting = config.eval.setting()?;
    let model = checkpoint.map(load_model).transpose()?;
    write_manifest(&out, "eval", &config, threads)?;
    let rows = table_eval(model.as_ref(), &setting, &config.eval.regret)?;
    emit_metrics(&out, "metrics", &rows)
}

pub fn sweep(
    common: &Common,
    spec: &str,
    checkpoint: Option<&Path>,
    protocol: Option<Protocol>,
    name: &str,
    threads: usize,
) -> Result<(), CliError> {
    let (config, out) = prepare(common)?;
    let spec: SweepSpec = spec.parse()?;
    let mech: Box<dyn Mechanism> = match (checkpoint, protocol) {
        (Some(path), _) => {
            let model = load_model(path)?;
            if (model.net.n(), model.net.m()) != (spec.n, spec.m) {
                return Err(CliError::Config(format!(
                    "sweep is {}x{} but the checkpoint holds a {}x{} model",
                    spec.n,
                    spec.m,
                    model.net.n(),
                    model.net.m()
                )));
            }
            Box::new(model)
        }
        (None, Some(Protocol::Md)) => Box::new(McAfee {
            support: config.network.support,
        }),
        (None, Some(Protocol::Vcg)) => Box::new(Vcg),
        (None, None) => return Err(CliError::Config("give --checkpoint or --protocol".into())),
    };
    write_manifest(&out, "sweep", &config, threads)?;
    let records = grid_sweep(mech.as_ref(), &spec)?;
    let path = out.join(name);
    write_file(&path, |w| Ok(write_sweep_csv(&records, spec.n, spec.m, w)?))?;
    println!("{} {} records -> {}", mech.name(), records.len(), path.display());
    Ok(())
}

pub fn baseline(common: &Common, settings: &[String], sampled: bool, threads: usize) -> Result<(), CliError> {
    let (config, out) = prepare(common)?;
    let names: Vec<String> = if settings.is_empty() {
        vec!["2x2".into(), "3x3".into(), "5x5".into()]
    } else {
        settings.to_vec()
    };
    write_manifest(&out, "baseline", &config, threads)?;
    let md = McAfee {
        support: config.network.support,
    };
    let mut rows = Vec::new();
    for name in &names {
        let setting: Setting = name.parse()?;
        let (n, m) = setting.shape();
        let tests = match setting {
            Setting::Sampled5x5 { seed, .. } => {
                let seed = if name.contains(':') { seed } else { config.eval.sample_seed };
                sampled_testset(n, m, config.eval.sample_count, seed, &config.network.support)?
            }
            _ if sampled => sampled_testset(n, m, config.eval.sample_count, config.eval.sample_seed, &config.network.support)?,
            _ => setting.testset()?,
        };
        let label = setting.to_string();
        rows.push(baseline_report(&md, &label, &tests)?);
        rows.push(baseline_report(&Vcg, &label, &tests)?);
    }
    emit_metrics(&out, "baseline", &rows)
}

pub fn verify(seed: u64, json: Option<&Path>, inject_fault: bool) -> Result<(), CliError> {
    let opts = VerifyOptions {
        seed,
        fault: inject_fault.then_some(Fault::TanhBackwardSign),
        ..Default::default()
    };
    let report = run_all(&opts)?;
    for c in &report.checks {
        println!("{c}");
    }
    if let Some(path) = json {
        write_json(path, &report)?;
    }
    let failed: Vec<&str> = report.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
    if failed.is_empty() {
        println!("all {} checks passed", report.checks.len());
        Ok(())
    } else {
        Err(CliError::Violation(failed.join(", ")))
    }
}
