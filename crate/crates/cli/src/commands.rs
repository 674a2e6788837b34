use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Result};
use serde::Serialize;
use softflow::data::{read_corpus, write_corpus, Episode};
use softflow::envs::{gen_demos, make_demonstrator, make_env, ChunkEnv};
use softflow::pipeline::{
    eval_records, read_checkpoint, EvalRecord, Inputs, RunDir, Runner, Stage, StageReport,
};
use softflow::verify::{self, CheckResult};
use softflow::{Error, Scalar};

use crate::config::{Axis, Precision, RunConfig};

/// Metrics file written by `eval` inside the run directory.
pub const METRICS_FILE: &str = "metrics.jsonl";

pub struct GenData {
    pub episodes: Option<usize>,
    pub fail_frac: Option<f64>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub overwrite: bool,
}

pub fn gen_data(cfg: &RunConfig, args: &GenData) -> Result<()> {
    let n = args.episodes.unwrap_or(cfg.data.episodes);
    let fail_frac = args.fail_frac.unwrap_or(cfg.data.fail_frac);
    let seed = args.seed.unwrap_or(cfg.data.seed);
    let dir = args.out.clone().unwrap_or_else(|| cfg.data_path());
    let env = make_env(&cfg.env)?;
    let t = &cfg.train;
    let mut demo = make_demonstrator(env.as_ref(), &cfg.env, t.chunk_len, t.prefix_len, seed)?;
    let eps = gen_demos(env.as_ref(), demo.as_mut(), n, fail_frac, seed)?;
    let m = write_corpus(&dir, &cfg.env, seed, &eps, args.overwrite)?;
    let ok = m.episodes.iter().filter(|e| e.success).count();
    println!(
        "wrote {} {} episodes ({ok} successful) to {}",
        m.episodes.len(),
        cfg.env,
        dir.display()
    );
    Ok(())
}

/// Stage selector of `train`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum StageArg {
    Il,
    Warmup,
    Offline,
    Online,
    Distill,
    All,
}

impl StageArg {
    fn stage(self) -> Option<Stage> {
        match self {
            StageArg::Il => Some(Stage::Il),
            StageArg::Warmup => Some(Stage::Warmup),
            StageArg::Offline => Some(Stage::Offline),
            StageArg::Online => Some(Stage::Online),
            StageArg::Distill => Some(Stage::Distill),
            StageArg::All => None,
        }
    }
}

fn load_demos(cfg: &RunConfig) -> Result<Vec<Episode>> {
    let dir = cfg.data_path();
    let (m, eps) = read_corpus(&dir)?;
    if m.env != cfg.env {
        return Err(Error::Data(format!(
            "corpus {} was generated for '{}', the config names '{}'",
            dir.display(),
            m.env,
            cfg.env
        ))
        .into());
    }
    Ok(eps)
}

fn eval_summary(eval: &[EvalRecord]) -> String {
    eval.iter()
        .map(|r| format!("success@N={} {:.3}", r.n_samples, r.metrics.success_rate))
        .collect::<Vec<_>>()
        .join(", ")
}

fn print_report(r: &StageReport) {
    println!(
        "stage {:<8} steps {:>6}  {:>7.1} s  {}",
        r.stage.name(),
        r.steps,
        r.wall_time_s,
        eval_summary(&r.eval)
    );
}

/// Runs `stages` (or the whole plan when `None`) in `dir`, returning the reports
/// produced by this invocation.
fn run_stages<T: Scalar>(
    cfg: &RunConfig,
    dir: &Path,
    stages: Option<&[Stage]>,
    resume: bool,
) -> Result<Vec<StageReport>> {
    let run_dir = RunDir::new(dir);
    let env = make_env(&cfg.env)?;
    let plan = Stage::sequence(cfg.train.plan);
    let todo: Vec<Stage> = stages.map_or_else(|| plan.to_vec(), <[Stage]>::to_vec);
    let il_done = resume && run_dir.checkpoint(Stage::Il).exists();
    let demos = if todo.contains(&Stage::Il) && !il_done {
        Some(load_demos(cfg)?)
    } else {
        None
    };
    let t = &cfg.train;
    let mut teacher = if todo.contains(&Stage::Distill) {
        Some(make_demonstrator(
            env.as_ref(),
            &cfg.env,
            t.chunk_len,
            t.prefix_len,
            t.seed,
        )?)
    } else {
        None
    };
    let mut inputs = Inputs {
        demos: demos.as_deref(),
        env: Some(env.as_ref()),
        teacher: teacher
            .as_deref_mut()
            .map(|t| t as &mut dyn softflow::envs::Actor),
    };
    let mut runner = Runner::<T>::new(cfg.train.clone(), Some(run_dir))?;
    if stages.is_none() {
        runner.run_all(&mut inputs, resume)?;
    } else {
        for s in todo {
            runner.run_stage(s, &mut inputs)?;
        }
    }
    Ok(runner.reports().to_vec())
}

pub fn train(cfg: &RunConfig, stage: StageArg, resume: bool) -> Result<()> {
    let dir = cfg.out_path();
    cfg.write_snapshot(&dir)?;
    let single;
    let stages: Option<&[Stage]> = match stage.stage() {
        Some(s) => {
            single = [s];
            Some(&single)
        }
        None if !cfg.stages.is_empty() => Some(&cfg.stages),
        None => None,
    };
    let reports = match cfg.precision {
        Precision::F32 => run_stages::<f32>(cfg, &dir, stages, resume)?,
        Precision::F64 => run_stages::<f64>(cfg, &dir, stages, resume)?,
    };
    if reports.is_empty() {
        println!(
            "nothing to run: every stage already has a checkpoint in {}",
            dir.display()
        );
    }
    reports.iter().for_each(print_report);
    Ok(())
}

#[derive(Serialize)]
struct MetricsLine<'a> {
    checkpoint: String,
    stage: Stage,
    config_hash: String,
    seed: u64,
    #[serde(flatten)]
    record: &'a EvalRecord,
}

/// Latest checkpoint of the configured plan present in `dir`.
fn latest_checkpoint(cfg: &RunConfig, dir: &RunDir) -> Result<PathBuf> {
    Stage::sequence(cfg.train.plan)
        .iter()
        .rev()
        .map(|&s| dir.checkpoint(s))
        .find(|p| p.exists())
        .ok_or_else(|| Error::Resume(format!("no checkpoint in {}", dir.root.display())).into())
}

fn eval_with<T: Scalar>(
    ckpt: &Path,
    env: &dyn ChunkEnv,
    episodes: usize,
    seed: u64,
) -> Result<(Stage, String, Vec<EvalRecord>)> {
    let st = read_checkpoint::<T>(ckpt)?;
    if st.critic.is_none() {
        log::info!("checkpoint has no critic; reporting plain sampling only");
    }
    let recs = eval_records(
        &st.config,
        &st.policy,
        st.critic.as_ref(),
        &st.norm,
        env,
        episodes,
        seed,
    )?;
    Ok((st.stage, st.config_hash(), recs))
}

pub fn eval(
    cfg: &RunConfig,
    checkpoint: Option<PathBuf>,
    episodes: usize,
    seed: Option<u64>,
    output: Option<PathBuf>,
) -> Result<()> {
    if episodes == 0 {
        return Err(Error::Argument("evaluation needs at least one episode".into()).into());
    }
    let dir = RunDir::new(cfg.out_path());
    let ckpt = match checkpoint {
        Some(p) => p,
        None => latest_checkpoint(cfg, &dir)?,
    };
    let env = make_env(&cfg.env)?;
    let seed = seed.unwrap_or(cfg.train.seed);
    let (stage, config_hash, recs) = match cfg.precision {
        Precision::F32 => eval_with::<f32>(&ckpt, env.as_ref(), episodes, seed)?,
        Precision::F64 => eval_with::<f64>(&ckpt, env.as_ref(), episodes, seed)?,
    };
    let out = output.unwrap_or_else(|| dir.root.join(METRICS_FILE));
    if let Some(parent) = out.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut text = String::new();
    for r in &recs {
        let line = MetricsLine {
            checkpoint: ckpt.display().to_string(),
            stage,
            config_hash: config_hash.clone(),
            seed,
            record: r,
        };
        text += &serde_json::to_string(&line)?;
        text.push('\n');
    }
    fs::write(&out, text)?;
    println!(
        "{} after '{}' over {episodes} episodes: {}",
        ckpt.display(),
        stage.name(),
        eval_summary(&recs)
    );
    println!("metrics written to {}", out.display());
    Ok(())
}

fn checkpoint_check(path: &Path) -> CheckResult {
    let (value, detail) = match read_checkpoint::<f64>(path) {
        Ok(st) => (
            0.0,
            format!("{} loads (stage '{}')", path.display(), st.stage.name()),
        ),
        Err(e) => (1.0, format!("{}: {e}", path.display())),
    };
    CheckResult::below("checkpoint", detail, value, 0.5)
}

/// Runs the verification suites; returns whether everything passed.
pub fn check(filter: Option<&str>, checkpoints: &[PathBuf]) -> Result<bool> {
    let mut results = if filter.is_some() || checkpoints.is_empty() {
        verify::run_checks(filter)?
    } else {
        Vec::new()
    };
    results.extend(checkpoints.iter().map(|p| checkpoint_check(p)));
    let mut failed = 0;
    for r in &results {
        let mark = if r.passed { "PASS" } else { "FAIL" };
        println!(
            "{mark} {:<14} {:<52} {:.3e} (tol {:.1e})",
            r.suite, r.check, r.value, r.tolerance
        );
        failed += usize::from(!r.passed);
    }
    println!("{} checks, {failed} failed", results.len());
    Ok(failed == 0)
}

#[derive(Serialize)]
struct SweepRow {
    axis: &'static str,
    value: f64,
    stage: Stage,
    config_hash: String,
    eval: Vec<EvalRecord>,
}

/// Directory of one sweep point.
pub fn sweep_dir(root: &Path, axis: Axis, v: f64) -> PathBuf {
    root.join(format!("sweep-{}", axis.name()))
        .join(format!("{}={v}", axis.name()))
}

pub fn sweep(cfg: &RunConfig, axis: Option<Axis>, values: Option<Vec<f64>>) -> Result<()> {
    let Some(axis) = axis.or(cfg.sweep.axis) else {
        bail!(Error::Argument(
            "sweep needs an axis (--axis or [sweep].axis)".into()
        ));
    };
    let values = values
        .or_else(|| cfg.sweep.values.clone())
        .unwrap_or_else(|| axis.grid());
    if values.is_empty() {
        return Err(Error::Argument("sweep needs at least one value".into()).into());
    }
    if cfg.train.eval_episodes == 0 {
        return Err(Error::Config("sweep needs train.eval_episodes > 0".into()).into());
    }
    let root = cfg.out_path();
    let stages = (!cfg.stages.is_empty()).then_some(cfg.stages.as_slice());
    let mut rows = Vec::with_capacity(values.len());
    for &v in &values {
        let point = RunConfig {
            train: axis.apply(&cfg.train, v)?,
            ..cfg.clone()
        };
        point.validate()?;
        let dir = sweep_dir(&root, axis, v);
        point.write_snapshot(&dir)?;
        let reports = match cfg.precision {
            Precision::F32 => run_stages::<f32>(&point, &dir, stages, false)?,
            Precision::F64 => run_stages::<f64>(&point, &dir, stages, false)?,
        };
        let last = reports
            .last()
            .expect("a sweep point runs at least one stage");
        println!("{}={v:<6} {}", axis.name(), eval_summary(&last.eval));
        rows.push(SweepRow {
            axis: axis.name(),
            value: v,
            stage: last.stage,
            config_hash: last.config_hash.clone(),
            eval: last.eval.clone(),
        });
    }
    let path = root.join(format!("sweep_{}.jsonl", axis.name()));
    let mut f = fs::File::create(&path)?;
    for r in &rows {
        writeln!(f, "{}", serde_json::to_string(r)?)?;
    }
    println!("{} rows written to {}", rows.len(), path.display());
    Ok(())
}
