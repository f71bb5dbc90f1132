//! Executes every `(arm, seed, class order)` run of a configuration and
//! writes per-run and aggregated results.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::config::{ResolvedArm, RunConfig};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::harness::{mean_std, run_continual, RunResult};
use crate::knowledge::{total_matching_count, MatchingScheme};

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Overrides `output_dir` from the config.
    pub out_dir: Option<PathBuf>,
    pub force: bool,
    /// Concurrent runs; 0 or 1 runs them one at a time.
    pub jobs: usize,
}

/// Metrics record for a single run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunRecord {
    pub config_hash: String,
    pub arm: String,
    pub seed: u64,
    pub class_order_seed: u64,
    pub avg: f64,
    pub last: f64,
    pub first_task_curve: Vec<f64>,
    pub final_per_task: Vec<f64>,
    pub iterations: usize,
    pub total_conflicts: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    fn of(values: &[f64]) -> Self {
        let (mean, std) = mean_std(values);
        MeanStd { mean, std }
    }
}

/// Across-seed summary for one arm.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ArmAggregate {
    pub config_hash: String,
    pub arm: String,
    pub scheme: String,
    pub credit: bool,
    pub optimizer: String,
    pub runs: usize,
    pub avg: MeanStd,
    pub last: MeanStd,
    pub first_task_final: MeanStd,
    pub first_task_curve: Vec<MeanStd>,
}

#[derive(Debug, Clone)]
pub struct ExperimentSummary {
    pub config_hash: String,
    pub records: Vec<RunRecord>,
    pub aggregates: Vec<ArmAggregate>,
    pub files: Vec<PathBuf>,
}

impl ExperimentSummary {
    pub fn aggregate(&self, arm: &str) -> Option<&ArmAggregate> {
        self.aggregates.iter().find(|a| a.arm == arm)
    }
}

#[derive(Debug, Clone)]
struct Job {
    arm: ResolvedArm,
    seed: u64,
    order: u64,
}

impl Job {
    fn stem(&self, hash: &str) -> String {
        format!(
            "{hash}_{}_seed{}_order{}",
            self.arm.name, self.seed, self.order
        )
    }
}

fn jobs_for(config: &RunConfig) -> Vec<Job> {
    let mut jobs = Vec::new();
    for arm in config.resolved_arms() {
        for &order in &config.stream.class_order_seeds {
            for &seed in &config.seeds {
                jobs.push(Job {
                    arm: arm.clone(),
                    seed,
                    order,
                });
            }
        }
    }
    jobs
}

fn execute(config: &RunConfig, job: &Job, exec: Execution) -> Result<RunResult> {
    let stream = config.build_stream(job.seed, job.order)?;
    let spec = config.model_spec(&stream);
    run_continual(
        &stream,
        &spec,
        &config.train_config(&job.arm, job.seed, exec),
        None,
    )
}

fn record_for(hash: &str, job: &Job, result: &RunResult) -> RunRecord {
    RunRecord {
        config_hash: hash.to_string(),
        arm: job.arm.name.clone(),
        seed: job.seed,
        class_order_seed: job.order,
        avg: result.metrics.avg,
        last: result.metrics.last,
        first_task_curve: result.metrics.first_task_curve.clone(),
        final_per_task: result.metrics.final_per_task.clone(),
        iterations: result.iterations,
        total_conflicts: result.total_conflicts,
    }
}

fn json_line<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string(value).expect("serializable");
    s.push('\n');
    s
}

fn write_run_files(
    dir: &Path,
    stem: &str,
    record: &RunRecord,
    result: &RunResult,
) -> Result<Vec<PathBuf>> {
    let mut files = vec![
        dir.join(format!("{stem}_accuracy.csv")),
        dir.join(format!("{stem}_metrics.json")),
    ];
    fs::write(&files[0], result.accuracy.to_csv())?;
    fs::write(&files[1], json_line(record))?;
    if !result.log.is_empty() {
        let path = dir.join(format!("{stem}_diagnostics.jsonl"));
        let body: String = result.log.iter().map(|r| r.to_json_line() + "\n").collect();
        fs::write(&path, body)?;
        files.push(path);
    }
    Ok(files)
}

fn aggregate(hash: &str, arm: &ResolvedArm, records: &[&RunRecord]) -> ArmAggregate {
    let col = |f: &dyn Fn(&RunRecord) -> f64| records.iter().map(|r| f(r)).collect::<Vec<_>>();
    let tasks = records
        .first()
        .map(|r| r.first_task_curve.len())
        .unwrap_or(0);
    ArmAggregate {
        config_hash: hash.to_string(),
        arm: arm.name.clone(),
        scheme: arm.scheme.name(),
        credit: arm.credit.enabled,
        optimizer: arm.optimizer.name().to_string(),
        runs: records.len(),
        avg: MeanStd::of(&col(&|r| r.avg)),
        last: MeanStd::of(&col(&|r| r.last)),
        first_task_final: MeanStd::of(&col(&|r| *r.first_task_curve.last().unwrap_or(&f64::NAN))),
        first_task_curve: (0..tasks)
            .map(|i| MeanStd::of(&col(&|r| r.first_task_curve[i])))
            .collect(),
    }
}

fn curve_csv(agg: &ArmAggregate, records: &[&RunRecord]) -> String {
    let mut out = String::from("after_task,mean,std");
    for r in records {
        write!(out, ",seed{}_order{}", r.seed, r.class_order_seed).unwrap();
    }
    out.push('\n');
    for (i, ms) in agg.first_task_curve.iter().enumerate() {
        write!(out, "{},{:.6},{:.6}", i + 1, ms.mean, ms.std).unwrap();
        for r in records {
            write!(out, ",{:.6}", r.first_task_curve[i]).unwrap();
        }
        out.push('\n');
    }
    out
}

fn planned_files(dir: &Path, hash: &str, config: &RunConfig, jobs: &[Job]) -> Vec<PathBuf> {
    let mut files = vec![
        dir.join(format!("{hash}_config.toml")),
        dir.join(format!("{hash}_aggregate.jsonl")),
    ];
    for arm in config.resolved_arms() {
        files.push(dir.join(format!("{hash}_{}_first_task_curve.csv", arm.name)));
    }
    for job in jobs {
        files.push(dir.join(format!("{}_accuracy.csv", job.stem(hash))));
        files.push(dir.join(format!("{}_metrics.json", job.stem(hash))));
    }
    files
}

fn failure_marker(dir: &Path, hash: &str) -> PathBuf {
    dir.join(format!("{hash}_FAILED"))
}

/// Runs every job, writing per-run files as they finish and the aggregates last.
pub fn run_experiment(config: &RunConfig, opts: &RunOptions) -> Result<ExperimentSummary> {
    config.validate()?;
    let hash = config.hash();
    let dir = opts
        .out_dir
        .clone()
        .unwrap_or_else(|| config.output_dir.clone());
    fs::create_dir_all(&dir)?;
    let jobs = jobs_for(config);
    if !opts.force {
        if let Some(existing) = planned_files(&dir, &hash, config, &jobs)
            .into_iter()
            .find(|p| p.exists())
        {
            return Err(Error::State(format!(
                "{} already exists; pass --force to overwrite",
                existing.display()
            )));
        }
    }
    let marker = failure_marker(&dir, &hash);
    if marker.exists() {
        fs::remove_file(&marker)?;
    }
    let config_path = dir.join(format!("{hash}_config.toml"));
    fs::write(&config_path, config.to_toml())?;

    let concurrent = opts.jobs > 1 && cfg!(feature = "parallel");
    let inner = if concurrent {
        Execution::Sequential
    } else {
        Execution::Parallel
    };
    let work = |job: &Job| -> Result<(RunRecord, Vec<PathBuf>)> {
        let result = execute(config, job, inner)?;
        let record = record_for(&hash, job, &result);
        let files = write_run_files(&dir, &job.stem(&hash), &record, &result)?;
        Ok((record, files))
    };
    let outcomes = run_jobs(&jobs, opts.jobs, concurrent, work)?;

    let mut records = Vec::with_capacity(jobs.len());
    let mut files = vec![config_path];
    let mut failures = String::new();
    for (job, outcome) in jobs.iter().zip(outcomes) {
        match outcome {
            Ok((record, written)) => {
                records.push(record);
                files.extend(written);
            }
            Err(e) => writeln!(failures, "{}: {e}", job.stem(&hash)).unwrap(),
        }
    }
    if !failures.is_empty() {
        fs::write(&marker, &failures)?;
        return Err(Error::State(format!(
            "{} of {} runs failed; see {}",
            failures.lines().count(),
            jobs.len(),
            marker.display()
        )));
    }

    let mut aggregates = Vec::new();
    let mut aggregate_body = String::new();
    for arm in config.resolved_arms() {
        let mine: Vec<&RunRecord> = records.iter().filter(|r| r.arm == arm.name).collect();
        let agg = aggregate(&hash, &arm, &mine);
        let curve_path = dir.join(format!("{hash}_{}_first_task_curve.csv", arm.name));
        fs::write(&curve_path, curve_csv(&agg, &mine))?;
        files.push(curve_path);
        aggregate_body.push_str(&json_line(&agg));
        aggregates.push(agg);
    }
    let aggregate_path = dir.join(format!("{hash}_aggregate.jsonl"));
    fs::write(&aggregate_path, aggregate_body)?;
    files.push(aggregate_path);

    Ok(ExperimentSummary {
        config_hash: hash,
        records,
        aggregates,
        files,
    })
}

type JobOutcome = Result<(RunRecord, Vec<PathBuf>)>;

fn run_jobs<F>(jobs: &[Job], threads: usize, concurrent: bool, work: F) -> Result<Vec<JobOutcome>>
where
    F: Fn(&Job) -> JobOutcome + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if concurrent {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::State(format!("thread pool: {e}")))?;
        return Ok(pool.install(|| Execution::Parallel.map(jobs, &work)));
    }
    let _ = (threads, concurrent);
    Ok(jobs.iter().map(work).collect())
}

/// Matching cost of one arm's scheme over the configured task count.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostLine {
    pub arm: String,
    pub scheme: String,
    pub tasks: usize,
    pub matchings: usize,
    pub strong_matchings: usize,
    /// Percentage saved relative to matching every previous function.
    pub reduction_pct: f64,
}

/// Counts function matchings per arm without training anything.
pub fn audit_cost(config: &RunConfig) -> Result<Vec<CostLine>> {
    config.validate()?;
    let tasks = config.num_tasks()?;
    if tasks < 2 {
        return Err(Error::config(
            "stream",
            "a cost audit needs at least two tasks",
        ));
    }
    let strong = total_matching_count(&MatchingScheme::Strong, tasks)?;
    config
        .resolved_arms()
        .into_iter()
        .map(|arm| {
            let matchings = total_matching_count(&arm.scheme, tasks)?;
            Ok(CostLine {
                arm: arm.name,
                scheme: arm.scheme.name(),
                tasks,
                matchings,
                strong_matchings: strong,
                reduction_pct: 100.0 * (1.0 - matchings as f64 / strong as f64),
            })
        })
        .collect()
}
