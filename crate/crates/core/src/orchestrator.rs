//! Batch execution of candidate implementations on simulators, scoring of
//! their statistics, and a batch-wise tuning loop on top.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use log::{info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use wait_timeout::ChildExt;

use crate::error::{Error, Result};
use crate::evaluation::synthetic::{stat_vector, true_runtime, ImplParams, ScheduleSpace, SyntheticSpec};
use crate::features::{assemble_feature_vector, FeatureMatrix, WindowSample, WindowState};
use crate::model::{FeatureSchema, GroupKey, StatVector};
use crate::predictors::PredictorModel;
use crate::stats::{extract_stat_vector, parse_stats_text, render_stat_vector, StatsMapping};

pub const DEFAULT_TIMEOUT_SECS: u64 = 600;
pub const STATS_FILE: &str = "stats.txt";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TuningJob {
    pub job_id: u64,
    pub group: GroupKey,
    /// Opaque to the orchestrator; handed to the builder.
    pub params: serde_json::Value,
    pub workdir: PathBuf,
}

impl TuningJob {
    pub fn stats_path(&self) -> PathBuf {
        self.workdir.join(STATS_FILE)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobStatus {
    Ok,
    BuildFailed,
    RunFailed,
    Timeout,
    ParseFailed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JobResult {
    pub job_id: u64,
    pub status: JobStatus,
    pub stats: Option<StatVector>,
    pub score: Option<f64>,
    pub diagnostics: String,
}

impl JobResult {
    fn failed(job_id: u64, status: JobStatus, diagnostics: String) -> Self {
        Self {
            job_id,
            status,
            stats: None,
            score: None,
            diagnostics,
        }
    }
}

/// Outcome of building and simulating one job, before parsing.
#[derive(Clone, Debug, PartialEq)]
pub enum Execution {
    /// Contents of the job's stats file.
    Stats(String),
    Failed {
        status: JobStatus,
        diagnostics: String,
    },
}

/// Builds and simulates one candidate. Implementations must not keep
/// per-job state: `execute` runs concurrently for different jobs.
pub trait SimulatorAdapter: Sync {
    fn execute(&self, job: &TuningJob) -> Execution;
    fn mapping(&self) -> &StatsMapping;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CommandAdapterConfig {
    /// Shell-style template; `{exe}` is required.
    pub build: String,
    /// Shell-style template; `{exe}` and `{stats_out}` are required.
    pub run: String,
    pub mapping: StatsMapping,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
}

fn default_timeout() -> u64 {
    DEFAULT_TIMEOUT_SECS
}

/// Runs external build and simulator commands. Placeholders: `{exe}`,
/// `{args}`, `{stats_out}`, `{workdir}`; the job parameters are also
/// written to `{workdir}/params.json`.
#[derive(Clone, Debug)]
pub struct CommandAdapter {
    build: Vec<String>,
    run: Vec<String>,
    mapping: StatsMapping,
    timeout: Duration,
}

fn split_template(t: &str) -> Result<Vec<String>> {
    let parts = shlex::split(t).ok_or_else(|| Error::invalid(format!("unbalanced quoting in template {t:?}")))?;
    if parts.is_empty() {
        return Err(Error::invalid("empty command template"));
    }
    Ok(parts)
}

fn require(parts: &[String], placeholder: &'static str) -> Result<()> {
    if parts.iter().any(|p| p.contains(placeholder)) {
        Ok(())
    } else {
        Err(Error::MissingPlaceholder(placeholder))
    }
}

/// `{args}` as its own token expands to one token per parameter.
fn args_tokens(params: &serde_json::Value) -> Vec<String> {
    use serde_json::Value;
    match params {
        Value::Null => Vec::new(),
        Value::Array(items) => items.iter().map(scalar_text).collect(),
        Value::Object(map) => map.iter().map(|(k, v)| format!("{k}={}", scalar_text(v))).collect(),
        other => vec![scalar_text(other)],
    }
}

fn scalar_text(v: &serde_json::Value) -> String {
    match v {
        serde_json::Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

impl CommandAdapter {
    pub fn new(config: &CommandAdapterConfig) -> Result<Self> {
        let build = split_template(&config.build)?;
        let run = split_template(&config.run)?;
        require(&build, "{exe}")?;
        require(&run, "{exe}")?;
        require(&run, "{stats_out}")?;
        if config.timeout_secs == 0 {
            return Err(Error::invalid("timeout must be positive"));
        }
        Ok(Self {
            build,
            run,
            mapping: config.mapping.clone(),
            timeout: Duration::from_secs(config.timeout_secs),
        })
    }

    fn expand(&self, template: &[String], job: &TuningJob) -> Vec<String> {
        let exe = job.workdir.join("candidate");
        let args = args_tokens(&job.params);
        let mut out = Vec::new();
        for token in template {
            if token == "{args}" {
                out.extend(args.iter().cloned());
                continue;
            }
            out.push(
                token
                    .replace("{exe}", &exe.to_string_lossy())
                    .replace("{stats_out}", &job.stats_path().to_string_lossy())
                    .replace("{workdir}", &job.workdir.to_string_lossy())
                    .replace("{args}", &args.join(" ")),
            );
        }
        out
    }

    fn step(
        &self,
        argv: &[String],
        job: &TuningJob,
        log_name: &str,
        fail: JobStatus,
    ) -> std::result::Result<(), Execution> {
        let failed = |diagnostics: String| Execution::Failed {
            status: fail,
            diagnostics,
        };
        let log = fs::File::create(job.workdir.join(log_name)).map_err(|e| failed(format!("{log_name}: {e}")))?;
        let log_err = log.try_clone().map_err(|e| failed(e.to_string()))?;
        let mut child = Command::new(&argv[0])
            .args(&argv[1..])
            .current_dir(&job.workdir)
            .stdin(Stdio::null())
            .stdout(log)
            .stderr(log_err)
            .spawn()
            .map_err(|e| failed(format!("cannot start {}: {e}", argv[0])))?;
        match child.wait_timeout(self.timeout) {
            Ok(Some(status)) if status.success() => Ok(()),
            Ok(Some(status)) => {
                let tail = fs::read_to_string(job.workdir.join(log_name)).unwrap_or_default();
                let tail: String = tail
                    .lines()
                    .rev()
                    .take(5)
                    .collect::<Vec<_>>()
                    .into_iter()
                    .rev()
                    .collect::<Vec<_>>()
                    .join("\n");
                Err(failed(format!("{} exited with {status}\n{tail}", argv[0])))
            }
            Ok(None) => {
                let _ = child.kill();
                let _ = child.wait();
                Err(Execution::Failed {
                    status: JobStatus::Timeout,
                    diagnostics: format!("{} exceeded {:?}", argv[0], self.timeout),
                })
            }
            Err(e) => Err(failed(e.to_string())),
        }
    }
}

impl SimulatorAdapter for CommandAdapter {
    fn execute(&self, job: &TuningJob) -> Execution {
        let prepare = || -> std::io::Result<()> {
            fs::create_dir_all(&job.workdir)?;
            fs::write(job.workdir.join("params.json"), serde_json::to_vec(&job.params)?)
        };
        if let Err(e) = prepare() {
            return Execution::Failed {
                status: JobStatus::BuildFailed,
                diagnostics: format!("workdir {}: {e}", job.workdir.display()),
            };
        }
        if let Err(e) = self.step(&self.expand(&self.build, job), job, "build.log", JobStatus::BuildFailed) {
            return e;
        }
        if let Err(e) = self.step(&self.expand(&self.run, job), job, "run.log", JobStatus::RunFailed) {
            return e;
        }
        match fs::read_to_string(job.stats_path()) {
            Ok(text) => Execution::Stats(text),
            Err(e) => Execution::Failed {
                status: JobStatus::RunFailed,
                diagnostics: format!("no stats file {}: {e}", job.stats_path().display()),
            },
        }
    }

    fn mapping(&self) -> &StatsMapping {
        &self.mapping
    }
}

/// Stats text the synthetic model predicts for `job`, whose parameters
/// must deserialize as [`ImplParams`].
pub fn mock_simulate(job: &TuningJob, spec: &SyntheticSpec) -> Result<String> {
    let group = spec
        .groups
        .iter()
        .find(|g| g.key() == job.group)
        .ok_or_else(|| Error::UnknownGroup(job.group.to_string()))?;
    let params: ImplParams = serde_json::from_value(job.params.clone())?;
    let stats = stat_vector(spec, group, &params)?;
    render_stat_vector(&stats, &StatsMapping::gem5_default(&spec.topology), &spec.topology)
}

/// In-process simulator backed by the synthetic model, with failure
/// injection and a concurrency probe.
#[derive(Debug)]
pub struct MockAdapter {
    pub spec: SyntheticSpec,
    mapping: StatsMapping,
    pub delay: Duration,
    pub fail_run: HashSet<u64>,
    pub fail_build: HashSet<u64>,
    active: AtomicUsize,
    peak: Arc<AtomicUsize>,
}

impl MockAdapter {
    pub fn new(spec: SyntheticSpec) -> Self {
        let mapping = StatsMapping::gem5_default(&spec.topology);
        Self {
            spec,
            mapping,
            delay: Duration::ZERO,
            fail_run: HashSet::new(),
            fail_build: HashSet::new(),
            active: AtomicUsize::new(0),
            peak: Arc::new(AtomicUsize::new(0)),
        }
    }

    /// Highest number of simultaneous `execute` calls seen so far.
    pub fn peak_concurrency(&self) -> usize {
        self.peak.load(Ordering::SeqCst)
    }

    pub fn reset_peak(&self) {
        self.peak.store(0, Ordering::SeqCst);
    }
}

impl SimulatorAdapter for MockAdapter {
    fn execute(&self, job: &TuningJob) -> Execution {
        let now = self.active.fetch_add(1, Ordering::SeqCst) + 1;
        self.peak.fetch_max(now, Ordering::SeqCst);
        std::thread::sleep(self.delay);
        let out = if self.fail_build.contains(&job.job_id) {
            Execution::Failed {
                status: JobStatus::BuildFailed,
                diagnostics: "injected build failure".into(),
            }
        } else if self.fail_run.contains(&job.job_id) {
            Execution::Failed {
                status: JobStatus::RunFailed,
                diagnostics: "simulator exited with status 1".into(),
            }
        } else {
            match mock_simulate(job, &self.spec).and_then(|text| {
                fs::create_dir_all(&job.workdir)?;
                fs::write(job.stats_path(), &text)?;
                Ok(text)
            }) {
                Ok(text) => Execution::Stats(text),
                Err(e) => Execution::Failed {
                    status: JobStatus::RunFailed,
                    diagnostics: e.to_string(),
                },
            }
        };
        self.active.fetch_sub(1, Ordering::SeqCst);
        out
    }

    fn mapping(&self) -> &StatsMapping {
        &self.mapping
    }
}

fn parse_job(text: &str, adapter: &dyn SimulatorAdapter, schema: &FeatureSchema) -> Result<StatVector> {
    let parsed = parse_stats_text(text)?;
    let (stats, _) = extract_stat_vector(parsed.last(), adapter.mapping(), &schema.topology)?;
    Ok(stats)
}

/// Execute `jobs` with at most `n_parallel` in flight, then update `window`
/// once with every parsed job and score them. Results are in job order.
pub fn run_batch(
    jobs: &[TuningJob],
    adapter: &dyn SimulatorAdapter,
    predictor: &PredictorModel,
    window: &mut WindowState,
    schema: &FeatureSchema,
    n_parallel: usize,
) -> Result<Vec<JobResult>> {
    if n_parallel == 0 {
        return Err(Error::invalid("n_parallel must be at least 1"));
    }
    let mut ids = HashSet::new();
    if let Some(dup) = jobs.iter().find(|j| !ids.insert(j.job_id)) {
        return Err(Error::invalid(format!("duplicate job id {}", dup.job_id)));
    }
    let mut workdirs = HashSet::new();
    if let Some(dup) = jobs.iter().find(|j| !workdirs.insert(&j.workdir)) {
        return Err(Error::invalid(format!(
            "job {} shares workdir {}",
            dup.job_id,
            dup.workdir.display()
        )));
    }

    let slots: Mutex<Vec<Option<Execution>>> = Mutex::new(vec![None; jobs.len()]);
    let next = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..n_parallel.min(jobs.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= jobs.len() {
                    break;
                }
                let out = adapter.execute(&jobs[i]);
                slots.lock().expect("result slots")[i] = Some(out);
            });
        }
    });
    let executions = slots.into_inner().expect("result slots");

    let mut results = Vec::with_capacity(jobs.len());
    let mut parsed: Vec<Option<StatVector>> = Vec::with_capacity(jobs.len());
    for (job, exec) in jobs.iter().zip(executions) {
        match exec.expect("every job executed") {
            Execution::Stats(text) => match parse_job(&text, adapter, schema) {
                Ok(stats) => {
                    parsed.push(Some(stats));
                    results.push(JobResult::failed(job.job_id, JobStatus::Ok, String::new()));
                }
                Err(e) => {
                    parsed.push(None);
                    results.push(JobResult::failed(job.job_id, JobStatus::ParseFailed, e.to_string()));
                }
            },
            Execution::Failed { status, diagnostics } => {
                parsed.push(None);
                results.push(JobResult::failed(job.job_id, status, diagnostics));
            }
        }
    }

    let batch: Vec<WindowSample> = parsed
        .iter()
        .flatten()
        .map(|s| WindowSample::from_stats(s, &schema.topology))
        .collect();
    if !batch.is_empty() && !matches!(window, WindowState::Exact(_)) {
        window.update(&batch)?;
    }

    let mut rows = Vec::new();
    let mut scored = Vec::new();
    for (i, stats) in parsed.iter().enumerate() {
        let Some(stats) = stats else { continue };
        match assemble_feature_vector(stats, &*window, schema) {
            Ok(fv) => {
                rows.push(fv);
                scored.push(i);
            }
            Err(e) => {
                results[i].status = JobStatus::ParseFailed;
                results[i].diagnostics = e.to_string();
            }
        }
    }
    if !rows.is_empty() {
        let scores = predictor.predict(&FeatureMatrix::from_vectors(schema, &rows)?)?;
        for (&i, score) in scored.iter().zip(scores) {
            results[i].stats = parsed[i].clone();
            results[i].score = Some(score);
        }
    }
    Ok(results)
}

/// Proposes candidate parameters, possibly conditioned on earlier results.
/// An empty batch means the generator is exhausted.
pub trait CandidateGenerator {
    fn next_batch(&mut self, archive: &[ArchiveEntry], size: usize) -> Vec<serde_json::Value>;
}

/// Uniform sampling of the schedule space without repeats.
#[derive(Clone, Debug)]
pub struct RandomGenerator {
    space: ScheduleSpace,
    rng: ChaCha8Rng,
    seen: HashSet<u64>,
}

impl RandomGenerator {
    pub fn new(space: ScheduleSpace, seed: u64) -> Self {
        Self {
            space,
            rng: ChaCha8Rng::seed_from_u64(seed),
            seen: HashSet::new(),
        }
    }

    fn draw(&mut self, size: usize) -> Vec<serde_json::Value> {
        let mut out = Vec::new();
        let total = self.space.len() as u64;
        while out.len() < size && (self.seen.len() as u64) < total {
            let id = self.rng.random_range(0..total);
            if self.seen.insert(id) {
                out.push(serde_json::to_value(self.space.get(id).expect("id in range")).expect("plain struct"));
            }
        }
        out
    }
}

impl CandidateGenerator for RandomGenerator {
    fn next_batch(&mut self, _archive: &[ArchiveEntry], size: usize) -> Vec<serde_json::Value> {
        self.draw(size)
    }
}

/// Mutates the best-scoring candidate so far along one schedule dimension
/// at a time; the first batch is random.
#[derive(Clone, Debug)]
pub struct GreedyGenerator {
    inner: RandomGenerator,
}

impl GreedyGenerator {
    pub fn new(space: ScheduleSpace, seed: u64) -> Self {
        Self {
            inner: RandomGenerator::new(space, seed),
        }
    }

    fn neighbour(&mut self, p: &ImplParams) -> ImplParams {
        let s = &self.inner.space;
        let rng = &mut self.inner.rng;
        let mut q = *p;
        let pick = |rng: &mut ChaCha8Rng, values: &[u32]| values[rng.random_range(0..values.len())];
        match rng.random_range(0..5) {
            0 => q.tile_co = pick(rng, &s.tile_co),
            1 => q.tile_w = pick(rng, &s.tile_w),
            2 => q.vec = pick(rng, &s.vec),
            3 => q.unroll = pick(rng, &s.unroll),
            _ => q.order = rng.random_range(0..s.orders),
        }
        q
    }
}

impl CandidateGenerator for GreedyGenerator {
    fn next_batch(&mut self, archive: &[ArchiveEntry], size: usize) -> Vec<serde_json::Value> {
        let best = archive
            .iter()
            .filter(|e| e.score.is_finite())
            .min_by(|a, b| a.score.total_cmp(&b.score))
            .and_then(|e| serde_json::from_value::<ImplParams>(e.params.clone()).ok());
        let Some(best) = best else {
            return self.inner.draw(size);
        };
        let mut out = Vec::new();
        let total = self.inner.space.len();
        let mut attempts = 0;
        while out.len() < size && self.inner.seen.len() < total && attempts < 64 * size {
            attempts += 1;
            let q = self.neighbour(&best);
            let Some(id) = self.inner.space.id_of(&q) else { continue };
            if self.inner.seen.insert(id) {
                out.push(serde_json::to_value(q).expect("plain struct"));
            }
        }
        if out.len() < size {
            out.extend(self.inner.draw(size - out.len()));
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchiveEntry {
    pub round: usize,
    pub job_id: u64,
    pub params: serde_json::Value,
    pub status: JobStatus,
    /// `+inf` for failed jobs.
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TuningArchive {
    pub entries: Vec<ArchiveEntry>,
    /// Rounds actually run; fewer than requested if the generator ran dry.
    pub rounds_completed: usize,
    pub exhausted: bool,
}

impl TuningArchive {
    /// Entries ordered by score, failures last.
    pub fn ranked(&self) -> Vec<&ArchiveEntry> {
        let mut v: Vec<&ArchiveEntry> = self.entries.iter().collect();
        v.sort_by(|a, b| a.score.total_cmp(&b.score).then(a.job_id.cmp(&b.job_id)));
        v
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        for e in &self.entries {
            // serde_json has no infinity literal
            let mut v = serde_json::to_value(e)?;
            if !e.score.is_finite() {
                v["score"] = serde_json::Value::String("inf".into());
            }
            serde_json::to_writer(&mut out, &v)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct LoopConfig {
    pub group: GroupKey,
    pub rounds: usize,
    pub batch_size: usize,
    pub n_parallel: usize,
    /// Each job runs in `<root>/job-<id>`.
    pub root: PathBuf,
}

pub fn tuning_loop(
    generator: &mut dyn CandidateGenerator,
    adapter: &dyn SimulatorAdapter,
    predictor: &PredictorModel,
    window: &mut WindowState,
    schema: &FeatureSchema,
    config: &LoopConfig,
) -> Result<TuningArchive> {
    if config.rounds == 0 || config.batch_size == 0 {
        return Err(Error::invalid("rounds and batch size must be at least 1"));
    }
    let mut archive = TuningArchive {
        entries: Vec::new(),
        rounds_completed: 0,
        exhausted: false,
    };
    let mut next_id = 0u64;
    for round in 0..config.rounds {
        let candidates = generator.next_batch(&archive.entries, config.batch_size);
        if candidates.is_empty() {
            info!("generator exhausted after {round} rounds");
            archive.exhausted = true;
            break;
        }
        let jobs: Vec<TuningJob> = candidates
            .into_iter()
            .map(|params| {
                let job_id = next_id;
                next_id += 1;
                TuningJob {
                    job_id,
                    group: config.group.clone(),
                    params,
                    workdir: job_dir(&config.root, job_id),
                }
            })
            .collect();
        let results = run_batch(&jobs, adapter, predictor, window, schema, config.n_parallel)?;
        for (job, r) in jobs.into_iter().zip(results) {
            if r.status != JobStatus::Ok {
                warn!("job {}: {:?} {}", r.job_id, r.status, r.diagnostics);
            }
            archive.entries.push(ArchiveEntry {
                round,
                job_id: r.job_id,
                params: job.params,
                status: r.status,
                score: r.score.unwrap_or(f64::INFINITY),
            });
        }
        archive.rounds_completed = round + 1;
    }
    Ok(archive)
}

pub fn job_dir(root: &Path, job_id: u64) -> PathBuf {
    root.join(format!("job-{job_id:06}"))
}

/// Noise-free runtime of an archived candidate under the synthetic model.
pub fn synthetic_runtime(spec: &SyntheticSpec, group: &GroupKey, params: &serde_json::Value) -> Result<f64> {
    let g = spec
        .groups
        .iter()
        .find(|g| &g.key() == group)
        .ok_or_else(|| Error::UnknownGroup(group.to_string()))?;
    let p: ImplParams = serde_json::from_value(params.clone())?;
    Ok(true_runtime(spec, &stat_vector(spec, g, &p)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluation::dataset_features;
    use crate::evaluation::synthesize_dataset;
    use crate::model::{feature_schema, CacheTopology};
    use crate::predictors::{GbtConfig, PredictorConfig};

    fn setup() -> (SyntheticSpec, PredictorModel, FeatureSchema) {
        let spec = SyntheticSpec {
            implementations_per_group: 80,
            ..SyntheticSpec::new(3, CacheTopology::riscv())
        };
        let ds = synthesize_dataset(&spec).unwrap();
        let (x, y) = dataset_features(&ds).unwrap();
        let model = PredictorModel::fit(
            &PredictorConfig::Gbt(GbtConfig {
                n_trees: 60,
                ..Default::default()
            }),
            &x,
            &y,
            0,
        )
        .unwrap();
        (spec.clone(), model, feature_schema(&spec.topology))
    }

    fn jobs(spec: &SyntheticSpec, root: &Path, n: u64) -> Vec<TuningJob> {
        (0..n)
            .map(|i| TuningJob {
                job_id: i,
                group: spec.groups[1].key(),
                params: serde_json::to_value(spec.space.get(i * 37).unwrap()).unwrap(),
                workdir: job_dir(root, i),
            })
            .collect()
    }

    #[test]
    fn mock_output_round_trips() {
        let (spec, _, _) = setup();
        let dir = tempfile::tempdir().unwrap();
        let job = &jobs(&spec, dir.path(), 1)[0];
        let a = mock_simulate(job, &spec).unwrap();
        assert_eq!(a, mock_simulate(job, &spec).unwrap());
        let parsed = parse_stats_text(&a).unwrap();
        let (stats, w) = extract_stat_vector(
            parsed.last(),
            &StatsMapping::gem5_default(&spec.topology),
            &spec.topology,
        )
        .unwrap();
        assert!(w.unmatched_roles.is_empty());
        let p: ImplParams = serde_json::from_value(job.params.clone()).unwrap();
        assert_eq!(stats, stat_vector(&spec, &spec.groups[1], &p).unwrap());
        let empty = SyntheticSpec {
            instruction_scale: 0.0,
            ..spec.clone()
        };
        let text = mock_simulate(job, &empty).unwrap();
        let parsed = parse_stats_text(&text).unwrap();
        assert!(matches!(
            extract_stat_vector(
                parsed.last(),
                &StatsMapping::gem5_default(&spec.topology),
                &spec.topology
            ),
            Err(Error::EmptyExecution)
        ));
    }

    #[test]
    fn batch_scores_match_direct_featurization() {
        let (spec, model, schema) = setup();
        let dir = tempfile::tempdir().unwrap();
        let js = jobs(&spec, dir.path(), 5);
        let adapter = MockAdapter::new(spec.clone());
        let mut window = WindowState::new_dynamic(&spec.topology);
        let results = run_batch(&js, &adapter, &model, &mut window, &schema, 2).unwrap();
        assert!(adapter.peak_concurrency() <= 2);
        let mut oracle_window = WindowState::new_dynamic(&spec.topology);
        let stats: Vec<StatVector> = js
            .iter()
            .map(|j| {
                stat_vector(
                    &spec,
                    &spec.groups[1],
                    &serde_json::from_value(j.params.clone()).unwrap(),
                )
                .unwrap()
            })
            .collect();
        oracle_window
            .update(
                &stats
                    .iter()
                    .map(|s| WindowSample::from_stats(s, &spec.topology))
                    .collect::<Vec<_>>(),
            )
            .unwrap();
        for (r, s) in results.iter().zip(&stats) {
            assert_eq!(r.status, JobStatus::Ok);
            let fv = assemble_feature_vector(s, &oracle_window, &schema).unwrap();
            let direct = model
                .predict(&FeatureMatrix::from_vectors(&schema, &[fv]).unwrap())
                .unwrap()[0];
            assert_eq!(r.score, Some(direct));
            assert!(js[r.job_id as usize].stats_path().exists());
        }
    }

    #[test]
    fn failures_are_isolated() {
        let (spec, model, schema) = setup();
        let dir = tempfile::tempdir().unwrap();
        let js = jobs(&spec, dir.path(), 5);
        let mut adapter = MockAdapter::new(spec.clone());
        adapter.fail_run.insert(2);
        let mut window = WindowState::new_dynamic(&spec.topology);
        let results = run_batch(&js, &adapter, &model, &mut window, &schema, 3).unwrap();
        assert_eq!(results[2].status, JobStatus::RunFailed);
        assert!(results[2].stats.is_none() && results[2].score.is_none());
        assert_eq!(
            results
                .iter()
                .filter(|r| r.status == JobStatus::Ok && r.score.is_some())
                .count(),
            4
        );
        assert_eq!(window.observed(), 4);
    }

    #[test]
    fn rejects_bad_batches() {
        let (spec, model, schema) = setup();
        let dir = tempfile::tempdir().unwrap();
        let mut js = jobs(&spec, dir.path(), 2);
        let adapter = MockAdapter::new(spec.clone());
        let mut window = WindowState::new_dynamic(&spec.topology);
        assert!(run_batch(&js, &adapter, &model, &mut window, &schema, 0).is_err());
        js[1].job_id = 0;
        assert!(run_batch(&js, &adapter, &model, &mut window, &schema, 1).is_err());
        js[1].job_id = 1;
        js[1].workdir = js[0].workdir.clone();
        assert!(run_batch(&js, &adapter, &model, &mut window, &schema, 1).is_err());
    }

    #[test]
    fn command_templates() {
        let mapping = StatsMapping::gem5_default(&CacheTopology::riscv());
        let cfg = |build: &str, run: &str| CommandAdapterConfig {
            build: build.into(),
            run: run.into(),
            mapping: mapping.clone(),
            timeout_secs: 5,
        };
        assert!(matches!(
            CommandAdapter::new(&cfg("cc -o out", "sim {exe} {stats_out}")),
            Err(Error::MissingPlaceholder("{exe}"))
        ));
        assert!(matches!(
            CommandAdapter::new(&cfg("cc -o {exe}", "sim {exe}")),
            Err(Error::MissingPlaceholder("{stats_out}"))
        ));
        let a = CommandAdapter::new(&cfg("cc -o {exe}", "sim --out={stats_out} {exe} {args}")).unwrap();
        let job = TuningJob {
            job_id: 0,
            group: GroupKey::new("k", 0),
            params: serde_json::json!({"tile": 4, "name": "x"}),
            workdir: PathBuf::from("/w"),
        };
        assert_eq!(
            a.expand(&a.run, &job),
            vec!["sim", "--out=/w/stats.txt", "/w/candidate", "name=x", "tile=4"]
        );
    }

    #[cfg(unix)]
    #[test]
    fn command_adapter_statuses() {
        let (spec, _, _) = setup();
        let dir = tempfile::tempdir().unwrap();
        let text = mock_simulate(&jobs(&spec, dir.path(), 1)[0], &spec).unwrap();
        let src = dir.path().join("fixture.txt");
        fs::write(&src, text).unwrap();
        let mapping = StatsMapping::gem5_default(&spec.topology);
        let adapter = |build: &str, run: String, timeout_secs| {
            CommandAdapter::new(&CommandAdapterConfig {
                build: build.into(),
                run,
                mapping: mapping.clone(),
                timeout_secs,
            })
            .unwrap()
        };
        let job = |id: u64| TuningJob {
            job_id: id,
            group: spec.groups[1].key(),
            params: serde_json::Value::Null,
            workdir: job_dir(dir.path(), id),
        };
        let ok = adapter(
            "touch {exe}",
            format!("sh -c \"cp {} {{stats_out}}\" {{exe}}", src.display()),
            5,
        );
        assert!(matches!(ok.execute(&job(1)), Execution::Stats(_)));
        let bad_build = adapter("false {exe}", "true {exe} {stats_out}".into(), 5);
        assert!(matches!(
            bad_build.execute(&job(2)),
            Execution::Failed {
                status: JobStatus::BuildFailed,
                ..
            }
        ));
        let bad_run = adapter("true {exe}", "false {exe} {stats_out}".into(), 5);
        assert!(matches!(
            bad_run.execute(&job(3)),
            Execution::Failed {
                status: JobStatus::RunFailed,
                ..
            }
        ));
        let slow = adapter("true {exe}", "sh -c \"sleep 3\" {exe} {stats_out}".into(), 1);
        assert!(matches!(
            slow.execute(&job(4)),
            Execution::Failed {
                status: JobStatus::Timeout,
                ..
            }
        ));
    }

    #[test]
    fn loop_bookkeeping_and_determinism() {
        let (spec, model, schema) = setup();
        let adapter = MockAdapter::new(spec.clone());
        let run = |seed| {
            let dir = tempfile::tempdir().unwrap();
            let mut generator = RandomGenerator::new(spec.space.clone(), seed);
            let mut window = WindowState::new_dynamic(&spec.topology);
            let cfg = LoopConfig {
                group: spec.groups[0].key(),
                rounds: 1,
                batch_size: 3,
                n_parallel: 2,
                root: dir.path().to_path_buf(),
            };
            tuning_loop(&mut generator, &adapter, &model, &mut window, &schema, &cfg).unwrap()
        };
        let a = run(9);
        assert_eq!(a.entries.len(), 3);
        assert_eq!(a, run(9));
        let mut out = Vec::new();
        a.write_jsonl(&mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap().lines().count(), 3);
    }

    #[test]
    fn exhausted_generator_stops_early() {
        let (spec, model, schema) = setup();
        let tiny = ScheduleSpace {
            tile_co: vec![8],
            tile_w: vec![2],
            vec: vec![4],
            unroll: vec![1, 2],
            orders: 1,
        };
        let adapter = MockAdapter::new(spec.clone());
        let dir = tempfile::tempdir().unwrap();
        let mut generator = RandomGenerator::new(tiny, 0);
        let mut window = WindowState::new_dynamic(&spec.topology);
        let cfg = LoopConfig {
            group: spec.groups[0].key(),
            rounds: 5,
            batch_size: 1,
            n_parallel: 1,
            root: dir.path().to_path_buf(),
        };
        let a = tuning_loop(&mut generator, &adapter, &model, &mut window, &schema, &cfg).unwrap();
        assert_eq!((a.entries.len(), a.rounds_completed, a.exhausted), (2, 2, true));
    }

    #[test]
    fn failed_jobs_rank_last() {
        let (spec, model, schema) = setup();
        let mut adapter = MockAdapter::new(spec.clone());
        adapter.fail_build.insert(0);
        let dir = tempfile::tempdir().unwrap();
        let mut generator = RandomGenerator::new(spec.space.clone(), 1);
        let mut window = WindowState::new_dynamic(&spec.topology);
        let cfg = LoopConfig {
            group: spec.groups[0].key(),
            rounds: 1,
            batch_size: 4,
            n_parallel: 4,
            root: dir.path().to_path_buf(),
        };
        let a = tuning_loop(&mut generator, &adapter, &model, &mut window, &schema, &cfg).unwrap();
        assert_eq!(a.entries[0].status, JobStatus::BuildFailed);
        assert_eq!(a.entries[0].score, f64::INFINITY);
        assert_eq!(a.ranked().last().unwrap().job_id, 0);
        let mut out = Vec::new();
        a.write_jsonl(&mut out).unwrap();
        assert!(String::from_utf8(out)
            .unwrap()
            .lines()
            .next()
            .unwrap()
            .contains("\"score\":\"inf\""));
    }
}
