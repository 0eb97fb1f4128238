use std::fs::{self, File};
use std::io::{self, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};
use serde::de::DeserializeOwned;

use simscore_core::evaluation::{
    dataset_features, leave_one_group_out, run_experiment, synthesize_dataset, tune_gbt_on, tune_gp_on, write_gnuplot,
    ExperimentPlan, Prepared, SyntheticSpec,
};
use simscore_core::hyperopt::{write_grid_csv, write_trace_csv, BoConfig, SearchSpace};
use simscore_core::metrics::{render_reports_table, write_reports_csv};
use simscore_core::orchestrator::{
    tuning_loop, CandidateGenerator, CommandAdapter, CommandAdapterConfig, GreedyGenerator, LoopConfig, MockAdapter,
    RandomGenerator, SimulatorAdapter,
};
use simscore_core::util::atomic_write;
use simscore_core::{
    assemble_feature_vector, extract_stat_vector, feature_schema, parallel_break_even, parse_stats_text, CacheTopology,
    Dataset, FeatureMatrix, GroupKey, ImplementationRecord, KernelGroup, LossKind, PredictorConfig, PredictorKind,
    PredictorModel, StatsMapping, WindowMode, WindowSample, WindowState, DATASET_FORMAT_VERSION, MODEL_FORMAT_VERSION,
};

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;

#[derive(Parser, Debug)]
#[command(
    name = "simscore",
    about = "Rank kernel implementations by simulator statistics",
    disable_version_flag = true
)]
struct Cli {
    /// Print program and file format versions.
    #[arg(long)]
    version: bool,

    /// Seed for every random choice.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    /// Emit CSV instead of a text table where applicable.
    #[arg(long, global = true)]
    csv: bool,

    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build a dataset from directories of simulator statistics.
    Ingest(IngestArgs),
    /// Generate a synthetic dataset.
    Synth(SynthArgs),
    /// Fit a predictor on every record of a dataset.
    Train(TrainArgs),
    /// Search predictor hyperparameters (BO for gp, grid for gbt).
    Tune(TuneArgs),
    /// Repeated train/test evaluation with ranking metrics.
    Evaluate(EvaluateArgs),
    /// Order new implementations of one group by predicted score.
    Rank(RankArgs),
    /// Simulator instances needed to match native benchmarking throughput.
    PlanParallelism(PlanArgs),
    /// Generate, simulate and score candidates in batches.
    Run(RunArgs),
}

#[derive(Args, Debug)]
struct TopologyArg {
    /// Preset name (x86, arm, riscv) or a JSON topology file.
    #[arg(long, default_value = "x86")]
    topology: String,
}

impl TopologyArg {
    fn load(&self) -> Result<CacheTopology> {
        if let Some(t) = CacheTopology::preset(&self.topology) {
            return Ok(t);
        }
        let t: CacheTopology = read_json(Path::new(&self.topology))?;
        t.validate()?;
        Ok(t)
    }
}

#[derive(Args, Debug)]
struct IngestArgs {
    /// Root laid out as <kernel_type>/<group_id>/<impl_id>/{stats.txt,runtimes.txt}.
    #[arg(required = true)]
    roots: Vec<PathBuf>,
    #[command(flatten)]
    topology: TopologyArg,
    /// JSON role-to-stat-name mapping; defaults to gem5 names.
    #[arg(long)]
    mapping: Option<PathBuf>,
    /// JSON list of kernel groups with their parameters.
    #[arg(long)]
    groups: Option<PathBuf>,
    /// Statistics dump to use when a file has several; defaults to the last.
    #[arg(long)]
    snapshot: Option<usize>,
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[command(flatten)]
    topology: TopologyArg,
    /// JSON generator spec; overrides --topology.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    implementations: Option<usize>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PredictorArgs {
    #[arg(long, value_parser = parse_kind)]
    kind: Option<PredictorKind>,
    /// JSON predictor configuration (as written by `tune`).
    #[arg(long)]
    config: Option<PathBuf>,
}

impl PredictorArgs {
    fn load(&self) -> Result<PredictorConfig> {
        match (&self.config, self.kind) {
            (Some(path), _) => read_json(path),
            (None, Some(kind)) => Ok(PredictorConfig::default_for(kind)),
            (None, None) => bail!("either --kind or --config is required"),
        }
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[command(flatten)]
    predictor: PredictorArgs,
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum LossArg {
    Mse,
    Mae,
    Rss,
}

impl From<LossArg> for LossKind {
    fn from(l: LossArg) -> Self {
        match l {
            LossArg::Mse => LossKind::Mse,
            LossArg::Mae => LossKind::Mae,
            LossArg::Rss => LossKind::Rss,
        }
    }
}

#[derive(Args, Debug)]
struct TuneArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, value_parser = parse_kind)]
    kind: PredictorKind,
    #[arg(long, value_enum, default_value = "mse")]
    loss: LossArg,
    /// BO evaluations (gp only).
    #[arg(long, default_value_t = 30)]
    budget: usize,
    #[arg(long, default_value_t = 100)]
    test_count: usize,
    /// Tuned predictor configuration.
    #[arg(long, short)]
    out: PathBuf,
    /// Every evaluated point with its objective.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// Predictor kinds to evaluate with default configurations.
    #[arg(long = "kind", value_parser = parse_kind)]
    kinds: Vec<PredictorKind>,
    /// Predictor configuration files.
    #[arg(long = "config")]
    configs: Vec<PathBuf>,
    /// Add the ideal ordering as a reference row.
    #[arg(long)]
    perfect: bool,
    #[arg(long, default_value_t = 10)]
    repetitions: usize,
    /// Implementations drawn per group; defaults to the smallest group.
    #[arg(long)]
    implementations: Option<usize>,
    #[arg(long, default_value_t = 100)]
    test_count: usize,
    /// exact, dynamic, or static:<size>.
    #[arg(long, default_value = "exact", value_parser = parse_window)]
    window: WindowMode,
    /// Train without this group (kernel_type#id) and report it against the
    /// all-groups model.
    #[arg(long, value_parser = parse_group)]
    hold_out: Option<GroupKey>,
    /// Directory for sorted runtime curves, one file per group and predictor.
    #[arg(long)]
    gnuplot: Option<PathBuf>,
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct RankArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    topology: TopologyArg,
    #[arg(long)]
    mapping: Option<PathBuf>,
    /// dynamic or static:<size>; all files are one batch.
    #[arg(long, default_value = "dynamic", value_parser = parse_window)]
    window: WindowMode,
    #[arg(required = true)]
    stats: Vec<PathBuf>,
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PlanArgs {
    #[arg(long, allow_negative_numbers = true)]
    t_sim: f64,
    #[arg(long, allow_negative_numbers = true)]
    cooldown: f64,
    #[arg(long, allow_negative_numbers = true)]
    t_ref: f64,
    #[arg(long, allow_negative_numbers = true)]
    n_exe: u32,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum GeneratorArg {
    Random,
    Greedy,
}

#[derive(Args, Debug)]
struct RunArgs {
    /// JSON command adapter configuration; without it the built-in
    /// synthetic simulator is used.
    #[arg(long)]
    adapter: Option<PathBuf>,
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    topology: TopologyArg,
    #[arg(long, value_parser = parse_group)]
    group: GroupKey,
    #[arg(long, value_enum, default_value = "greedy")]
    generator: GeneratorArg,
    #[arg(long, default_value_t = 4)]
    rounds: usize,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    #[arg(long, default_value_t = 1)]
    n_parallel: usize,
    /// dynamic or static:<size>.
    #[arg(long, default_value = "dynamic", value_parser = parse_window)]
    window: WindowMode,
    /// Job working directories are created below this.
    #[arg(long)]
    workdir: PathBuf,
    /// Archive of every job as JSON lines.
    #[arg(long, short)]
    out: Option<PathBuf>,
}

fn parse_kind(s: &str) -> std::result::Result<PredictorKind, String> {
    s.parse().map_err(|e: simscore_core::Error| e.to_string())
}

fn parse_window(s: &str) -> std::result::Result<WindowMode, String> {
    match s {
        "exact" => Ok(WindowMode::Exact),
        "dynamic" => Ok(WindowMode::Dynamic),
        _ => match s.strip_prefix("static:").map(str::parse::<usize>) {
            Some(Ok(size)) if size > 0 => Ok(WindowMode::Static { size }),
            _ => Err(format!("expected exact, dynamic or static:<size>, got {s:?}")),
        },
    }
}

fn parse_group(s: &str) -> std::result::Result<GroupKey, String> {
    let (kt, id) = s
        .rsplit_once('#')
        .ok_or_else(|| format!("expected kernel_type#id, got {s:?}"))?;
    let id = id.parse().map_err(|_| format!("bad group id in {s:?}"))?;
    Ok(GroupKey::new(kt, id))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    serde_json::from_reader(BufReader::new(f)).with_context(|| format!("reading {}", path.display()))
}

fn read_dataset(path: &Path) -> Result<Dataset> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Dataset::read_jsonl(BufReader::new(f)).with_context(|| format!("reading {}", path.display()))
}

/// Write to `path` atomically, or to stdout.
fn emit(path: Option<&Path>, fill: impl FnOnce(&mut dyn Write) -> simscore_core::Result<()>) -> Result<()> {
    match path {
        Some(p) => atomic_write(p, fill).with_context(|| format!("writing {}", p.display())),
        None => {
            let stdout = io::stdout();
            let mut lock = stdout.lock();
            fill(&mut lock)?;
            lock.flush()?;
            Ok(())
        }
    }
}

fn load_mapping(path: Option<&PathBuf>, topology: &CacheTopology) -> Result<StatsMapping> {
    let mapping = match path {
        Some(p) => read_json(p)?,
        None => StatsMapping::gem5_default(topology),
    };
    mapping.check_covers(topology)?;
    Ok(mapping)
}

fn sorted_subdirs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let entry = entry?;
        if entry.file_type()?.is_dir() {
            out.push(entry.path());
        }
    }
    out.sort();
    Ok(out)
}

fn file_name(p: &Path) -> String {
    p.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn read_runtimes(path: &Path) -> Result<Vec<f64>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.split_whitespace()
        .map(|t| {
            t.parse::<f64>()
                .with_context(|| format!("{}: bad runtime {t:?}", path.display()))
        })
        .collect()
}

fn ingest(args: &IngestArgs) -> Result<()> {
    let topology = args.topology.load()?;
    let mapping = load_mapping(args.mapping.as_ref(), &topology)?;
    let mut groups: Vec<KernelGroup> = match &args.groups {
        Some(p) => read_json(p)?,
        None => Vec::new(),
    };
    let mut records = Vec::new();
    for root in &args.roots {
        for kt_dir in sorted_subdirs(root)? {
            let kernel_type = file_name(&kt_dir);
            for g_dir in sorted_subdirs(&kt_dir)? {
                let group_id: u32 = file_name(&g_dir)
                    .parse()
                    .with_context(|| format!("{}: group directory must be numeric", g_dir.display()))?;
                let key = GroupKey::new(&kernel_type, group_id);
                if !groups.iter().any(|g| g.key() == key) {
                    groups.push(KernelGroup {
                        kernel_type: kernel_type.clone(),
                        group_id,
                        params: Default::default(),
                    });
                }
                for (i, impl_dir) in sorted_subdirs(&g_dir)?.into_iter().enumerate() {
                    let impl_id = file_name(&impl_dir).parse().unwrap_or(i as u64);
                    let stats_path = impl_dir.join("stats.txt");
                    let text =
                        fs::read_to_string(&stats_path).with_context(|| format!("reading {}", stats_path.display()))?;
                    let parsed = parse_stats_text(&text).with_context(|| stats_path.display().to_string())?;
                    let dump = match args.snapshot {
                        Some(k) => parsed.snapshot(Some(k))?,
                        None => parsed.last(),
                    };
                    let (stats, w) = extract_stat_vector(dump, &mapping, &topology)
                        .with_context(|| stats_path.display().to_string())?;
                    for role in &w.unmatched_roles {
                        warn!("{}: no statistic for {role}", stats_path.display());
                    }
                    let runtimes = read_runtimes(&impl_dir.join("runtimes.txt"))?;
                    records.push(
                        ImplementationRecord::new(key.clone(), impl_id, stats, runtimes)
                            .with_context(|| impl_dir.display().to_string())?,
                    );
                }
            }
        }
    }
    if records.is_empty() {
        bail!("no implementations found");
    }
    let ds = Dataset::new(topology, groups, records)?;
    info!(
        "ingested {} records in {} groups",
        ds.records.len(),
        ds.header.groups.len()
    );
    emit(args.out.as_deref(), |w| ds.write_jsonl(w))
}

fn synth(args: &SynthArgs, seed: u64) -> Result<()> {
    let mut spec = match &args.config {
        Some(p) => read_json::<SyntheticSpec>(p)?,
        None => SyntheticSpec::new(seed, args.topology.load()?),
    };
    spec.seed = seed;
    if let Some(n) = args.implementations {
        spec.implementations_per_group = n;
    }
    if let Some(s) = args.sigma {
        spec.sigma = s;
    }
    let ds = synthesize_dataset(&spec)?;
    emit(args.out.as_deref(), |w| ds.write_jsonl(w))
}

fn train(args: &TrainArgs, seed: u64) -> Result<()> {
    let ds = read_dataset(&args.dataset)?;
    let config = args.predictor.load()?;
    let (x, y) = dataset_features(&ds)?;
    info!("fitting {} on {} rows", config.kind().label(), x.nrows());
    let model = PredictorModel::fit(&config, &x, &y, seed)?;
    emit(Some(&args.out), |w| model.save(w))
}

fn smallest_group(ds: &Dataset) -> usize {
    ds.group_keys()
        .iter()
        .map(|k| ds.records_of(k).count())
        .min()
        .unwrap_or(0)
}

fn tune(args: &TuneArgs, seed: u64) -> Result<()> {
    let ds = read_dataset(&args.dataset)?;
    let plan = ExperimentPlan {
        implementations: smallest_group(&ds),
        test_count: args.test_count,
        seed,
        ..Default::default()
    };
    let prep = Prepared::new(&ds, &plan)?;
    match args.kind {
        PredictorKind::Gp => {
            let bo = BoConfig {
                budget: args.budget,
                seed,
                ..Default::default()
            };
            let (cfg, res) = tune_gp_on(&prep, args.loss.into(), &bo)?;
            eprintln!("best objective {:.6e} at {:?}", res.best_objective, res.best_point);
            if let Some(p) = &args.trace {
                let names: Vec<String> = SearchSpace::gp_default()
                    .params
                    .iter()
                    .map(|b| b.name.clone())
                    .collect();
                atomic_write(p, |w| write_trace_csv(&res.trace, &names, w))?;
            }
            emit(Some(&args.out), |w| {
                Ok(serde_json::to_writer_pretty(w, &PredictorConfig::Gp(cfg))?)
            })
        }
        PredictorKind::Gbt => {
            let grid = vec![vec![100.0, 300.0, 500.0], vec![2.0, 3.0, 4.0], vec![0.05, 0.1, 0.2]];
            let (cfg, res) = tune_gbt_on(&prep, args.loss.into(), &grid, seed)?;
            eprintln!("best loss {:.6e} at {:?}", res.best_objective, res.best_point);
            if let Some(p) = &args.trace {
                let names = ["n_trees", "max_depth", "learning_rate"].map(String::from);
                atomic_write(p, |w| write_grid_csv(&res.table, &names, w))?;
            }
            emit(Some(&args.out), |w| {
                Ok(serde_json::to_writer_pretty(w, &PredictorConfig::Gbt(cfg))?)
            })
        }
        other => bail!("no tuner for {other}; use gp or gbt"),
    }
}

fn evaluate(args: &EvaluateArgs, seed: u64, csv: bool) -> Result<()> {
    let ds = read_dataset(&args.dataset)?;
    let mut predictors: Vec<PredictorConfig> = args.kinds.iter().map(|&k| PredictorConfig::default_for(k)).collect();
    for p in &args.configs {
        predictors.push(read_json(p)?);
    }
    if predictors.is_empty() && !args.perfect {
        bail!("nothing to evaluate: give --kind, --config or --perfect");
    }
    let plan = ExperimentPlan {
        implementations: args.implementations.unwrap_or_else(|| smallest_group(&ds)),
        test_count: args.test_count,
        repetitions: args.repetitions,
        seed,
        predictors,
        window: args.window,
        include_perfect: args.perfect,
    };
    let reports = if let Some(held) = &args.hold_out {
        if args.perfect {
            bail!("--perfect cannot be combined with --hold-out");
        }
        let out = leave_one_group_out(&ds, &plan, held)?;
        let mut reports = out.included;
        for mut r in out.held_out {
            r.predictor = format!("{} (held out)", r.predictor);
            reports.push(r);
        }
        reports
    } else {
        let outcome = run_experiment(&ds, &plan)?;
        if let Some(dir) = &args.gnuplot {
            fs::create_dir_all(dir)?;
            for p in &outcome.predictions {
                let name = format!("{}_{}_{}.dat", p.group.kernel_type, p.group.group_id, p.predictor);
                atomic_write(&dir.join(name), |w| write_gnuplot(p, w))?;
            }
        }
        outcome.reports
    };
    if csv {
        emit(args.out.as_deref(), |w| write_reports_csv(&reports, w))
    } else {
        let table = render_reports_table(&reports);
        emit(args.out.as_deref(), |w| Ok(w.write_all(table.as_bytes())?))
    }
}

fn rank(args: &RankArgs, csv: bool) -> Result<()> {
    let topology = args.topology.load()?;
    let schema = feature_schema(&topology);
    let mapping = load_mapping(args.mapping.as_ref(), &topology)?;
    let f = File::open(&args.model).with_context(|| format!("opening {}", args.model.display()))?;
    let model = PredictorModel::load(BufReader::new(f), &schema)?;
    let mut stats = Vec::new();
    for path in &args.stats {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let parsed = parse_stats_text(&text).with_context(|| path.display().to_string())?;
        let (s, _) =
            extract_stat_vector(parsed.last(), &mapping, &topology).with_context(|| path.display().to_string())?;
        stats.push(s);
    }
    let mut window = WindowState::from_mode(args.window, &topology)?;
    let batch: Vec<WindowSample> = stats.iter().map(|s| WindowSample::from_stats(s, &topology)).collect();
    window.update(&batch)?;
    let rows = stats
        .iter()
        .map(|s| assemble_feature_vector(s, &window, &schema))
        .collect::<simscore_core::Result<Vec<_>>>()?;
    let scores = model.predict(&FeatureMatrix::from_vectors(&schema, &rows)?)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    emit(args.out.as_deref(), |w| {
        if csv {
            writeln!(w, "rank,score,path")?;
        }
        for (r, &i) in order.iter().enumerate() {
            let path = args.stats[i].display();
            if csv {
                writeln!(w, "{},{:e},{}", r + 1, scores[i], path)?;
            } else {
                writeln!(w, "{:>4}  {:>+12.6}  {}", r + 1, scores[i], path)?;
            }
        }
        Ok(())
    })
}

fn run(args: &RunArgs, seed: u64) -> Result<()> {
    let topology = args.topology.load()?;
    let schema = feature_schema(&topology);
    let f = File::open(&args.model).with_context(|| format!("opening {}", args.model.display()))?;
    let model = PredictorModel::load(BufReader::new(f), &schema)?;
    let spec = SyntheticSpec::new(seed, topology.clone());
    let adapter: Box<dyn SimulatorAdapter> = match &args.adapter {
        Some(p) => Box::new(CommandAdapter::new(&read_json::<CommandAdapterConfig>(p)?)?),
        None => {
            if !spec.groups.iter().any(|g| g.key() == args.group) {
                bail!("synthetic simulator has no group {}", args.group);
            }
            Box::new(MockAdapter::new(spec.clone()))
        }
    };
    let mut generator: Box<dyn CandidateGenerator> = match args.generator {
        GeneratorArg::Random => Box::new(RandomGenerator::new(spec.space.clone(), seed)),
        GeneratorArg::Greedy => Box::new(GreedyGenerator::new(spec.space.clone(), seed)),
    };
    let mut window = WindowState::from_mode(args.window, &topology)?;
    let config = LoopConfig {
        group: args.group.clone(),
        rounds: args.rounds,
        batch_size: args.batch_size,
        n_parallel: args.n_parallel,
        root: args.workdir.clone(),
    };
    fs::create_dir_all(&args.workdir)?;
    let archive = tuning_loop(
        generator.as_mut(),
        adapter.as_ref(),
        &model,
        &mut window,
        &schema,
        &config,
    )?;
    let failed = archive.entries.iter().filter(|e| !e.score.is_finite()).count();
    eprintln!(
        "{} jobs in {} rounds, {failed} failed{}",
        archive.entries.len(),
        archive.rounds_completed,
        if archive.exhausted {
            ", candidates exhausted"
        } else {
            ""
        }
    );
    if let Some(best) = archive.ranked().first() {
        eprintln!(
            "best job {} score {:+.6} params {}",
            best.job_id, best.score, best.params
        );
    }
    emit(args.out.as_deref(), |w| archive.write_jsonl(w))
}

fn plan_parallelism(args: &PlanArgs) -> Result<()> {
    let k = parallel_break_even(args.t_sim, args.cooldown, args.t_ref, args.n_exe)?;
    println!("{k}");
    Ok(())
}

fn dispatch(cli: &Cli, command: &Command) -> Result<()> {
    match command {
        Command::Ingest(a) => ingest(a),
        Command::Synth(a) => synth(a, cli.seed),
        Command::Train(a) => train(a, cli.seed),
        Command::Tune(a) => tune(a, cli.seed),
        Command::Evaluate(a) => evaluate(a, cli.seed, cli.csv),
        Command::Rank(a) => rank(a, cli.csv),
        Command::PlanParallelism(a) => plan_parallelism(a),
        Command::Run(a) => run(a, cli.seed),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    if cli.version {
        println!("simscore {}", env!("CARGO_PKG_VERSION"));
        println!("dataset format {DATASET_FORMAT_VERSION}");
        println!("model format {MODEL_FORMAT_VERSION}");
        return ExitCode::SUCCESS;
    }
    let Some(command) = &cli.command else {
        use clap::CommandFactory;
        let _ = Cli::command().print_help();
        return ExitCode::from(EXIT_USAGE);
    };
    match dispatch(&cli, command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!(
                "error: {}",
                anyhow!(e).chain().map(|c| c.to_string()).collect::<Vec<_>>().join(": ")
            );
            ExitCode::from(EXIT_DATA)
        }
    }
}
