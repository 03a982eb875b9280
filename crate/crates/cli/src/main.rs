use std::fs;
use std::io::{self, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use sgad::attention::{init_params, NetworkParams};
use sgad::bench::{attend_match_slope, bench_scaling, BenchRecord};
use sgad::config::RunConfig;
use sgad::eval::{auc_area_matching, THRESHOLDS};
use sgad::gradcheck::{audit_config, Instance};
use sgad::hcrf::{retained_areas, FilterSide};
use sgad::matcher::{select_matches, MatchSet};
use sgad::model::{predict, ImageInput};
use sgad::supervision::RankLoss;
use sgad::synth::{dataset, list_pairs, SceneConfig, SyntheticPair};
use sgad::tensorio::load_params;
use sgad::trainer::{train, MetricRow};
use sgad::{Error, Result};

#[derive(Parser)]
#[command(name = "sgad", version, about = "Area matching with attention descriptors on synthetic scenes")]
struct Cli {
    /// Seed for scene generation, initialization and training (overrides the config file)
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Flat key = value configuration file
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset of image pairs
    Gen(GenArgs),
    /// Train the descriptor network on streamed synthetic pairs
    Train(TrainArgs),
    /// Match the areas of one pair
    Match(MatchArgs),
    /// Drop redundant nested areas from a match file
    Filter(FilterArgs),
    /// Area-matching AUC over a dataset
    Eval(EvalArgs),
    /// Time the inference stages at several area counts
    Bench(BenchArgs),
    /// Compare analytic and finite-difference parameter gradients
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 10)]
    count: u64,
    /// Index of the first pair
    #[arg(long, default_value_t = 0)]
    start: u64,
    /// Groups of three areas share appearance
    #[arg(long)]
    repetitive: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum RankArg {
    Listmle,
    Triplet,
    None,
}

#[derive(Args)]
struct TrainArgs {
    /// Directory for checkpoints and CSV logs
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    /// Train without the positional embedding
    #[arg(long)]
    no_pe: bool,
    #[arg(long, value_enum)]
    rank: Option<RankArg>,
    #[arg(long)]
    repetitive: bool,
}

#[derive(Args)]
struct MatchArgs {
    /// Pair directory (areas_a.json, feat_a.bin, ...)
    #[arg(long)]
    pair: PathBuf,
    /// Trained parameters; a fresh initialization from the seed otherwise
    #[arg(long)]
    params: Option<PathBuf>,
    /// Output JSON-lines file; stdout otherwise
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SideArg {
    A,
    B,
}

#[derive(Args)]
struct FilterArgs {
    #[arg(long)]
    pair: PathBuf,
    #[arg(long)]
    matches: PathBuf,
    #[arg(long, value_enum, default_value = "a")]
    side: SideArg,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Dataset root holding pair_NNNNNN directories
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    params: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    /// Square sizes m = n, ascending
    #[arg(long, value_delimiter = ',', default_value = "16,32,64,128")]
    sizes: Vec<usize>,
    #[arg(long, default_value_t = 256)]
    dim: usize,
    /// Let the thread pool use every core instead of one
    #[arg(long)]
    parallel: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 20)]
    count: u64,
    #[arg(long, default_value_t = 1e-5)]
    eps: f64,
    /// Largest acceptable relative error
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn emit<T: Serialize>(value: &T, out: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    match out {
        Some(p) => fs::write(p, text)?,
        None => io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn write_matches(set: &MatchSet, summary: Option<serde_json::Value>, out: Option<&Path>) -> Result<()> {
    let mut buf = Vec::new();
    set.write_jsonl(&mut buf)?;
    if let Some(s) = summary {
        serde_json::to_writer(&mut buf, &s)?;
        buf.push(b'\n');
    }
    match out {
        Some(p) => fs::write(p, buf)?,
        None => io::stdout().write_all(&buf)?,
    }
    Ok(())
}

fn load_or_init(path: Option<&Path>, cfg: &RunConfig) -> Result<NetworkParams> {
    match path {
        Some(p) => load_params(p),
        None => init_params(&cfg.net),
    }
}

fn scene_for(cfg: &RunConfig, repetitive: bool) -> SceneConfig {
    let mut scene = cfg.scene.clone();
    if repetitive {
        scene.repetition = SceneConfig::repetitive().repetition;
    }
    scene
}

fn gen(cfg: &RunConfig, a: &GenArgs) -> Result<()> {
    fs::create_dir_all(&a.out)?;
    let scene = scene_for(cfg, a.repetitive);
    let mut written = 0u64;
    for pair in dataset(&scene, a.start, a.count) {
        pair?.save(&a.out)?;
        written += 1;
    }
    eprintln!("wrote {written} pairs to {}", a.out.display());
    emit(&json!({ "out": a.out, "count": written, "start": a.start, "seed": scene.seed }), None)
}

fn run_train(cfg: &RunConfig, a: &TrainArgs) -> Result<()> {
    let mut tc = cfg.train;
    let mut net = cfg.net;
    if let Some(s) = a.steps {
        tc.steps = s;
    }
    if a.no_pe {
        net.use_pe = false;
    }
    match a.rank {
        Some(RankArg::Listmle) => tc.supervision.rank = RankLoss::ListMle,
        Some(RankArg::Triplet) => tc.supervision.rank = RankLoss::Triplet { margin: 0.2 },
        Some(RankArg::None) => tc.supervision.rank = RankLoss::None,
        None => {}
    }
    let scene = scene_for(cfg, a.repetitive);
    let outcome = train(&tc, &scene, &net, a.out.as_deref())?;
    eprintln!("{}", MetricRow::CSV_HEADER);
    for row in &outcome.history {
        eprintln!("{}", row.csv_row());
    }
    let last = outcome.final_auc();
    let finals: Vec<serde_json::Value> = THRESHOLDS
        .iter()
        .map(|&t| json!({ "threshold": t, "auc": last.map(|r| r.auc_at(t)).filter(|v| v.is_finite()) }))
        .collect();
    emit(
        &json!({ "steps": tc.steps, "seed": tc.seed, "final_auc": finals, "history": outcome.history }),
        None,
    )
}

fn run_match(cfg: &RunConfig, a: &MatchArgs) -> Result<()> {
    let pair = SyntheticPair::load(&a.pair)?;
    let params = load_or_init(a.params.as_deref(), cfg)?;
    let p = predict(
        &params,
        ImageInput { areas: &pair.areas_a, features: &pair.features_a },
        ImageInput { areas: &pair.areas_b, features: &pair.features_b },
        &cfg.train.matcher,
    )?;
    let set = select_matches(&p, &cfg.train.matcher);
    eprintln!("{} matches between {} and {} areas", set.len(), pair.areas_a.len(), pair.areas_b.len());
    write_matches(&set, None, a.out.as_deref())
}

fn run_filter(cfg: &RunConfig, a: &FilterArgs) -> Result<()> {
    let pair = SyntheticPair::load(&a.pair)?;
    let matches = MatchSet::read_jsonl(BufReader::new(fs::File::open(&a.matches)?))?;
    let (side, areas, name) = match a.side {
        SideArg::A => (FilterSide::A, &pair.areas_a, "a"),
        SideArg::B => (FilterSide::B, &pair.areas_b, "b"),
    };
    let index = |m: &sgad::matcher::Match| if side == FilterSide::A { m.i } else { m.j };
    if let Some(m) = matches.iter().find(|m| index(m) >= areas.len()) {
        return Err(Error::Format {
            what: "match file",
            reason: format!("match ({}, {}) refers to an area outside image {name}", m.i, m.j),
        });
    }
    let retained = retained_areas(&matches, areas, side, &cfg.hcrf);
    let kept = MatchSet(matches.iter().filter(|m| retained.contains(&index(m))).copied().collect());
    eprintln!("side {name}: {} matches before, {} after", matches.len(), kept.len());
    let summary = json!({ "summary": {
        "side": name,
        "before": matches.len(),
        "after": kept.len(),
        "retained": retained,
    }});
    write_matches(&kept, Some(summary), a.out.as_deref())
}

fn run_eval(cfg: &RunConfig, a: &EvalArgs) -> Result<()> {
    let params = load_or_init(a.params.as_deref(), cfg)?;
    let dirs = list_pairs(&a.data)?;
    if dirs.is_empty() {
        return Err(Error::InvalidConfig(format!("no pair directories under {}", a.data.display())));
    }
    let mut probs = Vec::with_capacity(dirs.len());
    let mut gts = Vec::with_capacity(dirs.len());
    for d in &dirs {
        let pair = SyntheticPair::load(d)?;
        let p = predict(
            &params,
            ImageInput { areas: &pair.areas_a, features: &pair.features_a },
            ImageInput { areas: &pair.areas_b, features: &pair.features_b },
            &cfg.train.matcher,
        )?;
        probs.push(p.values().clone());
        gts.push(pair.gt);
    }
    let report = auc_area_matching(&probs.iter().collect::<Vec<_>>(), &gts.iter().collect::<Vec<_>>(), &THRESHOLDS)?;
    eprint!("{}", report.table());
    emit(&report, a.out.as_deref())
}

fn run_bench(cfg: &RunConfig, a: &BenchArgs) -> Result<()> {
    let heads = if a.dim.is_multiple_of(cfg.net.heads) { cfg.net.heads } else { 1 };
    let net = sgad::attention::NetworkConfig { dim: a.dim, heads, ..cfg.net };
    let sizes: Vec<(usize, usize)> = a.sizes.iter().map(|&s| (s, s)).collect();
    let threads = if a.parallel { 0 } else { 1 };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let records = pool.install(|| bench_scaling(&net, &sizes, &cfg.bench()))?;
    eprint!("{}", BenchRecord::table(&records));
    let slope = (records.len() >= 2).then(|| attend_match_slope(&records));
    if let Some(s) = slope {
        eprintln!("attend+match log-log slope vs m*n: {s:.3}");
    }
    emit(&json!({ "records": records, "attend_match_slope": slope }), a.out.as_deref())
}

fn run_gradcheck(cfg: &RunConfig, a: &GradcheckArgs) -> Result<bool> {
    let base = cfg.train.seed;
    let mut reports = Vec::new();
    for k in 0..a.count {
        let seed = base + k;
        let inst = Instance::random(seed, audit_config(), 3, 3)?;
        let r = inst.check(seed, a.eps, &cfg.train.matcher, &cfg.train.supervision)?;
        eprintln!("seed {seed:>4}  max rel err {:.3e}", r.max_rel_err);
        reports.push(r);
    }
    let worst = reports.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
    let pass = worst < a.tol;
    emit(&json!({ "max_rel_err": worst, "tol": a.tol, "pass": pass, "reports": reports }), a.out.as_deref())?;
    Ok(pass)
}

fn run(cli: &Cli) -> Result<bool> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.set_seed(s);
    }
    match &cli.command {
        Command::Gen(a) => gen(&cfg, a)?,
        Command::Train(a) => run_train(&cfg, a)?,
        Command::Match(a) => run_match(&cfg, a)?,
        Command::Filter(a) => run_filter(&cfg, a)?,
        Command::Eval(a) => run_eval(&cfg, a)?,
        Command::Bench(a) => run_bench(&cfg, a)?,
        Command::Gradcheck(a) => return run_gradcheck(&cfg, a),
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("gradient check failed");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
