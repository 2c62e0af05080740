//! Command-line front end: build, decode, inspect, sweep, synth.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 a checked property
//! failed.

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::clustering::ClusterConfig;
use crate::dump::{EmbeddingDump, Role};
use crate::error::Error;
use crate::harness::{check_report, sweep, table_bytes, write_decode_results, write_sweep_results, SweepGrid};
use crate::index::{build_index, stored_score_bits, CsIndex, IndexConfig, ScoreBits};
use crate::retrieval::{RetrievalConfig, Schedule};
use crate::session::Session;
use crate::types::{KvStore, SubspaceLayout};
use crate::workload::{SyntheticSpec, Workload};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_PROPERTY: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "csattn", version, about = "Centroid-scored sparse attention tools")]
pub struct Cli {
    /// Seed for clustering and the synthetic generator.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Cluster prefill queries and write an index file.
    Build(BuildArgs),
    /// Run sparse decode from an index and write a per-step results file.
    Decode(DecodeArgs),
    /// Print an index summary.
    Inspect(InspectArgs),
    /// Run a parameter grid and write results and series files.
    Sweep(SweepArgs),
    /// Write synthetic Q/K/V dumps.
    Synth(SynthArgs),
}

#[derive(Debug, Args, Clone)]
pub struct InputArgs {
    #[arg(long, value_name = "FILE")]
    pub queries: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    pub keys: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    pub values: Option<PathBuf>,
    /// Generate inputs instead of reading dumps: prefill length, head
    /// dimension, topic clusters.
    #[arg(long, num_args = 3, value_names = ["N", "D", "CLUSTERS"], conflicts_with_all = ["queries", "keys", "values"])]
    pub synthetic: Option<Vec<usize>>,
}

#[derive(Debug, Args, Clone)]
pub struct IndexArgs {
    /// Subspaces.
    #[arg(long, default_value_t = 8)]
    pub m: usize,
    /// Centroids per subspace.
    #[arg(long, default_value_t = 64)]
    pub centroids: usize,
    /// List capacity as a fraction of the prefill length.
    #[arg(long, default_value_t = 0.2)]
    pub alpha: f64,
    #[arg(long, default_value_t = 10)]
    pub iterations: usize,
    /// Normalize keys before scoring them against centroids.
    #[arg(long)]
    pub normalize_keys: bool,
}

#[derive(Debug, Args, Clone)]
pub struct SearchArgs {
    #[arg(long, default_value_t = 0.05)]
    pub rho: f64,
    #[arg(long, default_value_t = 1)]
    pub period: usize,
    /// Named keep/period pair such as 0.15-step-4; overrides --rho and --period.
    #[arg(long, conflicts_with_all = ["rho", "period"])]
    pub schedule: Option<String>,
    #[arg(long, default_value_t = 32)]
    pub window: usize,
    #[arg(long, default_value_t = 1)]
    pub tau: usize,
    #[arg(long, default_value_t = f64::NEG_INFINITY, allow_hyphen_values = true)]
    pub backoff_threshold: f64,
}

#[derive(Debug, Args)]
pub struct BuildArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[command(flatten)]
    pub index: IndexArgs,
    /// Use only the first N rows of the dumps as prefill.
    #[arg(long)]
    pub prefill: Option<usize>,
    #[arg(long, default_value_t = 16, value_parser = parse_score_bits)]
    pub score_bits: u32,
    #[arg(long, short)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DecodeArgs {
    #[arg(long)]
    pub index: PathBuf,
    #[command(flatten)]
    pub input: InputArgs,
    #[command(flatten)]
    pub search: SearchArgs,
    #[arg(long)]
    pub steps: usize,
    /// Also run dense attention and report recall and output error.
    #[arg(long)]
    pub oracle: bool,
    /// Results file; stdout when absent.
    #[arg(long, short)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    pub index: PathBuf,
    /// Print one line per table.
    #[arg(long)]
    pub tables: bool,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub grid: PathBuf,
    #[command(flatten)]
    pub input: InputArgs,
    /// Decode steps per cell (overrides the grid file).
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    #[arg(long, short)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, num_args = 3, value_names = ["N", "D", "CLUSTERS"], required = true)]
    pub synthetic: Vec<usize>,
    /// Decode rows appended after the prefill rows.
    #[arg(long, default_value_t = 0)]
    pub steps: usize,
    /// Directory receiving q.bin, k.bin and v.bin.
    #[arg(long, short)]
    pub out: PathBuf,
}

fn parse_score_bits(s: &str) -> std::result::Result<u32, String> {
    match s {
        "16" => Ok(16),
        "32" => Ok(32),
        _ => Err(format!("{s} is not 16 or 32")),
    }
}

enum Failure {
    Usage(String),
    Data(Error),
    Property(Vec<String>),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Data(e)
    }
}

type CliResult<T = ()> = std::result::Result<T, Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

/// Parses `args` (including the program name) and runs the command,
/// returning the process exit code. Reports go to `out`, errors to stderr.
pub fn run<I, T>(args: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::new().filter_or("CSATTN_LOG", "warn")).try_init();
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let result = match &cli.command {
        Command::Build(a) => cmd_build(a, cli.seed, out),
        Command::Decode(a) => cmd_decode(a, cli.seed, out),
        Command::Inspect(a) => cmd_inspect(a, out),
        Command::Sweep(a) => cmd_sweep(a, cli.seed, out),
        Command::Synth(a) => cmd_synth(a, cli.seed),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            EXIT_USAGE
        }
        Err(Failure::Data(e)) => {
            eprintln!("error: {e}");
            EXIT_DATA
        }
        Err(Failure::Property(violations)) => {
            for v in &violations {
                eprintln!("property violated: {v}");
            }
            EXIT_PROPERTY
        }
    }
}

fn synthetic_spec(dims: &[usize], decode_len: usize, seed: u64) -> CliResult<SyntheticSpec> {
    match *dims {
        [n, d, clusters] if n > 0 && d > 0 && clusters > 0 => Ok(SyntheticSpec::new(n, d, clusters)
            .with_decode(decode_len)
            .with_seed(seed)),
        _ => Err(usage("--synthetic takes three positive integers: N D CLUSTERS")),
    }
}

/// Q/K/V rows from dumps or the generator. Rows past `prefill` become decode
/// tokens.
fn load_workload(
    input: &InputArgs,
    prefill: Option<usize>,
    decode_len: usize,
    seed: u64,
    need_values: bool,
) -> CliResult<Workload> {
    if let Some(dims) = &input.synthetic {
        let n = prefill.unwrap_or(dims[0]);
        if n != dims[0] {
            return Err(usage(format!(
                "index prefill length {n} differs from --synthetic N = {}",
                dims[0]
            )));
        }
        return Ok(synthetic_spec(dims, decode_len, seed)?.generate()?);
    }
    let q_path = input
        .queries
        .as_ref()
        .ok_or_else(|| usage("--queries (or --synthetic) is required"))?;
    let k_path = input
        .keys
        .as_ref()
        .ok_or_else(|| usage("--keys (or --synthetic) is required"))?;
    let q = EmbeddingDump::load_role(q_path, Role::Query)?;
    let k = EmbeddingDump::load_role(k_path, Role::Key)?;
    if q.d != k.d {
        return Err(Error::param(format!("query dump has d = {} but key dump has d = {}", q.d, k.d)).into());
    }
    let v = match (&input.values, need_values) {
        (Some(p), _) => EmbeddingDump::load_role(p, Role::Value)?,
        (None, true) => return Err(usage("--values (or --synthetic) is required")),
        // Values never influence the index; zeros keep the cache shape valid.
        (None, false) => EmbeddingDump::new(Role::Value, k.d, vec![0.0; k.rows.len()])?,
    };
    if v.d != k.d {
        return Err(Error::param(format!("value dump has d = {} but key dump has d = {}", v.d, k.d)).into());
    }
    if q.count() != k.count() || k.count() != v.count() {
        return Err(Error::param(format!(
            "dumps hold {} queries, {} keys, {} values",
            q.count(),
            k.count(),
            v.count()
        ))
        .into());
    }
    let d = k.d;
    let total = k.count();
    let p = prefill.unwrap_or(total);
    if p == 0 || p > total {
        return Err(Error::param(format!("prefill length {p} not in 1..={total}")).into());
    }
    let end = (p + decode_len).min(total);
    let split = |rows: Vec<f32>| -> [Vec<f32>; 2] { [rows[..p * d].to_vec(), rows[p * d..end * d].to_vec()] };
    let [qp, qd] = split(q.rows);
    let [kp, kd] = split(k.rows);
    let [vp, vd] = split(v.rows);
    Ok(Workload::new(d, [qp, kp, vp], [qd, kd, vd])?)
}

fn retrieval_config(s: &SearchArgs) -> CliResult<RetrievalConfig> {
    let schedule = match &s.schedule {
        Some(name) => name.parse::<Schedule>().map_err(|e| usage(e.to_string()))?,
        None => Schedule {
            keep_ratio: s.rho,
            search_period: s.period,
        },
    };
    if !(schedule.keep_ratio > 0.0 && schedule.keep_ratio <= 1.0) {
        return Err(usage(format!("--rho {} must lie in (0, 1]", schedule.keep_ratio)));
    }
    if schedule.search_period == 0 || s.tau == 0 {
        return Err(usage("--period and --tau must be at least 1"));
    }
    if s.backoff_threshold.is_nan() {
        return Err(usage("--backoff-threshold must be a number"));
    }
    Ok(RetrievalConfig {
        recent_window: s.window,
        backoff_tau: s.tau,
        backoff_threshold: s.backoff_threshold,
        ..Default::default()
    }
    .with_schedule(schedule))
}

fn cmd_build(a: &BuildArgs, seed: u64, out: &mut dyn Write) -> CliResult {
    let ix = &a.index;
    if !(ix.alpha > 0.0 && ix.alpha <= 1.0) {
        return Err(usage(format!("--alpha {} must lie in (0, 1]", ix.alpha)));
    }
    if ix.m == 0 || ix.centroids == 0 || ix.iterations == 0 {
        return Err(usage("--m, --centroids and --iterations must be at least 1"));
    }
    let bits = ScoreBits::from_bits(a.score_bits).ok_or_else(|| usage("--score-bits must be 16 or 32"))?;
    let w = load_workload(&a.input, a.prefill, 0, seed, false)?;
    let layout = SubspaceLayout::uniform(w.dim(), ix.m)?;
    let kv = KvStore::from_prefill(w.dim(), w.prefill_keys.clone(), w.prefill_values.clone())?;
    let cfg = IndexConfig {
        alpha: ix.alpha,
        normalize_keys: ix.normalize_keys,
        cluster: ClusterConfig {
            centroids: ix.centroids,
            iterations: ix.iterations,
            seed,
            ..Default::default()
        },
        ..Default::default()
    };
    let index = build_index(&w.prefill_queries, &kv, &layout, &cfg)?;
    index.save(&a.out, bits)?;

    let reloaded = CsIndex::load(&a.out)?;
    if let Err(e) = reloaded.check_invariants() {
        return Err(Failure::Property(vec![format!(
            "written index fails its invariants: {e}"
        )]));
    }
    let breakdown = index.byte_breakdown(bits);
    let model = table_bytes(ix.m, ix.centroids, index.list_capacity(), w.dim(), bits.bytes());
    let _ = writeln!(
        out,
        "wrote {}: m={} C={} L={} d={} prefill={}",
        a.out.display(),
        ix.m,
        ix.centroids,
        index.list_capacity(),
        w.dim(),
        index.prefill_len()
    );
    let _ = writeln!(
        out,
        "table bytes: model {model}, payload {}, file {}",
        breakdown.payload(),
        breakdown.total()
    );
    Ok(())
}

/// Cache contents matching everything the index has already absorbed.
fn resume_cache(index: &CsIndex, w: &Workload) -> CliResult<(KvStore, usize)> {
    let p = index.prefill_len();
    let seen = index.keys_seen();
    let d = w.dim();
    let mut kv = KvStore::from_prefill(d, w.prefill_keys.clone(), w.prefill_values.clone())?;
    let streamed = seen - p;
    if streamed > w.decode_len() {
        return Err(Error::param(format!(
            "index has absorbed {seen} keys, inputs hold {}",
            p + w.decode_len()
        ))
        .into());
    }
    for (i, t) in w.tokens().take(streamed).enumerate() {
        kv.push(t.key, t.value)
            .map_err(|e| Error::param(format!("decode row {i}: {e}")))?;
    }
    Ok((kv, streamed))
}

fn cmd_decode(a: &DecodeArgs, seed: u64, out: &mut dyn Write) -> CliResult {
    let cfg = retrieval_config(&a.search)?;
    let index = CsIndex::load(&a.index)?;
    let already = index.keys_seen() - index.prefill_len();
    let w = load_workload(&a.input, Some(index.prefill_len()), already + a.steps, seed, true)?;
    if w.dim() != index.dim() {
        return Err(Error::param(format!("index has d = {} but inputs have d = {}", index.dim(), w.dim())).into());
    }
    if w.decode_len() < already + a.steps {
        return Err(Error::StreamExhausted {
            step: w.decode_len().saturating_sub(already),
        }
        .into());
    }
    let (kv, skip) = resume_cache(&index, &w)?;
    let tau = cfg.backoff_tau;
    let mut session = Session::from_index(kv, index, cfg)?;
    let reports = session.run_decode(w.tokens().skip(skip), a.steps, a.oracle)?;

    let text = write_decode_results(session.config(), &reports, a.oracle);
    match &a.out {
        Some(path) => std::fs::write(path, &text).map_err(|e| Error::from(e).in_file(path))?,
        None => {
            let _ = out.write_all(text.as_bytes());
        }
    }
    let violations: Vec<String> = reports.iter().flat_map(|r| check_report(r, &session, tau)).collect();
    if !violations.is_empty() {
        return Err(Failure::Property(violations));
    }
    Ok(())
}

fn cmd_inspect(a: &InspectArgs, out: &mut dyn Write) -> CliResult {
    let bytes = std::fs::read(&a.index).map_err(|e| Error::from(e).in_file(&a.index))?;
    let bits = stored_score_bits(&bytes).map_err(|e| e.in_file(&a.index))?;
    let index = CsIndex::from_bytes(&bytes).map_err(|e| e.in_file(&a.index))?;
    let m = index.num_subspaces();
    let c = index.num_centroids();
    let l = index.list_capacity();
    let _ = writeln!(out, "index      {}", a.index.display());
    let _ = writeln!(out, "m          {m}");
    let _ = writeln!(out, "C          {c}");
    let _ = writeln!(out, "L          {l}");
    let _ = writeln!(out, "alpha      {:.6}", index.alpha());
    let _ = writeln!(out, "prefill    {}", index.prefill_len());
    let _ = writeln!(out, "keys seen  {}", index.keys_seen());
    let _ = writeln!(out, "d          {} (widths {:?})", index.dim(), index.layout().sizes());
    let _ = writeln!(
        out,
        "storage    {}-bit, normalized keys: {}",
        bits.bytes() * 8,
        index.normalize_keys()
    );

    let _ = writeln!(out, "subspace\tfill_min\tfill_max\tscore_min\tscore_max");
    for b in 0..m {
        let tables: Vec<_> = (0..c).map(|j| index.table(b, j)).collect();
        let fill_min = tables.iter().map(|t| t.len()).min().unwrap_or(0);
        let fill_max = tables.iter().map(|t| t.len()).max().unwrap_or(0);
        let lo = tables
            .iter()
            .filter_map(|t| t.min_score())
            .fold(f32::INFINITY, f32::min);
        let hi = tables
            .iter()
            .filter_map(|t| t.max_score())
            .fold(f32::NEG_INFINITY, f32::max);
        let _ = writeln!(out, "{b}\t{fill_min}\t{fill_max}\t{lo:.6}\t{hi:.6}");
    }
    if a.tables {
        let _ = writeln!(out, "subspace\tcentroid\tfill\tscore_min\tscore_max");
        for b in 0..m {
            for j in 0..c {
                let t = index.table(b, j);
                let _ = writeln!(
                    out,
                    "{b}\t{j}\t{}\t{:.6}\t{:.6}",
                    t.len(),
                    t.min_score().unwrap_or(f32::NAN),
                    t.max_score().unwrap_or(f32::NAN)
                );
            }
        }
    }

    let br = index.byte_breakdown(bits);
    let model = table_bytes(m, c, l, index.dim(), bits.bytes());
    let _ = writeln!(
        out,
        "bytes: header {} + list lengths {} (framing {})",
        br.header,
        br.list_lengths,
        br.framing()
    );
    let _ = writeln!(
        out,
        "bytes: centroids {} + list indices {} + list scores {} (payload {})",
        br.centroids,
        br.list_indices,
        br.list_scores,
        br.payload()
    );
    let _ = writeln!(out, "bytes: file {} (on disk {})", br.total(), bytes.len());
    let full = index.tables().iter().all(|t| t.len() == l);
    let _ = writeln!(
        out,
        "model: {model} bytes for full lists; payload {} ({})",
        br.payload(),
        if full { "lists full" } else { "lists partially filled" }
    );
    Ok(())
}

fn cmd_sweep(a: &SweepArgs, seed: u64, out: &mut dyn Write) -> CliResult {
    let text = std::fs::read_to_string(&a.grid).map_err(|e| Error::from(e).in_file(&a.grid))?;
    let grid = SweepGrid::parse(&text).map_err(|e| Failure::Data(e.in_file(&a.grid)))?;
    let steps = a.steps.or(grid.steps).unwrap_or(32);
    let seeds = grid.seeds.clone().unwrap_or_else(|| vec![seed]);
    if seeds.is_empty() {
        return Err(usage("grid lists no seeds"));
    }
    let w = load_workload(&a.input, None, steps, seed, true)?;
    // With dumps, the last `steps` rows form the decode tail.
    let w = if a.input.synthetic.is_none() {
        reslice(w, steps)?
    } else {
        w
    };
    let output = sweep(&grid.cells, &w, &seeds, steps, a.jobs)?;
    write_sweep_results(&a.out, &output)?;
    let _ = writeln!(
        out,
        "{} cells run, {} skipped; results in {}",
        output.results.len(),
        output.skipped.len(),
        a.out.display()
    );
    if !output.violations.is_empty() {
        return Err(Failure::Property(output.violations));
    }
    Ok(())
}

/// Moves the last `steps` prefill rows of a dump-backed workload into the
/// decode tail.
fn reslice(w: Workload, steps: usize) -> CliResult<Workload> {
    let d = w.dim();
    let n = w.prefill_len();
    if steps >= n {
        return Err(Error::param(format!(
            "dumps hold {n} rows; need more than {steps} for prefill plus decode"
        ))
        .into());
    }
    let cut = (n - steps) * d;
    let split = |rows: &[f32]| [rows[..cut].to_vec(), rows[cut..].to_vec()];
    let [qp, qd] = split(&w.prefill_queries);
    let [kp, kd] = split(&w.prefill_keys);
    let [vp, vd] = split(&w.prefill_values);
    Ok(Workload::new(d, [qp, kp, vp], [qd, kd, vd])?)
}

fn cmd_synth(a: &SynthArgs, seed: u64) -> CliResult {
    let w = synthetic_spec(&a.synthetic, a.steps, seed)?.generate()?;
    std::fs::create_dir_all(&a.out).map_err(|e| Error::from(e).in_file(&a.out))?;
    let d = w.dim();
    for (role, file, pre, dec) in [
        (Role::Query, "q.bin", &w.prefill_queries, &w.decode_queries),
        (Role::Key, "k.bin", &w.prefill_keys, &w.decode_keys),
        (Role::Value, "v.bin", &w.prefill_values, &w.decode_values),
    ] {
        let rows = [pre.as_slice(), dec.as_slice()].concat();
        EmbeddingDump::new(role, d, rows)?.save(a.out.join(file))?;
    }
    Ok(())
}
