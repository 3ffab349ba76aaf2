//! Command-line driver. Every subcommand writes into its own run directory,
//! `$CSCR_RUN_DIR/<command>-<hash prefix>` (default root `runs`), and prints that
//! directory's path on success.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::Value;

use cscr_core::descriptors::{descriptor_similarity_matrix, pool_descriptors, select_token_basis, ProbeInputs};
use cscr_core::synth::{self, SynthProbes};
use cscr_core::train::{train, TrainOutcome};
use cscr_core::{normalize_costs, BandPartition, CostModel, DescriptorKind, ExpertPool, FlatIndex, MlpHead, PolicyKind, QueryRecord};

use crate::config::{echo, parse_assignment, run_dir, Layers, RunConfig, RunIdentity};
use crate::error::{CliError, Result};
use crate::formats::{self, ProbeData};
use crate::pipeline::{self, EvalSet, Router, CURVE_HEADER, DECISIONS_HEADER};

/// Largest token basis picked by default.
const DEFAULT_BASIS: usize = 256;

#[derive(Debug, Parser)]
#[command(name = "cscr", version, about = "Cost-spectrum contrastive routing toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// TOML or JSON settings file.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Override any setting, e.g. `--set train.gamma=0.1`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    #[arg(long, value_name = "FILE")]
    pub pool: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub queries: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct RouterArgs {
    /// Expert descriptors (JSONL).
    #[arg(long, value_name = "FILE")]
    pub descriptors: Option<PathBuf>,
    /// Directory holding a trained head.
    #[arg(long, value_name = "DIR")]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PolicyArg {
    Cscr,
    Oracle,
    Random,
    ParetoRandom,
    Thompson,
    Single,
}

impl From<PolicyArg> for PolicyKind {
    fn from(p: PolicyArg) -> Self {
        match p {
            PolicyArg::Cscr => PolicyKind::Cscr,
            PolicyArg::Oracle => PolicyKind::Oracle,
            PolicyArg::Random => PolicyKind::Random,
            PolicyArg::ParetoRandom => PolicyKind::ParetoRandom,
            PolicyArg::Thompson => PolicyKind::Thompson,
            PolicyArg::Single => PolicyKind::Single,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic pool, queries, probe data and planted descriptors.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Compute expert descriptors from probe data.
    Descriptors {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "FILE")]
        pool: PathBuf,
        /// Probe payload (`.bin`, header alongside as `.json`). One per descriptor kind.
        #[arg(long, value_name = "FILE", required = true)]
        probes: Vec<PathBuf>,
        #[arg(long)]
        basis_size: Option<usize>,
    },
    /// Train the projection head.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, value_name = "FILE")]
        descriptors: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        gamma: Option<f64>,
        #[arg(long)]
        bands: Option<usize>,
    },
    /// Build the descriptor index and report its pairwise similarities.
    Index {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "FILE")]
        pool: PathBuf,
        #[arg(long, value_name = "FILE")]
        descriptors: PathBuf,
    },
    /// Route queries at a single λ.
    Route {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        router: RouterArgs,
        #[arg(long, value_enum)]
        policy: Option<PolicyArg>,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Sweep one policy over the λ grid and report AUDC, QNC and peak quality.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        router: RouterArgs,
        #[arg(long, value_enum)]
        policy: Option<PolicyArg>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Sweep several policies and write their curves side by side.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        router: RouterArgs,
        /// Defaults to every policy the inputs allow.
        #[arg(long, value_enum, value_delimiter = ',')]
        policies: Vec<PolicyArg>,
    },
    /// Paired bootstrap of ΔAUDC and McNemar's test at a matched budget.
    Significance {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        router: RouterArgs,
        #[arg(long, value_enum)]
        policy_a: Option<PolicyArg>,
        #[arg(long, value_enum)]
        policy_b: Option<PolicyArg>,
        #[arg(long)]
        resamples: Option<usize>,
        #[arg(long)]
        budget: Option<f64>,
    },
    /// Train and evaluate CSCR over a grid of settings.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, value_name = "FILE")]
        descriptors: PathBuf,
        /// `KEY=V1,V2,...`; keys are `bands`, `gamma`, `alpha`, `tau_min`, `k` or any setting path.
        #[arg(long = "grid", value_name = "KEY=VALUES", required = true)]
        grid: Vec<String>,
    },
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(cli.command) {
        Ok(dir) => {
            println!("{}", dir.display());
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn layers(common: &Common, typed: Vec<(&str, Option<Value>)>) -> Result<Layers> {
    let mut flags = common.set.iter().map(|s| parse_assignment(s)).collect::<Result<Vec<_>>>()?;
    flags.extend(typed.into_iter().filter_map(|(k, v)| v.map(|v| (k.to_string(), v))));
    Ok(Layers { file: common.config.clone(), flags, ..Layers::default() }.with_process_env())
}

fn val<T: Serialize>(v: Option<T>) -> Option<Value> {
    v.map(|v| serde_json::to_value(v).expect("flag value serializes"))
}

fn policy_val(p: Option<PolicyArg>) -> Option<Value> {
    val(p.map(PolicyKind::from))
}

/// Input digests keyed by role.
struct Inputs(BTreeMap<String, String>);

impl Inputs {
    fn new() -> Self {
        Inputs(BTreeMap::new())
    }

    fn file(mut self, role: &str, path: &Path) -> Result<Self> {
        self.0.insert(role.into(), formats::sha256_file(path)?);
        Ok(self)
    }

    fn checkpoint(self, dir: &Path) -> Result<Self> {
        self.file("checkpoint.head", &dir.join("head.json"))?.file("checkpoint.params", &dir.join("head.bin"))
    }

    fn value(mut self, role: &str, v: String) -> Self {
        self.0.insert(role.into(), v);
        self
    }
}

struct Run {
    dir: PathBuf,
    hash: String,
}

fn start(command: &str, config: &RunConfig, inputs: Inputs) -> Result<Run> {
    let identity = RunIdentity { command: command.into(), config: config.clone(), inputs: inputs.0 };
    let hash = identity.hash();
    let dir = run_dir(command, &hash);
    fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    formats::write_json(&dir.join("config.json"), &echo(&identity))?;
    Ok(Run { dir, hash })
}

pub fn run(command: Command) -> Result<PathBuf> {
    match command {
        Command::Synth { common, seed } => cmd_synth(&layers(&common, vec![("synth.seed", val(seed))])?.resolve()?),
        Command::Descriptors { common, pool, probes, basis_size } => {
            let cfg = layers(&common, vec![("descriptors.basis_size", val(basis_size))])?.resolve()?;
            cmd_descriptors(&cfg, &pool, &probes)
        }
        Command::Train { common, data, descriptors, seed, epochs, gamma, bands } => {
            let cfg = layers(
                &common,
                vec![
                    ("train.seed", val(seed)),
                    ("train.epochs", val(epochs)),
                    ("train.gamma", val(gamma)),
                    ("train.num_bands", val(bands)),
                ],
            )?
            .resolve()?;
            cmd_train(&cfg, &data, &descriptors)
        }
        Command::Index { common, pool, descriptors } => cmd_index(&layers(&common, vec![])?.resolve()?, &pool, &descriptors),
        Command::Route { common, data, router, policy, lambda, k, seed } => {
            let cfg = layers(
                &common,
                vec![
                    ("route.policy", policy_val(policy)),
                    ("route.lambda", val(lambda)),
                    ("route.k", val(k)),
                    ("route.seed", val(seed)),
                ],
            )?
            .resolve()?;
            cmd_route(&cfg, &data, &router)
        }
        Command::Eval { common, data, router, policy, k, seed } => {
            let cfg = layers(
                &common,
                vec![("route.policy", policy_val(policy)), ("route.k", val(k)), ("route.seed", val(seed))],
            )?
            .resolve()?;
            cmd_eval(&cfg, &data, &router)
        }
        Command::Sweep { common, data, router, policies } => {
            let cfg = layers(&common, vec![])?.resolve()?;
            cmd_sweep(&cfg, &data, &router, policies.into_iter().map(PolicyKind::from).collect())
        }
        Command::Significance { common, data, router, policy_a, policy_b, resamples, budget } => {
            let cfg = layers(
                &common,
                vec![
                    ("route.policy", policy_val(policy_a)),
                    ("eval.baseline", policy_val(policy_b)),
                    ("eval.bootstrap_resamples", val(resamples)),
                    ("eval.budget", val(budget)),
                ],
            )?
            .resolve()?;
            cmd_significance(&cfg, &data, &router)
        }
        Command::Ablate { common, data, descriptors, grid } => cmd_ablate(&common, &data, &descriptors, &grid),
    }
}

fn cmd_synth(cfg: &RunConfig) -> Result<PathBuf> {
    let data = synth::generate(&cfg.synth)?;
    let run = start("synth", cfg, Inputs::new())?;
    let d = &run.dir;
    formats::write_pool(&d.join("pool.jsonl"), &data.pool)?;
    formats::write_queries(&d.join("queries.jsonl"), &data.queries, &data.pool)?;
    formats::write_descriptors(&d.join("descriptors.jsonl"), &data.descriptors)?;
    let probes = match data.probes {
        SynthProbes::Logit { tensor, .. } => ProbeData::Logit(tensor),
        SynthProbes::Perplexity(table) => ProbeData::Perplexity(table),
    };
    formats::write_probes(&d.join("probes.bin"), &probes)?;

    #[derive(Serialize)]
    struct Truth<'a> {
        query_ids: Vec<&'a str>,
        cluster: &'a [usize],
        cheapest_competent: Vec<Option<&'a str>>,
    }
    let ids: Vec<&str> = data.pool.ids().collect();
    formats::write_json(
        &d.join("truth.json"),
        &Truth {
            query_ids: data.queries.iter().map(|q| q.id.as_str()).collect(),
            cluster: &data.truth.cluster,
            cheapest_competent: data.truth.cheapest_competent.iter().map(|e| e.map(|e| ids[e])).collect(),
        },
    )?;
    Ok(run.dir)
}

fn cmd_descriptors(cfg: &RunConfig, pool_path: &Path, probe_paths: &[PathBuf]) -> Result<PathBuf> {
    let pool = formats::read_pool(pool_path)?;
    let mut inputs = Inputs::new().file("pool", pool_path)?;
    let (mut logit, mut perplexity) = (None, None);
    for (i, path) in probe_paths.iter().enumerate() {
        inputs = inputs.file(&format!("probes.{i}"), path)?.file(&format!("probes.{i}.header"), &formats::sidecar_path(path))?;
        let raw = formats::read_probes(path)?;
        let slot = match raw.kind() {
            DescriptorKind::Logit => &mut logit,
            DescriptorKind::Perplexity => &mut perplexity,
        };
        if slot.is_some() {
            return Err(CliError::Usage(format!("more than one {} probe file", raw.kind().as_str())));
        }
        if pool.has_kind(raw.kind()) {
            *slot = Some(raw.align_to_pool(&pool).map_err(|e| CliError::data(path, e))?);
        }
    }
    let tensor = match logit {
        Some(ProbeData::Logit(t)) => Some(t),
        _ => None,
    };
    let table = match perplexity {
        Some(ProbeData::Perplexity(t)) => Some(t),
        _ => None,
    };
    let basis = tensor
        .as_ref()
        .map(|t| select_token_basis(t, cfg.descriptors.basis_size.unwrap_or(DEFAULT_BASIS.min(t.token_ids().len()))))
        .transpose()?;
    let descs = pool_descriptors(
        &pool,
        ProbeInputs { logit: tensor.as_ref().zip(basis.as_ref()), perplexity: table.as_ref() },
    )?;
    let run = start("descriptors", cfg, inputs)?;
    formats::write_descriptors(&run.dir.join("descriptors.jsonl"), &descs)?;
    if let Some(b) = &basis {
        formats::write_json(&run.dir.join("basis.json"), &serde_json::json!({ "token_ids": b.token_ids() }))?;
    }
    Ok(run.dir)
}

fn load_index(pool: &ExpertPool, path: &Path) -> Result<FlatIndex> {
    FlatIndex::build(&formats::read_descriptors(path, pool)?).map_err(|e| CliError::data(path, e))
}

#[derive(Serialize)]
struct Manifest<'a> {
    config_hash: &'a str,
    train: &'a cscr_core::TrainConfig,
    head: HeadShape,
    bands: &'a BandPartition,
    costs: &'a CostModel,
    train_queries: usize,
    excluded_queries: usize,
    excluded_ids: &'a [String],
    final_loss: Option<f64>,
}

#[derive(Serialize)]
struct HeadShape {
    input_dim: usize,
    hidden_dim: usize,
    output_dim: usize,
    params: usize,
}

fn train_into(dir: &Path, hash: &str, cfg: &RunConfig, costs: &CostModel, records: &[QueryRecord], index: &FlatIndex) -> Result<TrainOutcome> {
    let out = train(records, costs, index, &cfg.train)?;
    formats::write_head(dir, &out.head)?;
    formats::write_csv(
        &dir.join("loss.csv"),
        "epoch,loss,excluded_queries",
        out.epochs.iter().map(|e| format!("{},{},{}", e.epoch, e.loss, e.excluded_queries)),
    )?;
    let h = &out.head;
    formats::write_json(
        &dir.join("manifest.json"),
        &Manifest {
            config_hash: hash,
            train: &cfg.train,
            head: HeadShape {
                input_dim: h.input_dim(),
                hidden_dim: h.hidden_dim(),
                output_dim: h.output_dim(),
                params: h.params().len(),
            },
            bands: &out.bands,
            costs,
            train_queries: out.train_queries,
            excluded_queries: out.excluded.len(),
            excluded_ids: &out.excluded,
            final_loss: out.epochs.last().map(|e| e.loss),
        },
    )?;
    Ok(out)
}

fn cmd_train(cfg: &RunConfig, data: &DataArgs, descriptors: &Path) -> Result<PathBuf> {
    let pool = formats::read_pool(&data.pool)?;
    let records = formats::read_queries(&data.queries, &pool)?;
    let index = load_index(&pool, descriptors)?;
    let inputs = Inputs::new().file("pool", &data.pool)?.file("queries", &data.queries)?.file("descriptors", descriptors)?;
    let run = start("train", cfg, inputs)?;
    train_into(&run.dir, &run.hash, cfg, &normalize_costs(&pool), &records, &index)?;
    Ok(run.dir)
}

fn cmd_index(cfg: &RunConfig, pool_path: &Path, descriptors: &Path) -> Result<PathBuf> {
    let pool = formats::read_pool(pool_path)?;
    let descs = formats::read_descriptors(descriptors, &pool)?;
    let index = FlatIndex::build(&descs).map_err(|e| CliError::data(descriptors, e))?;
    let sim = descriptor_similarity_matrix(&descs)?;
    let run = start("index", cfg, Inputs::new().file("pool", pool_path)?.file("descriptors", descriptors)?)?;
    let rows: Vec<&[f64]> = (0..sim.len()).map(|i| sim.row(i)).collect();
    formats::write_json(
        &run.dir.join("index.json"),
        &serde_json::json!({ "dim": index.dim(), "ids": index.ids(), "similarity": rows }),
    )?;
    Ok(run.dir)
}

/// Inputs shared by the evaluation commands.
struct Loaded {
    pool: ExpertPool,
    costs: CostModel,
    records: Vec<QueryRecord>,
    index: Option<FlatIndex>,
    head: Option<MlpHead>,
}

fn load(data: &DataArgs, router: &RouterArgs, need_router: bool) -> Result<(Loaded, Inputs)> {
    let pool = formats::read_pool(&data.pool)?;
    let records = formats::read_queries(&data.queries, &pool)?;
    let mut inputs = Inputs::new().file("pool", &data.pool)?.file("queries", &data.queries)?;
    let (mut index, mut head) = (None, None);
    if need_router {
        let (Some(d), Some(c)) = (&router.descriptors, &router.checkpoint) else {
            return Err(CliError::Usage("the cscr policy needs --descriptors and --checkpoint".into()));
        };
        index = Some(load_index(&pool, d)?);
        head = Some(formats::read_head(c)?);
        inputs = inputs.file("descriptors", d)?.checkpoint(c)?;
    }
    let costs = normalize_costs(&pool);
    Ok((Loaded { pool, costs, records, index, head }, inputs))
}

impl Loaded {
    fn router(&self) -> Option<Router<'_>> {
        Some(Router { index: self.index.as_ref()?, head: self.head.as_ref()? })
    }
}

fn write_sweep(dir: &Path, sweep: &cscr_core::eval::SweepResult, set: &EvalSet<'_>) -> Result<()> {
    formats::write_csv(&dir.join("curve.csv"), CURVE_HEADER, pipeline::curve_rows(sweep))?;
    formats::write_csv(&dir.join("decisions.csv"), DECISIONS_HEADER, pipeline::decision_rows(sweep, set))
}

fn cmd_route(cfg: &RunConfig, data: &DataArgs, router: &RouterArgs) -> Result<PathBuf> {
    let (l, inputs) = load(data, router, cfg.route.policy == PolicyKind::Cscr)?;
    let set = EvalSet::new(&l.pool, &l.costs, &l.records, cfg.route.split)?;
    let run = start("route", cfg, inputs)?;
    let sweep = pipeline::run_policy_on(cfg.route.policy, cfg, &set, l.router().as_ref(), &[cfg.route.lambda])?;
    formats::write_csv(&run.dir.join("decisions.csv"), DECISIONS_HEADER, pipeline::decision_rows(&sweep, &set))?;
    Ok(run.dir)
}

fn cmd_eval(cfg: &RunConfig, data: &DataArgs, router: &RouterArgs) -> Result<PathBuf> {
    let (l, inputs) = load(data, router, cfg.route.policy == PolicyKind::Cscr)?;
    let set = EvalSet::new(&l.pool, &l.costs, &l.records, cfg.route.split)?;
    let run = start("eval", cfg, inputs)?;
    let sweep = pipeline::run_policy(cfg.route.policy, cfg, &set, l.router().as_ref())?;
    write_sweep(&run.dir, &sweep, &set)?;
    formats::write_json(&run.dir.join("report.json"), &pipeline::report(&sweep, &set, &run.hash)?)?;
    Ok(run.dir)
}

fn cmd_sweep(cfg: &RunConfig, data: &DataArgs, router: &RouterArgs, mut policies: Vec<PolicyKind>) -> Result<PathBuf> {
    let has_router = router.descriptors.is_some() && router.checkpoint.is_some();
    if policies.is_empty() {
        policies = vec![PolicyKind::Oracle, PolicyKind::Random, PolicyKind::ParetoRandom, PolicyKind::Thompson];
        if has_router {
            policies.insert(0, PolicyKind::Cscr);
        }
    }
    let (l, mut inputs) = load(data, router, policies.contains(&PolicyKind::Cscr))?;
    inputs = inputs.value("policies", policies.iter().map(|p| p.as_str()).collect::<Vec<_>>().join(","));
    let set = EvalSet::new(&l.pool, &l.costs, &l.records, cfg.route.split)?;
    let run = start("sweep", cfg, inputs)?;
    let mut rows = Vec::new();
    let mut reports = Vec::new();
    for &p in &policies {
        let sweep = pipeline::run_policy(p, cfg, &set, l.router().as_ref())?;
        rows.extend(pipeline::curve_rows(&sweep).map(|r| format!("{},{r}", p.as_str())));
        reports.push(pipeline::report(&sweep, &set, &run.hash)?);
    }
    formats::write_csv(&run.dir.join("curves.csv"), &format!("policy,{CURVE_HEADER}"), rows)?;
    formats::write_json(&run.dir.join("reports.json"), &reports)?;
    Ok(run.dir)
}

fn cmd_significance(cfg: &RunConfig, data: &DataArgs, router: &RouterArgs) -> Result<PathBuf> {
    let (a, b) = (cfg.route.policy, cfg.eval.baseline);
    let (l, inputs) = load(data, router, a == PolicyKind::Cscr || b == PolicyKind::Cscr)?;
    let set = EvalSet::new(&l.pool, &l.costs, &l.records, cfg.route.split)?;
    let run = start("significance", cfg, inputs)?;
    let sa = pipeline::run_policy(a, cfg, &set, l.router().as_ref())?;
    let sb = pipeline::run_policy(b, cfg, &set, l.router().as_ref())?;
    let sig = pipeline::significance(&sa, &sb, cfg, l.costs.max(), &run.hash)?;
    formats::write_json(&run.dir.join("significance.json"), &sig)?;
    Ok(run.dir)
}

fn grid_key(key: &str) -> String {
    match key {
        "bands" | "num_bands" => "train.num_bands".into(),
        "gamma" => "train.gamma".into(),
        "alpha" => "train.alpha".into(),
        "tau_min" => "train.tau_min".into(),
        "k" => "route.k".into(),
        other => other.into(),
    }
}

/// Cartesian product of `KEY=V1,V2` axes, first axis slowest.
fn grid_cells(axes: &[String]) -> Result<Vec<Vec<(String, Value)>>> {
    let mut cells = vec![vec![]];
    for axis in axes {
        let (key, values) = axis
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("expected KEY=V1,V2,..., got \"{axis}\"")))?;
        let values: Vec<&str> = values.split(',').map(str::trim).filter(|v| !v.is_empty()).collect();
        if values.is_empty() {
            return Err(CliError::Usage(format!("empty grid axis \"{key}\"")));
        }
        let key = grid_key(key.trim());
        let mut next = Vec::with_capacity(cells.len() * values.len());
        for cell in &cells {
            for v in &values {
                let mut c = cell.clone();
                c.push((key.clone(), crate::config::parse_value(v)));
                next.push(c);
            }
        }
        cells = next;
    }
    Ok(cells)
}

fn cmd_ablate(common: &Common, data: &DataArgs, descriptors: &Path, grid: &[String]) -> Result<PathBuf> {
    let cells = grid_cells(grid)?;
    let base = layers(common, vec![])?;
    let cfg = base.resolve()?;
    let cell_cfgs = cells
        .iter()
        .map(|cell| {
            let mut l = base.clone();
            l.flags.extend(cell.iter().cloned());
            l.resolve()
        })
        .collect::<Result<Vec<_>>>()?;

    let pool = formats::read_pool(&data.pool)?;
    let records = formats::read_queries(&data.queries, &pool)?;
    let index = load_index(&pool, descriptors)?;
    let costs = normalize_costs(&pool);
    let inputs = Inputs::new()
        .file("pool", &data.pool)?
        .file("queries", &data.queries)?
        .file("descriptors", descriptors)?
        .value("grid", grid.join(" "));
    let run = start("ablate", &cfg, inputs)?;
    let set = EvalSet::new(&pool, &costs, &records, cfg.route.split)?;

    let mut rows = Vec::new();
    for (i, (cell, cell_cfg)) in cells.iter().zip(&cell_cfgs).enumerate() {
        let dir = run.dir.join(format!("cell-{i:03}"));
        fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
        let out = train_into(&dir, &run.hash, cell_cfg, &costs, &records, &index)?;
        let r = Router { index: &index, head: &out.head };
        let sweep = pipeline::run_policy(PolicyKind::Cscr, cell_cfg, &set, Some(&r))?;
        write_sweep(&dir, &sweep, &set)?;
        let rep = pipeline::report(&sweep, &set, &run.hash)?;
        formats::write_json(&dir.join("report.json"), &rep)?;
        let settings: Vec<String> = cell.iter().map(|(k, v)| format!("{k}={v}")).collect();
        rows.push(format!(
            "{i},{},{},{},{},{}",
            settings.join(";"),
            rep.audc,
            rep.peak,
            rep.cost_at_peak,
            rep.qnc.map(|q| q.to_string()).unwrap_or_default()
        ));
    }
    formats::write_csv(&run.dir.join("ablation.csv"), "cell,settings,audc,max_acc,cost_at_max_acc,qnc", rows)?;
    Ok(run.dir)
}
