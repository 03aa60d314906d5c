use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{ArgGroup, Args, Parser, Subcommand};

use mergeforge::evolve::{
    checkpoint_search, resume_search, Evaluator, ExternalCommand, Search, SearchConfig, SyntheticTarget,
};
use mergeforge::gainstats::{gain_report_with, render_report, ReportFormat, ScoreTable, VarianceForm};
use mergeforge::merge_ops::{merge_model, FsCheckpoints, MethodPlan};
use mergeforge::packer::{
    best_fit_pack, pit_groups, read_jsonl, read_sequences, write_blocks, PitPhase, PitRecord, DEFAULT_CAPACITY,
};
use mergeforge::recipe::load_recipe;
use mergeforge::tensor_store::{read_header, store_weights, Header};

#[derive(Parser)]
#[command(name = "mergeforge", version, about = "Merge, search, and summarize fine-tuned checkpoints")]
struct Cli {
    /// Worker threads for tensor work (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// More log output; repeat for more.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    /// Only errors.
    #[arg(short, long, global = true, conflicts_with = "verbose")]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// List the tensors of a checkpoint.
    Inspect {
        path: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Merge checkpoints as described by a recipe.
    Merge {
        #[arg(long)]
        recipe: PathBuf,
        #[arg(long, required_unless_present = "dry_run")]
        out: Option<PathBuf>,
        /// Treat tensors missing from an expert as zero deltas.
        #[arg(long)]
        allow_missing: bool,
        /// Validate and print the plan without merging.
        #[arg(long)]
        dry_run: bool,
    },
    /// Search merge recipes with a genetic algorithm.
    Evolve(EvolveArgs),
    /// Gain report of candidates against a baseline.
    Stats {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        baseline: String,
        #[arg(long, value_delimiter = ',', required = true)]
        candidates: Vec<String>,
        #[arg(long, default_value = "table")]
        format: ReportFormat,
        /// Use the population standard deviation for CV Δ.
        #[arg(long)]
        population_variance: bool,
    },
    /// Pack token sequences into fixed-capacity blocks.
    Pack {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = DEFAULT_CAPACITY)]
        capacity: usize,
        #[arg(long)]
        out: PathBuf,
        /// Concatenate task items (and documents) per group before packing.
        #[arg(long, requires_all = ["eos", "phase"])]
        pit: bool,
        #[arg(long, requires = "pit")]
        eos: Option<u32>,
        #[arg(long, requires = "pit")]
        phase: Option<PitPhase>,
    },
}

#[derive(Args)]
#[command(group(ArgGroup::new("fitness").required(true).args(["evaluator", "target"])))]
struct EvolveArgs {
    #[arg(long)]
    template: PathBuf,
    /// Shell command scoring `{model}`; must print {"scores": {...}}.
    #[arg(long)]
    evaluator: Option<String>,
    /// Checkpoint to approach; fitness is the negative L2 distance to it.
    #[arg(long)]
    target: Option<PathBuf>,
    #[arg(long)]
    budget: Option<usize>,
    #[arg(long)]
    population: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    state: Option<PathBuf>,
    #[arg(long, requires = "state")]
    resume: bool,
    #[arg(long)]
    keep_candidates: bool,
    /// Seconds before an evaluator run is killed.
    #[arg(long, default_value_t = 3600.0)]
    timeout: f64,
    #[arg(long, default_value_t = 1)]
    parallel_evals: usize,
    /// Hold a gene fixed, e.g. `lambda=1` or `weight0=0.5`.
    #[arg(long = "pin", value_parser = parse_pin)]
    pins: Vec<(String, f64)>,
    /// JSON object of per-dataset weights for the score mean.
    #[arg(long)]
    dataset_weights: Option<PathBuf>,
    #[arg(long, default_value = "best_recipe.json")]
    best: PathBuf,
    #[arg(long, default_value = "history.json")]
    history: PathBuf,
}

fn parse_pin(s: &str) -> Result<(String, f64), String> {
    let (name, value) = s.split_once('=').ok_or("expected GENE=VALUE")?;
    name.parse::<mergeforge::recipe::Gene>()?;
    let v: f64 = value.parse().map_err(|e| format!("{value:?}: {e}"))?;
    Ok((name.to_string(), v))
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let level = match (cli.quiet, cli.verbose) {
        (true, _) => log::LevelFilter::Error,
        (false, 0) => log::LevelFilter::Warn,
        (false, 1) => log::LevelFilter::Info,
        (false, 2) => log::LevelFilter::Debug,
        _ => log::LevelFilter::Trace,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .parse_default_env()
        .target(env_logger::Target::Stderr)
        .init();
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring thread pool")?;
    }

    match cli.command {
        Command::Inspect { path, json } => inspect(&path, json),
        Command::Merge {
            recipe,
            out,
            allow_missing,
            dry_run,
        } => merge(&recipe, out.as_deref(), allow_missing, dry_run),
        Command::Evolve(args) => evolve(args),
        Command::Stats {
            scores,
            baseline,
            candidates,
            format,
            population_variance,
        } => stats(&scores, &baseline, &candidates, format, population_variance),
        Command::Pack {
            input,
            capacity,
            out,
            pit,
            eos,
            phase,
        } => pack(&input, capacity, &out, pit.then(|| (eos.unwrap_or(0), phase.unwrap_or(PitPhase::TaskOnly)))),
    }
}

fn header_of(path: &Path) -> Result<Header> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let len = file.metadata()?.len();
    read_header(&mut BufReader::new(file), len).with_context(|| format!("reading {}", path.display()))
}

fn inspect(path: &Path, json: bool) -> Result<()> {
    let header = header_of(path)?;
    let mut out = std::io::stdout().lock();
    if json {
        let tensors: Vec<serde_json::Value> = header
            .tensors
            .iter()
            .map(|t| {
                serde_json::json!({
                    "name": t.name,
                    "dtype": t.dtype.as_str(),
                    "shape": t.shape,
                    "data_offsets": [t.data_offsets.0, t.data_offsets.1],
                    "bytes": t.byte_len(),
                })
            })
            .collect();
        let doc = serde_json::json!({
            "tensors": tensors,
            "metadata": header.metadata,
            "total_tensors": header.tensors.len(),
            "total_elements": header.tensors.iter().map(|t| t.num_elements()).sum::<u64>(),
            "total_bytes": header.data_len,
        });
        writeln!(out, "{}", serde_json::to_string_pretty(&doc)?)?;
        return Ok(());
    }
    let width = header.tensors.iter().map(|t| t.name.len()).max().unwrap_or(4).max(4);
    writeln!(out, "{:<width$}  {:<5}  {:<16}  {:>12}", "name", "dtype", "shape", "bytes")?;
    for t in &header.tensors {
        let shape = format!("{:?}", t.shape);
        writeln!(out, "{:<width$}  {:<5}  {:<16}  {:>12}", t.name, t.dtype.as_str(), shape, t.byte_len())?;
    }
    writeln!(
        out,
        "total: {} tensors, {} elements, {} bytes",
        header.tensors.len(),
        header.tensors.iter().map(|t| t.num_elements()).sum::<u64>(),
        header.data_len
    )?;
    Ok(())
}

/// Checks checkpoint headers against each other without reading tensor data.
fn check_headers(recipe: &mergeforge::MergeRecipe, source: &FsCheckpoints) -> Result<usize> {
    let base = header_of(&source.resolve(&recipe.base))?;
    let shapes: BTreeMap<&str, &Vec<u64>> = base.tensors.iter().map(|t| (t.name.as_str(), &t.shape)).collect();
    for e in &recipe.experts {
        let h = header_of(&source.resolve(&e.path))?;
        let names: BTreeMap<&str, &Vec<u64>> = h.tensors.iter().map(|t| (t.name.as_str(), &t.shape)).collect();
        for (name, shape) in &shapes {
            match names.get(name) {
                Some(s) if s != shape => bail!("{}: tensor {name:?} has shape {s:?}, base has {shape:?}", e.path),
                None if !recipe.allow_missing => bail!("{}: missing tensor {name:?}", e.path),
                _ => {}
            }
        }
        if let Some(extra) = names.keys().find(|n| !shapes.contains_key(*n)) {
            if !recipe.allow_missing {
                bail!("{}: tensor {extra:?} is not in the base", e.path);
            }
        }
    }
    Ok(base.tensors.len())
}

fn describe_method(plan: &MethodPlan) -> String {
    match plan {
        MethodPlan::Slerp(p) => format!("slerp t={} overrides={:?}", p.t, p.overrides),
        MethodPlan::TaskArithmetic { weights, lambda } => format!("task_arithmetic weights={weights:?} lambda={lambda}"),
        MethodPlan::Ties(p) => format!("ties weights={:?} density={} lambda={}", p.weights, p.density, p.lambda),
        MethodPlan::Breadcrumbs(p) => format!(
            "breadcrumbs weights={:?} beta_top={} gamma_bottom={} lambda={}",
            p.weights, p.beta_top, p.gamma_bottom, p.lambda
        ),
    }
}

fn merge(recipe_path: &Path, out: Option<&Path>, allow_missing: bool, dry_run: bool) -> Result<()> {
    let mut recipe = load_recipe(recipe_path)?;
    recipe.allow_missing |= allow_missing;
    let plan = recipe.plan();
    let source = FsCheckpoints::cached(recipe.root_dir());
    let mut stdout = std::io::stdout().lock();
    writeln!(stdout, "seed: {}", recipe.seed)?;
    if dry_run {
        let tensors = check_headers(&recipe, &source)?;
        writeln!(stdout, "tensors: {tensors}")?;
        writeln!(stdout, "method: {}", describe_method(&plan.method))?;
        if let Some(d) = plan.dare {
            writeln!(stdout, "dare: drop_p={} seed={}", d.drop_p, d.seed)?;
        }
        writeln!(stdout, "output_dtype: {:?}", recipe.output_dtype)?;
        return Ok(());
    }
    let out = out.context("--out is required")?;
    let mut merged = merge_model(&recipe, &source)?;
    let meta = merged.metadata.get_or_insert_with(BTreeMap::new);
    meta.insert("mergeforge.method".into(), recipe.method.to_string());
    meta.insert("mergeforge.seed".into(), recipe.seed.to_string());
    store_weights(&merged, out, recipe.output_dtype)?;
    writeln!(stdout, "method: {}", describe_method(&plan.method))?;
    writeln!(stdout, "wrote {} tensors to {}", merged.len(), out.display())?;
    Ok(())
}

fn evolve(args: EvolveArgs) -> Result<()> {
    let template = load_recipe(&args.template)?;
    let root = template.root_dir();

    let state = match (&args.state, args.resume) {
        (Some(path), true) => {
            let state = resume_search(path)?;
            let c = &state.config;
            for (flag, given, saved) in [
                ("--budget", args.budget.map(|v| v as u64), c.budget as u64),
                ("--population", args.population.map(|v| v as u64), c.population_size as u64),
                ("--seed", args.seed, c.seed),
            ] {
                if given.is_some_and(|g| g != saved) {
                    bail!("{flag} differs from the saved search ({saved})");
                }
            }
            Some(state)
        }
        _ => None,
    };
    let mut search = match state {
        Some(s) => Search::from_state(template.clone(), s)?,
        None => Search::new(
            template.clone(),
            SearchConfig {
                budget: args.budget.unwrap_or(500),
                population_size: args.population.unwrap_or(20),
                seed: args.seed.unwrap_or(0),
                pins: args.pins.clone(),
            },
        )?,
    };

    let evaluator: Box<dyn Evaluator> = match (&args.evaluator, &args.target) {
        (Some(cmd), None) => {
            if !cmd.contains(mergeforge::evolve::MODEL_PLACEHOLDER) {
                log::warn!("evaluator command has no {{model}} placeholder");
            }
            if args.timeout <= 0.0 {
                bail!("--timeout must be positive");
            }
            let mut ev = ExternalCommand::new(cmd.clone(), &root);
            ev.timeout = Duration::from_secs_f64(args.timeout);
            ev.parallel_evals = args.parallel_evals.max(1);
            ev.keep_candidates = args.keep_candidates;
            if let Some(p) = &args.dataset_weights {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                ev.dataset_weights = Some(serde_json::from_str(&text).context("dataset weights")?);
            }
            std::fs::create_dir_all(&ev.scratch)?;
            Box::new(ev)
        }
        (None, Some(target)) => Box::new(SyntheticTarget::from_path(target, &root)?),
        _ => unreachable!("clap enforces exactly one"),
    };
    mergeforge::evolve::evaluator::check_template_paths(&template, &FsCheckpoints::new(&root))
        .context("template checkpoints")?;

    let config = search.state().config.clone();
    eprintln!(
        "evolve: seed {} budget {} population {} (generation {})",
        config.seed,
        config.budget,
        config.population_size,
        search.state().generation
    );
    let outcome = search.run(evaluator.as_ref(), args.state.as_deref())?;

    let best = outcome.best_recipe.to_json();
    std::fs::write(&args.best, serde_json::to_string_pretty(&best)? + "\n")
        .with_context(|| format!("writing {}", args.best.display()))?;
    let history = serde_json::json!({
        "seed": config.seed,
        "budget": config.budget,
        "population": config.population_size,
        "evaluations": search.state().evaluations_used,
        "entries": outcome.history,
    });
    std::fs::write(&args.history, serde_json::to_string_pretty(&history)? + "\n")
        .with_context(|| format!("writing {}", args.history.display()))?;
    if let Some(path) = &args.state {
        checkpoint_search(search.state(), path)?;
    }

    let mut stdout = std::io::stdout().lock();
    writeln!(stdout, "seed: {}", config.seed)?;
    writeln!(stdout, "evaluations: {}", search.state().evaluations_used)?;
    writeln!(stdout, "best fitness: {}", outcome.best_fitness)?;
    writeln!(stdout, "best recipe: {}", args.best.display())?;
    Ok(())
}

fn stats(scores: &Path, baseline: &str, candidates: &[String], format: ReportFormat, population: bool) -> Result<()> {
    let text = std::fs::read_to_string(scores).with_context(|| format!("reading {}", scores.display()))?;
    let table = ScoreTable::from_json(&text)?;
    let form = if population {
        VarianceForm::Population
    } else {
        VarianceForm::Sample
    };
    let reports = candidates
        .iter()
        .map(|c| gain_report_with(&table, baseline, c, form))
        .collect::<Result<Vec<_>, _>>()?;
    print!("{}", render_report(&reports, format));
    Ok(())
}

fn pack(input: &Path, capacity: usize, out: &Path, pit: Option<(u32, PitPhase)>) -> Result<()> {
    let reader = BufReader::new(File::open(input).with_context(|| format!("opening {}", input.display()))?);
    let sequences = match pit {
        Some((eos, phase)) => {
            let records: Vec<PitRecord> = read_jsonl(reader)?;
            pit_groups(&records, eos, phase)?
        }
        None => read_sequences(reader)?,
    };
    let blocks = best_fit_pack(&sequences, capacity)?;
    let file = File::create(out).with_context(|| format!("creating {}", out.display()))?;
    let mut writer = BufWriter::new(file);
    write_blocks(&mut writer, &blocks)?;
    writer.flush()?;
    let tokens: usize = blocks.iter().map(|b| b.fill()).sum();
    println!(
        "packed {} sequences ({tokens} tokens) into {} blocks of {capacity}",
        sequences.len(),
        blocks.len()
    );
    Ok(())
}
