use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use vgrl_core::engine::{
    self, Ablation, Checkpoint, Clients, CotKind, OptimizerPolicy, RunConfig, Session, Transcript,
    VerbalParameters,
};
use vgrl_core::eval;
use vgrl_core::graph::{self, DatasetFormat, Split};
use vgrl_core::prompting::DEFAULT_CORA_PRIOR;
use vgrl_core::theory;

#[derive(Parser)]
#[command(
    name = "vgrl",
    version,
    about = "Learn natural-language class descriptions on text-attributed graphs"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a JSON-lines dataset and write it back in canonical form.
    Ingest {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        /// Where to write the normalized dataset; validation only if absent.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Run the optimization loop described by a config file.
    Run {
        #[command(flatten)]
        common: ConfigArgs,
        /// Stop after this many steps; continue later with `resume`.
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Continue a run from one of its checkpoints.
    Resume {
        #[command(flatten)]
        common: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Score an exported set of class descriptions on the test split.
    Evaluate {
        #[command(flatten)]
        common: ConfigArgs,
        #[arg(long)]
        theta: PathBuf,
        /// Also write the confusion matrix here.
        #[arg(long)]
        confusion: Option<PathBuf>,
    },
    /// Run every ablation variant over zero/one-shot and with/without prior.
    Ablate {
        #[command(flatten)]
        common: ConfigArgs,
        /// Variants to run (default: all three).
        #[arg(long = "variant", value_parser = parse_ablation)]
        variants: Vec<Ablation>,
    },
    /// Print the class descriptions stored in a checkpoint.
    Inspect {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Show what changed relative to the previous step's checkpoint.
        #[arg(long)]
        diff: bool,
    },
    /// Check the description-usefulness entropy bound on random joints.
    TheoryCheck {
        #[arg(long, default_value_t = 1000)]
        trials: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        json: bool,
    },
}

/// Config file plus field-by-field overrides.
#[derive(Args)]
struct ConfigArgs {
    #[arg(long)]
    config: PathBuf,
    /// `scripted:<file>` points every role at a script file.
    #[arg(long)]
    backend: Option<String>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    num_steps: Option<usize>,
    #[arg(long)]
    eval_every: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    hop_count: Option<usize>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    node_only: bool,
    #[arg(long, value_parser = parse_ablation)]
    ablation: Option<Ablation>,
    #[arg(long, value_parser = parse_cot)]
    cot: Option<CotKind>,
    #[arg(long)]
    prior: Option<PathBuf>,
    #[arg(long)]
    errors_only: bool,
    #[arg(long)]
    split_seed: Option<u64>,
    #[arg(long)]
    batch_seed: Option<u64>,
}

fn parse_ablation(s: &str) -> Result<Ablation, String> {
    s.parse()
}

fn parse_cot(s: &str) -> Result<CotKind, String> {
    match s {
        "zero-shot" => Ok(CotKind::ZeroShot),
        "one-shot" => Ok(CotKind::OneShot),
        other => Err(format!("unknown cot mode `{other}` (zero-shot | one-shot)")),
    }
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut c = RunConfig::load(&self.config)?;
        if let Some(b) = &self.backend {
            match b.split_once(':') {
                Some(("scripted", file)) => c.use_script(Path::new(file)),
                _ => bail!("unsupported --backend `{b}` (expected scripted:<file>)"),
            }
        }
        if let Some(v) = &self.output_dir {
            c.output_dir = v.clone();
        }
        if let Some(v) = self.num_steps {
            c.num_steps = v;
        }
        if let Some(v) = self.eval_every {
            c.eval_every = v;
        }
        if let Some(v) = self.batch_size {
            c.batch_size = v;
        }
        if let Some(v) = self.hop_count {
            c.hop_count = v;
        }
        if let Some(v) = self.temperature {
            c.temperature = v;
        }
        if let Some(v) = self.ablation {
            c.ablation = v;
        }
        if let Some(v) = self.cot {
            c.cot = v;
        }
        if let Some(v) = &self.prior {
            c.prior = Some(v.clone());
        }
        if let Some(v) = self.split_seed {
            c.seeds.split = v;
        }
        if let Some(v) = self.batch_seed {
            c.seeds.batch = v;
        }
        c.node_only |= self.node_only;
        if self.errors_only {
            c.optimizer_policy = OptimizerPolicy::ErrorsOnly;
        }
        c.validate()?;
        Ok(c)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn dispatch(command: Command) -> Result<ExitCode> {
    match command {
        Command::Ingest {
            input,
            labels,
            output,
        } => ingest(&input, &labels, output.as_deref())?,
        Command::Run { common, stop_after } => {
            let mut config = common.load()?;
            config.stop_after = stop_after;
            run(&config)?;
        }
        Command::Resume { common, checkpoint } => {
            let config = common.load()?;
            let graph = config.prepare_graph()?;
            let clients = Clients::connect(&config)?;
            let ckpt = Checkpoint::load(&checkpoint)?;
            let outcome = engine::resume(&config, &graph, &clients, ckpt)?;
            report_outcome(&outcome);
        }
        Command::Evaluate {
            common,
            theta,
            confusion,
        } => evaluate(&common.load()?, &theta, confusion.as_deref())?,
        Command::Ablate { common, variants } => ablate(&common.load()?, variants)?,
        Command::Inspect { checkpoint, diff } => inspect(&checkpoint, diff)?,
        Command::TheoryCheck { trials, seed, json } => {
            let report = theory::run_suite(trials, seed);
            if json {
                println!("{}", serde_json::to_string_pretty(&report)?);
            } else {
                print!("{}", report.to_table());
            }
            if !report.passed() {
                return Ok(ExitCode::from(1));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn ingest(input: &Path, labels: &Path, output: Option<&Path>) -> Result<()> {
    let label_set = graph::load_labels(labels)?;
    let g = graph::load_graph(input, label_set, DatasetFormat::JsonLines)?;
    let labeled = g.nodes().iter().filter(|n| n.label.is_some()).count();
    println!(
        "{} nodes ({} labeled), {} undirected edges, {} classes",
        g.len(),
        labeled,
        g.num_edges(),
        g.labels().len()
    );
    if let Some(out) = output {
        let mut buf = Vec::new();
        g.write_jsonl(&mut buf)?;
        std::fs::write(out, buf).with_context(|| format!("writing {}", out.display()))?;
        println!("wrote {}", out.display());
    }
    Ok(())
}

fn run(config: &RunConfig) -> Result<engine::RunOutcome> {
    let graph = config.prepare_graph()?;
    let clients = Clients::connect(config)?;
    let outcome = engine::run(config, &graph, &clients)?;
    report_outcome(&outcome);
    Ok(outcome)
}

fn report_outcome(outcome: &engine::RunOutcome) {
    if let Some(last) = outcome.metrics.last() {
        println!("step {}: test accuracy {:.3}", last.step, last.accuracy);
    }
    if outcome.completed {
        println!(
            "final descriptions: {}",
            outcome.layout.final_theta().display()
        );
    } else {
        println!(
            "stopped early; resume from {}",
            outcome.last_checkpoint.display()
        );
    }
}

fn evaluate(config: &RunConfig, theta_path: &Path, confusion: Option<&Path>) -> Result<()> {
    let graph = config.prepare_graph()?;
    let clients = Clients::connect(config)?;
    let text = std::fs::read_to_string(theta_path)
        .with_context(|| format!("reading {}", theta_path.display()))?;
    let theta = VerbalParameters::from_text(&text, graph.labels(), config.max_desc_words)?;
    let mut session = Session::new(config, &graph, &clients, Transcript::in_memory())?;
    let (record, matrix) = eval::evaluate_theta(&mut session, &theta)?;
    println!(
        "accuracy {:.6} on {} test nodes ({} invalid)",
        record.accuracy,
        graph.nodes_in_split(Split::UnlabeledTest).len(),
        record.num_invalid
    );
    if let Some(path) = confusion {
        eval::emit_confusion(&matrix, path)?;
    }
    Ok(())
}

fn ablate(base: &RunConfig, variants: Vec<Ablation>) -> Result<()> {
    let variants = if variants.is_empty() {
        vec![Ablation::None, Ablation::NoOptimizer, Ablation::NoSummary]
    } else {
        variants
    };
    let root = base.output_dir.clone();
    std::fs::create_dir_all(&root).with_context(|| format!("creating {}", root.display()))?;
    let prior = match &base.prior {
        Some(p) => p.clone(),
        None => {
            let p = root.join("prior.txt");
            std::fs::write(&p, DEFAULT_CORA_PRIOR)?;
            p
        }
    };
    let mut rows = Vec::new();
    for variant in variants {
        let mut cells = Vec::new();
        for cot in [CotKind::ZeroShot, CotKind::OneShot] {
            for with_prior in [false, true] {
                let mut c = base.clone();
                c.ablation = variant;
                c.cot = cot;
                c.prior = with_prior.then(|| prior.clone());
                let name = format!(
                    "{}-{}-{}",
                    ablation_name(variant),
                    cot_name(cot),
                    if with_prior { "prior" } else { "no-prior" }
                );
                c.output_dir = root.join(&name);
                info!("ablation cell {name}");
                let outcome = run(&c).with_context(|| format!("ablation cell {name}"))?;
                let acc = outcome.metrics.last().map_or(f64::NAN, |m| m.accuracy);
                cells.push(acc);
            }
        }
        rows.push((variant, cells));
    }
    let mut table = String::from(
        "variant,zero-shot/no-prior,zero-shot/prior,one-shot/no-prior,one-shot/prior\n",
    );
    for (variant, cells) in &rows {
        table.push_str(ablation_name(*variant));
        for a in cells {
            table.push_str(&format!(",{a:.3}"));
        }
        table.push('\n');
    }
    let path = root.join("ablation.csv");
    std::fs::write(&path, &table)?;
    print!("{table}");
    Ok(())
}

fn ablation_name(a: Ablation) -> &'static str {
    match a {
        Ablation::None => "full",
        Ablation::NoOptimizer => "no-optimizer",
        Ablation::NoSummary => "no-summary",
    }
}

fn cot_name(c: CotKind) -> &'static str {
    match c {
        CotKind::ZeroShot => "zero-shot",
        CotKind::OneShot => "one-shot",
    }
}

fn inspect(path: &Path, diff: bool) -> Result<()> {
    let ckpt = Checkpoint::load(path)?;
    let theta = &ckpt.theta;
    println!("step {} ({:?})", theta.step, theta.origin);
    if !diff {
        for c in &theta.per_class {
            println!("\n[{}]\n{}", c.label, c.description);
        }
        return Ok(());
    }
    if theta.step == 0 {
        bail!("step 0 has no predecessor to diff against");
    }
    let prev_path = Checkpoint::sibling(path, theta.step - 1);
    let prev = Checkpoint::load(&prev_path)?.theta;
    let mut changed = 0;
    for c in &theta.per_class {
        let before = prev.get(&c.label).unwrap_or_default();
        if before == c.description {
            continue;
        }
        changed += 1;
        println!("\n[{}]\n- {}\n+ {}", c.label, before, c.description);
    }
    println!(
        "\n{changed} of {} classes changed since step {}",
        theta.per_class.len(),
        prev.step
    );
    Ok(())
}
