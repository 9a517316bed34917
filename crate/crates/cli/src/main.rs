use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use kgstory::io::{read_jsonl_file, read_to_string, write_json, write_jsonl};
use kgstory::kg::KnowledgeGraph;
use kgstory::lm::NGramModel;
use kgstory::neural::{
    grad_check, GradCheckReport, ObjectFeature, StoryExample, StoryModel, TermExample, TermModel, Vocab,
};
use kgstory::pipeline::{self, config::PipelineConfig, Enrichment};
use kgstory::synth::{ToyConfig, ToyWorld};
use kgstory::terms::{Lexicon, Story, TermSet};
use kgstory::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

const RECORD_FORMAT_VERSION: u32 = 1;

#[derive(Parser)]
#[command(
    name = "kgstory",
    version,
    about = "Visual storytelling through knowledge-graph enriched term paths"
)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Config file of `section.key = value` lines; relative paths resolve
    /// against its directory.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set decode.beam_width=5`. Applied after
    /// the file and the environment.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Load tuple files into the graph snapshot.
    IngestKg,
    /// Train the n-gram model over gold term paths.
    TrainLm,
    /// Train the image-to-term model.
    TrainTermModel,
    /// Train the term-to-story model.
    TrainGenerator,
    /// Decode a term set for every image of every input sequence.
    Distill {
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Build and score candidate paths for distilled term sets.
    Enrich {
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Generate stories from the selected paths of an enrichment file.
    Generate {
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Distill, enrich and generate in one pass, writing stories and the
    /// audit bundle.
    Run,
    /// Score generated stories against references with matching ids.
    Eval {
        #[arg(long)]
        generated: Option<PathBuf>,
        #[arg(long)]
        references: Option<PathBuf>,
    },
    /// Finite-difference check of both models at the configured shape.
    GradCheck {
        /// Entries sampled per parameter tensor.
        #[arg(long, default_value_t = 20)]
        samples: usize,
        #[arg(long, default_value_t = 1e-5)]
        epsilon: f64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
    /// Print every config key with its default and description.
    DefaultConfig,
    /// Write a small synthetic corpus, feature file, tuple file and a config
    /// sized to memorize them.
    ToyWorld { dir: PathBuf },
}

const TOY_CONFIG: &str = "\
paths.lexicon = lexicon.tsv
paths.stories = stories.jsonl
paths.mentions = mentions.jsonl
paths.text_stories = text_stories.jsonl
paths.features = features.jsonl
paths.kg_visual_genome = tuples.tsv
model.d_model = 32
model.heads = 2
model.layers = 1
model.ff_dim = 64
model.d_in = 8
model.top_k = 3
model.learning_rate = 0.005
model.warmup_steps = 200
model.max_len = 64
train.term_epochs = 60
train.story_epochs = 60
train.text_weight = 3
decode.max_len = 40
";

#[derive(Serialize, Deserialize)]
struct TermSetsRecord {
    format_version: u32,
    story_id: String,
    term_sets: Vec<TermSet>,
}

#[derive(Serialize, Deserialize)]
struct EnrichmentRecord {
    format_version: u32,
    story_id: String,
    enrichment: Enrichment,
}

fn load_config(global: &Global) -> Result<PipelineConfig> {
    let cwd = std::env::current_dir().map_err(|e| Error::io(".", e))?;
    let (text, base) = match &global.config {
        Some(path) => {
            if !path.exists() {
                return Err(Error::MissingPath(path.clone()));
            }
            (
                read_to_string(path)?,
                path.parent().unwrap_or(Path::new(".")).to_path_buf(),
            )
        }
        None => (String::new(), cwd.clone()),
    };
    let mut cfg = PipelineConfig::parse(&text, &base, |name| std::env::var(name).ok())?;
    for item in &global.overrides {
        let (key, value) = item
            .split_once('=')
            .ok_or_else(|| Error::config(format!("--set expects KEY=VALUE, got {item:?}")))?;
        cfg.set(key.trim(), value.trim(), &cwd)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn output_file(cfg: &PipelineConfig, given: &Option<PathBuf>, name: &str) -> Result<PathBuf> {
    let path = given.clone().unwrap_or_else(|| cfg.paths.output_dir.join(name));
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(path)
}

fn input_file(cfg: &PipelineConfig, given: &Option<PathBuf>, name: &str) -> Result<PathBuf> {
    let path = given.clone().unwrap_or_else(|| cfg.paths.output_dir.join(name));
    PipelineConfig::require(&[&path])?;
    Ok(path)
}

fn print_json(value: &impl Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn ingest(cfg: &PipelineConfig) -> Result<()> {
    let kg = pipeline::build_graph(cfg)?;
    kg.save(&cfg.paths.graph)?;
    println!("{} tuples -> {}", kg.tuple_count(), cfg.paths.graph.display());
    Ok(())
}

fn train_lm(cfg: &PipelineConfig) -> Result<()> {
    let lm = pipeline::train_lm(cfg)?;
    lm.save(&cfg.paths.lm)?;
    println!(
        "order {} model over {} tokens -> {}",
        cfg.lm.order,
        lm.predictable_size(),
        cfg.paths.lm.display()
    );
    Ok(())
}

fn report_history(history: &[f64], path: &Path) {
    match history.last() {
        Some(loss) => println!(
            "{} epochs, final loss {loss:.4} nats/token -> {}",
            history.len(),
            path.display()
        ),
        None => println!("0 epochs -> {}", path.display()),
    }
}

fn distill(cfg: &PipelineConfig, output: &Option<PathBuf>) -> Result<()> {
    let features = cfg.paths.inference_features();
    PipelineConfig::require(&[features, &cfg.paths.term_model])?;
    let model = TermModel::load(&cfg.paths.term_model, Some(&cfg.model))?;
    let mut records = Vec::new();
    for seq in pipeline::load_images(features, cfg.model.top_k)? {
        let distilled = pipeline::distill(&model, &seq.objects, &cfg.decode, cfg.max_terms)?;
        records.push(TermSetsRecord {
            format_version: RECORD_FORMAT_VERSION,
            story_id: seq.story_id,
            term_sets: distilled.term_sets,
        });
    }
    let path = output_file(cfg, output, "termsets.jsonl")?;
    write_jsonl(&path, &records)?;
    println!("{} sequences -> {}", records.len(), path.display());
    Ok(())
}

fn enrich(cfg: &PipelineConfig, input: &Option<PathBuf>, output: &Option<PathBuf>) -> Result<()> {
    let input = input_file(cfg, input, "termsets.jsonl")?;
    let mut needed = vec![cfg.paths.lexicon.as_path(), cfg.paths.lm.as_path()];
    if cfg.enrich_enabled {
        needed.push(&cfg.paths.graph);
    }
    PipelineConfig::require(&needed)?;
    let lexicon = Lexicon::load(&cfg.paths.lexicon)?;
    let lm = NGramModel::load(&cfg.paths.lm)?;
    let graph = if cfg.enrich_enabled {
        Some(KnowledgeGraph::load(&cfg.paths.graph)?)
    } else {
        None
    };
    let sets: Vec<TermSetsRecord> = read_jsonl_file(&input)?;
    let mut records = Vec::with_capacity(sets.len());
    let mut enriched = 0;
    for r in sets {
        let enrichment = pipeline::enrich(&r.term_sets, graph.as_ref(), &lm, &lexicon, &cfg.enrich)?;
        if enrichment.selected_path().insertion_count > 0 {
            enriched += 1;
        }
        records.push(EnrichmentRecord {
            format_version: RECORD_FORMAT_VERSION,
            story_id: r.story_id,
            enrichment,
        });
    }
    let path = output_file(cfg, output, "enrichments.jsonl")?;
    write_jsonl(&path, &records)?;
    println!(
        "{} sequences, {enriched} with an inserted segment -> {}",
        records.len(),
        path.display()
    );
    Ok(())
}

fn trace_name(story_id: &str) -> String {
    let safe: String = story_id
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect();
    format!("{safe}.jsonl")
}

fn generate(cfg: &PipelineConfig, input: &Option<PathBuf>, output: &Option<PathBuf>) -> Result<()> {
    let input = input_file(cfg, input, "enrichments.jsonl")?;
    PipelineConfig::require(&[&cfg.paths.story_model])?;
    let model = StoryModel::load(&cfg.paths.story_model, Some(&cfg.model))?;
    let records: Vec<EnrichmentRecord> = read_jsonl_file(&input)?;
    let path = output_file(cfg, output, "stories.jsonl")?;
    let trace_dir = path.with_file_name("traces");
    std::fs::create_dir_all(&trace_dir).map_err(|e| Error::io(&trace_dir, e))?;
    let mut stories: Vec<Story> = Vec::with_capacity(records.len());
    for r in &records {
        let generated = pipeline::generate(&model, &r.story_id, r.enrichment.selected_path(), &cfg.decode)?;
        generated.output.write_trace(&trace_dir.join(trace_name(&r.story_id)))?;
        stories.push(generated.story);
    }
    write_jsonl(&path, &stories)?;
    println!(
        "{} stories -> {} (traces in {})",
        stories.len(),
        path.display(),
        trace_dir.display()
    );
    Ok(())
}

fn run(cfg: &PipelineConfig) -> Result<()> {
    let out = pipeline::run(cfg)?;
    pipeline::write_run(&out, &cfg.paths.output_dir)?;
    println!("{} stories -> {}", out.stories.len(), cfg.paths.output_dir.display());
    Ok(())
}

fn eval(cfg: &PipelineConfig, generated: &Option<PathBuf>, references: &Option<PathBuf>) -> Result<()> {
    let generated = input_file(cfg, generated, "stories.jsonl")?;
    let references = references.clone().unwrap_or_else(|| cfg.paths.stories.clone());
    PipelineConfig::require(&[&references])?;
    let report = pipeline::evaluate_files(&generated, &references)?;
    let path = output_file(cfg, &None, "metrics.json")?;
    write_json(&path, &report)?;
    print_json(&report.corpus)
}

#[derive(Serialize)]
struct GradCheckSummary {
    epsilon: f64,
    tolerance: f64,
    term_model: GradCheckReport,
    story_model: GradCheckReport,
}

/// Small random batches sized to the configured model.
fn grad_check_batches(cfg: &PipelineConfig, rng: &mut ChaCha8Rng) -> (Vec<TermExample>, Vec<StoryExample>) {
    let terms = Vocab::build(["a_NOUN", "b_NOUN", "Go_FRAME", "c_NOUN"]);
    let ids: Vec<usize> = ["a_NOUN", "b_NOUN", "Go_FRAME", "c_NOUN"]
        .iter()
        .map(|t| terms.id(t))
        .collect();
    let term_batch = (0..2)
        .map(|_| TermExample {
            objects: (1..=5)
                .flat_map(|order| (0..2).map(move |_| order))
                .map(|order| ObjectFeature {
                    vector: (0..cfg.model.d_in).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                    confidence: 0.5,
                    order,
                })
                .collect(),
            targets: (0..5).map(|i| vec![ids[i % 4], ids[(i + 1) % 4]]).collect(),
        })
        .collect();
    let story_batch = (0..2)
        .map(|_| StoryExample {
            source: (0..4).map(|_| ids[rng.gen_range(0..3)]).collect(),
            target: (0..6).map(|_| ids[rng.gen_range(0..4)]).collect(),
        })
        .collect();
    (term_batch, story_batch)
}

fn run_grad_check(cfg: &PipelineConfig, samples: usize, epsilon: f64, tolerance: f64) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (term_batch, story_batch) = grad_check_batches(cfg, &mut rng);
    let mut term_model = TermModel::new(&cfg.model, Vocab::build(["a_NOUN", "b_NOUN", "Go_FRAME", "c_NOUN"]))?;
    let mut story_model = StoryModel::new(
        &cfg.model,
        Vocab::build(["a_NOUN", "b_NOUN", "Go_FRAME"]),
        Vocab::build(["a", "b", "go", "."]),
    )?;
    let summary = GradCheckSummary {
        epsilon,
        tolerance,
        term_model: grad_check(&mut term_model, &term_batch, epsilon, samples, cfg.seed)?,
        story_model: grad_check(&mut story_model, &story_batch, epsilon, samples, cfg.seed)?,
    };
    print_json(&summary)?;
    let worst = summary.term_model.max_rel_error.max(summary.story_model.max_rel_error);
    if worst.is_nan() || worst >= tolerance {
        return Err(Error::Numeric(format!(
            "max relative error {worst:e} exceeds {tolerance:e}"
        )));
    }
    Ok(())
}

fn execute(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::DefaultConfig => {
            print!("{}", PipelineConfig::default_file_text());
            return Ok(());
        }
        Command::ToyWorld { dir } => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            ToyWorld::generate(&ToyConfig::default()).write(dir)?;
            let conf = dir.join("kgstory.conf");
            std::fs::write(&conf, TOY_CONFIG).map_err(|e| Error::io(&conf, e))?;
            println!("toy world -> {} (config {})", dir.display(), conf.display());
            return Ok(());
        }
        _ => {}
    }
    let cfg = load_config(&cli.global)?;
    match &cli.command {
        Command::IngestKg => ingest(&cfg),
        Command::TrainLm => train_lm(&cfg),
        Command::TrainTermModel => {
            let (model, history) = pipeline::train_term_model(&cfg)?;
            model.save(&cfg.paths.term_model)?;
            report_history(&history, &cfg.paths.term_model);
            Ok(())
        }
        Command::TrainGenerator => {
            let (model, history) = pipeline::train_generator(&cfg)?;
            model.save(&cfg.paths.story_model)?;
            report_history(&history, &cfg.paths.story_model);
            Ok(())
        }
        Command::Distill { output } => distill(&cfg, output),
        Command::Enrich { input, output } => enrich(&cfg, input, output),
        Command::Generate { input, output } => generate(&cfg, input, output),
        Command::Run => run(&cfg),
        Command::Eval { generated, references } => eval(&cfg, generated, references),
        Command::GradCheck {
            samples,
            epsilon,
            tolerance,
        } => run_grad_check(&cfg, *samples, *epsilon, *tolerance),
        Command::DefaultConfig | Command::ToyWorld { .. } => unreachable!("handled above"),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
