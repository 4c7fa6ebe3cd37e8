// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeSet;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use headpursuit::evaluation::{self, EvalError, MetricReport};
use headpursuit::head_analysis::{
    self, restrict_dictionary, AnalysisError, ConceptDictionary, HeadActivationSet, HeadId, ScoringMethod,
};
use headpursuit::io::{self, config::ConfigError, DType, FormatError, RunConfig};
use headpursuit::sparse_recovery::{self, Dictionary, SparseError};
use headpursuit::toy_transformer::{
    capture_head_outputs_with, generate_greedy, study_config, CaptureRequest, InterventionSpec, ModelBundle,
    ModelError, PlantedFixture, STUDY_EVAL_PROMPTS, STUDY_PROMPT_WORDS, STUDY_SEED, STUDY_SELECTION_PROMPTS,
    STUDY_STRENGTH,
};

const EXIT_USAGE: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_NUMERICAL: u8 = 4;

#[derive(Parser)]
#[command(
    name = "headpursuit",
    version,
    about = "Find and steer concept-specialized attention heads"
)]
struct Cli {
    /// `key = value` run configuration; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Score and rank every head against a keyword-restricted dictionary.
    Rank(RankArgs),
    /// Sample random head sets matching a selection's per-layer counts.
    Control(ControlArgs),
    /// Generate with a toy model under per-head scales.
    Intervene(IntervArgs),
    /// Compute a metric report from generation files.
    Eval(EvalArgs),
    /// Run the pursuit on one head and print its support.
    Decompose(DecomposeArgs),
    /// Print the sections of a tensor file.
    Inspect { file: PathBuf },
    /// Capture per-head activations from a toy model.
    Capture(CaptureArgs),
    /// Write a planted-head toy study to a directory.
    Fixture(FixtureArgs),
}

#[derive(Args)]
struct AnalysisInputs {
    /// Activation file (`act/L{l}/H{h}` sections).
    #[arg(long)]
    activations: PathBuf,
    /// Dictionary file (`dict/unembedding`, optional `dict/labels`); a model
    /// bundle works too.
    #[arg(long)]
    dictionary: PathBuf,
    /// Keyword list; falls back to the config's `keywords`.
    #[arg(long)]
    keywords: Option<PathBuf>,
}

#[derive(Args)]
struct RankArgs {
    #[command(flatten)]
    inputs: AnalysisInputs,
    #[arg(long)]
    method: Option<ScoringMethod>,
    #[arg(long)]
    n_iters: Option<usize>,
    /// Only print the first N heads.
    #[arg(long)]
    show: Option<usize>,
    /// Also list the top N dictionary tokens of each printed head, from a
    /// pursuit over the full dictionary.
    #[arg(long)]
    top_tokens: Option<usize>,
    /// Emit one JSON object per head instead of a table.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct ControlArgs {
    /// Selected heads, e.g. `L1H3,L3H5`. Without it, the top `--k` heads of
    /// a ranking over `--activations/--dictionary/--keywords` are used.
    #[arg(long, value_delimiter = ',')]
    select: Option<Vec<HeadId>>,
    #[arg(long)]
    activations: Option<PathBuf>,
    #[arg(long)]
    dictionary: Option<PathBuf>,
    #[arg(long)]
    keywords: Option<PathBuf>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    heads_per_layer: Option<usize>,
    /// Number of control sets.
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct IntervArgs {
    #[arg(long)]
    model: PathBuf,
    /// One prompt per line, tokenized on whitespace.
    #[arg(long)]
    prompts: PathBuf,
    /// Heads to rescale by `--alpha`.
    #[arg(long, value_delimiter = ',')]
    heads: Vec<HeadId>,
    #[arg(long, allow_hyphen_values = true)]
    alpha: Option<f64>,
    /// Explicit `HEAD=ALPHA` scales, e.g. `L1H3=-1`.
    #[arg(long = "scale", value_delimiter = ',')]
    scales: Vec<String>,
    #[arg(long, default_value_t = 8)]
    max_new: usize,
    /// Print prompt and continuation instead of the continuation only.
    #[arg(long)]
    full: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum MetricKind {
    KeywordCount,
    F1,
    ExactMatch,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, value_enum)]
    metric: MetricKind,
    /// Baseline generations, one per line.
    #[arg(long)]
    baseline: PathBuf,
    /// Generations under the intervention, one per line.
    #[arg(long)]
    intervened: PathBuf,
    /// Generations under random controls; one file per control run.
    #[arg(long)]
    control: Vec<PathBuf>,
    /// Reference answers (f1, exact-match), one per line.
    #[arg(long)]
    gold: Option<PathBuf>,
    #[arg(long)]
    keywords: Option<PathBuf>,
    #[arg(long)]
    name: Option<String>,
    /// Write JSON-lines records here (`-` for stdout, after the table).
    #[arg(long)]
    records: Option<PathBuf>,
}

#[derive(Args)]
struct DecomposeArgs {
    #[arg(long)]
    activations: PathBuf,
    #[arg(long)]
    dictionary: PathBuf,
    #[arg(long)]
    head: HeadId,
    #[arg(long)]
    n_iters: Option<usize>,
    /// Restrict the dictionary to these keywords first.
    #[arg(long)]
    keywords: Option<PathBuf>,
    /// Divide atom scores by atom norms during selection.
    #[arg(long)]
    normalize_atoms: bool,
    /// Print the full coefficient matrix.
    #[arg(long)]
    coefficients: bool,
}

#[derive(Args)]
struct CaptureArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    prompts: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    aggregation: Option<head_analysis::Aggregation>,
    /// Token strings counted as image tokens for `mean_image_tokens`.
    #[arg(long, value_delimiter = ',')]
    image_tokens: Vec<String>,
    #[arg(long)]
    f32: bool,
}

#[derive(Args)]
struct FixtureArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = STUDY_SEED)]
    seed: u64,
    #[arg(long, default_value_t = STUDY_STRENGTH)]
    strength: f64,
    /// Planted heads.
    #[arg(long, value_delimiter = ',', default_value = "L1H3,L3H5")]
    planted: Vec<HeadId>,
}

#[derive(Debug, thiserror::Error)]
#[error("{0}")]
struct UsageError(String);

fn usage<T>(msg: impl Into<String>) -> anyhow::Result<T> {
    Err(UsageError(msg.into()).into())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return EXIT_USAGE;
        }
        if let Some(e) = cause.downcast_ref::<SparseError>() {
            return match e {
                SparseError::ZeroSignal(_) | SparseError::NonFinite { .. } => EXIT_NUMERICAL,
                _ => EXIT_DATA,
            };
        }
        if let Some(e) = cause.downcast_ref::<AnalysisError>() {
            return match e {
                AnalysisError::Sparse(SparseError::ZeroSignal(_)) => EXIT_NUMERICAL,
                AnalysisError::KTooLarge { .. }
                | AnalysisError::ZeroK
                | AnalysisError::InsufficientPool { .. }
                | AnalysisError::HeadOutOfRange(_)
                | AnalysisError::Parse { .. } => EXIT_USAGE,
                _ => EXIT_DATA,
            };
        }
        if let Some(e) = cause.downcast_ref::<ModelError>() {
            return match e {
                ModelError::HeadOutOfRange(_) | ModelError::NonFiniteScale(_) => EXIT_USAGE,
                _ => EXIT_DATA,
            };
        }
        if let Some(e) = cause.downcast_ref::<EvalError>() {
            return match e {
                EvalError::NonFinite => EXIT_NUMERICAL,
                EvalError::EmptyInput(_) => EXIT_DATA,
            };
        }
        if cause.is::<FormatError>() || cause.is::<ConfigError>() || cause.is::<std::io::Error>() {
            return EXIT_DATA;
        }
    }
    EXIT_DATA
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = match &cli.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("reading config {}", p.display()))?,
        None => RunConfig::default(),
    };
    match cli.command {
        Command::Rank(a) => rank(&cfg, a),
        Command::Control(a) => control(&cfg, a),
        Command::Intervene(a) => intervene(&cfg, a),
        Command::Eval(a) => eval(&cfg, a),
        Command::Decompose(a) => decompose(&cfg, a),
        Command::Inspect { file } => inspect(&file),
        Command::Capture(a) => capture(&cfg, a),
        Command::Fixture(a) => fixture(a),
    }
}

fn keyword_path(flag: Option<PathBuf>, cfg: &RunConfig) -> anyhow::Result<PathBuf> {
    match flag.or_else(|| cfg.keywords.clone()) {
        Some(p) => Ok(p),
        None => usage("no keyword list: pass --keywords or set `keywords` in the config"),
    }
}

fn load_concept(dict: &Dictionary, keywords: &Path) -> anyhow::Result<ConceptDictionary> {
    let words = io::read_keywords(keywords).with_context(|| format!("reading {}", keywords.display()))?;
    if dict.labels().is_empty() {
        bail!(FormatError::MissingSection(io::LABELS_SECTION.into()));
    }
    let concept = restrict_dictionary(dict, &words, &io::vocab_from_labels(dict.labels()))?;
    if !concept.unmatched_keywords().is_empty() {
        log::warn!(
            "{} keywords matched no single token: {}",
            concept.unmatched_keywords().len(),
            concept.unmatched_keywords().join(", ")
        );
    }
    Ok(concept)
}

fn load_activations(path: &Path) -> anyhow::Result<HeadActivationSet> {
    io::read_activations(path).with_context(|| format!("reading activations {}", path.display()))
}

fn load_dictionary(path: &Path) -> anyhow::Result<Dictionary> {
    io::read_dictionary(path).with_context(|| format!("reading dictionary {}", path.display()))
}

fn support_labels(dict: &Dictionary, result: &sparse_recovery::SompResult) -> Vec<String> {
    result.support.indices().iter().map(|&j| dict.label(j)).collect()
}

fn rank(cfg: &RunConfig, a: RankArgs) -> anyhow::Result<()> {
    let acts = load_activations(&a.inputs.activations)?;
    let dict = load_dictionary(&a.inputs.dictionary)?;
    let concept = load_concept(&dict, &keyword_path(a.inputs.keywords, cfg)?)?;
    let method = a.method.unwrap_or(cfg.method);
    let n_iters = a.n_iters.unwrap_or(cfg.n_iters);
    if n_iters == 0 {
        return usage("--n-iters must be positive");
    }
    let ranking = head_analysis::rank_heads(&acts, &concept, method, n_iters)?;
    let shown = a.show.unwrap_or(ranking.ordered.len()).min(ranking.ordered.len());

    let mut out = std::io::stdout().lock();
    if !a.json {
        writeln!(
            out,
            "# method={} n_iters={} concept_atoms={} heads={}",
            ranking.method,
            ranking.n_iters,
            concept.len(),
            acts.len()
        )?;
        writeln!(out, "{:>4}  {:<8}  {:>12}", "rank", "head", "score")?;
    }
    for (i, id) in ranking.ordered.iter().take(shown).enumerate() {
        let score = ranking.scores[id];
        let tokens = match a.top_tokens {
            Some(n) if n > 0 => {
                let signal = acts.get(*id).expect("ranked head exists");
                let res = sparse_recovery::somp(signal, &dict, n.min(dict.n_atoms()))?;
                Some(support_labels(&dict, &res))
            }
            _ => None,
        };
        if a.json {
            let rec = serde_json::json!({
                "rank": i + 1, "layer": id.layer, "head": id.head, "score": score, "top_tokens": tokens,
            });
            writeln!(out, "{rec}")?;
        } else {
            write!(out, "{:>4}  {:<8}  {:>12.6}", i + 1, id.to_string(), score)?;
            if let Some(t) = tokens {
                write!(
                    out,
                    "  {}",
                    t.iter().map(|s| format!("{s:?}")).collect::<Vec<_>>().join(" ")
                )?;
            }
            writeln!(out)?;
        }
    }
    for id in &ranking.unscoreable {
        if a.json {
            writeln!(
                out,
                "{}",
                serde_json::json!({"layer": id.layer, "head": id.head, "unscoreable": true})
            )?;
        } else {
            writeln!(out, "   -  {:<8}  unscoreable", id.to_string())?;
        }
    }
    Ok(())
}

fn control(cfg: &RunConfig, a: ControlArgs) -> anyhow::Result<()> {
    let acts = match &a.activations {
        Some(p) => Some(load_activations(p)?),
        None => None,
    };
    let selected = match a.select {
        Some(s) => s,
        None => {
            let (Some(acts), Some(dict)) = (&acts, &a.dictionary) else {
                return usage("pass --select, or --activations, --dictionary and --keywords");
            };
            let dict = load_dictionary(dict)?;
            let concept = load_concept(&dict, &keyword_path(a.keywords, cfg)?)?;
            let ranking = head_analysis::rank_heads(acts, &concept, cfg.method, cfg.n_iters)?;
            head_analysis::top_k(&ranking, a.k.unwrap_or(cfg.k))?
        }
    };
    let shape = match (a.layers, a.heads_per_layer, &acts) {
        (Some(l), Some(h), _) => (l, h),
        (l, h, Some(acts)) => (l.unwrap_or(acts.n_layers()), h.unwrap_or(acts.n_heads())),
        _ => return usage("model shape unknown: pass --layers and --heads-per-layer"),
    };
    let count = a.count.unwrap_or(cfg.controls);
    let seed = a.seed.unwrap_or(cfg.seed);
    let fmt = |hs: &[HeadId]| hs.iter().map(HeadId::to_string).collect::<Vec<_>>().join(",");
    let mut out = std::io::stdout().lock();
    writeln!(out, "# selected {}", fmt(&selected))?;
    for i in 0..count as u64 {
        let c = head_analysis::sample_random_control(&selected, shape, seed.wrapping_add(i))?;
        writeln!(out, "{}", fmt(&c))?;
    }
    Ok(())
}

fn read_lines(path: &Path) -> anyhow::Result<Vec<String>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(text.lines().map(str::to_string).collect())
}

fn parse_scale(s: &str) -> anyhow::Result<(HeadId, f64)> {
    let Some((h, v)) = s.split_once('=') else {
        return usage(format!("bad --scale '{s}', expected HEAD=ALPHA"));
    };
    let alpha: f64 = match v.trim().parse() {
        Ok(a) => a,
        Err(_) => return usage(format!("bad alpha in '{s}'")),
    };
    Ok((h.parse::<HeadId>()?, alpha))
}

fn intervene(cfg: &RunConfig, a: IntervArgs) -> anyhow::Result<()> {
    let model = ModelBundle::load(&a.model).with_context(|| format!("loading model {}", a.model.display()))?;
    let alpha = a.alpha.unwrap_or(cfg.alpha);
    let mut scales: Vec<(HeadId, f64)> = a.heads.iter().map(|&h| (h, alpha)).collect();
    for s in &a.scales {
        scales.push(parse_scale(s)?);
    }
    let spec = InterventionSpec::new(scales)?;
    let mut out = std::io::stdout().lock();
    for line in read_lines(&a.prompts)? {
        if line.trim().is_empty() {
            continue;
        }
        let prompt = model.vocab.encode(&line)?;
        let seq = generate_greedy(&model, &prompt, a.max_new, &spec)?;
        let shown = if a.full { &seq[..] } else { &seq[prompt.len()..] };
        writeln!(out, "{}", model.vocab.decode(shown))?;
    }
    Ok(())
}

type Scorer = Box<dyn Fn(usize, &str) -> f64>;

fn eval(cfg: &RunConfig, a: EvalArgs) -> anyhow::Result<()> {
    let baseline = read_lines(&a.baseline)?;
    let intervened = read_lines(&a.intervened)?;
    let controls: Vec<Vec<String>> = a.control.iter().map(|p| read_lines(p)).collect::<anyhow::Result<_>>()?;

    let (name, score): (String, Scorer) = match a.metric {
        MetricKind::KeywordCount => {
            let path = keyword_path(a.keywords, cfg)?;
            let kws: BTreeSet<String> = io::read_keywords(&path)?
                .into_iter()
                .map(|k| k.to_lowercase())
                .collect();
            (
                "keyword_count".into(),
                Box::new(move |_, text| evaluation::keyword_count(text, &kws) as f64),
            )
        }
        kind @ (MetricKind::F1 | MetricKind::ExactMatch) => {
            let Some(gold) = &a.gold else {
                return usage("--gold is required for f1 and exact-match");
            };
            let gold = read_lines(gold)?;
            let n = gold.len();
            for (label, lines) in std::iter::once(("baseline", &baseline))
                .chain(std::iter::once(("intervened", &intervened)))
                .chain(controls.iter().map(|c| ("control", c)))
            {
                if lines.len() != n {
                    bail!(FormatError::Malformed(format!(
                        "{label} has {} lines, gold has {n}",
                        lines.len()
                    )));
                }
            }
            match kind {
                MetricKind::F1 => (
                    "token_f1".into(),
                    Box::new(move |i, text| evaluation::token_f1(text, &gold[i])),
                ),
                _ => (
                    "exact_match".into(),
                    Box::new(move |i, text| f64::from(u8::from(evaluation::exact_match(text, &gold[i])))),
                ),
            }
        }
    };
    let values = |lines: &[String]| -> Vec<f64> { lines.iter().enumerate().map(|(i, l)| score(i, l)).collect() };
    let control_values: Vec<Vec<f64>> = controls.iter().map(|c| values(c)).collect();
    let report = evaluation::aggregate_report(
        a.name.as_deref().unwrap_or(&name),
        &values(&baseline),
        &values(&intervened),
        &control_values,
    )?;
    emit_reports(&[report], a.records.as_deref())
}

fn emit_reports(reports: &[MetricReport], records: Option<&Path>) -> anyhow::Result<()> {
    let mut out = std::io::stdout().lock();
    write!(out, "{}", evaluation::format_table(reports))?;
    match records {
        Some(p) if p == Path::new("-") => {
            for r in reports {
                writeln!(out, "{}", r.to_json_line())?;
            }
        }
        Some(p) => {
            let mut text = String::new();
            for r in reports {
                text.push_str(&r.to_json_line());
                text.push('\n');
            }
            fs::write(p, text)?;
        }
        None => {}
    }
    Ok(())
}

fn decompose(cfg: &RunConfig, a: DecomposeArgs) -> anyhow::Result<()> {
    let acts = load_activations(&a.activations)?;
    let full = load_dictionary(&a.dictionary)?;
    let dict = match a.keywords {
        Some(k) => load_concept(&full, &k)?.restricted().clone(),
        None => full,
    };
    let Some(signal) = acts.get(a.head) else {
        return usage(format!(
            "head {} not in a {}x{} grid",
            a.head,
            acts.n_layers(),
            acts.n_heads()
        ));
    };
    if signal.frobenius_norm() <= sparse_recovery::ZERO_SIGNAL_TOL {
        bail!(SparseError::ZeroSignal(signal.frobenius_norm()));
    }
    let n_iters = a.n_iters.unwrap_or(cfg.n_iters);
    if n_iters == 0 || n_iters > dict.n_atoms() {
        return usage(format!("--n-iters must be in 1..={}", dict.n_atoms()));
    }
    let options = sparse_recovery::SompOptions {
        normalize_atoms: a.normalize_atoms,
    };
    let res = sparse_recovery::somp_with(signal, &dict, n_iters, options)?;
    let mut out = std::io::stdout().lock();
    writeln!(
        out,
        "# head {} samples={} dim={} atoms={} iterations={}{}{}",
        a.head,
        signal.n_samples(),
        signal.dim(),
        dict.n_atoms(),
        res.support.len(),
        if res.early_stopped { " early_stop" } else { "" },
        if res.rank_deficient { " rank_deficient" } else { "" },
    )?;
    writeln!(
        out,
        "{:>4}  {:>6}  {:<16}  {:>12}  {:>10}  {:>12}",
        "step", "atom", "label", "mean_coef", "expl_var", "residual"
    )?;
    for (t, &j) in res.support.indices().iter().enumerate() {
        let mean_coef = res.coefficients.column(t).mean();
        writeln!(
            out,
            "{:>4}  {:>6}  {:<16}  {:>12.6}  {:>10.6}  {:>12.6e}",
            t + 1,
            j,
            format!("{:?}", dict.label(j)),
            mean_coef,
            res.explained_variance[t],
            res.residual_norms[t]
        )?;
    }
    if a.coefficients {
        writeln!(out, "# coefficients (samples x support)")?;
        for row in res.coefficients.row_iter() {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:.6e}")).collect();
            writeln!(out, "{}", cells.join(" "))?;
        }
    }
    Ok(())
}

fn inspect(path: &Path) -> anyhow::Result<()> {
    let sections = io::read_tensor_file(path).with_context(|| format!("reading {}", path.display()))?;
    let mut out = std::io::stdout().lock();
    writeln!(
        out,
        "# {} magic=HPT1 version={} sections={}",
        path.display(),
        io::tensor_file::VERSION,
        sections.len()
    )?;
    for s in &sections {
        let dims = s.dims.iter().map(usize::to_string).collect::<Vec<_>>().join("x");
        writeln!(
            out,
            "{}\t{}\t{}",
            s.name,
            if dims.is_empty() { "scalar".into() } else { dims },
            s.dtype.name()
        )?;
    }
    Ok(())
}

fn capture(cfg: &RunConfig, a: CaptureArgs) -> anyhow::Result<()> {
    let model = ModelBundle::load(&a.model).with_context(|| format!("loading model {}", a.model.display()))?;
    let mut prompts = Vec::new();
    for line in read_lines(&a.prompts)? {
        if !line.trim().is_empty() {
            prompts.push(model.vocab.encode(&line)?);
        }
    }
    if prompts.is_empty() {
        bail!(ModelError::EmptyPrompt);
    }
    let mut request = CaptureRequest::new(a.aggregation.unwrap_or(cfg.aggregation));
    for t in &a.image_tokens {
        let Some(id) = model.vocab.id(t) else {
            return usage(format!("image token '{t}' not in vocabulary"));
        };
        request.image_token_ids.insert(id);
    }
    let acts = capture_head_outputs_with(&model, &prompts, &request, &InterventionSpec::identity())?;
    let dtype = if a.f32 { DType::F32 } else { DType::F64 };
    io::write_tensor_file(&a.out, &io::activation_sections(&acts, dtype)?)?;
    println!(
        "wrote {} heads x {} samples x {} dims to {}",
        acts.len(),
        acts.n_samples(),
        acts.d_model(),
        a.out.display()
    );
    Ok(())
}

fn fixture(a: FixtureArgs) -> anyhow::Result<()> {
    let fx = PlantedFixture::build(
        study_config(a.seed),
        &a.planted,
        a.strength,
        STUDY_SELECTION_PROMPTS,
        STUDY_EVAL_PROMPTS,
        STUDY_PROMPT_WORDS,
    )?;
    fs::create_dir_all(&a.out)?;
    fx.model.save(&a.out.join("model.hpt"))?;
    let acts = headpursuit::toy_transformer::capture_head_outputs(
        &fx.model,
        &fx.selection_prompts,
        head_analysis::Aggregation::MeanAllTokens,
    )?;
    io::write_tensor_file(
        &a.out.join("activations.hpt"),
        &io::activation_sections(&acts, DType::F64)?,
    )?;
    let mut kw = String::from("# colour words\n");
    for k in &fx.keywords {
        kw.push_str(k);
        kw.push('\n');
    }
    fs::write(a.out.join("keywords.txt"), kw)?;
    let lines = |ps: &[Vec<usize>]| -> String { ps.iter().map(|p| fx.model.vocab.decode(p) + "\n").collect() };
    fs::write(a.out.join("selection_prompts.txt"), lines(&fx.selection_prompts))?;
    fs::write(a.out.join("eval_prompts.txt"), lines(&fx.eval_prompts))?;
    let planted: Vec<String> = fx.planted.iter().map(HeadId::to_string).collect();
    println!(
        "wrote planted study to {} (planted {})",
        a.out.display(),
        planted.join(",")
    );
    Ok(())
}
