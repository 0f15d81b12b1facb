//! Command-line surface: `train`, `parse`, `tag`, `evaluate`,
//! `significance` and `describe-experiment`, with a flat `key = value`
//! config file overridden by flags. Exit codes: 0 success, 1 data errors,
//! 2 configuration errors.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::error::{Error, Result};
use crate::eval::{evaluate, exact_match, significance, SentenceResult};
use crate::features::TreeHeadTable;
use crate::models::{FlexibleDict, ModelSet};
use crate::parser::{decode, to_treebank_tree, DecoderConfig};
use crate::sdt::RMinPolicy;
use crate::training::{parse_probability, train_pipeline, TrainConfig};
use crate::treebank::{
    filter_training, normalize_capitalization, parse_bracketed, read_trees, Dataset, TreebankTree,
};

#[derive(Parser)]
#[command(
    name = "treerec",
    about = "Treebank recognition: train decision-tree parsing models and parse with a stack decoder"
)]
struct Cli {
    /// Worker cap for module-internal parallelism (reserved; the current
    /// modules are single-threaded).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model set from a bracketed treebank.
    Train(TrainArgs),
    /// Parse sentences with a trained model set.
    Parse(ParseArgs),
    /// Emit the part-of-speech tags of the best parse.
    Tag(ParseArgs),
    /// Score predictions against a gold treebank.
    Evaluate(EvaluateArgs),
    /// Paired binomial significance of two systems' exact-match results.
    Significance(SignificanceArgs),
    /// Print the flag combination that reproduces an experiment variation.
    DescribeExperiment {
        /// Experiment letter A-I.
        letter: String,
    },
}

#[derive(Args, Default)]
struct TrainArgs {
    /// Flat key = value config file; flags override its entries.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training treebank.
    #[arg(long)]
    train: Option<PathBuf>,
    /// Held-out treebank for smoothing.
    #[arg(long)]
    heldout: Option<PathBuf>,
    /// Tree head table file.
    #[arg(long)]
    head_table: Option<PathBuf>,
    /// Output model directory.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Experiment preset letter (A-I); individual flags still override.
    #[arg(long)]
    experiment: Option<String>,
    #[arg(long)]
    dwc: Option<usize>,
    /// Depth the first tree set is pruned to before regrowing.
    #[arg(long)]
    prune_depth: Option<u32>,
    #[arg(long)]
    derivation_prune_depth: Option<u32>,
    #[arg(long)]
    reestimation_iterations: Option<usize>,
    #[arg(long)]
    smoothing_iterations: Option<usize>,
    #[arg(long)]
    bucket_min: Option<f64>,
    /// Significance pruning threshold in bit-events (experiments C/D).
    #[arg(long)]
    prune_bit_events: Option<f64>,
    /// Parse with the bottom-up leftmost derivation only (experiment A).
    #[arg(long)]
    no_derivation_model: bool,
    /// Drop the conjunction feature (experiment B).
    #[arg(long)]
    no_conjunction_feature: bool,
    /// Fraction of the filtered training data to use (experiment E).
    #[arg(long)]
    train_fraction: Option<f64>,
    /// Train tag-sequence models that never ask about words (experiment G).
    #[arg(long)]
    tags_only: bool,
    /// Flexible tag dictionary mode: off, top1 (H) or top5 (I).
    #[arg(long)]
    flexible_tag_dict: Option<String>,
    /// Target out-of-vocabulary token rate for the word vocabulary.
    #[arg(long)]
    oov_rate: Option<f64>,
    #[arg(long)]
    min_len: Option<usize>,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    max_children: Option<usize>,
    /// Growing stopping rule: a constant entropy-reduction floor, or
    /// "pure-only" to grow until nodes are pure.
    #[arg(long)]
    rmin: Option<String>,
}

#[derive(Args)]
struct ParseArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Trained model directory.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Input sentences: one per line, whitespace tokenized. With
    /// --known-tags each token is word_TAG; with a tags-only model each
    /// token is a bare tag.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Output file (stdout when omitted).
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    top_k: usize,
    /// The correct tag for each word is known (experiment F).
    #[arg(long)]
    known_tags: bool,
    /// Flexible tag dictionary override: off, top1 or top5.
    #[arg(long)]
    flexible_tag_dict: Option<String>,
    /// Per-stack pruning factor in [0,1]; 0 disables pruning.
    #[arg(long)]
    stack_lambda: Option<f64>,
    #[arg(long)]
    max_stack_size: Option<usize>,
    #[arg(long)]
    max_expansions: Option<usize>,
    #[arg(long)]
    dwc: Option<usize>,
    /// Gold treebank aligned with the input; adds `# gold_log2=` lines so
    /// evaluation can report test perplexity.
    #[arg(long)]
    gold: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Gold treebank file.
    #[arg(long)]
    gold: PathBuf,
    /// Predictions file produced by `parse`.
    #[arg(long)]
    pred: PathBuf,
    /// Sentence-length cutoff for the filtered zero-crossing rate.
    #[arg(long, default_value_t = 25)]
    cb_len_filter: usize,
    /// Emit the machine-readable key=value block instead of the table.
    #[arg(long)]
    kv: bool,
}

#[derive(Args)]
struct SignificanceArgs {
    /// Gold treebank file (required with --x/--y).
    #[arg(long)]
    gold: Option<PathBuf>,
    /// Predictions of system X.
    #[arg(long)]
    x: Option<PathBuf>,
    /// Predictions of system Y.
    #[arg(long)]
    y: Option<PathBuf>,
    /// Direct count: sentences X got right and Y got wrong.
    #[arg(long)]
    c12: Option<u64>,
    /// Direct count: sentences Y got right and X got wrong.
    #[arg(long)]
    c21: Option<u64>,
}

/// Entry point used by the binary and by tests; returns the process exit
/// code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return 2;
        }
    };
    let result = match cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Parse(args) => cmd_parse(args, false),
        Command::Tag(args) => cmd_parse(args, true),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::Significance(args) => cmd_significance(args),
        Command::DescribeExperiment { letter } => cmd_describe(&letter),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<HashMap<String, String>> {
    let mut map = HashMap::new();
    if let Some(path) = path {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("config line {} is not key = value", lineno + 1))
            })?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
    }
    Ok(map)
}

fn config_value<T: std::str::FromStr>(
    map: &HashMap<String, String>,
    key: &str,
) -> Result<Option<T>> {
    match map.get(key) {
        None => Ok(None),
        Some(v) => v
            .parse::<T>()
            .map(Some)
            .map_err(|_| Error::Config(format!("config key {key} has invalid value {v:?}"))),
    }
}

fn config_flag(map: &HashMap<String, String>, key: &str) -> Result<bool> {
    Ok(matches!(
        config_value::<String>(map, key)?.as_deref(),
        Some("true") | Some("1") | Some("yes")
    ))
}

/// The experiment presets, each reachable by exactly one flag combination.
fn experiment_description(letter: &str) -> Result<&'static str> {
    Ok(match letter {
        "A" => "train --no-derivation-model   (bottom-up leftmost derivation only)",
        "B" => "train --no-conjunction-feature",
        "C" => "train --prune-bit-events 1",
        "D" => "train --prune-bit-events 5",
        "E" => "train --train-fraction 0.5",
        "F" => "parse --known-tags            (input lines are word_TAG tokens)",
        "G" => "train --tags-only, then parse --known-tags with bare-tag input",
        "H" => "parse --flexible-tag-dict top1",
        "I" => "parse --flexible-tag-dict top5",
        other => {
            return Err(Error::Config(format!(
                "unknown experiment {other:?}; expected a letter A-I"
            )))
        }
    })
}

fn cmd_describe(letter: &str) -> Result<()> {
    println!("{}: {}", letter, experiment_description(letter)?);
    Ok(())
}

fn apply_experiment_to_train(cfg: &mut TrainConfig, letter: &str) -> Result<()> {
    match letter {
        "A" => cfg.use_derivation_model = false,
        "B" => cfg.use_conjunction = false,
        "C" => cfg.prune_bit_events = Some(1.0),
        "D" => cfg.prune_bit_events = Some(5.0),
        "E" => cfg.train_fraction = 0.5,
        "F" | "H" | "I" => {} // decode-time variations
        "G" => cfg.include_words = false,
        other => {
            return Err(Error::Config(format!(
                "unknown experiment {other:?}; expected a letter A-I"
            )))
        }
    }
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let file = load_config(args.config.as_deref())?;
    let path_of = |cli: &Option<PathBuf>, key: &str| -> Option<PathBuf> {
        cli.clone()
            .or_else(|| file.get(key).map(PathBuf::from))
    };
    let train_path = path_of(&args.train, "train")
        .ok_or_else(|| Error::Config("missing --train treebank path".into()))?;
    let heldout_path = path_of(&args.heldout, "heldout");
    let head_table_path = path_of(&args.head_table, "head_table")
        .ok_or_else(|| Error::Config("missing --head-table path".into()))?;
    let output = path_of(&args.output, "output")
        .ok_or_else(|| Error::Config("missing --output model directory".into()))?;

    if !head_table_path.exists() {
        return Err(Error::Config(format!(
            "tree head table {} does not exist",
            head_table_path.display()
        )));
    }

    let mut cfg = TrainConfig::default();
    if let Some(letter) = args
        .experiment
        .clone()
        .or_else(|| file.get("experiment").cloned())
    {
        apply_experiment_to_train(&mut cfg, &letter)?;
    }
    if let Some(v) = args.dwc.or(config_value(&file, "dwc")?) {
        cfg.dwc = v;
    }
    if let Some(v) = args.prune_depth.or(config_value(&file, "prune_depth")?) {
        cfg.prune_depth_m1 = v;
    }
    if let Some(v) = args
        .derivation_prune_depth
        .or(config_value(&file, "derivation_prune_depth")?)
    {
        cfg.derivation_prune_depth = v;
    }
    if let Some(v) = args
        .reestimation_iterations
        .or(config_value(&file, "reestimation_iterations")?)
    {
        cfg.reestimation_iterations = v;
    }
    if let Some(v) = args
        .smoothing_iterations
        .or(config_value(&file, "smoothing_iterations")?)
    {
        cfg.smoothing_iterations = v;
    }
    if let Some(v) = args.bucket_min.or(config_value(&file, "bucket_min")?) {
        cfg.bucket_min = v;
    }
    if let Some(v) = args
        .prune_bit_events
        .or(config_value(&file, "prune_bit_events")?)
    {
        cfg.prune_bit_events = if v > 0.0 { Some(v) } else { None };
    }
    if args.no_derivation_model || config_flag(&file, "no_derivation_model")? {
        cfg.use_derivation_model = false;
    }
    if args.no_conjunction_feature || config_flag(&file, "no_conjunction_feature")? {
        cfg.use_conjunction = false;
    }
    if let Some(v) = args
        .train_fraction
        .or(config_value(&file, "train_fraction")?)
    {
        if !(0.0..=1.0).contains(&v) || v == 0.0 {
            return Err(Error::Config("train_fraction must be in (0, 1]".into()));
        }
        cfg.train_fraction = v;
    }
    if args.tags_only || config_flag(&file, "tags_only")? {
        cfg.include_words = false;
    }
    if let Some(v) = args
        .flexible_tag_dict
        .clone()
        .or_else(|| file.get("flexible_tag_dict").cloned())
    {
        cfg.flexible_dict = FlexibleDict::parse(&v)?;
    }
    if let Some(v) = args.oov_rate.or(config_value(&file, "oov_rate")?) {
        cfg.target_oov_rate = v;
    }
    if let Some(v) = args.max_children.or(config_value(&file, "max_children")?) {
        cfg.max_children = v;
    }
    if let Some(v) = args
        .rmin
        .clone()
        .or_else(|| file.get("rmin").cloned())
    {
        cfg.rmin = match v.as_str() {
            "pure-only" => RMinPolicy::PureOnly,
            num => RMinPolicy::Constant(num.parse().map_err(|_| {
                Error::Config(format!("rmin must be a number or \"pure-only\", got {num:?}"))
            })?),
        };
    }
    for (key, slot) in [
        ("words_bct", 0usize),
        ("tags_bct", 1),
        ("labels_bct", 2),
    ] {
        if let Some(path) = file.get(key).map(PathBuf::from) {
            match slot {
                0 => cfg.bct_files.words = Some(path),
                1 => cfg.bct_files.tags = Some(path),
                _ => cfg.bct_files.labels = Some(path),
            }
        }
    }
    let min_len = args.min_len.or(config_value(&file, "min_len")?).unwrap_or(3);
    let max_len = args.max_len.or(config_value(&file, "max_len")?).unwrap_or(30);

    let head_table = TreeHeadTable::load(&head_table_path)?;
    let train_trees = read_trees(&std::fs::read_to_string(&train_path)?)?;
    let train_trees = filter_training(train_trees, min_len, max_len, cfg.max_children);
    let heldout_trees = match &heldout_path {
        Some(p) => {
            let trees = read_trees(&std::fs::read_to_string(p)?)?;
            filter_training(trees, min_len, max_len, cfg.max_children)
        }
        None => Vec::new(),
    };

    let out = train_pipeline(&train_trees, &heldout_trees, head_table, &cfg)?;
    out.models.save(&output)?;

    // Append-only entropy log, one line per iteration.
    let mut log_text = String::new();
    if !out.log.reestimation_log2.is_empty() {
        let _ = writeln!(log_text, "# reestimation: training log2-probability per iteration");
        for (i, ll) in out.log.reestimation_log2.iter().enumerate() {
            let _ = writeln!(log_text, "{} {ll:.4}", i + 1);
        }
    }
    if !out.log.smoothing_log2.is_empty() {
        let _ = writeln!(
            log_text,
            "# smoothing: held-out perplexity per iteration per model"
        );
        let names: Vec<&str> = out.log.smoothing_log2.keys().copied().collect();
        let _ = writeln!(log_text, "iter {}", names.join(" "));
        let iters = out
            .log
            .smoothing_log2
            .values()
            .map(|v| v.len())
            .max()
            .unwrap_or(0);
        for i in 0..iters {
            let mut row = format!("{}", i + 1);
            for name in &names {
                let lls = &out.log.smoothing_log2[name];
                let weight = out.log.smoothing_weights.get(name).copied().unwrap_or(1.0);
                match lls.get(i) {
                    Some(ll) => {
                        let perp = (-ll / weight.max(1e-12)).exp2();
                        let _ = write!(row, " {perp:.5}");
                    }
                    None => row.push_str(" -"),
                }
            }
            let _ = writeln!(log_text, "{row}");
        }
    }
    for skip in &out.log.skipped {
        let _ = writeln!(log_text, "# skipped: {skip}");
    }
    std::fs::write(output.join("train.log"), log_text)?;
    println!(
        "trained on {} sentences ({} held out); model written to {}",
        out.dataset.sentences.len(),
        heldout_trees.len(),
        output.display()
    );
    Ok(())
}

/// A parsed input sentence: surfaces plus optional known tags.
struct InputSentence {
    surfaces: Vec<String>,
    tags: Option<Vec<String>>,
}

fn read_input_sentences(text: &str, known_tags: bool, tags_only: bool) -> Result<Vec<InputSentence>> {
    let mut out = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if tags_only {
            out.push(InputSentence {
                surfaces: tokens.iter().map(|t| t.to_string()).collect(),
                tags: Some(tokens.iter().map(|t| t.to_string()).collect()),
            });
        } else if known_tags {
            let mut surfaces = Vec::new();
            let mut tags = Vec::new();
            for t in &tokens {
                let (w, tag) = t.rsplit_once('_').ok_or_else(|| {
                    Error::Domain(format!("token {t:?} is not word_TAG (known-tags input)"))
                })?;
                surfaces.push(w.to_string());
                tags.push(tag.to_string());
            }
            out.push(InputSentence {
                surfaces,
                tags: Some(tags),
            });
        } else {
            out.push(InputSentence {
                surfaces: tokens.iter().map(|t| t.to_string()).collect(),
                tags: None,
            });
        }
    }
    Ok(out)
}

fn cmd_parse(args: ParseArgs, tags_output: bool) -> Result<()> {
    let file = load_config(args.config.as_deref())?;
    let model_dir = args
        .model
        .clone()
        .or_else(|| file.get("model").map(PathBuf::from))
        .ok_or_else(|| Error::Config("missing --model directory".into()))?;
    let input_path = args
        .input
        .clone()
        .or_else(|| file.get("input").map(PathBuf::from))
        .ok_or_else(|| Error::Config("missing --input file".into()))?;

    let mut models = ModelSet::load(&model_dir)?;
    if let Some(v) = args
        .flexible_tag_dict
        .clone()
        .or_else(|| file.get("flexible_tag_dict").cloned())
    {
        models.flexible_dict = FlexibleDict::parse(&v)?;
    }
    let mut dcfg = DecoderConfig {
        dwc: args.dwc.or(config_value(&file, "dwc")?).unwrap_or(models.dwc),
        use_derivation_model: models.derivation_model.is_some(),
        use_conjunction: models.use_conjunction,
        ..DecoderConfig::default()
    };
    if let Some(v) = args.stack_lambda.or(config_value(&file, "stack_lambda")?) {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Config("stack_lambda must be in [0, 1]".into()));
        }
        dcfg.stack_lambda = v;
    }
    if let Some(v) = args
        .max_stack_size
        .or(config_value(&file, "max_stack_size")?)
    {
        dcfg.max_stack_size = v;
    }
    if let Some(v) = args
        .max_expansions
        .or(config_value(&file, "max_expansions")?)
    {
        dcfg.max_expansions = v;
    }

    let tags_only = !models.include_words;
    let known_tags = args.known_tags || tags_only;
    let input = read_input_sentences(
        &std::fs::read_to_string(&input_path)?,
        known_tags && !tags_only,
        tags_only,
    )?;

    let gold_trees = match &args.gold {
        Some(p) => {
            let trees = read_trees(&std::fs::read_to_string(p)?)?;
            if trees.len() != input.len() {
                return Err(Error::Domain(format!(
                    "gold file has {} sentences but input has {}",
                    trees.len(),
                    input.len()
                )));
            }
            Some(trees)
        }
        None => None,
    };

    let mut out = String::new();
    for (i, sentence) in input.iter().enumerate() {
        let _ = writeln!(out, "# sentence {i}");
        let words: Vec<u32> = if tags_only {
            vec![Dataset::UNKNOWN_ID; sentence.surfaces.len()]
        } else {
            sentence
                .surfaces
                .iter()
                .enumerate()
                .map(|(j, w)| {
                    let normalized = normalize_capitalization(w, j == 0);
                    models
                        .words
                        .id_of(&normalized)
                        .unwrap_or(Dataset::UNKNOWN_ID)
                })
                .collect()
        };
        let tag_ids: Option<Vec<u32>> = match &sentence.tags {
            Some(tags) => {
                let mut ids = Vec::with_capacity(tags.len());
                for t in tags {
                    ids.push(models.tags.id_of(t).ok_or_else(|| {
                        Error::Domain(format!("unknown part-of-speech tag {t:?}"))
                    })?);
                }
                Some(ids)
            }
            None => None,
        };

        if let Some(gold) = gold_trees.as_ref().map(|g| &g[i]) {
            match gold_log2(gold, &models, &dcfg) {
                Ok(l) => {
                    let _ = writeln!(out, "# gold_log2={l:.6}");
                }
                Err(e) => {
                    let _ = writeln!(out, "# gold_log2_error={e}");
                }
            }
        }

        let result = decode(&words, tag_ids.as_deref(), &models, &dcfg, args.top_k)?;
        if result.parses.is_empty() {
            let _ = writeln!(
                out,
                "# NOPARSE {}",
                result.best_partial.unwrap_or_default()
            );
            continue;
        }
        if tags_output {
            let best = &result.parses[0];
            let tree = to_treebank_tree(&best.tree, &sentence.surfaces, &models);
            let tagged: Vec<String> = tree
                .tokens()
                .iter()
                .map(|t| format!("{}_{}", t.surface, t.tag))
                .collect();
            let _ = writeln!(out, "{}", tagged.join(" "));
        } else {
            for p in &result.parses {
                let _ = writeln!(out, "# logprob={:.6}", p.log_prob);
                let tree = to_treebank_tree(&p.tree, &sentence.surfaces, &models);
                let _ = writeln!(out, "{}", tree.serialize());
            }
        }
    }

    match &args.output {
        Some(path) => std::fs::write(path, out)?,
        None => print!("{out}"),
    }
    Ok(())
}

fn gold_log2(gold: &TreebankTree, models: &ModelSet, dcfg: &DecoderConfig) -> Result<f64> {
    // Re-intern the gold tree against the model vocabularies.
    let tags = &models.tags;
    let labels = &models.labels;
    let toks = gold.tokens();
    let words: Vec<u32> = toks
        .iter()
        .enumerate()
        .map(|(j, t)| {
            let normalized = normalize_capitalization(&t.surface, j == 0);
            models.words.id_of(&normalized).unwrap_or(Dataset::UNKNOWN_ID)
        })
        .collect();
    let mut sentence_tags = Vec::with_capacity(toks.len());
    for t in &toks {
        sentence_tags.push(
            tags.id_of(&t.tag)
                .ok_or_else(|| Error::Domain(format!("unknown tag {:?} in gold tree", t.tag)))?,
        );
    }
    fn intern(
        tree: &TreebankTree,
        words: &[u32],
        tags: &[u32],
        labels: &crate::treebank::Vocab,
    ) -> Result<crate::treebank::GoldNode> {
        let label = labels
            .id_of(&tree.label)
            .ok_or_else(|| Error::Domain(format!("unknown label {:?} in gold tree", tree.label)))?;
        let mut children = Vec::new();
        for c in &tree.children {
            children.push(match c {
                crate::treebank::TreeChild::Token(t) => crate::treebank::GoldChild::Leaf {
                    word: words[t.index],
                    tag: tags[t.index],
                    index: t.index,
                },
                crate::treebank::TreeChild::Tree(t) => {
                    crate::treebank::GoldChild::Node(intern(t, words, tags, labels)?)
                }
            });
        }
        Ok(crate::treebank::GoldNode {
            label,
            conj: tree.conj,
            children,
            span: tree.span,
        })
    }
    let gold_node = intern(gold, &words, &sentence_tags, labels)?;
    let parse = crate::features::gold_to_parse(&gold_node, &words, &models.resolved_heads)?;
    let ln = parse_probability(&words, &parse, models, dcfg)?;
    Ok(ln / std::f64::consts::LN_2)
}

/// Reads a predictions file: `# sentence` headers group ranked parses; a
/// bare tree per line (no headers) is one sentence each.
fn read_predictions(text: &str) -> Result<Vec<(Vec<TreebankTree>, Option<f64>)>> {
    let mut groups: Vec<(Vec<TreebankTree>, Option<f64>)> = Vec::new();
    let mut current: Option<(Vec<TreebankTree>, Option<f64>)> = None;
    let mut saw_header = false;
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('#') {
            let rest = rest.trim();
            if rest.starts_with("sentence") {
                saw_header = true;
                if let Some(g) = current.take() {
                    groups.push(g);
                }
                current = Some((Vec::new(), None));
            } else if let Some(v) = rest.strip_prefix("gold_log2=") {
                if let Some(g) = current.as_mut() {
                    g.1 = v.parse().ok();
                }
            }
            // logprob / NOPARSE comments carry no structure.
            continue;
        }
        let tree = parse_bracketed(line)?;
        if saw_header {
            current
                .as_mut()
                .ok_or_else(|| Error::Domain("parse tree before any sentence header".into()))?
                .0
                .push(tree);
        } else {
            groups.push((vec![tree], None));
        }
    }
    if let Some(g) = current.take() {
        groups.push(g);
    }
    Ok(groups)
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<()> {
    let gold = read_trees(&std::fs::read_to_string(&args.gold)?)?;
    let preds = read_predictions(&std::fs::read_to_string(&args.pred)?)?;
    if gold.len() != preds.len() {
        return Err(Error::Domain(format!(
            "gold file has {} sentences but predictions cover {}",
            gold.len(),
            preds.len()
        )));
    }
    let results: Vec<SentenceResult> = gold
        .into_iter()
        .zip(preds)
        .map(|(gold, (predictions, gold_log2))| SentenceResult {
            gold,
            predictions,
            gold_log2,
        })
        .collect();
    let report = evaluate(&results, Some(args.cb_len_filter))?;
    if args.kv {
        print!("{}", report.render_kv());
    } else {
        print!("{}", report.render_table());
    }
    Ok(())
}

fn cmd_significance(args: SignificanceArgs) -> Result<()> {
    let (c12, c21) = match (args.c12, args.c21) {
        (Some(a), Some(b)) => (a, b),
        (None, None) => {
            let gold_path = args
                .gold
                .ok_or_else(|| Error::Config("significance needs --gold with --x/--y".into()))?;
            let x_path = args
                .x
                .ok_or_else(|| Error::Config("significance needs --x".into()))?;
            let y_path = args
                .y
                .ok_or_else(|| Error::Config("significance needs --y".into()))?;
            let gold = read_trees(&std::fs::read_to_string(&gold_path)?)?;
            let x = read_predictions(&std::fs::read_to_string(&x_path)?)?;
            let y = read_predictions(&std::fs::read_to_string(&y_path)?)?;
            if x.len() != gold.len() || y.len() != gold.len() {
                return Err(Error::Domain(
                    "prediction files do not cover the gold sentence count".into(),
                ));
            }
            let mut c12 = 0u64;
            let mut c21 = 0u64;
            for ((g, xp), yp) in gold.iter().zip(&x).zip(&y) {
                let x_right = match xp.0.first() {
                    Some(t) => exact_match(g, t, false)?,
                    None => false,
                };
                let y_right = match yp.0.first() {
                    Some(t) => exact_match(g, t, false)?,
                    None => false,
                };
                match (x_right, y_right) {
                    (true, false) => c12 += 1,
                    (false, true) => c21 += 1,
                    _ => {}
                }
            }
            (c12, c21)
        }
        _ => {
            return Err(Error::Config(
                "provide both --c12 and --c21, or gold and prediction files".into(),
            ))
        }
    };
    if c12 == 0 && c21 == 0 {
        println!("c12=0 c21=0: no discriminating sentences");
        return Ok(());
    }
    let p = significance(c12, c21)?;
    println!("c12={c12} c21={c21} p={p:.4}");
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_file_parsing() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.conf");
        std::fs::write(&path, "dwc = 2\n# comment\ntrain_fraction = 0.5\n").unwrap();
        let map = load_config(Some(&path)).unwrap();
        assert_eq!(config_value::<usize>(&map, "dwc").unwrap(), Some(2));
        assert_eq!(
            config_value::<f64>(&map, "train_fraction").unwrap(),
            Some(0.5)
        );
        assert_eq!(config_value::<usize>(&map, "missing").unwrap(), None);
    }

    #[test]
    fn bad_config_line_is_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.conf");
        std::fs::write(&path, "line without separator\n").unwrap();
        assert!(load_config(Some(&path)).is_err());
    }

    #[test]
    fn every_experiment_letter_described() {
        for letter in ["A", "B", "C", "D", "E", "F", "G", "H", "I"] {
            assert!(experiment_description(letter).is_ok());
        }
        assert!(experiment_description("Z").is_err());
    }

    #[test]
    fn prediction_file_round_trip() {
        let text = "# sentence 0\n# gold_log2=-3.5\n# logprob=-1.25\n\
                    [N a_X N]\n# sentence 1\n# NOPARSE\n";
        let preds = read_predictions(text).unwrap();
        assert_eq!(preds.len(), 2);
        assert_eq!(preds[0].0.len(), 1);
        assert_eq!(preds[0].1, Some(-3.5));
        assert!(preds[1].0.is_empty());
    }

    #[test]
    fn headerless_predictions_are_one_per_line() {
        let preds = read_predictions("[N a_X N]\n[N b_X N]\n").unwrap();
        assert_eq!(preds.len(), 2);
    }
}
