//! Derivation-lattice forward-backward training and the model-building
//! schedule: grow initial trees from uniform models, prune, regrow from
//! forward-backward counts, reestimate leaf distributions, then smooth the
//! lambdas on held-out data.

use std::collections::{BTreeMap, HashMap};
use std::rc::Rc;

use crate::bct::{mi_cluster, BigramCounts, BinaryClassificationTree};
use crate::error::{Error, Result};
use crate::features::{gold_to_parse, Encodings, Extension, ParseNode, TreeHeadTable};
use crate::models::{FlexibleDict, ModelKind, ModelSet};
use crate::parser::{expand, initial_nodes, signature, DecoderConfig, TransitionEvent, LOG_FLOOR};
use crate::sdt::{dedup_events, DecisionTree, Event, RMinPolicy, SmoothedModel};
use crate::treebank::{Dataset, GoldChild, GoldNode, Sentence, TreebankTree};

fn ln_floor(p: f64) -> f64 {
    if p > 0.0 {
        p.ln().max(LOG_FLOOR)
    } else {
        LOG_FLOOR
    }
}

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// Builds word, tag and label classification trees from corpus bigram
/// statistics (adjacent words, adjacent tags, parent-child labels). A small
/// uniform smoothing mass keeps the clustering defined on sparse corpora.
pub fn build_encodings(ds: &Dataset, cluster_bound: usize) -> Result<Encodings> {
    build_encodings_with(ds, cluster_bound, &BctFiles::default())
}

/// Optional pre-built classification trees; a supplied file is authoritative
/// and clustering is skipped for that vocabulary.
#[derive(Debug, Clone, Default)]
pub struct BctFiles {
    pub words: Option<std::path::PathBuf>,
    pub tags: Option<std::path::PathBuf>,
    pub labels: Option<std::path::PathBuf>,
}

pub fn build_encodings_with(
    ds: &Dataset,
    cluster_bound: usize,
    files: &BctFiles,
) -> Result<Encodings> {
    let words = match &files.words {
        Some(p) => aligned_bct(p, ds.words.names())?,
        None => cluster_or_trivial(ds.words.names(), word_bigrams(ds), cluster_bound)?,
    };
    let tags = match &files.tags {
        Some(p) => aligned_bct(p, ds.tags.names())?,
        None => cluster_or_trivial(ds.tags.names(), tag_bigrams(ds), cluster_bound)?,
    };
    let labels = match &files.labels {
        Some(p) => aligned_bct(p, ds.labels.names())?,
        None => cluster_or_trivial(ds.labels.names(), label_bigrams(ds), cluster_bound)?,
    };
    Encodings::new(words, tags, labels)
}

/// Loads a classification-tree file and reorders its rows to the corpus
/// vocabulary so item ids line up; every vocabulary item must be covered.
fn aligned_bct(path: &std::path::Path, names: &[String]) -> Result<BinaryClassificationTree> {
    let file = BinaryClassificationTree::load(path)?;
    let mut items = Vec::with_capacity(names.len());
    for name in names {
        let id = file.id_of(name).ok_or_else(|| {
            Error::Config(format!(
                "classification tree {} lacks vocabulary item {name:?}",
                path.display()
            ))
        })?;
        items.push((name.clone(), file.encode(id)?.to_vec()));
    }
    BinaryClassificationTree::new(items)
}

fn smooth_bigrams(counts: &mut BigramCounts, v: usize) {
    for i in 0..v as u32 {
        *counts.entry((i, (i + 1) % v as u32)).or_insert(0.0) += 0.01;
    }
}

fn word_bigrams(ds: &Dataset) -> BigramCounts {
    let mut counts = BigramCounts::new();
    for s in &ds.sentences {
        for w in s.words.windows(2) {
            *counts.entry((w[0], w[1])).or_insert(0.0) += 1.0;
        }
    }
    smooth_bigrams(&mut counts, ds.words.len());
    counts
}

fn tag_bigrams(ds: &Dataset) -> BigramCounts {
    let mut counts = BigramCounts::new();
    for s in &ds.sentences {
        for t in s.tags.windows(2) {
            *counts.entry((t[0], t[1])).or_insert(0.0) += 1.0;
        }
    }
    smooth_bigrams(&mut counts, ds.tags.len());
    counts
}

fn label_bigrams(ds: &Dataset) -> BigramCounts {
    fn visit(node: &GoldNode, counts: &mut BigramCounts) {
        for c in &node.children {
            if let GoldChild::Node(n) = c {
                *counts.entry((node.label, n.label)).or_insert(0.0) += 1.0;
                visit(n, counts);
            }
        }
    }
    let mut counts = BigramCounts::new();
    for s in &ds.sentences {
        visit(&s.tree, &mut counts);
    }
    smooth_bigrams(&mut counts, ds.labels.len());
    counts
}

fn cluster_or_trivial(
    names: &[String],
    bigrams: BigramCounts,
    bound: usize,
) -> Result<BinaryClassificationTree> {
    if names.len() < 2 {
        return BinaryClassificationTree::new(
            names.iter().map(|n| (n.clone(), Vec::new())).collect(),
        );
    }
    mi_cluster(names, &bigrams, bound)
}

/// One edge of a derivation lattice: a single feature-value assignment
/// between two merged states, carrying the decision-tree events that made it.
#[derive(Debug)]
pub struct LatticeEdge {
    pub from: u32,
    pub to: u32,
    pub log_prob: f64,
    pub events: Vec<TransitionEvent>,
}

/// The DAG of all derivations of one gold tree under the derivational
/// window constraint, with states merged by signature.
pub struct Lattice {
    pub n_states: usize,
    pub edges: Vec<LatticeEdge>,
    pub source: u32,
    pub sink: u32,
    topo: Vec<u32>,
    in_edges: Vec<Vec<u32>>,
    out_edges: Vec<Vec<u32>>,
}

pub struct FbResult {
    /// Forward mass per state (log).
    pub alpha: Vec<f64>,
    /// Backward mass per state (log), normalized so beta(sink) = 1.
    pub beta: Vec<f64>,
    /// Posterior count per edge.
    pub counts: Vec<f64>,
    /// Log probability of the gold tree: alpha(sink).
    pub log_prob: f64,
}

impl Lattice {
    /// Builds a lattice from explicit edges (used for hand-constructed
    /// fixtures and diagnostics); computes the index structures and the
    /// topological order.
    pub fn from_edges(
        n_states: usize,
        edges: Vec<LatticeEdge>,
        source: u32,
        sink: u32,
    ) -> Result<Lattice> {
        let mut in_edges = vec![Vec::new(); n_states];
        let mut out_edges = vec![Vec::new(); n_states];
        for (ei, e) in edges.iter().enumerate() {
            out_edges[e.from as usize].push(ei as u32);
            in_edges[e.to as usize].push(ei as u32);
        }
        let mut indeg: Vec<usize> = in_edges.iter().map(|v| v.len()).collect();
        let mut topo = Vec::with_capacity(n_states);
        let mut queue: Vec<u32> = (0..n_states as u32)
            .filter(|&i| indeg[i as usize] == 0)
            .collect();
        while let Some(s) = queue.pop() {
            topo.push(s);
            for &ei in &out_edges[s as usize] {
                let t = edges[ei as usize].to as usize;
                indeg[t] -= 1;
                if indeg[t] == 0 {
                    queue.push(t as u32);
                }
            }
        }
        if topo.len() != n_states {
            return Err(Error::Train("lattice is not acyclic".into()));
        }
        Ok(Lattice {
            n_states,
            edges,
            source,
            sink,
            topo,
            in_edges,
            out_edges,
        })
    }

    /// Edge log probabilities under the current smoothed models.
    pub fn rescore(&self, models: &ModelSet) -> Vec<f64> {
        self.edges
            .iter()
            .map(|e| rescore_events(&e.events, models))
            .collect()
    }

    /// Forward-backward over the lattice for the given edge scores. Counts
    /// are posteriors: for any feature assigned once in the tree, the counts
    /// of its edges sum to 1.
    pub fn forward_backward(&self, edge_logprobs: &[f64]) -> Result<FbResult> {
        let n = self.n_states;
        let mut alpha = vec![f64::NEG_INFINITY; n];
        alpha[self.source as usize] = 0.0;
        for &s in &self.topo {
            for &ei in &self.out_edges[s as usize] {
                let e = &self.edges[ei as usize];
                let m = alpha[s as usize] + edge_logprobs[ei as usize];
                alpha[e.to as usize] = log_add(alpha[e.to as usize], m);
            }
        }
        let log_prob = alpha[self.sink as usize];
        if log_prob == f64::NEG_INFINITY {
            return Err(Error::Train(
                "forward pass assigned the gold tree probability 0".into(),
            ));
        }
        let mut beta = vec![f64::NEG_INFINITY; n];
        beta[self.sink as usize] = 0.0;
        for &s in self.topo.iter().rev() {
            for &ei in &self.in_edges[s as usize] {
                let e = &self.edges[ei as usize];
                let m = beta[s as usize] + edge_logprobs[ei as usize];
                beta[e.from as usize] = log_add(beta[e.from as usize], m);
            }
        }
        let counts = self
            .edges
            .iter()
            .enumerate()
            .map(|(ei, e)| {
                (alpha[e.from as usize] + edge_logprobs[ei] + beta[e.to as usize] - log_prob)
                    .exp()
            })
            .collect();
        Ok(FbResult {
            alpha,
            beta,
            counts,
            log_prob,
        })
    }
}

fn rescore_events(events: &[TransitionEvent], models: &ModelSet) -> f64 {
    let mut lp = 0.0;
    for e in events {
        let model = models.model(e.model).expect("event model present");
        let p = match e.model {
            ModelKind::Derivation => {
                let dist = model.smoothed_distribution(&e.answers);
                let denom: f64 = dist.iter().take(e.candidates).sum();
                if denom > 0.0 {
                    dist[e.future as usize] / denom
                } else {
                    0.0
                }
            }
            _ => model.smoothed_prob(&e.answers, e.future),
        };
        lp += ln_floor(p);
    }
    lp
}

struct GoldArena {
    /// (fully assigned gold node, parent arena id)
    nodes: Vec<(Rc<ParseNode>, Option<u32>)>,
    leaf_ids: Vec<u32>,
}

fn flatten_gold(root: &Rc<ParseNode>) -> GoldArena {
    fn visit(
        node: &Rc<ParseNode>,
        parent: Option<u32>,
        arena: &mut Vec<(Rc<ParseNode>, Option<u32>)>,
        leaves: &mut Vec<(u32, u32)>,
    ) {
        let id = arena.len() as u32;
        arena.push((node.clone(), parent));
        if node.is_leaf() {
            leaves.push((node.span.0, id));
        } else {
            for c in &node.children {
                visit(c, Some(id), arena, leaves);
            }
        }
    }
    let mut arena = Vec::new();
    let mut leaves = Vec::new();
    visit(root, None, &mut arena, &mut leaves);
    leaves.sort_unstable();
    GoldArena {
        nodes: arena,
        leaf_ids: leaves.into_iter().map(|(_, id)| id).collect(),
    }
}

/// Builds the derivation lattice of one sentence's gold tree: constrained
/// expansion where only the gold value can be assigned at each candidate
/// position, with states merged by signature.
pub fn build_lattice(
    words: &[u32],
    gold_root: &Rc<ParseNode>,
    models: &ModelSet,
    config: &DecoderConfig,
    state_cap: usize,
) -> Result<Lattice> {
    let arena = flatten_gold(gold_root);
    let goal_sig = signature(std::slice::from_ref(gold_root));

    let init = initial_nodes(words, None);
    let init_align: Vec<u32> = arena.leaf_ids.clone();

    struct BuildState {
        nodes: Vec<Rc<ParseNode>>,
        total_nodes: usize,
        align: Vec<u32>,
    }

    let mut states: Vec<BuildState> = vec![BuildState {
        total_nodes: init.len(),
        nodes: init.clone(),
        align: init_align,
    }];
    let mut by_sig: HashMap<Box<[u8]>, u32> = HashMap::new();
    by_sig.insert(signature(&init), 0);
    let mut edges: Vec<LatticeEdge> = Vec::new();
    let mut sink: Option<u32> = None;
    let mut worklist = vec![0u32];

    while let Some(id) = worklist.pop() {
        let (nodes, total_nodes, align) = {
            let s = &states[id as usize];
            (s.nodes.clone(), s.total_nodes, s.align.clone())
        };
        if nodes.len() == 1 && nodes[0].completed() {
            continue; // the sink
        }
        let arena_ref = &arena;
        let align_ref = &align;
        let gold_fn = move |pos: usize, feature: crate::features::FeatureKind| -> u32 {
            let gold_node = &arena_ref.nodes[align_ref[pos] as usize].0;
            match feature {
                crate::features::FeatureKind::Tag => gold_node.tag.value().unwrap(),
                crate::features::FeatureKind::Label => gold_node.label.value().unwrap(),
                crate::features::FeatureKind::Conjunction => {
                    gold_node.conj.value().unwrap() as u32
                }
                crate::features::FeatureKind::Extension => {
                    let e = gold_node.extension.value().unwrap();
                    debug_assert!(e != Extension::Root, "root extension is folded, not pending");
                    e as u32
                }
                crate::features::FeatureKind::Word => unreachable!(),
            }
        };
        let succs = expand(&nodes, total_nodes, words, models, config, Some(&gold_fn))?;
        for s in succs {
            let sig = signature(&s.nodes);
            let to = match by_sig.get(&sig) {
                Some(&to) => to,
                None => {
                    if states.len() >= state_cap {
                        return Err(Error::Train(format!(
                            "derivation lattice exceeds the state cap of {state_cap}"
                        )));
                    }
                    let mut new_align = align.clone();
                    if let Some((i, j)) = s.wrap {
                        let parent = arena.nodes[new_align[i] as usize]
                            .1
                            .expect("wrapped run has a gold parent");
                        debug_assert!((i..=j).all(|p| arena.nodes[new_align[p] as usize].1
                            == Some(parent)));
                        new_align.splice(i..=j, [parent]);
                    }
                    let to = states.len() as u32;
                    states.push(BuildState {
                        nodes: s.nodes.clone(),
                        total_nodes: s.total_nodes,
                        align: new_align,
                    });
                    by_sig.insert(sig.clone(), to);
                    worklist.push(to);
                    to
                }
            };
            if s.is_goal {
                if sig != goal_sig {
                    return Err(Error::Train(
                        "derivation reached a spanning node that is not the gold root \
                         (spanning unary chains are not derivable)"
                            .into(),
                    ));
                }
                sink = Some(to);
            }
            edges.push(LatticeEdge {
                from: id,
                to,
                log_prob: s.log_prob,
                events: s.events,
            });
        }
    }

    let sink = sink.ok_or_else(|| {
        Error::Train("no derivation reaches the gold tree under the window constraint".into())
    })?;

    let n = states.len();
    let mut in_edges = vec![Vec::new(); n];
    let mut out_edges = vec![Vec::new(); n];
    for (ei, e) in edges.iter().enumerate() {
        out_edges[e.from as usize].push(ei as u32);
        in_edges[e.to as usize].push(ei as u32);
    }
    // Kahn's topological order.
    let mut indeg: Vec<usize> = in_edges.iter().map(|v| v.len()).collect();
    let mut topo = Vec::with_capacity(n);
    let mut queue: Vec<u32> = (0..n as u32).filter(|&i| indeg[i as usize] == 0).collect();
    while let Some(s) = queue.pop() {
        topo.push(s);
        for &ei in &out_edges[s as usize] {
            let t = edges[ei as usize].to as usize;
            indeg[t] -= 1;
            if indeg[t] == 0 {
                queue.push(t as u32);
            }
        }
    }
    if topo.len() != n {
        return Err(Error::Train("derivation lattice is not acyclic".into()));
    }

    Ok(Lattice {
        n_states: n,
        edges,
        source: 0,
        sink,
        topo,
        in_edges,
        out_edges,
    })
}

/// Log probability (natural log) the models assign the gold tree of a
/// sentence: the forward mass of its derivation lattice.
pub fn parse_probability(
    words: &[u32],
    gold_root: &Rc<ParseNode>,
    models: &ModelSet,
    config: &DecoderConfig,
) -> Result<f64> {
    let lattice = build_lattice(words, gold_root, models, config, 1_000_000)?;
    let scores = lattice.rescore(models);
    Ok(lattice.forward_backward(&scores)?.log_prob)
}

/// Turns forward-backward edge posteriors into weighted training events per
/// model, merging identical (history, future) pairs.
pub fn weighted_events(
    lattices: &[Lattice],
    counts_per_lattice: &[Vec<f64>],
) -> HashMap<ModelKind, Vec<Event>> {
    let mut out: HashMap<ModelKind, Vec<Event>> = HashMap::new();
    for (lattice, counts) in lattices.iter().zip(counts_per_lattice) {
        for (ei, edge) in lattice.edges.iter().enumerate() {
            let w = counts[ei];
            if w <= 0.0 {
                continue;
            }
            for ev in &edge.events {
                out.entry(ev.model).or_default().push(Event {
                    answers: ev.answers.clone(),
                    future: ev.future,
                    weight: w,
                });
            }
        }
    }
    for events in out.values_mut() {
        let drained = std::mem::take(events);
        *events = dedup_events(drained);
    }
    out
}

/// Training configuration mirroring the experiment variations.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub dwc: usize,
    /// Depth the first tree set is pruned to before regrowing (step 2).
    pub prune_depth_m1: u32,
    /// Depth the derivation tree is pruned to before smoothing.
    pub derivation_prune_depth: u32,
    pub reestimation_iterations: usize,
    pub smoothing_iterations: usize,
    pub bucket_min: f64,
    /// Significance pruning threshold in bit-events (experiments C/D).
    pub prune_bit_events: Option<f64>,
    pub use_derivation_model: bool,
    pub use_conjunction: bool,
    pub include_words: bool,
    /// Fraction of the filtered training set actually used (experiment E).
    pub train_fraction: f64,
    pub flexible_dict: FlexibleDict,
    pub lattice_state_cap: usize,
    pub max_children: usize,
    pub rmin: RMinPolicy,
    pub target_oov_rate: f64,
    pub cluster_bound: usize,
    /// Pre-built classification-tree files; supplied files override the
    /// corpus clustering.
    pub bct_files: BctFiles,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            dwc: 2,
            prune_depth_m1: 10,
            derivation_prune_depth: 20,
            reestimation_iterations: 9,
            smoothing_iterations: 20,
            bucket_min: 100.0,
            prune_bit_events: None,
            use_derivation_model: true,
            use_conjunction: true,
            include_words: true,
            train_fraction: 1.0,
            flexible_dict: FlexibleDict::Off,
            lattice_state_cap: 200_000,
            max_children: 8,
            rmin: RMinPolicy::Constant(0.0),
            target_oov_rate: 0.05,
            cluster_bound: 5000,
            bct_files: BctFiles::default(),
        }
    }
}

impl TrainConfig {
    pub fn decoder_config(&self) -> DecoderConfig {
        DecoderConfig {
            dwc: self.dwc,
            use_derivation_model: self.use_derivation_model,
            use_conjunction: self.use_conjunction,
            max_children: self.max_children,
            max_tree_height: None,
            ..DecoderConfig::default()
        }
    }
}

/// Per-run training diagnostics: the training log-probability before each
/// reestimation iteration and the held-out log-probability before each
/// smoothing iteration, per model.
#[derive(Debug, Default)]
pub struct TrainLog {
    pub reestimation_log2: Vec<f64>,
    pub smoothing_log2: BTreeMap<&'static str, Vec<f64>>,
    /// Total held-out event weight per model, for perplexity normalization.
    pub smoothing_weights: BTreeMap<&'static str, f64>,
    pub skipped: Vec<String>,
}

pub struct TrainOutput {
    pub models: ModelSet,
    pub dataset: Dataset,
    pub log: TrainLog,
}

fn grow_models(
    models: &ModelSet,
    events: &HashMap<ModelKind, Vec<Event>>,
    rmin: RMinPolicy,
    prune_bit_events: Option<f64>,
    dwc: usize,
) -> Result<ModelSet> {
    let mut out = models.clone();
    for kind in ModelKind::ALL {
        if out.model(kind).is_none() {
            continue;
        }
        let num_futures = match kind {
            ModelKind::Tag => out.tags.len(),
            ModelKind::Label => out.labels.len(),
            ModelKind::Extension => Extension::PREDICTABLE.len(),
            ModelKind::Conjunction => 2,
            ModelKind::Derivation => dwc.max(2),
        };
        let tree = match events.get(&kind) {
            Some(evs) if !evs.is_empty() => {
                let questions = out.catalog(kind).questions.clone();
                let mut tree =
                    DecisionTree::grow_with_futures(evs, questions, rmin, num_futures)?;
                if let Some(threshold) = prune_bit_events {
                    tree = tree.prune_significance(threshold);
                }
                tree
            }
            _ => DecisionTree::single_leaf(num_futures, vec![1.0; num_futures]),
        };
        *out.model_mut(kind).unwrap() = SmoothedModel::new(tree);
    }
    Ok(out)
}

fn fb_counts_under(
    lattices: &[Lattice],
    models: &ModelSet,
) -> Result<(Vec<Vec<f64>>, f64)> {
    let mut counts = Vec::with_capacity(lattices.len());
    let mut total_log2 = 0.0;
    for lattice in lattices {
        let scores = lattice.rescore(models);
        let fb = lattice.forward_backward(&scores)?;
        total_log2 += fb.log_prob / std::f64::consts::LN_2;
        counts.push(fb.counts);
    }
    Ok((counts, total_log2))
}

/// Forward-backward reestimation of leaf distributions: the history-to-leaf
/// mapping is frozen, transition probabilities come from per-leaf
/// categoricals initialized from the half-weight smoothed trees, and each
/// iteration replaces them with normalized posterior counts. The training
/// log2-probability before each iteration is returned (non-decreasing).
fn reestimate(
    models: &mut ModelSet,
    lattices: &[Lattice],
    iterations: usize,
) -> Result<Vec<f64>> {
    if iterations == 0 || lattices.is_empty() {
        return Ok(Vec::new());
    }
    // Freeze leaf routes per event.
    let mut routes: Vec<Vec<Vec<(ModelKind, u32)>>> = Vec::with_capacity(lattices.len());
    for lattice in lattices {
        let mut per_edge = Vec::with_capacity(lattice.edges.len());
        for e in &lattice.edges {
            let leaves: Vec<(ModelKind, u32)> = e
                .events
                .iter()
                .map(|ev| {
                    let tree = &models.model(ev.model).unwrap().tree;
                    (ev.model, tree.leaf_for(&ev.answers))
                })
                .collect();
            per_edge.push(leaves);
        }
        routes.push(per_edge);
    }
    // Initialize per-leaf categoricals from the smoothed distributions so
    // every future starts strictly positive.
    let mut q: HashMap<ModelKind, Vec<Vec<f64>>> = HashMap::new();
    for kind in ModelKind::ALL {
        let Some(m) = models.model(kind) else { continue };
        let n_leaves = m.tree.nodes.len();
        let mut table = vec![Vec::new(); n_leaves];
        for (i, node) in m.tree.nodes.iter().enumerate() {
            if node.is_leaf() {
                table[i] = m.smoothed_distribution_at(i as u32);
            }
        }
        q.insert(kind, table);
    }

    let mut lls = Vec::with_capacity(iterations);
    let mut final_counts: HashMap<ModelKind, HashMap<u32, Vec<f64>>> = HashMap::new();
    for _ in 0..iterations {
        let mut ll = 0.0;
        let mut new_counts: HashMap<ModelKind, HashMap<u32, Vec<f64>>> = HashMap::new();
        for (lattice, lattice_routes) in lattices.iter().zip(&routes) {
            let scores: Vec<f64> = lattice
                .edges
                .iter()
                .zip(lattice_routes)
                .map(|(e, leaves)| {
                    let mut lp = 0.0;
                    for (ev, &(kind, leaf)) in e.events.iter().zip(leaves) {
                        let dist = &q[&kind][leaf as usize];
                        let p = match ev.model {
                            ModelKind::Derivation => {
                                let denom: f64 = dist.iter().take(ev.candidates).sum();
                                if denom > 0.0 {
                                    dist[ev.future as usize] / denom
                                } else {
                                    0.0
                                }
                            }
                            _ => dist[ev.future as usize],
                        };
                        lp += ln_floor(p);
                    }
                    lp
                })
                .collect();
            let fb = lattice.forward_backward(&scores)?;
            ll += fb.log_prob / std::f64::consts::LN_2;
            for ((edge, leaves), &c) in
                lattice.edges.iter().zip(lattice_routes).zip(&fb.counts)
            {
                if c <= 0.0 {
                    continue;
                }
                for (ev, &(kind, leaf)) in edge.events.iter().zip(leaves) {
                    let n_futures = models.model(kind).unwrap().tree.num_futures;
                    let entry = new_counts
                        .entry(kind)
                        .or_default()
                        .entry(leaf)
                        .or_insert_with(|| vec![0.0; n_futures]);
                    entry[ev.future as usize] += c;
                }
            }
        }
        lls.push(ll);
        // M-step: normalized counts replace the categoricals; leaves with no
        // evidence keep their current distribution.
        for (kind, leaf_counts) in &new_counts {
            let table = q.get_mut(kind).unwrap();
            for (&leaf, counts) in leaf_counts {
                let total: f64 = counts.iter().sum();
                if total > 0.0 {
                    table[leaf as usize] = counts.iter().map(|c| c / total).collect();
                }
            }
        }
        final_counts = new_counts;
    }

    // Write the final posterior counts back into the trees.
    for (kind, leaf_counts) in final_counts {
        if let Some(m) = models.model_mut(kind) {
            m.tree.replace_counts(&leaf_counts);
        }
    }
    Ok(lls)
}

/// The full training schedule over pre-filtered trees.
pub fn train_pipeline(
    train_trees: &[TreebankTree],
    heldout_trees: &[TreebankTree],
    head_table: TreeHeadTable,
    cfg: &TrainConfig,
) -> Result<TrainOutput> {
    if train_trees.is_empty() {
        return Err(Error::Train("no training trees after filtering".into()));
    }
    let keep = ((train_trees.len() as f64) * cfg.train_fraction).floor() as usize;
    let keep = keep.clamp(1, train_trees.len());
    let train_trees = &train_trees[..keep];

    let mut ds = Dataset::build(train_trees, cfg.target_oov_rate)?;
    let held_sentences = ds.intern_more(heldout_trees);
    let encodings = build_encodings_with(&ds, cfg.cluster_bound, &cfg.bct_files)?;

    let mut models = ModelSet::uniform(
        ds.words.clone(),
        ds.tags.clone(),
        ds.labels.clone(),
        encodings,
        head_table,
        ds.tag_dictionary.clone(),
        cfg.include_words,
        cfg.dwc,
    );
    models.flexible_dict = cfg.flexible_dict;
    models.use_conjunction = cfg.use_conjunction;
    if !cfg.use_derivation_model {
        models.derivation_model = None;
    }

    let dcfg = cfg.decoder_config();
    let mut log = TrainLog::default();

    // Build per-sentence lattices once; their structure is independent of
    // the model parameters.
    let mut lattices = Vec::new();
    for (i, s) in ds.sentences.iter().enumerate() {
        match sentence_lattice(s, &models, &dcfg, cfg.lattice_state_cap) {
            Ok(l) => lattices.push(l),
            Err(e) => {
                log::warn!("skipping training sentence {i}: {e}");
                log.skipped.push(format!("train sentence {i}: {e}"));
            }
        }
    }
    if lattices.is_empty() {
        return Err(Error::Train("every training sentence was skipped".into()));
    }

    // Step 1: grow the first tree set from uniform-model F-B counts.
    let (counts, _) = fb_counts_under(&lattices, &models)?;
    let events = weighted_events(&lattices, &counts);
    let m1 = grow_models(&models, &events, cfg.rmin, cfg.prune_bit_events, cfg.dwc)?;

    // Step 2: prune to a maximum depth.
    let mut m2 = m1.clone();
    for kind in ModelKind::ALL {
        if let Some(m) = m2.model_mut(kind) {
            m.tree = m.tree.prune_depth(cfg.prune_depth_m1);
        }
    }

    // Step 3: regrow from F-B counts under the pruned models.
    let (counts, _) = fb_counts_under(&lattices, &m2)?;
    let events = weighted_events(&lattices, &counts);
    let mut m3 = grow_models(&m2, &events, cfg.rmin, cfg.prune_bit_events, cfg.dwc)?;

    // Step 4: forward-backward reestimation of the leaf distributions.
    log.reestimation_log2 = reestimate(&mut m3, &lattices, cfg.reestimation_iterations)?;
    drop(lattices);

    // The self-organized derivation tree is pruned before smoothing.
    if let Some(m) = m3.derivation_model.as_mut() {
        m.tree = m.tree.prune_depth(cfg.derivation_prune_depth);
    }

    // Smooth every tree on held-out data, weighting held-out events by their
    // lattice posteriors under the trained model.
    if cfg.smoothing_iterations > 0 && !held_sentences.is_empty() {
        let mut held_lattices = Vec::new();
        for (i, s) in held_sentences.iter().enumerate() {
            match sentence_lattice(s, &m3, &dcfg, cfg.lattice_state_cap) {
                Ok(l) => held_lattices.push(l),
                Err(e) => {
                    log::warn!("skipping held-out sentence {i}: {e}");
                    log.skipped.push(format!("held-out sentence {i}: {e}"));
                }
            }
        }
        if !held_lattices.is_empty() {
            let (counts, _) = fb_counts_under(&held_lattices, &m3)?;
            let events = weighted_events(&held_lattices, &counts);
            for kind in ModelKind::ALL {
                let Some(evs) = events.get(&kind) else { continue };
                if evs.is_empty() {
                    continue;
                }
                if let Some(m) = m3.model_mut(kind) {
                    let lls = m.fb_smooth(evs, cfg.smoothing_iterations, cfg.bucket_min)?;
                    log.smoothing_log2.insert(kind.name(), lls);
                    log.smoothing_weights
                        .insert(kind.name(), evs.iter().map(|e| e.weight).sum());
                }
            }
        }
    }

    Ok(TrainOutput {
        models: m3,
        dataset: ds,
        log,
    })
}

/// Builds the constrained lattice of one interned sentence.
pub fn sentence_lattice(
    sentence: &Sentence,
    models: &ModelSet,
    config: &DecoderConfig,
    state_cap: usize,
) -> Result<Lattice> {
    if sentence.tree.children.is_empty() {
        return Err(Error::Train("empty gold tree".into()));
    }
    if max_fanout(&sentence.tree) > config.max_children {
        return Err(Error::Train(format!(
            "gold tree exceeds the fan-out bound of {}",
            config.max_children
        )));
    }
    let gold = gold_to_parse(&sentence.tree, &sentence.words, &models.resolved_heads)?;
    build_lattice(&sentence.words, &gold, models, config, state_cap)
}

fn max_fanout(node: &GoldNode) -> usize {
    let mut m = node.children.len();
    for c in &node.children {
        if let GoldChild::Node(n) = c {
            m = m.max(max_fanout(n));
        }
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::treebank::parse_bracketed;

    fn toy_setup(lines: &[&str]) -> (Dataset, ModelSet) {
        let trees: Vec<_> = lines.iter().map(|l| parse_bracketed(l).unwrap()).collect();
        let ds = Dataset::build(&trees, 0.0).unwrap();
        let enc = build_encodings(&ds, 5000).unwrap();
        let tht = TreeHeadTable::rightmost_fallback_raw(&ds.labels, &ds.tags);
        let ms = ModelSet::uniform(
            ds.words.clone(),
            ds.tags.clone(),
            ds.labels.clone(),
            enc,
            tht,
            ds.tag_dictionary.clone(),
            true,
            2,
        );
        (ds, ms)
    }

    #[test]
    fn one_word_tree_gives_chain_of_four() {
        let (ds, ms) = toy_setup(&["[N w_T N]", "[N v_T N]"]);
        let dcfg = DecoderConfig::default();
        let lattice = sentence_lattice(&ds.sentences[0], &ms, &dcfg, 10_000).unwrap();
        assert_eq!(lattice.edges.len(), 4, "tag, extension, label, conjunction");
        assert_eq!(lattice.n_states, 5);
        // Chain: every edge posterior is 1.
        let scores = lattice.rescore(&ms);
        let fb = lattice.forward_backward(&scores).unwrap();
        for c in fb.counts {
            assert!((c - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn two_word_lattice_merges_tag_orders() {
        let (ds, ms) = toy_setup(&["[N a_X b_Y N]"]);
        let dcfg = DecoderConfig::default();
        let lattice = sentence_lattice(&ds.sentences[0], &ms, &dcfg, 10_000).unwrap();
        // The source branches two ways (tag a first or tag b first).
        let source_out = lattice
            .edges
            .iter()
            .filter(|e| e.from == lattice.source)
            .count();
        assert_eq!(source_out, 2);
        // Some state is reached by both orders (in-degree 2).
        let mut indeg = vec![0usize; lattice.n_states];
        for e in &lattice.edges {
            indeg[e.to as usize] += 1;
        }
        assert!(indeg.iter().any(|&d| d >= 2), "tag orders must re-merge");
    }

    #[test]
    fn dwc_one_gives_single_chain() {
        let (ds, ms) = toy_setup(&["[N a_X b_Y N]"]);
        let dcfg = DecoderConfig {
            dwc: 1,
            ..DecoderConfig::default()
        };
        let lattice = sentence_lattice(&ds.sentences[0], &ms, &dcfg, 10_000).unwrap();
        // A chain: every state has at most one outgoing edge.
        let mut outdeg = vec![0usize; lattice.n_states];
        for e in &lattice.edges {
            outdeg[e.from as usize] += 1;
        }
        assert!(outdeg.iter().all(|&d| d <= 1));
    }

    #[test]
    fn fb_counts_are_scale_invariant() {
        let (ds, ms) = toy_setup(&["[N a_X b_Y N]"]);
        let dcfg = DecoderConfig::default();
        let lattice = sentence_lattice(&ds.sentences[0], &ms, &dcfg, 10_000).unwrap();
        let scores = lattice.rescore(&ms);
        let fb1 = lattice.forward_backward(&scores).unwrap();
        let scaled: Vec<f64> = scores.iter().map(|s| s + 2.0f64.ln()).collect();
        let fb2 = lattice.forward_backward(&scaled).unwrap();
        for (a, b) in fb1.counts.iter().zip(&fb2.counts) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn per_feature_posteriors_sum_to_one() {
        let (ds, ms) = toy_setup(&["[S [N a_X b_Y N] c_Z S]"]);
        let dcfg = DecoderConfig::default();
        let lattice = sentence_lattice(&ds.sentences[0], &ms, &dcfg, 10_000).unwrap();
        let scores = lattice.rescore(&ms);
        let fb = lattice.forward_backward(&scores).unwrap();
        // Each word's tag is assigned exactly once per derivation, so the
        // posterior mass of its tag edges is 1. Identify tag edges by the
        // span of the assigned leaf: group posteriors by (feature, span).
        let mut tag_mass: HashMap<u32, f64> = HashMap::new();
        for (ei, e) in lattice.edges.iter().enumerate() {
            for ev in &e.events {
                if ev.model == ModelKind::Tag {
                    // Recover which word: the tag event's future is the tag,
                    // shared here by construction; use the edge target's
                    // stack index instead. Simpler: count total tag mass,
                    // which must equal the number of words.
                    *tag_mass.entry(0).or_default() += fb.counts[ei];
                }
            }
        }
        assert!((tag_mass[&0] - 3.0).abs() < 1e-9);
        // Alpha at sink equals beta at source.
        assert!(
            (fb.alpha[lattice.sink as usize] - fb.beta[lattice.source as usize]).abs() < 1e-9
        );
    }

    #[test]
    fn spanning_unary_chain_is_rejected() {
        let (ds, ms) = toy_setup(&["[S [N w_T N] S]", "[S [N w_T N] v_T S]"]);
        let dcfg = DecoderConfig::default();
        let err = sentence_lattice(&ds.sentences[0], &ms, &dcfg, 10_000);
        assert!(err.is_err());
        // The non-degenerate sentence still works.
        assert!(sentence_lattice(&ds.sentences[1], &ms, &dcfg, 10_000).is_ok());
    }

    #[test]
    fn reestimation_is_monotone_on_toy_corpus() {
        let lines: Vec<String> = (0..10)
            .map(|i| {
                if i % 2 == 0 {
                    "[S [N a_X b_Y N] c_Z S]".to_string()
                } else {
                    "[S a_X [N b_Y c_Z N] S]".to_string()
                }
            })
            .collect();
        let refs: Vec<&str> = lines.iter().map(|s| s.as_str()).collect();
        let (ds, mut ms) = toy_setup(&refs);
        let dcfg = DecoderConfig::default();
        let lattices: Vec<Lattice> = ds
            .sentences
            .iter()
            .map(|s| sentence_lattice(s, &ms, &dcfg, 10_000).unwrap())
            .collect();
        let lls = reestimate(&mut ms, &lattices, 6).unwrap();
        assert_eq!(lls.len(), 6);
        for w in lls.windows(2) {
            assert!(w[1] >= w[0] - 1e-9, "training log-prob decreased: {w:?}");
        }
    }
}
