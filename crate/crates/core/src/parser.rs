//! The decoding engine: bottom-up state expansion under the derivational
//! window constraint, and a stack decoder that buckets states by their
//! (tags, labels, extensions) decision counts, prunes below a per-stack
//! score threshold, and revives pruned states by lowering the threshold
//! when the search starves.

use std::collections::{BTreeMap, HashMap};
use std::rc::Rc;

use crate::bct::Answer;
use crate::error::{Error, Result};
use crate::features::{
    detect_constituent, Extension, Feat, FeatureKind, ParseNode, WindowCtx,
};
use crate::models::{ModelKind, ModelSet};
use crate::treebank::{TreeChild, TreebankTree, Token, ROOT_LABEL};

/// Probability floor applied per factor when entering log space.
pub const LOG_FLOOR: f64 = -700.0;

#[derive(Debug, Clone)]
pub struct DecoderConfig {
    /// Derivational window constraint: how many pending assignments, left to
    /// right, may be made next.
    pub dwc: usize,
    /// Per-stack pruning threshold factor in [0,1]; states scoring below
    /// lambda * p_max are pruned (temporarily). 0 disables pruning.
    pub stack_lambda: f64,
    /// Permanent per-stack size cap; the lowest scoring state is evicted.
    pub max_stack_size: usize,
    /// Maximum children per constituent.
    pub max_children: usize,
    /// Maximum constituent nesting height, bounding unary chains during
    /// search. `None` uses sentence length + 8.
    pub max_tree_height: Option<u32>,
    /// False reproduces the leftmost-derivation-only configuration: only the
    /// first pending assignment is ever made and no derivation model is
    /// consulted.
    pub use_derivation_model: bool,
    /// False removes the conjunction feature: conjunction slots are assigned
    /// `false` with probability 1.
    pub use_conjunction: bool,
    /// Hard cap on state expansions per sentence.
    pub max_expansions: usize,
    /// How many times the pruning threshold may be lowered to revive
    /// previously pruned states.
    pub max_revivals: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            dwc: 2,
            stack_lambda: 0.01,
            max_stack_size: 10_000,
            max_children: 8,
            max_tree_height: None,
            use_derivation_model: true,
            use_conjunction: true,
            max_expansions: 2_000_000,
            max_revivals: 10,
        }
    }
}

/// Number of tagging, labeling and extension decisions made in a state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct StackIndex {
    pub tags: u32,
    pub labels: u32,
    pub extensions: u32,
}

impl StackIndex {
    pub fn total(self) -> u32 {
        self.tags + self.labels + self.extensions
    }

    fn bump(self, kind: TransitionKind) -> StackIndex {
        let mut s = self;
        match kind {
            TransitionKind::Tag => s.tags += 1,
            TransitionKind::Label => s.labels += 1,
            TransitionKind::Extension => s.extensions += 1,
            TransitionKind::Conjunction => {}
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransitionKind {
    Tag,
    Label,
    Extension,
    Conjunction,
}

/// One feature-value assignment event recorded on a transition, in terms of
/// the answers to the owning model's question catalog.
#[derive(Debug, Clone)]
pub struct TransitionEvent {
    pub model: ModelKind,
    pub answers: Box<[Answer]>,
    pub future: u32,
    /// For derivation events: how many candidate positions were legal.
    pub candidates: usize,
}

/// A successor state produced by one feature-value assignment.
pub struct Successor {
    pub nodes: Vec<Rc<ParseNode>>,
    pub total_nodes: usize,
    pub log_prob: f64,
    pub kind: TransitionKind,
    pub is_goal: bool,
    /// Present when the assignment completed a constituent and wrapped it.
    pub wrap: Option<(usize, usize)>,
    pub position: usize,
    pub feature: FeatureKind,
    pub value: u32,
    pub events: Vec<TransitionEvent>,
}

/// The positions a state may advance next: the first `dwc` incomplete nodes.
pub fn candidate_positions(nodes: &[Rc<ParseNode>], dwc: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(dwc);
    for (i, n) in nodes.iter().enumerate() {
        if !n.completed() {
            out.push(i);
            if out.len() == dwc {
                break;
            }
        }
    }
    out
}

/// Extension values that are geometrically possible at a position.
fn legal_extensions(len: usize, position: usize, is_leaf: bool) -> &'static [Extension] {
    if len == 1 {
        // A spanning leaf can only become a unary constituent; a spanning
        // internal node takes the root extension via the fold in
        // `apply_assignment` and never reaches this point.
        debug_assert!(is_leaf);
        return &[Extension::Unary];
    }
    if position == 0 {
        &[Extension::Left, Extension::Unary]
    } else if position + 1 == len {
        &[Extension::Right, Extension::Unary]
    } else {
        &[Extension::Left, Extension::Up, Extension::Right, Extension::Unary]
    }
}

/// Result of applying one assignment: the new node array, the new total
/// node count, whether the state is now a goal, and the wrapped run if a
/// constituent formed.
pub type Applied = (Vec<Rc<ParseNode>>, usize, bool, Option<(usize, usize)>);

/// Applies one feature-value assignment, wrapping any completed constituent
/// and folding the root extension onto a node that comes to span the whole
/// sentence. Returns `None` when the assignment is geometrically illegal
/// (fan-out or height bound exceeded).
#[allow(clippy::too_many_arguments)]
pub fn apply_assignment(
    nodes: &[Rc<ParseNode>],
    total_nodes: usize,
    position: usize,
    feature: FeatureKind,
    value: u32,
    models: &ModelSet,
    max_children: usize,
    max_height: u32,
) -> Result<Option<Applied>> {
    let mut node = (*nodes[position]).clone();
    let mut is_goal = false;
    match feature {
        FeatureKind::Tag => node.tag = Feat::Value(value),
        FeatureKind::Label => node.label = Feat::Value(value),
        FeatureKind::Conjunction => {
            node.conj = Feat::Value(value != 0);
            // The head rides on the conjunction assignment; after it, only
            // the extension is missing.
            let (w, t) = models.resolved_heads.assign_head(
                node.label.value().expect("label precedes conjunction"),
                &node.children,
            )?;
            node.word = w;
            node.tag = t;
            if nodes.len() == 1 {
                // The node spans the sentence: the root extension follows
                // with probability 1 and the state is a goal.
                node.extension = Feat::Value(Extension::Root);
                is_goal = true;
            }
        }
        FeatureKind::Extension => {
            node.extension = Feat::Value(Extension::from_index(value));
        }
        FeatureKind::Word => unreachable!("words are assigned at initialization or by heads"),
    }

    let mut new_nodes: Vec<Rc<ParseNode>> = nodes.to_vec();
    new_nodes[position] = Rc::new(node);
    let mut new_total = total_nodes;
    let mut wrap = None;
    if feature == FeatureKind::Extension {
        if let Some((i, j)) = detect_constituent(&new_nodes, position) {
            if j - i + 1 > max_children {
                return Ok(None);
            }
            let children: Vec<Rc<ParseNode>> = new_nodes[i..=j].to_vec();
            let parent = ParseNode::parent_over(children);
            if parent.height > max_height {
                return Ok(None);
            }
            new_nodes.splice(i..=j, [Rc::new(parent)]);
            new_total += 1;
            wrap = Some((i, j));
        }
    }
    Ok(Some((new_nodes, new_total, is_goal, wrap)))
}

fn make_ctx<'a>(
    nodes: &'a [Rc<ParseNode>],
    position: usize,
    sentence_words: &'a [u32],
    total_nodes: usize,
    models: &'a ModelSet,
) -> WindowCtx<'a> {
    WindowCtx {
        nodes,
        position,
        word_index: nodes[position].span.0 as usize,
        sentence_words,
        total_nodes,
        head_table: &models.resolved_heads,
    }
}

fn ln_floor(p: f64) -> f64 {
    if p > 0.0 {
        p.ln().max(LOG_FLOOR)
    } else {
        LOG_FLOOR
    }
}

/// Restricts the expansion to gold values during lattice construction: maps
/// (position, feature) to the only legal value.
pub type GoldFilter<'a> = &'a dyn Fn(usize, FeatureKind) -> u32;

/// Expands a state into its successors. The derivational window constraint
/// picks the candidate positions; immediate features (label, conjunction)
/// are assigned at a single forced position, everything else branches over
/// the candidates and, when a derivation model is present, is weighted by
/// the active-node distribution.
pub fn expand(
    nodes: &[Rc<ParseNode>],
    total_nodes: usize,
    sentence_words: &[u32],
    models: &ModelSet,
    config: &DecoderConfig,
    gold: Option<GoldFilter>,
) -> Result<Vec<Successor>> {
    let cands = candidate_positions(nodes, config.dwc);
    if cands.is_empty() {
        return Ok(Vec::new());
    }
    let max_height = config
        .max_tree_height
        .unwrap_or(sentence_words.len() as u32 + 8);

    let mut out = Vec::new();

    // Immediate features: a new constituent's label and conjunction are
    // assigned as soon as the node is within the window, without branching
    // over positions.
    let immediate = cands.iter().copied().find(|&p| {
        matches!(
            nodes[p].next_feature(),
            Some(FeatureKind::Label) | Some(FeatureKind::Conjunction)
        )
    });
    if let Some(p) = immediate {
        let feature = nodes[p].next_feature().unwrap();
        expand_values(
            nodes,
            total_nodes,
            sentence_words,
            models,
            config,
            p,
            feature,
            0.0,
            None,
            gold,
            max_height,
            &mut out,
        )?;
        return Ok(out);
    }

    // Pendable features: branch over candidate positions.
    let chosen: Vec<usize> = if config.use_derivation_model {
        cands.clone()
    } else {
        vec![cands[0]]
    };
    let active_dist = if config.use_derivation_model && cands.len() > 1 {
        let ctx = make_ctx(nodes, cands[0], sentence_words, total_nodes, models);
        Some((
            models.score_active(&ctx, cands.len()),
            models.answers(ModelKind::Derivation, &ctx),
        ))
    } else {
        None
    };

    for (ci, &p) in chosen.iter().enumerate() {
        let feature = nodes[p].next_feature().expect("candidate is incomplete");
        let (active_logp, active_event) = match &active_dist {
            Some((dist, answers)) => (
                ln_floor(dist[ci]),
                Some(TransitionEvent {
                    model: ModelKind::Derivation,
                    answers: answers.clone(),
                    future: ci as u32,
                    candidates: cands.len(),
                }),
            ),
            None => (0.0, None),
        };
        expand_values(
            nodes,
            total_nodes,
            sentence_words,
            models,
            config,
            p,
            feature,
            active_logp,
            active_event,
            gold,
            max_height,
            &mut out,
        )?;
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn expand_values(
    nodes: &[Rc<ParseNode>],
    total_nodes: usize,
    sentence_words: &[u32],
    models: &ModelSet,
    config: &DecoderConfig,
    position: usize,
    feature: FeatureKind,
    active_logp: f64,
    active_event: Option<TransitionEvent>,
    gold: Option<GoldFilter>,
    max_height: u32,
    out: &mut Vec<Successor>,
) -> Result<()> {
    let node = &nodes[position];
    let gold_value = gold.map(|f| f(position, feature));

    // (value, model probability, event) triples for this decision.
    let mut choices: Vec<(u32, f64, Option<TransitionEvent>)> = Vec::new();
    match feature {
        FeatureKind::Tag => {
            let ctx = make_ctx(nodes, position, sentence_words, total_nodes, models);
            let word = node.word.value().expect("leaves always carry a word");
            let (dist, allowed) = models.score_tag(&ctx, word);
            let answers = models.answers(ModelKind::Tag, &ctx);
            let values: Vec<u32> = match gold_value {
                Some(v) => vec![v],
                None => allowed,
            };
            for v in values {
                choices.push((
                    v,
                    dist[v as usize],
                    Some(TransitionEvent {
                        model: ModelKind::Tag,
                        answers: answers.clone(),
                        future: v,
                        candidates: 0,
                    }),
                ));
            }
        }
        FeatureKind::Label => {
            let ctx = make_ctx(nodes, position, sentence_words, total_nodes, models);
            let dist = models.score(ModelKind::Label, &ctx);
            let answers = models.answers(ModelKind::Label, &ctx);
            let values: Vec<u32> = match gold_value {
                Some(v) => vec![v],
                None => (0..models.labels.len() as u32).collect(),
            };
            for v in values {
                choices.push((
                    v,
                    dist[v as usize],
                    Some(TransitionEvent {
                        model: ModelKind::Label,
                        answers: answers.clone(),
                        future: v,
                        candidates: 0,
                    }),
                ));
            }
        }
        FeatureKind::Conjunction => {
            if config.use_conjunction {
                let ctx = make_ctx(nodes, position, sentence_words, total_nodes, models);
                let dist = models.score(ModelKind::Conjunction, &ctx);
                let answers = models.answers(ModelKind::Conjunction, &ctx);
                let values: Vec<u32> = match gold_value {
                    Some(v) => vec![v],
                    None => vec![0, 1],
                };
                for v in values {
                    choices.push((
                        v,
                        dist[v as usize],
                        Some(TransitionEvent {
                            model: ModelKind::Conjunction,
                            answers: answers.clone(),
                            future: v,
                            candidates: 0,
                        }),
                    ));
                }
            } else {
                // The conjunction feature is disabled: assign `false` with
                // probability 1 and record no event.
                choices.push((0, 1.0, None));
            }
        }
        FeatureKind::Extension => {
            let ctx = make_ctx(nodes, position, sentence_words, total_nodes, models);
            let dist = models.score(ModelKind::Extension, &ctx);
            let answers = models.answers(ModelKind::Extension, &ctx);
            let legal = legal_extensions(nodes.len(), position, node.is_leaf());
            let values: Vec<u32> = match gold_value {
                Some(v) => vec![v],
                None => legal.iter().map(|&e| e as u32).collect(),
            };
            for v in values {
                choices.push((
                    v,
                    dist[v as usize],
                    Some(TransitionEvent {
                        model: ModelKind::Extension,
                        answers: answers.clone(),
                        future: v,
                        candidates: 0,
                    }),
                ));
            }
        }
        FeatureKind::Word => unreachable!("words are never pending"),
    }

    let kind = match feature {
        FeatureKind::Tag => TransitionKind::Tag,
        FeatureKind::Label => TransitionKind::Label,
        FeatureKind::Extension => TransitionKind::Extension,
        FeatureKind::Conjunction => TransitionKind::Conjunction,
        FeatureKind::Word => unreachable!(),
    };

    for (value, prob, event) in choices {
        let Some((new_nodes, new_total, is_goal, wrap)) = apply_assignment(
            nodes,
            total_nodes,
            position,
            feature,
            value,
            models,
            config.max_children,
            max_height,
        )?
        else {
            continue;
        };
        let mut events = Vec::with_capacity(2);
        if let Some(ae) = &active_event {
            events.push(ae.clone());
        }
        if let Some(e) = event {
            events.push(e);
        }
        out.push(Successor {
            nodes: new_nodes,
            total_nodes: new_total,
            log_prob: active_logp + ln_floor(prob),
            kind,
            is_goal,
            wrap,
            position,
            feature,
            value,
            events,
        });
    }
    Ok(())
}

/// Canonical byte encoding of a state's node array: states with equal
/// signatures are the same state and their derivation masses add.
pub fn signature(nodes: &[Rc<ParseNode>]) -> Box<[u8]> {
    fn push_feat(out: &mut Vec<u8>, f: Feat<u32>) {
        match f {
            Feat::Unassigned => out.push(0),
            Feat::Null => out.push(1),
            Feat::Value(v) => {
                out.push(2);
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    fn visit(out: &mut Vec<u8>, n: &ParseNode) {
        out.push(b'(');
        push_feat(out, n.word);
        push_feat(out, n.tag);
        push_feat(out, n.label);
        push_feat(
            out,
            match n.extension {
                Feat::Unassigned => Feat::Unassigned,
                Feat::Null => Feat::Null,
                Feat::Value(e) => Feat::Value(e as u32),
            },
        );
        push_feat(
            out,
            match n.conj {
                Feat::Unassigned => Feat::Unassigned,
                Feat::Null => Feat::Null,
                Feat::Value(b) => Feat::Value(b as u32),
            },
        );
        for c in &n.children {
            visit(out, c);
        }
        out.push(b')');
    }
    let mut out = Vec::with_capacity(nodes.len() * 24);
    for n in nodes {
        visit(&mut out, n);
    }
    out.into_boxed_slice()
}

/// The initial state: one leaf per word; with known tags the leaves are
/// pre-tagged and only structure is searched.
pub fn initial_nodes(words: &[u32], known_tags: Option<&[u32]>) -> Vec<Rc<ParseNode>> {
    words
        .iter()
        .enumerate()
        .map(|(i, &w)| {
            let mut leaf = ParseNode::leaf(w, i as u32);
            if let Some(tags) = known_tags {
                leaf.tag = Feat::Value(tags[i]);
            }
            Rc::new(leaf)
        })
        .collect()
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

struct StateData {
    nodes: Vec<Rc<ParseNode>>,
    total_nodes: usize,
    stack: StackIndex,
    log_total: f64,
    log_pending: f64,
    evicted: bool,
}

/// A ranked parse with its summed-derivation log probability (natural log).
pub struct RankedParse {
    pub tree: Rc<ParseNode>,
    pub log_prob: f64,
}

pub struct DecodeResult {
    pub parses: Vec<RankedParse>,
    pub expansions: usize,
    /// Diagnostic line describing the best partial state when no parse was
    /// found.
    pub best_partial: Option<String>,
}

/// Runs the stack decoder and returns up to `top_k` complete parses ordered
/// by probability across all goal stacks.
pub fn decode(
    sentence_words: &[u32],
    known_tags: Option<&[u32]>,
    models: &ModelSet,
    config: &DecoderConfig,
    top_k: usize,
) -> Result<DecodeResult> {
    if sentence_words.is_empty() {
        return Err(Error::Domain("cannot parse an empty sentence".into()));
    }
    let init_nodes = initial_nodes(sentence_words, known_tags);
    let init_total = init_nodes.len();

    let mut states: Vec<StateData> = Vec::new();
    let mut by_sig: HashMap<Box<[u8]>, usize> = HashMap::new();
    // Stacks keyed by (total decisions, tags, labels, extensions): every
    // transition moves to an equal (conjunction) or later key.
    let mut stacks: BTreeMap<(u32, u32, u32, u32), Vec<usize>> = BTreeMap::new();
    let mut goals: HashMap<Box<[u8]>, RankedParse> = HashMap::new();

    let stack_key = |s: StackIndex| (s.total(), s.tags, s.labels, s.extensions);

    let sig0 = signature(&init_nodes);
    states.push(StateData {
        nodes: init_nodes,
        total_nodes: init_total,
        stack: StackIndex::default(),
        log_total: 0.0,
        log_pending: 0.0,
        evicted: false,
    });
    by_sig.insert(sig0, 0);
    stacks.entry((0, 0, 0, 0)).or_default().push(0);

    let mut lambda = config.stack_lambda.clamp(0.0, 1.0);
    let mut revivals = 0usize;
    let mut expansions = 0usize;
    let mut capped = false;

    'search: loop {
        let mut advanced_any = false;
        let mut cursor: Option<(u32, u32, u32, u32)> = None;
        loop {
            let key = match cursor {
                None => match stacks.keys().next() {
                    Some(&k) => k,
                    None => break,
                },
                Some(prev) => {
                    match stacks.range((
                        std::ops::Bound::Excluded(prev),
                        std::ops::Bound::Unbounded,
                    ))
                    .next()
                    {
                        Some((&k, _)) => k,
                        None => break,
                    }
                }
            };
            cursor = Some(key);

            // Fixpoint within the stack: conjunction successors land here.
            while let Some(members) = stacks.get(&key).cloned() {
                let p_max = members
                    .iter()
                    .filter(|&&id| !states[id].evicted)
                    .map(|&id| states[id].log_total)
                    .fold(f64::NEG_INFINITY, f64::max);
                if p_max == f64::NEG_INFINITY {
                    break;
                }
                let threshold = if lambda > 0.0 {
                    p_max + lambda.ln()
                } else {
                    f64::NEG_INFINITY
                };
                let expandable: Vec<usize> = members
                    .iter()
                    .copied()
                    .filter(|&id| {
                        !states[id].evicted
                            && states[id].log_pending != f64::NEG_INFINITY
                            && states[id].log_total >= threshold - 1e-12
                    })
                    .collect();
                if expandable.is_empty() {
                    break;
                }
                for id in expandable {
                    let pending = states[id].log_pending;
                    if pending == f64::NEG_INFINITY {
                        continue;
                    }
                    states[id].log_pending = f64::NEG_INFINITY;
                    let succs = expand(
                        &states[id].nodes,
                        states[id].total_nodes,
                        sentence_words,
                        models,
                        config,
                        None,
                    )?;
                    expansions += 1;
                    advanced_any = true;
                    let parent_stack = states[id].stack;
                    for s in succs {
                        let mass = pending + s.log_prob;
                        if s.is_goal {
                            let sig = signature(&s.nodes);
                            match goals.get_mut(&sig) {
                                Some(g) => g.log_prob = log_add(g.log_prob, mass),
                                None => {
                                    goals.insert(
                                        sig,
                                        RankedParse {
                                            tree: s.nodes[0].clone(),
                                            log_prob: mass,
                                        },
                                    );
                                }
                            }
                            continue;
                        }
                        let sig = signature(&s.nodes);
                        let new_stack = parent_stack.bump(s.kind);
                        match by_sig.get(&sig) {
                            Some(&sid) if !states[sid].evicted => {
                                states[sid].log_total = log_add(states[sid].log_total, mass);
                                states[sid].log_pending =
                                    log_add(states[sid].log_pending, mass);
                            }
                            _ => {
                                let sid = states.len();
                                states.push(StateData {
                                    nodes: s.nodes,
                                    total_nodes: s.total_nodes,
                                    stack: new_stack,
                                    log_total: mass,
                                    log_pending: mass,
                                    evicted: false,
                                });
                                by_sig.insert(sig, sid);
                                let bucket = stacks.entry(stack_key(new_stack)).or_default();
                                bucket.push(sid);
                                if bucket.len() > config.max_stack_size {
                                    // Evict the weakest state permanently.
                                    let (pos, &weakest) = bucket
                                        .iter()
                                        .enumerate()
                                        .min_by(|a, b| {
                                            states[*a.1]
                                                .log_total
                                                .partial_cmp(&states[*b.1].log_total)
                                                .unwrap()
                                        })
                                        .unwrap();
                                    states[weakest].evicted = true;
                                    bucket.swap_remove(pos);
                                }
                            }
                        }
                    }
                    if expansions >= config.max_expansions {
                        capped = true;
                        break 'search;
                    }
                }
            }
        }

        if !advanced_any {
            let any_pending = states
                .iter()
                .any(|s| !s.evicted && s.log_pending != f64::NEG_INFINITY);
            if !any_pending || goals.len() >= top_k {
                break;
            }
            if revivals >= config.max_revivals || lambda <= 0.0 {
                break;
            }
            // Lower the threshold, re-animating previously pruned states.
            revivals += 1;
            lambda = if lambda > 1e-12 { lambda * 0.1 } else { 0.0 };
        }
    }

    let mut parses: Vec<RankedParse> = goals.into_values().collect();
    parses.sort_by(|a, b| b.log_prob.partial_cmp(&a.log_prob).unwrap());
    parses.truncate(top_k);

    let best_partial = if parses.is_empty() {
        let best = states
            .iter()
            .filter(|s| !s.evicted)
            .max_by(|a, b| a.log_total.partial_cmp(&b.log_total).unwrap());
        best.map(|s| {
            format!(
                "no parse{}: best partial state has {} nodes, stack ({},{},{}), log-prob {:.4}",
                if capped { " (expansion cap hit)" } else { "" },
                s.nodes.len(),
                s.stack.tags,
                s.stack.labels,
                s.stack.extensions,
                s.log_total
            )
        })
    } else {
        None
    };

    Ok(DecodeResult {
        parses,
        expansions,
        best_partial,
    })
}

/// Stack index of a state's node array (decision counts).
pub fn stack_of(nodes: &[Rc<ParseNode>]) -> StackIndex {
    fn visit(n: &ParseNode, s: &mut StackIndex) {
        if n.is_leaf() {
            if n.tag.is_assigned() {
                s.tags += 1;
            }
        } else {
            if n.label.is_assigned() {
                s.labels += 1;
            }
            for c in &n.children {
                visit(c, s);
            }
        }
        if let Feat::Value(e) = n.extension {
            if e != Extension::Root {
                s.extensions += 1;
            }
        }
    }
    let mut s = StackIndex::default();
    for n in nodes {
        visit(n, &mut s);
    }
    s
}

/// Converts a completed parse back to the bracketed-tree form, using the
/// original surfaces and the model vocabularies.
pub fn to_treebank_tree(
    node: &ParseNode,
    surfaces: &[String],
    models: &ModelSet,
) -> TreebankTree {
    fn visit(node: &ParseNode, surfaces: &[String], models: &ModelSet) -> TreeChild {
        if node.is_leaf() {
            let idx = node.span.0 as usize;
            TreeChild::Token(Token {
                surface: surfaces[idx].clone(),
                tag: models
                    .tags
                    .name_of(node.tag.value().unwrap_or(0))
                    .to_string(),
                index: idx,
            })
        } else {
            let label = models
                .labels
                .name_of(node.label.value().unwrap_or(0))
                .to_string();
            let conj = node.conj == Feat::Value(true);
            TreeChild::Tree(TreebankTree {
                conj_suffix: if conj { Some('&') } else { None },
                conj,
                wrapped: false,
                children: node
                    .children
                    .iter()
                    .map(|c| visit(c, surfaces, models))
                    .collect(),
                span: (node.span.0 as usize, node.span.1 as usize),
                label,
            })
        }
    }
    match visit(node, surfaces, models) {
        TreeChild::Tree(mut t) => {
            if t.label == ROOT_LABEL {
                t.wrapped = true;
            }
            t
        }
        TreeChild::Token(tok) => TreebankTree {
            label: ROOT_LABEL.to_string(),
            conj: false,
            conj_suffix: None,
            span: (tok.index, tok.index + 1),
            children: vec![TreeChild::Token(tok)],
            wrapped: true,
        },
    }
}
