//! Reading and validating bracketed treebank files, vocabulary construction,
//! the tag dictionary, and training-set filters.
//!
//! The input format is one sentence per line (or one tree spanning several
//! physical lines until brackets balance). Tokens are `surface_TAG`,
//! constituents are `[L ... L]` with the close bracket repeating the open
//! label. A trailing `&` or `+` on a label marks a conjoined constituent;
//! `@` co-indexing markers are skipped.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;

use crate::error::{Error, Result};

/// Reserved label for the synthetic root wrapped around sentences whose
/// bracketing has more than one top-level item.
pub const ROOT_LABEL: &str = "GOD";

/// Reserved surface form for out-of-vocabulary words.
pub const UNKNOWN_WORD: &str = "<unk>";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Token {
    pub surface: String,
    pub tag: String,
    /// Word offset within the sentence.
    pub index: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TreeChild {
    Token(Token),
    Tree(TreebankTree),
}

impl TreeChild {
    pub fn span(&self) -> (usize, usize) {
        match self {
            TreeChild::Token(t) => (t.index, t.index + 1),
            TreeChild::Tree(t) => t.span,
        }
    }
}

/// A constituent node. `span` is half-open over word offsets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TreebankTree {
    pub label: String,
    pub conj: bool,
    /// The original conjunction marker (`&` or `+`), kept for round-trips.
    pub conj_suffix: Option<char>,
    pub children: Vec<TreeChild>,
    pub span: (usize, usize),
    /// True for the synthetic root added around multi-rooted bracketings.
    pub wrapped: bool,
}

impl TreebankTree {
    pub fn word_count(&self) -> usize {
        self.span.1 - self.span.0
    }

    pub fn tokens(&self) -> Vec<&Token> {
        let mut out = Vec::new();
        collect_tokens(self, &mut out);
        out
    }

    /// Maximum number of children at any constituent.
    pub fn max_fanout(&self) -> usize {
        let mut m = self.children.len();
        for c in &self.children {
            if let TreeChild::Tree(t) = c {
                m = m.max(t.max_fanout());
            }
        }
        m
    }

    /// All constituents (including this one unless it is the synthetic root)
    /// as (span, label, conj) triples, depth-first.
    pub fn constituents(&self) -> Vec<((usize, usize), &str, bool)> {
        let mut out = Vec::new();
        collect_constituents(self, &mut out);
        out
    }

    pub fn serialize(&self) -> String {
        let mut s = String::new();
        if self.wrapped {
            for (i, c) in self.children.iter().enumerate() {
                if i > 0 {
                    s.push(' ');
                }
                serialize_child(c, &mut s);
            }
        } else {
            serialize_tree(self, &mut s);
        }
        s
    }
}

fn collect_tokens<'a>(tree: &'a TreebankTree, out: &mut Vec<&'a Token>) {
    for c in &tree.children {
        match c {
            TreeChild::Token(t) => out.push(t),
            TreeChild::Tree(t) => collect_tokens(t, out),
        }
    }
}

fn collect_constituents<'a>(
    tree: &'a TreebankTree,
    out: &mut Vec<((usize, usize), &'a str, bool)>,
) {
    if !tree.wrapped {
        out.push((tree.span, tree.label.as_str(), tree.conj));
    }
    for c in &tree.children {
        if let TreeChild::Tree(t) = c {
            collect_constituents(t, out);
        }
    }
}

fn serialize_child(child: &TreeChild, out: &mut String) {
    match child {
        TreeChild::Token(t) => {
            let _ = write!(out, "{}_{}", t.surface, t.tag);
        }
        TreeChild::Tree(t) => serialize_tree(t, out),
    }
}

fn serialize_tree(tree: &TreebankTree, out: &mut String) {
    let suffix = tree.conj_suffix.map(String::from).unwrap_or_default();
    let _ = write!(out, "[{}{}", tree.label, suffix);
    for c in &tree.children {
        out.push(' ');
        serialize_child(c, out);
    }
    let _ = write!(out, " {}{}]", tree.label, suffix);
}

struct RawToken<'a> {
    text: &'a str,
    offset: usize,
}

fn raw_tokens(line: &str) -> Vec<RawToken<'_>> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, c) in line.char_indices() {
        if c.is_whitespace() {
            if let Some(s) = start.take() {
                out.push(RawToken {
                    text: &line[s..i],
                    offset: s,
                });
            }
        } else if start.is_none() {
            start = Some(i);
        }
    }
    if let Some(s) = start {
        out.push(RawToken {
            text: &line[s..],
            offset: s,
        });
    }
    out
}

struct OpenNode {
    label: String,
    offset: usize,
    children: Vec<TreeChild>,
}

fn strip_conj(label: &str) -> (String, bool, Option<char>) {
    if let Some(stripped) = label.strip_suffix('&') {
        (stripped.to_string(), true, Some('&'))
    } else if let Some(stripped) = label.strip_suffix('+') {
        (stripped.to_string(), true, Some('+'))
    } else {
        (label.to_string(), false, None)
    }
}

/// Parses one bracketed sentence. When the bracketing has more than one
/// top-level item, the items are wrapped in a synthetic `GOD` root.
pub fn parse_bracketed(line: &str) -> Result<TreebankTree> {
    let tokens = raw_tokens(line);
    let mut stack: Vec<OpenNode> = Vec::new();
    let mut top: Vec<TreeChild> = Vec::new();
    let mut expecting_label: Option<usize> = None;
    let mut word_index = 0usize;

    let push_child = |stack: &mut Vec<OpenNode>, top: &mut Vec<TreeChild>, c: TreeChild| {
        if let Some(open) = stack.last_mut() {
            open.children.push(c);
        } else {
            top.push(c);
        }
    };

    for tok in &tokens {
        // Co-indexing markers are not part of the analysis.
        let text = tok.text.trim_start_matches('@');
        if text.is_empty() {
            continue;
        }
        if let Some(open_off) = expecting_label {
            if text.contains('[') || text.contains(']') {
                return Err(Error::parse(
                    tok.offset,
                    format!("expected constituent label after '[', found {text:?}"),
                ));
            }
            stack.push(OpenNode {
                label: text.to_string(),
                offset: open_off,
                children: Vec::new(),
            });
            expecting_label = None;
            continue;
        }
        if text == "[" {
            expecting_label = Some(tok.offset);
            continue;
        }
        if let Some(rest) = text.strip_prefix('[') {
            if rest.contains(']') || rest.contains('[') {
                return Err(Error::parse(tok.offset, format!("malformed open bracket {text:?}")));
            }
            stack.push(OpenNode {
                label: rest.to_string(),
                offset: tok.offset,
                children: Vec::new(),
            });
            continue;
        }
        if let Some(rest) = text.strip_suffix(']') {
            if rest.is_empty() {
                return Err(Error::parse(
                    tok.offset,
                    "close bracket must repeat the constituent label",
                ));
            }
            if rest.contains('[') || rest.contains(']') {
                return Err(Error::parse(tok.offset, format!("malformed close bracket {text:?}")));
            }
            let open = stack.pop().ok_or_else(|| {
                Error::parse(tok.offset, format!("unbalanced close bracket {text:?}"))
            })?;
            if open.label != rest {
                return Err(Error::parse(
                    tok.offset,
                    format!(
                        "close label {rest:?} does not match open label {:?}",
                        open.label
                    ),
                ));
            }
            if open.children.is_empty() {
                return Err(Error::parse(tok.offset, "constituent has no children"));
            }
            let (label, conj, conj_suffix) = strip_conj(&open.label);
            if label.is_empty() {
                return Err(Error::parse(open.offset, "empty constituent label"));
            }
            let start = open.children.first().unwrap().span().0;
            let end = open.children.last().unwrap().span().1;
            let node = TreebankTree {
                label,
                conj,
                conj_suffix,
                children: open.children,
                span: (start, end),
                wrapped: false,
            };
            push_child(&mut stack, &mut top, TreeChild::Tree(node));
            continue;
        }
        // A leaf token: surface_TAG, split on the last underscore.
        match text.rfind('_') {
            Some(pos) if pos > 0 && pos + 1 < text.len() => {
                let token = Token {
                    surface: text[..pos].to_string(),
                    tag: text[pos + 1..].to_string(),
                    index: word_index,
                };
                word_index += 1;
                push_child(&mut stack, &mut top, TreeChild::Token(token));
            }
            _ => {
                return Err(Error::parse(
                    tok.offset,
                    format!("malformed leaf token {text:?}, expected surface_TAG"),
                ));
            }
        }
    }

    if let Some(open) = stack.last() {
        return Err(Error::parse(
            open.offset,
            format!("unclosed constituent {:?}", open.label),
        ));
    }
    if let Some(off) = expecting_label {
        return Err(Error::parse(off, "dangling '[' at end of input"));
    }
    if top.is_empty() {
        return Err(Error::parse(0, "empty sentence"));
    }
    if top.len() == 1 && matches!(top[0], TreeChild::Tree(_)) {
        if let Some(TreeChild::Tree(t)) = top.pop() {
            return Ok(t);
        }
    }
    // A lone token, or several top-level items, gets the synthetic root.
    let start = 0;
    let end = word_index;
    Ok(TreebankTree {
        label: ROOT_LABEL.to_string(),
        conj: false,
        conj_suffix: None,
        children: top,
        span: (start, end),
        wrapped: true,
    })
}

/// Reads a whole file of trees, joining physical lines until brackets
/// balance.
pub fn read_trees(text: &str) -> Result<Vec<TreebankTree>> {
    let mut trees = Vec::new();
    let mut pending = String::new();
    let mut depth = 0i64;
    for line in text.lines() {
        if line.trim().is_empty() && pending.is_empty() {
            continue;
        }
        if !pending.is_empty() {
            pending.push(' ');
        }
        pending.push_str(line);
        for c in line.chars() {
            match c {
                '[' => depth += 1,
                ']' => depth -= 1,
                _ => {}
            }
        }
        if depth <= 0 && !pending.trim().is_empty() {
            trees.push(parse_bracketed(&pending)?);
            pending.clear();
            depth = 0;
        }
    }
    if !pending.trim().is_empty() {
        trees.push(parse_bracketed(&pending)?);
    }
    Ok(trees)
}

/// Retains trees within the word-count bounds whose constituents all have at
/// most `max_children` children. Bounds are inclusive.
pub fn filter_training(
    trees: Vec<TreebankTree>,
    min_len: usize,
    max_len: usize,
    max_children: usize,
) -> Vec<TreebankTree> {
    trees
        .into_iter()
        .filter(|t| {
            let n = t.word_count();
            n >= min_len && n <= max_len && t.max_fanout() <= max_children
        })
        .collect()
}

/// Deterministic capitalization cleanup applied before vocabulary mapping:
/// a sentence-initial token is lowercased when only its first letter is
/// uppercase; anything else (acronyms, mid-sentence titles) is kept.
pub fn normalize_capitalization(surface: &str, sentence_initial: bool) -> String {
    if !sentence_initial {
        return surface.to_string();
    }
    let mut chars = surface.chars();
    match chars.next() {
        Some(first) if first.is_uppercase() => {
            let rest = chars.as_str();
            if rest.chars().all(|c| !c.is_alphabetic() || c.is_lowercase()) {
                let mut out: String = first.to_lowercase().collect();
                out.push_str(rest);
                out
            } else {
                surface.to_string()
            }
        }
        _ => surface.to_string(),
    }
}

/// A simple string interner with stable ids.
#[derive(Debug, Clone, Default)]
pub struct Vocab {
    names: Vec<String>,
    by_name: HashMap<String, u32>,
}

impl Vocab {
    pub fn new() -> Self {
        Self::default()
    }

    /// Reads `item` or `item<TAB>bitstring` lines (`#` comments allowed);
    /// any bitstring column is ignored here, it belongs to the encoding
    /// layer.
    pub fn parse(text: &str) -> Result<Vocab> {
        let mut v = Vocab::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.trim_start().starts_with('#') {
                continue;
            }
            let item = line.split('\t').next().unwrap_or("");
            if item.is_empty() {
                return Err(Error::parse(lineno, "empty vocabulary item"));
            }
            v.intern(item);
        }
        Ok(v)
    }

    pub fn intern(&mut self, name: &str) -> u32 {
        if let Some(&id) = self.by_name.get(name) {
            return id;
        }
        let id = self.names.len() as u32;
        self.names.push(name.to_string());
        self.by_name.insert(name.to_string(), id);
        id
    }

    pub fn id_of(&self, name: &str) -> Option<u32> {
        self.by_name.get(name).copied()
    }

    pub fn name_of(&self, id: u32) -> &str {
        &self.names[id as usize]
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

/// Selects the word list by descending frequency so the out-of-vocabulary
/// token mass lands as close as possible to `target_oov_rate`. Returns the
/// kept words; the unknown entry is implicit and always present.
pub fn build_word_vocabulary(
    freqs: &BTreeMap<String, u64>,
    target_oov_rate: f64,
) -> Result<Vec<String>> {
    if freqs.is_empty() {
        return Err(Error::Domain("empty corpus".into()));
    }
    let total: u64 = freqs.values().sum();
    let mut by_freq: Vec<(&String, u64)> = freqs.iter().map(|(w, &c)| (w, c)).collect();
    by_freq.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));

    let mut best_k = 0usize;
    let mut best_diff = f64::INFINITY;
    let mut covered = 0u64;
    // k = 0 means everything is unknown.
    for k in 0..=by_freq.len() {
        if k > 0 {
            covered += by_freq[k - 1].1;
        }
        let oov = 1.0 - covered as f64 / total as f64;
        let diff = (oov - target_oov_rate).abs();
        if diff < best_diff {
            best_diff = diff;
            best_k = k;
        }
    }
    Ok(by_freq[..best_k]
        .iter()
        .map(|(w, _)| (*w).clone())
        .collect())
}

/// Maps each word id to the set of tags it was seen with in training.
#[derive(Debug, Clone, Default)]
pub struct TagDictionary {
    pub allowed: HashMap<u32, BTreeSet<u32>>,
}

impl TagDictionary {
    pub fn insert(&mut self, word: u32, tag: u32) {
        self.allowed.entry(word).or_default().insert(tag);
    }

    pub fn tags_for(&self, word: u32) -> Option<&BTreeSet<u32>> {
        self.allowed.get(&word).filter(|s| !s.is_empty())
    }

    /// `word<TAB>tag1,tag2,...` lines.
    pub fn serialize(&self, words: &Vocab, tags: &Vocab) -> String {
        let mut ids: Vec<u32> = self.allowed.keys().copied().collect();
        ids.sort_unstable();
        let mut out = String::new();
        for w in ids {
            let list: Vec<&str> = self.allowed[&w].iter().map(|&t| tags.name_of(t)).collect();
            let _ = writeln!(out, "{}\t{}", words.name_of(w), list.join(","));
        }
        out
    }

    pub fn parse(text: &str, words: &mut Vocab, tags: &mut Vocab) -> Result<Self> {
        let mut dict = TagDictionary::default();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.trim_start().starts_with('#') {
                continue;
            }
            let (word, list) = line
                .split_once('\t')
                .ok_or_else(|| Error::parse(lineno, "expected word<TAB>tags"))?;
            let w = words.intern(word);
            for tag in list.split(',').filter(|s| !s.is_empty()) {
                let t = tags.intern(tag);
                dict.insert(w, t);
            }
        }
        Ok(dict)
    }
}

/// An id-level gold tree: labels, tags and words are vocabulary indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GoldNode {
    pub label: u32,
    pub conj: bool,
    pub children: Vec<GoldChild>,
    pub span: (usize, usize),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum GoldChild {
    Leaf { word: u32, tag: u32, index: usize },
    Node(GoldNode),
}

impl GoldChild {
    pub fn span(&self) -> (usize, usize) {
        match self {
            GoldChild::Leaf { index, .. } => (*index, *index + 1),
            GoldChild::Node(n) => n.span,
        }
    }
}

/// One training or test sentence with its interned analysis.
#[derive(Debug, Clone)]
pub struct Sentence {
    pub surfaces: Vec<String>,
    /// Normalized word ids (unknown words map to id 0).
    pub words: Vec<u32>,
    pub tags: Vec<u32>,
    pub tree: GoldNode,
    /// The original string-level tree, kept for evaluation output.
    pub raw: TreebankTree,
}

/// The interned corpus: vocabularies, tag dictionary and sentences.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub words: Vocab,
    pub tags: Vocab,
    pub labels: Vocab,
    pub tag_dictionary: TagDictionary,
    pub sentences: Vec<Sentence>,
}

impl Dataset {
    pub const UNKNOWN_ID: u32 = 0;

    /// Interns the trees, building the word vocabulary at the requested
    /// out-of-vocabulary rate and the tag dictionary from observed pairs.
    pub fn build(trees: &[TreebankTree], target_oov_rate: f64) -> Result<Dataset> {
        if trees.is_empty() {
            return Err(Error::Domain("empty corpus".into()));
        }
        let mut freqs: BTreeMap<String, u64> = BTreeMap::new();
        for tree in trees {
            for (i, tok) in tree.tokens().iter().enumerate() {
                let w = normalize_capitalization(&tok.surface, i == 0);
                *freqs.entry(w).or_insert(0) += 1;
            }
        }
        let kept = build_word_vocabulary(&freqs, target_oov_rate)?;
        let mut words = Vocab::new();
        words.intern(UNKNOWN_WORD);
        for w in kept {
            words.intern(&w);
        }
        let mut tags = Vocab::new();
        let mut labels = Vocab::new();
        labels.intern(ROOT_LABEL);
        let mut dict = TagDictionary::default();
        let mut sentences = Vec::with_capacity(trees.len());
        for tree in trees {
            let sentence = intern_sentence(tree, &words, &mut tags, &mut labels, Some(&mut dict));
            sentences.push(sentence);
        }
        Ok(Dataset {
            words,
            tags,
            labels,
            tag_dictionary: dict,
            sentences,
        })
    }

    /// Interns additional trees against the frozen vocabularies (held-out or
    /// test data). New tags or labels still extend those vocabularies so
    /// evaluation ids stay dense.
    pub fn intern_more(&mut self, trees: &[TreebankTree]) -> Vec<Sentence> {
        let words = self.words.clone();
        trees
            .iter()
            .map(|t| intern_sentence(t, &words, &mut self.tags, &mut self.labels, None))
            .collect()
    }
}

fn intern_sentence(
    tree: &TreebankTree,
    words: &Vocab,
    tags: &mut Vocab,
    labels: &mut Vocab,
    mut dict: Option<&mut TagDictionary>,
) -> Sentence {
    let toks = tree.tokens();
    let mut surfaces = Vec::with_capacity(toks.len());
    let mut word_ids = Vec::with_capacity(toks.len());
    let mut tag_ids = Vec::with_capacity(toks.len());
    for (i, tok) in toks.iter().enumerate() {
        let normalized = normalize_capitalization(&tok.surface, i == 0);
        let w = words.id_of(&normalized).unwrap_or(Dataset::UNKNOWN_ID);
        let t = tags.intern(&tok.tag);
        if let Some(dict) = dict.as_deref_mut() {
            dict.insert(w, t);
        }
        surfaces.push(tok.surface.clone());
        word_ids.push(w);
        tag_ids.push(t);
    }
    let gold = intern_node(tree, &word_ids, &tag_ids, labels);
    Sentence {
        surfaces,
        words: word_ids,
        tags: tag_ids,
        tree: gold,
        raw: tree.clone(),
    }
}

fn intern_node(tree: &TreebankTree, words: &[u32], tags: &[u32], labels: &mut Vocab) -> GoldNode {
    let label = labels.intern(&tree.label);
    let children = tree
        .children
        .iter()
        .map(|c| match c {
            TreeChild::Token(t) => GoldChild::Leaf {
                word: words[t.index],
                tag: tags[t.index],
                index: t.index,
            },
            TreeChild::Tree(t) => GoldChild::Node(intern_node(t, words, tags, labels)),
        })
        .collect();
    GoldNode {
        label,
        conj: tree.conj,
        children,
        span: tree.span,
    }
}
