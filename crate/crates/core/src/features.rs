//! The five-feature decomposition of parse trees (word, tag, label,
//! extension, conjunction), head propagation through the Tree Head Table,
//! constituent detection from extension values, and the question context
//! window used by all decision-tree models.

use std::collections::HashMap;
use std::rc::Rc;

use crate::bct::{Answer, BinaryClassificationTree};
use crate::error::{Error, Result};
use crate::treebank::{GoldChild, GoldNode, Vocab};

/// Geometric role of a node within its parent constituent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Extension {
    Left = 0,
    Up = 1,
    Right = 2,
    Unary = 3,
    /// Reserved for the node spanning the whole sentence; never predicted
    /// by the extension model.
    Root = 4,
}

impl Extension {
    pub const PREDICTABLE: [Extension; 4] =
        [Extension::Left, Extension::Up, Extension::Right, Extension::Unary];

    pub fn name(self) -> &'static str {
        match self {
            Extension::Left => "left",
            Extension::Up => "up",
            Extension::Right => "right",
            Extension::Unary => "unary",
            Extension::Root => "root",
        }
    }

    pub fn from_index(i: u32) -> Extension {
        match i {
            0 => Extension::Left,
            1 => Extension::Up,
            2 => Extension::Right,
            3 => Extension::Unary,
            _ => Extension::Root,
        }
    }
}

/// A feature slot: unassigned, assigned to a value, or assigned the
/// canonical NULL (head propagation found no matching child).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Feat<T> {
    Unassigned,
    Null,
    Value(T),
}

impl<T: Copy> Feat<T> {
    pub fn is_assigned(self) -> bool {
        !matches!(self, Feat::Unassigned)
    }

    pub fn value(self) -> Option<T> {
        match self {
            Feat::Value(v) => Some(v),
            _ => None,
        }
    }
}

/// One node of a (partial) parse tree. Leaves carry no label or conjunction;
/// internal nodes receive word and tag deterministically by head propagation
/// once their label and conjunction are assigned.
#[derive(Debug, Clone)]
pub struct ParseNode {
    pub word: Feat<u32>,
    pub tag: Feat<u32>,
    pub label: Feat<u32>,
    pub extension: Feat<Extension>,
    pub conj: Feat<bool>,
    pub children: Vec<Rc<ParseNode>>,
    /// Half-open word span.
    pub span: (u32, u32),
    /// 0 for leaves, 1 + max child height otherwise.
    pub height: u32,
}

/// The next feature a node needs, in derivation order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureKind {
    Word,
    Tag,
    Label,
    Extension,
    Conjunction,
}

impl ParseNode {
    pub fn leaf(word: u32, index: u32) -> ParseNode {
        ParseNode {
            word: Feat::Value(word),
            tag: Feat::Unassigned,
            label: Feat::Unassigned,
            extension: Feat::Unassigned,
            conj: Feat::Unassigned,
            children: Vec::new(),
            span: (index, index + 1),
            height: 0,
        }
    }

    pub fn is_leaf(&self) -> bool {
        self.children.is_empty()
    }

    /// A fresh internal node over completed children; label, conjunction,
    /// head and extension are all pending.
    pub fn parent_over(children: Vec<Rc<ParseNode>>) -> ParseNode {
        let span = (
            children.first().unwrap().span.0,
            children.last().unwrap().span.1,
        );
        let height = 1 + children.iter().map(|c| c.height).max().unwrap();
        ParseNode {
            word: Feat::Unassigned,
            tag: Feat::Unassigned,
            label: Feat::Unassigned,
            extension: Feat::Unassigned,
            conj: Feat::Unassigned,
            children,
            span,
            height,
        }
    }

    /// The next unassigned feature in derivation order, or `None` when the
    /// node is completed. Leaves: tag then extension. Internal nodes: label,
    /// conjunction (head assignment rides on the conjunction transition),
    /// then extension.
    pub fn next_feature(&self) -> Option<FeatureKind> {
        if self.is_leaf() {
            if !self.tag.is_assigned() {
                return Some(FeatureKind::Tag);
            }
            if !self.extension.is_assigned() {
                return Some(FeatureKind::Extension);
            }
            None
        } else {
            if !self.label.is_assigned() {
                return Some(FeatureKind::Label);
            }
            if !self.conj.is_assigned() {
                return Some(FeatureKind::Conjunction);
            }
            if !self.extension.is_assigned() {
                return Some(FeatureKind::Extension);
            }
            None
        }
    }

    pub fn completed(&self) -> bool {
        self.next_feature().is_none()
    }

    pub fn get(&self, f: FeatureKind) -> Feat<u32> {
        match f {
            FeatureKind::Word => self.word,
            FeatureKind::Tag => self.tag,
            FeatureKind::Label => self.label,
            FeatureKind::Extension => match self.extension {
                Feat::Unassigned => Feat::Unassigned,
                Feat::Null => Feat::Null,
                Feat::Value(e) => Feat::Value(e as u32),
            },
            FeatureKind::Conjunction => match self.conj {
                Feat::Unassigned => Feat::Unassigned,
                Feat::Null => Feat::Null,
                Feat::Value(b) => Feat::Value(b as u32),
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    LeftToRight,
    RightToLeft,
}

#[derive(Debug, Clone)]
pub struct HeadRow {
    pub direction: Direction,
    pub priority: Vec<String>,
}

/// Deterministic rules selecting the lexical representative of each
/// constituent label: a direction and a priority list of tag/label names.
#[derive(Debug, Clone, Default)]
pub struct TreeHeadTable {
    pub rows: Vec<(String, HeadRow)>,
}

impl TreeHeadTable {
    /// `LABEL<TAB>direction<TAB>item1 item2 ...` lines.
    pub fn parse(text: &str) -> Result<Self> {
        let mut rows = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.trim_start().starts_with('#') {
                continue;
            }
            let mut cols = line.split('\t');
            let label = cols
                .next()
                .filter(|s| !s.is_empty())
                .ok_or_else(|| Error::parse(lineno, "missing head-table label"))?;
            let dir = match cols.next() {
                Some("left-to-right") => Direction::LeftToRight,
                Some("right-to-left") => Direction::RightToLeft,
                other => {
                    return Err(Error::parse(
                        lineno,
                        format!("bad head-table direction {other:?}"),
                    ))
                }
            };
            let items = cols
                .next()
                .ok_or_else(|| Error::parse(lineno, "missing head-table priority list"))?;
            rows.push((
                label.to_string(),
                HeadRow {
                    direction: dir,
                    priority: items.split_whitespace().map(String::from).collect(),
                },
            ));
        }
        Ok(TreeHeadTable { rows })
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn serialize(&self) -> String {
        let mut out = String::new();
        for (label, row) in &self.rows {
            let dir = match row.direction {
                Direction::LeftToRight => "left-to-right",
                Direction::RightToLeft => "right-to-left",
            };
            out.push_str(&format!("{label}\t{dir}\t{}\n", row.priority.join(" ")));
        }
        out
    }

    /// Resolves names against the vocabularies for id-level lookup. Every
    /// priority item is matched against constituent labels (internal
    /// children) and part-of-speech tags (leaf children).
    pub fn resolve(&self, labels: &Vocab, tags: &Vocab) -> ResolvedHeadTable {
        let mut rows = HashMap::new();
        for (label, row) in &self.rows {
            let Some(label_id) = labels.id_of(label) else {
                continue;
            };
            let mut label_priority = HashMap::new();
            let mut tag_priority = HashMap::new();
            for (p, item) in row.priority.iter().enumerate() {
                if let Some(id) = labels.id_of(item) {
                    label_priority.entry(id).or_insert(p);
                }
                if let Some(id) = tags.id_of(item) {
                    tag_priority.entry(id).or_insert(p);
                }
            }
            rows.insert(
                label_id,
                ResolvedRow {
                    direction: row.direction,
                    label_priority,
                    tag_priority,
                },
            );
        }
        ResolvedHeadTable { rows }
    }

    /// A permissive fallback table in source form: every label takes its
    /// rightmost child's head, any child matches.
    pub fn rightmost_fallback_raw(labels: &Vocab, tags: &Vocab) -> TreeHeadTable {
        let mut priority: Vec<String> = labels.names().to_vec();
        priority.extend(tags.names().iter().cloned());
        let rows = labels
            .names()
            .iter()
            .map(|l| {
                (
                    l.clone(),
                    HeadRow {
                        direction: Direction::RightToLeft,
                        priority: priority.clone(),
                    },
                )
            })
            .collect();
        TreeHeadTable { rows }
    }

    /// A permissive fallback used when no table is supplied: every label
    /// takes its rightmost child's head.
    pub fn rightmost_fallback(labels: &Vocab, tags: &Vocab) -> ResolvedHeadTable {
        let mut rows = HashMap::new();
        let mut label_priority = HashMap::new();
        let mut tag_priority = HashMap::new();
        for id in 0..labels.len() as u32 {
            label_priority.insert(id, 0usize);
        }
        for id in 0..tags.len() as u32 {
            tag_priority.insert(id, 0usize);
        }
        for id in 0..labels.len() as u32 {
            rows.insert(
                id,
                ResolvedRow {
                    direction: Direction::RightToLeft,
                    label_priority: label_priority.clone(),
                    tag_priority: tag_priority.clone(),
                },
            );
        }
        ResolvedHeadTable { rows }
    }
}

#[derive(Debug, Clone)]
pub struct ResolvedRow {
    pub direction: Direction,
    pub label_priority: HashMap<u32, usize>,
    pub tag_priority: HashMap<u32, usize>,
}

#[derive(Debug, Clone)]
pub struct ResolvedHeadTable {
    pub rows: HashMap<u32, ResolvedRow>,
}

impl ResolvedHeadTable {
    pub fn row(&self, label: u32) -> Option<&ResolvedRow> {
        self.rows.get(&label)
    }

    /// Selects the head child of a labeled node whose children are all
    /// completed, returning the propagated (word, tag). Children are ranked
    /// by the priority of their label (internal) or tag (leaf); ties go to
    /// the leftmost child for left-to-right rows and the rightmost
    /// otherwise. No matching child yields the canonical NULL head.
    pub fn assign_head(
        &self,
        label: u32,
        children: &[Rc<ParseNode>],
    ) -> Result<(Feat<u32>, Feat<u32>)> {
        let row = self.rows.get(&label).ok_or_else(|| {
            Error::Config(format!("tree head table has no row for label id {label}"))
        })?;
        let mut best: Option<(usize, usize)> = None; // (priority, child index)
        for (i, child) in children.iter().enumerate() {
            let priority = if child.is_leaf() {
                child.tag.value().and_then(|t| row.tag_priority.get(&t))
            } else {
                child.label.value().and_then(|l| row.label_priority.get(&l))
            };
            let Some(&p) = priority else { continue };
            let take = match best {
                None => true,
                Some((bp, _)) => {
                    p < bp || (p == bp && row.direction == Direction::RightToLeft)
                }
            };
            if take {
                best = Some((p, i));
            }
        }
        Ok(match best {
            Some((_, i)) => (children[i].word, children[i].tag),
            None => (Feat::Null, Feat::Null),
        })
    }

    /// Direction of a label's row, used to pick the head-side child when a
    /// current-node query falls through.
    pub fn direction(&self, label: u32) -> Option<Direction> {
        self.rows.get(&label).map(|r| r.direction)
    }
}

/// Finds the constituent run covering the just-completed node at `index`:
/// the singleton for a `unary` extension, otherwise the maximal run
/// `left up* right` containing the node with every member completed.
pub fn detect_constituent(nodes: &[Rc<ParseNode>], index: usize) -> Option<(usize, usize)> {
    let ext = nodes[index].extension.value()?;
    match ext {
        Extension::Unary => Some((index, index)),
        Extension::Root => None,
        _ => {
            // Scan left for the opening node.
            let start = if ext == Extension::Left {
                index
            } else {
                let mut i = index;
                loop {
                    if i == 0 {
                        return None;
                    }
                    i -= 1;
                    match nodes[i].extension.value() {
                        Some(Extension::Up) => continue,
                        Some(Extension::Left) => break i,
                        _ => return None,
                    }
                }
            };
            // Scan right for the closing node.
            let end = if ext == Extension::Right {
                index
            } else {
                let mut j = index;
                loop {
                    j += 1;
                    if j >= nodes.len() {
                        return None;
                    }
                    match nodes[j].extension.value() {
                        Some(Extension::Up) => continue,
                        Some(Extension::Right) => break j,
                        _ => return None,
                    }
                }
            };
            Some((start, end))
        }
    }
}

/// The bit encodings shared by all models: one classification tree per
/// feature vocabulary plus the bucketed count vocabularies.
#[derive(Debug, Clone)]
pub struct Encodings {
    pub words: BinaryClassificationTree,
    pub tags: BinaryClassificationTree,
    pub labels: BinaryClassificationTree,
    pub extensions: BinaryClassificationTree,
    pub num_children: BinaryClassificationTree,
    pub num_nodes: BinaryClassificationTree,
    pub span: BinaryClassificationTree,
    ext_ids: [u32; 5],
    nc_ids: [u32; 7],
    nn_ids: [u32; 8],
    span_ids: [u32; 8],
}

pub const DEFAULT_EXTENSION_VOCAB: &str =
    include_str!(concat!(env!("CARGO_MANIFEST_DIR"), "/../../data/extension.vocab"));
pub const DEFAULT_NUM_CHILDREN_VOCAB: &str =
    include_str!(concat!(env!("CARGO_MANIFEST_DIR"), "/../../data/num_children.vocab"));
pub const DEFAULT_NUM_NODES_VOCAB: &str =
    include_str!(concat!(env!("CARGO_MANIFEST_DIR"), "/../../data/num_nodes.vocab"));
pub const DEFAULT_SPAN_VOCAB: &str =
    include_str!(concat!(env!("CARGO_MANIFEST_DIR"), "/../../data/span.vocab"));

const NC_NAMES: [&str; 7] = ["0", "1", "2", "3", "4", "5", ">5"];
const NN_NAMES: [&str; 8] = ["1", "2", "3", "4", "5", "6-10", "11-20", ">20"];
const SPAN_NAMES: [&str; 8] = ["1", "2", "3", "4", "5", "6-10", "11-20", ">20"];

impl Encodings {
    /// Builds encodings from word/tag/label classification trees; the
    /// extension and count vocabularies use the stock tables.
    pub fn new(
        words: BinaryClassificationTree,
        tags: BinaryClassificationTree,
        labels: BinaryClassificationTree,
    ) -> Result<Encodings> {
        Self::with_tables(
            words,
            tags,
            labels,
            BinaryClassificationTree::parse(DEFAULT_EXTENSION_VOCAB)?,
            BinaryClassificationTree::parse(DEFAULT_NUM_CHILDREN_VOCAB)?,
            BinaryClassificationTree::parse(DEFAULT_NUM_NODES_VOCAB)?,
            BinaryClassificationTree::parse(DEFAULT_SPAN_VOCAB)?,
        )
    }

    pub fn with_tables(
        words: BinaryClassificationTree,
        tags: BinaryClassificationTree,
        labels: BinaryClassificationTree,
        extensions: BinaryClassificationTree,
        num_children: BinaryClassificationTree,
        num_nodes: BinaryClassificationTree,
        span: BinaryClassificationTree,
    ) -> Result<Encodings> {
        let mut ext_ids = [0u32; 5];
        for e in [
            Extension::Left,
            Extension::Up,
            Extension::Right,
            Extension::Unary,
            Extension::Root,
        ] {
            ext_ids[e as usize] = extensions
                .id_of(e.name())
                .ok_or_else(|| Error::Config(format!("extension vocabulary lacks {}", e.name())))?;
        }
        let mut nc_ids = [0u32; 7];
        for (i, n) in NC_NAMES.iter().enumerate() {
            nc_ids[i] = num_children
                .id_of(n)
                .ok_or_else(|| Error::Config(format!("num-children vocabulary lacks {n}")))?;
        }
        let mut nn_ids = [0u32; 8];
        for (i, n) in NN_NAMES.iter().enumerate() {
            nn_ids[i] = num_nodes
                .id_of(n)
                .ok_or_else(|| Error::Config(format!("num-nodes vocabulary lacks {n}")))?;
        }
        let mut span_ids = [0u32; 8];
        for (i, n) in SPAN_NAMES.iter().enumerate() {
            span_ids[i] = span
                .id_of(n)
                .ok_or_else(|| Error::Config(format!("span vocabulary lacks {n}")))?;
        }
        Ok(Encodings {
            words,
            tags,
            labels,
            extensions,
            num_children,
            num_nodes,
            span,
            ext_ids,
            nc_ids,
            nn_ids,
            span_ids,
        })
    }

    pub fn extension_id(&self, e: Extension) -> u32 {
        self.ext_ids[e as usize]
    }

    fn bucket_children(&self, n: usize) -> u32 {
        self.nc_ids[n.min(6)]
    }

    fn bucket_nodes(&self, n: usize) -> u32 {
        let idx = match n {
            0..=5 => n.saturating_sub(1),
            6..=10 => 5,
            11..=20 => 6,
            _ => 7,
        };
        self.nn_ids[idx]
    }

    fn bucket_span(&self, n: usize) -> u32 {
        let idx = match n {
            0..=5 => n.saturating_sub(1),
            6..=10 => 5,
            11..=20 => 6,
            _ => 7,
        };
        self.span_ids[idx]
    }
}

/// Which encoding a slot's answer bits come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BitSource {
    Word,
    Tag,
    Label,
    Ext,
    Conj,
    NumChildren,
    NumNodes,
    Span,
}

/// One context slot a model may ask about.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot {
    /// A feature of the node at state position current + offset.
    Node { offset: i32, feature: FeatureKind },
    /// A feature of the current node's j-th child: positive j counts from
    /// the left (1-based), negative from the right.
    Child { index: i32, feature: FeatureKind },
    /// The sentence word at word position i + offset.
    SentenceWord { offset: i32 },
    /// The assigned tag of the sentence word at i + offset.
    SentenceTag { offset: i32 },
    /// Bucketed child count of the node at current + offset.
    NumChildren { offset: i32 },
    /// Bucketed word-span width of the node at current + offset.
    Span { offset: i32 },
    /// Bucketed total node count of the state.
    NumNodes,
}

impl Slot {
    fn source(&self) -> BitSource {
        match self {
            Slot::Node { feature, .. } | Slot::Child { feature, .. } => match feature {
                FeatureKind::Word => BitSource::Word,
                FeatureKind::Tag => BitSource::Tag,
                FeatureKind::Label => BitSource::Label,
                FeatureKind::Extension => BitSource::Ext,
                FeatureKind::Conjunction => BitSource::Conj,
            },
            Slot::SentenceWord { .. } => BitSource::Word,
            Slot::SentenceTag { .. } => BitSource::Tag,
            Slot::NumChildren { .. } => BitSource::NumChildren,
            Slot::NumNodes => BitSource::NumNodes,
            Slot::Span { .. } => BitSource::Span,
        }
    }
}

/// The ordered question catalog of one model: slots in definition order,
/// each expanded into its encoding's bit positions.
#[derive(Debug, Clone)]
pub struct QuestionCatalog {
    pub slots: Vec<Slot>,
    /// (slot index, bit) pairs in (slot, bit) order.
    pub questions: Vec<crate::sdt::QuestionId>,
}

impl QuestionCatalog {
    pub fn new(slots: Vec<Slot>, enc: &Encodings) -> QuestionCatalog {
        let mut questions = Vec::new();
        for (si, slot) in slots.iter().enumerate() {
            let bits = match slot.source() {
                BitSource::Word => enc.words.max_bits(),
                BitSource::Tag => enc.tags.max_bits(),
                BitSource::Label => enc.labels.max_bits(),
                BitSource::Ext => enc.extensions.max_bits(),
                BitSource::Conj => 1,
                BitSource::NumChildren => enc.num_children.max_bits(),
                BitSource::NumNodes => enc.num_nodes.max_bits(),
                BitSource::Span => enc.span.max_bits(),
            };
            for b in 0..bits {
                questions.push(crate::sdt::QuestionId {
                    slot: si as u32,
                    bit: b as u32,
                });
            }
        }
        QuestionCatalog { slots, questions }
    }

    pub fn num_questions(&self) -> usize {
        self.questions.len()
    }
}

/// Everything needed to answer one model's questions at a decision point.
pub struct WindowCtx<'a> {
    /// The state's top-level node array.
    pub nodes: &'a [Rc<ParseNode>],
    /// Index of the current node within `nodes`.
    pub position: usize,
    /// Word index of the current node's leftmost word (for the sentence
    /// windows of the tagging model).
    pub word_index: usize,
    /// All sentence word ids.
    pub sentence_words: &'a [u32],
    /// Total node count of the state (leaves plus built constituents).
    pub total_nodes: usize,
    pub head_table: &'a ResolvedHeadTable,
}

#[derive(Clone, Copy)]
enum SlotValue {
    Missing,
    Item(u32),
    Flag(bool),
}

impl<'a> WindowCtx<'a> {
    fn node_at(&self, offset: i32) -> Option<&Rc<ParseNode>> {
        let idx = self.position as i64 + offset as i64;
        if idx < 0 {
            return None;
        }
        self.nodes.get(idx as usize)
    }

    /// The side from which a node's unassigned feature falls through to a
    /// child: left neighbors are approached from their right edge, right
    /// neighbors from their left edge, and the current node follows its
    /// label's head direction.
    fn fallthrough_child(&self, node: &'a ParseNode, offset: i32) -> Option<&'a Rc<ParseNode>> {
        if node.children.is_empty() {
            return None;
        }
        if offset < 0 {
            node.children.last()
        } else if offset > 0 {
            node.children.first()
        } else {
            match node.label.value().and_then(|l| self.head_table.direction(l)) {
                Some(Direction::RightToLeft) => node.children.last(),
                _ => node.children.first(),
            }
        }
    }

    fn node_feature(&self, node: &'a ParseNode, feature: FeatureKind, offset: i32) -> SlotValue {
        let mut cur = node;
        loop {
            match cur.get(feature) {
                Feat::Value(v) => {
                    return match feature {
                        FeatureKind::Conjunction => SlotValue::Flag(v != 0),
                        _ => SlotValue::Item(v),
                    }
                }
                Feat::Null => return SlotValue::Missing,
                Feat::Unassigned => match self.fallthrough_child(cur, offset) {
                    Some(child) => cur = child,
                    None => return SlotValue::Missing,
                },
            }
        }
    }

    fn leaf_at_word(&self, word_pos: i64) -> Option<&Rc<ParseNode>> {
        if word_pos < 0 {
            return None;
        }
        let w = word_pos as u32;
        let mut node = self
            .nodes
            .iter()
            .find(|n| n.span.0 <= w && w < n.span.1)?;
        while !node.is_leaf() {
            node = node
                .children
                .iter()
                .find(|c| c.span.0 <= w && w < c.span.1)?;
        }
        Some(node)
    }

    fn resolve(&self, slot: &Slot, enc: &Encodings) -> SlotValue {
        match *slot {
            Slot::Node { offset, feature } => match self.node_at(offset) {
                Some(n) => self.node_feature(n, feature, offset),
                None => SlotValue::Missing,
            },
            Slot::Child { index, feature } => {
                let node = &self.nodes[self.position];
                let count = node.children.len() as i32;
                let idx = if index > 0 { index - 1 } else { count + index };
                if idx < 0 || idx >= count {
                    return SlotValue::Missing;
                }
                self.node_feature(&node.children[idx as usize], feature, index)
            }
            Slot::SentenceWord { offset } => {
                let pos = self.word_index as i64 + offset as i64;
                if pos < 0 || pos as usize >= self.sentence_words.len() {
                    SlotValue::Missing
                } else {
                    SlotValue::Item(self.sentence_words[pos as usize])
                }
            }
            Slot::SentenceTag { offset } => {
                let pos = self.word_index as i64 + offset as i64;
                match self.leaf_at_word(pos) {
                    Some(leaf) => match leaf.tag {
                        Feat::Value(t) => SlotValue::Item(t),
                        _ => SlotValue::Missing,
                    },
                    None => SlotValue::Missing,
                }
            }
            Slot::NumChildren { offset } => match self.node_at(offset) {
                Some(n) => SlotValue::Item(enc.bucket_children(n.children.len())),
                None => SlotValue::Missing,
            },
            Slot::Span { offset } => match self.node_at(offset) {
                Some(n) => SlotValue::Item(enc.bucket_span((n.span.1 - n.span.0) as usize)),
                None => SlotValue::Missing,
            },
            Slot::NumNodes => SlotValue::Item(enc.bucket_nodes(self.total_nodes)),
        }
    }

    /// Answers the full catalog at this decision point.
    pub fn answers(&self, catalog: &QuestionCatalog, enc: &Encodings) -> Box<[Answer]> {
        let mut out = Vec::with_capacity(catalog.num_questions());
        for (si, slot) in catalog.slots.iter().enumerate() {
            let value = self.resolve(slot, enc);
            let bits = match slot.source() {
                BitSource::Word => enc.words.max_bits(),
                BitSource::Tag => enc.tags.max_bits(),
                BitSource::Label => enc.labels.max_bits(),
                BitSource::Ext => enc.extensions.max_bits(),
                BitSource::Conj => 1,
                BitSource::NumChildren => enc.num_children.max_bits(),
                BitSource::NumNodes => enc.num_nodes.max_bits(),
                BitSource::Span => enc.span.max_bits(),
            };
            match value {
                SlotValue::Missing => {
                    for _ in 0..bits {
                        out.push(Answer::Absent);
                    }
                }
                SlotValue::Flag(b) => {
                    out.push(if b { Answer::Yes } else { Answer::No });
                }
                SlotValue::Item(id) => {
                    let bct = match slot.source() {
                        BitSource::Word => &enc.words,
                        BitSource::Tag => &enc.tags,
                        BitSource::Label => &enc.labels,
                        BitSource::Ext => &enc.extensions,
                        BitSource::NumChildren => &enc.num_children,
                        BitSource::NumNodes => &enc.num_nodes,
                        BitSource::Span => &enc.span,
                        BitSource::Conj => unreachable!("flags resolve to SlotValue::Flag"),
                    };
                    let code = bct.encode(id).expect("resolved item id in range");
                    for b in 0..bits {
                        out.push(match code.get(b) {
                            Some(true) => Answer::Yes,
                            Some(false) => Answer::No,
                            None => Answer::Absent,
                        });
                    }
                }
            }
            debug_assert_eq!(
                out.len(),
                catalog
                    .slots
                    .iter()
                    .take(si + 1)
                    .map(|s| match s.source() {
                        BitSource::Word => enc.words.max_bits(),
                        BitSource::Tag => enc.tags.max_bits(),
                        BitSource::Label => enc.labels.max_bits(),
                        BitSource::Ext => enc.extensions.max_bits(),
                        BitSource::Conj => 1,
                        BitSource::NumChildren => enc.num_children.max_bits(),
                        BitSource::NumNodes => enc.num_nodes.max_bits(),
                        BitSource::Span => enc.span.max_bits(),
                    })
                    .sum::<usize>()
            );
        }
        out.into_boxed_slice()
    }
}

const ALL_FEATURES: [FeatureKind; 5] = [
    FeatureKind::Word,
    FeatureKind::Tag,
    FeatureKind::Label,
    FeatureKind::Extension,
    FeatureKind::Conjunction,
];

const NEIGHBOR_OFFSETS: [i32; 4] = [-1, -2, 1, 2];
const CHILD_INDICES: [i32; 4] = [1, 2, -2, -1];
const WINDOW_OFFSETS: [i32; 5] = [-2, -1, 0, 1, 2];

fn misc_slots(slots: &mut Vec<Slot>) {
    for o in WINDOW_OFFSETS {
        slots.push(Slot::NumChildren { offset: o });
    }
    for o in WINDOW_OFFSETS {
        slots.push(Slot::Span { offset: o });
    }
    slots.push(Slot::NumNodes);
}

/// Tagging-model catalog: the five-word sentence window, the four neighbor
/// tags, everything at two nodes to either side, and the miscellaneous
/// count questions.
pub fn tag_catalog(enc: &Encodings, include_words: bool) -> QuestionCatalog {
    let mut slots = Vec::new();
    if include_words {
        for o in [0, -1, -2, 1, 2] {
            slots.push(Slot::SentenceWord { offset: o });
        }
    }
    for o in NEIGHBOR_OFFSETS {
        slots.push(Slot::SentenceTag { offset: o });
    }
    for o in NEIGHBOR_OFFSETS {
        for f in ALL_FEATURES {
            if !include_words && f == FeatureKind::Word {
                continue;
            }
            slots.push(Slot::Node { offset: o, feature: f });
        }
    }
    misc_slots(&mut slots);
    QuestionCatalog::new(slots, enc)
}

/// Label-model catalog: two nodes to either side, up to four children, and
/// the miscellaneous count questions.
pub fn label_catalog(enc: &Encodings, include_words: bool) -> QuestionCatalog {
    let mut slots = Vec::new();
    for o in NEIGHBOR_OFFSETS {
        for f in ALL_FEATURES {
            if !include_words && f == FeatureKind::Word {
                continue;
            }
            slots.push(Slot::Node { offset: o, feature: f });
        }
    }
    for c in CHILD_INDICES {
        for f in ALL_FEATURES {
            if !include_words && f == FeatureKind::Word {
                continue;
            }
            slots.push(Slot::Child { index: c, feature: f });
        }
    }
    misc_slots(&mut slots);
    QuestionCatalog::new(slots, enc)
}

/// Extension-model catalog: the node being extended, two nodes to either
/// side, and up to four children.
pub fn extension_catalog(enc: &Encodings, include_words: bool) -> QuestionCatalog {
    let mut slots = Vec::new();
    for f in [
        FeatureKind::Word,
        FeatureKind::Tag,
        FeatureKind::Label,
        FeatureKind::Conjunction,
    ] {
        if !include_words && f == FeatureKind::Word {
            continue;
        }
        slots.push(Slot::Node { offset: 0, feature: f });
    }
    for o in NEIGHBOR_OFFSETS {
        for f in ALL_FEATURES {
            if !include_words && f == FeatureKind::Word {
                continue;
            }
            slots.push(Slot::Node { offset: o, feature: f });
        }
    }
    for c in CHILD_INDICES {
        for f in ALL_FEATURES {
            if !include_words && f == FeatureKind::Word {
                continue;
            }
            slots.push(Slot::Child { index: c, feature: f });
        }
    }
    QuestionCatalog::new(slots, enc)
}

/// Conjunction-model catalog: as the extension model but without the
/// conjunction bits of adjacent nodes.
pub fn conjunction_catalog(enc: &Encodings, include_words: bool) -> QuestionCatalog {
    let mut slots = Vec::new();
    for f in [FeatureKind::Word, FeatureKind::Tag, FeatureKind::Label] {
        if !include_words && f == FeatureKind::Word {
            continue;
        }
        slots.push(Slot::Node { offset: 0, feature: f });
    }
    for o in NEIGHBOR_OFFSETS {
        for f in ALL_FEATURES {
            if f == FeatureKind::Conjunction {
                continue;
            }
            if !include_words && f == FeatureKind::Word {
                continue;
            }
            slots.push(Slot::Node { offset: o, feature: f });
        }
    }
    for c in CHILD_INDICES {
        for f in ALL_FEATURES {
            if !include_words && f == FeatureKind::Word {
                continue;
            }
            slots.push(Slot::Child { index: c, feature: f });
        }
    }
    QuestionCatalog::new(slots, enc)
}

/// Derivation-model catalog: the miscellaneous count questions plus the
/// five-node window around the leftmost candidate position.
pub fn derivation_catalog(enc: &Encodings, include_words: bool) -> QuestionCatalog {
    let mut slots = Vec::new();
    misc_slots(&mut slots);
    for o in [0, -1, -2, 1, 2] {
        for f in ALL_FEATURES {
            if !include_words && f == FeatureKind::Word {
                continue;
            }
            slots.push(Slot::Node { offset: o, feature: f });
        }
    }
    QuestionCatalog::new(slots, enc)
}

/// Converts an interned gold tree into a fully assigned parse-node tree:
/// extensions from each node's position in its parent, conjunction flags
/// from the annotation, heads propagated via the head table. The root gets
/// the `root` extension.
pub fn gold_to_parse(
    gold: &GoldNode,
    words: &[u32],
    tht: &ResolvedHeadTable,
) -> Result<Rc<ParseNode>> {
    let node = build_gold(gold, words, tht)?;
    let mut node = (*node).clone();
    node.extension = Feat::Value(Extension::Root);
    Ok(Rc::new(node))
}

fn child_extension(count: usize, index: usize) -> Extension {
    if count == 1 {
        Extension::Unary
    } else if index == 0 {
        Extension::Left
    } else if index + 1 == count {
        Extension::Right
    } else {
        Extension::Up
    }
}

fn build_gold(gold: &GoldNode, words: &[u32], tht: &ResolvedHeadTable) -> Result<Rc<ParseNode>> {
    let count = gold.children.len();
    let mut children = Vec::with_capacity(count);
    for (i, c) in gold.children.iter().enumerate() {
        let ext = child_extension(count, i);
        let child = match c {
            GoldChild::Leaf { tag, index, .. } => {
                let mut leaf = ParseNode::leaf(words[*index], *index as u32);
                leaf.tag = Feat::Value(*tag);
                leaf.extension = Feat::Value(ext);
                Rc::new(leaf)
            }
            GoldChild::Node(n) => {
                let built = build_gold(n, words, tht)?;
                let mut built = (*built).clone();
                built.extension = Feat::Value(ext);
                Rc::new(built)
            }
        };
        children.push(child);
    }
    let mut node = ParseNode::parent_over(children);
    node.label = Feat::Value(gold.label);
    node.conj = Feat::Value(gold.conj);
    let (w, t) = tht.assign_head(gold.label, &node.children)?;
    node.word = w;
    node.tag = t;
    Ok(Rc::new(node))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::treebank::{parse_bracketed, Dataset};

    fn head_table() -> TreeHeadTable {
        TreeHeadTable::parse(
            "N\tright-to-left\tN NN NNJ NNU NP NN2 NN1 PPY PN PN1 PPH1\n\
             V\tleft-to-right\tV VV0 VVC VVD VVG VVI VVN VVZ VBZ VM Tg Nn\n\
             S\tright-to-left\tS V Ti Tn Tg N J Fa P UH\n",
        )
        .unwrap()
    }

    fn build_dataset(lines: &[&str]) -> Dataset {
        let trees: Vec<_> = lines.iter().map(|l| parse_bracketed(l).unwrap()).collect();
        Dataset::build(&trees, 0.0).unwrap()
    }

    #[test]
    fn head_selection_worked_example() {
        // "I really like ice cream": heads are (I, cream, like, like, like).
        let ds = build_dataset(&[
            "[S [N I_PN N] [V really_RR [V like_VBZ [N ice_NN cream_NN N] V] V] S]",
        ]);
        let tht = head_table().resolve(&ds.labels, &ds.tags);
        let s = &ds.sentences[0];
        let parsed = gold_to_parse(&s.tree, &s.words, &tht).unwrap();

        let word_name = |f: Feat<u32>| ds.words.name_of(f.value().unwrap()).to_string();
        assert_eq!(parsed.label.value(), ds.labels.id_of("S"));
        assert_eq!(word_name(parsed.word), "like");
        // N over "I"
        let np = &parsed.children[0];
        assert_eq!(word_name(np.word), "i"); // sentence-initial lowercased
        // V over "really like ice cream"
        let vp = &parsed.children[1];
        assert_eq!(word_name(vp.word), "like");
        // inner V over "like ice cream"
        let vp2 = &vp.children[1];
        assert_eq!(word_name(vp2.word), "like");
        // N over "ice cream": rightmost NN wins the tie
        let np2 = &vp2.children[1];
        assert_eq!(word_name(np2.word), "cream");
    }

    #[test]
    fn head_tie_breaks_by_direction() {
        let ds = build_dataset(&["[N ice_NN cream_NN N]"]);
        let tht = head_table().resolve(&ds.labels, &ds.tags);
        let s = &ds.sentences[0];
        let parsed = gold_to_parse(&s.tree, &s.words, &tht).unwrap();
        assert_eq!(ds.words.name_of(parsed.word.value().unwrap()), "cream");
    }

    #[test]
    fn head_missing_row_is_config_error() {
        let ds = build_dataset(&["[X a_ZZ X]"]);
        let tht = head_table().resolve(&ds.labels, &ds.tags);
        let s = &ds.sentences[0];
        assert!(gold_to_parse(&s.tree, &s.words, &tht).is_err());
    }

    #[test]
    fn head_no_matching_child_is_null() {
        // Tag QQ is not in N's priority list.
        let ds = build_dataset(&["[N oops_QQ N]"]);
        let tht = head_table().resolve(&ds.labels, &ds.tags);
        let s = &ds.sentences[0];
        let parsed = gold_to_parse(&s.tree, &s.words, &tht).unwrap();
        assert_eq!(parsed.word, Feat::Null);
        assert_eq!(parsed.tag, Feat::Null);
    }

    fn completed_leaf(word: u32, index: u32, ext: Extension) -> Rc<ParseNode> {
        let mut n = ParseNode::leaf(word, index);
        n.tag = Feat::Value(0);
        n.extension = Feat::Value(ext);
        Rc::new(n)
    }

    #[test]
    fn constituent_detection_patterns() {
        let run = vec![
            completed_leaf(0, 0, Extension::Left),
            completed_leaf(1, 1, Extension::Up),
            completed_leaf(2, 2, Extension::Right),
        ];
        for idx in 0..3 {
            assert_eq!(detect_constituent(&run, idx), Some((0, 2)));
        }

        let unary = vec![completed_leaf(0, 0, Extension::Unary)];
        assert_eq!(detect_constituent(&unary, 0), Some((0, 0)));

        let open = vec![
            completed_leaf(0, 0, Extension::Left),
            completed_leaf(1, 1, Extension::Up),
        ];
        assert_eq!(detect_constituent(&open, 1), None);

        // An incomplete node interrupts the run.
        let mut untagged = ParseNode::leaf(9, 1);
        untagged.extension = Feat::Unassigned;
        let broken = vec![
            completed_leaf(0, 0, Extension::Left),
            Rc::new(untagged),
            completed_leaf(2, 2, Extension::Right),
        ];
        assert_eq!(detect_constituent(&broken, 2), None);
    }

    fn toy_encodings(ds: &Dataset) -> Encodings {
        let word_bits: Vec<(String, Vec<bool>)> = (0..ds.words.len())
            .map(|i| {
                let mut bits = Vec::new();
                let mut v = i;
                for _ in 0..4 {
                    bits.push(v & 1 == 1);
                    v >>= 1;
                }
                (ds.words.name_of(i as u32).to_string(), bits)
            })
            .collect();
        let tag_bits: Vec<(String, Vec<bool>)> = (0..ds.tags.len())
            .map(|i| {
                let mut bits = Vec::new();
                let mut v = i;
                for _ in 0..4 {
                    bits.push(v & 1 == 1);
                    v >>= 1;
                }
                (ds.tags.name_of(i as u32).to_string(), bits)
            })
            .collect();
        let label_bits: Vec<(String, Vec<bool>)> = (0..ds.labels.len())
            .map(|i| {
                let mut bits = Vec::new();
                let mut v = i;
                for _ in 0..4 {
                    bits.push(v & 1 == 1);
                    v >>= 1;
                }
                (ds.labels.name_of(i as u32).to_string(), bits)
            })
            .collect();
        Encodings::new(
            BinaryClassificationTree::new(word_bits).unwrap(),
            BinaryClassificationTree::new(tag_bits).unwrap(),
            BinaryClassificationTree::new(label_bits).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn num_children_bits_match_stock_table() {
        let ds = build_dataset(&["[N a_AT b_NN N]"]);
        let enc = toy_encodings(&ds);
        // NumChildren = 3 encodes as 10111.
        let id = enc.bucket_children(3);
        assert_eq!(enc.num_children.encode_str(id), "10111");
        let gt5 = enc.bucket_children(9);
        assert_eq!(enc.num_children.encode_str(gt5), "10000");
    }

    #[test]
    fn window_answers_missing_right_neighbor_absent() {
        let ds = build_dataset(&["[N a_AT b_NN N]"]);
        let enc = toy_encodings(&ds);
        let tht = TreeHeadTable::rightmost_fallback(&ds.labels, &ds.tags);
        let s = &ds.sentences[0];
        let nodes: Vec<Rc<ParseNode>> = s
            .words
            .iter()
            .enumerate()
            .map(|(i, &w)| Rc::new(ParseNode::leaf(w, i as u32)))
            .collect();
        let ctx = WindowCtx {
            nodes: &nodes,
            position: 1,
            word_index: 1,
            sentence_words: &s.words,
            total_nodes: nodes.len(),
            head_table: &tht,
        };
        let catalog = tag_catalog(&enc, true);
        let answers = ctx.answers(&catalog, &enc);
        // Find the slot asking about the tag of the right neighbor (none
        // exists at position 1 of 2).
        let si = catalog
            .slots
            .iter()
            .position(|s| matches!(s, Slot::Node { offset: 1, feature: FeatureKind::Tag }))
            .unwrap();
        let qstart = catalog
            .questions
            .iter()
            .position(|q| q.slot == si as u32)
            .unwrap();
        assert_eq!(answers[qstart], Answer::Absent);
    }

    #[test]
    fn window_falls_through_to_nearest_child() {
        // State: [ N(the computer, unlabeled) , leaf(is) ]. Asking about the
        // label of the left neighbor of "is" falls through to its rightmost
        // child, which is labeled N.
        let ds = build_dataset(&["[S [N the_AT computer_NN N] is_VBZ S]"]);
        let enc = toy_encodings(&ds);
        let tht = head_table().resolve(&ds.labels, &ds.tags);
        let s = &ds.sentences[0];
        let inner = match &s.tree.children[0] {
            GoldChild::Node(n) => n,
            _ => panic!(),
        };
        let built = gold_to_parse(inner, &s.words, &tht).unwrap();
        // Strip the parent's label/conj to simulate a pending node with
        // completed children.
        let mut pending = ParseNode::parent_over(vec![built]);
        pending.label = Feat::Unassigned;
        let nodes = vec![
            Rc::new(pending),
            Rc::new(ParseNode::leaf(s.words[2], 2)),
        ];
        let ctx = WindowCtx {
            nodes: &nodes,
            position: 1,
            word_index: 2,
            sentence_words: &s.words,
            total_nodes: 4,
            head_table: &tht,
        };
        let catalog = tag_catalog(&enc, true);
        let answers = ctx.answers(&catalog, &enc);
        let si = catalog
            .slots
            .iter()
            .position(|s| matches!(s, Slot::Node { offset: -1, feature: FeatureKind::Label }))
            .unwrap();
        let qstart = catalog
            .questions
            .iter()
            .position(|q| q.slot == si as u32)
            .unwrap();
        let n_id = ds.labels.id_of("N").unwrap();
        let code = enc.labels.encode(n_id).unwrap();
        assert_eq!(
            answers[qstart],
            if code[0] { Answer::Yes } else { Answer::No }
        );
    }

    #[test]
    fn answers_are_pure() {
        let ds = build_dataset(&["[N a_AT b_NN N]"]);
        let enc = toy_encodings(&ds);
        let tht = TreeHeadTable::rightmost_fallback(&ds.labels, &ds.tags);
        let s = &ds.sentences[0];
        let nodes: Vec<Rc<ParseNode>> = s
            .words
            .iter()
            .enumerate()
            .map(|(i, &w)| Rc::new(ParseNode::leaf(w, i as u32)))
            .collect();
        let ctx = WindowCtx {
            nodes: &nodes,
            position: 0,
            word_index: 0,
            sentence_words: &s.words,
            total_nodes: 2,
            head_table: &tht,
        };
        let catalog = tag_catalog(&enc, true);
        assert_eq!(ctx.answers(&catalog, &enc), ctx.answers(&catalog, &enc));
    }

    #[test]
    fn gold_round_trip_assigns_every_head() {
        let ds = build_dataset(&[
            "[S [N I_PN N] [V really_RR [V like_VBZ [N ice_NN cream_NN N] V] V] S]",
        ]);
        let tht = head_table().resolve(&ds.labels, &ds.tags);
        let s = &ds.sentences[0];
        let parsed = gold_to_parse(&s.tree, &s.words, &tht).unwrap();
        fn check(n: &ParseNode) {
            assert!(n.completed());
            if !n.is_leaf() {
                assert!(n.word.is_assigned());
                for c in &n.children {
                    check(c);
                }
            }
        }
        check(&parsed);
    }

    #[test]
    fn serialize_head_table_round_trips() {
        let t = head_table();
        let again = TreeHeadTable::parse(&t.serialize()).unwrap();
        assert_eq!(again.serialize(), t.serialize());
    }
}
