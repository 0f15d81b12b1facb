//! The five conditional decision-tree models (tag, label, extension,
//! conjunction, derivation) bundled with their question catalogs, encodings,
//! head table and tag dictionary: everything the decoder and the trainer
//! need to score one feature-value assignment.

use std::path::Path;

use crate::bct::BinaryClassificationTree;
use crate::error::{Error, Result};
use crate::features::{
    conjunction_catalog, derivation_catalog, extension_catalog, label_catalog, tag_catalog,
    Encodings, Extension, QuestionCatalog, ResolvedHeadTable, TreeHeadTable, WindowCtx,
};
use crate::sdt::{DecisionTree, SmoothedModel};
use crate::treebank::{TagDictionary, Vocab};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ModelKind {
    Tag,
    Label,
    Extension,
    Conjunction,
    Derivation,
}

impl ModelKind {
    pub const ALL: [ModelKind; 5] = [
        ModelKind::Tag,
        ModelKind::Label,
        ModelKind::Extension,
        ModelKind::Conjunction,
        ModelKind::Derivation,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Tag => "tag",
            ModelKind::Label => "label",
            ModelKind::Extension => "extension",
            ModelKind::Conjunction => "conjunction",
            ModelKind::Derivation => "derivation",
        }
    }
}

/// Tag-dictionary strictness: strict lookup, or the flexible variants that
/// admit the model's top scoring tags regardless of the dictionary.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlexibleDict {
    Off,
    Top1,
    Top5,
}

impl FlexibleDict {
    pub fn name(self) -> &'static str {
        match self {
            FlexibleDict::Off => "off",
            FlexibleDict::Top1 => "top1",
            FlexibleDict::Top5 => "top5",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "off" => Ok(FlexibleDict::Off),
            "top1" => Ok(FlexibleDict::Top1),
            "top5" => Ok(FlexibleDict::Top5),
            other => Err(Error::Config(format!("unknown flexible-dictionary mode {other}"))),
        }
    }
}

/// The complete model set used for decoding and lattice scoring.
#[derive(Debug, Clone)]
pub struct ModelSet {
    pub words: Vocab,
    pub tags: Vocab,
    pub labels: Vocab,
    pub encodings: Encodings,
    pub head_table: TreeHeadTable,
    pub resolved_heads: ResolvedHeadTable,
    pub tag_dictionary: TagDictionary,
    pub tag_model: SmoothedModel,
    pub label_model: SmoothedModel,
    pub extension_model: SmoothedModel,
    pub conjunction_model: SmoothedModel,
    /// Absent when parsing with the bottom-up leftmost derivation only.
    pub derivation_model: Option<SmoothedModel>,
    pub tag_catalog: QuestionCatalog,
    pub label_catalog: QuestionCatalog,
    pub extension_catalog: QuestionCatalog,
    pub conjunction_catalog: QuestionCatalog,
    pub derivation_catalog: QuestionCatalog,
    pub flexible_dict: FlexibleDict,
    /// False when the models may not ask about words (tags-only parsing).
    pub include_words: bool,
    /// False when the conjunction feature is disabled end to end.
    pub use_conjunction: bool,
    pub dwc: usize,
}

fn uniform_model(num_futures: usize) -> SmoothedModel {
    SmoothedModel::new(DecisionTree::single_leaf(
        num_futures,
        vec![1.0; num_futures],
    ))
}

impl ModelSet {
    /// Builds a fully uniform model set over the given vocabularies; the
    /// starting point for training and for expansion-count checks.
    #[allow(clippy::too_many_arguments)]
    pub fn uniform(
        words: Vocab,
        tags: Vocab,
        labels: Vocab,
        encodings: Encodings,
        head_table: TreeHeadTable,
        tag_dictionary: TagDictionary,
        include_words: bool,
        dwc: usize,
    ) -> ModelSet {
        let resolved = head_table.resolve(&labels, &tags);
        let tag_cat = tag_catalog(&encodings, include_words);
        let label_cat = label_catalog(&encodings, include_words);
        let ext_cat = extension_catalog(&encodings, include_words);
        let conj_cat = conjunction_catalog(&encodings, include_words);
        let deriv_cat = derivation_catalog(&encodings, include_words);
        ModelSet {
            tag_model: uniform_model(tags.len().max(1)),
            label_model: uniform_model(labels.len().max(1)),
            extension_model: uniform_model(Extension::PREDICTABLE.len()),
            conjunction_model: uniform_model(2),
            derivation_model: Some(uniform_model(dwc.max(2))),
            words,
            tags,
            labels,
            encodings,
            head_table,
            resolved_heads: resolved,
            tag_dictionary,
            tag_catalog: tag_cat,
            label_catalog: label_cat,
            extension_catalog: ext_cat,
            conjunction_catalog: conj_cat,
            derivation_catalog: deriv_cat,
            flexible_dict: FlexibleDict::Off,
            include_words,
            use_conjunction: true,
            dwc,
        }
    }

    pub fn model(&self, kind: ModelKind) -> Option<&SmoothedModel> {
        match kind {
            ModelKind::Tag => Some(&self.tag_model),
            ModelKind::Label => Some(&self.label_model),
            ModelKind::Extension => Some(&self.extension_model),
            ModelKind::Conjunction => Some(&self.conjunction_model),
            ModelKind::Derivation => self.derivation_model.as_ref(),
        }
    }

    pub fn model_mut(&mut self, kind: ModelKind) -> Option<&mut SmoothedModel> {
        match kind {
            ModelKind::Tag => Some(&mut self.tag_model),
            ModelKind::Label => Some(&mut self.label_model),
            ModelKind::Extension => Some(&mut self.extension_model),
            ModelKind::Conjunction => Some(&mut self.conjunction_model),
            ModelKind::Derivation => self.derivation_model.as_mut(),
        }
    }

    pub fn catalog(&self, kind: ModelKind) -> &QuestionCatalog {
        match kind {
            ModelKind::Tag => &self.tag_catalog,
            ModelKind::Label => &self.label_catalog,
            ModelKind::Extension => &self.extension_catalog,
            ModelKind::Conjunction => &self.conjunction_catalog,
            ModelKind::Derivation => &self.derivation_catalog,
        }
    }

    /// Answers a model's whole question catalog at a decision point.
    pub fn answers(&self, kind: ModelKind, ctx: &WindowCtx) -> Box<[crate::bct::Answer]> {
        ctx.answers(self.catalog(kind), &self.encodings)
    }

    /// Smoothed distribution over a model's future vocabulary.
    pub fn score(&self, kind: ModelKind, ctx: &WindowCtx) -> Vec<f64> {
        let answers = self.answers(kind, ctx);
        self.model(kind)
            .expect("scored model present")
            .smoothed_distribution(&answers)
    }

    /// Smoothed tag distribution plus the set of tags the parser may expand
    /// for this word: the dictionary entry in strict mode (falling back to
    /// the full tag set for unlisted words), or the model's top-k tags in
    /// the flexible modes.
    pub fn score_tag(&self, ctx: &WindowCtx, word: u32) -> (Vec<f64>, Vec<u32>) {
        let dist = self.score(ModelKind::Tag, ctx);
        let allowed = match self.flexible_dict {
            FlexibleDict::Off => match self.tag_dictionary.tags_for(word) {
                Some(set) => set.iter().copied().collect(),
                None => {
                    log::debug!(
                        "word {} has no tag-dictionary entry; allowing the full tag set",
                        self.words.name_of(word)
                    );
                    (0..self.tags.len() as u32).collect()
                }
            },
            FlexibleDict::Top1 => top_k_tags(&dist, 1),
            FlexibleDict::Top5 => top_k_tags(&dist, 5),
        };
        (dist, allowed)
    }

    /// Distribution over candidate active positions. A single candidate gets
    /// probability 1; with the derivation model absent the caller should not
    /// branch at all.
    pub fn score_active(&self, ctx: &WindowCtx, candidates: usize) -> Vec<f64> {
        if candidates <= 1 {
            return vec![1.0; candidates];
        }
        match &self.derivation_model {
            Some(m) => {
                let answers = ctx.answers(self.catalog(ModelKind::Derivation), &self.encodings);
                let full = m.smoothed_distribution(&answers);
                // Restrict to the legal candidate count and renormalize.
                let mut dist: Vec<f64> = full.iter().take(candidates).copied().collect();
                let sum: f64 = dist.iter().sum();
                if sum > 0.0 {
                    for d in dist.iter_mut() {
                        *d /= sum;
                    }
                }
                dist
            }
            None => vec![1.0 / candidates as f64; candidates],
        }
    }

    /// Writes the model set as a directory: a manifest plus one file per
    /// model, the encodings, the head table and the tag dictionary.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut manifest = String::new();
        manifest.push_str(&format!("include_words = {}\n", self.include_words));
        manifest.push_str(&format!("use_conjunction = {}\n", self.use_conjunction));
        manifest.push_str(&format!("dwc = {}\n", self.dwc));
        manifest.push_str(&format!("flexible_dict = {}\n", self.flexible_dict.name()));
        manifest.push_str(&format!(
            "derivation_model = {}\n",
            self.derivation_model.is_some()
        ));
        for kind in ModelKind::ALL {
            if let Some(m) = self.model(kind) {
                let file = format!("{}.model", kind.name());
                std::fs::write(dir.join(&file), m.tree.serialize())?;
                manifest.push_str(&format!("{}_model = {}\n", kind.name(), file));
            }
        }
        self.encodings.words.save(&dir.join("words.vocab"))?;
        self.encodings.tags.save(&dir.join("tags.vocab"))?;
        self.encodings.labels.save(&dir.join("labels.vocab"))?;
        self.encodings.extensions.save(&dir.join("extension.vocab"))?;
        self.encodings
            .num_children
            .save(&dir.join("num_children.vocab"))?;
        self.encodings.num_nodes.save(&dir.join("num_nodes.vocab"))?;
        self.encodings.span.save(&dir.join("span.vocab"))?;
        std::fs::write(dir.join("tree_head_table.txt"), self.head_table.serialize())?;
        std::fs::write(
            dir.join("tag_dictionary.txt"),
            self.tag_dictionary.serialize(&self.words, &self.tags),
        )?;
        std::fs::write(dir.join("manifest.txt"), manifest)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<ModelSet> {
        let manifest = std::fs::read_to_string(dir.join("manifest.txt"))
            .map_err(|e| Error::Config(format!("cannot read manifest in {}: {e}", dir.display())))?;
        let mut include_words = true;
        let mut use_conjunction = true;
        let mut dwc = 2usize;
        let mut flexible = FlexibleDict::Off;
        let mut has_derivation = true;
        for line in manifest.lines() {
            let Some((k, v)) = line.split_once('=') else { continue };
            let (k, v) = (k.trim(), v.trim());
            match k {
                "include_words" => include_words = v == "true",
                "use_conjunction" => use_conjunction = v == "true",
                "dwc" => {
                    dwc = v
                        .parse()
                        .map_err(|_| Error::Config("bad dwc in manifest".into()))?
                }
                "flexible_dict" => flexible = FlexibleDict::parse(v)?,
                "derivation_model" => has_derivation = v == "true",
                _ => {}
            }
        }
        let words_bct = BinaryClassificationTree::load(&dir.join("words.vocab"))?;
        let tags_bct = BinaryClassificationTree::load(&dir.join("tags.vocab"))?;
        let labels_bct = BinaryClassificationTree::load(&dir.join("labels.vocab"))?;
        let encodings = Encodings::with_tables(
            words_bct,
            tags_bct,
            labels_bct,
            BinaryClassificationTree::load(&dir.join("extension.vocab"))?,
            BinaryClassificationTree::load(&dir.join("num_children.vocab"))?,
            BinaryClassificationTree::load(&dir.join("num_nodes.vocab"))?,
            BinaryClassificationTree::load(&dir.join("span.vocab"))?,
        )?;
        let mut words = Vocab::new();
        for i in 0..encodings.words.len() {
            words.intern(encodings.words.name_of(i as u32));
        }
        let mut tags = Vocab::new();
        for i in 0..encodings.tags.len() {
            tags.intern(encodings.tags.name_of(i as u32));
        }
        let mut labels = Vocab::new();
        for i in 0..encodings.labels.len() {
            labels.intern(encodings.labels.name_of(i as u32));
        }
        let head_table = TreeHeadTable::load(&dir.join("tree_head_table.txt"))?;
        let mut dict_words = words.clone();
        let mut dict_tags = tags.clone();
        let tag_dictionary = TagDictionary::parse(
            &std::fs::read_to_string(dir.join("tag_dictionary.txt"))?,
            &mut dict_words,
            &mut dict_tags,
        )?;
        if dict_words.len() != words.len() || dict_tags.len() != tags.len() {
            return Err(Error::Config(
                "tag dictionary mentions items outside the model vocabularies".into(),
            ));
        }

        let resolved = head_table.resolve(&labels, &tags);
        let tag_cat = tag_catalog(&encodings, include_words);
        let label_cat = label_catalog(&encodings, include_words);
        let ext_cat = extension_catalog(&encodings, include_words);
        let conj_cat = conjunction_catalog(&encodings, include_words);
        let deriv_cat = derivation_catalog(&encodings, include_words);
        // Serialized trees list questions in first-appearance order; rebind
        // them to the regenerated catalogs so question indices address the
        // catalog answer vectors.
        let load_tree = |name: &str, catalog: &QuestionCatalog| -> Result<SmoothedModel> {
            let text = std::fs::read_to_string(dir.join(format!("{name}.model")))?;
            let mut tree = DecisionTree::parse(&text)?;
            tree.align_questions(&catalog.questions)?;
            Ok(SmoothedModel::new(tree))
        };
        Ok(ModelSet {
            tag_model: load_tree("tag", &tag_cat)?,
            label_model: load_tree("label", &label_cat)?,
            extension_model: load_tree("extension", &ext_cat)?,
            conjunction_model: load_tree("conjunction", &conj_cat)?,
            derivation_model: if has_derivation {
                Some(load_tree("derivation", &deriv_cat)?)
            } else {
                None
            },
            words,
            tags,
            labels,
            encodings,
            head_table,
            resolved_heads: resolved,
            tag_dictionary,
            tag_catalog: tag_cat,
            label_catalog: label_cat,
            extension_catalog: ext_cat,
            conjunction_catalog: conj_cat,
            derivation_catalog: deriv_cat,
            flexible_dict: flexible,
            include_words,
            use_conjunction,
            dwc,
        })
    }
}

fn top_k_tags(dist: &[f64], k: usize) -> Vec<u32> {
    let mut idx: Vec<u32> = (0..dist.len() as u32).collect();
    idx.sort_by(|&a, &b| {
        dist[b as usize]
            .partial_cmp(&dist[a as usize])
            .unwrap()
            .then(a.cmp(&b))
    });
    idx.truncate(k);
    idx.sort_unstable();
    idx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::ParseNode;
    use crate::treebank::{parse_bracketed, Dataset};
    use std::rc::Rc;

    fn toy_models() -> (Dataset, ModelSet) {
        let trees = vec![
            parse_bracketed("[S [N the_AT cat_NN1 N] [V sat_VVD V] S]").unwrap(),
            parse_bracketed("[S [N a_AT dog_NN1 N] [V ran_VVD V] S]").unwrap(),
        ];
        let ds = Dataset::build(&trees, 0.0).unwrap();
        let enc = crate::training::build_encodings(&ds, 5000).unwrap();
        let tht = TreeHeadTable::parse("S\tright-to-left\tS V N\nN\tright-to-left\tN NN1 AT\nV\tleft-to-right\tV VVD\n").unwrap();
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

    fn leaf_ctx<'a>(
        nodes: &'a [Rc<ParseNode>],
        words: &'a [u32],
        ms: &'a ModelSet,
    ) -> WindowCtx<'a> {
        WindowCtx {
            nodes,
            position: 0,
            word_index: 0,
            sentence_words: words,
            total_nodes: nodes.len(),
            head_table: &ms.resolved_heads,
        }
    }

    #[test]
    fn uniform_tag_scores() {
        let (ds, ms) = toy_models();
        let s = &ds.sentences[0];
        let nodes: Vec<Rc<ParseNode>> = s
            .words
            .iter()
            .enumerate()
            .map(|(i, &w)| Rc::new(ParseNode::leaf(w, i as u32)))
            .collect();
        let ctx = leaf_ctx(&nodes, &s.words, &ms);
        let (dist, _) = ms.score_tag(&ctx, s.words[0]);
        let expected = 1.0 / ds.tags.len() as f64;
        for p in dist {
            assert!((p - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn strict_dictionary_restricts_support() {
        let (ds, ms) = toy_models();
        let s = &ds.sentences[0];
        let nodes: Vec<Rc<ParseNode>> = s
            .words
            .iter()
            .enumerate()
            .map(|(i, &w)| Rc::new(ParseNode::leaf(w, i as u32)))
            .collect();
        let ctx = leaf_ctx(&nodes, &s.words, &ms);
        // "the" was only ever tagged AT.
        let the = ds.words.id_of("the").unwrap();
        let (_, allowed) = ms.score_tag(&ctx, the);
        assert_eq!(allowed, vec![ds.tags.id_of("AT").unwrap()]);
    }

    #[test]
    fn flexible_dictionary_takes_model_top_k() {
        let (ds, mut ms) = toy_models();
        ms.flexible_dict = FlexibleDict::Top1;
        let s = &ds.sentences[0];
        let nodes: Vec<Rc<ParseNode>> = s
            .words
            .iter()
            .enumerate()
            .map(|(i, &w)| Rc::new(ParseNode::leaf(w, i as u32)))
            .collect();
        let ctx = leaf_ctx(&nodes, &s.words, &ms);
        let the = ds.words.id_of("the").unwrap();
        let (_, allowed) = ms.score_tag(&ctx, the);
        assert_eq!(allowed.len(), 1);
    }

    #[test]
    fn active_distribution_degenerate_case() {
        let (ds, ms) = toy_models();
        let s = &ds.sentences[0];
        let nodes: Vec<Rc<ParseNode>> = s
            .words
            .iter()
            .enumerate()
            .map(|(i, &w)| Rc::new(ParseNode::leaf(w, i as u32)))
            .collect();
        let ctx = leaf_ctx(&nodes, &s.words, &ms);
        assert_eq!(ms.score_active(&ctx, 1), vec![1.0]);
        let two = ms.score_active(&ctx, 2);
        assert!((two[0] - 0.5).abs() < 1e-12);
        assert!((two[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn save_load_round_trip() {
        let (_, ms) = toy_models();
        let dir = tempfile::tempdir().unwrap();
        ms.save(dir.path()).unwrap();
        let back = ModelSet::load(dir.path()).unwrap();
        assert_eq!(back.words.len(), ms.words.len());
        assert_eq!(back.tags.len(), ms.tags.len());
        assert_eq!(
            back.tag_model.tree.serialize(),
            ms.tag_model.tree.serialize()
        );
        assert_eq!(back.dwc, ms.dwc);
        assert_eq!(back.flexible_dict, ms.flexible_dict);
    }

    #[test]
    fn save_load_preserves_question_routing() {
        use crate::bct::Answer;
        use crate::sdt::{DecisionTree, Event, RMinPolicy, SmoothedModel};

        let (_, mut ms) = toy_models();
        // Grow a non-trivial tag tree whose splits use scattered catalog
        // questions, then check that routing survives the file format.
        let n_q = ms.tag_catalog.num_questions();
        let mut events = Vec::new();
        for i in 0..40usize {
            let answers: Vec<Answer> = (0..n_q)
                .map(|q| {
                    if (i * 31 + q * 17) % 3 == 0 {
                        Answer::Yes
                    } else if (i + q) % 2 == 0 {
                        Answer::No
                    } else {
                        Answer::Absent
                    }
                })
                .collect();
            events.push(Event {
                answers: answers.into_boxed_slice(),
                future: (i % ms.tags.len()) as u32,
                weight: 1.0 + (i % 3) as f64,
            });
        }
        let tree = DecisionTree::grow_with_futures(
            &events,
            ms.tag_catalog.questions.clone(),
            RMinPolicy::Constant(0.0),
            ms.tags.len(),
        )
        .unwrap();
        assert!(tree.nodes.len() > 1, "test needs a real split");
        ms.tag_model = SmoothedModel::new(tree);

        let dir = tempfile::tempdir().unwrap();
        ms.save(dir.path()).unwrap();
        let back = ModelSet::load(dir.path()).unwrap();
        for e in &events {
            assert_eq!(
                back.tag_model.tree.leaf_for(&e.answers),
                ms.tag_model.tree.leaf_for(&e.answers),
                "leaf routing must survive serialization"
            );
            let p0 = ms.tag_model.smoothed_prob(&e.answers, e.future);
            let p1 = back.tag_model.smoothed_prob(&e.answers, e.future);
            assert!((p0 - p1).abs() < 1e-15);
        }
    }
}
