//! Shared fixtures: a deterministic toy grammar whose sentences have a
//! unique analysis, used by the end-to-end training and decoding tests.
//! Each integration-test target compiles this module separately and uses a
//! different subset of it.
#![allow(dead_code)]

use treerec::treebank::{parse_bracketed, TreebankTree};

pub const DETS: [&str; 3] = ["the", "a", "every"];
pub const ADJS: [&str; 3] = ["big", "small", "red"];
pub const NOUNS: [&str; 4] = ["cat", "dog", "bird", "fox"];
pub const VERBS: [&str; 3] = ["sees", "likes", "chases"];
pub const ADVS: [&str; 2] = ["quickly", "quietly"];

/// One noun phrase: determiner, optional adjectives, noun. The adjective
/// count is 0..=2.
fn np(det: usize, adjs: &[usize], noun: usize) -> String {
    let mut s = format!("[N {}_D", DETS[det % DETS.len()]);
    for &a in adjs {
        s.push_str(&format!(" {}_J", ADJS[a % ADJS.len()]));
    }
    s.push_str(&format!(" {}_NN N]", NOUNS[noun % NOUNS.len()]));
    s
}

/// A sentence: subject NP, verb, optional adverb, object NP. Every word has
/// exactly one tag and every word sequence has exactly one analysis, so the
/// treebank is unambiguous by construction.
pub fn sentence(seed: usize) -> String {
    let det1 = seed;
    let det2 = seed / 2 + 1;
    let verb = seed % VERBS.len();
    let noun1 = seed % NOUNS.len();
    let noun2 = (seed / 3 + 1) % NOUNS.len();
    let n_adj1 = seed % 3;
    let n_adj2 = (seed / 4) % 2;
    let adjs1: Vec<usize> = (0..n_adj1).map(|i| seed + i).collect();
    let adjs2: Vec<usize> = (0..n_adj2).map(|i| seed / 2 + i).collect();
    let adverb = if seed % 3 == 1 {
        format!(" {}_RB", ADVS[seed % ADVS.len()])
    } else {
        String::new()
    };
    format!(
        "[S {} {}_VB{} {} S]",
        np(det1, &adjs1, noun1),
        VERBS[verb],
        adverb,
        np(det2, &adjs2, noun2),
    )
}

pub fn corpus(range: std::ops::Range<usize>) -> Vec<TreebankTree> {
    range.map(|i| parse_bracketed(&sentence(i)).unwrap()).collect()
}

pub fn corpus_lines(range: std::ops::Range<usize>) -> String {
    range.map(|i| sentence(i) + "\n").collect()
}

/// A head table for the toy grammar: nouns head noun phrases, the verb
/// heads the sentence.
pub fn toy_head_table() -> &'static str {
    "S\tright-to-left\tS V VB N\nN\tright-to-left\tN NN J D\nGOD\tright-to-left\tGOD S N V\n"
}
