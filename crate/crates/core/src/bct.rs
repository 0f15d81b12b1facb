//! Binary classification trees: every vocabulary item gets a bitstring so
//! that n-ary questions about an item can be asked as a sequence of yes-no
//! questions. Trees either come from vocabulary files (hand-built encodings)
//! or from desk-scale bigram mutual-information clustering.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use crate::error::{Error, Result};

/// Answer to a single binary question.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Answer {
    No = 0,
    Yes = 1,
    /// The queried slot or bit does not exist (unassigned feature, missing
    /// node, or bit index beyond the item's bitstring).
    Absent = 2,
}

/// Maps each item of a vocabulary to a prefix-free bitstring.
#[derive(Debug, Clone)]
pub struct BinaryClassificationTree {
    /// items[id] = (name, bits); order is preserved for serialization.
    items: Vec<(String, Vec<bool>)>,
    by_name: HashMap<String, u32>,
    max_len: usize,
}

impl BinaryClassificationTree {
    pub fn new(items: Vec<(String, Vec<bool>)>) -> Result<Self> {
        let mut by_name = HashMap::new();
        for (id, (name, _)) in items.iter().enumerate() {
            if by_name.insert(name.clone(), id as u32).is_some() {
                return Err(Error::Domain(format!("duplicate vocabulary item {name}")));
            }
        }
        // Prefix-freeness: no bitstring may be a prefix of another.
        for (i, (na, a)) in items.iter().enumerate() {
            for (nb, b) in items.iter().skip(i + 1) {
                let n = a.len().min(b.len());
                if !a.is_empty() && !b.is_empty() && a[..n] == b[..n] {
                    return Err(Error::Domain(format!(
                        "bitstrings of {na} and {nb} are not prefix-free"
                    )));
                }
            }
        }
        let max_len = items.iter().map(|(_, b)| b.len()).max().unwrap_or(0);
        Ok(BinaryClassificationTree {
            items,
            by_name,
            max_len,
        })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Longest bitstring; questions index bits `0..max_bits()`.
    pub fn max_bits(&self) -> usize {
        self.max_len
    }

    pub fn id_of(&self, name: &str) -> Option<u32> {
        self.by_name.get(name).copied()
    }

    pub fn name_of(&self, id: u32) -> &str {
        &self.items[id as usize].0
    }

    pub fn encode(&self, id: u32) -> Result<&[bool]> {
        self.items
            .get(id as usize)
            .map(|(_, b)| b.as_slice())
            .ok_or_else(|| Error::UnknownItem(format!("item id {id}")))
    }

    pub fn encode_str(&self, id: u32) -> String {
        let bits = &self.items[id as usize].1;
        bits.iter().map(|&b| if b { '1' } else { '0' }).collect()
    }

    /// Answers "is bit `bit_index` of this item's bitstring 1?".
    /// Indices beyond the bitstring answer `Absent`.
    pub fn answer(&self, id: u32, bit_index: usize) -> Result<Answer> {
        let bits = self.encode(id)?;
        Ok(match bits.get(bit_index) {
            Some(true) => Answer::Yes,
            Some(false) => Answer::No,
            None => Answer::Absent,
        })
    }

    /// Finds the item whose bitstring equals `bits` exactly.
    pub fn decode(&self, bits: &[bool]) -> Option<u32> {
        self.items
            .iter()
            .position(|(_, b)| b == bits)
            .map(|i| i as u32)
    }

    /// Parses `item<TAB>bitstring` lines; `#` starts a comment line.
    /// The bitstring column is required here (this type is the encoding).
    pub fn parse(text: &str) -> Result<Self> {
        let mut items = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.trim_start().starts_with('#') {
                continue;
            }
            let mut cols = line.split('\t');
            let name = cols
                .next()
                .filter(|s| !s.is_empty())
                .ok_or_else(|| Error::parse(lineno, "missing vocabulary item"))?;
            let bits_str = cols
                .next()
                .ok_or_else(|| Error::parse(lineno, format!("missing bitstring for {name}")))?;
            let mut bits = Vec::with_capacity(bits_str.len());
            for c in bits_str.chars() {
                match c {
                    '0' => bits.push(false),
                    '1' => bits.push(true),
                    _ => {
                        return Err(Error::parse(
                            lineno,
                            format!("invalid bitstring character {c:?} for {name}"),
                        ))
                    }
                }
            }
            items.push((name.to_string(), bits));
        }
        Self::new(items)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text).map_err(|e| match e {
            Error::Parse { offset, message } => {
                Error::parse(offset, format!("{}: {message}", path.display()))
            }
            other => other,
        })
    }

    /// Serializes back to `item<TAB>bitstring` lines in original item order.
    pub fn serialize(&self) -> String {
        let mut out = String::new();
        for (name, bits) in &self.items {
            let _ = write!(out, "{name}\t");
            for &b in bits {
                out.push(if b { '1' } else { '0' });
            }
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.serialize())?;
        Ok(())
    }
}

/// Bigram counts over an item vocabulary: count[(left, right)] = frequency of
/// the ordered pair.
pub type BigramCounts = BTreeMap<(u32, u32), f64>;

#[derive(Debug, Clone)]
enum MergeNode {
    Leaf(u32),
    Inner(Box<MergeNode>, Box<MergeNode>),
}

/// Greedy agglomerative clustering on average bigram mutual information.
///
/// Starts with every item in its own class and repeatedly merges the pair of
/// classes whose merge loses the least average mutual information of the
/// class bigram distribution. Bitstrings are read off root-to-leaf paths of
/// the merge tree. Ties are broken on the lexicographically lowest pair of
/// class representatives (smallest original item id in each class).
pub fn mi_cluster(names: &[String], bigrams: &BigramCounts, max_vocab: usize) -> Result<BinaryClassificationTree> {
    let v = names.len();
    if v < 2 {
        return Err(Error::Domain(format!(
            "mutual-information clustering needs at least 2 items, got {v}"
        )));
    }
    if v > max_vocab {
        return Err(Error::Domain(format!(
            "vocabulary of {v} items exceeds the clustering bound {max_vocab}"
        )));
    }

    let total: f64 = bigrams.values().sum();
    if total <= 0.0 {
        return Err(Error::Domain("bigram counts are empty".into()));
    }

    // Joint over (left-class, right-class), kept as raw counts.
    let mut joint = vec![vec![0.0f64; v]; v];
    for (&(a, b), &c) in bigrams {
        if (a as usize) >= v || (b as usize) >= v {
            return Err(Error::Domain(format!("bigram item id out of range: ({a},{b})")));
        }
        joint[a as usize][b as usize] += c;
    }

    // Live clusters: representative id -> (member tree, smallest item id).
    let mut clusters: BTreeMap<usize, MergeNode> = (0..v).map(|i| (i, MergeNode::Leaf(i as u32))).collect();

    let q_term = |joint: &Vec<Vec<f64>>, lm: &[f64], rm: &[f64], a: usize, b: usize| -> f64 {
        let p = joint[a][b] / total;
        if p > 0.0 {
            p * (p / ((lm[a] / total) * (rm[b] / total))).log2()
        } else {
            0.0
        }
    };

    while clusters.len() > 1 {
        let live: Vec<usize> = clusters.keys().copied().collect();
        let mut lm = vec![0.0; v];
        let mut rm = vec![0.0; v];
        for &a in &live {
            for &b in &live {
                lm[a] += joint[a][b];
                rm[b] += joint[a][b];
            }
        }
        let ami = |a: usize, b: usize| q_term(&joint, &lm, &rm, a, b);

        // Pick the merge with the smallest MI loss. The loss of merging
        // (i, j) only involves terms whose row or column touches i or j,
        // so each candidate is O(V).
        let mut best: Option<(f64, usize, usize)> = None;
        for (pi, &i) in live.iter().enumerate() {
            for &j in &live[pi + 1..] {
                let mut removed = 0.0;
                let mut added = 0.0;
                for &k in &live {
                    if k != i && k != j {
                        removed += ami(i, k) + ami(j, k) + ami(k, i) + ami(k, j);
                        // merged row/column against k
                        let pm_row = (joint[i][k] + joint[j][k]) / total;
                        if pm_row > 0.0 {
                            added += pm_row
                                * (pm_row / (((lm[i] + lm[j]) / total) * (rm[k] / total))).log2();
                        }
                        let pm_col = (joint[k][i] + joint[k][j]) / total;
                        if pm_col > 0.0 {
                            added += pm_col
                                * (pm_col / ((lm[k] / total) * ((rm[i] + rm[j]) / total))).log2();
                        }
                    }
                }
                removed += ami(i, i) + ami(i, j) + ami(j, i) + ami(j, j);
                let pm_self =
                    (joint[i][i] + joint[i][j] + joint[j][i] + joint[j][j]) / total;
                if pm_self > 0.0 {
                    added += pm_self
                        * (pm_self
                            / (((lm[i] + lm[j]) / total) * ((rm[i] + rm[j]) / total)))
                            .log2();
                }
                let loss = removed - added;
                let better = match best {
                    None => true,
                    Some((bl, bi, bj)) => loss < bl - 1e-12 || (loss <= bl + 1e-12 && (i, j) < (bi, bj)),
                };
                if better {
                    best = Some((loss, i, j));
                }
            }
        }

        let (_, i, j) = best.expect("at least one candidate pair");
        let left = clusters.remove(&i).unwrap();
        let right = clusters.remove(&j).unwrap();
        clusters.insert(i, MergeNode::Inner(Box::new(left), Box::new(right)));
        let (row_i, row_j) = {
            let (a, b) = if i < j {
                let (lo, hi) = joint.split_at_mut(j);
                (&mut lo[i], &mut hi[0])
            } else {
                let (lo, hi) = joint.split_at_mut(i);
                (&mut hi[0], &mut lo[j])
            };
            (a, b)
        };
        for (ci, cj) in row_i.iter_mut().zip(row_j.iter_mut()) {
            *ci += *cj;
            *cj = 0.0;
        }
        for row in joint.iter_mut() {
            row[i] += row[j];
            row[j] = 0.0;
        }
    }

    let root = clusters.into_values().next().unwrap();
    let mut paths: Vec<Option<Vec<bool>>> = vec![None; v];
    collect_paths(&root, &mut Vec::new(), &mut paths);
    let items = names
        .iter()
        .zip(paths)
        .map(|(n, p)| (n.clone(), p.expect("every item reached by clustering")))
        .collect();
    BinaryClassificationTree::new(items)
}

fn collect_paths(node: &MergeNode, prefix: &mut Vec<bool>, out: &mut Vec<Option<Vec<bool>>>) {
    match node {
        MergeNode::Leaf(id) => {
            // A two-item vocabulary still gets one bit each; a singleton
            // cluster at the root would get an empty string, which cannot
            // happen for v >= 2.
            out[*id as usize] = Some(prefix.clone());
        }
        MergeNode::Inner(l, r) => {
            prefix.push(false);
            collect_paths(l, prefix, out);
            prefix.pop();
            prefix.push(true);
            collect_paths(r, prefix, out);
            prefix.pop();
        }
    }
}

/// Average mutual information of the class bigram distribution induced by
/// truncating every bitstring to `depth` bits (items sharing a prefix share a
/// class). Used by tests to check that merging never creates information.
pub fn class_bigram_mi(tree: &BinaryClassificationTree, bigrams: &BigramCounts, depth: usize) -> f64 {
    let total: f64 = bigrams.values().sum();
    if total <= 0.0 {
        return 0.0;
    }
    let class_of = |id: u32| -> Vec<bool> {
        let bits = tree.encode(id).unwrap();
        bits[..bits.len().min(depth)].to_vec()
    };
    let mut joint: BTreeMap<(Vec<bool>, Vec<bool>), f64> = BTreeMap::new();
    for (&(a, b), &c) in bigrams {
        *joint.entry((class_of(a), class_of(b))).or_insert(0.0) += c;
    }
    let mut lm: BTreeMap<Vec<bool>, f64> = BTreeMap::new();
    let mut rm: BTreeMap<Vec<bool>, f64> = BTreeMap::new();
    for ((a, b), &c) in &joint {
        *lm.entry(a.clone()).or_insert(0.0) += c;
        *rm.entry(b.clone()).or_insert(0.0) += c;
    }
    let mut mi = 0.0;
    for ((a, b), &c) in &joint {
        if c > 0.0 {
            let p = c / total;
            mi += p * (p / ((lm[a] / total) * (rm[b] / total))).log2();
        }
    }
    mi
}

/// Greedy child-swapping over a reference corpus of (item, binary target)
/// pairs. At each internal node of the encoding tree, the children are
/// swapped exactly when the swap strictly increases the agreement between
/// the node's bit and the target over the corpus (absent bits count as 0).
/// Ties keep the original orientation, which makes the procedure idempotent.
pub fn bit_flip(
    tree: &BinaryClassificationTree,
    reference: &[(u32, bool)],
) -> Result<BinaryClassificationTree> {
    let mut items: Vec<(String, Vec<bool>)> = tree.items.clone();

    // Internal nodes of the implicit prefix tree are identified by bit
    // prefixes. Process shallow nodes first.
    let mut prefixes: Vec<Vec<bool>> = Vec::new();
    for (_, bits) in &items {
        for d in 0..bits.len() {
            let p = bits[..d].to_vec();
            if !prefixes.contains(&p) {
                prefixes.push(p);
            }
        }
    }
    prefixes.sort_by_key(|p| (p.len(), p.clone()));

    for prefix in prefixes {
        let d = prefix.len();
        // Agreement is a global property of the bit position; swapping this
        // node only moves the items underneath it.
        let score = |items: &[(String, Vec<bool>)]| -> i64 {
            let mut agree = 0i64;
            for &(id, target) in reference {
                let bits = &items[id as usize].1;
                let bit = bits.get(d).copied().unwrap_or(false);
                if bit == target {
                    agree += 1;
                }
            }
            agree
        };
        let original = score(&items);
        let mut swapped = items.clone();
        for (_, bits) in swapped.iter_mut() {
            if bits.len() > d && bits[..d] == prefix[..] {
                bits[d] = !bits[d];
            }
        }
        if score(&swapped) > original {
            items = swapped;
        }
    }

    BinaryClassificationTree::new(items)
}
