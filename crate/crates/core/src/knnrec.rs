//! Item-based nearest-neighbour baseline.
//!
//! Every training position with a non-empty prefix becomes a stored count
//! vector over its last `h` predecessors, labelled with the item at that
//! position. A query is scored against the stored vectors sharing at least
//! one token with it (found through an inverted index); each item takes the
//! best cosine among vectors labelled with it. Items are ordered by that
//! score, then by training popularity, then by token.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Popularity, Token, TokenizedStudent, OOV};

#[derive(Debug, Error)]
pub enum KnnError {
    #[error("invalid knn config: {0}")]
    Config(String),
    #[error("index file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct KnnConfig {
    /// Number of preceding interactions counted into a feature vector.
    pub history_len: usize,
    /// Minimum number of distinct items retrieved. Rankings always cover
    /// every item, so this never changes an item's position.
    pub neighbors: usize,
}

impl Default for KnnConfig {
    fn default() -> Self {
        Self {
            history_len: 65,
            neighbors: 2,
        }
    }
}

impl KnnConfig {
    pub fn validate(&self) -> Result<(), KnnError> {
        if self.history_len == 0 || self.neighbors == 0 {
            return Err(KnnError::Config("history length and neighbour count must be positive".into()));
        }
        Ok(())
    }
}

/// Token counts sorted by token; every count is positive.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SparseCounts {
    entries: Vec<(Token, u32)>,
}

impl SparseCounts {
    pub fn from_entries(mut entries: Vec<(Token, u32)>) -> Self {
        entries.retain(|&(_, c)| c > 0);
        entries.sort_unstable();
        entries.dedup_by(|b, a| {
            if a.0 == b.0 {
                a.1 += b.1;
                true
            } else {
                false
            }
        });
        Self { entries }
    }

    pub fn entries(&self) -> &[(Token, u32)] {
        &self.entries
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, token: Token) -> u32 {
        self.entries
            .binary_search_by_key(&token, |e| e.0)
            .map_or(0, |i| self.entries[i].1)
    }

    pub fn total(&self) -> u64 {
        self.entries.iter().map(|e| e.1 as u64).sum()
    }

    pub fn norm_sq(&self) -> u64 {
        self.entries.iter().map(|e| (e.1 as u64).pow(2)).sum()
    }

    pub fn dot(&self, other: &Self) -> u64 {
        let (mut i, mut j, mut acc) = (0, 0, 0u64);
        while i < self.entries.len() && j < other.entries.len() {
            let (a, b) = (self.entries[i], other.entries[j]);
            match a.0.cmp(&b.0) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    acc += a.1 as u64 * b.1 as u64;
                    i += 1;
                    j += 1;
                }
            }
        }
        acc
    }
}

/// Counts of each token among the last `h` entries of `history`.
pub fn featurize(history: &[Token], h: usize) -> SparseCounts {
    let tail = &history[history.len().saturating_sub(h)..];
    SparseCounts::from_entries(tail.iter().map(|&t| (t, 1)).collect())
}

/// Cosine of two count vectors from their integer dot product and squared
/// norms. Every scorer goes through this one formula so that equal inputs
/// give bit-equal similarities; identical vectors score exactly 1.
pub fn cosine(dot: u64, norm_sq_a: u64, norm_sq_b: u64) -> f64 {
    if dot == 0 {
        return 0.0;
    }
    dot as f64 / ((norm_sq_a as f64) * (norm_sq_b as f64)).sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct InvertedIndex {
    config: KnnConfig,
    vectors: Vec<SparseCounts>,
    norms_sq: Vec<u64>,
    targets: Vec<Token>,
    /// `postings[t]` lists `(vector id, count)` for vectors containing `t`.
    postings: Vec<Vec<(u32, u32)>>,
    popularity: Popularity,
}

impl InvertedIndex {
    /// Indexes explicit `(vector, target)` pairs; empty vectors are skipped.
    pub fn from_vectors(
        config: KnnConfig,
        pairs: Vec<(SparseCounts, Token)>,
        popularity: Popularity,
    ) -> Result<Self, KnnError> {
        config.validate()?;
        let vocab = popularity.vocab_tokens();
        let mut postings = vec![Vec::new(); vocab];
        let (mut vectors, mut norms_sq, mut targets) = (Vec::new(), Vec::new(), Vec::new());
        for (v, target) in pairs.into_iter().filter(|p| !p.0.is_empty()) {
            if target < OOV || target as usize >= vocab {
                return Err(KnnError::Config(format!("target token {target} is not rankable")));
            }
            let id = vectors.len() as u32;
            for &(t, c) in v.entries() {
                let slot = postings
                    .get_mut(t as usize)
                    .ok_or_else(|| KnnError::Config(format!("feature token {t} outside vocabulary")))?;
                slot.push((id, c));
            }
            norms_sq.push(v.norm_sq());
            vectors.push(v);
            targets.push(target);
        }
        Ok(Self {
            config,
            vectors,
            norms_sq,
            targets,
            postings,
            popularity,
        })
    }

    pub fn config(&self) -> &KnnConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn vocab_tokens(&self) -> usize {
        self.popularity.vocab_tokens()
    }

    pub fn vector(&self, id: usize) -> (&SparseCounts, Token) {
        (&self.vectors[id], self.targets[id])
    }

    pub fn postings(&self, token: Token) -> &[(u32, u32)] {
        self.postings.get(token as usize).map_or(&[], Vec::as_slice)
    }

    pub fn popularity(&self) -> &Popularity {
        &self.popularity
    }

    /// Per-token scores (index = token): the best cosine among stored vectors
    /// labelled with that token, zero when none shares a token with `query`.
    pub fn item_scores(&self, query: &SparseCounts) -> Vec<f64> {
        let mut scores = vec![0.0f64; self.vocab_tokens()];
        if query.is_empty() {
            return scores;
        }
        let mut dots: std::collections::HashMap<u32, u64> = std::collections::HashMap::new();
        for &(t, qc) in query.entries() {
            for &(id, c) in self.postings(t) {
                *dots.entry(id).or_insert(0) += qc as u64 * c as u64;
            }
        }
        let nq = query.norm_sq();
        for (id, dot) in dots {
            let id = id as usize;
            let sim = cosine(dot, nq, self.norms_sq[id]);
            let slot = &mut scores[self.targets[id] as usize];
            if sim > *slot {
                *slot = sim;
            }
        }
        scores
    }

    /// Every rankable token, best first.
    pub fn rank(&self, query: &SparseCounts) -> Vec<Token> {
        let scores = self.item_scores(query);
        let mut order = self.popularity.ranking().to_vec();
        // the popularity ranking already breaks ties; a stable sort keeps it
        order.sort_by(|&a, &b| scores[b as usize].total_cmp(&scores[a as usize]));
        order
    }

    /// Top `n` tokens; at least `neighbors` items are always considered.
    pub fn top_n(&self, query: &SparseCounts, n: usize) -> Vec<Token> {
        let mut ranked = self.rank(query);
        ranked.truncate(n.max(self.config.neighbors).min(ranked.len()));
        ranked.truncate(n);
        ranked
    }

    /// 1-based rank of `target` under [`Self::rank`].
    pub fn rank_of_target(&self, query: &SparseCounts, target: Token) -> u32 {
        let scores = self.item_scores(query);
        self.rank_in(&scores, target)
    }

    fn rank_in(&self, scores: &[f64], target: Token) -> u32 {
        let s = scores[target as usize];
        let p = self.popularity.rank_of(target).expect("rankable target");
        let ahead = self
            .popularity
            .ranking()
            .iter()
            .filter(|&&t| {
                let v = scores[t as usize];
                v > s || (v == s && self.popularity.rank_of(t).unwrap() < p)
            })
            .count();
        1 + ahead as u32
    }
}

/// One stored vector per training position with a non-empty prefix.
pub fn build_index(
    train: &[TokenizedStudent],
    config: KnnConfig,
    vocab_tokens: usize,
) -> Result<InvertedIndex, KnnError> {
    config.validate()?;
    let popularity = Popularity::from_students(train, vocab_tokens);
    let pairs = train
        .iter()
        .flat_map(|s| (1..s.tokens.len()).map(|k| (featurize(&s.tokens[..k], config.history_len), s.tokens[k])))
        .collect();
    InvertedIndex::from_vectors(config, pairs, popularity)
}

/// Dense reference scorer: cosine against every stored vector, no index.
pub fn brute_force_scores(index: &InvertedIndex, query: &SparseCounts) -> Vec<f64> {
    let mut scores = vec![0.0f64; index.vocab_tokens()];
    let nq = query.norm_sq();
    for id in 0..index.len() {
        let (v, target) = index.vector(id);
        let sim = cosine(query.dot(v), nq, v.norm_sq());
        let slot = &mut scores[target as usize];
        if sim > *slot {
            *slot = sim;
        }
    }
    scores
}

const MAGIC: &[u8; 8] = b"STDYKNN\0";
pub const INDEX_VERSION: u32 = 1;

pub fn write_index<W: Write>(mut out: W, index: &InvertedIndex) -> std::io::Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&INDEX_VERSION.to_le_bytes());
    buf.extend_from_slice(&(index.config.history_len as u64).to_le_bytes());
    buf.extend_from_slice(&(index.config.neighbors as u64).to_le_bytes());
    let counts = index.popularity.counts();
    buf.extend_from_slice(&(counts.len() as u64).to_le_bytes());
    for &c in counts {
        buf.extend_from_slice(&c.to_le_bytes());
    }
    buf.extend_from_slice(&(index.vectors.len() as u64).to_le_bytes());
    for (v, &t) in index.vectors.iter().zip(&index.targets) {
        buf.extend_from_slice(&t.to_le_bytes());
        buf.extend_from_slice(&(v.entries.len() as u32).to_le_bytes());
        for &(tok, c) in &v.entries {
            buf.extend_from_slice(&tok.to_le_bytes());
            buf.extend_from_slice(&c.to_le_bytes());
        }
    }
    out.write_all(&buf)?;
    out.flush()
}

pub fn read_index<R: Read>(mut input: R) -> Result<InvertedIndex, KnnError> {
    let mut data = Vec::new();
    input.read_to_end(&mut data)?;
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8], KnnError> {
        let end = pos.checked_add(n).filter(|&e| e <= data.len()).ok_or_else(|| KnnError::Format("truncated".into()))?;
        let s = &data[pos..end];
        pos = end;
        Ok(s)
    };
    if take(8)? != MAGIC {
        return Err(KnnError::Format("bad magic".into()));
    }
    let u32_of = |b: &[u8]| u32::from_le_bytes(b.try_into().unwrap());
    let u64_of = |b: &[u8]| u64::from_le_bytes(b.try_into().unwrap());
    let version = u32_of(take(4)?);
    if version != INDEX_VERSION {
        return Err(KnnError::Format(format!("unsupported version {version}")));
    }
    let config = KnnConfig {
        history_len: u64_of(take(8)?) as usize,
        neighbors: u64_of(take(8)?) as usize,
    };
    let vocab = u64_of(take(8)?) as usize;
    let mut counts = Vec::with_capacity(vocab.min(1 << 24));
    for _ in 0..vocab {
        counts.push(u64_of(take(8)?));
    }
    let n = u64_of(take(8)?) as usize;
    let mut pairs = Vec::with_capacity(n.min(1 << 24));
    for _ in 0..n {
        let target = u32_of(take(4)?);
        let len = u32_of(take(4)?) as usize;
        let mut entries = Vec::with_capacity(len.min(1 << 16));
        for _ in 0..len {
            let tok = u32_of(take(4)?);
            entries.push((tok, u32_of(take(4)?)));
        }
        pairs.push((SparseCounts { entries }, target));
    }
    if pos != data.len() {
        return Err(KnnError::Format("trailing bytes".into()));
    }
    InvertedIndex::from_vectors(config, pairs, Popularity::from_counts(counts))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::GroupKeys;

    fn student(tokens: Vec<Token>) -> TokenizedStudent {
        TokenizedStudent {
            student_id: 1,
            keys: GroupKeys {
                classroom_id: 1,
                school_id: 1,
                district_id: 1,
                grade_level: 3,
            },
            school_year: 1,
            timestamps: (0..tokens.len() as i64).collect(),
            tokens,
        }
    }

    #[test]
    fn featurize_examples() {
        assert_eq!(featurize(&[5, 5, 6], 3).entries(), &[(5, 2), (6, 1)]);
        assert_eq!(featurize(&[5, 5, 6], 1).entries(), &[(6, 1)]);
        assert!(featurize(&[], 4).is_empty());
    }

    #[test]
    fn one_student_one_entry() {
        let idx = build_index(&[student(vec![5, 6])], KnnConfig::default(), 8).unwrap();
        assert_eq!(idx.len(), 1);
        assert_eq!(idx.vector(0), (&SparseCounts::from_entries(vec![(5, 1)]), 6));
        assert_eq!(idx.postings(5), &[(0, 1)]);
        assert!(idx.postings(6).is_empty());
    }

    #[test]
    fn identical_query_scores_one_and_disjoint_falls_back() {
        let idx = build_index(&[student(vec![3, 4, 4, 7, 3, 5])], KnnConfig::default(), 9).unwrap();
        let q = featurize(&[3, 4, 4], 65);
        assert_eq!(idx.item_scores(&q)[7], 1.0);
        assert_eq!(idx.rank(&q)[0], 7);
        let disjoint = featurize(&[8], 65);
        assert_eq!(idx.rank(&disjoint), idx.popularity().ranking());
        assert_eq!(idx.rank(&SparseCounts::default()), idx.popularity().ranking());
        assert_eq!(idx.top_n(&q, 1), vec![7]);
    }

    #[test]
    fn index_file_round_trip() {
        let idx = build_index(&[student(vec![3, 4, 4, 7, 3, 5, 2])], KnnConfig::default(), 9).unwrap();
        let mut buf = Vec::new();
        write_index(&mut buf, &idx).unwrap();
        assert_eq!(read_index(buf.as_slice()).unwrap(), idx);
        buf[8] = 9;
        assert!(read_index(buf.as_slice()).is_err());
    }
}
