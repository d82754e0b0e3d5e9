use std::collections::HashMap;
use std::io::{BufRead, Write};

use super::{CorpusError, Interaction, ItemId, Token, FIRST_ITEM, OOV};

/// Top-`v` item vocabulary. Tokens 0..=2 are reserved (PAD, SEP, OOV);
/// items occupy `3..v + 3` in descending training frequency.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    items: Vec<ItemId>,
    counts: Vec<u64>,
    lookup: HashMap<ItemId, Token>,
    requested: usize,
}

/// Builds the vocabulary from (training) interactions. Frequency ties go to
/// the smaller item id. When fewer than `v` distinct items exist the
/// vocabulary shrinks and [`Vocabulary::shrunk`] reports it.
pub fn build_vocab<'a>(
    interactions: impl IntoIterator<Item = &'a Interaction>,
    v: usize,
) -> Result<Vocabulary, CorpusError> {
    if v == 0 {
        return Err(CorpusError::Invalid("vocabulary size must be at least 1".into()));
    }
    let mut freq: HashMap<ItemId, u64> = HashMap::new();
    for it in interactions {
        *freq.entry(it.item_id).or_default() += 1;
    }
    let mut ranked: Vec<(ItemId, u64)> = freq.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked.truncate(v);
    if ranked.len() < v {
        log::warn!("only {} distinct items available, vocabulary shrunk from {v}", ranked.len());
    }
    Ok(Vocabulary::from_ranked(ranked, v))
}

impl Vocabulary {
    fn from_ranked(ranked: Vec<(ItemId, u64)>, requested: usize) -> Self {
        let lookup = ranked
            .iter()
            .enumerate()
            .map(|(i, &(item, _))| (item, FIRST_ITEM + i as Token))
            .collect();
        Self {
            items: ranked.iter().map(|r| r.0).collect(),
            counts: ranked.iter().map(|r| r.1).collect(),
            lookup,
            requested,
        }
    }

    /// Number of item tokens `v`.
    pub fn size(&self) -> usize {
        self.items.len()
    }

    /// Total token ids including the reserved ones (`v + 3`).
    pub fn num_tokens(&self) -> usize {
        self.items.len() + FIRST_ITEM as usize
    }

    /// `Some((requested, actual))` when the corpus had fewer distinct items
    /// than requested.
    pub fn shrunk(&self) -> Option<(usize, usize)> {
        (self.items.len() < self.requested).then_some((self.requested, self.items.len()))
    }

    pub fn token_of(&self, item: ItemId) -> Token {
        self.lookup.get(&item).copied().unwrap_or(OOV)
    }

    pub fn item_of(&self, token: Token) -> Option<ItemId> {
        token
            .checked_sub(FIRST_ITEM)
            .and_then(|i| self.items.get(i as usize))
            .copied()
    }

    /// Writes `token<TAB>item_id<TAB>train_count` lines after a header.
    pub fn write<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "#study-vocab\tversion=1\trequested={}", self.requested)?;
        writeln!(out, "token\titem_id\tcount")?;
        for (i, (item, count)) in self.items.iter().zip(&self.counts).enumerate() {
            writeln!(out, "{}\t{}\t{}", FIRST_ITEM as usize + i, item, count)?;
        }
        Ok(())
    }

    pub fn read<R: BufRead>(input: R) -> Result<Self, CorpusError> {
        let mut lines = input.lines();
        let bad = |line: usize, msg: &str| CorpusError::Parse {
            line,
            msg: msg.to_string(),
        };
        let head = lines.next().transpose()?.ok_or_else(|| bad(1, "empty vocabulary file"))?;
        let requested = head
            .strip_prefix("#study-vocab\tversion=1\trequested=")
            .and_then(|r| r.parse().ok())
            .ok_or_else(|| CorpusError::Version(head.clone()))?;
        lines.next().transpose()?;
        let mut ranked = Vec::new();
        for (i, line) in lines.enumerate() {
            let ln = i + 3;
            let line = line?;
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 3 {
                return Err(bad(ln, "expected 3 fields"));
            }
            let token: usize = f[0].parse().map_err(|_| bad(ln, "bad token"))?;
            if token != FIRST_ITEM as usize + ranked.len() {
                return Err(bad(ln, "tokens must be sequential"));
            }
            let item = f[1].parse().map_err(|_| bad(ln, "bad item id"))?;
            let count = f[2].parse().map_err(|_| bad(ln, "bad count"))?;
            ranked.push((item, count));
        }
        Ok(Self::from_ranked(ranked, requested))
    }
}
