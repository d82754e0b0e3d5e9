use crate::corpus::{Token, OOV};

/// First rankable token. PAD and SEP are never recommended; OOV competes as a
/// pseudo-item.
pub const RANKABLE_FROM: Token = OOV;

/// 1-based rank of `target` among tokens `RANKABLE_FROM..scores.len()`.
/// Higher scores rank first; equal scores rank the smaller token first.
pub fn rank_of_target(scores: &[f32], target: Token) -> u32 {
    let t = target as usize;
    assert!(
        t >= RANKABLE_FROM as usize && t < scores.len(),
        "target {target} is not rankable"
    );
    let s = scores[t];
    let ahead = scores[RANKABLE_FROM as usize..]
        .iter()
        .enumerate()
        .filter(|&(i, &v)| v > s || (v == s && i + (RANKABLE_FROM as usize) < t))
        .count();
    1 + ahead as u32
}

/// The `n` best rankable tokens under the same order as [`rank_of_target`].
pub fn top_n(scores: &[f32], n: usize) -> Vec<Token> {
    let mut ids: Vec<Token> = (RANKABLE_FROM..scores.len() as Token).collect();
    let cmp = |a: &Token, b: &Token| {
        scores[*b as usize]
            .partial_cmp(&scores[*a as usize])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.cmp(b))
    };
    let n = n.min(ids.len());
    if n == 0 {
        return Vec::new();
    }
    if n < ids.len() {
        ids.select_nth_unstable_by(n - 1, cmp);
        ids.truncate(n);
    }
    ids.sort_unstable_by(cmp);
    ids
}
