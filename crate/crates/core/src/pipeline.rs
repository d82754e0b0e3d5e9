//! Turns tokenized histories into model inputs.
//!
//! * Per-student windows of at most `c` tokens (the individual model).
//! * Segments of at most `s` tokens from students of one group, packed
//!   greedily into datapoints of at most `c` positions, each segment
//!   followed by a separator (the joint model).

use std::collections::BTreeMap;
use std::io::{Read, Write};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{StudentId, Token, TokenizedStudent, PAD, SEP};
use crate::rng::{self, salt};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("segment of {len} tokens cannot fit a datapoint of length {context} with its separator")]
    SegmentTooLong { len: usize, context: usize },
    #[error("invalid pipeline config: {0}")]
    Config(String),
    #[error("packed cache: {0}")]
    Cache(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// How students are grouped for joint inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Grouping {
    Classroom,
    DistrictYear,
    #[serde(rename = "single")]
    SingleGroup,
    Individual,
}

impl std::str::FromStr for Grouping {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "classroom" => Ok(Self::Classroom),
            "district-year" => Ok(Self::DistrictYear),
            "single" => Ok(Self::SingleGroup),
            "individual" => Ok(Self::Individual),
            _ => Err(format!("unknown grouping {s:?}")),
        }
    }
}

impl std::fmt::Display for Grouping {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Classroom => "classroom",
            Self::DistrictYear => "district-year",
            Self::SingleGroup => "single",
            Self::Individual => "individual",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum GroupKey {
    Classroom(u64),
    DistrictYear(u64, u8),
    All,
    Student(StudentId),
}

impl GroupKey {
    pub fn of(student: &TokenizedStudent, grouping: Grouping) -> Self {
        match grouping {
            Grouping::Classroom => Self::Classroom(student.keys.classroom_id),
            Grouping::DistrictYear => Self::DistrictYear(student.keys.district_id, student.school_year),
            Grouping::SingleGroup => Self::All,
            Grouping::Individual => Self::Student(student.student_id),
        }
    }

    fn salt(self) -> u64 {
        match self {
            Self::Classroom(c) => rng::mix(1, &[c]),
            Self::DistrictYear(d, y) => rng::mix(2, &[d, y as u64]),
            Self::All => rng::mix(3, &[]),
            Self::Student(s) => rng::mix(4, &[s]),
        }
    }

    fn encode(self) -> (u8, u64, u64) {
        match self {
            Self::Classroom(c) => (0, c, 0),
            Self::DistrictYear(d, y) => (1, d, y as u64),
            Self::All => (2, 0, 0),
            Self::Student(s) => (3, s, 0),
        }
    }

    fn decode(tag: u8, a: u64, b: u64) -> Option<Self> {
        Some(match tag {
            0 => Self::Classroom(a),
            1 => Self::DistrictYear(a, u8::try_from(b).ok()?),
            2 => Self::All,
            3 => Self::Student(a),
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub context_len: usize,
    pub segment_len: usize,
    pub grouping: Grouping,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            context_len: 65,
            segment_len: 65,
            grouping: Grouping::Classroom,
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.context_len < 2 {
            return Err(PipelineError::Config("context length must be at least 2".into()));
        }
        if self.segment_len == 0 || self.segment_len > self.context_len {
            return Err(PipelineError::Config(format!(
                "segment length {} must lie in 1..={}",
                self.segment_len, self.context_len
            )));
        }
        Ok(())
    }

    /// Longest segment payload: `s`, capped so that payload plus separator
    /// fits in `c`.
    pub fn payload_len(&self) -> usize {
        self.segment_len.min(self.context_len - 1)
    }
}

/// Contiguous slice of one student's history.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub student_id: StudentId,
    /// Index of the first token in the student's full history.
    pub start: usize,
    pub tokens: Vec<Token>,
    pub timestamps: Vec<i64>,
}

/// One model input.
#[derive(Debug, Clone, PartialEq)]
pub struct DataPoint {
    pub group: GroupKey,
    pub tokens: Vec<Token>,
    pub timestamps: Vec<i64>,
    /// Student owning each position; `None` only for padding.
    pub owners: Vec<Option<StudentId>>,
    /// Position of each item token in its owner's history; `None` for
    /// separators and padding.
    pub history_index: Vec<Option<u32>>,
    /// Whether the position is trained to predict the next token.
    pub loss_mask: Vec<bool>,
}

impl DataPoint {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Next-token targets (`PAD` where there is none).
    pub fn targets(&self) -> Vec<usize> {
        (0..self.len())
            .map(|k| self.tokens.get(k + 1).copied().unwrap_or(PAD) as usize)
            .collect()
    }

    pub fn has_loss(&self) -> bool {
        self.loss_mask.iter().any(|&m| m)
    }

    /// Number of item (non-separator, non-padding) tokens.
    pub fn item_count(&self) -> usize {
        self.tokens.iter().filter(|&&t| t != SEP && t != PAD).count()
    }

    /// Appends padding up to `len` positions.
    pub fn pad_to(&mut self, len: usize) {
        while self.tokens.len() < len {
            self.tokens.push(PAD);
            self.timestamps.push(0);
            self.owners.push(None);
            self.history_index.push(None);
            self.loss_mask.push(false);
        }
    }

    fn recompute_loss_mask(&mut self) {
        let n = self.tokens.len();
        self.loss_mask = (0..n)
            .map(|k| {
                let t = self.tokens[k];
                k + 1 < n
                    && t != SEP
                    && t != PAD
                    && self.tokens[k + 1] != SEP
                    && self.tokens[k + 1] != PAD
                    && self.owners[k + 1] == self.owners[k]
            })
            .collect();
    }
}

/// Splits one history into consecutive windows of at most `c` tokens.
pub fn window_individual(record: &TokenizedStudent, context_len: usize) -> Vec<DataPoint> {
    assert!(context_len >= 1, "context length must be positive");
    record
        .tokens
        .chunks(context_len)
        .zip(record.timestamps.chunks(context_len))
        .enumerate()
        .map(|(w, (toks, ts))| {
            let start = w * context_len;
            let mut dp = DataPoint {
                group: GroupKey::Student(record.student_id),
                tokens: toks.to_vec(),
                timestamps: ts.to_vec(),
                owners: vec![Some(record.student_id); toks.len()],
                history_index: (start..start + toks.len()).map(|i| Some(i as u32)).collect(),
                loss_mask: Vec::new(),
            };
            dp.recompute_loss_mask();
            dp
        })
        .collect()
}

/// Splits one history into consecutive segments of at most `s` tokens.
pub fn segment_student(record: &TokenizedStudent, segment_len: usize) -> Vec<Segment> {
    assert!(segment_len >= 1, "segment length must be positive");
    record
        .tokens
        .chunks(segment_len)
        .zip(record.timestamps.chunks(segment_len))
        .enumerate()
        .map(|(i, (toks, ts))| Segment {
            student_id: record.student_id,
            start: i * segment_len,
            tokens: toks.to_vec(),
            timestamps: ts.to_vec(),
        })
        .collect()
}

struct Builder {
    dp: DataPoint,
    students: Vec<StudentId>,
}

impl Builder {
    fn push(&mut self, seg: &Segment) {
        let dp = &mut self.dp;
        for (i, (&t, &ts)) in seg.tokens.iter().zip(&seg.timestamps).enumerate() {
            dp.tokens.push(t);
            dp.timestamps.push(ts);
            dp.owners.push(Some(seg.student_id));
            dp.history_index.push(Some((seg.start + i) as u32));
        }
        dp.tokens.push(SEP);
        dp.timestamps.push(*seg.timestamps.last().expect("non-empty segment"));
        dp.owners.push(Some(seg.student_id));
        dp.history_index.push(None);
        self.students.push(seg.student_id);
    }
}

/// Packs the segments of one group. `per_student[i]` lists student `i`'s
/// segments in history order; `order` is the (shuffled) student order.
///
/// Segments are placed round by round (first segments, then second, ...),
/// each into the first open datapoint that has room for it plus a
/// separator and does not already hold that student.
pub fn assemble_group(
    group: GroupKey,
    per_student: &[Vec<Segment>],
    order: &[usize],
    context_len: usize,
) -> Result<Vec<DataPoint>, PipelineError> {
    for seg in per_student.iter().flatten() {
        if seg.tokens.is_empty() || seg.tokens.len() + 1 > context_len {
            return Err(PipelineError::SegmentTooLong {
                len: seg.tokens.len(),
                context: context_len,
            });
        }
    }
    let rounds = per_student.iter().map(Vec::len).max().unwrap_or(0);
    let mut open: Vec<Builder> = Vec::new();
    for r in 0..rounds {
        for &si in order {
            let Some(seg) = per_student[si].get(r) else { continue };
            let need = seg.tokens.len() + 1;
            let slot = open
                .iter()
                .position(|b| b.dp.len() + need <= context_len && !b.students.contains(&seg.student_id));
            let builder = match slot {
                Some(i) => &mut open[i],
                None => {
                    open.push(Builder {
                        dp: DataPoint {
                            group,
                            tokens: Vec::new(),
                            timestamps: Vec::new(),
                            owners: Vec::new(),
                            history_index: Vec::new(),
                            loss_mask: Vec::new(),
                        },
                        students: Vec::new(),
                    });
                    open.last_mut().unwrap()
                }
            };
            builder.push(seg);
        }
    }
    Ok(open
        .into_iter()
        .map(|mut b| {
            b.dp.recompute_loss_mask();
            b.dp
        })
        .collect())
}

/// One full pass over every segment, grouped per `cfg.grouping`, with
/// student order shuffled per `(cfg.seed, epoch, group)`. Output is ordered
/// by group key, then packing order.
pub fn pack_epoch(
    students: &[TokenizedStudent],
    cfg: &PipelineConfig,
    epoch: u64,
) -> Result<Vec<DataPoint>, PipelineError> {
    cfg.validate()?;
    let payload = cfg.payload_len();
    let mut groups: BTreeMap<GroupKey, Vec<&TokenizedStudent>> = BTreeMap::new();
    for s in students.iter().filter(|s| !s.tokens.is_empty()) {
        groups.entry(GroupKey::of(s, cfg.grouping)).or_default().push(s);
    }
    let mut out = Vec::new();
    for (key, members) in groups {
        let per_student: Vec<Vec<Segment>> = members.iter().map(|s| segment_student(s, payload)).collect();
        let mut order: Vec<usize> = (0..members.len()).collect();
        let mut rng = rng::stream(cfg.seed, &[salt::PACKING, epoch, key.salt()]);
        order.shuffle(&mut rng);
        out.extend(assemble_group(key, &per_student, &order, cfg.context_len)?);
    }
    Ok(out)
}

/// Windows for every student, in input order.
pub fn window_all(students: &[TokenizedStudent], context_len: usize) -> Vec<DataPoint> {
    students.iter().flat_map(|s| window_individual(s, context_len)).collect()
}

const CACHE_MAGIC: &[u8; 8] = b"STDYPACK";
pub const CACHE_VERSION: u32 = 1;

/// Writes datapoints as a versioned little-endian binary file.
pub fn write_packed<W: Write>(mut out: W, datapoints: &[DataPoint]) -> std::io::Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CACHE_MAGIC);
    buf.extend_from_slice(&CACHE_VERSION.to_le_bytes());
    buf.extend_from_slice(&(datapoints.len() as u64).to_le_bytes());
    for dp in datapoints {
        let (tag, a, b) = dp.group.encode();
        buf.push(tag);
        buf.extend_from_slice(&a.to_le_bytes());
        buf.extend_from_slice(&b.to_le_bytes());
        buf.extend_from_slice(&(dp.len() as u32).to_le_bytes());
        for &t in &dp.tokens {
            buf.extend_from_slice(&t.to_le_bytes());
        }
        for &t in &dp.timestamps {
            buf.extend_from_slice(&t.to_le_bytes());
        }
        for o in &dp.owners {
            buf.extend_from_slice(&o.unwrap_or(u64::MAX).to_le_bytes());
        }
        for h in &dp.history_index {
            buf.extend_from_slice(&h.unwrap_or(u32::MAX).to_le_bytes());
        }
        buf.extend(dp.loss_mask.iter().map(|&m| m as u8));
    }
    out.write_all(&buf)?;
    out.flush()
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], PipelineError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.data.len());
        let end = end.ok_or_else(|| PipelineError::Cache("truncated file".into()))?;
        let s = &self.data[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, PipelineError> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32, PipelineError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, PipelineError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn read_packed<R: Read>(mut input: R) -> Result<Vec<DataPoint>, PipelineError> {
    let mut data = Vec::new();
    input.read_to_end(&mut data)?;
    let mut c = Cursor { data: &data, pos: 0 };
    if c.take(8)? != CACHE_MAGIC {
        return Err(PipelineError::Cache("bad magic".into()));
    }
    let version = c.u32()?;
    if version != CACHE_VERSION {
        return Err(PipelineError::Cache(format!("unsupported version {version}")));
    }
    let count = c.u64()? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let (tag, a, b) = (c.u8()?, c.u64()?, c.u64()?);
        let group = GroupKey::decode(tag, a, b).ok_or_else(|| PipelineError::Cache("bad group key".into()))?;
        let n = c.u32()? as usize;
        let tokens = (0..n).map(|_| c.u32()).collect::<Result<_, _>>()?;
        let timestamps = (0..n).map(|_| c.u64().map(|v| v as i64)).collect::<Result<_, _>>()?;
        let owners = (0..n)
            .map(|_| c.u64().map(|v| (v != u64::MAX).then_some(v)))
            .collect::<Result<_, _>>()?;
        let history_index = (0..n)
            .map(|_| c.u32().map(|v| (v != u32::MAX).then_some(v)))
            .collect::<Result<_, _>>()?;
        let loss_mask = (0..n).map(|_| c.u8().map(|v| v != 0)).collect::<Result<_, _>>()?;
        out.push(DataPoint {
            group,
            tokens,
            timestamps,
            owners,
            history_index,
            loss_mask,
        });
    }
    if c.pos != data.len() {
        return Err(PipelineError::Cache("trailing bytes".into()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::GroupKeys;

    fn student(id: u64, classroom: u64, n: usize, t0: i64) -> TokenizedStudent {
        TokenizedStudent {
            student_id: id,
            keys: GroupKeys {
                classroom_id: classroom,
                school_id: 1,
                district_id: 1,
                grade_level: 4,
            },
            school_year: 1,
            tokens: (0..n).map(|k| 3 + (id as u32 * 7 + k as u32) % 20).collect(),
            timestamps: (0..n as i64).map(|k| t0 + 10 * k).collect(),
        }
    }

    #[test]
    fn window_examples() {
        assert_eq!(window_individual(&student(1, 1, 3, 1), 65).len(), 1);
        let lens: Vec<usize> = window_individual(&student(1, 1, 130, 1), 65).iter().map(DataPoint::len).collect();
        assert_eq!(lens, vec![65, 65]);
        let s = student(1, 1, 70, 1);
        let w = window_individual(&s, 65);
        assert_eq!(w.iter().map(DataPoint::len).collect::<Vec<_>>(), vec![65, 5]);
        let joined: Vec<Token> = w.iter().flat_map(|d| d.tokens.clone()).collect();
        assert_eq!(joined, s.tokens);
        assert!(window_individual(&student(1, 1, 0, 1), 65).is_empty());
        // loss everywhere a next token exists inside the window
        assert_eq!(w[1].loss_mask, vec![true, true, true, true, false]);
    }

    #[test]
    fn segment_examples() {
        assert_eq!(segment_student(&student(1, 1, 20, 1), 20).len(), 1);
        let s = student(1, 1, 45, 1);
        let segs = segment_student(&s, 20);
        assert_eq!(segs.iter().map(|x| x.tokens.len()).collect::<Vec<_>>(), vec![20, 20, 5]);
        let joined: Vec<Token> = segs.iter().flat_map(|x| x.tokens.clone()).collect();
        assert_eq!(joined, s.tokens);
        assert_eq!(segs[2].start, 40);
    }

    #[test]
    fn two_students_fill_one_datapoint() {
        let a = student(1, 1, 3, 100);
        let b = student(2, 1, 3, 105);
        let segs = vec![segment_student(&a, 3), segment_student(&b, 3)];
        let dps = assemble_group(GroupKey::Classroom(1), &segs, &[0, 1], 8).unwrap();
        assert_eq!(dps.len(), 1);
        let mut expect = a.tokens.clone();
        expect.push(SEP);
        expect.extend(&b.tokens);
        expect.push(SEP);
        assert_eq!(dps[0].tokens, expect);
        assert_eq!(dps[0].timestamps[3], 120);
        assert_eq!(dps[0].owners[3], Some(1));
        assert_eq!(
            dps[0].loss_mask,
            vec![true, true, false, false, true, true, false, false]
        );
    }

    #[test]
    fn oversize_segment_is_an_error() {
        let a = student(1, 1, 8, 1);
        let segs = vec![segment_student(&a, 8)];
        assert!(matches!(
            assemble_group(GroupKey::Classroom(1), &segs, &[0], 8),
            Err(PipelineError::SegmentTooLong { .. })
        ));
    }

    #[test]
    fn individual_grouping_is_windowing_plus_separators() {
        let students: Vec<_> = (1..6).map(|i| student(i, 1, 10 + 37 * i as usize, 1)).collect();
        let cfg = PipelineConfig {
            grouping: Grouping::Individual,
            ..PipelineConfig::default()
        };
        let packed = pack_epoch(&students, &cfg, 0).unwrap();
        let expected: Vec<Vec<Token>> = students
            .iter()
            .flat_map(|s| window_individual(s, 64))
            .map(|d| {
                let mut t = d.tokens;
                t.push(SEP);
                t
            })
            .collect();
        let got: Vec<Vec<Token>> = packed.iter().map(|d| d.tokens.clone()).collect();
        assert_eq!(got, expected);
    }

    #[test]
    fn packing_is_deterministic_and_epoch_dependent() {
        let students: Vec<_> = (1..30).map(|i| student(i, i % 3, 5 + i as usize, i as i64)).collect();
        let cfg = PipelineConfig::default();
        let a = pack_epoch(&students, &cfg, 0).unwrap();
        assert_eq!(a, pack_epoch(&students, &cfg, 0).unwrap());
        assert_ne!(a, pack_epoch(&students, &cfg, 1).unwrap());
    }

    #[test]
    fn cache_round_trip() {
        let students: Vec<_> = (1..10).map(|i| student(i, 1, 3 * i as usize, 1)).collect();
        let mut dps = pack_epoch(&students, &PipelineConfig::default(), 3).unwrap();
        dps[0].pad_to(70);
        let mut buf = Vec::new();
        write_packed(&mut buf, &dps).unwrap();
        assert_eq!(read_packed(buf.as_slice()).unwrap(), dps);
        buf.pop();
        assert!(read_packed(buf.as_slice()).is_err());
    }

    #[test]
    fn segment_length_must_fit_context() {
        let cfg = PipelineConfig {
            segment_len: 70,
            ..PipelineConfig::default()
        };
        assert!(cfg.validate().is_err());
        assert_eq!(PipelineConfig::default().payload_len(), 64);
    }
}
