//! Checkpoint files: a plain-text header followed by little-endian `f32`
//! buffers.
//!
//! ```text
//! study-checkpoint
//! format_version=1
//! params=2
//! param name=tok_emb shape=[10,4] offset=0 len=40
//! param name=out_b shape=[10] offset=160 len=10
//! end
//! <raw little-endian f32 data, offsets relative to the byte after "end\n">
//! ```

use std::io::{BufRead, Read, Write};

use super::{KernelError, Result, Tensor};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &str = "study-checkpoint";

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub tensor: Tensor,
}

fn err(msg: impl Into<String>) -> KernelError {
    KernelError::Checkpoint(msg.into())
}

pub fn write_checkpoint<W: Write>(mut out: W, tensors: &[NamedTensor]) -> std::io::Result<()> {
    let mut header = format!("{MAGIC}\nformat_version={CHECKPOINT_VERSION}\nparams={}\n", tensors.len());
    let mut offset = 0usize;
    for nt in tensors {
        let dims: Vec<String> = nt.tensor.shape().iter().map(usize::to_string).collect();
        header.push_str(&format!(
            "param name={} shape=[{}] offset={} len={}\n",
            nt.name,
            dims.join(","),
            offset,
            nt.tensor.len()
        ));
        offset += nt.tensor.len() * 4;
    }
    header.push_str("end\n");
    out.write_all(header.as_bytes())?;
    let mut buf = Vec::with_capacity(offset);
    for nt in tensors {
        for v in nt.tensor.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.write_all(&buf)?;
    out.flush()
}

struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

fn field<'a>(parts: &mut impl Iterator<Item = &'a str>, key: &str, line: usize) -> Result<&'a str> {
    let part = parts.next().ok_or_else(|| err(format!("line {line}: missing {key}")))?;
    part.strip_prefix(key)
        .and_then(|p| p.strip_prefix('='))
        .ok_or_else(|| err(format!("line {line}: expected {key}=..., got {part:?}")))
}

fn parse_usize(s: &str, line: usize) -> Result<usize> {
    s.parse().map_err(|_| err(format!("line {line}: bad integer {s:?}")))
}

pub fn read_checkpoint<R: Read>(input: R) -> Result<Vec<NamedTensor>> {
    let mut reader = std::io::BufReader::new(input);
    let mut lines = Vec::new();
    loop {
        let mut line = String::new();
        let n = reader.read_line(&mut line).map_err(|e| err(e.to_string()))?;
        if n == 0 {
            return Err(err("unexpected end of header"));
        }
        let trimmed = line.trim_end_matches('\n').to_string();
        if trimmed == "end" {
            break;
        }
        lines.push(trimmed);
        if lines.len() > 1_000_000 {
            return Err(err("header too long"));
        }
    }
    if lines.first().map(String::as_str) != Some(MAGIC) {
        return Err(err("missing checkpoint magic line"));
    }
    let version = lines
        .get(1)
        .and_then(|l| l.strip_prefix("format_version="))
        .ok_or_else(|| err("line 2: missing format_version"))?;
    if version != CHECKPOINT_VERSION.to_string() {
        return Err(err(format!("unsupported format version {version}")));
    }
    let count = lines
        .get(2)
        .and_then(|l| l.strip_prefix("params="))
        .ok_or_else(|| err("line 3: missing params"))
        .and_then(|s| parse_usize(s, 3))?;
    if lines.len() != 3 + count {
        return Err(err(format!("header lists {} params, expected {count}", lines.len() - 3)));
    }
    let mut entries = Vec::with_capacity(count);
    for (i, l) in lines[3..].iter().enumerate() {
        let ln = i + 4;
        let mut parts = l.split(' ');
        if parts.next() != Some("param") {
            return Err(err(format!("line {ln}: expected param record")));
        }
        let name = field(&mut parts, "name", ln)?.to_string();
        let shape_s = field(&mut parts, "shape", ln)?;
        let inner = shape_s
            .strip_prefix('[')
            .and_then(|s| s.strip_suffix(']'))
            .ok_or_else(|| err(format!("line {ln}: bad shape {shape_s:?}")))?;
        let shape = if inner.is_empty() {
            Vec::new()
        } else {
            inner
                .split(',')
                .map(|d| parse_usize(d, ln))
                .collect::<Result<Vec<_>>>()?
        };
        let offset = parse_usize(field(&mut parts, "offset", ln)?, ln)?;
        let len = parse_usize(field(&mut parts, "len", ln)?, ln)?;
        if shape.iter().product::<usize>() != len {
            return Err(err(format!("line {ln}: shape {shape:?} does not match len {len}")));
        }
        entries.push(Entry { name, shape, offset, len });
    }
    let mut data = Vec::new();
    reader.read_to_end(&mut data).map_err(|e| err(e.to_string()))?;
    let mut out = Vec::with_capacity(count);
    for e in entries {
        let end = e.offset + e.len * 4;
        if end > data.len() {
            return Err(err(format!("param {} runs past end of data", e.name)));
        }
        let values = data[e.offset..end]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        out.push(NamedTensor {
            name: e.name,
            tensor: Tensor::new(e.shape, values)?,
        });
    }
    Ok(out)
}
