//! Named tensor store and its `INFL` binary container.
//!
//! ```text
//! "INFL" | u32 LE version (1) | u64 LE header length | header | payload
//! ```
//!
//! The header is UTF-8 text, one record per line:
//!
//! ```text
//! family <tag>
//! meta <key> <value to end of line>
//! tensor <name> <d0,d1,...> <byte offset> <byte length>
//! ```
//!
//! Offsets are relative to the first payload byte; payloads are
//! little-endian f32.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{CheckpointError, Error, Result};
use crate::graph::GraphSpec;
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"INFL";
pub const VERSION: u32 = 1;
const PREAMBLE: usize = 4 + 4 + 8;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub family: String,
    pub meta: BTreeMap<String, String>,
    tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn new(family: impl Into<String>) -> Self {
        Checkpoint {
            family: family.into(),
            ..Default::default()
        }
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    /// Inserts or replaces a tensor.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.tensors.remove(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    /// The graph stored alongside the weights, if any.
    pub fn graph(&self) -> Result<GraphSpec> {
        let text = self
            .meta
            .get("graph")
            .ok_or_else(|| Error::invalid("checkpoint", "no graph stored in checkpoint"))?;
        GraphSpec::from_json(text)
    }

    pub fn set_graph(&mut self, graph: &GraphSpec) {
        self.family = graph.family.name().to_string();
        self.meta.insert("graph".into(), graph.to_json());
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let bad = |what: &str, s: &str| {
            Error::invalid(
                "checkpoint",
                format!("{what} `{s}` contains whitespace or is empty"),
            )
        };
        let token_ok = |s: &str| !s.is_empty() && !s.chars().any(char::is_whitespace);
        if !self.family.is_empty() && !token_ok(&self.family) {
            return Err(bad("family", &self.family));
        }
        let mut header = format!("family {}\n", self.family);
        for (k, v) in &self.meta {
            if !token_ok(k) {
                return Err(bad("meta key", k));
            }
            if v.contains('\n') {
                return Err(Error::invalid(
                    "checkpoint",
                    format!("meta `{k}` spans lines"),
                ));
            }
            header.push_str(&format!("meta {k} {v}\n"));
        }
        let mut offset = 0usize;
        for (name, t) in &self.tensors {
            if !token_ok(name) {
                return Err(bad("tensor name", name));
            }
            let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
            let len = t.len() * 4;
            header.push_str(&format!(
                "tensor {name} {} {offset} {len}\n",
                dims.join(",")
            ));
            offset += len;
        }
        let mut out = Vec::with_capacity(PREAMBLE + header.len() + offset);
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        for t in self.tensors.values() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let need = |needed: usize| {
            if bytes.len() < needed {
                Err(CheckpointError::Truncated {
                    needed,
                    available: bytes.len(),
                })
            } else {
                Ok(())
            }
        };
        need(4)?;
        let magic: [u8; 4] = bytes[..4].try_into().unwrap();
        if magic != MAGIC {
            return Err(CheckpointError::BadMagic(magic));
        }
        need(PREAMBLE)?;
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(CheckpointError::UnsupportedVersion(version));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let payload_start = PREAMBLE
            .checked_add(header_len)
            .ok_or(CheckpointError::Truncated {
                needed: usize::MAX,
                available: bytes.len(),
            })?;
        need(payload_start)?;
        let header = std::str::from_utf8(&bytes[PREAMBLE..payload_start]).map_err(|e| {
            CheckpointError::MalformedHeader {
                line: 0,
                reason: format!("not UTF-8: {e}"),
            }
        })?;
        let payload = &bytes[payload_start..];

        let mut ckpt = Checkpoint::default();
        let mut records: Vec<(String, Vec<usize>, usize, usize)> = Vec::new();
        for (i, line) in header.lines().enumerate() {
            let lineno = i + 1;
            let malformed = |reason: &str| CheckpointError::MalformedHeader {
                line: lineno,
                reason: reason.to_string(),
            };
            let (tag, rest) = line.split_once(' ').unwrap_or((line, ""));
            match tag {
                "family" => ckpt.family = rest.to_string(),
                "meta" => {
                    let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                    ckpt.meta.insert(k.to_string(), v.to_string());
                }
                "tensor" => {
                    let f: Vec<&str> = rest.split(' ').collect();
                    let [name, dims, offset, length] = f[..] else {
                        return Err(malformed("tensor record needs 4 fields"));
                    };
                    let shape = dims
                        .split(',')
                        .map(str::parse)
                        .collect::<Result<Vec<usize>, _>>()
                        .map_err(|_| malformed("bad shape"))?;
                    let offset = offset.parse().map_err(|_| malformed("bad offset"))?;
                    let length = length.parse().map_err(|_| malformed("bad length"))?;
                    records.push((name.to_string(), shape, offset, length));
                }
                "" => {}
                _ => return Err(malformed("unknown record type")),
            }
        }

        let mut by_offset: Vec<usize> = (0..records.len()).collect();
        by_offset.sort_by_key(|&i| (records[i].2, i));
        for pair in by_offset.windows(2) {
            let (a, b) = (&records[pair[0]], &records[pair[1]]);
            if a.2 + a.3 > b.2 && a.3 > 0 && b.3 > 0 {
                return Err(CheckpointError::OverlappingRecords {
                    first: a.0.clone(),
                    second: b.0.clone(),
                });
            }
        }
        for (name, shape, offset, length) in records {
            if ckpt.tensors.contains_key(&name) {
                return Err(CheckpointError::DuplicateName(name));
            }
            let expected = shape.iter().product::<usize>() * 4;
            if length != expected {
                return Err(CheckpointError::LengthMismatch {
                    name,
                    length,
                    expected,
                });
            }
            let end = offset + length;
            if end > payload.len() {
                return Err(CheckpointError::Truncated {
                    needed: payload_start + end,
                    available: bytes.len(),
                });
            }
            let data = payload[offset..end]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect();
            let tensor =
                Tensor::new(shape, data).map_err(|e| CheckpointError::MalformedHeader {
                    line: 0,
                    reason: format!("tensor `{name}`: {e}"),
                })?;
            ckpt.tensors.insert(name, tensor);
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::from_bytes(&bytes)?)
    }
}

/// Result of matching 2D checkpoint names onto a 3D graph's parameters.
#[derive(Clone, Debug)]
pub struct Remap {
    /// 2D tensors keyed by their 3D names.
    pub checkpoint: Checkpoint,
    /// `(3D name, 2D name)` pairs in 3D-name order.
    pub mapping: Vec<(String, String)>,
    /// 2D names no 3D parameter took.
    pub unmapped: Vec<String>,
}

/// How well a 2D name matches a 3D name; lower is better.
fn match_level(name3d: &str, name2d: &str) -> Option<u8> {
    if name3d == name2d {
        Some(0)
    } else if name3d.ends_with(&format!("/{name2d}")) || name2d.ends_with(&format!("/{name3d}")) {
        Some(1)
    } else {
        None
    }
}

/// Maps every parameter of `graph3d` to a tensor of `ckpt2d`: an exact
/// name match wins, otherwise a name that equals the other after dropping
/// leading path components (`rgb/conv1/weight` ↔ `conv1/weight`).
pub fn remap_2d_to_3d_names(ckpt2d: &Checkpoint, graph3d: &GraphSpec) -> Result<Remap> {
    let mut out = Checkpoint::new(graph3d.family.name());
    let mut mapping = Vec::new();
    let mut used = std::collections::BTreeSet::new();
    for p in graph3d.params() {
        let mut best: Option<u8> = None;
        let mut candidates: Vec<&str> = Vec::new();
        for name2d in ckpt2d.names() {
            if let Some(level) = match_level(&p.name, name2d) {
                match best {
                    Some(b) if level > b => {}
                    Some(b) if level == b => candidates.push(name2d),
                    _ => {
                        best = Some(level);
                        candidates = vec![name2d];
                    }
                }
            }
        }
        match candidates[..] {
            [] => return Err(Error::MissingTensor(p.name)),
            [one] => {
                out.insert(p.name.clone(), ckpt2d.get(one)?.clone());
                used.insert(one.to_string());
                mapping.push((p.name, one.to_string()));
            }
            _ => {
                return Err(CheckpointError::AmbiguousMapping {
                    name: p.name,
                    candidates: candidates.iter().map(|s| s.to_string()).collect(),
                }
                .into())
            }
        }
    }
    let unmapped = ckpt2d
        .names()
        .filter(|n| !used.contains(*n))
        .map(str::to_string)
        .collect();
    Ok(Remap {
        checkpoint: out,
        mapping,
        unmapped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_round_trip() {
        let c = Checkpoint::new("i3d");
        let bytes = c.to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"INFL");
        assert_eq!(Checkpoint::from_bytes(&bytes).unwrap(), c);
    }

    #[test]
    fn single_tensor_layout() {
        let mut c = Checkpoint::new("x");
        c.insert(
            "w",
            Tensor::new(vec![2, 3], (0..6).map(|v| v as f32).collect()).unwrap(),
        );
        let bytes = c.to_bytes().unwrap();
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let header = std::str::from_utf8(&bytes[16..16 + header_len]).unwrap();
        assert!(header.contains("tensor w 2,3 0 24\n"));
        assert_eq!(bytes.len(), 16 + header_len + 24);
        assert_eq!(
            &bytes[16 + header_len + 4..16 + header_len + 8],
            &1f32.to_le_bytes()
        );
    }

    #[test]
    fn bad_magic() {
        let err = Checkpoint::from_bytes(b"NOPE\x01\0\0\0\0\0\0\0\0\0\0\0").unwrap_err();
        assert_eq!(err, CheckpointError::BadMagic(*b"NOPE"));
    }

    #[test]
    fn whitespace_names_are_refused() {
        let mut c = Checkpoint::new("x");
        c.insert("a b", Tensor::zeros(vec![1]));
        assert!(c.to_bytes().is_err());
    }
}
