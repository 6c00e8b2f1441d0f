//! Checkpoint container.
//!
//! A UTF-8 manifest of `key = value` lines and a blob table, terminated by
//! an `end` line, followed by the blobs in table order: little-endian f32
//! values for the initial and current parameters, then LSB-first bit-packed
//! mask layers. Blob offsets are relative to the end of the manifest.

use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{NetworkSpec, ParamSet, Stage};
use crate::pruning::{Coverage, Mask, MaskLayer, Scope};

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &str = "metalth-checkpoint";

/// Position of a ChaCha8 stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }

    fn encode(&self) -> String {
        format!("{}:{}:{}", hex::encode(self.seed), self.stream, self.word_pos)
    }

    fn decode(s: &str) -> Result<Self> {
        let bad = || Error::Format(format!("bad rng state `{s}`"));
        let mut parts = s.split(':');
        let (Some(seed), Some(stream), Some(pos), None) = (parts.next(), parts.next(), parts.next(), parts.next())
        else {
            return Err(bad());
        };
        let seed: [u8; 32] = hex::decode(seed).ok().and_then(|v| v.try_into().ok()).ok_or_else(bad)?;
        Ok(Self {
            seed,
            stream: stream.parse().map_err(|_| bad())?,
            word_pos: pos.parse().map_err(|_| bad())?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Parameters before any training; the rewind target.
    pub initial: ParamSet,
    /// Parameters after the last completed stage; its `stage` is the checkpoint's stage.
    pub current: ParamSet,
    pub mask: Option<Mask>,
    pub config_hash: String,
    pub rng: RngState,
}

impl Checkpoint {
    pub fn stage(&self) -> Stage {
        self.current.stage
    }

    pub fn spec(&self) -> &NetworkSpec {
        self.current.spec()
    }

    /// Fails with a pipeline-order error unless the stage is one of `allowed`.
    pub fn require_stage(&self, allowed: &[Stage]) -> Result<()> {
        if allowed.contains(&self.stage()) {
            Ok(())
        } else {
            Err(Error::PipelineOrder {
                expected: allowed.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(" or "),
                found: self.stage(),
            })
        }
    }

    /// Refuses a checkpoint written under another configuration unless `force`.
    pub fn check_hash(&self, current: &str, force: bool) -> Result<()> {
        if force || self.config_hash == current {
            Ok(())
        } else {
            Err(Error::HashMismatch {
                checkpoint: self.config_hash.clone(),
                current: current.to_string(),
            })
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut table = Vec::new();
        let mut blobs: Vec<Vec<u8>> = Vec::new();
        for (prefix, params) in [("initial", &self.initial), ("current", &self.current)] {
            for p in params.entries() {
                let bytes: Vec<u8> = p.tensor.values().iter().flat_map(|v| v.to_le_bytes()).collect();
                table.push((format!("{prefix}/{}", p.name()), p.tensor.shape().to_vec(), bytes.len()));
                blobs.push(bytes);
            }
        }
        if let Some(mask) = &self.mask {
            for (l, p) in mask.layers().iter().zip(self.current.entries()) {
                let bytes = pack_bits(l.bits());
                table.push((format!("mask/{}", l.name()), p.tensor.shape().to_vec(), bytes.len()));
                blobs.push(bytes);
            }
        }

        let mut head = String::new();
        let _ = writeln!(head, "{MAGIC}");
        let _ = writeln!(head, "version = {FORMAT_VERSION}");
        let _ = writeln!(head, "stage = {}", self.stage());
        let _ = writeln!(head, "spec = {}", self.spec());
        let _ = writeln!(head, "config_hash = {}", self.config_hash);
        let _ = writeln!(head, "rng = {}", self.rng.encode());
        match &self.mask {
            Some(m) => {
                let _ = writeln!(head, "mask = {}:{}:{}", m.percent(), m.scope(), m.is_complement());
            }
            None => {
                let _ = writeln!(head, "mask = none");
            }
        }
        let mut offset = 0;
        for (name, shape, len) in &table {
            let dims = shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x");
            let _ = writeln!(head, "blob {name} shape={dims} offset={offset} bytes={len}");
            offset += len;
        }
        let _ = writeln!(head, "end");

        let mut out = head.into_bytes();
        for b in blobs {
            out.extend_from_slice(&b);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let header = Header::parse(bytes)?;
        let expected = header.size as u64 + header.blobs.iter().map(|b| b.bytes as u64).sum::<u64>();
        if (bytes.len() as u64) < expected {
            return Err(Error::Truncated {
                expected,
                found: bytes.len() as u64,
            });
        }
        if (bytes.len() as u64) > expected {
            return Err(Error::Format(format!(
                "{} trailing bytes after the last blob",
                bytes.len() as u64 - expected
            )));
        }
        let data = &bytes[header.size..];
        let mut blobs = header.blobs.iter();
        let spec = &header.spec;
        let layout = spec.layout();

        let mut read_params = |prefix: &str, stage: Stage| -> Result<ParamSet> {
            let mut values = Vec::with_capacity(layout.len());
            for shape in &layout {
                let blob = next_blob(&mut blobs, &format!("{prefix}/{}.{}", shape.layer, shape.kind.as_str()))?;
                if blob.shape != shape.shape || blob.bytes != 4 * shape.len() {
                    return Err(Error::Format(format!(
                        "blob {} does not match the network layout",
                        blob.name
                    )));
                }
                let raw = &data[blob.offset..blob.offset + blob.bytes];
                values.push(
                    raw.chunks_exact(4)
                        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                        .collect(),
                );
            }
            ParamSet::from_values(spec, stage, values).map_err(|e| Error::Format(e.to_string()))
        };
        let initial = read_params("initial", Stage::Initial)?;
        let current = read_params("current", header.stage)?;

        let mask = match header.mask {
            None => None,
            Some((percent, scope, complemented)) => {
                let mut layers = Vec::with_capacity(layout.len());
                for shape in &layout {
                    let blob = next_blob(&mut blobs, &format!("mask/{}.{}", shape.layer, shape.kind.as_str()))?;
                    if blob.shape != shape.shape || blob.bytes != shape.len().div_ceil(8) {
                        return Err(Error::Format(format!(
                            "blob {} does not match the network layout",
                            blob.name
                        )));
                    }
                    let bits = unpack_bits(&data[blob.offset..blob.offset + blob.bytes], shape.len());
                    let coverage = if shape.is_prunable() {
                        Coverage::Prunable
                    } else {
                        Coverage::Exempt
                    };
                    layers.push(MaskLayer::new(shape.layer.clone(), shape.kind, coverage, bits));
                }
                Some(Mask::from_layers(layers, percent, scope, complemented))
            }
        };
        if let Some(extra) = blobs.next() {
            return Err(Error::Format(format!("unexpected blob {}", extra.name)));
        }
        Ok(Self {
            initial,
            current,
            mask,
            config_hash: header.config_hash,
            rng: header.rng,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

pub fn save_checkpoint(c: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    c.save(path)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    Checkpoint::load(path)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlobEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub bytes: usize,
}

/// Parsed manifest.
#[derive(Debug, Clone)]
pub struct Header {
    /// Manifest length in bytes, including the `end` line.
    pub size: usize,
    pub version: u32,
    pub stage: Stage,
    pub spec: NetworkSpec,
    pub config_hash: String,
    pub rng: RngState,
    pub mask: Option<(f64, Scope, bool)>,
    pub blobs: Vec<BlobEntry>,
}

impl Header {
    pub fn parse(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let mut lines = Vec::new();
        loop {
            let Some(nl) = bytes[pos..].iter().position(|&b| b == b'\n') else {
                return Err(Error::Truncated {
                    expected: bytes.len() as u64 + 1,
                    found: bytes.len() as u64,
                });
            };
            let line = std::str::from_utf8(&bytes[pos..pos + nl])
                .map_err(|_| Error::Format("manifest is not UTF-8".into()))?;
            pos += nl + 1;
            if line == "end" {
                break;
            }
            lines.push(line);
        }
        let mut lines = lines.into_iter();
        if lines.next() != Some(MAGIC) {
            return Err(Error::Format("not a checkpoint file".into()));
        }

        let mut fields = std::collections::BTreeMap::new();
        let mut blobs = Vec::new();
        for line in lines {
            if let Some(rest) = line.strip_prefix("blob ") {
                blobs.push(parse_blob(rest)?);
            } else {
                let (k, v) = line
                    .split_once(" = ")
                    .ok_or_else(|| Error::Format(format!("bad manifest line `{line}`")))?;
                fields.insert(k, v);
            }
        }
        let field = |k: &str| {
            fields
                .get(k)
                .copied()
                .ok_or_else(|| Error::Format(format!("manifest missing `{k}`")))
        };

        let version: u32 = field("version")?
            .parse()
            .map_err(|_| Error::Format("bad version".into()))?;
        if version != FORMAT_VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let stage: Stage = field("stage")?.parse()?;
        let spec: NetworkSpec = field("spec")?
            .parse()
            .map_err(|e: Error| Error::Format(e.to_string()))?;
        let mask = match field("mask")? {
            "none" => None,
            m => {
                let bad = || Error::Format(format!("bad mask descriptor `{m}`"));
                let mut parts = m.split(':');
                let percent = parts.next().and_then(|p| p.parse().ok()).ok_or_else(bad)?;
                let scope = parts.next().and_then(|p| p.parse().ok()).ok_or_else(bad)?;
                let complemented = parts.next().and_then(|p| p.parse().ok()).ok_or_else(bad)?;
                Some((percent, scope, complemented))
            }
        };
        let mut expected_offset = 0;
        for b in &blobs {
            if b.offset != expected_offset {
                return Err(Error::Format(format!("blob {} is not contiguous", b.name)));
            }
            expected_offset += b.bytes;
        }
        Ok(Self {
            size: pos,
            version,
            stage,
            spec,
            config_hash: field("config_hash")?.to_string(),
            rng: RngState::decode(field("rng")?)?,
            mask,
            blobs,
        })
    }
}

fn parse_blob(rest: &str) -> Result<BlobEntry> {
    let bad = || Error::Format(format!("bad blob entry `{rest}`"));
    let mut parts = rest.split(' ');
    let name = parts.next().ok_or_else(bad)?.to_string();
    let (mut shape, mut offset, mut bytes) = (None, None, None);
    for part in parts {
        let (k, v) = part.split_once('=').ok_or_else(bad)?;
        match k {
            "shape" => {
                shape = Some(
                    v.split('x')
                        .map(|d| d.parse().map_err(|_| bad()))
                        .collect::<Result<Vec<usize>>>()?,
                )
            }
            "offset" => offset = Some(v.parse().map_err(|_| bad())?),
            "bytes" => bytes = Some(v.parse().map_err(|_| bad())?),
            _ => return Err(bad()),
        }
    }
    Ok(BlobEntry {
        name,
        shape: shape.ok_or_else(bad)?,
        offset: offset.ok_or_else(bad)?,
        bytes: bytes.ok_or_else(bad)?,
    })
}

fn next_blob<'a>(blobs: &mut impl Iterator<Item = &'a BlobEntry>, name: &str) -> Result<&'a BlobEntry> {
    match blobs.next() {
        Some(b) if b.name == name => Ok(b),
        Some(b) => Err(Error::Format(format!("expected blob {name}, found {}", b.name))),
        None => Err(Error::Format(format!("missing blob {name}"))),
    }
}

fn pack_bits(bits: &[bool]) -> Vec<u8> {
    let mut out = vec![0u8; bits.len().div_ceil(8)];
    for (i, &b) in bits.iter().enumerate() {
        if b {
            out[i / 8] |= 1 << (i % 8);
        }
    }
    out
}

fn unpack_bits(bytes: &[u8], len: usize) -> Vec<bool> {
    (0..len).map(|i| bytes[i / 8] >> (i % 8) & 1 == 1).collect()
}
