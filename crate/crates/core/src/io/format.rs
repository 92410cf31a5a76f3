//! The `TERN` model file.
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! magic        4 bytes  "TERN"
//! version      u32
//! entry count  u32
//! entries:
//!   name length u32, name bytes (UTF-8)
//!   policy tag  u8     0 = FP, 1 = TERN, 2 = REL
//!   rank        u32, then rank × u32 dimensions
//!   FP:         product(dims) × f32
//!   TERN/REL:   branch count u32 (1 for TERN), then per branch
//!               β f32, α f32, ceil(len / 16) × u32 packed code words
//! crc32        u32 over every preceding byte
//! ```

use std::path::Path;

use crate::error::{Result, TernError};
use crate::exec::packed::{unpack_codes, words_for};
use crate::model::PolicyTag;

pub const MAGIC: [u8; 4] = *b"TERN";
pub const VERSION: u32 = 1;

/// One ternary branch of an entry.
#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub beta: f32,
    pub alpha: f32,
    pub words: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum EntryData {
    Fp(Vec<f32>),
    /// One block for TERN, one per branch for REL.
    Ternary {
        tag: PolicyTag,
        blocks: Vec<Block>,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: EntryData,
}

impl Entry {
    pub fn tag(&self) -> PolicyTag {
        match &self.data {
            EntryData::Fp(_) => PolicyTag::Fp,
            EntryData::Ternary { tag, .. } => *tag,
        }
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Bytes this entry occupies in a file.
    pub fn encoded_len(&self) -> usize {
        let head = 4 + self.name.len() + 1 + 4 + 4 * self.shape.len();
        head + match &self.data {
            EntryData::Fp(v) => 4 * v.len(),
            EntryData::Ternary { blocks, .. } => {
                4 + blocks.iter().map(|b| 8 + 4 * b.words.len()).sum::<usize>()
            }
        }
    }

    fn encode_into(&self, out: &mut Vec<u8>) {
        put_u32(out, self.name.len() as u32);
        out.extend_from_slice(self.name.as_bytes());
        out.push(self.tag() as u8);
        put_u32(out, self.shape.len() as u32);
        for &d in &self.shape {
            put_u32(out, d as u32);
        }
        match &self.data {
            EntryData::Fp(v) => v
                .iter()
                .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            EntryData::Ternary { blocks, .. } => {
                put_u32(out, blocks.len() as u32);
                for b in blocks {
                    out.extend_from_slice(&b.beta.to_le_bytes());
                    out.extend_from_slice(&b.alpha.to_le_bytes());
                    b.words.iter().for_each(|&w| put_u32(out, w));
                }
            }
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TernModelFile {
    pub entries: Vec<Entry>,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let available = self.buf.len() - self.pos;
        if n > available {
            return Err(TernError::Truncated {
                offset: self.pos,
                needed: n,
                available,
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    /// Reads `count` u32-sized items, checking the length before allocating.
    fn words(&mut self, count: usize) -> Result<Vec<u32>> {
        let bytes = self.take(count.saturating_mul(4))?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }

    fn parse_err(&self, reason: impl Into<String>) -> TernError {
        TernError::Parse {
            offset: self.pos,
            reason: reason.into(),
        }
    }

    fn entry(&mut self) -> Result<Entry> {
        let name_len = self.u32()? as usize;
        let name = std::str::from_utf8(self.take(name_len)?)
            .map_err(|_| self.parse_err("entry name is not UTF-8"))?
            .to_string();
        let tag = match self.take(1)?[0] {
            0 => PolicyTag::Fp,
            1 => PolicyTag::Tern,
            2 => PolicyTag::Rel,
            t => return Err(self.parse_err(format!("unknown policy tag {t}"))),
        };
        let rank = self.u32()? as usize;
        if !(1..=4).contains(&rank) {
            return Err(self.parse_err(format!("entry `{name}` has rank {rank}")));
        }
        let shape = self
            .words(rank)?
            .into_iter()
            .map(|d| d as usize)
            .collect::<Vec<_>>();
        let len = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| self.parse_err("entry size overflows"))?;
        let data = match tag {
            PolicyTag::Fp => {
                EntryData::Fp(self.words(len)?.into_iter().map(f32::from_bits).collect())
            }
            _ => {
                let count = self.u32()? as usize;
                if count == 0 || (tag == PolicyTag::Tern && count != 1) {
                    return Err(
                        self.parse_err(format!("entry `{name}` has {count} ternary blocks"))
                    );
                }
                let mut blocks = Vec::new();
                for _ in 0..count {
                    let beta = self.f32()?;
                    let alpha = self.f32()?;
                    let start = self.pos;
                    let words = self.words(words_for(len))?;
                    unpack_codes(&words, len).map_err(|e| TernError::Parse {
                        offset: start,
                        reason: format!("entry `{name}`: {e}"),
                    })?;
                    blocks.push(Block { beta, alpha, words });
                }
                EntryData::Ternary { tag, blocks }
            }
        };
        Ok(Entry { name, shape, data })
    }
}

impl TernModelFile {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        put_u32(&mut out, VERSION);
        put_u32(&mut out, self.entries.len() as u32);
        for e in &self.entries {
            e.encode_into(&mut out);
        }
        let crc = crc32fast::hash(&out);
        put_u32(&mut out, crc);
        out
    }

    /// Parses and validates a whole file. Truncation is reported as such
    /// even though it also breaks the checksum.
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut head = Reader { buf: bytes, pos: 0 };
        let magic = head.take(4)?;
        if magic != MAGIC {
            return Err(TernError::BadMagic {
                expected: MAGIC.to_vec(),
                found: magic.to_vec(),
            });
        }
        let version = head.u32()?;
        if version != VERSION {
            return Err(TernError::Version {
                expected: VERSION,
                found: version,
            });
        }
        if bytes.len() < 16 {
            return Err(TernError::Truncated {
                offset: bytes.len(),
                needed: 16 - bytes.len(),
                available: 0,
            });
        }
        let (payload, trailer) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(trailer.try_into().expect("4 bytes"));
        let computed = crc32fast::hash(payload);
        let parsed = Self::parse_body(payload);
        match parsed {
            Err(e @ TernError::Truncated { .. }) => Err(e),
            _ if stored != computed => Err(TernError::Checksum { stored, computed }),
            other => other,
        }
    }

    fn parse_body(payload: &[u8]) -> Result<Self> {
        let mut r = Reader {
            buf: payload,
            pos: 8,
        };
        let count = r.u32()? as usize;
        let mut entries = Vec::new();
        for _ in 0..count {
            entries.push(r.entry()?);
        }
        if r.pos != payload.len() {
            return Err(r.parse_err(format!("{} trailing bytes", payload.len() - r.pos)));
        }
        Ok(TernModelFile { entries })
    }

    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(&path, self.encode()).map_err(|e| TernError::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = std::fs::read(&path).map_err(|e| TernError::io(&path, e))?;
        Self::decode(&bytes)
    }
}
