//! The `CSRK` checkpoint container.
//!
//! ```text
//! "CSRK" | u32 version | u32 record_count
//! per record: u32 name_len | name (UTF-8) | u32 ndim | u32 dims[ndim] | u8 trainable | f32 data[]
//! trailer:    u8 stage | u64 rng_seed | u32 meta_len | meta (UTF-8 JSON)
//! ```
//!
//! All integers and floats are little-endian.

use std::collections::HashSet;
use std::fmt;
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"CSRK";
pub const FORMAT_VERSION: u32 = 1;

const MAX_NDIM: usize = 8;
const MAX_NAME_LEN: usize = 1 << 12;

/// Training stage a checkpoint was produced by.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Stage {
    Vae,
    Backbone,
    Control,
}

impl Stage {
    pub fn code(self) -> u8 {
        match self {
            Stage::Vae => 0,
            Stage::Backbone => 1,
            Stage::Control => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Stage::Vae),
            1 => Some(Stage::Backbone),
            2 => Some(Stage::Control),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Stage::Vae => "vae",
            Stage::Backbone => "backbone",
            Stage::Control => "control",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "vae" => Some(Stage::Vae),
            "backbone" => Some(Stage::Backbone),
            "control" => Some(Stage::Control),
            _ => None,
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TensorRecord {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
    pub trainable: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub format_version: u32,
    pub stage: Stage,
    pub records: Vec<TensorRecord>,
    pub rng_seed: u64,
    /// Model and schedule settings needed to rebuild the networks, as JSON.
    pub meta: String,
}

impl Checkpoint {
    pub fn new(stage: Stage, rng_seed: u64) -> Self {
        Self { format_version: FORMAT_VERSION, stage, records: Vec::new(), rng_seed, meta: String::new() }
    }

    pub fn record(&self, name: &str) -> Option<&TensorRecord> {
        self.records.iter().find(|r| r.name == name)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for r in &self.records {
            if !seen.insert(r.name.as_str()) {
                return Err(Error::validation("checkpoint", format!("duplicate record name {:?}", r.name)));
            }
            if r.name.len() > MAX_NAME_LEN {
                return Err(Error::validation("checkpoint", format!("record name longer than {MAX_NAME_LEN} bytes")));
            }
            if r.dims.is_empty() || r.dims.len() > MAX_NDIM || r.dims.contains(&0) {
                return Err(Error::validation("checkpoint", format!("record {:?} has invalid dims {:?}", r.name, r.dims)));
            }
            if r.dims.iter().product::<usize>() != r.data.len() {
                return Err(Error::validation(
                    "checkpoint",
                    format!("record {:?}: dims {:?} do not match {} values", r.name, r.dims, r.data.len()),
                ));
            }
            if r.dims.iter().any(|&d| d > u32::MAX as usize) {
                return Err(Error::validation("checkpoint", format!("record {:?} dimension exceeds u32", r.name)));
            }
        }
        Ok(())
    }

    /// True when both checkpoints serialize to the same bytes.
    pub fn bit_eq(&self, other: &Self) -> bool {
        match (encode_checkpoint(self), encode_checkpoint(other)) {
            (Ok(a), Ok(b)) => a == b,
            _ => false,
        }
    }
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

pub fn encode_checkpoint(c: &Checkpoint) -> Result<Vec<u8>> {
    c.validate()?;
    let payload: usize = c.records.iter().map(|r| 13 + r.name.len() + 4 * r.dims.len() + 4 * r.data.len()).sum();
    let mut buf = Vec::with_capacity(12 + payload + 13 + c.meta.len());
    buf.extend_from_slice(MAGIC);
    put_u32(&mut buf, c.format_version);
    put_u32(&mut buf, c.records.len() as u32);
    for r in &c.records {
        put_u32(&mut buf, r.name.len() as u32);
        buf.extend_from_slice(r.name.as_bytes());
        put_u32(&mut buf, r.dims.len() as u32);
        for &d in &r.dims {
            put_u32(&mut buf, d as u32);
        }
        buf.push(u8::from(r.trainable));
        for v in &r.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf.push(c.stage.code());
    buf.extend_from_slice(&c.rng_seed.to_le_bytes());
    put_u32(&mut buf, c.meta.len() as u32);
    buf.extend_from_slice(c.meta.as_bytes());
    Ok(buf)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, offset: usize, reason: impl Into<String>) -> Error {
        Error::parse("checkpoint", offset, reason)
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let remaining = self.buf.len() - self.pos;
        if n > remaining {
            return Err(self.err(self.pos, format!("truncated {what}: need {n} bytes, {remaining} left")));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(b);
        Ok(u64::from_le_bytes(a))
    }

    fn utf8(&mut self, n: usize, what: &str) -> Result<String> {
        let at = self.pos;
        let bytes = self.take(n, what)?;
        std::str::from_utf8(bytes).map(str::to_owned).map_err(|_| self.err(at, format!("{what} is not UTF-8")))
    }
}

pub fn parse_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(r.err(0, "bad magic, expected \"CSRK\""));
    }
    r.pos = 4;
    let format_version = r.u32("version")?;
    if format_version != FORMAT_VERSION {
        return Err(r.err(4, format!("unsupported version {format_version}")));
    }
    let count = r.u32("record count")? as usize;
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for _ in 0..count {
        let at = r.pos;
        let name_len = r.u32("name length")? as usize;
        if name_len > MAX_NAME_LEN {
            return Err(r.err(at, format!("name length {name_len} exceeds {MAX_NAME_LEN}")));
        }
        let name = r.utf8(name_len, "record name")?;
        if !seen.insert(name.clone()) {
            return Err(r.err(at, format!("duplicate record name {name:?}")));
        }
        let at = r.pos;
        let ndim = r.u32("ndim")? as usize;
        if ndim == 0 || ndim > MAX_NDIM {
            return Err(r.err(at, format!("record {name:?}: ndim {ndim} outside 1..={MAX_NDIM}")));
        }
        let mut dims = Vec::with_capacity(ndim);
        let mut numel = 1usize;
        for _ in 0..ndim {
            let at = r.pos;
            let d = r.u32("dims")? as usize;
            if d == 0 {
                return Err(r.err(at, format!("record {name:?}: zero dimension")));
            }
            numel = numel.checked_mul(d).ok_or_else(|| r.err(at, format!("record {name:?}: size overflow")))?;
            dims.push(d);
        }
        let at = r.pos;
        let trainable = match r.u8("trainable flag")? {
            0 => false,
            1 => true,
            other => return Err(r.err(at, format!("record {name:?}: trainable flag {other}"))),
        };
        let nbytes = numel.checked_mul(4).ok_or_else(|| r.err(r.pos, "size overflow"))?;
        let raw = r.take(nbytes, &format!("data of record {name:?}"))?;
        let data = raw.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
        records.push(TensorRecord { name, dims, data, trainable });
    }
    let at = r.pos;
    let stage = Stage::from_code(r.u8("stage")?).ok_or_else(|| r.err(at, "unknown stage code"))?;
    let rng_seed = r.u64("rng seed")?;
    let meta_len = r.u32("meta length")? as usize;
    let meta = r.utf8(meta_len, "meta")?;
    if r.pos != bytes.len() {
        return Err(r.err(r.pos, format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(Checkpoint { format_version, stage, records, rng_seed, meta })
}

pub fn write_checkpoint(path: impl AsRef<Path>, c: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_checkpoint(c)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_checkpoint(&bytes).map_err(|e| match e {
        Error::Parse { offset, reason, .. } => Error::parse(path.display().to_string(), offset, reason),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rec(name: &str, dims: &[usize], trainable: bool) -> TensorRecord {
        let n = dims.iter().product::<usize>();
        TensorRecord { name: name.into(), dims: dims.to_vec(), data: (0..n).map(|i| i as f32 * 0.5 - 1.0).collect(), trainable }
    }

    #[test]
    fn empty_checkpoint_layout() {
        let c = Checkpoint::new(Stage::Vae, 0);
        let b = encode_checkpoint(&c).unwrap();
        assert_eq!(&b[..4], b"CSRK");
        assert_eq!(&b[4..8], &FORMAT_VERSION.to_le_bytes());
        assert_eq!(&b[8..12], &0u32.to_le_bytes());
        // stage, seed, meta length
        assert_eq!(b.len(), 12 + 1 + 8 + 4);
    }

    #[test]
    fn two_by_two_payload_is_sixteen_bytes() {
        let mut c = Checkpoint::new(Stage::Vae, 0);
        c.records.push(rec("w", &[2, 2], true));
        let b = encode_checkpoint(&c).unwrap();
        // u32 name_len, "w", u32 ndim, 2×u32 dims, u8 flag
        let header = 4 + 1 + 4 + 8 + 1;
        assert_eq!(b.len() - 12 - 13, header + 16);
    }

    #[test]
    fn wrong_magic_reports_offset_zero() {
        let err = parse_checkpoint(b"XSRK\x01\0\0\0\0\0\0\0").unwrap_err();
        match err {
            Error::Parse { offset, .. } => assert_eq!(offset, 0),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn short_payload_is_truncation() {
        let mut c = Checkpoint::new(Stage::Vae, 0);
        c.records.push(rec("w", &[2, 2], false));
        let b = encode_checkpoint(&c).unwrap();
        // keep only 12 of the 16 data bytes
        let cut = 12 + 4 + 1 + 4 + 8 + 1 + 12;
        let err = parse_checkpoint(&b[..cut]).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
    }

    #[test]
    fn duplicate_names_rejected_on_parse() {
        let mut c = Checkpoint::new(Stage::Vae, 0);
        c.records.push(rec("a", &[1], false));
        c.records.push(rec("b", &[1], false));
        let mut b = encode_checkpoint(&c).unwrap();
        let pos = b.iter().rposition(|&x| x == b'b').unwrap();
        b[pos] = b'a';
        let err = parse_checkpoint(&b).unwrap_err();
        assert!(err.to_string().contains("duplicate"), "{err}");
        let mut dup = c.clone();
        dup.records[1].name = "a".into();
        assert!(encode_checkpoint(&dup).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.csrk");
        let mut c = Checkpoint::new(Stage::Control, 42);
        c.records.push(rec("unet.conv_in.weight", &[2, 1, 3, 3], true));
        c.meta = "{\"a\":1}".into();
        write_checkpoint(&path, &c).unwrap();
        assert!(read_checkpoint(&path).unwrap().bit_eq(&c));
    }

    fn arb_record() -> impl Strategy<Value = TensorRecord> {
        (prop::collection::vec(1usize..4, 1..4), any::<bool>()).prop_flat_map(|(dims, trainable)| {
            let n = dims.iter().product::<usize>();
            prop::collection::vec(any::<u32>().prop_map(f32::from_bits), n)
                .prop_map(move |data| TensorRecord { name: String::new(), dims: dims.clone(), data, trainable })
        })
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(recs in prop::collection::vec(arb_record(), 0..5), seed in any::<u64>(), stage in 0u8..3) {
            let mut c = Checkpoint::new(Stage::from_code(stage).unwrap(), seed);
            for (i, mut r) in recs.into_iter().enumerate() {
                r.name = format!("t{i}");
                c.records.push(r);
            }
            let bytes = encode_checkpoint(&c).unwrap();
            let back = parse_checkpoint(&bytes).unwrap();
            prop_assert_eq!(encode_checkpoint(&back).unwrap(), bytes);
            prop_assert_eq!(back.rng_seed, seed);
        }

        #[test]
        fn parser_never_panics(bytes in prop::collection::vec(any::<u8>(), 0..256)) {
            let _ = parse_checkpoint(&bytes);
        }
    }
}
