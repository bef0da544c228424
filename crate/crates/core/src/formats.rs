//! Headered little-endian containers: `WGA1` audio, `WGV1` video and
//! `WGN1` checkpoints, plus line-delimited JSON records.
//!
//! ```text
//! WGA1: magic | sample_rate u32 | count u32 | count × f32
//! WGV1: magic | frames u32 | channels u32 | height u32 | width u32 | fps f32 | samples × f32
//! WGN1: magic | version u32 | digest [32] | records u32
//!       | { name_len u32 | name | dtype u8 | ndim u32 | ndim × u64 | payload }*
//!       | checksum u64
//! ```
//!
//! The checkpoint checksum is the first eight bytes (little-endian) of the
//! SHA-256 of everything before it.

use std::io::Write;
use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::audio::AudioTrack;
use crate::codec::PixelVideo;
use crate::error::{Error, Result};
use crate::numerics::{DenseArray, ParamStore, Precision, Real};

pub const WGA1: &[u8; 4] = b"WGA1";
pub const WGV1: &[u8; 4] = b"WGV1";
pub const WGN1: &[u8; 4] = b"WGN1";
pub const CHECKPOINT_VERSION: u32 = 1;

fn format_err(format: &'static str, detail: impl Into<String>) -> Error {
    Error::Format {
        format,
        detail: detail.into(),
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    format: &'static str,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8], format: &'static str) -> Self {
        Self { buf, pos: 0, format }
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(format_err(
                self.format,
                format!("truncated at byte {}: need {n}, have {}", self.pos, self.remaining()),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn magic(&mut self, want: &[u8; 4]) -> Result<()> {
        let got = self.take(4)?;
        if got != want {
            return Err(format_err(self.format, format!("bad magic {got:?}")));
        }
        Ok(())
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    /// `count` values of `width` bytes, checked against the remaining input
    /// before anything is allocated.
    fn array<V>(&mut self, count: usize, width: usize, f: impl Fn(&[u8]) -> V) -> Result<Vec<V>> {
        let bytes = count
            .checked_mul(width)
            .ok_or_else(|| format_err(self.format, "element count overflows"))?;
        Ok(self.take(bytes)?.chunks_exact(width).map(f).collect())
    }

    fn finish(&self) -> Result<()> {
        if self.remaining() != 0 {
            return Err(format_err(self.format, format!("{} trailing bytes", self.remaining())));
        }
        Ok(())
    }
}

fn f32_le(b: &[u8]) -> f32 {
    f32::from_le_bytes(b.try_into().expect("4 bytes"))
}

fn f64_le(b: &[u8]) -> f64 {
    f64::from_le_bytes(b.try_into().expect("8 bytes"))
}

pub fn encode_audio(a: &AudioTrack) -> Result<Vec<u8>> {
    let count = u32::try_from(a.samples.len()).map_err(|_| format_err("WGA1", "more than 2^32 samples"))?;
    let mut out = Vec::with_capacity(12 + 4 * a.samples.len());
    out.extend_from_slice(WGA1);
    out.extend_from_slice(&a.sample_rate.to_le_bytes());
    out.extend_from_slice(&count.to_le_bytes());
    for s in &a.samples {
        out.extend_from_slice(&s.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_audio(bytes: &[u8]) -> Result<AudioTrack> {
    let mut r = Reader::new(bytes, "WGA1");
    r.magic(WGA1)?;
    let sample_rate = r.u32()?;
    if sample_rate == 0 {
        return Err(format_err("WGA1", "sample rate 0"));
    }
    let count = r.u32()? as usize;
    let samples = r.array(count, 4, f32_le)?;
    r.finish()?;
    Ok(AudioTrack::new(samples, sample_rate))
}

pub fn encode_video(v: &PixelVideo) -> Result<Vec<u8>> {
    let dims = v.frames.shape();
    let mut out = Vec::with_capacity(24 + 4 * v.frames.len());
    out.extend_from_slice(WGV1);
    for &d in dims {
        let d = u32::try_from(d).map_err(|_| format_err("WGV1", "dimension exceeds u32"))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    out.extend_from_slice(&v.frame_rate.to_le_bytes());
    for x in v.frames.data() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_video(bytes: &[u8]) -> Result<PixelVideo> {
    let mut r = Reader::new(bytes, "WGV1");
    r.magic(WGV1)?;
    let dims = [r.u32()?, r.u32()?, r.u32()?, r.u32()?].map(|d| d as usize);
    let fps = r.f32()?;
    if !(fps > 0.0 && fps.is_finite()) {
        return Err(format_err("WGV1", format!("frame rate {fps}")));
    }
    if dims[1] != 3 {
        return Err(format_err("WGV1", format!("{} channels, expected 3", dims[1])));
    }
    let count = dims
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or_else(|| format_err("WGV1", "dimensions overflow"))?;
    let data = r.array(count, 4, f32_le)?;
    r.finish()?;
    PixelVideo::new(DenseArray::new(dims.to_vec(), data)?, fps)
}

/// One checkpoint tensor in its stored precision.
#[derive(Debug, Clone, PartialEq)]
pub enum Tensor {
    F32(DenseArray<f32>),
    F64(DenseArray<f64>),
}

impl Tensor {
    fn code(&self) -> u8 {
        match self {
            Tensor::F32(_) => 0,
            Tensor::F64(_) => 1,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            Tensor::F32(a) => a.shape(),
            Tensor::F64(a) => a.shape(),
        }
    }

    /// Converts to `T`; narrowing double to single is refused.
    pub fn to_array<T: Real>(&self) -> Result<DenseArray<T>> {
        match self {
            Tensor::F32(a) => Ok(a.cast()),
            Tensor::F64(a) if T::PRECISION == Precision::Double => Ok(a.cast()),
            Tensor::F64(_) => Err(Error::Precision("double-precision checkpoint loaded as single".into())),
        }
    }

    pub fn from_array<T: Real>(a: &DenseArray<T>) -> Self {
        match T::PRECISION {
            Precision::Single => Tensor::F32(a.cast()),
            Precision::Double => Tensor::F64(a.cast()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// SHA-256 of the resolved config that produced the weights.
    pub digest: [u8; 32],
    pub records: Vec<(String, Tensor)>,
}

pub fn checksum(bytes: &[u8]) -> u64 {
    let h = Sha256::digest(bytes);
    u64::from_le_bytes(h[..8].try_into().expect("8 bytes"))
}

impl Checkpoint {
    pub fn from_stores<T: Real>(digest: [u8; 32], stores: &[&ParamStore<T>]) -> Self {
        let records = stores
            .iter()
            .flat_map(|s| s.iter().map(|(n, p)| (n.to_string(), Tensor::from_array(&p.value))))
            .collect();
        Self { digest, records }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.records.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Records accepted by `keep`, all marked trainable.
    pub fn to_store<T: Real>(&self, keep: impl Fn(&str) -> bool) -> Result<ParamStore<T>> {
        let mut s = ParamStore::new();
        for (n, t) in self.records.iter().filter(|(n, _)| keep(n)) {
            s.insert(n.clone(), t.to_array()?, false)?;
        }
        Ok(s)
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(WGN1);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.digest);
        let count = u32::try_from(self.records.len()).map_err(|_| format_err("WGN1", "too many records"))?;
        out.extend_from_slice(&count.to_le_bytes());
        for (name, t) in &self.records {
            let len = u32::try_from(name.len()).map_err(|_| format_err("WGN1", "name too long"))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.code());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match t {
                Tensor::F32(a) => a.data().iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                Tensor::F64(a) => a.data().iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        let sum = checksum(&out);
        out.extend_from_slice(&sum.to_le_bytes());
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(format_err("WGN1", "shorter than the checksum"));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        let mut r = Reader::new(body, "WGN1");
        r.magic(WGN1)?;
        let stored = u64::from_le_bytes(tail.try_into().expect("8 bytes"));
        let computed = checksum(body);
        if stored != computed {
            return Err(Error::Checksum { stored, computed });
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(format_err("WGN1", format!("unsupported version {version}")));
        }
        let digest: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let count = r.u32()? as usize;
        let mut records = Vec::with_capacity(count.min(r.remaining() / 9));
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| format_err("WGN1", "record name is not UTF-8"))?
                .to_string();
            if records.iter().any(|(n, _)| *n == name) {
                return Err(format_err("WGN1", format!("duplicate record `{name}`")));
            }
            let code = r.u8()?;
            let ndim = r.u32()? as usize;
            if ndim > 8 {
                return Err(format_err("WGN1", format!("`{name}` has {ndim} dimensions")));
            }
            let shape = (0..ndim)
                .map(|_| r.u64().and_then(|d| usize::try_from(d).map_err(|_| format_err("WGN1", "dimension overflow"))))
                .collect::<Result<Vec<_>>>()?;
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| format_err("WGN1", "shape overflows"))?;
            let t = match code {
                0 => Tensor::F32(DenseArray::new(shape, r.array(numel, 4, f32_le)?)?),
                1 => Tensor::F64(DenseArray::new(shape, r.array(numel, 8, f64_le)?)?),
                c => return Err(format_err("WGN1", format!("unknown dtype code {c}"))),
            };
            records.push((name, t));
        }
        r.finish()?;
        Ok(Self { digest, records })
    }
}

/// Writes `bytes` to `path` through a temporary sibling and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("partial");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Appends one JSON object per line.
pub fn write_jsonl<R: Serialize>(w: &mut impl Write, records: &[R]) -> Result<()> {
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        writeln!(w, "{line}")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn audio_layout() {
        let a = AudioTrack::new(vec![0.5, -1.0], 16_000);
        let b = encode_audio(&a).unwrap();
        assert_eq!(&b[..4], b"WGA1");
        assert_eq!(&b[4..8], &16_000u32.to_le_bytes());
        assert_eq!(&b[8..12], &2u32.to_le_bytes());
        assert_eq!(&b[12..16], &0.5f32.to_le_bytes());
        assert_eq!(decode_audio(&b).unwrap(), a);
        assert!(decode_audio(&b[..15]).is_err());
    }

    #[test]
    fn checkpoint_detects_corruption() {
        let mut s = ParamStore::<f32>::new();
        s.insert("w", DenseArray::from_rows(&[&[1.0, 2.0]]), false).unwrap();
        let c = Checkpoint::from_stores([7; 32], &[&s]);
        let mut b = c.encode().unwrap();
        assert_eq!(Checkpoint::decode(&b).unwrap(), c);
        let n = b.len();
        b[n - 12] ^= 1;
        assert!(matches!(Checkpoint::decode(&b), Err(Error::Checksum { .. })));
    }
}
