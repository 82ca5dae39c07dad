//! Flat parameter storage with a named segment table.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! magic      5 bytes   "SDPO1"
//! n_segments u32
//! repeated n_segments times:
//!     name_len u32, name utf-8 bytes, start u64, len u64
//! n_values   u64
//! values     n_values × f64 (IEEE-754 bits, little-endian)
//! ```

use std::io::{Read, Write};
use std::ops::Range;
use std::path::Path;

use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"SDPO1";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub name: String,
    pub start: usize,
    pub len: usize,
}

impl Segment {
    pub fn range(&self) -> Range<usize> {
        self.start..self.start + self.len
    }
}

/// A flat vector of `f64` parameters partitioned into named, contiguous segments.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
    segments: Vec<Segment>,
}

impl ParamVector {
    /// Zero-filled vector with segments laid out back to back in the given order.
    pub fn zeros(layout: &[(String, usize)]) -> Self {
        let mut segments = Vec::with_capacity(layout.len());
        let mut start = 0;
        for (name, len) in layout {
            segments.push(Segment {
                name: name.clone(),
                start,
                len: *len,
            });
            start += len;
        }
        Self {
            values: vec![0.0; start],
            segments,
        }
    }

    /// A single anonymous segment covering `values`.
    pub fn from_values(values: Vec<f64>) -> Self {
        let len = values.len();
        Self {
            values,
            segments: vec![Segment {
                name: "values".to_string(),
                start: 0,
                len,
            }],
        }
    }

    /// Builds a vector from explicit parts, checking that the segments tile `[0, len)`.
    pub fn from_parts(values: Vec<f64>, segments: Vec<Segment>) -> Result<Self> {
        let mut sorted: Vec<&Segment> = segments.iter().collect();
        sorted.sort_by_key(|s| s.start);
        let mut cursor = 0;
        for seg in sorted {
            if seg.start != cursor {
                return Err(Error::config(format!(
                    "segment '{}' starts at {} but expected {}",
                    seg.name, seg.start, cursor
                )));
            }
            cursor += seg.len;
        }
        if cursor != values.len() {
            return Err(Error::config(format!(
                "segments cover {} values but vector holds {}",
                cursor,
                values.len()
            )));
        }
        Ok(Self { values, segments })
    }

    /// Same layout as `self`, all values zero.
    pub fn zeros_like(&self) -> Self {
        Self {
            values: vec![0.0; self.values.len()],
            segments: self.segments.clone(),
        }
    }

    /// Same layout as `self` holding `values`.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        if values.len() != self.values.len() {
            return Err(Error::config(format!(
                "expected {} values, got {}",
                self.values.len(),
                values.len()
            )));
        }
        Ok(Self {
            values,
            segments: self.segments.clone(),
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn segment_range(&self, name: &str) -> Option<Range<usize>> {
        self.segments
            .iter()
            .find(|s| s.name == name)
            .map(Segment::range)
    }

    pub fn segment(&self, name: &str) -> Option<&[f64]> {
        self.segment_range(name).map(|r| &self.values[r])
    }

    pub fn segment_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let r = self.segment_range(name)?;
        Some(&mut self.values[r])
    }

    pub fn dot(&self, other: &ParamVector) -> f64 {
        dot(&self.values, &other.values)
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: f64, other: &ParamVector) {
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += alpha * b;
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for v in &mut self.values {
            *v *= alpha;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.values.len() * 8);
        self.write_to(&mut out)
            .expect("writing to a Vec<u8> cannot fail");
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cursor = bytes;
        let pv = Self::read_from(&mut cursor)?;
        if !cursor.is_empty() {
            return Err(Error::parse(format!(
                "{} trailing bytes after checkpoint",
                cursor.len()
            )));
        }
        Ok(pv)
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&(self.segments.len() as u32).to_le_bytes())?;
        for seg in &self.segments {
            let name = seg.name.as_bytes();
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name)?;
            w.write_all(&(seg.start as u64).to_le_bytes())?;
            w.write_all(&(seg.len as u64).to_le_bytes())?;
        }
        w.write_all(&(self.values.len() as u64).to_le_bytes())?;
        for v in &self.values {
            w.write_all(&v.to_bits().to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 5];
        read_exact(r, &mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::parse("bad checkpoint magic"));
        }
        let n_segments = read_u32(r)? as usize;
        let mut segments = Vec::with_capacity(n_segments.min(1024));
        for _ in 0..n_segments {
            let name_len = read_u32(r)? as usize;
            let mut name = vec![0u8; name_len];
            read_exact(r, &mut name)?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::parse("segment name is not valid utf-8"))?;
            let start = read_u64(r)? as usize;
            let len = read_u64(r)? as usize;
            segments.push(Segment { name, start, len });
        }
        let n_values = read_u64(r)? as usize;
        let mut values = Vec::with_capacity(n_values.min(1 << 24));
        for _ in 0..n_values {
            values.push(f64::from_bits(read_u64(r)?));
        }
        Self::from_parts(values, segments)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|e| Error::parse(format!("truncated checkpoint: {e}")))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn layout() -> Vec<(String, usize)> {
        vec![("a".into(), 3), ("b".into(), 0), ("c".into(), 2)]
    }

    #[test]
    fn segments_tile_the_vector() {
        let pv = ParamVector::zeros(&layout());
        assert_eq!(pv.len(), 5);
        assert_eq!(pv.segment_range("c"), Some(3..5));
        assert_eq!(pv.segment("b").unwrap().len(), 0);
    }

    #[test]
    fn overlapping_segments_rejected() {
        let segs = vec![
            Segment { name: "x".into(), start: 0, len: 2 },
            Segment { name: "y".into(), start: 1, len: 2 },
        ];
        assert!(ParamVector::from_parts(vec![0.0; 3], segs).is_err());
    }

    #[test]
    fn bad_magic_and_truncation_rejected() {
        let pv = ParamVector::from_values(vec![1.0, 2.0]);
        let mut bytes = pv.to_bytes();
        assert!(ParamVector::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        bytes[0] = b'X';
        assert!(ParamVector::from_bytes(&bytes).is_err());
    }

    proptest! {
        #[test]
        fn checkpoint_round_trips_bit_exactly(bits in prop::collection::vec(any::<u64>(), 0..40), split in 0usize..40) {
            let values: Vec<f64> = bits.iter().map(|b| f64::from_bits(*b)).collect();
            let split = split.min(values.len());
            let lay = vec![("w".to_string(), split), ("b".to_string(), values.len() - split)];
            let mut pv = ParamVector::zeros(&lay);
            pv.values_mut().copy_from_slice(&values);
            let back = ParamVector::from_bytes(&pv.to_bytes()).unwrap();
            let back_bits: Vec<u64> = back.values().iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(back_bits, bits);
            prop_assert_eq!(back.segments(), pv.segments());
        }
    }
}
