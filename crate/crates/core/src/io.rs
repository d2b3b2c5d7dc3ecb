//! Binary containers.
//!
//! `.vxvol` (little-endian):
//!
//! ```text
//! "VXV1" | u32 rank (=3) | u32 dims[rank] | u32 channels | f32 spacing[3] | f32 data[...]
//! ```
//!
//! Data is row-major over voxels with channels innermost. Masks and label
//! volumes use `channels = 1` and store exact small integers.
//!
//! `.vxfeat` stores the encoded slices of one axis:
//!
//! ```text
//! "VXF1" | u32 axis | u32 n | u32 slice_indices[n] | u32 P | u32 C | u32 p | f32 s
//!        | f32 tokens[n][P][C]
//! ```

use std::fs;
use std::path::Path;

use crate::correspondence::LabelVolume;
use crate::encoder::PatchFeatureStack;
use crate::error::{Error, Result};
use crate::grid::{Axis, DisplacementField, FeatureVolume, Mask, Volume};

pub const VOLUME_MAGIC: &[u8; 4] = b"VXV1";
pub const FEATURE_MAGIC: &[u8; 4] = b"VXF1";

/// Little-endian cursor over a byte buffer with format errors on underrun.
pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::format(format!(
                "truncated input: need {n} bytes at offset {}, have {}",
                self.pos,
                self.buf.len() - self.pos
            ))
        })?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::format("length overflow"))?)?;
        Ok(bytes.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect())
    }

    pub(crate) fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::format("length overflow"))?)?;
        Ok(bytes.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect())
    }

    pub(crate) fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub(crate) fn expect_end(&self) -> Result<()> {
        if self.remaining() != 0 {
            return Err(Error::format(format!("{} trailing bytes", self.remaining())));
        }
        Ok(())
    }
}

pub fn encode_features(feat: &FeatureVolume) -> Vec<u8> {
    let mut out = Vec::with_capacity(32 + feat.data().len() * 4);
    out.extend_from_slice(VOLUME_MAGIC);
    out.extend_from_slice(&3u32.to_le_bytes());
    for d in feat.dims() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.extend_from_slice(&(feat.channels() as u32).to_le_bytes());
    for s in feat.spacing() {
        out.extend_from_slice(&s.to_le_bytes());
    }
    for v in feat.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_features(bytes: &[u8]) -> Result<FeatureVolume> {
    let mut r = Reader::new(bytes);
    if r.take(4)? != VOLUME_MAGIC {
        return Err(Error::format("bad magic, expected VXV1"));
    }
    let rank = r.u32()?;
    if rank != 3 {
        return Err(Error::format(format!("unsupported rank {rank}, expected 3")));
    }
    let dims = [r.u32()? as usize, r.u32()? as usize, r.u32()? as usize];
    let channels = r.u32()? as usize;
    let spacing = [r.f32()?, r.f32()?, r.f32()?];
    let n = dims
        .iter()
        .try_fold(channels, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::format("declared size overflows"))?;
    let data = r.f32s(n)?;
    r.expect_end()?;
    FeatureVolume::new(dims, channels, spacing, data).map_err(|e| Error::format(e.to_string()))
}

pub fn write_features(path: impl AsRef<Path>, feat: &FeatureVolume) -> Result<()> {
    fs::write(path, encode_features(feat))?;
    Ok(())
}

pub fn read_features(path: impl AsRef<Path>) -> Result<FeatureVolume> {
    decode_features(&fs::read(path)?)
}

pub fn write_volume(path: impl AsRef<Path>, vol: &Volume) -> Result<()> {
    write_features(path, &vol.clone().into_features())
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let f = read_features(path)?;
    if f.channels() != 1 {
        return Err(Error::format(format!("expected 1 channel, found {}", f.channels())));
    }
    let (dims, spacing) = (f.dims(), f.spacing());
    Volume::new(dims, spacing, f.into_data())
}

pub fn write_mask(path: impl AsRef<Path>, mask: &Mask, spacing: [f32; 3]) -> Result<()> {
    write_volume(path, &mask.to_volume().with_spacing(spacing)?)
}

pub fn read_mask(path: impl AsRef<Path>) -> Result<Mask> {
    let vol = read_volume(path)?;
    let data = vol
        .data()
        .iter()
        .map(|&v| match v {
            0.0 => Ok(false),
            1.0 => Ok(true),
            other => Err(Error::format(format!("mask value {other} is not 0 or 1"))),
        })
        .collect::<Result<Vec<_>>>()?;
    Mask::new(vol.dims(), data)
}

pub fn write_labels(path: impl AsRef<Path>, labels: &LabelVolume) -> Result<()> {
    write_volume(path, &labels.to_volume())
}

pub fn read_labels(path: impl AsRef<Path>) -> Result<LabelVolume> {
    let vol = read_volume(path)?;
    LabelVolume::from_volume(&vol).map_err(|e| Error::format(e.to_string()))
}

pub fn read_displacement(path: impl AsRef<Path>) -> Result<DisplacementField> {
    DisplacementField::from_features(read_features(path)?)
}

pub fn write_displacement(path: impl AsRef<Path>, field: &DisplacementField) -> Result<()> {
    write_features(path, &field.clone().into_features())
}

pub fn encode_stack(stack: &PatchFeatureStack) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&(stack.axis.index() as u32).to_le_bytes());
    out.extend_from_slice(&(stack.slice_indices.len() as u32).to_le_bytes());
    for &i in &stack.slice_indices {
        out.extend_from_slice(&(i as u32).to_le_bytes());
    }
    out.extend_from_slice(&(stack.patches as u32).to_le_bytes());
    out.extend_from_slice(&(stack.channels as u32).to_le_bytes());
    out.extend_from_slice(&(stack.patch_size as u32).to_le_bytes());
    out.extend_from_slice(&stack.scale.to_le_bytes());
    for v in &stack.tokens {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Decodes a `.vxfeat` stack. Grid shape is not stored in the container; it
/// is reattached by [`crate::encoder::load_precomputed_axis`].
pub fn decode_stack(bytes: &[u8]) -> Result<PatchFeatureStack> {
    let mut r = Reader::new(bytes);
    if r.take(4)? != FEATURE_MAGIC {
        return Err(Error::format("bad magic, expected VXF1"));
    }
    let axis = Axis::from_index(r.u32()? as usize).ok_or_else(|| Error::format("axis id out of range"))?;
    let n = r.u32()? as usize;
    let slice_indices = (0..n).map(|_| r.u32().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
    let patches = r.u32()? as usize;
    let channels = r.u32()? as usize;
    let patch_size = r.u32()? as usize;
    let scale = r.f32()?;
    if patches == 0 || channels == 0 || patch_size == 0 || !(scale > 0.0) {
        return Err(Error::format("zero-sized header field"));
    }
    let count = n
        .checked_mul(patches)
        .and_then(|v| v.checked_mul(channels))
        .ok_or_else(|| Error::format("declared size overflows"))?;
    if r.remaining() != count * 4 {
        return Err(Error::format(format!(
            "token payload has {} bytes, header declares {n} x {patches} x {channels} f32",
            r.remaining()
        )));
    }
    let tokens = r.f32s(count)?;
    if tokens.iter().any(|v| !v.is_finite()) {
        return Err(Error::format("non-finite token value"));
    }
    if slice_indices.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::format("slice indices must be strictly increasing"));
    }
    Ok(PatchFeatureStack { axis, slice_indices, grid: [0, 0], patches, channels, patch_size, scale, tokens })
}

pub fn write_stack(path: impl AsRef<Path>, stack: &PatchFeatureStack) -> Result<()> {
    fs::write(path, encode_stack(stack))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn volume_roundtrip_is_bit_exact() {
        let f = FeatureVolume::new([2, 3, 1], 2, [0.7, 1.0, 2.5], (0..12).map(|v| v as f32 * -0.3).collect()).unwrap();
        let bytes = encode_features(&f);
        assert_eq!(&bytes[..4], b"VXV1");
        assert_eq!(decode_features(&bytes).unwrap(), f);
    }

    #[test]
    fn volume_header_errors() {
        let f = FeatureVolume::zeros([2, 2, 2], 1, [1.0; 3]);
        let mut bytes = encode_features(&f);
        assert!(matches!(decode_features(&bytes[..bytes.len() - 1]), Err(Error::Format(_))));
        bytes[0] = b'X';
        assert!(matches!(decode_features(&bytes), Err(Error::Format(_))));
        let mut extra = encode_features(&f);
        extra.push(0);
        assert!(matches!(decode_features(&extra), Err(Error::Format(_))));
    }

    #[test]
    fn mask_values_must_be_binary() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.vxvol");
        write_volume(&p, &Volume::new([2, 1, 1], [1.0; 3], vec![0.0, 0.5]).unwrap()).unwrap();
        assert!(matches!(read_mask(&p), Err(Error::Format(_))));
        let m = Mask::new([2, 1, 1], vec![true, false]).unwrap();
        write_mask(&p, &m, [1.0; 3]).unwrap();
        assert_eq!(read_mask(&p).unwrap(), m);
    }
}
