//! `SBVL` volume/field containers and the `SBLA` atlas container.
//!
//! Layout (all little-endian):
//!
//! ```text
//! SBVL v1: "SBVL" u16=1 u32 nx u32 ny u32 nz f32 sx f32 sy f32 sz f32[n]
//! SBVL v2: "SBVL" u16=2 u16 channels u32 nx ... f32[n * channels] (channel-major)
//! SBLA v1: "SBLA" u16=1 u32 nx ... f32 sz i32[n] <utf-8 json region list>
//! ```
//!
//! Voxels are written x-fastest.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::grid::{Dims, Grid};
use crate::phantom::{Region, RegionAtlas, TemplateVolume};

pub const VOLUME_MAGIC: &[u8; 4] = b"SBVL";
pub const ATLAS_MAGIC: &[u8; 4] = b"SBLA";

fn write_header(out: &mut Vec<u8>, magic: &[u8; 4], version: u16, channels: Option<u16>, dims: Dims, spacing: [f32; 3]) {
    out.extend_from_slice(magic);
    out.extend_from_slice(&version.to_le_bytes());
    if let Some(c) = channels {
        out.extend_from_slice(&c.to_le_bytes());
    }
    for d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for s in spacing {
        out.extend_from_slice(&s.to_le_bytes());
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format("truncated container".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn i32(&mut self) -> Result<i32> {
        Ok(i32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn rest(&mut self) -> &'a [u8] {
        let s = &self.buf[self.pos..];
        self.pos = self.buf.len();
        s
    }
}

/// Decoded SBVL payload: one grid per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct SbvlData {
    pub spacing: [f32; 3],
    pub channels: Vec<Grid<f32>>,
}

pub fn encode_volume(volume: &TemplateVolume) -> Vec<u8> {
    let n = volume.voxels.len();
    let mut out = Vec::with_capacity(30 + 4 * n);
    write_header(&mut out, VOLUME_MAGIC, 1, None, volume.dims(), volume.spacing);
    for v in volume.voxels.as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Multi-channel SBVL (version 2). Every channel must share `dims`.
pub fn encode_channels(channels: &[&Grid<f32>], spacing: [f32; 3]) -> Result<Vec<u8>> {
    let first = channels.first().ok_or_else(|| Error::Format("no channels to encode".into()))?;
    let dims = first.dims();
    if let Some(bad) = channels.iter().find(|c| c.dims() != dims) {
        return Err(Error::Shape { expected: dims, actual: bad.dims() });
    }
    let mut out = Vec::with_capacity(32 + 4 * first.len() * channels.len());
    write_header(&mut out, VOLUME_MAGIC, 2, Some(channels.len() as u16), dims, spacing);
    for c in channels {
        for v in c.as_slice() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_sbvl(bytes: &[u8]) -> Result<SbvlData> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    if c.take(4)? != VOLUME_MAGIC {
        return Err(Error::Format("bad SBVL magic".into()));
    }
    let version = c.u16()?;
    let channels = match version {
        1 => 1,
        2 => c.u16()? as usize,
        v => return Err(Error::Format(format!("unsupported SBVL version {v}"))),
    };
    let dims = [c.u32()? as usize, c.u32()? as usize, c.u32()? as usize];
    let spacing = [c.f32()?, c.f32()?, c.f32()?];
    let n = dims[0] * dims[1] * dims[2];
    let mut grids = Vec::with_capacity(channels);
    for _ in 0..channels {
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(c.f32()?);
        }
        grids.push(Grid::from_vec(dims, data)?);
    }
    if c.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after SBVL payload".into()));
    }
    Ok(SbvlData { spacing, channels: grids })
}

pub fn decode_volume(bytes: &[u8]) -> Result<TemplateVolume> {
    let mut data = decode_sbvl(bytes)?;
    if data.channels.len() != 1 {
        return Err(Error::Format(format!("expected 1 channel, found {}", data.channels.len())));
    }
    Ok(TemplateVolume { spacing: data.spacing, voxels: data.channels.remove(0) })
}

pub fn encode_atlas(atlas: &RegionAtlas) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(30 + 4 * atlas.labels.len());
    write_header(&mut out, ATLAS_MAGIC, 1, None, atlas.dims(), atlas.spacing);
    for l in atlas.labels.as_slice() {
        out.extend_from_slice(&l.to_le_bytes());
    }
    out.extend_from_slice(&serde_json::to_vec(&atlas.regions)?);
    Ok(out)
}

pub fn decode_atlas(bytes: &[u8]) -> Result<RegionAtlas> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    if c.take(4)? != ATLAS_MAGIC {
        return Err(Error::Format("bad SBLA magic".into()));
    }
    let version = c.u16()?;
    if version != 1 {
        return Err(Error::Format(format!("unsupported SBLA version {version}")));
    }
    let dims = [c.u32()? as usize, c.u32()? as usize, c.u32()? as usize];
    let spacing = [c.f32()?, c.f32()?, c.f32()?];
    let n = dims[0] * dims[1] * dims[2];
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        labels.push(c.i32()?);
    }
    let regions: Vec<Region> = serde_json::from_slice(c.rest())?;
    Ok(RegionAtlas { spacing, labels: Grid::from_vec(dims, labels)?, regions })
}

pub fn write_file(path: &std::path::Path, bytes: &[u8]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(bytes)?;
    Ok(())
}

pub fn read_file(path: &std::path::Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    Ok(buf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{build_phantom, PhantomConfig};

    #[test]
    fn volume_header_layout() {
        let vol = TemplateVolume { spacing: [1.0, 1.5, 2.0], voxels: Grid::filled([2, 3, 4], 0.25f32) };
        let bytes = encode_volume(&vol);
        assert_eq!(&bytes[..4], b"SBVL");
        assert_eq!(u16::from_le_bytes([bytes[4], bytes[5]]), 1);
        assert_eq!(u32::from_le_bytes(bytes[6..10].try_into().unwrap()), 2);
        assert_eq!(f32::from_le_bytes(bytes[26..30].try_into().unwrap()), 2.0);
        assert_eq!(bytes.len(), 30 + 4 * 24);
        assert_eq!(decode_volume(&bytes).unwrap(), vol);
    }

    #[test]
    fn atlas_round_trip_keeps_regions() {
        let (_, atlas) = build_phantom(&PhantomConfig::default()).unwrap();
        let back = decode_atlas(&encode_atlas(&atlas).unwrap()).unwrap();
        assert_eq!(back, atlas);
    }

    #[test]
    fn three_channel_fields() {
        let a = Grid::from_fn([3, 2, 2], |x, _, _| x as f32);
        let b = Grid::filled([3, 2, 2], -1.0f32);
        let bytes = encode_channels(&[&a, &b, &a], [1.0; 3]).unwrap();
        assert_eq!(u16::from_le_bytes([bytes[6], bytes[7]]), 3);
        let back = decode_sbvl(&bytes).unwrap();
        assert_eq!(back.channels, vec![a.clone(), b, a]);
    }

    #[test]
    fn truncated_and_bad_magic_rejected() {
        let vol = TemplateVolume { spacing: [1.0; 3], voxels: Grid::filled([2, 2, 2], 0.0f32) };
        let bytes = encode_volume(&vol);
        assert!(decode_volume(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_volume(&bad).is_err());
    }
}
