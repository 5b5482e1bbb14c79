//! Dense multi-channel voxel volumes and their binary container.
//!
//! Layout is channel-major: `data[c * N + spec.linear_index(i, j, k)]`.
//!
//! File format (little-endian): magic `b"VFVL"`, version u32, `C`, `Vx`,
//! `Vy`, `Vz` as u32, origin xyz as f64, pitch as f64, then `C·Vx·Vy·Vz`
//! f32 samples in the in-memory order.

use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::VoxelGridSpec;

const VOLUME_MAGIC: &[u8; 4] = b"VFVL";
const VOLUME_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 5 * 4 + 4 * 8;

#[derive(Clone, Debug, PartialEq)]
pub struct SceneVolume {
    pub spec: VoxelGridSpec,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl SceneVolume {
    pub fn zeros(spec: VoxelGridSpec, channels: usize) -> Self {
        Self {
            spec,
            channels,
            data: vec![0.0; channels * spec.num_voxels()],
        }
    }

    pub fn from_data(spec: VoxelGridSpec, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * spec.num_voxels() {
            return Err(Error::ShapeMismatch(format!(
                "{} values for {channels} channels of {:?}",
                data.len(),
                spec.dims
            )));
        }
        if !data.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite("scene volume"));
        }
        Ok(Self {
            spec,
            channels,
            data,
        })
    }

    pub fn voxels(&self) -> usize {
        self.spec.num_voxels()
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.voxels();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.voxels();
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn at(&self, c: usize, i: usize, j: usize, k: usize) -> f64 {
        self.data[c * self.voxels() + self.spec.linear_index(i, j, k)]
    }

    pub fn same_spec(&self, other: &SceneVolume) -> Result<()> {
        if self.spec != other.spec {
            return Err(Error::ShapeMismatch(format!(
                "volume grids differ: {:?} vs {:?}",
                self.spec, other.spec
            )));
        }
        Ok(())
    }

    /// Channel concatenation `[self, other]`.
    pub fn concat(&self, other: &SceneVolume) -> Result<SceneVolume> {
        self.same_spec(other)?;
        let mut data = Vec::with_capacity(self.data.len() + other.data.len());
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&other.data);
        Ok(SceneVolume {
            spec: self.spec,
            channels: self.channels + other.channels,
            data,
        })
    }

    /// Splits off the first `head` channels.
    pub fn split_at(&self, head: usize) -> Result<(SceneVolume, SceneVolume)> {
        if head > self.channels {
            return Err(Error::InvalidArgument(format!(
                "cannot split {} channels at {head}",
                self.channels
            )));
        }
        let cut = head * self.voxels();
        Ok((
            SceneVolume {
                spec: self.spec,
                channels: head,
                data: self.data[..cut].to_vec(),
            },
            SceneVolume {
                spec: self.spec,
                channels: self.channels - head,
                data: self.data[cut..].to_vec(),
            },
        ))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * self.data.len());
        out.extend_from_slice(VOLUME_MAGIC);
        for v in [
            VOLUME_VERSION,
            self.channels as u32,
            self.spec.dims[0] as u32,
            self.spec.dims[1] as u32,
            self.spec.dims[2] as u32,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in self
            .spec
            .origin
            .iter()
            .chain(std::iter::once(&self.spec.pitch))
        {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |reason: String| Error::format("volume", path, reason);
        if bytes.len() < HEADER_LEN {
            return Err(bad(format!(
                "{} bytes is shorter than the header",
                bytes.len()
            )));
        }
        if &bytes[..4] != VOLUME_MAGIC {
            return Err(bad("bad magic".into()));
        }
        let u32_at = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
        let f64_at =
            |i: usize| f64::from_le_bytes(bytes[24 + 8 * i..32 + 8 * i].try_into().unwrap());
        if u32_at(0) != VOLUME_VERSION {
            return Err(bad(format!("unsupported version {}", u32_at(0))));
        }
        let channels = u32_at(1) as usize;
        let dims = [u32_at(2) as usize, u32_at(3) as usize, u32_at(4) as usize];
        let spec = VoxelGridSpec::new([f64_at(0), f64_at(1), f64_at(2)], f64_at(3), dims)
            .map_err(|e| bad(e.to_string()))?;
        let body = &bytes[HEADER_LEN..];
        let expect = channels
            .checked_mul(spec.num_voxels())
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| bad("header sizes overflow".into()))?;
        if body.len() != expect {
            return Err(bad(format!(
                "{} payload bytes, header implies {expect}",
                body.len()
            )));
        }
        let data = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        SceneVolume::from_data(spec, channels, data).map_err(|e| bad(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::Missing(path.to_path_buf())
            } else {
                Error::io(path, e)
            }
        })?;
        Self::from_bytes(&bytes, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn spec() -> VoxelGridSpec {
        VoxelGridSpec::new([0.5, -1.0, 2.25], 0.04, [3, 4, 2]).unwrap()
    }

    #[test]
    fn header_rejects_corruption() {
        let v = SceneVolume::zeros(spec(), 2);
        let mut bytes = v.to_bytes();
        let p = Path::new("mem");
        assert_eq!(SceneVolume::from_bytes(&bytes, p).unwrap(), v);
        bytes[4] = 9; // version
        assert!(SceneVolume::from_bytes(&bytes, p).is_err());
        let mut bytes = v.to_bytes();
        bytes[8] = 3; // channel count no longer matches the payload
        assert!(SceneVolume::from_bytes(&bytes, p).is_err());
        assert!(SceneVolume::from_bytes(&bytes[..10], p).is_err());
    }

    #[test]
    fn split_concat_identity() {
        let data: Vec<f64> = (0..3 * 24).map(|i| i as f64).collect();
        let v = SceneVolume::from_data(spec(), 3, data).unwrap();
        let (a, b) = v.split_at(1).unwrap();
        assert_eq!(a.concat(&b).unwrap(), v);
        assert!(v.split_at(4).is_err());
    }

    proptest! {
        #[test]
        fn bytes_round_trip(vals in prop::collection::vec(-1e3f32..1e3, 48)) {
            let v = SceneVolume::from_data(spec(), 2, vals.iter().map(|x| *x as f64).collect()).unwrap();
            prop_assert_eq!(SceneVolume::from_bytes(&v.to_bytes(), Path::new("mem")).unwrap(), v);
        }
    }
}
