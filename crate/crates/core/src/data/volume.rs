//! 3-d volume storage: a tiny binary file format plus the z-scoring applied
//! at load time.
//!
//! File layout: magic `MMV1`, three little-endian u32 extents D,H,W, then
//! D*H*W little-endian f32 voxels. Writes and reads are byte-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"MMV1";
/// Below this, a volume's standard deviation is treated as zero and the
/// normalized volume is all zeros instead of a division blow-up.
pub const DEGENERATE_STD: f64 = 1e-8;

/// Voxel payload as stored on disk, prior to normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct RawVolume {
    pub dims: (u32, u32, u32),
    pub data: Vec<f32>,
}

/// Z-scored voxels ready to feed the encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    dims: (usize, usize, usize),
    data: Vec<f32>,
}

impl RawVolume {
    pub fn new(dims: (u32, u32, u32), data: Vec<f32>) -> Result<Self> {
        let n = dims.0 as usize * dims.1 as usize * dims.2 as usize;
        if n != data.len() {
            return Err(Error::shape(format!(
                "dims {:?} imply {} voxels, got {}",
                dims,
                n,
                data.len()
            )));
        }
        if n == 0 {
            return Err(Error::shape("volume has zero voxels".to_string()));
        }
        Ok(RawVolume { dims, data })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let file = File::open(path)
            .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
        let mut r = BufReader::new(file);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|_| Error::format(format!("{}: missing volume header", path.display())))?;
        if &magic != MAGIC {
            return Err(Error::format(format!(
                "{}: bad magic {:?}, expected {:?}",
                path.display(),
                magic,
                MAGIC
            )));
        }
        let mut dim_bytes = [0u8; 12];
        r.read_exact(&mut dim_bytes)
            .map_err(|_| Error::format(format!("{}: truncated dimension block", path.display())))?;
        let d = u32::from_le_bytes(dim_bytes[0..4].try_into().unwrap());
        let h = u32::from_le_bytes(dim_bytes[4..8].try_into().unwrap());
        let w = u32::from_le_bytes(dim_bytes[8..12].try_into().unwrap());
        let n = d as usize * h as usize * w as usize;
        if n == 0 {
            return Err(Error::format(format!(
                "{}: zero-sized volume {d}x{h}x{w}",
                path.display()
            )));
        }
        let mut payload = vec![0u8; n * 4];
        r.read_exact(&mut payload)
            .map_err(|_| Error::format(format!("{}: truncated voxel payload", path.display())))?;
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing).map_err(Error::Io)? != 0 {
            return Err(Error::format(format!(
                "{}: trailing bytes after {} voxels",
                path.display(),
                n
            )));
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(RawVolume { dims: (d, h, w), data })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let file = File::create(path)
            .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
        let mut w = BufWriter::new(file);
        w.write_all(MAGIC)?;
        for d in [self.dims.0, self.dims.1, self.dims.2] {
            w.write_all(&d.to_le_bytes())?;
        }
        for v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    /// Z-score the voxels (statistics accumulated in f64). A volume whose
    /// std falls below `DEGENERATE_STD` maps to all zeros.
    pub fn normalize(&self) -> Volume {
        let n = self.data.len() as f64;
        let mean = self.data.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = self
            .data
            .iter()
            .map(|&v| {
                let c = v as f64 - mean;
                c * c
            })
            .sum::<f64>()
            / n;
        let std = var.sqrt();
        let dims = (self.dims.0 as usize, self.dims.1 as usize, self.dims.2 as usize);
        let data = if std < DEGENERATE_STD {
            vec![0.0; self.data.len()]
        } else {
            self.data
                .iter()
                .map(|&v| ((v as f64 - mean) / std) as f32)
                .collect()
        };
        Volume { dims, data }
    }
}

impl Volume {
    pub fn from_normalized(dims: (usize, usize, usize), data: Vec<f32>) -> Result<Self> {
        if dims.0 * dims.1 * dims.2 != data.len() {
            return Err(Error::shape(format!(
                "dims {:?} imply {} voxels, got {}",
                dims,
                dims.0 * dims.1 * dims.2,
                data.len()
            )));
        }
        Ok(Volume { dims, data })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    /// Mirror the volume along one spatial axis (0 = depth, 1 = height,
    /// 2 = width).
    pub fn flipped(&self, axis: usize) -> Result<Volume> {
        if axis > 2 {
            return Err(Error::input(format!("flip axis {} out of range 0..=2", axis)));
        }
        let (d, h, w) = self.dims;
        let mut out = vec![0.0f32; self.data.len()];
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let (sz, sy, sx) = match axis {
                        0 => (d - 1 - z, y, x),
                        1 => (z, h - 1 - y, x),
                        _ => (z, y, w - 1 - x),
                    };
                    out[(z * h + y) * w + x] = self.data[(sz * h + sy) * w + sx];
                }
            }
        }
        Ok(Volume { dims: self.dims, data: out })
    }

    /// Untracked (1,1,D,H,W) tensor view of the voxels.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let (d, h, w) = self.dims;
        let data: Vec<T> = self.data.iter().map(|&v| T::fromf(v as f64)).collect();
        Tensor::from_vec(&[1, 1, d, h, w], data).expect("volume length matches dims")
    }
}
