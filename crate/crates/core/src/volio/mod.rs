//! Bit-exact file formats and the volume containers they serialize.
//!
//! Formats: MVOL (volumes, ASCII header + raw little-endian payload),
//! MCKP (named-parameter checkpoints), the task manifest and generic
//! comma-separated tables (metrics, learning curves). write∘read and
//! read∘write are identities at the byte level.

mod ckpt;
mod manifest;
mod mvol;
mod table;

pub use ckpt::{read_checkpoint, write_checkpoint, Checkpoint, ParamArray};
pub use manifest::{TaskEntry, TaskManifest};
pub use mvol::{
    label_to_bytes, read_label, read_scalar, read_volume, scalar_to_bytes, volume_from_bytes,
    write_label, write_scalar, Volume,
};
pub use table::{fmt_f64, CsvTable};

use crate::{Error, Result};

/// 3D scalar image, one value per voxel, x-fastest order.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    pub dims: (usize, usize, usize),
    pub data: Vec<f32>,
}

impl ScalarField {
    pub fn new(dims: (usize, usize, usize), data: Vec<f32>) -> Result<Self> {
        let n = dims.0 * dims.1 * dims.2;
        if dims.0 == 0 || dims.1 == 0 || dims.2 == 0 {
            return Err(Error::Invariant(format!("non-positive dims {dims:?}")));
        }
        if data.len() != n {
            return Err(Error::Invariant(format!(
                "data length {} != {}·{}·{}",
                data.len(),
                dims.0,
                dims.1,
                dims.2
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Invariant(format!(
                "non-finite intensity {} at linear index {i}",
                data[i]
            )));
        }
        Ok(ScalarField { dims, data })
    }

    pub fn zeros(dims: (usize, usize, usize)) -> Self {
        ScalarField {
            dims,
            data: vec![0.0; dims.0 * dims.1 * dims.2],
        }
    }

    #[inline]
    pub fn idx(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims.0 * (y + self.dims.1 * z)
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.idx(x, y, z)]
    }

    pub fn n_voxels(&self) -> usize {
        self.data.len()
    }
}

/// 3D multi-task label volume: bit i of each voxel's word is task i's
/// binary label. Tasks may overlap.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelField {
    pub dims: (usize, usize, usize),
    pub data: Vec<u32>,
    pub n_tasks: usize,
}

impl LabelField {
    pub fn new(dims: (usize, usize, usize), data: Vec<u32>, n_tasks: usize) -> Result<Self> {
        let n = dims.0 * dims.1 * dims.2;
        if dims.0 == 0 || dims.1 == 0 || dims.2 == 0 {
            return Err(Error::Invariant(format!("non-positive dims {dims:?}")));
        }
        if data.len() != n {
            return Err(Error::Invariant(format!(
                "data length {} != voxel count {n}",
                data.len()
            )));
        }
        if n_tasks == 0 || n_tasks > 32 {
            return Err(Error::Invariant(format!("n_tasks {n_tasks} outside 1..=32")));
        }
        let mask = used_bits(n_tasks);
        if let Some(i) = data.iter().position(|w| w & !mask != 0) {
            return Err(Error::Invariant(format!(
                "label word {:#x} at linear index {i} sets a bit >= n_tasks {n_tasks}",
                data[i]
            )));
        }
        Ok(LabelField {
            dims,
            data,
            n_tasks,
        })
    }

    pub fn zeros(dims: (usize, usize, usize), n_tasks: usize) -> Self {
        LabelField {
            dims,
            data: vec![0; dims.0 * dims.1 * dims.2],
            n_tasks,
        }
    }

    #[inline]
    pub fn idx(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims.0 * (y + self.dims.1 * z)
    }

    #[inline]
    pub fn get(&self, linear: usize, task: usize) -> bool {
        self.data[linear] >> task & 1 == 1
    }

    #[inline]
    pub fn set(&mut self, linear: usize, task: usize, on: bool) {
        if on {
            self.data[linear] |= 1 << task;
        } else {
            self.data[linear] &= !(1 << task);
        }
    }

    /// Foreground voxel count for one task.
    pub fn task_count(&self, task: usize) -> usize {
        self.data.iter().filter(|w| *w >> task & 1 == 1).count()
    }

    pub fn n_voxels(&self) -> usize {
        self.data.len()
    }
}

/// Mask with every bit < n_tasks set.
#[inline]
pub(crate) fn used_bits(n_tasks: usize) -> u32 {
    if n_tasks >= 32 {
        u32::MAX
    } else {
        (1u32 << n_tasks) - 1
    }
}
