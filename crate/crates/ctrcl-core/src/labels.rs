//! Integer label maps (class ids per pixel) and their nearest-neighbor
//! downsampling. Label maps are not differentiable.

use crate::error::{Error, Result};

/// Per-sample H x W class-id map, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub h: usize,
    pub w: usize,
    pub data: Vec<u8>,
}

impl LabelMap {
    pub fn new(h: usize, w: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != h * w {
            return Err(Error::ShapeMismatch(format!(
                "label map {h}x{w} expects {} entries, got {}",
                h * w,
                data.len()
            )));
        }
        Ok(Self { h, w, data })
    }

    pub fn get(&self, i: usize, j: usize) -> u8 {
        self.data[i * self.w + j]
    }
}

/// Batched N x H x W class-id maps, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelBatch {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<u8>,
}

impl LabelBatch {
    pub fn new(n: usize, h: usize, w: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != n * h * w {
            return Err(Error::ShapeMismatch(format!(
                "label batch {n}x{h}x{w} expects {} entries, got {}",
                n * h * w,
                data.len()
            )));
        }
        Ok(Self { n, h, w, data })
    }

    pub fn from_maps(maps: &[LabelMap]) -> Result<Self> {
        if maps.is_empty() {
            return Err(Error::InvalidArgument("empty label batch".into()));
        }
        let (h, w) = (maps[0].h, maps[0].w);
        let mut data = Vec::with_capacity(maps.len() * h * w);
        for m in maps {
            if m.h != h || m.w != w {
                return Err(Error::ShapeMismatch("label maps differ in size".into()));
            }
            data.extend_from_slice(&m.data);
        }
        Ok(Self { n: maps.len(), h, w, data })
    }

    pub fn get(&self, s: usize, i: usize, j: usize) -> u8 {
        self.data[(s * self.h + i) * self.w + j]
    }

    pub fn sample(&self, s: usize) -> &[u8] {
        &self.data[s * self.h * self.w..(s + 1) * self.h * self.w]
    }

    pub fn max_label(&self) -> u8 {
        self.data.iter().copied().max().unwrap_or(0)
    }

    /// Nearest-neighbor downsampling. Output pixel i reads source index
    /// clamp(floor((i + 0.5) * in/out - 0.5), 0, in-1) on each axis.
    pub fn nearest_downsample(&self, out_h: usize, out_w: usize) -> Result<LabelBatch> {
        if out_h == 0 || out_w == 0 {
            return Err(Error::InvalidArgument("nearest_downsample to zero size".into()));
        }
        if out_h > self.h || out_w > self.w {
            return Err(Error::InvalidArgument(format!(
                "nearest_downsample target {out_h}x{out_w} larger than source {}x{}",
                self.h, self.w
            )));
        }
        let rows = nearest_axis(self.h, out_h);
        let cols = nearest_axis(self.w, out_w);
        let mut data = Vec::with_capacity(self.n * out_h * out_w);
        for s in 0..self.n {
            for &si in &rows {
                for &sj in &cols {
                    data.push(self.get(s, si, sj));
                }
            }
        }
        LabelBatch::new(self.n, out_h, out_w, data)
    }
}

pub(crate) fn nearest_axis(in_len: usize, out_len: usize) -> Vec<usize> {
    (0..out_len)
        .map(|i| {
            let src = (i as f64 + 0.5) * (in_len as f64 / out_len as f64) - 0.5;
            (src.floor().max(0.0) as usize).min(in_len - 1)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_size_is_identity() {
        let m = LabelBatch::new(1, 4, 4, (0..16).map(|v| (v % 4) as u8).collect()).unwrap();
        let d = m.nearest_downsample(4, 4).unwrap();
        assert_eq!(d, m);
    }

    #[test]
    fn block_structure_is_exact() {
        // 4x4 map of 2x2 constant blocks downsamples to the block labels.
        let data = vec![
            1, 1, 2, 2, //
            1, 1, 2, 2, //
            3, 3, 0, 0, //
            3, 3, 0, 0,
        ];
        let m = LabelBatch::new(1, 4, 4, data).unwrap();
        let d = m.nearest_downsample(2, 2).unwrap();
        assert_eq!(d.data, vec![1, 2, 3, 0]);
    }

    #[test]
    fn zero_target_errors() {
        let m = LabelBatch::new(1, 4, 4, vec![0; 16]).unwrap();
        assert!(m.nearest_downsample(0, 2).is_err());
    }
}
