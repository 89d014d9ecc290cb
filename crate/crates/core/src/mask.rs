//! Binary mask: row-major 0/1 bytes over an H x W grid.

use promptseg_tensor::Tensor64;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub h: usize,
    pub w: usize,
    data: Vec<u8>,
}

impl Mask {
    pub fn new(h: usize, w: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != h * w {
            return Err(Error::data(format!("mask {h}x{w} wants {} bytes, got {}", h * w, data.len())));
        }
        if let Some(bad) = data.iter().find(|&&v| v > 1) {
            return Err(Error::data(format!("mask value {bad} is not binary")));
        }
        Ok(Mask { h, w, data })
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        Mask { h, w, data: vec![0; h * w] }
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.data[row * self.w + col]
    }

    pub fn set(&mut self, row: usize, col: usize, v: u8) {
        self.data[row * self.w + col] = if v > 0 { 1 } else { 0 };
    }

    pub fn foreground_count(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    pub fn is_empty(&self) -> bool {
        self.data.iter().all(|&v| v == 0)
    }

    /// Inclusive (row0, col0, row1, col1) bounds of the foreground.
    pub fn bbox(&self) -> Option<(usize, usize, usize, usize)> {
        let (mut r0, mut c0, mut r1, mut c1) = (usize::MAX, usize::MAX, 0usize, 0usize);
        let mut any = false;
        for r in 0..self.h {
            for c in 0..self.w {
                if self.get(r, c) == 1 {
                    any = true;
                    r0 = r0.min(r);
                    c0 = c0.min(c);
                    r1 = r1.max(r);
                    c1 = c1.max(c);
                }
            }
        }
        any.then_some((r0, c0, r1, c1))
    }

    /// Longest bounding-box side in pixels; 0 for an empty mask.
    pub fn max_bbox_side(&self) -> usize {
        match self.bbox() {
            Some((r0, c0, r1, c1)) => (r1 - r0 + 1).max(c1 - c0 + 1),
            None => 0,
        }
    }

    pub fn to_tensor(&self) -> Tensor64 {
        Tensor64::new(vec![1, self.h, self.w], self.data.iter().map(|&v| v as f64).collect())
            .expect("sizes agree by construction")
    }

    pub fn from_fn(h: usize, w: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(h * w);
        for r in 0..h {
            for c in 0..w {
                data.push(f(r, c) as u8);
            }
        }
        Mask { h, w, data }
    }
}
