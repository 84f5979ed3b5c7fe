//! Binary keep-masks congruent to weight tensors.

use std::collections::BTreeMap;

use crate::error::{shape_err, Result};

/// `true` keeps a weight, `false` prunes it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    shape: Vec<usize>,
    bits: Vec<bool>,
}

/// Per-layer masks keyed by layer id.
pub type MaskSet = BTreeMap<String, Mask>;

impl Mask {
    pub fn new(shape: Vec<usize>, bits: Vec<bool>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != bits.len() {
            return Err(shape_err!("mask shape {:?} needs {} bits, got {}", shape, len, bits.len()));
        }
        Ok(Self { shape, bits })
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self { shape: shape.to_vec(), bits: vec![true; shape.iter().product()] }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self { shape: shape.to_vec(), bits: vec![false; shape.iter().product()] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn bits_mut(&mut self) -> &mut [bool] {
        &mut self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn kept(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn keep_fraction(&self) -> f64 {
        self.kept() as f64 / self.bits.len() as f64
    }

    /// LSB-first bit packing, 8 positions per byte.
    pub fn pack(&self) -> Vec<u8> {
        let mut out = vec![0u8; self.bits.len().div_ceil(8)];
        for (i, &b) in self.bits.iter().enumerate() {
            if b {
                out[i / 8] |= 1 << (i % 8);
            }
        }
        out
    }

    pub fn unpack(shape: Vec<usize>, bytes: &[u8]) -> Result<Self> {
        let len: usize = shape.iter().product();
        if bytes.len() != len.div_ceil(8) {
            return Err(shape_err!("packed mask for {:?} needs {} bytes, got {}", shape, len.div_ceil(8), bytes.len()));
        }
        let bits = (0..len).map(|i| bytes[i / 8] >> (i % 8) & 1 == 1).collect();
        Ok(Self { shape, bits })
    }
}
