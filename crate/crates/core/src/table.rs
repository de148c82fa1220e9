//! Bit-packed multi-layer hash codes and their on-disk format.
//!
//! Bit `j` of word `w` holds dimension `64 w + j`; a set bit means `+1`.
//! Per node the table stores `L + 1` `f32` factors followed by
//! `(L + 1) * ceil(d / 64)` code words.
//!
//! File layout (little-endian):
//!
//! ```text
//! "GHTB" | version u32 | n1 u64 | n2 u64 | d u32 | L u32 | nodes...
//! ```

use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg::Real;

pub const MAGIC: &[u8; 4] = b"GHTB";
pub const FORMAT_VERSION: u32 = 1;
pub const HEADER_BYTES: usize = 32;

/// Packs `v_i >= 0` into bits, little-endian within 64-bit words.
pub fn pack_signs<T: Real>(row: &[T]) -> Vec<u64> {
    let mut words = vec![0u64; row.len().div_ceil(64)];
    for (i, v) in row.iter().enumerate() {
        if *v >= T::zero() {
            words[i / 64] |= 1 << (i % 64);
        }
    }
    words
}

/// Expands the first `dim` bits into `+1 / -1`.
pub fn unpack_signs(words: &[u64], dim: usize) -> Vec<i8> {
    (0..dim)
        .map(|i| if words[i / 64] >> (i % 64) & 1 == 1 { 1 } else { -1 })
        .collect()
}

/// Mask of the valid bits in the last word of a `dim`-bit code.
#[inline]
pub fn tail_mask(dim: usize) -> u64 {
    match dim % 64 {
        0 => u64::MAX,
        r => (1u64 << r) - 1,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HashTable {
    n1: usize,
    n2: usize,
    dim: usize,
    segments: usize,
    words: usize,
    alphas: Vec<f32>,
    codes: Vec<u64>,
}

impl HashTable {
    /// Validates sizes and clears any bits beyond `dim`.
    pub fn from_parts(
        n1: usize,
        n2: usize,
        dim: usize,
        depth: usize,
        alphas: Vec<f32>,
        mut codes: Vec<u64>,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Format("code dimension must be positive".into()));
        }
        let nodes = n1 + n2;
        let segments = depth + 1;
        let words = dim.div_ceil(64);
        if alphas.len() != nodes * segments {
            return Err(Error::Format(format!(
                "expected {} factors, got {}",
                nodes * segments,
                alphas.len()
            )));
        }
        if codes.len() != nodes * segments * words {
            return Err(Error::Format(format!(
                "expected {} code words, got {}",
                nodes * segments * words,
                codes.len()
            )));
        }
        if let Some(a) = alphas.iter().find(|a| !(a.is_finite() && **a >= 0.0)) {
            return Err(Error::Format(format!("rescaling factor {a} is not a finite non-negative value")));
        }
        let mask = tail_mask(dim);
        for chunk in codes.chunks_exact_mut(words) {
            chunk[words - 1] &= mask;
        }
        Ok(Self {
            n1,
            n2,
            dim,
            segments,
            words,
            alphas,
            codes,
        })
    }

    /// Uniformly random codes with factors drawn from `U(0, 1)`.
    pub fn random<R: Rng + ?Sized>(n1: usize, n2: usize, dim: usize, depth: usize, rng: &mut R) -> Self {
        let nodes = n1 + n2;
        let segments = depth + 1;
        let alphas = (0..nodes * segments).map(|_| rng.random::<f32>()).collect();
        let codes = (0..nodes * segments * dim.div_ceil(64)).map(|_| rng.random()).collect();
        Self::from_parts(n1, n2, dim, depth, alphas, codes).expect("consistent sizes")
    }

    #[inline]
    pub fn n1(&self) -> usize {
        self.n1
    }
    #[inline]
    pub fn n2(&self) -> usize {
        self.n2
    }
    #[inline]
    pub fn nodes(&self) -> usize {
        self.n1 + self.n2
    }
    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }
    /// `L`, the number of propagation rounds.
    #[inline]
    pub fn depth(&self) -> usize {
        self.segments - 1
    }
    /// `L + 1`.
    #[inline]
    pub fn segments(&self) -> usize {
        self.segments
    }
    #[inline]
    pub fn words_per_code(&self) -> usize {
        self.words
    }

    #[inline]
    pub fn alpha(&self, node: usize, layer: usize) -> f32 {
        self.alphas[node * self.segments + layer]
    }

    #[inline]
    pub fn alphas_of(&self, node: usize) -> &[f32] {
        &self.alphas[node * self.segments..(node + 1) * self.segments]
    }

    #[inline]
    pub fn code(&self, node: usize, layer: usize) -> &[u64] {
        let start = (node * self.segments + layer) * self.words;
        &self.codes[start..start + self.words]
    }

    /// All segments of a node, concatenated.
    #[inline]
    pub fn codes_of(&self, node: usize) -> &[u64] {
        let span = self.segments * self.words;
        &self.codes[node * span..(node + 1) * span]
    }

    #[inline]
    pub fn bit(&self, node: usize, layer: usize, i: usize) -> bool {
        self.code(node, layer)[i / 64] >> (i % 64) & 1 == 1
    }

    /// Hamming distance of one segment between two nodes (unified ids).
    #[inline]
    pub fn segment_distance(&self, a: usize, b: usize, layer: usize) -> u32 {
        self.code(a, layer)
            .iter()
            .zip(self.code(b, layer))
            .map(|(x, y)| (x ^ y).count_ones())
            .sum()
    }

    /// Matching score between V1 node `x` and V2 node `y`:
    /// `sum_l alpha_x alpha_y (d - 2 D_H)` over segments.
    pub fn score(&self, x: usize, y: usize) -> Result<f64> {
        if x >= self.n1 {
            return Err(Error::NodeOutOfRange { node: x, limit: self.n1 });
        }
        if y >= self.n2 {
            return Err(Error::NodeOutOfRange { node: y, limit: self.n2 });
        }
        Ok(self.score_unified(x, self.n1 + y))
    }

    pub fn score_unified(&self, a: usize, b: usize) -> f64 {
        let d = self.dim as f64;
        (0..self.segments)
            .map(|l| {
                let dh = self.segment_distance(a, b, l) as f64;
                self.alpha(a, l) as f64 * self.alpha(b, l) as f64 * (d - 2.0 * dh)
            })
            .sum()
    }

    /// Copy with every factor set to 1.
    pub fn with_unit_alphas(&self) -> Self {
        let mut t = self.clone();
        t.alphas.iter_mut().for_each(|a| *a = 1.0);
        t
    }

    /// Size in bytes of the serialized table.
    pub fn serialized_len(&self) -> usize {
        HEADER_BYTES + self.nodes() * self.segments * (4 + 8 * self.words)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.serialized_len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.n1 as u64).to_le_bytes());
        out.extend_from_slice(&(self.n2 as u64).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.depth() as u32).to_le_bytes());
        for node in 0..self.nodes() {
            for a in self.alphas_of(node) {
                out.extend_from_slice(&a.to_le_bytes());
            }
            for w in self.codes_of(node) {
                out.extend_from_slice(&w.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let n1 = r.u64()? as usize;
        let n2 = r.u64()? as usize;
        let dim = r.u32()? as usize;
        let depth = r.u32()? as usize;
        let segments = depth + 1;
        let words = dim.div_ceil(64);
        let nodes = n1 + n2;
        let expected = HEADER_BYTES + nodes * segments * (4 + 8 * words);
        if bytes.len() != expected {
            return Err(Error::Format(format!(
                "expected {expected} bytes, found {}",
                bytes.len()
            )));
        }
        let mut alphas = Vec::with_capacity(nodes * segments);
        let mut codes = Vec::with_capacity(nodes * segments * words);
        for _ in 0..nodes {
            for _ in 0..segments {
                alphas.push(f32::from_bits(r.u32()?));
            }
            for _ in 0..segments * words {
                codes.push(r.u64()?);
            }
        }
        Self::from_parts(n1, n2, dim, depth, alphas, codes)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(Error::Format("truncated table".into()));
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
