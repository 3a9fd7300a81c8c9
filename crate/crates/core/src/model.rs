//! Inner-product matrix factorization ranker `f(u, i) = <p_u, q_i>`.
//!
//! No bias terms. Factors are stored row-major in flat buffers.
//!
//! Checkpoint layout (little endian):
//!
//! | offset | size | field |
//! | ------ | ---- | ----- |
//! | 0 | 4 | magic `UPLM` |
//! | 4 | 4 | format version (u32, currently 1) |
//! | 8 | 4 | d (u32) |
//! | 12 | 4 | num_users (u32) |
//! | 16 | 4 | num_items (u32) |
//! | 20 | 8 | seed (u64) |
//! | 28 | 8 * num_users * d | user factors (f64, row-major) |
//! | .. | 8 * num_items * d | item factors (f64, row-major) |

use std::collections::BTreeSet;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::{Error, Result};

pub const DEFAULT_INIT_SCALE: f64 = 0.01;
const MAGIC: &[u8; 4] = b"UPLM";
const CHECKPOINT_VERSION: u32 = 1;
const HEADER_LEN: usize = 28;

#[derive(Debug, Clone, PartialEq)]
pub struct FactorModel {
    d: usize,
    num_users: usize,
    num_items: usize,
    seed: u64,
    pub(crate) user_factors: Vec<f64>,
    pub(crate) item_factors: Vec<f64>,
}

impl FactorModel {
    /// Normal(0, scale) initialisation, deterministic per seed.
    pub fn init(num_users: usize, num_items: usize, d: usize, seed: u64, scale: f64) -> Result<Self> {
        if d == 0 {
            return Err(Error::domain("latent dimension must be >= 1"));
        }
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::domain(format!("init scale {scale} must be > 0")));
        }
        let normal = Normal::new(0.0, scale).map_err(|e| Error::domain(e.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let user_factors = (0..num_users * d).map(|_| normal.sample(&mut rng)).collect();
        let item_factors = (0..num_items * d).map(|_| normal.sample(&mut rng)).collect();
        Ok(Self {
            d,
            num_users,
            num_items,
            seed,
            user_factors,
            item_factors,
        })
    }

    pub fn from_factors(
        num_users: usize,
        num_items: usize,
        d: usize,
        user_factors: Vec<f64>,
        item_factors: Vec<f64>,
    ) -> Result<Self> {
        if d == 0 {
            return Err(Error::domain("latent dimension must be >= 1"));
        }
        if user_factors.len() != num_users * d || item_factors.len() != num_items * d {
            return Err(Error::domain("factor buffers do not match the declared shape"));
        }
        if user_factors.iter().chain(&item_factors).any(|v| !v.is_finite()) {
            return Err(Error::domain("factor entries must be finite"));
        }
        Ok(Self {
            d,
            num_users,
            num_items,
            seed: 0,
            user_factors,
            item_factors,
        })
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn num_users(&self) -> usize {
        self.num_users
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn user_row(&self, u: usize) -> &[f64] {
        &self.user_factors[u * self.d..(u + 1) * self.d]
    }

    pub fn item_row(&self, i: usize) -> &[f64] {
        &self.item_factors[i * self.d..(i + 1) * self.d]
    }

    pub fn user_row_mut(&mut self, u: usize) -> &mut [f64] {
        &mut self.user_factors[u * self.d..(u + 1) * self.d]
    }

    pub fn item_row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.item_factors[i * self.d..(i + 1) * self.d]
    }

    pub fn score(&self, u: usize, i: usize) -> Result<f64> {
        if u >= self.num_users || i >= self.num_items {
            return Err(Error::domain(format!(
                "score({u}, {i}) outside {} x {}",
                self.num_users, self.num_items
            )));
        }
        Ok(self.score_unchecked(u, i))
    }

    #[inline]
    pub fn score_unchecked(&self, u: usize, i: usize) -> f64 {
        dot(self.user_row(u), self.item_row(i))
    }

    /// Sum of squared entries over the touched rows; each row counts once.
    pub fn l2_penalty(&self, users: &BTreeSet<usize>, items: &BTreeSet<usize>) -> f64 {
        let sq = |row: &[f64]| row.iter().map(|v| v * v).sum::<f64>();
        users.iter().map(|&u| sq(self.user_row(u))).sum::<f64>()
            + items.iter().map(|&i| sq(self.item_row(i))).sum::<f64>()
    }

    /// Frobenius norm of both factor matrices together.
    pub fn frobenius_norm(&self) -> f64 {
        self.user_factors
            .iter()
            .chain(&self.item_factors)
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// FNV-1a over the raw bit patterns; equal checksums mean bit-equal factors
    /// for all practical purposes.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for v in self.user_factors.iter().chain(&self.item_factors) {
            for b in v.to_bits().to_le_bytes() {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }

    pub fn is_finite(&self) -> bool {
        self.user_factors
            .iter()
            .chain(&self.item_factors)
            .all(|v| v.is_finite())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 8 * (self.user_factors.len() + self.item_factors.len()));
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.d as u32).to_le_bytes());
        out.extend_from_slice(&(self.num_users as u32).to_le_bytes());
        out.extend_from_slice(&(self.num_items as u32).to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        for v in self.user_factors.iter().chain(&self.item_factors) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN || &bytes[..4] != MAGIC {
            return Err(Error::Integrity("not a factor model checkpoint".into()));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let version = u32_at(4);
        if version != CHECKPOINT_VERSION {
            return Err(Error::Integrity(format!("unsupported checkpoint version {version}")));
        }
        let d = u32_at(8) as usize;
        let num_users = u32_at(12) as usize;
        let num_items = u32_at(16) as usize;
        let seed = u64::from_le_bytes(bytes[20..28].try_into().unwrap());
        let n = (num_users + num_items) * d;
        if bytes.len() != HEADER_LEN + 8 * n {
            return Err(Error::Integrity(format!(
                "checkpoint body is {} bytes, expected {}",
                bytes.len() - HEADER_LEN,
                8 * n
            )));
        }
        let values: Vec<f64> = bytes[HEADER_LEN..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let (user, item) = values.split_at(num_users * d);
        let mut model = Self::from_factors(num_users, num_items, d, user.to_vec(), item.to_vec())?;
        model.seed = seed;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
