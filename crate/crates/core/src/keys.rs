//! Secret block-wise pixel-shuffling keys and the encryption they drive.
//!
//! An image is split into non-overlapping `M x M` blocks. Each block is
//! flattened to a vector of `p_b = C*M*M` pixels in a fixed order — channel
//! first, then row, then column within the block, i.e. index
//! `k = c*M*M + i*M + j` — and every block of the image is permuted with the
//! same secret bijection `v`: output pixel `k` takes the value of input pixel
//! `v[k]`. The flattening order here is the one `vit::patchify` uses, which is
//! what lets a patch-embedding model train on shuffled blocks without loss.
//!
//! Indices are 0-based throughout; the permutation vector itself is the
//! secret, and nothing outside this module can read it — other code only
//! drives [`encrypt_image`] / [`decrypt_image`].

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Scalar, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// A secret bijection on the `p_b` pixel indices of a block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PermutationKey {
    key_id: String,
    seed: u64,
    v: Vec<u32>,
}

impl PermutationKey {
    /// Uniform random permutation of `0..p_b`, Fisher-Yates over a seeded
    /// ChaCha8 stream.
    pub fn generate(seed: u64, p_b: usize) -> Result<Self> {
        if p_b == 0 {
            return Err(Error::Keys("p_b must be >= 1".into()));
        }
        let mut v: Vec<u32> = (0..p_b as u32).collect();
        let mut rng = rng::stream(seed);
        for i in (1..p_b).rev() {
            let j = rng.random_range(0..=i);
            v.swap(i, j);
        }
        Ok(PermutationKey { key_id: format!("k{seed:x}"), seed, v })
    }

    /// Build a key from an explicit permutation vector, validating bijectivity.
    pub fn from_vec(key_id: impl Into<String>, seed: u64, v: Vec<u32>) -> Result<Self> {
        validate_permutation(&v)?;
        Ok(PermutationKey { key_id: key_id.into(), seed, v })
    }

    pub(crate) fn with_key_id(mut self, key_id: impl Into<String>) -> Self {
        self.key_id = key_id.into();
        self
    }

    pub fn key_id(&self) -> &str {
        &self.key_id
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn p_b(&self) -> usize {
        self.v.len()
    }

    /// The key with forward and inverse roles swapped. Encrypting with the
    /// inverse undoes encrypting with the original.
    fn inverse_vec(&self) -> Vec<u32> {
        let mut inv = vec![0u32; self.v.len()];
        for (k, &src) in self.v.iter().enumerate() {
            inv[src as usize] = k as u32;
        }
        inv
    }
}

fn validate_permutation(v: &[u32]) -> Result<()> {
    if v.is_empty() {
        return Err(Error::Keys("invalid permutation: empty".into()));
    }
    let mut seen = vec![false; v.len()];
    for &e in v {
        let e = e as usize;
        if e >= v.len() || seen[e] {
            return Err(Error::Keys(format!(
                "invalid permutation: not a bijection on 0..{}",
                v.len()
            )));
        }
        seen[e] = true;
    }
    Ok(())
}

/// Check that image geometry admits `M x M` blocks and matches the key.
fn check_geometry(shape: &[usize], key: &PermutationKey, m: usize) -> Result<(usize, usize, usize)> {
    let [c, h, w] = match shape {
        [c, h, w] => [*c, *h, *w],
        other => {
            return Err(Error::Keys(format!("expected [C,H,W] image, got shape {other:?}")));
        }
    };
    if m == 0 || h % m != 0 || w % m != 0 {
        return Err(Error::Keys(format!("image {h}x{w} not divisible into {m}x{m} blocks")));
    }
    if key.p_b() != c * m * m {
        return Err(Error::Keys(format!(
            "key p_b={} does not match C*M*M={}",
            key.p_b(),
            c * m * m
        )));
    }
    Ok((c, h, w))
}

fn permute_blocks<S: Scalar>(x: &Tensor<S>, perm: &[u32], m: usize) -> Tensor<S> {
    let (h, w) = match x.shape() {
        [_, h, w] => (*h, *w),
        _ => unreachable!("geometry checked by caller"),
    };
    let mm = m * m;
    let src = x.data();
    let mut out = vec![S::zero(); src.len()];
    for gy in 0..h / m {
        for gx in 0..w / m {
            for (k, &vk) in perm.iter().enumerate() {
                let (kc, ki, kj) = (k / mm, (k % mm) / m, k % m);
                let (vc, vi, vj) = (vk as usize / mm, (vk as usize % mm) / m, vk as usize % m);
                let dst_idx = (kc * h + gy * m + ki) * w + gx * m + kj;
                let src_idx = (vc * h + gy * m + vi) * w + gx * m + vj;
                out[dst_idx] = src[src_idx];
            }
        }
    }
    Tensor::from_vec(x.shape(), out).expect("same geometry")
}

/// Shuffle every block of `x` with the key: output pixel `k` of a block is
/// input pixel `v[k]`.
pub fn encrypt_image<S: Scalar>(x: &Tensor<S>, key: &PermutationKey, m: usize) -> Result<Tensor<S>> {
    check_geometry(x.shape(), key, m)?;
    Ok(permute_blocks(x, &key.v, m))
}

/// Invert [`encrypt_image`]; exact for any scalar type since only moves occur.
pub fn decrypt_image<S: Scalar>(x: &Tensor<S>, key: &PermutationKey, m: usize) -> Result<Tensor<S>> {
    check_geometry(x.shape(), key, m)?;
    Ok(permute_blocks(x, &key.inverse_vec(), m))
}

/// An ordered set of keys sharing one image geometry, key per sub-model.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeySet {
    block_size: usize,
    channels: usize,
    height: usize,
    width: usize,
    keys: Vec<PermutationKey>,
}

impl KeySet {
    pub fn generate(n: usize, block_size: usize, channels: usize, height: usize, width: usize, master_seed: u64) -> Result<Self> {
        if n == 0 {
            return Err(Error::Keys("N >= 1 required".into()));
        }
        if block_size == 0 || height % block_size != 0 || width % block_size != 0 {
            return Err(Error::Keys(format!(
                "geometry {channels}x{height}x{width} not divisible into {block_size}x{block_size} blocks"
            )));
        }
        let p_b = channels * block_size * block_size;
        let keys = (0..n)
            .map(|i| {
                let seed = rng::derive(master_seed, "permutation-key", i as u64);
                PermutationKey::generate(seed, p_b).map(|k| k.with_key_id(format!("k{i}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(KeySet { block_size, channels, height, width, keys })
    }

    pub fn from_keys(block_size: usize, channels: usize, height: usize, width: usize, keys: Vec<PermutationKey>) -> Result<Self> {
        let ks = KeySet { block_size, channels, height, width, keys };
        ks.validate()?;
        Ok(ks)
    }

    fn validate(&self) -> Result<()> {
        if self.keys.is_empty() {
            return Err(Error::Keys("N >= 1 required".into()));
        }
        let p_b = self.p_b();
        for key in &self.keys {
            if key.p_b() != p_b {
                return Err(Error::Keys(format!(
                    "key {} has p_b={}, keyset wants {}",
                    key.key_id(),
                    key.p_b(),
                    p_b
                )));
            }
            validate_permutation(&key.v)?;
        }
        let mut ids: Vec<&str> = self.keys.iter().map(|k| k.key_id()).collect();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != self.keys.len() {
            return Err(Error::Keys("duplicate key_id in keyset".into()));
        }
        if self.block_size == 0
            || self.height % self.block_size != 0
            || self.width % self.block_size != 0
        {
            return Err(Error::Keys("geometry not divisible into blocks".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn p_b(&self) -> usize {
        self.channels * self.block_size * self.block_size
    }

    pub fn key(&self, i: usize) -> Result<&PermutationKey> {
        self.keys.get(i).ok_or_else(|| Error::Keys(format!("key index {i} out of range (N={})", self.keys.len())))
    }

    pub fn key_by_id(&self, id: &str) -> Result<&PermutationKey> {
        self.keys
            .iter()
            .find(|k| k.key_id() == id)
            .ok_or_else(|| Error::Keys(format!("no key with id {id:?}")))
    }

    pub fn key_ids(&self) -> impl Iterator<Item = &str> {
        self.keys.iter().map(|k| k.key_id())
    }

    /// The keyset restricted to its first `n` keys.
    pub fn prefix(&self, n: usize) -> Result<KeySet> {
        if n == 0 || n > self.keys.len() {
            return Err(Error::Keys(format!("prefix {n} out of range (N={})", self.keys.len())));
        }
        Ok(KeySet {
            block_size: self.block_size,
            channels: self.channels,
            height: self.height,
            width: self.width,
            keys: self.keys[..n].to_vec(),
        })
    }

    pub fn encrypt_with(&self, i: usize, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        encrypt_image(x, self.key(i)?, self.block_size)
    }

    pub fn to_json(&self) -> Result<String> {
        let file = KeySetFile {
            version: KEYSET_VERSION,
            m: self.block_size as u32,
            c: self.channels as u32,
            h: self.height as u32,
            w: self.width as u32,
            n: self.keys.len() as u32,
            keys: self
                .keys
                .iter()
                .map(|k| KeyEntry { key_id: k.key_id.clone(), seed: k.seed, v: k.v.clone() })
                .collect(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: KeySetFile = serde_json::from_str(text)?;
        if file.version != KEYSET_VERSION {
            return Err(Error::Keys(format!("unsupported keyset version {}", file.version)));
        }
        if file.n as usize != file.keys.len() {
            return Err(Error::Keys(format!(
                "keyset says N={} but lists {} keys",
                file.n,
                file.keys.len()
            )));
        }
        if file.keys.is_empty() {
            return Err(Error::Keys("N >= 1 required".into()));
        }
        let keys = file
            .keys
            .into_iter()
            .map(|e| PermutationKey::from_vec(e.key_id, e.seed, e.v))
            .collect::<Result<Vec<_>>>()?;
        KeySet::from_keys(file.m as usize, file.c as usize, file.h as usize, file.w as usize, keys)
    }

    /// Write the keyset (the secret) to disk with owner-only permissions.
    pub fn save(&self, path: &Path) -> Result<()> {
        let json = self.to_json()?;
        crate::report::write_atomic(path, json.as_bytes())?;
        #[cfg(unix)]
        {
            use std::os::unix::fs::PermissionsExt;
            let mut perms = std::fs::metadata(path)?.permissions();
            perms.set_mode(0o600);
            std::fs::set_permissions(path, perms)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        #[cfg(unix)]
        {
            use std::os::unix::fs::PermissionsExt;
            if let Ok(meta) = std::fs::metadata(path) {
                if meta.permissions().mode() & 0o004 != 0 {
                    eprintln!(
                        "warning: keyset {} is world-readable; it is the secret",
                        path.display()
                    );
                }
            }
        }
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

const KEYSET_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct KeySetFile {
    version: u32,
    m: u32,
    c: u32,
    h: u32,
    w: u32,
    n: u32,
    keys: Vec<KeyEntry>,
}

#[derive(Serialize, Deserialize)]
struct KeyEntry {
    key_id: String,
    seed: u64,
    v: Vec<u32>,
}
