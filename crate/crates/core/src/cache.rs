//! Per-layer SVD cache: `(U_k, V_k, σ)` plus the residual `W̃ = W − U_k diag(σ) V_kᵀ`.
//!
//! On disk a cache is a directory holding `manifest.json` and one binary blob
//! per layer:
//!
//! ```text
//! "HIPC" | u32 version | u32 rows | u32 cols | u32 k | u | v | sigma | w_tilde
//! ```
//!
//! All integers and floats are little-endian; matrices are row-major `f64`.
//! The manifest records a 64-bit FNV-1a checksum over the float payload.

use std::collections::BTreeMap;
use std::fs;
use std::hash::Hasher;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{randomized_svd, Matrix, DEFAULT_N_ITER, DEFAULT_OVERSAMPLE};
use crate::rng::{derive_seed, label_seed, PRNG_ID};

/// Version string written to (and required in) every manifest.
pub const FORMAT_VERSION: &str = "1.0";
pub const MANIFEST_FILE: &str = "manifest.json";
const MAGIC: &[u8; 4] = b"HIPC";
const BLOB_VERSION: u32 = 1;
const HEADER_LEN: usize = 20;

/// Absolute Frobenius tolerance on `W̃ + U diag(σ) Vᵀ` versus the frozen weight.
pub const RECONSTRUCTION_TOL: f64 = 1e-9;
/// Tolerance on `UᵀU = I` and `VᵀV = I`.
pub const ORTHONORMALITY_TOL: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq)]
pub struct SvdCacheEntry {
    pub layer_id: String,
    pub k: usize,
    pub u: Matrix,
    pub v: Matrix,
    pub sigma: Vec<f64>,
    pub w_tilde: Matrix,
}

impl SvdCacheEntry {
    /// Factor one frozen weight with the randomized SVD and verify the result.
    pub fn from_weight(layer_id: &str, w: &Matrix, k: usize, seed: u64) -> Result<Self> {
        let (m, n) = w.shape();
        if k == 0 || k > m.min(n) {
            return Err(Error::Layer {
                layer: layer_id.to_string(),
                reason: format!("k={k} exceeds min dimension of {m}x{n}"),
            });
        }
        let svd = randomized_svd(w, k, DEFAULT_N_ITER, DEFAULT_OVERSAMPLE, seed)?;
        let w_tilde = w.sub(&svd.reconstruct())?;
        let entry = Self {
            layer_id: layer_id.to_string(),
            k,
            u: svd.u,
            v: svd.v,
            sigma: svd.sigma,
            w_tilde,
        };
        let err = entry.reconstruction_error(w)?;
        if err > RECONSTRUCTION_TOL {
            return Err(Error::Layer {
                layer: layer_id.to_string(),
                reason: format!("reconstruction error {err:.3e} above {RECONSTRUCTION_TOL:e}"),
            });
        }
        let ortho = entry.orthonormality_error();
        if ortho > ORTHONORMALITY_TOL {
            return Err(Error::Layer {
                layer: layer_id.to_string(),
                reason: format!("singular vectors lost orthonormality ({ortho:.3e})"),
            });
        }
        Ok(entry)
    }

    pub fn rows(&self) -> usize {
        self.w_tilde.rows()
    }

    pub fn cols(&self) -> usize {
        self.w_tilde.cols()
    }

    /// `U diag(σ) Vᵀ`.
    pub fn principal(&self) -> Matrix {
        self.principal_with_gains(&self.sigma)
            .expect("cache gains match k")
    }

    /// `U diag(gains) Vᵀ` for an arbitrary length-k gain vector.
    pub fn principal_with_gains(&self, gains: &[f64]) -> Result<Matrix> {
        if gains.len() != self.k {
            return Err(Error::dim(format!(
                "{} gains for a rank-{} cache entry",
                gains.len(),
                self.k
            )));
        }
        self.u.scale_columns(gains)?.matmul_t(&self.v)
    }

    /// `W̃ + U diag(σ) Vᵀ`, the frozen weight up to rounding.
    pub fn reconstruct(&self) -> Matrix {
        self.w_tilde
            .add(&self.principal())
            .expect("cache shapes are consistent")
    }

    /// Frobenius distance between the reconstruction and `w`.
    pub fn reconstruction_error(&self, w: &Matrix) -> Result<f64> {
        Ok(self.reconstruct().sub(w)?.frobenius_norm())
    }

    pub fn orthonormality_error(&self) -> f64 {
        crate::linalg::gram_identity_error(&self.u).max(crate::linalg::gram_identity_error(&self.v))
    }

    fn payload_bytes(&self) -> Vec<u8> {
        let n_floats = self.u.data().len()
            + self.v.data().len()
            + self.sigma.len()
            + self.w_tilde.data().len();
        let mut out = Vec::with_capacity(n_floats * 8);
        for x in self
            .u
            .data()
            .iter()
            .chain(self.v.data())
            .chain(&self.sigma)
            .chain(self.w_tilde.data())
        {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out
    }

    /// FNV-1a 64 over the little-endian float payload.
    pub fn checksum(&self) -> u64 {
        fnv1a(&self.payload_bytes())
    }

    fn offsets(&self) -> BlobOffsets {
        let (m, n, k) = (self.rows() as u64, self.cols() as u64, self.k as u64);
        let u = HEADER_LEN as u64;
        let v = u + 8 * m * k;
        let sigma = v + 8 * n * k;
        let w_tilde = sigma + 8 * k;
        BlobOffsets {
            u,
            v,
            sigma,
            w_tilde,
            end: w_tilde + 8 * m * n,
        }
    }

    fn to_blob(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.offsets().end as usize);
        out.extend_from_slice(MAGIC);
        for x in [
            BLOB_VERSION,
            self.rows() as u32,
            self.cols() as u32,
            self.k as u32,
        ] {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out.extend_from_slice(&self.payload_bytes());
        out
    }

    fn from_blob(layer_id: &str, bytes: &[u8]) -> Result<Self> {
        let corrupt = |why: &str| Error::CorruptCache(format!("layer `{layer_id}`: {why}"));
        if bytes.len() < HEADER_LEN {
            return Err(corrupt("truncated header"));
        }
        if &bytes[..4] != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
        let version = word(0);
        if version != BLOB_VERSION {
            return Err(Error::Version {
                found: version.to_string(),
                expected: BLOB_VERSION.to_string(),
            });
        }
        let (m, n, k) = (word(1) as usize, word(2) as usize, word(3) as usize);
        if m == 0 || n == 0 || k == 0 || k > m.min(n) {
            return Err(corrupt("invalid header dimensions"));
        }
        let expected = HEADER_LEN + 8 * (m * k + n * k + k + m * n);
        if bytes.len() != expected {
            return Err(corrupt(&format!(
                "expected {expected} bytes, found {}",
                bytes.len()
            )));
        }
        let mut floats = bytes[HEADER_LEN..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
        let mut take = |len: usize| -> Vec<f64> { floats.by_ref().take(len).collect() };
        let u = Matrix::new(m, k, take(m * k)).map_err(|e| corrupt(&e.to_string()))?;
        let v = Matrix::new(n, k, take(n * k)).map_err(|e| corrupt(&e.to_string()))?;
        let sigma = take(k);
        let w_tilde = Matrix::new(m, n, take(m * n)).map_err(|e| corrupt(&e.to_string()))?;
        Ok(Self {
            layer_id: layer_id.to_string(),
            k,
            u,
            v,
            sigma,
            w_tilde,
        })
    }
}

pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = fnv::FnvHasher::default();
    h.write(bytes);
    h.finish()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlobOffsets {
    pub u: u64,
    pub v: u64,
    pub sigma: u64,
    pub w_tilde: u64,
    pub end: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub layer_id: String,
    pub rows: usize,
    pub cols: usize,
    pub k: usize,
    /// FNV-1a 64 checksum as 16 lowercase hex digits.
    pub checksum: String,
    pub file: String,
    pub offsets: BlobOffsets,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheManifest {
    pub spec_version: String,
    pub backbone_id: String,
    pub entries: Vec<ManifestEntry>,
    pub prng_id: String,
    /// Seconds since the Unix epoch.
    pub created_at: u64,
}

impl CacheManifest {
    /// Describe `entries` for writing, stamped with the current time.
    pub fn describe(backbone_id: &str, entries: &[SvdCacheEntry]) -> Result<Self> {
        let created_at = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        Self::describe_at(backbone_id, entries, created_at)
    }

    pub fn describe_at(
        backbone_id: &str,
        entries: &[SvdCacheEntry],
        created_at: u64,
    ) -> Result<Self> {
        let entries = entries
            .iter()
            .map(|e| {
                validate_layer_id(&e.layer_id)?;
                Ok(ManifestEntry {
                    layer_id: e.layer_id.clone(),
                    rows: e.rows(),
                    cols: e.cols(),
                    k: e.k,
                    checksum: format!("{:016x}", e.checksum()),
                    file: format!("{}.hipc", e.layer_id),
                    offsets: e.offsets(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            spec_version: FORMAT_VERSION.to_string(),
            backbone_id: backbone_id.to_string(),
            entries,
            prng_id: PRNG_ID.to_string(),
            created_at,
        })
    }

    /// Combined checksum of every entry, used to tie adapters to a cache.
    pub fn fingerprint(&self) -> String {
        let joined: String = self
            .entries
            .iter()
            .map(|e| format!("{}:{};", e.layer_id, e.checksum))
            .collect();
        format!("{:016x}", fnv1a(joined.as_bytes()))
    }
}

fn validate_layer_id(id: &str) -> Result<()> {
    let ok = !id.is_empty()
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'))
        && !id.starts_with('.');
    if ok {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "layer id `{id}` is not file-name safe"
        )))
    }
}

/// Factor every layer at a common rank `k`.
pub fn build_cache(
    weights: &BTreeMap<String, Matrix>,
    k: usize,
    seed: u64,
) -> Result<Vec<SvdCacheEntry>> {
    let ranks = weights.keys().map(|id| (id.clone(), k)).collect();
    build_cache_ranked(weights, &ranks, seed)
}

/// Factor every layer at its own rank. Each layer's sketch seed is derived
/// from `seed` and the layer id, so results do not depend on layer order.
pub fn build_cache_ranked(
    weights: &BTreeMap<String, Matrix>,
    ranks: &BTreeMap<String, usize>,
    seed: u64,
) -> Result<Vec<SvdCacheEntry>> {
    weights
        .iter()
        .map(|(id, w)| {
            let k = *ranks.get(id).ok_or_else(|| Error::Layer {
                layer: id.clone(),
                reason: "no rank given".to_string(),
            })?;
            SvdCacheEntry::from_weight(id, w, k, derive_seed(seed, label_seed(id)))
        })
        .collect()
}

/// Write `manifest.json` plus one blob per entry into `dir`.
pub fn save_cache(entries: &[SvdCacheEntry], manifest: &CacheManifest, dir: &Path) -> Result<()> {
    if manifest.entries.len() != entries.len() {
        return Err(Error::Config(format!(
            "manifest lists {} entries, {} given",
            manifest.entries.len(),
            entries.len()
        )));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (entry, meta) in entries.iter().zip(&manifest.entries) {
        if meta.layer_id != entry.layer_id || meta.checksum != format!("{:016x}", entry.checksum())
        {
            return Err(Error::Config(format!(
                "manifest entry `{}` does not describe layer `{}`",
                meta.layer_id, entry.layer_id
            )));
        }
        let path = dir.join(&meta.file);
        fs::write(&path, entry.to_blob()).map_err(|e| Error::io(&path, e))?;
    }
    let path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(manifest)?;
    fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(())
}

pub fn load_manifest(dir: &Path) -> Result<CacheManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: CacheManifest = serde_json::from_str(&text)
        .map_err(|e| Error::CorruptCache(format!("{}: {e}", path.display())))?;
    if manifest.spec_version != FORMAT_VERSION {
        return Err(Error::Version {
            found: manifest.spec_version,
            expected: FORMAT_VERSION.to_string(),
        });
    }
    Ok(manifest)
}

/// Read a cache directory, validating versions, shapes and checksums.
pub fn load_cache(dir: &Path) -> Result<(Vec<SvdCacheEntry>, CacheManifest)> {
    let manifest = load_manifest(dir)?;
    let mut entries = Vec::with_capacity(manifest.entries.len());
    for meta in &manifest.entries {
        validate_layer_id(&meta.layer_id)?;
        let path = dir.join(&meta.file);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let entry = SvdCacheEntry::from_blob(&meta.layer_id, &bytes)?;
        if (entry.rows(), entry.cols(), entry.k) != (meta.rows, meta.cols, meta.k) {
            return Err(Error::CorruptCache(format!(
                "layer `{}`: blob shape disagrees with manifest",
                meta.layer_id
            )));
        }
        let sum = format!("{:016x}", entry.checksum());
        if sum != meta.checksum {
            return Err(Error::CorruptCache(format!(
                "layer `{}`: checksum {sum} != {}",
                meta.layer_id, meta.checksum
            )));
        }
        entries.push(entry);
    }
    Ok((entries, manifest))
}

/// Cache entries keyed by layer id.
pub type LayerCaches = BTreeMap<String, SvdCacheEntry>;

/// Index entries by layer id.
pub fn by_layer(entries: Vec<SvdCacheEntry>) -> LayerCaches {
    entries
        .into_iter()
        .map(|e| (e.layer_id.clone(), e))
        .collect()
}

/// Identity of a set of cache entries; equal to [`CacheManifest::fingerprint`]
/// for the manifest describing the same entries.
pub fn fingerprint(caches: &LayerCaches) -> String {
    let joined: String = caches
        .values()
        .map(|e| format!("{}:{:016x};", e.layer_id, e.checksum()))
        .collect();
    format!("{:016x}", fnv1a(joined.as_bytes()))
}
