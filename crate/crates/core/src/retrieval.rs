//! Exact descriptor search over the satellite database.
//!
//! Brute force is the retrieval path: at paper scale (26568 embeddings of
//! dimension 4096) an exact scan is already millisecond-level, so nothing
//! approximate is used. Distances accumulate in f64 over the stored f32
//! descriptors.
//!
//! Index file layout (little endian):
//! magic `STGL` | u32 version=1 | u32 c_final | u64 n | n*c_final f32
//! descriptors | n*2 f64 positions | n u64 tile_ids | 64-byte fingerprint |
//! u32 CRC32 of all preceding bytes.

use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

const MAGIC: &[u8; 4] = b"STGL";
const VERSION: u32 = 1;
const FINGERPRINT_LEN: usize = 64;

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("k must be >= 1")]
    ZeroK,
    #[error("radius must be > 0, got {0}")]
    BadRadius(f64),
    #[error("index is empty")]
    Empty,
    #[error("descriptor dimension {got} does not match index dimension {want}")]
    DimMismatch { got: usize, want: usize },
    #[error("tile ids are not unique")]
    DuplicateTileIds,
    #[error("descriptor row {0} is not unit norm (|v| = {1})")]
    NotUnitNorm(usize, f64),
    #[error("bad magic; not an index file")]
    BadMagic,
    #[error("unsupported index version {0}")]
    UnsupportedVersion(u32),
    #[error("checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("truncated or oversized index file")]
    Truncated,
    #[error("fingerprint must be {FINGERPRINT_LEN} bytes, got {0}")]
    BadFingerprint(usize),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

/// Immutable database of unit-norm descriptors with geo positions.
#[derive(Clone, Debug, PartialEq)]
pub struct DescriptorIndex {
    c_final: usize,
    descriptors: Vec<f32>,
    positions: Vec<(f64, f64)>,
    tile_ids: Vec<u64>,
    fingerprint: [u8; FINGERPRINT_LEN],
}

/// Ranked retrieval output, ascending by descriptor distance.
#[derive(Clone, Debug, Default)]
pub struct RetrievalResult {
    pub entries: Vec<RetrievedTile>,
    /// Set when a radius constraint produced an empty candidate set.
    pub localization_failure: bool,
}

#[derive(Clone, Copy, Debug)]
pub struct RetrievedTile {
    pub tile_id: u64,
    pub position: (f64, f64),
    pub distance: f64,
}

impl RetrievalResult {
    pub fn top1(&self) -> Option<&RetrievedTile> {
        self.entries.first()
    }
}

impl DescriptorIndex {
    /// Build from unit-norm descriptor rows. Rows are validated to 1e-4.
    pub fn new(
        c_final: usize,
        rows: Vec<Vec<f32>>,
        positions: Vec<(f64, f64)>,
        tile_ids: Vec<u64>,
        fingerprint_hex: &str,
    ) -> Result<Self, IndexError> {
        assert_eq!(rows.len(), positions.len());
        assert_eq!(rows.len(), tile_ids.len());
        let fp = fingerprint_bytes(fingerprint_hex)?;
        let mut descriptors = Vec::with_capacity(rows.len() * c_final);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != c_final {
                return Err(IndexError::DimMismatch { got: row.len(), want: c_final });
            }
            let norm = row.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-4 {
                return Err(IndexError::NotUnitNorm(i, norm));
            }
            descriptors.extend_from_slice(row);
        }
        let mut sorted = tile_ids.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != tile_ids.len() {
            return Err(IndexError::DuplicateTileIds);
        }
        Ok(DescriptorIndex { c_final, descriptors, positions, tile_ids, fingerprint: fp })
    }

    pub fn len(&self) -> usize {
        self.tile_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tile_ids.is_empty()
    }

    pub fn c_final(&self) -> usize {
        self.c_final
    }

    pub fn fingerprint_hex(&self) -> String {
        String::from_utf8_lossy(&self.fingerprint).into_owned()
    }

    pub fn positions(&self) -> &[(f64, f64)] {
        &self.positions
    }

    pub fn tile_ids(&self) -> &[u64] {
        &self.tile_ids
    }

    pub fn descriptor_row(&self, i: usize) -> &[f32] {
        &self.descriptors[i * self.c_final..(i + 1) * self.c_final]
    }

    fn distance_to_row(&self, q: &[f64], i: usize) -> f64 {
        let row = self.descriptor_row(i);
        let mut acc = 0.0f64;
        for (a, &b) in q.iter().zip(row) {
            let d = a - b as f64;
            acc += d * d;
        }
        acc.sqrt()
    }

    /// Exact top-k by L2 distance; ties break by ascending tile id.
    /// Asking for more than `len` results returns everything with a warning.
    pub fn knn(&self, query: &[f64], k: usize) -> Result<RetrievalResult, IndexError> {
        if k == 0 {
            return Err(IndexError::ZeroK);
        }
        if self.is_empty() {
            return Err(IndexError::Empty);
        }
        if query.len() != self.c_final {
            return Err(IndexError::DimMismatch { got: query.len(), want: self.c_final });
        }
        if k > self.len() {
            log::warn!("knn k={k} exceeds index size {}; returning all", self.len());
        }
        let candidates: Vec<usize> = (0..self.len()).collect();
        Ok(self.rank(query, k, candidates, false))
    }

    /// Top-k restricted to tiles within `radius_m` (inclusive) of `center`.
    /// An empty candidate set returns an empty result flagged as a
    /// localization failure.
    pub fn knn_within(
        &self,
        query: &[f64],
        k: usize,
        center: (f64, f64),
        radius_m: f64,
    ) -> Result<RetrievalResult, IndexError> {
        if k == 0 {
            return Err(IndexError::ZeroK);
        }
        if radius_m <= 0.0 {
            return Err(IndexError::BadRadius(radius_m));
        }
        if self.is_empty() {
            return Err(IndexError::Empty);
        }
        if query.len() != self.c_final {
            return Err(IndexError::DimMismatch { got: query.len(), want: self.c_final });
        }
        let candidates: Vec<usize> = (0..self.len())
            .filter(|&i| {
                let (x, y) = self.positions[i];
                let dx = x - center.0;
                let dy = y - center.1;
                (dx * dx + dy * dy).sqrt() <= radius_m
            })
            .collect();
        if candidates.is_empty() {
            return Ok(RetrievalResult { entries: vec![], localization_failure: true });
        }
        Ok(self.rank(query, k, candidates, false))
    }

    fn rank(&self, query: &[f64], k: usize, candidates: Vec<usize>, failure: bool) -> RetrievalResult {
        let mut scored: Vec<(f64, u64, usize)> = candidates
            .into_iter()
            .map(|i| (self.distance_to_row(query, i), self.tile_ids[i], i))
            .collect();
        scored.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite distances").then(a.1.cmp(&b.1)));
        scored.truncate(k);
        RetrievalResult {
            entries: scored
                .into_iter()
                .map(|(distance, tile_id, i)| RetrievedTile {
                    tile_id,
                    position: self.positions[i],
                    distance,
                })
                .collect(),
            localization_failure: failure,
        }
    }

    /// Serialize to the versioned binary format, atomically (temp + rename).
    pub fn save(&self, path: &Path) -> Result<(), IndexError> {
        let mut payload = Vec::new();
        payload.extend_from_slice(MAGIC);
        payload.extend_from_slice(&VERSION.to_le_bytes());
        payload.extend_from_slice(&(self.c_final as u32).to_le_bytes());
        payload.extend_from_slice(&(self.len() as u64).to_le_bytes());
        for v in &self.descriptors {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        for (x, y) in &self.positions {
            payload.extend_from_slice(&x.to_le_bytes());
            payload.extend_from_slice(&y.to_le_bytes());
        }
        for id in &self.tile_ids {
            payload.extend_from_slice(&id.to_le_bytes());
        }
        payload.extend_from_slice(&self.fingerprint);
        let crc = crc32fast::hash(&payload);
        payload.extend_from_slice(&crc.to_le_bytes());

        let tmp = path.with_extension("tmp");
        {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(&payload)?;
            f.sync_all()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, IndexError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        if bytes.len() < 4 + 4 + 4 + 8 + FINGERPRINT_LEN + 4 {
            return Err(IndexError::Truncated);
        }
        if &bytes[0..4] != MAGIC {
            return Err(IndexError::BadMagic);
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(IndexError::UnsupportedVersion(version));
        }
        let c_final = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let n = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let expect_len = 20 + n * c_final * 4 + n * 16 + n * 8 + FINGERPRINT_LEN + 4;
        if bytes.len() != expect_len {
            return Err(IndexError::Truncated);
        }
        let stored =
            u32::from_le_bytes(bytes[expect_len - 4..].try_into().expect("4 bytes"));
        let computed = crc32fast::hash(&bytes[..expect_len - 4]);
        if stored != computed {
            return Err(IndexError::Checksum { stored, computed });
        }

        let mut off = 20;
        let mut descriptors = Vec::with_capacity(n * c_final);
        for _ in 0..n * c_final {
            descriptors.push(f32::from_le_bytes(bytes[off..off + 4].try_into().expect("4 bytes")));
            off += 4;
        }
        let mut positions = Vec::with_capacity(n);
        for _ in 0..n {
            let x = f64::from_le_bytes(bytes[off..off + 8].try_into().expect("8 bytes"));
            let y = f64::from_le_bytes(bytes[off + 8..off + 16].try_into().expect("8 bytes"));
            positions.push((x, y));
            off += 16;
        }
        let mut tile_ids = Vec::with_capacity(n);
        for _ in 0..n {
            tile_ids.push(u64::from_le_bytes(bytes[off..off + 8].try_into().expect("8 bytes")));
            off += 8;
        }
        let mut fingerprint = [0u8; FINGERPRINT_LEN];
        fingerprint.copy_from_slice(&bytes[off..off + FINGERPRINT_LEN]);

        Ok(DescriptorIndex { c_final, descriptors, positions, tile_ids, fingerprint })
    }
}

fn fingerprint_bytes(hex: &str) -> Result<[u8; FINGERPRINT_LEN], IndexError> {
    let b = hex.as_bytes();
    if b.len() != FINGERPRINT_LEN {
        return Err(IndexError::BadFingerprint(b.len()));
    }
    let mut out = [0u8; FINGERPRINT_LEN];
    out.copy_from_slice(b);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn random_unit_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f32>> {
        (0..n)
            .map(|_| {
                let mut row: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-9);
                row.iter_mut().for_each(|v| *v /= norm);
                row.into_iter().map(|v| v as f32).collect()
            })
            .collect()
    }

    fn fp() -> String {
        "0".repeat(64)
    }

    fn build_random(seed: u64, n: usize, d: usize) -> (DescriptorIndex, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows = random_unit_rows(&mut rng, n, d);
        let positions: Vec<(f64, f64)> = (0..n)
            .map(|_| (rng.gen_range(-500.0..500.0), rng.gen_range(-500.0..500.0)))
            .collect();
        let ids: Vec<u64> = (0..n as u64).collect();
        (DescriptorIndex::new(d, rows, positions, ids, &fp()).unwrap(), rng)
    }

    #[test]
    fn query_equal_to_row_returns_it_at_zero() {
        let (idx, _) = build_random(1, 9, 16);
        let q: Vec<f64> = idx.descriptor_row(5).iter().map(|&v| v as f64).collect();
        let res = idx.knn(&q, 1).unwrap();
        assert_eq!(res.entries[0].tile_id, 5);
        assert!(res.entries[0].distance < 1e-9);
    }

    #[test]
    fn knn_matches_brute_force_sort() {
        let (idx, mut rng) = build_random(2, 200, 8);
        for _ in 0..20 {
            let q: Vec<f64> = random_unit_rows(&mut rng, 1, 8)[0]
                .iter()
                .map(|&v| v as f64)
                .collect();
            let res = idx.knn(&q, 10).unwrap();
            // oracle: naive recompute + full sort
            let mut all: Vec<(f64, u64)> = (0..idx.len())
                .map(|i| {
                    let row = idx.descriptor_row(i);
                    let d = q
                        .iter()
                        .zip(row)
                        .map(|(a, &b)| (a - b as f64) * (a - b as f64))
                        .sum::<f64>()
                        .sqrt();
                    (d, idx.tile_ids()[i])
                })
                .collect();
            all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            for (got, want) in res.entries.iter().zip(&all) {
                assert_eq!(got.tile_id, want.1);
                assert_eq!(got.distance, want.0);
            }
        }
    }

    #[test]
    fn k_zero_is_an_error() {
        let (idx, _) = build_random(3, 5, 4);
        assert!(matches!(idx.knn(&[0.5; 4].map(f64::from), 0), Err(IndexError::ZeroK)));
    }

    #[test]
    fn k_beyond_n_returns_all() {
        let (idx, mut rng) = build_random(4, 7, 4);
        let q: Vec<f64> = random_unit_rows(&mut rng, 1, 4)[0].iter().map(|&v| v as f64).collect();
        let res = idx.knn(&q, 100).unwrap();
        assert_eq!(res.entries.len(), 7);
    }

    #[test]
    fn radius_can_exclude_global_nearest() {
        let d = 4;
        let rows = vec![
            vec![1.0, 0.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0, 0.0],
        ];
        let positions = vec![(0.0, 0.0), (1000.0, 0.0)];
        let idx = DescriptorIndex::new(d, rows, positions, vec![0, 1], &fp()).unwrap();
        let q = vec![1.0, 0.0, 0.0, 0.0];
        let unconstrained = idx.knn(&q, 1).unwrap();
        assert_eq!(unconstrained.entries[0].tile_id, 0);
        // constrain to a region holding only tile 1
        let constrained = idx.knn_within(&q, 1, (1000.0, 0.0), 50.0).unwrap();
        assert_eq!(constrained.entries[0].tile_id, 1);
    }

    #[test]
    fn huge_radius_equals_knn() {
        let (idx, mut rng) = build_random(5, 50, 8);
        for _ in 0..10 {
            let q: Vec<f64> = random_unit_rows(&mut rng, 1, 8)[0].iter().map(|&v| v as f64).collect();
            let a = idx.knn(&q, 5).unwrap();
            let b = idx.knn_within(&q, 5, (0.0, 0.0), f64::INFINITY).unwrap();
            assert_eq!(a.entries.len(), b.entries.len());
            for (x, y) in a.entries.iter().zip(&b.entries) {
                assert_eq!(x.tile_id, y.tile_id);
                assert_eq!(x.distance, y.distance);
            }
        }
    }

    #[test]
    fn empty_radius_flags_failure() {
        let (idx, _) = build_random(6, 5, 4);
        let q = vec![1.0, 0.0, 0.0, 0.0];
        let res = idx.knn_within(&q, 3, (1e8, 1e8), 1.0).unwrap();
        assert!(res.localization_failure);
        assert!(res.entries.is_empty());
    }

    #[test]
    fn save_load_round_trip_is_bit_exact() {
        let (idx, _) = build_random(7, 33, 16);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("db.stgl");
        idx.save(&path).unwrap();
        let back = DescriptorIndex::load(&path).unwrap();
        assert_eq!(idx, back);
    }

    #[test]
    fn corrupted_payload_fails_checksum() {
        let (idx, _) = build_random(8, 10, 8);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("db.stgl");
        idx.save(&path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0xff;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(DescriptorIndex::load(&path), Err(IndexError::Checksum { .. })));
    }

    #[test]
    fn bumped_version_is_rejected_explicitly() {
        let (idx, _) = build_random(9, 4, 4);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("db.stgl");
        idx.save(&path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4] = 2; // version field
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            DescriptorIndex::load(&path),
            Err(IndexError::UnsupportedVersion(2))
        ));
    }

    #[test]
    fn non_unit_rows_rejected() {
        let rows = vec![vec![0.5f32, 0.5, 0.0, 0.0]];
        let err = DescriptorIndex::new(4, rows, vec![(0.0, 0.0)], vec![0], &fp()).unwrap_err();
        assert!(matches!(err, IndexError::NotUnitNorm(0, _)));
    }
}
