//! Binary persistence of [`GramState`] and extension of a saved state with
//! a new model or meta-feature.
//!
//! Layout (little-endian, version 1):
//!
//! | offset | size | field |
//! |-------:|-----:|-------|
//! | 0 | 4 | magic `FWLS` |
//! | 4 | 4 | version (u32) |
//! | 8 | 4 | L, models (u32) |
//! | 12 | 4 | M, meta-features (u32) |
//! | 16 | 8 | N, rows (u64) |
//! | 24 | 8 | lambda hint (f64) |
//! | 32 | 8 | row-id fingerprint (u64, 0 = none) |
//! | 40 | 8·D(D+1)/2 | `AᵀA` lower triangle, row-major, canonical column order |
//! | … | 8·D | `Aᵀy` |
//! | … | 8 | `yᵀy` |
//! | … | 4 | CRC-32 of every preceding byte |

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::design::{fingerprint_ids, DesignMapping, StackedDataset};
use crate::error::{FwlsError, Result};
use crate::gram::{ColumnBlockBuilder, ExtensionKind, GramState, GramSums};
use crate::linalg::packed_len;

pub const MAGIC: [u8; 4] = *b"FWLS";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 40;
pub const FILE_EXTENSION: &str = "fwls";

/// Encoded size of a state with `dim` product columns.
pub fn encoded_len(dim: usize) -> usize {
    HEADER_LEN + 8 * (packed_len(dim) + dim + 1) + 4
}

/// A decoded state file.
#[derive(Debug, Clone, PartialEq)]
pub struct StateFile {
    pub state: GramState,
    pub lambda_hint: f64,
}

pub fn encode(gs: &GramState, lambda_hint: f64) -> Vec<u8> {
    let mapping = gs.mapping();
    let mut out = Vec::with_capacity(encoded_len(gs.dim()));
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(mapping.n_models() as u32).to_le_bytes());
    out.extend_from_slice(&(mapping.n_features() as u32).to_le_bytes());
    out.extend_from_slice(&gs.n_rows().to_le_bytes());
    out.extend_from_slice(&lambda_hint.to_le_bytes());
    out.extend_from_slice(&gs.fingerprint().to_le_bytes());
    for v in gs.gram_packed().iter().chain(gs.xty()) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&gs.yty().to_le_bytes());
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take<const N: usize>(&mut self) -> Result<[u8; N]> {
        let end = self.pos + N;
        let bytes = self
            .buf
            .get(self.pos..end)
            .ok_or_else(|| FwlsError::CorruptFile(format!("truncated at byte {}", self.pos)))?;
        self.pos = end;
        Ok(bytes.try_into().expect("slice length"))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take()?))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take()?))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take()?))
    }
}

pub fn decode(bytes: &[u8]) -> Result<StateFile> {
    if bytes.len() < 4 || bytes[..4] != MAGIC {
        return Err(FwlsError::BadMagic);
    }
    let mut rd = Reader { buf: bytes, pos: 4 };
    let version = rd.u32()?;
    if version != VERSION {
        return Err(FwlsError::UnsupportedVersion {
            found: version,
            supported: VERSION,
        });
    }
    let l = rd.u32()? as usize;
    let m = rd.u32()? as usize;
    let n_rows = rd.u64()?;
    let lambda_hint = rd.f64()?;
    let fingerprint = rd.u64()?;
    let mapping = DesignMapping::new(l, m)
        .map_err(|_| FwlsError::CorruptFile(format!("invalid dimensions L={l} M={m}")))?;
    let d = mapping.dim();
    let expected = encoded_len(d);
    if bytes.len() != expected {
        return Err(FwlsError::CorruptFile(format!(
            "expected {expected} bytes for L={l} M={m}, found {}",
            bytes.len()
        )));
    }
    let body_end = expected - 4;
    let stored = u32::from_le_bytes(bytes[body_end..].try_into().expect("4 bytes"));
    let computed = crc32fast::hash(&bytes[..body_end]);
    if stored != computed {
        return Err(FwlsError::CrcMismatch { stored, computed });
    }
    let gram = (0..packed_len(d)).map(|_| rd.f64()).collect::<Result<Vec<_>>>()?;
    let xty = (0..d).map(|_| rd.f64()).collect::<Result<Vec<_>>>()?;
    let yty = rd.f64()?;
    let state = GramState::from_sums(mapping, GramSums::from_parts(d, gram, xty, yty, n_rows), fingerprint);
    state
        .check_invariants()
        .map_err(|e| FwlsError::CorruptFile(e.to_string()))?;
    Ok(StateFile { state, lambda_hint })
}

/// Writes the state atomically: a sibling temp file is written, synced and
/// renamed over `path`.
pub fn save(gs: &GramState, lambda_hint: f64, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(gs, lambda_hint);
    let tmp = temp_sibling(path);
    let write = || -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    };
    write().map_err(|e| {
        let _ = fs::remove_file(&tmp);
        FwlsError::io(path, e)
    })
}

fn temp_sibling(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(format!(".tmp{}", std::process::id()));
    path.with_file_name(name)
}

pub fn load(path: impl AsRef<Path>) -> Result<StateFile> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| FwlsError::io(path, e))?;
    decode(&bytes)
}

/// Values of a new model or meta-feature, aligned row-for-row with the
/// dataset the state was accumulated from.
#[derive(Debug, Clone, PartialEq)]
pub struct NewColumn {
    pub name: String,
    pub values: Vec<f64>,
    pub row_ids: Option<Vec<String>>,
}

impl NewColumn {
    pub fn new(name: impl Into<String>, values: Vec<f64>) -> Self {
        Self {
            name: name.into(),
            values,
            row_ids: None,
        }
    }

    pub fn with_row_ids(mut self, ids: Vec<String>) -> Self {
        self.row_ids = Some(ids);
        self
    }
}

fn check_alignment(gs: &GramState, ds: &StackedDataset, col: &NewColumn) -> Result<()> {
    if ds.mapping() != gs.mapping() {
        return Err(FwlsError::MappingMismatch {
            left_models: gs.mapping().n_models(),
            left_features: gs.mapping().n_features(),
            right_models: ds.n_models(),
            right_features: ds.n_features(),
        });
    }
    if ds.n_rows() as u64 != gs.n_rows() {
        return Err(FwlsError::RowCountMismatch {
            expected: gs.n_rows(),
            actual: ds.n_rows() as u64,
        });
    }
    if col.values.len() as u64 != gs.n_rows() {
        return Err(FwlsError::RowCountMismatch {
            expected: gs.n_rows(),
            actual: col.values.len() as u64,
        });
    }
    let ds_fp = ds.fingerprint();
    if gs.fingerprint() != 0 && ds_fp != gs.fingerprint() {
        return Err(FwlsError::FingerprintMismatch {
            expected: gs.fingerprint(),
            actual: ds_fp,
        });
    }
    if let Some(ids) = &col.row_ids {
        let col_fp = fingerprint_ids(ids.iter().map(String::as_str));
        let want = if gs.fingerprint() != 0 { gs.fingerprint() } else { ds_fp };
        if want != 0 && col_fp != want {
            return Err(FwlsError::FingerprintMismatch {
                expected: want,
                actual: col_fp,
            });
        }
    }
    Ok(())
}

fn extend(gs: &GramState, ds: &StackedDataset, col: &NewColumn, kind: ExtensionKind) -> Result<GramState> {
    check_alignment(gs, ds, col)?;
    let mut b = ColumnBlockBuilder::new(gs.mapping(), kind);
    for (r, &v) in col.values.iter().enumerate() {
        b.push(ds.model_row(r), ds.meta_row(r), v, ds.target(r))?;
    }
    gs.extend_columns(&b.finish())
}

/// Adds a model as the new last model. Only the `M` new columns are
/// accumulated: `O(N·M²·L)` work instead of a full `O(N·M²·L²)` pass.
pub fn extend_with_model(gs: &GramState, new_model: &NewColumn, ds: &StackedDataset) -> Result<GramState> {
    extend(gs, ds, new_model, ExtensionKind::NewModel)
}

/// Adds a meta-feature as the new last meta-feature (`O(N·M·L²)` work).
pub fn extend_with_feature(gs: &GramState, new_feature: &NewColumn, ds: &StackedDataset) -> Result<GramState> {
    extend(gs, ds, new_feature, ExtensionKind::NewFeature)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_dataset(n: usize, l: usize, m: usize, seed: u64) -> StackedDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut u = || rng.random_range(-1.0..1.0);
        let y = (0..n).map(|_| u()).collect();
        let g = (0..n * l).map(|_| u()).collect();
        let f = (0..n * m).map(|_| u()).collect();
        let ids = (0..n).map(|r| format!("r{r}")).collect();
        StackedDataset::new(y, g, l, f, m).unwrap().with_row_ids(ids).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ds = random_dataset(40, 3, 2, 1);
        let gs = GramState::from_dataset(&ds);
        let bytes = encode(&gs, 0.25);
        let back = decode(&bytes).unwrap();
        assert_eq!(back.state, gs);
        assert_eq!(back.lambda_hint, 0.25);
        assert_eq!(encode(&back.state, back.lambda_hint), bytes);
    }

    #[test]
    fn size_for_six_columns() {
        let gs = GramState::from_dataset(&random_dataset(10, 3, 2, 2));
        // 40-byte header + 8·(21 + 6 + 1) + 4
        assert_eq!(encoded_len(6), 268);
        assert_eq!(encode(&gs, 0.0).len(), 268);
    }

    #[test]
    fn save_load_via_filesystem() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.fwls");
        let gs = GramState::from_dataset(&random_dataset(25, 2, 3, 3));
        save(&gs, 0.01, &path).unwrap();
        let back = load(&path).unwrap();
        assert_eq!(back.state, gs);
        // no temp files left behind
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
    }

    #[test]
    fn malformed_files_fail_cleanly() {
        let gs = GramState::from_dataset(&random_dataset(25, 2, 2, 4));
        let bytes = encode(&gs, 0.0);
        assert!(matches!(decode(&[]), Err(FwlsError::BadMagic)));
        assert!(matches!(decode(b"NOPE1234"), Err(FwlsError::BadMagic)));
        for cut in [4, 10, HEADER_LEN, bytes.len() - 1] {
            assert!(decode(&bytes[..cut]).is_err(), "cut at {cut}");
        }
        assert!(matches!(decode(&bytes[..bytes.len() - 1]), Err(FwlsError::CorruptFile(_))));
        let mut v2 = bytes.clone();
        v2[4..8].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(decode(&v2), Err(FwlsError::UnsupportedVersion { found: 2, .. })));
        let mut flipped = bytes.clone();
        flipped[HEADER_LEN + 3] ^= 0x40;
        assert!(matches!(decode(&flipped), Err(FwlsError::CrcMismatch { .. })));
        let mut zero_dims = bytes.clone();
        zero_dims[8..12].copy_from_slice(&0u32.to_le_bytes());
        assert!(matches!(decode(&zero_dims), Err(FwlsError::CorruptFile(_))));
    }

    #[test]
    fn missing_file_is_io_error() {
        assert!(matches!(load("/nonexistent/x.fwls"), Err(FwlsError::Io { .. })));
    }

    #[test]
    fn extension_matches_fresh_and_commutes() {
        let ds = random_dataset(100, 2, 2, 5);
        let gs = GramState::from_dataset(&ds);
        let model: Vec<f64> = (0..100).map(|r| (r as f64).sqrt()).collect();
        let feat: Vec<f64> = (0..100).map(|r| (r % 7) as f64).collect();
        let nm = NewColumn::new("m", model.clone());
        let nf = NewColumn::new("f", feat.clone());

        let a = extend_with_model(&gs, &nm, &ds).unwrap();
        let ds_m = ds.push_model("m", &model).unwrap();
        let a = extend_with_feature(&a, &nf, &ds_m).unwrap();

        let b = extend_with_feature(&gs, &nf, &ds).unwrap();
        let ds_f = ds.push_feature("f", &feat).unwrap();
        let b = extend_with_model(&b, &nm, &ds_f).unwrap();

        let fresh = GramState::from_dataset(&ds_m.push_feature("f", &feat).unwrap());
        let tol = 1e-12 * fresh.gram_max_abs();
        for st in [&a, &b] {
            assert_eq!(st.mapping(), fresh.mapping());
            let diff = st
                .gram_packed()
                .iter()
                .zip(fresh.gram_packed())
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max);
            assert!(diff <= tol);
        }
    }

    #[test]
    fn constant_model_extension_holds_feature_sums() {
        let ds = random_dataset(30, 2, 2, 6);
        let gs = GramState::from_dataset(&ds);
        let ext = extend_with_model(&gs, &NewColumn::new("const", vec![1.0; 30]), &ds).unwrap();
        let map = ext.mapping();
        // entry (g0·f_j, g0·f_k) = Σ f_j f_k
        for j in 0..2 {
            for k in 0..2 {
                let want: f64 = (0..30).map(|r| ds.meta_row(r)[j] * ds.meta_row(r)[k]).sum();
                let got = ext.gram_at(map.column_index(2, j).unwrap(), map.column_index(2, k).unwrap());
                assert!((got - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn misaligned_streams_are_rejected() {
        let ds = random_dataset(20, 2, 2, 7);
        let gs = GramState::from_dataset(&ds);
        let short = NewColumn::new("m", vec![1.0; 19]);
        assert!(matches!(
            extend_with_model(&gs, &short, &ds),
            Err(FwlsError::RowCountMismatch { expected: 20, actual: 19 })
        ));
        let mut ids: Vec<String> = (0..20).map(|r| format!("r{r}")).collect();
        ids.swap(0, 1);
        let shuffled = NewColumn::new("m", vec![1.0; 20]).with_row_ids(ids.clone());
        assert!(matches!(
            extend_with_model(&gs, &shuffled, &ds),
            Err(FwlsError::FingerprintMismatch { .. })
        ));
        let other_ds = ds.clone().with_row_ids(ids).unwrap();
        assert!(matches!(
            extend_with_feature(&gs, &NewColumn::new("f", vec![1.0; 20]), &other_ds),
            Err(FwlsError::FingerprintMismatch { .. })
        ));
    }
}
