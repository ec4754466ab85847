//! Binary embedding files and their TOML manifests.
//!
//! Layout, all little-endian:
//!
//! | offset | size | field                         |
//! |--------|------|-------------------------------|
//! | 0      | 4    | magic `VLEB`                  |
//! | 4      | 2    | format version (`u16`, = 1)   |
//! | 6      | 4    | `D` (`u32`)                   |
//! | 10     | 8    | `N` (`u64`)                   |
//! | 18     | 4    | `C` (`u32`)                   |
//! | 22     | 8    | `τ` (`f64`)                   |
//! | 30     | …    | `N` × (`u32` label, `D` × `f32`) |
//!
//! The manifest sits next to the binary file with the extension replaced by
//! `manifest.toml`. Text embedding files share the layout; their labels give
//! the class of each prompt embedding.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::embedding::{EmbeddingTable, TextPrototypeSet, NORM_EPS, UNIT_NORM_TOL};
use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"VLEB";
pub const FORMAT_VERSION: u16 = 1;
pub const HEADER_LEN: u64 = 30;

/// Rows within this distance of unit norm load untouched (up to the table
/// tolerance, below which they are renormalized silently).
pub const NORM_WARN_TOL: f64 = 1e-4;
/// Rows beyond this distance of unit norm are rejected.
pub const NORM_ERROR_TOL: f64 = 1e-2;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Header {
    pub version: u16,
    pub dim: u32,
    pub count: u64,
    pub num_classes: u32,
    pub temperature: f64,
}

impl Header {
    fn record_len(&self) -> u64 {
        4 + 4 * self.dim as u64
    }

    fn payload_len(&self) -> Option<u64> {
        self.count.checked_mul(self.record_len())
    }

    fn encode(&self) -> [u8; HEADER_LEN as usize] {
        let mut b = [0u8; HEADER_LEN as usize];
        b[0..4].copy_from_slice(&MAGIC);
        b[4..6].copy_from_slice(&self.version.to_le_bytes());
        b[6..10].copy_from_slice(&self.dim.to_le_bytes());
        b[10..18].copy_from_slice(&self.count.to_le_bytes());
        b[18..22].copy_from_slice(&self.num_classes.to_le_bytes());
        b[22..30].copy_from_slice(&self.temperature.to_le_bytes());
        b
    }

    fn decode(b: &[u8]) -> Result<Self> {
        if b.len() < 4 || b[0..4] != MAGIC {
            return Err(Error::BadMagic);
        }
        if b.len() < HEADER_LEN as usize {
            return Err(Error::TruncatedPayload {
                expected: HEADER_LEN,
                found: b.len() as u64,
            });
        }
        let version = u16::from_le_bytes([b[4], b[5]]);
        if version != FORMAT_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let u32_at = |o: usize| u32::from_le_bytes(b[o..o + 4].try_into().expect("4 bytes"));
        let u64_at = |o: usize| u64::from_le_bytes(b[o..o + 8].try_into().expect("8 bytes"));
        Ok(Self {
            version,
            dim: u32_at(6),
            count: u64_at(10),
            num_classes: u32_at(18),
            temperature: f64::from_bits(u64_at(22)),
        })
    }
}

/// Decoded file contents before any norm handling.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTable {
    pub header: Header,
    pub vectors: Array2<f64>,
    pub labels: Vec<usize>,
}

/// Companion metadata for an interchange file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub task: String,
    pub class_names: Vec<String>,
    /// Split tag such as `train`, `test` or `text`.
    pub split: String,
    pub source_model: String,
}

pub fn manifest_path(path: &Path) -> PathBuf {
    path.with_extension("manifest.toml")
}

/// Writes `contents` next to `path` and renames it into place.
fn write_atomic(path: &Path, write: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    let tmp = PathBuf::from(tmp);
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        write(&mut w)?;
        w.into_inner().map_err(|e| e.into_error())?.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Writes vectors (rounded to `f32`) and labels.
pub fn write_raw(
    path: &Path,
    vectors: ArrayView2<f64>,
    labels: &[usize],
    num_classes: usize,
    temperature: f64,
) -> Result<()> {
    if vectors.nrows() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: vectors.nrows(),
            got: labels.len(),
        });
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= num_classes) {
        return Err(Error::LabelOutOfRange { label, num_classes });
    }
    let to_u32 = |v: usize, what: &str| {
        u32::try_from(v).map_err(|_| Error::InvalidTable(format!("{what} {v} does not fit in u32")))
    };
    let header = Header {
        version: FORMAT_VERSION,
        dim: to_u32(vectors.ncols(), "dimension")?,
        count: vectors.nrows() as u64,
        num_classes: to_u32(num_classes, "class count")?,
        temperature,
    };
    write_atomic(path, |w| {
        w.write_all(&header.encode())?;
        for (row, &label) in vectors.axis_iter(Axis(0)).zip(labels) {
            w.write_all(&(label as u32).to_le_bytes())?;
            for &x in row {
                w.write_all(&(x as f32).to_le_bytes())?;
            }
        }
        Ok(())
    })
}

pub fn write_table(path: &Path, table: &EmbeddingTable, temperature: f64) -> Result<()> {
    write_raw(path, table.vectors(), table.labels(), table.num_classes(), temperature)
}

/// Writes every per-class text embedding, labelled by class.
pub fn write_texts(path: &Path, texts: &TextPrototypeSet) -> Result<()> {
    let rows: Vec<ArrayView2<f64>> = texts.per_class_texts().iter().map(|t| t.view()).collect();
    let vectors = ndarray::concatenate(Axis(0), &rows)
        .map_err(|e| Error::InvalidTable(e.to_string()))?;
    let labels: Vec<usize> = texts
        .per_class_texts()
        .iter()
        .enumerate()
        .flat_map(|(c, t)| std::iter::repeat_n(c, t.nrows()))
        .collect();
    write_raw(path, vectors.view(), &labels, texts.num_classes(), texts.temperature())
}

pub fn write_manifest(path: &Path, manifest: &Manifest) -> Result<()> {
    let text = toml::to_string(manifest).map_err(|e| Error::Manifest(e.to_string()))?;
    write_atomic(&manifest_path(path), |w| w.write_all(text.as_bytes()))
}

/// The manifest next to `path`, or `None` when there is none.
pub fn read_manifest(path: &Path) -> Result<Option<Manifest>> {
    let mpath = manifest_path(path);
    if !mpath.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&mpath)?;
    toml::from_str(&text)
        .map(Some)
        .map_err(|e| Error::Manifest(format!("{}: {e}", mpath.display())))
}

/// Decodes a file, checking the header and the exact payload length.
pub fn read_raw(path: &Path) -> Result<RawTable> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    decode(&bytes)
}

fn decode(bytes: &[u8]) -> Result<RawTable> {
    let header = Header::decode(bytes)?;
    let expected = header.payload_len().ok_or(Error::TruncatedPayload {
        expected: u64::MAX,
        found: bytes.len() as u64 - HEADER_LEN,
    })?;
    let found = bytes.len() as u64 - HEADER_LEN;
    if found < expected {
        return Err(Error::TruncatedPayload { expected, found });
    }
    if found > expected {
        return Err(Error::TrailingBytes(found - expected));
    }
    let (n, d) = (header.count as usize, header.dim as usize);
    let c = header.num_classes as usize;
    let mut vectors = Array2::zeros((n, d));
    let mut labels = Vec::with_capacity(n);
    for (i, rec) in bytes[HEADER_LEN as usize..]
        .chunks_exact(header.record_len() as usize)
        .enumerate()
    {
        let label = u32::from_le_bytes(rec[0..4].try_into().expect("4 bytes")) as usize;
        if label >= c {
            return Err(Error::LabelOutOfRange { label, num_classes: c });
        }
        labels.push(label);
        for (dst, src) in vectors.row_mut(i).iter_mut().zip(rec[4..].chunks_exact(4)) {
            *dst = f32::from_le_bytes(src.try_into().expect("4 bytes")) as f64;
        }
    }
    if vectors.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("interchange payload"));
    }
    Ok(RawTable {
        header,
        vectors,
        labels,
    })
}

/// Applies the norm bands to every row in place and returns how many rows
/// were outside the warning band.
pub fn enforce_norms(vectors: &mut Array2<f64>) -> Result<usize> {
    let mut warned = 0;
    for (i, mut row) in vectors.axis_iter_mut(Axis(0)).enumerate() {
        let norm = row.dot(&row).sqrt();
        let dev = (norm - 1.0).abs();
        if !(dev <= NORM_ERROR_TOL) || norm <= NORM_EPS {
            return Err(Error::NormViolation { row: i, norm });
        }
        if dev > NORM_WARN_TOL {
            warned += 1;
            row /= norm;
        } else if dev > UNIT_NORM_TOL {
            row /= norm;
        }
    }
    Ok(warned)
}

/// A loaded visual table with its header metadata.
#[derive(Debug, Clone)]
pub struct LoadedTable {
    pub table: EmbeddingTable,
    pub temperature: f64,
    pub manifest: Option<Manifest>,
    /// Rows renormalized because they were outside the warning band.
    pub renormalized: usize,
}

pub fn load_embeddings(path: &Path) -> Result<LoadedTable> {
    let RawTable {
        header,
        mut vectors,
        labels,
    } = read_raw(path)?;
    let renormalized = enforce_norms(&mut vectors)?;
    if renormalized > 0 {
        log::warn!(
            "{}: renormalized {renormalized} rows with norm off by more than {NORM_WARN_TOL}",
            path.display()
        );
    }
    let table = EmbeddingTable::new(vectors, labels, header.num_classes as usize)?;
    Ok(LoadedTable {
        table,
        temperature: header.temperature,
        manifest: read_manifest(path)?,
        renormalized,
    })
}

/// Loads a text file into prototypes. `temperature` overrides the header.
pub fn load_texts(path: &Path, temperature: Option<f64>, renormalize: bool) -> Result<TextPrototypeSet> {
    let RawTable {
        header,
        mut vectors,
        labels,
    } = read_raw(path)?;
    let renormalized = enforce_norms(&mut vectors)?;
    if renormalized > 0 {
        log::warn!("{}: renormalized {renormalized} text rows", path.display());
    }
    let mut groups = vec![Vec::new(); header.num_classes as usize];
    for (i, &l) in labels.iter().enumerate() {
        groups[l].push(i);
    }
    let per_class = groups
        .iter()
        .map(|idx| vectors.select(Axis(0), idx))
        .collect();
    TextPrototypeSet::new(per_class, temperature.unwrap_or(header.temperature), renormalize)
}
