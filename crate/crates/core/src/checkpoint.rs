//! Named-tensor checkpoints: a directory holding `manifest.txt` and
//! `tensors.bin`.
//!
//! The manifest is plain text, one tensor per line:
//!
//! ```text
//! # afr-tensors v1
//! cmfr.stage1.conv1.weight	f32	64x16	0
//! cmfr.stage1.conv1.bias	f32	1x16	4096
//! ```
//!
//! Fields are tab separated: name, dtype (`f32` or `f64`), shape as
//! `rows x cols`, and the byte offset into `tensors.bin`. Values are
//! little-endian IEEE-754, row-major.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::Array2;

use crate::error::{AfrError, Result};

pub type TensorMap = BTreeMap<String, Array2<f64>>;

pub const MANIFEST_FILE: &str = "manifest.txt";
pub const BLOB_FILE: &str = "tensors.bin";
const HEADER: &str = "# afr-tensors v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Dtype::F32 => "f32",
            Dtype::F64 => "f64",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "f32" => Some(Dtype::F32),
            "f64" => Some(Dtype::F64),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub name: String,
    pub dtype: Dtype,
    pub shape: (usize, usize),
    pub offset: usize,
}

pub fn write_tensors(dir: &Path, tensors: &TensorMap, dtype: Dtype) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| AfrError::io(dir, e))?;
    let mut manifest = String::from(HEADER);
    manifest.push('\n');
    let mut blob: Vec<u8> = Vec::new();
    for (name, t) in tensors {
        if name.contains(char::is_whitespace) {
            return Err(AfrError::Checkpoint(format!("tensor name {name:?} contains whitespace")));
        }
        let (r, c) = t.dim();
        manifest.push_str(&format!("{name}\t{}\t{r}x{c}\t{}\n", dtype.name(), blob.len()));
        for &v in t.iter() {
            match dtype {
                Dtype::F32 => blob.extend_from_slice(&(v as f32).to_le_bytes()),
                Dtype::F64 => blob.extend_from_slice(&v.to_le_bytes()),
            }
        }
    }
    let mpath = dir.join(MANIFEST_FILE);
    fs::write(&mpath, manifest).map_err(|e| AfrError::io(mpath, e))?;
    let bpath = dir.join(BLOB_FILE);
    fs::write(&bpath, blob).map_err(|e| AfrError::io(bpath, e))
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestEntry>> {
    let mpath = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&mpath).map_err(|e| AfrError::io(&mpath, e))?;
    let mut entries = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim_end();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = || AfrError::Checkpoint(format!("{}:{}: malformed line {line:?}", mpath.display(), lineno + 1));
        let fields: Vec<&str> = line.split('\t').collect();
        let [name, dtype, shape, offset] = fields[..] else {
            return Err(bad());
        };
        let dtype = Dtype::parse(dtype).ok_or_else(bad)?;
        let (r, c) = shape.split_once('x').ok_or_else(bad)?;
        let shape = (r.parse().map_err(|_| bad())?, c.parse().map_err(|_| bad())?);
        let offset = offset.parse().map_err(|_| bad())?;
        entries.push(ManifestEntry {
            name: name.to_string(),
            dtype,
            shape,
            offset,
        });
    }
    Ok(entries)
}

pub fn read_tensors(dir: &Path) -> Result<TensorMap> {
    let entries = read_manifest(dir)?;
    let bpath = dir.join(BLOB_FILE);
    let blob = fs::read(&bpath).map_err(|e| AfrError::io(&bpath, e))?;
    let mut out = TensorMap::new();
    for e in entries {
        let n = e.shape.0 * e.shape.1;
        let end = e.offset + n * e.dtype.width();
        if end > blob.len() {
            return Err(AfrError::Checkpoint(format!(
                "tensor {} ({}x{}) runs past the end of {}",
                e.name,
                e.shape.0,
                e.shape.1,
                bpath.display()
            )));
        }
        let bytes = &blob[e.offset..end];
        let values: Vec<f64> = match e.dtype {
            Dtype::F32 => bytes
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
                .collect(),
            Dtype::F64 => bytes
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                .collect(),
        };
        let t = Array2::from_shape_vec(e.shape, values).expect("manifest shape");
        if out.insert(e.name.clone(), t).is_some() {
            return Err(AfrError::Checkpoint(format!("duplicate tensor {}", e.name)));
        }
    }
    Ok(out)
}

/// Checks `found` against the expected names and shapes, reporting every
/// offending tensor at once.
pub fn validate_shapes(expected: &BTreeMap<String, (usize, usize)>, found: &TensorMap) -> Result<()> {
    let mut problems = Vec::new();
    for (name, &shape) in expected {
        match found.get(name) {
            None => problems.push(format!("  missing {name}: expected {}x{}", shape.0, shape.1)),
            Some(t) if t.dim() != shape => problems.push(format!(
                "  {name}: expected {}x{}, found {}x{}",
                shape.0,
                shape.1,
                t.nrows(),
                t.ncols()
            )),
            _ => {}
        }
    }
    for name in found.keys() {
        if !expected.contains_key(name) {
            problems.push(format!("  unexpected tensor {name}"));
        }
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(AfrError::Checkpoint(problems.join("\n")))
    }
}
