//! Bit-exact binary formats and the run log.
//!
//! All integers and floats are little-endian; nothing is padded.
//!
//! Checkpoint (`SAFTCKPT`):
//!
//! ```text
//! magic "SAFTCKPT" | u32 version | u64 D | u32 precision (32 or 64)
//! u32 segment count | per segment: u32 name length, UTF-8 name, u64 offset, u64 length, u8 side (0 image, 1 text)
//! version 2 only: u32 block count (3) | u64 optimizer step
//! blocks × D values (f32 or f64 by precision): params [, first moment, second moment]
//! u64 checksum of every preceding byte
//! ```
//!
//! Mask (`SAFTMASK`): magic, u32 version = 1, u64 D, `⌈D/8⌉` bytes with bit
//! `k` at bit `k % 8` of byte `k / 8`, then a u64 checksum of every
//! preceding byte.
//!
//! Split (`SAFTDATA`): magic, u32 version = 1, u64 count, u32 p, `count·p`
//! f32 features row-major, `count` u32 labels.
//!
//! The checksum is the polynomial rolling hash
//! `h ← h·0x100000001b3 + (byte + 1) mod 2^64` starting from `h = 0`.
//! The multiplier is odd, so any single-byte change alters the hash.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use crate::autodiff::Precision;
use crate::data::Split;
use crate::model::{FlatParams, Layout, Segment, Side};
use crate::select::Mask;
use crate::taskgen::Task;
use crate::train::RunRecord;
use crate::{Error, Result};

const CKPT_MAGIC: &[u8; 8] = b"SAFTCKPT";
const MASK_MAGIC: &[u8; 8] = b"SAFTMASK";
const DATA_MAGIC: &[u8; 8] = b"SAFTDATA";
const CHECKSUM_MULTIPLIER: u64 = 0x0000_0100_0000_01b3;

pub fn checksum64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0u64, |h, &b| {
        h.wrapping_mul(CHECKSUM_MULTIPLIER).wrapping_add(b as u64 + 1)
    })
}

/// Writes `bytes` to a sibling temp file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8], overwrite: bool) -> Result<()> {
    if !overwrite && path.exists() {
        return Err(Error::AlreadyExists(path.to_path_buf()));
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "out".into());
    let tmp = path.with_file_name(format!(".{name}.{}.tmp", std::process::id()));
    let result = (|| {
        let mut f = File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8], path: &'a Path) -> Self {
        Self { bytes, pos: 0, path }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::format(self.path, "truncated file"))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::format(self.path, "length overflows usize"))
    }

    fn magic(&mut self, want: &[u8; 8]) -> Result<()> {
        let got = self.take(8)?;
        if got != want {
            return Err(Error::format(
                self.path,
                format!(
                    "bad magic {:?}, expected {:?}",
                    String::from_utf8_lossy(got),
                    String::from_utf8_lossy(want)
                ),
            ));
        }
        Ok(())
    }

    fn values(&mut self, n: usize, precision: Precision) -> Result<Vec<f64>> {
        let width = precision.bits() as usize / 8;
        let raw = self.take(
            n.checked_mul(width)
                .ok_or_else(|| Error::format(self.path, "size overflow"))?,
        )?;
        Ok(match precision {
            Precision::F32 => raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
            Precision::F64 => raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        })
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::format(self.path, "trailing bytes"));
        }
        Ok(())
    }
}

/// Splits off and verifies the trailing checksum.
fn verified_body<'a>(bytes: &'a [u8], path: &Path) -> Result<&'a [u8]> {
    if bytes.len() < 8 {
        return Err(Error::format(path, "truncated file"));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().unwrap());
    let computed = checksum64(body);
    if stored != computed {
        return Err(Error::Checksum {
            path: path.to_path_buf(),
            stored,
            computed,
        });
    }
    Ok(body)
}

fn seal(mut body: Vec<u8>) -> Vec<u8> {
    let sum = checksum64(&body);
    body.extend_from_slice(&sum.to_le_bytes());
    body
}

fn push_values(out: &mut Vec<u8>, values: &[f64], precision: Precision) -> Result<()> {
    for &v in values {
        match precision {
            Precision::F32 => {
                let narrow = v as f32;
                if narrow as f64 != v && !(v.is_nan() && narrow.is_nan()) {
                    return Err(Error::invalid(format!(
                        "value {v} is not representable in 32-bit precision"
                    )));
                }
                out.extend_from_slice(&narrow.to_le_bytes());
            }
            Precision::F64 => out.extend_from_slice(&v.to_le_bytes()),
        }
    }
    Ok(())
}

/// Optimizer block of a version-2 checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerBlocks {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: FlatParams,
    pub precision: Precision,
    pub optimizer: Option<OptimizerBlocks>,
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let params = &ckpt.params;
    let layout = params.layout();
    let mut out = Vec::with_capacity(64 + params.len() * 8);
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&(if ckpt.optimizer.is_some() { 2u32 } else { 1u32 }).to_le_bytes());
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    out.extend_from_slice(&ckpt.precision.bits().to_le_bytes());
    out.extend_from_slice(&(layout.segments().len() as u32).to_le_bytes());
    for s in layout.segments() {
        out.extend_from_slice(&(s.name.len() as u32).to_le_bytes());
        out.extend_from_slice(s.name.as_bytes());
        out.extend_from_slice(&(s.offset as u64).to_le_bytes());
        out.extend_from_slice(&(s.len as u64).to_le_bytes());
        out.push(s.side.tag());
    }
    if let Some(opt) = &ckpt.optimizer {
        if opt.m.len() != params.len() || opt.v.len() != params.len() {
            return Err(Error::LengthMismatch {
                expected: params.len(),
                got: opt.m.len().min(opt.v.len()),
            });
        }
        out.extend_from_slice(&3u32.to_le_bytes());
        out.extend_from_slice(&opt.step.to_le_bytes());
    }
    push_values(&mut out, params.values(), ckpt.precision)?;
    if let Some(opt) = &ckpt.optimizer {
        push_values(&mut out, &opt.m, ckpt.precision)?;
        push_values(&mut out, &opt.v, ckpt.precision)?;
    }
    Ok(seal(out))
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let mut r = Reader::new(bytes, path);
    r.magic(CKPT_MAGIC)?;
    let version = r.u32()?;
    if version != 1 && version != 2 {
        return Err(Error::format(path, format!("unsupported checkpoint version {version}")));
    }
    let body = verified_body(bytes, path)?;
    let mut r = Reader::new(body, path);
    r.take(12)?;
    let d = r.usize()?;
    if d == 0 {
        return Err(Error::format(path, "checkpoint holds zero parameters"));
    }
    let bits = r.u32()?;
    let precision =
        Precision::from_bits(bits).ok_or_else(|| Error::format(path, format!("unknown precision tag {bits}")))?;
    let count = r.u32()? as usize;
    let mut segments = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::format(path, "segment name is not UTF-8"))?
            .to_string();
        let offset = r.usize()?;
        let len = r.usize()?;
        let side = Side::from_tag(r.u8()?).ok_or_else(|| Error::format(path, "unknown segment side"))?;
        segments.push(Segment {
            name,
            offset,
            len,
            side,
        });
    }
    let layout = Layout::new(segments).map_err(|e| Error::format(path, e.to_string()))?;
    if layout.total() != d {
        return Err(Error::format(
            path,
            format!("layout covers {} parameters, header says {d}", layout.total()),
        ));
    }
    let optimizer_step = if version == 2 {
        let blocks = r.u32()?;
        if blocks != 3 {
            return Err(Error::format(
                path,
                format!("expected 3 payload blocks, found {blocks}"),
            ));
        }
        Some(r.u64()?)
    } else {
        None
    };
    let values = r.values(d, precision)?;
    let optimizer = match optimizer_step {
        Some(step) => Some(OptimizerBlocks {
            step,
            m: r.values(d, precision)?,
            v: r.values(d, precision)?,
        }),
        None => None,
    };
    r.finish()?;
    Ok(Checkpoint {
        params: FlatParams::new(values, Arc::new(layout))?,
        precision,
        optimizer,
    })
}

/// Saves parameters at `precision`. Fails if `path` exists and `overwrite` is false.
pub fn save_checkpoint(params: &FlatParams, precision: Precision, path: &Path, overwrite: bool) -> Result<()> {
    let ckpt = Checkpoint {
        params: params.clone(),
        precision,
        optimizer: None,
    };
    write_atomic(path, &encode_checkpoint(&ckpt)?, overwrite)
}

pub fn save_full_checkpoint(ckpt: &Checkpoint, path: &Path, overwrite: bool) -> Result<()> {
    write_atomic(path, &encode_checkpoint(ckpt)?, overwrite)
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&read_all(path)?, path)
}

pub fn load_checkpoint(path: &Path) -> Result<FlatParams> {
    Ok(read_checkpoint(path)?.params)
}

pub fn encode_mask(mask: &Mask) -> Vec<u8> {
    let mut out = Vec::with_capacity(28 + mask.bytes().len());
    out.extend_from_slice(MASK_MAGIC);
    out.extend_from_slice(&1u32.to_le_bytes());
    out.extend_from_slice(&(mask.len() as u64).to_le_bytes());
    out.extend_from_slice(mask.bytes());
    seal(out)
}

pub fn decode_mask(bytes: &[u8], path: &Path) -> Result<Mask> {
    let mut r = Reader::new(bytes, path);
    r.magic(MASK_MAGIC)?;
    let version = r.u32()?;
    if version != 1 {
        return Err(Error::format(path, format!("unsupported mask version {version}")));
    }
    let body = verified_body(bytes, path)?;
    let mut r = Reader::new(body, path);
    r.take(12)?;
    let d = r.usize()?;
    let raw = r.take(d.div_ceil(8))?.to_vec();
    r.finish()?;
    Mask::from_bytes(raw, d).map_err(|e| Error::format(path, e.to_string()))
}

pub fn save_mask(mask: &Mask, path: &Path, overwrite: bool) -> Result<()> {
    write_atomic(path, &encode_mask(mask), overwrite)
}

pub fn load_mask(path: &Path) -> Result<Mask> {
    decode_mask(&read_all(path)?, path)
}

pub fn encode_split(split: &Split) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(24 + split.len() * (split.dim() * 4 + 4));
    out.extend_from_slice(DATA_MAGIC);
    out.extend_from_slice(&1u32.to_le_bytes());
    out.extend_from_slice(&(split.len() as u64).to_le_bytes());
    out.extend_from_slice(&(split.dim() as u32).to_le_bytes());
    push_values(&mut out, split.features(), Precision::F32)?;
    for l in split.labels() {
        out.extend_from_slice(&l.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_split(bytes: &[u8], path: &Path) -> Result<Split> {
    let mut r = Reader::new(bytes, path);
    r.magic(DATA_MAGIC)?;
    let version = r.u32()?;
    if version != 1 {
        return Err(Error::format(path, format!("unsupported split version {version}")));
    }
    let count = r.usize()?;
    let dim = r.u32()? as usize;
    let n = count
        .checked_mul(dim)
        .ok_or_else(|| Error::format(path, "size overflow"))?;
    let features = r.values(n, Precision::F32)?;
    let labels = (0..count).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
    r.finish()?;
    Split::new(dim, features, labels).map_err(|e| Error::format(path, e.to_string()))
}

fn join_labels(labels: &[u32]) -> String {
    labels.iter().map(u32::to_string).collect::<Vec<_>>().join(",")
}

fn parse_labels(s: &str, path: &Path) -> Result<Vec<u32>> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|t| {
            t.trim()
                .parse()
                .map_err(|_| Error::format(path, format!("bad label {t:?}")))
        })
        .collect()
}

/// Writes `manifest.txt` plus one `.bin` per split into `dir`.
/// `extra` entries (seeds, sizes) are appended to the manifest verbatim.
pub fn save_task(task: &Task, dir: &Path, extra: &[(String, String)], overwrite: bool) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = String::new();
    let mut entries: Vec<(String, String)> = vec![
        ("name".into(), task.name.clone()),
        ("classes".into(), join_labels(&task.classes)),
        ("base".into(), join_labels(&task.base)),
        ("new".into(), join_labels(&task.new)),
        ("dim".into(), task.test.dim().to_string()),
        ("train.count".into(), task.train.len().to_string()),
        ("test.count".into(), task.test.len().to_string()),
        (
            "shifts".into(),
            task.ood.iter().map(|(n, _)| n.as_str()).collect::<Vec<_>>().join(","),
        ),
    ];
    entries.extend(extra.iter().cloned());
    for (k, v) in &entries {
        manifest.push_str(&format!("{k}={v}\n"));
    }
    write_atomic(&dir.join("manifest.txt"), manifest.as_bytes(), overwrite)?;
    write_atomic(&dir.join("train.bin"), &encode_split(&task.train)?, overwrite)?;
    write_atomic(&dir.join("test.bin"), &encode_split(&task.test)?, overwrite)?;
    for (name, split) in &task.ood {
        write_atomic(&dir.join(format!("ood_{name}.bin")), &encode_split(split)?, overwrite)?;
    }
    Ok(())
}

pub fn load_task(dir: &Path) -> Result<Task> {
    let manifest_path = dir.join("manifest.txt");
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let mut get = std::collections::BTreeMap::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::format(&manifest_path, format!("expected key=value, got {line:?}")))?;
        get.insert(k.trim().to_string(), v.trim().to_string());
    }
    let field = |k: &str| {
        get.get(k)
            .cloned()
            .ok_or_else(|| Error::format(&manifest_path, format!("missing key {k}")))
    };
    let load = |file: String| -> Result<Split> {
        let p = dir.join(file);
        decode_split(&read_all(&p)?, &p)
    };
    let shifts = field("shifts")?;
    let ood = shifts
        .split(',')
        .filter(|s| !s.is_empty())
        .map(|name| Ok((name.to_string(), load(format!("ood_{name}.bin"))?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(Task {
        name: field("name")?,
        classes: parse_labels(&field("classes")?, &manifest_path)?,
        base: parse_labels(&field("base")?, &manifest_path)?,
        new: parse_labels(&field("new")?, &manifest_path)?,
        train: load("train.bin".into())?,
        test: load("test.bin".into())?,
        ood,
    })
}

/// Appends one JSON line. Records must carry a config hash and metrics.
pub fn append_run_log(record: &RunRecord, path: &Path) -> Result<()> {
    if record.metrics.is_empty() {
        return Err(Error::invalid("run record has no metrics"));
    }
    if record.config_hash.is_empty() {
        return Err(Error::invalid("run record has no config hash"));
    }
    let mut line = serde_json::to_string(record).map_err(|e| Error::invalid(e.to_string()))?;
    line.push('\n');
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    f.write_all(line.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Reads every complete record. An unterminated final line (an interrupted
/// append) is ignored.
pub fn read_run_log(path: &Path) -> Result<Vec<RunRecord>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    let mut reader = BufReader::new(f);
    let mut line = String::new();
    loop {
        line.clear();
        let n = reader.read_line(&mut line).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            break;
        }
        if !line.ends_with('\n') {
            break;
        }
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(line.trim_end()).map_err(|e| Error::format(path, e.to_string()))?;
        out.push(rec);
    }
    Ok(out)
}

/// `dir/name`, creating `dir` if needed.
pub fn artifact_path(dir: &Path, name: &str) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    Ok(dir.join(name))
}
