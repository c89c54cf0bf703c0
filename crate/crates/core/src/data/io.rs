//! On-disk layout of a dataset directory:
//!
//! ```text
//! annotated.cdat  annotated.txt  annotated.labels
//! alttext.cdat    alttext.txt    alttext.labels
//! classes.txt     vocab.txt      manifest.txt
//! ```
//!
//! `.cdat` is a little-endian header (`CDAT`, version, count, H, W, C as
//! u32) followed by `count*H*W*C` f32 values.

use std::fs;
use std::path::{Path, PathBuf};

use super::synthetic::{ClassInfo, SyntheticData};
use super::{Dataset, Vocab};
use crate::error::{io_err, Error, Result};

const MAGIC: &[u8; 4] = b"CDAT";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 24;

pub fn write_cdat(path: &Path, ds: &Dataset) -> Result<()> {
    let mut buf = Vec::with_capacity(HEADER_LEN + ds.pixels().len() * 4);
    buf.extend_from_slice(MAGIC);
    for v in [
        VERSION,
        ds.len() as u32,
        ds.height as u32,
        ds.width as u32,
        ds.channels as u32,
    ] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for &p in ds.pixels() {
        buf.extend_from_slice(&p.to_le_bytes());
    }
    fs::write(path, buf).map_err(io_err(path))
}

/// Returns `(count, [H, W, C], pixels)`.
pub fn read_cdat(path: &Path) -> Result<(usize, [usize; 3], Vec<f32>)> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let bad = |msg: String| Error::Format(format!("{}: {msg}", path.display()));
    if bytes.len() < HEADER_LEN || &bytes[..4] != MAGIC {
        return Err(bad("not a CDAT file".into()));
    }
    let word =
        |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    if word(0) != VERSION as usize {
        return Err(bad(format!("unsupported version {}", word(0))));
    }
    let (count, h, w, c) = (word(1), word(2), word(3), word(4));
    let expected = count
        .checked_mul(h * w * c)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| bad("header overflows".into()))?;
    if bytes.len() - HEADER_LEN != expected {
        return Err(bad(format!(
            "payload is {} bytes, header implies {expected}",
            bytes.len() - HEADER_LEN
        )));
    }
    let pixels = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Ok((count, [h, w, c], pixels))
}

fn with_ext(stem: &Path, ext: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

fn write_lines(path: &Path, lines: impl Iterator<Item = String>) -> Result<()> {
    let body: String = lines.map(|l| l + "\n").collect();
    fs::write(path, body).map_err(io_err(path))
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let body = fs::read_to_string(path).map_err(io_err(path))?;
    Ok(body.lines().map(str::to_string).collect())
}

/// Writes `<stem>.cdat`, `<stem>.txt` and, when labels exist, `<stem>.labels`.
pub fn write_dataset(stem: &Path, ds: &Dataset) -> Result<()> {
    write_cdat(&with_ext(stem, "cdat"), ds)?;
    write_lines(&with_ext(stem, "txt"), ds.captions.iter().cloned())?;
    if !ds.labels.is_empty() {
        write_lines(
            &with_ext(stem, "labels"),
            ds.labels.iter().map(|l| l.join(",")),
        )?;
    }
    Ok(())
}

pub fn read_dataset(stem: &Path) -> Result<Dataset> {
    let (count, [h, w, c], pixels) = read_cdat(&with_ext(stem, "cdat"))?;
    let captions = read_lines(&with_ext(stem, "txt"))?;
    if captions.len() != count {
        return Err(Error::Format(format!(
            "{} captions for {count} images",
            captions.len()
        )));
    }
    let labels_path = with_ext(stem, "labels");
    let labels = if labels_path.exists() {
        read_lines(&labels_path)?
            .into_iter()
            .map(|l| {
                l.split(',')
                    .map(|s| s.trim().to_string())
                    .filter(|s| !s.is_empty())
                    .collect()
            })
            .collect()
    } else {
        Vec::new()
    };
    Dataset::from_parts(h, w, c, pixels, captions, labels)
}

/// A generated dataset together with its vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct DataDir {
    pub data: SyntheticData,
    pub vocab: Vocab,
}

impl DataDir {
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        write_dataset(&dir.join("annotated"), &self.data.annotated)?;
        write_dataset(&dir.join("alttext"), &self.data.alt_text)?;
        write_lines(
            &dir.join("classes.txt"),
            self.data
                .classes
                .iter()
                .map(|c| format!("{} {}", c.name, c.supercategory)),
        )?;
        self.vocab.save(&dir.join("vocab.txt"))?;
        let manifest = self
            .data
            .train
            .iter()
            .map(|i| format!("train {i}"))
            .chain(self.data.test.iter().map(|i| format!("test {i}")));
        write_lines(&dir.join("manifest.txt"), manifest)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let annotated = read_dataset(&dir.join("annotated"))?;
        let alt_text = read_dataset(&dir.join("alttext"))?;
        if annotated.len() != alt_text.len()
            || (annotated.height, annotated.width, annotated.channels)
                != (alt_text.height, alt_text.width, alt_text.channels)
        {
            return Err(Error::Format(
                "annotated and alt-text sources disagree in size".into(),
            ));
        }
        let classes = read_lines(&dir.join("classes.txt"))?
            .iter()
            .map(|l| match l.split_once(' ') {
                Some((name, sup)) => Ok(ClassInfo {
                    name: name.to_string(),
                    supercategory: sup.to_string(),
                }),
                None => Err(Error::Format(format!("classes.txt: bad line {l:?}"))),
            })
            .collect::<Result<Vec<_>>>()?;
        let (mut train, mut test) = (Vec::new(), Vec::new());
        for line in read_lines(&dir.join("manifest.txt"))? {
            let (split, id) = line
                .split_once(' ')
                .ok_or_else(|| Error::Format(format!("manifest: bad line {line:?}")))?;
            let id: usize = id
                .parse()
                .map_err(|_| Error::Format(format!("manifest: bad id {id:?}")))?;
            if id >= annotated.len() {
                return Err(Error::Format(format!("manifest: id {id} out of range")));
            }
            match split {
                "train" => train.push(id),
                "test" => test.push(id),
                other => return Err(Error::Format(format!("manifest: unknown split {other:?}"))),
            }
        }
        let vocab = Vocab::load(&dir.join("vocab.txt"))?;
        Ok(Self {
            data: SyntheticData {
                classes,
                annotated,
                alt_text,
                train,
                test,
            },
            vocab,
        })
    }
}
