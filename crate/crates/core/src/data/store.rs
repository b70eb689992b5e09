//! On-disk datasets: `<stem>.blob` holds every image as raw little-endian
//! `f32` in height-width-channel order; `<stem>.manifest` describes it.
//!
//! ```text
//! # fedroam-dataset v1 name=S0 split=train blob=S0.blob shape=64x64x3 items=2
//! 0,0,blocked,S0,sim
//! 1,49152,free,S0,sim
//! checksum,crc32,0x1a2b3c4d
//! ```

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use super::{
    DataError, Dataset, Domain, Label, LabeledImage, Split, CHANNELS, IMAGE_LEN, IMAGE_SIZE,
};
use crate::Tensor;

const HEADER_TAG: &str = "# fedroam-dataset v1";
const IMAGE_BYTES: u64 = (IMAGE_LEN * 4) as u64;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn manifest_path(path: &Path) -> PathBuf {
    if path.extension().is_some_and(|e| e == "manifest") {
        path.to_path_buf()
    } else {
        let mut s = path.as_os_str().to_owned();
        s.push(".manifest");
        PathBuf::from(s)
    }
}

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), DataError> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    let mut f = fs::File::create(&tmp).map_err(io_err(&tmp))?;
    f.write_all(bytes).map_err(io_err(&tmp))?;
    f.sync_all().map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

/// Saves `d` under `dir` using [`Dataset::file_stem`]; returns the manifest
/// path.
pub fn save_dataset(d: &Dataset, dir: &Path) -> Result<PathBuf, DataError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let stem = d.file_stem();
    let blob_name = format!("{stem}.blob");
    let mut blob = Vec::with_capacity(d.len() * IMAGE_BYTES as usize);
    let mut manifest = format!(
        "{HEADER_TAG} name={} split={} blob={blob_name} shape={IMAGE_SIZE}x{IMAGE_SIZE}x{CHANNELS} items={}\n",
        d.name(),
        d.split(),
        d.len()
    );
    for (i, it) in d.items().iter().enumerate() {
        manifest.push_str(&format!(
            "{i},{},{},{},{}\n",
            blob.len(),
            it.label.as_str(),
            it.env_id,
            it.domain
        ));
        for v in it.pixels.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    manifest.push_str(&format!(
        "checksum,crc32,{:#010x}\n",
        crc32fast::hash(&blob)
    ));
    write_atomic(&dir.join(&blob_name), &blob)?;
    let mpath = dir.join(format!("{stem}.manifest"));
    write_atomic(&mpath, manifest.as_bytes())?;
    Ok(mpath)
}

struct Record {
    offset: u64,
    label: Label,
    env_id: String,
    domain: Domain,
}

fn header_field<'a>(header: &'a str, key: &str) -> Result<&'a str, DataError> {
    header
        .split_whitespace()
        .find_map(|kv| kv.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
        .ok_or_else(|| DataError::Malformed {
            line: 1,
            msg: format!("header lacks {key}="),
        })
}

/// Loads a dataset from its manifest; `path` may name the manifest or its
/// stem.
pub fn load_dataset(path: &Path) -> Result<Dataset, DataError> {
    let mpath = manifest_path(path);
    let text = match fs::read_to_string(&mpath) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(DataError::MissingManifest(mpath.display().to_string()))
        }
        Err(e) => return Err(io_err(&mpath)(e)),
    };
    let malformed = |line: usize, msg: &str| DataError::Malformed {
        line,
        msg: msg.to_string(),
    };
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| malformed(1, "empty manifest"))?;
    if !header.starts_with(HEADER_TAG) {
        return Err(malformed(1, "missing fedroam-dataset v1 header"));
    }
    let name = header_field(header, "name")?.to_string();
    let split: Split = header_field(header, "split")?
        .parse()
        .map_err(|_| malformed(1, "bad split"))?;
    let blob_name = header_field(header, "blob")?;
    if blob_name.contains(['/', '\\']) {
        return Err(malformed(1, "blob must be a bare file name"));
    }
    if header_field(header, "shape")? != format!("{IMAGE_SIZE}x{IMAGE_SIZE}x{CHANNELS}") {
        return Err(malformed(1, "unsupported image shape"));
    }
    let items: usize = header_field(header, "items")?
        .parse()
        .map_err(|_| malformed(1, "bad item count"))?;

    let mut records = Vec::with_capacity(items);
    let mut checksum = None;
    for (k, line) in lines.enumerate() {
        let lineno = k + 2;
        let fields: Vec<&str> = line.split(',').collect();
        if checksum.is_some() {
            return Err(malformed(lineno, "content after checksum line"));
        }
        if fields.first() == Some(&"checksum") {
            if fields.len() != 3 || fields[1] != "crc32" {
                return Err(malformed(
                    lineno,
                    "checksum line must be checksum,crc32,0x...",
                ));
            }
            let hex = fields[2]
                .strip_prefix("0x")
                .ok_or_else(|| malformed(lineno, "checksum lacks 0x"))?;
            checksum = Some(
                u32::from_str_radix(hex, 16).map_err(|_| malformed(lineno, "bad checksum hex"))?,
            );
            continue;
        }
        let [index, offset, label, env_id, domain] = fields[..] else {
            return Err(malformed(
                lineno,
                "expected index,offset,label,env_id,domain",
            ));
        };
        if index.parse::<usize>().ok() != Some(records.len()) {
            return Err(malformed(lineno, "indices must count up from 0"));
        }
        let offset: u64 = offset
            .parse()
            .map_err(|_| malformed(lineno, "bad offset"))?;
        if offset % 4 != 0 {
            return Err(malformed(lineno, "offset not f32-aligned"));
        }
        records.push(Record {
            offset,
            label: label.parse().map_err(|_| malformed(lineno, "bad label"))?,
            env_id: env_id.to_string(),
            domain: domain
                .parse()
                .map_err(|_| malformed(lineno, "bad domain"))?,
        });
    }
    let expected =
        checksum.ok_or_else(|| malformed(text.lines().count(), "missing checksum line"))?;
    if records.len() != items {
        return Err(malformed(1, "item count disagrees with records"));
    }

    let bpath = mpath.with_file_name(blob_name);
    let blob = match fs::read(&bpath) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(DataError::MissingBlob(bpath.display().to_string()))
        }
        Err(e) => return Err(io_err(&bpath)(e)),
    };
    let need = records
        .iter()
        .map(|r| r.offset + IMAGE_BYTES)
        .max()
        .unwrap_or(0);
    if (blob.len() as u64) < need {
        return Err(DataError::TruncatedBlob {
            expected: need,
            actual: blob.len() as u64,
        });
    }
    let actual = crc32fast::hash(&blob);
    if actual != expected {
        return Err(DataError::ChecksumMismatch { expected, actual });
    }

    let images = records
        .into_iter()
        .map(|r| {
            let bytes = &blob[r.offset as usize..(r.offset + IMAGE_BYTES) as usize];
            let px: Vec<f32> = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let t = Tensor::new(vec![IMAGE_SIZE, IMAGE_SIZE, CHANNELS], px).expect("image shape");
            LabeledImage::new(t, r.label, r.env_id, r.domain)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Dataset::new(name, images, split)
}
