//! On-disk dataset layout.
//!
//! One directory per split:
//!
//! * `manifest.tsv`: header `id\tframes\ttranscript`, then one row per
//!   utterance. Unlabeled rows carry `-` as transcript.
//! * `features.bin`: magic `IMPLFEAT`, version `u32`, feature dim `u32`,
//!   utterance count `u32`, then every utterance's `frames x dim` values as
//!   little-endian `f64`, concatenated in manifest order.
//! * `truth.tsv` (unlabeled only): `id\ttranscript` rows, read only by
//!   evaluation code.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{DataError, Dataset, Role, SealedTruth, Utterance};
use crate::nn::Matrix;

pub const FEATURE_MAGIC: &[u8; 8] = b"IMPLFEAT";
pub const FEATURE_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.tsv";
pub const FEATURES: &str = "features.bin";
pub const TRUTH: &str = "truth.tsv";

fn format_err(path: &Path, msg: impl std::fmt::Display) -> DataError {
    DataError::Format(format!("{}: {msg}", path.display()))
}

pub fn write_dataset(dir: &Path, ds: &Dataset, truth: Option<&SealedTruth>) -> Result<(), DataError> {
    fs::create_dir_all(dir)?;
    let mut manifest = String::from("id\tframes\ttranscript\n");
    for u in &ds.utterances {
        let text = u.transcript.as_deref().unwrap_or("-");
        manifest.push_str(&format!("{}\t{}\t{}\n", u.id, u.frames(), text));
    }
    fs::write(dir.join(MANIFEST), manifest)?;

    let mut w = BufWriter::new(fs::File::create(dir.join(FEATURES))?);
    w.write_all(FEATURE_MAGIC)?;
    w.write_all(&FEATURE_VERSION.to_le_bytes())?;
    w.write_all(&(ds.feature_dim as u32).to_le_bytes())?;
    w.write_all(&(ds.len() as u32).to_le_bytes())?;
    for u in &ds.utterances {
        for v in u.features.as_slice() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;

    if let Some(truth) = truth {
        let mut s = String::new();
        for (id, text) in truth.iter() {
            s.push_str(&format!("{id}\t{text}\n"));
        }
        fs::write(dir.join(TRUTH), s)?;
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_dataset(dir: &Path, role: Role) -> Result<Dataset, DataError> {
    let mpath = dir.join(MANIFEST);
    let manifest = fs::read_to_string(&mpath)?;
    let mut lines = manifest.lines();
    if lines.next() != Some("id\tframes\ttranscript") {
        return Err(format_err(&mpath, "missing or malformed header"));
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let cols: Vec<&str> = line.split('\t').collect();
        let [id, frames, text] = cols.as_slice() else {
            return Err(format_err(&mpath, format!("line {}: expected 3 columns", i + 2)));
        };
        let frames: usize = frames
            .parse()
            .map_err(|_| format_err(&mpath, format!("line {}: bad frame count", i + 2)))?;
        let text = (*text != "-").then(|| text.to_string());
        rows.push((id.to_string(), frames, text));
    }

    let fpath = dir.join(FEATURES);
    let mut r = BufReader::new(fs::File::open(&fpath)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != FEATURE_MAGIC {
        return Err(format_err(&fpath, "bad magic"));
    }
    let version = read_u32(&mut r)?;
    if version != FEATURE_VERSION {
        return Err(format_err(&fpath, format!("unsupported version {version}")));
    }
    let dim = read_u32(&mut r)? as usize;
    let count = read_u32(&mut r)? as usize;
    if count != rows.len() {
        return Err(format_err(&fpath, format!("{count} utterances but manifest has {}", rows.len())));
    }
    let mut utterances = Vec::with_capacity(count);
    let mut buf = [0u8; 8];
    for (id, frames, transcript) in rows {
        let mut data = Vec::with_capacity(frames * dim);
        for _ in 0..frames * dim {
            r.read_exact(&mut buf)
                .map_err(|_| format_err(&fpath, "truncated feature data"))?;
            data.push(f64::from_le_bytes(buf));
        }
        utterances.push(Utterance {
            id,
            features: Matrix::from_vec(frames, dim, data),
            transcript,
        });
    }
    if r.read(&mut buf)? != 0 {
        return Err(format_err(&fpath, "trailing bytes"));
    }
    Ok(Dataset {
        role,
        feature_dim: dim,
        utterances,
    })
}

pub fn read_truth(dir: &Path) -> Result<SealedTruth, DataError> {
    let path = dir.join(TRUTH);
    let text = fs::read_to_string(&path)?;
    let mut map = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let (id, t) = line
            .split_once('\t')
            .ok_or_else(|| format_err(&path, format!("line {}: expected 2 columns", i + 1)))?;
        map.insert(id.to_string(), t.to_string());
    }
    Ok(SealedTruth::new(map))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_corpus, CorpusConfig, SplitCounts};

    #[test]
    fn round_trip_is_exact() {
        let counts = SplitCounts {
            labeled: 4,
            unlabeled: 3,
            dev: 2,
            test: 2,
        };
        let c = generate_corpus(&CorpusConfig::default(), counts).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&dir.path().join("lab"), &c.labeled, None).unwrap();
        write_dataset(&dir.path().join("unl"), &c.unlabeled, Some(&c.unlabeled_truth)).unwrap();
        assert_eq!(read_dataset(&dir.path().join("lab"), Role::Labeled).unwrap(), c.labeled);
        assert_eq!(read_dataset(&dir.path().join("unl"), Role::Unlabeled).unwrap(), c.unlabeled);
        assert_eq!(read_truth(&dir.path().join("unl")).unwrap(), c.unlabeled_truth);
    }

    #[test]
    fn truncated_features_are_rejected() {
        let counts = SplitCounts {
            labeled: 2,
            unlabeled: 1,
            dev: 1,
            test: 1,
        };
        let c = generate_corpus(&CorpusConfig::default(), counts).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &c.labeled, None).unwrap();
        let f = dir.path().join(FEATURES);
        let bytes = fs::read(&f).unwrap();
        fs::write(&f, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(read_dataset(dir.path(), Role::Labeled), Err(DataError::Format(_))));
    }
}
