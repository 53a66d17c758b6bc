//! On-disk formats.
//!
//! An embedding file is a raw payload of little-endian `f32` values in
//! row-major order, exactly `n * d * 4` bytes, next to a JSON sidecar at
//! `<payload>.json`:
//!
//! ```json
//! { "n": 2, "d": 3, "precision": "f32", "normalized": true, "row_ids": ["a", "b"] }
//! ```
//!
//! Metadata is CSV with the header `image_id,tracklet_id,identity_id,camera_id`;
//! the last two columns may be absent or empty. A submission has one line per
//! query listing the gallery ids of its top ranks, separated by single spaces.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::embedding::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::meta::{CatalogMeta, MetaRecord};
use crate::rank::{RankList, Ranked};

pub const PRECISION_F32: &str = "f32";
pub const SUBMISSION_DEPTH: usize = 100;
const META_COLUMNS: [&str; 4] = ["image_id", "tracklet_id", "identity_id", "camera_id"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingHeader {
    pub n: usize,
    pub d: usize,
    pub precision: String,
    pub normalized: bool,
    pub row_ids: Vec<String>,
}

pub fn sidecar_path(payload: &Path) -> PathBuf {
    let mut s = payload.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Writes `bytes` to a temporary file in the target directory, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

/// Pretty JSON with a trailing newline.
pub fn to_json_pretty<T: Serialize>(value: &T) -> Vec<u8> {
    let mut b = serde_json::to_vec_pretty(value).expect("value serializes to JSON");
    b.push(b'\n');
    b
}

pub(crate) fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Values are stored as `f32`; a matrix whose entries are all `f32`-exact
/// round-trips bit for bit.
pub fn save_embeddings(m: &EmbeddingMatrix, path: &Path) -> Result<()> {
    let header = EmbeddingHeader {
        n: m.n_rows(),
        d: m.dim(),
        precision: PRECISION_F32.into(),
        normalized: m.is_normalized(),
        row_ids: m.row_ids().to_vec(),
    };
    let mut payload = Vec::with_capacity(m.as_slice().len() * 4);
    for &x in m.as_slice() {
        payload.extend_from_slice(&(x as f32).to_le_bytes());
    }
    write_atomic(path, &payload)?;
    write_atomic(&sidecar_path(path), &to_json_pretty(&header))
}

pub fn load_embeddings(path: &Path) -> Result<EmbeddingMatrix> {
    let side = sidecar_path(path);
    let header: EmbeddingHeader = serde_json::from_slice(&read(&side)?)
        .map_err(|e| Error::MalformedHeader(format!("{}: {e}", side.display())))?;
    if header.precision != PRECISION_F32 {
        return Err(Error::MalformedHeader(format!(
            "unsupported precision `{}`",
            header.precision
        )));
    }
    if header.d == 0 {
        return Err(Error::MalformedHeader("d must be >= 1".into()));
    }
    if header.row_ids.len() != header.n {
        return Err(Error::MalformedHeader(format!(
            "{} row ids for n = {}",
            header.row_ids.len(),
            header.n
        )));
    }
    let mut seen = std::collections::HashSet::with_capacity(header.n);
    if let Some(dup) = header.row_ids.iter().find(|id| !seen.insert(id.as_str())) {
        return Err(Error::DuplicateId(dup.clone()));
    }
    let payload = read(path)?;
    let expected = header
        .n
        .checked_mul(header.d)
        .and_then(|x| x.checked_mul(4))
        .ok_or_else(|| Error::MalformedHeader("n * d overflows".into()))?;
    if payload.len() != expected {
        return Err(Error::LengthMismatch {
            expected,
            found: payload.len(),
        });
    }
    let data = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    let m = EmbeddingMatrix::new(data, header.d, header.row_ids)?;
    if header.normalized && !m.is_normalized() {
        return Err(m.require_normalized().unwrap_err());
    }
    Ok(m)
}

pub fn save_metadata(meta: &CatalogMeta, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::Metadata(e.to_string());
    w.write_record(META_COLUMNS).map_err(csv_err)?;
    for r in meta.records() {
        w.write_record([
            r.image_id.as_str(),
            r.tracklet_id.as_str(),
            r.identity_id.as_deref().unwrap_or(""),
            r.camera_id.as_deref().unwrap_or(""),
        ])
        .map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Metadata(e.to_string()))?;
    write_atomic(path, &bytes)
}

pub fn load_metadata(path: &Path) -> Result<CatalogMeta> {
    let bytes = read(path)?;
    let mut r = csv::Reader::from_reader(bytes.as_slice());
    let headers = r
        .headers()
        .map_err(|e| Error::Metadata(format!("{}: {e}", path.display())))?
        .clone();
    for required in &META_COLUMNS[..2] {
        if !headers.iter().any(|h| h == *required) {
            return Err(Error::Metadata(format!(
                "{}: missing column `{required}`",
                path.display()
            )));
        }
    }
    let records = r
        .deserialize::<MetaRecord>()
        .map(|rec| {
            rec.map(|mut m| {
                m.identity_id = m.identity_id.filter(|s| !s.is_empty());
                m.camera_id = m.camera_id.filter(|s| !s.is_empty());
                m
            })
            .map_err(|e| Error::Metadata(format!("{}: {e}", path.display())))
        })
        .collect::<Result<Vec<_>>>()?;
    CatalogMeta::new(records)
}

/// Submission text for `ranks`, truncated to the top [`SUBMISSION_DEPTH`].
pub fn submission_text(ranks: &RankList, gallery_ids: &[String]) -> Result<String> {
    if ranks.n_gallery() != gallery_ids.len() {
        return Err(Error::DimensionMismatch {
            expected: ranks.n_gallery(),
            found: gallery_ids.len(),
        });
    }
    let mut out = String::new();
    for list in ranks.lists() {
        let line: Vec<&str> = list
            .iter()
            .take(SUBMISSION_DEPTH)
            .map(|r| gallery_ids[r.index].as_str())
            .collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    Ok(out)
}

pub fn emit_submission(ranks: &RankList, gallery_ids: &[String], path: &Path) -> Result<()> {
    write_atomic(path, submission_text(ranks, gallery_ids)?.as_bytes())
}

/// Parses a submission back into ranks over `gallery_ids`; scores are
/// negated positions.
pub fn load_submission(path: &Path, gallery_ids: &[String]) -> Result<RankList> {
    let text = String::from_utf8(read(path)?).map_err(|e| Error::Metadata(format!("{}: {e}", path.display())))?;
    let index: HashMap<&str, usize> = gallery_ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let mut lists = Vec::new();
    for (line_no, line) in text.lines().enumerate() {
        let mut list = Vec::new();
        for (pos, id) in line.split_whitespace().enumerate() {
            let &idx = index
                .get(id)
                .ok_or_else(|| Error::Metadata(format!("line {}: unknown gallery id `{id}`", line_no + 1)))?;
            list.push(Ranked {
                index: idx,
                score: -(pos as f64),
            });
        }
        lists.push(list);
    }
    RankList::new(lists, gallery_ids.len()).map_err(|e| Error::Metadata(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("img{i}")).collect()
    }

    #[test]
    fn embedding_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.f32");
        let m = EmbeddingMatrix::new(vec![0.5, -1.25, 3.0, 0.0, 1e-3f32 as f64, 7.0], 3, ids(2)).unwrap();
        save_embeddings(&m, &path).unwrap();
        let back = load_embeddings(&path).unwrap();
        assert_eq!(back, m);
        assert_eq!(fs::metadata(&path).unwrap().len(), 24);
    }

    #[test]
    fn header_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.f32");
        let write_header = |h: &str| fs::write(sidecar_path(&path), h).unwrap();

        fs::write(&path, [0u8; 20]).unwrap();
        write_header(r#"{"n":2,"d":3,"precision":"f32","normalized":false,"row_ids":["a","b"]}"#);
        assert!(matches!(
            load_embeddings(&path),
            Err(Error::LengthMismatch {
                expected: 24,
                found: 20
            })
        ));

        fs::write(&path, [0u8; 24]).unwrap();
        write_header(r#"{"n":2,"d":3,"precision":"f32","normalized":false,"row_ids":["a","a"]}"#);
        assert!(matches!(load_embeddings(&path), Err(Error::DuplicateId(id)) if id == "a"));

        write_header(r#"{"n":2,"d":3,"precision":"f16","normalized":false,"row_ids":["a","b"]}"#);
        assert!(matches!(load_embeddings(&path), Err(Error::MalformedHeader(_))));
        write_header(r#"{"n":3,"d":3,"precision":"f32","normalized":false,"row_ids":["a","b"]}"#);
        assert!(matches!(load_embeddings(&path), Err(Error::MalformedHeader(_))));
        write_header("not json");
        assert!(matches!(load_embeddings(&path), Err(Error::MalformedHeader(_))));

        write_header(r#"{"n":2,"d":3,"precision":"f32","normalized":true,"row_ids":["a","b"]}"#);
        assert!(matches!(
            load_embeddings(&path),
            Err(Error::ZeroRow { .. } | Error::NotNormalized { .. })
        ));

        let missing = dir.path().join("missing.f32");
        assert_eq!(load_embeddings(&missing).unwrap_err().exit_code(), 2);
    }

    #[test]
    fn metadata_round_trip_and_optional_columns() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        fs::write(&path, "image_id,tracklet_id\na,t1\nb,t1\n").unwrap();
        let meta = load_metadata(&path).unwrap();
        assert_eq!(meta.records()[1].tracklet_id, "t1");
        assert!(!meta.has_identities());

        save_metadata(&meta, &path).unwrap();
        assert_eq!(
            fs::read_to_string(&path).unwrap(),
            "image_id,tracklet_id,identity_id,camera_id\na,t1,,\nb,t1,,\n"
        );
        let again = load_metadata(&path).unwrap();
        assert_eq!(again, meta);

        fs::write(&path, "image_id,identity_id\na,x\n").unwrap();
        assert!(matches!(load_metadata(&path), Err(Error::Metadata(_))));
    }

    #[test]
    fn submission_examples() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.txt");
        let g: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        let r = RankList::new(
            vec![vec![
                Ranked { index: 1, score: 0.9 },
                Ranked { index: 0, score: 0.5 },
                Ranked { index: 2, score: 0.1 },
            ]],
            3,
        )
        .unwrap();
        emit_submission(&r, &g, &path).unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap(), "b a c\n");
        assert_eq!(load_submission(&path, &g).unwrap().indices(0), vec![1, 0, 2]);

        let empty = RankList::new(vec![], 3).unwrap();
        emit_submission(&empty, &g, &path).unwrap();
        assert_eq!(fs::read(&path).unwrap(), b"");

        let big_ids = ids(150);
        let list = (0..150)
            .map(|i| Ranked {
                index: i,
                score: -(i as f64),
            })
            .collect();
        let big = RankList::new(vec![list], 150).unwrap();
        let text = submission_text(&big, &big_ids).unwrap();
        assert_eq!(text.trim_end().split(' ').count(), 100);
    }
}
