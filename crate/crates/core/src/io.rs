//! On-disk formats.
//!
//! * Feature CSV: header `id,camera,f0,f1,...`, camera may be empty.
//! * Feature binary, little-endian: `DCDS`, version `u32 = 1`, count `u32`,
//!   dim `u32`, then per item an id (`u16` length + UTF-8 bytes), camera
//!   `i32` (`-1` when absent) and `dim` × `f32`.
//! * Verification scores: either one JSON object `{"S": [[..]], "D": [[..]]}`
//!   or two CSV matrices `<stem>_s.csv` and `<stem>_d.csv`.
//! * Rankings: JSON lines `{"probe": i, "order": [...], "scores": [...]}`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::affinity::FeatureVector;
use crate::dataset::GalleryIndex;
use crate::error::{Error, Result};
use crate::rerank::{RankedList, VerificationScores};

pub const MAGIC: &[u8; 4] = b"DCDS";
pub const FORMAT_VERSION: u32 = 1;

fn parse_err(path: &Path, line: u64, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| Error::io(path, e))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

/// Full round-trip decimal text for an `f64`.
fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn load_features_csv(path: &Path) -> Result<GalleryIndex> {
    let mut reader = csv::ReaderBuilder::new()
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(open(path)?);
    let headers = reader
        .headers()
        .map_err(|e| parse_err(path, 1, e.to_string()))?
        .clone();
    if headers.len() < 3 || &headers[0] != "id" || &headers[1] != "camera" {
        return Err(parse_err(path, 1, "header must start with `id,camera,f0`"));
    }
    let dim = headers.len() - 2;
    let mut items = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            parse_err(path, line, e.to_string())
        })?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        if record.len() != dim + 2 {
            return Err(parse_err(
                path,
                line,
                format!("expected {} fields, found {}", dim + 2, record.len()),
            ));
        }
        let id = record[0].to_string();
        if id.is_empty() {
            return Err(parse_err(path, line, "empty id"));
        }
        let camera = match &record[1] {
            "" => None,
            c => Some(
                c.parse::<u32>()
                    .map_err(|_| parse_err(path, line, format!("bad camera `{c}`")))?,
            ),
        };
        let mut values = Vec::with_capacity(dim);
        for (k, field) in record.iter().skip(2).enumerate() {
            let v: f64 = field
                .parse()
                .map_err(|_| parse_err(path, line, format!("f{k}: `{field}` is not a number")))?;
            if !v.is_finite() {
                return Err(parse_err(path, line, format!("f{k}: non-finite value `{field}`")));
            }
            values.push(v);
        }
        items.push(FeatureVector::new(id, camera, values));
    }
    if items.is_empty() {
        return Err(Error::EmptyDataset);
    }
    GalleryIndex::new(items)
}

pub fn write_features_csv(path: &Path, index: &GalleryIndex) -> Result<()> {
    let mut out = create(path)?;
    let io = |e| Error::io(path, e);
    let mut header = String::from("id,camera");
    for k in 0..index.dim() {
        header.push_str(&format!(",f{k}"));
    }
    writeln!(out, "{header}").map_err(io)?;
    for f in &index.items {
        let camera = f.camera.map(|c| c.to_string()).unwrap_or_default();
        let mut line = format!("{},{}", csv_escape(&f.id), camera);
        for v in &f.values {
            line.push(',');
            line.push_str(&fmt_f64(*v));
        }
        writeln!(out, "{line}").map_err(io)?;
    }
    out.flush().map_err(io)
}

fn csv_escape(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn write_features_bin(path: &Path, index: &GalleryIndex) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let count = u32::try_from(index.len())
        .map_err(|_| Error::InvalidArgument("too many items for the binary format".into()))?;
    buf.extend_from_slice(&count.to_le_bytes());
    buf.extend_from_slice(&(index.dim() as u32).to_le_bytes());
    for f in &index.items {
        let id = f.id.as_bytes();
        let len = u16::try_from(id.len())
            .map_err(|_| Error::InvalidArgument(format!("id `{}` too long", f.id)))?;
        buf.extend_from_slice(&len.to_le_bytes());
        buf.extend_from_slice(id);
        let camera = match f.camera {
            None => -1i32,
            Some(c) => i32::try_from(c)
                .map_err(|_| Error::InvalidArgument(format!("camera {c} out of range")))?,
        };
        buf.extend_from_slice(&camera.to_le_bytes());
        for &v in &f.values {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let mut out = create(path)?;
    out.write_all(&buf).map_err(|e| Error::io(path, e))?;
    out.flush().map_err(|e| Error::io(path, e))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(Error::Truncated(what))?;
        let slice = self.bytes.get(self.pos..end).ok_or(Error::Truncated(what))?;
        self.pos = end;
        Ok(slice)
    }

    fn array<const N: usize>(&mut self, what: &'static str) -> Result<[u8; N]> {
        Ok(self.take(N, what)?.try_into().expect("slice length checked"))
    }
}

pub fn load_features_bin(path: &Path) -> Result<GalleryIndex> {
    let mut bytes = Vec::new();
    open(path)?
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    decode_features_bin(&bytes)
}

pub fn decode_features_bin(bytes: &[u8]) -> Result<GalleryIndex> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4, "magic").map_err(|_| Error::BadMagic)? != MAGIC {
        return Err(Error::BadMagic);
    }
    let version = u32::from_le_bytes(c.array("version")?);
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch(version));
    }
    let count = u32::from_le_bytes(c.array("count")?) as usize;
    let dim = u32::from_le_bytes(c.array("dim")?) as usize;
    if count == 0 {
        return Err(Error::EmptyDataset);
    }
    let mut items = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let len = u16::from_le_bytes(c.array("id length")?) as usize;
        let id = std::str::from_utf8(c.take(len, "id")?)
            .map_err(|_| Error::InvalidArgument("id is not valid UTF-8".into()))?
            .to_string();
        let camera = i32::from_le_bytes(c.array("camera")?);
        let camera = if camera < 0 { None } else { Some(camera as u32) };
        let mut values = Vec::with_capacity(dim);
        for _ in 0..dim {
            values.push(f32::from_le_bytes(c.array("features")?) as f64);
        }
        items.push(FeatureVector::new(id, camera, values));
    }
    GalleryIndex::new(items)
}

/// Chooses the reader by content: binary files start with `DCDS`.
pub fn load_features(path: &Path) -> Result<GalleryIndex> {
    let mut head = [0u8; 4];
    let mut f = open(path)?;
    let n = f.read(&mut head).map_err(|e| Error::io(path, e))?;
    if n == 4 && &head == MAGIC {
        load_features_bin(path)
    } else {
        load_features_csv(path)
    }
}

/// Chooses the writer by extension: `.csv` is text, anything else binary.
pub fn write_features(path: &Path, index: &GalleryIndex) -> Result<()> {
    if is_ext(path, "csv") {
        write_features_csv(path, index)
    } else {
        write_features_bin(path, index)
    }
}

fn is_ext(path: &Path, ext: &str) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case(ext))
}

#[derive(Serialize, Deserialize)]
struct ScoresJson {
    #[serde(rename = "S")]
    s: Vec<Vec<f64>>,
    #[serde(rename = "D")]
    d: Vec<Vec<f64>>,
}

fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn matrix_of(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if let Some((i, row)) = rows.iter().enumerate().find(|(_, row)| row.len() != c) {
        return Err(Error::ShapeMismatch {
            what: format!("{what} row {i}"),
            expected: c.to_string(),
            found: row.len().to_string(),
        });
    }
    Ok(DMatrix::from_fn(r, c, |i, j| rows[i][j]))
}

/// Paths of the two CSV matrices that make up a score file stem.
pub fn score_csv_paths(stem: &Path) -> (PathBuf, PathBuf) {
    let s = stem.as_os_str().to_string_lossy();
    (
        PathBuf::from(format!("{s}_s.csv")),
        PathBuf::from(format!("{s}_d.csv")),
    )
}

/// Loads scores and checks they are `m × m`.
pub fn load_scores(path: &Path, m: usize) -> Result<VerificationScores> {
    let (s, d) = if is_ext(path, "json") {
        let parsed: ScoresJson =
            serde_json::from_reader(BufReader::new(open(path)?)).map_err(|e| {
                parse_err(path, e.line() as u64, e.to_string())
            })?;
        (matrix_of(&parsed.s, "S")?, matrix_of(&parsed.d, "D")?)
    } else {
        let (sp, dp) = score_csv_paths(path);
        (read_matrix_csv(&sp)?, read_matrix_csv(&dp)?)
    };
    for (name, mat) in [("S", &s), ("D", &d)] {
        if mat.shape() != (m, m) {
            return Err(Error::ShapeMismatch {
                what: format!("score matrix {name}"),
                expected: format!("{m}x{m}"),
                found: format!("{}x{}", mat.nrows(), mat.ncols()),
            });
        }
    }
    VerificationScores::new(s, d)
}

pub fn write_scores(path: &Path, scores: &VerificationScores) -> Result<()> {
    if is_ext(path, "json") {
        let doc = ScoresJson {
            s: rows_of(&scores.similarity),
            d: rows_of(&scores.dissimilarity),
        };
        let mut out = create(path)?;
        serde_json::to_writer(&mut out, &doc)?;
        writeln!(out).map_err(|e| Error::io(path, e))?;
        out.flush().map_err(|e| Error::io(path, e))
    } else {
        let (sp, dp) = score_csv_paths(path);
        write_matrix_csv(&sp, &scores.similarity)?;
        write_matrix_csv(&dp, &scores.dissimilarity)
    }
}

fn read_matrix_csv(path: &Path) -> Result<DMatrix<f64>> {
    let reader = BufReader::new(open(path)?);
    let mut rows = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let row = line
            .split(',')
            .map(|f| {
                f.trim()
                    .parse::<f64>()
                    .map_err(|_| parse_err(path, i as u64 + 1, format!("`{f}` is not a number")))
            })
            .collect::<Result<Vec<f64>>>()?;
        if let Some(first) = rows.first().map(Vec::len) {
            if row.len() != first {
                return Err(parse_err(
                    path,
                    i as u64 + 1,
                    format!("expected {first} columns, found {}", row.len()),
                ));
            }
        }
        rows.push(row);
    }
    matrix_of(&rows, "matrix")
}

fn write_matrix_csv(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    let mut out = create(path)?;
    for row in m.row_iter() {
        let line: Vec<String> = row.iter().map(|v| fmt_f64(*v)).collect();
        writeln!(out, "{}", line.join(",")).map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// One JSON object per line, in the given order.
pub fn write_ranking(path: &Path, lists: &[RankedList]) -> Result<()> {
    let mut out = create(path)?;
    write_ranking_to(&mut out, lists).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })?;
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn write_ranking_to(out: &mut impl Write, lists: &[RankedList]) -> Result<()> {
    for list in lists {
        serde_json::to_writer(&mut *out, list)?;
        out.write_all(b"\n").map_err(|e| Error::io("<output>", e))?;
    }
    Ok(())
}

pub fn load_ranking(path: &Path) -> Result<Vec<RankedList>> {
    let reader = BufReader::new(open(path)?);
    let mut lists = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let list: RankedList = serde_json::from_str(&line)
            .map_err(|e| parse_err(path, i as u64 + 1, e.to_string()))?;
        lists.push(list);
    }
    Ok(lists)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::synth_generate;

    fn tiny() -> GalleryIndex {
        GalleryIndex::new(vec![
            FeatureVector::new("7", Some(0), vec![0.1, 0.2]),
            FeatureVector::new("8", None, vec![-3.5, 1e-300]),
        ])
        .unwrap()
    }

    #[test]
    fn csv_round_trip_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.csv");
        let index = tiny();
        write_features_csv(&p, &index).unwrap();
        let back = load_features_csv(&p).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back, index);
    }

    #[test]
    fn csv_errors_carry_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.csv");
        std::fs::write(&p, "id,camera,f0,f1\na,0,1,2\nb,1,NaN,2\n").unwrap();
        match load_features_csv(&p) {
            Err(Error::Parse { line: 3, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
        std::fs::write(&p, "id,camera,f0,f1\na,0,1\n").unwrap();
        assert!(matches!(load_features_csv(&p), Err(Error::Parse { line: 2, .. })));
        std::fs::write(&p, "id,camera,f0,f1\na,0,1,x\n").unwrap();
        assert!(matches!(load_features_csv(&p), Err(Error::Parse { line: 2, .. })));
        std::fs::write(&p, "id,camera,f0\n").unwrap();
        assert!(matches!(load_features_csv(&p), Err(Error::EmptyDataset)));
    }

    #[test]
    fn binary_guards() {
        assert!(matches!(decode_features_bin(b"NOPE"), Err(Error::BadMagic)));
        let mut v = MAGIC.to_vec();
        v.extend_from_slice(&2u32.to_le_bytes());
        assert!(matches!(decode_features_bin(&v), Err(Error::VersionMismatch(2))));
        let mut v = MAGIC.to_vec();
        v.extend_from_slice(&1u32.to_le_bytes());
        v.extend_from_slice(&0u32.to_le_bytes());
        v.extend_from_slice(&3u32.to_le_bytes());
        assert!(matches!(decode_features_bin(&v), Err(Error::EmptyDataset)));
        let mut v = MAGIC.to_vec();
        v.extend_from_slice(&1u32.to_le_bytes());
        v.extend_from_slice(&1u32.to_le_bytes());
        v.extend_from_slice(&3u32.to_le_bytes());
        v.extend_from_slice(&1u16.to_le_bytes());
        v.push(b'a');
        assert!(matches!(decode_features_bin(&v), Err(Error::Truncated("camera"))));
    }

    #[test]
    fn binary_layout() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.bin");
        write_features_bin(&p, &tiny()).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(&bytes[..4], b"DCDS");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 2);
        assert_eq!(u16::from_le_bytes(bytes[16..18].try_into().unwrap()), 1);
        assert_eq!(bytes[18], b'7');
        assert_eq!(i32::from_le_bytes(bytes[19..23].try_into().unwrap()), 0);
        // 16 header + 2 items × (2 + 1 + 4 + 8)
        assert_eq!(bytes.len(), 16 + 2 * 15);
        let back = load_features(&p).unwrap();
        assert_eq!(back.items[1].camera, None);
        assert_eq!(back.items[0].values[0], 0.1f32 as f64);
    }

    #[test]
    fn csv_bin_csv_within_f32() {
        let dir = tempfile::tempdir().unwrap();
        let index = synth_generate(3, 2, 5, 0.3, 1).unwrap();
        let bin = dir.path().join("x.dcds");
        write_features(&bin, &index).unwrap();
        let csv_path = dir.path().join("x.csv");
        write_features(&csv_path, &load_features(&bin).unwrap()).unwrap();
        let back = load_features(&csv_path).unwrap();
        for (a, b) in index.items.iter().zip(&back.items) {
            assert_eq!(a.id, b.id);
            for (x, y) in a.values.iter().zip(&b.values) {
                assert!((x - y).abs() <= 1e-7 * x.abs().max(1.0));
            }
        }
    }

    #[test]
    fn scores_round_trip_and_shape_check() {
        let dir = tempfile::tempdir().unwrap();
        let s = VerificationScores::new(
            DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.1, 1.0]),
            DMatrix::from_row_slice(2, 2, &[0.0, 0.9, 0.9, 0.0]),
        )
        .unwrap();
        let json = dir.path().join("s.json");
        write_scores(&json, &s).unwrap();
        assert_eq!(load_scores(&json, 2).unwrap(), s);
        assert!(matches!(load_scores(&json, 3), Err(Error::ShapeMismatch { .. })));

        let first = std::fs::read(&json).unwrap();
        write_scores(&json, &load_scores(&json, 2).unwrap()).unwrap();
        assert_eq!(first, std::fs::read(&json).unwrap());

        let stem = dir.path().join("vnet");
        write_scores(&stem, &s).unwrap();
        assert!(dir.path().join("vnet_s.csv").exists());
        assert_eq!(load_scores(&stem, 2).unwrap(), s);
    }

    #[test]
    fn ranking_lines() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.jsonl");
        let lists = vec![
            RankedList {
                probe: 0,
                order: vec![1, 2],
                scores: vec![0.5, 0.25],
            },
            RankedList {
                probe: 1,
                order: vec![0, 2],
                scores: vec![0.5, 0.1],
            },
        ];
        write_ranking(&p, &lists).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert_eq!(
            text.lines().next().unwrap(),
            r#"{"probe":0,"order":[1,2],"scores":[0.5,0.25]}"#
        );
        assert_eq!(load_ranking(&p).unwrap(), lists);
    }
}
