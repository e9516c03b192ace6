//! File formats: `.flo` flow files, camera/pose text, keypoints (binary and
//! CSV), match CSVs, transform records, `key=value` configs and binary PGM/PPM.
//!
//! Codecs work on in-memory bytes or strings; the `*_file` helpers add the path
//! to any error.

use std::path::Path;

use nalgebra::{Matrix2x3, Matrix3, Vector3};
use thiserror::Error;

use crate::flow_field::{FlowField, PixelGrid};
use crate::geometry::{CameraIntrinsics, FundamentalMatrix, RelativePose, Vec2};
use crate::matcher::{KeypointSet, Match, MatchSet, Stage};
use crate::model_fit::PointPair;
use crate::synth_transform::{ThinPlateSpline, TransformSpec};

pub const FLO_MAGIC: f32 = 202021.25;
pub const FLO_INVALID: f32 = 1e10;
/// Components above this magnitude read as invalid.
pub const FLO_INVALID_THRESHOLD: f32 = 1e9;
pub const KEYPOINT_MAGIC: &[u8; 4] = b"EPKP";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IoError {
    #[error("bad magic number")]
    BadMagic,
    #[error("payload truncated: expected {expected} bytes, got {got}")]
    TruncatedPayload { expected: usize, got: usize },
    #[error("{0} bytes of trailing data")]
    TrailingData(usize),
    #[error("non-positive dimensions {0}x{1}")]
    NonPositiveDims(i64, i64),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("{0}")]
    Invalid(String),
    #[error("{path}: {msg}")]
    File { path: String, msg: String },
}

fn parse_err(line: usize, msg: impl Into<String>) -> IoError {
    IoError::Parse { line, msg: msg.into() }
}

pub fn read_file(path: &Path) -> Result<Vec<u8>, IoError> {
    std::fs::read(path).map_err(|e| IoError::File { path: path.display().to_string(), msg: e.to_string() })
}

pub fn read_text_file(path: &Path) -> Result<String, IoError> {
    let bytes = read_file(path)?;
    String::from_utf8(bytes)
        .map_err(|_| IoError::File { path: path.display().to_string(), msg: "not UTF-8 text".into() })
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    std::fs::write(path, bytes).map_err(|e| IoError::File { path: path.display().to_string(), msg: e.to_string() })
}

/// Attaches `path` to a decode error.
pub fn with_path<T>(path: &Path, r: Result<T, IoError>) -> Result<T, IoError> {
    r.map_err(|e| match e {
        IoError::File { .. } => e,
        other => IoError::File { path: path.display().to_string(), msg: other.to_string() },
    })
}

// ---------------------------------------------------------------- .flo

pub fn write_flo(flow: &FlowField) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 8 * flow.grid().len());
    out.extend_from_slice(&FLO_MAGIC.to_le_bytes());
    out.extend_from_slice(&(flow.width() as i32).to_le_bytes());
    out.extend_from_slice(&(flow.height() as i32).to_le_bytes());
    for (v, &ok) in flow.vectors().iter().zip(flow.valid_mask()) {
        let (du, dv) = if ok { (v.x as f32, v.y as f32) } else { (FLO_INVALID, FLO_INVALID) };
        out.extend_from_slice(&du.to_le_bytes());
        out.extend_from_slice(&dv.to_le_bytes());
    }
    out
}

fn f32_at(bytes: &[u8], offset: usize) -> f32 {
    f32::from_le_bytes(bytes[offset..offset + 4].try_into().expect("4-byte slice"))
}

fn flo_invalid(x: f32) -> bool {
    !x.is_finite() || x.abs() > FLO_INVALID_THRESHOLD
}

pub fn read_flo(bytes: &[u8]) -> Result<FlowField, IoError> {
    if bytes.len() < 12 {
        if bytes.len() >= 4 && f32_at(bytes, 0) != FLO_MAGIC {
            return Err(IoError::BadMagic);
        }
        return Err(IoError::TruncatedPayload { expected: 12, got: bytes.len() });
    }
    if f32_at(bytes, 0) != FLO_MAGIC {
        return Err(IoError::BadMagic);
    }
    let w = i32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    let h = i32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if w <= 0 || h <= 0 {
        return Err(IoError::NonPositiveDims(w as i64, h as i64));
    }
    let (w, h) = (w as usize, h as usize);
    let expected = 12 + 8 * w * h;
    if bytes.len() < expected {
        return Err(IoError::TruncatedPayload { expected, got: bytes.len() });
    }
    if bytes.len() > expected {
        return Err(IoError::TrailingData(bytes.len() - expected));
    }
    let grid = PixelGrid::new(w, h).expect("positive dims");
    let mut vectors = Vec::with_capacity(w * h);
    let mut valid = Vec::with_capacity(w * h);
    for k in 0..w * h {
        let du = f32_at(bytes, 12 + 8 * k);
        let dv = f32_at(bytes, 16 + 8 * k);
        if flo_invalid(du) || flo_invalid(dv) {
            vectors.push(Vec2::zeros());
            valid.push(false);
        } else {
            vectors.push(Vec2::new(du as f64, dv as f64));
            valid.push(true);
        }
    }
    Ok(FlowField::from_parts(grid, vectors, valid).expect("consistent lengths"))
}

/// Scalar map stored as a `.flo` with the value in the first channel and zero in the second.
pub fn write_scalar_flo(grid: PixelGrid, values: &[Option<f64>]) -> Vec<u8> {
    let field = FlowField::from_fn(grid, |u, v| values[grid.index(u, v)].map(|s| Vec2::new(s, 0.0)));
    write_flo(&field)
}

// ---------------------------------------------------------------- text records

/// Non-empty, non-comment lines with their 1-based line numbers.
fn records(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines().enumerate().map(|(i, l)| (i + 1, l.trim())).filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

fn numbers(line: usize, s: &str) -> Result<Vec<f64>, IoError> {
    s.split_whitespace()
        .map(|t| t.parse::<f64>().map_err(|_| parse_err(line, format!("'{t}' is not a number"))))
        .collect()
}

fn expect_len(line: usize, v: &[f64], n: usize, what: &str) -> Result<(), IoError> {
    if v.len() != n {
        return Err(parse_err(line, format!("{what} needs {n} values, got {}", v.len())));
    }
    Ok(())
}

pub fn format_intrinsics(k: &CameraIntrinsics) -> String {
    format!("{} {} {} {} {}", k.fx, k.fy, k.cx, k.cy, k.skew)
}

/// Two intrinsics records, camera A then camera B.
pub fn parse_cameras(text: &str) -> Result<(CameraIntrinsics, CameraIntrinsics), IoError> {
    let mut cams = Vec::new();
    for (line, rec) in records(text) {
        let v = numbers(line, rec)?;
        expect_len(line, &v, 5, "camera record")?;
        let k = CameraIntrinsics::new(v[0], v[1], v[2], v[3], v[4]).map_err(|e| parse_err(line, e.to_string()))?;
        cams.push(k);
    }
    match cams.as_slice() {
        [a, b] => Ok((*a, *b)),
        _ => Err(IoError::Invalid(format!("expected 2 camera records, found {}", cams.len()))),
    }
}

pub fn format_cameras(a: &CameraIntrinsics, b: &CameraIntrinsics) -> String {
    format!("{}\n{}\n", format_intrinsics(a), format_intrinsics(b))
}

/// `r11 ... r33 tx ty tz`, row-major.
pub fn parse_pose(text: &str) -> Result<RelativePose, IoError> {
    let mut recs = records(text);
    let (line, rec) = recs.next().ok_or_else(|| IoError::Invalid("empty pose file".into()))?;
    if let Some((extra, _)) = recs.next() {
        return Err(parse_err(extra, "pose file holds a single record"));
    }
    let v = numbers(line, rec)?;
    expect_len(line, &v, 12, "pose record")?;
    RelativePose::new(Matrix3::from_row_slice(&v[..9]), Vector3::new(v[9], v[10], v[11]))
        .map_err(|e| parse_err(line, e.to_string()))
}

pub fn format_pose(p: &RelativePose) -> String {
    let r = &p.rotation;
    let mut parts: Vec<String> = (0..3).flat_map(|i| (0..3).map(move |j| r[(i, j)].to_string())).collect();
    parts.extend(p.translation.iter().map(|t| t.to_string()));
    parts.join(" ") + "\n"
}

/// Nine numbers, row-major, on one or more lines.
pub fn parse_matrix3(text: &str) -> Result<Matrix3<f64>, IoError> {
    let mut v = Vec::new();
    let mut last = 0;
    for (line, rec) in records(text) {
        v.extend(numbers(line, rec)?);
        last = line;
    }
    expect_len(last, &v, 9, "3x3 matrix")?;
    Ok(Matrix3::from_row_slice(&v))
}

pub fn parse_fundamental(text: &str) -> Result<FundamentalMatrix, IoError> {
    FundamentalMatrix::from_matrix(parse_matrix3(text)?).map_err(|e| IoError::Invalid(e.to_string()))
}

pub fn format_matrix3(m: &Matrix3<f64>) -> String {
    (0..3).map(|i| format!("{} {} {}\n", m[(i, 0)], m[(i, 1)], m[(i, 2)])).collect()
}

/// Flat `key=value` lines; `#` starts a comment line.
pub fn parse_key_values(text: &str) -> Result<Vec<(String, String)>, IoError> {
    records(text)
        .map(|(line, rec)| {
            let (k, v) =
                rec.split_once('=').ok_or_else(|| parse_err(line, format!("expected key=value, got '{rec}'")))?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() {
                return Err(parse_err(line, "empty key"));
            }
            Ok((k.to_string(), v.to_string()))
        })
        .collect()
}

// ---------------------------------------------------------------- transforms

/// Single-line record: `affine W H m00 m01 m02 m10 m11 m12` or
/// `tps W H N c0x c0y d0x d0y ...`.
pub fn format_transform(t: &TransformSpec) -> String {
    let d = t.domain();
    let mut out = match (t.affine_matrix(), t.spline()) {
        (Some(m), _) => {
            let v: Vec<String> = (0..2).flat_map(|i| (0..3).map(move |j| m[(i, j)].to_string())).collect();
            format!("affine {} {} {}", d.width, d.height, v.join(" "))
        }
        (None, Some(s)) => {
            let mut parts = vec![s.controls().len().to_string()];
            for (c, dd) in s.controls().iter().zip(s.displacements()) {
                parts.extend([c.x, c.y, dd.x, dd.y].iter().map(|x| x.to_string()));
            }
            format!("tps {} {} {}", d.width, d.height, parts.join(" "))
        }
        (None, None) => unreachable!("a transform is affine or a spline"),
    };
    out.push('\n');
    out
}

pub fn parse_transform(text: &str) -> Result<TransformSpec, IoError> {
    let mut recs = records(text);
    let (line, rec) = recs.next().ok_or_else(|| IoError::Invalid("empty transform record".into()))?;
    if let Some((extra, _)) = recs.next() {
        return Err(parse_err(extra, "transform file holds a single record"));
    }
    let mut it = rec.split_whitespace();
    let kind = it.next().unwrap_or_default();
    let rest: Vec<&str> = it.collect();
    let dim = |i: usize| -> Result<usize, IoError> {
        rest.get(i)
            .and_then(|s| s.parse::<usize>().ok())
            .filter(|&n| n > 0)
            .ok_or_else(|| parse_err(line, "expected positive integer image size"))
    };
    let domain = PixelGrid::new(dim(0)?, dim(1)?).map_err(|e| parse_err(line, e.to_string()))?;
    match kind {
        "affine" => {
            let v = numbers(line, &rest[2..].join(" "))?;
            expect_len(line, &v, 6, "affine record")?;
            TransformSpec::affine(Matrix2x3::from_row_slice(&v), domain).map_err(|e| parse_err(line, e.to_string()))
        }
        "tps" => {
            let n = dim(2)?;
            let v = numbers(line, &rest[3..].join(" "))?;
            expect_len(line, &v, 4 * n, "tps record")?;
            let controls = v.chunks(4).map(|c| Vec2::new(c[0], c[1])).collect();
            let disp = v.chunks(4).map(|c| Vec2::new(c[2], c[3])).collect();
            let spline = ThinPlateSpline::new(controls, disp).map_err(|e| parse_err(line, e.to_string()))?;
            Ok(TransformSpec::tps(spline, domain))
        }
        other => Err(parse_err(line, format!("unknown transform kind '{other}'"))),
    }
}

// ---------------------------------------------------------------- keypoints

/// Keypoints exactly as stored on disk (single precision, unnormalized).
#[derive(Debug, Clone, PartialEq)]
pub struct KeypointRecords {
    pub dim: usize,
    pub points: Vec<[f32; 2]>,
    pub descriptors: Vec<Vec<f32>>,
}

impl KeypointRecords {
    pub fn to_set(&self) -> Result<KeypointSet, IoError> {
        if self.points.is_empty() {
            return Ok(KeypointSet::empty(self.dim));
        }
        let pts = self.points.iter().map(|p| Vec2::new(p[0] as f64, p[1] as f64)).collect();
        let desc = self.descriptors.iter().map(|d| d.iter().map(|&x| x as f64).collect()).collect();
        KeypointSet::new(pts, desc).map_err(|e| IoError::Invalid(e.to_string()))
    }

    pub fn from_set(set: &KeypointSet) -> Self {
        Self {
            dim: set.dim(),
            points: set.points().iter().map(|p| [p.x as f32, p.y as f32]).collect(),
            descriptors: set.descriptors().iter().map(|d| d.iter().map(|&x| x as f32).collect()).collect(),
        }
    }
}

pub fn write_keypoints_bin(k: &KeypointRecords) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + k.points.len() * 4 * (2 + k.dim));
    out.extend_from_slice(KEYPOINT_MAGIC);
    out.extend_from_slice(&(k.points.len() as u32).to_le_bytes());
    out.extend_from_slice(&(k.dim as u32).to_le_bytes());
    for (p, d) in k.points.iter().zip(&k.descriptors) {
        for x in p.iter().chain(d) {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

pub fn read_keypoints_bin(bytes: &[u8]) -> Result<KeypointRecords, IoError> {
    if bytes.len() < 4 || &bytes[..4] != KEYPOINT_MAGIC {
        return Err(IoError::BadMagic);
    }
    if bytes.len() < 12 {
        return Err(IoError::TruncatedPayload { expected: 12, got: bytes.len() });
    }
    let count = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let dim = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let stride = 4 * (2 + dim);
    let expected = count
        .checked_mul(stride)
        .and_then(|n| n.checked_add(12))
        .ok_or(IoError::TruncatedPayload { expected: usize::MAX, got: bytes.len() })?;
    if bytes.len() < expected {
        return Err(IoError::TruncatedPayload { expected, got: bytes.len() });
    }
    if bytes.len() > expected {
        return Err(IoError::TrailingData(bytes.len() - expected));
    }
    let mut points = Vec::with_capacity(count);
    let mut descriptors = Vec::with_capacity(count);
    for i in 0..count {
        let base = 12 + i * stride;
        points.push([f32_at(bytes, base), f32_at(bytes, base + 4)]);
        descriptors.push((0..dim).map(|k| f32_at(bytes, base + 8 + 4 * k)).collect());
    }
    Ok(KeypointRecords { dim, points, descriptors })
}

fn csv_reader(text: &str) -> csv::Reader<&[u8]> {
    csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .flexible(true)
        .from_reader(text.as_bytes())
}

fn csv_writer() -> csv::Writer<Vec<u8>> {
    csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new())
}

fn finish(w: csv::Writer<Vec<u8>>) -> String {
    String::from_utf8(w.into_inner().expect("in-memory writer")).expect("ASCII output")
}

/// Numeric CSV rows; a first row that does not parse as numbers is a header.
fn numeric_rows(text: &str) -> Result<Vec<(usize, Vec<f64>)>, IoError> {
    let mut out = Vec::new();
    for (i, rec) in csv_reader(text).records().enumerate() {
        let rec = rec.map_err(|e| IoError::Invalid(e.to_string()))?;
        let line = rec.position().map_or(i + 1, |p| p.line() as usize);
        let parsed: Result<Vec<f64>, _> = rec.iter().map(str::parse::<f64>).collect();
        match parsed {
            Ok(v) => out.push((line, v)),
            Err(_) if i == 0 => continue,
            Err(_) => return Err(parse_err(line, "non-numeric field")),
        }
    }
    Ok(out)
}

/// `x,y,d0,...,dD-1` with a header row.
pub fn write_keypoints_csv(k: &KeypointRecords) -> String {
    let mut w = csv_writer();
    let header: Vec<String> =
        ["x".to_string(), "y".to_string()].into_iter().chain((0..k.dim).map(|i| format!("d{i}"))).collect();
    w.write_record(&header).expect("in-memory write");
    for (p, d) in k.points.iter().zip(&k.descriptors) {
        let row: Vec<String> = p.iter().chain(d).map(|x| x.to_string()).collect();
        w.write_record(&row).expect("in-memory write");
    }
    finish(w)
}

pub fn read_keypoints_csv(text: &str) -> Result<KeypointRecords, IoError> {
    let mut dim = None;
    let mut points = Vec::new();
    let mut descriptors = Vec::new();
    for (i, rec) in csv_reader(text).records().enumerate() {
        let rec = rec.map_err(|e| IoError::Invalid(e.to_string()))?;
        let line = rec.position().map_or(i + 1, |p| p.line() as usize);
        let parsed: Result<Vec<f32>, _> = rec.iter().map(str::parse::<f32>).collect();
        let v = match parsed {
            Ok(v) => v,
            Err(_) if i == 0 => {
                dim = Some(rec.len().saturating_sub(2));
                continue;
            }
            Err(_) => return Err(parse_err(line, "non-numeric field")),
        };
        if v.len() < 2 {
            return Err(parse_err(line, "keypoint row needs x and y"));
        }
        let d = *dim.get_or_insert(v.len() - 2);
        if v.len() - 2 != d {
            return Err(parse_err(line, format!("descriptor has {} values, expected {d}", v.len() - 2)));
        }
        points.push([v[0], v[1]]);
        descriptors.push(v[2..].to_vec());
    }
    Ok(KeypointRecords { dim: dim.unwrap_or(0), points, descriptors })
}

/// Reads either keypoint format, choosing by the magic bytes.
pub fn read_keypoints(bytes: &[u8]) -> Result<KeypointRecords, IoError> {
    if bytes.starts_with(KEYPOINT_MAGIC) {
        read_keypoints_bin(bytes)
    } else {
        let text = std::str::from_utf8(bytes)
            .map_err(|_| IoError::Invalid("keypoint file is neither EPKP nor text".into()))?;
        read_keypoints_csv(text)
    }
}

// ---------------------------------------------------------------- matches

pub fn write_pairs_csv(pairs: &[PointPair]) -> String {
    let mut w = csv_writer();
    w.write_record(["xa", "ya", "xb", "yb"]).expect("in-memory write");
    for p in pairs {
        w.write_record([p.a.x, p.a.y, p.b.x, p.b.y].map(|x| x.to_string())).expect("in-memory write");
    }
    finish(w)
}

pub fn read_pairs_csv(text: &str) -> Result<Vec<PointPair>, IoError> {
    numeric_rows(text)?
        .into_iter()
        .map(|(line, v)| {
            if v.len() < 4 {
                return Err(parse_err(line, format!("match row needs xa,ya,xb,yb, got {} fields", v.len())));
            }
            Ok(PointPair::new(Vec2::new(v[0], v[1]), Vec2::new(v[2], v[3])))
        })
        .collect()
}

/// `a,b,stage,similarity,xa,ya,xb,yb`.
pub fn write_match_set_csv(m: &MatchSet, a: &KeypointSet, b: &KeypointSet) -> String {
    let mut w = csv_writer();
    w.write_record(["a", "b", "stage", "similarity", "xa", "ya", "xb", "yb"]).expect("in-memory write");
    for p in m.pairs() {
        let (pa, pb) = (a.points()[p.a], b.points()[p.b]);
        w.write_record([
            p.a.to_string(),
            p.b.to_string(),
            p.stage.number().to_string(),
            p.similarity.to_string(),
            pa.x.to_string(),
            pa.y.to_string(),
            pb.x.to_string(),
            pb.y.to_string(),
        ])
        .expect("in-memory write");
    }
    finish(w)
}

/// Reads a match-set CSV back as matches plus their coordinates.
pub fn read_match_set_csv(text: &str) -> Result<(MatchSet, Vec<PointPair>), IoError> {
    let mut pairs = Vec::new();
    let mut coords = Vec::new();
    for (line, v) in numeric_rows(text)? {
        if v.len() != 8 {
            return Err(parse_err(line, format!("match-set row needs 8 fields, got {}", v.len())));
        }
        let idx = |x: f64| {
            (x >= 0.0 && x.fract() == 0.0).then_some(x as usize).ok_or_else(|| parse_err(line, "bad keypoint index"))
        };
        let stage = if v[2] == 1.0 {
            Stage::FlowGuided
        } else if v[2] == 2.0 {
            Stage::Descriptor
        } else {
            return Err(parse_err(line, "stage must be 1 or 2"));
        };
        pairs.push(Match { a: idx(v[0])?, b: idx(v[1])?, stage, similarity: v[3] });
        coords.push(PointPair::new(Vec2::new(v[4], v[5]), Vec2::new(v[6], v[7])));
    }
    Ok((MatchSet::from_pairs(pairs), coords))
}

/// Coordinates of either match CSV flavour (plain pairs or a match set).
pub fn read_any_pairs_csv(text: &str) -> Result<Vec<PointPair>, IoError> {
    let first = numeric_rows(text)?.into_iter().next();
    match first {
        Some((_, v)) if v.len() == 8 => Ok(read_match_set_csv(text)?.1),
        _ => read_pairs_csv(text),
    }
}

// ---------------------------------------------------------------- images

/// 8-bit image with one (PGM) or three (PPM) interleaved channels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

impl Image {
    pub fn pixel(&self, u: usize, v: usize) -> &[u8] {
        let i = (v * self.width + u) * self.channels;
        &self.data[i..i + self.channels]
    }
}

fn pnm_token(bytes: &[u8], pos: &mut usize) -> Result<String, IoError> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(IoError::TruncatedPayload { expected: start + 1, got: bytes.len() });
    }
    Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
}

/// Binary `P5`/`P6` with maxval 255.
pub fn read_pnm(bytes: &[u8]) -> Result<Image, IoError> {
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err(IoError::BadMagic),
    };
    let mut pos = 2;
    let num = |pos: &mut usize| -> Result<i64, IoError> {
        let t = pnm_token(bytes, pos)?;
        t.parse::<i64>().map_err(|_| IoError::Invalid(format!("bad header field '{t}'")))
    };
    let (w, h, max) = (num(&mut pos)?, num(&mut pos)?, num(&mut pos)?);
    if w <= 0 || h <= 0 {
        return Err(IoError::NonPositiveDims(w, h));
    }
    if max != 255 {
        return Err(IoError::Invalid(format!("only maxval 255 is supported, got {max}")));
    }
    pos += 1;
    let (w, h) = (w as usize, h as usize);
    let expected = pos + w * h * channels;
    if bytes.len() < expected {
        return Err(IoError::TruncatedPayload { expected, got: bytes.len() });
    }
    if bytes.len() > expected {
        return Err(IoError::TrailingData(bytes.len() - expected));
    }
    Ok(Image { width: w, height: h, channels, data: bytes[pos..expected].to_vec() })
}

pub fn write_pnm(img: &Image) -> Vec<u8> {
    let magic = if img.channels == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}
