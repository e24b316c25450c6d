//! On-disk formats: camera JSON, DESC descriptor fields, SMAP score maps,
//! PFM depth images and the triangulated-points CSV.
//!
//! Every decoding error names the file and the byte offset where the problem
//! was found.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use serde_json::value::RawValue;
use thiserror::Error;

use crate::depth_tools::DepthImage;
use crate::geometry::CameraView;
use crate::interest_points::ScoreMap;
use crate::matching::{DescriptorField, UNIT_NORM_TOL};
use crate::triangulation::BatchPoint;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IoError {
    #[error("{}: {message}", path.display())]
    Io { path: PathBuf, message: String },
    #[error("{}: byte {offset}: {message}", path.display())]
    Format { path: PathBuf, offset: usize, message: String },
}

impl IoError {
    pub fn path(&self) -> &Path {
        match self {
            IoError::Io { path, .. } | IoError::Format { path, .. } => path,
        }
    }
}

fn read_bytes(path: &Path) -> Result<Vec<u8>, IoError> {
    fs::read(path).map_err(|e| IoError::Io { path: path.to_path_buf(), message: e.to_string() })
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    fs::write(path, bytes).map_err(|e| IoError::Io { path: path.to_path_buf(), message: e.to_string() })
}

fn format_err(path: &Path, offset: usize, message: impl Into<String>) -> IoError {
    IoError::Format { path: path.to_path_buf(), offset, message: message.into() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CameraRecord {
    #[serde(rename = "K")]
    k: [f64; 9],
    #[serde(rename = "R")]
    r: [f64; 9],
    t: [f64; 3],
    width: usize,
    height: usize,
}

fn line_col_offset(text: &str, line: usize, column: usize) -> usize {
    let start: usize = text.split_inclusive('\n').take(line.saturating_sub(1)).map(str::len).sum();
    (start + column.saturating_sub(1)).min(text.len())
}

/// Parses a camera file: a JSON array with one object per view holding
/// `K` and `R` (9 numbers, row-major), `t` (3 numbers), `width` and `height`.
pub fn parse_cameras(path: &Path, text: &str) -> Result<Vec<CameraView<f64>>, IoError> {
    let json_err = |base: usize, sub: &str, e: serde_json::Error| {
        format_err(path, base + line_col_offset(sub, e.line(), e.column()), e.to_string())
    };
    let raws: Vec<&RawValue> = serde_json::from_str(text).map_err(|e| json_err(0, text, e))?;
    let mut views = Vec::with_capacity(raws.len());
    for (i, raw) in raws.iter().enumerate() {
        let sub = raw.get();
        let base = sub.as_ptr() as usize - text.as_ptr() as usize;
        let rec: CameraRecord = serde_json::from_str(sub).map_err(|e| json_err(base, sub, e))?;
        let view = CameraView::new(
            Matrix3::from_row_slice(&rec.k),
            Matrix3::from_row_slice(&rec.r),
            Vector3::from_row_slice(&rec.t),
            rec.width,
            rec.height,
        )
        .map_err(|e| format_err(path, base, format!("view {i}: {e}")))?;
        views.push(view);
    }
    if views.is_empty() {
        return Err(format_err(path, 0, "no views"));
    }
    Ok(views)
}

pub fn read_cameras(path: &Path) -> Result<Vec<CameraView<f64>>, IoError> {
    let bytes = read_bytes(path)?;
    let text = std::str::from_utf8(&bytes).map_err(|e| format_err(path, e.valid_up_to(), "invalid UTF-8"))?;
    parse_cameras(path, text)
}

pub fn cameras_to_json(views: &[CameraView<f64>]) -> String {
    let recs: Vec<CameraRecord> = views
        .iter()
        .map(|v| {
            let row_major = |m: &Matrix3<f64>| {
                let mut a = [0.0; 9];
                for r in 0..3 {
                    for c in 0..3 {
                        a[r * 3 + c] = m[(r, c)];
                    }
                }
                a
            };
            CameraRecord {
                k: row_major(v.intrinsics()),
                r: row_major(v.rotation()),
                t: [v.translation().x, v.translation().y, v.translation().z],
                width: v.width(),
                height: v.height(),
            }
        })
        .collect();
    let mut s = serde_json::to_string_pretty(&recs).expect("camera records serialize");
    s.push('\n');
    s
}

pub fn write_cameras(path: &Path, views: &[CameraView<f64>]) -> Result<(), IoError> {
    write_bytes(path, cameras_to_json(views).as_bytes())
}

/// Checks `magic`, reads `n_dims` little-endian u32 dimensions and returns
/// them with the offset of the payload.
fn read_header(path: &Path, bytes: &[u8], magic: &[u8; 4], n_dims: usize) -> Result<(Vec<usize>, usize), IoError> {
    let header = 4 + 4 * n_dims;
    if bytes.len() < header {
        return Err(format_err(path, bytes.len(), format!("truncated header, expected {header} bytes")));
    }
    if &bytes[..4] != magic {
        return Err(format_err(path, 0, format!("bad magic, expected {:?}", std::str::from_utf8(magic).unwrap())));
    }
    let dims = (0..n_dims)
        .map(|i| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize)
        .collect();
    Ok((dims, header))
}

fn read_f32_payload(path: &Path, bytes: &[u8], start: usize, count: usize) -> Result<Vec<f64>, IoError> {
    let expected = start + 4 * count;
    if bytes.len() < expected {
        return Err(format_err(path, bytes.len(), format!("truncated payload, expected {expected} bytes")));
    }
    if bytes.len() > expected {
        return Err(format_err(path, expected, format!("{} trailing bytes", bytes.len() - expected)));
    }
    let mut out = Vec::with_capacity(count);
    for (i, chunk) in bytes[start..].chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(format_err(path, start + 4 * i, format!("non-finite value {v}")));
        }
        out.push(v as f64);
    }
    Ok(out)
}

fn f32_payload(header: &[u8], values: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(header.len() + 4 * values.len());
    out.extend_from_slice(header);
    for &v in values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

fn dims_header(magic: &[u8; 4], dims: &[usize]) -> Vec<u8> {
    let mut h = magic.to_vec();
    for &d in dims {
        h.extend_from_slice(&(d as u32).to_le_bytes());
    }
    h
}

/// Reads a DESC file. The grid stride is not stored in the file.
pub fn read_desc(path: &Path, stride: usize) -> Result<DescriptorField<f64>, IoError> {
    let bytes = read_bytes(path)?;
    let (dims, start) = read_header(path, &bytes, b"DESC", 3)?;
    let (h, w, n) = (dims[0], dims[1], dims[2]);
    let values = read_f32_payload(path, &bytes, start, h * w * n)?;
    if n >= 1 {
        for (i, d) in values.chunks_exact(n).enumerate() {
            let norm = d.iter().map(|v| v * v).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > UNIT_NORM_TOL {
                return Err(format_err(path, start + 4 * n * i, format!("descriptor norm {norm} is not 1")));
            }
        }
    }
    DescriptorField::new(h, w, n, stride, values).map_err(|e| format_err(path, 4, e.to_string()))
}

pub fn write_desc(path: &Path, field: &DescriptorField<f64>) -> Result<(), IoError> {
    let header = dims_header(b"DESC", &[field.height(), field.width(), field.dim()]);
    write_bytes(path, &f32_payload(&header, field.values()))
}

pub fn read_smap(path: &Path) -> Result<ScoreMap<f64>, IoError> {
    let bytes = read_bytes(path)?;
    let (dims, start) = read_header(path, &bytes, b"SMAP", 2)?;
    let (h, w) = (dims[0], dims[1]);
    let values = read_f32_payload(path, &bytes, start, h * w)?;
    if let Some(i) = values.iter().position(|v| !(0.0..=1.0).contains(v)) {
        return Err(format_err(path, start + 4 * i, format!("score {} outside [0, 1]", values[i])));
    }
    ScoreMap::new(h, w, values).map_err(|e| format_err(path, 4, e.to_string()))
}

pub fn write_smap(path: &Path, map: &ScoreMap<f64>) -> Result<(), IoError> {
    let header = dims_header(b"SMAP", &[map.height(), map.width()]);
    write_bytes(path, &f32_payload(&header, map.values()))
}

/// Encodes a depth image as grayscale little-endian PFM. Holes are written
/// as 0.
pub fn encode_pfm(img: &DepthImage<f64>) -> Vec<u8> {
    let (w, h) = (img.width(), img.height());
    let mut out = format!("Pf\n{w} {h}\n-1.0\n").into_bytes();
    out.reserve(4 * w * h);
    for row in (0..h).rev() {
        for &v in &img.values()[row * w..(row + 1) * w] {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

/// Decodes a grayscale PFM of either endianness. Finite positive values are
/// valid depths; zero, negative and non-finite values are holes.
pub fn decode_pfm(path: &Path, bytes: &[u8]) -> Result<DepthImage<f64>, IoError> {
    let mut pos = 0usize;
    let mut token = |what: &str| -> Result<(String, usize), IoError> {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(format_err(path, start, format!("missing {what}")));
        }
        let s = String::from_utf8_lossy(&bytes[start..pos]).into_owned();
        Ok((s, start))
    };
    let (magic, at) = token("magic")?;
    if magic != "Pf" {
        return Err(format_err(path, at, format!("expected grayscale \"Pf\", found {magic:?}")));
    }
    let mut dim = |what: &str| -> Result<usize, IoError> {
        let (s, at) = token(what)?;
        s.parse::<usize>().ok().filter(|&d| d > 0).ok_or_else(|| format_err(path, at, format!("bad {what} {s:?}")))
    };
    let w = dim("width")?;
    let h = dim("height")?;
    let (scale, at) = token("scale")?;
    let scale: f64 = scale
        .parse()
        .ok()
        .filter(|s: &f64| s.is_finite() && *s != 0.0)
        .ok_or_else(|| format_err(path, at, format!("bad scale {scale:?}")))?;
    // Exactly one whitespace byte separates the header from the payload.
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(format_err(path, pos, "missing header terminator"));
    }
    let start = pos + 1;
    let expected = start + 4 * w * h;
    if bytes.len() != expected {
        return Err(format_err(
            path,
            bytes.len().min(expected),
            format!("payload size {} bytes, expected {}", bytes.len().saturating_sub(start), 4 * w * h),
        ));
    }
    let little = scale < 0.0;
    let mut raw = vec![0.0f64; w * h];
    for (i, chunk) in bytes[start..].chunks_exact(4).enumerate() {
        let b: [u8; 4] = chunk.try_into().unwrap();
        let v = if little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) };
        let (file_row, col) = (i / w, i % w);
        raw[(h - 1 - file_row) * w + col] = v as f64;
    }
    DepthImage::from_raw(w, h, raw).map_err(|e| format_err(path, start, e.to_string()))
}

pub fn read_pfm(path: &Path) -> Result<DepthImage<f64>, IoError> {
    decode_pfm(path, &read_bytes(path)?)
}

pub fn write_pfm(path: &Path, img: &DepthImage<f64>) -> Result<(), IoError> {
    write_bytes(path, &encode_pfm(img))
}

/// CSV of triangulated points: `point_id,x,y,z,valid,sigma_gap,w_1..w_K`
/// with one weight column per auxiliary view. Invalid points have empty
/// coordinate fields.
pub fn points_csv(points: &[BatchPoint<f64>], n_aux_views: usize) -> String {
    let mut s = String::from("point_id,x,y,z,valid,sigma_gap");
    for k in 1..=n_aux_views {
        write!(s, ",w_{k}").unwrap();
    }
    s.push('\n');
    for p in points {
        match &p.result {
            Ok(t) => write!(s, "{},{},{},{},1,{}", p.point_id, t.point.x, t.point.y, t.point.z, t.sigma_gap).unwrap(),
            Err(_) => write!(s, "{},,,,0,", p.point_id).unwrap(),
        }
        for k in 0..n_aux_views {
            match p.view_weights.get(k) {
                Some(w) => write!(s, ",{w}").unwrap(),
                None => s.push(','),
            }
        }
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cam(tx: f64) -> CameraView<f64> {
        let k = Matrix3::new(300.0, 0.0, 159.5, 0.0, 300.0, 119.5, 0.0, 0.0, 1.0);
        CameraView::new(k, Matrix3::identity(), Vector3::new(tx, 0.0, 0.0), 320, 240).unwrap()
    }

    #[test]
    fn cameras_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("cameras.json");
        let views = vec![cam(0.0), cam(-0.1)];
        write_cameras(&p, &views).unwrap();
        assert_eq!(read_cameras(&p).unwrap(), views);
    }

    #[test]
    fn cameras_missing_field_is_error_with_offset() {
        let p = Path::new("c.json");
        let text = r#"[{"K":[1,0,0,0,1,0,0,0,1],"R":[1,0,0,0,1,0,0,0,1],"t":[0,0,0],"width":4}]"#;
        match parse_cameras(p, text) {
            Err(IoError::Format { offset, message, .. }) => {
                assert!(message.contains("height"), "{message}");
                assert!(offset > 1 && offset <= text.len());
            }
            other => panic!("{other:?}"),
        }
        let extra = r#"[{"K":[1,0,0,0,1,0,0,0,1],"R":[1,0,0,0,1,0,0,0,1],"t":[0,0,0],"width":4,"height":4,"x":1}]"#;
        assert!(parse_cameras(p, extra).is_err());
        let bad_k = r#"[{"K":[1,0,0,0,1,0,0,0,2],"R":[1,0,0,0,1,0,0,0,1],"t":[0,0,0],"width":4,"height":4}]"#;
        assert!(matches!(parse_cameras(p, bad_k), Err(IoError::Format { offset: 1, .. })));
    }

    #[test]
    fn missing_file_names_path() {
        let e = read_cameras(Path::new("/nonexistent/cams.json")).unwrap_err();
        assert!(e.to_string().contains("/nonexistent/cams.json"));
    }

    #[test]
    fn pfm_round_trip_and_row_order() {
        let img = DepthImage::from_raw(3, 2, vec![1.0, 2.0, 0.0, 4.0, 5.0, 6.5]).unwrap();
        let bytes = encode_pfm(&img);
        let header = b"Pf\n3 2\n-1.0\n";
        assert_eq!(&bytes[..header.len()], header);
        // First stored row is the bottom image row.
        assert_eq!(f32::from_le_bytes(bytes[header.len()..header.len() + 4].try_into().unwrap()), 4.0);
        let back = decode_pfm(Path::new("x.pfm"), &bytes).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn pfm_big_endian_is_read() {
        let mut bytes = b"Pf\n2 1\n1.0\n".to_vec();
        bytes.extend_from_slice(&1.5f32.to_be_bytes());
        bytes.extend_from_slice(&2.5f32.to_be_bytes());
        let img = decode_pfm(Path::new("x.pfm"), &bytes).unwrap();
        assert_eq!(img.values(), &[1.5, 2.5]);
    }

    #[test]
    fn pfm_truncated_reports_offset() {
        let mut bytes = b"Pf\n2 2\n-1.0\n".to_vec();
        bytes.extend_from_slice(&[0u8; 10]);
        match decode_pfm(Path::new("d.pfm"), &bytes) {
            Err(IoError::Format { offset, .. }) => assert_eq!(offset, bytes.len()),
            other => panic!("{other:?}"),
        }
        assert!(decode_pfm(Path::new("d.pfm"), b"PF\n1 1\n-1.0\n\0\0\0\0").is_err());
    }

    #[test]
    fn desc_and_smap_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let s = 1.0 / 2f64.sqrt();
        let values: Vec<f64> = [1.0, 0.0, 0.0, 1.0, s, s, -1.0, 0.0].iter().map(|&v: &f64| v as f32 as f64).collect();
        let field = DescriptorField::new(2, 2, 2, 4, values).unwrap();
        let p = dir.path().join("v.desc");
        write_desc(&p, &field).unwrap();
        assert_eq!(read_desc(&p, 4).unwrap(), field);
        assert_eq!(fs::metadata(&p).unwrap().len(), 16 + 32);

        let map = ScoreMap::new(1, 3, vec![0.0, 0.5, 1.0]).unwrap();
        let q = dir.path().join("v.smap");
        write_smap(&q, &map).unwrap();
        assert_eq!(read_smap(&q).unwrap(), map);
    }

    #[test]
    fn desc_non_unit_descriptor_reports_node_offset() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.desc");
        let mut bytes = dims_header(b"DESC", &[1, 2, 2]);
        for v in [1.0f32, 0.0, 0.5, 0.5] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(&p, &bytes).unwrap();
        match read_desc(&p, 1) {
            Err(IoError::Format { offset, .. }) => assert_eq!(offset, 16 + 8),
            other => panic!("{other:?}"),
        }
        fs::write(&p, b"DESX\0\0\0\0").unwrap();
        assert!(matches!(read_desc(&p, 1), Err(IoError::Format { offset: 8, .. })));
    }

    #[test]
    fn smap_out_of_range_score() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.smap");
        let bytes = f32_payload(&dims_header(b"SMAP", &[1, 2]), &[0.5, 1.5]);
        fs::write(&p, bytes).unwrap();
        assert!(matches!(read_smap(&p), Err(IoError::Format { offset: 16, .. })));
    }
}
