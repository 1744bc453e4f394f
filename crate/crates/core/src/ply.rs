//! Reader and writer for the de-facto 3DGS PLY layout.
//!
//! Reads ASCII and binary (either endianness) files whose `vertex` element
//! carries `x y z f_dc_0..2 [f_rest_*] opacity scale_0..2 rot_0..3`. Files
//! with fewer than 45 `f_rest` properties are zero-padded to degree 3.
//! Writes binary little-endian with the full 62-property layout.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Cursor, Write};
use std::path::Path;

use nalgebra::{Vector3, Vector4};
use thiserror::Error;

use crate::model::{zero_sh, GaussianCloud};
use crate::sh::SH_COEFFS;
use crate::util::write_atomic;

#[derive(Debug, Error)]
pub enum PlyError {
    #[error("i/o error on {path}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed PLY: {0}")]
    Parse(String),
    #[error("PLY contains no Gaussians")]
    EmptyCloud,
    #[error("PLY vertex element lacks property `{0}`")]
    MissingProperty(String),
}

const REST_PER_CHANNEL: usize = SH_COEFFS - 1;

/// Vertex property names written by [`save_ply`], in order.
pub fn property_names() -> Vec<String> {
    let mut names: Vec<String> = ["x", "y", "z", "nx", "ny", "nz"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    names.extend((0..3).map(|i| format!("f_dc_{i}")));
    names.extend((0..3 * REST_PER_CHANNEL).map(|i| format!("f_rest_{i}")));
    names.push("opacity".into());
    names.extend((0..3).map(|i| format!("scale_{i}")));
    names.extend((0..4).map(|i| format!("rot_{i}")));
    names
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Format {
    Ascii,
    BinaryLe,
    BinaryBe,
}

#[derive(Debug, Clone, Copy)]
enum ScalarType {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl ScalarType {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "char" | "int8" => Self::I8,
            "uchar" | "uint8" => Self::U8,
            "short" | "int16" => Self::I16,
            "ushort" | "uint16" => Self::U16,
            "int" | "int32" => Self::I32,
            "uint" | "uint32" => Self::U32,
            "float" | "float32" => Self::F32,
            "double" | "float64" => Self::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            Self::I8 | Self::U8 => 1,
            Self::I16 | Self::U16 => 2,
            Self::I32 | Self::U32 | Self::F32 => 4,
            Self::F64 => 8,
        }
    }

    fn decode(self, b: &[u8], big_endian: bool) -> f64 {
        macro_rules! rd {
            ($t:ty, $n:expr) => {{
                let mut a = [0u8; $n];
                a.copy_from_slice(&b[..$n]);
                if big_endian {
                    <$t>::from_be_bytes(a) as f64
                } else {
                    <$t>::from_le_bytes(a) as f64
                }
            }};
        }
        match self {
            Self::I8 => b[0] as i8 as f64,
            Self::U8 => b[0] as f64,
            Self::I16 => rd!(i16, 2),
            Self::U16 => rd!(u16, 2),
            Self::I32 => rd!(i32, 4),
            Self::U32 => rd!(u32, 4),
            Self::F32 => rd!(f32, 4),
            Self::F64 => rd!(f64, 8),
        }
    }
}

struct Element {
    name: String,
    count: usize,
    props: Vec<(String, ScalarType)>,
    has_list: bool,
}

struct Header {
    format: Format,
    elements: Vec<Element>,
}

fn parse_err(msg: impl Into<String>) -> PlyError {
    PlyError::Parse(msg.into())
}

fn read_header<R: BufRead>(r: &mut R) -> Result<Header, PlyError> {
    let mut line = String::new();
    let mut next_line = |r: &mut R| -> Result<String, PlyError> {
        line.clear();
        let n = r
            .read_line(&mut line)
            .map_err(|e| parse_err(format!("header read failed: {e}")))?;
        if n == 0 {
            return Err(parse_err("unexpected end of file in header"));
        }
        Ok(line.trim_end_matches(['\r', '\n']).to_string())
    };

    if next_line(r)?.trim() != "ply" {
        return Err(parse_err("missing `ply` magic"));
    }
    let mut format = None;
    let mut elements: Vec<Element> = Vec::new();
    loop {
        let l = next_line(r)?;
        let toks: Vec<&str> = l.split_whitespace().collect();
        match toks.first().copied() {
            None | Some("comment") | Some("obj_info") => {}
            Some("format") => {
                format = Some(match toks.get(1).copied() {
                    Some("ascii") => Format::Ascii,
                    Some("binary_little_endian") => Format::BinaryLe,
                    Some("binary_big_endian") => Format::BinaryBe,
                    other => return Err(parse_err(format!("unknown format {other:?}"))),
                });
            }
            Some("element") => {
                if toks.len() != 3 {
                    return Err(parse_err(format!("bad element line `{l}`")));
                }
                let count = toks[2]
                    .parse::<usize>()
                    .map_err(|_| parse_err(format!("bad element count `{}`", toks[2])))?;
                elements.push(Element {
                    name: toks[1].to_string(),
                    count,
                    props: Vec::new(),
                    has_list: false,
                });
            }
            Some("property") => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| parse_err("property before any element"))?;
                if toks.get(1) == Some(&"list") {
                    el.has_list = true;
                    continue;
                }
                if toks.len() != 3 {
                    return Err(parse_err(format!("bad property line `{l}`")));
                }
                let ty = ScalarType::parse(toks[1])
                    .ok_or_else(|| parse_err(format!("unknown property type `{}`", toks[1])))?;
                el.props.push((toks[2].to_string(), ty));
            }
            Some("end_header") => break,
            Some(other) => return Err(parse_err(format!("unexpected header keyword `{other}`"))),
        }
    }
    let format = format.ok_or_else(|| parse_err("missing format line"))?;
    Ok(Header { format, elements })
}

/// Parses a PLY document from memory.
pub fn parse_ply(bytes: &[u8]) -> Result<GaussianCloud, PlyError> {
    let mut reader = BufReader::new(Cursor::new(bytes));
    let header = read_header(&mut reader)?;

    let mut rows: Option<(Vec<String>, Vec<Vec<f64>>)> = None;
    for el in &header.elements {
        if el.name == "vertex" {
            if el.has_list {
                return Err(parse_err("list properties are not supported on vertices"));
            }
            let data = read_rows(&mut reader, header.format, el)?;
            rows = Some((el.props.iter().map(|(n, _)| n.clone()).collect(), data));
            break;
        }
        if el.has_list && el.count > 0 {
            return Err(parse_err(format!(
                "element `{}` with list properties precedes the vertex element",
                el.name
            )));
        }
        read_rows(&mut reader, header.format, el)?;
    }
    let (names, data) = rows.ok_or(PlyError::EmptyCloud)?;
    if data.is_empty() {
        return Err(PlyError::EmptyCloud);
    }
    build_cloud(&names, &data)
}

fn read_rows<R: BufRead>(r: &mut R, format: Format, el: &Element) -> Result<Vec<Vec<f64>>, PlyError> {
    let mut rows = Vec::with_capacity(el.count);
    match format {
        Format::Ascii => {
            let mut line = String::new();
            while rows.len() < el.count {
                line.clear();
                let n = r
                    .read_line(&mut line)
                    .map_err(|e| parse_err(format!("payload read failed: {e}")))?;
                if n == 0 {
                    return Err(parse_err(format!(
                        "expected {} `{}` rows, found {}",
                        el.count,
                        el.name,
                        rows.len()
                    )));
                }
                if line.trim().is_empty() {
                    continue;
                }
                let vals: Vec<f64> = line
                    .split_whitespace()
                    .map(|t| t.parse::<f64>())
                    .collect::<Result<_, _>>()
                    .map_err(|e| parse_err(format!("bad number in row {}: {e}", rows.len())))?;
                if vals.len() != el.props.len() {
                    return Err(parse_err(format!(
                        "row {} has {} values, expected {}",
                        rows.len(),
                        vals.len(),
                        el.props.len()
                    )));
                }
                rows.push(vals);
            }
        }
        Format::BinaryLe | Format::BinaryBe => {
            let big = format == Format::BinaryBe;
            let stride: usize = el.props.iter().map(|(_, t)| t.size()).sum();
            let mut buf = vec![0u8; stride];
            for i in 0..el.count {
                r.read_exact(&mut buf)
                    .map_err(|_| parse_err(format!("truncated payload at `{}` row {i}", el.name)))?;
                let mut off = 0;
                let mut vals = Vec::with_capacity(el.props.len());
                for (_, ty) in &el.props {
                    vals.push(ty.decode(&buf[off..], big));
                    off += ty.size();
                }
                rows.push(vals);
            }
        }
    }
    Ok(rows)
}

fn build_cloud(names: &[String], rows: &[Vec<f64>]) -> Result<GaussianCloud, PlyError> {
    let index: HashMap<&str, usize> = names.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();
    let need = |n: &str| -> Result<usize, PlyError> {
        index
            .get(n)
            .copied()
            .ok_or_else(|| PlyError::MissingProperty(n.to_string()))
    };
    let pos = [need("x")?, need("y")?, need("z")?];
    let dc = [need("f_dc_0")?, need("f_dc_1")?, need("f_dc_2")?];
    let opacity = need("opacity")?;
    let scale = [need("scale_0")?, need("scale_1")?, need("scale_2")?];
    let rot = [need("rot_0")?, need("rot_1")?, need("rot_2")?, need("rot_3")?];

    let mut rest = Vec::new();
    while let Some(&i) = index.get(format!("f_rest_{}", rest.len()).as_str()) {
        rest.push(i);
    }
    if rest.len() % 3 != 0 || rest.len() > 3 * REST_PER_CHANNEL {
        return Err(parse_err(format!(
            "unsupported number of f_rest properties: {}",
            rest.len()
        )));
    }
    let per_channel = rest.len() / 3;

    let mut cloud = GaussianCloud::empty();
    for (row_idx, row) in rows.iter().enumerate() {
        let mut sh = zero_sh();
        for c in 0..3 {
            sh[c][0] = row[dc[c]];
            for k in 0..per_channel {
                sh[c][k + 1] = row[rest[c * per_channel + k]];
            }
        }
        let q = Vector4::new(row[rot[0]], row[rot[1]], row[rot[2]], row[rot[3]]);
        let n = q.norm();
        if !(n > 0.0 && n.is_finite()) {
            return Err(parse_err(format!("row {row_idx} has a degenerate quaternion")));
        }
        cloud.push(
            Vector3::new(row[pos[0]], row[pos[1]], row[pos[2]]),
            q / n,
            Vector3::new(row[scale[0]], row[scale[1]], row[scale[2]]),
            row[opacity],
            sh,
        );
    }
    cloud.check().map_err(PlyError::Parse)?;
    Ok(cloud)
}

pub fn load_ply(path: impl AsRef<Path>) -> Result<GaussianCloud, PlyError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| PlyError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_ply(&bytes)
}

/// Serializes to binary little-endian PLY bytes.
pub fn encode_ply(cloud: &GaussianCloud) -> Result<Vec<u8>, PlyError> {
    if cloud.is_empty() {
        return Err(PlyError::EmptyCloud);
    }
    let names = property_names();
    let mut out = Vec::with_capacity(256 + cloud.len() * names.len() * 4);
    let mut header = String::from("ply\nformat binary_little_endian 1.0\n");
    header.push_str(&format!("element vertex {}\n", cloud.len()));
    for n in &names {
        header.push_str(&format!("property float {n}\n"));
    }
    header.push_str("end_header\n");
    out.extend_from_slice(header.as_bytes());

    let mut put = |v: f64| out.extend_from_slice(&(v as f32).to_le_bytes());
    for i in 0..cloud.len() {
        cloud.positions[i].iter().for_each(|&v| put(v));
        (0..3).for_each(|_| put(0.0));
        (0..3).for_each(|c| put(cloud.sh[i][c][0]));
        for c in 0..3 {
            for k in 1..SH_COEFFS {
                put(cloud.sh[i][c][k]);
            }
        }
        put(cloud.opacity_logits[i]);
        cloud.log_scales[i].iter().for_each(|&v| put(v));
        cloud.rotations[i].iter().for_each(|&v| put(v));
    }
    Ok(out)
}

pub fn save_ply(cloud: &GaussianCloud, path: impl AsRef<Path>) -> Result<(), PlyError> {
    let bytes = encode_ply(cloud)?;
    let path = path.as_ref();
    write_atomic(path, |f| f.write_all(&bytes)).map_err(|source| PlyError::Io {
        path: path.display().to_string(),
        source,
    })
}
