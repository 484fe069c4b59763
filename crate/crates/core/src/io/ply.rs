//! Binary little-endian PLY for labeled clouds and splat fields.
//!
//! Clouds carry `x y z` (float) and `label` (ushort). Fields add the raw
//! `opacity` and `scale` parameters, `r g b`, `identity_0..identity_15`, and a
//! `classifier` element with one row (`bias`, `w_0..w_15`) per class.

use std::collections::HashMap;
use std::path::Path;

use super::{in_file, read_bytes, write_bytes, Reader};
use crate::field::{Classifier, GaussianField, GaussianSplat, Identity, IDENTITY_DIM};
use crate::{Error, Result, SegmentedPointCloud, Vec3};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Scalar {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl Scalar {
    fn parse(name: &str) -> Option<Self> {
        Some(match name {
            "char" | "int8" => Scalar::I8,
            "uchar" | "uint8" => Scalar::U8,
            "short" | "int16" => Scalar::I16,
            "ushort" | "uint16" => Scalar::U16,
            "int" | "int32" => Scalar::I32,
            "uint" | "uint32" => Scalar::U32,
            "float" | "float32" => Scalar::F32,
            "double" | "float64" => Scalar::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            Scalar::I8 | Scalar::U8 => 1,
            Scalar::I16 | Scalar::U16 => 2,
            Scalar::I32 | Scalar::U32 | Scalar::F32 => 4,
            Scalar::F64 => 8,
        }
    }

    fn read(self, b: &[u8]) -> f64 {
        match self {
            Scalar::I8 => b[0] as i8 as f64,
            Scalar::U8 => b[0] as f64,
            Scalar::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::I32 => i32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Scalar::U32 => u32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Scalar::F32 => f32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Scalar::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
        }
    }
}

#[derive(Debug)]
struct Element {
    name: String,
    count: usize,
    properties: Vec<(String, Scalar)>,
}

impl Element {
    fn row_size(&self) -> usize {
        self.properties.iter().map(|p| p.1.size()).sum()
    }
}

/// Parses the header; the reader is left at the first body byte.
fn parse_header(r: &mut Reader) -> Result<Vec<Element>> {
    let magic = r.array::<4>("magic")?;
    if &magic != b"ply\n" {
        return Err(Error::format(0, "bad PLY magic"));
    }
    let mut elements: Vec<Element> = Vec::new();
    let mut saw_format = false;
    loop {
        let start = r.offset();
        let mut line = Vec::new();
        loop {
            let b = r.array::<1>("header line")?[0];
            if b == b'\n' {
                break;
            }
            line.push(b);
        }
        let line = String::from_utf8(line).map_err(|_| Error::format(start, "header is not UTF-8"))?;
        let words: Vec<&str> = line.split_whitespace().collect();
        match words.as_slice() {
            ["end_header"] => break,
            ["comment", ..] | ["obj_info", ..] | [] => {}
            ["format", fmt, version] => {
                if *fmt != "binary_little_endian" || *version != "1.0" {
                    return Err(Error::format(start, format!("unsupported format {fmt} {version}")));
                }
                saw_format = true;
            }
            ["element", name, count] => {
                let count = count
                    .parse()
                    .map_err(|_| Error::format(start, format!("bad element count {count:?}")))?;
                elements.push(Element {
                    name: name.to_string(),
                    count,
                    properties: Vec::new(),
                });
            }
            ["property", "list", ..] => {
                return Err(Error::format(start, "list properties are not supported"));
            }
            ["property", ty, name] => {
                let ty = Scalar::parse(ty).ok_or_else(|| Error::format(start, format!("unknown type {ty}")))?;
                let el = elements
                    .last_mut()
                    .ok_or_else(|| Error::format(start, "property before any element"))?;
                el.properties.push((name.to_string(), ty));
            }
            _ => return Err(Error::format(start, format!("unrecognized header line {line:?}"))),
        }
    }
    if !saw_format {
        return Err(Error::format(r.offset(), "header has no format line"));
    }
    Ok(elements)
}

/// Body rows of one element as `f64` columns in header order.
struct Table {
    columns: HashMap<String, usize>,
    width: usize,
    values: Vec<f64>,
    count: usize,
}

impl Table {
    fn column(&self, name: &str, offset: u64) -> Result<usize> {
        self.columns
            .get(name)
            .copied()
            .ok_or_else(|| Error::format(offset, format!("missing property {name}")))
    }

    fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }
}

fn read_tables(bytes: &[u8]) -> Result<HashMap<String, Table>> {
    let mut r = Reader::new(bytes);
    let elements = parse_header(&mut r)?;
    let mut tables = HashMap::new();
    for el in elements {
        let row = el.row_size();
        let total = el
            .count
            .checked_mul(row)
            .filter(|&t| t <= r.remaining())
            .ok_or_else(|| Error::format(bytes.len() as u64, format!("truncated {} data", el.name)))?;
        let data = r.take(total, &el.name)?;
        let mut values = Vec::with_capacity(el.count * el.properties.len());
        for chunk in data.chunks_exact(row.max(1)).take(el.count) {
            let mut at = 0;
            for (_, ty) in &el.properties {
                values.push(ty.read(&chunk[at..]));
                at += ty.size();
            }
        }
        let columns = el.properties.iter().enumerate().map(|(i, p)| (p.0.clone(), i)).collect();
        tables.insert(
            el.name.clone(),
            Table {
                columns,
                width: el.properties.len(),
                values,
                count: el.count,
            },
        );
    }
    if r.remaining() != 0 {
        return Err(Error::format(r.offset(), "trailing bytes after PLY body"));
    }
    Ok(tables)
}

fn label_from(v: f64, offset: u64) -> Result<u16> {
    if v.fract() != 0.0 || !(0.0..=u16::MAX as f64).contains(&v) {
        return Err(Error::format(offset, format!("label {v} is not a 16-bit unsigned integer")));
    }
    Ok(v as u16)
}

fn header(vertex_count: usize, extra: &[&str], classifier_rows: Option<usize>) -> String {
    let mut h = String::from("ply\nformat binary_little_endian 1.0\n");
    h.push_str(&format!("element vertex {vertex_count}\n"));
    for p in ["x", "y", "z"] {
        h.push_str(&format!("property float {p}\n"));
    }
    h.push_str("property ushort label\n");
    for p in extra {
        h.push_str(&format!("property float {p}\n"));
    }
    if let Some(k) = classifier_rows {
        h.push_str(&format!("element classifier {k}\nproperty float bias\n"));
        for i in 0..IDENTITY_DIM {
            h.push_str(&format!("property float w_{i}\n"));
        }
    }
    h.push_str("end_header\n");
    h
}

fn push_f32(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&(v as f32).to_le_bytes());
}

pub fn encode_cloud(cloud: &SegmentedPointCloud) -> Vec<u8> {
    let mut out = header(cloud.len(), &[], None).into_bytes();
    for (p, &l) in cloud.positions.iter().zip(&cloud.labels) {
        for c in p.iter() {
            push_f32(&mut out, *c);
        }
        out.extend_from_slice(&l.to_le_bytes());
    }
    out
}

/// Reads `x y z label` from the `vertex` element; other properties are
/// ignored, so field files load as clouds. Source frames are set to 0.
pub fn decode_cloud(bytes: &[u8]) -> Result<SegmentedPointCloud> {
    let tables = read_tables(bytes)?;
    let t = tables
        .get("vertex")
        .ok_or_else(|| Error::format(0, "PLY has no vertex element"))?;
    let cols = [t.column("x", 0)?, t.column("y", 0)?, t.column("z", 0)?, t.column("label", 0)?];
    let mut cloud = SegmentedPointCloud::new();
    for i in 0..t.count {
        let p = Vec3::new(t.get(i, cols[0]), t.get(i, cols[1]), t.get(i, cols[2]));
        cloud.push(p, label_from(t.get(i, cols[3]), 0)?, 0);
    }
    Ok(cloud)
}

fn field_properties() -> Vec<String> {
    let mut names: Vec<String> = ["opacity", "scale", "r", "g", "b"].iter().map(|s| s.to_string()).collect();
    names.extend((0..IDENTITY_DIM).map(|i| format!("identity_{i}")));
    names
}

pub fn encode_field(field: &GaussianField) -> Vec<u8> {
    let names = field_properties();
    let refs: Vec<&str> = names.iter().map(String::as_str).collect();
    let mut out = header(field.len(), &refs, Some(field.class_count())).into_bytes();
    for s in &field.splats {
        for c in s.position.iter() {
            push_f32(&mut out, *c);
        }
        out.extend_from_slice(&s.class_label.to_le_bytes());
        push_f32(&mut out, s.raw_opacity);
        push_f32(&mut out, s.raw_scale);
        for c in s.color.iter() {
            push_f32(&mut out, *c);
        }
        for c in s.identity.iter() {
            push_f32(&mut out, *c);
        }
    }
    for k in 0..field.class_count() {
        push_f32(&mut out, field.classifier.bias[k]);
        for w in field.classifier.weights[k].iter() {
            push_f32(&mut out, *w);
        }
    }
    out
}

pub fn decode_field(bytes: &[u8]) -> Result<GaussianField> {
    let tables = read_tables(bytes)?;
    let t = tables
        .get("vertex")
        .ok_or_else(|| Error::format(0, "PLY has no vertex element"))?;
    let c = tables
        .get("classifier")
        .ok_or_else(|| Error::format(0, "field PLY has no classifier element"))?;
    let pos = [t.column("x", 0)?, t.column("y", 0)?, t.column("z", 0)?];
    let label = t.column("label", 0)?;
    let names = field_properties();
    let extra: Vec<usize> = names.iter().map(|n| t.column(n, 0)).collect::<Result<_>>()?;
    let splats = (0..t.count)
        .map(|i| {
            Ok(GaussianSplat {
                position: Vec3::from_fn(|a, _| t.get(i, pos[a])),
                raw_opacity: t.get(i, extra[0]),
                raw_scale: t.get(i, extra[1]),
                color: Vec3::from_fn(|a, _| t.get(i, extra[2 + a])),
                identity: Identity::from_fn(|a, _| t.get(i, extra[5 + a])),
                class_label: label_from(t.get(i, label), 0)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let bias = c.column("bias", 0)?;
    let w: Vec<usize> = (0..IDENTITY_DIM)
        .map(|i| c.column(&format!("w_{i}"), 0))
        .collect::<Result<_>>()?;
    let classifier = Classifier {
        weights: (0..c.count).map(|k| Identity::from_fn(|a, _| c.get(k, w[a]))).collect(),
        bias: (0..c.count).map(|k| c.get(k, bias)).collect(),
    };
    let field = GaussianField { splats, classifier };
    field.validate().map_err(|e| Error::format(0, e.to_string()))?;
    Ok(field)
}

pub fn write_cloud(path: &Path, cloud: &SegmentedPointCloud) -> Result<()> {
    write_bytes(path, &encode_cloud(cloud))
}

pub fn read_cloud(path: &Path) -> Result<SegmentedPointCloud> {
    in_file(path, decode_cloud(&read_bytes(path)?))
}

pub fn write_field(path: &Path, field: &GaussianField) -> Result<()> {
    write_bytes(path, &encode_field(field))
}

pub fn read_field(path: &Path) -> Result<GaussianField> {
    in_file(path, decode_field(&read_bytes(path)?))
}
