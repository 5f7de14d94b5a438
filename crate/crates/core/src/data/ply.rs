//! PLY point clouds, ASCII and binary little-endian.
//!
//! Vertex `x`, `y`, `z` must be `float` or `double`. An integer vertex
//! property named `class` carries per-point labels. Other properties and
//! elements are skipped.

use std::fmt::{self, Write as _};
use std::fs;
use std::path::Path;

use thiserror::Error;

use super::{LabeledCloud, PointCloud};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Location {
    Line(usize),
    Byte(usize),
}

impl fmt::Display for Location {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Location::Line(l) => write!(f, "line {l}"),
            Location::Byte(b) => write!(f, "byte {b}"),
        }
    }
}

#[derive(Debug, Error)]
pub enum PlyError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("ply parse error at {location}: {message}")]
    Parse { location: Location, message: String },
}

fn parse_err(location: Location, message: impl Into<String>) -> PlyError {
    PlyError::Parse {
        location,
        message: message.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlyFormat {
    Ascii,
    BinaryLittleEndian,
}

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

    fn is_float(self) -> bool {
        matches!(self, Scalar::F32 | Scalar::F64)
    }

    fn read_le(self, b: &[u8]) -> f64 {
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

#[derive(Debug, Clone)]
enum Property {
    Scalar { name: String, ty: Scalar },
    List { count: Scalar, item: Scalar },
}

#[derive(Debug, Clone)]
struct Element {
    name: String,
    count: usize,
    props: Vec<Property>,
}

struct Header {
    format: PlyFormat,
    elements: Vec<Element>,
    /// Line number of the first body line (ASCII) and byte offset of the body.
    body_line: usize,
    body_offset: usize,
}

fn parse_header(bytes: &[u8]) -> Result<Header, PlyError> {
    let mut format = None;
    let mut elements: Vec<Element> = Vec::new();
    let mut offset = 0;
    let mut line_no = 0;
    loop {
        line_no += 1;
        let loc = Location::Line(line_no);
        let Some(end) = bytes[offset..].iter().position(|&b| b == b'\n') else {
            return Err(parse_err(loc, "header is missing end_header"));
        };
        let raw = &bytes[offset..offset + end];
        offset += end + 1;
        let line = std::str::from_utf8(raw)
            .map_err(|_| parse_err(loc, "header is not valid text"))?
            .trim_end_matches('\r')
            .trim();
        let mut words = line.split_whitespace();
        let keyword = words.next().unwrap_or("");
        if line_no == 1 {
            if line != "ply" {
                return Err(parse_err(loc, "missing 'ply' magic"));
            }
            continue;
        }
        match keyword {
            "" | "comment" | "obj_info" => {}
            "format" => {
                format = Some(match words.next() {
                    Some("ascii") => PlyFormat::Ascii,
                    Some("binary_little_endian") => PlyFormat::BinaryLittleEndian,
                    Some(other) => {
                        return Err(parse_err(loc, format!("unsupported format '{other}'")))
                    }
                    None => return Err(parse_err(loc, "format line without a format")),
                });
            }
            "element" => {
                let (Some(name), Some(count)) = (words.next(), words.next()) else {
                    return Err(parse_err(loc, "malformed element line"));
                };
                let count = count
                    .parse()
                    .map_err(|_| parse_err(loc, format!("bad element count '{count}'")))?;
                elements.push(Element {
                    name: name.to_string(),
                    count,
                    props: Vec::new(),
                });
            }
            "property" => {
                let Some(element) = elements.last_mut() else {
                    return Err(parse_err(loc, "property before any element"));
                };
                let words: Vec<&str> = words.collect();
                let prop = match words.as_slice() {
                    ["list", count, item, _name] => Property::List {
                        count: Scalar::parse(count)
                            .ok_or_else(|| parse_err(loc, format!("unknown type '{count}'")))?,
                        item: Scalar::parse(item)
                            .ok_or_else(|| parse_err(loc, format!("unknown type '{item}'")))?,
                    },
                    [ty, name] => Property::Scalar {
                        name: name.to_string(),
                        ty: Scalar::parse(ty)
                            .ok_or_else(|| parse_err(loc, format!("unknown type '{ty}'")))?,
                    },
                    _ => return Err(parse_err(loc, "malformed property line")),
                };
                element.props.push(prop);
            }
            "end_header" => break,
            other => return Err(parse_err(loc, format!("unknown header keyword '{other}'"))),
        }
    }
    let format = format.ok_or_else(|| parse_err(Location::Line(line_no), "no format line"))?;
    Ok(Header {
        format,
        elements,
        body_line: line_no + 1,
        body_offset: offset,
    })
}

struct VertexLayout {
    coords: [usize; 3],
    class: Option<usize>,
}

fn vertex_layout(element: &Element, line: usize) -> Result<VertexLayout, PlyError> {
    let find = |wanted: &str| {
        element.props.iter().position(|p| matches!(p, Property::Scalar { name, .. } if name == wanted))
    };
    let mut coords = [0; 3];
    for (slot, axis) in coords.iter_mut().zip(["x", "y", "z"]) {
        let pos = find(axis).ok_or_else(|| {
            parse_err(Location::Line(line), format!("vertex property '{axis}' is missing"))
        })?;
        if let Property::Scalar { ty, .. } = element.props[pos] {
            if !ty.is_float() {
                return Err(parse_err(
                    Location::Line(line),
                    format!("vertex property '{axis}' must be float or double"),
                ));
            }
        }
        *slot = pos;
    }
    Ok(VertexLayout {
        coords,
        class: find("class"),
    })
}

fn label_from(value: f64, location: Location) -> Result<usize, PlyError> {
    if value >= 0.0 && value.fract() == 0.0 && value.is_finite() {
        Ok(value as usize)
    } else {
        Err(parse_err(location, format!("class value {value} is not a non-negative integer")))
    }
}

/// Parsed PLY contents.
#[derive(Debug, Clone, PartialEq)]
pub struct PlyCloud {
    pub cloud: PointCloud,
    pub labels: Option<Vec<usize>>,
}

impl PlyCloud {
    pub fn into_labeled(self) -> Option<LabeledCloud> {
        let labels = self.labels?;
        Some(LabeledCloud::new(self.cloud, labels))
    }
}

pub fn read_ply(path: impl AsRef<Path>) -> Result<PlyCloud, PlyError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| PlyError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_ply(&bytes)
}

pub fn parse_ply(bytes: &[u8]) -> Result<PlyCloud, PlyError> {
    let header = parse_header(bytes)?;
    let vertex_pos = header
        .elements
        .iter()
        .position(|e| e.name == "vertex")
        .ok_or_else(|| parse_err(Location::Line(header.body_line - 1), "no vertex element"))?;
    let layout = vertex_layout(&header.elements[vertex_pos], header.body_line - 1)?;
    match header.format {
        PlyFormat::Ascii => parse_ascii(bytes, &header, vertex_pos, &layout),
        PlyFormat::BinaryLittleEndian => parse_binary(bytes, &header, vertex_pos, &layout),
    }
}

fn parse_ascii(
    bytes: &[u8],
    header: &Header,
    vertex_pos: usize,
    layout: &VertexLayout,
) -> Result<PlyCloud, PlyError> {
    let body = std::str::from_utf8(&bytes[header.body_offset..])
        .map_err(|_| parse_err(Location::Line(header.body_line), "ascii body is not valid text"))?;
    let mut lines = body
        .lines()
        .enumerate()
        .map(|(i, l)| (header.body_line + i, l))
        .filter(|(_, l)| !l.trim().is_empty());
    let mut next_line = header.body_line;
    let mut points = Vec::new();
    let mut labels = layout.class.map(|_| Vec::new());
    for (e_idx, element) in header.elements.iter().enumerate() {
        for i in 0..element.count {
            let Some((line_no, line)) = lines.next() else {
                return Err(parse_err(
                    Location::Line(next_line),
                    format!(
                        "element '{}' declares {} entries but only {i} are present",
                        element.name, element.count
                    ),
                ));
            };
            next_line = line_no + 1;
            if e_idx != vertex_pos {
                continue;
            }
            let loc = Location::Line(line_no);
            let values = line
                .split_whitespace()
                .map(|t| t.parse::<f64>().map_err(|_| parse_err(loc, format!("bad number '{t}'"))))
                .collect::<Result<Vec<_>, _>>()?;
            // flatten scalar slots, expanding lists
            let mut slots = Vec::with_capacity(element.props.len());
            let mut cursor = 0;
            for prop in &element.props {
                match prop {
                    Property::Scalar { .. } => {
                        slots.push(cursor);
                        cursor += 1;
                    }
                    Property::List { .. } => {
                        let n = *values
                            .get(cursor)
                            .ok_or_else(|| parse_err(loc, "vertex line is too short"))?;
                        slots.push(cursor);
                        cursor += 1 + n as usize;
                    }
                }
            }
            if cursor != values.len() {
                return Err(parse_err(
                    loc,
                    format!("vertex line has {} values, expected {cursor}", values.len()),
                ));
            }
            let c = layout.coords.map(|p| values[slots[p]]);
            points.push(c);
            if let (Some(labels), Some(p)) = (labels.as_mut(), layout.class) {
                labels.push(label_from(values[slots[p]], loc)?);
            }
        }
    }
    Ok(PlyCloud {
        cloud: PointCloud::new(points),
        labels,
    })
}

fn parse_binary(
    bytes: &[u8],
    header: &Header,
    vertex_pos: usize,
    layout: &VertexLayout,
) -> Result<PlyCloud, PlyError> {
    let mut offset = header.body_offset;
    let take = |offset: &mut usize, n: usize, what: &str| -> Result<&[u8], PlyError> {
        if *offset + n > bytes.len() {
            return Err(parse_err(
                Location::Byte(*offset),
                format!("file ends inside {what}"),
            ));
        }
        let s = &bytes[*offset..*offset + n];
        *offset += n;
        Ok(s)
    };
    let mut points = Vec::new();
    let mut labels = layout.class.map(|_| Vec::new());
    for (e_idx, element) in header.elements.iter().enumerate() {
        for i in 0..element.count {
            let what = format!("{} {i} of {}", element.name, element.count);
            let mut scalars = Vec::with_capacity(element.props.len());
            for prop in &element.props {
                match *prop {
                    Property::Scalar { ty, .. } => {
                        scalars.push(ty.read_le(take(&mut offset, ty.size(), &what)?));
                    }
                    Property::List { count, item } => {
                        let n = count.read_le(take(&mut offset, count.size(), &what)?);
                        take(&mut offset, n as usize * item.size(), &what)?;
                        scalars.push(n);
                    }
                }
            }
            if e_idx == vertex_pos {
                points.push(layout.coords.map(|p| scalars[p]));
                if let (Some(labels), Some(p)) = (labels.as_mut(), layout.class) {
                    labels.push(label_from(scalars[p], Location::Byte(offset))?);
                }
            }
        }
    }
    Ok(PlyCloud {
        cloud: PointCloud::new(points),
        labels,
    })
}

/// Serializes a cloud with `double` coordinates and an optional `int class`.
pub fn encode_ply(cloud: &PointCloud, labels: Option<&[usize]>, format: PlyFormat) -> Vec<u8> {
    let mut header = String::from("ply\n");
    header.push_str(match format {
        PlyFormat::Ascii => "format ascii 1.0\n",
        PlyFormat::BinaryLittleEndian => "format binary_little_endian 1.0\n",
    });
    let _ = writeln!(header, "element vertex {}", cloud.len());
    header.push_str("property double x\nproperty double y\nproperty double z\n");
    if labels.is_some() {
        header.push_str("property int class\n");
    }
    header.push_str("end_header\n");
    let mut out = header.into_bytes();
    for (i, p) in cloud.points.iter().enumerate() {
        let label = labels.map(|l| l[i]);
        match format {
            PlyFormat::Ascii => {
                let mut line = format!("{} {} {}", p[0], p[1], p[2]);
                if let Some(l) = label {
                    let _ = write!(line, " {l}");
                }
                line.push('\n');
                out.extend_from_slice(line.as_bytes());
            }
            PlyFormat::BinaryLittleEndian => {
                for v in p {
                    out.extend_from_slice(&v.to_le_bytes());
                }
                if let Some(l) = label {
                    out.extend_from_slice(&(l as i32).to_le_bytes());
                }
            }
        }
    }
    out
}

pub fn write_ply(
    path: impl AsRef<Path>,
    cloud: &PointCloud,
    labels: Option<&[usize]>,
    format: PlyFormat,
) -> Result<(), PlyError> {
    let path = path.as_ref();
    fs::write(path, encode_ply(cloud, labels, format)).map_err(|source| PlyError::Io {
        path: path.display().to_string(),
        source,
    })
}
