//! PLY input/output, voxelization and grid-aligned block partitioning.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::checkpoint::write_atomic;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::tensor::{build_sparse_tensor, Coord3, SparseTensor};

/// Default block edge length.
pub const BLOCK_SIZE: i32 = 64;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud {
    pub positions: Vec<[f64; 3]>,
    pub colors: Vec<[u8; 3]>,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PlyFormat {
    Ascii,
    #[default]
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
    fn parse(name: &str) -> Option<Scalar> {
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

#[derive(Debug)]
enum Property {
    Scalar(String, Scalar),
    List,
}

#[derive(Debug)]
struct Element {
    name: String,
    count: usize,
    props: Vec<Property>,
}

struct Header {
    format: PlyFormat,
    elements: Vec<Element>,
}

fn header_err(msg: impl Into<String>) -> Error {
    Error::MalformedHeader(msg.into())
}

fn read_header<R: BufRead>(r: &mut R) -> Result<Header> {
    let mut line = String::new();
    let mut next = |line: &mut String| -> Result<bool> {
        line.clear();
        let n = r.read_line(line)?;
        Ok(n > 0)
    };
    if !next(&mut line)? || line.trim_end() != "ply" {
        return Err(header_err("missing `ply` magic"));
    }
    let mut format = None;
    let mut elements: Vec<Element> = Vec::new();
    loop {
        if !next(&mut line)? {
            return Err(header_err("missing end_header"));
        }
        let mut words = line.split_whitespace();
        match words.next() {
            Some("format") => {
                format = Some(match words.next() {
                    Some("ascii") => PlyFormat::Ascii,
                    Some("binary_little_endian") => PlyFormat::BinaryLittleEndian,
                    Some(other) if other == "binary_big_endian" => {
                        return Err(Error::UnsupportedFormat(other.to_string()))
                    }
                    other => return Err(header_err(format!("unknown format {other:?}"))),
                });
            }
            Some("element") => {
                let name = words
                    .next()
                    .ok_or_else(|| header_err("element without name"))?;
                let count = words
                    .next()
                    .and_then(|c| c.parse().ok())
                    .ok_or_else(|| header_err(format!("element `{name}` without count")))?;
                elements.push(Element {
                    name: name.to_string(),
                    count,
                    props: Vec::new(),
                });
            }
            Some("property") => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| header_err("property before element"))?;
                let ty = words
                    .next()
                    .ok_or_else(|| header_err("property without type"))?;
                if ty == "list" {
                    if words.nth(2).is_none() {
                        return Err(header_err("list property without name"));
                    }
                    el.props.push(Property::List);
                } else {
                    let scalar = Scalar::parse(ty)
                        .ok_or_else(|| header_err(format!("unknown type `{ty}`")))?;
                    let name = words
                        .next()
                        .ok_or_else(|| header_err("property without name"))?;
                    el.props.push(Property::Scalar(name.to_string(), scalar));
                }
            }
            Some("end_header") => break,
            Some("comment") | Some("obj_info") | None => {}
            Some(other) => return Err(header_err(format!("unexpected keyword `{other}`"))),
        }
    }
    let format = format.ok_or_else(|| header_err("missing format line"))?;
    Ok(Header { format, elements })
}

const REQUIRED: [&str; 6] = ["x", "y", "z", "red", "green", "blue"];

fn body_err(msg: impl Into<String>) -> Error {
    Error::MalformedBody(msg.into())
}

fn color_value(v: f64) -> Result<u8> {
    if v.fract() != 0.0 || !(0.0..=255.0).contains(&v) {
        return Err(body_err(format!("color value {v} is not in 0..=255")));
    }
    Ok(v as u8)
}

/// Reads an ASCII or binary little-endian PLY with `x y z red green blue`
/// vertex properties. Other properties and elements are ignored.
pub fn read_ply(path: &Path) -> Result<PointCloud> {
    let file = fs::File::open(path)?;
    read_ply_from(&mut BufReader::new(file))
}

pub fn read_ply_from<R: BufRead>(r: &mut R) -> Result<PointCloud> {
    let (positions, colors) = read_vertices(r, true)?;
    Ok(PointCloud {
        positions,
        colors: colors.expect("colors are required"),
    })
}

/// Positions of a PLY, plus its colors when all three color properties
/// are present.
pub fn read_ply_geometry(path: &Path) -> Result<(Vec<[f64; 3]>, Option<Vec<[u8; 3]>>)> {
    let file = fs::File::open(path)?;
    read_vertices(&mut BufReader::new(file), false)
}

fn read_vertices<R: BufRead>(
    r: &mut R,
    require_colors: bool,
) -> Result<(Vec<[f64; 3]>, Option<Vec<[u8; 3]>>)> {
    let header = read_header(r)?;
    let vi = header
        .elements
        .iter()
        .position(|e| e.name == "vertex")
        .ok_or_else(|| header_err("no vertex element"))?;
    let vertex = &header.elements[vi];
    let find = |name: &str| {
        vertex
            .props
            .iter()
            .position(|p| matches!(p, Property::Scalar(n, _) if n == name))
    };
    let mut slots = [0usize; 3];
    for (slot, name) in slots.iter_mut().zip(&REQUIRED[..3]) {
        *slot = find(name).ok_or_else(|| Error::MissingProperty(name.to_string()))?;
    }
    let mut color_slots = [0usize; 3];
    let mut has_colors = true;
    for (slot, name) in color_slots.iter_mut().zip(&REQUIRED[3..]) {
        match find(name) {
            Some(i) => *slot = i,
            None if require_colors => return Err(Error::MissingProperty(name.to_string())),
            None => has_colors = false,
        }
    }
    let color_slots = has_colors.then_some(color_slots);
    let mut positions = Vec::with_capacity(vertex.count);
    let mut colors = Vec::with_capacity(if has_colors { vertex.count } else { 0 });
    let mut push = |row: &[f64]| -> Result<()> {
        let pos = [row[slots[0]], row[slots[1]], row[slots[2]]];
        if pos.iter().any(|v| !v.is_finite()) {
            return Err(body_err("non-finite position"));
        }
        positions.push(pos);
        if let Some(c) = color_slots {
            colors.push([
                color_value(row[c[0]])?,
                color_value(row[c[1]])?,
                color_value(row[c[2]])?,
            ]);
        }
        Ok(())
    };
    let mut row = vec![0.0; vertex.props.len()];
    match header.format {
        PlyFormat::Ascii => {
            let mut lines = r.lines();
            let mut next_line = || -> Result<String> {
                loop {
                    match lines.next() {
                        Some(l) => {
                            let l = l?;
                            if !l.trim().is_empty() {
                                return Ok(l);
                            }
                        }
                        None => return Err(body_err("unexpected end of file")),
                    }
                }
            };
            for el in &header.elements[..vi] {
                for _ in 0..el.count {
                    next_line()?;
                }
            }
            for i in 0..vertex.count {
                let line = next_line()?;
                let mut words = line.split_whitespace();
                for (j, p) in vertex.props.iter().enumerate() {
                    let w = words
                        .next()
                        .ok_or_else(|| body_err(format!("vertex {i} is short")))?;
                    match p {
                        Property::Scalar(..) => {
                            row[j] = w
                                .parse()
                                .map_err(|_| body_err(format!("bad number `{w}`")))?;
                        }
                        Property::List => {
                            let n: usize = w
                                .parse()
                                .map_err(|_| body_err(format!("bad list length `{w}`")))?;
                            for _ in 0..n {
                                words.next().ok_or_else(|| body_err("list is short"))?;
                            }
                        }
                    }
                }
                push(&row)?;
            }
        }
        PlyFormat::BinaryLittleEndian => {
            for el in &header.elements[..vi] {
                if el.props.iter().any(|p| matches!(p, Property::List)) {
                    return Err(Error::UnsupportedFormat(format!(
                        "binary list element `{}` before vertices",
                        el.name
                    )));
                }
                let size: usize = el
                    .props
                    .iter()
                    .map(|p| match p {
                        Property::Scalar(_, s) => s.size(),
                        Property::List => 0,
                    })
                    .sum();
                std::io::copy(&mut r.take((size * el.count) as u64), &mut std::io::sink())?;
            }
            let types = vertex
                .props
                .iter()
                .map(|p| match p {
                    Property::Scalar(_, s) => Ok(*s),
                    Property::List => Err(Error::UnsupportedFormat(
                        "list property on binary vertices".into(),
                    )),
                })
                .collect::<Result<Vec<Scalar>>>()?;
            let stride: usize = types.iter().map(|t| t.size()).sum();
            let mut buf = vec![0u8; stride];
            for i in 0..vertex.count {
                r.read_exact(&mut buf).map_err(|_| {
                    body_err(format!("file ends at vertex {i} of {}", vertex.count))
                })?;
                let mut off = 0;
                for (j, t) in types.iter().enumerate() {
                    row[j] = t.read_le(&buf[off..]);
                    off += t.size();
                }
                push(&row)?;
            }
        }
    }
    Ok((positions, has_colors.then_some(colors)))
}

/// Serializes with `double` positions and `uchar` colors.
pub fn ply_bytes(pc: &PointCloud, format: PlyFormat) -> Result<Vec<u8>> {
    if pc.positions.len() != pc.colors.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} positions, {} colors",
            pc.positions.len(),
            pc.colors.len()
        )));
    }
    let mut out = Vec::new();
    let fmt = match format {
        PlyFormat::Ascii => "ascii",
        PlyFormat::BinaryLittleEndian => "binary_little_endian",
    };
    write!(
        out,
        "ply\nformat {fmt} 1.0\nelement vertex {}\n\
         property double x\nproperty double y\nproperty double z\n\
         property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n",
        pc.len()
    )?;
    for (p, c) in pc.positions.iter().zip(&pc.colors) {
        match format {
            PlyFormat::Ascii => {
                writeln!(out, "{} {} {} {} {} {}", p[0], p[1], p[2], c[0], c[1], c[2])?
            }
            PlyFormat::BinaryLittleEndian => {
                for v in p {
                    out.extend_from_slice(&v.to_le_bytes());
                }
                out.extend_from_slice(c);
            }
        }
    }
    Ok(out)
}

/// Writes atomically (temporary file, then rename).
pub fn write_ply(pc: &PointCloud, path: &Path, format: PlyFormat) -> Result<()> {
    write_atomic(path, &ply_bytes(pc, format)?)
}

/// Floors positions onto the integer grid and merges duplicates by the
/// per-channel mean color, rounded half away from zero. Features are the
/// colors as 0..255 values.
pub fn voxelize(pc: &PointCloud, bit_depth: u32) -> Result<SparseTensor> {
    if bit_depth == 0 || bit_depth > 30 {
        return Err(Error::InvalidConfig(format!("bit depth {bit_depth}")));
    }
    if pc.positions.len() != pc.colors.len() {
        return Err(Error::ShapeMismatch(
            "positions and colors differ in length".into(),
        ));
    }
    let limit = (1u64 << bit_depth) as f64;
    let mut cells: BTreeMap<Coord3, ([u64; 3], u64)> = BTreeMap::new();
    for (p, c) in pc.positions.iter().zip(&pc.colors) {
        let mut q = [0i32; 3];
        for k in 0..3 {
            let f = p[k].floor();
            if !(0.0..limit).contains(&f) {
                return Err(Error::OutOfRange { value: p[k], limit });
            }
            q[k] = f as i32;
        }
        let e = cells
            .entry(Coord3::new(q[0], q[1], q[2]))
            .or_insert(([0; 3], 0));
        for k in 0..3 {
            e.0[k] += c[k] as u64;
        }
        e.1 += 1;
    }
    let mut coords = Vec::with_capacity(cells.len());
    let mut feats = Vec::with_capacity(cells.len() * 3);
    for (coord, (sum, n)) in cells {
        coords.push(coord);
        for s in sum {
            feats.push((s as f64 / n as f64).round());
        }
    }
    let rows = coords.len();
    build_sparse_tensor(coords, Matrix::from_vec(rows, 3, feats), 1)
}

/// Colors of a tensor whose features are 0..255 values.
pub fn tensor_colors(t: &SparseTensor) -> Vec<[u8; 3]> {
    let f = t.features();
    (0..f.rows())
        .map(|r| [f[(r, 0)] as u8, f[(r, 1)] as u8, f[(r, 2)] as u8])
        .collect()
}

/// Point cloud with integer positions from a color tensor.
pub fn tensor_to_cloud(t: &SparseTensor) -> PointCloud {
    PointCloud {
        positions: t
            .coords()
            .iter()
            .map(|c| [c.x as f64, c.y as f64, c.z as f64])
            .collect(),
        colors: tensor_colors(t),
    }
}

/// One grid-aligned tile of a voxelized cloud.
#[derive(Debug, Clone)]
pub struct Block {
    pub origin: Coord3,
    /// Coordinates relative to `origin`, colors as features.
    pub tensor: SparseTensor,
}

impl Block {
    pub fn coords(&self) -> &[Coord3] {
        self.tensor.coords()
    }

    pub fn colors(&self) -> Vec<[u8; 3]> {
        tensor_colors(&self.tensor)
    }

    pub fn len(&self) -> usize {
        self.tensor.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensor.is_empty()
    }
}

/// Splits `t` into `size`-aligned blocks, sorted by origin; empty blocks
/// are omitted.
pub fn partition_blocks(t: &SparseTensor, size: i32) -> Result<Vec<Block>> {
    if size <= 0 {
        return Err(Error::InvalidConfig(format!("block size {size}")));
    }
    let mut groups: BTreeMap<Coord3, (Vec<Coord3>, Vec<f64>)> = BTreeMap::new();
    let f = t.features();
    for (r, c) in t.coords().iter().enumerate() {
        let origin = Coord3::new(
            c.x.div_euclid(size) * size,
            c.y.div_euclid(size) * size,
            c.z.div_euclid(size) * size,
        );
        let g = groups.entry(origin).or_default();
        g.0.push(Coord3::new(c.x - origin.x, c.y - origin.y, c.z - origin.z));
        g.1.extend_from_slice(f.row(r));
    }
    groups
        .into_iter()
        .map(|(origin, (coords, feats))| {
            let rows = coords.len();
            let cols = f.cols();
            Ok(Block {
                origin,
                tensor: build_sparse_tensor(coords, Matrix::from_vec(rows, cols, feats), 1)?,
            })
        })
        .collect()
}

/// Reads every `.ply` in `dir` (sorted by file name), voxelizes and
/// partitions it. Returns `(file stem, blocks)` per cloud.
pub fn load_dataset(dir: &Path, bit_depth: u32) -> Result<Vec<(String, Vec<Block>)>> {
    let mut files: Vec<_> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("ply")))
        .collect();
    files.sort();
    let mut out = Vec::with_capacity(files.len());
    for f in files {
        let pc = read_ply(&f)?;
        let t = voxelize(&pc, bit_depth)?;
        let name = f
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        out.push((name, partition_blocks(&t, BLOCK_SIZE)?));
    }
    Ok(out)
}

/// One `x y z count` line per block.
pub fn manifest_text(blocks: &[Block]) -> String {
    blocks
        .iter()
        .map(|b| format!("{} {} {} {}\n", b.origin.x, b.origin.y, b.origin.z, b.len()))
        .collect()
}

pub fn parse_manifest(text: &str) -> Result<Vec<(Coord3, usize)>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let v: Vec<i64> = l
                .split_whitespace()
                .map(|w| {
                    w.parse()
                        .map_err(|_| body_err(format!("manifest line `{l}`")))
                })
                .collect::<Result<_>>()?;
            if v.len() != 4 || v[3] < 0 {
                return Err(body_err(format!("manifest line `{l}`")));
            }
            Ok((
                Coord3::new(v[0] as i32, v[1] as i32, v[2] as i32),
                v[3] as usize,
            ))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    #[test]
    fn ascii_three_points() {
        let text = "ply\nformat ascii 1.0\ncomment hi\nelement vertex 3\nproperty float x\nproperty float y\n\
                    property float z\nproperty float nx\nproperty uchar red\nproperty uchar green\nproperty uchar blue\n\
                    end_header\n0 0 0 9 1 2 3\n1.5 2 3 9 4 5 6\n7 8 9 9 255 0 128\n";
        let pc = read_ply_from(&mut Cursor::new(text)).unwrap();
        assert_eq!(pc.len(), 3);
        assert_eq!(pc.positions[1], [1.5, 2.0, 3.0]);
        assert_eq!(pc.colors[2], [255, 0, 128]);
    }

    #[test]
    fn missing_color_property() {
        let text = "ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float y\nproperty float z\nend_header\n0 0 0\n";
        assert!(matches!(
            read_ply_from(&mut Cursor::new(text)),
            Err(Error::MissingProperty(p)) if p == "red"
        ));
    }

    #[test]
    fn geometry_without_colors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.ply");
        let text = "ply\nformat ascii 1.0\nelement vertex 2\nproperty int x\nproperty int y\nproperty int z\nend_header\n1 2 3\n4 5 6\n";
        fs::write(&path, text).unwrap();
        let (pos, colors) = read_ply_geometry(&path).unwrap();
        assert_eq!(pos, vec![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]);
        assert!(colors.is_none());
    }

    #[test]
    fn big_endian_rejected() {
        let text = "ply\nformat binary_big_endian 1.0\nelement vertex 0\nend_header\n";
        assert!(matches!(
            read_ply_from(&mut Cursor::new(text)),
            Err(Error::UnsupportedFormat(_))
        ));
        assert!(matches!(
            read_ply_from(&mut Cursor::new("plx\n")),
            Err(Error::MalformedHeader(_))
        ));
    }

    #[test]
    fn binary_with_mixed_types_and_faces() {
        let mut bytes = b"ply\nformat binary_little_endian 1.0\nelement vertex 2\nproperty int x\nproperty short y\n\
property float z\nproperty uchar red\nproperty uchar green\nproperty uchar blue\nproperty uchar alpha\n\
element face 1\nproperty list uchar int vertex_indices\nend_header\n"
            .to_vec();
        for (x, y, z, c) in [
            (5i32, -2i16, 0.5f32, [1u8, 2, 3, 4]),
            (70, 3, 1.0, [9, 8, 7, 6]),
        ] {
            bytes.extend_from_slice(&x.to_le_bytes());
            bytes.extend_from_slice(&y.to_le_bytes());
            bytes.extend_from_slice(&z.to_le_bytes());
            bytes.extend_from_slice(&c);
        }
        bytes.extend_from_slice(&[3, 0, 0, 0, 0]);
        let pc = read_ply_from(&mut Cursor::new(bytes)).unwrap();
        assert_eq!(pc.positions, vec![[5.0, -2.0, 0.5], [70.0, 3.0, 1.0]]);
        assert_eq!(pc.colors, vec![[1, 2, 3], [9, 8, 7]]);
    }

    #[test]
    fn truncated_body_reported() {
        let mut pc = PointCloud::default();
        pc.positions.push([1.0, 2.0, 3.0]);
        pc.colors.push([1, 2, 3]);
        let bytes = ply_bytes(&pc, PlyFormat::BinaryLittleEndian).unwrap();
        assert!(matches!(
            read_ply_from(&mut Cursor::new(&bytes[..bytes.len() - 1])),
            Err(Error::MalformedBody(_))
        ));
    }

    fn cloud(points: &[([f64; 3], [u8; 3])]) -> PointCloud {
        PointCloud {
            positions: points.iter().map(|p| p.0).collect(),
            colors: points.iter().map(|p| p.1).collect(),
        }
    }

    #[test]
    fn voxel_mean_rounds_half_away() {
        let t = voxelize(
            &cloud(&[([1.2, 0.0, 0.0], [10, 0, 0]), ([1.9, 0.5, 0.9], [20, 1, 0])]),
            4,
        )
        .unwrap();
        assert_eq!(tensor_colors(&t), vec![[15, 1, 0]]);
        let t = voxelize(
            &cloud(&[([1.0, 0.0, 0.0], [10, 0, 0]), ([1.0, 0.0, 0.0], [21, 0, 0])]),
            4,
        )
        .unwrap();
        assert_eq!(tensor_colors(&t)[0][0], 16);
    }

    #[test]
    fn voxelize_is_idempotent_and_checks_range() {
        let pc = cloud(&[([3.0, 1.0, 2.0], [1, 2, 3]), ([0.0, 0.0, 0.0], [4, 5, 6])]);
        let t = voxelize(&pc, 2).unwrap();
        let again = voxelize(&tensor_to_cloud(&t), 2).unwrap();
        assert_eq!(t.coords(), again.coords());
        assert_eq!(t.features(), again.features());
        assert!(matches!(voxelize(&pc, 1), Err(Error::OutOfRange { .. })));
        assert!(matches!(
            voxelize(&cloud(&[([-0.5, 0.0, 0.0], [0, 0, 0])]), 4),
            Err(Error::OutOfRange { .. })
        ));
    }

    #[test]
    fn partition_boundary() {
        let pc = cloud(&[
            ([0.0, 0.0, 0.0], [1, 1, 1]),
            ([64.0, 0.0, 0.0], [2, 2, 2]),
            ([63.0, 5.0, 1.0], [3, 3, 3]),
        ]);
        let blocks = partition_blocks(&voxelize(&pc, 8).unwrap(), 64).unwrap();
        assert_eq!(blocks.len(), 2);
        assert_eq!(blocks[0].origin, Coord3::new(0, 0, 0));
        assert_eq!(blocks[0].len(), 2);
        assert_eq!(blocks[1].origin, Coord3::new(64, 0, 0));
        assert_eq!(blocks[1].coords(), &[Coord3::new(0, 0, 0)]);
        assert_eq!(blocks[1].colors(), vec![[2, 2, 2]]);
    }

    #[test]
    fn manifest_round_trip() {
        let pc = cloud(&[
            ([0.0, 0.0, 0.0], [1, 1, 1]),
            ([200.0, 64.0, 1.0], [2, 2, 2]),
        ]);
        let blocks = partition_blocks(&voxelize(&pc, 8).unwrap(), 64).unwrap();
        let text = manifest_text(&blocks);
        assert_eq!(text, "0 0 0 1\n192 64 0 1\n");
        assert_eq!(
            parse_manifest(&text).unwrap(),
            vec![(Coord3::new(0, 0, 0), 1), (Coord3::new(192, 64, 0), 1)]
        );
        assert!(parse_manifest("1 2 3\n").is_err());
    }
}
