//! Minimal PLY input/output.
//!
//! Two flavors are used: ASCII triangle meshes for reflection volumes and
//! binary little-endian vertex records for point clouds. The reader accepts
//! float and double scalars and skips comments.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::Vector3;

use crate::error::{Error, Result};

/// Triangle mesh with double-precision vertices.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TriMesh {
    pub vertices: Vec<Vector3<f64>>,
    pub faces: Vec<[usize; 3]>,
}

/// Named per-vertex scalar columns, one row per point.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointRecords {
    pub names: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl PointRecords {
    pub fn column(&self, name: &str) -> Result<usize> {
        self.names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::Ply(format!("missing property {name:?}")))
    }
}

/// Write an ASCII PLY triangle mesh.
pub fn save_ascii_mesh(path: &Path, mesh: &TriMesh) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    writeln!(w, "ply")?;
    writeln!(w, "format ascii 1.0")?;
    writeln!(w, "element vertex {}", mesh.vertices.len())?;
    writeln!(w, "property double x")?;
    writeln!(w, "property double y")?;
    writeln!(w, "property double z")?;
    writeln!(w, "element face {}", mesh.faces.len())?;
    writeln!(w, "property list uchar int vertex_indices")?;
    writeln!(w, "end_header")?;
    for v in &mesh.vertices {
        writeln!(w, "{} {} {}", v.x, v.y, v.z)?;
    }
    for f in &mesh.faces {
        writeln!(w, "3 {} {} {}", f[0], f[1], f[2])?;
    }
    w.flush()?;
    Ok(())
}

/// Read an ASCII PLY triangle mesh (fans polygons with more than 3 sides).
pub fn load_ascii_mesh(path: &Path) -> Result<TriMesh> {
    let file = std::fs::File::open(path)?;
    let mut r = BufReader::new(file);
    let header = read_header(&mut r)?;
    if header.format != Format::Ascii {
        return Err(Error::Ply("expected ascii mesh".into()));
    }
    let mut mesh = TriMesh::default();
    let mut lines = String::new();
    r.read_to_string(&mut lines)?;
    let mut tokens = lines.split_ascii_whitespace();
    let mut next_f64 = |what: &str| -> Result<f64> {
        tokens
            .next()
            .ok_or_else(|| Error::Ply(format!("truncated body reading {what}")))?
            .parse::<f64>()
            .map_err(|e| Error::Ply(format!("bad {what}: {e}")))
    };
    for element in &header.elements {
        match element.name.as_str() {
            "vertex" => {
                let (xi, yi, zi) = xyz_indices(element)?;
                for _ in 0..element.count {
                    let mut row = vec![0.0; element.properties.len()];
                    for (i, p) in element.properties.iter().enumerate() {
                        if p.is_list {
                            return Err(Error::Ply("list property on vertex".into()));
                        }
                        row[i] = next_f64(&p.name)?;
                    }
                    mesh.vertices.push(Vector3::new(row[xi], row[yi], row[zi]));
                }
            }
            "face" => {
                for _ in 0..element.count {
                    let n = next_f64("face size")? as usize;
                    let mut idx = Vec::with_capacity(n);
                    for _ in 0..n {
                        idx.push(next_f64("face index")? as usize);
                    }
                    for k in 1..n.saturating_sub(1) {
                        mesh.faces.push([idx[0], idx[k], idx[k + 1]]);
                    }
                }
            }
            _ => {
                for _ in 0..element.count {
                    for p in &element.properties {
                        if p.is_list {
                            let n = next_f64("list size")? as usize;
                            for _ in 0..n {
                                next_f64("list entry")?;
                            }
                        } else {
                            next_f64(&p.name)?;
                        }
                    }
                }
            }
        }
    }
    for f in &mesh.faces {
        for &i in f {
            if i >= mesh.vertices.len() {
                return Err(Error::Ply(format!("face index {i} out of range")));
            }
        }
    }
    Ok(mesh)
}

/// Write binary little-endian vertex records, all properties as double.
pub fn save_binary_points(path: &Path, records: &PointRecords) -> Result<()> {
    for row in &records.rows {
        if row.len() != records.names.len() {
            return Err(Error::Ply("row width does not match property count".into()));
        }
    }
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    writeln!(w, "ply")?;
    writeln!(w, "format binary_little_endian 1.0")?;
    writeln!(w, "element vertex {}", records.rows.len())?;
    for name in &records.names {
        writeln!(w, "property double {name}")?;
    }
    writeln!(w, "end_header")?;
    for row in &records.rows {
        for &v in row {
            w.write_f64::<LittleEndian>(v)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Read binary little-endian vertex records (float or double scalars).
pub fn load_binary_points(path: &Path) -> Result<PointRecords> {
    let file = std::fs::File::open(path)?;
    let mut r = BufReader::new(file);
    let header = read_header(&mut r)?;
    if header.format != Format::BinaryLe {
        return Err(Error::Ply("expected binary_little_endian points".into()));
    }
    let vertex = header
        .elements
        .iter()
        .find(|e| e.name == "vertex")
        .ok_or_else(|| Error::Ply("no vertex element".into()))?;
    let mut records = PointRecords::default();
    for p in &vertex.properties {
        if p.is_list {
            return Err(Error::Ply("list property on vertex".into()));
        }
        records.names.push(p.name.clone());
    }
    for _ in 0..vertex.count {
        let mut row = Vec::with_capacity(vertex.properties.len());
        for p in &vertex.properties {
            row.push(read_scalar(&mut r, p.ty)?);
        }
        records.rows.push(row);
    }
    Ok(records)
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Format {
    Ascii,
    BinaryLe,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Scalar {
    F32,
    F64,
    U8,
    I8,
    U16,
    I16,
    U32,
    I32,
}

impl Scalar {
    fn parse(s: &str) -> Result<Scalar> {
        Ok(match s {
            "float" | "float32" => Scalar::F32,
            "double" | "float64" => Scalar::F64,
            "uchar" | "uint8" => Scalar::U8,
            "char" | "int8" => Scalar::I8,
            "ushort" | "uint16" => Scalar::U16,
            "short" | "int16" => Scalar::I16,
            "uint" | "uint32" => Scalar::U32,
            "int" | "int32" => Scalar::I32,
            other => return Err(Error::Ply(format!("unsupported scalar type {other:?}"))),
        })
    }
}

#[derive(Clone, Debug)]
struct Property {
    name: String,
    ty: Scalar,
    is_list: bool,
}

#[derive(Clone, Debug)]
struct ElementDecl {
    name: String,
    count: usize,
    properties: Vec<Property>,
}

struct Header {
    format: Format,
    elements: Vec<ElementDecl>,
}

fn read_line<R: Read>(r: &mut R) -> Result<String> {
    let mut line = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        if r.read(&mut byte)? == 0 {
            return Err(Error::Ply("truncated header".into()));
        }
        if byte[0] == b'\n' {
            break;
        }
        if byte[0] != b'\r' {
            line.push(byte[0]);
        }
    }
    String::from_utf8(line).map_err(|_| Error::Ply("non-utf8 header".into()))
}

fn read_header<R: Read>(r: &mut R) -> Result<Header> {
    if read_line(r)?.trim() != "ply" {
        return Err(Error::Ply("missing ply magic".into()));
    }
    let mut format = None;
    let mut elements: Vec<ElementDecl> = Vec::new();
    loop {
        let line = read_line(r)?;
        let mut tok = line.split_ascii_whitespace();
        match tok.next() {
            Some("comment") | Some("obj_info") | None => {}
            Some("format") => {
                format = Some(match tok.next() {
                    Some("ascii") => Format::Ascii,
                    Some("binary_little_endian") => Format::BinaryLe,
                    other => return Err(Error::Ply(format!("unsupported format {other:?}"))),
                });
            }
            Some("element") => {
                let name = tok.next().ok_or_else(|| Error::Ply("element without name".into()))?;
                let count: usize = tok
                    .next()
                    .ok_or_else(|| Error::Ply("element without count".into()))?
                    .parse()
                    .map_err(|_| Error::Ply("bad element count".into()))?;
                elements.push(ElementDecl { name: name.into(), count, properties: Vec::new() });
            }
            Some("property") => {
                let element = elements
                    .last_mut()
                    .ok_or_else(|| Error::Ply("property before element".into()))?;
                let first = tok.next().ok_or_else(|| Error::Ply("bare property".into()))?;
                if first == "list" {
                    let _count_ty = Scalar::parse(
                        tok.next().ok_or_else(|| Error::Ply("list without count type".into()))?,
                    )?;
                    let ty = Scalar::parse(
                        tok.next().ok_or_else(|| Error::Ply("list without entry type".into()))?,
                    )?;
                    let name =
                        tok.next().ok_or_else(|| Error::Ply("list without name".into()))?;
                    element.properties.push(Property { name: name.into(), ty, is_list: true });
                } else {
                    let ty = Scalar::parse(first)?;
                    let name =
                        tok.next().ok_or_else(|| Error::Ply("property without name".into()))?;
                    element.properties.push(Property { name: name.into(), ty, is_list: false });
                }
            }
            Some("end_header") => break,
            Some(other) => return Err(Error::Ply(format!("unknown header line {other:?}"))),
        }
    }
    let format = format.ok_or_else(|| Error::Ply("header missing format".into()))?;
    Ok(Header { format, elements })
}

fn xyz_indices(element: &ElementDecl) -> Result<(usize, usize, usize)> {
    let find = |n: &str| {
        element
            .properties
            .iter()
            .position(|p| p.name == n)
            .ok_or_else(|| Error::Ply(format!("vertex missing {n}")))
    };
    Ok((find("x")?, find("y")?, find("z")?))
}

fn read_scalar<R: Read>(r: &mut R, ty: Scalar) -> Result<f64> {
    Ok(match ty {
        Scalar::F32 => r.read_f32::<LittleEndian>()? as f64,
        Scalar::F64 => r.read_f64::<LittleEndian>()?,
        Scalar::U8 => r.read_u8()? as f64,
        Scalar::I8 => r.read_i8()? as f64,
        Scalar::U16 => r.read_u16::<LittleEndian>()? as f64,
        Scalar::I16 => r.read_i16::<LittleEndian>()? as f64,
        Scalar::U32 => r.read_u32::<LittleEndian>()? as f64,
        Scalar::I32 => r.read_i32::<LittleEndian>()? as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ascii_mesh_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ply");
        let mesh = TriMesh {
            vertices: vec![
                Vector3::new(0.0, 0.0, 0.0),
                Vector3::new(1.0, 0.25, -0.125),
                Vector3::new(0.0, 1.0, 2.0),
                Vector3::new(1.0, 1.0, 0.3333333333333333),
            ],
            faces: vec![[0, 1, 2], [1, 3, 2]],
        };
        save_ascii_mesh(&path, &mesh).unwrap();
        let back = load_ascii_mesh(&path).unwrap();
        assert_eq!(mesh, back);
    }

    #[test]
    fn quad_faces_are_fanned() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("q.ply");
        let text = "ply\nformat ascii 1.0\nelement vertex 4\nproperty float x\nproperty float y\nproperty float z\nelement face 1\nproperty list uchar int vertex_indices\nend_header\n0 0 0\n1 0 0\n1 1 0\n0 1 0\n4 0 1 2 3\n";
        std::fs::write(&path, text).unwrap();
        let mesh = load_ascii_mesh(&path).unwrap();
        assert_eq!(mesh.faces, vec![[0, 1, 2], [0, 2, 3]]);
    }

    #[test]
    fn binary_points_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.ply");
        let records = PointRecords {
            names: vec!["x".into(), "y".into(), "z".into(), "f".into(), "o".into()],
            rows: vec![
                vec![0.1, 0.2, 0.3, 0.04, 0.9],
                vec![-1.5, 2.5, -3.5, 0.0625, 0.5],
            ],
        };
        save_binary_points(&path, &records).unwrap();
        let back = load_binary_points(&path).unwrap();
        assert_eq!(records, back);
        assert_eq!(back.column("f").unwrap(), 3);
        assert!(back.column("missing").is_err());
    }

    #[test]
    fn reads_float32_points() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.ply");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(
            b"ply\nformat binary_little_endian 1.0\nelement vertex 1\nproperty float x\nproperty float y\nproperty float z\nend_header\n",
        );
        for v in [1.0f32, 2.0, 3.0] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::write(&path, bytes).unwrap();
        let back = load_binary_points(&path).unwrap();
        assert_eq!(back.rows, vec![vec![1.0, 2.0, 3.0]]);
    }

    #[test]
    fn rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ply");
        std::fs::write(&path, "not a ply\n").unwrap();
        assert!(load_ascii_mesh(&path).is_err());
    }
}
