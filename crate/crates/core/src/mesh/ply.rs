//! Binary little-endian PLY with per-vertex color, class and instance.

use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{SemanticMesh, TriMesh};
use crate::error::{Error, Result};

const VERTEX_PROPS: [(&str, &str); 8] = [
    ("float", "x"),
    ("float", "y"),
    ("float", "z"),
    ("uchar", "red"),
    ("uchar", "green"),
    ("uchar", "blue"),
    ("ushort", "class_id"),
    ("ushort", "instance_id"),
];
const FACE_PROP: &str = "property list uchar uint vertex_indices";

pub fn write_ply(path: &Path, mesh: &SemanticMesh) -> Result<()> {
    mesh.validate()?;
    if let Some(&id) = mesh.instances.iter().find(|&&i| i > u16::MAX as u32) {
        return Err(Error::contract(format!("instance id {id} does not fit in 16 bits")));
    }
    let mut f = BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "ply\nformat binary_little_endian 1.0")?;
    writeln!(f, "element vertex {}", mesh.mesh.vertices.len())?;
    for (ty, name) in VERTEX_PROPS {
        writeln!(f, "property {ty} {name}")?;
    }
    writeln!(f, "element face {}\n{FACE_PROP}\nend_header", mesh.mesh.triangles.len())?;
    for (i, v) in mesh.mesh.vertices.iter().enumerate() {
        for c in v {
            f.write_all(&(*c as f32).to_le_bytes())?;
        }
        f.write_all(&mesh.colors[i])?;
        f.write_all(&mesh.classes[i].to_le_bytes())?;
        f.write_all(&(mesh.instances[i] as u16).to_le_bytes())?;
    }
    for t in &mesh.mesh.triangles {
        f.write_all(&[3u8])?;
        for i in t {
            f.write_all(&i.to_le_bytes())?;
        }
    }
    f.flush()?;
    Ok(())
}

/// Reads a mesh written by [`write_ply`].
pub fn read_ply(path: &Path) -> Result<SemanticMesh> {
    let bad = |d: &str| Error::format(path, d.to_string());
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let mut header = Vec::new();
    loop {
        let mut line = String::new();
        if r.read_line(&mut line)? == 0 {
            return Err(bad("missing end_header"));
        }
        let line = line.trim_end().to_string();
        if line == "end_header" {
            break;
        }
        header.push(line);
    }
    let mut expected = vec!["ply".to_string(), "format binary_little_endian 1.0".to_string()];
    let count = |prefix: &str, line: Option<&String>| -> Result<usize> {
        line.and_then(|l| l.strip_prefix(prefix))
            .and_then(|n| n.parse().ok())
            .ok_or_else(|| bad(&format!("expected '{prefix}<count>'")))
    };
    let nv = count("element vertex ", header.get(2))?;
    expected.push(format!("element vertex {nv}"));
    expected.extend(VERTEX_PROPS.iter().map(|(t, n)| format!("property {t} {n}")));
    let nf = count("element face ", header.get(expected.len()))?;
    expected.push(format!("element face {nf}"));
    expected.push(FACE_PROP.to_string());
    if header != expected {
        return Err(bad("unsupported PLY layout"));
    }

    let mut buf = vec![0u8; nv * 19];
    r.read_exact(&mut buf).map_err(|_| bad("truncated vertex data"))?;
    let mut out = SemanticMesh {
        mesh: TriMesh {
            vertices: Vec::with_capacity(nv),
            triangles: Vec::with_capacity(nf),
        },
        ..Default::default()
    };
    for rec in buf.chunks_exact(19) {
        let f = |o: usize| f32::from_le_bytes(rec[o..o + 4].try_into().unwrap()) as f64;
        out.mesh.vertices.push([f(0), f(4), f(8)]);
        out.colors.push([rec[12], rec[13], rec[14]]);
        out.classes.push(u16::from_le_bytes([rec[15], rec[16]]));
        out.instances.push(u16::from_le_bytes([rec[17], rec[18]]) as u32);
    }
    let mut buf = vec![0u8; nf * 13];
    r.read_exact(&mut buf).map_err(|_| bad("truncated face data"))?;
    for rec in buf.chunks_exact(13) {
        if rec[0] != 3 {
            return Err(bad("only triangle faces are supported"));
        }
        let i = |o: usize| u32::from_le_bytes(rec[o..o + 4].try_into().unwrap());
        out.mesh.triangles.push([i(1), i(5), i(9)]);
    }
    out.validate().map_err(|e| bad(&e.to_string()))?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ply_round_trip() {
        let m = SemanticMesh {
            mesh: TriMesh {
                vertices: vec![[0.0, 0.0, 0.0], [1.5, 0.0, -2.25], [0.0, 3.0, 0.5]],
                triangles: vec![[0, 1, 2]],
            },
            classes: vec![1, 13, 0],
            instances: vec![7, 0, 0],
            colors: vec![[1, 2, 3], [4, 5, 6], [7, 8, 9]],
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ply");
        write_ply(&p, &m).unwrap();
        assert_eq!(read_ply(&p).unwrap(), m);
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 2]).unwrap();
        assert!(matches!(read_ply(&p), Err(Error::Format { .. })));
    }
}
