use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geom3d::Vec3;

/// Wavefront OBJ text: `v` lines, then 1-indexed `f` lines.
pub fn obj_to_string(vertices: &[Vec3], faces: &[[usize; 3]]) -> String {
    let mut out = String::with_capacity(vertices.len() * 40 + faces.len() * 20);
    for v in vertices {
        writeln!(out, "v {} {} {}", v.x, v.y, v.z).unwrap();
    }
    for f in faces {
        writeln!(out, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1).unwrap();
    }
    out
}

pub fn write_obj(vertices: &[Vec3], faces: &[[usize; 3]], path: &Path) -> Result<()> {
    if let Some(f) = faces.iter().find(|f| f.iter().any(|i| *i >= vertices.len())) {
        return Err(Error::InvalidSpec(format!("face {f:?} references a missing vertex")));
    }
    std::fs::write(path, obj_to_string(vertices, faces)).map_err(|e| Error::io(path, e))
}
