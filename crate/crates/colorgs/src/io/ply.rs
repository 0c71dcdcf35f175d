//! Scene checkpoints as binary little-endian PLY, one vertex element per
//! primitive. All properties are stored as doubles so checkpoints round-trip
//! the engine state exactly.

use std::io::{BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{Vector2, Vector3};

use crate::error::{Error, Result};
use crate::scene::{AnchorSpec, GaussianPrimitive, GaussianScene};

fn property_names(sh_degree: usize, anchor_count: usize) -> Vec<String> {
    let mut names: Vec<String> = ["x", "y", "z"].iter().map(|s| s.to_string()).collect();
    for i in 0..4 {
        names.push(format!("rot_{i}"));
    }
    for i in 0..3 {
        names.push(format!("log_scale_{i}"));
    }
    names.push("opacity_logit".into());
    for i in 0..3 {
        names.push(format!("f_dc_{i}"));
    }
    let rest = crate::math::sh_coeff_count(sh_degree) - 1;
    for i in 0..rest * 3 {
        names.push(format!("f_rest_{i}"));
    }
    for i in 0..anchor_count {
        names.push(format!("anchor_{i}_dx"));
        names.push(format!("anchor_{i}_dy"));
        names.push(format!("anchor_{i}_r"));
        names.push(format!("anchor_{i}_g"));
        names.push(format!("anchor_{i}_b"));
    }
    names
}

fn primitive_values(p: &GaussianPrimitive) -> Vec<f64> {
    let mut v = vec![p.center.x, p.center.y, p.center.z];
    v.extend_from_slice(&p.rotation);
    v.extend_from_slice(p.log_scale.as_slice());
    v.push(p.opacity_logit);
    v.extend_from_slice(p.sh_coeffs[0].as_slice());
    for coeff in &p.sh_coeffs[1..] {
        v.extend_from_slice(coeff.as_slice());
    }
    for a in &p.anchors {
        v.push(a.offset.x);
        v.push(a.offset.y);
        v.extend_from_slice(a.color.as_slice());
    }
    v
}

pub fn write_ply(path: &Path, scene: &GaussianScene) -> Result<()> {
    let anchor_count = scene.anchor_count();
    let names = property_names(scene.sh_degree, anchor_count);

    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    write!(w, "ply\nformat binary_little_endian 1.0\n")?;
    write!(w, "comment colorgs scene checkpoint\n")?;
    write!(w, "comment sh_degree {}\n", scene.sh_degree)?;
    write!(w, "element vertex {}\n", scene.len())?;
    for name in &names {
        write!(w, "property double {name}\n")?;
    }
    write!(w, "end_header\n")?;

    for p in &scene.primitives {
        let values = primitive_values(p);
        debug_assert_eq!(values.len(), names.len());
        for v in values {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_ply(path: &Path) -> Result<GaussianScene> {
    let mut data = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| Error::Dataset {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })?
        .read_to_end(&mut data)?;
    let bad = |detail: String| Error::Format {
        path: path.to_path_buf(),
        detail,
    };

    let header_end = data
        .windows(11)
        .position(|w| w == b"end_header\n")
        .ok_or_else(|| bad("missing end_header".into()))?
        + 11;
    let header = std::str::from_utf8(&data[..header_end]).map_err(|e| bad(e.to_string()))?;

    let mut count = None;
    let mut names = Vec::new();
    let mut sh_degree = None;
    for line in header.lines() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        match fields.as_slice() {
            ["format", fmt, _] if *fmt != "binary_little_endian" => {
                return Err(bad(format!("unsupported PLY format {fmt}")));
            }
            ["comment", "sh_degree", d] => {
                sh_degree =
                    Some(d.parse::<usize>().map_err(|_| bad("bad sh_degree comment".into()))?);
            }
            ["element", "vertex", n] => {
                count = Some(n.parse::<usize>().map_err(|_| bad("bad vertex count".into()))?);
            }
            ["property", "double", name] => names.push(name.to_string()),
            ["property", ty, _] => return Err(bad(format!("unsupported property type {ty}"))),
            _ => {}
        }
    }
    let count = count.ok_or_else(|| bad("missing vertex element".into()))?;

    // Infer layout from the property list.
    let rest_values = names.iter().filter(|n| n.starts_with("f_rest_")).count();
    let anchor_values = names.iter().filter(|n| n.starts_with("anchor_")).count();
    if rest_values % 3 != 0 || anchor_values % 5 != 0 {
        return Err(bad("inconsistent SH or anchor property count".into()));
    }
    let coeffs = rest_values / 3 + 1;
    let degree = match coeffs {
        1 => 0,
        4 => 1,
        9 => 2,
        16 => 3,
        other => return Err(bad(format!("unsupported SH coefficient count {other}"))),
    };
    if let Some(d) = sh_degree {
        if d != degree {
            return Err(bad("sh_degree comment contradicts property list".into()));
        }
    }
    let anchor_count = anchor_values / 5;
    let expected = property_names(degree, anchor_count);
    if names != expected {
        return Err(bad("unexpected property layout".into()));
    }

    let stride = names.len() * 8;
    let payload = &data[header_end..];
    if payload.len() < stride * count {
        return Err(bad("truncated vertex payload".into()));
    }

    let mut scene = GaussianScene::new(degree);
    for row in 0..count {
        let mut values = Vec::with_capacity(names.len());
        let base = row * stride;
        for k in 0..names.len() {
            let bytes: [u8; 8] = payload[base + k * 8..base + k * 8 + 8].try_into().unwrap();
            values.push(f64::from_le_bytes(bytes));
        }
        let mut it = values.into_iter();
        let mut next = || it.next().expect("value count checked above");
        let center = Vector3::new(next(), next(), next());
        let rotation = [next(), next(), next(), next()];
        let log_scale = Vector3::new(next(), next(), next());
        let opacity_logit = next();
        let mut sh_coeffs = Vec::with_capacity(coeffs);
        for _ in 0..coeffs {
            sh_coeffs.push(Vector3::new(next(), next(), next()));
        }
        let mut anchors = Vec::with_capacity(anchor_count);
        for _ in 0..anchor_count {
            let offset = Vector2::new(next(), next());
            let color = Vector3::new(next(), next(), next());
            anchors.push(AnchorSpec::new(offset, color));
        }
        scene.primitives.push(GaussianPrimitive {
            center,
            rotation,
            log_scale,
            opacity_logit,
            sh_coeffs,
            anchors,
        });
    }
    Ok(scene)
}
