//! Binary little-endian PLY in the common 3DGS checkpoint layout.
//!
//! Scales are stored as logs, opacity as a logit and SH as `f_dc_*` plus
//! channel-major `f_rest_*` blocks.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use super::{canonical_quaternion, sh_basis_count, Gaussian, GaussianCloud, MAX_SH_DEGREE};
use crate::error::{Error, Result};

const OPACITY_EPS: f64 = 1e-7;

fn logit(o: f64) -> f64 {
    let o = o.clamp(OPACITY_EPS, 1.0 - OPACITY_EPS);
    (o / (1.0 - o)).ln()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn property_names(sh_degree: usize) -> Vec<String> {
    let mut names: Vec<String> = ["x", "y", "z"].iter().map(|s| s.to_string()).collect();
    names.extend((0..3).map(|i| format!("scale_{i}")));
    names.extend((0..4).map(|i| format!("rot_{i}")));
    names.push("opacity".into());
    names.extend((0..3).map(|i| format!("f_dc_{i}")));
    let rest = 3 * (sh_basis_count(sh_degree) - 1);
    names.extend((0..rest).map(|i| format!("f_rest_{i}")));
    names
}

/// Serialises a cloud to PLY bytes.
pub fn write_cloud_ply(cloud: &GaussianCloud, mut out: impl Write) -> std::io::Result<()> {
    let names = property_names(cloud.sh_degree());
    let mut header = format!(
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\n",
        cloud.len()
    );
    for n in &names {
        header.push_str(&format!("property float {n}\n"));
    }
    header.push_str("end_header\n");
    out.write_all(header.as_bytes())?;

    let basis = sh_basis_count(cloud.sh_degree());
    let mut record = Vec::with_capacity(names.len() * 4);
    for g in cloud.gaussians() {
        record.clear();
        let q = canonical_quaternion(g.rotation);
        let mut vals: Vec<f64> = Vec::with_capacity(names.len());
        vals.extend(g.position);
        vals.extend(g.scale.map(f64::ln));
        vals.extend(q);
        vals.push(logit(g.opacity));
        vals.extend(&g.sh[..3]);
        for c in 0..3 {
            for b in 1..basis {
                vals.push(g.sh[3 * b + c]);
            }
        }
        for v in vals {
            record.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out.write_all(&record)?;
    }
    Ok(())
}

pub fn save_cloud_ply(cloud: &GaussianCloud, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = std::io::BufWriter::new(file);
    write_cloud_ply(cloud, &mut out)
        .and_then(|_| out.flush())
        .map_err(|e| Error::io(path, e))
}

#[derive(Clone, Copy)]
enum ScalarType {
    F32,
    F64,
    Other(usize),
}

impl ScalarType {
    fn parse(name: &str) -> Result<Self> {
        Ok(match name {
            "float" | "float32" => ScalarType::F32,
            "double" | "float64" => ScalarType::F64,
            "char" | "uchar" | "int8" | "uint8" => ScalarType::Other(1),
            "short" | "ushort" | "int16" | "uint16" => ScalarType::Other(2),
            "int" | "uint" | "int32" | "uint32" => ScalarType::Other(4),
            other => return Err(Error::format(format!("unsupported ply type {other:?}"))),
        })
    }

    fn size(self) -> usize {
        match self {
            ScalarType::F32 => 4,
            ScalarType::F64 => 8,
            ScalarType::Other(n) => n,
        }
    }
}

/// Parses PLY bytes into a cloud with activated attributes.
pub fn read_cloud_ply(input: impl Read) -> Result<GaussianCloud> {
    let mut reader = BufReader::new(input);
    let mut line = String::new();
    let mut next_line = |reader: &mut BufReader<_>| -> Result<String> {
        line.clear();
        let n = reader
            .read_line(&mut line)
            .map_err(|e| Error::format(format!("ply header: {e}")))?;
        if n == 0 {
            return Err(Error::format("ply header ended before end_header"));
        }
        Ok(line.trim().to_string())
    };

    if next_line(&mut reader)? != "ply" {
        return Err(Error::format("missing ply magic"));
    }
    let mut count = None;
    let mut in_vertex = false;
    let mut props: Vec<(String, ScalarType)> = Vec::new();
    loop {
        let l = next_line(&mut reader)?;
        let parts: Vec<&str> = l.split_whitespace().collect();
        match parts.as_slice() {
            ["end_header"] => break,
            ["format", fmt, _] => {
                if *fmt != "binary_little_endian" {
                    return Err(Error::format(format!("unsupported ply format {fmt}")));
                }
            }
            ["element", name, n] => {
                in_vertex = *name == "vertex";
                if in_vertex {
                    count = Some(n.parse::<usize>().map_err(|_| {
                        Error::format(format!("bad vertex count {n:?}"))
                    })?);
                } else if count.is_none() {
                    return Err(Error::format(format!("unexpected element {name} before vertex")));
                }
            }
            ["property", "list", ..] if in_vertex => {
                return Err(Error::format("list properties are not supported on vertices"));
            }
            ["property", ty, name] if in_vertex => {
                props.push((name.to_string(), ScalarType::parse(ty)?));
            }
            _ => {}
        }
    }
    let count = count.ok_or_else(|| Error::format("ply has no vertex element"))?;

    let mut slot: HashMap<&str, usize> = HashMap::new();
    for (i, (name, _)) in props.iter().enumerate() {
        if slot.insert(name.as_str(), i).is_some() {
            return Err(Error::format(format!("duplicate property {name:?}")));
        }
    }
    let rest_count = props.iter().filter(|(n, _)| n.starts_with("f_rest_")).count();
    let sh_degree = (0..=MAX_SH_DEGREE)
        .find(|&l| 3 * (sh_basis_count(l) - 1) == rest_count)
        .ok_or_else(|| Error::format(format!("{rest_count} f_rest properties match no sh degree")))?;
    let required = property_names(sh_degree);
    let columns = required
        .iter()
        .map(|name| {
            slot.get(name.as_str())
                .copied()
                .ok_or_else(|| Error::format(format!("missing property {name:?}")))
        })
        .collect::<Result<Vec<_>>>()?;

    let offsets: Vec<usize> = props
        .iter()
        .scan(0, |acc, (_, t)| {
            let o = *acc;
            *acc += t.size();
            Some(o)
        })
        .collect();
    let stride: usize = props.iter().map(|(_, t)| t.size()).sum();
    let mut record = vec![0u8; stride];
    let basis = sh_basis_count(sh_degree);
    let mut gaussians = Vec::with_capacity(count);
    let mut vals = vec![0.0f64; required.len()];
    for index in 0..count {
        reader
            .read_exact(&mut record)
            .map_err(|_| Error::format(format!("truncated ply body at record {index}")))?;
        for (v, &col) in vals.iter_mut().zip(&columns) {
            let o = offsets[col];
            *v = match props[col].1 {
                ScalarType::F32 => f32::from_le_bytes(record[o..o + 4].try_into().unwrap()) as f64,
                ScalarType::F64 => f64::from_le_bytes(record[o..o + 8].try_into().unwrap()),
                ScalarType::Other(_) => {
                    return Err(Error::format(format!(
                        "property {:?} must be float or double",
                        props[col].0
                    )))
                }
            };
        }
        if let Some(k) = vals.iter().position(|v| !v.is_finite()) {
            return Err(Error::data(format!(
                "record {index}: non-finite value in property {:?}",
                required[k]
            )));
        }
        let mut sh = vec![0.0; 3 * basis];
        sh[..3].copy_from_slice(&vals[11..14]);
        for c in 0..3 {
            for b in 1..basis {
                sh[3 * b + c] = vals[14 + c * (basis - 1) + (b - 1)];
            }
        }
        let rotation = [vals[6], vals[7], vals[8], vals[9]];
        if rotation.iter().all(|v| *v == 0.0) {
            return Err(Error::data(format!("record {index}: zero quaternion")));
        }
        gaussians.push(Gaussian {
            position: [vals[0], vals[1], vals[2]],
            scale: [vals[3].exp(), vals[4].exp(), vals[5].exp()],
            rotation: canonical_quaternion(rotation),
            opacity: sigmoid(vals[10]),
            sh,
        });
    }
    GaussianCloud::new(gaussians, sh_degree)
}

pub fn load_cloud_ply(path: impl AsRef<Path>) -> Result<GaussianCloud> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_cloud_ply(file).map_err(|e| e.context(path.display().to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::synth_cloud;
    use proptest::prelude::*;

    fn max_diff(a: &GaussianCloud, b: &GaussianCloud) -> f64 {
        a.gaussians()
            .iter()
            .zip(b.gaussians())
            .flat_map(|(x, y)| {
                let mut d = vec![(x.opacity - y.opacity).abs()];
                d.extend((0..3).map(|k| (x.position[k] - y.position[k]).abs()));
                d.extend((0..3).map(|k| (x.scale[k] - y.scale[k]).abs()));
                d.extend((0..4).map(|k| (x.rotation[k] - y.rotation[k]).abs()));
                d.extend(x.sh.iter().zip(&y.sh).map(|(p, q)| (p - q).abs()));
                d
            })
            .fold(0.0, f64::max)
    }

    fn round_trip(c: &GaussianCloud) -> GaussianCloud {
        let mut buf = Vec::new();
        write_cloud_ply(c, &mut buf).unwrap();
        read_cloud_ply(buf.as_slice()).unwrap()
    }

    #[test]
    fn synth_round_trip_is_lossless_to_f32() {
        let c = synth_cloud(7, 50, 1.0, 1).unwrap();
        let back = round_trip(&c);
        assert_eq!(back.len(), 50);
        assert_eq!(back.sh_degree(), 1);
        assert!(max_diff(&c, &back) <= 1e-6);
    }

    fn header_with(props: &[&str], n: usize) -> Vec<u8> {
        let mut h = format!("ply\nformat binary_little_endian 1.0\nelement vertex {n}\n");
        for p in props {
            h.push_str(&format!("property float {p}\n"));
        }
        h.push_str("end_header\n");
        h.into_bytes()
    }

    const BASE: [&str; 14] = [
        "x", "y", "z", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3",
        "opacity", "f_dc_0", "f_dc_1", "f_dc_2",
    ];

    #[test]
    fn missing_opacity_names_the_property() {
        let props: Vec<&str> = BASE.iter().copied().filter(|p| *p != "opacity").collect();
        let err = read_cloud_ply(header_with(&props, 0).as_slice()).unwrap_err();
        assert!(matches!(err, Error::Format(ref m) if m.contains("opacity")), "{err}");
    }

    #[test]
    fn duplicate_property_is_rejected() {
        let mut props = BASE.to_vec();
        props.push("x");
        let err = read_cloud_ply(header_with(&props, 0).as_slice()).unwrap_err();
        assert!(matches!(err, Error::Format(ref m) if m.contains("duplicate")), "{err}");
    }

    fn one_record(vals: [f32; 14]) -> Vec<u8> {
        let mut bytes = header_with(&BASE, 1);
        for v in vals {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        bytes
    }

    #[test]
    fn half_length_quaternion_is_renormalized() {
        let bytes = one_record([0., 0., 0., -3., -3., -3., 0.5, 0., 0., 0., 0., 0., 0., 0.]);
        let c = read_cloud_ply(bytes.as_slice()).unwrap();
        assert_eq!(c.gaussians()[0].rotation, [1.0, 0.0, 0.0, 0.0]);
        assert_eq!(c.gaussians()[0].opacity, 0.5);
    }

    #[test]
    fn nan_field_is_a_data_error_with_index() {
        let bytes = one_record([0., f32::NAN, 0., -3., -3., -3., 1., 0., 0., 0., 0., 0., 0., 0.]);
        let err = read_cloud_ply(bytes.as_slice()).unwrap_err();
        assert!(matches!(err, Error::Data(ref m) if m.contains("record 0") && m.contains("\"y\"")), "{err}");
    }

    #[test]
    fn extra_properties_are_ignored() {
        let mut props = BASE.to_vec();
        props.insert(3, "nx");
        let mut bytes = header_with(&props, 1);
        let vals = [1f32, 2., 3., 9., -3., -3., -3., 1., 0., 0., 0., 0., 0., 0., 0.];
        for v in vals {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let c = read_cloud_ply(bytes.as_slice()).unwrap();
        assert_eq!(c.gaussians()[0].position, [1.0, 2.0, 3.0]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn round_trip_any_synth_cloud(seed in 0u64..10_000, n in 1usize..40, deg in 0usize..4, extent in 0.1f64..5.0) {
            let c = synth_cloud(seed, n, extent, deg).unwrap();
            let back = round_trip(&c);
            prop_assert_eq!(back.sh_degree(), deg);
            let tol = 1e-6 * extent.max(1.0);
            prop_assert!(max_diff(&c, &back) <= tol);
        }
    }
}
