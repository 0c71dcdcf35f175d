//! Deformation parameters ride alongside the scene PLY as a sidecar blob:
//! a length-prefixed JSON header (backend, basis sizes, channel layout)
//! followed by per-primitive, channel-major little-endian f64 values.

use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::deform::{
    BasisSet, ChannelDeform, ChannelParams, DeformBackend, DeformationField, FourierPolySet,
    PrimitiveDeform, CHANNELS,
};
use crate::error::{Error, Result};

#[derive(Debug, Serialize, Deserialize)]
struct SidecarHeader {
    backend: DeformBackend,
    primitive_count: usize,
    channels: usize,
    basis_count: usize,
    fourier_pairs: usize,
    poly_degree: usize,
    channel_layout: Vec<String>,
}

fn channel_values(channel: &ChannelDeform, out: &mut Vec<f64>) {
    match &channel.params {
        ChannelParams::Basis(b) => {
            out.extend_from_slice(&b.weights);
            out.extend_from_slice(&b.centers);
            out.extend_from_slice(&b.log_widths);
            out.push(channel.delta);
        }
        ChannelParams::Fourier(f) => {
            out.extend_from_slice(&f.cos_coeffs);
            out.extend_from_slice(&f.sin_coeffs);
            out.extend_from_slice(&f.poly_coeffs);
        }
    }
}

fn field_shape(field: &DeformationField) -> Result<(usize, usize, usize)> {
    // Returns (basis_count, fourier_pairs, poly_degree).
    let first = field
        .primitives
        .first()
        .and_then(|p| p.channels.first())
        .ok_or_else(|| Error::Config("cannot serialize an empty deformation field".into()))?;
    Ok(match &first.params {
        ChannelParams::Basis(b) => (b.len(), 0, 0),
        ChannelParams::Fourier(f) => (0, f.cos_coeffs.len(), f.poly_coeffs.len() - 1),
    })
}

pub fn write_sidecar(path: &Path, field: &DeformationField) -> Result<()> {
    let (basis_count, fourier_pairs, poly_degree) = field_shape(field)?;
    let channel_layout = match field.backend {
        DeformBackend::Edm | DeformBackend::Gs => vec![
            format!("weights[{basis_count}]"),
            format!("centers[{basis_count}]"),
            format!("log_widths[{basis_count}]"),
            "delta".to_string(),
        ],
        DeformBackend::Fps => vec![
            format!("cos_coeffs[{fourier_pairs}]"),
            format!("sin_coeffs[{fourier_pairs}]"),
            format!("poly_coeffs[{}]", poly_degree + 1),
        ],
    };
    let header = SidecarHeader {
        backend: field.backend,
        primitive_count: field.len(),
        channels: CHANNELS,
        basis_count,
        fourier_pairs,
        poly_degree,
        channel_layout,
    };
    let header_bytes = serde_json::to_vec(&header)?;

    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
    w.write_all(&header_bytes)?;
    let mut values = Vec::new();
    for prim in &field.primitives {
        for channel in &prim.channels {
            channel_values(channel, &mut values);
        }
    }
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_sidecar(path: &Path) -> Result<DeformationField> {
    let mut data = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| Error::Dataset {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })?
        .read_to_end(&mut data)?;
    let bad = |detail: &str| Error::Format {
        path: path.to_path_buf(),
        detail: detail.into(),
    };

    if data.len() < 8 {
        return Err(bad("missing header length"));
    }
    let header_len = u64::from_le_bytes(data[..8].try_into().unwrap()) as usize;
    if data.len() < 8 + header_len {
        return Err(bad("truncated header"));
    }
    let header: SidecarHeader = serde_json::from_slice(&data[8..8 + header_len])?;
    if header.channels != CHANNELS {
        return Err(bad("unexpected channel count"));
    }

    let per_channel = match header.backend {
        DeformBackend::Edm | DeformBackend::Gs => 3 * header.basis_count + 1,
        DeformBackend::Fps => 2 * header.fourier_pairs + header.poly_degree + 1,
    };
    let total = header.primitive_count * CHANNELS * per_channel;
    let payload = &data[8 + header_len..];
    if payload.len() < total * 8 {
        return Err(bad("truncated deformation payload"));
    }

    let mut values = Vec::with_capacity(total);
    for k in 0..total {
        values.push(f64::from_le_bytes(
            payload[k * 8..k * 8 + 8].try_into().unwrap(),
        ));
    }

    let mut offset = 0;
    let mut take = |n: usize| {
        let slice = values[offset..offset + n].to_vec();
        offset += n;
        slice
    };
    let mut primitives = Vec::with_capacity(header.primitive_count);
    for _ in 0..header.primitive_count {
        let mut channels = Vec::with_capacity(CHANNELS);
        for _ in 0..CHANNELS {
            let channel = match header.backend {
                DeformBackend::Edm | DeformBackend::Gs => {
                    let weights = take(header.basis_count);
                    let centers = take(header.basis_count);
                    let log_widths = take(header.basis_count);
                    let delta = take(1)[0];
                    ChannelDeform {
                        params: ChannelParams::Basis(BasisSet {
                            weights,
                            centers,
                            log_widths,
                        }),
                        delta,
                    }
                }
                DeformBackend::Fps => {
                    let cos_coeffs = take(header.fourier_pairs);
                    let sin_coeffs = take(header.fourier_pairs);
                    let poly_coeffs = take(header.poly_degree + 1);
                    ChannelDeform {
                        params: ChannelParams::Fourier(FourierPolySet {
                            cos_coeffs,
                            sin_coeffs,
                            poly_coeffs,
                        }),
                        delta: 0.0,
                    }
                }
            };
            channels.push(channel);
        }
        primitives.push(PrimitiveDeform { channels });
    }
    Ok(DeformationField {
        backend: header.backend,
        primitives,
    })
}
