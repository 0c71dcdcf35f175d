//! 8-bit color and mask images: PNG (via the image crate), PPM (P6) and
//! PGM (P5).

use std::io::{BufWriter, Read, Write};
use std::path::Path;

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::img::ColorImage;

fn to_u8(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

fn quantize(image: &ColorImage) -> Vec<u8> {
    let mut bytes = Vec::with_capacity(image.data.len() * 3);
    for c in &image.data {
        bytes.push(to_u8(c.x));
        bytes.push(to_u8(c.y));
        bytes.push(to_u8(c.z));
    }
    bytes
}

fn from_rgb8(width: usize, height: usize, bytes: &[u8]) -> ColorImage {
    let data = bytes
        .chunks_exact(3)
        .map(|px| {
            Vector3::new(
                px[0] as f64 / 255.0,
                px[1] as f64 / 255.0,
                px[2] as f64 / 255.0,
            )
        })
        .collect();
    ColorImage {
        width,
        height,
        data,
    }
}

pub fn write_png(path: &Path, image: &ColorImage) -> Result<()> {
    let buf = image::RgbImage::from_raw(image.width as u32, image.height as u32, quantize(image))
        .expect("buffer size matches dimensions");
    buf.save(path).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })
}

pub fn write_ppm(path: &Path, image: &ColorImage) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    write!(w, "P6\n{} {}\n255\n", image.width, image.height)?;
    w.write_all(&quantize(image))?;
    Ok(())
}

pub fn read_color(path: &Path) -> Result<ColorImage> {
    if path.extension().is_some_and(|e| e == "ppm") {
        return read_ppm(path);
    }
    let img = image::open(path)
        .map_err(|e| Error::Dataset {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })?
        .to_rgb8();
    Ok(from_rgb8(
        img.width() as usize,
        img.height() as usize,
        img.as_raw(),
    ))
}

fn read_pnm_header(data: &[u8], magic: &str, path: &Path) -> Result<(usize, usize, usize)> {
    // Returns (width, height, payload offset).
    let bad = |detail: String| Error::Format {
        path: path.to_path_buf(),
        detail,
    };
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 && pos < data.len() {
        while pos < data.len() && data[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < data.len() && data[pos] == b'#' {
            while pos < data.len() && data[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < data.len() && !data[pos].is_ascii_whitespace() {
            pos += 1;
        }
        fields.push(
            std::str::from_utf8(&data[start..pos])
                .map_err(|e| bad(e.to_string()))?
                .to_string(),
        );
    }
    if fields.len() < 4 {
        return Err(bad("truncated PNM header".into()));
    }
    if fields[0] != magic {
        return Err(bad(format!("expected magic {magic}, found {}", fields[0])));
    }
    if fields[3] != "255" {
        return Err(bad("only maxval 255 is supported".into()));
    }
    let width = fields[1].parse().map_err(|_| bad("bad width".into()))?;
    let height = fields[2].parse().map_err(|_| bad("bad height".into()))?;
    // Single whitespace byte after maxval.
    Ok((width, height, pos + 1))
}

pub fn read_ppm(path: &Path) -> Result<ColorImage> {
    let mut data = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| Error::Dataset {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })?
        .read_to_end(&mut data)?;
    let (width, height, offset) = read_pnm_header(&data, "P6", path)?;
    let need = width * height * 3;
    if data.len() < offset + need {
        return Err(Error::Format {
            path: path.to_path_buf(),
            detail: "truncated PPM payload".into(),
        });
    }
    Ok(from_rgb8(width, height, &data[offset..offset + need]))
}

/// Binary tissue mask as PGM P5: 0 = tool (excluded), 255 = tissue.
pub fn write_mask_pgm(path: &Path, width: usize, height: usize, mask: &[bool]) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    write!(w, "P5\n{width} {height}\n255\n")?;
    let bytes: Vec<u8> = mask.iter().map(|&m| if m { 255 } else { 0 }).collect();
    w.write_all(&bytes)?;
    Ok(())
}

pub fn read_mask_pgm(path: &Path) -> Result<(usize, usize, Vec<bool>)> {
    let mut data = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| Error::Dataset {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })?
        .read_to_end(&mut data)?;
    let (width, height, offset) = read_pnm_header(&data, "P5", path)?;
    let need = width * height;
    if data.len() < offset + need {
        return Err(Error::Format {
            path: path.to_path_buf(),
            detail: "truncated PGM payload".into(),
        });
    }
    let mask = data[offset..offset + need].iter().map(|&b| b > 127).collect();
    Ok((width, height, mask))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_and_png_roundtrip_quantized() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = ColorImage::zeros(4, 3);
        for (i, px) in img.data.iter_mut().enumerate() {
            *px = Vector3::new(
                (i as f64 / 12.0).min(1.0),
                ((i * 7 % 12) as f64 / 12.0).min(1.0),
                0.5,
            );
        }
        // Quantize once so the roundtrip is exact.
        let img = ColorImage {
            width: 4,
            height: 3,
            data: from_rgb8(4, 3, &quantize(&img)).data,
        };

        let ppm = dir.path().join("a.ppm");
        write_ppm(&ppm, &img).unwrap();
        assert_eq!(read_ppm(&ppm).unwrap().data, img.data);

        let png = dir.path().join("a.png");
        write_png(&png, &img).unwrap();
        assert_eq!(read_color(&png).unwrap().data, img.data);
    }

    #[test]
    fn mask_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.pgm");
        let mask = vec![true, false, true, true, false, false];
        write_mask_pgm(&path, 3, 2, &mask).unwrap();
        let (w, h, back) = read_mask_pgm(&path).unwrap();
        assert_eq!((w, h), (3, 2));
        assert_eq!(back, mask);
    }
}
