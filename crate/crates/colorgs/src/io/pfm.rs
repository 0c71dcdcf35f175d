//! Grayscale PFM depth maps, little-endian (scale -1.0), scanlines stored
//! bottom-to-top per the format convention.

use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::img::ScalarImage;

pub fn write_pfm(path: &Path, image: &ScalarImage) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    write!(w, "Pf\n{} {}\n-1.0\n", image.width, image.height)?;
    for y in (0..image.height).rev() {
        for x in 0..image.width {
            w.write_all(&(image.at(x, y) as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_token(r: &mut impl BufRead, path: &Path) -> Result<String> {
    let mut token = Vec::new();
    loop {
        let mut byte = [0u8; 1];
        if r.read(&mut byte)? == 0 {
            break;
        }
        if byte[0].is_ascii_whitespace() {
            if token.is_empty() {
                continue;
            }
            break;
        }
        token.push(byte[0]);
    }
    if token.is_empty() {
        return Err(Error::Format {
            path: path.to_path_buf(),
            detail: "unexpected end of PFM header".into(),
        });
    }
    String::from_utf8(token).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })
}

pub fn read_pfm(path: &Path) -> Result<ScalarImage> {
    let file = std::fs::File::open(path).map_err(|e| Error::Dataset {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    let mut r = BufReader::new(file);
    let bad = |detail: &str| Error::Format {
        path: path.to_path_buf(),
        detail: detail.into(),
    };

    if read_token(&mut r, path)? != "Pf" {
        return Err(bad("expected grayscale PFM magic 'Pf'"));
    }
    let width: usize = read_token(&mut r, path)?.parse().map_err(|_| bad("bad width"))?;
    let height: usize = read_token(&mut r, path)?.parse().map_err(|_| bad("bad height"))?;
    let scale: f64 = read_token(&mut r, path)?.parse().map_err(|_| bad("bad scale"))?;
    let little_endian = scale < 0.0;

    let mut buf = vec![0u8; width * height * 4];
    r.read_exact(&mut buf)
        .map_err(|_| bad("truncated PFM payload"))?;
    let mut image = ScalarImage::zeros(width, height);
    let mut offset = 0;
    for y in (0..height).rev() {
        for x in 0..width {
            let bytes: [u8; 4] = buf[offset..offset + 4].try_into().unwrap();
            let v = if little_endian {
                f32::from_le_bytes(bytes)
            } else {
                f32::from_be_bytes(bytes)
            };
            *image.at_mut(x, y) = v as f64;
            offset += 4;
        }
    }
    Ok(image)
}
