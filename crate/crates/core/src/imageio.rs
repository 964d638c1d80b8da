//! Binary PGM (P5) and PPM (P6) with maxval 255.

use std::io::{self, BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::tensor::{Shape, Tensor};

fn invalid(msg: impl Into<String>) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, msg.into())
}

/// Encodes a `(1, c, h, w)` image with `c` of 1 (P5) or 3 (P6). Values are
/// clamped to `[0, 1]` and rounded to the nearest of 256 levels.
pub fn encode_pnm(img: &Tensor) -> io::Result<Vec<u8>> {
    let s = img.shape();
    let magic = match (s.n, s.c) {
        (1, 1) => "P5",
        (1, 3) => "P6",
        _ => return Err(invalid(format!("cannot encode shape {s:?} as PGM/PPM"))),
    };
    let mut out = format!("{magic}\n{} {}\n255\n", s.w, s.h).into_bytes();
    out.reserve(s.len());
    for y in 0..s.h {
        for x in 0..s.w {
            for c in 0..s.c {
                let v = img.at(0, c, y, x).clamp(0.0, 1.0);
                out.push((v * 255.0).round() as u8);
            }
        }
    }
    Ok(out)
}

pub fn write_pnm(path: impl AsRef<Path>, img: &Tensor) -> io::Result<()> {
    let bytes = encode_pnm(img)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)
}

fn header_token(r: &mut impl BufRead) -> io::Result<String> {
    let mut tok = String::new();
    loop {
        let mut byte = [0u8];
        r.read_exact(&mut byte)?;
        match byte[0] {
            b'#' if tok.is_empty() => {
                let mut skip = Vec::new();
                r.read_until(b'\n', &mut skip)?;
            }
            b if b.is_ascii_whitespace() => {
                if !tok.is_empty() {
                    return Ok(tok);
                }
            }
            b => tok.push(b as char),
        }
    }
}

pub fn decode_pnm(bytes: &[u8]) -> io::Result<Tensor> {
    let mut r = BufReader::new(bytes);
    let channels = match header_token(&mut r)?.as_str() {
        "P5" => 1,
        "P6" => 3,
        other => return Err(invalid(format!("unsupported magic `{other}`"))),
    };
    let mut num = |what: &str| -> io::Result<usize> {
        header_token(&mut r)?
            .parse()
            .map_err(|_| invalid(format!("bad {what} in header")))
    };
    let (w, h, maxval) = (num("width")?, num("height")?, num("maxval")?);
    if maxval != 255 {
        return Err(invalid(format!("only maxval 255 is supported, got {maxval}")));
    }
    let mut raw = vec![0u8; w * h * channels];
    r.read_exact(&mut raw)?;
    let shape = Shape::new(1, channels, h, w);
    let mut img = Tensor::zeros(shape);
    for y in 0..h {
        for x in 0..w {
            for c in 0..channels {
                img.data_mut()[shape.offset(0, c, y, x)] = raw[(y * w + x) * channels + c] as f64 / 255.0;
            }
        }
    }
    Ok(img)
}

pub fn read_pnm(path: impl AsRef<Path>) -> io::Result<Tensor> {
    decode_pnm(&std::fs::read(path)?)
}
