//! Binary PPM (P6, maxval 255) decoding/encoding and bilinear resizing.
//! The only image format in the pipeline; anything else is converted by
//! the user beforehand.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::path::Path;

/// Every decoded image is normalized to this square size.
pub const DECODE_SIZE: usize = 256;

fn decode_err(path: &Path, detail: impl Into<String>) -> Error {
    Error::Decode {
        path: path.display().to_string(),
        detail: detail.into(),
    }
}

/// Parse P6 bytes into an H×W×3 tensor of [0, 1] values.
pub fn parse_ppm(bytes: &[u8], path: &Path) -> Result<Tensor<f32>> {
    let mut pos = 0usize;

    let token = |pos: &mut usize| -> Result<Vec<u8>> {
        // skip whitespace and '#' comments
        loop {
            while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
                *pos += 1;
            }
            if *pos < bytes.len() && bytes[*pos] == b'#' {
                while *pos < bytes.len() && bytes[*pos] != b'\n' {
                    *pos += 1;
                }
                continue;
            }
            break;
        }
        let start = *pos;
        while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if start == *pos {
            return Err(decode_err(path, "truncated header"));
        }
        Ok(bytes[start..*pos].to_vec())
    };

    let magic = token(&mut pos)?;
    if magic != b"P6" {
        return Err(decode_err(
            path,
            format!("bad magic {:?}, expected P6", String::from_utf8_lossy(&magic)),
        ));
    }
    let parse_dim = |tok: Vec<u8>| -> Result<usize> {
        std::str::from_utf8(&tok)
            .ok()
            .and_then(|s| s.parse::<usize>().ok())
            .ok_or_else(|| decode_err(path, "bad header integer"))
    };
    let width = parse_dim(token(&mut pos)?)?;
    let height = parse_dim(token(&mut pos)?)?;
    let maxval = parse_dim(token(&mut pos)?)?;
    if width == 0 || height == 0 {
        return Err(decode_err(path, "zero image dimension"));
    }
    if maxval != 255 {
        return Err(decode_err(path, format!("maxval {maxval}, only 255 supported")));
    }
    // exactly one whitespace byte separates header and payload
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(decode_err(path, "missing header terminator"));
    }
    pos += 1;

    let want = width * height * 3;
    let payload = &bytes[pos..];
    if payload.len() < want {
        return Err(decode_err(
            path,
            format!("truncated pixel data: {} of {want} bytes", payload.len()),
        ));
    }
    let data = payload[..want]
        .iter()
        .map(|&b| b as f32 / 255.0)
        .collect();
    Tensor::new(vec![height, width, 3], data)
}

pub fn read_ppm(path: &Path) -> Result<Tensor<f32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    parse_ppm(&bytes, path)
}

/// Decode a PPM file and bilinear-resize it to 256×256.
pub fn decode_image(path: &Path) -> Result<Tensor<f32>> {
    let img = read_ppm(path)?;
    let (h, w, _) = img.dims3();
    if (h, w) == (DECODE_SIZE, DECODE_SIZE) {
        Ok(img)
    } else {
        Ok(resize_bilinear(&img, DECODE_SIZE, DECODE_SIZE))
    }
}

/// Bilinear resampling with half-pixel-centered source coordinates.
pub fn resize_bilinear(src: &Tensor<f32>, out_h: usize, out_w: usize) -> Tensor<f32> {
    let (h, w, c) = src.dims3();
    let sy = h as f32 / out_h as f32;
    let sx = w as f32 / out_w as f32;
    let mut out = Tensor::zeros(vec![out_h, out_w, c]);
    for oy in 0..out_h {
        let fy = ((oy as f32 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f32);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let wy = fy - y0 as f32;
        for ox in 0..out_w {
            let fx = ((ox as f32 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f32);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let wx = fx - x0 as f32;
            for ch in 0..c {
                let p00 = src.at3(y0, x0, ch);
                let p01 = src.at3(y0, x1, ch);
                let p10 = src.at3(y1, x0, ch);
                let p11 = src.at3(y1, x1, ch);
                let top = p00 + (p01 - p00) * wx;
                let bot = p10 + (p11 - p10) * wx;
                let idx = (oy * out_w + ox) * c + ch;
                out.data_mut()[idx] = top + (bot - top) * wy;
            }
        }
    }
    out
}

/// Encode an H×W×3 [0, 1] tensor as binary P6.
pub fn encode_ppm(img: &Tensor<f32>) -> Vec<u8> {
    let (h, w, c) = img.dims3();
    assert_eq!(c, 3, "PPM wants 3 channels");
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend(
        img.data()
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    out
}

pub fn write_ppm(path: &Path, img: &Tensor<f32>) -> Result<()> {
    std::fs::write(path, encode_ppm(img)).map_err(|e| Error::io(path.display().to_string(), e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(s: &str) -> &Path {
        Path::new(s)
    }

    #[test]
    fn one_red_pixel_upsamples_uniformly() {
        let bytes = b"P6\n1 1\n255\n\xff\x00\x00";
        let img = parse_ppm(bytes, p("t.ppm")).unwrap();
        assert_eq!(img.shape(), &[1, 1, 3]);
        let big = resize_bilinear(&img, DECODE_SIZE, DECODE_SIZE);
        assert_eq!(big.shape(), &[256, 256, 3]);
        for pix in big.data().chunks(3) {
            assert_eq!(pix, &[1.0, 0.0, 0.0]);
        }
    }

    #[test]
    fn exact_size_decodes_without_resampling() {
        let mut bytes = format!("P6\n{0} {0}\n255\n", DECODE_SIZE).into_bytes();
        bytes.extend((0..DECODE_SIZE * DECODE_SIZE * 3).map(|i| (i % 251) as u8));
        let img = parse_ppm(&bytes, p("t.ppm")).unwrap();
        for (i, &v) in img.data().iter().enumerate() {
            assert_eq!(v, ((i % 251) as u8) as f32 / 255.0);
        }
    }

    /// Reference bilinear at one output pixel, straight from the
    /// definition (half-pixel centers).
    fn reference_sample(src: &Tensor<f32>, oy: usize, ox: usize, ch: usize, oh: usize, ow: usize) -> f32 {
        let (h, w, c) = src.dims3();
        let fy = (((oy as f32) + 0.5) * (h as f32 / oh as f32) - 0.5).clamp(0.0, (h - 1) as f32);
        let fx = (((ox as f32) + 0.5) * (w as f32 / ow as f32) - 0.5).clamp(0.0, (w - 1) as f32);
        let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
        let (wy, wx) = (fy - y0 as f32, fx - x0 as f32);
        let at = |y: usize, x: usize| src.data()[(y * w + x) * c + ch];
        at(y0, x0) * (1.0 - wy) * (1.0 - wx)
            + at(y0, x1) * (1.0 - wy) * wx
            + at(y1, x0) * wy * (1.0 - wx)
            + at(y1, x1) * wy * wx
    }

    #[test]
    fn checkerboard_halves_to_mid_gray() {
        // 1px checkerboard at 512x512: every 2x2 block averages to 0.5
        let src = Tensor::from_fn(vec![512, 512, 3], |i| {
            let pix = i / 3;
            let (y, x) = (pix / 512, pix % 512);
            ((y + x) % 2) as f32
        });
        let small = resize_bilinear(&src, 256, 256);
        for (i, &v) in small.data().iter().enumerate() {
            assert!((v - 0.5).abs() < 1e-6, "idx {i}: {v}");
        }
        // spot-check against the reference formula
        for (oy, ox) in [(0, 0), (17, 250), (255, 255), (128, 3)] {
            let want = reference_sample(&src, oy, ox, 0, 256, 256);
            let got = small.data()[(oy * 256 + ox) * 3];
            assert!((got - want).abs() < 1e-6);
        }
    }

    #[test]
    fn resize_matches_reference_on_odd_ratios() {
        let src = Tensor::from_fn(vec![7, 5, 3], |i| ((i * 31) % 97) as f32 / 97.0);
        let out = resize_bilinear(&src, 11, 4);
        for oy in 0..11 {
            for ox in 0..4 {
                for ch in 0..3 {
                    let got = out.data()[(oy * 4 + ox) * 3 + ch];
                    let want = reference_sample(&src, oy, ox, ch, 11, 4);
                    assert!((got - want).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn encode_decode_round_trip() {
        let img = Tensor::from_fn(vec![5, 4, 3], |i| ((i % 256) as f32) / 255.0);
        let bytes = encode_ppm(&img);
        let back = parse_ppm(&bytes, p("t.ppm")).unwrap();
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn header_comments_are_skipped() {
        let bytes = b"P6\n# a comment\n2 1\n# another\n255\n\x01\x02\x03\x04\x05\x06";
        let img = parse_ppm(bytes, p("t.ppm")).unwrap();
        assert_eq!(img.shape(), &[1, 2, 3]);
    }

    #[test]
    fn malformed_inputs_rejected() {
        assert!(parse_ppm(b"P5\n1 1\n255\n\x00", p("t")).is_err()); // wrong magic
        assert!(parse_ppm(b"P6\n1 1\n65535\n\x00\x00\x00", p("t")).is_err()); // maxval
        assert!(parse_ppm(b"P6\n2 2\n255\n\x00\x00\x00", p("t")).is_err()); // truncated
        assert!(parse_ppm(b"P6\n1", p("t")).is_err());
    }
}
