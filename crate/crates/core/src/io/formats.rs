//! Small interchange formats: raw `.f32` float maps, 8-bit PNG with the
//! sRGB transfer curve, and the binary PLY point subset.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::scene::PointCloud;

/// Writes `bytes` to a sibling temp file and renames it over `path`, so a
/// failed write never leaves a partial file behind.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub const F32_MAGIC: &[u8; 4] = b"RF32";

/// `RF32` | H u32 | W u32 | C u32 | H·W·C little-endian f32, pixel-interleaved.
pub fn encode_f32(img: &Image) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + img.data.len() * 4);
    out.extend_from_slice(F32_MAGIC);
    for v in [img.height, img.width, img.channels] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for v in img.to_interleaved() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_f32(bytes: &[u8]) -> Result<Image> {
    if bytes.len() < 16 || &bytes[..4] != F32_MAGIC {
        return Err(Error::format("not an RF32 float map"));
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes")) as usize;
    let (h, w, c) = (dim(0), dim(1), dim(2));
    let count = h
        .checked_mul(w)
        .and_then(|v| v.checked_mul(c))
        .ok_or_else(|| Error::format("float map dimensions overflow"))?;
    if c == 0 || bytes.len() - 16 != count.checked_mul(4).unwrap_or(usize::MAX) {
        return Err(Error::format(format!("float map {h}×{w}×{c} does not match its payload")));
    }
    let data: Vec<f32> = bytes[16..].chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))).collect();
    Image::from_interleaved(c, h, w, &data)
}

/// sRGB electro-optical transfer: encoded `[0, 1]` to linear.
pub fn srgb_to_linear(v: f32) -> f32 {
    if v <= 0.04045 {
        v / 12.92
    } else {
        ((v + 0.055) / 1.055).powf(2.4)
    }
}

pub fn linear_to_srgb(v: f32) -> f32 {
    let v = v.clamp(0.0, 1.0);
    if v <= 0.003_130_8 {
        v * 12.92
    } else {
        1.055 * v.powf(1.0 / 2.4) - 0.055
    }
}

/// Encodes a 1- or 3-channel image as 8-bit PNG. Colors go through the sRGB
/// curve when `srgb`; otherwise values are quantized linearly.
pub fn encode_png(img: &Image, srgb: bool) -> Result<Vec<u8>> {
    let color = match img.channels {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        c => return Err(Error::invalid(format!("cannot write a {c}-channel PNG"))),
    };
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, img.width as u32, img.height as u32);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(|e| Error::format(e.to_string()))?;
        let bytes: Vec<u8> = img
            .to_interleaved()
            .into_iter()
            .map(|v| {
                let e = if srgb { linear_to_srgb(v) } else { v.clamp(0.0, 1.0) };
                (e * 255.0).round() as u8
            })
            .collect();
        writer.write_image_data(&bytes).map_err(|e| Error::format(e.to_string()))?;
    }
    Ok(out)
}

/// Decodes an 8-bit PNG to `channels` (1 or 3) linear channels. Alpha is
/// dropped; grey expands to RGB and RGB averages to grey.
pub fn decode_png(bytes: &[u8], channels: usize, srgb: bool) -> Result<Image> {
    let mut dec = png::Decoder::new(bytes);
    dec.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = dec.read_info().map_err(|e| Error::format(e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::format(e.to_string()))?;
    let src_c = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => return Err(Error::format("unexpanded palette PNG")),
    };
    let (w, h) = (info.width as usize, info.height as usize);
    let conv = |b: u8| {
        let v = b as f32 / 255.0;
        if srgb {
            srgb_to_linear(v)
        } else {
            v
        }
    };
    let mut out = Image::zeros(channels, h, w);
    for y in 0..h {
        for x in 0..w {
            let px = &buf[(y * w + x) * src_c..(y * w + x + 1) * src_c];
            let rgb = if src_c < 3 { [conv(px[0]); 3] } else { [conv(px[0]), conv(px[1]), conv(px[2])] };
            match channels {
                1 => out.set(0, y, x, (rgb[0] + rgb[1] + rgb[2]) / 3.0),
                3 => (0..3).for_each(|c| out.set(c, y, x, rgb[c])),
                c => return Err(Error::invalid(format!("cannot decode to {c} channels"))),
            }
        }
    }
    Ok(out)
}

/// Loads an image by extension: `.f32` raw floats, anything else as PNG.
pub fn load_image(path: &Path, channels: usize, srgb: bool) -> Result<Image> {
    let bytes = read_file(path)?;
    let img = if path.extension().is_some_and(|e| e == "f32") {
        decode_f32(&bytes)
    } else {
        decode_png(&bytes, channels, srgb)
    }
    .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    if img.channels != channels {
        return Err(Error::Format(format!(
            "{}: expected {channels} channels, found {}",
            path.display(),
            img.channels
        )));
    }
    Ok(img)
}

pub fn encode_ply(cloud: &PointCloud) -> Vec<u8> {
    let header = format!(
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\nend_header\n",
        cloud.len()
    );
    let mut out = header.into_bytes();
    for p in cloud.positions() {
        for v in p {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn ply_type_size(t: &str) -> Option<usize> {
    Some(match t {
        "char" | "uchar" | "int8" | "uint8" => 1,
        "short" | "ushort" | "int16" | "uint16" => 2,
        "int" | "uint" | "int32" | "uint32" | "float" | "float32" => 4,
        "double" | "float64" => 8,
        _ => return None,
    })
}

/// Reads the vertex positions of a binary little-endian PLY. Other scalar
/// vertex properties are skipped; x, y, z must be float32.
pub fn decode_ply(bytes: &[u8]) -> Result<PointCloud> {
    let end = b"end_header\n";
    let hend = bytes
        .windows(end.len())
        .position(|w| w == end)
        .ok_or_else(|| Error::format("PLY header has no end_header"))?
        + end.len();
    let header = std::str::from_utf8(&bytes[..hend]).map_err(|_| Error::format("PLY header is not UTF-8"))?;
    let mut lines = header.lines();
    if lines.next() != Some("ply") {
        return Err(Error::format("missing ply magic"));
    }
    let mut count = None;
    let mut in_vertex = false;
    let mut stride = 0usize;
    let mut xyz = [None; 3];
    let mut format_ok = false;
    for line in lines {
        let tok: Vec<&str> = line.split_whitespace().collect();
        match tok.as_slice() {
            ["format", "binary_little_endian", _] => format_ok = true,
            ["format", ..] => return Err(Error::format("only binary_little_endian PLY is supported")),
            ["element", name, n] => {
                if count.is_some() && in_vertex {
                    // Elements after the vertices do not affect vertex parsing.
                    in_vertex = false;
                    continue;
                }
                if *name == "vertex" {
                    count = Some(n.parse::<usize>().map_err(|_| Error::format("bad vertex count"))?);
                    in_vertex = true;
                } else if count.is_none() {
                    return Err(Error::format("elements before vertex are not supported"));
                }
            }
            ["property", "list", ..] if in_vertex => return Err(Error::format("list vertex properties are not supported")),
            ["property", ty, name] if in_vertex => {
                let size = ply_type_size(ty).ok_or_else(|| Error::format(format!("unknown PLY type {ty}")))?;
                if let Some(axis) = ["x", "y", "z"].iter().position(|a| a == name) {
                    if size != 4 || !ty.starts_with("float") {
                        return Err(Error::format("x, y, z must be float32"));
                    }
                    xyz[axis] = Some(stride);
                }
                stride += size;
            }
            _ => {}
        }
    }
    if !format_ok {
        return Err(Error::format("PLY format line missing"));
    }
    let count = count.ok_or_else(|| Error::format("PLY has no vertex element"))?;
    let [Some(ox), Some(oy), Some(oz)] = xyz else {
        return Err(Error::format("PLY vertices lack x, y or z"));
    };
    let need = count.checked_mul(stride).ok_or_else(|| Error::format("PLY size overflow"))?;
    let body = &bytes[hend..];
    if body.len() < need {
        return Err(Error::format("PLY body is truncated"));
    }
    let f = |o: usize| f32::from_le_bytes(body[o..o + 4].try_into().expect("4 bytes"));
    let pts = (0..count).map(|i| [f(i * stride + ox), f(i * stride + oy), f(i * stride + oz)]).collect();
    PointCloud::new(pts)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn srgb_round_trip_is_within_one_code() {
        // Independent oracle: every 8-bit code survives decode→encode.
        for code in 0..=255u8 {
            let lin = srgb_to_linear(code as f32 / 255.0);
            let back = linear_to_srgb(lin) * 255.0;
            assert!((back - code as f32).abs() < 1e-3, "code {code}");
        }
        for i in 0..=1000 {
            let v = i as f32 / 1000.0;
            let enc = (linear_to_srgb(v) * 255.0).round() / 255.0;
            assert!((linear_to_srgb(srgb_to_linear(enc)) - linear_to_srgb(v)).abs() < 1.0 / 255.0);
        }
        assert_eq!(srgb_to_linear(1.0), 1.0);
        assert!((srgb_to_linear(0.5) - 0.214_041_14).abs() < 1e-6);
    }

    #[test]
    fn png_round_trip() {
        let mut img = Image::zeros(3, 5, 7);
        for (i, v) in img.data.iter_mut().enumerate() {
            *v = srgb_to_linear((i % 256) as f32 / 255.0);
        }
        let back = decode_png(&encode_png(&img, true).unwrap(), 3, true).unwrap();
        for (a, b) in img.data.iter().zip(&back.data) {
            assert!((a - b).abs() < 1e-6);
        }
        let mask = Image::filled(1, 3, 3, 1.0);
        assert_eq!(decode_png(&encode_png(&mask, false).unwrap(), 1, false).unwrap(), mask);
        assert!(decode_png(b"not a png", 3, true).is_err());
    }

    #[test]
    fn ply_with_three_points() {
        let cloud = PointCloud::new(vec![[0.0, 1.0, 2.0], [-1.5, 0.25, 3.0], [1e-3, -7.0, 0.5]]).unwrap();
        assert_eq!(decode_ply(&encode_ply(&cloud)).unwrap(), cloud);
    }

    #[test]
    fn ply_skips_extra_properties() {
        let mut bytes = b"ply\nformat binary_little_endian 1.0\ncomment x\nelement vertex 2\nproperty uchar red\nproperty float x\nproperty float y\nproperty float z\nproperty double w\nend_header\n".to_vec();
        for i in 0..2 {
            bytes.push(200);
            for v in [i as f32, 2.0, 3.0] {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            bytes.extend_from_slice(&9.0f64.to_le_bytes());
        }
        let c = decode_ply(&bytes).unwrap();
        assert_eq!(c.positions(), &[[0.0, 2.0, 3.0], [1.0, 2.0, 3.0]]);
    }

    #[test]
    fn malformed_ply_headers_fail() {
        let cases: [&[u8]; 6] = [
            b"",
            b"ply\nend_header\n",
            b"ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nend_header\n",
            b"ply\nformat binary_little_endian 1.0\nelement vertex 1\nproperty float x\nproperty float y\nend_header\n",
            b"ply\nformat binary_little_endian 1.0\nelement vertex 5\nproperty float x\nproperty float y\nproperty float z\nend_header\n\0\0",
            b"ply\nformat binary_little_endian 1.0\nelement vertex 99999999999999999999\nproperty float x\nend_header\n",
        ];
        for c in cases {
            assert!(decode_ply(c).is_err());
        }
    }

    #[test]
    fn atomic_write_replaces_and_leaves_no_temp() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.bin");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), b"two");
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
        assert!(write_atomic(&dir.path().join("missing/a.bin"), b"x").is_err());
    }

    proptest! {
        #[test]
        fn f32_maps_round_trip(c in 1usize..4, h in 1usize..6, w in 1usize..6, seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let data: Vec<f32> = (0..c * h * w).map(|_| rng.gen_range(-10.0..10.0)).collect();
            let img = Image::new(c, h, w, data).unwrap();
            prop_assert_eq!(decode_f32(&encode_f32(&img)).unwrap(), img);
        }

        #[test]
        fn ply_round_trips(pts in proptest::collection::vec(proptest::array::uniform3(-1e3f32..1e3), 1..40)) {
            let cloud = PointCloud::new(pts).unwrap();
            prop_assert_eq!(decode_ply(&encode_ply(&cloud)).unwrap(), cloud);
        }

        #[test]
        fn truncated_f32_never_panics(bytes in proptest::collection::vec(any::<u8>(), 0..64)) {
            let _ = decode_f32(&bytes);
            let mut framed = F32_MAGIC.to_vec();
            framed.extend(bytes);
            let _ = decode_f32(&framed);
        }
    }
}
