//! Binary PPM/PGM images, Middlebury `.flo` flow files and `id x y` keypoint
//! lists.

use super::{DataError, Image, Keypoint, KeypointSet, Mask};
use crate::geometry::FlowField;
use std::fs;
use std::path::Path;

fn read_file(path: &Path) -> Result<Vec<u8>, DataError> {
    fs::read(path).map_err(|source| DataError::Io { path: path.to_path_buf(), source })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), DataError> {
    fs::write(path, bytes).map_err(|source| DataError::Io { path: path.to_path_buf(), source })
}

fn parse_err(context: &str, offset: usize, reason: impl Into<String>) -> DataError {
    DataError::Parse {
        context: context.to_string(),
        location: format!("byte {offset}"),
        reason: reason.into(),
    }
}

/// Parses a netpbm header with the given magic; returns `(w, h, maxval,
/// raster offset)`.
fn netpbm_header(
    bytes: &[u8],
    magic: &[u8; 2],
    context: &str,
) -> Result<(usize, usize, usize, usize), DataError> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(parse_err(
            context,
            0,
            format!("expected magic {}", String::from_utf8_lossy(magic)),
        ));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for (n, field) in fields.iter_mut().enumerate() {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(parse_err(context, pos, format!("expected header field {}", n + 1)));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| parse_err(context, start, "header value out of range"))?;
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(parse_err(context, pos, "expected single whitespace after maxval")),
    }
    let [w, h, maxval] = fields;
    if w == 0 || h == 0 {
        return Err(parse_err(context, 2, "zero image dimension"));
    }
    if maxval == 0 || maxval > 255 {
        return Err(parse_err(context, pos - 1, format!("unsupported maxval {maxval}")));
    }
    Ok((w, h, maxval, pos))
}

/// Decodes a binary PPM (P6) with 8-bit samples.
pub fn read_ppm(bytes: &[u8], context: &str) -> Result<Image, DataError> {
    let (w, h, maxval, pos) = netpbm_header(bytes, b"P6", context)?;
    let need = w * h * 3;
    if bytes.len() - pos < need {
        return Err(parse_err(
            context,
            bytes.len(),
            format!("raster truncated: need {need} bytes, have {}", bytes.len() - pos),
        ));
    }
    let data = bytes[pos..pos + need].iter().map(|&b| b as f64 / maxval as f64).collect();
    Image::new(h, w, data)
}

/// Encodes as binary PPM, maxval 255, rounding to the nearest level.
pub fn write_ppm(img: &Image) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend(img.data().iter().map(|v| (v * 255.0).round() as u8));
    out
}

pub fn load_image(path: &Path) -> Result<Image, DataError> {
    read_ppm(&read_file(path)?, &path.display().to_string())
}

pub fn save_image(img: &Image, path: &Path) -> Result<(), DataError> {
    write_file(path, &write_ppm(img))
}

/// Masks are stored as binary PGM (P5): 255 for set pixels, 0 otherwise.
pub fn save_mask(mask: &Mask, path: &Path) -> Result<(), DataError> {
    let mut out = format!("P5\n{} {}\n255\n", mask.width(), mask.height()).into_bytes();
    out.extend(mask.data().iter().map(|&b| if b { 255u8 } else { 0 }));
    write_file(path, &out)
}

pub fn load_mask(path: &Path) -> Result<Mask, DataError> {
    let bytes = read_file(path)?;
    let context = path.display().to_string();
    let (w, h, _, pos) = netpbm_header(&bytes, b"P5", &context)?;
    if bytes.len() - pos < w * h {
        return Err(parse_err(&context, bytes.len(), "raster truncated"));
    }
    Mask::new(h, w, bytes[pos..pos + w * h].iter().map(|&b| b > 0).collect())
}

const FLO_MAGIC: f32 = 202021.25;

/// Middlebury `.flo`: magic, width, height, then interleaved `(u, v)` as
/// little-endian `f32`.
pub fn save_flow(flow: &FlowField, path: &Path) -> Result<(), DataError> {
    let mut out = Vec::with_capacity(12 + flow.data().len() * 4);
    out.extend(FLO_MAGIC.to_le_bytes());
    out.extend((flow.width() as i32).to_le_bytes());
    out.extend((flow.height() as i32).to_le_bytes());
    for v in flow.data() {
        out.extend((*v as f32).to_le_bytes());
    }
    write_file(path, &out)
}

pub fn load_flow(path: &Path) -> Result<FlowField, DataError> {
    let bytes = read_file(path)?;
    let context = path.display().to_string();
    let word = |i: usize| -> Result<[u8; 4], DataError> {
        bytes
            .get(i..i + 4)
            .map(|b| b.try_into().expect("4 bytes"))
            .ok_or_else(|| parse_err(&context, i, "truncated flow file"))
    };
    if f32::from_le_bytes(word(0)?) != FLO_MAGIC {
        return Err(parse_err(&context, 0, "bad .flo magic"));
    }
    let w = i32::from_le_bytes(word(4)?);
    let h = i32::from_le_bytes(word(8)?);
    if w <= 0 || h <= 0 {
        return Err(parse_err(&context, 4, format!("bad dimensions {w}x{h}")));
    }
    let n = w as usize * h as usize * 2;
    let data = (0..n)
        .map(|k| word(12 + 4 * k).map(|b| f32::from_le_bytes(b) as f64))
        .collect::<Result<Vec<_>, _>>()?;
    FlowField::new(h as usize, w as usize, data)
        .map_err(|e| DataError::Dimensions(e.to_string()))
}

/// One `id x y` triple per line; blank lines are ignored.
pub fn parse_keypoints(text: &str, context: &str) -> Result<KeypointSet, DataError> {
    let mut points = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let err = |reason: String| DataError::Parse {
            context: context.to_string(),
            location: format!("line {}", n + 1),
            reason,
        };
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_ascii_whitespace().collect();
        let [id, x, y] = fields[..] else {
            return Err(err(format!("expected `id x y`, found {} fields", fields.len())));
        };
        let id: u64 = id.parse().map_err(|_| err(format!("bad id `{id}`")))?;
        let x: f64 = x.parse().map_err(|_| err(format!("bad x `{x}`")))?;
        let y: f64 = y.parse().map_err(|_| err(format!("bad y `{y}`")))?;
        if !x.is_finite() || !y.is_finite() {
            return Err(err("non-finite coordinate".into()));
        }
        points.push(Keypoint { id, x, y });
    }
    KeypointSet::new(points)
}

pub fn load_keypoints(path: &Path) -> Result<KeypointSet, DataError> {
    let bytes = read_file(path)?;
    let text = String::from_utf8(bytes).map_err(|e| DataError::Parse {
        context: path.display().to_string(),
        location: format!("byte {}", e.utf8_error().valid_up_to()),
        reason: "not valid ASCII/UTF-8".into(),
    })?;
    parse_keypoints(&text, &path.display().to_string())
}

pub fn save_keypoints(set: &KeypointSet, path: &Path) -> Result<(), DataError> {
    let text: String = set.points().iter().map(|p| format!("{} {} {}\n", p.id, p.x, p.y)).collect();
    write_file(path, text.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn hand_written_two_by_two() {
        let mut bytes = b"P6\n# fixture\n2 2\n255\n".to_vec();
        bytes.extend([255, 0, 0, 0, 255, 0, 0, 0, 255, 51, 102, 204]);
        let img = read_ppm(&bytes, "fixture").unwrap();
        assert_eq!((img.height(), img.width()), (2, 2));
        assert_eq!(img.pixel(0, 0), [1.0, 0.0, 0.0]);
        assert_eq!(img.pixel(1, 0), [0.0, 1.0, 0.0]);
        assert_eq!(img.pixel(0, 1), [0.0, 0.0, 1.0]);
        assert_eq!(img.pixel(1, 1), [0.2, 0.4, 0.8]);
    }

    #[test]
    fn truncated_raster_reports_offset() {
        let bytes = b"P6 2 2 255\n\x01\x02".to_vec();
        let err = read_ppm(&bytes, "t").unwrap_err();
        assert!(err.to_string().contains("byte"), "{err}");
        assert!(read_ppm(b"P5 1 1 255\n\x00", "t").is_err());
        assert!(read_ppm(b"P6 1 1 65535\n\x00\x00\x00", "t").is_err());
    }

    proptest! {
        #[test]
        fn ppm_round_trip_is_bit_exact(h in 1usize..6, w in 1usize..6, seed in any::<u64>()) {
            let bytes: Vec<u8> = (0..h * w * 3).map(|i| (seed.wrapping_mul(i as u64 + 7) >> 13) as u8).collect();
            let img = Image::new(h, w, bytes.iter().map(|&b| b as f64 / 255.0).collect()).unwrap();
            let back = read_ppm(&write_ppm(&img), "rt").unwrap();
            prop_assert_eq!(back, img);
        }
    }

    #[test]
    fn keypoints_parse_and_reject() {
        let k = parse_keypoints("1 2.5 3\n7 0 0.25\n", "kp").unwrap();
        assert_eq!(k.len(), 2);
        assert_eq!(k.get(7).unwrap().y, 0.25);
        assert!(matches!(parse_keypoints("1 0 0\n1 2 2\n", "kp"), Err(DataError::DuplicateId(1))));
        let err = parse_keypoints("1 0 0\n2 x 0\n", "kp").unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }

    #[test]
    fn files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let flow = FlowField::new(2, 3, vec![0.5, -1.0, 2.0, 0.0, 3.25, 1.0, 0.0, 0.0, -4.5, 8.0, 1.5, 2.5])
            .unwrap();
        save_flow(&flow, &dir.path().join("f.flo")).unwrap();
        assert_eq!(load_flow(&dir.path().join("f.flo")).unwrap().data(), flow.data());

        let mask = Mask::new(2, 2, vec![true, false, false, true]).unwrap();
        save_mask(&mask, &dir.path().join("m.pgm")).unwrap();
        assert_eq!(load_mask(&dir.path().join("m.pgm")).unwrap(), mask);

        let kp = parse_keypoints("3 1.5 2.5\n4 10 11\n", "kp").unwrap();
        save_keypoints(&kp, &dir.path().join("k.txt")).unwrap();
        assert_eq!(load_keypoints(&dir.path().join("k.txt")).unwrap(), kp);
    }
}
