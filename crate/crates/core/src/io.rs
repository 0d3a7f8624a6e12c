//! Annotation files, PGM/PPM images, detection files and overlays.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::boxes::BBox;
use crate::detection::Detection;
use crate::error::{Error, Result};
use crate::eval::ImageAnnotation;
use crate::tensor::Tensor;

/// Annotation layout: repeated blocks of an image path line, a face-count
/// line, then one `x y w h` line per face (non-negative integers, top-left
/// corner). No blank lines.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AnnotationFile {
    pub records: Vec<ImageAnnotation>,
}

fn parse_err(path: &str, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.into(),
        line,
        msg: msg.into(),
    }
}

impl AnnotationFile {
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let lines: Vec<&str> = text.lines().collect();
        let mut records = Vec::new();
        let mut i = 0;
        while i < lines.len() {
            let path_line = lines[i];
            let lineno = i + 1;
            if path_line.trim().is_empty() {
                return Err(parse_err(origin, lineno, "blank line"));
            }
            if path_line.split_whitespace().count() != 1 || path_line.trim() != path_line {
                return Err(parse_err(origin, lineno, format!("image path {path_line:?} contains whitespace")));
            }
            i += 1;
            let count_line = *lines
                .get(i)
                .ok_or_else(|| parse_err(origin, i + 1, "missing face count"))?;
            let n: usize = count_line
                .parse()
                .map_err(|_| parse_err(origin, i + 1, format!("face count {count_line:?} is not a non-negative integer")))?;
            i += 1;
            let mut boxes = Vec::with_capacity(n);
            for k in 0..n {
                let lineno = i + 1;
                let line = *lines.get(i).ok_or_else(|| {
                    parse_err(origin, lineno, format!("expected {n} boxes for {path_line}, found {k}"))
                })?;
                let fields: Vec<&str> = line.split(' ').collect();
                if fields.len() != 4 {
                    return Err(parse_err(
                        origin,
                        lineno,
                        format!("expected \"x y w h\", found {line:?} (box {} of {n} for {path_line})", k + 1),
                    ));
                }
                let mut v = [0u64; 4];
                for (slot, f) in v.iter_mut().zip(&fields) {
                    *slot = f
                        .parse()
                        .map_err(|_| parse_err(origin, lineno, format!("field {f:?} is not a non-negative integer")))?;
                }
                if v[2] < 1 || v[3] < 1 {
                    return Err(parse_err(origin, lineno, "box width and height must be at least 1"));
                }
                let [x, y, w, h] = v.map(|u| u as f64);
                boxes.push(BBox::from_xywh(x, y, w, h)?);
                i += 1;
            }
            records.push(ImageAnnotation {
                image: path_line.to_string(),
                boxes,
            });
        }
        Ok(AnnotationFile { records })
    }

    /// Boxes are written as integers; non-integer corners are rounded.
    pub fn serialize(&self) -> String {
        let mut s = String::new();
        for r in &self.records {
            let _ = writeln!(s, "{}", r.image);
            let _ = writeln!(s, "{}", r.boxes.len());
            for b in &r.boxes {
                let x = b.x1.round();
                let y = b.y1.round();
                let _ = writeln!(s, "{} {} {} {}", x, y, b.x2.round() - x, b.y2.round() - y);
            }
        }
        s
    }
}

pub fn parse_annotations(path: &Path) -> Result<AnnotationFile> {
    let text = fs::read_to_string(path)?;
    AnnotationFile::parse(&text, &path.display().to_string())
}

/// A decoded image: `1×C×H×W` with `H`, `W` padded to multiples of 16 by
/// edge replication, and the original `(width, height)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedImage {
    pub tensor: Tensor,
    pub width: usize,
    pub height: usize,
}

impl LoadedImage {
    pub fn extent(&self) -> (f64, f64) {
        (self.width as f64, self.height as f64)
    }
}

struct Header {
    channels: usize,
    width: usize,
    height: usize,
    offset: usize,
}

fn parse_header(bytes: &[u8]) -> std::result::Result<Header, String> {
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err("unsupported magic (expected P5 or P6)".into()),
    };
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&c| c != b'\n') {
                        pos += 1;
                    }
                }
                Some(c) if c.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err("truncated header".into()),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|c| c.is_ascii_digit()) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or("malformed header field")?;
    }
    if !bytes.get(pos).is_some_and(|c| c.is_ascii_whitespace()) {
        return Err("truncated header".into());
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(format!("maxval {maxval} unsupported (expected 255)"));
    }
    if width == 0 || height == 0 {
        return Err("zero image extent".into());
    }
    Ok(Header {
        channels,
        width,
        height,
        offset: pos + 1,
    })
}

pub fn decode_pnm(bytes: &[u8], origin: &str) -> Result<LoadedImage> {
    let bad = |msg: String| Error::Parse {
        path: origin.into(),
        line: 0,
        msg,
    };
    let h = parse_header(bytes).map_err(bad)?;
    let n = h.width * h.height * h.channels;
    let pixels = bytes
        .get(h.offset..h.offset + n)
        .ok_or_else(|| bad(format!("truncated pixel data: need {n} bytes")))?;
    let ph = h.height.div_ceil(16) * 16;
    let pw = h.width.div_ceil(16) * 16;
    let c = h.channels;
    let tensor = Tensor::from_fn(&[1, c, ph, pw], |i| {
        let x = (i % pw).min(h.width - 1);
        let y = (i / pw % ph).min(h.height - 1);
        let ch = i / (pw * ph);
        pixels[(y * h.width + x) * c + ch] as f64 / 255.0
    });
    Ok(LoadedImage {
        tensor,
        width: h.width,
        height: h.height,
    })
}

pub fn load_image(path: &Path) -> Result<LoadedImage> {
    decode_pnm(&fs::read(path)?, &path.display().to_string())
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Binary PGM of channel 0 of a `1×C×H×W` tensor.
pub fn encode_pgm(image: &Tensor) -> Result<Vec<u8>> {
    let (_, _, h, w) = image.dims4()?;
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(image.data()[..h * w].iter().map(|&v| to_byte(v)));
    Ok(out)
}

/// Binary PPM of the top-left `width×height` region with 1-pixel red box
/// borders. Grayscale input is replicated to three channels.
pub fn encode_overlay(image: &Tensor, width: usize, height: usize, boxes: &[BBox]) -> Result<Vec<u8>> {
    let (_, c, h, w) = image.dims4()?;
    if width > w || height > h || (c != 1 && c != 3) {
        return Err(Error::invalid("encode_overlay", format!("{width}×{height} region of {:?}", image.shape())));
    }
    let mut rgb = vec![0u8; width * height * 3];
    for y in 0..height {
        for x in 0..width {
            for ch in 0..3 {
                let src = if c == 1 { 0 } else { ch };
                rgb[(y * width + x) * 3 + ch] = to_byte(image.data()[(src * h + y) * w + x]);
            }
        }
    }
    for b in boxes {
        let x1 = (b.x1.floor().max(0.0) as usize).min(width - 1);
        let y1 = (b.y1.floor().max(0.0) as usize).min(height - 1);
        let x2 = ((b.x2.ceil() as usize).max(1) - 1).min(width - 1);
        let y2 = ((b.y2.ceil() as usize).max(1) - 1).min(height - 1);
        let mut put = |x: usize, y: usize| rgb[(y * width + x) * 3..(y * width + x) * 3 + 3].copy_from_slice(&[255, 0, 0]);
        for x in x1..=x2 {
            put(x, y1);
            put(x, y2);
        }
        for y in y1..=y2 {
            put(x1, y);
            put(x2, y);
        }
    }
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend(rgb);
    Ok(out)
}

/// One `x1 y1 x2 y2 score` line per detection, six decimals, by descending
/// score (ties keep input order).
pub fn format_detections(dets: &[Detection]) -> String {
    let order = crate::boxes::score_order(&dets.iter().map(|d| d.score).collect::<Vec<_>>());
    let mut s = String::new();
    for i in order {
        let d = &dets[i];
        let _ = writeln!(
            s,
            "{:.6} {:.6} {:.6} {:.6} {:.6}",
            d.bbox.x1, d.bbox.y1, d.bbox.x2, d.bbox.y2, d.score
        );
    }
    s
}

pub fn parse_detections(text: &str, origin: &str) -> Result<Vec<Detection>> {
    text.lines()
        .enumerate()
        .map(|(i, line)| {
            let v: Vec<f64> = line
                .split_whitespace()
                .map(|f| f.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| parse_err(origin, i + 1, format!("malformed detection line {line:?}")))?;
            if v.len() != 5 || v.iter().any(|x| !x.is_finite()) {
                return Err(parse_err(origin, i + 1, format!("expected \"x1 y1 x2 y2 score\", found {line:?}")));
            }
            let bbox = BBox::new(v[0], v[1], v[2], v[3]).map_err(|e| parse_err(origin, i + 1, e.to_string()))?;
            Ok(Detection { bbox, score: v[4] })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn block_converts_to_corner_form() {
        let a = AnnotationFile::parse("img1.pgm\n1\n10 10 20 20\n", "t").unwrap();
        assert_eq!(a.records[0].boxes, vec![BBox::new(10.0, 10.0, 30.0, 30.0).unwrap()]);
    }

    #[test]
    fn zero_count_then_next_image() {
        let a = AnnotationFile::parse("a.pgm\n0\nb.pgm\n1\n0 0 1 1\n", "t").unwrap();
        assert_eq!(a.records.len(), 2);
        assert!(a.records[0].boxes.is_empty());
    }

    #[test]
    fn count_mismatch_reports_line() {
        let err = AnnotationFile::parse("a.pgm\n2\n1 1 5 5\nb.pgm\n0\n", "ann.txt").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 4, .. }), "{err}");
        let err = AnnotationFile::parse("a.pgm\n2\n1 1 5 5\n", "ann.txt").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 4, .. }), "{err}");
    }

    #[test]
    fn malformed_fields_rejected() {
        for text in ["a\nx\n", "a\n1\n1 2 3\n", "a\n1\n1 2 3 4.5\n", "a\n1\n-1 2 3 4\n", "a\n1\n1 2 0 4\n", "a\n0\n\nb\n0\n"] {
            assert!(AnnotationFile::parse(text, "t").is_err(), "{text:?}");
        }
    }

    #[test]
    fn pgm_scaling_and_padding() {
        let mut bytes = b"P5\n2 2\n255\n".to_vec();
        bytes.extend([0, 255, 255, 0]);
        let img = decode_pnm(&bytes, "t").unwrap();
        assert_eq!(img.tensor.shape(), &[1, 1, 16, 16]);
        let d = img.tensor.data();
        assert_eq!([d[0], d[1], d[16], d[17]], [0.0, 1.0, 1.0, 0.0]);
        assert_eq!(d[15], 1.0);
        assert_eq!(d[15 * 16 + 15], 0.0);
        assert_eq!((img.width, img.height), (2, 2));
    }

    #[test]
    fn hundred_pixels_pad_to_112() {
        let mut bytes = b"P5\n100 100\n255\n".to_vec();
        bytes.extend(vec![7u8; 100 * 100]);
        let img = decode_pnm(&bytes, "t").unwrap();
        assert_eq!(img.tensor.shape(), &[1, 1, 112, 112]);
        assert_eq!(img.extent(), (100.0, 100.0));
    }

    #[test]
    fn ppm_is_channel_major() {
        let mut bytes = b"P6\n# comment\n1 1\n255\n".to_vec();
        bytes.extend([255, 0, 51]);
        let img = decode_pnm(&bytes, "t").unwrap();
        assert_eq!(img.tensor.shape(), &[1, 3, 16, 16]);
        assert_eq!(img.tensor.data()[0], 1.0);
        assert_eq!(img.tensor.data()[256], 0.0);
        assert_eq!(img.tensor.data()[512], 0.2);
    }

    #[test]
    fn bad_images_rejected() {
        assert!(decode_pnm(b"P2\n1 1\n255\n0", "t").is_err());
        assert!(decode_pnm(b"P5\n2 2\n255\n\x00\x01", "t").is_err());
        assert!(decode_pnm(b"P5\n2 2\n65535\n", "t").is_err());
    }

    #[test]
    fn pgm_round_trip() {
        let t = Tensor::from_fn(&[1, 1, 16, 16], |i| (i % 256) as f64 / 255.0);
        let back = decode_pnm(&encode_pgm(&t).unwrap(), "t").unwrap();
        assert_eq!(back.tensor, t);
    }

    #[test]
    fn detection_lines_sorted() {
        let d = [
            Detection {
                bbox: BBox::new(0.0, 0.0, 1.0, 1.0).unwrap(),
                score: 0.5,
            },
            Detection {
                bbox: BBox::new(1.0, 2.0, 3.5, 4.0).unwrap(),
                score: 0.9,
            },
        ];
        let text = format_detections(&d);
        assert_eq!(
            text,
            "1.000000 2.000000 3.500000 4.000000 0.900000\n0.000000 0.000000 1.000000 1.000000 0.500000\n"
        );
        assert_eq!(parse_detections(&text, "t").unwrap(), vec![d[1], d[0]]);
    }
}
