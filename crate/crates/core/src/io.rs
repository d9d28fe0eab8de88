//! Image, saliency map, fixation, manifest and teacher-bundle files.
//!
//! Images and maps use binary PGM (P5) and PPM (P6) with 8-bit samples.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::distill::TeacherBundle;
use crate::error::{Error, Result};
use crate::metrics::FixationSet;
use crate::network::load_weights;
use crate::ops;
use crate::tensor::{Shape, Tensor};

pub const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];

/// A decoded binary PNM image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pnm {
    pub width: usize,
    pub height: usize,
    /// 1 for P5, 3 for P6.
    pub channels: usize,
    pub maxval: u16,
    /// Interleaved samples, row-major.
    pub data: Vec<u8>,
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_space(&mut self) {
        loop {
            match self.bytes.get(self.pos) {
                Some(b) if b.is_ascii_whitespace() => self.pos += 1,
                Some(b'#') => {
                    while self.bytes.get(self.pos).is_some_and(|&b| b != b'\n') {
                        self.pos += 1;
                    }
                }
                _ => return,
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::parse(start, format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .expect("ascii digits")
            .parse()
            .map_err(|_| Error::parse(start, format!("{what} out of range")))
    }
}

pub fn parse_pnm(bytes: &[u8]) -> Result<Pnm> {
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err(Error::parse(0, "expected P5 or P6 magic")),
    };
    let mut h = Header { bytes, pos: 2 };
    let width = h.number("width")?;
    let height = h.number("height")?;
    let max_at = {
        h.skip_space();
        h.pos
    };
    let maxval = h.number("maxval")?;
    if maxval == 0 {
        return Err(Error::parse(max_at, "maxval must be positive"));
    }
    if maxval > 255 {
        return Err(Error::UnsupportedFormat(format!("maxval {maxval}: only 8-bit samples are supported")));
    }
    match bytes.get(h.pos) {
        Some(b) if b.is_ascii_whitespace() => h.pos += 1,
        _ => return Err(Error::parse(h.pos, "expected whitespace after maxval")),
    }
    if width == 0 || height == 0 {
        return Err(Error::parse(2, "image dimensions must be positive"));
    }
    let len = width * height * channels;
    let end = h.pos + len;
    if bytes.len() < end {
        return Err(Error::parse(bytes.len(), format!("truncated pixel data, expected {len} bytes")));
    }
    if bytes.len() > end {
        return Err(Error::parse(end, "trailing bytes after pixel data"));
    }
    if let Some(i) = bytes[h.pos..end].iter().position(|&v| v as usize > maxval) {
        return Err(Error::parse(h.pos + i, format!("sample exceeds maxval {maxval}")));
    }
    Ok(Pnm {
        width,
        height,
        channels,
        maxval: maxval as u16,
        data: bytes[h.pos..end].to_vec(),
    })
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::file(path, e))
}

fn with_path<T>(path: &Path, r: Result<T>) -> Result<T> {
    r.map_err(|e| e.in_file(path))
}

impl Pnm {
    /// Samples scaled to [0, 1]; grayscale is broadcast to three channels.
    pub fn to_rgb(&self) -> Tensor {
        let (h, w) = (self.height, self.width);
        let scale = 1.0 / self.maxval as f32;
        Tensor::from_fn(Shape::new(1, 3, h, w), |[_, c, y, x]| {
            let ch = if self.channels == 1 { 0 } else { c };
            self.data[(y * w + x) * self.channels + ch] as f32 * scale
        })
    }

    /// First channel scaled to [0, 1] as a `1×1×H×W` map.
    pub fn to_map(&self) -> Tensor {
        let scale = 1.0 / self.maxval as f32;
        Tensor::from_fn(Shape::new(1, 1, self.height, self.width), |[_, _, y, x]| {
            self.data[(y * self.width + x) * self.channels] as f32 * scale
        })
    }
}

/// Preprocessing applied by [`load_image`].
#[derive(Clone, Debug, PartialEq)]
pub struct ImageConfig {
    /// Target (height, width); `None` keeps the file size.
    pub size: Option<(usize, usize)>,
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Default for ImageConfig {
    fn default() -> Self {
        Self {
            size: Some((192, 256)),
            mean: IMAGENET_MEAN,
            std: IMAGENET_STD,
        }
    }
}

impl ImageConfig {
    /// No resizing and identity normalization.
    pub fn raw() -> Self {
        Self {
            size: None,
            mean: [0.0; 3],
            std: [1.0; 3],
        }
    }

    pub fn preprocess(&self, rgb: &Tensor) -> Result<Tensor> {
        let s = rgb.shape();
        let mut x = match self.size {
            Some((h, w)) if (h, w) != (s.h, s.w) => ops::bilinear_resize(rgb, h, w)?,
            _ => rgb.clone(),
        };
        let plane = x.shape().plane();
        for (i, chunk) in x.data_mut().chunks_mut(plane).enumerate() {
            let c = i % 3;
            let (m, sd) = (self.mean[c], self.std[c]);
            chunk.iter_mut().for_each(|v| *v = (*v - m) / sd);
        }
        Ok(x)
    }
}

/// Decodes a P5/P6 file into a normalized `1×3×H×W` tensor.
pub fn load_image(path: impl AsRef<Path>, cfg: &ImageConfig) -> Result<Tensor> {
    let path = path.as_ref();
    let pnm = with_path(path, parse_pnm(&read(path)?))?;
    cfg.preprocess(&pnm.to_rgb())
}

/// Min-max scales a single-channel map and encodes it as 8-bit P5.
pub fn map_to_pgm(map: &Tensor) -> Result<Vec<u8>> {
    let s = map.shape();
    if s.n * s.c != 1 {
        return Err(Error::Shape {
            op: "save_map",
            axis: "channels",
            expected: 1,
            got: s.n * s.c,
        });
    }
    let scaled = ops::minmax_normalize(map);
    let mut out = format!("P5\n{} {}\n255\n", s.w, s.h).into_bytes();
    out.extend(scaled.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    Ok(out)
}

pub fn save_map(map: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, map_to_pgm(map)?).map_err(|e| Error::file(path, e))
}

/// Reads a P5 (or the first channel of a P6) map scaled to [0, 1].
pub fn load_map(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    Ok(with_path(path, parse_pnm(&read(path)?))?.to_map())
}

/// Parses `row col` lines (0-indexed); blank lines are ignored.
pub fn parse_fixations(text: &str, height: usize, width: usize) -> Result<FixationSet> {
    let mut points = Vec::new();
    let mut bad = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        let parsed = match fields.as_slice() {
            [r, c] => r.parse::<usize>().ok().zip(c.parse::<usize>().ok()),
            _ => None,
        };
        match parsed {
            Some((r, c)) if r < height && c < width => points.push((r, c)),
            _ => bad.push(i + 1),
        }
    }
    if !bad.is_empty() {
        return Err(Error::Validation {
            lines: bad,
            message: format!("expected `row col` within a {height}x{width} map"),
        });
    }
    FixationSet::new(height, width, points)
}

pub fn load_fixations(path: impl AsRef<Path>, height: usize, width: usize) -> Result<FixationSet> {
    let path = path.as_ref();
    let bytes = read(path)?;
    let text = std::str::from_utf8(&bytes)
        .map_err(|e| Error::parse(e.valid_up_to(), "fixation file is not UTF-8"))
        .map_err(|e| e.in_file(path))?;
    with_path(path, parse_fixations(text, height, width))
}

/// Reads a teacher bundle stored in the weight file format.
pub fn load_teacher_bundle(path: impl AsRef<Path>) -> Result<TeacherBundle> {
    let path = path.as_ref();
    with_path(path, TeacherBundle::from_store(&load_weights(path)?))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRecord {
    image: PathBuf,
    gt: Option<PathBuf>,
    fix: Option<PathBuf>,
    teacher: Option<PathBuf>,
    split: Option<String>,
}

/// One manifest line with paths resolved against the manifest directory.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestRecord {
    pub image: PathBuf,
    pub gt: Option<PathBuf>,
    pub fix: Option<PathBuf>,
    pub teacher: Option<PathBuf>,
    pub split: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DatasetManifest {
    pub records: Vec<ManifestRecord>,
}

impl DatasetManifest {
    /// Parses JSON lines; paths are resolved against `base`. Files are not checked.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut records = Vec::new();
        let mut seen = HashSet::new();
        let mut offset = 0;
        for line in text.split_inclusive('\n') {
            let start = offset;
            offset += line.len();
            if line.trim().is_empty() {
                continue;
            }
            let raw: RawRecord = serde_json::from_str(line)
                .map_err(|e| Error::parse(start + e.column().saturating_sub(1), format!("manifest: {e}")))?;
            let resolve = |p: PathBuf| if p.is_absolute() { p } else { base.join(p) };
            let record = ManifestRecord {
                image: resolve(raw.image),
                gt: raw.gt.map(resolve),
                fix: raw.fix.map(resolve),
                teacher: raw.teacher.map(resolve),
                split: raw.split,
            };
            if !seen.insert(record.image.clone()) {
                return Err(Error::Record {
                    record: records.len(),
                    image: record.image.display().to_string(),
                    message: "duplicate image".into(),
                });
            }
            records.push(record);
        }
        Ok(Self { records })
    }

    /// Every referenced file must exist.
    pub fn check_files(&self) -> Result<()> {
        for (i, r) in self.records.iter().enumerate() {
            let paths = [Some(&r.image), r.gt.as_ref(), r.fix.as_ref(), r.teacher.as_ref()];
            if let Some(p) = paths.into_iter().flatten().find(|p| !p.is_file()) {
                return Err(Error::Record {
                    record: i,
                    image: r.image.display().to_string(),
                    message: format!("missing file {}", p.display()),
                });
            }
        }
        Ok(())
    }

    pub fn split(&self, tag: &str) -> Vec<&ManifestRecord> {
        self.records.iter().filter(|r| r.split.as_deref() == Some(tag)).collect()
    }
}

/// Loads a JSON-lines manifest and verifies that every referenced file exists.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let bytes = read(path)?;
    let text = std::str::from_utf8(&bytes).map_err(|e| Error::parse(e.valid_up_to(), "manifest is not UTF-8"))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let m = DatasetManifest::parse(text, base).map_err(|e| match e {
        e @ Error::Parse { .. } => e.in_file(path),
        e => e,
    })?;
    m.check_files()?;
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn white_gray_pixel() {
        let p = parse_pnm(b"P5 1 1 255 \xff").unwrap();
        let t = p.to_rgb();
        assert_eq!(t.data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn rgb_channel_mapping() {
        let p = parse_pnm(b"P6\n# c\n2 1\n255\n\xff\x00\x00\x00\x00\xff").unwrap();
        let t = p.to_rgb();
        assert_eq!(t.plane(0, 0), &[1.0, 0.0]);
        assert_eq!(t.plane(0, 2), &[0.0, 1.0]);
    }

    #[test]
    fn header_errors_carry_offsets() {
        assert!(matches!(parse_pnm(b"P7 1 1 255 x"), Err(Error::Parse { offset: 0, .. })));
        assert!(matches!(parse_pnm(b"P5 1 1 65535 xx"), Err(Error::UnsupportedFormat(_))));
        assert!(matches!(parse_pnm(b"P5 1 1 255 \x01\x02"), Err(Error::Parse { offset: 12, .. })));
        assert!(matches!(parse_pnm(b"P5 x"), Err(Error::Parse { offset: 3, .. })));
    }

    #[test]
    fn constant_map_saves_zeros() {
        let bytes = map_to_pgm(&Tensor::full(Shape::new(1, 1, 2, 2), 0.7)).unwrap();
        assert!(bytes.ends_with(&[0, 0, 0, 0]));
    }

    #[test]
    fn fixation_lines() {
        let f = parse_fixations("0 0\n2 3\n", 4, 4).unwrap();
        assert_eq!(f.points, vec![(0, 0), (2, 3)]);
        match parse_fixations("0 0\n4 1\nx\n1 1 1\n", 4, 4) {
            Err(Error::Validation { lines, .. }) => assert_eq!(lines, vec![2, 3, 4]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn manifest_resolution_and_errors() {
        let m = DatasetManifest::parse(
            "{\"image\": \"a.ppm\", \"gt\": \"a.pgm\", \"split\": \"train\"}\n\n{\"image\": \"/abs/b.ppm\"}\n",
            Path::new("/data"),
        )
        .unwrap();
        assert_eq!(m.records[0].image, PathBuf::from("/data/a.ppm"));
        assert_eq!(m.records[1].image, PathBuf::from("/abs/b.ppm"));
        assert_eq!(m.split("train").len(), 1);
        assert!(matches!(
            DatasetManifest::parse("{\"image\": \"a\"}\n{\"image\": \"a\"}\n", Path::new("")),
            Err(Error::Record { record: 1, .. })
        ));
        assert!(matches!(
            DatasetManifest::parse("{\"image\": \"a\"}\n{\"img\": 1}\n", Path::new("")),
            Err(Error::Parse { offset, .. }) if offset >= 15
        ));
        match m.check_files() {
            Err(Error::Record { record: 0, image, .. }) => assert!(image.ends_with("a.ppm")),
            other => panic!("{other:?}"),
        }
    }
}
