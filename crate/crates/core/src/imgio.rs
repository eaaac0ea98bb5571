//! Grayscale image I/O (PGM, IDX), synthetic datasets, and seeded distortions.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImgError {
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("truncated data: {0}")]
    TruncatedData(String),
    #[error("unsupported maxval {0}: only 1..=255 supported")]
    UnsupportedMaxval(u64),
    #[error("i/o failure on {path}: {source}")]
    IoFailure {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}

pub type Result<T> = std::result::Result<T, ImgError>;

/// Grayscale image with real-valued pixels in `[0, range_l]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub range_l: f64,
    pub pixels: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, range_l: f64, pixels: Vec<f64>) -> Result<Image> {
        if width == 0 || height == 0 {
            return Err(ImgError::InvalidParam("width and height must be positive".into()));
        }
        if !(range_l > 0.0) {
            return Err(ImgError::InvalidParam(format!("range_l must be positive, got {range_l}")));
        }
        if pixels.len() != width * height {
            return Err(ImgError::DimensionMismatch(format!(
                "expected {} pixels for {width}x{height}, got {}",
                width * height,
                pixels.len()
            )));
        }
        if let Some(p) = pixels.iter().find(|p| !(0.0..=range_l).contains(p)) {
            return Err(ImgError::InvalidParam(format!(
                "pixel {p} outside [0, {range_l}]"
            )));
        }
        Ok(Image { width, height, range_l, pixels })
    }

    pub fn constant(width: usize, height: usize, range_l: f64, value: f64) -> Result<Image> {
        Image::new(width, height, range_l, vec![value; width * height])
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.pixels[y * self.width + x]
    }

    pub fn mean(&self) -> f64 {
        self.pixels.iter().sum::<f64>() / self.pixels.len() as f64
    }
}

/// Ordered collection of images with identical dimensions and range.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Vec<Image>,
    pub name: String,
    pub seed: Option<u64>,
}

impl Dataset {
    pub fn new(images: Vec<Image>, name: impl Into<String>, seed: Option<u64>) -> Result<Dataset> {
        if images.is_empty() {
            return Err(ImgError::InvalidParam("dataset must be non-empty".into()));
        }
        let (w, h, l) = (images[0].width, images[0].height, images[0].range_l);
        for (i, im) in images.iter().enumerate() {
            if im.width != w || im.height != h || im.range_l != l {
                return Err(ImgError::DimensionMismatch(format!(
                    "image {i} is {}x{} range {}, expected {w}x{h} range {l}",
                    im.width, im.height, im.range_l
                )));
            }
        }
        Ok(Dataset { images, name: name.into(), seed })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ImgError + '_ {
    move |source| ImgError::IoFailure { path: path.to_path_buf(), source }
}

/// Write `bytes` to `path` atomically: write a sibling temp file, then rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    std::fs::rename(&tmp, path).map_err(io_err(path))
}

struct Tokens<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Tokens<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Tokens { bytes, pos: 0 }
    }

    /// Next whitespace-delimited token, skipping '#' comments to end of line.
    fn next(&mut self) -> Option<&'a [u8]> {
        loop {
            while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
                self.pos += 1;
            }
            if self.pos < self.bytes.len() && self.bytes[self.pos] == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
                continue;
            }
            break;
        }
        if self.pos >= self.bytes.len() {
            return None;
        }
        let start = self.pos;
        while self.pos < self.bytes.len()
            && !self.bytes[self.pos].is_ascii_whitespace()
            && self.bytes[self.pos] != b'#'
        {
            self.pos += 1;
        }
        Some(&self.bytes[start..self.pos])
    }

    fn next_u64(&mut self, what: &str) -> Result<u64> {
        let tok = self
            .next()
            .ok_or_else(|| ImgError::MalformedHeader(format!("missing {what}")))?;
        std::str::from_utf8(tok)
            .ok()
            .and_then(|s| s.parse::<u64>().ok())
            .ok_or_else(|| {
                ImgError::MalformedHeader(format!(
                    "unparseable {what}: {:?}",
                    String::from_utf8_lossy(tok)
                ))
            })
    }
}

/// Load a PGM file, ASCII (`P2`) or binary (`P5`), maxval 1..=255.
pub fn load_pgm(path: &Path) -> Result<Image> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    parse_pgm(&bytes)
}

pub fn parse_pgm(bytes: &[u8]) -> Result<Image> {
    let mut toks = Tokens::new(bytes);
    let magic = toks
        .next()
        .ok_or_else(|| ImgError::MalformedHeader("empty file".into()))?;
    let binary = match magic {
        b"P2" => false,
        b"P5" => true,
        other => {
            return Err(ImgError::MalformedHeader(format!(
                "expected magic P2 or P5, got {:?}",
                String::from_utf8_lossy(other)
            )))
        }
    };
    let width = toks.next_u64("width")? as usize;
    let height = toks.next_u64("height")? as usize;
    let maxval = toks.next_u64("maxval")?;
    if width == 0 || height == 0 {
        return Err(ImgError::MalformedHeader(format!("zero dimension {width}x{height}")));
    }
    if maxval > 255 {
        return Err(ImgError::UnsupportedMaxval(maxval));
    }
    if maxval == 0 {
        return Err(ImgError::MalformedHeader("maxval 0".into()));
    }
    let n = width * height;
    let mut pixels = Vec::with_capacity(n);
    if binary {
        // One whitespace byte separates the maxval token from the raster.
        let start = toks.pos + 1;
        if start > bytes.len() {
            return Err(ImgError::TruncatedData("no raster after header".into()));
        }
        let raster = &bytes[start..];
        if raster.len() < n {
            return Err(ImgError::TruncatedData(format!(
                "raster holds {} bytes, header declares {n}",
                raster.len()
            )));
        }
        pixels.extend(raster[..n].iter().map(|&b| b as f64));
    } else {
        for i in 0..n {
            let tok = toks
                .next()
                .ok_or_else(|| ImgError::TruncatedData(format!("raster ends at pixel {i} of {n}")))?;
            let v = std::str::from_utf8(tok)
                .ok()
                .and_then(|s| s.parse::<u64>().ok())
                .ok_or_else(|| {
                    ImgError::MalformedHeader(format!(
                        "unparseable pixel {:?}",
                        String::from_utf8_lossy(tok)
                    ))
                })?;
            pixels.push(v as f64);
        }
    }
    if let Some(&p) = pixels.iter().find(|&&p| p > maxval as f64) {
        return Err(ImgError::MalformedHeader(format!("pixel {p} exceeds maxval {maxval}")));
    }
    Ok(Image { width, height, range_l: maxval as f64, pixels })
}

/// Save as PGM with `maxval = round(range_l)`; pixels are rounded to the
/// nearest integer and clamped to `[0, maxval]`.
pub fn save_pgm(image: &Image, path: &Path, binary: bool) -> Result<()> {
    write_atomic(path, &encode_pgm(image, binary)?)
}

pub fn encode_pgm(image: &Image, binary: bool) -> Result<Vec<u8>> {
    let maxval = image.range_l.round();
    if !(1.0..=255.0).contains(&maxval) {
        return Err(ImgError::UnsupportedMaxval(maxval.max(0.0) as u64));
    }
    let maxval = maxval as u64;
    let quantize = |p: f64| (p.round().clamp(0.0, maxval as f64)) as u8;
    let mut out = Vec::new();
    if binary {
        out.extend_from_slice(
            format!("P5\n{} {}\n{}\n", image.width, image.height, maxval).as_bytes(),
        );
        out.extend(image.pixels.iter().map(|&p| quantize(p)));
    } else {
        let mut text = format!("P2\n{} {}\n{}\n", image.width, image.height, maxval);
        for (i, &p) in image.pixels.iter().enumerate() {
            let sep = if i == 0 {
                ""
            } else if i % 16 == 0 {
                "\n"
            } else {
                " "
            };
            let _ = write!(text, "{sep}{}", quantize(p));
        }
        text.push('\n');
        out.extend_from_slice(text.as_bytes());
    }
    Ok(out)
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;

/// Load a big-endian IDX rank-3 unsigned-byte tensor as a dataset of images
/// with `range_l = 255`.
pub fn load_idx_images(path: &Path) -> Result<Dataset> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    parse_idx_images(&bytes, path.display().to_string())
}

pub fn parse_idx_images(bytes: &[u8], name: String) -> Result<Dataset> {
    let word = |off: usize| -> Result<u32> {
        let arr: [u8; 4] = bytes
            .get(off..off + 4)
            .ok_or_else(|| ImgError::TruncatedData(format!("header ends before offset {off}")))?
            .try_into()
            .unwrap();
        Ok(u32::from_be_bytes(arr))
    };
    let magic = word(0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(ImgError::MalformedHeader(format!(
            "magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"
        )));
    }
    let count = word(4)? as usize;
    let height = word(8)? as usize;
    let width = word(12)? as usize;
    if count == 0 || height == 0 || width == 0 {
        return Err(ImgError::MalformedHeader(format!(
            "zero extent in dims {count}x{height}x{width}"
        )));
    }
    let per = width * height;
    let payload = &bytes[16..];
    if payload.len() < count * per {
        return Err(ImgError::TruncatedData(format!(
            "payload holds {} bytes, dims require {}",
            payload.len(),
            count * per
        )));
    }
    let images = (0..count)
        .map(|i| Image {
            width,
            height,
            range_l: 255.0,
            pixels: payload[i * per..(i + 1) * per].iter().map(|&b| b as f64).collect(),
        })
        .collect();
    Dataset::new(images, name, None)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SynthKind {
    BarsStripes,
    Blobs,
    UniformNoise,
}

impl std::str::FromStr for SynthKind {
    type Err = ImgError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bars-stripes" => Ok(SynthKind::BarsStripes),
            "blobs" => Ok(SynthKind::Blobs),
            "uniform-noise" => Ok(SynthKind::UniformNoise),
            other => Err(ImgError::InvalidParam(format!(
                "unknown synth kind {other:?}; expected bars-stripes, blobs, or uniform-noise"
            ))),
        }
    }
}

impl std::fmt::Display for SynthKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SynthKind::BarsStripes => "bars-stripes",
            SynthKind::Blobs => "blobs",
            SynthKind::UniformNoise => "uniform-noise",
        })
    }
}

/// Generate `count` synthetic `side`x`side` images with `range_l = 255`,
/// deterministically from `seed`.
///
/// `bars-stripes`: per image, a random choice of horizontal or vertical lines,
/// each line independently 0 or 255. `blobs`: an isotropic Gaussian bump of
/// amplitude 255 and width `side/4` at a random center, rounded to integers.
/// `uniform-noise`: i.i.d. uniform `[0, 255]` pixels.
pub fn synth(kind: SynthKind, side: usize, count: usize, seed: u64) -> Result<Dataset> {
    if side < 2 {
        return Err(ImgError::InvalidParam(format!("side must be at least 2, got {side}")));
    }
    if count == 0 {
        return Err(ImgError::InvalidParam("count must be at least 1".into()));
    }
    let l = 255.0f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Vec::with_capacity(count);
    for _ in 0..count {
        let mut pixels = vec![0.0f64; side * side];
        match kind {
            SynthKind::BarsStripes => {
                let horizontal = rng.random::<bool>();
                let lines: Vec<f64> =
                    (0..side).map(|_| if rng.random::<bool>() { l } else { 0.0 }).collect();
                for y in 0..side {
                    for x in 0..side {
                        pixels[y * side + x] = lines[if horizontal { y } else { x }];
                    }
                }
            }
            SynthKind::Blobs => {
                let cx = rng.random::<f64>() * side as f64;
                let cy = rng.random::<f64>() * side as f64;
                let sigma = side as f64 / 4.0;
                for y in 0..side {
                    for x in 0..side {
                        let dx = x as f64 + 0.5 - cx;
                        let dy = y as f64 + 0.5 - cy;
                        let v = l * (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
                        pixels[y * side + x] = v.round().clamp(0.0, l);
                    }
                }
            }
            SynthKind::UniformNoise => {
                for p in pixels.iter_mut() {
                    *p = rng.random::<f64>() * l;
                }
            }
        }
        images.push(Image { width: side, height: side, range_l: l, pixels });
    }
    Dataset::new(images, format!("synth-{kind}"), Some(seed))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DistortKind {
    GaussNoise,
    MeanShift,
    ContrastScale,
    BoxBlur,
    SaltPepper,
}

impl std::str::FromStr for DistortKind {
    type Err = ImgError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gauss-noise" => Ok(DistortKind::GaussNoise),
            "mean-shift" => Ok(DistortKind::MeanShift),
            "contrast-scale" => Ok(DistortKind::ContrastScale),
            "box-blur" => Ok(DistortKind::BoxBlur),
            "salt-pepper" => Ok(DistortKind::SaltPepper),
            other => Err(ImgError::InvalidParam(format!(
                "unknown distortion {other:?}; expected gauss-noise, mean-shift, contrast-scale, box-blur, or salt-pepper"
            ))),
        }
    }
}

impl std::fmt::Display for DistortKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DistortKind::GaussNoise => "gauss-noise",
            DistortKind::MeanShift => "mean-shift",
            DistortKind::ContrastScale => "contrast-scale",
            DistortKind::BoxBlur => "box-blur",
            DistortKind::SaltPepper => "salt-pepper",
        })
    }
}

/// 3x3 uniform blur with edge replication.
fn box_blur3(image: &Image) -> Vec<f64> {
    let (w, h) = (image.width as isize, image.height as isize);
    let mut out = vec![0.0f64; image.pixels.len()];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let sx = (x + dx).clamp(0, w - 1) as usize;
                    let sy = (y + dy).clamp(0, h - 1) as usize;
                    acc += image.pixels[sy * image.width + sx];
                }
            }
            out[(y * w + x) as usize] = acc / 9.0;
        }
    }
    out
}

/// Apply a calibrated distortion, deterministically from `seed`. Output
/// pixels are clamped to `[0, range_l]`.
///
/// Parameter meaning per kind: `gauss-noise` noise level σ ≥ 0 (one fixed
/// standard-normal field per seed, scaled by σ); `mean-shift` additive offset
/// δ; `contrast-scale` gain γ > 0 about the image mean; `box-blur` blend
/// weight in `[0, 1]` toward the 3x3 edge-replicated uniform blur; `salt-pepper`
/// flip probability in `[0, 1]`, flipped pixels going to 0 or range_l with
/// equal chance (one fixed uniform field per seed, so the flipped set grows
/// with the probability).
pub fn distort(image: &Image, kind: DistortKind, param: f64, seed: u64) -> Result<Image> {
    if !param.is_finite() {
        return Err(ImgError::InvalidParam(format!("non-finite parameter {param}")));
    }
    let l = image.range_l;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pixels: Vec<f64> = match kind {
        DistortKind::GaussNoise => {
            if param < 0.0 {
                return Err(ImgError::InvalidParam(format!("sigma must be >= 0, got {param}")));
            }
            image
                .pixels
                .iter()
                .map(|&p| {
                    let z: f64 = rng.sample(StandardNormal);
                    p + param * z
                })
                .collect()
        }
        DistortKind::MeanShift => image.pixels.iter().map(|&p| p + param).collect(),
        DistortKind::ContrastScale => {
            if param <= 0.0 {
                return Err(ImgError::InvalidParam(format!("gain must be > 0, got {param}")));
            }
            let mu = image.mean();
            image.pixels.iter().map(|&p| mu + param * (p - mu)).collect()
        }
        DistortKind::BoxBlur => {
            if !(0.0..=1.0).contains(&param) {
                return Err(ImgError::InvalidParam(format!(
                    "blur blend must be in [0, 1], got {param}"
                )));
            }
            let blurred = box_blur3(image);
            image
                .pixels
                .iter()
                .zip(&blurred)
                .map(|(&p, &b)| (1.0 - param) * p + param * b)
                .collect()
        }
        DistortKind::SaltPepper => {
            if !(0.0..=1.0).contains(&param) {
                return Err(ImgError::InvalidParam(format!(
                    "flip probability must be in [0, 1], got {param}"
                )));
            }
            image
                .pixels
                .iter()
                .map(|&p| {
                    let u = rng.random::<f64>();
                    if u < param / 2.0 {
                        0.0
                    } else if u < param {
                        l
                    } else {
                        p
                    }
                })
                .collect()
        }
    };
    Ok(Image {
        width: image.width,
        height: image.height,
        range_l: l,
        pixels: pixels.into_iter().map(|p| p.clamp(0.0, l)).collect(),
    })
}

/// Mean squared pixel difference.
pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    if a.width != b.width || a.height != b.height {
        return Err(ImgError::DimensionMismatch(format!(
            "{}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    let n = a.pixels.len() as f64;
    Ok(a.pixels
        .iter()
        .zip(&b.pixels)
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum::<f64>()
        / n)
}
