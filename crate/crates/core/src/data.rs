//! Synthetic shapes dataset and its on-disk form (binary PPM images, PGM masks,
//! a tab-separated index).

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;

use crate::error::{Error, Result};
use crate::kv;
use crate::scalar::Scalar;
use crate::seed;
use crate::tensor::Tensor;

pub const BACKGROUND: u8 = 0;

/// Per-pixel class ids, row-major; 0 is background.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width {
            return Err(Error::invalid(format!(
                "label map {height}x{width} with {} values",
                data.len()
            )));
        }
        Ok(LabelMap { height, width, data })
    }

    pub fn filled(height: usize, width: usize, id: u8) -> Self {
        LabelMap {
            height,
            width,
            data: vec![id; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, id: u8) {
        self.data[y * self.width + x] = id;
    }

    pub fn contains(&self, id: u8) -> bool {
        self.data.contains(&id)
    }

    /// Sorted distinct ids present.
    pub fn ids(&self) -> Vec<u8> {
        let mut seen = [false; 256];
        for &v in &self.data {
            seen[v as usize] = true;
        }
        (0..=255u8).filter(|&i| seen[i as usize]).collect()
    }

    pub fn map(&self, f: impl Fn(u8) -> u8) -> Self {
        LabelMap {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut data = self.data.clone();
        for row in data.chunks_mut(self.width) {
            row.reverse();
        }
        LabelMap { data, ..*self }
    }
}

/// 8-bit interleaved RGB image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl RgbImage {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != 3 * height * width {
            return Err(Error::invalid(format!(
                "rgb image {height}x{width} with {} bytes",
                data.len()
            )));
        }
        Ok(RgbImage { height, width, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    /// Planar `[3, H, W]` tensor with values scaled to [-1, 1].
    pub fn to_tensor<S: Scalar>(&self) -> Tensor<S> {
        let plane = self.height * self.width;
        let mut out = vec![S::zero(); 3 * plane];
        for (p, px) in self.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * plane + p] = S::of(px[c] as f64 / 127.5 - 1.0);
            }
        }
        Tensor::new(vec![3, self.height, self.width], out).expect("sized")
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sample {
    pub image: RgbImage,
    pub mask: LabelMap,
    /// Appearance regime index (0 when the dataset has a single regime).
    pub domain: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    /// Non-background class count; masks hold ids in `0..=n_classes`.
    pub n_classes: usize,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn n_domains(&self) -> usize {
        self.samples.iter().map(|s| s.domain + 1).max().unwrap_or(1)
    }

    /// Number of samples whose mask contains each class id `0..=n_classes`.
    pub fn class_image_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes + 1];
        for s in &self.samples {
            for id in s.mask.ids() {
                if let Some(c) = counts.get_mut(id as usize) {
                    *c += 1;
                }
            }
        }
        counts
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShapesConfig {
    pub n_classes: usize,
    pub height: usize,
    pub width: usize,
    pub n_train: usize,
    pub n_test: usize,
    /// Background style regimes; images cycle through them. Empty means one regime.
    pub domains: Vec<String>,
    pub seed: u64,
}

impl Default for ShapesConfig {
    fn default() -> Self {
        ShapesConfig {
            n_classes: 5,
            height: 32,
            width: 32,
            n_train: 200,
            n_test: 50,
            domains: Vec::new(),
            seed: 0,
        }
    }
}

/// Largest class count for which round-robin placement keeps every class in
/// at least 5% of the images.
pub const MAX_SHAPE_CLASSES: usize = 20;

impl ShapesConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes == 0 || self.n_classes > MAX_SHAPE_CLASSES {
            return Err(Error::Config(format!(
                "shapes.n_classes must be in 1..={MAX_SHAPE_CLASSES}, got {}",
                self.n_classes
            )));
        }
        if self.height < 16 || self.width < 16 {
            return Err(Error::Config(format!(
                "shape images must be at least 16x16, got {}x{}",
                self.height, self.width
            )));
        }
        if self.n_train == 0 || self.n_test == 0 {
            return Err(Error::Config("shapes.n_train and shapes.n_test must be positive".into()));
        }
        Ok(())
    }

    pub fn n_domains(&self) -> usize {
        self.domains.len().max(1)
    }
}

const PALETTE: [[u8; 3]; MAX_SHAPE_CLASSES] = [
    [230, 40, 40],
    [40, 200, 60],
    [50, 80, 235],
    [240, 220, 40],
    [200, 50, 210],
    [40, 210, 220],
    [250, 140, 30],
    [130, 60, 20],
    [150, 240, 140],
    [255, 160, 200],
    [120, 20, 120],
    [20, 110, 110],
    [200, 200, 255],
    [110, 130, 20],
    [255, 255, 255],
    [10, 10, 90],
    [170, 0, 60],
    [0, 90, 0],
    [255, 100, 100],
    [90, 170, 255],
];

#[derive(Clone, Copy, Debug)]
enum ShapeKind {
    Square,
    Disc,
    Triangle,
    Diamond,
}

#[derive(Clone, Copy, Debug)]
struct Shape {
    kind: ShapeKind,
    cy: f64,
    cx: f64,
    r: f64,
}

impl Shape {
    fn covers(&self, y: usize, x: usize) -> bool {
        let (dy, dx) = (y as f64 + 0.5 - self.cy, x as f64 + 0.5 - self.cx);
        match self.kind {
            ShapeKind::Square => dy.abs() <= self.r && dx.abs() <= self.r,
            ShapeKind::Disc => dy * dy + dx * dx <= self.r * self.r,
            ShapeKind::Diamond => dy.abs() + dx.abs() <= self.r,
            // apex up, base at cy + r
            ShapeKind::Triangle => dy <= self.r && dy >= -self.r && dx.abs() <= (dy + self.r) / 2.0,
        }
    }
}

fn kind_of(class: usize) -> ShapeKind {
    match (class - 1) % 4 {
        0 => ShapeKind::Square,
        1 => ShapeKind::Disc,
        2 => ShapeKind::Triangle,
        _ => ShapeKind::Diamond,
    }
}

fn background_pixel(domain: usize, y: usize, x: usize, rng: &mut impl Rng) -> [u8; 3] {
    let base = 50.0 + (domain % 4) as f64 * 35.0;
    let stripes = if domain % 2 == 1 && (x + y) / 3 % 2 == 0 { 18.0 } else { 0.0 };
    let tint = (domain / 4) as f64 * 12.0;
    let n: f64 = rng.gen_range(-18.0..18.0);
    let v = |off: f64| (base + stripes + n + off).clamp(0.0, 255.0) as u8;
    [v(0.0), v(tint), v(-tint)]
}

fn shape_pixel(class: usize, y: usize, x: usize, rng: &mut impl Rng) -> [u8; 3] {
    let col = PALETTE[class - 1];
    let checker = if class > 10 && (x / 2 + y / 2) % 2 == 0 { -40.0 } else { 0.0 };
    let n: f64 = rng.gen_range(-12.0..12.0);
    let v = |c: u8| (c as f64 + n + checker).clamp(0.0, 255.0) as u8;
    [v(col[0]), v(col[1]), v(col[2])]
}

/// Places shapes; `None` when a shape cannot be placed without overlap.
fn try_render(cfg: &ShapesConfig, first_class: usize, domain: usize, rng: &mut impl Rng) -> Option<Sample> {
    let (h, w) = (cfg.height, cfg.width);
    let n_shapes = rng.gen_range(1..=3usize);
    let mut mask = LabelMap::filled(h, w, BACKGROUND);
    let side = h.min(w) as f64;
    for s in 0..n_shapes {
        let class = if s == 0 {
            first_class
        } else {
            rng.gen_range(1..=cfg.n_classes)
        };
        let mut placed = false;
        for _ in 0..50 {
            let r = rng.gen_range(side / 10.0..side / 5.0);
            let shape = Shape {
                kind: kind_of(class),
                cy: rng.gen_range(r..h as f64 - r),
                cx: rng.gen_range(r..w as f64 - r),
                r,
            };
            let pixels: Vec<(usize, usize)> = (0..h)
                .flat_map(|y| (0..w).map(move |x| (y, x)))
                .filter(|&(y, x)| shape.covers(y, x))
                .collect();
            if pixels.len() < 4 {
                continue;
            }
            // one pixel of clearance around existing shapes
            let clear = pixels.iter().all(|&(y, x)| {
                (y.saturating_sub(1)..=(y + 1).min(h - 1))
                    .all(|yy| (x.saturating_sub(1)..=(x + 1).min(w - 1)).all(|xx| mask.get(yy, xx) == BACKGROUND))
            });
            if clear {
                for (y, x) in pixels {
                    mask.set(y, x, class as u8);
                }
                placed = true;
                break;
            }
        }
        if !placed {
            return None;
        }
    }
    let mut data = Vec::with_capacity(3 * h * w);
    for y in 0..h {
        for x in 0..w {
            let px = match mask.get(y, x) {
                BACKGROUND => background_pixel(domain, y, x, rng),
                c => shape_pixel(c as usize, y, x, rng),
            };
            data.extend_from_slice(&px);
        }
    }
    Some(Sample {
        image: RgbImage::new(h, w, data).expect("sized"),
        mask,
        domain,
    })
}

fn render(cfg: &ShapesConfig, split: u64, index: usize) -> Sample {
    let first_class = index % cfg.n_classes + 1;
    let domain = index % cfg.n_domains();
    let mut attempt = 0u64;
    loop {
        let mut rng = seed::rng(cfg.seed, &[split, index as u64, seed::RETRY, attempt]);
        if let Some(s) = try_render(cfg, first_class, domain, &mut rng) {
            return s;
        }
        attempt += 1;
    }
}

/// Train and test splits. Every image holds 1 to 3 non-overlapping shapes; the
/// first shape of image `i` has class `i mod n_classes + 1`.
pub fn generate(cfg: &ShapesConfig) -> Result<(Dataset, Dataset)> {
    cfg.validate()?;
    let split = |tag: u64, n: usize| Dataset {
        n_classes: cfg.n_classes,
        samples: (0..n).map(|i| render(cfg, tag, i)).collect(),
    };
    Ok((split(seed::TRAIN_SET, cfg.n_train), split(seed::TEST_SET, cfg.n_test)))
}

// ---------------------------------------------------------------------------
// PPM / PGM

fn netpbm_header(magic: &str, w: usize, h: usize, domain: Option<usize>) -> Vec<u8> {
    let mut s = format!("{magic}\n");
    if let Some(d) = domain {
        let _ = writeln!(s, "# domain {d}");
    }
    let _ = write!(s, "{w} {h}\n255\n");
    s.into_bytes()
}

#[derive(Debug)]
struct Netpbm {
    width: usize,
    height: usize,
    domain: Option<usize>,
    pixels: Vec<u8>,
}

fn parse_netpbm(bytes: &[u8], magic: &[u8; 2], channels: usize, file: &Path) -> Result<Netpbm> {
    let bad = |msg: String| Error::data(file, msg);
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(bad(format!("expected {} header", String::from_utf8_lossy(magic))));
    }
    let mut pos = 2;
    let mut fields = Vec::with_capacity(3);
    let mut domain = None;
    while fields.len() < 3 {
        match bytes.get(pos) {
            None => {
                return Err(Error::Truncated {
                    file: file.to_path_buf(),
                    offset: pos as u64,
                })
            }
            Some(b'#') => {
                let end = bytes[pos..]
                    .iter()
                    .position(|&b| b == b'\n')
                    .map_or(bytes.len(), |e| pos + e);
                let comment = String::from_utf8_lossy(&bytes[pos + 1..end]);
                if let Some(d) = comment.trim().strip_prefix("domain ") {
                    domain = Some(d.trim().parse().map_err(|_| bad(format!("bad domain comment {comment:?}")))?);
                }
                pos = end;
            }
            Some(b) if b.is_ascii_whitespace() => pos += 1,
            Some(b) if b.is_ascii_digit() => {
                let start = pos;
                while bytes.get(pos).is_some_and(|b| b.is_ascii_digit()) {
                    pos += 1;
                }
                let text = std::str::from_utf8(&bytes[start..pos]).expect("digits");
                fields.push(text.parse::<usize>().map_err(|_| bad(format!("bad header number {text}")))?);
            }
            Some(&b) => return Err(bad(format!("unexpected byte {b:#04x} in header at offset {pos}"))),
        }
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(bad("missing separator after header".into())),
    }
    let (width, height, maxval) = (fields[0], fields[1], fields[2]);
    if width == 0 || height == 0 {
        return Err(bad(format!("zero-sized image {width}x{height}")));
    }
    if maxval != 255 {
        return Err(bad(format!("only 8-bit files are supported, maxval {maxval}")));
    }
    let need = width * height * channels;
    if bytes.len() < pos + need {
        return Err(Error::Truncated {
            file: file.to_path_buf(),
            offset: bytes.len() as u64,
        });
    }
    Ok(Netpbm {
        width,
        height,
        domain,
        pixels: bytes[pos..pos + need].to_vec(),
    })
}

pub fn write_ppm(img: &RgbImage, domain: usize, path: &Path) -> Result<()> {
    let mut out = netpbm_header("P6", img.width, img.height, Some(domain));
    out.extend_from_slice(&img.data);
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn write_pgm(mask: &LabelMap, path: &Path) -> Result<()> {
    let mut out = netpbm_header("P5", mask.width, mask.height, None);
    out.extend_from_slice(&mask.data);
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Image and its domain tag (0 when the file carries none).
pub fn read_ppm(path: &Path) -> Result<(RgbImage, usize)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let p = parse_netpbm(&bytes, b"P6", 3, path)?;
    Ok((RgbImage::new(p.height, p.width, p.pixels)?, p.domain.unwrap_or(0)))
}

pub fn read_pgm(path: &Path) -> Result<LabelMap> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let p = parse_netpbm(&bytes, b"P5", 1, path)?;
    LabelMap::new(p.height, p.width, p.pixels)
}

pub const INDEX_FILE: &str = "index.tsv";
pub const META_FILE: &str = "meta.txt";

/// Writes `dir/index.tsv`, `dir/meta.txt`, `dir/images/*.ppm`, `dir/masks/*.pgm`.
pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    for sub in ["images", "masks"] {
        let d = dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let mut index = String::new();
    for (i, s) in ds.samples.iter().enumerate() {
        let img = format!("images/{i:05}.ppm");
        let mask = format!("masks/{i:05}.pgm");
        write_ppm(&s.image, s.domain, &dir.join(&img))?;
        write_pgm(&s.mask, &dir.join(&mask))?;
        index.push_str(&format!("{img}\t{mask}\n"));
    }
    let path = dir.join(INDEX_FILE);
    fs::write(&path, index).map_err(|e| Error::io(&path, e))?;
    let path = dir.join(META_FILE);
    fs::write(&path, format!("n_classes = {}\n", ds.n_classes)).map_err(|e| Error::io(&path, e))
}

/// Loads a dataset saved by [`save_dataset`], in index-file order.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let meta_path = dir.join(META_FILE);
    let meta = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta = kv::parse(&meta).map_err(|e| Error::data(&meta_path, e.to_string()))?;
    let n_classes: usize = meta
        .get("n_classes")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::data(&meta_path, "missing or bad n_classes"))?;

    let index_path = dir.join(INDEX_FILE);
    let index = fs::read_to_string(&index_path).map_err(|e| Error::io(&index_path, e))?;
    let mut samples = Vec::new();
    for (lineno, line) in index.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let (img_rel, mask_rel) = line
            .split_once('\t')
            .ok_or_else(|| Error::data(&index_path, format!("line {}: expected image<TAB>mask", lineno + 1)))?;
        let (img_path, mask_path): (PathBuf, PathBuf) = (dir.join(img_rel), dir.join(mask_rel));
        let (image, domain) = read_ppm(&img_path)?;
        let mask = read_pgm(&mask_path)?;
        if image.height != mask.height || image.width != mask.width {
            return Err(Error::data(
                &mask_path,
                format!(
                    "mask is {}x{} but image {} is {}x{}",
                    mask.height,
                    mask.width,
                    img_path.display(),
                    image.height,
                    image.width
                ),
            ));
        }
        if let Some(&bad) = mask.data.iter().find(|&&v| v as usize > n_classes) {
            return Err(Error::data(
                &mask_path,
                format!("class id {bad} exceeds declared n_classes {n_classes}"),
            ));
        }
        samples.push(Sample { image, mask, domain });
    }
    if samples.is_empty() {
        return Err(Error::data(&index_path, "index lists no samples"));
    }
    Ok(Dataset { n_classes, samples })
}
