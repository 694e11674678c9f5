//! Deterministic synthetic dataset of colored shapes on value-noise
//! backgrounds, one class per silhouette.
//!
//! Every image is rendered from its own RNG stream derived from
//! `(seed, split, index)`, so any sample can be regenerated in isolation.

use std::fs;
use std::path::Path;

use image::{ImageEncoder, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::assign::Annotation;
use crate::boxes::{iou, BBox, CellAddress};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::tensor::Tensor;

pub const MIN_SHAPE_SIZE: f64 = 6.0;
/// Scenes whose shapes overlap more than this are rejected by [`render`].
pub const MAX_SCENE_IOU: f64 = 0.3;
const SUPERSAMPLE: usize = 4;
const NOISE_LATTICE: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Disk,
    Square,
    Triangle,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Disk, ShapeKind::Square, ShapeKind::Triangle];

    pub fn class_id(self) -> usize {
        self as usize
    }

    pub fn from_class(id: usize) -> Option<ShapeKind> {
        Self::ALL.get(id).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Disk => "disk",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
        }
    }

    /// Whether `(x, y)`, relative to the shape center, is covered by a shape
    /// with extents `w × h`. Disks and squares stretch to ellipses and
    /// rectangles; the triangle points up with its base on the bottom edge.
    fn covers(self, x: f64, y: f64, w: f64, h: f64) -> bool {
        let (hw, hh) = (w / 2.0, h / 2.0);
        match self {
            ShapeKind::Disk => (x / hw).powi(2) + (y / hh).powi(2) <= 1.0,
            ShapeKind::Square => x.abs() <= hw && y.abs() <= hh,
            ShapeKind::Triangle => {
                if !(-hh..=hh).contains(&y) {
                    return false;
                }
                let half_width = hw * (y + hh) / h;
                x.abs() <= half_width
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeSpec {
    pub kind: ShapeKind,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub color: [u8; 3],
}

impl ShapeSpec {
    pub fn bbox(&self) -> BBox {
        BBox::new(self.cx, self.cy, self.w, self.h)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub image_size: usize,
    pub background: [u8; 3],
    /// Peak deviation of the background value noise, in [0, 1] intensity units.
    pub noise_amplitude: f64,
    pub shapes: Vec<ShapeSpec>,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let size = self.image_size as f64;
        if self.image_size == 0 {
            return Err(Error::Scene("image size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.noise_amplitude) {
            return Err(Error::Scene("noise amplitude must lie in [0, 1]".into()));
        }
        for (i, s) in self.shapes.iter().enumerate() {
            let b = s.bbox();
            if s.w.min(s.h) < MIN_SHAPE_SIZE || !b.is_valid() {
                return Err(Error::Scene(format!("shape {i} smaller than {MIN_SHAPE_SIZE} px")));
            }
            if b.x0() < 0.0 || b.y0() < 0.0 || b.x1() > size || b.y1() > size {
                return Err(Error::Scene(format!("shape {i} extends outside the image")));
            }
            for (j, o) in self.shapes[..i].iter().enumerate() {
                let v = iou(&b, &o.bbox());
                if v > MAX_SCENE_IOU {
                    return Err(Error::Scene(format!("shapes {j} and {i} overlap with IOU {v:.3}")));
                }
            }
        }
        Ok(())
    }

    pub fn annotations(&self) -> Vec<Annotation> {
        self.shapes
            .iter()
            .map(|s| Annotation {
                bbox: s.bbox(),
                class_id: s.kind.class_id(),
            })
            .collect()
    }
}

/// Rasterize a scene. Shapes are anti-aliased by 4×4 supersampling.
pub fn render_rgb(spec: &SceneSpec) -> Result<(RgbImage, Vec<Annotation>)> {
    spec.validate()?;
    let n = spec.image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let lattice = n / NOISE_LATTICE + 2;
    let noise: Vec<f64> = (0..3 * lattice * lattice)
        .map(|_| rng.random_range(-1.0..=1.0) * spec.noise_amplitude)
        .collect();
    let mut px = vec![0.0f64; 3 * n * n];
    for y in 0..n {
        for x in 0..n {
            let gx = x as f64 / NOISE_LATTICE as f64;
            let gy = y as f64 / NOISE_LATTICE as f64;
            let (ix, iy) = (gx as usize, gy as usize);
            let (fx, fy) = (smooth(gx - ix as f64), smooth(gy - iy as f64));
            for c in 0..3 {
                let at = |i: usize, j: usize| noise[(c * lattice + j) * lattice + i];
                let top = at(ix, iy) * (1.0 - fx) + at(ix + 1, iy) * fx;
                let bot = at(ix, iy + 1) * (1.0 - fx) + at(ix + 1, iy + 1) * fx;
                let v = spec.background[c] as f64 / 255.0 + top * (1.0 - fy) + bot * fy;
                px[(y * n + x) * 3 + c] = v;
            }
        }
    }
    let step = 1.0 / SUPERSAMPLE as f64;
    for s in &spec.shapes {
        let b = s.bbox();
        let (x0, x1) = (b.x0().floor().max(0.0) as usize, (b.x1().ceil() as usize).min(n));
        let (y0, y1) = (b.y0().floor().max(0.0) as usize, (b.y1().ceil() as usize).min(n));
        for y in y0..y1 {
            for x in x0..x1 {
                let mut hits = 0;
                for sy in 0..SUPERSAMPLE {
                    for sx in 0..SUPERSAMPLE {
                        let px_ = x as f64 + (sx as f64 + 0.5) * step - s.cx;
                        let py_ = y as f64 + (sy as f64 + 0.5) * step - s.cy;
                        if s.kind.covers(px_, py_, s.w, s.h) {
                            hits += 1;
                        }
                    }
                }
                if hits == 0 {
                    continue;
                }
                let alpha = hits as f64 / (SUPERSAMPLE * SUPERSAMPLE) as f64;
                for c in 0..3 {
                    let v = &mut px[(y * n + x) * 3 + c];
                    *v = *v * (1.0 - alpha) + alpha * s.color[c] as f64 / 255.0;
                }
            }
        }
    }
    let bytes: Vec<u8> = px.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let img = RgbImage::from_raw(n as u32, n as u32, bytes).expect("buffer sized for image");
    Ok((img, spec.annotations()))
}

/// Rasterize a scene into a `[3, H, W]` tensor in [0, 1].
pub fn render(spec: &SceneSpec) -> Result<(Tensor, Vec<Annotation>)> {
    let (img, anns) = render_rgb(spec)?;
    Ok((image_to_tensor(&img), anns))
}

fn smooth(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

pub fn image_to_tensor(img: &RgbImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    let mut data = vec![0.0; 3 * w * h];
    for c in 0..3 {
        for i in 0..w * h {
            data[c * w * h + i] = raw[i * 3 + c] as f64 / 255.0;
        }
    }
    Tensor::new(vec![3, h, w], data).expect("image dims are positive")
}

/// Translate by `(dx, dy)` pixels; uncovered pixels become black.
pub fn shift_image(img: &RgbImage, dx: i64, dy: i64) -> RgbImage {
    let (w, h) = (img.width() as i64, img.height() as i64);
    let mut out = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = (x - dx, y - dy);
            if (0..w).contains(&sx) && (0..h).contains(&sy) {
                out.put_pixel(x as u32, y as u32, *img.get_pixel(sx as u32, sy as u32));
            }
        }
    }
    out
}

pub fn encode_png(img: &RgbImage) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    image::codecs::png::PngEncoder::new(&mut buf).write_image(
        img.as_raw(),
        img.width(),
        img.height(),
        image::ExtendedColorType::Rgb8,
    )?;
    Ok(buf)
}

pub fn decode_png(bytes: &[u8]) -> Result<RgbImage> {
    Ok(image::load_from_memory_with_format(bytes, image::ImageFormat::Png)?.to_rgb8())
}

/// Center of a cell, jittered uniformly by up to `jitter` of the stride per
/// axis. `jitter` must lie in [0, 0.5) so the center stays inside the cell.
pub fn placement_at_cell(
    cell: &CellAddress,
    config: &ModelConfig,
    jitter: f64,
    rng: &mut impl Rng,
) -> Result<(f64, f64)> {
    let grid = config.grid_size(cell.pathway);
    if cell.row >= grid || cell.col >= grid {
        return Err(Error::Invalid(format!(
            "cell ({}, {}) outside {grid}x{grid} grid",
            cell.row, cell.col
        )));
    }
    if is_border_cell(cell.row, cell.col, grid) {
        return Err(Error::BorderCell {
            row: cell.row,
            col: cell.col,
            grid,
        });
    }
    if !(0.0..0.5).contains(&jitter) {
        return Err(Error::Invalid(format!("jitter {jitter} outside [0, 0.5)")));
    }
    let s = config.stride(cell.pathway) as f64;
    let mut offset = || {
        if jitter == 0.0 {
            0.5
        } else {
            0.5 + rng.random_range(-jitter..jitter)
        }
    };
    let ox = offset();
    let oy = offset();
    Ok(((cell.col as f64 + ox) * s, (cell.row as f64 + oy) * s))
}

/// Cells on the outermost ring of the grid.
pub fn is_border_cell(row: usize, col: usize, grid: usize) -> bool {
    row == 0 || col == 0 || row + 1 >= grid || col + 1 >= grid
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub image_size: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Geometric-mean side length range, pixels.
    pub min_size: f64,
    pub max_size: f64,
    /// Maximum width/height ratio (and its inverse).
    pub max_aspect: f64,
    pub noise_amplitude: f64,
    /// Shapes in one generated image overlap at most this much.
    pub max_overlap_iou: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            image_size: 96,
            min_objects: 1,
            max_objects: 3,
            min_size: 10.0,
            max_size: 64.0,
            max_aspect: 1.6,
            noise_amplitude: 0.08,
            max_overlap_iou: 0.0,
        }
    }
}

impl GeneratorConfig {
    pub fn single_object() -> Self {
        Self {
            min_objects: 1,
            max_objects: 1,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.min_objects > self.max_objects {
            return Err(Error::Invalid("min_objects exceeds max_objects".into()));
        }
        if !(self.min_size >= MIN_SHAPE_SIZE && self.min_size <= self.max_size) {
            return Err(Error::Invalid(format!(
                "size range must start at >= {MIN_SHAPE_SIZE} px"
            )));
        }
        if self.max_size * self.max_aspect.sqrt() > self.image_size as f64 {
            return Err(Error::Invalid("largest shape does not fit the image".into()));
        }
        if self.max_aspect.is_nan() || self.max_aspect < 1.0 {
            return Err(Error::Invalid("max_aspect must be >= 1".into()));
        }
        if !(0.0..=MAX_SCENE_IOU).contains(&self.max_overlap_iou) {
            return Err(Error::Invalid("max_overlap_iou outside [0, 0.3]".into()));
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        hex_digest(serde_json::to_string(self).expect("config serializes").as_bytes())
    }

    /// Random extents with log-uniform size and aspect.
    pub fn sample_extent(&self, rng: &mut impl Rng) -> (f64, f64) {
        let size = rng.random_range(self.min_size.ln()..=self.max_size.ln()).exp();
        let la = self.max_aspect.ln();
        let aspect = if la > 0.0 {
            rng.random_range(-la..=la).exp()
        } else {
            1.0
        };
        let w = (size * aspect.sqrt()).max(MIN_SHAPE_SIZE);
        let h = (size / aspect.sqrt()).max(MIN_SHAPE_SIZE);
        (w, h)
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Per-image seed derived from the dataset seed, split and index.
pub fn image_seed(seed: u64, split: &str, index: usize) -> u64 {
    let d = Sha256::digest(format!("{seed}/{split}/{index}").as_bytes());
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

fn random_color(rng: &mut impl Rng) -> [u8; 3] {
    [rng.random(), rng.random(), rng.random()]
}

fn luminance(c: [u8; 3]) -> f64 {
    (0.299 * c[0] as f64 + 0.587 * c[1] as f64 + 0.114 * c[2] as f64) / 255.0
}

/// A shape color that stands out from `background`.
pub fn contrasting_color(background: [u8; 3], rng: &mut impl Rng) -> [u8; 3] {
    loop {
        let c = random_color(rng);
        if (luminance(c) - luminance(background)).abs() >= 0.3 {
            return c;
        }
    }
}

fn random_background(rng: &mut impl Rng) -> [u8; 3] {
    let base: i32 = rng.random_range(40..=215);
    let mut tint = || (base + rng.random_range(-30..=30)).clamp(0, 255) as u8;
    [tint(), tint(), tint()]
}

/// Random scene for one image.
pub fn random_scene(seed: u64, gen: &GeneratorConfig) -> SceneSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = gen.image_size as f64;
    let background = random_background(&mut rng);
    let count = rng.random_range(gen.min_objects..=gen.max_objects);
    let mut shapes: Vec<ShapeSpec> = Vec::new();
    for _ in 0..count {
        for _attempt in 0..64 {
            let kind = ShapeKind::ALL[rng.random_range(0..3)];
            let (w, h) = gen.sample_extent(&mut rng);
            let cx = rng.random_range(w / 2.0..=size - w / 2.0);
            let cy = rng.random_range(h / 2.0..=size - h / 2.0);
            let candidate = BBox::new(cx, cy, w, h);
            if shapes.iter().any(|s| iou(&s.bbox(), &candidate) > gen.max_overlap_iou) {
                continue;
            }
            let color = contrasting_color(background, &mut rng);
            shapes.push(ShapeSpec {
                kind,
                cx,
                cy,
                w,
                h,
                color,
            });
            break;
        }
    }
    SceneSpec {
        seed: rng.random(),
        image_size: gen.image_size,
        background,
        noise_amplitude: gen.noise_amplitude,
        shapes,
    }
}

/// Single-object scene with a fixed class, center and extent.
pub fn single_object_scene(
    seed: u64,
    gen: &GeneratorConfig,
    kind: ShapeKind,
    center: (f64, f64),
    extent: (f64, f64),
) -> SceneSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let background = random_background(&mut rng);
    let color = contrasting_color(background, &mut rng);
    SceneSpec {
        seed: rng.random(),
        image_size: gen.image_size,
        background,
        noise_amplitude: gen.noise_amplitude,
        shapes: vec![ShapeSpec {
            kind,
            cx: center.0,
            cy: center.1,
            w: extent.0,
            h: extent.1,
            color,
        }],
    }
}

#[derive(Clone, Debug)]
pub struct Sample {
    pub id: String,
    pub image: RgbImage,
    pub annotations: Vec<Annotation>,
}

impl Sample {
    pub fn tensor(&self) -> Tensor {
        image_to_tensor(&self.image)
    }
}

#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Sample> {
        self.samples.iter().find(|s| s.id == id)
    }

    pub fn extents(&self) -> Vec<(f64, f64)> {
        self.samples
            .iter()
            .flat_map(|s| s.annotations.iter().map(|a| (a.bbox.w, a.bbox.h)))
            .collect()
    }
}

/// Render `n` images of one split in memory.
pub fn generate_split(n: usize, seed: u64, split: &str, gen: &GeneratorConfig) -> Result<Dataset> {
    gen.validate()?;
    let samples = (0..n)
        .map(|i| {
            let spec = random_scene(image_seed(seed, split, i), gen);
            let (image, annotations) = render_rgb(&spec)?;
            Ok(Sample {
                id: format!("{split}_{i:05}"),
                image,
                annotations,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { samples })
}

#[derive(Serialize, Deserialize)]
struct AnnotationRecord {
    image: String,
    boxes: Vec<Annotation>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub seed: u64,
    pub config_hash: String,
    pub n_train: usize,
    pub n_val: usize,
    pub generator: GeneratorConfig,
}

/// Train and validation splits read back from disk.
#[derive(Clone, Debug)]
pub struct DatasetFiles {
    pub meta: DatasetMeta,
    pub train: Dataset,
    pub val: Dataset,
}

impl DatasetFiles {
    pub fn all(&self) -> impl Iterator<Item = &Sample> {
        self.train.samples.iter().chain(&self.val.samples)
    }

    pub fn get(&self, id: &str) -> Option<&Sample> {
        self.all().find(|s| s.id == id)
    }
}

/// Write `<out>/images/*.png`, `<out>/annotations.json` and `<out>/meta.json`.
pub fn generate_dataset(
    n_train: usize,
    n_val: usize,
    seed: u64,
    gen: &GeneratorConfig,
    out: &Path,
) -> Result<DatasetMeta> {
    if n_train == 0 {
        return Err(Error::Invalid("n_train must be at least 1".into()));
    }
    let train = generate_split(n_train, seed, "train", gen)?;
    let val = generate_split(n_val, seed, "val", gen)?;
    let images = out.join("images");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let mut records = Vec::with_capacity(n_train + n_val);
    for s in train.samples.iter().chain(&val.samples) {
        let name = format!("images/{}.png", s.id);
        let path = out.join(&name);
        fs::write(&path, encode_png(&s.image)?).map_err(|e| Error::io(&path, e))?;
        records.push(AnnotationRecord {
            image: name,
            boxes: s.annotations.clone(),
        });
    }
    let meta = DatasetMeta {
        seed,
        config_hash: gen.hash(),
        n_train,
        n_val,
        generator: gen.clone(),
    };
    write_json(&out.join("annotations.json"), &records)?;
    write_json(&out.join("meta.json"), &meta)?;
    Ok(meta)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_dataset(dir: &Path) -> Result<DatasetFiles> {
    let read = |name: &str| {
        let p = dir.join(name);
        fs::read_to_string(&p).map_err(|e| Error::io(&p, e))
    };
    let meta: DatasetMeta = serde_json::from_str(&read("meta.json")?)?;
    let records: Vec<AnnotationRecord> = serde_json::from_str(&read("annotations.json")?)?;
    let mut train = Dataset::default();
    let mut val = Dataset::default();
    for r in records {
        let path = dir.join(&r.image);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let id = Path::new(&r.image)
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::Invalid(format!("bad image path {}", r.image)))?
            .to_string();
        let sample = Sample {
            image: decode_png(&bytes)?,
            annotations: r.boxes,
            id: id.clone(),
        };
        if id.starts_with("val_") {
            val.samples.push(sample);
        } else {
            train.samples.push(sample);
        }
    }
    Ok(DatasetFiles { meta, train, val })
}
