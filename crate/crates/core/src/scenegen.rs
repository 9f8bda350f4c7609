//! Synthetic detection scenes: gray geometric objects (square, disc,
//! triangle) on textured backgrounds, plus the four-split dataset built from
//! them.
//!
//! Clear-weather scenes form the source domain. The target domain uses the
//! same scene generator with style and/or weather corruption applied, so the
//! class distribution matches across domains and only the appearance shifts.

use crate::boxes::BoundingBox;
use crate::corruption::{corrupt, CorruptionRecord, StyleRanges, WeatherRanges};
use crate::error::{Error, Result};
use crate::pixels::PixelGrid;
use crate::seed::{derive_seed, rng_for};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

pub const CLASS_NAMES: [&str; 3] = ["square", "disc", "triangle"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub num_classes: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_size: f64,
    pub max_size: f64,
    /// Maximum per-pixel background noise amplitude.
    pub noise_amplitude: f64,
    /// Minimum absolute shade difference between an object and the background.
    pub min_contrast: f64,
    /// Gap kept between object boxes.
    pub margin: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            image_height: 64,
            image_width: 64,
            num_classes: 3,
            min_objects: 1,
            max_objects: 3,
            min_size: 16.0,
            max_size: 24.0,
            noise_amplitude: 0.06,
            min_contrast: 0.3,
            margin: 2.0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.num_classes == 0 || self.num_classes > CLASS_NAMES.len() {
            return err(format!("num_classes must be in 1..=3, got {}", self.num_classes));
        }
        if self.image_height == 0 || self.image_width == 0 {
            return err("image size must be positive".into());
        }
        if !(self.min_size >= 1.0) || self.min_size > self.max_size {
            return err(format!("invalid size range [{}, {}]", self.min_size, self.max_size));
        }
        let side = self.image_height.min(self.image_width) as f64;
        if self.min_size > side {
            return err(format!("min_size {} exceeds image side {side}", self.min_size));
        }
        if self.min_objects > self.max_objects {
            return err("min_objects exceeds max_objects".into());
        }
        if !(0.0..=0.5).contains(&self.min_contrast) {
            return err(format!("min_contrast must lie in [0, 0.5], got {}", self.min_contrast));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub class_id: usize,
    pub center: (f64, f64),
    pub size: (f64, f64),
    pub orientation: f64,
    pub shade: f64,
}

impl SceneObject {
    fn polygon(&self) -> Option<Vec<(f64, f64)>> {
        let (w, h) = (self.size.0 / 2.0, self.size.1 / 2.0);
        let local: Vec<(f64, f64)> = match self.class_id {
            0 => vec![(-w, -h), (w, -h), (w, h), (-w, h)],
            2 => vec![(0.0, -h), (w, h), (-w, h)],
            _ => return None,
        };
        let (s, c) = self.orientation.sin_cos();
        Some(
            local
                .into_iter()
                .map(|(x, y)| (self.center.0 + c * x - s * y, self.center.1 + s * x + c * y))
                .collect(),
        )
    }

    /// Whether the point lies inside the object.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        match self.polygon() {
            Some(poly) => inside_convex(&poly, x, y),
            None => {
                let (rx, ry) = (self.size.0 / 2.0, self.size.1 / 2.0);
                let (dx, dy) = ((x - self.center.0) / rx, (y - self.center.1) / ry);
                dx * dx + dy * dy < 1.0
            }
        }
    }

    /// Continuous extent of the shape, before rasterization.
    pub fn extent(&self) -> (f64, f64, f64, f64) {
        match self.polygon() {
            Some(poly) => poly.iter().fold(
                (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY),
                |(x0, y0, x1, y1), &(x, y)| (x0.min(x), y0.min(y), x1.max(x), y1.max(y)),
            ),
            None => (
                self.center.0 - self.size.0 / 2.0,
                self.center.1 - self.size.1 / 2.0,
                self.center.0 + self.size.0 / 2.0,
                self.center.1 + self.size.1 / 2.0,
            ),
        }
    }
}

fn inside_convex(poly: &[(f64, f64)], x: f64, y: f64) -> bool {
    let mut sign = 0.0;
    for i in 0..poly.len() {
        let (ax, ay) = poly[i];
        let (bx, by) = poly[(i + 1) % poly.len()];
        let cross = (bx - ax) * (y - ay) - (by - ay) * (x - ax);
        if cross == 0.0 {
            continue;
        }
        if sign == 0.0 {
            sign = cross.signum();
        } else if cross.signum() != sign {
            return false;
        }
    }
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Background {
    pub base: f64,
    pub noise: f64,
    /// Linear shading gradient across the image, `(dx, dy)` per full width/height.
    pub gradient: (f64, f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub objects: Vec<SceneObject>,
    pub background: Background,
    pub image_size: (usize, usize),
    pub noise_seed: u64,
}

impl SceneSpec {
    pub fn check_invariants(&self, cfg: &GenConfig) -> Result<()> {
        let (h, w) = self.image_size;
        if self.objects.len() > cfg.max_objects {
            return Err(Error::Config(format!("{} objects exceeds max", self.objects.len())));
        }
        for (i, o) in self.objects.iter().enumerate() {
            let (x0, y0, x1, y1) = o.extent();
            if x0 < 0.0 || y0 < 0.0 || x1 > w as f64 || y1 > h as f64 {
                return Err(Error::Config(format!("object {i} leaves the image")));
            }
            if o.size.0 < cfg.min_size || o.size.1 < cfg.min_size {
                return Err(Error::Config(format!("object {i} is below min_size")));
            }
            if o.class_id >= cfg.num_classes {
                return Err(Error::Config(format!("object {i} has class {}", o.class_id)));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    SourceClear,
    TargetAdverse,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    pub pixels: PixelGrid,
    pub boxes: Vec<BoundingBox>,
    pub domain: Domain,
    pub corruption: Option<CorruptionRecord>,
}

impl LabeledImage {
    pub fn check_invariants(&self) -> Result<()> {
        let (h, w) = (self.pixels.height(), self.pixels.width());
        for b in &self.boxes {
            b.validate()?;
            if !b.within(h, w) {
                return Err(Error::Shape(format!("box {b:?} outside {h}x{w} image")));
            }
        }
        if self.domain == Domain::SourceClear && self.corruption.as_ref().is_some_and(|c| c.weather.is_some()) {
            return Err(Error::Config("source image carries a weather corruption".into()));
        }
        Ok(())
    }
}

fn sample_shade(rng: &mut impl Rng, base: f64, min_contrast: f64) -> f64 {
    // Valid shades: [0.05, base - c] ∪ [base + c, 0.95].
    let lo_len = (base - min_contrast - 0.05).max(0.0);
    let hi_len = (0.95 - base - min_contrast).max(0.0);
    let u = rng.random::<f64>() * (lo_len + hi_len);
    if u < lo_len {
        0.05 + u
    } else {
        base + min_contrast + (u - lo_len)
    }
}

pub fn sample_scene(seed: u64, cfg: &GenConfig) -> Result<SceneSpec> {
    cfg.validate()?;
    let mut rng = rng_for(seed, &[0]);
    let (h, w) = (cfg.image_height, cfg.image_width);
    let base = 0.15 + 0.7 * rng.random::<f64>();
    let background = Background {
        base,
        noise: cfg.noise_amplitude * rng.random::<f64>(),
        gradient: (
            0.1 * (2.0 * rng.random::<f64>() - 1.0),
            0.1 * (2.0 * rng.random::<f64>() - 1.0),
        ),
    };
    let count = rng.random_range(cfg.min_objects..=cfg.max_objects);
    let mut objects: Vec<SceneObject> = Vec::with_capacity(count);
    let mut placed: Vec<(f64, f64, f64, f64)> = Vec::new();
    for _ in 0..count {
        for _attempt in 0..50 {
            let class_id = rng.random_range(0..cfg.num_classes);
            let s = cfg.min_size + (cfg.max_size - cfg.min_size) * rng.random::<f64>();
            let orientation = if class_id == 1 {
                0.0
            } else {
                2.0 * PI * rng.random::<f64>()
            };
            let shade = sample_shade(&mut rng, base, cfg.min_contrast);
            let mut obj = SceneObject {
                class_id,
                center: (0.0, 0.0),
                size: (s, s),
                orientation,
                shade,
            };
            // extent relative to a center at the origin; not symmetric for rotated triangles
            let (x0, y0, x1, y1) = obj.extent();
            let eps = 1e-9;
            let (cx_lo, cx_hi) = (-x0 + eps, w as f64 - x1 - eps);
            let (cy_lo, cy_hi) = (-y0 + eps, h as f64 - y1 - eps);
            if cx_lo > cx_hi || cy_lo > cy_hi {
                continue;
            }
            obj.center = (
                cx_lo + (cx_hi - cx_lo) * rng.random::<f64>(),
                cy_lo + (cy_hi - cy_lo) * rng.random::<f64>(),
            );
            let ext = obj.extent();
            let m = cfg.margin;
            let clash = placed
                .iter()
                .any(|p| ext.0 - m < p.2 && p.0 < ext.2 + m && ext.1 - m < p.3 && p.1 < ext.3 + m);
            if !clash {
                placed.push(ext);
                objects.push(obj);
                break;
            }
        }
    }
    Ok(SceneSpec {
        objects,
        background,
        image_size: (h, w),
        noise_seed: derive_seed(seed, &[1]),
    })
}

/// Rasterize a scene. Each object gets the tight box of its rasterized pixels.
pub fn render(spec: &SceneSpec) -> LabeledImage {
    let (h, w) = spec.image_size;
    let bg = &spec.background;
    let mut rng = rng_for(spec.noise_seed, &[]);
    let mut shade = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let g = bg.gradient.0 * (x as f64 / w as f64 - 0.5) + bg.gradient.1 * (y as f64 / h as f64 - 0.5);
            shade[y * w + x] = bg.base + g;
        }
    }
    let mut boxes = Vec::with_capacity(spec.objects.len());
    for obj in &spec.objects {
        let (x0, y0, x1, y1) = obj.extent();
        let (mut bx0, mut by0, mut bx1, mut by1) = (usize::MAX, usize::MAX, 0, 0);
        let ys = (y0.floor().max(0.0) as usize)..((y1.ceil() as usize).min(h));
        for y in ys {
            for x in (x0.floor().max(0.0) as usize)..((x1.ceil() as usize).min(w)) {
                if obj.contains(x as f64 + 0.5, y as f64 + 0.5) {
                    shade[y * w + x] = obj.shade;
                    bx0 = bx0.min(x);
                    by0 = by0.min(y);
                    bx1 = bx1.max(x + 1);
                    by1 = by1.max(y + 1);
                }
            }
        }
        if bx0 < bx1 && by0 < by1 {
            boxes.push(BoundingBox::new(
                bx0 as f64,
                by0 as f64,
                bx1 as f64,
                by1 as f64,
                obj.class_id,
            ));
        }
    }
    let mut pixels = PixelGrid::filled(h, w, 0.0);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let n = bg.noise * (2.0 * rng.random::<f64>() - 1.0);
                pixels.set(c, y, x, (shade[y * w + x] + n).clamp(0.0, 1.0));
            }
        }
    }
    LabeledImage {
        pixels,
        boxes,
        domain: Domain::SourceClear,
        corruption: None,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    SourceTrain,
    TargetTrain,
    TargetTest,
    SourceTest,
}

impl Split {
    pub const ALL: [Split; 4] = [
        Split::SourceTrain,
        Split::TargetTrain,
        Split::TargetTest,
        Split::SourceTest,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Split::SourceTrain => "source_train",
            Split::TargetTrain => "target_train",
            Split::TargetTest => "target_test",
            Split::SourceTest => "source_test",
        }
    }

    pub fn parse(s: &str) -> Option<Split> {
        Split::ALL.into_iter().find(|sp| sp.name() == s)
    }

    /// Whether boxes may be read from this split. Target training images are
    /// unlabeled by construction of the adaptation protocol.
    pub fn is_labeled(self) -> bool {
        self != Split::TargetTrain
    }

    pub fn domain(self) -> Domain {
        match self {
            Split::SourceTrain | Split::SourceTest => Domain::SourceClear,
            Split::TargetTrain | Split::TargetTest => Domain::TargetAdverse,
        }
    }

    fn index(self) -> u64 {
        self as u64
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Which gap families the target domain carries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetShift {
    StyleAndWeather,
    StyleOnly,
    WeatherOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorruptionConfig {
    pub shift: TargetShift,
    pub style: StyleRanges,
    pub weather: WeatherRanges,
}

impl Default for CorruptionConfig {
    fn default() -> Self {
        Self {
            shift: TargetShift::StyleAndWeather,
            style: StyleRanges::default(),
            weather: WeatherRanges::default(),
        }
    }
}

impl CorruptionConfig {
    pub fn sample_record(&self, seed: u64) -> CorruptionRecord {
        let mut rng = rng_for(seed, &[0]);
        let style = matches!(self.shift, TargetShift::StyleAndWeather | TargetShift::StyleOnly)
            .then(|| self.style.sample(&mut rng));
        let weather = matches!(self.shift, TargetShift::StyleAndWeather | TargetShift::WeatherOnly)
            .then(|| self.weather.sample(&mut rng));
        CorruptionRecord {
            style,
            weather,
            seed: derive_seed(seed, &[1]),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSizes {
    pub source_train: usize,
    pub target_train: usize,
    pub target_test: usize,
    pub source_test: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        Self {
            source_train: 500,
            target_train: 500,
            target_test: 100,
            source_test: 100,
        }
    }
}

impl SplitSizes {
    pub fn get(&self, split: Split) -> usize {
        match split {
            Split::SourceTrain => self.source_train,
            Split::TargetTrain => self.target_train,
            Split::TargetTest => self.target_test,
            Split::SourceTest => self.source_test,
        }
    }
}

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub split: Split,
    pub domain: Domain,
    pub boxes: Vec<BoundingBox>,
    pub corruption: Option<CorruptionRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub master_seed: u64,
    pub images: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn entries(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.images.iter().filter(move |e| e.split == split)
    }

    pub fn count(&self, split: Split) -> usize {
        self.entries(split).count()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

/// Write `bytes` to `path` through a temporary sibling and an atomic rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Generate one labeled image for `(split, index)`; pure in its arguments.
pub fn generate_image(
    gen: &GenConfig,
    corruption: &CorruptionConfig,
    split: Split,
    index: usize,
    master_seed: u64,
) -> Result<LabeledImage> {
    let scene_seed = derive_seed(master_seed, &[split.index(), index as u64, 0]);
    let spec = sample_scene(scene_seed, gen)?;
    let mut img = render(&spec);
    if split.domain() == Domain::TargetAdverse {
        let record = corruption.sample_record(derive_seed(master_seed, &[split.index(), index as u64, 1]));
        let (pixels, record) = corrupt(&img.pixels, &record)?;
        img.pixels = pixels;
        img.corruption = Some(record);
        img.domain = Domain::TargetAdverse;
    }
    img.pixels = img.pixels.quantized();
    Ok(img)
}

pub fn build_dataset(
    gen: &GenConfig,
    corruption: &CorruptionConfig,
    sizes: &SplitSizes,
    out_dir: &Path,
    master_seed: u64,
) -> Result<Manifest> {
    gen.validate()?;
    corruption.weather.validate()?;
    let mut images = Vec::new();
    for split in Split::ALL {
        let dir = out_dir.join("images").join(split.name());
        fs::create_dir_all(&dir)?;
        for i in 0..sizes.get(split) {
            let img = generate_image(gen, corruption, split, i, master_seed)?;
            let file = format!("images/{}/{i:05}.png", split.name());
            img.pixels.save_png(&out_dir.join(&file))?;
            images.push(ManifestEntry {
                file,
                split,
                domain: img.domain,
                boxes: img.boxes,
                corruption: img.corruption,
            });
        }
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        master_seed,
        images,
    };
    write_atomic(&out_dir.join(MANIFEST_FILE), manifest.to_json()?.as_bytes())?;
    Ok(manifest)
}

/// Read access to a generated dataset. Boxes are only handed out for
/// labeled splits.
#[derive(Clone, Debug)]
pub struct Dataset {
    root: PathBuf,
    manifest: Manifest,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let text = fs::read_to_string(root.join(MANIFEST_FILE))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        if manifest.version != MANIFEST_VERSION {
            return Err(Error::Config(format!(
                "unsupported manifest version {}",
                manifest.version
            )));
        }
        Ok(Self {
            root: root.to_path_buf(),
            manifest,
        })
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn labeled(&self, split: Split) -> Result<Vec<LabeledImage>> {
        if !split.is_labeled() {
            return Err(Error::LabelLeak(format!("split {split} is unlabeled")));
        }
        self.manifest
            .entries(split)
            .map(|e| {
                let img = LabeledImage {
                    pixels: PixelGrid::load_png(&self.root.join(&e.file))?,
                    boxes: e.boxes.clone(),
                    domain: e.domain,
                    corruption: e.corruption.clone(),
                };
                img.check_invariants()?;
                Ok(img)
            })
            .collect()
    }

    /// Pixels only; valid for every split.
    pub fn unlabeled(&self, split: Split) -> Result<Vec<PixelGrid>> {
        self.manifest
            .entries(split)
            .map(|e| PixelGrid::load_png(&self.root.join(&e.file)))
            .collect()
    }
}
