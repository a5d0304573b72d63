//! Procedural colored-shape scenes with per-instance masks and
//! complete / partial / scarce descriptions.
//!
//! Scenes composite anti-aliased shapes over an achromatic luminance
//! gradient; each shape carries a palette color plus an L-only shading ramp
//! so the grayscale input has structure inside instances.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{lab_pixel_to_rgb, to_grayscale, GrayImage, RgbImage};
use crate::textenc::split_words;

pub const SCARCE_TEXT: &str = "a colorful image";
pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

/// Fixed 11-name color vocabulary with CIELAB reference values.
#[derive(Clone, Debug)]
pub struct Palette {
    entries: Vec<(String, [f64; 3])>,
}

impl Palette {
    /// References derived from fixed sRGB anchors, so every entry is
    /// renderable without clipping.
    pub fn standard() -> Self {
        let anchors: [(&str, [f64; 3]); 11] = [
            ("red", [0.85, 0.10, 0.10]),
            ("green", [0.10, 0.65, 0.15]),
            ("blue", [0.15, 0.25, 0.85]),
            ("yellow", [0.95, 0.85, 0.10]),
            ("orange", [0.95, 0.55, 0.10]),
            ("purple", [0.55, 0.15, 0.70]),
            ("pink", [0.95, 0.60, 0.75]),
            ("brown", [0.55, 0.32, 0.14]),
            ("black", [0.05, 0.05, 0.05]),
            ("white", [0.97, 0.97, 0.97]),
            ("gray", [0.50, 0.50, 0.50]),
        ];
        let entries = anchors
            .iter()
            .map(|(name, rgb)| {
                let (l, a, b) = crate::imaging::rgb_pixel_to_lab(rgb[0], rgb[1], rgb[2]);
                (name.to_string(), [l, a, b])
            })
            .collect();
        Self { entries }
    }

    pub fn names(&self) -> Vec<&str> {
        self.entries.iter().map(|(n, _)| n.as_str()).collect()
    }

    pub fn lab_of(&self, name: &str) -> Option<[f64; 3]> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, lab)| *lab)
    }

    pub fn entries(&self) -> &[(String, [f64; 3])] {
        &self.entries
    }

    /// The 8 names with meaningful chroma (instance fill colors by default).
    pub fn chromatic_names(&self) -> Vec<&str> {
        self.entries
            .iter()
            .map(|(n, _)| n.as_str())
            .filter(|n| !matches!(*n, "black" | "white" | "gray"))
            .collect()
    }

    /// Nearest entry by full-Lab distance.
    pub fn classify_lab(&self, lab: [f64; 3]) -> &str {
        self.entries
            .iter()
            .min_by(|(_, p), (_, q)| de(lab, *p).partial_cmp(&de(lab, *q)).unwrap())
            .map(|(n, _)| n.as_str())
            .unwrap()
    }

    /// Nearest entry by ab-plane distance; ties broken by closest L.
    pub fn classify_ab(&self, lab: [f64; 3]) -> &str {
        let key = |p: &[f64; 3]| {
            let dab = ((lab[1] - p[1]).powi(2) + (lab[2] - p[2]).powi(2)).sqrt();
            let dl = (lab[0] - p[0]).abs();
            (dab, dl)
        };
        self.entries
            .iter()
            .min_by(|(_, p), (_, q)| {
                let (ka, kl) = key(p);
                let (qa, ql) = key(q);
                (ka, kl).partial_cmp(&(qa, ql)).unwrap()
            })
            .map(|(n, _)| n.as_str())
            .unwrap()
    }
}

fn de(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

impl Shape {
    pub fn noun(&self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
        }
    }
}

/// Binary instance mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Self {
        assert_eq!(data.len(), height * width);
        Self { height, width, data }
    }

    pub fn area(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn overlaps(&self, other: &Mask) -> bool {
        self.data.iter().zip(other.data.iter()).any(|(&a, &b)| a && b)
    }

    /// Chebyshev dilation by `px` pixels.
    pub fn dilate(&self, px: usize) -> Mask {
        let (h, w) = (self.height, self.width);
        let mut out = vec![false; h * w];
        for y in 0..h {
            for x in 0..w {
                if !self.data[y * w + x] {
                    continue;
                }
                let y0 = y.saturating_sub(px);
                let x0 = x.saturating_sub(px);
                for yy in y0..=(y + px).min(h - 1) {
                    for xx in x0..=(x + px).min(w - 1) {
                        out[yy * w + xx] = true;
                    }
                }
            }
        }
        Mask::new(h, w, out)
    }

    pub fn to_rgb(&self) -> RgbImage {
        RgbImage::from_fn(self.height, self.width, |y, x| {
            let v = if self.data[y * self.width + x] { 1.0 } else { 0.0 };
            [v, v, v]
        })
        .expect("mask image")
    }

    pub fn from_rgb(img: &RgbImage) -> Mask {
        let (h, w) = (img.height(), img.width());
        let mut data = vec![false; h * w];
        for y in 0..h {
            for x in 0..w {
                data[y * w + x] = img.get(y, x)[0] > 0.5;
            }
        }
        Mask::new(h, w, data)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InstanceRecord {
    pub shape: Shape,
    pub color_name: String,
    pub mask: Mask,
    pub noun: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize, Hash)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Complete,
    Partial,
    Scarce,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Description {
    pub level: Level,
    pub text: String,
    /// (color-token position in the tokenized text, instance index)
    pub bindings: Vec<(usize, usize)>,
    /// Set when a partial request on a single-instance scene fell back to
    /// the complete rendering.
    pub fell_back_to_complete: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    pub image: RgbImage,
    pub gray: GrayImage,
    pub instances: Vec<InstanceRecord>,
    pub descriptions: BTreeMap<Level, Description>,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct GenConfig {
    pub image_size: usize,
    pub instance_min: usize,
    pub instance_max: usize,
    pub bg_l_range: (f64, f64),
    pub shade_amp: f64,
    pub min_area_frac: f64,
    pub max_union_frac: f64,
    /// Restrict instance fills to chromatic palette entries, keeping the
    /// ab-plane color-accuracy metric well defined on ground truth.
    pub chromatic_only: bool,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            instance_min: 2,
            instance_max: 3,
            bg_l_range: (30.0, 75.0),
            shade_amp: 10.0,
            min_area_frac: 0.05,
            max_union_frac: 0.8,
            chromatic_only: true,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 16 {
            return Err(Error::Config("image_size must be at least 16".into()));
        }
        if self.instance_min < 1 || self.instance_max > 4 || self.instance_min > self.instance_max {
            return Err(Error::Config(format!(
                "instance count range [{}, {}] must sit inside [1, 4]",
                self.instance_min, self.instance_max
            )));
        }
        if self.bg_l_range.0 < 0.0 || self.bg_l_range.1 > 100.0 || self.bg_l_range.0 > self.bg_l_range.1 {
            return Err(Error::Config("bg_l_range must be an ordered range inside [0,100]".into()));
        }
        Ok(())
    }
}

struct PlacedShape {
    shape: Shape,
    cx: f64,
    cy: f64,
    size: f64, // circle radius / square half-side / triangle circumradius
    coverage: Vec<f64>,
    mask: Mask,
}

/// Signed distance to the shape boundary (negative inside).
fn shape_sdf(shape: Shape, dx: f64, dy: f64, size: f64) -> f64 {
    match shape {
        Shape::Circle => (dx * dx + dy * dy).sqrt() - size,
        Shape::Square => dx.abs().max(dy.abs()) - size,
        Shape::Triangle => {
            // Equilateral triangle, apex up, circumradius `size`.
            let r = size;
            let d1 = dy - r * 0.5; // bottom edge (image y grows downward)
            let k = 3f64.sqrt() * 0.5;
            let d2 = -dy * 0.5 - dx * k - r * 0.5;
            let d3 = -dy * 0.5 + dx * k - r * 0.5;
            d1.max(d2).max(d3)
        }
    }
}

fn render_shape(shape: Shape, cx: f64, cy: f64, size: f64, s: usize) -> (Vec<f64>, Mask) {
    let sub = 4;
    let inv = 1.0 / (sub * sub) as f64;
    let mut coverage = vec![0.0; s * s];
    let pad = size.ceil() as isize + 2;
    let y0 = ((cy as isize) - pad).max(0) as usize;
    let y1 = (((cy as isize) + pad) as usize).min(s - 1);
    let x0 = ((cx as isize) - pad).max(0) as usize;
    let x1 = (((cx as isize) + pad) as usize).min(s - 1);
    for y in y0..=y1 {
        for x in x0..=x1 {
            let mut acc = 0.0;
            for sy in 0..sub {
                for sx in 0..sub {
                    let py = y as f64 + (sy as f64 + 0.5) / sub as f64;
                    let px = x as f64 + (sx as f64 + 0.5) / sub as f64;
                    if shape_sdf(shape, px - cx, py - cy, size) < 0.0 {
                        acc += 1.0;
                    }
                }
            }
            coverage[y * s + x] = acc * inv;
        }
    }
    let mask = Mask::new(s, s, coverage.iter().map(|&c| c >= 0.5).collect());
    (coverage, mask)
}

fn shape_size_range(shape: Shape, s: usize, min_area: f64) -> (f64, f64) {
    let min_size = match shape {
        Shape::Circle => (min_area / std::f64::consts::PI).sqrt(),
        Shape::Square => 0.5 * min_area.sqrt(),
        // Equilateral area = (3*sqrt(3)/4) r^2 for circumradius r.
        Shape::Triangle => (min_area / (0.75 * 3f64.sqrt())).sqrt(),
    };
    let lo = min_size * 1.1;
    let hi = (min_size * 1.55).min(s as f64 * 0.22);
    (lo, hi.max(lo * 1.01))
}

/// Deterministic scene generation from a seed.
pub fn generate_scene(seed: u64, config: &GenConfig) -> Result<SceneSample> {
    config.validate()?;
    let palette = Palette::standard();
    let mut rng = ChaCha12Rng::seed_from_u64(seed.wrapping_mul(0x9E3779B97F4A7C15).wrapping_add(1));
    let s = config.image_size;
    let min_area = config.min_area_frac * (s * s) as f64;
    let max_union = (config.max_union_frac * (s * s) as f64) as usize;

    const SCENE_RETRIES: usize = 24;
    const PLACE_TRIES: usize = 120;

    for _ in 0..SCENE_RETRIES {
        let n = rng.random_range(config.instance_min..=config.instance_max);
        let mut placed: Vec<PlacedShape> = Vec::with_capacity(n);
        let mut ok = true;
        for _ in 0..n {
            let mut found = false;
            for _ in 0..PLACE_TRIES {
                let shape = match rng.random_range(0..3) {
                    0 => Shape::Circle,
                    1 => Shape::Square,
                    _ => Shape::Triangle,
                };
                let (lo, hi) = shape_size_range(shape, s, min_area);
                let size = rng.random_range(lo..hi);
                let margin = size + 2.0;
                if 2.0 * margin >= s as f64 {
                    continue;
                }
                let cx = rng.random_range(margin..(s as f64 - margin));
                let cy = rng.random_range(margin..(s as f64 - margin));
                let (coverage, mask) = render_shape(shape, cx, cy, size, s);
                if (mask.area() as f64) < min_area {
                    continue;
                }
                // Disjoint with a 1px guard band so anti-aliased skirts
                // cannot make neighboring masks touch.
                let guard = mask.dilate(1);
                if placed.iter().any(|p| p.mask.overlaps(&guard)) {
                    continue;
                }
                let union: usize = placed.iter().map(|p| p.mask.area()).sum::<usize>() + mask.area();
                if union > max_union {
                    continue;
                }
                placed.push(PlacedShape { shape, cx, cy, size, coverage, mask });
                found = true;
                break;
            }
            if !found {
                ok = false;
                break;
            }
        }
        if !ok {
            continue;
        }

        // Colors: distinct within a scene, chromatic by default.
        let pool: Vec<String> = if config.chromatic_only {
            palette.chromatic_names().iter().map(|s| s.to_string()).collect()
        } else {
            palette.names().iter().map(|s| s.to_string()).collect()
        };
        let mut colors: Vec<String> = Vec::with_capacity(n);
        for _ in 0..placed.len() {
            let available: Vec<&String> = pool.iter().filter(|c| !colors.contains(c)).collect();
            let pick = available[rng.random_range(0..available.len())].clone();
            colors.push(pick);
        }

        // Background: achromatic linear luminance gradient.
        let theta = rng.random_range(0.0..std::f64::consts::TAU);
        let (gx, gy) = (theta.cos(), theta.sin());
        let (l0, l1) = (
            rng.random_range(config.bg_l_range.0..config.bg_l_range.1),
            rng.random_range(config.bg_l_range.0..config.bg_l_range.1),
        );
        let diag = (s as f64) * std::f64::consts::SQRT_2;

        // Per-instance shading ramps (L only).
        let ramps: Vec<(f64, f64, f64)> = placed
            .iter()
            .map(|_| {
                let phi = rng.random_range(0.0..std::f64::consts::TAU);
                (phi.cos(), phi.sin(), config.shade_amp)
            })
            .collect();

        let mut data = vec![0.0; 3 * s * s];
        let hw = s * s;
        for y in 0..s {
            for x in 0..s {
                let t = ((x as f64 - s as f64 / 2.0) * gx + (y as f64 - s as f64 / 2.0) * gy) / diag + 0.5;
                let mut l = l0 + (l1 - l0) * t.clamp(0.0, 1.0);
                let mut a = 0.0;
                let mut b = 0.0;
                for (k, p) in placed.iter().enumerate() {
                    let c = p.coverage[y * s + x];
                    if c > 0.0 {
                        let lab_ref = palette.lab_of(&colors[k]).unwrap();
                        let (ux, uy, amp) = ramps[k];
                        let span = ((x as f64 - p.cx) * ux + (y as f64 - p.cy) * uy) / p.size;
                        let shade = amp * span.clamp(-1.0, 1.0);
                        let il = (lab_ref[0] + shade).clamp(0.0, 100.0);
                        l = l * (1.0 - c) + il * c;
                        a = a * (1.0 - c) + lab_ref[1] * c;
                        b = b * (1.0 - c) + lab_ref[2] * c;
                        break; // masks are disjoint
                    }
                }
                let (r, gq, bq) = lab_pixel_to_rgb(l, a, b);
                data[y * s + x] = r;
                data[hw + y * s + x] = gq;
                data[2 * hw + y * s + x] = bq;
            }
        }
        let image = RgbImage::new(s, s, data)?;
        let gray = to_grayscale(&image);
        let instances: Vec<InstanceRecord> = placed
            .into_iter()
            .zip(colors.iter())
            .map(|(p, c)| InstanceRecord {
                shape: p.shape,
                color_name: c.clone(),
                noun: p.shape.noun().to_string(),
                mask: p.mask,
            })
            .collect();

        let mut descriptions = BTreeMap::new();
        for level in [Level::Complete, Level::Partial, Level::Scarce] {
            descriptions.insert(level, render_description(&instances, level, &mut rng)?);
        }
        return Ok(SceneSample { image, gray, instances, descriptions, seed });
    }
    Err(Error::Generation(format!(
        "could not place {}..={} disjoint instances of >= {:.0} px on a {s}x{s} canvas after {SCENE_RETRIES} attempts",
        config.instance_min, config.instance_max, min_area
    )))
}

/// Template text plus exact color-token bindings.
pub fn render_description(
    instances: &[InstanceRecord],
    level: Level,
    rng: &mut impl Rng,
) -> Result<Description> {
    if instances.is_empty() {
        return Err(Error::Generation("cannot describe an empty scene".into()));
    }
    match level {
        Level::Scarce => Ok(Description {
            level,
            text: SCARCE_TEXT.to_string(),
            bindings: vec![],
            fell_back_to_complete: false,
        }),
        Level::Complete => Ok(phrase_description(
            instances,
            &(0..instances.len()).collect::<Vec<_>>(),
            Level::Complete,
            false,
        )),
        Level::Partial => {
            if instances.len() < 2 {
                return Ok(phrase_description(instances, &[0], Level::Partial, true));
            }
            let subset_size = rng.random_range(1..instances.len());
            let mut idx: Vec<usize> = (0..instances.len()).collect();
            // partial Fisher-Yates, then restore scene order among chosen
            for i in 0..subset_size {
                let j = rng.random_range(i..idx.len());
                idx.swap(i, j);
            }
            let mut chosen = idx[..subset_size].to_vec();
            chosen.sort_unstable();
            Ok(phrase_description(instances, &chosen, Level::Partial, false))
        }
    }
}

fn phrase_description(
    instances: &[InstanceRecord],
    chosen: &[usize],
    level: Level,
    fell_back: bool,
) -> Description {
    let phrases: Vec<String> = chosen
        .iter()
        .map(|&i| format!("a {} {}", instances[i].color_name, instances[i].noun))
        .collect();
    let text = phrases.join(", ");
    // Each phrase is [a, color, noun] plus a comma token between phrases,
    // so the k-th color token sits at 4k + 1.
    let bindings: Vec<(usize, usize)> = chosen.iter().enumerate().map(|(k, &i)| (4 * k + 1, i)).collect();
    debug_assert!({
        let words = split_words(&text);
        bindings.iter().all(|&(pos, i)| words[pos] == instances[i].color_name)
    });
    Description { level, text, bindings, fell_back_to_complete: fell_back }
}

// ---------------------------------------------------------------------------
// Dataset directory layout and manifest
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct ManifestInstance {
    shape: Shape,
    color: String,
    mask_file: String,
}

#[derive(Serialize, Deserialize)]
struct ManifestScene {
    id: String,
    seed: u64,
    instances: Vec<ManifestInstance>,
    descriptions: BTreeMap<Level, Description>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    schema_version: u32,
    image_size: usize,
    palette: Vec<String>,
    scenes: Vec<ManifestScene>,
}

pub fn scene_id(index: usize) -> String {
    format!("scene_{index:05}")
}

/// Write images, masks, and a JSON manifest under `dir`.
pub fn write_manifest(samples: &[SceneSample], dir: &Path) -> Result<()> {
    let images = dir.join("images");
    let masks = dir.join("masks");
    std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    std::fs::create_dir_all(&masks).map_err(|e| Error::io(&masks, e))?;
    let mut scenes = Vec::with_capacity(samples.len());
    for (i, sample) in samples.iter().enumerate() {
        let id = scene_id(i);
        crate::imaging::save_image(&sample.image, &images.join(format!("{id}.png")))?;
        let mut instances = Vec::with_capacity(sample.instances.len());
        for (k, inst) in sample.instances.iter().enumerate() {
            let mask_file = format!("{id}_{k}.png");
            crate::imaging::save_image(&inst.mask.to_rgb(), &masks.join(&mask_file))?;
            instances.push(ManifestInstance {
                shape: inst.shape,
                color: inst.color_name.clone(),
                mask_file,
            });
        }
        scenes.push(ManifestScene {
            id,
            seed: sample.seed,
            instances,
            descriptions: sample.descriptions.clone(),
        });
    }
    let manifest = Manifest {
        schema_version: MANIFEST_SCHEMA_VERSION,
        image_size: samples.first().map(|s| s.image.height()).unwrap_or(0),
        palette: Palette::standard().names().iter().map(|s| s.to_string()).collect(),
        scenes,
    };
    let path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Dataset(format!("manifest serialization: {e}")))?;
    std::fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

/// A dataset read back from disk. Gray images are recomputed from the
/// (quantized) PNGs, so the `gray == to_grayscale(image)` invariant holds
/// for what consumers actually see.
#[derive(Debug)]
pub struct Dataset {
    pub samples: Vec<SceneSample>,
    pub ids: Vec<String>,
    pub image_size: usize,
}

pub fn read_manifest(dir: &Path) -> Result<Dataset> {
    let path = dir.join("manifest.json");
    let raw = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest =
        serde_json::from_str(&raw).map_err(|e| Error::Dataset(format!("manifest parse: {e}")))?;
    if manifest.schema_version != MANIFEST_SCHEMA_VERSION {
        return Err(Error::Dataset(format!(
            "manifest schema version {} unsupported (expected {MANIFEST_SCHEMA_VERSION})",
            manifest.schema_version
        )));
    }
    let mut samples = Vec::with_capacity(manifest.scenes.len());
    let mut ids = Vec::with_capacity(manifest.scenes.len());
    for scene in &manifest.scenes {
        let img_path = dir.join("images").join(format!("{}.png", scene.id));
        let image = crate::imaging::load_image(&img_path)
            .map_err(|e| Error::Dataset(format!("scene {}: {e}", scene.id)))?;
        let gray = to_grayscale(&image);
        let mut instances = Vec::with_capacity(scene.instances.len());
        for mi in &scene.instances {
            let mask_path = dir.join("masks").join(&mi.mask_file);
            let mask_img = crate::imaging::load_image(&mask_path)
                .map_err(|e| Error::Dataset(format!("scene {}: missing mask: {e}", scene.id)))?;
            instances.push(InstanceRecord {
                shape: mi.shape,
                color_name: mi.color.clone(),
                noun: mi.shape.noun().to_string(),
                mask: Mask::from_rgb(&mask_img),
            });
        }
        samples.push(SceneSample {
            image,
            gray,
            instances,
            descriptions: scene.descriptions.clone(),
            seed: scene.seed,
        });
        ids.push(scene.id.clone());
    }
    Ok(Dataset { samples, ids, image_size: manifest.image_size })
}

/// Generate `count` scenes in parallel from consecutive seeds.
pub fn generate_dataset(base_seed: u64, count: usize, config: &GenConfig) -> Result<Vec<SceneSample>> {
    (0..count)
        .into_par_iter()
        .map(|i| generate_scene(base_seed + i as u64, config))
        .collect()
}
