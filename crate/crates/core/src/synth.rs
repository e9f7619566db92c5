//! Procedural road-scene-like source and target domains with exact labels.
//!
//! A scene is three horizontal bands (sky, background, road) with objects
//! painted on top: boxes with a window grid ("building"), ellipses on the
//! road ("car") and rare small squares ("sign"). Object sizes follow a
//! log-uniform scale distribution. The domain gap is a per-channel
//! gain/offset, extra noise and a different scale range; geometry and
//! photometry draw from separate streams so that a photometric change never
//! alters the labels.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::lst;
use crate::par;
use crate::selection::ImageId;
use crate::tensor::{Image, LabelMap};

pub const BACKGROUND: u8 = 0;
pub const ROAD: u8 = 1;
pub const SKY: u8 = 2;
pub const BUILDING: u8 = 3;
pub const CAR: u8 = 4;
pub const SIGN: u8 = 5;

pub const CLASS_NAMES: [&str; 6] = ["background", "road", "sky", "building", "car", "sign"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Photometric {
    pub gain: [f32; 3],
    pub offset: [f32; 3],
    pub noise_sigma: f32,
}

impl Photometric {
    pub fn identity(noise_sigma: f32) -> Self {
        Photometric {
            gain: [1.0; 3],
            offset: [0.0; 3],
            noise_sigma,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub classes: usize,
    pub height: usize,
    pub width: usize,
    /// Band classes (background, road, sky): relative band height.
    /// Object classes (building, car, sign): expected instances per image.
    pub frequency: [f64; 6],
    /// Object scale range as a fraction of image height, sampled log-uniformly.
    pub scale_min: f64,
    pub scale_max: f64,
    pub photometric: Photometric,
    pub seed: u64,
}

impl DomainSpec {
    pub fn source(height: usize, width: usize, seed: u64) -> Self {
        DomainSpec {
            classes: 6,
            height,
            width,
            frequency: [1.0, 1.1, 0.9, 1.6, 1.4, 0.3],
            scale_min: 0.15,
            scale_max: 0.5,
            photometric: Photometric::identity(0.03),
            seed,
        }
    }

    /// Shifted colours, more noise and larger objects than [`DomainSpec::source`].
    pub fn target(height: usize, width: usize, seed: u64) -> Self {
        DomainSpec {
            scale_min: 0.25,
            scale_max: 0.7,
            photometric: Photometric {
                gain: [0.6, 0.85, 1.4],
                offset: [0.15, 0.05, -0.1],
                noise_sigma: 0.08,
            },
            ..DomainSpec::source(height, width, seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes != CLASS_NAMES.len() {
            return Err(Error::Config(format!(
                "the scene generator paints {} classes, spec asks for {}",
                CLASS_NAMES.len(),
                self.classes
            )));
        }
        if self.height < 8 || self.width < 8 {
            return Err(Error::Config("scenes need at least 8×8 pixels".into()));
        }
        if self.frequency.iter().any(|&f| f.is_nan() || f <= 0.0) {
            return Err(Error::Config("frequency weights must be positive".into()));
        }
        if self.photometric.gain.iter().any(|&g| g.is_nan() || g <= 0.0) {
            return Err(Error::Config("photometric gains must be positive".into()));
        }
        if !(self.scale_min > 0.0 && self.scale_min <= self.scale_max && self.scale_max <= 1.0) {
            return Err(Error::Config(format!(
                "scale range [{}, {}] must lie in (0, 1]",
                self.scale_min, self.scale_max
            )));
        }
        if self.photometric.noise_sigma < 0.0 {
            return Err(Error::Config("noise sigma must be >= 0".into()));
        }
        Ok(())
    }

    pub fn hash_hex(&self) -> String {
        let json = serde_json::to_vec(self).expect("serialisable");
        Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Source and target specs generated together.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainPair {
    pub source: DomainSpec,
    pub target: DomainSpec,
}

impl DomainPair {
    pub fn default_pair(height: usize, width: usize, seed: u64) -> Self {
        DomainPair {
            source: DomainSpec::source(height, width, seed),
            target: DomainSpec::target(height, width, seed.wrapping_add(0x7a5e)),
        }
    }
}

impl Default for DomainPair {
    fn default() -> Self {
        DomainPair::default_pair(32, 64, 0)
    }
}

const BASE_COLOR: [[f32; 3]; 6] = [
    [0.30, 0.50, 0.22],
    [0.42, 0.42, 0.44],
    [0.55, 0.72, 0.92],
    [0.62, 0.46, 0.34],
    [0.78, 0.18, 0.16],
    [0.92, 0.84, 0.12],
];

struct Canvas {
    h: usize,
    w: usize,
    rgb: Vec<[f32; 3]>,
    labels: Vec<u8>,
}

impl Canvas {
    fn paint(&mut self, y: usize, x: usize, class: u8, color: [f32; 3]) {
        let i = y * self.w + x;
        self.rgb[i] = color;
        self.labels[i] = class;
    }
}

fn jitter(rng: &mut impl Rng, base: [f32; 3], amount: f32) -> [f32; 3] {
    let mut c = base;
    for v in &mut c {
        *v = (*v + rng.random_range(-amount..=amount)).clamp(0.0, 1.0);
    }
    c
}

fn count(rng: &mut impl Rng, rate: f64) -> usize {
    let whole = rate.floor();
    whole as usize + usize::from(rng.random_bool((rate - whole).clamp(0.0, 1.0)))
}

fn log_uniform(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    if hi <= lo {
        return lo;
    }
    (rng.random_range(lo.ln()..hi.ln())).exp()
}

/// Paint geometry and base colours. Uses only `rng`.
fn layout(spec: &DomainSpec, rng: &mut impl Rng) -> Canvas {
    let (h, w) = (spec.height, spec.width);
    let f = &spec.frequency;
    let bands = f[SKY as usize] + f[BACKGROUND as usize] + f[ROAD as usize];
    let sky_frac = f[SKY as usize] / bands * rng.random_range(0.8..1.2);
    let road_frac = f[ROAD as usize] / bands * rng.random_range(0.8..1.2);
    let sky_end = ((sky_frac * h as f64).round() as usize).clamp(1, h - 2);
    let road_start = (h - ((road_frac * h as f64).round() as usize).clamp(1, h - sky_end - 1)).max(sky_end + 1);

    let mut cv = Canvas {
        h,
        w,
        rgb: vec![[0.0; 3]; h * w],
        labels: vec![0; h * w],
    };
    let sky = jitter(rng, BASE_COLOR[SKY as usize], 0.05);
    let ground = jitter(rng, BASE_COLOR[BACKGROUND as usize], 0.05);
    let road = jitter(rng, BASE_COLOR[ROAD as usize], 0.04);
    let lane_period = rng.random_range(6..12);
    for y in 0..h {
        for x in 0..w {
            if y < sky_end {
                let t = y as f32 / sky_end as f32;
                let c = [sky[0] + 0.08 * t, sky[1] + 0.05 * t, sky[2] - 0.05 * t];
                cv.paint(y, x, SKY, c.map(|v| v.clamp(0.0, 1.0)));
            } else if y < road_start {
                // mottled vegetation
                let m = if (x / 3 + y / 2) % 3 == 0 { 0.06 } else { 0.0 };
                cv.paint(y, x, BACKGROUND, [ground[0], ground[1] + m, ground[2]]);
            } else {
                let centre = road_start + (h - road_start) / 2;
                let lane = y == centre && (x / (lane_period / 2)) % 2 == 0;
                let c = if lane { [0.85, 0.85, 0.8] } else { road };
                cv.paint(y, x, ROAD, c);
            }
        }
    }

    let scale = |rng: &mut _| log_uniform(rng, spec.scale_min, spec.scale_max) * h as f64;

    for _ in 0..count(rng, f[BUILDING as usize]) {
        let bh = (scale(rng).round() as usize).clamp(3, road_start);
        let bw = ((scale(rng) * rng.random_range(0.6..1.6)).round() as usize).clamp(3, w);
        let bottom = road_start;
        let top = bottom.saturating_sub(bh);
        let left = rng.random_range(0..=w - bw);
        let wall = jitter(rng, BASE_COLOR[BUILDING as usize], 0.06);
        let window = [0.25, 0.27, 0.33];
        let period = (bh / 4).max(2);
        for y in top..bottom {
            for x in left..left + bw {
                let (ly, lx) = (y - top, x - left);
                let is_window = ly % period >= period / 2
                    && lx % period >= period / 2
                    && ly + 1 < bh
                    && lx + 1 < bw
                    && period >= 3;
                cv.paint(y, x, BUILDING, if is_window { window } else { wall });
            }
        }
    }

    for _ in 0..count(rng, f[SIGN as usize]) {
        let side = ((scale(rng) * 0.25).round() as usize).clamp(2, 6);
        if road_start <= side + 1 {
            continue;
        }
        let top = rng.random_range(0..road_start - side);
        let left = rng.random_range(0..=w - side);
        let c = jitter(rng, BASE_COLOR[SIGN as usize], 0.05);
        for y in top..top + side {
            for x in left..left + side {
                cv.paint(y, x, SIGN, c);
            }
        }
    }

    for _ in 0..count(rng, f[CAR as usize]) {
        let ch = (scale(rng) * 0.5).max(2.0);
        let cw = ch * rng.random_range(1.6..2.4);
        let cy = rng.random_range(road_start as f64..h as f64);
        let cx = rng.random_range(0.0..w as f64);
        let body = jitter(rng, BASE_COLOR[CAR as usize], 0.08);
        let (ry, rx) = (ch / 2.0, cw / 2.0);
        let y0 = (cy - ry).floor().max(0.0) as usize;
        let y1 = ((cy + ry).ceil() as usize).min(h);
        let x0 = (cx - rx).floor().max(0.0) as usize;
        let x1 = ((cx + rx).ceil() as usize).min(w);
        for y in y0..y1 {
            for x in x0..x1 {
                let dy = (y as f64 + 0.5 - cy) / ry;
                let dx = (x as f64 + 0.5 - cx) / rx;
                if dy * dy + dx * dx <= 1.0 {
                    // darker lower rim
                    let c = if dy > 0.5 { body.map(|v| v * 0.6) } else { body };
                    cv.paint(y, x, CAR, c);
                }
            }
        }
    }
    cv
}

/// One scene from its own pair of generators.
pub fn generate_scene(
    spec: &DomainSpec,
    geometry: &mut impl Rng,
    photometry: &mut impl Rng,
) -> (Image, LabelMap) {
    let cv = layout(spec, geometry);
    let (h, w) = (cv.h, cv.w);
    let hw = h * w;
    let ph = &spec.photometric;
    let noise = Normal::new(0.0f32, ph.noise_sigma.max(0.0)).expect("finite sigma");
    let mut data = vec![0.0f32; 3 * hw];
    for (i, px) in cv.rgb.iter().enumerate() {
        for c in 0..3 {
            let n = if ph.noise_sigma > 0.0 {
                noise.sample(photometry)
            } else {
                0.0
            };
            data[c * hw + i] = (ph.gain[c] * px[c] + ph.offset[c] + n).clamp(0.0, 1.0);
        }
    }
    (
        Image::new(h, w, data).expect("values clamped"),
        LabelMap::new(h, w, cv.labels).expect("dims"),
    )
}

/// Scene `index` of a domain; independent of any other index.
pub fn scene_at(spec: &DomainSpec, index: u64) -> (Image, LabelMap) {
    let mut g = crate::seed::rng(spec.seed, &[index, 0]);
    let mut p = crate::seed::rng(spec.seed, &[index, 1]);
    generate_scene(spec, &mut g, &mut p)
}

pub fn generate_scenes(spec: &DomainSpec, n: usize) -> Result<Vec<(Image, LabelMap)>> {
    spec.validate()?;
    Ok(par::map_range(n, |i| scene_at(spec, i as u64)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestItem {
    pub id: ImageId,
    pub image: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub domain: Domain,
    pub spec_hash: String,
    pub items: Vec<ManifestItem>,
    /// Directory the item paths are relative to; set on load.
    #[serde(skip)]
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: DatasetManifest = serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.to_owned(),
            source,
        })?;
        m.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let mut seen = std::collections::HashSet::new();
        for it in &m.items {
            if !seen.insert(it.id) {
                return Err(Error::Format {
                    path: path.to_owned(),
                    message: format!("duplicate image id {}", it.id),
                });
            }
            if m.domain == Domain::Source && it.labels.is_none() {
                return Err(Error::Format {
                    path: path.to_owned(),
                    message: format!("source image {} has no labels", it.id),
                });
            }
        }
        Ok(m)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).expect("serialisable");
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load_image(&self, item: &ManifestItem) -> Result<Image> {
        Image::from_tensor(&lst::read_tensor(self.root.join(&item.image))?)
    }

    /// Ground truth for an item. Target labels are reserved for evaluation,
    /// so callers outside evaluation go through [`DatasetManifest::load_labels`].
    pub fn load_eval_labels(&self, item: &ManifestItem) -> Result<LabelMap> {
        let rel = item.labels.as_ref().ok_or_else(|| Error::Format {
            path: self.root.clone(),
            message: format!("image {} has no labels", item.id),
        })?;
        LabelMap::from_tensor(&lst::read_tensor(self.root.join(rel))?)
    }

    /// Labels for training; refuses target-domain manifests.
    pub fn load_labels(&self, item: &ManifestItem) -> Result<LabelMap> {
        if self.domain == Domain::Target {
            return Err(Error::LabelLeak(format!("target image {}", item.id)));
        }
        self.load_eval_labels(item)
    }

    pub fn images(&self) -> Result<Vec<(ImageId, Image)>> {
        let loaded = par::map(&self.items, |it| self.load_image(it).map(|x| (it.id, x)));
        loaded.into_iter().collect()
    }

    pub fn labelled(&self) -> Result<Vec<(ImageId, Image, LabelMap)>> {
        let loaded = par::map(&self.items, |it| {
            Ok((it.id, self.load_image(it)?, self.load_labels(it)?))
        });
        loaded.into_iter().collect()
    }

    pub fn eval_pairs(&self) -> Result<Vec<(ImageId, Image, LabelMap)>> {
        let loaded = par::map(&self.items, |it| {
            Ok((it.id, self.load_image(it)?, self.load_eval_labels(it)?))
        });
        loaded.into_iter().collect()
    }
}

/// Write `n` scenes and `manifest.json` into `out_dir`.
pub fn generate_dataset(
    spec: &DomainSpec,
    domain: Domain,
    n: usize,
    out_dir: impl AsRef<Path>,
) -> Result<DatasetManifest> {
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let scenes = generate_scenes(spec, n)?;
    let mut items = Vec::with_capacity(n);
    for (i, (img, lab)) in scenes.iter().enumerate() {
        let image = format!("img_{i:05}.lst");
        let labels = format!("lab_{i:05}.lst");
        lst::write_tensor(out_dir.join(&image), &img.to_tensor())?;
        lst::write_tensor(out_dir.join(&labels), &lab.to_tensor())?;
        items.push(ManifestItem {
            id: i as ImageId,
            image,
            labels: Some(labels),
        });
    }
    let manifest = DatasetManifest {
        domain,
        spec_hash: spec.hash_hex(),
        items,
        root: out_dir.to_path_buf(),
    };
    manifest.write(out_dir.join("manifest.json"))?;
    Ok(manifest)
}

/// Per-class pixel share and per-class image presence over a set of label maps.
pub fn class_statistics(labels: &[&LabelMap], classes: usize) -> (Vec<f64>, Vec<f64>) {
    let mut pixels = vec![0u64; classes];
    let mut present = vec![0u64; classes];
    let mut total = 0u64;
    for l in labels {
        let mut seen = vec![false; classes];
        for &c in l.data() {
            if (c as usize) < classes {
                pixels[c as usize] += 1;
                seen[c as usize] = true;
                total += 1;
            }
        }
        for (p, s) in present.iter_mut().zip(seen) {
            *p += u64::from(s);
        }
    }
    let n = labels.len().max(1) as f64;
    (
        pixels.iter().map(|&p| p as f64 / total.max(1) as f64).collect(),
        present.iter().map(|&p| p as f64 / n).collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::IGNORE;

    fn small() -> DomainPair {
        DomainPair::default_pair(32, 64, 3)
    }

    #[test]
    fn bands_only_without_objects() {
        let mut spec = small().source;
        spec.frequency[3] = 1e-9;
        spec.frequency[4] = 1e-9;
        spec.frequency[5] = 1e-9;
        spec.photometric.noise_sigma = 0.0;
        for i in 0..10 {
            let (_, l) = scene_at(&spec, i);
            assert!(l.data().iter().all(|&c| c <= SKY));
            for c in [BACKGROUND, ROAD, SKY] {
                assert!(l.data().contains(&c));
            }
        }
    }

    #[test]
    fn deterministic_scenes() {
        let spec = small().target;
        assert_eq!(scene_at(&spec, 7), scene_at(&spec, 7));
        assert_ne!(scene_at(&spec, 7).1, scene_at(&spec, 8).1);
    }

    #[test]
    fn photometric_shift_preserves_labels() {
        let pair = small();
        let mut shifted = pair.source.clone();
        shifted.photometric = pair.target.photometric.clone();
        let mut sums = [[0.0f64; 3]; 2];
        for i in 0..100 {
            let (a, la) = scene_at(&pair.source, i);
            let (b, lb) = scene_at(&shifted, i);
            assert_eq!(la, lb);
            for c in 0..3 {
                sums[0][c] += a.channel_means()[c];
                sums[1][c] += b.channel_means()[c];
            }
        }
        // red is darkened and lifted, blue amplified
        for c in [0, 2] {
            assert!((sums[0][c] - sums[1][c]).abs() / 100.0 > 0.01, "channel {c}");
        }
        // shift disabled ⇒ identical output
        let same = DomainSpec {
            photometric: pair.source.photometric.clone(),
            ..shifted
        };
        assert_eq!(scene_at(&same, 3), scene_at(&pair.source, 3));
    }

    #[test]
    fn never_ignore_and_every_class_appears() {
        let spec = small().source;
        let scenes = generate_scenes(&spec, 200).unwrap();
        let labels: Vec<&LabelMap> = scenes.iter().map(|(_, l)| l).collect();
        assert!(labels.iter().all(|l| !l.data().contains(&IGNORE)));
        let (share, presence) = class_statistics(&labels, 6);
        assert!(share.iter().all(|&s| s > 0.0), "{share:?}");
        assert!(presence.iter().all(|&p| p > 0.0));
    }

    #[test]
    fn sign_is_rare() {
        let spec = DomainPair::default().source;
        let scenes = generate_scenes(&spec, 500).unwrap();
        let labels: Vec<&LabelMap> = scenes.iter().map(|(_, l)| l).collect();
        let (share, presence) = class_statistics(&labels, 6);
        assert!(share[SIGN as usize] < 0.02, "{share:?}");
        assert!(presence[SIGN as usize] < 0.40, "{presence:?}");
    }

    #[test]
    fn dataset_files_are_reproducible() {
        let spec = small().source;
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ma = generate_dataset(&spec, Domain::Source, 3, a.path()).unwrap();
        generate_dataset(&spec, Domain::Source, 3, b.path()).unwrap();
        for name in ["manifest.json", "img_00002.lst", "lab_00000.lst"] {
            assert_eq!(
                std::fs::read(a.path().join(name)).unwrap(),
                std::fs::read(b.path().join(name)).unwrap()
            );
        }
        let back = DatasetManifest::read(a.path().join("manifest.json")).unwrap();
        assert_eq!(back.items, ma.items);
        assert_eq!(back.labelled().unwrap().len(), 3);
    }

    #[test]
    fn empty_dataset_is_valid_json() {
        let dir = tempfile::tempdir().unwrap();
        let m = generate_dataset(&small().source, Domain::Source, 0, dir.path()).unwrap();
        assert!(m.items.is_empty());
        let back = DatasetManifest::read(dir.path().join("manifest.json")).unwrap();
        assert!(back.items.is_empty());
    }

    #[test]
    fn target_labels_guarded() {
        let dir = tempfile::tempdir().unwrap();
        let m = generate_dataset(&small().target, Domain::Target, 1, dir.path()).unwrap();
        assert!(matches!(m.load_labels(&m.items[0]), Err(Error::LabelLeak(_))));
        assert!(m.load_eval_labels(&m.items[0]).is_ok());
    }
}
