//! Scale-invariant training examples.
//!
//! A patch is cut from a confident target image and upscaled to the model's
//! input size. Its pseudo-labels are not predicted on the patch itself but
//! transferred from the full-image prediction (resampled to the patch), and
//! the reliability filter is inherited the same way.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::entropy::FilterMap;
use crate::error::{Error, Result};
use crate::lst;
use crate::model::{predict, ModelParams};
use crate::par;
use crate::selection::ImageId;
use crate::tensor::{argmax_labels, Image, LabelMap, ProbVolume, Rect};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatchConfig {
    /// Patches per selected image.
    pub k: usize,
    pub patch_height: usize,
    pub patch_width: usize,
    /// Model input size the patches are resized to.
    pub out_height: usize,
    pub out_width: usize,
    pub seed: u64,
}

impl PatchConfig {
    /// Half-size patches upscaled 2× back to the image size.
    pub fn for_image(height: usize, width: usize, seed: u64) -> Self {
        PatchConfig {
            k: 4,
            patch_height: (height / 2).max(2),
            patch_width: (width / 2).max(2),
            out_height: height,
            out_width: width,
            seed,
        }
    }

    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        if self.patch_height > height || self.patch_width > width {
            return Err(Error::Config(format!(
                "{}×{} patch does not fit a {height}×{width} image",
                self.patch_height, self.patch_width
            )));
        }
        if self.patch_height < 2 || self.patch_width < 2 {
            return Err(Error::Config("patches must be at least 2×2".into()));
        }
        if self.out_height == 0 || self.out_width == 0 {
            return Err(Error::Config("output size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScaleExample {
    pub image: Image,
    pub labels: LabelMap,
    pub filter: FilterMap,
    pub source_id: ImageId,
    /// Patch index within its source image.
    pub index: usize,
    pub rect: Rect,
}

/// `k` uniformly placed rects of the configured size.
pub fn sample_rects(height: usize, width: usize, cfg: &PatchConfig, rng: &mut impl Rng) -> Result<Vec<Rect>> {
    cfg.validate(height, width)?;
    Ok((0..cfg.k)
        .map(|_| {
            let row = rng.random_range(0..=height - cfg.patch_height);
            let col = rng.random_range(0..=width - cfg.patch_width);
            Rect::new(row, col, cfg.patch_height, cfg.patch_width)
        })
        .collect())
}

/// Generator for the patches of one image in one round.
pub fn image_rng(cfg: &PatchConfig, round: usize, id: ImageId) -> rand_chacha::ChaCha8Rng {
    crate::seed::rng(cfg.seed, &[0x5ca1e, round as u64, id as u64])
}

pub fn make_example(
    x: &Image,
    p_full: &ProbVolume,
    f_full: &FilterMap,
    rect: Rect,
    cfg: &PatchConfig,
) -> Result<ScaleExample> {
    let dims = (x.height(), x.width());
    if (p_full.height(), p_full.width()) != dims || (f_full.height(), f_full.width()) != dims {
        return Err(Error::DimMismatch {
            what: "prediction/filter vs image",
            expected: vec![dims.0, dims.1],
            actual: vec![p_full.height(), p_full.width(), f_full.height(), f_full.width()],
        });
    }
    let (oh, ow) = (cfg.out_height, cfg.out_width);
    let image = x.crop_resize(rect, oh, ow)?;
    let labels = argmax_labels(&p_full.crop_resize(rect, oh, ow)?);
    let filter = f_full.crop_resize(rect, oh, ow)?;
    Ok(ScaleExample {
        image,
        labels,
        filter,
        source_id: 0,
        index: 0,
        rect,
    })
}

/// Inputs for example generation from one selected image.
pub struct Source<'a> {
    pub id: ImageId,
    pub image: &'a Image,
    pub probs: &'a ProbVolume,
    pub filter: &'a FilterMap,
}

/// `k` examples per source, in source order. Each image draws from its own
/// generator, so the result does not depend on scheduling.
pub fn generate_examples(sources: &[Source<'_>], cfg: &PatchConfig, round: usize) -> Result<Vec<ScaleExample>> {
    let per_image = par::map(sources, |s| -> Result<Vec<ScaleExample>> {
        let mut rng = image_rng(cfg, round, s.id);
        let rects = sample_rects(s.image.height(), s.image.width(), cfg, &mut rng)?;
        rects
            .into_iter()
            .enumerate()
            .map(|(i, r)| {
                let mut ex = make_example(s.image, s.probs, s.filter, r, cfg)?;
                ex.source_id = s.id;
                ex.index = i;
                Ok(ex)
            })
            .collect()
    });
    let mut out = Vec::new();
    for v in per_image {
        out.extend(v?);
    }
    Ok(out)
}

/// Fraction of patch pixels where the patch prediction agrees with the label
/// transferred from the full-image prediction, averaged over `rects`.
pub fn scale_consistency_score(model: &ModelParams, x: &Image, rects: &[Rect]) -> Result<f64> {
    if rects.is_empty() {
        return Ok(1.0);
    }
    let (oh, ow) = (model.config.height, model.config.width);
    let full = predict(model, x)?;
    let mut total = 0.0;
    for &r in rects {
        let transferred = argmax_labels(&full.crop_resize(r, oh, ow)?);
        let patch = argmax_labels(&predict(model, &x.crop_resize(r, oh, ow)?)?);
        let agree = transferred
            .data()
            .iter()
            .zip(patch.data())
            .filter(|(a, b)| a == b)
            .count();
        total += agree as f64 / (oh * ow) as f64;
    }
    Ok(total / rects.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchiveEntry {
    pub image_id: ImageId,
    pub index: usize,
    pub rect: Rect,
    pub image: String,
    pub labels: String,
    pub filter: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchiveIndex {
    pub round: usize,
    pub seed: u64,
    pub patch: PatchConfig,
    pub examples: Vec<ArchiveEntry>,
}

fn stem(id: ImageId, i: usize) -> String {
    format!("example_{id}_{i}")
}

/// Write every example as three `.lst` files plus `index.json`.
pub fn write_archive(dir: impl AsRef<Path>, examples: &[ScaleExample], cfg: &PatchConfig, round: usize) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(examples.len());
    for ex in examples {
        let s = stem(ex.source_id, ex.index);
        let names = [
            format!("{s}.image.lst"),
            format!("{s}.labels.lst"),
            format!("{s}.filter.lst"),
        ];
        lst::write_tensor(dir.join(&names[0]), &ex.image.to_tensor())?;
        lst::write_tensor(dir.join(&names[1]), &ex.labels.to_tensor())?;
        lst::write_tensor(dir.join(&names[2]), &ex.filter.to_tensor())?;
        let [image, labels, filter] = names;
        entries.push(ArchiveEntry {
            image_id: ex.source_id,
            index: ex.index,
            rect: ex.rect,
            image,
            labels,
            filter,
        });
    }
    let index = ArchiveIndex {
        round,
        seed: cfg.seed,
        patch: *cfg,
        examples: entries,
    };
    let path = dir.join("index.json");
    let text = serde_json::to_string_pretty(&index).expect("serialisable");
    std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

pub fn read_archive(dir: impl AsRef<Path>) -> Result<(ArchiveIndex, Vec<ScaleExample>)> {
    let dir = dir.as_ref();
    let path = dir.join("index.json");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let index: ArchiveIndex = serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.clone(),
        source,
    })?;
    let mut out = Vec::with_capacity(index.examples.len());
    for e in &index.examples {
        out.push(ScaleExample {
            image: Image::from_tensor(&lst::read_tensor(dir.join(&e.image))?)?,
            labels: LabelMap::from_tensor(&lst::read_tensor(dir.join(&e.labels))?)?,
            filter: FilterMap::from_tensor(&lst::read_tensor(dir.join(&e.filter))?)?,
            source_id: e.image_id,
            index: e.index,
            rect: e.rect,
        });
    }
    Ok((index, out))
}
