//! Small fully convolutional segmentation network with a hand-written
//! backward pass.
//!
//! `conv3x3(3→hidden) → ReLU → conv3x3(hidden→hidden) → ReLU → conv1x1(hidden→C)`
//!
//! Parameters are generic over [`Real`] so the same code runs in `f64` for
//! gradient checks; training uses `f32`.

mod adam;
pub mod checkpoint;
pub mod conv;

pub use adam::{adam_step, AdamConfig, OptimizerState};
pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{softmax, Image, Logits, ProbVolume, Real, Volume};

/// Names of the parameter blocks, in storage order.
pub const BLOCK_NAMES: [&str; 6] = [
    "conv1.weight",
    "conv1.bias",
    "conv2.weight",
    "conv2.bias",
    "head.weight",
    "head.bias",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub classes: usize,
    pub hidden: usize,
    /// Input height the network is trained at.
    pub height: usize,
    pub width: usize,
}

impl ModelConfig {
    pub fn new(classes: usize, height: usize, width: usize) -> Self {
        ModelConfig {
            classes,
            hidden: 16,
            height,
            width,
        }
    }

    pub fn block_dims(&self) -> [Vec<usize>; 6] {
        let (c, h) = (self.classes, self.hidden);
        [
            vec![h, 3, 3, 3],
            vec![h],
            vec![h, h, 3, 3],
            vec![h],
            vec![c, h],
            vec![c],
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Params<T> {
    pub config: ModelConfig,
    pub conv1_w: Vec<T>,
    pub conv1_b: Vec<T>,
    pub conv2_w: Vec<T>,
    pub conv2_b: Vec<T>,
    pub head_w: Vec<T>,
    pub head_b: Vec<T>,
    /// Bumped on every optimiser update; lets `backward` detect stale caches.
    pub generation: u64,
}

pub type ModelParams = Params<f32>;

impl<T: Real> Params<T> {
    pub fn zeros(config: ModelConfig) -> Self {
        let d = config.block_dims();
        let z = |i: usize| vec![T::zero(); d[i].iter().product()];
        Params {
            config,
            conv1_w: z(0),
            conv1_b: z(1),
            conv2_w: z(2),
            conv2_b: z(3),
            head_w: z(4),
            head_b: z(5),
            generation: 0,
        }
    }

    /// He-uniform weights (bound `sqrt(6 / fan_in)`), zero biases.
    pub fn init(config: ModelConfig, seed: u64) -> Self {
        let mut rng = crate::seed::rng(seed, &[0x1417]);
        let mut p = Params::zeros(config);
        let fill = |v: &mut Vec<T>, fan_in: usize, rng: &mut rand_chacha::ChaCha8Rng| {
            let bound = (6.0 / fan_in as f64).sqrt();
            for x in v.iter_mut() {
                *x = T::from_f64(rng.random_range(-bound..bound));
            }
        };
        fill(&mut p.conv1_w, 27, &mut rng);
        fill(&mut p.conv2_w, 9 * config.hidden, &mut rng);
        fill(&mut p.head_w, config.hidden, &mut rng);
        p
    }

    pub fn blocks(&self) -> [&[T]; 6] {
        [
            &self.conv1_w,
            &self.conv1_b,
            &self.conv2_w,
            &self.conv2_b,
            &self.head_w,
            &self.head_b,
        ]
    }

    pub fn blocks_mut(&mut self) -> [&mut Vec<T>; 6] {
        [
            &mut self.conv1_w,
            &mut self.conv1_b,
            &mut self.conv2_w,
            &mut self.conv2_b,
            &mut self.head_w,
            &mut self.head_b,
        ]
    }

    pub fn num_params(&self) -> usize {
        self.blocks().iter().map(|b| b.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> Params<U> {
        let c = |v: &[T]| v.iter().map(|x| U::from_f64(x.as_f64())).collect();
        Params {
            config: self.config,
            conv1_w: c(&self.conv1_w),
            conv1_b: c(&self.conv1_b),
            conv2_w: c(&self.conv2_w),
            conv2_b: c(&self.conv2_b),
            head_w: c(&self.head_w),
            head_b: c(&self.head_b),
            generation: self.generation,
        }
    }

    /// `self += other`, block by block.
    pub fn add_assign(&mut self, other: &Params<T>) {
        for (a, b) in self.blocks_mut().into_iter().zip(other.blocks()) {
            for (x, &y) in a.iter_mut().zip(b) {
                *x = *x + y;
            }
        }
    }

    pub fn scale(&mut self, k: T) {
        for b in self.blocks_mut() {
            b.iter_mut().for_each(|x| *x = *x * k);
        }
    }

    /// Flat view over all blocks, in [`BLOCK_NAMES`] order.
    pub fn flatten(&self) -> Vec<T> {
        self.blocks().concat()
    }
}

/// Activations kept from a forward pass.
#[derive(Debug, Clone)]
pub struct Cache<T> {
    generation: u64,
    config: ModelConfig,
    height: usize,
    width: usize,
    input: Vec<T>,
    a1: Vec<T>,
    a2: Vec<T>,
}

impl<T: Real> Cache<T> {
    /// On/off state of every hidden unit, first layer then second.
    /// Finite-difference checks use it to detect probes that cross a ReLU kink.
    pub fn active_units(&self) -> Vec<bool> {
        self.a1.iter().chain(&self.a2).map(|&v| v > T::zero()).collect()
    }
}

fn relu<T: Real>(v: &mut [T]) {
    v.iter_mut().for_each(|x| {
        if *x < T::zero() {
            *x = T::zero()
        }
    });
}

/// Forward pass on a planar `3×H×W` input of any precision.
pub fn forward_volume<T: Real>(w: &Params<T>, x: &Volume<T>) -> Result<(Logits<T>, Cache<T>)> {
    let cfg = w.config;
    if x.channels != 3 || (x.height, x.width) != (cfg.height, cfg.width) {
        return Err(Error::DimMismatch {
            what: "model input",
            expected: vec![3, cfg.height, cfg.width],
            actual: x.dims().to_vec(),
        });
    }
    let (h, wd) = (x.height, x.width);
    let mut a1 = conv::conv3x3_forward(&x.data, 3, h, wd, &w.conv1_w, &w.conv1_b, cfg.hidden);
    relu(&mut a1);
    let mut a2 = conv::conv3x3_forward(&a1, cfg.hidden, h, wd, &w.conv2_w, &w.conv2_b, cfg.hidden);
    relu(&mut a2);
    let logits = conv::conv1x1_forward(&a2, cfg.hidden, h * wd, &w.head_w, &w.head_b, cfg.classes);
    Ok((
        Volume {
            channels: cfg.classes,
            height: h,
            width: wd,
            data: logits,
        },
        Cache {
            generation: w.generation,
            config: cfg,
            height: h,
            width: wd,
            input: x.data.clone(),
            a1,
            a2,
        },
    ))
}

pub fn forward(w: &ModelParams, x: &Image) -> Result<(Logits<f32>, Cache<f32>)> {
    let v = Volume {
        channels: 3,
        height: x.height(),
        width: x.width(),
        data: x.data().to_vec(),
    };
    forward_volume(w, &v)
}

/// Softmax prediction without keeping the cache.
pub fn predict(w: &ModelParams, x: &Image) -> Result<ProbVolume<f32>> {
    let (logits, _) = forward(w, x)?;
    softmax(&logits)
}

/// Reverse-mode gradient of `⟨logits, grad_logits⟩` with respect to every parameter.
pub fn backward<T: Real>(w: &Params<T>, cache: &Cache<T>, grad_logits: &Volume<T>) -> Result<Params<T>> {
    if cache.generation != w.generation || cache.config != w.config {
        return Err(Error::StaleCache(format!(
            "cache from generation {} ({:?}), parameters at generation {} ({:?})",
            cache.generation, cache.config, w.generation, w.config
        )));
    }
    let cfg = w.config;
    let (h, wd) = (cache.height, cache.width);
    if grad_logits.dims() != [cfg.classes, h, wd] {
        return Err(Error::DimMismatch {
            what: "logit gradient",
            expected: vec![cfg.classes, h, wd],
            actual: grad_logits.dims().to_vec(),
        });
    }
    let hw = h * wd;
    let (head_w, head_b, mut d_a2) =
        conv::conv1x1_backward(&cache.a2, cfg.hidden, hw, &w.head_w, &grad_logits.data, cfg.classes);
    for (d, &a) in d_a2.iter_mut().zip(&cache.a2) {
        if a <= T::zero() {
            *d = T::zero();
        }
    }
    let (conv2_w, conv2_b, d_a1) =
        conv::conv3x3_backward(&cache.a1, cfg.hidden, h, wd, &w.conv2_w, &d_a2, cfg.hidden, true);
    let mut d_a1 = d_a1.expect("requested");
    for (d, &a) in d_a1.iter_mut().zip(&cache.a1) {
        if a <= T::zero() {
            *d = T::zero();
        }
    }
    let (conv1_w, conv1_b, _) =
        conv::conv3x3_backward(&cache.input, 3, h, wd, &w.conv1_w, &d_a1, cfg.hidden, false);
    Ok(Params {
        config: cfg,
        conv1_w,
        conv1_b,
        conv2_w,
        conv2_b,
        head_w,
        head_b,
        generation: w.generation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(h: usize, w: usize, seed: u64) -> Image {
        let mut rng = crate::seed::rng(seed, &[]);
        Image::new(h, w, (0..3 * h * w).map(|_| rng.random::<f32>()).collect()).unwrap()
    }

    #[test]
    fn zero_weights_give_uniform_prediction() {
        let cfg = ModelConfig::new(4, 5, 6);
        let p = predict(&Params::zeros(cfg), &image(5, 6, 1)).unwrap();
        assert!(p.data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn head_bias_passes_through_zero_hidden() {
        let cfg = ModelConfig::new(3, 4, 4);
        let mut w = Params::<f32>::zeros(cfg);
        w.head_b = vec![0.5, -1.0, 2.0];
        let (logits, _) = forward(&w, &image(4, 4, 2)).unwrap();
        for c in 0..3 {
            assert!(logits.plane(c).iter().all(|&v| v == w.head_b[c]));
        }
    }

    #[test]
    fn seeded_init_is_bitwise_deterministic() {
        let cfg = ModelConfig::new(6, 8, 8);
        let x = image(8, 8, 3);
        let a = forward(&Params::init(cfg, 11), &x).unwrap().0;
        let b = forward(&Params::init(cfg, 11), &x).unwrap().0;
        assert_eq!(
            a.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert_ne!(Params::<f32>::init(cfg, 11), Params::init(cfg, 12));
    }

    #[test]
    fn wrong_input_dims() {
        let w = Params::<f32>::zeros(ModelConfig::new(2, 8, 8));
        assert!(matches!(forward(&w, &image(8, 9, 0)), Err(Error::DimMismatch { .. })));
    }

    #[test]
    fn zero_and_linear_backward() {
        let cfg = ModelConfig::new(2, 6, 6);
        let w = Params::<f64>::init(cfg, 5);
        let x = image(6, 6, 4);
        let xv = Volume::from_vec(3, 6, 6, x.data().iter().map(|&v| v as f64).collect()).unwrap();
        let (_, cache) = forward_volume(&w, &xv).unwrap();
        let zero = backward(&w, &cache, &Volume::zeros(2, 6, 6)).unwrap();
        assert!(zero.flatten().iter().all(|&v| v == 0.0));

        let mut g = Volume::<f64>::zeros(2, 6, 6);
        for (i, v) in g.data.iter_mut().enumerate() {
            *v = (i as f64 * 0.3).sin();
        }
        let one = backward(&w, &cache, &g).unwrap();
        let mut g2 = g.clone();
        g2.data.iter_mut().for_each(|v| *v *= 2.0);
        let two = backward(&w, &cache, &g2).unwrap();
        for (a, b) in one.flatten().iter().zip(two.flatten()) {
            assert!((2.0 * a - b).abs() <= 1e-12 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn stale_cache_is_rejected() {
        let cfg = ModelConfig::new(2, 4, 4);
        let mut w = Params::<f32>::init(cfg, 1);
        let (_, cache) = forward(&w, &image(4, 4, 0)).unwrap();
        w.generation += 1;
        assert!(matches!(
            backward(&w, &cache, &Volume::zeros(2, 4, 4)),
            Err(Error::StaleCache(_))
        ));
    }

    #[test]
    fn interior_is_translation_equivariant() {
        let cfg = ModelConfig::new(3, 10, 12);
        let w = Params::<f32>::init(cfg, 9);
        let x = image(10, 12, 7);
        // shift right by one column, new first column = 0
        let mut shifted = vec![0.0f32; x.data().len()];
        for c in 0..3 {
            for y in 0..10 {
                for xx in 1..12 {
                    shifted[(c * 10 + y) * 12 + xx] = x.data()[(c * 10 + y) * 12 + xx - 1];
                }
            }
        }
        let xs = Image::new(10, 12, shifted).unwrap();
        let (a, _) = forward(&w, &x).unwrap();
        let (b, _) = forward(&w, &xs).unwrap();
        // receptive field radius 2: columns ≥ 3 (in shifted coords) see no boundary change
        for c in 0..3 {
            for y in 2..8 {
                for xx in 3..10 {
                    let va = a.data[(c * 10 + y) * 12 + xx - 1];
                    let vb = b.data[(c * 10 + y) * 12 + xx];
                    assert!((va - vb).abs() < 1e-5, "{va} vs {vb}");
                }
            }
        }
    }
}
