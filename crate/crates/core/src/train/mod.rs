//! Minimal training engine for a one-convolution network and its
//! CSG-generated twin.
//!
//! Training is plain mini-batch SGD: no momentum, no weight decay, batches
//! drawn without replacement from a per-epoch shuffle. Everything is seeded
//! and single-threaded, so a seed fixes the loss curve bit for bit.

mod layers;
mod model;

pub use layers::{
    conv2d_backward, conv2d_forward, fc_backward, fc_forward, loss_eval, relu_backward, relu_forward, softmax,
    FeatureMap, Loss,
};
pub use model::{build_cnn, build_cnn_csg, equivalence_check, ConvWeights, Model, Widths};

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::csg::init_csg;
use crate::error::{Error, Result};
use crate::slicer::SliceShape;

/// Labelled images, all of one shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    inputs: Vec<FeatureMap>,
    labels: Vec<usize>,
    classes: usize,
    targets: Vec<Vec<f64>>,
}

impl Dataset {
    pub fn new(inputs: Vec<FeatureMap>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if inputs.len() != labels.len() {
            return Err(Error::ShapeMismatch(format!("{} inputs but {} labels", inputs.len(), labels.len())));
        }
        if let Some(first) = inputs.first() {
            if inputs.iter().any(|x| x.shape() != first.shape()) {
                return Err(Error::ShapeMismatch("inputs differ in shape".into()));
            }
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::ShapeMismatch(format!("label {bad} with only {classes} classes")));
        }
        let targets = labels
            .iter()
            .map(|&l| {
                let mut t = vec![0.0; classes];
                t[l] = 1.0;
                t
            })
            .collect();
        Ok(Self { inputs, labels, classes, targets })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn inputs(&self) -> &[FeatureMap] {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// One-hot target of sample `i`.
    pub fn target(&self, i: usize) -> &[f64] {
        &self.targets[i]
    }

    pub fn samples(&self) -> impl Iterator<Item = (&FeatureMap, &[f64])> + '_ {
        self.inputs.iter().zip(self.targets.iter().map(Vec::as_slice))
    }

    /// Non-degeneracy quantities `(n, d, m, d', δ)`.
    pub fn stats(&self) -> Result<DatasetStats> {
        let (m, h, w) = self.inputs.first().ok_or(Error::EmptyCorpus)?.shape();
        Ok(DatasetStats {
            n: self.len(),
            d: h * w,
            m,
            d_prime: self.classes,
            delta: min_pairwise_distance(&self.inputs)?,
        })
    }

    /// Fails if two coincident inputs carry different labels.
    pub fn check_consistent(&self) -> Result<()> {
        for i in 0..self.len() {
            for j in i + 1..self.len() {
                if self.labels[i] != self.labels[j] && self.inputs[i] == self.inputs[j] {
                    return Err(Error::DegenerateDataset { first: i, second: j });
                }
            }
        }
        Ok(())
    }

    /// Two-class, single-channel `side × side` images split by a random
    /// hyperplane through the origin, keeping only points at distance at
    /// least `margin` from it. Classes are balanced.
    pub fn separable_toy(n: usize, side: usize, margin: f64, seed: u64) -> Result<Self> {
        if n < 2 || side == 0 {
            return Err(Error::InvalidConfig("toy dataset needs n >= 2 and a positive side".into()));
        }
        let d = side * side;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut normal: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let len = normal.iter().map(|v| v * v).sum::<f64>().sqrt();
        normal.iter_mut().for_each(|v| *v /= len);

        let per_class = [n / 2 + n % 2, n / 2];
        let mut have = [0usize; 2];
        let (mut inputs, mut labels) = (Vec::with_capacity(n), Vec::with_capacity(n));
        while inputs.len() < n {
            let x: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let s: f64 = x.iter().zip(&normal).map(|(a, b)| a * b).sum();
            if s.abs() < margin {
                continue;
            }
            let label = usize::from(s > 0.0);
            if have[label] == per_class[label] {
                continue;
            }
            have[label] += 1;
            inputs.push(FeatureMap::new(1, side, side, x)?);
            labels.push(label);
        }
        Self::new(inputs, labels, 2)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    /// Number of points.
    pub n: usize,
    /// Features (pixels) per channel.
    pub d: usize,
    /// Input channels.
    pub m: usize,
    /// Number of labels.
    pub d_prime: usize,
    /// Minimum Euclidean distance between two flattened inputs.
    pub delta: f64,
}

pub fn min_pairwise_distance(inputs: &[FeatureMap]) -> Result<f64> {
    if inputs.len() < 2 {
        return Err(Error::InvalidConfig("minimum distance needs at least two points".into()));
    }
    let mut best = f64::INFINITY;
    for i in 0..inputs.len() {
        for j in i + 1..inputs.len() {
            let (a, b) = (inputs[i].as_slice(), inputs[j].as_slice());
            if a.len() != b.len() {
                return Err(Error::ShapeMismatch("inputs differ in size".into()));
            }
            let d2: f64 = a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum();
            best = best.min(d2);
        }
    }
    Ok(best.sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub loss: Loss,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_iterations: usize,
    /// Training stops once the full-dataset loss is at or below this.
    pub target_loss: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: Loss::CrossEntropy,
            learning_rate: 0.05,
            batch_size: 8,
            max_iterations: 5_000,
            target_loss: 0.01,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || self.batch_size == 0 || self.max_iterations == 0 {
            return Err(Error::InvalidConfig("learning rate, batch size and T must be positive".into()));
        }
        if !(self.target_loss > 0.0) {
            return Err(Error::InvalidConfig("target loss must be positive".into()));
        }
        Ok(())
    }
}

/// Full-dataset training loss before each SGD step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossCurve {
    /// `losses[t]` is the loss after `t` updates.
    pub losses: Vec<f64>,
    pub final_loss: f64,
    /// Number of SGD updates performed.
    pub iterations: usize,
}

impl LossCurve {
    /// CSV with columns `iteration,loss`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration,loss\n");
        for (i, l) in self.losses.iter().enumerate() {
            writeln!(out, "{i},{l}").unwrap();
        }
        out
    }

    pub fn converged(&self, target: f64) -> bool {
        self.final_loss <= target
    }
}

/// Runs SGD on `model` until the training loss reaches the target or the
/// iteration budget is spent.
pub fn train(model: &mut Model, data: &Dataset, cfg: &TrainConfig) -> Result<LossCurve> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    data.check_consistent()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0;
    let mut losses = Vec::new();

    let evaluate = |model: &Model, iteration: usize| -> Result<f64> {
        let loss = model.mean_loss(cfg.loss, data.samples())?;
        if !loss.is_finite() {
            return Err(Error::Divergence { iteration, loss });
        }
        Ok(loss)
    };

    for iteration in 0..cfg.max_iterations {
        let loss = evaluate(model, iteration)?;
        losses.push(loss);
        if loss <= cfg.target_loss {
            return Ok(LossCurve { losses, final_loss: loss, iterations: iteration });
        }
        if cursor == order.len() {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let end = (cursor + cfg.batch_size).min(order.len());
        let batch: Vec<_> = order[cursor..end].iter().map(|&i| (&data.inputs[i], data.target(i))).collect();
        cursor = end;

        let (_, grad) = model.batch_gradient(cfg.loss, &batch)?;
        let mut params = model.trainable_params();
        for (p, g) in params.iter_mut().zip(&grad) {
            *p -= cfg.learning_rate * g;
        }
        if let Some(index) = params.iter().position(|v| !v.is_finite()) {
            return Err(Error::Divergence { iteration, loss: params[index] });
        }
        model.set_trainable_params(&params)?;
    }
    let final_loss = evaluate(model, cfg.max_iterations)?;
    Ok(LossCurve { losses, final_loss, iterations: cfg.max_iterations })
}

/// Widths of the demo network: 8×8 single-channel input, 8 filters of 3×3, 2 classes.
pub fn toy_widths() -> Widths {
    Widths { in_channels: 1, height: 8, width: 8, conv_channels: 8, kernel: 3, classes: 2 }
}

/// Slice shape and code length of the demo generator.
pub const TOY_SLICE: [usize; 4] = [4, 1, 3, 3];
pub const TOY_CODE_LEN: usize = 32;

/// Demo network with its filters generated from [`TOY_SLICE`] slices.
/// The generator is drawn from `seed` and the rest from `seed + 1`.
pub fn toy_csg_model(seed: u64, freeze_csg: bool) -> Result<Model> {
    let csg = init_csg(SliceShape::new(TOY_SLICE)?, TOY_CODE_LEN, seed)?;
    build_cnn_csg(toy_widths(), csg, freeze_csg, seed.wrapping_add(1))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_model(seed: u64, freeze: bool) -> Model {
        toy_csg_model(seed, freeze).unwrap()
    }

    #[test]
    fn distance_cases() {
        let a = FeatureMap::new(1, 1, 2, vec![0.0, 0.0]).unwrap();
        assert_eq!(min_pairwise_distance(&[a.clone(), a.clone()]).unwrap(), 0.0);
        let grid: Vec<_> = (0..3)
            .flat_map(|i| (0..3).map(move |j| FeatureMap::new(1, 1, 2, vec![i as f64, j as f64]).unwrap()))
            .collect();
        assert_eq!(min_pairwise_distance(&grid).unwrap(), 1.0);
        assert!(min_pairwise_distance(&grid[..1]).is_err());
    }

    #[test]
    fn distance_matches_pair_loop() {
        let data = Dataset::separable_toy(20, 4, 0.1, 3).unwrap();
        let xs = data.inputs();
        let mut best = f64::INFINITY;
        for a in xs {
            for b in xs {
                if !std::ptr::eq(a, b) {
                    let d: f64 = a.as_slice().iter().zip(b.as_slice()).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
                    best = best.min(d);
                }
            }
        }
        assert!((min_pairwise_distance(xs).unwrap() - best).abs() <= 1e-12);
    }

    #[test]
    fn conflicting_duplicates_are_refused() {
        let a = FeatureMap::new(1, 1, 2, vec![1.0, 2.0]).unwrap();
        let data = Dataset::new(vec![a.clone(), a], vec![0, 1], 2).unwrap();
        let mut m = build_cnn(Widths { in_channels: 1, height: 1, width: 2, conv_channels: 1, kernel: 1, classes: 2 }, 0).unwrap();
        assert!(matches!(train(&mut m, &data, &TrainConfig::default()), Err(Error::DegenerateDataset { .. })));
    }

    #[test]
    fn toy_dataset_is_balanced_and_non_degenerate() {
        let data = Dataset::separable_toy(32, 8, 0.5, 1).unwrap();
        assert_eq!(data.labels().iter().filter(|&&l| l == 1).count(), 16);
        let s = data.stats().unwrap();
        assert_eq!((s.n, s.d, s.m, s.d_prime), (32, 64, 1, 2));
        assert!(s.delta > 0.0);
    }

    #[test]
    fn loose_target_stops_immediately() {
        let data = Dataset::separable_toy(8, 8, 0.5, 2).unwrap();
        let mut m = toy_model(1, false);
        let cfg = TrainConfig { target_loss: 1e6, ..TrainConfig::default() };
        let before = m.clone();
        let curve = train(&mut m, &data, &cfg).unwrap();
        assert_eq!(curve.iterations, 0);
        assert_eq!(curve.losses.len(), 1);
        assert_eq!(m, before);
    }

    #[test]
    fn same_seed_same_curve() {
        let data = Dataset::separable_toy(16, 8, 0.5, 4).unwrap();
        let cfg = TrainConfig { max_iterations: 40, seed: 9, ..TrainConfig::default() };
        let (mut a, mut b) = (toy_model(5, false), toy_model(5, false));
        let (ca, cb) = (train(&mut a, &data, &cfg).unwrap(), train(&mut b, &data, &cfg).unwrap());
        assert_eq!(ca.to_csv(), cb.to_csv());
        assert!(ca.losses.len() <= cfg.max_iterations);
        assert_eq!(a, b);
    }

    #[test]
    fn frozen_generator_is_untouched() {
        let data = Dataset::separable_toy(16, 8, 0.5, 5).unwrap();
        let mut m = toy_model(6, true);
        let ConvWeights::Generated { csg: before, .. } = m.conv().clone() else { unreachable!() };
        train(&mut m, &data, &TrainConfig { max_iterations: 20, ..TrainConfig::default() }).unwrap();
        let ConvWeights::Generated { csg: after, .. } = m.conv() else { unreachable!() };
        assert_eq!(&before, after);
    }

    #[test]
    fn divergence_is_reported() {
        let data = Dataset::separable_toy(16, 8, 0.5, 6).unwrap();
        let mut m = build_cnn(toy_widths(), 1).unwrap();
        let cfg = TrainConfig { loss: Loss::L2, learning_rate: 1e150, max_iterations: 50, ..TrainConfig::default() };
        assert!(matches!(train(&mut m, &data, &cfg), Err(Error::Divergence { .. })));
    }

    #[test]
    fn csv_layout() {
        let c = LossCurve { losses: vec![0.5, 0.25], final_loss: 0.125, iterations: 2 };
        assert_eq!(c.to_csv(), "iteration,loss\n0,0.5\n1,0.25\n");
    }
}
