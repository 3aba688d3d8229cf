//! One-convolution classifiers: `conv → relu → fc`, with the convolution
//! either stored directly or generated from codes by a CSG.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{conv2d_backward, conv2d_forward, fc_backward, fc_forward, loss_eval, relu_backward, relu_forward, FeatureMap, Loss};
use crate::arch::{ArchSpec, CsgConfig, LayerSpec};
use crate::csg::{filterset_backward, generate_filterset, init_codes, CodeVector, CsgMatrix};
use crate::error::{Error, Result};
use crate::slicer::{make_grid, SliceGrid};
use crate::tensor::{Matrix, Tensor4};

/// Layer widths of the toy network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Widths {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub conv_channels: usize,
    pub kernel: usize,
    pub classes: usize,
}

impl Widths {
    pub fn filter_shape(&self) -> [usize; 4] {
        [self.conv_channels, self.in_channels, self.kernel, self.kernel]
    }

    fn hidden(&self) -> usize {
        self.conv_channels * self.height * self.width
    }

    fn validate(&self) -> Result<()> {
        let dims = [self.in_channels, self.height, self.width, self.conv_channels, self.kernel, self.classes];
        if dims.contains(&0) {
            return Err(Error::ZeroDimension(dims.to_vec()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ConvWeights {
    Direct(Tensor4),
    Generated { csg: CsgMatrix, codes: Vec<CodeVector>, grid: SliceGrid, freeze_csg: bool },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    widths: Widths,
    conv: ConvWeights,
    fc_weights: Matrix,
    fc_bias: Vec<f64>,
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, fan_in: usize, fan_out: usize) -> Vec<f64> {
    let b = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..n).map(|_| rng.random_range(-b..b)).collect()
}

fn init_fc(widths: &Widths, rng: &mut ChaCha8Rng) -> Result<Matrix> {
    let h = widths.hidden();
    Matrix::new(widths.classes, h, uniform(rng, widths.classes * h, h, widths.classes))
}

/// Plain network with directly stored filters.
pub fn build_cnn(widths: Widths, seed: u64) -> Result<Model> {
    widths.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [o, i, k, _] = widths.filter_shape();
    let filters = Tensor4::new(widths.filter_shape(), uniform(&mut rng, o * i * k * k, i * k * k, o * k * k))?;
    let fc_weights = init_fc(&widths, &mut rng)?;
    Ok(Model { widths, conv: ConvWeights::Direct(filters), fc_weights, fc_bias: vec![0.0; widths.classes] })
}

/// Network whose convolution is generated by `csg` from freshly drawn codes.
pub fn build_cnn_csg(widths: Widths, csg: CsgMatrix, freeze_csg: bool, seed: u64) -> Result<Model> {
    widths.validate()?;
    let grid = make_grid(widths.filter_shape(), csg.slice_shape())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let codes = init_codes(csg.code_len(), grid.slice_count(), rng.random())?;
    let fc_weights = init_fc(&widths, &mut rng)?;
    Ok(Model {
        widths,
        conv: ConvWeights::Generated { csg, codes, grid, freeze_csg },
        fc_weights,
        fc_bias: vec![0.0; widths.classes],
    })
}

/// Per-sample activations kept for the backward pass.
struct Trace {
    pre: FeatureMap,
    hidden: Vec<f64>,
    logits: Vec<f64>,
}

impl Model {
    pub fn widths(&self) -> Widths {
        self.widths
    }

    pub fn conv(&self) -> &ConvWeights {
        &self.conv
    }

    pub fn fc(&self) -> (&Matrix, &[f64]) {
        (&self.fc_weights, &self.fc_bias)
    }

    /// Replaces the codes of a generated model, e.g. with encoded filters.
    pub fn set_codes(&mut self, new_codes: Vec<CodeVector>) -> Result<()> {
        match &mut self.conv {
            ConvWeights::Generated { csg, codes, grid, .. } => {
                if new_codes.len() != grid.slice_count() || new_codes.iter().any(|c| c.len() != csg.code_len()) {
                    return Err(Error::ShapeMismatch("codes do not fit the model's grid and generator".into()));
                }
                *codes = new_codes;
                Ok(())
            }
            ConvWeights::Direct(_) => Err(Error::InvalidConfig("model has no generator".into())),
        }
    }

    /// The convolution filters, generated if necessary.
    pub fn filters(&self) -> Result<Tensor4> {
        match &self.conv {
            ConvWeights::Direct(f) => Ok(f.clone()),
            ConvWeights::Generated { csg, codes, grid, .. } => generate_filterset(csg, codes, grid),
        }
    }

    fn check_input(&self, x: &FeatureMap) -> Result<()> {
        let w = &self.widths;
        if x.shape() != (w.in_channels, w.height, w.width) {
            return Err(Error::ShapeMismatch(format!(
                "input {:?} for a model expecting ({},{},{})",
                x.shape(),
                w.in_channels,
                w.height,
                w.width
            )));
        }
        Ok(())
    }

    fn trace(&self, filters: &Tensor4, x: &FeatureMap) -> Result<Trace> {
        self.check_input(x)?;
        let pre = conv2d_forward(x, filters)?;
        let hidden = relu_forward(pre.as_slice());
        let logits = fc_forward(&self.fc_weights, &self.fc_bias, &hidden)?;
        Ok(Trace { pre, hidden, logits })
    }

    pub fn forward(&self, x: &FeatureMap) -> Result<Vec<f64>> {
        Ok(self.trace(&self.filters()?, x)?.logits)
    }

    /// Mean loss over `(input, target)` pairs.
    pub fn mean_loss<'a>(&self, loss: Loss, samples: impl IntoIterator<Item = (&'a FeatureMap, &'a [f64])>) -> Result<f64> {
        let filters = self.filters()?;
        let (mut total, mut n) = (0.0, 0usize);
        for (x, y) in samples {
            total += loss_eval(loss, &self.trace(&filters, x)?.logits, y)?.0;
            n += 1;
        }
        Ok(total / n.max(1) as f64)
    }

    /// Number of parameters SGD updates.
    pub fn trainable_count(&self) -> usize {
        let conv = match &self.conv {
            ConvWeights::Direct(f) => f.len(),
            ConvWeights::Generated { csg, codes, freeze_csg, .. } => {
                codes.len() * csg.code_len() + if *freeze_csg { 0 } else { csg.param_count() }
            }
        };
        conv + self.fc_weights.rows() * self.fc_weights.cols() + self.fc_bias.len()
    }

    /// Trainable parameters flattened as `[filters | codes, generator?], fc weights, fc bias`.
    pub fn trainable_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.trainable_count());
        match &self.conv {
            ConvWeights::Direct(f) => out.extend_from_slice(f.as_slice()),
            ConvWeights::Generated { csg, codes, freeze_csg, .. } => {
                codes.iter().for_each(|c| out.extend_from_slice(c.as_slice()));
                if !freeze_csg {
                    out.extend_from_slice(csg.matrix().as_slice());
                }
            }
        }
        out.extend_from_slice(self.fc_weights.as_slice());
        out.extend_from_slice(&self.fc_bias);
        out
    }

    /// Inverse of [`Model::trainable_params`].
    pub fn set_trainable_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.trainable_count() {
            return Err(Error::ShapeMismatch(format!(
                "{} parameters for a model with {}",
                params.len(),
                self.trainable_count()
            )));
        }
        let mut rest = params;
        let mut take = |dst: &mut [f64]| {
            let (head, tail) = rest.split_at(dst.len());
            dst.copy_from_slice(head);
            rest = tail;
        };
        match &mut self.conv {
            ConvWeights::Direct(f) => take(f.as_mut_slice()),
            ConvWeights::Generated { csg, codes, freeze_csg, .. } => {
                codes.iter_mut().for_each(|c| take(c.as_mut_slice()));
                if !*freeze_csg {
                    take(csg.matrix_mut().as_mut_slice());
                }
            }
        }
        take(self.fc_weights.as_mut_slice());
        take(&mut self.fc_bias);
        Ok(())
    }

    /// Mean loss and its gradient over a batch, laid out like [`Model::trainable_params`].
    ///
    /// Per-sample contributions are reduced in batch order.
    pub fn batch_gradient(&self, loss: Loss, batch: &[(&FeatureMap, &[f64])]) -> Result<(f64, Vec<f64>)> {
        if batch.is_empty() {
            return Err(Error::InvalidConfig("empty batch".into()));
        }
        let filters = self.filters()?;
        let mut grad_filters = Tensor4::zeros(filters.shape());
        let mut grad_w = Matrix::zeros(self.fc_weights.rows(), self.fc_weights.cols());
        let mut grad_b = vec![0.0; self.fc_bias.len()];
        let mut total = 0.0;
        for (x, y) in batch {
            let t = self.trace(&filters, x)?;
            let (value, g_logits) = loss_eval(loss, &t.logits, y)?;
            total += value;
            let (g_hidden, gw, gb) = fc_backward(&self.fc_weights, &t.hidden, &g_logits)?;
            for (a, b) in grad_w.as_mut_slice().iter_mut().zip(gw.as_slice()) {
                *a += b;
            }
            grad_b.iter_mut().zip(&gb).for_each(|(a, b)| *a += b);
            let (c, h, w) = t.pre.shape();
            let g_pre = FeatureMap::new(c, h, w, relu_backward(t.pre.as_slice(), &g_hidden))?;
            let (_, gf) = conv2d_backward(x, &filters, &g_pre)?;
            for (a, b) in grad_filters.as_mut_slice().iter_mut().zip(gf.as_slice()) {
                *a += b;
            }
        }

        let scale = 1.0 / batch.len() as f64;
        let mut out = Vec::with_capacity(self.trainable_count());
        match &self.conv {
            ConvWeights::Direct(_) => out.extend_from_slice(grad_filters.as_slice()),
            ConvWeights::Generated { csg, codes, grid, freeze_csg } => {
                let (grad_a, grad_codes) = filterset_backward(csg, codes, grid, &grad_filters)?;
                grad_codes.iter().for_each(|g| out.extend_from_slice(g));
                if !freeze_csg {
                    out.extend_from_slice(grad_a.as_slice());
                }
            }
        }
        out.extend_from_slice(grad_w.as_slice());
        out.extend_from_slice(&grad_b);
        out.iter_mut().for_each(|v| *v *= scale);
        Ok((total * scale, out))
    }

    /// Inventory of this network for parameter accounting.
    pub fn arch_spec(&self) -> ArchSpec {
        let w = &self.widths;
        let generated = matches!(self.conv, ConvWeights::Generated { .. });
        ArchSpec {
            name: if generated { "toy-cnn-csg".into() } else { "toy-cnn".into() },
            layers: vec![
                LayerSpec::conv(w.conv_channels, w.in_channels, w.kernel, generated),
                LayerSpec::fc(w.classes, w.hidden()),
            ],
            notes: vec!["single convolution; relu; no batch norm".into()],
            csg_first_conv: generated,
        }
    }

    /// Generator configuration matching this model, if it has one.
    pub fn csg_config(&self) -> Option<CsgConfig> {
        match &self.conv {
            ConvWeights::Direct(_) => None,
            ConvWeights::Generated { csg, freeze_csg, .. } => {
                let cfg = CsgConfig::new(csg.slice_shape(), csg.code_len());
                Some(if *freeze_csg { cfg.pretrained() } else { cfg })
            }
        }
    }
}

/// Compares convolving with generated filters against the sum, over every
/// slice and code coordinate, of `c_ij · conv(input, B_ij)` where `B_ij` is
/// column `j` of the generator placed at slice `i`'s position. Returns the
/// largest absolute deviation.
pub fn equivalence_check(csg: &CsgMatrix, codes: &[CodeVector], grid: &SliceGrid, input: &FeatureMap) -> Result<f64> {
    let direct = conv2d_forward(input, &generate_filterset(csg, codes, grid)?)?;
    let mut summed = vec![0.0; direct.len()];
    let slice_dims = csg.slice_shape().dims();
    for (i, code) in codes.iter().enumerate() {
        for (j, &cij) in code.as_slice().iter().enumerate() {
            let column = Tensor4::new(slice_dims, csg.matrix().column(j))?;
            let mut basis = Tensor4::zeros(grid.filter_shape());
            {
                let dst = basis.as_mut_slice();
                let src = column.as_slice();
                grid.for_each_valid(i, |so, fo| dst[fo] = src[so]);
            }
            let part = conv2d_forward(input, &basis)?;
            for (s, p) in summed.iter_mut().zip(part.as_slice()) {
                *s += cij * p;
            }
        }
    }
    Ok(direct.as_slice().iter().zip(&summed).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::csg_budget;
    use crate::csg::init_csg;
    use crate::slicer::SliceShape;

    fn widths() -> Widths {
        Widths { in_channels: 2, height: 5, width: 4, conv_channels: 6, kernel: 3, classes: 3 }
    }

    fn sample(seed: u64) -> (FeatureMap, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = FeatureMap::new(2, 5, 4, (0..40).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let mut y = vec![0.0; 3];
        y[rng.random_range(0..3)] = 1.0;
        (x, y)
    }

    fn csg_model(freeze: bool, seed: u64) -> Model {
        let csg = init_csg(SliceShape::new([4, 2, 3, 3]).unwrap(), 5, seed).unwrap();
        build_cnn_csg(widths(), csg, freeze, seed + 1).unwrap()
    }

    fn check_fd(model: &Model, loss: Loss) {
        let samples: Vec<_> = (0..3).map(|s| sample(s + 77)).collect();
        let batch: Vec<_> = samples.iter().map(|(x, y)| (x, y.as_slice())).collect();
        let (_, grad) = model.batch_gradient(loss, &batch).unwrap();
        let p = model.trainable_params();
        let h = 1e-5;
        let mut m = model.clone();
        let mut worst: f64 = 0.0;
        let mut at = |i: usize, d: f64| {
            let mut q = p.clone();
            q[i] += d;
            m.set_trainable_params(&q).unwrap();
            m.mean_loss(loss, batch.iter().copied()).unwrap()
        };
        for i in 0..p.len() {
            // fourth-order central difference
            let d1 = at(i, h) - at(i, -h);
            let d2 = at(i, 2.0 * h) - at(i, -2.0 * h);
            let fd = (8.0 * d1 - d2) / (12.0 * h);
            let err = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-4);
            worst = worst.max(err);
        }
        assert!(worst <= 1e-6, "worst relative error {worst}");
    }

    #[test]
    fn gradients_through_generator_match_finite_differences() {
        for loss in [Loss::L2, Loss::CrossEntropy] {
            check_fd(&csg_model(false, 3), loss);
            check_fd(&csg_model(true, 4), loss);
            check_fd(&build_cnn(widths(), 5).unwrap(), loss);
        }
    }

    #[test]
    fn generated_forward_equals_plain_forward() {
        let m = csg_model(false, 8);
        let mut plain = build_cnn(widths(), 0).unwrap();
        plain.conv = ConvWeights::Direct(m.filters().unwrap());
        plain.fc_weights = m.fc_weights.clone();
        plain.fc_bias = m.fc_bias.clone();
        let (x, _) = sample(1);
        let (a, b) = (m.forward(&x).unwrap(), plain.forward(&x).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn frozen_trainable_count_matches_accounting() {
        for freeze in [true, false] {
            let m = csg_model(freeze, 2);
            let budget = csg_budget(&m.arch_spec(), &m.csg_config().unwrap()).unwrap();
            assert_eq!(m.trainable_count(), budget.csg_total);
            assert_eq!(m.trainable_params().len(), m.trainable_count());
            if freeze {
                assert_eq!(m.trainable_count(), budget.c_count + budget.o_count);
            }
        }
        let m = csg_model(true, 2);
        let grid = make_grid(widths().filter_shape(), SliceShape::new([4, 2, 3, 3]).unwrap()).unwrap();
        assert_eq!(m.filters().unwrap().shape(), grid.filter_shape());
        assert_eq!(m.trainable_count(), grid.slice_count() * 5 + 3 * 6 * 20 + 3);
    }

    #[test]
    fn shape_errors() {
        let m = build_cnn(widths(), 1).unwrap();
        let bad = FeatureMap::zeros(1, 5, 4);
        assert!(m.forward(&bad).is_err());
        assert!(m.clone().set_trainable_params(&[0.0]).is_err());
        assert!(build_cnn(Widths { classes: 0, ..widths() }, 0).is_err());
    }

    #[test]
    fn equivalence_trivia() {
        let ss = SliceShape::new([4, 2, 3, 3]).unwrap();
        let csg = init_csg(ss, 3, 1).unwrap();
        let grid = make_grid(widths().filter_shape(), ss).unwrap();
        let (x, _) = sample(2);
        let zeros = vec![CodeVector::zeros(3); grid.slice_count()];
        assert_eq!(equivalence_check(&csg, &zeros, &grid, &x).unwrap(), 0.0);

        let one = init_csg(SliceShape::new([6, 2, 3, 3]).unwrap(), 1, 4).unwrap();
        let g1 = make_grid([6, 2, 3, 3], one.slice_shape()).unwrap();
        let c = vec![CodeVector::new(vec![-1.75]).unwrap()];
        assert!(equivalence_check(&one, &c, &g1, &x).unwrap() <= 1e-12);
    }
}
