//! Code-size estimation from the 4-D DCT-II compressibility of slices.
//!
//! Each slice of a corpus is transformed with an orthonormal 4-D DCT-II,
//! coefficients with magnitude below a global threshold `τ` are dropped, and
//! the inverse transform is scored with PSNR* against the original. `τ` is
//! searched so the corpus-mean PSNR* stays above a target (20 dB by
//! default), and the mean number of surviving coefficients suggests `n_c`.
//!
//! The transform is orthonormal along every axis, so `idct4 ∘ dct4` is the
//! identity and Parseval holds.

use std::f64::consts::PI;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::slicer::SliceShape;
use crate::tensor::{Shape4, Tensor4};

/// DCT coefficients `K[u,v,w,t]` of a slice.
pub type DctSpectrum = Tensor4;

/// Orthonormal DCT-II matrix: `B[u][i] = α(u) cos(π/n (i + ½) u)`.
fn dct_matrix(n: usize) -> Vec<f64> {
    let mut m = vec![0.0; n * n];
    for u in 0..n {
        let alpha = if u == 0 { (1.0 / n as f64).sqrt() } else { (2.0 / n as f64).sqrt() };
        for i in 0..n {
            m[u * n + i] = alpha * (PI / n as f64 * (i as f64 + 0.5) * u as f64).cos();
        }
    }
    m
}

fn transpose(m: &[f64], n: usize) -> Vec<f64> {
    let mut t = vec![0.0; n * n];
    for r in 0..n {
        for c in 0..n {
            t[c * n + r] = m[r * n + c];
        }
    }
    t
}

/// Applies the square matrix `m` to every fiber of `src` along `axis`.
fn apply_axis(src: &[f64], shape: Shape4, axis: usize, m: &[f64], dst: &mut [f64]) {
    let n = shape[axis];
    let stride: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    for o in 0..outer {
        for t in 0..stride {
            let base = o * n * stride + t;
            for u in 0..n {
                let row = &m[u * n..(u + 1) * n];
                let mut acc = 0.0;
                for (i, w) in row.iter().enumerate() {
                    acc += w * src[base + i * stride];
                }
                dst[base + u * stride] = acc;
            }
        }
    }
}

/// Precomputed per-axis bases for one slice shape.
#[derive(Debug, Clone)]
pub struct Dct4Plan {
    shape: Shape4,
    forward: [Vec<f64>; 4],
    inverse: [Vec<f64>; 4],
}

impl Dct4Plan {
    pub fn new(shape: Shape4) -> Self {
        let forward = shape.map(dct_matrix);
        let inverse = [0, 1, 2, 3].map(|a| transpose(&forward[a], shape[a]));
        Self { shape, forward, inverse }
    }

    pub fn shape(&self) -> Shape4 {
        self.shape
    }

    fn run(&self, x: &Tensor4, mats: &[Vec<f64>; 4]) -> Tensor4 {
        assert_eq!(x.shape(), self.shape, "plan built for another shape");
        let mut a = x.vectorize();
        let mut b = vec![0.0; a.len()];
        for (axis, m) in mats.iter().enumerate() {
            apply_axis(&a, self.shape, axis, m, &mut b);
            std::mem::swap(&mut a, &mut b);
        }
        Tensor4::new(self.shape, a).expect("finite input stays finite")
    }

    pub fn forward(&self, x: &Tensor4) -> DctSpectrum {
        self.run(x, &self.forward)
    }

    pub fn inverse(&self, spec: &DctSpectrum) -> Tensor4 {
        self.run(spec, &self.inverse)
    }
}

/// Orthonormal 4-D DCT-II.
pub fn dct4(slice: &Tensor4) -> DctSpectrum {
    Dct4Plan::new(slice.shape()).forward(slice)
}

/// Inverse of [`dct4`] (orthonormal 4-D DCT-III).
pub fn idct4(spec: &DctSpectrum) -> Tensor4 {
    Dct4Plan::new(spec.shape()).inverse(spec)
}

/// Affine map onto `[0, 1]` taken from one slice's min and max.
///
/// Constant slices have no range; they map to 0.5 with their own magnitude
/// (or 1 for a zero slice) as the unit, so a reconstruction that loses the
/// constant still scores poorly.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Frame {
    lo: f64,
    span: f64,
    bias: f64,
}

impl Frame {
    pub fn of(slice: &Tensor4) -> Self {
        let (lo, hi) = slice
            .as_slice()
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        let range = hi - lo;
        if range > 0.0 {
            Self { lo, span: range, bias: 0.0 }
        } else {
            let span = if lo != 0.0 { lo.abs() } else { 1.0 };
            Self { lo, span, bias: 0.5 }
        }
    }

    pub fn apply(&self, t: &Tensor4) -> Tensor4 {
        let data = t.as_slice().iter().map(|v| self.bias + (v - self.lo) / self.span).collect();
        Tensor4::new(t.shape(), data).expect("finite")
    }
}

/// Min-max rescaling of a slice onto `[0, 1]`; a constant slice becomes all 0.5.
pub fn rescale01(slice: &Tensor4) -> Tensor4 {
    Frame::of(slice).apply(slice)
}

/// `10·log10(1/MSE)` for two slices already rescaled into the same frame.
///
/// Returns `cap_db` once the MSE falls below `10^(-cap_db/10)`.
pub fn psnr_star(orig: &Tensor4, approx: &Tensor4, cap_db: f64) -> Result<f64> {
    if orig.shape() != approx.shape() {
        return Err(Error::ShapeMismatch(format!(
            "PSNR* of {:?} against {:?}",
            orig.shape(),
            approx.shape()
        )));
    }
    let sse: f64 = orig.as_slice().iter().zip(approx.as_slice()).map(|(a, b)| (a - b) * (a - b)).sum();
    let mse = sse / orig.len() as f64;
    if mse < 10f64.powf(-cap_db / 10.0) {
        Ok(cap_db)
    } else {
        Ok(-10.0 * mse.log10())
    }
}

/// Zeroes coefficients with `|K| < tau`; returns the spectrum and the number kept.
pub fn prune_spectrum(spec: &DctSpectrum, tau: f64) -> (DctSpectrum, usize) {
    let mut kept = 0;
    let data = spec
        .as_slice()
        .iter()
        .map(|&k| {
            if k.abs() >= tau {
                kept += 1;
                k
            } else {
                0.0
            }
        })
        .collect();
    (Tensor4::new(spec.shape(), data).expect("finite"), kept)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateConfig {
    pub slice_shape: SliceShape,
    pub target_psnr_db: f64,
    /// Bisection stops once the bracket's PSNR* gap is at most this.
    pub tolerance_db: f64,
    pub cap_db: f64,
    pub max_steps: usize,
}

impl EstimateConfig {
    pub fn new(slice_shape: SliceShape) -> Self {
        Self { slice_shape, target_psnr_db: 20.0, tolerance_db: 0.1, cap_db: 100.0, max_steps: 60 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.target_psnr_db > 0.0) {
            return Err(Error::InvalidConfig("target PSNR must be positive".into()));
        }
        if !(self.cap_db > self.target_psnr_db) {
            return Err(Error::InvalidConfig("PSNR cap must exceed the target".into()));
        }
        if !(self.tolerance_db >= 0.0) {
            return Err(Error::InvalidConfig("tolerance must be non-negative".into()));
        }
        Ok(())
    }
}

/// Per-slice PSNR* and retained-coefficient counts at one threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PsnrReport {
    pub tau: f64,
    pub psnr_db: Vec<f64>,
    pub retained: Vec<usize>,
    pub mean_psnr_db: f64,
    pub mean_retained: f64,
}

impl PsnrReport {
    /// CSV with columns `slice_index,psnr_db,retained` and a trailing `mean` row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("slice_index,psnr_db,retained\n");
        for (i, (p, r)) in self.psnr_db.iter().zip(&self.retained).enumerate() {
            writeln!(out, "{i},{p},{r}").unwrap();
        }
        writeln!(out, "mean,{},{}", self.mean_psnr_db, self.mean_retained).unwrap();
        out
    }
}

/// A corpus with spectra and rescaled originals cached for repeated scoring.
pub struct SpectralCorpus {
    plan: Dct4Plan,
    spectra: Vec<DctSpectrum>,
    frames: Vec<Frame>,
    scaled: Vec<Tensor4>,
    cap_db: f64,
}

impl SpectralCorpus {
    pub fn new(corpus: &[Tensor4], slice_shape: SliceShape, cap_db: f64) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        if let Some((i, bad)) = corpus.iter().enumerate().find(|(_, s)| s.shape() != slice_shape.dims()) {
            return Err(Error::ShapeMismatch(format!(
                "corpus slice {i} has shape {:?}, expected {slice_shape}",
                bad.shape()
            )));
        }
        let plan = Dct4Plan::new(slice_shape.dims());
        let spectra = corpus.iter().map(|s| plan.forward(s)).collect();
        let frames: Vec<Frame> = corpus.iter().map(Frame::of).collect();
        let scaled = corpus.iter().zip(&frames).map(|(s, f)| f.apply(s)).collect();
        Ok(Self { plan, spectra, frames, scaled, cap_db })
    }

    pub fn len(&self) -> usize {
        self.spectra.len()
    }

    pub fn is_empty(&self) -> bool {
        self.spectra.is_empty()
    }

    pub fn max_magnitude(&self) -> f64 {
        self.spectra
            .iter()
            .flat_map(|s| s.as_slice())
            .fold(0.0, |m, k| m.max(k.abs()))
    }

    /// Scores every slice at threshold `tau`; means are reduced in corpus order.
    pub fn evaluate(&self, tau: f64) -> PsnrReport {
        let mut psnr_db = Vec::with_capacity(self.len());
        let mut retained = Vec::with_capacity(self.len());
        for ((spec, frame), orig) in self.spectra.iter().zip(&self.frames).zip(&self.scaled) {
            let (pruned, kept) = prune_spectrum(spec, tau);
            let approx = frame.apply(&self.plan.inverse(&pruned));
            psnr_db.push(psnr_star(orig, &approx, self.cap_db).expect("shapes agree"));
            retained.push(kept);
        }
        let n = self.len() as f64;
        let mean_psnr_db = psnr_db.iter().sum::<f64>() / n;
        let mean_retained = retained.iter().sum::<usize>() as f64 / n;
        PsnrReport { tau, psnr_db, retained, mean_psnr_db, mean_retained }
    }

    /// Largest `tau` (to bisection precision) keeping the mean PSNR* at or above target.
    pub fn find_threshold(&self, cfg: &EstimateConfig) -> Result<f64> {
        cfg.validate()?;
        let at_zero = self.evaluate(0.0).mean_psnr_db;
        if at_zero < cfg.target_psnr_db {
            return Err(Error::TargetUnreachable { target_db: cfg.target_psnr_db, achieved_db: at_zero });
        }
        // everything is pruned strictly above the largest magnitude
        let mut hi = self.max_magnitude().next_up();
        let mut hi_db = self.evaluate(hi).mean_psnr_db;
        if hi_db >= cfg.target_psnr_db {
            return Ok(hi);
        }
        let (mut lo, mut lo_db) = (0.0, at_zero);
        for _ in 0..cfg.max_steps {
            if lo_db - hi_db <= cfg.tolerance_db {
                break;
            }
            let mid = 0.5 * (lo + hi);
            let mid_db = self.evaluate(mid).mean_psnr_db;
            if mid_db >= cfg.target_psnr_db {
                (lo, lo_db) = (mid, mid_db);
            } else {
                (hi, hi_db) = (mid, mid_db);
            }
        }
        Ok(lo)
    }
}

/// Searches the global threshold for `corpus`.
pub fn find_threshold(corpus: &[Tensor4], cfg: &EstimateConfig) -> Result<f64> {
    SpectralCorpus::new(corpus, cfg.slice_shape, cfg.cap_db)?.find_threshold(cfg)
}

/// Outcome of the code-size search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodeSizeEstimate {
    pub slice_shape: SliceShape,
    pub element_count: usize,
    pub report: PsnrReport,
    /// `max(1, ceil(mean retained))`.
    pub recommended_nc: usize,
    /// `round(element_count / 18)`, the convention used for the reference models.
    pub nc_18: usize,
}

pub fn nc_18(element_count: usize) -> usize {
    (element_count as f64 / 18.0).round() as usize
}

pub fn estimate_code_size(corpus: &[Tensor4], cfg: &EstimateConfig) -> Result<CodeSizeEstimate> {
    let sc = SpectralCorpus::new(corpus, cfg.slice_shape, cfg.cap_db)?;
    let tau = sc.find_threshold(cfg)?;
    let report = sc.evaluate(tau);
    let element_count = cfg.slice_shape.element_count();
    Ok(CodeSizeEstimate {
        slice_shape: cfg.slice_shape,
        element_count,
        recommended_nc: (report.mean_retained.ceil() as usize).max(1),
        nc_18: nc_18(element_count),
        report,
    })
}
