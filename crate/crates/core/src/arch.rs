//! Layer inventories and parameter budgets for CSG-augmented networks.
//!
//! Counting conventions: convolutions carry no bias unless flagged, every
//! batch-norm layer contributes its affine scale and shift (running
//! statistics are not parameters), fully connected layers carry a bias, and
//! CIFAR ResNet shortcuts are parameter-free.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::slicer::{make_grid, SliceShape};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LayerSpec {
    Conv {
        out_channels: usize,
        in_channels: usize,
        kernel_h: usize,
        kernel_w: usize,
        #[serde(default)]
        bias: bool,
        #[serde(default)]
        csg_eligible: bool,
    },
    Fc {
        out: usize,
        #[serde(rename = "in")]
        input: usize,
        #[serde(default = "yes")]
        bias: bool,
    },
    #[serde(rename = "batchnorm")]
    BatchNorm { channels: usize },
}

fn yes() -> bool {
    true
}

impl LayerSpec {
    pub fn conv(out_channels: usize, in_channels: usize, k: usize, csg_eligible: bool) -> Self {
        LayerSpec::Conv { out_channels, in_channels, kernel_h: k, kernel_w: k, bias: false, csg_eligible }
    }

    pub fn fc(out: usize, input: usize) -> Self {
        LayerSpec::Fc { out, input, bias: true }
    }

    pub fn bn(channels: usize) -> Self {
        LayerSpec::BatchNorm { channels }
    }

    pub fn param_count(&self) -> usize {
        match *self {
            LayerSpec::Conv { out_channels, in_channels, kernel_h, kernel_w, bias, .. } => {
                out_channels * in_channels * kernel_h * kernel_w + if bias { out_channels } else { 0 }
            }
            LayerSpec::Fc { out, input, bias } => out * input + if bias { out } else { 0 },
            LayerSpec::BatchNorm { channels } => 2 * channels,
        }
    }

    /// Filter tensor shape `(out, in, kh, kw)` of a convolution.
    pub fn filter_shape(&self) -> Option<[usize; 4]> {
        match *self {
            LayerSpec::Conv { out_channels, in_channels, kernel_h, kernel_w, .. } => {
                Some([out_channels, in_channels, kernel_h, kernel_w])
            }
            _ => None,
        }
    }

    fn dims(&self) -> Vec<usize> {
        match *self {
            LayerSpec::Conv { out_channels, in_channels, kernel_h, kernel_w, .. } => {
                vec![out_channels, in_channels, kernel_h, kernel_w]
            }
            LayerSpec::Fc { out, input, .. } => vec![out, input],
            LayerSpec::BatchNorm { channels } => vec![channels],
        }
    }
}

/// Ordered layer inventory of a network.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub name: String,
    pub layers: Vec<LayerSpec>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
    /// Lets the first convolution be generated. Only single-convolution
    /// networks such as the toy training model need this.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub csg_first_conv: bool,
}

impl ArchSpec {
    pub fn new(name: impl Into<String>, layers: Vec<LayerSpec>) -> Result<Self> {
        let spec = Self { name: name.into(), layers, notes: Vec::new(), csg_first_conv: false };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::InvalidArch(format!("{} has no layers", self.name)));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.dims().contains(&0) {
                return Err(Error::InvalidArch(format!("layer {i} of {} has a zero dimension", self.name)));
            }
        }
        match self.first_conv() {
            None => return Err(Error::InvalidArch(format!("{} has no convolution", self.name))),
            Some(i) => {
                if let LayerSpec::Conv { csg_eligible: true, .. } = self.layers[i] {
                    if !self.csg_first_conv {
                        return Err(Error::InvalidArch(format!(
                            "first convolution of {} cannot be csg-eligible",
                            self.name
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn first_conv(&self) -> Option<usize> {
        self.layers.iter().position(|l| matches!(l, LayerSpec::Conv { .. }))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data serializes")
    }
}

/// Total parameter count of a network.
pub fn count_params(spec: &ArchSpec) -> usize {
    spec.layers.iter().map(LayerSpec::param_count).sum()
}

/// He et al. CIFAR ResNet with `(n - 2) / 6` basic blocks per stage.
pub fn resnet_cifar(n_layers: usize) -> Result<ArchSpec> {
    if n_layers < 8 || !(n_layers - 2).is_multiple_of(6) {
        return Err(Error::InvalidArch(format!("CIFAR ResNet depth {n_layers} is not 6n + 2")));
    }
    let blocks = (n_layers - 2) / 6;
    let mut layers = vec![LayerSpec::conv(16, 3, 3, false), LayerSpec::bn(16)];
    let mut ch = 16;
    for width in [16, 32, 64] {
        for _ in 0..blocks {
            layers.extend([
                LayerSpec::conv(width, ch, 3, true),
                LayerSpec::bn(width),
                LayerSpec::conv(width, width, 3, true),
                LayerSpec::bn(width),
            ]);
            ch = width;
        }
    }
    layers.push(LayerSpec::fc(10, 64));
    let mut spec = ArchSpec::new(format!("ResNet-{n_layers}"), layers)?;
    spec.notes.push("parameter-free identity shortcuts".into());
    Ok(spec)
}

/// Torchvision-style ImageNet ResNet-18 (basic blocks) or ResNet-50 (bottlenecks).
pub fn resnet_imagenet(depth: usize) -> Result<ArchSpec> {
    let (bottleneck, stages) = match depth {
        18 => (false, [2, 2, 2, 2]),
        50 => (true, [3, 4, 6, 3]),
        other => return Err(Error::InvalidArch(format!("unsupported ImageNet ResNet depth {other}"))),
    };
    let mut layers = vec![LayerSpec::conv(64, 3, 7, false), LayerSpec::bn(64)];
    let mut ch = 64;
    for (stage, &blocks) in stages.iter().enumerate() {
        let width = 64 << stage;
        for b in 0..blocks {
            let out = if bottleneck { 4 * width } else { width };
            if bottleneck {
                layers.extend([
                    LayerSpec::conv(width, ch, 1, false),
                    LayerSpec::bn(width),
                    LayerSpec::conv(width, width, 3, true),
                    LayerSpec::bn(width),
                    LayerSpec::conv(out, width, 1, false),
                    LayerSpec::bn(out),
                ]);
            } else {
                layers.extend([
                    LayerSpec::conv(width, ch, 3, true),
                    LayerSpec::bn(width),
                    LayerSpec::conv(width, width, 3, true),
                    LayerSpec::bn(width),
                ]);
            }
            if b == 0 && ch != out {
                layers.extend([LayerSpec::conv(out, ch, 1, false), LayerSpec::bn(out)]);
            }
            ch = out;
        }
    }
    layers.push(LayerSpec::fc(1000, ch));
    ArchSpec::new(format!("ResNet-{depth}"), layers)
}

/// DenseNet-BC for CIFAR: three dense blocks of `(L - 4) / 6` bottleneck layers.
pub fn densenet_bc(depth: usize, growth: usize, theta: f64) -> Result<ArchSpec> {
    if depth < 10 || !(depth - 4).is_multiple_of(6) {
        return Err(Error::InvalidArch(format!("DenseNet-BC depth {depth} is not 6n + 4")));
    }
    if !(theta > 0.0 && theta <= 1.0) {
        return Err(Error::InvalidArch(format!("compression factor {theta} outside (0, 1]")));
    }
    if growth == 0 {
        return Err(Error::InvalidArch("growth rate must be positive".into()));
    }
    let per_block = (depth - 4) / 6;
    let mut ch = 2 * growth;
    let mut layers = vec![LayerSpec::conv(ch, 3, 3, false)];
    for block in 0..3 {
        for _ in 0..per_block {
            layers.extend([
                LayerSpec::bn(ch),
                LayerSpec::conv(4 * growth, ch, 1, false),
                LayerSpec::bn(4 * growth),
                LayerSpec::conv(growth, 4 * growth, 3, true),
            ]);
            ch += growth;
        }
        if block < 2 {
            let out = (theta * ch as f64).floor() as usize;
            layers.extend([LayerSpec::bn(ch), LayerSpec::conv(out, ch, 1, false)]);
            ch = out;
        }
    }
    layers.extend([LayerSpec::bn(ch), LayerSpec::fc(10, ch)]);
    let mut spec = ArchSpec::new(format!("DenseNet-BC-{depth}-{growth}"), layers)?;
    spec.notes.push(format!("theta = {theta}"));
    Ok(spec)
}

/// Resolves names such as `resnet56`, `resnet-50` or `densenet-bc-40-48`.
pub fn builtin(name: &str) -> Result<ArchSpec> {
    let lower = name.to_ascii_lowercase().replace('_', "-");
    if let Some(rest) = lower.strip_prefix("densenet-bc-") {
        let parts: Vec<&str> = rest.split('-').collect();
        if let [l, k] = parts[..] {
            if let (Ok(l), Ok(k)) = (l.parse(), k.parse()) {
                return densenet_bc(l, k, 0.5);
            }
        }
    } else if let Some(rest) = lower.strip_prefix("resnet") {
        if let Ok(depth) = rest.trim_start_matches('-').parse::<usize>() {
            return match depth {
                18 | 50 => resnet_imagenet(depth),
                _ => resnet_cifar(depth),
            };
        }
    }
    Err(Error::InvalidArch(format!("unknown architecture `{name}`")))
}

/// Slicing policy for 1×1 kernels: slices `(ŝ1, ŝ2, 1, 1)` with code length
/// `round(ŝ1·ŝ2 / 18)` from a second, separate generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PointwisePolicy {
    pub slice_shape: SliceShape,
    pub n_c: usize,
}

impl PointwisePolicy {
    pub fn derived_from(main: SliceShape) -> Self {
        let [a, b, _, _] = main.dims();
        Self {
            slice_shape: SliceShape::new([a, b, 1, 1]).expect("positive"),
            n_c: ((a * b) as f64 / 18.0).round().max(1.0) as usize,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CsgConfig {
    pub slice_shape: SliceShape,
    pub n_c: usize,
    /// The generator is frozen and not counted.
    pub pretrained_csg: bool,
    pub compress_1x1: Option<PointwisePolicy>,
}

impl CsgConfig {
    pub fn new(slice_shape: SliceShape, n_c: usize) -> Self {
        Self { slice_shape, n_c, pretrained_csg: false, compress_1x1: None }
    }

    pub fn pretrained(mut self) -> Self {
        self.pretrained_csg = true;
        self
    }

    pub fn with_compressed_1x1(mut self) -> Self {
        self.compress_1x1 = Some(PointwisePolicy::derived_from(self.slice_shape));
        self
    }

    /// Parses `A,B,C,D:N`.
    pub fn parse(token: &str) -> Result<Self> {
        let (shape, n) = token
            .split_once(':')
            .ok_or_else(|| Error::InvalidConfig(format!("`{token}` is not of the form A,B,C,D:N")))?;
        let n_c: usize = n
            .trim()
            .parse()
            .map_err(|_| Error::InvalidConfig(format!("bad code length `{n}`")))?;
        if n_c == 0 {
            return Err(Error::InvalidConfig("n_c must be at least 1".into()));
        }
        Ok(Self::new(shape.parse()?, n_c))
    }

    pub fn label(&self) -> String {
        format!("CSG-{}-{}", self.slice_shape, self.n_c)
    }
}

/// Budget decomposition `|P̂| = |Ô| + |Ĝ| + |Ĉ|`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamBudget {
    pub name: String,
    pub original_total: usize,
    /// Parameters of the generated convolutions in the original network.
    pub replaced: usize,
    pub o_count: usize,
    pub g_count: usize,
    pub c_count: usize,
    pub slice_count: usize,
    pub pretrained_csg: bool,
    pub csg_total: usize,
    pub ratio: f64,
    /// `floor(ratio · 100) / 100`.
    pub ratio_floor2: f64,
    pub model_bytes_f32: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl ParamBudget {
    /// Parameters updated by training: `|Ĉ| + |Ô|`, plus `|Ĝ|` unless frozen.
    pub fn trainable(&self) -> usize {
        self.csg_total
    }
}

pub fn compression_ratio(budget: &ParamBudget) -> f64 {
    budget.original_total as f64 / budget.csg_total as f64
}

pub fn floor2(x: f64) -> f64 {
    (x * 100.0 + 1e-9).floor() / 100.0
}

fn is_pointwise(l: &LayerSpec) -> bool {
    matches!(l, LayerSpec::Conv { kernel_h: 1, kernel_w: 1, .. })
}

pub fn csg_budget(spec: &ArchSpec, cfg: &CsgConfig) -> Result<ParamBudget> {
    spec.validate()?;
    if cfg.n_c == 0 {
        return Err(Error::InvalidConfig("n_c must be at least 1".into()));
    }
    let original_total = count_params(spec);
    let first = spec.first_conv();
    let mut replaced = 0;
    let mut slice_count = 0;
    let mut c_count = 0;
    let mut pointwise_used = false;
    let mut larger_everywhere = true;
    let mut any_eligible = false;
    for (i, layer) in spec.layers.iter().enumerate() {
        let LayerSpec::Conv { csg_eligible, bias, .. } = *layer else { continue };
        let shape = layer.filter_shape().unwrap();
        let (slice_shape, n_c) = if csg_eligible {
            (cfg.slice_shape, cfg.n_c)
        } else if let Some(p) = cfg.compress_1x1.filter(|_| Some(i) != first && is_pointwise(layer)) {
            pointwise_used = true;
            (p.slice_shape, p.n_c)
        } else {
            continue;
        };
        any_eligible = true;
        if csg_eligible && (0..4).all(|a| shape[a] >= slice_shape.dims()[a]) {
            larger_everywhere = false;
        }
        let grid = make_grid(shape, slice_shape)?;
        slice_count += grid.slice_count();
        c_count += grid.slice_count() * n_c;
        // only the kernel weights are generated; a conv bias stays in Ô
        replaced += layer.param_count() - if bias { shape[0] } else { 0 };
    }
    let mut warnings = Vec::new();
    if !any_eligible {
        warnings.push(format!("{} has no csg-eligible convolution", spec.name));
    } else if larger_everywhere && cfg.slice_shape.element_count() > 1 {
        warnings.push(format!(
            "slice shape {} does not fit inside any eligible layer of {}",
            cfg.slice_shape, spec.name
        ));
    }
    let mut g_count = cfg.slice_shape.element_count() * cfg.n_c;
    if pointwise_used {
        let p = cfg.compress_1x1.unwrap();
        g_count += p.slice_shape.element_count() * p.n_c;
    }
    let o_count = original_total - replaced;
    let csg_total = o_count + c_count + if cfg.pretrained_csg { 0 } else { g_count };
    let ratio = original_total as f64 / csg_total as f64;
    Ok(ParamBudget {
        name: format!("{}-{}", spec.name, cfg.label()),
        original_total,
        replaced,
        o_count,
        g_count,
        c_count,
        slice_count,
        pretrained_csg: cfg.pretrained_csg,
        csg_total,
        ratio,
        ratio_floor2: floor2(ratio),
        model_bytes_f32: 4 * csg_total,
        warnings,
    })
}

/// One row of the reference comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub table: u8,
    pub label: String,
    pub computed: usize,
    pub reference: usize,
    pub computed_ratio: f64,
    pub reference_ratio: f64,
    /// `false` when no documented counting policy yields the reference value.
    pub reconciled: bool,
}

/// Reference rows for the CIFAR-10 and ImageNet models, in publication order.
pub fn reference_rows() -> Result<Vec<TableRow>> {
    let s16 = CsgConfig::parse("16,16,3,3:128")?;
    let s12 = CsgConfig::parse("12,12,3,3:72")?;
    let d48 = densenet_bc(40, 48, 0.5)?;
    let d36 = densenet_bc(40, 36, 0.5)?;
    let r56 = resnet_cifar(56)?;
    let r18 = resnet_imagenet(18)?;
    let r50 = resnet_imagenet(50)?;

    let mut rows = Vec::new();
    let d48_orig = count_params(&d48);
    push_row(&mut rows, 1, &format!("{} (Original)", d48.name), d48_orig, d48_orig, 2_733_130, 1.0);
    let b = csg_budget(&d48, &s12)?;
    push_row(&mut rows, 1, &b.name, b.csg_total, d48_orig, 1_416_394, 1.92);
    let b = csg_budget(&d48, &s12.pretrained())?;
    push_row(&mut rows, 1, &format!("{} w/ Pre-trained CSG on DenseNet-BC-40-48", b.name), b.csg_total, d48_orig, 1_323_082, 2.06);
    push_row(&mut rows, 1, &format!("{} w/ Pre-trained CSG on DenseNet-BC-40-36", b.name), b.csg_total, d48_orig, 1_323_082, 2.06);
    let b = csg_budget(&d48, &s12.with_compressed_1x1())?;
    push_row(&mut rows, 1, &format!("{} w/ Compressed 1x1 Kernels", b.name), b.csg_total, d48_orig, 904_906, 3.02);

    let d36_orig = count_params(&d36);
    push_row(&mut rows, 1, &format!("{} (Original)", d36.name), d36_orig, d36_orig, 1_542_682, 1.0);
    let b = csg_budget(&d36, &s12)?;
    push_row(&mut rows, 1, &b.name, b.csg_total, d36_orig, 842_842, 1.83);
    let b = csg_budget(&d36, &s12.pretrained())?;
    push_row(&mut rows, 1, &format!("{} w/ Pre-trained CSG on DenseNet-BC-40-48", b.name), b.csg_total, d36_orig, 749_530, 2.05);

    let r56_orig = count_params(&r56);
    push_row(&mut rows, 1, &format!("{} (Original)", r56.name), r56_orig, r56_orig, 853_018, 1.0);
    let b = csg_budget(&r56, &s16)?;
    push_row(&mut rows, 1, &b.name, b.csg_total, r56_orig, 347_162, 2.45);
    let b = csg_budget(&r56, &s12)?;
    push_row(&mut rows, 1, &b.name, b.csg_total, r56_orig, 160_450, 5.31);
    let b = csg_budget(&r56, &s16.pretrained())?;
    push_row(&mut rows, 1, &format!("{} w/ Pre-trained CSG on ResNet-20", b.name), b.csg_total, r56_orig, 52_250, 16.3);

    let r18_orig = count_params(&r18);
    push_row(&mut rows, 2, &format!("{} (Original)", r18.name), r18_orig, r18_orig, 15_995_176, 1.0);
    let b = csg_budget(&r18, &s16)?;
    push_row(&mut rows, 2, &b.name, b.csg_total, r18_orig, 10_371_368, 1.54);
    let r50_orig = count_params(&r50);
    push_row(&mut rows, 2, &format!("{} (Original)", r50.name), r50_orig, r50_orig, 25_557_032, 1.0);
    let b = csg_budget(&r50, &s16)?;
    push_row(&mut rows, 2, &b.name, b.csg_total, r50_orig, 15_163_432, 1.68);
    Ok(rows)
}

fn push_row(rows: &mut Vec<TableRow>, table: u8, label: &str, computed: usize, original: usize, reference: usize, reference_ratio: f64) {
    rows.push(TableRow {
        table,
        label: label.to_string(),
        computed,
        reference,
        computed_ratio: original as f64 / computed as f64,
        reference_ratio,
        reconciled: computed == reference,
    });
}

fn group(n: usize) -> String {
    let digits = n.to_string();
    let mut out = String::new();
    for (i, ch) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

/// Aligned text rendering of a budget with `# Param.` and `Ratio` columns.
/// Warnings are left to the caller.
pub fn budget_table(original_name: &str, budget: &ParamBudget) -> String {
    let rows = [
        (format!("{original_name} (Original)"), budget.original_total, 1.0, 1.0),
        (budget.name.clone(), budget.csg_total, budget.ratio, budget.ratio_floor2),
    ];
    let width = rows.iter().map(|r| r.0.len()).max().unwrap_or(0).max(20);
    let mut out = String::new();
    writeln!(out, "{:<width$}  {:>12}  {:>9}  {:>7}", "Network Architecture", "# Param.", "Ratio", "floor").unwrap();
    for (name, n, ratio, fl) in rows {
        writeln!(out, "{name:<width$}  {:>12}  {ratio:>8.4}x  {fl:>6.2}x", group(n)).unwrap();
    }
    writeln!(
        out,
        "|O| = {}  |G| = {}{}  |C| = {}  slices = {}",
        group(budget.o_count),
        group(budget.g_count),
        if budget.pretrained_csg { " (frozen, not counted)" } else { "" },
        group(budget.c_count),
        budget.slice_count
    )
    .unwrap();
    out
}

/// Aligned text rendering of [`reference_rows`].
pub fn reference_table(rows: &[TableRow]) -> String {
    let width = rows.iter().map(|r| r.label.len()).max().unwrap_or(0);
    let mut out = String::new();
    let mut current = 0;
    for r in rows {
        if r.table != current {
            current = r.table;
            writeln!(
                out,
                "{}{}\n{:<width$}  {:>12}  {:>12}  {:>8}  {:>6}  status",
                if current == 1 { "" } else { "\n" },
                if current == 1 { "CIFAR-10" } else { "ImageNet" },
                "Network Architecture",
                "# Param.",
                "reference",
                "Ratio",
                "ref"
            )
            .unwrap();
        }
        writeln!(
            out,
            "{:<width$}  {:>12}  {:>12}  {:>7.2}x  {:>5.2}x  {}",
            r.label,
            group(r.computed),
            group(r.reference),
            floor2(r.computed_ratio),
            r.reference_ratio,
            if r.reconciled { "exact" } else { "UNRECONCILED" }
        )
        .unwrap();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn eligible_sum(spec: &ArchSpec) -> usize {
        spec.layers
            .iter()
            .filter(|l| matches!(l, LayerSpec::Conv { csg_eligible: true, .. }))
            .map(LayerSpec::param_count)
            .sum()
    }

    #[test]
    fn single_layer_counts() {
        assert_eq!(LayerSpec::fc(10, 64).param_count(), 650);
        assert_eq!(LayerSpec::conv(16, 16, 3, true).param_count(), 2304);
        assert_eq!(LayerSpec::bn(16).param_count(), 32);
    }

    #[test]
    fn resnet56_breakdown() {
        let r = resnet_cifar(56).unwrap();
        assert_eq!(count_params(&r), 853_018);
        let by = |f: &dyn Fn(&LayerSpec) -> bool| -> usize { r.layers.iter().filter(|l| f(l)).map(LayerSpec::param_count).sum() };
        assert_eq!(eligible_sum(&r), 847_872);
        assert_eq!(r.layers[0].param_count(), 432);
        assert_eq!(by(&|l| matches!(l, LayerSpec::BatchNorm { .. })), 4_064);
        assert_eq!(by(&|l| matches!(l, LayerSpec::Fc { .. })), 650);
    }

    #[test]
    fn resnet20_structure() {
        let r = resnet_cifar(20).unwrap();
        let convs = r.layers.iter().filter(|l| matches!(l, LayerSpec::Conv { .. })).count();
        assert_eq!(convs, 1 + 3 * 3 * 2);
        assert!(resnet_cifar(21).is_err());
    }

    #[test]
    fn imagenet_resnets() {
        let r50 = resnet_imagenet(50).unwrap();
        assert_eq!(count_params(&r50), 25_557_032);
        assert_eq!(eligible_sum(&r50), 11_317_248);
        assert_eq!(count_params(&resnet_imagenet(18).unwrap()), 11_689_512);
        assert!(resnet_imagenet(34).is_err());
    }

    #[test]
    fn densenets() {
        let d48 = densenet_bc(40, 48, 0.5).unwrap();
        assert_eq!(count_params(&d48), 2_733_130);
        assert_eq!(eligible_sum(&d48), 18 * 48 * 192 * 9);
        assert_eq!(count_params(&densenet_bc(40, 36, 0.5).unwrap()), 1_542_682);
        assert!(densenet_bc(41, 12, 0.5).is_err());
        assert!(densenet_bc(40, 12, 0.0).is_err());
    }

    #[test]
    fn resnet56_budget_decomposition() {
        let b = csg_budget(&resnet_cifar(56).unwrap(), &CsgConfig::parse("16,16,3,3:128").unwrap()).unwrap();
        assert_eq!(b.csg_total, 347_162);
        assert_eq!((b.o_count, b.g_count, b.c_count), (5_146, 294_912, 47_104));
        assert_eq!(b.slice_count, 368);
        assert_eq!(b.model_bytes_f32, 4 * 347_162);
        assert!(b.warnings.is_empty());
    }

    #[test]
    fn budget_table_values() {
        let s16 = CsgConfig::parse("16,16,3,3:128").unwrap();
        let s12 = CsgConfig::parse("12,12,3,3:72").unwrap();
        let r56 = resnet_cifar(56).unwrap();
        let d48 = densenet_bc(40, 48, 0.5).unwrap();
        let d36 = densenet_bc(40, 36, 0.5).unwrap();
        let r50 = resnet_imagenet(50).unwrap();
        let total = |s: &ArchSpec, c: &CsgConfig| csg_budget(s, c).unwrap().csg_total;
        assert_eq!(total(&r56, &s12), 160_450);
        assert_eq!(total(&r56, &s16.pretrained()), 52_250);
        assert_eq!(total(&d48, &s12), 1_416_394);
        assert_eq!(total(&d48, &s12.pretrained()), 1_323_082);
        assert_eq!(total(&d36, &s12), 842_842);
        assert_eq!(total(&d36, &s12.pretrained()), 749_530);
        assert_eq!(total(&r50, &s16), 15_163_432);
    }

    #[test]
    fn ratios_and_floor_rendering() {
        let r: f64 = 853_018.0 / 347_162.0;
        assert!((r - 2.457118).abs() < 1e-6);
        assert_eq!(floor2(r), 2.45);
        assert_eq!(floor2(2_733_130.0 / 1_416_394.0), 1.92);
        assert_eq!(floor2(25_557_032.0 / 15_163_432.0), 1.68);
        assert_eq!(floor2(2.0), 2.0);
    }

    #[test]
    fn budget_identity_and_scaling() {
        for spec in [resnet_cifar(20).unwrap(), resnet_cifar(56).unwrap(), densenet_bc(40, 36, 0.5).unwrap()] {
            for token in ["16,16,3,3:128", "12,12,3,3:72", "8,4,3,3:10", "5,7,1,3:3"] {
                for pre in [false, true] {
                    let mut cfg = CsgConfig::parse(token).unwrap();
                    cfg.pretrained_csg = pre;
                    let b = csg_budget(&spec, &cfg).unwrap();
                    let g = if pre { 0 } else { b.g_count };
                    assert_eq!(b.csg_total + eligible_sum(&spec), b.original_total + b.c_count + g);

                    let mut tripled = cfg;
                    tripled.n_c *= 3;
                    let t = csg_budget(&spec, &tripled).unwrap();
                    assert_eq!(t.c_count, 3 * b.c_count);
                    assert_eq!(t.g_count, 3 * b.g_count);
                }
            }
        }
    }

    #[test]
    fn non_eligible_layers_only_move_o() {
        let cfg = CsgConfig::parse("16,16,3,3:128").unwrap();
        let base = resnet_cifar(56).unwrap();
        let mut more = base.clone();
        more.layers.extend([LayerSpec::fc(100, 10), LayerSpec::bn(100), LayerSpec::conv(8, 64, 3, false)]);
        let (a, b) = (csg_budget(&base, &cfg).unwrap(), csg_budget(&more, &cfg).unwrap());
        assert_eq!((a.c_count, a.g_count), (b.c_count, b.g_count));
        assert_eq!(b.o_count - a.o_count, 1_100 + 200 + 8 * 64 * 9);
    }

    #[test]
    fn oversize_slice_warns() {
        let spec = ArchSpec::new(
            "tiny",
            vec![LayerSpec::conv(4, 3, 3, false), LayerSpec::conv(4, 4, 3, true), LayerSpec::fc(2, 4)],
        )
        .unwrap();
        let b = csg_budget(&spec, &CsgConfig::parse("16,16,3,3:8").unwrap()).unwrap();
        assert_eq!(b.warnings.len(), 1);
        assert_eq!(b.slice_count, 1);
    }

    #[test]
    fn first_conv_must_not_be_eligible() {
        let err = ArchSpec::new("bad", vec![LayerSpec::conv(4, 3, 3, true)]).unwrap_err();
        assert!(matches!(err, Error::InvalidArch(_)));
        assert!(ArchSpec::new("empty", vec![]).is_err());
        assert!(ArchSpec::new("fc only", vec![LayerSpec::fc(2, 2)]).is_err());
    }

    #[test]
    fn json_round_trip() {
        let r = resnet_cifar(20).unwrap();
        assert_eq!(ArchSpec::from_json(&r.to_json()).unwrap(), r);
        let text = r#"{"name": "toy", "layers": [
            {"kind": "conv", "out_channels": 16, "in_channels": 3, "kernel_h": 3, "kernel_w": 3, "bias": false, "csg_eligible": false},
            {"kind": "batchnorm", "channels": 16},
            {"kind": "fc", "out": 10, "in": 16, "bias": true}
        ]}"#;
        assert_eq!(count_params(&ArchSpec::from_json(text).unwrap()), 432 + 32 + 170);
        assert!(ArchSpec::from_json(r#"{"name": "x", "layers": [{"kind": "pool"}]}"#).is_err());
    }

    #[test]
    fn builtin_names() {
        assert_eq!(count_params(&builtin("resnet56").unwrap()), 853_018);
        assert_eq!(count_params(&builtin("ResNet-50").unwrap()), 25_557_032);
        assert_eq!(count_params(&builtin("densenet-bc-40-36").unwrap()), 1_542_682);
        assert!(builtin("vgg16").is_err());
    }

    #[test]
    fn reference_rows_flag_only_the_known_gaps() {
        let rows = reference_rows().unwrap();
        let bad: Vec<_> = rows.iter().filter(|r| !r.reconciled).map(|r| r.reference).collect();
        assert_eq!(bad, vec![904_906, 15_995_176, 10_371_368]);
        let table = reference_table(&rows);
        assert_eq!(table.matches("UNRECONCILED").count(), 3);
    }

    #[test]
    fn pointwise_policy() {
        let p = PointwisePolicy::derived_from(SliceShape::new([12, 12, 3, 3]).unwrap());
        assert_eq!(p.slice_shape.dims(), [12, 12, 1, 1]);
        assert_eq!(p.n_c, 8);
    }
}
