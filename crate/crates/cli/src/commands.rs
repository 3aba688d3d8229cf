use std::fs;
use std::path::{Path, PathBuf};

use csg_core::arch::{budget_table, builtin, reference_rows, reference_table};
use csg_core::csg::{encode_filterset, CsgEncoder};
use csg_core::dct::{estimate_code_size, EstimateConfig};
use csg_core::io::{read_file, write_stack_file, write_tensor_file, Payload};
use csg_core::train::{build_cnn, toy_csg_model, toy_widths, train, Dataset, DatasetStats, TrainConfig};
use csg_core::{
    count_params, csg_budget, generate_filterset, init_csg, partition, reassemble, ArchSpec, CodeVector, CsgConfig,
    CsgMatrix, Error, SliceGrid, SliceShape, Tensor4,
};
use serde::Serialize;

use crate::{Cli, Command, CountArgs, EncodeArgs, EstimateArgs, GenArgs, InitArgs, ReconstructArgs, SliceArgs, TrainArgs, Variant};

#[derive(Debug, thiserror::Error)]
pub enum Failure {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] Error),
}

type Outcome = Result<(), Failure>;

pub fn run(cli: &Cli) -> Outcome {
    match &cli.command {
        Command::EstimateCodesize(a) => estimate(cli, a),
        Command::CountParams(a) => count(cli, a),
        Command::Slice(a) => slice(cli, a),
        Command::Reconstruct(a) => reconstruct(cli, a),
        Command::GenFilters(a) => gen_filters(cli, a),
        Command::Encode(a) => encode(cli, a),
        Command::InitCsg(a) => init(cli, a),
        Command::TrainDemo(a) => train_demo(cli, a),
    }
}

fn emit<T: Serialize>(cli: &Cli, value: &T, table: impl FnOnce() -> String) -> Outcome {
    if cli.json {
        println!("{}", serde_json::to_string_pretty(value).map_err(Error::from)?);
    } else {
        print!("{}", table());
    }
    Ok(())
}

fn required_out(cli: &Cli) -> Result<&Path, Failure> {
    cli.out.as_deref().ok_or_else(|| Failure::Usage("this command needs --out PATH".into()))
}

fn slice_shape(text: &str) -> Result<SliceShape, Failure> {
    text.parse().map_err(|e: Error| Failure::Usage(e.to_string()))
}

fn read_grid(path: &Path) -> Result<SliceGrid, Failure> {
    let text = fs::read_to_string(path).map_err(Error::from)?;
    Ok(serde_json::from_str(&text).map_err(Error::from)?)
}

fn write_text(path: &Path, text: &str) -> Result<(), Failure> {
    fs::write(path, text).map_err(Error::from)?;
    Ok(())
}

fn estimate(cli: &Cli, a: &EstimateArgs) -> Outcome {
    let ss = slice_shape(&a.slice_shape)?;
    let cfg = EstimateConfig { target_psnr_db: a.target_psnr, tolerance_db: a.tolerance, cap_db: a.cap, ..EstimateConfig::new(ss) };
    cfg.validate()?;
    let corpus = match read_file(&a.corpus)?.payload {
        Payload::Stack(s) => s,
        Payload::Tensor(t) => partition(&t, ss)?.1,
    };
    let est = estimate_code_size(&corpus, &cfg)?;
    if let Some(out) = &cli.out {
        write_text(out, &est.report.to_csv())?;
    }
    emit(cli, &est, || {
        format!(
            "slices            {}\nslice shape       {}\nthreshold tau     {}\nmean PSNR* (dB)   {:.4}\nmean retained     {:.4}\nrecommended n_c   {}\nn_c (18x rule)    {}\n",
            est.report.retained.len(),
            est.slice_shape,
            est.report.tau,
            est.report.mean_psnr_db,
            est.report.mean_retained,
            est.recommended_nc,
            est.nc_18
        )
    })
}

#[derive(Serialize)]
struct ArchCount {
    name: String,
    total: usize,
}

fn load_arch(name: &str) -> Result<ArchSpec, Failure> {
    if Path::new(name).is_file() {
        Ok(ArchSpec::load(name)?)
    } else {
        builtin(name).map_err(|e| Failure::Usage(e.to_string()))
    }
}

fn count(cli: &Cli, a: &CountArgs) -> Outcome {
    if a.table1 {
        let rows = reference_rows()?;
        for r in rows.iter().filter(|r| !r.reconciled) {
            eprintln!("note: {} computes {} under the documented policy, reference lists {}", r.label, r.computed, r.reference);
        }
        return emit(cli, &rows, || reference_table(&rows));
    }
    let name = a.arch.as_deref().expect("clap requires arch without --table1");
    let spec = load_arch(name)?;
    let Some(token) = &a.csg else {
        let c = ArchCount { name: spec.name.clone(), total: count_params(&spec) };
        return emit(cli, &c, || format!("{}  {}\n", c.name, c.total));
    };
    let mut cfg = CsgConfig::parse(token).map_err(|e| Failure::Usage(e.to_string()))?;
    if a.pretrained_csg {
        cfg = cfg.pretrained();
    }
    if a.compress_1x1 {
        cfg = cfg.with_compressed_1x1();
    }
    let budget = csg_budget(&spec, &cfg)?;
    for w in &budget.warnings {
        eprintln!("warning: {w}");
    }
    if let Some(out) = &cli.out {
        write_text(out, &serde_json::to_string_pretty(&budget).map_err(Error::from)?)?;
    }
    emit(cli, &budget, || budget_table(&spec.name, &budget))
}

#[derive(Serialize)]
struct TensorSummary {
    path: PathBuf,
    shape: [usize; 4],
    slices: usize,
}

fn slice(cli: &Cli, a: &SliceArgs) -> Outcome {
    let out = required_out(cli)?;
    let ss = slice_shape(&a.slice_shape)?;
    let file = read_file(&a.filters)?;
    let dtype = file.dtype;
    let filters = file.into_tensor()?;
    let (grid, slices) = partition(&filters, ss)?;
    write_stack_file(out, &slices, dtype)?;
    write_text(&a.grid, &serde_json::to_string_pretty(&grid).map_err(Error::from)?)?;
    emit(cli, &grid, || {
        format!("{} slices of {} from {:?} -> {}\n", grid.slice_count(), ss, filters.shape(), out.display())
    })
}

fn reconstruct(cli: &Cli, a: &ReconstructArgs) -> Outcome {
    let out = required_out(cli)?;
    let grid = read_grid(&a.grid)?;
    let file = read_file(&a.corpus)?;
    let dtype = file.dtype;
    let slices = file.into_stack()?;
    let filters = reassemble(&grid, &slices)?;
    write_tensor_file(out, &filters, dtype)?;
    let s = TensorSummary { path: out.to_path_buf(), shape: filters.shape(), slices: slices.len() };
    emit(cli, &s, || format!("filters {:?} from {} slices -> {}\n", s.shape, s.slices, s.path.display()))
}

fn gen_filters(cli: &Cli, a: &GenArgs) -> Outcome {
    let out = required_out(cli)?;
    let grid = read_grid(&a.grid)?;
    let wfile = read_file(&a.weights)?;
    let dtype = wfile.dtype;
    let g = CsgMatrix::from_tensor(&wfile.into_tensor()?, grid.slice_shape())?;
    let codes = read_file(&a.codes)?
        .into_stack()?
        .iter()
        .map(CodeVector::from_tensor)
        .collect::<Result<Vec<_>, _>>()?;
    let filters = generate_filterset(&g, &codes, &grid)?;
    write_tensor_file(out, &filters, dtype)?;
    let s = TensorSummary { path: out.to_path_buf(), shape: filters.shape(), slices: codes.len() };
    emit(cli, &s, || format!("filters {:?} from {} codes -> {}\n", s.shape, s.slices, s.path.display()))
}

#[derive(Serialize)]
struct EncodeSummary {
    path: PathBuf,
    slices: usize,
    code_len: usize,
    condition_number: f64,
    grid: SliceGrid,
}

fn encode(cli: &Cli, a: &EncodeArgs) -> Outcome {
    let out = required_out(cli)?;
    let ss = slice_shape(&a.slice_shape)?;
    let g = CsgMatrix::from_tensor(&read_file(&a.weights)?.into_tensor()?, ss)?;
    let file = read_file(&a.filters)?;
    let dtype = file.dtype;
    let filters = file.into_tensor()?;
    let condition_number = CsgEncoder::new(&g)?.condition_number();
    let (grid, codes) = encode_filterset(&g, &filters)?;
    let bank: Vec<Tensor4> = codes.iter().map(CodeVector::to_tensor).collect();
    write_stack_file(out, &bank, dtype)?;
    if let Some(path) = &a.grid {
        write_text(path, &serde_json::to_string_pretty(&grid).map_err(Error::from)?)?;
    }
    let s = EncodeSummary { path: out.to_path_buf(), slices: codes.len(), code_len: g.code_len(), condition_number, grid };
    emit(cli, &s, || {
        format!(
            "{} codes of length {} (generator condition number {:.3e}) -> {}\n",
            s.slices,
            s.code_len,
            s.condition_number,
            s.path.display()
        )
    })
}

#[derive(Serialize)]
struct InitSummary {
    path: PathBuf,
    slice_shape: SliceShape,
    n_c: usize,
    param_count: usize,
    seed: u64,
}

fn init(cli: &Cli, a: &InitArgs) -> Outcome {
    let out = required_out(cli)?;
    let ss = slice_shape(&a.slice_shape)?;
    let g = init_csg(ss, a.nc, cli.seed)?;
    write_tensor_file(out, &g.to_tensor(), a.dtype.into())?;
    let s = InitSummary { path: out.to_path_buf(), slice_shape: ss, n_c: a.nc, param_count: g.param_count(), seed: cli.seed };
    emit(cli, &s, || format!("generator {} x {} ({} params) -> {}\n", ss.element_count(), s.n_c, s.param_count, s.path.display()))
}

/// Everything `train-demo` reports; the values are the library's own.
#[derive(Serialize)]
struct TrainReport {
    variant: &'static str,
    freeze_csg: bool,
    seed: u64,
    config: TrainConfig,
    dataset: DatasetStats,
    trainable_params: usize,
    final_loss: f64,
    iterations: usize,
    converged: bool,
}

fn train_demo(cli: &Cli, a: &TrainArgs) -> Outcome {
    if a.freeze_csg && a.variant == Variant::Cnn {
        return Err(Failure::Usage("--freeze-csg needs the cnn-csg variant".into()));
    }
    let cfg = TrainConfig {
        loss: a.loss.into(),
        learning_rate: a.lr,
        batch_size: a.batch,
        max_iterations: a.iters,
        target_loss: a.epsilon,
        seed: cli.seed,
    };
    cfg.validate()?;
    let data = Dataset::separable_toy(a.points, toy_widths().height, a.margin, cli.seed)?;
    let dataset = data.stats()?;
    let mut model = match a.variant {
        Variant::Cnn => build_cnn(toy_widths(), cli.seed)?,
        Variant::CnnCsg => toy_csg_model(cli.seed, a.freeze_csg)?,
    };
    let trainable_params = model.trainable_count();
    let curve = train(&mut model, &data, &cfg)?;
    if let Some(out) = &cli.out {
        write_text(out, &curve.to_csv())?;
    }
    let r = TrainReport {
        variant: match a.variant {
            Variant::Cnn => "cnn",
            Variant::CnnCsg => "cnn-csg",
        },
        freeze_csg: a.freeze_csg,
        seed: cli.seed,
        config: cfg,
        dataset,
        trainable_params,
        final_loss: curve.final_loss,
        iterations: curve.iterations,
        converged: curve.converged(cfg.target_loss),
    };
    emit(cli, &r, || {
        format!(
            "final loss        {}\niterations        {}\nconverged         {}\ndelta             {}\ntrainable params  {}\n",
            r.final_loss, r.iterations, r.converged, r.dataset.delta, r.trainable_params
        )
    })
}
