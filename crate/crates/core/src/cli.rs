//! Command-line interface. Exit codes: 0 success, 2 usage, 3 data or
//! fingerprint problems, 4 numeric divergence.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::artifact::{
    bench_load, hex, load_and_apply, read_artifact, save_artifact, size_report, write_full_checkpoint,
    ApplyOptions, ResidentBase, ARTIFACT_MAGIC,
};
use crate::calib::{read_token_file, CalibConfig, CalibSource};
use crate::error::{Error, Result};
use crate::fit::{end_loss, run_pipeline, PipelineConfig, SelectBy, TeacherLogits};
use crate::model::{synth_finetune, DeltaAxis, DeltaProfile, ModelSpec, TapPoint, ToyModel};
use crate::report::{AxisStats, LayerReport};
use crate::tensor::container::HALF_CONTAINER_MAGIC;
use crate::tensor::{read_container, write_container};

#[derive(Debug, Parser)]
#[command(
    name = "axdelta",
    version,
    about = "1-bit sign-mask deltas with per-axis FP16 scales"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Compress a fine-tuned model into a delta artifact over its base.
    Compress(CompressArgs),
    /// Apply an artifact to a base and write the patched container.
    Apply(ApplyArgs),
    /// End loss of base+artifact against the fine-tuned model.
    Eval(EvalArgs),
    /// Time delta application against loading a full FP16 checkpoint.
    BenchLoad(BenchArgs),
    /// Row/col counts of an artifact or layer report.
    Inspect(InspectArgs),
    /// Write a toy base model and a synthetic fine-tune of it.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct CalibArgs {
    /// Calibration token file (one sequence per line); synthetic if absent.
    #[arg(long)]
    pub calib: Option<PathBuf>,
    /// Train batches for per-layer fitting.
    #[arg(long, default_value_t = 50, value_parser = positive_usize)]
    pub calib_train: usize,
    /// Validation batches; defaults to ceil(calib-train / 4).
    #[arg(long, value_parser = positive_usize)]
    pub calib_val: Option<usize>,
    #[arg(long, default_value_t = 4, value_parser = positive_usize)]
    pub batch_size: usize,
    /// Sequence length of synthetic batches.
    #[arg(long, default_value_t = 16, value_parser = positive_usize)]
    pub seq_len: usize,
    #[arg(long, env = "AXDELTA_SEED", default_value_t = 0)]
    pub seed: u64,
}

impl CalibArgs {
    fn config(&self) -> CalibConfig {
        CalibConfig {
            train_batches: self.calib_train,
            val_batches: self.calib_val,
            batch_size: self.batch_size,
            seq_len: self.seq_len,
            seed: self.seed,
            spill: None,
        }
    }

    fn source(&self, vocab: usize) -> Result<CalibSource> {
        match &self.calib {
            Some(path) => read_token_file(path, self.batch_size),
            None => Ok(self.config().source_for(vocab)),
        }
    }
}

#[derive(Debug, Args)]
pub struct CompressArgs {
    #[arg(long)]
    pub base: PathBuf,
    #[arg(long)]
    pub finetuned: PathBuf,
    /// Artifact path; the report goes next to it as `<stem>.report.txt`.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1e-4, value_parser = positive_f32)]
    pub lr: f32,
    #[arg(long, default_value_t = 5, value_parser = positive_usize)]
    pub epochs: usize,
    /// End-to-end refinement batches.
    #[arg(long, default_value_t = 150)]
    pub calib_e2e: usize,
    #[arg(long, default_value_t = 1)]
    pub e2e_epochs: usize,
    #[arg(long, default_value_t = 1e-5, value_parser = positive_f32)]
    pub e2e_lr: f32,
    /// Axis selection criterion: end or layer.
    #[arg(long, default_value = "end")]
    pub select_by: SelectBy,
    /// One scalar per matrix, trained for one epoch.
    #[arg(long)]
    pub scalar_baseline: bool,
    #[command(flatten)]
    pub calib: CalibArgs,
}

#[derive(Debug, Args)]
pub struct ApplyArgs {
    #[arg(long)]
    pub base: PathBuf,
    #[arg(long)]
    pub artifact: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Apply even if the artifact was made against a different base.
    #[arg(long)]
    pub skip_fingerprint: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub base: PathBuf,
    #[arg(long)]
    pub artifact: PathBuf,
    #[arg(long)]
    pub finetuned: PathBuf,
    #[command(flatten)]
    pub calib: CalibArgs,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub base: PathBuf,
    #[arg(long)]
    pub artifact: PathBuf,
    /// Fine-tuned model, as a TNC1 container or an FP16 TNH1 checkpoint.
    #[arg(long)]
    pub finetuned: PathBuf,
    /// Where to write the FP16 checkpoint when `--finetuned` is TNC1.
    /// Defaults to a file in the system temp directory, removed afterwards.
    #[arg(long)]
    pub full_out: Option<PathBuf>,
    #[arg(long, default_value_t = 10, value_parser = positive_usize)]
    pub runs: usize,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    /// A delta artifact or a layer report.
    pub path: PathBuf,
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out_base: PathBuf,
    #[arg(long)]
    pub out_finetuned: PathBuf,
    /// row, col or isotropic.
    #[arg(long, default_value = "row")]
    pub axis: DeltaAxis,
    #[arg(long, default_value_t = 0.02)]
    pub magnitude: f32,
    #[arg(long, default_value_t = 0)]
    pub model_seed: u64,
    #[arg(long, default_value_t = 1)]
    pub delta_seed: u64,
    #[arg(long, default_value_t = 2, value_parser = positive_usize)]
    pub layers: usize,
}

fn positive_usize(s: &str) -> std::result::Result<usize, String> {
    match s.parse::<usize>() {
        Ok(0) => Err("must be at least 1".into()),
        Ok(n) => Ok(n),
        Err(e) => Err(e.to_string()),
    }
}

fn positive_f32(s: &str) -> std::result::Result<f32, String> {
    match s.parse::<f32>() {
        Ok(x) if x > 0.0 && x.is_finite() => Ok(x),
        Ok(x) => Err(format!("must be a positive number, got {x}")),
        Err(e) => Err(e.to_string()),
    }
}

/// Parses `args` (including the program name) and runs the command, writing
/// normal output to `out`. Returns the process exit code.
pub fn main_with<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let text = e.render().to_string();
            let _ = if code == 0 {
                out.write_all(text.as_bytes())
            } else {
                err.write_all(text.as_bytes())
            };
            return code;
        }
    };
    match run(cli.command, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(command: Command, out: &mut dyn Write) -> Result<()> {
    match command {
        Command::Compress(a) => compress(a, out),
        Command::Apply(a) => apply(a, out),
        Command::Eval(a) => eval(a, out),
        Command::BenchLoad(a) => bench(a, out),
        Command::Inspect(a) => inspect(a, out),
        Command::Synth(a) => synth(a, out),
    }
}

fn load_model(path: &Path) -> Result<ToyModel> {
    ToyModel::from_owned_container(read_container(path)?)
}

fn emit(out: &mut dyn Write, text: &str) -> Result<()> {
    out.write_all(text.as_bytes())
        .map_err(|e| Error::io("<stdout>", e))
}

/// `d.dlt` → `d.report.txt`.
pub fn report_path(artifact: &Path) -> PathBuf {
    artifact.with_extension("report.txt")
}

fn compress(a: CompressArgs, out: &mut dyn Write) -> Result<()> {
    let base = load_model(&a.base)?;
    let finetuned = load_model(&a.finetuned)?;
    let mut cfg = PipelineConfig {
        calib: a.calib.config(),
        source: Some(a.calib.source(base.spec().vocab)?),
        ..PipelineConfig::default()
    };
    cfg.compress.fit.adam.lr = a.lr;
    cfg.compress.fit.epochs = a.epochs;
    cfg.compress.select_by = a.select_by;
    cfg.compress.scalar_baseline = a.scalar_baseline;
    cfg.e2e.adam.lr = a.e2e_lr;
    cfg.e2e.epochs = a.e2e_epochs;
    cfg.e2e.batches = a.calib_e2e;

    let result = run_pipeline(&base, &finetuned, &cfg)?;
    let bytes = save_artifact(&a.out, &result.artifact)?;
    let report_file = report_path(&a.out);
    LayerReport::from_pipeline(&result).write(&report_file)?;
    let sizes = size_report(&result.artifact, &base);
    emit(
        out,
        &format!(
            "artifact {} ({bytes} bytes, {:.2}x vs fp16 checkpoint, {:.2}x on patched layers)\n\
             report {}\n\
             end loss: base {:.6e} stacked {:.6e} final {:.6e}\n",
            a.out.display(),
            sizes.ratio,
            sizes.patched_ratio,
            report_file.display(),
            result.base_end_loss,
            result.stacked_end_loss,
            result.final_end_loss
        ),
    )
}

fn apply(a: ApplyArgs, out: &mut dyn Write) -> Result<()> {
    let base = ResidentBase::new(load_model(&a.base)?);
    let (model, timing) = load_and_apply(
        &base,
        &a.artifact,
        ApplyOptions {
            skip_fingerprint: a.skip_fingerprint,
        },
    )?;
    write_container(&a.out, &model.to_container())?;
    emit(
        out,
        &format!(
            "wrote {} (read {:.6}s decode {:.6}s install {:.6}s, {} bytes)\n",
            a.out.display(),
            timing.read.as_secs_f64(),
            timing.decode.as_secs_f64(),
            timing.install.as_secs_f64(),
            timing.bytes_read
        ),
    )
}

fn eval(a: EvalArgs, out: &mut dyn Write) -> Result<()> {
    let base = ResidentBase::new(load_model(&a.base)?);
    let finetuned = load_model(&a.finetuned)?;
    let (student, _) = load_and_apply(&base, &a.artifact, ApplyOptions::default())?;
    let artifact = read_artifact(&a.artifact)?;
    let cfg = a.calib.config();
    cfg.validate()?;
    let source = a.calib.source(base.model().spec().vocab)?;
    let batches = source.batches(cfg.val_range())?;

    let taps: Vec<TapPoint> = artifact
        .records
        .iter()
        .map(|r| Ok(TapPoint::output(student.resolve(&r.name)?)))
        .collect::<Result<_>>()?;
    let mut sq = vec![0.0f64; taps.len()];
    let mut count = vec![0usize; taps.len()];
    for batch in &batches {
        let s = student.forward(batch, &taps)?;
        let t = finetuned.forward(batch, &taps)?;
        for (k, tap) in taps.iter().enumerate() {
            let d = s.captures[tap].dist_sq(&t.captures[tap])?;
            sq[k] += d;
            count[k] += s.captures[tap].len();
        }
    }
    let teacher = TeacherLogits::compute(&finetuned, batches)?;
    let loss = end_loss(&student, &teacher)?;
    let base_loss = end_loss(base.model(), &teacher)?;
    let mut text = format!(
        "end_loss {loss:.6e} over {} held-out batches (base alone {base_loss:.6e})\n",
        teacher.len()
    );
    for ((r, s), n) in artifact.records.iter().zip(&sq).zip(&count) {
        text.push_str(&format!(
            "layer {} axis={} val_mse={:.6e}\n",
            r.name,
            r.axis(),
            s / (*n).max(1) as f64
        ));
    }
    emit(out, &text)
}

fn bench(a: BenchArgs, out: &mut dyn Write) -> Result<()> {
    let base = ResidentBase::new(load_model(&a.base)?);
    let head = read_magic(&a.finetuned)?;
    let (full_path, temporary) = if head == HALF_CONTAINER_MAGIC {
        (a.finetuned.clone(), false)
    } else {
        let path = match &a.full_out {
            Some(p) => p.clone(),
            None => std::env::temp_dir().join(format!("axdelta-full-{}.tnh", std::process::id())),
        };
        write_full_checkpoint(&path, &load_model(&a.finetuned)?)?;
        (path, a.full_out.is_none())
    };
    let report = bench_load(&base, &a.artifact, &full_path, a.runs);
    if temporary {
        let _ = fs::remove_file(&full_path);
    }
    emit(out, &report?.to_text())
}

fn read_magic(path: &Path) -> Result<[u8; 4]> {
    use std::io::Read;
    let mut f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut head = [0u8; 4];
    f.read_exact(&mut head).map_err(|e| Error::io(path, e))?;
    Ok(head)
}

fn inspect(a: InspectArgs, out: &mut dyn Write) -> Result<()> {
    let bytes = fs::read(&a.path).map_err(|e| Error::io(&a.path, e))?;
    let stats = if bytes.starts_with(&ARTIFACT_MAGIC) {
        let artifact = crate::artifact::DeltaArtifact::decode(&bytes)?;
        if !a.json {
            emit(
                out,
                &format!(
                    "artifact {} records, base {}\n",
                    artifact.records.len(),
                    hex(&artifact.base_fingerprint)
                ),
            )?;
        }
        AxisStats::from_artifact(&artifact)?
    } else {
        let text = String::from_utf8(bytes)
            .map_err(|_| Error::Input(format!("{}: neither an artifact nor a report", a.path.display())))?;
        AxisStats::from_report(&LayerReport::parse(&text)?)?
    };
    if a.json {
        emit(out, &(stats.to_json() + "\n"))
    } else {
        emit(out, &stats.to_text())
    }
}

fn synth(a: SynthArgs, out: &mut dyn Write) -> Result<()> {
    let spec = ModelSpec {
        n_layers: a.layers,
        seed: a.model_seed,
        ..ModelSpec::default()
    };
    let base = ToyModel::init_base(spec)?;
    let ft = synth_finetune(
        &base,
        DeltaProfile {
            axis: a.axis,
            magnitude: a.magnitude,
            seed: a.delta_seed,
        },
    )?;
    write_container(&a.out_base, &base.to_container())?;
    write_container(&a.out_finetuned, &ft.model.to_container())?;
    emit(
        out,
        &format!(
            "base {} fingerprint {}\nfinetuned {}\n",
            a.out_base.display(),
            hex(&base.fingerprint()),
            a.out_finetuned.display()
        ),
    )
}
