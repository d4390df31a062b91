use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use trianglenet::checkpoint::Checkpoint;
use trianglenet::data::{self, DatasetSpec};
use trianglenet::metrics::{argmax_labels, MULTISCALE_SCALES};
use trianglenet::model::TriangleNet;
use trianglenet::optim::WeightGrid;
use trianglenet::train::{self, RunOptions, TrainConfig, CONFIG_JSON};
use trianglenet::verify;
use trianglenet::{Error, Result, Tape};

#[derive(Parser)]
#[command(name = "trianglenet", version, about = "Joint segmentation and semantic edge training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic shapes dataset.
    GenData(GenDataArgs),
    /// Train a model; trailing `--key.path=value` flags override the config.
    Train(TrainArgs),
    /// Score a checkpoint on a split and print a JSON report.
    Eval(EvalArgs),
    /// Predict labels and edge maps for one PPM image.
    Infer(InferArgs),
    /// Finite-difference check of every op and loss.
    Gradcheck(GradcheckArgs),
    /// Rank loss-weight combinations by validation mIoU.
    GridSearch(GridArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = DatasetSpec::default().train)]
    train: usize,
    #[arg(long, default_value_t = DatasetSpec::default().val)]
    val: usize,
    #[arg(long, default_value_t = DatasetSpec::default().test)]
    test: usize,
    #[arg(long, default_value_t = DatasetSpec::default().size)]
    size: usize,
    #[arg(long, default_value_t = DatasetSpec::default().num_classes)]
    classes: usize,
    #[arg(long, default_value_t = DatasetSpec::default().noise_sigma)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    /// JSON config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Write into this directory instead of a fresh timestamped one.
    #[arg(long)]
    run_dir: Option<PathBuf>,
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
    overrides: Vec<String>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Defaults to the config.json next to the checkpoint.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "val")]
    split: String,
    #[arg(long)]
    multiscale: bool,
    /// Also write the report here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long)]
    multiscale: bool,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct GridArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_values_t = WeightGrid::default().c_s)]
    c_s: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_values_t = WeightGrid::default().c_e)]
    c_e: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_values_t = WeightGrid::default().c_c)]
    c_c: Vec<f64>,
    /// Iterations per cell; defaults to the config's total_iters.
    #[arg(long)]
    budget_iters: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
    overrides: Vec<String>,
}

fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<TrainConfig> {
    match path {
        Some(p) => TrainConfig::load(p, overrides),
        None => TrainConfig::from_json_with_overrides("{}", overrides),
    }
}

fn config_for_checkpoint(ckpt: &Path, explicit: Option<&Path>) -> Result<TrainConfig> {
    let path = match explicit {
        Some(p) => p.to_path_buf(),
        None => ckpt.parent().unwrap_or(Path::new(".")).join(CONFIG_JSON),
    };
    TrainConfig::load(&path, &[])
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let spec = DatasetSpec {
        train: a.train,
        val: a.val,
        test: a.test,
        size: a.size,
        num_classes: a.classes,
        noise_sigma: a.noise,
        seed: a.seed,
    };
    data::generate(&spec, &a.out)?;
    println!("wrote {} images to {}", a.train + a.val + a.test, a.out.display());
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let cfg = load_config(a.config.as_deref(), &a.overrides)?;
    let summary = train::run_training(
        &cfg,
        &RunOptions {
            run_dir: a.run_dir,
            resume: a.resume,
        },
    )?;
    if let Some(last) = summary.last {
        println!("iter {} total {}", last.iter, last.losses.total);
    }
    println!("run_dir {}", summary.run_dir.display());
    Ok(())
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let cfg = config_for_checkpoint(&a.checkpoint, a.config.as_deref())?;
    let samples = data::load_split(&cfg.data_dir, &a.split, cfg.model.num_classes)?;
    let report = train::eval_report(&cfg, &ckpt.params, &a.split, &samples, a.multiscale)?;
    let json = serde_json::to_string_pretty(&report).expect("report serialises");
    if let Some(out) = &a.out {
        write_text(out, &json)?;
    }
    println!("{json}");
    Ok(())
}

fn to_bytes(values: &[f64]) -> Vec<u8> {
    values.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
}

fn infer_cmd(a: InferArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let cfg = config_for_checkpoint(&a.checkpoint, a.config.as_deref())?;
    let net = TriangleNet::new(cfg.model)?;
    net.check_parameters(&ckpt.params)?;
    let image = data::normalize(&data::read_ppm(&a.image)?);
    let (_, _, h, w) = image.dims4()?;

    let tape = Tape::new();
    let bound = ckpt.params.bind(&tape, false);
    let out = net.forward_full(&bound, tape.constant(image.clone()))?;
    let s = if a.multiscale {
        trianglenet::metrics::multiscale_infer(&net, &ckpt.params, &image, &MULTISCALE_SCALES)?
    } else {
        out.s.value().as_ref().clone()
    };
    fs::create_dir_all(&a.out_dir).map_err(|e| Error::Io {
        path: a.out_dir.clone(),
        source: e,
    })?;
    let pred = &argmax_labels(&s)?[0];
    data::write_pgm(&a.out_dir.join("pred.pgm"), pred)?;
    let plane = h * w;
    let mut maps = vec![("C", out.c.value())];
    if let Some(e) = out.e {
        maps.push(("E", e.value()));
    }
    for (tag, m) in maps {
        for (k, chunk) in m.data().chunks(plane).enumerate() {
            data::write_pgm_bytes(&a.out_dir.join(format!("{tag}_{k}.pgm")), h, w, &to_bytes(chunk))?;
        }
    }
    println!("wrote predictions to {}", a.out_dir.display());
    Ok(())
}

fn gradcheck_cmd(a: GradcheckArgs) -> Result<()> {
    let results = verify::gradient_suite(a.seed)?;
    print!("{}", verify::format_table(&results));
    let failed = results.iter().filter(|r| !r.report.passed).count();
    if failed > 0 {
        return Err(Error::Contract(format!("{failed} gradient checks failed")));
    }
    Ok(())
}

fn grid_cmd(a: GridArgs) -> Result<()> {
    let cfg = load_config(a.config.as_deref(), &a.overrides)?;
    let grid = WeightGrid {
        c_s: a.c_s,
        c_e: a.c_e,
        c_c: a.c_c,
    };
    let train_split = data::load_split(&cfg.data_dir, &cfg.train_split, cfg.model.num_classes)?;
    let val = data::load_split(&cfg.data_dir, &cfg.val_split, cfg.model.num_classes)?;
    let budget = a.budget_iters.unwrap_or(cfg.total_iters);
    let rows = train::grid_search(&cfg, &grid, budget, &train_split, &val)?;
    train::write_grid_csv(&rows, &a.out)?;
    println!("{}", train::GRID_CSV_HEADER);
    for r in &rows {
        println!("{}", r.csv_row());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Infer(a) => infer_cmd(a),
        Command::Gradcheck(a) => gradcheck_cmd(a),
        Command::GridSearch(a) => grid_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let message = e.to_string().replace('\n', " ");
            eprintln!("error: class={} message={}", e.class(), message);
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
