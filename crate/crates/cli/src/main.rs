//! `dpcc`: train, encode, decode and evaluate the diffusion point cloud codec.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};

use dpcc_core::evaluation::{
    bd_psnr, bd_rate, compute_bpp, evaluate_codec, load_rd_csv, rd_plot_svg, save_rd_csv,
    EvalOptions, RdPoint,
};
use dpcc_core::geometry::{load_pointcloud, save_pointcloud, PointCloud};
use dpcc_core::training::{prepare_dataset, train};
use dpcc_core::{decode, encode, CodecModel, EncodeOptions, RunConfig};

#[derive(Parser)]
#[command(name = "dpcc", version, about = "Diffusion-decoded point cloud geometry codec")]
struct Cli {
    /// More log output; repeat for more detail.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model on a folder of PLY files.
    Train {
        /// Folder of ASCII PLY files.
        #[arg(long)]
        data: PathBuf,
        /// Flat TOML run configuration.
        #[arg(long)]
        config: PathBuf,
        /// Output folder for metrics and checkpoints.
        #[arg(long)]
        out: PathBuf,
        /// Overrides the seed from the configuration.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Compress a PLY file into a .dpcc container.
    Encode {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Decoder seed stored in the container.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Class label stored in the container.
        #[arg(long)]
        label: Option<u32>,
    },
    /// Reconstruct a PLY file from a .dpcc container.
    Decode {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Rate-distortion report over a folder of PLY files, one row per model.
    Eval {
        #[arg(long)]
        data: PathBuf,
        /// Checkpoints, comma separated; each row uses the lambda stored in
        /// its checkpoint.
        #[arg(long, value_delimiter = ',', required = true)]
        models: Vec<PathBuf>,
        /// CSV report; the plot is written next to it as .svg.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// PSNR peak value.
        #[arg(long, default_value_t = 1.0)]
        peak: f64,
        /// Measure distortion in original rather than normalized coordinates.
        #[arg(long)]
        original_space: bool,
    },
    /// Bjøntegaard deltas of a test curve against an anchor curve.
    Bdmetrics {
        #[arg(long)]
        anchor: PathBuf,
        #[arg(long)]
        test: PathBuf,
    },
}

fn load_folder(dir: &Path) -> anyhow::Result<Vec<PointCloud>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("reading data folder {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("ply")))
        .collect();
    paths.sort();
    if paths.is_empty() {
        bail!(dpcc_core::Error::InvalidInput(format!(
            "no .ply files in {}",
            dir.display()
        )));
    }
    paths
        .iter()
        .map(|p| load_pointcloud(p).with_context(|| format!("loading {}", p.display())))
        .collect()
}

fn load_model(path: &Path) -> anyhow::Result<CodecModel> {
    CodecModel::load(path).with_context(|| format!("loading model {}", path.display()))
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Train { data, config, out, seed } => {
            let mut cfg = RunConfig::load(&config)
                .with_context(|| format!("reading config {}", config.display()))?;
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            let clouds = load_folder(&data)?;
            let dataset = prepare_dataset(&clouds, cfg.points_per_cloud, cfg.seed)?;
            let mut model = CodecModel::new(cfg.clone(), dpcc_core::DType::F32, cfg.seed)?;
            std::fs::create_dir_all(&out)
                .with_context(|| format!("creating {}", out.display()))?;
            std::fs::write(out.join("config.toml"), cfg.to_toml())?;
            let report = train(&mut model, &dataset, cfg.seed, Some(&out), |r| {
                println!(
                    "step {} loss {:.6} d_mse {:.6} d_cd {:.6} bpp_est {:.4}",
                    r.step, r.loss, r.d_mse, r.d_cd, r.bpp_est
                )
            })?;
            for path in &report.checkpoints {
                println!("checkpoint {}", path.display());
            }
        }
        Command::Encode { input, model, output, seed, label } => {
            let model = load_model(&model)?;
            let cloud = load_pointcloud(&input)
                .with_context(|| format!("loading {}", input.display()))?;
            let enc = encode(&model, &cloud, &EncodeOptions { seed, label })?;
            std::fs::write(&output, &enc.bytes)
                .with_context(|| format!("writing {}", output.display()))?;
            println!("points {}", enc.points);
            println!("bytes {}", enc.bytes.len());
            println!("bpp {}", compute_bpp(&enc.bytes, enc.points)?);
            println!("shape_bits {}", enc.stream_bits.shape);
            println!("hyper_bits {}", enc.stream_bits.hyper);
            println!("detail_bits {}", enc.stream_bits.detail);
        }
        Command::Decode { input, model, output } => {
            let model = load_model(&model)?;
            let bytes = std::fs::read(&input)
                .with_context(|| format!("reading {}", input.display()))?;
            let dec = decode(&model, &bytes)?;
            save_pointcloud(&dec.cloud, &output)
                .with_context(|| format!("writing {}", output.display()))?;
            println!("points {}", dec.cloud.len());
        }
        Command::Eval { data, models, out, seed, peak, original_space } => {
            let clouds = load_folder(&data)?;
            let loaded: Vec<CodecModel> = models
                .iter()
                .map(|p| load_model(p))
                .collect::<anyhow::Result<_>>()?;
            let pairs: Vec<(f64, &CodecModel)> =
                loaded.iter().map(|m| (m.config().lambda, m)).collect();
            let opts = EvalOptions { seed, peak, original_space };
            let report = evaluate_codec(&pairs, &clouds, &opts)?;
            save_rd_csv(&report.rows, &out)
                .with_context(|| format!("writing {}", out.display()))?;
            let points: Vec<RdPoint> = report.rows.iter().map(|r| r.point()).collect();
            let plot = out.with_extension("svg");
            std::fs::write(&plot, rd_plot_svg(&[("dpcc", &points)]))
                .with_context(|| format!("writing {}", plot.display()))?;
            for r in &report.rows {
                println!(
                    "lambda {} bpp {:.6} psnr_d1 {:.4} chamfer {:.6e}",
                    r.lambda, r.bpp, r.psnr_d1, r.chamfer
                );
            }
        }
        Command::Bdmetrics { anchor, test } => {
            let read = |p: &Path| -> anyhow::Result<Vec<RdPoint>> {
                Ok(load_rd_csv(p)
                    .with_context(|| format!("reading {}", p.display()))?
                    .iter()
                    .map(|r| r.point())
                    .collect())
            };
            let (a, b) = (read(&anchor)?, read(&test)?);
            // Adding zero folds a negative zero into "0.000".
            let psnr = bd_psnr(&a, &b)? + 0.0;
            let rate = bd_rate(&a, &b)? + 0.0;
            println!("{psnr:.3} dB / {rate:.2} %");
        }
    }
    Ok(())
}

fn error_class(err: &anyhow::Error) -> &'static str {
    err.chain()
        .find_map(|e| e.downcast_ref::<dpcc_core::Error>().map(|e| e.class()))
        .or_else(|| err.chain().find_map(|e| e.downcast_ref::<std::io::Error>().map(|_| "io")))
        .unwrap_or("error")
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error[{}]: {err:#}", error_class(&err));
            ExitCode::FAILURE
        }
    }
}
