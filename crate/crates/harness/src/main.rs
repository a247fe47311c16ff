use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ddt_core::checkpoint::read_header;
use ddt_core::cost::cost_network;
use ddt_core::gradcheck::{all_cases, check};
use ddt_core::{Checkpoint, DType, Model, Scalar, Tensor};
use ddt_harness::data::{read_image, write_image, Dataset};
use ddt_harness::train::{final_checkpoint, write_eval_csv};
use ddt_harness::{evaluate, Config, HarnessError, Result, Trainer};

#[derive(Parser)]
#[command(
    name = "ddt",
    version,
    about = "Dual-branch deformable transformer denoiser"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on synthetic Gaussian noise.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Denoise one image.
    Denoise {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Mean PSNR/SSIM of noisy inputs and model outputs per noise level.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "15,25,50")]
        sigma: Vec<f64>,
        /// Clean test images; procedural held-out images when omitted.
        #[arg(long)]
        testdir: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        csv: bool,
    },
    /// Analytic cost report.
    Flops {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Input size as HxW.
        #[arg(long, default_value = "256x256")]
        resolution: String,
        #[arg(long)]
        csv: bool,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        /// Run a single case by name.
        #[arg(long)]
        module: Option<String>,
        #[arg(long, default_value_t = 6)]
        coords: usize,
    },
}

fn load_config(path: &Path) -> Result<Config> {
    let mut cfg = Config::load(path)?;
    cfg.apply_env()?;
    cfg.validate()?;
    Ok(cfg)
}

fn train<T: Scalar>(cfg: Config, out: &Path, resume: Option<&Path>) -> Result<()> {
    let data = match &cfg.data.train_dir {
        Some(dir) => Dataset::<T>::load_dir(dir)?,
        None => Dataset::procedural(
            cfg.data.procedural_images,
            cfg.data.procedural_size,
            cfg.train.seed,
        ),
    };
    let model = Model::<T>::build(&cfg.network, cfg.train.seed)?;
    let mut trainer = match resume {
        Some(path) => Trainer::resume(model, cfg.train.clone(), Checkpoint::load(path)?)?,
        None => Trainer::new(model, cfg.train.clone())?,
    };
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("config.toml"), cfg.to_toml())?;
    let rows = trainer.run(&data, Some(out))?;
    if let Some(last) = rows.last() {
        println!(
            "iter {} loss {:.5} psnr {:.2} dB ssim {:.4}; checkpoint {}",
            last.iter,
            last.loss,
            last.psnr,
            last.ssim,
            final_checkpoint(out).display()
        );
    }
    Ok(())
}

fn load_model<T: Scalar>(ckpt: &Path) -> Result<Model<T>> {
    let ck = Checkpoint::<T>::load(ckpt)?;
    let mut model = Model::build(&ck.config, ck.seed)?;
    model.load_params(&ck.params)?;
    Ok(model)
}

fn denoise<T: Scalar>(ckpt: &Path, input: &Path, out: &Path) -> Result<()> {
    let model = load_model::<T>(ckpt)?;
    let img: Tensor<T> = read_image(input)?;
    let s = img.shape().to_vec();
    let y = model.infer_padded(&img.reshaped(&[1, s[0], s[1], s[2]])?)?;
    write_image(out, &y.reshaped(&s)?)
}

fn eval<T: Scalar>(
    ckpt: &Path,
    sigmas: &[f64],
    testdir: Option<&Path>,
    seed: u64,
    csv: bool,
) -> Result<()> {
    let model = load_model::<T>(ckpt)?;
    let images = match testdir {
        Some(dir) => Dataset::<T>::load_dir(dir)?.images,
        None => {
            let d = Config::default().data;
            Dataset::procedural(d.test_images, d.test_size, seed ^ 0x7e57).images
        }
    };
    let rows = evaluate(&model, &images, sigmas, seed)?;
    if csv {
        write_eval_csv(&rows, std::io::stdout())?;
    } else {
        println!(
            "{:>6}  {:>6}  {:>11}  {:>10}  {:>9}  {:>8}",
            "sigma", "images", "psnr_noisy", "ssim_noisy", "psnr", "ssim"
        );
        for r in rows {
            println!(
                "{:>6}  {:>6}  {:>11.3}  {:>10.4}  {:>9.3}  {:>8.4}",
                r.sigma, r.images, r.psnr_noisy, r.ssim_noisy, r.psnr, r.ssim
            );
        }
    }
    Ok(())
}

fn parse_resolution(s: &str) -> Result<(u64, u64)> {
    let bad = || HarnessError::Config(format!("resolution {s:?} must look like 256x256"));
    let (h, w) = s.split_once(['x', 'X']).ok_or_else(bad)?;
    Ok((
        h.trim().parse().map_err(|_| bad())?,
        w.trim().parse().map_err(|_| bad())?,
    ))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train {
            config,
            out,
            resume,
        } => {
            let cfg = load_config(&config)?;
            match cfg.network.dtype {
                DType::F32 => train::<f32>(cfg, &out, resume.as_deref()),
                DType::F64 => train::<f64>(cfg, &out, resume.as_deref()),
            }
        }
        Command::Denoise { ckpt, input, out } => match read_header(&ckpt)?.dtype {
            DType::F32 => denoise::<f32>(&ckpt, &input, &out),
            DType::F64 => denoise::<f64>(&ckpt, &input, &out),
        },
        Command::Eval {
            ckpt,
            sigma,
            testdir,
            seed,
            csv,
        } => match read_header(&ckpt)?.dtype {
            DType::F32 => eval::<f32>(&ckpt, &sigma, testdir.as_deref(), seed, csv),
            DType::F64 => eval::<f64>(&ckpt, &sigma, testdir.as_deref(), seed, csv),
        },
        Command::Flops {
            config,
            resolution,
            csv,
        } => {
            let cfg = match config {
                Some(path) => load_config(&path)?,
                None => Config::default(),
            };
            let (h, w) = parse_resolution(&resolution)?;
            let report = cost_network(&cfg.network, h, w)?;
            if csv {
                print!("{}", report.to_csv());
            } else {
                print!("{report}");
            }
            Ok(())
        }
        Command::Gradcheck { module, coords } => {
            let cases = all_cases(17, module.as_deref());
            if cases.is_empty() {
                return Err(HarnessError::Config(format!(
                    "no gradient case named {:?}",
                    module.unwrap_or_default()
                )));
            }
            let mut failed = 0;
            for case in &cases {
                let r = check(case, coords, 1e-5, 3)?;
                let verdict = if r.passed() { "ok" } else { "FAIL" };
                println!(
                    "{verdict:<4} {:<28} rel_err {:.2e} (tol {:.0e}, worst {})",
                    r.name, r.max_rel_err, r.tolerance, r.worst_input
                );
                failed += usize::from(!r.passed());
            }
            if failed > 0 {
                return Err(HarnessError::Numeric(format!(
                    "{failed} gradient case(s) failed"
                )));
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
