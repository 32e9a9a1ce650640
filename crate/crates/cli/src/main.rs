use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use log::{info, warn};
use uniconv::analysis::agd::agd_metrics;
use uniconv::analysis::cost::{count_flops, count_params};
use uniconv::analysis::erf::{compute_erf, render_heatmap, ErfMap, ErfSource};
use uniconv::analysis::gradsuite::grad_check_suite;
use uniconv::analysis::support::rfa_support;
use uniconv::io::config::parse_config;
use uniconv::io::pnm::{read_ppm, write_pgm};
use uniconv::model::{check_input_size, IN_CHANNELS};
use uniconv::rfa::{propagate_support, theoretical_rf};
use uniconv::{Model, ModelConfig, Real, Rng, Shape, Tensor};

const CSV_HELP: &str = "\
Output files (written under --out):
  describe    cost.csv          category,params,macs,elementwise_ops
                                (rows: rfa, small_conv, ffn, stem_downsample, head, total)
  erf         erf.pgm           8-bit heatmap, round(255*(v/max)^gamma)
              erf_metrics.csv   metric,value (gauss_sigma, gauss_r2, monotonicity_violation,
                                area_ratio_<t>, sample_count, center_row, center_col,
                                argmax_row, argmax_col)
              erf_profile.csv   radius,value
              erf_grid.csv      one row per map row, comma separated, no header
  rf-support  rf_support.csv    group,theoretical,measured_height,measured_width,pass
  grad-check  grad_check.csv    op,max_rel_err,tol,checked,pass
  overfit     overfit_loss.csv  step,loss (loss before each update; the last row is the
                                loss after the final update)
  render      render.pgm        8-bit heatmap of an erf_grid.csv

Exit codes: 0 success, 1 verification failure, 2 usage or input error.";

#[derive(Debug, Parser)]
#[command(name = "uniconv", version, about = "UniConvNet analysis and verification toolkit", after_help = CSV_HELP)]
struct Cli {
    /// JSON model configuration; the built-in tiny configuration if omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configuration seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_enum, default_value_t = Precision::F32)]
    precision: Precision,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Square input extent; each command has its own default.
    #[arg(long, global = true)]
    input_size: Option<usize>,
    /// Worker threads for ERF sampling.
    #[arg(long, global = true, env = "UNICONV_THREADS", default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Precision {
    F32,
    F64,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Parameter and MAC breakdown per category (default input 224).
    Describe,
    /// Effective receptive field and its Gaussian-ness metrics (default input 64).
    Erf {
        #[arg(long, default_value_t = 256)]
        samples: usize,
        /// Directory of binary PPM images to use instead of uniform noise.
        #[arg(long)]
        images: Option<PathBuf>,
        #[arg(long, default_value_t = 0.5)]
        gamma: f64,
    },
    /// Theoretical versus measured gradient support of stacked aggregators
    /// (64-bit; default input: amp support + 6).
    RfSupport {
        #[arg(long, default_value_t = 1)]
        depth: usize,
    },
    /// 64-bit finite-difference check of every operator, composite and the
    /// full model (default input 64).
    GradCheck,
    /// Overfit a random batch with SGD (default input 32).
    Overfit {
        #[arg(long, default_value_t = 300)]
        steps: usize,
        #[arg(long, default_value_t = 0.05)]
        lr: f64,
        #[arg(long, default_value_t = 16)]
        samples: usize,
        #[arg(long, default_value_t = 2)]
        classes: usize,
        /// Final loss must fall below this value.
        #[arg(long, default_value_t = 0.1)]
        target: f64,
    },
    /// Render an erf_grid.csv as a PGM heatmap.
    Render {
        #[arg(long)]
        grid: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        gamma: f64,
    },
}

enum Outcome {
    Pass,
    Fail,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(&cli) {
        Ok(Outcome::Pass) => ExitCode::SUCCESS,
        Ok(Outcome::Fail) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

struct Setup {
    cfg: ModelConfig,
    seed: u64,
}

fn load_setup(cli: &Cli) -> anyhow::Result<Setup> {
    let (cfg, seed) = match &cli.config {
        Some(path) => {
            let text =
                fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let (cfg, _, seed) =
                parse_config(&text).with_context(|| format!("in {}", path.display()))?;
            (cfg, seed)
        }
        None => (ModelConfig::tiny(), 0),
    };
    Ok(Setup {
        cfg,
        seed: cli.seed.unwrap_or(seed),
    })
}

fn model_size(cli: &Cli, default: usize) -> anyhow::Result<usize> {
    let size = cli.input_size.unwrap_or(default);
    check_input_size(size, size)?;
    Ok(size)
}

fn write_out(dir: &Path, name: &str, bytes: &[u8]) -> anyhow::Result<PathBuf> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(name);
    fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

fn run(cli: &Cli) -> anyhow::Result<Outcome> {
    let s = load_setup(cli)?;
    let wide = cli.precision == Precision::F64;
    match &cli.command {
        Command::Describe if wide => describe::<f64>(cli, &s),
        Command::Describe => describe::<f32>(cli, &s),
        Command::Erf {
            samples,
            images,
            gamma,
        } => {
            let images = images.as_deref();
            if wide {
                erf::<f64>(cli, &s, *samples, images, *gamma)
            } else {
                erf::<f32>(cli, &s, *samples, images, *gamma)
            }
        }
        Command::RfSupport { depth } => rf_support(cli, &s, *depth),
        Command::GradCheck => grad_check(cli, &s),
        Command::Overfit {
            steps,
            lr,
            samples,
            classes,
            target,
        } => {
            let fit = Fit {
                steps: *steps,
                lr: *lr,
                samples: *samples,
                classes: *classes,
                target: *target,
            };
            if wide {
                overfit::<f64>(cli, &s, &fit)
            } else {
                overfit::<f32>(cli, &s, &fit)
            }
        }
        Command::Render { grid, gamma } => render(cli, grid, *gamma),
    }
}

fn describe<T: Real>(cli: &Cli, s: &Setup) -> anyhow::Result<Outcome> {
    let size = model_size(cli, 224)?;
    let model = Model::<T>::build(&s.cfg, &mut Rng::new(s.seed))?;
    let cost = count_params(&model).with_compute(&count_flops(&model, size, size)?);
    let th = theoretical_rf(&s.cfg.rfa);
    println!(
        "stages {:?} depths {:?}, aggregator N={} kernels {:?} k={}, input {size}x{size}",
        s.cfg.stage_channels,
        s.cfg.stage_depths,
        s.cfg.rfa.layer_count,
        s.cfg.rfa.large_kernels,
        s.cfg.rfa.small_kernel
    );
    println!(
        "aggregator receptive field: amp {0}x{0}, dis {1}x{1}",
        th.amp_chain_rf,
        th.dis_group_rf()
    );
    print!("{}", cost.to_table());
    let path = write_out(&cli.out, "cost.csv", cost.to_csv().as_bytes())?;
    info!("wrote {}", path.display());
    Ok(Outcome::Pass)
}

fn load_images<T: Real>(dir: &Path, size: usize, limit: usize) -> anyhow::Result<Vec<Tensor<T>>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading image directory {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("ppm")))
        .collect();
    paths.sort();
    let mut images = Vec::new();
    for p in paths {
        if images.len() == limit {
            break;
        }
        match read_ppm::<T>(&p) {
            Ok(t) if t.shape().height == size && t.shape().width == size => images.push(t),
            Ok(t) => warn!(
                "skipping {}: {}x{} does not match input {size}x{size}",
                p.display(),
                t.shape().height,
                t.shape().width
            ),
            Err(e) => warn!("skipping {}: {e}", p.display()),
        }
    }
    if images.is_empty() {
        bail!("no readable {size}x{size} PPM images in {}", dir.display());
    }
    Ok(images)
}

fn erf<T: Real>(
    cli: &Cli,
    s: &Setup,
    samples: usize,
    images: Option<&Path>,
    gamma: f64,
) -> anyhow::Result<Outcome> {
    let size = model_size(cli, 64)?;
    if samples == 0 {
        bail!("--samples must be at least 1");
    }
    if !gamma.is_finite() || gamma <= 0.0 {
        bail!("--gamma must be positive");
    }
    let model = Model::<T>::build(&s.cfg, &mut Rng::new(s.seed))?;
    let loaded;
    let source = match images {
        Some(dir) => {
            loaded = load_images::<T>(dir, size, samples)?;
            ErfSource::Images(&loaded)
        }
        None => ErfSource::RandomUniform { seed: s.seed },
    };
    let map = compute_erf(&model, size, size, samples, source, cli.threads)?;
    let metrics = agd_metrics(&map)?;
    let (ar, ac) = map.argmax();

    let mut csv = metrics.to_csv();
    let _ = writeln!(csv, "sample_count,{}", map.sample_count);
    let _ = writeln!(csv, "center_row,{}", map.center.0);
    let _ = writeln!(csv, "center_col,{}", map.center.1);
    let _ = writeln!(csv, "argmax_row,{ar}");
    let _ = writeln!(csv, "argmax_col,{ac}");

    write_out(&cli.out, "erf_metrics.csv", csv.as_bytes())?;
    write_out(
        &cli.out,
        "erf_profile.csv",
        metrics.profile_csv().as_bytes(),
    )?;
    write_out(&cli.out, "erf_grid.csv", map.to_grid_csv().as_bytes())?;
    fs::create_dir_all(&cli.out)?;
    write_pgm(&render_heatmap(&map, gamma)?, cli.out.join("erf.pgm"))?;

    println!(
        "ERF over {} {} samples at {size}x{size} ({})",
        map.sample_count,
        map.input_kind.as_str(),
        T::NAME
    );
    println!("center {:?}, argmax ({ar}, {ac})", map.center);
    println!(
        "gauss_sigma {:.4}, gauss_r2 {:.4}, monotonicity_violation {:.4}",
        metrics.gauss_sigma, metrics.gauss_r2, metrics.monotonicity_violation
    );
    for (t, r) in &metrics.area_ratio {
        println!("area_ratio({t}) {r:.6}");
    }
    info!("wrote outputs to {}", cli.out.display());
    Ok(Outcome::Pass)
}

fn rf_support(cli: &Cli, s: &Setup, depth: usize) -> anyhow::Result<Outcome> {
    if depth == 0 {
        bail!("--depth must be at least 1");
    }
    let rfa = &s.cfg.rfa;
    let mut predicted = theoretical_rf(rfa);
    for _ in 1..depth {
        let mut heads = vec![predicted.amp_chain_rf; rfa.layer_count];
        heads.push(predicted.dis_group_rf());
        predicted = propagate_support(rfa, &heads);
    }
    let size = cli.input_size.unwrap_or(predicted.amp_chain_rf + 6);
    let report = rfa_support(rfa, depth, size, s.seed)?;
    let want = [
        report.theoretical.amp_chain_rf,
        report.theoretical.dis_group_rf(),
    ];
    let mut csv = String::from("group,theoretical,measured_height,measured_width,pass\n");
    println!(
        "{depth} aggregator(s), C={}, input {size}x{size}",
        rfa.channels
    );
    for (b, w) in report.measured.iter().zip(want) {
        let ok = b.height == w && b.width == w;
        let verdict = if ok { "PASS" } else { "FAIL" };
        println!(
            "{:<4} theoretical {w}x{w}  measured {}x{}  {verdict}",
            b.group, b.height, b.width
        );
        let _ = writeln!(csv, "{},{w},{},{},{ok}", b.group, b.height, b.width);
    }
    write_out(&cli.out, "rf_support.csv", csv.as_bytes())?;
    let pass = report.passes();
    println!("{}", if pass { "PASS" } else { "FAIL" });
    Ok(if pass { Outcome::Pass } else { Outcome::Fail })
}

fn grad_check(cli: &Cli, s: &Setup) -> anyhow::Result<Outcome> {
    let size = model_size(cli, 64)?;
    let entries = grad_check_suite(&s.cfg, size, s.seed)?;
    let mut csv = String::from("op,max_rel_err,tol,checked,pass\n");
    let mut all = true;
    for e in &entries {
        let ok = e.pass();
        all &= ok;
        println!(
            "{:<24} max_rel_err {:.3e}  tol {:.0e}  {}",
            e.name,
            e.report.max_rel_err,
            e.tol,
            if ok { "PASS" } else { "FAIL" }
        );
        let _ = writeln!(
            csv,
            "{},{:e},{:e},{},{ok}",
            e.name, e.report.max_rel_err, e.tol, e.report.checked
        );
    }
    write_out(&cli.out, "grad_check.csv", csv.as_bytes())?;
    println!("{}", if all { "PASS" } else { "FAIL" });
    Ok(if all { Outcome::Pass } else { Outcome::Fail })
}

#[derive(Clone, Copy)]
struct Fit {
    steps: usize,
    lr: f64,
    samples: usize,
    classes: usize,
    target: f64,
}

fn overfit<T: Real>(cli: &Cli, s: &Setup, fit: &Fit) -> anyhow::Result<Outcome> {
    let Fit {
        steps,
        lr,
        samples,
        classes,
        target,
    } = *fit;
    let size = model_size(cli, 32)?;
    if samples == 0 || classes < 2 {
        bail!("overfit needs at least one sample and two classes");
    }
    let cfg = ModelConfig {
        num_classes: classes,
        ..s.cfg.clone()
    };
    let mut model = Model::<T>::build(&cfg, &mut Rng::new(s.seed))?;
    let shape = Shape::new(samples, IN_CHANNELS, size, size);
    let mut data_rng = Rng::with_stream(s.seed, 1);
    let data = (0..shape.numel())
        .map(|_| T::from_f64(data_rng.standard_normal()))
        .collect();
    let x = Tensor::<T>::new(shape, data)?;
    let labels: Vec<usize> = (0..samples).map(|i| i % classes).collect();
    let mut csv = String::from("step,loss\n");
    let lr = T::from_f64(lr);
    for step in 0..steps {
        let loss = model.train_step(&x, &labels, lr)?.as_f64();
        if !loss.is_finite() {
            return Err(anyhow!("loss diverged at step {step}"));
        }
        let _ = writeln!(csv, "{step},{loss}");
        if step % 25 == 0 {
            info!("step {step}: loss {loss:.6}");
        }
    }
    let logits = model.forward(&x)?;
    let (final_loss, _) = uniconv::model::softmax_cross_entropy(&logits, &labels)?;
    let final_loss = final_loss.as_f64();
    let _ = writeln!(csv, "{steps},{final_loss}");
    write_out(&cli.out, "overfit_loss.csv", csv.as_bytes())?;
    let pass = final_loss < target;
    println!(
        "final loss after {steps} steps: {final_loss:.6} (target < {target}) {}",
        if pass { "PASS" } else { "FAIL" }
    );
    Ok(if pass { Outcome::Pass } else { Outcome::Fail })
}

fn render(cli: &Cli, grid: &Path, gamma: f64) -> anyhow::Result<Outcome> {
    let text = fs::read_to_string(grid).with_context(|| format!("reading {}", grid.display()))?;
    let map = ErfMap::from_grid_csv(&text, None)?;
    let img = render_heatmap(&map, gamma)?;
    fs::create_dir_all(&cli.out)?;
    let path = cli.out.join("render.pgm");
    write_pgm(&img, &path)?;
    println!(
        "wrote {}x{} heatmap to {}",
        img.width,
        img.height,
        path.display()
    );
    Ok(Outcome::Pass)
}
