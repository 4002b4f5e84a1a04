mod artifacts;
mod convert;

use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use log::info;

use dpdistill_core::config::RunConfig;
use dpdistill_core::data::LabeledImages;
use dpdistill_core::dos::{optimize_stage, sample_stage, NoiseSetting, SampleConfig, SignalStore, SyntheticSet};
use dpdistill_core::eval::{ablation_suite, evaluate_synthetic, train_classifier, Arm, ToyTask};
use dpdistill_core::numerics::Purpose;
use dpdistill_core::privacy::{calibrate_noise_multiplier, convert_to_dp, AccountantState, PrivacyBudget};
use dpdistill_core::ser::{synth_aux, AuxiliarySet, Provenance};
use dpdistill_core::verify::{self, Check, Faults};
use dpdistill_core::{Error, Result, RngStream};

use artifacts::{
    labeled_bytes, png_bytes, write_atomic, Manifest, LEDGER_FILE, LOSS_FILE, PREVIEW_FILE, STORE_FILE,
    SYNTHETIC_IMAGES, SYNTHETIC_LABELS,
};

/// Exit status when a property check fails without an error.
const CHECK_FAILED: u8 = 1;

#[derive(Parser)]
#[command(name = "dpdistill", version, about = "Differentially private dataset distillation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Stage {
    Sample,
    Optimize,
    All,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum ConvertFormat {
    Raw,
    PngGrid,
}

#[derive(clap::Args)]
struct Common {
    /// Run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (overrides the config and DPDISTILL_OUTPUT_ROOT).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Print the noise needed to meet a privacy budget.
    Calibrate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        epsilon: Option<f64>,
        #[arg(long)]
        delta: Option<f64>,
        /// Sampling rate; defaults to group size over train images per class.
        #[arg(long)]
        rate: Option<f64>,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        clip: Option<f64>,
        #[arg(long)]
        group_size: Option<usize>,
    },
    /// Sample noisy signals from the private data, then distill images from them.
    Distill {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "all")]
        stage: Stage,
        /// Signal store for `--stage optimize`; defaults to the one in the output directory.
        #[arg(long)]
        store: Option<PathBuf>,
    },
    /// Train the evaluation classifier on a distilled set.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Directory holding the distilled set; defaults to the output directory.
        #[arg(long)]
        synthetic: Option<PathBuf>,
        /// Also train on the real train split for reference.
        #[arg(long)]
        reference: bool,
    },
    /// Compare the four on/off combinations of decoupling and projection.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        reference: bool,
    },
    /// Monte-Carlo check of the error decomposition on random models.
    VerifyTheorem1 {
        #[command(flatten)]
        common: Common,
    },
    /// Error against subspace dimension and noise level on a fixed model.
    SweepMse {
        #[command(flatten)]
        common: Common,
    },
    /// Run the property suite; exits nonzero if any check fails.
    Verify {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Scale calibrated noise before re-accounting (negative control).
        #[arg(long, default_value_t = 1.0)]
        inject_sigma_scale: f64,
        /// Hand skewed projections to the subspace checks (negative control).
        #[arg(long)]
        inject_skewed_projection: bool,
        /// Skip the Monte-Carlo and sweep checks.
        #[arg(long)]
        quick: bool,
    },
    /// Print or check run configurations.
    Config {
        #[arg(long)]
        dump_defaults: bool,
        /// Validate a config file and print its hashes.
        #[arg(long)]
        check: Option<PathBuf>,
    },
    /// Import images into the tensor format with a label sidecar.
    Convert {
        #[arg(long, value_enum)]
        format: ConvertFormat,
        #[arg(long)]
        input: PathBuf,
        /// Label bytes for `raw`.
        #[arg(long)]
        labels: Option<PathBuf>,
        /// `C,H,W` for `raw`.
        #[arg(long)]
        shape: Option<String>,
        /// `H,W` tile size for `png-grid`.
        #[arg(long)]
        tile: Option<String>,
        #[arg(long, default_value_t = 0)]
        gap: usize,
        #[arg(long, default_value_t = 1)]
        channels: usize,
        #[arg(long)]
        out_images: PathBuf,
        #[arg(long)]
        out_labels: PathBuf,
    },
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    let cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => {
            let cfg = RunConfig::default();
            cfg.validate()?;
            cfg
        }
    };
    // Results do not depend on the worker count; parallel work is collected in order.
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cfg.workers()).build_global() {
        log::warn!("worker pool: {e}");
    }
    Ok(cfg)
}

fn out_dir(cfg: &RunConfig, out: Option<&Path>) -> PathBuf {
    out.map(Path::to_path_buf).unwrap_or_else(|| cfg.output_dir())
}

fn parse_dims<const N: usize>(text: &str, what: &str) -> Result<[usize; N]> {
    let v: Vec<usize> = text
        .split(',')
        .map(|s| s.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Validation(format!("{what} must be {N} comma-separated integers")))?;
    v.try_into()
        .map_err(|_| Error::Validation(format!("{what} must be {N} comma-separated integers")))
}

fn print_checks(checks: &[Check]) {
    for c in checks {
        println!("{c}");
    }
}

fn status(ok: bool) -> ExitCode {
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(CHECK_FAILED)
    }
}

/// Private train split and, for the toy task, the task itself.
fn load_private(cfg: &RunConfig) -> Result<(LabeledImages, Option<ToyTask>)> {
    if cfg.is_toy() {
        let task = ToyTask::generate(&cfg.toy_spec())?;
        Ok((task.train.clone(), Some(task)))
    } else {
        let d = &cfg.data;
        Ok((LabeledImages::read(Path::new(&d.train_images), Path::new(&d.train_labels))?, None))
    }
}

fn load_test(cfg: &RunConfig) -> Result<LabeledImages> {
    if cfg.is_toy() {
        return Ok(ToyTask::generate(&cfg.toy_spec())?.test);
    }
    let d = &cfg.data;
    if d.test_images.is_empty() || d.test_labels.is_empty() {
        return Err(Error::Validation("evaluation needs data.test_images and data.test_labels".into()));
    }
    LabeledImages::read(Path::new(&d.test_images), Path::new(&d.test_labels))
}

fn load_aux(cfg: &RunConfig, task: Option<&ToyTask>) -> Result<Option<AuxiliarySet>> {
    if cfg.subspace_dim().is_none() {
        return Ok(None);
    }
    let share = cfg.aux_budget()?;
    if cfg.aux.source == "files" {
        return Ok(Some(AuxiliarySet::load(Path::new(&cfg.aux.images), Path::new(&cfg.aux.labels), share)?));
    }
    let task = task.ok_or_else(|| Error::Validation("the auxiliary generator needs the toy task".into()))?;
    let root = RngStream::new(cfg.run.seed);
    let mix = task.perturbed_mixture(cfg.aux.shift, cfg.aux.amp_jitter, &root.derive(Purpose::Auxiliary, &[0]))?;
    let aux = synth_aux(&mix, cfg.aux.per_class, &root.derive(Purpose::Auxiliary, &[1]))?;
    Ok(Some(AuxiliarySet::new(aux.images().clone(), Provenance::SyntheticGenerator, share)))
}

fn cmd_calibrate(
    cfg: &RunConfig,
    epsilon: Option<f64>,
    delta: Option<f64>,
    rate: Option<f64>,
    steps: Option<u64>,
    clip: Option<f64>,
    group_size: Option<usize>,
) -> Result<()> {
    let base = cfg.sampling_budget()?;
    let budget = PrivacyBudget::new(epsilon.unwrap_or(base.epsilon()), delta.unwrap_or(base.delta()))?;
    let steps = steps.unwrap_or(cfg.sample.iterations as u64);
    let l = group_size.unwrap_or(cfg.privacy.group_size);
    let k = clip.unwrap_or(cfg.privacy.clip_bound);
    if steps == 0 || l == 0 || !(k > 0.0) {
        return Err(Error::Validation("steps, group size and clip bound must be positive".into()));
    }
    let q = match rate {
        Some(q) => q,
        None if cfg.is_toy() => (l as f64 / cfg.toy.train_per_class as f64).min(1.0),
        None => return Err(Error::Validation("--rate is required when the data comes from files".into())),
    };
    let nm = calibrate_noise_multiplier(budget, q, steps)?;
    let sensitivity = k / l as f64;
    let mut st = AccountantState::new(q, nm)?;
    st.compose(steps);
    let (eps, order) = convert_to_dp(&st, budget.delta())?;
    println!("epsilon = {:?}", budget.epsilon());
    println!("delta = {:?}", budget.delta());
    println!("sampling_rate = {q:?}");
    println!("steps = {steps}");
    println!("noise_multiplier = {nm:?}");
    println!("sensitivity = {sensitivity:?}");
    println!("sigma = {:?}", nm * sensitivity);
    println!("accounted_epsilon = {eps:?}");
    println!("best_order = {order:?}");
    println!("order,rdp_per_step,rdp_total");
    for (a, (s, t)) in st.orders().iter().zip(st.per_step().iter().zip(st.curve())) {
        if [1.5, 2.0, 4.0, 8.0, 16.0, 32.0, 64.0, 128.0, 256.0].contains(a) {
            println!("{a},{s:.6e},{t:.6e}");
        }
    }
    Ok(())
}

fn run_sample(cfg: &RunConfig, dir: &Path) -> Result<SignalStore> {
    let t0 = Instant::now();
    let (private, task) = load_private(cfg)?;
    let aux = load_aux(cfg, task.as_ref())?;
    let mut tags = BTreeMap::new();
    tags.insert("sampling_hash".to_string(), cfg.sampling_hash());
    let sc = SampleConfig {
        signal: cfg.signal_spec_for(private.shape())?,
        group_size: cfg.privacy.group_size,
        iterations: cfg.sample.iterations,
        noise: NoiseSetting::Calibrate(cfg.sampling_budget()?),
        subspace_dim: cfg.subspace_dim(),
        seed: cfg.run.seed,
        tags,
    };
    let store = sample_stage(&private, aux.as_ref(), &sc)?;
    drop(private);
    let mut m = Manifest::new(dir, "sample", &cfg.hash(), &cfg.sampling_hash(), cfg.run.seed);
    m.write_file(STORE_FILE, &store.to_bytes())?;
    let q: f64 = meta_num(&store, "sampling_rate")?;
    let nm: f64 = meta_num(&store, "noise_multiplier")?;
    let ledger = if nm > 0.0 {
        let mut st = AccountantState::new(q, nm)?;
        st.compose(store.iterations() as u64);
        st.to_text()
    } else {
        "noise_multiplier = 0.0\nepsilon = inf\n".to_string()
    };
    m.write_file(LEDGER_FILE, ledger.as_bytes())?;
    for key in ["epsilon", "delta", "noise_multiplier", "sigma"] {
        m.entry(key, store.meta_value(key).unwrap_or("?"));
    }
    m.finish("manifest-sample.txt")?;
    info!("sampling stage finished in {:.1?}", t0.elapsed());
    Ok(store)
}

fn meta_num(store: &SignalStore, key: &str) -> Result<f64> {
    store
        .meta_value(key)
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::Format(format!("store metadata lacks a numeric {key:?}")))
}

/// Touches nothing but the store: no private-data handle exists on this path.
fn run_optimize(cfg: &RunConfig, store: &SignalStore, dir: &Path) -> Result<()> {
    let t0 = Instant::now();
    let expected = cfg.sampling_hash();
    match store.meta_value("sampling_hash") {
        Some(h) if h == expected => {}
        Some(h) => {
            return Err(Error::State(format!(
                "store was sampled under settings {h}, but this config's sampling settings hash to {expected}"
            )))
        }
        None => return Err(Error::State("store carries no sampling hash".into())),
    }
    let out = optimize_stage(store, &cfg.optimize_config()?)?;
    let mut m = Manifest::new(dir, "optimize", &cfg.hash(), &expected, cfg.run.seed);
    let (img, lab) = labeled_bytes(&out.synthetic.to_labeled()?)?;
    m.write_file(SYNTHETIC_IMAGES, &img)?;
    m.write_file(SYNTHETIC_LABELS, &lab)?;
    let mut loss = String::from("iteration,loss\n");
    for (t, l) in out.loss_trace.iter().enumerate() {
        loss.push_str(&format!("{t},{l:.9e}\n"));
    }
    m.write_file(LOSS_FILE, loss.as_bytes())?;
    let (w, h, ch, px) = out.synthetic.preview_grid();
    m.write_file(PREVIEW_FILE, &png_bytes(w, h, ch, &px)?)?;
    m.entry("iterations", out.loss_trace.len());
    m.finish("manifest-optimize.txt")?;
    info!("optimization stage finished in {:.1?}", t0.elapsed());
    Ok(())
}

fn cmd_distill(cfg: &RunConfig, dir: &Path, stage: Stage, store_path: Option<&Path>) -> Result<()> {
    match stage {
        Stage::Sample => run_sample(cfg, dir).map(|_| ()),
        Stage::All => {
            let store = run_sample(cfg, dir)?;
            run_optimize(cfg, &store, dir)
        }
        Stage::Optimize => {
            let path = store_path.map(Path::to_path_buf).unwrap_or_else(|| dir.join(STORE_FILE));
            let store = SignalStore::read_from(BufReader::new(File::open(&path)?))?;
            run_optimize(cfg, &store, dir)
        }
    }
}

fn cmd_evaluate(cfg: &RunConfig, dir: &Path, synthetic: Option<&Path>, reference: bool) -> Result<()> {
    let src = synthetic.unwrap_or(dir);
    let set = LabeledImages::read(&src.join(SYNTHETIC_IMAGES), &src.join(SYNTHETIC_LABELS))?;
    let test = load_test(cfg)?;
    let ccfg = cfg.classifier_config()?;
    let report = if cfg.is_toy() {
        let task = ToyTask::generate(&cfg.toy_spec())?;
        evaluate_synthetic(&SyntheticSet::from_labeled(&set)?, &task, &ccfg)?
    } else {
        train_classifier(&set, &test, &ccfg)?
    };
    let mut csv = String::from("class,accuracy\n");
    for (c, a) in report.per_class.iter().enumerate() {
        csv.push_str(&format!("{c},{a:.6}\n"));
    }
    csv.push_str(&format!("mean,{:.6}\n", report.accuracy));
    if reference {
        let (train, _) = load_private(cfg)?;
        let real = train_classifier(&train, &test, &ccfg)?;
        csv.push_str(&format!("real_data,{:.6}\n", real.accuracy));
        println!("real-data accuracy {:.4}", real.accuracy);
    }
    let mut m = Manifest::new(dir, "evaluate", &cfg.hash(), &cfg.sampling_hash(), cfg.run.seed);
    m.write_file("eval.csv", csv.as_bytes())?;
    m.finish("manifest-evaluate.txt")?;
    println!("accuracy {:.4}", report.accuracy);
    Ok(())
}

fn cmd_ablate(cfg: &RunConfig, dir: &Path, reference: bool) -> Result<()> {
    let table = ablation_suite(&cfg.ablation_config()?, &Arm::ALL, reference)?;
    let csv = table.to_csv();
    let mut m = Manifest::new(dir, "ablate", &cfg.hash(), &cfg.sampling_hash(), cfg.run.seed);
    m.entry("noise_multiplier", format!("{:?}", table.noise_multiplier));
    if let Some(r) = table.real_data_accuracy {
        m.entry("real_data_accuracy", format!("{r:.6}"));
    }
    m.write_file("ablation.csv", csv.as_bytes())?;
    m.finish("manifest-ablate.txt")?;
    print!("{csv}");
    Ok(())
}

fn cmd_theorem(cfg: &RunConfig, dir: &Path) -> Result<bool> {
    let rows = verify::theorem_rows(&cfg.theorem, Faults::default())?;
    let check = verify::theorem_check(&cfg.theorem, &rows);
    let mut m = Manifest::new(dir, "verify-theorem1", &cfg.hash(), &cfg.sampling_hash(), cfg.run.seed);
    m.write_file("theorem1.csv", verify::theorem_csv(&rows).as_bytes())?;
    m.finish("manifest-theorem1.txt")?;
    print_checks(std::slice::from_ref(&check));
    Ok(check.passed)
}

fn cmd_sweep(cfg: &RunConfig, dir: &Path) -> Result<bool> {
    let table = verify::run_sweep(&cfg.sweep)?;
    let checks = verify::sweep_checks(&table);
    let mut regimes = String::from("noise_multiplier,regime\n");
    for (nm, r) in table.noise_multipliers.iter().zip(&table.regimes) {
        regimes.push_str(&format!("{nm},{}\n", r.name()));
    }
    let mut m = Manifest::new(dir, "sweep-mse", &cfg.hash(), &cfg.sampling_hash(), cfg.run.seed);
    m.write_file("sweep.csv", table.to_csv().as_bytes())?;
    m.write_file("regimes.csv", regimes.as_bytes())?;
    m.finish("manifest-sweep.txt")?;
    print_checks(&checks);
    Ok(verify::all_passed(&checks))
}

fn cmd_verify(cfg: &RunConfig, faults: Faults, quick: bool) -> Result<bool> {
    let mut checks = verify::accountant_checks(faults)?;
    checks.extend(verify::lemma_checks(faults)?);
    checks.extend(verify::hygiene_checks(faults)?);
    if !quick {
        let rows = verify::theorem_rows(&cfg.theorem, faults)?;
        checks.push(verify::theorem_check(&cfg.theorem, &rows));
        checks.extend(verify::sweep_checks(&verify::run_sweep(&cfg.sweep)?));
    }
    print_checks(&checks);
    let failed = checks.iter().filter(|c| !c.passed).count();
    println!("{} checks, {failed} failed", checks.len());
    Ok(failed == 0)
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Calibrate {
            config,
            epsilon,
            delta,
            rate,
            steps,
            clip,
            group_size,
        } => {
            let cfg = load_config(config.as_deref())?;
            cmd_calibrate(&cfg, epsilon, delta, rate, steps, clip, group_size)?;
        }
        Command::Distill { common, stage, store } => {
            let cfg = load_config(common.config.as_deref())?;
            cmd_distill(&cfg, &out_dir(&cfg, common.out.as_deref()), stage, store.as_deref())?;
        }
        Command::Evaluate {
            common,
            synthetic,
            reference,
        } => {
            let cfg = load_config(common.config.as_deref())?;
            cmd_evaluate(&cfg, &out_dir(&cfg, common.out.as_deref()), synthetic.as_deref(), reference)?;
        }
        Command::Ablate { common, reference } => {
            let cfg = load_config(common.config.as_deref())?;
            cmd_ablate(&cfg, &out_dir(&cfg, common.out.as_deref()), reference)?;
        }
        Command::VerifyTheorem1 { common } => {
            let cfg = load_config(common.config.as_deref())?;
            return Ok(status(cmd_theorem(&cfg, &out_dir(&cfg, common.out.as_deref()))?));
        }
        Command::SweepMse { common } => {
            let cfg = load_config(common.config.as_deref())?;
            return Ok(status(cmd_sweep(&cfg, &out_dir(&cfg, common.out.as_deref()))?));
        }
        Command::Verify {
            config,
            inject_sigma_scale,
            inject_skewed_projection,
            quick,
        } => {
            let cfg = load_config(config.as_deref())?;
            if !(inject_sigma_scale > 0.0 && inject_sigma_scale.is_finite()) {
                return Err(Error::Validation("--inject-sigma-scale must be positive".into()));
            }
            let faults = Faults {
                sigma_scale: inject_sigma_scale,
                skew_projection: inject_skewed_projection,
            };
            return Ok(status(cmd_verify(&cfg, faults, quick)?));
        }
        Command::Config { dump_defaults, check } => {
            if dump_defaults {
                print!("{}", RunConfig::default().to_toml());
            }
            if let Some(path) = &check {
                let cfg = RunConfig::load(path)?;
                println!("config_hash = {}", cfg.hash());
                println!("sampling_hash = {}", cfg.sampling_hash());
            }
            if !dump_defaults && check.is_none() {
                return Err(Error::Validation("config needs --dump-defaults or --check".into()));
            }
        }
        Command::Convert {
            format,
            input,
            labels,
            shape,
            tile,
            gap,
            channels,
            out_images,
            out_labels,
        } => {
            let set = match format {
                ConvertFormat::Raw => {
                    let labels = labels.ok_or_else(|| Error::Validation("raw input needs --labels".into()))?;
                    let [c, h, w] = parse_dims::<3>(
                        shape.as_deref().ok_or_else(|| Error::Validation("raw input needs --shape".into()))?,
                        "--shape",
                    )?;
                    convert::from_raw(&input, &labels, (c, h, w))?
                }
                ConvertFormat::PngGrid => {
                    let [h, w] = parse_dims::<2>(
                        tile.as_deref().ok_or_else(|| Error::Validation("png grids need --tile".into()))?,
                        "--tile",
                    )?;
                    convert::from_png_grid(&input, (h, w), gap, channels)?
                }
            };
            let (img, lab) = labeled_bytes(&set)?;
            write_atomic(&out_images, &img)?;
            write_atomic(&out_labels, &lab)?;
            println!("{} images of shape {:?} in {} classes", set.len(), set.shape(), set.num_classes());
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
