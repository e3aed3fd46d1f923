use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use motion_cvae::baseline::{ConstantPredictor, LinearPredictor};
use motion_cvae::cvae::ModelSet;
use motion_cvae::exec::{self, Execution};
use motion_cvae::latent::{self, EmbeddingLabel};
use motion_cvae::nn::Rng;
use motion_cvae::predictor::{
    self, evaluate_mpe_with, sample_future, sample_future_with_noise, LatentNoise, PastWindow,
    WindowPredictor,
};
use motion_cvae::skeleton::{self, Limb, Recording};
use motion_cvae::synth::{self, CorpusConfig, ReachStyle, Scale};
use motion_cvae::target::{
    self, Method, ReachOutcome, TargetSet, DEFAULT_FRACTIONS, DEFAULT_SIGMA,
};
use motion_cvae::trainer::{self, PairDataset, TrainConfig};
use motion_cvae::Error;

#[derive(Parser)]
#[command(
    name = "motion-cvae",
    version,
    about = "Skeletal motion prediction with a temporal CVAE"
)]
struct Cli {
    /// Maximum worker threads.
    #[arg(long, env = "MF_THREADS", global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = ScaleArg::Desk)]
        scale: ScaleArg,
        /// Override the number of training recordings.
        #[arg(long)]
        train_recordings: Option<usize>,
        #[arg(long)]
        test_recordings: Option<usize>,
        /// Override frames per free-motion recording.
        #[arg(long)]
        frames: Option<usize>,
        #[arg(long)]
        reaches_per_target: Option<usize>,
        #[arg(long)]
        force: bool,
    },
    /// Train the four limb models on `<data>/train`.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        #[arg(long, default_value_t = 1000)]
        batch_size: usize,
        #[arg(long, default_value_t = 100)]
        max_epochs: usize,
        #[arg(long, default_value_t = 50)]
        delta_t: usize,
        /// Fraction of training over which the KL weight ramps up.
        #[arg(long, default_value_t = 0.0)]
        kl_warmup: f64,
        /// Continue from a saved model directory.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Motion prediction error curves on `<data>/test`.
    EvalMpe {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum)]
        baseline: Vec<BaselineArg>,
        #[arg(long)]
        force: bool,
    },
    /// Draw future windows for the last frames of a recording.
    Sample {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        past: PathBuf,
        #[arg(long, default_value_t = 5)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Index of the last observed frame; defaults to the final frame.
        #[arg(long)]
        end: Option<usize>,
        /// Use zero latent noise (the mean prediction).
        #[arg(long)]
        zero_noise: bool,
        #[arg(long)]
        force: bool,
    },
    /// End-point classification of reaches.
    Classify {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        reaches: PathBuf,
        #[arg(long)]
        targets: PathBuf,
        #[arg(long, value_enum)]
        method: Vec<MethodArg>,
        #[arg(long, default_value_t = DEFAULT_SIGMA)]
        sigma: f64,
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_FRACTIONS)]
        fractions: Vec<f64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Encoder embedding of random and labeled reach windows.
    Latent {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        labeled: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2000)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = DEFAULT_SIGMA)]
        sigma: f64,
        /// Embed the encoder hidden layer instead of the latent mean.
        #[arg(long)]
        hidden_layer: bool,
        #[arg(long)]
        force: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ScaleArg {
    Desk,
    PaperShape,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum BaselineArg {
    Linear,
    Constant,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum MethodArg {
    Cvae,
    Linear,
    Current,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Cvae => Method::Cvae,
            MethodArg::Linear => Method::Linear,
            MethodArg::Current => Method::Current,
        }
    }
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Io(_) => 3,
            Error::Diverged { .. } | Error::NonFiniteLoss | Error::NonFiniteGradient => 4,
            _ => 2,
        };
        let message = match &e {
            Error::Diverged { step, last_good } => format!(
                "{e}: loss or gradient became non-finite for the {} model after {step} steps; \
                 try a smaller --lr or a larger --batch-size",
                last_good.limb.name()
            ),
            _ => e.to_string(),
        };
        Self { code, message }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e).into()
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    exec::init_thread_pool(cli.threads);
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn run(command: Command) -> CliResult {
    match command {
        Command::GenData {
            out,
            seed,
            scale,
            train_recordings,
            test_recordings,
            frames,
            reaches_per_target,
            force,
        } => {
            let mut config = CorpusConfig::for_scale(match scale {
                ScaleArg::Desk => Scale::Desk,
                ScaleArg::PaperShape => Scale::PaperShape,
            });
            config.train_recordings = train_recordings.unwrap_or(config.train_recordings);
            config.test_recordings = test_recordings.unwrap_or(config.test_recordings);
            config.frames_per_recording = frames.unwrap_or(config.frames_per_recording);
            config.reaches_per_target = reaches_per_target.unwrap_or(config.reaches_per_target);
            gen_data(&out, seed, &config, force)
        }
        Command::Train {
            data,
            out,
            seed,
            lr,
            batch_size,
            max_epochs,
            delta_t,
            kl_warmup,
            resume,
            force,
        } => {
            let config = TrainConfig {
                lr,
                batch_size,
                max_epochs,
                seed,
                kl_warmup,
                ..TrainConfig::default()
            };
            train(&data, &out, delta_t, &config, resume.as_deref(), force)
        }
        Command::EvalMpe {
            model,
            data,
            out,
            baseline,
            force,
        } => eval_mpe(&model, &data, &out, &baseline, force),
        Command::Sample {
            model,
            past,
            n,
            seed,
            out,
            end,
            zero_noise,
            force,
        } => sample(&model, &past, n, seed, &out, end, zero_noise, force),
        Command::Classify {
            model,
            reaches,
            targets,
            method,
            sigma,
            fractions,
            out,
            force,
        } => classify(
            model.as_deref(),
            &reaches,
            &targets,
            &method,
            sigma,
            &fractions,
            &out,
            force,
        ),
        Command::Latent {
            model,
            data,
            labeled,
            out,
            samples,
            seed,
            sigma,
            hidden_layer,
            force,
        } => latent_cmd(
            &model,
            &data,
            &labeled,
            &out,
            samples,
            seed,
            sigma,
            hidden_layer,
            force,
        ),
    }
}

fn require_dir(path: &Path) -> CliResult {
    if !path.is_dir() {
        return Err(Failure::usage(format!(
            "{} is not a directory",
            path.display()
        )));
    }
    Ok(())
}

fn require_file(path: &Path) -> CliResult {
    if !path.is_file() {
        return Err(Failure::usage(format!("{} is not a file", path.display())));
    }
    Ok(())
}

/// Creates an output directory, refusing to reuse a non-empty one unless
/// `force` is set.
fn prepare_out_dir(path: &Path, force: bool) -> CliResult {
    if path.exists() {
        if !path.is_dir() {
            return Err(Failure::usage(format!(
                "{} exists and is not a directory",
                path.display()
            )));
        }
        let non_empty = std::fs::read_dir(path)?.next().is_some();
        if non_empty && !force {
            return Err(Failure::usage(format!(
                "{} is not empty; pass --force to overwrite",
                path.display()
            )));
        }
    }
    std::fs::create_dir_all(path)?;
    Ok(())
}

fn prepare_out_file(path: &Path, force: bool) -> CliResult {
    if path.exists() && !force {
        return Err(Failure::usage(format!(
            "{} exists; pass --force to overwrite",
            path.display()
        )));
    }
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    Ok(())
}

fn gen_data(out: &Path, seed: u64, config: &CorpusConfig, force: bool) -> CliResult {
    if config.train_recordings == 0 || config.frames_per_recording == 0 {
        return Err(Failure::usage(
            "need at least one training recording and one frame",
        ));
    }
    prepare_out_dir(out, force)?;
    let corpus = synth::gen_corpus(config, seed)?;
    synth::write_corpus(&corpus, out)?;
    let frames = |recs: &[Recording]| recs.iter().map(Recording::len).sum::<usize>();
    println!(
        "train: {} recordings, {} frames",
        corpus.train.len(),
        frames(&corpus.train)
    );
    println!(
        "test: {} recordings, {} frames",
        corpus.test.len(),
        frames(&corpus.test)
    );
    println!(
        "reaches: {} towards {} targets",
        corpus.reaches.len(),
        corpus.targets.len()
    );
    println!(
        "labeled: {} reaches towards {} targets",
        corpus.labeled.len(),
        corpus.labeled_targets.len()
    );
    Ok(())
}

fn read_split(data: &Path, split: &str) -> CliResult<Vec<Recording>> {
    let dir = data.join(split);
    require_dir(&dir)?;
    let recs = synth::read_recordings(&dir)?;
    if recs.is_empty() {
        return Err(Failure::usage(format!(
            "no recordings in {}",
            dir.display()
        )));
    }
    Ok(recs)
}

fn train(
    data: &Path,
    out: &Path,
    delta_t: usize,
    config: &TrainConfig,
    resume: Option<&Path>,
    force: bool,
) -> CliResult {
    if delta_t < 2 {
        return Err(Failure::usage("--delta-t must be at least 2"));
    }
    config.validate()?;
    let recordings = read_split(data, "train")?;
    let initial = match resume {
        Some(dir) => {
            require_dir(dir)?;
            Some(trainer::load_model_set(dir)?)
        }
        None => None,
    };
    prepare_out_dir(out, force)?;
    let trained = trainer::train_all_from(&recordings, delta_t, initial.as_ref(), config)?;
    let provenance: Vec<_> = trained
        .reports
        .iter()
        .map(|(l, _, p)| (*l, p.clone()))
        .collect();
    trainer::save_model_set(&trained.models, &provenance, out)?;
    for (limb, history, prov) in &trained.reports {
        std::fs::write(
            out.join(format!("history_{}.csv", limb.name())),
            trainer::history_csv(history),
        )?;
        println!(
            "{}: {} steps, {} epochs, final loss {:.6}{}",
            limb.name(),
            prov.steps,
            prov.epochs,
            prov.final_loss,
            if prov.converged { " (converged)" } else { "" }
        );
    }
    Ok(())
}

fn eval_mpe(
    model: &Path,
    data: &Path,
    out: &Path,
    baselines: &[BaselineArg],
    force: bool,
) -> CliResult {
    require_dir(model)?;
    let models = trainer::load_model_set(model)?;
    let test = read_split(data, "test")?;
    let delta_t = models.delta_t();
    let mut runs: Vec<(&str, Box<dyn WindowPredictor>)> = vec![("cvae", Box::new(models))];
    for b in baselines {
        match b {
            BaselineArg::Linear if !runs.iter().any(|(n, _)| *n == "linear") => {
                runs.push(("linear", Box::new(LinearPredictor::new(delta_t))));
            }
            BaselineArg::Constant if !runs.iter().any(|(n, _)| *n == "constant") => {
                let train = read_split(data, "train")?;
                let (normalized, contexts): (Vec<_>, Vec<_>) = train
                    .iter()
                    .map(skeleton::normalize)
                    .collect::<Result<Vec<_>, _>>()?
                    .into_iter()
                    .unzip();
                let sets = Limb::ALL
                    .iter()
                    .map(|&l| PairDataset::from_normalized(&normalized, &contexts, l, delta_t))
                    .collect::<Result<Vec<_>, _>>()?;
                runs.push((
                    "constant",
                    Box::new(ConstantPredictor::training_mean(&sets)?),
                ));
            }
            _ => {}
        }
    }
    prepare_out_dir(out, force)?;
    for (name, p) in &runs {
        let curves = evaluate_mpe_with(p.as_ref(), &test, Execution::default())?;
        for c in &curves {
            std::fs::write(
                out.join(format!("{}_{name}.csv", c.limb.name())),
                c.to_csv(),
            )?;
            println!(
                "{name} {}: step 1 {:.6}, step {} {:.6}",
                c.limb.name(),
                c.mpe[0],
                c.mpe.len(),
                c.mpe[c.mpe.len() - 1]
            );
        }
    }
    let labels: Vec<&str> = runs.iter().map(|(n, _)| *n).collect();
    std::fs::write(out.join("mpe.gp"), predictor::gnuplot_script(&labels))?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn sample(
    model: &Path,
    past: &Path,
    n: usize,
    seed: u64,
    out: &Path,
    end: Option<usize>,
    zero_noise: bool,
    force: bool,
) -> CliResult {
    require_dir(model)?;
    require_file(past)?;
    if n == 0 {
        return Err(Failure::usage("--n must be at least 1"));
    }
    let models = trainer::load_model_set(model)?;
    let recording = Recording::read_jsonl(past)?;
    let end = end.unwrap_or(recording.len().saturating_sub(1));
    let window = PastWindow::from_recording(&recording, end, models.delta_t())?;
    prepare_out_file(out, force)?;
    let mut rng = Rng::from_stream(seed, "sample");
    let mut text = String::new();
    for k in 0..n {
        let pred = if zero_noise {
            let noise: Vec<_> = Limb::ALL
                .iter()
                .map(|&l| LatentNoise::zeros(models.get(l).latent_dim()))
                .collect();
            sample_future_with_noise(&models, &window, &noise)?
        } else {
            sample_future(&models, &window, &mut rng)?
        };
        let frames: Vec<&[[f64; 3]]> = (0..pred.world.delta_t())
            .map(|s| pred.world.frame(s))
            .collect();
        let line = serde_json::json!({
            "sample": k,
            "start_t": pred.world.start_t,
            "frames": frames,
        });
        writeln!(text, "{line}").expect("writing to a string");
    }
    std::fs::write(out, text)?;
    println!(
        "wrote {n} samples of {} frames to {}",
        models.delta_t(),
        out.display()
    );
    Ok(())
}

fn classify_reaches(
    method: Method,
    models: Option<&ModelSet>,
    reaches: &[synth::ReachRecord],
    targets: &TargetSet,
    fractions: &[f64],
) -> CliResult<Vec<ReachOutcome>> {
    let delta_t = models.map_or(50, ModelSet::delta_t);
    let evidence = method.evidence(models, delta_t)?;
    let results = exec::map_slice(Execution::default(), reaches, |r| {
        target::classify_trajectory(
            evidence,
            &r.recording,
            r.onset,
            r.duration,
            targets,
            fractions,
        )
        .map(|results| ReachOutcome {
            id: r.recording.id.clone(),
            true_target: r.target,
            results,
        })
    });
    Ok(results.into_iter().collect::<Result<Vec<_>, _>>()?)
}

#[allow(clippy::too_many_arguments)]
fn classify(
    model: Option<&Path>,
    reaches_dir: &Path,
    targets_file: &Path,
    methods: &[MethodArg],
    sigma: f64,
    fractions: &[f64],
    out: &Path,
    force: bool,
) -> CliResult {
    require_dir(reaches_dir)?;
    require_file(targets_file)?;
    if fractions.is_empty() || fractions.iter().any(|f| !(0.0..=1.0).contains(f)) {
        return Err(Failure::usage("--fractions must be values in [0, 1]"));
    }
    let mut methods: Vec<Method> = methods.iter().map(|&m| m.into()).collect();
    if methods.is_empty() {
        methods = if model.is_some() {
            Method::ALL.to_vec()
        } else {
            vec![Method::Linear, Method::Current]
        };
    }
    methods.dedup();
    let models = match model {
        Some(dir) => {
            require_dir(dir)?;
            Some(trainer::load_model_set(dir)?)
        }
        None if methods.contains(&Method::Cvae) => {
            return Err(Failure::usage("--method cvae requires --model"));
        }
        None => None,
    };
    let targets = TargetSet::load(targets_file, sigma)?;
    let reaches = synth::read_reaches(reaches_dir)?;
    if let Some(r) = reaches.iter().find(|r| r.target >= targets.len()) {
        return Err(Failure::usage(format!(
            "reach {} names target {} but only {} targets are defined",
            r.recording.id,
            r.target + 1,
            targets.len()
        )));
    }
    prepare_out_dir(out, force)?;
    let mut table = Vec::new();
    for method in methods {
        let outcomes = classify_reaches(method, models.as_ref(), &reaches, &targets, fractions)?;
        std::fs::write(
            out.join(format!("report_{}.csv", method.name())),
            target::report_csv(&outcomes, targets.len()),
        )?;
        table.push((
            method.name().to_string(),
            target::accuracy(&outcomes, fractions.len()),
        ));
    }
    let summary = target::accuracy_table(&table, fractions);
    std::fs::write(out.join("accuracy.csv"), &summary)?;
    print!("{summary}");
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn latent_cmd(
    model: &Path,
    data: &Path,
    labeled_dir: &Path,
    out: &Path,
    samples: usize,
    seed: u64,
    sigma: f64,
    hidden_layer: bool,
    force: bool,
) -> CliResult {
    require_dir(model)?;
    require_dir(labeled_dir)?;
    let models = trainer::load_model_set(model)?;
    let delta_t = models.delta_t();
    let train = read_split(data, "train")?;
    let labeled = synth::read_reaches(labeled_dir)?;
    let targets = TargetSet::load(&labeled_dir.join("targets.json"), sigma)?;

    let (normalized, contexts): (Vec<_>, Vec<_>) = train
        .iter()
        .map(skeleton::normalize)
        .collect::<Result<Vec<_>, _>>()?
        .into_iter()
        .unzip();
    let pool = PairDataset::from_normalized(&normalized, &contexts, Limb::Right, delta_t)?;
    let embedding = latent::embed_reaches(&models, &pool, &labeled, samples, seed, hidden_layer)?;

    prepare_out_dir(out, force)?;
    std::fs::write(out.join("embedding.csv"), embedding.to_csv())?;
    let mut present: Vec<EmbeddingLabel> = embedding.labels.clone();
    present.sort();
    present.dedup();
    std::fs::write(
        out.join("embedding.gp"),
        latent::gnuplot_script("embedding.csv", &present),
    )?;

    let mut scores = String::from("target,score\n");
    for (t, score) in latent::style_separation(&embedding, targets.len())? {
        writeln!(scores, "{},{score:.6}", t + 1).expect("writing to a string");
        println!(
            "separation legible-{0} vs predictable-{0}: {score:.4}",
            t + 1
        );
    }
    std::fs::write(out.join("separation.csv"), scores)?;

    let mut rows = Vec::new();
    for style in [ReachStyle::Legible, ReachStyle::Predictable] {
        let group: Vec<_> = labeled
            .iter()
            .filter(|r| r.style == style)
            .cloned()
            .collect();
        let outcomes = classify_reaches(
            Method::Cvae,
            Some(&models),
            &group,
            &targets,
            &DEFAULT_FRACTIONS,
        )?;
        let name = match style {
            ReachStyle::Legible => "legible",
            ReachStyle::Predictable => "predictable",
        };
        rows.push((
            name.to_string(),
            target::accuracy(&outcomes, DEFAULT_FRACTIONS.len()),
        ));
    }
    let table = target::accuracy_table(&rows, &DEFAULT_FRACTIONS);
    std::fs::write(out.join("legibility.csv"), &table)?;
    print!("{table}");
    Ok(())
}
