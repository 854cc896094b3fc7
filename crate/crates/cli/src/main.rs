use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mcore::data::{generate_synthetic_dataset, load_dataset, save_dataset, ScoreRange, SynthSpec};
use mcore::engine::{evaluate, infer_score, Checkpoint, TrainConfig, TrainOptions};
use mcore::metrics::MetricsReport;
use mcore::{Error, ErrorKind};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

mod plot;

#[derive(Parser)]
#[command(
    name = "mcore",
    version,
    about = "Multi-stage contrastive regression for action quality assessment"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-stage video dataset.
    Gen(GenArgs),
    /// Train a model and write a checkpoint plus a loss log.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the test split and write a JSON report.
    Eval(EvalArgs),
    /// Score one video against same-class exemplars.
    Score(ScoreArgs),
    /// Render SVG figures from an evaluation report.
    Plot(PlotArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    num_videos: usize,
    #[arg(long)]
    num_classes: usize,
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = 96)]
    frames: usize,
    #[arg(long, default_value_t = 3)]
    stages: usize,
    #[arg(long, default_value_t = 3)]
    channels: usize,
    #[arg(long, default_value_t = 32)]
    height: usize,
    #[arg(long, default_value_t = 32)]
    width: usize,
    #[arg(long, default_value_t = 0.05)]
    noise_std: f64,
    /// Fraction of each class held out for testing.
    #[arg(long, default_value_t = 0.2)]
    test_fraction: f64,
    #[arg(long, default_value_t = 0.0)]
    score_min: f64,
    #[arg(long, default_value_t = 10.0)]
    score_max: f64,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Continue from this checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Loss log path; defaults to the checkpoint path with `.log.json` appended.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Stop after this many optimizer steps in total.
    #[arg(long)]
    max_steps: Option<usize>,
    /// Print a progress line every this many steps (0 disables).
    #[arg(long, default_value_t = 25)]
    print_every: usize,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    report: PathBuf,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    video: String,
    /// Exemplar count; defaults to the checkpoint's configured value.
    #[arg(long)]
    exemplars: Option<usize>,
    /// Exemplar selection seed; defaults to the configured evaluation seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct PlotArgs {
    #[arg(long)]
    report: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn exit_code(e: &Error) -> u8 {
    match e.kind() {
        ErrorKind::Config => 2,
        ErrorKind::Data => 3,
        ErrorKind::Numeric => 4,
    }
}

fn write_file(path: &Path, contents: &str) -> mcore::Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn gen(a: GenArgs) -> mcore::Result<()> {
    let mut spec = SynthSpec::new(a.num_videos, a.num_classes, a.seed).with_layout(a.frames, a.stages);
    spec.channels = a.channels;
    spec.height = a.height;
    spec.width = a.width;
    spec.noise_std = a.noise_std;
    spec.test_fraction = a.test_fraction;
    spec.score_range = ScoreRange::new(a.score_min, a.score_max)?;
    let d = generate_synthetic_dataset(&spec)?;
    save_dataset(&d, &a.out)?;
    eprintln!(
        "wrote {} videos ({} train, {} test) to {}",
        d.videos.len(),
        d.split.train.len(),
        d.split.test.len(),
        a.out.display()
    );
    Ok(())
}

fn train(a: TrainArgs) -> mcore::Result<()> {
    let config = TrainConfig::load(&a.config)?;
    let data = load_dataset(&a.data)?;
    let resume = a.resume.as_deref().map(Checkpoint::load).transpose()?;
    let every = a.print_every;
    let progress = move |r: &mcore::engine::StepRecord| {
        if every > 0 && r.step % every == 0 {
            eprintln!(
                "step {:6}  loss {:.4}  (aqa {:.4}  ce {:.4}  cont {:.4})  lr {:.2e}",
                r.step, r.total, r.l_aqa, r.l_ce, r.l_cont, r.lr
            );
        }
    };
    let (ckpt, log) = mcore::engine::train_with(
        &config,
        &data,
        TrainOptions {
            resume,
            max_steps: a.max_steps,
            on_step: Some(&progress),
        },
    )?;
    ckpt.save(&a.out)?;
    let log_path = a.log.unwrap_or_else(|| {
        let mut p = a.out.clone().into_os_string();
        p.push(".log.json");
        p.into()
    });
    write_file(&log_path, &serde_json::to_string_pretty(&log)?)?;
    eprintln!(
        "trained {} steps in {:.1}s; checkpoint {}, log {}",
        log.steps.len(),
        log.wall_clock_secs,
        a.out.display(),
        log_path.display()
    );
    Ok(())
}

fn eval(a: EvalArgs) -> mcore::Result<()> {
    let model = Checkpoint::load(&a.ckpt)?.model()?;
    let data = load_dataset(&a.data)?;
    let report = evaluate(&model, &data)?;
    report.save(&a.report)?;
    let srcc = report.srcc.map_or_else(
        || format!("undefined ({})", report.srcc_note.as_deref().unwrap_or("")),
        |s| format!("{s:.4}"),
    );
    println!("srcc        {srcc}");
    println!("r_l2 x100   {:.4}", report.r_l2_x100);
    for (d, v) in &report.aiou {
        println!("aiou@{d:<6} {v:.4}");
    }
    Ok(())
}

fn score(a: ScoreArgs) -> mcore::Result<()> {
    let model = Checkpoint::load(&a.ckpt)?.model()?;
    let data = load_dataset(&a.data)?;
    model.config.check_dataset(&data)?;
    let video = data
        .get(&a.video)
        .ok_or_else(|| Error::InvalidArgument(format!("no video {:?} in {}", a.video, a.data.display())))?;
    let p = a.exemplars.unwrap_or(model.config.num_exemplars);
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed.unwrap_or(model.config.eval_seed));
    let (s_hat, details) = infer_score(&model, video, &data, p, &mut rng)?;
    let out = serde_json::json!({
        "video": video.id,
        "class_code": video.class_code,
        "score": s_hat,
        "true_score": video.score,
        "details": details,
    });
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(())
}

fn plot(a: PlotArgs) -> mcore::Result<()> {
    let report = MetricsReport::load(&a.report)?;
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let scatter = a.out.join("score_scatter.svg");
    let bars = a.out.join("iou_bars.svg");
    write_file(&scatter, &plot::score_scatter(&report))?;
    write_file(&bars, &plot::iou_bars(&report))?;
    eprintln!("wrote {} and {}", scatter.display(), bars.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen(a) => gen(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Score(a) => score(a),
        Command::Plot(a) => plot(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
