use std::error::Error as _;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use foodlens::config::PipelineConfig;
use foodlens::error::PipelineError;
use foodlens::stages;
use foodlens_core::SplitTag;

#[derive(Parser, Debug)]
#[command(name = "foodlens", version, about = "Food detection, classification and portion estimation")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// JSON pipeline config; defaults apply to every missing key.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for data, checkpoints and reports.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    GenerateSynthetic,
    Augment,
    TrainDetector,
    TrainClassifier,
    TrainEnergyGan {
        /// Weight of the L1 term in the generator loss.
        #[arg(long, allow_negative_numbers = true)]
        lambda: Option<f64>,
    },
    TrainRegressor,
    Infer(EvalArgs),
    Evaluate(EvalArgs),
    Plot,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Comma separated IoU thresholds, e.g. 0.5,0.75.
    #[arg(long, value_delimiter = ',')]
    iou_thresholds: Option<Vec<f64>>,
    #[arg(long)]
    split: Option<SplitTag>,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenerateSynthetic => "generate-synthetic",
            Command::Augment => "augment",
            Command::TrainDetector => "train-detector",
            Command::TrainClassifier => "train-classifier",
            Command::TrainEnergyGan { .. } => "train-energy-gan",
            Command::TrainRegressor => "train-regressor",
            Command::Infer(_) => "infer",
            Command::Evaluate(_) => "evaluate",
            Command::Plot => "plot",
        }
    }
}

fn resolve_config(common: &Common, command: &Command) -> foodlens::Result<PipelineConfig> {
    let mut config = match &common.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    if let Some(out) = &common.out {
        config.paths.out_dir = out.clone();
    }
    match command {
        Command::TrainEnergyGan { lambda: Some(l) } => config.gan.lambda = *l,
        Command::Infer(a) | Command::Evaluate(a) => {
            if let Some(t) = &a.iou_thresholds {
                config.eval.iou_thresholds = t.clone();
            }
            if let Some(s) = a.split {
                config.eval.split = s;
            }
        }
        _ => {}
    }
    config.validate()?;
    Ok(config)
}

fn run(config: &PipelineConfig, command: &Command) -> foodlens::Result<Vec<PathBuf>> {
    let outputs = match command {
        Command::GenerateSynthetic => {
            let m = stages::generate_synthetic(config)?;
            log::info!("wrote {} scenes", m.records.len());
            vec![config.data_manifest_path()]
        }
        Command::Augment => {
            let m = stages::augment(config)?;
            log::info!("augmented manifest has {} records", m.records.len());
            vec![config.augmented_manifest_path()]
        }
        Command::TrainDetector => {
            stages::train_detector_stage(config)?;
            vec![config.checkpoint("detector")]
        }
        Command::TrainClassifier => {
            let model = stages::train_classifier_stage(config)?;
            if let Some(acc) = model.log().last().and_then(|e| e.val_metric) {
                println!("classifier val accuracy: {acc:.4}");
            }
            vec![config.checkpoint("classifier")]
        }
        Command::TrainEnergyGan { .. } => {
            stages::train_gan_stage(config)?;
            vec![config.checkpoint("energy_gan")]
        }
        Command::TrainRegressor => {
            let models = stages::train_regressor_stage(config)?;
            models.iter().map(|m| config.regressor_checkpoint(m.hyper().channels)).collect()
        }
        Command::Infer(_) => {
            let (results, report) = stages::infer(config)?;
            log::info!("processed {} images", results.len());
            print!("{}", report.to_text());
            vec![stages::predictions_path(config), stages::eval_report_path(config)]
        }
        Command::Evaluate(_) => {
            let report = stages::evaluate(config)?;
            print!("{}", report.to_text());
            vec![stages::eval_report_path(config)]
        }
        Command::Plot => vec![stages::plot(config)?],
    };
    stages::append_run_log(config, command.name(), &outputs)?;
    Ok(outputs)
}

/// One line: command, innermost stage and the full cause chain as a JSON string.
fn error_line(command: &str, err: &PipelineError) -> String {
    let mut reason = err.to_string();
    let mut source = err.source();
    let mut stage = err.stage();
    while let Some(s) = source {
        // thiserror messages often embed their source already
        let msg = s.to_string();
        if !reason.ends_with(&msg) {
            reason.push_str(": ");
            reason.push_str(&msg);
        }
        if let Some(p) = s.downcast_ref::<PipelineError>() {
            stage = p.stage().or(stage);
        }
        source = s.source();
    }
    let reason = reason.replace(['\n', '\r'], " ");
    format!(
        "error: command={command} stage={} reason={}",
        stage.unwrap_or(command),
        serde_json::to_string(&reason).expect("string serializes")
    )
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let name = cli.command.name();
    let result = resolve_config(&cli.common, &cli.command).and_then(|c| run(&c, &cli.command));
    match result {
        Ok(outputs) => {
            for p in outputs {
                println!("{}", p.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", error_line(name, &e));
            ExitCode::FAILURE
        }
    }
}
