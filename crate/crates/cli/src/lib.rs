//! `promptseg` command line.
//!
//! Exit codes: 0 on success, 1 on a domain error (printed as a single
//! `error[kind]: message` line on stderr), 2 on a usage error such as a bad
//! flag, a missing config file or an unknown config key.

pub mod config;

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use promptseg::backbone::{BinaryMask, ManualPrompts, PointLabel, PointPrompt};
use promptseg::data::io::{encode_mask_png, load_dataset, read_image, read_stem_list, save_dataset, select_stems};
use promptseg::data::synth::{synth_generate, SynthConfig};
use promptseg::data::{resize_pad, Sample};
use promptseg::eval::{evaluate, format_table, PromptMode, Tags};
use promptseg::model::PromptSegmenter;
use promptseg::training::{build_model, few_shot_train, metrics_writer, prepare_samples, train, TrainConfig, TrainHooks};
use promptseg::Error;

use crate::config::ConfigError;

#[derive(Debug, Parser)]
#[command(name = "promptseg", version, about = "Learned prompts for promptable segmentation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    Synth(SynthArgs),
    /// Train the prompt predictor (and adapters, per the freeze policy).
    Train(TrainArgs),
    /// Train on a seeded subset of k images.
    FewShot(FewShotArgs),
    /// Score a checkpoint on a dataset and print a metrics table.
    Eval(EvalArgs),
    /// Segment one image and write the mask as PNG.
    Predict(PredictArgs),
    /// Run the HTTP service.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 100)]
    pub count: usize,
    #[arg(long, default_value_t = 0.2)]
    pub empty_fraction: f64,
    #[arg(long, default_value_t = 256)]
    pub height: usize,
    #[arg(long, default_value_t = 256)]
    pub width: usize,
    #[arg(long, default_value_t = 1)]
    pub num_classes: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// TOML config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dotted `key=value` overrides applied after the file.
    #[arg(value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Continue from a training checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FewShotArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long, default_value_t = 10)]
    pub k: usize,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Repeatable: gt_box, learned, learned_plus_box, cosine_baseline.
    #[arg(long = "mode", default_value = "learned")]
    pub modes: Vec<String>,
    /// File of stems to evaluate.
    #[arg(long)]
    pub split: Option<PathBuf>,
    /// Dataset whose first non-empty sample is the cosine-baseline reference.
    #[arg(long)]
    pub reference: Option<PathBuf>,
    #[arg(long)]
    pub model_name: Option<String>,
    #[arg(long)]
    pub dataset_name: Option<String>,
    /// Write per-image scores as TSV.
    #[arg(long)]
    pub per_image: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    /// auto, manual or semi.
    #[arg(long, default_value = "auto")]
    pub mode: String,
    #[arg(long = "class", default_value_t = 0)]
    pub class_id: usize,
    /// `x,y,fg` or `x,y,bg` in original pixels; repeatable.
    #[arg(long = "point")]
    pub points: Vec<String>,
    /// `x1,y1,x2,y2` in original pixels; repeatable.
    #[arg(long = "box")]
    pub boxes: Vec<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long)]
    pub port: Option<u16>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Domain(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Domain(e)
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Usage(e.0)
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Domain(_) => 1,
        }
    }

    /// One line, `error[kind]: message`.
    pub fn line(&self) -> String {
        let (kind, msg) = match self {
            CliError::Usage(m) => ("usage", m.clone()),
            CliError::Domain(e) => (e.kind(), e.to_string()),
        };
        format!("error[{kind}]: {}", msg.replace('\n', " "))
    }
}

type CliResult<T> = Result<T, CliError>;

/// Parses `argv` (including the program name), runs the command and returns
/// the exit code. Tables go to `stdout`; diagnostics to stderr.
pub fn run<I, T>(argv: I, stdout: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command, stdout) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", e.line());
            e.exit_code()
        }
    }
}

fn dispatch(command: Command, out: &mut dyn Write) -> CliResult<()> {
    match command {
        Command::Synth(a) => synth(a, out),
        Command::Train(a) => {
            let cfg = load_config(&a.config)?;
            run_training(&cfg.train, None, a.resume.as_deref(), out)
        }
        Command::FewShot(a) => {
            let cfg = load_config(&a.config)?;
            run_training(&cfg.train, Some(a.k), None, out)
        }
        Command::Eval(a) => eval(a, out),
        Command::Predict(a) => predict(a, out),
        Command::Serve(a) => serve(a),
    }
}

fn load_config(args: &ConfigArgs) -> CliResult<config::Config> {
    if let Some(p) = &args.config {
        if !p.is_file() {
            return Err(CliError::Usage(format!("config file {} does not exist", p.display())));
        }
    }
    Ok(config::load(args.config.as_deref(), &args.overrides)?)
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Domain(Error::io(path, e))
}

fn synth(a: SynthArgs, out: &mut dyn Write) -> CliResult<()> {
    let cfg = SynthConfig {
        empty_fraction: a.empty_fraction,
        height: a.height,
        width: a.width,
        num_classes: a.num_classes,
        ..SynthConfig::new(a.seed, a.count)
    };
    let samples = synth_generate(&cfg)?;
    save_dataset(&a.out, &samples)?;
    let empty = samples.iter().filter(|s| s.masks.iter().all(BinaryMask::is_empty)).count();
    writeln!(out, "wrote {} samples ({empty} empty) to {}", samples.len(), a.out.display()).map_err(io_err(&a.out))?;
    Ok(())
}

fn load_split(root: &Path, split: Option<&Path>, num_classes: usize) -> CliResult<Vec<Sample>> {
    let all = load_dataset(root, Some(num_classes))?;
    Ok(match split {
        Some(s) => select_stems(&all, &read_stem_list(s)?)?,
        None => all,
    })
}

fn run_training(cfg: &TrainConfig, few_shot: Option<usize>, resume: Option<&Path>, out: &mut dyn Write) -> CliResult<()> {
    cfg.validate()?;
    let train_dir = cfg
        .data
        .train
        .as_deref()
        .ok_or_else(|| Error::Config("data.train is not set".into()))?;
    let mut cfg = cfg.clone();
    let output_dir = cfg.output_dir.get_or_insert_with(|| PathBuf::from("runs")).clone();
    let geometry = cfg.geometry()?;
    let samples = prepare_samples(&load_split(train_dir, cfg.data.train_split.as_deref(), cfg.num_classes)?, &geometry)?;
    if samples.is_empty() {
        return Err(Error::Config(format!("no training images under {}", train_dir.display())).into());
    }
    let model = build_model(&cfg)?;
    let metrics_path = output_dir.join("metrics.jsonl");
    let mut metrics = metrics_writer(&metrics_path)?;
    let hooks = TrainHooks {
        metrics: Some(&mut metrics),
        resume_from: resume,
        on_step: None,
    };
    let outcome = match few_shot {
        Some(k) => few_shot_train(model, &samples, k, &cfg, hooks)?,
        None => train(model, &samples, &cfg, hooks)?,
    };
    metrics.flush().map_err(io_err(&metrics_path))?;
    let c = outcome.census;
    writeln!(
        out,
        "trained {} steps: {} trainable / {} total parameters",
        outcome.log.len(),
        c.trainable,
        c.total
    )
    .map_err(io_err(&output_dir))?;
    if let Some(last) = outcome.log.last() {
        writeln!(out, "final loss {:.6}", last.loss.total).map_err(io_err(&output_dir))?;
    }
    for p in &outcome.checkpoints {
        writeln!(out, "checkpoint {}", p.display()).map_err(io_err(p))?;
    }
    if let Some(test_dir) = cfg.data.test.as_deref() {
        let test = prepare_samples(&load_split(test_dir, cfg.data.test_split.as_deref(), cfg.num_classes)?, &geometry)?;
        let e = evaluate(
            &outcome.model,
            &test,
            PromptMode::Learned,
            Tags {
                model: "trained",
                dataset: "test",
            },
            None,
        )?;
        write!(out, "{}", format_table(&[e.row])).map_err(io_err(test_dir))?;
    }
    Ok(())
}

fn file_tag(p: &Path) -> String {
    p.file_stem().or(p.file_name()).map_or_else(|| "?".into(), |s| s.to_string_lossy().into_owned())
}

fn eval(a: EvalArgs, out: &mut dyn Write) -> CliResult<()> {
    let modes = a
        .modes
        .iter()
        .map(|m| m.parse::<PromptMode>())
        .collect::<Result<Vec<_>, _>>()?;
    let model = PromptSegmenter::load(&a.checkpoint)?;
    let geometry = model.geometry().clone();
    let k = model.ppn.config.num_classes;
    let samples = prepare_samples(&load_split(&a.data, a.split.as_deref(), k)?, &geometry)?;
    let reference = match &a.reference {
        Some(dir) => {
            let refs = prepare_samples(&load_dataset(dir, Some(k))?, &geometry)?;
            Some(
                refs.into_iter()
                    .find(|s| s.masks.iter().all(|m| !m.is_empty()))
                    .ok_or_else(|| Error::Input(format!("no reference sample in {} has every class", dir.display())))?,
            )
        }
        None => None,
    };
    let model_tag = a.model_name.clone().unwrap_or_else(|| file_tag(&a.checkpoint));
    let dataset_tag = a.dataset_name.clone().unwrap_or_else(|| file_tag(&a.data));
    let mut rows = Vec::new();
    let mut per_image = String::from("prompt_mode\tsample_id\tclass_id\tgt_present\tobject_present\tdice\tiou\n");
    for mode in modes {
        let e = evaluate(
            &model,
            &samples,
            mode,
            Tags {
                model: &model_tag,
                dataset: &dataset_tag,
            },
            reference.as_ref(),
        )?;
        for s in &e.per_image {
            per_image.push_str(&format!(
                "{mode}\t{}\t{}\t{}\t{}\t{:.6}\t{:.6}\n",
                s.sample_id, s.class_id, s.gt_present, s.object_present, s.dice, s.iou
            ));
        }
        rows.push(e.row);
    }
    if let Some(p) = &a.per_image {
        std::fs::write(p, per_image).map_err(io_err(p))?;
    }
    write!(out, "{}", format_table(&rows)).map_err(io_err(&a.data))?;
    Ok(())
}

fn parse_floats(s: &str, n: usize, what: &str) -> CliResult<Vec<f64>> {
    let v: Vec<f64> = s
        .split(',')
        .map(|t| t.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| CliError::Usage(format!("{what} `{s}` must be {n} comma-separated numbers")))?;
    if v.len() != n {
        return Err(CliError::Usage(format!("{what} `{s}` must be {n} comma-separated numbers")));
    }
    Ok(v)
}

fn predict(a: PredictArgs, out: &mut dyn Write) -> CliResult<()> {
    let model = PromptSegmenter::load(&a.checkpoint)?;
    let image = read_image(&a.image)?;
    let sample = resize_pad(&Sample::new(file_tag(&a.image), image, Vec::new()), model.geometry().input_size)?;
    let pad = sample.pad;
    let mut manual = ManualPrompts::default();
    for p in &a.points {
        let (xy, label) = p
            .rsplit_once(',')
            .ok_or_else(|| CliError::Usage(format!("point `{p}` must be x,y,fg or x,y,bg")))?;
        let label = match label.trim() {
            "fg" => PointLabel::Foreground,
            "bg" => PointLabel::Background,
            other => return Err(CliError::Usage(format!("point label `{other}` must be fg or bg"))),
        };
        let v = parse_floats(xy, 2, "point")?;
        let (x, y) = pad.normalize_point(v[0], v[1]);
        manual.points.push(PointPrompt { x, y, label });
    }
    for b in &a.boxes {
        let v = parse_floats(b, 4, "box")?;
        manual.boxes.push(pad.normalize_box([v[0], v[1], v[2], v[3]]));
    }
    manual.validate(model.geometry())?;
    let embedding = model.backbone.encode_image(&sample.image)?;
    let (result, learned_box) = match a.mode.as_str() {
        "auto" | "semi" => {
            if a.mode == "auto" && !manual.is_empty() {
                return Err(Error::Input("auto mode does not accept prompts".into()).into());
            }
            let prompts = (!manual.is_empty()).then_some(&manual);
            let (r, b) = model.segment_embedding_learned(&embedding, a.class_id, prompts)?;
            (r, Some(pad.denormalize_box(b)))
        }
        "manual" => {
            if manual.is_empty() {
                return Err(Error::Input("manual mode needs at least one --point or --box".into()).into());
            }
            (model.segment_manual(&embedding, &manual)?, None)
        }
        other => return Err(CliError::Usage(format!("unknown mode `{other}` (auto, manual or semi)"))),
    };
    let model_mask = if a.mode == "manual" { result.mask.clone() } else { result.gated_mask() };
    let mask = pad.mask_to_original(&model_mask);
    std::fs::write(&a.out, encode_mask_png(&mask)?).map_err(io_err(&a.out))?;
    let summary = serde_json::json!({
        "mask": a.out,
        "height": mask.height,
        "width": mask.width,
        "foreground_pixels": mask.data.iter().filter(|&&v| v != 0).count(),
        "object_present": result.object_present,
        "objectness_logit": result.objectness_logit,
        "learned_box": learned_box,
    });
    writeln!(out, "{summary}").map_err(io_err(&a.out))?;
    Ok(())
}

fn serve(a: ServeArgs) -> CliResult<()> {
    let mut cfg = load_config(&a.config)?.serve;
    if let Some(p) = a.port {
        cfg.port = p;
    }
    if let Some(c) = a.checkpoint {
        cfg.checkpoint = Some(c);
    }
    let ckpt = cfg
        .checkpoint
        .clone()
        .ok_or_else(|| Error::Config("serve.checkpoint is not set".into()))?;
    let model = PromptSegmenter::load(&ckpt)?;
    let state = promptseg_service::AppState::new(model, &cfg);
    let runtime = tokio::runtime::Runtime::new().map_err(io_err(Path::new("tokio runtime")))?;
    let addr = format!("0.0.0.0:{}", cfg.port);
    runtime
        .block_on(promptseg_service::serve(state, cfg.port))
        .map_err(io_err(Path::new(&addr)))
}
