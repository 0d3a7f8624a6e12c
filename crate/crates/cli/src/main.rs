use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use msfrcnn::checkpoint::Checkpoint;
use msfrcnn::config::RunConfig;
use msfrcnn::eval::{evaluate_dataset, ImageDetections};
use msfrcnn::gradcheck::run_suite;
use msfrcnn::io::{encode_overlay, encode_pgm, format_detections, parse_annotations, parse_detections, AnnotationFile};
use msfrcnn::model::{FusionMode, InferenceConfig, ModelConfig, Network};
use msfrcnn::pipeline::{load_labeled_images, run_ablation, train_network, LabeledImage, EVAL_MIN_SCORE};
use msfrcnn::synth::generate_toy_dataset;
use msfrcnn::train::{write_trace, Sample};
use msfrcnn::Error;

#[derive(Parser)]
#[command(name = "msfrcnn", version, about = "Multi-scale Faster R-CNN face detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// key = value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a configuration key (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic toy-face dataset.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output directory; receives annotations.txt and images/.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a network and write its checkpoint and loss trace.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Annotation file of the training set.
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        trace: PathBuf,
    },
    /// Run a trained network over the images of an annotation file.
    Detect {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        annotations: PathBuf,
        /// Directory for one `<image>.det` file per image.
        #[arg(long)]
        out: PathBuf,
        /// Also write `<image>.overlay.ppm` with detections above score_thresh.
        #[arg(long)]
        overlay: bool,
    },
    /// Score detection files against annotations.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        annotations: PathBuf,
        /// Directory of `<image>.det` files.
        #[arg(long)]
        detections: PathBuf,
        /// Report file; printed to stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of every differentiable operation.
    Gradcheck {
        #[arg(long, default_value_t = 5)]
        seeds: usize,
    },
    /// Train multi-scale and tap5-only models on the same data and compare.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        train_annotations: PathBuf,
        #[arg(long)]
        test_annotations: PathBuf,
        /// Directory for the two reports.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Tracks files written by a command so a failure can remove them.
#[derive(Default)]
struct Outputs {
    created: Vec<PathBuf>,
}

impl Outputs {
    fn write(&mut self, path: &Path, bytes: &[u8]) -> msfrcnn::Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            let mut missing = Vec::new();
            let mut p = parent;
            while !p.as_os_str().is_empty() && !p.exists() {
                missing.push(p.to_path_buf());
                match p.parent() {
                    Some(q) => p = q,
                    None => break,
                }
            }
            fs::create_dir_all(parent)?;
            self.created.extend(missing.into_iter().rev());
        }
        // Only paths this run brought into existence are ever removed.
        let existed = path.exists();
        let res = fs::write(path, bytes);
        if !existed && path.is_file() {
            self.created.push(path.to_path_buf());
        }
        res?;
        Ok(())
    }

    fn cleanup(&self) {
        for p in self.created.iter().rev() {
            if p.is_dir() {
                let _ = fs::remove_dir(p);
            } else {
                let _ = fs::remove_file(p);
            }
        }
    }
}

fn load_config(args: &ConfigArgs) -> msfrcnn::Result<RunConfig> {
    let text = match &args.config {
        Some(p) => fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?,
        None => String::new(),
    };
    let mut cfg = RunConfig::parse(&text)?;
    for o in &args.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, found {o:?}")))?;
        cfg.set(k.trim(), v.trim()).map_err(Error::Config)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn require_file(p: &Path) -> msfrcnn::Result<()> {
    if p.is_file() {
        Ok(())
    } else {
        Err(Error::Config(format!("{} is not a readable file", p.display())))
    }
}

fn model_for_checkpoint(cfg: &RunConfig, ck: &Checkpoint) -> ModelConfig {
    let mode = if ck.get("norm.tap3.gamma").is_some() {
        FusionMode::MultiScale
    } else {
        FusionMode::Tap5Only
    };
    ModelConfig {
        mode,
        ..cfg.model.clone()
    }
}

fn det_path(dir: &Path, image: &str) -> PathBuf {
    dir.join(format!("{image}.det"))
}

fn collect_det_files(dir: &Path, rel: &Path, out: &mut Vec<(String, PathBuf)>) -> msfrcnn::Result<()> {
    let mut entries: Vec<_> = fs::read_dir(dir)?.collect::<std::io::Result<_>>()?;
    entries.sort_by_key(|e| e.file_name());
    for e in entries {
        let path = e.path();
        let name = rel.join(e.file_name());
        if path.is_dir() {
            collect_det_files(&path, &name, out)?;
        } else if let Some(id) = name.to_str().and_then(|s| s.strip_suffix(".det")) {
            out.push((id.replace('\\', "/"), path));
        }
    }
    Ok(())
}

fn run(command: Command, outputs: &mut Outputs) -> msfrcnn::Result<()> {
    match command {
        Command::GenData { cfg, out } => {
            let cfg = load_config(&cfg)?;
            let d = cfg.data;
            let scenes = generate_toy_dataset(d.num_images, cfg.train.image_size, (d.face_min, d.face_max), d.data_seed)?;
            let mut ann = AnnotationFile::default();
            for (i, s) in scenes.iter().enumerate() {
                let name = format!("images/img_{i:05}.pgm");
                outputs.write(&out.join(&name), &encode_pgm(&s.image)?)?;
                ann.records.push(msfrcnn::eval::ImageAnnotation {
                    image: name,
                    boxes: s.gt_boxes.clone(),
                });
                if s.dropped > 0 {
                    eprintln!("img_{i:05}: {} face(s) could not be placed", s.dropped);
                }
            }
            outputs.write(&out.join("annotations.txt"), ann.serialize().as_bytes())?;
            println!("wrote {} images to {}", scenes.len(), out.display());
        }
        Command::Train {
            cfg,
            annotations,
            checkpoint,
            trace,
        } => {
            let cfg = load_config(&cfg)?;
            require_file(&annotations)?;
            let images = load_labeled_images(&annotations)?;
            let data: Vec<Sample> = images.iter().map(LabeledImage::to_sample).collect();
            let (net, entries) = train_network(&cfg.model, &cfg.train, &data, |e| eprintln!("{}", e.to_line()))?;
            let mut bytes = Vec::new();
            write_trace(&mut bytes, &entries)?;
            outputs.write(&trace, &bytes)?;
            outputs.write(&checkpoint, &net.to_checkpoint().to_bytes())?;
        }
        Command::Detect {
            cfg,
            checkpoint,
            annotations,
            out,
            overlay,
        } => {
            let cfg = load_config(&cfg)?;
            require_file(&checkpoint)?;
            require_file(&annotations)?;
            let ck = Checkpoint::from_bytes(&fs::read(&checkpoint)?)?;
            let net = Network::from_checkpoint(model_for_checkpoint(&cfg, &ck), &ck)?;
            let images = load_labeled_images(&annotations)?;
            let inf = InferenceConfig {
                score_thresh: EVAL_MIN_SCORE,
                ..cfg.inference
            };
            for li in &images {
                let dets = net.detect(&li.image.tensor, li.image.extent(), &inf)?;
                let id = &li.annotation.image;
                outputs.write(&det_path(&out, id), format_detections(&dets).as_bytes())?;
                if overlay {
                    let shown: Vec<_> = dets
                        .iter()
                        .filter(|d| d.score > cfg.inference.score_thresh)
                        .map(|d| d.bbox)
                        .collect();
                    let ppm = encode_overlay(&li.image.tensor, li.image.width, li.image.height, &shown)?;
                    outputs.write(&out.join(format!("{id}.overlay.ppm")), &ppm)?;
                }
            }
            println!("wrote detections for {} images to {}", images.len(), out.display());
        }
        Command::Eval {
            cfg,
            annotations,
            detections,
            out,
        } => {
            let cfg = load_config(&cfg)?;
            require_file(&annotations)?;
            if !detections.is_dir() {
                return Err(Error::Config(format!("{} is not a directory", detections.display())));
            }
            let ann = parse_annotations(&annotations)?;
            let mut files = Vec::new();
            collect_det_files(&detections, Path::new(""), &mut files)?;
            let dets = files
                .into_iter()
                .map(|(image, path)| {
                    let text = fs::read_to_string(&path)?;
                    Ok(ImageDetections {
                        detections: parse_detections(&text, &path.display().to_string())?,
                        image,
                    })
                })
                .collect::<msfrcnn::Result<Vec<_>>>()?;
            let report = evaluate_dataset(&dets, &ann.records, &cfg.eval)?.to_text();
            match out {
                Some(p) => outputs.write(&p, report.as_bytes())?,
                None => print!("{report}"),
            }
        }
        Command::Gradcheck { seeds } => {
            if seeds == 0 {
                return Err(Error::Config("--seeds must be positive".into()));
            }
            println!("{:<24} {:>6} {:>14}  result", "operation", "seeds", "max_rel_error");
            let rows = run_suite(seeds, |r| {
                println!(
                    "{:<24} {:>6} {:>14.3e}  {}",
                    r.op,
                    r.seeds,
                    r.max_rel_error,
                    if r.passed { "pass" } else { "FAIL" }
                )
            })?;
            if let Some(r) = rows.iter().find(|r| !r.passed) {
                return Err(Error::GradCheckFailed {
                    op: r.op.to_string(),
                    error: r.max_rel_error,
                });
            }
        }
        Command::Ablate {
            cfg,
            train_annotations,
            test_annotations,
            out,
        } => {
            let cfg = load_config(&cfg)?;
            require_file(&train_annotations)?;
            require_file(&test_annotations)?;
            let train_set = load_labeled_images(&train_annotations)?;
            let test = load_labeled_images(&test_annotations)?;
            let result = run_ablation(&cfg, &train_set, &test)?;
            for (name, report) in [("multiscale", &result.multiscale), ("tap5", &result.tap5)] {
                let text = report.to_text();
                println!("[{name}]");
                for line in text.lines().take_while(|l| !l.starts_with('[')) {
                    println!("{line}");
                }
                if let Some(dir) = &out {
                    outputs.write(&dir.join(format!("report_{name}.txt")), text.as_bytes())?;
                }
            }
            if let Some(m) = result.margin() {
                println!("ap_margin={m:.6}");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let mut outputs = Outputs::default();
    match run(cli.command, &mut outputs) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            outputs.cleanup();
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
