use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use pcam_core::evaluation::{evaluate, group_boxes, read_labels_csv, read_scores_csv, write_scores_csv, AnnotationSet};
use pcam_core::localization::{read_boxes_csv, write_boxes_csv, BoxRecord};
use pcam_core::pgm::{read_pgm, to_u8_image, to_unit_image, write_pgm};
use pcam_core::synthetic::{generate_dataset, read_dataset, write_dataset, SynthConfig};
use pcam_core::trainer::{
    gradcheck, infer, infer_cam, init_state, load_checkpoint, load_model, predict, save_checkpoint, save_model,
    train_until, LocalizationPath, TrainConfig,
};
use pcam_core::{Grid, PoolSpec};

/// Gradient checks past this relative error are reported as failures.
const GRADCHECK_TOL: f64 = 1e-5;

#[derive(Parser)]
#[command(name = "pcam", version, about = "Probabilistic-CAM pooling and weakly supervised localization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check analytic gradients of one pooling kind against finite differences.
    Gradcheck {
        #[arg(long)]
        kind: String,
        /// LSE sharpness, or the LSE-LBA lower bound.
        #[arg(long)]
        gamma: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write a synthetic dataset directory.
    SynthGen {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a model on a dataset directory.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "pcam")]
        pooling: String,
        #[arg(long)]
        gamma: Option<f64>,
        #[arg(long, default_value_t = 0.01)]
        lr: f64,
        #[arg(long, default_value_t = 0.9)]
        momentum: f64,
        #[arg(long, default_value_t = 20)]
        epochs: usize,
        #[arg(long, default_value_t = 16)]
        batch: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Also write the optimizer state here when training stops.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Continue from a checkpoint written with the same settings.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Localize classes in one PGM image.
    Infer {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value_t = 0.9)]
        tau: f64,
        /// Heatmap path; with several classes `_{k}` goes before the extension.
        #[arg(long)]
        heatmap: Option<PathBuf>,
        #[arg(long)]
        boxes: Option<PathBuf>,
        /// Use the normalized-CAM path (threshold 180 of 255) instead of probabilities.
        #[arg(long)]
        baseline: bool,
    },
    /// Write predicted boxes and image scores for every image of a dataset.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0.9)]
        tau: f64,
        #[arg(long)]
        boxes: PathBuf,
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        baseline: bool,
    },
    /// Score predictions against ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        scores: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        iobb: f64,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("pcam: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Gradcheck { kind, gamma, seed } => {
            let spec = PoolSpec::parse(&kind, gamma)?;
            let report = gradcheck(&spec, seed)?;
            println!("kind {} seed {seed}", spec.label());
            for g in &report.groups {
                println!("  {:<12} {:>4} params  max rel err {:.3e}", g.group, g.count, g.max_rel_err);
            }
            let worst = report.max_rel_err();
            println!("max rel err {worst:.3e}");
            if worst >= GRADCHECK_TOL {
                eprintln!("pcam: gradient check failed ({worst:.3e} >= {GRADCHECK_TOL:e})");
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::SynthGen { out, n, seed } => {
            let cfg = SynthConfig::new(seed, n);
            let samples = generate_dataset(&cfg)?;
            write_dataset(&out, &cfg, &samples).with_context(|| format!("writing {}", out.display()))?;
            println!("wrote {n} images to {}", out.display());
        }
        Command::Train {
            data,
            pooling,
            gamma,
            lr,
            momentum,
            epochs,
            batch,
            seed,
            out,
            checkpoint,
            resume,
        } => {
            let (_, samples) = read_dataset(&data).with_context(|| format!("reading {}", data.display()))?;
            let config = TrainConfig {
                pooling: PoolSpec::parse(&pooling, gamma)?,
                lr,
                momentum,
                batch_size: batch,
                epochs,
                seed,
                ..TrainConfig::default()
            };
            let mut state = match &resume {
                Some(p) => load_checkpoint(p).with_context(|| format!("reading {}", p.display()))?,
                None => init_state(&config, &samples)?,
            };
            for e in train_until(&config, &samples, &mut state, epochs)? {
                let auc: Vec<String> = e
                    .valid_auc
                    .iter()
                    .map(|a| a.map_or_else(|| "NA".into(), |a| format!("{a:.4}")))
                    .collect();
                println!("epoch {:>3}  loss {:.6}  valid auc {}", e.epoch, e.train_loss, auc.join(" "));
            }
            save_model(&out, &state.model).with_context(|| format!("writing {}", out.display()))?;
            if let Some(p) = &checkpoint {
                save_checkpoint(p, &state).with_context(|| format!("writing {}", p.display()))?;
            }
        }
        Command::Infer {
            model,
            image,
            tau,
            heatmap,
            boxes,
            baseline,
        } => {
            let model = load_model(&model).with_context(|| format!("reading {}", model.display()))?;
            let img = to_unit_image(&read_pgm(&image).with_context(|| format!("reading {}", image.display()))?);
            let id = image
                .file_stem()
                .map_or_else(|| "image".into(), |s| s.to_string_lossy().into_owned());
            let k = model.num_classes();
            let mut records = Vec::new();
            let mut maps: Vec<Grid<u8>> = Vec::new();
            if baseline {
                for c in infer_cam(&model, &img)? {
                    println!("class {} probability {:.6} boxes {}", c.class_id, c.probability, c.boxes.len());
                    records.extend(c.boxes.iter().map(|b| record(&id, *b)));
                    maps.push(c.heatmap);
                }
            } else {
                for c in infer(&model, &img, tau)? {
                    println!("class {} probability {:.6} boxes {}", c.class_id, c.probability, c.boxes.len());
                    records.extend(c.boxes.iter().map(|b| record(&id, *b)));
                    maps.push(to_u8_image(c.heatmap.grid()));
                }
            }
            if let Some(path) = heatmap {
                for (class, map) in maps.iter().enumerate() {
                    let p = if k == 1 { path.clone() } else { class_path(&path, class) };
                    write_pgm(&p, map).with_context(|| format!("writing {}", p.display()))?;
                }
            }
            if let Some(path) = boxes {
                write_boxes_csv(create(&path)?, &records, true)?;
            }
        }
        Command::Predict {
            model,
            data,
            tau,
            boxes,
            scores,
            baseline,
        } => {
            let model = load_model(&model).with_context(|| format!("reading {}", model.display()))?;
            let (_, samples) = read_dataset(&data).with_context(|| format!("reading {}", data.display()))?;
            let path = if baseline {
                LocalizationPath::Cam
            } else {
                LocalizationPath::Probability { tau }
            };
            let preds = predict(&model, &samples, path)?;
            write_boxes_csv(create(&boxes)?, &preds.box_records(), true)?;
            write_scores_csv(create(&scores)?, &preds.scores)?;
            println!("predicted {} images", samples.len());
        }
        Command::Eval {
            pred,
            gt,
            labels,
            scores,
            iobb,
        } => {
            let labels = read_labels_csv(open(&labels)?)?;
            let Some(k) = labels.values().next().map(Vec::len) else {
                bail!("labels file has no images");
            };
            let gts = AnnotationSet::from_parts(k, labels, &read_boxes_csv(open(&gt)?)?, None)?;
            let preds = group_boxes(&read_boxes_csv(open(&pred)?)?);
            let scores = read_scores_csv(open(&scores)?)?;
            let report = evaluate(&preds, &gts, &scores, iobb)?;
            print!("{}\n{}", report.to_table(), report.to_csv());
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn record(id: &str, bbox: pcam_core::BBox) -> BoxRecord {
    BoxRecord {
        image_id: id.to_string(),
        bbox,
    }
}

fn class_path(path: &Path, class: usize) -> PathBuf {
    let stem = path.file_stem().map_or_else(String::new, |s| s.to_string_lossy().into_owned());
    let name = match path.extension() {
        Some(ext) => format!("{stem}_{class}.{}", ext.to_string_lossy()),
        None => format!("{stem}_{class}"),
    };
    path.with_file_name(name)
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path).with_context(|| format!("opening {}", path.display()))?))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn class_suffix_goes_before_extension() {
        assert_eq!(class_path(Path::new("out/heat.pgm"), 1), PathBuf::from("out/heat_1.pgm"));
        assert_eq!(class_path(Path::new("heat"), 0), PathBuf::from("heat_0"));
    }
}
