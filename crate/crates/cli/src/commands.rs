use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use dispnet_core::autodiff::{inject_backward_fault, Primitive};
use dispnet_core::data::{
    denormalize, generate_synthetic, load_manifest, normalize, read_ply, resample_ids, write_ply, PlyFormat,
    PointCloud,
};
use dispnet_core::gradcheck::{format_table, run, GradcheckConfig, Scope};
use dispnet_core::metrics::{iou, voxelize, MetricReport};
use dispnet_core::model::{build_direct, train_step, Adam, ArchitectureConfig, Checkpoint, Model, RngState, TrainSample};
use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{DataConfig, ReportConfig, ReportFormat, RunConfig};
use crate::exit::{config_error, io_error, Failure, CHECK_FAILED, OK};

struct Named {
    name: String,
    sample: TrainSample,
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), Failure> {
    fs::write(path, contents).map_err(|e| io_error(format!("{}: {e}", path.display())))
}

fn create_dir(path: &Path) -> Result<(), Failure> {
    fs::create_dir_all(path).map_err(|e| io_error(format!("{}: {e}", path.display())))
}

/// Creates the output directory and echoes the effective configuration.
fn prepare_out(cfg: &RunConfig) -> Result<(), Failure> {
    create_dir(&cfg.out)?;
    write_file(&cfg.out.join("config.toml"), cfg.to_toml())
}

/// Loads the configured samples at the architecture's point counts. For
/// synthetic data the counts are written back into `cfg`.
fn load_samples(cfg: &mut RunConfig, arch: &ArchitectureConfig) -> Result<Vec<Named>, Failure> {
    let classes = arch.semantic_classes;
    let check_labels = |name: &str, labels: Option<Vec<usize>>| -> Result<Option<Vec<usize>>, Failure> {
        let Some(n) = classes else { return Ok(None) };
        let labels = labels.ok_or_else(|| io_error(format!("{name}: no class labels for a semantic model")))?;
        if let Some(&bad) = labels.iter().find(|&&l| l >= n) {
            return Err(config_error(format!("{name}: label {bad} exceeds the model's {n} classes")));
        }
        Ok(Some(labels))
    };
    match &mut cfg.data {
        DataConfig::Synthetic(spec) => {
            spec.partial_count = arch.input_points;
            spec.complete_count = arch.output_points;
            let pair = generate_synthetic(spec)?;
            let name = format!("synthetic-{}", spec.seed);
            Ok(vec![Named {
                sample: TrainSample {
                    partial: pair.partial.cloud.to_tensor(),
                    complete: pair.complete.cloud.to_tensor(),
                    labels: check_labels(&name, Some(pair.complete.labels))?,
                },
                name,
            }])
        }
        DataConfig::Dataset { root, split } => {
            let manifest = load_manifest(&*root, split, arch.input_points, arch.output_points)?;
            manifest
                .samples(cfg.seed)
                .map(|s| {
                    let s = s?;
                    if s.resampled {
                        warn!("{}: resampled to the model's point counts", s.name);
                    }
                    Ok(Named {
                        sample: TrainSample {
                            partial: s.partial.to_tensor(),
                            complete: s.complete.to_tensor(),
                            labels: check_labels(&s.name, s.labels)?,
                        },
                        name: s.name,
                    })
                })
                .collect()
        }
    }
}

fn write_report(dir: &Path, stem: &str, report: &MetricReport, formats: &[ReportFormat], header: &str) -> Result<(), Failure> {
    for f in formats {
        match f {
            ReportFormat::KeyValue => write_file(&dir.join(format!("{stem}.txt")), format!("{header}{}", report.to_key_value()))?,
            ReportFormat::Json => write_file(&dir.join(format!("{stem}.json")), report.to_json())?,
        }
    }
    Ok(())
}

fn score(model: &Model, sample: &TrainSample, report: &ReportConfig) -> Result<MetricReport, Failure> {
    let pred = model.infer(&sample.partial)?;
    let cloud = |t| PointCloud::from_tensor(t).ok_or_else(|| io_error("point tensor is not [n, 3]"));
    let (pc, gt) = (cloud(&pred.points)?, cloud(&sample.complete)?);
    let metrics = |e: dispnet_core::metrics::MetricError| config_error(e.to_string());
    let mut out = MetricReport::evaluate(&pc, &gt, report.scene).map_err(metrics)?;
    if let (Some(labels), Some(pred_labels), Some(n)) = (&sample.labels, pred.labels(), model.config().semantic_classes) {
        let x = report.voxel_resolution;
        let p = voxelize(&pc, Some(&pred_labels), x, report.bounds).map_err(metrics)?;
        let g = voxelize(&gt, Some(labels), x, report.bounds).map_err(metrics)?;
        out = out.with_iou(iou(&p.grid, &g.grid, n).map_err(metrics)?);
    }
    Ok(out)
}

pub fn train(mut cfg: RunConfig, resume: Option<&Path>) -> Result<u8, Failure> {
    let arch = cfg.resolve_architecture()?;
    let samples = load_samples(&mut cfg, &arch)?;
    if samples.is_empty() {
        return Err(io_error("training split has no samples"));
    }
    if cfg.train.batch_size == 0 {
        return Err(config_error("batch_size must be positive"));
    }
    prepare_out(&cfg)?;
    let ckpt_dir = cfg.out.join("checkpoints");
    create_dir(&ckpt_dir)?;
    let train_cfg = cfg.train_config();

    let (mut model, mut optimizer, start, mut rng) = match resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            if ck.model.config() != &arch {
                return Err(config_error(format!(
                    "{}: checkpoint architecture does not match the configuration",
                    path.display()
                )));
            }
            let mut opt = ck.optimizer;
            opt.config = train_cfg.optimizer;
            info!("resuming from {} at step {}", path.display(), ck.iteration);
            (ck.model, opt, ck.iteration, ck.rng.restore())
        }
        None => {
            let model = build_direct(arch.clone(), cfg.seed)?;
            let opt = Adam::new(train_cfg.optimizer, &model.parameters());
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(1);
            (model, opt, 0, rng)
        }
    };
    info!(
        "training {} parameters on {} sample(s) for {} steps",
        model.parameter_count(),
        samples.len(),
        cfg.train.steps
    );

    let curve_path = cfg.out.join("loss_curve.txt");
    let curve_file = if start > 0 {
        File::options().append(true).create(true).open(&curve_path)
    } else {
        File::create(&curve_path)
    }
    .map_err(|e| io_error(format!("{}: {e}", curve_path.display())))?;
    let mut curve = BufWriter::new(curve_file);
    let save = |model: &Model, optimizer: &Adam, iteration: u64, rng: &ChaCha8Rng, path: &Path| {
        Checkpoint {
            model: model.clone(),
            optimizer: optimizer.clone(),
            iteration,
            rng: RngState::capture(rng),
        }
        .save(path)
        .map_err(Failure::from)
    };

    let mut order: Vec<usize> = (0..samples.len()).collect();
    let batch_size = cfg.train.batch_size.min(samples.len());
    for step in start..cfg.train.steps {
        if batch_size < samples.len() {
            order.shuffle(&mut rng);
        }
        let batch: Vec<TrainSample> = order[..batch_size].iter().map(|&i| samples[i].sample.clone()).collect();
        let breakdown = train_step(&mut model, &mut optimizer, &batch, &train_cfg).map_err(|e| {
            let _ = curve.flush();
            Failure::from(e)
        })?;
        let line = breakdown.to_line(step);
        writeln!(curve, "{line}").map_err(|e| io_error(format!("{}: {e}", curve_path.display())))?;
        if step % 50 == 0 || step + 1 == cfg.train.steps {
            info!("{line}");
        }
        let done = step + 1;
        if cfg.train.checkpoint_every > 0 && done % cfg.train.checkpoint_every == 0 {
            save(&model, &optimizer, done, &rng, &ckpt_dir.join(format!("step-{done:06}.ckpt")))?;
        }
    }
    curve.flush().map_err(|e| io_error(format!("{}: {e}", curve_path.display())))?;
    let final_step = cfg.train.steps.max(start);
    save(&model, &optimizer, final_step, &rng, &cfg.out.join("model.ckpt"))?;

    let reports = samples
        .iter()
        .map(|s| score(&model, &s.sample, &cfg.report))
        .collect::<Result<Vec<_>, _>>()?;
    let summary = MetricReport::aggregate(&reports).expect("at least one sample");
    let header = format!("samples={}\nsteps={final_step}\n", reports.len());
    write_report(&cfg.out, "report", &summary, &cfg.report.formats, &header)?;
    info!(
        "final chamfer_l2_raw={:.3e} fscore_at_1pct={:.4}",
        summary.chamfer_l2_raw, summary.fscore_at_1pct
    );
    Ok(OK)
}

pub fn eval(mut cfg: RunConfig, checkpoint: &Path, split: Option<String>) -> Result<u8, Failure> {
    let arch = cfg.resolve_architecture()?;
    let ck = Checkpoint::load(checkpoint)?;
    if ck.model.config() != &arch {
        return Err(config_error(format!(
            "{}: checkpoint architecture does not match the configuration",
            checkpoint.display()
        )));
    }
    if let Some(s) = split {
        match &mut cfg.data {
            DataConfig::Dataset { split, .. } => *split = s,
            DataConfig::Synthetic(_) => warn!("--split ignored for synthetic data"),
        }
    }
    let samples = load_samples(&mut cfg, &arch)?;
    prepare_out(&cfg)?;
    if samples.is_empty() {
        warn!("split is empty; writing an empty report");
        write_file(&cfg.out.join("report.txt"), "empty=true\nsamples=0\n")?;
        write_file(&cfg.out.join("report.json"), "{\n  \"empty\": true,\n  \"samples\": 0\n}")?;
        return Ok(OK);
    }
    let per_sample = cfg.out.join("samples");
    create_dir(&per_sample)?;
    let mut reports = Vec::with_capacity(samples.len());
    for s in &samples {
        let r = score(&ck.model, &s.sample, &cfg.report)?;
        write_report(&per_sample, &s.name, &r, &cfg.report.formats, "")?;
        reports.push(r);
    }
    let summary = MetricReport::aggregate(&reports).expect("at least one sample");
    write_report(&cfg.out, "report", &summary, &cfg.report.formats, &format!("samples={}\n", reports.len()))?;
    info!(
        "{} sample(s): chamfer_l2_raw={:.3e} fscore_at_1pct={:.4}",
        reports.len(),
        summary.chamfer_l2_raw,
        summary.fscore_at_1pct
    );
    Ok(OK)
}

pub fn complete(checkpoint: &Path, input: &Path, output: &Path, seed: u64, ascii: bool) -> Result<u8, Failure> {
    let model = Checkpoint::load(checkpoint)?.model;
    let n = model.config().input_points;
    let mut cloud = read_ply(input)?.cloud;
    if cloud.is_empty() {
        return Err(io_error(format!("{}: no vertices", input.display())));
    }
    if cloud.len() != n {
        warn!("{}: {} points resampled to {n}", input.display(), cloud.len());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (ids, _) = resample_ids(cloud.len(), n, &mut rng);
        cloud = cloud.select(&ids);
    }
    let (normalized, transform) = normalize(&cloud)?;
    let pred = model.infer(&normalized.to_tensor())?;
    let points = PointCloud::from_tensor(&pred.points).ok_or_else(|| io_error("model output is not [n, 3]"))?;
    let points = denormalize(&points, &transform);
    let labels = pred.labels();
    let format = if ascii { PlyFormat::Ascii } else { PlyFormat::BinaryLittleEndian };
    write_ply(output, &points, labels.as_deref(), format)?;

    let mut text = String::with_capacity(points.len() * 48);
    for (i, p) in points.points.iter().enumerate() {
        text.push_str(&format!("{} {} {}", p[0], p[1], p[2]));
        if let Some(l) = &labels {
            text.push_str(&format!(" {}", l[i]));
        }
        text.push('\n');
    }
    let plot = output.with_extension("xyz");
    write_file(&plot, text)?;
    info!("wrote {} points to {} and {}", points.len(), output.display(), plot.display());
    Ok(OK)
}

pub fn gradcheck(scopes: &[Scope], seed: u64, instances: usize, fault: Option<Primitive>) -> Result<u8, Failure> {
    let cfg = GradcheckConfig {
        seed,
        instances,
        ..Default::default()
    };
    inject_backward_fault(fault);
    let reports = run(scopes, &cfg);
    inject_backward_fault(None);
    print!("{}", format_table(&reports, &cfg));
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed(&cfg)).map(|r| r.name).collect();
    if failed.is_empty() {
        println!("all {} targets passed", reports.len());
        Ok(OK)
    } else {
        println!("failed: {}", failed.join(", "));
        Ok(CHECK_FAILED)
    }
}
