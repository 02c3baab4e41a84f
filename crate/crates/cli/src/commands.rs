//! Subcommand implementations.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use hieraseg::bhccm::{FusionMode, HeadSpec, SegNetConfig, ToySegNet};
use hieraseg::checkpoint;
use hieraseg::datagen::{self, SceneSpec};
use hieraseg::decode::{self, ScoreMode};
use hieraseg::hierarchy::{derive_coarse_labels, Hierarchy, LabelRaster};
use hieraseg::htf;
use hieraseg::losses::LossConfig;
use hieraseg::metrics::ConfusionMatrix;
use hieraseg::rng;
use hieraseg::tensor::Tensor;
use hieraseg::train::{
    self, evaluate, train_stage1, DecodeMode, LossMode, TrainConfig, TrainLog,
};
use hieraseg::translu::{
    branch1_from_branch2, evaluate_translu, transfer_train, CdsaMapping, TransLuModel,
};

use crate::args::{
    DecodeArgs, EvalArgs, GenDataArgs, TrainArgs, TransferArgs,
};
use crate::{io_ctx, write_summary, CliError, Result};

/// Resolve a hierarchy argument: a builtin name or a document path.
pub fn resolve_hierarchy(name: &str) -> Result<Hierarchy> {
    let src = match name {
        "mm5b" => hieraseg::hierarchy::samples::MM5B_JSON.to_string(),
        "crop" => hieraseg::hierarchy::samples::CROP_JSON.to_string(),
        path => fs::read_to_string(path)
            .map_err(|e| io_ctx(Path::new(path), e))?,
    };
    Ok(Hierarchy::from_json(&src)?)
}

fn resolve_mapping_src(name: &str) -> Result<String> {
    match name {
        "crop" => Ok(hieraseg::translu::samples::CROP_MAPPING_JSON.to_string()),
        path => fs::read_to_string(path).map_err(|e| io_ctx(Path::new(path), e)),
    }
}

fn parse_usize_list(s: &str, what: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|p| p.trim().parse::<usize>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| CliError::Validation(format!("bad {what} {s:?}: {e}")))
}

fn parse_f64_list(s: &str, what: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| CliError::Validation(format!("bad {what} {s:?}: {e}")))
}

fn parse_onoff(s: &str, what: &str) -> Result<bool> {
    match s {
        "on" => Ok(true),
        "off" => Ok(false),
        _ => Err(CliError::Validation(format!("{what} must be on|off, got {s:?}"))),
    }
}

fn parse_decode(s: &str) -> Result<DecodeMode> {
    DecodeMode::parse(s)
        .ok_or_else(|| CliError::Validation(format!("decode must be argmax|jsps, got {s:?}")))
}

// ---------------------------------------------------------------------------
// validate-hierarchy
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct ValidateSummary {
    command: &'static str,
    hierarchy: String,
    levels: usize,
    class_counts: Vec<usize>,
    paths: usize,
    hierarchy_sha256: String,
}

pub fn validate_hierarchy(name: &str, out: Option<&Path>) -> Result<()> {
    let h = resolve_hierarchy(name)?;
    let counts: Vec<String> = h.class_counts().iter().map(|c| c.to_string()).collect();
    println!(
        "{} levels, {} classes, {} paths",
        h.num_levels(),
        counts.join("/"),
        h.paths().len()
    );
    if let Some(out) = out {
        let summary = ValidateSummary {
            command: "validate-hierarchy",
            hierarchy: name.to_string(),
            levels: h.num_levels(),
            class_counts: h.class_counts(),
            paths: h.paths().len(),
            hierarchy_sha256: h.canonical_hash(),
        };
        write_summary(&out.join("summary.json"), &summary)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// gen-data
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct GenDataSummary {
    command: &'static str,
    task: String,
    hierarchy_sha256: String,
    images: usize,
    size: usize,
    regions: usize,
    noise: f64,
    seed: u64,
    nearest_mean_accuracy: f64,
    out: String,
}

pub fn gen_data(args: &GenDataArgs) -> Result<()> {
    let ds = match args.task.as_str() {
        "source" => {
            let h = resolve_hierarchy(&args.hierarchy)?;
            let mut spec = SceneSpec::for_hierarchy(&h);
            spec.size = args.size;
            spec.regions = args.regions;
            spec.noise = args.noise;
            datagen::generate(&h, &spec, args.images, args.seed)?
        }
        "crop" => {
            let src_h = resolve_hierarchy(&args.hierarchy)?;
            let crop_h = resolve_hierarchy(&args.crop_hierarchy)?;
            let mut spec = SceneSpec::for_hierarchy(&src_h);
            spec.size = args.size;
            spec.regions = args.regions;
            spec.noise = args.noise;
            datagen::make_crop_target(
                &src_h,
                &spec,
                &crop_h,
                args.crop_bias,
                args.images,
                args.seed,
            )?
        }
        other => {
            return Err(CliError::Validation(format!(
                "task must be source|crop, got {other:?}"
            )))
        }
    };
    datagen::save_dataset(&ds, &args.out)?;
    let summary = GenDataSummary {
        command: "gen-data",
        task: args.task.clone(),
        hierarchy_sha256: ds.hierarchy.canonical_hash(),
        images: ds.samples.len(),
        size: ds.spec.size,
        regions: ds.spec.regions,
        noise: ds.spec.noise,
        seed: ds.seed,
        nearest_mean_accuracy: datagen::nearest_mean_accuracy(&ds),
        out: args.out.display().to_string(),
    };
    write_summary(&args.out.join("summary.json"), &summary)?;
    eprintln!("wrote {} images under {}", ds.samples.len(), args.out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// derive-labels
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct DeriveSummary {
    command: &'static str,
    hierarchy_sha256: String,
    fine: String,
    levels_written: usize,
    out: String,
}

pub fn derive_labels(hierarchy: &str, fine: &Path, out: &Path) -> Result<()> {
    let h = resolve_hierarchy(hierarchy)?;
    let (data, dims) = htf::read(fine)?;
    if dims.len() != 2 {
        return Err(CliError::Validation(format!(
            "{}: expected a 2-d raster, got {} dims",
            fine.display(),
            dims.len()
        )));
    }
    let raster = LabelRaster::from_f64(dims[0], dims[1], &data);
    let fine_level = h.num_levels() - 1;
    let coarse = derive_coarse_labels(&h, &raster, fine_level)?;
    for (l, r) in coarse.iter().enumerate() {
        let dir = out.join(format!("L{}", l + 1));
        fs::create_dir_all(&dir).map_err(|e| io_ctx(&dir, e))?;
        htf::write(&dir.join("derived.htf"), &r.to_f64(), &[r.height, r.width])?;
    }
    let summary = DeriveSummary {
        command: "derive-labels",
        hierarchy_sha256: h.canonical_hash(),
        fine: fine.display().to_string(),
        levels_written: coarse.len(),
        out: out.display().to_string(),
    };
    write_summary(&out.join("summary.json"), &summary)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct TrainSummary {
    command: &'static str,
    config: TrainEcho,
    train_log: TrainLog,
    eval: train::EvalReport,
    checkpoint: String,
}

#[derive(Serialize)]
struct TrainEcho {
    data: String,
    val: Option<String>,
    seed: u64,
    iters: usize,
    batch: usize,
    lr: f64,
    momentum: f64,
    head: String,
    fusion: String,
    loss: String,
    lambda: Vec<f64>,
    alpha: f64,
    widths: Vec<usize>,
    cdim: usize,
    dec_kernel: usize,
    decode: String,
}

pub fn run_train(args: &TrainArgs) -> Result<()> {
    let ds = datagen::load_dataset(&args.data)?;
    let val = match &args.val {
        Some(p) => datagen::load_dataset(p)?,
        None => datagen::load_dataset(&args.data)?,
    };
    let levels = ds.hierarchy.num_levels();

    let widths = parse_usize_list(&args.widths, "widths")?;
    let lambda = parse_f64_list(&args.lambda, "lambda")?;
    if lambda.len() != levels {
        return Err(CliError::Validation(format!(
            "lambda has {} entries for {levels} levels",
            lambda.len()
        )));
    }
    let loss_mode = LossMode::parse(&args.loss)
        .ok_or_else(|| CliError::Validation(format!("loss must be ce|hce|hsc, got {:?}", args.loss)))?;
    let decode_mode = parse_decode(&args.decode)?;
    let fusion = FusionMode::parse(&args.fusion)
        .ok_or_else(|| CliError::Validation(format!("bad fusion mode {:?}", args.fusion)))?;

    let head = match args.head.as_str() {
        "flat" => HeadSpec::Flat { classes: ds.hierarchy.class_count(levels - 1) },
        "bhccm" => HeadSpec::for_hierarchy(&ds.hierarchy, fusion),
        other => {
            return Err(CliError::Validation(format!("head must be flat|bhccm, got {other:?}")))
        }
    };
    let net_cfg = SegNetConfig {
        in_channels: ds.spec.channels,
        widths: widths.clone(),
        c_dim: args.cdim,
        dec_kernel: args.dec_kernel,
    };
    let mut cfg = TrainConfig::new(levels, args.iters, args.seed);
    cfg.batch = args.batch;
    cfg.lr = args.lr;
    cfg.momentum = args.momentum;
    cfg.loss = loss_mode;
    cfg.loss_cfg = LossConfig {
        level_weights: lambda.clone(),
        alpha: args.alpha,
        ignore: hieraseg::hierarchy::DEFAULT_IGNORE,
        normalized_path_target: true,
    };

    let (net, log) = train_stage1(&ds, net_cfg, &head, &cfg)?;
    let report = evaluate(&net, &val, decode_mode)?;

    let ckpt_dir = args.out.join("checkpoint");
    checkpoint::save(&net, &ds.hierarchy, &ckpt_dir)?;
    if args.dump_logits {
        dump_logits(&net, &val, &args.out.join("logits"))?;
    }

    let summary = TrainSummary {
        command: "train",
        config: TrainEcho {
            data: args.data.display().to_string(),
            val: args.val.as_ref().map(|p| p.display().to_string()),
            seed: args.seed,
            iters: args.iters,
            batch: args.batch,
            lr: args.lr,
            momentum: args.momentum,
            head: args.head.clone(),
            fusion: args.fusion.clone(),
            loss: args.loss.clone(),
            lambda,
            alpha: args.alpha,
            widths,
            cdim: args.cdim,
            dec_kernel: args.dec_kernel,
            decode: args.decode.clone(),
        },
        train_log: log,
        eval: report,
        checkpoint: ckpt_dir.display().to_string(),
    };
    write_summary(&args.out.join("summary.json"), &summary)?;
    let fine = summary.eval.levels.last().expect("levels");
    eprintln!(
        "final loss {:.4}, {} mIoU {:.4}, consistency {:.4}",
        summary.train_log.final_loss.unwrap_or(f64::NAN),
        fine.level,
        fine.miou,
        summary.eval.consistency_rate
    );
    Ok(())
}

fn dump_logits(net: &ToySegNet, ds: &hieraseg::datagen::Dataset, dir: &Path) -> Result<()> {
    for i in 0..ds.samples.len() {
        let (image, _) = train::batch_of(ds, &[i]);
        let logits = net.forward_levels(&image)?;
        for (l, lg) in logits.iter().enumerate() {
            let sub = dir.join(format!("L{}", l + 1));
            fs::create_dir_all(&sub).map_err(|e| io_ctx(&sub, e))?;
            let s = lg.shape();
            // Drop the leading batch dim of 1 for storage.
            htf::write(&sub.join(format!("img_{i:05}.htf")), &lg.data(), &[s[1], s[2], s[3]])?;
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// transfer
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct TransferSummary {
    command: &'static str,
    config: TransferEcho,
    train_log: TrainLog,
    eval: train::EvalReport,
    branch2_hierarchy_sha256: String,
    checkpoint: String,
}

#[derive(Serialize)]
struct TransferEcho {
    data: String,
    val: Option<String>,
    branch2: String,
    mapping: String,
    seed: u64,
    iters: usize,
    batch: usize,
    lr: f64,
    momentum: f64,
    init: String,
    cdks: bool,
    cdsa: bool,
    alpha: f64,
    decode: String,
}

pub fn run_transfer(args: &TransferArgs) -> Result<()> {
    let ds = datagen::load_dataset(&args.data)?;
    let val = match &args.val {
        Some(p) => datagen::load_dataset(p)?,
        None => datagen::load_dataset(&args.data)?,
    };
    let levels = ds.hierarchy.num_levels();
    let cdks = parse_onoff(&args.cdks, "cdks")?;
    let cdsa = parse_onoff(&args.cdsa, "cdsa")?;
    let decode_mode = parse_decode(&args.decode)?;

    let b2_hierarchy = resolve_hierarchy(&args.branch2_hierarchy)?;
    let branch2 = checkpoint::load(&args.branch2, &b2_hierarchy)?;

    let mut init_rng = rng::stream(args.seed, "branch1-init");
    let branch1 = match args.init.as_str() {
        "branch2" => {
            branch1_from_branch2(&branch2, &ds.hierarchy, FusionMode::Bidirectional, &mut init_rng)
        }
        "scratch" => ToySegNet::new(
            &mut init_rng,
            branch2.config().clone(),
            &HeadSpec::for_hierarchy(&ds.hierarchy, FusionMode::Bidirectional),
        ),
        other => {
            return Err(CliError::Validation(format!(
                "init must be branch2|scratch, got {other:?}"
            )))
        }
    };

    let mapping = if cdsa {
        let src = resolve_mapping_src(&args.mapping)?;
        Some(CdsaMapping::from_json(&src, &b2_hierarchy, &ds.hierarchy)?)
    } else {
        None
    };

    let model = TransLuModel::new(
        &mut rng::stream(args.seed, "biu-init"),
        branch1,
        branch2,
        cdks,
        mapping,
        true,
    )?;

    let mut cfg = TrainConfig::new(levels, args.iters, args.seed);
    cfg.batch = args.batch;
    cfg.lr = args.lr;
    cfg.momentum = args.momentum;
    cfg.loss = LossMode::Hsc;
    cfg.loss_cfg.alpha = args.alpha;
    let log = transfer_train(&model, &ds, &cfg)?;
    let report = evaluate_translu(&model, &val, decode_mode)?;

    let ckpt_dir = args.out.join("checkpoint");
    checkpoint::save(&model.branch1, &ds.hierarchy, &ckpt_dir)?;

    let summary = TransferSummary {
        command: "transfer",
        config: TransferEcho {
            data: args.data.display().to_string(),
            val: args.val.as_ref().map(|p| p.display().to_string()),
            branch2: args.branch2.display().to_string(),
            mapping: args.mapping.clone(),
            seed: args.seed,
            iters: args.iters,
            batch: args.batch,
            lr: args.lr,
            momentum: args.momentum,
            init: args.init.clone(),
            cdks,
            cdsa,
            alpha: args.alpha,
            decode: args.decode.clone(),
        },
        train_log: log,
        eval: report,
        branch2_hierarchy_sha256: b2_hierarchy.canonical_hash(),
        checkpoint: ckpt_dir.display().to_string(),
    };
    write_summary(&args.out.join("summary.json"), &summary)?;
    let fine = summary.eval.levels.last().expect("levels");
    eprintln!("transfer done: {} mIoU {:.4}", fine.level, fine.miou);
    Ok(())
}

// ---------------------------------------------------------------------------
// decode
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct DecodeSummary {
    command: &'static str,
    mode: String,
    scores: String,
    images: usize,
    consistency_rate: f64,
    out: String,
}

fn sorted_htf_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| io_ctx(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().map(|x| x == "htf").unwrap_or(false))
        .collect();
    files.sort();
    Ok(files)
}

pub fn run_decode(args: &DecodeArgs) -> Result<()> {
    let h = resolve_hierarchy(&args.hierarchy)?;
    let levels = h.num_levels();
    let score_mode = match args.scores.as_str() {
        "sigmoid" => ScoreMode::Sigmoid,
        "softmax" => ScoreMode::Softmax,
        other => {
            return Err(CliError::Validation(format!(
                "scores must be sigmoid|softmax, got {other:?}"
            )))
        }
    };
    if args.mode != "argmax" && args.mode != "jsps" {
        return Err(CliError::Validation(format!("mode must be argmax|jsps, got {:?}", args.mode)));
    }

    let per_level: Vec<Vec<PathBuf>> = (1..=levels)
        .map(|k| sorted_htf_files(&args.logits.join(format!("L{k}"))))
        .collect::<Result<_>>()?;
    let count = per_level[0].len();
    if count == 0 {
        return Err(CliError::Validation(format!(
            "{}: no logit files found",
            args.logits.display()
        )));
    }
    for (l, files) in per_level.iter().enumerate() {
        if files.len() != count {
            return Err(CliError::Validation(format!(
                "level L{} has {} files, expected {count}",
                l + 1,
                files.len()
            )));
        }
    }

    let mut consistency_sum = 0.0;
    for i in 0..count {
        let mut logits = Vec::with_capacity(levels);
        for files in per_level.iter() {
            let (data, dims) = htf::read(&files[i])?;
            if dims.len() != 3 {
                return Err(CliError::Validation(format!(
                    "{}: expected [C,H,W] logits, got {} dims",
                    files[i].display(),
                    dims.len()
                )));
            }
            let t = Tensor::from_vec(data, &[1, dims[0], dims[1], dims[2]])
                .map_err(|e| CliError::Validation(e.to_string()))?;
            logits.push(t);
        }
        let pred = match args.mode.as_str() {
            "argmax" => decode::argmax_per_level(&logits)?,
            _ => decode::jsps_decode(&logits, &h, score_mode)?,
        };
        consistency_sum += decode::consistency_rate(&pred, &h)?;

        let name = per_level[0][i]
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("image")
            .to_string();
        for (l, rasters) in pred.iter().enumerate() {
            let dir = args.out.join(format!("L{}", l + 1));
            fs::create_dir_all(&dir).map_err(|e| io_ctx(&dir, e))?;
            let r = &rasters[0];
            htf::write(&dir.join(format!("{name}.htf")), &r.to_f64(), &[r.height, r.width])?;
            if args.png {
                write_png(&dir.join(format!("{name}.png")), r, &h.palette(l))?;
            }
        }
    }

    let summary = DecodeSummary {
        command: "decode",
        mode: args.mode.clone(),
        scores: args.scores.clone(),
        images: count,
        consistency_rate: consistency_sum / count as f64,
        out: args.out.display().to_string(),
    };
    write_summary(&args.out.join("summary.json"), &summary)?;
    Ok(())
}

fn write_png(path: &Path, raster: &LabelRaster, palette: &[[u8; 3]]) -> Result<()> {
    let mut img = image::RgbImage::new(raster.width as u32, raster.height as u32);
    for y in 0..raster.height {
        for x in 0..raster.width {
            let v = raster.get(y, x);
            let rgb = if v == raster.ignore {
                [0, 0, 0]
            } else {
                palette.get(v as usize).copied().unwrap_or([255, 0, 255])
            };
            img.put_pixel(x as u32, y as u32, image::Rgb(rgb));
        }
    }
    img.save(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct EvalSummary {
    command: &'static str,
    pred: String,
    truth: String,
    images: usize,
    levels: Vec<train::LevelReport>,
    consistency_rate: f64,
}

pub fn run_eval(args: &EvalArgs) -> Result<()> {
    let h = resolve_hierarchy(&args.hierarchy)?;
    let levels = h.num_levels();

    // Ground truth may be a dataset directory (with labels/) or bare L{k} dirs.
    let truth_root = if args.truth.join("labels").is_dir() {
        args.truth.join("labels")
    } else {
        args.truth.clone()
    };

    let mut cms: Vec<ConfusionMatrix> =
        (0..levels).map(|l| ConfusionMatrix::new(h.class_count(l))).collect();
    let mut consistency_sum = 0.0;
    let mut count = 0usize;

    let pred_files: Vec<Vec<PathBuf>> = (1..=levels)
        .map(|k| sorted_htf_files(&args.pred.join(format!("L{k}"))))
        .collect::<Result<_>>()?;
    let truth_files: Vec<Vec<PathBuf>> = (1..=levels)
        .map(|k| sorted_htf_files(&truth_root.join(format!("L{k}"))))
        .collect::<Result<_>>()?;
    let n = pred_files[0].len();
    for (l, (p, t)) in pred_files.iter().zip(&truth_files).enumerate() {
        if p.len() != n || t.len() != n {
            return Err(CliError::Validation(format!(
                "level L{}: {} predictions vs {} truths (expected {n} each; files pair by sorted order)",
                l + 1,
                p.len(),
                t.len()
            )));
        }
    }

    for i in 0..n {
        let mut pred_levels = Vec::with_capacity(levels);
        for l in 0..levels {
            let (pd, pdim) = htf::read(&pred_files[l][i])?;
            let (td, tdim) = htf::read(&truth_files[l][i])?;
            let pred = LabelRaster::from_f64(pdim[0], pdim[1], &pd);
            let truth = LabelRaster::from_f64(tdim[0], tdim[1], &td);
            cms[l].accumulate(&pred, &truth)?;
            pred_levels.push(vec![pred]);
        }
        consistency_sum += decode::consistency_rate(&pred_levels, &h)?;
        count += 1;
    }

    let mut level_reports = Vec::with_capacity(levels);
    for (l, cm) in cms.iter().enumerate() {
        level_reports.push(train::LevelReport {
            level: h.level_name(l).to_string(),
            miou: cm.miou()?,
            macc: cm.macc()?,
            per_class_iou: cm.per_class_iou(),
        });
    }

    println!("{:<8} {:>8} {:>8}", "level", "mIoU", "mAcc");
    for r in &level_reports {
        println!("{:<8} {:>8.4} {:>8.4}", r.level, r.miou, r.macc);
    }
    println!("consistency_rate {:.4}", consistency_sum / count as f64);

    let summary = EvalSummary {
        command: "eval",
        pred: args.pred.display().to_string(),
        truth: args.truth.display().to_string(),
        images: count,
        levels: level_reports,
        consistency_rate: consistency_sum / count as f64,
    };
    write_summary(&args.out.join("summary.json"), &summary)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// ablate
// ---------------------------------------------------------------------------

pub fn run_ablate(args: &crate::args::AblateArgs) -> Result<()> {
    match args.suite.as_str() {
        "bhccm" => {
            let mut cfg = crate::suites::BhccmSuiteConfig::new(args.seed, args.seeds);
            cfg.size = args.size;
            if let Some(iters) = args.iters {
                cfg.iterations = iters;
            }
            let report = crate::suites::run_bhccm_suite(&cfg)?;
            crate::suites::print_bhccm_table(&report);
            write_summary(&args.out.join("summary.json"), &report)
        }
        "transfer" => {
            let mut cfg = crate::suites::TransferSuiteConfig::new(args.seed, args.seeds);
            cfg.size = args.size;
            if let Some(iters) = args.iters {
                cfg.iterations = iters;
            }
            let report = crate::suites::run_transfer_suite(&cfg)?;
            crate::suites::print_transfer_table(&report);
            write_summary(&args.out.join("summary.json"), &report)
        }
        other => Err(CliError::Validation(format!(
            "suite must be bhccm|transfer, got {other:?}"
        ))),
    }
}

/// Stable map used in summaries (BTreeMap serializes in key order).
pub type OrderedMap = BTreeMap<String, serde_json::Value>;
