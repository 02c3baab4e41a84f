//! Seeded experiment suites: the head-fusion ablation matrix and the
//! cross-domain transfer comparison.
//!
//! Each suite trains its whole grid from one base seed, scores every cell
//! on a held-out split, and reports per-row results plus the trend
//! predicates the grid exists to measure. Datasets and initializations are
//! shared across rows within a seed, so row comparisons are paired. Cells
//! are independent and may run on a thread pool (capped by
//! `HIERA_SEG_THREADS`); results are assembled by index, so the summary
//! bytes do not depend on scheduling.

use serde::Serialize;

use hieraseg::bhccm::{FusionMode, HeadSpec, SegNetConfig, ToySegNet};
use hieraseg::datagen::{generate, make_crop_target, Dataset, SceneSpec};
use hieraseg::hierarchy::Hierarchy;
use hieraseg::losses::LossConfig;
use hieraseg::rng;
use hieraseg::train::{
    evaluate, train_existing, train_stage1, DecodeMode, EvalReport, LossMode, TrainConfig,
};
use hieraseg::translu::{
    branch1_from_branch2, evaluate_translu, transfer_train, CdsaMapping, TransLuModel,
};

use crate::{CliError, Result};

fn thread_budget(cells: usize) -> usize {
    let cap = std::env::var("HIERA_SEG_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| {
            std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
        });
    cap.min(cells).max(1)
}

/// Run one closure per cell, optionally in parallel, preserving cell order.
fn run_cells<T: Send>(
    cells: usize,
    run: impl Fn(usize) -> Result<T> + Sync,
) -> Result<Vec<T>> {
    let threads = thread_budget(cells);
    if threads <= 1 {
        return (0..cells).map(run).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CliError::Validation(format!("thread pool: {e}")))?;
    pool.install(|| {
        use rayon::prelude::*;
        (0..cells).into_par_iter().map(|i| run(i)).collect()
    })
}

// ---------------------------------------------------------------------------
// Head-fusion ablation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct BhccmSuiteConfig {
    pub seeds: usize,
    pub iterations: usize,
    pub size: usize,
    pub regions: usize,
    pub train_images: usize,
    pub val_images: usize,
    pub noise: f64,
    pub widths: Vec<usize>,
    pub c_dim: usize,
    pub batch: usize,
    pub lr: f64,
    pub momentum: f64,
    pub alpha: f64,
    pub base_seed: u64,
}

impl BhccmSuiteConfig {
    pub fn new(base_seed: u64, seeds: usize) -> BhccmSuiteConfig {
        BhccmSuiteConfig {
            seeds,
            iterations: 2000,
            size: 24,
            regions: 8,
            train_images: 24,
            val_images: 8,
            noise: 0.05,
            widths: vec![6, 12, 24],
            c_dim: 12,
            batch: 2,
            lr: 0.05,
            momentum: 0.9,
            alpha: 1.0,
            base_seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum RowKind {
    Flat,
    NoFusion,
    CoarseToFine,
    FineToCoarse,
    BidirHce,
    BidirHsc,
}

impl RowKind {
    pub const ALL: [RowKind; 6] = [
        RowKind::Flat,
        RowKind::NoFusion,
        RowKind::CoarseToFine,
        RowKind::FineToCoarse,
        RowKind::BidirHce,
        RowKind::BidirHsc,
    ];

    pub fn name(self) -> &'static str {
        match self {
            RowKind::Flat => "flat",
            RowKind::NoFusion => "no-fusion",
            RowKind::CoarseToFine => "c2f",
            RowKind::FineToCoarse => "f2c",
            RowKind::BidirHce => "bidir+hce",
            RowKind::BidirHsc => "bidir+hsc",
        }
    }

    fn is_hierarchical(self) -> bool {
        !matches!(self, RowKind::Flat)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RowReport {
    pub name: String,
    pub l1_miou: Vec<f64>,
    pub l2_miou: Vec<f64>,
    pub l3_miou: Vec<f64>,
    pub mean_l3_miou: f64,
    pub consistency: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct BhccmTrends {
    /// Mean L3 mIoU: the unfused head trails both single-direction rows.
    pub no_fusion_lt_c2f: bool,
    pub no_fusion_lt_f2c: bool,
    /// Mean L3 mIoU: the full head with the combined loss beats the flat baseline.
    pub bidir_hsc_ge_flat: bool,
    /// Seats (out of `seeds`) where bidir+hsc is the best hierarchical row.
    pub bidir_hsc_best_hier_seats: usize,
    pub seeds: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct JspsDelta {
    /// Consistency of the jsps decode (1.0 by construction).
    pub consistency: Vec<f64>,
    /// Per-seed (jsps - argmax) mIoU deltas per level, in points (x100).
    pub delta_l1: Vec<f64>,
    pub delta_l2: Vec<f64>,
    pub delta_l3: Vec<f64>,
    pub max_abs_delta_points: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct BhccmSuiteReport {
    pub suite: &'static str,
    pub config: BhccmSuiteConfig,
    pub rows: Vec<RowReport>,
    pub trends: BhccmTrends,
    pub jsps: JspsDelta,
}

fn source_task_data(cfg: &BhccmSuiteConfig, h: &Hierarchy, seed_idx: usize) -> Result<(Dataset, Dataset)> {
    let mut spec = SceneSpec::for_hierarchy(h);
    spec.size = cfg.size;
    spec.regions = cfg.regions;
    spec.noise = cfg.noise;
    let train = generate(
        h,
        &spec,
        cfg.train_images,
        rng::derive_seed(cfg.base_seed, &format!("source-train-{seed_idx}")),
    )
    .map_err(CliError::from)?;
    let val = generate(
        h,
        &spec,
        cfg.val_images,
        rng::derive_seed(cfg.base_seed, &format!("source-val-{seed_idx}")),
    )
    .map_err(CliError::from)?;
    Ok((train, val))
}

fn train_cfg_for(cfg: &BhccmSuiteConfig, kind: RowKind, seed_idx: usize) -> TrainConfig {
    let mut tc = TrainConfig::new(3, cfg.iterations, rng::derive_seed(cfg.base_seed, &format!("run-{seed_idx}")));
    tc.batch = cfg.batch;
    tc.lr = cfg.lr;
    tc.momentum = cfg.momentum;
    tc.log_every = 0;
    tc.loss = match kind {
        RowKind::Flat => LossMode::Ce,
        RowKind::BidirHsc => LossMode::Hsc,
        _ => LossMode::Hce,
    };
    tc.loss_cfg = LossConfig::uniform(3);
    tc.loss_cfg.alpha = cfg.alpha;
    tc
}

fn head_for(kind: RowKind, h: &Hierarchy) -> HeadSpec {
    match kind {
        RowKind::Flat => HeadSpec::Flat { classes: h.class_count(h.num_levels() - 1) },
        RowKind::NoFusion => HeadSpec::for_hierarchy(h, FusionMode::None),
        RowKind::CoarseToFine => HeadSpec::for_hierarchy(h, FusionMode::CoarseToFine),
        RowKind::FineToCoarse => HeadSpec::for_hierarchy(h, FusionMode::FineToCoarse),
        RowKind::BidirHce | RowKind::BidirHsc => {
            HeadSpec::for_hierarchy(h, FusionMode::Bidirectional)
        }
    }
}

struct CellResult {
    report: EvalReport,
    jsps: Option<EvalReport>,
}

/// Train-and-score the full row-by-seed grid.
pub fn run_bhccm_suite(cfg: &BhccmSuiteConfig) -> Result<BhccmSuiteReport> {
    let h = Hierarchy::from_json(hieraseg::hierarchy::samples::MM5B_JSON)
        .expect("builtin document parses");
    let net_cfg = SegNetConfig {
        in_channels: 4,
        widths: cfg.widths.clone(),
        c_dim: cfg.c_dim,
        dec_kernel: 1,
    };

    // Datasets are generated once per seed and shared across rows.
    let mut data = Vec::with_capacity(cfg.seeds);
    for seed_idx in 0..cfg.seeds {
        data.push(source_task_data(cfg, &h, seed_idx)?);
    }

    let rows = RowKind::ALL;
    let cells = rows.len() * cfg.seeds;
    let results: Vec<CellResult> = run_cells(cells, |cell| {
        let kind = rows[cell / cfg.seeds];
        let seed_idx = cell % cfg.seeds;
        let (train_ds, val_ds) = &data[seed_idx];
        let tc = train_cfg_for(cfg, kind, seed_idx);
        let (net, _) = train_stage1(train_ds, net_cfg.clone(), &head_for(kind, &h), &tc)
            .map_err(CliError::from)?;
        let report = evaluate(&net, val_ds, DecodeMode::Argmax).map_err(CliError::from)?;
        let jsps = if kind == RowKind::BidirHsc {
            Some(evaluate(&net, val_ds, DecodeMode::Jsps).map_err(CliError::from)?)
        } else {
            None
        };
        Ok(CellResult { report, jsps })
    })?;

    let mut row_reports = Vec::with_capacity(rows.len());
    for (ri, kind) in rows.iter().enumerate() {
        let per_seed: Vec<&CellResult> =
            (0..cfg.seeds).map(|s| &results[ri * cfg.seeds + s]).collect();
        let level = |l: usize| -> Vec<f64> {
            per_seed.iter().map(|c| c.report.levels[l].miou).collect()
        };
        let l3 = level(2);
        row_reports.push(RowReport {
            name: kind.name().to_string(),
            l1_miou: level(0),
            l2_miou: level(1),
            mean_l3_miou: l3.iter().sum::<f64>() / l3.len() as f64,
            l3_miou: l3,
            consistency: per_seed.iter().map(|c| c.report.consistency_rate).collect(),
        });
    }

    let mean_of = |kind: RowKind| -> f64 {
        row_reports[rows.iter().position(|&k| k == kind).expect("row exists")].mean_l3_miou
    };
    let mut best_seats = 0usize;
    for s in 0..cfg.seeds {
        let hsc = results[rows.iter().position(|&k| k == RowKind::BidirHsc).unwrap() * cfg.seeds + s]
            .report
            .levels[2]
            .miou;
        let best = rows
            .iter()
            .enumerate()
            .filter(|(_, k)| k.is_hierarchical())
            .map(|(ri, _)| results[ri * cfg.seeds + s].report.levels[2].miou)
            .fold(f64::NEG_INFINITY, f64::max);
        if hsc >= best {
            best_seats += 1;
        }
    }
    let trends = BhccmTrends {
        no_fusion_lt_c2f: mean_of(RowKind::NoFusion) < mean_of(RowKind::CoarseToFine),
        no_fusion_lt_f2c: mean_of(RowKind::NoFusion) < mean_of(RowKind::FineToCoarse),
        bidir_hsc_ge_flat: mean_of(RowKind::BidirHsc) >= mean_of(RowKind::Flat),
        bidir_hsc_best_hier_seats: best_seats,
        seeds: cfg.seeds,
    };

    let hsc_row = rows.iter().position(|&k| k == RowKind::BidirHsc).unwrap();
    let mut jsps = JspsDelta {
        consistency: Vec::new(),
        delta_l1: Vec::new(),
        delta_l2: Vec::new(),
        delta_l3: Vec::new(),
        max_abs_delta_points: 0.0,
    };
    for s in 0..cfg.seeds {
        let cell = &results[hsc_row * cfg.seeds + s];
        let j = cell.jsps.as_ref().expect("jsps computed for bidir+hsc");
        jsps.consistency.push(j.consistency_rate);
        let deltas = [
            (j.levels[0].miou - cell.report.levels[0].miou) * 100.0,
            (j.levels[1].miou - cell.report.levels[1].miou) * 100.0,
            (j.levels[2].miou - cell.report.levels[2].miou) * 100.0,
        ];
        jsps.delta_l1.push(deltas[0]);
        jsps.delta_l2.push(deltas[1]);
        jsps.delta_l3.push(deltas[2]);
        for d in deltas {
            jsps.max_abs_delta_points = jsps.max_abs_delta_points.max(d.abs());
        }
    }

    Ok(BhccmSuiteReport {
        suite: "bhccm",
        config: cfg.clone(),
        rows: row_reports,
        trends,
        jsps,
    })
}

pub fn print_bhccm_table(report: &BhccmSuiteReport) {
    println!("{:<12} {:>12} {:>10}", "row", "mean L3 mIoU", "per seed");
    for row in &report.rows {
        let seeds: Vec<String> = row.l3_miou.iter().map(|v| format!("{v:.3}")).collect();
        println!("{:<12} {:>12.4}   {}", row.name, row.mean_l3_miou, seeds.join(" "));
    }
    let t = &report.trends;
    println!(
        "trends: no-fusion<c2f={} no-fusion<f2c={} bidir+hsc>=flat={} best-hier {}/{}",
        t.no_fusion_lt_c2f, t.no_fusion_lt_f2c, t.bidir_hsc_ge_flat,
        t.bidir_hsc_best_hier_seats, t.seeds
    );
    println!(
        "jsps: consistency {:?}, max |delta| {:.2} points",
        report.jsps.consistency, report.jsps.max_abs_delta_points
    );
}

// ---------------------------------------------------------------------------
// Transfer comparison
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct TransferSuiteConfig {
    pub seeds: usize,
    pub iterations: usize,
    pub pretrain_iterations: usize,
    pub size: usize,
    pub regions: usize,
    pub source_train_images: usize,
    pub target_train_images: usize,
    pub target_val_images: usize,
    pub noise: f64,
    pub crop_bias: f64,
    pub widths: Vec<usize>,
    pub c_dim: usize,
    pub batch: usize,
    pub lr: f64,
    pub momentum: f64,
    pub base_seed: u64,
}

impl TransferSuiteConfig {
    pub fn new(base_seed: u64, seeds: usize) -> TransferSuiteConfig {
        TransferSuiteConfig {
            seeds,
            iterations: 300,
            pretrain_iterations: 2000,
            size: 24,
            regions: 8,
            source_train_images: 24,
            target_train_images: 12,
            target_val_images: 8,
            noise: 0.05,
            crop_bias: 0.6,
            widths: vec![6, 12, 24],
            c_dim: 12,
            batch: 2,
            lr: 0.05,
            momentum: 0.9,
            base_seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum TransferRow {
    Scratch,
    Pretrained,
    Cdks,
    CdksCdsa,
}

impl TransferRow {
    pub const ALL: [TransferRow; 4] = [
        TransferRow::Scratch,
        TransferRow::Pretrained,
        TransferRow::Cdks,
        TransferRow::CdksCdsa,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TransferRow::Scratch => "scratch",
            TransferRow::Pretrained => "pretrained",
            TransferRow::Cdks => "cdks",
            TransferRow::CdksCdsa => "cdks+cdsa",
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TransferTrends {
    /// Seeds where knowledge sharing meets or beats the pretrained baseline.
    pub cdks_ge_pretrained_seats: usize,
    /// Seeds where adding semantic alignment meets or beats plain sharing.
    pub cdsa_ge_cdks_seats: usize,
    /// Seeds where knowledge sharing meets or beats training from scratch.
    pub cdks_ge_scratch_seats: usize,
    pub seeds: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct TransferSuiteReport {
    pub suite: &'static str,
    pub config: TransferSuiteConfig,
    pub rows: Vec<RowReport>,
    pub trends: TransferTrends,
}

/// Pretrain the frozen branch, then run the 4-row transfer grid per seed.
pub fn run_transfer_suite(cfg: &TransferSuiteConfig) -> Result<TransferSuiteReport> {
    let src_h = Hierarchy::from_json(hieraseg::hierarchy::samples::MM5B_JSON)
        .expect("builtin document parses");
    let crop_h = Hierarchy::from_json(hieraseg::hierarchy::samples::CROP_JSON)
        .expect("builtin document parses");
    let net_cfg = SegNetConfig {
        in_channels: 4,
        widths: cfg.widths.clone(),
        c_dim: cfg.c_dim,
        dec_kernel: 1,
    };

    let mut src_spec = SceneSpec::for_hierarchy(&src_h);
    src_spec.size = cfg.size;
    src_spec.regions = cfg.regions;
    src_spec.noise = cfg.noise;

    // One frozen source model shared by every row and seed.
    let source_train = generate(
        &src_h,
        &src_spec,
        cfg.source_train_images,
        rng::derive_seed(cfg.base_seed, "transfer-source-train"),
    )
    .map_err(CliError::from)?;
    let mut pre_cfg = TrainConfig::new(
        3,
        cfg.pretrain_iterations,
        rng::derive_seed(cfg.base_seed, "transfer-pretrain"),
    );
    pre_cfg.batch = cfg.batch;
    pre_cfg.lr = cfg.lr;
    pre_cfg.momentum = cfg.momentum;
    pre_cfg.log_every = 0;
    let head = HeadSpec::for_hierarchy(&src_h, FusionMode::Bidirectional);
    let (branch2_proto, _) =
        train_stage1(&source_train, net_cfg.clone(), &head, &pre_cfg).map_err(CliError::from)?;
    let branch2_params: Vec<(String, Vec<f64>)> = branch2_proto
        .params()
        .into_iter()
        .map(|(n, p)| (n, p.to_vec()))
        .collect();

    // Target datasets per seed.
    let mut data = Vec::with_capacity(cfg.seeds);
    for s in 0..cfg.seeds {
        let train = make_crop_target(
            &src_h,
            &src_spec,
            &crop_h,
            cfg.crop_bias,
            cfg.target_train_images,
            rng::derive_seed(cfg.base_seed, &format!("target-train-{s}")),
        )
        .map_err(CliError::from)?;
        let val = make_crop_target(
            &src_h,
            &src_spec,
            &crop_h,
            cfg.crop_bias,
            cfg.target_val_images,
            rng::derive_seed(cfg.base_seed, &format!("target-val-{s}")),
        )
        .map_err(CliError::from)?;
        data.push((train, val));
    }

    // Rebuild the frozen branch inside each cell (tensors are not Send).
    let rebuild_branch2 = |frozen: bool| -> ToySegNet {
        let net = ToySegNet::new(&mut rng::stream(0, "transfer-b2-rebuild"), net_cfg.clone(), &head);
        for (name, p) in net.params() {
            let (_, data) = branch2_params
                .iter()
                .find(|(n, _)| *n == name)
                .expect("parameter sets match");
            p.set_data(data);
        }
        net.set_frozen(frozen);
        net
    };

    let rows = TransferRow::ALL;
    let cells = rows.len() * cfg.seeds;
    let results: Vec<EvalReport> = run_cells(cells, |cell| {
        let row = rows[cell / cfg.seeds];
        let s = cell % cfg.seeds;
        let (train_ds, val_ds) = &data[s];
        let mut tc = TrainConfig::new(3, cfg.iterations, rng::derive_seed(cfg.base_seed, &format!("transfer-run-{s}")));
        tc.batch = cfg.batch;
        tc.lr = cfg.lr;
        tc.momentum = cfg.momentum;
        tc.log_every = 0;
        tc.loss = LossMode::Hsc;

        match row {
            TransferRow::Scratch => {
                let head = HeadSpec::for_hierarchy(&crop_h, FusionMode::Bidirectional);
                let mut init = rng::stream(
                    rng::derive_seed(cfg.base_seed, &format!("scratch-init-{s}")),
                    "init",
                );
                let net = ToySegNet::new(&mut init, net_cfg.clone(), &head);
                train_existing(&net, train_ds, &tc).map_err(CliError::from)?;
                evaluate(&net, val_ds, DecodeMode::Argmax).map_err(CliError::from)
            }
            TransferRow::Pretrained => {
                let b2 = rebuild_branch2(false);
                let mut init = rng::stream(
                    rng::derive_seed(cfg.base_seed, &format!("pre-init-{s}")),
                    "init",
                );
                let net = branch1_from_branch2(&b2, &crop_h, FusionMode::Bidirectional, &mut init);
                train_existing(&net, train_ds, &tc).map_err(CliError::from)?;
                evaluate(&net, val_ds, DecodeMode::Argmax).map_err(CliError::from)
            }
            TransferRow::Cdks | TransferRow::CdksCdsa => {
                let b2 = rebuild_branch2(true);
                let mut init = rng::stream(
                    rng::derive_seed(cfg.base_seed, &format!("pre-init-{s}")),
                    "init",
                );
                let b1 = branch1_from_branch2(&b2, &crop_h, FusionMode::Bidirectional, &mut init);
                let mapping = if row == TransferRow::CdksCdsa {
                    Some(
                        CdsaMapping::from_json(
                            hieraseg::translu::samples::CROP_MAPPING_JSON,
                            &src_h,
                            &crop_h,
                        )
                        .map_err(CliError::from)?,
                    )
                } else {
                    None
                };
                let model = TransLuModel::new(
                    &mut rng::stream(
                        rng::derive_seed(cfg.base_seed, &format!("biu-init-{s}")),
                        "biu",
                    ),
                    b1,
                    b2,
                    true,
                    mapping,
                    true,
                )
                .map_err(CliError::from)?;
                transfer_train(&model, train_ds, &tc).map_err(CliError::from)?;
                evaluate_translu(&model, val_ds, DecodeMode::Argmax).map_err(CliError::from)
            }
        }
    })?;

    let mut row_reports = Vec::with_capacity(rows.len());
    for (ri, row) in rows.iter().enumerate() {
        let per_seed: Vec<&EvalReport> =
            (0..cfg.seeds).map(|s| &results[ri * cfg.seeds + s]).collect();
        let level = |l: usize| -> Vec<f64> { per_seed.iter().map(|r| r.levels[l].miou).collect() };
        let l3 = level(2);
        row_reports.push(RowReport {
            name: row.name().to_string(),
            l1_miou: level(0),
            l2_miou: level(1),
            mean_l3_miou: l3.iter().sum::<f64>() / l3.len() as f64,
            l3_miou: l3,
            consistency: per_seed.iter().map(|r| r.consistency_rate).collect(),
        });
    }

    let l3_of = |row: TransferRow, s: usize| -> f64 {
        results[rows.iter().position(|&r| r == row).unwrap() * cfg.seeds + s].levels[2].miou
    };
    let mut trends = TransferTrends {
        cdks_ge_pretrained_seats: 0,
        cdsa_ge_cdks_seats: 0,
        cdks_ge_scratch_seats: 0,
        seeds: cfg.seeds,
    };
    for s in 0..cfg.seeds {
        if l3_of(TransferRow::Cdks, s) >= l3_of(TransferRow::Pretrained, s) {
            trends.cdks_ge_pretrained_seats += 1;
        }
        if l3_of(TransferRow::CdksCdsa, s) >= l3_of(TransferRow::Cdks, s) {
            trends.cdsa_ge_cdks_seats += 1;
        }
        if l3_of(TransferRow::Cdks, s) >= l3_of(TransferRow::Scratch, s) {
            trends.cdks_ge_scratch_seats += 1;
        }
    }

    Ok(TransferSuiteReport { suite: "transfer", config: cfg.clone(), rows: row_reports, trends })
}

pub fn print_transfer_table(report: &TransferSuiteReport) {
    println!("{:<12} {:>12} {:>10}", "row", "mean L3 mIoU", "per seed");
    for row in &report.rows {
        let seeds: Vec<String> = row.l3_miou.iter().map(|v| format!("{v:.3}")).collect();
        println!("{:<12} {:>12.4}   {}", row.name, row.mean_l3_miou, seeds.join(" "));
    }
    let t = &report.trends;
    println!(
        "trends: cdks>=pretrained {}/{}, cdks+cdsa>=cdks {}/{}, cdks>=scratch {}/{}",
        t.cdks_ge_pretrained_seats, t.seeds,
        t.cdsa_ge_cdks_seats, t.seeds,
        t.cdks_ge_scratch_seats, t.seeds
    );
}
