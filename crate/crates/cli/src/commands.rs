//! One function per subcommand. Each writes the effective configuration into
//! the output directory before doing any work.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use qskd_core::agfd::{foreground_mask, write_pgm};
use qskd_core::assignment::bipartite_match;
use qskd_core::autodiff::OpKind;
use qskd_core::gradsuite::{loss_grad_suite, LossCheck};
use qskd_core::lapd::{matching_benchmark, BenchReport};
use qskd_core::selection::{gqs, query_stats, write_query_stats_csv, QueryStatRow};
use qskd_core::toydetr::checkpoint::RngState;
use qskd_core::toydetr::{
    prepare_student, AblationReport, Checkpoint, Dataset, Distillation, EpochMetrics, Runner, TeacherOutputs,
    ToyDetector, Trainer,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

pub const METRICS: &str = "metrics.jsonl";
pub const TEACHER_METRICS: &str = "teacher_metrics.jsonl";
pub const MODEL_STEM: &str = "model";
pub const TEACHER_STEM: &str = "teacher";
pub const BENCH_CSV: &str = "bench.csv";
pub const BENCH_JSON: &str = "bench.json";
pub const STATS_CSV: &str = "query_stats.csv";
pub const MASK_SIDECAR: &str = "mask_dump.json";
pub const MASK_PGM: &str = "mask.pgm";
pub const GRAD_CHECK_JSON: &str = "grad_check.json";

/// Training and held-out scenes.
pub fn datasets(cfg: &RunConfig) -> CliResult<(Dataset, Dataset)> {
    let d = &cfg.data;
    let train = Dataset::generate(&d.scene, d.seed, 0, d.train_size)?;
    let eval = Dataset::generate(&d.scene, d.seed, d.eval_start, d.eval_size)?;
    Ok((train, eval))
}

struct Jsonl(BufWriter<File>);

impl Jsonl {
    fn create(path: &Path, append: bool) -> CliResult<Self> {
        let f = OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(path)?;
        Ok(Jsonl(BufWriter::new(f)))
    }

    fn write(&mut self, record: &impl Serialize) -> CliResult<()> {
        serde_json::to_writer(&mut self.0, record).map_err(qskd_core::Error::from)?;
        self.0.write_all(b"\n")?;
        self.0.flush()?;
        Ok(())
    }
}

fn check_finite(m: &EpochMetrics) -> CliResult<()> {
    if m.loss_total.is_finite() {
        Ok(())
    } else {
        Err(CliError::Numeric(format!("loss became {} in epoch {}", m.loss_total, m.epoch)))
    }
}

fn log_epoch(tag: &str, m: &EpochMetrics) {
    let ap = m.toy_ap.map(|a| format!(" toy_ap {a:.4}")).unwrap_or_default();
    eprintln!(
        "{tag} epoch {} loss {:.4} (gt {:.4} agfd {:.4} lapd {:.4}){ap}",
        m.epoch, m.loss_total, m.loss_gt, m.loss_agfd, m.loss_lapd
    );
}

fn save(trainer: &Trainer, cfg: &RunConfig, stem: &Path) -> CliResult<()> {
    let ck = Checkpoint {
        model: trainer.model.clone(),
        optimizer: Some(trainer.optimizer.clone()),
        epoch: trainer.epoch,
        config: serde_json::to_value(cfg).map_err(qskd_core::Error::from)?,
        rng: RngState {
            seed: trainer.config.seed,
            next_stream: trainer.epoch as u64,
        },
    };
    ck.save(stem)?;
    Ok(())
}

fn load_model(path: Option<&PathBuf>, cfg: &RunConfig, what: &str) -> CliResult<ToyDetector> {
    let path = path.ok_or_else(|| CliError::Config(format!("{what} needs a checkpoint")))?;
    let ck = Checkpoint::load(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    if ck.model.scene != cfg.data.scene {
        return Err(CliError::Config(format!(
            "checkpoint {} was trained on a different scene layout",
            path.display()
        )));
    }
    Ok(ck.model)
}

/// Trains `cfg.model` from scratch, or continues the checkpoint at `resume`.
/// Metrics append to an existing `metrics.jsonl` when resuming.
pub fn train(cfg: &RunConfig, resume: Option<&Path>) -> CliResult<Vec<EpochMetrics>> {
    cfg.write_effective()?;
    let (train, eval) = datasets(cfg)?;
    let mut trainer = match resume {
        Some(stem) => {
            let ck = Checkpoint::load(stem).map_err(|e| CliError::Config(format!("{}: {e}", stem.display())))?;
            if ck.model.config != cfg.model || ck.model.scene != cfg.data.scene {
                return Err(CliError::Config("resumed checkpoint does not match model or scene config".into()));
            }
            if ck.rng.seed != cfg.train.seed {
                return Err(CliError::Config(format!(
                    "checkpoint was trained with seed {}, config has {}",
                    ck.rng.seed, cfg.train.seed
                )));
            }
            if ck.epoch >= cfg.train.epochs {
                return Err(CliError::Config(format!(
                    "checkpoint already has {} of {} epochs",
                    ck.epoch, cfg.train.epochs
                )));
            }
            let optimizer = ck
                .optimizer
                .ok_or_else(|| CliError::Config("checkpoint carries no optimizer state".into()))?;
            let mut t = Trainer::new(ck.model, cfg.train.clone())?;
            t.optimizer = optimizer;
            t.epoch = ck.epoch;
            t
        }
        None => {
            let model = ToyDetector::new(
                cfg.model.clone(),
                cfg.data.scene.clone(),
                &mut ChaCha8Rng::seed_from_u64(cfg.train.seed),
            )?;
            Trainer::new(model, cfg.train.clone())?
        }
    };
    let mut metrics = Jsonl::create(&cfg.output_dir.join(METRICS), resume.is_some())?;
    let history = trainer.fit(&train, Some(&eval), None, |_, m| {
        log_epoch("train", m);
        metrics.write(m).map_err(core_io)?;
        check_finite(m).map_err(core_io)
    });
    let history = history.map_err(unwrap_core)?;
    save(&trainer, cfg, &cfg.output_dir.join(MODEL_STEM))?;
    Ok(history)
}

// `fit` callbacks return the core error type; these carry CLI errors through it.
fn core_io(e: CliError) -> qskd_core::Error {
    match e {
        CliError::Core(e) => e,
        CliError::Numeric(m) => qskd_core::Error::NonFinite(m),
        CliError::Config(m) => qskd_core::Error::Config(m),
        CliError::Io(e) => qskd_core::Error::Io(e),
    }
}

fn unwrap_core(e: qskd_core::Error) -> CliError {
    if e.is_numeric() {
        CliError::Numeric(e.to_string())
    } else {
        CliError::Core(e)
    }
}

/// The configured teacher: loaded from its checkpoint, or trained now and
/// saved as `teacher.{json,bin}` in the output directory.
pub fn teacher(cfg: &RunConfig, train: &Dataset, eval: &Dataset) -> CliResult<ToyDetector> {
    if let Some(p) = &cfg.teacher.checkpoint {
        return load_model(Some(p), cfg, "the teacher");
    }
    let t = &cfg.teacher;
    let model = ToyDetector::new(
        t.model.clone(),
        cfg.data.scene.clone(),
        &mut ChaCha8Rng::seed_from_u64(t.train.seed),
    )?;
    let mut trainer = Trainer::new(model, t.train.clone())?;
    let mut metrics = Jsonl::create(&cfg.output_dir.join(TEACHER_METRICS), false)?;
    trainer
        .fit(train, Some(eval), None, |_, m| {
            log_epoch("teacher", m);
            metrics.write(m).map_err(core_io)?;
            check_finite(m).map_err(core_io)
        })
        .map_err(unwrap_core)?;
    let mut teacher_cfg = cfg.clone();
    teacher_cfg.model = t.model.clone();
    teacher_cfg.train = t.train.clone();
    save(&trainer, &teacher_cfg, &cfg.output_dir.join(TEACHER_STEM))?;
    Ok(trainer.model)
}

/// Distills the teacher into a fresh `cfg.model` student.
pub fn distill(cfg: &RunConfig) -> CliResult<Vec<EpochMetrics>> {
    cfg.write_effective()?;
    let (train, eval) = datasets(cfg)?;
    let teacher = teacher(cfg, &train, &eval)?;
    let outputs = TeacherOutputs::compute(&teacher, &train)?;
    let mut student = ToyDetector::new(
        cfg.model.clone(),
        cfg.data.scene.clone(),
        &mut ChaCha8Rng::seed_from_u64(cfg.train.seed),
    )?;
    prepare_student(&mut student, &teacher, &cfg.train)?;
    let mut trainer = Trainer::new(student, cfg.train.clone())?;
    let mut metrics = Jsonl::create(&cfg.output_dir.join(METRICS), false)?;
    let d = Distillation {
        teacher: &teacher,
        outputs: &outputs,
    };
    let history = trainer
        .fit(&train, Some(&eval), Some(d), |_, m| {
            log_epoch("distill", m);
            metrics.write(m).map_err(core_io)?;
            check_finite(m).map_err(core_io)
        })
        .map_err(unwrap_core)?;
    save(&trainer, cfg, &cfg.output_dir.join(MODEL_STEM))?;
    Ok(history)
}

/// Runs every configured suite, writing `ablate_<suite>.csv` and `.json`.
pub fn ablate(cfg: &RunConfig) -> CliResult<Vec<AblationReport>> {
    cfg.write_effective()?;
    let a = &cfg.ablate;
    let (train, eval) = datasets(cfg)?;
    let plans: Vec<_> = a
        .suites
        .iter()
        .map(|&s| {
            let cells = qskd_core::toydetr::suite_cells(s, &cfg.model, &cfg.train);
            let only = a.cells.get(s.name());
            let needs_teacher = cells
                .iter()
                .any(|c| c.distill && only.is_none_or(|names| names.contains(&c.name)));
            (s, only, needs_teacher)
        })
        .collect();
    let teacher_model = if plans.iter().any(|p| p.2) {
        Some(teacher(cfg, &train, &eval)?)
    } else {
        None
    };
    let outputs = match &teacher_model {
        Some(t) => Some(TeacherOutputs::compute(t, &train)?),
        None => None,
    };
    let mut runner = Runner::new(&train, &eval, teacher_model.as_ref().zip(outputs.as_ref()));
    let mut reports = Vec::new();
    for (suite, only, _) in plans {
        let report = runner
            .run_suite(suite, &cfg.model, &cfg.train, &a.seeds, only.map(|v| v.as_slice()), |r| {
                eprintln!("ablate {suite} [{}] seed {} toy_ap {:.4}", r.cell, r.seed, r.toy_ap);
            })
            .map_err(unwrap_core)?;
        let stem = cfg.output_dir.join(format!("ablate_{}", suite.name()));
        report.write_csv(BufWriter::new(File::create(stem.with_extension("csv"))?))?;
        fs::write(
            stem.with_extension("json"),
            serde_json::to_string_pretty(&report).map_err(qskd_core::Error::from)? + "\n",
        )?;
        println!("suite {suite} (seeds {:?})", report.seeds);
        for c in &report.summary {
            println!("  {:<32} toy_ap {:.4} +- {:.4}  {:?}", c.cell, c.mean_toy_ap, c.std_toy_ap, c.toy_ap);
        }
        for d in &report.directions {
            let flag = if d.holds { "holds" } else { "FLAGGED: inverted" };
            println!(
                "  direction '{}': {} {:.4} <= {} {:.4}: {flag}",
                d.claim, d.lower, d.lower_mean, d.higher, d.higher_mean
            );
        }
        reports.push(report);
    }
    Ok(reports)
}

/// Local against global matching on synthetic predictions.
pub fn bench_matching(cfg: &RunConfig) -> CliResult<BenchReport> {
    cfg.write_effective()?;
    let b = &cfg.bench;
    if b.n_gt > b.n_q {
        return Err(CliError::Config(format!("bench: n_gt {} exceeds n_q {}", b.n_gt, b.n_q)));
    }
    let report = matching_benchmark(b.n_q, b.n_gt, b.tau, b.trials, b.seed)?;
    report.write_csv(BufWriter::new(File::create(cfg.output_dir.join(BENCH_CSV))?))?;
    fs::write(
        cfg.output_dir.join(BENCH_JSON),
        serde_json::to_string_pretty(&report).map_err(qskd_core::Error::from)? + "\n",
    )?;
    let s = &report.summary;
    println!(
        "n_q {} n_gt {} tau {}: local evaluates {:.0} of {:.0} cost entries ({:.4}); wall-time ratio local/global {:.4}",
        s.n_q,
        s.n_gt,
        s.tau,
        s.local_cost_entries_mean,
        s.global_cost_entries_mean,
        s.cost_entry_ratio,
        s.wall_time_ratio
    );
    Ok(report)
}

/// Average queries per ground truth at each GIoU threshold, over the
/// held-out scenes.
pub fn stats(cfg: &RunConfig) -> CliResult<Vec<QueryStatRow>> {
    cfg.write_effective()?;
    let model = load_model(cfg.stats.checkpoint.as_ref(), cfg, "stats")?;
    let (_, eval) = datasets(cfg)?;
    let samples = eval
        .patches
        .iter()
        .zip(&eval.scenes)
        .map(|(x, s)| Ok((model.predict(x)?.0, s.gts.clone())))
        .collect::<CliResult<Vec<_>>>()?;
    let rows = query_stats(&samples, &cfg.stats.thresholds, &cfg.train.match_weights)?;
    write_query_stats_csv(&rows, BufWriter::new(File::create(cfg.output_dir.join(STATS_CSV))?))?;
    for r in &rows {
        println!("threshold {:>5}: {:.4} queries per object", r.threshold, r.avg_queries_per_gt);
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, serde::Deserialize)]
pub struct MaskEntry {
    pub rank: usize,
    pub query: usize,
    pub kind: String,
    /// GIoU metric; 1 for positives, absent when the scene has no objects.
    pub g: Option<f64>,
    pub file: String,
    pub min: f64,
    pub max: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, serde::Deserialize)]
pub struct MaskDump {
    pub scene_index: u64,
    pub width: usize,
    pub height: usize,
    pub selected: Vec<usize>,
    pub mask_file: String,
    pub mask_min: f64,
    pub mask_max: f64,
    pub queries: Vec<MaskEntry>,
}

/// Per-query cross-attention heatmaps of one held-out scene, positives
/// first, then hard and easy negatives each by descending GIoU metric, and
/// the combined foreground mask.
pub fn mask_dump(cfg: &RunConfig) -> CliResult<MaskDump> {
    cfg.write_effective()?;
    let model = load_model(cfg.mask_dump.checkpoint.as_ref(), cfg, "mask-dump")?;
    let d = &cfg.data;
    let index = d.eval_start + cfg.mask_dump.scene_index;
    let scene = qskd_core::toydetr::gen_scene(d.seed, index, &d.scene)?;
    let x = qskd_core::toydetr::patches(&scene.image, &d.scene)?;
    let (preds, attn, _) = model.predict(&x)?;
    let assignment = bipartite_match(&preds, &scene.gts, &cfg.train.match_weights)?;
    let sel = gqs(&preds, &scene.gts, &cfg.train.gqs, &assignment)?;
    let (height, width) = d.scene.grid();

    let by_g = |ids: &[usize]| {
        let mut v: Vec<(usize, Option<f64>)> = ids.iter().map(|&i| (i, sel.giou_metric.get(&i).copied())).collect();
        v.sort_by(|a, b| {
            let (ga, gb) = (a.1.unwrap_or(f64::NEG_INFINITY), b.1.unwrap_or(f64::NEG_INFINITY));
            gb.total_cmp(&ga).then(a.0.cmp(&b.0))
        });
        v
    };
    let mut order: Vec<(&str, usize, Option<f64>)> = Vec::new();
    order.extend(by_g(&sel.positive_indices).into_iter().map(|(i, g)| ("positive", i, g)));
    order.extend(by_g(&sel.hard_negative_indices).into_iter().map(|(i, g)| ("hard_negative", i, g)));
    let mut easy = sel.easy_negative_indices.clone();
    // With no objects every query is unscored; list them as easy negatives.
    let unscored: Vec<usize> = (0..preds.boxes.len())
        .filter(|i| !sel.giou_metric.contains_key(i) && !easy.contains(i))
        .collect();
    easy.extend(unscored);
    order.extend(by_g(&easy).into_iter().map(|(i, g)| ("easy_negative", i, g)));

    let mut queries = Vec::with_capacity(order.len());
    for (rank, (kind, query, g)) in order.into_iter().enumerate() {
        let file = format!("query_{rank:02}_q{query:02}.pgm");
        let (min, max) = write_pgm(&cfg.output_dir.join(&file), attn.row(query), width, height)?;
        queries.push(MaskEntry {
            rank,
            query,
            kind: kind.into(),
            g,
            file,
            min,
            max,
        });
    }
    let (mask_min, mask_max) = if sel.selected_indices.is_empty() {
        write_pgm(&cfg.output_dir.join(MASK_PGM), &vec![0.0; width * height], width, height)?
    } else {
        let mask = foreground_mask(&attn, &sel.selected_indices, &sel.giou_metric)?;
        write_pgm(&cfg.output_dir.join(MASK_PGM), &mask.weights, width, height)?
    };
    let dump = MaskDump {
        scene_index: cfg.mask_dump.scene_index,
        width,
        height,
        selected: sel.selected_indices.clone(),
        mask_file: MASK_PGM.into(),
        mask_min,
        mask_max,
        queries,
    };
    fs::write(
        cfg.output_dir.join(MASK_SIDECAR),
        serde_json::to_string_pretty(&dump).map_err(qskd_core::Error::from)? + "\n",
    )?;
    println!("wrote {} query heatmaps and {MASK_PGM}", dump.queries.len());
    Ok(dump)
}

const FAULT_KINDS: [OpKind; 21] = [
    OpKind::Add,
    OpKind::Sub,
    OpKind::Mul,
    OpKind::Div,
    OpKind::MatMul,
    OpKind::Transpose,
    OpKind::Reshape,
    OpKind::Concat,
    OpKind::Slice,
    OpKind::Exp,
    OpKind::Log,
    OpKind::Relu,
    OpKind::Sigmoid,
    OpKind::Softmax,
    OpKind::Sum,
    OpKind::Mean,
    OpKind::Pow,
    OpKind::Sqrt,
    OpKind::Clamp,
    OpKind::Attention,
    OpKind::Standardize,
];

/// Op kind by case-insensitive name, for the fault-injection hook.
pub fn parse_op_kind(name: &str) -> CliResult<OpKind> {
    FAULT_KINDS
        .into_iter()
        .find(|k| format!("{k:?}").eq_ignore_ascii_case(name))
        .ok_or_else(|| CliError::Config(format!("unknown op kind {name:?}")))
}

/// Gradient check of every loss. Fails with a numeric error when any loss
/// exceeds the tolerance; the report is written either way.
pub fn grad_check(cfg: &RunConfig, fault: Option<OpKind>) -> CliResult<Vec<LossCheck>> {
    cfg.write_effective()?;
    let g = &cfg.grad_check;
    let report = loss_grad_suite(g.instances, g.seed, fault)?;
    fs::write(
        cfg.output_dir.join(GRAD_CHECK_JSON),
        serde_json::to_string_pretty(&report).map_err(qskd_core::Error::from)? + "\n",
    )?;
    for r in &report {
        println!(
            "{:<24} instances {:>3} max rel error {:.3e} {}",
            r.loss,
            r.instances,
            r.max_rel_error,
            if r.passed { "ok" } else { "FAIL" }
        );
    }
    let failed: Vec<&str> = report.iter().filter(|r| !r.passed).map(|r| r.loss.as_str()).collect();
    if failed.is_empty() {
        Ok(report)
    } else {
        Err(CliError::Numeric(format!("gradient check failed for {}", failed.join(", "))))
    }
}
