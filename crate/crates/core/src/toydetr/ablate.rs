//! Ablation suites: named grids of training configurations, each run over
//! several seeds and summarized as a table.

use std::collections::HashMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{ModelConfig, ToyDetector};
use super::scene::Dataset;
use super::train::{prepare_student, Distillation, EpochMetrics, TeacherOutputs, TrainConfig, Trainer};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Suite {
    /// No distillation, AGFD only, LAPD only, both.
    Components,
    /// Query selection threshold shared by both losses.
    EncThreshold,
    /// Student encoder depth crossed with the feature adapter.
    Adapter,
    /// Which query groups LAPD pairs, with AGFD off.
    Dec,
    /// Weight of the feature loss.
    LambdaAgfd,
}

impl Suite {
    pub const ALL: [Suite; 5] = [
        Suite::Components,
        Suite::EncThreshold,
        Suite::Adapter,
        Suite::Dec,
        Suite::LambdaAgfd,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Components => "components",
            Suite::EncThreshold => "enc-threshold",
            Suite::Adapter => "adapter",
            Suite::Dec => "dec",
            Suite::LambdaAgfd => "lambda-agfd",
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL.into_iter().find(|x| x.name() == s).ok_or_else(|| {
            let known: Vec<&str> = Suite::ALL.iter().map(|x| x.name()).collect();
            Error::Config(format!("unknown suite {s:?}; known suites: {}", known.join(", ")))
        })
    }
}

/// One configuration of a suite.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Cell {
    pub name: String,
    pub distill: bool,
    pub student: ModelConfig,
    pub train: TrainConfig,
}

fn cell(name: impl Into<String>, distill: bool, student: &ModelConfig, train: TrainConfig) -> Cell {
    Cell {
        name: name.into(),
        distill,
        student: student.clone(),
        train,
    }
}

/// The grid of `suite` around a base student and training configuration.
pub fn suite_cells(suite: Suite, student: &ModelConfig, base: &TrainConfig) -> Vec<Cell> {
    let with = |f: &dyn Fn(&mut TrainConfig)| {
        let mut c = base.clone();
        f(&mut c);
        c
    };
    match suite {
        Suite::Components => vec![
            cell("none", false, student, base.clone()),
            cell("agfd", true, student, with(&|c| c.lambda_lapd = 0.0)),
            cell("lapd", true, student, with(&|c| c.lambda_agfd = 0.0)),
            cell("both", true, student, base.clone()),
        ],
        Suite::EncThreshold => {
            let tau = |t: f64| {
                with(&|c| {
                    c.gqs.giou_threshold = t;
                    c.agfd_hard_negatives = true;
                    c.pairing.hard_negative_pairs = true;
                })
            };
            vec![
                cell("tau=-1.0 (all negatives)", true, student, tau(-1.0)),
                cell("tau=0.0", true, student, tau(0.0)),
                cell("tau=0.5", true, student, tau(0.5)),
                cell(
                    "positives only",
                    true,
                    student,
                    with(&|c| {
                        c.agfd_hard_negatives = false;
                        c.pairing.hard_negative_pairs = false;
                    }),
                ),
            ]
        }
        Suite::Adapter => {
            let mut cells = Vec::new();
            for n_enc in [0, 3, 6] {
                let s = ModelConfig {
                    n_enc,
                    ..student.clone()
                };
                for on in [false, true] {
                    let name = format!("n_enc={n_enc} adapter={}", if on { "on" } else { "off" });
                    cells.push(cell(name, true, &s, with(&|c| c.adapter.enabled = on)));
                }
            }
            cells
        }
        Suite::Dec => {
            let lapd = |tau: f64, positives: bool, negatives: bool| {
                with(&|c| {
                    c.lambda_agfd = 0.0;
                    c.gqs.giou_threshold = tau;
                    c.pairing.positive_pairs = positives;
                    c.pairing.hard_negative_pairs = negatives;
                })
            };
            vec![
                cell("baseline", false, student, base.clone()),
                cell("positives", true, student, lapd(base.gqs.giou_threshold, true, false)),
                cell("positives + all negatives", true, student, lapd(-1.0, true, true)),
                cell("positives + hard tau=0.5", true, student, lapd(0.5, true, true)),
                cell("positives + hard tau=0.0", true, student, lapd(0.0, true, true)),
                cell("hard tau=0.0 only", true, student, lapd(0.0, false, true)),
            ]
        }
        Suite::LambdaAgfd => [0.0, 5.0, 50.0, 200.0]
            .into_iter()
            .map(|l| cell(format!("lambda_agfd={l}"), true, student, with(&|c| c.lambda_agfd = l)))
            .collect(),
    }
}

/// A finished training run of one cell at one seed.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CellRun {
    pub cell: String,
    pub seed: u64,
    pub toy_ap: f64,
    pub history: Vec<EpochMetrics>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CellSummary {
    pub cell: String,
    pub seeds: Vec<u64>,
    pub toy_ap: Vec<f64>,
    pub mean_toy_ap: f64,
    pub std_toy_ap: f64,
    pub final_loss_gt: f64,
    pub final_loss_agfd: f64,
    pub final_loss_lapd: f64,
}

/// An expected ordering between two cells' mean toy-AP. Reported, never
/// enforced.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Direction {
    pub claim: String,
    pub lower: String,
    pub higher: String,
    pub lower_mean: f64,
    pub higher_mean: f64,
    pub holds: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationReport {
    pub suite: Suite,
    pub seeds: Vec<u64>,
    pub summary: Vec<CellSummary>,
    pub directions: Vec<Direction>,
    pub runs: Vec<CellRun>,
}

impl AblationReport {
    pub fn cell(&self, name: &str) -> Option<&CellSummary> {
        self.summary.iter().find(|c| c.cell == name)
    }

    /// One row per cell and seed, then per-cell means.
    pub fn write_csv(&self, mut out: impl Write) -> Result<()> {
        writeln!(out, "suite,cell,seed,toy_ap,loss_gt,loss_agfd,loss_lapd")?;
        for r in &self.runs {
            let last = r.history.last();
            writeln!(
                out,
                "{},\"{}\",{},{},{},{},{}",
                self.suite,
                r.cell,
                r.seed,
                r.toy_ap,
                last.map_or(0.0, |m| m.loss_gt),
                last.map_or(0.0, |m| m.loss_agfd),
                last.map_or(0.0, |m| m.loss_lapd),
            )?;
        }
        for c in &self.summary {
            writeln!(
                out,
                "{},\"{}\",mean,{},{},{},{}",
                self.suite, c.cell, c.mean_toy_ap, c.final_loss_gt, c.final_loss_agfd, c.final_loss_lapd
            )?;
        }
        Ok(())
    }
}

/// Orderings the paper's ablations point to, checked where both cells ran.
fn directions(suite: Suite, summary: &[CellSummary]) -> Vec<Direction> {
    let pairs: &[(&str, &str, &str)] = match suite {
        Suite::Components => &[
            ("AGFD helps", "none", "agfd"),
            ("LAPD helps", "none", "lapd"),
            ("both beat none", "none", "both"),
        ],
        Suite::EncThreshold => &[("easy negatives detract", "tau=-1.0 (all negatives)", "tau=0.0")],
        Suite::Adapter => &[
            ("adapter helps at n_enc=0", "n_enc=0 adapter=off", "n_enc=0 adapter=on"),
            ("adapter helps at n_enc=3", "n_enc=3 adapter=off", "n_enc=3 adapter=on"),
        ],
        Suite::Dec => &[
            ("positive pairs help", "baseline", "positives"),
            ("easy negatives detract", "positives + all negatives", "positives + hard tau=0.0"),
        ],
        Suite::LambdaAgfd => &[],
    };
    let mean = |name: &str| summary.iter().find(|c| c.cell == name).map(|c| c.mean_toy_ap);
    pairs
        .iter()
        .filter_map(|&(claim, lo, hi)| {
            let (l, h) = (mean(lo)?, mean(hi)?);
            Some(Direction {
                claim: claim.into(),
                lower: lo.into(),
                higher: hi.into(),
                lower_mean: l,
                higher_mean: h,
                holds: l <= h,
            })
        })
        .collect()
}

/// Runs cells against fixed data and an optional frozen teacher, reusing
/// any run whose student, training configuration and seed were seen before.
pub struct Runner<'a> {
    pub train: &'a Dataset,
    pub eval: &'a Dataset,
    pub teacher: Option<Distillation<'a>>,
    cache: HashMap<String, CellRun>,
}

impl<'a> Runner<'a> {
    pub fn new(train: &'a Dataset, eval: &'a Dataset, teacher: Option<(&'a ToyDetector, &'a TeacherOutputs)>) -> Self {
        Runner {
            train,
            eval,
            teacher: teacher.map(|(teacher, outputs)| Distillation { teacher, outputs }),
            cache: HashMap::new(),
        }
    }

    /// Trains `cell` from scratch with `seed` (model initialization and
    /// shuffling both follow it) and evaluates the final model.
    pub fn run(
        &mut self,
        cell: &Cell,
        seed: u64,
        mut on_epoch: impl FnMut(&EpochMetrics) -> Result<()>,
    ) -> Result<CellRun> {
        let mut train = cell.train.clone();
        train.seed = seed;
        let key = serde_json::to_string(&(cell.distill, &cell.student, &train))?;
        if let Some(hit) = self.cache.get(&key) {
            return Ok(CellRun {
                cell: cell.name.clone(),
                ..hit.clone()
            });
        }
        let mut model = ToyDetector::new(cell.student.clone(), self.train.spec.clone(), &mut ChaCha8Rng::seed_from_u64(seed))?;
        let distill = if cell.distill {
            let d = self.teacher.ok_or_else(|| Error::Config(format!("cell {:?} needs a teacher", cell.name)))?;
            prepare_student(&mut model, d.teacher, &train)?;
            Some(d)
        } else {
            None
        };
        let mut trainer = Trainer::new(model, train)?;
        let history = trainer.fit(self.train, Some(self.eval), distill, |_, m| on_epoch(m))?;
        let toy_ap = history
            .last()
            .and_then(|m| m.toy_ap)
            .ok_or_else(|| Error::Config("a run needs at least one epoch".into()))?;
        let run = CellRun {
            cell: cell.name.clone(),
            seed,
            toy_ap,
            history,
        };
        self.cache.insert(key, run.clone());
        Ok(run)
    }

    /// Runs every selected cell of `suite` over `seeds`. `only` restricts the
    /// grid to the named cells.
    pub fn run_suite(
        &mut self,
        suite: Suite,
        student: &ModelConfig,
        base: &TrainConfig,
        seeds: &[u64],
        only: Option<&[String]>,
        mut on_run: impl FnMut(&CellRun),
    ) -> Result<AblationReport> {
        if seeds.is_empty() {
            return Err(Error::Config("an ablation needs at least one seed".into()));
        }
        let mut cells = suite_cells(suite, student, base);
        if let Some(names) = only {
            for n in names {
                if !cells.iter().any(|c| &c.name == n) {
                    let known: Vec<&str> = cells.iter().map(|c| c.name.as_str()).collect();
                    return Err(Error::Config(format!(
                        "suite {suite} has no cell {n:?}; cells: {}",
                        known.join(", ")
                    )));
                }
            }
            cells.retain(|c| names.contains(&c.name));
        }
        let mut runs = Vec::new();
        let mut summary = Vec::new();
        for c in &cells {
            let mut aps = Vec::with_capacity(seeds.len());
            let mut finals = (0.0, 0.0, 0.0);
            for &seed in seeds {
                let run = self.run(c, seed, |_| Ok(()))?;
                on_run(&run);
                aps.push(run.toy_ap);
                if let Some(m) = run.history.last() {
                    finals.0 += m.loss_gt;
                    finals.1 += m.loss_agfd;
                    finals.2 += m.loss_lapd;
                }
                runs.push(run);
            }
            let n = aps.len() as f64;
            let mean = aps.iter().sum::<f64>() / n;
            let var = aps.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
            summary.push(CellSummary {
                cell: c.name.clone(),
                seeds: seeds.to_vec(),
                toy_ap: aps,
                mean_toy_ap: mean,
                std_toy_ap: var.sqrt(),
                final_loss_gt: finals.0 / n,
                final_loss_agfd: finals.1 / n,
                final_loss_lapd: finals.2 / n,
            });
        }
        Ok(AblationReport {
            suite,
            seeds: seeds.to_vec(),
            directions: directions(suite, &summary),
            summary,
            runs,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toydetr::scene::SceneSpec;

    #[test]
    fn grid_sizes() {
        let (s, t) = (ModelConfig::default(), TrainConfig::default());
        assert_eq!(suite_cells(Suite::Components, &s, &t).len(), 4);
        assert_eq!(suite_cells(Suite::EncThreshold, &s, &t).len(), 4);
        assert_eq!(suite_cells(Suite::Adapter, &s, &t).len(), 6);
        assert_eq!(suite_cells(Suite::Dec, &s, &t).len(), 6);
        let taus: Vec<f64> = suite_cells(Suite::EncThreshold, &s, &t)
            .iter()
            .map(|c| c.train.gqs.giou_threshold)
            .collect();
        assert_eq!(&taus[..3], &[-1.0, 0.0, 0.5]);
        let pos_only = &suite_cells(Suite::EncThreshold, &s, &t)[3].train;
        assert!(!pos_only.agfd_hard_negatives && !pos_only.pairing.hard_negative_pairs);
        let depths: Vec<usize> = suite_cells(Suite::Adapter, &s, &t).iter().map(|c| c.student.n_enc).collect();
        assert_eq!(depths, [0, 0, 3, 3, 6, 6]);
    }

    #[test]
    fn suite_names_round_trip() {
        for s in Suite::ALL {
            assert_eq!(s.name().parse::<Suite>().unwrap(), s);
        }
        assert!(matches!("bogus".parse::<Suite>(), Err(Error::Config(_))));
    }

    #[test]
    fn shared_configurations_train_once() {
        let spec = SceneSpec::default();
        let train = Dataset::generate(&spec, 0, 0, 4).unwrap();
        let eval = Dataset::generate(&spec, 0, 100, 3).unwrap();
        let student = ModelConfig {
            n_queries: 6,
            n_dec: 1,
            ..ModelConfig::default()
        };
        let teacher = ToyDetector::new(student.clone(), spec, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let outputs = TeacherOutputs::compute(&teacher, &train).unwrap();
        let base = TrainConfig {
            epochs: 1,
            batch_size: 2,
            ..TrainConfig::default()
        };
        let mut runner = Runner::new(&train, &eval, Some((&teacher, &outputs)));
        let mut trained = 0;
        let comp = runner
            .run_suite(Suite::Components, &student, &base, &[0], Some(&["none".into(), "both".into()]), |_| {
                trained += 1
            })
            .unwrap();
        assert_eq!(comp.summary.len(), 2);
        assert_eq!(comp.directions.len(), 1);
        let enc = runner
            .run_suite(Suite::EncThreshold, &student, &base, &[0], Some(&["tau=0.0".into()]), |_| {})
            .unwrap();
        assert_eq!(enc.runs[0].history, comp.runs[1].history);
        assert_eq!(enc.runs[0].cell, "tau=0.0");
        let err = runner.run_suite(Suite::Dec, &student, &base, &[0], Some(&["nope".into()]), |_| {});
        assert!(matches!(err, Err(Error::Config(_))));
    }
}
