//! Training-trend criteria on the default synthetic dataset.
//!
//! Per seed, stages 1-3 train once into `seed{s}/base`; three joint
//! fine-tuning variants then start from that run: `cider` (CIDEr-only
//! reward), `full` (CIDEr plus listener rewards) and `extra` (as `full`,
//! with one unannotated batch per annotated one). Stages whose completed
//! checkpoint was trained with the same configuration are reused.

use std::path::{Path, PathBuf};

use d3desk::eval::MetricsReport;
use d3desk::scene::{build_dataset, Dataset, DatasetConfig};
use d3desk::trainer::{completed_checkpoint, train_stage, Stage, StageBudgets, TrainConfig, EVAL_REPORT};

pub const SEEDS: [u64; 3] = [0, 1, 2];
pub const DETECTOR_MAP: f64 = 0.90;

pub fn preset(seed: u64) -> TrainConfig {
    TrainConfig {
        seed,
        iterations: StageBudgets {
            stage1: 2000,
            stage2: 500,
            stage3: 500,
            stage4: 250,
        },
        checkpoint_every: 500,
        ..TrainConfig::default()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Variant {
    Cider,
    Full,
    Extra,
}

impl Variant {
    const ALL: [Variant; 3] = [Variant::Cider, Variant::Full, Variant::Extra];

    fn name(self) -> &'static str {
        match self {
            Variant::Cider => "cider",
            Variant::Full => "full",
            Variant::Extra => "extra",
        }
    }

    fn config(self, seed: u64) -> TrainConfig {
        let mut cfg = preset(seed);
        match self {
            Variant::Cider => cfg.reward.alpha = 0.0,
            Variant::Full => {}
            Variant::Extra => cfg.extra_ratio = 1.0,
        }
        cfg
    }
}

struct SeedRuns {
    stage3: MetricsReport,
    joint: Vec<(Variant, MetricsReport)>,
}

impl SeedRuns {
    fn joint(&self, v: Variant) -> &MetricsReport {
        &self.joint.iter().find(|(w, _)| *w == v).expect("variant trained").1
    }
}

pub struct Trends {
    detector: bool,
    trends: bool,
    root: Option<(PathBuf, Option<tempfile::TempDir>)>,
    data: Option<Dataset>,
    stage1: Option<MetricsReport>,
    seeds: Option<Result<Vec<SeedRuns>, String>>,
}

fn base_dir(root: &Path, seed: u64) -> PathBuf {
    root.join(format!("seed{seed}")).join("base")
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    }
}

fn fmt(xs: &[f64]) -> String {
    xs.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join("/")
}

/// Trains `stage` unless the directory already holds a completed run of it
/// with the same configuration, and returns its validation report.
fn stage(
    cfg: &TrainConfig,
    data: &Dataset,
    stage: Stage,
    out: &Path,
    init: Option<&Path>,
) -> Result<MetricsReport, String> {
    let report = out.join(stage.dir_name()).join(EVAL_REPORT);
    let reusable = completed_checkpoint(out, stage)
        .ok()
        .is_some_and(|ck| ck.meta.get("config") == serde_json::to_value(cfg).ok().as_ref())
        && report.is_file();
    if reusable {
        let s = std::fs::read_to_string(&report).map_err(|e| e.to_string())?;
        return serde_json::from_str(&s).map_err(|e| e.to_string());
    }
    train_stage(cfg, data, stage, out, init, false)
        .map(|s| s.report)
        .map_err(|e| format!("{} {stage}: {e}", out.display()))
}

impl Trends {
    pub fn new(detector: bool, trends: bool) -> Self {
        Self {
            detector,
            trends,
            root: None,
            data: None,
            stage1: None,
            seeds: None,
        }
    }

    fn root(&mut self) -> Result<PathBuf, String> {
        if self.root.is_none() {
            self.root = Some(match std::env::var_os("D3DESK_ACCEPT_DIR") {
                Some(d) => (PathBuf::from(d), None),
                None => {
                    let t = tempfile::tempdir().map_err(|e| e.to_string())?;
                    (t.path().to_path_buf(), Some(t))
                }
            });
        }
        Ok(self.root.as_ref().unwrap().0.clone())
    }

    fn data(&mut self) -> Result<&Dataset, String> {
        if self.data.is_none() {
            self.data = Some(build_dataset(&DatasetConfig::default()).map_err(|e| e.to_string())?);
        }
        Ok(self.data.as_ref().unwrap())
    }

    fn stage1(&mut self) -> Result<MetricsReport, String> {
        if let Some(r) = &self.stage1 {
            return Ok(r.clone());
        }
        let base = base_dir(&self.root()?, SEEDS[0]);
        let r = stage(&preset(SEEDS[0]), self.data()?, Stage::DETECTOR, &base, None)?;
        self.stage1 = Some(r.clone());
        Ok(r)
    }

    fn seeds(&mut self) -> Result<&[SeedRuns], String> {
        if self.seeds.is_none() {
            let runs = self.train_seeds();
            self.seeds = Some(runs);
        }
        self.seeds.as_ref().unwrap().as_deref().map_err(Clone::clone)
    }

    fn train_seeds(&mut self) -> Result<Vec<SeedRuns>, String> {
        if self.detector {
            self.stage1()?;
        }
        let root = self.root()?;
        let mut out = Vec::new();
        for seed in SEEDS {
            let base = base_dir(&root, seed);
            let cfg = preset(seed);
            let data = self.data()?;
            let mut stage3 = None;
            for n in 1..=3 {
                stage3 = Some(stage(&cfg, data, Stage::new(n).unwrap(), &base, None)?);
            }
            let joint = Variant::ALL
                .iter()
                .map(|&v| {
                    let dir = root.join(format!("seed{seed}")).join(v.name());
                    stage(&v.config(seed), data, Stage::JOINT, &dir, Some(&base)).map(|r| (v, r))
                })
                .collect::<Result<_, String>>()?;
            out.push(SeedRuns {
                stage3: stage3.unwrap(),
                joint,
            });
        }
        Ok(out)
    }

    pub fn detector(&mut self) -> Result<String, String> {
        let map = self
            .stage1()?
            .detection_map
            .ok_or("stage 1 report lacks detection mAP")?;
        let detail = format!("val mAP@0.5 {map:.4} (threshold {DETECTOR_MAP})");
        if map >= DETECTOR_MAP {
            Ok(detail)
        } else {
            Err(detail)
        }
    }

    fn metric<F>(&mut self, f: F) -> Result<Vec<[f64; 4]>, String>
    where
        F: Fn(&MetricsReport) -> Option<f64>,
    {
        if !self.trends {
            return Err("trend runs not requested".into());
        }
        self.seeds()?
            .iter()
            .map(|s| {
                let get = |r: &MetricsReport| f(r).ok_or_else(|| "report lacks the metric".to_string());
                Ok([
                    get(&s.stage3)?,
                    get(s.joint(Variant::Cider))?,
                    get(s.joint(Variant::Full))?,
                    get(s.joint(Variant::Extra))?,
                ])
            })
            .collect()
    }

    fn column(rows: &[[f64; 4]], i: usize) -> Vec<f64> {
        rows.iter().map(|r| r[i]).collect()
    }

    pub fn captioning(&mut self) -> Result<String, String> {
        let rows = self.metric(|r| r.captioning.as_ref().map(|c| c.cider))?;
        let [mle, cider, full] = [0, 1, 2].map(|i| Self::column(&rows, i));
        let [m0, m1, m2] = [&mle, &cider, &full].map(|c| median(c.clone()));
        let detail = format!(
            "C@0.5IoU per seed MLE {} -> CIDEr {} -> CIDEr+listener {}; medians {m0:.4} -> {m1:.4} -> {m2:.4}",
            fmt(&mle),
            fmt(&cider),
            fmt(&full)
        );
        if m1 > m0 && m2 >= m1 {
            Ok(detail)
        } else {
            Err(detail)
        }
    }

    pub fn grounding(&mut self) -> Result<String, String> {
        let rows = self.metric(|r| r.grounding.as_ref().map(|g| g.multiple))?;
        let (before, after) = (Self::column(&rows, 0), Self::column(&rows, 2));
        let (m0, m1) = (median(before.clone()), median(after.clone()));
        let detail = format!(
            "multiple Acc@0.5IoU per seed stage 3 {} -> joint {}; medians {m0:.4} -> {m1:.4}",
            fmt(&before),
            fmt(&after)
        );
        if m1 >= m0 {
            Ok(detail)
        } else {
            Err(detail)
        }
    }

    pub fn extra_data(&mut self) -> Result<String, String> {
        let probe = self.metric(|r| r.probe.as_ref().map(|g| g.overall))?;
        let ground = self.metric(|r| r.grounding.as_ref().map(|g| g.overall))?;
        let [p0, p1] = [2, 3].map(|i| Self::column(&probe, i));
        let [g0, g1] = [2, 3].map(|i| Self::column(&ground, i));
        let [mp0, mp1, mg0, mg1] = [&p0, &p1, &g0, &g1].map(|c| median(c.clone()));
        let detail = format!(
            "probe overall per seed ratio 0 {} vs 1 {} (medians {mp0:.4} vs {mp1:.4}); grounding overall {} vs {} (medians {mg0:.4} vs {mg1:.4})",
            fmt(&p0),
            fmt(&p1),
            fmt(&g0),
            fmt(&g1)
        );
        if mp1 >= mp0 && mg1 >= mg0 {
            Ok(detail)
        } else {
            Err(detail)
        }
    }
}
