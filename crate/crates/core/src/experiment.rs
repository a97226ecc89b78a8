// SPDX-License-Identifier: Apache-2.0

//! End-to-end pipelines built from the trainer: the per-seed ablation
//! experiment and the β/γ sensitivity sweep.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use plotters::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{load_dataset, ImageSample};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_dataset, MetricMeans};
use crate::net::SegModelCheckpoint;
use crate::synth::{generate_dataset, SynthConfig};
use crate::train::{adapt, pretrain_source, Ablation, TrainConfig};

/// Data generation plus training settings; the JSON config accepted by the CLI.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CommandConfig {
    pub synth: SynthConfig,
    pub train: TrainConfig,
}

impl CommandConfig {
    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.train.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub ablation: Ablation,
    pub target_test: MetricMeans,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub source_val: MetricMeans,
    /// Source model on target test ("no adaptation").
    pub no_adaptation: MetricMeans,
    pub adapted: Vec<AblationResult>,
    pub pretrain_seconds: f64,
}

impl SeedResult {
    pub fn dice(&self, ablation: Ablation) -> Option<f64> {
        if ablation == Ablation::None {
            return Some(self.no_adaptation.dice);
        }
        self.adapted
            .iter()
            .find(|a| a.ablation == ablation)
            .map(|a| a.target_test.dice)
    }
}

fn ablation_name(a: Ablation) -> &'static str {
    match a {
        Ablation::Full => "full",
        Ablation::NoFcl => "no_fcl",
        Ablation::NoCcpl => "no_ccpl",
        Ablation::None => "none",
    }
}

/// Generates a dataset for `seed`, pre-trains on the source splits, deletes
/// them, then adapts once per ablation and scores everything on target test.
pub fn run_seed(
    cfg: &CommandConfig,
    seed: u64,
    ablations: &[Ablation],
    work: &Path,
) -> Result<SeedResult> {
    let synth = SynthConfig {
        seed,
        ..cfg.synth.clone()
    };
    let train = TrainConfig {
        seed,
        ..cfg.train.clone()
    };
    let data = work.join("data");
    generate_dataset(&synth, &data)?;

    let t0 = Instant::now();
    let src_train = load_dataset(&data, "source_train")?;
    let src_val = load_dataset(&data, "source_val")?;
    let (source, _) = pretrain_source(&src_train, &src_val, &train, Some(&work.join("pretrain")))?;
    let pretrain_seconds = t0.elapsed().as_secs_f64();
    let model = source.to_model()?;
    let source_val = evaluate_dataset(&model, &src_val)?.mean;
    drop((src_train, src_val));
    for split in ["source_train", "source_val"] {
        let dir = data.join(split);
        std::fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }

    let target_train = load_dataset(&data, "target_train")?;
    let target_test = load_dataset(&data, "target_test")?;
    let no_adaptation = evaluate_dataset(&model, &target_test)?.mean;
    let mut adapted = Vec::new();
    for &ablation in ablations {
        let t = Instant::now();
        let cfg_a = TrainConfig {
            ablation,
            ..train.clone()
        };
        let run = work.join(format!("adapt_{}", ablation_name(ablation)));
        let (ckpt, _) = adapt(&source, &target_train, &cfg_a, Some(&run), None)?;
        let report = evaluate_dataset(&ckpt.to_model()?, &target_test)?;
        report.write(&run.join("eval"))?;
        adapted.push(AblationResult {
            ablation,
            target_test: report.mean,
            seconds: t.elapsed().as_secs_f64(),
        });
    }
    Ok(SeedResult {
        seed,
        source_val,
        no_adaptation,
        adapted,
        pretrain_seconds,
    })
}

/// Per-seed Dice table: one row per seed plus a mean row.
pub fn experiment_csv(results: &[SeedResult], ablations: &[Ablation]) -> String {
    let mut s = String::from("seed,source_val,no_adaptation");
    for a in ablations {
        let _ = write!(s, ",{}", ablation_name(*a));
    }
    s.push('\n');
    let n = results.len().max(1) as f64;
    let mut sums = vec![0.0; ablations.len() + 2];
    for r in results {
        let mut row = vec![r.source_val.dice, r.no_adaptation.dice];
        row.extend(ablations.iter().map(|a| r.dice(*a).unwrap_or(f64::NAN)));
        let _ = write!(s, "{}", r.seed);
        for (v, acc) in row.iter().zip(&mut sums) {
            let _ = write!(s, ",{v:.6}");
            *acc += v;
        }
        s.push('\n');
    }
    s.push_str("mean");
    for v in sums {
        let _ = write!(s, ",{:.6}", v / n);
    }
    s.push('\n');
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub beta: f64,
    pub gamma: f64,
    pub target_test: MetricMeans,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub points: Vec<SweepPoint>,
    /// max − min Dice over all grid points.
    pub dice_spread: f64,
    /// max − min Dice over β at γ = 1, when the grid contains γ = 1.
    pub beta_spread_at_gamma_one: Option<f64>,
}

fn spread(values: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = values.collect();
    if v.is_empty() {
        return None;
    }
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = v.iter().cloned().fold(f64::INFINITY, f64::min);
    Some(max - min)
}

impl SweepReport {
    fn new(points: Vec<SweepPoint>) -> Self {
        let dice_spread = spread(points.iter().map(|p| p.target_test.dice)).unwrap_or(0.0);
        let beta_spread_at_gamma_one = spread(
            points
                .iter()
                .filter(|p| p.gamma == 1.0)
                .map(|p| p.target_test.dice),
        );
        SweepReport {
            points,
            dice_spread,
            beta_spread_at_gamma_one,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("beta,gamma,dice,iou,weighted_f,s_measure,e_measure_max,mae\n");
        for p in &self.points {
            let m = &p.target_test;
            let _ = writeln!(
                s,
                "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
                p.beta, p.gamma, m.dice, m.iou, m.weighted_f, m.s_measure, m.e_measure_max, m.mae
            );
        }
        s
    }

    /// Dice against β, one line per γ.
    pub fn plot(&self, path: &Path) -> Result<()> {
        let plot_err = |e: String| Error::Io {
            path: path.to_path_buf(),
            source: std::io::Error::other(e),
        };
        let mut gammas: Vec<f64> = self.points.iter().map(|p| p.gamma).collect();
        gammas.sort_by(f64::total_cmp);
        gammas.dedup();
        let (bmin, bmax) = self
            .points
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p.beta), b.max(p.beta)));
        let (dmin, dmax) = self.points.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| {
            (a.min(p.target_test.dice), b.max(p.target_test.dice))
        });
        let pad_b = ((bmax - bmin) * 0.1).max(0.05);
        let pad_d = ((dmax - dmin) * 0.2).max(0.01);

        let root = SVGBackend::new(path, (640, 420)).into_drawing_area();
        root.fill(&WHITE).map_err(|e| plot_err(e.to_string()))?;
        let mut chart = ChartBuilder::on(&root)
            .caption("Target-test Dice vs beta", ("sans-serif", 18))
            .margin(12)
            .x_label_area_size(36)
            .y_label_area_size(52)
            .build_cartesian_2d((bmin - pad_b)..(bmax + pad_b), (dmin - pad_d)..(dmax + pad_d))
            .map_err(|e| plot_err(e.to_string()))?;
        chart
            .configure_mesh()
            .x_desc("beta")
            .y_desc("Dice")
            .draw()
            .map_err(|e| plot_err(e.to_string()))?;
        for (i, &g) in gammas.iter().enumerate() {
            let color = Palette99::pick(i).to_rgba();
            let mut line: Vec<(f64, f64)> = self
                .points
                .iter()
                .filter(|p| p.gamma == g)
                .map(|p| (p.beta, p.target_test.dice))
                .collect();
            line.sort_by(|a, b| a.0.total_cmp(&b.0));
            chart
                .draw_series(LineSeries::new(line.clone(), color.stroke_width(2)))
                .map_err(|e| plot_err(e.to_string()))?
                .label(format!("gamma = {g}"))
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color));
            chart
                .draw_series(line.into_iter().map(|pt| Circle::new(pt, 3, color.filled())))
                .map_err(|e| plot_err(e.to_string()))?;
        }
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .draw()
            .map_err(|e| plot_err(e.to_string()))?;
        root.present().map_err(|e| plot_err(e.to_string()))
    }

    /// Writes `sweep.csv`, `sweep.svg` and `sweep.json`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv = dir.join("sweep.csv");
        std::fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))?;
        let json = dir.join("sweep.json");
        std::fs::write(&json, serde_json::to_vec_pretty(self)?).map_err(|e| Error::io(&json, e))?;
        self.plot(&dir.join("sweep.svg"))
    }
}

/// Adapts once per (β, γ) grid point and scores each result on `target_test`.
/// Grid points run on up to `jobs` threads.
#[allow(clippy::too_many_arguments)]
pub fn sweep(
    source: &SegModelCheckpoint,
    target_train: &[ImageSample],
    target_test: &[ImageSample],
    base: &TrainConfig,
    betas: &[f64],
    gammas: &[f64],
    out: &Path,
    jobs: usize,
) -> Result<SweepReport> {
    if betas.is_empty() || gammas.is_empty() {
        return Err(Error::Config("sweep grid is empty".into()));
    }
    if betas.iter().chain(gammas).any(|v| !(*v >= 0.0)) {
        return Err(Error::Config("sweep grid values must be >= 0".into()));
    }
    let grid: Vec<(f64, f64)> = gammas
        .iter()
        .flat_map(|&g| betas.iter().map(move |&b| (b, g)))
        .collect();
    let run_point = |(beta, gamma): (f64, f64)| -> Result<SweepPoint> {
        let cfg = TrainConfig {
            beta,
            gamma,
            ..base.clone()
        };
        let dir: PathBuf = out.join(format!("beta_{beta}_gamma_{gamma}"));
        let (ckpt, _) = adapt(source, target_train, &cfg, Some(&dir), None)?;
        let report = evaluate_dataset(&ckpt.to_model()?, target_test)?;
        report.write(&dir.join("eval"))?;
        Ok(SweepPoint {
            beta,
            gamma,
            target_test: report.mean,
        })
    };
    let jobs = jobs.clamp(1, grid.len());
    let points: Vec<SweepPoint> = if jobs == 1 {
        grid.iter().map(|&p| run_point(p)).collect::<Result<_>>()?
    } else {
        let chunks: Vec<Vec<(f64, f64)>> = grid
            .chunks(grid.len().div_ceil(jobs))
            .map(<[_]>::to_vec)
            .collect();
        std::thread::scope(|s| {
            let handles: Vec<_> = chunks
                .into_iter()
                .map(|chunk| s.spawn(move || chunk.into_iter().map(run_point).collect::<Result<Vec<_>>>()))
                .collect();
            let mut all = Vec::new();
            for h in handles {
                all.extend(h.join().expect("sweep worker panicked")?);
            }
            Ok::<_, Error>(all)
        })?
    };
    let report = SweepReport::new(points);
    report.write(out)?;
    Ok(report)
}
