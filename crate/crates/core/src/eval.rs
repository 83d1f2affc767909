//! Disparity metrics over occlusion regions and the strategy ablation
//! runner.

use std::fmt::Write as _;
use std::io;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{DisparityField, OcclusionMask, SceneSample, StereoPair};
use crate::error::{Error, Result};
use crate::matcher::{infer, EstimatorParams, FieldKey, View};
use crate::trainer::{Strategy, TrainConfig, TrainState, Trainer};

/// Pixel set a metric is computed over. `Noc` are pixels the occlusion
/// mask marks visible in the other view, `Occ` the rest.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Region {
    All,
    Noc,
    Occ,
}

pub fn region_mask(occ: &OcclusionMask, region: Region) -> Vec<bool> {
    occ.array()
        .data()
        .iter()
        .map(|&v| match region {
            Region::All => true,
            Region::Noc => v == 1.0,
            Region::Occ => v == 0.0,
        })
        .collect()
}

fn check(pred: &DisparityField, gt: &DisparityField, region: &[bool]) -> Result<()> {
    if (pred.width(), pred.height()) != (gt.width(), gt.height()) {
        return Err(Error::shape(
            "metric",
            format!(
                "prediction {}x{} vs ground truth {}x{}",
                pred.width(),
                pred.height(),
                gt.width(),
                gt.height()
            ),
        ));
    }
    if region.len() != gt.width() * gt.height() {
        return Err(Error::shape("metric", "region size differs from the fields"));
    }
    if !region.iter().any(|&r| r) {
        return Err(Error::invalid("metric over an empty region"));
    }
    Ok(())
}

fn region_errors<'a>(
    pred: &'a DisparityField,
    gt: &'a DisparityField,
    region: &'a [bool],
) -> impl Iterator<Item = (f64, f64)> + 'a {
    pred.array()
        .data()
        .iter()
        .zip(gt.array().data())
        .zip(region)
        .filter(|(_, &r)| r)
        .map(|((&p, &g), _)| ((p - g).abs(), g))
}

fn is_d1_outlier(err: f64, gt: f64) -> bool {
    err > 3.0 && err > 0.05 * gt
}

/// Mean absolute error over `region`.
pub fn epe(pred: &DisparityField, gt: &DisparityField, region: &[bool]) -> Result<f64> {
    check(pred, gt, region)?;
    let (sum, n) = region_errors(pred, gt, region).fold((0.0, 0usize), |(s, n), (e, _)| (s + e, n + 1));
    Ok(sum / n as f64)
}

/// Percentage of `region` with error above 3 px and above 5% of the truth.
pub fn d1(pred: &DisparityField, gt: &DisparityField, region: &[bool]) -> Result<f64> {
    check(pred, gt, region)?;
    let (bad, n) = region_errors(pred, gt, region).fold((0usize, 0usize), |(b, n), (e, g)| {
        (b + is_d1_outlier(e, g) as usize, n + 1)
    });
    Ok(100.0 * bad as f64 / n as f64)
}

/// Percentage of `region` with error above `n` px.
pub fn bad_n(pred: &DisparityField, gt: &DisparityField, region: &[bool], n: f64) -> Result<f64> {
    check(pred, gt, region)?;
    let (bad, cnt) =
        region_errors(pred, gt, region).fold((0usize, 0usize), |(b, c), (e, _)| (b + (e > n) as usize, c + 1));
    Ok(100.0 * bad as f64 / cnt as f64)
}

/// Metrics pooled over every pixel of a scene set. Regions with no pixel
/// report NaN.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub epe_all: f64,
    pub epe_noc: f64,
    pub epe_occ: f64,
    pub d1_all: f64,
    pub d1_noc: f64,
    pub d1_occ: f64,
    pub bad3_all: f64,
    pub bad3_noc: f64,
    pub n_all: usize,
    pub n_noc: usize,
    pub n_occ: usize,
}

#[derive(Clone, Copy, Default)]
struct Tally {
    err: f64,
    d1: usize,
    bad3: usize,
    n: usize,
}

impl Tally {
    fn add(&mut self, err: f64, gt: f64) {
        self.err += err;
        self.d1 += is_d1_outlier(err, gt) as usize;
        self.bad3 += (err > 3.0) as usize;
        self.n += 1;
    }

    fn merge(mut self, o: Tally) -> Tally {
        self.err += o.err;
        self.d1 += o.d1;
        self.bad3 += o.bad3;
        self.n += o.n;
        self
    }

    fn epe(&self) -> f64 {
        if self.n == 0 {
            f64::NAN
        } else {
            self.err / self.n as f64
        }
    }

    fn pct(&self, count: usize) -> f64 {
        if self.n == 0 {
            f64::NAN
        } else {
            100.0 * count as f64 / self.n as f64
        }
    }
}

impl MetricReport {
    /// Pools predictions of the left-view disparity against each scene's
    /// ground truth.
    pub fn from_predictions(preds: &[DisparityField], scenes: &[SceneSample]) -> Result<Self> {
        if preds.len() != scenes.len() || scenes.is_empty() {
            return Err(Error::invalid(format!(
                "{} predictions for {} scenes",
                preds.len(),
                scenes.len()
            )));
        }
        let (mut noc, mut occ) = (Tally::default(), Tally::default());
        for (p, s) in preds.iter().zip(scenes) {
            let gt = &s.gt_disp_left;
            check(p, gt, &vec![true; gt.width() * gt.height()])?;
            let visible = s.gt_occ_left.array().data();
            for ((&pv, &gv), &m) in p.array().data().iter().zip(gt.array().data()).zip(visible) {
                let t = if m == 1.0 { &mut noc } else { &mut occ };
                t.add((pv - gv).abs(), gv);
            }
        }
        let all = noc.merge(occ);
        Ok(MetricReport {
            epe_all: all.epe(),
            epe_noc: noc.epe(),
            epe_occ: occ.epe(),
            d1_all: all.pct(all.d1),
            d1_noc: noc.pct(noc.d1),
            d1_occ: occ.pct(occ.d1),
            bad3_all: all.pct(all.bad3),
            bad3_noc: noc.pct(noc.bad3),
            n_all: all.n,
            n_noc: noc.n,
            n_occ: occ.n,
        })
    }
}

/// Left-view predictions for full scenes. Direct estimators look up
/// sample `i` for scene `i`.
pub fn predict(params: &EstimatorParams, scenes: &[SceneSample]) -> Result<Vec<DisparityField>> {
    scenes
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let d = infer(params, s.left.array(), s.right.array(), FieldKey::new(i, View::Left))?;
            DisparityField::new(d)
        })
        .collect()
}

pub fn evaluate(params: &EstimatorParams, scenes: &[SceneSample]) -> Result<MetricReport> {
    MetricReport::from_predictions(&predict(params, scenes)?, scenes)
}

/// One trained strategy with its held-out metrics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub strategy: Strategy,
    pub seed: u64,
    pub iterations: u64,
    /// Metrics at half the iteration budget.
    pub mid: Option<MetricReport>,
    pub report: Option<MetricReport>,
    pub error: Option<String>,
    pub wall_ms: u64,
}

impl AblationRow {
    /// Final D1-all over its mid-training value.
    pub fn probe_ratio(&self) -> Option<f64> {
        Some(self.report.as_ref()?.d1_all / self.mid.as_ref()?.d1_all)
    }
}

/// Trains one configuration and evaluates it at half and full budget.
pub fn run_row(train: &[StereoPair], held_out: &[SceneSample], cfg: &TrainConfig) -> AblationRow {
    let start = Instant::now();
    let label = cfg
        .strategy
        .label()
        .map(String::from)
        .unwrap_or_else(|| cfg.strategy.to_string());
    let mut row = AblationRow {
        label,
        strategy: cfg.strategy,
        seed: cfg.seed,
        iterations: cfg.iterations,
        mid: None,
        report: None,
        error: None,
        wall_ms: 0,
    };
    let result = (|| -> Result<()> {
        let state = TrainState::initial(cfg, train)?;
        let mut trainer = Trainer::new(train, cfg.clone(), state)?;
        trainer.run_until(cfg.iterations / 2, |_, _| Ok(()))?;
        row.mid = Some(evaluate(&trainer.state().params, held_out)?);
        trainer.run_until(cfg.iterations, |_, _| Ok(()))?;
        row.report = Some(evaluate(&trainer.state().params, held_out)?);
        Ok(())
    })();
    if let Err(e) = result {
        row.error = Some(e.to_string());
    }
    if cfg.log_timing {
        row.wall_ms = start.elapsed().as_millis() as u64;
    }
    row
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

pub const ABLATION_HEADER: [&str; 20] = [
    "label",
    "strategy",
    "base",
    "occ_mask",
    "wider_gen",
    "seed",
    "iters",
    "epe_all",
    "epe_noc",
    "epe_occ",
    "d1_all",
    "d1_noc",
    "d1_occ",
    "bad3_all",
    "bad3_noc",
    "mid_epe_all",
    "mid_d1_all",
    "n_eval_pixels",
    "wall_ms",
    "error",
];

impl AblationTable {
    pub fn write_csv<W: io::Write>(&self, out: W) -> Result<()> {
        let io_err = |e: csv::Error| Error::io("ablation csv", e.into());
        let mut w = csv::Writer::from_writer(out);
        w.write_record(ABLATION_HEADER).map_err(io_err)?;
        for r in &self.rows {
            let m = |f: fn(&MetricReport) -> f64| r.report.as_ref().map(|x| f(x).to_string()).unwrap_or_default();
            let mid = |f: fn(&MetricReport) -> f64| r.mid.as_ref().map(|x| f(x).to_string()).unwrap_or_default();
            let base = format!("{:?}", r.strategy.base).to_ascii_lowercase();
            w.write_record([
                r.label.clone(),
                r.strategy.to_string(),
                base,
                r.strategy.occ_mask.to_string(),
                r.strategy.wider_gen.to_string(),
                r.seed.to_string(),
                r.iterations.to_string(),
                m(|x| x.epe_all),
                m(|x| x.epe_noc),
                m(|x| x.epe_occ),
                m(|x| x.d1_all),
                m(|x| x.d1_noc),
                m(|x| x.d1_occ),
                m(|x| x.bad3_all),
                m(|x| x.bad3_noc),
                mid(|x| x.epe_all),
                mid(|x| x.d1_all),
                r.report.as_ref().map(|x| x.n_all.to_string()).unwrap_or_default(),
                r.wall_ms.to_string(),
                r.error.clone().unwrap_or_default(),
            ])
            .map_err(io_err)?;
        }
        w.flush().map_err(|e| Error::io("ablation csv", e))
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(String::from_utf8(buf).expect("csv is utf-8"))
    }

    /// Fixed-width text table.
    pub fn format(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<5} {:<16} {:>6} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8}",
            "row", "strategy", "seed", "EPE-all", "EPE-noc", "EPE-occ", "D1-all", "D1-noc", "3-all", "D1-mid"
        );
        for r in &self.rows {
            let _ = write!(s, "{:<5} {:<16} {:>6}", r.label, r.strategy.to_string(), r.seed);
            match (&r.report, &r.error) {
                (Some(m), _) => {
                    let mid = r.mid.as_ref().map_or(f64::NAN, |x| x.d1_all);
                    let _ = writeln!(
                        s,
                        " {:>8.3} {:>8.3} {:>8.3} {:>7.2}% {:>7.2}% {:>7.2}% {:>7.2}%",
                        m.epe_all, m.epe_noc, m.epe_occ, m.d1_all, m.d1_noc, m.bad3_all, mid
                    );
                }
                (None, e) => {
                    let _ = writeln!(s, " failed: {}", e.as_deref().unwrap_or("unknown"));
                }
            }
        }
        s
    }
}

/// Trains and evaluates every row with the same data, seed and budget.
/// Rows run in parallel; a failing row is recorded and the rest continue.
pub fn run_ablation(
    train: &[StereoPair],
    held_out: &[SceneSample],
    base: &TrainConfig,
    rows: &[Strategy],
) -> AblationTable {
    let rows = rows
        .par_iter()
        .map(|&strategy| {
            run_row(
                train,
                held_out,
                &TrainConfig {
                    strategy,
                    ..base.clone()
                },
            )
        })
        .collect();
    AblationTable { rows }
}
