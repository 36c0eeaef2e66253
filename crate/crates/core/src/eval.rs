//! Metrics, experiment runners, sweeps, ablations and plot output.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::{ArrayView, Dimension};
use plotters::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{Config, ABLATION_SWITCHES};
use crate::error::{Error, Result};
use crate::grid::{Region, SplitMode};
use crate::model::Sample;
use crate::nn::Mat;
use crate::pipeline::{
    load_predictions, run_pipeline, run_seeds, write_json, CityData, RunManifest, Stage3Output, StageSelection, METRICS_FILE,
};

fn check_shapes<D: Dimension>(pred: &ArrayView<f64, D>, truth: &ArrayView<f64, D>) -> Result<()> {
    if pred.shape() != truth.shape() {
        return Err(Error::invalid(format!("prediction shape {:?} vs truth {:?}", pred.shape(), truth.shape())));
    }
    if pred.is_empty() {
        return Err(Error::invalid("no values to score"));
    }
    Ok(())
}

/// Mean absolute error over every element.
pub fn mae_metric<D: Dimension>(pred: ArrayView<f64, D>, truth: ArrayView<f64, D>) -> Result<f64> {
    check_shapes(&pred, &truth)?;
    let sum: f64 = pred.iter().zip(truth.iter()).map(|(p, t)| (p - t).abs()).sum();
    Ok(sum / pred.len() as f64)
}

/// Root of the mean squared error over every element.
pub fn rmse_metric<D: Dimension>(pred: ArrayView<f64, D>, truth: ArrayView<f64, D>) -> Result<f64> {
    check_shapes(&pred, &truth)?;
    let sum: f64 = pred.iter().zip(truth.iter()).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok((sum / pred.len() as f64).sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricCell {
    pub city: String,
    pub dynamics: String,
    /// 1-based step into the predicted window.
    pub horizon: usize,
    pub mae: f64,
    pub rmse: f64,
}

/// Scores of one run on normalized target values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub config_fingerprint: String,
    pub mode: SplitMode,
    pub city: String,
    pub dynamics: String,
    pub test_regions: Vec<Region>,
    pub disjoint_regions: bool,
    pub ablations: Vec<String>,
    pub samples: usize,
    pub cells: Vec<MetricCell>,
    /// Over all samples, cells and horizon steps.
    pub mae: f64,
    pub rmse: f64,
    /// Means of the per-horizon cells.
    pub mean_cell_mae: f64,
    pub mean_cell_rmse: f64,
    /// The same scores from the Stage-2 heads before adaptation.
    pub pre_adaptation_cells: Vec<MetricCell>,
    pub pre_adaptation_mae: f64,
    pub pre_adaptation_rmse: f64,
}

/// Identifying fields of a report, independent of the numbers.
#[derive(Clone, Debug)]
pub struct ReportContext {
    pub config_fingerprint: String,
    pub mode: SplitMode,
    pub city: String,
    pub dynamics: String,
    pub test_regions: Vec<Region>,
    pub disjoint_regions: bool,
    pub ablations: Vec<String>,
}

fn cells(ctx: &ReportContext, pred: &Mat, truth: &Mat, m: usize) -> Result<Vec<MetricCell>> {
    let width = pred.ncols();
    if m == 0 || !width.is_multiple_of(m) {
        return Err(Error::invalid(format!("{width} columns do not split into {m} horizon steps")));
    }
    let per = width / m;
    (0..m)
        .map(|k| {
            let cols = ndarray::s![.., k * per..(k + 1) * per];
            Ok(MetricCell {
                city: ctx.city.clone(),
                dynamics: ctx.dynamics.clone(),
                horizon: k + 1,
                mae: mae_metric(pred.slice(cols), truth.slice(cols))?,
                rmse: rmse_metric(pred.slice(cols), truth.slice(cols))?,
            })
        })
        .collect()
}

/// Builds a report from `(samples, m * side * side)` prediction matrices.
pub fn build_report(ctx: ReportContext, pred: &Mat, pre: &Mat, truth: &Mat, m: usize) -> Result<MetricReport> {
    let post_cells = cells(&ctx, pred, truth, m)?;
    let pre_cells = cells(&ctx, pre, truth, m)?;
    let mean = |f: fn(&MetricCell) -> f64| post_cells.iter().map(f).sum::<f64>() / m as f64;
    Ok(MetricReport {
        mae: mae_metric(pred.view(), truth.view())?,
        rmse: rmse_metric(pred.view(), truth.view())?,
        mean_cell_mae: mean(|c| c.mae),
        mean_cell_rmse: mean(|c| c.rmse),
        pre_adaptation_mae: mae_metric(pre.view(), truth.view())?,
        pre_adaptation_rmse: rmse_metric(pre.view(), truth.view())?,
        samples: pred.nrows(),
        cells: post_cells,
        pre_adaptation_cells: pre_cells,
        config_fingerprint: ctx.config_fingerprint,
        mode: ctx.mode,
        city: ctx.city,
        dynamics: ctx.dynamics,
        test_regions: ctx.test_regions,
        disjoint_regions: ctx.disjoint_regions,
        ablations: ctx.ablations,
    })
}

fn context(cfg: &Config, city: &str, dynamics: &str, split: &crate::grid::SplitSpec) -> ReportContext {
    ReportContext {
        config_fingerprint: cfg.fingerprint(),
        mode: split.mode,
        city: city.to_string(),
        dynamics: dynamics.to_string(),
        test_regions: split.test_regions.clone(),
        disjoint_regions: split.is_disjoint(),
        ablations: cfg.eval.ablation.active().into_iter().map(String::from).collect(),
    }
}

/// Report of a finished Stage 3.
pub fn metric_report(cfg: &Config, data: &CityData, samples: &[Sample], out: &Stage3Output) -> Result<MetricReport> {
    let truth = Mat::from_shape_fn(out.predictions.dim(), |(i, j)| samples[i].target[j]);
    let ctx = context(cfg, &data.city, &data.channel_names[data.target_channel], &data.split);
    build_report(ctx, &out.predictions, &out.pre_predictions, &truth, cfg.heads.m)
}

/// Recomputes the report of a run directory from its stored predictions.
pub fn evaluate_run(run_dir: &Path) -> Result<MetricReport> {
    let manifest = RunManifest::load(run_dir)?;
    if !manifest.is_complete(3) {
        return Err(Error::StageOrder(format!("{} has no completed Stage 3", run_dir.display())));
    }
    let (pred, pre, truth, meta) = load_predictions(run_dir)?;
    let ctx = context(&manifest.config, &meta.city, &meta.dynamics, &manifest.split);
    build_report(ctx, &pred, &pre, &truth, meta.m)
}

/// Runs all three stages and returns the report. With a run directory the
/// artifacts, `metrics.json` and (if enabled) the plots are written there.
pub fn run_experiment(cfg: &Config, run_dir: Option<&Path>) -> Result<MetricReport> {
    let out = run_pipeline(cfg, run_dir, StageSelection::All)?;
    let report = out.report.expect("stage 3 ran");
    if let (Some(dir), true) = (run_dir, cfg.eval.plots) {
        emit_report_plots(&report, &dir.join("plots"))?;
    }
    Ok(report)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    PT,
    PS,
    TrainableLayers,
    NChannels,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::PT => "p_t",
            SweepAxis::PS => "p_s",
            SweepAxis::TrainableLayers => "trainable_layers",
            SweepAxis::NChannels => "n_channels",
        }
    }

    /// Copy of `base` with the axis set to `value`.
    pub fn apply(self, base: &Config, value: f64) -> Result<Config> {
        let mut cfg = base.clone();
        let as_count = |v: f64| -> Result<usize> {
            if v >= 0.0 && v.fract() == 0.0 {
                Ok(v as usize)
            } else {
                Err(Error::invalid(format!("{} takes whole numbers, got {v}", self.name())))
            }
        };
        match self {
            SweepAxis::PT | SweepAxis::PS => {
                if !(value > 0.0 && value < 1.0) {
                    return Err(Error::invalid(format!("{} must lie in (0, 1), got {value}", self.name())));
                }
                if self == SweepAxis::PT {
                    cfg.mae.p_t = value;
                } else {
                    cfg.mae.p_s = value;
                }
            }
            SweepAxis::TrainableLayers => {
                let k = as_count(value)?;
                if k > cfg.backbone.layers {
                    return Err(Error::invalid(format!("{k} trainable layers but the backbone has {}", cfg.backbone.layers)));
                }
                cfg.backbone.l_frozen = cfg.backbone.layers - k;
            }
            SweepAxis::NChannels => {
                let c = as_count(value)?;
                if c == 0 {
                    return Err(Error::invalid("n_channels must be at least 1"));
                }
                cfg.data.channels = c;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "p_t" => Ok(SweepAxis::PT),
            "p_s" => Ok(SweepAxis::PS),
            "trainable_layers" => Ok(SweepAxis::TrainableLayers),
            "n_channels" => Ok(SweepAxis::NChannels),
            other => Err(Error::invalid(format!("unknown sweep axis `{other}`"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct SweepSpec {
    pub axis: SweepAxis,
    pub values: Vec<f64>,
    pub base: Config,
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        if self.values.is_empty() {
            return Err(Error::invalid("sweep needs at least one value"));
        }
        for &v in &self.values {
            self.axis.apply(&self.base, v)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub mae: f64,
    pub rmse: f64,
    pub config_fingerprint: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub axis: SweepAxis,
    /// Seeds shared by every row.
    pub seeds: BTreeMap<String, u64>,
    pub rows: Vec<SweepRow>,
}

/// One experiment per value with the base config's seeds, rows sorted by
/// value. With `out_dir`, each row keeps its run directory and the table is
/// written as `sweep_<axis>.json`.
pub fn run_sweep(spec: &SweepSpec, out_dir: Option<&Path>) -> Result<SweepTable> {
    spec.validate()?;
    let mut values = spec.values.clone();
    values.sort_by(f64::total_cmp);
    let mut rows = Vec::with_capacity(values.len());
    for v in values {
        let cfg = spec.axis.apply(&spec.base, v)?;
        let dir = out_dir.map(|d| d.join(format!("{}={v}", spec.axis)));
        let out = run_pipeline(&cfg, dir.as_deref(), StageSelection::All)?;
        let report = out.report.expect("stage 3 ran");
        rows.push(SweepRow {
            value: v,
            mae: report.mae,
            rmse: report.rmse,
            config_fingerprint: report.config_fingerprint,
        });
    }
    let base = &spec.base;
    let table = SweepTable {
        axis: spec.axis,
        seeds: run_seeds(base),
        rows,
    };
    if let Some(dir) = out_dir {
        write_json(&dir.join(format!("sweep_{}.json", spec.axis)), &table)?;
        if base.eval.plots {
            emit_sweep_plot(&table, dir)?;
        }
    }
    Ok(table)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    /// `full` for the unablated model, otherwise the switch name.
    pub variant: String,
    pub config_fingerprint: String,
    pub report: MetricReport,
}

/// Runs the base config and one variant per switch.
pub fn run_ablations(base: &Config, switches: &[&str], out_dir: Option<&Path>) -> Result<Vec<AblationRow>> {
    let mut variants = vec![("full".to_string(), base.clone())];
    for &s in switches {
        if !ABLATION_SWITCHES.contains(&s) {
            return Err(Error::invalid(format!("unknown ablation switch `{s}`")));
        }
        let mut cfg = base.clone();
        cfg.eval.ablation.set(s)?;
        variants.push((s.to_string(), cfg));
    }
    let mut rows = Vec::with_capacity(variants.len());
    for (name, cfg) in variants {
        let dir = out_dir.map(|d| d.join(&name));
        let report = run_experiment(&cfg, dir.as_deref())?;
        rows.push(AblationRow {
            variant: name,
            config_fingerprint: cfg.fingerprint(),
            report,
        });
    }
    if let Some(dir) = out_dir {
        write_json(&dir.join("ablations.json"), &rows)?;
    }
    Ok(rows)
}

fn plot_err(e: impl fmt::Display, path: &Path) -> Error {
    Error::format(path, format!("plot: {e}"))
}

struct Series {
    name: String,
    points: Vec<(f64, f64)>,
}

fn line_plot(path: &Path, title: &str, x_label: &str, y_label: &str, series: &[Series]) -> Result<()> {
    let xs = series.iter().flat_map(|s| s.points.iter().map(|p| p.0));
    let ys = series.iter().flat_map(|s| s.points.iter().map(|p| p.1));
    let (x0, x1) = xs.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)));
    let (y0, y1) = ys.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), y| (a.min(y), b.max(y)));
    let pad_x = ((x1 - x0) * 0.05).max(0.05);
    let pad_y = ((y1 - y0) * 0.1).max(1e-3);
    let root = SVGBackend::new(path, (640, 420)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| plot_err(e, path))?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 18))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(56)
        .build_cartesian_2d(x0 - pad_x..x1 + pad_x, (y0 - pad_y).max(0.0)..y1 + pad_y)
        .map_err(|e| plot_err(e, path))?;
    chart
        .configure_mesh()
        .x_desc(x_label)
        .y_desc(y_label)
        .draw()
        .map_err(|e| plot_err(e, path))?;
    for (k, s) in series.iter().enumerate() {
        let color = Palette99::pick(k).to_rgba();
        chart
            .draw_series(LineSeries::new(s.points.iter().copied(), color.stroke_width(2)))
            .map_err(|e| plot_err(e, path))?
            .label(s.name.clone())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color));
        chart
            .draw_series(s.points.iter().map(|&p| Circle::new(p, 3, color.filled())))
            .map_err(|e| plot_err(e, path))?;
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(|e| plot_err(e, path))?;
    root.present().map_err(|e| plot_err(e, path))
}

fn write_csv(path: &Path, x_name: &str, y_name: &str, series: &[Series]) -> Result<()> {
    let mut text = format!("series,{x_name},{y_name}\n");
    for s in series {
        for (x, y) in &s.points {
            text.push_str(&format!("{},{x},{y}\n", s.name));
        }
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn emit(dir: &Path, stem: &str, title: &str, x: &str, y: &str, series: &[Series]) -> Result<Vec<PathBuf>> {
    if series.iter().all(|s| s.points.is_empty()) {
        return Err(Error::invalid("nothing to plot"));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let svg = dir.join(format!("{stem}.svg"));
    let csv = dir.join(format!("{stem}.csv"));
    line_plot(&svg, title, x, y, series)?;
    write_csv(&csv, x, y, series)?;
    Ok(vec![svg, csv])
}

/// Per-horizon RMSE before and after adaptation, as SVG plus CSV.
pub fn emit_report_plots(report: &MetricReport, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let series = [
        ("adapted", &report.cells),
        ("unadapted", &report.pre_adaptation_cells),
    ]
    .into_iter()
    .map(|(name, cells)| Series {
        name: name.to_string(),
        points: cells.iter().map(|c| (c.horizon as f64, c.rmse)).collect(),
    })
    .collect::<Vec<_>>();
    let title = format!("{} {} RMSE per horizon step", report.city, report.dynamics);
    emit(out_dir, "horizon_rmse", &title, "horizon", "rmse", &series)
}

/// RMSE against the swept value, as SVG plus CSV.
pub fn emit_sweep_plot(table: &SweepTable, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let series = [Series {
        name: "rmse".to_string(),
        points: table.rows.iter().map(|r| (r.value, r.rmse)).collect(),
    }];
    let stem = format!("sweep_{}", table.axis);
    emit(out_dir, &stem, &format!("RMSE over {}", table.axis), table.axis.name(), "rmse", &series)
}

/// Writes a report as `metrics.json` in `dir`.
pub fn write_report(report: &MetricReport, dir: &Path) -> Result<()> {
    write_json(&dir.join(METRICS_FILE), report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn metric_examples() {
        let z = array![0.0, 0.0, 0.0, 0.0];
        assert_eq!(mae_metric(z.view(), z.view()).unwrap(), 0.0);
        assert_eq!(rmse_metric(z.view(), z.view()).unwrap(), 0.0);
        let alt = array![1.0, -1.0, 1.0, -1.0];
        assert_eq!(mae_metric(alt.view(), z.view()).unwrap(), 1.0);
        assert_eq!(rmse_metric(alt.view(), z.view()).unwrap(), 1.0);
        let one = array![0.0, 0.0, 0.0, 2.0];
        assert_eq!(mae_metric(one.view(), z.view()).unwrap(), 0.5);
        assert_eq!(rmse_metric(one.view(), z.view()).unwrap(), 1.0);
    }

    #[test]
    fn metric_shape_mismatch() {
        let a = array![[1.0, 2.0]];
        let b = array![[1.0], [2.0]];
        assert!(mae_metric(a.view(), b.view()).is_err());
        assert!(rmse_metric(a.view(), b.view()).is_err());
    }

    fn ctx() -> ReportContext {
        ReportContext {
            config_fingerprint: "f".into(),
            mode: SplitMode::ZeroShot,
            city: "c".into(),
            dynamics: "speed".into(),
            test_regions: vec![],
            disjoint_regions: true,
            ablations: vec![],
        }
    }

    #[test]
    fn report_cells_follow_horizons() {
        let truth = Mat::zeros((3, 8));
        let pred = Mat::from_shape_fn((3, 8), |(i, j)| if j / 2 == 3 { 1.0 } else { (i as f64 - 1.0) * 0.1 });
        let r = build_report(ctx(), &pred, &truth, &truth, 4).unwrap();
        assert_eq!(r.cells.len(), 4);
        assert!((r.cells[3].mae - 1.0).abs() < 1e-12);
        assert!(r.cells.iter().all(|c| c.rmse >= c.mae && c.mae >= 0.0));
        assert_eq!(r.pre_adaptation_mae, 0.0);
        assert!(build_report(ctx(), &pred, &truth, &truth, 3).is_err());
    }

    #[test]
    fn plots_have_csv_twins() {
        let dir = tempfile::tempdir().unwrap();
        let truth = Mat::zeros((2, 4));
        let pred = Mat::from_elem((2, 4), 0.5);
        let r = build_report(ctx(), &pred, &truth, &truth, 4).unwrap();
        let files = emit_report_plots(&r, dir.path()).unwrap();
        assert!(files[0].exists());
        let csv = fs::read_to_string(&files[1]).unwrap();
        assert_eq!(csv.lines().count() - 1, 8);
        let table = SweepTable {
            axis: SweepAxis::PT,
            seeds: BTreeMap::new(),
            rows: [0.15, 0.25, 0.33]
                .iter()
                .map(|&v| SweepRow {
                    value: v,
                    mae: v,
                    rmse: v + 0.1,
                    config_fingerprint: String::new(),
                })
                .collect(),
        };
        let files = emit_sweep_plot(&table, dir.path()).unwrap();
        assert!(files[0].file_name().unwrap().to_str().unwrap().starts_with("sweep_p_t"));
        assert_eq!(fs::read_to_string(&files[1]).unwrap().lines().count(), 4);
    }

    #[test]
    fn sweep_axis_domains() {
        let base = Config::desk_small();
        assert!(SweepAxis::PT.apply(&base, 1.2).is_err());
        assert!(SweepAxis::TrainableLayers.apply(&base, 1.5).is_err());
        assert!(SweepAxis::TrainableLayers.apply(&base, base.backbone.layers as f64 + 1.0).is_err());
        let c = SweepAxis::TrainableLayers.apply(&base, 0.0).unwrap();
        assert_eq!(c.backbone.l_frozen, c.backbone.layers);
        assert_eq!("n_channels".parse::<SweepAxis>().unwrap(), SweepAxis::NChannels);
        assert!("bogus".parse::<SweepAxis>().is_err());
    }
}
