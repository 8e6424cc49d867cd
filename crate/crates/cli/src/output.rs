use std::fs;
use std::path::{Path, PathBuf};

use plotters::prelude::*;

use crate::CliError;

pub struct Series {
    pub name: String,
    pub points: Vec<(u64, f64)>,
}

impl Series {
    pub fn new(name: &str, points: Vec<(u64, f64)>) -> Self {
        Series {
            name: name.to_string(),
            points,
        }
    }

    /// Horizontal reference line across `[0, until]`.
    pub fn flat(name: &str, value: f64, until: u64) -> Self {
        Series::new(name, vec![(0, value), (until, value)])
    }
}

struct PlotSpec {
    name: String,
    title: String,
    series: Vec<Series>,
}

/// Files an experiment produces, held in memory until written.
#[derive(Default)]
pub struct Artifacts {
    files: Vec<(String, Vec<u8>)>,
    plots: Vec<PlotSpec>,
}

impl Artifacts {
    pub fn file(&mut self, name: String, bytes: Vec<u8>) {
        self.files.push((name, bytes));
    }

    pub fn plot(&mut self, name: String, title: String, series: Vec<Series>) {
        self.plots.push(PlotSpec { name, title, series });
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.files.iter().map(|f| f.0.as_str()).chain(self.plots.iter().map(|p| p.name.as_str()))
    }

    /// Renders plots, stages everything next to `out`, then moves the files
    /// in. Fails before writing anything into `out` if it is unusable.
    pub fn write(self, out: &Path) -> Result<Vec<PathBuf>, CliError> {
        let io = |what: &Path, e: std::io::Error| CliError::Output(format!("{}: {e}", what.display()));
        let mut files = self.files;
        for p in self.plots {
            files.push((p.name, render_svg(&p.title, &p.series)?.into_bytes()));
        }
        fs::create_dir_all(out).map_err(|e| io(out, e))?;
        let staging = out.join(format!(".qshape-staging-{}", std::process::id()));
        let staged = (|| {
            fs::create_dir_all(&staging).map_err(|e| io(&staging, e))?;
            for (name, bytes) in &files {
                let path = staging.join(name);
                fs::write(&path, bytes).map_err(|e| io(&path, e))?;
            }
            Ok::<_, CliError>(())
        })();
        if let Err(e) = staged {
            let _ = fs::remove_dir_all(&staging);
            return Err(e);
        }
        let mut written = Vec::with_capacity(files.len());
        for (name, _) in &files {
            let dest = out.join(name);
            fs::rename(staging.join(name), &dest).map_err(|e| io(&dest, e))?;
            written.push(dest);
        }
        fs::remove_dir_all(&staging).map_err(|e| io(&staging, e))?;
        Ok(written)
    }
}

pub fn csv_bytes<R, I>(header: &[&str], rows: R) -> Result<Vec<u8>, CliError>
where
    R: IntoIterator<Item = I>,
    I: IntoIterator<Item = String>,
{
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| CliError::Output(e.to_string());
    w.write_record(header).map_err(err)?;
    for row in rows {
        w.write_record(row.into_iter()).map_err(err)?;
    }
    w.into_inner().map_err(|e| CliError::Output(e.to_string()))
}

pub fn render_svg(title: &str, series: &[Series]) -> Result<String, CliError> {
    let err = |e: String| CliError::Output(format!("plot '{title}': {e}"));
    let pts = series.iter().flat_map(|s| s.points.iter());
    let x_max = pts.clone().map(|p| p.0).max().unwrap_or(1).max(1);
    let (mut y_min, mut y_max) = pts.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p.1), hi.max(p.1)));
    if !y_min.is_finite() {
        (y_min, y_max) = (0.0, 1.0);
    }
    let pad = ((y_max - y_min) * 0.05).max(1e-3);
    let mut svg = String::new();
    {
        let root = SVGBackend::with_string(&mut svg, (900, 500)).into_drawing_area();
        root.fill(&WHITE).map_err(|e| err(e.to_string()))?;
        let mut chart = ChartBuilder::on(&root)
            .caption(title, ("sans-serif", 20))
            .margin(12)
            .x_label_area_size(40)
            .y_label_area_size(60)
            .build_cartesian_2d(0u64..x_max, (y_min - pad)..(y_max + pad))
            .map_err(|e| err(e.to_string()))?;
        chart
            .configure_mesh()
            .x_desc("environment steps")
            .y_desc("greedy evaluation return")
            .draw()
            .map_err(|e| err(e.to_string()))?;
        for (i, s) in series.iter().enumerate() {
            let color = Palette99::pick(i).to_rgba();
            chart
                .draw_series(LineSeries::new(s.points.iter().copied(), color.stroke_width(2)))
                .map_err(|e| err(e.to_string()))?
                .label(s.name.clone())
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], color.stroke_width(2)));
        }
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .draw()
            .map_err(|e| err(e.to_string()))?;
        root.present().map_err(|e| err(e.to_string()))?;
    }
    Ok(svg)
}
