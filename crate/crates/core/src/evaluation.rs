//! Compression metrics, rate-distortion tables and Bjøntegaard deltas.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::codec::{decode, encode, EncodeOptions};
use crate::error::{Error, Result};
use crate::geometry::{chamfer_distance, d1_psnr, normalize, PointCloud};
use crate::model::CodecModel;

/// Bits per point of a whole container, header included.
pub fn compute_bpp(container: &[u8], points: usize) -> Result<f64> {
    if points == 0 {
        return Err(Error::invalid("bits per point needs at least one point"));
    }
    Ok(8.0 * container.len() as f64 / points as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RdPoint {
    pub bpp: f64,
    pub psnr: f64,
}

/// Least-squares cubic in a standardized variable, so fits over PSNR
/// values stay well conditioned.
struct Cubic {
    coef: [f64; 4],
    mean: f64,
    scale: f64,
}

impl Cubic {
    fn fit(x: &[f64], y: &[f64]) -> Result<Self> {
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let scale = if var > 0.0 { var.sqrt() } else { 1.0 };
        let a = DMatrix::from_fn(x.len(), 4, |i, j| ((x[i] - mean) / scale).powi(j as i32));
        let b = DVector::from_column_slice(y);
        let sol = a
            .svd(true, true)
            .solve(&b, 1e-12)
            .map_err(|e| Error::invalid(format!("curve fit failed: {e}")))?;
        Ok(Self {
            coef: [sol[0], sol[1], sol[2], sol[3]],
            mean,
            scale,
        })
    }

    /// Definite integral over `[lo, hi]` in the original variable.
    fn integral(&self, lo: f64, hi: f64) -> f64 {
        let anti = |x: f64| {
            let u = (x - self.mean) / self.scale;
            self.coef
                .iter()
                .enumerate()
                .map(|(k, c)| c * u.powi(k as i32 + 1) / (k as f64 + 1.0))
                .sum::<f64>()
                * self.scale
        };
        anti(hi) - anti(lo)
    }
}

fn sorted_curve(curve: &[RdPoint], which: &str) -> Result<(Vec<f64>, Vec<f64>)> {
    if curve.len() < 4 {
        return Err(Error::invalid(format!(
            "curve {which} has {} points, at least 4 are needed",
            curve.len()
        )));
    }
    if curve.iter().any(|p| !(p.bpp > 0.0) || !p.psnr.is_finite()) {
        return Err(Error::invalid(format!("curve {which} has a non-positive rate or non-finite PSNR")));
    }
    let mut pts = curve.to_vec();
    pts.sort_by(|a, b| a.bpp.total_cmp(&b.bpp));
    Ok((pts.iter().map(|p| p.bpp.log10()).collect(), pts.iter().map(|p| p.psnr).collect()))
}

fn overlap(a: &[f64], b: &[f64]) -> Result<(f64, f64)> {
    let min = |v: &[f64]| v.iter().copied().fold(f64::INFINITY, f64::min);
    let max = |v: &[f64]| v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lo = min(a).max(min(b));
    let hi = max(a).min(max(b));
    if !(hi > lo) {
        return Err(Error::invalid("rate-distortion curves do not overlap"));
    }
    Ok((lo, hi))
}

/// Mean PSNR gain of `b` over anchor `a` across their common rate range.
pub fn bd_psnr(a: &[RdPoint], b: &[RdPoint]) -> Result<f64> {
    let (ra, pa) = sorted_curve(a, "A")?;
    let (rb, pb) = sorted_curve(b, "B")?;
    let (lo, hi) = overlap(&ra, &rb)?;
    let fa = Cubic::fit(&ra, &pa)?;
    let fb = Cubic::fit(&rb, &pb)?;
    Ok((fb.integral(lo, hi) - fa.integral(lo, hi)) / (hi - lo))
}

/// Mean rate change of `b` against anchor `a` at equal PSNR, in percent.
pub fn bd_rate(a: &[RdPoint], b: &[RdPoint]) -> Result<f64> {
    let (ra, pa) = sorted_curve(a, "A")?;
    let (rb, pb) = sorted_curve(b, "B")?;
    let (lo, hi) = overlap(&pa, &pb)?;
    let fa = Cubic::fit(&pa, &ra)?;
    let fb = Cubic::fit(&pb, &rb)?;
    let mean_gap = (fb.integral(lo, hi) - fa.integral(lo, hi)) / (hi - lo);
    Ok(100.0 * (10f64.powf(mean_gap) - 1.0))
}

/// One row of the RD report.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RdRow {
    pub lambda: f64,
    pub bpp: f64,
    pub psnr_d1: f64,
    pub chamfer: f64,
}

impl RdRow {
    pub fn point(&self) -> RdPoint {
        RdPoint {
            bpp: self.bpp,
            psnr: self.psnr_d1,
        }
    }
}

/// Per-cloud measurements behind a report row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CloudRecord {
    pub lambda: f64,
    pub index: usize,
    pub points: usize,
    pub bytes: usize,
    pub bpp: f64,
    pub psnr_d1: f64,
    pub chamfer: f64,
}

#[derive(Debug, Clone, Default)]
pub struct RdReport {
    pub rows: Vec<RdRow>,
    pub clouds: Vec<CloudRecord>,
}

pub struct EvalOptions {
    /// Header seed used for every container.
    pub seed: u64,
    pub peak: f64,
    /// Measure distortion in original instead of normalized coordinates.
    pub original_space: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            peak: 1.0,
            original_space: false,
        }
    }
}

/// Encodes and decodes every cloud with the given model.
pub fn evaluate_model(
    lambda: f64,
    model: &CodecModel,
    dataset: &[PointCloud],
    opts: &EvalOptions,
) -> Result<(RdRow, Vec<CloudRecord>)> {
    if dataset.is_empty() {
        return Err(Error::invalid("evaluation dataset is empty"));
    }
    let enc_opts = EncodeOptions {
        seed: opts.seed,
        label: None,
    };
    let mut records = Vec::with_capacity(dataset.len());
    for (index, cloud) in dataset.iter().enumerate() {
        let encoded = encode(model, cloud, &enc_opts)?;
        let decoded = decode(model, &encoded.bytes)?;
        let (reference, output) = if opts.original_space {
            (cloud.clone(), decoded.cloud)
        } else {
            (normalize(cloud)?.0, decoded.normalized)
        };
        records.push(CloudRecord {
            lambda,
            index,
            points: cloud.len(),
            bytes: encoded.bytes.len(),
            bpp: encoded.bpp(),
            psnr_d1: d1_psnr(&reference, &output, opts.peak)?,
            chamfer: chamfer_distance(&reference, &output)?,
        });
    }
    let k = records.len() as f64;
    let row = RdRow {
        lambda,
        bpp: records.iter().map(|r| r.bpp).sum::<f64>() / k,
        psnr_d1: records.iter().map(|r| r.psnr_d1).sum::<f64>() / k,
        chamfer: records.iter().map(|r| r.chamfer).sum::<f64>() / k,
    };
    Ok((row, records))
}

/// One row per `(lambda, model)` pair, in the given order.
pub fn evaluate_codec(
    models: &[(f64, &CodecModel)],
    dataset: &[PointCloud],
    opts: &EvalOptions,
) -> Result<RdReport> {
    let mut report = RdReport::default();
    for &(lambda, model) in models {
        let (row, clouds) = evaluate_model(lambda, model, dataset, opts)?;
        report.rows.push(row);
        report.clouds.extend(clouds);
    }
    Ok(report)
}

pub fn write_rd_csv(rows: &[RdRow], out: impl std::io::Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row).map_err(|e| csv_error(e, Path::new("<csv>")))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_rd_csv(input: impl std::io::Read) -> Result<Vec<RdRow>> {
    read_rd_csv_from(input, Path::new("<csv>"))
}

fn read_rd_csv_from(input: impl std::io::Read, origin: &Path) -> Result<Vec<RdRow>> {
    let mut r = csv::Reader::from_reader(input);
    r.deserialize()
        .map(|row| row.map_err(|e| csv_error(e, origin)))
        .collect()
}

pub fn save_rd_csv(rows: &[RdRow], path: &Path) -> Result<()> {
    write_rd_csv(rows, std::fs::File::create(path)?)
}

pub fn load_rd_csv(path: &Path) -> Result<Vec<RdRow>> {
    read_rd_csv_from(std::fs::File::open(path)?, path)
}

fn csv_error(e: csv::Error, origin: &Path) -> Error {
    let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
    Error::Parse {
        path: origin.to_path_buf(),
        line,
        msg: e.to_string(),
    }
}

/// Rate-distortion plot (bpp against D1 PSNR) as a standalone SVG.
pub fn rd_plot_svg(series: &[(&str, &[RdPoint])]) -> String {
    const W: f64 = 640.0;
    const H: f64 = 420.0;
    const M: f64 = 60.0;
    const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];
    let all: Vec<&RdPoint> = series.iter().flat_map(|(_, pts)| pts.iter()).collect();
    let range = |f: fn(&RdPoint) -> f64| {
        let lo = all.iter().map(|p| f(p)).fold(f64::INFINITY, f64::min);
        let hi = all.iter().map(|p| f(p)).fold(f64::NEG_INFINITY, f64::max);
        if !lo.is_finite() {
            (0.0, 1.0)
        } else if hi - lo < 1e-12 {
            (lo - 0.5, hi + 0.5)
        } else {
            let pad = 0.05 * (hi - lo);
            (lo - pad, hi + pad)
        }
    };
    let (x0, x1) = range(|p| p.bpp);
    let (y0, y1) = range(|p| p.psnr);
    let sx = |x: f64| M + (x - x0) / (x1 - x0) * (W - 2.0 * M);
    let sy = |y: f64| H - M - (y - y0) / (y1 - y0) * (H - 2.0 * M);

    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" font-family=\"sans-serif\" font-size=\"12\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <line x1=\"{M}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n\
         <line x1=\"{M}\" y1=\"{M}\" x2=\"{M}\" y2=\"{b}\" stroke=\"black\"/>\n\
         <text x=\"{cx}\" y=\"{xl}\" text-anchor=\"middle\">bpp</text>\n\
         <text x=\"16\" y=\"{cy}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {cy})\">D1 PSNR (dB)</text>\n",
        b = H - M,
        r = W - M,
        cx = W / 2.0,
        xl = H - 15.0,
        cy = H / 2.0,
    );
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let (xv, yv) = (x0 + f * (x1 - x0), y0 + f * (y1 - y0));
        svg += &format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{xv:.3}</text>\n\
             <text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{yv:.2}</text>\n",
            sx(xv),
            H - M + 16.0,
            M - 6.0,
            sy(yv) + 4.0
        );
    }
    for (k, (name, pts)) in series.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let mut sorted = pts.to_vec();
        sorted.sort_by(|a, b| a.bpp.total_cmp(&b.bpp));
        let path: Vec<String> = sorted
            .iter()
            .map(|p| format!("{:.2},{:.2}", sx(p.bpp), sy(p.psnr)))
            .collect();
        svg += &format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>\n",
            path.join(" ")
        );
        for p in &sorted {
            svg += &format!(
                "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"{color}\"/>\n",
                sx(p.bpp),
                sy(p.psnr)
            );
        }
        svg += &format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" fill=\"{color}\">{}</text>\n",
            W - M - 120.0,
            M + 16.0 * (k as f64 + 1.0),
            xml_escape(name)
        );
    }
    svg += "</svg>\n";
    svg
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
