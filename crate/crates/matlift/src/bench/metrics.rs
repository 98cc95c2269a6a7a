//! Image quality metrics and the evaluation table format.

use crate::error::{Error, Result};
use crate::img::ImageBuf;
use crate::real::Real;

/// Peak signal-to-noise ratio in decibels; returns `f64::INFINITY` when the
/// images match exactly (the distinguished sentinel for zero MSE).
pub fn psnr<R: Real>(a: &ImageBuf<R>, b: &ImageBuf<R>, peak: f64) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::validation("psnr shape mismatch"));
    }
    let mut sum = 0.0f64;
    for (x, y) in a.data.iter().zip(&b.data) {
        let d = x.as_f64() - y.as_f64();
        sum += d * d;
    }
    let mse = sum / a.data.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

/// Mean that skips infinite entries; returns the mean and how many were
/// excluded. An all-infinite list reports infinity.
pub fn mean_excluding_infinite(values: &[f64]) -> (f64, usize) {
    let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    let excluded = values.len() - finite.len();
    if finite.is_empty() {
        (f64::INFINITY, excluded)
    } else {
        (finite.iter().sum::<f64>() / finite.len() as f64, excluded)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub task: String,
    pub psnr: f64,
    pub ssim: f64,
    /// How many per-view PSNR values hit the infinite sentinel and were
    /// left out of the average.
    pub infinite_count: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricTable {
    pub rows: Vec<MetricRow>,
}

fn fmt_psnr(v: f64) -> String {
    if v.is_infinite() {
        "inf".to_string()
    } else {
        format!("{v:.3}")
    }
}

impl MetricTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("task,psnr,ssim,infinite_count\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{:.4},{}\n",
                r.task,
                fmt_psnr(r.psnr),
                r.ssim,
                r.infinite_count
            ));
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("{:<12} {:>9} {:>7}\n", "task", "PSNR", "SSIM"));
        for r in &self.rows {
            let star = if r.infinite_count > 0 { "*" } else { " " };
            out.push_str(&format!(
                "{:<12} {:>9}{} {:>7.4}\n",
                r.task,
                fmt_psnr(r.psnr),
                star,
                r.ssim
            ));
        }
        if self.rows.iter().any(|r| r.infinite_count > 0) {
            out.push_str("* some views matched exactly (infinite PSNR) and were excluded\n");
        }
        out
    }

    pub fn row(&self, task: &str) -> Option<&MetricRow> {
        self.rows.iter().find(|r| r.task == task)
    }
}
