use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Symbols of the analytical multiply-accumulate model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MacsConfig {
    pub n_e: usize,
    pub n_d: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub l_e: usize,
    pub l_d: usize,
    pub l_g: usize,
    #[serde(default)]
    pub delta: f64,
}

impl MacsConfig {
    /// The 300M-parameter byte-level Small configuration.
    pub fn small() -> Self {
        Self { n_e: 1024, n_d: 189, d_model: 1472, d_ff: 3584, l_e: 12, l_d: 4, l_g: 3, delta: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [self.n_e, self.n_d, self.d_model, self.d_ff, self.l_e, self.l_d, self.l_g];
        if dims.contains(&0) {
            return Err(Error::Invalid("MAC model sizes must be positive".into()));
        }
        if self.l_g > self.l_e {
            return Err(Error::Invalid(format!("l_G = {} exceeds L_E = {}", self.l_g, self.l_e)));
        }
        if !(0.0..=1.0).contains(&self.delta) {
            return Err(Error::Invalid(format!("delta must be in [0,1], got {}", self.delta)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MacsResult {
    pub encoder: f64,
    pub decoder: f64,
    pub total: f64,
    /// `total(δ) / total(0)`.
    pub reduction: f64,
}

fn encoder_macs(c: &MacsConfig, delta: f64) -> f64 {
    let (n, d, ff) = (c.n_e as f64, c.d_model as f64, c.d_ff as f64);
    let keep = 1.0 - delta;
    let post = (c.l_e - c.l_g) as f64 * keep * (4.0 * n * d * d + 2.0 * n * n * d * keep + n * d * ff);
    let pre = c.l_g as f64 * (4.0 * n * d * d + 2.0 * n * n * d + n * d * ff);
    post + pre
}

fn decoder_macs(c: &MacsConfig, delta: f64) -> f64 {
    let (ne, nd, d, ff) = (c.n_e as f64, c.n_d as f64, c.d_model as f64, c.d_ff as f64);
    let keep = 1.0 - delta;
    c.l_d as f64
        * (4.0 * nd * d * d
            + 2.0 * nd * nd * d
            + nd * d * ff
            + 2.0 * ne * keep * d * d
            + 2.0 * nd * d * d
            + 2.0 * keep * ne * nd * d)
}

pub fn macs_total(cfg: &MacsConfig) -> Result<MacsResult> {
    cfg.validate()?;
    let encoder = encoder_macs(cfg, cfg.delta);
    let decoder = decoder_macs(cfg, cfg.delta);
    let base = encoder_macs(cfg, 0.0) + decoder_macs(cfg, 0.0);
    let total = encoder + decoder;
    Ok(MacsResult { encoder, decoder, total, reduction: total / base })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub delta: f64,
    pub encoder: f64,
    pub decoder: f64,
    pub reduction: f64,
}

pub fn compute_reduction_curve(cfg: &MacsConfig, grid: &[f64]) -> Result<Vec<CurveRow>> {
    grid.iter()
        .map(|&delta| {
            let r = macs_total(&MacsConfig { delta, ..*cfg })?;
            Ok(CurveRow { delta, encoder: r.encoder, decoder: r.decoder, reduction: r.reduction })
        })
        .collect()
}

/// `delta,encoder_macs,decoder_macs,reduction` rows.
pub fn write_curve_csv(path: &Path, rows: &[CurveRow]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "delta,encoder_macs,decoder_macs,reduction")?;
    for r in rows {
        writeln!(f, "{},{},{},{}", r.delta, r.encoder, r.decoder, r.reduction)?;
    }
    Ok(())
}

/// `0, step, 2·step, …` up to and including `max` (within rounding).
pub fn delta_grid(max: f64, step: f64) -> Vec<f64> {
    let n = (max / step + 1e-9).floor() as usize;
    (0..=n).map(|i| (i as f64 * step * 1e12).round() / 1e12).collect()
}
