//! End-point error, Fl-all, magnitude buckets and pixel-threshold fractions.
//!
//! Everything is accumulated in `f64` over the pixels the ground truth marks
//! valid.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::types::{debug_validate, FlowField};

/// Outlier rule of Fl-all: EPE above this many pixels...
pub const FL_ABS_THRESHOLD: f64 = 3.0;
/// ...and above this fraction of the ground-truth magnitude.
pub const FL_REL_THRESHOLD: f64 = 0.05;

fn check(pred: &FlowField, gt: &FlowField) -> Result<()> {
    debug_validate(pred)?;
    debug_validate(gt)?;
    if !pred.same_size(gt) {
        return Err(Error::ShapeMismatch(format!(
            "prediction is {}x{}, ground truth is {}x{}",
            pred.height(),
            pred.width(),
            gt.height(),
            gt.width()
        )));
    }
    Ok(())
}

/// `(epe, |gt|)` for every valid pixel.
fn valid_pairs<'a>(pred: &'a FlowField, gt: &'a FlowField) -> impl Iterator<Item = (f64, f64)> + 'a {
    let mask = gt.valid();
    pred.uv()
        .chunks_exact(2)
        .zip(gt.uv().chunks_exact(2))
        .enumerate()
        .filter(move |(i, _)| mask.is_none_or(|m| m[*i]))
        .map(|(_, (p, g))| {
            let (du, dv) = (p[0] as f64 - g[0] as f64, p[1] as f64 - g[1] as f64);
            (du.hypot(dv), (g[0] as f64).hypot(g[1] as f64))
        })
}

/// Per-pixel Euclidean error `[H * W]`, row-major; NaN where the ground truth is invalid.
pub fn epe_map(pred: &FlowField, gt: &FlowField) -> Result<Vec<f64>> {
    check(pred, gt)?;
    let mask = gt.valid();
    Ok(pred
        .uv()
        .chunks_exact(2)
        .zip(gt.uv().chunks_exact(2))
        .enumerate()
        .map(|(i, (p, g))| {
            if mask.is_some_and(|m| !m[i]) {
                f64::NAN
            } else {
                (p[0] as f64 - g[0] as f64).hypot(p[1] as f64 - g[1] as f64)
            }
        })
        .collect())
}

/// Mean EPE over valid pixels.
pub fn epe(pred: &FlowField, gt: &FlowField) -> Result<f64> {
    check(pred, gt)?;
    let (mut s, mut n) = (0.0, 0usize);
    for (e, _) in valid_pairs(pred, gt) {
        s += e;
        n += 1;
    }
    if n == 0 {
        return Err(Error::EmptyValidSet);
    }
    Ok(s / n as f64)
}

fn is_outlier(epe: f64, mag: f64) -> bool {
    epe > FL_ABS_THRESHOLD && epe > FL_REL_THRESHOLD * mag
}

/// Percentage of valid pixels with EPE > 3 px and EPE / |gt| > 0.05.
pub fn fl_all(pred: &FlowField, gt: &FlowField) -> Result<f64> {
    check(pred, gt)?;
    let (mut out, mut n) = (0usize, 0usize);
    for (e, m) in valid_pairs(pred, gt) {
        n += 1;
        out += usize::from(is_outlier(e, m));
    }
    if n == 0 {
        return Err(Error::EmptyValidSet);
    }
    Ok(100.0 * out as f64 / n as f64)
}

/// Mean EPE for ground-truth magnitudes in `[0, 10)`, `[10, 40)` and `[40, inf)`;
/// `None` for an empty bucket.
pub fn bucketed_epe(pred: &FlowField, gt: &FlowField) -> Result<(Option<f64>, Option<f64>, Option<f64>)> {
    check(pred, gt)?;
    let mut acc = [(0.0, 0usize); 3];
    for (e, m) in valid_pairs(pred, gt) {
        let b = if m < 10.0 {
            0
        } else if m < 40.0 {
            1
        } else {
            2
        };
        acc[b].0 += e;
        acc[b].1 += 1;
    }
    let mean = |(s, n): (f64, usize)| (n > 0).then(|| s / n as f64);
    Ok((mean(acc[0]), mean(acc[1]), mean(acc[2])))
}

/// Fractions of valid pixels with EPE above 1, 3 and 5 px.
pub fn px_fractions(pred: &FlowField, gt: &FlowField) -> Result<(f64, f64, f64)> {
    check(pred, gt)?;
    let (mut c, mut n) = ([0usize; 3], 0usize);
    for (e, _) in valid_pairs(pred, gt) {
        n += 1;
        for (k, t) in [1.0, 3.0, 5.0].into_iter().enumerate() {
            c[k] += usize::from(e > t);
        }
    }
    if n == 0 {
        return Err(Error::EmptyValidSet);
    }
    let f = |k: usize| c[k] as f64 / n as f64;
    Ok((f(0), f(1), f(2)))
}

/// Aggregate metrics of one prediction, or the mean over many.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub epe: f64,
    /// Percent.
    pub fl_all: f64,
    pub s0_10: Option<f64>,
    pub s10_40: Option<f64>,
    pub s40plus: Option<f64>,
    pub frac_1px: f64,
    pub frac_3px: f64,
    pub frac_5px: f64,
    pub n_valid: usize,
}

impl MetricReport {
    pub fn compute(pred: &FlowField, gt: &FlowField) -> Result<Self> {
        let (s0_10, s10_40, s40plus) = bucketed_epe(pred, gt)?;
        let (frac_1px, frac_3px, frac_5px) = px_fractions(pred, gt)?;
        Ok(Self {
            epe: epe(pred, gt)?,
            fl_all: fl_all(pred, gt)?,
            s0_10,
            s10_40,
            s40plus,
            frac_1px,
            frac_3px,
            frac_5px,
            n_valid: valid_pairs(pred, gt).count(),
        })
    }

    /// Unweighted mean of per-record reports. Bucket means average over the
    /// reports where the bucket is present; `n_valid` is summed.
    pub fn mean(reports: &[MetricReport]) -> Result<Self> {
        if reports.is_empty() {
            return Err(Error::EmptyValidSet);
        }
        let n = reports.len() as f64;
        let avg = |f: &dyn Fn(&MetricReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        let avg_opt = |f: &dyn Fn(&MetricReport) -> Option<f64>| {
            let v: Vec<f64> = reports.iter().filter_map(f).collect();
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        };
        Ok(Self {
            epe: avg(&|r| r.epe),
            fl_all: avg(&|r| r.fl_all),
            s0_10: avg_opt(&|r| r.s0_10),
            s10_40: avg_opt(&|r| r.s10_40),
            s40plus: avg_opt(&|r| r.s40plus),
            frac_1px: avg(&|r| r.frac_1px),
            frac_3px: avg(&|r| r.frac_3px),
            frac_5px: avg(&|r| r.frac_5px),
            n_valid: reports.iter().map(|r| r.n_valid).sum(),
        })
    }

    pub fn check_invariants(&self) -> Result<()> {
        if !(self.epe >= 0.0) {
            return Err(Error::invariant("epe >= 0", None));
        }
        if !(0.0..=100.0).contains(&self.fl_all) {
            return Err(Error::invariant("0 <= fl_all <= 100", None));
        }
        if !(self.frac_1px >= self.frac_3px && self.frac_3px >= self.frac_5px) {
            return Err(Error::invariant("frac_1px >= frac_3px >= frac_5px", None));
        }
        Ok(())
    }
}

/// One `key = value` line per field; empty buckets are written as `none`.
impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let opt = |v: Option<f64>| v.map_or_else(|| "none".to_string(), |x| format!("{x:?}"));
        writeln!(f, "epe = {:?}", self.epe)?;
        writeln!(f, "fl_all = {:?}", self.fl_all)?;
        writeln!(f, "s0_10 = {}", opt(self.s0_10))?;
        writeln!(f, "s10_40 = {}", opt(self.s10_40))?;
        writeln!(f, "s40plus = {}", opt(self.s40plus))?;
        writeln!(f, "frac_1px = {:?}", self.frac_1px)?;
        writeln!(f, "frac_3px = {:?}", self.frac_3px)?;
        writeln!(f, "frac_5px = {:?}", self.frac_5px)?;
        writeln!(f, "n_valid = {}", self.n_valid)
    }
}

impl FromStr for MetricReport {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut fields = std::collections::HashMap::new();
        for (i, line) in s.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("report line {}: expected `key = value`", i + 1)))?;
            fields.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get = |k: &str| {
            fields
                .get(k)
                .ok_or_else(|| Error::Format(format!("report is missing `{k}`")))
        };
        let num = |k: &str| -> Result<f64> {
            get(k)?
                .parse()
                .map_err(|_| Error::Format(format!("report field `{k}` is not a number")))
        };
        let opt = |k: &str| -> Result<Option<f64>> {
            match get(k)?.as_str() {
                "none" => Ok(None),
                _ => num(k).map(Some),
            }
        };
        Ok(Self {
            epe: num("epe")?,
            fl_all: num("fl_all")?,
            s0_10: opt("s0_10")?,
            s10_40: opt("s10_40")?,
            s40plus: opt("s40plus")?,
            frac_1px: num("frac_1px")?,
            frac_3px: num("frac_3px")?,
            frac_5px: num("frac_5px")?,
            n_valid: get("n_valid")?
                .parse()
                .map_err(|_| Error::Format("report field `n_valid` is not an integer".into()))?,
        })
    }
}
