//! Saliency evaluation metrics following the MIT saliency benchmark definitions.
//!
//! Maps are single-channel tensors (`1×1×H×W`); values are read as f64.

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Added inside logarithms for KL divergence and information gain.
pub const METRIC_EPS: f64 = 1e-12;

/// Fixation coordinates on a map of known size.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FixationSet {
    pub height: usize,
    pub width: usize,
    pub points: Vec<(usize, usize)>,
}

impl FixationSet {
    /// Fails with a validation error listing the offending positions (1-based).
    pub fn new(height: usize, width: usize, points: Vec<(usize, usize)>) -> Result<Self> {
        let bad: Vec<usize> = points
            .iter()
            .enumerate()
            .filter(|(_, &(r, c))| r >= height || c >= width)
            .map(|(i, _)| i + 1)
            .collect();
        if !bad.is_empty() {
            return Err(Error::Validation {
                lines: bad,
                message: format!("fixation outside {height}x{width} map"),
            });
        }
        Ok(Self { height, width, points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Binary map with ones at fixated pixels.
    pub fn to_map(&self) -> Tensor<f64> {
        let mut m = Tensor::zeros(crate::Shape::new(1, 1, self.height, self.width));
        for &(r, c) in &self.points {
            m.set(0, 0, r, c, 1.0);
        }
        m
    }
}

fn values<T: Element>(map: &Tensor<T>) -> Vec<f64> {
    map.data().iter().map(|v| v.f64()).collect()
}

fn check_fixations<T: Element>(map: &Tensor<T>, fix: &FixationSet, what: &str) -> Result<()> {
    if fix.is_empty() {
        return Err(Error::contract(format!("{what}: empty fixation set")));
    }
    let s = map.shape();
    if s.n * s.c != 1 || s.h != fix.height || s.w != fix.width {
        return Err(Error::contract(format!(
            "{what}: map {s} does not match {}x{} fixation grid",
            fix.height, fix.width
        )));
    }
    Ok(())
}

fn check_pair<T: Element>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::contract(format!("{what}: shapes {} and {} differ", a.shape(), b.shape())));
    }
    Ok(())
}

/// ROC area with thresholds at each distinct positive value, by trapezoids.
///
/// The curve runs from (0, 0) through one point per threshold to (1, 1).
pub fn roc_area(positives: &[f64], negatives: &[f64]) -> f64 {
    let mut pos = positives.to_vec();
    let mut neg = negatives.to_vec();
    pos.sort_by(|a, b| b.total_cmp(a));
    neg.sort_by(|a, b| b.total_cmp(a));
    let (np, nn) = (pos.len() as f64, neg.len().max(1) as f64);
    let (mut area, mut last_tp, mut last_fp) = (0.0, 0.0, 0.0);
    let (mut i, mut j) = (0, 0);
    while i < pos.len() {
        let th = pos[i];
        while i < pos.len() && pos[i] >= th {
            i += 1;
        }
        while j < neg.len() && neg[j] >= th {
            j += 1;
        }
        let (tp, fp) = (i as f64 / np, j as f64 / nn);
        area += (fp - last_fp) * (tp + last_tp) / 2.0;
        last_tp = tp;
        last_fp = fp;
    }
    area + (1.0 - last_fp) * (1.0 + last_tp) / 2.0
}

/// AUC-Judd: positives are prediction values at fixations, negatives every non-fixated pixel.
pub fn auc_judd<T: Element>(pred: &Tensor<T>, fix: &FixationSet) -> Result<f64> {
    check_fixations(pred, fix, "auc_judd")?;
    let v = values(pred);
    let fixated = fix.to_map();
    let positives: Vec<f64> = fix.points.iter().map(|&(r, c)| v[r * fix.width + c]).collect();
    let negatives: Vec<f64> = v
        .iter()
        .zip(fixated.data())
        .filter(|(_, &f)| f == 0.0)
        .map(|(&x, _)| x)
        .collect();
    Ok(roc_area(&positives, &negatives))
}

/// Shuffled AUC: negatives are prediction values at fixations taken from other images.
pub fn sauc<T: Element>(pred: &Tensor<T>, fix: &FixationSet, other: &FixationSet) -> Result<f64> {
    check_fixations(pred, fix, "sauc")?;
    check_fixations(pred, other, "sauc negatives")?;
    let v = values(pred);
    let at = |f: &FixationSet| -> Vec<f64> { f.points.iter().map(|&(r, c)| v[r * f.width + c]).collect() };
    Ok(roc_area(&at(fix), &at(other)))
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len().max(1) as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Standard deviations at rounding level relative to the mean count as zero.
fn flat(mean: f64, std: f64) -> bool {
    std <= 1e-12 * mean.abs().max(1e-300)
}

/// Normalized scanpath saliency with the population standard deviation; constant maps give 0.
pub fn nss<T: Element>(pred: &Tensor<T>, fix: &FixationSet) -> Result<f64> {
    check_fixations(pred, fix, "nss")?;
    let v = values(pred);
    let (mean, std) = mean_std(&v);
    if flat(mean, std) {
        return Ok(0.0);
    }
    let total: f64 = fix.points.iter().map(|&(r, c)| (v[r * fix.width + c] - mean) / std).sum();
    Ok(total / fix.len() as f64)
}

/// Pearson correlation; defined as 0 (with a warning) when either map is constant.
pub fn cc<T: Element>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<f64> {
    check_pair(pred, gt, "cc")?;
    let (a, b) = (values(pred), values(gt));
    let (ma, sa) = mean_std(&a);
    let (mb, sb) = mean_std(&b);
    if flat(ma, sa) || flat(mb, sb) {
        log::warn!("cc: zero-variance input, returning 0");
        return Ok(0.0);
    }
    let cov = a.iter().zip(&b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / a.len() as f64;
    Ok((cov / (sa * sb)).clamp(-1.0, 1.0))
}

fn as_distribution(v: &[f64], what: &str) -> Result<Vec<f64>> {
    if let Some(x) = v.iter().find(|x| !(**x >= 0.0)) {
        return Err(Error::numeric(format!("{what}: negative or NaN value {x}")));
    }
    let sum: f64 = v.iter().sum();
    if sum <= 0.0 {
        return Err(Error::numeric(format!("{what}: map sums to zero")));
    }
    Ok(v.iter().map(|x| x / sum).collect())
}

/// Histogram intersection of the two sum-normalized maps.
pub fn sim<T: Element>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<f64> {
    check_pair(pred, gt, "sim")?;
    let p = as_distribution(&values(pred), "sim prediction")?;
    let q = as_distribution(&values(gt), "sim ground truth")?;
    Ok(p.iter().zip(&q).map(|(a, b)| a.min(*b)).sum())
}

/// `Σ Q ln(Q / (P + ε))` with Q the ground truth; zero-mass pixels of Q contribute nothing.
pub fn kldiv<T: Element>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<f64> {
    check_pair(pred, gt, "kldiv")?;
    let p = as_distribution(&values(pred), "kldiv prediction")?;
    let q = as_distribution(&values(gt), "kldiv ground truth")?;
    Ok(p
        .iter()
        .zip(&q)
        .filter(|(_, &qv)| qv > 0.0)
        .map(|(pv, qv)| qv * (qv / (pv + METRIC_EPS)).ln())
        .sum())
}

/// Mean over fixations of `log2(P + ε) − log2(B + ε)`, both maps sum-normalized.
pub fn info_gain<T: Element>(pred: &Tensor<T>, fix: &FixationSet, baseline: &Tensor<T>) -> Result<f64> {
    check_fixations(pred, fix, "info_gain")?;
    check_pair(pred, baseline, "info_gain")?;
    let p = as_distribution(&values(pred), "info_gain prediction")?;
    let b = as_distribution(&values(baseline), "info_gain baseline")?;
    let total: f64 = fix
        .points
        .iter()
        .map(|&(r, c)| {
            let i = r * fix.width + c;
            (p[i] + METRIC_EPS).log2() - (b[i] + METRIC_EPS).log2()
        })
        .sum();
    Ok(total / fix.len() as f64)
}

/// The seven benchmark columns; absent when their inputs were not supplied.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MetricReport {
    pub auc: Option<f64>,
    pub sauc: Option<f64>,
    pub nss: Option<f64>,
    pub cc: Option<f64>,
    pub kldiv: Option<f64>,
    pub sim: Option<f64>,
    pub ig: Option<f64>,
}

/// Ground truth available for one image.
#[derive(Clone, Copy, Debug, Default)]
pub struct EvalTargets<'a, T = f32> {
    pub fixations: Option<&'a FixationSet>,
    pub density: Option<&'a Tensor<T>>,
    pub shuffled: Option<&'a FixationSet>,
    pub baseline: Option<&'a Tensor<T>>,
}

pub const METRIC_COLUMNS: [&str; 7] = ["auc", "sauc", "nss", "cc", "kldiv", "sim", "ig"];

impl MetricReport {
    /// Every metric whose inputs are present in `t`.
    pub fn compute<T: Element>(pred: &Tensor<T>, t: &EvalTargets<'_, T>) -> Result<Self> {
        let mut r = MetricReport::default();
        if let Some(f) = t.fixations {
            r.auc = Some(auc_judd(pred, f)?);
            r.nss = Some(nss(pred, f)?);
            if let Some(neg) = t.shuffled {
                r.sauc = Some(sauc(pred, f, neg)?);
            }
            if let Some(b) = t.baseline {
                r.ig = Some(info_gain(pred, f, b)?);
            }
        }
        if let Some(d) = t.density {
            r.cc = Some(cc(pred, d)?);
            r.sim = Some(sim(pred, d)?);
            r.kldiv = Some(kldiv(pred, d)?);
        }
        Ok(r)
    }

    pub fn columns(&self) -> [Option<f64>; 7] {
        [self.auc, self.sauc, self.nss, self.cc, self.kldiv, self.sim, self.ig]
    }

    /// Column-wise mean over reports, skipping absent entries.
    pub fn mean(reports: &[MetricReport]) -> MetricReport {
        let col = |i: usize| {
            let v: Vec<f64> = reports.iter().filter_map(|r| r.columns()[i]).collect();
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        };
        MetricReport {
            auc: col(0),
            sauc: col(1),
            nss: col(2),
            cc: col(3),
            kldiv: col(4),
            sim: col(5),
            ig: col(6),
        }
    }

    pub fn csv_header() -> String {
        METRIC_COLUMNS.join(",")
    }

    /// Absent values are written as empty fields.
    pub fn csv_row(&self) -> String {
        self.columns()
            .iter()
            .map(|v| v.map(|x| format!("{x}")).unwrap_or_default())
            .collect::<Vec<_>>()
            .join(",")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Shape;

    fn m(h: usize, w: usize, v: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(Shape::new(1, 1, h, w), v.to_vec()).unwrap()
    }

    #[test]
    fn auc_fixed_points() {
        let fix = FixationSet::new(2, 2, vec![(0, 1), (1, 0)]).unwrap();
        assert_eq!(auc_judd(&fix.to_map(), &fix).unwrap(), 1.0);
        assert_eq!(auc_judd(&m(2, 2, &[0.3; 4]), &fix).unwrap(), 0.5);
    }

    #[test]
    fn nss_hand_case() {
        let fix = FixationSet::new(1, 4, vec![(0, 3)]).unwrap();
        let v = nss(&m(1, 4, &[1.0, 2.0, 3.0, 4.0]), &fix).unwrap();
        assert!((v - 1.5 / 1.25f64.sqrt()).abs() < 1e-12);
        assert_eq!(nss(&m(1, 4, &[2.0; 4]), &fix).unwrap(), 0.0);
    }

    #[test]
    fn kl_hand_case() {
        let v = kldiv(&m(1, 2, &[0.5, 0.5]), &m(1, 2, &[0.75, 0.25])).unwrap();
        assert!((v - (0.75 * 1.5f64.ln() + 0.25 * 0.5f64.ln())).abs() < 1e-9);
    }

    #[test]
    fn empty_and_out_of_range_fixations() {
        let empty = FixationSet::new(2, 2, vec![]).unwrap();
        assert!(matches!(nss(&m(2, 2, &[1.0; 4]), &empty), Err(Error::Contract(_))));
        match FixationSet::new(2, 2, vec![(0, 0), (2, 0), (1, 1), (0, 5)]) {
            Err(Error::Validation { lines, .. }) => assert_eq!(lines, vec![2, 4]),
            other => panic!("{other:?}"),
        }
    }
}
