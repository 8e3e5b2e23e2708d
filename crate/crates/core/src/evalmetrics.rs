//! Confusion-matrix metrics, across-seed aggregation, report writers and the
//! masking-ratio reconstruction sweep.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mat::Scalar;
use crate::net::{BnMode, Network, ParamStore};
use crate::objectives::mae_loss;
use crate::patchseq::{plan_mask, Domain};
use crate::raster::{ImageTensor, LabelMask, IGNORE};
use crate::tensorstore::{write_tensor, DenseTensor};

/// Rows are ground truth, columns predictions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub classes: usize,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn from_counts(classes: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != classes * classes {
            return Err(Error::Shape(format!("{} counts for {classes} classes", counts.len())));
        }
        Ok(ConfusionMatrix { classes, counts })
    }

    pub fn at(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn tp(&self, c: usize) -> u64 {
        self.at(c, c)
    }

    /// Predicted as `c` but something else.
    pub fn fp(&self, c: usize) -> u64 {
        (0..self.classes).map(|t| self.at(t, c)).sum::<u64>() - self.tp(c)
    }

    /// Truly `c` but predicted otherwise.
    pub fn fn_(&self, c: usize) -> u64 {
        (0..self.classes).map(|p| self.at(c, p)).sum::<u64>() - self.tp(c)
    }

    pub fn add(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::InconsistentClasses);
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// Accumulates one prediction map, optionally restricted to `pixels`.
    pub fn accumulate(&mut self, pred: &[i32], truth: &[i32], pixels: Option<&[usize]>) -> Result<()> {
        if pred.len() != truth.len() {
            return Err(Error::Shape(format!("{} predictions for {} labels", pred.len(), truth.len())));
        }
        let mut one = |i: usize| -> Result<()> {
            let t = truth[i];
            if t == IGNORE {
                return Ok(());
            }
            let p = pred[i];
            if t < 0 || p < 0 || t as usize >= self.classes || p as usize >= self.classes {
                return Err(Error::Shape(format!("class id out of range (truth {t}, pred {p})")));
            }
            self.counts[t as usize * self.classes + p as usize] += 1;
            Ok(())
        };
        match pixels {
            Some(ids) => ids.iter().try_for_each(|&i| one(i)),
            None => (0..pred.len()).try_for_each(one),
        }
    }
}

/// Confusion matrix of a `height x width` prediction against `truth`;
/// IGNORE truth pixels are skipped.
pub fn confusion(pred: &[i32], height: usize, width: usize, truth: &LabelMask, classes: usize) -> Result<ConfusionMatrix> {
    if height != truth.height || width != truth.width || pred.len() != height * width {
        return Err(Error::Shape(format!(
            "prediction {height}x{width} vs truth {}x{}",
            truth.height, truth.width
        )));
    }
    let mut cm = ConfusionMatrix::new(classes);
    cm.accumulate(pred, &truth.data, None)?;
    Ok(cm)
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn per_class_f1(cm: &ConfusionMatrix) -> Vec<f64> {
    (0..cm.classes)
        .map(|c| ratio(2 * cm.tp(c), 2 * cm.tp(c) + cm.fp(c) + cm.fn_(c)))
        .collect()
}

pub fn per_class_iou(cm: &ConfusionMatrix) -> Vec<f64> {
    (0..cm.classes)
        .map(|c| ratio(cm.tp(c), cm.tp(c) + cm.fp(c) + cm.fn_(c)))
        .collect()
}

pub fn miou(cm: &ConfusionMatrix) -> f64 {
    mean(&per_class_iou(cm))
}

/// Mean recall over classes that have ground-truth pixels.
pub fn mean_accuracy(cm: &ConfusionMatrix) -> f64 {
    let recalls: Vec<f64> = (0..cm.classes)
        .filter(|&c| cm.tp(c) + cm.fn_(c) > 0)
        .map(|c| ratio(cm.tp(c), cm.tp(c) + cm.fn_(c)))
        .collect();
    mean(&recalls)
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn pop_std(v: &[f64]) -> f64 {
    let m = mean(v);
    mean(&v.iter().map(|x| (x - m) * (x - m)).collect::<Vec<_>>()).sqrt()
}

/// Aggregate metrics; for a single run the std fields are 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_class_f1: Vec<f64>,
    pub ma: f64,
    pub miou: f64,
    pub mf1: f64,
    pub ma_std: f64,
    pub miou_std: f64,
    pub mf1_std: f64,
    pub runs: usize,
}

impl MetricsReport {
    pub fn from_confusion(cm: &ConfusionMatrix) -> Self {
        let f1 = per_class_f1(cm);
        MetricsReport {
            mf1: mean(&f1),
            per_class_f1: f1,
            ma: mean_accuracy(cm),
            miou: miou(cm),
            ma_std: 0.0,
            miou_std: 0.0,
            mf1_std: 0.0,
            runs: 1,
        }
    }
}

/// Mean and population std of the aggregates; per-class F1 averaged.
pub fn aggregate_seeds(reports: &[MetricsReport]) -> Result<MetricsReport> {
    let first = reports.first().ok_or(Error::InconsistentClasses)?;
    let k = first.per_class_f1.len();
    if reports.iter().any(|r| r.per_class_f1.len() != k) {
        return Err(Error::InconsistentClasses);
    }
    let col = |f: fn(&MetricsReport) -> f64| reports.iter().map(f).collect::<Vec<_>>();
    let (ma, mi, mf) = (col(|r| r.ma), col(|r| r.miou), col(|r| r.mf1));
    Ok(MetricsReport {
        per_class_f1: (0..k)
            .map(|c| mean(&reports.iter().map(|r| r.per_class_f1[c]).collect::<Vec<_>>()))
            .collect(),
        ma: mean(&ma),
        miou: mean(&mi),
        mf1: mean(&mf),
        ma_std: pop_std(&ma),
        miou_std: pop_std(&mi),
        mf1_std: pop_std(&mf),
        runs: reports.len(),
    })
}

pub fn write_report_json(path: impl AsRef<Path>, value: &impl Serialize) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Table with one column per configuration: per-class F1 rows, then
/// MA / mIoU / mF1 as `mean ± std`.
pub fn report_csv(columns: &[(String, MetricsReport)], class_names: Option<&[String]>) -> String {
    let mut s = String::from("metric");
    for (name, _) in columns {
        let _ = write!(s, ",{name}");
    }
    s.push('\n');
    let k = columns.first().map_or(0, |c| c.1.per_class_f1.len());
    for c in 0..k {
        match class_names.and_then(|n| n.get(c)) {
            Some(n) => s.push_str(n),
            None => {
                let _ = write!(s, "class_{c}");
            }
        }
        for (_, r) in columns {
            let _ = write!(s, ",{:.4}", r.per_class_f1.get(c).copied().unwrap_or(0.0));
        }
        s.push('\n');
    }
    let rows: [(&str, fn(&MetricsReport) -> (f64, f64)); 3] = [
        ("MA", |r| (r.ma, r.ma_std)),
        ("mIoU", |r| (r.miou, r.miou_std)),
        ("mF1", |r| (r.mf1, r.mf1_std)),
    ];
    for (name, f) in rows {
        s.push_str(name);
        for (_, r) in columns {
            let (m, sd) = f(r);
            let _ = write!(s, ",{m:.4} ± {sd:.4}");
        }
        s.push('\n');
    }
    s
}

pub fn write_report_csv(path: impl AsRef<Path>, columns: &[(String, MetricsReport)]) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, report_csv(columns, None)).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// reconstruction sweep

/// Per-class, per-channel spectral statistics over masked pixels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectralCurve {
    pub class: usize,
    pub pixels: usize,
    pub recon_mean: Vec<f64>,
    pub recon_std: Vec<f64>,
    pub original_mean: Vec<f64>,
    pub original_std: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub ratio: f64,
    /// Mean masked-pixel MSE over the evaluated pairs; `None` when nothing
    /// was masked.
    pub mse: Option<f64>,
    pub masked_pixels: usize,
    pub curves: Vec<SpectralCurve>,
}

/// Inputs shared by every ratio of a sweep.
pub struct SweepInputs<'a> {
    pub sources: &'a [ImageTensor],
    pub targets: &'a [ImageTensor],
    pub target_masks: &'a [LabelMask],
    pub seed: u64,
    /// Reconstructions are written here as `recon_r{ratio}_{i}.gt` when set.
    pub dump_dir: Option<&'a Path>,
}

#[derive(Default, Clone)]
struct Moments {
    n: usize,
    sum: Vec<f64>,
    sq: Vec<f64>,
}

impl Moments {
    fn push(&mut self, v: &[f64]) {
        if self.sum.is_empty() {
            self.sum = vec![0.0; v.len()];
            self.sq = vec![0.0; v.len()];
        }
        self.n += 1;
        for (i, x) in v.iter().enumerate() {
            self.sum[i] += x;
            self.sq[i] += x * x;
        }
    }

    fn finish(&self, channels: usize) -> (Vec<f64>, Vec<f64>) {
        if self.n == 0 {
            return (vec![0.0; channels], vec![0.0; channels]);
        }
        let n = self.n as f64;
        let m: Vec<f64> = self.sum.iter().map(|s| s / n).collect();
        let sd = self.sq.iter().zip(&m).map(|(q, mu)| (q / n - mu * mu).max(0.0).sqrt()).collect();
        (m, sd)
    }
}

/// Reconstructs every target image (paired with the source of the same
/// index, cycling) at each ratio with a fully visible source.
pub fn reconstruction_sweep<T: Scalar>(
    net: &Network,
    store: &ParamStore<T>,
    inputs: &SweepInputs,
    ratios: &[f64],
) -> Result<Vec<SweepRecord>> {
    if inputs.sources.is_empty() || inputs.targets.is_empty() {
        return Err(Error::InvalidDataset("sweep needs at least one source and one target image".into()));
    }
    let grid = *net.grid(Domain::Target);
    let channels = net.gen_channels();
    let classes = net.target.classes;
    let mut out = Vec::with_capacity(ratios.len());
    for &rho in ratios {
        let mut sum = 0.0;
        let mut counted = 0usize;
        let mut masked = 0usize;
        let mut rec_m = vec![Moments::default(); classes];
        let mut org_m = vec![Moments::default(); classes];
        for (i, tgt) in inputs.targets.iter().enumerate() {
            let src = &inputs.sources[i % inputs.sources.len()];
            let plan = plan_mask(&grid, rho, inputs.seed.wrapping_add(i as u64))?;
            let recon = net.reconstruct(store, src, tgt, &plan, BnMode::Eval)?;
            let (h, w) = (grid.crop_height(), grid.crop_width());
            let orig = crop(tgt, h, w);
            let loss = mae_loss(&recon, &orig, &plan, &grid)?;
            if !loss.no_masked_patches {
                sum += loss.value;
                counted += 1;
            }
            masked += loss.masked_pixels;
            if let Some(dir) = inputs.dump_dir {
                let t = DenseTensor::f32(vec![recon.channels, recon.height, recon.width], recon.data.clone())?;
                write_tensor(&t, dir.join(format!("recon_r{rho}_{i:03}.gt")))?;
            }
            if let Some(mask) = inputs.target_masks.get(i) {
                let flags = crate::objectives::masked_pixel_flags(&plan, &grid);
                for y in 0..h {
                    for x in 0..w {
                        let cls = mask.at(y, x);
                        if !flags[y * w + x] || cls < 0 || cls as usize >= classes {
                            continue;
                        }
                        let r: Vec<f64> = (0..channels).map(|c| recon.at(c, y, x) as f64).collect();
                        let o: Vec<f64> = (0..channels).map(|c| orig.at(c, y, x) as f64).collect();
                        rec_m[cls as usize].push(&r);
                        org_m[cls as usize].push(&o);
                    }
                }
            }
        }
        let mse = if counted == 0 {
            log::warn!("reconstruction sweep: ratio {rho} masks nothing, MSE undefined");
            None
        } else {
            Some(sum / counted as f64)
        };
        let curves = (0..classes)
            .map(|c| {
                let (rm, rs) = rec_m[c].finish(channels);
                let (om, os) = org_m[c].finish(channels);
                SpectralCurve {
                    class: c,
                    pixels: rec_m[c].n,
                    recon_mean: rm,
                    recon_std: rs,
                    original_mean: om,
                    original_std: os,
                }
            })
            .collect();
        out.push(SweepRecord {
            ratio: rho,
            mse,
            masked_pixels: masked,
            curves,
        });
    }
    Ok(out)
}

fn crop(img: &ImageTensor, h: usize, w: usize) -> ImageTensor {
    let mut out = ImageTensor::zeros(img.channels, h, w);
    for c in 0..img.channels {
        for y in 0..h {
            for x in 0..w {
                out.set(c, y, x, img.at(c, y, x));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cm2(counts: [u64; 4]) -> ConfusionMatrix {
        ConfusionMatrix::from_counts(2, counts.to_vec()).unwrap()
    }

    #[test]
    fn diagonal_when_perfect() {
        let m = LabelMask::new(2, 2, vec![0, 1, 1, 0]).unwrap();
        let cm = confusion(&m.data, 2, 2, &m, 2).unwrap();
        assert_eq!(cm.counts, vec![2, 0, 0, 2]);
        assert_eq!(per_class_f1(&cm), vec![1.0, 1.0]);
        assert_eq!(miou(&cm), 1.0);
        assert_eq!(mean_accuracy(&cm), 1.0);
    }

    #[test]
    fn ignore_only_gives_zero_matrix() {
        let m = LabelMask::filled(2, 3, IGNORE);
        let cm = confusion(&[0; 6], 2, 3, &m, 3).unwrap();
        assert_eq!(cm.total(), 0);
    }

    #[test]
    fn hand_counted_toy() {
        let truth = LabelMask::new(1, 10, vec![0, 0, 0, 0, 1, 1, 1, 1, 1, IGNORE]).unwrap();
        let pred = [0, 0, 0, 1, 1, 1, 0, 1, 1, 0];
        let cm = confusion(&pred, 1, 10, &truth, 2).unwrap();
        // oracle: count by enumeration
        let mut want = [0u64; 4];
        for i in 0..9 {
            want[truth.data[i] as usize * 2 + pred[i] as usize] += 1;
        }
        assert_eq!(cm.counts, want.to_vec());
        assert_eq!(cm.counts, vec![3, 1, 1, 4]);
    }

    #[test]
    fn f1_iou_hand_values() {
        // class 0: TP 8, FP 2, FN 2
        let cm = cm2([8, 2, 2, 0]);
        assert!((per_class_f1(&cm)[0] - 0.8).abs() < 1e-12);
        assert!((per_class_iou(&cm)[0] - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn absent_class_scores_zero() {
        let cm = ConfusionMatrix::from_counts(3, vec![4, 1, 0, 2, 3, 0, 0, 0, 0]).unwrap();
        assert_eq!(per_class_f1(&cm)[2], 0.0);
        assert_eq!(per_class_iou(&cm)[2], 0.0);
        // MA skips the class with no ground truth
        assert!((mean_accuracy(&cm) - (0.8 + 0.6) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn aggregate_examples() {
        let mut a = MetricsReport::from_confusion(&cm2([1, 0, 0, 1]));
        let single = aggregate_seeds(std::slice::from_ref(&a)).unwrap();
        assert_eq!(single.miou_std, 0.0);
        let mut b = a.clone();
        a.miou = 0.3;
        b.miou = 0.5;
        let agg = aggregate_seeds(&[a.clone(), b]).unwrap();
        assert!((agg.miou - 0.4).abs() < 1e-12);
        assert!((agg.miou_std - 0.1).abs() < 1e-12);
        let mut c = a.clone();
        c.per_class_f1.push(0.0);
        assert!(matches!(aggregate_seeds(&[a, c]), Err(Error::InconsistentClasses)));
        assert!(aggregate_seeds(&[]).is_err());
    }

    #[test]
    fn csv_layout() {
        let r = MetricsReport::from_confusion(&cm2([3, 1, 1, 4]));
        let cols: Vec<_> = ["a", "b", "c", "d"].iter().map(|n| (n.to_string(), r.clone())).collect();
        let csv = report_csv(&cols, None);
        let lines: Vec<_> = csv.lines().collect();
        assert_eq!(lines.len(), 1 + 2 + 3);
        assert!(lines.iter().all(|l| l.split(',').count() == 5));
        assert!(lines[3].starts_with("MA,"));
    }
}
