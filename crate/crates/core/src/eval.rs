//! Confusion counting over labeled pixels, accuracy metrics, and the
//! four-colour confusion map.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::raster::{BinaryMap, LabelRaster, CHANGED, UNCHANGED, UNLABELED};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }

    pub fn merge(self, o: ConfusionCounts) -> ConfusionCounts {
        ConfusionCounts {
            tp: self.tp + o.tp,
            tn: self.tn + o.tn,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
        }
    }

    #[inline]
    fn record(&mut self, pred: u8, label: u8) {
        match (pred == CHANGED, label) {
            (true, CHANGED) => self.tp += 1,
            (false, UNCHANGED) => self.tn += 1,
            (true, UNCHANGED) => self.fp += 1,
            (false, CHANGED) => self.fn_ += 1,
            _ => {}
        }
    }
}

fn check_dims(pred: &BinaryMap, labels: &LabelRaster) -> Result<()> {
    if (pred.height(), pred.width()) != (labels.height(), labels.width()) {
        return Err(Error::Input(format!(
            "prediction is {}×{} but labels are {}×{}",
            pred.height(),
            pred.width(),
            labels.height(),
            labels.width()
        )));
    }
    Ok(())
}

/// Tallies predictions against labels; unlabeled pixels are skipped and
/// "changed" is the positive class.
pub fn confusion(pred: &BinaryMap, labels: &LabelRaster) -> Result<ConfusionCounts> {
    check_dims(pred, labels)?;
    let mut c = ConfusionCounts::default();
    for (&p, &l) in pred.data().iter().zip(labels.data()) {
        c.record(p, l);
    }
    Ok(c)
}

/// Counts row bands of the scene independently and merges them. Equal to
/// [`confusion`] for any band height.
pub fn confusion_tiled(pred: &BinaryMap, labels: &LabelRaster, band_rows: usize) -> Result<ConfusionCounts> {
    check_dims(pred, labels)?;
    let w = pred.width();
    let rows = band_rows.max(1);
    let bands = pred.height().div_ceil(rows);
    let parts = crate::parallel::map_range(bands, |b| {
        let lo = b * rows * w;
        let hi = ((b + 1) * rows).min(pred.height()) * w;
        let mut c = ConfusionCounts::default();
        for (&p, &l) in pred.data()[lo..hi].iter().zip(&labels.data()[lo..hi]) {
            c.record(p, l);
        }
        c
    });
    Ok(parts.into_iter().fold(ConfusionCounts::default(), ConfusionCounts::merge))
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MetricsReport {
    pub oa: f64,
    pub kappa: f64,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub counts: ConfusionCounts,
    /// Set when a metric's denominator vanished and it was reported as 0.
    pub precision_undefined: bool,
    pub recall_undefined: bool,
    pub f1_undefined: bool,
    pub kappa_undefined: bool,
}

/// Overall accuracy, Cohen's kappa, F1, precision and recall. Degenerate
/// denominators yield 0 with the matching `*_undefined` flag.
pub fn metrics(c: &ConfusionCounts) -> Result<MetricsReport> {
    let n = c.total();
    if n == 0 {
        return Err(Error::Usage("no labeled pixels to evaluate".into()));
    }
    let (tp, tn, fp, fn_) = (c.tp as f64, c.tn as f64, c.fp as f64, c.fn_ as f64);
    let nf = n as f64;
    let ratio = |num: f64, den: f64| if den > 0.0 { (num / den, false) } else { (0.0, true) };
    let oa = (tp + tn) / nf;
    let (precision, precision_undefined) = ratio(tp, tp + fp);
    let (recall, recall_undefined) = ratio(tp, tp + fn_);
    let (f1, f1_undefined) = if precision_undefined || recall_undefined {
        (0.0, true)
    } else {
        ratio(2.0 * precision * recall, precision + recall)
    };
    let pe = ((tp + fp) * (tp + fn_) + (fn_ + tn) * (fp + tn)) / (nf * nf);
    let (kappa, kappa_undefined) = ratio(oa - pe, 1.0 - pe);
    Ok(MetricsReport {
        oa,
        kappa,
        f1,
        precision,
        recall,
        counts: *c,
        precision_undefined,
        recall_undefined,
        f1_undefined,
        kappa_undefined,
    })
}

impl MetricsReport {
    /// Flat `key=value` lines.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let c = self.counts;
        for (k, v) in [
            ("oa", self.oa),
            ("kappa", self.kappa),
            ("f1", self.f1),
            ("precision", self.precision),
            ("recall", self.recall),
        ] {
            let _ = writeln!(s, "{k}={v}");
        }
        for (k, v) in [("tp", c.tp), ("tn", c.tn), ("fp", c.fp), ("fn", c.fn_)] {
            let _ = writeln!(s, "{k}={v}");
        }
        for (k, v) in [
            ("precision_undefined", self.precision_undefined),
            ("recall_undefined", self.recall_undefined),
            ("f1_undefined", self.f1_undefined),
            ("kappa_undefined", self.kappa_undefined),
        ] {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut r = MetricsReport::default();
        let bad = |line: &str| Error::Input(format!("malformed metrics line {line:?}"));
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line.split_once('=').ok_or_else(|| bad(line))?;
            let f = || v.parse::<f64>().map_err(|_| bad(line));
            let u = || v.parse::<u64>().map_err(|_| bad(line));
            let b = || v.parse::<bool>().map_err(|_| bad(line));
            match k {
                "oa" => r.oa = f()?,
                "kappa" => r.kappa = f()?,
                "f1" => r.f1 = f()?,
                "precision" => r.precision = f()?,
                "recall" => r.recall = f()?,
                "tp" => r.counts.tp = u()?,
                "tn" => r.counts.tn = u()?,
                "fp" => r.counts.fp = u()?,
                "fn" => r.counts.fn_ = u()?,
                "precision_undefined" => r.precision_undefined = b()?,
                "recall_undefined" => r.recall_undefined = b()?,
                "f1_undefined" => r.f1_undefined = b()?,
                "kappa_undefined" => r.kappa_undefined = b()?,
                _ => return Err(bad(line)),
            }
        }
        Ok(r)
    }
}

pub const TP_COLOR: [u8; 3] = [255, 255, 255];
pub const TN_COLOR: [u8; 3] = [0, 0, 0];
pub const FP_COLOR: [u8; 3] = [255, 0, 0];
pub const FN_COLOR: [u8; 3] = [0, 255, 0];
pub const UNLABELED_COLOR: [u8; 3] = [128, 128, 128];

/// Interleaved RGB raster.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbRaster {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl RgbRaster {
    pub fn pixel(&self, row: usize, col: usize) -> [u8; 3] {
        let o = (row * self.width + col) * 3;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    pub fn write_png(&self, path: impl AsRef<Path>) -> Result<()> {
        image::save_buffer(
            path,
            &self.data,
            self.width as u32,
            self.height as u32,
            image::ColorType::Rgb8,
        )
        .map_err(|e| match e {
            image::ImageError::IoError(io) => Error::Io(io),
            other => Error::Io(std::io::Error::other(other)),
        })
    }
}

/// TP white, TN black, FP red, FN green, unlabeled grey.
pub fn render_confusion_map(pred: &BinaryMap, labels: &LabelRaster) -> Result<RgbRaster> {
    check_dims(pred, labels)?;
    let mut data = Vec::with_capacity(pred.data().len() * 3);
    for (&p, &l) in pred.data().iter().zip(labels.data()) {
        let color = match (l, p == CHANGED) {
            (UNLABELED, _) => UNLABELED_COLOR,
            (CHANGED, true) => TP_COLOR,
            (CHANGED, false) => FN_COLOR,
            (_, true) => FP_COLOR,
            (_, false) => TN_COLOR,
        };
        data.extend_from_slice(&color);
    }
    Ok(RgbRaster {
        height: pred.height(),
        width: pred.width(),
        data,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn counts(tp: u64, tn: u64, fp: u64, fn_: u64) -> ConfusionCounts {
        ConfusionCounts { tp, tn, fp, fn_ }
    }

    #[test]
    fn hand_evaluated_metrics() {
        let m = metrics(&counts(40, 40, 10, 10)).unwrap();
        assert!((m.oa - 0.8).abs() < 1e-15);
        assert!((m.kappa - 0.6).abs() < 1e-15);
        assert!((m.precision - 0.8).abs() < 1e-15);
        assert!((m.recall - 0.8).abs() < 1e-15);
        assert!((m.f1 - 0.8).abs() < 1e-15);
    }

    #[test]
    fn perfect_confusion_is_all_ones() {
        let m = metrics(&counts(7, 5, 0, 0)).unwrap();
        assert_eq!((m.oa, m.kappa, m.f1, m.precision, m.recall), (1.0, 1.0, 1.0, 1.0, 1.0));
    }

    #[test]
    fn empty_positive_prediction_is_flagged() {
        let m = metrics(&counts(0, 10, 0, 4)).unwrap();
        assert_eq!(m.precision, 0.0);
        assert!(m.precision_undefined);
        assert_eq!(m.recall, 0.0);
        assert!(!m.recall_undefined);
        assert_eq!(m.f1, 0.0);
        assert!(m.f1_undefined);
    }

    #[test]
    fn single_class_truth_kappa_is_flagged() {
        let m = metrics(&counts(0, 10, 0, 0)).unwrap();
        assert!(m.kappa_undefined);
        assert_eq!(m.kappa, 0.0);
        assert!(m.kappa.is_finite() && m.f1.is_finite());
    }

    #[test]
    fn zero_total_is_usage_error() {
        assert!(matches!(metrics(&ConfusionCounts::default()), Err(Error::Usage(_))));
    }

    #[test]
    fn hand_built_three_by_three() {
        // labels        pred
        // 1 0 255       1 1 1
        // 0 0 1         0 1 0
        // 1 1 0         1 0 0
        let labels = LabelRaster::new(3, 3, vec![1, 0, 255, 0, 0, 1, 1, 1, 0]).unwrap();
        let pred = BinaryMap::new(3, 3, vec![1, 1, 1, 0, 1, 0, 1, 0, 0]).unwrap();
        let c = confusion(&pred, &labels).unwrap();
        assert_eq!(c, counts(2, 2, 2, 2));
        assert_eq!(c.total(), 8);
    }

    #[test]
    fn perfect_and_inverted_predictions() {
        let labels = LabelRaster::new(2, 3, vec![1, 0, 1, 0, 0, 1]).unwrap();
        let same = BinaryMap::new(2, 3, labels.data().to_vec()).unwrap();
        let c = confusion(&same, &labels).unwrap();
        assert_eq!((c.fp, c.fn_), (0, 0));
        let inv = BinaryMap::new(2, 3, labels.data().iter().map(|v| 1 - v).collect()).unwrap();
        let c = confusion(&inv, &labels).unwrap();
        assert_eq!((c.tp, c.tn), (0, 0));
    }

    #[test]
    fn dim_mismatch_is_input_error() {
        let labels = LabelRaster::new(2, 3, vec![0; 6]).unwrap();
        let pred = BinaryMap::new(3, 2, vec![0; 6]).unwrap();
        assert!(matches!(confusion(&pred, &labels), Err(Error::Input(_))));
        assert!(render_confusion_map(&pred, &labels).is_err());
    }

    #[test]
    fn single_false_positive_is_one_red_pixel() {
        let labels = LabelRaster::new(2, 2, vec![0, 0, 1, 255]).unwrap();
        let pred = BinaryMap::new(2, 2, vec![0, 1, 1, 0]).unwrap();
        let img = render_confusion_map(&pred, &labels).unwrap();
        assert_eq!(img.pixel(0, 1), FP_COLOR);
        assert_eq!(img.pixel(0, 0), TN_COLOR);
        assert_eq!(img.pixel(1, 0), TP_COLOR);
        assert_eq!(img.pixel(1, 1), UNLABELED_COLOR);
        let reds = img.data.chunks(3).filter(|p| *p == FP_COLOR).count();
        assert_eq!(reds, 1);
    }

    #[test]
    fn report_text_round_trips() {
        let m = metrics(&counts(3, 9, 1, 2)).unwrap();
        assert_eq!(MetricsReport::from_text(&m.to_text()).unwrap(), m);
    }
}
