//! Classification and segmentation scores.

use crate::error::{Error, Result};

fn nonempty(n: usize, what: &str) -> Result<()> {
    if n == 0 {
        return Err(Error::invalid(format!("{what}: empty input")));
    }
    Ok(())
}

/// Fraction of predictions equal to the label.
pub fn overall_accuracy(pred: &[u32], labels: &[u32]) -> Result<f64> {
    nonempty(pred.len(), "overall_accuracy")?;
    if pred.len() != labels.len() {
        return Err(Error::invalid("overall_accuracy: length mismatch"));
    }
    let hit = pred.iter().zip(labels).filter(|(a, b)| a == b).count();
    Ok(hit as f64 / pred.len() as f64)
}

/// F1 from TP/FP/FN pooled over every (sample, class) decision. Row-major
/// `[n, k]` boolean matrices. With no positives anywhere the score is 1.
pub fn micro_f1(pred: &[bool], labels: &[bool]) -> Result<f64> {
    nonempty(pred.len(), "micro_f1")?;
    if pred.len() != labels.len() {
        return Err(Error::invalid("micro_f1: length mismatch"));
    }
    let (mut tp, mut fp, mut fun) = (0u64, 0u64, 0u64);
    for (&p, &l) in pred.iter().zip(labels) {
        match (p, l) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fun += 1,
            _ => {}
        }
    }
    let denom = 2 * tp + fp + fun;
    Ok(if denom == 0 { 1.0 } else { 2.0 * tp as f64 / denom as f64 })
}

/// Per-class confusion counts for one segmentation class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ClassCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
}

/// Unweighted mean of TP / (TP + FP + FN) over classes with a nonzero
/// denominator. `None` when every class is absent.
pub fn mean_iou(counts: &[ClassCounts]) -> Option<f64> {
    let present: Vec<f64> = counts
        .iter()
        .filter(|c| c.tp + c.fp + c.fn_ > 0)
        .map(|c| c.tp as f64 / (c.tp + c.fp + c.fn_) as f64)
        .collect();
    (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64)
}

/// Accumulate per-class counts; positions labelled `ignore` are skipped.
pub fn confusion_counts(pred: &[u32], labels: &[u32], classes: usize, ignore: Option<u32>) -> Result<Vec<ClassCounts>> {
    if pred.len() != labels.len() {
        return Err(Error::invalid("macro_iou: length mismatch"));
    }
    let mut counts = vec![ClassCounts::default(); classes];
    for (&p, &l) in pred.iter().zip(labels) {
        if Some(l) == ignore {
            continue;
        }
        let (p, l) = (p as usize, l as usize);
        if p >= classes || l >= classes {
            return Err(Error::invalid(format!("macro_iou: class index out of range ({p}, {l})")));
        }
        if p == l {
            counts[p].tp += 1;
        } else {
            counts[p].fp += 1;
            counts[l].fn_ += 1;
        }
    }
    Ok(counts)
}

/// Mean over classes of TP / (TP + FP + FN). Classes absent from both the
/// prediction and the label are left out of the mean.
pub fn macro_iou(pred: &[u32], labels: &[u32], classes: usize, ignore: Option<u32>) -> Result<f64> {
    nonempty(pred.len(), "macro_iou")?;
    let counts = confusion_counts(pred, labels, classes, ignore)?;
    mean_iou(&counts).ok_or_else(|| Error::invalid("macro_iou: every position is ignored"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_cases() {
        let pred = [true, true, true, false, false, false];
        let lab = [true, true, false, true, false, false];
        assert!((micro_f1(&pred, &lab).unwrap() - 2.0 / 3.0).abs() < 1e-12);
        let counts = [
            ClassCounts { tp: 5, fp: 0, fn_: 0 },
            ClassCounts { tp: 1, fp: 1, fn_: 0 },
            ClassCounts::default(),
        ];
        assert_eq!(mean_iou(&counts), Some(0.75));
        // class 2 never appears and is excluded
        let p = [0u32, 0, 1, 1];
        let l = [0u32, 1, 1, 1];
        let v = macro_iou(&p, &l, 3, None).unwrap();
        assert!((v - (0.5 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
        assert_eq!(macro_iou(&[0, 1, 1], &[0, 1, 4], 2, Some(4)).unwrap(), 1.0);
        assert!(macro_iou(&[0, 1], &[0, 3], 2, None).is_err());
    }

    #[test]
    fn perfect_and_empty() {
        assert_eq!(overall_accuracy(&[1, 2], &[1, 2]).unwrap(), 1.0);
        assert_eq!(micro_f1(&[true, false], &[true, false]).unwrap(), 1.0);
        assert_eq!(macro_iou(&[0, 1], &[0, 1], 2, None).unwrap(), 1.0);
        assert!(overall_accuracy(&[], &[]).is_err());
        assert!(micro_f1(&[], &[]).is_err());
        assert!(macro_iou(&[], &[], 2, None).is_err());
    }
}
