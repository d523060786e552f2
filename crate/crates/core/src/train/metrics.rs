//! Single- and multi-label evaluation metrics.

/// All fields lie in `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metrics {
    /// Single-label: argmax accuracy. Multi-label: fraction of examples whose
    /// top-scoring label is a true label (an example without labels counts
    /// when no logit is positive).
    pub top1: f64,
    /// Mean over examples of the per-example F1.
    pub ebf: f64,
    /// F1 of the pooled true/false positive and false negative counts.
    pub mif: f64,
}

/// F1 from confusion counts; defined as 1 when there is nothing to find and
/// nothing predicted.
pub fn f1(tp: usize, fp: usize, fn_: usize) -> f64 {
    if tp + fp + fn_ == 0 {
        1.0
    } else {
        2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
    }
}

fn counts(pred: &[bool], truth: &[bool]) -> (usize, usize, usize) {
    pred.iter().zip(truth).fold((0, 0, 0), |(tp, fp, fn_), (&p, &t)| match (p, t) {
        (true, true) => (tp + 1, fp, fn_),
        (true, false) => (tp, fp + 1, fn_),
        (false, true) => (tp, fp, fn_ + 1),
        (false, false) => (tp, fp, fn_),
    })
}

/// `(ebf, mif)` for binary predictions against binary targets, one row per example.
pub fn metrics_multilabel(pred: &[Vec<bool>], targets: &[Vec<bool>]) -> (f64, f64) {
    assert_eq!(pred.len(), targets.len(), "prediction and target counts differ");
    if pred.is_empty() {
        return (1.0, 1.0);
    }
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    let mut ebf = 0.0;
    for (p, t) in pred.iter().zip(targets) {
        assert_eq!(p.len(), t.len(), "label counts differ");
        let (a, b, c) = counts(p, t);
        ebf += f1(a, b, c);
        tp += a;
        fp += b;
        fn_ += c;
    }
    (ebf / pred.len() as f64, f1(tp, fp, fn_))
}

pub fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}

/// Single-label metrics; F1 uses the one-hot argmax prediction, so all three agree.
pub fn single_label(logits: &[Vec<f64>], targets: &[usize]) -> Metrics {
    let n = targets.len().max(1) as f64;
    let hits = logits.iter().zip(targets).filter(|(l, &t)| argmax(l) == t).count() as f64;
    Metrics {
        top1: hits / n,
        ebf: hits / n,
        mif: hits / n,
    }
}

/// Multi-label metrics with predictions thresholded at probability 0.5 (logit 0).
pub fn multi_label(logits: &[Vec<f64>], targets: &[Vec<bool>]) -> Metrics {
    let pred: Vec<Vec<bool>> = logits.iter().map(|l| l.iter().map(|&z| z > 0.0).collect()).collect();
    let (ebf, mif) = metrics_multilabel(&pred, targets);
    let top = logits
        .iter()
        .zip(targets)
        .filter(|(l, t)| {
            if t.iter().any(|&x| x) {
                t[argmax(l)]
            } else {
                l.iter().all(|&z| z <= 0.0)
            }
        })
        .count();
    Metrics {
        top1: top as f64 / targets.len().max(1) as f64,
        ebf,
        mif,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn b(rows: &[&[u8]]) -> Vec<Vec<bool>> {
        rows.iter().map(|r| r.iter().map(|&x| x == 1).collect()).collect()
    }

    #[test]
    fn worked_example() {
        let (ebf, mif) = metrics_multilabel(&b(&[&[1, 1, 0], &[0, 0, 1]]), &b(&[&[1, 0, 0], &[0, 1, 1]]));
        assert_eq!(ebf, 2.0 / 3.0);
        assert_eq!(mif, 2.0 / 3.0);
    }

    #[test]
    fn degenerate_cases() {
        let t = b(&[&[1, 0, 1], &[0, 1, 0]]);
        assert_eq!(metrics_multilabel(&t, &t), (1.0, 1.0));
        assert_eq!(metrics_multilabel(&b(&[&[0, 0, 0], &[0, 0, 0]]), &t).0, 0.0);
        assert_eq!(metrics_multilabel(&b(&[&[0, 0]]), &b(&[&[0, 0]])), (1.0, 1.0));
    }

    #[test]
    fn oracle_logits_score_one() {
        let targets = vec![2usize, 0, 1];
        let logits: Vec<Vec<f64>> = targets.iter().map(|&t| (0..3).map(|j| if j == t { 5.0 } else { -5.0 }).collect()).collect();
        assert_eq!(single_label(&logits, &targets).top1, 1.0);
        let multi = b(&[&[1, 0, 1], &[0, 0, 0]]);
        let ml: Vec<Vec<f64>> = multi.iter().map(|r| r.iter().map(|&x| if x { 5.0 } else { -5.0 }).collect()).collect();
        assert_eq!(multi_label(&ml, &multi), Metrics { top1: 1.0, ebf: 1.0, mif: 1.0 });
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn metrics_are_bounded(rows in prop::collection::vec(prop::collection::vec((any::<bool>(), -3.0f64..3.0), 4), 1..6)) {
            let targets: Vec<Vec<bool>> = rows.iter().map(|r| r.iter().map(|x| x.0).collect()).collect();
            let logits: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|x| x.1).collect()).collect();
            let m = multi_label(&logits, &targets);
            for v in [m.top1, m.ebf, m.mif] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            let s = single_label(&logits, &vec![1; logits.len()]);
            prop_assert!((0.0..=1.0).contains(&s.top1));
        }
    }
}
