//! Open-world losses, rank-and-discard selection of unlabeled rows, the
//! agent threshold, rejection, and accuracy metrics.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::error::{Error, Result};
use crate::numerics::Mat;

/// Floor applied inside every logarithm.
pub const LOG_CLAMP: f64 = 1e-12;
/// Fraction of unlabeled rows dropped at each end before the unknown loss.
pub const DISCARD_FRAC: f64 = 0.1;
/// Fraction of validation rows treated as expected unknowns by the agent.
pub const AGENT_TOP_FRAC: f64 = 0.1;

/// A predicted or ground-truth label in the open world.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Label {
    Class(usize),
    Unknown,
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Label::Class(c) => write!(f, "{c}"),
            Label::Unknown => f.write_str("unknown"),
        }
    }
}

/// Rejection threshold derived from validation statistics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AgentThreshold {
    pub a: f64,
    /// Mean max-probability over all validation rows.
    pub a_k: f64,
    /// Mean max-probability over the most entropic validation rows.
    pub a_u: f64,
    /// Entropy of the last row admitted to the high-entropy set.
    pub entropy_cutoff: f64,
}

impl AgentThreshold {
    pub fn from_parts(a_k: f64, a_u: f64, entropy_cutoff: f64) -> Self {
        AgentThreshold {
            a: (a_k + a_u) / 2.0,
            a_k,
            a_u,
            entropy_cutoff,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub l_k: f64,
    pub l_u: f64,
    pub l_total: f64,
    pub n_labeled: usize,
    pub n_unlabeled_used: usize,
    pub discarded_low: usize,
    pub discarded_high: usize,
}

fn ln_clamped(p: f64) -> f64 {
    libm::log(p.max(LOG_CLAMP))
}

fn check_mask(z_hat: &Mat, mask: &[bool], what: &'static str) -> Result<()> {
    if mask.len() != z_hat.rows() {
        return Err(Error::ShapeMismatch {
            op: what,
            left: z_hat.shape(),
            right: (mask.len(), 1),
        });
    }
    Ok(())
}

/// Mean cross-entropy `−(1/N_k) Σ log Ẑ[i, y_i]` over labeled rows.
pub fn known_loss(z_hat: &Mat, labels: &[usize], labeled_mask: &[bool]) -> Result<f64> {
    let (sum, n) = known_terms(z_hat, labels, labeled_mask)?;
    Ok(-sum / n as f64)
}

fn known_terms(z_hat: &Mat, labels: &[usize], labeled_mask: &[bool]) -> Result<(f64, usize)> {
    check_mask(z_hat, labeled_mask, "known_loss mask")?;
    if labels.len() != z_hat.rows() {
        return Err(Error::ShapeMismatch {
            op: "known_loss labels",
            left: z_hat.shape(),
            right: (labels.len(), 1),
        });
    }
    let mut sum = 0.0;
    let mut n = 0;
    for (i, (&y, _)) in labels
        .iter()
        .zip(labeled_mask)
        .enumerate()
        .filter(|(_, (_, &m))| m)
    {
        if y >= z_hat.cols() {
            return Err(Error::invalid(alloc::format!(
                "labeled row {i} has class {y}, outside 0..{}",
                z_hat.cols()
            )));
        }
        sum += ln_clamped(z_hat[(i, y)]);
        n += 1;
    }
    if n == 0 {
        return Err(Error::invalid(
            "known loss needs at least one labeled sample",
        ));
    }
    Ok((sum, n))
}

/// `dL_k/dẐ`. Zero where the log clamp is active.
pub fn known_loss_grad(z_hat: &Mat, labels: &[usize], labeled_mask: &[bool]) -> Result<Mat> {
    let (_, n) = known_terms(z_hat, labels, labeled_mask)?;
    let mut g = Mat::zeros(z_hat.rows(), z_hat.cols());
    for (i, &y) in labels.iter().enumerate() {
        if labeled_mask[i] && z_hat[(i, y)] > LOG_CLAMP {
            g[(i, y)] = -1.0 / (n as f64 * z_hat[(i, y)]);
        }
    }
    Ok(g)
}

/// Unlabeled rows kept for the unknown loss.
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub selected: Vec<bool>,
    pub discarded_low: usize,
    pub discarded_high: usize,
}

impl Selection {
    pub fn count(&self) -> usize {
        self.selected.iter().filter(|&&s| s).count()
    }
}

/// Ranks unlabeled rows by their largest probability and drops
/// `⌊frac·N_u⌋` rows from each end. Ties go by row index.
pub fn rank_and_discard(z_hat: &Mat, unlabeled_mask: &[bool], frac: f64) -> Result<Selection> {
    check_mask(z_hat, unlabeled_mask, "rank_and_discard mask")?;
    if !(0.0..0.5).contains(&frac) {
        return Err(Error::Domain {
            what: "discard fraction",
            value: frac,
        });
    }
    let mut ranked: Vec<(f64, usize)> = (0..z_hat.rows())
        .filter(|&i| unlabeled_mask[i])
        .map(|i| (z_hat.row_max(i), i))
        .collect();
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let drop = libm::floor(frac * ranked.len() as f64) as usize;
    let mut selected = vec![false; z_hat.rows()];
    for &(_, i) in &ranked[drop..ranked.len() - drop] {
        selected[i] = true;
    }
    Ok(Selection {
        selected,
        discarded_low: drop,
        discarded_high: drop,
    })
}

/// Value of the unknown loss and whether it had any rows to work with.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnknownLoss {
    pub value: f64,
    pub n_used: usize,
    /// Set when the selection was empty; the value is then 0.
    pub empty: bool,
}

/// Positive-sign mean of `log Ẑ[i, argmax_i]` over selected rows, with
/// pseudo-labels taken from each row's argmax. Minimizing it flattens rows.
pub fn unknown_loss(z_hat: &Mat, selected_mask: &[bool]) -> Result<UnknownLoss> {
    check_mask(z_hat, selected_mask, "unknown_loss mask")?;
    let mut sum = 0.0;
    let mut n = 0;
    for i in (0..z_hat.rows()).filter(|&i| selected_mask[i]) {
        sum += ln_clamped(z_hat.row_max(i));
        n += 1;
    }
    if n == 0 {
        return Ok(UnknownLoss {
            value: 0.0,
            n_used: 0,
            empty: true,
        });
    }
    Ok(UnknownLoss {
        value: sum / n as f64,
        n_used: n,
        empty: false,
    })
}

/// `dL_u/dẐ` with the pseudo-labels held fixed.
pub fn unknown_loss_grad(z_hat: &Mat, selected_mask: &[bool]) -> Result<Mat> {
    check_mask(z_hat, selected_mask, "unknown_loss mask")?;
    let n = selected_mask.iter().filter(|&&s| s).count();
    let mut g = Mat::zeros(z_hat.rows(), z_hat.cols());
    if n == 0 {
        return Ok(g);
    }
    for i in (0..z_hat.rows()).filter(|&i| selected_mask[i]) {
        let j = z_hat.row_argmax(i);
        if z_hat[(i, j)] > LOG_CLAMP {
            g[(i, j)] = 1.0 / (n as f64 * z_hat[(i, j)]);
        }
    }
    Ok(g)
}

/// `λ1·l_k + λ2·l_u`.
pub fn total_loss(l_k: f64, l_u: f64, lambda1: f64, lambda2: f64) -> Result<f64> {
    if !(lambda1 >= 0.0) {
        return Err(Error::Domain {
            what: "lambda1",
            value: lambda1,
        });
    }
    if !(lambda2 >= 0.0) {
        return Err(Error::Domain {
            what: "lambda2",
            value: lambda2,
        });
    }
    Ok(lambda1 * l_k + lambda2 * l_u)
}

/// Shannon entropy (nats) of a probability row.
pub fn row_entropy(p: &[f64]) -> f64 {
    -p.iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| v * libm::log(v))
        .sum::<f64>()
}

/// Mean entropy over the masked rows.
pub fn mean_entropy(z_hat: &Mat, mask: &[bool]) -> f64 {
    let mut sum = 0.0;
    let mut n = 0;
    for i in (0..z_hat.rows()).filter(|&i| mask[i]) {
        sum += row_entropy(z_hat.row(i));
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Agent threshold from validation probabilities: `a_k` is the mean max
/// probability over all rows, `a_u` the mean over the `⌈0.1·N⌉` rows with
/// the highest entropy, and `a` their average.
pub fn select_agent(z_hat_val: &Mat) -> Result<AgentThreshold> {
    let n = z_hat_val.rows();
    if n == 0 {
        return Err(Error::invalid(
            "agent selection needs a nonempty validation set",
        ));
    }
    let maxes: Vec<f64> = (0..n).map(|i| z_hat_val.row_max(i)).collect();
    let a_k = maxes.iter().sum::<f64>() / n as f64;
    let mut by_entropy: Vec<(f64, usize)> =
        (0..n).map(|i| (row_entropy(z_hat_val.row(i)), i)).collect();
    by_entropy.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let top = (libm::ceil(AGENT_TOP_FRAC * n as f64) as usize).clamp(1, n);
    let a_u = by_entropy[..top]
        .iter()
        .map(|&(_, i)| maxes[i])
        .sum::<f64>()
        / top as f64;
    Ok(AgentThreshold::from_parts(a_k, a_u, by_entropy[top - 1].0))
}

/// Rejects rows whose max probability is at or below the agent; otherwise
/// predicts the argmax (lowest index on ties).
pub fn predict(z_hat: &Mat, agent: &AgentThreshold) -> Vec<Label> {
    (0..z_hat.rows())
        .map(|i| {
            if z_hat.row_max(i) <= agent.a {
                Label::Unknown
            } else {
                Label::Class(z_hat.row_argmax(i))
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassRecall {
    pub label: Label,
    pub support: usize,
    pub correct: usize,
}

impl ClassRecall {
    pub fn recall(&self) -> f64 {
        if self.support == 0 {
            0.0
        } else {
            self.correct as f64 / self.support as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AccuracyReport {
    pub accuracy: f64,
    pub n: usize,
    /// Known classes in ascending order, then the unknown bucket if present.
    pub per_class: Vec<ClassRecall>,
}

impl AccuracyReport {
    pub fn unknown_recall(&self) -> Option<f64> {
        self.per_class
            .iter()
            .find(|c| c.label == Label::Unknown)
            .map(ClassRecall::recall)
    }
}

/// Exact-match accuracy after remapping ground-truth labels outside
/// `known_classes` to [`Label::Unknown`].
pub fn open_world_accuracy(
    pred: &[Label],
    truth: &[usize],
    known_classes: &[usize],
) -> Result<AccuracyReport> {
    if pred.len() != truth.len() {
        return Err(Error::invalid(alloc::format!(
            "{} predictions for {} ground-truth labels",
            pred.len(),
            truth.len()
        )));
    }
    let mut known: Vec<usize> = known_classes.to_vec();
    known.sort_unstable();
    known.dedup();
    let mut per_class: Vec<ClassRecall> = known
        .iter()
        .map(|&c| ClassRecall {
            label: Label::Class(c),
            support: 0,
            correct: 0,
        })
        .collect();
    let mut unknown = ClassRecall {
        label: Label::Unknown,
        support: 0,
        correct: 0,
    };
    let mut correct = 0;
    for (&p, &t) in pred.iter().zip(truth) {
        let bucket = match known.binary_search(&t) {
            Ok(pos) => &mut per_class[pos],
            Err(_) => &mut unknown,
        };
        bucket.support += 1;
        if p == bucket.label {
            bucket.correct += 1;
            correct += 1;
        }
    }
    if unknown.support > 0 {
        per_class.push(unknown);
    }
    let n = pred.len();
    Ok(AccuracyReport {
        accuracy: if n == 0 {
            0.0
        } else {
            correct as f64 / n as f64
        },
        n,
        per_class,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Mat {
        Mat::from_rows(rows).unwrap()
    }

    #[test]
    fn known_loss_examples() {
        let onehot = m(&[&[1.0, 0.0], &[0.0, 1.0]]);
        assert!(known_loss(&onehot, &[0, 1], &[true, true]).unwrap().abs() < 1e-15);
        let uniform = m(&[&[0.25; 4]]);
        let l = known_loss(&uniform, &[2], &[true]).unwrap();
        assert!((l - libm::log(4.0)).abs() < 1e-12);
        let two = m(&[&[0.5, 0.5], &[0.75, 0.25]]);
        let l = known_loss(&two, &[0, 1], &[true, true]).unwrap();
        assert!((l - 1.5 * libm::log(2.0)).abs() < 1e-12);
        assert!(known_loss(&two, &[0, 1], &[false, false]).is_err());
    }

    #[test]
    fn known_loss_ignores_unlabeled_labels() {
        let z = m(&[&[0.5, 0.5], &[0.9, 0.1]]);
        // row 1 carries an out-of-range label but is not labeled
        let l = known_loss(&z, &[0, 99], &[true, false]).unwrap();
        assert!((l - libm::log(2.0)).abs() < 1e-12);
    }

    #[test]
    fn rank_and_discard_counts() {
        let z = Mat::from_fn(10, 2, |i, j| {
            if j == 0 {
                0.5 + 0.04 * i as f64
            } else {
                0.5 - 0.04 * i as f64
            }
        });
        let all = vec![true; 10];
        let s = rank_and_discard(&z, &all, 0.1).unwrap();
        assert_eq!(s.count(), 8);
        assert!(!s.selected[0] && !s.selected[9]);
        assert_eq!(rank_and_discard(&z, &all, 0.0).unwrap().count(), 10);
        let five: Vec<bool> = (0..10).map(|i| i < 5).collect();
        let s = rank_and_discard(&z, &five, 0.1).unwrap();
        assert_eq!(s.count(), 5);
        assert_eq!(s.discarded_low, 0);
        assert!(rank_and_discard(&z, &all, 0.5).is_err());
    }

    #[test]
    fn unknown_loss_examples() {
        let z = m(&[&[0.9, 0.1]]);
        let l = unknown_loss(&z, &[true]).unwrap();
        assert!((l.value - libm::log(0.9)).abs() < 1e-15);
        let u = m(&[&[0.5, 0.5]]);
        assert!((unknown_loss(&u, &[true]).unwrap().value - libm::log(0.5)).abs() < 1e-15);
        let empty = unknown_loss(&z, &[false]).unwrap();
        assert!(empty.empty && empty.value == 0.0);
    }

    #[test]
    fn total_loss_examples() {
        assert_eq!(total_loss(1.0, -0.5, 1.0, 1.0).unwrap(), 0.5);
        assert_eq!(total_loss(2.0, -0.5, 0.5, 0.0).unwrap(), 1.0);
        assert_eq!(total_loss(2.0, -0.5, 0.0, 0.0).unwrap(), 0.0);
        assert!(total_loss(1.0, 1.0, -1.0, 0.0).is_err());
    }

    #[test]
    fn agent_examples() {
        let same = Mat::from_fn(12, 2, |_, j| if j == 0 { 0.8 } else { 0.2 });
        let a = select_agent(&same).unwrap();
        assert!(
            (a.a_k - 0.8).abs() < 1e-12 && (a.a_u - 0.8).abs() < 1e-12 && (a.a - 0.8).abs() < 1e-12
        );

        let mut rows: Vec<&[f64]> = vec![&[0.9, 0.05, 0.03, 0.02]; 9];
        rows.push(&[0.3, 0.25, 0.25, 0.2]);
        let a = select_agent(&m(&rows)).unwrap();
        assert!((a.a_k - 0.84).abs() < 1e-12);
        assert!((a.a_u - 0.3).abs() < 1e-12);
        assert!((a.a - 0.57).abs() < 1e-12);

        let uni = Mat::from_fn(10, 2, |_, _| 0.5);
        let a = select_agent(&uni).unwrap();
        assert_eq!((a.a_k, a.a_u, a.a), (0.5, 0.5, 0.5));
        assert!(select_agent(&Mat::zeros(0, 2)).is_err());
    }

    #[test]
    fn predict_examples() {
        let agent = AgentThreshold::from_parts(0.5, 0.5, 0.0);
        let z = m(&[
            &[0.3, 0.3, 0.4],
            &[0.9, 0.05, 0.05],
            &[0.5, 0.5, 0.0],
            &[0.2, 0.6, 0.2],
        ]);
        let agent3 = AgentThreshold { a: 0.3, ..agent };
        assert_eq!(
            predict(&m(&[&[0.3, 0.3, 0.3]]), &agent3),
            vec![Label::Unknown]
        );
        let p = predict(&z, &agent);
        assert_eq!(
            p,
            vec![
                Label::Unknown,
                Label::Class(0),
                Label::Unknown,
                Label::Class(1)
            ]
        );
    }

    #[test]
    fn accuracy_examples() {
        let known = [0, 1, 2];
        let truth = [0, 1, 2];
        let pred = [Label::Class(0), Label::Class(1), Label::Class(2)];
        assert_eq!(
            open_world_accuracy(&pred, &truth, &known).unwrap().accuracy,
            1.0
        );
        let all_unknown = [Label::Unknown; 3];
        assert_eq!(
            open_world_accuracy(&all_unknown, &truth, &known)
                .unwrap()
                .accuracy,
            0.0
        );

        let truth = [0, 1, 2, 7, 8];
        let pred = [
            Label::Class(0),
            Label::Class(1),
            Label::Class(0),
            Label::Unknown,
            Label::Unknown,
        ];
        let r = open_world_accuracy(&pred, &truth, &known).unwrap();
        assert!((r.accuracy - 0.8).abs() < 1e-15);
        assert_eq!(r.unknown_recall(), Some(1.0));
        assert_eq!(r.per_class[2].recall(), 0.0);
        assert!(open_world_accuracy(&pred[..2], &truth, &known).is_err());
    }
}
