//! Agreement metrics between gold and predicted score classes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Gold and predicted class indices over `[0, num_classes)`.
#[derive(Clone, Debug, PartialEq)]
pub struct RaterPair {
    truth: Vec<usize>,
    predicted: Vec<usize>,
    num_classes: usize,
}

impl RaterPair {
    pub fn new(truth: Vec<usize>, predicted: Vec<usize>, num_classes: usize) -> Result<Self> {
        if truth.is_empty() || truth.len() != predicted.len() {
            return Err(Error::Usage(format!(
                "rater lists must be non-empty and of equal length ({} vs {})",
                truth.len(),
                predicted.len()
            )));
        }
        if num_classes == 0 {
            return Err(Error::Usage("num_classes must be positive".into()));
        }
        if let Some(bad) = truth.iter().chain(&predicted).find(|&&l| l >= num_classes) {
            return Err(Error::Usage(format!("label {bad} outside [0, {num_classes})")));
        }
        Ok(Self {
            truth,
            predicted,
            num_classes,
        })
    }

    pub fn truth(&self) -> &[usize] {
        &self.truth
    }

    pub fn predicted(&self) -> &[usize] {
        &self.predicted
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.truth.len()
    }

    pub fn is_empty(&self) -> bool {
        self.truth.is_empty()
    }
}

pub fn accuracy(pair: &RaterPair) -> f64 {
    let hits = pair.truth.iter().zip(&pair.predicted).filter(|(t, p)| t == p).count();
    hits as f64 / pair.len() as f64
}

/// Kappa value plus a flag set when both raters are constant, in which case
/// the statistic is undefined and a conventional value is returned.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Kappa {
    pub value: f64,
    pub degenerate: bool,
}

/// Quadratic weighted kappa with weights `(i-j)^2 / (C-1)^2`.
///
/// When both raters are constant the ratio is undefined: equal constants give
/// `1.0` and different constants give `0.0`, both flagged degenerate.
pub fn qwk(pair: &RaterPair) -> Kappa {
    let c = pair.num_classes;
    let constant = |v: &[usize]| v.iter().all(|&x| x == v[0]);
    if constant(&pair.truth) && constant(&pair.predicted) {
        let value = if pair.truth[0] == pair.predicted[0] { 1.0 } else { 0.0 };
        return Kappa { value, degenerate: true };
    }
    let n = pair.len() as f64;
    let observed = confusion_matrix(pair);
    let (hist_t, hist_p) = histograms(pair);
    let norm = ((c - 1) * (c - 1)) as f64;
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..c {
        for j in 0..c {
            let w = ((i as f64 - j as f64).powi(2)) / norm;
            num += w * observed[i][j] as f64;
            den += w * (hist_t[i] as f64 * hist_p[j] as f64 / n);
        }
    }
    Kappa {
        value: 1.0 - num / den,
        degenerate: false,
    }
}

/// Entry `[i][j]` counts items with truth `i` predicted as `j`.
pub fn confusion_matrix(pair: &RaterPair) -> Vec<Vec<u64>> {
    let mut m = vec![vec![0u64; pair.num_classes]; pair.num_classes];
    for (&t, &p) in pair.truth.iter().zip(&pair.predicted) {
        m[t][p] += 1;
    }
    m
}

fn histograms(pair: &RaterPair) -> (Vec<u64>, Vec<u64>) {
    let mut t = vec![0u64; pair.num_classes];
    let mut p = vec![0u64; pair.num_classes];
    for (&a, &b) in pair.truth.iter().zip(&pair.predicted) {
        t[a] += 1;
        p[b] += 1;
    }
    (t, p)
}

/// Per-class counts of gold and predicted labels, ready to plot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreDistribution {
    pub classes: Vec<usize>,
    pub truth: Vec<u64>,
    pub predicted: Vec<u64>,
}

pub fn score_distribution(pair: &RaterPair) -> ScoreDistribution {
    let (truth, predicted) = histograms(pair);
    ScoreDistribution {
        classes: (0..pair.num_classes).collect(),
        truth,
        predicted,
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DegenerateFlags {
    pub qwk: bool,
}

/// Serialized form of an evaluation run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsBundle {
    pub accuracy: f64,
    pub qwk: f64,
    pub confusion_matrix: Vec<Vec<u64>>,
    pub truth_histogram: Vec<u64>,
    pub predicted_histogram: Vec<u64>,
    pub degenerate_flags: DegenerateFlags,
}

impl MetricsBundle {
    pub fn from_pair(pair: &RaterPair) -> Self {
        let kappa = qwk(pair);
        let dist = score_distribution(pair);
        Self {
            accuracy: accuracy(pair),
            qwk: kappa.value,
            confusion_matrix: confusion_matrix(pair),
            truth_histogram: dist.truth,
            predicted_histogram: dist.predicted,
            degenerate_flags: DegenerateFlags { qwk: kappa.degenerate },
        }
    }

    /// Pools counts over all pairs but reports accuracy and kappa as the mean
    /// of per-pair values.
    pub fn averaged(pairs: &[RaterPair]) -> Result<Self> {
        let first = pairs.first().ok_or_else(|| Error::Usage("no rater pairs to average".into()))?;
        let c = first.num_classes;
        let mut out = Self {
            accuracy: 0.0,
            qwk: 0.0,
            confusion_matrix: vec![vec![0; c]; c],
            truth_histogram: vec![0; c],
            predicted_histogram: vec![0; c],
            degenerate_flags: DegenerateFlags::default(),
        };
        for p in pairs {
            if p.num_classes != c {
                return Err(Error::Usage("rater pairs disagree on num_classes".into()));
            }
            let b = Self::from_pair(p);
            out.accuracy += b.accuracy;
            out.qwk += b.qwk;
            out.degenerate_flags.qwk |= b.degenerate_flags.qwk;
            for i in 0..c {
                out.truth_histogram[i] += b.truth_histogram[i];
                out.predicted_histogram[i] += b.predicted_histogram[i];
                for j in 0..c {
                    out.confusion_matrix[i][j] += b.confusion_matrix[i][j];
                }
            }
        }
        out.accuracy /= pairs.len() as f64;
        out.qwk /= pairs.len() as f64;
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pair(t: &[usize], p: &[usize], c: usize) -> RaterPair {
        RaterPair::new(t.to_vec(), p.to_vec(), c).unwrap()
    }

    #[test]
    fn accuracy_examples() {
        assert!((accuracy(&pair(&[1, 2, 3], &[1, 2, 0], 4)) - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(accuracy(&pair(&[0, 1, 2], &[0, 1, 2], 3)), 1.0);
        assert_eq!(accuracy(&pair(&[0, 1], &[1, 0], 2)), 0.0);
    }

    #[test]
    fn qwk_anchor_cases() {
        let perfect = qwk(&pair(&[0, 1, 2, 1], &[0, 1, 2, 1], 3));
        assert_eq!(perfect, Kappa { value: 1.0, degenerate: false });
        let reversed = qwk(&pair(&[0, 1, 2], &[2, 1, 0], 3));
        assert!((reversed.value + 1.0).abs() < 1e-12);
        let independent = qwk(&pair(&[0, 0, 1, 1], &[0, 1, 0, 1], 2));
        assert!(independent.value.abs() < 1e-12);
    }

    #[test]
    fn qwk_degenerate_conventions() {
        assert_eq!(qwk(&pair(&[1, 1], &[1, 1], 3)), Kappa { value: 1.0, degenerate: true });
        assert_eq!(qwk(&pair(&[0, 0], &[2, 2], 3)), Kappa { value: 0.0, degenerate: true });
    }

    #[test]
    fn constant_predictor_on_balanced_labels_has_zero_kappa() {
        let truth = vec![0, 1, 2, 3, 0, 1, 2, 3];
        let p = pair(&truth, &[0; 8], 4);
        assert_eq!(accuracy(&p), 0.25);
        let k = qwk(&p);
        assert!(k.value.abs() < 1e-12 && !k.degenerate);
    }

    #[test]
    fn confusion_examples() {
        assert_eq!(confusion_matrix(&pair(&[0, 1], &[0, 1], 2)), vec![vec![1, 0], vec![0, 1]]);
        assert_eq!(confusion_matrix(&pair(&[0, 0], &[1, 1], 2)), vec![vec![0, 2], vec![0, 0]]);
    }

    #[test]
    fn distribution_example() {
        let d = score_distribution(&pair(&[0, 0, 1], &[1, 1, 1], 2));
        assert_eq!(d.truth, vec![2, 1]);
        assert_eq!(d.predicted, vec![0, 3]);
    }

    #[test]
    fn invalid_pairs_rejected() {
        assert!(RaterPair::new(vec![], vec![], 2).is_err());
        assert!(RaterPair::new(vec![0], vec![0, 1], 2).is_err());
        assert!(RaterPair::new(vec![2], vec![0], 2).is_err());
    }

    fn arb_pair() -> impl Strategy<Value = RaterPair> {
        (2usize..=5, 1usize..=50).prop_flat_map(|(c, n)| {
            (
                proptest::collection::vec(0..c, n),
                proptest::collection::vec(0..c, n),
                Just(c),
            )
                .prop_map(|(t, p, c)| RaterPair::new(t, p, c).unwrap())
        })
    }

    proptest! {
        #[test]
        fn qwk_is_symmetric(p in arb_pair()) {
            let swapped = RaterPair::new(p.predicted().to_vec(), p.truth().to_vec(), p.num_classes()).unwrap();
            prop_assert!((qwk(&p).value - qwk(&swapped).value).abs() < 1e-12);
        }

        #[test]
        fn accuracy_is_confusion_trace(p in arb_pair()) {
            let m = confusion_matrix(&p);
            let trace: u64 = (0..p.num_classes()).map(|i| m[i][i]).sum();
            prop_assert_eq!(accuracy(&p), trace as f64 / p.len() as f64);
            let total: u64 = m.iter().flatten().sum();
            prop_assert_eq!(total as usize, p.len());
        }

        #[test]
        fn histograms_match_confusion_margins(p in arb_pair()) {
            let m = confusion_matrix(&p);
            let d = score_distribution(&p);
            let c = p.num_classes();
            // Row sums equal a directly counted truth histogram.
            let mut hist = vec![0u64; c];
            for &t in p.truth() { hist[t] += 1; }
            for i in 0..c {
                prop_assert_eq!(m[i].iter().sum::<u64>(), hist[i]);
                prop_assert_eq!(d.truth[i], hist[i]);
                prop_assert_eq!(d.predicted[i], (0..c).map(|r| m[r][i]).sum::<u64>());
            }
        }

        #[test]
        fn permuting_items_preserves_metrics(p in arb_pair(), seed in any::<u64>()) {
            let n = p.len();
            let mut order: Vec<usize> = (0..n).collect();
            let mut s = seed;
            for i in (1..n).rev() {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                order.swap(i, (s >> 33) as usize % (i + 1));
            }
            let q = RaterPair::new(
                order.iter().map(|&i| p.truth()[i]).collect(),
                order.iter().map(|&i| p.predicted()[i]).collect(),
                p.num_classes(),
            ).unwrap();
            prop_assert_eq!(accuracy(&p), accuracy(&q));
            prop_assert!((qwk(&p).value - qwk(&q).value).abs() < 1e-12);
            prop_assert_eq!(confusion_matrix(&p), confusion_matrix(&q));
        }
    }
}
