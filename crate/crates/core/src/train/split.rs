use crate::error::{Error, Result};
use crate::rng::Rng;

/// Partition of a dataset into train/test and, within train, into labeled
/// and unlabeled samples. All index lists are sorted ascending.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitSpec {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub labeled: Vec<usize>,
    pub unlabeled: Vec<usize>,
}

/// How many training labels stay visible.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LabelBudget {
    /// `floor(ratio * n)` per class, for `0 < ratio <= 1`.
    Ratio(f64),
    /// A fixed count per class.
    PerClass(usize),
}

impl LabelBudget {
    pub fn validate(&self) -> Result<()> {
        match *self {
            LabelBudget::Ratio(r) if !(r > 0.0 && r <= 1.0) => Err(Error::Config(format!(
                "labeled ratio must be in (0, 1], got {r}"
            ))),
            LabelBudget::PerClass(0) => Err(Error::Config("labeled count per class must be >= 1".into())),
            _ => Ok(()),
        }
    }

    fn count(&self, available: usize) -> usize {
        match *self {
            LabelBudget::Ratio(r) => ((r * available as f64).floor() as usize).min(available),
            LabelBudget::PerClass(n) => n.min(available),
        }
    }
}

fn by_class(labels: &[usize], subset: &[usize]) -> Vec<Vec<usize>> {
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut out = vec![Vec::new(); classes];
    for &i in subset {
        out[labels[i]].push(i);
    }
    out
}

/// Stratified 75/25 split: per class, `floor(n / 4)` shuffled samples go to
/// test and the rest to train.
pub fn outer_split(labels: &[usize], rng: &mut Rng) -> Result<(Vec<usize>, Vec<usize>)> {
    let all: Vec<usize> = (0..labels.len()).collect();
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (class, mut members) in by_class(labels, &all).into_iter().enumerate() {
        if members.len() < 2 {
            return Err(Error::Data(format!(
                "class {class} has {} samples, need at least 2",
                members.len()
            )));
        }
        rng.shuffle(&mut members);
        let n_test = members.len() / 4;
        test.extend_from_slice(&members[..n_test]);
        train.extend_from_slice(&members[n_test..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

/// Picks the labeled subset of `train` per class; everything else in
/// `train` becomes unlabeled.
pub fn hide_labels(
    labels: &[usize],
    train: &[usize],
    budget: LabelBudget,
    rng: &mut Rng,
) -> Result<(Vec<usize>, Vec<usize>)> {
    budget.validate()?;
    let mut labeled = Vec::new();
    let mut unlabeled = Vec::new();
    for mut members in by_class(labels, train) {
        rng.shuffle(&mut members);
        let k = budget.count(members.len());
        labeled.extend_from_slice(&members[..k]);
        unlabeled.extend_from_slice(&members[k..]);
    }
    labeled.sort_unstable();
    unlabeled.sort_unstable();
    Ok((labeled, unlabeled))
}

pub fn make_splits(labels: &[usize], budget: LabelBudget, rng: &mut Rng) -> Result<SplitSpec> {
    budget.validate()?;
    let (train, test) = outer_split(labels, rng)?;
    let (labeled, unlabeled) = hide_labels(labels, &train, budget, rng)?;
    Ok(SplitSpec {
        train,
        test,
        labeled,
        unlabeled,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use crate::rng::Rng;

    fn balanced(per_class: usize) -> Vec<usize> {
        (0..2 * per_class).map(|i| i % 2).collect()
    }

    fn count(labels: &[usize], idx: &[usize], class: usize) -> usize {
        idx.iter().filter(|&&i| labels[i] == class).count()
    }

    #[test]
    fn full_size_protocol() {
        let labels = balanced(512);
        let s = make_splits(&labels, LabelBudget::Ratio(0.2), &mut Rng::new(0)).unwrap();
        assert_eq!(s.train.len(), 768);
        assert_eq!(s.test.len(), 256);
        for c in 0..2 {
            assert_eq!(count(&labels, &s.train, c), 384);
            assert_eq!(count(&labels, &s.test, c), 128);
            assert_eq!(count(&labels, &s.labeled, c), 76);
        }
        assert_eq!(s.unlabeled.len(), 616);
    }

    #[test]
    fn ratio_one_leaves_nothing_unlabeled() {
        let labels = balanced(20);
        let s = make_splits(&labels, LabelBudget::Ratio(1.0), &mut Rng::new(1)).unwrap();
        assert!(s.unlabeled.is_empty());
        assert_eq!(s.labeled, s.train);
    }

    #[test]
    fn rejects_bad_inputs() {
        let labels = balanced(10);
        for r in [0.0, -0.5, 1.5] {
            assert!(matches!(
                make_splits(&labels, LabelBudget::Ratio(r), &mut Rng::new(0)),
                Err(Error::Config(_))
            ));
        }
        assert!(make_splits(&[0, 0, 1], LabelBudget::Ratio(0.5), &mut Rng::new(0)).is_err());
    }

    #[test]
    fn per_class_budget() {
        let labels = balanced(670);
        let s = make_splits(&labels, LabelBudget::PerClass(3), &mut Rng::new(2)).unwrap();
        assert_eq!(s.labeled.len(), 6);
        assert_eq!(s.unlabeled.len(), 1000);
        assert_eq!(s.test.len(), 334);
    }

    proptest! {
        #[test]
        fn partitions_are_disjoint_and_exhaustive(
            per_class in 2usize..60,
            ratio in 0.01f64..=1.0,
            seed in any::<u64>(),
        ) {
            let labels = balanced(per_class);
            let s = make_splits(&labels, LabelBudget::Ratio(ratio), &mut Rng::new(seed)).unwrap();
            let mut all = [s.train.clone(), s.test.clone()].concat();
            all.sort_unstable();
            prop_assert_eq!(all, (0..labels.len()).collect::<Vec<_>>());
            let mut train = [s.labeled.clone(), s.unlabeled.clone()].concat();
            train.sort_unstable();
            prop_assert_eq!(&train, &s.train);
            for c in 0..2 {
                let n_train = count(&labels, &s.train, c);
                prop_assert_eq!(count(&labels, &s.test, c), per_class / 4);
                prop_assert_eq!(count(&labels, &s.labeled, c), (ratio * n_train as f64).floor() as usize);
            }
        }
    }
}
