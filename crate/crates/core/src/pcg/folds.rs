//! Stratified k-fold assignment, at segment level or grouped by recording.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::pcg::signal::Label;
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldSplit {
    /// Sorted segment indices of each fold.
    pub folds: Vec<Vec<usize>>,
    /// `[normal, abnormal]` counts per fold.
    pub class_counts: Vec<[usize; 2]>,
}

impl FoldSplit {
    fn from_folds(mut folds: Vec<Vec<usize>>, labels: &[Label]) -> Self {
        let class_counts = folds
            .iter_mut()
            .map(|f| {
                f.sort_unstable();
                let mut c = [0; 2];
                f.iter().for_each(|&i| c[labels[i].index()] += 1);
                c
            })
            .collect();
        FoldSplit { folds, class_counts }
    }

    pub fn k(&self) -> usize {
        self.folds.len()
    }

    /// `(train, test)` where `test` is fold `i` and `train` all others.
    pub fn train_test(&self, i: usize) -> (Vec<usize>, Vec<usize>) {
        let mut train: Vec<usize> = self
            .folds
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != i)
            .flat_map(|(_, f)| f.iter().copied())
            .collect();
        train.sort_unstable();
        (train, self.folds[i].clone())
    }
}

fn by_class(labels: &[Label]) -> [Vec<usize>; 2] {
    let mut out = [Vec::new(), Vec::new()];
    for (i, l) in labels.iter().enumerate() {
        out[l.index()].push(i);
    }
    out
}

/// Shuffles each class, then deals round-robin with the fold pointer
/// carried across classes, so fold sizes differ by at most one.
pub fn stratified_kfold(labels: &[Label], k: usize, seed: u64) -> Result<FoldSplit> {
    if k < 2 {
        return Err(Error::invalid(format!("fold count must be at least 2, got {k}")));
    }
    let classes = by_class(labels);
    for (c, members) in classes.iter().enumerate() {
        if members.len() < k {
            return Err(Error::Data(format!(
                "class {} has {} segments, fewer than {k} folds",
                Label::from_index(c)?,
                members.len()
            )));
        }
    }
    let rng = Rng::new(seed);
    let mut folds = vec![Vec::new(); k];
    let mut next = 0;
    for (c, members) in classes.into_iter().enumerate() {
        let mut members = members;
        rng.fork(c as u64).shuffle(&mut members);
        for i in members {
            folds[next].push(i);
            next = (next + 1) % k;
        }
    }
    Ok(FoldSplit::from_folds(folds, labels))
}

/// Keeps every recording's segments in one fold. Recordings are shuffled
/// per class and each goes to the fold currently holding the fewest
/// segments of that class.
pub fn grouped_kfold(labels: &[Label], groups: &[&str], k: usize, seed: u64) -> Result<FoldSplit> {
    if k < 2 {
        return Err(Error::invalid(format!("fold count must be at least 2, got {k}")));
    }
    if groups.len() != labels.len() {
        return Err(Error::shape("grouped folds", "group ids", labels.len(), groups.len()));
    }
    let mut members: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, g) in groups.iter().enumerate() {
        members.entry(g).or_default().push(i);
    }
    let mut per_class: [Vec<Vec<usize>>; 2] = [Vec::new(), Vec::new()];
    for (g, idx) in members {
        let label = labels[idx[0]];
        if idx.iter().any(|&i| labels[i] != label) {
            return Err(Error::Data(format!("recording {g} mixes labels")));
        }
        per_class[label.index()].push(idx);
    }
    let rng = Rng::new(seed);
    let mut folds = vec![Vec::new(); k];
    for (c, mut recs) in per_class.into_iter().enumerate() {
        if recs.len() < k {
            return Err(Error::Data(format!(
                "class {} has {} recordings, fewer than {k} folds",
                Label::from_index(c)?,
                recs.len()
            )));
        }
        rng.fork(c as u64).shuffle(&mut recs);
        let mut load = vec![0usize; k];
        for r in recs {
            let f = (0..k).min_by_key(|&f| (load[f], f)).unwrap();
            load[f] += r.len();
            folds[f].extend(r);
        }
    }
    Ok(FoldSplit::from_folds(folds, labels))
}

/// Holds out `fraction` of each class (at least one member when the class
/// has two or more) from `indices`. Returns `(train, validation)`.
pub fn stratified_holdout(indices: &[usize], labels: &[Label], fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::invalid(format!("holdout fraction must be in (0, 1), got {fraction}")));
    }
    let rng = Rng::new(seed);
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for c in 0..2 {
        let mut members: Vec<usize> = indices.iter().copied().filter(|&i| labels[i].index() == c).collect();
        rng.fork(c as u64).shuffle(&mut members);
        let mut n = (fraction * members.len() as f64).round() as usize;
        if members.len() >= 2 {
            n = n.clamp(1, members.len() - 1);
        } else {
            n = 0;
        }
        val.extend_from_slice(&members[..n]);
        train.extend_from_slice(&members[n..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    Ok((train, val))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(normal: usize, abnormal: usize) -> Vec<Label> {
        let mut v = vec![Label::Normal; normal];
        v.extend(vec![Label::Abnormal; abnormal]);
        v
    }

    #[test]
    fn exact_stratification() {
        let y = labels(80, 20);
        let s = stratified_kfold(&y, 5, 1).unwrap();
        assert!(s.class_counts.iter().all(|c| *c == [16, 4]));
        let mut all: Vec<usize> = s.folds.concat();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn uneven_sizes_differ_by_one() {
        let y = labels(61, 40);
        let s = stratified_kfold(&y, 5, 9).unwrap();
        let sizes: Vec<usize> = s.folds.iter().map(Vec::len).collect();
        assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        assert_eq!(sizes.iter().sum::<usize>(), 101);
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        let y = labels(30, 30);
        assert_eq!(stratified_kfold(&y, 5, 4).unwrap(), stratified_kfold(&y, 5, 4).unwrap());
        assert_ne!(stratified_kfold(&y, 5, 4).unwrap(), stratified_kfold(&y, 5, 5).unwrap());
    }

    #[test]
    fn small_class_is_an_error() {
        assert!(matches!(stratified_kfold(&labels(10, 4), 5, 0), Err(Error::Data(_))));
    }

    #[test]
    fn grouped_folds_keep_recordings_together() {
        let y = labels(40, 20);
        let ids: Vec<String> = (0..60).map(|i| format!("r{}", i / 4)).collect();
        let refs: Vec<&str> = ids.iter().map(String::as_str).collect();
        let s = grouped_kfold(&y, &refs, 5, 3).unwrap();
        for f in &s.folds {
            for &i in f {
                for j in 0..60 {
                    if refs[j] == refs[i] {
                        assert!(f.contains(&j));
                    }
                }
            }
        }
        assert!(s.class_counts.iter().all(|c| *c == [8, 4]));
    }

    #[test]
    fn holdout_is_stratified() {
        let y = labels(50, 30);
        let idx: Vec<usize> = (0..80).collect();
        let (tr, va) = stratified_holdout(&idx, &y, 0.1, 2).unwrap();
        assert_eq!(va.len(), 8);
        assert_eq!(va.iter().filter(|&&i| y[i] == Label::Abnormal).count(), 3);
        assert_eq!(tr.len() + va.len(), 80);
    }
}
