use std::collections::BTreeMap;

use rand::seq::SliceRandom;

use super::{Example, Label};
use crate::error::{Error, Result};
use crate::rng;

/// Share of labeled source and unlabeled target data held out for validation.
pub const VALIDATION_FRACTION: f64 = 0.20;

#[derive(Debug, Clone, PartialEq)]
pub struct SplitDataset {
    pub train: Vec<Example>,
    pub validation: Vec<Example>,
}

fn round_half_up(x: f64) -> usize {
    (x + 0.5 + 1e-9).floor() as usize
}

/// Deterministic shuffled split, stratified by label.
pub fn split(examples: &[Example], fraction: f64, seed: u64) -> Result<SplitDataset> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Split(format!("fraction {fraction} outside (0, 1)")));
    }
    if examples.len() < 2 {
        return Err(Error::Split(format!(
            "need at least 2 examples, got {}",
            examples.len()
        )));
    }
    let mut rng = rng::seeded(seed);
    let mut groups: BTreeMap<Option<Label>, Vec<Example>> = BTreeMap::new();
    for e in examples {
        groups.entry(e.label).or_default().push(e.clone());
    }
    let mut train = Vec::new();
    let mut validation = Vec::new();
    for (_, mut group) in groups {
        group.shuffle(&mut rng);
        let k = round_half_up(group.len() as f64 * fraction).min(group.len());
        validation.extend(group.drain(..k));
        train.extend(group);
    }
    if validation.is_empty() {
        validation.push(train.pop().expect("at least 2 examples"));
    } else if train.is_empty() {
        train.push(validation.pop().expect("at least 2 examples"));
    }
    train.shuffle(&mut rng);
    validation.shuffle(&mut rng);
    Ok(SplitDataset { train, validation })
}

/// Concatenates several domains' examples and shuffles them.
pub fn combine_sources(parts: &[&[Example]], seed: u64) -> Vec<Example> {
    let mut all: Vec<Example> = parts.iter().flat_map(|p| p.iter().cloned()).collect();
    all.shuffle(&mut rng::seeded(seed));
    all
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labeled(n_pos: usize, n_neg: usize) -> Vec<Example> {
        let mut v = Vec::new();
        for i in 0..n_pos {
            v.push(Example::labeled(format!("p{i}"), Label::Positive, "d"));
        }
        for i in 0..n_neg {
            v.push(Example::labeled(format!("n{i}"), Label::Negative, "d"));
        }
        v
    }

    #[test]
    fn ten_examples_split_eight_two() {
        let ex: Vec<Example> = (0..10).map(|i| Example::unlabeled(format!("s{i}"), "d")).collect();
        let s = split(&ex, 0.2, 1).unwrap();
        assert_eq!((s.train.len(), s.validation.len()), (8, 2));
    }

    #[test]
    fn same_seed_same_split() {
        let ex = labeled(30, 30);
        assert_eq!(split(&ex, 0.2, 4).unwrap(), split(&ex, 0.2, 4).unwrap());
        assert_ne!(split(&ex, 0.2, 4).unwrap(), split(&ex, 0.2, 5).unwrap());
    }

    #[test]
    fn stratified_counts() {
        let ex = labeled(1000, 1000);
        let s = split(&ex, 0.2, 9).unwrap();
        let pos = s.validation.iter().filter(|e| e.label == Some(Label::Positive)).count();
        let neg = s.validation.iter().filter(|e| e.label == Some(Label::Negative)).count();
        assert_eq!((pos, neg), (200, 200));
        assert_eq!(s.train.len(), 1600);
    }

    #[test]
    fn partition_is_disjoint_and_complete() {
        let ex = labeled(13, 8);
        let s = split(&ex, 0.2, 2).unwrap();
        let mut all: Vec<String> = s.train.iter().chain(&s.validation).map(|e| e.text.clone()).collect();
        all.sort();
        let mut orig: Vec<String> = ex.iter().map(|e| e.text.clone()).collect();
        orig.sort();
        assert_eq!(all, orig);
    }

    #[test]
    fn too_few_examples() {
        assert!(split(&labeled(1, 0), 0.2, 0).is_err());
        assert!(split(&labeled(3, 3), 1.0, 0).is_err());
    }

    #[test]
    fn tiny_inputs_keep_both_sides_nonempty() {
        let s = split(&labeled(1, 1), 0.2, 0).unwrap();
        assert_eq!((s.train.len(), s.validation.len()), (1, 1));
    }
}
