use rand::seq::index;
use rand::Rng;

use super::{AnnotatedVideo, Dataset};
use crate::error::{Error, Result};

/// A query video and a same-class exemplar.
#[derive(Debug, Clone, Copy)]
pub struct PairSample<'a> {
    pub query: &'a AnnotatedVideo,
    pub exemplar: &'a AnnotatedVideo,
}

/// Draws an ordered `(query, exemplar)` pair uniformly from all same-class,
/// distinct-id ordered pairs of the train split.
pub fn sample_training_pair<'a>(dataset: &'a Dataset, rng: &mut impl Rng) -> Result<PairSample<'a>> {
    let groups: Vec<Vec<&AnnotatedVideo>> = dataset
        .train_by_class()
        .into_values()
        .filter(|g| g.len() >= 2)
        .collect();
    let total: usize = groups.iter().map(|g| g.len() * (g.len() - 1)).sum();
    if total == 0 {
        return Err(Error::Sampling("no class has at least two training videos".into()));
    }
    let mut k = rng.random_range(0..total);
    for g in &groups {
        let n = g.len();
        let count = n * (n - 1);
        if k < count {
            let qi = k / (n - 1);
            let mut ei = k % (n - 1);
            if ei >= qi {
                ei += 1;
            }
            return Ok(PairSample {
                query: g[qi],
                exemplar: g[ei],
            });
        }
        k -= count;
    }
    unreachable!("pair index within total")
}

/// Up to `p` distinct train videos of `class_code`, sampled uniformly
/// without replacement.
pub fn select_exemplars<'a>(
    dataset: &'a Dataset,
    class_code: &str,
    p: usize,
    rng: &mut impl Rng,
) -> Result<Vec<&'a AnnotatedVideo>> {
    select_exemplars_excluding(dataset, class_code, p, None, rng)
}

/// As [`select_exemplars`], never returning the video with id `exclude`.
pub fn select_exemplars_excluding<'a>(
    dataset: &'a Dataset,
    class_code: &str,
    p: usize,
    exclude: Option<&str>,
    rng: &mut impl Rng,
) -> Result<Vec<&'a AnnotatedVideo>> {
    let pool: Vec<&AnnotatedVideo> = dataset
        .train()
        .filter(|v| v.class_code == class_code && Some(v.id.as_str()) != exclude)
        .collect();
    if pool.is_empty() || p == 0 {
        return Err(Error::ExemplarUnavailable(class_code.to_string()));
    }
    let n = p.min(pool.len());
    Ok(index::sample(rng, pool.len(), n).into_iter().map(|i| pool[i]).collect())
}

#[cfg(test)]
mod tests {
    use std::collections::HashMap;

    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::data::{ScoreRange, Split};
    use crate::tensor::Tensor;

    fn video(id: &str, class: &str) -> AnnotatedVideo {
        AnnotatedVideo::new(id, Tensor::zeros([4, 1, 1, 1]), class, 5.0, vec![0, 0, 1, 1], 2).unwrap()
    }

    fn dataset(train: &[(&str, &str)], test: &[(&str, &str)]) -> Dataset {
        let videos = train.iter().chain(test).map(|(i, c)| video(i, c)).collect();
        let split = Split {
            train: train.iter().map(|(i, _)| i.to_string()).collect(),
            test: test.iter().map(|(i, _)| i.to_string()).collect(),
        };
        Dataset::new(videos, ScoreRange { min: 0.0, max: 10.0 }, 2, split).unwrap()
    }

    #[test]
    fn two_videos_give_the_unique_pair() {
        let d = dataset(&[("a", "A"), ("b", "A"), ("c", "B")], &[]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..50 {
            let p = sample_training_pair(&d, &mut rng).unwrap();
            let mut ids = [p.query.id.as_str(), p.exemplar.id.as_str()];
            ids.sort();
            assert_eq!(ids, ["a", "b"]);
        }
    }

    #[test]
    fn ordered_pairs_are_uniform() {
        let d = dataset(&[("a", "A"), ("b", "A"), ("c", "A")], &[]);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let draws = 10_000;
        let mut counts: HashMap<(String, String), usize> = HashMap::new();
        for _ in 0..draws {
            let p = sample_training_pair(&d, &mut rng).unwrap();
            assert_eq!(p.query.class_code, p.exemplar.class_code);
            assert_ne!(p.query.id, p.exemplar.id);
            *counts.entry((p.query.id.clone(), p.exemplar.id.clone())).or_default() += 1;
        }
        assert_eq!(counts.len(), 6);
        let prob = 1.0 / 6.0;
        let mean = draws as f64 * prob;
        let sigma = (draws as f64 * prob * (1.0 - prob)).sqrt();
        for (pair, &c) in &counts {
            assert!((c as f64 - mean).abs() < 3.0 * sigma, "{pair:?}: {c}");
        }
    }

    #[test]
    fn singleton_classes_cannot_pair() {
        let d = dataset(&[("a", "A"), ("b", "B")], &[]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(sample_training_pair(&d, &mut rng), Err(Error::Sampling(_))));
    }

    #[test]
    fn exemplars_are_capped_and_distinct() {
        let train: Vec<(String, &str)> = (0..10).map(|i| (format!("a{i}"), "A")).collect();
        let mut pairs: Vec<(&str, &str)> = train.iter().map(|(i, c)| (i.as_str(), *c)).collect();
        pairs.extend([("b0", "B"), ("b1", "B"), ("b2", "B"), ("b3", "B")]);
        let d = dataset(&pairs, &[("q", "B")]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);

        let ex = select_exemplars(&d, "B", 10, &mut rng).unwrap();
        assert_eq!(ex.len(), 4);
        let mut ids: Vec<_> = ex.iter().map(|v| v.id.clone()).collect();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 4);
        assert!(ex.iter().all(|v| v.class_code == "B" && v.id != "q"));

        let ex = select_exemplars(&d, "A", 2, &mut rng).unwrap();
        assert_eq!(ex.len(), 2);
        assert_ne!(ex[0].id, ex[1].id);
        assert!(ex.iter().all(|v| v.class_code == "A"));

        assert!(matches!(
            select_exemplars(&d, "Z", 3, &mut rng),
            Err(Error::ExemplarUnavailable(_))
        ));
        let ex = select_exemplars_excluding(&d, "B", 10, Some("b0"), &mut rng).unwrap();
        assert_eq!(ex.len(), 3);
    }
}
