use std::cmp::Ordering;

use ndarray::{Array2, Axis};

use super::FeatureBank;
use crate::error::{Error, Result};

/// How query rows relate to gallery rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Neighbors {
    /// Separate sets; every gallery row is a candidate.
    Disjoint,
    /// Query and gallery are the same set; row `i` never retrieves itself.
    ExcludeSelf,
}

fn unit_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let n = row.dot(&row).sqrt();
        if n > 0.0 {
            row /= n;
        }
    }
    out
}

/// Gallery indices of each query, most similar first (cosine; ties by index).
pub fn ranked_neighbors(query: &Array2<f64>, gallery: &Array2<f64>, mode: Neighbors) -> Result<Vec<Vec<usize>>> {
    if query.nrows() == 0 || gallery.nrows() == 0 {
        return Err(Error::EmptyBank);
    }
    if query.ncols() != gallery.ncols() {
        return Err(Error::Shape(format!("query D={} vs gallery D={}", query.ncols(), gallery.ncols())));
    }
    if mode == Neighbors::ExcludeSelf && query.nrows() != gallery.nrows() {
        return Err(Error::Shape("self exclusion needs query and gallery of equal size".into()));
    }
    let sims = unit_rows(query).dot(&unit_rows(gallery).t());
    Ok(sims
        .axis_iter(Axis(0))
        .enumerate()
        .map(|(i, row)| {
            let mut idx: Vec<usize> = (0..row.len())
                .filter(|&j| mode == Neighbors::Disjoint || j != i)
                .collect();
            idx.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap_or(Ordering::Equal).then(a.cmp(&b)));
            idx
        })
        .collect())
}

/// R@k: fraction of queries with a same-class item among their top k.
pub fn retrieval_recall(query: &FeatureBank, gallery: &FeatureBank, ks: &[usize], mode: Neighbors) -> Result<Vec<f64>> {
    let ranked = ranked_neighbors(&query.features, &gallery.features, mode)?;
    let n = ranked.len() as f64;
    Ok(ks
        .iter()
        .map(|&k| {
            let hits = ranked
                .iter()
                .zip(&query.labels)
                .filter(|(r, &y)| r.iter().take(k).any(|&j| gallery.labels[j] == y))
                .count();
            hits as f64 / n
        })
        .collect())
}

/// 1-NN accuracy of `test` against `train`.
pub fn nn_classify(train: &FeatureBank, test: &FeatureBank, mode: Neighbors) -> Result<f64> {
    let ranked = ranked_neighbors(&test.features, &train.features, mode)?;
    let mut correct = 0;
    for (r, &y) in ranked.iter().zip(&test.labels) {
        let Some(&j) = r.first() else {
            return Err(Error::EmptyBank);
        };
        correct += usize::from(train.labels[j] == y);
    }
    Ok(correct as f64 / ranked.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evalkit::Standardization;
    use ndarray::Array1;
    use proptest::{prop_assert, proptest};
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bank(features: Array2<f64>, labels: Vec<u16>) -> FeatureBank {
        let d = features.ncols();
        FeatureBank {
            features,
            labels,
            stats: Standardization {
                mean: Array1::zeros(d),
                std: Array1::ones(d),
            },
        }
    }

    fn random_bank(n: usize, d: usize, classes: u16, seed: u64) -> FeatureBank {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = Array2::from_shape_fn((n, d), |_| rng.random_range(-1.0..1.0));
        let labels = (0..n).map(|_| rng.random_range(0..classes)).collect();
        bank(f, labels)
    }

    /// Neighbor lists from explicit pairwise cosines.
    fn brute_force(q: &FeatureBank, g: &FeatureBank, exclude_self: bool) -> Vec<Vec<usize>> {
        let cos = |a: &[f64], b: &[f64]| {
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            dot / (na * nb)
        };
        (0..q.len())
            .map(|i| {
                let qi = q.features.row(i).to_vec();
                let mut scored: Vec<(f64, usize)> = (0..g.len())
                    .filter(|&j| !(exclude_self && i == j))
                    .map(|j| (cos(&qi, &g.features.row(j).to_vec()), j))
                    .collect();
                // selection sort keeps this independent of the library ordering
                let mut out = Vec::new();
                while !scored.is_empty() {
                    let mut best = 0;
                    for k in 1..scored.len() {
                        let (s, j) = scored[k];
                        let (bs, bj) = scored[best];
                        if s > bs || (s == bs && j < bj) {
                            best = k;
                        }
                    }
                    out.push(scored.remove(best).1);
                }
                out
            })
            .collect()
    }

    #[test]
    fn recall_matches_brute_force() {
        let q = random_bank(20, 6, 4, 1);
        let g = random_bank(20, 6, 4, 2);
        let ks = [1, 5, 10, 20];
        for (mode, gal, excl) in [(Neighbors::Disjoint, &g, false), (Neighbors::ExcludeSelf, &q, true)] {
            let lists = brute_force(&q, gal, excl);
            let expected: Vec<f64> = ks
                .iter()
                .map(|&k| {
                    (0..q.len())
                        .filter(|&i| lists[i].iter().take(k).any(|&j| gal.labels[j] == q.labels[i]))
                        .count() as f64
                        / q.len() as f64
                })
                .collect();
            assert_eq!(retrieval_recall(&q, gal, &ks, mode).unwrap(), expected);
        }
    }

    #[test]
    fn nn_matches_brute_force() {
        let train = random_bank(30, 5, 3, 3);
        let test = random_bank(30, 5, 3, 4);
        let lists = brute_force(&test, &train, false);
        let expected = (0..30).filter(|&i| train.labels[lists[i][0]] == test.labels[i]).count() as f64 / 30.0;
        assert_eq!(nn_classify(&train, &test, Neighbors::Disjoint).unwrap(), expected);
    }

    #[test]
    fn one_item_per_class_has_no_self_excluded_match() {
        let b = random_bank(6, 4, 1, 5);
        let b = FeatureBank {
            labels: (0..6).collect(),
            ..b
        };
        assert_eq!(retrieval_recall(&b, &b, &[1, 3, 5], Neighbors::ExcludeSelf).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn exhaustive_k_finds_every_class() {
        let q = random_bank(10, 3, 3, 6);
        let g = FeatureBank {
            labels: (0..12).map(|i| (i % 3) as u16).collect(),
            ..random_bank(12, 3, 3, 7)
        };
        assert_eq!(retrieval_recall(&q, &g, &[12], Neighbors::Disjoint).unwrap(), vec![1.0]);
    }

    #[test]
    fn duplicated_points_classify_perfectly_and_single_point_dominates() {
        let b = random_bank(8, 4, 3, 8);
        let f = ndarray::concatenate(Axis(0), &[b.features.view(), b.features.view()]).unwrap();
        let labels = [b.labels.clone(), b.labels.clone()].concat();
        let dup = bank(f, labels);
        assert_eq!(nn_classify(&dup, &dup, Neighbors::ExcludeSelf).unwrap(), 1.0);

        let one = bank(Array2::ones((1, 4)), vec![2]);
        let test = random_bank(10, 4, 3, 9);
        let expected = test.labels.iter().filter(|&&y| y == 2).count() as f64 / 10.0;
        assert_eq!(nn_classify(&one, &test, Neighbors::Disjoint).unwrap(), expected);
    }

    #[test]
    fn empty_banks_are_rejected() {
        let empty = bank(Array2::zeros((0, 3)), vec![]);
        let b = random_bank(4, 3, 2, 10);
        assert!(matches!(retrieval_recall(&empty, &b, &[1], Neighbors::Disjoint), Err(Error::EmptyBank)));
        assert!(matches!(nn_classify(&empty, &b, Neighbors::Disjoint), Err(Error::EmptyBank)));
    }

    proptest! {
        #[test]
        fn recall_is_monotone_in_k(seed in 0u64..500) {
            let q = random_bank(15, 4, 3, seed);
            let g = random_bank(25, 4, 3, seed + 1000);
            let r = retrieval_recall(&q, &g, &[1, 2, 3, 5, 8, 13, 25], Neighbors::Disjoint).unwrap();
            prop_assert!(r.windows(2).all(|w| w[0] <= w[1]));
        }

        #[test]
        fn metrics_ignore_row_order(seed in 0u64..500) {
            let q = random_bank(12, 4, 3, seed);
            let g = random_bank(18, 4, 3, seed + 1000);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut pq: Vec<usize> = (0..12).collect();
            let mut pg: Vec<usize> = (0..18).collect();
            pq.shuffle(&mut rng);
            pg.shuffle(&mut rng);
            let (q2, g2) = (q.select(&pq), g.select(&pg));
            // ties are measure-zero for continuous features, so index tie-breaks cannot matter
            let ks = [1, 4, 9];
            prop_assert!(retrieval_recall(&q, &g, &ks, Neighbors::Disjoint).unwrap()
                == retrieval_recall(&q2, &g2, &ks, Neighbors::Disjoint).unwrap());
            prop_assert!(nn_classify(&g, &q, Neighbors::Disjoint).unwrap()
                == nn_classify(&g2, &q2, Neighbors::Disjoint).unwrap());
            let r = retrieval_recall(&q, &q, &ks, Neighbors::ExcludeSelf).unwrap();
            let r2 = retrieval_recall(&q2, &q2, &ks, Neighbors::ExcludeSelf).unwrap();
            prop_assert!(r == r2);
        }
    }
}
