//! Retrieval evaluation: Euclidean ranking, average precision, mAP and CMC.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{pairwise_sq_euclidean, Matrix};

/// Embedded samples with identities and optional camera ids.
#[derive(Debug, Clone, Copy)]
pub struct RetrievalSet<'a> {
    pub features: &'a Matrix,
    pub labels: &'a [usize],
    pub cameras: Option<&'a [u32]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub ranks: Vec<usize>,
    /// Skip gallery items sharing both identity and camera with the query.
    pub exclude_same_camera: bool,
    /// Skip the gallery item at the query's own index (query set == gallery set).
    pub exclude_self: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            ranks: vec![1, 5, 10],
            exclude_same_camera: true,
            exclude_self: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub map: f64,
    pub cmc: BTreeMap<usize, f64>,
    /// Queries with at least one relevant gallery item.
    pub num_queries: usize,
    pub num_gallery: usize,
}

impl EvalReport {
    pub fn cmc_at(&self, rank: usize) -> f64 {
        self.cmc.get(&rank).copied().unwrap_or(f64::NAN)
    }

    /// Aligned two-row table, e.g. for terminal output.
    pub fn table(&self) -> String {
        let mut header = format!("{:>8}", "mAP");
        let mut values = format!("{:>8.4}", self.map);
        for (rank, v) in &self.cmc {
            let _ = write!(header, " {:>8}", format!("R{rank}"));
            let _ = write!(values, " {v:>8.4}");
        }
        format!(
            "{header}\n{values}\n({} queries, {} gallery)",
            self.num_queries, self.num_gallery
        )
    }
}

/// Gallery indices per query by ascending squared distance, ties by index.
pub fn rank_gallery(query: &Matrix, gallery: &Matrix) -> Result<Vec<Vec<usize>>> {
    let dist = pairwise_sq_euclidean(query, gallery)?;
    Ok((0..query.rows())
        .into_par_iter()
        .map(|q| {
            let row = dist.row(q);
            let mut order: Vec<usize> = (0..gallery.rows()).collect();
            order.sort_by(|&a, &b| row[a].total_cmp(&row[b]).then(a.cmp(&b)));
            order
        })
        .collect())
}

/// Mean of precision@k over the positions `k` of relevant items.
pub fn average_precision(ranked_relevance: &[bool]) -> Result<f64> {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (k, &rel) in ranked_relevance.iter().enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (k + 1) as f64;
        }
    }
    if hits == 0 {
        return Err(Error::NoRelevant);
    }
    Ok(sum / hits as f64)
}

/// Per-query outcome: AP and 0-based rank of the first relevant item.
fn score_query(
    q: usize,
    order: &[usize],
    query: &RetrievalSet<'_>,
    gallery: &RetrievalSet<'_>,
    opts: &EvalOptions,
) -> Option<(f64, usize)> {
    let qid = query.labels[q];
    let qcam = query.cameras.map(|c| c[q]);
    let relevance: Vec<bool> = order
        .iter()
        .filter(|&&g| {
            if opts.exclude_self && g == q {
                return false;
            }
            if opts.exclude_same_camera {
                if let (Some(qc), Some(gc)) = (qcam, gallery.cameras) {
                    if gallery.labels[g] == qid && gc[g] == qc {
                        return false;
                    }
                }
            }
            true
        })
        .map(|&g| gallery.labels[g] == qid)
        .collect();
    match average_precision(&relevance) {
        Ok(ap) => Some((ap, relevance.iter().position(|&r| r).expect("has a hit"))),
        Err(_) => {
            log::warn!("query {q} (id {qid}) has no relevant gallery item; skipped");
            None
        }
    }
}

/// mAP and CMC over every query that has a relevant gallery item.
pub fn evaluate(query: &RetrievalSet<'_>, gallery: &RetrievalSet<'_>, opts: &EvalOptions) -> Result<EvalReport> {
    if query.features.rows() == 0 {
        return Err(Error::EmptySplit("query"));
    }
    if gallery.features.rows() == 0 {
        return Err(Error::EmptySplit("gallery"));
    }
    for set in [query, gallery] {
        if set.labels.len() != set.features.rows() {
            return Err(Error::DimMismatch(format!(
                "{} labels for {} rows",
                set.labels.len(),
                set.features.rows()
            )));
        }
    }
    let ranking = rank_gallery(query.features, gallery.features)?;
    let scored: Vec<Option<(f64, usize)>> = ranking
        .par_iter()
        .enumerate()
        .map(|(q, order)| score_query(q, order, query, gallery, opts))
        .collect();

    let valid: Vec<(f64, usize)> = scored.into_iter().flatten().collect();
    let n = valid.len();
    let mut ap_sum = 0.0;
    for (ap, _) in &valid {
        ap_sum += ap;
    }
    let cmc = opts
        .ranks
        .iter()
        .map(|&k| {
            let hits = valid.iter().filter(|(_, first)| *first < k).count();
            (k, if n == 0 { 0.0 } else { hits as f64 / n as f64 })
        })
        .collect();
    Ok(EvalReport {
        map: if n == 0 { 0.0 } else { ap_sum / n as f64 },
        cmc,
        num_queries: n,
        num_gallery: gallery.features.rows(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;
    use proptest::prelude::*;

    fn set<'a>(f: &'a Matrix, l: &'a [usize]) -> RetrievalSet<'a> {
        RetrievalSet {
            features: f,
            labels: l,
            cameras: None,
        }
    }

    #[test]
    fn ranking_cases() {
        let g = Matrix::from_rows(&[[0.0], [1.0], [3.0]]).unwrap();
        let q = Matrix::from_rows(&[[1.0], [2.9], [2.0]]).unwrap();
        let r = rank_gallery(&q, &g).unwrap();
        assert_eq!(r[0][0], 1);
        assert_eq!(r[1], vec![2, 1, 0]);
        // Equidistant from 1 and 3: lower index first.
        assert_eq!(r[2], vec![1, 2, 0]);
        assert!(matches!(
            rank_gallery(&Matrix::zeros(1, 2), &g),
            Err(Error::DimMismatch(_))
        ));
    }

    #[test]
    fn ranking_matches_full_sort() {
        let mut rng = Rng::new(31);
        let q = Matrix::new(5, 3, (0..15).map(|_| rng.normal()).collect()).unwrap();
        let g = Matrix::new(9, 3, (0..27).map(|_| rng.normal()).collect()).unwrap();
        let r = rank_gallery(&q, &g).unwrap();
        for (i, order) in r.iter().enumerate() {
            let mut pairs: Vec<(f64, usize)> = (0..9)
                .map(|j| ((0..3).map(|k| (q.get(i, k) - g.get(j, k)).powi(2)).sum(), j))
                .collect();
            pairs.sort_by(|a, b| a.partial_cmp(b).unwrap());
            assert_eq!(order, &pairs.iter().map(|p| p.1).collect::<Vec<_>>());
        }
    }

    #[test]
    fn ap_hand_cases() {
        assert_eq!(average_precision(&[true, false, false]).unwrap(), 1.0);
        let ap = average_precision(&[true, false, true, false, false]).unwrap();
        assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() <= 1e-12);
        assert!((ap - 0.8333).abs() < 1e-4);
        assert_eq!(average_precision(&[true; 4]).unwrap(), 1.0);
        assert!(matches!(average_precision(&[false, false]), Err(Error::NoRelevant)));
    }

    #[test]
    fn self_retrieval_of_separated_classes_is_perfect() {
        let f = Matrix::from_rows(&[[0.0, 0.0], [0.0, 0.1], [5.0, 5.0], [5.1, 5.0]]).unwrap();
        let labels = [0, 0, 1, 1];
        let opts = EvalOptions {
            exclude_self: true,
            ..EvalOptions::default()
        };
        let r = evaluate(&set(&f, &labels), &set(&f, &labels), &opts).unwrap();
        assert_eq!(r.map, 1.0);
        assert_eq!(r.cmc_at(1), 1.0);
        assert_eq!(r.num_queries, 4);
    }

    #[test]
    fn map_is_mean_of_query_aps() {
        // Query 0 hits at rank 1 (AP 1); query 1 at rank 2 only (AP 0.5).
        let g = Matrix::from_rows(&[[0.0], [1.0]]).unwrap();
        let gl = [0, 1];
        let q = Matrix::from_rows(&[[0.0], [0.1]]).unwrap();
        let ql = [0, 1];
        let r = evaluate(&set(&q, &ql), &set(&g, &gl), &EvalOptions::default()).unwrap();
        assert_eq!(r.map, 0.75);
        assert_eq!(r.cmc_at(1), 0.5);
        assert_eq!(r.cmc_at(5), 1.0);
    }

    #[test]
    fn queries_without_relevant_items_are_skipped() {
        let g = Matrix::from_rows(&[[0.0], [1.0]]).unwrap();
        let gl = [0, 0];
        let q = Matrix::from_rows(&[[0.0], [1.0]]).unwrap();
        let ql = [0, 7];
        let r = evaluate(&set(&q, &ql), &set(&g, &gl), &EvalOptions::default()).unwrap();
        assert_eq!(r.num_queries, 1);
        assert_eq!(r.map, 1.0);
    }

    #[test]
    fn same_camera_same_id_matches_are_excluded() {
        let g = Matrix::from_rows(&[[0.0], [0.5], [3.0]]).unwrap();
        let gl = [0, 1, 0];
        let gc = [0u32, 0, 1];
        let q = Matrix::from_rows(&[[0.0]]).unwrap();
        let ql = [0];
        let qc = [0u32];
        let query = RetrievalSet { features: &q, labels: &ql, cameras: Some(&qc) };
        let gallery = RetrievalSet { features: &g, labels: &gl, cameras: Some(&gc) };
        let r = evaluate(&query, &gallery, &EvalOptions::default()).unwrap();
        // Gallery 0 dropped; list is [1 (wrong), 2 (right)].
        assert_eq!(r.map, 0.5);
        let off = EvalOptions { exclude_same_camera: false, ..EvalOptions::default() };
        // Kept: [0 (right), 1 (wrong), 2 (right)] -> (1 + 2/3) / 2.
        let kept = evaluate(&query, &gallery, &off).unwrap().map;
        assert!((kept - 5.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn empty_splits_rejected() {
        let f = Matrix::zeros(0, 2);
        let g = Matrix::zeros(1, 2);
        assert!(matches!(
            evaluate(&set(&f, &[]), &set(&g, &[0]), &EvalOptions::default()),
            Err(Error::EmptySplit("query"))
        ));
        assert!(matches!(
            evaluate(&set(&g, &[0]), &set(&f, &[]), &EvalOptions::default()),
            Err(Error::EmptySplit("gallery"))
        ));
    }

    #[test]
    fn random_labels_sit_at_chance_level() {
        // Expected AP of a uniformly random ranking of G items with R relevant:
        // (1/G) * (H_G + (R-1)/(G-1) * (G - H_G)).
        let mut rng = Rng::new(12);
        let classes = 5;
        let g_count = 40;
        let g = Matrix::new(g_count, 4, (0..g_count * 4).map(|_| rng.normal()).collect()).unwrap();
        let gl: Vec<usize> = (0..g_count).map(|i| i % classes).collect();
        let q = Matrix::new(500, 4, (0..2000).map(|_| rng.normal()).collect()).unwrap();
        let ql: Vec<usize> = (0..500).map(|_| rng.below(classes)).collect();
        let ranking = rank_gallery(&q, &g).unwrap();
        let aps: Vec<f64> = ranking
            .iter()
            .enumerate()
            .map(|(i, o)| average_precision(&o.iter().map(|&j| gl[j] == ql[i]).collect::<Vec<_>>()).unwrap())
            .collect();
        let r = evaluate(&set(&q, &ql), &set(&g, &gl), &EvalOptions::default()).unwrap();
        let n = aps.len() as f64;
        let mean = aps.iter().sum::<f64>() / n;
        let sd = (aps.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        let big_g = g_count as f64;
        let rel = (g_count / classes) as f64;
        let h: f64 = (1..=g_count).map(|k| 1.0 / k as f64).sum();
        let chance = (h + (rel - 1.0) / (big_g - 1.0) * (big_g - h)) / big_g;
        assert!((r.map - chance).abs() <= 3.0 * sd / n.sqrt(), "{} vs {chance}", r.map);
    }

    /// AP as the mean of precision@k recomputed from scratch at each hit.
    fn brute_force_ap(rel: &[bool]) -> Option<f64> {
        let positions: Vec<usize> = (0..rel.len()).filter(|&k| rel[k]).collect();
        if positions.is_empty() {
            return None;
        }
        let total: f64 = positions
            .iter()
            .map(|&k| rel[..=k].iter().filter(|&&r| r).count() as f64 / (k + 1) as f64)
            .sum();
        Some(total / positions.len() as f64)
    }

    proptest! {
        #[test]
        fn ap_matches_brute_force(rel in proptest::collection::vec(any::<bool>(), 1..40)) {
            match (average_precision(&rel), brute_force_ap(&rel)) {
                (Ok(a), Some(b)) => prop_assert_eq!(a, b),
                (Err(Error::NoRelevant), None) => {}
                other => prop_assert!(false, "mismatch {:?}", other),
            }
        }

        #[test]
        fn cmc_is_monotone_and_bounded(seed in any::<u64>()) {
            let mut rng = Rng::new(seed);
            let g = Matrix::new(12, 3, (0..36).map(|_| rng.normal()).collect()).unwrap();
            let gl: Vec<usize> = (0..12).map(|i| i % 4).collect();
            let q = Matrix::new(6, 3, (0..18).map(|_| rng.normal()).collect()).unwrap();
            let ql: Vec<usize> = (0..6).map(|_| rng.below(4)).collect();
            let opts = EvalOptions { ranks: (1..=12).collect(), ..EvalOptions::default() };
            let r = evaluate(&set(&q, &ql), &set(&g, &gl), &opts).unwrap();
            let values: Vec<f64> = r.cmc.values().copied().collect();
            prop_assert!(values.windows(2).all(|w| w[0] <= w[1]));
            prop_assert_eq!(values[values.len() - 1], 1.0);
            prop_assert!((0.0..=1.0).contains(&r.map));
        }

        #[test]
        fn map_ignores_gallery_order(seed in any::<u64>()) {
            let mut rng = Rng::new(seed);
            let g = Matrix::new(10, 2, (0..20).map(|_| rng.normal()).collect()).unwrap();
            let gl: Vec<usize> = (0..10).map(|i| i % 3).collect();
            let q = Matrix::new(4, 2, (0..8).map(|_| rng.normal()).collect()).unwrap();
            let ql: Vec<usize> = (0..4).map(|_| rng.below(3)).collect();
            let perm = rng.permutation(10);
            let gp = g.select_rows(&perm);
            let glp: Vec<usize> = perm.iter().map(|&i| gl[i]).collect();
            let a = evaluate(&set(&q, &ql), &set(&g, &gl), &EvalOptions::default()).unwrap();
            let b = evaluate(&set(&q, &ql), &set(&gp, &glp), &EvalOptions::default()).unwrap();
            prop_assert!((a.map - b.map).abs() <= 1e-12);
        }
    }
}
