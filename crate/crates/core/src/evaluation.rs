//! Retrieval evaluation: mAP and CMC with same-identity/same-camera gallery
//! filtering, feature archives and rank-list export.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::archive::Archive;
use crate::error::{DemoError, Result};
use crate::parallel;
use crate::render;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Metric {
    Euclidean,
    Cosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalOptions {
    pub metric: Metric,
    /// L2-normalize features before measuring distances.
    pub normalize: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            metric: Metric::Euclidean,
            normalize: true,
        }
    }
}

/// Row features with identity and camera labels.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub features: Vec<Vec<f64>>,
    pub ids: Vec<usize>,
    pub cams: Vec<usize>,
}

impl FeatureSet {
    pub fn new(features: Vec<Vec<f64>>, ids: Vec<usize>, cams: Vec<usize>) -> Result<Self> {
        if features.len() != ids.len() || ids.len() != cams.len() {
            return Err(DemoError::Input("features, ids and cams differ in length".into()));
        }
        let d = features.first().map_or(0, |f| f.len());
        if features.iter().any(|f| f.len() != d) {
            return Err(DemoError::Input("features differ in width".into()));
        }
        Ok(FeatureSet { features, ids, cams })
    }

    pub fn from_tensor(t: &Tensor, ids: Vec<usize>, cams: Vec<usize>) -> Result<Self> {
        let rows = (0..t.rows()).map(|r| t.row(0, r).to_vec()).collect();
        Self::new(rows, ids, cams)
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.first().map_or(0, |f| f.len())
    }

    pub fn select(&self, idx: &[usize]) -> FeatureSet {
        FeatureSet {
            features: idx.iter().map(|&i| self.features[i].clone()).collect(),
            ids: idx.iter().map(|&i| self.ids[i]).collect(),
            cams: idx.iter().map(|&i| self.cams[i]).collect(),
        }
    }

    pub fn to_archive(&self) -> Archive {
        let mut a = Archive::new();
        a.insert_f64("features", vec![self.len(), self.dim()], self.features.concat());
        a.insert_i64("ids", self.ids.iter().map(|&x| x as i64).collect());
        a.insert_i64("cams", self.cams.iter().map(|&x| x as i64).collect());
        a
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        let t = a.tensor("features")?;
        let conv = |name: &str| -> Result<Vec<usize>> {
            a.i64s(name)?
                .iter()
                .map(|&x| usize::try_from(x).map_err(|_| DemoError::Checkpoint(format!("negative {name} entry"))))
                .collect()
        };
        FeatureSet::from_tensor(&t, conv("ids")?, conv("cams")?)
            .map_err(|e| DemoError::Checkpoint(format!("feature archive: {e}")))
    }
}

fn l2_normalize(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.iter().map(|x| x / n).collect()
}

/// Query x gallery distance matrix, row-major.
pub fn distance_matrix(query: &FeatureSet, gallery: &FeatureSet, opts: &EvalOptions) -> Result<Vec<Vec<f64>>> {
    if query.dim() != gallery.dim() {
        return Err(DemoError::Evaluation(format!(
            "query dim {} differs from gallery dim {}",
            query.dim(),
            gallery.dim()
        )));
    }
    let prep = |s: &FeatureSet| -> Vec<Vec<f64>> {
        if opts.normalize {
            s.features.iter().map(|f| l2_normalize(f)).collect()
        } else {
            s.features.clone()
        }
    };
    let (q, g) = (prep(query), prep(gallery));
    Ok(parallel::map_slice(&q, |qf| {
        g.iter()
            .map(|gf| match opts.metric {
                Metric::Euclidean => qf.iter().zip(gf).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt(),
                Metric::Cosine => {
                    let dot: f64 = qf.iter().zip(gf).map(|(a, b)| a * b).sum();
                    let na = qf.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                    let nb = gf.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                    1.0 - dot / (na * nb)
                }
            })
            .collect()
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryOutcome {
    /// Gallery indices after filtering, nearest first.
    pub ranking: Vec<usize>,
    /// `None` when the query had no valid positive.
    pub ap: Option<f64>,
    /// 0-based rank of the first correct match.
    pub first_hit: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub queries: Vec<QueryOutcome>,
    pub map: f64,
    /// `cmc[k]` is the fraction of valid queries with a hit in the top `k + 1`.
    pub cmc: Vec<f64>,
    pub valid_queries: usize,
    pub skipped_queries: usize,
}

impl RetrievalResult {
    pub fn rank(&self, k: usize) -> f64 {
        if self.cmc.is_empty() || k == 0 {
            return 0.0;
        }
        self.cmc[(k - 1).min(self.cmc.len() - 1)]
    }

    pub fn to_table(&self) -> String {
        let mut s = String::from("metric\tvalue\n");
        s.push_str(&format!("mAP\t{:.6}\n", self.map));
        for k in [1, 5, 10] {
            s.push_str(&format!("Rank-{k}\t{:.6}\n", self.rank(k)));
        }
        s.push_str(&format!("valid_queries\t{}\n", self.valid_queries));
        s.push_str(&format!("skipped_queries\t{}\n", self.skipped_queries));
        s
    }

    pub fn summary_json(&self) -> String {
        serde_json::json!({
            "mAP": self.map,
            "rank1": self.rank(1),
            "rank5": self.rank(5),
            "rank10": self.rank(10),
            "valid_queries": self.valid_queries,
            "skipped_queries": self.skipped_queries,
        })
        .to_string()
    }
}

/// Evaluate from a precomputed query x gallery distance matrix.
pub fn evaluate_distances(
    dist: &[Vec<f64>],
    q_ids: &[usize],
    q_cams: &[usize],
    g_ids: &[usize],
    g_cams: &[usize],
) -> Result<RetrievalResult> {
    if dist.len() != q_ids.len() || q_ids.len() != q_cams.len() || g_ids.len() != g_cams.len() {
        return Err(DemoError::Evaluation("label arrays do not match the distance matrix".into()));
    }
    if dist.iter().any(|row| row.len() != g_ids.len()) {
        return Err(DemoError::Evaluation("distance rows do not match the gallery".into()));
    }
    let idx: Vec<usize> = (0..dist.len()).collect();
    let queries: Vec<QueryOutcome> = parallel::map_slice(&idx, |&q| {
        let mut ranking: Vec<usize> = (0..g_ids.len())
            .filter(|&j| !(g_ids[j] == q_ids[q] && g_cams[j] == q_cams[q]))
            .collect();
        ranking.sort_by(|&a, &b| dist[q][a].total_cmp(&dist[q][b]).then(a.cmp(&b)));
        let mut hits = 0usize;
        let mut precision_sum = 0.0;
        let mut first_hit = None;
        for (r, &j) in ranking.iter().enumerate() {
            if g_ids[j] == q_ids[q] {
                hits += 1;
                precision_sum += hits as f64 / (r + 1) as f64;
                first_hit.get_or_insert(r);
            }
        }
        QueryOutcome {
            ap: (hits > 0).then(|| precision_sum / hits as f64),
            first_hit,
            ranking,
        }
    });
    if queries.iter().all(|q| q.ranking.is_empty()) {
        return Err(DemoError::Evaluation("gallery is empty after filtering for every query".into()));
    }
    let valid: Vec<&QueryOutcome> = queries.iter().filter(|q| q.ap.is_some()).collect();
    if valid.is_empty() {
        return Err(DemoError::Evaluation("no query has a valid positive in the gallery".into()));
    }
    let n = valid.len() as f64;
    let map = valid.iter().map(|q| q.ap.unwrap()).sum::<f64>() / n;
    let mut cmc = vec![0.0; g_ids.len()];
    for q in &valid {
        let r = q.first_hit.expect("valid query has a hit");
        for c in cmc.iter_mut().skip(r) {
            *c += 1.0;
        }
    }
    cmc.iter_mut().for_each(|c| *c /= n);
    Ok(RetrievalResult {
        map,
        cmc,
        valid_queries: valid.len(),
        skipped_queries: queries.len() - valid.len(),
        queries,
    })
}

pub fn evaluate(query: &FeatureSet, gallery: &FeatureSet, opts: &EvalOptions) -> Result<RetrievalResult> {
    let d = distance_matrix(query, gallery, opts)?;
    evaluate_distances(&d, &query.ids, &query.cams, &gallery.ids, &gallery.cams)
}

/// What a rank-list grid shows.
#[derive(Debug, Clone, PartialEq)]
pub struct RankListSummary {
    pub tiles: usize,
    pub matches: Vec<bool>,
}

/// Write a grid of the query image followed by its top `top_k` gallery
/// images, correct matches framed green and wrong ones red.
#[allow(clippy::too_many_arguments)]
pub fn export_rank_list(
    result: &RetrievalResult,
    query: usize,
    top_k: usize,
    query_path: &Path,
    query_id: usize,
    gallery_paths: &[PathBuf],
    gallery_ids: &[usize],
    out: &Path,
) -> Result<RankListSummary> {
    let q = result
        .queries
        .get(query)
        .ok_or_else(|| DemoError::Export(format!("query {query} out of range")))?;
    let shown: Vec<usize> = q.ranking.iter().take(top_k).copied().collect();
    let mut tiles = vec![(query_path.to_path_buf(), render::Frame::Query)];
    let mut matches = Vec::with_capacity(shown.len());
    for &j in &shown {
        let path = gallery_paths
            .get(j)
            .ok_or_else(|| DemoError::Export(format!("gallery index {j} has no image path")))?;
        let ok = gallery_ids[j] == query_id;
        matches.push(ok);
        tiles.push((path.clone(), if ok { render::Frame::Match } else { render::Frame::Mismatch }));
    }
    let img = render::tile_row(&tiles)?;
    render::save_png(&img, out)?;
    Ok(RankListSummary {
        tiles: tiles.len(),
        matches,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn hand_ap_pattern() {
        // ranking relevance [1, 0, 1, 0]
        let d = vec![vec![0.1, 0.2, 0.3, 0.4]];
        let r = evaluate_distances(&d, &[1], &[0], &[1, 2, 1, 3], &[1, 1, 1, 1]).unwrap();
        assert!((r.map - 0.5 * (1.0 + 2.0 / 3.0)).abs() < 1e-12);
        assert_eq!(r.rank(1), 1.0);
    }

    #[test]
    fn first_match_at_rank_three() {
        let d = vec![vec![0.1, 0.2, 0.3, 0.4, 0.5]];
        let r = evaluate_distances(&d, &[7], &[0], &[1, 2, 7, 3, 4], &[1; 5]).unwrap();
        assert_eq!(r.rank(1), 0.0);
        assert_eq!(r.rank(3), 1.0);
        assert_eq!(r.rank(5), 1.0);
    }

    #[test]
    fn copies_at_other_cameras_are_perfect() {
        let mut init = crate::params::Init::new(0);
        let feats: Vec<Vec<f64>> = (0..6).map(|_| init.normal([1, 1, 4], 1.0).into_vec()).collect();
        let q = FeatureSet::new(feats.clone(), (0..6).collect(), vec![0; 6]).unwrap();
        let g = FeatureSet::new(feats, (0..6).collect(), vec![1; 6]).unwrap();
        let r = evaluate(&q, &g, &EvalOptions::default()).unwrap();
        assert_eq!(r.map, 1.0);
        assert_eq!(r.rank(1), 1.0);
    }

    #[test]
    fn same_id_same_camera_is_filtered() {
        let d = vec![vec![0.0, 0.5]];
        let r = evaluate_distances(&d, &[1], &[2], &[1, 1], &[2, 3]).unwrap();
        assert_eq!(r.queries[0].ranking, vec![1]);
        assert_eq!(r.map, 1.0);
    }

    #[test]
    fn queries_without_positives_are_skipped() {
        let d = vec![vec![0.1, 0.2], vec![0.3, 0.1]];
        let r = evaluate_distances(&d, &[1, 9], &[0, 0], &[1, 2], &[1, 1]).unwrap();
        assert_eq!((r.valid_queries, r.skipped_queries), (1, 1));
        assert_eq!(r.map, 1.0);
    }

    #[test]
    fn fully_filtered_gallery_is_error() {
        let d = vec![vec![0.1]];
        assert!(matches!(
            evaluate_distances(&d, &[1], &[1], &[1], &[1]),
            Err(DemoError::Evaluation(_))
        ));
    }

    #[test]
    fn feature_archive_round_trip() {
        let fs = FeatureSet::new(vec![vec![1.0, 2.0], vec![3.0, 4.0]], vec![5, 6], vec![1, 2]).unwrap();
        let back = FeatureSet::from_archive(&Archive::from_bytes(&fs.to_archive().to_bytes()).unwrap()).unwrap();
        assert_eq!(fs, back);
    }

    fn random_case() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<usize>, Vec<usize>, Vec<usize>, Vec<usize>)> {
        (1usize..8, 2usize..20).prop_flat_map(|(nq, ng)| {
            (
                proptest::collection::vec(proptest::collection::vec(0.0f64..10.0, ng), nq),
                proptest::collection::vec(0usize..4, nq),
                proptest::collection::vec(0usize..3, nq),
                proptest::collection::vec(0usize..4, ng),
                proptest::collection::vec(0usize..3, ng),
            )
        })
    }

    proptest! {
        #[test]
        fn cmc_monotone_and_bounded((d, qi, qc, gi, gc) in random_case()) {
            if let Ok(r) = evaluate_distances(&d, &qi, &qc, &gi, &gc) {
                prop_assert!(r.cmc.windows(2).all(|w| w[0] <= w[1]));
                prop_assert!(r.cmc.iter().all(|&c| (0.0..=1.0).contains(&c)));
                prop_assert!((0.0..=1.0).contains(&r.map));
            }
        }

        #[test]
        fn squaring_distances_keeps_metrics((d, qi, qc, gi, gc) in random_case()) {
            let sq: Vec<Vec<f64>> = d.iter().map(|r| r.iter().map(|x| x * x).collect()).collect();
            let a = evaluate_distances(&d, &qi, &qc, &gi, &gc);
            let b = evaluate_distances(&sq, &qi, &qc, &gi, &gc);
            match (a, b) {
                (Ok(a), Ok(b)) => {
                    prop_assert_eq!(a.map, b.map);
                    prop_assert_eq!(a.cmc, b.cmc);
                }
                (Err(_), Err(_)) => {}
                _ => prop_assert!(false, "outcomes differ"),
            }
        }
    }
}
