//! Scoring: region-to-text exact match, text-to-region greedy IoU matching
//! with dataset-level F1, and the overall mean of both directions.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapters::ParsedPrediction;
use crate::bench::{BenchQuery, Direction};
use crate::geometry::{iou, Box};
use crate::textnorm::normalize_r2t;

/// IoU a predicted box must reach to count as a hit.
pub const DEFAULT_IOU_THRESHOLD: f64 = 0.5;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("duplicate query id `{0}`")]
    DuplicateQueryId(String),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct T2RCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl std::ops::AddAssign for T2RCounts {
    fn add_assign(&mut self, o: Self) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
    }
}

/// Exact match after normalizing both sides. Failed parses never match.
pub fn score_r2t(pred: &ParsedPrediction, gt: &str) -> bool {
    match (&pred.text, pred.parse_ok) {
        (Some(text), true) => normalize_r2t(text) == normalize_r2t(gt),
        _ => false,
    }
}

fn canonical_order(boxes: &[Box]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| boxes[a].total_cmp(&boxes[b]).then(a.cmp(&b)));
    order
}

/// Greedy one-to-one matching. Candidate pairs with IoU at or above `thr` are
/// taken in descending IoU order; ties go to the lower `(pred, gt)` position
/// after both lists are sorted by coordinates, so the result does not depend
/// on input order. Returns `(pred_index, gt_index)` in original indices.
pub fn match_t2r_pairs(pred: &[Box], gt: &[Box], thr: f64) -> Vec<(usize, usize)> {
    let po = canonical_order(pred);
    let go = canonical_order(gt);
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for (pi, &p) in po.iter().enumerate() {
        for (gi, &g) in go.iter().enumerate() {
            let v = iou(&pred[p], &gt[g]);
            if v >= thr {
                pairs.push((v, pi, gi));
            }
        }
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut used_p = vec![false; pred.len()];
    let mut used_g = vec![false; gt.len()];
    let mut out = Vec::new();
    for (_, pi, gi) in pairs {
        if used_p[pi] || used_g[gi] {
            continue;
        }
        used_p[pi] = true;
        used_g[gi] = true;
        out.push((po[pi], go[gi]));
    }
    out
}

pub fn match_t2r(pred: &[Box], gt: &[Box], thr: f64) -> T2RCounts {
    let tp = match_t2r_pairs(pred, gt, thr).len() as u64;
    T2RCounts {
        tp,
        fp: pred.len() as u64 - tp,
        fn_: gt.len() as u64 - tp,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Outcome {
    R2T { correct: bool },
    T2R(T2RCounts),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    pub query_id: String,
    pub category: String,
    pub outcome: Outcome,
}

/// Scores one benchmark query against its parsed prediction.
pub fn score_query(q: &BenchQuery, pred: &ParsedPrediction, thr: f64) -> QueryResult {
    let outcome = match q.direction {
        Direction::R2T => Outcome::R2T {
            correct: score_r2t(pred, q.r2t_target.as_deref().unwrap_or_default()),
        },
        Direction::T2R => Outcome::T2R(match_t2r(
            &pred.boxes,
            q.t2r_targets.as_deref().unwrap_or_default(),
            thr,
        )),
    };
    QueryResult {
        query_id: q.query_id.clone(),
        category: q.category.to_string(),
        outcome,
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Counts {
    pub r2t_queries: u64,
    pub r2t_correct: u64,
    pub t2r_queries: u64,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl Counts {
    fn add(&mut self, o: &Outcome) {
        match o {
            Outcome::R2T { correct } => {
                self.r2t_queries += 1;
                self.r2t_correct += u64::from(*correct);
            }
            Outcome::T2R(c) => {
                self.t2r_queries += 1;
                self.tp += c.tp;
                self.fp += c.fp;
                self.fn_ += c.fn_;
            }
        }
    }
}

/// Percentages in `[0, 100]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub acc_r2t: f64,
    pub precision_t2r: f64,
    pub recall_t2r: f64,
    pub f1_t2r: f64,
    pub overall: f64,
    /// No region-to-text queries were scored; `acc_r2t` counts as 0.
    pub r2t_missing: bool,
    /// No text-to-region queries were scored; `f1_t2r` counts as 0.
    pub t2r_missing: bool,
    pub counts: Counts,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Mean of both directions with an absent direction scored as 0.
pub fn overall_score(acc_r2t: Option<f64>, f1_t2r: Option<f64>) -> f64 {
    (acc_r2t.unwrap_or(0.0) + f1_t2r.unwrap_or(0.0)) / 2.0
}

impl Scores {
    pub fn from_counts(c: Counts) -> Self {
        let acc = 100.0 * ratio(c.r2t_correct, c.r2t_queries);
        let p = ratio(c.tp, c.tp + c.fp);
        let r = ratio(c.tp, c.tp + c.fn_);
        let f1 = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
        let r2t_missing = c.r2t_queries == 0;
        let t2r_missing = c.t2r_queries == 0;
        Scores {
            acc_r2t: acc,
            precision_t2r: 100.0 * p,
            recall_t2r: 100.0 * r,
            f1_t2r: 100.0 * f1,
            overall: overall_score((!r2t_missing).then_some(acc), (!t2r_missing).then_some(100.0 * f1)),
            r2t_missing,
            t2r_missing,
            counts: c,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(flatten)]
    pub scores: Scores,
    pub per_category: BTreeMap<String, Scores>,
}

/// Pools counts over all queries and per category.
pub fn aggregate(records: &[QueryResult]) -> Result<EvalReport, EvalError> {
    let mut seen = HashSet::with_capacity(records.len());
    let mut total = Counts::default();
    let mut per_cat: BTreeMap<String, Counts> = BTreeMap::new();
    for r in records {
        if !seen.insert(r.query_id.as_str()) {
            return Err(EvalError::DuplicateQueryId(r.query_id.clone()));
        }
        total.add(&r.outcome);
        per_cat.entry(r.category.clone()).or_default().add(&r.outcome);
    }
    Ok(EvalReport {
        scores: Scores::from_counts(total),
        per_category: per_cat.into_iter().map(|(k, c)| (k, Scores::from_counts(c))).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::ParseFailure;
    use crate::rng::Pcg32;
    use proptest::prelude::*;

    fn bx(a: f64, b: f64, c: f64, d: f64) -> Box {
        Box::new(a, b, c, d).unwrap()
    }

    fn text_pred(t: &str) -> ParsedPrediction {
        ParsedPrediction {
            query_id: "q".into(),
            boxes: vec![],
            text: Some(t.into()),
            parse_ok: true,
            failure: None,
        }
    }

    #[test]
    fn r2t_examples() {
        assert!(score_r2t(&text_pred("  Hello   World "), "Hello World"));
        assert!(score_r2t(&text_pred("KS-SYSTEM"), "KS-SYSTEM"));
        assert!(!score_r2t(&text_pred("ks-system"), "KS-SYSTEM"));
        assert!(!score_r2t(
            &ParsedPrediction::failed("q", ParseFailure::InvalidJson),
            "x"
        ));
    }

    #[test]
    fn t2r_examples() {
        let gt = vec![bx(0., 0., 10., 10.), bx(100., 100., 110., 110.)];
        assert_eq!(match_t2r(&gt, &gt, 0.5), T2RCounts { tp: 2, fp: 0, fn_: 0 });
        // one pred overlaps the first GT at IoU 0.6; the others miss.
        // [0,0,10,10] vs [0,0,10,6]: inter 60, union 100.
        let pred = vec![bx(0., 0., 10., 6.), bx(50., 50., 60., 60.), bx(200., 0., 210., 10.)];
        assert!((iou(&pred[0], &gt[0]) - 0.6).abs() < 1e-12);
        assert_eq!(match_t2r(&pred, &gt, 0.5), T2RCounts { tp: 1, fp: 2, fn_: 1 });
        assert_eq!(match_t2r(&[], &gt, 0.5), T2RCounts { tp: 0, fp: 0, fn_: 2 });
    }

    #[test]
    fn greedy_prefers_highest_iou() {
        // pred 0 overlaps both GT; greedy gives it the better one and leaves
        // pred 1 to take the other.
        let gt = vec![bx(0., 0., 10., 10.), bx(2., 0., 12., 10.)];
        let pred = vec![bx(1., 0., 11., 10.), bx(0., 0., 10., 10.)];
        let pairs = match_t2r_pairs(&pred, &gt, 0.5);
        assert_eq!(pairs.len(), 2);
        assert!(pairs.contains(&(1, 0)));
        assert!(pairs.contains(&(0, 1)));
    }

    #[test]
    fn threshold_is_inclusive() {
        let gt = vec![bx(0., 0., 10., 10.)];
        // inter 50, union 100: exactly 0.5
        let pred = vec![bx(0., 0., 10., 5.)];
        assert_eq!(match_t2r(&pred, &gt, 0.5).tp, 1);
    }

    #[test]
    fn aggregate_examples() {
        let rec = |id: &str, tp, fp, fn_| QueryResult {
            query_id: id.into(),
            category: "SceneText".into(),
            outcome: Outcome::T2R(T2RCounts { tp, fp, fn_ }),
        };
        let r = aggregate(&[rec("a", 1, 2, 1)]).unwrap();
        assert!((r.scores.precision_t2r - 100.0 / 3.0).abs() < 1e-12);
        assert!((r.scores.recall_t2r - 50.0).abs() < 1e-12);
        assert!((r.scores.f1_t2r - 40.0).abs() < 1e-12);
        assert!(r.scores.r2t_missing);
        assert!((r.scores.overall - 20.0).abs() < 1e-12);

        let empty = aggregate(&[]).unwrap();
        assert_eq!(empty.scores.overall, 0.0);
        assert_eq!(empty.scores.f1_t2r, 0.0);
        assert!(empty.per_category.is_empty());

        assert_eq!(
            aggregate(&[rec("a", 1, 0, 0), rec("a", 1, 0, 0)]),
            Err(EvalError::DuplicateQueryId("a".into()))
        );
    }

    #[test]
    fn f1_only_model_overall() {
        assert_eq!(overall_score(None, Some(11.66)), 5.83);
        assert_eq!(overall_score(Some(50.64), Some(40.36)), 45.5);
    }

    #[test]
    fn zero_tp_no_predictions_is_zero_f1() {
        let s = Scores::from_counts(Counts {
            t2r_queries: 3,
            fn_: 5,
            ..Counts::default()
        });
        assert_eq!(s.f1_t2r, 0.0);
        assert_eq!(s.precision_t2r, 0.0);
    }

    #[test]
    fn per_category_breakdown() {
        let recs = vec![
            QueryResult {
                query_id: "1".into(),
                category: "A".into(),
                outcome: Outcome::R2T { correct: true },
            },
            QueryResult {
                query_id: "2".into(),
                category: "A".into(),
                outcome: Outcome::R2T { correct: false },
            },
            QueryResult {
                query_id: "3".into(),
                category: "B".into(),
                outcome: Outcome::T2R(T2RCounts { tp: 1, fp: 0, fn_: 0 }),
            },
        ];
        let r = aggregate(&recs).unwrap();
        assert_eq!(r.per_category["A"].acc_r2t, 50.0);
        assert!(r.per_category["A"].t2r_missing);
        assert_eq!(r.per_category["A"].overall, 25.0);
        assert_eq!(r.per_category["B"].overall, 50.0);
        assert_eq!(r.scores.overall, 75.0);
    }

    /// Independent oracle: repeatedly scan every unmatched pair for the best
    /// remaining one, using the same IoU-then-position order.
    fn exhaustive_greedy_tp(pred: &[Box], gt: &[Box], thr: f64) -> u64 {
        let rank = |bs: &[Box]| -> Vec<usize> {
            // rank[i] = position of box i in coordinate order
            let mut r = vec![0; bs.len()];
            for i in 0..bs.len() {
                r[i] = (0..bs.len())
                    .filter(|&j| bs[j].total_cmp(&bs[i]).then(j.cmp(&i)).is_lt())
                    .count();
            }
            r
        };
        let (pr, gr) = (rank(pred), rank(gt));
        let mut up = vec![false; pred.len()];
        let mut ug = vec![false; gt.len()];
        let mut tp = 0;
        loop {
            let mut best: Option<(f64, usize, usize)> = None;
            for i in 0..pred.len() {
                for j in 0..gt.len() {
                    if up[i] || ug[j] {
                        continue;
                    }
                    let v = iou(&pred[i], &gt[j]);
                    if v < thr {
                        continue;
                    }
                    let better = match best {
                        None => true,
                        Some((bv, bi, bj)) => v > bv || (v == bv && (pr[i], gr[j]) < (pr[bi], gr[bj])),
                    };
                    if better {
                        best = Some((v, i, j));
                    }
                }
            }
            match best {
                Some((_, i, j)) => {
                    up[i] = true;
                    ug[j] = true;
                    tp += 1;
                }
                None => return tp,
            }
        }
    }

    fn random_boxes(rng: &mut Pcg32, n: usize) -> Vec<Box> {
        (0..n)
            .map(|_| {
                // coarse grid so exact ties and duplicates occur
                let x = rng.below(6) as f64 * 2.0;
                let y = rng.below(6) as f64 * 2.0;
                let w = 2.0 + rng.below(6) as f64 * 2.0;
                let h = 2.0 + rng.below(6) as f64 * 2.0;
                bx(x, y, x + w, y + h)
            })
            .collect()
    }

    #[test]
    fn greedy_matches_exhaustive_oracle() {
        let mut rng = Pcg32::seed_from(2024);
        for _ in 0..10_000 {
            let np = rng.below_usize(6);
            let ng = rng.below_usize(6);
            let pred = random_boxes(&mut rng, np);
            let gt = random_boxes(&mut rng, ng);
            assert_eq!(
                match_t2r(&pred, &gt, 0.5).tp,
                exhaustive_greedy_tp(&pred, &gt, 0.5),
                "{pred:?} {gt:?}"
            );
        }
    }

    fn arb_boxes(max: usize) -> impl Strategy<Value = Vec<Box>> {
        prop::collection::vec((0u8..8, 0u8..8, 1u8..6, 1u8..6), 0..max).prop_map(|v| {
            v.into_iter()
                .map(|(x, y, w, h)| bx(x as f64, y as f64, (x + w) as f64, (y + h) as f64))
                .collect()
        })
    }

    proptest! {
        #[test]
        fn matching_invariants(pred in arb_boxes(8), gt in arb_boxes(8), extra in arb_boxes(2)) {
            let pairs = match_t2r_pairs(&pred, &gt, 0.5);
            let c = match_t2r(&pred, &gt, 0.5);
            prop_assert_eq!(c.tp + c.fn_, gt.len() as u64);
            prop_assert_eq!(c.tp + c.fp, pred.len() as u64);
            let ps: HashSet<_> = pairs.iter().map(|p| p.0).collect();
            let gs: HashSet<_> = pairs.iter().map(|p| p.1).collect();
            prop_assert_eq!(ps.len(), pairs.len());
            prop_assert_eq!(gs.len(), pairs.len());
            for &(p, g) in &pairs {
                prop_assert!(iou(&pred[p], &gt[g]) >= 0.5);
            }
            // permutation invariance
            let mut rp = pred.clone();
            rp.reverse();
            let mut rg = gt.clone();
            rg.rotate_left(gt.len() / 2);
            prop_assert_eq!(match_t2r(&rp, &rg, 0.5), c);
            // adding predictions never lowers tp or tp + fp
            let mut more = pred.clone();
            more.extend(extra);
            let m = match_t2r(&more, &gt, 0.5);
            prop_assert!(m.tp + m.fp >= c.tp + c.fp);
        }
    }
}
