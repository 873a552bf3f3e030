//! Two-engine pseudo-label agreement for scene text.
//!
//! Engine outputs for one image are paired by mutual-best IoU; paired
//! instances with equal transcripts (after whitespace normalization) are
//! agreed, the rest go to an adjudication queue that an external judge fills
//! in offline.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{iou, Box, ImageSize};
use crate::records::TextItem;
use crate::textnorm::normalize_ws;

pub const DEFAULT_MATCH_IOU: f64 = 0.7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EngineId {
    A,
    B,
}

/// Which box an agreed instance keeps.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeometryPolicy {
    #[default]
    EngineA,
    Union,
    Intersection,
}

impl GeometryPolicy {
    pub fn resolve(self, a: &Box, b: &Box) -> Box {
        match self {
            GeometryPolicy::EngineA => *a,
            GeometryPolicy::Union => a.union_hull(b),
            // pairs are matched at IoU >= thr > 0, so the overlap exists
            GeometryPolicy::Intersection => a.intersection(b).unwrap_or(*a),
        }
    }
}

impl std::str::FromStr for GeometryPolicy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "engine_a" => Ok(GeometryPolicy::EngineA),
            "union" => Ok(GeometryPolicy::Union),
            "intersection" => Ok(GeometryPolicy::Intersection),
            _ => Err(format!("unknown geometry policy `{s}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DiscardReason {
    NoMutualMatch,
    LowIoU,
}

/// Index of the best-overlapping box, lowest index on ties; `None` when
/// nothing overlaps at all.
fn argmax_iou<'a>(b: &Box, others: impl Iterator<Item = &'a Box>) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (j, o) in others.enumerate() {
        let v = iou(b, o);
        if v > 0.0 && best.is_none_or(|(_, bv)| v > bv) {
            best = Some((j, v));
        }
    }
    best
}

/// Pairs `(i, j)` where each box is the other's IoU argmax. The IoU of each
/// pair is returned so callers can apply a threshold.
pub fn mutual_best_pairs(a: &[Box], b: &[Box]) -> Vec<(usize, usize, f64)> {
    let best_b: Vec<Option<(usize, f64)>> = b.iter().map(|bj| argmax_iou(bj, a.iter())).collect();
    let mut out = Vec::new();
    for (i, ai) in a.iter().enumerate() {
        if let Some((j, v)) = argmax_iou(ai, b.iter()) {
            if best_b[j].map(|x| x.0) == Some(i) {
                out.push((i, j, v));
            }
        }
    }
    out
}

/// Mutual-best pairs with IoU at or above `thr`, in ascending `i`.
pub fn mutual_best_match(a: &[Box], b: &[Box], thr: f64) -> Vec<(usize, usize)> {
    mutual_best_pairs(a, b)
        .into_iter()
        .filter(|&(_, _, v)| v >= thr)
        .map(|(i, j, _)| (i, j))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisputedPair {
    pub index_a: usize,
    pub index_b: usize,
    pub bbox_a: Box,
    pub bbox_b: Box,
    pub text_a: String,
    pub text_b: String,
    pub iou: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Discarded {
    pub engine: EngineId,
    pub index: usize,
    pub reason: DiscardReason,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConsensusStats {
    pub instances_a: u64,
    pub instances_b: u64,
    pub agreed_pairs: u64,
    pub disputed_pairs: u64,
    pub no_mutual_match: u64,
    pub low_iou: u64,
}

impl std::ops::AddAssign for ConsensusStats {
    fn add_assign(&mut self, o: Self) {
        self.instances_a += o.instances_a;
        self.instances_b += o.instances_b;
        self.agreed_pairs += o.agreed_pairs;
        self.disputed_pairs += o.disputed_pairs;
        self.no_mutual_match += o.no_mutual_match;
        self.low_iou += o.low_iou;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConsensusResult {
    pub agreed: Vec<TextItem>,
    pub disputed: Vec<DisputedPair>,
    pub discarded: Vec<Discarded>,
}

impl ConsensusResult {
    pub fn stats(&self, n_a: usize, n_b: usize) -> ConsensusStats {
        let count = |r| self.discarded.iter().filter(|d| d.reason == r).count() as u64;
        ConsensusStats {
            instances_a: n_a as u64,
            instances_b: n_b as u64,
            agreed_pairs: self.agreed.len() as u64,
            disputed_pairs: self.disputed.len() as u64,
            no_mutual_match: count(DiscardReason::NoMutualMatch),
            low_iou: count(DiscardReason::LowIoU),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConsensusConfig {
    pub iou_threshold: f64,
    pub geometry: GeometryPolicy,
}

impl Default for ConsensusConfig {
    fn default() -> Self {
        ConsensusConfig {
            iou_threshold: DEFAULT_MATCH_IOU,
            geometry: GeometryPolicy::EngineA,
        }
    }
}

pub fn consensus(a: &[TextItem], b: &[TextItem], cfg: &ConsensusConfig) -> ConsensusResult {
    let ba: Vec<Box> = a.iter().map(|x| x.bbox).collect();
    let bb: Vec<Box> = b.iter().map(|x| x.bbox).collect();
    let mut state_a: Vec<Option<DiscardReason>> = vec![Some(DiscardReason::NoMutualMatch); a.len()];
    let mut state_b = vec![Some(DiscardReason::NoMutualMatch); b.len()];
    let mut agreed = Vec::new();
    let mut disputed = Vec::new();
    for (i, j, v) in mutual_best_pairs(&ba, &bb) {
        if v < cfg.iou_threshold {
            state_a[i] = Some(DiscardReason::LowIoU);
            state_b[j] = Some(DiscardReason::LowIoU);
            continue;
        }
        state_a[i] = None;
        state_b[j] = None;
        if normalize_ws(&a[i].text) == normalize_ws(&b[j].text) {
            agreed.push(TextItem::new(cfg.geometry.resolve(&ba[i], &bb[j]), a[i].text.clone()));
        } else {
            disputed.push(DisputedPair {
                index_a: i,
                index_b: j,
                bbox_a: ba[i],
                bbox_b: bb[j],
                text_a: a[i].text.clone(),
                text_b: b[j].text.clone(),
                iou: v,
            });
        }
    }
    let mut discarded = Vec::new();
    for (engine, states) in [(EngineId::A, &state_a), (EngineId::B, &state_b)] {
        for (index, s) in states.iter().enumerate() {
            if let Some(reason) = *s {
                discarded.push(Discarded { engine, index, reason });
            }
        }
    }
    ConsensusResult {
        agreed,
        disputed,
        discarded,
    }
}

/// One line of the adjudication queue. `verdict` is blank (`null`) on export
/// and filled in by the judge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueueEntry {
    pub id: String,
    pub image: String,
    pub width: u32,
    pub height: u32,
    /// Box the resolved instance will carry (per the geometry policy).
    pub bbox: Box,
    pub bbox_a: Box,
    pub bbox_b: Box,
    pub text_a: String,
    pub text_b: String,
    pub iou: f64,
    #[serde(default)]
    pub verdict: Option<String>,
}

impl QueueEntry {
    pub fn from_pair(image: &str, size: ImageSize, pair: &DisputedPair, policy: GeometryPolicy) -> Self {
        QueueEntry {
            id: format!("{image}#{}:{}", pair.index_a, pair.index_b),
            image: image.to_string(),
            width: size.width,
            height: size.height,
            bbox: policy.resolve(&pair.bbox_a, &pair.bbox_b),
            bbox_a: pair.bbox_a,
            bbox_b: pair.bbox_b,
            text_a: pair.text_a.clone(),
            text_b: pair.text_b.clone(),
            iou: pair.iou,
            verdict: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Verdict {
    AcceptA,
    AcceptB,
    Reject,
    Corrected(String),
}

#[derive(Debug, Error, PartialEq)]
pub enum VerdictError {
    #[error("line {line}: malformed verdict `{verdict}`")]
    MalformedVerdict { line: usize, verdict: String },
}

impl Verdict {
    /// `Ok(None)` for a blank verdict (still pending).
    pub fn parse(s: &str, line: usize) -> Result<Option<Verdict>, VerdictError> {
        let t = s.trim();
        if t.is_empty() {
            return Ok(None);
        }
        let v = match t {
            "accept_a" => Verdict::AcceptA,
            "accept_b" => Verdict::AcceptB,
            "reject" => Verdict::Reject,
            _ => match t.strip_prefix("corrected:") {
                Some(rest) => {
                    let rest = rest.trim();
                    let unq = rest.strip_prefix('"').and_then(|r| r.strip_suffix('"')).unwrap_or(rest);
                    if unq.is_empty() {
                        return Err(VerdictError::MalformedVerdict {
                            line,
                            verdict: s.to_string(),
                        });
                    }
                    Verdict::Corrected(unq.to_string())
                }
                None => {
                    return Err(VerdictError::MalformedVerdict {
                        line,
                        verdict: s.to_string(),
                    })
                }
            },
        };
        Ok(Some(v))
    }

    pub fn as_string(&self) -> String {
        match self {
            Verdict::AcceptA => "accept_a".into(),
            Verdict::AcceptB => "accept_b".into(),
            Verdict::Reject => "reject".into(),
            Verdict::Corrected(t) => format!("corrected:{t}"),
        }
    }
}

/// Applies a verdict to one queue entry. `None` for rejections.
pub fn resolve_entry(entry: &QueueEntry, verdict: &Verdict) -> Option<TextItem> {
    let text = match verdict {
        Verdict::AcceptA => entry.text_a.clone(),
        Verdict::AcceptB => entry.text_b.clone(),
        Verdict::Reject => return None,
        Verdict::Corrected(t) => t.clone(),
    };
    Some(TextItem::new(entry.bbox, text))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Pcg32;
    use proptest::prelude::*;
    use std::collections::HashSet;

    fn bx(a: f64, b: f64, c: f64, d: f64) -> Box {
        Box::new(a, b, c, d).unwrap()
    }

    fn item(b: Box, t: &str) -> TextItem {
        TextItem::new(b, t)
    }

    #[test]
    fn identical_lists_pair_fully() {
        let v = vec![bx(0., 0., 10., 10.), bx(20., 0., 30., 10.), bx(0., 20., 10., 30.)];
        assert_eq!(mutual_best_match(&v, &v, 0.7), vec![(0, 0), (1, 1), (2, 2)]);
    }

    #[test]
    fn argmax_picks_higher_overlap() {
        let a = vec![bx(0., 0., 100., 10.)];
        // IoU 0.9 and 0.8 with the A box
        let b = vec![bx(0., 0., 80., 10.), bx(0., 0., 90., 10.)];
        assert!((iou(&a[0], &b[1]) - 0.9).abs() < 1e-12);
        assert!((iou(&a[0], &b[0]) - 0.8).abs() < 1e-12);
        assert_eq!(mutual_best_match(&a, &b, 0.7), vec![(0, 1)]);
    }

    #[test]
    fn below_threshold_is_low_iou() {
        let a = vec![bx(0., 0., 100., 10.)];
        let b = vec![bx(0., 0., 65., 10.)];
        assert!(mutual_best_match(&a, &b, 0.7).is_empty());
        let r = consensus(&[item(a[0], "x")], &[item(b[0], "x")], &ConsensusConfig::default());
        assert!(r.agreed.is_empty());
        assert_eq!(r.discarded.len(), 2);
        assert!(r.discarded.iter().all(|d| d.reason == DiscardReason::LowIoU));
    }

    #[test]
    fn argmax_ties_take_lowest_index() {
        let a = vec![bx(0., 0., 10., 10.)];
        let b = vec![bx(0., 0., 10., 10.), bx(0., 0., 10., 10.)];
        assert_eq!(mutual_best_match(&a, &b, 0.7), vec![(0, 0)]);
    }

    #[test]
    fn transcript_rules() {
        let b = bx(0., 0., 100., 10.);
        let b2 = bx(0., 0., 90., 10.);
        let cfg = ConsensusConfig::default();
        let r = consensus(&[item(b, "STOP")], &[item(b2, "STOP")], &cfg);
        assert_eq!(r.agreed, vec![item(b, "STOP")]);
        let r = consensus(&[item(b, "STOP")], &[item(b2, "ST0P")], &cfg);
        assert!(r.agreed.is_empty());
        assert_eq!(r.disputed.len(), 1);
        assert_eq!(r.disputed[0].text_b, "ST0P");
        let r = consensus(&[item(b, "STOP  sign")], &[item(b2, "STOP sign")], &cfg);
        assert_eq!(r.agreed.len(), 1);
        let r = consensus(&[item(b, "Stop")], &[item(b2, "STOP")], &cfg);
        assert_eq!(r.disputed.len(), 1);
    }

    #[test]
    fn isolated_box_is_no_mutual_match() {
        let r = consensus(&[item(bx(0., 0., 5., 5.), "a")], &[], &ConsensusConfig::default());
        assert_eq!(
            r.discarded,
            vec![Discarded {
                engine: EngineId::A,
                index: 0,
                reason: DiscardReason::NoMutualMatch
            }]
        );
    }

    #[test]
    fn geometry_policies() {
        let a = bx(0., 0., 100., 10.);
        let b = bx(5., 0., 100., 12.);
        for (p, want) in [
            (GeometryPolicy::EngineA, a),
            (GeometryPolicy::Union, bx(0., 0., 100., 12.)),
            (GeometryPolicy::Intersection, bx(5., 0., 100., 10.)),
        ] {
            let cfg = ConsensusConfig {
                geometry: p,
                ..Default::default()
            };
            let r = consensus(&[item(a, "x")], &[item(b, "x")], &cfg);
            assert_eq!(r.agreed[0].bbox, want);
        }
    }

    #[test]
    fn verdicts() {
        let e = QueueEntry::from_pair(
            "img.jpg",
            ImageSize::new(200, 100).unwrap(),
            &DisputedPair {
                index_a: 0,
                index_b: 3,
                bbox_a: bx(0., 0., 10., 10.),
                bbox_b: bx(0., 0., 10., 9.),
                text_a: "STOP".into(),
                text_b: "ST0P".into(),
                iou: 0.9,
            },
            GeometryPolicy::EngineA,
        );
        let parse = |s| Verdict::parse(s, 1).unwrap().unwrap();
        assert_eq!(resolve_entry(&e, &parse("accept_a")).unwrap().text, "STOP");
        assert_eq!(resolve_entry(&e, &parse("accept_b")).unwrap().text, "ST0P");
        assert_eq!(resolve_entry(&e, &parse("reject")), None);
        assert_eq!(resolve_entry(&e, &parse("corrected:\"ST0P\"")).unwrap().text, "ST0P");
        assert_eq!(resolve_entry(&e, &parse("corrected:Stop")).unwrap().text, "Stop");
        assert_eq!(Verdict::parse("  ", 4), Ok(None));
        assert_eq!(
            Verdict::parse("maybe", 9),
            Err(VerdictError::MalformedVerdict {
                line: 9,
                verdict: "maybe".into()
            })
        );
        assert!(Verdict::parse("corrected:", 2).is_err());
        for v in ["accept_a", "accept_b", "reject", "corrected:x y"] {
            assert_eq!(parse(v).as_string(), v);
        }
    }

    fn random_items(rng: &mut Pcg32, n: usize) -> Vec<TextItem> {
        (0..n)
            .map(|_| {
                let x = rng.below(10) as f64 * 4.0;
                let y = rng.below(10) as f64 * 4.0;
                let w = 4.0 + rng.below(5) as f64 * 2.0;
                let h = 4.0 + rng.below(3) as f64 * 2.0;
                let t = ["STOP", "EXIT", "OPEN"][rng.below_usize(3)];
                item(bx(x, y, x + w, y + h), t)
            })
            .collect()
    }

    #[test]
    fn accounting_is_exhaustive_and_disjoint() {
        let mut rng = Pcg32::seed_from(7);
        for _ in 0..2000 {
            let na = rng.below_usize(8);
            let nb = rng.below_usize(8);
            let a = random_items(&mut rng, na);
            let b = random_items(&mut rng, nb);
            let r = consensus(&a, &b, &ConsensusConfig::default());
            let pairs = mutual_best_match(
                &a.iter().map(|x| x.bbox).collect::<Vec<_>>(),
                &b.iter().map(|x| x.bbox).collect::<Vec<_>>(),
                0.7,
            );
            let disc_a = r.discarded.iter().filter(|d| d.engine == EngineId::A).count();
            let disc_b = r.discarded.iter().filter(|d| d.engine == EngineId::B).count();
            let paired = r.agreed.len() + r.disputed.len();
            assert_eq!(paired, pairs.len());
            assert_eq!(paired + disc_a, a.len());
            assert_eq!(paired + disc_b, b.len());
            let seen: HashSet<_> = r.discarded.iter().map(|d| (d.engine, d.index)).collect();
            assert_eq!(seen.len(), r.discarded.len());
            for &(i, j) in &pairs {
                assert!(!seen.contains(&(EngineId::A, i)) && !seen.contains(&(EngineId::B, j)));
            }
        }
    }

    proptest! {
        #[test]
        fn pairing_symmetric_and_injective(seed in any::<u64>()) {
            let mut rng = Pcg32::seed_from(seed);
            let na = rng.below_usize(10);
            let nb = rng.below_usize(10);
            let a: Vec<Box> = random_items(&mut rng, na).into_iter().map(|x| x.bbox).collect();
            let b: Vec<Box> = random_items(&mut rng, nb).into_iter().map(|x| x.bbox).collect();
            let ab = mutual_best_match(&a, &b, 0.7);
            let mut ba: Vec<(usize, usize)> =
                mutual_best_match(&b, &a, 0.7).into_iter().map(|(j, i)| (i, j)).collect();
            ba.sort();
            prop_assert_eq!(&ab, &ba);
            let is: HashSet<_> = ab.iter().map(|p| p.0).collect();
            let js: HashSet<_> = ab.iter().map(|p| p.1).collect();
            prop_assert_eq!(is.len(), ab.len());
            prop_assert_eq!(js.len(), ab.len());
        }

        #[test]
        fn self_consensus_agrees_everywhere(seed in any::<u64>()) {
            let mut rng = Pcg32::seed_from(seed);
            let n = rng.below_usize(10);
            // self-consensus needs distinct boxes; duplicates tie to the lowest index
            let mut items = random_items(&mut rng, n);
            let mut seen = HashSet::new();
            items.retain(|x| seen.insert(x.bbox.to_array().map(f64::to_bits)));
            let r = consensus(&items, &items, &ConsensusConfig::default());
            prop_assert_eq!(r.agreed, items);
            prop_assert!(r.disputed.is_empty());
            prop_assert!(r.discarded.is_empty());
        }
    }
}
