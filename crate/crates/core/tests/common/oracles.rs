//! Brute-force reference implementations of the ranking metrics, in exact
//! rational arithmetic, plus generators of small random instances.

use num_rational::Ratio;
use proptest::prelude::*;
use proptest::test_runner::TestCaseError;

use wssgg_core::eval::{detection_map, recall_at_k, Detection, GtBox, GtTriplet, PredictedTriplet};
use wssgg_core::ir::BBox;

pub type Q = Ratio<i64>;

type Check = std::result::Result<(), TestCaseError>;

fn q(n: i64) -> Q {
    Q::from_integer(n)
}

/// Intersection over union computed from coordinates directly.
pub fn oracle_iou(a: &BBox<Q>, b: &BBox<Q>) -> Q {
    let w = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(q(0));
    let h = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(q(0));
    let inter = w * h;
    let area = |r: &BBox<Q>| (r.x2 - r.x1) * (r.y2 - r.y1);
    inter / (area(a) + area(b) - inter)
}

fn hit(a: &BBox<Q>, b: &BBox<Q>) -> bool {
    oracle_iou(a, b) >= Ratio::new(1, 2)
}

/// Indices sorted by descending score, ties by index.
fn ranked(scores: &[Q]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

/// Largest one-to-one matching between ground truth and the top `k`
/// predictions, found by trying every assignment.
pub fn oracle_recall(preds: &[PredictedTriplet<Q>], gt: &[GtTriplet<Q>], k: usize) -> Q {
    let scores: Vec<Q> = preds.iter().map(|p| p.score).collect();
    let top: Vec<&PredictedTriplet<Q>> = ranked(&scores).into_iter().take(k).map(|i| &preds[i]).collect();
    let ok = |p: &PredictedTriplet<Q>, g: &GtTriplet<Q>| {
        p.s_label == g.s_label && p.o_label == g.o_label && p.predicate == g.predicate && hit(&p.s_box, &g.s_box) && hit(&p.o_box, &g.o_box)
    };
    fn best(g: usize, gt: &[GtTriplet<Q>], top: &[&PredictedTriplet<Q>], used: &mut Vec<bool>, ok: &dyn Fn(&PredictedTriplet<Q>, &GtTriplet<Q>) -> bool) -> usize {
        if g == gt.len() {
            return 0;
        }
        let mut out = best(g + 1, gt, top, used, ok);
        for p in 0..top.len() {
            if !used[p] && ok(top[p], &gt[g]) {
                used[p] = true;
                out = out.max(1 + best(g + 1, gt, top, used, ok));
                used[p] = false;
            }
        }
        out
    }
    let m = best(0, gt, &top, &mut vec![false; top.len()], &ok);
    Ratio::new(m as i64, gt.len() as i64)
}

/// Matched flags of the first `n` ranked detections of `class`, recomputed
/// from scratch.
fn prefix_hits(dets: &[Vec<Detection<Q>>], gt: &[Vec<GtBox<Q>>], class: &str, n: usize) -> usize {
    let mut flat: Vec<(usize, &Detection<Q>)> = Vec::new();
    for (img, ds) in dets.iter().enumerate() {
        flat.extend(ds.iter().filter(|d| d.label == class).map(|d| (img, d)));
    }
    let scores: Vec<Q> = flat.iter().map(|(_, d)| d.score).collect();
    let mut claimed: Vec<Vec<bool>> = gt.iter().map(|g| vec![false; g.len()]).collect();
    let mut tp = 0;
    for i in ranked(&scores).into_iter().take(n) {
        let (img, d) = flat[i];
        let mut choice: Option<(usize, Q)> = None;
        for (g, truth) in gt[img].iter().enumerate() {
            if truth.label == class && !claimed[img][g] {
                let o = oracle_iou(&d.bbox, &truth.bbox);
                if choice.is_none_or(|(_, b)| o > b) {
                    choice = Some((g, o));
                }
            }
        }
        if let Some((g, o)) = choice {
            if o >= Ratio::new(1, 2) {
                claimed[img][g] = true;
                tp += 1;
            }
        }
    }
    tp
}

/// Area under the interpolated precision-recall curve, summed over recall
/// steps, averaged over ground-truth classes.
pub fn oracle_map(dets: &[Vec<Detection<Q>>], gt: &[Vec<GtBox<Q>>]) -> Q {
    let mut classes: Vec<&str> = gt.iter().flatten().map(|g| g.label.as_str()).collect();
    classes.sort();
    classes.dedup();
    let mut total = q(0);
    for class in &classes {
        let num_gt = gt.iter().flatten().filter(|g| g.label == *class).count() as i64;
        let n = dets.iter().flatten().filter(|d| d.label == *class).count();
        let tp: Vec<usize> = (0..=n).map(|k| prefix_hits(dets, gt, class, k)).collect();
        let precision = |k: usize| Ratio::new(tp[k] as i64, k as i64);
        let mut ap = q(0);
        for k in 1..=n {
            if tp[k] > tp[k - 1] {
                let interp = (k..=n).map(precision).max().expect("nonempty");
                ap += interp * Ratio::new(1, num_gt);
            }
        }
        total += ap;
    }
    total / q(classes.len() as i64)
}

// --- instances -------------------------------------------------------------

const LABELS: [&str; 3] = ["man", "dog", "cup"];
const PREDICATES: [&str; 2] = ["on", "near"];

fn grid_box() -> impl Strategy<Value = BBox<Q>> {
    (0i64..6, 0i64..6, 1i64..4, 1i64..4).prop_map(|(x, y, w, h)| BBox {
        x1: q(x),
        y1: q(y),
        x2: q(x + w),
        y2: q(y + h),
    })
}

/// A box equal to `b` or nudged by one unit on one side.
fn nudge(b: BBox<Q>, how: u8) -> BBox<Q> {
    let mut r = b;
    match how % 6 {
        0 => r.x1 -= q(1),
        1 => r.x2 += q(1),
        2 => r.y1 -= q(1),
        3 => r.y2 += q(1),
        _ => {}
    }
    r
}

#[derive(Debug, Clone)]
pub struct RecallInstance {
    pub predictions: Vec<PredictedTriplet<Q>>,
    pub gt: Vec<GtTriplet<Q>>,
}

pub fn recall_instance() -> impl Strategy<Value = RecallInstance> {
    let proposal_set = prop::collection::vec(grid_box(), 1..=5);
    proposal_set
        .prop_flat_map(|boxes| {
            let n = boxes.len();
            // two labels and two predicates keep label agreement common
            let slot = (0..n, 0..n, 0..2usize, 0..2usize, 0..PREDICATES.len());
            // ground truth shares one or two base slots, so near-duplicate
            // triplets that compete for the same prediction are common
            let bases = prop::collection::vec(slot.clone(), 1..=2);
            let gts = prop::collection::vec((0..2usize, any::<u8>(), any::<u8>()), 1..=4);
            // a prediction either copies a ground-truth slot or is drawn at random
            let preds = prop::collection::vec((prop::option::weighted(0.6, 0..4usize), slot, any::<u8>(), any::<u8>(), 0i64..4), 0..=8);
            (Just(boxes), bases, gts, preds)
        })
        .prop_map(|(boxes, bases, gts, preds)| {
            let gts: Vec<_> = gts.into_iter().map(|(b, ns, no)| (bases[b % bases.len()], ns, no)).collect();
            let triplet = |(s, o, sl, ol, p): (usize, usize, usize, usize, usize), ns: u8, no: u8, score: Q| PredictedTriplet {
                s_box: nudge(boxes[s], ns),
                s_label: LABELS[sl].into(),
                predicate: PREDICATES[p].into(),
                o_box: nudge(boxes[o], no),
                o_label: LABELS[ol].into(),
                score,
            };
            RecallInstance {
                predictions: preds
                    .into_iter()
                    .map(|(copy, slot, ns, no, score)| {
                        let slot = copy.map(|j| gts[j % gts.len()].0).unwrap_or(slot);
                        triplet(slot, ns, no, q(score))
                    })
                    .collect(),
                gt: gts
                    .iter()
                    .map(|&((s, o, sl, ol, p), ns, no)| GtTriplet {
                        s_box: nudge(boxes[s], ns),
                        s_label: LABELS[sl].into(),
                        predicate: PREDICATES[p].into(),
                        o_box: nudge(boxes[o], no),
                        o_label: LABELS[ol].into(),
                    })
                    .collect(),
            }
        })
}

pub fn recall_matches_oracle(inst: RecallInstance) -> Check {
    for k in 0..=inst.predictions.len() + 1 {
        let got = recall_at_k(&inst.predictions, &inst.gt, k).map_err(|e| TestCaseError::fail(e.to_string()))?;
        let want = oracle_recall(&inst.predictions, &inst.gt, k);
        if got != want {
            return Err(TestCaseError::fail(format!("recall@{k}: got {got}, oracle {want}")));
        }
    }
    Ok(())
}

pub fn recall_is_monotone_in_k(inst: RecallInstance) -> Check {
    let mut prev = q(0);
    for k in 0..=inst.predictions.len() + 1 {
        let r = recall_at_k(&inst.predictions, &inst.gt, k).map_err(|e| TestCaseError::fail(e.to_string()))?;
        if r < prev {
            return Err(TestCaseError::fail(format!("recall dropped from {prev} to {r} at k={k}")));
        }
        prev = r;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct MapInstance {
    pub detections: Vec<Vec<Detection<Q>>>,
    pub gt: Vec<Vec<GtBox<Q>>>,
}

pub fn map_instance() -> impl Strategy<Value = MapInstance> {
    let image = prop::collection::vec(grid_box(), 1..=5).prop_flat_map(|boxes| {
        let n = boxes.len();
        (
            Just(boxes),
            prop::collection::vec((0..n, 0..LABELS.len(), any::<u8>()), 0..=4),
            prop::collection::vec((0..n, 0..LABELS.len(), 0i64..4), 0..=5),
        )
    });
    prop::collection::vec(image, 1..=3)
        .prop_filter("needs at least one ground-truth box", |imgs| imgs.iter().any(|(_, g, _)| !g.is_empty()))
        .prop_map(|imgs| {
            let mut out = MapInstance {
                detections: Vec::new(),
                gt: Vec::new(),
            };
            for (boxes, gts, dets) in imgs {
                out.gt.push(
                    gts.into_iter()
                        .map(|(b, l, how)| GtBox {
                            bbox: nudge(boxes[b], how),
                            label: LABELS[l].into(),
                        })
                        .collect(),
                );
                out.detections.push(
                    dets.into_iter()
                        .map(|(b, l, s)| Detection {
                            bbox: boxes[b],
                            label: LABELS[l].into(),
                            score: q(s),
                        })
                        .collect(),
                );
            }
            out
        })
}

pub fn map_matches_oracle(inst: MapInstance) -> Check {
    let got = detection_map(&inst.detections, &inst.gt).map_err(|e| TestCaseError::fail(e.to_string()))?;
    let want = oracle_map(&inst.detections, &inst.gt);
    if got != want {
        return Err(TestCaseError::fail(format!("mAP: got {got}, oracle {want}")));
    }
    Ok(())
}

/// Renaming classes through a bijection leaves mAP unchanged.
pub fn map_is_relabel_invariant(inst: MapInstance) -> Check {
    let rename = |l: &str| match l {
        "man" => "cup",
        "dog" => "man",
        _ => "dog",
    };
    let detections: Vec<Vec<Detection<Q>>> = inst
        .detections
        .iter()
        .map(|ds| ds.iter().map(|d| Detection { label: rename(&d.label).into(), ..d.clone() }).collect())
        .collect();
    let gt: Vec<Vec<GtBox<Q>>> = inst
        .gt
        .iter()
        .map(|gs| gs.iter().map(|g| GtBox { label: rename(&g.label).into(), ..g.clone() }).collect())
        .collect();
    let before = detection_map(&inst.detections, &inst.gt).map_err(|e| TestCaseError::fail(e.to_string()))?;
    let after = detection_map(&detections, &gt).map_err(|e| TestCaseError::fail(e.to_string()))?;
    if before != after {
        return Err(TestCaseError::fail(format!("relabeling moved mAP from {before} to {after}")));
    }
    Ok(())
}
