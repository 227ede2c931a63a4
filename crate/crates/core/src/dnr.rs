//! Box decomposition and recombination.
//!
//! The predictions of all pixels regressing one instance are split into
//! four pools of sides. Each pool is ranked by distance to the matching
//! target side, and sides of equal rank are reassembled into new boxes.
//! Every boundary then keeps whichever confidence is higher: the IoU of the
//! box it came from, or the IoU of the recombined box it now belongs to.
//! The regression loss and its gradient for that boundary are taken from
//! the winning box.

use crate::error::{Error, Result};
use crate::geometry::{dist_to_box, iou, BBox, Distances, Point, Side};
use crate::losses::{iou_loss, iou_loss_box_grad, side_grad_to_dist};

/// Default cap on the exhaustive recombination search (`n^4` combinations).
pub const ORACLE_LIMIT: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelPrediction {
    pub point: Point,
    pub dist: Distances,
}

impl PixelPrediction {
    pub const fn new(point: Point, dist: Distances) -> Self {
        Self { point, dist }
    }

    pub fn bbox(&self) -> BBox {
        dist_to_box(self.point, self.dist)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Boundary {
    pub value: f64,
    pub source: usize,
}

/// Side pools indexed by [`Side`]; every pool holds one boundary per
/// prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryPools {
    pools: [Vec<Boundary>; 4],
}

impl BoundaryPools {
    pub fn pool(&self, side: Side) -> &[Boundary] {
        &self.pools[side.index()]
    }

    pub fn len(&self) -> usize {
        self.pools[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// `n x 4` boundary confidences, columns in [`Side`] order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ScoreMatrix {
    pub rows: Vec<[f64; 4]>,
}

impl ScoreMatrix {
    fn from_box_scores(scores: impl IntoIterator<Item = f64>) -> Self {
        Self {
            rows: scores.into_iter().map(|s| [s; 4]).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn get(&self, row: usize, side: Side) -> f64 {
        self.rows[row][side.index()]
    }

    pub fn mean(&self) -> f64 {
        if self.rows.is_empty() {
            return 0.0;
        }
        let sum: f64 = self.rows.iter().flat_map(|r| r.iter()).sum();
        sum / (4 * self.rows.len()) as f64
    }

    pub fn max(&self) -> f64 {
        self.rows
            .iter()
            .flat_map(|r| r.iter().copied())
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Per side, the source prediction ids ordered from closest to farthest
/// from the target side. `order[side][rank]` is a prediction id.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedBoundaries {
    pub order: [Vec<usize>; 4],
}

impl RankedBoundaries {
    pub fn source(&self, rank: usize, side: Side) -> usize {
        self.order[side.index()][rank]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecombinedSet {
    /// Recombined boxes in rank order.
    pub boxes: Vec<BBox>,
    /// `provenance[rank][side]`: the prediction that supplied that side.
    pub provenance: Vec<[usize; 4]>,
}

/// `selection[rank][side]` is true when the recombined box outscores the
/// boundary's original box.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct BoundarySelection {
    pub rows: Vec<[bool; 4]>,
}

impl BoundarySelection {
    pub fn count(&self) -> usize {
        self.rows.iter().flatten().filter(|&&b| b).count()
    }
}

pub fn decompose(preds: &[BBox], gt: &BBox) -> Result<(BoundaryPools, ScoreMatrix)> {
    if preds.is_empty() {
        return Err(Error::EmptyPredictionSet);
    }
    let pools = Side::ALL.map(|side| {
        preds
            .iter()
            .enumerate()
            .map(|(source, b)| Boundary {
                value: b.side(side),
                source,
            })
            .collect()
    });
    let scores = ScoreMatrix::from_box_scores(preds.iter().map(|p| iou(p, gt)));
    Ok((BoundaryPools { pools }, scores))
}

/// Sorts each pool by absolute deviation from the target side. Equal
/// deviations keep ascending source order.
pub fn rank_boundaries(pools: &BoundaryPools, gt: &BBox) -> RankedBoundaries {
    let order = Side::ALL.map(|side| {
        let pool = pools.pool(side);
        let target = gt.side(side);
        let mut idx: Vec<usize> = (0..pool.len()).collect();
        idx.sort_by(|&a, &b| {
            let da = (pool[a].value - target).abs();
            let db = (pool[b].value - target).abs();
            da.total_cmp(&db).then(pool[a].source.cmp(&pool[b].source))
        });
        idx.into_iter().map(|i| pool[i].source).collect()
    });
    RankedBoundaries { order }
}

/// Assembles a box from side values, collapsing crossed sides onto their
/// midpoint so the result is always a valid (possibly zero-area) box.
pub fn assemble(sides: [f64; 4]) -> BBox {
    let mut b = BBox::from_sides(sides);
    if b.x1 > b.x2 {
        let m = 0.5 * (b.x1 + b.x2);
        b.x1 = m;
        b.x2 = m;
    }
    if b.y1 > b.y2 {
        let m = 0.5 * (b.y1 + b.y2);
        b.y1 = m;
        b.y2 = m;
    }
    b
}

fn pool_value(pools: &BoundaryPools, side: Side, source: usize) -> f64 {
    // pools are built in source order
    let b = pools.pool(side)[source];
    debug_assert_eq!(b.source, source);
    b.value
}

pub fn recombine(ranked: &RankedBoundaries, pools: &BoundaryPools, gt: &BBox) -> (RecombinedSet, ScoreMatrix) {
    let n = pools.len();
    let mut boxes = Vec::with_capacity(n);
    let mut provenance = Vec::with_capacity(n);
    for rank in 0..n {
        let src = Side::ALL.map(|side| ranked.source(rank, side));
        let sides = Side::ALL.map(|side| pool_value(pools, side, src[side.index()]));
        boxes.push(assemble(sides));
        provenance.push(src);
    }
    let scores = ScoreMatrix::from_box_scores(boxes.iter().map(|b| iou(b, gt)));
    (RecombinedSet { boxes, provenance }, scores)
}

/// Keeps the higher of the original and recombined confidence for every
/// boundary. Both outputs are indexed by `(rank, side)`; the original score
/// of boundary `(rank, side)` is the row of the prediction that supplied it.
pub fn assign_confidence(
    original: &ScoreMatrix,
    recombined: &ScoreMatrix,
    set: &RecombinedSet,
) -> Result<(ScoreMatrix, BoundarySelection)> {
    if original.len() != recombined.len() {
        return Err(Error::ShapeMismatch {
            left: original.len(),
            right: recombined.len(),
        });
    }
    if set.provenance.len() != recombined.len() {
        return Err(Error::ShapeMismatch {
            left: set.provenance.len(),
            right: recombined.len(),
        });
    }
    let mut finals = Vec::with_capacity(recombined.len());
    let mut sel = Vec::with_capacity(recombined.len());
    for (rank, src) in set.provenance.iter().enumerate() {
        let mut frow = [0.0; 4];
        let mut srow = [false; 4];
        for side in Side::ALL {
            let j = side.index();
            let orig = original.get(src[j], side);
            let rec = recombined.get(rank, side);
            srow[j] = rec > orig;
            frow[j] = if srow[j] { rec } else { orig };
        }
        finals.push(frow);
        sel.push(srow);
    }
    Ok((ScoreMatrix { rows: finals }, BoundarySelection { rows: sel }))
}

/// Every intermediate of one decomposition/recombination pass.
#[derive(Debug, Clone, PartialEq)]
pub struct DnrPass {
    pub boxes: Vec<BBox>,
    pub pools: BoundaryPools,
    pub original: ScoreMatrix,
    pub ranked: RankedBoundaries,
    pub recombined: RecombinedSet,
    pub recombined_scores: ScoreMatrix,
    pub finals: ScoreMatrix,
    pub selection: BoundarySelection,
}

pub fn run_pass(boxes: &[BBox], gt: &BBox) -> Result<DnrPass> {
    let (pools, original) = decompose(boxes, gt)?;
    let ranked = rank_boundaries(&pools, gt);
    let (recombined, recombined_scores) = recombine(&ranked, &pools, gt);
    let (finals, selection) = assign_confidence(&original, &recombined_scores, &recombined)?;
    Ok(DnrPass {
        boxes: boxes.to_vec(),
        pools,
        original,
        ranked,
        recombined,
        recombined_scores,
        finals,
        selection,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DnrLoss {
    /// Sum over boundary slots of the mean of their four selected
    /// `-ln IoU` terms; the caller divides by the positive count.
    pub loss: f64,
    /// Gradient over each prediction's `(l, t, r, b)`, in input order.
    pub grads: Vec<[f64; 4]>,
    pub pass: DnrPass,
}

/// IoU regression loss with per-boundary selection between original and
/// recombined boxes.
///
/// Each boundary slot `(rank, side)` contributes a quarter of `-ln IoU` of
/// its winning box. The boundary's gradient is the partial of that term's
/// `-ln IoU` with respect to the boundary itself, routed to the distance of
/// the prediction that supplied it. Every boundary thus receives exactly one
/// gradient, from whichever box won its slot.
pub fn dnr_loss(preds: &[PixelPrediction], gt: &BBox) -> Result<DnrLoss> {
    let boxes: Vec<BBox> = preds.iter().map(PixelPrediction::bbox).collect();
    let pass = run_pass(&boxes, gt)?;
    let n = boxes.len();

    let mut orig_terms: Vec<Option<(f64, [f64; 4])>> = vec![None; n];
    let mut rec_terms: Vec<Option<(f64, [f64; 4])>> = vec![None; n];
    let mut side_grads = vec![[0.0f64; 4]; n];
    let mut loss = 0.0;

    for rank in 0..n {
        let src = pass.recombined.provenance[rank];
        let mut contrib = [0.0; 4];
        for side in Side::ALL {
            let j = side.index();
            if pass.selection.rows[rank][j] {
                let (value, g) = cached_term(&mut rec_terms[rank], &pass.recombined.boxes[rank], gt)
                    .map_err(|_| Error::NonFiniteGradient { index: src[j] })?;
                contrib[j] = value;
                side_grads[src[j]][j] = g[j];
            } else {
                let i = src[j];
                let (value, g) = cached_term(&mut orig_terms[i], &boxes[i], gt)
                    .map_err(|_| Error::NonFiniteGradient { index: i })?;
                contrib[j] = value;
                side_grads[i][j] = g[j];
            }
        }
        loss += ((contrib[0] + contrib[1]) + (contrib[2] + contrib[3])) * 0.25;
    }

    let grads = side_grads.into_iter().map(side_grad_to_dist).collect();
    Ok(DnrLoss { loss, grads, pass })
}

fn cached_term(slot: &mut Option<(f64, [f64; 4])>, b: &BBox, gt: &BBox) -> Result<(f64, [f64; 4])> {
    if let Some(t) = slot {
        return Ok(*t);
    }
    let t = (iou_loss(b, gt)?, iou_loss_box_grad(b, gt)?);
    *slot = Some(t);
    Ok(t)
}

/// Exhaustive search over all `n^4` side combinations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleResult {
    pub best: BBox,
    pub best_iou: f64,
    /// Source prediction for each side, in [`Side`] order.
    pub sources: [usize; 4],
}

pub fn brute_force_optimal(preds: &[BBox], gt: &BBox) -> Result<OracleResult> {
    brute_force_optimal_with_limit(preds, gt, ORACLE_LIMIT)
}

/// Tries every combination in lexicographic `(left, right, bottom, top)`
/// source order and keeps the first one with the highest IoU. Crossed
/// combinations score 0.
pub fn brute_force_optimal_with_limit(preds: &[BBox], gt: &BBox, limit: usize) -> Result<OracleResult> {
    let n = preds.len();
    if n == 0 {
        return Err(Error::EmptyPredictionSet);
    }
    if n > limit {
        return Err(Error::TooManyPredictions { n, limit });
    }
    let mut best: Option<OracleResult> = None;
    for l in 0..n {
        for r in 0..n {
            for b in 0..n {
                for t in 0..n {
                    let sources = [l, r, b, t];
                    let sides = Side::ALL.map(|s| preds[sources[s.index()]].side(s));
                    let raw = BBox::from_sides(sides);
                    let score = if raw.is_valid() { iou(&raw, gt) } else { 0.0 };
                    if best.is_none_or(|cur| score > cur.best_iou) {
                        best = Some(OracleResult {
                            best: assemble(sides),
                            best_iou: score,
                            sources,
                        });
                    }
                }
            }
        }
    }
    Ok(best.expect("n >= 1"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn gt() -> BBox {
        BBox::new(0.0, 0.0, 10.0, 10.0)
    }

    fn pair() -> Vec<BBox> {
        vec![BBox::new(0.0, 0.0, 9.0, 10.0), BBox::new(1.0, 0.0, 10.0, 10.0)]
    }

    #[test]
    fn decompose_examples() {
        let (_, s) = decompose(&[gt()], &gt()).unwrap();
        assert_eq!(s.rows, vec![[1.0; 4]]);
        let preds = pair();
        let (pools, s) = decompose(&preds, &gt()).unwrap();
        assert_eq!(s.rows, vec![[0.9; 4], [0.9; 4]]);
        let left: Vec<(f64, usize)> = pools.pool(Side::Left).iter().map(|b| (b.value, b.source)).collect();
        assert_eq!(left, vec![(0.0, 0), (1.0, 1)]);
        assert_eq!(decompose(&[], &gt()).unwrap_err(), Error::EmptyPredictionSet);
    }

    #[test]
    fn rank_examples() {
        let (pools, _) = decompose(&[gt()], &gt()).unwrap();
        let r = rank_boundaries(&pools, &gt());
        assert!(r.order.iter().all(|o| o == &vec![0]));

        let (pools, _) = decompose(&pair(), &gt()).unwrap();
        let r = rank_boundaries(&pools, &gt());
        assert_eq!(r.order[Side::Left.index()], vec![0, 1]);
        assert_eq!(r.order[Side::Right.index()], vec![1, 0]);
        assert_eq!(r.order[Side::Bottom.index()], vec![0, 1]);
        assert_eq!(r.order[Side::Top.index()], vec![0, 1]);
    }

    #[test]
    fn rank_sorted_pool_is_identity() {
        let preds: Vec<BBox> = (0..5)
            .map(|k| {
                let e = k as f64 * 0.5;
                BBox::new(-e, -e, 10.0 + e, 10.0 + e)
            })
            .collect();
        let (pools, _) = decompose(&preds, &gt()).unwrap();
        let r = rank_boundaries(&pools, &gt());
        for o in &r.order {
            assert_eq!(o, &(0..5).collect::<Vec<_>>());
        }
    }

    #[test]
    fn recombine_examples() {
        let preds = pair();
        let (pools, s) = decompose(&preds, &gt()).unwrap();
        let ranked = rank_boundaries(&pools, &gt());
        let (set, sp) = recombine(&ranked, &pools, &gt());
        assert_eq!(set.boxes[0], gt());
        assert_eq!(sp.rows[0], [1.0; 4]);
        assert_eq!(set.boxes[1], BBox::new(1.0, 0.0, 9.0, 10.0));
        assert!((sp.rows[1][0] - 0.8).abs() < 1e-12);
        assert_eq!(set.provenance[0], [0, 1, 0, 0]);

        let (final_scores, sel) = assign_confidence(&s, &sp, &set).unwrap();
        assert_eq!(final_scores.rows[0], [1.0; 4]);
        assert_eq!(final_scores.rows[1], [0.9; 4]);
        assert_eq!(sel.rows, vec![[true; 4], [false; 4]]);
    }

    #[test]
    fn single_prediction_is_unchanged() {
        let b = BBox::new(1.0, 2.0, 8.0, 9.0);
        let pass = run_pass(&[b], &gt()).unwrap();
        assert_eq!(pass.recombined.boxes, vec![b]);
        assert_eq!(pass.recombined_scores, pass.original);
        assert_eq!(pass.finals, pass.original);
        assert_eq!(pass.selection.count(), 0);
    }

    #[test]
    fn identical_predictions_recombine_to_themselves() {
        let b = BBox::new(1.0, -1.0, 11.0, 9.0);
        let pass = run_pass(&[b; 4], &gt()).unwrap();
        assert!(pass.recombined.boxes.iter().all(|r| *r == b));
        assert_eq!(pass.finals, pass.original);
    }

    #[test]
    fn crossed_recombination_collapses_and_scores_zero() {
        // left pool ranks the far-right left side last, right pool ranks the
        // far-left right side last, so the last rank crosses
        let preds = vec![BBox::new(0.0, 0.0, 2.0, 10.0), BBox::new(8.0, 0.0, 10.0, 10.0)];
        let pass = run_pass(&preds, &gt()).unwrap();
        let last = pass.recombined.boxes[1];
        assert_eq!(last, BBox::new(5.0, 0.0, 5.0, 10.0));
        assert_eq!(pass.recombined_scores.rows[1], [0.0; 4]);
        assert_eq!(pass.selection.rows[1], [false; 4]);
    }

    #[test]
    fn assign_shape_mismatch() {
        let (pools, s) = decompose(&pair(), &gt()).unwrap();
        let ranked = rank_boundaries(&pools, &gt());
        let (set, _) = recombine(&ranked, &pools, &gt());
        let short = ScoreMatrix { rows: vec![[1.0; 4]] };
        assert!(matches!(
            assign_confidence(&s, &short, &set),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn dnr_loss_examples() {
        let g = gt();
        let exact = PixelPrediction::new(Point::new(5.0, 5.0), Distances::new(5.0, 5.0, 5.0, 5.0));
        let out = dnr_loss(&[exact], &g).unwrap();
        assert_eq!(out.loss, 0.0);
        assert_eq!(out.grads, vec![[0.0; 4]]);

        let short = PixelPrediction::new(Point::new(5.0, 5.0), Distances::new(5.0, 5.0, 4.0, 5.0));
        let out = dnr_loss(&[short], &g).unwrap();
        assert!((out.loss - 0.105_360_515_657_826_3).abs() < 1e-12);
        let gr = out.grads[0];
        assert!(gr[2] < 0.0);
        assert_eq!((gr[0], gr[1], gr[3]), (0.0, 0.0, 0.0));

        let a = PixelPrediction::new(Point::new(5.0, 5.0), Distances::new(5.0, 5.0, 4.0, 5.0));
        let b = PixelPrediction::new(Point::new(5.0, 5.0), Distances::new(4.0, 5.0, 5.0, 5.0));
        let out = dnr_loss(&[a, b], &g).unwrap();
        // rank 0 scores 1 (loss 0); rank 1 falls back to the originals at 0.9
        assert!((out.loss - (-(0.9f64).ln())).abs() < 1e-12);
    }

    #[test]
    fn dnr_loss_n1_matches_plain_iou_loss_bitwise() {
        let g = BBox::new(1.3, 2.7, 14.1, 11.9);
        let p = PixelPrediction::new(Point::new(6.0, 7.0), Distances::new(3.3, 4.1, 7.9, 3.2));
        let out = dnr_loss(&[p], &g).unwrap();
        assert_eq!(out.loss, iou_loss(&p.bbox(), &g).unwrap());
    }

    #[test]
    fn dnr_loss_empty() {
        assert_eq!(dnr_loss(&[], &gt()).unwrap_err(), Error::EmptyPredictionSet);
    }

    #[test]
    fn dnr_loss_zero_overlap_reports_source() {
        let far = PixelPrediction::new(Point::new(50.0, 50.0), Distances::new(1.0, 1.0, 1.0, 1.0));
        assert_eq!(
            dnr_loss(&[far], &gt()).unwrap_err(),
            Error::NonFiniteGradient { index: 0 }
        );
    }

    #[test]
    fn oracle_examples() {
        let g = gt();
        let r = brute_force_optimal(&[BBox::new(3.0, 3.0, 4.0, 4.0), g], &g).unwrap();
        assert_eq!(r.best_iou, 1.0);
        let r = brute_force_optimal(&pair(), &g).unwrap();
        assert_eq!(r.best, g);
        assert_eq!(r.best_iou, 1.0);
        let one = BBox::new(1.0, 1.0, 7.0, 8.0);
        let r = brute_force_optimal(&[one], &g).unwrap();
        assert_eq!(r.best, one);
        let many = vec![g; 9];
        assert_eq!(
            brute_force_optimal(&many, &g).unwrap_err(),
            Error::TooManyPredictions { n: 9, limit: 8 }
        );
        assert!(brute_force_optimal_with_limit(&many, &g, 9).is_ok());
    }

    #[test]
    fn oracle_ties_prefer_lexicographically_first() {
        let g = gt();
        let r = brute_force_optimal(&[g, g, g], &g).unwrap();
        assert_eq!(r.sources, [0, 0, 0, 0]);
    }

    fn arb_preds(max: usize) -> impl Strategy<Value = Vec<BBox>> {
        prop::collection::vec(
            (-3.0..3.0f64, -3.0..3.0f64, -3.0..3.0f64, -3.0..3.0f64)
                .prop_map(|(a, b, c, d)| BBox::new(a, b, 10.0 + c, 10.0 + d)),
            1..=max,
        )
    }

    proptest! {
        #[test]
        fn rankings_are_sorted_bijections(preds in arb_preds(12)) {
            let g = gt();
            let (pools, _) = decompose(&preds, &g).unwrap();
            let r = rank_boundaries(&pools, &g);
            for side in Side::ALL {
                let order = &r.order[side.index()];
                let mut seen = order.clone();
                seen.sort_unstable();
                prop_assert_eq!(seen, (0..preds.len()).collect::<Vec<_>>());
                let devs: Vec<f64> = order.iter().map(|&i| (preds[i].side(side) - g.side(side)).abs()).collect();
                prop_assert!(devs.windows(2).all(|w| w[0] <= w[1]));
            }
        }

        #[test]
        fn finals_dominate_originals_and_oracle_bounds_all(preds in arb_preds(6)) {
            let g = gt();
            let pass = run_pass(&preds, &g).unwrap();
            for (rank, src) in pass.recombined.provenance.iter().enumerate() {
                for side in Side::ALL {
                    let j = side.index();
                    prop_assert!(pass.finals.rows[rank][j] >= pass.original.rows[src[j]][j]);
                    prop_assert_eq!(
                        pass.selection.rows[rank][j],
                        pass.recombined_scores.rows[rank][j] > pass.original.rows[src[j]][j]
                    );
                }
            }
            prop_assert!(pass.finals.mean() >= pass.original.mean() - 1e-15);
            let oracle = brute_force_optimal(&preds, &g).unwrap();
            prop_assert!(oracle.best_iou >= pass.original.max());
            prop_assert!(oracle.best_iou >= pass.recombined_scores.max());
        }

        #[test]
        fn boundary_gradients_match_finite_differences(
            raw in prop::collection::vec(
                (2.0..8.0f64, 2.0..8.0f64, (1.0..9.0f64, 1.0..9.0f64, 1.0..9.0f64, 1.0..9.0f64)),
                2..=5,
            )
        ) {
            let g = gt();
            let preds: Vec<PixelPrediction> = raw
                .iter()
                .map(|&(x, y, (l, t, r, b))| PixelPrediction::new(Point::new(x, y), Distances::new(l, t, r, b)))
                .collect();
            let out = dnr_loss(&preds, &g).unwrap();
            let pass = &out.pass;
            let h = 1e-5;
            let sides = [Side::Left, Side::Top, Side::Right, Side::Bottom];
            for (rank, src) in pass.recombined.provenance.iter().enumerate() {
                for (c, side) in sides.into_iter().enumerate() {
                    let j = side.index();
                    let i = src[j];
                    let selected = pass.selection.rows[rank][j];
                    let winner = |delta: f64| {
                        let mut d = preds[i].dist.to_array();
                        d[c] += delta;
                        let moved = PixelPrediction::new(preds[i].point, Distances::from_array(d)).bbox();
                        if selected {
                            let mut s = pass.recombined.boxes[rank].sides();
                            s[j] = moved.side(side);
                            BBox::from_sides(s)
                        } else {
                            moved
                        }
                    };
                    let w = winner(0.0);
                    prop_assume!(w.sides().iter().zip(g.sides()).all(|(a, b)| (a - b).abs() > 1e-4));
                    prop_assume!(w.intersection(&g) > 0.0 && iou(&w, &g) > 0.05);
                    let f = |delta: f64| iou_loss(&winner(delta), &g).unwrap();
                    let fd = (f(h) - f(-h)) / (2.0 * h);
                    let an = out.grads[i][c];
                    prop_assert!((an - fd).abs() <= 1e-4 * fd.abs().max(1e-3), "rank {rank} side {side:?}: {an} vs {fd}");
                }
            }
        }

        #[test]
        fn provenance_matches_rank(preds in arb_preds(8)) {
            let g = gt();
            let pass = run_pass(&preds, &g).unwrap();
            for (rank, src) in pass.recombined.provenance.iter().enumerate() {
                for side in Side::ALL {
                    prop_assert_eq!(src[side.index()], pass.ranked.source(rank, side));
                }
            }
        }
    }
}
