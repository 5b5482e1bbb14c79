//! Depth-map and 3D reconstruction metrics.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::raster::DepthMap;
use crate::tsdf::TsdfVolume;

pub const F_SCORE_THRESHOLD: f64 = 0.05;

/// Which depth divides the relative errors.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RelativeDenominator {
    #[default]
    Predicted,
    GroundTruth,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PointDistance {
    #[default]
    L1,
    L2,
}

impl PointDistance {
    pub fn eval(self, a: &[f64; 3], b: &[f64; 3]) -> f64 {
        match self {
            PointDistance::L1 => (a[0] - b[0]).abs() + (a[1] - b[1]).abs() + (a[2] - b[2]).abs(),
            PointDistance::L2 => {
                ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DepthEvalReport {
    pub abs_rel: f64,
    pub abs_diff: f64,
    pub sq_rel: f64,
    pub rmse: f64,
    pub n: usize,
}

impl DepthEvalReport {
    pub fn columns(&self) -> Vec<(&'static str, f64)> {
        vec![
            ("AbsRel", self.abs_rel),
            ("AbsDiff", self.abs_diff),
            ("SqRel", self.sq_rel),
            ("RMSE", self.rmse),
        ]
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GeomEvalReport {
    /// Mean TSDF error, when a ground-truth volume was available.
    pub l1: Option<f64>,
    pub acc: f64,
    pub comp: f64,
    pub precision: f64,
    pub recall: f64,
    pub f_score: f64,
}

impl GeomEvalReport {
    pub fn columns(&self) -> Vec<(&'static str, f64)> {
        let mut c = Vec::with_capacity(6);
        if let Some(l1) = self.l1 {
            c.push(("L1", l1));
        }
        c.extend([
            ("Acc", self.acc),
            ("Comp", self.comp),
            ("Prec", self.precision),
            ("Recall", self.recall),
            ("F-score", self.f_score),
        ]);
        c
    }
}

pub fn eval_depth(pred: &DepthMap, gt: &DepthMap) -> Result<DepthEvalReport> {
    eval_depth_pairs(&[(pred, gt)], RelativeDenominator::Predicted)
}

/// Metrics pooled over the jointly valid pixels of several map pairs.
pub fn eval_depth_pairs(
    pairs: &[(&DepthMap, &DepthMap)],
    denom: RelativeDenominator,
) -> Result<DepthEvalReport> {
    let (mut rel, mut abs, mut sq_rel, mut sq, mut n) = (0.0, 0.0, 0.0, 0.0, 0usize);
    for (pred, gt) in pairs {
        pred.same_shape(gt)?;
        for idx in 0..pred.len() {
            if !(pred.valid[idx] && gt.valid[idx]) {
                continue;
            }
            let (zp, zg) = (pred.data[idx], gt.data[idx]);
            let d = match denom {
                RelativeDenominator::Predicted => zp,
                RelativeDenominator::GroundTruth => zg,
            };
            let e = (zg - zp).abs();
            rel += e / d;
            abs += e;
            sq_rel += e * e / d;
            sq += e * e;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Empty("jointly valid depth pixels"));
    }
    let nf = n as f64;
    Ok(DepthEvalReport {
        abs_rel: rel / nf,
        abs_diff: abs / nf,
        sq_rel: sq_rel / nf,
        rmse: (sq / nf).sqrt(),
        n,
    })
}

/// Mean |a - ã| over observed ground-truth voxels with a < 1.
pub fn eval_tsdf_l1(pred: &TsdfVolume, gt: &TsdfVolume) -> Result<f64> {
    pred.same_spec(gt)?;
    let (mut sum, mut n) = (0.0, 0usize);
    for i in 0..gt.values.len() {
        if gt.observed(i) && gt.values[i] < 1.0 {
            sum += (gt.values[i] - pred.values[i]).abs();
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Empty("ground-truth voxels with a < 1"));
    }
    Ok(sum / n as f64)
}

const LEAF: usize = 8;

/// Exact nearest-neighbor index over 3D points. Splits are medians on the
/// cycling axis, stored implicitly in a permuted point array.
pub struct KdTree {
    points: Vec<[f64; 3]>,
}

impl KdTree {
    pub fn new(points: &[[f64; 3]]) -> Self {
        let mut points = points.to_vec();
        build(&mut points, 0);
        Self { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Distance to the nearest indexed point, or infinity when empty.
    pub fn nearest(&self, q: &[f64; 3], metric: PointDistance) -> f64 {
        let mut best = f64::INFINITY;
        search(&self.points, 0, q, metric, &mut best);
        best
    }
}

fn build(pts: &mut [[f64; 3]], depth: usize) {
    if pts.len() <= LEAF {
        return;
    }
    let axis = depth % 3;
    let mid = pts.len() / 2;
    pts.select_nth_unstable_by(mid, |a, b| a[axis].total_cmp(&b[axis]));
    let (lo, hi) = pts.split_at_mut(mid);
    build(lo, depth + 1);
    build(&mut hi[1..], depth + 1);
}

fn search(pts: &[[f64; 3]], depth: usize, q: &[f64; 3], metric: PointDistance, best: &mut f64) {
    if pts.len() <= LEAF {
        for p in pts {
            let d = metric.eval(p, q);
            if d < *best {
                *best = d;
            }
        }
        return;
    }
    let axis = depth % 3;
    let mid = pts.len() / 2;
    let split = pts[mid];
    let d = metric.eval(&split, q);
    if d < *best {
        *best = d;
    }
    let diff = q[axis] - split[axis];
    let (near, far) = if diff < 0.0 {
        (&pts[..mid], &pts[mid + 1..])
    } else {
        (&pts[mid + 1..], &pts[..mid])
    };
    search(near, depth + 1, q, metric, best);
    // both metrics are bounded below by the gap along one axis
    if diff.abs() <= *best {
        search(far, depth + 1, q, metric, best);
    }
}

/// Nearest-neighbor distances from each query point into `index`.
pub fn nearest_distances(queries: &[[f64; 3]], index: &KdTree, metric: PointDistance) -> Vec<f64> {
    queries
        .par_iter()
        .map(|q| index.nearest(q, metric))
        .collect()
}

pub fn eval_pointcloud(
    pred: &[[f64; 3]],
    gt: &[[f64; 3]],
    threshold: f64,
) -> Result<GeomEvalReport> {
    eval_pointcloud_with(pred, gt, threshold, PointDistance::L1)
}

pub fn eval_pointcloud_with(
    pred: &[[f64; 3]],
    gt: &[[f64; 3]],
    threshold: f64,
    metric: PointDistance,
) -> Result<GeomEvalReport> {
    if pred.is_empty() {
        return Err(Error::Empty("predicted point cloud"));
    }
    if gt.is_empty() {
        return Err(Error::Empty("ground-truth point cloud"));
    }
    let d_pred = nearest_distances(pred, &KdTree::new(gt), metric);
    let d_gt = nearest_distances(gt, &KdTree::new(pred), metric);
    Ok(report_from_distances(&d_pred, &d_gt, threshold))
}

pub(crate) fn report_from_distances(
    d_pred: &[f64],
    d_gt: &[f64],
    threshold: f64,
) -> GeomEvalReport {
    let mean = |d: &[f64]| d.iter().sum::<f64>() / d.len() as f64;
    let frac = |d: &[f64]| d.iter().filter(|&&x| x < threshold).count() as f64 / d.len() as f64;
    let (precision, recall) = (frac(d_pred), frac(d_gt));
    let f_score = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    GeomEvalReport {
        l1: None,
        acc: mean(d_pred),
        comp: mean(d_gt),
        precision,
        recall,
        f_score,
    }
}

/// Fixed-width table with one labelled row per entry.
pub fn format_table(rows: &[(&str, Vec<(&str, f64)>)]) -> String {
    let mut out = String::new();
    let Some((_, first)) = rows.first() else {
        return out;
    };
    let label_w = rows.iter().map(|(l, _)| l.len()).max().unwrap_or(0).max(5);
    let _ = write!(out, "{:<label_w$}", "");
    for (name, _) in first {
        let _ = write!(out, " {name:>10}");
    }
    out.push('\n');
    for (label, cols) in rows {
        let _ = write!(out, "{label:<label_w$}");
        for (_, v) in cols {
            let _ = write!(out, " {v:>10.4}");
        }
        out.push('\n');
    }
    out
}

/// `prefix.Name=value` lines with fixed precision.
pub fn format_key_values(prefix: &str, cols: &[(&str, f64)]) -> String {
    cols.iter()
        .map(|(k, v)| format!("{prefix}.{k}={v:.6}\n"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::VoxelGridSpec;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dm(vals: &[f64]) -> DepthMap {
        DepthMap::from_values(vals.len(), 1, vals.to_vec()).unwrap()
    }

    #[test]
    fn depth_examples() {
        let a = dm(&[1.0, 2.0, 3.0]);
        let r = eval_depth(&a, &a).unwrap();
        assert_eq!(
            (r.abs_rel, r.abs_diff, r.sq_rel, r.rmse, r.n),
            (0.0, 0.0, 0.0, 0.0, 3)
        );
        let r = eval_depth(&dm(&[1.0]), &dm(&[2.0])).unwrap();
        assert_eq!(
            (r.abs_rel, r.abs_diff, r.sq_rel, r.rmse),
            (1.0, 1.0, 1.0, 1.0)
        );
        let r = eval_depth(&dm(&[1.0, 1.0]), &dm(&[2.0, 4.0])).unwrap();
        assert_eq!(r.abs_diff, 2.0);
        assert!((r.rmse - 5f64.sqrt()).abs() < 1e-15);
        let r = eval_depth_pairs(
            &[(&dm(&[1.0]), &dm(&[2.0]))],
            RelativeDenominator::GroundTruth,
        )
        .unwrap();
        assert_eq!((r.abs_rel, r.sq_rel), (0.5, 0.5));
        assert!(eval_depth(&DepthMap::invalid(2, 1), &dm(&[1.0, 1.0])).is_err());
        assert!(eval_depth(&dm(&[1.0]), &dm(&[1.0, 1.0])).is_err());
    }

    #[test]
    fn invalid_pixels_do_not_count() {
        let mut p = dm(&[1.0, 2.0, 5.0]);
        let g = dm(&[1.5, 2.5, 1.0]);
        let full = eval_depth(&p, &g).unwrap();
        p.set(2, 0, None);
        let masked = eval_depth(&p, &g).unwrap();
        let direct = eval_depth(&dm(&[1.0, 2.0]), &dm(&[1.5, 2.5])).unwrap();
        assert_eq!(masked, direct);
        assert_ne!(full, masked);
    }

    #[test]
    fn tsdf_l1_selection() {
        let spec = VoxelGridSpec::new([0.0; 3], 0.1, [3, 1, 1]).unwrap();
        let mut gt = TsdfVolume::new(spec, 0.1).unwrap();
        gt.values = vec![0.5, 1.0, -0.2];
        gt.weights = vec![1.0; 3];
        let mut pred = gt.clone();
        assert_eq!(eval_tsdf_l1(&pred, &gt).unwrap(), 0.0);
        pred.values = vec![0.0; 3];
        assert!((eval_tsdf_l1(&pred, &gt).unwrap() - 0.35).abs() < 1e-15);
        gt.values = vec![1.0; 3];
        assert!(eval_tsdf_l1(&pred, &gt).is_err());
    }

    #[test]
    fn cloud_examples() {
        let o = [[0.0, 0.0, 0.0]];
        let r = eval_pointcloud(&[[0.03, 0.0, 0.0]], &o, 0.05).unwrap();
        assert!((r.acc - 0.03).abs() < 1e-15 && (r.comp - 0.03).abs() < 1e-15);
        assert_eq!((r.precision, r.recall, r.f_score), (1.0, 1.0, 1.0));
        let r = eval_pointcloud(&[[0.06, 0.0, 0.0]], &o, 0.05).unwrap();
        assert_eq!((r.precision, r.recall, r.f_score), (0.0, 0.0, 0.0));
        let pts = random_cloud(1, 30);
        let r = eval_pointcloud(&pts, &pts, 0.05).unwrap();
        assert_eq!(
            (r.acc, r.comp, r.precision, r.recall, r.f_score),
            (0.0, 0.0, 1.0, 1.0, 1.0)
        );
        assert!(eval_pointcloud(&[], &o, 0.05).is_err());
        assert!(eval_pointcloud(&o, &[], 0.05).is_err());
    }

    #[test]
    fn l1_and_l2_differ_on_diagonals() {
        let r1 = eval_pointcloud_with(&[[0.03, 0.03, 0.0]], &[[0.0; 3]], 0.05, PointDistance::L1)
            .unwrap();
        let r2 = eval_pointcloud_with(&[[0.03, 0.03, 0.0]], &[[0.0; 3]], 0.05, PointDistance::L2)
            .unwrap();
        assert_eq!(r1.f_score, 0.0);
        assert_eq!(r2.f_score, 1.0);
    }

    #[test]
    fn kd_tree_handles_duplicates() {
        let mut pts = vec![[0.5, 0.5, 0.5]; 500];
        pts.push([0.0, 0.0, 0.0]);
        let t = KdTree::new(&pts);
        assert_eq!(t.nearest(&[0.01, 0.0, 0.0], PointDistance::L1), 0.01);
        assert_eq!(
            t.nearest(&[0.5, 0.5, 0.6], PointDistance::L2),
            0.09999999999999998
        );
    }

    #[test]
    fn tables_are_stable() {
        let r = DepthEvalReport {
            abs_rel: 0.1,
            abs_diff: 0.25,
            sq_rel: 0.0125,
            rmse: 0.3,
            n: 4,
        };
        let t = format_table(&[("before", r.columns())]);
        let expect = concat!(
            "           AbsRel    AbsDiff      SqRel       RMSE\n",
            "before     0.1000     0.2500     0.0125     0.3000\n",
        );
        assert_eq!(t, expect);
        assert_eq!(
            format_key_values("depth", &r.columns()[..1]),
            "depth.AbsRel=0.100000\n"
        );
    }

    fn random_cloud(seed: u64, n: usize) -> Vec<[f64; 3]> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                // coarse lattice values force many exact ties
                let mut p = [0.0; 3];
                for x in &mut p {
                    *x = if rng.random_bool(0.3) {
                        (rng.random_range(0..5) as f64) * 0.1
                    } else {
                        rng.random_range(-0.5..0.5)
                    };
                }
                p
            })
            .collect()
    }

    fn brute(pred: &[[f64; 3]], gt: &[[f64; 3]], m: PointDistance) -> GeomEvalReport {
        let nn = |q: &[f64; 3], s: &[[f64; 3]]| {
            s.iter().map(|p| m.eval(p, q)).fold(f64::INFINITY, f64::min)
        };
        let dp: Vec<f64> = pred.iter().map(|q| nn(q, gt)).collect();
        let dg: Vec<f64> = gt.iter().map(|q| nn(q, pred)).collect();
        report_from_distances(&dp, &dg, 0.05)
    }

    #[test]
    fn matches_brute_force() {
        for seed in 0..50 {
            let a = random_cloud(seed, 100);
            let b = random_cloud(seed + 500, 100);
            for m in [PointDistance::L1, PointDistance::L2] {
                let fast = eval_pointcloud_with(&a, &b, 0.05, m).unwrap();
                let slow = brute(&a, &b, m);
                for ((_, x), (_, y)) in fast.columns().iter().zip(slow.columns()) {
                    assert!((x - y).abs() <= 1e-12);
                }
            }
        }
    }

    proptest! {
        #[test]
        fn invariant_to_translation_and_axis_permutation(seed in 0u64..500, tx in -1.0f64..1.0, perm in 0usize..6) {
            let a = random_cloud(seed, 40);
            let b = random_cloud(seed + 1, 40);
            let perms = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
            let p = perms[perm];
            let tf = |c: &[[f64; 3]]| -> Vec<[f64; 3]> { c.iter().map(|q| [q[p[0]] + tx, -q[p[1]], q[p[2]] - tx]).collect() };
            let r0 = eval_pointcloud(&a, &b, 0.05).unwrap();
            let r1 = eval_pointcloud(&tf(&a), &tf(&b), 0.05).unwrap();
            prop_assert!((r0.acc - r1.acc).abs() < 1e-9 && (r0.comp - r1.comp).abs() < 1e-9);
            prop_assert!((r0.f_score - r1.f_score).abs() < 1e-12);
        }

        #[test]
        fn depth_order_free(vals in prop::collection::vec((0.5f64..3.0, 0.5f64..3.0), 1..30)) {
            let p: Vec<f64> = vals.iter().map(|v| v.0).collect();
            let g: Vec<f64> = vals.iter().map(|v| v.1).collect();
            let r0 = eval_depth(&dm(&p), &dm(&g)).unwrap();
            let r1 = eval_depth(&dm(&p.iter().rev().copied().collect::<Vec<_>>()), &dm(&g.iter().rev().copied().collect::<Vec<_>>())).unwrap();
            prop_assert!((r0.abs_rel - r1.abs_rel).abs() < 1e-12 && (r0.rmse - r1.rmse).abs() < 1e-12);
        }
    }
}
