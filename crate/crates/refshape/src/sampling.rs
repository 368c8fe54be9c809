//! Differentiation-free point-set kernels: farthest point sampling, ball
//! grouping, k-nearest neighbors, and inverse-distance interpolation
//! weights. The networks treat these as fixed geometric plans; gradients
//! never flow through them.
//!
//! Every kernel is deterministic. Distance ties break toward the smallest
//! index, and farthest point sampling seeds at the lexicographically
//! smallest point, so results do not depend on input ordering except
//! through exact ties. That makes the downstream networks equivariant
//! under vertex permutation on tie-free point sets.

use crate::error::{Error, Result};
use crate::geom::{dist2, Point3};

/// Squared-distance comparator key with index tie-break.
#[inline]
fn by_dist_then_index(a: &(f64, usize), b: &(f64, usize)) -> std::cmp::Ordering {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
}

/// Farthest point sampling. Returns `n_sub` indices in selection order.
///
/// The seed is the lexicographically smallest point (ties toward the
/// smallest index); each following pick maximizes the distance to the
/// already-selected set, ties again toward the smallest index. Selecting
/// all points returns a permutation of `0..N`.
pub fn farthest_point_sample(points: &[Point3], n_sub: usize) -> Result<Vec<usize>> {
    if points.is_empty() {
        return Err(Error::Argument("cannot sample from an empty point set".into()));
    }
    if n_sub == 0 || n_sub > points.len() {
        return Err(Error::Argument(format!(
            "sample size {} must be in 1..={}",
            n_sub,
            points.len()
        )));
    }
    let seed = (0..points.len())
        .min_by(|&i, &j| {
            points[i][0]
                .total_cmp(&points[j][0])
                .then(points[i][1].total_cmp(&points[j][1]))
                .then(points[i][2].total_cmp(&points[j][2]))
                .then(i.cmp(&j))
        })
        .expect("non-empty");

    let mut selected = Vec::with_capacity(n_sub);
    let mut taken = vec![false; points.len()];
    let mut min_d2 = vec![f64::INFINITY; points.len()];
    selected.push(seed);
    taken[seed] = true;
    while selected.len() < n_sub {
        let last = points[*selected.last().expect("non-empty")];
        let mut best = usize::MAX;
        let mut best_d2 = f64::NEG_INFINITY;
        for (i, p) in points.iter().enumerate() {
            if taken[i] {
                continue;
            }
            let d2 = dist2(*p, last).min(min_d2[i]);
            min_d2[i] = d2;
            // strict '>' keeps the smallest index on ties
            if d2 > best_d2 {
                best_d2 = d2;
                best = i;
            }
        }
        selected.push(best);
        taken[best] = true;
    }
    Ok(selected)
}

/// One ball-grouping result: the gathered point indices nearest-first, plus
/// the index (into the queried point set) of the point nearest the center.
/// When centers are drawn from the point set itself, `center` is that point.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BallGroup {
    pub center: usize,
    pub neighbors: Vec<usize>,
}

/// Per-center groups from [`ball_query`]. Group `i` belongs to center `i`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BallGroups {
    pub groups: Vec<BallGroup>,
}

/// Gathers, for every center, up to `max_k` points within `radius`,
/// nearest-first with index tie-break. A center with no point in range
/// gets a single-element group holding its nearest point, so every group
/// has between 1 and `max_k` members.
pub fn ball_query(
    centers: &[Point3],
    points: &[Point3],
    radius: f64,
    max_k: usize,
) -> Result<BallGroups> {
    if points.is_empty() {
        return Err(Error::Argument("ball query over an empty point set".into()));
    }
    if !(radius > 0.0) {
        return Err(Error::Argument(format!("radius must be positive, got {radius}")));
    }
    if max_k == 0 {
        return Err(Error::Argument("max_k must be at least 1".into()));
    }
    let r2 = radius * radius;
    let mut groups = Vec::with_capacity(centers.len());
    let mut scratch: Vec<(f64, usize)> = Vec::with_capacity(points.len());
    for &c in centers {
        scratch.clear();
        scratch.extend(points.iter().enumerate().map(|(i, &p)| (dist2(p, c), i)));
        let nearest = scratch
            .iter()
            .copied()
            .min_by(by_dist_then_index)
            .expect("non-empty")
            .1;
        scratch.retain(|&(d2, _)| d2 <= r2);
        scratch.sort_unstable_by(by_dist_then_index);
        scratch.truncate(max_k);
        let neighbors = if scratch.is_empty() {
            vec![nearest]
        } else {
            scratch.iter().map(|&(_, i)| i).collect()
        };
        groups.push(BallGroup {
            center: nearest,
            neighbors,
        });
    }
    Ok(BallGroups { groups })
}

/// Exact k-nearest neighbors of every query, nearest-first with index
/// tie-break. Requires `1 <= k <= sources.len()`.
pub fn knn(queries: &[Point3], sources: &[Point3], k: usize) -> Result<Vec<Vec<usize>>> {
    if k == 0 || k > sources.len() {
        return Err(Error::Argument(format!(
            "k = {} must be in 1..={}",
            k,
            sources.len()
        )));
    }
    let mut out = Vec::with_capacity(queries.len());
    let mut scratch: Vec<(f64, usize)> = Vec::with_capacity(sources.len());
    for &q in queries {
        scratch.clear();
        scratch.extend(sources.iter().enumerate().map(|(i, &p)| (dist2(p, q), i)));
        // partial selection: only the first k need full ordering
        scratch.select_nth_unstable_by(k - 1, by_dist_then_index);
        scratch.truncate(k);
        scratch.sort_unstable_by(by_dist_then_index);
        out.push(scratch.iter().map(|&(_, i)| i).collect());
    }
    Ok(out)
}

/// Inverse-distance weights over the 3 nearest sources of every query.
#[derive(Debug, Clone, PartialEq)]
pub struct InterpolationWeights {
    /// 3 source indices per query, nearest-first.
    pub indices: Vec<[usize; 3]>,
    /// Matching convex weights; each row sums to 1.
    pub weights: Vec<[f64; 3]>,
}

/// Computes 3-nearest-neighbor inverse-distance weights used to upsample
/// features from a coarse point set onto a finer one. If a query sits on
/// top of a source (distance below 1e-10), that source takes weight 1 and
/// the others 0; with several coincident sources the nearest-first order
/// picks the smallest index.
pub fn interpolation_weights(
    queries: &[Point3],
    sources: &[Point3],
) -> Result<InterpolationWeights> {
    if sources.len() < 3 {
        return Err(Error::Argument(format!(
            "interpolation needs at least 3 sources, got {}",
            sources.len()
        )));
    }
    let nn = knn(queries, sources, 3)?;
    let mut indices = Vec::with_capacity(queries.len());
    let mut weights = Vec::with_capacity(queries.len());
    for (q, ids) in queries.iter().zip(nn) {
        let idx = [ids[0], ids[1], ids[2]];
        let d: Vec<f64> = idx.iter().map(|&i| dist2(sources[i], *q).sqrt()).collect();
        let mut w = [0.0; 3];
        if let Some(hit) = d.iter().position(|&di| di < 1e-10) {
            w[hit] = 1.0;
        } else {
            let inv: Vec<f64> = d.iter().map(|&di| 1.0 / di).collect();
            let total: f64 = inv.iter().sum();
            for a in 0..3 {
                w[a] = inv[a] / total;
            }
        }
        indices.push(idx);
        weights.push(w);
    }
    Ok(InterpolationWeights { indices, weights })
}
