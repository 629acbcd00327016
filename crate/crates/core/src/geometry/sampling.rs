use super::Point;
use crate::error::{Error, Result};

#[inline]
pub(crate) fn sq_dist(a: &Point, b: &Point) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// Greedy maximin subset of `count` indices, seeded at index 0.
///
/// Each step picks the point whose distance to the already selected set is
/// largest; ties go to the lowest index.
pub fn farthest_point_sample(points: &[Point], count: usize) -> Result<Vec<usize>> {
    let n = points.len();
    if count == 0 || count > n {
        return Err(Error::invalid(format!(
            "farthest point sampling needs 1 <= count <= {n}, got {count}"
        )));
    }
    let mut selected = Vec::with_capacity(count);
    let mut min_dist = vec![f64::INFINITY; n];
    let mut current = 0usize;
    min_dist[0] = -1.0;
    selected.push(current);
    while selected.len() < count {
        let anchor = points[current];
        let mut best = usize::MAX;
        let mut best_dist = f64::NEG_INFINITY;
        for (i, p) in points.iter().enumerate() {
            let d = sq_dist(p, &anchor);
            if min_dist[i] >= 0.0 && d < min_dist[i] {
                min_dist[i] = d;
            }
            if selected_contains(&min_dist, i) {
                continue;
            }
            if min_dist[i] > best_dist {
                best_dist = min_dist[i];
                best = i;
            }
        }
        if best == usize::MAX {
            break;
        }
        // A selected point has distance 0 to itself; mark it so it is never
        // picked again even when duplicates are present.
        min_dist[best] = -1.0;
        current = best;
        selected.push(current);
    }
    Ok(selected)
}

#[inline]
fn selected_contains(min_dist: &[f64], i: usize) -> bool {
    min_dist[i] < 0.0
}

/// For each query, the indices of the `k` nearest reference points sorted by
/// ascending distance (ties by lowest index). Returned row-major, `M*k`.
pub fn knn(query: &[Point], reference: &[Point], k: usize) -> Result<Vec<usize>> {
    if k > reference.len() {
        return Err(Error::invalid(format!(
            "knn needs k <= {} reference points, got k = {k}",
            reference.len()
        )));
    }
    let mut out = Vec::with_capacity(query.len() * k);
    let mut scratch: Vec<(f64, usize)> = Vec::with_capacity(reference.len());
    for q in query {
        scratch.clear();
        scratch.extend(reference.iter().enumerate().map(|(i, r)| (sq_dist(q, r), i)));
        let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if k < scratch.len() && k > 0 {
            scratch.select_nth_unstable_by(k - 1, cmp);
        }
        let head = &mut scratch[..k];
        head.sort_unstable_by(cmp);
        out.extend(head.iter().map(|&(_, i)| i));
    }
    Ok(out)
}
