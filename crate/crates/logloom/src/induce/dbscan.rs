//! Density clustering over a precomputed distance function. Deterministic:
//! points are visited in index order, so cluster ids and border-point
//! ownership never depend on iteration luck.

/// Returns a cluster id per point; `None` marks noise. A point is core
/// when at least `min_samples` points (itself included) lie within `eps`.
/// Border points join the first cluster that reaches them.
pub fn dbscan(
    n: usize,
    eps: f64,
    min_samples: usize,
    dist: impl Fn(usize, usize) -> f64,
) -> Vec<Option<usize>> {
    let mut labels: Vec<Option<usize>> = vec![None; n];
    let mut visited = vec![false; n];
    let neighbours = |i: usize| -> Vec<usize> {
        (0..n).filter(|&j| dist(i, j) <= eps).collect()
    };
    let mut next_cluster = 0usize;
    for start in 0..n {
        if visited[start] {
            continue;
        }
        visited[start] = true;
        let seed = neighbours(start);
        if seed.len() < min_samples {
            continue;
        }
        let cluster = next_cluster;
        next_cluster += 1;
        labels[start] = Some(cluster);
        let mut queue: std::collections::VecDeque<usize> = seed.into();
        while let Some(p) = queue.pop_front() {
            if labels[p].is_none() {
                labels[p] = Some(cluster);
            }
            if visited[p] {
                continue;
            }
            visited[p] = true;
            let reach = neighbours(p);
            if reach.len() >= min_samples {
                queue.extend(reach);
            }
        }
    }
    labels
}
