//! Variable clustering: each variable is a point whose coordinates are its
//! standardized column, compared by Euclidean distance.

use std::cmp::Ordering;
use std::path::Path;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::dataset::{CityDailyPanel, Variable};
use crate::error::{Error, Result};
use crate::features::DesignMatrix;
use crate::linalg;

#[derive(Debug, Clone, PartialEq)]
pub struct VariablePointSet {
    pub names: Vec<String>,
    pub points: Vec<Vec<f64>>,
}

impl VariablePointSet {
    pub fn new(names: Vec<String>, points: Vec<Vec<f64>>) -> Result<Self> {
        if names.len() != points.len() {
            return Err(Error::Shape("one name per point required".into()));
        }
        if let Some(first) = points.first() {
            if points.iter().any(|p| p.len() != first.len()) {
                return Err(Error::Shape("points differ in dimension".into()));
            }
        }
        let mut sorted = names.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != names.len() {
            return Err(Error::Argument("point names must be unique".into()));
        }
        Ok(Self { names, points })
    }

    /// Standardize each column (population sd) and use it as a point.
    pub fn from_columns(names: Vec<String>, columns: Vec<Vec<f64>>) -> Result<Self> {
        let points = names
            .iter()
            .zip(columns)
            .map(|(name, col)| {
                let m = linalg::mean(&col);
                let s = linalg::pop_sd(&col);
                if !(s > 0.0) {
                    return Err(Error::DegenerateColumn { column: name.clone() });
                }
                Ok(col.iter().map(|v| (v - m) / s).collect())
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(names, points)
    }

    pub fn from_panel(panel: &CityDailyPanel, vars: &[Variable]) -> Result<Self> {
        let cols = vars
            .iter()
            .map(|&v| {
                Ok((0..panel.cities().len())
                    .map(|c| panel.complete_column(c, v))
                    .collect::<Result<Vec<_>>>()?
                    .concat())
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_columns(vars.iter().map(|v| v.name().to_string()).collect(), cols)
    }

    pub fn from_design(design: &DesignMatrix) -> Result<Self> {
        let cols = (0..design.n_cols()).map(|j| design.column(j)).collect();
        Self::from_columns(design.names.clone(), cols)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KMeansResult {
    pub k: usize,
    pub assignments: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub inertia: f64,
    /// Inertia after each centroid update.
    pub inertia_trace: Vec<f64>,
    pub iterations: usize,
    pub seed: u64,
}

/// Lloyd's algorithm from `k` distinct points drawn uniformly with `seed`.
///
/// Initial points are drawn from the points in lexicographic coordinate
/// order, so the partition does not depend on input order.
/// Stops when assignments no longer change or after `max_iter` updates.
/// An empty cluster takes the point farthest from its own centroid.
pub fn kmeans(points: &VariablePointSet, k: usize, seed: u64, max_iter: usize) -> Result<KMeansResult> {
    let n = points.len();
    if k == 0 || k > n {
        return Err(Error::Argument(format!("k = {k} must lie in 1..={n}")));
    }
    let pts = &points.points;
    let mut rng = crate::rng::rng_from_seed(seed);
    let mut canonical: Vec<usize> = (0..n).collect();
    canonical.sort_by(|&a, &b| {
        pts[a].iter().zip(&pts[b]).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()).unwrap_or(Ordering::Equal)
    });
    let mut init: Vec<usize> = sample(&mut rng, n, k).into_vec();
    init.sort_unstable();
    let mut centroids: Vec<Vec<f64>> = init.iter().map(|&i| pts[canonical[i]].clone()).collect();

    let nearest = |centroids: &[Vec<f64>]| -> Vec<usize> {
        pts.iter()
            .map(|p| {
                let mut best = 0;
                let mut best_d = f64::INFINITY;
                for (c, mu) in centroids.iter().enumerate() {
                    let d = sq_dist(p, mu);
                    if d < best_d {
                        best_d = d;
                        best = c;
                    }
                }
                best
            })
            .collect()
    };
    let inertia_of = |assign: &[usize], centroids: &[Vec<f64>]| -> f64 {
        pts.iter().zip(assign).map(|(p, &c)| sq_dist(p, &centroids[c])).sum()
    };

    let mut assign = nearest(&centroids);
    let mut trace = Vec::new();
    let mut iterations = 0;
    while iterations < max_iter.max(1) {
        iterations += 1;
        repair_empty(pts, &mut assign, &centroids, k);
        centroids = means(pts, &assign, k);
        trace.push(inertia_of(&assign, &centroids));
        let next = nearest(&centroids);
        if next == assign {
            break;
        }
        assign = next;
    }
    repair_empty(pts, &mut assign, &centroids, k);
    let inertia = inertia_of(&assign, &centroids);
    Ok(KMeansResult {
        k,
        assignments: assign,
        centroids,
        inertia,
        inertia_trace: trace,
        iterations,
        seed,
    })
}

fn means(pts: &[Vec<f64>], assign: &[usize], k: usize) -> Vec<Vec<f64>> {
    let dim = pts.first().map_or(0, Vec::len);
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (p, &c) in pts.iter().zip(assign) {
        counts[c] += 1;
        for (s, v) in sums[c].iter_mut().zip(p) {
            *s += v;
        }
    }
    for (s, &n) in sums.iter_mut().zip(&counts) {
        for v in s.iter_mut() {
            *v /= n.max(1) as f64;
        }
    }
    sums
}

fn repair_empty(pts: &[Vec<f64>], assign: &mut [usize], centroids: &[Vec<f64>], k: usize) {
    loop {
        let mut counts = vec![0usize; k];
        for &c in assign.iter() {
            counts[c] += 1;
        }
        let Some(empty) = counts.iter().position(|&n| n == 0) else {
            return;
        };
        let donor = (0..pts.len())
            .filter(|&i| counts[assign[i]] > 1)
            .max_by(|&a, &b| {
                sq_dist(&pts[a], &centroids[assign[a]])
                    .partial_cmp(&sq_dist(&pts[b], &centroids[assign[b]]))
                    .unwrap()
                    .then(b.cmp(&a))
            });
        match donor {
            Some(i) => assign[i] = empty,
            None => return,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Linkage {
    Single,
    Complete,
    #[default]
    Average,
}

impl std::str::FromStr for Linkage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(Linkage::Single),
            "complete" => Ok(Linkage::Complete),
            "average" => Ok(Linkage::Average),
            other => Err(Error::Argument(format!("unknown linkage `{other}`"))),
        }
    }
}

/// One agglomeration step. Leaves are nodes `0..n`; the merge at step `s`
/// creates node `n + s`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Merge {
    pub a: usize,
    pub b: usize,
    pub height: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dendrogram {
    pub leaves: Vec<String>,
    pub merges: Vec<Merge>,
}

impl Dendrogram {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["step", "node_a", "node_b", "height"])?;
        for (s, m) in self.merges.iter().enumerate() {
            w.write_record([(s + 1).to_string(), m.a.to_string(), m.b.to_string(), m.height.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Agglomerative clustering on Euclidean distances. Each step merges the
/// active pair with the smallest linkage distance, ties going to the
/// smallest `(a, b)` node pair.
pub fn hierarchical(points: &VariablePointSet, linkage: Linkage) -> Result<Dendrogram> {
    let n = points.len();
    if n < 2 {
        return Err(Error::Argument("hierarchical clustering needs ≥ 2 points".into()));
    }
    let dist: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| sq_dist(&points.points[i], &points.points[j]).sqrt()).collect())
        .collect();
    // (node id, member leaves)
    let mut active: Vec<(usize, Vec<usize>)> = (0..n).map(|i| (i, vec![i])).collect();
    let mut merges = Vec::with_capacity(n - 1);
    for step in 0..n - 1 {
        let mut best: Option<(f64, usize, usize)> = None;
        for x in 0..active.len() {
            for y in (x + 1)..active.len() {
                let d = linkage_distance(&dist, &active[x].1, &active[y].1, linkage);
                let (a, b) = (active[x].0.min(active[y].0), active[x].0.max(active[y].0));
                let better = match best {
                    None => true,
                    Some((bd, bx, by)) => {
                        let (ba, bb) = (active[bx].0.min(active[by].0), active[bx].0.max(active[by].0));
                        d < bd || (d == bd && (a, b) < (ba, bb))
                    }
                };
                if better {
                    best = Some((d, x, y));
                }
            }
        }
        let (height, x, y) = best.unwrap();
        let (ida, idb) = (active[x].0, active[y].0);
        merges.push(Merge { a: ida.min(idb), b: ida.max(idb), height });
        let mut members = active[x].1.clone();
        members.extend(&active[y].1);
        active.remove(y);
        active.remove(x);
        active.push((n + step, members));
    }
    Ok(Dendrogram { leaves: points.names.clone(), merges })
}

fn linkage_distance(dist: &[Vec<f64>], a: &[usize], b: &[usize], linkage: Linkage) -> f64 {
    let pairs = a.iter().flat_map(|&i| b.iter().map(move |&j| dist[i][j]));
    match linkage {
        Linkage::Single => pairs.fold(f64::INFINITY, f64::min),
        Linkage::Complete => pairs.fold(0.0, f64::max),
        Linkage::Average => pairs.sum::<f64>() / (a.len() * b.len()) as f64,
    }
}

/// Undo the `k − 1` highest merges; clusters are labelled in order of
/// their first leaf.
pub fn cut_dendrogram(d: &Dendrogram, k: usize) -> Result<Vec<usize>> {
    let n = d.leaves.len();
    if k == 0 || k > n {
        return Err(Error::Argument(format!("k = {k} must lie in 1..={n}")));
    }
    let mut parent: Vec<usize> = (0..2 * n).collect();
    fn find(parent: &mut [usize], x: usize) -> usize {
        let mut r = x;
        while parent[r] != r {
            r = parent[r];
        }
        let mut y = x;
        while parent[y] != r {
            let next = parent[y];
            parent[y] = r;
            y = next;
        }
        r
    }
    for (s, m) in d.merges.iter().take(n - k).enumerate() {
        let node = n + s;
        let ra = find(&mut parent, m.a);
        let rb = find(&mut parent, m.b);
        parent[ra] = node;
        parent[rb] = node;
    }
    let mut labels = Vec::with_capacity(n);
    let mut roots: Vec<usize> = Vec::new();
    for leaf in 0..n {
        let r = find(&mut parent, leaf);
        let id = match roots.iter().position(|&x| x == r) {
            Some(i) => i,
            None => {
                roots.push(r);
                roots.len() - 1
            }
        };
        labels.push(id);
    }
    Ok(labels)
}

pub fn write_assignments(path: &Path, names: &[String], clusters: &[usize]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["variable", "cluster"])?;
    for (n, c) in names.iter().zip(clusters) {
        w.write_record([n.clone(), c.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(xs: &[f64]) -> VariablePointSet {
        VariablePointSet::new(
            xs.iter().enumerate().map(|(i, _)| format!("p{i}")).collect(),
            xs.iter().map(|&x| vec![x]).collect(),
        )
        .unwrap()
    }

    /// Brute force over every 2-partition of the points.
    fn best_two_partition(xs: &[f64]) -> (f64, Vec<usize>) {
        let n = xs.len();
        let mut best = (f64::INFINITY, vec![]);
        for mask in 1..(1u32 << n) - 1 {
            let groups: Vec<usize> = (0..n).map(|i| ((mask >> i) & 1) as usize).collect();
            let mut cost = 0.0;
            for g in 0..2 {
                let members: Vec<f64> = (0..n).filter(|&i| groups[i] == g).map(|i| xs[i]).collect();
                let m = members.iter().sum::<f64>() / members.len() as f64;
                cost += members.iter().map(|x| (x - m).powi(2)).sum::<f64>();
            }
            if cost < best.0 {
                best = (cost, groups);
            }
        }
        best
    }

    fn same_partition(a: &[usize], b: &[usize]) -> bool {
        (0..a.len()).all(|i| (0..a.len()).all(|j| (a[i] == a[j]) == (b[i] == b[j])))
    }

    #[test]
    fn kmeans_line_fixture_matches_brute_force() {
        let xs = [0.0, 1.0, 10.0, 11.0];
        let (cost, partition) = best_two_partition(&xs);
        assert_eq!(cost, 1.0);
        for seed in 0..20 {
            let r = kmeans(&line(&xs), 2, seed, 100).unwrap();
            assert_eq!(r.inertia, 1.0);
            assert!(same_partition(&r.assignments, &partition));
        }
    }

    #[test]
    fn kmeans_singletons() {
        let r = kmeans(&line(&[3.0, -1.0, 7.5, 2.0]), 4, 1, 10).unwrap();
        assert_eq!(r.inertia, 0.0);
        let mut a = r.assignments.clone();
        a.sort_unstable();
        assert_eq!(a, vec![0, 1, 2, 3]);
    }

    #[test]
    fn kmeans_rejects_bad_k() {
        assert!(matches!(kmeans(&line(&[1.0, 2.0]), 3, 0, 10), Err(Error::Argument(_))));
        assert!(matches!(kmeans(&line(&[1.0, 2.0]), 0, 0, 10), Err(Error::Argument(_))));
    }

    #[test]
    fn kmeans_separated_groups_and_order_invariance() {
        use rand::Rng;
        let mut rng = crate::rng::rng_from_seed(4);
        let mut pts = Vec::new();
        let mut truth = Vec::new();
        for g in 0..2 {
            for _ in 0..6 {
                let centre = if g == 0 { -50.0 } else { 50.0 };
                pts.push(vec![centre + rng.random::<f64>(), centre + rng.random::<f64>()]);
                truth.push(g);
            }
        }
        let names: Vec<String> = (0..pts.len()).map(|i| format!("v{i}")).collect();
        let set = VariablePointSet::new(names.clone(), pts.clone()).unwrap();
        for seed in 0..10 {
            let r = kmeans(&set, 2, seed, 100).unwrap();
            assert!(same_partition(&r.assignments, &truth));
            assert!(r.inertia_trace.windows(2).all(|w| w[1] <= w[0] + 1e-12));
            assert_eq!(r, kmeans(&set, 2, seed, 100).unwrap());
        }
        let perm: Vec<usize> = (0..pts.len()).rev().collect();
        let rev = VariablePointSet::new(
            perm.iter().map(|&i| names[i].clone()).collect(),
            perm.iter().map(|&i| pts[i].clone()).collect(),
        )
        .unwrap();
        let a = kmeans(&set, 2, 3, 100).unwrap().assignments;
        let b = kmeans(&rev, 2, 3, 100).unwrap().assignments;
        let b_unperm: Vec<usize> = (0..pts.len()).map(|i| b[perm.iter().position(|&p| p == i).unwrap()]).collect();
        assert!(same_partition(&a, &b_unperm));
    }

    #[test]
    fn hierarchical_two_points() {
        let d = hierarchical(&line(&[0.0, 4.0]), Linkage::Average).unwrap();
        assert_eq!(d.merges, vec![Merge { a: 0, b: 1, height: 4.0 }]);
    }

    #[test]
    fn hierarchical_three_point_single_linkage() {
        let d = hierarchical(&line(&[0.0, 1.0, 10.0]), Linkage::Single).unwrap();
        assert_eq!(d.merges[0], Merge { a: 0, b: 1, height: 1.0 });
        assert_eq!(d.merges[1], Merge { a: 2, b: 3, height: 9.0 });
        assert_eq!(cut_dendrogram(&d, 2).unwrap(), vec![0, 0, 1]);
        assert_eq!(cut_dendrogram(&d, 1).unwrap(), vec![0, 0, 0]);
        assert_eq!(cut_dendrogram(&d, 3).unwrap(), vec![0, 1, 2]);
        assert!(cut_dendrogram(&d, 0).is_err());
        assert!(cut_dendrogram(&d, 4).is_err());
    }

    #[test]
    fn hierarchical_four_point_linkages_differ() {
        // points 0, 2, 5, 9; distance matrix by hand:
        //      0  2  5  9
        //  0   0  2  5  9
        //  2   2  0  3  7
        //  5   5  3  0  4
        //  9   9  7  4  0
        let pts = line(&[0.0, 2.0, 5.0, 9.0]);
        let single = hierarchical(&pts, Linkage::Single).unwrap();
        // {0,2}@2; {0,2}-5 min(5,3)=3; then 9: min(9,7,4)=4
        let hs: Vec<f64> = single.merges.iter().map(|m| m.height).collect();
        assert_eq!(hs, vec![2.0, 3.0, 4.0]);
        let complete = hierarchical(&pts, Linkage::Complete).unwrap();
        // {0,2}@2; then {0,2}-5 max=5, 5-9 = 4 → {5,9}@4; then max(9,7,5,...)=9
        let hc: Vec<f64> = complete.merges.iter().map(|m| m.height).collect();
        assert_eq!(hc, vec![2.0, 4.0, 9.0]);
        assert_eq!(complete.merges[1], Merge { a: 2, b: 3, height: 4.0 });
        let average = hierarchical(&pts, Linkage::Average).unwrap();
        // {0,2}@2; {0,2}-5 = 4, 5-9 = 4 tie → smallest pair (2,3) vs (2,4): (2,3) is leaf 2 & leaf 3
        assert_eq!(average.merges[1], Merge { a: 2, b: 3, height: 4.0 });
        // {0,2}-{5,9}: (5+9+3+7)/4 = 6
        assert_eq!(average.merges[2].height, 6.0);
    }

    /// Kruskal edge weights, sorted.
    fn mst_weights(xs: &[Vec<f64>]) -> Vec<f64> {
        let n = xs.len();
        let mut edges: Vec<(f64, usize, usize)> = Vec::new();
        for i in 0..n {
            for j in (i + 1)..n {
                edges.push((sq_dist(&xs[i], &xs[j]).sqrt(), i, j));
            }
        }
        edges.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut comp: Vec<usize> = (0..n).collect();
        let mut out = Vec::new();
        for (w, i, j) in edges {
            let (ci, cj) = (comp[i], comp[j]);
            if ci != cj {
                for c in comp.iter_mut() {
                    if *c == cj {
                        *c = ci;
                    }
                }
                out.push(w);
            }
        }
        out
    }

    #[test]
    fn single_linkage_equals_mst() {
        use rand::Rng;
        for seed in 0..10 {
            let mut rng = crate::rng::rng_from_seed(seed);
            let pts: Vec<Vec<f64>> = (0..7).map(|_| (0..3).map(|_| rng.random::<f64>()).collect()).collect();
            let set = VariablePointSet::new((0..7).map(|i| format!("v{i}")).collect(), pts.clone()).unwrap();
            let d = hierarchical(&set, Linkage::Single).unwrap();
            let hs: Vec<f64> = d.merges.iter().map(|m| m.height).collect();
            let mst = mst_weights(&pts);
            for (a, b) in hs.iter().zip(&mst) {
                assert!((a - b).abs() < 1e-12);
            }
            for linkage in [Linkage::Single, Linkage::Complete, Linkage::Average] {
                let d = hierarchical(&set, linkage).unwrap();
                assert_eq!(d.merges.len(), 6);
                assert!(d.merges.windows(2).all(|w| w[1].height >= w[0].height - 1e-12));
            }
        }
    }
}
