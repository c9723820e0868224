//! Density clustering of 3-D points with a uniform-grid neighbour index.

use std::collections::HashMap;

use rayon::prelude::*;

type Cell = [i64; 3];

struct GridIndex<'a> {
    points: &'a [[f64; 3]],
    eps: f64,
    cells: HashMap<Cell, Vec<usize>>,
}

impl<'a> GridIndex<'a> {
    fn new(points: &'a [[f64; 3]], eps: f64) -> Self {
        let mut cells: HashMap<Cell, Vec<usize>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            cells.entry(Self::cell(p, eps)).or_default().push(i);
        }
        GridIndex { points, eps, cells }
    }

    fn cell(p: &[f64; 3], eps: f64) -> Cell {
        p.map(|x| (x / eps).floor() as i64)
    }

    /// Indices within `eps` of point `i` (including `i`), ascending.
    fn neighbours(&self, i: usize) -> Vec<usize> {
        let p = &self.points[i];
        let c = Self::cell(p, self.eps);
        let eps2 = self.eps * self.eps;
        let mut out = Vec::new();
        for dz in -1..=1 {
            for dy in -1..=1 {
                for dx in -1..=1 {
                    if let Some(list) = self.cells.get(&[c[0] + dx, c[1] + dy, c[2] + dz]) {
                        out.extend(list.iter().copied().filter(|&j| dist2(p, &self.points[j]) <= eps2));
                    }
                }
            }
        }
        out.sort_unstable();
        out
    }
}

fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (0..3).map(|k| (a[k] - b[k]).powi(2)).sum()
}

/// Cluster label per point, `None` for noise.
///
/// Core points (at least `min_pts` points, itself included, within `eps`)
/// are linked when within `eps` of each other; each border point joins the
/// cluster of its nearest core point, ties going to the lexicographically
/// smallest core coordinate. Clusters are numbered by their smallest point
/// in lexicographic order, so the labelling does not depend on input order.
pub(crate) fn dbscan(points: &[[f64; 3]], eps: f64, min_pts: usize) -> Vec<Option<usize>> {
    let n = points.len();
    let index = GridIndex::new(points, eps);
    let neighbours: Vec<Vec<usize>> = (0..n).into_par_iter().map(|i| index.neighbours(i)).collect();
    let core: Vec<bool> = neighbours.iter().map(|nb| nb.len() >= min_pts).collect();

    let mut comp = vec![usize::MAX; n];
    let mut n_comp = 0;
    for seed in 0..n {
        if !core[seed] || comp[seed] != usize::MAX {
            continue;
        }
        comp[seed] = n_comp;
        let mut stack = vec![seed];
        while let Some(i) = stack.pop() {
            for &j in &neighbours[i] {
                if core[j] && comp[j] == usize::MAX {
                    comp[j] = n_comp;
                    stack.push(j);
                }
            }
        }
        n_comp += 1;
    }

    let lex = |a: usize, b: usize| points[a].iter().zip(&points[b]).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne());
    let mut labels: Vec<Option<usize>> = (0..n).map(|i| core[i].then_some(comp[i])).collect();
    for i in 0..n {
        if core[i] {
            continue;
        }
        let nearest = neighbours[i].iter().copied().filter(|&j| core[j]).min_by(|&a, &b| {
            dist2(&points[i], &points[a])
                .total_cmp(&dist2(&points[i], &points[b]))
                .then_with(|| lex(a, b).unwrap_or(std::cmp::Ordering::Equal))
        });
        labels[i] = nearest.map(|j| comp[j]);
    }

    // canonical numbering
    let mut smallest: Vec<Option<usize>> = vec![None; n_comp];
    for i in 0..n {
        if let Some(c) = labels[i] {
            let better = match smallest[c] {
                None => true,
                Some(s) => lex(i, s) == Some(std::cmp::Ordering::Less),
            };
            if better {
                smallest[c] = Some(i);
            }
        }
    }
    let mut order: Vec<usize> = (0..n_comp).filter(|&c| smallest[c].is_some()).collect();
    order.sort_by(|&a, &b| lex(smallest[a].unwrap(), smallest[b].unwrap()).unwrap_or(std::cmp::Ordering::Equal));
    let mut rename = vec![usize::MAX; n_comp];
    for (new, &old) in order.iter().enumerate() {
        rename[old] = new;
    }
    labels.into_iter().map(|l| l.map(|c| rename[c])).collect()
}
