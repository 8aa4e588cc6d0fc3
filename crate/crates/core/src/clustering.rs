//! k-means++ clustering of IATE vectors and cluster profiles.

use rand::Rng as _;
use rayon::prelude::*;
use serde::Serialize;

use crate::dataset::{Dataset, FeatureKind};
use crate::rng::{derive_indexed, rng_from, Rng};
use crate::{McfError, Result};

const MAX_ITER: usize = 300;
const SHIFT_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClusterModel {
    pub centers: Vec<Vec<f64>>,
    pub assignment: Vec<usize>,
    pub inertia: f64,
    /// Inertia after every Lloyd iteration of the winning restart, across
    /// the transfer passes in between.
    pub inertia_path: Vec<f64>,
    pub restart: usize,
    pub k_requested: usize,
}

impl ClusterModel {
    pub fn k(&self) -> usize {
        self.centers.len()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.k()];
        for &c in &self.assignment {
            s[c] += 1;
        }
        s
    }
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest center (lowest index on ties) and squared distance.
fn nearest(p: &[f64], centers: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, ctr) in centers.iter().enumerate() {
        let d = dist2(p, ctr);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn seed_centers(points: &[Vec<f64>], k: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut centers = vec![points[rng.random_range(0..n)].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| dist2(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if u < d {
                    pick = i;
                    break;
                }
                u -= d;
            }
            // guard against rounding landing on an already chosen point
            if d2[pick] == 0.0 {
                pick = (0..n).max_by(|&a, &b| d2[a].total_cmp(&d2[b]).then(b.cmp(&a))).expect("points");
            }
            pick
        } else {
            0
        };
        centers.push(points[next].clone());
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(dist2(p, &centers[centers.len() - 1]));
        }
    }
    centers
}

fn lloyd(points: &[Vec<f64>], mut centers: Vec<Vec<f64>>) -> (Vec<Vec<f64>>, Vec<usize>, f64, Vec<f64>) {
    let k = centers.len();
    let mut path = Vec::new();
    let mut assignment = vec![0; points.len()];
    for _ in 0..MAX_ITER {
        let mut d = vec![0.0; points.len()];
        for (i, p) in points.iter().enumerate() {
            let (c, dd) = nearest(p, &centers);
            assignment[i] = c;
            d[i] = dd;
        }
        path.push(d.iter().sum());
        let (mut new, counts) = means(points, &assignment, k);
        for c in 0..k {
            if counts[c] == 0 {
                // reseed an empty cluster at the point farthest from its center
                let far = (0..points.len())
                    .max_by(|&a, &b| d[a].total_cmp(&d[b]).then(b.cmp(&a)))
                    .expect("points");
                new[c] = points[far].clone();
                d[far] = 0.0;
            }
        }
        let shift = centers.iter().zip(&new).map(|(a, b)| dist2(a, b).sqrt()).fold(0.0, f64::max);
        centers = new;
        if shift < SHIFT_TOL {
            break;
        }
    }
    let mut inertia = 0.0;
    for (i, p) in points.iter().enumerate() {
        let (c, dd) = nearest(p, &centers);
        assignment[i] = c;
        inertia += dd;
    }
    path.push(inertia);
    (centers, assignment, inertia, path)
}

fn means(points: &[Vec<f64>], assignment: &[usize], k: usize) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut sums = vec![vec![0.0; points[0].len()]; k];
    let mut counts = vec![0usize; k];
    for (p, &c) in points.iter().zip(assignment) {
        counts[c] += 1;
        for (s, v) in sums[c].iter_mut().zip(p) {
            *s += v;
        }
    }
    let centers = sums
        .into_iter()
        .zip(&counts)
        .map(|(s, &c)| s.into_iter().map(|v| v / c.max(1) as f64).collect())
        .collect();
    (centers, counts)
}

/// Single-point transfers that lower the inertia once the centers follow
/// the move. Returns whether any point moved.
fn transfer_pass(points: &[Vec<f64>], assignment: &mut [usize], k: usize) -> bool {
    let (mut centers, mut counts) = means(points, assignment, k);
    let mut moved = false;
    for (i, p) in points.iter().enumerate() {
        let a = assignment[i];
        if counts[a] < 2 {
            continue;
        }
        let na = counts[a] as f64;
        let leave = na / (na - 1.0) * dist2(p, &centers[a]);
        let mut best: Option<(usize, f64)> = None;
        for b in (0..k).filter(|&b| b != a) {
            let nb = counts[b] as f64;
            let join = nb / (nb + 1.0) * dist2(p, &centers[b]);
            if join < leave * (1.0 - 1e-12) && best.is_none_or(|(_, v)| join < v) {
                best = Some((b, join));
            }
        }
        if let Some((b, _)) = best {
            let (na, nb) = (counts[a] as f64, counts[b] as f64);
            for (t, x) in p.iter().enumerate() {
                centers[a][t] = (centers[a][t] * na - x) / (na - 1.0);
                centers[b][t] = (centers[b][t] * nb + x) / (nb + 1.0);
            }
            counts[a] -= 1;
            counts[b] += 1;
            assignment[i] = b;
            moved = true;
        }
    }
    moved
}

/// Lloyd iterations alternated with transfer passes until neither changes
/// the partition.
fn local_search(points: &[Vec<f64>], centers: Vec<Vec<f64>>) -> (Vec<Vec<f64>>, Vec<usize>, f64, Vec<f64>) {
    let k = centers.len();
    let (mut centers, mut assignment, mut inertia, mut path) = lloyd(points, centers);
    for _ in 0..MAX_ITER {
        if !transfer_pass(points, &mut assignment, k) {
            break;
        }
        let (c, a, i, p) = lloyd(points, means(points, &assignment, k).0);
        centers = c;
        assignment = a;
        inertia = i;
        path.extend(p);
    }
    (centers, assignment, inertia, path)
}

/// Best of `restarts` k-means++ runs by inertia (ties to the earlier restart).
/// Each run alternates Lloyd iterations with single-point transfers.
/// With fewer than `k` distinct points, `k` is reduced.
pub fn kmeans_pp(points: &[Vec<f64>], k: usize, seed: u64, restarts: usize) -> Result<ClusterModel> {
    let n = points.len();
    if k == 0 || restarts == 0 {
        return Err(McfError::config("k and the number of restarts must be positive"));
    }
    if n < k {
        return Err(McfError::data(format!("{n} points cannot form {k} clusters")));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim || p.iter().any(|v| !v.is_finite())) {
        return Err(McfError::data("cluster inputs must be finite and of equal length"));
    }
    let mut distinct: Vec<&Vec<f64>> = points.iter().collect();
    distinct.sort_by(|a, b| a.iter().zip(b.iter()).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()).unwrap_or(std::cmp::Ordering::Equal));
    distinct.dedup();
    let k_used = k.min(distinct.len());
    if k_used < k {
        log::warn!("only {} distinct points; clustering with k = {k_used}", distinct.len());
    }
    let runs: Vec<_> = (0..restarts)
        .into_par_iter()
        .map(|r| {
            let mut rng = rng_from(derive_indexed(seed, "kmeans", r as u64));
            local_search(points, seed_centers(points, k_used, &mut rng))
        })
        .collect();
    let (restart, best) = runs
        .into_iter()
        .enumerate()
        .min_by(|a, b| a.1 .2.total_cmp(&b.1 .2).then(a.0.cmp(&b.0)))
        .expect("at least one restart");
    let (centers, assignment, inertia, inertia_path) = best;
    Ok(ClusterModel {
        centers,
        assignment,
        inertia,
        inertia_path,
        restart,
        k_requested: k,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClusterProfile {
    /// Cluster ids in column order (ascending mean of the first IATE).
    pub order: Vec<usize>,
    pub sizes: Vec<usize>,
    /// Row label and one value per column.
    pub rows: Vec<(String, Vec<f64>)>,
}

/// Mean IATEs, covariate means (category shares in percent) and the mean
/// predicted outcome without programme per cluster.
pub fn cluster_profile(
    model: &ClusterModel,
    iates: &[Vec<f64>],
    iate_labels: &[String],
    ds: &Dataset,
    units: &[usize],
    covariates: &[String],
    nop_prediction: &[f64],
) -> Result<ClusterProfile> {
    let n = model.assignment.len();
    if iates.len() != n || units.len() != n || nop_prediction.len() != n {
        return Err(McfError::data("cluster profile inputs differ in length"));
    }
    let k = model.k();
    let sizes = model.sizes();
    let mean_by = |f: &dyn Fn(usize) -> f64| -> Vec<f64> {
        let mut s = vec![0.0; k];
        for (i, &c) in model.assignment.iter().enumerate() {
            s[c] += f(i);
        }
        s.iter().zip(&sizes).map(|(v, &m)| v / m.max(1) as f64).collect()
    };
    let first = mean_by(&|i| iates[i][0]);
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| first[a].total_cmp(&first[b]).then(a.cmp(&b)));
    let arrange = |v: Vec<f64>| -> Vec<f64> { order.iter().map(|&c| v[c]).collect() };

    let mut rows = Vec::new();
    for (d, label) in iate_labels.iter().enumerate() {
        rows.push((format!("IATE {label}"), arrange(mean_by(&|i| iates[i][d]))));
    }
    for name in covariates {
        let j = ds.require_feature(name)?;
        let f = &ds.spec[j];
        match &f.kind {
            FeatureKind::Ordered => {
                rows.push((name.clone(), arrange(mean_by(&|i| ds.units[units[i]].features[j]))));
            }
            FeatureKind::Categorical { categories } => {
                for (c, cat) in categories.iter().enumerate() {
                    let v = mean_by(&|i| 100.0 * f64::from(u8::from(ds.units[units[i]].features[j] as usize == c)));
                    rows.push((format!("{name}={cat} (%)"), arrange(v)));
                }
            }
        }
    }
    rows.push((
        "Predicted outcome without programme (NOP)".to_string(),
        arrange(mean_by(&|i| nop_prediction[i])),
    ));
    Ok(ClusterProfile {
        sizes: order.iter().map(|&c| sizes[c]).collect(),
        order,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic, SynthConfig};

    fn pts(v: &[f64]) -> Vec<Vec<f64>> {
        v.iter().map(|&x| vec![x]).collect()
    }

    #[test]
    fn four_points_two_clusters() {
        let m = kmeans_pp(&pts(&[0.0, 1.0, 10.0, 11.0]), 2, 1, 10).unwrap();
        assert_eq!(m.inertia, 1.0);
        assert_eq!(m.assignment[0], m.assignment[1]);
        assert_eq!(m.assignment[2], m.assignment[3]);
        assert_ne!(m.assignment[0], m.assignment[2]);
        let mut c: Vec<f64> = m.centers.iter().map(|c| c[0]).collect();
        c.sort_by(f64::total_cmp);
        assert_eq!(c, vec![0.5, 10.5]);
    }

    #[test]
    fn k_equal_n_gives_zero_inertia() {
        let p = vec![vec![0.0, 1.0], vec![2.0, 3.0], vec![5.0, -1.0]];
        let m = kmeans_pp(&p, 3, 4, 3).unwrap();
        assert_eq!(m.inertia, 0.0);
        let mut a = m.assignment.clone();
        a.sort_unstable();
        assert_eq!(a, vec![0, 1, 2]);
    }

    #[test]
    fn duplicates_reduce_k_and_bad_inputs_fail() {
        let m = kmeans_pp(&pts(&[1.0, 1.0, 1.0, 2.0]), 3, 0, 2).unwrap();
        assert_eq!(m.k(), 2);
        assert_eq!(m.k_requested, 3);
        assert!(kmeans_pp(&pts(&[1.0]), 2, 0, 1).is_err());
    }

    #[test]
    fn deterministic_and_monotone() {
        let p: Vec<Vec<f64>> = (0..200)
            .map(|i| {
                let x = f64::from(i);
                vec![(x * 0.37).sin() * 5.0, (x * 0.11).cos() * 3.0, (x % 7.0) - 3.0]
            })
            .collect();
        let a = kmeans_pp(&p, 8, 9, 10).unwrap();
        let b = kmeans_pp(&p, 8, 9, 10).unwrap();
        assert_eq!(a.assignment, b.assignment);
        assert!(a.inertia_path.windows(2).all(|w| w[1] <= w[0] + 1e-9));
        let direct: f64 = p.iter().zip(&a.assignment).map(|(x, &c)| dist2(x, &a.centers[c])).sum();
        assert!((direct - a.inertia).abs() < 1e-9);
    }

    #[test]
    fn profile_rows_and_order() {
        let cfg = SynthConfig {
            n: 300,
            n_noise: 1,
            shares: [0.1, 0.1, 0.1],
            ..SynthConfig::default()
        };
        let ds = generate_synthetic(&cfg, 2).unwrap();
        let iates: Vec<Vec<f64>> = (0..300).map(|i| vec![if i % 2 == 0 { 3.0 } else { 1.0 }, 0.5, -1.0]).collect();
        let m = kmeans_pp(&iates, 2, 1, 5).unwrap();
        let units: Vec<usize> = (0..300).collect();
        let labels: Vec<String> = ["SVT-NOP", "LVT-NOP", "OT-NOP"].iter().map(|s| s.to_string()).collect();
        let covs = vec!["age".to_string(), "Woman".to_string()];
        let nop = vec![12.0; 300];
        let prof = cluster_profile(&m, &iates, &labels, &ds, &units, &covs, &nop).unwrap();
        assert_eq!(prof.rows[0].1, vec![1.0, 3.0]);
        assert_eq!(prof.rows[1].1, vec![0.5, 0.5]);
        assert_eq!(prof.rows[3].0, "age");
        assert_eq!(prof.rows[4].0, "Woman=0 (%)");
        assert_eq!(prof.rows.last().unwrap().1, vec![12.0, 12.0]);
        assert!(cluster_profile(&m, &iates, &labels, &ds, &units, &["nope".to_string()], &nop).is_err());
    }
}
