use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::TriangulateError;
use crate::model::RiskSeries;
use crate::stats;

pub const DEFAULT_TREND_WEIGHT: f64 = 2.0;
pub const KMEANS_RESTARTS: usize = 10;
const MAX_LLOYD: usize = 300;

pub type Point = [f64; 2];

fn dist2(a: &Point, b: &Point) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)
}

fn zscore(xs: &[f64]) -> Vec<f64> {
    let m = stats::mean(xs);
    let sd = stats::population_variance(xs).sqrt();
    if sd > 1e-12 * (1.0 + m.abs()) {
        xs.iter().map(|x| (x - m) / sd).collect()
    } else {
        vec![0.0; xs.len()]
    }
}

/// `(z(risk), w * z(trend))`, each feature standardized on its own.
pub fn cluster_features(risk: &RiskSeries, trend_weight: f64) -> Vec<Point> {
    let r = zscore(&risk.z);
    let t = zscore(&risk.slope);
    r.into_iter().zip(t).map(|(a, b)| [a, trend_weight * b]).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Clustering {
    pub centroids: Vec<Point>,
    pub labels: Vec<usize>,
    pub inertia: f64,
    pub inertia_trace: Vec<f64>,
}

fn assign(points: &[Point], centroids: &[Point]) -> Vec<usize> {
    points
        .iter()
        .map(|p| {
            let mut best = 0;
            for (j, c) in centroids.iter().enumerate().skip(1) {
                if dist2(p, c) < dist2(p, &centroids[best]) {
                    best = j;
                }
            }
            best
        })
        .collect()
}

fn inertia(points: &[Point], centroids: &[Point], labels: &[usize]) -> f64 {
    points.iter().zip(labels).map(|(p, &l)| dist2(p, &centroids[l])).sum()
}

fn plus_plus_seed(points: &[Point], k: usize, rng: &mut ChaCha8Rng) -> Vec<Point> {
    let mut centroids = vec![points[rng.random_range(0..points.len())]];
    while centroids.len() < k {
        let d: Vec<f64> = points
            .iter()
            .map(|p| centroids.iter().map(|c| dist2(p, c)).fold(f64::INFINITY, f64::min))
            .collect();
        let total: f64 = d.iter().sum();
        let next = if total <= 0.0 {
            rng.random_range(0..points.len())
        } else {
            let mut u = rng.random::<f64>() * total;
            let mut idx = points.len() - 1;
            for (i, &di) in d.iter().enumerate() {
                if u < di {
                    idx = i;
                    break;
                }
                u -= di;
            }
            idx
        };
        centroids.push(points[next]);
    }
    centroids
}

fn lloyd(points: &[Point], mut centroids: Vec<Point>) -> Clustering {
    let k = centroids.len();
    let mut labels = assign(points, &centroids);
    let mut trace = vec![inertia(points, &centroids, &labels)];
    for _ in 0..MAX_LLOYD {
        let mut sums = vec![[0.0, 0.0]; k];
        let mut counts = vec![0usize; k];
        for (p, &l) in points.iter().zip(&labels) {
            sums[l][0] += p[0];
            sums[l][1] += p[1];
            counts[l] += 1;
        }
        for j in 0..k {
            if counts[j] > 0 {
                centroids[j] = [sums[j][0] / counts[j] as f64, sums[j][1] / counts[j] as f64];
            }
        }
        // Refill empty clusters with the point farthest from its centroid.
        for j in 0..k {
            if counts[j] == 0 {
                let far = (0..points.len())
                    .max_by(|&a, &b| {
                        dist2(&points[a], &centroids[labels[a]]).total_cmp(&dist2(&points[b], &centroids[labels[b]]))
                    })
                    .expect("non-empty");
                centroids[j] = points[far];
                labels[far] = j;
            }
        }
        trace.push(inertia(points, &centroids, &labels));
        let next = assign(points, &centroids);
        if next == labels {
            break;
        }
        labels = next;
        trace.push(inertia(points, &centroids, &labels));
    }
    let inertia = inertia(points, &centroids, &labels);
    Clustering { centroids, labels, inertia, inertia_trace: trace }
}

/// Lloyd iterations from k-means++ seeds, best of `restarts` by inertia.
pub fn kmeans_points(points: &[Point], k: usize, seed: u64, restarts: usize) -> Result<Clustering, TriangulateError> {
    if k == 0 {
        return Err(TriangulateError::ZeroStates);
    }
    if k > points.len() {
        return Err(TriangulateError::KExceedsPoints { k, n: points.len() });
    }
    if points.iter().any(|p| !p[0].is_finite() || !p[1].is_finite()) {
        return Err(TriangulateError::NonFinite);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<Clustering> = None;
    for _ in 0..restarts.max(1) {
        let fit = lloyd(points, plus_plus_seed(points, k, &mut rng));
        if best.as_ref().is_none_or(|b| fit.inertia < b.inertia) {
            best = Some(fit);
        }
    }
    Ok(best.expect("at least one restart"))
}

/// Mean silhouette; `None` with fewer than two clusters or all singletons.
pub fn silhouette(points: &[Point], labels: &[usize]) -> Option<f64> {
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let mut sizes = vec![0usize; k];
    labels.iter().for_each(|&l| sizes[l] += 1);
    let used = sizes.iter().filter(|&&s| s > 0).count();
    if used < 2 || used == points.len() {
        return None;
    }
    let n = points.len();
    let mut total = 0.0;
    for i in 0..n {
        let mut sums = vec![0.0; k];
        for j in 0..n {
            if i != j {
                sums[labels[j]] += dist2(&points[i], &points[j]).sqrt();
            }
        }
        let own = labels[i];
        if sizes[own] == 1 {
            continue;
        }
        let a = sums[own] / (sizes[own] - 1) as f64;
        let b = (0..k)
            .filter(|&c| c != own && sizes[c] > 0)
            .map(|c| sums[c] / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let m = a.max(b);
        if m > 0.0 {
            total += (b - a) / m;
        }
    }
    Some(total / n as f64)
}

/// Between/within dispersion ratio; `None` when undefined.
pub fn calinski_harabasz(points: &[Point], labels: &[usize]) -> Option<f64> {
    let n = points.len();
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let mut sums = vec![[0.0, 0.0]; k];
    let mut sizes = vec![0usize; k];
    for (p, &l) in points.iter().zip(labels) {
        sums[l][0] += p[0];
        sums[l][1] += p[1];
        sizes[l] += 1;
    }
    let used = sizes.iter().filter(|&&s| s > 0).count();
    if used < 2 || used >= n {
        return None;
    }
    let grand = [
        points.iter().map(|p| p[0]).sum::<f64>() / n as f64,
        points.iter().map(|p| p[1]).sum::<f64>() / n as f64,
    ];
    let centroids: Vec<Point> =
        (0..k).map(|j| if sizes[j] > 0 { [sums[j][0] / sizes[j] as f64, sums[j][1] / sizes[j] as f64] } else { grand }).collect();
    let between: f64 = (0..k).map(|j| sizes[j] as f64 * dist2(&centroids[j], &grand)).sum();
    let within = inertia(points, &centroids, labels);
    if within <= 0.0 {
        return None;
    }
    Some((between / (used - 1) as f64) / (within / (n - used) as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Band {
    Low,
    Mid,
    High,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterFit {
    pub k: usize,
    pub trend_weight: f64,
    pub centroids: Vec<Point>,
    /// Mean of members' standardized risk per cluster.
    pub centroid_risk: Vec<f64>,
    pub sizes: Vec<usize>,
    pub labels: Vec<usize>,
    pub inertia: f64,
    pub silhouette: Option<f64>,
    pub calinski_harabasz: Option<f64>,
    pub seed: u64,
}

pub fn kmeans_fit(risk: &RiskSeries, k: usize, trend_weight: f64, seed: u64) -> Result<ClusterFit, TriangulateError> {
    if !(trend_weight >= 0.0) || !trend_weight.is_finite() {
        return Err(TriangulateError::InvalidWeight(trend_weight));
    }
    let points = cluster_features(risk, trend_weight);
    let c = kmeans_points(&points, k, seed, KMEANS_RESTARTS)?;
    let mut sizes = vec![0usize; k];
    let mut risk_sum = vec![0.0; k];
    for (&l, &z) in c.labels.iter().zip(&risk.z) {
        sizes[l] += 1;
        risk_sum[l] += z;
    }
    Ok(ClusterFit {
        k,
        trend_weight,
        centroid_risk: (0..k).map(|j| if sizes[j] > 0 { risk_sum[j] / sizes[j] as f64 } else { 0.0 }).collect(),
        sizes,
        silhouette: silhouette(&points, &c.labels),
        calinski_harabasz: calinski_harabasz(&points, &c.labels),
        centroids: c.centroids,
        labels: c.labels,
        inertia: c.inertia,
        seed,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KRow {
    pub k: usize,
    pub silhouette: Option<f64>,
    pub calinski_harabasz: Option<f64>,
    pub inertia: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KmeansSelection {
    pub k_star: usize,
    pub table: Vec<KRow>,
}

/// `k*` maximizes silhouette; ties and undefined scores favour the smaller K.
pub fn kmeans_select(risk: &RiskSeries, k_range: &[usize], trend_weight: f64, seed: u64) -> Result<KmeansSelection, TriangulateError> {
    if k_range.is_empty() {
        return Err(TriangulateError::EmptyRange);
    }
    let table = k_range
        .iter()
        .map(|&k| {
            kmeans_fit(risk, k, trend_weight, seed).map(|f| KRow {
                k,
                silhouette: f.silhouette,
                calinski_harabasz: f.calinski_harabasz,
                inertia: f.inertia,
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut k_star = table[0].k;
    let mut best = f64::NEG_INFINITY;
    for row in &table {
        if let Some(s) = row.silhouette {
            if s > best {
                best = s;
                k_star = row.k;
            }
        }
    }
    Ok(KmeansSelection { k_star, table })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MacroBands {
    pub low_cut: f64,
    pub high_cut: f64,
    pub cluster_band: Vec<Band>,
    pub month_band: Vec<Band>,
}

pub fn band_for(risk: f64, low_cut: f64, high_cut: f64) -> Band {
    if risk <= low_cut {
        Band::Low
    } else if risk >= high_cut {
        Band::High
    } else {
        Band::Mid
    }
}

pub fn macro_bands(fit: &ClusterFit, low_cut: f64, high_cut: f64) -> Result<MacroBands, TriangulateError> {
    if !(low_cut < high_cut) {
        return Err(TriangulateError::InvalidCuts { low: low_cut, high: high_cut });
    }
    let cluster_band: Vec<Band> = fit.centroid_risk.iter().map(|&r| band_for(r, low_cut, high_cut)).collect();
    let month_band = fit.labels.iter().map(|&l| cluster_band[l]).collect();
    Ok(MacroBands { low_cut, high_cut, cluster_band, month_band })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::MonthIndex;
    use rand_distr::{Distribution, Normal};

    fn blobs(seed: u64, centers: &[Point], per: usize, sd: f64) -> Vec<Point> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, sd).unwrap();
        centers
            .iter()
            .flat_map(|c| (0..per).map(|_| [c[0] + noise.sample(&mut rng), c[1] + noise.sample(&mut rng)]).collect::<Vec<_>>())
            .collect()
    }

    fn silhouette_oracle(points: &[Point], labels: &[usize]) -> f64 {
        let n = points.len();
        let d = |i: usize, j: usize| ((points[i][0] - points[j][0]).powi(2) + (points[i][1] - points[j][1]).powi(2)).sqrt();
        let clusters: std::collections::BTreeSet<usize> = labels.iter().copied().collect();
        let mut s = Vec::new();
        for i in 0..n {
            let same: Vec<usize> = (0..n).filter(|&j| j != i && labels[j] == labels[i]).collect();
            if same.is_empty() {
                s.push(0.0);
                continue;
            }
            let a = same.iter().map(|&j| d(i, j)).sum::<f64>() / same.len() as f64;
            let b = clusters
                .iter()
                .filter(|&&c| c != labels[i])
                .map(|&c| {
                    let m: Vec<usize> = (0..n).filter(|&j| labels[j] == c).collect();
                    m.iter().map(|&j| d(i, j)).sum::<f64>() / m.len() as f64
                })
                .fold(f64::INFINITY, f64::min);
            s.push(if a.max(b) > 0.0 { (b - a) / a.max(b) } else { 0.0 });
        }
        s.iter().sum::<f64>() / n as f64
    }

    fn risk_from(points: &[Point]) -> RiskSeries {
        let months = MonthIndex::range_inclusive(MonthIndex::new(2020, 1).unwrap(), MonthIndex::new(2020, 1).unwrap().add_months(points.len() as i64 - 1));
        RiskSeries {
            months,
            z: points.iter().map(|p| p[0]).collect(),
            slope: points.iter().map(|p| p[1]).collect(),
            window_mean: 0.0,
            window_sd: 1.0,
            sd_convention: "population".into(),
        }
    }

    #[test]
    fn single_cluster_is_mean() {
        let pts = blobs(1, &[[0.0, 0.0]], 20, 1.0);
        let c = kmeans_points(&pts, 1, 0, 10).unwrap();
        let m = [pts.iter().map(|p| p[0]).sum::<f64>() / 20.0, pts.iter().map(|p| p[1]).sum::<f64>() / 20.0];
        assert!((c.centroids[0][0] - m[0]).abs() < 1e-12 && (c.centroids[0][1] - m[1]).abs() < 1e-12);
    }

    #[test]
    fn brute_force_partition() {
        let pts = blobs(4, &[[0.0, 0.0], [4.0, 3.0]], 6, 0.7);
        let c = kmeans_points(&pts, 2, 9, 10).unwrap();
        let n = pts.len();
        let mut best = (f64::INFINITY, 0usize);
        for mask in 1..(1usize << (n - 1)) {
            let labels: Vec<usize> = (0..n).map(|i| (mask >> i) & 1).collect();
            let cost: f64 = (0..2)
                .map(|g| {
                    let m: Vec<&Point> = pts.iter().zip(&labels).filter(|(_, &l)| l == g).map(|(p, _)| p).collect();
                    let cx = m.iter().map(|p| p[0]).sum::<f64>() / m.len() as f64;
                    let cy = m.iter().map(|p| p[1]).sum::<f64>() / m.len() as f64;
                    m.iter().map(|p| (p[0] - cx).powi(2) + (p[1] - cy).powi(2)).sum::<f64>()
                })
                .sum();
            if cost < best.0 {
                best = (cost, mask);
            }
        }
        let oracle: Vec<usize> = (0..n).map(|i| (best.1 >> i) & 1).collect();
        let same = c.labels == oracle || c.labels.iter().zip(&oracle).all(|(a, b)| a != b);
        assert!(same);
        assert!((c.inertia - best.0).abs() < 1e-9);
    }

    #[test]
    fn lloyd_invariants() {
        let pts = blobs(8, &[[0.0, 0.0], [2.0, 1.0], [-1.0, 3.0]], 15, 1.0);
        for seed in 0..10 {
            let c = kmeans_points(&pts, 4, seed, 1).unwrap();
            for w in c.inertia_trace.windows(2) {
                assert!(w[1] <= w[0] + 1e-9);
            }
            assert_eq!(assign(&pts, &c.centroids), c.labels);
            for j in 0..4 {
                let m: Vec<&Point> = pts.iter().zip(&c.labels).filter(|(_, &l)| l == j).map(|(p, _)| p).collect();
                assert!(!m.is_empty());
                let cx = m.iter().map(|p| p[0]).sum::<f64>() / m.len() as f64;
                assert!((c.centroids[j][0] - cx).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn silhouette_matches_oracle() {
        let pts = blobs(2, &[[0.0, 0.0], [3.0, 0.0], [0.0, 3.0]], 7, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let labels: Vec<usize> = (0..pts.len()).map(|_| rng.random_range(0..3)).collect();
            if let Some(s) = silhouette(&pts, &labels) {
                assert!((s - silhouette_oracle(&pts, &labels)).abs() < 1e-9);
                assert!((-1.0..=1.0).contains(&s));
            }
        }
    }

    #[test]
    fn calinski_harabasz_oracle() {
        let pts = [[0.0, 0.0], [1.0, 0.0], [5.0, 5.0], [6.0, 5.0]];
        // Between 2 * 2 * 12.5 over 1 df, within 4 * 0.25 over 2 df.
        let ch = calinski_harabasz(&pts, &[0, 0, 1, 1]).unwrap();
        assert!((ch - 100.0).abs() < 1e-12);
        assert_eq!(calinski_harabasz(&pts, &[0, 0, 0, 0]), None);
    }

    #[test]
    fn select_three_blobs() {
        let pts = blobs(6, &[[-3.0, 0.0], [0.0, 2.0], [3.0, -1.0]], 20, 0.3);
        let risk = risk_from(&pts);
        let sel = kmeans_select(&risk, &[2, 3, 4, 5, 6], 1.0, 0).unwrap();
        assert_eq!(sel.k_star, 3);
        assert_eq!(kmeans_select(&risk, &[5], 1.0, 0).unwrap().k_star, 5);
    }

    #[test]
    fn bands_and_errors() {
        assert_eq!(band_for(-1.03, -0.5, 0.5), Band::Low);
        assert_eq!(band_for(0.0, -0.5, 0.5), Band::Mid);
        assert_eq!(band_for(0.7, -0.5, 0.5), Band::High);
        let pts = blobs(6, &[[-3.0, 0.0], [3.0, 0.0]], 10, 0.3);
        let fit = kmeans_fit(&risk_from(&pts), 2, 0.5, 0).unwrap();
        let bands = macro_bands(&fit, -0.5, 0.5).unwrap();
        assert!(bands.month_band[..10].iter().all(|&b| b == Band::Low));
        assert!(bands.month_band[10..].iter().all(|&b| b == Band::High));
        let high = ClusterFit { centroid_risk: vec![0.6, 1.0], ..fit.clone() };
        assert!(macro_bands(&high, -0.5, 0.5).unwrap().cluster_band.iter().all(|&b| b == Band::High));
        assert!(matches!(kmeans_fit(&risk_from(&pts[..3]), 4, 2.0, 0), Err(TriangulateError::KExceedsPoints { .. })));
    }

    #[test]
    fn trend_weight_scales_second_feature() {
        let pts = blobs(6, &[[-3.0, 1.0], [3.0, 0.0]], 10, 0.3);
        let risk = risk_from(&pts);
        let a = cluster_features(&risk, 1.0);
        let b = cluster_features(&risk, 2.0);
        for (p, q) in a.iter().zip(&b) {
            assert_eq!(p[0], q[0]);
            assert!((2.0 * p[1] - q[1]).abs() < 1e-12);
        }
    }
}
