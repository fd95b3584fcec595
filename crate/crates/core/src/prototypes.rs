//! Per-class pooling of support features: multi-prototype sampling and
//! class averages.

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// `n_p` cluster-mean prototypes for each of `n_classes` classes, stored
/// class-major: rows `c·n_p .. (c+1)·n_p` belong to class `c`.
#[derive(Clone, Debug)]
pub struct MultiPrototype {
    pub features: Var,
    pub labels: Vec<usize>,
    pub n_p: usize,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Farthest-point seeds among `members` (row indices into `x`), starting from
/// the member farthest from their centroid. Once every member is a seed the
/// scan keeps returning the lowest-index member, so seeds repeat.
pub fn farthest_point_seeds(x: &Tensor, members: &[usize], n_p: usize) -> Vec<usize> {
    let d = x.cols();
    let mut centroid = vec![0.0; d];
    for &i in members {
        centroid.iter_mut().zip(x.row(i)).for_each(|(c, v)| *c += v);
    }
    centroid.iter_mut().for_each(|c| *c /= members.len() as f64);
    let argmax = |score: &dyn Fn(usize) -> f64| {
        let mut best = (f64::NEG_INFINITY, 0);
        for (pos, &i) in members.iter().enumerate() {
            let s = score(i);
            if s > best.0 {
                best = (s, pos);
            }
        }
        best.1
    };
    let first = argmax(&|i| sq_dist(x.row(i), &centroid));
    let mut seeds = vec![members[first]];
    let mut min_d: Vec<f64> = members.iter().map(|&i| sq_dist(x.row(i), x.row(members[first]))).collect();
    while seeds.len() < n_p {
        let mut best = (f64::NEG_INFINITY, 0);
        for (pos, &m) in min_d.iter().enumerate() {
            if m > best.0 {
                best = (m, pos);
            }
        }
        let s = members[best.1];
        seeds.push(s);
        for (pos, &i) in members.iter().enumerate() {
            min_d[pos] = min_d[pos].min(sq_dist(x.row(i), x.row(s)));
        }
    }
    seeds
}

/// Clusters each class's rows around farthest-point seeds (nearest seed wins,
/// lower seed index on ties) and returns the cluster means. An empty cluster
/// takes its seed's feature. Differentiable with respect to `features`.
pub fn multi_prototype_sample(
    g: &mut Graph,
    features: Var,
    labels: &[usize],
    n_classes: usize,
    n_p: usize,
) -> Result<MultiPrototype> {
    let x = g.value(features).clone();
    let (m, _) = x.require_matrix("multi_prototype_sample")?;
    if labels.len() != m {
        return Err(Error::ShapeMismatch {
            op: "multi_prototype_sample",
            lhs: vec![m],
            rhs: vec![labels.len()],
        });
    }
    if n_p == 0 {
        return Err(Error::InvalidArgument("n_p must be ≥ 1".into()));
    }
    let mut groups = Vec::with_capacity(n_classes * n_p);
    let mut proto_labels = Vec::with_capacity(n_classes * n_p);
    for c in 0..n_classes {
        let members: Vec<usize> = (0..m).filter(|&i| labels[i] == c).collect();
        if members.is_empty() {
            return Err(Error::InvalidArgument(format!("class {c} has no support points")));
        }
        let seeds = farthest_point_seeds(&x, &members, n_p);
        let mut clusters: Vec<Vec<usize>> = vec![Vec::new(); n_p];
        for &i in &members {
            let mut best = (f64::INFINITY, 0);
            for (s, &seed) in seeds.iter().enumerate() {
                let dd = sq_dist(x.row(i), x.row(seed));
                if dd < best.0 {
                    best = (dd, s);
                }
            }
            clusters[best.1].push(i);
        }
        for (s, cl) in clusters.into_iter().enumerate() {
            groups.push(if cl.is_empty() { vec![seeds[s]] } else { cl });
            proto_labels.push(c);
        }
    }
    let features = g.segment_mean(features, groups)?;
    Ok(MultiPrototype {
        features,
        labels: proto_labels,
        n_p,
    })
}

/// Row `c` is the mean of the rows labelled `c`, for `c in 0..n_classes`.
pub fn class_average(g: &mut Graph, features: Var, labels: &[usize], n_classes: usize) -> Result<Var> {
    let m = g.value(features).rows();
    if labels.len() != m {
        return Err(Error::ShapeMismatch {
            op: "class_average",
            lhs: vec![m],
            rhs: vec![labels.len()],
        });
    }
    let groups: Vec<Vec<usize>> = (0..n_classes)
        .map(|c| (0..m).filter(|&i| labels[i] == c).collect())
        .collect();
    if let Some(c) = groups.iter().position(Vec::is_empty) {
        return Err(Error::InvalidArgument(format!("class_average: class {c} has no rows")));
    }
    g.segment_mean(features, groups)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_diff_check;
    use crate::rng::{gaussian_tensor, stream};

    #[test]
    fn identical_points_give_identical_prototypes() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&vec![vec![0.5, -1.0, 2.0]; 7]).unwrap());
        let mp = multi_prototype_sample(&mut g, x, &[0; 7], 1, 4).unwrap();
        let p = g.value(mp.features);
        assert_eq!(p.shape(), &[4, 3]);
        for r in 0..4 {
            assert_eq!(p.row(r), &[0.5, -1.0, 2.0]);
        }
    }

    #[test]
    fn n_p_equal_to_count_gives_the_points() {
        let t = gaussian_tensor(&mut stream(1), &[6, 4], 1.0);
        let mut g = Graph::new();
        let x = g.constant(t.clone());
        let mp = multi_prototype_sample(&mut g, x, &[0; 6], 1, 6).unwrap();
        let p = g.value(mp.features);
        let mut got: Vec<Vec<u64>> = (0..6).map(|r| p.row(r).iter().map(|v| v.to_bits()).collect()).collect();
        let mut want: Vec<Vec<u64>> = (0..6).map(|r| t.row(r).iter().map(|v| v.to_bits()).collect()).collect();
        got.sort();
        want.sort();
        assert_eq!(got, want);
    }

    #[test]
    fn fewer_points_than_prototypes_still_yields_n_p() {
        let t = gaussian_tensor(&mut stream(2), &[5, 3], 1.0);
        let mut g = Graph::new();
        let x = g.constant(t);
        let mp = multi_prototype_sample(&mut g, x, &[0, 1, 1, 0, 1], 2, 100).unwrap();
        assert_eq!(g.value(mp.features).rows(), 200);
        assert_eq!(mp.labels.iter().filter(|&&l| l == 1).count(), 100);
    }

    #[test]
    fn two_blobs_match_exhaustive_two_means() {
        for seed in 0..10 {
            let mut rng = stream(seed);
            let mut rows = Vec::new();
            for i in 0..12 {
                let off = if i < 5 { 10.0 } else { -10.0 };
                let n = gaussian_tensor(&mut rng, &[1, 3], 0.5);
                rows.push(n.data().iter().map(|v| v + off).collect::<Vec<_>>());
            }
            let t = Tensor::from_rows(&rows).unwrap();
            let mut g = Graph::new();
            let x = g.constant(t.clone());
            let mp = multi_prototype_sample(&mut g, x, &[0; 12], 1, 2).unwrap();
            let p = g.value(mp.features).clone();

            // Exhaustive oracle: the bipartition minimising within-cluster scatter.
            let mut best = (f64::INFINITY, vec![]);
            for mask in 1u32..(1 << 12) - 1 {
                let parts: Vec<Vec<usize>> = [true, false]
                    .iter()
                    .map(|&side| (0..12).filter(|&i| ((mask >> i) & 1 == 1) == side).collect())
                    .collect();
                let mut cost = 0.0;
                let mut means = vec![];
                for part in &parts {
                    let mut mean = [0.0; 3];
                    for &i in part {
                        (0..3).for_each(|c| mean[c] += rows[i][c] / part.len() as f64);
                    }
                    for &i in part {
                        cost += (0..3).map(|c| (rows[i][c] - mean[c]).powi(2)).sum::<f64>();
                    }
                    means.push(mean);
                }
                if cost < best.0 {
                    best = (cost, means);
                }
            }
            for mean in &best.1 {
                let hit = (0..2).any(|r| (0..3).all(|c| (p.get2(r, c) - mean[c]).abs() < 1e-9));
                assert!(hit, "seed {seed}: {mean:?} not among {p:?}");
            }
        }
    }

    #[test]
    fn missing_class_rejected() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[3, 2]));
        assert!(multi_prototype_sample(&mut g, x, &[0, 0, 0], 2, 2).is_err());
    }

    #[test]
    fn class_average_examples() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[vec![1.0], vec![3.0], vec![7.0]]).unwrap());
        let avg = class_average(&mut g, x, &[0, 0, 1], 2).unwrap();
        assert_eq!(g.value(avg).data(), &[2.0, 7.0]);
    }

    #[test]
    fn class_average_matches_summation() {
        let t = gaussian_tensor(&mut stream(3), &[100, 5], 1.0);
        let labels: Vec<usize> = (0..100).map(|i| (i * 7) % 3).collect();
        let mut g = Graph::new();
        let x = g.constant(t.clone());
        let avg = class_average(&mut g, x, &labels, 3).unwrap();
        for c in 0..3 {
            let rows: Vec<usize> = (0..100).filter(|&i| labels[i] == c).collect();
            for d in 0..5 {
                let s: f64 = rows.iter().map(|&i| t.get2(i, d)).sum::<f64>() / rows.len() as f64;
                assert!((g.value(avg).get2(c, d) - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn class_average_empty_rejected() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[2, 2]));
        assert!(class_average(&mut g, x, &[0, 0], 2).is_err());
    }

    #[test]
    fn mps_gradient_matches_finite_differences() {
        for seed in 0..20 {
            let t = gaussian_tensor(&mut stream(seed), &[10, 3], 1.0);
            let w = gaussian_tensor(&mut stream(seed + 50), &[6, 3], 1.0);
            let labels = [0, 1, 0, 1, 0, 1, 1, 0, 0, 1];
            let err = finite_diff_check(
                |g, x| {
                    let mp = multi_prototype_sample(g, x, &labels, 2, 3)?;
                    let wv = g.constant(w.clone());
                    let z = g.mul(mp.features, wv)?;
                    g.sum(z)
                },
                &t,
                1e-6,
            )
            .unwrap();
            assert!(err < 1e-4, "seed {seed}: {err}");
        }
    }

    proptest::proptest! {
        #[test]
        fn prototype_count_is_always_n_p(n in 1usize..40, n_p in 1usize..20, seed in 0u64..500) {
            let t = gaussian_tensor(&mut stream(seed), &[n, 2], 1.0);
            let mut g = Graph::new();
            let x = g.constant(t);
            let mp = multi_prototype_sample(&mut g, x, &vec![0; n], 1, n_p).unwrap();
            proptest::prop_assert_eq!(g.value(mp.features).rows(), n_p);
        }

        #[test]
        fn class_average_ignores_row_order(seed in 0u64..500) {
            let t = gaussian_tensor(&mut stream(seed), &[9, 3], 1.0);
            let labels = [0, 1, 2, 0, 1, 2, 0, 1, 2];
            let perm = [4, 0, 8, 2, 6, 1, 3, 7, 5];
            let tp = Tensor::from_rows(&perm.iter().map(|&i| t.row(i).to_vec()).collect::<Vec<_>>()).unwrap();
            let lp: Vec<usize> = perm.iter().map(|&i| labels[i]).collect();
            let mut g = Graph::new();
            let (a, b) = (g.constant(t), g.constant(tp));
            let x = class_average(&mut g, a, &labels, 3).unwrap();
            let y = class_average(&mut g, b, &lp, 3).unwrap();
            proptest::prop_assert!(g.value(x).max_abs_diff(g.value(y)) < 1e-12);
        }
    }
}
