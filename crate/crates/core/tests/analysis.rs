use hyperlora_core::analysis::{
    complete_linkage, cosine_distances, cut, flatten_deltas, hierarchical_cluster, mds_2d, pca_2d, select_k, silhouette,
    FlattenMode,
};
use hyperlora_core::hyper::LoraFactors;
use hyperlora_core::rng::{self, StreamRng};
use hyperlora_core::vit::DeltaSet;
use hyperlora_core::{Error, Tensor};
use proptest::prelude::*;
use rand::Rng;

fn mat(rows: usize, cols: usize, v: Vec<f64>) -> Tensor<f64> {
    Tensor::new(vec![rows, cols], v).unwrap()
}

fn random_mat(r: &mut StreamRng, rows: usize, cols: usize) -> Tensor<f64> {
    mat(rows, cols, (0..rows * cols).map(|_| rng::normal(r)).collect())
}

fn euclid(x: &[f64], k: usize, d: usize) -> Tensor<f64> {
    let mut out = vec![0.0; k * k];
    for i in 0..k {
        for j in 0..k {
            out[i * k + j] = (0..d).map(|c| (x[i * d + c] - x[j * d + c]).powi(2)).sum::<f64>().sqrt();
        }
    }
    mat(k, k, out)
}

/// Top eigenpairs of a symmetric matrix by power iteration with deflation.
fn power_eigen(a: &[f64], n: usize, count: usize) -> Vec<(f64, Vec<f64>)> {
    let mut a = a.to_vec();
    let mut out = Vec::new();
    for e in 0..count {
        let mut v: Vec<f64> = (0..n).map(|i| 1.0 + ((i * 7 + e * 3) % 5) as f64).collect();
        let mut lambda = 0.0;
        for _ in 0..5000 {
            let w: Vec<f64> = (0..n).map(|i| (0..n).map(|j| a[i * n + j] * v[j]).sum()).collect();
            let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
            v = w.iter().map(|x| x / norm).collect();
            lambda = norm;
        }
        for i in 0..n {
            for j in 0..n {
                a[i * n + j] -= lambda * v[i] * v[j];
            }
        }
        out.push((lambda, v));
    }
    out
}

#[test]
fn pca_matches_covariance_eigendecomposition() {
    let (k, f) = (10, 40);
    let mut r = rng::stream(21, 0);
    // two dominant directions keep the eigengaps comfortable for power iteration
    let u = random_mat(&mut r, 2, f);
    let mut x = vec![0.0; k * f];
    for i in 0..k {
        let (c0, c1) = (3.0 * rng::normal(&mut r), 1.5 * rng::normal(&mut r));
        for c in 0..f {
            x[i * f + c] = c0 * u.data()[c] + c1 * u.data()[f + c] + 0.1 * rng::normal(&mut r);
        }
    }
    let v = mat(k, f, x.clone());
    let emb = pca_2d(&v).unwrap();

    let mean: Vec<f64> = (0..f).map(|c| (0..k).map(|i| x[i * f + c]).sum::<f64>() / k as f64).collect();
    let xc: Vec<f64> = (0..k * f).map(|idx| x[idx] - mean[idx % f]).collect();
    let mut cov = vec![0.0; f * f];
    for a in 0..f {
        for b in 0..f {
            cov[a * f + b] = (0..k).map(|i| xc[i * f + a] * xc[i * f + b]).sum();
        }
    }
    let trace: f64 = (0..f).map(|a| cov[a * f + a]).sum();
    let top = power_eigen(&cov, f, 2);
    for (axis, (lambda, w)) in top.iter().enumerate() {
        let proj: Vec<f64> = (0..k).map(|i| (0..f).map(|c| xc[i * f + c] * w[c]).sum()).collect();
        let got: Vec<f64> = (0..k).map(|i| emb.coords.data()[i * 2 + axis]).collect();
        let same = proj.iter().zip(&got).map(|(p, g)| (p - g).abs()).fold(0.0, f64::max);
        let flipped = proj.iter().zip(&got).map(|(p, g)| (p + g).abs()).fold(0.0, f64::max);
        assert!(same.min(flipped) <= 1e-5, "axis {axis}: {same} / {flipped}");
        assert!((emb.explained[axis] - lambda / trace).abs() <= 1e-9);
    }
    assert!(emb.explained[0] >= emb.explained[1]);
}

#[test]
fn pca_planar_and_collinear_points() {
    let mut r = rng::stream(3, 0);
    let basis = random_mat(&mut r, 2, 6);
    let mut x = Vec::new();
    for _ in 0..7 {
        let (a, b) = (rng::normal(&mut r), rng::normal(&mut r));
        x.extend((0..6).map(|c| 1.0 + a * basis.data()[c] + b * basis.data()[6 + c]));
    }
    let emb = pca_2d(&mat(7, 6, x.clone())).unwrap();
    assert!((emb.explained[0] + emb.explained[1] - 1.0).abs() < 1e-10);
    // the 2-d coordinates reproduce every pairwise distance of the plane
    let d_in = euclid(&x, 7, 6);
    let d_out = euclid(emb.coords.data(), 7, 2);
    assert!(d_in.max_abs_diff(&d_out) < 1e-9);

    let line: Vec<f64> = (0..5).flat_map(|i| [i as f64, 2.0 * i as f64, -(i as f64)]).collect();
    let emb = pca_2d(&mat(5, 3, line)).unwrap();
    assert!(emb.explained[1].abs() < 1e-12);
    assert!((emb.explained[0] - 1.0).abs() < 1e-12);

    assert!(pca_2d(&mat(2, 3, vec![0.0; 6])).is_err());
}

#[test]
fn pca_sign_convention_first_loading_positive() {
    let mut r = rng::stream(4, 0);
    let v = random_mat(&mut r, 6, 5);
    let neg = v.scale(-1.0);
    let a = pca_2d(&v).unwrap();
    let b = pca_2d(&neg).unwrap();
    // negating the data negates the loadings, so the convention flips the
    // coordinates back: both runs must agree
    assert!(a.coords.max_abs_diff(&b.coords.scale(-1.0)) < 1e-9 || a.coords.max_abs_diff(&b.coords) < 1e-9);
}

proptest! {
    #[test]
    fn pca_is_translation_invariant(seed in 0u64..1000, shift in prop::collection::vec(-10.0f64..10.0, 5)) {
        let mut r = rng::stream(seed, 0);
        let v = random_mat(&mut r, 6, 5);
        let moved: Vec<f64> = v.data().iter().enumerate().map(|(i, x)| x + shift[i % 5]).collect();
        let a = pca_2d(&v).unwrap();
        let b = pca_2d(&mat(6, 5, moved)).unwrap();
        prop_assert!(a.coords.max_abs_diff(&b.coords) < 1e-8);
    }

    #[test]
    fn cosine_clustering_ignores_positive_row_scaling(
        seed in 0u64..1000,
        scales in prop::collection::vec(0.01f64..100.0, 7)
    ) {
        let mut r = rng::stream(seed, 1);
        let v = random_mat(&mut r, 7, 4);
        let scaled: Vec<f64> = v.data().iter().enumerate().map(|(i, x)| x * scales[i / 4]).collect();
        let w = mat(7, 4, scaled);
        let (a, b) = (hierarchical_cluster(&v).unwrap(), hierarchical_cluster(&w).unwrap());
        for (ma, mb) in a.merges.iter().zip(&b.merges) {
            prop_assert_eq!((ma.a, ma.b, ma.size), (mb.a, mb.b, mb.size));
            prop_assert!((ma.height - mb.height).abs() < 1e-12);
        }
        for k in 2..=6 {
            let labels = cut(&a, k).unwrap();
            let s1 = silhouette(&v, &labels).unwrap();
            let s2 = silhouette(&w, &labels).unwrap();
            prop_assert!((s1 - s2).abs() < 1e-12);
        }
    }
}

/// Minimal residual of `y ≈ x·R` over 2×2 rotations and reflections after
/// centring both configurations.
fn procrustes_residual(x: &[f64], y: &[f64], k: usize) -> f64 {
    let centre = |p: &[f64]| {
        let (mx, my) = (
            (0..k).map(|i| p[2 * i]).sum::<f64>() / k as f64,
            (0..k).map(|i| p[2 * i + 1]).sum::<f64>() / k as f64,
        );
        (0..k).flat_map(|i| [p[2 * i] - mx, p[2 * i + 1] - my]).collect::<Vec<f64>>()
    };
    let (x, y) = (centre(x), centre(y));
    let mut best = f64::INFINITY;
    for reflect in [1.0, -1.0] {
        // M = Xᵀ Y with X's second column optionally negated
        let (mut m00, mut m01, mut m10, mut m11) = (0.0, 0.0, 0.0, 0.0);
        for i in 0..k {
            let (x0, x1) = (x[2 * i], reflect * x[2 * i + 1]);
            m00 += x0 * y[2 * i];
            m01 += x0 * y[2 * i + 1];
            m10 += x1 * y[2 * i];
            m11 += x1 * y[2 * i + 1];
        }
        let th = (m01 - m10).atan2(m00 + m11);
        let (c, s) = (th.cos(), th.sin());
        let mut res: f64 = 0.0;
        for i in 0..k {
            let (x0, x1) = (x[2 * i], reflect * x[2 * i + 1]);
            let (r0, r1) = (x0 * c - x1 * s, x0 * s + x1 * c);
            res = res.max((r0 - y[2 * i]).abs()).max((r1 - y[2 * i + 1]).abs());
        }
        best = best.min(res);
    }
    best
}

#[test]
fn mds_recovers_planar_configuration() {
    for seed in 0..5 {
        let mut r = rng::stream(seed, 9);
        let k = 8;
        let x: Vec<f64> = (0..2 * k).map(|_| rng::normal(&mut r) * 3.0).collect();
        let emb = mds_2d(&euclid(&x, k, 2)).unwrap();
        assert!(procrustes_residual(&x, emb.coords.data(), k) <= 1e-5);
        assert!(euclid(emb.coords.data(), k, 2).max_abs_diff(&euclid(&x, k, 2)) <= 1e-5);
    }
}

#[test]
fn mds_line_and_equilateral() {
    let line = [0.0, 0.0, 1.5, 0.0, 4.0, 0.0];
    let d = euclid(&line, 3, 2);
    let emb = mds_2d(&d).unwrap();
    assert!(euclid(emb.coords.data(), 3, 2).max_abs_diff(&d) <= 1e-6);

    let eq = mat(3, 3, vec![0.0, 2.0, 2.0, 2.0, 0.0, 2.0, 2.0, 2.0, 0.0]);
    let emb = mds_2d(&eq).unwrap();
    assert!(euclid(emb.coords.data(), 3, 2).max_abs_diff(&eq) <= 1e-6);
}

#[test]
fn mds_rejects_asymmetric_input() {
    let d = mat(3, 3, vec![0.0, 1.0, 2.0, 1.5, 0.0, 1.0, 2.0, 1.0, 0.0]);
    assert!(matches!(mds_2d(&d), Err(Error::Asymmetric)));
    let d = mat(2, 2, vec![1.0, 1.0, 1.0, 0.0]);
    assert!(mds_2d(&d).is_err());
}

/// O(K³) agglomeration straight from the definition.
fn naive_complete_linkage(d: &[f64], k: usize) -> Vec<(usize, usize, f64, usize)> {
    let mut clusters: Vec<(usize, Vec<usize>)> = (0..k).map(|i| (i, vec![i])).collect();
    let mut out = Vec::new();
    for step in 0..k - 1 {
        let mut best: Option<(f64, usize, usize, usize, usize)> = None;
        for x in 0..clusters.len() {
            for y in 0..clusters.len() {
                if x == y {
                    continue;
                }
                let h = clusters[x]
                    .1
                    .iter()
                    .flat_map(|&i| clusters[y].1.iter().map(move |&j| (i, j)))
                    .map(|(i, j)| d[i * k + j])
                    .fold(f64::NEG_INFINITY, f64::max);
                let (mx, my) = (clusters[x].1[0], clusters[y].1[0]);
                if mx > my {
                    continue;
                }
                let better = match best {
                    None => true,
                    Some((bh, bx, by, _, _)) => h < bh || (h == bh && (mx, my) < (bx, by)),
                };
                if better {
                    best = Some((h, mx, my, x, y));
                }
            }
        }
        let (h, _, _, x, y) = best.unwrap();
        let (ix, iy) = (clusters[x].0, clusters[y].0);
        let mut members = clusters[x].1.clone();
        members.extend(&clusters[y].1);
        members.sort();
        out.push((ix.min(iy), ix.max(iy), h, members.len()));
        let (lo, hi) = (x.min(y), x.max(y));
        clusters.remove(hi);
        clusters.remove(lo);
        clusters.push((k + step, members));
    }
    out
}

#[test]
fn linkage_matches_naive_agglomeration() {
    for seed in 0..20 {
        let mut r = rng::stream(seed, 4);
        let v = random_mat(&mut r, 8, 5);
        let d = cosine_distances(&v).unwrap();
        let got = complete_linkage(&d).unwrap();
        let want = naive_complete_linkage(d.data(), 8);
        let got: Vec<_> = got.merges.iter().map(|m| (m.a, m.b, m.height, m.size)).collect();
        assert_eq!(got, want, "seed {seed}");
    }
    // heavy ties: distances on a coarse integer grid
    for seed in 0..20 {
        let mut r = rng::stream(seed, 5);
        let k = 7;
        let mut d = vec![0.0; k * k];
        for i in 0..k {
            for j in i + 1..k {
                let v = r.random_range(1..4) as f64;
                d[i * k + j] = v;
                d[j * k + i] = v;
            }
        }
        let got = complete_linkage(&mat(k, k, d.clone())).unwrap();
        let got: Vec<_> = got.merges.iter().map(|m| (m.a, m.b, m.height, m.size)).collect();
        assert_eq!(got, naive_complete_linkage(&d, k), "tied seed {seed}");
    }
}

#[test]
fn linkage_examples() {
    let v = mat(3, 2, vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0]);
    let tree = hierarchical_cluster(&v).unwrap();
    assert_eq!((tree.merges[0].a, tree.merges[0].b, tree.merges[0].height), (0, 1, 0.0));
    assert_eq!((tree.merges[1].a, tree.merges[1].b), (2, 3));
    assert!((tree.merges[1].height - 1.0).abs() < 1e-15);

    let v = mat(3, 2, vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
    match hierarchical_cluster(&v) {
        Err(Error::ZeroNormRows(rows)) => assert_eq!(rows, vec![1]),
        other => panic!("{other:?}"),
    }
}

/// Silhouette straight from the definition.
fn silhouette_oracle(d: &[f64], labels: &[usize]) -> f64 {
    let n = labels.len();
    let mut total = 0.0;
    for i in 0..n {
        let own: Vec<usize> = (0..n).filter(|&j| j != i && labels[j] == labels[i]).collect();
        if own.is_empty() {
            continue;
        }
        let a = own.iter().map(|&j| d[i * n + j]).sum::<f64>() / own.len() as f64;
        let mut b = f64::INFINITY;
        for c in labels.iter().copied().filter(|&c| c != labels[i]) {
            let other: Vec<usize> = (0..n).filter(|&j| labels[j] == c).collect();
            b = b.min(other.iter().map(|&j| d[i * n + j]).sum::<f64>() / other.len() as f64);
        }
        total += (b - a) / a.max(b);
    }
    total / n as f64
}

#[test]
fn silhouette_matches_double_loop() {
    for seed in 0..20 {
        let mut r = rng::stream(seed, 6);
        let v = random_mat(&mut r, 6, 4);
        let labels: Vec<usize> = loop {
            let l: Vec<usize> = (0..6).map(|_| r.random_range(0..3)).collect();
            if l.contains(&0) && l.iter().any(|&x| x != 0) {
                break l;
            }
        };
        let d = cosine_distances(&v).unwrap();
        let got = silhouette(&v, &labels).unwrap();
        assert!((got - silhouette_oracle(d.data(), &labels)).abs() <= 1e-9, "seed {seed}");
    }
}

#[test]
fn silhouette_examples() {
    let v = mat(4, 2, vec![1.0, 0.01, 1.0, -0.01, 0.01, 1.0, -0.01, 1.0]);
    assert!(silhouette(&v, &[0, 0, 1, 1]).unwrap() > 0.9);
    let v = mat(3, 2, vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
    assert_eq!(silhouette(&v, &[0, 1, 2]).unwrap(), 0.0);
    assert!(silhouette(&v, &[0, 0, 0]).is_err());
}

/// `groups` planted directions with per-row noise `sigma`.
fn planted(r: &mut StreamRng, groups: usize, per: usize, dim: usize, sigma: f64) -> (Tensor<f64>, Vec<usize>) {
    let centres = random_mat(r, groups, dim);
    let mut rows = Vec::new();
    let mut truth = Vec::new();
    for g in 0..groups {
        let c = &centres.data()[g * dim..(g + 1) * dim];
        let norm = c.iter().map(|x| x * x).sum::<f64>().sqrt();
        for _ in 0..per {
            rows.extend(c.iter().map(|x| x / norm + sigma * rng::normal(r)));
            truth.push(g);
        }
    }
    (mat(groups * per, dim, rows), truth)
}

#[test]
fn select_k_finds_orthogonal_pair() {
    let mut rows = Vec::new();
    for i in 0..6 {
        let eps = 0.01 * i as f64;
        rows.extend(if i < 3 { [1.0, eps, 0.0] } else { [0.0, eps, 1.0] });
    }
    let sel = select_k(&mat(6, 3, rows), 2, 8).unwrap();
    assert_eq!(sel.k_star, 2);
    assert!(sel.silhouette > 0.9);
    assert_eq!(sel.labels, vec![0, 0, 0, 1, 1, 1]);
}

#[test]
fn select_k_recovers_three_planted_groups() {
    let mut hits = 0;
    for seed in 0..10 {
        let mut r = rng::stream(seed, 7);
        let (v, _) = planted(&mut r, 3, 5, 12, 0.05);
        let sel = select_k(&v, 2, 8).unwrap();
        hits += (sel.k_star == 3) as usize;
        // the winner is the best silhouette over an exhaustive recompute
        for k in 2..=8 {
            let s = silhouette(&v, &cut(&sel.dendrogram, k).unwrap()).unwrap();
            assert!(sel.silhouette >= s);
        }
    }
    assert!(hits >= 9, "{hits}/10");
}

#[test]
fn select_k_rejects_tiny_inputs() {
    assert!(select_k(&mat(2, 2, vec![1.0, 0.0, 0.0, 1.0]), 2, 8).is_err());
}

#[test]
fn flatten_modes() {
    let mut set = DeltaSet::new();
    let b = Tensor::from_f64(&[2, 1], &[1.0, 2.0]).unwrap();
    let a = Tensor::from_f64(&[1, 2], &[3.0, -1.0]).unwrap();
    set.insert(0, LoraFactors::new(b, a, 2.0).unwrap());
    set.insert(1, LoraFactors::<f32>::zeros(3, 2, 1, 2.0));
    let mat_vec = flatten_deltas(&set, FlattenMode::Materialized).unwrap();
    assert_eq!(&mat_vec[..4], &[6.0, -2.0, 12.0, -4.0]);
    assert!(mat_vec[4..].iter().all(|&x| x == 0.0));
    assert_eq!(mat_vec.len(), 4 + 6);
    let fac = flatten_deltas(&set, FlattenMode::Factors).unwrap();
    assert_eq!(&fac[..4], &[1.0, 2.0, 3.0, -1.0]);
    // Σ r·(d_in + d_out)
    assert_eq!(fac.len(), (2 + 2) + (3 + 2));
}
