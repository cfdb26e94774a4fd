//! Weight-space analysis of per-task LoRA deltas: flattening, PCA,
//! classical MDS, complete-linkage clustering on cosine distance, and
//! silhouette-based choice of the number of clusters.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{is_symmetric, sym_eigen};
use crate::real::Real;
use crate::tensor::{self, Tensor};
use crate::train::Model;
use crate::vit::DeltaSet;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlattenMode {
    /// `B` then `A` of every module.
    Factors,
    /// `(α/r)·B·A` of every module.
    #[default]
    Materialized,
}

/// Concatenation over modules in ascending flat index.
pub fn flatten_deltas<S: Real>(deltas: &DeltaSet<S>, mode: FlattenMode) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for f in deltas.values() {
        match mode {
            FlattenMode::Factors => {
                out.extend(f.b.data().iter().map(|v| v.to_f64()));
                out.extend(f.a.data().iter().map(|v| v.to_f64()));
            }
            FlattenMode::Materialized => {
                let d = tensor::matmul(&f.b.cast::<f64>(), &f.a.cast::<f64>())?;
                let s = f.scale();
                out.extend(d.data().iter().map(|v| v * s));
            }
        }
    }
    Ok(out)
}

pub fn flatten_task_lora<S: Real>(model: &Model<S>, task: usize, mode: FlattenMode) -> Result<Vec<f64>> {
    flatten_deltas(&model.task_deltas(task)?, mode)
}

/// `[K × F]` matrix whose row `k` is task `k`'s flattened delta.
pub fn task_weight_matrix<S: Real>(model: &Model<S>, mode: FlattenMode) -> Result<Tensor<f64>> {
    let rows = (0..model.num_tasks())
        .map(|k| flatten_task_lora(model, k, mode))
        .collect::<Result<Vec<_>>>()?;
    let f = rows.first().map_or(0, Vec::len);
    Tensor::new(vec![rows.len(), f], rows.concat())
}

/// Projection onto the top two principal axes.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding2d {
    /// `[K × 2]`
    pub coords: Tensor<f64>,
    /// Fraction of total variance per axis (PCA) or share of the positive
    /// eigenvalue mass (MDS).
    pub explained: [f64; 2],
}

/// Flips `vec` so its first entry with magnitude above `tol · max|vec|` is
/// positive; returns the sign applied.
fn sign_of_first_nonzero(vec: &[f64]) -> f64 {
    let max = vec.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    match vec.iter().find(|v| v.abs() > 1e-9 * max) {
        Some(v) if *v < 0.0 => -1.0,
        _ => 1.0,
    }
}

/// PCA via the eigendecomposition of the `K×K` Gram matrix of the centred
/// rows. Each axis is oriented so its first nonzero loading is positive.
pub fn pca_2d(v: &Tensor<f64>) -> Result<Embedding2d> {
    let (k, f) = v.dims2();
    if k < 3 {
        return Err(Error::InvalidArgument(format!("PCA needs at least 3 rows, got {k}")));
    }
    let mut xc = v.data().to_vec();
    for c in 0..f {
        let mean = (0..k).map(|r| xc[r * f + c]).sum::<f64>() / k as f64;
        for r in 0..k {
            xc[r * f + c] -= mean;
        }
    }
    let x = Tensor::new(vec![k, f], xc)?;
    let gram = tensor::matmul(&x, &x.transpose()?)?;
    let eig = sym_eigen(gram.data(), k)?;
    let total: f64 = eig.values.iter().map(|l| l.max(0.0)).sum();
    let mut coords = vec![0.0; k * 2];
    let mut explained = [0.0; 2];
    for axis in 0..2.min(eig.n) {
        let lambda = eig.values[axis].max(0.0);
        let u = eig.vector(axis);
        // loading = Xcᵀ u / √λ; only its sign pattern matters here
        let loading: Vec<f64> = (0..f)
            .map(|c| (0..k).map(|r| x.data()[r * f + c] * u[r]).sum())
            .collect();
        let sign = if lambda > 0.0 { sign_of_first_nonzero(&loading) } else { 1.0 };
        let root = libm::sqrt(lambda);
        for r in 0..k {
            coords[r * 2 + axis] = sign * u[r] * root;
        }
        explained[axis] = if total > 0.0 { lambda / total } else { 0.0 };
    }
    Ok(Embedding2d {
        coords: Tensor::new(vec![k, 2], coords)?,
        explained,
    })
}

/// Classical (Torgerson) MDS of a symmetric zero-diagonal distance matrix.
pub fn mds_2d(dist: &Tensor<f64>) -> Result<Embedding2d> {
    let (k, k2) = dist.dims2();
    if k != k2 {
        return Err(Error::shape("mds_2d", dist.shape(), &[k, k]));
    }
    let d = dist.data();
    let scale = d.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if !is_symmetric(d, k, 1e-12 * scale.max(1.0)) {
        return Err(Error::Asymmetric);
    }
    if (0..k).any(|i| d[i * k + i] != 0.0) {
        return Err(Error::InvalidArgument("distance matrix has a nonzero diagonal".into()));
    }
    let sq: Vec<f64> = d.iter().map(|v| v * v).collect();
    let row_mean: Vec<f64> = (0..k).map(|i| sq[i * k..(i + 1) * k].iter().sum::<f64>() / k as f64).collect();
    let grand = row_mean.iter().sum::<f64>() / k as f64;
    let b: Vec<f64> = (0..k * k)
        .map(|idx| {
            let (i, j) = (idx / k, idx % k);
            -0.5 * (sq[idx] - row_mean[i] - row_mean[j] + grand)
        })
        .collect();
    let eig = sym_eigen(&b, k)?;
    let positive: f64 = eig.values.iter().map(|l| l.max(0.0)).sum();
    let mut coords = vec![0.0; k * 2];
    let mut explained = [0.0; 2];
    for axis in 0..2.min(k) {
        let lambda = eig.values[axis].max(0.0);
        let u = eig.vector(axis);
        let sign = sign_of_first_nonzero(&u);
        for r in 0..k {
            coords[r * 2 + axis] = sign * u[r] * libm::sqrt(lambda);
        }
        explained[axis] = if positive > 0.0 { lambda / positive } else { 0.0 };
    }
    Ok(Embedding2d {
        coords: Tensor::new(vec![k, 2], coords)?,
        explained,
    })
}

/// Pairwise `1 − cos` between rows; rows must have nonzero norm.
pub fn cosine_distances(v: &Tensor<f64>) -> Result<Tensor<f64>> {
    let (k, f) = v.dims2();
    let data = v.data();
    let norms: Vec<f64> = (0..k)
        .map(|r| libm::sqrt(data[r * f..(r + 1) * f].iter().map(|x| x * x).sum()))
        .collect();
    let zero: Vec<usize> = (0..k).filter(|&r| norms[r] == 0.0).collect();
    if !zero.is_empty() {
        return Err(Error::ZeroNormRows(zero));
    }
    let mut out = vec![0.0; k * k];
    for i in 0..k {
        for j in i + 1..k {
            let dot: f64 = data[i * f..(i + 1) * f]
                .iter()
                .zip(&data[j * f..(j + 1) * f])
                .map(|(a, b)| a * b)
                .sum();
            let d = (1.0 - dot / (norms[i] * norms[j])).clamp(0.0, 2.0);
            out[i * k + j] = d;
            out[j * k + i] = d;
        }
    }
    Tensor::new(vec![k, k], out)
}

/// One agglomeration step. Cluster ids `< K` are leaves; the cluster made by
/// merge `i` gets id `K + i`. `a < b`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Merge {
    pub a: usize,
    pub b: usize,
    pub height: f64,
    pub size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dendrogram {
    pub leaves: usize,
    pub merges: Vec<Merge>,
}

/// Complete-linkage agglomeration of a distance matrix. Among pairs at the
/// minimal distance the one whose smallest members form the smallest
/// `(i, j)` index pair merges first.
pub fn complete_linkage(dist: &Tensor<f64>) -> Result<Dendrogram> {
    let (k, k2) = dist.dims2();
    if k != k2 {
        return Err(Error::shape("complete_linkage", dist.shape(), &[k, k]));
    }
    if k < 2 {
        return Err(Error::InvalidArgument("clustering needs at least 2 rows".into()));
    }
    // active clusters indexed by their smallest member
    let mut d = dist.data().to_vec();
    let mut id: Vec<usize> = (0..k).collect();
    let mut size = vec![1usize; k];
    let mut active = vec![true; k];
    let mut merges = Vec::with_capacity(k - 1);
    for step in 0..k - 1 {
        let mut best: Option<(f64, usize, usize)> = None;
        for i in 0..k {
            if !active[i] {
                continue;
            }
            for j in i + 1..k {
                if active[j] && best.is_none_or(|(h, _, _)| d[i * k + j] < h) {
                    best = Some((d[i * k + j], i, j));
                }
            }
        }
        let (h, i, j) = best.ok_or(Error::Empty("active clusters"))?;
        let (a, b) = (id[i].min(id[j]), id[i].max(id[j]));
        merges.push(Merge {
            a,
            b,
            height: h,
            size: size[i] + size[j],
        });
        // Lance-Williams update for complete linkage, merged cluster kept at i
        for x in 0..k {
            if active[x] && x != i && x != j {
                let v = d[i * k + x].max(d[j * k + x]);
                d[i * k + x] = v;
                d[x * k + i] = v;
            }
        }
        active[j] = false;
        size[i] += size[j];
        id[i] = k + step;
    }
    Ok(Dendrogram { leaves: k, merges })
}

/// Complete-linkage clustering of the rows of `v` under cosine distance.
pub fn hierarchical_cluster(v: &Tensor<f64>) -> Result<Dendrogram> {
    complete_linkage(&cosine_distances(v)?)
}

/// Flat labels after stopping with `k` clusters; labels are numbered in
/// order of each cluster's smallest member.
pub fn cut(tree: &Dendrogram, k: usize) -> Result<Vec<usize>> {
    let n = tree.leaves;
    if k == 0 || k > n {
        return Err(Error::InvalidArgument(format!("cannot cut {n} leaves into {k} clusters")));
    }
    let mut parent: Vec<usize> = (0..2 * n - 1).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    for (i, m) in tree.merges.iter().take(n - k).enumerate() {
        let new = n + i;
        let ra = find(&mut parent, m.a);
        let rb = find(&mut parent, m.b);
        parent[ra] = new;
        parent[rb] = new;
    }
    let mut labels = vec![usize::MAX; n];
    let mut roots: Vec<usize> = Vec::new();
    for leaf in 0..n {
        let r = find(&mut parent, leaf);
        let pos = match roots.iter().position(|&x| x == r) {
            Some(p) => p,
            None => {
                roots.push(r);
                roots.len() - 1
            }
        };
        labels[leaf] = pos;
    }
    Ok(labels)
}

/// Mean silhouette over points from a distance matrix; points in singleton
/// clusters contribute 0.
pub fn silhouette_from_distances(dist: &Tensor<f64>, labels: &[usize]) -> Result<f64> {
    let (n, _) = dist.dims2();
    if labels.len() != n {
        return Err(Error::shape("silhouette", &[labels.len()], &[n]));
    }
    let clusters = labels.iter().max().map_or(0, |m| m + 1);
    let mut sizes = vec![0usize; clusters];
    for &l in labels {
        sizes[l] += 1;
    }
    let distinct = sizes.iter().filter(|&&s| s > 0).count();
    if distinct < 2 {
        return Err(Error::InvalidArgument("silhouette needs at least two clusters".into()));
    }
    let d = dist.data();
    let mut total = 0.0;
    for i in 0..n {
        if sizes[labels[i]] == 1 {
            continue;
        }
        let mut sums = vec![0.0; clusters];
        for j in 0..n {
            if j != i {
                sums[labels[j]] += d[i * n + j];
            }
        }
        let a = sums[labels[i]] / (sizes[labels[i]] - 1) as f64;
        let b = (0..clusters)
            .filter(|&c| c != labels[i] && sizes[c] > 0)
            .map(|c| sums[c] / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let m = a.max(b);
        if m > 0.0 {
            total += (b - a) / m;
        }
    }
    Ok(total / n as f64)
}

/// Cosine-distance silhouette of labelled rows.
pub fn silhouette(v: &Tensor<f64>, labels: &[usize]) -> Result<f64> {
    silhouette_from_distances(&cosine_distances(v)?, labels)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KSelection {
    pub k_star: usize,
    pub silhouette: f64,
    pub labels: Vec<usize>,
    /// `(k, silhouette)` for every evaluated k.
    pub scores: Vec<(usize, f64)>,
    pub dendrogram: Dendrogram,
}

/// Cuts the cosine complete-linkage dendrogram at each `k` in
/// `k_lo..=k_hi` (clipped to at most `K − 1`) and keeps the best silhouette,
/// preferring the smaller `k` on ties.
pub fn select_k(v: &Tensor<f64>, k_lo: usize, k_hi: usize) -> Result<KSelection> {
    let (n, _) = v.dims2();
    if n <= 2 {
        return Err(Error::InvalidArgument(format!("selecting k needs more than 2 rows, got {n}")));
    }
    let lo = k_lo.max(2);
    let hi = k_hi.min(n - 1);
    if lo > hi {
        return Err(Error::InvalidArgument(format!("empty k range {k_lo}..={k_hi} for {n} rows")));
    }
    let dist = cosine_distances(v)?;
    let tree = complete_linkage(&dist)?;
    let mut scores = Vec::new();
    let mut best: Option<(usize, f64, Vec<usize>)> = None;
    for k in lo..=hi {
        let labels = cut(&tree, k)?;
        let s = silhouette_from_distances(&dist, &labels)?;
        scores.push((k, s));
        if best.as_ref().is_none_or(|(_, bs, _)| s > *bs) {
            best = Some((k, s, labels));
        }
    }
    let (k_star, silhouette, labels) = best.ok_or(Error::Empty("k range"))?;
    Ok(KSelection {
        k_star,
        silhouette,
        labels,
        scores,
        dendrogram: tree,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: usize, cols: usize, v: &[f64]) -> Tensor<f64> {
        Tensor::new(vec![rows, cols], v.to_vec()).unwrap()
    }

    #[test]
    fn axis_vectors_merge_order() {
        let v = t(3, 2, &[1.0, 0.0, 1.0, 0.0, 0.0, 1.0]);
        let d = hierarchical_cluster(&v).unwrap();
        assert_eq!(d.merges[0], Merge { a: 0, b: 1, height: 0.0, size: 2 });
        assert_eq!(d.merges[1].a, 2);
        assert_eq!(d.merges[1].b, 3);
        assert!((d.merges[1].height - 1.0).abs() < 1e-15);
    }

    #[test]
    fn zero_rows_rejected() {
        let v = t(3, 2, &[1.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
        assert_eq!(hierarchical_cluster(&v), Err(Error::ZeroNormRows(vec![1])));
    }

    #[test]
    fn singleton_silhouette_is_zero() {
        let v = t(3, 2, &[1.0, 0.0, 0.5, 0.5, 0.0, 1.0]);
        assert_eq!(silhouette(&v, &[0, 1, 2]).unwrap(), 0.0);
        assert!(silhouette(&v, &[0, 0, 0]).is_err());
    }

    #[test]
    fn cut_labels_follow_smallest_member() {
        let v = t(4, 2, &[0.0, 1.0, 1.0, 0.0, 0.01, 1.0, 1.0, 0.02]);
        let tree = hierarchical_cluster(&v).unwrap();
        assert_eq!(cut(&tree, 2).unwrap(), vec![0, 1, 0, 1]);
        assert_eq!(cut(&tree, 4).unwrap(), vec![0, 1, 2, 3]);
        assert_eq!(cut(&tree, 1).unwrap(), vec![0; 4]);
    }

    #[test]
    fn materialized_outer_product() {
        use crate::hyper::LoraFactors;
        let b = Tensor::<f32>::from_f64(&[2, 1], &[1.0, 2.0]).unwrap();
        let a = Tensor::<f32>::from_f64(&[1, 2], &[3.0, -1.0]).unwrap();
        let mut set = DeltaSet::new();
        set.insert(0, LoraFactors::new(b, a, 2.0).unwrap());
        let m = flatten_deltas(&set, FlattenMode::Materialized).unwrap();
        assert_eq!(m, vec![6.0, -2.0, 12.0, -4.0]);
        let f = flatten_deltas(&set, FlattenMode::Factors).unwrap();
        assert_eq!(f, vec![1.0, 2.0, 3.0, -1.0]);
    }
}
