//! Training losses.
//!
//! Five components: a prototype-softmax invariance loss pulling knowledge
//! representations toward their class prototype, a hinge on within-class
//! variant spread, cross-entropy classification and adversarial terms on the
//! knowledge representations, and a per-class reconstruction term combining
//! MSE with a KL divergence between the encoder posteriors on the original
//! and the reconstructed image. Two composites weight them per phase.
//!
//! Every loss exists twice: as a pure value function here (evaluation,
//! logging, oracle tests) and as a fused tape op in [`crate::graph`]
//! (training). Both call the same forward kernels; the brute-force twins the
//! test suite compares against are independent re-derivations.

use crate::error::{Result, UkieError};
use crate::graph;
use ndarray::{Array2, Array3, Array4, Axis};
use std::collections::BTreeMap;

/// Phase-composite weights and the hinge stabilizer epsilon.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossWeights {
    pub alpha_rec: f64,
    pub alpha_iv: f64,
    pub alpha_v: f64,
    pub alpha_gtc: f64,
    pub alpha_adv: f64,
    pub epsilon_var: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha_rec: 1.0,
            alpha_iv: 0.25,
            alpha_v: 0.1,
            alpha_gtc: 1.0,
            alpha_adv: 0.1,
            epsilon_var: 1e-4,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.alpha_rec, self.alpha_iv, self.alpha_v, self.alpha_gtc, self.alpha_adv];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(UkieError::Config("loss weights must be finite and >= 0".into()));
        }
        if !(self.epsilon_var > 0.0) {
            return Err(UkieError::Config("epsilon_var must be > 0".into()));
        }
        Ok(())
    }
}

/// Which side of the KL term the reconstruction loss takes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KlSign {
    /// Subtract the KL (it is pushed up), as the update equations write it.
    Literal,
    /// Add the KL (it is pushed down), the usual variational convention.
    Conventional,
}

impl KlSign {
    pub fn factor(self) -> f64 {
        match self {
            KlSign::Literal => -1.0,
            KlSign::Conventional => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrototypeSource {
    Batch,
    Memory,
}

/// Per-class invariant prototypes, each shaped (C_iv, 8, 8).
#[derive(Debug, Clone)]
pub struct PrototypeSet {
    pub prototypes: BTreeMap<usize, Array3<f64>>,
    pub source: PrototypeSource,
}

impl PrototypeSet {
    pub fn classes(&self) -> Vec<usize> {
        self.prototypes.keys().copied().collect()
    }
}

/// Cosine similarity of two flattened representations.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(UkieError::Shape(format!(
            "cosine: length mismatch {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let na: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(UkieError::Numeric("cosine similarity of a zero vector".into()));
    }
    Ok(a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb))
}

/// Per-class mean of z_K over the batch; classes absent from the batch are
/// omitted.
pub fn batch_prototypes(zk: &Array4<f64>, labels: &[usize]) -> Result<PrototypeSet> {
    if labels.is_empty() {
        return Err(UkieError::Config("batch_prototypes on an empty batch".into()));
    }
    if zk.dim().0 != labels.len() {
        return Err(UkieError::Shape(format!(
            "batch_prototypes: {} representations vs {} labels",
            zk.dim().0,
            labels.len()
        )));
    }
    let mut sums: BTreeMap<usize, (Array3<f64>, usize)> = BTreeMap::new();
    for (i, &y) in labels.iter().enumerate() {
        let row = zk.index_axis(Axis(0), i);
        match sums.get_mut(&y) {
            Some((acc, n)) => {
                *acc += &row;
                *n += 1;
            }
            None => {
                sums.insert(y, (row.to_owned(), 1));
            }
        }
    }
    let prototypes = sums
        .into_iter()
        .map(|(y, (acc, n))| (y, acc / n as f64))
        .collect();
    Ok(PrototypeSet { prototypes, source: PrototypeSource::Batch })
}

/// Sorted distinct labels of a batch.
pub fn present_classes(labels: &[usize]) -> Vec<usize> {
    let mut cs: Vec<usize> = labels.to_vec();
    cs.sort_unstable();
    cs.dedup();
    cs
}

/// Flattens a (N,C,H,W) representation batch into (N, C*H*W).
pub fn flatten_batch(z: &Array4<f64>) -> Array2<f64> {
    let (n, c, h, w) = z.dim();
    z.as_standard_layout()
        .into_owned()
        .into_shape_with_order((n, c * h * w))
        .unwrap()
}

/// Prototype matrix (rows follow `classes` order) and the per-sample row map
/// used by the fused invariance-loss op.
pub fn proto_rows(
    protos: &PrototypeSet,
    labels: &[usize],
) -> Result<(Array2<f64>, Vec<usize>, Vec<usize>)> {
    if labels.is_empty() {
        return Err(UkieError::Config("invariant loss on an empty batch".into()));
    }
    let classes = present_classes(labels);
    let mut rows_by_class = BTreeMap::new();
    let dim = protos
        .prototypes
        .values()
        .next()
        .map(|p| p.len())
        .ok_or_else(|| UkieError::Config("empty prototype set".into()))?;
    let mut matrix = Array2::<f64>::zeros((classes.len(), dim));
    for (r, &c) in classes.iter().enumerate() {
        let p = protos
            .prototypes
            .get(&c)
            .ok_or_else(|| UkieError::Config(format!("prototype set missing class {c} present in batch")))?;
        let flat = p.as_standard_layout().into_owned();
        let flat = flat.as_slice().unwrap();
        if flat.len() != dim {
            return Err(UkieError::Shape("inconsistent prototype sizes".into()));
        }
        if flat.iter().all(|v| *v == 0.0) {
            return Err(UkieError::Numeric(format!("zero prototype for class {c}")));
        }
        matrix.row_mut(r).assign(&ndarray::ArrayView1::from(flat));
        rows_by_class.insert(c, r);
    }
    let rows = labels.iter().map(|y| rows_by_class[y]).collect();
    Ok((matrix, rows, classes))
}

/// Prototype-softmax invariance loss. For each class present in the batch,
/// the mean exp-similarity to its own prototype is divided by the summed
/// mean exp-similarity to every present prototype; the negated ratios are
/// summed over classes, so the value lies in [-C, 0).
pub fn invariant_loss(zk: &Array4<f64>, labels: &[usize], protos: &PrototypeSet) -> Result<f64> {
    let (matrix, rows, _) = proto_rows(protos, labels)?;
    let flat = flatten_batch(zk);
    for row in flat.rows() {
        if row.iter().all(|v| *v == 0.0) {
            return Err(UkieError::Numeric("zero representation in invariant loss".into()));
        }
    }
    Ok(graph::invariant_proto_value(&flat, &matrix, &rows))
}

/// Hinge on within-class spread: mean over classes with >= 2 samples of
/// max(0, 1 - sqrt(Var + eps)), with Var the dimension-normalized within-class
/// variance. Classes with fewer than two samples are skipped.
pub fn variant_loss(zv: &Array4<f64>, labels: &[usize], epsilon_var: f64) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let classes = present_classes(labels);
    let index: BTreeMap<usize, usize> = classes.iter().enumerate().map(|(r, &c)| (c, r)).collect();
    let rows: Vec<usize> = labels.iter().map(|y| index[y]).collect();
    let flat = flatten_batch(zv);
    graph::variant_hinge_value(&flat, &rows, classes.len(), epsilon_var)
}

/// Batch-mean cross-entropy of softmax(logits) against the labels.
pub fn classification_loss(logits: &Array2<f64>, labels: &[usize]) -> f64 {
    graph::cross_entropy_value(logits, labels)
}

/// The adversarial game uses the same cross-entropy functional, evaluated on
/// the discriminator's logits; the update directions differ, not the value.
pub fn adversarial_loss(logits: &Array2<f64>, labels: &[usize]) -> f64 {
    graph::cross_entropy_value(logits, labels)
}

/// Diagonal-Gaussian moments of an encoded batch, flattened to (N, d).
#[derive(Debug, Clone)]
pub struct FlatMoments {
    pub mu: Array2<f64>,
    pub logvar: Array2<f64>,
}

impl FlatMoments {
    pub fn from_nchw(mu: &Array4<f64>, logvar: &Array4<f64>) -> Self {
        FlatMoments { mu: flatten_batch(mu), logvar: flatten_batch(logvar) }
    }
}

/// Per-class reconstruction loss: sum over classes present in the batch of
/// (mean squared error) plus `kl_sign` times the KL between the encoder
/// posterior on x and the encoder posterior on x_hat. Both terms are
/// per-element means (pixels and latent dimensions respectively), so their
/// scales stay commensurate across layouts.
pub fn reconstruction_loss(
    x: &Array4<f64>,
    x_hat: &Array4<f64>,
    moments_x: &FlatMoments,
    moments_xhat: &FlatMoments,
    labels: &[usize],
    kl_sign: KlSign,
) -> Result<f64> {
    if x.dim() != x_hat.dim() {
        return Err(UkieError::Shape(format!(
            "reconstruction: x {:?} vs x_hat {:?}",
            x.dim(),
            x_hat.dim()
        )));
    }
    if labels.is_empty() {
        return Err(UkieError::Config("reconstruction loss on an empty batch".into()));
    }
    let classes = present_classes(labels);
    let index: BTreeMap<usize, usize> = classes.iter().enumerate().map(|(r, &c)| (c, r)).collect();
    let rows: Vec<usize> = labels.iter().map(|y| index[y]).collect();
    let mse = graph::per_class_mse_value(
        &x_hat.clone().into_dyn(),
        &x.clone().into_dyn(),
        &rows,
        classes.len(),
    );
    let kl = graph::per_class_gauss_kl_value(
        &moments_x.mu,
        &moments_x.logvar,
        &moments_xhat.mu,
        &moments_xhat.logvar,
        &rows,
        classes.len(),
    ) / moments_x.mu.ncols() as f64;
    Ok(mse + kl_sign.factor() * kl)
}

/// Generator-phase composite.
pub fn generator_phase_loss(w: &LossWeights, l_rec: f64, l_iv: f64, l_v: f64) -> f64 {
    w.alpha_rec * l_rec + w.alpha_iv * l_iv + w.alpha_v * l_v
}

/// Discriminator-phase composite.
pub fn mid_phase_loss(w: &LossWeights, l_iv: f64, l_gtc: f64) -> f64 {
    w.alpha_iv * l_iv + w.alpha_gtc * l_gtc
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{fill_gaussian, stream};
    use ndarray::Array4;
    use proptest::prelude::*;
    use std::f64::consts::E;

    fn randn4(shape: (usize, usize, usize, usize), seed: u64) -> Array4<f64> {
        let mut rng = stream(seed, "loss-test", 0);
        let mut a = Array4::<f64>::zeros(shape);
        fill_gaussian(&mut rng, a.as_slice_mut().unwrap());
        a
    }

    fn random_labels(n: usize, c: usize, seed: u64) -> Vec<usize> {
        use rand::Rng;
        let mut rng = stream(seed, "loss-labels", 0);
        (0..n).map(|_| rng.gen_range(0..c)).collect()
    }

    // ---------------- brute-force twins (independent re-derivations) -------

    fn oracle_cosine(a: &[f64], b: &[f64]) -> f64 {
        let mut dot = 0.0;
        let mut na = 0.0;
        let mut nb = 0.0;
        for i in 0..a.len() {
            dot += a[i] * b[i];
            na += a[i] * a[i];
            nb += b[i] * b[i];
        }
        dot / (na.sqrt() * nb.sqrt())
    }

    fn oracle_invariant(zk: &Array4<f64>, labels: &[usize], protos: &PrototypeSet) -> f64 {
        let classes = present_classes(labels);
        let flat = flatten_batch(zk);
        let mut loss = 0.0;
        for &c in &classes {
            let members: Vec<usize> =
                labels.iter().enumerate().filter(|(_, &y)| y == c).map(|(i, _)| i).collect();
            let mean_exp_to = |target: usize| -> f64 {
                let p = protos.prototypes[&target].clone().into_raw_vec_and_offset().0;
                members
                    .iter()
                    .map(|&i| oracle_cosine(flat.row(i).as_slice().unwrap(), &p).exp())
                    .sum::<f64>()
                    / members.len() as f64
            };
            let num = mean_exp_to(c);
            let den: f64 = classes.iter().map(|&cp| mean_exp_to(cp)).sum();
            loss -= num / den;
        }
        loss
    }

    fn oracle_variant(zv: &Array4<f64>, labels: &[usize], eps: f64) -> f64 {
        let classes = present_classes(labels);
        let flat = flatten_batch(zv);
        let d = flat.ncols();
        let mut total = 0.0;
        let mut active = 0;
        for &c in &classes {
            let members: Vec<usize> =
                labels.iter().enumerate().filter(|(_, &y)| y == c).map(|(i, _)| i).collect();
            if members.len() < 2 {
                continue;
            }
            active += 1;
            let mut mean = vec![0.0; d];
            for &i in &members {
                for j in 0..d {
                    mean[j] += flat[[i, j]];
                }
            }
            for m in mean.iter_mut() {
                *m /= members.len() as f64;
            }
            let mut var = 0.0;
            for &i in &members {
                let mut sq = 0.0;
                for j in 0..d {
                    let dv = flat[[i, j]] - mean[j];
                    sq += dv * dv;
                }
                var += sq / d as f64;
            }
            var /= members.len() as f64;
            let hinge = 1.0 - (var + eps).sqrt();
            total += hinge.max(0.0);
        }
        if active == 0 {
            0.0
        } else {
            total / active as f64
        }
    }

    fn oracle_cross_entropy(logits: &Array2<f64>, labels: &[usize]) -> f64 {
        let mut total = 0.0;
        for (i, row) in logits.rows().into_iter().enumerate() {
            let exps: Vec<f64> = row.iter().map(|v| v.exp()).collect();
            let s: f64 = exps.iter().sum();
            total -= (exps[labels[i]] / s).ln();
        }
        total / logits.nrows() as f64
    }

    fn oracle_reconstruction(
        x: &Array4<f64>,
        xh: &Array4<f64>,
        mx: &FlatMoments,
        mxh: &FlatMoments,
        labels: &[usize],
        sign: KlSign,
    ) -> f64 {
        let classes = present_classes(labels);
        let n = x.dim().0;
        let per: usize = x.len() / n;
        let xs = x.as_slice().unwrap();
        let xhs = xh.as_slice().unwrap();
        let mut total = 0.0;
        for &c in &classes {
            let members: Vec<usize> =
                labels.iter().enumerate().filter(|(_, &y)| y == c).map(|(i, _)| i).collect();
            let mut mse = 0.0;
            let mut kl = 0.0;
            for &i in &members {
                let mut sq = 0.0;
                for j in i * per..(i + 1) * per {
                    sq += (xs[j] - xhs[j]) * (xs[j] - xhs[j]);
                }
                mse += sq / per as f64;
                for d in 0..mx.mu.ncols() {
                    let v1 = mx.logvar[[i, d]].exp();
                    let v2 = mxh.logvar[[i, d]].exp();
                    let dm = mx.mu[[i, d]] - mxh.mu[[i, d]];
                    kl += (v2 / v1).ln() / 2.0 + (v1 + dm * dm) / (2.0 * v2) - 0.5;
                }
            }
            total += mse / members.len() as f64
                + sign.factor() * kl / (members.len() * mx.mu.ncols()) as f64;
        }
        total
    }

    // ---------------- pinned examples --------------------------------------

    #[test]
    fn cosine_pinned_values() {
        let v = vec![0.3, -1.2, 0.7];
        let nv: Vec<f64> = v.iter().map(|x| -x).collect();
        assert!((cosine_similarity(&v, &v).unwrap() - 1.0).abs() < 1e-12);
        assert!((cosine_similarity(&v, &nv).unwrap() + 1.0).abs() < 1e-12);
        assert!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap().abs() < 1e-12);
        assert!(cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn prototypes_pinned_cases() {
        // two identical samples of class 0 -> prototype equals the sample
        let mut zk = Array4::<f64>::zeros((2, 1, 2, 2));
        zk.index_axis_mut(Axis(0), 0).assign(&ndarray::arr3(&[[[1.0, 2.0], [3.0, 4.0]]]));
        zk.index_axis_mut(Axis(0), 1).assign(&ndarray::arr3(&[[[1.0, 2.0], [3.0, 4.0]]]));
        let p = batch_prototypes(&zk, &[0, 0]).unwrap();
        assert_eq!(p.prototypes[&0], ndarray::arr3(&[[[1.0, 2.0], [3.0, 4.0]]]));

        // {u, -u} -> zero prototype
        let mut zk2 = Array4::<f64>::zeros((2, 1, 2, 2));
        zk2.index_axis_mut(Axis(0), 0).assign(&ndarray::arr3(&[[[1.0, -2.0], [0.5, 4.0]]]));
        zk2.index_axis_mut(Axis(0), 1).assign(&ndarray::arr3(&[[[-1.0, 2.0], [-0.5, -4.0]]]));
        let p2 = batch_prototypes(&zk2, &[1, 1]).unwrap();
        assert!(p2.prototypes[&1].iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn prototypes_match_bruteforce_average() {
        let zk = randn4((20, 2, 3, 3), 5);
        let labels = random_labels(20, 4, 6);
        let p = batch_prototypes(&zk, &labels).unwrap();
        for c in present_classes(&labels) {
            let members: Vec<usize> =
                labels.iter().enumerate().filter(|(_, &y)| y == c).map(|(i, _)| i).collect();
            let mut acc = ndarray::Array3::<f64>::zeros((2, 3, 3));
            for &i in &members {
                acc += &zk.index_axis(Axis(0), i);
            }
            acc /= members.len() as f64;
            let diff = (&acc - &p.prototypes[&c]).iter().map(|v| v.abs()).fold(0.0, f64::max);
            assert!(diff < 1e-12);
        }
    }

    #[test]
    fn invariant_single_class_is_minus_one() {
        let zk = randn4((6, 2, 2, 2), 7);
        let labels = vec![0usize; 6];
        let protos = batch_prototypes(&zk, &labels).unwrap();
        let l = invariant_loss(&zk, &labels, &protos).unwrap();
        assert!((l + 1.0).abs() < 1e-12, "{l}");
    }

    #[test]
    fn invariant_orthogonal_converged_value() {
        // two classes, every sample equal to its own prototype, prototypes
        // orthogonal -> each ratio e/(e+1), total -2e/(e+1)
        let mut zk = Array4::<f64>::zeros((4, 1, 2, 2));
        for i in 0..4 {
            let y = i % 2;
            zk[[i, 0, 0, y]] = 1.0;
        }
        let labels = vec![0, 1, 0, 1];
        let protos = batch_prototypes(&zk, &labels).unwrap();
        let l = invariant_loss(&zk, &labels, &protos).unwrap();
        let expected = -2.0 * E / (E + 1.0);
        assert!((l - expected).abs() < 1e-12, "{l} vs {expected}");
        assert!((l + 1.4621).abs() < 1e-4);
    }

    #[test]
    fn invariant_missing_prototype_is_error() {
        let zk = randn4((4, 1, 2, 2), 8);
        let labels = vec![0, 1, 0, 1];
        let protos = batch_prototypes(&zk, &[0, 0, 0, 0]).unwrap();
        assert!(invariant_loss(&zk, &labels, &protos).is_err());
    }

    #[test]
    fn invariant_matches_oracle() {
        for seed in 0..10 {
            let zk = randn4((16, 2, 2, 2), 100 + seed);
            let labels = random_labels(16, 3, 200 + seed);
            let protos = batch_prototypes(&zk, &labels).unwrap();
            let fast = invariant_loss(&zk, &labels, &protos).unwrap();
            let slow = oracle_invariant(&zk, &labels, &protos);
            assert!((fast - slow).abs() <= 1e-6 * slow.abs().max(1.0), "{fast} vs {slow}");
        }
    }

    #[test]
    fn variant_pinned_values() {
        // within-class variance exactly 1 and eps->0 closes the hinge
        let mut zv = Array4::<f64>::zeros((2, 1, 2, 2));
        zv.index_axis_mut(Axis(0), 0).fill(1.0);
        zv.index_axis_mut(Axis(0), 1).fill(-1.0);
        let l = variant_loss(&zv, &[0, 0], 0.0);
        assert!(l.abs() < 1e-12, "{l}");

        // identical members, eps = 1e-4 -> 1 - sqrt(1e-4) = 0.99
        let zv2 = Array4::<f64>::from_elem((3, 1, 2, 2), 0.7);
        let l2 = variant_loss(&zv2, &[0, 0, 0], 1e-4);
        assert!((l2 - 0.99).abs() < 1e-12, "{l2}");
    }

    #[test]
    fn variant_skips_singletons() {
        let zv = randn4((3, 1, 2, 2), 9);
        // class 1 has a single sample; only class 0 counts
        let with_singleton = variant_loss(&zv, &[0, 0, 1], 1e-4);
        let only_pair = variant_loss(
            &zv.slice(ndarray::s![0..2, .., .., ..]).to_owned(),
            &[0, 0],
            1e-4,
        );
        assert!((with_singleton - only_pair).abs() < 1e-12);
    }

    #[test]
    fn variant_matches_oracle() {
        for seed in 0..10 {
            let zv = randn4((16, 2, 2, 2), 300 + seed);
            let labels = random_labels(16, 3, 400 + seed);
            let fast = variant_loss(&zv, &labels, 1e-4);
            let slow = oracle_variant(&zv, &labels, 1e-4);
            assert!((fast - slow).abs() <= 1e-6, "{fast} vs {slow}");
        }
    }

    #[test]
    fn classification_pinned_values() {
        // near-one-hot logits -> ~0
        let mut logits = Array2::<f64>::zeros((3, 10));
        for i in 0..3 {
            logits[[i, i]] = 100.0;
        }
        assert!(classification_loss(&logits, &[0, 1, 2]) < 1e-10);
        // uniform logits -> ln C
        let uniform = Array2::<f64>::zeros((4, 10));
        let l = classification_loss(&uniform, &[0, 3, 5, 9]);
        assert!((l - 10f64.ln()).abs() < 1e-12);
        assert!((l - 2.3026).abs() < 1e-4);
    }

    #[test]
    fn cross_entropy_matches_oracle() {
        for seed in 0..10 {
            let logits_d = randn4((12, 1, 1, 5), 500 + seed);
            let logits = flatten_batch(&logits_d);
            let labels = random_labels(12, 5, 600 + seed);
            let fast = classification_loss(&logits, &labels);
            let slow = oracle_cross_entropy(&logits, &labels);
            assert!((fast - slow).abs() <= 1e-9 * slow.max(1.0));
            assert!((adversarial_loss(&logits, &labels) - fast).abs() < 1e-15);
        }
    }

    #[test]
    fn reconstruction_pinned_values() {
        let x = randn4((4, 1, 2, 2), 10).mapv(|v| v.abs().min(1.0));
        let mu = flatten_batch(&randn4((4, 1, 2, 2), 11));
        let lv = flatten_batch(&randn4((4, 1, 2, 2), 12)).mapv(|v| v * 0.1);
        let m = FlatMoments { mu: mu.clone(), logvar: lv.clone() };
        let labels = vec![0, 1, 0, 1];
        // x_hat = x with identical moments -> 0 for either sign
        for sign in [KlSign::Literal, KlSign::Conventional] {
            let l = reconstruction_loss(&x, &x, &m, &m.clone(), &labels, sign).unwrap();
            assert!(l.abs() < 1e-12);
        }
        // N(0,1) vs N(1,1): KL = 0.5 per dim; 4 dims, conventional sign
        let zeros = FlatMoments {
            mu: Array2::zeros((2, 4)),
            logvar: Array2::zeros((2, 4)),
        };
        let ones = FlatMoments {
            mu: Array2::from_elem((2, 4), 1.0),
            logvar: Array2::zeros((2, 4)),
        };
        let l = reconstruction_loss(
            &Array4::zeros((2, 1, 2, 2)),
            &Array4::zeros((2, 1, 2, 2)),
            &zeros,
            &ones,
            &[0, 0],
            KlSign::Conventional,
        )
        .unwrap();
        assert!((l - 0.5).abs() < 1e-12, "0.5 per dim, one class: {l}");
    }

    #[test]
    fn reconstruction_matches_oracle() {
        for seed in 0..10 {
            let x = randn4((8, 1, 3, 3), 700 + seed);
            let xh = randn4((8, 1, 3, 3), 800 + seed);
            let mx = FlatMoments {
                mu: flatten_batch(&randn4((8, 1, 1, 6), 900 + seed)),
                logvar: flatten_batch(&randn4((8, 1, 1, 6), 1000 + seed)).mapv(|v| v * 0.3),
            };
            let mxh = FlatMoments {
                mu: flatten_batch(&randn4((8, 1, 1, 6), 1100 + seed)),
                logvar: flatten_batch(&randn4((8, 1, 1, 6), 1200 + seed)).mapv(|v| v * 0.3),
            };
            let labels = random_labels(8, 3, 1300 + seed);
            for sign in [KlSign::Literal, KlSign::Conventional] {
                let fast = reconstruction_loss(&x, &xh, &mx, &mxh, &labels, sign).unwrap();
                let slow = oracle_reconstruction(&x, &xh, &mx, &mxh, &labels, sign);
                assert!(
                    (fast - slow).abs() <= 1e-6 * slow.abs().max(1.0),
                    "{fast} vs {slow}"
                );
            }
        }
    }

    #[test]
    fn composite_pinned_values() {
        let w = LossWeights {
            alpha_rec: 1.0,
            alpha_iv: 1.0,
            alpha_v: 1.0,
            alpha_gtc: 1.0,
            alpha_adv: 1.0,
            epsilon_var: 1e-4,
        };
        let l = generator_phase_loss(&w, 0.2, -1.0, 0.5);
        assert!((l + 0.3).abs() < 1e-12);
        // zero weight removes the component
        let mut w2 = w;
        w2.alpha_v = 0.0;
        assert!((generator_phase_loss(&w2, 0.2, -1.0, 123.0) + 0.8).abs() < 1e-12);
        assert!((mid_phase_loss(&w, -0.5, 0.7) - 0.2).abs() < 1e-12);
    }

    #[test]
    fn default_weights_follow_tuning() {
        let w = LossWeights::default();
        assert_eq!(w.alpha_rec, 1.0);
        assert_eq!(w.alpha_iv, 0.25);
        assert_eq!(w.alpha_v, 0.1);
        assert_eq!(w.alpha_gtc, 1.0);
        w.validate().unwrap();
        let bad = LossWeights { alpha_rec: -1.0, ..w };
        assert!(bad.validate().is_err());
    }

    // ---------------- properties -------------------------------------------

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn invariant_bounds(seed in 0u64..500, c in 2usize..5) {
            let n = 4 * c;
            let zk = randn4((n, 1, 2, 2), seed);
            let labels: Vec<usize> = (0..n).map(|i| i % c).collect();
            let protos = batch_prototypes(&zk, &labels).unwrap();
            let l = invariant_loss(&zk, &labels, &protos).unwrap();
            prop_assert!(l >= -(c as f64) - 1e-9);
            prop_assert!(l < 0.0);
        }

        #[test]
        fn variant_range(seed in 0u64..500) {
            let zv = randn4((12, 1, 2, 2), seed);
            let labels: Vec<usize> = (0..12).map(|i| i % 3).collect();
            let l = variant_loss(&zv, &labels, 1e-4);
            prop_assert!((0.0..=1.0).contains(&l));
        }

        #[test]
        fn cross_entropy_nonnegative(seed in 0u64..500) {
            let logits = flatten_batch(&randn4((6, 1, 1, 4), seed));
            let labels = random_labels(6, 4, seed + 1);
            prop_assert!(classification_loss(&logits, &labels) >= 0.0);
        }
    }

    #[test]
    fn variant_monotone_in_spread() {
        let zv = randn4((12, 2, 2, 2), 42);
        let labels: Vec<usize> = (0..12).map(|i| i % 3).collect();
        let mut prev = f64::INFINITY;
        for scale in [0.05, 0.2, 0.5, 1.0, 2.0, 5.0] {
            let scaled = zv.mapv(|v| v * scale);
            let l = variant_loss(&scaled, &labels, 1e-4);
            assert!(l <= prev + 1e-12, "spread up, loss must not rise: {l} > {prev}");
            prev = l;
        }
    }
}
