//! Labeled tensors with Z^3-valued axes, partition operator norms, and
//! executable verification of the merging estimates, the Gaussian
//! contraction bound, and the weighted merge bound.

use std::collections::BTreeMap;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::Mode;
use crate::linalg;
use crate::sampling::complex_normal;
use crate::seeds;

/// Hard cap on dense tensor storage.
pub const MAX_TENSOR_ENTRIES: usize = 10_000_000;

/// One named axis with an explicit integer-vector index range.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Axis {
    pub name: String,
    pub range: Vec<Mode>,
}

impl Axis {
    pub fn new(name: impl Into<String>, range: Vec<Mode>) -> Self {
        Axis { name: name.into(), range }
    }

    /// All lattice points of the box `[lo, hi]^3`, lexicographic.
    pub fn cube(name: impl Into<String>, lo: i64, hi: i64) -> Self {
        let mut range = Vec::new();
        for x in lo..=hi {
            for y in lo..=hi {
                for z in lo..=hi {
                    range.push([x, y, z]);
                }
            }
        }
        Axis { name: name.into(), range }
    }

    pub fn len(&self) -> usize {
        self.range.len()
    }

    pub fn is_empty(&self) -> bool {
        self.range.is_empty()
    }
}

/// Dense complex tensor over named Z^3-valued axes, row-major in axis order.
#[derive(Debug, Clone)]
pub struct LabeledTensor {
    axes: Vec<Axis>,
    values: Vec<Complex64>,
}

impl LabeledTensor {
    pub fn zeros(axes: Vec<Axis>) -> Result<Self> {
        let mut names = axes.iter().map(|a| a.name.clone()).collect::<Vec<_>>();
        names.sort();
        names.dedup();
        if names.len() != axes.len() {
            return Err(Error::InvalidParameter("axis names must be unique".into()));
        }
        let size: usize = axes.iter().map(|a| a.len()).product();
        if size > MAX_TENSOR_ENTRIES {
            return Err(Error::BudgetExceeded(format!("tensor with {size} entries")));
        }
        Ok(LabeledTensor { values: vec![Complex64::ZERO; size], axes })
    }

    pub fn from_values(axes: Vec<Axis>, values: Vec<Complex64>) -> Result<Self> {
        let mut t = Self::zeros(axes)?;
        if values.len() != t.values.len() {
            return Err(Error::InvalidParameter("value count mismatch".into()));
        }
        t.values = values;
        Ok(t)
    }

    /// I.i.d. complex standard normal entries from a deterministic stream.
    pub fn random_gaussian(axes: Vec<Axis>, seed: u64) -> Result<Self> {
        let mut t = Self::zeros(axes)?;
        for (i, v) in t.values.iter_mut().enumerate() {
            *v = complex_normal(seeds::derive(seed, i as u64), [0, 0, 0]);
        }
        Ok(t)
    }

    pub fn axes(&self) -> &[Axis] {
        &self.axes
    }

    pub fn values(&self) -> &[Complex64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Complex64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn axis_index(&self, name: &str) -> Option<usize> {
        self.axes.iter().position(|a| a.name == name)
    }

    fn strides(&self) -> Vec<usize> {
        let mut strides = vec![1usize; self.axes.len()];
        for i in (0..self.axes.len().saturating_sub(1)).rev() {
            strides[i] = strides[i + 1] * self.axes[i + 1].len();
        }
        strides
    }

    /// Decompose a flat index into per-axis positions.
    fn unravel(&self, mut flat: usize, strides: &[usize]) -> Vec<usize> {
        let mut idx = vec![0usize; self.axes.len()];
        for (i, s) in strides.iter().enumerate() {
            idx[i] = flat / s;
            flat %= s;
        }
        idx
    }

    pub fn frobenius(&self) -> f64 {
        self.values.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt()
    }

    /// The matricization of the tensor as a map `l^2(k_B) -> l^2(k_C)`,
    /// returned as (rows = C-product, cols = B-product, row-major data).
    pub fn matricize(&self, b: &[&str], c: &[&str]) -> Result<(usize, usize, Vec<Complex64>)> {
        self.check_partition(b, c)?;
        let strides = self.strides();
        let b_axes: Vec<usize> = b.iter().map(|n| self.axis_index(n).unwrap()).collect();
        let c_axes: Vec<usize> = c.iter().map(|n| self.axis_index(n).unwrap()).collect();
        let cols: usize = b_axes.iter().map(|&i| self.axes[i].len()).product();
        let rows: usize = c_axes.iter().map(|&i| self.axes[i].len()).product();
        let mut data = vec![Complex64::ZERO; rows * cols];
        for (flat, v) in self.values.iter().enumerate() {
            if *v == Complex64::ZERO {
                continue;
            }
            let idx = self.unravel(flat, &strides);
            let mut col = 0usize;
            for &ai in &b_axes {
                col = col * self.axes[ai].len() + idx[ai];
            }
            let mut row = 0usize;
            for &ai in &c_axes {
                row = row * self.axes[ai].len() + idx[ai];
            }
            data[row * cols + col] = *v;
        }
        Ok((rows, cols, data))
    }

    fn check_partition(&self, b: &[&str], c: &[&str]) -> Result<()> {
        let mut all: Vec<&str> = b.iter().chain(c.iter()).copied().collect();
        all.sort();
        all.dedup();
        let mut names: Vec<&str> = self.axes.iter().map(|a| a.name.as_str()).collect();
        names.sort();
        if all.len() != b.len() + c.len() || all != names {
            return Err(Error::Hypothesis(format!(
                "({b:?}, {c:?}) is not a partition of the axis set"
            )));
        }
        Ok(())
    }
}

/// The partition operator norm `||h||_{k_B -> k_C}` of (the matricization
/// of) a labeled tensor: power iteration with a deterministic start and a
/// dense-SVD fallback for small matrices.
pub fn partition_norm(h: &LabeledTensor, b: &[&str], c: &[&str]) -> Result<f64> {
    let (rows, cols, data) = h.matricize(b, c)?;
    Ok(linalg::spectral_norm(rows, cols, &data))
}

/// The semi-product: contract two tensors over all axes they share by name
/// (ranges must agree); the result keeps the symmetric difference, h1's free
/// axes first.
pub fn semi_product(h1: &LabeledTensor, h2: &LabeledTensor) -> Result<LabeledTensor> {
    let shared: Vec<String> = h1
        .axes
        .iter()
        .filter(|a| h2.axis_index(&a.name).is_some())
        .map(|a| a.name.clone())
        .collect();
    for name in &shared {
        let a1 = &h1.axes[h1.axis_index(name).unwrap()];
        let a2 = &h2.axes[h2.axis_index(name).unwrap()];
        if a1.range != a2.range {
            return Err(Error::Hypothesis(format!(
                "shared axis {name} has incompatible ranges"
            )));
        }
    }
    let shared_refs: Vec<&str> = shared.iter().map(|s| s.as_str()).collect();
    let free1: Vec<&str> = h1
        .axes
        .iter()
        .filter(|a| !shared.contains(&a.name))
        .map(|a| a.name.as_str())
        .collect();
    let free2: Vec<&str> = h2
        .axes
        .iter()
        .filter(|a| !shared.contains(&a.name))
        .map(|a| a.name.as_str())
        .collect();
    // reorganize both as (shared x free) matrices and contract
    let (r1, c1, m1) = h1.matricize(&free1, &shared_refs)?; // rows = shared, cols = free1
    let (r2, c2, m2) = h2.matricize(&free2, &shared_refs)?; // rows = shared, cols = free2
    debug_assert_eq!(r1, r2);
    let mut out_axes = Vec::new();
    for n in &free1 {
        out_axes.push(h1.axes[h1.axis_index(n).unwrap()].clone());
    }
    for n in &free2 {
        out_axes.push(h2.axes[h2.axis_index(n).unwrap()].clone());
    }
    let mut out = LabeledTensor::zeros(out_axes)?;
    // out[f1, f2] = sum_s m1[s, f1] m2[s, f2]
    for s in 0..r1 {
        let row1 = &m1[s * c1..(s + 1) * c1];
        let row2 = &m2[s * c2..(s + 1) * c2];
        for (i1, a) in row1.iter().enumerate() {
            if *a == Complex64::ZERO {
                continue;
            }
            let base = i1 * c2;
            for (i2, b) in row2.iter().enumerate() {
                out.values[base + i2] += a * b;
            }
        }
    }
    Ok(out)
}

/// Result of one inequality check.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MergeReport {
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
}

const SLACK: f64 = 1e-10;

fn verdict(lhs: f64, rhs: f64) -> MergeReport {
    MergeReport { lhs, rhs, holds: lhs <= rhs * (1.0 + SLACK) + f64::MIN_POSITIVE }
}

/// Two-tensor merging estimate: for a partition `(X, Y)` of the symmetric
/// difference, `||H||_{k_X -> k_Y} <= ||h1||_{k_{X1 u C} -> k_{Y1}} *
/// ||h2||_{k_{X2} -> k_{C u Y2}}`.
pub fn verify_merge_pair(
    h1: &LabeledTensor,
    h2: &LabeledTensor,
    x: &[&str],
    y: &[&str],
) -> Result<MergeReport> {
    let shared: Vec<&str> = h1
        .axes
        .iter()
        .filter(|a| h2.axis_index(&a.name).is_some())
        .map(|a| a.name.as_str())
        .collect();
    let h = semi_product(h1, h2)?;
    let lhs = partition_norm(&h, x, y)?;
    let in1: Vec<&str> = x
        .iter()
        .copied()
        .filter(|n| h1.axis_index(n).is_some())
        .chain(shared.iter().copied())
        .collect();
    let out1: Vec<&str> = y
        .iter()
        .copied()
        .filter(|n| h1.axis_index(n).is_some())
        .collect();
    let in2: Vec<&str> = x
        .iter()
        .copied()
        .filter(|n| h2.axis_index(n).is_some())
        .collect();
    let out2: Vec<&str> = y
        .iter()
        .copied()
        .filter(|n| h2.axis_index(n).is_some())
        .chain(shared.iter().copied())
        .collect();
    let rhs = partition_norm(h1, &in1, &out1)? * partition_norm(h2, &in2, &out2)?;
    Ok(verdict(lhs, rhs))
}

/// Multi-factor merging estimate: every index may appear in at most two
/// factors; `B_j` collects the indices `j` shares with later factors, `C_j`
/// with earlier ones, and
/// `||H||_{k_X -> k_Y} <= prod_j ||h_j||_{k_{Xj u Bj} -> k_{Yj u Cj}}`.
pub fn verify_merge_chain(
    hs: &[&LabeledTensor],
    x: &[&str],
    y: &[&str],
) -> Result<MergeReport> {
    // occurrence check
    let mut count: BTreeMap<&str, usize> = BTreeMap::new();
    for h in hs {
        for a in h.axes() {
            *count.entry(a.name.as_str()).or_insert(0) += 1;
        }
    }
    if count.values().any(|&c| c > 2) {
        return Err(Error::Hypothesis(
            "an index appears in more than two factors".into(),
        ));
    }
    let mut h = hs[0].clone();
    for next in &hs[1..] {
        h = semi_product(&h, next)?;
    }
    let lhs = partition_norm(&h, x, y)?;
    let mut rhs = 1.0;
    for (j, hj) in hs.iter().enumerate() {
        let b_j: Vec<&str> = hj
            .axes()
            .iter()
            .filter(|a| {
                hs.iter()
                    .skip(j + 1)
                    .any(|hl| hl.axis_index(&a.name).is_some())
            })
            .map(|a| a.name.as_str())
            .collect();
        let c_j: Vec<&str> = hj
            .axes()
            .iter()
            .filter(|a| {
                hs.iter().take(j).any(|hl| hl.axis_index(&a.name).is_some())
            })
            .map(|a| a.name.as_str())
            .collect();
        let in_j: Vec<&str> = x
            .iter()
            .copied()
            .filter(|n| hj.axis_index(n).is_some())
            .chain(b_j.iter().copied())
            .collect();
        let out_j: Vec<&str> = y
            .iter()
            .copied()
            .filter(|n| hj.axis_index(n).is_some())
            .chain(c_j.iter().copied())
            .collect();
        rhs *= partition_norm(hj, &in_j, &out_j)?;
    }
    Ok(verdict(lhs, rhs))
}

/// Matrix-contraction corollary: contract a core tensor `H_{k_1 .. k_r}`
/// with matrices `h^{(j)}_{k_j k'_j}` over `k_j` for `j <= q`; for any
/// partition of the remaining indices,
/// `||sum H prod h|| <= ||H|| prod ||h^{(j)}||_{k_j -> k'_j}` with the core
/// partition obtained by renaming each `k'_j` back to `k_j`.
pub fn verify_merge_contraction(
    core: &LabeledTensor,
    mats: &[(&LabeledTensor, &str, &str)],
    a_prime: &[&str],
    b_prime: &[&str],
) -> Result<MergeReport> {
    let mut h = core.clone();
    let mut rhs_mats = 1.0;
    for (m, k_name, k_prime_name) in mats {
        if m.axes().len() != 2 {
            return Err(Error::Hypothesis("contraction factors must be matrices".into()));
        }
        rhs_mats *= partition_norm(m, &[k_name], &[k_prime_name])?;
        h = semi_product(&h, m)?;
    }
    let lhs = partition_norm(&h, a_prime, b_prime)?;
    let rename = |names: &[&str]| -> Vec<String> {
        names
            .iter()
            .map(|n| {
                mats.iter()
                    .find(|(_, _, kp)| kp == n)
                    .map(|(_, k, _)| k.to_string())
                    .unwrap_or_else(|| n.to_string())
            })
            .collect()
    };
    let a_core: Vec<String> = rename(a_prime);
    let b_core: Vec<String> = rename(b_prime);
    let a_refs: Vec<&str> = a_core.iter().map(|s| s.as_str()).collect();
    let b_refs: Vec<&str> = b_core.iter().map(|s| s.as_str()).collect();
    let rhs = partition_norm(core, &a_refs, &b_refs)? * rhs_mats;
    Ok(verdict(lhs, rhs))
}

/// Aggregate of a randomized inequality sweep.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepReport {
    pub prop: String,
    pub trials: usize,
    pub violations: usize,
    pub max_ratio: f64,
    pub quantiles: Vec<(f64, f64)>,
}

pub fn summarize_sweep(prop: &str, ratios: &[f64], violations: usize) -> SweepReport {
    let mut sorted = ratios.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let q = |p: f64| -> f64 {
        if sorted.is_empty() {
            return 0.0;
        }
        let idx = ((sorted.len() as f64 - 1.0) * p).round() as usize;
        sorted[idx]
    };
    SweepReport {
        prop: prop.to_string(),
        trials: ratios.len(),
        violations,
        max_ratio: sorted.last().copied().unwrap_or(0.0),
        quantiles: vec![(0.5, q(0.5)), (0.9, q(0.9)), (0.99, q(0.99))],
    }
}

/// True if any nonzero entry has two equal values among the listed axes.
pub fn has_pairing_support(h: &LabeledTensor, k_axes: &[&str]) -> bool {
    let strides = h.strides();
    let axis_ids: Vec<usize> = k_axes.iter().map(|n| h.axis_index(n).unwrap()).collect();
    for (flat, v) in h.values().iter().enumerate() {
        if *v == Complex64::ZERO {
            continue;
        }
        let idx = h.unravel(flat, &strides);
        for i in 0..axis_ids.len() {
            for j in i + 1..axis_ids.len() {
                let ki = h.axes[axis_ids[i]].range[idx[axis_ids[i]]];
                let kj = h.axes[axis_ids[j]].range[idx[axis_ids[j]]];
                if ki == kj {
                    return true;
                }
            }
        }
    }
    false
}

/// One trial of the Gaussian contraction bound: draw i.i.d. complex
/// Gaussians `eta`, form `H_{bc} = sum_{k_A} h prod_j eta^{zeta_j}(k_j)`
/// (`zeta = -` conjugates), and return
/// `||H||_{b -> c} / max_{(B,C)} ||h||_{b k_B -> c k_C}`.
pub fn gaussian_contraction_trial(
    h: &LabeledTensor,
    b_axis: &str,
    c_axis: &str,
    k_axes: &[&str],
    zetas: &[bool],
    seed: u64,
) -> Result<f64> {
    if zetas.len() != k_axes.len() {
        return Err(Error::InvalidParameter("one sign per k axis".into()));
    }
    if k_axes.len() >= 2 && has_pairing_support(h, k_axes) {
        return Err(Error::Hypothesis("support has a pairing in k_A".into()));
    }
    let strides = h.strides();
    let bi = h
        .axis_index(b_axis)
        .ok_or_else(|| Error::InvalidParameter(format!("no axis {b_axis}")))?;
    let ci = h
        .axis_index(c_axis)
        .ok_or_else(|| Error::InvalidParameter(format!("no axis {c_axis}")))?;
    let k_ids: Vec<usize> = k_axes
        .iter()
        .map(|n| h.axis_index(n).expect("k axis exists"))
        .collect();
    let nb = h.axes[bi].len();
    let nc = h.axes[ci].len();
    let mut hbc = vec![Complex64::ZERO; nb * nc];
    for (flat, v) in h.values().iter().enumerate() {
        if *v == Complex64::ZERO {
            continue;
        }
        let idx = h.unravel(flat, &strides);
        let mut factor = *v;
        for (j, &ai) in k_ids.iter().enumerate() {
            let point = h.axes[ai].range[idx[ai]];
            let eta = complex_normal(seed, point);
            factor *= if zetas[j] { eta } else { eta.conj() };
        }
        hbc[idx[bi] * nc + idx[ci]] += factor;
    }
    // ||H||_{b -> c}: input b, output c => rows c, cols b
    let mut mat = vec![Complex64::ZERO; nc * nb];
    for ib in 0..nb {
        for ic in 0..nc {
            mat[ic * nb + ib] = hbc[ib * nc + ic];
        }
    }
    let num = linalg::spectral_norm(nc, nb, &mat);

    // denominator: max over the 2^m partitions of the k axes
    let m = k_axes.len();
    let mut denom = 0f64;
    for mask in 0..(1u32 << m) {
        let mut in_axes: Vec<&str> = vec![b_axis];
        let mut out_axes: Vec<&str> = vec![c_axis];
        for (j, name) in k_axes.iter().enumerate() {
            if mask & (1 << j) != 0 {
                in_axes.push(name);
            } else {
                out_axes.push(name);
            }
        }
        denom = denom.max(partition_norm(h, &in_axes, &out_axes)?);
    }
    if denom == 0.0 {
        return Ok(0.0);
    }
    Ok(num / denom)
}

/// Weighted merge bound for a banded factor: with `h1` supported in
/// `|k - k'| <= s` (`s <= L` measured from the data) and `h = h1 h2`,
/// `||(1 + |k - k''|/L)^kappa h||_F <=
///  (1 + s/L)^kappa ||h1||_op ||(1 + |k' - k''|/L)^kappa h2||_F`.
///
/// The `(1 + s/L)^kappa` factor is the sharp constant the triangle
/// inequality gives; with `h1` the identity it degenerates to 1 and the
/// bound is an equality.
pub fn weighted_merge_check(
    h1: &LabeledTensor,
    h2: &LabeledTensor,
    l: f64,
    kappa_eff: f64,
) -> Result<MergeReport> {
    if h1.axes().len() != 2 || h2.axes().len() != 2 {
        return Err(Error::Hypothesis("weighted merge needs matrices".into()));
    }
    let k_axis = &h1.axes()[0];
    let kp_axis = &h1.axes()[1];
    if h2.axes()[0].name != kp_axis.name {
        return Err(Error::Hypothesis("h2 must share the middle axis".into()));
    }
    let kpp_axis = &h2.axes()[1];
    // measure the actual band width of h1
    let mut s_max = 0f64;
    for (i, k) in k_axis.range.iter().enumerate() {
        for (j, kp) in kp_axis.range.iter().enumerate() {
            if h1.values()[i * kp_axis.len() + j] != Complex64::ZERO {
                s_max = s_max.max(dist(*k, *kp));
            }
        }
    }
    if s_max > l {
        return Err(Error::Hypothesis(format!(
            "h1 support width {s_max} exceeds L = {l}"
        )));
    }
    let h = semi_product(h1, h2)?;
    // h axes: (k, k'')
    let mut lhs_sq = 0f64;
    for (i, k) in k_axis.range.iter().enumerate() {
        for (j, kpp) in kpp_axis.range.iter().enumerate() {
            let w = (1.0 + dist(*k, *kpp) / l).powf(kappa_eff);
            lhs_sq += (w * h.values()[i * kpp_axis.len() + j].norm()).powi(2);
        }
    }
    let op = partition_norm(h1, &[kp_axis.name.as_str()], &[k_axis.name.as_str()])?;
    let mut rhs_sq = 0f64;
    for (i, kp) in kp_axis.range.iter().enumerate() {
        for (j, kpp) in kpp_axis.range.iter().enumerate() {
            let w = (1.0 + dist(*kp, *kpp) / l).powf(kappa_eff);
            rhs_sq += (w * h2.values()[i * kpp_axis.len() + j].norm()).powi(2);
        }
    }
    let constant = (1.0 + s_max / l).powf(kappa_eff);
    Ok(verdict(lhs_sq.sqrt(), constant * op * rhs_sq.sqrt()))
}

#[inline]
fn dist(a: Mode, b: Mode) -> f64 {
    (((a[0] - b[0]).pow(2) + (a[1] - b[1]).pow(2) + (a[2] - b[2]).pow(2)) as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn line_axis(name: &str, len: usize) -> Axis {
        Axis::new(name, (0..len as i64).map(|i| [i, 0, 0]).collect())
    }

    fn random_tensor(axes: Vec<Axis>, seed: u64) -> LabeledTensor {
        LabeledTensor::random_gaussian(axes, seed).unwrap()
    }

    #[test]
    fn identity_partition_norm_is_one() {
        let mut t = LabeledTensor::zeros(vec![line_axis("k", 5), line_axis("kp", 5)]).unwrap();
        for i in 0..5 {
            t.values_mut()[i * 5 + i] = Complex64::ONE;
        }
        assert_relative_eq!(partition_norm(&t, &["k"], &["kp"]).unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn rank_one_partition_norm() {
        let a: Vec<Complex64> =
            (0..4).map(|i| Complex64::new(i as f64 + 0.5, -(i as f64))).collect();
        let b: Vec<Complex64> =
            (0..3).map(|i| Complex64::new(1.0, i as f64 * 0.3)).collect();
        let values: Vec<Complex64> =
            a.iter().flat_map(|&x| b.iter().map(move |&y| x * y)).collect();
        let t = LabeledTensor::from_values(
            vec![line_axis("k", 4), line_axis("kp", 3)],
            values,
        )
        .unwrap();
        let na: f64 = a.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
        assert_relative_eq!(
            partition_norm(&t, &["k"], &["kp"]).unwrap(),
            na * nb,
            epsilon = 1e-10
        );
    }

    #[test]
    fn partition_norm_matches_svd_oracle_and_adjoint() {
        let t = random_tensor(
            vec![line_axis("a", 4), line_axis("b", 4), line_axis("c", 4)],
            99,
        );
        let got = partition_norm(&t, &["a"], &["b", "c"]).unwrap();
        let (r, c, data) = t.matricize(&["a"], &["b", "c"]).unwrap();
        let oracle = linalg::spectral_norm_svd(r, c, &data);
        assert_relative_eq!(got, oracle, epsilon = 1e-8, max_relative = 1e-8);
        // adjoint symmetry
        let swapped = partition_norm(&t, &["b", "c"], &["a"]).unwrap();
        assert_relative_eq!(got, swapped, epsilon = 1e-10, max_relative = 1e-10);
        // never exceeds Frobenius
        assert!(got <= t.frobenius() + 1e-12);
    }

    #[test]
    fn semi_product_against_loop_oracle() {
        let h1 = random_tensor(vec![line_axis("a", 3), line_axis("s", 3)], 1);
        let h2 = random_tensor(vec![line_axis("s", 3), line_axis("b", 3)], 2);
        let h = semi_product(&h1, &h2).unwrap();
        assert_eq!(h.axes()[0].name, "a");
        assert_eq!(h.axes()[1].name, "b");
        for ia in 0..3 {
            for ib in 0..3 {
                let mut acc = Complex64::ZERO;
                for is in 0..3 {
                    acc += h1.values()[ia * 3 + is] * h2.values()[is * 3 + ib];
                }
                assert!((h.values()[ia * 3 + ib] - acc).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn semi_product_identity_and_associativity() {
        let h1 = random_tensor(vec![line_axis("a", 3), line_axis("s", 4)], 5);
        let mut id = LabeledTensor::zeros(vec![line_axis("s", 4), line_axis("b", 4)]).unwrap();
        for i in 0..4 {
            id.values_mut()[i * 4 + i] = Complex64::ONE;
        }
        let h = semi_product(&h1, &id).unwrap();
        assert_eq!(h.values(), h1.values());

        let a = random_tensor(vec![line_axis("x", 3), line_axis("s", 3)], 7);
        let b = random_tensor(vec![line_axis("s", 3), line_axis("t", 3)], 8);
        let c = random_tensor(vec![line_axis("t", 3), line_axis("y", 3)], 9);
        let left = semi_product(&semi_product(&a, &b).unwrap(), &c).unwrap();
        let right = semi_product(&a, &semi_product(&b, &c).unwrap()).unwrap();
        let mut worst = 0f64;
        for (x, y) in left.values().iter().zip(right.values()) {
            worst = worst.max((x - y).norm());
        }
        assert!(worst < 1e-12);
    }

    #[test]
    fn merge_pair_random_sweep() {
        let mut violations = 0;
        for seed in 0..500u64 {
            let h1 = random_tensor(
                vec![line_axis("a", 4), line_axis("s", 4), line_axis("t", 3)],
                seed * 2 + 1,
            );
            let h2 = random_tensor(
                vec![line_axis("s", 4), line_axis("t", 3), line_axis("b", 4)],
                seed * 2 + 2,
            );
            let rep = verify_merge_pair(&h1, &h2, &["a"], &["b"]).unwrap();
            if !rep.holds {
                violations += 1;
            }
        }
        assert_eq!(violations, 0);
    }

    #[test]
    fn merge_pair_identity_is_equality() {
        let mut id = LabeledTensor::zeros(vec![line_axis("a", 4), line_axis("s", 4)]).unwrap();
        for i in 0..4 {
            id.values_mut()[i * 4 + i] = Complex64::ONE;
        }
        let mut id2 = LabeledTensor::zeros(vec![line_axis("s", 4), line_axis("b", 4)]).unwrap();
        for i in 0..4 {
            id2.values_mut()[i * 4 + i] = Complex64::ONE;
        }
        // Frobenius-carrying partition: equality for identity factors
        let rep = verify_merge_pair(&id, &id2, &[], &["a", "b"]).unwrap();
        assert!(rep.holds);
        assert_relative_eq!(rep.lhs, rep.rhs, epsilon = 1e-10);
        // operator partition: still an upper bound
        let rep = verify_merge_pair(&id, &id2, &["a"], &["b"]).unwrap();
        assert!(rep.holds);
    }

    #[test]
    fn merge_chain_matches_submultiplicativity() {
        // m = 3 chain of matrices: with factors listed output-to-input the
        // B_j (later-shared -> input) / C_j (earlier-shared -> output)
        // convention reduces the bound to the product of operator norms
        for seed in 0..50u64 {
            let a = random_tensor(vec![line_axis("x", 4), line_axis("s", 4)], 100 + seed);
            let b = random_tensor(vec![line_axis("s", 4), line_axis("t", 4)], 200 + seed);
            let c = random_tensor(vec![line_axis("t", 4), line_axis("y", 4)], 300 + seed);
            let rep = verify_merge_chain(&[&c, &b, &a], &["x"], &["y"]).unwrap();
            assert!(rep.holds, "seed {seed}: {} > {}", rep.lhs, rep.rhs);
            let direct = partition_norm(&a, &["x"], &["s"]).unwrap()
                * partition_norm(&b, &["s"], &["t"]).unwrap()
                * partition_norm(&c, &["t"], &["y"]).unwrap();
            assert_relative_eq!(rep.rhs, direct, max_relative = 1e-9);
            // the reversed listing is a different, still valid bound
            let rev = verify_merge_chain(&[&a, &b, &c], &["x"], &["y"]).unwrap();
            assert!(rev.holds);
        }
        // hypothesis violation: an index in three factors
        let a = random_tensor(vec![line_axis("s", 3), line_axis("x", 3)], 1);
        let b = random_tensor(vec![line_axis("s", 3), line_axis("y", 3)], 2);
        let c = random_tensor(vec![line_axis("s", 3), line_axis("z", 3)], 3);
        assert!(verify_merge_chain(&[&a, &b, &c], &["x"], &["y", "z"]).is_err());
    }

    #[test]
    fn merge_contraction_random_sweep() {
        for seed in 0..100u64 {
            let core = random_tensor(
                vec![line_axis("k1", 3), line_axis("k2", 3), line_axis("k3", 3)],
                1000 + seed,
            );
            let m1 = random_tensor(vec![line_axis("k1", 3), line_axis("kp1", 3)], 2000 + seed);
            let m2 = random_tensor(vec![line_axis("k2", 3), line_axis("kp2", 3)], 3000 + seed);
            let rep = verify_merge_contraction(
                &core,
                &[(&m1, "k1", "kp1"), (&m2, "k2", "kp2")],
                &["kp1", "k3"],
                &["kp2"],
            )
            .unwrap();
            assert!(rep.holds, "seed {seed}: {} > {}", rep.lhs, rep.rhs);
        }
    }

    #[test]
    fn gaussian_contraction_single_axis_reduction() {
        // h = identity in (b, c) x indicator over k: H_bc = delta_bc sum eta,
        // so the ratio is |sum eta| / sqrt(K) ~ |standard complex normal|
        let nb = 4;
        let k_len = 64;
        let mut axes = vec![line_axis("b", nb), line_axis("c", nb)];
        axes.push(Axis::new("k", (0..k_len as i64).map(|i| [i, 7, 0]).collect()));
        let mut h = LabeledTensor::zeros(axes).unwrap();
        for ib in 0..nb {
            for ik in 0..k_len {
                h.values_mut()[(ib * nb + ib) * k_len + ik] = Complex64::ONE;
            }
        }
        let trials: usize = 400;
        let mut ratios = Vec::new();
        for t in 0..trials as u64 {
            ratios.push(
                gaussian_contraction_trial(&h, "b", "c", &["k"], &[true], seeds::derive(9, t))
                    .unwrap(),
            );
        }
        // direct simulation of |sum of K complex normals| / sqrt(K)
        let mut rng = ChaCha8Rng::seed_from_u64(4242);
        let mut direct: Vec<f64> = (0..trials)
            .map(|_| {
                let mut acc = Complex64::ZERO;
                for _ in 0..k_len {
                    acc += Complex64::new(
                        rng.sample::<f64, _>(rand_distr::StandardNormal),
                        rng.sample::<f64, _>(rand_distr::StandardNormal),
                    ) / 2f64.sqrt();
                }
                acc.norm() / (k_len as f64).sqrt()
            })
            .collect();
        let mut rs = ratios.clone();
        rs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        direct.sort_by(|a, b| a.partial_cmp(b).unwrap());
        // medians agree within Monte Carlo tolerance
        let med_r = rs[trials / 2];
        let med_d = direct[trials / 2];
        assert!(
            (med_r - med_d).abs() < 0.15,
            "median ratio {med_r} vs direct {med_d}"
        );
    }

    #[test]
    fn gaussian_contraction_zero_tensor() {
        let h = LabeledTensor::zeros(vec![
            line_axis("b", 3),
            line_axis("c", 3),
            line_axis("k", 5),
        ])
        .unwrap();
        let r = gaussian_contraction_trial(&h, "b", "c", &["k"], &[true], 1).unwrap();
        assert_eq!(r, 0.0);
    }

    #[test]
    fn pairing_support_detection() {
        let ax = |n: &str| Axis::new(n, vec![[0, 0, 0], [1, 0, 0]]);
        let mut h = LabeledTensor::zeros(vec![
            line_axis("b", 2),
            line_axis("c", 2),
            ax("k1"),
            ax("k2"),
        ])
        .unwrap();
        // entry with k1 = k2 = [0,0,0]
        h.values_mut()[0] = Complex64::ONE;
        assert!(has_pairing_support(&h, &["k1", "k2"]));
        assert!(gaussian_contraction_trial(&h, "b", "c", &["k1", "k2"], &[true, false], 1)
            .is_err());
        // move it off the diagonal
        h.values_mut()[0] = Complex64::ZERO;
        h.values_mut()[1] = Complex64::ONE; // k1 = [0,0,0], k2 = [1,0,0]
        assert!(!has_pairing_support(&h, &["k1", "k2"]));
        assert!(gaussian_contraction_trial(&h, "b", "c", &["k1", "k2"], &[true, false], 1)
            .is_ok());
    }

    fn banded_matrix(n: usize, band: i64, seed: u64) -> LabeledTensor {
        let mut h =
            LabeledTensor::zeros(vec![line_axis("k", n), line_axis("kp", n)]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in 0..n {
            for j in 0..n {
                if (i as i64 - j as i64).abs() <= band {
                    h.values_mut()[i * n + j] =
                        Complex64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5);
                }
            }
        }
        h
    }

    #[test]
    fn weighted_merge_identity_equality_and_sweep() {
        // identity h1: equality
        let n = 8;
        let mut id = LabeledTensor::zeros(vec![line_axis("k", n), line_axis("kp", n)]).unwrap();
        for i in 0..n {
            id.values_mut()[i * n + i] = Complex64::ONE;
        }
        let h2 = random_tensor(vec![line_axis("kp", n), line_axis("kpp", n)], 55);
        let rep = weighted_merge_check(&id, &h2, 3.0, 2.0).unwrap();
        assert!(rep.holds);
        assert_relative_eq!(rep.lhs, rep.rhs, max_relative = 1e-10);

        // zero h2: both sides zero
        let z2 = LabeledTensor::zeros(vec![line_axis("kp", n), line_axis("kpp", n)]).unwrap();
        let rep = weighted_merge_check(&id, &z2, 3.0, 2.0).unwrap();
        assert_eq!(rep.lhs, 0.0);
        assert_eq!(rep.rhs, 0.0);
        assert!(rep.holds);

        // random banded sweep
        let mut violations = 0;
        for seed in 0..300u64 {
            let h1 = banded_matrix(12, 2, seed);
            let h2 = random_tensor(
                vec![line_axis("kp", 12), line_axis("kpp", 12)],
                9000 + seed,
            );
            for kappa in [1.0, 2.0, 4.0] {
                let rep = weighted_merge_check(&h1, &h2, 2.0, kappa).unwrap();
                if !rep.holds {
                    violations += 1;
                }
            }
        }
        assert_eq!(violations, 0);
    }
}
