//! Generalized fusion of per-modality representations into one co-latent
//! representation, with exact reverse mode.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::numerics::{self, Mat};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionKind {
    WeightedAverage,
    AutoWeight,
    Attention,
    Trusted,
}

impl FusionKind {
    pub const ALL: [FusionKind; 4] = [
        FusionKind::WeightedAverage,
        FusionKind::AutoWeight,
        FusionKind::Attention,
        FusionKind::Trusted,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FusionKind::WeightedAverage => "weighted-average",
            FusionKind::AutoWeight => "auto-weight",
            FusionKind::Attention => "attention",
            FusionKind::Trusted => "trusted",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        FusionKind::ALL.into_iter().find(|k| k.name() == name)
    }
}

/// A fusion rule together with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum Fusion {
    /// Fixed non-negative weights summing to one.
    WeightedAverage(Vec<f64>),
    /// Learnable per-modality logits; weights are their softmax.
    AutoWeight(Vec<f64>),
    /// Learnable K-vector scoring each modality's row; per-row softmax.
    Attention(Vec<f64>),
    /// Evidential combination of Dirichlet opinions by Dempster's rule.
    /// Outputs row-stochastic expected class probabilities.
    Trusted,
}

impl Fusion {
    /// Default parameters for `m` modalities with `k` columns. Learnable
    /// parameters start at zero, which weights every modality equally.
    pub fn init(kind: FusionKind, m: usize, k: usize) -> Self {
        match kind {
            FusionKind::WeightedAverage => Fusion::WeightedAverage(vec![1.0 / m as f64; m]),
            FusionKind::AutoWeight => Fusion::AutoWeight(vec![0.0; m]),
            FusionKind::Attention => Fusion::Attention(vec![0.0; k]),
            FusionKind::Trusted => Fusion::Trusted,
        }
    }

    pub fn kind(&self) -> FusionKind {
        match self {
            Fusion::WeightedAverage(_) => FusionKind::WeightedAverage,
            Fusion::AutoWeight(_) => FusionKind::AutoWeight,
            Fusion::Attention(_) => FusionKind::Attention,
            Fusion::Trusted => FusionKind::Trusted,
        }
    }

    /// Learnable parameters (empty for fixed rules).
    pub fn params(&self) -> &[f64] {
        match self {
            Fusion::AutoWeight(p) | Fusion::Attention(p) => p,
            Fusion::WeightedAverage(_) | Fusion::Trusted => &[],
        }
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        match self {
            Fusion::AutoWeight(p) | Fusion::Attention(p) => p,
            Fusion::WeightedAverage(_) | Fusion::Trusted => &mut [],
        }
    }

    /// Whether the output is already a probability matrix.
    pub fn outputs_probabilities(&self) -> bool {
        matches!(self, Fusion::Trusted)
    }

    /// Per-modality weights for the global rules; `None` for per-row rules.
    pub fn modality_weights(&self) -> Option<Vec<f64>> {
        match self {
            Fusion::WeightedAverage(w) => Some(w.clone()),
            Fusion::AutoWeight(l) => {
                let mut w = l.clone();
                numerics::softmax_in_place(&mut w);
                Some(w)
            }
            _ => None,
        }
    }

    fn fingerprint(&self) -> u64 {
        // FNV-1a over the kind tag and parameter bits
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut mix = |x: u64| {
            h ^= x;
            h = h.wrapping_mul(0x0100_0000_01b3);
        };
        mix(self.kind() as u64);
        let params = match self {
            Fusion::WeightedAverage(w) => &w[..],
            other => other.params(),
        };
        for p in params {
            mix(p.to_bits());
        }
        h
    }

    /// Fuses `zs` (all N×K, nonempty). Returns the fused matrix and the cache
    /// needed by [`Fusion::backward`].
    pub fn fuse(&self, zs: &[Mat]) -> Result<(Mat, FusionCache)> {
        let first = zs
            .first()
            .ok_or_else(|| Error::invalid("fusion of an empty modality list"))?;
        let shape = first.shape();
        if let Some(bad) = zs.iter().find(|z| z.shape() != shape) {
            return Err(Error::ShapeMismatch {
                op: "fuse",
                left: shape,
                right: bad.shape(),
            });
        }
        let m = zs.len();
        let (n, k) = shape;
        let mut cache = FusionCache {
            fingerprint: self.fingerprint(),
            m,
            shape,
            inputs: zs.to_vec(),
            weights: Vec::new(),
            row_weights: None,
            trusted: None,
        };
        let out = match self {
            Fusion::WeightedAverage(w) => {
                if w.len() != m {
                    return Err(Error::invalid(alloc::format!(
                        "{} fusion weights for {m} modalities",
                        w.len()
                    )));
                }
                if w.iter().any(|&v| !(v >= 0.0)) || (w.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
                    return Err(Error::invalid(
                        "weighted-average weights must be non-negative and sum to 1",
                    ));
                }
                cache.weights = w.clone();
                weighted_sum(zs, w)
            }
            Fusion::AutoWeight(logits) => {
                if logits.len() != m {
                    return Err(Error::invalid(alloc::format!(
                        "{} fusion logits for {m} modalities",
                        logits.len()
                    )));
                }
                let mut w = logits.clone();
                numerics::softmax_in_place(&mut w);
                let out = weighted_sum(zs, &w);
                cache.weights = w;
                out
            }
            Fusion::Attention(q) => {
                if q.len() != k {
                    return Err(Error::invalid(alloc::format!(
                        "attention score vector has length {}, expected {k}",
                        q.len()
                    )));
                }
                let mut beta = Mat::zeros(n, m);
                let mut out = Mat::zeros(n, k);
                for i in 0..n {
                    let br = beta.row_mut(i);
                    for (b, z) in br.iter_mut().zip(zs) {
                        *b = numerics::dot(z.row(i), q);
                    }
                    numerics::softmax_in_place(br);
                    let br = beta.row(i).to_vec();
                    let orow = out.row_mut(i);
                    for (b, z) in br.iter().zip(zs) {
                        for (o, &v) in orow.iter_mut().zip(z.row(i)) {
                            *o += b * v;
                        }
                    }
                }
                cache.row_weights = Some(beta);
                out
            }
            Fusion::Trusted => {
                let state = TrustedState::forward(zs);
                let out = state.probabilities();
                cache.trusted = Some(state);
                out
            }
        };
        Ok((out, cache))
    }

    /// Reverse mode of [`Fusion::fuse`].
    pub fn backward(&self, cache: &FusionCache, upstream: &Mat) -> Result<FusionGrad> {
        if cache.fingerprint != self.fingerprint() {
            return Err(Error::StaleCache(
                "fusion parameters changed since the forward pass",
            ));
        }
        if upstream.shape() != cache.shape {
            return Err(Error::ShapeMismatch {
                op: "fuse backward",
                left: upstream.shape(),
                right: cache.shape,
            });
        }
        let zs = &cache.inputs;
        let (n, k) = cache.shape;
        match self {
            Fusion::WeightedAverage(_) => Ok(FusionGrad {
                grad_z: cache.weights.iter().map(|&w| upstream.scale(w)).collect(),
                grad_params: Vec::new(),
            }),
            Fusion::AutoWeight(_) => {
                let w = &cache.weights;
                let dw: Vec<f64> = zs
                    .iter()
                    .map(|z| z.inner(upstream))
                    .collect::<Result<_>>()?;
                let mean: f64 = w.iter().zip(&dw).map(|(a, b)| a * b).sum();
                Ok(FusionGrad {
                    grad_z: w.iter().map(|&wm| upstream.scale(wm)).collect(),
                    grad_params: w.iter().zip(&dw).map(|(wm, d)| wm * (d - mean)).collect(),
                })
            }
            Fusion::Attention(q) => {
                let beta = cache
                    .row_weights
                    .as_ref()
                    .ok_or(Error::StaleCache("attention cache missing row weights"))?;
                let mut grad_z: Vec<Mat> = (0..cache.m).map(|_| Mat::zeros(n, k)).collect();
                let mut dq = vec![0.0; k];
                let mut dbeta = vec![0.0; cache.m];
                for i in 0..n {
                    let g = upstream.row(i);
                    for (db, z) in dbeta.iter_mut().zip(zs) {
                        *db = numerics::dot(z.row(i), g);
                    }
                    let br = beta.row(i);
                    let mean: f64 = br.iter().zip(&dbeta).map(|(a, b)| a * b).sum();
                    for m in 0..cache.m {
                        let ds = br[m] * (dbeta[m] - mean);
                        let zr = zs[m].row(i);
                        for (j, gz) in grad_z[m].row_mut(i).iter_mut().enumerate() {
                            *gz = br[m] * g[j] + ds * q[j];
                            dq[j] += ds * zr[j];
                        }
                    }
                }
                Ok(FusionGrad {
                    grad_z,
                    grad_params: dq,
                })
            }
            Fusion::Trusted => {
                let state = cache
                    .trusted
                    .as_ref()
                    .ok_or(Error::StaleCache("trusted cache missing opinions"))?;
                Ok(FusionGrad {
                    grad_z: state.backward(zs, upstream),
                    grad_params: Vec::new(),
                })
            }
        }
    }
}

fn weighted_sum(zs: &[Mat], w: &[f64]) -> Mat {
    let mut out = Mat::zeros(zs[0].rows(), zs[0].cols());
    for (z, &wm) in zs.iter().zip(w) {
        // shapes were checked by the caller
        out.add_scaled(wm, z).expect("equal shapes");
    }
    out
}

/// Saved forward state of a fusion call.
#[derive(Debug, Clone)]
pub struct FusionCache {
    fingerprint: u64,
    m: usize,
    shape: (usize, usize),
    inputs: Vec<Mat>,
    weights: Vec<f64>,
    row_weights: Option<Mat>,
    trusted: Option<TrustedState>,
}

impl FusionCache {
    /// Per-sample modality weights of attention fusion (N×M).
    pub fn row_weights(&self) -> Option<&Mat> {
        self.row_weights.as_ref()
    }

    /// Combined uncertainty mass per row for trusted fusion.
    pub fn uncertainty(&self) -> Option<&[f64]> {
        self.trusted
            .as_ref()
            .map(|t| t.combined_u.last().map_or(&[][..], |u| &u[..]))
    }
}

#[derive(Debug, Clone)]
pub struct FusionGrad {
    pub grad_z: Vec<Mat>,
    pub grad_params: Vec<f64>,
}

/// Opinions per modality and the running Dempster combination.
#[derive(Debug, Clone)]
struct TrustedState {
    k: usize,
    // per modality: evidence strength S per row, belief masses, uncertainty
    strength: Vec<Vec<f64>>,
    belief: Vec<Mat>,
    uncert: Vec<Vec<f64>>,
    // combined_*[j] is the fold over modalities 0..=j
    combined_b: Vec<Mat>,
    combined_u: Vec<Vec<f64>>,
}

impl TrustedState {
    fn forward(zs: &[Mat]) -> Self {
        let (n, k) = zs[0].shape();
        let kf = k as f64;
        let mut strength = Vec::with_capacity(zs.len());
        let mut belief = Vec::with_capacity(zs.len());
        let mut uncert: Vec<Vec<f64>> = Vec::with_capacity(zs.len());
        for z in zs {
            let e = z.map(numerics::softplus);
            let s: Vec<f64> = (0..n).map(|i| e.row(i).iter().sum::<f64>() + kf).collect();
            let b = Mat::from_fn(n, k, |i, j| e[(i, j)] / s[i]);
            uncert.push(s.iter().map(|&si| kf / si).collect());
            strength.push(s);
            belief.push(b);
        }
        let mut combined_b = vec![belief[0].clone()];
        let mut combined_u = vec![uncert[0].clone()];
        for m in 1..zs.len() {
            let prev_b = &combined_b[m - 1];
            let prev_u = &combined_u[m - 1];
            let mut nb = Mat::zeros(n, k);
            let mut nu = vec![0.0; n];
            for i in 0..n {
                nu[i] = combine_row(
                    prev_b.row(i),
                    prev_u[i],
                    belief[m].row(i),
                    uncert[m][i],
                    nb.row_mut(i),
                );
            }
            combined_b.push(nb);
            combined_u.push(nu);
        }
        TrustedState {
            k,
            strength,
            belief,
            uncert,
            combined_b,
            combined_u,
        }
    }

    /// Expected class probabilities `b + u/K` of the combined opinion.
    fn probabilities(&self) -> Mat {
        let b = self.combined_b.last().expect("at least one modality");
        let u = self.combined_u.last().expect("at least one modality");
        let kf = self.k as f64;
        Mat::from_fn(b.rows(), b.cols(), |i, j| b[(i, j)] + u[i] / kf)
    }

    #[allow(clippy::needless_range_loop)]
    fn backward(&self, zs: &[Mat], upstream: &Mat) -> Vec<Mat> {
        let m_count = zs.len();
        let (n, k) = upstream.shape();
        let kf = k as f64;
        let mut grad_b: Vec<Mat> = (0..m_count).map(|_| Mat::zeros(n, k)).collect();
        let mut grad_u: Vec<Vec<f64>> = (0..m_count).map(|_| vec![0.0; n]).collect();
        for i in 0..n {
            let mut gb: Vec<f64> = upstream.row(i).to_vec();
            let mut gu = gb.iter().sum::<f64>() / kf;
            for m in (1..m_count).rev() {
                let (b1, u1) = (self.combined_b[m - 1].row(i), self.combined_u[m - 1][i]);
                let (b2, u2) = (self.belief[m].row(i), self.uncert[m][i]);
                let (nb, nu) = (self.combined_b[m].row(i), self.combined_u[m][i]);
                let sb1: f64 = b1.iter().sum();
                let sb2: f64 = b2.iter().sum();
                let dot = numerics::dot(b1, b2);
                let denom = 1.0 - (sb1 * sb2 - dot);
                // d/d(denom) of every output, then conflict C = 1 − denom
                let g_denom = -(numerics::dot(&gb, nb) + gu * nu) / denom;
                let g_conflict = -g_denom;
                let mut gb1 = vec![0.0; k];
                let gb2 = grad_b[m].row_mut(i);
                for j in 0..k {
                    gb1[j] = gb[j] * (b2[j] + u2) / denom + g_conflict * (sb2 - b2[j]);
                    gb2[j] = gb[j] * (b1[j] + u1) / denom + g_conflict * (sb1 - b1[j]);
                }
                let gu1 = numerics::dot(&gb, b2) / denom + gu * u2 / denom;
                grad_u[m][i] = numerics::dot(&gb, b1) / denom + gu * u1 / denom;
                gb = gb1;
                gu = gu1;
            }
            grad_b[0].row_mut(i).copy_from_slice(&gb);
            grad_u[0][i] = gu;
        }
        zs.iter()
            .enumerate()
            .map(|(m, z)| {
                let mut gz = Mat::zeros(n, k);
                for i in 0..n {
                    let s = self.strength[m][i];
                    let b = self.belief[m].row(i);
                    let gbr = grad_b[m].row(i);
                    // b_j = e_j/S, u = K/S, S = Σe + K
                    let g_s = -(numerics::dot(gbr, b) + grad_u[m][i] * self.uncert[m][i]) / s;
                    for (j, g) in gz.row_mut(i).iter_mut().enumerate() {
                        *g = (gbr[j] / s + g_s) * numerics::sigmoid(z[(i, j)]);
                    }
                }
                gz
            })
            .collect()
    }
}

/// Reduced Dempster combination of two opinions; writes the combined belief
/// into `out` and returns the combined uncertainty.
fn combine_row(b1: &[f64], u1: f64, b2: &[f64], u2: f64, out: &mut [f64]) -> f64 {
    let sb1: f64 = b1.iter().sum();
    let sb2: f64 = b2.iter().sum();
    let conflict = sb1 * sb2 - numerics::dot(b1, b2);
    let denom = 1.0 - conflict;
    for j in 0..out.len() {
        out[j] = (b1[j] * b2[j] + b1[j] * u2 + b2[j] * u1) / denom;
    }
    u1 * u2 / denom
}

/// Convenience wrapper around [`Fusion::fuse`].
pub fn fuse(fusion: &Fusion, zs: &[Mat]) -> Result<(Mat, FusionCache)> {
    fusion.fuse(zs)
}

/// Convenience wrapper around [`Fusion::backward`].
pub fn fuse_backward(fusion: &Fusion, cache: &FusionCache, upstream: &Mat) -> Result<FusionGrad> {
    fusion.backward(cache, upstream)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    fn loss_weights(n: usize, k: usize, rng: &mut Rng) -> Mat {
        Mat::randn(n, k, rng)
    }

    // scalar loss = <C, fuse(zs)>
    fn probe(f: &Fusion, zs: &[Mat], c: &Mat) -> f64 {
        f.fuse(zs).unwrap().0.inner(c).unwrap()
    }

    fn fd_check(f: &Fusion, zs: &[Mat], c: &Mat, tol: f64) {
        let (_, cache) = f.fuse(zs).unwrap();
        let grad = f.backward(&cache, c).unwrap();
        let eps = 1e-6;
        for m in 0..zs.len() {
            for idx in 0..zs[m].data().len() {
                let mut plus = zs.to_vec();
                plus[m].data_mut()[idx] += eps;
                let mut minus = zs.to_vec();
                minus[m].data_mut()[idx] -= eps;
                let fd = (probe(f, &plus, c) - probe(f, &minus, c)) / (2.0 * eps);
                let an = grad.grad_z[m].data()[idx];
                let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
                assert!(rel < tol, "{:?} z[{m}][{idx}]: fd={fd} an={an}", f.kind());
            }
        }
        for p in 0..f.params().len() {
            let mut fp = f.clone();
            fp.params_mut()[p] += eps;
            let mut fm = f.clone();
            fm.params_mut()[p] -= eps;
            let fd = (probe(&fp, zs, c) - probe(&fm, zs, c)) / (2.0 * eps);
            let an = grad.grad_params[p];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
            assert!(rel < tol, "{:?} param {p}: fd={fd} an={an}", f.kind());
        }
    }

    #[test]
    fn single_modality_reductions() {
        let mut rng = Rng::new(2);
        let z = Mat::randn(5, 3, &mut rng);
        for kind in [
            FusionKind::WeightedAverage,
            FusionKind::AutoWeight,
            FusionKind::Attention,
        ] {
            let (out, _) = Fusion::init(kind, 1, 3)
                .fuse(core::slice::from_ref(&z))
                .unwrap();
            assert!(out.sub(&z).unwrap().max_abs() < 1e-15, "{kind:?}");
        }
        let (p, _) = Fusion::Trusted.fuse(core::slice::from_ref(&z)).unwrap();
        // Dirichlet mean (e + 1)/S
        for i in 0..5 {
            let e: Vec<f64> = z.row(i).iter().map(|&v| numerics::softplus(v)).collect();
            let s: f64 = e.iter().sum::<f64>() + 3.0;
            for j in 0..3 {
                assert!((p[(i, j)] - (e[j] + 1.0) / s).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn identical_pair_weighted_average() {
        let mut rng = Rng::new(4);
        let z = Mat::randn(4, 3, &mut rng);
        let f = Fusion::WeightedAverage(vec![0.5, 0.5]);
        let (out, _) = f.fuse(&[z.clone(), z.clone()]).unwrap();
        assert_eq!(out, z);
    }

    #[test]
    fn trusted_vacuous_evidence_is_uniform() {
        let z = Mat::from_fn(3, 4, |_, _| -60.0);
        let f = Fusion::Trusted;
        let (out, cache) = f.fuse(&[z.clone(), z]).unwrap();
        for i in 0..3 {
            for j in 0..4 {
                assert!((out[(i, j)] - 0.25).abs() < 1e-12);
            }
        }
        for &u in cache.uncertainty().unwrap() {
            assert!((u - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn trusted_two_opinion_hand_example() {
        // K=2. Modality 1 evidence (e1, 0), modality 2 vacuous.
        // With a vacuous partner the combination returns the first opinion.
        let big = 3.0;
        let z1 = Mat::from_rows(&[[libm::log(libm::exp(big) - 1.0), -80.0]]).unwrap();
        let z2 = Mat::from_rows(&[[-80.0, -80.0]]).unwrap();
        let (p, _) = Fusion::Trusted.fuse(&[z1, z2]).unwrap();
        // e = (3, 0), S = 5, b = (0.6, 0), u = 0.4 → p = (0.8, 0.2)
        assert!((p[(0, 0)] - 0.8).abs() < 1e-12);
        assert!((p[(0, 1)] - 0.2).abs() < 1e-12);
    }

    #[test]
    fn mismatched_inputs_rejected() {
        let f = Fusion::WeightedAverage(vec![1.0]);
        assert!(f.fuse(&[]).is_err());
        let g = Fusion::init(FusionKind::AutoWeight, 2, 2);
        assert!(g.fuse(&[Mat::zeros(2, 2), Mat::zeros(3, 2)]).is_err());
        let bad = Fusion::WeightedAverage(vec![0.7, 0.7]);
        assert!(bad.fuse(&[Mat::zeros(2, 2), Mat::zeros(2, 2)]).is_err());
    }

    #[test]
    fn weighted_average_backward_is_linear() {
        let mut rng = Rng::new(6);
        let zs = [Mat::randn(3, 2, &mut rng), Mat::randn(3, 2, &mut rng)];
        let f = Fusion::WeightedAverage(vec![0.25, 0.75]);
        let (_, cache) = f.fuse(&zs).unwrap();
        let up = Mat::randn(3, 2, &mut rng);
        let g = f.backward(&cache, &up).unwrap();
        assert_eq!(g.grad_z[0], up.scale(0.25));
        assert_eq!(g.grad_z[1], up.scale(0.75));
    }

    #[test]
    fn autoweight_finite_differences() {
        let mut rng = Rng::new(10);
        let zs: Vec<Mat> = (0..3).map(|_| Mat::randn(4, 3, &mut rng)).collect();
        let f = Fusion::AutoWeight(vec![0.3, -0.2, 0.5]);
        let c = loss_weights(4, 3, &mut rng);
        fd_check(&f, &zs, &c, 1e-5);
    }

    #[test]
    fn attention_finite_differences() {
        let mut rng = Rng::new(12);
        let zs: Vec<Mat> = (0..3).map(|_| Mat::randn(4, 3, &mut rng)).collect();
        let f = Fusion::Attention(vec![0.4, -0.7, 0.2]);
        let c = loss_weights(4, 3, &mut rng);
        fd_check(&f, &zs, &c, 1e-4);
    }

    #[test]
    fn trusted_finite_differences() {
        let mut rng = Rng::new(14);
        let zs: Vec<Mat> = (0..3).map(|_| Mat::randn(4, 3, &mut rng)).collect();
        let c = loss_weights(4, 3, &mut rng);
        fd_check(&Fusion::Trusted, &zs, &c, 1e-5);
    }

    #[test]
    fn stale_cache_is_rejected() {
        let zs = [Mat::zeros(2, 2), Mat::zeros(2, 2)];
        let f = Fusion::AutoWeight(vec![0.0, 0.0]);
        let (_, cache) = f.fuse(&zs).unwrap();
        let g = Fusion::AutoWeight(vec![1.0, 0.0]);
        assert!(matches!(
            g.backward(&cache, &Mat::zeros(2, 2)),
            Err(Error::StaleCache(_))
        ));
        let t = Fusion::Trusted;
        assert!(t.backward(&cache, &Mat::zeros(2, 2)).is_err());
    }
}
