//! Unrolled proximal layers `Z ← P_θ(ZF − α·G(L)·Z·W + XU)`.
//!
//! With `F = I − DDᵀ/L`, `W = I/L`, `U = Dᵀ/L` and `θ = β/L` one layer is
//! exactly one ISTA step on the graph-regularized sparse coding objective.
//! `F`, `W`, `U` are shared across layers; `θ` has one entry per layer.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::fusion::{Fusion, FusionCache, FusionKind};
use crate::graph::GraphOperator;
use crate::numerics::{self, Mat, Rng};
use crate::prox::{self, IstaProblem, ProxKind};

/// Default unrolled depth.
pub const DEFAULT_LAYERS: usize = 3;

/// Learnable parameters of one modality's layer stack.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    /// K×K
    pub f: Mat,
    /// K×K
    pub w: Mat,
    /// D_feat×K
    pub u: Mat,
    /// One threshold per layer.
    pub theta: Vec<f64>,
    /// Graph damping factor in [0, 1).
    pub alpha: f64,
    pub prox_kind: ProxKind,
}

impl LayerParams {
    pub fn k(&self) -> usize {
        self.f.rows()
    }

    pub fn d_feat(&self) -> usize {
        self.u.rows()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.f.rows();
        if self.f.shape() != (k, k) {
            return Err(Error::ShapeMismatch {
                op: "LayerParams F",
                left: self.f.shape(),
                right: (k, k),
            });
        }
        if self.w.shape() != (k, k) {
            return Err(Error::ShapeMismatch {
                op: "LayerParams W",
                left: self.w.shape(),
                right: (k, k),
            });
        }
        if self.u.cols() != k {
            return Err(Error::ShapeMismatch {
                op: "LayerParams U",
                left: self.u.shape(),
                right: (self.u.rows(), k),
            });
        }
        if let Some(&t) = self.theta.iter().find(|&&t| !(t >= 0.0)) {
            return Err(Error::Domain {
                what: "layer threshold",
                value: t,
            });
        }
        if !(0.0..1.0).contains(&self.alpha) {
            return Err(Error::Domain {
                what: "alpha",
                value: self.alpha,
            });
        }
        Ok(())
    }

    /// Upper bound `‖F‖₂ + α·‖G‖₂·‖W‖₂` on the layer map's Lipschitz constant.
    pub fn triangle_bound(&self, graph_norm: f64) -> Result<f64> {
        let f = numerics::spectral_norm(&self.f, 2000, 1e-14)?;
        let w = numerics::spectral_norm(&self.w, 2000, 1e-14)?;
        Ok(f + self.alpha * graph_norm * w)
    }

    /// Applies the linear part `Z ↦ ZF − α·GZW`.
    pub fn linear_part(&self, z: &Mat, graph: Option<&GraphOperator>) -> Result<Mat> {
        let mut a = z.matmul(&self.f)?;
        if let Some(g) = graph.filter(|_| self.alpha != 0.0) {
            let gzw = g.matrix().matmul(z)?.matmul(&self.w)?;
            a.add_scaled(-self.alpha, &gzw)?;
        }
        Ok(a)
    }

    fn linear_part_adjoint(&self, y: &Mat, graph: Option<&GraphOperator>) -> Result<Mat> {
        let mut a = y.matmul_t(&self.f)?;
        if let Some(g) = graph.filter(|_| self.alpha != 0.0) {
            let gy = g.matrix().t_matmul(y)?;
            a.add_scaled(-self.alpha, &gy.matmul_t(&self.w)?)?;
        }
        Ok(a)
    }

    /// Operator norm of the linear part acting on N×K matrices, by power
    /// iteration on `LᵀL`.
    pub fn linear_part_norm(&self, n: usize, graph: Option<&GraphOperator>) -> Result<f64> {
        let k = self.k();
        let mut rng = Rng::new(0x11ea_0a11);
        let mut v = Mat::randn(n, k, &mut rng);
        let nv = v.frobenius_norm();
        v = v.scale(1.0 / nv);
        let mut est = 0.0;
        for _ in 0..5000 {
            let lv = self.linear_part(&v, graph)?;
            let w = self.linear_part_adjoint(&lv, graph)?;
            let next = v.inner(&w)?;
            let nw = w.frobenius_norm();
            if nw == 0.0 {
                return Ok(0.0);
            }
            v = w.scale(1.0 / nw);
            let done = (next - est).abs() <= 1e-15 * next.abs();
            est = next;
            if done {
                break;
            }
        }
        Ok(libm::sqrt(est.max(0.0)))
    }

    /// Scales `F` and `W` so the linear part has operator norm `target`.
    pub fn rescale_linear_part(
        &mut self,
        n: usize,
        graph: Option<&GraphOperator>,
        target: f64,
    ) -> Result<f64> {
        let norm = self.linear_part_norm(n, graph)?;
        if norm > 0.0 {
            let s = target / norm;
            self.f = self.f.scale(s);
            self.w = self.w.scale(s);
        }
        Ok(norm)
    }
}

/// A stack of unrolled layers per modality plus the fusion that joins them.
#[derive(Debug, Clone)]
pub struct UnrolledModel {
    pub t_layers: usize,
    pub params: Vec<LayerParams>,
    pub graphs: Vec<Option<GraphOperator>>,
    pub fusion: Fusion,
    pub seed: u64,
}

impl UnrolledModel {
    pub fn new(
        t_layers: usize,
        params: Vec<LayerParams>,
        graphs: Vec<Option<GraphOperator>>,
        fusion: Fusion,
        seed: u64,
    ) -> Result<Self> {
        let model = UnrolledModel {
            t_layers,
            params,
            graphs,
            fusion,
            seed,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        if self.t_layers == 0 {
            return Err(Error::invalid("an unrolled model needs at least one layer"));
        }
        if self.params.is_empty() {
            return Err(Error::invalid(
                "an unrolled model needs at least one modality",
            ));
        }
        if self.graphs.len() != self.params.len() {
            return Err(Error::invalid(alloc::format!(
                "{} graphs for {} modalities",
                self.graphs.len(),
                self.params.len()
            )));
        }
        let k = self.params[0].k();
        for p in &self.params {
            p.validate()?;
            if p.k() != k {
                return Err(Error::invalid(
                    "modalities disagree on the representation width K",
                ));
            }
            if p.theta.len() != self.t_layers {
                return Err(Error::invalid(alloc::format!(
                    "{} thresholds for {} layers",
                    p.theta.len(),
                    self.t_layers
                )));
            }
        }
        Ok(())
    }

    pub fn modalities(&self) -> usize {
        self.params.len()
    }

    pub fn k(&self) -> usize {
        self.params[0].k()
    }

    /// Hash over every learnable value; changes whenever a parameter does.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut mix = |x: u64| {
            h ^= x;
            h = h.wrapping_mul(0x0100_0000_01b3);
        };
        for p in &self.params {
            for m in [&p.f, &p.w, &p.u] {
                m.data().iter().for_each(|v| mix(v.to_bits()));
            }
            p.theta.iter().for_each(|v| mix(v.to_bits()));
            mix(p.alpha.to_bits());
        }
        self.fusion.params().iter().for_each(|v| mix(v.to_bits()));
        if let Some(w) = self.fusion.modality_weights() {
            w.iter().for_each(|v| mix(v.to_bits()));
        }
        h
    }
}

/// Random K×D_feat dictionary with i.i.d. standard normal entries and unit rows.
pub fn random_dictionary(k: usize, d_feat: usize, rng: &mut Rng) -> Mat {
    let mut d = Mat::randn(k, d_feat, rng);
    for i in 0..k {
        let row = d.row_mut(i);
        let n = numerics::norm2(row);
        if n > 0.0 {
            row.iter_mut().for_each(|v| *v /= n);
        }
    }
    d
}

/// Layer parameters that reproduce ISTA on `p`.
pub fn ista_layer_params(p: &IstaProblem, t_layers: usize) -> Result<LayerParams> {
    let l = prox::ista_lipschitz(p)?;
    let k = p.k();
    let ddt = p.d.matmul_t(&p.d)?;
    let mut f = Mat::identity(k);
    f.add_scaled(-1.0 / l, &ddt)?;
    // fold α ≥ 1 into W so the stored damping stays in [0, 1)
    let (alpha, w_scale) = if p.graph.is_none() || p.alpha == 0.0 {
        (0.0, 1.0 / l)
    } else if p.alpha < 1.0 {
        (p.alpha, 1.0 / l)
    } else {
        (0.5, p.alpha / (0.5 * l))
    };
    Ok(LayerParams {
        f,
        w: Mat::identity(k).scale(w_scale),
        u: p.d.transpose().scale(1.0 / l),
        theta: vec![p.beta / l; t_layers],
        alpha,
        prox_kind: p.prox_kind,
    })
}

/// Single-modality model whose forward pass equals `t_layers` ISTA steps.
pub fn init_from_ista(p: &IstaProblem, t_layers: usize, seed: u64) -> Result<UnrolledModel> {
    if t_layers == 0 {
        return Err(Error::invalid("t_layers must be at least 1"));
    }
    let params = ista_layer_params(p, t_layers)?;
    UnrolledModel::new(
        t_layers,
        vec![params],
        vec![p.graph.clone()],
        Fusion::init(FusionKind::WeightedAverage, 1, p.k()),
        seed,
    )
}

/// Multi-modality version of [`init_from_ista`], one problem per modality.
pub fn init_multi_from_ista(
    problems: &[IstaProblem],
    t_layers: usize,
    fusion: FusionKind,
    seed: u64,
) -> Result<UnrolledModel> {
    let first = problems
        .first()
        .ok_or_else(|| Error::invalid("no modalities"))?;
    let params = problems
        .iter()
        .map(|p| ista_layer_params(p, t_layers))
        .collect::<Result<Vec<_>>>()?;
    UnrolledModel::new(
        t_layers,
        params,
        problems.iter().map(|p| p.graph.clone()).collect(),
        Fusion::init(fusion, problems.len(), first.k()),
        seed,
    )
}

fn check_layer_inputs(
    params: &LayerParams,
    z: &Mat,
    x: &Mat,
    graph: Option<&GraphOperator>,
) -> Result<()> {
    if z.cols() != params.k() || z.rows() != x.rows() {
        return Err(Error::ShapeMismatch {
            op: "layer input Z",
            left: z.shape(),
            right: (x.rows(), params.k()),
        });
    }
    if x.cols() != params.d_feat() {
        return Err(Error::ShapeMismatch {
            op: "layer input X",
            left: x.shape(),
            right: (x.rows(), params.d_feat()),
        });
    }
    match graph {
        Some(g) if g.n() != x.rows() => Err(Error::ShapeMismatch {
            op: "layer graph",
            left: g.matrix().shape(),
            right: (x.rows(), x.rows()),
        }),
        None if params.alpha > 0.0 => Err(Error::invalid("alpha > 0 but the layer has no graph")),
        _ => Ok(()),
    }
}

/// Pre-activation `ZF − α·GZW + XU` of one layer.
pub fn layer_preactivation(
    params: &LayerParams,
    z: &Mat,
    x: &Mat,
    graph: Option<&GraphOperator>,
) -> Result<Mat> {
    check_layer_inputs(params, z, x, graph)?;
    let mut a = params.linear_part(z, graph)?;
    a.add_scaled(1.0, &x.matmul(&params.u)?)?;
    Ok(a)
}

/// One unrolled layer: `P_θ(ZF − α·G(L)ZW + XU)` with the threshold of
/// layer `layer_index`.
pub fn layer_forward(
    params: &LayerParams,
    layer_index: usize,
    z: &Mat,
    x: &Mat,
    graph: Option<&GraphOperator>,
) -> Result<Mat> {
    let theta = *params
        .theta
        .get(layer_index)
        .ok_or_else(|| Error::invalid(alloc::format!("no threshold for layer {layer_index}")))?;
    let a = layer_preactivation(params, z, x, graph)?;
    params.prox_kind.apply(&a, theta)
}

/// Saved state of one layer application.
#[derive(Debug, Clone)]
pub struct LayerCache {
    /// Layer input `Z^(t)`.
    pub input: Mat,
    /// `G·Z^(t)` when the layer has a graph term.
    pub graph_input: Option<Mat>,
    pub preactivation: Mat,
}

/// Everything reverse mode needs from a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub(crate) fingerprint: u64,
    pub(crate) inputs: Vec<Mat>,
    pub layers: Vec<Vec<LayerCache>>,
    pub fusion: FusionCache,
}

#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub fused: Mat,
    pub per_modality: Vec<Mat>,
    pub cache: ForwardCache,
}

/// Runs every modality's layer stack from `Z = 0` and fuses the final
/// representations.
pub fn model_forward(m: &UnrolledModel, xs: &[Mat]) -> Result<ForwardPass> {
    if xs.len() != m.modalities() {
        return Err(Error::invalid(alloc::format!(
            "model has {} modalities, got {} inputs",
            m.modalities(),
            xs.len()
        )));
    }
    let n = xs[0].rows();
    if xs.iter().any(|x| x.rows() != n) {
        return Err(Error::invalid("modalities disagree on the sample count"));
    }
    let k = m.k();
    let mut per_modality = Vec::with_capacity(xs.len());
    let mut layers = Vec::with_capacity(xs.len());
    for ((params, graph), x) in m.params.iter().zip(&m.graphs).zip(xs) {
        let graph = graph.as_ref();
        let mut z = Mat::zeros(n, k);
        check_layer_inputs(params, &z, x, graph)?;
        let xu = x.matmul(&params.u)?;
        let mut caches = Vec::with_capacity(m.t_layers);
        for t in 0..m.t_layers {
            let mut a = z.matmul(&params.f)?;
            let graph_input = match graph.filter(|_| params.alpha != 0.0) {
                Some(g) => {
                    let gz = g.matrix().matmul(&z)?;
                    a.add_scaled(-params.alpha, &gz.matmul(&params.w)?)?;
                    Some(gz)
                }
                None => None,
            };
            a.add_scaled(1.0, &xu)?;
            let next = params.prox_kind.apply(&a, params.theta[t])?;
            caches.push(LayerCache {
                input: z,
                graph_input,
                preactivation: a,
            });
            z = next;
        }
        per_modality.push(z);
        layers.push(caches);
    }
    let (fused, fusion_cache) = m.fusion.fuse(&per_modality)?;
    if !fused.is_finite() {
        return Err(Error::NonFinite("model_forward"));
    }
    Ok(ForwardPass {
        fused,
        per_modality,
        cache: ForwardCache {
            fingerprint: m.fingerprint(),
            inputs: xs.to_vec(),
            layers,
            fusion: fusion_cache,
        },
    })
}

/// Outcome of [`verify_contraction`].
#[derive(Debug, Clone, PartialEq)]
pub struct ContractionReport {
    pub modality: usize,
    pub trials: usize,
    /// Largest `‖φ(Z)−φ(Z')‖_F / ‖Z−Z'‖_F` over random pairs.
    pub max_ratio: f64,
    /// Operator norm of the linear part `Z ↦ ZF − α·GZW`.
    pub linear_norm: f64,
    /// `‖F‖₂ + α·‖G‖₂·‖W‖₂`.
    pub triangle_bound: f64,
    /// `max_ratio ≤ linear_norm + 1e-9`.
    pub ratio_within_bound: bool,
    /// Largest ratio of successive fixed-point differences.
    pub decay_rate: f64,
    /// Iterations until `‖ΔZ‖_F < 1e-10`, if reached.
    pub iterations_to_fixed_point: Option<usize>,
    /// Geometric-series iteration bound implied by `linear_norm`.
    pub iteration_bound: Option<usize>,
    pub passed: bool,
}

/// Relative size below which successive differences are not used for the
/// decay estimate.
pub const DECAY_FLOOR: f64 = 1e-7;

/// Fixed-point tolerance used by [`verify_contraction`].
pub const FIXED_POINT_TOL: f64 = 1e-10;

/// Empirical audit of the contraction property of one modality's layer map
/// `φ(Z) = P_θ(ZF − α·GZW + XU)`, using the last layer's threshold.
pub fn verify_contraction(
    m: &UnrolledModel,
    modality: usize,
    x: &Mat,
    trials: usize,
    rng: &mut Rng,
) -> Result<ContractionReport> {
    if trials == 0 {
        return Err(Error::invalid(
            "verify_contraction needs at least one trial",
        ));
    }
    let params = m
        .params
        .get(modality)
        .ok_or_else(|| Error::invalid(alloc::format!("no modality {modality}")))?;
    let graph = m.graphs[modality].as_ref();
    let theta = params.theta[m.t_layers - 1];
    let (n, k) = (x.rows(), params.k());
    let phi = |z: &Mat| -> Result<Mat> {
        let a = layer_preactivation(params, z, x, graph)?;
        params.prox_kind.apply(&a, theta)
    };

    let mut max_ratio: f64 = 0.0;
    for _ in 0..trials {
        let scale = rng.uniform_range(0.1, 3.0);
        let z1 = Mat::randn(n, k, rng).scale(scale);
        let z2 = Mat::randn(n, k, rng).scale(scale);
        let den = z1.sub(&z2)?.frobenius_norm();
        if den == 0.0 {
            continue;
        }
        let num = phi(&z1)?.sub(&phi(&z2)?)?.frobenius_norm();
        max_ratio = max_ratio.max(num / den);
    }
    let linear_norm = params.linear_part_norm(n, graph)?;
    let graph_norm = graph.map_or(0.0, |g| g.spectral_norm());
    let triangle_bound = params.triangle_bound(graph_norm)?;
    let ratio_within_bound = max_ratio <= linear_norm + 1e-9;

    // fixed-point iteration from Z = 0
    let mut z = Mat::zeros(n, k);
    let mut prev_delta: Option<f64> = None;
    let mut first_delta = 0.0;
    let mut decay_rate: f64 = 0.0;
    let mut reached = None;
    let max_iters = 100_000;
    for it in 1..=max_iters {
        let next = phi(&z)?;
        let delta = next.sub(&z)?.frobenius_norm();
        z = next;
        if it == 1 {
            first_delta = delta;
        }
        if let Some(pd) = prev_delta {
            // below this, rounding in φ dominates the difference
            if pd > DECAY_FLOOR * first_delta.max(1.0) {
                decay_rate = decay_rate.max(delta / pd);
            }
        }
        prev_delta = Some(delta);
        if delta < FIXED_POINT_TOL {
            reached = Some(it);
            break;
        }
    }
    let iteration_bound = if linear_norm < 1.0 && linear_norm > 0.0 {
        let need = libm::log(FIXED_POINT_TOL / first_delta.max(1.0)) / libm::log(linear_norm);
        Some(libm::ceil(need.max(0.0)) as usize + 1)
    } else if linear_norm == 0.0 {
        Some(2)
    } else {
        None
    };
    let within_iter_bound = match (reached, iteration_bound) {
        (Some(r), Some(b)) => r <= b,
        _ => false,
    };
    let passed = ratio_within_bound
        && within_iter_bound
        && (linear_norm >= 1.0 || decay_rate <= linear_norm + 1e-6);
    Ok(ContractionReport {
        modality,
        trials,
        max_ratio,
        linear_norm,
        triangle_bound,
        ratio_within_bound,
        decay_rate,
        iterations_to_fixed_point: reached,
        iteration_bound,
        passed,
    })
}
