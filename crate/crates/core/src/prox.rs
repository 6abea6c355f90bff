//! Proximal operators, the Moreau envelope, and the reference ISTA solver
//! that the unrolled layers reproduce.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::graph::GraphOperator;
use crate::numerics::{self, Mat};

/// Which regularizer the proximal step shrinks toward.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ProxKind {
    /// Elementwise shrinkage, the prox of `θ‖Z‖₁`.
    #[default]
    SoftThreshold,
    /// Per-row radial shrinkage, the prox of `θ‖Z‖₂,₁` (sum of row norms).
    RowGroupThreshold,
    Identity,
}

impl ProxKind {
    pub fn name(self) -> &'static str {
        match self {
            ProxKind::SoftThreshold => "soft-threshold",
            ProxKind::RowGroupThreshold => "row-group-threshold",
            ProxKind::Identity => "identity",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "soft-threshold" | "soft" | "l1" => Some(ProxKind::SoftThreshold),
            "row-group-threshold" | "group" | "l21" => Some(ProxKind::RowGroupThreshold),
            "identity" | "none" => Some(ProxKind::Identity),
            _ => None,
        }
    }

    pub fn apply(self, z: &Mat, theta: f64) -> Result<Mat> {
        match self {
            ProxKind::SoftThreshold => soft_threshold(z, theta),
            ProxKind::RowGroupThreshold => row_group_threshold(z, theta),
            ProxKind::Identity => {
                check_theta(theta)?;
                Ok(z.clone())
            }
        }
    }

    /// The regularizer `g(z)` without its weight.
    pub fn penalty(self, z: &Mat) -> f64 {
        match self {
            ProxKind::SoftThreshold => z.data().iter().map(|v| v.abs()).sum(),
            ProxKind::RowGroupThreshold => (0..z.rows()).map(|i| numerics::norm2(z.row(i))).sum(),
            ProxKind::Identity => 0.0,
        }
    }

    /// Reverse mode through `out = apply(pre, theta)`.
    pub fn backward(self, pre: &Mat, theta: f64, grad_out: &Mat) -> Result<ProxGrad> {
        if pre.shape() != grad_out.shape() {
            return Err(Error::ShapeMismatch {
                op: "prox backward",
                left: pre.shape(),
                right: grad_out.shape(),
            });
        }
        let mut grad_pre = Mat::zeros(pre.rows(), pre.cols());
        let mut grad_theta = 0.0;
        let mut kink_gap = f64::INFINITY;
        match self {
            ProxKind::SoftThreshold => {
                for ((gp, &a), &g) in grad_pre
                    .data_mut()
                    .iter_mut()
                    .zip(pre.data())
                    .zip(grad_out.data())
                {
                    kink_gap = kink_gap.min((a.abs() - theta).abs());
                    if a.abs() > theta {
                        *gp = g;
                        grad_theta -= a.signum() * g;
                    }
                }
            }
            ProxKind::RowGroupThreshold => {
                for i in 0..pre.rows() {
                    let a = pre.row(i);
                    let g = grad_out.row(i);
                    let n = numerics::norm2(a);
                    kink_gap = kink_gap.min((n - theta).abs());
                    if n > theta {
                        let ag = numerics::dot(a, g);
                        let shrink = 1.0 - theta / n;
                        let coef = theta * ag / (n * n * n);
                        for ((gp, &av), &gv) in grad_pre.row_mut(i).iter_mut().zip(a).zip(g) {
                            *gp = shrink * gv + coef * av;
                        }
                        grad_theta -= ag / n;
                    }
                }
            }
            ProxKind::Identity => {
                grad_pre = grad_out.clone();
            }
        }
        Ok(ProxGrad {
            grad_pre,
            grad_theta,
            kink_gap,
        })
    }
}

/// Gradients of a prox application.
#[derive(Debug, Clone)]
pub struct ProxGrad {
    pub grad_pre: Mat,
    pub grad_theta: f64,
    /// Smallest distance of any shrinkage argument to the threshold.
    pub kink_gap: f64,
}

fn check_theta(theta: f64) -> Result<()> {
    if !(theta >= 0.0) || !theta.is_finite() {
        return Err(Error::Domain {
            what: "threshold",
            value: theta,
        });
    }
    Ok(())
}

/// Elementwise `sign(z)·max(|z|−θ, 0)`.
pub fn soft_threshold(z: &Mat, theta: f64) -> Result<Mat> {
    check_theta(theta)?;
    Ok(z.map(|v| soft_scalar(v, theta)))
}

#[inline]
pub fn soft_scalar(v: f64, theta: f64) -> f64 {
    if v > theta {
        v - theta
    } else if v < -theta {
        v + theta
    } else {
        0.0
    }
}

/// Scales each row by `(‖row‖−θ)/‖row‖` when `‖row‖ > θ`, zeroes it otherwise.
pub fn row_group_threshold(z: &Mat, theta: f64) -> Result<Mat> {
    check_theta(theta)?;
    let mut out = z.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let n = numerics::norm2(row);
        if n > theta {
            let s = (n - theta) / n;
            row.iter_mut().for_each(|v| *v *= s);
        } else {
            row.iter_mut().for_each(|v| *v = 0.0);
        }
    }
    Ok(out)
}

/// Brute-force prox by grid search over `½(z−x)² + θ·g(z)`.
///
/// Coordinatewise for ℓ1, radial along each row's direction for ℓ2,1.
/// Candidates are `x + i·step` for `|i·step| ≤ radius`. Meant for certifying
/// the closed forms in tests.
pub fn prox_oracle(
    x_point: &Mat,
    theta: f64,
    kind: ProxKind,
    grid_radius: f64,
    grid_step: f64,
) -> Mat {
    assert!(grid_step > 0.0, "grid_step must be positive");
    let steps = libm::ceil(grid_radius / grid_step) as i64;
    let search = |center: f64, nonneg: bool| -> f64 {
        let mut best = center;
        let mut best_val = f64::INFINITY;
        for i in -steps..=steps {
            let t = center + i as f64 * grid_step;
            if nonneg && t < 0.0 {
                continue;
            }
            let val = 0.5 * (t - center) * (t - center) + theta * t.abs();
            if val < best_val {
                best_val = val;
                best = t;
            }
        }
        best
    };
    match kind {
        ProxKind::Identity => x_point.clone(),
        ProxKind::SoftThreshold => x_point.map(|x| search(x, false)),
        ProxKind::RowGroupThreshold => {
            let mut out = x_point.clone();
            for i in 0..out.rows() {
                let row = out.row_mut(i);
                let rho = numerics::norm2(row);
                if rho == 0.0 {
                    continue;
                }
                let t = search(rho, true);
                row.iter_mut().for_each(|v| *v *= t / rho);
            }
            out
        }
    }
}

/// `min_z (1/2μ)‖z−x‖² + θ·g(z)`, evaluated at the closed-form prox point.
pub fn moreau_envelope(x_point: &Mat, mu: f64, theta: f64, kind: ProxKind) -> Result<f64> {
    if !(mu > 0.0) {
        return Err(Error::Domain {
            what: "mu",
            value: mu,
        });
    }
    let p = kind.apply(x_point, mu * theta)?;
    let d = p.sub(x_point)?.frobenius_norm();
    Ok(d * d / (2.0 * mu) + theta * kind.penalty(&p))
}

/// `min_Z ½(‖X − ZD‖² + α·Tr(ZᵀGZ)) + β·g(Z)`.
#[derive(Debug, Clone)]
pub struct IstaProblem {
    /// N×D_feat data.
    pub x: Mat,
    /// K×D_feat dictionary.
    pub d: Mat,
    pub alpha: f64,
    pub beta: f64,
    pub graph: Option<GraphOperator>,
    pub prox_kind: ProxKind,
}

impl IstaProblem {
    pub fn new(
        x: Mat,
        d: Mat,
        alpha: f64,
        beta: f64,
        graph: Option<GraphOperator>,
        prox_kind: ProxKind,
    ) -> Result<Self> {
        if x.cols() != d.cols() {
            return Err(Error::ShapeMismatch {
                op: "IstaProblem",
                left: x.shape(),
                right: d.shape(),
            });
        }
        if let Some(g) = &graph {
            if g.n() != x.rows() {
                return Err(Error::ShapeMismatch {
                    op: "IstaProblem graph",
                    left: x.shape(),
                    right: g.matrix().shape(),
                });
            }
        }
        if !(alpha >= 0.0) {
            return Err(Error::Domain {
                what: "alpha",
                value: alpha,
            });
        }
        if !(beta >= 0.0) {
            return Err(Error::Domain {
                what: "beta",
                value: beta,
            });
        }
        Ok(IstaProblem {
            x,
            d,
            alpha,
            beta,
            graph,
            prox_kind,
        })
    }

    pub fn n(&self) -> usize {
        self.x.rows()
    }

    pub fn k(&self) -> usize {
        self.d.rows()
    }

    fn graph_term(&self, z: &Mat) -> Result<Option<Mat>> {
        match &self.graph {
            Some(g) if self.alpha != 0.0 => Ok(Some(g.matrix().matmul(z)?)),
            _ => Ok(None),
        }
    }

    fn check_z(&self, z: &Mat) -> Result<()> {
        if z.shape() != (self.n(), self.k()) {
            return Err(Error::ShapeMismatch {
                op: "ista iterate",
                left: z.shape(),
                right: (self.n(), self.k()),
            });
        }
        Ok(())
    }

    /// Full objective value at `z`.
    pub fn objective(&self, z: &Mat) -> Result<f64> {
        self.check_z(z)?;
        let r = self.x.sub(&z.matmul(&self.d)?)?;
        let fit = r.frobenius_norm();
        let mut val = 0.5 * fit * fit;
        if let Some(gz) = self.graph_term(z)? {
            val += 0.5 * self.alpha * z.inner(&gz)?;
        }
        Ok(val + self.beta * self.prox_kind.penalty(z))
    }

    /// Gradient of the smooth part: `Z·DDᵀ − XDᵀ + α·GZ`.
    pub fn smooth_gradient(&self, z: &Mat) -> Result<Mat> {
        self.check_z(z)?;
        let ddt = self.d.matmul_t(&self.d)?;
        let mut g = z.matmul(&ddt)?.sub(&self.x.matmul_t(&self.d)?)?;
        if let Some(gz) = self.graph_term(z)? {
            g.add_scaled(self.alpha, &gz)?;
        }
        Ok(g)
    }
}

/// Lipschitz constant of the smooth gradient, `σ_max(DDᵀ) + α·σ_max(G)`.
pub fn ista_lipschitz(p: &IstaProblem) -> Result<f64> {
    if p.d.max_abs() == 0.0 {
        return Err(Error::invalid("dictionary is identically zero"));
    }
    let ddt = p.d.matmul_t(&p.d)?;
    let mut l = numerics::symmetric_spectral_norm(&ddt)?;
    if let Some(g) = &p.graph {
        l += p.alpha * g.spectral_norm();
    }
    Ok(l)
}

/// One proximal-gradient step with step size `1/L` and threshold `β/L`.
pub fn ista_step(p: &IstaProblem, z: &Mat) -> Result<Mat> {
    let l = ista_lipschitz(p)?;
    step_with(p, z, l)
}

fn step_with(p: &IstaProblem, z: &Mat, l: f64) -> Result<Mat> {
    let mut y = z.clone();
    y.add_scaled(-1.0 / l, &p.smooth_gradient(z)?)?;
    p.prox_kind.apply(&y, p.beta / l)
}

/// Result of [`ista_solve`].
#[derive(Debug, Clone)]
pub struct IstaSolution {
    pub z: Mat,
    /// Objective at the cold start followed by one value per step.
    pub trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// Runs ISTA from `Z = 0` until `‖ΔZ‖_F < tol·max(1, ‖Z‖_F)` or the budget
/// runs out.
pub fn ista_solve(p: &IstaProblem, max_iters: usize, tol: f64) -> Result<IstaSolution> {
    if max_iters == 0 {
        return Err(Error::invalid("ista_solve needs max_iters >= 1"));
    }
    let l = ista_lipschitz(p)?;
    let mut z = Mat::zeros(p.n(), p.k());
    let mut trace = Vec::with_capacity(max_iters + 1);
    trace.push(p.objective(&z)?);
    let mut converged = false;
    let mut iterations = 0;
    while iterations < max_iters {
        let next = step_with(p, &z, l)?;
        let delta = next.sub(&z)?.frobenius_norm();
        let scale = z.frobenius_norm().max(1.0);
        z = next;
        iterations += 1;
        trace.push(p.objective(&z)?);
        if delta < tol * scale {
            converged = true;
            break;
        }
    }
    Ok(IstaSolution {
        z,
        trace,
        iterations,
        converged,
    })
}
