//! Reverse mode over the unrolled layers, the optimizer, the gradient
//! check harness, and the end-to-end training protocols.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::data::OpenWorldDataset;
use crate::error::{Error, Result};
use crate::fusion::{Fusion, FusionKind};
use crate::graph::{self, GraphKind, GraphOperator};
use crate::numerics::{self, Mat, Rng};
use crate::openworld::{self, AccuracyReport, AgentThreshold, Label, LossReport};
use crate::prox::{IstaProblem, ProxKind};
use crate::unroll::{self, ForwardCache, ForwardPass, UnrolledModel};

/// Gradients of one modality's layer stack.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    pub d_f: Mat,
    pub d_w: Mat,
    pub d_u: Mat,
    pub d_theta: Vec<f64>,
}

/// Gradients for every learnable parameter of a model.
#[derive(Debug, Clone, PartialEq)]
pub struct GradSet {
    pub per_modality: Vec<LayerGrads>,
    pub d_fusion: Vec<f64>,
    /// Smallest distance of any shrinkage argument to its threshold.
    pub kink_gap: f64,
}

impl GradSet {
    /// Flattened in [`flatten_params`] order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for g in &self.per_modality {
            out.extend_from_slice(g.d_f.data());
            out.extend_from_slice(g.d_w.data());
            out.extend_from_slice(g.d_u.data());
            out.extend_from_slice(&g.d_theta);
        }
        out.extend_from_slice(&self.d_fusion);
        out
    }

    pub fn is_finite(&self) -> bool {
        self.flatten().iter().all(|v| v.is_finite())
    }
}

/// Every learnable value of `m`: per modality `F`, `W`, `U` (row-major)
/// and the thresholds, then the fusion parameters.
pub fn flatten_params(m: &UnrolledModel) -> Vec<f64> {
    let mut out = Vec::new();
    for p in &m.params {
        out.extend_from_slice(p.f.data());
        out.extend_from_slice(p.w.data());
        out.extend_from_slice(p.u.data());
        out.extend_from_slice(&p.theta);
    }
    out.extend_from_slice(m.fusion.params());
    out
}

/// Inverse of [`flatten_params`].
pub fn unflatten_params(m: &mut UnrolledModel, flat: &[f64]) -> Result<()> {
    let want = flatten_params(m).len();
    if flat.len() != want {
        return Err(Error::invalid(alloc::format!(
            "{} parameter values for a model with {want}",
            flat.len()
        )));
    }
    let mut pos = 0;
    let mut take = |dst: &mut [f64]| {
        dst.copy_from_slice(&flat[pos..pos + dst.len()]);
        pos += dst.len();
    };
    for p in &mut m.params {
        take(p.f.data_mut());
        take(p.w.data_mut());
        take(p.u.data_mut());
        take(&mut p.theta);
    }
    take(m.fusion.params_mut());
    Ok(())
}

/// Human-readable name of each flattened parameter.
pub fn param_names(m: &UnrolledModel) -> Vec<String> {
    let mut out = Vec::new();
    for (mi, p) in m.params.iter().enumerate() {
        for (tag, mat) in [("F", &p.f), ("W", &p.w), ("U", &p.u)] {
            for i in 0..mat.rows() {
                for j in 0..mat.cols() {
                    out.push(alloc::format!("m{mi}.{tag}[{i},{j}]"));
                }
            }
        }
        for t in 0..p.theta.len() {
            out.push(alloc::format!("m{mi}.theta[{t}]"));
        }
    }
    for i in 0..m.fusion.params().len() {
        out.push(alloc::format!("fusion[{i}]"));
    }
    out
}

/// Reverse mode through the fusion and every unrolled layer.
///
/// `upstream` is the gradient of the loss with respect to the fused
/// representation. Soft-threshold passes gradient where `|a| > θ` and gives
/// `∂/∂θ = −sign(a)` there; row-group shrinkage is differentiated through
/// its radial formula and is zero on zeroed rows.
pub fn backward(model: &UnrolledModel, cache: &ForwardCache, upstream: &Mat) -> Result<GradSet> {
    if cache.fingerprint != model.fingerprint() {
        return Err(Error::StaleCache(
            "model parameters changed since the forward pass",
        ));
    }
    if cache.layers.len() != model.modalities() {
        return Err(Error::StaleCache("cache was produced by a different model"));
    }
    let fused = model.fusion.backward(&cache.fusion, upstream)?;
    let mut kink_gap = f64::INFINITY;
    let mut per_modality = Vec::with_capacity(model.modalities());
    for (mi, params) in model.params.iter().enumerate() {
        let layers = &cache.layers[mi];
        if layers.len() != model.t_layers {
            return Err(Error::StaleCache("layer count differs from the cache"));
        }
        let x = &cache.inputs[mi];
        let graph = model.graphs[mi].as_ref();
        let k = params.k();
        let mut d_f = Mat::zeros(k, k);
        let mut d_w = Mat::zeros(k, k);
        let mut d_pre_sum = Mat::zeros(x.rows(), k);
        let mut d_theta = vec![0.0; model.t_layers];
        let mut g = fused.grad_z[mi].clone();
        for t in (0..model.t_layers).rev() {
            let lc = &layers[t];
            let pg = params
                .prox_kind
                .backward(&lc.preactivation, params.theta[t], &g)?;
            kink_gap = kink_gap.min(pg.kink_gap);
            d_theta[t] = pg.grad_theta;
            let da = pg.grad_pre;
            d_f.add_scaled(1.0, &lc.input.t_matmul(&da)?)?;
            if let Some(gz) = &lc.graph_input {
                d_w.add_scaled(-params.alpha, &gz.t_matmul(&da)?)?;
            }
            d_pre_sum.add_scaled(1.0, &da)?;
            if t > 0 {
                let mut next = da.matmul_t(&params.f)?;
                if let (Some(gop), true) = (graph, lc.graph_input.is_some()) {
                    let gt_da = gop.matrix().t_matmul(&da)?;
                    next.add_scaled(-params.alpha, &gt_da.matmul_t(&params.w)?)?;
                }
                g = next;
            }
        }
        per_modality.push(LayerGrads {
            d_f,
            d_w,
            d_u: x.t_matmul(&d_pre_sum)?,
            d_theta,
        });
    }
    let out = GradSet {
        per_modality,
        d_fusion: fused.grad_params,
        kink_gap,
    };
    if !out.is_finite() {
        return Err(Error::NonFinite("backward"));
    }
    Ok(out)
}

/// Loss weights and the unlabeled discard fraction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub discard_frac: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda1: 1.0,
            lambda2: 1.0,
            discard_frac: openworld::DISCARD_FRAC,
        }
    }
}

/// Probabilities from a fused representation: row softmax, except for
/// trusted fusion whose output is already row-stochastic.
pub fn probabilities(model: &UnrolledModel, fused: &Mat) -> Mat {
    if model.fusion.outputs_probabilities() {
        fused.clone()
    } else {
        numerics::row_softmax(fused)
    }
}

/// Loss value, the discrete choices it was built on, and its gradient with
/// respect to the fused representation.
#[derive(Debug, Clone)]
pub struct LossEval {
    pub report: LossReport,
    pub z_hat: Mat,
    pub selection: Vec<bool>,
    pub upstream: Mat,
    pub empty_unknown_selection: bool,
}

/// Evaluates `λ1·L_k + λ2·L_u` on a forward pass. Pseudo-labels and the
/// rank-and-discard selection are recomputed from the current probabilities.
pub fn evaluate_loss(
    model: &UnrolledModel,
    pass: &ForwardPass,
    targets: &[usize],
    labeled: &[bool],
    unlabeled: &[bool],
    cfg: &LossConfig,
) -> Result<LossEval> {
    let z_hat = probabilities(model, &pass.fused);
    let l_k = openworld::known_loss(&z_hat, targets, labeled)?;
    let sel = openworld::rank_and_discard(&z_hat, unlabeled, cfg.discard_frac)?;
    let lu = openworld::unknown_loss(&z_hat, &sel.selected)?;
    let l_total = openworld::total_loss(l_k, lu.value, cfg.lambda1, cfg.lambda2)?;
    let mut g = openworld::known_loss_grad(&z_hat, targets, labeled)?.scale(cfg.lambda1);
    if cfg.lambda2 != 0.0 {
        g.add_scaled(
            cfg.lambda2,
            &openworld::unknown_loss_grad(&z_hat, &sel.selected)?,
        )?;
    }
    let upstream = if model.fusion.outputs_probabilities() {
        g
    } else {
        numerics::row_softmax_backward(&z_hat, &g)?
    };
    Ok(LossEval {
        report: LossReport {
            l_k,
            l_u: lu.value,
            l_total,
            n_labeled: Masks::count(labeled),
            n_unlabeled_used: lu.n_used,
            discarded_low: sel.discarded_low,
            discarded_high: sel.discarded_high,
        },
        z_hat,
        selection: sel.selected,
        upstream,
        empty_unknown_selection: lu.empty && cfg.lambda2 > 0.0,
    })
}

use crate::data::Masks;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Optimizer {
    Adam { beta1: f64, beta2: f64, eps: f64 },
    Sgd,
}

impl Optimizer {
    pub const ADAM: Optimizer = Optimizer::Adam {
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
    };

    pub fn name(&self) -> &'static str {
        match self {
            Optimizer::Adam { .. } => "adam",
            Optimizer::Sgd => "sgd",
        }
    }
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::ADAM
    }
}

/// Optimizer state over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    kind: Optimizer,
    lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    steps: u64,
}

impl OptimizerState {
    pub fn new(kind: Optimizer, lr: f64, n_params: usize) -> Self {
        OptimizerState {
            kind,
            lr,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        assert_eq!(params.len(), grads.len());
        self.steps += 1;
        match self.kind {
            Optimizer::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    *p -= self.lr * g;
                }
            }
            Optimizer::Adam { beta1, beta2, eps } => {
                let t = self.steps as f64;
                let c1 = 1.0 - libm::pow(beta1, t);
                let c2 = 1.0 - libm::pow(beta2, t);
                for i in 0..params.len() {
                    let g = grads[i];
                    self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
                    self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
                    let m_hat = self.m[i] / c1;
                    let v_hat = self.v[i] / c2;
                    let denom = libm::sqrt(v_hat) + eps;
                    if denom > 0.0 {
                        params[i] -= self.lr * m_hat / denom;
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub seed: u64,
    pub optimizer: Optimizer,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            lr: 0.001,
            lambda1: 1.0,
            lambda2: 1.0,
            seed: 0,
            optimizer: Optimizer::ADAM,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be at least 1"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Domain {
                what: "lr",
                value: self.lr,
            });
        }
        if !(self.lambda1 >= 0.0) {
            return Err(Error::Domain {
                what: "lambda1",
                value: self.lambda1,
            });
        }
        if !(self.lambda2 >= 0.0) {
            return Err(Error::Domain {
                what: "lambda2",
                value: self.lambda2,
            });
        }
        Ok(())
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig {
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            discard_frac: openworld::DISCARD_FRAC,
        }
    }
}

/// Architecture choices for a protocol run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelSpec {
    pub layers: usize,
    pub prox_kind: ProxKind,
    /// Graph damping factor in [0, 1).
    pub alpha: f64,
    /// Sparsity weight of the underlying objective; sets the initial θ.
    pub beta: f64,
    pub graph: GraphKind,
    pub knn_k: usize,
    pub fusion: FusionKind,
    pub dictionary: DictionaryInit,
}

/// How protocols seed the dictionary the layers are initialized from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DictionaryInit {
    /// Row-normalized Gaussian rows.
    Random,
    /// Labeled class centroids with the global mean removed, row-normalized.
    #[default]
    ClassMeans,
}

impl DictionaryInit {
    pub fn name(&self) -> &'static str {
        match self {
            DictionaryInit::Random => "random",
            DictionaryInit::ClassMeans => "class-means",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "random" => Some(DictionaryInit::Random),
            "class-means" => Some(DictionaryInit::ClassMeans),
            _ => None,
        }
    }
}

/// Dictionary whose row `c` points from the mean of all samples to the
/// mean of the labeled samples of class `c`. Classes without labeled
/// samples fall back to a random direction.
pub fn class_mean_dictionary(x: &Mat, targets: &[usize], k: usize, rng: &mut Rng) -> Result<Mat> {
    if targets.len() != x.rows() {
        return Err(Error::ShapeMismatch {
            op: "class_mean_dictionary",
            left: x.shape(),
            right: (targets.len(), 1),
        });
    }
    let d = x.cols();
    let n = x.rows().max(1) as f64;
    let mut global = vec![0.0; d];
    for i in 0..x.rows() {
        global
            .iter_mut()
            .zip(x.row(i))
            .for_each(|(g, v)| *g += v / n);
    }
    let mut sums = Mat::zeros(k, d);
    let mut counts = vec![0usize; k];
    for (i, &t) in targets.iter().enumerate() {
        if t < k {
            counts[t] += 1;
            sums.row_mut(t)
                .iter_mut()
                .zip(x.row(i))
                .for_each(|(s, v)| *s += v);
        }
    }
    let fallback = unroll::random_dictionary(k, d, rng);
    let mut out = Mat::zeros(k, d);
    for c in 0..k {
        let row = out.row_mut(c);
        if counts[c] > 0 {
            for j in 0..d {
                row[j] = sums[(c, j)] / counts[c] as f64 - global[j];
            }
        }
        let nrm = numerics::norm2(row);
        if nrm > 1e-12 {
            row.iter_mut().for_each(|v| *v /= nrm);
        } else {
            row.copy_from_slice(fallback.row(c));
        }
    }
    Ok(out)
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            layers: unroll::DEFAULT_LAYERS,
            prox_kind: ProxKind::SoftThreshold,
            alpha: 0.5,
            beta: 0.01,
            graph: GraphKind::Laplacian,
            knn_k: graph::DEFAULT_K,
            fusion: FusionKind::WeightedAverage,
            dictionary: DictionaryInit::ClassMeans,
        }
    }
}

const DICTIONARY_SALT: u64 = 0xd1c7_0000_0000_0001;

/// Builds the propagation operator for modality `m` as `spec` asks,
/// preferring one precomputed on the dataset.
pub fn modality_graph(
    dataset: &OpenWorldDataset,
    m: usize,
    spec: &ModelSpec,
) -> Result<Option<GraphOperator>> {
    if spec.graph == GraphKind::None {
        return Ok(None);
    }
    if let Some(Some(g)) = dataset.graphs.get(m) {
        return Ok(Some(g.clone()));
    }
    let x = &dataset.modalities[m];
    let k = spec.knn_k.min(x.rows().saturating_sub(1));
    let g = match spec.graph {
        GraphKind::Laplacian => graph::knn_laplacian(x, k)?,
        GraphKind::HypergraphLaplacian => graph::hypergraph_laplacian(x, k)?,
        GraphKind::None => unreachable!(),
    };
    Ok(Some(g))
}

/// ISTA-initialized model for `dataset`. Every modality draws its
/// dictionary from a fresh generator with the same seed, so initialization
/// does not depend on modality order.
pub fn build_model(
    dataset: &OpenWorldDataset,
    spec: &ModelSpec,
    seed: u64,
) -> Result<UnrolledModel> {
    let graphs = (0..dataset.modalities.len())
        .map(|m| modality_graph(dataset, m, spec))
        .collect::<Result<Vec<_>>>()?;
    build_model_with_graphs(dataset, spec, seed, graphs)
}

pub fn build_model_with_graphs(
    dataset: &OpenWorldDataset,
    spec: &ModelSpec,
    seed: u64,
    graphs: Vec<Option<GraphOperator>>,
) -> Result<UnrolledModel> {
    if !(0.0..1.0).contains(&spec.alpha) {
        return Err(Error::Domain {
            what: "alpha",
            value: spec.alpha,
        });
    }
    if spec.layers == 0 {
        return Err(Error::invalid("layers must be at least 1"));
    }
    let k = dataset.k();
    let targets = dataset.training_targets();
    let problems = dataset
        .modalities
        .iter()
        .zip(graphs)
        .map(|(x, g)| {
            let mut rng = Rng::new(seed ^ DICTIONARY_SALT);
            let d = match spec.dictionary {
                DictionaryInit::Random => unroll::random_dictionary(k, x.cols(), &mut rng),
                DictionaryInit::ClassMeans => class_mean_dictionary(x, &targets, k, &mut rng)?,
            };
            let alpha = if g.is_some() { spec.alpha } else { 0.0 };
            IstaProblem::new(x.clone(), d, alpha, spec.beta, g, spec.prox_kind)
        })
        .collect::<Result<Vec<_>>>()?;
    unroll::init_multi_from_ista(&problems, spec.layers, spec.fusion, seed)
}

/// One row of the loss trace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub l_k: f64,
    pub l_u: f64,
    pub l_total: f64,
    /// Closed-set accuracy on known-class validation rows (monitoring only).
    pub acc_val: f64,
}

/// Result of a protocol run.
#[derive(Debug, Clone)]
pub struct ProtocolOutcome {
    pub model: UnrolledModel,
    pub agent: AgentThreshold,
    pub trace: Vec<EpochRecord>,
    pub metrics: AccuracyReport,
    pub optimizer_steps: u64,
}

/// Full-batch trainer over a transductive dataset.
pub struct Trainer<'a> {
    dataset: &'a OpenWorldDataset,
    cfg: TrainConfig,
    model: UnrolledModel,
    opt: OptimizerState,
    targets: Vec<usize>,
    trace: Vec<EpochRecord>,
}

impl<'a> Trainer<'a> {
    pub fn new(
        dataset: &'a OpenWorldDataset,
        cfg: TrainConfig,
        model: UnrolledModel,
    ) -> Result<Self> {
        cfg.validate()?;
        if Masks::count(&dataset.masks.labeled_train) == 0 {
            return Err(Error::invalid("the split has no labeled training samples"));
        }
        if model.modalities() != dataset.modalities.len() {
            return Err(Error::invalid(
                "model and dataset disagree on the modality count",
            ));
        }
        let n_params = flatten_params(&model).len();
        Ok(Trainer {
            targets: dataset.training_targets(),
            opt: OptimizerState::new(cfg.optimizer, cfg.lr, n_params),
            dataset,
            cfg,
            model,
            trace: Vec::with_capacity(cfg.epochs),
        })
    }

    pub fn model(&self) -> &UnrolledModel {
        &self.model
    }

    pub fn trace(&self) -> &[EpochRecord] {
        &self.trace
    }

    /// One full-batch epoch: forward, loss, backward, update.
    pub fn step(&mut self) -> Result<EpochRecord> {
        let masks = &self.dataset.masks;
        let pass = unroll::model_forward(&self.model, &self.dataset.modalities)?;
        let eval = evaluate_loss(
            &self.model,
            &pass,
            &self.targets,
            &masks.labeled_train,
            &masks.unlabeled,
            &self.cfg.loss(),
        )?;
        let grads = backward(&self.model, &pass.cache, &eval.upstream)?;
        let mut flat = flatten_params(&self.model);
        self.opt.step(&mut flat, &grads.flatten());
        unflatten_params(&mut self.model, &flat)?;
        for p in &mut self.model.params {
            p.theta.iter_mut().for_each(|t| *t = t.max(0.0));
        }
        let record = EpochRecord {
            epoch: self.trace.len() + 1,
            l_k: eval.report.l_k,
            l_u: eval.report.l_u,
            l_total: eval.report.l_total,
            acc_val: closed_set_accuracy(self.dataset, &eval.z_hat, &masks.validation),
        };
        self.trace.push(record);
        Ok(record)
    }

    /// Runs the remaining epochs, fits the agent and scores the test split.
    pub fn finish(mut self) -> Result<ProtocolOutcome> {
        while self.trace.len() < self.cfg.epochs {
            self.step()?;
        }
        let (agent, metrics) = fit_agent_and_score(&self.model, self.dataset)?;
        Ok(ProtocolOutcome {
            optimizer_steps: self.opt.steps(),
            model: self.model,
            agent,
            trace: self.trace,
            metrics,
        })
    }
}

fn closed_set_accuracy(dataset: &OpenWorldDataset, z_hat: &Mat, mask: &[bool]) -> f64 {
    let mut correct = 0;
    let mut total = 0;
    for i in (0..dataset.n()).filter(|&i| mask[i]) {
        if let Some(y) = dataset.known_index(i) {
            total += 1;
            if z_hat.row_argmax(i) == y {
                correct += 1;
            }
        }
    }
    if total == 0 {
        0.0
    } else {
        correct as f64 / total as f64
    }
}

/// Probabilities of every sample under `model`.
pub fn predict_proba(model: &UnrolledModel, dataset: &OpenWorldDataset) -> Result<Mat> {
    let pass = unroll::model_forward(model, &dataset.modalities)?;
    Ok(probabilities(model, &pass.fused))
}

/// Agent from the validation rows, then open-world accuracy on test rows.
pub fn fit_agent_and_score(
    model: &UnrolledModel,
    dataset: &OpenWorldDataset,
) -> Result<(AgentThreshold, AccuracyReport)> {
    let z_hat = predict_proba(model, dataset)?;
    let agent = openworld::select_agent(&z_hat.select_rows(&dataset.masks.validation))?;
    let metrics = score(dataset, &z_hat, &agent)?;
    Ok((agent, metrics))
}

/// Open-world accuracy of `agent`-thresholded predictions on the test split.
pub fn score(
    dataset: &OpenWorldDataset,
    z_hat: &Mat,
    agent: &AgentThreshold,
) -> Result<AccuracyReport> {
    let test = &dataset.masks.test;
    let z_test = z_hat.select_rows(test);
    let pred: Vec<Label> = openworld::predict(&z_test, agent)
        .into_iter()
        .map(|l| match l {
            Label::Class(c) => Label::Class(dataset.known_classes[c]),
            Label::Unknown => Label::Unknown,
        })
        .collect();
    let truth: Vec<usize> = (0..dataset.n())
        .filter(|&i| test[i])
        .map(|i| dataset.labels[i])
        .collect();
    openworld::open_world_accuracy(&pred, &truth, &dataset.known_classes)
}

/// Trains a single-modality model (graph-regularized unrolled layers,
/// open-world loss, agent rejection).
pub fn run_protocol1(
    dataset: &OpenWorldDataset,
    cfg: &TrainConfig,
    spec: &ModelSpec,
) -> Result<ProtocolOutcome> {
    if dataset.modalities.len() != 1 {
        return Err(Error::invalid(alloc::format!(
            "protocol 1 takes one modality, got {}",
            dataset.modalities.len()
        )));
    }
    let model = build_model(dataset, spec, cfg.seed)?;
    Trainer::new(dataset, *cfg, model)?.finish()
}

/// Trains per-modality layer stacks joined by a learnable fusion.
pub fn run_protocol2(
    dataset: &OpenWorldDataset,
    cfg: &TrainConfig,
    spec: &ModelSpec,
) -> Result<ProtocolOutcome> {
    if dataset.modalities.len() < 2 {
        return Err(Error::invalid("protocol 2 needs at least two modalities"));
    }
    let n = dataset.n();
    if let Some((m, x)) = dataset
        .modalities
        .iter()
        .enumerate()
        .find(|(_, x)| x.rows() != n)
    {
        return Err(Error::invalid(alloc::format!(
            "modality {m} has {} samples, expected {n}",
            x.rows()
        )));
    }
    let model = build_model(dataset, spec, cfg.seed)?;
    Trainer::new(dataset, *cfg, model)?.finish()
}

/// Inputs and masks a loss is evaluated on.
#[derive(Debug, Clone)]
pub struct CheckData {
    pub xs: Vec<Mat>,
    pub targets: Vec<usize>,
    pub labeled: Vec<bool>,
    pub unlabeled: Vec<bool>,
}

impl CheckData {
    pub fn from_dataset(ds: &OpenWorldDataset) -> Self {
        CheckData {
            xs: ds.modalities.clone(),
            targets: ds.training_targets(),
            labeled: ds.masks.labeled_train.clone(),
            unlabeled: ds.masks.unlabeled.clone(),
        }
    }
}

/// Mean entropy of the selected unlabeled rows before and after one
/// optimizer step on `λ2·L_u` alone.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EntropyStep {
    pub before: f64,
    pub after: f64,
    pub n_selected: usize,
}

/// Takes one step on the unknown-class loss only and measures how the
/// entropy of the rows it selected moved.
pub fn unknown_loss_step(
    model: &UnrolledModel,
    data: &CheckData,
    lambda2: f64,
    optimizer: Optimizer,
    lr: f64,
) -> Result<(UnrolledModel, EntropyStep)> {
    let xs = &data.xs;
    let loss = LossConfig {
        lambda1: 0.0,
        lambda2,
        discard_frac: openworld::DISCARD_FRAC,
    };
    let pass = unroll::model_forward(model, xs)?;
    let eval = evaluate_loss(
        model,
        &pass,
        &data.targets,
        &data.labeled,
        &data.unlabeled,
        &loss,
    )?;
    let grads = backward(model, &pass.cache, &eval.upstream)?;
    let mut stepped = model.clone();
    let mut flat = flatten_params(&stepped);
    OptimizerState::new(optimizer, lr, flat.len()).step(&mut flat, &grads.flatten());
    unflatten_params(&mut stepped, &flat)?;
    for p in &mut stepped.params {
        p.theta.iter_mut().for_each(|t| *t = t.max(0.0));
    }
    let after_pass = unroll::model_forward(&stepped, xs)?;
    let z_after = probabilities(&stepped, &after_pass.fused);
    let step = EntropyStep {
        before: openworld::mean_entropy(&eval.z_hat, &eval.selection),
        after: openworld::mean_entropy(&z_after, &eval.selection),
        n_selected: Masks::count(&eval.selection),
    };
    Ok((stepped, step))
}

/// Per-parameter outcome of [`grad_check`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
    /// The ±ε probes changed an active set, pseudo-label or selection.
    pub near_kink: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub max_rel_err: f64,
    pub n_checked: usize,
    pub n_excluded: usize,
    pub tol: f64,
    pub passed: bool,
}

/// Magnitude below which errors are measured absolutely.
pub const GRAD_FLOOR: f64 = 1e-5;

/// Compares [`backward`] with central finite differences on every learnable
/// parameter. Relative error is `|fd − an| / max(|fd|, |an|, GRAD_FLOOR)`.
/// Parameters whose ±ε probes change a prox active set, a pseudo-label or
/// the rank-and-discard selection straddle a kink and are excluded.
pub fn grad_check(
    model: &UnrolledModel,
    data: &CheckData,
    loss: &LossConfig,
    eps: f64,
    tol: f64,
) -> Result<GradCheckReport> {
    if data.xs.first().map_or(0, |x| x.rows()) > 64 {
        return Err(Error::invalid("grad_check is meant for at most 64 samples"));
    }
    let pass = unroll::model_forward(model, &data.xs)?;
    let eval = evaluate_loss(
        model,
        &pass,
        &data.targets,
        &data.labeled,
        &data.unlabeled,
        loss,
    )?;
    let grads = backward(model, &pass.cache, &eval.upstream)?.flatten();
    let base_pattern = pattern(model, &pass, &eval);
    let names = param_names(model);
    let flat = flatten_params(model);
    let mut probe = model.clone();
    let mut eval_at = |values: &[f64]| -> Result<(f64, Vec<u8>)> {
        unflatten_params(&mut probe, values)?;
        let pass = unroll::model_forward(&probe, &data.xs)?;
        let e = evaluate_loss(
            &probe,
            &pass,
            &data.targets,
            &data.labeled,
            &data.unlabeled,
            loss,
        )?;
        Ok((e.report.l_total, pattern(&probe, &pass, &e)))
    };
    let mut params = Vec::with_capacity(flat.len());
    let mut values = flat.clone();
    for i in 0..flat.len() {
        // thresholds cannot go negative: one-sided difference there
        let lower = if names[i].contains(".theta[") && flat[i] < eps {
            flat[i]
        } else {
            flat[i] - eps
        };
        values[i] = lower + 2.0 * eps;
        let (lp, pp) = eval_at(&values)?;
        values[i] = lower;
        let (lm, pm) = eval_at(&values)?;
        values[i] = flat[i];
        let numeric = (lp - lm) / (2.0 * eps);
        let analytic = grads[i];
        let rel_err =
            (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(GRAD_FLOOR);
        params.push(ParamCheck {
            name: names[i].clone(),
            analytic,
            numeric,
            rel_err,
            near_kink: pp != base_pattern || pm != base_pattern,
        });
    }
    let checked: Vec<&ParamCheck> = params.iter().filter(|p| !p.near_kink).collect();
    let max_rel_err = checked.iter().map(|p| p.rel_err).fold(0.0, f64::max);
    let n_checked = checked.len();
    Ok(GradCheckReport {
        n_excluded: params.len() - n_checked,
        passed: max_rel_err < tol,
        params,
        max_rel_err,
        n_checked,
        tol,
    })
}

// Discrete state of a forward pass: prox active sets, pseudo-labels, selection.
fn pattern(model: &UnrolledModel, pass: &ForwardPass, eval: &LossEval) -> Vec<u8> {
    let mut out = Vec::new();
    for (mi, layers) in pass.cache.layers.iter().enumerate() {
        let p = &model.params[mi];
        for (t, lc) in layers.iter().enumerate() {
            let theta = p.theta[t];
            let a = &lc.preactivation;
            match p.prox_kind {
                ProxKind::SoftThreshold => {
                    out.extend(a.data().iter().map(|v| (v.abs() > theta) as u8))
                }
                ProxKind::RowGroupThreshold => {
                    out.extend((0..a.rows()).map(|i| (numerics::norm2(a.row(i)) > theta) as u8))
                }
                ProxKind::Identity => {}
            }
        }
    }
    for i in 0..eval.z_hat.rows() {
        out.push(eval.z_hat.row_argmax(i) as u8);
    }
    out.extend(eval.selection.iter().map(|&s| s as u8));
    out
}

/// Small seeded problem for gradient checks: 16 samples, K = 3 known
/// classes plus unknowns, `m` modalities of width 5.
pub fn synthetic_check_problem(
    prox_kind: ProxKind,
    with_graph: bool,
    fusion: FusionKind,
    m: usize,
    seed: u64,
) -> Result<(UnrolledModel, CheckData)> {
    let mut rng = Rng::new(seed);
    let n = 16;
    let k = 3;
    let d = 5;
    let xs: Vec<Mat> = (0..m).map(|_| Mat::randn(n, d, &mut rng)).collect();
    let labels: Vec<usize> = (0..n).map(|i| i % (k + 1)).collect();
    let labeled: Vec<bool> = (0..n).map(|i| i < 8 && labels[i] < k).collect();
    let unlabeled: Vec<bool> = labeled.iter().map(|&l| !l).collect();
    let targets: Vec<usize> = (0..n)
        .map(|i| if labeled[i] { labels[i] } else { usize::MAX })
        .collect();
    let problems = xs
        .iter()
        .map(|x| {
            let g = if with_graph {
                Some(graph::knn_laplacian(x, 4)?)
            } else {
                None
            };
            let dict = unroll::random_dictionary(k, d, &mut rng).scale(2.0);
            IstaProblem::new(
                x.clone(),
                dict,
                if with_graph { 0.6 } else { 0.0 },
                0.05,
                g,
                prox_kind,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let mut model = unroll::init_multi_from_ista(&problems, 3, fusion, seed)?;
    // move away from the symmetric initialization so every parameter matters
    for p in &mut model.params {
        for mat in [&mut p.f, &mut p.w, &mut p.u] {
            let noise = Mat::randn(mat.rows(), mat.cols(), &mut rng).scale(0.3);
            mat.add_scaled(1.0, &noise)?;
        }
    }
    match &mut model.fusion {
        Fusion::AutoWeight(l) => l.iter_mut().for_each(|v| *v = rng.normal() * 0.5),
        Fusion::Attention(q) => q.iter_mut().for_each(|v| *v = rng.normal() * 0.5),
        Fusion::WeightedAverage(w) if w.len() > 1 => {
            let raw: Vec<f64> = (0..w.len()).map(|_| 0.5 + rng.uniform()).collect();
            let s: f64 = raw.iter().sum();
            w.iter_mut().zip(raw).for_each(|(v, r)| *v = r / s);
        }
        _ => {}
    }
    Ok((
        model,
        CheckData {
            xs,
            targets,
            labeled,
            unlabeled,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::unroll::LayerParams;

    #[test]
    fn linear_layer_gradient_matches_matrix_calculus() {
        let mut rng = Rng::new(1);
        let x = Mat::randn(5, 4, &mut rng);
        let params = LayerParams {
            f: Mat::randn(3, 3, &mut rng),
            w: Mat::zeros(3, 3),
            u: Mat::randn(4, 3, &mut rng),
            theta: vec![0.0],
            alpha: 0.0,
            prox_kind: ProxKind::SoftThreshold,
        };
        let model = UnrolledModel::new(
            1,
            vec![params],
            vec![None],
            Fusion::WeightedAverage(vec![1.0]),
            0,
        )
        .unwrap();
        let pass = unroll::model_forward(&model, core::slice::from_ref(&x)).unwrap();
        let up = Mat::randn(5, 3, &mut rng);
        let g = backward(&model, &pass.cache, &up).unwrap();
        // θ = 0 soft threshold is the identity away from exact zeros
        let want = x.t_matmul(&up).unwrap();
        assert!(g.per_modality[0].d_u.sub(&want).unwrap().max_abs() < 1e-12);
        // Z^(0) = 0, so F and W receive nothing from a single layer
        assert_eq!(g.per_modality[0].d_f, Mat::zeros(3, 3));
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let (model, data) =
            synthetic_check_problem(ProxKind::SoftThreshold, true, FusionKind::Attention, 2, 3)
                .unwrap();
        let pass = unroll::model_forward(&model, &data.xs).unwrap();
        let g = backward(&model, &pass.cache, &Mat::zeros(16, 3)).unwrap();
        assert!(g.flatten().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn stale_cache_detected() {
        let (mut model, data) = synthetic_check_problem(
            ProxKind::SoftThreshold,
            false,
            FusionKind::WeightedAverage,
            1,
            4,
        )
        .unwrap();
        let pass = unroll::model_forward(&model, &data.xs).unwrap();
        model.params[0].theta[0] += 0.1;
        assert!(matches!(
            backward(&model, &pass.cache, &Mat::zeros(16, 3)),
            Err(Error::StaleCache(_))
        ));
    }

    #[test]
    fn flatten_round_trip() {
        let (mut model, _) = synthetic_check_problem(
            ProxKind::RowGroupThreshold,
            true,
            FusionKind::AutoWeight,
            2,
            5,
        )
        .unwrap();
        let flat = flatten_params(&model);
        assert_eq!(flat.len(), param_names(&model).len());
        let shifted: Vec<f64> = flat.iter().map(|v| v + 1.0).collect();
        unflatten_params(&mut model, &shifted).unwrap();
        assert_eq!(flatten_params(&model), shifted);
        assert!(unflatten_params(&mut model, &flat[1..]).is_err());
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut opt = OptimizerState::new(Optimizer::ADAM, 0.01, 2);
        let mut p = vec![1.0, -1.0];
        opt.step(&mut p, &[0.5, -2.0]);
        assert!((p[0] - 0.99).abs() < 1e-9 && (p[1] + 0.99).abs() < 1e-9);
    }

    #[test]
    fn linear_model_grad_check_is_tight() {
        let (mut model, data) =
            synthetic_check_problem(ProxKind::Identity, true, FusionKind::WeightedAverage, 1, 6)
                .unwrap();
        model.params[0].theta.iter_mut().for_each(|t| *t = 0.0);
        let loss = LossConfig {
            lambda1: 1.0,
            lambda2: 0.0,
            discard_frac: 0.1,
        };
        let r = grad_check(&model, &data, &loss, 1e-6, 1e-7).unwrap();
        assert_eq!(r.n_excluded, 0);
        assert!(r.passed, "max rel err {}", r.max_rel_err);
    }

    #[test]
    fn theta_at_exact_kink_is_excluded() {
        let (mut model, data) = synthetic_check_problem(
            ProxKind::SoftThreshold,
            false,
            FusionKind::WeightedAverage,
            1,
            7,
        )
        .unwrap();
        // put layer 0's threshold exactly on a pre-activation magnitude
        let pass = unroll::model_forward(&model, &data.xs).unwrap();
        let a = pass.cache.layers[0][0].preactivation.data()[0].abs();
        model.params[0].theta[0] = a;
        let r = grad_check(&model, &data, &LossConfig::default(), 1e-6, 1e-4).unwrap();
        let theta0 = r.params.iter().find(|p| p.name == "m0.theta[0]").unwrap();
        assert!(theta0.near_kink);
        assert!(r.n_excluded >= 1);
    }

    #[test]
    fn single_epoch_is_one_step() {
        use crate::data::{make_blobs, BlobSpec, OpenWorldDataset};
        let spec = BlobSpec {
            n_per_class: 30,
            k_known: 2,
            k_unknown: 1,
            d_feat: 6,
            ..BlobSpec::default()
        };
        let raw = make_blobs(&spec, &mut Rng::new(1)).unwrap();
        let ds =
            OpenWorldDataset::from_raw(raw, crate::data::DEFAULT_RATIOS, 0.2, &mut Rng::new(2))
                .unwrap();
        let cfg = TrainConfig {
            epochs: 1,
            ..TrainConfig::default()
        };
        let out = run_protocol1(&ds, &cfg, &ModelSpec::default()).unwrap();
        assert_eq!(out.optimizer_steps, 1);
        assert_eq!(out.trace.len(), 1);
    }
}
