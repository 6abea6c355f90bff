//! The verbs behind the `owl` binary. Each returns the stdout report.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use owl_core::data::{make_blobs, BlobSpec, OpenWorldDataset};
use owl_core::fusion::FusionKind;
use owl_core::openworld;
use owl_core::prox::ProxKind;
use owl_core::train::{self, LossConfig, ProtocolOutcome};
use owl_core::unroll;
use owl_core::Rng;

use crate::checkpoint::{Checkpoint, SplitRecord};
use crate::config::{Resolved, Settings};
use crate::error::{Error, Result};
use crate::io;
use crate::manifest::{GraphSource, LoadedManifest, Manifest};
use crate::report::Metrics;

#[derive(Debug, Clone, PartialEq, clap::Args)]
pub struct GenDataArgs {
    /// Output directory
    #[arg(long, default_value = "data")]
    pub out: PathBuf,
    /// Total number of classes, unknown ones included
    #[arg(long, default_value_t = 5)]
    pub classes: usize,
    /// How many of the classes are held out as unknown
    #[arg(long, default_value_t = 1)]
    pub unknown: usize,
    /// Total number of samples (split evenly over the classes)
    #[arg(long, default_value_t = 500)]
    pub n: usize,
    #[arg(long, default_value_t = 1)]
    pub modalities: usize,
    /// Feature width of every modality
    #[arg(long, default_value_t = 16)]
    pub dim: usize,
    /// Distance between class centers in noise standard deviations
    #[arg(long, default_value_t = 8.0)]
    pub sep: f64,
    /// Make the last modality pure noise
    #[arg(long)]
    pub noise_modality: bool,
    /// Neighbors per sample recorded in the manifest
    #[arg(long, default_value_t = owl_core::graph::DEFAULT_K)]
    pub knn_k: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

pub fn gen_data(args: &GenDataArgs) -> Result<String> {
    if args.unknown >= args.classes {
        return Err(Error::config(
            "unknown: must leave at least one known class",
        ));
    }
    if args.modalities == 0 || args.dim == 0 {
        return Err(Error::config("modalities and dim must be at least 1"));
    }
    let n_per_class = args.n / args.classes;
    if n_per_class < 3 {
        return Err(Error::config(format!(
            "n: {} samples over {} classes leaves fewer than 3 per class",
            args.n, args.classes
        )));
    }
    if !(args.sep > 0.0) {
        return Err(Error::config("sep: must be positive"));
    }
    let spec = BlobSpec {
        n_per_class,
        k_known: args.classes - args.unknown,
        k_unknown: args.unknown,
        d_feat: args.dim,
        sep: args.sep,
        m_modalities: args.modalities,
        noise_modality: args.noise_modality,
    };
    let raw = make_blobs(&spec, &mut Rng::new(args.seed))?;
    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    let mut files = Vec::new();
    for (m, x) in raw.modalities.iter().enumerate() {
        let name = PathBuf::from(format!("modality_{m}.csv"));
        io::write_matrix(&args.out.join(&name), x)?;
        files.push(name);
    }
    io::write_labels(&args.out.join("labels.txt"), &raw.labels)?;
    let manifest = Manifest {
        modalities: files,
        labels: "labels.txt".into(),
        known_classes: raw.known_classes.clone(),
        seed: args.seed,
        graph: Some(GraphSource {
            knn_k: Some(args.knn_k),
            edge_list_path: None,
        }),
    };
    let path = args.out.join("manifest.json");
    LoadedManifest::write(&manifest, &path)?;
    Ok(format!(
        "wrote {} samples, {} modalities, {} known + {} unknown classes\nmanifest={}\n",
        raw.n(),
        raw.modalities.len(),
        spec.k_known,
        spec.k_unknown,
        path.display()
    ))
}

#[derive(Debug, Clone, PartialEq, clap::Args)]
pub struct RunArgs {
    /// Experiment manifest (JSON)
    #[arg(long)]
    pub manifest: PathBuf,
    /// TOML file with settings; flags override it
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub settings: Settings,
}

impl RunArgs {
    pub fn load(&self) -> Result<(LoadedManifest, Resolved, OpenWorldDataset)> {
        let manifest = LoadedManifest::read(&self.manifest)?;
        let resolved = Settings::merged(&self.settings, self.config.as_deref())?
            .resolve(manifest.manifest.seed, manifest.knn_k())?;
        let ds = manifest.load(resolved.unknown_in_train)?;
        Ok((manifest, resolved, ds))
    }
}

/// Protocol 1 for one modality, Protocol 2 otherwise.
pub fn run_protocol(ds: &OpenWorldDataset, r: &Resolved) -> Result<ProtocolOutcome> {
    Ok(if ds.modalities.len() == 1 {
        train::run_protocol1(ds, &r.train, &r.model)?
    } else {
        train::run_protocol2(ds, &r.train, &r.model)?
    })
}

#[derive(Debug, Clone, PartialEq, clap::Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Directory for checkpoint.json, trace.csv and metrics.txt
    #[arg(long, default_value = "run")]
    pub out: PathBuf,
    /// Also write metrics.json
    #[arg(long)]
    pub json: bool,
}

pub fn train_cmd(args: &TrainArgs) -> Result<String> {
    let (manifest, r, ds) = args.run.load()?;
    let out = run_protocol(&ds, &r)?;
    let ckpt = Checkpoint::from_model(
        &out.model,
        &ds,
        SplitRecord {
            seed: manifest.manifest.seed,
            unknown_in_train: r.unknown_in_train,
        },
        &r.model,
        Some(&out.agent),
        Some(&r.train),
    );
    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    ckpt.write(&args.out.join("checkpoint.json"))?;
    io::write_trace(&args.out.join("trace.csv"), &out.trace)?;
    let metrics = Metrics::new(&out.metrics, &out.agent, &out.trace);
    let text = metrics.to_text();
    let path = args.out.join("metrics.txt");
    std::fs::write(&path, &text).map_err(|e| Error::io(&path, e))?;
    if args.json {
        metrics.write_json(&args.out.join("metrics.json"))?;
    }
    let protocol = if ds.modalities.len() == 1 { 1 } else { 2 };
    Ok(format!(
        "protocol={protocol}\nfusion={}\n{text}",
        r.model.fusion.name()
    ))
}

#[derive(Debug, Clone, PartialEq, clap::Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Write the key=value report here as well
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Write the report as JSON here
    #[arg(long)]
    pub json: Option<PathBuf>,
}

fn load_checkpointed(
    manifest: &Path,
    checkpoint: &Path,
) -> Result<(Checkpoint, OpenWorldDataset, unroll::UnrolledModel)> {
    let ckpt = Checkpoint::read(checkpoint)?;
    let m = LoadedManifest::read(manifest)?;
    if m.manifest.seed != ckpt.split.seed {
        return Err(Error::config(format!(
            "manifest seed {} differs from the checkpoint's split seed {}",
            m.manifest.seed, ckpt.split.seed
        )));
    }
    let ds = m.load(ckpt.split.unknown_in_train)?;
    let model = ckpt.to_model(&ds)?;
    Ok((ckpt, ds, model))
}

/// Scores the test split with the checkpoint's stored agent (refitting it
/// from validation rows when the checkpoint has none).
pub fn eval_cmd(args: &EvalArgs) -> Result<String> {
    let (ckpt, ds, model) = load_checkpointed(&args.manifest, &args.checkpoint)?;
    let (agent, report) = match ckpt.agent() {
        Some(agent) => {
            let z = train::predict_proba(&model, &ds)?;
            (agent, train::score(&ds, &z, &agent)?)
        }
        None => train::fit_agent_and_score(&model, &ds)?,
    };
    let metrics = Metrics::new(&report, &agent, &[]);
    let text = metrics.to_text();
    if let Some(p) = &args.out {
        std::fs::write(p, &text).map_err(|e| Error::io(p, e))?;
    }
    if let Some(p) = &args.json {
        metrics.write_json(p)?;
    }
    Ok(text)
}

#[derive(Debug, Clone, PartialEq, clap::Args)]
pub struct AgentArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
}

/// Refits the rejection threshold from the validation rows.
pub fn agent_cmd(args: &AgentArgs) -> Result<String> {
    let (ckpt, ds, model) = load_checkpointed(&args.manifest, &args.checkpoint)?;
    let z = train::predict_proba(&model, &ds)?;
    let agent = openworld::select_agent(&z.select_rows(&ds.masks.validation))?;
    let mut out = format!(
        "a={:.6}\na_k={:.6}\na_u={:.6}\nentropy_cutoff={:.6}\nvalidation_rows={}\n",
        agent.a,
        agent.a_k,
        agent.a_u,
        agent.entropy_cutoff,
        owl_core::data::Masks::count(&ds.masks.validation)
    );
    if let Some(stored) = ckpt.agent() {
        let _ = writeln!(out, "matches_checkpoint={}", stored == agent);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, clap::Args)]
pub struct GradCheckArgs {
    /// soft-threshold or row-group-threshold
    #[arg(long, default_value = "soft-threshold")]
    pub prox: String,
    #[arg(long, default_value = "weighted-average")]
    pub fusion: String,
    /// Drop the graph term
    #[arg(long)]
    pub no_graph: bool,
    #[arg(long, default_value_t = 2)]
    pub modalities: usize,
    /// Check every prox × graph × fusion combination
    #[arg(long)]
    pub all: bool,
    #[arg(long, default_value_t = 1e-6)]
    pub eps: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Write per-parameter results as JSON here
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
struct GradCheckRow {
    prox: &'static str,
    graph: bool,
    fusion: &'static str,
    max_rel_err: f64,
    checked: usize,
    excluded: Vec<String>,
    passed: bool,
}

/// Returns the report and whether every configuration passed.
pub fn grad_check_cmd(args: &GradCheckArgs) -> Result<(String, bool)> {
    let prox = ProxKind::from_name(&args.prox)
        .filter(|k| *k != ProxKind::Identity)
        .ok_or_else(|| Error::config(format!("prox: unknown value {:?}", args.prox)))?;
    let fusion = FusionKind::from_name(&args.fusion)
        .ok_or_else(|| Error::config(format!("fusion: unknown value {:?}", args.fusion)))?;
    if args.modalities == 0 {
        return Err(Error::config("modalities: must be at least 1"));
    }
    let configs: Vec<(ProxKind, bool, FusionKind)> = if args.all {
        let mut v = Vec::new();
        for p in [ProxKind::SoftThreshold, ProxKind::RowGroupThreshold] {
            for g in [false, true] {
                for f in FusionKind::ALL {
                    v.push((p, g, f));
                }
            }
        }
        v
    } else {
        vec![(prox, !args.no_graph, fusion)]
    };
    let mut out = String::new();
    let mut rows = Vec::new();
    let mut all_ok = true;
    for (p, g, f) in configs {
        let (model, data) = train::synthetic_check_problem(p, g, f, args.modalities, args.seed)?;
        let r = train::grad_check(&model, &data, &LossConfig::default(), args.eps, args.tol)?;
        all_ok &= r.passed;
        let _ = writeln!(
            out,
            "prox={} graph={} fusion={} max_rel_err={:.3e} checked={} excluded={} {}",
            p.name(),
            if g { "on" } else { "off" },
            f.name(),
            r.max_rel_err,
            r.n_checked,
            r.n_excluded,
            if r.passed { "PASS" } else { "FAIL" }
        );
        for pc in r.params.iter().filter(|pc| pc.near_kink) {
            let _ = writeln!(out, "  near kink: {}", pc.name);
        }
        rows.push(GradCheckRow {
            prox: p.name(),
            graph: g,
            fusion: f.name(),
            max_rel_err: r.max_rel_err,
            checked: r.n_checked,
            excluded: r
                .params
                .iter()
                .filter(|pc| pc.near_kink)
                .map(|pc| pc.name.clone())
                .collect(),
            passed: r.passed,
        });
    }
    if let Some(p) = &args.json {
        let text = serde_json::to_string_pretty(&rows).expect("rows serialize");
        std::fs::write(p, text + "\n").map_err(|e| Error::io(p, e))?;
    }
    Ok((out, all_ok))
}

#[derive(Debug, Clone, PartialEq, clap::Args)]
pub struct ContractionArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Audit a trained checkpoint instead of the ISTA initialization
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub modality: usize,
    #[arg(long, default_value_t = 50)]
    pub trials: usize,
    /// Rescale F and W so the linear part has this spectral norm first
    #[arg(long)]
    pub rescale: Option<f64>,
}

pub fn verify_contraction_cmd(args: &ContractionArgs) -> Result<(String, bool)> {
    let (ds, mut model, seed) = match &args.checkpoint {
        Some(c) => {
            let (ckpt, ds, model) = load_checkpointed(&args.run.manifest, c)?;
            (ds, model, ckpt.seed)
        }
        None => {
            let (_, r, ds) = args.run.load()?;
            let model = train::build_model(&ds, &r.model, r.train.seed)?;
            (ds, model, r.train.seed)
        }
    };
    let m = args.modality;
    if m >= model.modalities() {
        return Err(Error::config(format!("modality: {m} out of range")));
    }
    if let Some(target) = args.rescale {
        if !(target > 0.0) {
            return Err(Error::config("rescale: must be positive"));
        }
        let g = model.graphs[m].clone();
        model.params[m].rescale_linear_part(ds.n(), g.as_ref(), target)?;
    }
    let r = unroll::verify_contraction(
        &model,
        m,
        &ds.modalities[m],
        args.trials,
        &mut Rng::new(seed),
    )?;
    let text = format!(
        "modality={}\ntrials={}\nlinear_norm={:.9}\ntriangle_bound={:.9}\nmax_ratio={:.9}\ndecay_rate={:.9}\niterations={}\niteration_bound={}\nresult={}\n",
        r.modality,
        r.trials,
        r.linear_norm,
        r.triangle_bound,
        r.max_ratio,
        r.decay_rate,
        r.iterations_to_fixed_point.map_or("none".into(), |v| v.to_string()),
        r.iteration_bound.map_or("none".into(), |v| v.to_string()),
        if r.passed { "PASS" } else { "FAIL" }
    );
    Ok((text, r.passed))
}

/// λ values of the sweep grid.
pub const SWEEP_GRID: [f64; 6] = [0.001, 0.01, 0.1, 1.0, 10.0, 100.0];

#[derive(Debug, Clone, PartialEq, clap::Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long, default_value = "sweep.csv")]
    pub out: PathBuf,
    /// Worker threads; results are written in grid order regardless
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepRow {
    pub lambda1: f64,
    pub lambda2: f64,
    pub accuracy: f64,
    pub unknown_recall: f64,
    pub final_l_total: f64,
}

pub fn sweep(ds: &OpenWorldDataset, base: &Resolved, jobs: usize) -> Result<Vec<SweepRow>> {
    let grid: Vec<(f64, f64)> = SWEEP_GRID
        .iter()
        .flat_map(|&l1| SWEEP_GRID.iter().map(move |&l2| (l1, l2)))
        .collect();
    let run_one = |&(l1, l2): &(f64, f64)| -> Result<SweepRow> {
        let mut r = *base;
        r.train.lambda1 = l1;
        r.train.lambda2 = l2;
        let out = run_protocol(ds, &r)?;
        Ok(SweepRow {
            lambda1: l1,
            lambda2: l2,
            accuracy: out.metrics.accuracy,
            unknown_recall: out.metrics.unknown_recall().unwrap_or(f64::NAN),
            final_l_total: out.trace.last().map_or(f64::NAN, |t| t.l_total),
        })
    };
    let jobs = jobs.clamp(1, grid.len());
    let chunk = grid.len().div_ceil(jobs);
    let results: Vec<Result<SweepRow>> = std::thread::scope(|s| {
        let handles: Vec<_> = grid
            .chunks(chunk)
            .map(|part| s.spawn(move || part.iter().map(run_one).collect::<Vec<_>>()))
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("sweep worker panicked"))
            .collect()
    });
    results.into_iter().collect()
}

pub fn sweep_cmd(args: &SweepArgs) -> Result<String> {
    let (_, r, ds) = args.run.load()?;
    if args.jobs == 0 {
        return Err(Error::config("jobs: must be at least 1"));
    }
    let rows = sweep(&ds, &r, args.jobs)?;
    let mut csv = String::from("lambda1,lambda2,accuracy,unknown_recall,final_l_total\n");
    for row in &rows {
        let _ = writeln!(
            csv,
            "{:?},{:?},{:?},{:?},{:?}",
            row.lambda1, row.lambda2, row.accuracy, row.unknown_recall, row.final_l_total
        );
    }
    let mut w = io::create(&args.out)?;
    std::io::Write::write_all(&mut w, csv.as_bytes()).map_err(|e| Error::io(&args.out, e))?;
    std::io::Write::flush(&mut w).map_err(|e| Error::io(&args.out, e))?;
    let best = rows
        .iter()
        .max_by(|a, b| a.accuracy.total_cmp(&b.accuracy))
        .expect("grid is non-empty");
    Ok(format!(
        "rows={}\nbest_lambda1={}\nbest_lambda2={}\nbest_accuracy={:.6}\ncsv={}\n",
        rows.len(),
        best.lambda1,
        best.lambda2,
        best.accuracy,
        args.out.display()
    ))
}
