use std::path::Path;
use std::process::{Command, Output};

use owl::checkpoint::Checkpoint;
use owl::manifest::LoadedManifest;
use owl_core::data::{make_blobs, BlobSpec, OpenWorldDataset, DEFAULT_RATIOS};
use owl_core::fusion::FusionKind;
use owl_core::train::{self, ModelSpec, TrainConfig};
use owl_core::Rng;

fn owl(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_owl"))
        .args(args)
        .current_dir(cwd)
        .output()
        .unwrap()
}

fn ok(args: &[&str], cwd: &Path) -> String {
    let out = owl(args, cwd);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn gen(cwd: &Path, extra: &[&str]) {
    let mut args = vec!["gen-data", "--out", "d", "--n", "200", "--seed", "3"];
    args.extend_from_slice(extra);
    ok(&args, cwd);
}

#[test]
fn every_verb_has_help() {
    let dir = tempfile::tempdir().unwrap();
    for verb in [
        "gen-data",
        "train",
        "eval",
        "agent",
        "grad-check",
        "verify-contraction",
        "sweep",
    ] {
        let text = ok(&[verb, "--help"], dir.path());
        assert!(text.contains("Usage"), "{verb}");
    }
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(owl(&["bogus"], d).status.code(), Some(2));
    gen(d, &[]);
    let out = owl(&["train", "--manifest", "d/manifest.json", "--lr=0"], d);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("lr"));
    let out = owl(
        &[
            "eval",
            "--manifest",
            "d/manifest.json",
            "--checkpoint",
            "missing.json",
        ],
        d,
    );
    assert_eq!(out.status.code(), Some(2));
    std::fs::write(d.join("c.toml"), "layer = 3\n").unwrap();
    let out = owl(
        &[
            "train",
            "--manifest",
            "d/manifest.json",
            "--config",
            "c.toml",
        ],
        d,
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn gen_data_writes_one_file_per_modality() {
    let dir = tempfile::tempdir().unwrap();
    gen(
        dir.path(),
        &["--modalities", "3", "--classes", "5", "--unknown", "1"],
    );
    for m in 0..3 {
        assert!(dir.path().join(format!("d/modality_{m}.csv")).exists());
    }
    let m = LoadedManifest::read(&dir.path().join("d/manifest.json")).unwrap();
    assert_eq!(m.manifest.known_classes, vec![0, 1, 2, 3]);
    assert_eq!(m.load(0.2).unwrap().n(), 200);
}

#[test]
fn eval_reproduces_train_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    gen(d, &[]);
    let trained = ok(
        &[
            "train",
            "--manifest",
            "d/manifest.json",
            "--out",
            "r",
            "--epochs",
            "30",
        ],
        d,
    );
    assert!(trained.contains("protocol=1"));
    let evaluated = ok(
        &[
            "eval",
            "--manifest",
            "d/manifest.json",
            "--checkpoint",
            "r/checkpoint.json",
        ],
        d,
    );
    for line in evaluated.lines() {
        assert!(
            trained.lines().any(|l| l == line),
            "{line} missing from the train report"
        );
    }
    let agent = ok(
        &[
            "agent",
            "--manifest",
            "d/manifest.json",
            "--checkpoint",
            "r/checkpoint.json",
        ],
        d,
    );
    assert!(agent.contains("matches_checkpoint=true"));
    let trace = std::fs::read_to_string(d.join("r/trace.csv")).unwrap();
    assert_eq!(trace.lines().next(), Some("epoch,l_k,l_u,l_total,acc_val"));
    assert_eq!(trace.lines().count(), 31);
}

#[test]
fn two_modalities_take_protocol_two() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    gen(d, &["--modalities", "2"]);
    let out = ok(
        &[
            "train",
            "--manifest",
            "d/manifest.json",
            "--out",
            "r",
            "--epochs",
            "5",
            "--fusion",
            "auto-weight",
        ],
        d,
    );
    assert!(out.contains("protocol=2") && out.contains("fusion=auto-weight"));
    let c = Checkpoint::read(&d.join("r/checkpoint.json")).unwrap();
    assert_eq!(c.modalities.len(), 2);
    assert_eq!(c.fusion.params.len(), 2);
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    gen(d, &["--modalities", "2"]);
    ok(
        &[
            "train",
            "--manifest",
            "d/manifest.json",
            "--out",
            "r",
            "--epochs",
            "10",
            "--fusion",
            "attention",
            "--prox",
            "row-group-threshold",
            "--graph",
            "hypergraph",
        ],
        d,
    );
    let m = LoadedManifest::read(&d.join("d/manifest.json")).unwrap();
    let ds = m.load(0.2).unwrap();
    let c = Checkpoint::read(&d.join("r/checkpoint.json")).unwrap();
    let model = c.to_model(&ds).unwrap();
    let again = Checkpoint::from_model(
        &model,
        &ds,
        c.split.clone(),
        &ModelSpec {
            graph: c.graph_kind().unwrap(),
            knn_k: c.graph.knn_k,
            ..ModelSpec::default()
        },
        c.agent().as_ref(),
        None,
    );
    assert_eq!(again.modalities, c.modalities);
    assert_eq!(again.fusion, c.fusion);
    assert_eq!(again.graph, c.graph);
}

#[test]
fn checkpoint_rejects_a_different_graph() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    gen(d, &[]);
    ok(
        &[
            "train",
            "--manifest",
            "d/manifest.json",
            "--out",
            "r",
            "--epochs",
            "2",
        ],
        d,
    );
    let mut c = Checkpoint::read(&d.join("r/checkpoint.json")).unwrap();
    c.graph.knn_k = 3;
    c.write(&d.join("bad.json")).unwrap();
    let out = owl(
        &[
            "eval",
            "--manifest",
            "d/manifest.json",
            "--checkpoint",
            "bad.json",
        ],
        d,
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn edge_list_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    gen(d, &[]);
    let edges: String = (0..199).map(|i| format!("{i} {}\n", i + 1)).collect();
    std::fs::write(d.join("d/edges.txt"), edges).unwrap();
    let text = std::fs::read_to_string(d.join("d/manifest.json")).unwrap();
    let text = text.replace("\"knn_k\": 10", "\"edge_list_path\": \"edges.txt\"");
    std::fs::write(d.join("d/manifest.json"), text).unwrap();
    ok(
        &[
            "train",
            "--manifest",
            "d/manifest.json",
            "--out",
            "r",
            "--epochs",
            "3",
        ],
        d,
    );
    let c = Checkpoint::read(&d.join("r/checkpoint.json")).unwrap();
    assert_eq!(c.graph.source, "edge-list");
    ok(
        &[
            "eval",
            "--manifest",
            "d/manifest.json",
            "--checkpoint",
            "r/checkpoint.json",
        ],
        d,
    );
}

#[test]
fn sweep_writes_the_full_grid_in_order() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&["gen-data", "--out", "d", "--n", "100", "--seed", "1"], d);
    ok(
        &[
            "sweep",
            "--manifest",
            "d/manifest.json",
            "--epochs",
            "3",
            "--out",
            "s1.csv",
            "--jobs",
            "4",
        ],
        d,
    );
    ok(
        &[
            "sweep",
            "--manifest",
            "d/manifest.json",
            "--epochs",
            "3",
            "--out",
            "s2.csv",
        ],
        d,
    );
    let a = std::fs::read_to_string(d.join("s1.csv")).unwrap();
    assert_eq!(a.lines().count(), 37);
    assert_eq!(a, std::fs::read_to_string(d.join("s2.csv")).unwrap());
    assert!(a.lines().nth(1).unwrap().starts_with("0.001,0.001,"));
    assert!(a.lines().last().unwrap().starts_with("100.0,100.0,"));
}

#[test]
fn grad_check_and_contraction_verbs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = ok(
        &[
            "grad-check",
            "--fusion",
            "trusted",
            "--prox",
            "row-group-threshold",
        ],
        d,
    );
    assert!(out.contains("PASS"));
    gen(d, &[]);
    let out = ok(&["verify-contraction", "--manifest", "d/manifest.json"], d);
    assert!(out.contains("result=PASS"));
}

#[test]
fn permuting_modalities_leaves_the_trace_unchanged() {
    let raw = make_blobs(
        &BlobSpec {
            n_per_class: 30,
            m_modalities: 3,
            ..BlobSpec::default()
        },
        &mut Rng::new(4),
    )
    .unwrap();
    let ds = OpenWorldDataset::from_raw(raw, DEFAULT_RATIOS, 0.2, &mut Rng::new(4)).unwrap();
    let cfg = TrainConfig {
        epochs: 20,
        seed: 4,
        ..TrainConfig::default()
    };
    for fusion in FusionKind::ALL {
        let spec = ModelSpec {
            fusion,
            ..ModelSpec::default()
        };
        let a = train::run_protocol2(&ds, &cfg, &spec).unwrap();
        let b =
            train::run_protocol2(&ds.with_modalities(&[2, 0, 1]).unwrap(), &cfg, &spec).unwrap();
        for (x, y) in a.trace.iter().zip(&b.trace) {
            assert!((x.l_total - y.l_total).abs() < 1e-9, "{fusion:?}");
        }
        let (p, q) = (&a.model.params[0], &b.model.params[1]);
        for (x, y) in [(&p.f, &q.f), (&p.w, &q.w), (&p.u, &q.u)] {
            assert!(x.sub(y).unwrap().max_abs() < 1e-9, "{fusion:?}");
        }
    }
}
