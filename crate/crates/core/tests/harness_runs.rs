use std::fs;

use rdlab::densela::{matmul, DenseMatrix};
use rdlab::harness::{self, ExperimentConfig, Grid};
use serde_json::json;

fn quadratic(lr: f64, steps: u64, out: &std::path::Path) -> ExperimentConfig {
    let value = json!({
        "name": "sgd-quad",
        "lr": lr,
        "steps": steps,
        "output_path": out,
        "problem": {"kind": "quadratic", "hessian": [[3.0, 0.5, 0.0], [0.5, 2.0, 0.2], [0.0, 0.2, 1.0]],
                    "anchor": [1.0, -1.0, 0.5], "init": [0.3, 2.0, -1.0]},
        "optimizer": {"kind": "sgd"},
    });
    ExperimentConfig::from_json(&value.to_string()).unwrap()
}

#[test]
fn one_sgd_step_matches_quadratic_algebra() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = quadratic(0.2, 1, dir.path());
    let run = harness::simulate(&cfg).unwrap();
    assert_eq!(run.records.len(), 1);
    let h = DenseMatrix::from_rows(&[
        vec![3.0, 0.5, 0.0],
        vec![0.5, 2.0, 0.2],
        vec![0.0, 0.2, 1.0],
    ])
    .unwrap();
    let e = DenseMatrix::col(&[0.3 - 1.0, 2.0 + 1.0, -1.0 - 0.5]).unwrap();
    let g = matmul(&h, &e).unwrap();
    let gtg = g.dot(&g).unwrap();
    let gthg = g.dot(&matmul(&h, &g).unwrap()).unwrap();
    let expected = 0.2 * gtg - 0.5 * 0.04 * gthg;
    let drop = run.initial_loss - run.records[0].loss_total;
    assert!((drop - expected).abs() <= 1e-10, "{drop} vs {expected}");
    assert!((run.records[0].g_norm - gtg.sqrt()).abs() <= 1e-12);
}

#[test]
fn sweep_does_not_depend_on_order() {
    let dir = tempfile::tempdir().unwrap();
    let grid = |lrs: Vec<f64>, kinds: Vec<&str>| -> Grid {
        let mut g = Grid::new();
        g.insert("lr".into(), lrs.into_iter().map(|v| json!(v)).collect());
        g.insert(
            "optimizer".into(),
            kinds.into_iter().map(|k| json!({"kind": k})).collect(),
        );
        g
    };
    let forward = quadratic(0.1, 15, &dir.path().join("a"));
    let backward = quadratic(0.1, 15, &dir.path().join("b"));
    let a = harness::sweep(
        &forward,
        &grid(vec![0.1, 0.02], vec!["sgd", "sign", "adagrad"]),
    )
    .unwrap();
    let b = harness::sweep(
        &backward,
        &grid(vec![0.02, 0.1], vec!["adagrad", "sign", "sgd"]),
    )
    .unwrap();
    assert_eq!(a.len(), 6);
    for cell in &a {
        assert!(cell.outcome.is_ok());
        let name = cell.output_path.file_name().unwrap();
        let twin = b
            .iter()
            .find(|c| c.output_path.file_name().unwrap() == name)
            .unwrap();
        assert_eq!(
            fs::read(cell.output_path.join("steps.csv")).unwrap(),
            fs::read(twin.output_path.join("steps.csv")).unwrap()
        );
    }
}

#[test]
fn newton_follows_quartic_curvature() {
    let value = json!({
        "name": "newton-quartic",
        "lr": 1.0,
        "steps": 8,
        "output_path": "unused",
        "problem": {"kind": "quartic", "hessian": [[2.0, 0.3], [0.3, 1.0]], "alpha": 0.05, "init": [1.5, -1.0]},
        "optimizer": {"kind": "newton"},
    });
    let run = harness::simulate(&ExperimentConfig::from_json(&value.to_string()).unwrap()).unwrap();
    let last = run.records.last().unwrap();
    assert!(last.loss_total < 1e-20, "{last:?}");
    assert!(run
        .records
        .windows(2)
        .all(|w| w[1].loss_total <= w[0].loss_total));
}

#[test]
fn linear_autoencoder_runs_record_orthogonal_sign_steps() {
    let value = json!({
        "name": "sign-ae",
        "lr": 1e-4,
        "steps": 1,
        "seed": 3,
        "output_path": "unused",
        "diagnostics": ["s_intra"],
        "problem": {"kind": "linear_ae", "latent_dim": 4096, "init_scale": 1e-3, "lambda": 0.5},
        "optimizer": {"kind": "sign"},
    });
    let run = harness::simulate(&ExperimentConfig::from_json(&value.to_string()).unwrap()).unwrap();
    let s = run.records[0].s_intra.unwrap();
    assert!(s.abs() < 0.05, "{s}");
}
