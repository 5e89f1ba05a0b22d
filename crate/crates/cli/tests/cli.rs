mod common;

use std::path::Path;

use common::{nsm, ok, s, small_run, SCENE};
use nsm_core::mesh::read_ply;

fn train(dir: &Path, cfg: &Path, extra: &[&str]) {
    let mut args = vec!["--out", s(dir), "train", "--config", s(cfg)];
    args.extend_from_slice(extra);
    ok(&args);
}

#[test]
fn train_mesh_eval_round() {
    let d = tempfile::tempdir().unwrap();
    let cfg = small_run(d.path(), "", "", "");
    let out = d.path().join("run");
    train(&out, &cfg, &[]);
    for f in ["map.nsm", "loss.csv", "config.toml", "train_manifest.json"] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    let loss = std::fs::read_to_string(out.join("loss.csv")).unwrap();
    assert_eq!(loss.lines().next(), Some("step,L1,L2,L3,L4,L5,total"));
    assert_eq!(loss.lines().count(), 61);
    let manifest: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("train_manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 5);
    assert!(manifest["resolved_config"].as_str().unwrap().contains("lambda2"));

    // The resolved config reproduces the run.
    let again = d.path().join("again");
    train(&again, &out.join("config.toml"), &[]);
    assert_eq!(std::fs::read(out.join("map.nsm")).unwrap(), std::fs::read(again.join("map.nsm")).unwrap());

    let stdout = ok(&["--out", s(&out), "mesh", "--checkpoint", s(&out.join("map.nsm"))]);
    assert!(stdout.contains("cube counts"), "{stdout}");
    let mesh = read_ply(&out.join("mesh.ply")).unwrap();
    assert!(mesh.mesh.triangles.len() > 1000);

    // Ground truth drawn from the mesh itself is matched almost perfectly.
    let gt: Vec<[f32; 4]> = mesh.mesh.vertices.iter().map(|v| [v[0] as f32, v[1] as f32, v[2] as f32, 0.0]).collect();
    let labels: Vec<u32> = mesh.classes.iter().map(|&c| c as u32).collect();
    nsm_core::io::write_points(&out.join("gt.bin"), &gt).unwrap();
    nsm_core::io::write_labels(&out.join("gt.label"), &labels).unwrap();
    ok(&[
        "--out",
        s(&out),
        "eval",
        "--mesh",
        s(&out.join("mesh.ply")),
        "--gt",
        s(&out.join("gt.bin")),
        "--gt-labels",
        s(&out.join("gt.label")),
        "--tau",
        "0.1",
        "--samples",
        "200000",
    ]);
    let metrics = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    let row: Vec<f64> = metrics.lines().nth(1).unwrap().split(',').map(|v| v.parse().unwrap()).collect();
    assert!(row[5] < 5.0, "chamfer {} cm", row[5]);
    assert!(row[6] > 99.0, "completion ratio {}", row[6]);
    assert!(out.join("scd.csv").is_file());
}

#[test]
fn loss_weights_are_gated_by_mode() {
    let d = tempfile::tempdir().unwrap();
    let cfg = small_run(d.path(), "", "", "[loss]\nlambda3 = 10.0\n");
    let o = nsm(&["--out", s(&d.path().join("o")), "train", "--config", s(&cfg)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("lambda3"));

    let cfg = small_run(d.path(), "", "", "");
    let o = nsm(&["--out", s(&d.path().join("o")), "train", "--config", s(&cfg), "--mode", "incremental-panoptic"]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr).into_owned();
    assert!(err.contains("lambda3") && err.contains("lambda5"), "{err}");

    let cfg = small_run(d.path(), "", "", "[loss]\nlambda3 = 10.0\n");
    train(&d.path().join("inc"), &cfg, &["--mode", "incremental-semantic"]);
    let loss = std::fs::read_to_string(d.path().join("inc/loss.csv")).unwrap();
    let l3: f64 = loss.lines().last().unwrap().split(',').nth(3).unwrap().parse().unwrap();
    assert!(l3 > 0.0, "L3 should be active after the first scan");
}

#[test]
fn bad_input_exit_codes() {
    let d = tempfile::tempdir().unwrap();
    let cfg = small_run(d.path(), "", "", "");
    let out = s(d.path());
    assert_eq!(nsm(&["--out", out, "suite", "nope"]).status.code(), Some(2));
    assert_eq!(nsm(&["--out", out, "--threads", "0", "train", "--config", s(&cfg)]).status.code(), Some(2));
    assert_eq!(nsm(&["--out", out, "train", "--config", "/nonexistent.toml"]).status.code(), Some(3));
    assert_eq!(nsm(&["--out", out, "mesh", "--checkpoint", s(&cfg)]).status.code(), Some(3));
    std::fs::write(d.path().join("typo.toml"), "[train]\nstep = 3\n").unwrap();
    assert_eq!(nsm(&["--out", out, "train", "--config", s(&d.path().join("typo.toml"))]).status.code(), Some(2));
}

#[test]
fn single_thread_runs_are_bit_identical() {
    let d = tempfile::tempdir().unwrap();
    let cfg = small_run(d.path(), "", "", "");
    let run = |name: &str, seed: &str| {
        let out = d.path().join(name);
        ok(&["--threads", "1", "--seed", seed, "--out", s(&out), "train", "--config", s(&cfg)]);
        ok(&["--threads", "1", "--out", s(&out), "mesh", "--checkpoint", s(&out.join("map.nsm"))]);
        ["loss.csv", "map.nsm", "mesh.ply"].map(|f| std::fs::read(out.join(f)).unwrap())
    };
    let a = run("a", "9");
    let b = run("b", "9");
    let c = run("c", "10");
    assert!(a == b, "same seed must give identical outputs");
    assert_ne!(a[0], c[0]);
}

#[test]
fn coarser_cubes_give_fewer_triangles() {
    let d = tempfile::tempdir().unwrap();
    let cfg = small_run(d.path(), "", "", "");
    let out = d.path().join("o");
    train(&out, &cfg, &[]);
    let mut counts = Vec::new();
    for cube in ["0.05", "0.1", "0.2", "0.4"] {
        ok(&["--out", s(&out), "mesh", "--checkpoint", s(&out.join("map.nsm")), "--s-cube", cube]);
        counts.push(read_ply(&out.join("mesh.ply")).unwrap().mesh.triangles.len());
    }
    assert!(counts.windows(2).all(|w| w[1] < w[0]), "{counts:?}");
    let o = nsm(&["--out", s(&out), "mesh", "--checkpoint", s(&out.join("map.nsm")), "--s-cube", "-1"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn synth_writes_a_kitti_sequence() {
    let d = tempfile::tempdir().unwrap();
    std::fs::write(d.path().join("scene.txt"), SCENE).unwrap();
    let out = d.path().join("seq");
    ok(&["--out", s(&out), "synth", "--scene", s(&d.path().join("scene.txt")), "--scans", "3", "--rays", "500", "--gt-points", "1000"]);
    assert!(out.join("velodyne/000002.bin").is_file());
    assert!(out.join("labels/000002.label").is_file());
    assert_eq!(std::fs::read_to_string(out.join("poses.txt")).unwrap().lines().count(), 3);
    assert_eq!(std::fs::metadata(out.join("gt_points.bin")).unwrap().len(), 1000 * 16);
}

fn submap(dir: &Path, scene: &str, range: &str) -> std::path::PathBuf {
    std::fs::create_dir_all(dir).unwrap();
    let cfg = small_run(dir, "", "submap = true\n", &format!("range = {range}\n"));
    std::fs::write(dir.join("scene.txt"), scene).unwrap();
    train(&dir.join("out"), &cfg, &[]);
    dir.join("out/map.nsm")
}

#[test]
fn merge_fuses_overlapping_submaps() {
    let d = tempfile::tempdir().unwrap();
    let a = submap(&d.path().join("a"), SCENE, "[0, 2]");
    let b = submap(&d.path().join("b"), SCENE, "[1, 3]");
    let manifest = d.path().join("merge.txt");
    std::fs::write(&manifest, format!("output fused.ply\nsubmap {} scans 0 2\nsubmap {} scans 1 3\n", s(&a), s(&b))).unwrap();
    let stdout = ok(&["--out", s(d.path()), "merge", "--manifest", s(&manifest), "--samples", "10000"]);
    assert!(stdout.contains("pair 0<-1"), "{stdout}");
    let fused = read_ply(&d.path().join("fused.ply")).unwrap();
    // The fused mesh sits in the world frame, with the box top near (4, 2.5).
    assert!(fused.mesh.vertices.iter().any(|v| (v[0] - 4.0).abs() < 0.6 && (v[1] - 2.5).abs() < 0.6 && v[2] > 1.2));
}

#[test]
fn merge_of_disjoint_submaps_is_an_alignment_error() {
    let d = tempfile::tempdir().unwrap();
    let far = SCENE.replace("trajectory start=0,0 end=6,0", "trajectory start=60,0 end=66,0").replace("half_extent=14", "half_extent=80");
    let a = submap(&d.path().join("a"), SCENE, "[0, 2]");
    let b = submap(&d.path().join("b"), &far, "[0, 2]");
    let manifest = d.path().join("merge.txt");
    std::fs::write(&manifest, format!("output fused.ply\nsubmap {} scans 0 2\nsubmap {} scans 1 3\n", s(&a), s(&b))).unwrap();
    let o = nsm(&["--out", s(d.path()), "merge", "--manifest", s(&manifest), "--samples", "5000"]);
    assert_eq!(o.status.code(), Some(4), "{}", String::from_utf8_lossy(&o.stderr));
    // Scan ranges that share no scan are rejected before alignment.
    std::fs::write(&manifest, format!("output fused.ply\nsubmap {} scans 0 2\nsubmap {} scans 2 4\n", s(&a), s(&b))).unwrap();
    let o = nsm(&["--out", s(d.path()), "merge", "--manifest", s(&manifest)]);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
    let o = nsm(&["--out", s(d.path()), "merge", "--manifest", s(&d.path().join("missing.txt"))]);
    assert_eq!(o.status.code(), Some(3));
}
