use std::path::Path;

use nsm_core::config::{ConfigFile, Overrides};
use nsm_core::eval::{reconstruction_metrics, sample_surface};
use nsm_core::io::write_sequence;
use nsm_core::model::Mode;
use nsm_core::pipeline::{load_scans, mesh_map, train_map};
use nsm_core::snapshot::{load_map, save_map, SnapshotMeta};
use nsm_core::synth::{sample_visible_surface, synth_scans, SceneSpec};
use nsm_core::Error;

const SCENE: &str = "\
plane z=0 half_extent=14 class=9
box center=4,2.5,0.75 size=1.5,1.5,1.5 class=13
sensor height=1.8 max_range=9
trajectory start=0,0 end=6,0
";

fn config(root: &Path, body: &str, mode: Mode) -> nsm_core::config::RunConfig {
    let text = format!("seed = 2\n[train]\nsteps = 150\nrays_per_step = 512\n{body}");
    let ov = Overrides {
        mode: Some(mode),
        seed: None,
    };
    ConfigFile::parse(&text).unwrap().resolve(root, &ov).unwrap()
}

#[test]
fn synthetic_scene_to_mesh() {
    let d = tempfile::tempdir().unwrap();
    std::fs::write(d.path().join("scene.txt"), SCENE).unwrap();
    let cfg = config(d.path(), "[synth]\nscene = \"scene.txt\"\nscans = 3\nrays_per_scan = 2000\n", Mode::BatchSemantic);
    let set = load_scans(&cfg).unwrap();
    assert_eq!(set.scans.len(), 3);
    let (map, report) = train_map(&cfg, &set.scans).unwrap();
    let first = report.history.first().unwrap().total;
    let last = report.history.last().unwrap().total;
    assert!(last < first, "loss {first} -> {last}");

    let mesh = mesh_map(&map, &cfg.palette().unwrap(), &cfg.mesh, &[]).unwrap();
    assert!(mesh.mesh.triangles.len() > 1000);
    assert!(mesh.classes.contains(&9));

    let spec = SceneSpec::parse(SCENE).unwrap();
    let gt: Vec<_> = sample_visible_surface(&spec, 3, 20_000, 1).iter().map(|p| p.x).collect();
    let pred = sample_surface(&mesh, 20_000, 1).unwrap();
    let m = reconstruction_metrics(&pred.points, &gt, 0.2).unwrap();
    assert!(m.chamfer_l1_cm < 25.0, "{m}");

    // A snapshot reloads to the same map up to its f32 storage.
    let path = d.path().join("map.nsm");
    save_map(&path, &map, &SnapshotMeta::for_map(&map, cfg.mode)).unwrap();
    let (back, meta) = load_map(&path).unwrap();
    assert_eq!(meta.mode, Mode::BatchSemantic);
    let probe = &mesh.mesh.vertices[..200];
    for (a, b) in map.sdf_batch(probe).into_iter().zip(back.sdf_batch(probe)) {
        assert!((a.unwrap() - b.unwrap()).abs() < 1e-6, "{a:?} vs {b:?}");
    }
}

#[test]
fn kitti_layout_sequence_trains_like_the_simulation() {
    let d = tempfile::tempdir().unwrap();
    let spec = SceneSpec::parse(SCENE).unwrap();
    let scans = synth_scans(&spec, 2, 1000, 4).unwrap();
    write_sequence(d.path(), &scans).unwrap();
    let body = "[dataset]\nscans = \"velodyne\"\nlabels = \"labels\"\nposes = \"poses.txt\"\n";
    let cfg = config(d.path(), body, Mode::BatchSemantic);
    let set = load_scans(&cfg).unwrap();
    assert_eq!(set.scans.len(), 2);
    assert_eq!(set.scans[0].len(), scans[0].len());
    let (map, _) = train_map(&cfg, &set.scans).unwrap();
    assert!(!map.grid.is_empty());
}

#[test]
fn panoptic_mode_needs_a_panoptic_map() {
    let d = tempfile::tempdir().unwrap();
    std::fs::write(d.path().join("scene.txt"), SCENE).unwrap();
    let text = "[loss]\nlambda5 = 1.0\n[synth]\nscene = \"scene.txt\"\nscans = 2\nrays_per_scan = 500\n";
    let cfg = config(d.path(), text, Mode::BatchPanoptic);
    let set = load_scans(&cfg).unwrap();
    let (map, _) = train_map(&cfg, &set.scans).unwrap();
    assert!(map.is_panoptic());
    let path = d.path().join("p.nsm");
    save_map(&path, &map, &SnapshotMeta::for_map(&map, cfg.mode)).unwrap();
    let (back, meta) = load_map(&path).unwrap();
    assert!(back.is_panoptic());
    assert_eq!(meta.mode, Mode::BatchPanoptic);

    let missing = ConfigFile::parse("[synth]\nscene = \"nope.txt\"\n").unwrap().resolve(d.path(), &Overrides::default()).unwrap();
    assert!(matches!(load_scans(&missing), Err(Error::Io(_)) | Err(Error::Config(_))));
}
