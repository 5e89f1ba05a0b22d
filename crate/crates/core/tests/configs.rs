use std::path::Path;

use nsm_core::config::{ConfigFile, Overrides, Source};
use nsm_core::model::Mode;

fn resolve(name: &str) -> nsm_core::config::RunConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name);
    let root = path.parent().unwrap().to_path_buf();
    ConfigFile::load(&path).unwrap().resolve(&root, &Overrides::default()).unwrap()
}

#[test]
fn shipped_configs_resolve() {
    let c = resolve("geometry.toml");
    assert_eq!(c.mode, Mode::BatchSemantic);
    let Some(Source::Synth(s)) = &c.source else { panic!("expected a synthetic source") };
    assert!(s.scene.is_file(), "{}", s.scene.display());

    let c = resolve("incremental_panoptic.toml");
    assert_eq!(c.mode, Mode::IncrementalPanoptic);
    assert_eq!(c.train.weights.lambda3, 100.0);

    let c = resolve("kitti.toml");
    assert!(matches!(c.source, Some(Source::Dataset(_))));
    assert_eq!(c.train.dynamic_classes.len(), 8);
}
