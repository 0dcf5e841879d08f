use std::fs;

use loda::config::DataConfig;
use loda::data::image_io::{load_ppm, to_tensor};
use loda::data::manifest::read_manifest;
use loda::data::synthetic::generate_dataset;
use loda::data::Dataset;
use loda::{Config, Error, LodaModel, Mode};

fn small() -> DataConfig {
    DataConfig { image_size: 32, severities: vec![0.0, 1.0, 2.5], ..DataConfig::default() }
}

#[test]
fn generation_is_byte_deterministic() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ma = generate_dataset(&small(), 5, a.path()).unwrap();
    let mb = generate_dataset(&small(), 5, b.path()).unwrap();
    assert_eq!(ma, mb);
    assert_eq!(ma.rows.len(), 2 * 2 * 3);
    for row in ma.rows.iter().map(|r| r.path.as_str()).chain(["manifest.csv"]) {
        assert_eq!(fs::read(a.path().join(row)).unwrap(), fs::read(b.path().join(row)).unwrap(), "{row}");
    }
    let c = tempfile::tempdir().unwrap();
    generate_dataset(&small(), 6, c.path()).unwrap();
    let first = &ma.rows[1].path;
    assert_ne!(fs::read(a.path().join(first)).unwrap(), fs::read(c.path().join(first)).unwrap());
}

#[test]
fn files_match_the_in_memory_set() {
    let dir = tempfile::tempdir().unwrap();
    let m = generate_dataset(&small(), 1, dir.path()).unwrap();
    assert_eq!(read_manifest(&dir.path().join("manifest.csv")).unwrap(), m);
    let disk = Dataset::from_manifest(&dir.path().join("manifest.csv")).unwrap();
    let mem = Dataset::synthetic(&small(), 1).unwrap();
    assert_eq!(disk.names, mem.names);
    assert_eq!(disk.labels, mem.labels);
    assert!(disk.images.iter().zip(&mem.images).all(|(a, b)| a.bit_eq(b)));
    for (row, label) in m.rows.iter().zip(&disk.labels) {
        if row.path.ends_with("_00.ppm") {
            assert_eq!(*label, 100.0);
        }
        assert!(*label > 0.0 && *label <= 100.0);
    }
    let img = load_ppm(&dir.path().join(&m.rows[0].path)).unwrap();
    assert_eq!((img.width(), img.height()), (32, 32));
    assert_eq!(to_tensor(&img).shape(), [3, 32, 32]);
}

#[test]
fn missing_image_is_reported_with_its_path() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("manifest.csv"), "path,mos\nnot_there.ppm,50\n").unwrap();
    let err = Dataset::from_manifest(&dir.path().join("manifest.csv")).unwrap_err();
    assert!(matches!(err, Error::Io { .. }));
    assert!(err.to_string().contains("not_there.ppm"), "{err}");
    fs::write(dir.path().join("manifest.csv"), "path,mos\n").unwrap();
    assert!(matches!(Dataset::from_manifest(&dir.path().join("manifest.csv")), Err(Error::Input(_))));
}

#[test]
fn unknown_base_is_a_config_error() {
    let data_cfg = DataConfig { bases: vec!["plasma".into()], ..small() };
    assert!(matches!(Dataset::synthetic(&data_cfg, 0), Err(Error::Config(_))));
    let data_cfg = DataConfig { severities: vec![-1.0], ..small() };
    assert!(matches!(Dataset::synthetic(&data_cfg, 0), Err(Error::Config(_))));
}

#[test]
fn model_files_round_trip_and_reject_damage() {
    let cfg = Config::desk();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.lodaw");
    let model = LodaModel::new(&cfg, Mode::Loda, 3).unwrap();
    model.save(&path).unwrap();
    let back = LodaModel::load(&cfg, Mode::Loda, &path).unwrap();
    assert_eq!(back.frozen.hash(), model.frozen.hash());
    assert_eq!(back.trainable.hash(), model.trainable.hash());
    let again = dir.path().join("again.lodaw");
    back.save(&again).unwrap();
    assert_eq!(fs::read(&path).unwrap(), fs::read(&again).unwrap());

    let bytes = fs::read(&path).unwrap();
    fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
    let err = LodaModel::load(&cfg, Mode::Loda, &path).unwrap_err();
    assert!(matches!(err, Error::Weights { .. }), "{err}");
    assert!(err.to_string().contains("w.lodaw"), "{err}");

    let mut bad = bytes.clone();
    bad[5..9].copy_from_slice(&2u32.to_le_bytes());
    fs::write(&path, &bad).unwrap();
    let err = LodaModel::load(&cfg, Mode::Loda, &path).unwrap_err();
    assert!(err.to_string().contains("version 2"), "{err}");

    fs::write(&path, &bytes).unwrap();
    let err = LodaModel::load(&cfg, Mode::LinearProbe, &path).unwrap_err();
    assert!(matches!(err, Error::Weights { .. }), "{err}");
}
