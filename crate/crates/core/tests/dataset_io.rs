use std::fs;

use spunet::synthdata::{generate, load, save, Dataset, TaskSpec, MANIFEST_FILE};

fn small() -> Dataset {
    let spec = TaskSpec {
        image_size: 16,
        ..Default::default()
    };
    generate(&spec, 16, 9).unwrap()
}

#[test]
fn save_then_load_round_trips() {
    let ds = small();
    let dir = tempfile::tempdir().unwrap();
    let manifest = save(&ds, dir.path()).unwrap();
    assert_eq!(manifest, dir.path().join(MANIFEST_FILE));
    let back = load(dir.path()).unwrap();
    assert_eq!(back.spec, ds.spec);
    for (a, b) in back.samples.iter().zip(&ds.samples) {
        assert_eq!(a, b);
    }
    assert_eq!(back.mode_frequencies(), ds.mode_frequencies());
}

#[test]
fn saving_twice_gives_identical_bytes() {
    let ds = small();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    save(&ds, a.path()).unwrap();
    save(&ds, b.path()).unwrap();
    assert_eq!(
        fs::read(a.path().join(MANIFEST_FILE)).unwrap(),
        fs::read(b.path().join(MANIFEST_FILE)).unwrap()
    );
    let id = &ds.samples[3].id;
    let rel = format!("masks/{id}_1.pgm");
    assert_eq!(fs::read(a.path().join(&rel)).unwrap(), fs::read(b.path().join(&rel)).unwrap());
}

#[test]
fn truncated_mask_names_the_sample() {
    let ds = small();
    let dir = tempfile::tempdir().unwrap();
    save(&ds, dir.path()).unwrap();
    let id = ds.samples[5].id.clone();
    let path = dir.path().join(format!("masks/{id}_0.pgm"));
    let bytes = fs::read(&path).unwrap();
    fs::write(&path, &bytes[..bytes.len() - 10]).unwrap();
    let err = load(dir.path()).unwrap_err().to_string();
    assert!(err.contains(&id), "{err}");
}

#[test]
fn missing_image_names_the_sample() {
    let ds = small();
    let dir = tempfile::tempdir().unwrap();
    save(&ds, dir.path()).unwrap();
    let id = ds.samples[2].id.clone();
    fs::remove_file(dir.path().join(format!("images/{id}.pgm"))).unwrap();
    let err = load(dir.path()).unwrap_err().to_string();
    assert!(err.contains(&id), "{err}");
}

#[test]
fn flipped_pixel_fails_the_checksum() {
    let ds = small();
    let dir = tempfile::tempdir().unwrap();
    save(&ds, dir.path()).unwrap();
    let id = ds.samples[0].id.clone();
    let path = dir.path().join(format!("images/{id}.pgm"));
    let mut bytes = fs::read(&path).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 0x01;
    fs::write(&path, bytes).unwrap();
    let err = load(dir.path()).unwrap_err().to_string();
    assert!(err.contains(&id) && err.contains("checksum"), "{err}");
}

#[test]
fn missing_manifest_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(load(dir.path()).is_err());
    fs::write(dir.path().join(MANIFEST_FILE), "{ not json").unwrap();
    assert!(load(dir.path()).is_err());
}
