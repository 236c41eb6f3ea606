//! CSV round trips and loader error reporting.

use std::fs;
use std::path::Path;

use privrel_core::data::{generate, load_csv, sidecar_path, split, LabelKind, SyntheticConfig};
use privrel_core::Error;

fn small_config() -> SyntheticConfig {
    SyntheticConfig {
        houses: 2,
        days_per_house: 6,
        ..SyntheticConfig::default()
    }
}

fn write(path: &Path, text: &str) {
    fs::write(path, text).unwrap();
}

#[test]
fn generated_dataset_reloads_equal() {
    let dir = tempfile::tempdir().unwrap();
    for label in [LabelKind::Occupancy, LabelKind::Identity, LabelKind::Acorn] {
        let data = generate(&SyntheticConfig { label, ..small_config() }).unwrap();
        let path = dir.path().join("data.csv");
        data.write_csv(&path).unwrap();
        assert!(sidecar_path(&path).exists());
        assert_eq!(load_csv(&path).unwrap(), data);
    }
}

#[test]
fn same_seed_gives_byte_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    generate(&small_config()).unwrap().write_csv(&a).unwrap();
    generate(&small_config()).unwrap().write_csv(&b).unwrap();
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let c = dir.path().join("c.csv");
    generate(&SyntheticConfig { seed: 8, ..small_config() })
        .unwrap()
        .write_csv(&c)
        .unwrap();
    assert_ne!(fs::read(&a).unwrap(), fs::read(&c).unwrap());
}

#[test]
fn loads_without_sidecar() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.csv");
    write(&path, "house_id,day_index,step,x,y\n1,0,0,0,0.5\n1,0,1,1,1.5\n");
    let data = load_csv(&path).unwrap();
    assert_eq!(data.steps, 2);
    assert_eq!(data.alphabet_size, 2);
    assert_eq!(data.days[0].y, vec![0.5, 1.5]);
}

fn parse_error(text: &str) -> String {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.csv");
    write(&path, text);
    let err = load_csv(&path).unwrap_err();
    assert_eq!(err.category(), "parse", "{err}");
    err.to_string()
}

#[test]
fn malformed_rows_name_their_line() {
    let msg = parse_error("house_id,day_index,step,x,y\n1,0,0,0,0.5\n1,0,1,0,abc\n");
    assert!(msg.contains(":3"), "{msg}");
    assert!(msg.contains("malformed y"), "{msg}");
}

#[test]
fn wrong_header_is_rejected() {
    let msg = parse_error("house,day,step,x,y\n1,0,0,0,0.5\n");
    assert!(msg.contains("expected header"), "{msg}");
}

#[test]
fn incomplete_day_names_house_and_day() {
    let msg = parse_error(
        "house_id,day_index,step,x,y\n1,0,0,0,0.5\n1,0,1,0,0.5\n2,4,0,1,0.5\n",
    );
    assert!(msg.contains("house 2, day 4"), "{msg}");
}

#[test]
fn duplicate_steps_are_rejected() {
    let msg = parse_error("house_id,day_index,step,x,y\n1,0,0,0,0.5\n1,0,0,0,0.6\n");
    assert!(msg.contains("duplicate step"), "{msg}");
}

#[test]
fn negative_consumption_is_rejected() {
    let msg = parse_error("house_id,day_index,step,x,y\n1,0,0,0,-0.5\n");
    assert!(msg.contains("non-negative"), "{msg}");
}

#[test]
fn labels_outside_the_declared_alphabet_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("data.csv");
    let data = generate(&small_config()).unwrap();
    data.write_csv(&path).unwrap();
    let text = fs::read_to_string(&path).unwrap().replacen("\n1,0,0,0,", "\n1,0,0,5,", 1);
    let text = text.replacen("\n1,0,0,1,", "\n1,0,0,5,", 1);
    write(&path, &text);
    let err = load_csv(&path).unwrap_err();
    assert!(err.to_string().contains("unknown label 5"), "{err}");
}

#[test]
fn header_only_file_is_empty() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("empty.csv");
    write(&path, "house_id,day_index,step,x,y\n");
    assert!(matches!(load_csv(&path), Err(Error::EmptyDataset(_))));
}

#[test]
fn missing_file_is_an_io_error() {
    let err = load_csv(Path::new("/nonexistent/data.csv")).unwrap_err();
    assert_eq!(err.category(), "io");
}

#[test]
fn splits_are_reproducible_and_disjoint() {
    let data = generate(&small_config()).unwrap();
    let a = split(&data, 3).unwrap();
    let b = split(&data, 3).unwrap();
    assert_eq!(a, b);
    let key = |d: &privrel_core::data::DayRecord| (d.house, d.day);
    let mut all: Vec<_> = a
        .train
        .days
        .iter()
        .chain(&a.validation.days)
        .chain(&a.test.days)
        .map(key)
        .collect();
    all.sort();
    all.dedup();
    assert_eq!(all.len(), data.len());
}
