//! The committed CSVs under `data/` are exactly what the in-crate
//! generators produce; any hand edit (or generator drift) shows up as a
//! byte difference here.

use std::fs;
use std::path::PathBuf;

use citrus_cli::dataset;

fn data_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data")
}

fn expected() -> Vec<(&'static str, String)> {
    vec![
        (
            "planted_series.csv",
            dataset::matrix_to_csv(&dataset::generate_planted_series().unwrap()),
        ),
        ("planted_adjacency.csv", dataset::matrix_to_csv(&dataset::planted_adjacency())),
        ("constant_series.csv", dataset::matrix_to_csv(&dataset::constant_series())),
        ("fixture_distances.csv", dataset::matrix_to_csv(&dataset::fixture_distances())),
    ]
}

#[test]
fn committed_data_files_match_their_generators() {
    for (name, want) in expected() {
        let got = fs::read_to_string(data_dir().join(name))
            .unwrap_or_else(|e| panic!("data/{name}: {e}"));
        assert_eq!(got, want, "data/{name} no longer matches its generator");
    }
}

#[test]
#[ignore = "rewrites the committed fixtures under data/"]
fn regenerate_committed_data_files() {
    let dir = data_dir();
    fs::create_dir_all(&dir).unwrap();
    for (name, text) in expected() {
        fs::write(dir.join(name), text).unwrap();
    }
}
