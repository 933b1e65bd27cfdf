mod common;

use anchorgcd::checkpoint;
use anchorgcd::data::{
    decode_csv, encode_csv, load_dir, load_embeddings, load_features, save_dir, save_features, save_labels,
    synth_centers, synth_gmm, Format, SynthConfig,
};
use anchorgcd::autodiff::Tensor;
use common::{gaussian_matrix, tiny_model};
use std::path::Path;

#[test]
fn binary_round_trip_is_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let x = gaussian_matrix(1000, 32, 5);
    let p = dir.path().join("x.bin");
    save_features(&p, &x, Format::Binary).unwrap();
    let back = load_features(&p).unwrap();
    assert_eq!(back.shape(), x.shape());
    assert!(back.data().iter().zip(x.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
}

#[test]
fn csv_keeps_every_digit() {
    let vals = vec![0.1, 1.0 / 3.0, -2.718281828459045, 1e-300, 6.02214076e23, f64::MIN_POSITIVE];
    let x = Tensor::matrix(2, 3, vals).unwrap();
    let back = decode_csv(Path::new("x.csv"), &encode_csv(&x)).unwrap();
    assert_eq!(back, x);
}

#[test]
fn empty_dataset_writes_header_only() {
    let x = Tensor::matrix(0, 4, vec![]).unwrap();
    let text = encode_csv(&x);
    assert_eq!(text.lines().count(), 1);
    let back = decode_csv(Path::new("x.csv"), &text).unwrap();
    assert_eq!(back.shape(), &[0, 4]);
}

#[test]
fn well_separated_mixture_is_nearest_neighbor_separable() {
    let cfg = SynthConfig {
        separation: 10.0,
        ..SynthConfig::default()
    };
    let ds = synth_gmm(&cfg).unwrap();
    let n = ds.len();
    let mut hits = 0;
    for i in 0..n {
        let mut best = (f64::INFINITY, 0);
        for j in (0..n).filter(|&j| j != i) {
            let d: f64 = ds.features.row(i).iter().zip(ds.features.row(j)).map(|(a, b)| (a - b).powi(2)).sum();
            if d < best.0 {
                best = (d, j);
            }
        }
        hits += (ds.labels[best.1] == ds.labels[i]) as usize;
    }
    assert!(hits as f64 / n as f64 >= 0.99);

    let centers = synth_centers(&cfg).unwrap();
    for a in 0..centers.len() {
        for b in a + 1..centers.len() {
            let d: f64 = centers[a].iter().zip(&centers[b]).map(|(x, y)| (x - y).powi(2)).sum();
            assert!(d.sqrt() >= 10.0);
        }
    }
}

#[test]
fn default_split_sizes() {
    let ds = synth_gmm(&SynthConfig::default()).unwrap();
    assert_eq!(ds.labeled_indices().len(), 250);
    assert_eq!(ds.unlabeled_indices().len(), 750);
    assert_eq!(synth_gmm(&SynthConfig::default()).unwrap(), ds);
}

#[test]
fn infeasible_separation_is_a_config_error() {
    let cfg = SynthConfig {
        dim: 1,
        classes: 3,
        old: 1,
        ..SynthConfig::default()
    };
    assert!(synth_gmm(&cfg).unwrap_err().is_usage());
}

#[test]
fn directory_and_file_loaders_agree() {
    let dir = tempfile::tempdir().unwrap();
    let ds = synth_gmm(&SynthConfig {
        per_class: 20,
        ..SynthConfig::default()
    })
    .unwrap();
    save_dir(dir.path(), &ds).unwrap();
    assert_eq!(load_dir(dir.path()).unwrap(), ds);

    let f = dir.path().join("f.csv");
    let l = dir.path().join("l.txt");
    save_features(&f, &ds.features, Format::Csv).unwrap();
    save_labels(&l, &ds.labels).unwrap();
    let loaded = load_embeddings(&f, &l, &ds.old_classes, Some(ds.num_classes), ds.split_seed).unwrap();
    assert_eq!(loaded, ds);

    save_labels(&l, &ds.labels[1..]).unwrap();
    assert!(load_embeddings(&f, &l, &ds.old_classes, None, 0).is_err());
}

#[test]
fn checkpoint_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.ckpt");
    let m = tiny_model(3);
    checkpoint::save(&p, &m).unwrap();
    assert_eq!(checkpoint::load(&p).unwrap(), m);
    assert!(checkpoint::load(&dir.path().join("missing")).unwrap_err().is_usage());
}
