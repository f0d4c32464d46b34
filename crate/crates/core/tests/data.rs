mod common;

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use common::*;
use me_mamba::autodiff::Tensor;
use me_mamba::data::*;
use me_mamba::eval::c_index;
use proptest::prelude::*;

fn small(n: usize, beta: f64) -> GeneratorParams {
    GeneratorParams {
        n_patients: n,
        dim: 4,
        bag_min: 2,
        bag_max: 4,
        beta,
        ..Default::default()
    }
}

/// Population C-index of the true latent under the generator's exponential
/// event and censoring times. A pair is comparable when the earlier of the two
/// event times comes first among all four clocks, which for exponentials has
/// probability `λᵢ / (λᵢ + λⱼ + 2c)`.
fn population_c_index(beta: f64, censor_fraction: f64) -> f64 {
    let c = censoring_rate(censor_fraction, beta, 1.0);
    let (lim, steps) = (8.0, 800);
    let h = 2.0 * lim / steps as f64;
    let phi = |z: f64| (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let (mut num, mut den) = (0.0, 0.0);
    for a in 0..=steps {
        let zi = -lim + a as f64 * h;
        for b in 0..=steps {
            let zj = -lim + b as f64 * h;
            let (li, lj) = ((beta * zi).exp(), (beta * zj).exp());
            let w = phi(zi) * phi(zj) * li / (li + lj + 2.0 * c);
            den += w;
            if zi > zj {
                num += w;
            } else if zi == zj {
                num += 0.5 * w;
            }
        }
    }
    num / den
}

#[test]
fn minimal_bag_file_layout() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("one.mebg");
    save_bag(&path, &Tensor::matrix(1, 1, vec![0.0]).unwrap()).unwrap();
    let bytes = fs::read(&path).unwrap();
    assert_eq!(bytes.len(), 14 + 4);
    assert_eq!(&bytes[..4], b"MEBG");
}

#[test]
fn random_bag_round_trips_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.mebg");
    let x = uniform(&mut rng(50), 64, 256, -10.0, 10.0);
    let x32 = Tensor::matrix(64, 256, x.data().iter().map(|&v| v as f32 as f64).collect()).unwrap();
    save_bag(&path, &x32).unwrap();
    let back = load_bag(&path).unwrap();
    assert_eq!(back.shape(), &[64, 256]);
    for (a, b) in back.data().iter().zip(x32.data()) {
        assert_eq!(a.to_bits(), b.to_bits());
    }
    // re-encoding the loaded matrix reproduces the file
    assert_eq!(encode_bag(&back).unwrap(), fs::read(&path).unwrap());
}

#[test]
fn truncated_bag_names_lengths() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.mebg");
    save_bag(&path, &Tensor::zeros(&[3, 2])).unwrap();
    let bytes = fs::read(&path).unwrap();
    fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
    let msg = load_bag(&path).unwrap_err().to_string();
    assert!(msg.contains("24") && msg.contains("21"), "{msg}");
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = vec![];
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn same_seed_gives_identical_files() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let p = small(20, 1.0);
    write_cohort(&generate_cohort(&p, 9).unwrap(), a.path()).unwrap();
    write_cohort(&generate_cohort(&p, 9).unwrap(), b.path()).unwrap();
    let (fa, fb) = (dir_bytes(a.path()), dir_bytes(b.path()));
    assert_eq!(fa.len(), 41);
    assert_eq!(fa, fb);
    let c = tempfile::tempdir().unwrap();
    write_cohort(&generate_cohort(&p, 10).unwrap(), c.path()).unwrap();
    assert_ne!(fa, dir_bytes(c.path()));
}

#[test]
fn cohort_survives_a_disk_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cohort = generate_cohort(&small(12, 1.0), 3).unwrap();
    let manifest = write_cohort(&cohort, dir.path()).unwrap();
    for path in [manifest.as_path(), dir.path()] {
        let back = load_cohort(path).unwrap();
        assert_eq!(back.edges, cohort.edges);
        for (a, b) in back.patients.iter().zip(&cohort.patients) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.bag, b.bag);
            assert_eq!(a.genomics, b.genomics);
            assert_eq!(a.label, b.label);
        }
    }
    assert!(load_cohort(&dir.path().join("missing.json")).is_err());
}

#[test]
fn records_have_the_expected_shape() {
    let p = GeneratorParams {
        n_patients: 10,
        dim: 8,
        bag_min: 5,
        bag_max: 9,
        ..Default::default()
    };
    let cohort = generate_cohort(&p, 4).unwrap();
    let ids: BTreeSet<&str> = cohort.patients.iter().map(|p| p.id.as_str()).collect();
    assert_eq!(ids.len(), 10);
    for r in &cohort.patients {
        assert!((5..=9).contains(&r.bag.rows()));
        assert_eq!(r.bag.cols(), 8);
        assert_eq!(r.genomics.shape(), &[6, 8]);
        assert!((1..=4).contains(&r.label.k));
    }
}

#[test]
fn censoring_hits_its_target() {
    let cohort = generate_cohort(&small(200, 1.0), 42).unwrap();
    let frac = cohort.censored().iter().filter(|&&c| c).count() as f64 / 200.0;
    assert!((frac - 0.3).abs() <= 0.05, "{frac}");
}

#[test]
fn latent_oracle_matches_population_value() {
    // the quadrature agrees with the closed-form uncensored value E[σ(β|z₁−z₂|)]
    let uncensored = population_c_index(1.0, 0.0);
    assert!((uncensored - 0.7245).abs() < 0.002, "{uncensored}");

    for (beta, n) in [(1.0, 3000), (2.0, 3000)] {
        let want = population_c_index(beta, 0.3);
        let cohort = generate_cohort(&small(n, beta), 77).unwrap();
        let z: Vec<f64> = cohort.patients.iter().map(|p| p.latent.unwrap()).collect();
        let got = c_index(&z, &cohort.times(), &cohort.censored()).unwrap();
        assert!((got - want).abs() < 0.015, "β={beta}: {got} vs {want}");
    }
    // a strong planted signal clears 0.8; β=1 cannot, see the population value
    assert!(population_c_index(2.0, 0.3) > 0.8);
    assert!(population_c_index(1.0, 0.3) < 0.8);
}

#[test]
fn invalid_generator_params_are_rejected() {
    for p in [
        GeneratorParams { beta: 0.0, ..small(10, 1.0) },
        GeneratorParams { n_patients: 7, ..small(10, 1.0) },
        GeneratorParams { bag_min: 0, ..small(10, 1.0) },
        GeneratorParams { censor_fraction: 1.0, ..small(10, 1.0) },
    ] {
        assert!(generate_cohort(&p, 1).is_err());
    }
}

#[test]
fn fold_examples() {
    let sizes = |n| split_folds(n, 5, 1).unwrap().iter().map(Vec::len).collect::<Vec<_>>();
    assert_eq!(sizes(10), vec![2; 5]);
    assert_eq!(sizes(11), vec![3, 2, 2, 2, 2]);
    assert!(split_folds(4, 5, 1).is_err());
    assert_eq!(split_folds(30, 5, 8).unwrap(), split_folds(30, 5, 8).unwrap());
}

proptest! {
    #[test]
    fn folds_partition_the_cohort(n in 1usize..300, k in 1usize..10, seed in any::<u64>()) {
        prop_assume!(k <= n);
        let folds = split_folds(n, k, seed).unwrap();
        prop_assert_eq!(folds.len(), k);
        let mut all: Vec<usize> = folds.iter().flatten().copied().collect();
        all.sort();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        let (lo, hi) = (folds.iter().map(Vec::len).min().unwrap(), folds.iter().map(Vec::len).max().unwrap());
        prop_assert!(hi - lo <= 1);
    }
}
