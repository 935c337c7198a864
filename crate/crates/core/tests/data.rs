//! The synthetic fixture needs spatial features: raw-pixel linear models fail on it.

use chanprune::data::synthetic_dataset;
use chanprune::pipeline::{pretrain, RunConfig};

/// Plain logistic regression on raw pixels, full-batch gradient descent.
fn linear_test_accuracy(seed: u64) -> f64 {
    let train = synthetic_dataset(seed, 300, 0.5);
    let test = synthetic_dataset(seed ^ 0xABCD, 200, 0.5);
    let d = train.sample(0).len();
    let (mut w, mut b) = (vec![0.0f64; d], 0.0f64);
    for _ in 0..300 {
        let (mut gw, mut gb) = (vec![0.0f64; d], 0.0f64);
        for i in 0..train.len() {
            let x = train.sample(i);
            let z: f64 = b + x.iter().zip(&w).map(|(&xi, wi)| xi as f64 * wi).sum::<f64>();
            let err = 1.0 / (1.0 + (-z).exp()) - train.labels()[i] as f64;
            gw.iter_mut().zip(x).for_each(|(g, &xi)| *g += err * xi as f64);
            gb += err;
        }
        let n = train.len() as f64;
        w.iter_mut().zip(&gw).for_each(|(wi, g)| *wi -= 0.05 * g / n);
        b -= 0.05 * gb / n;
    }
    let correct = (0..test.len())
        .filter(|&i| {
            let z: f64 = b + test.sample(i).iter().zip(&w).map(|(&xi, wi)| xi as f64 * wi).sum::<f64>();
            (z > 0.0) as usize == test.labels()[i]
        })
        .count();
    correct as f64 / test.len() as f64
}

#[test]
fn linear_model_stays_near_chance_while_the_cnn_separates() {
    let linear = linear_test_accuracy(11);
    assert!(linear < 0.65, "linear accuracy {linear}");
    let c = RunConfig::parse(
        "seed = 11\n[model]\narchitecture = \"toy\"\n[data]\ndataset = \"synthetic\"\nbatch_size = 32\n\
         [train]\nlearning_rate = 0.05\npretrain_epochs = 15\n",
        &[],
    )
    .unwrap();
    let (_, record) = pretrain(&c).unwrap();
    let cnn = record.accuracy["pretrain"];
    assert!(cnn > 0.9, "cnn accuracy {cnn}");
}
