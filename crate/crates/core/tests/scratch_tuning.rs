//! Temporary tuning probe; removed once desk-scale constants are frozen.

use permvit::data::gen_synthetic_dataset;
use permvit::train::{accuracy, train, TrainConfig};
use permvit::vit::{VitConfig, VitParams};
use std::time::Instant;

#[test]
#[ignore]
fn probe_centroid_and_training() {
    let t0 = Instant::now();
    let (train_ds, test_ds) = gen_synthetic_dataset(11, 5000, 1000).unwrap();
    println!("gen 5000/1000 in {:?}", t0.elapsed());

    // centroid baseline on the full split
    let per = 3 * 32 * 32;
    let mut centroids = vec![vec![0.0f64; per]; 10];
    let mut counts = vec![0usize; 10];
    for i in 0..train_ds.len() {
        let y = train_ds.label(i);
        counts[y] += 1;
        for (a, &p) in centroids[y].iter_mut().zip(&train_ds.pixels[i * per..(i + 1) * per]) {
            *a += f64::from(p) / 255.0;
        }
    }
    for (c, n) in centroids.iter_mut().zip(&counts) {
        for v in c.iter_mut() {
            *v /= *n as f64;
        }
    }
    let mut correct = 0;
    for i in 0..test_ds.len() {
        let img: Vec<f64> = test_ds.pixels[i * per..(i + 1) * per].iter().map(|&p| f64::from(p) / 255.0).collect();
        let mut best = (f64::INFINITY, 0usize);
        for (y, c) in centroids.iter().enumerate() {
            let d: f64 = img.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best.0 {
                best = (d, y);
            }
        }
        if best.1 == test_ds.label(i) {
            correct += 1;
        }
    }
    println!("centroid baseline accuracy: {}", correct as f64 / test_ds.len() as f64);

    // training probe: hold out 10% for validation
    let n = train_ds.len();
    let n_val = n / 10;
    let train_idx: Vec<usize> = (0..n - n_val).collect();
    let val_idx: Vec<usize> = (n - n_val..n).collect();
    let tx = train_ds.batch(&train_idx).unwrap();
    let ty: Vec<usize> = train_idx.iter().map(|&i| train_ds.label(i)).collect();
    let vx = train_ds.batch(&val_idx).unwrap();
    let vy: Vec<usize> = val_idx.iter().map(|&i| train_ds.label(i)).collect();

    let test_x = test_ds.batch_all().unwrap();
    let test_y = test_ds.labels_usize();

    // Rescale selected weight groups from the 0.02 base init.
    let rescale = |params: &mut VitParams<f32>, mode: &str| {
        params.visit_mut(&mut |name, s| {
            if !name.ends_with(".w") {
                return;
            }
            let fan_in = match name {
                "patch_embed.w" => 48.0,
                n if n.contains("fc2") => 128.0,
                _ => 64.0f64,
            };
            let sigma = match mode {
                "xavier" => (1.0 / fan_in).sqrt(),
                _ => 0.02,
            };
            let k = (sigma / 0.02) as f32;
            for v in s.iter_mut() {
                *v *= k;
            }
        });
    };

    for (mode, lr, batch) in [
        ("xavier", 0.02, 16),
        ("xavier", 0.01, 16),
        ("xavier", 0.03, 32),
    ] {
        let mut params = VitParams::<f32>::init(VitConfig::desk(), 1).unwrap();
        rescale(&mut params, mode);
        let t1 = Instant::now();
        let cfg = TrainConfig {
            learning_rate: lr,
            momentum: 0.9,
            epochs: 8,
            batch_size: batch,
            rng_seed: 2,
            early_stop_patience: None,
        };
        let trace = train(&mut params, &tx, &ty, Some((&vx, &vy)), &cfg).unwrap();
        println!("mode={mode} lr={lr} batch={batch}: 8 epochs in {:?}", t1.elapsed());
        for e in &trace.epochs {
            println!(
                "  epoch {}: loss {:.4} train_acc {:.4} val_acc {:?}",
                e.epoch, e.train_loss, e.train_accuracy, e.val_accuracy
            );
        }
        let acc = accuracy(&params, &test_x, &test_y, 64).unwrap();
        println!("mode={mode} lr={lr} batch={batch}: test accuracy {acc}");
    }
}
