use dig2dig::metrics::{cc, mi, mse, psnr, GrayImage};
use dig2dig::tensor::RngStream;

fn image(data: Vec<f64>, h: usize, w: usize) -> GrayImage {
    GrayImage::new(h, w, data).unwrap()
}

#[test]
fn integer_images_match_exact_arithmetic() {
    // exact reference: MSE = 161104 / 16 = 10069, PSNR = 10 log10(65025 / 10069)
    let a: Vec<f64> = (0..16).map(|i| (i * 17) as f64).collect();
    let b: Vec<f64> = (0..16).map(|i| ((i * 37 + 11) % 256) as f64).collect();
    let (a, b) = (image(a, 4, 4), image(b, 4, 4));
    assert_eq!(mse(&a, &b).unwrap(), 10069.0);
    let want = 8.100_940_200_111_254;
    assert!((psnr(&a, &b).unwrap() - want).abs() < 1e-12);
}

#[test]
fn psnr_falls_as_noise_grows() {
    let mut rng = RngStream::new(3);
    let (h, w) = (32, 32);
    let clean: Vec<f64> = (0..h * w).map(|i| 40.0 + 170.0 * ((i % w) as f64 / w as f64)).collect();
    let noise: Vec<f64> = (0..h * w).map(|_| rng.normal()).collect();
    let reference = image(clean.clone(), h, w);
    let mut prev = f64::INFINITY;
    for sigma in [0.5, 1.0, 2.0, 4.0, 8.0, 16.0, 32.0] {
        let noisy = clean
            .iter()
            .zip(&noise)
            .map(|(c, n)| (c + sigma * n).clamp(0.0, 255.0))
            .collect();
        let p = psnr(&reference, &image(noisy, h, w)).unwrap();
        assert!(p < prev, "sigma {sigma}: {p} >= {prev}");
        prev = p;
    }
}

#[test]
fn shuffling_a_source_cannot_raise_mutual_information() {
    let mut rng = RngStream::new(17);
    let (h, w) = (24, 24);
    let x: Vec<f64> = (0..h * w)
        .map(|i| ((i / w) as f64 * 9.0 + rng.normal() * 20.0).clamp(0.0, 255.0))
        .collect();
    let fused = image(x.clone(), h, w);
    let with_x = mi(&fused, &[image(x.clone(), h, w)]).unwrap();
    for seed in 0..10 {
        let mut shuffled = x.clone();
        RngStream::new(seed).shuffle(&mut shuffled);
        let with_shuffled = mi(&fused, &[image(shuffled, h, w)]).unwrap();
        assert!(with_x >= with_shuffled);
    }
}

#[test]
fn inverted_image_is_perfectly_anticorrelated() {
    let a: Vec<f64> = (0..64).map(|i| ((i * 29) % 256) as f64).collect();
    let b: Vec<f64> = a.iter().map(|v| 255.0 - v).collect();
    let (r, constant) = cc(&image(a, 8, 8), &image(b, 8, 8)).unwrap();
    assert!(!constant);
    assert!((r + 1.0).abs() < 1e-15);
}
