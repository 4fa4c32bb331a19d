use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use dig2dig::cli::run;
use dig2dig::denoiser::Denoiser;
use dig2dig::io::{
    decode_message, encode_message, load_image, load_image_expect, quantize, request_path, response_path, save_image,
    ExternalDenoiser,
};
use dig2dig::schedule::NoiseSchedule;
use dig2dig::tensor::{ImageTensor, RngStream};
use dig2dig::{fuse, FusionConfig, ModalityStack, PatchGrid, ZeroDenoiser};
use proptest::prelude::*;

fn arg(p: &Path) -> String {
    p.display().to_string()
}

fn write_pair(dir: &Path) -> (PathBuf, PathBuf) {
    let mut rng = RngStream::new(1);
    let a = rng.normal_tensor(16, 16, 1).map(|v| (0.4 * v).clamp(-1.0, 1.0));
    let b = ImageTensor::from_fn(16, 16, 1, |y, x, _| ((y * 16 + x) as f64 / 128.0) - 1.0);
    let (pa, pb) = (dir.join("ir.png"), dir.join("vis.png"));
    save_image(&pa, &a).unwrap();
    save_image(&pb, &b).unwrap();
    (pa, pb)
}

#[test]
fn midpoint_and_clamp_codes() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("x.png");
    let mut x = ImageTensor::zeros(2, 2, 1);
    x.data_mut()[3] = 1.7;
    save_image(&p, &x).unwrap();
    let raw = image::open(&p).unwrap().into_luma8().into_raw();
    assert_eq!(raw, vec![128, 128, 128, 255]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn save_load_round_trip_is_quantization(
        data in prop::collection::vec(-1.0f64..=1.0, 5 * 4 * 3),
        rgb in any::<bool>(),
        pnm in any::<bool>(),
    ) {
        let dir = tempfile::tempdir().unwrap();
        let (c, ext) = match (rgb, pnm) {
            (true, true) => (3, "ppm"),
            (false, true) => (1, "pgm"),
            _ => (if rgb { 3 } else { 1 }, "png"),
        };
        let x = ImageTensor::new(5, 4, c, data[..5 * 4 * c].to_vec()).unwrap();
        let p = dir.path().join(format!("x.{ext}"));
        save_image(&p, &x).unwrap();
        prop_assert_eq!(load_image(&p).unwrap(), quantize(&x));
    }
}

#[test]
fn sixteen_bit_and_rejected_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let p16 = dir.path().join("deep.png");
    image::ImageBuffer::<image::Luma<u16>, _>::from_raw(2, 1, vec![0u16, 65535])
        .unwrap()
        .save(&p16)
        .unwrap();
    assert_eq!(load_image(&p16).unwrap().data(), &[-1.0, 1.0]);
    assert!(load_image_expect(&p16, 2, 2).is_err());

    let rgba = dir.path().join("alpha.png");
    image::RgbaImage::new(2, 2).save(&rgba).unwrap();
    assert!(load_image(&rgba).is_err());
    assert!(load_image(&dir.path().join("absent.png")).is_err());
}

#[test]
fn duplicated_modality_equals_single_modality_run() {
    let dir = tempfile::tempdir().unwrap();
    let (a, _) = write_pair(dir.path());
    let (one, two) = (dir.path().join("one"), dir.path().join("two"));
    let common = ["--steps", "12", "--seed", "4", "--patch-grid", "4x4"];
    let mut args = vec![
        "dig2dig".to_string(),
        "fuse".into(),
        "--inputs".into(),
        arg(&a),
        "--out".into(),
        arg(&one),
    ];
    args.extend(common.iter().map(|s| s.to_string()));
    assert_eq!(run(args), 0);
    let mut args = vec![
        "dig2dig".to_string(),
        "fuse".into(),
        "--inputs".into(),
        format!("{},{}", arg(&a), arg(&a)),
        "--out".into(),
        arg(&two),
    ];
    args.extend(common.iter().map(|s| s.to_string()));
    assert_eq!(run(args), 0);
    assert_eq!(
        fs::read(one.join("fused.png")).unwrap(),
        fs::read(two.join("fused.png")).unwrap()
    );
}

#[test]
fn fuse_writes_outputs_and_replays_bit_identically() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = write_pair(dir.path());
    let out = dir.path().join("run");
    let code = run([
        "dig2dig",
        "fuse",
        "--ir",
        &arg(&a),
        "--vis",
        &arg(&b),
        "--out",
        &arg(&out),
        "--steps",
        "10",
        "--metrics",
    ]);
    assert_eq!(code, 0);
    for f in ["fused.png", "trace.csv", "config.txt", "manifest.txt", "report.csv"] {
        assert!(out.join(f).is_file(), "{f} missing");
    }
    let manifest = fs::read_to_string(out.join("manifest.txt")).unwrap();
    assert!(manifest.starts_with("#schema=dig2dig.manifest.v1"));
    assert!(manifest.contains("input_sha256.1 = "));
    assert!(manifest.contains("wall_time_s = "));
    let again = dir.path().join("again");
    assert_eq!(
        run([
            "dig2dig",
            "replay",
            "--manifest",
            &arg(&out.join("manifest.txt")),
            "--out",
            &arg(&again)
        ]),
        0
    );
    for f in ["fused.png", "trace.csv", "report.csv"] {
        assert_eq!(fs::read(out.join(f)).unwrap(), fs::read(again.join(f)).unwrap());
    }
}

#[test]
fn config_file_is_read_and_flags_win() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = write_pair(dir.path());
    let cfg = dir.path().join("run.cfg");
    fs::write(
        &cfg,
        format!("# run\ninputs = {},{}\nsteps = 30\nseed = 9\n", arg(&a), arg(&b)),
    )
    .unwrap();
    let out = dir.path().join("o");
    assert_eq!(
        run([
            "dig2dig",
            "fuse",
            "--config",
            &arg(&cfg),
            "--steps",
            "8",
            "--out",
            &arg(&out)
        ]),
        0
    );
    let echo = fs::read_to_string(out.join("config.txt")).unwrap();
    assert!(echo.contains("steps = 8\n"));
    assert!(echo.contains("seed = 9\n"));

    fs::write(&cfg, "colour = blue\n").unwrap();
    assert_eq!(run(["dig2dig", "fuse", "--config", &arg(&cfg)]), 2);
}

#[test]
fn dig_trace_has_one_record_per_interval() {
    let dir = tempfile::tempdir().unwrap();
    for (steps, interval, records) in [(25, 10, 3), (25, 7, 4), (12, 1, 12)] {
        let out = dir.path().join(format!("dt{steps}-{interval}"));
        let code = run([
            "dig2dig",
            "dig-trace",
            "--synthetic",
            "masked_complement",
            "--synthetic-size",
            "16",
            "--steps",
            &steps.to_string(),
            "--dig-interval",
            &interval.to_string(),
            "--seeds-for-bands",
            "3",
            "--out",
            &arg(&out),
        ]);
        assert_eq!(code, 0);
        let csv = fs::read_to_string(out.join("cum_dig.csv")).unwrap();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("#schema=dig2dig.cumdig.v1"));
        lines.next();
        for m in ["c1", "c2"] {
            let mut recs: Vec<&str> = lines
                .clone()
                .filter(|l| l.split(',').nth(2) == Some(m))
                .map(|l| l.split(',').next().unwrap())
                .collect();
            recs.dedup();
            assert_eq!(recs.len(), records);
        }
    }
}

#[test]
fn metrics_command_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = write_pair(dir.path());
    let out = dir.path().join("m");
    let code = run([
        "dig2dig",
        "metrics",
        "--fused",
        &arg(&a),
        "--ir",
        &arg(&a),
        "--vis",
        &arg(&b),
        "--out",
        &arg(&out),
    ]);
    assert_eq!(code, 0);
    let csv = fs::read_to_string(out.join("report.csv")).unwrap();
    assert!(csv.starts_with("#schema=dig2dig.metrics.v1"));
    assert!(out.join("report.txt").is_file());
}

#[test]
fn exit_codes_follow_the_error_class() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = write_pair(dir.path());
    let out = arg(&dir.path().join("x"));
    let missing = arg(&dir.path().join("missing.png"));
    assert_eq!(
        run(["dig2dig", "fuse", "--ir", &arg(&a), "--vis", &missing, "--out", &out]),
        3
    );
    assert_eq!(
        run([
            "dig2dig",
            "fuse",
            "--ir",
            &arg(&a),
            "--vis",
            &arg(&b),
            "--dig-distance",
            "l9"
        ]),
        2
    );
    assert_eq!(
        run([
            "dig2dig",
            "fuse",
            "--ir",
            &arg(&a),
            "--vis",
            &arg(&b),
            "--out",
            &out,
            "--guidance-scale",
            "1e308"
        ]),
        4
    );
    let theory_out = arg(&dir.path().join("th"));
    let code = run([
        "dig2dig",
        "validate-theory",
        // three paired wins cannot reach p < 0.05 in the sign test
        "--instances",
        "3",
        "--permutations",
        "50",
        "--out",
        &theory_out,
    ]);
    assert_eq!(code, 5);
}

#[test]
fn default_theory_suite_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("theory");
    assert_eq!(run(["dig2dig", "validate-theory", "--out", &arg(&out)]), 0);
    let summary = fs::read_to_string(out.join("summary.txt")).unwrap();
    assert!(summary.lines().any(|l| l == "covariance-mechanism: PASS"));
    assert!(summary.lines().any(|l| l == "anti-DIG-dominance: PASS"));
    for f in ["ledger.csv", "covariance.csv"] {
        assert!(out.join(f).is_file());
    }
}

/// Serves requests in `dir` with `f` until `stop` is set.
fn responder(dir: PathBuf, stop: Arc<AtomicBool>, f: fn(&ImageTensor) -> ImageTensor) -> thread::JoinHandle<()> {
    thread::spawn(move || {
        let mut id = 0;
        while !stop.load(Ordering::SeqCst) {
            let req = request_path(&dir, id);
            match fs::read(&req) {
                Ok(bytes) if !bytes.is_empty() => {
                    let (x, _) = decode_message(&bytes).unwrap();
                    let resp = response_path(&dir, id);
                    let tmp = resp.with_extension("part");
                    fs::write(&tmp, encode_message(&f(&x), 0)).unwrap();
                    fs::rename(&tmp, &resp).unwrap();
                    id += 1;
                }
                _ => thread::sleep(Duration::from_micros(200)),
            }
        }
    })
}

#[test]
fn zero_responder_behaves_as_zero_denoiser() {
    let dir = tempfile::tempdir().unwrap();
    let stop = Arc::new(AtomicBool::new(false));
    let h = responder(dir.path().to_path_buf(), stop.clone(), |x| {
        ImageTensor::zeros(x.height(), x.width(), x.channels())
    });
    let s = NoiseSchedule::default();
    let mut rng = RngStream::new(6);
    let ms = ModalityStack::unnamed(vec![rng.normal_tensor(4, 4, 1), rng.normal_tensor(4, 4, 1)]).unwrap();
    let mut cfg = FusionConfig {
        total_steps: 6,
        ..FusionConfig::default()
    };
    cfg.dig.interval = 2;
    cfg.dig.patch_grid = PatchGrid::Grid { rows: 2, cols: 2 };
    let ext = ExternalDenoiser::new(dir.path(), Duration::from_secs(10)).unwrap();
    let a = fuse(&ms, &ext, &s, &cfg).unwrap();
    stop.store(true, Ordering::SeqCst);
    h.join().unwrap();
    let b = fuse(&ms, &ZeroDenoiser, &s, &cfg).unwrap();
    assert_eq!(a.image, b.image);
}

#[test]
fn echo_responder_gives_closed_form_clean_estimate() {
    let dir = tempfile::tempdir().unwrap();
    let stop = Arc::new(AtomicBool::new(false));
    let h = responder(dir.path().to_path_buf(), stop.clone(), |x| x.clone());
    let s = NoiseSchedule::default();
    let ext = ExternalDenoiser::new(dir.path(), Duration::from_secs(10)).unwrap();
    let x_t = RngStream::new(3).normal_tensor(3, 3, 1);
    for t in [1, 250, 999] {
        let (eps, x0) = ext.predict(&x_t, t, &s).unwrap();
        assert_eq!(eps, x_t);
        let ab = s.alpha_bar(t);
        for (got, x) in x0.data().iter().zip(x_t.data()) {
            let want = x * (1.0 - (1.0 - ab).sqrt()) / ab.sqrt();
            assert!((got - want).abs() <= 1e-12 * want.abs().max(1.0));
        }
    }
    stop.store(true, Ordering::SeqCst);
    h.join().unwrap();
}

#[test]
fn silent_exchange_directory_times_out_with_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = write_pair(dir.path());
    let xdir = dir.path().join("exchange");
    fs::create_dir(&xdir).unwrap();
    let code = run([
        "dig2dig",
        "fuse",
        "--ir",
        &arg(&a),
        "--vis",
        &arg(&b),
        "--out",
        &arg(&dir.path().join("o")),
        "--oracle",
        &format!("external:{}", arg(&xdir)),
        "--external-timeout",
        "0.2",
    ]);
    assert_eq!(code, 3);
}
