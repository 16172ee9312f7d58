use std::collections::VecDeque;
use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_vessel-synth"));
    c.env("RUST_LOG", "warn");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn dir_bytes(dir: &Path, skip: &[&str]) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .filter(|(n, _)| !skip.contains(&n.as_str()))
        .collect();
    v.sort();
    v
}

fn load_label(path: &Path) -> (usize, usize, Vec<bool>) {
    let img = image::open(path).unwrap().into_luma8();
    let (w, h) = img.dimensions();
    (w as usize, h as usize, img.into_raw().into_iter().map(|v| v >= 128).collect())
}

/// Chessboard distance from each labeled pixel to the nearest unlabeled
/// one (multi-source BFS). Twice the mean is a width estimate.
fn mean_inner_distance(w: usize, h: usize, on: &[bool]) -> f64 {
    let mut dist = vec![u32::MAX; w * h];
    let mut queue = VecDeque::new();
    for (i, &o) in on.iter().enumerate() {
        if !o {
            dist[i] = 0;
            queue.push_back(i);
        }
    }
    while let Some(i) = queue.pop_front() {
        let (x, y) = ((i % w) as i64, (i / w) as i64);
        for dy in -1..=1 {
            for dx in -1..=1 {
                let (nx, ny) = (x + dx, y + dy);
                if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                    continue;
                }
                let j = ny as usize * w + nx as usize;
                if dist[j] == u32::MAX {
                    dist[j] = dist[i] + 1;
                    queue.push_back(j);
                }
            }
        }
    }
    let inner: Vec<u32> = on.iter().zip(&dist).filter(|(o, _)| **o).map(|(_, &d)| d).collect();
    inner.iter().map(|&d| f64::from(d)).sum::<f64>() / inner.len() as f64
}

#[test]
fn gen_with_zero_count_writes_an_empty_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["gen", "--count", "0", "--out", dir.path().to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let manifest = std::fs::read_to_string(dir.path().join("manifest.csv")).unwrap();
    assert!(manifest.lines().count() <= 1, "{manifest}");
    assert!(dir.path().join("config.toml").exists());
    assert!(std::fs::read_to_string(dir.path().join("VERSION")).unwrap().starts_with("vessel-synth "));
}

#[test]
fn gen_is_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for (d, threads) in [(&a, "4"), (&b, "1")] {
        let out = run(&[
            "gen", "--count", "100", "--variant", "2", "--seed", "42", "--threads", threads, "--out",
            d.path().to_str().unwrap(),
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let files = dir_bytes(a.path(), &[]);
    assert_eq!(files.len(), 100 * 2 + 3);
    assert_eq!(files, dir_bytes(b.path(), &[]));
    let manifest = std::fs::read_to_string(a.path().join("manifest.csv")).unwrap();
    assert_eq!(manifest.lines().next(), Some("index,seed,image,label,label_fraction"));
    assert_eq!(manifest.lines().count(), 101);
}

#[test]
fn variant_one_draws_wider_lines() {
    let dirs: Vec<_> = (0..2).map(|_| tempfile::tempdir().unwrap()).collect();
    for (d, v) in dirs.iter().zip(["1", "2"]) {
        let out = run(&["gen", "--count", "20", "--variant", v, "--seed", "3", "--out", d.path().to_str().unwrap()]);
        assert!(out.status.success());
    }
    let width = |d: &Path| {
        let mut total = 0.0;
        let mut n = 0;
        for e in std::fs::read_dir(d).unwrap() {
            let p = e.unwrap().path();
            if p.to_string_lossy().ends_with("_lbl.png") {
                let (w, h, on) = load_label(&p);
                total += 2.0 * mean_inner_distance(w, h, &on);
                n += 1;
            }
        }
        assert_eq!(n, 20);
        total / n as f64
    };
    let (w1, w2) = (width(dirs[0].path()), width(dirs[1].path()));
    assert!(w1 > w2, "variant 1 width {w1} vs variant 2 width {w2}");
}

#[test]
fn exit_codes() {
    assert_eq!(run(&["gen"]).status.code(), Some(1));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    let out = run(&["predict", "--checkpoint", "/nonexistent/x.ckpt", "--out", d, "img.png"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("/nonexistent/x.ckpt"));

    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[generator]\nno_such_key = 1\n").unwrap();
    let out = run(&["gen", "--count", "1", "--config", cfg.to_str().unwrap(), "--out", d]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn gradcheck_passes() {
    let out = run(&["gradcheck", "--out", tempfile::tempdir().unwrap().path().to_str().unwrap()]);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(out.status.success(), "{text}");
    assert!(text.contains("softmax_ce") && !text.contains("FAIL"));
}

fn write_png_gray(path: &Path, w: u32, h: u32, f: impl Fn(u32, u32) -> u8) {
    image::GrayImage::from_fn(w, h, |x, y| image::Luma([f(x, y)])).save(path).unwrap();
}

#[test]
fn train_predict_eval_end_to_end() {
    let root = tempfile::tempdir().unwrap();
    let train_dir = root.path().join("train");
    let cfg = root.path().join("run.toml");
    std::fs::write(&cfg, "[training]\niterations = 3\ncheckpoint_every = 2\n").unwrap();
    let out = run(&[
        "train", "--config", cfg.to_str().unwrap(), "--seed", "5", "--out", train_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let ckpt = train_dir.join("final.ckpt");
    assert!(ckpt.exists() && train_dir.join("checkpoint_0000002.ckpt").exists());
    let loss = std::fs::read_to_string(train_dir.join("loss.csv")).unwrap();
    assert_eq!(loss.lines().count(), 4);
    let written = std::fs::read_to_string(train_dir.join("config.toml")).unwrap();
    assert!(written.contains("iterations = 3") && written.contains("seed = 5"));

    // Resuming to a later iteration appends to the same loss curve.
    let out = run(&[
        "train", "--config", cfg.to_str().unwrap(), "--seed", "5", "--iterations", "4", "--resume",
        ckpt.to_str().unwrap(), "--out", train_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(std::fs::read_to_string(train_dir.join("loss.csv")).unwrap().lines().count(), 5);

    // A two-case DRIVE-style directory.
    let test = root.path().join("drive").join("test");
    for sub in ["images", "1st_manual", "mask"] {
        std::fs::create_dir_all(test.join(sub)).unwrap();
    }
    let (w, h) = (60u32, 64u32);
    for id in ["01", "02"] {
        image::RgbImage::from_fn(w, h, |x, y| {
            if x.abs_diff(y) < 2 { image::Rgb([60, 20, 10]) } else { image::Rgb([190, 90, 40]) }
        })
        .save(test.join(format!("images/{id}_test.png")))
        .unwrap();
        write_png_gray(&test.join(format!("1st_manual/{id}_manual1.png")), w, h, |x, y| if x.abs_diff(y) < 2 { 255 } else { 0 });
        write_png_gray(&test.join(format!("mask/{id}_test_mask.png")), w, h, |_, _| 255);
    }

    let eval_dir = root.path().join("eval");
    let out = run(&[
        "eval", "--checkpoint", ckpt.to_str().unwrap(), "--dataset", root.path().join("drive").to_str().unwrap(),
        "--kind", "drive", "--out", eval_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report = std::fs::read_to_string(eval_dir.join("report.csv")).unwrap();
    let lines: Vec<&str> = report.lines().collect();
    assert_eq!(lines[0], "image_id,Sn,Sp,Acc,AUC");
    assert!(lines[1].starts_with("01,") && lines[2].starts_with("02,") && lines[3].starts_with("mean,"));
    assert!(eval_dir.join("roc/01.csv").exists());
    let map = image::open(eval_dir.join("prob/01.png")).unwrap();
    assert!(matches!(map, image::DynamicImage::ImageLuma16(_)));
    assert!(map.width() < w);

    let pred_dir = root.path().join("pred");
    let out = run(&[
        "predict", "--checkpoint", ckpt.to_str().unwrap(), "--mirror-pad", "--out", pred_dir.to_str().unwrap(),
        test.join("images/01_test.png").to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let map = image::open(pred_dir.join("01_test_prob.png")).unwrap();
    assert_eq!((map.width(), map.height()), (w, h));

    // Same inputs, same artifacts.
    let again = root.path().join("eval2");
    run(&[
        "eval", "--checkpoint", ckpt.to_str().unwrap(), "--dataset", root.path().join("drive").to_str().unwrap(),
        "--kind", "drive", "--out", again.to_str().unwrap(),
    ]);
    assert_eq!(dir_bytes(&eval_dir, &[]), dir_bytes(&again, &[]));
}
