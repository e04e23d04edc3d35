use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use gridgraph::data::{encode_idx_images, encode_idx_labels, Rng};
use gridgraph::Tensor;

fn gridgraph(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gridgraph"))
        .args(args)
        .env("GRIDGRAPH_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// Writes a tiny MNIST-shaped directory of 8x8 images from four templates.
fn fake_mnist(dir: &Path) {
    let mut rng = Rng::new(5);
    let templates: Vec<Vec<f64>> = (0..4)
        .map(|_| (0..64).map(|_| if rng.next_f64() < 0.4 { 1.0 } else { 0.0 }).collect())
        .collect();
    for (prefix, n) in [("train", 40), ("t10k", 16)] {
        let images: Vec<Tensor> = (0..n)
            .map(|i| {
                let px = templates[i % 4].iter().map(|&v| (v + rng.uniform(-0.1, 0.1)).clamp(0.0, 1.0)).collect();
                Tensor::from_vec([8, 8, 1], px).unwrap()
            })
            .collect();
        let labels: Vec<usize> = (0..n).map(|i| i % 4).collect();
        fs::write(dir.join(format!("{prefix}-images-idx3-ubyte")), encode_idx_images(&images).unwrap()).unwrap();
        fs::write(dir.join(format!("{prefix}-labels-idx1-ubyte")), encode_idx_labels(&labels)).unwrap();
    }
}

fn write_config(dir: &Path, extra: &str) -> String {
    let text = format!(
        "# tiny run\ndata_dir={}\ntrain_size=40\ntest_size=16\nlayers=2\nwidth=4\nfilters=2\nepochs=2\n\
         batch_size=8\nmask_size=3\nclasses=4\nknn_pool=40\nencoder_widths=4,4\ndecoder_widths=4,4,4,4\n{extra}",
        dir.display()
    );
    let path = dir.join(format!("run{}.cfg", extra.len()));
    fs::write(&path, text).unwrap();
    path.display().to_string()
}

#[test]
fn equiv_check_exit_code_follows_tolerance() {
    let ok = gridgraph(&["equiv-check", "--masks", "5", "--size", "9x7", "--hole", "3"]);
    assert!(ok.status.success(), "{}", stdout(&ok));
    assert!(stdout(&ok).contains("7 cases, 0 failed"), "{}", stdout(&ok));

    let strict = gridgraph(&["equiv-check", "--masks", "5", "--size", "9x7", "--hole", "3", "--tol", "0"]);
    assert_eq!(strict.status.code(), Some(1));
    assert!(stdout(&strict).contains("FAIL"));

    let bad = gridgraph(&["equiv-check", "--size", "9by7"]);
    assert!(!bad.status.success());
}

#[test]
fn train_eval_and_rerun_are_consistent() {
    let tmp = tempfile::tempdir().unwrap();
    fake_mnist(tmp.path());
    let cfg = write_config(tmp.path(), "");
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for out in [&a, &b] {
        let o = gridgraph(&["train", &cfg, "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        assert!(stdout(&o).contains("epoch   2"));
    }
    let metrics = fs::read_to_string(a.join("metrics.csv")).unwrap();
    assert_eq!(metrics, fs::read_to_string(b.join("metrics.csv")).unwrap());
    assert!(metrics.starts_with("epoch,split,metric,value\n"));
    let final_error = metrics
        .lines()
        .find(|l| l.starts_with("final,test,error,"))
        .unwrap()
        .rsplit(',')
        .next()
        .unwrap()
        .to_string();
    for f in ["config.txt", "model.ggnn", "test_masks.txt", "timing.txt"] {
        assert!(a.join(f).exists(), "{f}");
    }
    assert!(fs::read_to_string(a.join("config.txt")).unwrap().contains("epochs=2\n"));

    let csv = tmp.path().join("eval.csv");
    let e = gridgraph(&[
        "eval",
        a.join("model.ggnn").to_str().unwrap(),
        "--csv",
        csv.to_str().unwrap(),
    ]);
    assert!(e.status.success(), "{}", String::from_utf8_lossy(&e.stderr));
    assert!(fs::read_to_string(csv).unwrap().contains(&format!("final,test,error,{final_error}\n")));

    let x = gridgraph(&["export-recon", a.join("model.ggnn").to_str().unwrap(), "--out", tmp.path().join("x").to_str().unwrap()]);
    assert_eq!(x.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&x.stderr).contains("reconstruct"));
}

#[test]
fn reconstruction_run_exports_images() {
    let tmp = tempfile::tempdir().unwrap();
    fake_mnist(tmp.path());
    let cfg = write_config(tmp.path(), "task=reconstruct\n");
    let run = tmp.path().join("r");
    let o = gridgraph(&["train", &cfg, "--out", run.to_str().unwrap(), "--set", "epochs=1"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("test mse_inside"));
    let pics = tmp.path().join("pics");
    let x = gridgraph(&["export-recon", run.join("model.ggnn").to_str().unwrap(), "--out", pics.to_str().unwrap()]);
    assert!(x.status.success(), "{}", String::from_utf8_lossy(&x.stderr));
    assert_eq!(fs::read_dir(&pics).unwrap().count(), 50);
    let masked = fs::read(pics.join("00_masked.pgm")).unwrap();
    assert!(masked.starts_with(b"P5\n8 8\n255\n"));
    assert_eq!(masked[masked.len() - 64..].iter().filter(|&&b| b == 128).count(), 9);
}

#[test]
fn config_errors_are_reported() {
    let tmp = tempfile::tempdir().unwrap();
    fake_mnist(tmp.path());
    let cfg = write_config(tmp.path(), "colour=red\n");
    let o = gridgraph(&["train", &cfg, "--out", tmp.path().join("o").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("unknown key 'colour'"));

    let cfg = write_config(tmp.path(), "");
    let o = gridgraph(&["train", &cfg, "--out", tmp.path().join("o").to_str().unwrap(), "--set", "nonsense"]);
    assert_eq!(o.status.code(), Some(2));
    let o = gridgraph(&["train", "/nonexistent.cfg", "--out", tmp.path().join("o").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn impute_eval_and_make_masks() {
    let tmp = tempfile::tempdir().unwrap();
    fake_mnist(tmp.path());
    let dir = tmp.path().to_str().unwrap();
    let mut scores = Vec::new();
    for kind in ["mean", "knn"] {
        let o = gridgraph(&["impute-eval", "--imputer", kind, "--pool", "40", "--mask-size", "4", "--data-dir", dir]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        let s = stdout(&o);
        assert!(s.contains("over 16 images"), "{s}");
        let v: f64 = s.split("= ").nth(1).unwrap().split_whitespace().next().unwrap().parse().unwrap();
        scores.push(v);
    }
    assert!(scores[1] < scores[0]);
    let o = gridgraph(&["impute-eval", "--imputer", "median", "--data-dir", dir]);
    assert!(!o.status.success());

    let masks = tmp.path().join("m.txt");
    let o = gridgraph(&["make-masks", "--count", "3", "--out", masks.to_str().unwrap()]);
    assert!(o.status.success());
    let text = fs::read_to_string(&masks).unwrap();
    assert_eq!(text.lines().count(), 3);
    assert!(text.lines().all(|l| l.ends_with(" 13")));
}
