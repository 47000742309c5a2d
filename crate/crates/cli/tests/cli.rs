use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use earlyvision::io;
use earlyvision::subcortical::PathwayParams;

const BIN: &str = env!("CARGO_BIN_EXE_earlyvision");

fn cli(args: &[&str], out: &Path) -> Output {
    Command::new(BIN)
        .args(args)
        .arg("--out")
        .arg(out)
        .env_remove("EARLYVISION_OUT")
        .output()
        .expect("cli runs")
}

fn gray_png(path: &Path, level: u8, size: u32) {
    image::RgbImage::from_pixel(size, size, image::Rgb([level, level, level]))
        .save(path)
        .unwrap();
}

fn small_config(dir: &Path, extra: &str) -> String {
    let path = dir.join("run.toml");
    fs::write(
        &path,
        format!("seed = 4\n\n[grid]\nfov_deg = 2.0\nresolution_px = 64\n{extra}"),
    )
    .unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn dry_run_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    for args in [
        &["tune", "--dry-run"][..],
        &["measure", "--dry-run", "--mode", "cascade"][..],
    ] {
        let o = cli(args, &out);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    assert!(!out.exists());
}

#[test]
fn invalid_config_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(dir.path(), "\n[tune]\nn_evalz = 3\n");
    let o = cli(&["tune", "--dry-run", "--config", &config], dir.path());
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("n_evalz"));
}

#[test]
fn forward_gray_image_gives_zero_dump() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(dir.path(), "");
    let png = dir.path().join("gray.png");
    gray_png(&png, 128, 64);
    let out = dir.path().join("out");
    let o = cli(
        &["forward", png.to_str().unwrap(), "--config", &config],
        &out,
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let (header, grids) = io::read_dump(&out, "forward-subcortical").unwrap();
    assert_eq!((header.channels, header.height, header.width), (4, 64, 64));
    assert!(grids.iter().all(|g| g.as_slice().iter().all(|&v| v == 0.0)));
}

#[test]
fn forward_dumps_are_seeded_and_shaped() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(
        dir.path(),
        "\n[noise]\nenabled = true\n\n[vone]\nn_channels = 6\n",
    );
    let png = dir.path().join("img.png");
    image::RgbImage::from_fn(64, 64, |x, y| {
        image::Rgb([(x * 4) as u8, (y * 4) as u8, ((x + y) * 2) as u8])
    })
    .save(&png)
    .unwrap();
    let run = |out: &Path, mode: &str| {
        let o = cli(
            &[
                "forward",
                png.to_str().unwrap(),
                "--config",
                &config,
                "--mode",
                mode,
            ],
            out,
        );
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    };
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for mode in ["subcortical", "cascade"] {
        run(&a, mode);
        run(&b, mode);
        let stem = format!("forward-{mode}");
        let bin = |d: &Path| fs::read(d.join(format!("{stem}.bin"))).unwrap();
        assert_eq!(bin(&a), bin(&b));
        let (header, _) = io::read_dump(&a, &stem).unwrap();
        let channels = if mode == "subcortical" { 4 } else { 6 };
        assert_eq!(
            (header.channels, header.height, header.width, header.seed),
            (channels, 64, 64, Some(4))
        );
    }
}

#[test]
fn forward_rejects_wrong_size() {
    let dir = tempfile::tempdir().unwrap();
    let png = dir.path().join("small.png");
    gray_png(&png, 10, 32);
    let o = cli(&["forward", png.to_str().unwrap()], dir.path());
    assert!(!o.status.success());
}

#[test]
fn validate_reports_invariants_and_box_warnings() {
    let dir = tempfile::tempdir().unwrap();
    let good = dir.path().join("good.json");
    io::write_params(&good, &PathwayParams::tuned_p()).unwrap();
    let o = cli(
        &["validate", good.to_str().unwrap(), "--check-box"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let bad = dir.path().join("bad.json");
    let mut p = PathwayParams::tuned_p();
    p.r_s = p.r_c;
    io::write_params(&bad, &p).unwrap();
    let o = cli(&["validate", bad.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("r_s"));

    let outside = dir.path().join("outside.json");
    let mut p = PathwayParams::tuned_p();
    p.gamma = 3.0;
    io::write_params(&outside, &p).unwrap();
    let o = cli(
        &["validate", outside.to_str().unwrap(), "--check-box"],
        dir.path(),
    );
    assert!(o.status.success());
    let stderr = String::from_utf8_lossy(&o.stderr);
    assert!(
        stderr.contains("warning") && stderr.contains("gamma"),
        "{stderr}"
    );
}

#[test]
fn zero_contrast_sweeps_give_zero_columns() {
    let dir = tempfile::tempdir().unwrap();
    let sweeps = "\n[sweeps]\nsf_cpd = [0.5, 1.0, 2.0, 4.0, 8.0, 12.0]\nsf_diameter_deg = 2.0\nsf_contrast = 0.0\n\
                  diameters_deg = [0.1, 0.5, 1.0, 2.0]\nsize_contrast = 0.0\ncontrasts = [0.06, 0.5, 1.0]\n";
    let config = small_config(dir.path(), sweeps);
    let out = dir.path().join("out");
    let o = cli(
        &["measure", "--config", &config, "--cell", "M", "--plots"],
        &out,
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let m = out.join("measure-subcortical-M");
    for file in ["sf_tuning.csv", "size_tuning.csv"] {
        let text = fs::read_to_string(m.join(file)).unwrap();
        for line in text.lines().skip(1) {
            assert_eq!(line.split(',').nth(1), Some("0"), "{file}: {line}");
        }
    }
    assert!(m.join("contrast_response.svg").exists());
    assert!(m.join("properties.json").exists());
}
