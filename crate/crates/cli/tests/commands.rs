use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use uniconv::analysis::cost::{breakdown_from_counts, count_model_instrumented};
use uniconv::io::config::parse_config;
use uniconv::{Model, ModelConfig, Rng};

fn config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs")
        .join(name)
}

fn uniconv(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_uniconv"))
        .arg("--out")
        .arg(out)
        .args(args)
        .env("RUST_LOG", "warn")
        .env_remove("UNICONV_THREADS")
        .output()
        .expect("spawn uniconv")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(str::to_owned).collect())
        .collect()
}

fn cost_total(dir: &Path) -> (u64, u64) {
    let rows = csv_rows(&dir.join("cost.csv"));
    let total = rows.iter().find(|r| r[0] == "total").expect("total row");
    (total[1].parse().unwrap(), total[2].parse().unwrap())
}

#[test]
fn describe_tiny_matches_enumeration() {
    let dir = tempfile::tempdir().unwrap();
    let tiny = config("tiny.json");
    let o = uniconv(
        dir.path(),
        &["--config", tiny.to_str().unwrap(), "describe"],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8(o.stdout).unwrap();
    assert!(stdout.contains("amp 25x25, dis 11x11"), "{stdout}");

    let (cfg, _, seed) = parse_config(&fs::read_to_string(&tiny).unwrap()).unwrap();
    let m = Model::<f32>::build(&cfg, &mut Rng::new(seed)).unwrap();
    let params: usize = m.store.iter().map(|(_, p)| p.value.data().len()).sum();
    let macs = breakdown_from_counts(&count_model_instrumented(&m, 224, 224).unwrap())
        .total()
        .macs;
    assert_eq!(cost_total(dir.path()), (params as u64, macs));
}

#[test]
fn describe_a_like_is_in_envelope() {
    let dir = tempfile::tempdir().unwrap();
    let path = config("a_like.json");
    let o = uniconv(
        dir.path(),
        &["--config", path.to_str().unwrap(), "describe"],
    );
    assert_eq!(code(&o), 0);
    let (params, macs) = cost_total(dir.path());
    assert!((3_000_000..=3_800_000).contains(&params), "{params}");
    assert!((450_000_000..=750_000_000).contains(&macs), "{macs}");

    let (cfg, _, _) = parse_config(&fs::read_to_string(&path).unwrap()).unwrap();
    let m = Model::<f32>::build(&cfg, &mut Rng::new(0)).unwrap();
    assert_eq!(params, m.store.num_elements() as u64);
}

#[test]
fn describe_rows_cover_every_category() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&uniconv(dir.path(), &["describe"])), 0);
    let rows = csv_rows(&dir.path().join("cost.csv"));
    let names: Vec<&str> = rows.iter().map(|r| r[0].as_str()).collect();
    assert_eq!(
        names,
        [
            "rfa",
            "small_conv",
            "ffn",
            "stem_downsample",
            "head",
            "total"
        ]
    );
    let sum: u64 = rows[..5].iter().map(|r| r[1].parse::<u64>().unwrap()).sum();
    assert_eq!(sum, rows[5][1].parse::<u64>().unwrap());
}

#[test]
fn indivisible_input_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = uniconv(dir.path(), &["--input-size", "223", "describe"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("32"));
}

#[test]
fn bad_arguments_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&uniconv(dir.path(), &["frobnicate"])), 2);
    assert_eq!(
        code(&uniconv(dir.path(), &["--precision", "f16", "describe"])),
        2
    );
    assert_eq!(
        code(&uniconv(
            dir.path(),
            &["--config", "/no/such.json", "describe"]
        )),
        2
    );
    assert_eq!(code(&uniconv(dir.path(), &["--help"])), 0);
}

#[test]
fn malformed_config_is_an_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"model": {"stage_channels": [10, 16, 24, 32]}}"#).unwrap();
    let o = uniconv(dir.path(), &["--config", bad.to_str().unwrap(), "describe"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn empty_image_directory_is_an_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let images = dir.path().join("images");
    fs::create_dir(&images).unwrap();
    fs::write(images.join("notes.txt"), "not an image").unwrap();
    fs::write(images.join("broken.ppm"), "P6\n2 2\n255\n").unwrap();
    let o = uniconv(
        dir.path(),
        &[
            "erf",
            "--samples",
            "4",
            "--images",
            images.to_str().unwrap(),
        ],
    );
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("no readable"));
}

#[test]
fn erf_from_images() {
    let dir = tempfile::tempdir().unwrap();
    let images = dir.path().join("images");
    fs::create_dir(&images).unwrap();
    for i in 0..3u8 {
        let mut bytes = b"P6\n64 64\n255\n".to_vec();
        bytes.extend((0..64 * 64 * 3).map(|j| (j as u8).wrapping_mul(i + 1)));
        fs::write(images.join(format!("img{i}.ppm")), bytes).unwrap();
    }
    let mut small = b"P6\n32 32\n255\n".to_vec();
    small.extend(std::iter::repeat_n(7u8, 32 * 32 * 3));
    fs::write(images.join("small.ppm"), small).unwrap();

    let out = dir.path().join("out");
    let o = uniconv(
        &out,
        &[
            "erf",
            "--samples",
            "8",
            "--images",
            images.to_str().unwrap(),
        ],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let metrics = fs::read_to_string(out.join("erf_metrics.csv")).unwrap();
    assert!(metrics.contains("sample_count,3\n"), "{metrics}");
}

#[test]
fn erf_outputs_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(code(&uniconv(&a, &["erf", "--samples", "6"])), 0);
    assert_eq!(
        code(&uniconv(&b, &["--threads", "3", "erf", "--samples", "6"])),
        0
    );
    for name in [
        "erf.pgm",
        "erf_metrics.csv",
        "erf_profile.csv",
        "erf_grid.csv",
    ] {
        assert_eq!(
            fs::read(a.join(name)).unwrap(),
            fs::read(b.join(name)).unwrap(),
            "{name}"
        );
    }
    let c = dir.path().join("c");
    assert_eq!(
        code(&uniconv(&c, &["--seed", "9", "erf", "--samples", "6"])),
        0
    );
    assert_ne!(
        fs::read(a.join("erf_grid.csv")).unwrap(),
        fs::read(c.join("erf_grid.csv")).unwrap()
    );
}

#[test]
fn render_round_trips_grid() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&uniconv(dir.path(), &["erf", "--samples", "2"])), 0);
    let grid = dir.path().join("erf_grid.csv");
    let o = uniconv(dir.path(), &["render", "--grid", grid.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    assert_eq!(
        fs::read(dir.path().join("render.pgm")).unwrap(),
        fs::read(dir.path().join("erf.pgm")).unwrap()
    );
}

#[test]
fn rf_support_passes_for_default_config() {
    let dir = tempfile::tempdir().unwrap();
    let o = uniconv(dir.path(), &["rf-support"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    let rows = csv_rows(&dir.path().join("rf_support.csv"));
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0], ["amp", "25", "25", "25", "true"]);
    assert_eq!(rows[1], ["dis", "11", "11", "11", "true"]);
}

#[test]
fn clipped_rf_support_is_an_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = uniconv(dir.path(), &["--input-size", "21", "rf-support"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("enlarge the input"));
}

#[test]
fn stacked_rf_support() {
    let dir = tempfile::tempdir().unwrap();
    let o = uniconv(dir.path(), &["rf-support", "--depth", "2"]);
    assert_eq!(code(&o), 0);
    let rows = csv_rows(&dir.path().join("rf_support.csv"));
    assert_eq!(rows[0], ["amp", "49", "49", "49", "true"]);
}

#[test]
fn overfit_writes_loss_curve() {
    let dir = tempfile::tempdir().unwrap();
    let o = uniconv(
        dir.path(),
        &[
            "overfit",
            "--steps",
            "3",
            "--samples",
            "4",
            "--target",
            "100",
        ],
    );
    assert_eq!(code(&o), 0);
    let rows = csv_rows(&dir.path().join("overfit_loss.csv"));
    assert_eq!(rows.len(), 4);
    assert_eq!(rows[3][0], "3");
    let unreachable = uniconv(
        dir.path(),
        &[
            "overfit",
            "--steps",
            "1",
            "--samples",
            "4",
            "--target",
            "1e-9",
        ],
    );
    assert_eq!(code(&unreachable), 1);
    assert_eq!(
        code(&uniconv(dir.path(), &["overfit", "--classes", "1"])),
        2
    );
}

#[test]
fn tiny_model_config_file_matches_builtin() {
    let (cfg, _, seed) = parse_config(&fs::read_to_string(config("tiny.json")).unwrap()).unwrap();
    assert_eq!(cfg, ModelConfig::tiny());
    assert_eq!(seed, 0);
}
