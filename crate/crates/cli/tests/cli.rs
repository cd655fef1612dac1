use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn dmi(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dmi"))
        .args(args)
        .env_remove("DMI_SEED")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_config(dir: &Path, sweep: &str) -> PathBuf {
    let text = format!(
        "seed = 3\n[dataset]\ndir = {:?}\nwidth = 16\nheight = 16\nn_train = 6\nn_test = 2\nmin_buildings = 1\nmax_buildings = 2\n\
         [schedule]\nsteps = 50\n[prior]\nvariant = \"gaussian\"\n[sampler]\nm = 4\n\
         [sweep]\n{sweep}\n[output]\ndir = {:?}\n",
        dir.join("data"),
        dir.join("out")
    );
    let path = dir.join("run.toml");
    fs::write(&path, text).unwrap();
    path
}

const SMALL_SWEEP: &str = "mask_rates = [0.8]\nsigmas = [0.05]\naware = [true, false]\nseeds = [0]\nrecord_wall_time = false";

#[test]
fn help_and_version_exit_zero() {
    let h = dmi(&["--help"]);
    assert_eq!(code(&h), 0);
    for sub in ["gen-dataset", "train-prior", "reconstruct", "sweep", "eval", "oracle-check", "export"] {
        assert!(stdout(&h).contains(sub), "help lists {sub}");
    }
    assert_eq!(code(&dmi(&["--version"])), 0);
    assert_eq!(code(&dmi(&["reconstruct", "--help"])), 0);
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&dmi(&[])), 1);
    assert_eq!(code(&dmi(&["frobnicate"])), 1);
    assert_eq!(code(&dmi(&["sweep", "--jobs", "many"])), 1);
}

#[test]
fn missing_config_keys_are_named() {
    let tmp = tempfile::tempdir().unwrap();
    let o = dmi(&["gen-dataset"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("output.dir"), "{}", stderr(&o));

    let out = tmp.path().join("out");
    let o = dmi(&["gen-dataset", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("dataset.dir"), "{}", stderr(&o));

    let cfg = write_config(tmp.path(), SMALL_SWEEP);
    let o = dmi(&["gen-dataset", "--config", cfg.to_str().unwrap(), "--set", "sweep.mask_rates=[1.5]"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("sweep.mask_rates"), "{}", stderr(&o));

    let o = dmi(&["gen-dataset", "--config", cfg.to_str().unwrap(), "--set", "bogus.key=1"]);
    assert_eq!(code(&o), 1);
}

#[test]
fn missing_files_exit_one() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nope.dmi");
    let o = dmi(&["export", missing.to_str().unwrap(), tmp.path().join("x.pgm").to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    let cfg = write_config(tmp.path(), SMALL_SWEEP);
    // dataset not generated yet
    assert_eq!(code(&dmi(&["sweep", "--config", cfg.to_str().unwrap()])), 1);
    assert_eq!(code(&dmi(&["eval", "--csv", missing.to_str().unwrap()])), 1);
}

#[test]
fn end_to_end_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL_SWEEP);
    let c = cfg.to_str().unwrap();
    let out = tmp.path().join("out");

    let o = dmi(&["gen-dataset", "--config", c]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(tmp.path().join("data/manifest.json").exists());

    let o = dmi(&["train-prior", "--config", c]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(out.join("gaussian_mean.dmi").exists());

    let grid = out.join("rec.dmi");
    let o = dmi(&[
        "reconstruct", "--config", c, "--map", "1", "--mask-rate", "0.7", "--sigma", "0.01", "--aware", "--trace", "--output",
        grid.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("psnr"));
    assert!(grid.exists());
    assert!(out.join("rec.trace.csv").exists());
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("rec.json")).unwrap()).unwrap();
    assert_eq!(manifest["method"], "diffusion");
    assert!(manifest["sampler_seed"].is_u64());

    let o = dmi(&["reconstruct", "--config", c, "--map", "0", "--method", "kriging"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(fs::read_dir(out.join("reconstruct")).unwrap().count() >= 2);

    let o = dmi(&["sweep", "--config", c, "--jobs", "2"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = fs::read_to_string(out.join("metrics.csv")).unwrap();
    // 2 maps x 2 awareness settings x 3 methods
    assert_eq!(csv.lines().count(), 1 + 12);

    let o = dmi(&["sweep", "--config", c]);
    assert_eq!(code(&o), 0);
    assert_eq!(fs::read_to_string(out.join("metrics.csv")).unwrap(), csv);

    let o = dmi(&["eval", "--config", c]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("kriging"));
    let summary = fs::read_to_string(out.join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 1 + 6);

    for (cm, magic) in [("gray", "P5"), ("viridis", "P6")] {
        let img = out.join(format!("rec_{cm}.img"));
        let o = dmi(&["export", grid.to_str().unwrap(), img.to_str().unwrap(), "--colormap", cm]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        assert!(fs::read(&img).unwrap().starts_with(magic.as_bytes()));
    }
}

#[test]
fn partial_sweep_exits_two() {
    let tmp = tempfile::tempdir().unwrap();
    // 95 % missing leaves too few points to fit a variogram on a 16x16 map
    let sweep = "mask_rates = [0.95]\nsigmas = [0.05]\naware = [false]\nseeds = [0]\nmethods = [\"idw\", \"kriging\"]";
    let cfg = write_config(tmp.path(), sweep);
    let c = cfg.to_str().unwrap();
    assert_eq!(code(&dmi(&["gen-dataset", "--config", c])), 0);
    let o = dmi(&["sweep", "--config", c]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    assert!(stderr(&o).contains("kriging"));
    let csv = fs::read_to_string(tmp.path().join("out/metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2);
}
