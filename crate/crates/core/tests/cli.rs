use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use tidd::eval::truth_on_axis;
use tidd::fpm::{read_grids, write_grids, Cell, DetectionGrid};
use tidd::ingest::parse_label_csv;
use tidd::pipeline::validation_seed;

const SMALL: &[&str] = &[
    "--image-size",
    "16",
    "--stride",
    "4",
    "--set",
    "blocks=4,8",
    "--set",
    "dense_width=16",
    "--set",
    "max_epochs=6",
    "--set",
    "learning_rate=0.002",
];

fn tidd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tidd")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = tidd(args);
    assert!(
        out.status.success(),
        "tidd {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn with_small<'a>(args: &[&'a str]) -> Vec<&'a str> {
    let mut v = args.to_vec();
    v.extend_from_slice(SMALL);
    v
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn scratch() -> PathBuf {
    tempfile::tempdir().unwrap().keep()
}

/// One synthesized scenario with a small trained model and a raw grid.
fn trained() -> &'static Path {
    static DIR: OnceLock<PathBuf> = OnceLock::new();
    DIR.get_or_init(|| {
        let dir = scratch();
        ok(&["synth", "--out-dir", s(&dir)]);
        ok(&with_small(&["train", "--out-dir", s(&dir)]));
        ok(&with_small(&["detect", "--out-dir", s(&dir)]));
        dir
    })
}

fn read_grid(path: &Path) -> Vec<DetectionGrid> {
    read_grids(fs::File::open(path).unwrap()).unwrap()
}

fn metrics(dir: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(dir.join("metrics.csv"))
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

#[test]
fn synth_writes_one_file_per_stream() {
    let a = scratch();
    let out = ok(&["synth", "--out-dir", s(&a)]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("16 streams"));
    let count = |d: &Path| fs::read_dir(d.join("streams")).unwrap().count();
    assert_eq!(count(&a), 16);
    assert!(a.join("labels.csv").is_file());

    let b = scratch();
    ok(&["synth", "--out-dir", s(&b), "--seed", "9"]);
    assert_eq!(count(&b), 16);
    let f = "streams/st01_G01.csv";
    assert_ne!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap());
}

#[test]
fn startup_prints_every_default() {
    let out = ok(&["synth", "--out-dir", s(&scratch())]);
    let err = String::from_utf8_lossy(&out.stderr);
    for key in ["threshold = 0.75", "quorum = 3", "window = 60", "image_size = 64", "stride = 1"] {
        assert!(err.contains(key), "missing {key} in\n{err}");
    }
}

#[test]
fn synth_rejects_long_period() {
    let out = tidd(&["synth", "--out-dir", s(&scratch()), "--set", "period_min=45"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("period"));
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(tidd(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(tidd(&["synth", "--window", "x"]).status.code(), Some(1));
    assert_eq!(tidd(&["synth", "--set", "no_such_key=1"]).status.code(), Some(1));
}

#[test]
fn config_file_is_read_and_overridden() {
    let dir = scratch();
    let conf = dir.join("run.conf");
    fs::write(&conf, "# scenario\nstations = 3\nsatellites = 1\nevents = 1\n").unwrap();
    ok(&["synth", "--config", s(&conf), "--out-dir", s(&dir)]);
    assert_eq!(fs::read_dir(dir.join("streams")).unwrap().count(), 3);
    let out = ok(&["synth", "--config", s(&conf), "--out-dir", s(&dir), "--set", "stations=4"]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("4 streams"));
}

#[test]
fn training_is_reproducible() {
    let dir = trained();
    for name in ["model.tidm", "manifest.csv", "history.csv"] {
        assert!(dir.join(name).is_file(), "{name}");
    }
    let again = scratch();
    ok(&with_small(&[
        "train",
        "--out-dir",
        s(&again),
        "--data",
        s(&dir.join("streams")),
        "--labels",
        s(&dir.join("labels.csv")),
    ]));
    assert_eq!(fs::read(dir.join("model.tidm")).unwrap(), fs::read(again.join("model.tidm")).unwrap());
    assert_eq!(fs::read(dir.join("manifest.csv")).unwrap(), fs::read(again.join("manifest.csv")).unwrap());
}

#[test]
fn missing_label_file_is_named() {
    let dir = scratch();
    ok(&["synth", "--out-dir", s(&dir)]);
    let missing = dir.join("nowhere.csv");
    let out = tidd(&with_small(&["train", "--out-dir", s(&dir), "--labels", s(&missing)]));
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains(s(&missing)));
}

#[test]
fn detect_classifies_every_complete_window() {
    let grids = read_grid(&trained().join("grid.csv"));
    assert_eq!(grids.len(), 2);
    for g in &grids {
        assert_eq!(g.stations.len(), 8);
        assert_eq!(g.steps, 1440 - 59);
        assert_eq!(g.cells.len(), 8 * (1440 - 59));
        for st in 0..g.stations.len() {
            let classified = g.station_row(st).iter().filter(|&&c| c != Cell::NoData).count();
            assert_eq!(classified, 1440 - 59);
        }
        // final-minute assignment: the first classified minute closes the first window
        assert_eq!(g.start_epoch, 59 * 60);
    }
}

#[test]
fn detect_rejects_mismatched_image_size() {
    let dir = trained();
    let out = tidd(&["detect", "--out-dir", s(&scratch()), "--data", s(&dir.join("streams")), "--checkpoint", s(&dir.join("model.tidm"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("image size"));
}

#[test]
fn background_only_rarely_fires() {
    let dir = trained();
    let quiet = scratch();
    ok(&["synth", "--out-dir", s(&quiet), "--seed", "77", "--set", "events=0"]);
    ok(&with_small(&["detect", "--out-dir", s(&quiet), "--checkpoint", s(&dir.join("model.tidm"))]));
    let grids = read_grid(&quiet.join("grid.csv"));
    let detected: usize = grids.iter().map(DetectionGrid::detected_count).sum();
    let cells: usize = grids.iter().map(|g| g.cells.len()).sum();
    let rate = detected as f64 / cells as f64;
    assert!(rate < 0.10, "background detection rate {rate}");
}

#[test]
fn fpm_thresholds() {
    let dir = trained();
    let grid = dir.join("grid.csv");
    let run = |threshold: Option<&str>| {
        let out = scratch();
        let mut args = vec!["fpm", "--out-dir", s(&out), "--grid", s(&grid)];
        if let Some(t) = threshold {
            args.extend(["--threshold", t]);
        }
        let printed = String::from_utf8(ok(&args).stdout).unwrap();
        let votes = fs::read_to_string(out.join("votes.csv")).unwrap();
        (printed, votes, out)
    };

    let (printed, votes, _) = run(None);
    let header = "# fpm threshold=0.75 quorum=3 denominator=valid-stations";
    assert_eq!(votes.lines().next().unwrap(), header);
    assert!(printed.contains(header));

    let rows = |votes: &str| -> Vec<(f64, usize, bool)> {
        votes
            .lines()
            .skip(2)
            .map(|l| {
                let f: Vec<&str> = l.split(',').collect();
                (f[2].parse().unwrap(), f[3].parse().unwrap(), f[4] == "1")
            })
            .collect()
    };
    let (_, votes, out) = run(Some("1.0"));
    assert!(rows(&votes).iter().all(|r| !r.2));
    assert!(read_grid(&out.join("grid_fpm.csv")).iter().all(|g| g.detected_count() == 0));

    let (_, votes, _) = run(Some("0.0"));
    let r = rows(&votes);
    assert!(r.iter().any(|r| r.2));
    for (f, valid, alert) in r {
        assert_eq!(alert, f > 0.0 && valid >= 3);
    }
}

#[test]
fn fpm_rejects_malformed_grid() {
    let dir = scratch();
    let bad = dir.join("grid.csv");
    fs::write(&bad, "satellite,station,epoch,state,probability\nG01,st01,0,maybe,0.5\n").unwrap();
    let out = tidd(&["fpm", "--out-dir", s(&dir), "--grid", s(&bad)]);
    assert_eq!(out.status.code(), Some(2));
}

fn eval_with(build: impl Fn(&mut DetectionGrid, &[tidd::ingest::LabelInterval])) -> Vec<Vec<String>> {
    let src = trained();
    let labels = parse_label_csv(fs::File::open(src.join("labels.csv")).unwrap()).unwrap();
    let mut grids = read_grid(&src.join("grid.csv"));
    for g in &mut grids {
        build(g, &labels);
    }
    let dir = scratch();
    for name in ["grid.csv", "grid_fpm.csv"] {
        write_grids(fs::File::create(dir.join(name)).unwrap(), &grids).unwrap();
    }
    fs::copy(src.join("labels.csv"), dir.join("labels.csv")).unwrap();
    let out = ok(&["eval", "--out-dir", s(&dir)]);
    let table = String::from_utf8(out.stdout).unwrap();
    assert!(table.contains("validation - recall"));
    assert!(table.contains("validation (false positive mitigation) - F1 score"));
    metrics(&dir)
}

#[test]
fn eval_perfect_predictions() {
    let rows = eval_with(|g, labels| {
        for st in 0..g.stations.len() {
            let station = g.stations[st].clone();
            let mine: Vec<_> = labels.iter().filter(|l| l.applies_to(&station, &g.satellite_id)).collect();
            let truth = truth_on_axis(g, mine, 60);
            for t in 0..g.steps {
                let hit = truth.intervals().iter().any(|&(a, b)| (a..b).contains(&(t as i64)));
                g.set(st, t, if hit { Cell::Detected } else { Cell::Normal });
            }
        }
    });
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0][0], "validation");
    assert_eq!(rows[1][0], "validation (false positive mitigation)");
    for r in rows {
        assert_eq!(&r[4..7], ["1.000000", "1.000000", "1.000000"], "{r:?}");
        assert_eq!(r[7], "false");
    }
}

#[test]
fn eval_empty_predictions() {
    let rows = eval_with(|g, _| {
        for c in g.cells.iter_mut().filter(|c| **c == Cell::Detected) {
            *c = Cell::Normal;
        }
    });
    for r in rows {
        assert_eq!(r[1], "0");
        assert_eq!(r[5], "0.000000", "{r:?}");
    }
}

#[test]
fn stages_compose_to_run_e2e() {
    let whole = scratch();
    ok(&with_small(&["run-e2e", "--out-dir", s(&whole), "--seed", "3"]));

    let parts = scratch();
    let train = parts.join("train");
    let validation = parts.join("validation");
    let vseed = validation_seed(3).to_string();
    ok(&with_small(&["synth", "--out-dir", s(&train), "--seed", "3"]));
    ok(&with_small(&["train", "--out-dir", s(&train), "--seed", "3"]));
    ok(&with_small(&["synth", "--out-dir", s(&validation), "--seed", &vseed]));
    let model = train.join("model.tidm");
    ok(&with_small(&["detect", "--out-dir", s(&validation), "--checkpoint", s(&model)]));
    ok(&with_small(&["fpm", "--out-dir", s(&validation)]));
    ok(&with_small(&["eval", "--out-dir", s(&validation)]));

    for f in [
        "train/labels.csv",
        "train/model.tidm",
        "train/history.csv",
        "train/manifest.csv",
        "validation/labels.csv",
        "validation/grid.csv",
        "validation/grid_fpm.csv",
        "validation/votes.csv",
        "validation/metrics.csv",
    ] {
        assert_eq!(fs::read(whole.join(f)).unwrap(), fs::read(parts.join(f)).unwrap(), "{f} differs");
    }
}
