use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use ppgrasp::posefile::{read_poses, HEADER};
use ppgrasp::scene::load_scene;

fn ppgrasp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ppgrasp"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited")
}

fn p(path: &Path) -> String {
    path.display().to_string()
}

fn gen(dir: &Path, num: &str) {
    let o = ppgrasp(&["gen", "--num", num, "--seed", "5", "--out-dir", &p(dir)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let o = ppgrasp(&["solve", "--scenes-dri", "x"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("--scenes-dir"));
}

#[test]
fn empty_scene_dir_is_a_domain_error() {
    let d = tempfile::tempdir().unwrap();
    let out = d.path().join("out");
    let o = ppgrasp(&["solve", "--scenes-dir", &p(d.path()), "--out", &p(&out)]);
    assert_eq!(code(&o), 1);
}

#[test]
fn held_lock_is_reported() {
    let d = tempfile::tempdir().unwrap();
    fs::write(d.path().join(".ppgrasp.lock"), "").unwrap();
    let o = ppgrasp(&["gen", "--num", "1", "--out-dir", &p(d.path())]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("in use"));
}

#[test]
fn selftest_and_small_gradcheck_succeed() {
    let o = ppgrasp(&["selftest"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    assert!(!String::from_utf8_lossy(&o.stdout).contains("FAIL"));
    let o = ppgrasp(&["gradcheck", "--trials", "5"]);
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stdout).starts_with("trial,param,analytic,numeric,rel_error"));
}

#[test]
fn noiseless_solve_recovers_labels() {
    let d = tempfile::tempdir().unwrap();
    let scenes = d.path().join("scenes");
    let poses = d.path().join("poses");
    gen(&scenes, "3");
    let o = ppgrasp(&["solve", "--scenes-dir", &p(&scenes), "--out", &p(&poses)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let mut checked = 0;
    for i in 0..3 {
        let s = load_scene(&scenes.join(format!("scene_{i:04}.scene"))).unwrap();
        let text = fs::read_to_string(poses.join(format!("scene_{i:04}.poses"))).unwrap();
        for r in read_poses(&text).unwrap() {
            let gt = s.grasp_in_camera(r.grasp);
            assert!(r.pose.translation_distance(&gt) < 1e-6);
            assert!(r.pose.rotation_distance(&gt) < 1e-6);
            checked += 1;
        }
    }
    assert!(checked > 0);
}

#[test]
fn noisy_solve_keeps_the_file_schema() {
    let d = tempfile::tempdir().unwrap();
    let scenes = d.path().join("scenes");
    let poses = d.path().join("poses");
    gen(&scenes, "2");
    let o = ppgrasp(&["solve", "--scenes-dir", &p(&scenes), "--noise-px", "2", "--out", &p(&poses)]);
    assert_eq!(code(&o), 0);
    for i in 0..2 {
        let text = fs::read_to_string(poses.join(format!("scene_{i:04}.poses"))).unwrap();
        assert_eq!(text.lines().next(), Some(HEADER));
        for line in text.lines().skip(1) {
            assert_eq!(line.split_whitespace().count(), 11);
        }
        read_poses(&text).unwrap();
    }
}

#[test]
fn config_typo_gets_a_suggestion() {
    let d = tempfile::tempdir().unwrap();
    let cfg = d.path().join("run.cfg");
    fs::write(&cfg, "[solver]\nmax_iter = 50\n").unwrap();
    let o = ppgrasp(&["selftest", "--config", &p(&cfg)]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("solver.max_iters"));
}

#[test]
fn eval_prints_the_grid() {
    let d = tempfile::tempdir().unwrap();
    let scenes = d.path().join("scenes");
    let poses = d.path().join("poses");
    let report = d.path().join("report");
    gen(&scenes, "2");
    assert_eq!(code(&ppgrasp(&["solve", "--scenes-dir", &p(&scenes), "--out", &p(&poses)])), 0);
    let o = ppgrasp(&[
        "eval", "--pred-dir", &p(&poses), "--scenes-dir", &p(&scenes), "--thresholds", "1:10,5:45", "--out", &p(&report),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(fs::read_dir(&report).unwrap().count() >= 2);
}
