use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_grasp-pf");

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures").join(name)
}

fn grasp_pf(args: &[&str]) -> Output {
    Command::new(BIN).args(args).env("GRASP_PF_LOG", "error").output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn empty_scene(dir: &Path) -> PathBuf {
    let path = dir.join("empty.scene");
    fs::write(&path, r#"{"table_height": 0.0, "objects": [], "events": []}"#).unwrap();
    path
}

/// Pixel values of a binary PGM, 8 or 16 bit.
fn read_pgm(path: &Path) -> (usize, usize, Vec<u16>) {
    let bytes = fs::read(path).unwrap();
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        fields.push(String::from_utf8(bytes[start..pos].to_vec()).unwrap());
    }
    assert_eq!(fields[0], "P5");
    let (w, h, max): (usize, usize, u32) = (fields[1].parse().unwrap(), fields[2].parse().unwrap(), fields[3].parse().unwrap());
    let data = &bytes[pos + 1..];
    let values: Vec<u16> = if max > 255 {
        data.chunks(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect()
    } else {
        data.iter().map(|&b| b as u16).collect()
    };
    assert_eq!(values.len(), w * h);
    (w, h, values)
}

// Ids are stored offset by 2, so the table is 0, background 1, objects >= 2.
fn object_pixels(path: &Path) -> usize {
    read_pgm(path).2.iter().filter(|&&v| v >= 2).count()
}

#[test]
fn render_writes_depth_and_ids() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("clutter");
    let r = grasp_pf(&["render", "--scene", s(&fixture("bench_clutter_12.scene")), "--out", s(&out)]);
    assert_eq!(code(&r), 0, "{}", String::from_utf8_lossy(&r.stderr));
    assert!(object_pixels(&out.join("object_id.pgm")) > 0);
    let (w, h, depth) = read_pgm(&out.join("depth.pgm"));
    assert_eq!((w, h), (128, 128));
    assert!(depth.iter().all(|&d| d > 0), "table fills the default view");

    let out = dir.path().join("empty");
    let r = grasp_pf(&["render", "--scene", s(&empty_scene(dir.path())), "--out", s(&out)]);
    assert_eq!(code(&r), 0);
    assert_eq!(object_pixels(&out.join("object_id.pgm")), 0);
}

#[test]
fn configuration_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x");
    let scene = fixture("single_box.scene");
    let bad_path = grasp_pf(&["render", "--scene", "/no/such/scene", "--out", s(&out)]);
    assert_eq!(code(&bad_path), 2);
    assert!(String::from_utf8_lossy(&bad_path.stderr).contains("/no/such/scene"));

    let garbage = dir.path().join("garbage.scene");
    fs::write(&garbage, "{ not json").unwrap();
    assert_eq!(code(&grasp_pf(&["render", "--scene", s(&garbage), "--out", s(&out)])), 2);

    let bad_euler = grasp_pf(&["label", "--scene", s(&scene), "--euler", "0,1.2,0", "--out", s(&out)]);
    assert_eq!(code(&bad_euler), 2);
    assert!(!out.join("label_level1.pgm").exists());
    assert_eq!(code(&grasp_pf(&["label", "--scene", s(&scene), "--depth", "0.5", "--out", s(&out)])), 2);

    for p in ["filter.nope=1", "filter.m=many", "approach_speed=-1", "no_equals"] {
        let r = grasp_pf(&["run", "--scene", s(&scene), "--params", p, "--out", s(&out)]);
        assert_eq!(code(&r), 2, "{p}");
    }
    assert_eq!(code(&grasp_pf(&["run", "--scene", s(&scene), "--mode", "sideways", "--out", s(&out)])), 2);
}

#[test]
fn label_images() {
    let dir = tempfile::tempdir().unwrap();
    let scene = fixture("single_box.scene");
    let label = |scene: &Path, out: &Path| {
        let r = grasp_pf(&["label", "--scene", s(scene), "--euler", "0,0,0", "--depth", "0.02", "--out", s(out)]);
        assert_eq!(code(&r), 0, "{}", String::from_utf8_lossy(&r.stderr));
    };
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    label(&scene, &a);
    label(&scene, &b);
    for name in ["level1", "level2", "level3", "object", "free_narrow", "free_wide"] {
        let file = format!("label_{name}.pgm");
        assert_eq!(fs::read(a.join(&file)).unwrap(), fs::read(b.join(&file)).unwrap(), "{file}");
    }
    // The box's narrow side runs along x, which is the closing axis at alpha = 0.
    let (_, _, level1) = read_pgm(&a.join("label_level1.pgm"));
    let (_, _, object) = read_pgm(&a.join("label_object.pgm"));
    assert!(level1.iter().any(|&v| v > 0));
    assert!(level1.iter().zip(&object).all(|(&l, &o)| l == 0 || o > 0), "force closure only on the object");

    let e = dir.path().join("empty");
    label(&empty_scene(dir.path()), &e);
    for name in ["level1", "level2", "level3", "object"] {
        assert!(read_pgm(&e.join(format!("label_{name}.pgm"))).2.iter().all(|&v| v == 0), "{name}");
    }
}

#[test]
fn run_episode_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let scene = fixture("single_box.scene");
    let run = |out: &Path, extra: &[&str]| {
        let mut args = vec!["run", "--scene", s(&scene), "--seed", "3", "--out", s(out)];
        args.extend_from_slice(extra);
        grasp_pf(&args)
    };
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let r = run(&a, &[]);
    assert_eq!(code(&r), 0, "{}", String::from_utf8_lossy(&r.stderr));
    let result: serde_json::Value = serde_json::from_str(&fs::read_to_string(a.join("result.json")).unwrap()).unwrap();
    assert_eq!(result["success"], true);
    assert_eq!(result["outcome"], "executed");
    assert_eq!(result["seed"], 3);
    let trace = fs::read_to_string(a.join("trace.jsonl")).unwrap();
    assert_eq!(trace.lines().count() as u64, result["steps"].as_u64().unwrap());
    for line in trace.lines() {
        let rec: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(rec["camera"].is_array() && rec.get("best_quality").is_some());
    }

    assert_eq!(code(&run(&b, &[])), 0);
    assert_eq!(fs::read(a.join("trace.jsonl")).unwrap(), fs::read(b.join("trace.jsonl")).unwrap());
    assert_eq!(fs::read(a.join("result.json")).unwrap(), fs::read(b.join("result.json")).unwrap());

    let t = dir.path().join("t");
    let timeout = run(&t, &["--params", "max_steps=1"]);
    assert_eq!(code(&timeout), 3);
    let result: serde_json::Value = serde_json::from_str(&fs::read_to_string(t.join("result.json")).unwrap()).unwrap();
    assert_eq!(result["outcome"], "timeout");

    let e = dir.path().join("e");
    let cleared = grasp_pf(&["run", "--scene", s(&empty_scene(dir.path())), "--out", s(&e)]);
    assert_eq!(code(&cleared), 0);
    assert!(String::from_utf8_lossy(&cleared.stdout).contains("cleared"));
}

#[test]
fn bench_tables() {
    let dir = tempfile::tempdir().unwrap();
    let scene = fixture("single_box.scene");
    let bench = |out: &Path, jobs: &str, episodes: &str, mode: &str| {
        let r = grasp_pf(&["--jobs", jobs, "bench", "--scene", s(&scene), "--mode", mode, "--episodes", episodes, "--seed", "5", "--out", s(out)]);
        assert_eq!(code(&r), 0, "{}", String::from_utf8_lossy(&r.stderr));
        r
    };
    let one = dir.path().join("one");
    let r = bench(&one, "1", "1", "ol");
    let csv = fs::read_to_string(one.join("summary.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
    assert!(csv.lines().nth(1).unwrap().starts_with("open_loop,1,"));
    assert_eq!(String::from_utf8_lossy(&r.stdout).lines().count(), 2);
    let episodes = fs::read_to_string(one.join("episodes.csv")).unwrap();
    assert!(episodes.lines().nth(1).unwrap().starts_with("0,open_loop,5,"), "seed recorded per episode");

    let none = dir.path().join("none");
    bench(&none, "1", "0", "cl");
    assert_eq!(fs::read_to_string(none.join("summary.csv")).unwrap(), "mode,episodes,successes,rate,ci_low,ci_high\n");

    // Worker count never changes results.
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    bench(&a, "1", "2", "sampling_ol,ol");
    bench(&b, "3", "2", "sampling_ol,ol");
    for f in ["summary.csv", "episodes.csv", "summary.txt"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}
