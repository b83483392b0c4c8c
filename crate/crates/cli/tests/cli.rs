//! End-to-end checks of the `pyrstyle` binary.

#[path = "../src/y4m.rs"]
#[allow(dead_code)]
mod y4m;

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::{Arc, OnceLock};

use pyrstyle::bundle::ModelBundle;
use pyrstyle::extractor::{Extractor, VggVariant};
use pyrstyle::training::{train_drafting_with, train_revision, Stage, TrainingConfig};
use pyrstyle::Image;
use tempfile::TempDir;

struct Fixture {
    dir: TempDir,
    bundle: PathBuf,
}

/// A two-level bundle trained for one drafting step; revision levels are
/// untrained. Shared by every test in this file.
fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let content = dir.path().join("content");
        std::fs::create_dir_all(&content).unwrap();
        for i in 0..2 {
            gray(96, 112, i as f32)
                .save(content.join(format!("{}.png", i)))
                .unwrap();
        }
        let style = dir.path().join("style.png");
        Image::from_fn(64, 64, |c, y, x| ((x + 2 * y + 7 * c) % 11) as f32 / 10.0)
            .save(&style)
            .unwrap();
        let cfg = |stage, res, iterations| TrainingConfig {
            content_dir: content.clone(),
            style_image: style.clone(),
            stage,
            resolution: Some(res),
            iterations,
            batch_size: 1,
            checkpoint_every: 0,
            ..Default::default()
        };
        let ex = Arc::new(Extractor::random(VggVariant::Vgg16, 1));
        let draft = train_drafting_with(&cfg(Stage::Draft, 64, 1), ex).unwrap().bundle;
        let one = train_revision(&cfg(Stage::Revision(1), 128, 0), &draft, 1)
            .unwrap()
            .bundle;
        let two = train_revision(&cfg(Stage::Revision(2), 256, 0), &one, 2)
            .unwrap()
            .bundle;
        let bundle = dir.path().join("two.bundle");
        two.save(&bundle).unwrap();
        Fixture { dir, bundle }
    })
}

/// Neutral-colour image: survives the YUV round trip without loss.
fn gray(h: usize, w: usize, phase: f32) -> Image {
    Image::from_fn(h, w, |_, y, x| {
        let v = ((x as f32 * 0.11 + phase).sin() * (y as f32 * 0.07).cos()) * 0.45 + 0.5;
        (v * 255.0).round() / 255.0
    })
}

fn pyrstyle(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pyrstyle"))
        .args(args)
        .env("PYRSTYLE_LOG", "warn")
        .output()
        .unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_y4m(path: &Path, frames: &[Image]) {
    let (h, w) = frames[0].dims();
    let header = y4m::Header::new(w, h, y4m::Chroma::C444, vec!["F25:1".into()]);
    let mut wr = y4m::Writer::new(Vec::new(), header).unwrap();
    for f in frames {
        wr.write_frame(f).unwrap();
    }
    std::fs::write(path, wr.finish().unwrap()).unwrap();
}

fn read_y4m(path: &Path) -> Vec<Image> {
    let file = std::io::BufReader::new(std::fs::File::open(path).unwrap());
    let mut r = y4m::Reader::new(file).unwrap();
    let mut out = Vec::new();
    while let Some(f) = r.next_frame().unwrap() {
        out.push(f);
    }
    out
}

#[test]
fn stylize_all_levels_and_draft_only() {
    let f = fixture();
    let content = f.dir.path().join("square.png");
    gray(64, 64, 0.3).save(&content).unwrap();
    for levels in ["0", "2"] {
        let out = f.dir.path().join(format!("square-{}.png", levels));
        let o = pyrstyle(&[
            "stylize",
            "--bundle",
            s(&f.bundle),
            "--content",
            s(&content),
            "--out",
            s(&out),
            "--levels",
            levels,
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        assert_eq!(Image::load(&out).unwrap().dims(), (64, 64));
        assert!(stdout(&o).contains("stage=draft"));
    }
}

#[test]
fn stylize_pads_odd_sizes_and_crops_back() {
    let f = fixture();
    let content = f.dir.path().join("odd.png");
    gray(70, 90, 1.0).save(&content).unwrap();
    let out = f.dir.path().join("odd-out.png");
    let o = pyrstyle(&[
        "stylize",
        "--bundle",
        s(&f.bundle),
        "--content",
        s(&content),
        "--out",
        s(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("padded 90x70 to 128x128"), "{}", stdout(&o));
    assert_eq!(Image::load(&out).unwrap().dims(), (70, 90));
}

#[test]
fn excess_levels_is_a_config_error() {
    let f = fixture();
    let content = f.dir.path().join("lv.png");
    gray(64, 64, 0.0).save(&content).unwrap();
    let out = f.dir.path().join("lv-out.png");
    let o = pyrstyle(&[
        "stylize",
        "--bundle",
        s(&f.bundle),
        "--content",
        s(&content),
        "--out",
        s(&out),
        "--levels",
        "3",
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("available: 0..=2"), "{}", stderr(&o));
    assert!(!out.exists());
}

#[test]
fn exit_codes_for_usage_and_io() {
    assert_eq!(pyrstyle(&["stylize"]).status.code(), Some(1));
    assert_eq!(pyrstyle(&["no-such-command"]).status.code(), Some(1));
    let o = pyrstyle(&[
        "stylize",
        "--bundle",
        "/nonexistent.bundle",
        "--content",
        "/x.png",
        "--out",
        "/tmp/never.png",
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(pyrstyle(&["--help"]).status.success());
}

#[test]
fn single_frame_video_matches_still_image() {
    let f = fixture();
    let frame = gray(64, 80, 0.5);
    let png = f.dir.path().join("frame.png");
    frame.save(&png).unwrap();
    let still = f.dir.path().join("frame-out.png");
    let o = pyrstyle(&[
        "stylize",
        "--bundle",
        s(&f.bundle),
        "--content",
        s(&png),
        "--out",
        s(&still),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));

    let input = f.dir.path().join("one.y4m");
    write_y4m(&input, &[frame]);
    let output = f.dir.path().join("one-out.y4m");
    let o = pyrstyle(&[
        "video",
        "--bundle",
        s(&f.bundle),
        "--in",
        s(&input),
        "--out",
        s(&output),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));

    let bytes = std::fs::read(&output).unwrap();
    let payload_at = bytes.windows(6).position(|w| w == b"FRAME\n").unwrap() + 6;
    let header = y4m::Header::new(80, 64, y4m::Chroma::C444, vec![]);
    let expected = y4m::encode_rgb8(&header, &Image::load(&still).unwrap().to_rgb8());
    assert_eq!(&bytes[payload_at..], &expected[..]);
}

#[test]
fn identical_frames_give_identical_output() {
    let f = fixture();
    let input = f.dir.path().join("ten.y4m");
    write_y4m(&input, &vec![gray(48, 48, 2.0); 10]);
    let mut runs = Vec::new();
    for (name, extra) in [("seq", None), ("pipe", Some("--parallel"))] {
        let output = f.dir.path().join(format!("ten-{}.y4m", name));
        let mut args = vec![
            "video",
            "--bundle",
            s(&f.bundle),
            "--in",
            s(&input),
            "--out",
            s(&output),
            "--levels",
            "1",
        ];
        args.extend(extra);
        let o = pyrstyle(&args);
        assert!(o.status.success(), "{}", stderr(&o));
        let frames = read_y4m(&output);
        assert_eq!(frames.len(), 10);
        assert!(frames.iter().all(|fr| fr == &frames[0]));
        runs.push(std::fs::read(&output).unwrap());
    }
    assert_eq!(runs[0], runs[1]);
}

#[test]
fn corrupt_frame_is_reported_by_index() {
    let f = fixture();
    let input = f.dir.path().join("bad.y4m");
    write_y4m(&input, &vec![gray(32, 32, 0.0); 4]);
    let mut bytes = std::fs::read(&input).unwrap();
    bytes.truncate(bytes.len() - 100);
    std::fs::write(&input, bytes).unwrap();
    for extra in [None, Some("--parallel")] {
        let output = f.dir.path().join("bad-out.y4m");
        let mut args = vec![
            "video",
            "--bundle",
            s(&f.bundle),
            "--in",
            s(&input),
            "--out",
            s(&output),
        ];
        args.extend(extra);
        let o = pyrstyle(&args);
        assert_eq!(o.status.code(), Some(2));
        assert!(stderr(&o).contains("frame 3"), "{}", stderr(&o));
        assert!(!output.exists());
    }
}

#[test]
fn train_draft_from_flags_writes_bundle_and_log() {
    let f = fixture();
    let ex = f.dir.path().join("ex.safetensors");
    let o = pyrstyle(&["init-extractor", "--out", s(&ex), "--variant", "vgg16", "--seed", "4"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = f.dir.path().join("cli-draft.bundle");
    let log = f.dir.path().join("cli-draft.log");
    let content = f.dir.path().join("content");
    let style = f.dir.path().join("style.png");
    let o = pyrstyle(&[
        "train-draft",
        "--out",
        s(&out),
        "--content-dir",
        s(&content),
        "--style",
        s(&style),
        "--extractor",
        s(&ex),
        "--resolution",
        "64",
        "--iterations",
        "2",
        "--batch-size",
        "1",
        "--checkpoint-every",
        "0",
        "--log-path",
        s(&log),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let b = ModelBundle::load(&out).unwrap();
    assert_eq!(b.levels(), 0);
    let text = std::fs::read_to_string(&log).unwrap();
    assert!(
        text.lines().any(|l| l.starts_with("step=2 component=total value=")),
        "{}",
        text
    );
}
