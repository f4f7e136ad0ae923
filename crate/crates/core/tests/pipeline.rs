use std::fs;
use std::path::Path;

use facedyn::align::StabilizationMode;
use facedyn::features::WindowSpec;
use facedyn::ml::{FeatureMatrix, META_COLUMNS};
use facedyn::pipeline::{
    features_path, read_features, render_report, report, run_pipeline, write_fold_reports,
    RunConfig,
};
use facedyn::synth::{write_fixture, FixtureSpec};
use facedyn::Error;

fn small_config(root: &Path, modes: Vec<StabilizationMode>) -> RunConfig {
    let layout = write_fixture(
        &root.join("data"),
        &FixtureSpec {
            participants: 2,
            frames: 1200,
            ..Default::default()
        },
    )
    .unwrap();
    RunConfig {
        keypoints_dir: layout.keypoints_dir,
        events_dir: layout.events_dir,
        output_dir: root.join("out"),
        stabilization: modes,
        window: WindowSpec {
            length_s: 10.0,
            overlap: 0.5,
            fps: 60.0,
        },
        ..Default::default()
    }
}

fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((
                    p.strip_prefix(dir).unwrap().display().to_string(),
                    fs::read(&p).unwrap(),
                ));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn fixture_run_has_expected_shape_and_is_idempotent() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), StabilizationMode::ALL.to_vec());
    let first = run_pipeline(&cfg).unwrap();
    // 2 participants x 3 conditions, windows of 600 samples with hop 300 over 1200 frames.
    let windows = (1200 - 600) / 300 + 1;
    assert_eq!(first.outputs.len(), 3);
    for (path, rows) in &first.outputs {
        assert_eq!(*rows, 2 * 3 * windows, "{}", path.display());
    }
    let header = fs::read_to_string(features_path(&cfg, StabilizationMode::Global)).unwrap();
    let header = header.lines().next().unwrap();
    let n_cols = header.split(',').count();
    assert_eq!(n_cols, META_COLUMNS.len() + 12 * 3 * 9 + 11 * 9 + 11 + 6);
    // Perf cells are empty in windows without the relevant events, so only
    // the pose columns are guaranteed complete.
    let pose = read_features(
        &features_path(&cfg, StabilizationMode::Global),
        &"pose".parse().unwrap(),
    )
    .unwrap();
    assert_eq!(pose.n_rows(), 2 * 3 * windows);
    assert_eq!(pose.n_cols(), 12 * 3 * 9 + 11 * 9 + 11);
    let all = FeatureMatrix::read_csv(&features_path(&cfg, StabilizationMode::Global)).unwrap();
    assert!(all.n_rows() <= pose.n_rows());
    assert_eq!(first.computed, 3 * 6);

    let before = snapshot(&cfg.output_dir);
    let second = run_pipeline(&cfg).unwrap();
    assert_eq!(second.computed, 0);
    assert_eq!(second.cache_hits, 3 * 6);
    assert_eq!(snapshot(&cfg.output_dir), before);

    // A fresh output directory recomputes to the same bytes.
    let fresh = RunConfig {
        output_dir: tmp.path().join("out2"),
        ..cfg.clone()
    };
    run_pipeline(&fresh).unwrap();
    for mode in StabilizationMode::ALL {
        assert_eq!(
            fs::read(features_path(&cfg, mode)).unwrap(),
            fs::read(features_path(&fresh, mode)).unwrap()
        );
    }
}

#[test]
fn config_change_invalidates_cache() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = small_config(tmp.path(), vec![StabilizationMode::Global]);
    cfg.rqa_channels = vec!["blink".into()];
    run_pipeline(&cfg).unwrap();
    cfg.rqa.radius_frac = 0.25;
    let again = run_pipeline(&cfg).unwrap();
    assert_eq!(again.cache_hits, 0);
    assert_eq!(again.computed, 6);
}

#[test]
fn missing_input_dir_is_named() {
    let cfg = RunConfig {
        keypoints_dir: "/nonexistent/keypoints".into(),
        ..Default::default()
    };
    let err = run_pipeline(&cfg).unwrap_err();
    assert!(matches!(err, Error::MissingPath(_)));
    assert!(err.to_string().contains("/nonexistent/keypoints"));
}

#[test]
fn stage_errors_name_stage_file_and_frame() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = small_config(tmp.path(), vec![StabilizationMode::Global]);
    cfg.rqa_channels.clear();
    let bad = cfg
        .keypoints_dir
        .join("P02")
        .join("experimental_high.jsonl");
    let text = fs::read_to_string(&bad).unwrap();
    let mut lines: Vec<&str> = text.lines().collect();
    let dup = lines[5];
    lines.insert(6, dup);
    fs::write(&bad, lines.join("\n")).unwrap();
    let err = run_pipeline(&cfg).unwrap_err();
    let msg = err.to_string();
    assert!(msg.starts_with("ingest failed"), "{msg}");
    assert!(msg.contains("experimental_high.jsonl"), "{msg}");
    assert!(msg.contains("frame 5"), "{msg}");
}

#[test]
fn failed_mode_leaves_partial_marker() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = small_config(tmp.path(), vec![StabilizationMode::Global]);
    cfg.rqa_channels.clear();
    // A window longer than the recordings fails in the features stage.
    cfg.window.length_s = 30.0;
    let err = run_pipeline(&cfg).unwrap_err();
    assert!(err.to_string().starts_with("features failed"), "{err}");
    let path = features_path(&cfg, StabilizationMode::Global);
    assert!(!path.exists());
    assert!(path.with_file_name("features_global.csv.partial").exists());
}

#[test]
fn report_formats_folds() {
    let tmp = tempfile::tempdir().unwrap();
    let r = |p: &[usize]| facedyn::ml::eval_metrics(p, &[0, 1, 2, 0, 1, 2]).unwrap();
    let single =
        write_fold_reports(tmp.path(), "one", &[("a".into(), r(&[0, 1, 2, 0, 1, 2]))]).unwrap();
    let lines = report(&single[..1]).unwrap();
    let ba = lines
        .iter()
        .find(|l| l.metric == "balanced_accuracy")
        .unwrap();
    assert_eq!(ba.stats.n, 1);
    assert_eq!(ba.stats.sd, 0.0);
    assert_eq!(ba.stats.percent(), "100.0% ± 0.0%");

    let folds: Vec<(String, _)> = (0..15)
        .map(|k| {
            (
                format!("f{k}"),
                r(if k % 3 == 0 {
                    &[0, 1, 2, 0, 1, 1]
                } else {
                    &[0, 1, 2, 0, 1, 2]
                }),
            )
        })
        .collect();
    let many = write_fold_reports(tmp.path(), "many", &folds).unwrap();
    assert_eq!(many.len(), 16);
    let lines = report(&many[..1]).unwrap();
    let ba = lines
        .iter()
        .find(|l| l.metric == "balanced_accuracy")
        .unwrap();
    assert_eq!(ba.stats.n, 15);
    let values: Vec<f64> = folds.iter().map(|(_, r)| r.balanced_accuracy).collect();
    let mean = values.iter().sum::<f64>() / 15.0;
    let sd = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 14.0).sqrt();
    assert!((ba.stats.mean - mean).abs() < 1e-12 && (ba.stats.sd - sd).abs() < 1e-12);
    let table = render_report(&lines).unwrap();
    assert!(table.starts_with("source,metric,n,mean,sd,summary\n"));
    assert!(table.contains(&format!("{:.1}% ± {:.1}%", 100.0 * mean, 100.0 * sd)));
}
