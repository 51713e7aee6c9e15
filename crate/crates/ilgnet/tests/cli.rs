//! End-to-end behavior of the binary: exit codes, report formats,
//! determinism, and the per-command error contracts.

mod common;

use std::fs;
use std::path::Path;

use common::{
    expect_exit, kv, kv_f64, kv_usize, make_corpus_and_split, naive_mean, run_cli, run_cli_env,
    stderr_of, stdout_of,
};
use ilgnet::ava::parse_metadata;
use ilgnet::checkpoint;
use ilgnet::graph::{assemble, ArchConfig, Variant};

/// `image_id,c1..c10` line whose mean is `tenths / 10` (10 votes split over
/// two adjacent buckets).
fn metadata_line(id: &str, tenths: u32) -> String {
    assert!((10..=100).contains(&tenths));
    let lo = (tenths / 10) as usize;
    let hi_votes = tenths % 10;
    let mut counts = [0u32; 10];
    counts[lo - 1] = 10 - hi_votes;
    if hi_votes > 0 {
        counts[lo] = hi_votes;
    }
    let fields: Vec<String> = counts.iter().map(|c| c.to_string()).collect();
    format!("{id},{}", fields.join(","))
}

fn write_config(path: &Path, extra: &str) {
    let base = "width_multiplier = 0.25\ninput_side = 64\nbatch_size = 8\n";
    fs::write(path, format!("{base}{extra}")).unwrap();
}

#[test]
fn help_and_version_exit_zero() {
    let help = run_cli(&["--help"]);
    expect_exit(&help, 0, "--help");
    assert!(stdout_of(&help).contains("Usage"));
    let version = run_cli(&["--version"]);
    expect_exit(&version, 0, "--version");
}

#[test]
fn missing_required_flag_is_a_usage_error() {
    let out = run_cli(&["split", "--protocol", "ava1", "--out", "/tmp/x.csv"]);
    expect_exit(&out, 1, "split without --metadata");
    assert!(
        stderr_of(&out).to_lowercase().contains("usage"),
        "{}",
        stderr_of(&out)
    );
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    expect_exit(&run_cli(&["transmogrify"]), 1, "unknown subcommand");
}

#[test]
fn ava1_without_test_count_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let metadata = dir.path().join("m.csv");
    fs::write(
        &metadata,
        metadata_line("a", 70) + "\n" + &metadata_line("b", 30) + "\n",
    )
    .unwrap();
    let out = run_cli(&[
        "split",
        "--metadata",
        metadata.to_str().unwrap(),
        "--protocol",
        "ava1",
        "--out",
        dir.path().join("s.csv").to_str().unwrap(),
    ]);
    expect_exit(&out, 1, "ava1 without --test-count");
}

#[test]
fn malformed_metadata_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let metadata = dir.path().join("m.csv");
    fs::write(&metadata, "a,1,2,3\n").unwrap();
    let out = run_cli(&[
        "split",
        "--metadata",
        metadata.to_str().unwrap(),
        "--protocol",
        "ava2",
        "--out",
        dir.path().join("s.csv").to_str().unwrap(),
    ]);
    expect_exit(&out, 2, "malformed metadata");
    assert!(stderr_of(&out).contains("line 1"), "{}", stderr_of(&out));
}

#[test]
fn delta_shrinks_train_by_exactly_the_ambiguous_records() {
    let dir = tempfile::tempdir().unwrap();
    let metadata = dir.path().join("m.csv");
    // Means 3.0, 3.2, ..., 7.8: several fall inside |mean - 5| <= 1.
    let lines: Vec<String> = (0..25)
        .map(|i| metadata_line(&format!("r{i:02}"), 30 + 2 * i))
        .collect();
    fs::write(&metadata, lines.join("\n") + "\n").unwrap();

    let run_split = |delta: &str, out: &str| {
        let out_path = dir.path().join(out);
        let output = run_cli(&[
            "split",
            "--metadata",
            metadata.to_str().unwrap(),
            "--protocol",
            "ava1",
            "--delta",
            delta,
            "--seed",
            "9",
            "--test-count",
            "5",
            "--out",
            out_path.to_str().unwrap(),
        ]);
        expect_exit(&output, 0, "split");
        (kv(&stdout_of(&output)), out_path)
    };
    let (strict, strict_path) = run_split("0", "s0.csv");
    let (relaxed, _) = run_split("1", "s1.csv");

    // Brute-force count of the records delta = 1 newly drops: non-test,
    // inside the margin, but not already gone at delta = 0 (mean exactly 5).
    let records = parse_metadata(fs::read(&metadata).unwrap().as_slice()).unwrap();
    let strict_csv = fs::read_to_string(&strict_path).unwrap();
    let test_ids: Vec<&str> = strict_csv
        .lines()
        .filter(|l| l.contains(",test,"))
        .map(|l| l.split(',').next().unwrap())
        .collect();
    let ambiguous = records
        .iter()
        .filter(|r| !test_ids.contains(&r.image_id.as_str()))
        .filter(|r| {
            let gap = (naive_mean(&r.counts) - 5.0).abs();
            gap > 0.0 && gap <= 1.0
        })
        .count();
    assert!(ambiguous > 0, "fixture should straddle the threshold");

    let train = |m: &std::collections::HashMap<String, String>| {
        kv_usize(m, "train_good") + kv_usize(m, "train_bad")
    };
    assert_eq!(train(&relaxed), train(&strict) - ambiguous);
    assert_eq!(
        kv_usize(&strict, "test_good") + kv_usize(&strict, "test_bad"),
        5
    );
    assert_eq!(
        kv_usize(&relaxed, "test_good") + kv_usize(&relaxed, "test_bad"),
        5,
        "test side must ignore delta"
    );
}

#[test]
fn decile_split_reports_one_tenth_per_class() {
    let dir = tempfile::tempdir().unwrap();
    let metadata = dir.path().join("m.csv");
    let lines: Vec<String> = (0..1000)
        .map(|i| metadata_line(&format!("r{i:04}"), 10 + (i * 90) / 1000))
        .collect();
    fs::write(&metadata, lines.join("\n") + "\n").unwrap();
    let out = run_cli(&[
        "split",
        "--metadata",
        metadata.to_str().unwrap(),
        "--protocol",
        "ava2",
        "--out",
        dir.path().join("s.csv").to_str().unwrap(),
    ]);
    expect_exit(&out, 0, "ava2 split");
    let report = kv(&stdout_of(&out));
    assert_eq!(kv_usize(&report, "good"), 100);
    assert_eq!(kv_usize(&report, "bad"), 100);
    let total: usize = ["train_good", "train_bad", "test_good", "test_bad"]
        .iter()
        .map(|k| kv_usize(&report, k))
        .sum();
    assert_eq!(total, 200);
}

#[test]
fn train_writes_checkpoint_and_interval_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let (images, split) = make_corpus_and_split(dir.path(), 16, 4);
    let config = dir.path().join("quick.cfg");
    write_config(
        &config,
        "max_iter = 6\neval_interval = 2\nbase_lr = 0.001\nseed = 2\n",
    );
    let ckpt = dir.path().join("model.ilgc");
    let out = run_cli(&[
        "train",
        "--split",
        &split,
        "--images",
        &images,
        "--config",
        config.to_str().unwrap(),
        "--out",
        ckpt.to_str().unwrap(),
    ]);
    expect_exit(&out, 0, "train");
    let report = kv(&stdout_of(&out));
    assert_eq!(kv_usize(&report, "iterations"), 6);
    assert_eq!(kv_usize(&report, "metrics_rows"), 3);
    assert!(ckpt.exists());

    let metrics = fs::read_to_string(dir.path().join("model.metrics.csv")).unwrap();
    let mut lines = metrics.lines();
    assert_eq!(lines.next(), Some("iter,lr,loss,accuracy,wall_ms"));
    assert_eq!(lines.count(), 3);
}

#[test]
fn same_seed_reproduces_the_loss_column() {
    let dir = tempfile::tempdir().unwrap();
    let (images, split) = make_corpus_and_split(dir.path(), 16, 4);
    let config = dir.path().join("quick.cfg");
    write_config(
        &config,
        "max_iter = 5\neval_interval = 1\nbase_lr = 0.001\nseed = 3\n",
    );
    let mut columns = Vec::new();
    for name in ["a.ilgc", "b.ilgc"] {
        let ckpt = dir.path().join(name);
        let out = run_cli(&[
            "train",
            "--split",
            &split,
            "--images",
            &images,
            "--config",
            config.to_str().unwrap(),
            "--out",
            ckpt.to_str().unwrap(),
        ]);
        expect_exit(&out, 0, "train");
        let metrics = fs::read_to_string(ckpt.with_extension("metrics.csv")).unwrap();
        let column: Vec<String> = metrics
            .lines()
            .skip(1)
            .map(|l| {
                let f: Vec<&str> = l.split(',').collect();
                format!("{},{},{},{}", f[0], f[1], f[2], f[3])
            })
            .collect();
        columns.push(column);
    }
    assert_eq!(columns[0], columns[1]);
}

#[test]
fn train_with_missing_images_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let (_, split) = make_corpus_and_split(dir.path(), 8, 2);
    let out = run_cli(&[
        "train",
        "--split",
        &split,
        "--images",
        dir.path().join("no_such_dir").to_str().unwrap(),
        "--out",
        dir.path().join("m.ilgc").to_str().unwrap(),
    ]);
    expect_exit(&out, 2, "missing images dir");
}

#[test]
fn diverging_training_is_a_numeric_error() {
    let dir = tempfile::tempdir().unwrap();
    let (images, split) = make_corpus_and_split(dir.path(), 8, 2);
    let config = dir.path().join("diverge.cfg");
    write_config(&config, "max_iter = 30\nbase_lr = 1e12\nseed = 1\n");
    let out = run_cli(&[
        "train",
        "--split",
        &split,
        "--images",
        &images,
        "--config",
        config.to_str().unwrap(),
        "--out",
        dir.path().join("m.ilgc").to_str().unwrap(),
    ]);
    expect_exit(&out, 3, "diverging run");
    assert!(stderr_of(&out).contains("iteration"), "{}", stderr_of(&out));
}

#[test]
fn eval_reports_an_internally_consistent_confusion_matrix() {
    let dir = tempfile::tempdir().unwrap();
    let (images, split) = make_corpus_and_split(dir.path(), 16, 4);
    let config = dir.path().join("quick.cfg");
    write_config(&config, "max_iter = 25\nbase_lr = 0.002\nseed = 4\n");
    let ckpt = dir.path().join("model.ilgc");
    let out = run_cli(&[
        "train",
        "--split",
        &split,
        "--images",
        &images,
        "--config",
        config.to_str().unwrap(),
        "--out",
        ckpt.to_str().unwrap(),
    ]);
    expect_exit(&out, 0, "train");

    for partition in ["train", "test"] {
        let out = run_cli(&[
            "eval",
            "--ckpt",
            ckpt.to_str().unwrap(),
            "--split",
            &split,
            "--images",
            &images,
            "--partition",
            partition,
        ]);
        expect_exit(&out, 0, "eval");
        let report = kv(&stdout_of(&out));
        let cells = [
            kv_usize(&report, "confusion_bad_bad"),
            kv_usize(&report, "confusion_bad_good"),
            kv_usize(&report, "confusion_good_bad"),
            kv_usize(&report, "confusion_good_good"),
        ];
        let examples = kv_usize(&report, "examples");
        assert_eq!(cells.iter().sum::<usize>(), examples);
        let correct = cells[0] + cells[3];
        assert_eq!(kv_usize(&report, "correct"), correct);
        let accuracy = kv_f64(&report, "accuracy");
        assert!((accuracy - correct as f64 / examples as f64).abs() < 1e-6);
    }
}

#[test]
fn eval_of_an_empty_partition_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let (images, split) = make_corpus_and_split(dir.path(), 8, 2);
    // Keep only training rows.
    let train_only: String = fs::read_to_string(&split)
        .unwrap()
        .lines()
        .filter(|l| l.contains(",train,"))
        .map(|l| format!("{l}\n"))
        .collect();
    let split2 = dir.path().join("train_only.csv");
    fs::write(&split2, train_only).unwrap();

    let net = assemble(
        ArchConfig::new(Variant::IlgnetIncV1Bn)
            .with_width(0.25)
            .with_side(64),
        0,
    )
    .unwrap();
    let ckpt = dir.path().join("fresh.ilgc");
    checkpoint::save(&net, [128.0; 3], &[], &ckpt).unwrap();

    let out = run_cli(&[
        "eval",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--split",
        split2.to_str().unwrap(),
        "--images",
        &images,
        "--partition",
        "test",
    ]);
    expect_exit(&out, 2, "empty partition");
    assert!(stderr_of(&out).contains("test"), "{}", stderr_of(&out));
}

#[test]
fn classify_zeroed_head_ties_to_bad() {
    let dir = tempfile::tempdir().unwrap();
    let (images, _) = make_corpus_and_split(dir.path(), 8, 2);
    let mut net = assemble(
        ArchConfig::new(Variant::IlgnetIncV1Bn)
            .with_width(0.25)
            .with_side(64),
        0,
    )
    .unwrap();
    net.store_mut()
        .by_name_mut("head.fc.weight")
        .unwrap()
        .value
        .fill(0.0);
    net.store_mut()
        .by_name_mut("head.fc.bias")
        .unwrap()
        .value
        .fill(0.0);
    let ckpt = dir.path().join("zeroed.ilgc");
    checkpoint::save(&net, [128.0; 3], &[], &ckpt).unwrap();

    let image = format!("{images}/synth_0000.ppm");
    let out = run_cli(&["classify", "--ckpt", ckpt.to_str().unwrap(), &image]);
    expect_exit(&out, 0, "classify");
    let stdout = stdout_of(&out);
    assert_eq!(stdout.trim(), format!("{image},0.500000,bad"));
}

#[test]
fn classify_continues_past_undecodable_files() {
    let dir = tempfile::tempdir().unwrap();
    let (images, _) = make_corpus_and_split(dir.path(), 8, 2);
    let net = assemble(
        ArchConfig::new(Variant::IlgnetIncV1Bn)
            .with_width(0.25)
            .with_side(64),
        5,
    )
    .unwrap();
    let ckpt = dir.path().join("net.ilgc");
    checkpoint::save(&net, [128.0; 3], &[], &ckpt).unwrap();

    let good = format!("{images}/synth_0000.ppm");
    let garbage = dir.path().join("garbage.ppm");
    fs::write(&garbage, b"not a ppm at all").unwrap();

    let out = run_cli(&[
        "classify",
        "--ckpt",
        ckpt.to_str().unwrap(),
        &good,
        garbage.to_str().unwrap(),
        &good,
    ]);
    expect_exit(&out, 2, "classify with one bad file");
    let stdout = stdout_of(&out);
    let lines: Vec<&str> = stdout.lines().collect();
    assert_eq!(lines.len(), 3, "one row per input:\n{stdout}");
    assert_eq!(lines[0], lines[2], "duplicate inputs give identical rows");
    assert_eq!(lines[1], format!("{},,error", garbage.display()));
    assert!(!stderr_of(&out).is_empty());

    // Good rows: path,probability(6 decimals),label.
    let fields: Vec<&str> = lines[0].split(',').collect();
    assert_eq!(fields.len(), 3);
    let p: f64 = fields[1].parse().unwrap();
    assert!((0.0..=1.0).contains(&p));
    assert_eq!(fields[1].len(), 8, "six decimal places: {}", fields[1]);
    assert!(fields[2] == "good" || fields[2] == "bad");
}

#[test]
fn features_requires_a_variant_with_local_taps() {
    let dir = tempfile::tempdir().unwrap();
    let (images, _) = make_corpus_and_split(dir.path(), 8, 2);
    let net = assemble(
        ArchConfig::new(Variant::ThirdGooglenetV1Bn)
            .with_width(0.25)
            .with_side(64),
        0,
    )
    .unwrap();
    let ckpt = dir.path().join("backbone.ilgc");
    checkpoint::save(&net, [128.0; 3], &[], &ckpt).unwrap();

    let out = run_cli(&[
        "features",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--image",
        &format!("{images}/synth_0000.ppm"),
        "--out",
        dir.path().join("taps").to_str().unwrap(),
    ]);
    expect_exit(&out, 2, "features on tap-free variant");
}

#[test]
fn corrupted_checkpoint_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let (images, _) = make_corpus_and_split(dir.path(), 8, 2);
    let net = assemble(
        ArchConfig::new(Variant::IlgnetIncV1Bn)
            .with_width(0.25)
            .with_side(64),
        0,
    )
    .unwrap();
    let ckpt = dir.path().join("net.ilgc");
    checkpoint::save(&net, [128.0; 3], &[], &ckpt).unwrap();
    let bytes = fs::read(&ckpt).unwrap();
    fs::write(&ckpt, &bytes[..bytes.len() - 1]).unwrap();

    let out = run_cli(&[
        "classify",
        "--ckpt",
        ckpt.to_str().unwrap(),
        &format!("{images}/synth_0000.ppm"),
    ]);
    expect_exit(&out, 2, "truncated checkpoint");
    assert!(stderr_of(&out).contains("truncated"), "{}", stderr_of(&out));
}

#[test]
fn gradcheck_reports_one_line_per_requested_op() {
    let single = run_cli(&["gradcheck", "--op", "softmax_xent", "--trials", "3"]);
    expect_exit(&single, 0, "gradcheck softmax_xent");
    let stdout = stdout_of(&single);
    assert_eq!(stdout.lines().count(), 1, "{stdout}");
    assert!(stdout.starts_with("op=softmax-xent "), "{stdout}");

    let unknown = run_cli(&["gradcheck", "--op", "fourier"]);
    expect_exit(&unknown, 1, "unknown op");
}

#[test]
fn sabotaged_conv_backward_fails_the_gradient_check() {
    let out = run_cli_env(
        &["gradcheck", "--op", "conv2d", "--trials", "2"],
        &[("ILGNET_SABOTAGE_CONV_BACKWARD", "1")],
    );
    expect_exit(&out, 3, "sabotaged conv backward");
    assert!(stdout_of(&out).contains("FAIL"), "{}", stdout_of(&out));
}

#[test]
fn synth_rejects_odd_counts() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_cli(&[
        "synth",
        "--out",
        dir.path().join("c").to_str().unwrap(),
        "--count",
        "7",
    ]);
    expect_exit(&out, 2, "odd synth count");
}
