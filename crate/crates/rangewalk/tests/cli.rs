//! End-to-end checks of the batch interface: output formats, determinism,
//! manifest round-trips, and exit codes.

use std::fs;
use std::path::PathBuf;
use std::process::Command;
use std::sync::atomic::{AtomicU64, Ordering};

use rangewalk::cli;
use rangewalk::lattice::{write_snapshot, Dim, WalkPath};
use rangewalk::sampler;
use rangewalk::spectral;

static DIR_COUNTER: AtomicU64 = AtomicU64::new(0);

fn scratch_dir(tag: &str) -> PathBuf {
    let id = DIR_COUNTER.fetch_add(1, Ordering::Relaxed);
    let dir = std::env::temp_dir().join(format!(
        "rangewalk-test-{}-{tag}-{id}",
        std::process::id()
    ));
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn args(list: &[&str]) -> Vec<String> {
    list.iter().map(|s| s.to_string()).collect()
}

#[test]
fn constants_subcommand_emits_twelve_digit_records() {
    let dir = scratch_dir("constants");
    let out = dir.join("constants.txt");
    let summary = cli::run(&args(&[
        "constants",
        "--dims",
        "2,3",
        "--out",
        out.to_str().unwrap(),
    ]))
    .unwrap();
    assert_eq!(summary.outputs, vec![out.clone()]);
    let text = fs::read_to_string(&out).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 2);
    for (line, d) in lines.iter().zip([2usize, 3]) {
        let fields: Vec<&str> = line.split_whitespace().collect();
        assert_eq!(fields.len(), 5);
        assert_eq!(fields[0], d.to_string());
        let spec = spectral::continuum_constants(d).unwrap();
        let rho: f64 = fields[3].parse().unwrap();
        let chi: f64 = fields[4].parse().unwrap();
        assert!((rho - spec.rho).abs() < 1e-12);
        assert!((chi - spec.chi).abs() < 1e-11);
        // >= 12 significant digits in the decimal text
        assert!(fields[3].len() >= 14);
    }
    // the manifest exists and records success
    let manifest = fs::read_to_string(&summary.manifest).unwrap();
    assert!(manifest.contains("status = ok"));
    assert!(manifest.contains("[constants]"));
}

#[test]
fn sample_runs_are_bit_identical_for_equal_configs() {
    let dir = scratch_dir("determinism");
    let mut outputs = Vec::new();
    for run in 0..2 {
        let out = dir.join(format!("run{run}.jsonl"));
        cli::run(&args(&[
            "sample",
            "--d",
            "3",
            "--n",
            "3",
            "--samples",
            "40",
            "--burn-in",
            "2000",
            "--seed",
            "7",
            "--out",
            out.to_str().unwrap(),
        ]))
        .unwrap();
        outputs.push(fs::read(&out).unwrap());
    }
    assert!(!outputs[0].is_empty());
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn zn_exact_matches_enumeration() {
    let dir = scratch_dir("zn");
    let out = dir.join("zn.jsonl");
    cli::run(&args(&[
        "zn",
        "--d",
        "3",
        "--N",
        "4",
        "--mode",
        "exact",
        "--out",
        out.to_str().unwrap(),
    ]))
    .unwrap();
    let text = fs::read_to_string(&out).unwrap();
    let expect = sampler::exact_partition(Dim::new(3).unwrap(), 4).unwrap();
    let field = text
        .split("\"estimate\":")
        .nth(1)
        .unwrap()
        .split(',')
        .next()
        .unwrap();
    let got: f64 = field.parse().unwrap();
    assert!((got - expect).abs() < 1e-15 * expect);
}

#[test]
fn manifest_echo_reparses_to_the_same_configuration() {
    let dir = scratch_dir("manifest");
    let cfg_path = dir.join("run.cfg");
    fs::write(&cfg_path, "[zn]\nd = 3\nN = 3\nmode = exact\n").unwrap();
    let out = dir.join("zn.jsonl");
    let summary = cli::run(&args(&[
        "zn",
        "--config",
        cfg_path.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]))
    .unwrap();
    let manifest = fs::read_to_string(&summary.manifest).unwrap();
    // the echo section is everything from the first section header on
    let echo_start = manifest.find("[zn]").unwrap();
    let echo = &manifest[echo_start..];
    let resolved = cli::resolve_config(
        "zn",
        Some(&fs::read_to_string(&cfg_path).unwrap()),
        &[("out".into(), out.to_str().unwrap().into())],
    )
    .unwrap();
    let reparsed = cli::resolve_config("zn", Some(echo), &[]).unwrap();
    assert_eq!(reparsed, resolved);
    assert_eq!(reparsed.hash(), resolved.hash());
    // records carry the seed and configuration hash
    let record = fs::read_to_string(&out).unwrap();
    assert!(record.contains(&format!("\"config_hash\":\"{}\"", resolved.hash())));
    assert!(record.contains("\"seed\":"));
}

#[test]
fn manifest_written_even_on_failure() {
    let dir = scratch_dir("failure");
    let out = dir.join("fk.jsonl");
    let err = cli::run(&args(&[
        "fk",
        "--input",
        dir.join("missing.voxels").to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]));
    assert!(err.is_err());
    let manifest = fs::read_to_string(dir.join("fk.manifest.txt")).unwrap();
    assert!(manifest.contains("status = error"));
}

#[test]
fn fk_subcommand_reads_voxel_files() {
    let dir = scratch_dir("fk");
    // a 3x3x3 voxel cube at spacing 1/3
    let mut text = String::from("0.3333333333333333\n");
    for x in 0..3 {
        for y in 0..3 {
            for z in 0..3 {
                text.push_str(&format!("{x} {y} {z}\n"));
            }
        }
    }
    let input = dir.join("cube.voxels");
    fs::write(&input, text).unwrap();
    let out = dir.join("fk.jsonl");
    cli::run(&args(&[
        "fk",
        "--input",
        input.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]))
    .unwrap();
    let record = fs::read_to_string(&out).unwrap();
    assert!(record.contains("\"asymmetry\":"));
    assert!(record.contains("\"deficit\":"));
    assert!(record.contains("\"cells\":27"));
}

#[test]
fn shape_subcommand_consumes_sample_archives() {
    let dir = scratch_dir("shape");
    let archive = dir.join("samples.jsonl");
    cli::run(&args(&[
        "sample",
        "--d",
        "3",
        "--n",
        "3",
        "--samples",
        "12",
        "--burn-in",
        "4000",
        "--snapshots",
        "4",
        "--seed",
        "11",
        "--out",
        archive.to_str().unwrap(),
    ]))
    .unwrap();
    let out = dir.join("shape.jsonl");
    cli::run(&args(&[
        "shape",
        "--archives",
        archive.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]))
    .unwrap();
    let text = fs::read_to_string(&out).unwrap();
    assert!(text.contains("\"aggregate\":true"));
    assert!(text.contains("\"gloc\":"));
    assert!(text.contains("\"fill\":"));
}

#[test]
fn coarse_subcommand_reports_budget_and_distances() {
    use rand::Rng;
    use rand::SeedableRng;
    let dir = scratch_dir("coarse");
    // a random walk snapshot at n = 3 (N = 243)
    let dim = Dim::new(3).unwrap();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
    let steps: Vec<u8> = (0..243).map(|_| rng.gen_range(0..6)).collect();
    let walk = WalkPath::build(dim, &[0, 0, 0], steps).unwrap();
    let snap = dir.join("walk.snapshot");
    let mut buf = Vec::new();
    write_snapshot(&walk, &mut buf).unwrap();
    fs::write(&snap, buf).unwrap();

    let out = dir.join("coarse.jsonl");
    cli::run(&args(&[
        "coarse",
        "--snapshot",
        snap.to_str().unwrap(),
        "--kappa",
        "25",
        "--c",
        "3",
        "--out",
        out.to_str().unwrap(),
    ]))
    .unwrap();
    let record = fs::read_to_string(&out).unwrap();
    assert!(record.contains("\"gamma0\":"));
    assert!(record.contains("\"l2_within_gamma0\":true"));
    assert!(record.contains("\"l1_within_gamma1\":true"));
}

#[test]
fn binary_exit_codes_follow_the_contract() {
    let bin = env!("CARGO_BIN_EXE_rangewalk");
    let dir = scratch_dir("exitcodes");

    // usage errors exit 1
    let status = Command::new(bin)
        .arg("frobnicate")
        .current_dir(&dir)
        .output()
        .unwrap();
    assert_eq!(status.status.code(), Some(1));
    let status = Command::new(bin)
        .args(["zn", "--mystery", "1"])
        .current_dir(&dir)
        .output()
        .unwrap();
    assert_eq!(status.status.code(), Some(1));

    // infeasible configuration exits 2 (exponent constraints violated)
    let dim = Dim::new(3).unwrap();
    let walk = WalkPath::build(dim, &[0, 0, 0], vec![0, 1, 2, 3, 4, 5, 0, 1]).unwrap();
    let snap = dir.join("walk.snapshot");
    let mut buf = Vec::new();
    write_snapshot(&walk, &mut buf).unwrap();
    fs::write(&snap, buf).unwrap();
    let status = Command::new(bin)
        .args([
            "coarse",
            "--snapshot",
            snap.to_str().unwrap(),
            "--n",
            "2",
            "--rho",
            "2.5",
        ])
        .current_dir(&dir)
        .output()
        .unwrap();
    assert_eq!(status.status.code(), Some(2));

    // a successful run exits 0
    let status = Command::new(bin)
        .args(["constants", "--dims", "3"])
        .current_dir(&dir)
        .output()
        .unwrap();
    assert_eq!(status.status.code(), Some(0));
}

#[test]
fn environment_variable_sets_the_default_output_directory() {
    // run the binary so the environment variable is per-process
    let bin = env!("CARGO_BIN_EXE_rangewalk");
    let dir = scratch_dir("envvar");
    let status = Command::new(bin)
        .args(["constants", "--dims", "2"])
        .env("RANGEWALK_OUT_DIR", &dir)
        .output()
        .unwrap();
    assert_eq!(status.status.code(), Some(0));
    assert!(dir.join("constants.txt").exists());
    assert!(dir.join("constants.manifest.txt").exists());
}

#[test]
fn worker_count_does_not_change_ais_results() {
    let dir = scratch_dir("workers");
    let mut texts = Vec::new();
    for workers in ["1", "3"] {
        let out = dir.join(format!("zn-{workers}.jsonl"));
        cli::run(&args(&[
            "zn",
            "--d",
            "3",
            "--N",
            "6",
            "--mode",
            "ais",
            "--rungs",
            "8",
            "--replicas",
            "6",
            "--seed",
            "21",
            "--workers",
            workers,
            "--out",
            out.to_str().unwrap(),
        ]))
        .unwrap();
        // drop the config hash (it includes the workers key by design)
        let text = fs::read_to_string(&out).unwrap();
        let cut = text.split("\"seed\"").next().unwrap().to_string();
        texts.push(cut);
    }
    assert_eq!(texts[0], texts[1]);
}
