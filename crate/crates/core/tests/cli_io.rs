//! Output formats and the command-line contract.

use std::fs;
use std::path::Path;
use std::process::Command;

use highfield::cli::{parse_scenario, read_field, read_table, write_field, write_table, FieldData, OutputMeta, Table};
use highfield::Error;
use num_complex::Complex64;

const SMALL: &str = "[model]\nalpha = 1.0\nepsilon = 0.1\n[grid]\nhalf_width = 5.0\nn = 16\n[study]\nk = 4\n";

fn binary() -> Command {
    Command::new(env!("CARGO_BIN_EXE_highfield"))
}

fn run_cli(args: &[&str], config: Option<&str>, out: &Path) -> (i32, String, String) {
    let mut cmd = binary();
    cmd.args(args).arg("--out").arg(out);
    let cfg_path = out.join("scenario.toml");
    if let Some(text) = config {
        fs::create_dir_all(out).unwrap();
        fs::write(&cfg_path, text).unwrap();
        cmd.arg("--config").arg(&cfg_path);
    }
    let o = cmd.output().unwrap();
    (
        o.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&o.stdout).into_owned(),
        String::from_utf8_lossy(&o.stderr).into_owned(),
    )
}

#[test]
fn empty_table_is_header_only() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("empty.csv");
    write_table(&Table::new(&["eps", "t", "error"]), &path, None).unwrap();
    assert_eq!(fs::read_to_string(&path).unwrap(), "eps,t,error\n");
    let back = read_table(&path).unwrap();
    assert!(back.rows.is_empty());
}

#[test]
fn one_cell_table_has_two_lines_with_seventeen_digits() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("one.csv");
    let mut t = Table::new(&["x"]);
    t.push(vec![0.1]);
    write_table(&t, &path, None).unwrap();
    let text = fs::read_to_string(&path).unwrap();
    assert!(!text.contains('\r'));
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 2);
    let mantissa = lines[1].split('e').next().unwrap().replace(['.', '-'], "");
    assert_eq!(mantissa.len(), 17);
    assert_eq!(lines[1].parse::<f64>().unwrap(), 0.1);
}

#[test]
fn metadata_line_precedes_header() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("meta.csv");
    let meta = OutputMeta {
        config_sha256: "ab".repeat(32),
        seed: 9,
    };
    let mut t = Table::new(&["a", "b"]);
    t.push(vec![1.0, f64::NAN]);
    write_table(&t, &path, Some(&meta)).unwrap();
    let text = fs::read_to_string(&path).unwrap();
    assert!(text.starts_with(&format!("# config_sha256={} seed=9\na,b\n", "ab".repeat(32))));
    let back = read_table(&path).unwrap();
    assert!(back.rows[0][1].is_nan());
}

#[test]
fn field_sizes_follow_shape_and_kind() {
    let dir = tempfile::tempdir().unwrap();
    let real = dir.path().join("r.field");
    write_field(&FieldData::Real(vec![1.0, 2.0, 3.0, 4.0]), &[2, 2], &[[0.0, 1.0], [0.0, 1.0]], &real, None).unwrap();
    let bytes = fs::read(&real).unwrap();
    let nl = bytes.iter().position(|b| *b == b'\n').unwrap();
    assert_eq!(bytes.len() - nl - 1, 32);
    let header: serde_json::Value = serde_json::from_slice(&bytes[..nl]).unwrap();
    assert_eq!(header["shape"], serde_json::json!([2, 2]));
    assert_eq!(header["dtype"], "<f8");
    assert_eq!(f64::from_le_bytes(bytes[nl + 1..nl + 9].try_into().unwrap()), 1.0);

    let cplx = dir.path().join("c.field");
    let data = FieldData::Complex((0..4).map(|k| Complex64::new(k as f64, -(k as f64))).collect());
    write_field(&data, &[2, 2], &[[0.0, 1.0], [0.0, 1.0]], &cplx, None).unwrap();
    let bytes = fs::read(&cplx).unwrap();
    let nl = bytes.iter().position(|b| *b == b'\n').unwrap();
    assert_eq!(bytes.len() - nl - 1, 64);
    let (h, back) = read_field(&cplx).unwrap();
    assert!(h.complex);
    assert_eq!(back, data);
}

#[test]
fn field_shape_mismatch_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let err = write_field(&FieldData::Real(vec![1.0; 3]), &[2, 2], &[], &dir.path().join("x.field"), None).unwrap_err();
    assert!(matches!(err, Error::DimensionMismatch { .. }));
}

#[test]
fn unknown_key_reports_line_and_name() {
    let text = "[model]\nalpha = 1.0\nepsilon = 0.1\n[model.tail]\ngamma = 4.0\ngamma_typo = 1.0\n";
    match parse_scenario(text) {
        Err(Error::Parse { line, key, .. }) => {
            assert_eq!(line, 6);
            assert_eq!(key, "gamma_typo");
        }
        other => panic!("expected a parse error, got {other:?}"),
    }
}

#[test]
fn config_hash_changes_with_content() {
    let a = parse_scenario(SMALL).unwrap();
    let b = parse_scenario(&SMALL.replace("k = 4", "k = 5")).unwrap();
    assert_eq!(a.config_sha256.len(), 64);
    assert_ne!(a.config_sha256, b.config_sha256);
}

#[test]
fn exit_code_for_success_writes_stamped_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let (code, stdout, stderr) = run_cli(&["spectrum", "--seed", "3"], Some(SMALL), dir.path());
    assert_eq!(code, 0, "stdout: {stdout}\nstderr: {stderr}");
    let csv = fs::read_to_string(dir.path().join("spectrum.csv")).unwrap();
    assert!(csv.starts_with("# config_sha256="));
    assert!(csv.lines().next().unwrap().ends_with("seed=3"));
    let (header, _) = read_field(&dir.path().join("chi0.field")).unwrap();
    assert_eq!(header.shape, vec![16, 16]);
    assert_eq!(header.seed, Some(3));
}

#[test]
fn exit_code_for_parse_error() {
    let dir = tempfile::tempdir().unwrap();
    let bad = SMALL.replace("k = 4", "k = 4\nbogus = 1");
    let (code, _, stderr) = run_cli(&["spectrum"], Some(&bad), dir.path());
    assert_eq!(code, 2);
    assert!(stderr.contains("bogus"), "{stderr}");
}

#[test]
fn exit_code_for_missing_config() {
    let dir = tempfile::tempdir().unwrap();
    let (code, _, _) = run_cli(&["spectrum"], None, dir.path());
    assert_eq!(code, 2);
}

#[test]
fn exit_code_for_domain_error() {
    let dir = tempfile::tempdir().unwrap();
    let bad = SMALL.replace("epsilon = 0.1", "epsilon = 1.5");
    let (code, _, _) = run_cli(&["spectrum"], Some(&bad), dir.path());
    assert_eq!(code, 1);
}

#[test]
fn exit_code_for_failed_check() {
    let dir = tempfile::tempdir().unwrap();
    // the ground state is far from negligible at the edge of this small box
    let cramped = SMALL.replace("half_width = 5.0", "half_width = 1.5");
    let (code, _, stderr) = run_cli(&["decay"], Some(&cramped), dir.path());
    assert_eq!(code, 3, "{stderr}");
    assert!(stderr.contains("boundary-mass"));
}
