use std::process::{Command, Output};

fn bkdp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bkdp")).args(args).output().expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

#[test]
fn verify_passes_on_catalog_archs() {
    for arch in ["mlp:3x64", "lora-mlp", "adapter-mlp", "embed-mlp", "cnn-small"] {
        let out = bkdp(&["verify", "--arch", arch, "--batch", "4", "--seed", "7"]);
        assert!(out.status.success(), "{arch}: {}", String::from_utf8_lossy(&out.stderr));
        let text = stdout(&out);
        assert!(text.starts_with("kind,max_rel_grad_dev,max_rel_norm_dev,backward_pass_count"));
        // header + ten DP kinds
        assert_eq!(text.lines().count(), 11, "{arch}:\n{text}");
    }
}

#[test]
fn verify_with_zero_tolerance_fails_with_location() {
    let out = bkdp(&["verify", "--arch", "mlp:3x64", "--tol", "0"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("kind") && err.contains("deviation"), "{err}");
}

#[test]
fn analyze_reports_published_totals() {
    let out = bkdp(&["analyze", "--arch", "resnet18", "--input", "224"]);
    assert!(out.status.success());
    let text = stdout(&out);
    assert!(
        text.contains("total_ghost_space,398623626,total_inst_space,11506880,total_mixed_space,999498"),
        "{text}"
    );
}

#[test]
fn analyze_on_flat_mlp_chooses_ghost_everywhere() {
    let out = bkdp(&["analyze", "--arch", "mlp:10x1000"]);
    assert!(out.status.success());
    let data_rows: Vec<&str> = stdout(&out)
        .lines()
        .skip(1)
        .take_while(|l| !l.starts_with("total"))
        .map(|l| l.to_owned().leak() as &str)
        .collect();
    assert_eq!(data_rows.len(), 10);
    assert!(data_rows.iter().all(|l| l.contains(",ghost,")));
}

#[test]
fn unknown_arch_exits_2_and_lists_catalog() {
    let out = bkdp(&["analyze", "--arch", "resnet101"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("resnet50") && err.contains("mlp:LxW"), "{err}");
}

#[test]
fn arch_file_path_is_accepted() {
    let dir = std::env::temp_dir().join("bkdp-cli-test");
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("tiny.arch");
    std::fs::write(&path, "input flat 6\nlinear in=6 out=3\n").unwrap();
    let out = bkdp(&["verify", "--arch", path.to_str().unwrap(), "--batch", "2"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn bench_is_deterministic_and_reports_all_columns() {
    let args = ["bench", "--arch", "cnn-small", "--batch", "4", "--steps", "2", "--sigma", "1.0"];
    let a = bkdp(&args);
    let b = bkdp(&args);
    assert!(a.status.success());
    assert_eq!(a.stdout, b.stdout, "reruns must be byte-identical");
    let text = stdout(&a);
    assert!(text.starts_with(
        "kind,steps,mul_adds_total,peak_live_bytes,predicted_time,predicted_space,deviation_pct"
    ));
    assert_eq!(text.lines().count(), 12); // header + 11 kinds
}

#[test]
fn bench_memory_budget_guard_refuses_with_prediction() {
    let out = bkdp(&["bench", "--arch", "mlp:3x64", "--impl", "opacus", "--mem-budget-bytes", "1"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("predicted peak memory") && err.contains("opacus"), "{err}");
}

#[test]
fn bench_noise_costs_at_most_one_add_per_coordinate() {
    let base = ["bench", "--arch", "mlp:3x64", "--impl", "bk", "--batch", "4"];
    let quiet = stdout(&bkdp(&base));
    let noisy = stdout(&bkdp(&[&base[..], &["--sigma", "1.0"]].concat()));
    let ops = |text: &str| -> u64 {
        text.lines().nth(1).unwrap().split(',').nth(2).unwrap().parse().unwrap()
    };
    let (q, n) = (ops(&quiet), ops(&noisy));
    assert!(n >= q);
    assert!(n - q <= 3 * 64 * 64, "noise added {} ops", n - q);
}

#[test]
fn invalid_impl_and_clip_fn_are_configuration_errors() {
    assert_eq!(bkdp(&["bench", "--impl", "warp_drive"]).status.code(), Some(2));
    assert_eq!(bkdp(&["verify", "--clip-fn", "median"]).status.code(), Some(2));
    assert_eq!(bkdp(&["verify", "--impl", "non_dp"]).status.code(), Some(2));
    assert_eq!(bkdp(&["bench", "--steps", "0"]).status.code(), Some(2));
}
