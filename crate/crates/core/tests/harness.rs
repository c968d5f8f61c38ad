use std::fs;
use std::process::Command;
use std::sync::OnceLock;

use exposure_attack::attack::Method;
use exposure_attack::fusion::BracketSpec;
use exposure_attack::harness::{
    emit_report, load_dataset, prepare_models, read_manifest, read_results, run_ablation, run_transfer_matrix,
    run_whitebox, run_whitebox_sweep, summarize, sweep_grid, transfer_matrices, AblationAxis, Dataset,
    ExperimentConfig, ModelSpec, NamedModel, SyntheticSpec,
};
use exposure_attack::image::load_image;
use exposure_attack::nn::Arch;
use exposure_attack::Error;

struct Fixture {
    _dir: tempfile::TempDir,
    cfg: ExperimentConfig,
    data: Dataset,
    models: Vec<NamedModel>,
}

fn small_config(dir: &std::path::Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.seed = 4;
    cfg.output_dir = dir.to_path_buf();
    cfg.dataset.synthetic = SyntheticSpec {
        num_classes: 2,
        height: 32,
        width: 32,
        train_per_class: 100,
        test_per_class: 12,
    };
    cfg.models = vec![ModelSpec::new("a", Arch::A), ModelSpec::new("b", Arch::B)];
    cfg.train.epochs = 6;
    cfg.sample_limit = 12;
    cfg.saved_images = 2;
    cfg
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_config(dir.path());
        let data = load_dataset(&cfg).unwrap();
        let (models, _) = prepare_models(&cfg, &data).unwrap();
        Fixture {
            _dir: dir,
            cfg,
            data,
            models,
        }
    })
}

fn samples(f: &Fixture) -> &[exposure_attack::LabeledSample] {
    f.data.attack_set(f.cfg.sample_limit)
}

#[test]
fn transfer_runs_are_deterministic() {
    let f = fixture();
    let a = run_transfer_matrix(&f.cfg, &f.models, samples(f)).unwrap();
    let b = run_transfer_matrix(&f.cfg, &f.models, samples(f)).unwrap();
    assert_eq!(a, b);
    let matrices = transfer_matrices(&a).unwrap();
    assert_eq!(matrices.len(), f.cfg.transfer.methods.len());
    for m in &matrices {
        assert_eq!(m.models, vec!["a", "b"]);
        assert!(m.rates.iter().flatten().all(|r| (0.0..=1.0).contains(r)));
    }
}

#[test]
fn identity_fusion_fools_nothing() {
    let f = fixture();
    let mut cfg = f.cfg.clone();
    cfg.attack.bracket = BracketSpec::new(1.0, vec![0.0]).unwrap();
    cfg.transfer.alpha = 0.0;
    let records = run_transfer_matrix(&cfg, &f.models, samples(f)).unwrap();
    for m in transfer_matrices(&records).unwrap() {
        assert!(m.rates.iter().flatten().all(|&r| r == 0.0), "{m:?}");
    }
    assert!(records.iter().all(|r| (r.ssim - 1.0).abs() < 1e-9));
}

#[test]
fn single_level_ablation_matches_transfer_at_that_level() {
    let f = fixture();
    let mut cfg = f.cfg.clone();
    cfg.ablation.level_methods = vec![Method::Bef];
    cfg.ablation.levels = vec![1];
    cfg.transfer.methods = vec![Method::Bef];
    cfg.transfer.levels = 1;
    let ab = transfer_matrices(&run_ablation(&cfg, &f.models, samples(f), AblationAxis::L).unwrap()).unwrap();
    let tr = transfer_matrices(&run_transfer_matrix(&cfg, &f.models, samples(f)).unwrap()).unwrap();
    assert_eq!(ab.len(), 1);
    assert_eq!(ab[0].rates, tr[0].rates);
    assert_eq!(ab[0].samples, tr[0].samples);
    assert_eq!(ab[0].levels, 1);
}

#[test]
fn sweep_grid_order_and_single_point() {
    let f = fixture();
    let mut cfg = f.cfg.clone();
    cfg.sweep.methods = vec![Method::Cbef, Method::Ifgsm];
    cfg.sweep.alphas = vec![0.01, 0.02];
    cfg.sweep.epsilons = vec![0.1];
    cfg.sweep.levels = vec![2, 3];
    cfg.sweep.kernel_sizes = vec![1, 3];
    let grid = sweep_grid(&cfg);
    let keys: Vec<(Method, usize, usize, f64)> = grid
        .iter()
        .map(|a| (a.method, a.levels, a.kernel_size, if a.method.is_additive() { a.epsilon } else { a.alpha }))
        .collect();
    assert_eq!(keys.len(), 9);
    assert_eq!(keys[0], (Method::Cbef, 2, 1, 0.01));
    assert_eq!(keys[1], (Method::Cbef, 2, 1, 0.02));
    assert_eq!(keys[2], (Method::Cbef, 2, 3, 0.01));
    assert_eq!(keys[4], (Method::Cbef, 3, 1, 0.01));
    assert_eq!(keys[8].0, Method::Ifgsm);
    assert!((grid[8].alpha - 0.1 / grid[8].max_iter as f64).abs() < 1e-15);

    cfg.sweep.methods = vec![Method::Bef];
    cfg.sweep.alphas = vec![0.05];
    cfg.sweep.levels = vec![3];
    let records = run_whitebox_sweep(&cfg, &f.models, samples(f), None).unwrap();
    let rows = summarize(&records);
    assert_eq!(rows.len(), 1);
    assert!(records.iter().all(|r| r.point == 0 && r.initially_correct()));
    assert_eq!(rows[0].samples, records.len());
}

#[test]
fn report_files_round_trip() {
    let f = fixture();
    let records = run_transfer_matrix(&f.cfg, &f.models, samples(f)).unwrap();
    let out = tempfile::tempdir().unwrap();
    emit_report(&records, &f.cfg, "transfer", out.path()).unwrap();
    let manifest = read_manifest(out.path().join("manifest.json")).unwrap();
    assert_eq!(manifest.config, f.cfg);
    assert_eq!(manifest.command, "transfer");
    for file in &manifest.files {
        assert!(out.path().join(file).exists(), "{file}");
    }
    let pngs: Vec<_> = manifest.files.iter().filter(|f| f.ends_with(".png")).collect();
    assert!(!pngs.is_empty());
    for p in pngs {
        let img = load_image(out.path().join(p)).unwrap();
        assert_eq!(img.shape(), (32, 32, 3));
        assert!(img.in_unit_range());
    }

    let back = read_results(out.path().join("results.jsonl")).unwrap();
    assert_eq!(back.len(), records.len());
    let again = tempfile::tempdir().unwrap();
    emit_report(&back, &manifest.config, "report", again.path()).unwrap();
    for name in ["summary.csv", "transfer_matrix.csv", "results.jsonl"] {
        assert_eq!(
            fs::read(out.path().join(name)).unwrap(),
            fs::read(again.path().join(name)).unwrap(),
            "{name}"
        );
    }
    let header = fs::read_to_string(out.path().join("transfer_matrix.csv")).unwrap();
    assert!(header.starts_with("method,L,K,crafted_from,attacked,success_rate,samples"));
}

#[test]
fn empty_results_are_an_error() {
    let out = tempfile::tempdir().unwrap();
    assert!(emit_report(&[], &ExperimentConfig::default(), "attack", out.path()).is_err());
}

#[test]
fn transfer_needs_two_models() {
    let f = fixture();
    let one = &f.models[..1];
    assert!(run_transfer_matrix(&f.cfg, one, samples(f)).is_err());
    assert!(run_ablation(&f.cfg, one, samples(f), AblationAxis::K).is_err());
    let records = run_whitebox(&f.cfg, one, samples(f), None).unwrap();
    assert_eq!(records.len(), samples(f).len());
}

#[test]
fn bad_configs_are_rejected() {
    let cases = [
        "unknown_key = 1",
        "[[models]]\nname = \"a\"\narch = \"a\"\n[[models]]\nname = \"a\"\narch = \"b\"",
        "[[models]]\nname = \"a b\"\narch = \"a\"",
        "[attack]\nkernel_size = 2",
        "[sweep]\nmethods = []",
        "[ablation]\nlevel_methods = [\"ifgsm\"]",
        "[dataset]\ntrain_manifest = \"x.csv\"",
    ];
    for text in cases {
        assert!(matches!(ExperimentConfig::from_toml(text), Err(Error::Config(_)) | Err(Error::InvalidArgument(_))), "{text}");
    }
    let mut four = ExperimentConfig::default();
    four.models.push(ModelSpec::new("d", Arch::A));
    assert!(four.validate().is_err());
    let round = ExperimentConfig::from_toml(&ExperimentConfig::default().to_toml().unwrap()).unwrap();
    assert_eq!(round, ExperimentConfig::default());
}

#[test]
fn cli_reports_errors_and_writes_tables() {
    let f = fixture();
    let bin = env!("CARGO_BIN_EXE_expoattack");
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "bogus = true").unwrap();
    let out = Command::new(bin)
        .args(["transfer", "--seed", "1", "--config"])
        .arg(&bad)
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));

    let mut cfg = f.cfg.clone();
    for (i, m) in cfg.models.iter_mut().enumerate() {
        m.path = Some(f.cfg.model_path(i));
    }
    let good = dir.path().join("good.toml");
    fs::write(&good, cfg.to_toml().unwrap()).unwrap();
    let run = dir.path().join("run");
    let out = Command::new(bin)
        .args(["ablate", "--axis", "K", "--seed", "4", "--sample-limit", "6", "--config"])
        .arg(&good)
        .arg("--output-dir")
        .arg(&run)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let table = fs::read_to_string(run.join("ablation.csv")).unwrap();
    let n = cfg.ablation.kernel_sizes.len() * cfg.ablation.kernel_methods.len() * 4;
    assert_eq!(table.lines().count(), n + 1);
}
