// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::Path;

use knlab::corpus::Architecture;
use knlab::pipeline::{
    report_checksum, run_pipeline, RunConfig, RunReport, StageManifest, StageStatus, CORPUS_DIR, DKN_DIR, EDIT_DIR,
    FACT_CHECK_DIR, LIKN_DIR, LOCATE_DIR, REPORT_DIR, REPORT_JSON, TRAIN_DIR, XLING_DIR,
};
use knlab::Error;

fn workspace_file(rel: &str) -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

/// A configuration small enough to run end to end in a few seconds.
fn tiny(languages: &[&str]) -> RunConfig {
    let mut cfg = RunConfig::reference();
    cfg.corpus.languages = languages.iter().map(|s| s.to_string()).collect();
    cfg.corpus.facts_per_relation = 4;
    cfg.model.layers = 2;
    cfg.model.dim = 16;
    cfg.model.heads = 2;
    cfg.model.ffn_dim = 16;
    cfg.model.epochs = 80;
    cfg.model.learning_rate = 1e-2;
    cfg.model.ffn_dropout = 0.0;
    cfg.attribution.steps = 5;
    cfg.attribution.tau = cfg.corpus.languages.iter().map(|l| (l.clone(), 0.2)).collect();
    cfg.deterministic = true;
    cfg
}

#[test]
fn shipped_configs_parse_and_match_builtin_defaults() {
    let reference = RunConfig::load(&workspace_file("configs/reference.toml")).unwrap();
    let mut expected = RunConfig::reference();
    expected.out_dir = reference.out_dir.clone();
    assert_eq!(reference, expected);

    let mono = RunConfig::load(&workspace_file("configs/mono.toml")).unwrap();
    let mut expected = RunConfig::monolingual();
    expected.out_dir = mono.out_dir.clone();
    assert_eq!(mono, expected);
    assert!(!mono.is_multilingual());
}

#[test]
fn toml_round_trip_preserves_config() {
    let cfg = RunConfig::reference();
    assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
}

#[test]
fn unknown_keys_are_rejected() {
    let text = RunConfig::reference().to_toml().replace("seed = 7", "seed = 7\nsede = 8");
    assert!(RunConfig::from_toml(&text).is_err());
}

#[test]
fn missing_tau_for_a_language_is_a_config_error() {
    let mut cfg = RunConfig::reference();
    cfg.attribution.tau.remove("zh");
    assert!(matches!(cfg.validate(), Err(Error::Config(_))));
}

#[test]
fn invalid_thresholds_are_rejected() {
    let mut cfg = RunConfig::reference();
    cfg.dkn.t_low = 0.5;
    cfg.dkn.t_high = 0.4;
    assert!(cfg.validate().is_err());
    let mut cfg = RunConfig::reference();
    cfg.workers = Some(0);
    assert!(cfg.validate().is_err());
}

#[test]
fn execution_knobs_do_not_change_the_config_hash() {
    let a = RunConfig::reference();
    let mut b = a.clone();
    b.workers = Some(3);
    b.deterministic = true;
    b.out_dir = Some("elsewhere".into());
    assert_eq!(a.canonical_json(), b.canonical_json());
    b.seed += 1;
    assert_ne!(a.canonical_json(), b.canonical_json());
}

#[test]
fn deterministic_mode_uses_one_worker() {
    let mut cfg = RunConfig::reference();
    cfg.workers = Some(4);
    assert_eq!(cfg.effective_workers(), 4);
    cfg.deterministic = true;
    assert_eq!(cfg.effective_workers(), 1);
}

#[test]
fn full_run_writes_every_stage_and_rerun_reuses_them() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(&["en", "zh"]);
    let first = run_pipeline(&cfg, dir.path()).unwrap();

    let corpus = StageManifest::load(&dir.path().join(CORPUS_DIR)).unwrap();
    assert_eq!(corpus.status, StageStatus::Complete);
    for stage in [LOCATE_DIR, LIKN_DIR, DKN_DIR, EDIT_DIR, XLING_DIR, FACT_CHECK_DIR] {
        for arch in Architecture::ALL {
            let stage_dir = dir.path().join(stage).join(arch.tag());
            let m = StageManifest::load(&stage_dir).unwrap_or_else(|| panic!("no manifest in {}", stage_dir.display()));
            assert_eq!(m.status, StageStatus::Complete, "{}", stage_dir.display());
            assert!(!m.outputs.is_empty());
        }
    }
    for arch in Architecture::ALL {
        assert!(StageManifest::load(&dir.path().join(TRAIN_DIR).join(arch.tag())).is_some());
    }
    let report: RunReport = knlab::io::read_json(&dir.path().join(REPORT_DIR).join(REPORT_JSON)).unwrap();
    assert_eq!(report.languages, vec!["en".to_string(), "zh".to_string()]);
    assert_eq!(report.architectures.len(), 2);
    assert!(first.stages.iter().all(|s| !s.reused));

    let second = run_pipeline(&cfg, dir.path()).unwrap();
    assert!(second.stages.iter().all(|s| s.reused), "{:?}", second.stages);
    assert_eq!(first.report_checksum, second.report_checksum);
}

#[test]
fn tampered_output_forces_the_stage_to_rerun() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(&["en"]);
    let first = run_pipeline(&cfg, dir.path()).unwrap();
    let report = dir.path().join(REPORT_DIR).join("report.md");
    std::fs::write(&report, "tampered").unwrap();
    let second = run_pipeline(&cfg, dir.path()).unwrap();
    let report_log = second.stages.iter().find(|s| s.stage == "report").unwrap();
    assert!(!report_log.reused);
    assert_eq!(first.report_checksum, second.report_checksum);
    assert_eq!(report_checksum(dir.path()).unwrap(), first.report_checksum);
}

#[test]
fn monolingual_run_skips_cross_lingual_stages() {
    let dir = tempfile::tempdir().unwrap();
    run_pipeline(&tiny(&["en"]), dir.path()).unwrap();
    for stage in [LIKN_DIR, XLING_DIR] {
        let m = StageManifest::load(&dir.path().join(stage).join("ae")).unwrap();
        assert_eq!(m.status, StageStatus::Skipped);
    }
    let m = StageManifest::load(&dir.path().join(DKN_DIR).join("ar")).unwrap();
    assert_eq!(m.status, StageStatus::Complete);
}

#[test]
fn unreachable_accuracy_gate_fails_the_train_stage() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(&["en"]);
    cfg.model.epochs = 1;
    cfg.model.learning_rate = 1e-5;
    cfg.model.min_accuracy = 1.0;
    let err = run_pipeline(&cfg, dir.path()).unwrap_err();
    assert!(matches!(err, Error::Stage { .. }), "{err}");
    let m = StageManifest::load(&dir.path().join(TRAIN_DIR).join("ae")).unwrap();
    assert_eq!(m.status, StageStatus::Failed);
}
