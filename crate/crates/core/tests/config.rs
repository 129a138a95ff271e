use glomseg::config::{env_var_name, RunConfig};
use glomseg::Error;
use proptest::prelude::*;

fn pair() -> impl Strategy<Value = (String, String)> {
    prop_oneof![
        (0u64..1000).prop_map(|s| ("seed".into(), s.to_string())),
        "[a-z][a-z0-9_]{0,8}".prop_map(|r| ("run_id".into(), r)),
        prop::sample::select(vec!["segformer", "att_unet"]).prop_map(|a| ("model.arch".into(), a.into())),
        prop::sample::select(vec!["toy", "custom"]).prop_map(|v| ("model.variant".into(), v.into())),
        (1usize..5).prop_map(|d| ("model.decoder_dim".into(), (d * 16).to_string())),
        prop::sample::select(vec!["supervised", "fixmatch", "unimatch"]).prop_map(|m| ("train.method".into(), m.into())),
        (1u32..1000).prop_map(|l| ("train.lr".into(), format!("{}", l as f64 / 1e4))),
        (1u32..100).prop_map(|t| ("train.tau".into(), format!("{}", t as f64 / 100.0))),
        (1usize..9).prop_map(|b| ("train.batch_size_labeled".into(), b.to_string())),
        prop::sample::select(vec!["constant", "poly", "poly(0.5)"]).prop_map(|s| ("train.lr_schedule".into(), s.into())),
        prop::sample::select(vec!["0", "90", "0,180", "0,90,180,270"]).prop_map(|r| ("augment.weak.rotation_choices".into(), r.into())),
        prop::sample::select(vec!["unimatch_default", "paper_faithful", "none"]).prop_map(|p| ("augment.strong.preset".into(), p.into())),
        (0u32..=10).prop_map(|p| ("augment.strong.cutmix_prob".into(), format!("{}", p as f64 / 10.0))),
        prop::sample::select(vec!["micro", "macro"]).prop_map(|a| ("eval.aggregation".into(), a.into())),
        prop::sample::select(vec!["1/16,1/8,1", "1/2", "1/4,1"]).prop_map(|f| ("ablation.fractions".into(), f.into())),
        prop::sample::select(vec!["", "a.jsonl", "x/y.jsonl,z.jsonl"]).prop_map(|d| ("eval.datasets".into(), d.into())),
    ]
}

proptest! {
    #[test]
    fn snapshot_reloads_to_the_same_config(pairs in proptest::collection::vec(pair(), 0..12)) {
        let mut cfg = RunConfig::default();
        for (k, v) in &pairs {
            cfg.set(k, v).unwrap();
        }
        let back = RunConfig::from_text(&cfg.snapshot()).unwrap();
        prop_assert_eq!(&back, &cfg);
        prop_assert_eq!(back.snapshot(), cfg.snapshot());
    }
}

#[test]
fn later_sources_win() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.cfg");
    std::fs::write(&path, "seed = 1\ntrain.lr = 0.5 # comment\ntrain.epochs = 3\n").unwrap();
    let env = vec![
        (env_var_name("train.lr"), "0.25".to_string()),
        (env_var_name("train.epochs"), "4".to_string()),
        ("UNRELATED".to_string(), "x".to_string()),
    ];
    let overrides = vec![("train.epochs".to_string(), "5".to_string())];
    let cfg = RunConfig::resolve(Some(&path), env, &overrides).unwrap();
    assert_eq!(cfg.seed, 1);
    assert_eq!(cfg.get("train.lr").unwrap(), "0.25");
    assert_eq!(cfg.get("train.epochs").unwrap(), "5");
}

#[test]
fn unknown_key_is_named() {
    let err = RunConfig::from_text("train.lrr = 1").unwrap_err();
    assert!(matches!(err, Error::UnknownConfigKey { .. }));
    assert!(err.to_string().contains("train.lrr"));
}

#[test]
fn bad_values_are_config_errors() {
    for (k, v) in [("train.lr", "fast"), ("train.method", "meanteacher"), ("run_id", "a/b"), ("run_id", "")] {
        let mut cfg = RunConfig::default();
        assert!(matches!(cfg.set(k, v), Err(Error::Config(_))), "{k} = {v}");
    }
}

#[test]
fn size_keys_switch_to_a_custom_variant() {
    let mut cfg = RunConfig::default();
    cfg.set("model.variant", "b0").unwrap();
    cfg.set("model.decoder_dim", "64").unwrap();
    assert_eq!(cfg.get("model.variant").unwrap(), "custom");
    assert_eq!(cfg.model.decoder_dim, 64);
    cfg.set("model.variant", "b2").unwrap();
    assert_eq!(cfg.model.embed_dims, vec![64, 128, 320, 512]);
}

#[test]
fn seed_reaches_model_and_training() {
    let mut cfg = RunConfig::default();
    cfg.set("seed", "42").unwrap();
    assert_eq!(cfg.resolved_model().init_seed, 42);
    assert_eq!(cfg.resolved_train().seed, 42);
}
