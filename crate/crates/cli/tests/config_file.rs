use proptest::prelude::*;
use sam_cli::config_file::{load, parse, serialize};
use sam_cli::CliError;
use sam_core::harness::ExperimentConfig;
use sam_core::losses::GroupNllMode;
use sam_core::routers::RouterKind;
use sam_core::sim::Sharding;

#[test]
fn empty_text_is_the_default_config() {
    assert_eq!(parse("").unwrap(), ExperimentConfig::default());
    assert_eq!(parse("# nothing here\n\n   \n").unwrap(), ExperimentConfig::default());
}

#[test]
fn comments_and_whitespace() {
    let cfg = parse("  k=4 # four experts\n# router = switch\nrouter =  sam_shared\n").unwrap();
    assert_eq!(cfg.k, 4);
    assert_eq!(cfg.router, RouterKind::SamShared);
}

#[test]
fn order_does_not_matter() {
    let a = parse("d_model = 8\nk = 1\nrouter = switch\nlr = 0.5\n").unwrap();
    let b = parse("lr = 0.5\nrouter = switch\nd_model = 8\nk = 1\n").unwrap();
    assert_eq!(a, b);
}

#[test]
fn input_dim_follows_d_model_unless_given() {
    assert_eq!(parse("d_model = 768").unwrap().input_dim, 768);
    assert_eq!(parse("d_model = 768\ninput_dim = 5").unwrap().input_dim, 5);
}

#[test]
fn unknown_key_names_line_and_key() {
    let e = parse("k = 2\n\nlearning_rate = 0.1\n").unwrap_err();
    let m = e.to_string();
    assert!(matches!(e, CliError::Config(_)));
    assert!(m.contains("line 3") && m.contains("learning_rate"), "{m}");
}

#[test]
fn bad_value_names_line_and_key() {
    let m = parse("steps = many").unwrap_err().to_string();
    assert!(m.contains("line 1") && m.contains("steps"), "{m}");
    let m = parse("router = dense").unwrap_err().to_string();
    assert!(m.contains("router"), "{m}");
}

#[test]
fn malformed_and_duplicate_lines() {
    assert!(parse("k 2").unwrap_err().to_string().contains("line 1"));
    assert!(parse(" = 2").unwrap_err().to_string().contains("missing key"));
    let m = parse("k = 2\nk = 1").unwrap_err().to_string();
    assert!(m.contains("line 2") && m.contains("line 1"), "{m}");
}

#[test]
fn load_validates_and_applies_seed() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.cfg");
    std::fs::write(&p, "d_ffn_base = 64\nk = 3\n").unwrap();
    let m = load(&p, None).unwrap_err().to_string();
    assert!(m.contains("k must divide d_ffn_base"), "{m}");

    let p = dir.path().join("ok.cfg");
    std::fs::write(&p, "seed = 3\n").unwrap();
    assert_eq!(load(&p, None).unwrap().seed, 3);
    assert_eq!(load(&p, Some(9)).unwrap().seed, 9);
    assert!(load(&dir.path().join("missing.cfg"), None).is_err());
}

#[test]
fn serialized_form_lists_every_key_once() {
    let text = serialize(&ExperimentConfig::default());
    let keys: Vec<&str> = text.lines().map(|l| l.split(" = ").next().unwrap()).collect();
    assert_eq!(keys, ExperimentConfig::KEYS.to_vec());
}

fn float() -> impl Strategy<Value = f64> {
    prop_oneof![
        any::<f64>().prop_filter("finite", |x| x.is_finite()),
        (0.0..1.0f64),
        Just(1e-8),
        Just(0.1 + 0.2),
    ]
}

prop_compose! {
    fn config()(
        sizes in proptest::collection::vec(1usize..5000, 12),
        floats in proptest::collection::vec(float(), 12),
        seed in any::<u64>(),
        bpe in 1u64..64,
        router in 0usize..4,
        nll in any::<bool>(),
        fixed in any::<bool>(),
    ) -> ExperimentConfig {
        ExperimentConfig {
            d_model: sizes[0],
            d_ffn_base: sizes[1],
            n_groups: sizes[2],
            experts_per_group: sizes[3],
            k: sizes[4],
            router: RouterKind::ALL[router],
            capacity_factor: floats[0],
            alpha_balance: floats[1],
            alpha_align: floats[2],
            group_nll_mode: if nll { GroupNllMode::Logits } else { GroupNllMode::Verbatim },
            noise_scale: floats[3],
            router_init_std: floats[4],
            sharding: if fixed { Sharding::Fixed } else { Sharding::RoundRobin },
            bytes_per_element: bpe,
            adam_beta1: floats[5],
            adam_beta2: floats[6],
            adam_eps: floats[7],
            lr: floats[8],
            batch_size: sizes[5],
            steps: sizes[6],
            seed,
            n_clusters: sizes[7],
            input_dim: sizes[8],
            noise_std: floats[9],
            center_scale: floats[10],
            eval_size: sizes[9],
        }
    }
}

proptest! {
    #[test]
    fn round_trip_is_lossless(cfg in config()) {
        let text = serialize(&cfg);
        let back = parse(&text).unwrap();
        prop_assert_eq!(&back, &cfg);
        prop_assert_eq!(serialize(&back), text);
    }
}
