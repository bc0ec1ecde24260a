use std::fs;
use std::path::Path;

use proptest::prelude::*;
use sega_core::config::RunConfig;
use sega_core::dataset::load_dataset;
use sega_core::pipeline::{load_prefs, run_pretrain, Prepared};
use sega_core::synth::{synth_generate, synth_to_dir, SynthConfig};

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    files.sort();
    files
}

#[test]
fn same_seed_same_bytes() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let config = SynthConfig::default();
    synth_to_dir(&config, a.path()).unwrap();
    synth_to_dir(&config, b.path()).unwrap();
    let ta = tree(a.path());
    assert_eq!(ta.len(), 6);
    assert_eq!(ta, tree(b.path()));

    let c = tempfile::tempdir().unwrap();
    synth_to_dir(&SynthConfig { seed: 8, ..config }, c.path()).unwrap();
    assert_ne!(ta, tree(c.path()));
}

#[test]
fn generated_directory_loads_back() {
    let dir = tempfile::tempdir().unwrap();
    let out = synth_to_dir(&SynthConfig::list_routed(3), dir.path()).unwrap();
    assert_eq!(load_dataset(dir.path()).unwrap(), out.graph);
    assert_eq!(load_prefs(dir.path()).unwrap(), out.prefs);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn any_small_config_is_valid(
        seed in any::<u64>(),
        normal in 0usize..12,
        bot in 0usize..6,
        troll in 1usize..6,
        lists in 0usize..5,
        homophily in 0.0f64..1.0,
    ) {
        let config = SynthConfig {
            seed,
            normal,
            bot,
            troll,
            lists,
            follow_homophily: homophily,
            list_homophily: 1.0 - homophily,
            ..SynthConfig::default()
        };
        let out = synth_generate(&config).unwrap();
        prop_assert_eq!(out.graph.validate(), Ok(()));
        prop_assert_eq!(out.graph.users().len(), normal + bot + troll);
        prop_assert!(out.graph.users().iter().all(|u| u.attrs.tweets.len() <= 20));
    }
}

#[test]
fn pretraining_loss_falls_on_the_default_dataset() {
    let out = synth_generate(&SynthConfig::default()).unwrap();
    let mut config = RunConfig::default();
    config.pretrain.epochs = 50;
    let prep = Prepared::new(&out.graph, &config).unwrap();
    let (_, log) = run_pretrain(&prep, &out.prefs, &config).unwrap();
    assert_eq!(log.len(), 50);
    assert!(log[49].loss < log[0].loss, "{} -> {}", log[0].loss, log[49].loss);
}
