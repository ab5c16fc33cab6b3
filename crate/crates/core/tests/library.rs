use std::collections::BTreeMap;

use relex::corpus::synth::{gen_synthetic, GenSpec};
use relex::corpus::{load_corpus_dir, write_split, Split};
use relex::neural::{Ablation, Model};
use relex::rulegen::{generate_ruleset, GenConfig, GenMode};
use relex::rules::{annotate_explanations, annotate_instances, parse_rules};
use relex::train::{train, TrainConfig};

fn small_config() -> TrainConfig {
    TrainConfig::from_toml_str(
        "burn_in_epochs = 1\ntotal_epochs = 3\n[model]\nd = 16\nlayers = 1\nheads = 2\nff_mult = 2\nlr = 3e-3\n",
    )
    .unwrap()
}

#[test]
fn corpus_files_round_trip_through_disk() {
    let mut spec = GenSpec::builtin();
    spec.train = 50;
    spec.dev = 10;
    spec.test = 20;
    let syn = gen_synthetic(&spec, 4).unwrap();
    let dir = tempfile::tempdir().unwrap();
    for split in [Split::Train, Split::Dev, Split::Test] {
        write_split(&dir.path().join(split.file_name()), syn.corpus.split(split)).unwrap();
    }
    let back = load_corpus_dir(dir.path()).unwrap();
    assert_eq!(back.train, syn.corpus.train);
    assert_eq!(back.test, syn.corpus.test);
    assert_eq!(back.relations, syn.corpus.relations);
}

#[test]
fn checkpoint_and_rules_survive_a_save_load_cycle() {
    let mut spec = GenSpec::builtin();
    spec.train = 120;
    spec.dev = 20;
    spec.test = 40;
    let syn = gen_synthetic(&spec, 8).unwrap();
    let annotations = annotate_explanations(&syn.manual_rules, &syn.corpus);
    let (mut model, log) = train(&syn.corpus, &annotations, &small_config(), Ablation::None).unwrap();
    assert_eq!(log.epochs.len(), 3);
    model.round_to_f32();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.bin");
    model.save(&path).unwrap();
    let loaded = Model::load(&path).unwrap();
    for inst in &syn.corpus.test {
        assert_eq!(model.predict(inst).unwrap(), loaded.predict(inst).unwrap());
    }

    let test_ann: BTreeMap<_, _> = annotate_instances(&syn.manual_rules, &syn.corpus.test);
    let rules = generate_ruleset(
        &loaded,
        &syn.corpus.test,
        &syn.manual_rules,
        GenMode::TestPredicted,
        &test_ann,
        &GenConfig::default(),
    )
    .unwrap();
    let rules_path = dir.path().join("gen.rules");
    rules.write(&rules_path).unwrap();
    assert_eq!(parse_rules(&rules_path).unwrap(), rules);
}
