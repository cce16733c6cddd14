use std::collections::BTreeMap;

use dpvqa::synth::corpus::{majority_rates, BIAS_GATE};
use dpvqa::synth::{decode_features, generate_corpus, oracle_answer, render_features, Corpus, CorpusConfig, Template};

fn corpus(seed: u64, items: usize) -> Corpus {
    generate_corpus(&CorpusConfig::new(seed, items)).unwrap()
}

#[test]
fn answers_within_one_and_a_half_of_uniform_per_template() {
    let cfg = CorpusConfig::new(21, 10_000);
    let c = generate_corpus(&cfg).unwrap();
    let mut counts: BTreeMap<Template, BTreeMap<String, usize>> = BTreeMap::new();
    for it in &c.items {
        *counts.entry(it.template).or_default().entry(it.answer.to_string()).or_default() += 1;
    }
    for (t, by_answer) in counts {
        let space = t.answer_space(cfg.scene.max_objects, cfg.scene.max_repeat);
        let n: usize = by_answer.values().sum();
        let uniform = n as f64 / space.len() as f64;
        for a in space {
            let k = by_answer.get(&a.to_string()).copied().unwrap_or(0) as f64;
            assert!(
                k <= 1.5 * uniform && k >= uniform / 1.5,
                "{t:?} answer {a}: {k} vs uniform {uniform:.1}"
            );
        }
    }
}

#[test]
fn stored_answers_survive_render_and_decode() {
    let c = corpus(4, 2000);
    let decoded: Vec<_> = c.scenes.iter().map(|s| decode_features(&render_features(s)).unwrap()).collect();
    for it in &c.items {
        assert_eq!(oracle_answer(&decoded[it.scene_id], &it.program).as_ref(), Some(&it.answer), "item {}", it.id);
    }
    assert!(c.inconsistent_items().is_empty());
}

#[test]
fn regeneration_is_identical() {
    assert_eq!(corpus(9, 500), corpus(9, 500));
}

#[test]
fn temporal_templates_pass_the_bias_gate() {
    for (t, (rate, n)) in majority_rates(&corpus(3, 8000).items) {
        if t.task().is_temporal() {
            assert!(rate < BIAS_GATE, "{t:?}: {rate} over {n}");
        }
    }
}
