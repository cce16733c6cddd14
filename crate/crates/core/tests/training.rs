use std::fs;

use dpvqa::harness::checkpoint::Checkpoint;
use dpvqa::harness::train::{
    eval_policy, evaluate_checkpoint, evaluate_checkpoint_on, train_on, train_to_dir, Dataset, Session,
    CHECKPOINT_FILE, METRICS_FILE,
};
use dpvqa::harness::{MetricsRecord, RunConfig};
use dpvqa::model::Variant;
use dpvqa::optim::Adam;
use dpvqa::synth::{generate_corpus, CorpusConfig, Split};
use dpvqa::video::SubsetPolicy;
use dpvqa::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn micro() -> Dataset {
    Dataset::from_corpus(generate_corpus(&CorpusConfig::new(11, 120)).unwrap()).unwrap()
}

fn cfg(variant: Variant) -> RunConfig {
    RunConfig {
        variant,
        clips: 5,
        clip_len: 8,
        max_order: 3,
        dim: 16,
        steps: 3,
        embed_dim: 12,
        frames: 8,
        subset_cap: 6,
        epochs: 2,
        batch_size: 8,
        limit: 24,
        seed: 5,
        workers: 1,
        ..RunConfig::default()
    }
}

#[test]
fn one_epoch_on_ten_items_writes_one_record_per_split() {
    let data = micro();
    let dir = tempfile::tempdir().unwrap();
    let c = RunConfig {
        epochs: 1,
        limit: 10,
        out: Some(dir.path().to_path_buf()),
        ..cfg(Variant::CrnMac)
    };
    let s = train_to_dir(&c, &data).unwrap();
    assert_eq!(s.records.len(), 3);
    let text = fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap();
    let lines: Vec<MetricsRecord> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    let splits: Vec<Split> = lines.iter().map(|r| r.split).collect();
    assert_eq!(splits, vec![Split::Train, Split::Val, Split::Test]);
    assert!(lines.iter().all(|r| r.items == 10));
    assert!(dir.path().join(CHECKPOINT_FILE).exists());
}

#[test]
fn fixed_batch_loss_strictly_decreases_at_default_rate() {
    let data = micro();
    let c = cfg(Variant::CrnMac);
    assert_eq!(c.learning_rate(), 1e-4);
    let mut s = Session::<f32>::new(&c, &data).unwrap();
    let batch: Vec<usize> = data.split_items(Split::Train, &c).into_iter().take(16).collect();
    let policy = SubsetPolicy::Capped { cap: c.subset_cap, seed: 1 };
    let mut opt = Adam::new(c.learning_rate());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut losses = Vec::new();
    for _ in 0..21 {
        let preds = s.train_batch(&mut opt, &batch, &policy, &mut rng).unwrap();
        losses.push(preds.iter().map(|p| p.loss).sum::<f64>() / preds.len() as f64);
    }
    for w in losses.windows(2) {
        assert!(w[1] < w[0], "loss went {} -> {}: {losses:?}", w[0], w[1]);
    }
}

#[test]
fn same_seed_same_metrics() {
    let data = micro();
    for v in [Variant::CrnMac, Variant::SframeMac] {
        let c = RunConfig { dropout: 0.1, ..cfg(v) };
        let a = train_on::<f32>(&c, &data, |_| Ok(())).unwrap();
        let b = train_on::<f32>(&c, &data, |_| Ok(())).unwrap();
        let strip = |r: &[MetricsRecord]| r.iter().map(MetricsRecord::without_time).collect::<Vec<_>>();
        assert_eq!(strip(&a.records), strip(&b.records));
        for (p, q) in a.store.iter().zip(b.store.iter()) {
            assert_eq!(p.value, q.value);
        }
    }
}

#[test]
fn checkpoint_round_trip_evaluates_identically() {
    let data = micro();
    let dir = tempfile::tempdir().unwrap();
    let c = RunConfig {
        out: Some(dir.path().to_path_buf()),
        ..cfg(Variant::CrnMac)
    };
    let s = train_to_dir(&c, &data).unwrap();
    let ck = Checkpoint::load(&dir.path().join(CHECKPOINT_FILE)).unwrap();
    let again = evaluate_checkpoint_on(&ck, &data, Split::Test).unwrap();
    assert_eq!(again.without_time(), MetricsRecord { epoch: 0, ..s.test.without_time() });
}

#[test]
fn eval_reads_corpus_from_disk() {
    let corpus = generate_corpus(&CorpusConfig::new(11, 120)).unwrap();
    let cdir = tempfile::tempdir().unwrap();
    corpus.write(cdir.path()).unwrap();
    let data = Dataset::load(cdir.path(), 2).unwrap();
    let odir = tempfile::tempdir().unwrap();
    let c = RunConfig {
        epochs: 1,
        corpus: Some(cdir.path().to_path_buf()),
        out: Some(odir.path().to_path_buf()),
        ..cfg(Variant::TrnMac)
    };
    let s = train_to_dir(&c, &data).unwrap();
    let r = evaluate_checkpoint(&odir.path().join(CHECKPOINT_FILE), Split::Test, None).unwrap();
    assert_eq!(r.accuracy, s.test.accuracy);
    assert_eq!(r.loss, s.test.loss);
}

#[test]
fn checkpoint_from_other_variant_is_rejected() {
    let data = micro();
    let dir = tempfile::tempdir().unwrap();
    let c = RunConfig {
        epochs: 1,
        limit: 4,
        out: Some(dir.path().to_path_buf()),
        ..cfg(Variant::CrnMac)
    };
    train_to_dir(&c, &data).unwrap();
    let mut ck = Checkpoint::load(&dir.path().join(CHECKPOINT_FILE)).unwrap();
    ck.config_text = ck.config_text.replace("variant=crn_mac", "variant=avgpool_mac");
    assert!(matches!(evaluate_checkpoint_on(&ck, &data, Split::Test), Err(Error::Ingestion(_))));
}

#[test]
fn evaluation_is_repeatable() {
    let data = micro();
    let c = cfg(Variant::CrnMac);
    let mut s = Session::<f32>::new(&c, &data).unwrap();
    let items = data.split_items(Split::Val, &c);
    let a = s.evaluate_items(&items, &eval_policy(&c)).unwrap();
    let b = s.evaluate_items(&items, &eval_policy(&c)).unwrap();
    assert_eq!(a, b);
}
