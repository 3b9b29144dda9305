use smart_core::checkpoint::Container;
use smart_core::config::RunConfig;
use smart_core::data::{build_vocab, encode_pairs, generate, EncodedPair, Task, TaskSpec};
use smart_core::examplegen::{make_nart_example, make_smart_draws, MaskPolicy, SmartOptions};
use smart_core::model::{CmlmConfig, CmlmModel, OracleModel};
use smart_core::rng::SplitMix64;
use smart_core::tensor::gradcheck::GradcheckOptions;
use smart_core::tensor::{Graph, OpKind};
use smart_core::train::{
    check_vocab, gradcheck_cmlm, loss_and_gradients, parse_meta, restore, Batch, MemorySink, TrainConfig,
    TrainMode, Trainer,
};
use smart_core::vocab::Vocab;
use smart_core::Error;

fn tiny_run(mode: TrainMode) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.task = TaskSpec {
        task: Task::Copy,
        vocab_size: 8,
        min_len: 2,
        max_len: 5,
        train_size: 40,
        dev_size: 8,
        test_size: 8,
        seed: 3,
        max_target_len: 8,
    };
    cfg.model = CmlmConfig {
        dropout: 0.1,
        ..CmlmConfig::tiny()
    };
    cfg.train.mode = mode;
    cfg.train.batch_size = 6;
    cfg.train.updates = 6;
    cfg.train.warmup = 2;
    cfg.train.peak_lr = 3e-3;
    cfg.train.log_interval = 2;
    cfg.train.checkpoint_interval = 3;
    cfg.eval.dev_sentences = 4;
    cfg.eval.length_beam = 2;
    cfg
}

fn data(cfg: &RunConfig) -> (Vocab, Vec<EncodedPair>, Vec<EncodedPair>) {
    let corpus = generate(&cfg.task).unwrap();
    let vocab = build_vocab(&corpus);
    let train = encode_pairs(&vocab, &corpus.train);
    let dev = encode_pairs(&vocab, &corpus.dev);
    (vocab, train, dev)
}

fn run(cfg: &RunConfig) -> MemorySink {
    let (vocab, train, dev) = data(cfg);
    let mut t = Trainer::new(cfg.clone(), vocab, &train, &dev).unwrap();
    let mut sink = MemorySink::default();
    t.run(&mut sink).unwrap();
    sink
}

#[test]
fn full_objective_gradcheck() {
    let start = std::time::Instant::now();
    let report = gradcheck_cmlm(1, &GradcheckOptions::default()).unwrap();
    for g in report.failing() {
        eprintln!("{} {:e}", g.name, g.max_rel_err);
    }
    assert!(report.passed());
    assert!(report.groups.iter().all(|g| g.entries_checked > 0));
    assert!(start.elapsed().as_secs() < 60);
}

#[test]
fn corrupted_backward_rules_are_caught() {
    for op in [OpKind::MatMul, OpKind::Softmax, OpKind::LayerNorm, OpKind::LogSoftmax, OpKind::Embedding] {
        let opts = GradcheckOptions {
            fault: Some(op),
            ..GradcheckOptions::default()
        };
        let report = gradcheck_cmlm(1, &opts).unwrap();
        assert!(!report.passed(), "fault in {} went unnoticed", op.name());
    }
}

#[test]
fn smart_with_copy_oracle_reduces_to_nart() {
    let mut cfg = tiny_run(TrainMode::Smart);
    cfg.task.train_size = 200;
    let (_, train, _) = data(&cfg);
    let oracle = OracleModel::new(
        train.iter().map(|p| (p.source.as_slice(), p.target.as_slice())),
        build_vocab(&generate(&cfg.task).unwrap()).len(),
        cfg.model.max_len,
    );
    let opts = SmartOptions {
        passes: 2,
        policy: MaskPolicy::FixedRatio(0.0),
    };
    let model: CmlmModel<f64> = CmlmModel::new(CmlmConfig::tiny(), oracle_vocab(&cfg), 5).unwrap();
    let tc = TrainConfig::default();
    for round in 0..5u64 {
        let pairs: Vec<(&[u32], &[u32])> = train
            .iter()
            .map(|p| (p.source.as_slice(), p.target.as_slice()))
            .collect();
        let mut smart_rngs: Vec<SplitMix64> = (0..pairs.len()).map(|i| SplitMix64::stream(round, &[i as u64])).collect();
        let draws = make_smart_draws(&oracle, &pairs, &opts, &mut smart_rngs).unwrap();
        let mut nart = Vec::new();
        for (i, (&(src, gold), d)) in pairs.iter().zip(&draws).enumerate() {
            let mut rng = SplitMix64::stream(round, &[i as u64]);
            let mut ex = make_nart_example(src, gold, MaskPolicy::Uniform, &mut rng);
            assert_eq!(d.example.input, ex.input);
            assert_eq!(d.example.gold, ex.gold);
            assert!(d.example.loss_mask.iter().all(|&m| m));
            ex.loss_mask = vec![true; ex.gold.len()];
            assert_eq!(d.example, ex);
            nart.push(ex);
        }
        let smart_batch = Batch::new(draws.into_iter().map(|d| d.example).take(8).collect());
        let nart_batch = Batch::new(nart.into_iter().take(8).collect());
        let (ls, gs) = loss_and_gradients(&model, &smart_batch, &tc).unwrap();
        let (ln, gn) = loss_and_gradients(&model, &nart_batch, &tc).unwrap();
        assert_eq!(ls, ln);
        assert_eq!(gs, gn);
    }
}

fn oracle_vocab(cfg: &RunConfig) -> usize {
    build_vocab(&generate(&cfg.task).unwrap()).len()
}

#[test]
fn padding_columns_do_not_change_outputs() {
    let model: CmlmModel<f64> = CmlmModel::new(CmlmConfig::tiny(), 12, 2).unwrap();
    let (sa, ta): (Vec<u32>, Vec<u32>) = (vec![5, 6, 3], vec![1, 7, 3]);
    let (sb, tb): (Vec<u32>, Vec<u32>) = (vec![5, 6, 7, 8, 9, 10, 3], vec![1, 1, 8, 9, 10, 11, 1, 3]);
    let outputs = |sources: &[&[u32]], targets: &[&[u32]]| {
        let mut g = Graph::new();
        let p = model.bind(&mut g, false).unwrap();
        let out = model.forward(&mut g, &p, sources, targets, &mut None).unwrap();
        let v = g.value(out.token_log_probs).data().to_vec();
        let l = g.value(out.length_log_probs).data().to_vec();
        (v, l, out.tgt_width)
    };
    let (alone, len_alone, _) = outputs(&[&sa], &[&ta]);
    let (padded, len_padded, width) = outputs(&[&sa, &sb], &[&ta, &tb]);
    assert!(width > ta.len());
    for (x, y) in alone.iter().zip(&padded[..alone.len()]) {
        assert!((x - y).abs() < 1e-10);
    }
    for (x, y) in len_alone.iter().zip(&len_padded) {
        assert!((x - y).abs() < 1e-10);
    }
}

#[test]
fn training_is_deterministic() {
    for mode in [TrainMode::Nart, TrainMode::Smart] {
        let cfg = tiny_run(mode);
        let a = run(&cfg);
        let b = run(&cfg);
        assert_eq!(a.records, b.records);
        assert_eq!(a.checkpoints, b.checkpoints);
        assert_eq!(a.records.len(), 3);
        let updates: Vec<u64> = a.checkpoints.iter().map(|c| c.0).collect();
        assert_eq!(updates, [0, 3, 6]);
    }
}

#[test]
fn resume_reproduces_the_uninterrupted_run() {
    for mode in [TrainMode::Nart, TrainMode::Smart] {
        let cfg = tiny_run(mode);
        let full = run(&cfg);
        let (vocab, train, dev) = data(&cfg);
        let (_, mid) = full.checkpoints.iter().find(|c| c.0 == 3).unwrap();
        let container = Container::from_bytes(mid).unwrap();
        let mut t = Trainer::resume(&container, None, &vocab, &train, &dev).unwrap();
        assert_eq!(t.update(), 3);
        let mut sink = MemorySink::default();
        t.run(&mut sink).unwrap();
        assert_eq!(sink.checkpoints.last(), full.checkpoints.last());
        let tail: Vec<_> = full.records.iter().filter(|r| r.update > 3).cloned().collect();
        assert_eq!(sink.records, tail);
    }
}

#[test]
fn checkpoint_round_trip_is_byte_identical() {
    let cfg = tiny_run(TrainMode::Smart);
    let sink = run(&cfg);
    let bytes = &sink.checkpoints.last().unwrap().1;
    let c = Container::from_bytes(bytes).unwrap();
    assert_eq!(&c.to_bytes(), bytes);
    let r = restore(&c).unwrap();
    assert_eq!(r.meta.update, 6);
    assert_eq!(r.meta.config, cfg);
    assert_eq!(r.adam.step, 6);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.smck");
    c.save(&path).unwrap();
    assert_eq!(&std::fs::read(&path).unwrap(), bytes);
    assert_eq!(&Container::load(&path).unwrap().to_bytes(), bytes);
}

#[test]
fn zero_updates_store_only_the_initial_checkpoint() {
    let mut cfg = tiny_run(TrainMode::Nart);
    cfg.train.updates = 0;
    let sink = run(&cfg);
    assert!(sink.records.is_empty());
    assert_eq!(sink.checkpoints.len(), 1);
    assert_eq!(sink.checkpoints[0].0, 0);
    let c = Container::from_bytes(&sink.checkpoints[0].1).unwrap();
    assert_eq!(parse_meta(&c).unwrap().update, 0);
}

#[test]
fn divergence_names_the_last_good_checkpoint() {
    let mut cfg = tiny_run(TrainMode::Nart);
    cfg.train.peak_lr = 1e30;
    cfg.train.updates = 20;
    cfg.train.warmup = 1;
    let (vocab, train, dev) = data(&cfg);
    let mut t = Trainer::new(cfg, vocab, &train, &dev).unwrap();
    let mut sink = MemorySink::default();
    match t.run(&mut sink) {
        Err(Error::Diverged { update, last_good, .. }) => {
            let (stored, _) = sink.checkpoints.last().unwrap();
            assert!(*stored < update);
            assert!(last_good.contains(&format!("update {stored}")), "{last_good}");
        }
        other => panic!("expected divergence, got {:?}", other.map(|s| s.updates)),
    }
}

#[test]
fn vocabulary_mismatch_names_both_hashes() {
    let cfg = tiny_run(TrainMode::Nart);
    let sink = run(&cfg);
    let meta = parse_meta(&Container::from_bytes(&sink.checkpoints[0].1).unwrap()).unwrap();
    let other = Vocab::new(["zz"]);
    match check_vocab(&meta, &other) {
        Err(e @ Error::VocabMismatch { .. }) => {
            let msg = e.to_string();
            assert!(msg.contains(&meta.vocab_hash) && msg.contains(&other.fingerprint()));
        }
        other => panic!("expected mismatch, got {other:?}"),
    }
}

#[test]
fn first_pass_loss_adds_examples() {
    let mut cfg = tiny_run(TrainMode::Smart);
    cfg.train.smart.first_pass_loss = true;
    let (vocab, train, dev) = data(&cfg);
    let mut t = Trainer::new(cfg, vocab, &train, &dev).unwrap();
    let batch = t.make_batch(1).unwrap();
    assert_eq!(batch.primary, 6);
    assert_eq!(batch.examples.len(), 12);
    assert!(batch.examples[..6].iter().all(|e| e.loss_mask.iter().all(|&m| m)));
    assert!(t.step().unwrap().first_pass.is_some());
}
