//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! The trend criteria train the desk-scale profile in `configs/acceptance.toml`
//! (eleven models on the default cipher_expand task), so a full run takes
//! about an hour on a single core.

use std::time::Instant;

use smart_core::ablate::{run_ablation, ModelCache, Which};
use smart_core::checkpoint::Container;
use smart_core::config::RunConfig;
use smart_core::data::{build_vocab, encode_pairs, generate, EncodedPair, Task, TaskSpec};
use smart_core::decode::{mask_count, mask_predict, DecodeOptions, Variant};
use smart_core::examplegen::{make_nart_example, make_smart_draws, MaskPolicy, SmartOptions};
use smart_core::metrics::{bleu, corpus_bleu};
use smart_core::model::{Cmlm, LogProbTable, OracleModel};
use smart_core::rng::SplitMix64;
use smart_core::tensor::gradcheck::GradcheckOptions;
use smart_core::train::{gradcheck_cmlm, MemorySink, TrainMode, Trainer};
use smart_core::vocab::EOS;

const PROFILE: &str = include_str!("../../../configs/acceptance.toml");
const TINY: &str = include_str!("../../../configs/tiny.toml");
const SEEDS: [u64; 3] = [1, 2, 3];

type Outcome = Result<(bool, String), String>;

fn report(id: usize, name: &str, outcome: Outcome, start: Instant) -> bool {
    let secs = start.elapsed().as_secs_f64();
    let (ok, detail) = match outcome {
        Ok(v) => v,
        Err(e) => (false, format!("error: {e}")),
    };
    println!(
        "{} [{id:>2}] {name}: {detail} ({secs:.1}s)",
        if ok { "PASS" } else { "FAIL" }
    );
    ok
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let r = gradcheck_cmlm(1, &GradcheckOptions::default()).map_err(|e| e.to_string())?;
    let worst = r.groups.iter().map(|g| g.max_rel_err).fold(0.0, f64::max);
    let secs = start.elapsed().as_secs_f64();
    Ok((
        r.passed() && secs < 60.0,
        format!("{} groups, max rel err {worst:.2e}, {secs:.1}s", r.groups.len()),
    ))
}

fn oracle_decoding() -> Outcome {
    let mut worst = 100.0f64;
    for task in [Task::Copy, Task::Reverse, Task::CipherSwap, Task::CipherExpand] {
        let spec = TaskSpec {
            task,
            train_size: 100,
            ..TaskSpec::default()
        };
        let corpus = generate(&spec).map_err(|e| e.to_string())?;
        let vocab = build_vocab(&corpus);
        let test = encode_pairs(&vocab, &corpus.test);
        let oracle = OracleModel::from_vocab(&test, &vocab, 32);
        for t in [1, 4, 10] {
            let opts = DecodeOptions::new(t, 1, Variant::MaskedOnly);
            let sources: Vec<&[u32]> = test.iter().map(|p| p.source.as_slice()).collect();
            let hyps = smart_core::metrics::decode_corpus(&oracle, &sources, &opts).map_err(|e| e.to_string())?;
            if hyps.iter().zip(&test).any(|(h, p)| h.tokens != p.target) {
                return Ok((false, format!("{task} T={t}: output differs from the reference")));
            }
            worst = worst.min(corpus_bleu(&oracle, &test, &opts).map_err(|e| e.to_string())?);
        }
    }
    Ok(((worst - 100.0).abs() < 1e-9, format!("min BLEU {worst:.4} over 4 tasks x T in {{1,4,10}}")))
}

/// Deterministic pseudo-random predictions with a length head peaked at `length`.
struct NoisyModel {
    length: usize,
}

impl Cmlm for NoisyModel {
    type Encoded = Vec<Vec<u32>>;

    fn vocab_size(&self) -> usize {
        12
    }

    fn max_len(&self) -> usize {
        64
    }

    fn encode(&self, sources: &[&[u32]]) -> smart_core::Result<Self::Encoded> {
        Ok(sources.iter().map(|s| s.to_vec()).collect())
    }

    fn length_log_probs(&self, enc: &Self::Encoded) -> smart_core::Result<Vec<Vec<f32>>> {
        let row: Vec<f32> = (1..=64).map(|n| -((n as f32 - self.length as f32).abs()) - 1.0).collect();
        Ok(vec![row; enc.len()])
    }

    fn token_log_probs(
        &self,
        enc: &Self::Encoded,
        rows: &[usize],
        targets: &[&[u32]],
    ) -> smart_core::Result<Vec<LogProbTable>> {
        Ok(rows
            .iter()
            .zip(targets)
            .map(|(&r, t)| {
                let mut data = Vec::with_capacity(t.len() * 12);
                for i in 0..t.len() {
                    let key: Vec<u64> = enc[r]
                        .iter()
                        .chain(t.iter())
                        .map(|&x| x as u64)
                        .chain([i as u64])
                        .collect();
                    let mut rng = SplitMix64::stream(7, &key);
                    let logits: Vec<f64> = (0..12).map(|_| 3.0 * rng.next_f64()).collect();
                    let lse = logits.iter().map(|l| l.exp()).sum::<f64>().ln();
                    data.extend(logits.iter().map(|l| (l - lse) as f32));
                }
                LogProbTable {
                    len: t.len(),
                    vocab: 12,
                    data,
                }
            })
            .collect())
    }
}

fn schedule() -> Outcome {
    let mut rng = SplitMix64::new(2024);
    for case in 0..1000 {
        let n = rng.range_inclusive(1, 40);
        let total = rng.range_inclusive(1, 12);
        let mut prev = n;
        for t in 1..=total {
            let c = mask_count(n, t, total);
            let bad = (t == 1 && c != n) || c < 1 || c > prev;
            if bad {
                return Ok((false, format!("mask_count({n}, {t}, {total}) = {c}")));
            }
            prev = c;
        }
        let variant = if case % 2 == 0 { Variant::MaskedOnly } else { Variant::AllTokens };
        let src: Vec<u32> = (0..3).map(|_| 5 + rng.below(7) as u32).chain([EOS]).collect();
        let model = NoisyModel { length: n };
        let r = mask_predict(&model, &[&src], &DecodeOptions::new(total, 1, variant)).map_err(|e| e.to_string())?;
        let trace = r[0].best_trace();
        let counts: Vec<usize> = trace.iterations.iter().map(|it| it.masked.len()).collect();
        let expect: Vec<usize> = (1..=total).map(|t| mask_count(n, t, total)).collect();
        if trace.length != n || counts != expect {
            return Ok((false, format!("N={n} T={total}: trace masks {counts:?}, schedule {expect:?}")));
        }
    }
    Ok((true, "1000 random (N, T) pairs".into()))
}

fn smart_reduction() -> Outcome {
    let spec = TaskSpec {
        task: Task::CipherExpand,
        train_size: 1000,
        ..TaskSpec::default()
    };
    let corpus = generate(&spec).map_err(|e| e.to_string())?;
    let vocab = build_vocab(&corpus);
    let train = encode_pairs(&vocab, &corpus.train);
    let oracle = OracleModel::from_vocab(&train, &vocab, 32);
    let pairs: Vec<(&[u32], &[u32])> = train.iter().map(|p| (p.source.as_slice(), p.target.as_slice())).collect();
    let opts = SmartOptions {
        passes: 2,
        policy: MaskPolicy::FixedRatio(0.0),
    };
    let mut rngs: Vec<SplitMix64> = (0..pairs.len()).map(|i| SplitMix64::stream(11, &[i as u64])).collect();
    let draws = make_smart_draws(&oracle, &pairs, &opts, &mut rngs).map_err(|e| e.to_string())?;
    for (i, (&(src, gold), d)) in pairs.iter().zip(&draws).enumerate() {
        let mut rng = SplitMix64::stream(11, &[i as u64]);
        let nart = make_nart_example(src, gold, MaskPolicy::Uniform, &mut rng);
        let same = d.example.source == nart.source && d.example.input == nart.input && d.example.gold == nart.gold;
        if !same {
            return Ok((false, format!("example {i} differs outside loss_mask")));
        }
    }
    Ok((true, format!("{} examples", draws.len())))
}

/// Test BLEU at T = 1, 4, 10 for one trained model.
struct Scores {
    label: String,
    t1: f64,
    t4: f64,
    t10: f64,
}

struct Trends {
    nart: Vec<Scores>,
    smart: Vec<Scores>,
    /// (masked_only, all_tokens) dev BLEU at T=4 per SMART seed.
    repredict: Vec<(f64, f64)>,
    ablation: Option<smart_core::ablate::AblationTable>,
    ablation_error: Option<String>,
}

fn bleu_at(model: &impl Cmlm, pairs: &[EncodedPair], t: usize, beam: usize, v: Variant) -> smart_core::Result<f64> {
    corpus_bleu(model, pairs, &DecodeOptions::new(t, beam, v))
}

fn train_trends() -> Result<Trends, String> {
    let base = RunConfig::from_toml(PROFILE).map_err(|e| e.to_string())?;
    let corpus = generate(&base.task).map_err(|e| e.to_string())?;
    let vocab = build_vocab(&corpus);
    let train = encode_pairs(&vocab, &corpus.train);
    let dev = encode_pairs(&vocab, &corpus.dev);
    let test = encode_pairs(&vocab, &corpus.test);
    let beam = base.eval.length_beam;
    let mut cache = ModelCache::new(&vocab, &train, &dev);
    let mut out = Trends {
        nart: Vec::new(),
        smart: Vec::new(),
        repredict: Vec::new(),
        ablation: None,
        ablation_error: None,
    };
    for mode in [TrainMode::Nart, TrainMode::Smart] {
        let variant = base.eval.variant_for(mode);
        for seed in SEEDS {
            let mut cfg = base.clone();
            cfg.train.mode = mode;
            cfg.train.seed = seed;
            let start = Instant::now();
            let model = cache.get_or_train(&cfg).map_err(|e| e.to_string())?;
            let s = Scores {
                label: format!("{mode:?} seed {seed}"),
                t1: bleu_at(model, &test, 1, beam, variant).map_err(|e| e.to_string())?,
                t4: bleu_at(model, &test, 4, beam, variant).map_err(|e| e.to_string())?,
                t10: bleu_at(model, &test, 10, beam, variant).map_err(|e| e.to_string())?,
            };
            println!(
                "  {:<16} test BLEU T1 {:6.2}  T4 {:6.2}  T10 {:6.2}  ({:.0}s)",
                s.label,
                s.t1,
                s.t4,
                s.t10,
                start.elapsed().as_secs_f64()
            );
            if mode == TrainMode::Smart {
                let m = bleu_at(model, &dev, 4, beam, Variant::MaskedOnly).map_err(|e| e.to_string())?;
                let a = bleu_at(model, &dev, 4, beam, Variant::AllTokens).map_err(|e| e.to_string())?;
                println!("  {:<16} dev BLEU T4 masked_only {m:6.2}  all_tokens {a:6.2}", s.label);
                out.repredict.push((m, a));
                out.smart.push(s);
            } else {
                out.nart.push(s);
            }
        }
    }
    let mut smart_base = base.clone();
    smart_base.train.mode = TrainMode::Smart;
    match run_ablation(&mut cache, &smart_base, Which::MaskRatio, &dev) {
        Ok(table) => {
            for line in table.to_table().lines() {
                println!("  {line}");
            }
            out.ablation = Some(table);
        }
        Err(e) => out.ablation_error = Some(e.to_string()),
    }
    Ok(out)
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn smart_vs_nart(tr: &Trends) -> Outcome {
    let (n4, n10) = (mean(tr.nart.iter().map(|s| s.t4)), mean(tr.nart.iter().map(|s| s.t10)));
    let (s4, s10) = (mean(tr.smart.iter().map(|s| s.t4)), mean(tr.smart.iter().map(|s| s.t10)));
    Ok((
        s4 >= n4 && s10 >= n10 && s4 - n4 >= 0.3,
        format!("T4 SMART {s4:.2} vs NART {n4:.2} ({:+.2}); T10 SMART {s10:.2} vs NART {n10:.2} ({:+.2})", s4 - n4, s10 - n10),
    ))
}

fn iterations_help(tr: &Trends) -> Outcome {
    let mut gaps: Vec<(String, f64)> = tr
        .nart
        .iter()
        .chain(&tr.smart)
        .map(|s| (s.label.clone(), s.t10 - s.t1))
        .collect();
    if let Some(table) = &tr.ablation {
        let (i1, i10) = (
            table.iterations.iter().position(|&t| t == 1),
            table.iterations.iter().position(|&t| t == 10),
        );
        if let (Some(i1), Some(i10)) = (i1, i10) {
            for row in &table.rows {
                for (k, cells) in row.per_seed.iter().enumerate() {
                    gaps.push((format!("mask {} #{}", row.label, k + 1), cells[i10] - cells[i1]));
                }
            }
        }
    }
    let (worst, gap) = gaps
        .iter()
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .cloned()
        .ok_or("no trained models")?;
    let failing = gaps.iter().filter(|g| g.1 < 2.0).count();
    Ok((
        failing == 0,
        format!("{failing}/{} models below +2.0; smallest T10-T1 gap {gap:+.2} ({worst})", gaps.len()),
    ))
}

fn repredict_all(tr: &Trends) -> Outcome {
    let m = mean(tr.repredict.iter().map(|r| r.0));
    let a = mean(tr.repredict.iter().map(|r| r.1));
    Ok((a >= m, format!("dev T4 all_tokens {a:.2} vs masked_only {m:.2} ({:+.2})", a - m)))
}

fn mask_ratio_table(tr: &Trends) -> Outcome {
    let table = match (&tr.ablation, &tr.ablation_error) {
        (Some(t), _) => t,
        (None, Some(e)) => return Err(e.clone()),
        (None, None) => return Err("ablation did not run".into()),
    };
    let labels: Vec<&str> = table.rows.iter().map(|r| r.label.as_str()).collect();
    if labels != ["0%", "25%", "50%", "75%", "100%", "Uniform"] {
        return Ok((false, format!("rows {labels:?}")));
    }
    let full = table.cell("100%", 4).ok_or("missing 100% cell")?;
    let uniform = table.cell("Uniform", 4).ok_or("missing Uniform cell")?;
    Ok((
        full <= uniform - 1.0,
        format!("six rows; T4 100% {full:.2} vs Uniform {uniform:.2} ({:+.2})", full - uniform),
    ))
}

fn determinism() -> Outcome {
    let cfg = RunConfig::from_toml(TINY).map_err(|e| e.to_string())?;
    let corpus = generate(&cfg.task).map_err(|e| e.to_string())?;
    let vocab = build_vocab(&corpus);
    let train = encode_pairs(&vocab, &corpus.train);
    let dev = encode_pairs(&vocab, &corpus.dev);
    let run = || -> Result<MemorySink, String> {
        let mut t = Trainer::new(cfg.clone(), vocab.clone(), &train, &dev).map_err(|e| e.to_string())?;
        let mut sink = MemorySink::default();
        t.run(&mut sink).map_err(|e| e.to_string())?;
        Ok(sink)
    };
    let (a, b) = (run()?, run()?);
    if a.records != b.records || a.checkpoints != b.checkpoints {
        return Ok((false, "rerun differs".into()));
    }
    for (update, bytes) in &a.checkpoints {
        let c = Container::from_bytes(bytes).map_err(|e| e.to_string())?;
        if &c.to_bytes() != bytes {
            return Ok((false, format!("checkpoint {update} does not round-trip")));
        }
    }
    Ok((
        true,
        format!("{} metrics records and {} checkpoints identical", a.records.len(), a.checkpoints.len()),
    ))
}

fn bleu_examples() -> Outcome {
    let toks = |s: &str| -> Vec<String> { s.split_whitespace().map(String::from).collect() };
    let cases = [
        ("a b c d e", "a b c d e", 100.0),
        ("a b c d", "a b c d e", 100.0 * (-0.25f64).exp()),
        // unigrams all match, higher orders fall back to 1e-9
        ("a b c d", "d c b a", 100.0 * 1e-27f64.powf(0.25)),
    ];
    let mut worst = 0.0f64;
    for (h, r, want) in cases {
        let got = bleu(&[toks(h)], &[toks(r)]).map_err(|e| e.to_string())?;
        worst = worst.max((got - want).abs());
        if got <= 0.0 && want > 0.0 {
            return Ok((false, format!("{h:?} vs {r:?} gave {got}")));
        }
    }
    Ok((worst < 1e-6, format!("max abs deviation {worst:.1e} on 3 worked examples")))
}

fn main() {
    let mut ok = true;
    let t = Instant::now();
    ok &= report(1, "gradient check", gradients(), t);
    let t = Instant::now();
    ok &= report(2, "oracle decoding", oracle_decoding(), t);
    let t = Instant::now();
    ok &= report(3, "mask schedule", schedule(), t);
    let t = Instant::now();
    ok &= report(4, "SMART reduction", smart_reduction(), t);
    let t = Instant::now();
    println!("  training the desk-scale profile...");
    match train_trends() {
        Ok(tr) => {
            ok &= report(5, "SMART vs NART", smart_vs_nart(&tr), t);
            ok &= report(6, "iterations help", iterations_help(&tr), t);
            ok &= report(7, "repredict all tokens", repredict_all(&tr), t);
            ok &= report(8, "mask ratio ablation", mask_ratio_table(&tr), t);
        }
        Err(e) => {
            for (id, name) in [(5, "SMART vs NART"), (6, "iterations help"), (7, "repredict all tokens"), (8, "mask ratio ablation")] {
                ok &= report(id, name, Err(e.clone()), t);
            }
        }
    }
    let t = Instant::now();
    ok &= report(9, "determinism", determinism(), t);
    let t = Instant::now();
    ok &= report(10, "BLEU worked examples", bleu_examples(), t);
    if !ok {
        std::process::exit(1);
    }
}
