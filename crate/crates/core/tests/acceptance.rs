//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.

mod common;

use std::collections::HashMap;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use njm::captioner::{
    backward, check_gradients, decode_beam, decode_greedy, forward, Batch, Example, ModelDims, ModelParams,
};
use njm::corpus::{
    generate_synthetic_corpus, load_corpus, save_corpus, SyntheticConfig, SyntheticCorpus, BOS,
    DEFAULT_CAPTIONS_PER_IMAGE, EOS,
};
use njm::eval::{eval_buckets, run_experiment, ExperimentGrid};
use njm::funny_score::FunnyScorePolicy;
use njm::nn::AdamConfig;
use njm::trainer::{decode_checkpoint, encode_checkpoint, train, Checkpoint, Trainer, TrainingConfig};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn within(elapsed: Duration, limit: Duration, detail: String) -> Outcome {
    if elapsed < limit {
        Ok(format!("{detail}; {:.2}s < {}s", elapsed.as_secs_f64(), limit.as_secs()))
    } else {
        Err(format!("{detail}; took {:.2}s, limit {}s", elapsed.as_secs_f64(), limit.as_secs()))
    }
}

fn random_batch(rng: &mut ChaCha8Rng, dims: ModelDims, n: usize) -> Batch {
    let examples = (0..n)
        .map(|_| {
            let len = rng.random_range(1..6);
            let mut caption = vec![BOS];
            caption.extend((0..len).map(|_| rng.random_range(4..dims.vocab_size as u32)));
            caption.push(EOS);
            let stars = match rng.random_range(0..4) {
                0 => 100,
                1 => 99,
                _ => rng.random_range(0..300),
            };
            let features = (0..dims.feature_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            Example { features, caption, stars }
        })
        .collect();
    Batch::from_examples(examples)
}

fn gradient_correctness() -> Outcome {
    let t0 = Instant::now();
    let dims = ModelDims::new(4, 4, 4, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let batch = random_batch(&mut rng, dims, 2);
    let mut worst = 0.0f64;
    for seed in 0..5 {
        let params = common::random_params(dims, seed, 0.5);
        for policy in [FunnyScorePolicy::uniform(), FunnyScorePolicy::literal(), FunnyScorePolicy::weighted(2.0, 1.0)] {
            worst = worst.max(check_gradients(&params, &batch, &policy, 1e-4).map_err(|e| e.to_string())?);
        }
    }
    let detail = format!("5 parameter draws x 3 policies, max relative error {worst:.2e}");
    if worst >= 1e-4 {
        return Err(detail);
    }
    within(t0.elapsed(), Duration::from_secs(10), detail)
}

fn literal_offset_is_inert() -> Outcome {
    let t0 = Instant::now();
    let dims = ModelDims::new(4, 5, 6, 12);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst_loss_gap = 0.0f64;
    for b in 0..20 {
        let params = common::random_params(dims, 100 + b, 0.3);
        let n = rng.random_range(1..9);
        let batch = random_batch(&mut rng, dims, n);
        let uni = backward(&params, &batch, &FunnyScorePolicy::uniform()).map_err(|e| e.to_string())?;
        let lit = backward(&params, &batch, &FunnyScorePolicy::literal()).map_err(|e| e.to_string())?;
        let bits = |p: &ModelParams| p.flatten().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        if bits(&uni.grads) != bits(&lit.grads) {
            return Err(format!("batch {b}: gradients differ"));
        }
        let n_high = batch.stars.iter().filter(|&&s| s >= 100).count();
        let expected = 1.0 * n_high as f64 / n as f64;
        worst_loss_gap = worst_loss_gap.max(((uni.report.batch_loss - lit.report.batch_loss) - expected).abs());
    }
    let detail = format!("20 batches bitwise equal gradients, max loss-gap error {worst_loss_gap:.1e}");
    if worst_loss_gap > 1e-12 {
        return Err(detail);
    }
    within(t0.elapsed(), Duration::from_secs(10), detail)
}

fn literal_rule_semantics() -> Outcome {
    let p = FunnyScorePolicy::literal();
    let l = 2.75;
    let got = [p.example_transform(l, 99), p.example_transform(l, 150), p.example_transform(l, 100)];
    let want = [l, l - 1.0, l - 1.0];
    if got == want {
        Ok(format!("stars 99/150/100 -> {got:?}"))
    } else {
        Err(format!("got {got:?}, want {want:?}"))
    }
}

fn uniform_model() -> Outcome {
    let s = generate_synthetic_corpus(7, 10, 14, 8, 0.3).map_err(|e| e.to_string())?;
    let v = s.vocab.len();
    let config = TrainingConfig { feature_dim: 8, embed_dim: 6, hidden_dim: 5, ..TrainingConfig::default() };
    let params = ModelParams::zeros(config.dims(v));
    let mut worst = 0.0f64;
    for r in &s.corpus.records {
        let f = s.corpus.features.get_f64(&r.image_id).unwrap();
        let loss = forward(&f, &r.caption, &params).map_err(|e| e.to_string())?.loss;
        worst = worst.max((loss - (v as f64).ln()).abs());
    }
    let ckpt = Checkpoint::from_params(config, s.vocab.clone(), params);
    let report = eval_buckets(&ckpt, &s.corpus, 100).map_err(|e| e.to_string())?;
    for b in [report.low, report.high].into_iter().flatten() {
        worst = worst.max((b.perplexity - v as f64).abs() / v as f64);
    }
    let detail = format!("V={v}, max deviation {worst:.1e}");
    if worst <= 1e-10 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn overfit() -> Outcome {
    let t0 = Instant::now();
    let s = generate_synthetic_corpus(1, 8, 1, 8, 0.3).map_err(|e| e.to_string())?;
    let config = TrainingConfig {
        seed: 1,
        epochs: 500,
        batch_size: 8,
        feature_dim: 8,
        embed_dim: 32,
        hidden_dim: 32,
        adam: AdamConfig { lr: 1e-2, ..AdamConfig::default() },
        ..TrainingConfig::default()
    };
    let (ckpt, log) = train(config, s.vocab.clone(), &s.corpus).map_err(|e| e.to_string())?;
    let report = eval_buckets(&ckpt, &s.corpus, 100).map_err(|e| e.to_string())?;
    let (loss, tokens) = [report.low, report.high]
        .into_iter()
        .flatten()
        .fold((0.0, 0usize), |(l, t), b| (l + b.mean_loss * b.tokens as f64, t + b.tokens));
    let mean = loss / tokens as f64;
    let detail = format!("8 records, {} steps, mean token loss {mean:.4}", log.len());
    if log.len() > 500 || mean >= 0.05 {
        return Err(detail);
    }
    within(t0.elapsed(), Duration::from_secs(60), detail)
}

fn weighted_policy_efficacy() -> Outcome {
    let t0 = Instant::now();
    let weighted = FunnyScorePolicy::weighted(2.0, 1.0);
    let uniform = FunnyScorePolicy::uniform();
    let grid = ExperimentGrid {
        corpus: SyntheticConfig {
            n_images: 200,
            captions_per_image: 10,
            dim: 16,
            frac_high: 0.3,
            ..SyntheticConfig::default()
        },
        training: TrainingConfig {
            epochs: 10,
            batch_size: 32,
            embed_dim: 16,
            hidden_dim: 16,
            adam: AdamConfig { lr: 5e-3, ..AdamConfig::default() },
            ..TrainingConfig::default()
        },
        policies: vec![uniform, weighted],
        seeds: (0..10).collect(),
        ..ExperimentGrid::default()
    };
    let summary = run_experiment(&grid).map_err(|e| e.to_string())?;
    let (wins, pairs) = summary.paired_high_wins(&weighted, &uniform);
    let mean = |i: usize| summary.policies[i].mean_high_perplexity.unwrap_or(f64::NAN);
    let detail = format!(
        "weighted wins {wins}/{pairs} seeds on 2000 records; mean high-bucket ppl {:.3} vs {:.3}",
        mean(1),
        mean(0)
    );
    if pairs != 10 || wins < 9 {
        return Err(detail);
    }
    within(t0.elapsed(), Duration::from_secs(600), detail)
}

fn decoding_oracle() -> Outcome {
    let mut checked = 0;
    for (dims, max_len) in [(ModelDims::new(3, 4, 4, 5), 3), (ModelDims::new(3, 4, 4, 7), 3)] {
        let width = dims.vocab_size.pow(max_len as u32);
        for seed in 0..10 {
            let p = common::random_params(dims, seed, 2.0);
            let f = common::features(dims.feature_dim, 70 + seed);
            let brute = common::brute_force(&f, &p, max_len);
            let beam = decode_beam(&f, &p, width, max_len).map_err(|e| e.to_string())?;
            if beam[0].tokens != brute[0].0 || (beam[0].log_prob - brute[0].1).abs() > 1e-12 {
                return Err(format!(
                    "V={} seed {seed}: beam {:?} vs brute force {:?}",
                    dims.vocab_size, beam[0], brute[0]
                ));
            }
            for ml in 1..=4 {
                let greedy = decode_greedy(&f, &p, ml).map_err(|e| e.to_string())?;
                let one = decode_beam(&f, &p, 1, ml).map_err(|e| e.to_string())?;
                if one != vec![greedy] {
                    return Err(format!("V={} seed {seed}: beam=1 differs from greedy", dims.vocab_size));
                }
            }
            checked += 1;
        }
    }
    Ok(format!("{checked} models: exhaustive beam = enumeration argmax, beam 1 = greedy"))
}

fn determinism_and_persistence() -> Outcome {
    let s = generate_synthetic_corpus(9, 12, 4, 6, 0.3).map_err(|e| e.to_string())?;
    let config = TrainingConfig {
        seed: 9,
        epochs: 20,
        batch_size: 8,
        feature_dim: 6,
        embed_dim: 8,
        hidden_dim: 8,
        policy: FunnyScorePolicy::weighted(2.0, 1.0),
        ..TrainingConfig::default()
    };
    let run = || -> njm::Result<Vec<u8>> { encode_checkpoint(&train(config.clone(), s.vocab.clone(), &s.corpus)?.0) };
    let a = run().map_err(|e| e.to_string())?;
    if a != run().map_err(|e| e.to_string())? {
        return Err("same seed, different checkpoint bytes".into());
    }

    let resumed = (|| -> njm::Result<Vec<u8>> {
        let mut first = Trainer::new(config.clone(), s.vocab.clone(), &s.corpus)?;
        first.run_steps(17)?;
        let mut second = Trainer::resume(decode_checkpoint(&encode_checkpoint(&first.checkpoint())?)?, &s.corpus)?;
        second.run()?;
        encode_checkpoint(&second.checkpoint())
    })()
    .map_err(|e| e.to_string())?;
    if resumed != a {
        return Err("resumed run differs from uninterrupted run".into());
    }

    let ckpt = decode_checkpoint(&a).map_err(|e| e.to_string())?;
    if encode_checkpoint(&ckpt).map_err(|e| e.to_string())? != a {
        return Err("checkpoint re-encode differs".into());
    }

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (m, f) = (dir.path().join("m.jsonl"), dir.path().join("f.bin"));
    save_corpus(&s.corpus, &s.vocab, &m, &f).map_err(|e| e.to_string())?;
    let back = load_corpus(&m, &f, &s.vocab).map_err(|e| e.to_string())?;
    let bits = |c: &njm::corpus::Corpus| {
        (0..c.features.len()).flat_map(|i| c.features.row(i).iter().map(|v| v.to_bits())).collect::<Vec<_>>()
    };
    if back.records != s.corpus.records
        || bits(&back) != bits(&s.corpus)
        || back.features.ids() != s.corpus.features.ids()
    {
        return Err("corpus roundtrip differs".into());
    }
    Ok(format!("{} steps bitwise reproducible; resume after 17 steps identical; files roundtrip", ckpt.step))
}

fn corpus_scale() -> Outcome {
    let ratio = 999_571.0f64 / 70_981.0;
    let cfg = SyntheticConfig::default();
    let s = SyntheticCorpus::generate(&cfg).map_err(|e| e.to_string())?;
    let mut per_image: HashMap<&str, usize> = HashMap::new();
    for r in &s.corpus.records {
        *per_image.entry(&r.image_id).or_default() += 1;
    }
    let exact = per_image.len() == cfg.n_images && per_image.values().all(|&n| n == DEFAULT_CAPTIONS_PER_IMAGE);
    let detail = format!(
        "default {} captions per image (reference ratio {ratio:.2}), {} records / {} images",
        cfg.captions_per_image,
        s.corpus.len(),
        per_image.len()
    );
    if cfg.captions_per_image == 14 && ratio.round() as usize == 14 && exact {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("1 gradient correctness", gradient_correctness),
        ("2 literal offset inertness", literal_offset_is_inert),
        ("3 literal rule semantics", literal_rule_semantics),
        ("4 uniform model", uniform_model),
        ("5 overfit capability", overfit),
        ("6 weighted policy efficacy", weighted_policy_efficacy),
        ("7 decoding oracle", decoding_oracle),
        ("8 determinism and persistence", determinism_and_persistence),
        ("9 corpus scale", corpus_scale),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        match check() {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {name}: {detail}");
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
