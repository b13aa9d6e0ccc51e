//! Acceptance suite: one line per criterion, non-zero exit if any fails.
//!
//! Run alone with `cargo test -p synloc-cli --test acceptance`.

mod common;
#[path = "../../core/tests/reference/mod.rs"]
mod reference;

use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use synloc_core::attention::{attend, AttentionBias};
use synloc_core::keysent::rouge_l;
use synloc_core::localness::{gaussian_bias, AnswerSpan, CenterStrategy};
use synloc_core::model::{ngram_loss, EncoderConfig, EncoderInput, Model, ModelConfig, NGramLossConfig, SequenceBatch};
use synloc_core::numkit::{finite_diff_grad, relative_error};
use synloc_core::synmask::{mask_to_bias, RelationStrategy, VisibilityMask};
use synloc_core::toy::{
    localness_window_mass, mean_loss, toy_vocab, ToySource, ToyTask, ToyTrainer, TrainConfig, TOY_MAX_LEN,
};
use synloc_core::Matrix;
use tempfile::tempdir;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::new(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap()
}

fn random_mask(rng: &mut ChaCha8Rng, len: usize, p: f64) -> VisibilityMask {
    let mut pairs = Vec::new();
    for i in 0..len {
        for j in i + 1..len {
            if rng.gen_bool(p) {
                pairs.push((i, j));
            }
        }
    }
    VisibilityMask::from_pairs(len, &pairs).unwrap()
}

fn mechanisms_off_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for trial in 0..50 {
        let heads = [1, 2, 4][trial % 3];
        let config = ModelConfig {
            encoder: EncoderConfig {
                num_layers: 1 + trial % 2,
                num_heads: heads,
                model_dim: 8,
                ffn_dim: 12,
                localness_layers: vec![],
                synmask_layers: vec![],
            },
            decoder_layers: 1,
            vocab_size: 11,
            max_len: 10,
            center_strategy: CenterStrategy::AnswerCenter,
            ngram: NGramLossConfig::default(),
        };
        let model = Model::new(config, trial as u64).map_err(|e| e.to_string())?;
        let len = rng.gen_range(1..=10);
        let start = rng.gen_range(0..len);
        let input = EncoderInput {
            tokens: (0..len).map(|_| rng.gen_range(0..11)).collect(),
            span: AnswerSpan { start, end: start },
            mask: None,
        };
        let got = model.encode(&input).map_err(|e| e.to_string())?;
        worst = worst.max(reference::max_diff(&got, &reference::reference_encoder(&model, &input.tokens, 1.0)));
    }
    ensure(worst <= 1e-12, || format!("max abs diff {worst:e}"))?;
    Ok(format!("50 instances, max abs diff {worst:.1e}"))
}

fn mask_zeroing() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let len = rng.gen_range(1..=32);
        let d = rng.gen_range(1..=8);
        let p = rng.gen_range(0.0..0.6);
        let mask = random_mask(&mut rng, len, p);
        let (q, k, v) = (random_matrix(&mut rng, len, d), random_matrix(&mut rng, len, d), random_matrix(&mut rng, len, 3));
        let w = attend(&q, &k, &v, &mask_to_bias(&mask)).map_err(|e| e.to_string())?.weights;
        for i in 0..len {
            for j in 0..len {
                if !mask.is_visible(i, j) {
                    ensure(w.get(i, j) == 0.0, || format!("blinded ({i},{j}) has weight {:e}", w.get(i, j)))?;
                }
            }
            worst = worst.max((w.row(i).iter().sum::<f64>() - 1.0).abs());
        }
    }
    ensure(worst <= 1e-12, || format!("row sum off by {worst:e}"))?;
    Ok(format!("1000 instances, blinded weights 0.0, row sums within {worst:.1e}"))
}

fn gaussian_shape() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let len = rng.gen_range(2..=32);
        let center: f64 = rng.gen_range(0.0..(len - 1) as f64);
        let sigma = rng.gen_range(1.0..8.0);
        let g = gaussian_bias(center, &vec![sigma; len], len).map_err(|e| e.to_string())?;
        // constant scores, unit temperature
        let zeros = Matrix::zeros(len, 1);
        let w = attend(&zeros, &zeros, &zeros, &AttentionBias::gaussian(g).unwrap())
            .map_err(|e| e.to_string())?
            .weights;
        let row = w.row(0);
        let peak = (0..len).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
        ensure(peak == center.floor() as usize || peak == center.ceil() as usize, || {
            format!("peak {peak} for centre {center}")
        })?;
        for j in 1..len {
            let rising = row[j] >= row[j - 1];
            ensure(if j <= peak { rising } else { row[j] <= row[j - 1] }, || {
                format!("not unimodal at {j} (centre {center})")
            })?;
            if row[j] > f64::MIN_POSITIVE && row[j - 1] > f64::MIN_POSITIVE {
                let gj = -(j as f64 - center).powi(2) / (2.0 * sigma * sigma);
                let gi = -((j - 1) as f64 - center).powi(2) / (2.0 * sigma * sigma);
                let want = (gj - gi).exp();
                worst = worst.max((row[j] / row[j - 1] / want - 1.0).abs());
            }
        }
    }
    ensure(worst <= 1e-12, || format!("ratio error {worst:e}"))?;
    Ok(format!("1000 instances, peak at floor/ceil of centre, ratio error {worst:.1e}"))
}

fn gradient_oracle() -> Outcome {
    let config = ModelConfig {
        encoder: EncoderConfig {
            num_layers: 1,
            num_heads: 2,
            model_dim: 8,
            ffn_dim: 16,
            localness_layers: vec![1],
            synmask_layers: vec![1],
        },
        decoder_layers: 1,
        vocab_size: 16,
        max_len: 6,
        center_strategy: CenterStrategy::AnswerCenter,
        ngram: NGramLossConfig::new(2, vec![1.0, 0.5]).unwrap(),
    };
    let mut model = Model::new(config, 4).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let names: Vec<String> = model.params.names().cloned().collect();
    for name in &names {
        for x in model.params.get_mut(name).unwrap().data_mut() {
            *x += rng.gen_range(-0.3..0.3);
        }
    }
    let batch = SequenceBatch {
        input: EncoderInput {
            tokens: (0..6).map(|_| rng.gen_range(4..16)).collect(),
            span: AnswerSpan { start: 2, end: 3 },
            mask: Some(random_mask(&mut rng, 6, 0.3)),
        },
        targets: vec![5, 9, 12, 1],
    };
    let (_, grads) = model.loss_and_grads(&batch).map_err(|e| e.to_string())?;
    let mut worst = (0.0f64, String::new());
    for name in &names {
        let base = model.params.get(name).unwrap().clone();
        let numeric = finite_diff_grad(
            |x| {
                let mut m = model.clone();
                m.params.get_mut(name).unwrap().data_mut().copy_from_slice(x);
                m.loss(&batch).unwrap()
            },
            base.data(),
            1e-5,
        )
        .map_err(|e| e.to_string())?;
        let err = relative_error(grads[name].data(), &numeric, 1e-8);
        if err > worst.0 {
            worst = (err, name.clone());
        }
    }
    ensure(names.iter().any(|n| n.ends_with("local.w_p")) && names.iter().any(|n| n.ends_with("local.u_d")), || {
        "localness parameters missing".into()
    })?;
    ensure(worst.0 < 1e-4, || format!("{}: relative error {:e}", worst.1, worst.0))?;
    Ok(format!("{} parameter groups, worst relative error {:.1e} ({})", names.len(), worst.0, worst.1))
}

fn loss_collapse() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let single = NGramLossConfig::default();
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let (t, v) = (rng.gen_range(1..8), rng.gen_range(2..10));
        let mut d = Matrix::zeros(t, v);
        for i in 0..t {
            let raw: Vec<f64> = (0..v).map(|_| rng.gen_range(0.01..1.0)).collect();
            let s: f64 = raw.iter().sum();
            for (j, r) in raw.iter().enumerate() {
                d.set(i, j, r / s);
            }
        }
        let y: Vec<usize> = (0..t).map(|_| rng.gen_range(0..v)).collect();
        let nll: f64 = y.iter().enumerate().map(|(i, &c)| -d.get(i, c).ln()).sum();
        let got = ngram_loss(&[d], &y, &single).map_err(|e| e.to_string())?.value;
        worst = worst.max((got - nll).abs());
    }
    ensure(worst <= 1e-12, || format!("NLL mismatch {worst:e}"))?;
    let uniform = Matrix::filled(2, 4, 0.25);
    let got = ngram_loss(&[uniform], &[1, 3], &single).map_err(|e| e.to_string())?.value;
    let want = 2.0 * 4f64.ln();
    ensure(got == want, || format!("uniform fixture gave {got}, want {want}"))?;
    Ok(format!("NLL match within {worst:.1e}; uniform T=2, V=4 gives {got:.5}"))
}

/// Full-table LCS, filled from the end.
fn lcs_oracle(a: &[u8], b: &[u8]) -> usize {
    let mut t = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for i in (0..a.len()).rev() {
        for j in (0..b.len()).rev() {
            t[i][j] = if a[i] == b[j] { 1 + t[i + 1][j + 1] } else { t[i + 1][j].max(t[i][j + 1]) };
        }
    }
    t[0][0]
}

fn rouge_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let a: Vec<u8> = (0..rng.gen_range(1..15)).map(|_| rng.gen_range(0..6)).collect();
        let b: Vec<u8> = (0..rng.gen_range(1..15)).map(|_| rng.gen_range(0..6)).collect();
        let lcs = lcs_oracle(&a, &b);
        ensure(synloc_core::keysent::lcs_len(&a, &b) == lcs, || format!("LCS of {a:?} / {b:?}"))?;
        let (p, r) = (lcs as f64 / a.len() as f64, lcs as f64 / b.len() as f64);
        let f1 = if lcs == 0 { 0.0 } else { 2.0 * p * r / (p + r) };
        worst = worst.max((rouge_l(&a, &b).f1 - f1).abs());
    }
    ensure(worst <= 1e-12, || format!("f1 error {worst:e}"))?;
    let cand: Vec<&str> = "the cat sat".split(' ').collect();
    let refr: Vec<&str> = "the cat ran".split(' ').collect();
    let f1 = rouge_l(&cand, &refr).f1;
    ensure((f1 - 2.0 / 3.0).abs() <= 1e-12, || format!("fixture f1 {f1}"))?;
    Ok(format!("1000 pairs exact LCS, f1 within {worst:.1e}; fixture f1 = {f1:.6}"))
}

fn preprocessing_oracle() -> Outcome {
    for strategy in common::STRATEGIES {
        let dir = tempdir().map_err(|e| e.to_string())?;
        let out = common::preprocess(dir.path(), strategy);
        ensure(out.status.success(), || common::stderr(&out))?;
        common::check_against_oracle(dir.path(), strategy)?;
    }
    Ok("3 records x 3 strategies match the scripted pipeline".into())
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn toy_config(localness: Vec<usize>, synmask: Vec<usize>) -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            localness_layers: localness,
            synmask_layers: synmask,
            ..EncoderConfig::default()
        },
        decoder_layers: 1,
        vocab_size: toy_vocab().len(),
        max_len: TOY_MAX_LEN,
        center_strategy: CenterStrategy::AnswerCenter,
        ngram: NGramLossConfig::default(),
    }
}

fn behavioral_efficacy() -> Outcome {
    let (mut full_loss, mut base_loss, mut full_mass, mut base_mass) = (vec![], vec![], vec![], vec![]);
    let (mut loss_wins, mut mass_wins) = (0, 0);
    let strategy = RelationStrategy::CoreArguments;
    for seed in 0..5u64 {
        let train = TrainConfig {
            epochs: 200,
            batch_size: 8,
            learning_rate: 0.05,
            seed,
        };
        let mut held_out = ToySource::new(ToyTask::Neighborhood, 128, strategy, seed, 4);
        let (_, eval) = held_out.draw().map_err(|e| e.to_string())?;
        let mut data = ToySource::new(ToyTask::Neighborhood, 64, strategy, seed, 3);
        let (_, first) = data.draw().map_err(|e| e.to_string())?;
        let full = Model::new(toy_config(vec![1], vec![1, 2]), seed).map_err(|e| e.to_string())?;
        let base = Model::new(toy_config(vec![], vec![]), seed).map_err(|e| e.to_string())?;
        let mut full = ToyTrainer::new(full, first.clone(), train).map_err(|e| e.to_string())?;
        let mut base = ToyTrainer::new(base, first, train).map_err(|e| e.to_string())?;
        for epoch in 0..train.epochs {
            if epoch > 0 {
                let (_, batches) = data.draw().map_err(|e| e.to_string())?;
                full.set_batches(batches.clone()).map_err(|e| e.to_string())?;
                base.set_batches(batches).map_err(|e| e.to_string())?;
            }
            full.train_epoch().map_err(|e| format!("seed {seed} full: {e}"))?;
            base.train_epoch().map_err(|e| format!("seed {seed} baseline: {e}"))?;
        }
        let (lf, lb) = (
            mean_loss(full.model(), &eval).map_err(|e| e.to_string())?,
            mean_loss(base.model(), &eval).map_err(|e| e.to_string())?,
        );
        let (mut mf, mut mb) = (0.0, 0.0);
        for b in &eval {
            mf += localness_window_mass(full.model(), &b.input, None).map_err(|e| e.to_string())?;
            // the baseline is scored in the full model's windows
            mb += localness_window_mass(base.model(), &b.input, Some(full.model())).map_err(|e| e.to_string())?;
        }
        let (mf, mb) = (mf / eval.len() as f64, mb / eval.len() as f64);
        println!("    seed {seed}: held-out loss {lf:.4} vs {lb:.4}, window mass {mf:.4} vs {mb:.4}");
        loss_wins += usize::from(lf < lb);
        mass_wins += usize::from(mf > mb);
        full_loss.push(lf);
        base_loss.push(lb);
        full_mass.push(mf);
        base_mass.push(mb);
    }
    let (flm, fls) = mean_std(&full_loss);
    let (blm, bls) = mean_std(&base_loss);
    let (fmm, fms) = mean_std(&full_mass);
    let (bmm, bms) = mean_std(&base_mass);
    let summary = format!(
        "loss {flm:.3}±{fls:.3} vs {blm:.3}±{bls:.3} ({loss_wins}/5 seeds); \
         window mass {fmm:.3}±{fms:.3} vs {bmm:.3}±{bms:.3} ({mass_wins}/5 seeds)"
    );
    ensure(flm < blm && fmm > bmm && loss_wins >= 4 && mass_wins >= 4, || summary.clone())?;
    Ok(summary)
}

fn determinism() -> Outcome {
    let args = ["--epochs", "5", "--examples", "16", "--seed", "9"];
    let (a, b) = (tempdir().map_err(|e| e.to_string())?, tempdir().map_err(|e| e.to_string())?);
    for d in [&a, &b] {
        let out = common::toy_pipeline(d.path(), &args);
        ensure(out.status.success(), || common::stderr(&out))?;
    }
    for f in ["metrics.jsonl", "predictions.jsonl", "checkpoint.json"] {
        let (x, y) = (std::fs::read(a.path().join(f)), std::fs::read(b.path().join(f)));
        ensure(matches!((&x, &y), (Ok(x), Ok(y)) if x == y), || format!("{f} differs between runs"))?;
    }
    Ok("metrics, predictions and checkpoint byte-identical across two runs".into())
}

fn main() -> ExitCode {
    let criteria: [(&str, Duration, fn() -> Outcome); 9] = [
        ("mechanism-off equivalence", Duration::from_secs(10), mechanisms_off_equivalence),
        ("mask zeroing", Duration::from_secs(10), mask_zeroing),
        ("gaussian bias shape", Duration::from_secs(10), gaussian_shape),
        ("gradient oracle", Duration::from_secs(120), gradient_oracle),
        ("loss collapse", Duration::from_secs(1), loss_collapse),
        ("rouge-l oracle", Duration::from_secs(5), rouge_oracle),
        ("preprocessing oracle", Duration::from_secs(5), preprocessing_oracle),
        ("toy-scale efficacy", Duration::from_secs(15 * 60), behavioral_efficacy),
        ("determinism", Duration::from_secs(15 * 60), determinism),
    ];
    let mut failed = 0;
    for (idx, (name, budget, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let result = run();
        let elapsed = start.elapsed();
        let result = match result {
            Ok(detail) if elapsed > *budget => Err(format!("{detail}; took {elapsed:.2?}, budget {budget:?}")),
            other => other,
        };
        match result {
            Ok(detail) => println!("PASS {} {name}: {detail} [{elapsed:.2?}]", idx + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL {} {name}: {detail} [{elapsed:.2?}]", idx + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
