use rand::Rng;

use super::config::{TrainConfig, WarmStart};
use crate::policy::{
    init_params, load_checkpoint, optimizer_step, sft_batch_loss_and_grad, AdamCfg, OptimizerState,
    PolicyArch, PolicyParams,
};
use crate::rng::{self, domain, Stream};
use crate::tasks::{gen_arith_task, gen_counting_task, DatasetSpec, Family, TokenId, Vocab};
use crate::{LabError, Result};

/// A prompt from either family paired with a completion whose reasoning and
/// answer are random. With probability `malformed_fraction` the tag
/// structure is broken in one of three ways.
pub fn priming_demo(
    vocab: &Vocab,
    rng: &mut Stream,
    malformed_fraction: f64,
) -> Result<(Vec<TokenId>, Vec<TokenId>)> {
    let family = if rng.random_bool(0.5) {
        Family::Counting
    } else {
        Family::Arith
    };
    let spec = DatasetSpec::new(family, 1, 0);
    let seed: u64 = rng.random();
    let inst = match family {
        Family::Counting => gen_counting_task(
            vocab,
            seed,
            spec.grid_rows,
            spec.grid_cols,
            spec.alphabet_size,
        )?,
        Family::Arith => gen_arith_task(seed, spec.chain_length, spec.value_range())?,
    };
    let filler: Vec<TokenId> = (0..10)
        .map(Vocab::digit)
        .chain((0..spec.alphabet_size).map(|i| vocab.grid_symbol(i)))
        .chain((0..6).map(Vocab::variable))
        .collect();
    let body_len = rng.random_range(1..=5);
    let body: Vec<TokenId> = (0..body_len)
        .map(|_| filler[rng.random_range(0..filler.len())])
        .collect();
    let answer = Vocab::digit(rng.random_range(0..10u8));
    let mut out = Vec::with_capacity(body_len + 6);
    let malformed = rng.random_bool(malformed_fraction);
    match (malformed, rng.random_range(0..3u8)) {
        (false, _) => {
            out.push(Vocab::THINK_OPEN);
            out.extend(&body);
            out.extend([
                Vocab::THINK_CLOSE,
                Vocab::ANSWER_OPEN,
                answer,
                Vocab::ANSWER_CLOSE,
            ]);
        }
        (true, 0) => out.extend([Vocab::ANSWER_OPEN, answer, Vocab::ANSWER_CLOSE]),
        (true, 1) => {
            out.push(Vocab::THINK_OPEN);
            out.extend(&body);
            out.extend([Vocab::ANSWER_OPEN, answer, Vocab::ANSWER_CLOSE]);
        }
        (true, _) => {
            out.extend(&body);
            out.push(answer);
        }
    }
    out.push(Vocab::EOS);
    Ok((inst.prompt_tokens, out))
}

/// Supervised priming from a fresh initialization.
pub fn format_priming(
    vocab: &Vocab,
    arch: &PolicyArch,
    seed: u64,
    steps: usize,
    batch_size: usize,
    lr: f64,
    malformed_fraction: f64,
) -> Result<PolicyParams> {
    let mut params = init_params(arch, rng::derive_seed(seed, &[domain::INIT]))?;
    let cfg = AdamCfg {
        lr,
        ..AdamCfg::default()
    };
    let mut opt = OptimizerState::new(cfg, params.len());
    for step in 0..steps {
        let mut rng = rng::stream(seed, &[domain::PRIMING, step as u64]);
        let demos = (0..batch_size)
            .map(|_| priming_demo(vocab, &mut rng, malformed_fraction))
            .collect::<Result<Vec<_>>>()?;
        let (_, grad) = sft_batch_loss_and_grad(&params, &demos)?;
        optimizer_step(&mut params, &grad, &mut opt)?;
    }
    Ok(params)
}

/// The policy a run starts from; it is also the frozen reference.
pub fn base_policy(cfg: &TrainConfig, vocab: &Vocab) -> Result<PolicyParams> {
    match &cfg.warm_start {
        WarmStart::None => init_params(&cfg.arch, rng::derive_seed(cfg.seed, &[domain::INIT])),
        WarmStart::FormatPriming {
            steps,
            batch_size,
            lr,
            malformed_fraction,
        } => format_priming(
            vocab,
            &cfg.arch,
            cfg.seed,
            *steps,
            *batch_size,
            *lr,
            *malformed_fraction,
        ),
        WarmStart::Checkpoint { path } => {
            let ckpt = load_checkpoint(path)?;
            if ckpt.vocab_hash != vocab.hash() {
                return Err(LabError::VocabMismatch {
                    expected: vocab.hash(),
                    found: ckpt.vocab_hash,
                });
            }
            if *ckpt.params.arch() != cfg.arch {
                return Err(LabError::Config(format!(
                    "warm-start checkpoint {} has a different architecture",
                    path.display()
                )));
            }
            Ok(ckpt.params)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reward::{accuracy_reward, format_reward};
    use crate::tasks::VocabCfg;

    #[test]
    fn priming_demos_mix_formats_and_ignore_answers() {
        let vocab = Vocab::new(VocabCfg::default()).unwrap();
        let mut rng = rng::stream(1, &[]);
        let n = 2000;
        let mut formatted = 0.0;
        for _ in 0..n {
            let (_, c) = priming_demo(&vocab, &mut rng, 0.5).unwrap();
            formatted += format_reward(&c);
        }
        let share = formatted / n as f64;
        assert!((share - 0.5).abs() < 0.05, "{share}");
    }

    #[test]
    fn priming_answers_are_near_chance() {
        let vocab = Vocab::new(VocabCfg::default()).unwrap();
        let mut rng = rng::stream(2, &[]);
        let mut correct = 0.0;
        let n = 3000;
        for _ in 0..n {
            let (prompt, c) = priming_demo(&vocab, &mut rng, 0.0).unwrap();
            let parsed = crate::tasks::parse_prompt(&vocab, &prompt).unwrap();
            correct += accuracy_reward(&c, parsed.answer());
        }
        let rate = correct / n as f64;
        assert!((rate - 0.1).abs() < 0.03, "{rate}");
    }
}
