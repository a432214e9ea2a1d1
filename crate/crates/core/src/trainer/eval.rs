use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::policy::{load_checkpoint, sample_completion, PolicyParams, SamplerCfg};
use crate::reward::{accuracy_reward, format_reward};
use crate::rng;
use crate::tasks::{make_sft_demo, read_dataset, Family, TaskInstance, TokenId, Vocab};
use crate::{LabError, Result};

/// Anything that can answer a task instance.
pub trait CompletionSource: Sync {
    fn complete(&self, instance: &TaskInstance) -> Result<Vec<TokenId>>;
}

/// Greedy decoding from a policy.
pub struct GreedyPolicy<'a> {
    pub params: &'a PolicyParams,
    pub max_new_tokens: usize,
}

impl CompletionSource for GreedyPolicy<'_> {
    fn complete(&self, instance: &TaskInstance) -> Result<Vec<TokenId>> {
        let mut unused = rng::stream(0, &[]);
        let c = sample_completion(
            self.params,
            &instance.prompt_tokens,
            &SamplerCfg::greedy(self.max_new_tokens),
            &mut unused,
        )?;
        Ok(c.tokens)
    }
}

/// Replays the gold demonstration for every instance.
pub struct DemoReplay<'a> {
    pub vocab: &'a Vocab,
}

impl CompletionSource for DemoReplay<'_> {
    fn complete(&self, instance: &TaskInstance) -> Result<Vec<TokenId>> {
        make_sft_demo(self.vocab, instance)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub index: usize,
    pub ground_truth: u8,
    pub completion: Vec<TokenId>,
    pub acc: f64,
    pub format: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub family: Family,
    pub n: usize,
    pub answer_accuracy: f64,
    pub format_accuracy: f64,
    pub step: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub records: Option<Vec<EvalRecord>>,
}

impl EvalReport {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| LabError::MalformedFile {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}

/// Scores `source` on every instance. The dataset must be non-empty and of a
/// single family.
pub fn evaluate(
    source: &dyn CompletionSource,
    dataset: &[TaskInstance],
    keep_records: bool,
) -> Result<EvalReport> {
    let Some(first) = dataset.first() else {
        return Err(LabError::Contract("evaluation on an empty dataset".into()));
    };
    if let Some(other) = dataset.iter().find(|i| i.family != first.family) {
        return Err(LabError::Contract(format!(
            "mixed families in eval set: {} and {}",
            first.family, other.family
        )));
    }
    let records = dataset
        .par_iter()
        .enumerate()
        .map(|(index, inst)| {
            let completion = source.complete(inst)?;
            Ok(EvalRecord {
                index,
                ground_truth: inst.ground_truth,
                acc: accuracy_reward(&completion, inst.ground_truth),
                format: format_reward(&completion),
                completion,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let n = records.len();
    let acc = records.iter().map(|r| r.acc).sum::<f64>() / n as f64;
    let format = records.iter().map(|r| r.format).sum::<f64>() / n as f64;
    Ok(EvalReport {
        family: first.family,
        n,
        answer_accuracy: acc,
        format_accuracy: format,
        step: None,
        records: keep_records.then_some(records),
    })
}

/// Evaluates a checkpoint on a dataset file, possibly of another family.
/// Both must have been built with the same vocabulary.
pub fn cross_task_eval(
    checkpoint: &Path,
    dataset: &Path,
    max_new_tokens: usize,
) -> Result<EvalReport> {
    let ckpt = load_checkpoint(checkpoint)?;
    let vocab = Vocab::new(ckpt.vocab)?;
    if vocab.hash() != ckpt.vocab_hash {
        return Err(LabError::VocabMismatch {
            expected: vocab.hash(),
            found: ckpt.vocab_hash,
        });
    }
    let (header, instances) = read_dataset(dataset)?;
    if header.vocab_hash != ckpt.vocab_hash {
        return Err(LabError::VocabMismatch {
            expected: ckpt.vocab_hash,
            found: header.vocab_hash,
        });
    }
    let source = GreedyPolicy {
        params: &ckpt.params,
        max_new_tokens,
    };
    let mut report = evaluate(&source, &instances, false)?;
    report.step = Some(ckpt.step);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{init_params, PolicyArch};
    use crate::tasks::{generate_dataset, DatasetSpec, VocabCfg};

    #[test]
    fn demo_replay_is_perfect() {
        let vocab = Vocab::new(VocabCfg::default()).unwrap();
        for family in Family::ALL {
            let data = generate_dataset(&vocab, &DatasetSpec::new(family, 100, 4)).unwrap();
            let r = evaluate(&DemoReplay { vocab: &vocab }, &data, false).unwrap();
            assert_eq!((r.answer_accuracy, r.format_accuracy, r.n), (1.0, 1.0, 100));
        }
    }

    #[test]
    fn untrained_policy_is_near_chance_and_deterministic() {
        let vocab = Vocab::new(VocabCfg::default()).unwrap();
        let data = generate_dataset(&vocab, &DatasetSpec::new(Family::Counting, 200, 9)).unwrap();
        let params = init_params(&PolicyArch::new(vocab.len()), 2).unwrap();
        let src = GreedyPolicy {
            params: &params,
            max_new_tokens: 48,
        };
        let a = evaluate(&src, &data, true).unwrap();
        let b = evaluate(&src, &data, true).unwrap();
        assert_eq!(a, b);
        assert!(a.answer_accuracy <= 0.25, "{}", a.answer_accuracy);
    }

    #[test]
    fn empty_and_mixed_sets_are_rejected() {
        let vocab = Vocab::new(VocabCfg::default()).unwrap();
        assert!(evaluate(&DemoReplay { vocab: &vocab }, &[], false).is_err());
        let mut data = generate_dataset(&vocab, &DatasetSpec::new(Family::Counting, 2, 1)).unwrap();
        data.extend(generate_dataset(&vocab, &DatasetSpec::new(Family::Arith, 2, 1)).unwrap());
        assert!(evaluate(&DemoReplay { vocab: &vocab }, &data, false).is_err());
    }
}
