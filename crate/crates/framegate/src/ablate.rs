//! Ablation grid over attention depth, frame-loss variants, and the dense
//! caption stream, with paired bootstrap significance between variants.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Corpus;
use crate::losses::{FrameLossKind, LossFlags};
use crate::train::{correctness_vector, evaluate, train, TrainConfig, TrainResult};

/// Frame-loss configurations mirrored by the ablation table.
pub const LOSS_VARIANTS: [(&str, LossFlags); 6] = [
    ("none", LossFlags { frame: FrameLossKind::None, iofsm: false }),
    ("bce", LossFlags { frame: FrameLossKind::Bce, iofsm: false }),
    ("iofsm", LossFlags { frame: FrameLossKind::None, iofsm: true }),
    ("bce+iofsm", LossFlags { frame: FrameLossKind::Bce, iofsm: true }),
    ("bbce", LossFlags { frame: FrameLossKind::Bbce, iofsm: false }),
    ("bbce+iofsm", LossFlags { frame: FrameLossKind::Bbce, iofsm: true }),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Variant {
    pub dual_attention: bool,
    pub use_densecap: bool,
    /// Index into [`LOSS_VARIANTS`].
    pub loss: usize,
}

impl Variant {
    pub fn name(&self) -> String {
        format!(
            "{}-att/{}/densecap-{}",
            if self.dual_attention { "dual" } else { "single" },
            LOSS_VARIANTS[self.loss].0,
            if self.use_densecap { "on" } else { "off" },
        )
    }

    pub fn parse(name: &str) -> Option<Variant> {
        let mut parts = name.split('/');
        let att = match parts.next()? {
            "dual-att" => true,
            "single-att" => false,
            _ => return None,
        };
        let loss = parts.next()?;
        let loss = LOSS_VARIANTS.iter().position(|(n, _)| *n == loss)?;
        let cap = match parts.next()? {
            "densecap-on" => true,
            "densecap-off" => false,
            _ => return None,
        };
        parts.next().is_none().then_some(Variant { dual_attention: att, use_densecap: cap, loss })
    }

    pub fn apply(&self, base: &TrainConfig) -> TrainConfig {
        let mut cfg = base.clone();
        cfg.model.dual_attention = self.dual_attention;
        cfg.model.use_densecap = self.use_densecap;
        cfg.losses = LOSS_VARIANTS[self.loss].1;
        cfg
    }
}

/// The default grid: full loss sweep under dual attention, plus the single
/// attention and densecap-off contrasts under the strongest loss setting.
pub fn default_variants() -> Vec<Variant> {
    let mut out: Vec<Variant> = (0..LOSS_VARIANTS.len())
        .map(|loss| Variant { dual_attention: true, use_densecap: true, loss })
        .collect();
    let bbce_iofsm = LOSS_VARIANTS.len() - 1;
    out.push(Variant { dual_attention: false, use_densecap: true, loss: bbce_iofsm });
    out.push(Variant { dual_attention: true, use_densecap: false, loss: bbce_iofsm });
    out
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub val_accuracy: f64,
    pub test_accuracy: f64,
    pub test_frame_ap: Option<f64>,
    pub test_report: crate::train::EvalReport,
    /// Per-episode correctness on the test split, for paired bootstrap.
    pub test_correct: Vec<bool>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VariantResult {
    pub variant: Variant,
    pub name: String,
    pub runs: Vec<SeedRun>,
}

impl VariantResult {
    pub fn mean_test_accuracy(&self) -> f64 {
        self.runs.iter().map(|r| r.test_accuracy).sum::<f64>() / self.runs.len().max(1) as f64
    }

    pub fn mean_val_accuracy(&self) -> f64 {
        self.runs.iter().map(|r| r.val_accuracy).sum::<f64>() / self.runs.len().max(1) as f64
    }
}

/// Train and evaluate one variant across the given seeds.
pub fn run_variant(
    base: &TrainConfig,
    variant: Variant,
    seeds: &[u64],
    corpus: &Corpus,
    progress: bool,
) -> TrainResult<VariantResult> {
    let mut runs = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let mut cfg = variant.apply(base);
        cfg.seed = seed;
        if progress {
            eprintln!("ablate: training {} seed {}", variant.name(), seed);
        }
        let outcome = train(&cfg, &corpus.train, &corpus.val, None)?;
        let model = outcome.checkpoint.model()?;
        let report = evaluate(&model, &corpus.test, "test", cfg.losses)?;
        runs.push(SeedRun {
            seed,
            val_accuracy: outcome.checkpoint.best_val_accuracy,
            test_accuracy: report.accuracy,
            test_frame_ap: report.frame_ap,
            test_correct: correctness_vector(&model, &corpus.test)?,
            test_report: report,
        });
    }
    Ok(VariantResult { variant, name: variant.name(), runs })
}

/// Paired bootstrap over per-episode correctness: resample episodes with
/// replacement and report the two-sided p-value for "accuracy(a) differs from
/// accuracy(b)", plus the observed accuracy difference a - b.
pub fn paired_bootstrap(
    a: &[bool],
    b: &[bool],
    resamples: usize,
    seed: u64,
) -> (f64, f64) {
    assert_eq!(a.len(), b.len(), "paired bootstrap needs aligned correctness vectors");
    assert!(!a.is_empty());
    let n = a.len();
    let observed =
        a.iter().filter(|&&x| x).count() as f64 / n as f64 - b.iter().filter(|&&x| x).count() as f64 / n as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut extreme = 0usize;
    for _ in 0..resamples {
        let mut diff = 0i64;
        for _ in 0..n {
            let i = rng.gen_range(0..n);
            diff += a[i] as i64 - b[i] as i64;
        }
        let diff = diff as f64 / n as f64;
        // Shift the resampled difference to the null (zero mean difference).
        if (diff - observed).abs() >= observed.abs() {
            extreme += 1;
        }
    }
    ((extreme as f64 + 1.0) / (resamples as f64 + 1.0), observed)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Comparison {
    pub a: String,
    pub b: String,
    pub seed: u64,
    pub accuracy_diff: f64,
    pub p_value: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationTable {
    pub seeds: Vec<u64>,
    pub variants: Vec<VariantResult>,
    pub comparisons: Vec<Comparison>,
}

pub const BOOTSTRAP_RESAMPLES: usize = 10_000;

/// Run the grid and compare each variant against the dual-attention
/// full-loss reference, pairing runs by seed.
pub fn ablate(
    base: &TrainConfig,
    variants: &[Variant],
    seeds: &[u64],
    corpus: &Corpus,
    progress: bool,
) -> TrainResult<AblationTable> {
    let mut results = Vec::with_capacity(variants.len());
    for &v in variants {
        results.push(run_variant(base, v, seeds, corpus, progress)?);
    }
    let reference = Variant { dual_attention: true, use_densecap: true, loss: LOSS_VARIANTS.len() - 1 };
    let comparisons = match results.iter().position(|r| r.variant == reference) {
        Some(ri) => {
            let mut out = Vec::new();
            for (vi, r) in results.iter().enumerate() {
                if vi == ri {
                    continue;
                }
                for (run_a, run_b) in results[ri].runs.iter().zip(&r.runs) {
                    let (p, diff) = paired_bootstrap(
                        &run_a.test_correct,
                        &run_b.test_correct,
                        BOOTSTRAP_RESAMPLES,
                        run_a.seed ^ 0xB007,
                    );
                    out.push(Comparison {
                        a: results[ri].name.clone(),
                        b: r.name.clone(),
                        seed: run_a.seed,
                        accuracy_diff: diff,
                        p_value: p,
                    });
                }
            }
            out
        }
        None => Vec::new(),
    };
    Ok(AblationTable { seeds: seeds.to_vec(), variants: results, comparisons })
}

/// Text rendering of the ablation table (one row per variant).
pub fn render_table(table: &AblationTable) -> String {
    let mut s = String::new();
    s.push_str(&format!("{:<34} {:>9} {:>9} {:>9}\n", "variant", "val acc", "test acc", "frame AP"));
    for v in &table.variants {
        let ap = v
            .runs
            .iter()
            .filter_map(|r| r.test_frame_ap)
            .sum::<f64>()
            / v.runs.iter().filter(|r| r.test_frame_ap.is_some()).count().max(1) as f64;
        s.push_str(&format!(
            "{:<34} {:>9.4} {:>9.4} {:>9.4}\n",
            v.name,
            v.mean_val_accuracy(),
            v.mean_test_accuracy(),
            ap
        ));
    }
    if !table.comparisons.is_empty() {
        s.push_str("\npaired bootstrap vs dual-att/bbce+iofsm/densecap-on:\n");
        for c in &table.comparisons {
            s.push_str(&format!(
                "  seed {:>3}  {:<34} diff {:+.4}  p = {:.4}\n",
                c.seed, c.b, c.accuracy_diff, c.p_value
            ));
        }
    }
    s
}
