//! Forced-choice benchmark harness.
//!
//! A dataset is JSON lines, one sample per line:
//!
//! ```json
//! {"id":"s1","context_tokens":[5,6],"question_tokens":[7],
//!  "options":{"A":{"tokens":[0],"role":"stereotype"},
//!             "B":{"tokens":[1],"role":"anti-stereotype"},
//!             "C":{"tokens":[2],"role":"unrelated"}},
//!  "category":"gender"}
//! ```
//!
//! The first generated token decides the answer: it is matched against each
//! option's first token, and anything else counts as invalid.

use std::collections::{BTreeMap, HashSet};
use std::fmt::{self, Write as _};
use std::fs;
use std::path::Path;

use log::{debug, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::decode::{
    build_repe_steering_vector, generate, InterventionConfig, Method, Prompt, RepeBaselineConfig,
};
use crate::error::{Error, Result};
use crate::model::LayeredModel;
use crate::numerics::TokenId;

/// Intervention strengths swept by default.
pub const DEFAULT_GAMMAS: [f64; 7] = [0.5, 1.0, 1.5, 2.0, 5.0, 10.0, 20.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Role {
    Stereotype,
    AntiStereotype,
    Unrelated,
}

impl Role {
    pub const ALL: [Role; 3] = [Role::Stereotype, Role::AntiStereotype, Role::Unrelated];
}

/// Parsed answer of one sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Choice {
    Stereotype,
    AntiStereotype,
    Unrelated,
    Invalid,
}

impl From<Role> for Choice {
    fn from(role: Role) -> Self {
        match role {
            Role::Stereotype => Choice::Stereotype,
            Role::AntiStereotype => Choice::AntiStereotype,
            Role::Unrelated => Choice::Unrelated,
        }
    }
}

impl fmt::Display for Choice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Choice::Stereotype => "stereotype",
            Choice::AntiStereotype => "anti-stereotype",
            Choice::Unrelated => "unrelated",
            Choice::Invalid => "invalid",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnswerOption {
    pub tokens: Vec<TokenId>,
    pub role: Role,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub context_tokens: Vec<TokenId>,
    pub question_tokens: Vec<TokenId>,
    /// Keyed by option label (`A`, `B`, `C`).
    pub options: BTreeMap<String, AnswerOption>,
    #[serde(default)]
    pub category: String,
}

impl Sample {
    /// Checks one option per role, nonempty options with distinct first
    /// tokens and a nonempty question.
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.question_tokens.is_empty() {
            return Err("field `question_tokens` must be nonempty".into());
        }
        let mut roles = HashSet::new();
        let mut firsts = HashSet::new();
        for (label, opt) in &self.options {
            let first = opt
                .tokens
                .first()
                .ok_or_else(|| format!("field `options.{label}.tokens` must be nonempty"))?;
            if !firsts.insert(*first) {
                return Err(format!(
                    "field `options.{label}.tokens` shares its first token {first} with another option"
                ));
            }
            if !roles.insert(opt.role) {
                return Err(format!("field `options.{label}.role` repeats a role"));
            }
        }
        if roles.len() != Role::ALL.len() {
            return Err("field `options` needs exactly one stereotype, anti-stereotype and unrelated option".into());
        }
        Ok(())
    }

    pub fn prompt(&self, with_context: bool) -> Prompt {
        Prompt {
            context: if with_context {
                self.context_tokens.clone()
            } else {
                Vec::new()
            },
            question: self.question_tokens.clone(),
        }
    }

    /// Role whose option starts with `token`.
    pub fn role_of_first_token(&self, token: TokenId) -> Option<Role> {
        self.options
            .values()
            .find(|o| o.tokens.first() == Some(&token))
            .map(|o| o.role)
    }

    pub fn option_token(&self, role: Role) -> TokenId {
        self.options
            .values()
            .find(|o| o.role == role)
            .and_then(|o| o.tokens.first().copied())
            .expect("validated sample has every role")
    }
}

/// Reads a JSON-lines dataset. Blank lines are skipped.
pub fn load_dataset(path: &Path) -> Result<Vec<Sample>> {
    let text = fs::read_to_string(path)?;
    let samples = parse_dataset(&text)?;
    if samples.is_empty() {
        warn!("dataset {} contains no samples", path.display());
    }
    Ok(samples)
}

pub fn parse_dataset(text: &str) -> Result<Vec<Sample>> {
    let mut samples = Vec::new();
    let mut ids = HashSet::new();
    for (index, line) in text.lines().enumerate() {
        let line_no = index + 1;
        if line.trim().is_empty() {
            continue;
        }
        let sample: Sample = serde_json::from_str(line).map_err(|e| Error::Schema {
            line: line_no,
            message: e.to_string(),
        })?;
        sample.validate().map_err(|message| Error::Schema {
            line: line_no,
            message,
        })?;
        if !ids.insert(sample.id.clone()) {
            return Err(Error::Schema {
                line: line_no,
                message: format!("field `id`: duplicate id `{}`", sample.id),
            });
        }
        samples.push(sample);
    }
    Ok(samples)
}

pub fn save_dataset(path: &Path, samples: &[Sample]) -> Result<()> {
    let mut out = String::new();
    for s in samples {
        out.push_str(&serde_json::to_string(s).map_err(|e| Error::Protocol(e.to_string()))?);
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BuiltPrompts {
    /// `Con ‖ Q`, or `Q` alone when the context is dropped.
    pub biased: Vec<TokenId>,
    pub pure: Vec<TokenId>,
    pub context_positions: Vec<usize>,
}

pub fn build_prompts(sample: &Sample, with_context: bool) -> BuiltPrompts {
    let prompt = sample.prompt(with_context);
    BuiltPrompts {
        biased: prompt.with_context(),
        pure: prompt.question.clone(),
        context_positions: prompt.context_positions(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOutcome {
    pub sample_id: String,
    pub category: String,
    pub choice: Choice,
    pub tokens: Vec<TokenId>,
}

/// Generator seed for one sample, independent of evaluation order.
pub fn sample_seed(seed: u64, sample_id: &str) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    seed.to_le_bytes()
        .iter()
        .chain(sample_id.as_bytes())
        .fold(OFFSET, |h, b| (h ^ u64::from(*b)).wrapping_mul(PRIME))
}

pub fn score_sample<M: LayeredModel + ?Sized>(
    model: &M,
    sample: &Sample,
    config: &InterventionConfig,
    with_context: bool,
) -> Result<EvalOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(config.seed, &sample.id));
    let generation = generate(model, &sample.prompt(with_context), config, &mut rng)?;
    let choice = generation
        .tokens
        .first()
        .and_then(|t| sample.role_of_first_token(*t))
        .map_or(Choice::Invalid, Choice::from);
    Ok(EvalOutcome {
        sample_id: sample.id.clone(),
        category: sample.category.clone(),
        choice,
        tokens: generation.tokens,
    })
}

/// Percentages of each answer kind.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Shares {
    pub stereotype: f64,
    pub anti: f64,
    pub unrelated: f64,
    pub invalid: f64,
}

impl Shares {
    fn of<'a>(outcomes: impl Iterator<Item = &'a EvalOutcome>) -> Option<Self> {
        let mut counts = [0usize; 4];
        let mut n = 0usize;
        for o in outcomes {
            n += 1;
            counts[match o.choice {
                Choice::Stereotype => 0,
                Choice::AntiStereotype => 1,
                Choice::Unrelated => 2,
                Choice::Invalid => 3,
            }] += 1;
        }
        (n > 0).then(|| {
            let pct = |c: usize| 100.0 * c as f64 / n as f64;
            Self {
                stereotype: pct(counts[0]),
                anti: pct(counts[1]),
                unrelated: pct(counts[2]),
                invalid: pct(counts[3]),
            }
        })
    }

    fn mean(all: &[Self]) -> Self {
        let n = all.len() as f64;
        let sum = |f: fn(&Self) -> f64| all.iter().map(f).sum::<f64>() / n;
        Self {
            stereotype: sum(|s| s.stereotype),
            anti: sum(|s| s.anti),
            unrelated: sum(|s| s.unrelated),
            invalid: sum(|s| s.invalid),
        }
    }

    pub fn total(&self) -> f64 {
        self.stereotype + self.anti + self.unrelated + self.invalid
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Method name, or a baseline label such as `no-context`.
    pub method: String,
    pub gamma: f64,
    pub seeds: Vec<u64>,
    pub shares: Shares,
    pub per_category: BTreeMap<String, Shares>,
}

impl EvalReport {
    /// `stereo & anti & unrel` with two decimals.
    pub fn latex_row(&self) -> String {
        format!(
            "{:.2} & {:.2} & {:.2}",
            self.shares.stereotype, self.shares.anti, self.shares.unrelated
        )
    }
}

/// Arithmetic mean of per-seed percentages. `runs` pairs each seed with its
/// outcomes.
pub fn aggregate(method: &str, gamma: f64, runs: &[(u64, Vec<EvalOutcome>)]) -> Result<EvalReport> {
    if runs.is_empty() || runs.iter().any(|(_, o)| o.is_empty()) {
        return Err(Error::usage(
            "aggregate needs nonempty outcomes for every seed",
        ));
    }
    let mut runs: Vec<&(u64, Vec<EvalOutcome>)> = runs.iter().collect();
    runs.sort_by_key(|(seed, _)| *seed);
    let per_seed: Vec<Shares> = runs
        .iter()
        .map(|(_, o)| Shares::of(o.iter()).expect("nonempty"))
        .collect();
    let categories: BTreeMap<&str, ()> = runs
        .iter()
        .flat_map(|(_, o)| o.iter().map(|x| (x.category.as_str(), ())))
        .collect();
    let per_category = categories
        .keys()
        .map(|cat| {
            let shares: Vec<Shares> = runs
                .iter()
                .filter_map(|(_, o)| Shares::of(o.iter().filter(|x| x.category == *cat)))
                .collect();
            (cat.to_string(), Shares::mean(&shares))
        })
        .collect();
    let seeds: Vec<u64> = runs.iter().map(|(s, _)| *s).collect();
    Ok(EvalReport {
        method: method.to_string(),
        gamma,
        seeds,
        shares: Shares::mean(&per_seed),
        per_category,
    })
}

fn with_pool<T: Send>(jobs: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    if jobs <= 1 {
        return Ok(f());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::config(format!("cannot start {jobs} workers: {e}")))?;
    Ok(pool.install(f))
}

/// Scores every sample under each seed and aggregates. `with_context =
/// false` drops every context, giving the No-Context baseline.
pub fn evaluate<M: LayeredModel + ?Sized>(
    model: &M,
    dataset: &[Sample],
    config: &InterventionConfig,
    seeds: &[u64],
    with_context: bool,
    jobs: usize,
) -> Result<EvalReport> {
    if dataset.is_empty() {
        return Err(Error::usage("dataset is empty"));
    }
    if seeds.is_empty() {
        return Err(Error::usage("at least one seed is required"));
    }
    let label = if with_context {
        config.method.to_string()
    } else {
        "no-context".to_string()
    };
    let mut runs = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let cfg = InterventionConfig {
            seed,
            ..config.clone()
        };
        let outcomes = with_pool(jobs, || {
            let score = |s: &Sample| score_sample(model, s, &cfg, with_context);
            if jobs <= 1 {
                dataset.iter().map(score).collect::<Result<Vec<_>>>()
            } else {
                dataset.par_iter().map(score).collect::<Result<Vec<_>>>()
            }
        })??;
        debug!(
            "{label} gamma={} seed={seed}: {} outcomes",
            cfg.gamma,
            outcomes.len()
        );
        runs.push((seed, outcomes));
    }
    aggregate(&label, config.gamma, &runs)
}

/// Mean last-position hidden difference at `layer` between the question
/// alone and the question with its context, i.e. a direction pointing away
/// from the context's influence.
pub fn repe_steering_from_samples<M: LayeredModel + ?Sized>(
    model: &M,
    calibration: &[Sample],
    layer: usize,
) -> Result<Vec<f64>> {
    let usable: Vec<&Sample> = calibration
        .iter()
        .filter(|s| !s.context_tokens.is_empty())
        .collect();
    if usable.is_empty() {
        return Err(Error::config(
            "steering calibration needs samples with context",
        ));
    }
    let anti: Vec<Vec<TokenId>> = usable.iter().map(|s| s.question_tokens.clone()).collect();
    let stereo: Vec<Vec<TokenId>> = usable
        .iter()
        .map(|s| build_prompts(s, true).biased)
        .collect();
    build_repe_steering_vector(model, &anti, &stereo, layer)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepPlan {
    pub methods: Vec<Method>,
    pub gammas: Vec<f64>,
    pub seeds: Vec<u64>,
}

/// One report per (method, γ). For the steering baseline γ is the
/// multiplier applied to `base.repe`'s vector.
pub fn sweep<M: LayeredModel + ?Sized>(
    model: &M,
    dataset: &[Sample],
    plan: &SweepPlan,
    base: &InterventionConfig,
    jobs: usize,
) -> Result<Vec<EvalReport>> {
    if plan.methods.is_empty() || plan.gammas.is_empty() || plan.seeds.is_empty() {
        return Err(Error::usage("sweep grids must be nonempty"));
    }
    let mut reports = Vec::with_capacity(plan.methods.len() * plan.gammas.len());
    for &method in &plan.methods {
        for &gamma in &plan.gammas {
            let repe = match method {
                Method::RepeBaseline => Some(RepeBaselineConfig {
                    multiplier: gamma,
                    ..base.repe.clone().ok_or_else(|| {
                        Error::config("repe-baseline sweep needs a steering vector")
                    })?
                }),
                _ => base.repe.clone(),
            };
            let cfg = InterventionConfig {
                method,
                gamma,
                repe,
                ..base.clone()
            };
            reports.push(evaluate(model, dataset, &cfg, &plan.seeds, true, jobs)?);
        }
    }
    Ok(reports)
}

fn fmt_gamma(g: f64) -> String {
    format!("{g}")
}

/// `method,gamma,seed_count,stereo_pct,anti_pct,unrel_pct,invalid_pct`.
pub fn reports_csv(reports: &[EvalReport]) -> String {
    let mut out =
        String::from("method,gamma,seed_count,stereo_pct,anti_pct,unrel_pct,invalid_pct\n");
    for r in reports {
        let s = &r.shares;
        let _ = writeln!(
            out,
            "{},{},{},{:.2},{:.2},{:.2},{:.2}",
            r.method,
            fmt_gamma(r.gamma),
            r.seeds.len(),
            s.stereotype,
            s.anti,
            s.unrelated,
            s.invalid
        );
    }
    out
}

pub fn category_csv(reports: &[EvalReport]) -> String {
    let mut out = String::from("method,gamma,category,stereo_pct,anti_pct,unrel_pct,invalid_pct\n");
    for r in reports {
        for (cat, s) in &r.per_category {
            let _ = writeln!(
                out,
                "{},{},{},{:.2},{:.2},{:.2},{:.2}",
                r.method,
                fmt_gamma(r.gamma),
                cat,
                s.stereotype,
                s.anti,
                s.unrelated,
                s.invalid
            );
        }
    }
    out
}

/// `gamma,method,stereo_pct,anti_pct,invalid_pct`.
pub fn dose_response_csv(reports: &[EvalReport]) -> String {
    let mut out = String::from("gamma,method,stereo_pct,anti_pct,invalid_pct\n");
    for r in reports {
        let _ = writeln!(
            out,
            "{},{},{:.2},{:.2},{:.2}",
            fmt_gamma(r.gamma),
            r.method,
            r.shares.stereotype,
            r.shares.anti,
            r.shares.invalid
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::toy::tests::two_layer_spec;
    use crate::model::ToyModel;
    use proptest::prelude::*;

    const LINE: &str = r#"{"id":"s1","context_tokens":[2],"question_tokens":[3],"options":{"A":{"tokens":[0],"role":"stereotype"},"B":{"tokens":[1],"role":"anti-stereotype"},"C":{"tokens":[2],"role":"unrelated"}},"category":"gender"}"#;

    fn sample(id: &str, category: &str) -> Sample {
        let mut s: Sample = serde_json::from_str(LINE).unwrap();
        s.id = id.into();
        s.category = category.into();
        s
    }

    fn outcome(choice: Choice, category: &str) -> EvalOutcome {
        EvalOutcome {
            sample_id: String::new(),
            category: category.into(),
            choice,
            tokens: vec![],
        }
    }

    #[test]
    fn parses_counts_and_rejects() {
        let three = [LINE, &LINE.replace("s1", "s2"), &LINE.replace("s1", "s3")].join("\n");
        assert_eq!(parse_dataset(&three).unwrap().len(), 3);
        assert!(parse_dataset("").unwrap().is_empty());

        let missing = format!(
            "{LINE}\n{}",
            LINE.replace("s1", "s2")
                .replace(r#","role":"unrelated""#, "")
        );
        match parse_dataset(&missing) {
            Err(Error::Schema { line, message }) => {
                assert_eq!(line, 2);
                assert!(message.contains("role"), "{message}");
            }
            other => panic!("{other:?}"),
        }
        let dup = format!("{LINE}\n\n{LINE}");
        assert!(matches!(
            parse_dataset(&dup),
            Err(Error::Schema { line: 3, .. })
        ));
        let shared = LINE.replace(r#""C":{"tokens":[2]"#, r#""C":{"tokens":[0]"#);
        assert!(parse_dataset(&shared).is_err());
        let two_stereo = LINE.replace(r#""role":"unrelated""#, r#""role":"stereotype""#);
        assert!(parse_dataset(&two_stereo).is_err());
    }

    #[test]
    fn save_then_load_is_identity() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let samples = vec![sample("a", "race"), sample("b", "")];
        save_dataset(&path, &samples).unwrap();
        assert_eq!(load_dataset(&path).unwrap(), samples);
    }

    #[test]
    fn prompt_examples() {
        let mut s = sample("x", "");
        s.context_tokens = vec![5, 6];
        s.question_tokens = vec![7];
        let p = build_prompts(&s, true);
        assert_eq!((p.biased.clone(), p.pure.clone()), (vec![5, 6, 7], vec![7]));
        assert_eq!(p.context_positions, vec![0, 1]);
        s.context_tokens.clear();
        let p = build_prompts(&s, true);
        assert_eq!(p.biased, p.pure);
    }

    #[test]
    fn aggregate_examples() {
        let r = aggregate(
            "none",
            0.0,
            &[(
                1,
                vec![
                    outcome(Choice::Stereotype, "g"),
                    outcome(Choice::Stereotype, "g"),
                    outcome(Choice::AntiStereotype, "r"),
                    outcome(Choice::Unrelated, "r"),
                ],
            )],
        )
        .unwrap();
        assert_eq!(
            (
                r.shares.stereotype,
                r.shares.anti,
                r.shares.unrelated,
                r.shares.invalid
            ),
            (50.0, 25.0, 25.0, 0.0)
        );
        assert_eq!(r.per_category["g"].stereotype, 100.0);
        assert_eq!(r.per_category["r"].anti, 50.0);

        let seed = |k: usize| -> Vec<EvalOutcome> {
            (0..5)
                .map(|i| {
                    outcome(
                        if i < k {
                            Choice::Stereotype
                        } else {
                            Choice::Invalid
                        },
                        "",
                    )
                })
                .collect()
        };
        let r = aggregate("none", 0.0, &[(1, seed(3)), (2, seed(2))]).unwrap();
        assert_eq!(r.shares.stereotype, 50.0);
        assert!(aggregate("none", 0.0, &[]).is_err());
        assert!(aggregate("none", 0.0, &[(1, vec![])]).is_err());
    }

    #[test]
    fn latex_row_layout() {
        let r = EvalReport {
            method: "none".into(),
            gamma: 0.0,
            seeds: vec![1],
            shares: Shares {
                stereotype: 61.47,
                anti: 36.5,
                unrelated: 1.74,
                invalid: 0.29,
            },
            per_category: BTreeMap::new(),
        };
        assert_eq!(r.latex_row(), "61.47 & 36.50 & 1.74");
    }

    fn toy() -> ToyModel {
        ToyModel::new(two_layer_spec(2.0, [0.0, 0.6, -5.0, -5.0])).unwrap()
    }

    #[test]
    fn scoring_examples() {
        let m = toy();
        let s = sample("s", "");
        let greedy = InterventionConfig {
            greedy: true,
            max_new_tokens: 1,
            ..Default::default()
        };
        assert_eq!(
            score_sample(&m, &s, &greedy, true).unwrap().choice,
            Choice::Stereotype
        );
        let fixed = InterventionConfig {
            method: Method::Static,
            gamma: 1.0,
            ..greedy.clone()
        };
        let pure = score_sample(&m, &s, &greedy, false).unwrap();
        assert_eq!(
            score_sample(&m, &s, &fixed, true).unwrap().choice,
            pure.choice
        );
        assert_eq!(pure.choice, Choice::AntiStereotype);

        let mut odd = s.clone();
        odd.options.get_mut("B").unwrap().tokens = vec![3];
        assert_eq!(
            score_sample(&m, &odd, &greedy, true).unwrap().choice,
            Choice::Stereotype
        );
        odd.options.get_mut("A").unwrap().tokens = vec![3, 0];
        odd.options.get_mut("B").unwrap().tokens = vec![2];
        odd.options.get_mut("C").unwrap().tokens = vec![1, 1];
        // greedy token is A=0, which no option now starts with
        assert_eq!(
            score_sample(&m, &odd, &greedy, true).unwrap().choice,
            Choice::Invalid
        );
    }

    #[test]
    fn sweep_shapes() {
        let m = toy();
        let data = vec![sample("a", "g"), sample("b", "r")];
        let plan = SweepPlan {
            methods: vec![Method::None, Method::Static],
            gammas: vec![0.5, 1.0, 2.0],
            seeds: vec![1, 2],
        };
        let base = InterventionConfig {
            top_k: 4,
            max_new_tokens: 1,
            ..Default::default()
        };
        let reports = sweep(&m, &data, &plan, &base, 1).unwrap();
        assert_eq!(reports.len(), 6);
        assert!(reports.iter().all(|r| r.seeds == vec![1, 2]));
        assert!(reports
            .iter()
            .all(|r| (r.shares.total() - 100.0).abs() < 1e-6));
        let none: Vec<_> = reports
            .iter()
            .filter(|r| r.method == "none")
            .map(|r| r.shares)
            .collect();
        assert!(none.windows(2).all(|w| w[0] == w[1]));
        let parallel = sweep(&m, &data, &plan, &base, 3).unwrap();
        assert_eq!(reports_csv(&reports), reports_csv(&parallel));
        assert_eq!(dose_response_csv(&reports).lines().count(), 7);
    }

    #[test]
    fn seeds_are_order_independent() {
        assert_ne!(sample_seed(1, "a"), sample_seed(1, "b"));
        assert_ne!(sample_seed(1, "a"), sample_seed(2, "a"));
        assert_eq!(sample_seed(7, "x"), sample_seed(7, "x"));
    }

    proptest! {
        #[test]
        fn aggregate_is_permutation_invariant(choices in prop::collection::vec(0usize..4, 1..30), rot in 0usize..30) {
            let all = [Choice::Stereotype, Choice::AntiStereotype, Choice::Unrelated, Choice::Invalid];
            let cats = ["g", "r", "p"];
            let outs: Vec<EvalOutcome> = choices.iter().enumerate().map(|(i, c)| outcome(all[*c], cats[i % 3])).collect();
            let mut rotated = outs.clone();
            rotated.rotate_left(rot % outs.len());
            let a = aggregate("m", 1.0, &[(1, outs.clone()), (2, rotated.clone())]).unwrap();
            let b = aggregate("m", 1.0, &[(2, rotated), (1, outs)]).unwrap();
            prop_assert!((a.shares.total() - 100.0).abs() < 1e-6);
            prop_assert_eq!(a, b);
        }
    }
}
