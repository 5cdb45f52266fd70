// SPDX-License-Identifier: MIT OR Apache-2.0

//! Acceptance suite: one `criterion N PASS|FAIL|BLOCKED: detail` line per
//! criterion. Exit status is non-zero only when something FAILs.
//!
//! Criteria that need published GPT-2 Small weights look for a model
//! directory in `MIFIN_GPT2_DIR` (default `<workspace>/models/gpt2`) and
//! report BLOCKED when it is absent, after running the same protocol on a
//! seeded fixture. Pass criterion numbers as arguments to run a subset:
//!
//! ```text
//! cargo test -p mifin-cli --test acceptance -- 4 5
//! ```

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::{Arc, OnceLock};
use std::time::Instant;

use mifin_core::fin::{
    answer_with_gate, bias_scan_latents, build_chunk_index, datasets, evaluate_f1, feature_importance,
    gate_from_latents, sentiment_eval, train_tree, BiasScanParams, FeatureDataset, Node, Pooling, RagParams,
    SentimentEval, SteerScope, TreeParams, DEFAULT_GATE_THRESHOLD,
};
use mifin_core::interp::{self_interpret, self_interpret_prompt, SelfInterpretParams};
use mifin_core::lens::lens_logits;
use mifin_core::model::fixture::{tiny_model, FixtureSpec};
use mifin_core::model::{GenerateParams, Payload, Positions};
use mifin_core::patching::{
    builtin_pairs, normalized_score, parse_pairs, patch_scan, Direction, Granularity, PairRuns, TokenizedPair,
};
use mifin_core::sae::gradcheck::{check_gradients, random_instance};
use mifin_core::sae::{steering_vector, train_sae, Sae, SaeConfig, SaeParams, SteeringMode, TrainParams};
use mifin_core::store::{ActivationStore, StoreOptions};
use mifin_core::synthetic::{recovered, SyntheticSpec};
use mifin_core::{Capture, HookPoint, Intervention, Matrix, ModelBundle};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

// Tolerances and budgets.
const FORWARD_TOL: f32 = 1e-3;
const FORWARD_BUDGET_S: f64 = 5.0;
const LENS_TOL: f32 = 1e-4;
const PATCH_TOL: f32 = 1e-3;
const SCAN_BUDGET_S: f64 = 600.0;
const GRAD_TOL: f64 = 1e-4;
const GRAD_H: f64 = 1e-4;
const GRAD_BUDGET_S: f64 = 60.0;
const RECOVERY_COSINE: f32 = 0.9;
const RECOVERY_MIN: usize = 8;
const RECOVERY_BUDGET_S: f64 = 300.0;
const DESK_ROWS: usize = 100_000;
const DESK_L0_FRACTION: f64 = 0.10;
const DESK_EV: f64 = 0.6;
const DESK_BUDGET_S: f64 = 1800.0;

const EARNINGS: &str = "With good earnings the stock price of company will likely";

enum Outcome {
    Pass(String),
    Blocked(String),
}

type Check = Result<Outcome, String>;

// Negated so that a NaN comparison fails the check.
macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn core<T>(r: mifin_core::Result<T>) -> Result<T, String> {
    r.map_err(|e| format!("{}: {e}", e.code()))
}

fn workspace() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn gpt2_dir() -> PathBuf {
    std::env::var_os("MIFIN_GPT2_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| workspace().join("models/gpt2"))
}

/// Published GPT-2 Small, if present. A directory that exists but fails to
/// load is a failure, not a block.
fn gpt2() -> Result<Option<&'static ModelBundle>, String> {
    static MODEL: OnceLock<Result<Option<ModelBundle>, String>> = OnceLock::new();
    MODEL
        .get_or_init(|| {
            let dir = gpt2_dir();
            if !dir.join("model.safetensors").exists() {
                return Ok(None);
            }
            let b = ModelBundle::load(&dir).map_err(|e| format!("loading {}: {e}", dir.display()))?;
            if b.config.n_layers != 12 || b.config.d_model != 768 {
                return Err(format!("{} is not GPT-2 Small", dir.display()));
            }
            Ok(Some(b))
        })
        .as_ref()
        .map(Option::as_ref)
        .map_err(Clone::clone)
}

fn no_gpt2() -> String {
    format!("GPT-2 Small weights not found in {}", gpt2_dir().display())
}

/// Random-weight model with GPT-2 Small shapes.
fn gpt2_shaped() -> &'static ModelBundle {
    static MODEL: OnceLock<ModelBundle> = OnceLock::new();
    MODEL.get_or_init(|| {
        FixtureSpec {
            n_layers: 12,
            n_heads: 12,
            d_model: 768,
            d_mlp: 3072,
            context_len: 1024,
            seed: 7,
            explicit_head: false,
        }
        .build()
        .expect("fixture")
    })
}

fn max_abs(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}

fn finance_prompts() -> Vec<String> {
    include_str!("../../core/fixtures/finance_prompts.txt")
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(str::to_string)
        .collect()
}

fn finance_pairs(b: &ModelBundle) -> Result<Vec<TokenizedPair>, String> {
    let text = builtin_pairs("finance-pairs").expect("builtin corpus");
    let set = core(parse_pairs(b, text.as_bytes()))?;
    ensure!(!set.pairs.is_empty(), "no valid pairs");
    Ok(set.pairs)
}

// ---------------------------------------------------------------- 1

#[derive(Deserialize)]
struct Reference {
    probe_stride: usize,
    records: Vec<RefRecord>,
}

#[derive(Deserialize)]
struct RefRecord {
    prompt: String,
    ids: Vec<u32>,
    probe_logits: Vec<f32>,
    lens_probe_logits: Vec<Vec<f32>>,
}

/// Worst logit error and slowest forward over the records.
fn compare_forward(b: &ModelBundle, r: &Reference) -> Result<(f32, f64), String> {
    let (mut worst, mut slowest) = (0.0f32, 0.0f64);
    for rec in &r.records {
        let ids = b.encode(&rec.prompt);
        ensure!(ids == rec.ids, "tokenization of {:?} differs from the reference", rec.prompt);
        let t = Instant::now();
        let (logits, _) = core(b.forward(&ids, &Capture::none()))?;
        slowest = slowest.max(t.elapsed().as_secs_f64());
        let last = logits.row(ids.len() - 1);
        let probes: Vec<f32> = last.iter().step_by(r.probe_stride).copied().collect();
        ensure!(probes.len() == rec.probe_logits.len(), "reference has a different vocabulary");
        worst = worst.max(max_abs(&probes, &rec.probe_logits));
        let lens = core(lens_logits(b, &ids, true))?;
        for (l, m) in lens.iter().enumerate() {
            let row: Vec<f32> = m.row(ids.len() - 1).iter().step_by(r.probe_stride).copied().collect();
            worst = worst.max(max_abs(&row, &rec.lens_probe_logits[l]));
        }
    }
    Ok((worst, slowest))
}

fn criterion_1() -> Check {
    let shaped: Reference = serde_json::from_str(include_str!("../../core/tests/data/hf_oracle_gpt2.json"))
        .map_err(|e| e.to_string())?;
    let (err, slowest) = compare_forward(gpt2_shaped(), &shaped)?;
    ensure!(err < FORWARD_TOL, "GPT-2-shaped fixture: max logit error {err:.2e} vs HF");
    ensure!(slowest < FORWARD_BUDGET_S, "GPT-2-shaped fixture: {slowest:.2} s per prompt");
    let interim = format!(
        "GPT-2-shaped fixture vs HF on {} prompts: max error {err:.2e}, slowest {slowest:.2} s",
        shaped.records.len()
    );
    let Some(b) = gpt2()? else {
        return Ok(Outcome::Blocked(format!("{}; {interim}", no_gpt2())));
    };
    let ref_path = gpt2_dir().join("reference.json");
    let Ok(text) = std::fs::read_to_string(&ref_path) else {
        return Ok(Outcome::Blocked(format!(
            "no reference logits at {} (scripts/reference_oracle.py MODEL_DIR crates/core/fixtures/finance_prompts.txt OUT 1); {interim}",
            ref_path.display()
        )));
    };
    let reference: Reference = serde_json::from_str(&text).map_err(|e| e.to_string())?;
    let want: Vec<String> = finance_prompts();
    let have: Vec<&str> = reference.records.iter().map(|r| r.prompt.as_str()).collect();
    ensure!(want.iter().all(|p| have.contains(&p.as_str())), "reference does not cover all 8 prompts");
    let (err, slowest) = compare_forward(b, &reference)?;
    ensure!(err < FORWARD_TOL, "GPT-2: max logit error {err:.2e}");
    ensure!(slowest < FORWARD_BUDGET_S, "GPT-2: {slowest:.2} s per prompt");
    Ok(Outcome::Pass(format!(
        "GPT-2 vs reference (stride {}): max error {err:.2e}, slowest {slowest:.2} s",
        reference.probe_stride
    )))
}

// ---------------------------------------------------------------- 2

fn lens_identity_error(b: &ModelBundle, ids: &[u32]) -> Result<f32, String> {
    let (logits, _) = core(b.forward(ids, &Capture::none()))?;
    let lens = core(lens_logits(b, ids, true))?;
    let last = lens.last().expect("at least one layer");
    Ok(max_abs(last.data(), logits.data()))
}

fn criterion_2() -> Check {
    let tiny = tiny_model();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f32;
    for _ in 0..100 {
        let n = rng.random_range(1..=24);
        let ids: Vec<u32> = (0..n).map(|_| rng.random_range(0..tiny.config.vocab_size as u32)).collect();
        worst = worst.max(lens_identity_error(&tiny, &ids)?);
    }
    ensure!(worst < LENS_TOL, "fixture: final lens row differs from logits by {worst:.2e}");
    let Some(b) = gpt2()? else {
        return Ok(Outcome::Blocked(format!(
            "{}; fixture: 100 random prompts, max |lens - logits| {worst:.2e}",
            no_gpt2()
        )));
    };
    let mut prompts = finance_prompts();
    prompts.push(EARNINGS.into());
    prompts.push("Bond yields climbed after the central bank".into());
    let mut gworst = 0.0f32;
    for p in &prompts {
        gworst = gworst.max(lens_identity_error(b, &b.encode(p))?);
    }
    ensure!(gworst < LENS_TOL, "GPT-2: final lens row differs from logits by {gworst:.2e}");
    // Qualitative trajectory, reported only.
    let ids = b.encode(EARNINGS);
    let lens = core(lens_logits(b, &ids, true))?;
    let (rise, fall) = (core(b.single_token(" rise"))?, core(b.single_token(" fall"))?);
    let traj: Vec<f32> = lens
        .iter()
        .map(|m| {
            let r = m.row(ids.len() - 1);
            r[rise as usize] - r[fall as usize]
        })
        .collect();
    let early_negative = traj[..traj.len() / 2].iter().any(|&v| v < 0.0);
    let final_positive = *traj.last().expect("layers") > 0.0;
    Ok(Outcome::Pass(format!(
        "fixture {worst:.2e}, GPT-2 {gworst:.2e} over {} prompts; rise-fall trajectory {:?} (early negative: {early_negative}, final positive: {final_positive})",
        prompts.len(),
        traj.iter().map(|v| (v * 100.0).round() / 100.0).collect::<Vec<_>>()
    )))
}

// ---------------------------------------------------------------- 3

fn ld(logits: &Matrix, a: u32, b: u32) -> f32 {
    let r = logits.row(logits.rows() - 1);
    r[a as usize] - r[b as usize]
}

/// Empty patch and full final-state patch on every non-degenerate pair.
fn calibration(b: &ModelBundle, pairs: &[TokenizedPair]) -> Result<usize, String> {
    let last = HookPoint::ResidPost(b.config.n_layers - 1);
    let mut n = 0;
    for (i, p) in pairs.iter().enumerate() {
        let runs = core(PairRuns::new(b, p, Direction::Denoising, &Capture::none()))?;
        if runs.is_degenerate() {
            continue;
        }
        n += 1;
        let empty = core(runs.score(&[]))?;
        ensure!(empty.abs() < PATCH_TOL, "pair {i}: empty patch scores {empty}");
        let full = core(runs.score(&[(last, Positions::All)]))?;
        ensure!((full - 1.0).abs() < PATCH_TOL, "pair {i}: final-state patch scores {full}");
    }
    ensure!(n > 0, "every pair is degenerate");
    Ok(n)
}

/// Naive oracle: clean run, corrupted run, one full patched re-run per head.
fn three_run_oracle(b: &ModelBundle, pairs: &[TokenizedPair]) -> Result<Vec<Vec<f32>>, String> {
    let cfg = &b.config;
    let mut sums = vec![vec![0.0f64; cfg.n_heads]; cfg.n_layers];
    let mut n = 0;
    for p in pairs {
        let heads = Capture::attn_z_all(cfg);
        let (cl, clean) = core(b.forward(&p.clean_ids, &heads))?;
        let (co, _) = core(b.forward(&p.corrupted_ids, &Capture::none()))?;
        let (ld_c, ld_x) = (ld(&cl, p.correct_id, p.incorrect_id), ld(&co, p.correct_id, p.incorrect_id));
        if (ld_c - ld_x).abs() < 1e-6 {
            continue;
        }
        n += 1;
        for (l, row) in sums.iter_mut().enumerate() {
            for (h, cell) in row.iter_mut().enumerate() {
                let hook = HookPoint::AttnZ { layer: l, head: h };
                let act = clean.get(&hook).expect("captured").clone();
                let iv = Intervention::replace(hook, Payload::Rows(act), Positions::All);
                let (pl, _) = core(b.forward_with_interventions(&p.corrupted_ids, &[iv], &Capture::none()))?;
                *cell += normalized_score(ld(&pl, p.correct_id, p.incorrect_id), ld_c, ld_x) as f64;
            }
        }
    }
    Ok(sums
        .into_iter()
        .map(|r| r.into_iter().map(|s| (s / n.max(1) as f64) as f32).collect())
        .collect())
}

fn scan_vs_oracle(b: &ModelBundle, pairs: &[TokenizedPair]) -> Result<(Vec<Vec<f32>>, f64, f32), String> {
    let t = Instant::now();
    let scan = core(patch_scan(b, pairs, Granularity::LayerHead, Direction::Denoising))?;
    let secs = t.elapsed().as_secs_f64();
    let oracle = three_run_oracle(b, pairs)?;
    let mut worst = 0.0f32;
    for (a, o) in scan.scores.iter().zip(&oracle) {
        worst = worst.max(max_abs(a, o));
    }
    Ok((scan.scores, secs, worst))
}

fn criterion_3() -> Check {
    let fixture = FixtureSpec {
        n_layers: 3,
        n_heads: 4,
        d_model: 32,
        d_mlp: 64,
        seed: 11,
        ..FixtureSpec::default()
    }
    .build()
    .expect("fixture");
    let pairs = finance_pairs(&fixture)?;
    let n = calibration(&fixture, &pairs)?;
    let (_, _, worst) = scan_vs_oracle(&fixture, &pairs)?;
    ensure!(worst < PATCH_TOL, "fixture: scan differs from the three-run oracle by {worst:.2e}");
    let interim = format!("fixture: calibration on {n} pairs, scan vs oracle {worst:.2e}");
    let Some(b) = gpt2()? else {
        let shaped = gpt2_shaped();
        let pairs = finance_pairs(shaped)?;
        let t = Instant::now();
        core(patch_scan(shaped, &pairs, Granularity::LayerHead, Direction::Denoising))?;
        return Ok(Outcome::Blocked(format!(
            "{}; {interim}; 12x12 scan of {} pairs on the GPT-2-shaped fixture took {:.1} s",
            no_gpt2(),
            pairs.len(),
            t.elapsed().as_secs_f64()
        )));
    };
    let pairs = finance_pairs(b)?;
    let n = calibration(b, &pairs)?;
    let (scores, secs, worst) = scan_vs_oracle(b, &pairs)?;
    ensure!(secs < SCAN_BUDGET_S, "GPT-2 12x12 scan took {secs:.0} s");
    ensure!(worst < PATCH_TOL, "GPT-2: scan differs from the three-run oracle by {worst:.2e}");
    let mut cells: Vec<(usize, usize, f32)> = scores
        .iter()
        .enumerate()
        .flat_map(|(l, r)| r.iter().enumerate().map(move |(h, &s)| (l, h, s)))
        .collect();
    cells.sort_by(|a, b| b.2.total_cmp(&a.2));
    let top3 = &cells[..3];
    let late = top3.iter().all(|c| c.0 >= 6 && c.2 > 0.0);
    Ok(Outcome::Pass(format!(
        "{interim}; GPT-2 calibration on {n} pairs, scan {secs:.0} s, oracle {worst:.2e}; top-3 cells {:?} (all in layers >= 6: {late})",
        top3.iter().map(|c| format!("L{}H{}={:.3}", c.0, c.1, c.2)).collect::<Vec<_>>()
    )))
}

// ---------------------------------------------------------------- 4

fn criterion_4() -> Check {
    let t = Instant::now();
    let (mut worst, mut checked, mut kinks) = (0.0f64, 0usize, 0usize);
    for seed in 0..200u64 {
        let d_in = 2 + (seed % 5) as usize;
        let d_hid = d_in + (seed % 7) as usize;
        let batch = 1 + (seed % 6) as usize;
        let (p, x, alpha) = random_instance(d_in, d_hid, batch, seed);
        let c = core(check_gradients(&p, &x, alpha, GRAD_H))?;
        ensure!(c.max_rel_error < GRAD_TOL, "instance {seed}: relative error {:.2e}", c.max_rel_error);
        worst = worst.max(c.max_rel_error);
        checked += c.checked;
        kinks += c.skipped_kinks;
    }
    let secs = t.elapsed().as_secs_f64();
    ensure!(secs < GRAD_BUDGET_S, "took {secs:.1} s");
    Ok(Outcome::Pass(format!(
        "200 instances, {checked} coordinates ({kinks} kinks skipped), max relative error {worst:.2e}, {secs:.2} s"
    )))
}

// ---------------------------------------------------------------- 5

fn criterion_5() -> Check {
    let synth = core(SyntheticSpec::default().generate())?;
    let cfg = SaeConfig {
        d_in: 16,
        d_hid: 32,
        alpha: 0.1,
        seed: 0,
    };
    let params = TrainParams {
        epochs: 5,
        learning_rate: 3e-3,
        holdout_fraction: 0.0,
        ..TrainParams::default()
    };
    let t = Instant::now();
    let (sae, _) = core(train_sae(&synth.store, &cfg, &params))?;
    let secs = t.elapsed().as_secs_f64();
    let found = recovered(&synth.directions, &sae, RECOVERY_COSINE);
    ensure!(found >= RECOVERY_MIN, "recovered {found}/10 directions at cosine > {RECOVERY_COSINE}");
    ensure!(secs < RECOVERY_BUDGET_S, "training took {secs:.0} s");
    Ok(Outcome::Pass(format!(
        "{found}/10 planted directions recovered at cosine > {RECOVERY_COSINE} on {} rows, training {secs:.1} s",
        synth.store.row_count()
    )))
}

// ---------------------------------------------------------------- 6

struct DeskRun {
    rows: usize,
    d_hid: usize,
    monotone: bool,
    l0: f64,
    ev: f64,
    secs: f64,
}

fn desk_scale(b: &ModelBundle, layer: usize, min_rows: usize, alpha: f32) -> Result<DeskRun, String> {
    // Enough documents to reach `min_rows` positions.
    let mut n_docs = 64;
    let docs = loop {
        let docs = datasets::news_corpus(n_docs, 0.3, 0);
        let tokens: usize = docs.iter().map(|d| b.encode(&d.text).len().min(b.config.context_len)).sum();
        if tokens >= min_rows {
            break docs;
        }
        n_docs = n_docs * min_rows / tokens.max(1) + 1;
    };
    let opts = StoreOptions {
        shuffle_seed: Some(0),
        ..StoreOptions::default()
    };
    let store = core(ActivationStore::build(b, &docs, HookPoint::ResidPost(layer), &opts))?;
    let cfg = SaeConfig::expansion(b.config.d_model, alpha);
    let t = Instant::now();
    let (_, report) = core(train_sae(&store, &cfg, &TrainParams::default()))?;
    Ok(DeskRun {
        rows: store.row_count(),
        d_hid: cfg.d_hid,
        monotone: report.loss_non_increasing_after(2, 1e-3),
        l0: report.final_metrics.mean_l0,
        ev: report.explained_variance,
        secs: t.elapsed().as_secs_f64(),
    })
}

fn criterion_6() -> Check {
    let Some(b) = gpt2()? else {
        let fixture = FixtureSpec {
            n_layers: 4,
            n_heads: 4,
            d_model: 32,
            d_mlp: 128,
            seed: 7,
            ..FixtureSpec::default()
        }
        .build()
        .expect("fixture");
        let r = desk_scale(&fixture, 2, 10_000, 5e-4)?;
        return Ok(Outcome::Blocked(format!(
            "{}; same protocol on a d_model=32 fixture (not asserted): {} rows, d_hid {}, loss non-increasing {}, L0 {:.1}, EV {:.3}, {:.1} s",
            no_gpt2(),
            r.rows,
            r.d_hid,
            r.monotone,
            r.l0,
            r.ev,
            r.secs
        )));
    };
    let r = desk_scale(b, 6, DESK_ROWS, 5e-4)?;
    let detail = format!(
        "{} rows, d_hid {}, L0 {:.1}, EV {:.3}, {:.0} s",
        r.rows, r.d_hid, r.l0, r.ev, r.secs
    );
    ensure!(r.rows >= DESK_ROWS, "store too small: {detail}");
    ensure!(r.monotone, "loss rose after epoch 2: {detail}");
    ensure!(r.l0 < DESK_L0_FRACTION * r.d_hid as f64, "L0 too high: {detail}");
    ensure!(r.ev > DESK_EV, "explained variance too low: {detail}");
    ensure!(r.secs < DESK_BUDGET_S, "training too slow: {detail}");
    Ok(Outcome::Pass(detail))
}

// ---------------------------------------------------------------- 7

fn random_sae(d_in: usize, hook: HookPoint, seed: u64) -> Sae {
    let cfg = SaeConfig {
        d_in,
        d_hid: 2 * d_in,
        alpha: 0.1,
        seed,
    };
    Sae::new(SaeParams::init(&cfg).expect("valid config"), hook, None).expect("sae")
}

fn tmpdir() -> tempfile::TempDir {
    tempfile::tempdir_in(env!("CARGO_TARGET_TMPDIR")).expect("tempdir")
}

fn mifin(args: &[&str], cwd: &Path) -> Result<String, String> {
    let o = Command::new(env!("CARGO_BIN_EXE_mifin"))
        .args(args)
        .current_dir(cwd)
        .env_remove("MIFIN_MODEL_DIR")
        .env("MIFIN_LOG", "warn")
        .output()
        .map_err(|e| e.to_string())?;
    if !o.status.success() {
        return Err(format!(
            "mifin {} exited {:?}: {}",
            args.join(" "),
            o.status.code(),
            String::from_utf8_lossy(&o.stderr).trim()
        ));
    }
    Ok(String::from_utf8_lossy(&o.stdout).into_owned())
}

fn criterion_7() -> Check {
    let b = tiny_model();
    let sae = Arc::new(random_sae(b.config.d_model, HookPoint::ResidPost(0), 3));
    let prompt = b.encode("Quarterly revenue rose and the shares");
    let plain = core(b.generate(&prompt, &GenerateParams::greedy(16)))?;
    for f in [0, 5, 15] {
        let iv = core(steering_vector(&sae, f, 0.0, SteeringMode::AddDirection))?;
        let steered = core(b.generate(&prompt, &GenerateParams::greedy(16).with_interventions(vec![iv.clone()])))?;
        ensure!(steered == plain, "feature {f}: magnitude-0 generation differs");
        let again = core(b.generate(&prompt, &GenerateParams::greedy(16).with_interventions(vec![iv])))?;
        ensure!(again == steered, "feature {f}: repeated run differs");
    }
    let si = core(self_interpret(&b, &sae, 2, 0.0, &SelfInterpretParams::default()))?;
    let si_plain = core(b.generate(&b.encode(&self_interpret_prompt("X")), &GenerateParams::greedy(32)))?;
    ensure!(si.tokens == si_plain.tokens, "self-interpretation at magnitude 0 differs from plain generation");

    let data = datasets::sentiment_sentences();
    let data = &data[..10];
    let unsteered = core(sentiment_eval(&b, data, &[], SteerScope::All))?;
    for scope in [SteerScope::All, SteerScope::Prompt, SteerScope::Generated] {
        let iv = core(steering_vector(&sae, 1, 0.0, SteeringMode::AddDirection))?;
        let steered = core(sentiment_eval(&b, data, &[iv], scope))?;
        ensure!(steered == unsteered, "sentiment {scope:?}: magnitude-0 predictions differ");
    }

    // Through the binary: steered and unsteered matrices written side by side.
    let t = tmpdir();
    let model = t.path().join("model");
    b.save(&model).map_err(|e| e.to_string())?;
    sae.save(&t.path().join("sae")).map_err(|e| e.to_string())?;
    let args = ["sentiment-eval", "--model-dir", "model", "--sae", "sae", "--feature", "1", "--magnitude", "0"];
    let first = mifin(&[&args[..], &["--out", "a"]].concat(), t.path())?;
    let second = mifin(&[&args[..], &["--out", "b"]].concat(), t.path())?;
    ensure!(first == second, "repeated CLI runs print different results");
    let read = |p: &str| std::fs::read(t.path().join(p)).map_err(|e| format!("{p}: {e}"));
    ensure!(
        read("a/confusion_steered.csv")? == read("a/confusion_unsteered.csv")?,
        "CLI steered matrix differs from unsteered at magnitude 0"
    );
    ensure!(read("a/confusion_steered.csv")? == read("b/confusion_steered.csv")?, "CLI runs differ");
    Ok(Outcome::Pass(
        "magnitude 0 is token-identical for generation, self-interpretation, sentiment (all scopes) and the CLI; repeats identical".into(),
    ))
}

// ---------------------------------------------------------------- 8

fn criterion_8() -> Check {
    let p = BiasScanParams::default();
    let set = |v: &[usize]| v.iter().copied().collect::<BTreeSet<usize>>();
    // Five of eight latents fire; two of them are in the bias set.
    let lat = Matrix::new(2, 8, vec![1.0, 0.0, 2.0, 0.0, 0.5, 0.0, 0.0, 0.0, 0.0, 3.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0])
        .expect("shape");
    let r = core(bias_scan_latents(&lat, &set(&[0, 1, 3]), "t", &p))?;
    ensure!(r.activated == vec![0, 1, 2, 4, 6], "activated {:?}", r.activated);
    ensure!(r.bias_ratio == 0.4, "2-of-5 ratio {}", r.bias_ratio);
    let r = core(bias_scan_latents(&lat, &set(&[]), "t", &p))?;
    ensure!(r.bias_ratio == 0.0, "empty set ratio {}", r.bias_ratio);
    let zero = Matrix::zeros(3, 8);
    let r = core(bias_scan_latents(&zero, &set(&[1, 2]), "t", &p))?;
    ensure!(r.bias_ratio == 0.0, "no active latents: ratio {}", r.bias_ratio);

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for case in 0..500 {
        let d = rng.random_range(1..=12);
        let rows = rng.random_range(1..=4);
        let lat = Matrix::from_fn(rows, d, |_, _| if rng.random_bool(0.4) { rng.random_range(0.0..2.0) } else { 0.0 });
        let mut order: Vec<usize> = (0..d).collect();
        for i in (1..d).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        let mut grown = BTreeSet::new();
        let mut prev = core(bias_scan_latents(&lat, &grown, "t", &p))?.bias_ratio;
        for &f in &order {
            grown.insert(f);
            let r = core(bias_scan_latents(&lat, &grown, "t", &p))?.bias_ratio;
            ensure!(r >= prev, "case {case}: ratio fell from {prev} to {r} when the set grew");
            prev = r;
        }
    }
    Ok(Outcome::Pass(
        "2-of-5 = 0.4, empty set = 0, monotone under set growth on 500 random cases; published per-text ratios not reproduced".into(),
    ))
}

// ---------------------------------------------------------------- 9

fn criterion_9() -> Check {
    ensure!(DEFAULT_GATE_THRESHOLD == 0.20, "default threshold {DEFAULT_GATE_THRESHOLD}");
    let set: BTreeSet<usize> = [0].into();
    let lat = Matrix::new(2, 3, vec![1.0, 0.0, 1.0, 0.0, 2.0, 0.0]).expect("shape");
    let g = core(gate_from_latents(&lat, &set, 0.2))?;
    ensure!(g.finance_ratio == 0.25 && !g.triggered, "1/4 at 0.2: {g:?}");
    let g = core(gate_from_latents(&lat, &set, 0.3))?;
    ensure!(g.triggered, "1/4 at 0.3 should trigger");
    let g = core(gate_from_latents(&lat, &set, 0.25))?;
    ensure!(!g.triggered, "ratio equal to the threshold does not trigger");
    let g = core(gate_from_latents(&Matrix::zeros(2, 3), &set, 0.2))?;
    ensure!(g.finance_ratio == 0.0 && g.triggered, "silent latents: {g:?}");

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let thresholds: Vec<f64> = (0..20).map(|i| i as f64 / 20.0).collect();
    for case in 0..1000 {
        let d = rng.random_range(2..=10);
        let rows = rng.random_range(1..=5);
        let lat = Matrix::from_fn(rows, d, |_, _| if rng.random_bool(0.5) { rng.random_range(0.0..3.0) } else { 0.0 });
        let set: BTreeSet<usize> = (0..d).filter(|_| rng.random_bool(0.3)).chain([0]).collect();
        let mut was = false;
        let mut ratio = None;
        for &t in &thresholds {
            let g = core(gate_from_latents(&lat, &set, t))?;
            ensure!(!was || g.triggered, "case {case}: trigger lost when the threshold rose to {t}");
            ensure!(ratio.is_none_or(|r| r == g.finance_ratio), "case {case}: ratio depends on threshold");
            was = g.triggered;
            ratio = Some(g.finance_ratio);
        }
    }

    // End to end: a finance feature that never fires forces retrieval.
    let b = tiny_model();
    let docs = datasets::rag_documents();
    let index = core(build_chunk_index(&b, &docs, 1, 16, 12))?;
    let cfg = SaeConfig {
        d_in: b.config.d_model,
        d_hid: 16,
        alpha: 0.1,
        seed: 1,
    };
    let mut params = core(SaeParams::init(&cfg))?;
    params.b[0] = -1e6;
    let sae = core(Sae::new(params, HookPoint::ResidPost(1), None))?;
    let rag = RagParams {
        finance_set: [0].into(),
        max_new_tokens: 8,
        ..RagParams::default()
    };
    let a = core(answer_with_gate(&b, &sae, &index, "What happened to bond yields?", &rag))?;
    ensure!(a.gate.triggered, "gate did not trigger: {:?}", a.gate);
    ensure!(!a.sources.is_empty(), "no sources attached");
    Ok(Outcome::Pass(format!(
        "toy cases exact, monotone over 1000 patterns, default 0.20; fixture RAG triggered with {} sources over {} chunks",
        a.sources.len(),
        index.chunks.len()
    )))
}

// ---------------------------------------------------------------- 10

#[derive(Debug)]
enum Oracle {
    Leaf(String),
    Split(usize, f64, Box<Oracle>, Box<Oracle>),
}

fn counts(rows: &[usize], y: &[String]) -> std::collections::BTreeMap<String, i128> {
    let mut m = std::collections::BTreeMap::new();
    for &r in rows {
        *m.entry(y[r].clone()).or_insert(0) += 1;
    }
    m
}

fn purity(rows: &[usize], y: &[String]) -> (i128, i128) {
    (counts(rows, y).values().map(|c| c * c).sum(), rows.len() as i128)
}

fn majority(rows: &[usize], y: &[String]) -> String {
    let c = counts(rows, y);
    let max = *c.values().max().expect("non-empty");
    c.into_iter().find(|(_, v)| *v == max).expect("max exists").0
}

/// Exhaustive split search with exact rational Gini.
fn grow(x: &[Vec<i32>], y: &[String], rows: Vec<usize>, depth: usize, p: &TreeParams) -> Oracle {
    if counts(&rows, y).len() <= 1 || depth >= p.max_depth {
        return Oracle::Leaf(majority(&rows, y));
    }
    let parent = purity(&rows, y);
    let mut best: Option<((i128, i128), usize, f64)> = None;
    for f in 0..x[0].len() {
        let mut vals: Vec<i32> = rows.iter().map(|&r| x[r][f]).collect();
        vals.sort_unstable();
        vals.dedup();
        for w in vals.windows(2) {
            let t = (w[0] as f64 + w[1] as f64) / 2.0;
            let (l, r): (Vec<usize>, Vec<usize>) = rows.iter().partition(|&&i| (x[i][f] as f64) <= t);
            if l.len() < p.min_samples_leaf || r.len() < p.min_samples_leaf {
                continue;
            }
            let (a, b) = (purity(&l, y), purity(&r, y));
            let s = (a.0 * b.1 + b.0 * a.1, a.1 * b.1);
            if best.as_ref().is_none_or(|(bs, _, _)| s.0 * bs.1 > bs.0 * s.1) {
                best = Some((s, f, t));
            }
        }
    }
    match best {
        Some((s, f, t)) if s.0 * parent.1 > parent.0 * s.1 => {
            let (l, r): (Vec<usize>, Vec<usize>) = rows.iter().partition(|&&i| (x[i][f] as f64) <= t);
            Oracle::Split(f, t, Box::new(grow(x, y, l, depth + 1, p)), Box::new(grow(x, y, r, depth + 1, p)))
        }
        _ => Oracle::Leaf(majority(&rows, y)),
    }
}

fn same(node: &Node, o: &Oracle) -> bool {
    match (node, o) {
        (Node::Leaf { label, .. }, Oracle::Leaf(l)) => label == l,
        (
            Node::Split {
                feature,
                threshold,
                left,
                right,
                ..
            },
            Oracle::Split(f, t, ol, or),
        ) => feature == f && threshold == t && same(left, ol) && same(right, or),
        _ => false,
    }
}

fn used_features(n: &Node, out: &mut BTreeSet<usize>) {
    if let Node::Split { feature, left, right, .. } = n {
        out.insert(*feature);
        used_features(left, out);
        used_features(right, out);
    }
}

fn criterion_10() -> Check {
    // Separable: the label is determined by feature 1; feature 2 is constant.
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let labels = ["negative", "neutral", "positive"];
    let (mut x, mut y) = (Vec::new(), Vec::new());
    for i in 0..90 {
        let c = i % 3;
        x.push(vec![rng.random_range(0.0..1.0), c as f32 + rng.random_range(0.0..0.8), 0.5]);
        y.push(labels[c].to_string());
    }
    let data = core(FeatureDataset::new(x, y, Pooling::Max))?;
    let tree = core(train_tree(&data, &TreeParams::default()))?;
    let f1 = core(evaluate_f1(&tree, &data))?;
    ensure!(f1.macro_f1 == 1.0, "separable macro F1 {}", f1.macro_f1);
    let imp = feature_importance(&tree);
    ensure!(imp[2] == 0.0, "constant feature importance {}", imp[2]);

    let mut instances = 0;
    for seed in 0..500u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(2..=12);
        let k = rng.random_range(2..=3);
        let range = rng.random_range(2..=6);
        let x: Vec<Vec<i32>> = (0..n).map(|_| (0..3).map(|_| rng.random_range(0..range)).collect()).collect();
        let y: Vec<String> = (0..n).map(|_| labels[rng.random_range(0..k)].to_string()).collect();
        let params = TreeParams {
            max_depth: rng.random_range(1..=2),
            min_samples_leaf: rng.random_range(1..=2),
        };
        let fx = x.iter().map(|r| r.iter().map(|&v| v as f32).collect()).collect();
        let data = core(FeatureDataset::new(fx, y.clone(), Pooling::Max))?;
        let tree = core(train_tree(&data, &params))?;
        let oracle = grow(&x, &y, (0..n).collect(), 0, &params);
        ensure!(same(&tree.root, &oracle), "instance {seed}: {:?} vs oracle {oracle:?}", tree.root);
        let mut used = BTreeSet::new();
        used_features(&tree.root, &mut used);
        for (f, v) in feature_importance(&tree).iter().enumerate() {
            ensure!(used.contains(&f) || *v == 0.0, "instance {seed}: unused feature {f} has importance {v}");
        }
        instances += 1;
    }
    Ok(Outcome::Pass(format!(
        "separable F1 1.0, constant feature importance 0; {instances} random <=12-row depth<=2 instances match the exhaustive oracle"
    )))
}

// ---------------------------------------------------------------- 11

fn archive(name: &str, eval: &SentimentEval) -> Result<PathBuf, String> {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance-artifacts");
    std::fs::create_dir_all(&dir).map_err(|e| e.to_string())?;
    let p = dir.join(name);
    std::fs::write(&p, eval.matrix.to_csv()).map_err(|e| e.to_string())?;
    Ok(p)
}

fn criterion_11() -> Check {
    let data = datasets::sentiment_sentences();
    ensure!(data.len() == 50, "fixture has {} sentences", data.len());
    let b = tiny_model();
    let sae = Arc::new(random_sae(b.config.d_model, HookPoint::ResidPost(1), 11));
    let unsteered = core(sentiment_eval(&b, &data, &[], SteerScope::All))?;
    ensure!(unsteered.matrix.total() == data.len(), "unsteered total {}", unsteered.matrix.total());
    let zero = core(steering_vector(&sae, 4, 0.0, SteeringMode::AddDirection))?;
    let steered0 = core(sentiment_eval(&b, &data, &[zero], SteerScope::All))?;
    ensure!(steered0.matrix == unsteered.matrix, "magnitude-0 matrix differs from unsteered");
    let strong = core(steering_vector(&sae, 4, 8.0, SteeringMode::AddDirection))?;
    let steered = core(sentiment_eval(&b, &data, &[strong], SteerScope::All))?;
    ensure!(steered.matrix.total() == data.len(), "steered total {}", steered.matrix.total());
    archive("fixture_unsteered.csv", &unsteered)?;
    let dir = archive("fixture_steered.csv", &steered)?;
    let interim = format!(
        "fixture: totals {}/{}, magnitude 0 identical; matrices archived in {}",
        unsteered.matrix.total(),
        steered.matrix.total(),
        dir.parent().expect("dir").display()
    );

    let Some(g) = gpt2()? else {
        return Ok(Outcome::Blocked(format!("{}; {interim}", no_gpt2())));
    };
    let (Some(sae_dir), Some(feature)) = (std::env::var_os("MIFIN_RISK_SAE"), std::env::var("MIFIN_RISK_FEATURE").ok())
    else {
        return Ok(Outcome::Blocked(format!(
            "set MIFIN_RISK_SAE and MIFIN_RISK_FEATURE to the desk-scale SAE and its hand-labeled risk feature; {interim}"
        )));
    };
    let feature: usize = feature.parse().map_err(|e| format!("MIFIN_RISK_FEATURE: {e}"))?;
    let magnitude: f32 = std::env::var("MIFIN_RISK_MAGNITUDE").ok().and_then(|m| m.parse().ok()).unwrap_or(8.0);
    let risk = Arc::new(core(Sae::load(Path::new(&sae_dir)))?);
    let un = core(sentiment_eval(g, &data, &[], SteerScope::All))?;
    let iv = core(steering_vector(&risk, feature, magnitude, SteeringMode::AddDirection))?;
    let st = core(sentiment_eval(g, &data, &[iv], SteerScope::All))?;
    ensure!(un.matrix.total() == data.len() && st.matrix.total() == data.len(), "GPT-2 totals do not conserve");
    archive("gpt2_unsteered.csv", &un)?;
    archive("gpt2_steered.csv", &st)?;
    Ok(Outcome::Pass(format!(
        "{interim}; GPT-2 risk feature {feature} at {magnitude}: correct {} -> {}",
        un.matrix.correct(),
        st.matrix.correct()
    )))
}

// ---------------------------------------------------------------- 12

fn criterion_12() -> Check {
    let t = tmpdir();
    let dir = t.path();
    mifin(&["fixture-model", "--seed", "4", "--out", "model"], dir)?;
    let runs: Vec<(&str, Vec<&str>)> = vec![
        ("fixture-model", vec!["--seed", "5", "--layers", "1"]),
        ("lens", vec!["--prompt", EARNINGS, "--top-k", "3"]),
        ("logit-diff", vec!["--prompt", "Shares will", "--token-a", " rise", "--token-b", " fall"]),
        ("patch-scan", vec!["--corpus", "finance-pairs"]),
        ("patch-scan", vec!["--corpus", "finance-pairs", "--granularity", "position", "--direction", "noising"]),
        ("resample", vec!["--prompt", "Bond yields climbed", "--hook", "resid_post.0", "--token-a", " up", "--token-b", " down"]),
        ("store-build", vec!["--builtin", "news", "--n-docs", "12", "--hook", "resid_post.1"]),
        ("sae-train", vec!["--store", "r/store-build/store", "--d-hid", "16", "--alpha", "0.01", "--epochs", "2", "--batch-size", "64"]),
        ("sae-metrics", vec!["--sae", "r/sae-train/sae", "--store", "r/store-build/store"]),
        ("top-acts", vec!["--sae", "r/sae-train/sae", "--store", "r/store-build/store", "--feature", "1"]),
        ("auto-label", vec!["--sae", "r/sae-train/sae", "--store", "r/store-build/store", "--features", "0,1,2"]),
        ("self-interp", vec!["--sae", "r/sae-train/sae", "--feature", "1", "--magnitude", "0,4", "--max-new-tokens", "6"]),
        ("cluster", vec!["--sae", "r/sae-train/sae", "--catalog", "r/auto-label/catalog.json"]),
        ("search", vec!["--catalog", "r/auto-label/catalog.json", "--query", "feature"]),
        ("bias-scan", vec!["--sae", "r/sae-train/sae", "--features", "0,1", "--builtin-loans"]),
        ("rag-index", vec!["--builtin", "rag", "--layer", "1", "--window", "16", "--stride", "12"]),
        ("rag-answer", vec!["--index", "r/rag-index/index.json", "--sae", "r/sae-train/sae", "--features", "0", "--question", "What moved yields?", "--max-new-tokens", "6"]),
        ("tree-train", vec!["--sae", "r/sae-train/sae", "--builtin-headlines", "--n", "40"]),
        ("tree-eval", vec!["--tree", "r/tree-train/tree.json", "--sae", "r/sae-train/sae", "--builtin-headlines", "--n", "20", "--data-seed", "1"]),
        ("sentiment-eval", vec!["--sae", "r/sae-train/sae", "--feature", "1", "--magnitude", "2", "--format", "csv"]),
    ];
    let mut replayed = 0;
    let mut seen = BTreeSet::new();
    for (i, (sub, extra)) in runs.iter().enumerate() {
        // First run of a subcommand goes to r/<sub> so later runs can use it.
        let out = if seen.insert(*sub) { format!("r/{sub}") } else { format!("r/{sub}-{i}") };
        let mut args = vec![*sub];
        args.extend(extra.iter().copied());
        if *sub != "fixture-model" {
            args.extend(["--model-dir", "model"]);
        }
        args.extend(["--out", &out]);
        mifin(&args, dir)?;
        let manifest = format!("{out}/{sub}.manifest.json");
        mifin(&["replay", &manifest], dir).map_err(|e| format!("replay of {sub}: {e}"))?;
        replayed += 1;
    }
    Ok(Outcome::Pass(format!(
        "{replayed} runs over {} batch subcommands replayed byte-identically",
        seen.len()
    )))
}

// ----------------------------------------------------------------

type Criterion = fn() -> Check;

const CRITERIA: [(usize, Criterion); 12] = [
    (1, criterion_1),
    (2, criterion_2),
    (3, criterion_3),
    (4, criterion_4),
    (5, criterion_5),
    (6, criterion_6),
    (7, criterion_7),
    (8, criterion_8),
    (9, criterion_9),
    (10, criterion_10),
    (11, criterion_11),
    (12, criterion_12),
];

fn main() {
    let wanted: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    // Keep panics from the criteria on their own result line.
    std::panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (n, f) in CRITERIA {
        if !wanted.is_empty() && !wanted.contains(&n) {
            continue;
        }
        let t = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        let secs = t.elapsed().as_secs_f64();
        let (status, detail) = match result {
            Ok(Outcome::Pass(d)) => ("PASS", d),
            Ok(Outcome::Blocked(d)) => ("BLOCKED", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("criterion {n} {status}: {detail} [{secs:.1} s]");
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
