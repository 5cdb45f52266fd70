// SPDX-License-Identifier: MIT OR Apache-2.0

//! Patch scans against the naive three-run oracle: clean run, corrupted
//! run, and a full corrupted re-run with one site replaced.

use mifin_core::model::fixture::FixtureSpec;
use mifin_core::model::{Payload, Positions};
use mifin_core::patching::{load_pairs, normalized_score, patch_scan, Direction, Granularity};
use mifin_core::{Capture, HookPoint, Intervention, ModelBundle};

fn model() -> ModelBundle {
    FixtureSpec {
        n_layers: 3,
        n_heads: 4,
        d_model: 32,
        d_mlp: 64,
        seed: 11,
        ..FixtureSpec::default()
    }
    .build()
    .unwrap()
}

fn ld(logits: &mifin_core::Matrix, a: u32, b: u32) -> f32 {
    let r = logits.row(logits.rows() - 1);
    r[a as usize] - r[b as usize]
}

#[test]
fn head_scan_matches_three_run_oracle() {
    let m = model();
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/fixtures/finance_pairs.jsonl");
    let set = load_pairs(&m, path.as_ref()).unwrap();
    assert!(!set.pairs.is_empty());
    for direction in [Direction::Denoising, Direction::Noising] {
        let scan = patch_scan(&m, &set.pairs, Granularity::LayerHead, direction).unwrap();
        let mut sums = vec![vec![0.0f64; m.config.n_heads]; m.config.n_layers];
        let mut n = 0;
        for p in &set.pairs {
            let heads = Capture::attn_z_all(&m.config);
            let (cl, clean) = m.forward(&p.clean_ids, &heads).unwrap();
            let (co, corr) = m.forward(&p.corrupted_ids, &heads).unwrap();
            let (ld_c, ld_x) = (ld(&cl, p.correct_id, p.incorrect_id), ld(&co, p.correct_id, p.incorrect_id));
            if (ld_c - ld_x).abs() < 1e-6 {
                continue;
            }
            n += 1;
            let (source, base) = match direction {
                Direction::Denoising => (&clean, &p.corrupted_ids),
                Direction::Noising => (&corr, &p.clean_ids),
            };
            for l in 0..m.config.n_layers {
                for h in 0..m.config.n_heads {
                    let hook = HookPoint::AttnZ { layer: l, head: h };
                    let iv = Intervention::replace(hook, Payload::Rows(source.get(&hook).unwrap().clone()), Positions::All);
                    let (pl, _) = m.forward_with_interventions(base, &[iv], &Capture::none()).unwrap();
                    sums[l][h] += normalized_score(ld(&pl, p.correct_id, p.incorrect_id), ld_c, ld_x) as f64;
                }
            }
        }
        for l in 0..m.config.n_layers {
            for h in 0..m.config.n_heads {
                let want = (sums[l][h] / n as f64) as f32;
                let got = scan.scores[l][h];
                assert!((got - want).abs() < 1e-3, "{direction:?} ({l},{h}): {got} vs {want}");
            }
        }
    }
}

#[test]
fn position_scan_matches_three_run_oracle() {
    let m = model();
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/fixtures/finance_pairs.jsonl");
    let set = load_pairs(&m, path.as_ref()).unwrap();
    let pairs = &set.pairs[..2];
    let scan = patch_scan(&m, pairs, Granularity::LayerPosition, Direction::Denoising).unwrap();
    let p = &pairs[0];
    let all = Capture::resid_post_all(m.config.n_layers);
    let (cl, clean) = m.forward(&p.clean_ids, &all).unwrap();
    let (co, _) = m.forward(&p.corrupted_ids, &all).unwrap();
    let (ld_c, ld_x) = (ld(&cl, p.correct_id, p.incorrect_id), ld(&co, p.correct_id, p.incorrect_id));
    let scores = scan.pairs[0].scores.as_ref().unwrap();
    for l in 0..m.config.n_layers {
        for pos in 0..p.clean_ids.len() {
            let hook = HookPoint::ResidPost(l);
            let row = clean.get(&hook).unwrap().select_rows(&[pos]);
            let iv = Intervention::replace(hook, Payload::Rows(row), Positions::Only(vec![pos]));
            let (pl, _) = m.forward_with_interventions(&p.corrupted_ids, &[iv], &Capture::none()).unwrap();
            let want = normalized_score(ld(&pl, p.correct_id, p.incorrect_id), ld_c, ld_x);
            assert!((scores[l][pos] - want).abs() < 1e-3, "({l},{pos})");
        }
    }
    // Patching the final residual at the last position restores the clean run.
    let last = p.clean_ids.len() - 1;
    assert!((scores[m.config.n_layers - 1][last] - 1.0).abs() < 1e-3);
}
