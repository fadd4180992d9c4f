mod support;

use hsae_core::data::{ForestSpec, SyntheticForest};
use hsae_core::metrics::{self, fidelity, ground_truth_recovery};
use hsae_core::training::{hsae_objective, hsae_total_loss, SubstitutionMask};
use hsae_core::{Matrix, SaeLevel};
use rand::Rng;
use support::*;

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1e-12)
}

#[test]
fn objective_matches_term_by_term_reference() {
    let sizes = [2, 4];
    for seed in 0..200 {
        let mut rng = seeded(seed);
        let levels: Vec<SaeLevel> = sizes
            .iter()
            .enumerate()
            .map(|(k, &n)| {
                let lambda = rng.random_range(0.0..0.2);
                random_level(&mut rng, k, 4, n, 0.5, lambda)
            })
            .collect();
        let x = normal_matrix(&mut rng, 2, 4, 1.0);
        let parents = vec![random_parents(&mut rng, 2, 4, 0.3)];
        let h = hierarchy(&sizes, parents.clone());
        let rho = rng.random_range(0.0..1.0);
        let flags = vec![vec![rng.random_bool(0.5), rng.random_bool(0.5)]];
        let out = hsae_objective(&levels, &h, &x, rho, 0.001, &SubstitutionMask::from_flags(flags.clone()), false)
            .unwrap()
            .breakdown;
        let params: Vec<Params> = levels.iter().map(Params::of).collect();
        let want = hsae_loss(&params, &parents, &flags, &rows_f64(&x), rho);
        assert!(close(out.total, want.total, 1e-6), "seed {seed}: {out:?} vs {want:?} {parents:?} {flags:?}");
        for k in 0..2 {
            assert!(close(out.levels[k].mse, want.mse[k], 1e-6), "seed {seed} mse {k}");
            assert_eq!(out.levels[k].l0, want.l0[k], "seed {seed} l0 {k}");
        }
        assert!(close(out.pc[0], want.pc[0], 1e-6), "seed {seed} pc");

        // The sampling entry point draws its mask from the generator it is given.
        let p = 0.5;
        let mask = SubstitutionMask::sample(&h, p, &mut seeded(seed + 7)).unwrap();
        let drawn = vec![(0..2).map(|i| mask.get(0, i)).collect::<Vec<bool>>()];
        let sampled = hsae_total_loss(&levels, &h, &x, rho, p, 0.001, &mut seeded(seed + 7)).unwrap();
        let want = hsae_loss(&params, &parents, &drawn, &rows_f64(&x), rho);
        assert!(close(sampled.total, want.total, 1e-6), "seed {seed} sampled");
    }
}

#[test]
fn hierarchy_metrics_equal_enumeration() {
    let mut rng = seeded(42);
    let mut defined = [0usize; 3];
    for _ in 0..1000 {
        let batch = rng.random_range(1..=8);
        let n_par = rng.random_range(1..=8);
        let n_child = rng.random_range(1..=8);
        let parents = random_parents(&mut rng, n_par, n_child, 0.3);
        let h = hierarchy(&[n_par, n_child], vec![parents.clone()]);
        let p_on = rng.random_range(0.0..1.0);
        let pm = random_mask(&mut rng, batch, n_par, p_on);
        let cm = random_mask(&mut rng, batch, n_child, p_on);
        let (pmm, cmm) = (mask_matrix(&pm), mask_matrix(&cm));

        let ham = metrics::logical_or_hamming(&pmm, &cmm, &h, 0).unwrap();
        let pgc = metrics::p_parent_given_child(&pmm, &cmm, &h, 0).unwrap();
        let cgp = metrics::p_child_given_parent(&pmm, &cmm, &h, 0).unwrap();
        assert_eq!(ham, hamming(&pm, &cm, &parents), "{parents:?} {pm:?} {cm:?}");
        assert_eq!(pgc, p_parent_given_child(&pm, &cm, &parents));
        assert_eq!(cgp, p_child_given_parent(&pm, &cm, &parents));
        for (slot, v) in defined.iter_mut().zip([ham, pgc, cgp]) {
            *slot += v.is_some() as usize;
        }
    }
    assert!(defined.iter().all(|&c| c > 500), "too many undefined instances: {defined:?}");
}

#[test]
fn fidelity_equals_direct_sums() {
    let mut rng = seeded(5);
    for _ in 0..200 {
        let d = rng.random_range(1..=6);
        let n = rng.random_range(1..=8);
        let level = random_level(&mut rng, 0, d, n, 0.5, 0.0);
        let batches: Vec<Matrix> = (0..rng.random_range(1..=3))
            .map(|_| {
                let rows = rng.random_range(2..=8);
                normal_matrix(&mut rng, rows, d, 1.0)
            })
            .collect();
        let got = &fidelity(std::slice::from_ref(&level), &batches).unwrap()[0];

        let p = Params::of(&level);
        let rows: Vec<Vec<f64>> = batches.iter().flat_map(rows_f64).collect();
        let acts = activations(&p, &rows);
        let active: usize = acts.iter().map(|a| a.iter().filter(|v| **v != 0.0).count()).sum();
        assert_eq!(got.avg_l0, active as f64 / rows.len() as f64);
        let mean: Vec<f64> = (0..d).map(|t| rows.iter().map(|r| r[t]).sum::<f64>() / rows.len() as f64).collect();
        let (mut sse, mut sst) = (0.0, 0.0);
        for (r, a) in rows.iter().zip(&acts) {
            for t in 0..d {
                let recon: f64 = (0..n).map(|i| a[i] * p.dec[i][t]).sum();
                sse += (r[t] - recon).powi(2);
                sst += (r[t] - mean[t]).powi(2);
            }
        }
        if sst > 1e-9 {
            let want = 1.0 - sse / sst;
            assert!((got.variance_explained - want).abs() < 1e-5 * want.abs().max(1.0), "{} vs {want}", got.variance_explained);
        }
    }
}

/// A learned model made from perturbed copies of the planted directions in
/// shuffled order, plus random distractors, with a partly wrong forest.
#[test]
fn recovery_equals_enumeration() {
    let spec = ForestSpec {
        d: 12,
        roots: 3,
        branching: 2,
        depth: 2,
        child_alignment: 0.0,
        ..ForestSpec::default()
    };
    for seed in 0..50 {
        let truth = SyntheticForest::build(spec, seed).unwrap();
        let mut rng = seeded(1000 + seed);
        let sizes = [4usize, 8];
        let mut levels = Vec::new();
        let mut perms = Vec::new();
        for (k, &n) in sizes.iter().enumerate() {
            let mut level = random_level(&mut rng, k, spec.d, n, 0.1, 0.0);
            let mut slots: Vec<usize> = (0..n).collect();
            for i in (1..n).rev() {
                slots.swap(i, rng.random_range(0..=i));
            }
            let dirs = &truth.directions[k];
            for t in 0..dirs.rows() {
                // Some planted directions are copied faithfully, some badly.
                let noise = if rng.random_bool(0.7) { 0.05 } else { 1.5 };
                let row: Vec<f32> = dirs
                    .row(t)
                    .iter()
                    .map(|v| v + noise * (rng.random::<f32>() - 0.5))
                    .collect();
                level.decoder.row_mut(slots[t]).copy_from_slice(&row);
            }
            perms.push(slots);
            levels.push(level);
        }
        let parents = vec![random_parents(&mut rng, sizes[0], sizes[1], 0.2)];
        // Plant most true edges into the learned forest.
        let mut parents = parents;
        for (j, p) in truth.parents[0].iter().enumerate() {
            if let Some(p) = p {
                if rng.random_bool(0.7) {
                    parents[0][perms[1][j]] = Some(perms[0][*p]);
                }
            }
        }
        let h = hierarchy(&sizes, parents.clone());
        let got = ground_truth_recovery(&levels, &h, &truth).unwrap();

        let matches: Vec<Vec<Option<usize>>> = (0..2)
            .map(|k| greedy_match(&rows_f64(&truth.directions[k]), &rows_f64(&levels[k].decoder), 0.8))
            .collect();
        assert_eq!(got.matches, matches, "seed {seed}");
        let nodes = truth.level_sizes.iter().sum::<usize>() as f64;
        let recovered = matches.iter().flatten().filter(|m| m.is_some()).count() as f64;
        assert_eq!(got.feature_match_rate, recovered / nodes);

        let mut hit = 0;
        let mut truth_edges = 0;
        for (j, p) in truth.parents[0].iter().enumerate() {
            let Some(p) = *p else { continue };
            truth_edges += 1;
            if let (Some(fp), Some(fc)) = (matches[0][p], matches[1][j]) {
                hit += (parents[0][fc] == Some(fp)) as usize;
            }
        }
        assert_eq!(got.edge_recall, hit as f64 / truth_edges as f64);

        let (mut eligible, mut correct) = (0, 0);
        for (c, p) in parents[0].iter().enumerate() {
            let Some(p) = *p else { continue };
            let tp = matches[0].iter().position(|m| *m == Some(p));
            let tc = matches[1].iter().position(|m| *m == Some(c));
            if let (Some(tp), Some(tc)) = (tp, tc) {
                eligible += 1;
                correct += (truth.parents[0][tc] == Some(tp)) as usize;
            }
        }
        let want = if eligible == 0 { 0.0 } else { correct as f64 / eligible as f64 };
        assert_eq!(got.edge_precision, want, "seed {seed}");
    }
}

#[test]
fn exact_model_recovers_everything() {
    let spec = ForestSpec {
        d: 16,
        roots: 2,
        branching: 3,
        depth: 3,
        ..ForestSpec::default()
    };
    let truth = SyntheticForest::build(spec, 3).unwrap();
    let mut levels = Vec::new();
    for (k, dirs) in truth.directions.iter().enumerate() {
        let mut l = SaeLevel::new(k, spec.d, dirs.rows(), 0).unwrap();
        l.decoder = dirs.clone();
        levels.push(l);
    }
    let h = hierarchy(&truth.level_sizes, truth.parents.clone());
    let r = ground_truth_recovery(&levels, &h, &truth).unwrap();
    assert_eq!((r.feature_match_rate, r.edge_precision, r.edge_recall), (1.0, 1.0, 1.0));
    let empty = hierarchy(&truth.level_sizes, truth.level_sizes[1..].iter().map(|&n| vec![None; n]).collect());
    assert_eq!(ground_truth_recovery(&levels, &empty, &truth).unwrap().edge_recall, 0.0);
}
