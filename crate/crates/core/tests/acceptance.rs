//! Acceptance gate: every release-blocking property in one serial run.
//!
//! Each check prints one [PASS]/[FAIL] line (visible with --nocapture) and
//! the test fails if any check fails. Checks run serially so the wall-time
//! bounds and the scaling measurement are not polluted by sibling tests.

mod common;

use std::time::{Duration, Instant};

use osd_core::budget::{self, BudgetSpec};
use osd_core::linalg::{reconstruct, truncated_svd, FactorPair};
use osd_core::matio::DenseMatrix;
use osd_core::osd::{
    compress_mag, compress_osd, sensitivity, weighted_l1_error, ImportanceMap,
};
use osd_core::sparsify::{top_s, LayerRecord, SparseFactorPair};
use osd_core::synth::{generate, SynthConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

type Check = (&'static str, fn() -> Result<String, String>);

#[test]
fn acceptance() {
    let checks: [Check; 9] = [
        ("budget-compliance", budget_compliance),
        ("sensitivity-oracle", sensitivity_oracle),
        ("sparsity-levels", sparsity_levels_exhaustive),
        ("svd-quality", svd_quality),
        ("method-ordering", method_ordering),
        ("sparse-only-baseline", sparse_only_baseline),
        ("serialization-round-trip", serialization_round_trip),
        ("scale-invariance", scale_invariance),
        ("sensitivity-scaling", sensitivity_scaling),
    ];
    let mut failures = Vec::new();
    for (name, check) in checks {
        match std::panic::catch_unwind(check) {
            Ok(Ok(msg)) => println!("[PASS] {name}: {msg}"),
            Ok(Err(msg)) => {
                println!("[FAIL] {name}: {msg}");
                failures.push(name);
            }
            Err(_) => {
                println!("[FAIL] {name}: panicked");
                failures.push(name);
            }
        }
    }
    assert!(failures.is_empty(), "failed checks: {failures:?}");
}

fn require_under(elapsed: Duration, bound: Duration, what: &str) -> Result<(), String> {
    if elapsed <= bound {
        Ok(())
    } else {
        Err(format!(
            "{what} took {elapsed:.1?}, bound is {bound:.1?}"
        ))
    }
}

/// 1,000 random layer configurations, payload bits never above the dense
/// rank-r cost, zero tolerance, under two minutes.
fn budget_compliance() -> Result<String, String> {
    let started = Instant::now();
    // Corner shapes pinned; the remainder sampled log-uniform so the set
    // leans small while still covering the full size range.
    let mut configs: Vec<(usize, usize, usize, usize, u64)> = vec![
        (2048, 2048, 4, 8, 1_000_001),
        (2048, 2048, 1, 0, 1_000_002),
        (2048, 1, 1, 0, 1_000_003),
        (1, 2048, 1, 0, 1_000_004),
        (1, 1, 1, 0, 1_000_005),
        (2048, 3, 2, 1, 1_000_006),
        (3, 2048, 1, 2, 1_000_007),
        (1024, 1024, 1, 2, 1_000_008),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(0xACC0_0001);
    let dim = |rng: &mut ChaCha8Rng| -> usize {
        let u: f64 = rng.gen_range(0.0..=11.0);
        (2f64.powf(u).round() as usize).clamp(1, 2048)
    };
    while configs.len() < 1000 {
        let n = dim(&mut rng);
        let d = dim(&mut rng);
        let minor = n.min(d);
        let r = rng.gen_range(1..=4usize).min(minor);
        let c = rng.gen_range(0..=8usize).min(minor - r);
        let seed = configs.len() as u64;
        configs.push((n, d, r, c, seed));
    }
    let utilizations = configs
        .par_iter()
        .map(|&(n, d, r, c, seed)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let delta = common::gaussian_matrix(&mut rng, n, d, 0.5);
            let z = ImportanceMap::new(common::random_importance(&mut rng, n, d))
                .map_err(|e| e.to_string())?;
            let pair = compress_osd(&delta, &z, r, c)
                .map_err(|e| format!("{n}x{d} r={r} c={c}: {e}"))?;
            let spec = BudgetSpec::new(n as u64, d as u64, r as u64, c as u64)
                .map_err(|e| e.to_string())?;
            let bits = pair.payload_bits();
            if bits > spec.budget_bits() || !budget::assert_within_budget(&pair, &spec) {
                return Err(format!(
                    "{n}x{d} r={r} c={c}: payload {bits} bits over budget {}",
                    spec.budget_bits()
                ));
            }
            Ok(bits as f64 / spec.budget_bits() as f64)
        })
        .collect::<Result<Vec<_>, String>>()?;
    let peak = utilizations.iter().cloned().fold(0.0f64, f64::max);
    let elapsed = started.elapsed();
    require_under(elapsed, Duration::from_secs(120), "budget sweep")?;
    Ok(format!(
        "1000 configurations within budget, peak utilization {:.2}%, {elapsed:.1?}",
        peak * 100.0
    ))
}

/// Fast matrix-product sensitivities match the direct triple loop to 1e-5
/// relative, elementwise, on 200 random instances in under a minute.
fn sensitivity_oracle() -> Result<String, String> {
    let started = Instant::now();
    (0..200u64)
        .into_par_iter()
        .try_for_each(|seed| -> Result<(), String> {
            let mut rng = ChaCha8Rng::seed_from_u64(0xACC0_0002 ^ seed);
            let n = rng.gen_range(1..=32);
            let d = rng.gen_range(1..=32);
            let k = rng.gen_range(1..=6);
            let u = common::gaussian_matrix(&mut rng, n, k, 1.0);
            let v = common::gaussian_matrix(&mut rng, k, d, 1.0);
            let zm = common::random_importance(&mut rng, n, d);
            let (qu_oracle, qv_oracle) = common::naive_sensitivity(&u, &v, &zm);
            let f = FactorPair {
                u_prime: u,
                v_prime: v,
                rank: k,
                singular_values: vec![1.0; k],
            };
            let z = ImportanceMap::new(zm).map_err(|e| e.to_string())?;
            let q = sensitivity(&f, &z).map_err(|e| e.to_string())?;
            let check = |got: f32, expect: f64, side: &str, i: usize| -> Result<(), String> {
                let got = got as f64;
                let ok = if expect == 0.0 {
                    got == 0.0
                } else {
                    (got - expect).abs() <= 1e-5 * expect.abs()
                };
                if ok {
                    Ok(())
                } else {
                    Err(format!(
                        "seed {seed} {side}[{i}]: {got} vs oracle {expect}"
                    ))
                }
            };
            for (i, &got) in q.q_u().values().iter().enumerate() {
                check(got, qu_oracle[i], "q_u", i)?;
            }
            for (i, &got) in q.q_v().values().iter().enumerate() {
                check(got, qv_oracle[i], "q_v", i)?;
            }
            Ok(())
        })?;
    let elapsed = started.elapsed();
    require_under(elapsed, Duration::from_secs(60), "sensitivity comparison")?;
    Ok(format!(
        "200 instances match the triple-loop oracle elementwise to 1e-5, {elapsed:.1?}"
    ))
}

/// Equal-budget sparsity levels equal the exact integer evaluation on the
/// whole n,d in 1..=256, r in 1..=4, c in 0..=8 grid.
fn sparsity_levels_exhaustive() -> Result<String, String> {
    let started = Instant::now();
    (1..=256u64)
        .into_par_iter()
        .try_for_each(|n| -> Result<(), String> {
            for d in 1..=256u64 {
                for r in 1..=4u64 {
                    for c in 0..=8u64 {
                        let spec =
                            BudgetSpec::new(n, d, r, c).map_err(|e| e.to_string())?;
                        let got = budget::sparsity_levels(&spec);
                        let want = common::sparsity_levels_oracle(n, d, r, c);
                        if got != want {
                            return Err(format!(
                                "n={n} d={d} r={r} c={c}: {got:?} vs oracle {want:?}"
                            ));
                        }
                    }
                }
            }
            Ok(())
        })?;
    let spec = BudgetSpec::new(1024, 1024, 1, 2).map_err(|e| e.to_string())?;
    if budget::sparsity_levels(&spec) != (744, 744) {
        return Err(format!(
            "1024x1024 r=1 c=2 gave {:?}, expected (744, 744)",
            budget::sparsity_levels(&spec)
        ));
    }
    Ok(format!(
        "exhaustive 256*256*4*9 grid matches the integer oracle, {:.1?}",
        started.elapsed()
    ))
}

/// Top-k singular values within 1e-5 relative of the Jacobi oracle on 100
/// random matrices, and reconstruction error non-increasing in k.
fn svd_quality() -> Result<String, String> {
    let started = Instant::now();
    (0..100u64)
        .into_par_iter()
        .try_for_each(|seed| -> Result<(), String> {
            let mut rng = ChaCha8Rng::seed_from_u64(0xACC0_0004 ^ seed);
            let n = rng.gen_range(2..=256);
            let d = rng.gen_range(2..=192);
            let minor = n.min(d);
            let k = rng.gen_range(1..=minor.min(12));
            let m = common::gaussian_matrix(&mut rng, n, d, 1.0);
            let f = truncated_svd(&m, k).map_err(|e| e.to_string())?;
            let oracle = common::oracle_singular_values(&m, k);
            for (i, &want) in oracle.iter().enumerate() {
                let got = f.singular_values[i];
                if (got - want).abs() > 1e-5 * want.max(1e-12) {
                    return Err(format!(
                        "seed {seed} {n}x{d} k={k}: sigma[{i}] {got} vs oracle {want}"
                    ));
                }
            }
            let k2 = (k + 2).min(minor);
            let err_k = common::frob_diff(
                &m,
                &reconstruct(&f).map_err(|e| e.to_string())?,
            );
            let f2 = truncated_svd(&m, k2).map_err(|e| e.to_string())?;
            let err_k2 = common::frob_diff(
                &m,
                &reconstruct(&f2).map_err(|e| e.to_string())?,
            );
            if err_k2 > err_k + 1e-7 * common::frob(&m) {
                return Err(format!(
                    "seed {seed}: error grew from k={k} ({err_k}) to k={k2} ({err_k2})"
                ));
            }
            Ok(())
        })?;
    Ok(format!(
        "100 matrices match the Jacobi oracle to 1e-5 and errors shrink with k, {:.1?}",
        started.elapsed()
    ))
}

/// On the planted low-rank + sparse suite, magnitude sparsification at its
/// best c beats strict truncation on Frobenius error in >= 80% of seeds,
/// and importance-aware joint selection beats magnitude on the weighted-L1
/// proxy in >= 70% of seeds; all inside five minutes.
fn method_ordering() -> Result<String, String> {
    let started = Instant::now();
    let outcomes = (0..50u64)
        .into_par_iter()
        .map(|seed| -> Result<(bool, bool, bool), String> {
            let out = generate(&SynthConfig { seed, ..SynthConfig::default() })
                .map_err(|e| e.to_string())?;
            let delta = &out.delta.layers()[0].matrix;
            let z = &out.importance[0];
            let mut mag_wins = [false; 2];
            for (slot, r) in [(0usize, 1usize), (1, 2)] {
                let f = truncated_svd(delta, r).map_err(|e| e.to_string())?;
                let trunc_err =
                    common::frob_diff(delta, &reconstruct(&f).map_err(|e| e.to_string())?);
                let mut best = f64::INFINITY;
                for c in 1..=5 {
                    let pair = compress_mag(delta, r, c).map_err(|e| e.to_string())?;
                    best = best.min(common::frob_diff(delta, &pair.reconstruct()));
                }
                mag_wins[slot] = best < trunc_err;
            }
            let mut osd_best = f64::INFINITY;
            let mut mag_best = f64::INFINITY;
            for c in 1..=5 {
                let osd_pair = compress_osd(delta, z, 1, c).map_err(|e| e.to_string())?;
                let mag_pair = compress_mag(delta, 1, c).map_err(|e| e.to_string())?;
                osd_best = osd_best.min(
                    weighted_l1_error(delta, z, &osd_pair.reconstruct())
                        .map_err(|e| e.to_string())?,
                );
                mag_best = mag_best.min(
                    weighted_l1_error(delta, z, &mag_pair.reconstruct())
                        .map_err(|e| e.to_string())?,
                );
            }
            Ok((mag_wins[0], mag_wins[1], osd_best < mag_best))
        })
        .collect::<Result<Vec<_>, String>>()?;
    let mag_r1 = outcomes.iter().filter(|o| o.0).count();
    let mag_r2 = outcomes.iter().filter(|o| o.1).count();
    let osd = outcomes.iter().filter(|o| o.2).count();
    let elapsed = started.elapsed();
    require_under(elapsed, Duration::from_secs(300), "method ordering suite")?;
    if mag_r1 < 40 || mag_r2 < 40 {
        return Err(format!(
            "magnitude beat truncation on only {mag_r1}/50 (r=1) and {mag_r2}/50 (r=2) seeds, need >= 40"
        ));
    }
    if osd < 35 {
        return Err(format!(
            "importance-aware beat magnitude on only {osd}/50 seeds, need >= 35"
        ));
    }
    Ok(format!(
        "mag<trunc on {mag_r1}/50 (r=1) and {mag_r2}/50 (r=2); osd<mag on {osd}/50, {elapsed:.1?}"
    ))
}

/// Pure top-s sparsification of the raw delta is no better than strict
/// rank-1 truncation on >= 90% of the same planted suite.
fn sparse_only_baseline() -> Result<String, String> {
    let started = Instant::now();
    let wins = (0..50u64)
        .into_par_iter()
        .map(|seed| -> Result<bool, String> {
            let out = generate(&SynthConfig { seed, ..SynthConfig::default() })
                .map_err(|e| e.to_string())?;
            let delta = &out.delta.layers()[0].matrix;
            let f = truncated_svd(delta, 1).map_err(|e| e.to_string())?;
            let trunc_err =
                common::frob_diff(delta, &reconstruct(&f).map_err(|e| e.to_string())?);
            let (n, d) = delta.shape();
            let s = budget::sparse_only_level(n as u64, d as u64, 1);
            let sparse_err = common::frob_diff(delta, &top_s(delta, s).densify());
            Ok(sparse_err >= trunc_err)
        })
        .collect::<Result<Vec<_>, String>>()?
        .into_iter()
        .filter(|&w| w)
        .count();
    if wins < 45 {
        return Err(format!(
            "truncation was at least as good on only {wins}/50 seeds, need >= 45"
        ));
    }
    Ok(format!(
        "truncation at least as good as raw top-s on {wins}/50 seeds, {:.1?}",
        started.elapsed()
    ))
}

/// 10,000 random factor pairs survive an encode/decode round trip
/// byte-exactly and every stream length matches the bit accounting.
fn serialization_round_trip() -> Result<String, String> {
    let started = Instant::now();
    (0..10_000u64)
        .into_par_iter()
        .try_for_each(|seed| -> Result<(), String> {
            let mut rng = ChaCha8Rng::seed_from_u64(0xACC0_0007 ^ seed);
            let n = rng.gen_range(1..=32usize);
            let k = rng.gen_range(1..=6usize);
            let d = rng.gen_range(1..=32usize);
            let mut pick = |cells: usize| -> Vec<(u64, f32)> {
                let mut out = Vec::new();
                for flat in 0..cells {
                    if !rng.gen_bool(0.3) {
                        continue;
                    }
                    let mut v = 0.0f32;
                    while v == 0.0 {
                        v = rng.gen_range(-4.0f32..4.0);
                    }
                    out.push((flat as u64, v));
                }
                out
            };
            let entries_u = pick(n * k);
            let entries_v = pick(k * d);
            let pair = SparseFactorPair::new((n, k), (k, d), entries_u, entries_v)
                .map_err(|e| e.to_string())?;
            let r = rng.gen_range(1..=k) as u32;
            let c = k as u32 - r;
            let record = LayerRecord::new(pair, r, c).map_err(|e| e.to_string())?;
            let bytes = record.encode();
            let decoded = LayerRecord::decode(&bytes).map_err(|e| e.to_string())?;
            if decoded.encode() != bytes
                || decoded.pair != record.pair
                || decoded.r != r
                || decoded.c != c
            {
                return Err(format!("seed {seed}: round trip not byte-exact"));
            }
            let su = record.pair.entries_u().len() as u64;
            let sv = record.pair.entries_v().len() as u64;
            let wu = record.pair.idx_bits_u() as u64;
            let wv = record.pair.idx_bits_v() as u64;
            let expect_payload = budget::sparse_cost(su, n as u64, k as u64)
                + budget::sparse_cost(sv, k as u64, d as u64);
            let stats = record.stats();
            if stats.payload_bits != expect_payload {
                return Err(format!(
                    "seed {seed}: payload {} bits, accounting says {expect_payload}",
                    stats.payload_bits
                ));
            }
            let stream_bytes = |s: u64, w: u64| (s * w).div_ceil(8);
            let expect_len = 42 + stream_bytes(su, wu) + stream_bytes(sv, wv) + 4 * (su + sv);
            if bytes.len() as u64 != expect_len {
                return Err(format!(
                    "seed {seed}: {} bytes, layout says {expect_len}",
                    bytes.len()
                ));
            }
            Ok(())
        })?;
    Ok(format!(
        "10000 byte-exact round trips with exact stream lengths, {:.1?}",
        started.elapsed()
    ))
}

/// Scaling the delta by 0.5, 2, or 10 never changes the retained index set.
fn scale_invariance() -> Result<String, String> {
    let started = Instant::now();
    (0..100u64)
        .into_par_iter()
        .try_for_each(|seed| -> Result<(), String> {
            let mut rng = ChaCha8Rng::seed_from_u64(0xACC0_0008 ^ seed);
            let n = rng.gen_range(4..=48);
            let d = rng.gen_range(4..=48);
            let minor = n.min(d);
            let r = rng.gen_range(1..=2usize).min(minor);
            let c = rng.gen_range(0..=3usize).min(minor - r);
            let delta = common::gaussian_matrix(&mut rng, n, d, 1.0);
            let z = ImportanceMap::new(common::random_importance(&mut rng, n, d))
                .map_err(|e| e.to_string())?;
            let index_set = |pair: &SparseFactorPair| {
                (
                    pair.entries_u().iter().map(|e| e.0).collect::<Vec<_>>(),
                    pair.entries_v().iter().map(|e| e.0).collect::<Vec<_>>(),
                )
            };
            let base = index_set(&compress_osd(&delta, &z, r, c).map_err(|e| e.to_string())?);
            for alpha in [0.5f32, 2.0, 10.0] {
                let scaled = DenseMatrix::new(
                    n,
                    d,
                    delta.values().iter().map(|&v| v * alpha).collect(),
                )
                .map_err(|e| e.to_string())?;
                let got =
                    index_set(&compress_osd(&scaled, &z, r, c).map_err(|e| e.to_string())?);
                if got != base {
                    return Err(format!(
                        "seed {seed} {n}x{d} r={r} c={c}: index set changed at alpha={alpha}"
                    ));
                }
            }
            Ok(())
        })?;
    Ok(format!(
        "100 instances keep identical index sets under 0.5x, 2x, 10x scaling, {:.1?}",
        started.elapsed()
    ))
}

/// Doubling n at fixed d and k roughly doubles sensitivity wall time,
/// consistent with cost linear in n*d*k.
fn sensitivity_scaling() -> Result<String, String> {
    let d = 1024;
    let k = 16;
    let mut rng = ChaCha8Rng::seed_from_u64(0xACC0_0009);
    let mut instance = |n: usize| -> Result<(FactorPair, ImportanceMap), String> {
        let f = FactorPair {
            u_prime: common::gaussian_matrix(&mut rng, n, k, 1.0),
            v_prime: common::gaussian_matrix(&mut rng, k, d, 1.0),
            rank: k,
            singular_values: vec![1.0; k],
        };
        let z = ImportanceMap::new(common::random_importance(&mut rng, n, d))
            .map_err(|e| e.to_string())?;
        Ok((f, z))
    };
    let median_time = |f: &FactorPair, z: &ImportanceMap| -> Result<Duration, String> {
        sensitivity(f, z).map_err(|e| e.to_string())?;
        let mut times: Vec<Duration> = (0..5)
            .map(|_| -> Result<Duration, String> {
                let t = Instant::now();
                std::hint::black_box(sensitivity(f, z).map_err(|e| e.to_string())?);
                Ok(t.elapsed())
            })
            .collect::<Result<_, _>>()?;
        times.sort();
        Ok(times[2])
    };
    let (f1, z1) = instance(1024)?;
    let (f2, z2) = instance(2048)?;
    let t1 = median_time(&f1, &z1)?;
    let t2 = median_time(&f2, &z2)?;
    let ratio = t2.as_secs_f64() / t1.as_secs_f64();
    if !(1.6..=2.6).contains(&ratio) {
        return Err(format!(
            "doubling n scaled wall time by {ratio:.2} ({t1:.1?} -> {t2:.1?}), expected within [1.6, 2.6]"
        ));
    }
    Ok(format!(
        "doubling n scaled wall time by {ratio:.2} ({t1:.1?} -> {t2:.1?})"
    ))
}
