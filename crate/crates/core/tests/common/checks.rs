//! Randomized property checks shared by the acceptance run and the
//! proptest suites. Each returns the largest relative residual seen, or a
//! description of the violated property.

use nalgebra::{DMatrix, DVector};
use pba_core::elicitation::{consistent_answers, start_session, HypotheticalPolicy};
use pba_core::linear_belief::{pseudo_inverse, BeliefSpec};
use pba_core::synthesis::{convergence_limit, derive_weights, dominance_check, pba};
use rand::Rng;

use rand_chacha::ChaCha8Rng;

use super::{full_outputs, RandomSpec, max_abs, random_batch, random_psd, random_rank, random_spec, rel_diff, rel_diff_v, rng, vars};

pub const REL_TOL: f64 = 1e-8;

pub type Check = Result<f64, String>;

fn within(name: &str, rel: f64, tol: f64) -> Check {
    if rel <= tol {
        Ok(rel)
    } else {
        Err(format!("{name}: relative residual {rel:.3e} > {tol:.0e}"))
    }
}

/// Dimensions for a synthesis case: `q <= 5`, `m <= 3`, `n_i <= 5`.
pub fn draw_dims(rng: &mut impl Rng) -> (usize, usize, Vec<usize>) {
    let q = rng.gen_range(1..=5);
    let m = rng.gen_range(1..=3);
    let counts = (0..m).map(|_| rng.gen_range(1..=5)).collect();
    (q, m, counts)
}

/// Moore-Penrose conditions on a random, usually rank-deficient, matrix.
pub fn moore_penrose(seed: u64) -> Check {
    let mut r = rng(seed);
    let rows = r.gen_range(1..=8);
    let cols = r.gen_range(1..=8);
    let rank = r.gen_range(1..=rows.min(cols));
    let a = random_rank(&mut r, rows, cols, rank);
    let p = pseudo_inverse(&a).map_err(|e| e.to_string())?;
    let ap = &a * &p;
    let pa = &p * &a;
    let mut worst = 0.0_f64;
    worst = worst.max(within("A A+ A = A", rel_diff(&(&ap * &a), &a, 1e-300), REL_TOL)?);
    worst = worst.max(within("A+ A A+ = A+", rel_diff(&(&pa * &p), &p, 1e-300), REL_TOL)?);
    worst = worst.max(within("(A A+)ᵀ = A A+", rel_diff(&ap.transpose(), &ap, 1.0), REL_TOL)?);
    worst = worst.max(within("(A+ A)ᵀ = A+ A", rel_diff(&pa.transpose(), &pa, 1.0), REL_TOL)?);
    Ok(worst)
}

/// Two-stage assessment against the one-stage adjustment by every output,
/// sample-mean sufficiency, orthogonality of the adjusted residual,
/// dominance, and monotone convergence.
pub fn synthesis(seed: u64) -> Check {
    let mut r = rng(seed);
    let (q, m, counts) = draw_dims(&mut r);
    synthesis_with(seed, q, m, counts)
}

pub fn synthesis_with(seed: u64, q: usize, m: usize, counts: Vec<usize>) -> Check {
    let worst = synthesis_identities(seed, q, m, counts.clone())?;
    let (spec, mut r) = convergence_setup(seed, q, m, counts);
    let limit = convergence_limit(&spec.prior, &spec.cs).map_err(|e| e.to_string())?;
    let w = DVector::from_fn(m * q, |_, _| r.gen_range(-1.0..1.0));
    let mu_star = spec.cs.prevision_mu() + spec.cs.var_mu() * w;
    let diag = limit.diagnostic(&mu_star).map_err(|e| e.to_string())?;
    if !diag.is_monotone() {
        return Err(format!("convergence not monotone: {:?}", diag.distances));
    }
    Ok(worst)
}

fn convergence_setup(seed: u64, q: usize, m: usize, counts: Vec<usize>) -> (RandomSpec, ChaCha8Rng) {
    let mut r = rng(seed ^ 0x9e37_79b9_7f4a_7c15);
    let spec = random_spec(&mut r, q, m, counts);
    let _ = random_batch(&mut r, &spec.cs);
    (spec, r)
}

/// Two-stage against one-stage, sufficiency, orthogonality and dominance.
pub fn synthesis_identities(seed: u64, q: usize, m: usize, counts: Vec<usize>) -> Check {
    let mut r = rng(seed ^ 0x9e37_79b9_7f4a_7c15);
    let spec = random_spec(&mut r, q, m, counts);
    let (prior, cs) = (&spec.prior, &spec.cs);
    let batch = random_batch(&mut r, cs);
    let report = pba(prior, cs, &batch).map_err(|e| format!("pba: {e}"))?;
    let full = full_outputs(cs, &batch);
    let pinv = pseudo_inverse(&full.var_z).map_err(|e| e.to_string())?;
    let c = &full.cov_x_z;
    let var_x = prior.covariance();
    let scale_x = max_abs(var_x).sqrt();
    let mut worst = 0.0_f64;

    // one stage
    let one = prior.prevision() + c * &pinv * (&full.z - &full.prevision_z);
    let floor = prior.prevision().amax().max(full.z.amax()).max(scale_x);
    worst = worst.max(within("two-stage = one-stage expectation", rel_diff_v(&report.pba, &one, floor), REL_TOL)?);
    let one_var = var_x - c * &pinv * c.transpose();
    worst = worst.max(within(
        "two-stage = one-stage variance",
        max_abs(&(&report.adjusted_var - &one_var)) / max_abs(var_x),
        REL_TOL,
    )?);

    // sufficiency of the sample means
    let by_all = cs.prevision_mu() + &full.cov_mu_z * &pinv * (&full.z - &full.prevision_z);
    let floor = cs.prevision_mu().amax().max(full.z.amax()).max(max_abs(cs.var_mu()).sqrt());
    worst = worst.max(within(
        "sample-mean sufficiency",
        rel_diff_v(&report.adjusted_class_means, &by_all, floor),
        REL_TOL,
    )?);

    // Cov(X - P_Z(X), Z) = 0
    let resid = c - c * &pinv * &full.var_z;
    worst = worst.max(within("orthogonality", max_abs(&resid) / max_abs(c).max(max_abs(var_x)), REL_TOL)?);

    // dominance, recomputed from the full output specification
    let table = dominance_check(prior, cs, &batch).map_err(|e| e.to_string())?;
    if !table.holds() {
        return Err("dominance: library reports a dominating model".into());
    }
    let mut offset = 0;
    for (i, class) in batch.classes.iter().enumerate() {
        for _ in &class.models {
            for l in 0..q {
                let a = offset + l;
                let bias = prior.prevision()[l] - full.prevision_z[a];
                let dist = var_x[(l, l)] + full.var_z[(a, a)] - 2.0 * c[(l, a)] + bias * bias;
                let slack = REL_TOL * var_x[(l, l)].max(dist);
                if report.adjusted_var[(l, l)] > dist + slack {
                    return Err(format!(
                        "dominance: class {i} variable {l}: assessment {:.6e} > model {:.6e}",
                        report.adjusted_var[(l, l)],
                        dist
                    ));
                }
            }
            offset += q;
        }
    }

    Ok(worst)
}

/// The convergence diagnostic against an independent computation of the
/// class-mean error `e(s) = s Rb (Var(mu) + s Rb)⁻¹ (mu* - P(mu))`, where
/// `Rb` is the block-diagonal residual variance of the sample means. Checks
/// that each diagnostic assessment equals `A (mu* - e(s)) + P(U)` and that
/// `|Rb^(-1/2) e(s)|` shrinks with `s`, which holds for every coherent
/// specification. The Euclidean distance in the assessment space need not.
pub fn convergence_whitened(seed: u64, q: usize, m: usize, counts: Vec<usize>) -> Check {
    let (spec, mut r) = convergence_setup(seed, q, m, counts);
    let cs = &spec.cs;
    let limit = convergence_limit(&spec.prior, cs).map_err(|e| e.to_string())?;
    let w = DVector::from_fn(m * q, |_, _| r.gen_range(-1.0..1.0));
    let mu_star = cs.prevision_mu() + cs.var_mu() * w;
    let diag = limit.diagnostic(&mu_star).map_err(|e| e.to_string())?;
    let weights = limit.weights();
    let rb = cs.var_zbar() - cs.var_mu();
    let rb_eig = rb.clone().symmetric_eigen();
    let whiten = &rb_eig.eigenvectors
        * DMatrix::from_diagonal(&rb_eig.eigenvalues.map(|x| 1.0 / x.max(1e-300).sqrt()))
        * rb_eig.eigenvectors.transpose();
    let floor = mu_star.amax().max(weights.prevision_u.amax()).max(1.0);
    let mut worst = 0.0_f64;
    let mut previous = f64::INFINITY;
    for (k, &scale) in diag.scales.iter().enumerate() {
        let srb = &rb * scale;
        let var_zbar = cs.var_mu() + &srb;
        let e = &srb * pseudo_inverse(&var_zbar).map_err(|e| e.to_string())? * (&mu_star - cs.prevision_mu());
        let expected = weights.apply(&(&mu_star - &e));
        worst = worst.max(within(
            "diagnostic assessment",
            rel_diff_v(&diag.assessments[k], &expected, floor),
            1e-6,
        )?);
        let whitened = (&whiten * &e).norm();
        if whitened > previous * (1.0 + 1e-9) + 1e-12 {
            return Err(format!("whitened class-mean error rose at scale {scale:e}: {previous:e} -> {whitened:e}"));
        }
        previous = whitened;
    }
    Ok(worst)
}

/// Weight derivation, RU <= MRU, the variance decomposition and idempotence
/// of adjustment.
pub fn synthesis_accounting(seed: u64) -> Check {
    let mut r = rng(seed);
    let (q, m, counts) = draw_dims(&mut r);
    let spec = random_spec(&mut r, q, m, counts);
    let (prior, cs) = (&spec.prior, &spec.cs);
    let batch = random_batch(&mut r, cs);
    let w = derive_weights(prior, cs).map_err(|e| e.to_string())?;
    let a = cs.cov_x_mu() * pseudo_inverse(cs.var_mu()).map_err(|e| e.to_string())?;
    let p_u = prior.prevision() - &a * cs.prevision_mu();
    let var_u = prior.covariance() - &a * cs.var_mu() * a.transpose();
    let scale = max_abs(prior.covariance());
    let mut worst = 0.0_f64;
    worst = worst.max(within("A", rel_diff(&w.a, &a, 1.0), REL_TOL)?);
    worst = worst.max(within("P(U)", rel_diff_v(&w.prevision_u, &p_u, 1.0), REL_TOL)?);
    worst = worst.max(within("Var(U)", max_abs(&(&w.var_u - &var_u)) / scale, REL_TOL)?);

    let report = pba(prior, cs, &batch).map_err(|e| e.to_string())?;
    for l in 0..q {
        if report.resolved_pct[l] > report.max_resolvable_pct[l] + 1e-6 {
            return Err(format!(
                "RU {} > MRU {} for variable {l}",
                report.resolved_pct[l], report.max_resolvable_pct[l]
            ));
        }
        if report.resolved_pct[l] < -1e-6 {
            return Err(format!("RU {} < 0 for variable {l}", report.resolved_pct[l]));
        }
    }

    // Var(X) = Var_Z(X) + Var(P_Z(X)), and the adjusted variance is PSD
    let full = full_outputs(cs, &batch);
    let k = &full.cov_x_z * pseudo_inverse(&full.var_z).map_err(|e| e.to_string())?;
    let resolved = &k * &full.var_z * k.transpose();
    worst = worst.max(within(
        "variance decomposition",
        max_abs(&(prior.covariance() - &report.adjusted_var - resolved)) / scale,
        REL_TOL,
    )?);
    let eig = report.adjusted_var.clone().symmetric_eigenvalues().min();
    if eig < -REL_TOL * scale {
        return Err(format!("adjusted variance indefinite: {eig:e}"));
    }

    // adjusting P_Z(X) by the same data returns it unchanged
    let pinv = pseudo_inverse(&full.var_z).map_err(|e| e.to_string())?;
    let again = prior.prevision() + &k * &full.var_z * &pinv * (&full.z - &full.prevision_z);
    let floor = report.pba.amax().max(full.z.amax()).max(scale.sqrt());
    worst = worst.max(within("idempotence", rel_diff_v(&again, &report.pba, floor), REL_TOL)?);
    Ok(worst)
}

/// A covariance matrix regenerated by a session answered consistently.
pub fn kadane_round_trip(seed: u64) -> Check {
    let mut r = rng(seed);
    let q = r.gen_range(1..=6);
    kadane_round_trip_with(seed, q)
}

pub fn kadane_round_trip_with(seed: u64, q: usize) -> Check {
    let mut r = rng(seed ^ 0x5851_f42d_4c95_7f2d);
    let base = random_psd(&mut r, q, q + 2) + DMatrix::identity(q, q) * 0.05;
    let sd = DVector::from_fn(q, |_, _| 10f64.powf(r.gen_range(-1.0..2.0)));
    let cov = DMatrix::from_fn(q, q, |i, j| base[(i, j)] * sd[i] * sd[j]);
    let previsions: Vec<f64> = (0..q).map(|i| r.gen_range(-5.0..5.0) * sd[i]).collect();
    let mut s = start_session(vars(q), previsions[0], cov[(0, 0)], HypotheticalPolicy::default())
        .map_err(|e| e.to_string())?;
    for k in 1..q {
        let answers = consistent_answers(&cov, &previsions, s.hypotheticals(), k);
        s.submit_answers(answers).map_err(|e| format!("step {k}: {e}"))?;
    }
    let mut worst = within("elicited covariance", rel_diff(s.covariance(), &cov, 1e-300), REL_TOL)?;
    let diag: Vec<f64> = cov.diagonal().iter().copied().collect();
    let spec: BeliefSpec = s.finalize(&diag).map_err(|e| e.to_string())?;
    worst = worst.max(within("rescaled covariance", rel_diff(spec.covariance(), &cov, 1e-300), REL_TOL)?);
    let p = DVector::from_vec(previsions);
    worst = worst.max(within("previsions", rel_diff_v(spec.prevision(), &p, 1e-300), REL_TOL)?);
    Ok(worst)
}
