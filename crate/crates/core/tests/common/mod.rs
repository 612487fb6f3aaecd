//! Shared generators and independent oracles for the integration tests.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use pba_core::linear_belief::{pseudo_inverse, BeliefSpec, VariableSet};
use pba_core::synthesis::{ClassOutputs, ClassStructure, ModelOutput, ModelOutputBatch};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub mod checks;
pub mod contract;
pub mod server;

pub fn rng(seed: u64) -> ChaCha8Rng {
    use rand::SeedableRng;
    ChaCha8Rng::seed_from_u64(seed)
}

/// `G Gᵀ` with `G` of shape `n x rank`, entries uniform in [-1, 1].
pub fn random_psd(rng: &mut impl Rng, n: usize, rank: usize) -> DMatrix<f64> {
    let g = DMatrix::from_fn(n, rank, |_, _| rng.gen_range(-1.0..1.0));
    let m = &g * g.transpose();
    (&m + m.transpose()) * 0.5
}

pub fn random_matrix(rng: &mut impl Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.gen_range(-3.0..3.0))
}

/// Random matrix of the given rank.
pub fn random_rank(rng: &mut impl Rng, r: usize, c: usize, rank: usize) -> DMatrix<f64> {
    random_matrix(rng, r, rank) * random_matrix(rng, rank, c)
}

pub fn vars(q: usize) -> VariableSet {
    let names: Vec<String> = (0..q).map(|i| format!("x{i}")).collect();
    VariableSet::uniform(&names, "", false).unwrap()
}

/// A coherent prior over `X` and a class structure whose joint `(X, mu)`
/// specification is a random PSD matrix. Roughly one draw in four has a
/// rank-deficient `Var(mu)`.
pub struct RandomSpec {
    pub prior: BeliefSpec,
    pub cs: ClassStructure,
}

pub fn random_spec(rng: &mut impl Rng, q: usize, m: usize, counts: Vec<usize>) -> RandomSpec {
    let n = q + m * q;
    let rank = if rng.gen_bool(0.25) { rng.gen_range(1..n) } else { n + 2 };
    let mut joint = random_psd(rng, n, rank);
    // keep Var(X) strictly positive on the diagonal so percentages are defined
    for i in 0..q {
        joint[(i, i)] += 0.5;
    }
    let var_x = joint.view((0, 0), (q, q)).into_owned();
    let cov_x_mu = joint.view((0, q), (q, m * q)).into_owned();
    let var_mu = joint.view((q, q), (m * q, m * q)).into_owned();
    let p_x = DVector::from_fn(q, |_, _| rng.gen_range(-10.0..10.0));
    let p_mu = DVector::from_fn(m * q, |_, _| rng.gen_range(-10.0..10.0));
    let var_resid = (0..m).map(|_| random_psd(rng, q, q + 1) * rng.gen_range(0.05..1.0)).collect();
    let prior = BeliefSpec::new(vars(q), p_x, var_x).unwrap();
    let labels = (0..m).map(|i| format!("c{i}")).collect();
    let cs = ClassStructure::new(vars(q), labels, counts, p_mu, var_mu, var_resid, cov_x_mu).unwrap();
    RandomSpec { prior, cs }
}

pub fn random_batch(rng: &mut impl Rng, cs: &ClassStructure) -> ModelOutputBatch {
    let q = cs.q();
    ModelOutputBatch {
        variables: cs.quantity().names().to_vec(),
        classes: cs
            .class_labels()
            .iter()
            .enumerate()
            .map(|(i, label)| ClassOutputs {
                label: label.clone(),
                models: (0..cs.counts()[i])
                    .map(|j| ModelOutput {
                        model_id: format!("{label}-m{j}"),
                        timestamp: None,
                        values: (0..q)
                            .map(|l| cs.prevision_mu()[i * q + l] + rng.gen_range(-5.0..5.0))
                            .collect(),
                    })
                    .collect(),
            })
            .collect(),
    }
}

/// Flattened outputs `Z` (class, then model, then variable) with `Var(Z)`
/// and `Cov(X, Z)` written out from the representation
/// `Z_ij = mu_i + R_ij`, independently of the library's sample-mean path.
pub struct FullOutputs {
    pub z: DVector<f64>,
    pub prevision_z: DVector<f64>,
    pub var_z: DMatrix<f64>,
    pub cov_x_z: DMatrix<f64>,
    pub cov_mu_z: DMatrix<f64>,
}

pub fn full_outputs(cs: &ClassStructure, batch: &ModelOutputBatch) -> FullOutputs {
    let q = cs.q();
    let mut owner = Vec::new();
    let mut z = Vec::new();
    for (i, class) in batch.classes.iter().enumerate() {
        assert_eq!(class.label, cs.class_labels()[i]);
        for (j, model) in class.models.iter().enumerate() {
            for (l, v) in model.values.iter().enumerate() {
                owner.push((i, j, l));
                z.push(*v);
            }
        }
    }
    let n = z.len();
    let var_mu = cs.var_mu();
    let var_z = DMatrix::from_fn(n, n, |a, b| {
        let (i, j, l) = owner[a];
        let (k, h, r) = owner[b];
        let mut v = var_mu[(i * q + l, k * q + r)];
        if i == k && j == h {
            v += cs.var_resid()[i][(l, r)];
        }
        v
    });
    let cov_x_z = DMatrix::from_fn(q, n, |x, b| {
        let (i, _, l) = owner[b];
        cs.cov_x_mu()[(x, i * q + l)]
    });
    let cov_mu_z = DMatrix::from_fn(cs.m() * q, n, |a, b| {
        let (i, _, l) = owner[b];
        var_mu[(a, i * q + l)]
    });
    let prevision_z = DVector::from_fn(n, |a, _| {
        let (i, _, l) = owner[a];
        cs.prevision_mu()[i * q + l]
    });
    FullOutputs {
        z: DVector::from_vec(z),
        prevision_z,
        var_z,
        cov_x_z,
        cov_mu_z,
    }
}

/// `P(B) + C V† (d - P(D))`.
pub fn adjust(p_b: &DVector<f64>, c: &DMatrix<f64>, v: &DMatrix<f64>, d: &DVector<f64>, p_d: &DVector<f64>) -> DVector<f64> {
    p_b + c * pseudo_inverse(v).unwrap() * (d - p_d)
}

/// Sample means that make the adjusted class means equal `adjusted`:
/// `Z̄ = P(mu) + Var(Z̄) Var(mu)⁻¹ (adjusted - P(mu))`.
pub fn invert_adjustment(cs: &ClassStructure, adjusted: &DVector<f64>) -> DVector<f64> {
    let p = cs.prevision_mu();
    let solve = cs.var_mu().clone().lu().solve(&(adjusted - p)).expect("Var(mu) invertible");
    p + cs.var_zbar() * solve
}

pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0_f64, |a, x| a.max(x.abs()))
}

/// `max|a - b| / max(max|a|, max|b|, floor)`.
pub fn rel_diff(a: &DMatrix<f64>, b: &DMatrix<f64>, floor: f64) -> f64 {
    max_abs(&(a - b)) / max_abs(a).max(max_abs(b)).max(floor)
}

pub fn rel_diff_v(a: &DVector<f64>, b: &DVector<f64>, floor: f64) -> f64 {
    let d = (a - b).amax();
    d / a.amax().max(b.amax()).max(floor)
}
