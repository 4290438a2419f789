//! Proper random subset samplings and ESO parameter machinery.
//!
//! A sampling is a finite distribution over subsets of {0..n-1}; properness
//! (every block hit with positive probability) is enforced at construction.
//! ESO parameters come in closed form for full and serial samplings; for
//! anything else the caller supplies them and `validate_eso` checks the
//! inequality by exact enumeration over atoms, so there are no Monte-Carlo
//! false alarms.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::blockspace::BlockVector;
use crate::error::{Error, Result};
use crate::operators::{block_op_norm, op_norm, BlockOperator};

/// RNG stream ids: one per concern so experiments stay bit-reproducible when
/// any single consumer changes its draw count.
pub const STREAM_DATA: u64 = 0;
pub const STREAM_SOLVER: u64 = 1;
pub const STREAM_NORM: u64 = 2;
pub const STREAM_PROBE: u64 = 3;

/// Seeded generator on a dedicated stream.
pub fn seeded_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SamplingKind {
    Full,
    Serial,
    Arbitrary,
}

/// A proper random subset sampling over `{0..n-1}` with finitely many atoms.
#[derive(Clone, Debug)]
pub struct Sampling {
    n: usize,
    atoms: Vec<(Vec<usize>, f64)>,
    p: Vec<f64>,
    kind: SamplingKind,
    cdf: Vec<f64>,
}

impl Sampling {
    fn build(n: usize, atoms: Vec<(Vec<usize>, f64)>) -> Result<Self> {
        if n == 0 {
            return Err(Error::Sampling("sampling over zero blocks".into()));
        }
        if atoms.is_empty() {
            return Err(Error::Sampling("sampling needs at least one atom".into()));
        }
        let mut p = vec![0.0; n];
        let mut total = 0.0;
        for (subset, prob) in &atoms {
            if !(*prob > 0.0) || !prob.is_finite() {
                return Err(Error::Sampling(format!(
                    "atom probability {prob} must be positive"
                )));
            }
            if subset.is_empty() {
                return Err(Error::Sampling("empty subset atom".into()));
            }
            let mut seen = subset.clone();
            seen.sort_unstable();
            seen.dedup();
            if seen.len() != subset.len() {
                return Err(Error::Sampling("duplicate index inside an atom".into()));
            }
            for &i in subset {
                if i >= n {
                    return Err(Error::Sampling(format!("block index {i} out of range")));
                }
                p[i] += prob;
            }
            total += prob;
        }
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Sampling(format!(
                "atom probabilities sum to {total}, expected 1"
            )));
        }
        if let Some(i) = p.iter().position(|&pi| pi == 0.0) {
            return Err(Error::Sampling(format!(
                "sampling is not proper: block {i} has probability 0"
            )));
        }
        // rounding can push a marginal slightly above 1
        for pi in p.iter_mut() {
            *pi = pi.min(1.0);
        }
        let kind = classify(n, &atoms);
        let mut cdf = Vec::with_capacity(atoms.len());
        let mut acc = 0.0;
        for (_, prob) in &atoms {
            acc += prob;
            cdf.push(acc);
        }
        Ok(Sampling {
            n,
            atoms,
            p,
            kind,
            cdf,
        })
    }

    pub fn n_blocks(&self) -> usize {
        self.n
    }

    pub fn kind(&self) -> SamplingKind {
        self.kind
    }

    /// Marginal probabilities `p_i`.
    pub fn marginals(&self) -> &[f64] {
        &self.p
    }

    pub fn atoms(&self) -> &[(Vec<usize>, f64)] {
        &self.atoms
    }

    /// Expected drawn-subset size, the per-iteration fraction of an epoch.
    pub fn expected_subset_size(&self) -> f64 {
        self.atoms
            .iter()
            .map(|(s, prob)| s.len() as f64 * prob)
            .sum()
    }

    /// Draws one atom index (inverse CDF; deterministic given the RNG state).
    pub fn draw_index(&self, rng: &mut ChaCha8Rng) -> usize {
        let u: f64 = rng.random_range(0.0..1.0);
        match self.cdf.iter().position(|&c| u < c) {
            Some(idx) => idx,
            None => self.atoms.len() - 1,
        }
    }

    /// Draws one subset.
    pub fn draw(&self, rng: &mut ChaCha8Rng) -> &[usize] {
        &self.atoms[self.draw_index(rng)].0
    }
}

fn classify(n: usize, atoms: &[(Vec<usize>, f64)]) -> SamplingKind {
    if atoms.len() == 1 && atoms[0].0.len() == n {
        return SamplingKind::Full;
    }
    if atoms.iter().all(|(s, _)| s.len() == 1) {
        return SamplingKind::Serial;
    }
    SamplingKind::Arbitrary
}

/// Deterministic sampling that always selects all blocks.
pub fn full_sampling(n: usize) -> Result<Sampling> {
    Sampling::build(n, vec![((0..n).collect(), 1.0)])
}

/// Serial sampling: one block per iteration, block `i` with probability
/// `p[i]`.
pub fn serial_sampling(p: Vec<f64>) -> Result<Sampling> {
    let atoms = p
        .iter()
        .enumerate()
        .map(|(i, &pi)| (vec![i], pi))
        .collect();
    Sampling::build(p.len(), atoms)
}

/// Uniform serial sampling over `n` blocks.
pub fn uniform_serial(n: usize) -> Result<Sampling> {
    serial_sampling(vec![1.0 / n as f64; n])
}

/// Sampling from an explicit atom list; marginals are derived and properness
/// enforced.
pub fn arbitrary_sampling(n: usize, atoms: Vec<(Vec<usize>, f64)>) -> Result<Sampling> {
    Sampling::build(n, atoms)
}

/// Per-block ESO parameters `v_i` with `gamma_sq = max_i v_i / p_i`.
#[derive(Clone, Debug)]
pub struct EsoParams {
    pub v: Vec<f64>,
    pub gamma_sq: f64,
}

impl EsoParams {
    pub fn new(v: Vec<f64>, s: &Sampling) -> Result<Self> {
        if v.len() != s.n_blocks() {
            return Err(Error::shape("EsoParams: one v per block"));
        }
        if v.iter().any(|&vi| !(vi >= 0.0) || !vi.is_finite()) {
            return Err(Error::invalid("EsoParams: v_i >= 0"));
        }
        let gamma_sq = v
            .iter()
            .zip(s.marginals())
            .map(|(&vi, &pi)| vi / pi)
            .fold(0.0, f64::max);
        Ok(EsoParams { v, gamma_sq })
    }
}

const NORM_TOL: f64 = 1e-12;
const NORM_MAX_ITER: usize = 100_000;
const NORM_SEED: u64 = 0x5eed;

/// Closed-form ESO parameters for full and serial samplings with step sizes
/// `T = tau I`, `S_i = sigma_i I`. Arbitrary samplings have no closed form
/// here; supply `v` manually and check it with [`validate_eso`].
pub fn eso_params(s: &Sampling, a: &BlockOperator, tau: f64, sigma: &[f64]) -> Result<EsoParams> {
    if sigma.len() != a.n_blocks() || s.n_blocks() != a.n_blocks() {
        return Err(Error::shape("eso_params: block count mismatch"));
    }
    if !(tau > 0.0) || sigma.iter().any(|&x| !(x > 0.0)) {
        return Err(Error::invalid("eso_params: positive step sizes"));
    }
    match s.kind() {
        SamplingKind::Full => {
            let scales: Vec<f64> = sigma.iter().map(|&si| (si * tau).sqrt()).collect();
            let est = block_op_norm(a, &scales, NORM_TOL, NORM_MAX_ITER, NORM_SEED)?;
            let v = est.safe_upper() * est.safe_upper();
            Ok(EsoParams::new(vec![v; a.n_blocks()], s)?)
        }
        SamplingKind::Serial => {
            let mut v = Vec::with_capacity(a.n_blocks());
            for i in 0..a.n_blocks() {
                let est = op_norm(a.block(i).as_ref(), NORM_TOL, NORM_MAX_ITER, NORM_SEED)?;
                let ni = est.safe_upper();
                v.push(sigma[i] * tau * ni * ni);
            }
            Ok(EsoParams::new(v, s)?)
        }
        SamplingKind::Arbitrary => Err(Error::Sampling(
            "eso_params has closed forms only for full and serial samplings; \
             supply v manually and check it with validate_eso"
                .into(),
        )),
    }
}

/// Exact enumeration of the ESO left side
/// `E_S | sum_{i in S} C_i^* z_i |^2` with `C_i = sigma_i^{1/2} A_i tau^{1/2}`.
pub fn eso_lhs_enumerated(
    s: &Sampling,
    a: &BlockOperator,
    tau: f64,
    sigma: &[f64],
    z: &BlockVector,
) -> Result<f64> {
    let x_len = a.in_shape().numel();
    let mut scaled_adj: Vec<Vec<f64>> = Vec::with_capacity(a.n_blocks());
    let mut buf = vec![0.0; x_len];
    for i in 0..a.n_blocks() {
        a.adjoint_block_quiet(i, z.block(i), &mut buf)?;
        let c = (sigma[i] * tau).sqrt();
        scaled_adj.push(buf.iter().map(|&b| c * b).collect());
    }
    let mut lhs = 0.0;
    for (subset, prob) in s.atoms() {
        let mut w = vec![0.0; x_len];
        for &i in subset {
            for (wk, ak) in w.iter_mut().zip(&scaled_adj[i]) {
                *wk += ak;
            }
        }
        lhs += prob * w.iter().map(|v| v * v).sum::<f64>();
    }
    Ok(lhs)
}

/// ESO right side `sum_i p_i v_i |z_i|^2`.
pub fn eso_rhs(s: &Sampling, v: &EsoParams, z: &BlockVector) -> f64 {
    (0..z.n_blocks())
        .map(|i| {
            let bn: f64 = z.block(i).iter().map(|x| x * x).sum();
            s.marginals()[i] * v.v[i] * bn
        })
        .sum()
}

#[derive(Clone, Copy, Debug)]
pub struct EsoReport {
    pub max_ratio: f64,
    pub worst_probe: usize,
    pub n_probes: usize,
}

/// Checks the ESO inequality on random probes: `trials` dense probes plus
/// `probes` single-block-supported probes (tight for serial samplings), with
/// the left side enumerated exactly over atoms. The zero probe is always
/// included first.
pub fn validate_eso(
    s: &Sampling,
    a: &BlockOperator,
    tau: f64,
    sigma: &[f64],
    v: &EsoParams,
    trials: usize,
    probes: usize,
    seed: u64,
) -> Result<EsoReport> {
    if trials == 0 && probes == 0 {
        return Err(Error::invalid("validate_eso: nothing to check"));
    }
    let mut rng = seeded_rng(seed, STREAM_PROBE);
    let mut max_ratio: f64 = 0.0;
    let mut worst = 0;
    let mut z_list: Vec<BlockVector> = vec![a.y_zeros()];
    for _ in 0..trials {
        let mut z = a.y_zeros();
        for i in 0..z.n_blocks() {
            for x in z.block_mut(i) {
                *x = rng.random_range(-1.0..1.0);
            }
        }
        z_list.push(z);
    }
    for k in 0..probes {
        let mut z = a.y_zeros();
        let i = k % a.n_blocks();
        for x in z.block_mut(i) {
            *x = rng.random_range(-1.0..1.0);
        }
        z_list.push(z);
    }
    for (idx, z) in z_list.iter().enumerate() {
        let lhs = eso_lhs_enumerated(s, a, tau, sigma, z)?;
        let rhs = eso_rhs(s, v, z);
        if lhs > rhs + 1e-9 {
            return Err(Error::EsoViolation {
                probe: idx,
                lhs,
                rhs,
                ratio: if rhs > 0.0 { lhs / rhs } else { f64::INFINITY },
            });
        }
        let ratio = if rhs > 0.0 { lhs / rhs } else { 0.0 };
        if ratio > max_ratio {
            max_ratio = ratio;
            worst = idx;
        }
    }
    Ok(EsoReport {
        max_ratio,
        worst_probe: worst,
        n_probes: z_list.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blockspace::Shape;
    use crate::operators::{sparse_matrix_op, DiagOp, SparseMatrixOp};
    use approx::assert_relative_eq;

    fn identity_block(n: usize) -> SparseMatrixOp {
        let triplets: Vec<(usize, usize, f64)> = (0..n).map(|i| (i, i, 1.0)).collect();
        sparse_matrix_op(&triplets, Shape::d1(n).unwrap(), Shape::d1(n).unwrap()).unwrap()
    }

    fn random_block_op(rng: &mut ChaCha8Rng, n_blocks: usize, dim: usize) -> BlockOperator {
        let ops: Vec<SparseMatrixOp> = (0..n_blocks)
            .map(|_| {
                let rows = rng.random_range(1..=dim);
                let nnz = rng.random_range(1..=rows * dim);
                let triplets: Vec<(usize, usize, f64)> = (0..nnz)
                    .map(|_| {
                        (
                            rng.random_range(0..rows),
                            rng.random_range(0..dim),
                            rng.random_range(-2.0..2.0),
                        )
                    })
                    .collect();
                sparse_matrix_op(&triplets, Shape::d1(dim).unwrap(), Shape::d1(rows).unwrap())
                    .unwrap()
            })
            .collect();
        BlockOperator::from_ops(ops).unwrap()
    }

    #[test]
    fn serial_sampling_structure_and_errors() {
        let s = serial_sampling(vec![0.5, 0.5]).unwrap();
        assert_eq!(s.kind(), SamplingKind::Serial);
        assert_eq!(s.atoms().len(), 2);
        assert_eq!(s.atoms()[0].0, vec![0]);
        assert_eq!(s.marginals(), &[0.5, 0.5]);

        assert!(serial_sampling(vec![0.0, 0.5, 0.5]).is_err());
        assert!(serial_sampling(vec![0.4, 0.4]).is_err());
        assert!(serial_sampling(vec![]).is_err());
    }

    #[test]
    fn arbitrary_sampling_marginals() {
        let s = arbitrary_sampling(
            3,
            vec![(vec![0, 1], 1.0 / 3.0), (vec![1, 2], 2.0 / 3.0)],
        )
        .unwrap();
        assert_eq!(s.kind(), SamplingKind::Arbitrary);
        let p = s.marginals();
        assert_relative_eq!(p[0], 1.0 / 3.0, epsilon = 1e-12);
        assert_relative_eq!(p[1], 1.0, epsilon = 1e-12);
        assert_relative_eq!(p[2], 2.0 / 3.0, epsilon = 1e-12);
        assert_relative_eq!(s.expected_subset_size(), 2.0, epsilon = 1e-12);

        // block 2 never selected: not proper
        assert!(arbitrary_sampling(3, vec![(vec![0, 1], 1.0)]).is_err());

        let full = arbitrary_sampling(3, vec![(vec![0, 1, 2], 1.0)]).unwrap();
        assert_eq!(full.kind(), SamplingKind::Full);
        assert_eq!(full.marginals(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn rejects_malformed_atoms() {
        assert!(arbitrary_sampling(2, vec![(vec![0, 0], 1.0)]).is_err());
        assert!(arbitrary_sampling(2, vec![(vec![], 1.0)]).is_err());
        assert!(arbitrary_sampling(2, vec![(vec![0, 2], 1.0)]).is_err());
        assert!(arbitrary_sampling(2, vec![(vec![0, 1], -1.0), (vec![0, 1], 2.0)]).is_err());
    }

    #[test]
    fn draw_is_deterministic_and_full_is_constant() {
        let s = full_sampling(4).unwrap();
        let mut rng = seeded_rng(1, STREAM_SOLVER);
        for _ in 0..10 {
            assert_eq!(s.draw(&mut rng), &[0, 1, 2, 3]);
        }
        let ser = serial_sampling(vec![0.3, 0.7]).unwrap();
        let mut r1 = seeded_rng(42, STREAM_SOLVER);
        let mut r2 = seeded_rng(42, STREAM_SOLVER);
        let a: Vec<usize> = (0..100).map(|_| ser.draw_index(&mut r1)).collect();
        let b: Vec<usize> = (0..100).map(|_| ser.draw_index(&mut r2)).collect();
        assert_eq!(a, b);
        let mut r3 = seeded_rng(43, STREAM_SOLVER);
        let c: Vec<usize> = (0..100).map(|_| ser.draw_index(&mut r3)).collect();
        assert_ne!(a, c);
    }

    #[test]
    fn draw_frequencies_match_marginals_within_3_sigma() {
        let n_draws = 100_000usize;
        let cases: Vec<Sampling> = vec![
            serial_sampling(vec![0.3, 0.7]).unwrap(),
            serial_sampling(vec![0.2, 0.3, 0.5]).unwrap(),
            arbitrary_sampling(
                3,
                vec![(vec![0, 1], 1.0 / 3.0), (vec![1, 2], 2.0 / 3.0)],
            )
            .unwrap(),
        ];
        for (case_idx, s) in cases.iter().enumerate() {
            let mut rng = seeded_rng(7 + case_idx as u64, STREAM_SOLVER);
            let mut hits = vec![0usize; s.n_blocks()];
            for _ in 0..n_draws {
                for &i in s.draw(&mut rng) {
                    hits[i] += 1;
                }
            }
            for (i, &pi) in s.marginals().iter().enumerate() {
                let mean = n_draws as f64 * pi;
                let sd = (n_draws as f64 * pi * (1.0 - pi)).sqrt();
                let dev = (hits[i] as f64 - mean).abs();
                assert!(
                    dev <= 3.0 * sd + 1e-9,
                    "case {case_idx} block {i}: {} hits vs mean {mean} (3sd={})",
                    hits[i],
                    3.0 * sd
                );
            }
        }
        // spec-level bound on the first case: empirical p within 0.01
        let s = serial_sampling(vec![0.3, 0.7]).unwrap();
        let mut rng = seeded_rng(11, STREAM_SOLVER);
        let ones = (0..n_draws)
            .filter(|_| s.draw(&mut rng)[0] == 0)
            .count();
        assert!((ones as f64 / n_draws as f64 - 0.3).abs() < 0.01);
    }

    #[test]
    fn eso_params_closed_forms() {
        // serial with identity blocks
        let a = BlockOperator::from_ops(vec![identity_block(4), identity_block(4)]).unwrap();
        let s = uniform_serial(2).unwrap();
        let v = eso_params(&s, &a, 0.5, &[0.5, 0.5]).unwrap();
        for &vi in &v.v {
            assert_relative_eq!(vi, 0.25, max_relative = 1e-6);
        }
        assert_relative_eq!(v.gamma_sq, 0.5, max_relative = 1e-6);

        // doubling tau doubles v exactly (same deterministic norm estimate)
        let v2 = eso_params(&s, &a, 1.0, &[0.5, 0.5]).unwrap();
        for (&a2, &a1) in v2.v.iter().zip(&v.v) {
            assert_relative_eq!(a2, 2.0 * a1, max_relative = 1e-12);
        }

        // full sampling with a single identity block
        let a1 = BlockOperator::from_ops(vec![identity_block(3)]).unwrap();
        let f = full_sampling(1).unwrap();
        let v = eso_params(&f, &a1, 1.0, &[1.0]).unwrap();
        assert_relative_eq!(v.v[0], 1.0, max_relative = 1e-6);

        // arbitrary samplings are rejected with guidance
        let arb = arbitrary_sampling(
            2,
            vec![(vec![0, 1], 0.5), (vec![0], 0.5)],
        )
        .unwrap();
        assert!(eso_params(&arb, &a, 0.5, &[0.5, 0.5]).is_err());
    }

    #[test]
    fn validate_eso_passes_for_closed_forms() {
        let mut rng = seeded_rng(100, STREAM_DATA);
        for trial in 0..5 {
            let n_blocks = rng.random_range(1..4usize);
            let a = random_block_op(&mut rng, n_blocks, 5);
            let sigma: Vec<f64> = (0..n_blocks).map(|_| rng.random_range(0.1..2.0)).collect();
            let tau = rng.random_range(0.1..2.0);

            let full = full_sampling(n_blocks).unwrap();
            let vf = eso_params(&full, &a, tau, &sigma).unwrap();
            let rep = validate_eso(&full, &a, tau, &sigma, &vf, 20, 2 * n_blocks, trial as u64)
                .unwrap();
            assert!(rep.max_ratio <= 1.0 + 1e-9, "full ratio {}", rep.max_ratio);

            let serial = uniform_serial(n_blocks).unwrap();
            let vs = eso_params(&serial, &a, tau, &sigma).unwrap();
            let rep = validate_eso(&serial, &a, tau, &sigma, &vs, 20, 2 * n_blocks, trial as u64)
                .unwrap();
            assert!(rep.max_ratio <= 1.0 + 1e-9, "serial ratio {}", rep.max_ratio);
            assert!(rep.n_probes == 21 + 2 * n_blocks);
        }
    }

    #[test]
    fn validate_eso_catches_halved_v() {
        let mut rng = seeded_rng(200, STREAM_DATA);
        let a = random_block_op(&mut rng, 3, 5);
        let s = uniform_serial(3).unwrap();
        let sigma = [0.7, 0.9, 1.1];
        let good = eso_params(&s, &a, 0.8, &sigma).unwrap();
        let halved = EsoParams::new(good.v.iter().map(|v| v / 2.0).collect(), &s).unwrap();
        let err = validate_eso(&s, &a, 0.8, &sigma, &halved, 20, 6, 0).unwrap_err();
        match err {
            Error::EsoViolation { lhs, rhs, ratio, .. } => {
                assert!(lhs > rhs);
                assert!(ratio > 1.0);
            }
            other => panic!("expected EsoViolation, got {other:?}"),
        }
    }

    #[test]
    fn eso_zero_probe_is_trivially_tight() {
        let a = BlockOperator::from_ops(vec![identity_block(3)]).unwrap();
        let s = full_sampling(1).unwrap();
        let z = a.y_zeros();
        let v = eso_params(&s, &a, 1.0, &[1.0]).unwrap();
        assert_eq!(eso_lhs_enumerated(&s, &a, 1.0, &[1.0], &z).unwrap(), 0.0);
        assert_eq!(eso_rhs(&s, &v, &z), 0.0);
    }

    #[test]
    fn serial_eso_is_tight_on_block_probes() {
        // for z supported on one block, lhs/rhs -> |A_i z_i|^2 / (v_i |z_i|^2)
        // whose supremum is 1; check we get close with the top singular vector
        let d = DiagOp::new(vec![1.0, 3.0]).unwrap();
        let a = BlockOperator::from_ops(vec![d]).unwrap();
        let s = serial_sampling(vec![1.0]).unwrap();
        let v = eso_params(&s, &a, 1.0, &[1.0]).unwrap();
        let mut z = a.y_zeros();
        z.block_mut(0)[1] = 1.0; // top singular direction of diag(1,3)
        let lhs = eso_lhs_enumerated(&s, &a, 1.0, &[1.0], &z).unwrap();
        let rhs = eso_rhs(&s, &v, &z);
        assert!(lhs <= rhs + 1e-9);
        assert!(lhs / rhs > 1.0 - 1e-6);
    }

    #[test]
    fn cross_term_lower_bound_holds_on_probes() {
        // 2 E<QAx, y+ - y> >= -E{ (1/c)|x|^2_{T^-1}
        //                         + c max_i(v_i/p_i) |y+ - y|^2_{QS^-1} }
        // with y+ the update on the drawn subset, enumerated over atoms.
        let mut rng = seeded_rng(300, STREAM_DATA);
        for trial in 0..4 {
            let n_blocks = 3;
            let a = random_block_op(&mut rng, n_blocks, 4);
            let sigma: Vec<f64> = (0..n_blocks).map(|_| rng.random_range(0.1..2.0)).collect();
            let tau = rng.random_range(0.1..2.0);
            let samplings = vec![
                uniform_serial(n_blocks).unwrap(),
                full_sampling(n_blocks).unwrap(),
            ];
            for s in samplings {
                let v = eso_params(&s, &a, tau, &sigma).unwrap();
                for probe in 0..25 {
                    let x: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
                    let mut yhat = a.y_zeros();
                    let mut y = a.y_zeros();
                    for i in 0..n_blocks {
                        for w in yhat.block_mut(i) {
                            *w = rng.random_range(-1.0..1.0);
                        }
                        for w in y.block_mut(i) {
                            *w = rng.random_range(-1.0..1.0);
                        }
                    }
                    let c = rng.random_range(0.05..5.0);
                    let ax = a.apply_full_quiet(&x).unwrap();
                    let mut lhs = 0.0;
                    let mut rhs_y = 0.0;
                    for (subset, prob) in s.atoms() {
                        for &i in subset {
                            let dot: f64 = ax
                                .block(i)
                                .iter()
                                .zip(yhat.block(i).iter().zip(y.block(i)))
                                .map(|(axk, (yh, yk))| axk / s.marginals()[i] * (yh - yk))
                                .sum();
                            lhs += 2.0 * prob * dot;
                            let d2: f64 = yhat
                                .block(i)
                                .iter()
                                .zip(y.block(i))
                                .map(|(a, b)| (a - b) * (a - b))
                                .sum();
                            rhs_y += prob * d2 / (s.marginals()[i] * sigma[i]);
                        }
                    }
                    let x2: f64 = x.iter().map(|v| v * v).sum();
                    let rhs = -(x2 / (c * tau) + c * v.gamma_sq * rhs_y);
                    assert!(
                        lhs >= rhs - 1e-9,
                        "trial {trial} probe {probe}: {lhs} < {rhs}"
                    );
                }
            }
        }
    }
}
