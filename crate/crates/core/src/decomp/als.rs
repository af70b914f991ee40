//! Block term decomposition by alternating least squares.
//!
//! Each sweep visits the terms in order. For term `r` the residual
//! `X - sum_{s != r} term_s` is formed, every factorized mode's factor is
//! refit by least squares (normal equations with a ridge), and finally the
//! core is refit. After each factor update the factor is re-orthonormalized
//! and the triangular part is pushed into the core, which leaves the
//! reconstruction unchanged and makes the core subproblem a projection.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::term::{BlockTermDecomp, ModeRank, TuckerTerm};
use crate::error::{Error, Result};
use crate::linalg::{gram_rows, leading_eigvecs, mul_transposed, solve_gram_right, thin_qr};
use crate::tensor::{DenseTensor, FactorMatrix};

/// A restart whose final relative error is at or below this is accepted
/// without trying further starting points.
const ACCEPT_FIT: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AlsInit {
    /// Factors and cores drawn i.i.d. uniform on [-1, 1] from the seeded RNG.
    #[default]
    Random,
    /// Truncated higher-order SVD. Deterministic; single-term fits only.
    Hosvd,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlsConfig {
    pub max_sweeps: usize,
    /// Stop once a sweep improves the relative error by less than this.
    pub tol: f64,
    pub seed: u64,
    /// Added to the diagonal of every factor Gram matrix.
    pub ridge: f64,
    /// Number of random starting points; the best fit is kept.
    pub restarts: usize,
    pub init: AlsInit,
}

impl Default for AlsConfig {
    fn default() -> Self {
        Self {
            max_sweeps: 1000,
            tol: 1e-13,
            seed: 0,
            ridge: 1e-10,
            restarts: 20,
            init: AlsInit::Random,
        }
    }
}

impl AlsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_sweeps == 0 {
            return Err(Error::argument("max_sweeps must be at least 1"));
        }
        if !(self.tol >= 0.0 && self.tol.is_finite()) {
            return Err(Error::argument(format!(
                "tol must be finite and >= 0, got {}",
                self.tol
            )));
        }
        if !(self.ridge >= 0.0 && self.ridge.is_finite()) {
            return Err(Error::argument(format!(
                "ridge must be finite and >= 0, got {}",
                self.ridge
            )));
        }
        if self.restarts == 0 {
            return Err(Error::argument("restarts must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct AlsFit {
    pub decomposition: BlockTermDecomp,
    /// Relative reconstruction error after each sweep of the kept run.
    pub error_trace: Vec<f64>,
    /// Index of the starting point that produced the kept run.
    pub restart: usize,
}

impl AlsFit {
    pub fn final_error(&self) -> f64 {
        *self.error_trace.last().expect("trace is never empty")
    }
}

fn validate_ranks(shape: &[usize], ranks: &[ModeRank]) -> Result<()> {
    if ranks.len() != shape.len() {
        return Err(Error::argument(format!(
            "{} ranks given for an order-{} tensor",
            ranks.len(),
            shape.len()
        )));
    }
    for (n, (&rank, &extent)) in ranks.iter().zip(shape).enumerate() {
        match rank {
            Some(0) => return Err(Error::argument(format!("rank of mode {n} is zero"))),
            Some(r) if r > extent => {
                return Err(Error::argument(format!(
                    "rank {r} of mode {n} exceeds its extent {extent}"
                )))
            }
            _ => {}
        }
    }
    Ok(())
}

fn core_shape(x: &DenseTensor, ranks: &[ModeRank]) -> Vec<usize> {
    ranks
        .iter()
        .zip(x.shape())
        .map(|(r, &d)| r.unwrap_or(d))
        .collect()
}

/// A block term decomposition with every core and factor entry drawn
/// uniformly from `[-1, 1]`, terms generated in order.
pub fn random_btd(
    shape: &[usize],
    num_terms: usize,
    ranks: &[ModeRank],
    seed: u64,
) -> Result<BlockTermDecomp> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(Error::argument(format!("invalid shape {shape:?}")));
    }
    if num_terms == 0 {
        return Err(Error::argument("number of terms must be at least 1"));
    }
    validate_ranks(shape, ranks)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let core_dims: Vec<usize> = ranks
        .iter()
        .zip(shape)
        .map(|(r, &d)| r.unwrap_or(d))
        .collect();
    let terms = (0..num_terms)
        .map(|_| {
            let core = DenseTensor::from_fn(&core_dims, |_| rng.gen_range(-1.0..=1.0))?;
            let factors = ranks
                .iter()
                .zip(shape)
                .map(|(r, &d)| {
                    r.map(|r| {
                        FactorMatrix::new(
                            d,
                            r,
                            (0..d * r).map(|_| rng.gen_range(-1.0..=1.0)).collect(),
                        )
                    })
                    .transpose()
                })
                .collect::<Result<Vec<_>>>()?;
            TuckerTerm::new(core, factors)
        })
        .collect::<Result<Vec<_>>>()?;
    BlockTermDecomp::new(terms, shape.to_vec())
}

/// Truncated higher-order SVD: each factor holds the leading left singular
/// vectors of the corresponding unfolding and the core is the projection of
/// `x` onto them.
pub fn hosvd(x: &DenseTensor, ranks: &[ModeRank]) -> Result<TuckerTerm> {
    validate_ranks(x.shape(), ranks)?;
    let mut factors = Vec::with_capacity(ranks.len());
    for (n, rank) in ranks.iter().enumerate() {
        factors.push(match rank {
            Some(r) => {
                let unfolded = FactorMatrix::from_tensor(&x.unfold(n)?)?;
                Some(leading_eigvecs(&gram_rows(&unfolded), *r))
            }
            None => None,
        });
    }
    let mut core = x.clone();
    for (n, f) in factors.iter().enumerate() {
        if let Some(f) = f {
            core = core.mode_product_unchecked(&f.transpose(), n);
        }
    }
    TuckerTerm::new(core, factors)
}

struct TermState {
    core: DenseTensor,
    factors: Vec<Option<FactorMatrix>>,
}

impl TermState {
    fn reconstruct(&self) -> DenseTensor {
        let mut t = self.core.clone();
        for (n, f) in self.factors.iter().enumerate() {
            if let Some(f) = f {
                t = t.mode_product_unchecked(f, n);
            }
        }
        t
    }

    fn random(x: &DenseTensor, ranks: &[ModeRank], rng: &mut ChaCha8Rng) -> Self {
        let mut core = DenseTensor::from_fn(&core_shape(x, ranks), |_| rng.gen_range(-1.0..=1.0))
            .expect("valid core shape");
        let mut factors = Vec::with_capacity(ranks.len());
        for (n, rank) in ranks.iter().enumerate() {
            factors.push(rank.map(|r| {
                let rows = x.shape()[n];
                let data = (0..rows * r).map(|_| rng.gen_range(-1.0..=1.0)).collect();
                let (q, tri) = thin_qr(&FactorMatrix::from_parts(rows, r, data));
                core = core.mode_product_unchecked(&tri, n);
                q
            }));
        }
        Self { core, factors }
    }
}

struct Run {
    terms: Vec<TermState>,
    trace: Vec<f64>,
}

fn sweep_term(
    term: &mut TermState,
    residual: &DenseTensor,
    modes: &[usize],
    ridge: f64,
    index: usize,
) -> Result<()> {
    for &n in modes {
        let mut w = term.core.clone();
        for &m in modes.iter().filter(|&&m| m != n) {
            w = w.mode_product_unchecked(term.factors[m].as_ref().expect("factorized"), m);
        }
        let wn = FactorMatrix::from_tensor(&w.unfold(n)?)?;
        let xn = FactorMatrix::from_tensor(&residual.unfold(n)?)?;
        let rhs = mul_transposed(&xn, &wn);
        let gram = gram_rows(&wn);
        let a = solve_gram_right(&rhs, &gram, ridge).ok_or(Error::Singular {
            term: index,
            mode: n,
        })?;
        let (q, tri) = thin_qr(&a);
        term.core = term.core.mode_product_unchecked(&tri, n);
        term.factors[n] = Some(q);
    }
    let mut core = residual.clone();
    for &m in modes {
        let f = term.factors[m].as_ref().expect("factorized");
        core = core.mode_product_unchecked(&f.transpose(), m);
    }
    term.core = core;
    Ok(())
}

fn run_als(
    x: &DenseTensor,
    mut terms: Vec<TermState>,
    modes: &[usize],
    cfg: &AlsConfig,
    norm: f64,
) -> Result<Run> {
    let mut recon: Vec<DenseTensor> = terms.iter().map(TermState::reconstruct).collect();
    let mut trace: Vec<f64> = Vec::new();
    for _ in 0..cfg.max_sweeps {
        for r in 0..terms.len() {
            let mut residual = x.clone();
            for (s, t) in recon.iter().enumerate() {
                if s != r {
                    for (v, w) in residual.data_mut().iter_mut().zip(t.data()) {
                        *v -= w;
                    }
                }
            }
            sweep_term(&mut terms[r], &residual, modes, cfg.ridge, r)?;
            recon[r] = terms[r].reconstruct();
        }
        let mut err2 = 0.0;
        for (i, &v) in x.data().iter().enumerate() {
            let approx: f64 = recon.iter().map(|t| t.data()[i]).sum();
            err2 += (v - approx) * (v - approx);
        }
        let err = err2.sqrt() / norm;
        if !err.is_finite() {
            return Err(Error::NonFinite { index: 0 });
        }
        let stalled = trace.last().is_some_and(|&prev| prev - err < cfg.tol);
        trace.push(err);
        if stalled {
            break;
        }
    }
    Ok(Run { terms, trace })
}

fn zero_fit(x: &DenseTensor, num_terms: usize, ranks: &[ModeRank]) -> Result<AlsFit> {
    let shape = core_shape(x, ranks);
    let terms = (0..num_terms)
        .map(|_| {
            let factors = ranks
                .iter()
                .enumerate()
                .map(|(n, rank)| {
                    rank.map(|r| {
                        let rows = x.shape()[n];
                        let mut f = FactorMatrix::from_parts(rows, r, vec![0.0; rows * r]);
                        for j in 0..r {
                            f.data_mut()[j * r + j] = 1.0;
                        }
                        f
                    })
                })
                .collect();
            TuckerTerm::new(DenseTensor::zeros(&shape).expect("valid"), factors)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AlsFit {
        decomposition: BlockTermDecomp::new(terms, x.shape().to_vec())?,
        error_trace: vec![0.0],
        restart: 0,
    })
}

/// Fits `num_terms` Tucker terms with the given per-mode ranks (`None` keeps
/// a mode unfactorized). Modes are 0-based.
///
/// An all-zero `x` yields zero cores, orthonormal factors and the trace `[0]`.
pub fn btd_als(
    x: &DenseTensor,
    num_terms: usize,
    ranks: &[ModeRank],
    cfg: &AlsConfig,
) -> Result<AlsFit> {
    cfg.validate()?;
    if num_terms == 0 {
        return Err(Error::argument("number of terms must be at least 1"));
    }
    validate_ranks(x.shape(), ranks)?;
    let norm = x.frobenius_norm();
    if norm == 0.0 {
        return zero_fit(x, num_terms, ranks);
    }
    let modes: Vec<usize> = (0..ranks.len()).filter(|&n| ranks[n].is_some()).collect();

    let starts = match cfg.init {
        AlsInit::Hosvd => {
            if num_terms != 1 {
                return Err(Error::argument(
                    "HOSVD initialization requires a single term",
                ));
            }
            1
        }
        AlsInit::Random => cfg.restarts,
    };

    let mut best: Option<(usize, Run)> = None;
    for start in 0..starts {
        let terms = match cfg.init {
            AlsInit::Hosvd => {
                let (core, factors) = hosvd(x, ranks)?.into_parts();
                vec![TermState { core, factors }]
            }
            AlsInit::Random => {
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
                rng.set_stream(start as u64);
                (0..num_terms)
                    .map(|_| TermState::random(x, ranks, &mut rng))
                    .collect()
            }
        };
        let run = run_als(x, terms, &modes, cfg, norm)?;
        let err = *run.trace.last().expect("at least one sweep");
        let better = best
            .as_ref()
            .is_none_or(|(_, b)| err < *b.trace.last().expect("non-empty"));
        if better {
            best = Some((start, run));
        }
        if err <= ACCEPT_FIT {
            break;
        }
    }

    let (restart, run) = best.expect("at least one start");
    let terms = run
        .terms
        .into_iter()
        .map(|t| TuckerTerm::new(t.core, t.factors))
        .collect::<Result<Vec<_>>>()?;
    Ok(AlsFit {
        decomposition: BlockTermDecomp::new(terms, x.shape().to_vec())?,
        error_trace: run.trace,
        restart,
    })
}
