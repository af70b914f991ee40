use crate::error::{Error, Result};
use crate::tensor::{DenseTensor, FactorMatrix};

/// Rank of one mode: `Some(r)` when the mode is factorized to rank `r`,
/// `None` when the mode is kept at full extent with no factor matrix.
pub type ModeRank = Option<usize>;

/// One low-rank Tucker term: a core tensor and one optional factor per mode.
#[derive(Debug, Clone, PartialEq)]
pub struct TuckerTerm {
    core: DenseTensor,
    factors: Vec<Option<FactorMatrix>>,
}

impl TuckerTerm {
    pub fn new(core: DenseTensor, factors: Vec<Option<FactorMatrix>>) -> Result<Self> {
        if factors.len() != core.ndim() {
            return Err(Error::argument(format!(
                "{} factor slots for an order-{} core",
                factors.len(),
                core.ndim()
            )));
        }
        for (n, f) in factors.iter().enumerate() {
            if let Some(f) = f {
                if f.cols() != core.shape()[n] {
                    return Err(Error::argument(format!(
                        "factor {n} has {} columns, core extent is {}",
                        f.cols(),
                        core.shape()[n]
                    )));
                }
            }
        }
        Ok(Self { core, factors })
    }

    pub fn core(&self) -> &DenseTensor {
        &self.core
    }

    pub fn factors(&self) -> &[Option<FactorMatrix>] {
        &self.factors
    }

    pub fn factor(&self, mode: usize) -> Option<&FactorMatrix> {
        self.factors.get(mode).and_then(Option::as_ref)
    }

    pub fn into_parts(self) -> (DenseTensor, Vec<Option<FactorMatrix>>) {
        (self.core, self.factors)
    }

    /// Shape of the tensor this term reconstructs.
    pub fn full_shape(&self) -> Vec<usize> {
        self.factors
            .iter()
            .zip(self.core.shape())
            .map(|(f, &d)| f.as_ref().map_or(d, FactorMatrix::rows))
            .collect()
    }

    pub fn rank_signature(&self) -> Vec<ModeRank> {
        self.factors
            .iter()
            .map(|f| f.as_ref().map(FactorMatrix::cols))
            .collect()
    }

    /// `core x_1 A1 x_2 A2 ...`, skipping absent factors.
    pub fn reconstruct(&self) -> DenseTensor {
        let mut t = self.core.clone();
        for (n, f) in self.factors.iter().enumerate() {
            if let Some(f) = f {
                t = t.mode_product_unchecked(f, n);
            }
        }
        t
    }

    /// Number of stored values (core plus present factors).
    pub fn stored_len(&self) -> usize {
        self.core.len()
            + self
                .factors
                .iter()
                .flatten()
                .map(|f| f.rows() * f.cols())
                .sum::<usize>()
    }
}

/// A sum of `R >= 1` Tucker terms sharing one rank signature.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockTermDecomp {
    terms: Vec<TuckerTerm>,
    target_shape: Vec<usize>,
}

impl BlockTermDecomp {
    pub fn new(terms: Vec<TuckerTerm>, target_shape: Vec<usize>) -> Result<Self> {
        let first = terms
            .first()
            .ok_or_else(|| Error::argument("a block term decomposition needs at least one term"))?;
        let signature = first.rank_signature();
        for (r, t) in terms.iter().enumerate() {
            if t.rank_signature() != signature {
                return Err(Error::argument(format!(
                    "term {r} has rank signature {:?}, expected {signature:?}",
                    t.rank_signature()
                )));
            }
            if t.full_shape() != target_shape {
                return Err(Error::argument(format!(
                    "term {r} reconstructs shape {:?}, expected {target_shape:?}",
                    t.full_shape()
                )));
            }
        }
        Ok(Self {
            terms,
            target_shape,
        })
    }

    pub fn from_tucker(term: TuckerTerm) -> Self {
        let target_shape = term.full_shape();
        Self {
            terms: vec![term],
            target_shape,
        }
    }

    pub fn terms(&self) -> &[TuckerTerm] {
        &self.terms
    }

    pub fn num_terms(&self) -> usize {
        self.terms.len()
    }

    pub fn target_shape(&self) -> &[usize] {
        &self.target_shape
    }

    pub fn rank_signature(&self) -> Vec<ModeRank> {
        self.terms[0].rank_signature()
    }

    pub fn stored_len(&self) -> usize {
        self.terms.iter().map(TuckerTerm::stored_len).sum()
    }

    /// Sum of all term reconstructions, accumulated in term order.
    pub fn reconstruct(&self) -> DenseTensor {
        let mut terms = self.terms.iter();
        let mut acc = terms.next().expect("non-empty").reconstruct();
        for t in terms {
            acc.add_assign(&t.reconstruct());
        }
        acc
    }

    /// Rewrites an all-rank-one decomposition as a sum of rank-one outer
    /// products. Unfactorized modes count as rank one only if their extent is one.
    pub fn degrade_to_cp(&self) -> Result<CpForm> {
        let signature = self.rank_signature();
        for (n, (rank, &extent)) in signature.iter().zip(&self.target_shape).enumerate() {
            let r = rank.unwrap_or(extent);
            if r != 1 {
                return Err(Error::Refused(format!(
                    "mode {n} has rank {r}; a CP form needs every mode at rank 1"
                )));
            }
        }
        let components = self
            .terms
            .iter()
            .map(|t| {
                let weight = t.core().data()[0];
                t.factors()
                    .iter()
                    .enumerate()
                    .map(|(n, f)| {
                        let column: Vec<f64> = match f {
                            Some(f) => f.data().to_vec(),
                            None => vec![1.0],
                        };
                        if n == 0 {
                            column.iter().map(|v| v * weight).collect()
                        } else {
                            column
                        }
                    })
                    .collect()
            })
            .collect();
        Ok(CpForm {
            components,
            shape: self.target_shape.clone(),
        })
    }

    pub fn degrade_to_tucker(self) -> Result<TuckerTerm> {
        if self.terms.len() != 1 {
            return Err(Error::Refused(format!(
                "{} terms; a Tucker form needs exactly one",
                self.terms.len()
            )));
        }
        Ok(self.terms.into_iter().next().expect("one term"))
    }
}

/// Sum of rank-one terms; `components[r][n]` is the mode-`n` vector of term `r`.
#[derive(Debug, Clone, PartialEq)]
pub struct CpForm {
    pub components: Vec<Vec<Vec<f64>>>,
    pub shape: Vec<usize>,
}

impl CpForm {
    pub fn reconstruct(&self) -> DenseTensor {
        let mut acc = DenseTensor::zeros(&self.shape).expect("valid shape");
        for vectors in &self.components {
            let t = DenseTensor::from_fn(&self.shape, |idx| {
                idx.iter().zip(vectors).map(|(&i, v)| v[i]).product::<f64>()
            })
            .expect("valid shape");
            acc.add_assign(&t);
        }
        acc
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> DenseTensor {
        DenseTensor::from_fn(shape, |_| rng.gen_range(-1.0..=1.0)).unwrap()
    }

    fn rand_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> FactorMatrix {
        FactorMatrix::new(
            r,
            c,
            (0..r * c).map(|_| rng.gen_range(-1.0..=1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn identity_factors_return_core() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let core = rand_tensor(&mut rng, &[2, 3, 4]);
        let factors = [2, 3, 4]
            .iter()
            .map(|&d| Some(FactorMatrix::identity(d).unwrap()))
            .collect();
        let d = BlockTermDecomp::from_tucker(TuckerTerm::new(core.clone(), factors).unwrap());
        assert_eq!(d.reconstruct(), core);
    }

    #[test]
    fn zero_cores_give_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let terms = (0..2)
            .map(|_| {
                TuckerTerm::new(
                    DenseTensor::zeros(&[2, 2, 2]).unwrap(),
                    (0..3).map(|_| Some(rand_matrix(&mut rng, 4, 2))).collect(),
                )
                .unwrap()
            })
            .collect();
        let d = BlockTermDecomp::new(terms, vec![4, 4, 4]).unwrap();
        assert!(d.reconstruct().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_mixed_signatures() {
        let a = TuckerTerm::new(
            DenseTensor::zeros(&[2, 3]).unwrap(),
            vec![Some(FactorMatrix::zeros(4, 2).unwrap()), None],
        )
        .unwrap();
        let b = TuckerTerm::new(
            DenseTensor::zeros(&[1, 3]).unwrap(),
            vec![Some(FactorMatrix::zeros(4, 1).unwrap()), None],
        )
        .unwrap();
        assert!(BlockTermDecomp::new(vec![a.clone(), b], vec![4, 3]).is_err());
        assert!(BlockTermDecomp::new(vec![a.clone()], vec![4, 4]).is_err());
        assert!(BlockTermDecomp::new(vec![], vec![4, 3]).is_err());
        assert!(TuckerTerm::new(
            DenseTensor::zeros(&[2, 3]).unwrap(),
            vec![Some(FactorMatrix::zeros(4, 3).unwrap()), None]
        )
        .is_err());
    }

    #[test]
    fn cp_refusal_and_single_outer_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let term = TuckerTerm::new(
            rand_tensor(&mut rng, &[2, 1, 1]),
            vec![
                Some(rand_matrix(&mut rng, 4, 2)),
                Some(rand_matrix(&mut rng, 4, 1)),
                Some(rand_matrix(&mut rng, 4, 1)),
            ],
        )
        .unwrap();
        assert!(matches!(
            BlockTermDecomp::from_tucker(term).degrade_to_cp(),
            Err(Error::Refused(_))
        ));

        let term = TuckerTerm::new(
            DenseTensor::new(vec![1, 1], vec![2.0]).unwrap(),
            vec![
                Some(FactorMatrix::new(2, 1, vec![1., 3.]).unwrap()),
                Some(FactorMatrix::new(3, 1, vec![1., 0., -1.]).unwrap()),
            ],
        )
        .unwrap();
        let d = BlockTermDecomp::from_tucker(term);
        let cp = d.degrade_to_cp().unwrap();
        assert_eq!(cp.components.len(), 1);
        assert_eq!(cp.components[0][0], vec![2., 6.]);
        assert_eq!(cp.reconstruct().data(), &[2., 0., -2., 6., 0., -6.]);
    }

    #[test]
    fn tucker_refusal() {
        let t = TuckerTerm::new(DenseTensor::zeros(&[2]).unwrap(), vec![None]).unwrap();
        let d = BlockTermDecomp::new(vec![t.clone(), t], vec![2]).unwrap();
        assert!(matches!(d.degrade_to_tucker(), Err(Error::Refused(_))));
    }
}
