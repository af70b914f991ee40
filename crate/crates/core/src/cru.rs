//! Collective factorization of several kernels with shared factors.
//!
//! `L` kernels of identical shape `(d1, d2, d3, d4)` are concatenated along
//! the output-channel mode into one `(d1, d2, d3, L*d4)` tensor and fitted by
//! a single block term decomposition. Every unit then shares the cores and
//! the input-side factors `A3_r` and owns the `d4`-row block of each `A4_r`
//! that maps to its own output channels.
//!
//! Units are indexed from 0.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::convmap::{front_stages, pointwise_conv, ConvKernel, FactoredConvUnit};
use crate::decomp::archive::{
    self, read_json, read_tracked, write_json, write_tracked, ArchiveMeta,
};
use crate::decomp::{btd_als, AlsConfig, AlsFit, BlockTermDecomp, TuckerTerm};
use crate::error::{Error, Result};
use crate::tensor::{Activation, DenseTensor, FactorMatrix};

const OUTPUT_MODE: usize = 3;

pub const UNITS_FILE: &str = "units.json";

/// Factors used by every unit of a group.
#[derive(Debug, Clone)]
pub struct SharedStage {
    a3: Vec<FactorMatrix>,
    cores: Vec<DenseTensor>,
    pub act1: Activation,
    pub act2: Activation,
}

impl SharedStage {
    pub fn a3(&self) -> &[FactorMatrix] {
        &self.a3
    }

    pub fn cores(&self) -> &[DenseTensor] {
        &self.cores
    }

    /// Stored numbers: `R (d1 d2 d3* d4* + d3 d3*)`.
    pub fn param_count(&self) -> usize {
        self.a3.iter().map(|f| f.data().len()).sum::<usize>()
            + self.cores.iter().map(DenseTensor::len).sum::<usize>()
    }
}

/// Optional per-unit pointwise layer after the unit's own `A4` stage,
/// followed by a per-channel affine map and an activation.
#[derive(Debug, Clone)]
pub struct ExtraPointwise {
    /// `out x d4`.
    pub weights: FactorMatrix,
    /// `(scale, shift)`, one entry per output channel.
    pub affine: Option<(Vec<f64>, Vec<f64>)>,
    pub act: Activation,
}

impl ExtraPointwise {
    pub fn new(weights: FactorMatrix) -> Self {
        Self {
            weights,
            affine: None,
            act: Activation::Identity,
        }
    }

    fn validate(&self, d4: usize) -> Result<()> {
        if self.weights.cols() != d4 {
            return Err(Error::argument(format!(
                "extra pointwise weights have {} input channels, unit produces {d4}",
                self.weights.cols()
            )));
        }
        if let Some((scale, shift)) = &self.affine {
            let out = self.weights.rows();
            if scale.len() != out || shift.len() != out {
                return Err(Error::argument(format!(
                    "extra pointwise affine has lengths {}/{}, expected {out}",
                    scale.len(),
                    shift.len()
                )));
            }
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.weights.data().len() + self.affine.as_ref().map_or(0, |(s, b)| s.len() + b.len())
    }

    /// Pointwise conv, affine map, activation.
    pub fn apply(&self, x: &DenseTensor) -> Result<DenseTensor> {
        let mut y = pointwise_conv(x, &self.weights)?;
        if let Some((scale, shift)) = &self.affine {
            let c = scale.len();
            let data = y
                .data()
                .chunks_exact(c)
                .flat_map(|px| px.iter().zip(scale).zip(shift).map(|((v, s), b)| v * s + b))
                .collect();
            y = DenseTensor::new(y.shape().to_vec(), data)?;
        }
        y.activate(&self.act)
    }
}

/// Parameter totals of a group versus `L` separately factored units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SharingCounts {
    pub shared: usize,
    pub independent: usize,
    pub ratio: f64,
}

#[derive(Debug, Clone)]
pub struct CollectiveGroup {
    shared: Arc<SharedStage>,
    /// `per_unit_a4[l][r]` is unit `l`'s `d4 x d4*` block of `A4_r`.
    per_unit_a4: Vec<Vec<FactorMatrix>>,
    extra: Option<Vec<ExtraPointwise>>,
}

impl CollectiveGroup {
    pub fn new(
        a3: Vec<FactorMatrix>,
        cores: Vec<DenseTensor>,
        per_unit_a4: Vec<Vec<FactorMatrix>>,
    ) -> Result<Self> {
        let first = per_unit_a4
            .first()
            .ok_or_else(|| Error::argument("a collective group needs at least one unit"))?;
        // validates every unit against the shared factors
        for a4 in &per_unit_a4 {
            FactoredConvUnit::new(a3.clone(), cores.clone(), a4.clone())?;
            if a4[0].rows() != first[0].rows() {
                return Err(Error::argument("units differ in output channel count"));
            }
        }
        Ok(Self {
            shared: Arc::new(SharedStage {
                a3,
                cores,
                act1: Activation::Identity,
                act2: Activation::Identity,
            }),
            per_unit_a4,
            extra: None,
        })
    }

    /// Splits the output-mode factors of a decomposition of the concatenated
    /// tensor into `units` equal row blocks.
    pub fn from_decomposition(d: &BlockTermDecomp, units: usize) -> Result<Self> {
        let joint = FactoredConvUnit::from_decomposition(d)?;
        if units == 0 || joint.out_channels() % units != 0 {
            return Err(Error::argument(format!(
                "{} output channels cannot be split into {units} units",
                joint.out_channels()
            )));
        }
        let d4 = joint.out_channels() / units;
        let per_unit_a4 = (0..units)
            .map(|l| {
                joint
                    .a4()
                    .iter()
                    .map(|f| f.row_block(l * d4, d4))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(joint.a3().to_vec(), joint.cores().to_vec(), per_unit_a4)
    }

    pub fn with_activations(mut self, act1: Activation, act2: Activation) -> Self {
        let shared = Arc::make_mut(&mut self.shared);
        shared.act1 = act1;
        shared.act2 = act2;
        self
    }

    pub fn with_extra_pointwise(mut self, extra: Vec<ExtraPointwise>) -> Result<Self> {
        if extra.len() != self.num_units() {
            return Err(Error::argument(format!(
                "{} extra pointwise layers for {} units",
                extra.len(),
                self.num_units()
            )));
        }
        for e in &extra {
            e.validate(self.out_channels())?;
        }
        self.extra = Some(extra);
        Ok(self)
    }

    pub fn num_units(&self) -> usize {
        self.per_unit_a4.len()
    }

    pub fn num_terms(&self) -> usize {
        self.shared.cores.len()
    }

    pub fn shared(&self) -> &Arc<SharedStage> {
        &self.shared
    }

    pub fn per_unit_a4(&self) -> &[Vec<FactorMatrix>] {
        &self.per_unit_a4
    }

    pub fn extra_pointwise(&self) -> Option<&[ExtraPointwise]> {
        self.extra.as_deref()
    }

    pub fn kernel_size(&self) -> (usize, usize) {
        let s = self.shared.cores[0].shape();
        (s[0], s[1])
    }

    pub fn in_channels(&self) -> usize {
        self.shared.a3[0].rows()
    }

    /// Output channels of one unit's `A4` stage.
    pub fn out_channels(&self) -> usize {
        self.per_unit_a4[0][0].rows()
    }

    fn check_unit(&self, l: usize) -> Result<()> {
        if l >= self.num_units() {
            return Err(Error::argument(format!(
                "unit index {l} out of range for {} units",
                self.num_units()
            )));
        }
        Ok(())
    }

    /// The `(L d4) x d4*` output factor of term `r`, unit blocks stacked.
    pub fn joint_a4(&self, r: usize) -> FactorMatrix {
        let blocks: Vec<FactorMatrix> = self.per_unit_a4.iter().map(|u| u[r].clone()).collect();
        FactorMatrix::vstack(&blocks).expect("uniform blocks")
    }

    /// The decomposition of the concatenated kernel.
    pub fn to_decomposition(&self) -> BlockTermDecomp {
        self.decomposition_with(|r| self.joint_a4(r))
    }

    fn decomposition_with(&self, a4: impl Fn(usize) -> FactorMatrix) -> BlockTermDecomp {
        let terms: Vec<TuckerTerm> = (0..self.num_terms())
            .map(|r| {
                TuckerTerm::new(
                    self.shared.cores[r].clone(),
                    vec![None, None, Some(self.shared.a3[r].clone()), Some(a4(r))],
                )
                .expect("validated at construction")
            })
            .collect();
        let shape = terms[0].full_shape();
        BlockTermDecomp::new(terms, shape).expect("validated at construction")
    }

    /// Unit `l` as a standalone factored unit (factors copied).
    pub fn unit(&self, l: usize) -> Result<FactoredConvUnit> {
        self.check_unit(l)?;
        Ok(FactoredConvUnit::new(
            self.shared.a3.clone(),
            self.shared.cores.clone(),
            self.per_unit_a4[l].clone(),
        )?
        .with_activations(self.shared.act1.clone(), self.shared.act2.clone()))
    }

    /// The dense kernel realized by unit `l`'s factors (extra layer excluded).
    pub fn unit_kernel(&self, l: usize) -> Result<ConvKernel> {
        self.check_unit(l)?;
        ConvKernel::new(
            self.decomposition_with(|r| self.per_unit_a4[l][r].clone())
                .reconstruct(),
        )
    }

    /// Shared pointwise and grouped stages, then unit `l`'s own pointwise
    /// stage and, if present, its extra pointwise layer.
    pub fn unit_forward(&self, l: usize, input: &DenseTensor) -> Result<DenseTensor> {
        self.check_unit(l)?;
        let s = &self.shared;
        let t2 = front_stages(input, &s.a3, &s.cores, &s.act1, &s.act2)?;
        let v = pointwise_conv(&t2, &FactorMatrix::hstack(&self.per_unit_a4[l])?)?;
        match &self.extra {
            Some(extra) => extra[l].apply(&v),
            None => Ok(v),
        }
    }

    /// Stored numbers of one unit's `A4` blocks: `R d4 d4*`.
    pub fn unit_param_count(&self) -> usize {
        self.per_unit_a4[0].iter().map(|f| f.data().len()).sum()
    }

    fn extra_param_count(&self) -> usize {
        self.extra
            .as_ref()
            .map_or(0, |e| e.iter().map(ExtraPointwise::param_count).sum())
    }

    /// Stored numbers with sharing: the shared stage once, `A4` blocks and
    /// extra layers per unit.
    pub fn shared_param_count(&self) -> usize {
        self.shared.param_count()
            + self.num_units() * self.unit_param_count()
            + self.extra_param_count()
    }

    /// Stored numbers if each unit kept its own copy of every factor.
    pub fn independent_param_count(&self) -> usize {
        self.num_units() * (self.shared.param_count() + self.unit_param_count())
            + self.extra_param_count()
    }

    pub fn sharing_counts(&self) -> SharingCounts {
        let shared = self.shared_param_count();
        let independent = self.independent_param_count();
        SharingCounts {
            shared,
            independent,
            ratio: shared as f64 / independent as f64,
        }
    }

    /// Test hook: mutable access to a shared core. Copies the shared stage
    /// first if another group still references it.
    #[doc(hidden)]
    pub fn shared_core_mut(&mut self, r: usize) -> &mut DenseTensor {
        &mut Arc::make_mut(&mut self.shared).cores[r]
    }

    /// Test hook: mutable access to unit `l`'s block of `A4_r`.
    #[doc(hidden)]
    pub fn unit_a4_mut(&mut self, l: usize, r: usize) -> &mut FactorMatrix {
        &mut self.per_unit_a4[l][r]
    }
}

/// Concatenates the kernels along the output-channel mode.
pub fn stack_kernels(kernels: &[ConvKernel]) -> Result<DenseTensor> {
    let first = kernels
        .first()
        .ok_or_else(|| Error::argument("collective compression needs at least one kernel"))?;
    if let Some(l) = kernels
        .iter()
        .position(|k| k.tensor().shape() != first.tensor().shape())
    {
        return Err(Error::argument(format!(
            "kernel {l} has shape {:?}, expected {:?}",
            kernels[l].tensor().shape(),
            first.tensor().shape()
        )));
    }
    let tensors: Vec<DenseTensor> = kernels.iter().map(|k| k.tensor().clone()).collect();
    DenseTensor::concat_mode(&tensors, OUTPUT_MODE)
}

/// Like [`collective_compress`] but returns the whole fit of the stacked tensor.
pub fn collective_fit(
    kernels: &[ConvKernel],
    terms: usize,
    rank_in: usize,
    rank_out: usize,
    cfg: &AlsConfig,
) -> Result<(CollectiveGroup, AlsFit)> {
    let stacked = stack_kernels(kernels)?;
    let s = stacked.shape();
    if rank_in == 0 || rank_in > s[2] || rank_out == 0 || rank_out > s[3] {
        return Err(Error::argument(format!(
            "ranks ({rank_in}, {rank_out}) must lie in 1..={} and 1..={}",
            s[2], s[3]
        )));
    }
    let fit = btd_als(
        &stacked,
        terms,
        &[None, None, Some(rank_in), Some(rank_out)],
        cfg,
    )?;
    let group = CollectiveGroup::from_decomposition(&fit.decomposition, kernels.len())?;
    Ok((group, fit))
}

/// Jointly factors `L` same-shaped kernels and returns the group with the
/// relative reconstruction error of the stacked kernel.
pub fn collective_compress(
    kernels: &[ConvKernel],
    terms: usize,
    rank_in: usize,
    rank_out: usize,
    cfg: &AlsConfig,
) -> Result<(CollectiveGroup, f64)> {
    let (group, fit) = collective_fit(kernels, terms, rank_in, rank_out, cfg)?;
    Ok((group, fit.final_error()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitEntry {
    /// 1-based unit number.
    pub unit: usize,
    /// One file per term, in term order.
    pub a4_files: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub extra_file: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub extra_affine: Option<(Vec<f64>, Vec<f64>)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub extra_act: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitsMeta {
    #[serde(rename = "L")]
    pub units: usize,
    pub sharing_window: usize,
    pub act1: String,
    pub act2: String,
    pub units_files: Vec<UnitEntry>,
    #[serde(default)]
    pub digests: BTreeMap<String, String>,
}

pub fn unit_a4_file(l: usize, r: usize) -> String {
    format!("unit_{}_factor_{}_4.gbt", l + 1, r + 1)
}

pub fn unit_extra_file(l: usize) -> String {
    format!("unit_{}_extra.gbt", l + 1)
}

fn act_name(act: &Activation) -> Result<String> {
    act.name()
        .map(str::to_string)
        .ok_or_else(|| Error::argument("custom activations cannot be archived"))
}

/// Writes the stacked decomposition archive plus per-unit factor files and
/// `units.json`.
pub fn write_collective_archive(
    dir: impl AsRef<Path>,
    group: &CollectiveGroup,
    error_trace: &[f64],
    sharing_window: usize,
) -> Result<(ArchiveMeta, UnitsMeta)> {
    let dir = dir.as_ref();
    let act1 = act_name(&group.shared.act1)?;
    let act2 = act_name(&group.shared.act2)?;
    let mut extra_acts = Vec::new();
    if let Some(extra) = &group.extra {
        for e in extra {
            extra_acts.push(act_name(&e.act)?);
        }
    }
    let meta = archive::write_archive(dir, &group.to_decomposition(), error_trace)?;
    let mut digests = BTreeMap::new();
    let mut entries = Vec::new();
    for (l, blocks) in group.per_unit_a4.iter().enumerate() {
        let mut a4_files = Vec::new();
        for (r, block) in blocks.iter().enumerate() {
            let name = unit_a4_file(l, r);
            write_tracked(dir, &name, &block.to_tensor(), &mut digests)?;
            a4_files.push(name);
        }
        let mut entry = UnitEntry {
            unit: l + 1,
            a4_files,
            extra_file: None,
            extra_affine: None,
            extra_act: None,
        };
        if let Some(extra) = &group.extra {
            let name = unit_extra_file(l);
            write_tracked(dir, &name, &extra[l].weights.to_tensor(), &mut digests)?;
            entry.extra_file = Some(name);
            entry.extra_affine = extra[l].affine.clone();
            entry.extra_act = Some(extra_acts[l].clone());
        }
        entries.push(entry);
    }
    let units = UnitsMeta {
        units: group.num_units(),
        sharing_window,
        act1,
        act2,
        units_files: entries,
        digests,
    };
    write_json(&dir.join(UNITS_FILE), &units)?;
    Ok((meta, units))
}

pub fn is_collective_archive(dir: impl AsRef<Path>) -> bool {
    dir.as_ref().join(UNITS_FILE).is_file()
}

/// Loads a collective archive. The per-unit blocks must stack to the
/// stored output factors of the decomposition.
pub fn read_collective_archive(
    dir: impl AsRef<Path>,
) -> Result<(CollectiveGroup, ArchiveMeta, UnitsMeta)> {
    let dir = dir.as_ref();
    let (decomp, meta) = archive::read_archive(dir)?;
    let units: UnitsMeta = read_json(&dir.join(UNITS_FILE))?;
    let bad = |reason: String| Error::format("collective archive", reason);
    if units.units == 0 || units.units_files.len() != units.units {
        return Err(bad(format!(
            "L = {} but {} unit entries",
            units.units,
            units.units_files.len()
        )));
    }
    let mut per_unit_a4 = Vec::with_capacity(units.units);
    for entry in &units.units_files {
        if entry.a4_files.len() != decomp.num_terms() {
            return Err(bad(format!(
                "unit {} lists {} factor files for {} terms",
                entry.unit,
                entry.a4_files.len(),
                decomp.num_terms()
            )));
        }
        let blocks = entry
            .a4_files
            .iter()
            .map(|name| FactorMatrix::from_tensor(&read_tracked(dir, name, &units.digests)?))
            .collect::<Result<Vec<_>>>()?;
        per_unit_a4.push(blocks);
    }
    let joint = FactoredConvUnit::from_decomposition(&decomp).map_err(|e| bad(e.to_string()))?;
    let group = CollectiveGroup::new(joint.a3().to_vec(), joint.cores().to_vec(), per_unit_a4)
        .map_err(|e| bad(e.to_string()))?;
    for r in 0..group.num_terms() {
        if group.joint_a4(r) != joint.a4()[r] {
            return Err(bad(format!(
                "unit blocks of term {} disagree with the stored output factor",
                r + 1
            )));
        }
    }
    let act1 = Activation::from_name(&units.act1).map_err(|e| bad(e.to_string()))?;
    let act2 = Activation::from_name(&units.act2).map_err(|e| bad(e.to_string()))?;
    let mut group = group.with_activations(act1, act2);
    let extras: Vec<&UnitEntry> = units
        .units_files
        .iter()
        .filter(|e| e.extra_file.is_some())
        .collect();
    if !extras.is_empty() {
        if extras.len() != units.units {
            return Err(bad(
                "extra pointwise layers present for only some units".into()
            ));
        }
        let extra = units
            .units_files
            .iter()
            .map(|e| {
                let name = e.extra_file.as_deref().expect("filtered");
                let weights = FactorMatrix::from_tensor(&read_tracked(dir, name, &units.digests)?)?;
                let act = Activation::from_name(e.extra_act.as_deref().unwrap_or("identity"))?;
                Ok(ExtraPointwise {
                    weights,
                    affine: e.extra_affine.clone(),
                    act,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        group = group
            .with_extra_pointwise(extra)
            .map_err(|e| bad(e.to_string()))?;
    }
    Ok((group, meta, units))
}
