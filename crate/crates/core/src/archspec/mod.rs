//! Residual network descriptors and parameter / FLOP / model size counting.
//!
//! A network is a list of stages. Each stage repeats one unit `repeat`
//! times; layer strides apply to the first unit only. Residual stages add a
//! 1x1 projection shortcut whenever a unit changes width or resolution.
//!
//! In stages with a sharing window `W > 0` and at least `W` units, units are
//! grouped by position into windows of `W`. The stage's first unit (the one
//! that changes width and resolution) stays unshared; the remaining members
//! of each window store the weights of their first two layers once.

mod builtin;
mod notation;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use builtin::{builtin, builtin_names, resnext_spec};
pub use notation::{parse_notation, Cardinality, Notation};

/// Number of leading layers per unit that are shared inside a window.
pub const SHARED_LAYERS: usize = 2;

pub const DEFAULT_INPUT_SIZE: usize = 224;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Pointwise,
    Spatial,
    Grouped,
    Pool,
    Fc,
}

fn one() -> usize {
    1
}

fn yes() -> bool {
    true
}

fn three() -> usize {
    3
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    #[serde(default)]
    pub out_channels: usize,
    #[serde(default = "one")]
    pub groups: usize,
    #[serde(default = "one")]
    pub k: usize,
    #[serde(default = "one")]
    pub stride: usize,
}

impl LayerSpec {
    pub fn pointwise(out: usize) -> Self {
        Self {
            kind: LayerKind::Pointwise,
            out_channels: out,
            groups: 1,
            k: 1,
            stride: 1,
        }
    }

    pub fn spatial(k: usize, out: usize) -> Self {
        Self {
            kind: LayerKind::Spatial,
            k,
            ..Self::pointwise(out)
        }
    }

    pub fn grouped(k: usize, out: usize, groups: usize) -> Self {
        Self {
            kind: LayerKind::Grouped,
            k,
            groups,
            ..Self::pointwise(out)
        }
    }

    pub fn pool(k: usize, stride: usize) -> Self {
        Self {
            kind: LayerKind::Pool,
            out_channels: 0,
            groups: 1,
            k,
            stride,
        }
    }

    pub fn stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    fn kernel(&self) -> usize {
        match self.kind {
            LayerKind::Pointwise | LayerKind::Fc => 1,
            _ => self.k,
        }
    }

    fn is_conv(&self) -> bool {
        matches!(
            self.kind,
            LayerKind::Pointwise | LayerKind::Spatial | LayerKind::Grouped
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSpec {
    pub name: String,
    /// Declared output resolution at the default input size.
    pub output: usize,
    pub repeat: usize,
    /// 0 disables sharing.
    #[serde(default)]
    pub sharing_window: usize,
    /// Applied once before the first unit.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pool: Option<LayerSpec>,
    #[serde(default = "yes")]
    pub residual: bool,
    pub layers: Vec<LayerSpec>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassifierSpec {
    pub classes: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub name: String,
    #[serde(default = "three")]
    pub in_channels: usize,
    pub stages: Vec<StageSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classifier: Option<ClassifierSpec>,
}

impl ArchSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Structural checks: positive sizes, group divisibility, odd kernels,
    /// and declared output sizes matching a walk at the default input size.
    pub fn validate(&self) -> Result<()> {
        count(self, DEFAULT_INPUT_SIZE, &CountConvention::default()).map(|_| ())
    }

    pub fn stage(&self, name: &str) -> Option<&StageSpec> {
        self.stages.iter().find(|s| s.name == name)
    }

    /// Copy with every sharing window removed.
    pub fn without_sharing(&self) -> Self {
        let mut s = self.clone();
        for st in &mut s.stages {
            st.sharing_window = 0;
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FlopConvention {
    /// One multiply-accumulate counts as one FLOP.
    #[default]
    Fma,
    /// Multiplies and adds counted separately.
    Madd2,
}

impl FlopConvention {
    pub fn factor(self) -> u64 {
        match self {
            Self::Fma => 1,
            Self::Madd2 => 2,
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "fma" => Ok(Self::Fma),
            "madd2" => Ok(Self::Madd2),
            other => Err(Error::argument(format!(
                "unknown FLOP convention {other:?} (expected fma or madd2)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountConvention {
    pub flops: FlopConvention,
    /// Two affine numbers per normalized channel after every conv.
    pub include_norm: bool,
    pub include_fc_bias: bool,
    pub sharing: bool,
    /// Conv biases are never counted; recorded for reports.
    pub conv_bias: bool,
    pub projection_shortcuts: bool,
}

impl Default for CountConvention {
    fn default() -> Self {
        Self {
            flops: FlopConvention::Fma,
            include_norm: true,
            include_fc_bias: true,
            sharing: true,
            conv_bias: false,
            projection_shortcuts: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowCount {
    /// 0-based window index within the stage.
    pub window: usize,
    /// 1-based unit numbers sharing the window's weights.
    pub units: Vec<usize>,
    /// Conv weights of the shared layers of one unit.
    pub shared_params: u64,
    /// `(members - 1) * shared_params`.
    pub saved_params: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageCount {
    pub name: String,
    pub output: usize,
    pub repeat: usize,
    pub params: u64,
    pub flops: u64,
    pub windows: Vec<WindowCount>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountReport {
    pub name: String,
    pub input_size: usize,
    pub params: u64,
    pub flops: u64,
    pub model_size_mb: f64,
    pub model_size_mb_exact: f64,
    pub saved_params: u64,
    pub classifier_params: u64,
    pub classifier_flops: u64,
    pub stages: Vec<StageCount>,
    pub convention: CountConvention,
}

fn conv_out(size: usize, k: usize, stride: usize) -> usize {
    (size + 2 * ((k - 1) / 2) - k) / stride + 1
}

fn bad_spec(what: impl Into<String>) -> Error {
    Error::argument(what.into())
}

fn check_layer(stage: &str, layer: &LayerSpec, cin: usize) -> Result<()> {
    if layer.stride == 0 {
        return Err(bad_spec(format!("stage {stage}: stride must be positive")));
    }
    if layer.kind == LayerKind::Pool {
        if layer.k == 0 || layer.k.is_multiple_of(2) {
            return Err(bad_spec(format!("stage {stage}: pool size must be odd")));
        }
        return Ok(());
    }
    if layer.out_channels == 0 {
        return Err(bad_spec(format!(
            "stage {stage}: out_channels must be positive"
        )));
    }
    if layer.is_conv() {
        let k = layer.kernel();
        if k == 0 || k.is_multiple_of(2) {
            return Err(bad_spec(format!(
                "stage {stage}: kernel size {k} must be odd"
            )));
        }
        let g = layer.groups;
        if layer.kind != LayerKind::Grouped && g != 1 {
            return Err(bad_spec(format!(
                "stage {stage}: only grouped layers take groups > 1"
            )));
        }
        if g == 0 || !cin.is_multiple_of(g) || !layer.out_channels.is_multiple_of(g) {
            return Err(bad_spec(format!(
                "stage {stage}: {cin} -> {} channels not divisible into {g} groups",
                layer.out_channels
            )));
        }
    }
    Ok(())
}

/// Units of a stage that share weights, grouped by window. The first unit
/// never shares; windows with fewer than two members are dropped.
pub fn sharing_windows(repeat: usize, window: usize) -> Vec<Vec<usize>> {
    if window == 0 || repeat < window {
        return Vec::new();
    }
    (0..repeat)
        .step_by(window)
        .map(|start| (start.max(1)..(start + window).min(repeat)).collect::<Vec<_>>())
        .filter(|members| members.len() >= 2)
        .collect()
}

/// Walks the network and tallies parameters, FLOPs and savings.
pub fn count(spec: &ArchSpec, input_size: usize, conv: &CountConvention) -> Result<CountReport> {
    if spec.stages.is_empty() {
        return Err(bad_spec("architecture has no stages"));
    }
    if spec.in_channels == 0 || input_size == 0 {
        return Err(bad_spec("input channels and size must be positive"));
    }
    let fmul = conv.flops.factor();
    let norm = |out: usize| if conv.include_norm { 2 * out as u64 } else { 0 };
    let mut size = input_size;
    let mut c = spec.in_channels;
    let mut stages = Vec::with_capacity(spec.stages.len());
    let mut total_params = 0u64;
    let mut total_flops = 0u64;
    let mut saved = 0u64;
    for st in &spec.stages {
        if st.repeat == 0 || st.layers.is_empty() {
            return Err(bad_spec(format!(
                "stage {}: needs at least one unit and layer",
                st.name
            )));
        }
        let mut params = 0u64;
        let mut flops = 0u64;
        if let Some(pool) = &st.pool {
            check_layer(&st.name, pool, c)?;
            size = conv_out(size, pool.k, pool.stride);
        }
        let windows = if conv.sharing {
            sharing_windows(st.repeat, st.sharing_window)
        } else {
            Vec::new()
        };
        let mut unit_shared = 0u64;
        for u in 0..st.repeat {
            let (unit_in, size_in) = (c, size);
            // members of a window other than its first store no shared weights
            let borrows = windows.iter().any(|w| w[0] != u && w.contains(&u));
            let mut shared_here = 0u64;
            for (li, layer) in st.layers.iter().enumerate() {
                check_layer(&st.name, layer, c)?;
                let stride = if u == 0 { layer.stride } else { 1 };
                match layer.kind {
                    LayerKind::Pool => size = conv_out(size, layer.k, stride),
                    LayerKind::Fc => {
                        let w = (c * layer.out_channels) as u64;
                        let b = if conv.include_fc_bias {
                            layer.out_channels as u64
                        } else {
                            0
                        };
                        params += w + b;
                        flops += fmul * w;
                        c = layer.out_channels;
                        size = 1;
                    }
                    _ => {
                        let k = layer.kernel();
                        let weights = (k * k * (c / layer.groups) * layer.out_channels) as u64;
                        size = conv_out(size, k, stride);
                        flops += fmul * (size * size) as u64 * weights;
                        if li < SHARED_LAYERS {
                            shared_here += weights;
                        }
                        if !(borrows && li < SHARED_LAYERS) {
                            params += weights;
                        }
                        params += norm(layer.out_channels);
                        c = layer.out_channels;
                    }
                }
            }
            if u == 1 {
                unit_shared = shared_here;
            }
            if st.residual && conv.projection_shortcuts && (unit_in != c || size_in != size) {
                let w = (unit_in * c) as u64;
                params += w + norm(c);
                flops += fmul * (size * size) as u64 * w;
            }
        }
        let windows: Vec<WindowCount> = windows
            .into_iter()
            .enumerate()
            .map(|(i, members)| {
                let saved_params = (members.len() as u64 - 1) * unit_shared;
                WindowCount {
                    window: i,
                    units: members.iter().map(|u| u + 1).collect(),
                    shared_params: unit_shared,
                    saved_params,
                }
            })
            .collect();
        saved += windows.iter().map(|w| w.saved_params).sum::<u64>();
        if input_size == DEFAULT_INPUT_SIZE && size != st.output {
            return Err(bad_spec(format!(
                "stage {}: declared output {} but the layers produce {size}",
                st.name, st.output
            )));
        }
        total_params += params;
        total_flops += flops;
        stages.push(StageCount {
            name: st.name.clone(),
            output: size,
            repeat: st.repeat,
            params,
            flops,
            windows,
        });
    }
    let (classifier_params, classifier_flops) = match &spec.classifier {
        Some(cl) => {
            let w = (c * cl.classes) as u64;
            let b = if conv.include_fc_bias {
                cl.classes as u64
            } else {
                0
            };
            (w + b, fmul * w)
        }
        None => (0, 0),
    };
    total_params += classifier_params;
    total_flops += classifier_flops;
    let exact = params_to_mb(total_params);
    Ok(CountReport {
        name: spec.name.clone(),
        input_size,
        params: total_params,
        flops: total_flops,
        model_size_mb: exact.round(),
        model_size_mb_exact: exact,
        saved_params: saved,
        classifier_params,
        classifier_flops,
        stages,
        convention: *conv,
    })
}

/// 32-bit storage in MiB.
pub fn params_to_mb(params: u64) -> f64 {
    params as f64 * 4.0 / (1u64 << 20) as f64
}

pub fn param_count(spec: &ArchSpec, conv: &CountConvention) -> Result<u64> {
    Ok(count(spec, DEFAULT_INPUT_SIZE, conv)?.params)
}

pub fn flop_count(spec: &ArchSpec, input_size: usize, conv: &CountConvention) -> Result<u64> {
    Ok(count(spec, input_size, conv)?.flops)
}

/// Parameter storage rounded to whole MiB.
pub fn model_size_mb(spec: &ArchSpec, conv: &CountConvention) -> Result<f64> {
    Ok(count(spec, DEFAULT_INPUT_SIZE, conv)?.model_size_mb)
}

/// Block term ranks of an aggregated residual transform.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BtdConfig {
    #[serde(rename = "R")]
    pub terms: usize,
    pub d3: usize,
    pub d4: usize,
    pub rank_in: usize,
    pub rank_out: usize,
}

/// `cardinality` paths of width `bottleneck_width / cardinality` between a
/// `shortcut_width`-channel input and output.
pub fn resnext_config(
    cardinality: usize,
    bottleneck_width: usize,
    shortcut_width: usize,
) -> Result<BtdConfig> {
    if cardinality == 0 || bottleneck_width == 0 || shortcut_width == 0 {
        return Err(Error::argument("cardinality and widths must be positive"));
    }
    if !bottleneck_width.is_multiple_of(cardinality) {
        return Err(Error::argument(format!(
            "bottleneck width {bottleneck_width} is not divisible by cardinality {cardinality}"
        )));
    }
    let d = bottleneck_width / cardinality;
    Ok(BtdConfig {
        terms: cardinality,
        d3: shortcut_width,
        d4: shortcut_width,
        rank_in: d,
        rank_out: d,
    })
}

impl BtdConfig {
    /// The three-layer unit realizing this configuration.
    pub fn unit_layers(&self, k: usize, stride: usize) -> Vec<LayerSpec> {
        let width = self.terms * self.rank_in;
        let spatial = if self.terms == 1 {
            LayerSpec::spatial(k, self.terms * self.rank_out)
        } else {
            LayerSpec::grouped(k, self.terms * self.rank_out, self.terms)
        };
        vec![
            LayerSpec::pointwise(width),
            spatial.stride(stride),
            LayerSpec::pointwise(self.d4),
        ]
    }
}
