//! Built-in ImageNet networks.

use super::notation::Cardinality;
use super::{resnext_config, ArchSpec, ClassifierSpec, LayerSpec, StageSpec};
use crate::error::{Error, Result};

const RESNET_50: &str = "ResNet-50";
const RESNEXT_50: &str = "ResNeXt-50 (32x4d)";
const RESNEXT_50_N: &str = "ResNeXt-50 (Nx1d)";
const CRU_56: &str = "CRU-Net-56 (32x4d @x14)";
const CRU_116: &str = "CRU-Net-116 (32x4d @x28x14)";
const RESNEXT_101: &str = "ResNeXt-101 (32x4d)";
const RESNEXT_101_WIDE: &str = "ResNeXt-101 (64x4d)";

const NAMES: [&str; 7] = [
    RESNET_50,
    RESNEXT_50,
    RESNEXT_50_N,
    CRU_56,
    CRU_116,
    RESNEXT_101,
    RESNEXT_101_WIDE,
];

const ALIASES: [(&str, &str); 7] = [
    ("resnext50", RESNEXT_50),
    ("crunet56", CRU_56),
    ("crunet116", CRU_116),
    ("resnext101", RESNEXT_101),
    ("resnext101wider", RESNEXT_101_WIDE),
    ("resnext101wider64x4d", RESNEXT_101_WIDE),
    ("resnext50n1d", RESNEXT_50_N),
];

pub fn builtin_names() -> &'static [&'static str] {
    &NAMES
}

fn normalize(name: &str) -> String {
    name.chars()
        .map(|c| if c == '×' { 'x' } else { c })
        .filter(char::is_ascii_alphanumeric)
        .map(|c| c.to_ascii_lowercase())
        .collect()
}

fn stage(name: &str, output: usize, repeat: usize, layers: Vec<LayerSpec>) -> StageSpec {
    StageSpec {
        name: name.into(),
        output,
        repeat,
        sharing_window: 0,
        pool: None,
        residual: true,
        layers,
    }
}

fn stem() -> StageSpec {
    StageSpec {
        residual: false,
        ..stage("conv1", 112, 1, vec![LayerSpec::spatial(7, 64).stride(2)])
    }
}

/// `[1x1 width, 3x3 width / groups, 1x1 out]`, stride on the 3x3.
fn bottleneck(width: usize, groups: usize, out: usize, stride: usize) -> Vec<LayerSpec> {
    let spatial = if groups == 1 {
        LayerSpec::spatial(3, width)
    } else {
        LayerSpec::grouped(3, width, groups)
    };
    vec![
        LayerSpec::pointwise(width),
        spatial.stride(stride),
        LayerSpec::pointwise(out),
    ]
}

/// Like [`bottleneck`] with an extra 1x1 of the bottleneck width before the
/// output 1x1; the first two layers are shared within windows of six.
fn collective(width: usize, groups: usize, out: usize, stride: usize) -> Vec<LayerSpec> {
    vec![
        LayerSpec::pointwise(width),
        LayerSpec::grouped(3, width, groups).stride(stride),
        LayerSpec::pointwise(width),
        LayerSpec::pointwise(out),
    ]
}

fn shared(mut s: StageSpec) -> StageSpec {
    s.sharing_window = 6;
    s
}

fn net(name: &str, stages: [StageSpec; 4]) -> ArchSpec {
    let mut all = vec![stem()];
    all.extend(stages);
    all[1].pool = Some(LayerSpec::pool(3, 2));
    ArchSpec {
        name: name.into(),
        in_channels: 3,
        stages: all,
        classifier: Some(ClassifierSpec { classes: 1000 }),
    }
}

fn build(canonical: &str) -> ArchSpec {
    match canonical {
        RESNET_50 => net(
            RESNET_50,
            [
                stage("conv2", 56, 3, bottleneck(64, 1, 256, 1)),
                stage("conv3", 28, 4, bottleneck(128, 1, 512, 2)),
                stage("conv4", 14, 6, bottleneck(256, 1, 1024, 2)),
                stage("conv5", 7, 3, bottleneck(512, 1, 2048, 2)),
            ],
        ),
        RESNEXT_50 => net(
            RESNEXT_50,
            [
                stage("conv2", 56, 3, bottleneck(128, 32, 256, 1)),
                stage("conv3", 28, 4, bottleneck(256, 32, 512, 2)),
                stage("conv4", 14, 6, bottleneck(512, 32, 1024, 2)),
                stage("conv5", 7, 3, bottleneck(1024, 32, 2048, 2)),
            ],
        ),
        RESNEXT_50_N => net(
            RESNEXT_50_N,
            [
                stage("conv2", 56, 3, bottleneck(136, 136, 256, 1)),
                stage("conv3", 28, 4, bottleneck(272, 272, 512, 2)),
                stage("conv4", 14, 6, bottleneck(544, 544, 1024, 2)),
                stage("conv5", 7, 3, bottleneck(1088, 1088, 2048, 2)),
            ],
        ),
        CRU_56 => net(
            CRU_56,
            [
                stage("conv2", 56, 3, bottleneck(128, 32, 256, 1)),
                stage("conv3", 28, 4, bottleneck(256, 32, 512, 2)),
                shared(stage("conv4", 14, 6, collective(640, 640, 1024, 2))),
                stage("conv5", 7, 3, bottleneck(1024, 32, 2048, 2)),
            ],
        ),
        CRU_116 => net(
            CRU_116,
            [
                stage("conv2", 56, 3, bottleneck(128, 32, 256, 1)),
                shared(stage("conv3", 28, 6, collective(352, 352, 512, 2))),
                shared(stage("conv4", 14, 18, collective(704, 704, 1024, 2))),
                stage("conv5", 7, 3, bottleneck(1024, 32, 2048, 2)),
            ],
        ),
        RESNEXT_101 => net(
            RESNEXT_101,
            [
                stage("conv2", 56, 3, bottleneck(128, 32, 256, 1)),
                stage("conv3", 28, 4, bottleneck(256, 32, 512, 2)),
                stage("conv4", 14, 23, bottleneck(512, 32, 1024, 2)),
                stage("conv5", 7, 3, bottleneck(1024, 32, 2048, 2)),
            ],
        ),
        RESNEXT_101_WIDE => net(
            RESNEXT_101_WIDE,
            [
                stage("conv2", 56, 3, bottleneck(256, 64, 256, 1)),
                stage("conv3", 28, 4, bottleneck(512, 64, 512, 2)),
                stage("conv4", 14, 23, bottleneck(1024, 64, 1024, 2)),
                stage("conv5", 7, 3, bottleneck(2048, 64, 2048, 2)),
            ],
        ),
        _ => unreachable!("canonical names only"),
    }
}

/// Looks up a built-in network. Case, spacing, punctuation and `x`/`×`
/// are ignored when matching names.
pub fn builtin(name: &str) -> Result<ArchSpec> {
    let key = normalize(name);
    let canonical = NAMES
        .iter()
        .copied()
        .find(|n| normalize(n) == key)
        .or_else(|| ALIASES.iter().find(|(a, _)| *a == key).map(|(_, n)| *n))
        .ok_or_else(|| Error::UnknownArch {
            name: name.to_string(),
            known: NAMES.iter().map(|n| n.to_string()).collect(),
        })?;
    Ok(build(canonical))
}

/// A four-stage ResNeXt with the given depth profile, built from
/// [`resnext_config`]. `base_width` is the conv2 bottleneck width; it
/// doubles with every stage, as do the shortcut widths from 256.
pub fn resnext_spec(
    name: &str,
    repeats: [usize; 4],
    cardinality: Cardinality,
    base_width: usize,
) -> Result<ArchSpec> {
    let outputs = [56, 28, 14, 7];
    let mut stages = Vec::with_capacity(4);
    for i in 0..4 {
        let width = base_width << i;
        let r = match cardinality {
            Cardinality::Fixed(r) => r,
            Cardinality::PerLayer => width,
        };
        let cfg = resnext_config(r, width, 256 << i)?;
        let layers = cfg.unit_layers(3, if i == 0 { 1 } else { 2 });
        stages.push(stage(
            &format!("conv{}", i + 2),
            outputs[i],
            repeats[i],
            layers,
        ));
    }
    let stages: [StageSpec; 4] = stages.try_into().expect("four stages");
    Ok(net(name, stages))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lookup_is_forgiving() {
        for n in [
            "resnet50",
            "ResNeXt-50 (32×4d)",
            "cru-net-116",
            "CRU_Net_56 (32x4d @x14)",
            "resnext-101 wider",
        ] {
            assert!(builtin(n).is_ok(), "{n}");
        }
        for n in NAMES {
            assert_eq!(builtin(n).unwrap().name, n);
        }
        match builtin("nonsense") {
            Err(Error::UnknownArch { known, .. }) => {
                assert!(known.iter().any(|k| k == "ResNet-50"))
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn builtins_validate() {
        for n in NAMES {
            builtin(n).unwrap().validate().unwrap();
        }
    }

    #[test]
    fn table_columns() {
        let r50 = builtin(RESNET_50).unwrap();
        let c2 = r50.stage("conv2").unwrap();
        assert_eq!(c2.repeat, 3);
        assert_eq!(
            c2.layers
                .iter()
                .map(|l| (l.k, l.out_channels, l.groups))
                .collect::<Vec<_>>(),
            vec![(1, 64, 1), (3, 64, 1), (1, 256, 1)]
        );
        let cru = builtin(CRU_56).unwrap();
        let c4 = cru.stage("conv4").unwrap();
        assert_eq!((c4.repeat, c4.sharing_window), (6, 6));
        assert_eq!(
            c4.layers
                .iter()
                .map(|l| (l.k, l.out_channels, l.groups))
                .collect::<Vec<_>>(),
            vec![(1, 640, 1), (3, 640, 640), (1, 640, 1), (1, 1024, 1)]
        );
        let c4 = builtin(CRU_116).unwrap().stage("conv4").unwrap().clone();
        assert_eq!(
            (c4.repeat, c4.sharing_window, c4.layers[0].out_channels),
            (18, 6, 704)
        );
    }

    #[test]
    fn config_path_matches_transcription() {
        let cases = [
            (RESNET_50, [3, 4, 6, 3], Cardinality::Fixed(1), 64),
            (RESNEXT_50, [3, 4, 6, 3], Cardinality::Fixed(32), 128),
            (RESNEXT_50_N, [3, 4, 6, 3], Cardinality::PerLayer, 136),
            (RESNEXT_101, [3, 4, 23, 3], Cardinality::Fixed(32), 128),
            (RESNEXT_101_WIDE, [3, 4, 23, 3], Cardinality::Fixed(64), 256),
        ];
        for (name, reps, card, base) in cases {
            assert_eq!(
                resnext_spec(name, reps, card, base).unwrap(),
                builtin(name).unwrap(),
                "{name}"
            );
        }
    }
}
