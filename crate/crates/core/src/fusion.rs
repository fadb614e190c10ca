//! Size-preserving fusion of per-modality conv5-analog feature maps.
//!
//! * `F_E = max(F_I + F_Ec, F_I + F_Es, F_I + F_Ep)`
//! * `F_O = F_I + F_O`
//! * `F_G = max(F_I, F_G3, F_G5)`
//!
//! Max fusions route their gradient to the lowest-index winner on ties.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{FeatureMap, ShapeError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FusionError {
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error("fusion needs at least one input map")]
    Empty,
    #[error("fusion mode '{mode}' takes {expected} maps, got {got}")]
    Arity {
        mode: FusionMode,
        expected: usize,
        got: usize,
    },
    #[error("unknown fusion mode '{0}' (expected edges, flow, scale or none)")]
    UnknownMode(String),
}

/// Input representation feeding one backbone column.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Intensity,
    Canny,
    Sobel,
    Prewitt,
    FlowOrientation,
    Gauss3,
    Gauss5,
}

impl Modality {
    pub fn name(self) -> &'static str {
        match self {
            Self::Intensity => "intensity",
            Self::Canny => "canny",
            Self::Sobel => "sobel",
            Self::Prewitt => "prewitt",
            Self::FlowOrientation => "flow",
            Self::Gauss3 => "gauss3",
            Self::Gauss5 => "gauss5",
        }
    }
}

/// Which fusion (if any) combines the modality columns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    /// Intensity column only.
    None,
    Edges,
    Flow,
    Scale,
}

impl FusionMode {
    pub const ALL: [FusionMode; 4] = [Self::None, Self::Edges, Self::Flow, Self::Scale];

    /// Columns in the order [`fuse`] expects them.
    pub fn modalities(self) -> &'static [Modality] {
        match self {
            Self::None => &[Modality::Intensity],
            Self::Edges => &[Modality::Intensity, Modality::Canny, Modality::Sobel, Modality::Prewitt],
            Self::Flow => &[Modality::Intensity, Modality::FlowOrientation],
            Self::Scale => &[Modality::Intensity, Modality::Gauss3, Modality::Gauss5],
        }
    }

    pub fn tag(self) -> Option<FusionTag> {
        match self {
            Self::None => None,
            Self::Edges => Some(FusionTag::FE),
            Self::Flow => Some(FusionTag::FO),
            Self::Scale => Some(FusionTag::FG),
        }
    }
}

impl FromStr for FusionMode {
    type Err = FusionError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(Self::None),
            "edges" => Ok(Self::Edges),
            "flow" => Ok(Self::Flow),
            "scale" => Ok(Self::Scale),
            _ => Err(FusionError::UnknownMode(s.to_string())),
        }
    }
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::None => "none",
            Self::Edges => "edges",
            Self::Flow => "flow",
            Self::Scale => "scale",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FusionTag {
    #[serde(rename = "F_E")]
    FE,
    #[serde(rename = "F_O")]
    FO,
    #[serde(rename = "F_G")]
    FG,
}

impl fmt::Display for FusionTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::FE => "F_E",
            Self::FO => "F_O",
            Self::FG => "F_G",
        })
    }
}

/// A fused map with its provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedMap {
    pub map: FeatureMap,
    pub tag: FusionTag,
}

fn check_all_same(maps: &[&FeatureMap]) -> Result<(), FusionError> {
    let first = maps.first().ok_or(FusionError::Empty)?;
    for m in &maps[1..] {
        first.check_same_shape(m)?;
    }
    Ok(())
}

pub fn fuse_sum(a: &FeatureMap, b: &FeatureMap) -> Result<FeatureMap, FusionError> {
    let mut out = a.clone();
    out.add_assign(b)?;
    Ok(out)
}

pub fn fuse_max(maps: &[&FeatureMap]) -> Result<FeatureMap, FusionError> {
    Ok(max_with_route(maps)?.0)
}

/// Elementwise max plus the winning input index per element (lowest on ties).
fn max_with_route(maps: &[&FeatureMap]) -> Result<(FeatureMap, Vec<u8>), FusionError> {
    check_all_same(maps)?;
    let mut out = maps[0].clone();
    let mut route = vec![0u8; out.len()];
    for (k, m) in maps.iter().enumerate().skip(1) {
        for ((o, r), &v) in out.data_mut().iter_mut().zip(route.iter_mut()).zip(m.data()) {
            if v > *o {
                *o = v;
                *r = k as u8;
            }
        }
    }
    Ok((out, route))
}

pub fn fuse_edges(
    f_i: &FeatureMap,
    f_ec: &FeatureMap,
    f_es: &FeatureMap,
    f_ep: &FeatureMap,
) -> Result<FusedMap, FusionError> {
    let (map, _) = fuse(FusionMode::Edges, &[f_i.clone(), f_ec.clone(), f_es.clone(), f_ep.clone()])?;
    Ok(FusedMap { map, tag: FusionTag::FE })
}

pub fn fuse_flow(f_i: &FeatureMap, f_o: &FeatureMap) -> Result<FusedMap, FusionError> {
    Ok(FusedMap {
        map: fuse_sum(f_i, f_o)?,
        tag: FusionTag::FO,
    })
}

pub fn fuse_scale(f_i: &FeatureMap, f_g3: &FeatureMap, f_g5: &FeatureMap) -> Result<FusedMap, FusionError> {
    Ok(FusedMap {
        map: fuse_max(&[f_i, f_g3, f_g5])?,
        tag: FusionTag::FG,
    })
}

/// Gradient routing recorded by [`fuse`].
#[derive(Debug, Clone)]
pub struct FusionTrace {
    mode: FusionMode,
    /// For max fusions: the winning operand per element.
    route: Vec<u8>,
}

impl FusionTrace {
    pub fn route(&self) -> &[u8] {
        &self.route
    }

    /// Splits the gradient of the fused map back onto the input columns.
    pub fn backward(&self, grad: &FeatureMap) -> Vec<FeatureMap> {
        let (c, h, w) = grad.shape();
        match self.mode {
            FusionMode::None => vec![grad.clone()],
            FusionMode::Flow => vec![grad.clone(), grad.clone()],
            FusionMode::Edges => {
                let mut out = vec![grad.clone()];
                out.extend((0..3).map(|_| FeatureMap::zeros(c, h, w)));
                for (i, (&g, &r)) in grad.data().iter().zip(&self.route).enumerate() {
                    out[1 + r as usize].data_mut()[i] = g;
                }
                out
            }
            FusionMode::Scale => {
                let mut out: Vec<FeatureMap> = (0..3).map(|_| FeatureMap::zeros(c, h, w)).collect();
                for (i, (&g, &r)) in grad.data().iter().zip(&self.route).enumerate() {
                    out[r as usize].data_mut()[i] = g;
                }
                out
            }
        }
    }
}

/// Fuses column outputs given in [`FusionMode::modalities`] order.
pub fn fuse(mode: FusionMode, maps: &[FeatureMap]) -> Result<(FeatureMap, FusionTrace), FusionError> {
    let expected = mode.modalities().len();
    if maps.len() != expected {
        return Err(FusionError::Arity {
            mode,
            expected,
            got: maps.len(),
        });
    }
    match mode {
        FusionMode::None => Ok((maps[0].clone(), FusionTrace { mode, route: Vec::new() })),
        FusionMode::Flow => Ok((fuse_sum(&maps[0], &maps[1])?, FusionTrace { mode, route: Vec::new() })),
        FusionMode::Edges => {
            let sums = maps[1..]
                .iter()
                .map(|e| fuse_sum(&maps[0], e))
                .collect::<Result<Vec<_>, _>>()?;
            let refs: Vec<&FeatureMap> = sums.iter().collect();
            let (map, route) = max_with_route(&refs)?;
            Ok((map, FusionTrace { mode, route }))
        }
        FusionMode::Scale => {
            let refs: Vec<&FeatureMap> = maps.iter().collect();
            let (map, route) = max_with_route(&refs)?;
            Ok((map, FusionTrace { mode, route }))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(vals: &[f64]) -> FeatureMap {
        FeatureMap::from_vec(1, 1, vals.len(), vals.to_vec()).unwrap()
    }

    fn m22(vals: [f64; 4]) -> FeatureMap {
        FeatureMap::from_vec(1, 2, 2, vals.to_vec()).unwrap()
    }

    #[test]
    fn sum_examples() {
        let a = m22([1.0, 2.0, 3.0, 4.0]);
        assert_eq!(fuse_sum(&a, &FeatureMap::zeros(1, 2, 2)).unwrap(), a);
        assert!(fuse_sum(&a, &a.scaled(-1.0)).unwrap().data().iter().all(|&v| v == 0.0));
        assert_eq!(
            fuse_sum(&a, &m22([10.0, 20.0, 30.0, 40.0])).unwrap(),
            m22([11.0, 22.0, 33.0, 44.0])
        );
    }

    #[test]
    fn max_examples() {
        let a = m22([1.0, 5.0, 2.0, 0.0]);
        assert_eq!(fuse_max(&[&a]).unwrap(), a);
        assert_eq!(fuse_max(&[&a, &a, &a]).unwrap(), a);
        assert_eq!(
            fuse_max(&[&a, &m22([4.0, 3.0, 2.0, 7.0])]).unwrap(),
            m22([4.0, 5.0, 2.0, 7.0])
        );
        assert!(matches!(fuse_max(&[]), Err(FusionError::Empty)));
        assert!(matches!(
            fuse_max(&[&a, &m(&[1.0])]),
            Err(FusionError::Shape(_))
        ));
    }

    #[test]
    fn edge_fusion_examples() {
        let fe = fuse_edges(&m(&[1.0]), &m(&[2.0]), &m(&[5.0]), &m(&[3.0])).unwrap();
        // max(1+2, 1+5, 1+3)
        assert_eq!(fe.map, m(&[6.0]));
        assert_eq!(fe.tag, FusionTag::FE);
        let fi = m(&[0.5, -2.0, 3.0]);
        let z = FeatureMap::zeros(1, 1, 3);
        assert_eq!(fuse_edges(&fi, &z, &z, &z).unwrap().map, fi);
        let (a, b, c) = (m(&[1.0, 0.0, 4.0]), m(&[2.0, -1.0, 0.0]), m(&[0.0, 3.0, 1.0]));
        assert_eq!(fuse_edges(&z, &a, &b, &c).unwrap().map, m(&[2.0, 3.0, 4.0]));
    }

    #[test]
    fn flow_and_scale_examples() {
        let fi = m(&[1.0, -1.0]);
        assert_eq!(fuse_flow(&fi, &FeatureMap::zeros(1, 1, 2)).unwrap().map, fi);
        assert_eq!(fuse_flow(&fi, &fi).unwrap().map, fi.scaled(2.0));
        assert_eq!(fuse_flow(&fi, &m(&[0.5, 0.5])).unwrap().map, m(&[1.5, -0.5]));
        let g = fuse_scale(&m(&[1.0, 9.0]), &m(&[4.0, 2.0]), &m(&[3.0, 3.0])).unwrap();
        assert_eq!(g.map, m(&[4.0, 9.0]));
        assert_eq!(g.tag, FusionTag::FG);
        assert_eq!(fuse_scale(&fi, &fi, &fi).unwrap().map, fi);
    }

    #[test]
    fn arity_enforced() {
        let a = m(&[1.0]);
        assert!(matches!(
            fuse(FusionMode::Scale, &[a.clone(), a]),
            Err(FusionError::Arity { expected: 3, got: 2, .. })
        ));
    }

    #[test]
    fn ties_route_to_lowest_index() {
        let a = m(&[2.0]);
        let (_, trace) = fuse(FusionMode::Scale, &[a.clone(), a.clone(), a]).unwrap();
        let g = trace.backward(&m(&[1.0]));
        assert_eq!(g[0], m(&[1.0]));
        assert_eq!(g[1], m(&[0.0]));
        assert_eq!(g[2], m(&[0.0]));
    }

    #[test]
    fn edge_backward_passes_intensity_and_winner() {
        let (_, trace) = fuse(
            FusionMode::Edges,
            &[m(&[1.0, 1.0]), m(&[0.0, 3.0]), m(&[2.0, 0.0]), m(&[1.0, 1.0])],
        )
        .unwrap();
        let g = trace.backward(&m(&[1.0, 2.0]));
        assert_eq!(g[0], m(&[1.0, 2.0]));
        assert_eq!(g[1], m(&[0.0, 2.0]));
        assert_eq!(g[2], m(&[1.0, 0.0]));
        assert_eq!(g[3], m(&[0.0, 0.0]));
    }

    #[test]
    fn mode_parsing() {
        for mode in FusionMode::ALL {
            assert_eq!(mode.to_string().parse::<FusionMode>().unwrap(), mode);
        }
        assert!("concat".parse::<FusionMode>().is_err());
    }
}
