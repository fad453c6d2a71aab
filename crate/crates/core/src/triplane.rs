//! Tri-plane features: three axis-aligned `[C, R, R]` grids over [−1, 1]²,
//! and coordinate deformation by offset planes.

use metaux_tensor::nn::ParamSet;
use metaux_tensor::{Result, Tensor, TensorError};

pub const PLANE_NAMES: [&str; 3] = ["plane_xy", "plane_yz", "plane_xz"];
/// Coordinate pairs projected onto each plane, as (u, v) column indices.
const PROJECTIONS: [(usize, usize); 3] = [(0, 1), (1, 2), (0, 2)];

#[derive(Clone, Debug)]
pub struct TriPlane {
    pub planes: [Tensor; 3],
}

impl TriPlane {
    pub fn new(xy: Tensor, yz: Tensor, xz: Tensor) -> Result<Self> {
        for p in [&yz, &xz] {
            if p.shape() != xy.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "triplane",
                    lhs: xy.shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
        }
        if xy.rank() != 3 || xy.shape()[1] != xy.shape()[2] {
            return Err(TensorError::Invalid {
                op: "triplane",
                msg: format!("planes must be [C, R, R], got {:?}", xy.shape()),
            });
        }
        Ok(TriPlane { planes: [xy, yz, xz] })
    }

    /// Splits a stacked `[3·C, R, R]` (or `[1, 3·C, R, R]`) tensor.
    pub fn from_stacked(t: &Tensor) -> Result<Self> {
        let s = t.shape();
        let (c3, r) = match s.len() {
            3 => (s[0], s[1]),
            4 if s[0] == 1 => (s[1], s[2]),
            _ => return Err(TensorError::Invalid { op: "triplane", msg: format!("cannot split {s:?}") }),
        };
        if c3 % 3 != 0 {
            return Err(TensorError::Invalid { op: "triplane", msg: format!("channel count {c3} not divisible by 3") });
        }
        let c = c3 / 3;
        let t = t.reshape(&[c3, r, s[s.len() - 1]])?;
        TriPlane::new(t.slice(0, 0, c)?, t.slice(0, c, c)?, t.slice(0, 2 * c, c)?)
    }

    pub fn constant(channels: usize, res: usize, values: [&[f64]; 3]) -> Result<Self> {
        let make = |v: &[f64]| -> Result<Tensor> {
            let data = v.iter().flat_map(|&x| std::iter::repeat_n(x, res * res)).collect();
            Tensor::new(data, &[channels, res, res])
        };
        TriPlane::new(make(values[0])?, make(values[1])?, make(values[2])?)
    }

    pub fn zeros(channels: usize, res: usize) -> Self {
        let z = Tensor::zeros(&[channels, res, res]);
        TriPlane {
            planes: [z.clone(), z.clone(), z],
        }
    }

    pub fn channels(&self) -> usize {
        self.planes[0].shape()[0]
    }

    pub fn resolution(&self) -> usize {
        self.planes[0].shape()[1]
    }

    pub fn to_params(&self) -> Result<ParamSet> {
        let mut p = ParamSet::new();
        for (name, plane) in PLANE_NAMES.iter().zip(&self.planes) {
            p.insert(*name, plane.clone())?;
        }
        Ok(p)
    }

    pub fn from_params(p: &ParamSet) -> Result<Self> {
        TriPlane::new(p.get(PLANE_NAMES[0])?.clone(), p.get(PLANE_NAMES[1])?.clone(), p.get(PLANE_NAMES[2])?.clone())
    }

    /// Sum of the three bilinear lookups at points `[M, 3]`, giving `[M, C]`.
    pub fn query(&self, points: &Tensor) -> Result<Tensor> {
        let cols = [points.slice(1, 0, 1)?, points.slice(1, 1, 1)?, points.slice(1, 2, 1)?];
        let mut acc: Option<Tensor> = None;
        for (plane, &(a, b)) in self.planes.iter().zip(&PROJECTIONS) {
            let uv = Tensor::concat(&[&cols[a], &cols[b]], 1)?;
            let f = plane.plane_sample(&uv)?;
            acc = Some(match acc {
                None => f,
                Some(s) => s.add(&f)?,
            });
        }
        Ok(acc.expect("three planes"))
    }
}

/// Offset planes (C = 3) with a tanh clamp of magnitude `s_max`.
#[derive(Clone, Debug)]
pub struct OffsetTriPlane {
    pub planes: TriPlane,
    pub s_max: f64,
}

impl OffsetTriPlane {
    pub fn new(planes: TriPlane, s_max: f64) -> Result<Self> {
        if planes.channels() != 3 {
            return Err(TensorError::Invalid {
                op: "offset planes",
                msg: format!("need 3 channels, got {}", planes.channels()),
            });
        }
        Ok(OffsetTriPlane { planes, s_max })
    }

    /// `Δp = s_max · tanh(Σ planes(p))`, queried at the undeformed points.
    pub fn displacement(&self, points: &Tensor) -> Result<Tensor> {
        self.planes.query(points)?.tanh()?.scale(self.s_max)
    }

    /// `p + Δp` for points `[M, 3]`.
    pub fn deform(&self, points: &Tensor) -> Result<Tensor> {
        points.add(&self.displacement(points)?)
    }
}

/// Features at `points`, after deformation when offsets are given.
pub fn query_deformed(features: &TriPlane, offsets: Option<&OffsetTriPlane>, points: &Tensor) -> Result<Tensor> {
    match offsets {
        Some(off) => features.query(&off.deform(points)?),
        None => features.query(points),
    }
}
