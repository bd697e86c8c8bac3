//! Discrete domain masks: interior nodes, a boundary layer, and outward
//! unit normals on the boundary layer.

use crate::error::{BiharmError, Result};
use crate::field_core::grid::Grid;
use ndarray::{ArrayD, Dimension, IxDyn};

#[derive(Debug, Clone)]
pub struct DomainMask {
    pub grid: Grid,
    /// True strictly inside the domain.
    pub inside: ArrayD<bool>,
    /// True on the discrete boundary layer.
    pub boundary: ArrayD<bool>,
    /// Outward unit normal for each boundary node, in index order.
    pub normals: Vec<(Vec<usize>, Vec<f64>)>,
}

impl DomainMask {
    /// The box whose boundary is the outermost node layer of a boxed grid.
    pub fn boxed(grid: &Grid) -> Result<Self> {
        if grid.periodic {
            return Err(BiharmError::Parameter("box mask needs a boxed grid".into()));
        }
        let mut inside = ArrayD::from_elem(IxDyn(&grid.shape), false);
        let mut boundary = inside.clone();
        let mut normals = Vec::new();
        for (idx, ins) in inside.indexed_iter_mut() {
            let idx = idx.slice().to_vec();
            let mut normal = vec![0.0; grid.dim()];
            let mut on_edge = false;
            for (a, &j) in idx.iter().enumerate() {
                if j == 0 {
                    normal[a] = -1.0;
                    on_edge = true;
                } else if j == grid.shape[a] - 1 {
                    normal[a] = 1.0;
                    on_edge = true;
                }
            }
            if on_edge {
                boundary[IxDyn(&idx)] = true;
                let len = normal.iter().map(|v| v * v).sum::<f64>().sqrt();
                for v in normal.iter_mut() {
                    *v /= len;
                }
                normals.push((idx, normal));
            } else {
                *ins = true;
            }
        }
        Ok(DomainMask { grid: grid.clone(), inside, boundary, normals })
    }

    /// Ball of given center and radius; the boundary layer is the set of
    /// inside nodes with an outside neighbor, normals are radial.
    pub fn ball(grid: &Grid, center: &[f64], radius: f64) -> Result<Self> {
        if center.len() != grid.dim() {
            return Err(BiharmError::Parameter("center dimension mismatch".into()));
        }
        let dim = grid.dim();
        let in_ball = |idx: &[usize]| -> bool {
            let x = grid.node(idx);
            let r2: f64 = x.iter().zip(center).map(|(a, c)| (a - c) * (a - c)).sum();
            r2 < radius * radius
        };
        let mut inside = ArrayD::from_elem(IxDyn(&grid.shape), false);
        let mut boundary = inside.clone();
        let mut normals = Vec::new();
        let shape = grid.shape.clone();
        for (idx, _) in ArrayD::<bool>::from_elem(IxDyn(&shape), false).indexed_iter() {
            let idx = idx.slice().to_vec();
            if !in_ball(&idx) {
                continue;
            }
            let mut has_outside_neighbor = false;
            for a in 0..dim {
                for step in [-1i64, 1] {
                    let j = idx[a] as i64 + step;
                    if j < 0 || j as usize >= shape[a] {
                        has_outside_neighbor = true;
                        continue;
                    }
                    let mut nb = idx.clone();
                    nb[a] = j as usize;
                    if !in_ball(&nb) {
                        has_outside_neighbor = true;
                    }
                }
            }
            if has_outside_neighbor {
                boundary[IxDyn(&idx)] = true;
                let x = grid.node(&idx);
                let mut normal: Vec<f64> = x.iter().zip(center).map(|(a, c)| a - c).collect();
                let len = normal.iter().map(|v| v * v).sum::<f64>().sqrt();
                if len == 0.0 {
                    return Err(BiharmError::Parameter("degenerate ball boundary node".into()));
                }
                for v in normal.iter_mut() {
                    *v /= len;
                }
                normals.push((idx, normal));
            } else {
                inside[IxDyn(&idx)] = true;
            }
        }
        Ok(DomainMask { grid: grid.clone(), inside, boundary, normals })
    }

    pub fn interior_count(&self) -> usize {
        self.inside.iter().filter(|&&b| b).count()
    }

    pub fn boundary_count(&self) -> usize {
        self.normals.len()
    }
}
