//! Dense-grid evaluation of a trained intensity field.

use cbct_core::{GridSpec, ProjectionSet, ScannerGeometry, Volume};
use cbct_nn::Graph;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::fusion::model_coords;
use crate::model::Model;
use crate::pointtrans::{NeighborGraph, Neighborhood};
use crate::{Error, Result};

pub const MAX_CHUNK: usize = 65_536;
pub const DEFAULT_CHUNK: usize = 32_768;

/// How the point transformer's neighbor graph is formed over a dense grid.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Neighbors {
    /// k nearest voxel centers over the whole grid.
    Grid,
    /// The voxel centers are shuffled with `seed` and split into groups of
    /// at most `size` points; neighbors are searched within a group. With
    /// `size` equal to the training sample count the neighbor spacing
    /// matches what the model saw during training.
    Sampled { size: usize, seed: u64 },
}

/// Model coordinates of every voxel center, x fastest.
pub fn grid_coords(geom: &ScannerGeometry, grid: &GridSpec) -> Vec<[f64; 3]> {
    let [nx, ny, nz] = grid.dims;
    let mut out = Vec::with_capacity(grid.len());
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                out.push(model_coords(geom, grid.voxel_center_mm(i, j, k)));
            }
        }
    }
    out
}

/// Points whose features the rows `chunk` depend on after `hops` rounds
/// of neighbor attention, ascending.
fn halo(graph: &NeighborGraph, chunk: &[usize], hops: usize, mark: &mut [u32], stamp: u32) -> Vec<usize> {
    let mut members = chunk.to_vec();
    for &m in &members {
        mark[m] = stamp;
    }
    let mut frontier = members.clone();
    for _ in 0..hops {
        let mut next = Vec::new();
        for &p in &frontier {
            for &j in graph.row(p) {
                if mark[j] != stamp {
                    mark[j] = stamp;
                    next.push(j);
                }
            }
        }
        members.extend_from_slice(&next);
        frontier = next;
    }
    members.sort_unstable();
    members
}

/// Restriction of a neighborhood to `members`; neighbors outside the set
/// are excluded through a zero weight.
fn restrict(nb: &Neighborhood, members: &[usize], local: &mut [usize], mark: &[u32], stamp: u32) -> Neighborhood {
    for (r, &m) in members.iter().enumerate() {
        local[m] = r;
    }
    let k = nb.graph.k;
    let mut indices = Vec::with_capacity(members.len() * k);
    let mut distances = Vec::with_capacity(members.len() * k);
    let mut weights = Vec::with_capacity(members.len() * k);
    for (r, &m) in members.iter().enumerate() {
        for s in 0..k {
            let j = nb.graph.indices[m * k + s];
            distances.push(nb.graph.distances[m * k + s]);
            if mark[j] == stamp {
                indices.push(local[j]);
                weights.push(nb.weights[m * k + s]);
            } else {
                indices.push(r);
                weights.push(0.0);
            }
        }
    }
    Neighborhood { graph: NeighborGraph { k, indices, distances }, weights }
}

/// Random partition of `0..n` into `ceil(n / size)` groups whose sizes
/// differ by at most one. Returns the shuffled order and group boundaries.
fn partition(n: usize, size: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let groups = n.div_ceil(size).max(1);
    let bounds = (0..=groups).map(|i| i * n / groups).collect();
    (order, bounds)
}

fn sampled_neighborhood(model: &Model, coords: &[[f64; 3]], order: &[usize], bounds: &[usize]) -> Result<Option<Neighborhood>> {
    let Some(pt) = &model.pointtrans else { return Ok(None) };
    let k = pt.cfg.k;
    let n = coords.len();
    let mut indices = vec![0; n * k];
    let mut distances = vec![0.0; n * k];
    let mut weights = vec![0.0; n * k];
    for w in bounds.windows(2) {
        let group = &order[w[0]..w[1]];
        let pts: Vec<[f64; 3]> = group.iter().map(|&m| coords[m]).collect();
        let nb = Neighborhood::build(&pts, k, pt.cfg.sigma)?;
        for (r, &m) in group.iter().enumerate() {
            for s in 0..k {
                indices[m * k + s] = group[nb.graph.indices[r * k + s]];
                distances[m * k + s] = nb.graph.distances[r * k + s];
                weights[m * k + s] = nb.weights[r * k + s];
            }
        }
    }
    Ok(Some(Neighborhood { graph: NeighborGraph { k, indices, distances }, weights }))
}

/// Evaluates the model at every voxel center of `grid`, `chunk` points at a
/// time. The point transformer's neighbor graph is built once for the whole
/// grid; each chunk carries the neighbors it depends on, so the result does
/// not depend on `chunk`.
pub fn reconstruct(
    model: &Model,
    projections: &ProjectionSet,
    geom: &ScannerGeometry,
    grid: &GridSpec,
    chunk: usize,
    neighbors: Neighbors,
) -> Result<Volume> {
    if chunk == 0 || chunk > MAX_CHUNK {
        return Err(Error::InvalidArgument(format!("chunk size {chunk} outside 1..={MAX_CHUNK}")));
    }
    projections.check_geometry(geom)?;
    let s = model.cfg.encoder.image_size;
    if geom.detector_pixels != [s, s] {
        return Err(Error::InvalidArgument(format!(
            "projections are {}x{} but the model was trained on {s}x{s}",
            geom.detector_pixels[0], geom.detector_pixels[1]
        )));
    }
    if let Neighbors::Sampled { size, .. } = neighbors {
        let k = model.pointtrans.as_ref().map_or(1, |p| p.cfg.k);
        if size < k {
            return Err(Error::InvalidArgument(format!("neighbor groups of {size} points cannot supply {k} neighbors")));
        }
    }
    let views = Model::view_tensor(projections)?;
    let mut g = Graph::eval();
    let pyramid = model.encode(&mut g, &views)?;
    let mark_nodes = g.len();
    let coords = grid_coords(geom, grid);
    let n = coords.len();
    let (order, global) = match neighbors {
        Neighbors::Grid => ((0..n).collect(), model.neighborhood(&coords)?),
        Neighbors::Sampled { size, seed } => {
            let (order, bounds) = partition(n, size, seed);
            let nb = sampled_neighborhood(model, &coords, &order, &bounds)?;
            (order, nb)
        }
    };
    let hops = model.pointtrans.as_ref().map_or(0, |p| p.cfg.layers);
    let mut out = vec![0.0; n];
    let mut mark = vec![0u32; n];
    let mut local = vec![0usize; n];
    for (ci, rows) in order.chunks(chunk).enumerate() {
        match &global {
            None => {
                let pts: Vec<[f64; 3]> = rows.iter().map(|&m| coords[m]).collect();
                let p = model.predict(&mut g, &pyramid, geom, &projections.angles_deg, &pts, None)?;
                for (&m, &v) in rows.iter().zip(g.value(p.values).data()) {
                    out[m] = v;
                }
            }
            Some(nb) => {
                let stamp = ci as u32 + 1;
                let members = halo(&nb.graph, rows, hops, &mut mark, stamp);
                let sub = restrict(nb, &members, &mut local, &mark, stamp);
                let sub_coords: Vec<[f64; 3]> = members.iter().map(|&m| coords[m]).collect();
                let p = model.predict(&mut g, &pyramid, geom, &projections.angles_deg, &sub_coords, Some(&sub))?;
                let all = g.value(p.values).data();
                for &m in rows {
                    out[m] = all[local[m]];
                }
            }
        }
        g.release(mark_nodes, &pyramid.maps);
    }
    Ok(Volume::new(*grid, out)?)
}
