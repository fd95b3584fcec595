use std::collections::BTreeMap;

use rand::seq::index;
use rand::Rng;

use super::cloud::PointCloud;
use crate::error::{Error, Result};

pub const DEFAULT_BLOCK_POINTS: usize = 2048;

/// Partitions `cloud` into axis-aligned `block_size × block_size` XY cells
/// anchored at the cloud's minimum corner and resamples every non-empty cell
/// to exactly `n_points` points. Cells holding at least `n_points` points are
/// subsampled without replacement; smaller cells keep every point once and
/// fill the remainder with replacement. Cells are returned in (x, y) order.
pub fn split_and_sample(
    cloud: &PointCloud,
    block_size: f64,
    n_points: usize,
    rng: &mut impl Rng,
) -> Result<Vec<PointCloud>> {
    if !(block_size > 0.0 && block_size.is_finite()) {
        return Err(Error::InvalidArgument(format!("block_size must be > 0, got {block_size}")));
    }
    if n_points == 0 {
        return Err(Error::InvalidArgument("n_points must be ≥ 1".into()));
    }
    let (x0, y0) = cloud
        .xyz
        .iter()
        .fold((f64::INFINITY, f64::INFINITY), |(a, b), p| (a.min(p[0]), b.min(p[1])));
    let mut cells: BTreeMap<(u64, u64), Vec<usize>> = BTreeMap::new();
    for (i, p) in cloud.xyz.iter().enumerate() {
        let ix = ((p[0] - x0) / block_size).floor() as u64;
        let iy = ((p[1] - y0) / block_size).floor() as u64;
        cells.entry((ix, iy)).or_default().push(i);
    }
    Ok(cells
        .into_values()
        .map(|members| {
            let idx: Vec<usize> = if members.len() >= n_points {
                index::sample(rng, members.len(), n_points)
                    .into_iter()
                    .map(|j| members[j])
                    .collect()
            } else {
                let mut idx = members.clone();
                while idx.len() < n_points {
                    idx.push(members[rng.random_range(0..members.len())]);
                }
                idx
            };
            cloud.select(&idx)
        })
        .collect())
}

/// Shifts a block so its XY minimum sits at the origin; z is left untouched.
pub fn to_block_local(block: &mut PointCloud) {
    let (x0, y0) = block
        .xyz
        .iter()
        .fold((f64::INFINITY, f64::INFINITY), |(a, b), p| (a.min(p[0]), b.min(p[1])));
    for p in &mut block.xyz {
        p[0] -= x0;
        p[1] -= y0;
    }
}
