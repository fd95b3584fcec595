use rand::Rng;

use super::cloud::PointCloud;
use crate::error::{Error, Result};
use crate::rng::gaussian;

/// `xyz' = scale · (xyz + z)` with `z ~ N(0, sigma²)` per coordinate. Colours
/// and labels are copied unchanged.
pub fn jitter_scale_augment(
    cloud: &PointCloud,
    sigma: f64,
    scale: f64,
    rng: &mut impl Rng,
) -> Result<PointCloud> {
    if !(sigma >= 0.0) || !(scale > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "need sigma ≥ 0 and scale > 0, got sigma={sigma}, scale={scale}"
        )));
    }
    let mut out = cloud.clone();
    for p in &mut out.xyz {
        for v in p.iter_mut() {
            let z = if sigma > 0.0 { sigma * gaussian(rng) } else { 0.0 };
            *v = scale * (*v + z);
        }
    }
    Ok(out)
}
