//! Synthetic indoor-style scenes: a floor plane with boxes, spheres and
//! cylinders standing on it. Every point is labelled with the class of the
//! primitive that generated it.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::cloud::PointCloud;
use crate::error::{Error, Result};
use crate::rng::{gaussian, stream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ShapeKind {
    /// Horizontal rectangle `size[0] × size[1]` at `center.z`.
    Plane,
    /// Surface of an axis-aligned box with edge lengths `size`.
    Box,
    /// Sphere surface of radius `size[0]`.
    Sphere,
    /// Vertical cylinder (lateral surface plus caps), radius `size[0]`, height `size[2]`.
    Cylinder,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    pub class_id: u16,
    pub kind: ShapeKind,
    pub center: [f64; 3],
    pub size: [f64; 3],
    pub points: usize,
    /// Instance colour; per-point noise from the colour model is added on top.
    pub color: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColorModel {
    /// Standard deviation of per-point colour noise.
    pub point_noise: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    /// Side length of the square scene footprint, metres.
    pub extent: f64,
    pub primitives: Vec<Primitive>,
    pub color: ColorModel,
    pub class_names: BTreeMap<u16, String>,
}

/// Appearance of one synthetic class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassStyle {
    pub id: u16,
    pub name: String,
    pub kind: ShapeKind,
    pub color: [f64; 3],
    pub size: [f64; 3],
}

/// The set of classes scenes are drawn from. Class 0 is the floor; the rest
/// are object classes split into disjoint train and test folds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassCatalog {
    pub floor: ClassStyle,
    pub objects: Vec<ClassStyle>,
    pub train_classes: Vec<u16>,
    pub test_classes: Vec<u16>,
}

impl ClassCatalog {
    /// Ten object classes on a colour wheel, alternating between folds so the
    /// test colours sit between training colours.
    pub fn synthetic() -> Self {
        Self::synthetic_with(10).expect("10 is in range")
    }

    /// `n_objects` classes (4 to 16) spread evenly around the colour wheel.
    pub fn synthetic_with(n_objects: usize) -> Result<Self> {
        use ShapeKind::*;
        const STYLES: [(&str, ShapeKind, [f64; 3]); 16] = [
            ("chair", Box, [0.35, 0.35, 0.45]),
            ("table", Box, [0.60, 0.40, 0.30]),
            ("sofa", Box, [0.60, 0.30, 0.35]),
            ("lamp", Cylinder, [0.12, 0.12, 0.50]),
            ("bin", Cylinder, [0.15, 0.15, 0.35]),
            ("ball", Sphere, [0.18, 0.18, 0.18]),
            ("bookcase", Box, [0.30, 0.50, 0.60]),
            ("plant", Sphere, [0.20, 0.20, 0.20]),
            ("pillar", Cylinder, [0.10, 0.10, 0.70]),
            ("cabinet", Box, [0.45, 0.35, 0.50]),
            ("desk", Box, [0.55, 0.35, 0.35]),
            ("stool", Cylinder, [0.15, 0.15, 0.30]),
            ("globe", Sphere, [0.15, 0.15, 0.15]),
            ("crate", Box, [0.40, 0.40, 0.40]),
            ("barrel", Cylinder, [0.20, 0.20, 0.45]),
            ("dresser", Box, [0.50, 0.30, 0.55]),
        ];
        if !(4..=STYLES.len()).contains(&n_objects) {
            return Err(Error::InvalidArgument(format!(
                "synthetic catalog supports 4 to {} object classes, got {n_objects}",
                STYLES.len()
            )));
        }
        let spec = &STYLES[..n_objects];
        let objects: Vec<ClassStyle> = spec
            .iter()
            .enumerate()
            .map(|(i, (name, kind, size))| ClassStyle {
                id: i as u16 + 1,
                name: (*name).to_string(),
                kind: *kind,
                color: hue_to_rgb(i as f64 / spec.len() as f64),
                size: *size,
            })
            .collect();
        let train_classes = objects.iter().filter(|c| c.id % 2 == 1).map(|c| c.id).collect();
        let test_classes = objects.iter().filter(|c| c.id % 2 == 0).map(|c| c.id).collect();
        Ok(Self {
            floor: ClassStyle {
                id: 0,
                name: "floor".into(),
                kind: Plane,
                color: [0.45, 0.42, 0.40],
                size: [1.0, 1.0, 0.0],
            },
            objects,
            train_classes,
            test_classes,
        })
    }

    pub fn class_names(&self) -> BTreeMap<u16, String> {
        std::iter::once(&self.floor)
            .chain(&self.objects)
            .map(|c| (c.id, c.name.clone()))
            .collect()
    }

    pub fn style(&self, id: u16) -> Option<&ClassStyle> {
        std::iter::once(&self.floor).chain(&self.objects).find(|c| c.id == id)
    }
}

/// Saturated colour at hue `h ∈ [0,1)`, slightly darkened.
fn hue_to_rgb(h: f64) -> [f64; 3] {
    let f = |n: f64| {
        let k = (n + h * 6.0) % 6.0;
        0.85 - 0.7 * k.min(4.0 - k).clamp(0.0, 1.0)
    };
    [f(5.0), f(3.0), f(1.0)]
}

impl SceneSpec {
    /// A random arrangement of `n_objects` catalog objects on a floor of side
    /// `extent`. Object instances vary in size (±20%) and colour.
    pub fn random(
        seed: u64,
        extent: f64,
        catalog: &ClassCatalog,
        n_objects: usize,
        floor_points: usize,
        object_points: usize,
    ) -> Self {
        let mut rng = stream(seed);
        let mut primitives = vec![Primitive {
            class_id: catalog.floor.id,
            kind: ShapeKind::Plane,
            center: [extent / 2.0, extent / 2.0, 0.0],
            size: [extent, extent, 0.0],
            points: floor_points,
            color: catalog.floor.color,
        }];
        for _ in 0..n_objects {
            let style = &catalog.objects[rng.random_range(0..catalog.objects.len())];
            let s = rng.random_range(0.8..1.2);
            let size = style.size.map(|v| v * s);
            let half_height = match style.kind {
                ShapeKind::Sphere => size[0],
                _ => size[2] / 2.0,
            };
            let margin = 0.2;
            let center = [
                rng.random_range(margin..extent - margin),
                rng.random_range(margin..extent - margin),
                half_height,
            ];
            let color = style
                .color
                .map(|c| (c + 0.04 * gaussian(&mut rng)).clamp(0.0, 1.0));
            primitives.push(Primitive {
                class_id: style.id,
                kind: style.kind,
                center,
                size,
                points: object_points,
                color,
            });
        }
        Self {
            seed,
            extent,
            primitives,
            color: ColorModel { point_noise: 0.03 },
            class_names: catalog.class_names(),
        }
    }
}

/// Samples every primitive's surface. Points appear in primitive order and
/// keep the label of the primitive that produced them, so per-class counts
/// equal the spec's point budgets exactly; where primitives interpenetrate,
/// the later primitive's points are emitted after (and drawn over) earlier ones.
pub fn generate_scene(spec: &SceneSpec) -> Result<PointCloud> {
    if spec.primitives.is_empty() {
        return Err(Error::InvalidArgument("scene has no primitives".into()));
    }
    let mut rng = stream(spec.seed);
    let total: usize = spec.primitives.iter().map(|p| p.points).sum();
    let mut xyz = Vec::with_capacity(total);
    let mut rgb = Vec::with_capacity(total);
    let mut labels = Vec::with_capacity(total);
    for p in &spec.primitives {
        if !spec.class_names.contains_key(&p.class_id) {
            return Err(Error::InvalidArgument(format!("class {} not named", p.class_id)));
        }
        for _ in 0..p.points {
            xyz.push(sample_surface(p, &mut rng));
            rgb.push(p.color.map(|c| {
                (c + spec.color.point_noise * gaussian(&mut rng)).clamp(0.0, 1.0)
            }));
            labels.push(i32::from(p.class_id));
        }
    }
    PointCloud::new(xyz, rgb, labels, spec.class_names.clone())
}

fn sample_surface(p: &Primitive, rng: &mut impl Rng) -> [f64; 3] {
    let [cx, cy, cz] = p.center;
    match p.kind {
        ShapeKind::Plane => [
            cx + (rng.random::<f64>() - 0.5) * p.size[0],
            cy + (rng.random::<f64>() - 0.5) * p.size[1],
            cz,
        ],
        ShapeKind::Sphere => {
            let r = p.size[0];
            loop {
                let v = [gaussian(rng), gaussian(rng), gaussian(rng)];
                let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
                if n > 1e-12 {
                    break [cx + r * v[0] / n, cy + r * v[1] / n, cz + r * v[2] / n];
                }
            }
        }
        ShapeKind::Box => {
            let [a, b, c] = p.size;
            let areas = [b * c, b * c, a * c, a * c, a * b, a * b];
            let face = pick_weighted(&areas, rng);
            let u = rng.random::<f64>() - 0.5;
            let v = rng.random::<f64>() - 0.5;
            let (dx, dy, dz) = match face {
                0 => (-0.5 * a, u * b, v * c),
                1 => (0.5 * a, u * b, v * c),
                2 => (u * a, -0.5 * b, v * c),
                3 => (u * a, 0.5 * b, v * c),
                4 => (u * a, v * b, -0.5 * c),
                _ => (u * a, v * b, 0.5 * c),
            };
            [cx + dx, cy + dy, cz + dz]
        }
        ShapeKind::Cylinder => {
            let (r, h) = (p.size[0], p.size[2]);
            let areas = [2.0 * PI * r * h, PI * r * r, PI * r * r];
            match pick_weighted(&areas, rng) {
                0 => {
                    let t = rng.random::<f64>() * 2.0 * PI;
                    let z = (rng.random::<f64>() - 0.5) * h;
                    [cx + r * t.cos(), cy + r * t.sin(), cz + z]
                }
                cap => {
                    let t = rng.random::<f64>() * 2.0 * PI;
                    let rr = r * rng.random::<f64>().sqrt();
                    let z = if cap == 1 { -0.5 * h } else { 0.5 * h };
                    [cx + rr * t.cos(), cy + rr * t.sin(), cz + z]
                }
            }
        }
    }
}

fn pick_weighted(weights: &[f64], rng: &mut impl Rng) -> usize {
    let total: f64 = weights.iter().sum();
    let mut x = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if x < *w {
            return i;
        }
        x -= w;
    }
    weights.len() - 1
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names() -> BTreeMap<u16, String> {
        BTreeMap::from([(0, "floor".into()), (1, "ball".into())])
    }

    fn spec(prims: Vec<Primitive>) -> SceneSpec {
        SceneSpec {
            seed: 11,
            extent: 1.0,
            primitives: prims,
            color: ColorModel { point_noise: 0.02 },
            class_names: names(),
        }
    }

    #[test]
    fn single_plane_labels_every_point() {
        let s = spec(vec![Primitive {
            class_id: 0,
            kind: ShapeKind::Plane,
            center: [0.5, 0.5, 0.0],
            size: [1.0, 1.0, 0.0],
            points: 100,
            color: [0.5; 3],
        }]);
        let c = generate_scene(&s).unwrap();
        assert_eq!(c.len(), 100);
        assert!(c.labels.iter().all(|&l| l == 0));
    }

    #[test]
    fn same_seed_same_cloud() {
        let cat = ClassCatalog::synthetic();
        let s = SceneSpec::random(5, 2.0, &cat, 5, 300, 100);
        assert_eq!(generate_scene(&s).unwrap(), generate_scene(&s).unwrap());
    }

    #[test]
    fn sphere_points_lie_on_radius() {
        let center = [0.3, -0.2, 0.7];
        let s = spec(vec![Primitive {
            class_id: 1,
            kind: ShapeKind::Sphere,
            center,
            size: [0.25, 0.25, 0.25],
            points: 500,
            color: [0.1, 0.2, 0.9],
        }]);
        let c = generate_scene(&s).unwrap();
        for p in &c.xyz {
            let r = ((p[0] - center[0]).powi(2)
                + (p[1] - center[1]).powi(2)
                + (p[2] - center[2]).powi(2))
            .sqrt();
            assert!((r - 0.25).abs() < 1e-9);
        }
    }

    #[test]
    fn per_class_counts_match_spec() {
        let cat = ClassCatalog::synthetic();
        let s = SceneSpec::random(9, 2.0, &cat, 6, 400, 150);
        let c = generate_scene(&s).unwrap();
        let mut expected: BTreeMap<u16, usize> = BTreeMap::new();
        for p in &s.primitives {
            *expected.entry(p.class_id).or_default() += p.points;
        }
        for (id, n) in expected {
            assert_eq!(c.count_label(i32::from(id)), n);
        }
    }

    #[test]
    fn empty_inventory_rejected() {
        assert!(generate_scene(&spec(vec![])).is_err());
    }

    #[test]
    fn catalog_folds_are_disjoint() {
        let cat = ClassCatalog::synthetic();
        assert!(cat.objects.len() >= 8);
        assert!(cat.train_classes.iter().all(|c| !cat.test_classes.contains(c)));
    }
}
