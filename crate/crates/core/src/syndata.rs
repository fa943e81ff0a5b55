//! Synthetic point cloud domains: dense indoor rooms and sparse ring-scanned
//! outdoor scenes with partially overlapping label spaces.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::f64::consts::TAU;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::langhead::{synthetic_table, ClassEmbeddingTable, LabelSpace};
use crate::nn::fnv1a;
use crate::serialization::VoxelGrid;

pub const NUM_FEATS: usize = 3;

/// One scene: coordinates in meters, per-point features and labels.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    pub coords: Vec<[f64; 3]>,
    /// Row-major `M×F`.
    pub feats: Vec<f64>,
    pub num_feats: usize,
    pub labels: Vec<i64>,
    pub dataset_tag: Option<Arc<str>>,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn feat(&self, i: usize) -> &[f64] {
        &self.feats[i * self.num_feats..(i + 1) * self.num_feats]
    }

    /// Points `idx`, in that order.
    pub fn subset(&self, idx: &[usize]) -> PointCloud {
        PointCloud {
            coords: idx.iter().map(|&i| self.coords[i]).collect(),
            feats: idx.iter().flat_map(|&i| self.feat(i).to_vec()).collect(),
            num_feats: self.num_feats,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            dataset_tag: self.dataset_tag.clone(),
        }
    }

    /// Text dump: `M F`, then `x y z f1..fF label` per point.
    pub fn to_dump(&self) -> String {
        let mut s = format!("{} {}\n", self.len(), self.num_feats);
        for i in 0..self.len() {
            let p = self.coords[i];
            s.push_str(&format!("{:?} {:?} {:?}", p[0], p[1], p[2]));
            for f in self.feat(i) {
                s.push_str(&format!(" {f:?}"));
            }
            s.push_str(&format!(" {}\n", self.labels[i]));
        }
        s
    }

    pub fn parse_dump(text: &str, tag: Option<Arc<str>>) -> Result<PointCloud> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let head = lines.next().ok_or_else(|| Error::Format("empty scene dump".into()))?;
        let nums: Vec<usize> = head
            .split_whitespace()
            .map(|t| t.parse())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Format(format!("bad scene header {head:?}")))?;
        let [m, f] = nums[..] else {
            return Err(Error::Format(format!("scene header needs `M F`, got {head:?}")));
        };
        let mut c = PointCloud {
            coords: Vec::with_capacity(m),
            feats: Vec::with_capacity(m * f),
            num_feats: f,
            labels: Vec::with_capacity(m),
            dataset_tag: tag,
        };
        for (n, line) in lines.enumerate() {
            let toks: Vec<&str> = line.split_whitespace().collect();
            if toks.len() != 4 + f {
                return Err(Error::Format(format!("point {n}: expected {} fields, got {}", 4 + f, toks.len())));
            }
            let vals = toks[..3 + f]
                .iter()
                .map(|t| t.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Format(format!("point {n}: {e}")))?;
            let label = toks[3 + f]
                .parse::<i64>()
                .map_err(|e| Error::Format(format!("point {n}: {e}")))?;
            c.coords.push([vals[0], vals[1], vals[2]]);
            c.feats.extend_from_slice(&vals[3..]);
            c.labels.push(label);
        }
        if c.len() != m {
            return Err(Error::Format(format!("scene header says {m} points, found {}", c.len())));
        }
        Ok(c)
    }

    pub fn save_dump(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_dump()).map_err(|e| Error::io(path, e))
    }

    pub fn load_dump(path: &Path, tag: Option<Arc<str>>) -> Result<PointCloud> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        PointCloud::parse_dump(&text, tag)
    }
}

/// An axis-aligned box placed on the floor.
#[derive(Clone, Debug, PartialEq)]
pub struct BoxKind {
    pub class: String,
    /// Footprint side ranges (x, y) and height range, meters.
    pub size_x: (f64, f64),
    pub size_y: (f64, f64),
    pub height: (f64, f64),
    pub color: [f64; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct IndoorParams {
    pub room_x: (f64, f64),
    pub room_y: (f64, f64),
    pub height: (f64, f64),
    pub num_boxes: (usize, usize),
    pub box_kinds: Vec<BoxKind>,
    /// Surface samples per square meter.
    pub density: f64,
    /// Colors of floor, ceiling and wall.
    pub floor_color: [f64; 3],
    pub ceiling_color: [f64; 3],
    pub wall_color: [f64; 3],
}

/// Ground rings of a spinning scanner: ring `i` has radius
/// `ring_r0 · ring_growth^i` and `round(ring_points · (ring_r0 / r)^ring_falloff)`
/// points.
#[derive(Clone, Debug, PartialEq)]
pub struct OutdoorParams {
    pub num_rings: usize,
    pub ring_r0: f64,
    pub ring_growth: f64,
    pub ring_points: f64,
    pub ring_falloff: f64,
    pub num_poles: (usize, usize),
    pub pole_height: (f64, f64),
    pub pole_points: usize,
    pub num_vehicles: (usize, usize),
    /// Vehicle surface samples per square meter at range `ring_r0`; falls as `1/r`.
    pub vehicle_density: f64,
    pub num_walls: (usize, usize),
    pub wall_density: f64,
    pub ground_color: [f64; 3],
    pub pole_color: [f64; 3],
    pub vehicle_color: [f64; 3],
    pub wall_color: [f64; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub enum GeneratorKind {
    Indoor(IndoorParams),
    Outdoor(OutdoorParams),
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub name: String,
    pub kind: GeneratorKind,
    pub label_space: LabelSpace,
    pub num_scenes: usize,
    pub seed: u64,
    /// Per-scene tint σ and per-point feature noise σ.
    pub tint_sigma: f64,
    pub noise_sigma: f64,
    /// Excluded from training; evaluated with its own label space.
    pub held_out: bool,
}

pub const WALL_COLOR: [f64; 3] = [0.72, 0.70, 0.62];

pub fn indoor_spec(name: &str, seed: u64) -> DatasetSpec {
    DatasetSpec {
        name: name.to_string(),
        kind: GeneratorKind::Indoor(IndoorParams {
            room_x: (4.0, 7.0),
            room_y: (4.0, 7.0),
            height: (2.5, 3.2),
            num_boxes: (2, 5),
            box_kinds: vec![
                BoxKind {
                    class: "box_a".into(),
                    size_x: (0.6, 1.2),
                    size_y: (0.6, 1.2),
                    height: (0.4, 0.9),
                    color: [0.22, 0.32, 0.68],
                },
                BoxKind {
                    class: "box_b".into(),
                    size_x: (0.4, 0.8),
                    size_y: (0.4, 0.8),
                    height: (0.8, 1.4),
                    color: [0.68, 0.24, 0.20],
                },
            ],
            density: 100.0,
            floor_color: [0.52, 0.38, 0.24],
            ceiling_color: [0.90, 0.89, 0.86],
            wall_color: WALL_COLOR,
        }),
        label_space: LabelSpace::new(name, &["floor", "ceiling", "wall", "box_a", "box_b"]).expect("distinct"),
        num_scenes: 60,
        seed,
        tint_sigma: 0.03,
        noise_sigma: 0.04,
        held_out: false,
    }
}

/// Indoor variant with tall, thin "shelf" boxes in place of `box_b`.
pub fn heldout_spec(name: &str, seed: u64) -> DatasetSpec {
    let mut s = indoor_spec(name, seed);
    if let GeneratorKind::Indoor(p) = &mut s.kind {
        p.room_x = (3.5, 6.0);
        p.room_y = (5.0, 8.0);
        p.box_kinds[1] = BoxKind {
            class: "shelf".into(),
            size_x: (0.3, 0.5),
            size_y: (1.0, 1.6),
            height: (1.6, 2.2),
            color: [0.68, 0.24, 0.20],
        };
    }
    s.label_space = LabelSpace::new(name, &["floor", "ceiling", "wall", "box_a", "shelf"]).expect("distinct");
    s.num_scenes = 20;
    s.held_out = true;
    s
}

pub fn outdoor_spec(name: &str, seed: u64) -> DatasetSpec {
    DatasetSpec {
        name: name.to_string(),
        kind: GeneratorKind::Outdoor(OutdoorParams {
            num_rings: 16,
            ring_r0: 3.0,
            ring_growth: 1.12,
            ring_points: 360.0,
            ring_falloff: 0.5,
            num_poles: (3, 8),
            pole_height: (3.0, 5.0),
            pole_points: 60,
            num_vehicles: (2, 4),
            vehicle_density: 60.0,
            num_walls: (1, 2),
            wall_density: 12.0,
            ground_color: [0.30, 0.30, 0.28],
            pole_color: [0.85, 0.80, 0.30],
            vehicle_color: [0.25, 0.55, 0.35],
            wall_color: WALL_COLOR,
        }),
        label_space: LabelSpace::new(name, &["ground", "pole", "vehicle", "wall"]).expect("distinct"),
        num_scenes: 60,
        seed,
        tint_sigma: 0.03,
        noise_sigma: 0.04,
        held_out: false,
    }
}

/// Two training domains plus the held-out indoor variant.
pub fn default_specs(seed: u64) -> Vec<DatasetSpec> {
    vec![
        indoor_spec("indoor", seed),
        outdoor_spec("outdoor", seed.wrapping_add(1)),
        heldout_spec("heldout", seed.wrapping_add(2)),
    ]
}

/// Every class name of the default domains.
pub const DEFAULT_CLASSES: [&str; 9] = [
    "floor", "ceiling", "wall", "box_a", "box_b", "ground", "pole", "vehicle", "shelf",
];

/// Embedding table for the default domains: `shelf` sits at cosine 0.7 from
/// `box_b`, `ground` at 0.7 from `floor`, every other pair is orthogonal.
pub fn default_embedding_table(dim: usize, seed: u64) -> Result<ClassEmbeddingTable> {
    synthetic_table(dim, seed, &DEFAULT_CLASSES, &[("floor", "ground", 0.7), ("box_b", "shelf", 0.7)])
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(format!("dataset {}: {what}", self.name)));
        let range_ok = |r: (f64, f64)| r.0 > 0.0 && r.1 >= r.0 && r.1.is_finite();
        if self.num_scenes == 0 {
            return bad("num_scenes must be >= 1");
        }
        if !(self.noise_sigma >= 0.0 && self.tint_sigma >= 0.0) {
            return bad("noise must be >= 0");
        }
        match &self.kind {
            GeneratorKind::Indoor(p) => {
                if !range_ok(p.room_x) || !range_ok(p.room_y) || !range_ok(p.height) {
                    return bad("room extent must be > 0");
                }
                if !(p.density > 0.0) {
                    return bad("density must be > 0");
                }
                if p.num_boxes.1 < p.num_boxes.0 || (p.num_boxes.1 > 0 && p.box_kinds.is_empty()) {
                    return bad("box count range invalid");
                }
                for k in &p.box_kinds {
                    if !range_ok(k.size_x) || !range_ok(k.size_y) || !range_ok(k.height) {
                        return bad("box sizes must be > 0");
                    }
                    if k.size_x.1 + 0.4 > p.room_x.0 || k.size_y.1 + 0.4 > p.room_y.0 {
                        return bad("boxes must fit in the smallest room");
                    }
                }
                for c in ["floor", "ceiling", "wall"]
                    .into_iter()
                    .chain(p.box_kinds.iter().map(|k| k.class.as_str()))
                {
                    if self.label_space.index_of(c).is_none() {
                        return bad(&format!("class {c} missing from the label space"));
                    }
                }
            }
            GeneratorKind::Outdoor(p) => {
                if p.num_rings == 0 || !(p.ring_r0 > 0.0) || !(p.ring_growth > 1.0) || !(p.ring_points >= 1.0) {
                    return bad("ring layout must have r0 > 0, growth > 1, >= 1 ring");
                }
                if p.num_poles.1 < p.num_poles.0
                    || p.num_vehicles.1 < p.num_vehicles.0
                    || p.num_walls.1 < p.num_walls.0
                {
                    return bad("object count ranges invalid");
                }
                if !range_ok(p.pole_height) || !(p.vehicle_density > 0.0) || !(p.wall_density > 0.0) {
                    return bad("object sizes and densities must be > 0");
                }
                for c in ["ground", "pole", "vehicle", "wall"] {
                    if self.label_space.index_of(c).is_none() {
                        return bad(&format!("class {c} missing from the label space"));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn tag(&self) -> Arc<str> {
        Arc::from(self.name.as_str())
    }

    /// Generates scene `scene_seed`; a pure function of `(self, scene_seed)`.
    pub fn generate(&self, scene_seed: u64) -> Result<PointCloud> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ fnv1a(self.name.as_bytes()) ^ scene_seed.wrapping_mul(0x9e37_79b9_7f4a_7c15));
        let mut b = SceneBuilder::new(self, &mut rng);
        match &self.kind {
            GeneratorKind::Indoor(p) => gen_indoor(p, &self.label_space, &mut b),
            GeneratorKind::Outdoor(p) => gen_outdoor(p, &self.label_space, &mut b),
        }
        Ok(b.finish(self.tag()))
    }

    /// Radius of ring `i`.
    pub fn ring_radius(p: &OutdoorParams, i: usize) -> f64 {
        p.ring_r0 * p.ring_growth.powi(i as i32)
    }

    /// Points on a ring of radius `r`.
    pub fn ring_count(p: &OutdoorParams, r: f64) -> usize {
        (p.ring_points * (p.ring_r0 / r).powf(p.ring_falloff)).round().max(1.0) as usize
    }
}

struct SceneBuilder<'a> {
    rng: &'a mut ChaCha8Rng,
    tint: [f64; 3],
    noise: Normal<f64>,
    coords: Vec<[f64; 3]>,
    feats: Vec<f64>,
    labels: Vec<i64>,
}

impl<'a> SceneBuilder<'a> {
    fn new(spec: &DatasetSpec, rng: &'a mut ChaCha8Rng) -> Self {
        let tint_d = Normal::new(0.0, spec.tint_sigma).expect("sigma >= 0");
        let tint = [0; 3].map(|_| tint_d.sample(rng));
        SceneBuilder {
            rng,
            tint,
            noise: Normal::new(0.0, spec.noise_sigma).expect("sigma >= 0"),
            coords: Vec::new(),
            feats: Vec::new(),
            labels: Vec::new(),
        }
    }

    fn push(&mut self, p: [f64; 3], color: [f64; 3], label: usize) {
        self.coords.push(p);
        for c in 0..3 {
            let v = color[c] + self.tint[c] + self.noise.sample(self.rng);
            self.feats.push(v);
        }
        self.labels.push(label as i64);
    }

    fn uniform(&mut self, r: (f64, f64)) -> f64 {
        if r.1 > r.0 {
            self.rng.gen_range(r.0..r.1)
        } else {
            r.0
        }
    }

    fn count(&mut self, r: (usize, usize)) -> usize {
        self.rng.gen_range(r.0..=r.1)
    }

    /// Uniform samples on the parallelogram `o + s·u + t·v`, `s,t ∈ [0,1)`,
    /// skipping points for which `skip` holds.
    fn sheet(&mut self, o: [f64; 3], u: [f64; 3], v: [f64; 3], density: f64, color: [f64; 3], label: usize, skip: &dyn Fn([f64; 3]) -> bool) {
        let area = norm(cross(u, v));
        let n = (area * density).round() as usize;
        for _ in 0..n {
            let s: f64 = self.rng.gen();
            let t: f64 = self.rng.gen();
            let p = [0, 1, 2].map(|a| o[a] + s * u[a] + t * v[a]);
            if !skip(p) {
                self.push(p, color, label);
            }
        }
    }

    fn finish(self, tag: Arc<str>) -> PointCloud {
        PointCloud {
            coords: self.coords,
            feats: self.feats,
            num_feats: NUM_FEATS,
            labels: self.labels,
            dataset_tag: Some(tag),
        }
    }
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn norm(a: [f64; 3]) -> f64 {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}

/// Closed box sides and top: 4 vertical faces around the footprint with
/// corner `c`, edge vectors `ex`, `ey` and height `h`, plus the lid.
fn box_surfaces(c: [f64; 3], ex: [f64; 3], ey: [f64; 3], h: f64) -> [([f64; 3], [f64; 3], [f64; 3]); 5] {
    let up = [0.0, 0.0, h];
    let add = |a: [f64; 3], b: [f64; 3]| [a[0] + b[0], a[1] + b[1], a[2] + b[2]];
    [
        (c, ex, up),
        (add(c, ey), ex, up),
        (c, ey, up),
        (add(c, ex), ey, up),
        (add(c, up), ex, ey),
    ]
}

fn gen_indoor(p: &IndoorParams, space: &LabelSpace, b: &mut SceneBuilder<'_>) {
    let id = |c: &str| space.index_of(c).expect("validated");
    let (lx, ly, h) = (b.uniform(p.room_x), b.uniform(p.room_y), b.uniform(p.height));
    let n_boxes = b.count(p.num_boxes);
    let mut boxes: Vec<([f64; 2], [f64; 2], f64, usize)> = Vec::with_capacity(n_boxes);
    for _ in 0..n_boxes {
        let k = &p.box_kinds[b.rng.gen_range(0..p.box_kinds.len())];
        let (sx, sy, bh) = (b.uniform(k.size_x), b.uniform(k.size_y), b.uniform(k.height));
        let x0 = b.uniform((0.2, lx - sx - 0.2));
        let y0 = b.uniform((0.2, ly - sy - 0.2));
        boxes.push(([x0, y0], [sx, sy], bh, p.box_kinds.iter().position(|q| q.class == k.class).expect("own kind")));
    }
    let foot = boxes.clone();
    let under_box = move |q: [f64; 3]| {
        foot.iter()
            .any(|(o, s, _, _)| q[0] >= o[0] && q[0] < o[0] + s[0] && q[1] >= o[1] && q[1] < o[1] + s[1])
    };
    let none = |_: [f64; 3]| false;
    b.sheet([0.0; 3], [lx, 0.0, 0.0], [0.0, ly, 0.0], p.density, p.floor_color, id("floor"), &under_box);
    b.sheet([0.0, 0.0, h], [lx, 0.0, 0.0], [0.0, ly, 0.0], p.density, p.ceiling_color, id("ceiling"), &none);
    let walls = [
        ([0.0, 0.0, 0.0], [lx, 0.0, 0.0]),
        ([0.0, ly, 0.0], [lx, 0.0, 0.0]),
        ([0.0, 0.0, 0.0], [0.0, ly, 0.0]),
        ([lx, 0.0, 0.0], [0.0, ly, 0.0]),
    ];
    for (o, u) in walls {
        b.sheet(o, u, [0.0, 0.0, h], p.density, p.wall_color, id("wall"), &none);
    }
    for (o, s, bh, k) in boxes {
        let kind = &p.box_kinds[k];
        for (c, u, v) in box_surfaces([o[0], o[1], 0.0], [s[0], 0.0, 0.0], [0.0, s[1], 0.0], bh) {
            b.sheet(c, u, v, p.density, kind.color, id(&kind.class), &none);
        }
    }
}

fn gen_outdoor(p: &OutdoorParams, space: &LabelSpace, b: &mut SceneBuilder<'_>) {
    let id = |c: &str| space.index_of(c).expect("validated");
    let r_max = DatasetSpec::ring_radius(p, p.num_rings - 1);
    let polar = |b: &mut SceneBuilder<'_>, lo: f64, hi: f64| {
        let r = b.uniform((lo, hi));
        let th = b.rng.gen_range(0.0..TAU);
        (r, th, [r * th.cos(), r * th.sin()])
    };

    let n_veh = b.count(p.num_vehicles);
    let mut vehicles: Vec<([f64; 2], f64, f64)> = Vec::new();
    for _ in 0..n_veh {
        let (r, th, c) = polar(b, p.ring_r0 + 1.0, r_max * 0.8);
        vehicles.push((c, th + b.uniform((-0.3, 0.3)), r));
    }
    let veh = vehicles.clone();
    let in_vehicle = move |q: [f64; 3]| {
        veh.iter().any(|(c, yaw, _)| {
            let (dx, dy) = (q[0] - c[0], q[1] - c[1]);
            let (u, v) = (dx * yaw.cos() + dy * yaw.sin(), -dx * yaw.sin() + dy * yaw.cos());
            u.abs() < 2.0 && v.abs() < 0.9
        })
    };

    let jitter = Normal::new(0.0, 0.02).expect("positive");
    for i in 0..p.num_rings {
        let r = DatasetSpec::ring_radius(p, i);
        let n = DatasetSpec::ring_count(p, r);
        let phase = b.rng.gen_range(0.0..TAU);
        for j in 0..n {
            let th = phase + TAU * j as f64 / n as f64;
            let q = [r * th.cos(), r * th.sin(), jitter.sample(b.rng)];
            if !in_vehicle(q) {
                b.push(q, p.ground_color, id("ground"));
            }
        }
    }

    for _ in 0..b.count(p.num_poles) {
        let (_, _, c) = polar(b, p.ring_r0, r_max);
        let ph = b.uniform(p.pole_height);
        for _ in 0..p.pole_points {
            let a = b.rng.gen_range(0.0..TAU);
            let z = b.rng.gen_range(0.0..ph);
            b.push([c[0] + 0.1 * a.cos(), c[1] + 0.1 * a.sin(), z], p.pole_color, id("pole"));
        }
    }

    for (c, yaw, r) in vehicles {
        let ex = [4.0 * yaw.cos(), 4.0 * yaw.sin(), 0.0];
        let ey = [-1.8 * yaw.sin(), 1.8 * yaw.cos(), 0.0];
        let corner = [c[0] - 0.5 * (ex[0] + ey[0]), c[1] - 0.5 * (ex[1] + ey[1]), 0.0];
        let density = p.vehicle_density * p.ring_r0 / r;
        for (o, u, v) in box_surfaces(corner, ex, ey, 1.5) {
            b.sheet(o, u, v, density, p.vehicle_color, id("vehicle"), &|_| false);
        }
    }

    for _ in 0..b.count(p.num_walls) {
        let (_, th, c) = polar(b, r_max * 0.6, r_max);
        let len = b.uniform((6.0, 12.0));
        let height = b.uniform((3.0, 6.0));
        let dir = [-th.sin(), th.cos()];
        let o = [c[0] - 0.5 * len * dir[0], c[1] - 0.5 * len * dir[1], 0.0];
        b.sheet(o, [len * dir[0], len * dir[1], 0.0], [0.0, 0.0, height], p.wall_density, p.wall_color, id("wall"), &|_| false);
    }
}

/// One dataset of a registry with its generated scenes.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub train_seeds: Vec<u64>,
    pub val_seeds: Vec<u64>,
    pub train: Vec<PointCloud>,
    pub val: Vec<PointCloud>,
}

/// Generated datasets with deterministic splits: scene seeds divisible by 10
/// are validation scenes.
#[derive(Clone, Debug)]
pub struct Registry {
    pub datasets: Vec<Dataset>,
}

pub fn is_val_seed(scene_seed: u64) -> bool {
    scene_seed % 10 == 0
}

impl Registry {
    pub fn new(specs: &[DatasetSpec]) -> Result<Self> {
        let mut seen = HashSet::new();
        for s in specs {
            if !seen.insert(s.name.as_str()) {
                return Err(Error::Config(format!("duplicate dataset name {}", s.name)));
            }
            s.validate()?;
        }
        let mut datasets = Vec::with_capacity(specs.len());
        for s in specs {
            let (val_seeds, train_seeds): (Vec<u64>, Vec<u64>) = (0..s.num_scenes as u64).partition(|&k| is_val_seed(k));
            let train = train_seeds.iter().map(|&k| s.generate(k)).collect::<Result<_>>()?;
            let val = val_seeds.iter().map(|&k| s.generate(k)).collect::<Result<_>>()?;
            datasets.push(Dataset {
                spec: s.clone(),
                train_seeds,
                val_seeds,
                train,
                val,
            });
        }
        Ok(Registry { datasets })
    }

    /// Datasets used for training, in registry order.
    pub fn training(&self) -> Vec<&Dataset> {
        self.datasets.iter().filter(|d| !d.spec.held_out).collect()
    }

    pub fn get(&self, name: &str) -> Option<&Dataset> {
        self.datasets.iter().find(|d| d.spec.name == name)
    }
}

/// Random rotation about z, uniform scale in `[0.9, 1.1]` and Gaussian
/// coordinate jitter (σ = 0.005 m).
pub fn augment(cloud: &PointCloud, rng: &mut impl Rng) -> PointCloud {
    let th = rng.gen_range(0.0..TAU);
    let s = rng.gen_range(0.9..1.1);
    let jitter = Normal::new(0.0, 0.005).expect("positive");
    let (c, sn) = (th.cos(), th.sin());
    let mut out = cloud.clone();
    for p in &mut out.coords {
        let (x, y) = (p[0] * c - p[1] * sn, p[0] * sn + p[1] * c);
        *p = [
            s * x + jitter.sample(rng),
            s * y + jitter.sample(rng),
            s * p[2] + jitter.sample(rng),
        ];
    }
    out
}

/// Keeps the points of the `max_voxels` occupied voxels closest to a random
/// point of the cloud. Voxels use the aligned grid, so the crop embeds to at
/// most `max_voxels` tokens.
pub fn crop(cloud: &PointCloud, cell_size: f64, max_voxels: usize, rng: &mut impl Rng) -> Result<PointCloud> {
    if cloud.is_empty() {
        return Err(Error::Input("cannot crop an empty cloud".into()));
    }
    let grid = VoxelGrid::aligned(&cloud.coords, cell_size, 21)?;
    let key = |p: &[f64; 3]| [0, 1, 2].map(|a| ((p[a] - grid.origin[a]) / cell_size).floor() as i64);
    let mut members: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
    for (i, p) in cloud.coords.iter().enumerate() {
        members.entry(key(p)).or_default().push(i);
    }
    if members.len() <= max_voxels {
        return Ok(cloud.clone());
    }
    let center = cloud.coords[rng.gen_range(0..cloud.len())];
    let mut voxels: Vec<([i64; 3], f64)> = members
        .keys()
        .map(|k| {
            let d2: f64 = (0..3)
                .map(|a| {
                    let c = grid.origin[a] + (k[a] as f64 + 0.5) * cell_size;
                    (c - center[a]) * (c - center[a])
                })
                .sum();
            (*k, d2)
        })
        .collect();
    voxels.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    let mut keep: Vec<usize> = voxels[..max_voxels].iter().flat_map(|(k, _)| members[k].clone()).collect();
    keep.sort_unstable();
    Ok(cloud.subset(&keep))
}

/// One inference fragment: the points fed to the network and, among them,
/// the positions whose predictions the fragment owns.
#[derive(Clone, Debug, PartialEq)]
pub struct Fragment {
    pub points: Vec<usize>,
    /// Indices into `points`.
    pub owned: Vec<usize>,
}

/// Covers a cloud with crop-shaped fragments of at most `max_voxels` voxels.
/// Each fragment is the neighborhood of the first uncovered voxel (in grid
/// order) and owns the voxels of that neighborhood not owned earlier, so
/// every point is owned exactly once.
pub fn fragments(cloud: &PointCloud, cell_size: f64, max_voxels: usize) -> Result<Vec<Fragment>> {
    if cloud.is_empty() {
        return Err(Error::Input("cannot fragment an empty cloud".into()));
    }
    if max_voxels == 0 {
        return Err(Error::Config("fragment size must be >= 1".into()));
    }
    let grid = VoxelGrid::aligned(&cloud.coords, cell_size, 21)?;
    let key = |p: &[f64; 3]| [0, 1, 2].map(|a| ((p[a] - grid.origin[a]) / cell_size).floor() as i64);
    let mut members: BTreeMap<[i64; 3], Vec<usize>> = BTreeMap::new();
    for (i, p) in cloud.coords.iter().enumerate() {
        members.entry(key(p)).or_default().push(i);
    }
    let keys: Vec<[i64; 3]> = members.keys().copied().collect();
    if keys.len() <= max_voxels {
        let points: Vec<usize> = (0..cloud.len()).collect();
        return Ok(vec![Fragment { owned: points.clone(), points }]);
    }
    let mut covered = vec![false; keys.len()];
    let mut out = Vec::new();
    let mut next = 0;
    while next < keys.len() {
        let c = keys[next];
        let mut near: Vec<(i64, usize)> = keys
            .iter()
            .enumerate()
            .map(|(j, k)| ((0..3).map(|a| (k[a] - c[a]).pow(2)).sum::<i64>(), j))
            .collect();
        near.sort_unstable();
        near.truncate(max_voxels);
        near.sort_unstable_by_key(|&(_, j)| j);
        let mut points = Vec::new();
        let mut owned = Vec::new();
        for &(_, j) in &near {
            for &i in &members[&keys[j]] {
                if !covered[j] {
                    owned.push(points.len());
                }
                points.push(i);
            }
        }
        for &(_, j) in &near {
            covered[j] = true;
        }
        out.push(Fragment { points, owned });
        while next < keys.len() && covered[next] {
            next += 1;
        }
    }
    Ok(out)
}

/// Mean distance from up to `max_queries` evenly spaced points to their
/// nearest neighbor (brute force).
pub fn mean_nn_distance(coords: &[[f64; 3]], max_queries: usize) -> f64 {
    nn_distances(coords, max_queries).iter().sum::<f64>() / coords.len().min(max_queries).max(1) as f64
}

pub fn nn_distances(coords: &[[f64; 3]], max_queries: usize) -> Vec<f64> {
    let n = coords.len();
    if n < 2 {
        return vec![0.0; n.min(1)];
    }
    let q = n.min(max_queries.max(1));
    (0..q)
        .map(|j| {
            let i = j * n / q;
            let p = coords[i];
            let mut best = f64::INFINITY;
            for (k, o) in coords.iter().enumerate() {
                if k != i {
                    let d = (p[0] - o[0]).powi(2) + (p[1] - o[1]).powi(2) + (p[2] - o[2]).powi(2);
                    best = best.min(d);
                }
            }
            best.sqrt()
        })
        .collect()
}
