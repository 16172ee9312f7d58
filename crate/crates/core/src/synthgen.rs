//! Raw vessel-like images built from connected line segments.
//!
//! A tree grows breadth-first from a root at the circle center. Every node
//! spawns up to `max_children` branches whose lengths are normal around
//! `mean_length` and whose directions deviate from the stem by a normal
//! angle centered on `+branch_angle` or `-branch_angle` (chosen by a fair
//! coin). Branches whose endpoint leaves the circle are redrawn. Each
//! segment gets its own uniformly drawn gray level, and the label mask is
//! exactly the set of rasterized pixels.

use std::f64::consts::PI;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::config::DatasetVariant;
use crate::error::{ConfigError, GenerateError};
use crate::raster::{BinaryMask, GrayImage};
use crate::rng::{stream_rng, STREAM_GEOMETRY};

/// Redraws allowed per branch before its parent node is marked exhausted.
pub const BRANCH_RETRIES: u32 = 16;

/// Shortest segment that is kept; shorter normal draws are redrawn.
pub const MIN_SEGMENT_LENGTH: f64 = 2.0;

/// Integer pixel coordinates (`y` grows downward).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Point {
    pub x: i32,
    pub y: i32,
}

impl Point {
    pub const fn new(x: i32, y: i32) -> Self {
        Self { x, y }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    /// Side of the square output image, in pixels.
    pub image_size: usize,
    pub circle_center: [i32; 2],
    pub circle_radius: f64,
    /// Maximum number of branch nodes (the root is not counted).
    pub max_nodes: usize,
    pub max_children: usize,
    pub mean_length: f64,
    pub sigma_length: f64,
    /// Mean branching angle, radians.
    pub branch_angle: f64,
    pub sigma_angle: f64,
    pub line_width: usize,
    pub gray_range: [f64; 2],
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self::for_variant(DatasetVariant::Two)
    }
}

impl GeneratorConfig {
    /// Wide, high-contrast lines (variant 1) or thin, low-contrast lines
    /// (variant 2) on the shared default geometry.
    pub fn for_variant(variant: DatasetVariant) -> Self {
        let (line_width, gray_range) = match variant {
            DatasetVariant::One => (3, [0.5, 1.0]),
            DatasetVariant::Two => (1, [0.35, 0.6]),
        };
        Self {
            image_size: 128,
            circle_center: [64, 64],
            circle_radius: 56.0,
            max_nodes: 30,
            max_children: 3,
            mean_length: 14.0,
            sigma_length: 4.0,
            branch_angle: 0.5,
            sigma_angle: 0.25,
            line_width,
            gray_range,
            seed: 0,
        }
    }

    pub fn center(&self) -> Point {
        Point::new(self.circle_center[0], self.circle_center[1])
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let size = self.image_size as f64;
        if self.image_size == 0 {
            return Err(ConfigError::new("image_size", "must be positive"));
        }
        if !(self.circle_radius > 0.0 && self.circle_radius <= size / 2.0) {
            return Err(ConfigError::new(
                "circle_radius",
                format!("must be in (0, image_size/2], got {}", self.circle_radius),
            ));
        }
        let [cx, cy] = self.circle_center.map(f64::from);
        let r = self.circle_radius;
        if cx - r < 0.0 || cy - r < 0.0 || cx + r > size - 1.0 || cy + r > size - 1.0 {
            return Err(ConfigError::new(
                "circle_center",
                format!("circle at ({cx}, {cy}) radius {r} does not fit in a {size}-pixel image"),
            ));
        }
        if self.max_nodes == 0 {
            return Err(ConfigError::new("max_nodes", "must be at least 1"));
        }
        if self.max_children == 0 {
            return Err(ConfigError::new("max_children", "must be at least 1"));
        }
        if !(self.mean_length > 0.0 && self.mean_length.is_finite()) {
            return Err(ConfigError::new("mean_length", "must be positive and finite"));
        }
        if !(self.sigma_length >= 0.0 && self.sigma_length.is_finite()) {
            return Err(ConfigError::new("sigma_length", "must be >= 0"));
        }
        if !(self.sigma_angle >= 0.0 && self.sigma_angle.is_finite()) {
            return Err(ConfigError::new("sigma_angle", "must be >= 0"));
        }
        if !(self.branch_angle > 0.0 && self.branch_angle < PI) {
            return Err(ConfigError::new("branch_angle", "must lie in (0, pi)"));
        }
        if self.line_width == 0 {
            return Err(ConfigError::new("line_width", "must be at least 1"));
        }
        let [lo, hi] = self.gray_range;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(ConfigError::new(
                "gray_range",
                format!("need 0 < lo <= hi <= 1, got [{lo}, {hi}]"),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Node {
    pub position: Point,
    /// Direction of the segment that created this node (random for the root).
    pub direction: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Edge {
    pub parent: usize,
    pub child: usize,
    pub gray: f32,
    pub width: usize,
    /// Length before rounding the endpoint to the raster.
    pub length: f64,
}

/// Bookkeeping emitted alongside the tree.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GenerationTrace {
    /// Every normal length draw, in draw order, before truncation or
    /// rejection.
    pub length_draws: Vec<f64>,
    pub rejected_branches: usize,
    pub exhausted_nodes: usize,
}

/// Node 0 is the root; every other node was created by exactly one edge.
#[derive(Debug, Clone, PartialEq)]
pub struct VesselTree {
    pub nodes: Vec<Node>,
    pub edges: Vec<Edge>,
    pub trace: GenerationTrace,
}

impl VesselTree {
    /// Number of branch nodes, i.e. nodes other than the root.
    pub fn branch_count(&self) -> usize {
        self.nodes.len().saturating_sub(1)
    }

    pub fn children_of(&self, node: usize) -> usize {
        self.edges.iter().filter(|e| e.parent == node).count()
    }

    pub fn child_position(&self, edge: &Edge) -> Point {
        self.nodes[edge.child].position
    }
}

/// Generated image/label pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: GrayImage,
    pub label: BinaryMask,
    pub seed: u64,
}

/// Closed-disk membership test.
pub fn in_circle(p: Point, center: Point, radius: f64) -> bool {
    let dx = f64::from(p.x - center.x);
    let dy = f64::from(p.y - center.y);
    dx * dx + dy * dy <= radius * radius
}

/// Endpoint of a segment of `length` leaving `origin` at `angle`, rounded to
/// the nearest pixel.
pub fn gen_point(origin: Point, angle: f64, length: f64) -> Point {
    let x = f64::from(origin.x) + length * angle.cos();
    let y = f64::from(origin.y) + length * angle.sin();
    Point::new(x.round() as i32, y.round() as i32)
}

/// Wraps an angle into `(-pi, pi]`. Angles already in range are returned
/// unchanged.
pub fn normalize_angle(a: f64) -> f64 {
    if a > -PI && a <= PI {
        return a;
    }
    let w = (a + PI).rem_euclid(2.0 * PI) - PI;
    if w <= -PI {
        PI
    } else {
        w
    }
}

/// Direction of a new branch: the stem direction plus a normal deviation
/// whose mean is `+branch_angle` or `-branch_angle` with equal odds.
pub fn sample_branch_angle<R: Rng + ?Sized>(
    stem_direction: f64,
    branch_angle: f64,
    sigma_angle: f64,
    rng: &mut R,
) -> f64 {
    let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    let z: f64 = StandardNormal.sample(rng);
    normalize_angle(stem_direction + sign * branch_angle + sigma_angle * z)
}

/// Bresenham centerline from `p0` to `p1`, thickened by stamping a
/// `width` x `width` square on every centerline pixel. Out-of-bounds pixels
/// are clipped; later writes overwrite earlier ones.
pub fn rasterize_segment(
    image: &mut GrayImage,
    label: &mut BinaryMask,
    p0: Point,
    p1: Point,
    gray: f32,
    width: usize,
) {
    let (w, h) = (image.width() as i64, image.height() as i64);
    let lo = -((width as i64 - 1) / 2);
    let hi = width as i64 / 2;
    let stamp = |cx: i64, cy: i64| {
        for y in (cy + lo)..=(cy + hi) {
            if y < 0 || y >= h {
                continue;
            }
            for x in (cx + lo)..=(cx + hi) {
                if x < 0 || x >= w {
                    continue;
                }
                image.set(x as usize, y as usize, gray);
                label.set(x as usize, y as usize, true);
            }
        }
    };
    for_each_line_pixel(p0, p1, stamp);
}

/// Integer Bresenham walk, inclusive of both endpoints.
pub fn for_each_line_pixel(p0: Point, p1: Point, mut f: impl FnMut(i64, i64)) {
    let (mut x, mut y) = (i64::from(p0.x), i64::from(p0.y));
    let (x1, y1) = (i64::from(p1.x), i64::from(p1.y));
    let dx = (x1 - x).abs();
    let dy = -(y1 - y).abs();
    let sx = if x < x1 { 1 } else { -1 };
    let sy = if y < y1 { 1 } else { -1 };
    let mut err = dx + dy;
    loop {
        f(x, y);
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

fn draw_length(config: &GeneratorConfig, rng: &mut ChaCha8Rng, trace: &mut GenerationTrace) -> f64 {
    loop {
        let z: f64 = StandardNormal.sample(rng);
        let len = config.mean_length + config.sigma_length * z;
        trace.length_draws.push(len);
        if len >= MIN_SEGMENT_LENGTH {
            return len;
        }
    }
}

/// Grows the segment tree for `seed` without rasterizing it.
pub fn generate_tree(config: &GeneratorConfig, seed: u64) -> Result<VesselTree, GenerateError> {
    config.validate()?;
    let mut rng = stream_rng(seed, STREAM_GEOMETRY);
    let center = config.center();
    let root_dir = normalize_angle(rng.random_range(-PI..PI));
    let mut nodes = vec![Node {
        position: center,
        direction: root_dir,
    }];
    let mut edges = Vec::new();
    let mut trace = GenerationTrace::default();
    let [glo, ghi] = config.gray_range;

    let mut idx = 0;
    while nodes.len() - 1 < config.max_nodes && idx < nodes.len() {
        let parent = nodes[idx];
        let mut children = 0;
        'children: while children < config.max_children && nodes.len() - 1 < config.max_nodes {
            let mut attempts = 0;
            let (end, angle, length) = loop {
                let length = draw_length(config, &mut rng, &mut trace);
                let angle =
                    sample_branch_angle(parent.direction, config.branch_angle, config.sigma_angle, &mut rng);
                let end = gen_point(parent.position, angle, length);
                if end != parent.position && in_circle(end, center, config.circle_radius) {
                    break (end, angle, length);
                }
                trace.rejected_branches += 1;
                attempts += 1;
                if attempts > BRANCH_RETRIES {
                    trace.exhausted_nodes += 1;
                    break 'children;
                }
            };
            let gray = rng.random_range(glo..=ghi) as f32;
            nodes.push(Node {
                position: end,
                direction: angle,
            });
            edges.push(Edge {
                parent: idx,
                child: nodes.len() - 1,
                gray,
                width: config.line_width,
                length,
            });
            children += 1;
        }
        if idx == 0 && children == 0 {
            return Err(GenerateError::Degenerate {
                parameter: "mean_length",
                detail: format!(
                    "no branch of mean length {} fits in a circle of radius {} after {} retries",
                    config.mean_length, config.circle_radius, BRANCH_RETRIES
                ),
            });
        }
        idx += 1;
    }
    Ok(VesselTree { nodes, edges, trace })
}

/// Rasterizes a tree onto a zero image of the given size.
pub fn render_tree(tree: &VesselTree, image_size: usize) -> (GrayImage, BinaryMask) {
    let mut image = GrayImage::new(image_size, image_size);
    let mut label = BinaryMask::new(image_size, image_size);
    for e in &tree.edges {
        let p0 = tree.nodes[e.parent].position;
        let p1 = tree.nodes[e.child].position;
        rasterize_segment(&mut image, &mut label, p0, p1, e.gray, e.width);
    }
    (image, label)
}

/// Raw sample plus the tree it was rendered from.
pub fn generate_raw_with_tree(
    config: &GeneratorConfig,
    seed: u64,
) -> Result<(Sample, VesselTree), GenerateError> {
    let tree = generate_tree(config, seed)?;
    let (image, label) = render_tree(&tree, config.image_size);
    Ok((Sample { image, label, seed }, tree))
}

/// Noise-free sample: line segments on a zero background.
pub fn generate_raw(config: &GeneratorConfig, seed: u64) -> Result<Sample, GenerateError> {
    generate_raw_with_tree(config, seed).map(|(s, _)| s)
}
