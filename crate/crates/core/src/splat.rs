//! The Gaussian-map data model: primitive parameterization, covariance
//! construction, initialization from colored point clouds, and storage.
//!
//! Covariances are parameterized as quaternion + per-axis log standard
//! deviations so they stay symmetric positive definite under unconstrained
//! optimization. Maps persist as binary little-endian PLY with one vertex
//! per primitive and all properties as 32-bit floats.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::geom::{Pose, Rotation};

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// One colored ellipsoid: position, orientation, per-axis log scales,
/// opacity logit, and RGB color.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPrimitive {
    pub position: Vector3<f64>,
    pub orientation: Rotation,
    /// Log of the per-axis standard deviations, in log scene units.
    pub log_scales: Vector3<f64>,
    /// Opacity stored pre-sigmoid so optimization is unconstrained.
    pub opacity_logit: f64,
    /// RGB in `[0, 1]`.
    pub color: [f64; 3],
}

impl GaussianPrimitive {
    pub fn isotropic(position: Vector3<f64>, scale: f64, color: [f64; 3], opacity: f64) -> Self {
        GaussianPrimitive {
            position,
            orientation: Rotation::identity(),
            log_scales: Vector3::repeat(scale.ln()),
            opacity_logit: logit(opacity),
            color,
        }
    }

    pub fn opacity(&self) -> f64 {
        sigmoid(self.opacity_logit)
    }

    pub fn scales(&self) -> Vector3<f64> {
        self.log_scales.map(f64::exp)
    }

    pub fn is_finite(&self) -> bool {
        self.position.iter().all(|v| v.is_finite())
            && self.log_scales.iter().all(|v| v.is_finite())
            && self.opacity_logit.is_finite()
            && self.color.iter().all(|v| v.is_finite())
            && self.orientation.wxyz().iter().all(|v| v.is_finite())
    }
}

/// `Sigma = R diag(exp(2*log_scales)) R^T`; symmetric positive definite for
/// any finite parameters.
pub fn covariance(p: &GaussianPrimitive) -> Matrix3<f64> {
    let r = p.orientation.to_matrix();
    let d = Matrix3::from_diagonal(&p.log_scales.map(|s| (2.0 * s).exp()));
    let sigma = r * d * r.transpose();
    // Symmetrize away the last bits of rounding from the triple product.
    (sigma + sigma.transpose()) * 0.5
}

/// The scene representation: an ordered collection of Gaussian primitives
/// plus scene metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMap {
    pub primitives: Vec<GaussianPrimitive>,
    /// Median camera-to-centroid distance at initialization time; used to
    /// scale near planes, thresholds, and perturbations.
    pub scene_scale: f64,
    pub metadata: BTreeMap<String, String>,
}

impl GaussianMap {
    pub fn new(primitives: Vec<GaussianPrimitive>, scene_scale: f64) -> Self {
        GaussianMap {
            primitives,
            scene_scale,
            metadata: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.primitives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.primitives.is_empty()
    }

    pub fn centroid(&self) -> Vector3<f64> {
        if self.primitives.is_empty() {
            return Vector3::zeros();
        }
        self.primitives.iter().map(|p| p.position).sum::<Vector3<f64>>()
            / self.primitives.len() as f64
    }
}

/// A colored point cloud, the seed for map initialization.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ColoredPointCloud {
    pub points: Vec<(Vector3<f64>, [f64; 3])>,
}

impl ColoredPointCloud {
    pub fn centroid(&self) -> Vector3<f64> {
        if self.points.is_empty() {
            return Vector3::zeros();
        }
        self.points.iter().map(|(p, _)| *p).sum::<Vector3<f64>>() / self.points.len() as f64
    }

    /// Reads either an ASCII PLY with x,y,z,red,green,blue vertex properties
    /// (uchar colors scaled from 0-255, float colors taken as-is) or a plain
    /// whitespace-separated table with six columns (colors in `[0, 1]`).
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        if text.trim_start().starts_with("ply") {
            Self::parse_ascii_ply(&text)
        } else {
            Self::parse_table(&text)
        }
    }

    fn parse_table(text: &str) -> Result<Self> {
        let mut points = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let cols: Vec<f64> = line
                .split_whitespace()
                .map(|t| {
                    t.parse::<f64>().map_err(|_| {
                        Error::malformed("point cloud", format!("line {}: bad number `{t}`", lineno + 1))
                    })
                })
                .collect::<Result<_>>()?;
            if cols.len() != 6 {
                return Err(Error::malformed(
                    "point cloud",
                    format!("line {}: expected 6 columns, got {}", lineno + 1, cols.len()),
                ));
            }
            points.push((
                Vector3::new(cols[0], cols[1], cols[2]),
                [cols[3], cols[4], cols[5]],
            ));
        }
        Ok(ColoredPointCloud { points })
    }

    fn parse_ascii_ply(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let mut vertex_count = None;
        let mut props: Vec<(String, String)> = Vec::new();
        let mut in_vertex_element = false;
        for line in lines.by_ref() {
            let line = line.trim();
            if line == "end_header" {
                break;
            }
            let mut toks = line.split_whitespace();
            match toks.next() {
                Some("format") => {
                    if toks.next() != Some("ascii") {
                        return Err(Error::malformed("point cloud PLY", "expected ascii format"));
                    }
                }
                Some("element") => {
                    let name = toks.next().unwrap_or("");
                    in_vertex_element = name == "vertex";
                    if in_vertex_element {
                        let count = toks
                            .next()
                            .and_then(|c| c.parse::<usize>().ok())
                            .ok_or_else(|| {
                                Error::malformed("point cloud PLY", "bad vertex element count")
                            })?;
                        vertex_count = Some(count);
                    }
                }
                Some("property") if in_vertex_element => {
                    let ty = toks.next().unwrap_or("").to_string();
                    let name = toks.next().unwrap_or("").to_string();
                    props.push((ty, name));
                }
                _ => {}
            }
        }
        let count = vertex_count
            .ok_or_else(|| Error::malformed("point cloud PLY", "missing vertex element"))?;
        let names: Vec<&str> = props.iter().map(|(_, n)| n.as_str()).collect();
        let index_of = |name: &str| -> Result<usize> {
            names.iter().position(|n| *n == name).ok_or_else(|| {
                Error::malformed("point cloud PLY", format!("vertex element missing property {name}"))
            })
        };
        let ix = index_of("x")?;
        let iy = index_of("y")?;
        let iz = index_of("z")?;
        let ir = index_of("red")?;
        let ig = index_of("green")?;
        let ib = index_of("blue")?;
        let color_scale = |i: usize| if props[i].0 == "uchar" || props[i].0 == "uint8" { 255.0 } else { 1.0 };

        let mut points = Vec::with_capacity(count);
        for k in 0..count {
            let line = lines.next().ok_or_else(|| {
                Error::malformed("point cloud PLY", format!("unexpected end of data at vertex {k}"))
            })?;
            let vals: Vec<f64> = line
                .split_whitespace()
                .map(|t| {
                    t.parse::<f64>().map_err(|_| {
                        Error::malformed("point cloud PLY", format!("vertex {k}: bad number `{t}`"))
                    })
                })
                .collect::<Result<_>>()?;
            if vals.len() != props.len() {
                return Err(Error::malformed(
                    "point cloud PLY",
                    format!("vertex {k}: expected {} values, got {}", props.len(), vals.len()),
                ));
            }
            points.push((
                Vector3::new(vals[ix], vals[iy], vals[iz]),
                [
                    vals[ir] / color_scale(ir),
                    vals[ig] / color_scale(ig),
                    vals[ib] / color_scale(ib),
                ],
            ));
        }
        Ok(ColoredPointCloud { points })
    }
}

const INITIAL_OPACITY: f64 = 0.1;
const SCALE_FLOOR_FACTOR: f64 = 1e-4;
const SCALE_CEIL_FACTOR: f64 = 0.1;

/// Median camera-to-centroid distance, the scene's characteristic length.
/// Falls back to 1.0 when no cameras are given.
pub fn scene_scale_from_cameras(cameras: &[Pose], centroid: &Vector3<f64>) -> f64 {
    if cameras.is_empty() {
        return 1.0;
    }
    let mut dists: Vec<f64> = cameras
        .iter()
        .map(|c| (c.camera_center() - centroid).norm())
        .collect();
    dists.sort_by(|a, b| a.total_cmp(b));
    let n = dists.len();
    if n % 2 == 1 {
        dists[n / 2]
    } else {
        0.5 * (dists[n / 2 - 1] + dists[n / 2])
    }
}

/// One isotropic primitive per cloud point: color copied, opacity 0.1, scale
/// from the mean distance to the 3 nearest neighbors clamped to
/// `[1e-4, 0.1] * scene_scale`.
pub fn init_from_points(cloud: &ColoredPointCloud, cameras: &[Pose]) -> Result<GaussianMap> {
    if cloud.points.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let scene_scale = scene_scale_from_cameras(cameras, &cloud.centroid());
    let floor = SCALE_FLOOR_FACTOR * scene_scale;
    let ceil = SCALE_CEIL_FACTOR * scene_scale;
    let n = cloud.points.len();
    let k = 3.min(n - 1);

    let primitives = cloud
        .points
        .iter()
        .enumerate()
        .map(|(i, (pos, color))| {
            let scale = if k == 0 {
                floor
            } else {
                let mut dists: Vec<f64> = cloud
                    .points
                    .iter()
                    .enumerate()
                    .filter(|(j, _)| *j != i)
                    .map(|(_, (q, _))| (q - pos).norm())
                    .collect();
                dists.sort_by(|a, b| a.total_cmp(b));
                let mean = dists[..k].iter().sum::<f64>() / k as f64;
                mean.clamp(floor, ceil)
            };
            GaussianPrimitive::isotropic(*pos, scale, *color, INITIAL_OPACITY)
        })
        .collect();

    Ok(GaussianMap::new(primitives, scene_scale))
}

const MAP_VERSION: u32 = 1;
const VERTEX_PROPS: [&str; 14] = [
    "x", "y", "z", "qw", "qx", "qy", "qz", "ls0", "ls1", "ls2", "opacity_logit", "r", "g", "b",
];

/// Writes the map as binary little-endian PLY. All vertex properties are
/// 32-bit floats; `scene_scale` and metadata travel in header comments.
pub fn save_map(map: &GaussianMap, path: &Path) -> Result<()> {
    if map.is_empty() {
        return Err(Error::EmptyMap);
    }
    for (key, value) in &map.metadata {
        if key.contains(['\n', '=', ' ']) || value.contains('\n') {
            return Err(Error::Config(format!("metadata key/value not storable: {key}")));
        }
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut header = String::new();
    header.push_str("ply\nformat binary_little_endian 1.0\n");
    header.push_str(&format!("comment splatmap_version {MAP_VERSION}\n"));
    header.push_str(&format!("comment scene_scale {}\n", map.scene_scale));
    for (key, value) in &map.metadata {
        header.push_str(&format!("comment meta {key}={value}\n"));
    }
    header.push_str(&format!("element vertex {}\n", map.len()));
    for prop in VERTEX_PROPS {
        header.push_str(&format!("property float {prop}\n"));
    }
    header.push_str("end_header\n");
    w.write_all(header.as_bytes()).map_err(|e| Error::io(path, e))?;

    let mut buf = Vec::with_capacity(map.len() * VERTEX_PROPS.len() * 4);
    for p in &map.primitives {
        let [qw, qx, qy, qz] = p.orientation.wxyz();
        let fields = [
            p.position.x,
            p.position.y,
            p.position.z,
            qw,
            qx,
            qy,
            qz,
            p.log_scales.x,
            p.log_scales.y,
            p.log_scales.z,
            p.opacity_logit,
            p.color[0],
            p.color[1],
            p.color[2],
        ];
        for f in fields {
            buf.extend_from_slice(&(f as f32).to_le_bytes());
        }
    }
    w.write_all(&buf).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a map written by [`save_map`]. Stored 32-bit floats are preserved
/// bit-exactly, so a load/save cycle reproduces the file byte for byte.
pub fn load_map(path: &Path) -> Result<GaussianMap> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let header_end = find_header_end(&bytes)
        .ok_or_else(|| Error::malformed("map PLY", "missing end_header"))?;
    let header = std::str::from_utf8(&bytes[..header_end])
        .map_err(|_| Error::malformed("map PLY", "header is not utf-8"))?;

    let mut vertex_count = None;
    let mut version = None;
    let mut scene_scale = None;
    let mut metadata = BTreeMap::new();
    let mut props = Vec::new();
    let mut in_vertex_element = false;
    let mut lines = header.lines();
    if lines.next() != Some("ply") {
        return Err(Error::malformed("map PLY", "missing ply magic"));
    }
    for line in lines {
        let mut toks = line.split_whitespace();
        match toks.next() {
            Some("format") => {
                if toks.next() != Some("binary_little_endian") {
                    return Err(Error::malformed("map PLY", "expected binary_little_endian format"));
                }
            }
            Some("comment") => match toks.next() {
                Some("splatmap_version") => {
                    version = toks.next().and_then(|v| v.parse::<u32>().ok());
                }
                Some("scene_scale") => {
                    scene_scale = toks.next().and_then(|v| v.parse::<f64>().ok());
                }
                Some("meta") => {
                    let rest = line.splitn(3, ' ').nth(2).unwrap_or("");
                    if let Some((key, value)) = rest.split_once('=') {
                        metadata.insert(key.to_string(), value.to_string());
                    }
                }
                _ => {}
            },
            Some("element") => {
                let name = toks.next().unwrap_or("");
                in_vertex_element = name == "vertex";
                if in_vertex_element {
                    vertex_count = toks.next().and_then(|c| c.parse::<usize>().ok());
                    if vertex_count.is_none() {
                        return Err(Error::malformed("map PLY", "bad vertex element count"));
                    }
                } else {
                    return Err(Error::malformed("map PLY", format!("unexpected element {name}")));
                }
            }
            Some("property") if in_vertex_element => {
                let ty = toks.next().unwrap_or("");
                if ty != "float" {
                    return Err(Error::malformed(
                        "map PLY",
                        format!("vertex element property must be float, got {ty}"),
                    ));
                }
                props.push(toks.next().unwrap_or("").to_string());
            }
            Some("end_header") => break,
            _ => {}
        }
    }

    match version {
        Some(MAP_VERSION) => {}
        Some(v) => {
            return Err(Error::malformed(
                "map PLY",
                format!("splatmap_version {v} is not supported (expected {MAP_VERSION})"),
            ))
        }
        None => return Err(Error::malformed("map PLY", "missing splatmap_version comment")),
    }
    if props != VERTEX_PROPS {
        let first_bad = VERTEX_PROPS
            .iter()
            .enumerate()
            .find(|(i, want)| props.get(*i).map(String::as_str) != Some(**want));
        let detail = match first_bad {
            Some((i, want)) => format!(
                "vertex element property {} should be `{want}`, found `{}`",
                i,
                props.get(i).map(String::as_str).unwrap_or("<missing>")
            ),
            None => "vertex element has extra properties".to_string(),
        };
        return Err(Error::malformed("map PLY", detail));
    }
    let count = vertex_count.ok_or_else(|| Error::malformed("map PLY", "missing vertex element"))?;
    if count == 0 {
        return Err(Error::EmptyMap);
    }

    let data = &bytes[header_end..];
    let stride = VERTEX_PROPS.len() * 4;
    if data.len() != count * stride {
        return Err(Error::malformed(
            "map PLY",
            format!(
                "vertex data truncated: expected {} bytes for {count} vertices, got {}",
                count * stride,
                data.len()
            ),
        ));
    }

    let mut primitives = Vec::with_capacity(count);
    for (i, chunk) in data.chunks_exact(stride).enumerate() {
        let mut fields = [0.0f64; 14];
        for (f, raw) in fields.iter_mut().zip(chunk.chunks_exact(4)) {
            *f = f32::from_le_bytes(raw.try_into().unwrap()) as f64;
        }
        if fields.iter().any(|f| !f.is_finite()) {
            return Err(Error::malformed("map PLY", format!("vertex {i} has non-finite fields")));
        }
        primitives.push(GaussianPrimitive {
            position: Vector3::new(fields[0], fields[1], fields[2]),
            orientation: Rotation::from_stored(fields[3], fields[4], fields[5], fields[6])
                .map_err(|_| Error::malformed("map PLY", format!("vertex {i} quaternion is not near unit")))?,
            log_scales: Vector3::new(fields[7], fields[8], fields[9]),
            opacity_logit: fields[10],
            color: [fields[11], fields[12], fields[13]],
        });
    }

    Ok(GaussianMap {
        primitives,
        scene_scale: scene_scale
            .ok_or_else(|| Error::malformed("map PLY", "missing scene_scale comment"))?,
        metadata,
    })
}

fn find_header_end(bytes: &[u8]) -> Option<usize> {
    let needle = b"end_header\n";
    bytes
        .windows(needle.len())
        .position(|w| w == needle)
        .map(|pos| pos + needle.len())
}
