//! Labeled point-cloud scenes and the SemanticKITTI binary layout.
//!
//! Point files hold four little-endian `f32` per point (x, y, z, intensity).
//! Label files hold one little-endian `u32` per point: the low 16 bits are the
//! semantic class, the high 16 bits the instance id. Instance id 0 means "no
//! instance".

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geom::{self, Point3};

/// Raw points with per-point intensity.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    points: Vec<Point3>,
    intensity: Vec<f64>,
}

impl PointCloud {
    pub fn new(points: Vec<Point3>, intensity: Vec<f64>) -> Result<Self> {
        if points.len() != intensity.len() {
            return Err(Error::shape(format!(
                "{} points but {} intensity values",
                points.len(),
                intensity.len()
            )));
        }
        if let Some(i) = points.iter().position(|p| !geom::is_finite(p)) {
            return Err(Error::invalid(format!("point {i} has a non-finite coordinate")));
        }
        Ok(Self { points, intensity })
    }

    /// Cloud with zero intensity everywhere.
    pub fn from_points(points: Vec<Point3>) -> Result<Self> {
        let n = points.len();
        Self::new(points, vec![0.0; n])
    }

    pub fn points(&self) -> &[Point3] {
        &self.points
    }

    pub fn intensity(&self) -> &[f64] {
        &self.intensity
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClassKind {
    Thing,
    Stuff,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassInfo {
    pub id: u16,
    pub name: String,
    pub kind: ClassKind,
}

/// Class table: things, stuff, ignored ids, and optional raw-id remapping.
///
/// Text form, one entry per line (`#` starts a comment):
///
/// ```text
/// thing  10 car
/// stuff  40 road
/// ignore 0  unlabeled
/// map    252 10        # raw id 252 is read as class 10
/// ```
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SemanticScheme {
    classes: BTreeMap<u16, ClassInfo>,
    ignore: BTreeMap<u16, String>,
    remap: BTreeMap<u16, u16>,
}

impl SemanticScheme {
    pub fn builder() -> SchemeBuilder {
        SchemeBuilder::default()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut b = SchemeBuilder::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = lineno + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let fields: Vec<&str> = content.split_whitespace().collect();
            let err = |reason: String| Error::Scheme { line, reason };
            let parse_id = |s: &str| s.parse::<u16>().map_err(|_| err(format!("`{s}` is not a class id")));
            match fields.as_slice() {
                ["thing", id, name] => b.add(line, parse_id(id)?, name, Some(ClassKind::Thing))?,
                ["stuff", id, name] => b.add(line, parse_id(id)?, name, Some(ClassKind::Stuff))?,
                ["ignore", id, name] => b.add(line, parse_id(id)?, name, None)?,
                ["ignore", id] => b.add(line, parse_id(id)?, "ignore", None)?,
                ["map", from, to] => {
                    let (from, to) = (parse_id(from)?, parse_id(to)?);
                    if b.remap.insert(from, to).is_some() {
                        return Err(err(format!("duplicate mapping for {from}")));
                    }
                }
                _ => return Err(err(format!("cannot parse `{content}`"))),
            }
        }
        b.finish()
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// SemanticKITTI raw label ids, with moving classes folded onto their
    /// static counterparts.
    pub fn semantic_kitti() -> Self {
        Self::parse(SEMANTIC_KITTI).expect("built-in scheme is valid")
    }

    /// Classes used by the synthetic scene generator (a SemanticKITTI subset).
    pub fn synthetic() -> Self {
        Self::parse(SYNTHETIC).expect("built-in scheme is valid")
    }

    /// Maps a raw on-disk id to a scheme class or ignore id.
    pub fn resolve(&self, raw: u16) -> Result<u16> {
        let id = self.remap.get(&raw).copied().unwrap_or(raw);
        if self.classes.contains_key(&id) || self.ignore.contains_key(&id) {
            Ok(id)
        } else {
            Err(Error::UnknownClass(raw))
        }
    }

    pub fn kind(&self, id: u16) -> Option<ClassKind> {
        self.classes.get(&id).map(|c| c.kind)
    }

    pub fn is_thing(&self, id: u16) -> bool {
        self.kind(id) == Some(ClassKind::Thing)
    }

    pub fn is_stuff(&self, id: u16) -> bool {
        self.kind(id) == Some(ClassKind::Stuff)
    }

    pub fn is_ignored(&self, id: u16) -> bool {
        self.ignore.contains_key(&id)
    }

    /// Whether `id` is a class or an ignore id of this scheme.
    pub fn contains(&self, id: u16) -> bool {
        self.classes.contains_key(&id) || self.ignore.contains_key(&id)
    }

    pub fn name(&self, id: u16) -> Option<&str> {
        self.classes
            .get(&id)
            .map(|c| c.name.as_str())
            .or_else(|| self.ignore.get(&id).map(String::as_str))
    }

    /// Evaluated classes in ascending id order.
    pub fn classes(&self) -> impl Iterator<Item = &ClassInfo> {
        self.classes.values()
    }

    pub fn things(&self) -> impl Iterator<Item = u16> + '_ {
        self.classes
            .values()
            .filter(|c| c.kind == ClassKind::Thing)
            .map(|c| c.id)
    }

    pub fn stuff(&self) -> impl Iterator<Item = u16> + '_ {
        self.classes
            .values()
            .filter(|c| c.kind == ClassKind::Stuff)
            .map(|c| c.id)
    }

    pub fn ignore_ids(&self) -> impl Iterator<Item = u16> + '_ {
        self.ignore.keys().copied()
    }

    /// Renders the scheme in its text form; `parse(to_text())` is the identity.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for c in self.classes.values() {
            let kw = match c.kind {
                ClassKind::Thing => "thing",
                ClassKind::Stuff => "stuff",
            };
            out.push_str(&format!("{kw} {} {}\n", c.id, c.name));
        }
        for (id, name) in &self.ignore {
            out.push_str(&format!("ignore {id} {name}\n"));
        }
        for (from, to) in &self.remap {
            out.push_str(&format!("map {from} {to}\n"));
        }
        out
    }
}

#[derive(Debug, Default)]
pub struct SchemeBuilder {
    classes: BTreeMap<u16, ClassInfo>,
    ignore: BTreeMap<u16, String>,
    remap: BTreeMap<u16, u16>,
}

impl SchemeBuilder {
    fn add(&mut self, line: usize, id: u16, name: &str, kind: Option<ClassKind>) -> Result<()> {
        if self.classes.contains_key(&id) || self.ignore.contains_key(&id) {
            return Err(Error::Scheme {
                line,
                reason: format!("class id {id} declared twice"),
            });
        }
        match kind {
            Some(kind) => {
                self.classes.insert(
                    id,
                    ClassInfo {
                        id,
                        name: name.to_string(),
                        kind,
                    },
                );
            }
            None => {
                self.ignore.insert(id, name.to_string());
            }
        }
        Ok(())
    }

    pub fn thing(mut self, id: u16, name: &str) -> Result<Self> {
        self.add(0, id, name, Some(ClassKind::Thing))?;
        Ok(self)
    }

    pub fn stuff(mut self, id: u16, name: &str) -> Result<Self> {
        self.add(0, id, name, Some(ClassKind::Stuff))?;
        Ok(self)
    }

    pub fn ignore(mut self, id: u16, name: &str) -> Result<Self> {
        self.add(0, id, name, None)?;
        Ok(self)
    }

    pub fn finish(self) -> Result<SemanticScheme> {
        for (&from, &to) in &self.remap {
            if !self.classes.contains_key(&to) && !self.ignore.contains_key(&to) {
                return Err(Error::Scheme {
                    line: 0,
                    reason: format!("mapping {from} -> {to} targets an undeclared id"),
                });
            }
        }
        Ok(SemanticScheme {
            classes: self.classes,
            ignore: self.ignore,
            remap: self.remap,
        })
    }
}

const SEMANTIC_KITTI: &str = "\
thing 10 car
thing 11 bicycle
thing 15 motorcycle
thing 18 truck
thing 20 other-vehicle
thing 30 person
thing 31 bicyclist
thing 32 motorcyclist
stuff 40 road
stuff 44 parking
stuff 48 sidewalk
stuff 49 other-ground
stuff 50 building
stuff 51 fence
stuff 70 vegetation
stuff 71 trunk
stuff 72 terrain
stuff 80 pole
stuff 81 traffic-sign
ignore 0 unlabeled
ignore 1 outlier
ignore 52 other-structure
ignore 99 other-object
map 13 20
map 16 20
map 60 40
map 252 10
map 253 31
map 254 30
map 255 32
map 256 20
map 257 20
map 258 18
map 259 20
";

const SYNTHETIC: &str = "\
thing 10 vehicle
thing 30 pedestrian
thing 31 cyclist
stuff 40 road
stuff 50 building
ignore 0 unlabeled
";

/// Per-point semantic class and instance id.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SceneLabels {
    pub semantic: Vec<u16>,
    pub instance: Vec<u16>,
}

impl SceneLabels {
    pub fn new(semantic: Vec<u16>, instance: Vec<u16>) -> Result<Self> {
        if semantic.len() != instance.len() {
            return Err(Error::shape(format!(
                "{} semantic labels but {} instance labels",
                semantic.len(),
                instance.len()
            )));
        }
        Ok(Self { semantic, instance })
    }

    pub fn len(&self) -> usize {
        self.semantic.len()
    }

    pub fn is_empty(&self) -> bool {
        self.semantic.is_empty()
    }

    /// Indices of points whose semantic class is a thing.
    pub fn things_indices(&self, scheme: &SemanticScheme) -> Vec<usize> {
        (0..self.len()).filter(|&i| scheme.is_thing(self.semantic[i])).collect()
    }

    pub fn encode(&self) -> Vec<u32> {
        self.semantic
            .iter()
            .zip(&self.instance)
            .map(|(&s, &i)| encode_label(s, i))
            .collect()
    }
}

/// Tight-box summary of one ground-truth instance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InstanceSummary {
    pub id: u16,
    pub count: usize,
    pub center: Point3,
    pub min: Point3,
    pub max: Point3,
}

/// Per-point offset vectors, aligned with a list of things points.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Offsets(pub Vec<Point3>);

impl Offsets {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[inline]
pub fn decode_label(raw: u32) -> (u16, u16) {
    ((raw & 0xFFFF) as u16, (raw >> 16) as u16)
}

#[inline]
pub fn encode_label(semantic: u16, instance: u16) -> u32 {
    ((instance as u32) << 16) | semantic as u32
}

pub fn read_points(path: &Path) -> Result<PointCloud> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() % 16 != 0 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: format!("{} bytes is not a multiple of 16", bytes.len()),
        });
    }
    let mut points = Vec::with_capacity(bytes.len() / 16);
    let mut intensity = Vec::with_capacity(bytes.len() / 16);
    for rec in bytes.chunks_exact(16) {
        let f = |k: usize| f32::from_le_bytes(rec[4 * k..4 * k + 4].try_into().unwrap()) as f64;
        points.push([f(0), f(1), f(2)]);
        intensity.push(f(3));
    }
    PointCloud::new(points, intensity).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

pub fn read_raw_labels(path: &Path) -> Result<Vec<u32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: format!("{} bytes is not a multiple of 4", bytes.len()),
        });
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
        .collect())
}

/// Decodes a label file and resolves every semantic id through `scheme`.
pub fn read_labels(path: &Path, scheme: &SemanticScheme) -> Result<SceneLabels> {
    let raw = read_raw_labels(path)?;
    let mut semantic = Vec::with_capacity(raw.len());
    let mut instance = Vec::with_capacity(raw.len());
    for r in raw {
        let (s, i) = decode_label(r);
        semantic.push(scheme.resolve(s)?);
        instance.push(i);
    }
    Ok(SceneLabels { semantic, instance })
}

pub fn read_scene(
    points_path: &Path,
    labels_path: &Path,
    scheme: &SemanticScheme,
) -> Result<(PointCloud, SceneLabels)> {
    let cloud = read_points(points_path)?;
    let labels = read_labels(labels_path, scheme)?;
    if cloud.len() != labels.len() {
        return Err(Error::SizeMismatch {
            points: cloud.len(),
            labels: labels.len(),
        });
    }
    Ok((cloud, labels))
}

pub fn points_to_bytes(cloud: &PointCloud) -> Vec<u8> {
    let mut out = Vec::with_capacity(cloud.len() * 16);
    for (p, &it) in cloud.points.iter().zip(&cloud.intensity) {
        for v in [p[0], p[1], p[2], it] {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

pub fn labels_to_bytes(labels: &SceneLabels) -> Vec<u8> {
    labels.encode().into_iter().flat_map(u32::to_le_bytes).collect()
}

pub fn write_points(path: &Path, cloud: &PointCloud) -> Result<()> {
    fs::write(path, points_to_bytes(cloud)).map_err(|e| Error::io(path, e))
}

pub fn write_labels(path: &Path, labels: &SceneLabels) -> Result<()> {
    fs::write(path, labels_to_bytes(labels)).map_err(|e| Error::io(path, e))
}

/// Axis-aligned tight-box center of every instance id > 0, ascending by id.
pub fn compute_instance_centers(cloud: &PointCloud, labels: &SceneLabels) -> Vec<InstanceSummary> {
    let mut boxes: BTreeMap<u16, InstanceSummary> = BTreeMap::new();
    for (p, &id) in cloud.points.iter().zip(&labels.instance) {
        if id == 0 {
            continue;
        }
        let entry = boxes.entry(id).or_insert(InstanceSummary {
            id,
            count: 0,
            center: *p,
            min: *p,
            max: *p,
        });
        entry.count += 1;
        for k in 0..3 {
            entry.min[k] = entry.min[k].min(p[k]);
            entry.max[k] = entry.max[k].max(p[k]);
        }
    }
    boxes
        .into_values()
        .map(|mut s| {
            for k in 0..3 {
                s.center[k] = 0.5 * (s.min[k] + s.max[k]);
            }
            s
        })
        .collect()
}

/// Ground-truth center for each listed point, looked up via its instance id.
/// Points without an instance map to their own position.
pub fn centers_for(
    cloud: &PointCloud,
    labels: &SceneLabels,
    indices: &[usize],
    summaries: &[InstanceSummary],
) -> Vec<Point3> {
    let by_id: BTreeMap<u16, Point3> = summaries.iter().map(|s| (s.id, s.center)).collect();
    indices
        .iter()
        .map(|&i| by_id.get(&labels.instance[i]).copied().unwrap_or(cloud.points[i]))
        .collect()
}

/// Mean L1 distance between predicted offsets and the offsets that would land
/// each point on its ground-truth center.
pub fn offset_loss(offsets: &Offsets, points: &[Point3], centers: &[Point3]) -> Result<f64> {
    let m = offsets.len();
    if points.len() != m || centers.len() != m {
        return Err(Error::shape(format!(
            "offsets {m}, points {}, centers {}",
            points.len(),
            centers.len()
        )));
    }
    if m == 0 {
        return Err(Error::Empty("offset loss over zero points"));
    }
    let total: f64 = (0..m)
        .map(|i| {
            let target = geom::sub(&centers[i], &points[i]);
            geom::l1(&geom::sub(&offsets.0[i], &target))
        })
        .sum();
    Ok(total / m as f64)
}
