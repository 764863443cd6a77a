//! File formats: point clouds, meshes, diagrams, training history,
//! checkpoints, run configuration and reports.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::extract::{MetricsConfig, MetricsReport, TriangleMesh};
use crate::losses::{BirthTermSet, EssentialMode, PartitionRule};
use crate::model::{Architecture, ModelError, SdfModel};
use crate::persistence::{Domain, Filtration, PersistenceDiagram, PersistencePair};
use crate::pointcloud::{PointCloud, Point3};
use crate::trainer::{Optimizer, TrainConfig, TrainHistory};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"STCH";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const DIAGRAM_HEADER: &str = "dim,birth,death,birth_index,death_index,essential";
pub const HISTORY_HEADER: &str = "iter,loss_total,loss_pull,loss_sig,loss_noise,lr,dropped_queries";

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("unsupported format: {0}")]
    Unsupported(String),
    #[error("truncated input: expected {expected} vertices, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("config line {line}: {message}")]
    Config { line: usize, message: String },
}

impl IoError {
    /// Whether the failure came from the file system rather than content.
    pub fn is_io(&self) -> bool {
        matches!(self, IoError::Io { .. })
    }
}

fn read_text(path: &Path) -> Result<String, IoError> {
    fs::read_to_string(path).map_err(|source| IoError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    fs::write(path, bytes).map_err(|source| IoError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn parse_f64(tok: &str, line: usize) -> Result<f64, IoError> {
    tok.parse::<f64>().map_err(|_| IoError::Parse {
        line,
        message: format!("not a number: {tok:?}"),
    })
}

// ---------------------------------------------------------------- clouds

/// Whitespace-separated `x y z [...]` lines; `#` lines and blank lines are
/// skipped, extra columns ignored.
pub fn parse_xyz(text: &str) -> Result<Vec<Point3>, IoError> {
    let mut points = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() < 3 {
            return Err(IoError::Parse {
                line: i + 1,
                message: format!("expected at least 3 columns, found {}", toks.len()),
            });
        }
        points.push([
            parse_f64(toks[0], i + 1)?,
            parse_f64(toks[1], i + 1)?,
            parse_f64(toks[2], i + 1)?,
        ]);
    }
    if points.len() < 2 {
        return Err(IoError::Degenerate(format!("need at least 2 points, found {}", points.len())));
    }
    Ok(points)
}

pub fn load_xyz(path: &Path) -> Result<Vec<Point3>, IoError> {
    parse_xyz(&read_text(path)?)
}

pub fn save_xyz(points: &[Point3], path: &Path) -> Result<(), IoError> {
    let mut s = String::with_capacity(points.len() * 48);
    for p in points {
        let _ = writeln!(s, "{:?} {:?} {:?}", p[0], p[1], p[2]);
    }
    write_bytes(path, s.as_bytes())
}

/// Minimal ascii PLY reader: vertex x, y, z; every other property and
/// element is skipped.
pub fn parse_ply_ascii(text: &str) -> Result<Vec<Point3>, IoError> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, l)) if l.trim() == "ply" => {}
        _ => return Err(IoError::Unsupported("missing 'ply' magic".into())),
    }
    // (name, count, property names) in header order.
    let mut elements: Vec<(String, usize, Vec<String>)> = Vec::new();
    let mut ended = false;
    for (i, raw) in lines.by_ref() {
        let toks: Vec<&str> = raw.split_whitespace().collect();
        match toks.as_slice() {
            ["format", fmt, ..] => {
                if *fmt != "ascii" {
                    return Err(IoError::Unsupported(format!("PLY format {fmt}")));
                }
            }
            ["element", name, count] => {
                let n = count.parse::<usize>().map_err(|_| IoError::Parse {
                    line: i + 1,
                    message: format!("bad element count {count:?}"),
                })?;
                elements.push((name.to_string(), n, Vec::new()));
            }
            ["property", "list", ..] => {
                let name = toks.last().copied().unwrap_or_default();
                match elements.last_mut() {
                    Some(e) => e.2.push(name.to_string()),
                    None => return Err(IoError::Parse { line: i + 1, message: "property before element".into() }),
                }
            }
            ["property", _ty, name] => match elements.last_mut() {
                Some(e) => e.2.push(name.to_string()),
                None => return Err(IoError::Parse { line: i + 1, message: "property before element".into() }),
            },
            ["end_header"] => {
                ended = true;
                break;
            }
            _ => {}
        }
    }
    if !ended {
        return Err(IoError::Unsupported("PLY header has no end_header".into()));
    }
    let vpos = elements
        .iter()
        .position(|e| e.0 == "vertex")
        .ok_or_else(|| IoError::Unsupported("no vertex element".into()))?;
    let props = &elements[vpos].2;
    let col = |n: &str| props.iter().position(|p| p == n);
    let (Some(cx), Some(cy), Some(cz)) = (col("x"), col("y"), col("z")) else {
        return Err(IoError::Unsupported("vertex element lacks x/y/z".into()));
    };
    // Data lines of elements before the vertex element are skipped.
    let skip: usize = elements[..vpos].iter().map(|e| e.1).sum();
    let expected = elements[vpos].1;
    let mut data = lines.filter(|(_, l)| !l.trim().is_empty()).skip(skip);
    let mut points = Vec::with_capacity(expected);
    for _ in 0..expected {
        let Some((i, raw)) = data.next() else {
            return Err(IoError::Truncated {
                expected,
                found: points.len(),
            });
        };
        let toks: Vec<&str> = raw.split_whitespace().collect();
        if toks.len() < props.len() {
            return Err(IoError::Parse {
                line: i + 1,
                message: format!("expected {} values, found {}", props.len(), toks.len()),
            });
        }
        points.push([parse_f64(toks[cx], i + 1)?, parse_f64(toks[cy], i + 1)?, parse_f64(toks[cz], i + 1)?]);
    }
    if points.len() < 2 {
        return Err(IoError::Degenerate(format!("need at least 2 points, found {}", points.len())));
    }
    Ok(points)
}

pub fn load_ply_ascii(path: &Path) -> Result<Vec<Point3>, IoError> {
    let bytes = fs::read(path).map_err(|source| IoError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let head = &bytes[..bytes.len().min(512)];
    if head.windows(6).any(|w| w == b"binary") {
        return Err(IoError::Unsupported("binary PLY".into()));
    }
    let text = String::from_utf8(bytes).map_err(|_| IoError::Unsupported("PLY is not utf-8 text".into()))?;
    parse_ply_ascii(&text)
}

/// Picks the reader by extension: `.ply` or whitespace columns otherwise.
pub fn load_cloud(path: &Path) -> Result<Vec<Point3>, IoError> {
    let is_ply = path
        .extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("ply"));
    if is_ply {
        load_ply_ascii(path)
    } else {
        load_xyz(path)
    }
}

// ---------------------------------------------------------------- meshes

/// `%.9g`-style formatting.
pub fn format_g9(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return format!("{x}");
    }
    let sci = format!("{x:.8e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-5..9).contains(&exp) {
        let decimals = (8 - exp) as usize;
        let s = format!("{x:.decimals$}");
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        }
    } else {
        let m = if mantissa.contains('.') {
            mantissa.trim_end_matches('0').trim_end_matches('.')
        } else {
            mantissa
        };
        format!("{m}e{}{:02}", if exp < 0 { '-' } else { '+' }, exp.abs())
    }
}

pub fn obj_string(mesh: &TriangleMesh) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# {} vertices, {} triangles", mesh.vertices.len(), mesh.triangles.len());
    for v in &mesh.vertices {
        let _ = writeln!(s, "v {} {} {}", format_g9(v[0]), format_g9(v[1]), format_g9(v[2]));
    }
    for t in &mesh.triangles {
        let _ = writeln!(s, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1);
    }
    s
}

pub fn save_obj(mesh: &TriangleMesh, path: &Path) -> Result<(), IoError> {
    write_bytes(path, obj_string(mesh).as_bytes())
}

/// Reads `v` and `f` records. Face entries may carry `/vt/vn` suffixes and
/// negative indices; polygons are fanned into triangles.
pub fn parse_obj(text: &str) -> Result<TriangleMesh, IoError> {
    let mut vertices = Vec::new();
    let mut triangles = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let mut toks = raw.split_whitespace();
        match toks.next() {
            Some("v") => {
                let c: Vec<&str> = toks.collect();
                if c.len() < 3 {
                    return Err(IoError::Parse { line: i + 1, message: "vertex needs 3 coordinates".into() });
                }
                vertices.push([parse_f64(c[0], i + 1)?, parse_f64(c[1], i + 1)?, parse_f64(c[2], i + 1)?]);
            }
            Some("f") => {
                let mut idx = Vec::new();
                for t in toks {
                    let head = t.split('/').next().unwrap_or(t);
                    let k: i64 = head.parse().map_err(|_| IoError::Parse {
                        line: i + 1,
                        message: format!("bad face index {t:?}"),
                    })?;
                    let resolved = if k > 0 { k - 1 } else { vertices.len() as i64 + k };
                    if resolved < 0 || resolved as usize >= vertices.len() {
                        return Err(IoError::Parse { line: i + 1, message: format!("face index {k} out of range") });
                    }
                    idx.push(resolved as usize);
                }
                if idx.len() < 3 {
                    return Err(IoError::Parse { line: i + 1, message: "face needs 3 vertices".into() });
                }
                for j in 1..idx.len() - 1 {
                    triangles.push([idx[0], idx[j], idx[j + 1]]);
                }
            }
            _ => {}
        }
    }
    Ok(TriangleMesh::new(vertices, triangles))
}

pub fn load_obj(path: &Path) -> Result<TriangleMesh, IoError> {
    parse_obj(&read_text(path)?)
}

// ---------------------------------------------------------------- diagrams

/// Pairs in export order: by birth, then birth vertex.
pub fn sorted_pairs(diagram: &PersistenceDiagram) -> Vec<PersistencePair> {
    let mut pairs = diagram.pairs.clone();
    pairs.sort_by(|a, b| a.birth.total_cmp(&b.birth).then(a.birth_vertex.cmp(&b.birth_vertex)));
    pairs
}

pub fn diagram_csv(diagram: &PersistenceDiagram) -> String {
    let mut s = String::from(DIAGRAM_HEADER);
    s.push('\n');
    for p in sorted_pairs(diagram) {
        let _ = writeln!(
            s,
            "0,{:?},{:?},{},{},{}",
            p.birth,
            p.death,
            p.birth_vertex,
            p.death_vertex,
            u8::from(p.essential)
        );
    }
    s
}

pub fn export_diagram(diagram: &PersistenceDiagram, path: &Path) -> Result<(), IoError> {
    write_bytes(path, diagram_csv(diagram).as_bytes())
}

pub fn parse_diagram_csv(text: &str) -> Result<Vec<PersistencePair>, IoError> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == DIAGRAM_HEADER => {}
        _ => return Err(IoError::Parse { line: 1, message: "missing diagram header".into() }),
    }
    let mut pairs = Vec::new();
    for (i, raw) in lines {
        if raw.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = raw.trim().split(',').collect();
        let bad = |m: &str| IoError::Parse { line: i + 1, message: m.to_string() };
        if f.len() != 6 {
            return Err(bad("expected 6 fields"));
        }
        if f[0] != "0" {
            return Err(bad("only dimension 0 is supported"));
        }
        let index = |t: &str| t.parse::<usize>().map_err(|_| bad("bad vertex index"));
        pairs.push(PersistencePair {
            birth: parse_f64(f[1], i + 1)?,
            death: parse_f64(f[2], i + 1)?,
            birth_vertex: index(f[3])?,
            death_vertex: index(f[4])?,
            essential: match f[5] {
                "0" => false,
                "1" => true,
                _ => return Err(bad("essential must be 0 or 1")),
            },
        });
    }
    Ok(pairs)
}

// ---------------------------------------------------------------- history

pub fn history_csv(history: &TrainHistory) -> String {
    let mut s = String::from(HISTORY_HEADER);
    s.push('\n');
    for r in &history.records {
        let _ = writeln!(
            s,
            "{},{:?},{:?},{:?},{:?},{:?},{}",
            r.iter, r.total, r.pull, r.significant, r.noise, r.lr, r.dropped
        );
    }
    s
}

pub fn save_history(history: &TrainHistory, path: &Path) -> Result<(), IoError> {
    write_bytes(path, history_csv(history).as_bytes())
}

// ---------------------------------------------------------------- checkpoints

/// `"STCH" | u32 version | u32 layers | u32 width | u32 skip | u64 count |
/// count × f64`, all little-endian; parameters in layer-major order with
/// weights before bias.
pub fn encode_checkpoint(model: &SdfModel) -> Vec<u8> {
    let arch = model.architecture();
    let flat = model.to_flat();
    let mut out = Vec::with_capacity(28 + 8 * flat.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(arch.layer_count() as u32).to_le_bytes());
    out.extend_from_slice(&(arch.hidden_width() as u32).to_le_bytes());
    out.extend_from_slice(&(arch.skip_layer() as u32).to_le_bytes());
    out.extend_from_slice(&(flat.len() as u64).to_le_bytes());
    for v in flat {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<SdfModel, IoError> {
    let bad = |m: String| IoError::Checkpoint(m);
    if bytes.len() < 28 {
        return Err(bad(format!("{} bytes is shorter than the header", bytes.len())));
    }
    if &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(bad("bad magic".into()));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
    let version = u32_at(4);
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let arch = Architecture::new(u32_at(8) as usize, u32_at(12) as usize, u32_at(16) as usize)?;
    let count = u64::from_le_bytes(bytes[20..28].try_into().expect("8 bytes")) as usize;
    let body = &bytes[28..];
    if body.len() != count.saturating_mul(8) {
        return Err(bad(format!("expected {count} parameters, blob holds {} bytes", body.len())));
    }
    let flat: Vec<f64> = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok(SdfModel::from_flat(arch, &flat)?)
}

pub fn save_checkpoint(model: &SdfModel, path: &Path) -> Result<(), IoError> {
    write_bytes(path, &encode_checkpoint(model))
}

pub fn load_checkpoint(path: &Path) -> Result<SdfModel, IoError> {
    let bytes = fs::read(path).map_err(|source| IoError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode_checkpoint(&bytes)
}

// ---------------------------------------------------------------- frame

/// The normalization of a training cloud, so ground truth can be mapped
/// into the model's frame.
pub fn frame_string(cloud: &PointCloud) -> String {
    let t = cloud.translation;
    format!("scale = {:?}\ntranslation = {:?} {:?} {:?}\n", cloud.scale, t[0], t[1], t[2])
}

/// Returns `(scale, translation)`.
pub fn parse_frame(text: &str) -> Result<(f64, Point3), IoError> {
    let mut scale = None;
    let mut translation = None;
    for (i, raw) in text.lines().enumerate() {
        let Some((k, v)) = raw.split_once('=') else { continue };
        match k.trim() {
            "scale" => scale = Some(parse_f64(v.trim(), i + 1)?),
            "translation" => {
                let c: Vec<&str> = v.split_whitespace().collect();
                if c.len() != 3 {
                    return Err(IoError::Parse { line: i + 1, message: "translation needs 3 values".into() });
                }
                translation = Some([parse_f64(c[0], i + 1)?, parse_f64(c[1], i + 1)?, parse_f64(c[2], i + 1)?]);
            }
            other => return Err(IoError::Parse { line: i + 1, message: format!("unknown key {other:?}") }),
        }
    }
    match (scale, translation) {
        (Some(s), Some(t)) if s > 0.0 && s.is_finite() => Ok((s, t)),
        _ => Err(IoError::Parse { line: 0, message: "frame needs a positive scale and a translation".into() }),
    }
}

// ---------------------------------------------------------------- report

pub fn report_json(report: &MetricsReport) -> String {
    let mut s = serde_json::to_string_pretty(report).expect("report serializes");
    s.push('\n');
    s
}

pub fn save_report(report: &MetricsReport, path: &Path) -> Result<(), IoError> {
    write_bytes(path, report_json(report).as_bytes())
}

// ---------------------------------------------------------------- config

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Full,
    Desk,
}

impl Preset {
    fn train(self) -> TrainConfig {
        match self {
            Preset::Full => TrainConfig::default(),
            Preset::Desk => TrainConfig::desk(),
        }
    }

    fn as_str(self) -> &'static str {
        match self {
            Preset::Full => "full",
            Preset::Desk => "desk",
        }
    }
}

/// Everything a `reconstruct` run needs. Paths are overridden by the
/// command line.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub preset: Preset,
    pub input: String,
    pub out: String,
    pub train: TrainConfig,
    pub normalize_extent: f64,
    pub mesh_resolution: usize,
    pub mesh_iso: f64,
    pub metrics: MetricsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::from_preset(Preset::Desk)
    }
}

/// Accepted keys in echo order.
pub const CONFIG_KEYS: &[&str] = &[
    "preset",
    "input",
    "out",
    "seed",
    "layers",
    "width",
    "skip",
    "init",
    "init_radius",
    "iterations",
    "batch_points",
    "batch_queries",
    "optimizer",
    "noise_std",
    "base_lr",
    "warmup_iters",
    "sigma_k",
    "lambda1",
    "lambda2",
    "curriculum_start_iter",
    "topo_resolution",
    "domain_half",
    "filtration",
    "partition",
    "birth_term_set",
    "essential",
    "term_significant",
    "term_noise_birth",
    "term_noise_persistence",
    "snapshot_every",
    "normalize_extent",
    "mesh_resolution",
    "mesh_iso",
    "metric_samples",
    "metric_seed",
    "metric_significant_grid",
];

/// Tail of the run during which the topological terms are active when
/// `curriculum_start_iter` is left on `auto`.
pub const AUTO_CURRICULUM_TAIL: usize = 500;

impl RunConfig {
    pub fn from_preset(preset: Preset) -> Self {
        Self {
            preset,
            input: String::new(),
            out: String::new(),
            train: preset.train(),
            normalize_extent: 0.9,
            mesh_resolution: 64,
            mesh_iso: 0.0,
            metrics: MetricsConfig::default(),
        }
    }

    pub fn parse(text: &str) -> Result<Self, IoError> {
        let mut entries: Vec<(usize, &str, &str)> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |m: String| IoError::Config { line: i + 1, message: m };
            let (k, v) = line.split_once('=').ok_or_else(|| err("expected key = value".into()))?;
            let (k, v) = (k.trim(), v.trim());
            if !CONFIG_KEYS.contains(&k) {
                return Err(err(format!("unknown key {k:?}")));
            }
            if entries.iter().any(|e| e.1 == k) {
                return Err(err(format!("duplicate key {k:?}")));
            }
            entries.push((i + 1, k, v));
        }
        let preset = match entries.iter().find(|e| e.1 == "preset") {
            None | Some(&(_, _, "desk")) => Preset::Desk,
            Some(&(_, _, "full")) => Preset::Full,
            Some(&(line, _, v)) => {
                return Err(IoError::Config { line, message: format!("preset must be desk or full, got {v:?}") })
            }
        };
        let mut cfg = Self::from_preset(preset);
        let mut noise_std = match cfg.train.optimizer {
            Optimizer::SgdRobbinsMonro { noise_std } => noise_std,
            Optimizer::Adam => 0.0,
        };
        let mut arch = (
            cfg.train.architecture.layer_count(),
            cfg.train.architecture.hidden_width(),
            cfg.train.architecture.skip_layer(),
        );
        let mut geometric = cfg.train.init_radius.is_some();
        let mut radius = cfg.train.init_radius.unwrap_or(0.5);
        let mut curriculum: Option<usize> = None;
        let mut sgd = matches!(cfg.train.optimizer, Optimizer::SgdRobbinsMonro { .. });
        for key in CONFIG_KEYS {
            let Some(&(line, _, v)) = entries.iter().find(|e| e.1 == *key) else { continue };
            let err = |m: String| IoError::Config { line, message: format!("{key}: {m}") };
            let uint = || v.parse::<usize>().map_err(|_| err(format!("expected a non-negative integer, got {v:?}")));
            let float = || {
                v.parse::<f64>()
                    .ok()
                    .filter(|x| x.is_finite())
                    .ok_or_else(|| err(format!("expected a finite number, got {v:?}")))
            };
            let boolean = || match v {
                "true" => Ok(true),
                "false" => Ok(false),
                _ => Err(err(format!("expected true or false, got {v:?}"))),
            };
            let t = &mut cfg.train;
            match *key {
                "preset" => {}
                "input" => cfg.input = v.to_string(),
                "out" => cfg.out = v.to_string(),
                "seed" => t.seed = v.parse().map_err(|_| err(format!("expected an integer, got {v:?}")))?,
                "layers" => arch.0 = uint()?,
                "width" => arch.1 = uint()?,
                "skip" => arch.2 = uint()?,
                "init" => {
                    geometric = match v {
                        "geometric" => true,
                        "standard" => false,
                        _ => return Err(err(format!("expected geometric or standard, got {v:?}"))),
                    }
                }
                "init_radius" => radius = float()?,
                "iterations" => t.iterations = uint()?,
                "batch_points" => t.batch_points = uint()?,
                "batch_queries" => t.batch_queries = uint()?,
                "optimizer" => {
                    sgd = match v {
                        "adam" => false,
                        "sgd_robbins_monro" => true,
                        _ => return Err(err(format!("expected adam or sgd_robbins_monro, got {v:?}"))),
                    }
                }
                "noise_std" => noise_std = float()?,
                "base_lr" => t.base_lr = float()?,
                "warmup_iters" => t.warmup_iters = uint()?,
                "sigma_k" => t.sigma_k = uint()?,
                "lambda1" => t.weights.lambda1 = float()?,
                "lambda2" => t.weights.lambda2 = float()?,
                "curriculum_start_iter" => curriculum = if v == "auto" { None } else { Some(uint()?) },
                "topo_resolution" => t.topo.resolution = uint()?,
                "domain_half" => {
                    let h = float()?;
                    if h <= 0.0 {
                        return Err(err("must be positive".into()));
                    }
                    t.topo.domain = Domain::cube(h);
                }
                "filtration" => {
                    t.topo.filtration = match v {
                        "raw" => Filtration::Raw,
                        "absolute" => Filtration::Absolute,
                        _ => return Err(err(format!("expected raw or absolute, got {v:?}"))),
                    }
                }
                "partition" => t.topo.rule = parse_partition(v).map_err(err)?,
                "birth_term_set" => {
                    t.topo.birth_terms = match v {
                        "noise" => BirthTermSet::Noise,
                        "significant" => BirthTermSet::Significant,
                        _ => return Err(err(format!("expected noise or significant, got {v:?}"))),
                    }
                }
                "essential" => {
                    t.topo.essential = match v {
                        "capped" => EssentialMode::Capped,
                        "excluded" => EssentialMode::Excluded,
                        _ => return Err(err(format!("expected capped or excluded, got {v:?}"))),
                    }
                }
                "term_significant" => t.topo.terms.significant = boolean()?,
                "term_noise_birth" => t.topo.terms.noise_birth = boolean()?,
                "term_noise_persistence" => t.topo.terms.noise_persistence = boolean()?,
                "snapshot_every" => t.snapshot_every = Some(uint()?).filter(|&n| n > 0),
                "normalize_extent" => cfg.normalize_extent = float()?,
                "mesh_resolution" => cfg.mesh_resolution = uint()?,
                "mesh_iso" => cfg.mesh_iso = float()?,
                "metric_samples" => cfg.metrics.samples = uint()?,
                "metric_seed" => cfg.metrics.seed = v.parse().map_err(|_| err(format!("expected an integer, got {v:?}")))?,
                "metric_significant_grid" => cfg.metrics.significant_grid = uint()?,
                _ => unreachable!("key list and match arms agree"),
            }
        }
        cfg.train.architecture = Architecture::new(arch.0, arch.1, arch.2)?;
        cfg.train.init_radius = geometric.then_some(radius);
        cfg.train.optimizer = if sgd {
            Optimizer::SgdRobbinsMonro { noise_std }
        } else {
            Optimizer::Adam
        };
        cfg.train.weights.curriculum_start_iter =
            curriculum.unwrap_or(cfg.train.iterations - cfg.train.iterations.min(AUTO_CURRICULUM_TAIL));
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, IoError> {
        Self::parse(&read_text(path)?)
    }

    /// Fully resolved `key = value` text; parsing it gives back `self`.
    pub fn to_text(&self) -> String {
        let t = &self.train;
        let a = t.architecture;
        let noise_std = match t.optimizer {
            Optimizer::SgdRobbinsMonro { noise_std } => noise_std,
            Optimizer::Adam => 0.0,
        };
        let values: Vec<String> = vec![
            self.preset.as_str().into(),
            self.input.clone(),
            self.out.clone(),
            t.seed.to_string(),
            a.layer_count().to_string(),
            a.hidden_width().to_string(),
            a.skip_layer().to_string(),
            if t.init_radius.is_some() { "geometric" } else { "standard" }.into(),
            format!("{:?}", t.init_radius.unwrap_or(0.5)),
            t.iterations.to_string(),
            t.batch_points.to_string(),
            t.batch_queries.to_string(),
            match t.optimizer {
                Optimizer::Adam => "adam",
                Optimizer::SgdRobbinsMonro { .. } => "sgd_robbins_monro",
            }
            .into(),
            format!("{noise_std:?}"),
            format!("{:?}", t.base_lr),
            t.warmup_iters.to_string(),
            t.sigma_k.to_string(),
            format!("{:?}", t.weights.lambda1),
            format!("{:?}", t.weights.lambda2),
            t.weights.curriculum_start_iter.to_string(),
            t.topo.resolution.to_string(),
            format!("{:?}", t.topo.domain.max[0]),
            t.topo.filtration.as_str().into(),
            partition_str(t.topo.rule),
            match t.topo.birth_terms {
                BirthTermSet::Noise => "noise",
                BirthTermSet::Significant => "significant",
            }
            .into(),
            match t.topo.essential {
                EssentialMode::Capped => "capped",
                EssentialMode::Excluded => "excluded",
            }
            .into(),
            t.topo.terms.significant.to_string(),
            t.topo.terms.noise_birth.to_string(),
            t.topo.terms.noise_persistence.to_string(),
            t.snapshot_every.unwrap_or(0).to_string(),
            format!("{:?}", self.normalize_extent),
            self.mesh_resolution.to_string(),
            format!("{:?}", self.mesh_iso),
            self.metrics.samples.to_string(),
            self.metrics.seed.to_string(),
            self.metrics.significant_grid.to_string(),
        ];
        let mut s = String::new();
        for (k, v) in CONFIG_KEYS.iter().zip(values) {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    pub fn validate(&self) -> Result<(), String> {
        self.train.validate().map_err(|e| e.to_string())?;
        let d = self.train.topo.domain;
        if !(self.normalize_extent > 0.0 && self.normalize_extent <= d.max[0]) {
            return Err(format!(
                "normalize_extent must lie in (0, domain_half = {:?}]",
                d.max[0]
            ));
        }
        if self.mesh_resolution < 8 {
            return Err("mesh_resolution must be at least 8".into());
        }
        if self.metrics.samples == 0 || self.metrics.significant_grid < 2 {
            return Err("metric_samples must be positive and metric_significant_grid at least 2".into());
        }
        Ok(())
    }
}

fn parse_partition(v: &str) -> Result<PartitionRule, String> {
    let bad = || format!("expected top_k:<n> or threshold:<x>, got {v:?}");
    let (kind, arg) = v.split_once(':').ok_or_else(bad)?;
    match kind.trim() {
        "top_k" => arg.trim().parse().map(PartitionRule::TopK).map_err(|_| bad()),
        "threshold" => arg
            .trim()
            .parse::<f64>()
            .ok()
            .filter(|x| x.is_finite())
            .map(PartitionRule::Threshold)
            .ok_or_else(bad),
        _ => Err(bad()),
    }
}

fn partition_str(rule: PartitionRule) -> String {
    match rule {
        PartitionRule::TopK(k) => format!("top_k:{k}"),
        PartitionRule::Threshold(t) => format!("threshold:{t:?}"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::extract::TriangleMesh;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn xyz_examples() {
        assert_eq!(parse_xyz("0 0 0\n1 0 0\n").unwrap().len(), 2);
        let p = parse_xyz("# c\n0 0 0 0 0 1\n\n1 2 3\n").unwrap();
        assert_eq!(p, vec![[0.0; 3], [1.0, 2.0, 3.0]]);
        match parse_xyz("0 0\n") {
            Err(IoError::Parse { line: 1, .. }) => {}
            other => panic!("{other:?}"),
        }
        match parse_xyz("0 0 0\n1 x 0\n") {
            Err(IoError::Parse { line: 2, .. }) => {}
            other => panic!("{other:?}"),
        }
        assert!(matches!(parse_xyz("0 0 0\n"), Err(IoError::Degenerate(_))));
    }

    #[test]
    fn ply_examples() {
        let basic = "ply\nformat ascii 1.0\nelement vertex 3\nproperty float x\nproperty float y\nproperty float z\nend_header\n0 0 0\n1 0 0\n0 1 0\n";
        assert_eq!(parse_ply_ascii(basic).unwrap().len(), 3);
        let colored = "ply\nformat ascii 1.0\ncomment c\nelement vertex 2\nproperty uchar red\nproperty float x\nproperty float y\nproperty float z\nproperty uchar green\nelement face 1\nproperty list uchar int vertex_indices\nend_header\n255 1 2 3 0\n7 4 5 6 9\n3 0 1 1\n";
        assert_eq!(parse_ply_ascii(colored).unwrap(), vec![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]);
        let short = "ply\nformat ascii 1.0\nelement vertex 5\nproperty float x\nproperty float y\nproperty float z\nend_header\n0 0 0\n1 0 0\n0 1 0\n";
        assert!(matches!(parse_ply_ascii(short), Err(IoError::Truncated { expected: 5, found: 3 })));
        let binary = "ply\nformat binary_little_endian 1.0\nelement vertex 1\nend_header\n";
        assert!(matches!(parse_ply_ascii(binary), Err(IoError::Unsupported(_))));
        let noxyz = "ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\nproperty float y\nend_header\n0 0\n1 1\n";
        assert!(matches!(parse_ply_ascii(noxyz), Err(IoError::Unsupported(_))));
    }

    #[test]
    fn binary_ply_file_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.ply");
        let mut bytes = b"ply\nformat binary_little_endian 1.0\nelement vertex 1\nproperty float x\nproperty float y\nproperty float z\nend_header\n".to_vec();
        bytes.extend_from_slice(&[0xff, 0xfe, 0x00, 0x80, 0, 0, 0, 0, 0, 0, 0, 0]);
        fs::write(&path, bytes).unwrap();
        assert!(matches!(load_ply_ascii(&path), Err(IoError::Unsupported(_))));
        assert!(load_xyz(&dir.path().join("missing.xyz")).unwrap_err().is_io());
    }

    #[test]
    fn g9_matches_printf() {
        let cases = [
            (0.0, "0"),
            (1.0, "1"),
            (-0.5, "-0.5"),
            (0.1, "0.1"),
            (123456789.0, "123456789"),
            (1234567891.0, "1.23456789e+09"),
            (1.0 / 3.0, "0.333333333"),
            (2.0 / 3.0 * 1e-7, "6.66666667e-08"),
            (0.0001, "0.0001"),
            (0.99999999999, "1"),
        ];
        for (x, want) in cases {
            assert_eq!(format_g9(x), want, "{x}");
        }
    }

    #[test]
    fn obj_examples_and_round_trip() {
        let tri = TriangleMesh::new(vec![[0.0; 3], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]], vec![[0, 1, 2]]);
        let s = obj_string(&tri);
        assert_eq!(s.lines().filter(|l| l.starts_with("v ")).count(), 3);
        assert_eq!(s.lines().filter(|l| l.starts_with("f ")).collect::<Vec<_>>(), vec!["f 1 2 3"]);
        let empty = obj_string(&TriangleMesh::new(vec![], vec![]));
        assert!(empty.lines().all(|l| l.starts_with('#')) && !empty.is_empty());

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let vertices: Vec<Point3> = (0..200)
            .map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1e-3..1e-3)])
            .collect();
        let triangles = (0..100).map(|i| [i, i + 50, (i + 7) % 200]).collect();
        let mesh = TriangleMesh::new(vertices, triangles);
        let back = parse_obj(&obj_string(&mesh)).unwrap();
        assert_eq!(back.triangles, mesh.triangles);
        for (a, b) in back.vertices.iter().zip(&mesh.vertices) {
            for k in 0..3 {
                assert!((a[k] - b[k]).abs() <= 1e-8 * b[k].abs().max(1.0), "{a:?} {b:?}");
            }
        }
        let quad = parse_obj("v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1/1/1 2/2/2 3/3/3 -1\n").unwrap();
        assert_eq!(quad.triangles, vec![[0, 1, 2], [0, 2, 3]]);
        assert!(parse_obj("v 0 0 0\nf 1 2 3\n").is_err());
    }

    fn pair(b: f64, d: f64, bi: usize, di: usize, essential: bool) -> PersistencePair {
        PersistencePair {
            birth: b,
            death: d,
            birth_vertex: bi,
            death_vertex: di,
            essential,
        }
    }

    #[test]
    fn diagram_csv_examples() {
        let single = PersistenceDiagram {
            pairs: vec![pair(0.1, 0.9, 5, 60, true)],
            dims: [4, 4, 4],
            filtration: Filtration::Absolute,
        };
        let csv = diagram_csv(&single);
        assert_eq!(csv, format!("{DIAGRAM_HEADER}\n0,0.1,0.9,5,60,1\n"));
        assert_eq!(parse_diagram_csv(&csv).unwrap(), single.pairs);
    }

    #[test]
    fn diagram_csv_round_trip_on_random_grids() {
        use crate::persistence::{persistence0, ScalarGrid};
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let values: Vec<f64> = (0..64).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let grid = ScalarGrid::cubic(4, Domain::default(), values).unwrap();
            let d = persistence0(&grid);
            let parsed = parse_diagram_csv(&diagram_csv(&d)).unwrap();
            assert_eq!(parsed, sorted_pairs(&d));
            let mut a = d.pairs.clone();
            let mut b = parsed.clone();
            a.sort_by_key(|p| p.birth_vertex);
            b.sort_by_key(|p| p.birth_vertex);
            assert_eq!(a, b);
            for w in parsed.windows(2) {
                assert!(w[0].birth < w[1].birth || (w[0].birth == w[1].birth && w[0].birth_vertex < w[1].birth_vertex));
            }
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let arch = Architecture::new(3, 16, 1).unwrap();
        let model = SdfModel::init_geometric(arch, 0.5, 3).unwrap();
        let bytes = encode_checkpoint(&model);
        assert_eq!(&bytes[..4], b"STCH");
        assert_eq!(bytes.len(), 28 + 8 * arch.parameter_count());
        let back = decode_checkpoint(&bytes).unwrap();
        let (a, b) = (model.to_flat(), back.to_flat());
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert_eq!(back.architecture(), arch);
        assert_eq!(encode_checkpoint(&back), bytes);
        assert!(decode_checkpoint(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_checkpoint(&bad).is_err());
    }

    #[test]
    fn frame_round_trip() {
        let cloud = PointCloud::normalize(&[[0.0, 1.0, 2.0], [3.0, -1.0, 0.5]], 0.9).unwrap();
        let (s, t) = parse_frame(&frame_string(&cloud)).unwrap();
        assert_eq!(s, cloud.scale);
        assert_eq!(t, cloud.translation);
    }

    #[test]
    fn config_defaults_and_fixpoint() {
        let empty = RunConfig::parse("").unwrap();
        assert_eq!(empty, RunConfig::default());
        assert_eq!(empty.train, TrainConfig::desk());
        let full = RunConfig::parse("preset = full\n").unwrap();
        assert_eq!(full.train, TrainConfig::default());
        for cfg in [empty, full] {
            let echo = cfg.to_text();
            let again = RunConfig::parse(&echo).unwrap();
            assert_eq!(again, cfg);
            assert_eq!(again.to_text(), echo);
        }
        let custom = RunConfig::parse(
            "iterations = 300 # short\nwarmup_iters = 10\noptimizer = sgd_robbins_monro\nnoise_std = 0.01\npartition = threshold:0.05\ninit = standard\nsnapshot_every = 7\nfiltration = raw\nlambda1 = 1e-7\n",
        )
        .unwrap();
        assert_eq!(custom.train.weights.curriculum_start_iter, 0);
        assert_eq!(custom.train.optimizer, Optimizer::SgdRobbinsMonro { noise_std: 0.01 });
        assert_eq!(custom.train.init_radius, None);
        let echo = custom.to_text();
        assert_eq!(RunConfig::parse(&echo).unwrap(), custom);
        assert_eq!(RunConfig::parse(&echo).unwrap().to_text(), echo);
        assert_eq!(echo.lines().count(), CONFIG_KEYS.len());
    }

    #[test]
    fn config_errors() {
        for bad in [
            "colour = red\n",
            "iterations = -1\n",
            "iterations = 5\niterations = 6\n",
            "no equals sign\n",
            "partition = top:1\n",
            "preset = huge\n",
            "lambda1 = nan\n",
            "layers = 1\n",
        ] {
            assert!(RunConfig::parse(bad).is_err(), "{bad}");
        }
        match RunConfig::parse("seed = 1\n\nbogus = 2\n") {
            Err(IoError::Config { line: 3, .. }) => {}
            other => panic!("{other:?}"),
        }
    }
}
