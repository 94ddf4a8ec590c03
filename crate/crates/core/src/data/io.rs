//! On-disk dataset container.
//!
//! A dataset is a directory holding
//!
//! - `manifest`: `key = value` text (format version, sizes, attribute names,
//!   per-image identity and class tables);
//! - `images.f32`: little-endian `f32`, row-major `[n_images, channels, height, width]`;
//! - `attributes.u8` (optional): `[n_images, A]` bytes, 0 or 1;
//! - `groups.idx` (optional): little-endian `u32`, `[n_groups, K]`;
//! - `render.txt` (optional): generator parameters for synthetic data.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::nn::Matrix;

use super::synth::{Family, ShapeParams, ViewParams};
use super::{Attributes, DataError, GroupIndex, GroupedDataset, RenderInfo};

pub const DATASET_FORMAT_VERSION: u32 = 1;

fn join_nums<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(ToString::to_string).collect::<Vec<_>>().join(" ")
}

pub fn save_dataset(ds: &GroupedDataset, dir: &Path) -> Result<(), DataError> {
    ds.validate()?;
    fs::create_dir_all(dir)?;
    let mut m = String::new();
    m.push_str(&format!("format_version = {DATASET_FORMAT_VERSION}\n"));
    m.push_str(&format!("n_images = {}\n", ds.len()));
    m.push_str(&format!("channels = {}\nheight = {}\nwidth = {}\n", ds.channels, ds.height, ds.width));
    match &ds.attributes {
        Some(a) => m.push_str(&format!("has_attributes = 1\nattribute_names = {}\n", a.names.join(","))),
        None => m.push_str("has_attributes = 0\nattribute_names = \n"),
    }
    match &ds.groups {
        Some(g) => m.push_str(&format!("has_groups = 1\ngroup_size = {}\nn_groups = {}\n", g.k, g.len())),
        None => m.push_str("has_groups = 0\n"),
    }
    m.push_str(&format!("identity = {}\n", join_nums(&ds.identities)));
    m.push_str(&format!("class = {}\n", join_nums(&ds.classes)));
    fs::write(dir.join("manifest"), m)?;

    let mut blob = Vec::with_capacity(ds.images.data().len() * 4);
    for v in ds.images.data() {
        blob.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(dir.join("images.f32"), blob)?;

    let attr_path = dir.join("attributes.u8");
    match &ds.attributes {
        Some(a) => fs::write(&attr_path, &a.values)?,
        None if attr_path.exists() => fs::remove_file(&attr_path)?,
        None => {}
    }
    let groups_path = dir.join("groups.idx");
    match &ds.groups {
        Some(g) => {
            let bytes: Vec<u8> = g.indices.iter().flat_map(|i| i.to_le_bytes()).collect();
            fs::write(&groups_path, bytes)?;
        }
        None if groups_path.exists() => fs::remove_file(&groups_path)?,
        None => {}
    }
    let render_path = dir.join("render.txt");
    match &ds.render {
        Some(r) => fs::write(&render_path, render_to_text(r))?,
        None if render_path.exists() => fs::remove_file(&render_path)?,
        None => {}
    }
    Ok(())
}

fn render_to_text(r: &RenderInfo) -> String {
    let mut s = format!("format_version = {DATASET_FORMAT_VERSION}\n");
    for (id, class, shape) in &r.shapes {
        s.push_str(&format!("shape {id} {class} {} {}\n", shape.family, join_nums(&shape.params)));
    }
    for v in &r.views {
        s.push_str(&format!("view {} {} {} {}\n", v.rotation, v.scale, v.tx, v.ty));
    }
    s
}

fn render_from_text(text: &str, n_images: usize) -> Result<RenderInfo, DataError> {
    let bad = |msg: String| DataError::format("render", msg);
    let mut lines = text.lines();
    if lines.next() != Some(&format!("format_version = {DATASET_FORMAT_VERSION}")) {
        return Err(bad("unsupported format_version".into()));
    }
    let mut info = RenderInfo { shapes: Vec::new(), views: Vec::new() };
    for line in lines {
        let toks: Vec<&str> = line.split(' ').collect();
        let num = |t: &str| t.parse::<f64>().map_err(|_| bad(format!("bad number `{t}`")));
        match toks.first().copied() {
            Some("shape") if toks.len() >= 4 => {
                let id = toks[1].parse().map_err(|_| bad(format!("bad identity `{}`", toks[1])))?;
                let class = toks[2].parse().map_err(|_| bad(format!("bad class `{}`", toks[2])))?;
                let family: Family = toks[3].parse()?;
                let params = toks[4..].iter().map(|t| num(t)).collect::<Result<Vec<_>, _>>()?;
                info.shapes.push((id, class, ShapeParams { family, params }));
            }
            Some("view") if toks.len() == 5 => info.views.push(ViewParams {
                rotation: num(toks[1])?,
                scale: num(toks[2])?,
                tx: num(toks[3])?,
                ty: num(toks[4])?,
            }),
            _ => return Err(bad(format!("bad line `{line}`"))),
        }
    }
    if info.views.len() != n_images {
        return Err(bad(format!("{} views for {n_images} images", info.views.len())));
    }
    Ok(info)
}

fn parse_manifest(text: &str) -> Result<BTreeMap<String, String>, DataError> {
    let mut map = BTreeMap::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| DataError::format("manifest", format!("line without `=`: `{line}`")))?;
        map.insert(k.trim().to_owned(), v.trim().to_owned());
    }
    Ok(map)
}

fn field<'a>(m: &'a BTreeMap<String, String>, key: &str) -> Result<&'a str, DataError> {
    m.get(key).map(String::as_str).ok_or_else(|| DataError::format(key, "missing from manifest"))
}

fn field_num<T: std::str::FromStr>(m: &BTreeMap<String, String>, key: &str) -> Result<T, DataError> {
    let v = field(m, key)?;
    v.parse().map_err(|_| DataError::format(key, format!("not a number: `{v}`")))
}

fn table(m: &BTreeMap<String, String>, key: &str, n: usize) -> Result<Vec<u32>, DataError> {
    let v = field(m, key)?;
    let out = v
        .split_whitespace()
        .map(|t| t.parse::<u32>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|_| DataError::format(key, "non-integer entry"))?;
    if out.len() != n {
        return Err(DataError::format(key, format!("{} entries, manifest declares n_images = {n}", out.len())));
    }
    Ok(out)
}

pub fn load_dataset(dir: &Path) -> Result<GroupedDataset, DataError> {
    let m = parse_manifest(&fs::read_to_string(dir.join("manifest"))?)?;
    let version: u32 = field_num(&m, "format_version")?;
    if version != DATASET_FORMAT_VERSION {
        return Err(DataError::format(
            "format_version",
            format!("{version} unsupported (expected {DATASET_FORMAT_VERSION})"),
        ));
    }
    let n: usize = field_num(&m, "n_images")?;
    let channels: usize = field_num(&m, "channels")?;
    let height: usize = field_num(&m, "height")?;
    let width: usize = field_num(&m, "width")?;
    let d = channels * height * width;

    let blob = fs::read(dir.join("images.f32"))?;
    if blob.len() != n * d * 4 {
        return Err(DataError::format(
            "n_images",
            format!("images.f32 holds {} bytes, manifest implies {}", blob.len(), n * d * 4),
        ));
    }
    let data: Vec<f32> = blob.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    let identities = table(&m, "identity", n)?;
    let classes = table(&m, "class", n)?;

    let attributes = match field(&m, "has_attributes")? {
        "0" => None,
        "1" => {
            let names: Vec<String> = field(&m, "attribute_names")?.split(',').map(str::to_owned).collect();
            let values = fs::read(dir.join("attributes.u8"))?;
            if values.len() != n * names.len() {
                return Err(DataError::format(
                    "attribute_names",
                    format!("attributes.u8 holds {} bytes, expected {}", values.len(), n * names.len()),
                ));
            }
            if values.iter().any(|&v| v > 1) {
                return Err(DataError::format("attributes", "entries must be 0 or 1"));
            }
            Some(Attributes { names, values })
        }
        other => return Err(DataError::format("has_attributes", format!("expected 0 or 1, got `{other}`"))),
    };

    let groups = match m.get("has_groups").map(String::as_str).unwrap_or("0") {
        "0" => None,
        "1" => {
            let k: usize = field_num(&m, "group_size")?;
            let n_groups: usize = field_num(&m, "n_groups")?;
            let bytes = fs::read(dir.join("groups.idx"))?;
            if bytes.len() != n_groups * k * 4 {
                return Err(DataError::format(
                    "n_groups",
                    format!("groups.idx holds {} bytes, expected {}", bytes.len(), n_groups * k * 4),
                ));
            }
            let indices = bytes.chunks_exact(4).map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            Some(GroupIndex { k, indices })
        }
        other => return Err(DataError::format("has_groups", format!("expected 0 or 1, got `{other}`"))),
    };

    let render_path = dir.join("render.txt");
    let render = if render_path.exists() {
        Some(render_from_text(&fs::read_to_string(render_path)?, n)?)
    } else {
        None
    };

    let ds = GroupedDataset {
        channels,
        height,
        width,
        images: Matrix::from_vec(n, d, data),
        identities,
        classes,
        attributes,
        groups,
        render,
    };
    ds.validate()?;
    Ok(ds)
}

/// Read a directory of `<identity>_<view>.<ext>` grayscale images plus a
/// class map (`<identity> <class>` per line).
pub fn ingest_image_dir(dir: &Path, class_map: &Path) -> Result<GroupedDataset, DataError> {
    let mut class_of: BTreeMap<u32, u32> = BTreeMap::new();
    for (lineno, line) in fs::read_to_string(class_map)?.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        let parsed = match toks.as_slice() {
            [id, class] => id.parse::<u32>().ok().zip(class.parse::<u32>().ok()),
            _ => None,
        };
        let (id, class) = parsed.ok_or_else(|| DataError::format("class_map", format!("bad line {}", lineno + 1)))?;
        class_of.insert(id, class);
    }

    let mut entries: Vec<(u32, String, std::path::PathBuf)> = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if !path.is_file() {
            continue;
        }
        let Some(stem) = path.file_stem().and_then(|s| s.to_str()) else { continue };
        let Some((id, view)) = stem.split_once('_') else { continue };
        let Ok(id) = id.parse::<u32>() else { continue };
        entries.push((id, view.to_owned(), path));
    }
    if entries.is_empty() {
        return Err(DataError::Usage(format!("no `<identity>_<view>` images in {}", dir.display())));
    }
    entries.sort();

    let mut dims: Option<(u32, u32)> = None;
    let mut data = Vec::new();
    let mut identities = Vec::new();
    let mut classes = Vec::new();
    for (id, _, path) in &entries {
        let img = image::open(path)
            .map_err(|e| DataError::Image { path: path.display().to_string(), message: e.to_string() })?
            .to_luma8();
        match dims {
            None => dims = Some(img.dimensions()),
            Some(d) if d != img.dimensions() => {
                return Err(DataError::Image {
                    path: path.display().to_string(),
                    message: format!("size {:?} differs from first image {:?}", img.dimensions(), d),
                })
            }
            Some(_) => {}
        }
        let class = *class_of
            .get(id)
            .ok_or_else(|| DataError::format("class_map", format!("identity {id} has no class")))?;
        data.extend(img.as_raw().iter().map(|&p| p as f32 / 255.0));
        identities.push(*id);
        classes.push(class);
    }
    let (w, h) = dims.expect("at least one image");
    let n = identities.len();
    Ok(GroupedDataset {
        channels: 1,
        height: h as usize,
        width: w as usize,
        images: Matrix::from_vec(n, (w * h) as usize, data),
        identities,
        classes,
        attributes: None,
        groups: None,
        render: None,
    })
}
