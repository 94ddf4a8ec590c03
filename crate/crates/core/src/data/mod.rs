//! Grouped multi-view image datasets.
//!
//! Class labels are carried for evaluation only; the training paths read
//! images and group indices and never touch `classes`.

mod io;
mod synth;

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::nn::{Matrix, SeededRng};

pub use io::{ingest_image_dir, load_dataset, save_dataset, DATASET_FORMAT_VERSION};
pub use synth::{generate_synthetic, render, Family, ShapeParams, SynthConfig, ViewParams};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("dataset field `{field}`: {message}")]
    Format { field: String, message: String },
    #[error("usage error: {0}")]
    Usage(String),
    #[error("image decoding failed for {path}: {message}")]
    Image { path: String, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl DataError {
    pub(crate) fn format(field: &str, message: impl Into<String>) -> Self {
        DataError::Format { field: field.to_owned(), message: message.into() }
    }
}

/// Boolean per-image attributes (e.g. garment tags).
#[derive(Debug, Clone, PartialEq)]
pub struct Attributes {
    pub names: Vec<String>,
    /// Row-major `[n_images, names.len()]`, entries 0 or 1.
    pub values: Vec<u8>,
}

impl Attributes {
    pub fn get(&self, image: usize, attr: usize) -> bool {
        self.values[image * self.names.len() + attr] != 0
    }
}

/// Groups of `k` image indices that share one identity.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupIndex {
    pub k: usize,
    /// Row-major `[n_groups, k]`.
    pub indices: Vec<u32>,
}

impl GroupIndex {
    pub fn len(&self) -> usize {
        if self.k == 0 {
            0
        } else {
            self.indices.len() / self.k
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn group(&self, g: usize) -> &[u32] {
        &self.indices[g * self.k..(g + 1) * self.k]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[u32]> {
        self.indices.chunks(self.k.max(1))
    }
}

/// Generator-side description of every identity and view, kept so that
/// ground-truth images for arbitrary shape/view combinations can be rendered.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderInfo {
    /// `(identity, class, shape)` per identity.
    pub shapes: Vec<(u32, u32, ShapeParams)>,
    /// View parameters per image, aligned with the image table.
    pub views: Vec<ViewParams>,
}

impl RenderInfo {
    pub fn shape_of(&self, identity: u32) -> Option<&ShapeParams> {
        self.shapes.iter().find(|(id, _, _)| *id == identity).map(|(_, _, s)| s)
    }
}

/// One object identity as seen by the splitting logic.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ObjectRecord {
    pub identity: u32,
    /// Evaluation-only label.
    pub class: u32,
    pub views: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupedDataset {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// `[n_images, channels * height * width]`, values in `[0, 1]`.
    pub images: Matrix<f32>,
    pub identities: Vec<u32>,
    pub classes: Vec<u32>,
    pub attributes: Option<Attributes>,
    pub groups: Option<GroupIndex>,
    pub render: Option<RenderInfo>,
}

impl GroupedDataset {
    pub fn len(&self) -> usize {
        self.images.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn image_dim(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn num_classes(&self) -> usize {
        self.classes.iter().collect::<BTreeSet<_>>().len()
    }

    /// Image indices per identity, identities in ascending order.
    pub fn by_identity(&self) -> BTreeMap<u32, Vec<usize>> {
        let mut map: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, &id) in self.identities.iter().enumerate() {
            map.entry(id).or_default().push(i);
        }
        map
    }

    pub fn records(&self) -> Vec<ObjectRecord> {
        self.by_identity()
            .into_iter()
            .map(|(identity, imgs)| ObjectRecord { identity, class: self.classes[imgs[0]], views: imgs.len() })
            .collect()
    }

    /// 64-bit FNV-1a digest of the images and identity table.
    pub fn fingerprint(&self) -> String {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        for v in self.images.data() {
            eat(&v.to_le_bytes());
        }
        for id in &self.identities {
            eat(&id.to_le_bytes());
        }
        format!("{h:016x}")
    }

    /// Keep only the images of the given identities (groups are dropped).
    pub fn subset(&self, keep: &BTreeSet<u32>) -> GroupedDataset {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| keep.contains(&self.identities[i])).collect();
        let attributes = self.attributes.as_ref().map(|a| {
            let w = a.names.len();
            Attributes {
                names: a.names.clone(),
                values: idx.iter().flat_map(|&i| a.values[i * w..(i + 1) * w].iter().copied()).collect(),
            }
        });
        let render = self.render.as_ref().map(|r| RenderInfo {
            shapes: r.shapes.iter().filter(|(id, _, _)| keep.contains(id)).cloned().collect(),
            views: idx.iter().map(|&i| r.views[i]).collect(),
        });
        GroupedDataset {
            channels: self.channels,
            height: self.height,
            width: self.width,
            images: self.images.select_rows(&idx),
            identities: idx.iter().map(|&i| self.identities[i]).collect(),
            classes: idx.iter().map(|&i| self.classes[i]).collect(),
            attributes,
            groups: None,
            render,
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let n = self.len();
        if self.images.cols() != self.image_dim() {
            return Err(DataError::format("images", "row width does not match channels x height x width"));
        }
        if self.identities.len() != n {
            return Err(DataError::format("identity", format!("{} entries for {n} images", self.identities.len())));
        }
        if self.classes.len() != n {
            return Err(DataError::format("class", format!("{} entries for {n} images", self.classes.len())));
        }
        if let Some(a) = &self.attributes {
            if a.values.len() != n * a.names.len() {
                return Err(DataError::format("attributes", "matrix size does not match n_images x A"));
            }
        }
        if let Some(g) = &self.groups {
            for grp in g.iter() {
                if grp.iter().any(|&i| i as usize >= n) {
                    return Err(DataError::format("groups", "index out of range"));
                }
                if grp.iter().any(|&i| self.identities[i as usize] != self.identities[grp[0] as usize]) {
                    return Err(DataError::format("groups", "group mixes identities"));
                }
            }
        }
        Ok(())
    }
}

/// Draw `n_groups` groups of `k` same-identity views.
///
/// Identities are visited round-robin in a freshly shuffled order on every
/// pass; views are drawn without replacement when the identity has at least
/// `k`, otherwise with replacement.
pub fn make_groups(ds: &GroupedDataset, k: usize, n_groups: usize, seed: u64) -> Result<GroupIndex, DataError> {
    if k < 2 {
        return Err(DataError::Usage(format!("group size must be 2 or larger for grouped training, got {k}")));
    }
    sample_groups(ds, k, n_groups, seed)
}

/// Singleton "groups": every image once, in shuffled order. Used by the
/// ungrouped baselines.
pub fn singleton_groups(ds: &GroupedDataset, seed: u64) -> GroupIndex {
    let mut order: Vec<u32> = (0..ds.len() as u32).collect();
    SeededRng::new(seed).shuffle(&mut order);
    GroupIndex { k: 1, indices: order }
}

fn sample_groups(ds: &GroupedDataset, k: usize, n_groups: usize, seed: u64) -> Result<GroupIndex, DataError> {
    let ids: Vec<Vec<usize>> = ds.by_identity().into_values().collect();
    if ids.is_empty() {
        return Err(DataError::Usage("cannot group an empty dataset".into()));
    }
    let mut rng = SeededRng::new(seed);
    let mut order: Vec<usize> = Vec::new();
    let mut indices = Vec::with_capacity(n_groups * k);
    for g in 0..n_groups {
        if g % ids.len() == 0 {
            order = (0..ids.len()).collect();
            rng.shuffle(&mut order);
        }
        let views = &ids[order[g % ids.len()]];
        if views.len() >= k {
            let mut pick = views.clone();
            // partial Fisher-Yates
            for i in 0..k {
                let j = i + rng.below(pick.len() - i);
                pick.swap(i, j);
            }
            indices.extend(pick[..k].iter().map(|&i| i as u32));
        } else {
            indices.extend((0..k).map(|_| views[rng.below(views.len())] as u32));
        }
    }
    Ok(GroupIndex { k, indices })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdentitySplit {
    pub train: BTreeSet<u32>,
    pub test: BTreeSet<u32>,
}

/// Class-stratified partition of identities into train and test sets.
pub fn split_by_identity(records: &[ObjectRecord], test_fraction: f64, seed: u64) -> Result<IdentitySplit, DataError> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(DataError::Usage(format!("test fraction must lie in (0, 1), got {test_fraction}")));
    }
    let mut per_class: BTreeMap<u32, Vec<u32>> = BTreeMap::new();
    for r in records {
        per_class.entry(r.class).or_default().push(r.identity);
    }
    let mut rng = SeededRng::new(seed);
    let mut split = IdentitySplit { train: BTreeSet::new(), test: BTreeSet::new() };
    for (class, mut ids) in per_class {
        if ids.len() < 2 {
            return Err(DataError::Usage(format!("class {class} has fewer than 2 identities; cannot split")));
        }
        ids.sort_unstable();
        rng.shuffle(&mut ids);
        let n_test = ((ids.len() as f64 * test_fraction).round() as usize).clamp(1, ids.len() - 1);
        split.test.extend(&ids[..n_test]);
        split.train.extend(&ids[n_test..]);
    }
    Ok(split)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(views: usize) -> GroupedDataset {
        generate_synthetic(&SynthConfig {
            identities_per_class: 10,
            views_per_identity: views,
            image_size: 8,
            ..SynthConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn every_group_shares_one_identity() {
        let ds = tiny(5);
        let g = make_groups(&ds, 3, 200, 1).unwrap();
        assert_eq!(g.len(), 200);
        for grp in g.iter() {
            let id = ds.identities[grp[0] as usize];
            assert!(grp.iter().all(|&i| ds.identities[i as usize] == id));
            let distinct: BTreeSet<_> = grp.iter().collect();
            assert_eq!(distinct.len(), 3, "drawn without replacement");
        }
    }

    #[test]
    fn exhaustive_draw_is_a_permutation_of_the_views() {
        let ds = tiny(4);
        let by_id = ds.by_identity();
        let g = make_groups(&ds, 4, 30, 9).unwrap();
        for grp in g.iter() {
            let mut got: Vec<usize> = grp.iter().map(|&i| i as usize).collect();
            got.sort_unstable();
            assert_eq!(&got, &by_id[&ds.identities[grp[0] as usize]]);
        }
    }

    #[test]
    fn too_few_views_fall_back_to_replacement() {
        let ds = tiny(2);
        let g = make_groups(&ds, 5, 10, 2).unwrap();
        assert_eq!(g.k, 5);
        for grp in g.iter() {
            assert!(grp.iter().all(|&i| ds.identities[i as usize] == ds.identities[grp[0] as usize]));
        }
    }

    #[test]
    fn group_size_below_two_is_a_usage_error() {
        let ds = tiny(3);
        assert!(matches!(make_groups(&ds, 1, 10, 0), Err(DataError::Usage(_))));
        for k in 2..=5 {
            let g = make_groups(&ds, k, 12, 0).unwrap();
            assert_eq!(g.indices.len(), 12 * k);
        }
        assert_eq!(make_groups(&ds, 3, 12, 4).unwrap(), make_groups(&ds, 3, 12, 4).unwrap());
    }

    #[test]
    fn split_is_a_stratified_partition() {
        let ds = tiny(2);
        let recs = ds.records();
        let s = split_by_identity(&recs, 0.5, 3).unwrap();
        assert!(s.train.is_disjoint(&s.test));
        let all: BTreeSet<u32> = recs.iter().map(|r| r.identity).collect();
        assert_eq!(&s.train | &s.test, all);
        for class in 0..3 {
            let n = s.test.iter().filter(|id| recs.iter().any(|r| r.identity == **id && r.class == class)).count();
            assert_eq!(n, 5);
        }
        assert_eq!(s, split_by_identity(&recs, 0.5, 3).unwrap());
    }

    #[test]
    fn split_rejects_bad_fraction_and_singleton_class() {
        let recs = vec![
            ObjectRecord { identity: 0, class: 0, views: 2 },
            ObjectRecord { identity: 1, class: 0, views: 2 },
            ObjectRecord { identity: 2, class: 1, views: 2 },
        ];
        assert!(split_by_identity(&recs, 0.0, 0).is_err());
        assert!(split_by_identity(&recs, 1.0, 0).is_err());
        assert!(split_by_identity(&recs, 0.5, 0).is_err());
    }

    #[test]
    fn subset_keeps_only_requested_identities() {
        let ds = tiny(3);
        let keep: BTreeSet<u32> = [0, 11, 25].into_iter().collect();
        let sub = ds.subset(&keep);
        assert_eq!(sub.len(), 9);
        assert!(sub.identities.iter().all(|id| keep.contains(id)));
        let r = sub.render.as_ref().unwrap();
        assert_eq!(r.views.len(), 9);
        assert_eq!(r.shapes.len(), 3);
        sub.validate().unwrap();
    }
}
