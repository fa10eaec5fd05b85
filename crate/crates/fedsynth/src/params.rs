//! Layer-tagged parameter sets: the unit of partial federated upload.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Role of a parameter tensor inside the generator. Cohort upload policy and
/// the transfer freeze schedule are expressed in terms of these tags.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerTag {
    Mapping,
    Viewpoint,
    Geometry,
    Render,
    Color,
    Upsample,
}

impl LayerTag {
    pub const ALL: [LayerTag; 6] = [
        LayerTag::Mapping,
        LayerTag::Viewpoint,
        LayerTag::Geometry,
        LayerTag::Render,
        LayerTag::Color,
        LayerTag::Upsample,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            LayerTag::Mapping => "mapping",
            LayerTag::Viewpoint => "viewpoint",
            LayerTag::Geometry => "geometry",
            LayerTag::Render => "render",
            LayerTag::Color => "color",
            LayerTag::Upsample => "upsample",
        }
    }
}

#[derive(Clone)]
pub struct TaggedParamSet {
    entries: BTreeMap<String, (LayerTag, Tensor)>,
}

impl Default for TaggedParamSet {
    fn default() -> Self {
        Self::new()
    }
}

impl TaggedParamSet {
    pub fn new() -> Self {
        TaggedParamSet {
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, tag: LayerTag, tensor: Tensor) {
        self.entries.insert(name.to_string(), (tag, tensor));
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::UnknownName(name.to_string()))
    }

    pub fn tag_of(&self, name: &str) -> Result<LayerTag> {
        self.entries
            .get(name)
            .map(|(tag, _)| *tag)
            .ok_or_else(|| Error::UnknownName(name.to_string()))
    }

    /// Deterministic (name-sorted) iteration.
    pub fn iter(&self) -> impl Iterator<Item = (&str, LayerTag, &Tensor)> {
        self.entries.iter().map(|(n, (tag, t))| (n.as_str(), *tag, t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn tags_present(&self) -> BTreeSet<LayerTag> {
        self.entries.values().map(|(tag, _)| *tag).collect()
    }

    pub fn total_elements(&self) -> usize {
        self.entries.values().map(|(_, t)| t.len()).sum()
    }

    pub fn elements_with_tags(&self, tags: &BTreeSet<LayerTag>) -> usize {
        self.entries
            .values()
            .filter(|(tag, _)| tags.contains(tag))
            .map(|(_, t)| t.len())
            .sum()
    }

    /// 8 bytes per element (f64 on the wire).
    pub fn bytes(&self) -> usize {
        self.total_elements() * 8
    }

    /// Detached copy of the tensors carrying the given tags. Errors if a
    /// requested tag is absent entirely.
    pub fn subset(&self, tags: &BTreeSet<LayerTag>) -> Result<TaggedParamSet> {
        let present = self.tags_present();
        for tag in tags {
            if !present.contains(tag) {
                return Err(Error::MissingTag(tag.as_str().to_string()));
            }
        }
        let mut out = TaggedParamSet::new();
        for (name, (tag, t)) in &self.entries {
            if tags.contains(tag) {
                out.insert(name, *tag, t.detach());
            }
        }
        Ok(out)
    }

    /// Deep copy; `trainable` controls whether the copies are grad leaves.
    pub fn deep_clone(&self, trainable: bool) -> TaggedParamSet {
        let mut out = TaggedParamSet::new();
        for (name, (tag, t)) in &self.entries {
            let copy = if trainable {
                Tensor::param(t.shape(), t.data()).expect("clone shape consistent")
            } else {
                t.detach()
            };
            out.insert(name, *tag, copy);
        }
        out
    }

    /// Detached copy of everything (gradient does not flow into the copy).
    pub fn detached(&self) -> TaggedParamSet {
        self.deep_clone(false)
    }

    pub fn zero_grads(&self) {
        for (_, (_, t)) in &self.entries {
            t.zero_grad();
        }
    }

    /// SGD over tensors whose tag is trainable; frozen tensors keep their
    /// accumulated grad cleared without being touched.
    pub fn sgd_step(&self, lr: f64, trainable: &BTreeSet<LayerTag>) {
        for (_, (tag, t)) in &self.entries {
            if trainable.contains(tag) {
                t.sgd_step(lr);
            } else {
                t.zero_grad();
            }
        }
    }

    /// Copy data from `other` into matching names.
    pub fn load_from(&self, other: &TaggedParamSet) -> Result<()> {
        for (name, (_, src)) in &other.entries {
            let dst = self.get(name)?;
            if dst.shape() != src.shape() {
                return Err(Error::ShapeMismatch {
                    op: "load_from",
                    lhs: dst.shape(),
                    rhs: src.shape(),
                });
            }
            dst.set_data(&src.data());
        }
        Ok(())
    }

    /// Elementwise EMA update: self = gamma * self + (1 - gamma) * new.
    pub fn ema_update(&self, new: &TaggedParamSet, gamma: f64) -> Result<()> {
        if !(0.0..1.0).contains(&gamma) {
            return Err(Error::invalid(
                "ema_update",
                format!("decay {} outside [0, 1)", gamma),
            ));
        }
        for (name, (_, prev)) in &self.entries {
            let next = new.get(name)?;
            let pd = prev.data();
            let nd = next.data();
            let mixed: Vec<f64> = pd
                .iter()
                .zip(nd.iter())
                .map(|(&a, &b)| gamma * a + (1.0 - gamma) * b)
                .collect();
            prev.set_data(&mixed);
        }
        Ok(())
    }

    /// Serialize to a JSON object: name -> { tag, shape, data }. Keys come
    /// out sorted, so the text is deterministic.
    pub fn to_json(&self) -> Result<String> {
        let mut obj = serde_json::Map::new();
        for (name, (tag, t)) in &self.entries {
            obj.insert(
                name.clone(),
                serde_json::json!({
                    "tag": tag.as_str(),
                    "shape": t.shape(),
                    "data": t.data(),
                }),
            );
        }
        Ok(serde_json::to_string_pretty(&serde_json::Value::Object(obj))?)
    }

    pub fn from_json(text: &str) -> Result<TaggedParamSet> {
        #[derive(serde::Deserialize)]
        struct Entry {
            tag: LayerTag,
            shape: Vec<usize>,
            data: Vec<f64>,
        }
        let map: BTreeMap<String, Entry> = serde_json::from_str(text)?;
        let mut out = TaggedParamSet::new();
        for (name, e) in map {
            out.insert(&name, e.tag, Tensor::param(e.shape, e.data)?);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> TaggedParamSet {
        let mut p = TaggedParamSet::new();
        p.insert(
            "mapping.w",
            LayerTag::Mapping,
            Tensor::param(vec![2], vec![1.0, 2.0]).unwrap(),
        );
        p.insert(
            "geometry.w",
            LayerTag::Geometry,
            Tensor::param(vec![3], vec![3.0, 4.0, 5.0]).unwrap(),
        );
        p
    }

    #[test]
    fn subset_by_tag() {
        let p = sample();
        let tags: BTreeSet<_> = [LayerTag::Geometry].into();
        let s = p.subset(&tags).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s.total_elements(), 3);
        assert_eq!(s.bytes(), 24);
    }

    #[test]
    fn subset_missing_tag_errors() {
        let p = sample();
        let tags: BTreeSet<_> = [LayerTag::Upsample].into();
        assert!(matches!(p.subset(&tags), Err(Error::MissingTag(_))));
    }

    #[test]
    fn frozen_tags_untouched_by_sgd() {
        let p = sample();
        let loss = p
            .get("mapping.w")
            .unwrap()
            .square()
            .unwrap()
            .sum()
            .unwrap()
            .add(&p.get("geometry.w").unwrap().square().unwrap().sum().unwrap())
            .unwrap();
        loss.backward().unwrap();
        let before = p.get("geometry.w").unwrap().data();
        let trainable: BTreeSet<_> = [LayerTag::Mapping].into();
        p.sgd_step(0.1, &trainable);
        assert_eq!(p.get("geometry.w").unwrap().data(), before);
        assert_ne!(p.get("mapping.w").unwrap().data(), vec![1.0, 2.0]);
    }

    #[test]
    fn ema_midpoint() {
        let p = sample();
        let mut q = TaggedParamSet::new();
        q.insert("mapping.w", LayerTag::Mapping, Tensor::from_vec(vec![2], vec![3.0, 4.0]).unwrap());
        q.insert(
            "geometry.w",
            LayerTag::Geometry,
            Tensor::from_vec(vec![3], vec![3.0, 4.0, 5.0]).unwrap(),
        );
        p.ema_update(&q, 0.5).unwrap();
        assert_eq!(p.get("mapping.w").unwrap().data(), vec![2.0, 3.0]);
    }
}
