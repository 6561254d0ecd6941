//! Named-parameter plumbing shared by the models, the optimizer, and the
//! checkpoint format.
//!
//! Every model walks its tensors through a visitor with stable
//! slash-qualified names; those names key optimizer state and serialized
//! blobs, so they must never change meaning between versions.

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::util::sha256_hex;
use std::collections::BTreeMap;

/// A model whose parameters can be enumerated by stable name.
pub trait Parameterized {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor));
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor));
}

/// Total element count across all parameters.
pub fn param_count(model: &dyn Parameterized) -> usize {
    let mut n = 0;
    model.visit_params(&mut |_, t| n += t.numel());
    n
}

/// Parameters as a name-sorted map of clones.
pub fn params_to_map(model: &dyn Parameterized) -> BTreeMap<String, Tensor> {
    let mut map = BTreeMap::new();
    model.visit_params(&mut |name, t| {
        map.insert(name.to_string(), t.clone());
    });
    map
}

/// Loads parameters from a map produced by [`params_to_map`].
///
/// Every visited parameter must be present with a matching shape; extra map
/// entries are an error too, so stale checkpoints fail loudly.
pub fn load_params_from_map(
    model: &mut dyn Parameterized,
    map: &BTreeMap<String, Tensor>,
) -> Result<()> {
    let mut missing = Vec::new();
    let mut mismatched = Vec::new();
    let mut seen = Vec::new();
    model.visit_params_mut(&mut |name, t| {
        seen.push(name.to_string());
        match map.get(name) {
            None => missing.push(name.to_string()),
            Some(src) if src.shape != t.shape => mismatched.push(format!(
                "{name}: checkpoint {:?} vs model {:?}",
                src.shape, t.shape
            )),
            Some(src) => *t = src.clone(),
        }
    });
    if !missing.is_empty() {
        return Err(Error::Checkpoint(format!(
            "missing parameters: {}",
            missing.join(", ")
        )));
    }
    if !mismatched.is_empty() {
        return Err(Error::Checkpoint(format!(
            "shape mismatches: {}",
            mismatched.join("; ")
        )));
    }
    let extra: Vec<&String> = map.keys().filter(|k| !seen.contains(k)).collect();
    if !extra.is_empty() {
        return Err(Error::Checkpoint(format!(
            "unknown parameters in checkpoint: {}",
            extra.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(", ")
        )));
    }
    Ok(())
}

/// Content hash over names, shapes and exact bit patterns, in name order.
/// Detects any drift in frozen components between save and resume.
pub fn params_hash(model: &dyn Parameterized) -> String {
    let map = params_to_map(model);
    let mut bytes = Vec::new();
    for (name, t) in &map {
        bytes.extend_from_slice(name.as_bytes());
        bytes.push(0);
        for d in &t.shape {
            bytes.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        for x in &t.data {
            bytes.extend_from_slice(&x.to_bits().to_le_bytes());
        }
    }
    sha256_hex(&bytes)
}

/// Leaf variables bound onto a tape during one forward pass, keyed by
/// parameter name. Only gradient-bearing bindings are tracked; frozen
/// parameters enter the tape as constants and are not listed here.
#[derive(Default)]
pub struct ParamBindings {
    entries: Vec<(String, Var)>,
}

impl ParamBindings {
    pub fn new() -> Self {
        Self::default()
    }

    /// Binds one parameter. Trainable parameters become gradient-bearing
    /// leaves and are recorded; frozen ones become constants.
    pub fn bind(&mut self, tape: &mut Tape, name: &str, tensor: &Tensor, trainable: bool) -> Var {
        if trainable {
            let var = tape.leaf(tensor.clone(), true);
            self.entries.push((name.to_string(), var));
            var
        } else {
            tape.constant(tensor.clone())
        }
    }

    pub fn entries(&self) -> &[(String, Var)] {
        &self.entries
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Toy {
        w: Tensor,
        b: Tensor,
    }

    impl Parameterized for Toy {
        fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor)) {
            f("toy/w", &self.w);
            f("toy/b", &self.b);
        }
        fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
            f("toy/w", &mut self.w);
            f("toy/b", &mut self.b);
        }
    }

    fn toy() -> Toy {
        Toy {
            w: Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]),
            b: Tensor::vector(vec![0.5, -0.5]),
        }
    }

    #[test]
    fn map_round_trip_restores_exactly() {
        let src = toy();
        let map = params_to_map(&src);
        let mut dst = Toy {
            w: Tensor::zeros(vec![2, 2]),
            b: Tensor::zeros(vec![2]),
        };
        load_params_from_map(&mut dst, &map).unwrap();
        assert_eq!(dst.w, src.w);
        assert_eq!(dst.b, src.b);
        assert_eq!(param_count(&src), 6);
    }

    #[test]
    fn load_rejects_missing_extra_and_mismatched() {
        let src = toy();
        let mut map = params_to_map(&src);
        map.remove("toy/b");
        assert!(load_params_from_map(&mut toy(), &map).is_err());

        let mut map = params_to_map(&src);
        map.insert("toy/stale".into(), Tensor::scalar(1.0));
        assert!(load_params_from_map(&mut toy(), &map).is_err());

        let mut map = params_to_map(&src);
        map.insert("toy/b".into(), Tensor::vector(vec![1.0, 2.0, 3.0]));
        assert!(load_params_from_map(&mut toy(), &map).is_err());
    }

    #[test]
    fn hash_tracks_bit_level_changes() {
        let a = toy();
        let mut b = toy();
        assert_eq!(params_hash(&a), params_hash(&b));
        b.w.data[0] = f64::from_bits(b.w.data[0].to_bits() ^ 1);
        assert_ne!(params_hash(&a), params_hash(&b));
    }

    #[test]
    fn bindings_track_only_trainable_leaves() {
        let mut tape = Tape::new();
        let mut binds = ParamBindings::new();
        let t = Tensor::scalar(2.0);
        let v1 = binds.bind(&mut tape, "a", &t, true);
        let _v2 = binds.bind(&mut tape, "b", &t, false);
        assert_eq!(binds.len(), 1);
        assert_eq!(binds.entries()[0].0, "a");
        assert_eq!(binds.entries()[0].1, v1);
    }
}
