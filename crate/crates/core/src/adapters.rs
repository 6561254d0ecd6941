//! Hierarchical low-rank adapter bank for the denoiser's attention
//! projections.
//!
//! Every wrapped weight site carries ten adapter pairs: one per emotion and
//! one per polarity. A routed forward pass adds exactly two low-rank deltas,
//! the routed emotion's own pair and its polarity's shared pair:
//!
//! ```text
//! W' = W + s * (A_pol B_pol + A_emo B_emo)
//! ```
//!
//! Down matrices start from a small Gaussian and up matrices start at zero,
//! so a fresh bank leaves the base model's behaviour untouched. Pairs off
//! the active route never reach the tape, which makes per-emotion gradient
//! isolation structural rather than numerical.

use crate::autodiff::{mm, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::params::{ParamBindings, Parameterized};
use crate::taxonomy::{EmotionLabel, Polarity};
use crate::util::rng_for;
use std::collections::BTreeMap;

/// Standard deviation of the down-projection initialization.
const DOWN_INIT_STD: f64 = 0.02;

/// One low-rank pair: `a` is [d_in, rank], `b` is [rank, d_out].
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterPair {
    pub a: Tensor,
    pub b: Tensor,
}

impl AdapterPair {
    fn init(d_in: usize, d_out: usize, rank: usize, rng: &mut impl rand::Rng) -> Self {
        Self {
            a: Tensor::randn(vec![d_in, rank], DOWN_INIT_STD, rng),
            b: Tensor::zeros(vec![rank, d_out]),
        }
    }

    /// Dense delta `a x b`, [d_in, d_out].
    pub fn delta(&self) -> Tensor {
        let (d_in, rank) = self.a.dims2();
        let (_, d_out) = self.b.dims2();
        Tensor::new(
            vec![d_in, d_out],
            mm(&self.a.data, &self.b.data, d_in, rank, d_out),
        )
    }
}

/// Adapter pairs attached to one weight site.
#[derive(Debug, Clone)]
struct SiteAdapters {
    d_in: usize,
    d_out: usize,
    emotion: Vec<AdapterPair>,
    polarity: Vec<AdapterPair>,
}

/// Which adapters a forward pass activates. Polarity follows from the
/// emotion, so a route is just the emotion.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Route {
    pub emotion: EmotionLabel,
}

impl Route {
    pub fn new(emotion: EmotionLabel) -> Self {
        Self { emotion }
    }

    pub fn polarity(&self) -> Polarity {
        self.emotion.polarity()
    }
}

/// The full adapter bank over all wrapped sites.
#[derive(Debug, Clone)]
pub struct AdapterBank {
    rank: usize,
    scaling: f64,
    sites: BTreeMap<String, SiteAdapters>,
}

impl AdapterBank {
    /// Initializes pairs for every site. Each pair draws from its own seed
    /// stream, so site order never shifts the values.
    pub fn init(site_shapes: &[(String, (usize, usize))], rank: usize, scaling: f64, seed: u64) -> Self {
        assert!(rank >= 1, "adapter rank must be positive");
        let mut sites = BTreeMap::new();
        for (name, (d_in, d_out)) in site_shapes {
            let emotion = EmotionLabel::ALL
                .iter()
                .map(|label| {
                    let mut rng =
                        rng_for(seed, &format!("adapter/{name}/emotion"), label.id() as u64);
                    AdapterPair::init(*d_in, *d_out, rank, &mut rng)
                })
                .collect();
            let polarity = Polarity::ALL
                .iter()
                .map(|pol| {
                    let mut rng =
                        rng_for(seed, &format!("adapter/{name}/polarity"), pol.id() as u64);
                    AdapterPair::init(*d_in, *d_out, rank, &mut rng)
                })
                .collect();
            sites.insert(
                name.clone(),
                SiteAdapters { d_in: *d_in, d_out: *d_out, emotion, polarity },
            );
        }
        Self { rank, scaling, sites }
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn scaling(&self) -> f64 {
        self.scaling
    }

    pub fn site_names(&self) -> Vec<String> {
        self.sites.keys().cloned().collect()
    }

    fn site(&self, name: &str) -> Result<&SiteAdapters> {
        self.sites
            .get(name)
            .ok_or_else(|| Error::Adapter(format!("unknown adapter site: {name}")))
    }

    pub fn pair(&self, site: &str, label: EmotionLabel) -> Result<&AdapterPair> {
        Ok(&self.site(site)?.emotion[label.id()])
    }

    pub fn polarity_pair(&self, site: &str, pol: Polarity) -> Result<&AdapterPair> {
        Ok(&self.site(site)?.polarity[pol.id()])
    }

    /// Dense routed delta for a site: `s * (A_pol B_pol + A_emo B_emo)`.
    pub fn routed_delta(&self, site: &str, route: Route) -> Result<Tensor> {
        let s = self.site(site)?;
        let mut delta = s.polarity[route.polarity().id()].delta();
        delta.add_assign(&s.emotion[route.emotion.id()].delta());
        if self.scaling != 1.0 {
            for x in &mut delta.data {
                *x *= self.scaling;
            }
        }
        Ok(delta)
    }

    /// Base weight plus the routed delta.
    pub fn effective_weight(&self, base: &Tensor, site: &str, route: Route) -> Result<Tensor> {
        let s = self.site(site)?;
        if base.shape != vec![s.d_in, s.d_out] {
            return Err(Error::Adapter(format!(
                "site {site} expects a {:?} weight, got {:?}",
                vec![s.d_in, s.d_out],
                base.shape
            )));
        }
        let mut w = base.clone();
        w.add_assign(&self.routed_delta(site, route)?);
        Ok(w)
    }

    /// Adds the routed low-rank path to a projection output on the tape:
    /// `base_out + s * ((x A_pol) B_pol + (x A_emo) B_emo)`.
    ///
    /// Only the two routed pairs are bound; with `trainable` they register
    /// for gradient updates under `adapters/<site>/...` names.
    pub fn apply(
        &self,
        tape: &mut Tape,
        binds: &mut ParamBindings,
        site: &str,
        x: Var,
        base_out: Var,
        route: Route,
        trainable: bool,
    ) -> Result<Var> {
        let s = self.site(site)?;
        let pol = route.polarity();
        let emo = route.emotion;
        let mut out = base_out;
        for (kind, key, pair) in [
            ("polarity", pol.name(), &s.polarity[pol.id()]),
            ("emotion", emo.name(), &s.emotion[emo.id()]),
        ] {
            let a = binds.bind(
                tape,
                &format!("adapters/{site}/{kind}/{key}/a"),
                &pair.a,
                trainable,
            );
            let b = binds.bind(
                tape,
                &format!("adapters/{site}/{kind}/{key}/b"),
                &pair.b,
                trainable,
            );
            let low = tape.matmul(x, a);
            let up = tape.matmul(low, b);
            let scaled = if self.scaling == 1.0 {
                up
            } else {
                tape.scale(up, self.scaling)
            };
            out = tape.add(out, scaled);
        }
        Ok(out)
    }
}

impl Parameterized for AdapterBank {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        for (site, s) in &self.sites {
            for label in EmotionLabel::ALL {
                let p = &s.emotion[label.id()];
                f(&format!("adapters/{site}/emotion/{}/a", label.name()), &p.a);
                f(&format!("adapters/{site}/emotion/{}/b", label.name()), &p.b);
            }
            for pol in Polarity::ALL {
                let p = &s.polarity[pol.id()];
                f(&format!("adapters/{site}/polarity/{}/a", pol.name()), &p.a);
                f(&format!("adapters/{site}/polarity/{}/b", pol.name()), &p.b);
            }
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (site, s) in &mut self.sites {
            for label in EmotionLabel::ALL {
                let p = &mut s.emotion[label.id()];
                f(&format!("adapters/{site}/emotion/{}/a", label.name()), &mut p.a);
                f(&format!("adapters/{site}/emotion/{}/b", label.name()), &mut p.b);
            }
            for pol in Polarity::ALL {
                let p = &mut s.polarity[pol.id()];
                f(&format!("adapters/{site}/polarity/{}/a", pol.name()), &mut p.a);
                f(&format!("adapters/{site}/polarity/{}/b", pol.name()), &mut p.b);
            }
        }
    }
}

/// Access to the base weights living at adapter sites.
pub trait SiteWeights {
    fn site_weight(&self, site: &str) -> Result<&Tensor>;
    fn site_weight_mut(&mut self, site: &str) -> Result<&mut Tensor>;
}

/// Saved originals from a merge, used to restore them exactly.
pub struct MergeGuard {
    originals: BTreeMap<String, Tensor>,
    route: Route,
}

impl MergeGuard {
    pub fn route(&self) -> Route {
        self.route
    }
}

/// Folds the routed deltas into the base weights in place.
///
/// Returns a guard holding the untouched originals; [`unmerge`] puts them
/// back verbatim, so the round trip is bit-identical by construction rather
/// than by arithmetic cancellation.
pub fn merge(
    bank: &AdapterBank,
    weights: &mut dyn SiteWeights,
    route: Route,
) -> Result<MergeGuard> {
    let mut originals = BTreeMap::new();
    for site in bank.site_names() {
        let w = weights.site_weight_mut(&site)?;
        originals.insert(site.clone(), w.clone());
        let merged = bank.effective_weight(w, &site, route)?;
        *w = merged;
    }
    Ok(MergeGuard { originals, route })
}

/// Restores the exact pre-merge weights.
pub fn unmerge(guard: MergeGuard, weights: &mut dyn SiteWeights) -> Result<()> {
    for (site, original) in guard.originals {
        *weights.site_weight_mut(&site)? = original;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{central_difference, grad_close};
    use crate::params::{load_params_from_map, params_hash, params_to_map};
    use crate::taxonomy::EMOTION_COUNT;
    use crate::util::rng_for;

    fn shapes() -> Vec<(String, (usize, usize))> {
        vec![
            ("blk/self/q".to_string(), (6, 6)),
            ("blk/cross/k".to_string(), (4, 6)),
        ]
    }

    fn bank() -> AdapterBank {
        AdapterBank::init(&shapes(), 2, 1.0, 77)
    }

    #[test]
    fn init_creates_ten_pairs_per_site_with_zero_up() {
        let fresh = bank();
        assert_eq!(fresh.site_names().len(), 2);
        for site in fresh.site_names() {
            for label in EmotionLabel::ALL {
                let p = fresh.pair(&site, label).unwrap();
                assert!(p.a.data.iter().any(|x| *x != 0.0), "down init must be nonzero");
                assert!(p.b.data.iter().all(|x| *x == 0.0), "up init must be zero");
                assert_eq!(p.a.shape[1], 2);
                assert_eq!(p.b.shape[0], 2);
            }
            for pol in Polarity::ALL {
                let p = fresh.polarity_pair(&site, pol).unwrap();
                assert!(p.b.data.iter().all(|x| *x == 0.0));
            }
        }
        // Deterministic per seed; a different seed moves the values.
        assert_eq!(params_hash(&fresh), params_hash(&bank()));
        assert_ne!(
            params_hash(&fresh),
            params_hash(&AdapterBank::init(&shapes(), 2, 1.0, 78))
        );
    }

    #[test]
    fn fresh_bank_is_neutral_for_every_route() {
        let bank = bank();
        let mut rng = rng_for(1, "neutral-test", 0);
        let w = Tensor::randn(vec![6, 6], 1.0, &mut rng);
        let x = Tensor::randn(vec![3, 6], 1.0, &mut rng);
        for label in EmotionLabel::ALL {
            let route = Route::new(label);
            // Dense form: delta is exactly zero.
            let eff = bank.effective_weight(&w, "blk/self/q", route).unwrap();
            assert_eq!(eff.data, w.data);
            // Tape form: adapted output equals the base output bitwise.
            let mut tape = Tape::inference();
            let mut binds = ParamBindings::new();
            let vx = tape.constant(x.clone());
            let vw = tape.constant(w.clone());
            let base = tape.matmul(vx, vw);
            let base_data = tape.value(base).data.clone();
            let adapted = bank
                .apply(&mut tape, &mut binds, "blk/self/q", vx, base, route, false)
                .unwrap();
            assert_eq!(tape.value(adapted).data, base_data);
        }
    }

    fn randomized_bank() -> AdapterBank {
        let mut bank = bank();
        let mut rng = rng_for(2, "randomize-bank", 0);
        bank.visit_params_mut(&mut |_, t| {
            *t = Tensor::randn(t.shape.clone(), 0.3, &mut rng);
        });
        bank
    }

    #[test]
    fn routed_delta_is_additive_in_its_two_pairs() {
        let bank = randomized_bank();
        for label in [EmotionLabel::Amusement, EmotionLabel::Sadness] {
            let route = Route::new(label);
            let delta = bank.routed_delta("blk/cross/k", route).unwrap();
            let mut expected = bank
                .polarity_pair("blk/cross/k", route.polarity())
                .unwrap()
                .delta();
            expected.add_assign(&bank.pair("blk/cross/k", label).unwrap().delta());
            assert_eq!(delta.data, expected.data);
        }
    }

    #[test]
    fn non_routed_pairs_do_not_influence_output() {
        let bank = randomized_bank();
        let mut rng = rng_for(3, "routing-test", 0);
        let w = Tensor::randn(vec![6, 6], 1.0, &mut rng);
        let x = Tensor::randn(vec![2, 6], 1.0, &mut rng);
        let route = Route::new(EmotionLabel::Fear);
        let run = |b: &AdapterBank| {
            let mut tape = Tape::inference();
            let mut binds = ParamBindings::new();
            let vx = tape.constant(x.clone());
            let vw = tape.constant(w.clone());
            let base = tape.matmul(vx, vw);
            let out = b
                .apply(&mut tape, &mut binds, "blk/self/q", vx, base, route, false)
                .unwrap();
            tape.value(out).data.clone()
        };
        let baseline = run(&bank);
        // Scribbling over every pair except (fear, negative) changes nothing.
        let mut vandalized = bank.clone();
        vandalized.visit_params_mut(&mut |name, t| {
            if !name.contains("/emotion/fear/") && !name.contains("/polarity/negative/") {
                for v in &mut t.data {
                    *v += 100.0;
                }
            }
        });
        assert_eq!(run(&vandalized), baseline);
        // Touching the routed emotion pair does change the output.
        let mut touched = bank.clone();
        touched.visit_params_mut(&mut |name, t| {
            if name == "adapters/blk/self/q/emotion/fear/b" {
                for v in &mut t.data {
                    *v += 0.5;
                }
            }
        });
        assert_ne!(run(&touched), baseline);
    }

    #[test]
    fn apply_binds_exactly_the_routed_pairs() {
        let bank = randomized_bank();
        let mut tape = Tape::new();
        let mut binds = ParamBindings::new();
        let x = tape.constant(Tensor::zeros(vec![1, 6]));
        let w = tape.constant(Tensor::zeros(vec![6, 6]));
        let base = tape.matmul(x, w);
        bank.apply(
            &mut tape,
            &mut binds,
            "blk/self/q",
            x,
            base,
            Route::new(EmotionLabel::Contentment),
            true,
        )
        .unwrap();
        let names: Vec<&str> = binds.entries().iter().map(|(n, _)| n.as_str()).collect();
        assert_eq!(
            names,
            vec![
                "adapters/blk/self/q/polarity/positive/a",
                "adapters/blk/self/q/polarity/positive/b",
                "adapters/blk/self/q/emotion/contentment/a",
                "adapters/blk/self/q/emotion/contentment/b",
            ]
        );
    }

    #[test]
    fn apply_gradients_match_finite_differences() {
        let bank = randomized_bank();
        let mut rng = rng_for(4, "adapter-fd", 0);
        let w = Tensor::randn(vec![6, 6], 1.0, &mut rng);
        let x = Tensor::randn(vec![2, 6], 1.0, &mut rng);
        let route = Route::new(EmotionLabel::Excitement);
        let loss_of = |b: &AdapterBank| {
            let mut tape = Tape::inference();
            let mut binds = ParamBindings::new();
            let vx = tape.constant(x.clone());
            let vw = tape.constant(w.clone());
            let base = tape.matmul(vx, vw);
            let out = b
                .apply(&mut tape, &mut binds, "blk/self/q", vx, base, route, false)
                .unwrap();
            let sq = tape.mul(out, out);
            let l = tape.mean_all(sq);
            tape.value(l).data[0]
        };
        let mut tape = Tape::new();
        let mut binds = ParamBindings::new();
        let vx = tape.constant(x.clone());
        let vw = tape.constant(w.clone());
        let base = tape.matmul(vx, vw);
        let out = bank
            .apply(&mut tape, &mut binds, "blk/self/q", vx, base, route, true)
            .unwrap();
        let sq = tape.mul(out, out);
        let l = tape.mean_all(sq);
        let grads = tape.backward(l).unwrap();
        let params = params_to_map(&bank);
        assert_eq!(binds.entries().len(), 4);
        for (name, var) in binds.entries() {
            let base_t = &params[name];
            let analytic = grads.get(*var).expect("routed pair has grad");
            for j in 0..base_t.numel() {
                let numeric = central_difference(&base_t.data, j, &mut |perturbed| {
                    let mut b = bank.clone();
                    b.visit_params_mut(&mut |n, t| {
                        if n == name {
                            t.data = perturbed.to_vec();
                        }
                    });
                    loss_of(&b)
                });
                assert!(
                    grad_close(analytic.data[j], numeric),
                    "{name}[{j}]: {} vs {numeric}",
                    analytic.data[j]
                );
            }
        }
    }

    struct FakeSites {
        weights: BTreeMap<String, Tensor>,
    }

    impl SiteWeights for FakeSites {
        fn site_weight(&self, site: &str) -> Result<&Tensor> {
            self.weights
                .get(site)
                .ok_or_else(|| Error::Adapter(format!("no such site {site}")))
        }
        fn site_weight_mut(&mut self, site: &str) -> Result<&mut Tensor> {
            self.weights
                .get_mut(site)
                .ok_or_else(|| Error::Adapter(format!("no such site {site}")))
        }
    }

    #[test]
    fn merge_forward_matches_adapter_forward_and_unmerge_restores() {
        let bank = randomized_bank();
        let mut rng = rng_for(5, "merge-test", 0);
        let mut sites = FakeSites { weights: BTreeMap::new() };
        sites.weights.insert("blk/self/q".into(), Tensor::randn(vec![6, 6], 1.0, &mut rng));
        sites.weights.insert("blk/cross/k".into(), Tensor::randn(vec![4, 6], 1.0, &mut rng));
        let originals = sites.weights.clone();
        let x6 = Tensor::randn(vec![3, 6], 1.0, &mut rng);
        let route = Route::new(EmotionLabel::Disgust);

        // Adapter-path output before merging.
        let adapter_out = {
            let mut tape = Tape::inference();
            let mut binds = ParamBindings::new();
            let vx = tape.constant(x6.clone());
            let vw = tape.constant(originals["blk/self/q"].clone());
            let base = tape.matmul(vx, vw);
            let out = bank
                .apply(&mut tape, &mut binds, "blk/self/q", vx, base, route, false)
                .unwrap();
            tape.value(out).data.clone()
        };

        let guard = merge(&bank, &mut sites, route).unwrap();
        // Merged-path output: plain matmul against the folded weight.
        let merged_out = {
            let w = sites.site_weight("blk/self/q").unwrap();
            mm(&x6.data, &w.data, 3, 6, 6)
        };
        for (a, m) in adapter_out.iter().zip(&merged_out) {
            assert!((a - m).abs() < 1e-5, "adapter {a} vs merged {m}");
        }
        // The folded weight really moved.
        assert_ne!(sites.weights["blk/self/q"].data, originals["blk/self/q"].data);

        unmerge(guard, &mut sites).unwrap();
        for (site, w) in &sites.weights {
            assert_eq!(w.data, originals[site].data, "bitwise restore for {site}");
        }
    }

    #[test]
    fn params_round_trip_preserves_every_pair() {
        let bank = randomized_bank();
        let map = params_to_map(&bank);
        // 2 sites x (8 emotion + 2 polarity) x 2 tensors.
        assert_eq!(map.len(), 2 * (EMOTION_COUNT + 2) * 2);
        let mut fresh = AdapterBank::init(&shapes(), 2, 1.0, 999);
        load_params_from_map(&mut fresh, &map).unwrap();
        assert_eq!(params_hash(&fresh), params_hash(&bank));
    }

    #[test]
    fn unknown_site_is_an_error() {
        let bank = bank();
        assert!(bank.routed_delta("nope", Route::new(EmotionLabel::Awe)).is_err());
    }
}
