//! Dense-to-MoE checkpoint surgery.
//!
//! Every selected dense MLP is copied into all `E` experts of the new MoE
//! layer and the router is drawn fresh. All other tensors carry over
//! unchanged.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::model::{embed_images, embed_texts, Batch, ForwardOptions};
use crate::params::{
    check_params, expert_prefix, layer_prefix, normal_tensor, param_shapes, router_name, ParamStore, MLP_PARTS,
    ROUTER_INIT_STD,
};
use crate::spec::{MoeModality, MoeSpec, Trunk};

/// What the surgery changed.
#[derive(Clone, Debug, PartialEq)]
pub struct SurgeryReport {
    /// `(trunk, layer)` of every converted layer.
    pub converted_layers: Vec<(Trunk, usize)>,
    /// Scalars in the sparse checkpoint taken from the dense one, counting
    /// every expert copy.
    pub copied_params: usize,
    /// Freshly drawn router scalars.
    pub fresh_params: usize,
    pub total_params_dense: usize,
    pub total_params_sparse: usize,
    pub num_experts: usize,
    /// Dense MLP scalars of each converted layer, aligned with `converted_layers`.
    pub mlp_params: Vec<usize>,
}

impl SurgeryReport {
    /// `sparse = dense + Σ_layers (E − 1) · mlp + router`.
    pub fn expected_sparse_params(&self) -> usize {
        let extra: usize = self.mlp_params.iter().map(|m| (self.num_experts - 1) * m).sum();
        self.total_params_dense + extra + self.fresh_params
    }

    pub fn identity_holds(&self) -> bool {
        self.total_params_sparse == self.expected_sparse_params()
            && self.copied_params + self.fresh_params == self.total_params_sparse
    }

    /// Structured text rendering for printing and logs.
    pub fn to_text(&self) -> String {
        let layers: Vec<String> =
            self.converted_layers.iter().map(|(t, l)| format!("\"{}:{l}\"", t.prefix())).collect();
        format!(
            "{{\n  \"converted_layers\": [{}],\n  \"num_experts\": {},\n  \"copied_params\": {},\n  \"fresh_params\": {},\n  \
             \"total_params_dense\": {},\n  \"total_params_sparse\": {},\n  \"expected_sparse_params\": {},\n  \
             \"identity_holds\": {}\n}}",
            layers.join(", "),
            self.num_experts,
            self.copied_params,
            self.fresh_params,
            self.total_params_dense,
            self.total_params_sparse,
            self.expected_sparse_params(),
            self.identity_holds()
        )
    }
}

/// Converts a dense checkpoint into an MoE checkpoint.
pub fn upcycle_checkpoint(
    dense: &Checkpoint,
    moe: &MoeSpec,
    modality: MoeModality,
    seed: u64,
) -> Result<(Checkpoint, SurgeryReport)> {
    if dense.spec.moe.is_some() {
        return Err(Error::Surgery("source checkpoint already has MoE layers".into()));
    }
    check_params(&dense.spec, &dense.params).map_err(|e| Error::Surgery(e.to_string()))?;
    moe.validate()?;
    let spec = dense.spec.clone().with_moe(moe.clone(), modality);
    spec.validate()?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamStore::new();
    let mut converted = Vec::new();
    let mut mlp_params = Vec::new();
    let mut fresh = 0;
    let mut copied = 0;
    // Routers first, in trunk/layer order, so their draws do not depend on
    // other names.
    for trunk in spec.trunks() {
        for layer in spec.moe_layers(trunk) {
            let name = router_name(trunk, layer);
            let d = spec.trunk_tower(trunk).model_dim;
            let r = normal_tensor(&[d, moe.num_experts], ROUTER_INIT_STD, &mut rng);
            fresh += r.numel();
            params.insert(name, r);

            let mlp = format!("{}.mlp", layer_prefix(trunk, layer));
            let mut count = 0;
            for part in MLP_PARTS {
                let src = dense.params.get(&format!("{mlp}.{part}"))?;
                count += src.numel();
                for e in 0..moe.num_experts {
                    params.insert(format!("{}.{part}", expert_prefix(trunk, layer, e)), src.clone());
                    copied += src.numel();
                }
            }
            converted.push((trunk, layer));
            mlp_params.push(count);
        }
    }
    for name in param_shapes(&spec).into_keys() {
        if !params.contains(&name) {
            let t = dense.params.get(&name).map_err(|e| Error::Surgery(e.to_string()))?;
            copied += t.numel();
            params.insert(name, t.clone());
        }
    }
    check_params(&spec, &params).map_err(|e| Error::Surgery(e.to_string()))?;

    let report = SurgeryReport {
        converted_layers: converted,
        copied_params: copied,
        fresh_params: fresh,
        total_params_dense: dense.params.num_params(),
        total_params_sparse: params.num_params(),
        num_experts: moe.num_experts,
        mlp_params,
    };
    if !report.identity_holds() {
        return Err(Error::Surgery(format!("parameter-count identity violated:\n{}", report.to_text())));
    }
    let sparse = Checkpoint { spec, step: dense.step, seed: dense.seed, upcycled: true, params };
    Ok((sparse, report))
}

/// Outcome of comparing dense and upcycled embeddings on one batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Equivalence {
    pub max_deviation: f32,
    pub dropped_assignments: usize,
}

/// Max absolute embedding deviation between `dense` and `sparse` on `batch`,
/// with gates renormalized after routing when `normalize_after` and a
/// capacity factor of `E` so no assignment can be dropped.
pub fn compare_embeddings(dense: &Checkpoint, sparse: &Checkpoint, batch: &Batch, normalize_after: bool) -> Result<Equivalence> {
    let moe = sparse
        .spec
        .moe
        .as_ref()
        .ok_or_else(|| Error::Verification("sparse checkpoint has no MoE layers".into()))?;
    let opts = ForwardOptions {
        capacity_factor: Some(moe.num_experts as f64),
        normalize_after: Some(normalize_after),
        jitter: None,
    };
    let dense_opts = ForwardOptions::default();
    let (ids, mask, l) = (&batch.token_ids, &batch.pad_mask, batch.seq_len);
    let di = embed_images(&dense.spec, &dense.params, &batch.images, &dense_opts)?;
    let dt = embed_texts(&dense.spec, &dense.params, ids, mask, l, &dense_opts)?;
    let si = embed_images(&sparse.spec, &sparse.params, &batch.images, &opts)?;
    let st = embed_texts(&sparse.spec, &sparse.params, ids, mask, l, &opts)?;
    let dropped = si.outcomes.iter().chain(&st.outcomes).map(|o| o.total_dropped()).sum();
    let max_deviation = di.embeddings.max_abs_diff(&si.embeddings).max(dt.embeddings.max_abs_diff(&st.embeddings));
    Ok(Equivalence { max_deviation, dropped_assignments: dropped })
}

/// Confirms a freshly upcycled model reproduces its dense source: gates
/// renormalized after routing, capacity large enough for zero drops.
/// Returns the max absolute deviation.
pub fn verify_equivalence(dense: &Checkpoint, sparse: &Checkpoint, batch: &Batch) -> Result<f32> {
    let eq = compare_embeddings(dense, sparse, batch, true)?;
    if eq.dropped_assignments > 0 {
        return Err(Error::Verification(format!(
            "{} assignments dropped under zero-drop capacity",
            eq.dropped_assignments
        )));
    }
    Ok(eq.max_deviation)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::init_params;
    use crate::spec::ModelSpec;
    use crate::tensor::Tensor;

    fn dense(seed: u64) -> Checkpoint {
        let spec = ModelSpec::tiny();
        Checkpoint { params: init_params(&spec, seed).unwrap(), spec, step: 5, seed, upcycled: false }
    }

    fn batch(seed: u64) -> Batch {
        let b = 4;
        let images = Tensor::from_fn(&[b, 3, 32, 32], |i| ((i as u64 * 2654435761 + seed) % 997) as f32 / 997.0);
        let ids = (0..b * 4).map(|i| if i % 4 < 2 { 1 + (i * 5) % 9 } else { 0 }).collect();
        let mask = (0..b * 4).map(|i| i % 4 >= 2).collect();
        Batch::new(images, ids, mask, 4).unwrap()
    }

    #[test]
    fn experts_are_copies_and_rest_is_untouched() {
        let d = dense(1);
        let (s, report) = upcycle_checkpoint(&d, &MoeSpec::default(), MoeModality::Both, 9).unwrap();
        assert_eq!(report.converted_layers, vec![(Trunk::Image, 1), (Trunk::Text, 1)]);
        for part in MLP_PARTS {
            let src = d.params.get(&format!("image.layers.1.mlp.{part}")).unwrap();
            for e in [0, 7] {
                assert_eq!(s.params.get(&format!("image.layers.1.moe.experts.{e}.{part}")).unwrap(), src);
            }
        }
        for (name, t) in d.params.iter() {
            if !name.contains(".layers.1.mlp.") {
                assert_eq!(s.params.get(name).unwrap(), t, "{name}");
            }
        }
        assert!(s.upcycled);
    }

    #[test]
    fn parameter_count_identity_tiny() {
        let (_, r) = upcycle_checkpoint(&dense(0), &MoeSpec::default(), MoeModality::Both, 0).unwrap();
        assert_eq!(r.mlp_params, vec![33_088, 33_088]);
        assert_eq!(r.total_params_sparse - r.total_params_dense, 2 * 232_128);
        assert_eq!(7 * 33_088 + 64 * 8, 232_128);
        assert!(r.identity_holds());
    }

    #[test]
    fn text_only_leaves_image_tower() {
        let d = dense(2);
        let (s, r) = upcycle_checkpoint(&d, &MoeSpec::default(), MoeModality::Text, 0).unwrap();
        assert_eq!(r.converted_layers, vec![(Trunk::Text, 1)]);
        for (name, t) in d.params.iter().filter(|(n, _)| n.starts_with("image.")) {
            assert_eq!(s.params.get(name).unwrap(), t);
        }
    }

    #[test]
    fn router_init_is_seeded() {
        let d = dense(0);
        let (a, _) = upcycle_checkpoint(&d, &MoeSpec::default(), MoeModality::Both, 4).unwrap();
        let (b, _) = upcycle_checkpoint(&d, &MoeSpec::default(), MoeModality::Both, 4).unwrap();
        let (c, _) = upcycle_checkpoint(&d, &MoeSpec::default(), MoeModality::Both, 5).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.params.get("image.layers.1.moe.router").unwrap(), c.params.get("image.layers.1.moe.router").unwrap());
    }

    #[test]
    fn missing_dense_names_are_reported() {
        let mut d = dense(0);
        let mut p = ParamStore::new();
        for (n, t) in d.params.iter().filter(|(n, _)| n.as_str() != "text.layers.1.mlp.in_proj") {
            p.insert(n.clone(), t.clone());
        }
        d.params = p;
        let err = upcycle_checkpoint(&d, &MoeSpec::default(), MoeModality::Both, 0).unwrap_err();
        assert!(matches!(err, Error::Surgery(_)));
        assert!(err.to_string().contains("text.layers.1.mlp.in_proj"));
    }

    #[test]
    fn fresh_upcycle_is_equivalent_and_off_mode_is_not() {
        let d = dense(3);
        let (s, _) = upcycle_checkpoint(&d, &MoeSpec::default(), MoeModality::Both, 1).unwrap();
        let dev = verify_equivalence(&d, &s, &batch(0)).unwrap();
        assert!(dev < 1e-5, "{dev}");
        let off = compare_embeddings(&d, &s, &batch(0), false).unwrap();
        assert!(off.max_deviation > dev);
    }

    #[test]
    fn already_sparse_source_is_rejected() {
        let (s, _) = upcycle_checkpoint(&dense(0), &MoeSpec::default(), MoeModality::Both, 0).unwrap();
        assert!(matches!(upcycle_checkpoint(&s, &MoeSpec::default(), MoeModality::Both, 0), Err(Error::Surgery(_))));
    }
}
