//! Router statistics over a dataset and per-image maps of dropped tokens.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{embed_images, embed_texts, ForwardOptions};
use crate::moe::RoutingOutcome;
use crate::params::ParamStore;
use crate::spec::{Modality, ModelSpec};
use crate::tensor::Tensor;

pub const TRACE_HEADER: &str = "modality,layer,expert,assign_count,drop_count,assign_ratio,mean_gate_prob";

/// Counters of one `(modality, layer)`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LayerStats {
    pub tokens: u64,
    pub assign: Vec<u64>,
    pub drops: Vec<u64>,
    pub gate_prob_sum: Vec<f64>,
}

/// Per-layer, per-expert routing counts accumulated over many forward passes.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RouterTrace {
    pub top_k: usize,
    pub layers: BTreeMap<(Modality, usize), LayerStats>,
}

impl RouterTrace {
    pub fn new(top_k: usize) -> Self {
        Self { top_k, layers: BTreeMap::new() }
    }

    pub fn record(&mut self, o: &RoutingOutcome) {
        let e = o.num_experts;
        let st = self.layers.entry((o.modality, o.layer_id)).or_insert_with(|| LayerStats {
            tokens: 0,
            assign: vec![0; e],
            drops: vec![0; e],
            gate_prob_sum: vec![0.0; e],
        });
        st.tokens += o.num_tokens() as u64;
        for (acc, n) in st.assign.iter_mut().zip(o.expert_load()) {
            *acc += n as u64;
        }
        for (acc, n) in st.drops.iter_mut().zip(o.expert_drops()) {
            *acc += n as u64;
        }
        for j in 0..o.num_tokens() {
            for (acc, &p) in st.gate_prob_sum.iter_mut().zip(o.gate_probs.row(j)) {
                *acc += p as f64;
            }
        }
    }

    /// Adds another trace's counts into this one.
    pub fn merge(&mut self, other: &RouterTrace) {
        for (key, o) in &other.layers {
            match self.layers.get_mut(key) {
                Some(st) => {
                    st.tokens += o.tokens;
                    st.assign.iter_mut().zip(&o.assign).for_each(|(a, b)| *a += b);
                    st.drops.iter_mut().zip(&o.drops).for_each(|(a, b)| *a += b);
                    st.gate_prob_sum.iter_mut().zip(&o.gate_prob_sum).for_each(|(a, b)| *a += b);
                }
                None => {
                    self.layers.insert(*key, o.clone());
                }
            }
        }
    }

    /// Surviving assignments of expert `e` over all `tokens × K` selections.
    pub fn assign_ratio(st: &LayerStats, top_k: usize, e: usize) -> f64 {
        st.assign[e] as f64 / (st.tokens as f64 * top_k as f64)
    }

    /// `Σ_e assign + Σ_e drops = tokens × K` for every layer.
    pub fn check_conservation(&self) -> Result<()> {
        for ((m, l), st) in &self.layers {
            let lhs: u64 = st.assign.iter().sum::<u64>() + st.drops.iter().sum::<u64>();
            let rhs = st.tokens * self.top_k as u64;
            if lhs != rhs {
                return Err(Error::Verification(format!("{m} layer {l}: {lhs} assignments + drops vs {rhs} selections")));
            }
        }
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{TRACE_HEADER}\n");
        for ((m, l), st) in &self.layers {
            for e in 0..st.assign.len() {
                writeln!(
                    s,
                    "{m},{l},{e},{},{},{:.6},{:.6}",
                    st.assign[e],
                    st.drops[e],
                    Self::assign_ratio(st, self.top_k, e),
                    st.gate_prob_sum[e] / st.tokens as f64
                )
                .expect("write to string");
            }
        }
        s
    }
}

/// Runs inference over `data` in batches of `batch_size` and accumulates a
/// trace. Batches are split into `threads` contiguous shards whose traces are
/// merged in shard order.
pub fn collect_router_trace(
    spec: &ModelSpec,
    params: &ParamStore,
    data: &Dataset,
    batch_size: usize,
    opts: &ForwardOptions,
    threads: usize,
) -> Result<RouterTrace> {
    let moe = spec.moe.as_ref().ok_or_else(|| Error::Contract("model has no MoE layers; the trace would be empty".into()))?;
    if batch_size == 0 {
        return Err(Error::Contract("batch size must be positive".into()));
    }
    let chunks: Vec<Vec<usize>> =
        (0..data.len()).collect::<Vec<_>>().chunks(batch_size).map(<[usize]>::to_vec).collect();
    let run = |part: &[Vec<usize>]| -> Result<RouterTrace> {
        let mut trace = RouterTrace::new(moe.top_k);
        for idx in part {
            let b = data.batch(idx)?;
            let i = embed_images(spec, params, &b.images, opts)?;
            let t = embed_texts(spec, params, &b.token_ids, &b.pad_mask, b.seq_len, opts)?;
            i.outcomes.iter().chain(&t.outcomes).for_each(|o| trace.record(o));
        }
        Ok(trace)
    };
    let threads = threads.clamp(1, chunks.len().max(1));
    let per = chunks.len().div_ceil(threads).max(1);
    let shards: Vec<Result<RouterTrace>> = if threads == 1 {
        vec![run(&chunks)]
    } else {
        std::thread::scope(|s| {
            let handles: Vec<_> = chunks.chunks(per).map(|part| s.spawn(move || run(part))).collect();
            handles.into_iter().map(|h| h.join().expect("trace worker panicked")).collect()
        })
    };
    let mut trace = RouterTrace::new(moe.top_k);
    for shard in shards {
        trace.merge(&shard?);
    }
    trace.check_conservation()?;
    Ok(trace)
}

/// Patches of one image whose token lost every top-K assignment in a layer.
#[derive(Clone, Debug, PartialEq)]
pub struct DropMap {
    pub layer: usize,
    pub side: usize,
    /// Row-major over the patch grid; `true` means dropped.
    pub cells: Vec<bool>,
    /// Whether the class token was dropped as well.
    pub class_token_dropped: bool,
}

impl DropMap {
    pub fn dropped_cells(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }

    /// `.` for kept, `X` for dropped, one grid row per line.
    pub fn to_text(&self) -> String {
        let mut s = String::with_capacity(self.cells.len() + self.side);
        for row in self.cells.chunks(self.side) {
            s.extend(row.iter().map(|&d| if d { 'X' } else { '.' }));
            s.push('\n');
        }
        s
    }

    /// Binary PPM of `image [C × H × W]` with dropped patches tinted red.
    pub fn to_ppm(&self, image: &Tensor, patch: usize) -> Result<Vec<u8>> {
        let s = image.shape();
        if s.len() != 3 || s[1] != s[2] || s[1] != self.side * patch {
            return Err(Error::Shape(format!("image {s:?} does not match a {0}x{0} grid of {patch}px patches", self.side)));
        }
        let (c, n) = (s[0], s[1]);
        let mut out = format!("P6\n{n} {n}\n255\n").into_bytes();
        for y in 0..n {
            for x in 0..n {
                let dropped = self.cells[(y / patch) * self.side + x / patch];
                for ch in 0..3 {
                    let v = image.data()[(ch.min(c - 1) * n + y) * n + x].clamp(0.0, 1.0);
                    let v = if dropped { 0.5 * v + if ch == 0 { 0.5 } else { 0.0 } } else { v };
                    out.push((v * 255.0).round() as u8);
                }
            }
        }
        Ok(out)
    }

    /// Writes `<stem>.ppm` and `<stem>.txt`.
    pub fn write(&self, image: &Tensor, patch: usize, dir: &Path, stem: &str) -> Result<()> {
        fs::write(dir.join(format!("{stem}.ppm")), self.to_ppm(image, patch)?)?;
        fs::write(dir.join(format!("{stem}.txt")), self.to_text())?;
        Ok(())
    }
}

/// Drop map of one `[C × H × W]` image at an image-tower MoE `layer`. Also
/// returns the routing outcome it was read from.
pub fn render_drop_map(
    spec: &ModelSpec,
    params: &ParamStore,
    image: &Tensor,
    layer: usize,
    opts: &ForwardOptions,
) -> Result<(DropMap, RoutingOutcome)> {
    if !spec.is_moe_layer(spec.trunk(Modality::Image), layer) {
        return Err(Error::Contract(format!("image layer {layer} is not an MoE layer")));
    }
    let mut shape = vec![1];
    shape.extend_from_slice(image.shape());
    let batch = image.reshape(&shape)?;
    let e = embed_images(spec, params, &batch, opts)?;
    let o = e.outcomes.into_iter().find(|o| o.layer_id == layer).expect("MoE layer yields an outcome");
    let cells = (1..o.num_tokens()).map(|j| o.fully_dropped(j)).collect();
    let map = DropMap { layer, side: spec.grid_side(), cells, class_token_dropped: o.fully_dropped(0) };
    Ok((map, o))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::moe::assign_tokens;

    fn outcome(choices: &[usize], k: usize, e: usize, cap: usize, layer: usize) -> RoutingOutcome {
        let s = choices.len() / k;
        let probs = Tensor::full(&[s, e], 1.0 / e as f32);
        assign_tokens(choices, k, probs.clone(), probs, cap, layer, Modality::Image)
    }

    #[test]
    fn trace_counts_and_conservation() {
        let mut t = RouterTrace::new(1);
        t.record(&outcome(&[0, 0, 0, 1], 1, 2, 2, 1));
        let st = &t.layers[&(Modality::Image, 1)];
        assert_eq!(st.assign, vec![2, 1]);
        assert_eq!(st.drops, vec![1, 0]);
        t.check_conservation().unwrap();
        let csv = t.to_csv();
        assert!(csv.starts_with(TRACE_HEADER));
        assert!(csv.contains("image,1,0,2,1,0.500000,0.500000"));
    }

    #[test]
    fn merge_adds_counts() {
        let mut a = RouterTrace::new(1);
        a.record(&outcome(&[0, 1], 1, 2, 2, 1));
        let mut b = a.clone();
        b.merge(&a);
        assert_eq!(b.layers[&(Modality::Image, 1)].tokens, 4);
        b.check_conservation().unwrap();
    }

    #[test]
    fn single_expert_ratio_is_one() {
        let mut t = RouterTrace::new(1);
        t.record(&outcome(&[0; 6], 1, 1, 6, 1));
        let st = &t.layers[&(Modality::Image, 1)];
        assert_eq!(RouterTrace::assign_ratio(st, 1, 0), 1.0);
    }

    #[test]
    fn drop_map_text_and_ppm() {
        let m = DropMap { layer: 1, side: 2, cells: vec![true, false, false, true], class_token_dropped: false };
        assert_eq!(m.to_text(), "X.\n.X\n");
        assert_eq!(m.dropped_cells(), 2);
        let img = Tensor::zeros(&[3, 4, 4]);
        let ppm = m.to_ppm(&img, 2).unwrap();
        let header = b"P6\n4 4\n255\n";
        assert_eq!(&ppm[..header.len()], header);
        assert_eq!(ppm.len(), header.len() + 48);
        assert_eq!(&ppm[header.len()..header.len() + 3], &[128, 0, 0]);
    }
}
