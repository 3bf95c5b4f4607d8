//! Retrieval and zero-shot classification metrics.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{embed_images, embed_texts, ForwardOptions};
use crate::params::ParamStore;
use crate::spec::ModelSpec;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    /// Image queries ranked against all texts.
    ImageToText,
    /// Text queries ranked against all images.
    TextToImage,
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

/// 0-based rank of candidate `truth` among `scores`; ties go to the lower index.
fn rank_of(scores: &[f64], truth: usize) -> usize {
    let s = scores[truth];
    scores.iter().enumerate().filter(|&(j, &v)| v > s || (v == s && j < truth)).count()
}

/// Fraction of queries whose paired item ranks within the top `k` by dot
/// product. Row `i` of both matrices is a true pair.
pub fn recall_at_k(img: &Tensor, txt: &Tensor, k: usize, dir: Direction) -> Result<f64> {
    if img.ndim() != 2 || img.shape() != txt.shape() {
        return Err(Error::Shape(format!("embedding shapes {:?} and {:?}", img.shape(), txt.shape())));
    }
    let n = img.rows();
    if n == 0 {
        return Err(Error::Contract("recall over zero pairs".into()));
    }
    if k == 0 || k > n {
        return Err(Error::Contract(format!("recall@{k} needs 1 <= k <= {n}")));
    }
    let (q, c) = match dir {
        Direction::ImageToText => (img, txt),
        Direction::TextToImage => (txt, img),
    };
    let hits = (0..n)
        .filter(|&i| {
            let scores: Vec<f64> = (0..n).map(|j| dot(q.row(i), c.row(j))).collect();
            rank_of(&scores, i) < k
        })
        .count();
    Ok(hits as f64 / n as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ZeroShot {
    pub top1: f64,
    /// Present only with at least five classes.
    pub top5: Option<f64>,
}

/// Classifies each image by its most similar class embedding.
pub fn zero_shot_classify(img: &Tensor, class_emb: &Tensor, labels: &[usize]) -> Result<ZeroShot> {
    let (n, c) = (img.rows(), class_emb.rows());
    if img.ndim() != 2 || class_emb.ndim() != 2 || img.last_dim() != class_emb.last_dim() {
        return Err(Error::Shape(format!("embedding shapes {:?} and {:?}", img.shape(), class_emb.shape())));
    }
    if n == 0 || labels.len() != n {
        return Err(Error::Contract(format!("{n} images with {} labels", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::Index(format!("label {bad} with {c} classes")));
    }
    let mut top1 = 0;
    let mut top5 = 0;
    for (i, &label) in labels.iter().enumerate() {
        let scores: Vec<f64> = (0..c).map(|j| dot(img.row(i), class_emb.row(j))).collect();
        let r = rank_of(&scores, label);
        top1 += usize::from(r < 1);
        top5 += usize::from(r < 5);
    }
    Ok(ZeroShot { top1: top1 as f64 / n as f64, top5: (c >= 5).then(|| top5 as f64 / n as f64) })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalReport {
    pub pairs: usize,
    pub i2t_r1: f64,
    pub i2t_r5: Option<f64>,
    pub t2i_r1: f64,
    pub t2i_r5: Option<f64>,
    pub zero_shot: ZeroShot,
}

impl EvalReport {
    pub fn to_text(&self) -> String {
        let opt = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.4}"));
        format!(
            "pairs: {}\ni2t recall@1: {:.4}\ni2t recall@5: {}\nt2i recall@1: {:.4}\nt2i recall@5: {}\n\
             zero-shot top-1: {:.4}\nzero-shot top-5: {}",
            self.pairs,
            self.i2t_r1,
            opt(self.i2t_r5),
            self.t2i_r1,
            opt(self.t2i_r5),
            self.zero_shot.top1,
            opt(self.zero_shot.top5)
        )
    }
}

/// Image and caption embeddings of a dataset, encoded as one batch.
pub fn embed_dataset(spec: &ModelSpec, params: &ParamStore, data: &Dataset, opts: &ForwardOptions) -> Result<(Tensor, Tensor)> {
    let batch = data.full_batch()?;
    let img = embed_images(spec, params, &batch.images, opts)?;
    let txt = embed_texts(spec, params, &batch.token_ids, &batch.pad_mask, batch.seq_len, opts)?;
    Ok((img.embeddings, txt.embeddings))
}

/// Retrieval in both directions plus zero-shot classification against one
/// caption per class.
pub fn evaluate(spec: &ModelSpec, params: &ParamStore, data: &Dataset) -> Result<EvalReport> {
    let opts = ForwardOptions::default();
    let (img, txt) = embed_dataset(spec, params, data, &opts)?;
    let n = img.rows();
    let r5 = |d| (n >= 5).then(|| recall_at_k(&img, &txt, 5, d)).transpose();
    let (ids, mask) = data.class_captions();
    let classes = embed_texts(spec, params, &ids, &mask, data.spec.caption_len, &opts)?;
    Ok(EvalReport {
        pairs: n,
        i2t_r1: recall_at_k(&img, &txt, 1, Direction::ImageToText)?,
        i2t_r5: r5(Direction::ImageToText)?,
        t2i_r1: recall_at_k(&img, &txt, 1, Direction::TextToImage)?,
        t2i_r5: r5(Direction::TextToImage)?,
        zero_shot: zero_shot_classify(&img, &classes.embeddings, &data.labels())?,
    })
}
