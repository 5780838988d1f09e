//! Joint multimodal attention and localized contextual updates.
//!
//! Everything here is scaled dot-product attention over explicit key/value
//! gathers:
//!
//! ```text
//! out = softmax(q · [k_self ⊕ k_ctx_1 ⊕ ...]^T / sqrt(d_head)) · [v_self ⊕ v_ctx_1 ⊕ ...]
//! ```
//!
//! [`joint_attention`] runs the full text⊕image sequence against itself.
//! [`contextual_attention`] updates one query stream against an ordered
//! list of context streams — the gather form of running dense attention
//! with a boolean mask, which [`masked_attention_oracle`] implements
//! directly (dense scores with -inf injected before softmax). The oracle
//! exists so the two routes can be checked against each other; production
//! paths use the gather form.
//!
//! Heads are computed independently on column slices and written back
//! concatenated. Rotary phases, when a stream carries them, are applied to
//! q and k before scoring; values are never rotated. Softmax rows are
//! normalized with per-row max subtraction, summing in ascending key
//! order.

use ndarray::{concatenate, Array2, Axis};

use crate::error::{Error, Result};
use crate::rope::{apply_rotation, RotaryPhases};

/// Identifies which pipeline stream a projection belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum StreamTag {
    ImageGlobal,
    ImageBranch(usize),
    ImageRegion(usize),
    TextBackground,
    TextScene,
    TextRegional(usize),
}

impl StreamTag {
    pub fn is_image(&self) -> bool {
        matches!(
            self,
            StreamTag::ImageGlobal | StreamTag::ImageBranch(_) | StreamTag::ImageRegion(_)
        )
    }
}

/// Per-stream q/k/v matrices (`tokens x d_model`), plus rotary phases for
/// image streams.
#[derive(Debug, Clone)]
pub struct Projection {
    pub tag: StreamTag,
    pub q: Array2<f64>,
    pub k: Array2<f64>,
    pub v: Array2<f64>,
    pub phases: Option<RotaryPhases>,
}

impl Projection {
    /// Image-stream projection. Image streams always carry phases
    /// (possibly [`RotaryPhases::none`]).
    pub fn image(
        tag: StreamTag,
        q: Array2<f64>,
        k: Array2<f64>,
        v: Array2<f64>,
        phases: RotaryPhases,
    ) -> Result<Self> {
        if !tag.is_image() {
            return Err(Error::Shape(format!("{tag:?} is not an image stream")));
        }
        if phases.token_count() != q.nrows() {
            return Err(Error::Shape(format!(
                "phases cover {} tokens, projection has {}",
                phases.token_count(),
                q.nrows()
            )));
        }
        Self::validated(tag, q, k, v, Some(phases))
    }

    /// Text-stream projection: no positional phases.
    pub fn text(tag: StreamTag, q: Array2<f64>, k: Array2<f64>, v: Array2<f64>) -> Result<Self> {
        if tag.is_image() {
            return Err(Error::Shape(format!("{tag:?} is not a text stream")));
        }
        Self::validated(tag, q, k, v, None)
    }

    fn validated(
        tag: StreamTag,
        q: Array2<f64>,
        k: Array2<f64>,
        v: Array2<f64>,
        phases: Option<RotaryPhases>,
    ) -> Result<Self> {
        if q.nrows() != k.nrows() || q.nrows() != v.nrows() {
            return Err(Error::Shape(format!(
                "q/k/v row counts differ: {}/{}/{}",
                q.nrows(),
                k.nrows(),
                v.nrows()
            )));
        }
        if q.ncols() != k.ncols() || q.ncols() != v.ncols() {
            return Err(Error::Shape(format!(
                "q/k/v widths differ: {}/{}/{}",
                q.ncols(),
                k.ncols(),
                v.ncols()
            )));
        }
        Ok(Projection {
            tag,
            q,
            k,
            v,
            phases,
        })
    }

    pub fn tokens(&self) -> usize {
        self.q.nrows()
    }

    pub fn width(&self) -> usize {
        self.q.ncols()
    }

    /// Row subset of this projection under a new tag, keeping phases
    /// aligned. Used to split the global image stream into region /
    /// background views.
    pub fn select(&self, indices: &[usize], tag: StreamTag) -> Result<Self> {
        let q = self.q.select(Axis(0), indices);
        let k = self.k.select(Axis(0), indices);
        let v = self.v.select(Axis(0), indices);
        match (&self.phases, tag.is_image()) {
            (Some(ph), true) => Projection::image(tag, q, k, v, ph.select_rows(indices)),
            (None, false) => Projection::text(tag, q, k, v),
            _ => Err(Error::Shape(format!(
                "cannot retag {:?} as {:?} across modalities",
                self.tag, tag
            ))),
        }
    }

    /// q and k with rotary phases applied (v is untouched by rotation).
    fn rotated_qk(&self, heads: usize) -> Result<(Array2<f64>, Array2<f64>)> {
        match &self.phases {
            Some(ph) => Ok((
                apply_rotation(&self.q, ph, heads)?,
                apply_rotation(&self.k, ph, heads)?,
            )),
            None => Ok((self.q.clone(), self.k.clone())),
        }
    }
}

/// Declares which streams a contextual update may read.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionPolicy {
    pub query: StreamTag,
    pub contexts: Vec<StreamTag>,
    pub include_self: bool,
}

impl AttentionPolicy {
    pub fn new(query: StreamTag, contexts: Vec<StreamTag>, include_self: bool) -> Result<Self> {
        let mut seen = vec![query];
        for tag in &contexts {
            if seen.contains(tag) {
                return Err(Error::Shape(format!(
                    "duplicate stream tag {tag:?} in policy"
                )));
            }
            seen.push(*tag);
        }
        Ok(AttentionPolicy {
            query,
            contexts,
            include_self,
        })
    }

    /// Boolean mask over the concatenation of `streams` realizing this
    /// policy, plus the row range holding the query stream.
    ///
    /// Query rows may attend to the policy's streams; every other row is
    /// given its own diagonal entry so dense attention stays defined.
    pub fn mask_for(
        &self,
        streams: &[&Projection],
    ) -> Result<(Array2<bool>, std::ops::Range<usize>)> {
        let mut offsets = Vec::with_capacity(streams.len());
        let mut total = 0usize;
        for s in streams {
            offsets.push(total);
            total += s.tokens();
        }
        let find = |tag: StreamTag| -> Result<std::ops::Range<usize>> {
            let mut found = None;
            for (i, s) in streams.iter().enumerate() {
                if s.tag == tag {
                    if found.is_some() {
                        return Err(Error::Shape(format!("stream tag {tag:?} appears twice")));
                    }
                    found = Some(offsets[i]..offsets[i] + s.tokens());
                }
            }
            found.ok_or_else(|| Error::Shape(format!("stream tag {tag:?} missing")))
        };

        let query_rows = find(self.query)?;
        let mut mask = Array2::from_elem((total, total), false);
        for i in 0..total {
            if !query_rows.contains(&i) {
                mask[[i, i]] = true;
            }
        }
        let mut allowed: Vec<std::ops::Range<usize>> = Vec::new();
        if self.include_self {
            allowed.push(query_rows.clone());
        }
        for tag in &self.contexts {
            allowed.push(find(*tag)?);
        }
        for i in query_rows.clone() {
            for cols in &allowed {
                for j in cols.clone() {
                    mask[[i, j]] = true;
                }
            }
        }
        Ok((mask, query_rows))
    }
}

/// Scaled dot-product attention of `q` against concatenated key/value
/// blocks. `record`, when given, accumulates the head-averaged weight
/// matrix.
fn attend(
    q: &Array2<f64>,
    key_blocks: &[(Array2<f64>, &Array2<f64>)],
    heads: usize,
    mut record: Option<&mut Array2<f64>>,
) -> Result<Array2<f64>> {
    let d = q.ncols();
    if !d.is_multiple_of(heads) {
        return Err(Error::Shape(format!(
            "width {d} not divisible by {heads} heads"
        )));
    }
    for (k, v) in key_blocks {
        if k.ncols() != d || v.ncols() != d {
            return Err(Error::Shape("key/value width mismatch".into()));
        }
    }
    let views_k: Vec<_> = key_blocks.iter().map(|(k, _)| k.view()).collect();
    let views_v: Vec<_> = key_blocks.iter().map(|(_, v)| v.view()).collect();
    let k_cat = concatenate(Axis(0), &views_k).map_err(|e| Error::Shape(e.to_string()))?;
    let v_cat = concatenate(Axis(0), &views_v).map_err(|e| Error::Shape(e.to_string()))?;

    let nq = q.nrows();
    let nk = k_cat.nrows();
    if nq == 0 {
        return Ok(Array2::zeros((0, d)));
    }
    if nk == 0 {
        return Err(Error::EmptyContext("no keys to attend to".into()));
    }
    let head_dim = d / heads;
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut out = Array2::zeros((nq, d));
    if let Some(rec) = record.as_deref_mut() {
        if rec.dim() != (nq, nk) {
            return Err(Error::Shape("recorder shape mismatch".into()));
        }
    }
    for h in 0..heads {
        let cols = h * head_dim..(h + 1) * head_dim;
        let qh = q.slice(ndarray::s![.., cols.clone()]);
        let kh = k_cat.slice(ndarray::s![.., cols.clone()]);
        let vh = v_cat.slice(ndarray::s![.., cols.clone()]);
        let mut scores = qh.dot(&kh.t());
        scores *= scale;
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite("attention score is not finite".into()));
        }
        softmax_rows(&mut scores);
        let oh = scores.dot(&vh);
        out.slice_mut(ndarray::s![.., cols]).assign(&oh);
        if let Some(rec) = record.as_deref_mut() {
            scores /= heads as f64;
            *rec += &scores;
        }
    }
    Ok(out)
}

/// In-place numerically stable softmax over each row. Rows that are
/// entirely `-inf` become NaN and must be screened by the caller.
fn softmax_rows(scores: &mut Array2<f64>) {
    for mut row in scores.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for s in row.iter_mut() {
            *s = (*s - max).exp();
            sum += *s;
        }
        for s in row.iter_mut() {
            *s /= sum;
        }
    }
}

/// Full joint attention over the `[text ⊕ image]` sequence; outputs are
/// split back per stream.
pub fn joint_attention(
    text: &Projection,
    image: &Projection,
    heads: usize,
) -> Result<(Array2<f64>, Array2<f64>)> {
    let (out, _) = joint_attention_inner(text, image, heads, false)?;
    Ok(out)
}

/// Joint attention that also returns the head-averaged weight matrix over
/// the concatenated sequence (used by block profiling).
pub fn joint_attention_recorded(
    text: &Projection,
    image: &Projection,
    heads: usize,
) -> Result<((Array2<f64>, Array2<f64>), Array2<f64>)> {
    let (out, rec) = joint_attention_inner(text, image, heads, true)?;
    Ok((out, rec.expect("recording requested")))
}

fn joint_attention_inner(
    text: &Projection,
    image: &Projection,
    heads: usize,
    record: bool,
) -> Result<((Array2<f64>, Array2<f64>), Option<Array2<f64>>)> {
    if text.width() != image.width() {
        return Err(Error::Shape(format!(
            "text width {} != image width {}",
            text.width(),
            image.width()
        )));
    }
    let (tq, tk) = text.rotated_qk(heads)?;
    let (iq, ik) = image.rotated_qk(heads)?;
    let q =
        concatenate(Axis(0), &[tq.view(), iq.view()]).map_err(|e| Error::Shape(e.to_string()))?;
    let blocks = [(tk, &text.v), (ik, &image.v)];
    let n = q.nrows();
    let mut rec = record.then(|| Array2::zeros((n, n)));
    let out = attend(&q, &blocks, heads, rec.as_mut())?;
    let nt = text.tokens();
    let text_out = out.slice(ndarray::s![..nt, ..]).to_owned();
    let image_out = out.slice(ndarray::s![nt.., ..]).to_owned();
    Ok(((text_out, image_out), rec))
}

/// Updates the query stream against its own tokens (when
/// `policy.include_self`) followed by the context streams, in order.
pub fn contextual_attention(
    query: &Projection,
    contexts: &[&Projection],
    policy: &AttentionPolicy,
    heads: usize,
) -> Result<Array2<f64>> {
    if policy.query != query.tag {
        return Err(Error::Shape(format!(
            "policy queries {:?} but got {:?}",
            policy.query, query.tag
        )));
    }
    if policy.contexts.len() != contexts.len()
        || policy
            .contexts
            .iter()
            .zip(contexts)
            .any(|(tag, p)| *tag != p.tag)
    {
        return Err(Error::Shape("context streams do not match policy".into()));
    }
    if !policy.include_self && contexts.is_empty() {
        return Err(Error::EmptyContext(
            "include_self=false with no context streams".into(),
        ));
    }
    let (qr, kr) = query.rotated_qk(heads)?;
    let mut blocks: Vec<(Array2<f64>, &Array2<f64>)> = Vec::with_capacity(contexts.len() + 1);
    if policy.include_self {
        blocks.push((kr, &query.v));
    }
    for ctx in contexts {
        if ctx.width() != query.width() {
            return Err(Error::Shape("context width mismatch".into()));
        }
        let (_, ck) = ctx.rotated_qk(heads)?;
        blocks.push((ck, &ctx.v));
    }
    attend(&qr, &blocks, heads, None)
}

/// Dense attention over the concatenation of `streams` with `-inf`
/// injected at masked score positions before softmax.
///
/// Reference route for the masking-equivalence checks; each mask row must
/// keep at least one key.
pub fn masked_attention_oracle(
    streams: &[&Projection],
    mask: &Array2<bool>,
    heads: usize,
) -> Result<Array2<f64>> {
    if streams.is_empty() {
        return Err(Error::EmptyContext("no streams".into()));
    }
    let d = streams[0].width();
    let mut qs = Vec::new();
    let mut ks = Vec::new();
    let mut vs = Vec::new();
    for s in streams {
        if s.width() != d {
            return Err(Error::Shape("stream width mismatch".into()));
        }
        let (q, k) = s.rotated_qk(heads)?;
        qs.push(q);
        ks.push(k);
        vs.push(s.v.clone());
    }
    let q = concatenate(Axis(0), &qs.iter().map(|a| a.view()).collect::<Vec<_>>())
        .map_err(|e| Error::Shape(e.to_string()))?;
    let k = concatenate(Axis(0), &ks.iter().map(|a| a.view()).collect::<Vec<_>>())
        .map_err(|e| Error::Shape(e.to_string()))?;
    let v = concatenate(Axis(0), &vs.iter().map(|a| a.view()).collect::<Vec<_>>())
        .map_err(|e| Error::Shape(e.to_string()))?;
    let n = q.nrows();
    if mask.dim() != (n, n) {
        return Err(Error::Shape(format!(
            "mask {:?} vs sequence {n}",
            mask.dim()
        )));
    }
    for (i, row) in mask.rows().into_iter().enumerate() {
        if !row.iter().any(|m| *m) {
            return Err(Error::AllMasked(i));
        }
    }
    if !d.is_multiple_of(heads) {
        return Err(Error::Shape(format!(
            "width {d} not divisible by {heads} heads"
        )));
    }
    let head_dim = d / heads;
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut out = Array2::zeros((n, d));
    for h in 0..heads {
        let cols = h * head_dim..(h + 1) * head_dim;
        let qh = q.slice(ndarray::s![.., cols.clone()]);
        let kh = k.slice(ndarray::s![.., cols.clone()]);
        let vh = v.slice(ndarray::s![.., cols.clone()]);
        let mut scores = qh.dot(&kh.t());
        scores *= scale;
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite("attention score is not finite".into()));
        }
        for ((i, j), s) in scores.indexed_iter_mut() {
            if !mask[[i, j]] {
                *s = f64::NEG_INFINITY;
            }
        }
        softmax_rows(&mut scores);
        let oh = scores.dot(&vh);
        out.slice_mut(ndarray::s![.., cols]).assign(&oh);
    }
    Ok(out)
}
