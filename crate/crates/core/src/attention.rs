//! The six attention variants and their decompositions.
//!
//! Everything is expressed as graph construction so the same code path
//! serves inference, training and gradient checking. The plain functions
//! [`compute_embeddings`], [`attention`] and [`block_forward`] wrap a
//! throwaway graph whose leaves are constants.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::{flops, FeatureMap, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    /// `σ(qᵢᵀkⱼ)`
    NL,
    /// `σ((qᵢ−μq)ᵀ(kⱼ−μk))`
    PairwiseNL,
    /// `σ(μqᵀkⱼ)`, identical for every query
    UnaryNL,
    /// `σ((qᵢ−μq)ᵀ(kⱼ−μk)) + σ(mⱼ)` with `m = Wm·x`
    DNL,
    /// `σ((qᵢ−μq)ᵀ(kⱼ−μk) + mⱼ)`
    DNLStar,
    /// `σ((qᵢ−μq)ᵀ(kⱼ−μk)) + σ(μqᵀkⱼ)`
    DNLDagger,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::NL,
        Variant::PairwiseNL,
        Variant::UnaryNL,
        Variant::DNL,
        Variant::DNLStar,
        Variant::DNLDagger,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::NL => "NL",
            Variant::PairwiseNL => "PairwiseNL",
            Variant::UnaryNL => "UnaryNL",
            Variant::DNL => "DNL",
            Variant::DNLStar => "DNLStar",
            Variant::DNLDagger => "DNLDagger",
        }
    }

    /// Whether the block owns the independent unary projection `Wm`.
    pub fn uses_unary_projection(self) -> bool {
        matches!(self, Variant::DNL | Variant::DNLStar)
    }

    /// Whether the attention contains a pairwise term.
    pub fn has_pairwise(self) -> bool {
        !matches!(self, Variant::UnaryNL)
    }

    /// Whether the attention contains a unary term.
    pub fn has_unary(self) -> bool {
        !matches!(self, Variant::PairwiseNL)
    }

    /// Sum of every attention row.
    pub fn row_sum(self) -> f64 {
        match self {
            Variant::DNL | Variant::DNLDagger => 2.0,
            _ => 1.0,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase();
        Ok(match norm.as_str() {
            "nl" => Variant::NL,
            "pairwisenl" | "pairwise" | "nl_p" => Variant::PairwiseNL,
            "unarynl" | "unary" | "nl_u" => Variant::UnaryNL,
            "dnl" => Variant::DNL,
            "dnlstar" | "dnl*" => Variant::DNLStar,
            "dnldagger" | "dnl†" => Variant::DNLDagger,
            _ => return Err(Error::Invalid(format!("unknown variant {s:?}"))),
        })
    }
}

/// Learnable weights of one block. Key, query and value width is `C/2`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    /// `[1, C]`, present only for variants with an independent unary projection.
    pub wm: Option<Tensor>,
    pub wout: Tensor,
}

impl BlockParams {
    /// `Wq, Wk, Wv ~ N(0, 1/√C)`, `Wm = 0`, `Wout = 0` so the block starts as
    /// the identity map.
    pub fn init<R: Rng + ?Sized>(channels: usize, variant: Variant, rng: &mut R) -> Result<Self> {
        check_channels(channels)?;
        let d = channels / 2;
        let normal = Normal::new(0.0, 1.0 / (channels as f64).sqrt())
            .map_err(|e| Error::Invalid(e.to_string()))?;
        let mut gaussian = |rows: usize| {
            Tensor::new(
                vec![rows, channels],
                (0..rows * channels).map(|_| normal.sample(rng)).collect(),
            )
        };
        let wq = gaussian(d)?;
        let wk = gaussian(d)?;
        let wv = gaussian(d)?;
        Ok(BlockParams {
            wq,
            wk,
            wv,
            wm: variant
                .uses_unary_projection()
                .then(|| Tensor::zeros(&[1, channels])),
            wout: Tensor::zeros(&[channels, d]),
        })
    }

    pub fn channels(&self) -> usize {
        self.wq.shape()[1]
    }

    /// Named tensors in a fixed order.
    pub fn tensors(&self) -> Vec<(&'static str, &Tensor)> {
        let mut out = vec![("wq", &self.wq), ("wk", &self.wk), ("wv", &self.wv)];
        if let Some(wm) = &self.wm {
            out.push(("wm", wm));
        }
        out.push(("wout", &self.wout));
        out
    }

    /// Number of scalars across all weight tensors.
    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn validate(&self, variant: Variant) -> Result<()> {
        let c = self.channels();
        check_channels(c)?;
        let d = c / 2;
        for (name, t) in self.tensors() {
            let expect: &[usize] = match name {
                "wm" => &[1, c],
                "wout" => &[c, d],
                _ => &[d, c],
            };
            if t.shape() != expect {
                return Err(Error::shape("BlockParams", t.shape(), expect));
            }
        }
        if variant.uses_unary_projection() && self.wm.is_none() {
            return Err(Error::Invalid(format!(
                "{variant} needs a unary projection Wm"
            )));
        }
        Ok(())
    }

    /// Adds the weights to `g` as leaves named `{prefix}wq`, `{prefix}wk`, ….
    pub fn to_graph(&self, g: &mut Graph, prefix: &str, trainable: bool) -> BlockLeaves {
        let mut leaf = |name: &str, t: &Tensor| {
            if trainable {
                g.param(format!("{prefix}{name}"), t.clone())
            } else {
                g.constant(t.clone())
            }
        };
        BlockLeaves {
            wq: leaf("wq", &self.wq),
            wk: leaf("wk", &self.wk),
            wv: leaf("wv", &self.wv),
            wm: self.wm.as_ref().map(|t| leaf("wm", t)),
            wout: leaf("wout", &self.wout),
        }
    }
}

fn check_channels(c: usize) -> Result<()> {
    if c < 2 || !c.is_multiple_of(2) {
        return Err(Error::Invalid(format!(
            "channel count must be even and ≥ 2, got {c}"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy)]
pub struct BlockLeaves {
    pub wq: NodeId,
    pub wk: NodeId,
    pub wv: NodeId,
    pub wm: Option<NodeId>,
    pub wout: NodeId,
}

#[derive(Debug, Clone, Copy)]
pub struct EmbeddingNodes {
    pub q: NodeId,
    pub k: NodeId,
    pub v: NodeId,
    pub m: Option<NodeId>,
    pub mu_q: NodeId,
    pub mu_k: NodeId,
}

/// Attention nodes. The optional fields are always present when the
/// decomposition was recorded; otherwise only those on the output path are.
#[derive(Debug, Clone, Copy)]
pub struct AttentionNodes {
    pub total: NodeId,
    pub pairwise_logits: Option<NodeId>,
    pub unary_logits: Option<NodeId>,
    pub pairwise_norm: Option<NodeId>,
    pub unary_norm: Option<NodeId>,
}

#[derive(Debug, Clone, Copy)]
pub struct BlockNodes {
    pub y: NodeId,
    pub embeddings: EmbeddingNodes,
    pub attention: AttentionNodes,
}

/// Q, K, V (and `m` when the variant has `Wm`) for an input `[C, HW]` node.
pub fn embedding_nodes(
    g: &mut Graph,
    x: NodeId,
    p: &BlockLeaves,
    variant: Variant,
) -> Result<EmbeddingNodes> {
    let q = g.matmul(p.wq, x)?;
    let k = g.matmul(p.wk, x)?;
    let v = g.matmul(p.wv, x)?;
    let m = if variant.uses_unary_projection() {
        let wm =
            p.wm.ok_or_else(|| Error::Invalid(format!("{variant} needs a unary projection Wm")))?;
        Some(g.matmul(wm, x)?)
    } else {
        None
    };
    let mu_q = g.row_mean(q)?;
    let mu_k = g.row_mean(k)?;
    Ok(EmbeddingNodes {
        q,
        k,
        v,
        m,
        mu_q,
        mu_k,
    })
}

/// Runs `f` uncounted unless `on_path` is set.
fn counted_if<R>(on_path: bool, f: impl FnOnce() -> R) -> R {
    if on_path {
        f()
    } else {
        flops::paused(f)
    }
}

/// Builds the attention map of `variant`. With `record` set, the
/// pairwise/unary split is computed for every variant, including terms that
/// do not feed the output; those extra nodes are excluded from FLOP counts.
pub fn attention_nodes(
    g: &mut Graph,
    variant: Variant,
    e: &EmbeddingNodes,
    record: bool,
) -> Result<AttentionNodes> {
    use Variant::*;
    let hw = g.value(e.q).dims2()?.1;

    let pair_on_path = !matches!(variant, NL | UnaryNL);
    let pairwise_logits = if pair_on_path || record {
        Some(counted_if(pair_on_path, || -> Result<NodeId> {
            let qc = g.sub_col(e.q, e.mu_q)?;
            let kc = g.sub_col(e.k, e.mu_k)?;
            g.matmul_t(qc, true, kc, false)
        })?)
    } else {
        None
    };

    let unary_on_path = !matches!(variant, NL | PairwiseNL);
    let unary_logits = match e.m {
        Some(m) => Some(m),
        None if unary_on_path || record => Some(counted_if(unary_on_path, || {
            g.matmul_t(e.mu_q, true, e.k, false)
        })?),
        None => None,
    };

    let norm_pair = |g: &mut Graph, on_path: bool| -> Result<Option<NodeId>> {
        match pairwise_logits {
            Some(p) if on_path || record => Ok(Some(counted_if(on_path, || g.softmax_rows(p))?)),
            _ => Ok(None),
        }
    };
    let norm_unary = |g: &mut Graph, on_path: bool| -> Result<Option<NodeId>> {
        match unary_logits {
            Some(u) if on_path || record => Ok(Some(counted_if(on_path, || g.softmax_rows(u))?)),
            _ => Ok(None),
        }
    };

    let (total, pairwise_norm, unary_norm) = match variant {
        NL => {
            let raw = g.matmul_t(e.q, true, e.k, false)?;
            let total = g.softmax_rows(raw)?;
            (total, norm_pair(g, false)?, norm_unary(g, false)?)
        }
        PairwiseNL => {
            let pn = norm_pair(g, true)?.expect("pairwise term on path");
            (pn, Some(pn), norm_unary(g, false)?)
        }
        UnaryNL => {
            let un = norm_unary(g, true)?.expect("unary term on path");
            let total = g.broadcast_rows(un, hw)?;
            (total, norm_pair(g, false)?, Some(un))
        }
        DNL | DNLDagger => {
            let pn = norm_pair(g, true)?.expect("pairwise term on path");
            let un = norm_unary(g, true)?.expect("unary term on path");
            let total = g.add_row(pn, un)?;
            (total, Some(pn), Some(un))
        }
        DNLStar => {
            let m = unary_logits.expect("m on path");
            let z = g.add_row(pairwise_logits.expect("pairwise on path"), m)?;
            let total = g.softmax_rows(z)?;
            (total, norm_pair(g, false)?, norm_unary(g, false)?)
        }
    };

    Ok(AttentionNodes {
        total,
        pairwise_logits,
        unary_logits,
        pairwise_norm,
        unary_norm,
    })
}

/// `y = x + Wout · (V · totalᵀ)`, i.e. `yᵢ = xᵢ + Wout Σⱼ ω(xᵢ, xⱼ) vⱼ`.
pub fn block_nodes(
    g: &mut Graph,
    x: NodeId,
    p: &BlockLeaves,
    variant: Variant,
    record: bool,
) -> Result<BlockNodes> {
    let c = g.value(x).dims2()?.0;
    let wc = g.value(p.wq).dims2()?.1;
    if c != wc {
        return Err(Error::shape(
            "block",
            g.value(x).shape(),
            g.value(p.wq).shape(),
        ));
    }
    let embeddings = embedding_nodes(g, x, p, variant)?;
    let attention = attention_nodes(g, variant, &embeddings, record)?;
    let agg = g.matmul_t(embeddings.v, false, attention.total, true)?;
    let out = g.matmul(p.wout, agg)?;
    let y = g.add(x, out)?;
    Ok(BlockNodes {
        y,
        embeddings,
        attention,
    })
}

/// Per-pixel embeddings, stored as `[C/2, HW]` matrices (column = pixel).
#[derive(Debug, Clone, PartialEq)]
pub struct Embeddings {
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
    /// `[1, HW]` unary logits from `Wm`.
    pub m: Option<Tensor>,
    /// `[C/2]`
    pub mu_q: Tensor,
    pub mu_k: Tensor,
}

impl Embeddings {
    /// Embeddings from explicit query/key/value matrices; means are derived.
    pub fn from_parts(q: Tensor, k: Tensor, v: Tensor, m: Option<Tensor>) -> Result<Self> {
        let (d, hw) = q.dims2()?;
        if k.dims2()? != (d, hw) {
            return Err(Error::shape("embeddings", q.shape(), k.shape()));
        }
        if v.dims2()?.1 != hw {
            return Err(Error::shape("embeddings", q.shape(), v.shape()));
        }
        if let Some(m) = &m {
            if m.len() != hw {
                return Err(Error::shape("embeddings", q.shape(), m.shape()));
            }
        }
        let mu_q = crate::tensor::row_means(&q)?.reshape(&[d])?;
        let mu_k = crate::tensor::row_means(&k)?.reshape(&[d])?;
        Ok(Embeddings {
            q,
            k,
            v,
            m: m.map(|m| m.reshape(&[1, hw])).transpose()?,
            mu_q,
            mu_k,
        })
    }

    pub fn pixels(&self) -> usize {
        self.q.shape()[1]
    }
}

pub fn compute_embeddings(x: &FeatureMap, p: &BlockParams, variant: Variant) -> Result<Embeddings> {
    p.validate(variant)?;
    let mut g = Graph::new();
    let xn = g.constant(x.to_matrix());
    let leaves = p.to_graph(&mut g, "", false);
    let e = embedding_nodes(&mut g, xn, &leaves, variant)?;
    let d = g.value(e.q).shape()[0];
    Ok(Embeddings {
        q: g.value(e.q).clone(),
        k: g.value(e.k).clone(),
        v: g.value(e.v).clone(),
        m: e.m.map(|m| g.value(m).clone()),
        mu_q: g.value(e.mu_q).reshape(&[d])?,
        mu_k: g.value(e.mu_k).reshape(&[d])?,
    })
}

/// Attention rows (indexed by query `i`) plus their pairwise and unary parts.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionDecomposition {
    pub variant: Variant,
    /// `[HW, HW]`
    pub total: Tensor,
    /// `[HW, HW]` whitened dot products.
    pub pairwise_logits: Tensor,
    /// `[HW]`: `m` for variants with `Wm`, else `μqᵀK`.
    pub unary_logits: Tensor,
    /// `[HW, HW]` row-softmax of the pairwise logits.
    pub pairwise_norm: Tensor,
    /// `[HW]` softmax of the unary logits over key positions.
    pub unary_norm: Tensor,
}

impl AttentionDecomposition {
    fn from_graph(g: &Graph, variant: Variant, a: &AttentionNodes) -> Result<Self> {
        let need = |n: Option<NodeId>| n.expect("decomposition recorded");
        let hw = g.value(a.total).shape()[0];
        Ok(AttentionDecomposition {
            variant,
            total: g.value(a.total).clone(),
            pairwise_logits: g.value(need(a.pairwise_logits)).clone(),
            unary_logits: g.value(need(a.unary_logits)).reshape(&[hw])?,
            pairwise_norm: g.value(need(a.pairwise_norm)).clone(),
            unary_norm: g.value(need(a.unary_norm)).reshape(&[hw])?,
        })
    }

    pub fn pixels(&self) -> usize {
        self.total.shape()[0]
    }
}

pub fn attention(variant: Variant, e: &Embeddings) -> Result<AttentionDecomposition> {
    if variant.uses_unary_projection() && e.m.is_none() {
        return Err(Error::Invalid(format!("{variant} needs unary logits m")));
    }
    let d = e.q.shape()[0];
    let mut g = Graph::new();
    let q = g.constant(e.q.clone());
    let k = g.constant(e.k.clone());
    let v = g.constant(e.v.clone());
    let m = if variant.uses_unary_projection() {
        e.m.clone().map(|m| g.constant(m))
    } else {
        None
    };
    let mu_q = g.constant(e.mu_q.reshape(&[d, 1])?);
    let mu_k = g.constant(e.mu_k.reshape(&[d, 1])?);
    let nodes = EmbeddingNodes {
        q,
        k,
        v,
        m,
        mu_q,
        mu_k,
    };
    let a = attention_nodes(&mut g, variant, &nodes, true)?;
    AttentionDecomposition::from_graph(&g, variant, &a)
}

/// Full block forward with the attention decomposition recorded.
pub fn block_forward(
    x: &FeatureMap,
    p: &BlockParams,
    variant: Variant,
) -> Result<(FeatureMap, AttentionDecomposition)> {
    p.validate(variant)?;
    let mut g = Graph::new();
    let xn = g.constant(x.to_matrix());
    let leaves = p.to_graph(&mut g, "", false);
    let b = block_nodes(&mut g, xn, &leaves, variant, true)?;
    let y = FeatureMap::from_matrix(g.value(b.y), x.height(), x.width())?;
    let d = AttentionDecomposition::from_graph(&g, variant, &b.attention)?;
    Ok((y, d))
}

/// Block output only; nothing off the output path is computed.
pub fn block_output(x: &FeatureMap, p: &BlockParams, variant: Variant) -> Result<FeatureMap> {
    p.validate(variant)?;
    let mut g = Graph::new();
    let xn = g.constant(x.to_matrix());
    let leaves = p.to_graph(&mut g, "", false);
    let b = block_nodes(&mut g, xn, &leaves, variant, false)?;
    FeatureMap::from_matrix(g.value(b.y), x.height(), x.width())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_params(c: usize, variant: Variant, seed: u64) -> BlockParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = BlockParams::init(c, variant, &mut rng).unwrap();
        let normal = Normal::new(0.0, 0.5).unwrap();
        p.wout = Tensor::from_fn(p.wout.shape(), |_| normal.sample(&mut rng)).unwrap();
        if let Some(wm) = &mut p.wm {
            *wm = Tensor::from_fn(wm.shape(), |_| normal.sample(&mut rng)).unwrap();
        }
        p
    }

    fn random_map(c: usize, h: usize, w: usize, seed: u64) -> FeatureMap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0).unwrap();
        FeatureMap::from_vec(
            c,
            h,
            w,
            (0..c * h * w).map(|_| normal.sample(&mut rng)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn parse_names() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert_eq!("dnl*".parse::<Variant>().unwrap(), Variant::DNLStar);
        assert!("GCNet".parse::<Variant>().is_err());
    }

    #[test]
    fn param_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for c in [4, 8, 16] {
            let nl = BlockParams::init(c, Variant::NL, &mut rng).unwrap();
            let dnl = BlockParams::init(c, Variant::DNL, &mut rng).unwrap();
            assert_eq!(nl.param_count(), 2 * c * c);
            assert_eq!(dnl.param_count(), (2 * c + 1) * c);
        }
        assert!(BlockParams::init(5, Variant::NL, &mut rng).is_err());
    }

    #[test]
    fn zero_query_projection_gives_zero_queries() {
        let mut p = random_params(4, Variant::NL, 1);
        p.wq = Tensor::zeros(&[2, 4]);
        let e = compute_embeddings(&random_map(4, 2, 3, 2), &p, Variant::NL).unwrap();
        assert!(e.q.data().iter().all(|&v| v == 0.0));
        assert!(e.mu_q.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_pixel_mean_is_the_pixel() {
        let p = random_params(4, Variant::DNL, 3);
        let e = compute_embeddings(&random_map(4, 1, 1, 4), &p, Variant::DNL).unwrap();
        assert_eq!(e.mu_q.data(), e.q.data());
    }

    #[test]
    fn unary_projection_hand_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut p = BlockParams::init(2, Variant::DNL, &mut rng).unwrap();
        p.wm = Some(Tensor::matrix(&[&[1.0, 1.0]]));
        let x = FeatureMap::from_vec(2, 1, 1, vec![3.0, 4.0]).unwrap();
        let e = compute_embeddings(&x, &p, Variant::DNL).unwrap();
        assert_eq!(e.m.unwrap().data(), &[7.0]);
    }

    #[test]
    fn missing_unary_projection_is_an_error() {
        let mut p = random_params(4, Variant::DNL, 5);
        p.wm = None;
        assert!(compute_embeddings(&random_map(4, 2, 2, 6), &p, Variant::DNL).is_err());
        let e = compute_embeddings(&random_map(4, 2, 2, 6), &p, Variant::NL).unwrap();
        assert!(attention(Variant::DNLStar, &e).is_err());
    }

    #[test]
    fn constant_map_gives_uniform_pairwise() {
        let x =
            FeatureMap::from_vec(4, 3, 3, (0..36).map(|i| (i / 9) as f64 * 0.7).collect()).unwrap();
        for v in Variant::ALL {
            let p = random_params(4, v, 7);
            let (_, d) = block_forward(&x, &p, v).unwrap();
            for &a in d.pairwise_norm.data() {
                assert!((a - 1.0 / 9.0).abs() < 1e-12, "{v}: {a}");
            }
        }
    }

    #[test]
    fn single_pixel_nl_is_one() {
        let p = random_params(4, Variant::NL, 8);
        let (_, d) = block_forward(&random_map(4, 1, 1, 9), &p, Variant::NL).unwrap();
        assert_eq!(d.total.data(), &[1.0]);
    }

    #[test]
    fn dnl_two_pixel_hand_value() {
        // pairwise logits row [0, ln 2] and unary logits [0, 0]
        let ln2 = 2f64.ln();
        let q = Tensor::matrix(&[&[-0.5, 0.5]]);
        let k = Tensor::matrix(&[&[0.0, 2.0 * ln2]]);
        let e = Embeddings::from_parts(
            q,
            k,
            Tensor::zeros(&[1, 2]),
            Some(Tensor::matrix(&[&[0.0, 0.0]])),
        )
        .unwrap();
        let d = attention(Variant::DNL, &e).unwrap();
        // row 0 has pairwise logits (−0.5)(−ln2, ln2) = (ln2/2, −ln2/2); row 1 mirrors it
        let pl = d.pairwise_logits.row(1);
        assert!((pl[0] + ln2 / 2.0).abs() < 1e-15 && (pl[1] - ln2 / 2.0).abs() < 1e-15);
        // shift-invariant equivalent of [0, ln 2] → [1/3, 2/3]; plus uniform 1/2
        let row = d.total.row(1);
        assert!((row[0] - 5.0 / 6.0).abs() < 1e-12, "{row:?}");
        assert!((row[1] - 7.0 / 6.0).abs() < 1e-12, "{row:?}");
    }

    #[test]
    fn zero_output_projection_is_identity() {
        let x = random_map(4, 3, 3, 10);
        for v in Variant::ALL {
            let mut p = random_params(4, v, 11);
            p.wout = Tensor::zeros(&[4, 2]);
            let (y, _) = block_forward(&x, &p, v).unwrap();
            assert_eq!(y, x);
        }
    }

    #[test]
    fn single_pixel_adds_value() {
        let x = random_map(2, 1, 1, 12);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut p = BlockParams::init(2, Variant::NL, &mut rng).unwrap();
        p.wv = Tensor::matrix(&[&[1.0, 0.0]]);
        p.wout = Tensor::matrix(&[&[1.0], &[0.0]]);
        let (y, _) = block_forward(&x, &p, Variant::NL).unwrap();
        let xd = x.tensor().data();
        assert_eq!(y.tensor().data(), &[2.0 * xd[0], xd[1]]);
    }

    #[test]
    fn dnl_constant_map_doubles_value() {
        let x = FeatureMap::from_vec(
            4,
            2,
            2,
            (0..16).map(|i| [0.3, -1.0, 2.0, 0.5][i / 4]).collect(),
        )
        .unwrap();
        let p = random_params(4, Variant::DNL, 13);
        let (y, _) = block_forward(&x, &p, Variant::DNL).unwrap();
        let vbar =
            crate::tensor::matmul(&p.wv, &Tensor::new(vec![4, 1], x.pixel(0)).unwrap()).unwrap();
        let shift = crate::tensor::matmul(&p.wout, &vbar).unwrap();
        for c in 0..4 {
            for i in 0..4 {
                let expect = x.tensor().data()[c * 4 + i] + 2.0 * shift.data()[c];
                assert!((y.tensor().data()[c * 4 + i] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn block_output_matches_block_forward() {
        let x = random_map(4, 3, 2, 14);
        for v in Variant::ALL {
            let p = random_params(4, v, 15);
            assert_eq!(
                block_output(&x, &p, v).unwrap(),
                block_forward(&x, &p, v).unwrap().0
            );
        }
    }
}
