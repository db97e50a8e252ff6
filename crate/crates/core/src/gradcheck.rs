//! Finite-difference checks of whole blocks and of the toy model.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::attention::{self, BlockParams, Variant};
use crate::autograd::{finite_diff_check, CheckReport, Graph};
use crate::error::{Error, Result};
use crate::scene::SceneConfig;
use crate::tensor::Tensor;
use crate::train::{Arch, ToyModel};

/// What to differentiate: one attention block, or the full toy model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Target {
    Block(Variant),
    Model,
}

impl Target {
    pub fn all() -> Vec<Target> {
        Variant::ALL
            .iter()
            .map(|&v| Target::Block(v))
            .chain([Target::Model])
            .collect()
    }
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Target::Block(v) => v.fmt(f),
            Target::Model => f.write_str("model"),
        }
    }
}

impl FromStr for Target {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "model" | "toy" => Ok(Target::Model),
            _ => s.parse().map(Target::Block),
        }
    }
}

/// Parses `CxHxW`.
pub fn parse_size(s: &str) -> Result<(usize, usize, usize)> {
    let parts: Vec<usize> = s
        .split(['x', 'X'])
        .map(|p| p.trim().parse())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Invalid(format!("size must look like CxHxW, got {s:?}")))?;
    match parts[..] {
        [c, h, w] if c > 0 && h > 0 && w > 0 => Ok((c, h, w)),
        _ => Err(Error::Invalid(format!(
            "size must look like CxHxW, got {s:?}"
        ))),
    }
}

fn gaussian(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Result<Tensor> {
    Tensor::from_fn(shape, |_| {
        let z: f64 = rng.sample(StandardNormal);
        scale * z
    })
}

/// Random block parameters with every tensor nonzero.
fn dense_params(variant: Variant, c: usize, rng: &mut ChaCha8Rng) -> Result<BlockParams> {
    let mut p = BlockParams::init(c, variant, rng)?;
    p.wout = gaussian(rng, p.wout.shape(), 0.5)?;
    if let Some(wm) = &mut p.wm {
        *wm = gaussian(rng, wm.shape(), 0.5)?;
    }
    Ok(p)
}

/// Checks the gradient of `L = Σ y ⊙ R` for one block with respect to its
/// input and every weight.
pub fn check_block(
    variant: Variant,
    c: usize,
    h: usize,
    w: usize,
    seed: u64,
    step: f64,
    tol: f64,
) -> Result<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = dense_params(variant, c, &mut rng)?;
    let x = gaussian(&mut rng, &[c, h * w], 1.0)?;
    let r = gaussian(&mut rng, &[c, h * w], 1.0)?;
    let mut g = Graph::new();
    let xn = g.param("x", x);
    let leaves = p.to_graph(&mut g, "", true);
    let b = attention::block_nodes(&mut g, xn, &leaves, variant, false)?;
    let rn = g.constant(r);
    let weighted = g.mul(b.y, rn)?;
    let loss = g.sum(weighted)?;
    finite_diff_check(&mut g, loss, step, tol)
}

/// Checks the toy model's cross-entropy gradient on one random scene-shaped
/// input: `c` is the hidden width, labels are uniform over the categories.
pub fn check_model(
    c: usize,
    h: usize,
    w: usize,
    seed: u64,
    step: f64,
    tol: f64,
) -> Result<CheckReport> {
    let scene = SceneConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = ToyModel::init(
        Arch::Block(Variant::DNL),
        scene.in_channels(),
        c,
        scene.categories,
        &mut rng,
    )?;
    model.block = Some(dense_params(Variant::DNL, c, &mut rng)?);
    model.stem_b = gaussian(&mut rng, model.stem_b.shape(), 0.5)?;
    model.cls_b = gaussian(&mut rng, model.cls_b.shape(), 0.5)?;
    let x = crate::tensor::FeatureMap::new(gaussian(&mut rng, &[scene.in_channels(), h, w], 1.0)?)?;
    let labels: Vec<usize> = (0..h * w)
        .map(|_| rng.random_range(0..scene.categories))
        .collect();
    let mut g = Graph::new();
    let leaves = model.leaves(&mut g, true);
    let nodes = model.apply(&mut g, &leaves, &x, false)?;
    let loss = g.cross_entropy(nodes.logits, &labels)?;
    finite_diff_check(&mut g, loss, step, tol)
}

pub fn check(
    target: Target,
    size: (usize, usize, usize),
    seed: u64,
    step: f64,
    tol: f64,
) -> Result<CheckReport> {
    let (c, h, w) = size;
    match target {
        Target::Block(v) => check_block(v, c, h, w, seed, step, tol),
        Target::Model => check_model(c, h, w, seed, step, tol),
    }
}
