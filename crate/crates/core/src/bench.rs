//! Parameter counts, closed-form and measured FLOPs, and block latency.
//!
//! One multiply-add counts as one FLOP unit throughout.

use std::fmt::Write as _;
use std::time::Instant;

use num_rational::Ratio;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::attention::{self, BlockParams, Variant};
use crate::error::{Error, Result};
use crate::tensor::{flops, FeatureMap, Tensor};

fn check_even(c: u64) -> Result<()> {
    if c == 0 || !c.is_multiple_of(2) {
        return Err(Error::Invalid(format!(
            "channel count must be even and positive, got {c}"
        )));
    }
    Ok(())
}

/// Weights in one block: `2C²`, plus `C` for the unary projection.
pub fn param_count(variant: Variant, c: u64) -> Result<u64> {
    check_even(c)?;
    let base = 2 * c * c;
    Ok(if variant.uses_unary_projection() {
        base + c
    } else {
        base
    })
}

/// Closed-form time complexity. Defined for NL and DNL only.
///
/// NL: `(2C² + (3C/2 + 1)·HW)·HW`; DNL: `((2C+1)C + (3C/2 + 2)·HW)·HW`.
pub fn flop_formula(variant: Variant, c: u64, hw: u64) -> Result<Option<u128>> {
    check_even(c)?;
    let (c, hw) = (c as u128, hw as u128);
    Ok(match variant {
        Variant::NL => Some((2 * c * c + (3 * c / 2 + 1) * hw) * hw),
        Variant::DNL => Some(((2 * c + 1) * c + (3 * c / 2 + 2) * hw) * hw),
        _ => None,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OverheadRow {
    pub c: u64,
    pub hw: u64,
    /// `(DNL − NL) / NL` parameters, exactly `1/(2C)`.
    pub space: Ratio<u128>,
    /// `(DNL − NL) / NL` closed-form FLOPs.
    pub time: Ratio<u128>,
}

pub fn overhead_report(c: u64, hws: &[u64]) -> Result<Vec<OverheadRow>> {
    let space = Ratio::new(
        (param_count(Variant::DNL, c)? - param_count(Variant::NL, c)?) as u128,
        param_count(Variant::NL, c)? as u128,
    );
    hws.iter()
        .map(|&hw| {
            let nl = flop_formula(Variant::NL, c, hw)?.expect("NL formula");
            let dnl = flop_formula(Variant::DNL, c, hw)?.expect("DNL formula");
            Ok(OverheadRow {
                c,
                hw,
                space,
                time: Ratio::new(dnl - nl, nl),
            })
        })
        .collect()
}

/// A ratio as a percentage with four significant digits.
pub fn percent_sig4(r: &Ratio<u128>) -> String {
    let pct = 100.0 * (*r.numer() as f64) / (*r.denom() as f64);
    if pct == 0.0 {
        return "0.000".into();
    }
    let decimals = (3 - pct.abs().log10().floor() as i32).max(0) as usize;
    format!("{pct:.decimals$}")
}

pub const OVERHEAD_HEADER: &str = "C,HW,space_overhead_pct,time_overhead_pct";

/// The largest time overhead the closed forms allow as `HW → ∞`: `1/(3C/2 + 1)`.
pub fn time_overhead_limit(c: u64) -> Ratio<u128> {
    Ratio::new(1, 3 * c as u128 / 2 + 1)
}

pub const QUOTED_TIME_NOTE: &str = "note: the quoted 0.15% time overhead at C=512 is approximate; \
the closed forms give at most 1/(3C/2+1) = 0.1300% as HW grows";

pub fn overhead_csv(rows: &[OverheadRow]) -> String {
    let mut out = format!("{OVERHEAD_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            r.c,
            r.hw,
            percent_sig4(&r.space),
            percent_sig4(&r.time)
        );
    }
    out
}

fn random_block(
    variant: Variant,
    c: usize,
    h: usize,
    w: usize,
    seed: u64,
) -> Result<(FeatureMap, BlockParams)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Tensor::from_fn(&[c, h, w], |_| StandardNormal.sample(&mut rng))?;
    let mut p = BlockParams::init(c, variant, &mut rng)?;
    let mut gaussian = |shape: &[usize], s: f64| {
        Tensor::from_fn(shape, |_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            s * z
        })
    };
    p.wout = gaussian(p.wout.shape(), 0.1)?;
    if let Some(wm) = &mut p.wm {
        *wm = gaussian(wm.shape(), 1.0)?;
    }
    Ok((FeatureMap::new(x)?, p))
}

/// Multiply-adds executed by one block forward pass.
pub fn flop_measure(variant: Variant, c: usize, h: usize, w: usize) -> Result<u64> {
    let (x, p) = random_block(variant, c, h, w, 0)?;
    let (y, n) = flops::count(|| attention::block_output(&x, &p, variant));
    y?;
    Ok(n)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComplexityRow {
    pub variant: Variant,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub params: u64,
    pub flops_formula: Option<u128>,
    pub flops_measured: u64,
    pub latency_median_ns: u64,
    pub latency_p90_ns: u64,
}

/// Nearest-rank percentile of sorted samples.
fn percentile(sorted: &[u64], q: f64) -> u64 {
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

/// Wall-clock statistics for one block forward; the first `warmup` runs are
/// discarded.
pub fn time_block(
    variant: Variant,
    c: usize,
    h: usize,
    w: usize,
    reps: usize,
    warmup: usize,
) -> Result<(u64, u64)> {
    if reps < 5 {
        return Err(Error::Invalid(format!("need at least 5 reps, got {reps}")));
    }
    let (x, p) = random_block(variant, c, h, w, 0)?;
    let mut samples = Vec::with_capacity(reps);
    for i in 0..warmup + reps {
        let t0 = Instant::now();
        std::hint::black_box(attention::block_output(&x, &p, variant)?);
        let dt = t0.elapsed().as_nanos() as u64;
        if i >= warmup {
            samples.push(dt);
        }
    }
    samples.sort_unstable();
    Ok((percentile(&samples, 0.5), percentile(&samples, 0.9)))
}

/// Times every variant at each size. Repetitions are interleaved across
/// variants so bursts of machine load hit them alike.
pub fn latency_bench(
    variants: &[Variant],
    sizes: &[(usize, usize, usize)],
    reps: usize,
    warmup: usize,
) -> Result<Vec<ComplexityRow>> {
    if reps < 5 {
        return Err(Error::Invalid(format!("need at least 5 reps, got {reps}")));
    }
    let mut rows = Vec::new();
    for &(c, h, w) in sizes {
        let blocks = variants
            .iter()
            .map(|&v| random_block(v, c, h, w, 0))
            .collect::<Result<Vec<_>>>()?;
        let mut samples = vec![Vec::with_capacity(reps); variants.len()];
        for i in 0..warmup + reps {
            for ((&v, (x, p)), s) in variants.iter().zip(&blocks).zip(&mut samples) {
                let t0 = Instant::now();
                std::hint::black_box(attention::block_output(x, p, v)?);
                let dt = t0.elapsed().as_nanos() as u64;
                if i >= warmup {
                    s.push(dt);
                }
            }
        }
        for (&v, mut s) in variants.iter().zip(samples) {
            s.sort_unstable();
            rows.push(ComplexityRow {
                variant: v,
                c,
                h,
                w,
                params: param_count(v, c as u64)?,
                flops_formula: flop_formula(v, c as u64, (h * w) as u64)?,
                flops_measured: flop_measure(v, c, h, w)?,
                latency_median_ns: percentile(&s, 0.5),
                latency_p90_ns: percentile(&s, 0.9),
            });
        }
    }
    Ok(rows)
}

/// Median-latency ratio DNL/NL at a size present in `rows`.
pub fn dnl_nl_ratio(rows: &[ComplexityRow], c: usize, h: usize, w: usize) -> Option<f64> {
    let find = |v| {
        rows.iter()
            .find(|r| r.variant == v && (r.c, r.h, r.w) == (c, h, w))
    };
    Some(find(Variant::DNL)?.latency_median_ns as f64 / find(Variant::NL)?.latency_median_ns as f64)
}

pub const COMPLEXITY_HEADER: &str =
    "variant,C,H,W,params,flops_formula,flops_measured,latency_median_ns,latency_p90_ns";

fn formula_cell(f: Option<u128>) -> String {
    f.map_or_else(|| "-".into(), |v| v.to_string())
}

pub fn complexity_csv(rows: &[ComplexityRow]) -> String {
    let mut out = format!("{COMPLEXITY_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.variant,
            r.c,
            r.h,
            r.w,
            r.params,
            formula_cell(r.flops_formula),
            r.flops_measured,
            r.latency_median_ns,
            r.latency_p90_ns
        );
    }
    out
}

/// Column-aligned text rendering of a header plus rows of cells.
pub fn aligned_table(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
    for r in rows {
        for (w, cell) in widths.iter_mut().zip(r) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let line = |cells: Vec<&str>| {
        let mut s = String::new();
        for (i, (cell, w)) in cells.iter().zip(&widths).enumerate() {
            if i > 0 {
                s.push_str("  ");
            }
            let _ = write!(s, "{cell:>w$}");
        }
        s.push('\n');
        s
    };
    let rule: Vec<String> = widths.iter().map(|&w| "-".repeat(w)).collect();
    let mut out = line(header.to_vec());
    out.push_str(&line(rule.iter().map(String::as_str).collect()));
    for r in rows {
        out.push_str(&line(r.iter().map(|s| s.as_str()).collect()));
    }
    out
}

pub fn complexity_table(rows: &[ComplexityRow]) -> String {
    let header = [
        "variant",
        "C",
        "H",
        "W",
        "params",
        "flops_formula",
        "flops_measured",
        "median_ms",
        "p90_ms",
    ];
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.variant.to_string(),
                r.c.to_string(),
                r.h.to_string(),
                r.w.to_string(),
                r.params.to_string(),
                formula_cell(r.flops_formula),
                r.flops_measured.to_string(),
                format!("{:.3}", r.latency_median_ns as f64 / 1e6),
                format!("{:.3}", r.latency_p90_ns as f64 / 1e6),
            ]
        })
        .collect();
    format!(
        "# FLOP unit: one multiply-add\n{}",
        aligned_table(&header, &body)
    )
}

pub fn overhead_table(rows: &[OverheadRow]) -> String {
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.c.to_string(),
                r.hw.to_string(),
                percent_sig4(&r.space),
                percent_sig4(&r.time),
            ]
        })
        .collect();
    format!(
        "{}# {QUOTED_TIME_NOTE}\n",
        aligned_table(&["C", "HW", "space_%", "time_%"], &body)
    )
}
