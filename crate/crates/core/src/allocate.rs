//! Turning sensitivity profiles into per-layer bit widths.
//!
//! [`kmeans_plan`] splits layers into three sensitivity tiers. [`budgeted_plan`]
//! picks the widths that minimize `Σ S_l e_l(b_l)` under a memory budget,
//! where `e_l(b)` is the Frobenius quantization error of layer `l`'s weight
//! matrices at width `b`. [`objective`] scores a plan by the loss of the
//! quantized model plus `λ` times its total weight error.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::compute::dataset_totals;
use crate::model::{Dataset, ParamRole, TransformerModel};
use crate::quant::{encode, frobenius_diff, reconstruct, Precision};
use crate::sensitivity::{Method, SensitivityProfile};
use crate::tensor::{kmeans_1d, Rng};

/// Largest layer count solved by enumerating all `3^L` plans.
pub const EXHAUSTIVE_MAX_LAYERS: usize = 12;
pub const DEFAULT_LAMBDA: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    Kmeans,
    Budgeted { budget_bytes: u64 },
    Uniform { bits: Precision },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrecisionPlan {
    pub bits: Vec<Precision>,
    pub provenance: Provenance,
    /// Analyzer whose profile produced the plan.
    pub method: Option<Method>,
}

impl PrecisionPlan {
    pub fn uniform(n_layers: usize, bits: Precision) -> Self {
        Self {
            bits: vec![bits; n_layers],
            provenance: Provenance::Uniform { bits },
            method: None,
        }
    }

    pub fn bit_widths(&self) -> Vec<u8> {
        self.bits.iter().map(|b| b.bits()).collect()
    }
}

/// Widths assigned to tiers in descending sensitivity order.
const TIERS: [Precision; 3] = [Precision::Fp16, Precision::Int8, Precision::Int4];

/// Rank tertiles: the top `ceil(L/3)` layers by score get 16 bits, the
/// next `ceil((L - n16)/2)` get 8, the rest 4. Equal scores rank the lower
/// layer index first.
fn tertile_bits(scores: &[f64]) -> Vec<Precision> {
    let n = scores.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let n16 = n.div_ceil(3);
    let n8 = (n - n16).div_ceil(2);
    let mut bits = vec![Precision::Int4; n];
    for (rank, &l) in order.iter().enumerate() {
        bits[l] = if rank < n16 {
            Precision::Fp16
        } else if rank < n16 + n8 {
            Precision::Int8
        } else {
            Precision::Int4
        };
    }
    bits
}

/// Three-tier k-means allocation: clusters ordered by centroid, highest
/// first, get 16, 8 and 4 bits. With fewer than three distinct scores the
/// layers are split into rank tertiles instead.
pub fn kmeans_plan(profile: &SensitivityProfile, rng: &mut Rng) -> Result<PrecisionPlan> {
    profile.validate()?;
    let scores = &profile.scores;
    let mut distinct = scores.clone();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    let bits = if distinct.len() < 3 {
        tertile_bits(scores)
    } else {
        let km = kmeans_1d(scores, 3, rng)?;
        let mut order: Vec<usize> = (0..3).collect();
        order.sort_by(|&a, &b| km.centroids[b].total_cmp(&km.centroids[a]));
        let mut tier_of = [Precision::Int4; 3];
        for (rank, &c) in order.iter().enumerate() {
            tier_of[c] = TIERS[rank];
        }
        km.labels.iter().map(|&c| tier_of[c]).collect()
    };
    Ok(PrecisionPlan {
        bits,
        provenance: Provenance::Kmeans,
        method: Some(profile.method),
    })
}

/// Per-layer error and memory at each width, indexed as [`Precision::ALL`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCosts {
    /// `e_l(b)`: Frobenius norm of the reconstruction error over the layer's
    /// weight matrices.
    pub error: Vec<[f64; 3]>,
    /// Stored bytes of the layer (matrices at width `b`, layer-norm vectors
    /// as binary16), as counted by the container accounting.
    pub memory: Vec<[u64; 3]>,
}

fn width_index(p: Precision) -> usize {
    match p {
        Precision::Int4 => 0,
        Precision::Int8 => 1,
        Precision::Fp16 => 2,
    }
}

impl LayerCosts {
    pub fn of(model: &TransformerModel) -> Result<Self> {
        let layout = model.layout();
        let cells: Vec<(usize, Precision)> = (0..model.n_layers())
            .flat_map(|l| Precision::ALL.map(|p| (l, p)))
            .collect();
        let values = cells
            .par_iter()
            .map(|&(l, p)| -> Result<(f64, u64)> {
                let mut sq = 0.0;
                let mut bytes = 0;
                for idx in layout.layer_params(l) {
                    let w = model.tensor(idx);
                    let name = layout.name(idx);
                    match layout.role(idx) {
                        ParamRole::Layer(_, c) if c.is_matrix() => {
                            sq += frobenius_diff(w, &reconstruct(w, p)?)?.powi(2);
                            bytes += encode(name, w, p)?.stored_bytes();
                        }
                        _ => bytes += encode(name, w, Precision::Fp16)?.stored_bytes(),
                    }
                }
                Ok((sq.sqrt(), bytes))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut error = vec![[0.0; 3]; model.n_layers()];
        let mut memory = vec![[0; 3]; model.n_layers()];
        for (&(l, p), (e, m)) in cells.iter().zip(values) {
            error[l][width_index(p)] = e;
            memory[l][width_index(p)] = m;
        }
        Ok(Self { error, memory })
    }

    pub fn n_layers(&self) -> usize {
        self.error.len()
    }

    /// `(Σ S_l e_l(b_l), Σ mem_l(b_l))`, summed in layer order.
    pub fn cost(&self, scores: &[f64], bits: &[Precision]) -> (f64, u64) {
        let mut obj = 0.0;
        let mut mem = 0;
        for (l, &b) in bits.iter().enumerate() {
            obj += scores[l] * self.error[l][width_index(b)];
            mem += self.memory[l][width_index(b)];
        }
        (obj, mem)
    }

    /// Smallest memory any plan can reach.
    pub fn min_memory(&self) -> u64 {
        self.memory.iter().map(|m| *m.iter().min().unwrap()).sum()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Solver {
    /// Enumeration up to [`EXHAUSTIVE_MAX_LAYERS`] layers, dynamic programming beyond.
    #[default]
    Auto,
    Exhaustive,
    DynamicProgramming,
}

/// Candidate ordering: lower objective, then less memory, then higher widths
/// at lower layer indices.
fn better(a: (f64, u64, &[Precision]), b: (f64, u64, &[Precision])) -> bool {
    a.0.total_cmp(&b.0)
        .then(a.1.cmp(&b.1))
        .then_with(|| b.2.cmp(a.2))
        .is_lt()
}

fn exhaustive(costs: &LayerCosts, scores: &[f64], budget: u64) -> Option<Vec<Precision>> {
    let n = costs.n_layers();
    let mut digits = vec![0usize; n];
    let mut best: Option<(f64, u64, Vec<Precision>)> = None;
    loop {
        let bits: Vec<Precision> = digits.iter().map(|&d| Precision::ALL[d]).collect();
        let (obj, mem) = costs.cost(scores, &bits);
        if mem <= budget
            && best
                .as_ref()
                .is_none_or(|(bo, bm, bb)| better((obj, mem, &bits), (*bo, *bm, bb)))
        {
            best = Some((obj, mem, bits));
        }
        let mut i = 0;
        loop {
            if i == n {
                return best.map(|b| b.2);
            }
            digits[i] += 1;
            if digits[i] < 3 {
                break;
            }
            digits[i] = 0;
            i += 1;
        }
    }
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Dynamic programming over layers with memory measured in units of the
/// greatest common divisor of all layer sizes. Each state keeps its best
/// prefix under the same ordering as [`exhaustive`].
fn dynamic(costs: &LayerCosts, scores: &[f64], budget: u64) -> Option<Vec<Precision>> {
    let n = costs.n_layers();
    let unit = costs
        .memory
        .iter()
        .flatten()
        .fold(0, |g, &m| gcd(g, m))
        .max(1);
    let cap = (budget / unit) as usize;
    // state[m] = (objective, bits) of the best prefix using m units.
    let mut states: Vec<Option<(f64, Vec<Precision>)>> = vec![None; cap + 1];
    states[0] = Some((0.0, Vec::new()));
    for l in 0..n {
        let mut next: Vec<Option<(f64, Vec<Precision>)>> = vec![None; cap + 1];
        for (m, state) in states.iter().enumerate() {
            let Some((obj, bits)) = state else { continue };
            for p in Precision::ALL {
                let w = width_index(p);
                let nm = m + (costs.memory[l][w] / unit) as usize;
                if nm > cap {
                    continue;
                }
                let nobj = obj + scores[l] * costs.error[l][w];
                let replace = match &next[nm] {
                    None => true,
                    Some((o, b)) => {
                        let mut nb = bits.clone();
                        nb.push(p);
                        better((nobj, 0, &nb), (*o, 0, b))
                    }
                };
                if replace {
                    let mut nb = bits.clone();
                    nb.push(p);
                    next[nm] = Some((nobj, nb));
                }
            }
        }
        states = next;
    }
    let mut best: Option<(f64, u64, Vec<Precision>)> = None;
    for (m, s) in states.into_iter().enumerate() {
        if let Some((obj, bits)) = s {
            let mem = m as u64 * unit;
            if best
                .as_ref()
                .is_none_or(|(bo, bm, bb)| better((obj, mem, &bits), (*bo, *bm, bb)))
            {
                best = Some((obj, mem, bits));
            }
        }
    }
    best.map(|b| b.2)
}

/// Memory-constrained allocation minimizing `Σ S_l e_l(b_l)` exactly.
///
/// `budget_bytes` bounds the summed bytes of the transformer layers (see
/// [`LayerCosts`]); embeddings and the head are outside the budget.
pub fn budgeted_plan(
    profile: &SensitivityProfile,
    model: &TransformerModel,
    budget_bytes: u64,
    solver: Solver,
) -> Result<PrecisionPlan> {
    let costs = LayerCosts::of(model)?;
    budgeted_plan_with(profile, &costs, budget_bytes, solver)
}

/// [`budgeted_plan`] with precomputed layer costs.
pub fn budgeted_plan_with(
    profile: &SensitivityProfile,
    costs: &LayerCosts,
    budget_bytes: u64,
    solver: Solver,
) -> Result<PrecisionPlan> {
    profile.validate()?;
    if profile.n_layers() != costs.n_layers() {
        return Err(Error::dim(format!(
            "profile has {} layers, model has {}",
            profile.n_layers(),
            costs.n_layers()
        )));
    }
    let minimal = costs.min_memory();
    if budget_bytes < minimal {
        return Err(Error::Infeasible {
            budget: budget_bytes,
            minimal,
        });
    }
    let n = costs.n_layers();
    let use_exhaustive = match solver {
        Solver::Auto => n <= EXHAUSTIVE_MAX_LAYERS,
        Solver::Exhaustive if n > EXHAUSTIVE_MAX_LAYERS => {
            return Err(Error::domain(format!(
                "exhaustive search is limited to {EXHAUSTIVE_MAX_LAYERS} layers"
            )))
        }
        Solver::Exhaustive => true,
        Solver::DynamicProgramming => false,
    };
    let bits = if use_exhaustive {
        exhaustive(costs, &profile.scores, budget_bytes)
    } else {
        dynamic(costs, &profile.scores, budget_bytes)
    }
    .ok_or(Error::Infeasible {
        budget: budget_bytes,
        minimal,
    })?;
    Ok(PrecisionPlan {
        bits,
        provenance: Provenance::Budgeted { budget_bytes },
        method: Some(profile.method),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    pub lambda: f64,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            lambda: DEFAULT_LAMBDA,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveValue {
    /// Mean per-example loss of the quantized model.
    pub a: f64,
    /// Summed per-layer weight reconstruction error.
    pub b: f64,
    pub total: f64,
}

/// `A + λ B` for a plan: `A` is the mean loss of the simulated quantized
/// model on `data`, `B = Σ_l e_l(b_l)`.
pub fn objective(
    model: &TransformerModel,
    plan: &PrecisionPlan,
    cfg: &ObjectiveConfig,
    data: &Dataset,
) -> Result<ObjectiveValue> {
    if !(cfg.lambda >= 0.0 && cfg.lambda.is_finite()) {
        return Err(Error::domain(format!(
            "lambda {} must be finite and >= 0",
            cfg.lambda
        )));
    }
    let (_, simulated) = crate::quant::apply_plan(model, plan)?;
    let (loss, _, count) = dataset_totals(simulated.config(), &simulated.params_f64(), data)?;
    if count == 0 {
        return Err(Error::domain("objective on an empty dataset"));
    }
    let a = loss / count as f64;
    let costs = LayerCosts::of(model)?;
    let b = plan
        .bits
        .iter()
        .enumerate()
        .map(|(l, &p)| costs.error[l][width_index(p)])
        .sum::<f64>();
    Ok(ObjectiveValue {
        a,
        b,
        total: a + cfg.lambda * b,
    })
}
