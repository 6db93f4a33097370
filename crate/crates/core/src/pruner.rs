//! Local magnitude pruning under a cubic density schedule.
//!
//! Every pruning event recomputes each mask from the current underlying
//! weights, keeping the top `round(v * r * c)` magnitudes of that matrix.
//! Because masks are rebuilt from scratch, an entry removed earlier re-enters
//! as soon as its magnitude ranks inside the budget again.

use std::fmt;
use std::str::FromStr;

use crate::error::{shape_err, Result, SpurError};
use crate::graph::{ExprGraph, NodeId};
use crate::matrix::Matrix;
use crate::models::{ParamTable, Role};

/// Cubic decay of the surviving-weight fraction.
///
/// `v_initial` and `v_final` are densities (fraction of weights kept).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PruningSchedule {
    pub v_initial: f64,
    pub v_final: f64,
    pub t_i: usize,
    pub ramp_steps: usize,
    pub cadence: usize,
    pub total_steps: usize,
}

impl PruningSchedule {
    pub fn validate(&self) -> Result<()> {
        let in_range = |v: f64| v > 0.0 && v <= 1.0;
        if !in_range(self.v_initial) || !in_range(self.v_final) {
            return Err(SpurError::Config(format!(
                "densities must lie in (0, 1], got {} -> {}",
                self.v_initial, self.v_final
            )));
        }
        if self.v_final > self.v_initial {
            return Err(SpurError::Config(format!(
                "v_final {} exceeds v_initial {}",
                self.v_final, self.v_initial
            )));
        }
        if self.ramp_steps == 0 || self.cadence == 0 {
            return Err(SpurError::Config(
                "ramp_steps and cadence must be positive".into(),
            ));
        }
        // A zero-step run only records its initial evaluation.
        if self.total_steps > 0 && self.t_i + self.ramp_steps > self.total_steps {
            return Err(SpurError::Config(format!(
                "ramp ends at step {} but the run has only {} steps",
                self.t_i + self.ramp_steps,
                self.total_steps
            )));
        }
        Ok(())
    }

    /// Whether a pruning event fires at step `t`.
    pub fn is_event(&self, t: usize) -> bool {
        t % self.cadence == 0 || t == self.total_steps
    }
}

/// Scheduled density at step `t`.
pub fn density_at(t: usize, s: &PruningSchedule) -> f64 {
    if t <= s.t_i {
        return s.v_initial;
    }
    if t >= s.t_i + s.ramp_steps {
        return s.v_final;
    }
    let rest = 1.0 - (t - s.t_i) as f64 / s.ramp_steps as f64;
    s.v_final + (s.v_initial - s.v_final) * rest * rest * rest
}

/// Binary survival mask; `true` marks a surviving weight.
#[derive(Clone, PartialEq, Eq)]
pub struct Mask {
    rows: usize,
    cols: usize,
    bits: Vec<bool>,
}

impl fmt::Debug for Mask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Mask {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows {
            if r > 0 {
                write!(f, "; ")?;
            }
            for c in 0..self.cols {
                write!(f, "{}", u8::from(self.get(r, c)))?;
            }
        }
        write!(f, "]")
    }
}

impl Mask {
    pub fn ones(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            bits: vec![true; rows * cols],
        }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            bits: vec![false; rows * cols],
        }
    }

    pub fn from_bits(rows: usize, cols: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != rows * cols {
            return Err(SpurError::Input(format!(
                "{rows}x{cols} mask needs {} bits, got {}",
                rows * cols,
                bits.len()
            )));
        }
        Ok(Self { rows, cols, bits })
    }

    pub fn from_rows<R: AsRef<[u8]>>(rows: &[R]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |x| x.as_ref().len());
        let bits = rows
            .iter()
            .flat_map(|row| {
                assert_eq!(row.as_ref().len(), c, "ragged rows");
                row.as_ref().iter().map(|&b| b != 0).collect::<Vec<_>>()
            })
            .collect();
        Self { rows: r, cols: c, bits }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.bits[r * self.cols + c]
    }

    pub fn popcount(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn density(&self) -> f64 {
        self.popcount() as f64 / self.bits.len() as f64
    }

    /// The mask as a 0/1 matrix.
    pub fn to_matrix(&self) -> Matrix {
        Matrix::from_fn(self.rows, self.cols, |r, c| {
            if self.get(r, c) {
                1.0
            } else {
                0.0
            }
        })
    }

    /// `w` with removed entries zeroed.
    pub fn apply(&self, w: &Matrix) -> Matrix {
        let mut out = w.clone();
        for (v, &keep) in out.data_mut().iter_mut().zip(&self.bits) {
            if !keep {
                *v = 0.0;
            }
        }
        out
    }
}

/// Number of survivors for density `v` over `n` entries, rounding half up.
pub fn survivor_count(v: f64, n: usize) -> usize {
    ((v * n as f64).round() as usize).min(n)
}

/// Keeps the `round(v * r * c)` largest magnitudes; equal magnitudes favour
/// the smaller row-major index.
pub fn compute_mask(w: &Matrix, v: f64) -> Mask {
    let n = w.len();
    let k = survivor_count(v.clamp(0.0, 1.0), n);
    let mut mask = Mask::zeros(w.rows(), w.cols());
    if k == n {
        return Mask::ones(w.rows(), w.cols());
    }
    if k == 0 {
        return mask;
    }
    let mags: Vec<f64> = w.data().iter().map(|x| x.abs()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    let rank = |a: &usize, b: &usize| mags[*b].total_cmp(&mags[*a]).then(a.cmp(b));
    order.select_nth_unstable_by(k - 1, rank);
    for &i in &order[..k] {
        mask.bits[i] = true;
    }
    mask
}

/// Which matrices carry the regularizer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TargetDomain {
    /// Every prunable matrix of every layer.
    All,
    QPlusK,
    QOnly,
    KOnly,
}

impl TargetDomain {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::All => "all",
            Self::QPlusK => "q+k",
            Self::QOnly => "q",
            Self::KOnly => "k",
        }
    }

    fn roles(self) -> &'static [Role] {
        match self {
            Self::All => &[
                Role::Q,
                Role::K,
                Role::V,
                Role::O,
                Role::Ff1,
                Role::Ff2,
                Role::Dense,
            ],
            Self::QPlusK => &[Role::Q, Role::K],
            Self::QOnly => &[Role::Q],
            Self::KOnly => &[Role::K],
        }
    }
}

impl fmt::Display for TargetDomain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TargetDomain {
    type Err = SpurError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "all" | "bert" => Ok(Self::All),
            "q+k" | "qk" | "q_plus_k" => Ok(Self::QPlusK),
            "q" | "q_only" => Ok(Self::QOnly),
            "k" | "k_only" => Ok(Self::KOnly),
            other => Err(SpurError::Config(format!("unknown target domain `{other}`"))),
        }
    }
}

/// Names of the matrices in `domain`, ordered by layer and then role.
pub fn select_targets(model: &ParamTable, domain: TargetDomain) -> Result<Vec<String>> {
    let roles = domain.roles();
    let mut picked: Vec<(usize, usize, &str)> = model
        .params()
        .iter()
        .filter_map(|p| {
            let layer = p.layer?;
            let pos = roles.iter().position(|r| *r == p.role)?;
            Some((layer, pos, p.name.as_str()))
        })
        .collect();
    if picked.is_empty() {
        return Err(SpurError::Config(format!(
            "model has no matrices for target domain `{domain}`"
        )));
    }
    picked.sort();
    Ok(picked.into_iter().map(|(_, _, n)| n.to_string()).collect())
}

/// Read access to weights by name.
pub trait WeightLookup {
    fn weight(&self, name: &str) -> Option<&Matrix>;
}

impl WeightLookup for ParamTable {
    fn weight(&self, name: &str) -> Option<&Matrix> {
        self.get(name)
    }
}

impl WeightLookup for std::collections::HashMap<String, Matrix> {
    fn weight(&self, name: &str) -> Option<&Matrix> {
        self.get(name)
    }
}

impl WeightLookup for std::collections::BTreeMap<String, Matrix> {
    fn weight(&self, name: &str) -> Option<&Matrix> {
        self.get(name)
    }
}

/// Masks for every pruned matrix, in target order.
#[derive(Clone, Debug, PartialEq)]
pub struct PruningState {
    masks: Vec<(String, Mask)>,
    pub current_density: f64,
    pub last_event_step: usize,
}

impl PruningState {
    /// All-ones masks for the named matrices.
    pub fn dense<'a>(targets: impl IntoIterator<Item = (&'a str, (usize, usize))>) -> Self {
        Self {
            masks: targets
                .into_iter()
                .map(|(n, (r, c))| (n.to_string(), Mask::ones(r, c)))
                .collect(),
            current_density: 1.0,
            last_event_step: 0,
        }
    }

    /// Builds a state from explicit masks.
    pub fn from_masks(masks: Vec<(String, Mask)>, current_density: f64, last_event_step: usize) -> Self {
        Self {
            masks,
            current_density,
            last_event_step,
        }
    }

    /// A state with no masks; every weight is used as is.
    pub fn empty() -> Self {
        Self::from_masks(Vec::new(), 1.0, 0)
    }

    pub fn get(&self, name: &str) -> Option<&Mask> {
        self.masks.iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }

    pub fn masks(&self) -> &[(String, Mask)] {
        &self.masks
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.masks.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    /// Surviving fraction over all masked entries.
    pub fn overall_density(&self) -> f64 {
        let (kept, total) = self
            .masks
            .iter()
            .fold((0, 0), |(k, t), (_, m)| (k + m.popcount(), t + m.bits.len()));
        if total == 0 {
            1.0
        } else {
            kept as f64 / total as f64
        }
    }
}

/// Recomputes every mask from the current weights at the scheduled density for `t`.
pub fn pruning_event(
    state: &PruningState,
    weights: &impl WeightLookup,
    t: usize,
    schedule: &PruningSchedule,
) -> Result<PruningState> {
    let v = density_at(t, schedule);
    let mut masks = Vec::with_capacity(state.masks.len());
    for (name, old) in &state.masks {
        let w = weights.weight(name).ok_or_else(|| {
            SpurError::Integrity(format!("no weight named `{name}` for its mask"))
        })?;
        if w.shape() != old.shape() {
            return Err(SpurError::Integrity(format!(
                "weight `{name}` is {}x{} but its mask is {}x{}",
                w.rows(),
                w.cols(),
                old.rows,
                old.cols
            )));
        }
        masks.push((name.clone(), compute_mask(w, v)));
    }
    Ok(PruningState {
        masks,
        current_density: v,
        last_event_step: t,
    })
}

/// Multiplies `w` by the constant mask; removed entries get zero gradient.
pub fn apply_mask(g: &mut ExprGraph, w: NodeId, m: &Mask) -> Result<NodeId> {
    if g.shape(w) != m.shape() {
        return Err(shape_err("apply_mask", g.shape(w), m.shape()));
    }
    let c = g.leaf(m.to_matrix());
    g.mul(w, c)
}
