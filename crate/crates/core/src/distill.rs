//! Per-timestep distillation objectives.
//!
//! Six training methods are supported, each assembled from four loss
//! terms over the student's per-timestep logits:
//!
//! - `cls`: mean per-timestep cross-entropy against the label.
//! - `kd`: mean per-timestep KL from the (constant) teacher distribution.
//! - `ela`: error-aware logit alignment; at erroneous timesteps the
//!   truth/false logit pair is min-equalized on both sides before the
//!   teacher-student KL, so distillation stops forcing a preference inside
//!   the confused pair while leaving the remaining classes supervised.
//! - `sta`/`uta`: temporal self-alignment; each timestep learns from the
//!   other timesteps through a weighted (or uniform) KL, with weights built
//!   from source confidence and target-source similarity.
//!
//! Method composition: `ce-only` = cls; `timestep-kd` = cls + λ·kd;
//! `ela` = cls + α·ela; `sta` = cls + λ·kd + β·sta; `uta` = cls + λ·kd +
//! β·uta; `seal` = cls + α·ela + β·sta. With one timestep the temporal
//! term is an empty sum and contributes exactly zero.
//!
//! Gradient discipline: the teacher distribution, modified teacher-side
//! targets, temporal-alignment source distributions, and all alignment
//! weights are constants; gradients reach only the student logits.
//! ELA on a batch with no erroneous timestep evaluates the same expression
//! tree as `kd`, making the two losses bit-identical there.

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::network::TemporalLogits;
use crate::tape::{NodeId, Tape};
use crate::tensor::{argmax, cosine_similarity, log_softmax, Tensor};

/// Time-invariant teacher logits for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherLogits {
    values: Tensor,
}

impl TeacherLogits {
    /// Wraps a rank-1 logit vector of at least 2 finite entries.
    pub fn new(values: Tensor) -> Result<Self> {
        if values.rank() != 1 || values.numel() < 2 {
            return Err(Error::invalid(format!(
                "teacher logits need shape (C >= 2,), got {:?}",
                values.shape()
            )));
        }
        values.ensure_finite("teacher logits")?;
        Ok(TeacherLogits { values })
    }

    pub fn from_vec(values: Vec<f64>) -> Result<Self> {
        TeacherLogits::new(Tensor::vector(values))
    }

    pub fn classes(&self) -> usize {
        self.values.numel()
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }
}

/// Training objective selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
pub enum Method {
    #[serde(rename = "ce-only")]
    CeOnly,
    #[serde(rename = "timestep-kd")]
    TimestepKd,
    #[serde(rename = "ela")]
    Ela,
    #[serde(rename = "sta")]
    Sta,
    #[serde(rename = "uta")]
    Uta,
    #[serde(rename = "seal")]
    Seal,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::CeOnly => "ce-only",
            Method::TimestepKd => "timestep-kd",
            Method::Ela => "ela",
            Method::Sta => "sta",
            Method::Uta => "uta",
            Method::Seal => "seal",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "ce-only" => Ok(Method::CeOnly),
            "timestep-kd" => Ok(Method::TimestepKd),
            "ela" => Ok(Method::Ela),
            "sta" => Ok(Method::Sta),
            "uta" => Ok(Method::Uta),
            "seal" => Ok(Method::Seal),
            other => Err(Error::invalid(format!(
                "unknown method {other:?}; expected one of ce-only, timestep-kd, ela, sta, uta, seal"
            ))),
        }
    }
}

/// Which side of the alignment the error-aware modification touches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
pub enum ElaVariant {
    /// Student-error driven; both sides min-equalized at {truth, false}.
    #[serde(rename = "ours")]
    Ours,
    /// Student-error driven; student side only.
    #[serde(rename = "S")]
    StudentOnly,
    /// Student-error driven; teacher side only.
    #[serde(rename = "A")]
    TeacherOnly,
    /// Teacher-error driven: when the teacher's own argmax is wrong, its
    /// truth/false pair is equalized and the student aligns to it.
    #[serde(rename = "AS")]
    TeacherAware,
    /// Like `Ours`, but when the teacher also errs the equalized set grows
    /// to the three classes {truth, student false, teacher false}.
    #[serde(rename = "Both")]
    Both,
}

impl ElaVariant {
    pub fn as_str(self) -> &'static str {
        match self {
            ElaVariant::Ours => "ours",
            ElaVariant::StudentOnly => "S",
            ElaVariant::TeacherOnly => "A",
            ElaVariant::TeacherAware => "AS",
            ElaVariant::Both => "Both",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "ours" => Ok(ElaVariant::Ours),
            "S" => Ok(ElaVariant::StudentOnly),
            "A" => Ok(ElaVariant::TeacherOnly),
            "AS" => Ok(ElaVariant::TeacherAware),
            "Both" => Ok(ElaVariant::Both),
            other => Err(Error::invalid(format!(
                "unknown ela_variant {other:?}; expected one of ours, S, A, AS, Both"
            ))),
        }
    }
}

/// How temporal source scores are built before the row softmax.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
pub enum StaVariant {
    /// Score = source confidence times target-source cosine similarity.
    #[serde(rename = "ours")]
    Ours,
    /// Similarity alone.
    #[serde(rename = "no-conf")]
    NoConf,
    /// Confidence alone.
    #[serde(rename = "no-sim")]
    NoSim,
    /// Cosine distance (1 - similarity) in place of similarity.
    #[serde(rename = "dist")]
    Dist,
}

impl StaVariant {
    pub fn as_str(self) -> &'static str {
        match self {
            StaVariant::Ours => "ours",
            StaVariant::NoConf => "no-conf",
            StaVariant::NoSim => "no-sim",
            StaVariant::Dist => "dist",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "ours" => Ok(StaVariant::Ours),
            "no-conf" => Ok(StaVariant::NoConf),
            "no-sim" => Ok(StaVariant::NoSim),
            "dist" => Ok(StaVariant::Dist),
            other => Err(Error::invalid(format!(
                "unknown sta_variant {other:?}; expected one of ours, no-conf, no-sim, dist"
            ))),
        }
    }
}

fn default_temperature() -> f64 {
    4.0
}
fn default_unit() -> f64 {
    1.0
}
fn default_alpha() -> f64 {
    0.6
}
fn default_beta() -> f64 {
    0.15
}
fn default_method() -> Method {
    Method::Seal
}
fn default_ela_variant() -> ElaVariant {
    ElaVariant::Ours
}
fn default_sta_variant() -> StaVariant {
    StaVariant::Ours
}

/// Objective configuration. JSON keys match the field names; unknown keys
/// are rejected.
#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillConfig {
    /// Softmax temperature for the teacher-student terms (kd, ela).
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    /// Softmax temperature for the classification term.
    #[serde(default = "default_unit")]
    pub cls_temperature: f64,
    /// Softmax temperature for the temporal terms (sta, uta).
    #[serde(default = "default_unit")]
    pub sta_temperature: f64,
    /// Weight of the kd term.
    #[serde(default = "default_unit")]
    pub lambda_kd: f64,
    /// Weight of the ela term.
    #[serde(default = "default_alpha")]
    pub alpha_ela: f64,
    /// Weight of the sta/uta term.
    #[serde(default = "default_beta")]
    pub beta_sta: f64,
    #[serde(default = "default_method")]
    pub method: Method,
    #[serde(default = "default_ela_variant")]
    pub ela_variant: ElaVariant,
    #[serde(default = "default_sta_variant")]
    pub sta_variant: StaVariant,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            temperature: default_temperature(),
            cls_temperature: default_unit(),
            sta_temperature: default_unit(),
            lambda_kd: default_unit(),
            alpha_ela: default_alpha(),
            beta_sta: default_beta(),
            method: default_method(),
            ela_variant: default_ela_variant(),
            sta_variant: default_sta_variant(),
        }
    }
}

impl DistillConfig {
    /// Validates temperature positivity and weight nonnegativity.
    pub fn validate(&self) -> Result<()> {
        for (name, tau) in [
            ("temperature", self.temperature),
            ("cls_temperature", self.cls_temperature),
            ("sta_temperature", self.sta_temperature),
        ] {
            if !(tau.is_finite() && tau > 0.0) {
                return Err(Error::invalid(format!("{name} {tau} must be finite and > 0")));
            }
        }
        for (name, w) in [
            ("lambda_kd", self.lambda_kd),
            ("alpha_ela", self.alpha_ela),
            ("beta_sta", self.beta_sta),
        ] {
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::invalid(format!("{name} {w} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

/// Per-timestep error flags for one sample: `Some(c_false)` where the
/// student's argmax differs from the label, `None` where it is correct.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ErrorMask {
    pub entries: Vec<Option<usize>>,
}

impl ErrorMask {
    pub fn erroneous(&self, t: usize) -> bool {
        self.entries[t].is_some()
    }
}

/// Computes the error mask of one sample: flags timesteps whose argmax
/// misses `label` and records the offending class.
pub fn error_mask(student: &TemporalLogits, label: usize) -> Result<ErrorMask> {
    check_label(label, student.classes())?;
    let entries = (0..student.timesteps())
        .map(|t| {
            let pred = argmax(student.row(t));
            if pred != label {
                Some(pred)
            } else {
                None
            }
        })
        .collect();
    Ok(ErrorMask { entries })
}

fn check_label(label: usize, classes: usize) -> Result<()> {
    if label >= classes {
        return Err(Error::invalid(format!(
            "label {label} out of range for {classes} classes"
        )));
    }
    Ok(())
}

fn check_teacher(student: &TemporalLogits, teacher: &TeacherLogits) -> Result<()> {
    if teacher.classes() != student.classes() {
        return Err(Error::ShapeMismatch {
            op: "distill",
            lhs: vec![student.classes()],
            rhs: vec![teacher.classes()],
        });
    }
    Ok(())
}

// ── error-aware modification plan ───────────────────────────────────────

/// Index sets to min-equalize on each side at one timestep. `None` means
/// that side passes through unmodified. Indices are sorted and distinct.
#[derive(Debug, Clone, PartialEq, Eq)]
struct ElaPlan {
    student_set: Option<Vec<usize>>,
    teacher_set: Option<Vec<usize>>,
    mask_entry: Option<usize>,
}

/// Decides which logits to equalize at one timestep. This is the single
/// source of the variant semantics; the value path and the tape path both
/// consume the returned plan.
fn ela_plan(student_t: &[f64], teacher: &[f64], label: usize, variant: ElaVariant) -> ElaPlan {
    let pred = argmax(student_t);
    let student_errs = pred != label;
    let mask_entry = if student_errs { Some(pred) } else { None };
    let pair = |c_false: usize| {
        let mut set = vec![label, c_false];
        set.sort_unstable();
        set
    };

    let (student_set, teacher_set) = match variant {
        ElaVariant::Ours if student_errs => (Some(pair(pred)), Some(pair(pred))),
        ElaVariant::StudentOnly if student_errs => (Some(pair(pred)), None),
        ElaVariant::TeacherOnly if student_errs => (None, Some(pair(pred))),
        ElaVariant::TeacherAware => {
            let teacher_pred = argmax(teacher);
            if teacher_pred != label {
                (None, Some(pair(teacher_pred)))
            } else {
                (None, None)
            }
        }
        ElaVariant::Both if student_errs => {
            let teacher_pred = argmax(teacher);
            if teacher_pred != label {
                let mut set = vec![label, pred, teacher_pred];
                set.sort_unstable();
                set.dedup();
                (Some(set.clone()), Some(set))
            } else {
                (Some(pair(pred)), Some(pair(pred)))
            }
        }
        _ => (None, None),
    };
    ElaPlan {
        student_set,
        teacher_set,
        mask_entry,
    }
}

fn apply_plan_values(values: &[f64], set: &Option<Vec<usize>>) -> Vec<f64> {
    let mut out = values.to_vec();
    if let Some(set) = set {
        let m = set.iter().map(|&i| values[i]).fold(f64::INFINITY, f64::min);
        for &i in set {
            out[i] = m;
        }
    }
    out
}

/// Error-aware modification of one timestep's logit pair (value path).
///
/// Returns the modified student logits, the modified teacher logits, and
/// the error-mask entry (`Some(c_false)` iff the student's argmax misses
/// the label). Unaffected coordinates are copied bit-identically.
pub fn ela_modify(
    student_t: &Tensor,
    teacher: &Tensor,
    label: usize,
    variant: ElaVariant,
) -> Result<(Tensor, Tensor, Option<usize>)> {
    if student_t.rank() != 1 || teacher.rank() != 1 || student_t.numel() != teacher.numel() {
        return Err(Error::ShapeMismatch {
            op: "ela_modify",
            lhs: student_t.shape().to_vec(),
            rhs: teacher.shape().to_vec(),
        });
    }
    check_label(label, student_t.numel())?;
    let plan = ela_plan(student_t.data(), teacher.data(), label, variant);
    Ok((
        Tensor::vector(apply_plan_values(student_t.data(), &plan.student_set)),
        Tensor::vector(apply_plan_values(teacher.data(), &plan.teacher_set)),
        plan.mask_entry,
    ))
}

// ── temporal weights (value-level constants) ────────────────────────────

/// Entropy-based confidence of one timestep: `1 - H/ln C` where `H` is the
/// entropy of `softmax(logits / tau)`. Uniform logits give 0; a saturated
/// one-hot distribution approaches 1.
pub fn sta_confidence(logits_t: &[f64], tau: f64) -> Result<f64> {
    if logits_t.len() < 2 {
        return Err(Error::invalid("confidence needs at least 2 classes"));
    }
    if !(tau > 0.0) {
        return Err(Error::invalid(format!("softmax temperature {tau} must be > 0")));
    }
    let ls = log_softmax(logits_t, tau);
    let mut entropy = 0.0;
    for &l in &ls {
        // p * ln p with p = exp(l); exp underflow gives 0 * finite = 0.
        entropy -= l.exp() * l;
    }
    Ok(1.0 - entropy / (logits_t.len() as f64).ln())
}

/// Cosine similarity between two timesteps' logit vectors, with the
/// documented zero fallback when either norm is below `1e-12`.
pub fn sta_similarity(logits_a: &[f64], logits_b: &[f64]) -> Result<f64> {
    if logits_a.len() != logits_b.len() {
        return Err(Error::ShapeMismatch {
            op: "sta_similarity",
            lhs: vec![logits_a.len()],
            rhs: vec![logits_b.len()],
        });
    }
    Ok(cosine_similarity(logits_a, logits_b))
}

/// Row-stochastic temporal alignment weights, shape `T x T` with zero
/// diagonal: `w[t][t']` is the softmax over sources `t' != t` of the
/// variant's score. All inputs are treated as constants; no gradient flows
/// through the weights.
pub fn sta_weights(logits: &TemporalLogits, tau: f64, variant: StaVariant) -> Result<Vec<Vec<f64>>> {
    let t_len = logits.timesteps();
    if t_len < 2 {
        return Err(Error::invalid("temporal weights need at least 2 timesteps"));
    }
    let conf: Vec<f64> = (0..t_len)
        .map(|t| sta_confidence(logits.row(t), tau))
        .collect::<Result<_>>()?;
    let mut weights = vec![vec![0.0; t_len]; t_len];
    for t in 0..t_len {
        let mut scores = Vec::with_capacity(t_len - 1);
        for src in 0..t_len {
            if src == t {
                continue;
            }
            let sim = sta_similarity(logits.row(t), logits.row(src))?;
            let s = match variant {
                StaVariant::Ours => conf[src] * sim,
                StaVariant::NoConf => sim,
                StaVariant::NoSim => conf[src],
                StaVariant::Dist => conf[src] * (1.0 - sim),
            };
            scores.push((src, s));
        }
        let m = scores.iter().map(|&(_, s)| s).fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for &(_, s) in &scores {
            denom += (s - m).exp();
        }
        for &(src, s) in &scores {
            weights[t][src] = (s - m).exp() / denom;
        }
    }
    Ok(weights)
}

// ── tape builders ───────────────────────────────────────────────────────

fn check_student_nodes(tape: &Tape, student: &[NodeId]) -> Result<usize> {
    if student.is_empty() {
        return Err(Error::invalid("objective needs at least one timestep"));
    }
    let c = tape.value(student[0]).numel();
    for &id in student {
        let v = tape.value(id);
        if v.rank() != 1 || v.numel() != c {
            return Err(Error::ShapeMismatch {
                op: "objective",
                lhs: vec![c],
                rhs: v.shape().to_vec(),
            });
        }
    }
    if c < 2 {
        return Err(Error::invalid("objective needs at least 2 classes"));
    }
    Ok(c)
}

/// Mean of scalar nodes in argument order. Shared by every loss so equal
/// term sequences reduce bit-identically.
fn mean_of_scalars(tape: &mut Tape, terms: &[NodeId]) -> Result<NodeId> {
    let total = tape.add_n(terms)?;
    tape.scale(total, 1.0 / terms.len() as f64)
}

/// One KL term `KL(p(src) || p(tgt))` at temperature `tau`, as
/// `dot(softmax(src), log_softmax(src) - log_softmax(tgt))`. The caller is
/// responsible for gradient-stopping `src` when it must act as a constant.
fn kl_term_on(tape: &mut Tape, src: NodeId, tgt: NodeId, tau: f64) -> Result<NodeId> {
    let p_src = tape.softmax_t(src, tau)?;
    let ls_src = tape.log_softmax_t(src, tau)?;
    let ls_tgt = tape.log_softmax_t(tgt, tau)?;
    let neg_tgt = tape.scale(ls_tgt, -1.0)?;
    let diff = tape.add(ls_src, neg_tgt)?;
    tape.dot(p_src, diff)
}

/// Mean per-timestep cross-entropy at temperature `tau`.
pub fn build_cls_loss(tape: &mut Tape, student: &[NodeId], label: usize, tau: f64) -> Result<NodeId> {
    let c = check_student_nodes(tape, student)?;
    check_label(label, c)?;
    let mut terms = Vec::with_capacity(student.len());
    for &z_t in student {
        let lsm = tape.log_softmax_t(z_t, tau)?;
        let picked = tape.select(lsm, vec![label])?;
        let s = tape.sum_all(picked)?;
        terms.push(tape.scale(s, -1.0)?);
    }
    mean_of_scalars(tape, &terms)
}

/// Mean per-timestep KL from the constant teacher distribution. `teacher`
/// must already be gradient-stopped.
fn build_kd_from_node(tape: &mut Tape, student: &[NodeId], teacher: NodeId, tau: f64) -> Result<NodeId> {
    let mut terms = Vec::with_capacity(student.len());
    for &z_t in student {
        terms.push(kl_term_on(tape, teacher, z_t, tau)?);
    }
    mean_of_scalars(tape, &terms)
}

/// Error-aware alignment loss. `teacher` must already be gradient-stopped;
/// modified teacher targets stay constant by construction. At timesteps
/// the variant leaves untouched this evaluates exactly the kd expression.
fn build_ela_from_node(
    tape: &mut Tape,
    student: &[NodeId],
    teacher: NodeId,
    label: usize,
    tau: f64,
    variant: ElaVariant,
) -> Result<NodeId> {
    let mut terms = Vec::with_capacity(student.len());
    for &z_t in student {
        let plan = ela_plan(
            tape.value(z_t).data(),
            tape.value(teacher).data(),
            label,
            variant,
        );
        let zs = apply_plan_on_tape(tape, z_t, &plan.student_set)?;
        let zt = apply_plan_on_tape(tape, teacher, &plan.teacher_set)?;
        terms.push(kl_term_on(tape, zt, zs, tau)?);
    }
    mean_of_scalars(tape, &terms)
}

/// Min-equalizes `set` on a tape node: chained scalar minima over the
/// selected entries, broadcast back by scatter. Pass-through when `set` is
/// `None`, returning the input node unchanged.
fn apply_plan_on_tape(tape: &mut Tape, logits: NodeId, set: &Option<Vec<usize>>) -> Result<NodeId> {
    let Some(set) = set else {
        return Ok(logits);
    };
    let mut m = tape.select(logits, vec![set[0]])?;
    for &i in &set[1..] {
        let next = tape.select(logits, vec![i])?;
        m = tape.min_scalar(m, next)?;
    }
    let values = tape.repeat(m, set.len())?;
    tape.scatter_replace(logits, set.clone(), values)
}

/// Temporal alignment loss over pairs `(t, t' != t)`: weighted KL of each
/// target toward gradient-stopped sources, divided by `T`. `uniform`
/// replaces the computed weights with `1/(T-1)`. When `pinned` is given,
/// the weights and the source distributions are taken from those logits
/// as detached constants instead of the live student nodes; with `pinned`
/// equal to the current student values this changes nothing, value or
/// gradient, but it lets a finite-difference probe move the student while
/// the constants stay put.
fn build_temporal_loss(
    tape: &mut Tape,
    student: &[NodeId],
    tau: f64,
    variant: StaVariant,
    uniform: bool,
    pinned: Option<&TemporalLogits>,
) -> Result<NodeId> {
    let t_len = student.len();
    if t_len < 2 {
        return Err(Error::invalid("temporal alignment needs at least 2 timesteps"));
    }
    let c = check_student_nodes(tape, student)?;
    if let Some(p) = pinned {
        if p.timesteps() != t_len || p.classes() != c {
            return Err(Error::ShapeMismatch {
                op: "temporal pinned logits",
                lhs: vec![t_len, c],
                rhs: vec![p.timesteps(), p.classes()],
            });
        }
    }
    let weights = if uniform {
        let w = 1.0 / (t_len - 1) as f64;
        let mut rows = vec![vec![w; t_len]; t_len];
        for (t, row) in rows.iter_mut().enumerate() {
            row[t] = 0.0;
        }
        rows
    } else {
        match pinned {
            Some(p) => sta_weights(p, tau, variant)?,
            None => {
                let rows: Vec<Tensor> =
                    student.iter().map(|&id| tape.value(id).clone()).collect();
                sta_weights(&TemporalLogits::from_rows(&rows)?, tau, variant)?
            }
        }
    };

    let sources: Vec<NodeId> = match pinned {
        Some(p) => (0..t_len)
            .map(|t| Ok(tape.leaf(Tensor::vector(p.row(t).to_vec()))))
            .collect::<Result<_>>()?,
        None => student
            .iter()
            .map(|&id| tape.stop_grad(id))
            .collect::<Result<_>>()?,
    };
    let mut terms = Vec::with_capacity(t_len * (t_len - 1));
    for t in 0..t_len {
        for src in 0..t_len {
            if src == t {
                continue;
            }
            let kl = kl_term_on(tape, sources[src], student[t], tau)?;
            terms.push(tape.scale(kl, weights[t][src])?);
        }
    }
    let sum = tape.add_n(&terms)?;
    tape.scale(sum, 1.0 / t_len as f64)
}

/// Scalar loss nodes of one sample's objective, for training and for
/// per-term diagnostics. Optional terms are present per the method table
/// in the module docs and only when their weight is nonzero; `distill` is
/// the weighted sum of the non-cls terms.
#[derive(Debug, Clone)]
pub struct ObjectiveNodes {
    pub total: NodeId,
    pub cls: NodeId,
    pub kd: Option<NodeId>,
    pub ela: Option<NodeId>,
    pub sta: Option<NodeId>,
    pub distill: Option<NodeId>,
    /// The raw teacher leaf, exposed so callers can assert it receives no
    /// gradient. Absent for `ce-only`.
    pub teacher_leaf: Option<NodeId>,
}

/// Builds the configured method objective over per-timestep student logit
/// nodes. The teacher enters the tape as a gradient-stopped constant.
/// With a single timestep the temporal term is an empty sum and is
/// omitted (contributes zero).
pub fn build_objective(
    tape: &mut Tape,
    student: &[NodeId],
    teacher: Option<&TeacherLogits>,
    label: usize,
    config: &DistillConfig,
) -> Result<ObjectiveNodes> {
    build_objective_inner(tape, student, teacher, label, config, None)
}

/// Like [`build_objective`], but the temporal-alignment constants (source
/// distributions and alignment weights) are pinned to `pinned` instead of
/// tracking the live student nodes. With `pinned` equal to the current
/// student values the result is value- and gradient-identical to
/// [`build_objective`]; a finite-difference probe over the student inputs
/// then differentiates exactly the function the analytic gradient claims.
pub fn build_objective_pinned(
    tape: &mut Tape,
    student: &[NodeId],
    pinned: &TemporalLogits,
    teacher: Option<&TeacherLogits>,
    label: usize,
    config: &DistillConfig,
) -> Result<ObjectiveNodes> {
    build_objective_inner(tape, student, teacher, label, config, Some(pinned))
}

fn build_objective_inner(
    tape: &mut Tape,
    student: &[NodeId],
    teacher: Option<&TeacherLogits>,
    label: usize,
    config: &DistillConfig,
    pinned: Option<&TemporalLogits>,
) -> Result<ObjectiveNodes> {
    config.validate()?;
    let c = check_student_nodes(tape, student)?;
    check_label(label, c)?;

    let needs_teacher = config.method != Method::CeOnly;
    let teacher_nodes = match (needs_teacher, teacher) {
        (false, _) => None,
        (true, None) => {
            return Err(Error::invalid(format!(
                "method {} requires teacher logits",
                config.method.as_str()
            )))
        }
        (true, Some(tl)) => {
            if tl.classes() != c {
                return Err(Error::ShapeMismatch {
                    op: "objective",
                    lhs: vec![c],
                    rhs: vec![tl.classes()],
                });
            }
            let leaf = tape.leaf(tl.values().clone());
            let stopped = tape.stop_grad(leaf)?;
            Some((leaf, stopped))
        }
    };

    let cls = build_cls_loss(tape, student, label, config.cls_temperature)?;
    let mut kd = None;
    let mut ela = None;
    let mut sta = None;

    // Zero-weighted terms are not built at all: the weighted objective is
    // unchanged, and a run with all distillation weights zero follows the
    // exact same tape (hence trajectory) as `ce-only`.
    match config.method {
        Method::CeOnly => {}
        Method::TimestepKd | Method::Sta | Method::Uta => {
            let (_, tnode) = teacher_nodes.unwrap();
            if config.lambda_kd != 0.0 {
                kd = Some(build_kd_from_node(tape, student, tnode, config.temperature)?);
            }
            if config.method != Method::TimestepKd && student.len() >= 2 && config.beta_sta != 0.0
            {
                let uniform = config.method == Method::Uta;
                sta = Some(build_temporal_loss(
                    tape,
                    student,
                    config.sta_temperature,
                    config.sta_variant,
                    uniform,
                    pinned,
                )?);
            }
        }
        Method::Ela | Method::Seal => {
            let (_, tnode) = teacher_nodes.unwrap();
            if config.alpha_ela != 0.0 {
                ela = Some(build_ela_from_node(
                    tape,
                    student,
                    tnode,
                    label,
                    config.temperature,
                    config.ela_variant,
                )?);
            }
            if config.method == Method::Seal && student.len() >= 2 && config.beta_sta != 0.0 {
                sta = Some(build_temporal_loss(
                    tape,
                    student,
                    config.sta_temperature,
                    config.sta_variant,
                    false,
                    pinned,
                )?);
            }
        }
    }

    let mut weighted = Vec::new();
    if let Some(kd) = kd {
        weighted.push(tape.scale(kd, config.lambda_kd)?);
    }
    if let Some(ela) = ela {
        weighted.push(tape.scale(ela, config.alpha_ela)?);
    }
    if let Some(sta) = sta {
        weighted.push(tape.scale(sta, config.beta_sta)?);
    }
    let distill = match weighted.len() {
        0 => None,
        1 => Some(weighted[0]),
        _ => Some(tape.add_n(&weighted)?),
    };
    let total = match distill {
        None => cls,
        Some(d) => tape.add(cls, d)?,
    };

    Ok(ObjectiveNodes {
        total,
        cls,
        kd,
        ela,
        sta,
        distill,
        teacher_leaf: teacher_nodes.map(|(leaf, _)| leaf),
    })
}

// ── value-level entry points ────────────────────────────────────────────

fn leaves_for(tape: &mut Tape, student: &TemporalLogits) -> Vec<NodeId> {
    (0..student.timesteps())
        .map(|t| tape.leaf(Tensor::vector(student.row(t).to_vec())))
        .collect()
}

/// Mean per-timestep cross-entropy (value path).
pub fn cls_loss(student: &TemporalLogits, label: usize, tau: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let nodes = leaves_for(&mut tape, student);
    let out = build_cls_loss(&mut tape, &nodes, label, tau)?;
    Ok(tape.value(out).scalar_value())
}

/// Mean per-timestep KL from the teacher distribution (value path).
pub fn kd_loss(student: &TemporalLogits, teacher: &TeacherLogits, tau: f64) -> Result<f64> {
    check_teacher(student, teacher)?;
    let mut tape = Tape::new();
    let nodes = leaves_for(&mut tape, student);
    let leaf = tape.leaf(teacher.values().clone());
    let stopped = tape.stop_grad(leaf)?;
    let out = build_kd_from_node(&mut tape, &nodes, stopped, tau)?;
    Ok(tape.value(out).scalar_value())
}

/// Error-aware alignment loss (value path).
pub fn ela_loss(
    student: &TemporalLogits,
    teacher: &TeacherLogits,
    label: usize,
    tau: f64,
    variant: ElaVariant,
) -> Result<f64> {
    check_teacher(student, teacher)?;
    check_label(label, student.classes())?;
    let mut tape = Tape::new();
    let nodes = leaves_for(&mut tape, student);
    let leaf = tape.leaf(teacher.values().clone());
    let stopped = tape.stop_grad(leaf)?;
    let out = build_ela_from_node(&mut tape, &nodes, stopped, label, tau, variant)?;
    Ok(tape.value(out).scalar_value())
}

/// Weighted temporal alignment loss (value path).
pub fn sta_loss(student: &TemporalLogits, tau: f64, variant: StaVariant) -> Result<f64> {
    let mut tape = Tape::new();
    let nodes = leaves_for(&mut tape, student);
    let out = build_temporal_loss(&mut tape, &nodes, tau, variant, false, None)?;
    Ok(tape.value(out).scalar_value())
}

/// Uniform temporal alignment loss (value path).
pub fn uta_loss(student: &TemporalLogits, tau: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let nodes = leaves_for(&mut tape, student);
    let out = build_temporal_loss(&mut tape, &nodes, tau, StaVariant::Ours, true, None)?;
    Ok(tape.value(out).scalar_value())
}

/// Loss values of one objective evaluation. Absent terms are zero. The
/// total equals `cls + lambda_kd * kd + alpha_ela * ela + beta_sta * sta`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub cls: f64,
    pub kd: f64,
    pub ela: f64,
    pub sta: f64,
}

/// Evaluates the configured method objective (value path).
pub fn method_objective(
    student: &TemporalLogits,
    teacher: Option<&TeacherLogits>,
    label: usize,
    config: &DistillConfig,
) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let nodes = leaves_for(&mut tape, student);
    let obj = build_objective(&mut tape, &nodes, teacher, label, config)?;
    let term = |id: Option<NodeId>| id.map_or(0.0, |id| tape.value(id).scalar_value());
    Ok(LossBreakdown {
        total: tape.value(obj.total).scalar_value(),
        cls: tape.value(obj.cls).scalar_value(),
        kd: term(obj.kd),
        ela: term(obj.ela),
        sta: term(obj.sta),
    })
}

/// The combined selective objective `cls + alpha * ela + beta * sta`,
/// regardless of `config.method`.
pub fn seal_objective(
    student: &TemporalLogits,
    teacher: &TeacherLogits,
    label: usize,
    config: &DistillConfig,
) -> Result<LossBreakdown> {
    let mut forced = *config;
    forced.method = Method::Seal;
    method_objective(student, Some(teacher), label, &forced)
}

/// The plain distillation baseline `cls + lambda * kd`, regardless of
/// `config.method`.
pub fn baseline_objective(
    student: &TemporalLogits,
    teacher: &TeacherLogits,
    label: usize,
    config: &DistillConfig,
) -> Result<f64> {
    let mut forced = *config;
    forced.method = Method::TimestepKd;
    Ok(method_objective(student, Some(teacher), label, &forced)?.total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::softmax;

    fn logits(rows: &[&[f64]]) -> TemporalLogits {
        let tensors: Vec<Tensor> = rows.iter().map(|r| Tensor::vector(r.to_vec())).collect();
        TemporalLogits::from_rows(&tensors).unwrap()
    }

    fn teacher(values: &[f64]) -> TeacherLogits {
        TeacherLogits::from_vec(values.to_vec()).unwrap()
    }

    // Direct-summation KL at temperature tau, independent of the tape.
    fn kl_direct(src: &[f64], tgt: &[f64], tau: f64) -> f64 {
        let p = softmax(src, tau);
        let q = softmax(tgt, tau);
        p.iter().zip(&q).map(|(pi, qi)| pi * (pi / qi).ln()).sum()
    }

    #[test]
    fn cls_loss_matches_hand_values() {
        // Uniform logits, C = 4: loss = ln 4 per timestep.
        let l = logits(&[&[0.3, 0.3, 0.3, 0.3]]);
        let v = cls_loss(&l, 1, 1.0).unwrap();
        assert!((v - 4.0f64.ln()).abs() < 1e-12);

        // Saturated correct logit: loss near zero.
        let l = logits(&[&[30.0, 0.0, 0.0]]);
        assert!(cls_loss(&l, 0, 1.0).unwrap() < 1e-9);

        // T = 2 equals the mean of the single-timestep losses.
        let a = [0.5, -0.2, 1.0];
        let b = [-1.0, 0.3, 0.2];
        let both = cls_loss(&logits(&[&a, &b]), 2, 1.5).unwrap();
        let ea = cls_loss(&logits(&[&a]), 2, 1.5).unwrap();
        let eb = cls_loss(&logits(&[&b]), 2, 1.5).unwrap();
        assert!((both - (ea + eb) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn cls_loss_rejects_bad_label() {
        let l = logits(&[&[0.0, 0.0]]);
        assert!(cls_loss(&l, 2, 1.0).is_err());
    }

    #[test]
    fn kd_loss_zero_on_match_and_matches_direct_sum() {
        let t = teacher(&[1.0, -0.5, 0.2]);
        let same = logits(&[&[1.0, -0.5, 0.2], &[1.0, -0.5, 0.2]]);
        assert_eq!(kd_loss(&same, &t, 4.0).unwrap(), 0.0);

        let s = logits(&[&[0.3, 0.9, -1.0], &[2.0, 0.1, 0.4]]);
        let got = kd_loss(&s, &t, 2.5).unwrap();
        let want = (kl_direct(&[1.0, -0.5, 0.2], &[0.3, 0.9, -1.0], 2.5)
            + kl_direct(&[1.0, -0.5, 0.2], &[2.0, 0.1, 0.4], 2.5))
            / 2.0;
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        assert!(got >= 0.0);
    }

    #[test]
    fn ela_modify_hand_example() {
        // Student [2,5,1], teacher [6,3,1], truth 0: prediction is class 1,
        // so the {0,1} pair drops to its per-side minimum.
        let (s, t, mask) = ela_modify(
            &Tensor::vector(vec![2.0, 5.0, 1.0]),
            &Tensor::vector(vec![6.0, 3.0, 1.0]),
            0,
            ElaVariant::Ours,
        )
        .unwrap();
        assert_eq!(s.data(), &[2.0, 2.0, 1.0]);
        assert_eq!(t.data(), &[3.0, 3.0, 1.0]);
        assert_eq!(mask, Some(1));
    }

    #[test]
    fn ela_modify_correct_prediction_passes_through() {
        let (s, t, mask) = ela_modify(
            &Tensor::vector(vec![5.0, 2.0, 1.0]),
            &Tensor::vector(vec![6.0, 3.0, 1.0]),
            0,
            ElaVariant::Ours,
        )
        .unwrap();
        assert_eq!(s.data(), &[5.0, 2.0, 1.0]);
        assert_eq!(t.data(), &[6.0, 3.0, 1.0]);
        assert_eq!(mask, None);
    }

    #[test]
    fn ela_modify_is_idempotent_when_pair_stays_on_top() {
        // After equalizing {0, 1} the remaining classes sit below the pair
        // minimum, so the re-derived error pair is unchanged and the second
        // application is the identity.
        let student = Tensor::vector(vec![2.0, 5.0, 1.0, 0.0]);
        let teach = Tensor::vector(vec![6.0, 3.0, 1.0, 2.0]);
        for variant in [
            ElaVariant::Ours,
            ElaVariant::StudentOnly,
            ElaVariant::TeacherOnly,
            ElaVariant::TeacherAware,
            ElaVariant::Both,
        ] {
            let (s1, t1, _) = ela_modify(&student, &teach, 0, variant).unwrap();
            let (s2, t2, _) = ela_modify(&s1, &t1, 0, variant).unwrap();
            assert_eq!(s1.data(), s2.data(), "{variant:?}");
            assert_eq!(t1.data(), t2.data(), "{variant:?}");
        }
    }

    #[test]
    fn ela_modify_reapplication_can_follow_a_new_runner_up() {
        // Documented behavior: equalizing the pair can expose a third class
        // as the new argmax, so a second application targets a fresh pair.
        // The error pair is always re-derived from the current logits.
        let student = Tensor::vector(vec![0.0, 5.0, 3.0]);
        let teach = Tensor::vector(vec![4.0, 1.0, 2.0]);
        let (s1, _, mask1) = ela_modify(&student, &teach, 0, ElaVariant::Ours).unwrap();
        assert_eq!(s1.data(), &[0.0, 0.0, 3.0]);
        assert_eq!(mask1, Some(1));
        let (s2, _, mask2) = ela_modify(&s1, &teach, 0, ElaVariant::Ours).unwrap();
        assert_eq!(mask2, Some(2));
        assert_eq!(s2.data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn ela_variant_sides() {
        let student = Tensor::vector(vec![2.0, 5.0, 1.0]);
        let teach = Tensor::vector(vec![6.0, 3.0, 1.0]);
        // S touches the student only.
        let (s, t, _) = ela_modify(&student, &teach, 0, ElaVariant::StudentOnly).unwrap();
        assert_eq!(s.data(), &[2.0, 2.0, 1.0]);
        assert_eq!(t.data(), &[6.0, 3.0, 1.0]);
        // A touches the teacher only, pair still from the student error.
        let (s, t, _) = ela_modify(&student, &teach, 0, ElaVariant::TeacherOnly).unwrap();
        assert_eq!(s.data(), &[2.0, 5.0, 1.0]);
        assert_eq!(t.data(), &[3.0, 3.0, 1.0]);
    }

    #[test]
    fn ela_teacher_aware_uses_teacher_error() {
        // Teacher errs (argmax 1, truth 0): pair {0,1} equalized on the
        // teacher, student untouched, regardless of the student state.
        let student = Tensor::vector(vec![5.0, 1.0, 0.0]);
        let teach = Tensor::vector(vec![3.0, 6.0, 1.0]);
        let (s, t, mask) = ela_modify(&student, &teach, 0, ElaVariant::TeacherAware).unwrap();
        assert_eq!(s.data(), &[5.0, 1.0, 0.0]);
        assert_eq!(t.data(), &[3.0, 3.0, 1.0]);
        // Mask still reports the student state (correct here).
        assert_eq!(mask, None);

        // Teacher correct: nothing happens even when the student errs.
        let student = Tensor::vector(vec![1.0, 5.0, 0.0]);
        let teach = Tensor::vector(vec![6.0, 3.0, 1.0]);
        let (s, t, mask) = ela_modify(&student, &teach, 0, ElaVariant::TeacherAware).unwrap();
        assert_eq!(s.data(), student.data());
        assert_eq!(t.data(), teach.data());
        assert_eq!(mask, Some(1));
    }

    #[test]
    fn ela_both_extends_to_three_classes() {
        // Student predicts 1, teacher predicts 2, truth 0: all three
        // classes equalize to each side's own minimum.
        let student = Tensor::vector(vec![2.0, 5.0, 1.0, -1.0]);
        let teach = Tensor::vector(vec![3.0, 1.0, 6.0, 0.0]);
        let (s, t, _) = ela_modify(&student, &teach, 0, ElaVariant::Both).unwrap();
        assert_eq!(s.data(), &[1.0, 1.0, 1.0, -1.0]);
        assert_eq!(t.data(), &[1.0, 1.0, 1.0, 0.0]);

        // Teacher correct: falls back to the two-class rule.
        let teach = Tensor::vector(vec![6.0, 3.0, 1.0, 0.0]);
        let (s, t, _) = ela_modify(&student, &teach, 0, ElaVariant::Both).unwrap();
        assert_eq!(s.data(), &[2.0, 2.0, 1.0, -1.0]);
        assert_eq!(t.data(), &[3.0, 3.0, 1.0, 0.0]);
    }

    #[test]
    fn ela_loss_equals_kd_loss_exactly_when_all_correct() {
        let t = teacher(&[4.0, 1.0, 0.0]);
        let s = logits(&[&[3.0, 0.5, -1.0], &[2.5, 1.0, 0.9]]);
        let kd = kd_loss(&s, &t, 4.0).unwrap();
        let ela = ela_loss(&s, &t, 0, 4.0, ElaVariant::Ours).unwrap();
        assert_eq!(kd.to_bits(), ela.to_bits());
    }

    #[test]
    fn ela_loss_matches_direct_sum_on_erroneous_case() {
        let t = teacher(&[6.0, 3.0, 1.0]);
        let s = logits(&[&[2.0, 5.0, 1.0]]);
        let got = ela_loss(&s, &t, 0, 2.0, ElaVariant::Ours).unwrap();
        let want = kl_direct(&[3.0, 3.0, 1.0], &[2.0, 2.0, 1.0], 2.0);
        assert!((got - want).abs() < 1e-12);
        assert!(got >= 0.0);
    }

    #[test]
    fn sta_confidence_examples() {
        // Uniform distribution: zero confidence.
        assert!(sta_confidence(&[0.7, 0.7, 0.7], 1.0).unwrap().abs() < 1e-12);
        // Saturated: confidence approaches 1.
        let c = sta_confidence(&[40.0, 0.0, 0.0], 1.0).unwrap();
        assert!((c - 1.0).abs() < 1e-6);
        // Two-class [0.9, 0.1] distribution.
        let z = [0.9f64.ln(), 0.1f64.ln()];
        let c = sta_confidence(&z, 1.0).unwrap();
        let h = -(0.9 * 0.9f64.ln() + 0.1 * 0.1f64.ln());
        assert!((c - (1.0 - h / 2.0f64.ln())).abs() < 1e-12);
        assert!((c - 0.53100).abs() < 1e-5);
    }

    #[test]
    fn sta_similarity_examples() {
        assert!((sta_similarity(&[1.0, 2.0], &[1.0, 2.0]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(sta_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let s = sta_similarity(&[1.0, 0.0], &[1.0, 1.0]).unwrap();
        assert!((s - 1.0 / 2.0f64.sqrt()).abs() < 1e-12);
        assert_eq!(sta_similarity(&[0.0, 0.0], &[1.0, 1.0]).unwrap(), 0.0);
    }

    #[test]
    fn sta_weights_laws() {
        let l = logits(&[&[1.0, 0.2, -0.3], &[0.5, 0.6, 0.1], &[2.0, -1.0, 0.0]]);
        for variant in [StaVariant::Ours, StaVariant::NoConf, StaVariant::NoSim, StaVariant::Dist] {
            let w = sta_weights(&l, 1.0, variant).unwrap();
            for (t, row) in w.iter().enumerate() {
                assert_eq!(row[t], 0.0);
                let sum: f64 = row.iter().sum();
                assert!((sum - 1.0).abs() < 1e-12, "{variant:?} row {t} sums {sum}");
            }
        }
        // T = 2: single source per row gets weight 1.
        let l2 = logits(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let w = sta_weights(&l2, 1.0, StaVariant::Ours).unwrap();
        assert_eq!(w[0][1], 1.0);
        assert_eq!(w[1][0], 1.0);
        // Identical rows: symmetric 0.5 weights at T = 3.
        let l3 = logits(&[&[1.0, 0.0], &[1.0, 0.0], &[1.0, 0.0]]);
        let w = sta_weights(&l3, 1.0, StaVariant::Ours).unwrap();
        for t in 0..3 {
            for src in 0..3 {
                if t != src {
                    assert!((w[t][src] - 0.5).abs() < 1e-15);
                }
            }
        }
        // T = 1 rejected.
        assert!(sta_weights(&logits(&[&[1.0, 0.0]]), 1.0, StaVariant::Ours).is_err());
    }

    #[test]
    fn sta_loss_zero_on_identical_timesteps_and_matches_expansion() {
        let same = logits(&[&[1.0, 0.4, -0.2], &[1.0, 0.4, -0.2]]);
        assert_eq!(sta_loss(&same, 1.0, StaVariant::Ours).unwrap(), 0.0);

        let a = [0.8, -0.1, 0.3];
        let b = [0.2, 0.9, -0.5];
        let two = logits(&[&a, &b]);
        let got = sta_loss(&two, 1.0, StaVariant::Ours).unwrap();
        // T = 2: both weights are 1, so the loss is the mean of the two
        // cross-timestep KLs.
        let want = (kl_direct(&b, &a, 1.0) + kl_direct(&a, &b, 1.0)) / 2.0;
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn uta_loss_matches_hand_expansion_t3() {
        let rows: [&[f64]; 3] = [&[0.8, -0.1, 0.3], &[0.2, 0.9, -0.5], &[1.4, 0.0, 0.2]];
        let l = logits(&rows);
        let got = uta_loss(&l, 2.0).unwrap();
        let mut want = 0.0;
        for t in 0..3 {
            for src in 0..3 {
                if src != t {
                    want += 0.5 * kl_direct(rows[src], rows[t], 2.0);
                }
            }
        }
        want /= 3.0;
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn uta_equals_sta_when_weights_are_uniform() {
        // Identical timestep logits make every STA row uniform.
        let l = logits(&[&[1.0, 0.2, 0.0], &[1.0, 0.2, 0.0], &[1.0, 0.2, 0.0]]);
        let a = sta_loss(&l, 1.0, StaVariant::Ours).unwrap();
        let b = uta_loss(&l, 1.0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn method_objective_composition() {
        let t = teacher(&[2.0, 0.5, -1.0]);
        let s = logits(&[&[0.3, 0.9, -1.0], &[2.0, 0.1, 0.4]]);
        let mut config = DistillConfig {
            temperature: 3.0,
            lambda_kd: 0.7,
            alpha_ela: 0.6,
            beta_sta: 0.15,
            ..DistillConfig::default()
        };

        config.method = Method::CeOnly;
        let ce = method_objective(&s, None, 1, &config).unwrap();
        assert_eq!(ce.total, ce.cls);

        config.method = Method::TimestepKd;
        let kd_b = method_objective(&s, Some(&t), 1, &config).unwrap();
        let kd_direct = kd_loss(&s, &t, 3.0).unwrap();
        assert!((kd_b.total - (kd_b.cls + 0.7 * kd_direct)).abs() < 1e-12);

        config.method = Method::Seal;
        let seal = method_objective(&s, Some(&t), 1, &config).unwrap();
        let recomposed = seal.cls + 0.6 * seal.ela + 0.15 * seal.sta;
        assert!((seal.total - recomposed).abs() < 1e-12);
        assert_eq!(seal.kd, 0.0);

        config.method = Method::Sta;
        let sta_b = method_objective(&s, Some(&t), 1, &config).unwrap();
        let recomposed = sta_b.cls + 0.7 * sta_b.kd + 0.15 * sta_b.sta;
        assert!((sta_b.total - recomposed).abs() < 1e-12);
    }

    #[test]
    fn baseline_linearity_in_lambda() {
        let t = teacher(&[2.0, 0.5, -1.0]);
        let s = logits(&[&[0.3, 0.9, -1.0]]);
        let mut config = DistillConfig::default();
        let mut values = Vec::new();
        for lambda in [0.5, 1.0, 2.0] {
            config.lambda_kd = lambda;
            values.push(baseline_objective(&s, &t, 1, &config).unwrap());
        }
        // Three points on a line: the middle equals the interpolation.
        let interp = values[0] + (values[2] - values[0]) * (1.0 - 0.5) / (2.0 - 0.5);
        assert!((values[1] - interp).abs() < 1e-12);

        config.lambda_kd = 0.0;
        let v0 = baseline_objective(&s, &t, 1, &config).unwrap();
        assert!((v0 - cls_loss(&s, 1, config.cls_temperature).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn seal_with_zero_weights_is_cls() {
        let t = teacher(&[2.0, 0.5, -1.0]);
        let s = logits(&[&[0.3, 0.9, -1.0], &[0.1, 0.0, 0.2]]);
        let config = DistillConfig {
            alpha_ela: 0.0,
            beta_sta: 0.0,
            ..DistillConfig::default()
        };
        let b = seal_objective(&s, &t, 1, &config).unwrap();
        assert_eq!(b.total, b.cls);
    }

    #[test]
    fn single_timestep_skips_temporal_term() {
        let t = teacher(&[2.0, 0.5, -1.0]);
        let s = logits(&[&[0.3, 0.9, -1.0]]);
        let config = DistillConfig::default();
        let b = seal_objective(&s, &t, 1, &config).unwrap();
        assert_eq!(b.sta, 0.0);
        assert!((b.total - (b.cls + config.alpha_ela * b.ela)).abs() < 1e-15);
        // The standalone op still rejects T < 2.
        assert!(sta_loss(&s, 1.0, StaVariant::Ours).is_err());
        assert!(uta_loss(&s, 1.0).is_err());
    }

    #[test]
    fn teacher_and_sources_receive_no_gradient() {
        let t = teacher(&[2.0, 0.5, -1.0]);
        let rows: [&[f64]; 3] = [&[2.0, 0.9, -1.0], &[0.1, 0.8, 0.2], &[1.0, 0.0, 0.5]];
        let s = logits(&rows);
        let config = DistillConfig::default();

        let mut tape = Tape::new();
        let nodes: Vec<NodeId> = (0..3)
            .map(|i| tape.leaf(Tensor::vector(rows[i].to_vec())))
            .collect();
        let obj = build_objective(&mut tape, &nodes, Some(&t), 0, &config).unwrap();
        let grads = tape.backward(obj.total).unwrap();
        assert!(grads.is_zero(obj.teacher_leaf.unwrap()));

        // Pinning the temporal constants (detached source copies, weights
        // from the same values) must not change any value or student-logit
        // gradient: the live builder's stop-grads already make the
        // temporal sources and weights constants.
        let mut tape2 = Tape::new();
        let nodes2: Vec<NodeId> = (0..3)
            .map(|i| tape2.leaf(Tensor::vector(rows[i].to_vec())))
            .collect();
        let obj2 = build_objective_pinned(&mut tape2, &nodes2, &s, Some(&t), 0, &config).unwrap();
        assert_eq!(
            tape.value(obj.total).scalar_value().to_bits(),
            tape2.value(obj2.total).scalar_value().to_bits()
        );
        let grads2 = tape2.backward(obj2.total).unwrap();
        for i in 0..3 {
            let a = grads.wrt_dense(nodes[i], 3);
            let b = grads2.wrt_dense(nodes2[i], 3);
            for (x, y) in a.iter().zip(&b) {
                assert_eq!(x.to_bits(), y.to_bits(), "timestep {i}");
            }
        }
    }

    #[test]
    fn losses_match_finite_differences_wrt_student_logits() {
        use crate::gradcheck::grad_check;
        let t_values = vec![2.0, 0.5, -1.0];
        let flat = Tensor::vector(vec![0.7, -0.4, 0.9, 0.2, 1.1, -0.8]);
        let base = logits(&[&[0.7, -0.4, 0.9], &[0.2, 1.1, -0.8]]);
        // Split a flat (T*C) tensor into per-timestep rows on the tape.
        let split = |tape: &mut Tape, leaf: NodeId| -> Result<Vec<NodeId>> {
            Ok(vec![
                tape.select(leaf, vec![0, 1, 2])?,
                tape.select(leaf, vec![3, 4, 5])?,
            ])
        };
        for method in [
            Method::CeOnly,
            Method::TimestepKd,
            Method::Ela,
            Method::Sta,
            Method::Uta,
            Method::Seal,
        ] {
            let config = DistillConfig {
                method,
                ..DistillConfig::default()
            };
            let teach = TeacherLogits::from_vec(t_values.clone()).unwrap();
            // Pin the temporal constants at the base point so the probe
            // differentiates the same function the tape claims to.
            let err = grad_check(
                |tape, leaf| {
                    let nodes = split(tape, leaf)?;
                    let obj = build_objective_pinned(tape, &nodes, &base, Some(&teach), 0, &config)?;
                    Ok(obj.total)
                },
                &flat,
                1e-6,
            )
            .unwrap();
            assert!(err < 1e-5, "{method:?}: relative error {err}");
        }
    }

    #[test]
    fn enum_parsing_round_trips() {
        for m in [
            Method::CeOnly,
            Method::TimestepKd,
            Method::Ela,
            Method::Sta,
            Method::Uta,
            Method::Seal,
        ] {
            assert_eq!(Method::parse(m.as_str()).unwrap(), m);
        }
        for v in [
            ElaVariant::Ours,
            ElaVariant::StudentOnly,
            ElaVariant::TeacherOnly,
            ElaVariant::TeacherAware,
            ElaVariant::Both,
        ] {
            assert_eq!(ElaVariant::parse(v.as_str()).unwrap(), v);
        }
        for v in [StaVariant::Ours, StaVariant::NoConf, StaVariant::NoSim, StaVariant::Dist] {
            assert_eq!(StaVariant::parse(v.as_str()).unwrap(), v);
        }
        assert!(Method::parse("bogus").is_err());
    }

    #[test]
    fn config_validation() {
        let mut c = DistillConfig::default();
        assert!(c.validate().is_ok());
        c.temperature = 0.0;
        assert!(c.validate().is_err());
        c = DistillConfig::default();
        c.lambda_kd = -0.1;
        assert!(c.validate().is_err());
    }
}

#[cfg(test)]
mod prop_tests {
    use super::*;
    use proptest::prelude::*;

    fn logit_rows(t: usize, c: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
        prop::collection::vec(prop::collection::vec(-3.0..3.0f64, c), t)
    }

    fn to_temporal(rows: &[Vec<f64>]) -> TemporalLogits {
        let tensors: Vec<Tensor> = rows.iter().map(|r| Tensor::vector(r.clone())).collect();
        TemporalLogits::from_rows(&tensors).unwrap()
    }

    proptest! {
        #[test]
        fn losses_are_nonnegative_and_finite(
            rows in (2usize..5, 2usize..6).prop_flat_map(|(t, c)| logit_rows(t, c)),
            teacher_row in prop::collection::vec(-3.0..3.0f64, 2..6),
            tau in 0.5..6.0f64,
            label_pick in 0usize..100,
        ) {
            let student = to_temporal(&rows);
            let c = student.classes();
            let label = label_pick % c;
            let mut tv = teacher_row;
            tv.resize(c, 0.4);
            let teacher = TeacherLogits::from_vec(tv).unwrap();

            let checks = [
                cls_loss(&student, label, tau).unwrap(),
                kd_loss(&student, &teacher, tau).unwrap(),
                ela_loss(&student, &teacher, label, tau, ElaVariant::Ours).unwrap(),
                sta_loss(&student, tau, StaVariant::Ours).unwrap(),
                uta_loss(&student, tau).unwrap(),
            ];
            for v in checks {
                prop_assert!(v.is_finite());
                prop_assert!(v >= 0.0, "negative loss {v}");
            }
            let b = seal_objective(&student, &teacher, label, &DistillConfig::default()).unwrap();
            prop_assert!(b.total.is_finite() && b.total >= 0.0);
        }

        #[test]
        fn ela_modify_local_and_pair_stable(
            student_row in prop::collection::vec(-3.0..3.0f64, 4),
            teacher_row in prop::collection::vec(-3.0..3.0f64, 4),
            label in 0usize..4,
        ) {
            let s = Tensor::vector(student_row.clone());
            let t = Tensor::vector(teacher_row.clone());
            let (s1, t1, mask) = ela_modify(&s, &t, label, ElaVariant::Ours).unwrap();
            match mask {
                None => {
                    prop_assert_eq!(s1.data(), s.data());
                    prop_assert_eq!(t1.data(), t.data());
                }
                Some(c_false) => {
                    prop_assert_ne!(c_false, label);
                    let pair_min_s = student_row[label].min(student_row[c_false]);
                    let pair_min_t = teacher_row[label].min(teacher_row[c_false]);
                    for i in 0..4 {
                        if i == label || i == c_false {
                            prop_assert_eq!(s1.data()[i], pair_min_s);
                            prop_assert_eq!(t1.data()[i], pair_min_t);
                        } else {
                            // Untouched coordinates are copied bit-identically.
                            prop_assert_eq!(s1.data()[i].to_bits(), student_row[i].to_bits());
                            prop_assert_eq!(t1.data()[i].to_bits(), teacher_row[i].to_bits());
                        }
                    }
                    // Re-equalizing the same pair is the identity: the pair
                    // is already at its common minimum on both sides.
                    let (s2, t2, mask2) = ela_modify(&s1, &t1, label, ElaVariant::Ours).unwrap();
                    if mask2 == Some(c_false) || mask2.is_none() {
                        prop_assert_eq!(s1.data(), s2.data());
                        prop_assert_eq!(t1.data(), t2.data());
                    }
                }
            }
        }

        #[test]
        fn ela_modify_idempotent_for_two_classes(
            student_row in prop::collection::vec(-3.0..3.0f64, 2),
            teacher_row in prop::collection::vec(-3.0..3.0f64, 2),
            label in 0usize..2,
        ) {
            // With two classes no third class can become the runner-up, so
            // full composition is the identity after one application.
            let s = Tensor::vector(student_row);
            let t = Tensor::vector(teacher_row);
            let (s1, t1, _) = ela_modify(&s, &t, label, ElaVariant::Ours).unwrap();
            let (s2, t2, _) = ela_modify(&s1, &t1, label, ElaVariant::Ours).unwrap();
            prop_assert_eq!(s1.data(), s2.data());
            prop_assert_eq!(t1.data(), t2.data());
        }

        #[test]
        fn ela_equals_kd_bitwise_on_correct_batches(
            rows in logit_rows(3, 4),
            teacher_row in prop::collection::vec(-3.0..3.0f64, 4),
            label in 0usize..4,
            tau in 0.5..6.0f64,
        ) {
            // Force the label's logit to be the strict per-timestep max.
            let mut forced = rows;
            for row in &mut forced {
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                row[label] = m + 1.0;
            }
            let student = to_temporal(&forced);
            let teacher = TeacherLogits::from_vec(teacher_row).unwrap();
            let kd = kd_loss(&student, &teacher, tau).unwrap();
            for variant in [
                ElaVariant::Ours,
                ElaVariant::StudentOnly,
                ElaVariant::TeacherOnly,
                ElaVariant::Both,
            ] {
                let ela = ela_loss(&student, &teacher, label, tau, variant).unwrap();
                prop_assert_eq!(kd.to_bits(), ela.to_bits(), "{:?}", variant);
            }
        }

        #[test]
        fn sta_weight_rows_are_stochastic_with_zero_diagonal(
            rows in (2usize..6, 2usize..6).prop_flat_map(|(t, c)| logit_rows(t, c)),
            tau in 0.5..6.0f64,
        ) {
            let student = to_temporal(&rows);
            for variant in [StaVariant::Ours, StaVariant::NoConf, StaVariant::NoSim, StaVariant::Dist] {
                let w = sta_weights(&student, tau, variant).unwrap();
                for (t, row) in w.iter().enumerate() {
                    prop_assert_eq!(row[t], 0.0);
                    let mut sum = 0.0;
                    for &v in row {
                        prop_assert!(v >= 0.0);
                        sum += v;
                    }
                    prop_assert!((sum - 1.0).abs() < 1e-12, "row sums {sum}");
                }
            }
        }

        #[test]
        fn cosine_similarity_is_scale_invariant(
            a in prop::collection::vec(-3.0..3.0f64, 5),
            b in prop::collection::vec(-3.0..3.0f64, 5),
            scale in 0.01..100.0f64,
        ) {
            let base = sta_similarity(&a, &b).unwrap();
            let sa: Vec<f64> = a.iter().map(|x| x * scale).collect();
            let sb: Vec<f64> = b.iter().map(|x| x * scale).collect();
            let scaled = sta_similarity(&sa, &sb).unwrap();
            prop_assert!((base - scaled).abs() < 1e-12);
        }
    }
}
