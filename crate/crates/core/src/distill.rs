//! Attentive rule distillation.
//!
//! For a triplet `(i, j, k)` the student produces scores `(m_ij, m_ik)` and
//! the two-way distribution `p = softmax(m_ij, m_ik)`. Every rule that fires
//! on either pair gets a confidence from a one-hidden-layer attention
//! network, normalized over the fired rules. The teacher is the closed-form
//! projection
//!
//! ```text
//! q_a ∝ p_a · exp(C · Σ_l λ_l f_l^a),   a ∈ {ij, ik}
//! ```
//!
//! and the per-triplet objective is `(1 - ρ)·BPR + ρ·CE(q, p)`.
//!
//! Gradient convention: inside `q` the copy of `p` is a constant, so the
//! student only sees the CE term through its own `p`, while the attention
//! parameters only see it through the confidences `λ_l` inside `q`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::catalog::{Catalog, Triplet};
use crate::error::{Error, Result};
use crate::numerics::{dot, matvec, softmax, softmax2, Matrix, Vector};
use crate::params::{Parameters, TensorMut, TensorRef};
use crate::rules::{constraint_vector, RuleConstraint, RuleSet};
use crate::student::{accumulate_student_backward, bpr_loss, student_forward, EncoderParams, StudentForward};

/// Lower clamp applied to probabilities before taking logs.
pub const PROB_FLOOR: f64 = 1e-300;

/// Two-way distribution over `(m_ij, m_ik)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreDistribution {
    pub ij: f64,
    pub ik: f64,
}

impl ScoreDistribution {
    pub fn new(ij: f64, ik: f64) -> Result<Self> {
        let d = ScoreDistribution { ij, ik };
        if !(ij >= 0.0 && ik >= 0.0) || (ij + ik - 1.0).abs() > 1e-9 {
            return Err(Error::RejectedInput(format!("({ij}, {ik}) is not a distribution")));
        }
        Ok(d)
    }

    /// Softmax over the two scores.
    pub fn from_scores(m_ij: f64, m_ik: f64) -> Self {
        let (ij, ik) = softmax2(m_ij, m_ik);
        ScoreDistribution { ij, ik }
    }

    pub fn as_array(&self) -> [f64; 2] {
        [self.ij, self.ik]
    }

    fn neg_log(&self) -> [f64; 2] {
        [-self.ij.max(PROB_FLOOR).ln(), -self.ik.max(PROB_FLOOR).ln()]
    }

    fn saturated(&self) -> bool {
        self.ij < PROB_FLOOR || self.ik < PROB_FLOOR
    }
}

/// Attention network weights. `w_bottom` is applied to both bottoms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionParams {
    pub w_top: Matrix,
    pub w_bottom: Matrix,
    pub w_rule: Matrix,
    pub w: Vector,
    pub b: Vector,
    pub c: f64,
}

impl AttentionParams {
    pub fn zeros(feature_dim: usize, num_rules: usize, hidden: usize) -> Self {
        AttentionParams {
            w_top: Matrix::zeros(hidden, feature_dim),
            w_bottom: Matrix::zeros(hidden, feature_dim),
            w_rule: Matrix::zeros(hidden, num_rules),
            w: Vector::zeros(hidden),
            b: Vector::zeros(hidden),
            c: 0.0,
        }
    }

    /// Glorot-uniform matrices and output vector, zero biases.
    pub fn init(feature_dim: usize, num_rules: usize, hidden: usize, seed: u64) -> Result<Self> {
        if hidden == 0 {
            return Err(Error::RejectedInput("attention hidden size must be >= 1".into()));
        }
        let mut p = AttentionParams::zeros(feature_dim, num_rules, hidden);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut fill = |data: &mut [f64], fan_in: usize, fan_out: usize| {
            let r = (6.0 / (fan_in + fan_out).max(1) as f64).sqrt();
            for x in data {
                *x = rng.random_range(-r..=r);
            }
        };
        fill(p.w_top.as_mut_slice(), feature_dim, hidden);
        fill(p.w_bottom.as_mut_slice(), feature_dim, hidden);
        fill(p.w_rule.as_mut_slice(), num_rules, hidden);
        fill(&mut p.w, hidden, 1);
        Ok(p)
    }

    pub fn hidden(&self) -> usize {
        self.w.len()
    }

    pub fn num_rules(&self) -> usize {
        self.w_rule.cols()
    }

    pub fn feature_dim(&self) -> usize {
        self.w_top.cols()
    }
}

impl Parameters for AttentionParams {
    fn tensors(&self) -> Vec<TensorRef<'_>> {
        vec![
            TensorRef {
                name: "attention.w_top".into(),
                shape: vec![self.w_top.rows(), self.w_top.cols()],
                data: self.w_top.as_slice(),
                decay: false,
            },
            TensorRef {
                name: "attention.w_bottom".into(),
                shape: vec![self.w_bottom.rows(), self.w_bottom.cols()],
                data: self.w_bottom.as_slice(),
                decay: false,
            },
            TensorRef {
                name: "attention.w_rule".into(),
                shape: vec![self.w_rule.rows(), self.w_rule.cols()],
                data: self.w_rule.as_slice(),
                decay: false,
            },
            TensorRef {
                name: "attention.w".into(),
                shape: vec![self.w.len()],
                data: &self.w,
                decay: false,
            },
            TensorRef {
                name: "attention.b".into(),
                shape: vec![self.b.len()],
                data: &self.b,
                decay: false,
            },
            TensorRef {
                name: "attention.c".into(),
                shape: vec![1],
                data: std::slice::from_ref(&self.c),
                decay: false,
            },
        ]
    }

    fn tensors_mut(&mut self) -> Vec<TensorMut<'_>> {
        vec![
            TensorMut {
                name: "attention.w_top".into(),
                data: self.w_top.as_mut_slice(),
                decay: false,
            },
            TensorMut {
                name: "attention.w_bottom".into(),
                data: self.w_bottom.as_mut_slice(),
                decay: false,
            },
            TensorMut {
                name: "attention.w_rule".into(),
                data: self.w_rule.as_mut_slice(),
                decay: false,
            },
            TensorMut {
                name: "attention.w".into(),
                data: &mut self.w,
                decay: false,
            },
            TensorMut {
                name: "attention.b".into(),
                data: &mut self.b,
                decay: false,
            },
            TensorMut {
                name: "attention.c".into(),
                data: std::slice::from_mut(&mut self.c),
                decay: false,
            },
        ]
    }
}

/// Attention activations for one triplet, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct AttentionForward {
    pub activated: Vec<usize>,
    pub logits: Vec<f64>,
    pub confidences: Vec<f64>,
    top_features: Vector,
    bottom_features_sum: Vector,
    /// `tanh` hidden activations, one per activated rule.
    hidden: Vec<Vector>,
}

impl AttentionForward {
    /// `(rule_id, λ_l)` in activation order.
    pub fn confidence_map(&self) -> Vec<(usize, f64)> {
        self.activated.iter().copied().zip(self.confidences.iter().copied()).collect()
    }
}

/// Evaluates the attention network on the raw `[visual; contextual]`
/// features of the triplet for every activated rule.
pub fn attention_forward(
    phi: &AttentionParams,
    catalog: &Catalog,
    t: Triplet,
    activated: &[usize],
) -> Result<AttentionForward> {
    if activated.is_empty() {
        return Err(Error::RejectedInput("attention needs at least one activated rule".into()));
    }
    if let Some(&bad) = activated.iter().find(|&&l| l >= phi.num_rules()) {
        return Err(Error::RejectedInput(format!(
            "rule id {bad} outside the attention network's {} rules",
            phi.num_rules()
        )));
    }
    let top_features = catalog.top(t.top).features();
    let pos = catalog.bottom(t.positive).features();
    let neg = catalog.bottom(t.negative).features();
    let bottom_features_sum: Vector = pos.iter().zip(neg.iter()).map(|(a, b)| a + b).collect::<Vec<_>>().into();

    let mut shared = matvec(&phi.w_top, &top_features)?;
    let from_bottoms = matvec(&phi.w_bottom, &bottom_features_sum)?;
    for ((s, x), b) in shared.iter_mut().zip(from_bottoms.iter()).zip(phi.b.iter()) {
        *s += x + b;
    }
    let mut hidden = Vec::with_capacity(activated.len());
    let mut logits = Vec::with_capacity(activated.len());
    for &l in activated {
        let h: Vector = shared
            .iter()
            .enumerate()
            .map(|(r, s)| (s + phi.w_rule.get(r, l)).tanh())
            .collect::<Vec<_>>()
            .into();
        logits.push(dot(&phi.w, &h) + phi.c);
        hidden.push(h);
    }
    let confidences = softmax(&logits);
    Ok(AttentionForward {
        activated: activated.to_vec(),
        logits,
        confidences,
        top_features,
        bottom_features_sum,
        hidden,
    })
}

/// Per-triplet rule confidences `λ_l`, summing to one over `activated`.
pub fn attention_confidence(
    phi: &AttentionParams,
    catalog: &Catalog,
    t: Triplet,
    activated: &[usize],
) -> Result<Vec<(usize, f64)>> {
    Ok(attention_forward(phi, catalog, t, activated)?.confidence_map())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TeacherOutput {
    pub q: ScoreDistribution,
    pub confidences: Vec<(usize, f64)>,
}

/// `Σ_l λ_l f_l` for both sides. Rules without a confidence contribute nothing.
pub fn weighted_rewards(constraints: &[RuleConstraint], confidences: &[(usize, f64)]) -> (f64, f64) {
    let mut s = (0.0, 0.0);
    for c in constraints {
        if let Some(&(_, lambda)) = confidences.iter().find(|(id, _)| *id == c.rule_id) {
            let (f_ij, f_ik) = c.rewards();
            s.0 += lambda * f_ij;
            s.1 += lambda * f_ik;
        }
    }
    s
}

/// Closed-form teacher `q_a ∝ p_a · exp(C · Σ_l λ_l f_l^a)`.
pub fn build_teacher(
    p: ScoreDistribution,
    constraints: &[RuleConstraint],
    confidences: &[(usize, f64)],
    c: f64,
) -> TeacherOutput {
    let (s_ij, s_ik) = weighted_rewards(constraints, confidences);
    let q = if s_ij == 0.0 && s_ik == 0.0 {
        p
    } else {
        let (a, b) = (c * s_ij, c * s_ik);
        let m = a.max(b);
        let u_ij = p.ij * (a - m).exp();
        let u_ik = p.ik * (b - m).exp();
        let z = u_ij + u_ik;
        ScoreDistribution {
            ij: u_ij / z,
            ik: u_ik / z,
        }
    };
    TeacherOutput {
        q,
        confidences: confidences.to_vec(),
    }
}

/// `KL(q ‖ p) − C Σ_l λ_l E_q[f_l]`, the quantity the teacher minimizes.
pub fn teacher_objective(
    q: ScoreDistribution,
    p: ScoreDistribution,
    constraints: &[RuleConstraint],
    confidences: &[(usize, f64)],
    c: f64,
) -> f64 {
    let kl_term = |qa: f64, pa: f64| if qa > 0.0 { qa * (qa / pa).ln() } else { 0.0 };
    let (s_ij, s_ik) = weighted_rewards(constraints, confidences);
    kl_term(q.ij, p.ij) + kl_term(q.ik, p.ik) - c * (q.ij * s_ij + q.ik * s_ik)
}

/// `CE(q, p) = −Σ_a q_a ln p_a`, with `p` clamped at [`PROB_FLOOR`].
pub fn cross_entropy(q: ScoreDistribution, p: ScoreDistribution) -> f64 {
    let [a, b] = p.neg_log();
    q.ij * a + q.ik * b
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistillLoss {
    pub value: f64,
    /// Set when a probability of `p` fell below the log clamp.
    pub saturated: bool,
}

impl DistillLoss {
    fn scaled(self, factor: f64) -> Self {
        DistillLoss {
            value: factor * self.value,
            ..self
        }
    }
}

/// `(1 − ρ)·bpr + ρ·CE(q, p)`
pub fn distill_loss(p: ScoreDistribution, q: ScoreDistribution, bpr: f64, rho: f64) -> Result<DistillLoss> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::RejectedInput(format!("rho {rho} outside [0, 1]")));
    }
    let value = if rho == 0.0 {
        bpr
    } else {
        (1.0 - rho) * bpr + rho * cross_entropy(q, p)
    };
    Ok(DistillLoss {
        value,
        saturated: p.saturated(),
    })
}

/// Everything computed on the forward pass for one triplet.
#[derive(Debug, Clone)]
pub struct DistillForward {
    pub student: StudentForward,
    pub p: ScoreDistribution,
    pub bpr: f64,
    pub constraints: Vec<RuleConstraint>,
    /// `None` when no rule fired (or distillation is off).
    pub attention: Option<AttentionForward>,
    pub teacher: TeacherOutput,
    pub rho: f64,
    pub c: f64,
    pub loss: DistillLoss,
}

/// Student scores, fired rules, attention, teacher and loss for one triplet.
/// With `rho == 0` or an empty rule set the rule machinery is skipped.
pub fn distill_forward(
    student: &EncoderParams,
    attention: &AttentionParams,
    catalog: &Catalog,
    rules: &RuleSet,
    t: Triplet,
    rho: f64,
    c: f64,
) -> Result<DistillForward> {
    let sf = student_forward(student, catalog, t)?;
    let p = ScoreDistribution::from_scores(sf.m_ij, sf.m_ik);
    let bpr = bpr_loss(sf.m_ij, sf.m_ik);
    let constraints = if rho > 0.0 && !rules.is_empty() {
        constraint_vector(rules, catalog, t)
    } else {
        Vec::new()
    };
    let attention_fw = if constraints.is_empty() {
        None
    } else {
        let ids: Vec<usize> = constraints.iter().map(|c| c.rule_id).collect();
        Some(attention_forward(attention, catalog, t, &ids)?)
    };
    let confidences = attention_fw.as_ref().map(|a| a.confidence_map()).unwrap_or_default();
    let teacher = build_teacher(p, &constraints, &confidences, c);
    // Without fired rules q == p is detached, so only the ranking term is kept.
    let loss = if attention_fw.is_some() {
        distill_loss(p, teacher.q, bpr, rho)?
    } else {
        distill_loss(p, p, bpr, 0.0)?.scaled(1.0 - rho)
    };
    Ok(DistillForward {
        student: sf,
        p,
        bpr,
        constraints,
        attention: attention_fw,
        teacher,
        rho,
        c,
        loss,
    })
}

/// Upstream gradients `(∂J/∂m_ij, ∂J/∂m_ik)` with `q` held constant.
pub fn score_gradients(fw: &DistillForward) -> (f64, f64) {
    let mut d_ij = (1.0 - fw.rho) * -fw.p.ik;
    if fw.attention.is_some() {
        d_ij += fw.rho * (fw.p.ij - fw.teacher.q.ij);
    }
    (d_ij, -d_ij)
}

/// Accumulates the gradients of the triplet objective into `grad_student`
/// and `grad_attention`.
pub fn distill_backward(
    student: &EncoderParams,
    attention: &AttentionParams,
    fw: &DistillForward,
    grad_student: &mut EncoderParams,
    grad_attention: &mut AttentionParams,
) -> Result<()> {
    let (d_ij, d_ik) = score_gradients(fw);
    accumulate_student_backward(student, &fw.student.cache, d_ij, d_ik, grad_student)?;

    let Some(att) = &fw.attention else {
        return Ok(());
    };
    if !grad_attention.same_layout(attention) || att.hidden.iter().any(|h| h.len() != attention.hidden()) {
        return Err(Error::Internal("attention cache does not match the parameter shapes".into()));
    }
    // dCE/ds_a for the weighted rewards s_a inside q, with p constant.
    let q = fw.teacher.q.as_array();
    let nll = fw.p.neg_log();
    let ce = q[0] * nll[0] + q[1] * nll[1];
    let d_s = [fw.c * q[0] * (nll[0] - ce), fw.c * q[1] * (nll[1] - ce)];

    // dJ/dλ_l
    let g: Vec<f64> = att
        .activated
        .iter()
        .map(|&l| {
            let con = fw.constraints.iter().find(|c| c.rule_id == l).expect("activated rule has a constraint");
            let (f_ij, f_ik) = con.rewards();
            fw.rho * (d_s[0] * f_ij + d_s[1] * f_ik)
        })
        .collect();
    let mean_g: f64 = att.confidences.iter().zip(&g).map(|(l, g)| l * g).sum();

    for (n, &l) in att.activated.iter().enumerate() {
        // softmax Jacobian
        let d_logit = att.confidences[n] * (g[n] - mean_g);
        if d_logit == 0.0 {
            continue;
        }
        let h = &att.hidden[n];
        grad_attention.c += d_logit;
        for (gw, hv) in grad_attention.w.iter_mut().zip(h.iter()) {
            *gw += d_logit * hv;
        }
        let d_pre: Vec<f64> = attention
            .w
            .iter()
            .zip(h.iter())
            .map(|(w, hv)| d_logit * w * (1.0 - hv * hv))
            .collect();
        grad_attention.w_top.add_outer(1.0, &d_pre, &att.top_features);
        grad_attention.w_bottom.add_outer(1.0, &d_pre, &att.bottom_features_sum);
        grad_attention.w_rule.add_to_column(l, &d_pre);
        for (gb, d) in grad_attention.b.iter_mut().zip(&d_pre) {
            *gb += d;
        }
    }
    Ok(())
}
