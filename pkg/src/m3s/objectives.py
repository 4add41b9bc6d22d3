"""Training losses: cross-entropy, two-way distillation, contrastive alignment."""

from dataclasses import dataclass

import numpy as np

from m3s import autodiff as ad
from m3s.autodiff import Tensor
from m3s.errors import ConfigError, ContractViolation, DataError, PoolingError


def _real_positions(mask):
    mask = np.asarray(mask, dtype=bool)
    idx = np.flatnonzero(mask.reshape(-1))
    return mask, idx


def loss_ce(logits, targets, mask, smoothing=0.0):
    """Mean token cross-entropy over real positions.

    ``logits`` B x N x V (or N x V), ``targets``/``mask`` matching the leading
    axes. With ``smoothing`` > 0 the target distribution puts ``smoothing``
    mass uniformly over the vocabulary.
    """
    if not 0.0 <= smoothing < 1.0:
        raise ConfigError(f"label smoothing must be in [0, 1), got {smoothing}")
    mask, idx = _real_positions(mask)
    if idx.size == 0:
        raise DataError("cross-entropy over an all-padding target")
    V = logits.shape[-1]
    flat = logits.reshape(-1, V)
    rows = ad.embedding(flat, idx)  # real positions only
    logp = ad.log_softmax(rows, axis=-1)
    tgt = np.asarray(targets).reshape(-1)[idx]
    nll = -ad.pick(logp, tgt)
    if smoothing:
        nll = nll * (1.0 - smoothing) + ad.mean(logp, axis=-1) * (-smoothing)
    return ad.mean(nll)


def kd_distance(reference, states, mask, mode="cosine", project=None):
    """Mean per-position distance between two decoder state sequences.

    ``reference`` is held constant (no gradient reaches it); gradient flows
    into ``states`` only. ``cosine``: 1 - cos(ref_t, state_t). ``kl``:
    KL(softmax(project(ref_t)) || softmax(project(state_t))).
    """
    if reference.shape != states.shape:
        raise ContractViolation(f"kd_distance: shapes {reference.shape} and {states.shape} differ")
    mask, idx = _real_positions(mask)
    if mask.shape != reference.shape[:-1]:
        raise ContractViolation(f"kd_distance: mask {mask.shape} vs states {reference.shape[:-1]}")
    if idx.size == 0:
        raise DataError("kd_distance over an all-padding target")
    d = states.shape[-1]
    ref = ad.embedding(reference.detach().reshape(-1, d), idx)
    cur = ad.embedding(states.reshape(-1, d), idx)
    if mode == "cosine":
        return ad.mean(1.0 - ad.cosine_similarity(ref, cur))
    if mode == "kl":
        if project is None:
            raise ConfigError("kl mode needs the output projection")
        with ad.no_grad():
            ref_logp = ad.log_softmax(project(ref), axis=-1).data
        logq = ad.log_softmax(project(cur), axis=-1)
        p = np.exp(ref_logp)
        const = Tensor((p * ref_logp).sum(axis=-1))
        return ad.mean(const - ad.sum_(logq * Tensor(p), axis=-1))
    raise ConfigError(f"unknown distance mode {mode!r}")


def alpha_schedule(step, horizon):
    """Distillation balance: 1 at step 0, linear down to 0.5 at half the horizon, then flat."""
    if horizon <= 0:
        raise ConfigError(f"annealing horizon must be positive, got {horizon}")
    if step < 0:
        raise ConfigError(f"step must be non-negative, got {step}")
    return max(0.5, 1.0 - step / horizon)


def loss_student(student, teacher, alpha, targets, mask, mode="cosine", project=None, smoothing=0.0):
    """Cross-lingual likelihood plus alpha-weighted pull toward the monolingual states."""
    l_ce = loss_ce(student.logits, targets, mask, smoothing)
    l_kd = kd_distance(teacher.dec_states, student.dec_states, mask, mode, project)
    return l_ce + l_kd * alpha, l_ce, l_kd


def loss_teacher(teacher, student, alpha, targets, mask, mode="cosine", project=None, smoothing=0.0):
    """Monolingual likelihood plus (1 - alpha)-weighted pull toward the cross-lingual states."""
    l_ce = loss_ce(teacher.logits, targets, mask, smoothing)
    l_kd = kd_distance(student.dec_states, teacher.dec_states, mask, mode, project)
    return l_ce + l_kd * (1.0 - alpha), l_ce, l_kd


def pool_masked(states, mask):
    """Mean of rows with mask 1, divided by the true count. states B x L x D, mask B x L."""
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != states.shape[:2]:
        raise ConfigError(f"pool_masked: mask {mask.shape} vs states {states.shape[:2]}")
    counts = mask.sum(axis=1)
    if (counts == 0).any():
        raise PoolingError(f"empty mask in rows {np.flatnonzero(counts == 0).tolist()}")
    w = (mask / counts[:, None])[:, None, :]  # B x 1 x L
    B, _, D = states.shape
    return ad.matmul(Tensor(w), states).reshape(B, D)


def loss_tco(vis, summ, tau):
    """In-batch contrastive loss pulling each vision vector to its own summary vector."""
    if tau <= 0:
        raise ConfigError(f"temperature must be positive, got {tau}")
    if vis.shape != summ.shape or vis.ndim != 2:
        raise ConfigError(f"loss_tco: shapes {vis.shape} and {summ.shape}")
    B = vis.shape[0]
    sims = ad.matmul(ad.normalize(vis), ad.normalize(summ).transpose(1, 0)) * (1.0 / tau)
    logp = ad.log_softmax(sims, axis=-1)
    return -ad.mean(ad.pick(logp, np.arange(B)))


@dataclass
class LossBundle:
    joint: Tensor
    l_mms: float
    l_mxls: float
    l_kd_ts: float  # teacher -> student term (pulls the student)
    l_kd_st: float  # student -> teacher term
    l_tco: float
    alpha: float
    beta: float
    tau: float

    def as_dict(self):
        return {"joint": float(self.joint.data), "l_mms": self.l_mms, "l_mxls": self.l_mxls,
                "l_kd_ts": self.l_kd_ts, "l_kd_st": self.l_kd_st, "l_tco": self.l_tco,
                "alpha": self.alpha, "beta": self.beta, "tau": self.tau}


def joint_step_loss(student, teacher, vis_pooled, sum_pooled, targets, mask, alpha, beta, tau,
                    mode="cosine", project=None, smoothing=0.0):
    """Student + teacher objectives plus beta times the contrastive term."""
    s_total, l_mxls, l_kd_ts = loss_student(student, teacher, alpha, targets, mask, mode, project, smoothing)
    t_total, l_mms, l_kd_st = loss_teacher(teacher, student, alpha, targets, mask, mode, project, smoothing)
    joint = s_total + t_total
    l_tco = 0.0
    if beta:
        tco = loss_tco(vis_pooled, sum_pooled, tau)
        joint = joint + tco * beta
        l_tco = float(tco.data)
    return LossBundle(joint=joint, l_mms=float(l_mms.data), l_mxls=float(l_mxls.data),
                      l_kd_ts=float(l_kd_ts.data), l_kd_st=float(l_kd_st.data), l_tco=l_tco,
                      alpha=float(alpha), beta=float(beta), tau=float(tau))


def pooled_pair(model, batch, vision_states):
    """Pooled (vision, summary) representations for the contrastive term."""
    summ_states = model.encode_text(batch.tgt_ids, batch.tgt_mask)
    h_sum = pool_masked(summ_states, batch.tgt_mask)
    h_vis = pool_masked(model.vision_projection(vision_states), batch.vision.flat_mask)
    return h_vis, h_sum


def step_objective(model, batch, alpha, beta, tau, mode="cosine", smoothing=0.0):
    """Run the student and teacher passes on one batch and combine the losses.

    The image sequence is encoded once and shared by both passes and the
    contrastive term.
    """
    vision_states = model.encode_vision(batch.vision)
    student = model.forward(batch.src_ids, batch.src_mask, batch.vision, batch.dec_in, batch.tgt_mask,
                            vision_states=vision_states)
    teacher = model.forward(batch.teacher_src_ids, batch.teacher_src_mask, batch.vision, batch.dec_in,
                            batch.tgt_mask, vision_states=vision_states)
    h_vis = h_sum = None
    if beta:
        h_vis, h_sum = pooled_pair(model, batch, vision_states)
    bundle = joint_step_loss(student, teacher, h_vis, h_sum, batch.tgt_ids, batch.tgt_mask, alpha, beta, tau,
                             mode, model.project, smoothing)
    return bundle, student, teacher
