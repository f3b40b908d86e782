"""Training objectives.

Every loss accepts ``torch`` tensors (gradients flow through) or array-likes
(converted to float64 tensors) and returns a 0-dim tensor. Embedding inputs
are ``(n, dim)`` matrices whose rows are expected to be unit-norm.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .errors import DimensionError, NumericError, ParameterError
from .analysis import patch_entropy

LOG_EPS = 1e-12


def _t(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def _rows(x) -> torch.Tensor:
    x = _t(x)
    if x.ndim == 1:
        x = x[None]
    if x.ndim != 2:
        raise DimensionError(f"expected an (n, dim) embedding matrix, got {tuple(x.shape)}")
    return x


@dataclass
class LossWeights:
    w_sparse: float = 0.1
    w_adv: float = 1.0
    w_mse: float = 1.0
    w_loc: float = 1.0
    w_layer: float = 1.0
    w_asy: float = 0.01

    def __post_init__(self):
        for name, value in vars(self).items():
            if value < 0:
                raise ParameterError(f"loss weight {name} must be >= 0, got {value}")


@dataclass
class ContrastiveConfig:
    temperature: float = 0.77
    margin: float = 1.0
    use_log_form: bool = True
    normalize_pairs: bool = True

    def __post_init__(self):
        if self.temperature <= 0:
            raise ParameterError(f"temperature must be > 0, got {self.temperature}")
        if self.margin < 0:
            raise ParameterError(f"margin must be >= 0, got {self.margin}")


def _check_tau(cfg: ContrastiveConfig) -> float:
    if cfg.temperature <= 0:
        raise ParameterError(f"temperature must be > 0, got {cfg.temperature}")
    return cfg.temperature


def _check_eta(eta: int) -> int:
    if eta not in (1, -1):
        raise ParameterError(f"eta must be +1 or -1, got {eta}")
    return int(eta)


# ---------------------------------------------------------------------------
# decomposition terms


def self_consistency(O, B, R) -> torch.Tensor:
    """Mean squared residual of the additive model ``O = B + R``."""
    O, B, R = _t(O), _t(B), _t(R)
    if not (O.shape == B.shape == R.shape):
        raise DimensionError(f"shape mismatch: {tuple(O.shape)}, {tuple(B.shape)}, {tuple(R.shape)}")
    return torch.mean((B + R - O) ** 2)


def rain_sparsity(R) -> torch.Tensor:
    return torch.mean(torch.abs(_t(R)))


def _safe_log(x: torch.Tensor) -> torch.Tensor:
    return torch.log(torch.clamp(x, min=LOG_EPS))


def adversarial_losses(D_real, D_fake) -> tuple[torch.Tensor, torch.Tensor]:
    """Discriminator and non-saturating generator losses from probability maps."""
    D_real, D_fake = _t(D_real), _t(D_fake)
    loss_d = -torch.mean(_safe_log(D_real)) - torch.mean(_safe_log(1 - D_fake))
    loss_g = -torch.mean(_safe_log(D_fake))
    return loss_d, loss_g


def adversarial_losses_from_logits(logit_real, logit_fake) -> tuple[torch.Tensor, torch.Tensor]:
    """Same losses as :func:`adversarial_losses`, evaluated stably on logits."""
    F = torch.nn.functional
    loss_d = None
    if logit_real is not None:
        loss_d = F.softplus(-logit_real).mean() + F.softplus(logit_fake).mean()
    loss_g = F.softplus(-logit_fake).mean()
    return loss_d, loss_g


# ---------------------------------------------------------------------------
# contrastive terms


def _one_sided_layer(q, pos, neg, tau, log_form, n_norm):
    pos_logits = q @ pos.T / tau          # (n_q, n_pos)
    neg_logits = q @ neg.T / tau          # (n_q, n_neg)
    if log_form:
        # -log exp(s_pos) / (exp(s_pos) + sum_j exp(s_neg_j)), per (anchor, positive) pair
        neg_lse = torch.logsumexp(neg_logits, dim=1, keepdim=True)
        denom = torch.logaddexp(pos_logits, neg_lse.expand_as(pos_logits))
        return torch.mean(denom - pos_logits)
    ratio = torch.exp(pos_logits - torch.logsumexp(neg_logits, dim=1, keepdim=True))
    return -torch.sum(ratio) / n_norm


def layer_contrastive(f_B_anchors, f_B_pos, f_R_anchors, f_R_pos, f_B_neg, f_R_neg,
                      cfg: ContrastiveConfig | None = None) -> torch.Tensor:
    """Bidirectional clean/rain layer contrastive loss.

    Clean anchors are pulled toward ``f_B_pos`` and pushed from ``f_R_neg``;
    rain anchors toward ``f_R_pos`` and away from ``f_B_neg``.

    With ``use_log_form`` each (anchor, positive) pair contributes an InfoNCE
    term and the two directions are averaged over their pairs and summed.
    Otherwise the bare exp-ratios are summed and scaled by the positive count
    of each side, negated.
    """
    cfg = cfg or ContrastiveConfig()
    tau = _check_tau(cfg)
    qb, pb, qr, pr, nb, nr = (_rows(x) for x in (f_B_anchors, f_B_pos, f_R_anchors, f_R_pos, f_B_neg, f_R_neg))
    term_b = _one_sided_layer(qb, pb, nr, tau, cfg.use_log_form, pb.shape[0])
    term_r = _one_sided_layer(qr, pr, nb, tau, cfg.use_log_form, pr.shape[0])
    return term_b + term_r


def location_contrastive(v_O_pos, v_B_anchors, v_O_neg, cfg: ContrastiveConfig | None = None) -> torch.Tensor:
    """Co-located patch contrastive loss between the rainy input and the clean estimate.

    ``v_O_neg`` is ``(n, N, dim)`` (per-anchor negatives) or ``(N, dim)``
    (shared by every anchor).
    """
    cfg = cfg or ContrastiveConfig()
    tau = _check_tau(cfg)
    vo, vb = _rows(v_O_pos), _rows(v_B_anchors)
    neg = _t(v_O_neg)
    if vo.shape != vb.shape:
        raise DimensionError("positives and anchors must pair up one to one")
    if neg.ndim == 2:
        neg = neg.unsqueeze(0).expand(vb.shape[0], -1, -1)
    if neg.ndim != 3 or neg.shape[0] != vb.shape[0]:
        raise DimensionError(f"negatives must be (n, N, dim), got {tuple(neg.shape)}")
    pos_logit = torch.sum(vo * vb, dim=1) / tau                       # (n,)
    neg_logit = torch.einsum("nkd,nd->nk", neg, vb) / tau             # (n, N)
    log_denom = torch.logsumexp(torch.cat([pos_logit[:, None], neg_logit], dim=1), dim=1)
    if cfg.use_log_form:
        return torch.mean(log_denom - pos_logit)
    return torch.sum(torch.exp(pos_logit - log_denom))


def _pairwise_sq(x: torch.Tensor) -> torch.Tensor:
    """Squared distances of the ordered pairs (i, j) with i != j, flattened."""
    diff = x[:, None, :] - x[None, :, :]
    d = torch.sum(diff * diff, dim=-1)
    off = ~torch.eye(x.shape[0], dtype=torch.bool, device=x.device)
    return d[off]


def margin_loss(f_R, f_B, margin: float = 1.0, eta: int = 1, normalize_pairs: bool = True) -> torch.Tensor:
    """Hinge on rain-pair versus clean-pair squared embedding distances.

    Pairs are ordered and distinct (``i != j``, ``m != n``); a self pair has
    zero distance and would only add a constant ``margin`` floor.
    """
    eta = _check_eta(eta)
    fr, fb = _rows(f_R), _rows(f_B)
    if fr.shape[0] < 2 or fb.shape[0] < 2:
        raise ParameterError("margin loss needs at least two rows per batch")
    dr = _pairwise_sq(fr)[:, None]
    db = _pairwise_sq(fb)[None, :]
    hinge = torch.clamp(margin + eta * dr - db, min=0)
    return hinge.mean() if normalize_pairs else hinge.sum()


def similarity_ratio(f_R, f_B, tau: float, eta: int = 1) -> torch.Tensor:
    """``(sum_ij exp(r_i.r_j/tau) / sum_mn exp(b_m.b_n/tau)) ** eta``, computed in log space."""
    eta = _check_eta(eta)
    fr, fb = _rows(f_R), _rows(f_B)
    log_r = torch.logsumexp((fr @ fr.T / tau).reshape(-1), 0) - torch.logsumexp((fb @ fb.T / tau).reshape(-1), 0)
    return torch.exp(eta * log_r)


def asymmetric_contrastive(f_R, f_B, cfg: ContrastiveConfig | None = None, eta: int = 1) -> torch.Tensor:
    cfg = cfg or ContrastiveConfig()
    tau = _check_tau(cfg)
    eta = _check_eta(eta)
    fr, fb = _rows(f_R), _rows(f_B)
    return -similarity_ratio(fr, fb, tau, eta) / (fr.shape[0] * fb.shape[0])


def eta_from_entropy(image_patches, rain_patches, bins: int = 256) -> int:
    """+1 when the clean patches carry at least as much entropy as the rain patches."""
    image_patches = getattr(image_patches, "patches", image_patches)
    rain_patches = getattr(rain_patches, "patches", rain_patches)
    if len(image_patches) == 0 or len(rain_patches) == 0:
        raise ParameterError("entropy comparison needs non-empty patch stacks")
    h_img = np.mean([patch_entropy(p, bins) for p in image_patches])
    h_rain = np.mean([patch_entropy(p, bins) for p in rain_patches])
    return 1 if h_img >= h_rain else -1


# ---------------------------------------------------------------------------

COMPONENTS = ("l_mse", "l_sparse", "l_adv", "l_loc", "l_layer", "l_asy")
_WEIGHT_OF = {"l_mse": "w_mse", "l_sparse": "w_sparse", "l_adv": "w_adv",
              "l_loc": "w_loc", "l_layer": "w_layer", "l_asy": "w_asy"}


def overall_loss(components: dict, w: LossWeights | None = None):
    """Weighted sum of the six named components (missing ones count as zero)."""
    w = w or LossWeights()
    unknown = set(components) - set(COMPONENTS)
    if unknown:
        raise ParameterError(f"unknown loss components: {sorted(unknown)}")
    total = 0.0
    for name, value in components.items():
        v = float(value.detach()) if isinstance(value, torch.Tensor) else float(value)
        if not math.isfinite(v):
            raise NumericError(f"loss component {name} is not finite ({v})")
        weight = getattr(w, _WEIGHT_OF[name])
        if weight:
            total = total + weight * value
    return total
