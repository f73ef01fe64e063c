"""Training objectives: contrastive pretraining loss and the supervised losses."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

EPS = 1e-7


class UndefinedSimilarityError(ValueError):
    pass


def cosine_sim(u: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    nu, nv = torch.linalg.vector_norm(u), torch.linalg.vector_norm(v)
    if nu == 0 or nv == 0:
        raise UndefinedSimilarityError("cosine similarity is undefined for a zero vector")
    return torch.dot(u, v) / (nu * nv)


def nt_xent_batch(z: torch.Tensor, temperature: float = 0.5,
                  asymmetric_temperature: bool = False) -> torch.Tensor:
    """Mean NT-Xent over 2M embeddings laid out as adjacent positive pairs.

    Rows (2k, 2k+1) (0-based) are two views of one source image; every other row
    in the batch is a negative. Both orientations of each pair contribute.
    With ``asymmetric_temperature`` the denominator is left unscaled.
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    if z.ndim != 2 or z.shape[0] % 2 or z.shape[0] == 0:
        raise ValueError(f"expected an even, non-zero number of embeddings, got {tuple(z.shape)}")
    norms = torch.linalg.vector_norm(z, dim=1)
    if (norms == 0).any():
        raise UndefinedSimilarityError("zero embedding in batch")
    zn = z / norms[:, None]
    sim = zn @ zn.T
    n = z.shape[0]
    partner = torch.arange(n, device=z.device) ^ 1
    self_mask = torch.eye(n, dtype=torch.bool, device=z.device)
    denom_logits = sim if asymmetric_temperature else sim / temperature
    denom_logits = denom_logits.masked_fill(self_mask, float("-inf"))
    pos = sim[torch.arange(n), partner] / temperature
    return (torch.logsumexp(denom_logits, dim=1) - pos).mean()


def interaction_loss(s_fused: torch.Tensor, targets: torch.Tensor, upper: float = 1.0,
                     kind: str = "bce") -> torch.Tensor:
    """Per-class interaction loss on fused scores.

    ``bce``: fused scores divided by ``upper`` (their attainable maximum), clamped
    to (EPS, 1 - EPS), then mean binary cross-entropy over classes and batch.
    ``softmax``: categorical cross-entropy with the fused scores as logits.
    """
    if s_fused.shape != targets.shape:
        raise ValueError(f"score/target shape mismatch: {tuple(s_fused.shape)} vs {tuple(targets.shape)}")
    targets = targets.to(s_fused.dtype)
    if kind == "bce":
        p = (s_fused / upper).clamp(EPS, 1 - EPS)
        return -(targets * torch.log(p) + (1 - targets) * torch.log1p(-p)).mean()
    if kind == "softmax":
        logp = F.log_softmax(s_fused, dim=-1)
        t = targets / targets.sum(dim=-1, keepdim=True).clamp_min(1)
        return -(t * logp).sum(dim=-1).mean()
    raise ValueError(f"unknown interaction loss {kind!r}")


def individual_loss(dist_a: torch.Tensor, dist_b: torch.Tensor,
                    target_a: torch.Tensor, target_b: torch.Tensor) -> torch.Tensor:
    """Mean of the two categorical cross-entropies -log p[target]."""
    n = dist_a.shape[-1]
    for t in (target_a, target_b):
        if ((t < 0) | (t >= n)).any():
            raise IndexError("target action index out of range")

    def ce(dist, t):
        picked = dist.gather(-1, t.long().view(-1, 1)).squeeze(-1)
        return -torch.log(picked.clamp_min(EPS))

    return 0.5 * (ce(dist_a.reshape(-1, n), target_a.reshape(-1))
                  + ce(dist_b.reshape(-1, n), target_b.reshape(-1))).mean()


@dataclass
class LossReport:
    l_ind: torch.Tensor
    l_int: torch.Tensor
    l_entire: torch.Tensor

    def as_floats(self) -> dict[str, float]:
        return {"l_ind": self.l_ind.item(), "l_int": self.l_int.item(), "l_entire": self.l_entire.item()}


def total_loss(l_ind: torch.Tensor, l_int: torch.Tensor) -> LossReport:
    """Unit-weighted sum; the detector's localisation term is not part of this package."""
    return LossReport(l_ind, l_int, l_ind + l_int)
