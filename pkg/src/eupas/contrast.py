"""Adversarial contrastive machinery: hard sample generators and InfoNCE.

The conditional-likelihood model scores how well an embedding matrix explains
a row-stochastic similarity matrix: pairwise inner-product logits, row
softmax over the off-diagonal, cross-entropy against the similarity rows.

Two single-step generators perturb the anchors along gradients of that model:
the trickster walks against the log-likelihood gradient to produce hard
negatives at a fixed distance, and the deviation-copy generator first steps
against an InfoNCE gradient and then against a KL gradient so the hard
positive stays semantically close to the anchor. Both use per-row normalized
steps, so every active region moves by exactly the configured amount.
"""

from __future__ import annotations

import dataclasses

import numpy as np
import torch

GRAD_NORM_FLOOR = 1e-12


def _as_square_tensor(matrix, n: int, dtype) -> torch.Tensor:
    out = torch.as_tensor(np.array(matrix, dtype=np.float64), dtype=dtype)
    if out.shape != (n, n):
        raise ValueError(f"similarity must be {n}x{n}, got {tuple(out.shape)}")
    return out


@dataclasses.dataclass(frozen=True)
class AdvConfig:
    psi: float = 0.5  # deviation-copy step size per stage
    epsilon: float = 1.0  # trickster displacement
    tau: float = 4.0  # InfoNCE temperature
    alpha: float = 0.5  # weight of the negative-pair loss in the combination
    sim_temp: float = 1.0  # temperature of the conditional-likelihood softmax

    def __post_init__(self):
        if self.psi <= 0 or self.epsilon <= 0 or self.tau <= 0 or self.sim_temp <= 0:
            raise ValueError("psi, epsilon, tau, and sim_temp must be positive")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")


@dataclasses.dataclass
class ProjectionHeads:
    """Independent affine maps applied to the two generated branches."""

    pos_weight: torch.Tensor
    pos_bias: torch.Tensor
    neg_weight: torch.Tensor
    neg_bias: torch.Tensor

    def project_pos(self, x: torch.Tensor) -> torch.Tensor:
        return x @ self.pos_weight.T + self.pos_bias

    def project_neg(self, x: torch.Tensor) -> torch.Tensor:
        return x @ self.neg_weight.T + self.neg_bias

    def named_tensors(self):
        yield "heads.pos_weight", self.pos_weight
        yield "heads.pos_bias", self.pos_bias
        yield "heads.neg_weight", self.neg_weight
        yield "heads.neg_bias", self.neg_bias


def init_projection_heads(dim: int, seed: int) -> ProjectionHeads:
    gen = torch.Generator().manual_seed(seed)
    bound = (1.0 / dim) ** 0.5

    def u(*shape):
        t = torch.empty(*shape, dtype=torch.float64)
        t.uniform_(-bound, bound, generator=gen)
        return t

    return ProjectionHeads(
        pos_weight=u(dim, dim),
        pos_bias=u(dim),
        neg_weight=u(dim, dim),
        neg_bias=u(dim),
    )


def project_heads(
    x_pos: torch.Tensor, x_neg: torch.Tensor, heads: ProjectionHeads
) -> tuple[torch.Tensor, torch.Tensor]:
    """Affine-project the positive and negative branches independently."""
    return heads.project_pos(x_pos), heads.project_neg(x_neg)


def _offdiagonal(m: torch.Tensor) -> torch.Tensor:
    """Drop the diagonal, giving an (N, N-1) row-major view of a square matrix."""
    n = m.shape[0]
    mask = ~torch.eye(n, dtype=torch.bool)
    return m[mask].reshape(n, n - 1)


def _row_log_distributions(x: torch.Tensor, sim_temp: float) -> torch.Tensor:
    """Log of the model's per-region distribution over the other regions, (N, N-1)."""
    logits = _offdiagonal(x @ x.T / sim_temp)
    return torch.log_softmax(logits, dim=1)


def conditional_log_likelihood(
    x: torch.Tensor, similarity, sim_temp: float = 1.0
) -> torch.Tensor:
    """Cross-entropy fit of the embedding model to a row-stochastic similarity.

    Always <= 0; returns 0 for a single region (no off-diagonal support).
    """
    n = x.shape[0]
    if n <= 1:
        return torch.zeros((), dtype=x.dtype)
    target = _as_square_tensor(similarity, n, x.dtype)
    return (_offdiagonal(target) * _row_log_distributions(x, sim_temp)).sum()


def row_distribution_kl(
    x: torch.Tensor, reference_log_dist: torch.Tensor, sim_temp: float
) -> torch.Tensor:
    """KL(model rows of x || reference rows), summed over regions."""
    log_p = _row_log_distributions(x, sim_temp)
    return (torch.exp(log_p) * (log_p - reference_log_dist)).sum()


def normalized_step(base: torch.Tensor, gradient: torch.Tensor, step: float) -> torch.Tensor:
    """Move each row of ``base`` by exactly ``step`` against its gradient row.

    Rows whose gradient norm is below the floor pass through unchanged, and
    the output depends on the gradient's direction only.
    """
    norms = torch.linalg.norm(gradient, dim=1, keepdim=True)
    active = norms.squeeze(1) >= GRAD_NORM_FLOOR
    out = base.clone()
    out[active] = base[active] - step * gradient[active] / norms[active]
    return out


def trickster(anchor: torch.Tensor, similarity, config: AdvConfig) -> torch.Tensor:
    """Hard negatives: a fixed-size step against the conditional-likelihood gradient."""
    x = anchor.detach().clone().requires_grad_(True)
    value = conditional_log_likelihood(x, similarity, config.sim_temp)
    (grad,) = torch.autograd.grad(value, x)
    return normalized_step(anchor.detach(), grad, config.epsilon)


def devcopy(
    anchor: torch.Tensor,
    augmented: torch.Tensor,
    negatives: torch.Tensor,
    similarities,
    config: AdvConfig,
) -> torch.Tensor:
    """Hard positives via two normalized gradient steps.

    Stage 1 steps against the gradient of the anchor-vs-augmented InfoNCE
    over the negative pool. Stage 2 steps against the gradient of the KL
    divergence between the perturbed and the anchor row distributions,
    accumulated once per relation's similarity matrix, pulling the sample
    back toward the anchor's semantics.
    """
    base = anchor.detach()
    x = base.clone().requires_grad_(True)
    pool = x if negatives is anchor else negatives.detach()
    cont = infonce_neg(x, augmented.detach(), pool, tau=config.tau)
    (v,) = torch.autograd.grad(cont, x)
    nudged = normalized_step(base, v, config.psi)

    n = base.shape[0]
    reference = _row_log_distributions(base, config.sim_temp).detach()
    y = nudged.clone().requires_grad_(True)
    kl = torch.zeros((), dtype=base.dtype)
    for sim in similarities:
        # the model's row distributions do not depend on the similarity values,
        # so each relation contributes one identically-shaped KL term
        _as_square_tensor(sim, n, base.dtype)
        kl = kl + row_distribution_kl(y, reference, config.sim_temp)
    (omega,) = torch.autograd.grad(kl, y)
    return normalized_step(nudged, omega, config.psi)


def _cosine_matrix(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Pairwise row cosines; pairs involving a zero row are defined as 0."""
    na = torch.linalg.norm(a, dim=1)
    nb = torch.linalg.norm(b, dim=1)
    denom = na.unsqueeze(1) * nb.unsqueeze(0)
    safe = torch.where(denom > 0, denom, torch.ones_like(denom))
    return torch.where(denom > 0, (a @ b.T) / safe, torch.zeros_like(denom))


def _cosine_rows(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    na = torch.linalg.norm(a, dim=1)
    nb = torch.linalg.norm(b, dim=1)
    denom = na * nb
    safe = torch.where(denom > 0, denom, torch.ones_like(denom))
    return torch.where(denom > 0, (a * b).sum(dim=1) / safe, torch.zeros_like(denom))


def infonce_pos(
    anchor: torch.Tensor,
    positive: torch.Tensor,
    negatives: torch.Tensor,
    tau: float,
    extra_negatives: torch.Tensor | None = None,
    exclude_self: bool = True,
) -> torch.Tensor:
    """Temperature-scaled cosine InfoNCE, summed over regions (lower is better).

    ``negatives`` is a pool matrix; when it is index-aligned with the anchors
    and ``exclude_self`` is set, region i skips pool row i. An optional
    per-region ``extra_negatives`` row (the trickster sample) extends the
    pool. Negative terms are accumulated in sorted order, so the value does
    not depend on the pool's row ordering.
    """
    num_terms = torch.exp(_cosine_rows(anchor, positive) / tau)
    pool_terms = torch.exp(_cosine_matrix(anchor, negatives) / tau)
    if exclude_self and negatives.shape[0] == anchor.shape[0]:
        pool_terms = pool_terms * (1.0 - torch.eye(anchor.shape[0], dtype=anchor.dtype))
    if extra_negatives is not None:
        extra = torch.exp(_cosine_rows(anchor, extra_negatives) / tau)
        pool_terms = torch.cat([pool_terms, extra.unsqueeze(1)], dim=1)
    sorted_terms, _ = torch.sort(pool_terms, dim=1)
    denominators = num_terms + sorted_terms.sum(dim=1)
    return -(torch.log(num_terms / denominators)).sum()


def infonce_neg(
    anchor: torch.Tensor,
    augmented: torch.Tensor,
    negatives: torch.Tensor,
    tau: float,
    extra_negatives: torch.Tensor | None = None,
    exclude_self: bool = True,
) -> torch.Tensor:
    """Anchor-vs-augmented alignment repelled by the pool; same form as
    :func:`infonce_pos` with the augmented view in the numerator."""
    return infonce_pos(anchor, augmented, negatives, tau, extra_negatives, exclude_self)


def acl_loss(l_neg: torch.Tensor, l_pos: torch.Tensor, alpha: float) -> torch.Tensor:
    """Convex combination of the negative- and positive-pair losses."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    return alpha * l_neg + (1.0 - alpha) * l_pos
