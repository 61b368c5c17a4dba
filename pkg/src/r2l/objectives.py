"""Training objectives and sample selection for both training stages."""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F

from r2l.worldgen import NEGATIVE_RADIUS, POSITIVE_RADIUS

MARGIN = 0.5
TEMPERATURE = 0.07
NUM_NEGATIVES = 10


def lazy_triplet_loss(query: torch.Tensor, positive: torch.Tensor, negatives: torch.Tensor,
                      margin: float = MARGIN, mode: str = "hardest") -> torch.Tensor:
    """Hinge on Euclidean distances, one negative selected per query.

    ``mode="hardest"`` uses the closest negative. ``mode="literal"`` uses the
    farthest one, as the formula is sometimes written.

    Shapes: query/positive ``(D,)`` or ``(B, D)``, negatives ``(J, D)`` or ``(B, J, D)``.
    Batched inputs return the mean over the batch.
    """
    if margin <= 0:
        raise ValueError("margin must be > 0")
    if negatives.shape[-2] < 1:
        raise ValueError("need at least one negative")
    d_pos = torch.linalg.vector_norm(query - positive, dim=-1)
    d_neg = torch.linalg.vector_norm(query.unsqueeze(-2) - negatives, dim=-1)
    if mode == "hardest":
        pick = d_neg.min(dim=-1).values
    elif mode == "literal":
        pick = d_neg.max(dim=-1).values
    else:
        raise ValueError(f"unknown triplet mode {mode!r}")
    return F.relu(margin + d_pos - pick).mean()


def info_nce_from_similarities(sim: torch.Tensor, tau: float = TEMPERATURE) -> torch.Tensor:
    """Cross-entropy of each row against its diagonal entry, logits ``sim / tau``."""
    if tau <= 0:
        raise ValueError("temperature must be > 0")
    logits = sim / tau
    logits = logits - logits.max(dim=1, keepdim=True).values.detach()
    log_norm = torch.log(torch.exp(logits).sum(dim=1))
    return (log_norm - torch.diagonal(logits)).mean()


def info_nce(anchor: torch.Tensor, other: torch.Tensor, tau: float = TEMPERATURE) -> torch.Tensor:
    """Anchor rows against every row of ``other``; matching rows are positives."""
    return info_nce_from_similarities(anchor @ other.T, tau)


def infonce_loss(ra_loc, li_loc, ra_glob, li_glob, tau: float = TEMPERATURE,
                 symmetric: bool = False) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Local and global InfoNCE with the radar descriptors as anchors.

    A head passed as ``None`` contributes zero. ``symmetric`` averages the
    loss with its transpose (LiDAR as anchor).
    """
    def head(ra, li):
        if ra is None:
            return None
        loss = info_nce(ra, li, tau)
        if symmetric:
            loss = 0.5 * (loss + info_nce(li, ra, tau))
        return loss

    l_loc, l_glob = head(ra_loc, li_loc), head(ra_glob, li_glob)
    ref = l_loc if l_loc is not None else l_glob
    zero = torch.zeros((), dtype=ref.dtype)
    l_loc = zero if l_loc is None else l_loc
    l_glob = zero if l_glob is None else l_glob
    return l_loc, l_glob, l_loc + l_glob


def mse_loss(*pairs: tuple[torch.Tensor | None, torch.Tensor | None]) -> torch.Tensor:
    """Squared Euclidean distance between paired rows, averaged over pairs and heads."""
    terms = [((a - b) ** 2).sum(-1).mean() for a, b in pairs if a is not None]
    if not terms:
        raise ValueError("no descriptor heads given")
    return torch.stack(terms).mean()


def _distances(positions: np.ndarray, i: int) -> np.ndarray:
    return np.linalg.norm(positions - positions[i], axis=1)


def sample_positive(query: int, positions: np.ndarray, rng: np.random.Generator,
                    radius: float = POSITIVE_RADIUS) -> int:
    """Uniform draw among the other samples within ``radius`` of the query."""
    d = _distances(positions, query)
    cand = np.flatnonzero(d < radius)
    cand = cand[cand != query]
    if len(cand) == 0:
        raise ValueError(f"sample {query} has no positive within {radius} m")
    return int(cand[rng.integers(len(cand))])


def mine_hard_negatives(query: int, cache: np.ndarray, positions: np.ndarray, J: int = NUM_NEGATIVES,
                        pool_size: int = 200, rng: np.random.Generator | None = None,
                        radius: float = NEGATIVE_RADIUS) -> np.ndarray:
    """The ``J`` most query-similar samples from a random pool of far-away candidates.

    Candidates lie strictly beyond ``radius`` of the query pose; similarity
    is the inner product of cached descriptors. Ties go to the lower index.
    """
    cand = np.flatnonzero(_distances(positions, query) > radius)
    if len(cand) < J:
        raise ValueError(f"only {len(cand)} candidates beyond {radius} m, need {J}")
    rng = rng if rng is not None else np.random.default_rng(0)
    if len(cand) > pool_size:
        cand = np.sort(rng.choice(cand, size=pool_size, replace=False))
    sims = cache[cand].astype(np.float64) @ cache[query].astype(np.float64)
    order = np.lexsort((cand, -sims))
    return cand[order[:J]]


def far_apart_batches(positions: np.ndarray, order: np.ndarray, batch_size: int,
                      min_dist: float = NEGATIVE_RADIUS) -> list[np.ndarray]:
    """Greedy batches whose members are pairwise more than ``min_dist`` apart.

    Contrastive batches treat every non-matching row as a negative, so two
    places within the positive radius must not share a batch. Items that fit
    no open batch start a new one; the trailing partial batches are kept.
    """
    batches: list[list[int]] = []
    for i in order:
        for b in batches:
            if len(b) < batch_size and np.all(np.linalg.norm(positions[b] - positions[i], axis=1) > min_dist):
                b.append(int(i))
                break
        else:
            batches.append([int(i)])
    return [np.array(b) for b in batches]
