"""
Metric learning losses: multi-similarity pair mining, the multi-similarity loss, the
query-combination triplet loss and the weighted total objective.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from typing import NamedTuple, TypeVar

import torch
import torch.nn.functional as F
from torch import Tensor

from qdavpr.config import LocalLossConfig, LossWeights

logger = logging.getLogger(__name__)

####################################################################################################
### Types
####################################################################################################


@dataclass
class TripletIndices:
    """
    Mined pairs of one batch.

    ``anchor_pos[i]``/``positives[i]`` and ``anchor_neg[i]``/``negatives[i]`` are parallel
    index lists into the batch.
    """

    anchor_pos: Tensor
    positives: Tensor
    anchor_neg: Tensor
    negatives: Tensor
    batch_size: int

    @property
    def is_empty(self) -> bool:
        return self.anchor_pos.numel() == 0 and self.anchor_neg.numel() == 0

    def positive_mask(self) -> Tensor:
        return _pair_mask(self.anchor_pos, self.positives, self.batch_size)

    def negative_mask(self) -> Tensor:
        return _pair_mask(self.anchor_neg, self.negatives, self.batch_size)

    def unique_anchors(self) -> Tensor:
        """Ascending anchors owning at least one kept positive and one kept negative."""
        has_both = self.positive_mask().any(dim=1) & self.negative_mask().any(dim=1)
        return has_both.nonzero(as_tuple=True)[0]

    def grouped(self) -> dict[int, tuple[list[int], list[int]]]:
        """Positives and negatives per unique anchor."""
        pos_mask, neg_mask = self.positive_mask(), self.negative_mask()
        return {
            int(r): (
                pos_mask[r].nonzero(as_tuple=True)[0].tolist(),
                neg_mask[r].nonzero(as_tuple=True)[0].tolist(),
            )
            for r in self.unique_anchors()
        }


def _pair_mask(anchors: Tensor, others: Tensor, batch_size: int) -> Tensor:
    mask = torch.zeros(batch_size, batch_size, dtype=torch.bool, device=anchors.device)
    mask[anchors, others] = True
    return mask


T = TypeVar("T", float, Tensor)


class LossParts(NamedTuple):
    ms: Tensor
    local: Tensor
    adv_q: Tensor
    adv_x: Tensor


@dataclass(frozen=True)
class LossRecord:
    ms: float
    local: float
    adv_q: float
    adv_x: float
    total: float

    def as_dict(self) -> dict[str, float]:
        return asdict(self)


####################################################################################################
### Mining
####################################################################################################


def mine_triplets(descriptors: Tensor, labels: Tensor, *, epsilon: float = 0.1) -> TripletIndices:
    """Multi-similarity mining on the dot product similarity of unit descriptors."""
    with torch.no_grad():
        sim = descriptors @ descriptors.T
    return mine_from_similarity(sim, labels, epsilon=epsilon)


def mine_from_similarity(sim: Tensor, labels: Tensor, *, epsilon: float = 0.1) -> TripletIndices:
    """
    Keep positive ``j`` of anchor ``i`` if ``sim[i, j] < max_neg sim[i, k] + epsilon`` and
    negative ``k`` if ``sim[i, k] > min_pos sim[i, j] - epsilon``.
    """
    batch = labels.shape[0]
    same = labels[:, None] == labels[None, :]
    eye = torch.eye(batch, dtype=torch.bool, device=labels.device)
    pos_mask = same & ~eye
    neg_mask = ~same

    # -inf and +inf rows (no negatives / no positives) keep nothing
    hardest_neg = sim.masked_fill(~neg_mask, float("-inf")).amax(dim=1, keepdim=True)
    easiest_pos = sim.masked_fill(~pos_mask, float("inf")).amin(dim=1, keepdim=True)
    keep_pos = pos_mask & (sim < hardest_neg + epsilon)
    keep_neg = neg_mask & (sim > easiest_pos - epsilon)

    anchor_pos, positives = keep_pos.nonzero(as_tuple=True)
    anchor_neg, negatives = keep_neg.nonzero(as_tuple=True)
    return TripletIndices(
        anchor_pos=anchor_pos,
        positives=positives,
        anchor_neg=anchor_neg,
        negatives=negatives,
        batch_size=batch,
    )


####################################################################################################
### Losses
####################################################################################################


def ms_loss(
    descriptors: Tensor,
    labels: Tensor,
    weights: LossWeights | None = None,
    *,
    indices: TripletIndices | None = None,
) -> Tensor:
    """Multi-similarity loss over the mined pairs, averaged over the batch."""
    weights = weights or LossWeights()
    if indices is None:
        indices = mine_triplets(descriptors, labels, epsilon=weights.miner_epsilon)
    if indices.is_empty:
        return _graph_zero(descriptors)

    sim = descriptors @ descriptors.T
    alpha, beta, base = weights.ms_alpha, weights.ms_beta, weights.ms_base
    pos_term = _log_one_plus_sum_exp(-alpha * (sim - base), indices.positive_mask()) / alpha
    neg_term = _log_one_plus_sum_exp(beta * (sim - base), indices.negative_mask()) / beta
    return (pos_term + neg_term).mean()


def _log_one_plus_sum_exp(logits: Tensor, mask: Tensor) -> Tensor:
    """Row wise ``log(1 + sum_{mask} exp(logits))`` computed stably."""
    masked = torch.where(mask, logits, torch.full_like(logits, float("-inf")))
    zeros = logits.new_zeros(logits.shape[0], 1)
    return torch.logsumexp(torch.cat([zeros, masked], dim=1), dim=1)


def local_triplet_loss(
    descriptors: Tensor,
    combinations: Tensor,
    labels: Tensor,
    config: LocalLossConfig | None = None,
    *,
    indices: TripletIndices | None = None,
    epsilon: float = 0.1,
) -> Tensor:
    """
    Query-combination triplet loss.

    Per unique anchor ``r``: the hard negative pool holds the ``G`` negatives with the most
    similar global descriptors, per combination ``i`` the positive (negative) score is the
    best same index dot product over the positives (pool), the ``H`` combinations with the
    highest positive scores contribute the hinge ``max(0, alpha - s_pos + s_neg)``.

    Parameters
    ----------
    descriptors : Tensor
        Global descriptors ``B x D``.
    combinations : Tensor
        Row normalized query combinations ``B x N_c x d``.
    labels : Tensor
        Place labels ``B``.
    config : LocalLossConfig
        ``alpha``, ``G`` and ``H``. ``G`` and ``H`` clamp to the available counts.
    indices : TripletIndices, optional
        Precomputed mining result, mined from ``descriptors`` if omitted.
    """
    config = config or LocalLossConfig()
    if indices is None:
        indices = mine_triplets(descriptors, labels, epsilon=epsilon)

    anchors = indices.unique_anchors()
    if anchors.numel() == 0:
        return _graph_zero(combinations)

    batch, n_comb = combinations.shape[:2]
    pos_mask = indices.positive_mask()[anchors]
    neg_mask = indices.negative_mask()[anchors]

    with torch.no_grad():
        global_sim = descriptors[anchors] @ descriptors.T
        scores = global_sim.masked_fill(~neg_mask, float("-inf"))
        order = torch.sort(scores, dim=1, descending=True, stable=True).indices
        ranks = torch.empty_like(order)
        ranks.scatter_(1, order, torch.arange(batch, device=order.device).expand_as(order))
        pool_size = neg_mask.sum(dim=1).clamp(max=config.hard_negatives)
        hard_mask = neg_mask & (ranks < pool_size[:, None])

    comb_sim = torch.einsum("rid,bid->rbi", combinations[anchors], combinations)
    s_pos = comb_sim.masked_fill(~pos_mask[:, :, None], float("-inf")).amax(dim=1)
    s_neg = comb_sim.masked_fill(~hard_mask[:, :, None], float("-inf")).amax(dim=1)

    top = min(config.top_combinations, n_comb)
    selected = torch.sort(s_pos.detach(), dim=1, descending=True, stable=True).indices[:, :top]
    hinge = F.relu(config.alpha - s_pos.gather(1, selected) + s_neg.gather(1, selected))
    return hinge.mean(dim=1).mean()


def total_loss(parts: LossParts | tuple[T, T, T, T], weights: LossWeights) -> T:
    """``ms + w_local * local + w_adv_q * adv_q + w_adv_x * adv_x``."""
    ms, local, adv_q, adv_x = parts
    return ms + weights.local * local + weights.adv_q * adv_q + weights.adv_x * adv_x


def _graph_zero(reference: Tensor) -> Tensor:
    # zero valued but attached to the graph, so backward yields zero gradients
    return reference.sum() * 0.0
