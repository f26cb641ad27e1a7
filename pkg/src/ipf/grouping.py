"""Greedy cosine-similarity grouping of instance features into prompt tokens.

The scan is order-dependent, so callers fix the canonical ordering (frame
ascending, score descending) before grouping; identical inputs always give
identical groups. Zero-norm vectors (padding) are excluded via the ``valid``
flag and the zero-similarity convention keeps them from matching anything.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .boxes import InstanceFeature


@dataclass
class InstanceGroup:
    """One group from the greedy scan; aggregate is the channel-wise mean."""

    seed_index: int
    member_indices: list[int]
    aggregate: np.ndarray


@dataclass
class InstancePromptSet:
    """V x D prompt matrix; rows at and beyond ``valid_count`` are zero."""

    tokens: np.ndarray
    valid_count: int
    threshold: float = 0.9


def cosine_similarity(u: np.ndarray, v: np.ndarray) -> float:
    """u.v / (|u||v|), defined as 0 when either norm is 0."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    nu = np.linalg.norm(u)
    nv = np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        return 0.0
    return float(np.dot(u, v) / (nu * nv))


def canonical_order(features: list[InstanceFeature]) -> list[InstanceFeature]:
    """Frame ascending, then box score descending; stable for ties."""
    return sorted(features, key=lambda f: (f.frame, -f.box.score))


def group_instances(features: list[InstanceFeature], threshold: float = 0.9) -> list[InstanceGroup]:
    """Iterative seed-scan grouping over the valid features.

    Repeatedly takes the first ungrouped instance as a seed and collects
    every remaining ungrouped instance whose similarity to the seed strictly
    exceeds the threshold; instances matching no seed end up as singleton
    groups. ``member_indices`` refer to positions in the input list, whose
    order the caller has already fixed.
    """
    ungrouped = [i for i, f in enumerate(features) if f.valid]
    groups: list[InstanceGroup] = []
    while ungrouped:
        seed = ungrouped[0]
        seed_vec = features[seed].vector
        members = [seed]
        rest = []
        for j in ungrouped[1:]:
            if cosine_similarity(seed_vec, features[j].vector) > threshold:
                members.append(j)
            else:
                rest.append(j)
        ungrouped = rest
        aggregate = aggregate_group([features[i].vector for i in members])
        groups.append(InstanceGroup(seed_index=seed, member_indices=members, aggregate=aggregate))
    return groups


def aggregate_group(members: list[np.ndarray]) -> np.ndarray:
    """Channel-wise arithmetic mean of the member vectors, no renormalization."""
    if not members:
        raise ValueError("cannot aggregate an empty group")
    return np.mean(np.stack([np.asarray(m, dtype=np.float64) for m in members]), axis=0)


def build_prompt_set(
    groups: list[InstanceGroup],
    v_max: int,
    d_model: int,
    threshold: float = 0.9,
) -> InstancePromptSet:
    """Stack group aggregates into a V x D matrix, zero-padded to ``v_max``.

    Aggregates fill rows in group-creation order; groups beyond ``v_max``
    are dropped, later-created first.
    """
    if v_max < 1:
        raise ValueError(f"v_max must be at least 1, got {v_max}")
    tokens = np.zeros((v_max, d_model), dtype=np.float64)
    kept = groups[:v_max]
    for row, group in enumerate(kept):
        if group.aggregate.shape != (d_model,):
            raise ValueError(
                f"group aggregate has dimension {group.aggregate.shape[0]}, expected {d_model}"
            )
        tokens[row] = group.aggregate
    return InstancePromptSet(tokens=tokens, valid_count=len(kept), threshold=threshold)
