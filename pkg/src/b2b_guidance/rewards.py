"""Object-generation and attribute-binding rewards over attention maps.

All arithmetic is float64. Each reward has a matching ``*_cotangent``
function returning the derivative of the reward with respect to the
attention map(s) it reads; ``reward_cotangent`` assembles them for a whole
layout so the guidance module can chain them through the attention layer.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Mapping, Sequence, Tuple

import numpy as np

from b2b_guidance.attention import AttentionStack
from b2b_guidance.errors import ContractViolation
from b2b_guidance.layout import GridMask, LayoutSpec

IOU_EPS = 1e-8
KL_EPS = 1e-10


@dataclass(frozen=True)
class RewardWeights:
    """Weights of the reward terms.

    ``mainbox`` and ``outbox`` are 1 in the plain object reward; ablations
    switch a term off by zeroing its weight.
    """

    lambda_iou: float = 0.01
    lambda_a: float = 0.001
    mainbox: float = 1.0
    outbox: float = 1.0

    def __post_init__(self):
        for name in ("lambda_iou", "lambda_a", "mainbox", "outbox"):
            value = getattr(self, name)
            if not np.isfinite(value) or value < 0:
                raise ContractViolation(f"{name} must be finite and >= 0, got {value}")


@dataclass(frozen=True)
class ObjectTerms:
    mainbox: float
    outbox: float
    iou: float
    total: float


@dataclass(frozen=True)
class AttributeTerms:
    kl: float
    total: float


@dataclass(frozen=True)
class RewardReport:
    objects: Tuple[ObjectTerms, ...]
    attributes: Tuple[AttributeTerms, ...]
    grand_total: float

    @property
    def mainbox(self) -> float:
        return float(sum(o.mainbox for o in self.objects))

    @property
    def outbox(self) -> float:
        return float(sum(o.outbox for o in self.objects))

    @property
    def iou(self) -> float:
        return float(sum(o.iou for o in self.objects))

    @property
    def kl(self) -> float:
        return float(sum(a.kl for a in self.attributes))

    def to_dict(self) -> dict:
        return {
            "objects": [vars(o).copy() for o in self.objects],
            "attributes": [vars(a).copy() for a in self.attributes],
            "grand_total": self.grand_total,
        }


@dataclass(frozen=True)
class ObjectMasks:
    """Main-box mask and frozen sliding masks of one object."""

    inbox: GridMask
    sliding: Tuple[GridMask, ...]


def _check_shape(map_: np.ndarray, mask: GridMask) -> np.ndarray:
    map_ = np.asarray(map_, dtype=np.float64)
    if map_.shape != mask.shape:
        raise ContractViolation(f"map shape {map_.shape} does not match mask shape {mask.shape}")
    return map_


def masked_mean(map_: np.ndarray, mask: GridMask) -> float:
    """Mean of the map over set cells; 0 for an empty mask."""
    map_ = _check_shape(map_, mask)
    count = mask.count
    if count == 0:
        return 0.0
    return float(map_[mask.cells].sum() / count)


def masked_mean_cotangent(mask: GridMask) -> np.ndarray:
    count = mask.count
    if count == 0:
        return np.zeros(mask.shape)
    return mask.as_float() / count


def _check_iou_inputs(x: np.ndarray, y: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ContractViolation(f"soft IoU inputs differ in shape: {x.shape} vs {y.shape}")
    if np.any(x < 0) or np.any(y < 0):
        raise ContractViolation("soft IoU inputs must be nonnegative")
    return x, y


def soft_iou(x: np.ndarray, y: np.ndarray) -> float:
    """Sum of elementwise minima over sum of elementwise maxima (plus IOU_EPS)."""
    x, y = _check_iou_inputs(x, y)
    return float(np.minimum(x, y).sum() / (np.maximum(x, y).sum() + IOU_EPS))


def soft_iou_cotangent(x: np.ndarray, y: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Derivatives of soft_iou with respect to x and y; ties split evenly."""
    x, y = _check_iou_inputs(x, y)
    inter = np.minimum(x, y).sum()
    union = np.maximum(x, y).sum() + IOU_EPS
    # share of each cell in the minimum; the rest goes to the maximum
    x_min = np.where(x < y, 1.0, np.where(x == y, 0.5, 0.0))
    x_max = 1.0 - x_min
    d_x = x_min / union - inter / union ** 2 * x_max
    d_y = x_max / union - inter / union ** 2 * x_min
    return d_x, d_y


def _check_object_inputs(map_, inbox, sliding):
    map_ = _check_shape(map_, inbox)
    if len(sliding) == 0:
        raise ContractViolation("object reward needs at least one sliding mask")
    for mask in sliding:
        _check_shape(map_, mask)
    return map_


def object_reward(
    map_: np.ndarray,
    inbox: GridMask,
    sliding: Sequence[GridMask],
    weights: RewardWeights,
) -> Tuple[float, ObjectTerms]:
    """Generation reward of one object: mainbox - outbox + lambda_iou * mean sliding IoU."""
    map_ = _check_object_inputs(map_, inbox, sliding)
    inside = map_ * inbox.as_float()
    mainbox = masked_mean(map_, inbox)
    outbox = masked_mean(map_, inbox.complement())
    iou = float(np.mean([soft_iou(inside, map_ * mask.as_float()) for mask in sliding]))
    total = weights.mainbox * mainbox - weights.outbox * outbox + weights.lambda_iou * iou
    return total, ObjectTerms(mainbox=mainbox, outbox=outbox, iou=iou, total=total)


def object_reward_cotangent(
    map_: np.ndarray,
    inbox: GridMask,
    sliding: Sequence[GridMask],
    weights: RewardWeights,
) -> np.ndarray:
    map_ = _check_object_inputs(map_, inbox, sliding)
    grad = weights.mainbox * masked_mean_cotangent(inbox)
    grad = grad - weights.outbox * masked_mean_cotangent(inbox.complement())
    if weights.lambda_iou:
        m_in = inbox.as_float()
        inside = map_ * m_in
        iou_grad = np.zeros_like(map_)
        # both IoU arguments depend on the same map through their masks
        for mask in sliding:
            m_slide = mask.as_float()
            d_x, d_y = soft_iou_cotangent(inside, map_ * m_slide)
            iou_grad += d_x * m_in + d_y * m_slide
        grad = grad + weights.lambda_iou * iou_grad / len(sliding)
    return grad


def normalize_masked(map_: np.ndarray, mask: GridMask) -> np.ndarray:
    """Distribution over the set cells (row-major), smoothed by KL_EPS."""
    map_ = _check_shape(map_, mask)
    if mask.count == 0:
        raise ContractViolation("cannot normalize over an empty mask")
    kept = map_[mask.cells] + KL_EPS
    return kept / kept.sum()


def kl_divergence(p: np.ndarray, q: np.ndarray) -> float:
    return float(np.sum(p * np.log(p / q)))


def attribute_reward(attr_map: np.ndarray, obj_map: np.ndarray, inbox: GridMask) -> float:
    """Negative KL(attribute || object) over the object's main box."""
    p = normalize_masked(attr_map, inbox)
    q = normalize_masked(obj_map, inbox)
    return -kl_divergence(p, q)


def attribute_reward_cotangent(
    attr_map: np.ndarray, obj_map: np.ndarray, inbox: GridMask
) -> Tuple[np.ndarray, np.ndarray]:
    """Derivatives of attribute_reward with respect to the attribute and object maps."""
    attr_map = _check_shape(attr_map, inbox)
    obj_map = _check_shape(obj_map, inbox)
    p = normalize_masked(attr_map, inbox)
    q = normalize_masked(obj_map, inbox)
    attr_mass = (attr_map[inbox.cells] + KL_EPS).sum()
    obj_mass = (obj_map[inbox.cells] + KL_EPS).sum()
    log_ratio = np.log(p / q)
    kl = float(np.sum(p * log_ratio))

    d_attr = np.zeros(inbox.shape)
    d_obj = np.zeros(inbox.shape)
    # chain rule through the renormalization over the box
    d_attr[inbox.cells] = -(log_ratio - kl) / attr_mass
    d_obj[inbox.cells] = (p / q - 1.0) / obj_mass
    return d_attr, d_obj


def _check_layout_inputs(attn: AttentionStack, layout: LayoutSpec, masks: Mapping[int, ObjectMasks]):
    for i, obj in enumerate(layout.objects):
        if i not in masks:
            raise ContractViolation(f"no masks for object {i}")
        if obj.token_index >= attn.n_tokens:
            raise ContractViolation(f"object {i} token index {obj.token_index} has no attention map")
    for j, attribute in enumerate(layout.attributes):
        if attribute.token_index >= attn.n_tokens:
            raise ContractViolation(f"attribute {j} token index {attribute.token_index} has no attention map")


def total_reward(
    attn: AttentionStack,
    layout: LayoutSpec,
    masks: Mapping[int, ObjectMasks],
    weights: RewardWeights,
) -> RewardReport:
    """Sum of object rewards plus lambda_a times the sum of attribute rewards."""
    _check_layout_inputs(attn, layout, masks)
    objects = []
    for i, obj in enumerate(layout.objects):
        _, terms = object_reward(attn[obj.token_index], masks[i].inbox, masks[i].sliding, weights)
        objects.append(terms)
    attributes = []
    for attribute in layout.attributes:
        parent = layout.objects[attribute.parent_object]
        reward = attribute_reward(
            attn[attribute.token_index], attn[parent.token_index], masks[attribute.parent_object].inbox
        )
        attributes.append(AttributeTerms(kl=-reward, total=reward))

    grand_total = float(sum(o.total for o in objects) + weights.lambda_a * sum(a.total for a in attributes))
    return RewardReport(objects=tuple(objects), attributes=tuple(attributes), grand_total=grand_total)


def reward_cotangent(
    attn: AttentionStack,
    layout: LayoutSpec,
    masks: Mapping[int, ObjectMasks],
    weights: RewardWeights,
) -> Dict[str, np.ndarray]:
    """Per-term derivatives of the grand total with respect to the attention stack.

    Keys are ``object[i]`` and ``attribute[j]``; each value has the shape of
    the whole stack. Summing the values in key order gives the full cotangent.
    """
    _check_layout_inputs(attn, layout, masks)
    terms: Dict[str, np.ndarray] = {}
    for i, obj in enumerate(layout.objects):
        cot = np.zeros(attn.maps.shape)
        cot[obj.token_index] = object_reward_cotangent(
            attn[obj.token_index], masks[i].inbox, masks[i].sliding, weights
        )
        terms[f"object[{i}]"] = cot
    for j, attribute in enumerate(layout.attributes):
        cot = np.zeros(attn.maps.shape)
        # the KL depends on both maps, so both receive a cotangent
        if weights.lambda_a:
            parent = layout.objects[attribute.parent_object]
            d_attr, d_obj = attribute_reward_cotangent(
                attn[attribute.token_index], attn[parent.token_index], masks[attribute.parent_object].inbox
            )
            cot[attribute.token_index] += weights.lambda_a * d_attr
            cot[parent.token_index] += weights.lambda_a * d_obj
        terms[f"attribute[{j}]"] = cot
    return terms
