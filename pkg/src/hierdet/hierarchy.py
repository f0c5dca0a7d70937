"""Class hierarchy model, proposal routing, and two-stage inference.

The base predictor's detections are produced first and never depend on
any novel-category state; proposals it does not consume are grouped by
their argmax base score and handed to per-group novel heads.  That
ordering is what preserves base-category output exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import TYPE_CHECKING

import numpy as np

from . import heads as heads_mod
from .detect import (Detection, PostProcessConfig, canonical_order, decode_deltas,
                     postprocess)
from .errors import ConfigError, ValidationError

if TYPE_CHECKING:  # pragma: no cover
    from .dataio import FeatureDataset

BACKGROUND = "background"


@dataclass
class ClassHierarchy:
    """Ordered base categories plus disjoint novel subsets per parent.

    `subsets` has one list per base category followed by the background
    subset; subsets may be empty.
    """

    base_categories: list
    subsets: list = field(default_factory=list)

    def __post_init__(self):
        if not self.subsets:
            self.subsets = [[] for _ in range(len(self.base_categories) + 1)]
        if len(self.subsets) != len(self.base_categories) + 1:
            raise ValidationError(
                f"expected {len(self.base_categories) + 1} subsets, "
                f"got {len(self.subsets)}")
        if len(set(self.base_categories)) != len(self.base_categories):
            raise ValidationError("duplicate base category name")
        if BACKGROUND in self.base_categories:
            raise ValidationError(f"{BACKGROUND!r} is reserved")
        seen: set = set()
        for names in self.subsets:
            for name in names:
                if name in seen:
                    raise ValidationError(
                        f"novel category {name!r} assigned to two parents")
                if name in self.base_categories or name == BACKGROUND:
                    raise ValidationError(
                        f"novel category {name!r} collides with a base name")
                seen.add(name)

    @classmethod
    def from_parent_map(cls, base_categories, parent_map: dict) -> "ClassHierarchy":
        """Build from {novel_name: base_name_or_'background'} in insertion order."""
        base_categories = list(base_categories)
        subsets: list = [[] for _ in range(len(base_categories) + 1)]
        index = {name: i for i, name in enumerate(base_categories)}
        for novel, parent in parent_map.items():
            if parent == BACKGROUND:
                subsets[-1].append(novel)
            elif parent in index:
                subsets[index[parent]].append(novel)
            else:
                raise ValidationError(f"unknown parent name {parent!r}")
        return cls(base_categories, subsets)

    def parent_map(self) -> dict:
        out: dict = {}
        for i, names in enumerate(self.subsets):
            parent = self.parent_name(i)
            for name in names:
                out[name] = parent
        return out

    def parent_name(self, index: int) -> str:
        return BACKGROUND if index == len(self.base_categories) else self.base_categories[index]

    @property
    def num_base(self) -> int:
        return len(self.base_categories)

    def novel_categories(self) -> list:
        return [name for names in self.subsets for name in names]

    def emitting_base_indices(self) -> list:
        """Base categories emitted by stage 1: those without child classes."""
        return [i for i in range(self.num_base) if not self.subsets[i]]

    def named_groups(self) -> list:
        """(group key, parent index, child names) for subsets that need a head."""
        return [(self.parent_name(i), i, list(names))
                for i, names in enumerate(self.subsets) if names]


@dataclass
class RoutedProposals:
    """Stage-1 output plus the grouping of leftover proposals.

    `groups` maps a parent name (or "background") to routed record
    indices; `consumed` are records that produced at least one surviving
    base detection and `discarded` are leftovers whose argmax base
    category has no child classes to refine.
    """

    base_detections: list
    consumed: np.ndarray
    groups: dict
    discarded: np.ndarray


def _require_base_outputs(ds, hierarchy: ClassHierarchy | None = None):
    if not ds.has_base_outputs or ds.base_scores is None:
        raise ValueError("records are missing base predictor outputs")
    if hierarchy is not None and ds.num_base != hierarchy.num_base:
        raise ValueError(
            f"dataset carries {ds.num_base} base categories, hierarchy has "
            f"{hierarchy.num_base}")


def route_proposals(ds, hierarchy: ClassHierarchy,
                    post_cfg: PostProcessConfig = PostProcessConfig()) -> RoutedProposals:
    """Run stage-1 base post-processing, then group the leftovers.

    Stage 1 post-processes only the emitting base categories (those with
    no children).  Remaining proposals go to the group of their argmax
    base score: background always routes, a parent with children routes
    to that parent's group, and a childless base category discards.
    """
    _require_base_outputs(ds, hierarchy)
    emitting = hierarchy.emitting_base_indices()
    n = ds.n_records
    if emitting:
        scores = ds.base_scores[:, emitting].astype(np.float64)
        boxes = ds.base_boxes[:, emitting, :].astype(np.float64)
        names = [hierarchy.base_categories[i] for i in emitting]
        base_dets, consumed = postprocess(ds.image_ids, scores, boxes, names, post_cfg)
        base_dets = canonical_order(base_dets)
    else:
        base_dets, consumed = [], np.empty(0, dtype=np.int64)

    remaining = np.setdiff1d(np.arange(n), consumed, assume_unique=False)
    argmax = np.argmax(ds.base_scores.astype(np.float64), axis=1)
    groups: dict = {BACKGROUND: []}
    for i, _, _ in hierarchy.named_groups():
        groups.setdefault(i, [])
    discarded = []
    background_index = hierarchy.num_base
    has_children = {i for i in range(hierarchy.num_base) if hierarchy.subsets[i]}
    for idx in remaining:
        a = int(argmax[idx])
        if a == background_index:
            groups[BACKGROUND].append(int(idx))
        elif a in has_children:
            groups[hierarchy.base_categories[a]].append(int(idx))
        else:
            discarded.append(int(idx))
    groups = {key: np.asarray(v, dtype=np.int64) for key, v in groups.items()}
    return RoutedProposals(base_dets, consumed,
                           groups, np.asarray(discarded, dtype=np.int64))


def base_only_inference(ds, base_categories,
                        post_cfg: PostProcessConfig = PostProcessConfig()) -> list:
    """Stage-1 post-processing over every base category, canonical order."""
    _require_base_outputs(ds)
    if len(base_categories) != ds.num_base:
        raise ValueError(f"expected {ds.num_base} base category names, "
                         f"got {len(base_categories)}")
    dets, _ = postprocess(ds.image_ids,
                          ds.base_scores[:, :ds.num_base].astype(np.float64),
                          ds.base_boxes.astype(np.float64),
                          list(base_categories), post_cfg)
    return canonical_order(dets)


def hierarchical_inference(ds, hierarchy: ClassHierarchy, novel_heads: dict,
                           post_cfg: PostProcessConfig = PostProcessConfig(),
                           emit_parent: bool = False) -> list:
    """Two-stage inference: base detections plus per-group novel detections.

    Every group with child categories needs an entry in `novel_heads`
    keyed by the parent name ("background" for the background group).
    Group heads score their children plus a last parent/background slot;
    child boxes are decoded against the proposal box, and the parent
    category is emitted only when `emit_parent` is set (its box is the
    base predictor's refined box for that parent).  Per-image top-k is
    applied within each post-processing call independently.
    """
    routed = route_proposals(ds, hierarchy, post_cfg)
    detections = list(routed.base_detections)
    for key, parent_idx, children in hierarchy.named_groups():
        head = novel_heads.get(key)
        if head is None:
            raise ConfigError(f"no head supplied for group {key!r}")
        if head.num_categories != len(children):
            raise ConfigError(
                f"head for group {key!r} predicts {head.num_categories} "
                f"categories, hierarchy lists {len(children)}")
        idxs = routed.groups.get(key, np.empty(0, dtype=np.int64))
        if idxs.size == 0:
            continue
        probs, deltas = heads_mod.forward(head, ds.features[idxs])
        proposals = ds.proposal_boxes[idxs].astype(np.float64)
        boxes = np.stack([decode_deltas(deltas[:, 4 * c:4 * c + 4], proposals)
                          for c in range(len(children))], axis=1)
        scores = probs[:, :len(children)]
        names = list(children)
        if emit_parent and key != BACKGROUND:
            parent_boxes = ds.base_boxes[idxs, parent_idx, :].astype(np.float64)
            boxes = np.concatenate([boxes, parent_boxes[:, None, :]], axis=1)
            scores = np.concatenate([scores, probs[:, -1:]], axis=1)
            names.append(key)
        group_dets, _ = postprocess(ds.image_ids[idxs], scores, boxes, names, post_cfg)
        detections.extend(group_dets)
    return canonical_order(detections)


def assignment_fractions(ds, num_base: int | None = None) -> dict:
    """Argmax-assignment fractions per labeled category.

    Returns {category_name: (B+1,) fractions} over the base categories
    plus background (last).  Rows sum to 1 exactly up to division.
    """
    _require_base_outputs(ds)
    if ds.labels is None:
        raise ValueError("records are unlabeled")
    num_base = ds.num_base if num_base is None else num_base
    argmax = np.argmax(ds.base_scores.astype(np.float64), axis=1)
    out: dict = {}
    for idx, name in enumerate(ds.category_names):
        rows = np.flatnonzero(ds.labels == idx)
        if rows.size == 0:
            raise ValidationError(f"category {name!r} has zero records")
        counts = np.bincount(argmax[rows], minlength=num_base + 1)
        out[name] = counts / rows.size
    return out


def auto_assign(ds, base_categories, frequency_threshold: float) -> ClassHierarchy:
    """Assign each labeled category to its most frequent argmax target.

    A category goes to a base class only when that class is the most
    frequent target overall and its frequency reaches the threshold;
    otherwise it goes to background.  Frequency ties prefer background and
    then the lowest base index.
    """
    if not 0.0 <= frequency_threshold <= 1.0:
        raise ValueError(f"frequency_threshold must be in [0, 1], "
                         f"got {frequency_threshold}")
    base_categories = list(base_categories)
    if len(base_categories) != ds.num_base:
        raise ValueError(f"expected {ds.num_base} base category names, "
                         f"got {len(base_categories)}")
    fractions = assignment_fractions(ds)
    parent_map: dict = {}
    bg = len(base_categories)
    for name in ds.category_names:
        freq = fractions[name]
        top = float(freq.max())
        if freq[bg] == top:
            parent_map[name] = BACKGROUND
            continue
        best = int(np.argmax(freq[:bg]))
        parent_map[name] = base_categories[best] if freq[best] >= frequency_threshold \
            else BACKGROUND
    return ClassHierarchy.from_parent_map(base_categories, parent_map)


@dataclass
class BehaviourTable:
    """Per-category assignment fractions with named columns."""

    columns: list
    rows: dict

    def to_csv(self) -> str:
        lines = ["category," + ",".join(self.columns)]
        for name, values in self.rows.items():
            lines.append(name + "," + ",".join(repr(float(v)) for v in values))
        return "\n".join(lines) + "\n"


def analyze_base_behaviour(ds, base_categories,
                           hierarchy: ClassHierarchy | None = None) -> BehaviourTable:
    """Fractions of argmax assignments per labeled category.

    Without a hierarchy the columns are background plus every base
    category.  With one, parents that have children keep their own column
    and the childless rest collapse into "other_base".
    """
    base_categories = list(base_categories)
    fractions = assignment_fractions(ds, num_base=len(base_categories))
    bg = len(base_categories)
    if hierarchy is None:
        columns = [BACKGROUND] + base_categories
        rows = {name: [float(freq[bg])] + [float(freq[i]) for i in range(bg)]
                for name, freq in fractions.items()}
        return BehaviourTable(columns, rows)
    supers = [i for i in range(hierarchy.num_base) if hierarchy.subsets[i]]
    others = [i for i in range(bg) if i not in supers]
    columns = [BACKGROUND] + [base_categories[i] for i in supers] + ["other_base"]
    rows = {}
    for name, freq in fractions.items():
        rows[name] = ([float(freq[bg])] + [float(freq[i]) for i in supers]
                      + [float(freq[others].sum()) if others else 0.0])
    return BehaviourTable(columns, rows)
