"""File formats for proposal features, hierarchies, and detections, plus
a seeded synthetic-dataset generator for desk-scale experiments.

Dataset files are binary (FSFD v1) because the float payloads dominate
and bit-exact round-trips are part of the determinism contract:

    magic "FSFD" | u32 version | u32 header length | JSON header |
    fixed-size records, each little-endian:
        image_id u32, proposal_box 4xf32, label i32, gt_box 4xf32,
        [base_scores (B+1)xf32, base_boxes 4Bxf32]   (with base outputs)
        feature dxf32

The header JSON carries {feature_dim, num_base, category_names,
num_records, has_labels, has_base_outputs}.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .detect import Detection
from .errors import FormatError, NumericalError, ValidationError
from .hierarchy import BACKGROUND, ClassHierarchy

MAGIC = b"FSFD"
VERSION = 1

# Geometry of the planted base-score model, relative to the configured
# cluster separation s: parent clusters sit ~3s apart, children sit s from
# their parent, and the background pseudo-distance is d*sigma^2 + (2.3s)^2.
SUPER_SEPARATION_FACTOR = 3.0
BG_RADIUS_FACTOR = 2.3
BG_FEATURE_MAX_SCALE = 0.7


@dataclass
class FeatureDataset:
    """Columnar view of one proposal-feature file.

    Arrays keep the on-disk dtypes (f32 payloads, i32 labels) so writing
    and re-reading reproduces them bit-exactly.
    """

    feature_dim: int
    num_base: int
    category_names: list
    has_labels: bool
    has_base_outputs: bool
    image_ids: np.ndarray              # (n,) int64, values fit in u32
    proposal_boxes: np.ndarray         # (n, 4) f32
    labels: Optional[np.ndarray]       # (n,) i32, -1 = background
    gt_boxes: Optional[np.ndarray]     # (n, 4) f32, zeros for background
    base_scores: Optional[np.ndarray]  # (n, B+1) f32
    base_boxes: Optional[np.ndarray]   # (n, B, 4) f32
    features: np.ndarray               # (n, d) f32

    @property
    def n_records(self) -> int:
        return self.features.shape[0]

    def image_id_list(self) -> np.ndarray:
        return np.unique(self.image_ids)

    def subset(self, indices) -> "FeatureDataset":
        indices = np.asarray(indices)
        take = lambda a: None if a is None else a[indices]
        return replace(self, image_ids=self.image_ids[indices],
                       proposal_boxes=self.proposal_boxes[indices],
                       labels=take(self.labels), gt_boxes=take(self.gt_boxes),
                       base_scores=take(self.base_scores),
                       base_boxes=take(self.base_boxes),
                       features=self.features[indices])


def validate_dataset(ds: FeatureDataset) -> None:
    """Check the documented record invariants, raising ValidationError."""
    n = ds.n_records
    if ds.features.shape != (n, ds.feature_dim):
        raise ValidationError(f"features shape {ds.features.shape} does not match "
                              f"feature_dim {ds.feature_dim}")
    if ds.image_ids.shape != (n,) or (ds.image_ids < 0).any() \
            or (ds.image_ids > 0xFFFFFFFF).any():
        raise ValidationError("image ids must fit in an unsigned 32-bit integer")
    boxes = ds.proposal_boxes
    if boxes.shape != (n, 4):
        raise ValidationError(f"proposal boxes shape {boxes.shape} invalid")
    if not ((boxes[:, 2] > boxes[:, 0]) & (boxes[:, 3] > boxes[:, 1])).all():
        raise ValidationError("proposal box with non-positive extent")
    if ds.has_labels:
        if ds.labels is None or ds.gt_boxes is None:
            raise ValidationError("has_labels set but labels/gt boxes missing")
        if (ds.labels < -1).any() or (ds.labels >= len(ds.category_names)).any():
            raise ValidationError("label index out of range")
        fg = ds.labels >= 0
        g = ds.gt_boxes
        if fg.any() and not ((g[fg, 2] > g[fg, 0]) & (g[fg, 3] > g[fg, 1])).all():
            raise ValidationError("ground-truth box with non-positive extent")
        if (~fg).any() and not (g[~fg] == 0).all():
            raise ValidationError("background records must carry all-zero gt boxes")
    if ds.has_base_outputs:
        if ds.base_scores is None or ds.base_boxes is None:
            raise ValidationError("has_base_outputs set but base outputs missing")
        if ds.base_scores.shape != (n, ds.num_base + 1):
            raise ValidationError(f"base scores shape {ds.base_scores.shape} invalid")
        if ds.base_boxes.shape != (n, ds.num_base, 4):
            raise ValidationError(f"base boxes shape {ds.base_boxes.shape} invalid")
        sums = ds.base_scores.astype(np.float64).sum(axis=1)
        if (ds.base_scores < 0).any() or (np.abs(sums - 1.0) > 1e-4).any():
            raise ValidationError("base scores must be nonnegative and sum to 1")


def _record_dtype(feature_dim: int, num_base: int, has_base_outputs: bool) -> np.dtype:
    fields = [("image_id", "<u4"), ("proposal_box", "<f4", (4,)),
              ("label", "<i4"), ("gt_box", "<f4", (4,))]
    if has_base_outputs:
        fields += [("base_scores", "<f4", (num_base + 1,)),
                   ("base_boxes", "<f4", (4 * num_base,))]
    fields += [("feature", "<f4", (feature_dim,))]
    return np.dtype(fields)


def write_dataset(ds: FeatureDataset, path) -> None:
    validate_dataset(ds)
    n = ds.n_records
    header = {"feature_dim": int(ds.feature_dim), "num_base": int(ds.num_base),
              "category_names": list(ds.category_names), "num_records": int(n),
              "has_labels": bool(ds.has_labels),
              "has_base_outputs": bool(ds.has_base_outputs)}
    hbytes = json.dumps(header, separators=(",", ":")).encode("utf-8")
    arr = np.zeros(n, dtype=_record_dtype(ds.feature_dim, ds.num_base,
                                          ds.has_base_outputs))
    arr["image_id"] = ds.image_ids
    arr["proposal_box"] = ds.proposal_boxes
    arr["label"] = ds.labels if ds.has_labels else np.full(n, -1, dtype=np.int32)
    arr["gt_box"] = ds.gt_boxes if ds.has_labels else 0.0
    if ds.has_base_outputs:
        arr["base_scores"] = ds.base_scores
        arr["base_boxes"] = ds.base_boxes.reshape(n, 4 * ds.num_base)
    arr["feature"] = ds.features
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<I", len(hbytes)))
        f.write(hbytes)
        f.write(arr.tobytes())


def read_dataset(path) -> FeatureDataset:
    data = open(path, "rb").read()
    if len(data) < 4 or data[:4] != MAGIC:
        raise FormatError(f"bad magic in dataset file {path!s}", offset=0)
    if len(data) < 12:
        raise FormatError("truncated fixed header", offset=4)
    version = struct.unpack_from("<I", data, 4)[0]
    if version != VERSION:
        raise FormatError(f"unsupported dataset version {version}", offset=4)
    hlen = struct.unpack_from("<I", data, 8)[0]
    if len(data) < 12 + hlen:
        raise FormatError("truncated JSON header", offset=12)
    try:
        header = json.loads(data[12:12 + hlen].decode("utf-8"))
        feature_dim = int(header["feature_dim"])
        num_base = int(header["num_base"])
        names = list(header["category_names"])
        n = int(header["num_records"])
        has_labels = bool(header["has_labels"])
        has_base = bool(header["has_base_outputs"])
    except (ValueError, KeyError, UnicodeDecodeError) as exc:
        raise FormatError(f"unreadable dataset header: {exc}", offset=12) from exc
    if feature_dim < 1 or num_base < 0 or n < 0:
        raise FormatError("nonsensical dataset header dimensions", offset=12)
    dtype = _record_dtype(feature_dim, num_base, has_base)
    start = 12 + hlen
    payload = len(data) - start
    if payload != n * dtype.itemsize:
        bad_record = min(payload // dtype.itemsize, max(n - 1, 0))
        raise FormatError(
            f"payload holds {payload} bytes but header promises {n} records "
            f"of {dtype.itemsize} bytes; record {bad_record} is incomplete",
            offset=start + bad_record * dtype.itemsize)
    arr = np.frombuffer(data, dtype=dtype, count=n, offset=start)
    ds = FeatureDataset(
        feature_dim=feature_dim, num_base=num_base, category_names=names,
        has_labels=has_labels, has_base_outputs=has_base,
        image_ids=arr["image_id"].astype(np.int64),
        proposal_boxes=arr["proposal_box"].copy(),
        labels=arr["label"].copy() if has_labels else None,
        gt_boxes=arr["gt_box"].copy() if has_labels else None,
        base_scores=arr["base_scores"].copy() if has_base else None,
        base_boxes=arr["base_boxes"].copy().reshape(n, num_base, 4) if has_base else None,
        features=arr["feature"].copy().reshape(n, feature_dim))
    validate_dataset(ds)
    return ds


def write_hierarchy(hierarchy: ClassHierarchy, path) -> None:
    payload = {"base": list(hierarchy.base_categories),
               "novel": hierarchy.parent_map()}
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2)
        f.write("\n")


def read_hierarchy(path) -> ClassHierarchy:
    text = open(path, "r", encoding="utf-8").read()

    def reject_duplicates(pairs):
        keys = [k for k, _ in pairs]
        for key in keys:
            if keys.count(key) > 1:
                raise ValidationError(
                    f"novel category {key!r} assigned to two parents")
        return dict(pairs)

    try:
        payload = json.loads(text, object_pairs_hook=reject_duplicates)
    except json.JSONDecodeError as exc:
        raise FormatError(f"unreadable hierarchy file: {exc}", offset=exc.pos) from exc
    if not isinstance(payload, dict) or "base" not in payload or "novel" not in payload:
        raise ValidationError("hierarchy file must carry 'base' and 'novel' keys")
    return ClassHierarchy.from_parent_map(payload["base"], payload["novel"])


def write_detections(detections, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for det in detections:
            f.write(json.dumps({"image_id": int(det.image_id),
                                "category": det.category,
                                "score": float(det.score),
                                "box": [float(v) for v in det.box]},
                               separators=(",", ":")))
            f.write("\n")


def read_detections(path) -> list:
    detections = []
    offset = 0
    for line in open(path, "rb").read().splitlines(keepends=True):
        stripped = line.strip()
        if stripped:
            try:
                obj = json.loads(stripped.decode("utf-8"))
                detections.append(Detection(
                    image_id=int(obj["image_id"]), category=str(obj["category"]),
                    score=float(obj["score"]),
                    box=tuple(float(v) for v in obj["box"])))
            except (ValueError, KeyError, TypeError) as exc:
                raise FormatError(f"unreadable detection line: {exc}",
                                  offset=offset) from exc
        offset += len(line)
    return detections


@dataclass(frozen=True)
class SyntheticConfig:
    """Knobs for the seeded synthetic feature generator.

    Category feature means are placed at pairwise distance >= the
    configured separation; each object contributes `proposals_per_object`
    jittered proposals around one ground-truth box on its own image.  With
    `num_base` > 0 the generator also plants a base-predictor model whose
    argmax assignments follow a known hierarchy, so routing and
    auto-assignment tests have ground truth.
    """

    num_categories: int
    shots_per_category: int
    feature_dim: int
    cluster_separation: float
    within_cluster_std: float
    image_size: float = 640.0
    proposals_per_object: int = 4
    background_proposals_per_image: int = 2
    seed: int = 0
    num_base: int = 0
    child_ratio: float = 0.5
    childless_base: int = 0

    def __post_init__(self):
        if self.num_categories < 1 or self.shots_per_category < 1 \
                or self.feature_dim < 1 or self.proposals_per_object < 1:
            raise ValueError("all generator counts must be >= 1")
        if self.background_proposals_per_image < 0 or self.num_base < 0:
            raise ValueError("background/base counts must be >= 0")
        if self.cluster_separation <= 0 or self.within_cluster_std <= 0:
            raise ValueError("separation and noise std must be positive")
        if self.image_size <= 0:
            raise ValueError("image_size must be positive")
        if not 0.0 <= self.child_ratio <= 1.0:
            raise ValueError("child_ratio must be in [0, 1]")
        if not 0 <= self.childless_base <= self.num_base:
            raise ValueError("childless_base must be in [0, num_base]")


@dataclass
class PlantedTruth:
    """The parameters the generator committed to, for oracle tests."""

    category_names: list
    category_means: np.ndarray
    base_categories: list
    base_means: Optional[np.ndarray]
    parent_map: dict
    hierarchy: Optional[ClassHierarchy]
    temperature_sq: float
    bg_distance_sq: float


class _PlantedModel:
    def __init__(self, cfg: SyntheticConfig, rng: np.random.Generator):
        d = cfg.feature_dim
        s = cfg.cluster_separation
        names = [f"class_{i:02d}" for i in range(cfg.num_categories)]
        base_names = [f"super_{i}" for i in range(cfg.num_base)]
        parenting = cfg.num_base - cfg.childless_base
        num_children = int(round(cfg.child_ratio * cfg.num_categories)) \
            if parenting > 0 else 0

        root_count = cfg.num_base + (cfg.num_categories - num_children)
        scale = SUPER_SEPARATION_FACTOR * s / np.sqrt(2.0 * d)
        roots = rng.normal(0.0, scale, size=(root_count, d))
        base_means = roots[:cfg.num_base]
        means = np.zeros((cfg.num_categories, d))
        parent_map: dict = {}
        for i in range(cfg.num_categories):
            if i < num_children:
                parent = i % parenting
                offset = rng.normal(size=d)
                offset *= s / np.linalg.norm(offset)
                means[i] = base_means[parent] + offset
                parent_map[names[i]] = base_names[parent]
            else:
                means[i] = roots[cfg.num_base + (i - num_children)]
                parent_map[names[i]] = BACKGROUND

        # Enforce the pairwise-separation contract by a single global rescale.
        if cfg.num_categories > 1:
            diff = means[:, None, :] - means[None, :, :]
            dists = np.sqrt((diff ** 2).sum(-1))
            min_dist = dists[np.triu_indices(cfg.num_categories, k=1)].min()
            if min_dist <= 0:
                raise NumericalError("degenerate planted means, change the seed")
            if min_dist < s:
                factor = (s / min_dist) * (1.0 + 1e-9)
                means *= factor
                base_means = base_means * factor
                s = s * factor

        self.cfg = cfg
        self.names = names
        self.base_names = base_names
        self.means = means
        self.base_means = base_means if cfg.num_base else None
        self.parent_map = parent_map
        self.parent_index = {names[i]: (base_names.index(parent_map[names[i]])
                                        if parent_map[names[i]] != BACKGROUND else -1)
                             for i in range(cfg.num_categories)} if cfg.num_base else {}
        self.temperature_sq = s * s
        self.bg_distance_sq = d * cfg.within_cluster_std ** 2 + (BG_RADIUS_FACTOR * s) ** 2
        self.hierarchy = ClassHierarchy.from_parent_map(base_names, parent_map) \
            if cfg.num_base else None

    def base_score_rows(self, features: np.ndarray) -> np.ndarray:
        """Planted post-softmax base scores, renormalized in f32."""
        x = features.astype(np.float64)
        d2 = ((x[:, None, :] - self.base_means[None, :, :]) ** 2).sum(-1)
        logits = np.concatenate(
            [-d2, np.full((x.shape[0], 1), -self.bg_distance_sq)], axis=1)
        logits /= 2.0 * self.temperature_sq
        logits -= logits.max(axis=1, keepdims=True)
        probs = np.exp(logits)
        probs /= probs.sum(axis=1, keepdims=True)
        probs32 = probs.astype(np.float32)
        return (probs32.astype(np.float64)
                / probs32.astype(np.float64).sum(axis=1, keepdims=True)
                ).astype(np.float32)

    def truth(self) -> PlantedTruth:
        return PlantedTruth(
            category_names=list(self.names), category_means=self.means.copy(),
            base_categories=list(self.base_names),
            base_means=None if self.base_means is None else self.base_means.copy(),
            parent_map=dict(self.parent_map), hierarchy=self.hierarchy,
            temperature_sq=self.temperature_sq, bg_distance_sq=self.bg_distance_sq)


def _jitter_box(rng, box, shift_frac, scale_std, bound):
    x1, y1, x2, y2 = box
    w, h = x2 - x1, y2 - y1
    cx = x1 + 0.5 * w + rng.normal(0.0, shift_frac * w)
    cy = y1 + 0.5 * h + rng.normal(0.0, shift_frac * h)
    w = w * np.exp(rng.normal(0.0, scale_std))
    h = h * np.exp(rng.normal(0.0, scale_std))
    out = np.array([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h])
    out = np.clip(out, 0.0, bound)
    if out[2] <= out[0] or out[3] <= out[1]:  # clipped away; fall back to input
        out = np.clip(np.asarray(box, dtype=np.float64), 0.0, bound)
    return out


def _sample_split(cfg: SyntheticConfig, model: _PlantedModel,
                  rng: np.random.Generator, shots: int) -> FeatureDataset:
    d, sigma, w_img = cfg.feature_dim, cfg.within_cluster_std, cfg.image_size
    image_ids, prop_boxes, labels, gt_boxes, feats = [], [], [], [], []
    image = 0
    for c in range(cfg.num_categories):
        for _ in range(shots):
            cx, cy = rng.uniform(0.3 * w_img, 0.7 * w_img, size=2)
            bw, bh = rng.uniform(0.15 * w_img, 0.4 * w_img, size=2)
            gt = np.array([cx - 0.5 * bw, cy - 0.5 * bh, cx + 0.5 * bw, cy + 0.5 * bh])
            object_feats = []
            for _ in range(cfg.proposals_per_object):
                image_ids.append(image)
                prop_boxes.append(_jitter_box(rng, gt, 0.08, 0.12, w_img))
                labels.append(c)
                gt_boxes.append(gt)
                object_feats.append(model.means[c] + rng.normal(0.0, sigma, size=d))
                feats.append(object_feats[-1])
            for q in range(cfg.background_proposals_per_image):
                x1 = rng.uniform(0.0, 0.7 * w_img)
                y1 = rng.uniform(0.0, 0.7 * w_img)
                bw2, bh2 = rng.uniform(0.1 * w_img, 0.3 * w_img, size=2)
                image_ids.append(image)
                prop_boxes.append(np.array([x1, y1, x1 + bw2, y1 + bh2]))
                labels.append(-1)
                gt_boxes.append(np.zeros(4))
                if q < len(object_feats):
                    # A poorly-localized proposal still covering the object:
                    # same pooled feature, background label.  These conflicted
                    # duplicates keep the classification problem bounded away
                    # from linear separability.
                    feats.append(object_feats[q])
                else:
                    # Weak partial-object evidence off in the background.
                    k = int(rng.integers(cfg.num_categories))
                    gamma = rng.uniform(0.0, BG_FEATURE_MAX_SCALE)
                    feats.append(gamma * model.means[k] + rng.normal(0.0, sigma, size=d))
            image += 1

    n = len(image_ids)
    features = np.asarray(feats, dtype=np.float32)
    labels_arr = np.asarray(labels, dtype=np.int32)
    prop_arr = np.asarray(prop_boxes, dtype=np.float32)
    gt_arr = np.asarray(gt_boxes, dtype=np.float32)
    base_scores = base_boxes = None
    if cfg.num_base:
        base_scores = model.base_score_rows(features)
        base_boxes = np.zeros((n, cfg.num_base, 4), dtype=np.float32)
        for i in range(n):
            parent = model.parent_index[model.names[labels_arr[i]]] \
                if labels_arr[i] >= 0 else -1
            for j in range(cfg.num_base):
                anchor = gt_boxes[i] if j == parent else prop_boxes[i]
                base_boxes[i, j] = _jitter_box(rng, anchor, 0.01, 0.01, w_img)
    return FeatureDataset(
        feature_dim=d, num_base=cfg.num_base, category_names=list(model.names),
        has_labels=True, has_base_outputs=cfg.num_base > 0,
        image_ids=np.asarray(image_ids, dtype=np.int64),
        proposal_boxes=prop_arr, labels=labels_arr, gt_boxes=gt_arr,
        base_scores=base_scores, base_boxes=base_boxes, features=features)


def generate_synthetic(cfg: SyntheticConfig):
    """Deterministically generate (train, test, planted truth) from cfg."""
    root = np.random.SeedSequence(cfg.seed)
    ss_model, ss_train, ss_test = root.spawn(3)
    model = _PlantedModel(cfg, np.random.default_rng(ss_model))
    train = _sample_split(cfg, model, np.random.default_rng(ss_train),
                          cfg.shots_per_category)
    test = _sample_split(cfg, model, np.random.default_rng(ss_test),
                         cfg.shots_per_category)
    return train, test, model.truth()


def acceptance_config(seed: int = 42) -> SyntheticConfig:
    """The fixed desk-scale benchmark configuration used by the test suite."""
    return SyntheticConfig(
        num_categories=20, shots_per_category=10, feature_dim=256,
        cluster_separation=6.0, within_cluster_std=1.0,
        proposals_per_object=4, background_proposals_per_image=4,
        seed=seed, num_base=4, child_ratio=0.5, childless_base=2)
