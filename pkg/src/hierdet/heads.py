"""Linear predictor heads: forward pass, loss, gradients, and curvature.

A head bundles a softmax classifier over C foreground categories plus a
background slot with a per-category box regressor (4 rows per category).
Biases are folded into the weight matrices as a last column applied to a
constant-1 feature augmentation, so the full parameter set flattens to a
single vector for the second-order optimizer.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .detect import encode_deltas
from .errors import ConfigError, FormatError, NumericalError
from .linalg import LinearOperator

WEIGHTS_MAGIC = b"FSHW"
WEIGHTS_VERSION = 1

REGRESSION_KINDS = ("l2", "smooth_l1")


@dataclass(frozen=True)
class LossConfig:
    """Regression flavor and per-term weights of the combined loss."""

    regression: str = "l2"
    smooth_l1_beta: float = 1.0
    cls_weight: float = 1.0
    loc_weight: float = 1.0

    def __post_init__(self):
        if self.regression not in REGRESSION_KINDS:
            raise ValueError(f"regression must be one of {REGRESSION_KINDS}, "
                             f"got {self.regression!r}")
        if self.smooth_l1_beta <= 0:
            raise ValueError(f"smooth_l1_beta must be > 0, got {self.smooth_l1_beta}")
        if self.cls_weight < 0 or self.loc_weight < 0:
            raise ValueError("loss term weights must be nonnegative")


@dataclass
class PredictorHead:
    """Classifier (C+1, d+1) and regressor (4C, d+1) weight blocks."""

    classifier: np.ndarray
    regressor: np.ndarray

    def __post_init__(self):
        self.classifier = np.ascontiguousarray(self.classifier, dtype=np.float64)
        self.regressor = np.ascontiguousarray(self.regressor, dtype=np.float64)
        if self.classifier.ndim != 2 or self.classifier.shape[0] < 2:
            raise ValueError(f"classifier must be (C+1, d+1) with C >= 1, "
                             f"got {self.classifier.shape}")
        c = self.classifier.shape[0] - 1
        if self.regressor.shape != (4 * c, self.classifier.shape[1]):
            raise ValueError(
                f"regressor shape {self.regressor.shape} inconsistent with "
                f"classifier shape {self.classifier.shape}")
        if not (np.isfinite(self.classifier).all() and np.isfinite(self.regressor).all()):
            raise ValueError("head weights must be finite")

    @property
    def num_categories(self) -> int:
        return self.classifier.shape[0] - 1

    @property
    def feature_dim(self) -> int:
        return self.classifier.shape[1] - 1

    @property
    def num_params(self) -> int:
        return self.classifier.size + self.regressor.size

    def copy(self) -> "PredictorHead":
        return PredictorHead(self.classifier.copy(), self.regressor.copy())

    def flat(self) -> np.ndarray:
        """Flatten both blocks, classifier first, row-major."""
        return np.concatenate([self.classifier.ravel(), self.regressor.ravel()])

    def add_flat(self, delta: np.ndarray) -> None:
        """Apply a flat-parameter update in place."""
        delta = np.asarray(delta, dtype=np.float64)
        if delta.shape != (self.num_params,):
            raise ValueError(f"expected delta of shape {(self.num_params,)}, "
                             f"got {delta.shape}")
        ncls = self.classifier.size
        self.classifier += delta[:ncls].reshape(self.classifier.shape)
        self.regressor += delta[ncls:].reshape(self.regressor.shape)

    @classmethod
    def from_flat(cls, num_categories: int, feature_dim: int, w: np.ndarray):
        w = np.asarray(w, dtype=np.float64)
        ncls = (num_categories + 1) * (feature_dim + 1)
        nreg = 4 * num_categories * (feature_dim + 1)
        if w.shape != (ncls + nreg,):
            raise ValueError(f"expected {ncls + nreg} parameters, got {w.shape}")
        return cls(w[:ncls].reshape(num_categories + 1, feature_dim + 1),
                   w[ncls:].reshape(4 * num_categories, feature_dim + 1))


@dataclass
class WarmStart:
    """Rows to copy verbatim over the random initialization.

    `classifier_rows` maps classifier row index -> (d+1,) vector and
    `regressor_blocks` maps category index -> (4, d+1) block.
    """

    classifier_rows: dict = field(default_factory=dict)
    regressor_blocks: dict = field(default_factory=dict)


def init_head(num_categories: int, feature_dim: int, std: float = 0.01,
              seed: int = 0, warm_start: WarmStart | None = None) -> PredictorHead:
    """Draw head weights i.i.d. from N(0, std^2) with a seeded generator."""
    if num_categories < 1:
        raise ValueError(f"num_categories must be >= 1, got {num_categories}")
    if feature_dim < 1:
        raise ValueError(f"feature_dim must be >= 1, got {feature_dim}")
    if std < 0:
        raise ValueError(f"std must be nonnegative, got {std}")
    rng = np.random.default_rng(seed)
    classifier = rng.normal(0.0, std, size=(num_categories + 1, feature_dim + 1))
    regressor = rng.normal(0.0, std, size=(4 * num_categories, feature_dim + 1))
    if warm_start is not None:
        for row, values in warm_start.classifier_rows.items():
            values = np.asarray(values, dtype=np.float64)
            if not 0 <= row <= num_categories or values.shape != (feature_dim + 1,):
                raise ValueError(f"warm-start classifier row {row} has shape "
                                 f"{values.shape}, expected {(feature_dim + 1,)}")
            classifier[row] = values
        for cat, block in warm_start.regressor_blocks.items():
            block = np.asarray(block, dtype=np.float64)
            if not 0 <= cat < num_categories or block.shape != (4, feature_dim + 1):
                raise ValueError(f"warm-start regressor block for category {cat} "
                                 f"has shape {block.shape}, expected {(4, feature_dim + 1)}")
            regressor[4 * cat:4 * cat + 4] = block
    return PredictorHead(classifier, regressor)


def _with_bias(features: np.ndarray) -> np.ndarray:
    return np.concatenate([features, np.ones((features.shape[0], 1))], axis=1)


def forward(head: PredictorHead, features):
    """Class probabilities and raw box deltas for a feature batch.

    Softmax uses max-subtraction, so a logit gap of hundreds stays exact.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != head.feature_dim:
        raise ValueError(f"expected features of shape (n, {head.feature_dim}), "
                         f"got {x.shape}")
    if not np.isfinite(x).all():
        raise NumericalError("non-finite feature value in forward pass")
    xt = _with_bias(x)
    logits = xt @ head.classifier.T
    shifted = logits - logits.max(axis=1, keepdims=True)
    expz = np.exp(shifted)
    probs = expz / expz.sum(axis=1, keepdims=True)
    deltas = xt @ head.regressor.T
    return probs, deltas


class _Prepared:
    """Batch tensors shared by the loss, gradient, and curvature paths."""

    __slots__ = ("xt", "y", "fg_rows", "fg_labels", "targets", "n")

    def __init__(self, head: PredictorHead, batch):
        features = np.asarray(batch.features, dtype=np.float64)
        if features.ndim != 2 or features.shape[0] == 0:
            raise ValueError("batch must contain at least one record")
        if features.shape[1] != head.feature_dim:
            raise ValueError(f"feature width {features.shape[1]} does not match "
                             f"head dimension {head.feature_dim}")
        if not np.isfinite(features).all():
            raise NumericalError("non-finite feature value in batch")
        if batch.labels is None:
            raise ValueError("batch is unlabeled")
        labels = np.asarray(batch.labels)
        if labels.shape != (features.shape[0],):
            raise ValueError("batch labels missing or mis-shaped")
        if (labels < -1).any() or (labels >= head.num_categories).any():
            raise ValueError("label out of range for this head")
        self.n = features.shape[0]
        self.xt = _with_bias(features)
        self.y = np.where(labels < 0, head.num_categories, labels).astype(np.int64)
        self.fg_rows = np.flatnonzero(labels >= 0)
        self.fg_labels = labels[self.fg_rows].astype(np.int64)
        if self.fg_rows.size:
            gt = np.asarray(batch.gt_boxes, dtype=np.float64)[self.fg_rows]
            anchors = np.asarray(batch.proposal_boxes, dtype=np.float64)[self.fg_rows]
            self.targets = encode_deltas(gt, anchors)
        else:
            self.targets = np.zeros((0, 4))


def _cls_terms(head, prep):
    logits = prep.xt @ head.classifier.T
    m = logits.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(logits - m).sum(axis=1))
    loss = float((lse - logits[np.arange(prep.n), prep.y]).sum() / prep.n)
    probs = np.exp(logits - lse[:, None])
    return loss, probs


def _reg_residuals(head, prep):
    """Per-foreground-record (pred - target) for the ground-truth rows."""
    res = np.zeros((prep.fg_rows.size, 4))
    for c in np.unique(prep.fg_labels):
        rows = np.flatnonzero(prep.fg_labels == c)
        xc = prep.xt[prep.fg_rows[rows]]
        res[rows] = xc @ head.regressor[4 * c:4 * c + 4].T - prep.targets[rows]
    return res


def loss(head: PredictorHead, batch, cfg: LossConfig = LossConfig()) -> float:
    """Combined loss cls_weight * L_cls + loc_weight * L_loc."""
    prep = _Prepared(head, batch)
    cls_loss, _ = _cls_terms(head, prep)
    res = _reg_residuals(head, prep)
    if cfg.regression == "l2":
        loc_loss = float((res * res).sum() / prep.n)
    else:
        beta = cfg.smooth_l1_beta
        a = np.abs(res)
        loc_loss = float(np.where(a < beta, 0.5 * a * a / beta, a - 0.5 * beta).sum() / prep.n)
    return cfg.cls_weight * cls_loss + cfg.loc_weight * loc_loss


def loss_and_grad(head: PredictorHead, batch, cfg: LossConfig = LossConfig()):
    """Loss value plus its exact gradient over the flattened weights.

    L_cls averages cross entropy over all N records (background maps to
    the last classifier slot); L_loc averages the regression penalty over
    the same N, with gradient flowing only into the ground-truth
    category's four regressor rows.
    """
    prep = _Prepared(head, batch)
    cls_loss, probs = _cls_terms(head, prep)
    pm = probs.copy()
    pm[np.arange(prep.n), prep.y] -= 1.0
    grad_cls = (cfg.cls_weight / prep.n) * (pm.T @ prep.xt)

    res = _reg_residuals(head, prep)
    grad_reg = np.zeros_like(head.regressor)
    if cfg.regression == "l2":
        loc_loss = float((res * res).sum() / prep.n)
        dres = 2.0 * res
    else:
        beta = cfg.smooth_l1_beta
        a = np.abs(res)
        loc_loss = float(np.where(a < beta, 0.5 * a * a / beta, a - 0.5 * beta).sum() / prep.n)
        dres = np.clip(res / beta, -1.0, 1.0)
    for c in np.unique(prep.fg_labels):
        rows = np.flatnonzero(prep.fg_labels == c)
        xc = prep.xt[prep.fg_rows[rows]]
        grad_reg[4 * c:4 * c + 4] = (cfg.loc_weight / prep.n) * (dres[rows].T @ xc)

    total = cfg.cls_weight * cls_loss + cfg.loc_weight * loc_loss
    return total, np.concatenate([grad_cls.ravel(), grad_reg.ravel()])


def hvp_operator(head: PredictorHead, batch, cfg: LossConfig = LossConfig(),
                 lam: float = 0.0) -> LinearOperator:
    """Exact (H + lam*I) product operator with batch state precomputed.

    The classifier block uses the per-sample softmax Hessian
    diag(p) - p p^T; the regressor block (L2 only) contributes
    (2/N) x (V x)^T into the ground-truth category's rows.  Smooth-L1 has
    no usable second derivative here, so it is rejected; use the SGD
    trainer for that configuration.
    """
    if cfg.regression != "l2":
        raise ConfigError("curvature products require the L2 regression loss; "
                          "train smooth-L1 heads with the SGD baseline")
    if lam < 0:
        raise ValueError(f"lam must be nonnegative, got {lam}")
    prep = _Prepared(head, batch)
    _, probs = _cls_terms(head, prep)
    cshape = head.classifier.shape
    rshape = head.regressor.shape
    ncls = head.classifier.size
    total = ncls + head.regressor.size
    fg_groups = [(int(c), prep.fg_rows[np.flatnonzero(prep.fg_labels == c)])
                 for c in np.unique(prep.fg_labels)]

    def apply(v):
        v = np.asarray(v, dtype=np.float64)
        if v.shape != (total,):
            raise ValueError(f"expected vector of shape {(total,)}, got {v.shape}")
        vc = v[:ncls].reshape(cshape)
        vr = v[ncls:].reshape(rshape)
        u = prep.xt @ vc.T
        pu = probs * u
        a = pu - probs * pu.sum(axis=1, keepdims=True)
        out_cls = (cfg.cls_weight / prep.n) * (a.T @ prep.xt)
        out_reg = np.zeros(rshape)
        for c, rows in fg_groups:
            xc = prep.xt[rows]
            pv = xc @ vr[4 * c:4 * c + 4].T
            out_reg[4 * c:4 * c + 4] = (2.0 * cfg.loc_weight / prep.n) * (pv.T @ xc)
        return np.concatenate([out_cls.ravel(), out_reg.ravel()]) + lam * v

    return LinearOperator(total, apply)


def hessian_vec_product(head: PredictorHead, batch, v, cfg: LossConfig = LossConfig(),
                        lam: float = 0.0) -> np.ndarray:
    """(H + lam*I) @ v for the combined loss at the current weights."""
    return hvp_operator(head, batch, cfg, lam)(v)


def augment(batch, copies: int, noise_std: float, dropout_rate: float, seed: int):
    """Replicate a batch with Gaussian feature noise and inverted dropout.

    Each of the `copies` replicas adds N(0, noise_std^2) noise, then zeroes
    coordinates independently with probability `dropout_rate` and scales
    survivors by 1/(1 - dropout_rate), preserving the feature expectation.
    Labels and boxes are copied unchanged.
    """
    if copies < 1:
        raise ValueError(f"copies must be >= 1, got {copies}")
    if noise_std < 0:
        raise ValueError(f"noise_std must be nonnegative, got {noise_std}")
    if not 0.0 <= dropout_rate < 1.0:
        raise ValueError(f"dropout_rate must be in [0, 1), got {dropout_rate}")
    rng = np.random.default_rng(seed)
    feats = np.asarray(batch.features)
    replicas = []
    for _ in range(copies):
        noisy = feats.astype(np.float64) + rng.normal(0.0, noise_std, size=feats.shape)
        if dropout_rate > 0.0:
            keep = rng.random(feats.shape) >= dropout_rate
            noisy = noisy * keep / (1.0 - dropout_rate)
        replicas.append(noisy.astype(feats.dtype))

    def tile(arr):
        return None if arr is None else np.concatenate([arr] * copies)

    return dataclasses.replace(
        batch,
        image_ids=tile(batch.image_ids),
        proposal_boxes=tile(batch.proposal_boxes),
        labels=tile(batch.labels),
        gt_boxes=tile(batch.gt_boxes),
        base_scores=tile(batch.base_scores),
        base_boxes=tile(batch.base_boxes),
        features=np.concatenate(replicas))


def save_head(head: PredictorHead, path) -> None:
    """Write a head as FSHW v1: magic, version, JSON header, f32 blocks."""
    header = json.dumps({"C": head.num_categories, "d": head.feature_dim},
                        separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(WEIGHTS_MAGIC)
        f.write(struct.pack("<I", WEIGHTS_VERSION))
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        f.write(head.classifier.astype("<f4").tobytes())
        f.write(head.regressor.astype("<f4").tobytes())


def load_head(path) -> PredictorHead:
    """Read an FSHW v1 weights file back into a float64 head."""
    data = open(path, "rb").read()
    if len(data) < 4 or data[:4] != WEIGHTS_MAGIC:
        raise FormatError(f"bad magic in weights file {path!s}", offset=0)
    if len(data) < 12:
        raise FormatError("truncated weights header", offset=4)
    version = struct.unpack_from("<I", data, 4)[0]
    if version != WEIGHTS_VERSION:
        raise FormatError(f"unsupported weights version {version}", offset=4)
    hlen = struct.unpack_from("<I", data, 8)[0]
    if len(data) < 12 + hlen:
        raise FormatError("truncated weights header payload", offset=12)
    try:
        header = json.loads(data[12:12 + hlen].decode("utf-8"))
        c, d = int(header["C"]), int(header["d"])
    except (ValueError, KeyError, UnicodeDecodeError) as exc:
        raise FormatError(f"unreadable weights header: {exc}", offset=12) from exc
    start = 12 + hlen
    expect = ((c + 1) + 4 * c) * (d + 1) * 4
    if len(data) - start != expect:
        raise FormatError(
            f"weights payload has {len(data) - start} bytes, expected {expect}",
            offset=start)
    flat = np.frombuffer(data, dtype="<f4", count=expect // 4, offset=start)
    ncls = (c + 1) * (d + 1)
    return PredictorHead(
        flat[:ncls].astype(np.float64).reshape(c + 1, d + 1),
        flat[ncls:].astype(np.float64).reshape(4 * c, d + 1))
