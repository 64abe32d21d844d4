"""Loss kernel for incremental segmentation training on raw score matrices.

All losses consume N x K logits plus a split of the class map into old
(previous tasks) and new (current task) classes. Two probability
augmentations drive the family:

* background absorbing the new classes: used when scoring labels that can
  only name old classes (memory replay), so probability mass placed on new
  classes still counts toward a background-labeled pixel;
* background absorbing the old classes: used when scoring current-task
  labels, so mass on old classes is not punished at background pixels.

Values and analytic gradients are float64 throughout; aggregated
probabilities are evaluated in log space (log-sum-exp) and every gradient is
validated against central finite differences by `grad_check`.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path
from statistics import fmean

import numpy as np

from .errors import FormatError, ValidationError
from .grid import BACKGROUND, IGNORE, LabelGrid
from .pgm import read_pgm
from .scores import ScoreMatrix, read_scores, softmax_probs

ATOMIC_LOSSES = ("ce_current", "ce_memory", "kd_old", "bce_new", "bce_old", "ce_plain")
COMPOSITE_LOSSES = ("memory_augmented", "bce_replay", "pseudo_replay")


@dataclass(frozen=True)
class LossConfig:
    """Weights of the loss family.

    kd_weight scales the old-class distillation term; positive_weight scales
    the positive (label-matching) half of the binary cross-entropy losses;
    kd_alpha and kd_beta weight the externally supplied distillation scalars
    of the binary-CE replay objective. kd_includes_bg extends the
    distillation sum to the background bucket (the aggregated one), matching
    the common reference behavior; switching it off restricts the sum to the
    old foreground classes.
    """

    kd_weight: float = 0.0
    positive_weight: float = 1.0
    kd_alpha: float = 0.0
    kd_beta: float = 0.0
    kd_includes_bg: bool = True

    def __post_init__(self) -> None:
        if self.kd_weight < 0:
            raise ValidationError("kd_weight must be >= 0")
        if self.positive_weight <= 0:
            raise ValidationError("positive_weight must be > 0")
        if self.kd_alpha < 0 or self.kd_beta < 0:
            raise ValidationError("kd_alpha and kd_beta must be >= 0")

    @classmethod
    def from_mapping(cls, doc: dict) -> "LossConfig":
        return cls(
            kd_weight=float(doc.get("lambda", 0.0)),
            positive_weight=float(doc.get("gamma", 1.0)),
            kd_alpha=float(doc.get("alpha", 0.0)),
            kd_beta=float(doc.get("beta", 0.0)),
            kd_includes_bg=bool(doc.get("kd_includes_bg", True)),
        )

    def to_mapping(self) -> dict:
        return {
            "lambda": self.kd_weight,
            "gamma": self.positive_weight,
            "alpha": self.kd_alpha,
            "beta": self.kd_beta,
            "kd_includes_bg": self.kd_includes_bg,
        }


@dataclass(frozen=True)
class TaskClassLayout:
    old_classes: frozenset[int]
    new_classes: frozenset[int]

    def __post_init__(self) -> None:
        old = frozenset(int(c) for c in self.old_classes)
        new = frozenset(int(c) for c in self.new_classes)
        object.__setattr__(self, "old_classes", old)
        object.__setattr__(self, "new_classes", new)
        if old & new:
            raise ValidationError(f"old and new classes overlap: {sorted(old & new)}")
        for c in old | new:
            if c in (BACKGROUND, IGNORE):
                raise ValidationError(f"reserved class id {c} cannot be old or new")
        if not new:
            raise ValidationError("layout needs at least one new class")


@dataclass(frozen=True)
class LossItem:
    """One batch element: its scores and labels, which side of the batch it
    came from, and optional externally computed per-item scalars (previous
    model scores for distillation; kd/dkd/ac/pod values whose internals are
    produced by other tools)."""

    scores: ScoreMatrix
    labels: LabelGrid | None = None
    source: str = "current"
    prev_scores: ScoreMatrix | None = None
    kd: float | None = None
    dkd: float | None = None
    ac: float | None = None
    pod: float | None = None

    def __post_init__(self) -> None:
        if self.source not in ("current", "memory"):
            raise ValidationError(f"unknown item source {self.source!r}")


def _check_layout(scores: ScoreMatrix, layout: TaskClassLayout) -> None:
    want = layout.old_classes | layout.new_classes | {BACKGROUND}
    if set(scores.class_map) != want:
        raise ValidationError(
            f"score class map {sorted(scores.class_map)} does not cover layout {sorted(want)}"
        )


def _check_prev(prev: ScoreMatrix, layout: TaskClassLayout) -> None:
    want = layout.old_classes | {BACKGROUND}
    if set(prev.class_map) != want:
        raise ValidationError(
            f"previous-model class map {sorted(prev.class_map)} must be old classes plus background"
        )


def _cols(scores: ScoreMatrix, class_ids) -> np.ndarray:
    return np.asarray([scores.column(c) for c in sorted(class_ids)], dtype=np.intp)


def _lse(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=1)
    return m + np.log(np.exp(z - m[:, None]).sum(axis=1))


def _log_bucket_prob(scores: ScoreMatrix, cols: np.ndarray) -> np.ndarray:
    """log of the summed softmax probability over a column bucket, per pixel."""
    return _lse(scores.logits[:, cols]) - _lse(scores.logits)


def probs_bg_absorbing_new(scores: ScoreMatrix, layout: TaskClassLayout) -> np.ndarray:
    """Softmax probabilities reduced to the old classes plus background, with
    the new classes' mass added to the background column.

    Columns are the sorted old class ids followed by background last; rows
    sum to 1.
    """
    _check_layout(scores, layout)
    p = softmax_probs(scores)
    old_cols = _cols(scores, layout.old_classes)
    bucket_cols = _cols(scores, layout.new_classes | {BACKGROUND})
    out = np.empty((scores.n_pixels, len(old_cols) + 1))
    out[:, :-1] = p[:, old_cols]
    out[:, -1] = p[:, bucket_cols].sum(axis=1)
    return out


def probs_bg_absorbing_old(scores: ScoreMatrix, layout: TaskClassLayout) -> np.ndarray:
    """Mirror reduction: new classes plus background, old mass into background."""
    _check_layout(scores, layout)
    p = softmax_probs(scores)
    new_cols = _cols(scores, layout.new_classes)
    bucket_cols = _cols(scores, layout.old_classes | {BACKGROUND})
    out = np.empty((scores.n_pixels, len(new_cols) + 1))
    out[:, :-1] = p[:, new_cols]
    out[:, -1] = p[:, bucket_cols].sum(axis=1)
    return out


def _bucket_ce(
    scores: ScoreMatrix,
    labels: LabelGrid,
    allowed_fg: frozenset[int],
    absorbed_fg: frozenset[int],
) -> tuple[float, np.ndarray]:
    """Cross-entropy where a background label scores the background bucket
    (background plus the absorbed classes). Returns (value, gradient)."""
    if labels.n_pixels != scores.n_pixels:
        raise ValidationError(
            f"labels have {labels.n_pixels} pixels, scores have {scores.n_pixels}"
        )
    y = labels.data
    valid = y != IGNORE
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise ValidationError("every pixel is ignored; loss undefined")
    present = {int(v) for v in np.unique(y[valid])}
    bad = present - allowed_fg - {BACKGROUND}
    if bad:
        raise ValidationError(f"labels contain out-of-contract class ids {sorted(bad)}")

    z = scores.logits
    lse_all = _lse(z)
    col_of = np.full(256, -1, dtype=np.intp)
    for c in allowed_fg:
        col_of[c] = scores.column(c)
    bucket_cols = _cols(scores, absorbed_fg | {BACKGROUND})

    log_q = np.zeros(scores.n_pixels)
    fg_rows = valid & (y != BACKGROUND)
    bg_rows = valid & (y == BACKGROUND)
    rows = np.flatnonzero(fg_rows)
    log_q[rows] = z[rows, col_of[y[rows]]] - lse_all[rows]
    if bg_rows.any():
        log_q[bg_rows] = _log_bucket_prob(scores, bucket_cols)[bg_rows]
    value = -float(log_q[valid].sum()) / n_valid

    p = softmax_probs(scores)
    grad = np.zeros_like(z)
    grad[valid] = p[valid]
    grad[rows, col_of[y[rows]]] -= 1.0
    if bg_rows.any():
        bucket = p[np.ix_(np.flatnonzero(bg_rows), bucket_cols)]
        grad[np.ix_(np.flatnonzero(bg_rows), bucket_cols)] -= bucket / bucket.sum(
            axis=1, keepdims=True
        )
    grad /= n_valid
    return value, grad


def ce_current(scores: ScoreMatrix, labels: LabelGrid, layout: TaskClassLayout) -> float:
    """Cross-entropy for current-task labels (new classes and background);
    old-class probability counts toward background."""
    _check_layout(scores, layout)
    value, _ = _bucket_ce(scores, labels, layout.new_classes, layout.old_classes)
    return value


def ce_memory(scores: ScoreMatrix, labels: LabelGrid, layout: TaskClassLayout) -> float:
    """Cross-entropy for replayed memory labels (old classes and background);
    new-class probability counts toward background."""
    _check_layout(scores, layout)
    value, _ = _bucket_ce(scores, labels, layout.old_classes, layout.new_classes)
    return value


def kd_old_classes(
    prev_scores: ScoreMatrix,
    curr_scores: ScoreMatrix,
    layout: TaskClassLayout,
    cfg: LossConfig,
) -> float:
    value, _ = _kd_old_classes(prev_scores, curr_scores, layout, cfg)
    return value


def _kd_old_classes(
    prev_scores: ScoreMatrix,
    curr_scores: ScoreMatrix,
    layout: TaskClassLayout,
    cfg: LossConfig,
) -> tuple[float, np.ndarray]:
    """Distill the previous model's old-class distribution into the current
    model's reduced distribution (new-class mass folded into background).
    Averaged over all pixels; there are no labels and nothing is ignored.
    """
    _check_layout(curr_scores, layout)
    _check_prev(prev_scores, layout)
    if prev_scores.n_pixels != curr_scores.n_pixels:
        raise ValidationError(
            f"previous scores cover {prev_scores.n_pixels} pixels, current {curr_scores.n_pixels}"
        )
    n = curr_scores.n_pixels
    old_sorted = sorted(layout.old_classes)
    p_prev = softmax_probs(prev_scores)
    prev_cols = np.asarray([prev_scores.column(c) for c in old_sorted], dtype=np.intp)
    a_old = p_prev[:, prev_cols]  # weights, constants w.r.t. current logits

    z = curr_scores.logits
    curr_cols = np.asarray([curr_scores.column(c) for c in old_sorted], dtype=np.intp)
    bucket_cols = _cols(curr_scores, layout.new_classes | {BACKGROUND})
    log_old = z[:, curr_cols] - _lse(z)[:, None]
    value = float((a_old * log_old).sum())
    if cfg.kd_includes_bg:
        a_bg = p_prev[:, prev_scores.column(BACKGROUND)]
        value += float((a_bg * _log_bucket_prob(curr_scores, bucket_cols)).sum())
    value = -value / n

    p = softmax_probs(curr_scores)
    weight_total = a_old.sum(axis=1)
    if cfg.kd_includes_bg:
        weight_total = weight_total + a_bg
    grad = p * weight_total[:, None]
    grad[:, curr_cols] -= a_old
    if cfg.kd_includes_bg:
        bucket = p[:, bucket_cols]
        grad[:, bucket_cols] -= (
            a_bg[:, None] * bucket / bucket.sum(axis=1, keepdims=True)
        )
    grad /= n
    return value, grad


def _binary_ce(
    scores: ScoreMatrix,
    labels: LabelGrid,
    layout: TaskClassLayout,
    cfg: LossConfig,
    selected: frozenset[int],
    allowed_fg: frozenset[int],
) -> tuple[float, np.ndarray]:
    """Per-class binary cross-entropy over the selected classes: the positive
    term (weighted by positive_weight) where the label matches the class, the
    log(1 - p) term everywhere else."""
    _check_layout(scores, layout)
    if labels.n_pixels != scores.n_pixels:
        raise ValidationError(
            f"labels have {labels.n_pixels} pixels, scores have {scores.n_pixels}"
        )
    y = labels.data
    valid = y != IGNORE
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise ValidationError("every pixel is ignored; loss undefined")
    present = {int(v) for v in np.unique(y[valid])}
    bad = present - allowed_fg - {BACKGROUND}
    if bad:
        raise ValidationError(f"labels contain out-of-contract class ids {sorted(bad)}")

    z = scores.logits
    p = softmax_probs(scores)
    lse_all = _lse(z)
    gamma = cfg.positive_weight

    value = 0.0
    u = np.zeros((scores.n_pixels, len(scores.class_map)))
    for cls in sorted(selected):
        col = scores.column(cls)
        log_p = z[:, col] - lse_all
        others = np.asarray([j for j in range(scores.n_classes) if j != col], dtype=np.intp)
        log_1m = _lse(z[:, others]) - lse_all  # log(1 - p_col) without cancellation
        pos = valid & (y == cls)
        neg = valid & (y != cls)
        value += gamma * float(log_p[pos].sum()) + float(log_1m[neg].sum())
        one_minus = np.exp(log_1m)
        u[pos, col] += gamma
        u[neg, col] -= p[neg, col] / one_minus[neg]
    value = -value / n_valid

    grad = p * u.sum(axis=1, keepdims=True) - u
    grad[~valid] = 0.0
    grad /= n_valid
    return value, grad


def bce_new_classes(
    scores: ScoreMatrix, labels: LabelGrid, layout: TaskClassLayout, cfg: LossConfig
) -> float:
    """Binary cross-entropy summed over the new classes (current-task data)."""
    value, _ = _binary_ce(scores, labels, layout, cfg, layout.new_classes, layout.new_classes)
    return value


def bce_old_classes(
    scores: ScoreMatrix, labels: LabelGrid, layout: TaskClassLayout, cfg: LossConfig
) -> float:
    """Binary cross-entropy summed over the old classes (memory data)."""
    value, _ = _binary_ce(scores, labels, layout, cfg, layout.old_classes, layout.old_classes)
    return value


def _plain_ce(scores: ScoreMatrix, labels: LabelGrid) -> tuple[float, np.ndarray]:
    """Standard cross-entropy over the full class map, ignore excluded."""
    if labels.n_pixels != scores.n_pixels:
        raise ValidationError(
            f"labels have {labels.n_pixels} pixels, scores have {scores.n_pixels}"
        )
    y = labels.data
    valid = y != IGNORE
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise ValidationError("every pixel is ignored; loss undefined")
    col_of = np.full(256, -1, dtype=np.intp)
    for c in scores.class_map:
        col_of[c] = scores.column(c)
    present = {int(v) for v in np.unique(y[valid])}
    bad = [c for c in present if col_of[c] < 0]
    if bad:
        raise ValidationError(f"labels contain unmapped class ids {sorted(bad)}")

    rows = np.flatnonzero(valid)
    cols = col_of[y[rows]]
    log_p = scores.logits[rows, cols] - _lse(scores.logits)[rows]
    value = -float(log_p.sum()) / n_valid

    grad = np.zeros_like(scores.logits)
    grad[rows] = softmax_probs(scores)[rows]
    grad[rows, cols] -= 1.0
    grad /= n_valid
    return value, grad


def ce_plain(scores: ScoreMatrix, labels: LabelGrid) -> float:
    value, _ = _plain_ce(scores, labels)
    return value


# ---------------------------------------------------------------------------
# composite objectives
# ---------------------------------------------------------------------------


def memory_augmented_objective(
    items: list[LossItem] | tuple[LossItem, ...],
    layout: TaskClassLayout,
    cfg: LossConfig,
) -> float:
    """Current-task cross-entropy, old-class distillation over the whole
    batch (weighted), and memory cross-entropy over the replayed items.

    Each term averages over its own item set; the distillation denominator is
    the combined batch length (items appearing on both sides count twice).
    """
    current = [it for it in items if it.source == "current"]
    stored = [it for it in items if it.source == "memory"]
    if not current:
        raise ValidationError("objective requires at least one current-task item")
    total = fmean(ce_current(it.scores, _req_labels(it), layout) for it in current)
    if cfg.kd_weight > 0:
        kd_terms = []
        for it in items:
            if it.prev_scores is None:
                raise ValidationError("distillation requires previous-model scores per item")
            kd_terms.append(kd_old_classes(it.prev_scores, it.scores, layout, cfg))
        total += cfg.kd_weight * fmean(kd_terms)
    if stored:
        total += fmean(ce_memory(it.scores, _req_labels(it), layout) for it in stored)
    return total


def bce_replay_objective(
    items: list[LossItem] | tuple[LossItem, ...],
    layout: TaskClassLayout,
    cfg: LossConfig,
) -> float:
    """Binary-CE objective with externally supplied distillation scalars:
    kd/dkd averaged over the whole batch (weighted by kd_alpha/kd_beta), the
    new-class binary CE plus the external ac term over current items, and the
    old-class binary CE over memory items."""
    current = [it for it in items if it.source == "current"]
    stored = [it for it in items if it.source == "memory"]
    if not current:
        raise ValidationError("objective requires at least one current-task item")
    for it in items:
        if it.kd is None or it.dkd is None:
            raise ValidationError("every item needs externally computed kd and dkd values")
    for it in current:
        if it.ac is None:
            raise ValidationError("current items need an externally computed ac value")
    total = fmean(cfg.kd_alpha * it.kd + cfg.kd_beta * it.dkd for it in items)
    total += fmean(
        bce_new_classes(it.scores, _req_labels(it), layout, cfg) + it.ac for it in current
    )
    if stored:
        total += fmean(bce_old_classes(it.scores, _req_labels(it), layout, cfg) for it in stored)
    return total


def pseudo_replay_objective(
    items: list[LossItem] | tuple[LossItem, ...],
    cfg: LossConfig,
) -> float:
    """Plain cross-entropy against pseudo-labels plus a weighted external
    feature-distillation scalar, averaged over the concatenated batch
    (current and memory items enter the same mean)."""
    if not items:
        raise ValidationError("objective requires at least one item")
    terms = []
    for it in items:
        if it.pod is None:
            raise ValidationError("every item needs an externally computed pod value")
        terms.append(ce_plain(it.scores, _req_labels(it)) + cfg.kd_weight * it.pod)
    return fmean(terms)


def _req_labels(item: LossItem) -> LabelGrid:
    if item.labels is None:
        raise ValidationError("item is missing its label grid")
    return item.labels


# ---------------------------------------------------------------------------
# gradients and finite-difference validation
# ---------------------------------------------------------------------------


def _valued_grad(
    loss_id: str, item: LossItem, layout: TaskClassLayout, cfg: LossConfig
) -> tuple[float, np.ndarray]:
    if loss_id == "ce_current":
        _check_layout(item.scores, layout)
        return _bucket_ce(item.scores, _req_labels(item), layout.new_classes, layout.old_classes)
    if loss_id == "ce_memory":
        _check_layout(item.scores, layout)
        return _bucket_ce(item.scores, _req_labels(item), layout.old_classes, layout.new_classes)
    if loss_id == "kd_old":
        if item.prev_scores is None:
            raise ValidationError("distillation requires previous-model scores")
        return _kd_old_classes(item.prev_scores, item.scores, layout, cfg)
    if loss_id == "bce_new":
        return _binary_ce(item.scores, _req_labels(item), layout, cfg, layout.new_classes, layout.new_classes)
    if loss_id == "bce_old":
        return _binary_ce(item.scores, _req_labels(item), layout, cfg, layout.old_classes, layout.old_classes)
    if loss_id == "ce_plain":
        return _plain_ce(item.scores, _req_labels(item))
    raise ValidationError(f"unknown loss id {loss_id!r}; expected one of {ATOMIC_LOSSES}")


def loss_value(loss_id: str, item: LossItem, layout: TaskClassLayout, cfg: LossConfig) -> float:
    value, _ = _valued_grad(loss_id, item, layout, cfg)
    return value


def grad_logits(
    loss_id: str, item: LossItem, layout: TaskClassLayout, cfg: LossConfig
) -> np.ndarray:
    """Analytic derivative of the loss with respect to every logit."""
    _, grad = _valued_grad(loss_id, item, layout, cfg)
    if not np.all(np.isfinite(grad)):
        raise ValidationError(f"{loss_id}: non-finite gradient")
    return grad


@dataclass(frozen=True)
class LossCase:
    layout: TaskClassLayout
    cfg: LossConfig
    items: tuple[LossItem, ...]


def load_loss_case(path: str | os.PathLike) -> LossCase:
    """Read a loss-case file: JSON with `layout` ({old, new} class-id lists),
    `config` (lambda, gamma, alpha, beta, kd_includes_bg), and `items`, each
    naming score/label files (paths relative to the case file) plus optional
    prev_scores and external kd/dkd/ac/pod scalars."""
    path = Path(path)
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: cannot read loss case ({exc})") from exc
    try:
        layout = TaskClassLayout(
            old_classes=frozenset(doc["layout"]["old"]),
            new_classes=frozenset(doc["layout"]["new"]),
        )
        cfg = LossConfig.from_mapping(doc.get("config", {}))
        items = []
        for entry in doc["items"]:
            items.append(
                LossItem(
                    scores=read_scores(path.parent / entry["scores"]),
                    labels=(
                        read_pgm(path.parent / entry["labels"]) if "labels" in entry else None
                    ),
                    source=entry.get("source", "current"),
                    prev_scores=(
                        read_scores(path.parent / entry["prev_scores"])
                        if "prev_scores" in entry
                        else None
                    ),
                    kd=entry.get("kd"),
                    dkd=entry.get("dkd"),
                    ac=entry.get("ac"),
                    pod=entry.get("pod"),
                )
            )
    except (KeyError, TypeError) as exc:
        raise FormatError(f"{path}: loss case missing field ({exc})") from exc
    except ValidationError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    if not items:
        raise FormatError(f"{path}: loss case has no items")
    return LossCase(layout=layout, cfg=cfg, items=tuple(items))


@dataclass(frozen=True)
class GradCheckReport:
    loss_id: str
    loss: float
    max_rel_err: float
    coords_checked: int
    step: float
    tol: float
    passed: bool


def grad_check(
    loss_id: str,
    item: LossItem,
    layout: TaskClassLayout,
    cfg: LossConfig,
    *,
    step: float = 1e-5,
    tol: float = 1e-6,
    max_coords: int = 64,
    seed: int = 0,
) -> GradCheckReport:
    """Compare the analytic gradient against central finite differences on a
    seeded sample of coordinates.

    The error is measured relative to the largest gradient magnitude, so
    coordinates whose true derivative is (near) zero are judged on the
    gradient's scale rather than blowing up a ratio of rounding noise.
    """
    if step <= 0:
        raise ValidationError("finite-difference step must be > 0")
    value, grad = _valued_grad(loss_id, item, layout, cfg)
    if not np.all(np.isfinite(grad)):
        raise ValidationError(f"{loss_id}: non-finite gradient")
    n, k = item.scores.logits.shape
    rng = np.random.default_rng(seed)
    total = n * k
    picks = rng.permutation(total)[: min(max_coords, total)]

    def eval_at(z: np.ndarray) -> float:
        shifted = LossItem(
            scores=ScoreMatrix(class_map=item.scores.class_map, logits=z),
            labels=item.labels,
            source=item.source,
            prev_scores=item.prev_scores,
        )
        return loss_value(loss_id, shifted, layout, cfg)

    fd = np.empty(len(picks))
    for idx, flat in enumerate(picks):
        i, j = divmod(int(flat), k)
        z_plus = item.scores.logits.copy()
        z_minus = item.scores.logits.copy()
        z_plus[i, j] += step
        z_minus[i, j] -= step
        fd[idx] = (eval_at(z_plus) - eval_at(z_minus)) / (2.0 * step)

    analytic = grad.reshape(-1)[picks]
    scale = max(float(np.abs(grad).max()), float(np.abs(fd).max()), 1e-300)
    max_rel = float(np.abs(analytic - fd).max() / scale)
    return GradCheckReport(
        loss_id=loss_id,
        loss=value,
        max_rel_err=max_rel,
        coords_checked=len(picks),
        step=step,
        tol=tol,
        passed=bool(np.isfinite(max_rel) and max_rel < tol),
    )
