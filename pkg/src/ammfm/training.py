"""Three-branch multi-label loss, Adam, SWA, augmentation and TTA."""

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import rng as rng_mod
from . import tensor as T
from .data import stack_images
from .errors import ConfigError, ContractError, ValidationError
from .model import BRANCHES, PredictionSet

log = logging.getLogger(__name__)

LOSS_NAMES = {"dermoscopy": "L_derm", "clinical": "L_clic", "fusion": "L_fusion"}


@dataclass
class LossBreakdown:
    L_derm: T.Tensor
    L_clic: T.Tensor
    L_fusion: T.Tensor
    L_total: T.Tensor

    def values(self):
        return {k: getattr(self, k).item() for k in ("L_derm", "L_clic", "L_fusion", "L_total")}


def validate_labels(labels, schema):
    labels = np.asarray(labels)
    if labels.ndim != 2 or labels.shape[1] != len(schema):
        raise ValidationError(f"labels must be (cases, {len(schema)}), got {labels.shape}")
    for ti, task in enumerate(schema):
        col = labels[:, ti]
        bad = np.flatnonzero((col < 0) | (col >= task.n_categories))
        if bad.size:
            j = int(bad[0])
            raise ValidationError(
                f"case {j}, task {task.abbrev}: label {int(col[j])} outside [0, {task.n_categories})"
            )
    return labels.astype(np.int64)


def branch_loss(task_logits, labels):
    """Sum over cases and tasks of cross-entropy; ``task_logits[i]`` is (B, K_i)."""
    total = None
    for ti, z in enumerate(task_logits):
        ce = T.tsum(T.cross_entropy(z, labels[:, ti]))
        total = ce if total is None else T.add(total, ce)
    return total


def total_loss(logits, labels, schema, reduction="sum"):
    """L_total = L_derm + L_clic + L_fusion, each summed over the batch and the tasks.

    ``logits`` maps branch name -> list of per-task logit tensors. With
    ``reduction="mean"`` every branch loss is divided by the batch size.
    """
    labels = validate_labels(labels, schema)
    n = labels.shape[0]
    for branch in BRANCHES:
        for z in logits[branch]:
            if z.shape[0] != n:
                raise ContractError(f"{branch} logits cover {z.shape[0]} cases, labels cover {n}")
    parts = {}
    for branch in BRANCHES:
        loss = branch_loss(logits[branch], labels)
        if reduction == "mean":
            loss = T.scale(loss, 1.0 / n)
        elif reduction != "sum":
            raise ConfigError(f"reduction must be sum or mean, got {reduction!r}")
        parts[LOSS_NAMES[branch]] = loss
    total = T.add(T.add(parts["L_derm"], parts["L_clic"]), parts["L_fusion"])
    return LossBreakdown(L_total=total, **parts)


def loss_from_probs(preds, labels):
    """Eq.-style loss evaluated on stored probabilities (no gradients); returns per-branch floats."""
    labels = np.asarray(labels)
    out = {}
    for branch in BRANCHES:
        s = 0.0
        for ti, p in enumerate(preds.probs[branch]):
            s += float(-np.log(p[np.arange(len(labels)), labels[:, ti]]).sum())
        out[LOSS_NAMES[branch]] = s
    out["L_total"] = out["L_derm"] + out["L_clic"] + out["L_fusion"]
    return out


# ---------------------------------------------------------------- optimiser


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update, in place on ``params`` (name -> Tensor)."""
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name, p in params.items():
        g = grads[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        if lr:
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return params, state


# ---------------------------------------------------------------- SWA


def swa_average(checkpoints):
    """Element-wise arithmetic mean of a list of {name: array} parameter snapshots."""
    if not checkpoints:
        raise ContractError("swa_average needs at least one checkpoint")
    ref = checkpoints[0]
    for i, ck in enumerate(checkpoints[1:], start=1):
        if set(ck) != set(ref):
            raise ContractError(f"checkpoint {i} has different parameter names")
        for k in ref:
            if np.shape(ck[k]) != np.shape(ref[k]):
                raise ContractError(f"checkpoint {i}, parameter {k}: shape {np.shape(ck[k])} vs {np.shape(ref[k])}")
    out = {}
    for k in ref:
        acc = np.zeros_like(np.asarray(ref[k], dtype=float))
        for ck in checkpoints:
            acc += ck[k]
        out[k] = acc / len(checkpoints)
    return out


# ---------------------------------------------------------------- augmentation

AUGMENTATIONS = ("flip", "shift", "scale", "rotate", "brighten")


def _bilinear_scale(img, factor):
    """Zoom an (H, W, C) image about its centre by ``factor``; outside samples are zero."""
    h, w, _ = img.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    ys = (np.arange(h) - cy) / factor + cy
    xs = (np.arange(w) - cx) / factor + cx
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    fy = (ys - y0)[:, None, None]
    fx = (xs - x0)[None, :, None]
    padded = np.pad(img, ((1, 2), (1, 2), (0, 0)))
    yy0 = np.clip(y0 + 1, 0, h + 2)
    xx0 = np.clip(x0 + 1, 0, w + 2)
    yy1 = np.clip(y0 + 2, 0, h + 2)
    xx1 = np.clip(x0 + 2, 0, w + 2)
    a = padded[yy0][:, xx0]
    b = padded[yy0][:, xx1]
    c = padded[yy1][:, xx0]
    d = padded[yy1][:, xx1]
    return (1 - fy) * ((1 - fx) * a + fx * b) + fy * ((1 - fx) * c + fx * d)


def _shift(img, dy, dx):
    out = np.zeros_like(img)
    h, w, _ = img.shape
    ys, yd = (slice(0, h - dy), slice(dy, h)) if dy >= 0 else (slice(-dy, h), slice(0, h + dy))
    xs, xd = (slice(0, w - dx), slice(dx, w)) if dx >= 0 else (slice(-dx, w), slice(0, w + dx))
    out[yd, xd] = img[ys, xs]
    return out


def augment_image(img, rng, enabled, prob=0.5, max_shift=2, scale_range=0.1, brightness=0.1):
    """Randomly apply the enabled transforms (each with probability ``prob``) to one (H, W, C) image."""
    out = img
    draws = rng.random(len(AUGMENTATIONS))
    if "flip" in enabled and draws[0] < prob:
        out = out[:, ::-1] if rng.random() < 0.5 else out[::-1]
    if "shift" in enabled and draws[1] < prob:
        dy, dx = rng.integers(-max_shift, max_shift + 1, size=2)
        out = _shift(out, int(dy), int(dx))
    if "scale" in enabled and draws[2] < prob:
        out = _bilinear_scale(out, 1.0 + rng.uniform(-scale_range, scale_range))
    if "rotate" in enabled and draws[3] < prob:
        out = np.rot90(out, k=int(rng.integers(1, 4)))
    if "brighten" in enabled and draws[4] < prob:
        out = out * (1.0 + rng.uniform(-brightness, brightness))
    return np.ascontiguousarray(out)


def augment_batch(images, rng, enabled):
    if not enabled:
        return images
    return np.stack([augment_image(im, rng, enabled) for im in images])


TTA_TRANSFORMS = {
    "identity": lambda x: x,
    "hflip": lambda x: x[:, :, ::-1],
    "vflip": lambda x: x[:, ::-1],
    "rot90": lambda x: np.rot90(x, 1, axes=(1, 2)),
    "rot180": lambda x: np.rot90(x, 2, axes=(1, 2)),
    "rot270": lambda x: np.rot90(x, 3, axes=(1, 2)),
}
DEFAULT_TTA = ("identity", "hflip", "vflip")


def tta_predict(model, clin_img, derm_img, augmentations=DEFAULT_TTA):
    """Average per-task probabilities over deterministic transforms of both images."""
    augmentations = tuple(augmentations)
    if "identity" not in augmentations:
        raise ContractError("TTA augmentation set must include identity")
    unknown = [a for a in augmentations if a not in TTA_TRANSFORMS]
    if unknown:
        raise ContractError(f"unknown TTA transforms {unknown}")
    clin = np.asarray(clin_img, dtype=float)
    derm = np.asarray(derm_img, dtype=float)
    if clin.ndim == 3:
        clin, derm = clin[None], derm[None]
    runs = [
        model.predict(np.ascontiguousarray(TTA_TRANSFORMS[a](clin)), np.ascontiguousarray(TTA_TRANSFORMS[a](derm)))
        for a in augmentations
    ]
    probs = {}
    for b in BRANCHES:
        probs[b] = [sum(r.probs[b][t] for r in runs) / len(runs) for t in range(len(runs[0].probs[b]))]
    return PredictionSet(probs)


# ---------------------------------------------------------------- fitting


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 8
    learning_rate: float = 1e-3
    swa_window: float = 0.2
    seed: int = 0
    augmentations: tuple = AUGMENTATIONS
    loss_reduction: str = "mean"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if not 0.0 <= self.swa_window <= 1.0:
            raise ConfigError("swa_window must lie in [0, 1]")
        self.augmentations = tuple(self.augmentations)
        bad = [a for a in self.augmentations if a not in AUGMENTATIONS]
        if bad:
            raise ConfigError(f"unknown augmentations {bad}; choose from {AUGMENTATIONS}")

    def swa_epochs(self):
        return int(round(self.swa_window * self.epochs))

    def to_dict(self):
        d = asdict(self)
        d["augmentations"] = list(self.augmentations)
        return d


@dataclass
class FitResult:
    model: object
    trace: list  # per epoch: dict with epoch, L_derm, L_clic, L_fusion, L_total (per-case means)


def fit(model, train_set, config, progress=None):
    """Mini-batch Adam training with seeded shuffling/augmentation and SWA over the final epochs.

    ``train_set`` is a list of CaseRecord or a (clinical, dermoscopy, labels) tuple.
    The model is updated in place and also returned.
    """
    if isinstance(train_set, tuple):
        clin, derm, labels = train_set
    else:
        if not train_set:
            raise ConfigError("training set is empty")
        clin, derm, labels = stack_images(train_set)
    n = len(labels)
    if n == 0:
        raise ConfigError("training set is empty")
    schema = model.config.schema
    labels = validate_labels(labels, schema)
    params = model.parameters()
    state = AdamState()
    n_swa = config.swa_epochs()
    snapshots = []
    trace = []
    for epoch in range(config.epochs):
        order = rng_mod.stream(config.seed, "fit", "shuffle", epoch).permutation(n)
        sums = dict.fromkeys(("L_derm", "L_clic", "L_fusion", "L_total"), 0.0)
        for bi, start in enumerate(range(0, n, config.batch_size)):
            idx = order[start : start + config.batch_size]
            aug = rng_mod.stream(config.seed, "fit", "augment", epoch, bi)
            cb = augment_batch(clin[idx], aug, config.augmentations)
            db = augment_batch(derm[idx], aug, config.augmentations)
            for p in params.values():
                p.zero_grad()
            loss = total_loss(model.logits(cb, db), labels[idx], schema, reduction=config.loss_reduction)
            loss.L_total.backward()
            adam_step(
                params, {k: p.grad for k, p in params.items()}, state, config.learning_rate,
                config.beta1, config.beta2, config.eps,
            )
            scale_back = len(idx) if config.loss_reduction == "mean" else 1
            for k, v in loss.values().items():
                sums[k] += v * scale_back
        row = {"epoch": epoch + 1, **{k: v / n for k, v in sums.items()}}
        trace.append(row)
        if progress:
            progress(row)
        log.debug("epoch %d: %s", epoch + 1, row)
        if n_swa and epoch >= config.epochs - n_swa:
            snapshots.append(model.state_arrays())
    if snapshots:
        model.load_arrays(swa_average(snapshots))
    return FitResult(model, trace)


def write_trace_csv(trace, path):
    with open(path, "w") as fh:
        fh.write("epoch,L_derm,L_clic,L_fusion,L_total\n")
        for r in trace:
            fh.write(f"{r['epoch']},{r['L_derm']!r},{r['L_clic']!r},{r['L_fusion']!r},{r['L_total']!r}\n")
