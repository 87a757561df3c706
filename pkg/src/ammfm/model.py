"""Two-backbone fusion model: backbones, cross-modality alignment, attention
insertion, three head groups, parameter audit and checkpoint I/O.

The clinical and dermoscopy backbones run stage by stage. After every stage in
``attention_stages`` the configured block lets the modalities interact:

* AAB: clinical features (aligned to the dermoscopy shape) refine dermoscopy.
* BAB: additionally dermoscopy features (aligned to the clinical shape) refine clinical.
* CAT: no interaction; the fusion branch only sees concatenated embeddings.

Each branch (clinical, dermoscopy, fusion) has one fully connected head per task.
"""

import hashlib
import json
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import rng as rng_mod
from . import tensor as T
from .blocks import AttentionBlockParams, BabParams, Projection, aab_forward, bab_forward, cat_fuse
from .data import SPC_SCHEMA
from .errors import ConfigError, DimensionError

FRAMEWORKS = ("sff", "aff")
BLOCKS = ("cat", "bab", "aab")
BRANCHES = ("clinical", "dermoscopy", "fusion")
COMPONENTS = ("clinical_backbone", "dermoscopy_backbone", "align", "attention", "heads")


@dataclass(frozen=True)
class BackboneConfig:
    """Stage layout of a toy extractor.

    Stage ``s`` starts with a 3x3 convolution of stride ``stage_strides[s]``
    followed by ``stage_depths[s] - 1`` residual 3x3 stride-1 convolutions,
    each followed by SiLU.
    """

    stage_widths: tuple
    stage_strides: tuple = None
    stage_depths: tuple = None
    kind: str = "heavy"

    def __post_init__(self):
        n = len(self.stage_widths)
        if self.stage_strides is None:
            object.__setattr__(self, "stage_strides", (2,) * n)
        if self.stage_depths is None:
            object.__setattr__(self, "stage_depths", (1,) * n)
        object.__setattr__(self, "stage_widths", tuple(int(w) for w in self.stage_widths))
        object.__setattr__(self, "stage_strides", tuple(int(s) for s in self.stage_strides))
        object.__setattr__(self, "stage_depths", tuple(int(d) for d in self.stage_depths))
        if n < 2:
            raise ConfigError("a backbone needs at least 2 stages")
        if len(self.stage_strides) != n or len(self.stage_depths) != n:
            raise ConfigError("stage_widths, stage_strides and stage_depths must have equal length")
        if any(w < 1 for w in self.stage_widths):
            raise ConfigError(f"zero-width stage in {self.stage_widths}")
        if any(s < 1 for s in self.stage_strides) or any(d < 1 for d in self.stage_depths):
            raise ConfigError("strides and depths must be >= 1")
        if any(b < a for a, b in zip(self.stage_widths, self.stage_widths[1:])):
            raise ConfigError(f"stage widths must be non-decreasing, got {self.stage_widths}")
        if self.kind not in ("light", "heavy"):
            raise ConfigError(f"backbone kind must be light or heavy, got {self.kind!r}")

    @property
    def n_stages(self):
        return len(self.stage_widths)

    def stage_shapes(self, size):
        """(H, W, C) after each stage for a square input of side ``size``."""
        out, h = [], size
        for w, s in zip(self.stage_widths, self.stage_strides):
            h = (h - 1) // s + 1
            out.append((h, h, w))
        return out


PRESETS = {
    "toy-heavy": BackboneConfig((12, 24, 32), (2, 2, 2), (1, 1, 10), "heavy"),
    "toy-light": BackboneConfig((8, 24, 32), (2, 2, 2), (1, 1, 1), "light"),
    # narrower light extractor whose stages need channel alignment
    "toy-light-narrow": BackboneConfig((4, 8, 16), (2, 2, 2), (1, 2, 4), "light"),
    # a shallower heavy extractor, for backbone sweeps
    "toy-heavy-s": BackboneConfig((12, 24, 32), (2, 2, 2), (1, 1, 6), "heavy"),
}


class Backbone:
    def __init__(self, config, rng, in_channels=3):
        self.config = config
        self.params = OrderedDict()
        c = in_channels
        for s, (w, depth) in enumerate(zip(config.stage_widths, config.stage_depths)):
            for j in range(depth):
                cin = c if j == 0 else w
                std = np.sqrt(2.0 / (9 * cin))
                if j > 0:
                    std *= 0.5  # residual branches start small
                self.params[f"stage{s}.conv{j}.weight"] = T.Tensor(rng.normal(0.0, std, (3, 3, cin, w)), requires_grad=True)
                self.params[f"stage{s}.conv{j}.bias"] = T.Tensor(np.zeros(w), requires_grad=True)
            c = w

    def run_stage(self, s, x):
        cfg = self.config
        p = self.params
        x = T.silu(T.conv2d(x, p[f"stage{s}.conv0.weight"], p[f"stage{s}.conv0.bias"], stride=cfg.stage_strides[s]))
        for j in range(1, cfg.stage_depths[s]):
            x = T.add(x, T.silu(T.conv2d(x, p[f"stage{s}.conv{j}.weight"], p[f"stage{s}.conv{j}.bias"])))
        return x

    def __call__(self, x):
        outs = []
        for s in range(self.config.n_stages):
            x = self.run_stage(s, x)
            outs.append(x)
        return outs


def build_backbone(config, seed, name="backbone"):
    """Deterministic He-initialised extractor; the stream depends only on (seed, name)."""
    return Backbone(config, rng_mod.stream(seed, "model", name))


class Align:
    """Spatial pool/repeat to a target H x W, then a learnable 1x1 projection to C channels."""

    def __init__(self, src_shape, target_shape, rng=None, identity=False):
        (h, w, c), (th, tw, tc) = src_shape, target_shape
        if h != w or th != tw:
            raise ConfigError("align supports square feature maps only")
        if max(h, th) % min(h, th):
            raise ConfigError(f"align needs an integer spatial ratio, got {h} -> {th}")
        self.src_shape, self.target_shape = tuple(src_shape), tuple(target_shape)
        if identity:
            if c != tc:
                raise ConfigError("identity projection needs equal channel counts")
            self.proj = Projection.identity(c)
        else:
            self.proj = Projection.init(c, tc, rng)

    def tensors(self):
        return self.proj.tensors()

    def __call__(self, x):
        return align(x, self.target_shape, self.proj)


def align(feat, target, projection):
    """Pool (downscale) or nearest-repeat (upscale) ``feat`` to target H x W, then project to target C."""
    feat = T._wrap(feat)
    h = feat.shape[-3]
    th = target[0]
    if h > th:
        feat = T.avg_pool(feat, h // th)
    elif h < th:
        feat = T.upsample_nearest(feat, th // h)
    return projection(feat)


@dataclass
class ModelConfig:
    framework: str = "aff"
    fusion_block: str = "aab"
    attention_stages: tuple = None
    input_size: int = 32
    heavy: BackboneConfig = field(default_factory=lambda: PRESETS["toy-heavy"])
    light: BackboneConfig = field(default_factory=lambda: PRESETS["toy-light"])
    scaled_attention: bool = False
    zero_value_init: bool = False
    schema: object = field(default=SPC_SCHEMA, repr=False, compare=False)

    def __post_init__(self):
        self.framework = self.framework.lower()
        self.fusion_block = self.fusion_block.lower()
        if self.framework not in FRAMEWORKS:
            raise ConfigError(f"framework must be one of {FRAMEWORKS}, got {self.framework!r}")
        if self.fusion_block not in BLOCKS:
            raise ConfigError(f"fusion block must be one of {BLOCKS}, got {self.fusion_block!r}")
        if isinstance(self.heavy, dict):
            self.heavy = BackboneConfig(**self.heavy)
        if isinstance(self.light, dict):
            self.light = BackboneConfig(**self.light)
        n = self.heavy.n_stages
        if self.clinical_backbone.n_stages != n:
            raise ConfigError("both backbones need the same number of stages")
        if self.attention_stages is None:
            self.attention_stages = () if self.fusion_block == "cat" else tuple(range(1, n))
        self.attention_stages = tuple(sorted(set(int(s) for s in self.attention_stages)))
        if any(not 0 <= s < n for s in self.attention_stages):
            raise ConfigError(f"attention stages {self.attention_stages} outside 0..{n - 1}")
        if (self.fusion_block == "cat") != (not self.attention_stages):
            raise ConfigError("attention_stages must be empty exactly when the block is cat")
        if self.input_size < 1:
            raise ConfigError("input_size must be positive")

    @property
    def clinical_backbone(self):
        return self.heavy if self.framework == "sff" else self.light

    @property
    def dermoscopy_backbone(self):
        return self.heavy

    def to_dict(self):
        d = asdict(self)
        d.pop("schema", None)
        d["attention_stages"] = list(self.attention_stages)
        for k in ("heavy", "light"):
            d[k] = {kk: list(v) if isinstance(v, tuple) else v for kk, v in d[k].items()}
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for k in ("heavy", "light"):
            if k in d and isinstance(d[k], dict):
                d[k] = BackboneConfig(**{kk: tuple(v) if isinstance(v, list) else v for kk, v in d[k].items()})
        return cls(**d)


@dataclass
class Embeddings:
    clinical: T.Tensor
    dermoscopy: T.Tensor
    fusion: T.Tensor
    states: dict


@dataclass
class PredictionSet:
    """Per-branch, per-task probabilities: ``probs[branch][task]`` is (B, K)."""

    probs: dict

    def branch(self, name):
        return self.probs[name]

    @property
    def n_cases(self):
        return next(iter(self.probs.values()))[0].shape[0]

    def subset(self, idx):
        return PredictionSet({b: [p[idx] for p in ps] for b, ps in self.probs.items()})


class FusionModel:
    def __init__(self, config, seed=0):
        self.config = config
        self.seed = int(seed)
        cfg = config
        self.clinical_backbone = build_backbone(cfg.clinical_backbone, seed, "clinical_backbone")
        self.dermoscopy_backbone = build_backbone(cfg.dermoscopy_backbone, seed, "dermoscopy_backbone")
        c_shapes = cfg.clinical_backbone.stage_shapes(cfg.input_size)
        d_shapes = cfg.dermoscopy_backbone.stage_shapes(cfg.input_size)
        self.aligns_c2d, self.aligns_d2c, self.blocks = {}, {}, {}
        for s in cfg.attention_stages:
            r = rng_mod.stream(seed, "model", "attention", s)
            ra = rng_mod.stream(seed, "model", "align", s)
            if c_shapes[s] != d_shapes[s]:
                self.aligns_c2d[s] = Align(c_shapes[s], d_shapes[s], ra)
                if cfg.fusion_block == "bab":
                    self.aligns_d2c[s] = Align(d_shapes[s], c_shapes[s], ra)
            if cfg.fusion_block == "aab":
                self.blocks[s] = AttentionBlockParams.init(
                    d_shapes[s][2], r, zero_value=cfg.zero_value_init, scaled=cfg.scaled_attention
                )
            else:
                self.blocks[s] = BabParams.init(
                    d_shapes[s][2], r, zero_value=cfg.zero_value_init, scaled=cfg.scaled_attention,
                    channels_clin=c_shapes[s][2],
                )
        dc = cfg.clinical_backbone.stage_widths[-1]
        dd = cfg.dermoscopy_backbone.stage_widths[-1]
        rh = rng_mod.stream(seed, "model", "heads")
        self.heads = OrderedDict()
        for branch, dim in zip(BRANCHES, (dc, dd, dc + dd)):
            for task in cfg.schema:
                k = task.n_categories
                self.heads[f"{branch}.{task.abbrev}"] = Projection(
                    T.Tensor(rh.normal(0.0, np.sqrt(1.0 / dim), (dim, k)), requires_grad=True),
                    T.Tensor(np.zeros(k), requires_grad=True),
                )

    # -------------------------------------------------------------- parameters

    def parameters(self):
        """Ordered name -> Tensor map; the first dotted component names the audit line."""
        out = OrderedDict()
        for k, v in self.clinical_backbone.params.items():
            out[f"clinical_backbone.{k}"] = v
        for k, v in self.dermoscopy_backbone.params.items():
            out[f"dermoscopy_backbone.{k}"] = v
        for s in sorted(self.aligns_c2d):
            for k, v in self.aligns_c2d[s].tensors().items():
                out[f"align.stage{s}.clin_to_derm.{k}"] = v
        for s in sorted(self.aligns_d2c):
            for k, v in self.aligns_d2c[s].tensors().items():
                out[f"align.stage{s}.derm_to_clin.{k}"] = v
        for s in sorted(self.blocks):
            for k, v in self.blocks[s].tensors().items():
                out[f"attention.stage{s}.{k}"] = v
        for name, proj in self.heads.items():
            for k, v in proj.tensors().items():
                out[f"heads.{name}.{k}"] = v
        return out

    def state_arrays(self):
        return OrderedDict((k, v.data.copy()) for k, v in self.parameters().items())

    def load_arrays(self, arrays):
        params = self.parameters()
        if set(arrays) != set(params):
            missing = sorted(set(params) - set(arrays))
            extra = sorted(set(arrays) - set(params))
            raise ConfigError(f"parameter names differ: missing {missing[:3]}, unexpected {extra[:3]}")
        for k, t in params.items():
            a = np.asarray(arrays[k], dtype=t.data.dtype)
            if a.shape != t.shape:
                raise DimensionError(f"parameter {k}: shape {a.shape} vs {t.shape}")
            t.data[...] = a

    def zero_grad(self):
        for t in self.parameters().values():
            t.zero_grad()

    # -------------------------------------------------------------- forward

    def embed(self, clin_img, derm_img):
        cfg = self.config
        clin, derm = _as_batch(clin_img, cfg.input_size), _as_batch(derm_img, cfg.input_size)
        if clin.shape[0] != derm.shape[0]:
            raise DimensionError(f"batch axis 0: {clin.shape[0]} clinical vs {derm.shape[0]} dermoscopy images")
        c, d = T.Tensor(clin), T.Tensor(derm)
        states = {}
        for s in range(cfg.heavy.n_stages):
            c = self.clinical_backbone.run_stage(s, c)
            d = self.dermoscopy_backbone.run_stage(s, d)
            if s not in self.blocks:
                continue
            c_al = self.aligns_c2d[s](c) if s in self.aligns_c2d else c
            if cfg.fusion_block == "aab":
                d, st = aab_forward(c_al, d, self.blocks[s])
                states[s] = st
            else:
                d_al = self.aligns_d2c[s](d) if s in self.aligns_d2c else d
                c, d, st = bab_forward(c, d, self.blocks[s], clin_guide=c_al, derm_guide=d_al)
                states[s] = st
        emb_c = T.global_avg_pool(c)
        emb_d = T.global_avg_pool(d)
        return Embeddings(emb_c, emb_d, cat_fuse(emb_c, emb_d), states)

    def heads_logits(self, emb):
        """{branch: [logits Tensor (B, K_task) per task]}."""
        out = {}
        for branch, e in zip(BRANCHES, (emb.clinical, emb.dermoscopy, emb.fusion)):
            out[branch] = [self.heads[f"{branch}.{t.abbrev}"](e) for t in self.config.schema]
        return out

    def logits(self, clin_img, derm_img):
        return self.heads_logits(self.embed(clin_img, derm_img))

    def predict(self, clin_img, derm_img, batch_size=256):
        """PredictionSet of softmax probabilities, evaluated in fixed-size chunks."""
        clin, derm = _as_batch(clin_img, self.config.input_size), _as_batch(derm_img, self.config.input_size)
        chunks = []
        for i in range(0, clin.shape[0], batch_size):
            chunks.append(heads_forward(self.embed(clin[i : i + batch_size], derm[i : i + batch_size]), self))
        return PredictionSet(
            {b: [np.concatenate([c.probs[b][t] for c in chunks]) for t in range(len(self.config.schema))] for b in BRANCHES}
        )


def _as_batch(img, size):
    arr = np.asarray(img, dtype=float)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[1:] != (size, size, 3):
        raise DimensionError(f"expected images of shape (B, {size}, {size}, 3), got {arr.shape}")
    return arr


def forward(model, clin_img, derm_img):
    """(emb_C, emb_D, emb_FU, states) for a batch of image pairs."""
    e = model.embed(clin_img, derm_img)
    return e.clinical, e.dermoscopy, e.fusion, e.states


def heads_forward(embeddings, model):
    logits = model.heads_logits(embeddings)
    return PredictionSet({b: [T.softmax_array(z.data) for z in zs] for b, zs in logits.items()})


# ------------------------------------------------------------------ audit


def count_params(model):
    """Exact learnable-entry counts per component plus the total."""
    audit = OrderedDict((c, 0) for c in COMPONENTS)
    for name, t in model.parameters().items():
        audit[name.split(".", 1)[0]] += t.size
    total = sum(t.size for t in model.parameters().values())
    if total != sum(audit.values()):
        raise AssertionError("parameter audit does not add up")
    audit["total"] = total
    return audit


def format_audit(audit):
    width = max(len(k) for k in audit)
    lines = [f"{k:<{width}}  {v:>10d}" for k, v in audit.items() if k != "total"]
    lines.append("-" * (width + 12))
    lines.append(f"{'total':<{width}}  {audit['total']:>10d}")
    return "\n".join(lines)


# ------------------------------------------------------------------ checkpoints

MANIFEST = "manifest.txt"


def save_checkpoint(model, directory):
    """Write one tensor file per parameter plus a key = value manifest with the audit.

    The output depends only on the parameters and config, so identical runs give
    byte-identical directories.
    """
    directory = Path(directory)
    (directory / "tensors").mkdir(parents=True, exist_ok=True)
    lines = ["# ammfm checkpoint v1", f"seed = {model.seed}", f"config = {json.dumps(model.config.to_dict(), sort_keys=True)}"]
    for k, v in count_params(model).items():
        lines.append(f"params.{k} = {v}")
    for name, t in model.parameters().items():
        fname = f"tensors/{name}.bin"
        T.save_tensor(directory / fname, t.data)
        lines.append(f"tensor.{name} = {fname} {'x'.join(str(d) for d in t.shape)}")
    (directory / MANIFEST).write_text("\n".join(lines) + "\n")
    return directory


def read_manifest(directory):
    path = Path(directory) / MANIFEST
    if not path.exists():
        raise FileNotFoundError(f"no checkpoint manifest at {path}")
    out = OrderedDict()
    for line in path.read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        k, _, v = line.partition("=")
        out[k.strip()] = v.strip()
    return out


def manifest_audit(directory):
    m = read_manifest(directory)
    return OrderedDict((k[len("params."):], int(v)) for k, v in m.items() if k.startswith("params."))


def load_checkpoint(directory):
    directory = Path(directory)
    m = read_manifest(directory)
    config = ModelConfig.from_dict(json.loads(m["config"]))
    model = FusionModel(config, seed=int(m["seed"]))
    arrays = {}
    for k, v in m.items():
        if k.startswith("tensor."):
            arrays[k[len("tensor."):]] = T.load_tensor(directory / v.split()[0])
    model.load_arrays(arrays)
    return model


def content_hash(directory, exclude=()):
    """SHA-256 over every file (relative path + bytes) in a directory, in sorted order.

    Files whose name is in ``exclude`` are skipped.
    """
    directory = Path(directory)
    h = hashlib.sha256()
    for p in sorted(x for x in directory.rglob("*") if x.is_file() and x.name not in exclude):
        h.update(str(p.relative_to(directory)).encode())
        h.update(p.read_bytes())
    return h.hexdigest()
