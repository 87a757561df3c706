"""Seven-point-checklist label schema, case index I/O, splitting and a synthetic
paired-modality generator.

The synthetic generator renders every (task, category) as a fixed orthogonal
colour-texture template. A case's image is the sum of the templates of its
eight labels scaled by the modality's SNR, plus Gaussian noise, mapped affinely
into [0, 1]. Dermoscopy gets the larger SNR, so it carries the same label
information as the clinical image, only more legibly.
"""

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import rng as rng_mod
from .errors import ConfigError, IngestionError, ValidationError
from .tensor import load_tensor, save_tensor


@dataclass(frozen=True)
class Task:
    name: str
    abbrev: str
    categories: tuple  # abbreviations, in index order
    category_names: tuple
    counts: tuple  # Table 1 case counts, same order

    @property
    def n_categories(self):
        return len(self.categories)

    def index_of(self, abbrev):
        try:
            return self.categories.index(abbrev.strip().upper())
        except ValueError:
            raise ValidationError(f"task {self.abbrev}: unknown category {abbrev!r}") from None


def _task(name, abbrev, cats):
    return Task(name, abbrev, tuple(c[0] for c in cats), tuple(c[1] for c in cats), tuple(c[2] for c in cats))


SPC_TASKS = (
    _task("Diagnosis", "Diag", [("BCC", "Basal Cell Carcinoma", 42), ("NEV", "Nevus", 575),
                                ("MEL", "Melanoma", 252), ("MISC", "Miscellaneous", 97),
                                ("SK", "Seborrheic Keratosis", 45)]),
    _task("Pigment Network", "PN", [("ABS", "Absent", 400), ("TYP", "Typical", 381), ("ATP", "Atypical", 230)]),
    _task("Streaks", "STR", [("ABS", "Absent", 653), ("REG", "Regular", 107), ("IR", "Irregular", 251)]),
    _task("Pigmentation", "PIG", [("ABS", "Absent", 588), ("REG", "Regular", 118), ("IR", "Irregular", 305)]),
    _task("Regression Structures", "RS", [("ABS", "Absent", 758), ("PRS", "Present", 253)]),
    _task("Dots and Globules", "DaG", [("ABS", "Absent", 229), ("REG", "Regular", 334), ("IR", "Irregular", 448)]),
    _task("Blue Whitish Veil", "BWV", [("ABS", "Absent", 816), ("PRS", "Present", 195)]),
    _task("Vascular Structures", "VS", [("ABS", "Absent", 833), ("REG", "Regular", 117), ("IR", "Irregular", 71)]),
)

EXPECTED_COUNTS = {"Diag": 5, "PN": 3, "STR": 3, "PIG": 3, "RS": 2, "DaG": 3, "BWV": 2, "VS": 3}


class TaskSchema:
    def __init__(self, tasks=SPC_TASKS):
        self.tasks = tuple(tasks)
        for t in self.tasks:
            if len(set(t.categories)) != len(t.categories):
                raise ConfigError(f"task {t.abbrev}: duplicate category abbreviations")

    def __len__(self):
        return len(self.tasks)

    def __iter__(self):
        return iter(self.tasks)

    def __getitem__(self, i):
        return self.tasks[i]

    @property
    def sizes(self):
        return [t.n_categories for t in self.tasks]

    @property
    def abbrevs(self):
        return [t.abbrev for t in self.tasks]

    def task(self, abbrev):
        for t in self.tasks:
            if t.abbrev.lower() == abbrev.lower():
                return t
        raise KeyError(abbrev)

    def task_index(self, abbrev):
        return self.abbrevs.index(self.task(abbrev).abbrev)

    def validate_labels(self, labels, where=""):
        if len(labels) != len(self.tasks):
            raise ValidationError(f"{where}expected {len(self.tasks)} labels, got {len(labels)}")
        for t, y in zip(self.tasks, labels):
            if not 0 <= int(y) < t.n_categories:
                raise ValidationError(f"{where}task {t.abbrev}: label {y} outside [0, {t.n_categories})")

    def auc_categories(self):
        """(task_index, category_index) pairs of the per-category AUC grid.

        All diagnosis classes plus every non-absent category of the seven
        checklist features: 17 columns for the SPC schema.
        """
        out = []
        for ti, t in enumerate(self.tasks):
            for ci, c in enumerate(t.categories):
                if ti == 0 or c != "ABS":
                    out.append((ti, ci))
        return out

    def melanoma_categories(self):
        """One melanoma-related category per task (MEL, ATP, IR, IR, PRS, IR, PRS, IR)."""
        prefer = {"Diag": "MEL", "PN": "ATP", "RS": "PRS", "BWV": "PRS"}
        return [(ti, t.categories.index(prefer.get(t.abbrev, "IR"))) for ti, t in enumerate(self.tasks)]

    def default_marginals(self):
        return [np.asarray(t.counts, dtype=float) / sum(t.counts) for t in self.tasks]


SPC_SCHEMA = TaskSchema()


def check_schema(schema=SPC_SCHEMA):
    got = {t.abbrev: t.n_categories for t in schema}
    if got != EXPECTED_COUNTS:
        raise ConfigError(f"schema category counts {got} differ from {EXPECTED_COUNTS}")


check_schema()


@dataclass
class CaseRecord:
    case_id: str
    clinical: np.ndarray
    dermoscopy: np.ndarray
    labels: tuple
    split: str = ""


# ---------------------------------------------------------------- synthetic data


@dataclass
class SynthConfig:
    cases: int = 2000
    size: int = 32
    derm_snr: float = 0.12
    clin_snr: float = 0.03
    noise_std: float = 1.0
    marginals: list = None
    seed: int = 0
    split_ratios: tuple = (0.6, 0.2, 0.2)

    def __post_init__(self):
        if self.cases < 1:
            raise ConfigError("cases must be >= 1")
        if self.size < 2:
            raise ConfigError("image size must be >= 2")
        if self.derm_snr < 0 or self.clin_snr < 0 or self.noise_std < 0:
            raise ConfigError("snr and noise values must be nonnegative")

    def resolved_marginals(self, schema=SPC_SCHEMA):
        margs = self.marginals if self.marginals is not None else schema.default_marginals()
        out = []
        for t, m in zip(schema, margs):
            m = np.asarray(m, dtype=float)
            if m.shape != (t.n_categories,) or (m < 0).any() or abs(m.sum() - 1.0) > 1e-9:
                raise ConfigError(f"task {t.abbrev}: marginals must be {t.n_categories} nonnegative values summing to 1")
            out.append(m)
        return out


_WALSH8 = np.array(
    [
        [1, 1, 1, 1, 1, 1, 1, 1],
        [1, 1, -1, -1, -1, -1, 1, 1],
        [1, -1, -1, 1, 1, -1, -1, 1],
        [1, -1, 1, -1, -1, 1, -1, 1],
    ],
    dtype=float,
)
_COLOURS = np.array(
    [
        [1.0, 1.0, 1.0],
        [1.0, -1.0, 0.0],
        [1.0, 1.0, -2.0],
    ]
)


def templates(size, schema=SPC_SCHEMA):
    """One orthogonal (size, size, 3) template per (task, category), unit RMS per entry.

    Returns a list (per task) of arrays shaped (K, size, size, 3). Spatial parts
    are symmetrised products of period-8 palindromic Walsh rows, so on sizes
    divisible by 8 they are invariant to flips and quarter turns.
    """
    reps = -(-size // 8)
    rows = np.tile(_WALSH8, (1, reps))[:, :size]
    spatial = []
    for a in range(4):
        for b in range(a, 4):
            s = np.outer(rows[a], rows[b])
            if a != b:
                s = s + s.T
            spatial.append(s)
    colours = _COLOURS / np.linalg.norm(_COLOURS, axis=1, keepdims=True)
    pool = [s[:, :, None] * c[None, None, :] for s in spatial for c in colours]
    need = sum(schema.sizes)
    if need > len(pool) or need > 3 * size * size:
        raise ConfigError(f"image size {size} too small for {need} orthogonal templates")
    flat = np.stack([p.reshape(-1) for p in pool[:need]], axis=1)
    q, _ = np.linalg.qr(flat)
    # QR may flip signs; keep the orientation of the original pattern
    signs = np.sign(np.sum(q * flat, axis=0))
    q = q * signs * np.sqrt(flat.shape[0])
    out, k = [], 0
    for t in schema:
        out.append(q[:, k : k + t.n_categories].T.reshape(t.n_categories, size, size, 3))
        k += t.n_categories
    return out


def sample_labels(n, marginals, rng):
    cols = [rng.choice(len(m), size=n, p=m) for m in marginals]
    return np.stack(cols, axis=1).astype(np.int64)


def contrast_scale(config, schema=SPC_SCHEMA):
    """Divisor mapping raw signal+noise into [0, 1] around 0.5 (clipping only beyond ~4 sigma of noise)."""
    temps = templates(config.size, schema)
    peak = sum(np.abs(t).max(axis=0) for t in temps).max()
    return 2.0 * (max(config.derm_snr, config.clin_snr) * peak + 4.0 * config.noise_std) or 1.0


def render(labels, snr, noise, temps, kappa):
    signal = np.zeros(noise.shape)
    for ti, tmpl in enumerate(temps):
        signal += tmpl[labels[:, ti]]
    return np.clip(0.5 + (snr * signal + noise) / kappa, 0.0, 1.0)


def synth_generate(config, schema=SPC_SCHEMA):
    """Deterministic synthetic paired dataset; split tags assigned by a seeded shuffle."""
    margs = config.resolved_marginals(schema)
    n, s = config.cases, config.size
    labels = sample_labels(n, margs, rng_mod.stream(config.seed, "synth", "labels"))
    temps = templates(s, schema)
    kappa = contrast_scale(config, schema)
    noise_c = rng_mod.stream(config.seed, "synth", "noise", "clinical").standard_normal((n, s, s, 3))
    noise_d = rng_mod.stream(config.seed, "synth", "noise", "dermoscopy").standard_normal((n, s, s, 3))
    clin = render(labels, config.clin_snr, config.noise_std * noise_c, temps, kappa)
    derm = render(labels, config.derm_snr, config.noise_std * noise_d, temps, kappa)
    width = len(str(n - 1))
    records = [
        CaseRecord(f"case{i:0{width}d}", clin[i], derm[i], tuple(int(v) for v in labels[i]))
        for i in range(n)
    ]
    if config.split_ratios:
        tr, va, te = split(records, config.split_ratios, config.seed)
        for part, tag in ((tr, "train"), (va, "val"), (te, "test")):
            for r in part:
                r.split = tag
    return records


def majority_rate(marginals):
    """Mean over tasks of the largest class probability: the best label-blind accuracy."""
    return float(np.mean([np.max(m) for m in marginals]))


# ---------------------------------------------------------------- splitting

SPLITS = ("train", "val", "test")


def split(records, ratios=(0.6, 0.2, 0.2), seed=0):
    tagged = [r for r in records if r.split]
    if tagged:
        if len(tagged) != len(records):
            raise ConfigError("some records carry split tags and some do not")
        parts = {k: [] for k in SPLITS}
        for r in records:
            if r.split not in parts:
                raise ConfigError(f"case {r.case_id}: unknown split tag {r.split!r}")
            parts[r.split].append(r)
    else:
        ratios = tuple(float(x) for x in ratios)
        if len(ratios) != 3 or min(ratios) <= 0 or abs(sum(ratios) - 1.0) > 1e-9:
            raise ConfigError(f"split ratios must be three positive values summing to 1, got {ratios}")
        n = len(records)
        order = rng_mod.stream(seed, "split").permutation(n)
        n_tr = int(round(ratios[0] * n))
        n_va = int(round(ratios[1] * n))
        idx = {"train": order[:n_tr], "val": order[n_tr : n_tr + n_va], "test": order[n_tr + n_va :]}
        parts = {k: [records[i] for i in sorted(v)] for k, v in idx.items()}
    for k in SPLITS:
        if not parts[k]:
            raise ConfigError(f"split produced an empty {k} partition")
    return parts["train"], parts["val"], parts["test"]


# ---------------------------------------------------------------- index I/O

INDEX_COLUMNS = ("case_id", "clinical_path", "derm_path", "diag", "pn", "str", "pig", "rs", "dag", "bwv", "vs", "split")


def write_dataset(records, root, schema=SPC_SCHEMA):
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    with open(root / "index.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(INDEX_COLUMNS)
        for r in records:
            cp = f"images/{r.case_id}_clinical.bin"
            dp = f"images/{r.case_id}_derm.bin"
            save_tensor(root / cp, r.clinical)
            save_tensor(root / dp, r.dermoscopy)
            cats = [t.categories[y] for t, y in zip(schema, r.labels)]
            w.writerow([r.case_id, cp, dp, *cats, r.split])


def load_index(path, schema=SPC_SCHEMA, load_images=True):
    """Read an index CSV (header as INDEX_COLUMNS); image paths resolve against its directory."""
    path = Path(path)
    if path.is_dir():
        path = path / "index.csv"
    if not path.exists():
        raise IngestionError(f"index file not found: {path}")
    root = path.parent
    records, seen = [], set()
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip().lower() for h in header) != INDEX_COLUMNS:
            raise IngestionError(f"{path}: header must be {','.join(INDEX_COLUMNS)}")
        for rowno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(INDEX_COLUMNS):
                raise IngestionError(f"{path} row {rowno}: expected {len(INDEX_COLUMNS)} fields, got {len(row)}")
            case_id = row[0].strip()
            if not case_id or case_id in seen:
                raise IngestionError(f"{path} row {rowno}: missing or duplicate case_id {case_id!r}")
            seen.add(case_id)
            labels = []
            for t, raw in zip(schema, row[3:11]):
                try:
                    labels.append(t.index_of(raw))
                except ValidationError as exc:
                    raise IngestionError(f"{path} row {rowno}: {exc}") from None
            tag = row[11].strip().lower()
            if tag and tag not in SPLITS:
                raise IngestionError(f"{path} row {rowno}: unknown split {tag!r}")
            clin = derm = None
            if load_images:
                try:
                    clin = load_tensor(root / row[1].strip())
                    derm = load_tensor(root / row[2].strip())
                except (OSError, ValueError) as exc:
                    raise IngestionError(f"{path} row {rowno}: cannot read image ({exc})") from None
            records.append(CaseRecord(case_id, clin, derm, tuple(labels), tag))
    return records


def stack_images(records):
    """(clinical, dermoscopy, labels) arrays for a list of records."""
    clin = np.stack([r.clinical for r in records])
    derm = np.stack([r.dermoscopy for r in records])
    labels = np.array([r.labels for r in records], dtype=np.int64)
    return clin, derm, labels
