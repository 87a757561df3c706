"""Final-prediction fusion, validation weight search and the metric suite.

The final prediction is a convex combination of the three branch outputs,
P_FI = W_D * P_D + W_C * P_C + W_FU * P_FU, with one weight triple shared by
all tasks. Weights are found by exhaustive search over a lattice on the
2-simplex, maximising validation AVG ACC.
"""

import csv
import io
import logging
import math
import warnings
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
from scipy.stats import rankdata

from .data import SPC_SCHEMA
from .errors import ContractError
from .model import BRANCHES, PredictionSet

log = logging.getLogger(__name__)

TABLE3_ORDER = ("PN", "BWV", "VS", "PIG", "STR", "DaG", "RS", "Diag")
ABSENT = "-"


@dataclass(frozen=True)
class FusionWeights:
    w_d: float
    w_c: float
    w_fu: float

    def __post_init__(self):
        for name in ("w_d", "w_c", "w_fu"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ContractError(f"fusion weight {name} must be a nonnegative real, got {v}")
        if abs(self.w_d + self.w_c + self.w_fu - 1.0) > 1e-12:
            raise ContractError(f"fusion weights must sum to 1, got {self.w_d + self.w_c + self.w_fu!r}")

    @classmethod
    def normalized(cls, w_d, w_c, w_fu):
        s = w_d + w_c + w_fu
        if s <= 0 or min(w_d, w_c, w_fu) < 0:
            raise ContractError("fusion weights must be nonnegative with a positive sum")
        a, b = w_d / s, w_c / s
        return cls(a, b, max(0.0, 1.0 - a - b))

    def as_tuple(self):
        return (self.w_d, self.w_c, self.w_fu)


def weighted_fuse(preds, w):
    """Per-task fused probability vectors, list of (B, K) arrays."""
    if not isinstance(w, FusionWeights):
        w = FusionWeights(*w)
    pd, pc, pfu = (preds.probs[b] for b in ("dermoscopy", "clinical", "fusion"))
    return [w.w_d * d + w.w_c * c + w.w_fu * f for d, c, f in zip(pd, pc, pfu)]


def simplex_grid(step):
    """All (W_D, W_C, W_FU) on the lattice {i * step} with W_D + W_C + W_FU = 1."""
    if not 0 < step <= 1:
        raise ContractError(f"step must lie in (0, 1], got {step}")
    frac = Fraction(step).limit_denominator(10**6)
    n = 1 / frac
    out = []
    if n.denominator == 1:
        n = int(n)
        for i in range(n, -1, -1):
            for j in range(n - i, -1, -1):
                k = n - i - j
                out.append((i / n, j / n, k / n))
    else:
        # step does not divide 1: W_FU absorbs the remainder
        m = int(1 / step + 1e-9)
        for i in range(m, -1, -1):
            for j in range(m - i, -1, -1):
                wd, wc = i * step, j * step
                out.append((wd, wc, max(0.0, 1.0 - wd - wc)))
    return out


def _concat_preds(val_preds):
    if isinstance(val_preds, PredictionSet):
        return val_preds
    val_preds = list(val_preds)
    if not val_preds:
        raise ContractError("validation set is empty")
    return PredictionSet(
        {b: [np.concatenate([p.probs[b][t] for p in val_preds]) for t in range(len(val_preds[0].probs[b]))] for b in BRANCHES}
    )


def correct_counts(task_probs, labels):
    """Number of cases whose argmax matches the label, per task."""
    labels = np.asarray(labels)
    return [int(np.sum(np.argmax(p, axis=1) == labels[:, t])) for t, p in enumerate(task_probs)]


def avg_acc(task_probs, labels):
    n = len(labels)
    return float(np.mean([c / n for c in correct_counts(task_probs, labels)]))


def weight_search(val_preds, val_labels, step=0.1, objective="acc", schema=SPC_SCHEMA):
    """Grid search over simplex weights maximising validation AVG ACC (or AVG AUC).

    Ties resolve to the lexicographically largest (W_D, W_C, W_FU), i.e. toward
    the dermoscopy branch. Returns (FusionWeights, best score).
    """
    preds = _concat_preds(val_preds)
    labels = np.asarray(val_labels)
    if labels.shape[0] == 0 or preds.n_cases == 0:
        raise ContractError("validation set is empty")
    best, best_key = None, None
    for triple in simplex_grid(step):
        fused = weighted_fuse(preds, FusionWeights(*triple))
        if objective == "acc":
            score = sum(correct_counts(fused, labels))  # integer: no float ties
        elif objective == "auc":
            score = evaluate(fused, labels, schema).avg_auc
        else:
            raise ContractError(f"objective must be acc or auc, got {objective!r}")
        key = (score, triple)
        if best_key is None or key > best_key:
            best, best_key = triple, key
    score = best_key[0] / (len(labels) * len(preds.probs["fusion"])) if objective == "acc" else best_key[0]
    return FusionWeights(*best), score


# ---------------------------------------------------------------- metrics


def auc_one_vs_rest(scores, labels):
    """Mann-Whitney AUC, P(s+ > s-) + 0.5 P(tie), via average ranks; None if only one class."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        warnings.warn("AUC undefined for single-class input; reported as absent", RuntimeWarning, stacklevel=2)
        return None
    ranks = rankdata(scores, method="average")
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def confusion_metrics(pred_cat, true_cat, category):
    """One-vs-rest PRE, SEN, SPE for ``category``; None where the denominator is zero."""
    pred = np.asarray(pred_cat) == category
    true = np.asarray(true_cat) == category
    if pred.size == 0:
        raise ContractError("empty evaluation set")
    tp = int(np.sum(pred & true))
    fp = int(np.sum(pred & ~true))
    fn = int(np.sum(~pred & true))
    tn = int(np.sum(~pred & ~true))
    return {
        "PRE": tp / (tp + fp) if tp + fp else None,
        "SEN": tp / (tp + fn) if tp + fn else None,
        "SPE": tn / (tn + fp) if tn + fp else None,
    }


def task_accuracy(pred_cat, true_cat):
    pred_cat, true_cat = np.asarray(pred_cat), np.asarray(true_cat)
    if pred_cat.size == 0:
        raise ContractError("empty evaluation set")
    return float(np.mean(pred_cat == true_cat))


def _mean(values):
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


@dataclass
class MetricsReport:
    """Per-category AUC/PRE/SEN/SPE keyed by (task_abbrev, category_abbrev); per-task ACC."""

    auc: dict
    pre: dict
    sen: dict
    spe: dict
    acc: dict
    avg_auc: float
    avg_acc: float
    schema: object = field(default=SPC_SCHEMA, repr=False)

    def values(self):
        out = []
        for d in (self.auc, self.pre, self.sen, self.spe, self.acc):
            out.extend(d.values())
        return out + [self.avg_auc, self.avg_acc]

    def has_nan(self):
        return any(v is not None and isinstance(v, float) and math.isnan(v) for v in self.values())


def evaluate(task_probs, labels, schema=SPC_SCHEMA):
    labels = np.asarray(labels)
    auc, pre, sen, spe, acc = {}, {}, {}, {}, {}
    for ti, task in enumerate(schema):
        probs = task_probs[ti]
        pred = np.argmax(probs, axis=1)
        truth = labels[:, ti]
        acc[task.abbrev] = task_accuracy(pred, truth)
        for ci, cat in enumerate(task.categories):
            key = (task.abbrev, cat)
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                auc[key] = auc_one_vs_rest(probs[:, ci], truth == ci)
            cm = confusion_metrics(pred, truth, ci)
            pre[key], sen[key], spe[key] = cm["PRE"], cm["SEN"], cm["SPE"]
    grid = [(schema[t].abbrev, schema[t].categories[c]) for t, c in schema.auc_categories()]
    missing = [k for k in grid if auc[k] is None]
    if missing:
        log.warning("AUC absent (single-class) for %s; excluded from AVG AUC", missing)
    return MetricsReport(
        auc=auc, pre=pre, sen=sen, spe=spe, acc=acc,
        avg_auc=_mean(auc[k] for k in grid),
        avg_acc=float(np.mean(list(acc.values()))),
        schema=schema,
    )


def evaluate_all(preds, labels, weights, schema=SPC_SCHEMA):
    """MetricsReport for P_C, P_D, P_FU and the fused P_FI."""
    return {
        "P_C": evaluate(preds.probs["clinical"], labels, schema),
        "P_D": evaluate(preds.probs["dermoscopy"], labels, schema),
        "P_FU": evaluate(preds.probs["fusion"], labels, schema),
        "P_FI": evaluate(weighted_fuse(preds, weights), labels, schema),
    }


# ---------------------------------------------------------------- reporting


def _fmt(v, pct=True):
    if v is None:
        return ABSENT
    if isinstance(v, tuple):
        m, s = v
        return f"{100 * m:.1f}+-{100 * s:.1f}" if pct else f"{m:.4f}+-{s:.4f}"
    return f"{100 * v:.1f}" if pct else f"{v}"


def aggregate(reports):
    """Mean and population std over seeds, per field; absent cells stay absent."""
    first = reports[0]

    def agg(getter):
        vals = [getter(r) for r in reports]
        vals = [v for v in vals if v is not None]
        if not vals:
            return None
        return (float(np.mean(vals)), float(np.std(vals)))

    out = {}
    for name in ("auc", "pre", "sen", "spe", "acc"):
        out[name] = {k: agg(lambda r, k=k, n=name: getattr(r, n)[k]) for k in getattr(first, name)}
    out["avg_auc"] = agg(lambda r: r.avg_auc)
    out["avg_acc"] = agg(lambda r: r.avg_acc)
    return out


def _cell(report, name, key):
    if isinstance(report, MetricsReport):
        return getattr(report, name)[key]
    return report[name][key]


def _avg(report, name):
    if isinstance(report, MetricsReport):
        return getattr(report, name)
    return report[name]


def auc_table(rows, schema=SPC_SCHEMA):
    """Rows: {label: MetricsReport or aggregate}. Columns: the 17 category AUCs then AVG."""
    cols = [(schema[t].abbrev, schema[t].categories[c]) for t, c in schema.auc_categories()]
    header = ["Method"] + [f"{a}-{c}" for a, c in cols] + ["AVG"]
    body = [[label] + [_cell(r, "auc", k) for k in cols] + [_avg(r, "avg_auc")] for label, r in rows.items()]
    return header, body


def acc_table(rows, schema=SPC_SCHEMA):
    order = [a for a in TABLE3_ORDER if a in schema.abbrevs] or schema.abbrevs
    header = ["Method"] + order + ["AVG"]
    body = [[label] + [_cell(r, "acc", a) for a in order] + [_avg(r, "avg_acc")] for label, r in rows.items()]
    return header, body


def melanoma_table(rows, schema=SPC_SCHEMA):
    """AUC/PRE/SEN/SPE over the eight melanoma-related categories, with a row AVG."""
    cols = [(schema[t].abbrev, schema[t].categories[c]) for t, c in schema.melanoma_categories()]
    header = ["Metric", "Method"] + [f"{a}-{c}" for a, c in cols] + ["AVG"]
    body = []
    for metric in ("auc", "pre", "sen", "spe"):
        for label, r in rows.items():
            cells = [_cell(r, metric, k) for k in cols]
            body.append([metric.upper(), label] + cells + [_row_mean(cells)])
    return header, body


def _row_mean(cells):
    if cells and isinstance(next((c for c in cells if c is not None), None), tuple):
        vals = [c[0] for c in cells if c is not None]
    else:
        vals = [c for c in cells if c is not None]
    return float(np.mean(vals)) if vals else None


def to_csv(header, body):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in body:
        w.writerow([_csv_cell(v) for v in row])
    return buf.getvalue()


def _csv_cell(v):
    if v is None:
        return ABSENT
    if isinstance(v, tuple):
        return f"{v[0]!r}+-{v[1]!r}"
    if isinstance(v, float):
        return repr(v)
    return v


def to_text(header, body):
    cells = [[str(h) for h in header]] + [[c if isinstance(c, str) else _fmt(c) for c in row] for row in body]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    lines = ["  ".join(c.rjust(w) if i else c.ljust(w) for i, (c, w) in enumerate(zip(r, widths))) for r in cells]
    lines.insert(1, "-" * len(lines[0]))
    return "\n".join(lines)


def report(rows, schema=SPC_SCHEMA):
    """{'auc': (csv, text), 'acc': (...), 'melanoma': (...)} for a {label: report} mapping."""
    out = {}
    for name, fn in (("auc", auc_table), ("acc", acc_table), ("melanoma", melanoma_table)):
        header, body = fn(rows, schema)
        out[name] = (to_csv(header, body), to_text(header, body))
    return out


# ---------------------------------------------------------------- prediction dumps

DUMP_COLUMNS = ("case_id", "branch", "task", "category", "probability")


def write_predictions(path, case_ids, preds, schema=SPC_SCHEMA):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(DUMP_COLUMNS)
        for b in BRANCHES:
            for ti, task in enumerate(schema):
                p = preds.probs[b][ti]
                for j, cid in enumerate(case_ids):
                    for ci, cat in enumerate(task.categories):
                        w.writerow([cid, b, task.abbrev, cat, repr(float(p[j, ci]))])


def read_predictions(path, schema=SPC_SCHEMA):
    """Inverse of write_predictions: (case_ids, PredictionSet)."""
    rows = {}
    case_ids = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != DUMP_COLUMNS:
            raise ContractError(f"{path}: header must be {','.join(DUMP_COLUMNS)}")
        for r in reader:
            if r["case_id"] not in rows:
                rows[r["case_id"]] = {}
                case_ids.append(r["case_id"])
            rows[r["case_id"]][(r["branch"], r["task"], r["category"])] = float(r["probability"])
    probs = {}
    for b in BRANCHES:
        probs[b] = []
        for task in schema:
            arr = np.array([[rows[c][(b, task.abbrev, cat)] for cat in task.categories] for c in case_ids])
            probs[b].append(arr)
    return case_ids, PredictionSet(probs)
