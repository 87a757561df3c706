"""One train/search/evaluate cell, shared by the CLI and the acceptance suite."""

from dataclasses import dataclass, field

from . import fusion as F
from . import model as M
from . import training as TR
from .data import stack_images

# Shift and scale move or blur the planted templates, so the synthetic
# experiments default to the label-preserving subset.
SYNTH_AUGMENTATIONS = ("flip", "rotate", "brighten")


@dataclass
class CellResult:
    framework: str
    block: str
    seed: int
    params: int
    weights: F.FusionWeights
    val_acc: dict  # branch/P_FI -> validation AVG ACC
    test: dict  # P_C/P_D/P_FU/P_FI -> MetricsReport on the test split
    trace: list = field(repr=False)
    model: object = field(repr=False, default=None)


def predict(model, records, tta=False):
    clin, derm, labels = stack_images(records)
    preds = TR.tta_predict(model, clin, derm) if tta else model.predict(clin, derm)
    return preds, labels


def run_cell(train, val, test, framework, block, seed, train_config, tta=False, step=0.1, model_config=None):
    """Train one (framework, block, seed) model and score it.

    The fusion weights are searched on ``val``; test metrics use those weights.
    """
    cfg = model_config or M.ModelConfig(framework, block)
    model = M.FusionModel(cfg, seed=seed)
    res = TR.fit(model, train, train_config)
    val_preds, val_labels = predict(model, val, tta)
    weights, score = F.weight_search(val_preds, val_labels, step=step)
    val_acc = {b: F.avg_acc(val_preds.probs[b], val_labels) for b in M.BRANCHES}
    val_acc["P_FI"] = score
    test_preds, test_labels = predict(model, test, tta)
    return CellResult(
        framework=cfg.framework,
        block=cfg.fusion_block,
        seed=seed,
        params=M.count_params(model)["total"],
        weights=weights,
        val_acc=val_acc,
        test=F.evaluate_all(test_preds, test_labels, weights),
        trace=res.trace,
        model=model,
    )
