"""Shared experiment helpers for the module tests and the acceptance suite."""

import numpy as np

from ammfm import fusion as F
from ammfm import model as M
from ammfm import training as TR
from ammfm.data import SPC_SCHEMA
from oracles import naive_weight_search, numeric_grad, rel_error

TINY_HEAVY = M.BackboneConfig((3, 4), (2, 2), (1, 2), "heavy")
TINY_LIGHT = M.BackboneConfig((2, 3), (2, 2), (1, 1), "light")


def tiny_model(seed, framework="aff", block="aab"):
    """8x8 input, two stages, at most 4 channels, one attention block (stage 1)."""
    cfg = M.ModelConfig(
        framework, block, attention_stages=None if block == "cat" else (1,),
        input_size=8, heavy=TINY_HEAVY, light=TINY_LIGHT,
    )
    return M.FusionModel(cfg, seed=seed)


def model_gradient_error(seed, n_cases=2, eps=1e-5):
    """Worst per-tensor relative error of dL_total/dparam against central differences.

    L_total is O(40) here, so with eps=1e-6 rounding alone costs ~1e-8 absolute,
    which swamps the smallest attention gradients (~3e-4). 1e-5 keeps truncation negligible.
    """
    rng = np.random.default_rng([2024, seed])
    model = tiny_model(seed)
    clin = rng.uniform(size=(n_cases, 8, 8, 3))
    derm = rng.uniform(size=(n_cases, 8, 8, 3))
    labels = np.array([[rng.integers(t.n_categories) for t in model.config.schema] for _ in range(n_cases)])
    schema = model.config.schema

    def loss():
        return TR.total_loss(model.logits(clin, derm), labels, schema).L_total

    model.zero_grad()
    loss().backward()
    worst = 0.0
    for p in model.parameters().values():
        num = numeric_grad(lambda: loss().item(), p.data, eps)
        worst = max(worst, rel_error(p.grad, num))
    return worst


def random_prediction_set(rng, n_cases, schema, quantized=False):
    """(PredictionSet, labels). Quantized sets put probabilities on a coarse lattice to force ties."""
    probs = {}
    for b in M.BRANCHES:
        probs[b] = []
        for t in schema:
            p = rng.dirichlet(np.ones(t.n_categories), size=n_cases)
            if quantized:
                p = np.round(p * 4) / 4
            probs[b].append(p)
    labels = np.array([[rng.integers(t.n_categories) for t in schema] for _ in range(n_cases)])
    return M.PredictionSet(probs), labels


def search_matches_naive(n_sets, seed=0, schema=SPC_SCHEMA):
    """Count of random sets where weight_search agrees with the naive grid (triple and score)."""
    agree = 0
    for i in range(n_sets):
        rng = np.random.default_rng([seed, i])
        n = int(rng.integers(1, 12))
        step = (0.1, 0.25, 0.5, 0.2)[i % 4]
        preds, labels = random_prediction_set(rng, n, schema, quantized=bool(i % 2))
        w, score = F.weight_search(preds, labels, step=step)
        pd, pc, pf = (preds.probs[b] for b in ("dermoscopy", "clinical", "fusion"))
        triple, correct = naive_weight_search(pd, pc, pf, labels.tolist(), step)
        agree += w.as_tuple() == triple and score == correct / (n * len(schema))
    return agree
