"""Command-line entry point: gen-data, train, eval, params, ablate.

Every command writes a ``run.manifest`` next to its outputs. The manifest holds
the effective config, input and output hashes, and wall-clock timestamps; the
timestamps are the only lines that differ between identical reruns, and the
manifest itself is left out of every content hash.

Configuration precedence is flags > config file > built-in defaults. The
config file is plain ``key = value``; keys before any ``[command]`` header
apply to every command that accepts them, keys under a header only to that
command.

Exit codes: 0 success, 1 runtime failure, 2 usage/config error.
"""

import argparse
import hashlib
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from datetime import datetime, timezone
from pathlib import Path

from . import data as D
from . import fusion as F
from . import model as M
from . import training as TR
from .errors import AmmfmError, ConfigError, ContractError, IngestionError, ValidationError
from .experiment import SYNTH_AUGMENTATIONS, predict, run_cell

log = logging.getLogger("ammfm")

RUN_MANIFEST = "run.manifest"
TIMESTAMP_KEYS = ("started", "finished")
GRID_ORDER = [(fw, b) for fw in M.FRAMEWORKS for b in M.BLOCKS]


class UsageError(AmmfmError):
    pass


# ---------------------------------------------------------------- config handling


def _bool(v):
    if isinstance(v, bool):
        return v
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {v!r}")


DEFAULTS = {
    "gen-data": {"out": None, "cases": 2000, "size": 32, "derm_snr": 0.12, "clin_snr": 0.03, "seed": 0},
    "train": {
        "data": None, "out": None, "framework": "aff", "block": "aab", "epochs": 20, "seed": 0,
        "batch_size": 16, "lr": 1e-3, "swa_window": 0.2, "augment": ",".join(SYNTH_AUGMENTATIONS),
        "preset": "toy-heavy", "light_preset": "toy-light",
    },
    "eval": {"checkpoint": None, "data": None, "out": None, "tta": False, "weights": "search", "objective": "acc", "step": 0.1},
    "params": {"framework": "aff", "block": "aab", "preset": "toy-heavy", "light_preset": "toy-light", "checkpoint": None},
    "ablate": {
        "data": None, "out": None, "seeds": 3, "seed": 0, "grid": "all", "epochs": 20, "batch_size": 16,
        "lr": 1e-3, "swa_window": 0.2, "augment": ",".join(SYNTH_AUGMENTATIONS), "tta": False, "jobs": 1,
    },
}

TYPES = {
    "cases": int, "size": int, "seed": int, "epochs": int, "batch_size": int, "seeds": int, "jobs": int,
    "derm_snr": float, "clin_snr": float, "lr": float, "swa_window": float, "step": float, "tta": _bool,
}


def read_config_file(path):
    """{section or None: {key: raw string}} from a key = value file."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    out = {None: {}}
    section = None
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if section not in DEFAULTS:
                raise ConfigError(f"{path}:{lineno}: unknown section [{section}]")
            out.setdefault(section, {})
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        out.setdefault(section, {})[key.strip().replace("-", "_")] = value.strip()
    return out


def _convert(key, value):
    if value is None:
        return None
    conv = TYPES.get(key)
    if conv is None:
        return value
    try:
        return conv(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: cannot parse {value!r}") from None


def effective_config(command, flags, config_path=None):
    cfg = dict(DEFAULTS[command])
    if config_path:
        sections = read_config_file(config_path)
        for k, v in sections.get(None, {}).items():
            if k in cfg:
                cfg[k] = _convert(k, v)
        for k, v in sections.get(command, {}).items():
            if k not in cfg:
                raise ConfigError(f"[{command}] has no setting {k!r}")
            cfg[k] = _convert(k, v)
    for k, v in flags.items():
        cfg[k] = _convert(k, v)
    return cfg


def _require(cfg, *keys):
    missing = [k for k in keys if cfg.get(k) in (None, "")]
    if missing:
        raise UsageError("missing required option(s): " + ", ".join("--" + k.replace("_", "-") for k in missing))


# ---------------------------------------------------------------- manifests


def _now():
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def dataset_hash(root):
    return M.content_hash(root, exclude=(RUN_MANIFEST,))


def write_run_manifest(out, command, cfg, inputs, started):
    """inputs: {name: path}. Hashes exclude manifests, so reruns agree on every non-timestamp line."""
    out = Path(out)
    input_hashes = {k: dataset_hash(v) if Path(v).is_dir() else _file_hash(v) for k, v in sorted(inputs.items())}
    h = hashlib.sha256(json.dumps({"command": command, "config": cfg, "inputs": input_hashes}, sort_keys=True).encode())
    lines = ["# ammfm run manifest", f"command = {command}", f"seed = {cfg.get('seed', '')}"]
    lines += [f"config.{k} = {json.dumps(v)}" for k, v in sorted(cfg.items())]
    lines += [f"input.{k} = {inputs[k]} sha256:{v}" for k, v in input_hashes.items()]
    lines.append(f"inputs_hash = {h.hexdigest()}")
    outputs = sorted(p.name + ("/" if p.is_dir() else "") for p in out.iterdir() if p.name != RUN_MANIFEST)
    lines += [f"output = {p}" for p in outputs]
    lines.append(f"outputs_hash = {dataset_hash(out)}")
    lines += [f"started = {started}", f"finished = {_now()}"]
    (out / RUN_MANIFEST).write_text("\n".join(lines) + "\n")


def _file_hash(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def read_run_manifest(path, timestamps=True):
    path = Path(path)
    if path.is_dir():
        path = path / RUN_MANIFEST
    out = {}
    for line in path.read_text().splitlines():
        if not line or line.startswith("#"):
            continue
        k, _, v = line.partition(" = ")
        if not timestamps and k in TIMESTAMP_KEYS:
            continue
        if k == "output":
            out.setdefault(k, []).append(v)
        else:
            out[k] = v
    return out


# ---------------------------------------------------------------- commands


def _load_splits(root):
    records = D.load_index(root)
    if not records:
        raise IngestionError(f"{root}: dataset has no cases")
    return D.split(records)


def _check_data(root):
    root = Path(root)
    if not (root / "index.csv").exists():
        raise IngestionError(f"dataset not found: {root / 'index.csv'}")
    return root


def cmd_gen_data(cfg):
    _require(cfg, "out")
    started = _now()
    if cfg["derm_snr"] == 0 or cfg["derm_snr"] < cfg["clin_snr"]:
        log.warning(
            "derm_snr=%s does not exceed clin_snr=%s: dermoscopy is meant to be the stronger modality",
            cfg["derm_snr"], cfg["clin_snr"],
        )
    sc = D.SynthConfig(
        cases=cfg["cases"], size=cfg["size"], derm_snr=cfg["derm_snr"], clin_snr=cfg["clin_snr"], seed=cfg["seed"]
    )
    records = D.synth_generate(sc)
    out = Path(cfg["out"])
    D.write_dataset(records, out)
    write_run_manifest(out, "gen-data", cfg, {}, started)
    print(f"wrote {len(records)} cases to {out}")
    return 0


def _train_config(cfg):
    augs = tuple(a for a in str(cfg["augment"]).split(",") if a.strip())
    return TR.TrainConfig(
        epochs=cfg["epochs"], batch_size=cfg["batch_size"], learning_rate=cfg["lr"],
        swa_window=cfg["swa_window"], seed=cfg["seed"], augmentations=tuple(a.strip() for a in augs),
    )


def _model_config(cfg):
    for key in ("preset", "light_preset"):
        if cfg[key] not in M.PRESETS:
            raise ConfigError(f"unknown {key} {cfg[key]!r}; choose from {sorted(M.PRESETS)}")
    return M.ModelConfig(cfg["framework"], cfg["block"], heavy=M.PRESETS[cfg["preset"]], light=M.PRESETS[cfg["light_preset"]])


def cmd_train(cfg):
    _require(cfg, "data", "out")
    started = _now()
    root = _check_data(cfg["data"])
    mcfg = _model_config(cfg)
    tcfg = _train_config(cfg)
    train, _, _ = _load_splits(root)
    model = M.FusionModel(mcfg, seed=cfg["seed"])
    res = TR.fit(model, train, tcfg, progress=lambda r: log.info("epoch %d  L_total %.4f", r["epoch"], r["L_total"]))
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    M.save_checkpoint(model, out / "checkpoint")
    TR.write_trace_csv(res.trace, out / "trace.csv")
    write_run_manifest(out, "train", cfg, {"data": str(root)}, started)
    print(f"checkpoint {out / 'checkpoint'} sha256:{M.content_hash(out / 'checkpoint')}")
    return 0


def _resolve_checkpoint(path):
    path = Path(path)
    if (path / M.MANIFEST).exists():
        return path
    if (path / "checkpoint" / M.MANIFEST).exists():
        return path / "checkpoint"
    raise UsageError(f"no checkpoint at {path}")


def _parse_weights(spec):
    if spec == "search":
        return None
    try:
        parts = [float(x) for x in spec.split(",")]
    except ValueError:
        raise ConfigError(f"--weights must be 'search' or 'w_d,w_c,w_fu', got {spec!r}") from None
    if len(parts) != 3:
        raise ConfigError(f"--weights needs three values, got {len(parts)}")
    try:
        return F.FusionWeights.normalized(*parts)
    except ContractError as exc:
        raise ConfigError(str(exc)) from None


def cmd_eval(cfg):
    _require(cfg, "checkpoint", "data")
    started = _now()
    ckpt = _resolve_checkpoint(cfg["checkpoint"])
    weights = _parse_weights(cfg["weights"])
    root = _check_data(cfg["data"])
    model = M.load_checkpoint(ckpt)
    _, val, test = _load_splits(root)
    # default: a sibling of the run directory, so the training outputs stay untouched
    out = Path(cfg["out"]) if cfg["out"] else ckpt.parent.with_name(ckpt.parent.name + "-eval")
    out.mkdir(parents=True, exist_ok=True)
    if weights is None:
        val_preds, val_labels = predict(model, val, cfg["tta"])
        F.write_predictions(out / "predictions_val.csv", [r.case_id for r in val], val_preds)
        weights, score = F.weight_search(val_preds, val_labels, step=cfg["step"], objective=cfg["objective"])
        log.info("searched weights %s (validation %s %.4f)", weights.as_tuple(), cfg["objective"], score)
    test_preds, test_labels = predict(model, test, cfg["tta"])
    F.write_predictions(out / "predictions_test.csv", [r.case_id for r in test], test_preds)
    reports = F.evaluate_all(test_preds, test_labels, weights)
    (out / "weights.txt").write_text("w_d = {!r}\nw_c = {!r}\nw_fu = {!r}\n".format(*weights.as_tuple()))
    for name, (csv_text, text) in F.report(reports).items():
        (out / f"metrics_{name}.csv").write_text(csv_text)
        (out / f"metrics_{name}.txt").write_text(text + "\n")
    write_run_manifest(out, "eval", cfg, {"checkpoint": str(ckpt), "data": str(root)}, started)
    print(F.report(reports)["acc"][1])
    bad = [k for k, r in reports.items() if r.has_nan()]
    if bad:
        log.error("NaN metrics in %s", bad)
        return 1
    return 0


def cmd_params(cfg):
    if cfg.get("checkpoint"):
        ckpt = _resolve_checkpoint(cfg["checkpoint"])
        audit = M.manifest_audit(ckpt)
        title = str(ckpt)
    else:
        model = M.FusionModel(_model_config(cfg), seed=0)
        audit = M.count_params(model)
        title = f"{cfg['framework'].upper()}-{cfg['block'].upper()} ({cfg['preset']})"
    print(title)
    print(M.format_audit(audit))
    return 0


def parse_grid(spec):
    if spec in (None, "", "all"):
        return list(GRID_ORDER)
    cells = []
    for item in spec.split(","):
        fw, _, b = item.strip().lower().partition("-")
        if (fw, b) not in GRID_ORDER:
            raise ConfigError(f"grid cell {item!r} is not one of framework-block with framework in {M.FRAMEWORKS}, block in {M.BLOCKS}")
        cells.append((fw, b))
    return cells


def _ablate_cell(args):
    root, fw, block, seed, tdict, tta = args
    train, val, test = _load_splits(root)
    tcfg = TR.TrainConfig(**{**tdict, "seed": seed})
    res = run_cell(train, val, test, fw, block, seed, tcfg, tta=tta)
    res.model = None
    return res


def ablation_table(results):
    """Rows of (config, AVG AUC, AVG ACC, params) with mean/std over seeds of the P_FI test metrics."""
    header = ["Config", "AVG AUC", "AVG ACC", "Params", "Seeds"]
    body = []
    for fw, b in GRID_ORDER:
        cell = [r for r in results if (r.framework, r.block) == (fw, b)]
        if not cell:
            continue
        agg = F.aggregate([r.test["P_FI"] for r in cell])
        params = {r.params for r in cell}
        if len(params) != 1:
            raise AssertionError("parameter count varies with seed")
        body.append([f"{fw.upper()}-{b.upper()}", agg["avg_auc"], agg["avg_acc"], params.pop(), len(cell)])
    return header, body


def cmd_ablate(cfg):
    _require(cfg, "data")
    started = _now()
    root = _check_data(cfg["data"])
    if cfg["seeds"] < 1:
        raise ConfigError("--seeds must be >= 1")
    cells = parse_grid(cfg["grid"])
    tdict = _train_config(cfg).to_dict()
    jobs = [(str(root), fw, b, cfg["seed"] + i, tdict, cfg["tta"]) for fw, b in cells for i in range(cfg["seeds"])]
    if cfg["jobs"] > 1:
        with ProcessPoolExecutor(max_workers=cfg["jobs"]) as pool:
            results = list(pool.map(_ablate_cell, jobs))
    else:
        results = []
        for j in jobs:
            log.info("cell %s-%s seed %d", j[1], j[2], j[3])
            results.append(_ablate_cell(j))
    header, body = ablation_table(results)
    text = F.to_text(header, [[_fmt_cell(c) for c in row] for row in body])
    print(text)
    if cfg["out"]:
        out = Path(cfg["out"])
        out.mkdir(parents=True, exist_ok=True)
        (out / "ablation.csv").write_text(F.to_csv(header, body))
        (out / "ablation.txt").write_text(text + "\n")
        write_run_manifest(out, "ablate", cfg, {"data": str(root)}, started)
    if any(r.test["P_FI"].has_nan() for r in results):
        log.error("NaN metrics in ablation results")
        return 1
    return 0


def _fmt_cell(c):
    if isinstance(c, tuple):
        return f"{100 * c[0]:.2f}+-{100 * c[1]:.2f}"
    return str(c)


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "params": cmd_params, "ablate": cmd_ablate}


# ---------------------------------------------------------------- parser


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=None, help="key = value config file")
    common.add_argument("-v", "--verbose", action="count", default=0)

    p = argparse.ArgumentParser(prog="ammfm", description="Asymmetric multi-modal fusion toolkit")
    sub = p.add_subparsers(dest="command", required=True)
    S = argparse.SUPPRESS

    g = sub.add_parser("gen-data", parents=[common], help="write a synthetic paired dataset")
    g.add_argument("--out", default=S)
    g.add_argument("--cases", default=S)
    g.add_argument("--size", default=S)
    g.add_argument("--derm-snr", dest="derm_snr", default=S)
    g.add_argument("--clin-snr", dest="clin_snr", default=S)
    g.add_argument("--seed", default=S)

    def training_flags(sp):
        sp.add_argument("--epochs", default=S)
        sp.add_argument("--seed", default=S)
        sp.add_argument("--batch-size", dest="batch_size", default=S)
        sp.add_argument("--lr", default=S)
        sp.add_argument("--swa-window", dest="swa_window", default=S)
        sp.add_argument("--augment", default=S, help="comma list from " + ",".join(TR.AUGMENTATIONS))

    t = sub.add_parser("train", parents=[common], help="train one model")
    t.add_argument("--data", default=S)
    t.add_argument("--out", default=S)
    t.add_argument("--framework", choices=M.FRAMEWORKS, default=S)
    t.add_argument("--block", choices=M.BLOCKS, default=S)
    t.add_argument("--preset", default=S, help="heavy backbone preset")
    t.add_argument("--light-preset", dest="light_preset", default=S)
    training_flags(t)

    e = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    e.add_argument("--checkpoint", default=S)
    e.add_argument("--data", default=S)
    e.add_argument("--out", default=S)
    e.add_argument("--tta", action="store_const", const=True, default=S)
    e.add_argument("--weights", default=S, help="'search' or w_d,w_c,w_fu")
    e.add_argument("--objective", choices=("acc", "auc"), default=S)
    e.add_argument("--step", default=S)

    pa = sub.add_parser("params", parents=[common], help="parameter audit")
    pa.add_argument("--framework", choices=M.FRAMEWORKS, default=S)
    pa.add_argument("--block", choices=M.BLOCKS, default=S)
    pa.add_argument("--preset", default=S)
    pa.add_argument("--light-preset", dest="light_preset", default=S)
    pa.add_argument("--checkpoint", default=S)

    a = sub.add_parser("ablate", parents=[common], help="framework x block grid over seeds")
    a.add_argument("--data", default=S)
    a.add_argument("--out", default=S)
    a.add_argument("--seeds", default=S)
    a.add_argument("--grid", default=S, help="'all' or e.g. sff-cat,aff-aab")
    a.add_argument("--jobs", default=S)
    a.add_argument("--tta", action="store_const", const=True, default=S)
    training_flags(a)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 2
    flags = {k: v for k, v in vars(ns).items() if k not in ("command", "config", "verbose")}
    level = logging.DEBUG if ns.verbose > 1 else logging.INFO if ns.verbose else logging.WARNING
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = effective_config(ns.command, flags, ns.config)
        return COMMANDS[ns.command](cfg)
    except (UsageError, ConfigError, ValidationError, IngestionError) as exc:
        print(f"ammfm {ns.command}: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - report, then signal runtime failure
        log.debug("failure", exc_info=True)
        print(f"ammfm {ns.command}: failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
