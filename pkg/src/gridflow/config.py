"""Plain-text experiment configs: `key = value` lines with `#` comments.

Unknown keys are rejected with their line number so a typo cannot silently
fall back to a default. Every run writes the fully resolved config next to
its outputs, which is enough to re-run it exactly.
"""

from __future__ import annotations

import os

from .errors import ParseError

__all__ = ["TRAIN_KEYS", "parse_config", "resolve_train_config", "write_resolved"]

# key -> (type, default); None default means required.
TRAIN_KEYS = {
    "schedule": (str, "linear"),
    "objective": (str, "rescaled_score"),
    "hidden": (int, 128),
    "layers": (int, 4),
    "heads": (int, 8),
    "time_dim": (int, 64),
    "f_max": (float, 1e3),
    "mlp_ratio": (int, 4),
    "dropout": (float, 0.01),
    "iterations": (int, 20_000),
    "batch_size": (int, 128),
    "learning_rate": (float, 3e-4),
    "beta1": (float, 0.9),
    "beta2": (float, 0.999),
    "adam_eps": (float, 1e-8),
    "checkpoint_interval": (int, 5_000),
    "log_interval": (int, 100),
    "seed": (int, 0),
    "dataset": (str, None),
    "out_dir": (str, None),
}


def _coerce(key, raw, typ, lineno):
    try:
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        return raw
    except ValueError:
        raise ParseError(f"key {key!r}: cannot parse {raw!r} as {typ.__name__}", line=lineno)


def parse_config(path: str | os.PathLike, keys: dict = TRAIN_KEYS) -> dict:
    values = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            stripped = line.split("#", 1)[0].strip()
            if not stripped:
                continue
            if "=" not in stripped:
                raise ParseError("expected 'key = value'", line=lineno)
            key, raw = (part.strip() for part in stripped.split("=", 1))
            if key not in keys:
                raise ParseError(f"unknown key {key!r}", line=lineno)
            if key in values:
                raise ParseError(f"duplicate key {key!r}", line=lineno)
            values[key] = _coerce(key, raw, keys[key][0], lineno)
    for key, (_, default) in keys.items():
        if key not in values:
            if default is None:
                raise ParseError(f"missing required key {key!r}")
            values[key] = default
    return values


def resolve_train_config(values: dict):
    """Split a parsed config into (ModelConfig, TrainConfig, dataset, out_dir)."""
    from .net import ModelConfig
    from .objectives import TrainConfig

    mc = ModelConfig(
        hidden=values["hidden"],
        layers=values["layers"],
        heads=values["heads"],
        time_dim=values["time_dim"],
        f_max=values["f_max"],
        mlp_ratio=values["mlp_ratio"],
        dropout=values["dropout"],
    )
    tc = TrainConfig(
        objective=values["objective"],
        schedule=values["schedule"],
        iterations=values["iterations"],
        batch_size=values["batch_size"],
        learning_rate=values["learning_rate"],
        beta1=values["beta1"],
        beta2=values["beta2"],
        adam_eps=values["adam_eps"],
        seed=values["seed"],
        checkpoint_interval=values["checkpoint_interval"],
        log_interval=values["log_interval"],
    )
    return mc, tc, values["dataset"], values["out_dir"]


def write_resolved(values: dict, path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for key in sorted(values):
            fh.write(f"{key} = {values[key]}\n")
