"""Run configuration: a flat JSON object of dotted keys.

Example ``config.json``::

    {"paths.workdir": "work", "retriever": "bm25", "k": 100, "joint.alpha": 1.0}

Unknown keys are rejected. Command-line ``--set key=value`` pairs override
file values.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Any, Mapping

from .data import DataError

GROUPS = ("paths", "bm25", "dense", "selector", "joint", "split")
RETRIEVERS = ("bm25", "dense", "joint")


@dataclass(frozen=True)
class RunConfig:
    paths_corpus: str = "corpus.jsonl"
    paths_sessions: str = "sessions.jsonl"
    paths_qrels: str = "qrels.txt"
    paths_workdir: str = "work"
    retriever: str = "bm25"
    k: int = 100
    seed: int = 0
    bm25_k1: float = 1.2
    bm25_b: float = 0.75
    dense_dim: int = 64
    dense_vocab_cap: int = 20000
    dense_scale: float = 6.0
    dense_lr: float = 0.02
    dense_epochs: int = 10
    dense_negatives: int = 8
    selector_lr: float = 0.5
    selector_epochs: int = 200
    selector_threshold: float = 0.5
    selector_weighted: bool = True
    joint_alpha: float = 1.0
    joint_lr: float = 0.05
    joint_epochs: int = 10
    joint_refresh_prl_every: int = 0
    split_test_fraction: float = 0.2

    def __post_init__(self):
        if self.retriever not in RETRIEVERS:
            raise DataError(f"retriever must be one of {RETRIEVERS}, got {self.retriever!r}")
        checks = [
            (self.k >= 1, "k must be >= 1"),
            (self.bm25_k1 >= 0 and 0 <= self.bm25_b <= 1, "bm25.k1 must be >= 0 and bm25.b in [0, 1]"),
            (self.dense_dim >= 2 and self.dense_vocab_cap >= 1, "dense.dim must be >= 2, dense.vocab_cap >= 1"),
            (self.dense_scale > 0 and self.dense_lr > 0 and self.dense_epochs >= 0, "dense scale/lr/epochs out of range"),
            (self.dense_negatives >= 1, "dense.negatives must be >= 1"),
            (self.selector_lr > 0 and self.selector_epochs >= 0, "selector lr/epochs out of range"),
            (0 <= self.selector_threshold <= 1, "selector.threshold must be in [0, 1]"),
            (self.joint_alpha >= 0 and self.joint_lr > 0, "joint.alpha must be >= 0 and joint.lr > 0"),
            (self.joint_epochs >= 0 and self.joint_refresh_prl_every >= 0, "joint epochs/refresh out of range"),
            (0 < self.split_test_fraction < 1, "split.test_fraction must be in (0, 1)"),
        ]
        for ok, msg in checks:
            if not ok:
                raise DataError(msg)

    @property
    def workdir(self) -> Path:
        return Path(self.paths_workdir)

    def to_dict(self) -> dict[str, Any]:
        return {_key(f.name): getattr(self, f.name) for f in fields(self)}

    def override(self, values: Mapping[str, Any]) -> "RunConfig":
        return replace(self, **_coerce(values))


def _key(name: str) -> str:
    head, _, tail = name.partition("_")
    return f"{head}.{tail}" if head in GROUPS and tail else name


_FIELDS = {_key(f.name): f for f in fields(RunConfig)}


def _coerce(values: Mapping[str, Any]) -> dict[str, Any]:
    out = {}
    for key, value in values.items():
        if key not in _FIELDS:
            raise DataError(f"unknown config key {key!r}")
        f = _FIELDS[key]
        typ = f.type if isinstance(f.type, type) else {"str": str, "int": int, "float": float, "bool": bool}[f.type]
        if isinstance(value, str) and typ is not str:
            value = _parse_scalar(key, value, typ)
        if typ is float and isinstance(value, int) and not isinstance(value, bool):
            value = float(value)
        if typ is int and isinstance(value, float) and value.is_integer():
            value = int(value)
        if not isinstance(value, typ) or (typ is int and isinstance(value, bool)):
            raise DataError(f"config key {key!r} expects {typ.__name__}, got {value!r}")
        out[f.name] = value
    return out


def _parse_scalar(key: str, text: str, typ: type):
    if typ is bool:
        low = text.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise DataError(f"config key {key!r} expects a boolean, got {text!r}")
    try:
        return typ(text)
    except ValueError:
        raise DataError(f"config key {key!r} expects {typ.__name__}, got {text!r}") from None


def parse_assignments(items) -> dict[str, str]:
    """``["a.b=1", ...]`` -> ``{"a.b": "1"}``."""
    out = {}
    for item in items or ():
        key, sep, value = item.partition("=")
        if not sep:
            raise DataError(f"expected key=value, got {item!r}")
        out[key.strip()] = value.strip()
    return out


def load_config(path: str | Path | None = None, overrides: Mapping[str, Any] | None = None) -> RunConfig:
    values: dict[str, Any] = {}
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                values = json.load(fh)
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(values, dict):
            raise DataError(f"{path}: config must be a JSON object")
    values.update(overrides or {})
    return RunConfig().override(values)


def save_config(config: RunConfig, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(config.to_dict(), fh, indent=1)
        fh.write("\n")
