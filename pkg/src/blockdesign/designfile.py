"""Versioned design files: lossless JSON persistence of search results.

Treatments and weights are serialized through Python's repr-exact float
formatting, so a reloaded design reproduces objectives bit-for-bit.  A
hash of the model specification guards against evaluating a design
under a different model than it was found for.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .errors import FileFormatError, ValidationError
from .model import Block, Design, ModelSpec

DESIGN_FORMAT_VERSION = 1


def model_hash(spec: ModelSpec) -> str:
    payload = {
        "link": spec.link,
        "terms": [list(t) for t in spec.terms],
        "q": spec.q,
        "m": spec.m,
        "box": [list(iv) for iv in spec.box],
    }
    digest = hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()
    return digest[:16]


@dataclass(frozen=True)
class DesignFile:
    design: Design
    objective: float
    method_name: str
    method_meta: dict
    seed: int
    model_digest: str
    timestamp: str

    def to_payload(self) -> dict:
        return {
            "format_version": DESIGN_FORMAT_VERSION,
            "model_hash": self.model_digest,
            "method": self.method_name,
            "method_meta": self.method_meta,
            "seed": self.seed,
            "objective": self.objective,
            "blocks": [b.treatments.tolist() for b in self.design.blocks],
            "weights": self.design.weights.tolist(),
            "timestamp": self.timestamp,
        }


def write_design(
    path,
    design: Design,
    objective: float,
    spec: ModelSpec,
    method_name: str,
    method_meta: dict,
    seed: int,
) -> DesignFile:
    df = DesignFile(
        design=design,
        objective=float(objective),
        method_name=method_name,
        method_meta=method_meta,
        seed=int(seed),
        model_digest=model_hash(spec),
        timestamp=datetime.now(timezone.utc).isoformat(),
    )
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(df.to_payload(), fh, indent=2)
        fh.write("\n")
    return df


def read_design(path, spec: ModelSpec | None = None) -> DesignFile:
    path = Path(path)
    try:
        with open(path) as fh:
            data = json.load(fh)
    except FileNotFoundError as e:
        raise FileFormatError(f"design file not found: {path}") from e
    except json.JSONDecodeError as e:
        raise FileFormatError(f"cannot parse {path}: {e}") from e
    version = data.get("format_version")
    if version != DESIGN_FORMAT_VERSION:
        raise FileFormatError(f"{path}: design format version {version} not supported")
    try:
        blocks = tuple(Block(np.asarray(b, dtype=float)) for b in data["blocks"])
        design = Design(blocks, np.asarray(data["weights"], dtype=float))
        df = DesignFile(
            design=design,
            objective=float(data["objective"]),
            method_name=data["method"],
            method_meta=dict(data.get("method_meta", {})),
            seed=int(data["seed"]),
            model_digest=data["model_hash"],
            timestamp=data.get("timestamp", ""),
        )
    except (KeyError, TypeError) as e:
        raise FileFormatError(f"{path}: malformed design file ({e})") from e
    if spec is not None and df.model_digest != model_hash(spec):
        raise ValidationError(
            f"{path}: design was found for a different model "
            f"(hash {df.model_digest}, current {model_hash(spec)})"
        )
    return df
