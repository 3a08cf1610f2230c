"""Run archives and the append-only metrics CSV.

Checkpoint layout (numpy ``.npz``, format version 1):

* ``__format__``  -- int array ``[1]``
* ``__meta__``    -- UTF-8 JSON (uint8 array): ``{"config": ..., "extra": ...}``
* ``__rng__``     -- uint8 array, torch CPU generator state (may be empty)
* ``<module>/<tensor name>`` -- one float/int array per parameter or buffer

Module names are free-form (``pair``, ``flow``, ``iaf``, ``disc``...).
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

FORMAT_VERSION = 1
METRIC_FIELDS = ("run_id", "epoch", "split", "metric", "value")


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(path: str | Path, config: dict, modules: dict[str, nn.Module],
                    generator: torch.Generator | None = None, extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays: dict[str, np.ndarray] = {
        "__format__": np.array([FORMAT_VERSION]),
        "__meta__": np.frombuffer(json.dumps({"config": config, "extra": extra or {}},
                                             sort_keys=True).encode(), dtype=np.uint8),
        "__rng__": (generator.get_state().numpy() if generator is not None
                    else np.zeros(0, dtype=np.uint8)),
    }
    for mname, module in modules.items():
        if "/" in mname:
            raise CheckpointError(f"module name may not contain '/': {mname}")
        for key, tensor in module.state_dict().items():
            arrays[f"{mname}/{key}"] = tensor.detach().cpu().numpy()
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        np.savez(fh, **arrays)
    os.replace(tmp, path)
    return path


@dataclass
class Checkpoint:
    config: dict
    extra: dict
    states: dict[str, dict[str, torch.Tensor]]
    rng_state: torch.Tensor | None

    def load_into(self, name: str, module: nn.Module):
        if name not in self.states:
            raise CheckpointError(f"checkpoint has no module {name!r}; has {sorted(self.states)}")
        module.load_state_dict(self.states[name])
        return module

    def generator(self) -> torch.Generator | None:
        if self.rng_state is None:
            return None
        g = torch.Generator()
        g.set_state(self.rng_state)
        return g


def load_checkpoint(path: str | Path) -> Checkpoint:
    try:
        data = np.load(path, allow_pickle=False)
    except (OSError, ValueError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    with data:
        if "__format__" not in data or int(data["__format__"][0]) != FORMAT_VERSION:
            raise CheckpointError(f"{path}: unsupported or missing format version")
        meta = json.loads(data["__meta__"].tobytes().decode())
        rng = data["__rng__"]
        states: dict[str, dict[str, torch.Tensor]] = {}
        for key in data.files:
            if key.startswith("__"):
                continue
            mname, tname = key.split("/", 1)
            states.setdefault(mname, {})[tname] = torch.from_numpy(data[key].copy())
    return Checkpoint(meta["config"], meta["extra"], states,
                      torch.from_numpy(rng.copy()) if rng.size else None)


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def append_metrics(path: str | Path, rows) -> None:
    """Append (run_id, epoch, split, metric, value) rows, writing a header for new files."""
    path = Path(path)
    new = not path.exists() or path.stat().st_size == 0
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if new:
            w.writerow(METRIC_FIELDS)
        for r in rows:
            w.writerow([_fmt(v) for v in (r.run_id, r.epoch, r.split, r.metric, r.value)])


def read_metrics(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        r["epoch"] = int(r["epoch"])
        r["value"] = float(r["value"])
    return rows
