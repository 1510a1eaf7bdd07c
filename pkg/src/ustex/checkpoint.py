"""Directory checkpoints: a text manifest plus one raw little-endian blob per tensor.

Layout::

    <dir>/manifest.txt     one line per tensor: ``name<TAB>shape<TAB>dtype``
    <dir>/<tensor name>    raw bytes, C order, little-endian
    <dir>/config.json      TextureConfig used to rebuild the model
    <dir>/state.json       free-form training state (epoch, step, seed, ...)

Optimizer moments are stored as ordinary tensors named
``optim.<param>.exp_avg`` / ``optim.<param>.exp_avg_sq`` / ``optim.<param>.step``.
"""
from __future__ import annotations

import json
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from .errors import ConfigurationError
from .model import TextureAutoencoder, TextureConfig

MANIFEST = "manifest.txt"

_DTYPES = {
    torch.float32: "float32",
    torch.float64: "float64",
    torch.int64: "int64",
}


def write_tensors(directory: Path, tensors: dict[str, torch.Tensor]) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    lines = []
    for name, t in tensors.items():
        t = t.detach().cpu().contiguous()
        if t.dtype not in _DTYPES:
            raise ConfigurationError(f"unsupported tensor dtype {t.dtype} for {name}")
        dtype = _DTYPES[t.dtype]
        arr = t.numpy().astype(np.dtype(dtype).newbyteorder("<"), copy=False)
        arr.tofile(directory / name)
        shape = ",".join(str(s) for s in t.shape)
        lines.append(f"{name}\t{shape}\t{dtype}")
    (directory / MANIFEST).write_text("\n".join(lines) + "\n")


def read_tensors(directory: Path) -> dict[str, torch.Tensor]:
    manifest = directory / MANIFEST
    if not manifest.exists():
        raise ConfigurationError(f"no checkpoint manifest at {manifest}")
    out = {}
    for line in manifest.read_text().splitlines():
        if not line.strip():
            continue
        name, shape, dtype = line.split("\t")
        dims = tuple(int(s) for s in shape.split(",")) if shape else ()
        arr = np.fromfile(directory / name, dtype=np.dtype(dtype).newbyteorder("<"))
        out[name] = torch.from_numpy(arr.astype(dtype).reshape(dims))
    return out


def save_checkpoint(directory, model: TextureAutoencoder, optimizer=None, state: dict | None = None) -> Path:
    directory = Path(directory)
    tensors = dict(model.state_dict())
    if optimizer is not None:
        names = {id(p): n for n, p in model.named_parameters()}
        for group in optimizer.param_groups:
            for p in group["params"]:
                st = optimizer.state.get(p)
                if not st:
                    continue
                name = names[id(p)]
                for key, val in st.items():
                    val = val if torch.is_tensor(val) else torch.tensor(float(val))
                    tensors[f"optim.{name}.{key}"] = val
    write_tensors(directory, tensors)
    (directory / "config.json").write_text(json.dumps(asdict(model.config), indent=2))
    (directory / "state.json").write_text(json.dumps(state or {}, indent=2, sort_keys=True))
    return directory


def load_checkpoint(directory, optimizer_factory=None):
    """Rebuild the model (and optionally its optimizer) from ``directory``.

    ``optimizer_factory(params)`` builds a fresh optimizer whose moments are
    then overwritten from the stored blobs. Returns ``(model, optimizer, state)``.
    """
    directory = Path(directory)
    if not (directory / "config.json").is_file():
        raise ConfigurationError(f"not a checkpoint directory (no config.json): {directory}")
    cfg = json.loads((directory / "config.json").read_text())
    config = TextureConfig(**cfg)
    tensors = read_tensors(directory)
    model = TextureAutoencoder(config)
    model_keys = set(model.state_dict())
    weights = {k: v for k, v in tensors.items() if k in model_keys}
    missing = model_keys - set(weights)
    if missing:
        raise ConfigurationError(f"checkpoint lacks tensors: {sorted(missing)[:5]}")
    first = next(iter(weights.values()))
    model.to(first.dtype)
    model.load_state_dict(weights)
    optimizer = None
    if optimizer_factory is not None:
        optimizer = optimizer_factory(model.parameters())
        for name, p in model.named_parameters():
            prefix = f"optim.{name}."
            st = {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}
            if st:
                optimizer.state[p] = {k: v.clone() for k, v in st.items()}
    state_file = directory / "state.json"
    state = json.loads(state_file.read_text()) if state_file.exists() else {}
    return model, optimizer, state
