"""Shared training plumbing: checkpoint archives, loss-history CSV, hashing."""

from __future__ import annotations

import csv
import hashlib

import numpy as np
import torch

from .archive import CHECKPOINT_MAGIC, load_archive, save_archive


def save_checkpoint(path, modules: dict) -> None:
    """modules: name -> nn.Module; tensors stored as '<name>/<param>'."""
    arrays = {}
    for name, module in modules.items():
        for pname, tensor in module.state_dict().items():
            arrays[f"{name}/{pname}"] = tensor.detach().cpu().numpy()
    save_archive(path, arrays, CHECKPOINT_MAGIC)


def load_checkpoint(path, modules: dict) -> None:
    arrays, _, _ = load_archive(path, expect_magic=CHECKPOINT_MAGIC)
    for name, module in modules.items():
        state = {}
        prefix = f"{name}/"
        for key, arr in arrays.items():
            if key.startswith(prefix):
                ref = module.state_dict()[key[len(prefix):]]
                state[key[len(prefix):]] = torch.from_numpy(arr).to(ref.dtype).reshape(ref.shape)
        module.load_state_dict(state)


def save_history_csv(path, rows) -> None:
    """rows: iterable of (step, term, value)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "term", "value"])
        for step, term, value in rows:
            writer.writerow([step, term, f"{value:.10g}"])


def load_history_csv(path) -> list:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        return [(int(r["step"]), r["term"], float(r["value"])) for r in reader]


def history_hash(rows) -> str:
    h = hashlib.sha256()
    for step, term, value in rows:
        h.update(f"{step},{term},{value:.10g};".encode())
    return h.hexdigest()


def params_hash(modules: dict) -> str:
    h = hashlib.sha256()
    for name in sorted(modules):
        for pname, tensor in sorted(modules[name].state_dict().items()):
            h.update(name.encode())
            h.update(pname.encode())
            h.update(tensor.detach().cpu().numpy().astype(np.float64).tobytes())
    return h.hexdigest()


def to_tensor(img: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    """HxW or HxWxC float image -> 1xCxHxW tensor."""
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return torch.from_numpy(arr).permute(2, 0, 1)[None].to(dtype)


def to_image(t: torch.Tensor) -> np.ndarray:
    """1xCxHxW or CxHxW tensor -> HxWxC (or HxW for C=1) float array."""
    if t.ndim == 4:
        t = t[0]
    arr = t.detach().cpu().permute(1, 2, 0).numpy().astype(np.float64)
    return arr[:, :, 0] if arr.shape[2] == 1 else arr
