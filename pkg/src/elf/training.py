"""Optimiser construction, per-epoch decay, loss logging, and state packing
shared by the SFEN and TTS trainers."""
from __future__ import annotations

import base64
import json
import math
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .config import OptimizerConfig


class NonFiniteLossError(FloatingPointError):
    def __init__(self, step: int, term: str, value: float):
        super().__init__(f"step {step}: loss term {term!r} is {value}")
        self.step = step
        self.term = term


def make_optimizer(params, cfg: OptimizerConfig) -> torch.optim.AdamW:
    return torch.optim.AdamW(params, lr=cfg.lr, betas=(cfg.beta1, cfg.beta2), weight_decay=cfg.weight_decay)


def lr_at_epoch(lr0: float, decay: float, epoch: int) -> float:
    return lr0 * decay**epoch


def set_lr(opt: torch.optim.Optimizer, lr: float) -> None:
    for g in opt.param_groups:
        g["lr"] = lr


def check_finite(step: int, terms: dict[str, float]) -> None:
    for name, v in terms.items():
        if not math.isfinite(v):
            raise NonFiniteLossError(step, name, v)


class LossLog:
    """Line-delimited ``{"step", "term", "value"}`` records."""

    def __init__(self, path=None):
        self.path = Path(path) if path is not None else None
        self.records: list[dict] = []
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)

    def log(self, step: int, terms: dict[str, float]) -> None:
        recs = [{"step": step, "term": k, "value": float(v)} for k, v in terms.items()]
        self.records.extend(recs)
        if self.path is not None:
            with open(self.path, "a", encoding="utf-8") as fh:
                for r in recs:
                    fh.write(json.dumps(r) + "\n")

    def series(self, term: str) -> np.ndarray:
        return np.array([r["value"] for r in self.records if r["term"] == term])

    @staticmethod
    def read(path) -> list[dict]:
        with open(path, encoding="utf-8") as fh:
            return [json.loads(line) for line in fh if line.strip()]


def module_tensors(prefix: str, module: nn.Module) -> dict[str, torch.Tensor]:
    return {prefix + k: v for k, v in module.state_dict().items()}


def load_module_tensors(prefix: str, module: nn.Module, tensors: dict[str, torch.Tensor]) -> None:
    state = {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}
    module.load_state_dict(state, strict=True)


def optimizer_tensors(prefix: str, opt: torch.optim.Optimizer, module: nn.Module) -> dict[str, torch.Tensor]:
    """Adam moments and step counts keyed by parameter name."""
    names = {id(p): n for n, p in module.named_parameters()}
    out = {}
    for group in opt.param_groups:
        for p in group["params"]:
            st = opt.state.get(p)
            if not st:
                continue
            name = names[id(p)]
            for key, val in st.items():
                out[f"{prefix}{name}/{key}"] = torch.as_tensor(val, dtype=torch.float32)
    return out


def load_optimizer_tensors(prefix: str, opt: torch.optim.Optimizer, module: nn.Module,
                           tensors: dict[str, torch.Tensor]) -> None:
    params = dict(module.named_parameters())
    for key, val in tensors.items():
        if not key.startswith(prefix):
            continue
        name, slot = key[len(prefix):].rsplit("/", 1)
        p = params[name]
        st = opt.state.setdefault(p, {})
        st[slot] = val.clone().reshape(()) if slot == "step" else val.clone()


def rng_state(np_rng: np.random.Generator) -> dict:
    return {
        "numpy": np_rng.bit_generator.state,
        "torch": base64.b64encode(torch.get_rng_state().numpy().tobytes()).decode("ascii"),
    }


def restore_rng_state(state: dict, np_rng: np.random.Generator) -> None:
    np_rng.bit_generator.state = state["numpy"]
    raw = np.frombuffer(base64.b64decode(state["torch"]), dtype=np.uint8).copy()
    torch.set_rng_state(torch.from_numpy(raw))


def moving_average(x: np.ndarray, window: int) -> np.ndarray:
    if len(x) < window:
        return np.array([])
    c = np.cumsum(np.insert(np.asarray(x, dtype=np.float64), 0, 0.0))
    return (c[window:] - c[:-window]) / window
