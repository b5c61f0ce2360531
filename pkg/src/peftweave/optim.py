"""AdamW and constant-learning-rate Adafactor.

Both optimizers keep per-parameter state as plain tensors so it can be
written to the checkpoint container alongside the weights.
"""

from __future__ import annotations

from typing import Dict, Iterable, List

import torch
from torch import Tensor

ADAMW_BETAS = (0.9, 0.999)
ADAMW_EPS = 1e-8
ADAFACTOR_EPS = 1e-30
ADAFACTOR_CLIP = 1.0
ADAFACTOR_DECAY_EXP = -0.8


def _check_shapes(param: Tensor, grad: Tensor):
    if param.shape != grad.shape:
        raise ValueError(f"gradient shape {tuple(grad.shape)} != parameter shape {tuple(param.shape)}")


def init_adamw_state(param: Tensor) -> Dict[str, Tensor]:
    return {
        "step": torch.zeros((), dtype=torch.int64),
        "exp_avg": torch.zeros_like(param),
        "exp_avg_sq": torch.zeros_like(param),
    }


@torch.no_grad()
def adamw_step(param: Tensor, grad: Tensor, state: Dict[str, Tensor], lr: float, weight_decay: float,
               betas=ADAMW_BETAS, eps: float = ADAMW_EPS):
    """In-place AdamW update with decoupled weight decay and bias correction."""
    _check_shapes(param, grad)
    beta1, beta2 = betas
    state["step"] += 1
    t = int(state["step"])
    m, v = state["exp_avg"], state["exp_avg_sq"]
    m.mul_(beta1).add_(grad, alpha=1 - beta1)
    v.mul_(beta2).addcmul_(grad, grad, value=1 - beta2)
    param.mul_(1 - lr * weight_decay)
    m_hat = m / (1 - beta1**t)
    v_hat = v / (1 - beta2**t)
    param.sub_(lr * m_hat / (v_hat.sqrt() + eps))


def init_adafactor_state(param: Tensor) -> Dict[str, Tensor]:
    state = {"step": torch.zeros((), dtype=torch.int64)}
    if param.dim() >= 2:
        state["row_var"] = param.new_zeros(param.shape[:-1])
        state["col_var"] = param.new_zeros(param.shape[:-2] + param.shape[-1:])
    else:
        state["variance"] = torch.zeros_like(param)
    return state


def factored_second_moment(row_var: Tensor, col_var: Tensor) -> Tensor:
    """Rank-1 reconstruction ``outer(row, col) / mean(row)`` from running means."""
    row_mean = row_var.mean(dim=-1, keepdim=True)
    # all-zero rows (no gradient yet) reconstruct to zero rather than 0/0
    ratio = torch.where(row_mean > 0, row_var / torch.where(row_mean > 0, row_mean, 1.0), 0.0)
    return ratio.unsqueeze(-1) * col_var.unsqueeze(-2)


@torch.no_grad()
def adafactor_step(param: Tensor, grad: Tensor, state: Dict[str, Tensor], lr: float, weight_decay: float,
                   clip_threshold: float = ADAFACTOR_CLIP, decay_exp: float = ADAFACTOR_DECAY_EXP,
                   eps: float = ADAFACTOR_EPS):
    """In-place Adafactor update with an externally fixed step size.

    Matrices keep row/column running means of ``grad**2``; vectors keep the
    full accumulator. ``eps`` is added to the reconstructed second moment,
    not to ``grad**2``, so rank-1 gradients are reconstructed exactly.
    """
    _check_shapes(param, grad)
    state["step"] += 1
    t = int(state["step"])
    beta2 = 1.0 - t**decay_exp
    sq = grad * grad
    if "row_var" in state:
        state["row_var"].mul_(beta2).add_(sq.mean(dim=-1), alpha=1 - beta2)
        state["col_var"].mul_(beta2).add_(sq.mean(dim=-2), alpha=1 - beta2)
        second = factored_second_moment(state["row_var"], state["col_var"])
    else:
        state["variance"].mul_(beta2).add_(sq, alpha=1 - beta2)
        second = state["variance"]
    update = grad * torch.rsqrt(second + eps)
    rms = update.pow(2).mean().sqrt()
    update.div_(torch.clamp(rms / clip_threshold, min=1.0))
    param.mul_(1 - lr * weight_decay)
    param.sub_(lr * update)


class Optimizer:
    """Applies one of the step functions to a fixed list of parameters."""

    KINDS = {
        "adamw": (init_adamw_state, adamw_step),
        "adafactor": (init_adafactor_state, adafactor_step),
    }

    def __init__(self, params: Iterable[Tensor], kind: str, lr: float, weight_decay: float = 0.0):
        if kind not in self.KINDS:
            raise ValueError(f"unknown optimizer {kind!r}")
        if lr <= 0 or weight_decay < 0:
            raise ValueError("learning rate must be positive and weight decay non-negative")
        self.kind = kind
        self.lr = lr
        self.weight_decay = weight_decay
        self.params: List[Tensor] = list(params)
        init, self._step_fn = self.KINDS[kind]
        self.state = [init(p.detach()) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        for p, st in zip(self.params, self.state):
            if p.grad is not None:
                self._step_fn(p.data, p.grad, st, self.lr, self.weight_decay)

    def state_tensors(self) -> Dict[str, Tensor]:
        return {f"optim.{i}.{k}": v for i, st in enumerate(self.state) for k, v in st.items()}

    def load_state_tensors(self, tensors: Dict[str, Tensor]):
        for i, st in enumerate(self.state):
            for k in st:
                name = f"optim.{i}.{k}"
                if name not in tensors:
                    raise KeyError(f"missing optimizer tensor {name!r}")
                if tensors[name].shape != st[k].shape:
                    raise ValueError(f"optimizer tensor {name!r} has shape {tuple(tensors[name].shape)}, "
                                     f"expected {tuple(st[k].shape)}")
                st[k] = tensors[name].clone()
