"""Adam with named parameter groups and row remapping for growing/shrinking tensors."""
from __future__ import annotations

from typing import Iterable, Optional

import torch
from torch.optim.optimizer import Optimizer


class Adam(Optimizer):

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        defaults = dict(lr=lr, betas=betas, eps=eps, name=None)
        super().__init__(params, defaults)

    @torch.no_grad()
    def step(self, closure=None):
        loss = None
        if closure is not None:
            with torch.enable_grad():
                loss = closure()

        for group in self.param_groups:
            b1, b2 = group["betas"]
            lr = group["lr"]
            eps = group["eps"]

            for p in group["params"]:
                if p.grad is None:
                    continue
                g = p.grad
                state = self.state[p]

                # Lazy state initialization
                if len(state) == 0:
                    state["step"] = 0
                    state["m"] = torch.zeros_like(p, memory_format=torch.preserve_format)
                    state["v"] = torch.zeros_like(p, memory_format=torch.preserve_format)

                state["step"] += 1
                state["m"].mul_(b1).add_(g, alpha=1 - b1)
                state["v"].mul_(b2).addcmul_(g, g, value=1 - b2)

                m_hat = state["m"] / (1 - b1 ** state["step"])
                v_hat = state["v"] / (1 - b2 ** state["step"])
                p.sub_(lr * (m_hat / (torch.sqrt(v_hat) + eps)))
        return loss

    def group(self, name: str) -> dict:
        for group in self.param_groups:
            if group["name"] == name:
                return group
        raise KeyError(name)

    def halve_learning_rates(self):
        for group in self.param_groups:
            group["lr"] *= 0.5

    def replace_param(self, old: torch.Tensor, new: torch.Tensor, source_rows: Optional[torch.Tensor] = None):
        """Swap ``old`` for ``new`` in its group, carrying moments row-wise.

        ``source_rows[i]`` is the row of ``old`` that row ``i`` of ``new`` came
        from, or -1 for a fresh row (zero moments).
        """
        for group in self.param_groups:
            for i, p in enumerate(group["params"]):
                if p is not old:
                    continue
                group["params"][i] = new
                state = self.state.pop(old, None)
                if state:
                    if source_rows is None:
                        self.state[new] = state
                    else:
                        self.state[new] = {
                            "step": state["step"],
                            "m": _gather_rows(state["m"], source_rows),
                            "v": _gather_rows(state["v"], source_rows),
                        }
                return
        raise KeyError("parameter is not managed by this optimizer")

    def params(self) -> Iterable[torch.Tensor]:
        for group in self.param_groups:
            yield from group["params"]


def _gather_rows(moment: torch.Tensor, rows: torch.Tensor) -> torch.Tensor:
    if moment.shape[0] == 0:
        return moment.new_zeros((rows.shape[0], *moment.shape[1:]))
    fresh = rows < 0
    out = moment[rows.clamp_min(0)].clone()
    out[fresh] = 0.0
    return out
