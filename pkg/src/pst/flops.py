"""Training-cost accounting for the forward, backward and weight-update paths.

Counting model (multiply-accumulate = 2 FLOPs; ReLU, pooling and batch-norm
arithmetic ignored):

* forward:  per example, ``2*O*I*K*K*H'*W'`` per conv layer and ``2*O*I`` per
  dense layer, over every unit, frozen or not;
* backward: twice the forward count, since both the activation gradient and
  the weight gradient products run through every layer;
* update:   ``6`` FLOPs per trainable parameter element per step (momentum
  scale, gradient add, weight-decay multiply-add, learning-rate multiply,
  subtract); frozen elements cost nothing.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

UPDATE_FLOPS_PER_PARAM = 6


def forward_flops_per_example(net) -> int:
    total = 0
    for layer in net.layers:
        kind = layer.spec.kind
        if kind == "conv":
            o, ho, wo = layer.out_shape
            c = layer.in_shape[0]
            k = layer.spec.kernel
            total += 2 * o * c * k * k * ho * wo
        elif kind in ("dense", "classifier"):
            total += 2 * layer.out_shape[0] * int(np.prod(layer.in_shape))
    return total


def trainable_elements(net, segmap, mask=None) -> int:
    if mask is None:
        from .model import build_freeze_mask
        mask = build_freeze_mask(segmap, net)
    return int(sum(m.size - int(np.count_nonzero(m)) for m in mask.values()))


def flops_step(net, segmap, batch_size: int = 1, mask=None) -> tuple[int, int, int]:
    """(forward, backward, update) FLOPs of one SGD step.

    ``mask`` overrides the segment map when a phase trains fewer units than
    are free (reinforcement, classifier fine-tuning).
    """
    fwd = forward_flops_per_example(net) * batch_size
    return fwd, 2 * fwd, UPDATE_FLOPS_PER_PARAM * trainable_elements(net, segmap, mask)


@dataclass
class FlopsLedger:
    forward: int = 0
    backward: int = 0
    update: int = 0
    steps: int = 0

    def add(self, fwd: int, bwd: int, upd: int) -> None:
        self.forward += fwd
        self.backward += bwd
        self.update += upd
        self.steps += 1

    def add_scoring(self, net, examples: int) -> None:
        fwd = forward_flops_per_example(net) * examples
        self.forward += fwd
        self.backward += 2 * fwd

    def snapshot(self) -> tuple[int, int, int]:
        return self.forward, self.backward, self.update

    def since(self, snap) -> tuple[int, int, int]:
        return self.forward - snap[0], self.backward - snap[1], self.update - snap[2]

    def epoch_totals(self) -> dict:
        return {"fwd_flops": self.forward, "bwd_flops": self.backward, "upd_flops": self.update}
