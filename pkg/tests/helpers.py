"""Shared test utilities: tiny configs and a finite-difference gradient oracle."""

from __future__ import annotations

import torch

from dam.config import DAMConfig, apply_overrides

TINY = {
    "seed": "7",
    "encoder.hidden_dim": "32",
    "encoder.layers": "2",
    "encoder.heads": "4",
    "encoder.vocab_size": "512",
    "encoder.max_length": "128",
    "encoder.dropout": "0.0",
    "graph.speaker_dim": "8",
    "graph.distance_dim": "8",
    "graph.relation_dim": "16",
    "gnn.iterations": "2",
    "gnn.heads": "4",
    "parser.epochs": "3",
    "parser.learning_rate": "0.003",
    "trainer.learning_rate": "0.003",
    "trainer.batch_size": "8",
    "trainer.discourse_batch_size": "3",
    "trainer.epochs": "2",
    "trainer.weight_decay": "0.0",
}


def tiny_config(**overrides) -> DAMConfig:
    values = dict(TINY)
    values.update({k.replace("__", "."): str(v) for k, v in overrides.items()})
    return apply_overrides(DAMConfig(), values)


def numerical_grad(fn, x: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    """Central differences of scalar ``fn()`` w.r.t. every entry of ``x`` (modified in place)."""
    grad = torch.zeros_like(x)
    flat, gflat = x.data.view(-1), grad.view(-1)
    for k in range(flat.numel()):
        orig = flat[k].item()
        flat[k] = orig + eps
        plus = float(fn())
        flat[k] = orig - eps
        minus = float(fn())
        flat[k] = orig
        gflat[k] = (plus - minus) / (2 * eps)
    return grad


def relative_error(a: torch.Tensor, b: torch.Tensor) -> float:
    denom = max(a.norm().item(), b.norm().item(), 1e-12)
    return (a - b).norm().item() / denom


def gradient_error(fn, tensors) -> float:
    """Worst relative error between backprop and finite-difference gradients of ``fn``."""
    for t in tensors:
        t.grad = None
    fn().backward()
    worst = 0.0
    for t in tensors:
        analytic = t.grad.detach().clone()
        with torch.no_grad():
            numeric = numerical_grad(fn, t)
        worst = max(worst, relative_error(analytic, numeric))
    return worst
