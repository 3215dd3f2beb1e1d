"""The dynamic routing network: stem, n router-gated residual blocks, head."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from codinet import ops
from codinet.blocks import CostTable, Head, NetSpec, ResidualBlock, Stem, build_cost_table
from codinet.rng import Rng
from codinet.router import GumbelConfig, RouterParams, gumbel_relax, hard_decision, router_forward
from codinet.tensor import Tensor, no_grad


@dataclass
class BinaryOutput:
    """Result of hard-gated inference for a batch."""

    logits: Tensor
    paths: np.ndarray  # (N, n) int8 run/skip bits
    relaxed: np.ndarray  # (N, n) noiseless run probabilities
    costs: np.ndarray  # (N,) MACCs actually executed


class DynamicNet:
    """Gated residual network.

    Args:
        spec: architecture descriptor.
        seed: initialization seed; every parameter group draws from its own stream.
        gumbel: relaxation settings.
        dtype: ``np.float64`` (default) or ``np.float32``.
    """

    def __init__(self, spec: NetSpec, seed: int = 0, gumbel: Optional[GumbelConfig] = None, dtype=np.float64):
        self.spec = spec
        self.gumbel = gumbel or GumbelConfig()
        self.dtype = np.dtype(dtype)
        init = Rng(seed).child("init")
        self.stem = Stem(spec, init.child("stem"), dtype=self.dtype)
        block_spec = spec.block_spec()
        # Zero second layer: each block starts as the identity, so routers are not
        # taught to skip randomly initialised (un-normalised) residual branches.
        self.blocks: List[ResidualBlock] = [
            ResidualBlock(block_spec, init.child("block", k), dtype=self.dtype, residual_scale=0.0)
            for k in range(spec.depth)
        ]
        self.routers: List[RouterParams] = [
            RouterParams(spec.channels, spec.router_hidden, init.child("router", k), dtype=self.dtype)
            for k in range(spec.depth)
        ]
        self.head = Head(spec, init.child("head"), dtype=self.dtype)
        self.cost_table: CostTable = build_cost_table(spec)

    @property
    def depth(self) -> int:
        return len(self.blocks)

    # -- parameters ----------------------------------------------------------------

    def named_parameters(self) -> Dict[str, Tensor]:
        out: Dict[str, Tensor] = {}
        for name, p in self.stem.named_parameters().items():
            out[f"stem.{name}"] = p
        for k, block in enumerate(self.blocks):
            for name, p in block.named_parameters().items():
                out[f"blocks.{k}.{name}"] = p
        for k, router in enumerate(self.routers):
            for name, p in router.named_parameters().items():
                out[f"routers.{k}.{name}"] = p
        for name, p in self.head.named_parameters().items():
            out[f"head.{name}"] = p
        return out

    def parameters(self) -> List[Tensor]:
        return list(self.named_parameters().values())

    def router_parameters(self) -> List[Tensor]:
        return [p for r in self.routers for p in r.parameters()]

    def backbone_parameters(self) -> List[Tensor]:
        return [p for name, p in self.named_parameters().items() if not name.startswith("routers.")]

    def reset_counters(self) -> None:
        for block in self.blocks:
            block.evaluations = 0

    def block_evaluations(self) -> int:
        return sum(b.evaluations for b in self.blocks)

    # -- forward passes ------------------------------------------------------------------

    def _input(self, x) -> Tuple[Tensor, bool]:
        t = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=self.dtype))
        single = t.ndim == len(self.spec.input_shape)
        if single:
            t = t.reshape((1,) + t.shape)
        return t, single

    def forward_relaxed(
        self,
        x,
        rng: Optional[Rng] = None,
        gates: Optional[np.ndarray] = None,
        noise: Optional[np.ndarray] = None,
    ) -> Tuple[Tensor, Tensor]:
        """Training forward: every block runs and is mixed as ``v F(a) + (1 - v) a``.

        Args:
            x: ``(N, *input_shape)`` batch or a single input.
            rng: Gumbel noise stream; ``None`` gives the noiseless relaxation.
            gates: optional ``(N, n)`` constants overriding the router gates.
            noise: optional ``(n, N, 2)`` explicit Gumbel draws.

        Returns:
            ``(logits, path)`` with ``path`` of shape ``(N, n)``.
        """
        xb, single = self._input(x)
        a = self.stem(xb)
        n_batch = xb.shape[0]
        gate_cols = []
        forced = None if gates is None else np.broadcast_to(np.asarray(gates, dtype=self.dtype), (n_batch, self.depth))
        for k, (block, router) in enumerate(zip(self.blocks, self.routers)):
            if forced is not None:
                v = Tensor(np.ascontiguousarray(forced[:, k]))
            else:
                trace = router_forward(router, a)
                v = gumbel_relax(
                    trace,
                    self.gumbel,
                    rng=None if rng is None else rng.child("gumbel", k),
                    noise=None if noise is None else noise[k],
                )
            fa = block(a)
            gate = v.reshape((n_batch,) + (1,) * (a.ndim - 1))
            a = gate * fa + (1.0 - gate) * a
            gate_cols.append(v)
        logits = self.head(a)
        if gate_cols:
            path = ops.stack(gate_cols, axis=1)
        else:
            path = Tensor(np.zeros((n_batch, 0), dtype=self.dtype))
        if single:
            return logits[0], path[0]
        return logits, path

    def forward_binary(self, x, track_grad: bool = False, rng: Optional[Rng] = None) -> BinaryOutput:
        """Inference forward: each block is either run or bypassed, never mixed.

        Skipped blocks are not evaluated for the samples that skip them.  Without
        ``track_grad`` no graph is recorded.  ``rng`` is only consulted when the
        network's Gumbel config enables inference noise.
        """
        if not track_grad:
            with no_grad():
                return self._forward_binary(x, rng)
        return self._forward_binary(x, rng)

    def _forward_binary(self, x, rng: Optional[Rng]) -> BinaryOutput:
        xb, single = self._input(x)
        n_batch = xb.shape[0]
        a = self.stem(xb)
        paths = np.zeros((n_batch, self.depth), dtype=np.int8)
        relaxed = np.zeros((n_batch, self.depth), dtype=np.float64)
        noisy = self.gumbel.inference_noise and rng is not None
        for k, (block, router) in enumerate(zip(self.blocks, self.routers)):
            with no_grad():
                trace = router_forward(router, a.detach())
                if noisy:
                    v = gumbel_relax(trace, self.gumbel, rng=rng.child("gumbel", k))
                    u = (v.data >= 0.5).astype(np.int8)
                else:
                    v = trace.probs[..., 1]
                    u = hard_decision(trace)
            paths[:, k] = u
            relaxed[:, k] = v.data
            run = np.flatnonzero(u)
            if run.size == n_batch:
                a = block(a)
            elif run.size:
                a = ops.scatter_rows(a, run, block(ops.take_rows(a, run)))
        logits = self.head(a)
        costs = paths.astype(np.int64) @ np.asarray(self.cost_table.entries, dtype=np.int64)
        if single:
            logits = logits[0]
        return BinaryOutput(logits=logits, paths=paths, relaxed=relaxed, costs=costs)

    def forward_static(self, x) -> Tensor:
        """Plain backbone: every block runs, routers are ignored."""
        xb, single = self._input(x)
        a = self.stem(xb)
        for block in self.blocks:
            a = block(a)
        logits = self.head(a)
        return logits[0] if single else logits

    # -- helpers for tests and analytics ---------------------------------------------------

    def force_routes(self, path: Sequence[int], margin: float = 20.0) -> None:
        """Make routers input-independent: zero weights, biases favouring ``path``."""
        if len(path) != self.depth:
            raise ValueError(f"path of length {len(path)} for a {self.depth}-block net")
        for router, bit in zip(self.routers, path):
            for p in router.parameters():
                p.data[...] = 0.0
            router.b2.data[...] = [0.0, margin] if bit else [margin, 0.0]


def group_center(paths: Tensor) -> Tensor:
    """Mean over the member axis.

    ``paths`` is ``(M, n)`` for a single group, or ``(L, M, n)`` for ``L`` groups.
    """
    if not isinstance(paths, Tensor):
        paths = Tensor(np.asarray(paths, dtype=np.float64))
    if paths.ndim not in (2, 3) or paths.shape[-2] == 0:
        raise ValueError("group_center needs at least one path per group")
    return paths.mean(axis=-2)
