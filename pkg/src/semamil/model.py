"""Full pipeline assembly: project, reorder, scan stack, pool, classify.

Also provides parameter/FLOP accounting, a binary checkpoint format, and
the two pooling baselines used for qualitative comparison.

Checkpoint format (little-endian): magic b"SEMM", version u32, u32 JSON
length + config JSON (utf-8), then every parameter tensor in declaration
order, each as u32 ndim, ndim u32 dims, float64 payload.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .bagdata import Bag
from .reorder import (RouterParams, assign, build_permutation, router_forward,
                      apply_permutation, restore_order, Permutation)
from .srsm import BlockParams, BlockTrace, DIRECTION_TAGS, srsm_block

CHECKPOINT_MAGIC = b"SEMM"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    """Malformed or mismatched checkpoint file."""


@dataclass
class ModelConfig:
    D_in: int = 32
    d: int = 16
    hidden: int = 32
    n_clusters: int = 8
    K: int = 8
    n_state: int = 4
    n_layers: int = 2
    n_classes: int = 2
    assign_mode: str = "hard"  # or "gumbel"
    tau: float = 1.0
    directions: tuple[str, ...] = DIRECTION_TAGS
    lambda_router: float = 0.01

    def __post_init__(self):
        self.directions = tuple(self.directions)
        for name in ("D_in", "d", "hidden", "n_clusters", "K", "n_state",
                     "n_classes"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.n_layers < 0:
            raise ValueError("n_layers must be nonnegative")
        if self.n_clusters < 2:
            raise ValueError("n_clusters must be >= 2")
        if self.assign_mode not in ("hard", "gumbel"):
            raise ValueError(f"unknown assign_mode {self.assign_mode!r}")
        if self.lambda_router < 0:
            raise ValueError("lambda_router must be nonnegative")

    def to_dict(self) -> dict:
        out = asdict(self)
        out["directions"] = list(self.directions)
        return out

    @staticmethod
    def from_dict(raw: dict) -> "ModelConfig":
        return ModelConfig(**raw)


@dataclass
class Trace:
    """Per-forward diagnostics: cluster labels, permutation, query picks."""
    c: np.ndarray
    pi: np.ndarray
    pi_inv: np.ndarray
    query_idx_per_layer: list[np.ndarray]
    scan_applied_per_layer: list[bool]
    sr_applied: bool
    P: Tensor | None  # router assignment probabilities (None when SR is off)


@dataclass
class SemaMILModel:
    config: ModelConfig
    Wproj: Tensor            # (d, D_in)
    router: RouterParams
    blocks: list[BlockParams]
    Wpool: Tensor            # (d, 2d) merges context mean and query mean
    Whead: Tensor            # (n_classes, d)
    bhead: Tensor            # (n_classes,)

    @staticmethod
    def init(config: ModelConfig, seed: int = 0) -> "SemaMILModel":
        rng = np.random.default_rng(seed)
        c = config
        return SemaMILModel(
            config=c,
            Wproj=Tensor(rng.normal(0.0, 1.0 / np.sqrt(c.D_in), (c.d, c.D_in)),
                         requires_grad=True),
            router=RouterParams.init(c.d, c.hidden, c.n_clusters, rng),
            blocks=[BlockParams.init(c.d, c.n_state, rng) for _ in range(c.n_layers)],
            Wpool=Tensor(rng.normal(0.0, 1.0 / np.sqrt(2 * c.d), (c.d, 2 * c.d)),
                         requires_grad=True),
            Whead=Tensor(np.zeros((c.n_classes, c.d)), requires_grad=True),
            bhead=Tensor(np.zeros(c.n_classes), requires_grad=True),
        )

    def named_params(self) -> list[tuple[str, Tensor]]:
        out = [("Wproj", self.Wproj)]
        out += self.router.named_params()
        for i, blk in enumerate(self.blocks):
            out += [(f"block{i}.{n}", t) for n, t in blk.named_params()]
        out += [("Wpool", self.Wpool), ("Whead", self.Whead), ("bhead", self.bhead)]
        return out

    def zero_grad(self):
        for _, p in self.named_params():
            p.zero_grad()


def forward(model: SemaMILModel, bag: Bag, *, sr_enabled: bool = True,
            srsm_enabled: bool = True, gumbel_seed: int = 0) -> tuple[Tensor, Trace]:
    """Bag logits plus a diagnostic trace.

    With SR disabled the permutation is identity and the router never runs;
    with SRSM disabled each block takes the pure-skip path. Evaluation
    should use hard assignment; gumbel_seed only matters in gumbel mode.
    """
    cfg = model.config
    if bag.D != cfg.D_in:
        raise ValueError(f"bag width {bag.D} != model D_in {cfg.D_in}")
    L = bag.L
    if L <= cfg.K:
        raise ValueError(f"query set exhausts context: K={cfg.K} with N={L}")

    Xd = ad.matmul(ad.as_tensor(bag.X.astype(np.float64)), ad.transpose(model.Wproj))

    if sr_enabled:
        Z = router_forward(model.router, Xd)
        assignment = assign(Z, mode=cfg.assign_mode, tau=cfg.tau, seed=gumbel_seed)
        perm = build_permutation(assignment.c)
        P = assignment.P
        c = assignment.c
    else:
        perm = build_permutation(np.zeros(L, dtype=np.int64))
        P = None
        c = np.zeros(L, dtype=np.int64)

    H = apply_permutation(Xd, perm)
    coords = bag.coords[perm.pi]

    query_idx_layers: list[np.ndarray] = []
    scan_flags: list[bool] = []
    last_trace: BlockTrace | None = None
    for blk in model.blocks:
        H, btrace = srsm_block(H, coords, blk, cfg.K,
                               direction_tags=cfg.directions,
                               scan_enabled=srsm_enabled)
        query_idx_layers.append(btrace.query_idx)
        scan_flags.append(btrace.scan_applied)
        last_trace = btrace

    Y = restore_order(H, perm)

    if last_trace is not None:
        ctx_restored_idx = perm.pi[last_trace.context_idx]
        v_ctx = ad.tmean(ad.gather_rows(Y, ctx_restored_idx), axis=0)
        v_query = ad.tmean(last_trace.Q, axis=0)
    else:
        v_ctx = ad.tmean(Y, axis=0)
        v_query = ad.tmean(Y, axis=0)

    v = ad.matmul(model.Wpool, ad.concat([v_ctx, v_query]))
    logits = ad.add(ad.matmul(model.Whead, v), model.bhead)
    trace = Trace(c=c, pi=perm.pi, pi_inv=perm.pi_inv,
                  query_idx_per_layer=query_idx_layers,
                  scan_applied_per_layer=scan_flags,
                  sr_applied=sr_enabled, P=P)
    return logits, trace


def count_params(config: ModelConfig) -> int:
    """Trainable scalar count; A0 is a fixed constant and not included."""
    return sum(v for v in param_breakdown(config).values())


def param_breakdown(config: ModelConfig) -> dict[str, int]:
    c = config
    per_block = (c.d                      # w_score
                 + c.d * c.n_state        # Cout
                 + c.d                    # Dskip
                 + c.d * c.d + c.d        # W_delta, b_delta
                 + c.n_state * c.d + c.n_state)  # W_B, b_B
    return {
        "proj": c.d * c.D_in,
        "router": c.hidden * c.d + c.n_clusters * c.hidden,
        "blocks": c.n_layers * per_block,
        "pool": c.d * 2 * c.d,
        "head": c.n_classes * c.d + c.n_classes,
    }


def count_flops(config: ModelConfig, L: int) -> int:
    """Forward-pass FLOPs at sequence length L, with multiply-accumulate = 2.

    Affine in L by construction. Term by term (N = L in every block,
    K = config.K, m = N - K):

      projection      2 * L * D_in * d
      router          2 * L * (d*hidden + hidden*n_clusters)
      per block:
        selector      2 * N * d                    (scores)
        conditioning  2 * (d*d + d*n_state)        (Delta and B' maps)
        discretize    6 * d * n_state              (z, exp, phi, scale)
        scans         4 * m * d * (2*n_state + 2)  (four directions)
        fusion        4 * m * d                    (sum of 4 + scale)
        gating        K * d
        residual+norm 6 * N * d                    (add + standardize)
      pooling         N * d                        (context + query means)
      merge           2 * d * (2*d)                (Wpool)
      head            2 * n_classes * d

    Elementwise activations (GELU, sigmoid, softplus, softmax) are not
    counted, matching the convention above.
    """
    c = config
    N = L
    m = N - c.K
    if m < 1:
        raise ValueError("L must exceed K")
    total = 2 * L * c.D_in * c.d
    total += 2 * L * (c.d * c.hidden + c.hidden * c.n_clusters)
    per_block = (2 * N * c.d
                 + 2 * (c.d * c.d + c.d * c.n_state)
                 + 6 * c.d * c.n_state
                 + 4 * m * c.d * (2 * c.n_state + 2)
                 + 4 * m * c.d
                 + c.K * c.d
                 + 6 * N * c.d)
    total += c.n_layers * per_block
    total += N * c.d + 2 * c.d * (2 * c.d) + 2 * c.n_classes * c.d
    return total


def _write_array(buf: bytearray, arr: np.ndarray) -> None:
    buf += struct.pack("<I", arr.ndim)
    for dim in arr.shape:
        buf += struct.pack("<I", dim)
    buf += np.ascontiguousarray(arr, dtype="<f8").tobytes()


def _read_array(raw: bytes, off: int) -> tuple[np.ndarray, int]:
    (ndim,) = struct.unpack_from("<I", raw, off)
    off += 4
    shape = []
    for _ in range(ndim):
        (dim,) = struct.unpack_from("<I", raw, off)
        shape.append(dim)
        off += 4
    count = int(np.prod(shape)) if shape else 1
    arr = np.frombuffer(raw, dtype="<f8", count=count, offset=off).reshape(shape)
    off += count * 8
    return arr.copy(), off


def save_checkpoint(model: SemaMILModel, path) -> None:
    buf = bytearray()
    buf += CHECKPOINT_MAGIC
    buf += struct.pack("<I", CHECKPOINT_VERSION)
    cfg = json.dumps(model.config.to_dict(), sort_keys=True).encode("utf-8")
    buf += struct.pack("<I", len(cfg))
    buf += cfg
    for _, p in model.named_params():
        _write_array(buf, p.data)
    Path(path).write_bytes(bytes(buf))


def load_checkpoint(path) -> SemaMILModel:
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad checkpoint magic {raw[:4]!r}")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, "
                              f"expected {CHECKPOINT_VERSION}")
    (clen,) = struct.unpack_from("<I", raw, 8)
    config = ModelConfig.from_dict(json.loads(raw[12:12 + clen].decode("utf-8")))
    model = SemaMILModel.init(config, seed=0)
    off = 12 + clen
    for name, p in model.named_params():
        arr, off = _read_array(raw, off)
        if arr.shape != p.data.shape:
            raise CheckpointError(f"{path}: parameter {name} has shape {arr.shape}, "
                                  f"config implies {p.data.shape}")
        p.data = arr
    if off != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - off} trailing bytes")
    return model


@dataclass
class PoolBaseline:
    """Linear head on a mean- or max-pooled bag vector."""
    kind: str  # "mean" or "max"
    n_classes: int
    D_in: int
    Whead: Tensor
    bhead: Tensor

    @staticmethod
    def init(kind: str, D_in: int, n_classes: int, seed: int = 0) -> "PoolBaseline":
        if kind not in ("mean", "max"):
            raise ValueError(f"unknown baseline kind {kind!r}")
        del seed  # zero-initialized head; kept for a uniform constructor
        return PoolBaseline(kind=kind, n_classes=n_classes, D_in=D_in,
                            Whead=Tensor(np.zeros((n_classes, D_in)), requires_grad=True),
                            bhead=Tensor(np.zeros(n_classes), requires_grad=True))

    def named_params(self):
        return [("Whead", self.Whead), ("bhead", self.bhead)]

    def zero_grad(self):
        for _, p in self.named_params():
            p.zero_grad()


def baseline_forward(model: PoolBaseline, bag: Bag, **_) -> tuple[Tensor, None]:
    X = ad.as_tensor(bag.X.astype(np.float64))
    v = ad.tmean(X, axis=0) if model.kind == "mean" else ad.amax0(X)
    return ad.add(ad.matmul(model.Whead, v), model.bhead), None
