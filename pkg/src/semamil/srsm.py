"""Query-conditioned state-space scanning over the reordered patch sequence.

A lightweight linear scorer picks the top-K patches as queries; their pooled
embedding conditions the discretization step (Delta) and the input map (B')
of a diagonal continuous-time system

    h'(t) = A0 h(t) + B' u(t),   y(t) = Cout h(t) + Dskip u(t)

which is discretized by zero-order hold:

    Ad = exp(Delta * A0),   Bd = ((exp(Delta * A0) - 1) / (Delta * A0)) * B'

Each of the d channels carries its own Delta and owns an independent
n_state-dimensional state; A0 is the fixed diagonal (-1, -2, ..., -n_state)
shared across channels, and B' is shared across channels. The remaining
(context) patches are scanned causally under four traversal orders and the
outputs averaged. Query rows bypass the scan and re-enter through the
residual; the block ends with a parameter-free LayerNorm.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

DIRECTION_TAGS = ("sem-fwd", "sem-bwd", "spatial-fwd", "spatial-bwd")
DELTA_FLOOR = 1e-4


@dataclass
class SelectorParams:
    w_score: Tensor  # (d,) importance projection

    @staticmethod
    def init(d: int, rng: np.random.Generator) -> "SelectorParams":
        return SelectorParams(
            w_score=Tensor(rng.normal(0.0, 1.0 / np.sqrt(d), (d,)), requires_grad=True))


@dataclass
class QuerySplit:
    query_idx: np.ndarray    # (K,) ascending positions in the input
    context_idx: np.ndarray  # (N-K,) ascending positions in the input
    Q: Tensor                # (K, d) gated query rows
    Cseq: Tensor             # (N-K, d) context rows, input order preserved
    gates: Tensor            # (K,) sigmoid of the selected scores


@dataclass
class SSMChannelParams:
    A0: np.ndarray       # (n_state,) fixed, strictly negative diagonal
    Cout: Tensor         # (d, n_state) per-channel output rows
    Dskip: Tensor        # (d,) per-channel skip scalars
    W_delta: Tensor      # (d, d)
    b_delta: Tensor      # (d,)
    W_B: Tensor          # (n_state, d)
    b_B: Tensor          # (n_state,)

    def __post_init__(self):
        if np.any(self.A0 >= 0):
            raise ValueError("A0 entries must be strictly negative")

    @staticmethod
    def base_transition(n_state: int) -> np.ndarray:
        return -np.arange(1, n_state + 1, dtype=np.float64)

    @staticmethod
    def init(d: int, n_state: int, rng: np.random.Generator) -> "SSMChannelParams":
        return SSMChannelParams(
            A0=SSMChannelParams.base_transition(n_state),
            Cout=Tensor(rng.normal(0.0, 0.5 / np.sqrt(n_state), (d, n_state)), requires_grad=True),
            Dskip=Tensor(np.ones(d), requires_grad=True),
            W_delta=Tensor(rng.normal(0.0, 1.0 / np.sqrt(d), (d, d)), requires_grad=True),
            b_delta=Tensor(np.zeros(d), requires_grad=True),
            W_B=Tensor(rng.normal(0.0, 1.0 / np.sqrt(d), (n_state, d)), requires_grad=True),
            b_B=Tensor(np.ones(n_state), requires_grad=True),
        )

    def named_params(self):
        return [("Cout", self.Cout), ("Dskip", self.Dskip),
                ("W_delta", self.W_delta), ("b_delta", self.b_delta),
                ("W_B", self.W_B), ("b_B", self.b_B)]


@dataclass
class DiscreteStep:
    Ad: Tensor  # (d, n_state), entries in (0, 1)
    Bd: Tensor  # (d, n_state)


@dataclass
class DirectionSet:
    orders: tuple[np.ndarray, ...]  # permutations of context positions


def select_queries(X, sel: SelectorParams, K: int) -> QuerySplit:
    """Split the sequence into top-K gated queries and the remaining context.

    Scores are X @ w_score; ties go to the lower index. Query rows are
    multiplied by sigmoid(score) so the scorer receives gradient despite the
    hard top-K.
    """
    X = ad.as_tensor(X)
    N = X.shape[0]
    if not 1 <= K < N:
        raise ValueError(f"query set exhausts context: K={K} with N={N}")
    scores = ad.matmul(X, sel.w_score)
    order = np.argsort(-scores.data, kind="stable")  # stable: ties keep low index first
    query_idx = np.sort(order[:K])
    context_idx = np.sort(order[K:])
    gates = ad.sigmoid(ad.gather_rows(scores, query_idx))
    Q = ad.mul(ad.gather_rows(X, query_idx), ad.reshape(gates, (K, 1)))
    Cseq = ad.gather_rows(X, context_idx)
    return QuerySplit(query_idx=query_idx, context_idx=context_idx,
                      Q=Q, Cseq=Cseq, gates=gates)


def derive_step_params(split: QuerySplit, p: SSMChannelParams) -> tuple[Tensor, Tensor]:
    """Condition (Delta, B') on the pooled query embedding.

    The query set is pooled by column mean so K stays a runtime knob. Delta
    goes through softplus plus a 1e-4 floor: the affine map can produce
    nonpositive values, and zero-order hold needs Delta > 0.
    """
    qbar = ad.tmean(split.Q, axis=0)
    raw = ad.add(ad.matmul(p.W_delta, qbar), p.b_delta)
    delta = ad.add(ad.softplus(raw), DELTA_FLOOR)
    bprime = ad.add(ad.matmul(p.W_B, qbar), p.b_B)
    return delta, bprime


def discretize_zoh(A0, delta, bprime) -> DiscreteStep:
    """Zero-order-hold step per (channel, state) pair.

    Ad[c,s] = exp(delta[c] * A0[s]);
    Bd[c,s] = ((exp(delta[c]*A0[s]) - 1) / (delta[c]*A0[s])) * bprime[s],
    with a series branch for tiny |delta * A0| (see expm1_over_x).
    """
    A0 = np.asarray(A0, dtype=np.float64)
    delta = ad.as_tensor(delta)
    bprime = ad.as_tensor(bprime)
    if np.any(delta.data <= 0):
        raise ValueError("Delta must be strictly positive")
    if np.any(A0 >= 0):
        raise ValueError("A0 entries must be strictly negative")
    d, n = delta.shape[0], A0.shape[0]
    z = ad.mul(ad.reshape(delta, (d, 1)), A0.reshape(1, n))
    Ad = ad.texp(z)
    Bd = ad.mul(ad.expm1_over_x(z), ad.reshape(bprime, (1, n)))
    return DiscreteStep(Ad=Ad, Bd=Bd)


def _invert(order: np.ndarray) -> np.ndarray:
    inv = np.empty_like(order)
    inv[order] = np.arange(len(order))
    return inv


def scan_causal(step: DiscreteStep, p: SSMChannelParams, inputs, order) -> Tensor:
    """One causal pass over `inputs` traversed in `order`, starting at h=0.

    Outputs are written back to the original row positions, so the result
    aligns with `inputs` regardless of the traversal.
    """
    inputs = ad.as_tensor(inputs)
    order = np.asarray(order, dtype=np.int64)
    M, d = inputs.shape
    if not np.array_equal(np.sort(order), np.arange(M)):
        raise ValueError("scan order must be a permutation of the input rows")
    U = ad.reshape(ad.gather_rows(inputs, order), (1, M, d))
    Y = ad.ssm_scan(step.Ad, step.Bd, p.Cout, p.Dskip, U)
    return ad.gather_rows(ad.take0(Y, 0), _invert(order))


def build_directions(context_coords: np.ndarray,
                     tags=DIRECTION_TAGS) -> DirectionSet:
    """Traversal orders over context positions.

    sem-fwd / sem-bwd walk the (already semantically reordered) sequence
    forward and backward; spatial-fwd / spatial-bwd walk the patches in
    row-major grid order and its reverse.
    """
    m = context_coords.shape[0]
    identity = np.arange(m)
    spatial = np.lexsort((context_coords[:, 1], context_coords[:, 0]))
    orders = []
    for tag in tags:
        if tag == "sem-fwd":
            orders.append(identity)
        elif tag == "sem-bwd":
            orders.append(identity[::-1].copy())
        elif tag == "spatial-fwd":
            orders.append(spatial)
        elif tag == "spatial-bwd":
            orders.append(spatial[::-1].copy())
        else:
            raise ValueError(f"unknown scan direction {tag!r}")
    return DirectionSet(orders=tuple(orders))


def multi_direction_fuse(step: DiscreteStep, p: SSMChannelParams, Cseq,
                         directions: DirectionSet) -> Tensor:
    """Mean of the causal scans over each direction, aligned to input order.

    All directions run through one batched scan; per element the arithmetic
    is identical to four separate scan_causal calls, and the final mean uses
    a fixed summation order, so the result is bit-reproducible.
    """
    Cseq = ad.as_tensor(Cseq)
    M, d = Cseq.shape
    R = len(directions.orders)
    U = ad.stack([ad.gather_rows(Cseq, order) for order in directions.orders])
    Y = ad.ssm_scan(step.Ad, step.Bd, p.Cout, p.Dskip, U)
    total = None
    for r, order in enumerate(directions.orders):
        aligned = ad.gather_rows(ad.take0(Y, r), _invert(np.asarray(order)))
        total = aligned if total is None else ad.add(total, aligned)
    return ad.mul(total, 1.0 / R)


@dataclass
class BlockParams:
    selector: SelectorParams
    ssm: SSMChannelParams

    @staticmethod
    def init(d: int, n_state: int, rng: np.random.Generator) -> "BlockParams":
        return BlockParams(selector=SelectorParams.init(d, rng),
                           ssm=SSMChannelParams.init(d, n_state, rng))

    def named_params(self):
        out = [("selector.w_score", self.selector.w_score)]
        out += [(f"ssm.{n}", t) for n, t in self.ssm.named_params()]
        return out


@dataclass
class BlockTrace:
    query_idx: np.ndarray
    context_idx: np.ndarray
    Q: Tensor
    scan_applied: bool  # False on the pure-skip (scan disabled) path


def srsm_block(X, coords: np.ndarray, params: BlockParams, K: int,
               direction_tags=DIRECTION_TAGS,
               scan_enabled: bool = True) -> tuple[Tensor, BlockTrace]:
    """One block: select queries, scan the context, merge, residual, norm.

    Query rows receive no update (they re-enter via the residual identity);
    context rows receive the fused multi-direction scan output, or just
    Dskip * u when the scan path is disabled (ablation mode: Delta and B'
    are never derived).
    """
    X = ad.as_tensor(X)
    N, d = X.shape
    split = select_queries(X, params.selector, K)
    if scan_enabled:
        delta, bprime = derive_step_params(split, params.ssm)
        step = discretize_zoh(params.ssm.A0, delta, bprime)
        directions = build_directions(coords[split.context_idx], direction_tags)
        y_ctx = multi_direction_fuse(step, params.ssm, split.Cseq, directions)
    else:
        y_ctx = ad.mul(split.Cseq, ad.reshape(params.ssm.Dskip, (1, d)))

    # scatter the context update back; query positions stay zero
    update = ad.gather_rows(
        ad.concat([ad.as_tensor(np.zeros((len(split.query_idx), d))), y_ctx]),
        _merge_gather(split.query_idx, split.context_idx, N),
    )
    out = ad.layer_norm(ad.add(X, update))
    trace = BlockTrace(query_idx=split.query_idx, context_idx=split.context_idx,
                       Q=split.Q, scan_applied=scan_enabled)
    return out, trace


def _merge_gather(query_idx: np.ndarray, context_idx: np.ndarray, N: int) -> np.ndarray:
    """Index map so concat(zeros_for_queries, context_updates)[map] lands each
    row at its original position."""
    K = len(query_idx)
    gather = np.empty(N, dtype=np.int64)
    gather[query_idx] = np.arange(K)
    gather[context_idx] = K + np.arange(N - K)
    return gather
