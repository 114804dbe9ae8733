"""Semantic reordering: router scoring, cluster assignment, stable permutation.

The router is two bias-free linear layers with an exact-erf GELU between
them. Each patch gets a cluster distribution (softmax of router scores) and
a hard label; a stable argsort of the labels groups same-cluster patches
contiguously. The permutation is a pure row rearrangement, so inverting it
restores the original order exactly, with no floating-point ops involved.

Gradients: soft assignments (hard or Gumbel-perturbed softmax) are
differentiable in the router scores; the permutation itself is treated as a
constant rearrangement, so backward just moves gradient rows back.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass
class RouterParams:
    W1: Tensor  # (hidden, d)
    W2: Tensor  # (n_clusters, hidden)

    def __post_init__(self):
        if self.W1.shape[0] < 1:
            raise ValueError("router hidden width must be >= 1")
        if self.W2.shape[0] < 2:
            raise ValueError("router needs at least 2 clusters")
        if self.W2.shape[1] != self.W1.shape[0]:
            raise ValueError("router layer shapes disagree")

    @staticmethod
    def init(d: int, hidden: int, n_clusters: int, rng: np.random.Generator) -> "RouterParams":
        return RouterParams(
            W1=Tensor(rng.normal(0.0, 1.0 / np.sqrt(d), (hidden, d)), requires_grad=True),
            W2=Tensor(rng.normal(0.0, 1.0 / np.sqrt(hidden), (n_clusters, hidden)), requires_grad=True),
        )

    def named_params(self):
        return [("router.W1", self.W1), ("router.W2", self.W2)]


@dataclass
class Assignment:
    P: Tensor        # (L, n_clusters) row-stochastic
    c: np.ndarray    # (L,) hard labels, argmax with lowest-index ties


@dataclass
class Permutation:
    pi: np.ndarray
    pi_inv: np.ndarray

    def __post_init__(self):
        L = len(self.pi)
        if not np.array_equal(np.sort(self.pi), np.arange(L)):
            raise ValueError("pi is not a bijection")
        if not np.array_equal(self.pi_inv[self.pi], np.arange(L)):
            raise ValueError("pi_inv does not invert pi")


def router_forward(params: RouterParams, X) -> Tensor:
    """Cluster scores: row i is W2 @ GELU(W1 @ x_i). No biases."""
    X = ad.as_tensor(X)
    if X.shape[1] != params.W1.shape[1]:
        raise ValueError(
            f"input width {X.shape[1]} does not match router width {params.W1.shape[1]}")
    H = ad.gelu(ad.matmul(X, ad.transpose(params.W1)))
    return ad.matmul(H, ad.transpose(params.W2))


def sample_gumbel(shape, seed: int) -> np.ndarray:
    """Standard Gumbel noise, -log(-log(U)), from a seeded generator."""
    rng = np.random.default_rng(seed)
    u = rng.uniform(np.finfo(np.float64).tiny, 1.0, size=shape)
    return -np.log(-np.log(u))


def assign(Z, mode: str = "hard", tau: float = 1.0, seed: int = 0) -> Assignment:
    """Cluster assignment from router scores.

    hard: P = row softmax of Z, c = row argmax.
    gumbel: P = row softmax((Z + G) / tau) with seeded Gumbel noise G; the
    hard labels come from the perturbed rows, so the same seed reproduces
    the same assignment exactly.
    """
    Z = ad.as_tensor(Z)
    if not np.all(np.isfinite(Z.data)):
        raise ValueError("router scores must be finite")
    if mode == "hard":
        P = ad.softmax(Z, axis=1)
    elif mode == "gumbel":
        if tau <= 0:
            raise ValueError("gumbel temperature must be positive")
        G = sample_gumbel(Z.shape, seed)
        P = ad.softmax(ad.mul(ad.add(Z, G), 1.0 / tau), axis=1)
    else:
        raise ValueError(f"unknown assignment mode {mode!r}")
    return Assignment(P=P, c=np.argmax(P.data, axis=1))


def build_permutation(c) -> Permutation:
    """Stable argsort of labels; ties keep original relative order."""
    c = np.asarray(c)
    pi = np.argsort(c, kind="stable")
    pi_inv = np.empty_like(pi)
    pi_inv[pi] = np.arange(len(pi))
    return Permutation(pi=pi, pi_inv=pi_inv)


def _as_perm_array(perm, L: int) -> np.ndarray:
    pi = perm.pi if isinstance(perm, Permutation) else np.asarray(perm)
    if not np.array_equal(np.sort(pi), np.arange(L)):
        raise ValueError("permutation is not a bijection on row indices")
    return pi


def apply_permutation(X, perm):
    """Row j of the output is row pi[j] of X."""
    if isinstance(X, Tensor):
        pi = _as_perm_array(perm, X.shape[0])
        return ad.gather_rows(X, pi)
    X = np.asarray(X)
    pi = _as_perm_array(perm, X.shape[0])
    return X[pi]


def restore_order(Y, perm):
    """Undo apply_permutation: row i of the output is row pi_inv[i] of Y."""
    if isinstance(perm, Permutation):
        pi_inv = perm.pi_inv
    else:
        pi = np.asarray(perm)
        pi_inv = np.empty_like(pi)
        pi_inv[pi] = np.arange(len(pi))
    return apply_permutation(Y, pi_inv)


def router_auxiliary_loss(P: Tensor) -> Tensor:
    """Training signal for the router: sharpness + balance.

    Mean per-patch assignment entropy (drive rows toward one-hot) plus
    KL(mean assignment || uniform) (use all clusters). The hard argsort
    blocks gradients, so this is the only path that trains the router in
    hard mode.
    """
    n_clusters = P.shape[1]
    # +1e-300 keeps 0 * log(0) out of the graph when a softmax underflows
    logP = ad.tlog(ad.add(P, 1e-300))
    entropy = ad.tmean(-ad.tsum(ad.mul(P, logP), axis=1))
    m = ad.tmean(P, axis=0)
    kl = ad.tsum(ad.mul(m, ad.add(ad.tlog(ad.add(m, 1e-300)), np.log(n_clusters))))
    return ad.add(entropy, kl)
