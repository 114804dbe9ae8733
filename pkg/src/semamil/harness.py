"""Training, evaluation, cross-validation protocol, ablation, gradcheck.

Folds come from Monte Carlo resplits; each fold trains a fresh model with
batch size 1 (one bag per step), early-stops on validation AUC, and reports
test AUC/ACC. Metrics aggregate as mean +/- population std (denominator n)
over folds. Everything is a pure function of (dataset seed, split seed,
train seed), so repeated runs produce identical result files.
"""

from __future__ import annotations

import concurrent.futures
import csv
import json
from dataclasses import dataclass, replace
from functools import partial
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from . import autodiff as ad
from .autodiff import Tensor
from .bagdata import Dataset, SplitPlan
from .model import ModelConfig, SemaMILModel, PoolBaseline, forward, baseline_forward
from .reorder import router_auxiliary_loss


@dataclass
class TrainConfig:
    lr: float = 5e-5
    epochs: int = 30
    optimizer: str = "adam"  # or "sgd"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    lambda_router: float = 0.01
    early_stop_patience: int = 5

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("lr must be nonnegative")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class Metrics:
    per_fold: list[tuple[float, float]]  # (auc, acc) per fold
    auc: float
    acc: float
    mean_std: tuple[tuple[float, float], tuple[float, float]]

    @staticmethod
    def from_per_fold(per_fold: list[tuple[float, float]]) -> "Metrics":
        aucs = np.array([a for a, _ in per_fold])
        accs = np.array([c for _, c in per_fold])
        return Metrics(
            per_fold=list(per_fold),
            auc=float(aucs.mean()),
            acc=float(accs.mean()),
            mean_std=((float(aucs.mean()), float(aucs.std(ddof=0))),
                      (float(accs.mean()), float(accs.std(ddof=0)))),
        )

    def to_dict(self) -> dict:
        (am, asd), (cm, csd) = self.mean_std
        return {
            "per_fold": [{"fold": i, "auc": a, "acc": c}
                         for i, (a, c) in enumerate(self.per_fold)],
            "auc_mean": am, "auc_std": asd,
            "acc_mean": cm, "acc_std": csd,
        }


@dataclass
class AblationSpec:
    sr_enabled: bool
    srsm_enabled: bool


class FoldDiverged(RuntimeError):
    """Raised when a fold's training loss turns non-finite."""

    def __init__(self, fold: int, epoch: int, step: int):
        super().__init__(f"fold {fold}: non-finite loss at epoch {epoch}, step {step}")
        self.record = {"fold": fold, "epoch": epoch, "step": step}


def cross_entropy(logits, label: int) -> Tensor:
    """-log softmax(logits)[label], via the log-sum-exp shift."""
    logits = ad.as_tensor(logits)
    ls = ad.sub(logits, ad.logsumexp(logits, axis=-1))
    picked = ad.gather_rows(ls, np.array([label]))
    return ad.mul(ad.tsum(picked), -1.0)


def _binary_auc(scores: np.ndarray, positives: np.ndarray) -> float | None:
    """Mann-Whitney AUC with tied pairs counted 0.5; None if degenerate."""
    n_pos = int(positives.sum())
    n_neg = len(positives) - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(scores, method="average")
    u = ranks[positives].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auc_score(scores, labels) -> float:
    """ROC AUC. 1-D scores (or a 2-column matrix, read as the class-1
    probability) give the binary Mann-Whitney value; wider matrices give the
    macro one-vs-rest average over classes present with both positives and
    negatives. Raises if every class is degenerate."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if scores.ndim == 1 or scores.shape[1] == 2:
        s = scores if scores.ndim == 1 else scores[:, 1]
        auc = _binary_auc(s, labels == 1)
        if auc is None:
            raise ValueError("AUC undefined: need both positives and negatives")
        return auc
    values = []
    for cls in np.unique(labels):
        auc = _binary_auc(scores[:, cls], labels == cls)
        if auc is not None:
            values.append(auc)
    if not values:
        raise ValueError("AUC undefined: every class is degenerate")
    return float(np.mean(values))


def _softmax_np(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max())
    return e / e.sum()


def evaluate(model, forward_fn, bags) -> tuple[float, float]:
    """(AUC, ACC) over bags; argmax ties resolve to the lowest class."""
    probs = []
    labels = []
    with ad.no_grad():
        for bag in bags:
            logits, _ = forward_fn(model, bag)
            probs.append(_softmax_np(logits.data))
            labels.append(bag.label)
    probs = np.array(probs)
    labels = np.array(labels)
    acc = float((probs.argmax(axis=1) == labels).mean())
    return auc_score(probs, labels), acc


def _bag_loss(model, forward_fn, bag, lam: float, gumbel_seed: int) -> Tensor:
    logits, trace = forward_fn(model, bag, gumbel_seed=gumbel_seed)
    loss = cross_entropy(logits, bag.label)
    if lam > 0 and trace is not None and trace.P is not None:
        loss = ad.add(loss, ad.mul(router_auxiliary_loss(trace.P), lam))
    return loss


class _Sgd:
    def __init__(self, params, lr):
        self.params = params
        self.lr = lr

    def step(self):
        for _, p in self.params:
            if p.grad is not None:
                p.data -= self.lr * p.grad


class _Adam:
    def __init__(self, params, lr, beta1, beta2, eps):
        self.params = params
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for _, p in params]
        self.v = [np.zeros_like(p.data) for _, p in params]

    def step(self):
        self.t += 1
        for i, (_, p) in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad
            self.m[i] = self.b1 * self.m[i] + (1 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1 - self.b2) * g * g
            mhat = self.m[i] / (1 - self.b1 ** self.t)
            vhat = self.v[i] / (1 - self.b2 ** self.t)
            p.data -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


def _make_optimizer(cfg: TrainConfig, params):
    if cfg.optimizer == "sgd":
        return _Sgd(params, cfg.lr)
    return _Adam(params, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)


def train_fold(model, forward_fn, dataset: Dataset, fold, cfg: TrainConfig,
               fold_index: int = 0):
    """Train on the fold's train ids; early-stop on validation AUC.

    Returns (model restored to the best-val-AUC checkpoint, history). Among
    epochs tied on val AUC the later one wins (more training at equal
    ranking quality); patience counts epochs without strict improvement.
    """
    train_ids, val_ids, _ = fold
    by_id = {b.bag_id: b for b in dataset.bags}
    train_bags = [by_id[i] for i in train_ids]
    val_bags = [by_id[i] for i in val_ids]

    params = model.named_params()
    opt = _make_optimizer(cfg, params)
    history = []
    best_auc = -np.inf
    best_snapshot = None
    stale = 0
    for epoch in range(cfg.epochs):
        order = np.random.default_rng([cfg.seed, fold_index, epoch]).permutation(len(train_bags))
        total = 0.0
        for step, idx in enumerate(order):
            bag = train_bags[idx]
            gseed = ((cfg.seed * 1_000_003 + epoch) * 1_000_003 + int(idx)) & 0x7FFFFFFF
            model.zero_grad()
            loss = _bag_loss(model, forward_fn, bag, cfg.lambda_router, gseed)
            if not np.isfinite(loss.data):
                raise FoldDiverged(fold_index, epoch, step)
            loss.backward()
            opt.step()
            total += float(loss.data)
        val_auc, val_acc = evaluate(model, forward_fn, val_bags)
        history.append({"epoch": epoch, "train_loss": total / max(1, len(train_bags)),
                        "val_auc": val_auc, "val_acc": val_acc})
        if val_auc >= best_auc:
            if val_auc > best_auc:
                stale = 0
            else:
                stale += 1
            best_auc = val_auc
            best_snapshot = [p.data.copy() for _, p in params]
        else:
            stale += 1
        if stale >= cfg.early_stop_patience:
            break
    if best_snapshot is not None:
        for (_, p), snap in zip(params, best_snapshot):
            p.data = snap
    return model, history


def _semamil_factory(model_cfg: ModelConfig, base_seed: int, fold_index: int):
    return SemaMILModel.init(model_cfg, seed=base_seed + fold_index)


def _baseline_factory(kind: str, D_in: int, n_classes: int, fold_index: int):
    return PoolBaseline.init(kind, D_in, n_classes, seed=fold_index)


def _run_one_fold(args):
    dataset, fold, factory, forward_fn, cfg, fold_index = args
    model = factory(fold_index)
    fold_cfg = replace(cfg, seed=cfg.seed + fold_index)
    model, history = train_fold(model, forward_fn, dataset, fold, fold_cfg,
                                fold_index=fold_index)
    by_id = {b.bag_id: b for b in dataset.bags}
    test_bags = [by_id[i] for i in fold[2]]
    auc, acc = evaluate(model, forward_fn, test_bags)
    return (auc, acc), model, history


def run_protocol(dataset: Dataset, split: SplitPlan, factory, forward_fn,
                 cfg: TrainConfig, jobs: int = 1):
    """Train/select/test every fold; returns (Metrics, models, histories)."""
    work = [(dataset, fold, factory, forward_fn, cfg, i)
            for i, fold in enumerate(split.folds)]
    if jobs > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_one_fold, work))
    else:
        results = [_run_one_fold(w) for w in work]
    per_fold = [r[0] for r in results]
    models = [r[1] for r in results]
    histories = [r[2] for r in results]
    return Metrics.from_per_fold(per_fold), models, histories


def semamil_protocol(dataset: Dataset, model_cfg: ModelConfig, split: SplitPlan,
                     cfg: TrainConfig, *, sr_enabled: bool = True,
                     srsm_enabled: bool = True, model_seed: int = 0, jobs: int = 1):
    factory = partial(_semamil_factory, model_cfg, model_seed)
    fwd = partial(forward, sr_enabled=sr_enabled, srsm_enabled=srsm_enabled)
    return run_protocol(dataset, split, factory, fwd, cfg, jobs=jobs)


def baseline_protocol(dataset: Dataset, kind: str, split: SplitPlan,
                      cfg: TrainConfig, jobs: int = 1):
    D_in = dataset.bags[0].D
    factory = partial(_baseline_factory, kind, D_in, dataset.n_classes)
    return run_protocol(dataset, split, factory, baseline_forward, cfg, jobs=jobs)


ABLATION_GRID = (
    AblationSpec(sr_enabled=False, srsm_enabled=False),
    AblationSpec(sr_enabled=False, srsm_enabled=True),
    AblationSpec(sr_enabled=True, srsm_enabled=False),
    AblationSpec(sr_enabled=True, srsm_enabled=True),
)


def run_ablation(dataset: Dataset, model_cfg: ModelConfig, split: SplitPlan,
                 cfg: TrainConfig, model_seed: int = 0, jobs: int = 1) -> list[dict]:
    """2x2 grid over (SR, SRSM) with shared fold seeds; one row per cell."""
    rows = []
    for spec in ABLATION_GRID:
        metrics, _, _ = semamil_protocol(
            dataset, model_cfg, split, cfg,
            sr_enabled=spec.sr_enabled, srsm_enabled=spec.srsm_enabled,
            model_seed=model_seed, jobs=jobs)
        (auc_m, auc_s), (acc_m, acc_s) = metrics.mean_std
        rows.append({"sr": spec.sr_enabled, "srsm": spec.srsm_enabled,
                     "auc_mean": auc_m, "auc_std": auc_s,
                     "acc_mean": acc_m, "acc_std": acc_s})
    return rows


def write_metrics(metrics: Metrics, out_dir, stem: str = "metrics") -> None:
    """Emit <stem>.json and <stem>.csv (per-fold rows plus a summary row)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"{stem}.json").write_text(
        json.dumps(metrics.to_dict(), indent=2, sort_keys=True) + "\n")
    with open(out / f"{stem}.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["fold", "auc", "acc"])
        for i, (a, c) in enumerate(metrics.per_fold):
            w.writerow([i, repr(a), repr(c)])
        (am, asd), (cm, csd) = metrics.mean_std
        w.writerow(["mean+/-std", f"{am!r}+/-{asd!r}", f"{cm!r}+/-{csd!r}"])


def write_ablation(rows: list[dict], out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.json").write_text(json.dumps(rows, indent=2, sort_keys=True) + "\n")
    with open(out / "ablation.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sr", "srsm", "auc_mean", "auc_std", "acc_mean", "acc_std"])
        for r in rows:
            w.writerow([r["sr"], r["srsm"], repr(r["auc_mean"]), repr(r["auc_std"]),
                        repr(r["acc_mean"]), repr(r["acc_std"])])


def _decision_margins(model: SemaMILModel, bag) -> float:
    """Smallest argmax/top-K margin hit during a forward pass.

    Finite-difference checks hold the permutation and the query set fixed by
    construction: inputs are accepted only when every discrete decision has
    a margin far above the probe epsilon.
    """
    from .reorder import build_permutation, router_forward, assign, apply_permutation
    from .srsm import srsm_block

    cfg = model.config
    margins = []
    with ad.no_grad():
        Xd = ad.matmul(ad.as_tensor(bag.X.astype(np.float64)),
                       ad.transpose(model.Wproj))
        Z = router_forward(model.router, Xd).data
        top2 = np.sort(Z, axis=1)[:, -2:]
        margins.append(float(np.min(top2[:, 1] - top2[:, 0])))
        perm = build_permutation(assign(Z).c)
        H = apply_permutation(Xd, perm)
        coords = bag.coords[perm.pi]
        for blk in model.blocks:
            s = np.sort(H.data @ blk.selector.w_score.data)[::-1]
            margins.append(float(s[cfg.K - 1] - s[cfg.K]))
            H, _ = srsm_block(H, coords, blk, cfg.K,
                              direction_tags=cfg.directions)
    return min(margins)


def build_gradcheck_setup(seed: int = 0, min_margin: float = 1e-3):
    """Tiny model + bag whose discrete decisions are stable under probing."""
    from .bagdata import Bag

    cfg = ModelConfig(D_in=5, d=4, hidden=4, n_clusters=3, K=2, n_state=3,
                      n_layers=1, n_classes=2, lambda_router=0.05)
    for trial in range(64):
        rng = np.random.default_rng(seed + 7919 * trial)
        model = SemaMILModel.init(cfg, seed=seed + trial)
        # nonzero head so cross-entropy feeds every upstream tensor
        model.Whead.data = rng.normal(0.0, 0.5, model.Whead.shape)
        model.bhead.data = rng.normal(0.0, 0.1, model.bhead.shape)
        L = 7
        cells = rng.choice(16, size=L, replace=False)
        bag = Bag(bag_id=f"gradcheck-{trial}", label=1,
                  coords=np.stack([cells // 4, cells % 4], axis=1),
                  X=rng.normal(0.0, 1.0, (L, cfg.D_in)).astype(np.float32))
        if _decision_margins(model, bag) >= min_margin:
            return model, bag
    raise RuntimeError("could not find a margin-stable gradcheck instance")


def model_gradcheck(seed: int = 0, eps: float = 1e-5) -> list[tuple[str, float]]:
    """Full-model loss gradients vs central differences, one row per tensor."""
    model, bag = build_gradcheck_setup(seed)
    lam = model.config.lambda_router

    def loss_fn():
        return _bag_loss(model, forward, bag, lam, gumbel_seed=0)

    return gradient_check(loss_fn, model.named_params(), eps=eps)


def gradient_check(loss_fn, named_params, eps: float = 1e-5) -> list[tuple[str, float]]:
    """Analytic vs central-difference gradients for every parameter tensor.

    loss_fn() must rebuild the forward pass from the current parameter
    values. Per tensor the reported value is max|analytic - numeric|
    normalized by the largest numeric gradient magnitude in that tensor
    (floored at 1e-8 so all-zero gradients compare absolutely).
    """
    loss = loss_fn()
    for _, p in named_params:
        p.zero_grad()
    loss.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy()
                for _, p in named_params]

    report = []
    for (name, p), a in zip(named_params, analytic):
        numeric = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        nflat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = float(loss_fn().data)
            flat[i] = orig - eps
            lo = float(loss_fn().data)
            flat[i] = orig
            nflat[i] = (hi - lo) / (2 * eps)
        scale = max(float(np.max(np.abs(numeric))), 1e-8)
        report.append((name, float(np.max(np.abs(a - numeric)) / scale)))
    return report
