"""Honest-but-curious vendor attacks on observed representations.

All attacks use only what the vendor legitimately sees: transmitted
representations (with their PAD masks) and the bottom model it shipped. Ground
truth is passed in solely for scoring.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .model import CLS, PAD, SEP, SPECIAL_IDS, AdamW, BottomModel, run_bottom_blocks
from .numerics import Graph, Tensor
from .privatizer import NearestNeighbor


class AttackConfigError(ValueError):
    pass


def empirical_privacy(x: float) -> float:
    if not 0.0 <= x <= 1.0:
        raise AttackConfigError(f"success rate must lie in [0, 1], got {x}")
    return 1.0 - x


@dataclass
class AttackReport:
    attack: str
    success_rate: float
    config: dict = field(default_factory=dict)
    # token-level attacks: (N, n) recovered ids (-1 where unscored) and hit mask
    recovered: np.ndarray | None = None
    hits: np.ndarray | None = None
    # attribute attack: per-target predictions
    predictions: np.ndarray | None = None
    sample_ids: np.ndarray | None = None

    @property
    def empirical_privacy(self) -> float:
        return empirical_privacy(self.success_rate)

    def to_dict(self, per_sample: bool = True) -> dict:
        out = {"attack": self.attack, "success_rate": self.success_rate,
               "empirical_privacy": self.empirical_privacy, "config": self.config}
        if per_sample and self.recovered is not None:
            out["per_sample"] = [
                {"sample": int(s), "recovered": [int(t) for t in row[row >= 0]],
                 "hits": int(h[row >= 0].sum()), "scored": int((row >= 0).sum())}
                for s, row, h in zip(self.sample_ids, self.recovered, self.hits)]
        if per_sample and self.predictions is not None:
            out["predictions"] = self.predictions.tolist()
        return out

    def to_json(self, per_sample: bool = True) -> str:
        return json.dumps(self.to_dict(per_sample), indent=1)

    def csv_row(self, **context) -> dict:
        row = dict(context)
        row.update(attack=self.attack, X=round(100 * self.success_rate, 4),
                   EP=round(100 * self.empirical_privacy, 4))
        return row


def reports_to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    if rows:
        w = csv.DictWriter(buf, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    return buf.getvalue()


def scored_positions(truth_ids) -> np.ndarray:
    """Token-level scoring covers user content only (not PAD/CLS/SEP)."""
    return ~np.isin(np.asarray(truth_ids), SPECIAL_IDS)


def _token_report(name: str, recovered: np.ndarray, truth: np.ndarray, config: dict, sample_ids=None) -> AttackReport:
    scored = scored_positions(truth)
    rec = np.where(scored, recovered, -1)
    hits = scored & (rec == truth)
    total = int(scored.sum())
    x = float(hits.sum() / total) if total else 0.0
    sids = np.arange(len(truth)) if sample_ids is None else np.asarray(sample_ids)
    return AttackReport(name, x, config, rec, hits, sample_ids=sids)


def eia_nearest_neighbor(observed_reps, table, truth_ids, positional=None, exclude=SPECIAL_IDS,
                         sample_ids=None) -> AttackReport:
    """Map each observed (embedding-level) vector to its nearest vocabulary row.

    ``positional`` is the bottom model's positional table; it is subtracted
    first since the attacker knows it.
    """
    reps = np.asarray(observed_reps, dtype=np.float32)
    table = np.asarray(table)
    truth = np.asarray(truth_ids)
    if reps.ndim != 3 or reps.shape[2] != table.shape[1]:
        raise AttackConfigError(f"observations {reps.shape} do not match embedding dimension {table.shape[1]}")
    if truth.shape != reps.shape[:2]:
        raise AttackConfigError(f"ground truth {truth.shape} does not match observations {reps.shape[:2]}")
    if positional is not None:
        reps = reps - np.asarray(positional, dtype=np.float32)[None, :reps.shape[1]]
    scored = scored_positions(truth)
    rec = np.full(truth.shape, -1, dtype=np.int64)
    rec[scored] = NearestNeighbor(table, exclude).query(reps[scored])
    return _token_report("eia_nn", rec, truth, {"metric": "euclidean", "positional_removed": positional is not None},
                         sample_ids)


def eia_union(reports: list[AttackReport]) -> AttackReport:
    """A token counts as recovered if any of the reports recovered it."""
    if not reports:
        raise AttackConfigError("union of zero reports")
    first = reports[0]
    for r in reports[1:]:
        if r.hits.shape != first.hits.shape or not np.array_equal(r.sample_ids, first.sample_ids):
            raise AttackConfigError("reports cover different sample sets")
    hits = np.logical_or.reduce([r.hits for r in reports])
    scored = first.recovered >= 0
    total = int(scored.sum())
    # keep, per position, the first report's recovery that was a hit (else the first guess)
    rec = first.recovered.copy()
    for r in reports[1:]:
        take = r.hits & ~first.hits
        rec[take] = r.recovered[take]
    x = float(hits.sum() / total) if total else 0.0
    return AttackReport("eia_union", x, {"reports": len(reports), "inner": first.attack}, rec, hits,
                        sample_ids=first.sample_ids)


@dataclass
class WordSelectionState:
    Z: np.ndarray
    tau: float
    velocity: np.ndarray

    def probabilities(self, column_mask: np.ndarray | None = None) -> np.ndarray:
        z = self.Z / self.tau
        if column_mask is not None:
            z = z + column_mask
        z = z - z.max(axis=-1, keepdims=True)
        p = np.exp(z)
        return p / p.sum(axis=-1, keepdims=True)


@dataclass
class EiaOptConfig:
    steps: int = 500
    tau: float = 0.1
    tau_start: float = 1.0
    lr: float = 0.2
    momentum: float = 0.9
    batch_size: int = 32


def _structure(mask: np.ndarray) -> np.ndarray:
    """Known-structure ids: CLS first, SEP at the last live position, PAD after; -1 elsewhere."""
    fixed = np.full(mask.shape, -1, dtype=np.int64)
    fixed[~mask] = PAD
    lengths = mask.sum(axis=1)
    for i, n in enumerate(lengths):
        if n >= 1:
            fixed[i, 0] = CLS
        if n >= 2:
            fixed[i, n - 1] = SEP
    return fixed


def _optimize_batch(h_obs: np.ndarray, mask: np.ndarray, bottom: BottomModel, cfg: EiaOptConfig,
                    z_init: np.ndarray | None):
    B, n, d = h_obs.shape
    E = bottom.token_table.data
    V = E.shape[0]
    pos = bottom.params["embed.pos"].data[:n]
    fixed = _structure(mask)
    content = fixed < 0
    colmask = np.zeros(V, np.float32)
    colmask[list(SPECIAL_IDS)] = -1e4
    base = np.where(content[..., None], 0.0, E[np.maximum(fixed, 0)]) + pos[None]
    base_t = Tensor(base.astype(np.float32))
    keep_t = Tensor(np.broadcast_to(content[..., None], (B, n, d)).astype(np.float32))
    E_t = Tensor(E)
    obs_t = Tensor(h_obs)
    cm_t = Tensor(np.broadcast_to(colmask, (B, n, V)).copy())
    Z = np.zeros((B, n, V), np.float32) if z_init is None else z_init.astype(np.float32)
    vel = np.zeros_like(Z)
    losses = []
    diverged = np.zeros(B, dtype=bool)
    frozen_flags = [t.requires_grad for t in bottom.params.values()]
    for t in bottom.params.values():
        t.requires_grad = False
    try:
        for step in range(cfg.steps):
            frac = step / max(cfg.steps - 1, 1)
            tau = cfg.tau_start + (cfg.tau - cfg.tau_start) * frac
            zt = Tensor(Z, requires_grad=True)
            with Graph() as g:
                p = nx.softmax(nx.add(nx.scale(zt, 1.0 / tau), cm_t))
                x = nx.add(nx.mul(nx.matmul(p, E_t), keep_t), base_t)
                h = run_bottom_blocks(bottom, x, mask)
                diff = nx.sub(h, obs_t)
                loss = nx.reduce_sum(nx.mul(diff, diff))
            g.backward(loss)
            grad = zt.grad * content[..., None]
            vel = cfg.momentum * vel - cfg.lr * grad
            Z = Z + vel
            losses.append(float(loss.data))
            if not math.isfinite(losses[-1]):
                diverged[:] = True
                break
    finally:
        for t, flag in zip(bottom.params.values(), frozen_flags):
            t.requires_grad = flag
    pred = np.argmax(Z + colmask, axis=-1)
    pred = np.where(content, pred, fixed)
    return pred, losses, diverged


def eia_optimization(observed_reps, mask, bottom: BottomModel, truth_ids, steps: int = 500, tau: float = 0.1,
                     lr: float = 0.2, momentum: float = 0.9, tau_start: float = 1.0, batch_size: int = 32,
                     z_init=None, sample_ids=None) -> AttackReport:
    """Relaxed word-selection inversion through the (initial) bottom model.

    Minimises ``||f_b(softmax(Z / tau) E) - h_obs||^2`` over Z by momentum
    gradient descent with tau annealed linearly from ``tau_start``; prediction
    is the per-position argmax of Z. A diverged batch scores zero.
    """
    cfg = EiaOptConfig(steps, tau, tau_start, lr, momentum, batch_size)
    reps = np.asarray(observed_reps, dtype=np.float32)
    mask = np.asarray(mask, dtype=bool)
    truth = np.asarray(truth_ids)
    if reps.ndim != 3 or reps.shape[2] != bottom.config.embed_dim:
        raise AttackConfigError(f"observations {reps.shape} do not match bottom model")
    if mask.shape != reps.shape[:2] or truth.shape != reps.shape[:2]:
        raise AttackConfigError("mask / ground truth shape does not match observations")
    rec = np.zeros(truth.shape, dtype=np.int64)
    final_losses = []
    failed = 0
    for lo in range(0, len(reps), batch_size):
        sl = slice(lo, lo + batch_size)
        zi = None if z_init is None else np.asarray(z_init)[sl]
        pred, losses, diverged = _optimize_batch(reps[sl], mask[sl], bottom, cfg, zi)
        pred[diverged] = -2  # never matches a real token
        failed += int(diverged.sum())
        rec[sl] = pred
        final_losses.append(losses[-1] if losses else float("nan"))
    config = {"steps": steps, "tau": tau, "tau_start": tau_start, "lr": lr, "momentum": momentum,
              "batch_size": batch_size, "split": bottom.split, "failed_samples": failed,
              "final_loss": [float(v) for v in final_losses]}
    return _token_report("eia_opt", rec, truth, config, sample_ids)


# -- attribute inference -------------------------------------------------------

def mean_pool_features(reps, mask) -> np.ndarray:
    reps = np.asarray(reps, dtype=np.float64)
    m = np.asarray(mask, dtype=np.float64)[..., None]
    return (reps * m).sum(axis=1) / np.maximum(m.sum(axis=1), 1.0)


@dataclass
class ProbeConfig:
    hidden: int = 32
    steps: int = 300
    lr: float = 1e-2
    weight_decay: float = 0.01
    seed: int = 0


def aia_attack(reps_labeled, mask_labeled, attrs_labeled, reps_target, mask_target, attrs_target,
               probe: ProbeConfig | None = None) -> AttackReport:
    """Train a mean-pooled two-layer probe on labelled observations; X = target accuracy."""
    probe = probe or ProbeConfig()
    y = np.asarray(attrs_labeled, dtype=np.int64)
    yt = np.asarray(attrs_target, dtype=np.int64)
    classes = np.unique(y)
    if len(classes) < 2:
        raise AttackConfigError("labelled set holds a single attribute class")
    counts = np.bincount(y)
    if (counts[classes] < 2).any():
        raise AttackConfigError("need at least 2 labelled samples per attribute class")
    K = int(max(y.max(), yt.max() if len(yt) else 0)) + 1
    f_lab = mean_pool_features(reps_labeled, mask_labeled)
    f_tgt = mean_pool_features(reps_target, mask_target)
    mu = f_lab.mean(axis=0)
    sd = f_lab.std(axis=0) + 1e-6
    f_lab = ((f_lab - mu) / sd).astype(np.float32)
    f_tgt = ((f_tgt - mu) / sd).astype(np.float32)
    D = f_lab.shape[1]
    rng = np.random.default_rng(probe.seed)
    params = {
        "w1": Tensor(rng.normal(0, 1 / math.sqrt(D), (D, probe.hidden)), requires_grad=True),
        "b1": Tensor(np.zeros(probe.hidden), requires_grad=True),
        "w2": Tensor(rng.normal(0, 1 / math.sqrt(probe.hidden), (probe.hidden, K)), requires_grad=True),
        "b2": Tensor(np.zeros(K), requires_grad=True),
    }
    opt = AdamW(params, weight_decay=probe.weight_decay, decay={"w1", "w2"})

    def forward(x):
        h = nx.tanh(nx.add_bias(nx.matmul(x, params["w1"]), params["b1"]))
        return nx.add_bias(nx.matmul(h, params["w2"]), params["b2"])

    xl = Tensor(f_lab)
    for _ in range(probe.steps):
        opt.zero_grad()
        with Graph() as g:
            loss = nx.cross_entropy(forward(xl), y)
        g.backward(loss)
        opt.step(probe.lr)
    pred = forward(Tensor(f_tgt)).data.argmax(axis=1)
    x = float((pred == yt).mean()) if len(yt) else 0.0
    cfg = {"labeled": int(len(y)), "targets": int(len(yt)), "hidden": probe.hidden, "steps": probe.steps,
           "lr": probe.lr, "seed": probe.seed}
    return AttackReport("aia", x, cfg, predictions=pred)
