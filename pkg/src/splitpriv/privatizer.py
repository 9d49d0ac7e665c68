"""Customer-side text privatisation and contributing-token identification.

Every non-special token embedding gets additive noise whose density is
proportional to exp(-eta * ||n||) and is then snapped to the nearest row of
the embedding table, so the released sequence is always legal text.
Contributing tokens (a per-class top-k by utility importance, capped by an
occurrence budget) can be exempted or perturbed more weakly.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .model import CLS, PAD, SEP, SPECIAL_IDS, ConfigError


class DataError(ValueError):
    pass


INFERENCE_ROUND = 1 << 20


@dataclass
class PrivacyConfig:
    eta: float | None = None            # None or inf: no privatisation
    cti_enabled: bool = False
    cti_budget: float = 0.01
    cti_budget_mode: str = "occurrences"  # or "types"
    cti_eta_multiplier: float = math.inf  # inf: contributing tokens untouched
    smoothing: float = 1.0
    seed: int = 0

    @property
    def enabled(self) -> bool:
        return self.eta is not None and math.isfinite(self.eta)

    def validate(self) -> None:
        if self.eta is not None and not self.eta > 0:
            raise ConfigError(f"eta must be positive, got {self.eta}")
        if not 0.0 <= self.cti_budget <= 1.0:
            raise ConfigError(f"cti_budget must lie in [0, 1], got {self.cti_budget}")
        if self.cti_budget_mode not in ("occurrences", "types"):
            raise ConfigError(f"unknown cti_budget_mode {self.cti_budget_mode!r}")
        if not self.cti_eta_multiplier >= 1:
            raise ConfigError("cti_eta_multiplier must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("eta", "cti_eta_multiplier"):
            if d[k] is not None and not math.isfinite(d[k]):
                d[k] = None if k == "eta" else "inf"
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PrivacyConfig":
        d = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        if d.get("eta") in ("none", "inf", "None"):
            d["eta"] = None
        if d.get("cti_eta_multiplier") in (None, "inf"):
            d["cti_eta_multiplier"] = math.inf
        return cls(**d)


def sample_rng(seed: int, round_id: int, sample_index: int) -> np.random.Generator:
    """Independent stream per (seed, round, sample): thread-count independent."""
    return np.random.default_rng([seed, round_id, sample_index])


def sample_dx_noise(d: int, eta: float, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
    """Noise with density proportional to exp(-eta * ||n||) in R^d.

    Direction is uniform on the sphere (normalised Gaussian); the norm is
    Gamma(shape=d, rate=eta). The Gamma draw is a unit-rate draw divided by
    eta, so one stream yields proportionally scaled noise across eta values.
    """
    if not eta > 0:
        raise ConfigError(f"eta must be positive, got {eta}")
    if d < 1:
        raise ConfigError(f"dimension must be >= 1, got {d}")
    shape = (d,) if size is None else (size, d)
    v = rng.standard_normal(shape)
    v /= np.linalg.norm(v, axis=-1, keepdims=True)
    r = rng.standard_gamma(d, size=None if size is None else (size, 1)) / eta
    return v * r


def _candidates(vocab: int, exclude) -> np.ndarray:
    keep = np.ones(vocab, dtype=bool)
    keep[[t for t in exclude if 0 <= t < vocab]] = False
    cand = np.flatnonzero(keep)
    if cand.size == 0:
        raise ConfigError("nearest-neighbour candidate set is empty")
    return cand


class NearestNeighbor:
    """Euclidean nearest-row search with lowest-id tie breaking."""

    def __init__(self, table: np.ndarray, exclude=SPECIAL_IDS):
        table = np.asarray(table, dtype=np.float64)
        self.cand = _candidates(table.shape[0], exclude)
        self.rows = table[self.cand]
        self.sq = (self.rows * self.rows).sum(axis=1)

    def query(self, vectors: np.ndarray, chunk: int = 4096) -> np.ndarray:
        x = np.asarray(vectors, dtype=np.float64)
        single = x.ndim == 1
        x = np.atleast_2d(x)
        if x.shape[1] != self.rows.shape[1]:
            raise ConfigError(f"vector dimension {x.shape[1]} != table dimension {self.rows.shape[1]}")
        out = np.empty(len(x), dtype=np.int64)
        for lo in range(0, len(x), chunk):
            xb = x[lo:lo + chunk]
            # ||x||^2 is constant per row; argmin takes the first (lowest id) minimum
            dist = self.sq[None, :] - 2.0 * xb @ self.rows.T
            out[lo:lo + chunk] = self.cand[np.argmin(dist, axis=1)]
        return out[0] if single else out


def nearest_neighbor(v, table, exclude=SPECIAL_IDS) -> int:
    return int(NearestNeighbor(table, exclude).query(np.asarray(v)))


def privatize_embedding(phi, eta: float, rng, table, exclude=SPECIAL_IDS) -> tuple[np.ndarray, int]:
    """Perturb one embedding and snap it to the nearest table row."""
    phi = np.asarray(phi, dtype=np.float64)
    tok = nearest_neighbor(phi + sample_dx_noise(phi.shape[0], eta, rng), table, exclude)
    return np.asarray(table)[tok], tok


# -- contributing-token identification -------------------------------------

@dataclass
class TokenClassStats:
    counts: np.ndarray          # (V, C)
    alpha: float = 1.0

    @property
    def frequencies(self) -> np.ndarray:
        V = self.counts.shape[0]
        return (self.counts + self.alpha) / (self.counts.sum(axis=0, keepdims=True) + self.alpha * V)

    @property
    def occurrences(self) -> np.ndarray:
        return self.counts.sum(axis=1)


def token_class_stats(ids, labels, vocab_size: int, num_classes: int, alpha: float = 1.0) -> TokenClassStats:
    """Per-class token counts over non-special positions."""
    ids = np.asarray(ids)
    labels = np.asarray(labels)
    if ids.shape[0] == 0:
        raise DataError("dataset is empty")
    present = np.bincount(labels, minlength=num_classes)
    if (present[:num_classes] == 0).any():
        raise DataError(f"class(es) {np.flatnonzero(present[:num_classes] == 0).tolist()} have no samples")
    counts = np.zeros((vocab_size, num_classes), dtype=np.float64)
    content = ~np.isin(ids, SPECIAL_IDS)
    rows = np.broadcast_to(labels[:, None], ids.shape)
    np.add.at(counts, (ids[content], rows[content]), 1.0)
    return TokenClassStats(counts, alpha)


def utility_importance(stats: TokenClassStats) -> np.ndarray:
    """UI[m, c] = sum over c' != c of ln p(m|c) - ln p(m|c')."""
    logp = np.log(stats.frequencies)
    C = logp.shape[1]
    return C * logp - logp.sum(axis=1, keepdims=True)


@dataclass
class ContributingSet:
    per_class: dict[int, list[int]] = field(default_factory=dict)
    ui: dict[int, list[float]] = field(default_factory=dict)
    k: int = 0
    mass: float = 0.0
    budget: float = 0.0

    @property
    def union(self) -> frozenset[int]:
        return frozenset(t for toks in self.per_class.values() for t in toks)

    def to_json(self) -> dict:
        return {str(c): [[t, u] for t, u in zip(self.per_class[c], self.ui[c])] for c in sorted(self.per_class)}

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1))


def select_contributing(ui: np.ndarray, stats: TokenClassStats, budget: float,
                        mode: str = "occurrences") -> ContributingSet:
    """Largest uniform per-class k whose union stays within the budget.

    Only tokens with positive UI that actually occur are eligible; special
    tokens never are. Ranking is UI descending, ties by token id.
    """
    if not 0.0 <= budget <= 1.0:
        raise ConfigError(f"budget must lie in [0, 1], got {budget}")
    V, C = ui.shape
    occ = stats.occurrences
    eligible = occ > 0
    eligible[[t for t in SPECIAL_IDS if t < V]] = False
    ranked = {}
    for c in range(C):
        toks = np.flatnonzero(eligible & (ui[:, c] > 0))
        order = np.lexsort((toks, -ui[toks, c]))
        ranked[c] = [int(t) for t in toks[order]]
    if mode == "occurrences":
        limit = budget * occ.sum()
        weigh = occ
    elif mode == "types":
        limit = budget * np.count_nonzero(eligible)
        weigh = np.ones(V)
    else:
        raise ConfigError(f"unknown budget mode {mode!r}")
    kmax = max((len(r) for r in ranked.values()), default=0)
    best, best_mass = 0, 0.0
    for k in range(1, kmax + 1):
        union = {t for r in ranked.values() for t in r[:k]}
        mass = float(sum(weigh[t] for t in union))
        if mass > limit:
            break
        best, best_mass = k, mass
    frac = best_mass / max(float(weigh.sum() if mode == "occurrences" else np.count_nonzero(eligible)), 1.0)
    return ContributingSet({c: r[:best] for c, r in ranked.items()},
                           {c: [float(ui[t, c]) for t in r[:best]] for c, r in ranked.items()},
                           best, frac, budget)


def identify_contributing(ids, labels, vocab_size: int, num_classes: int, config: PrivacyConfig) -> ContributingSet:
    stats = token_class_stats(ids, labels, vocab_size, num_classes, config.smoothing)
    return select_contributing(utility_importance(stats), stats, config.cti_budget, config.cti_budget_mode)


# -- sequence privatisation ----------------------------------------------------

@dataclass
class PrivatizedBatch:
    token_ids: np.ndarray     # released (post-remap) ids
    replaced: np.ndarray      # bool, True where the id changed

    @property
    def replacement_rate(self) -> float:
        content = ~np.isin(self.token_ids, SPECIAL_IDS)
        return float(self.replaced[content].mean()) if content.any() else 0.0


def privatize_ids(token_ids, table, config: PrivacyConfig, contributing: ContributingSet | None = None,
                  round_id: int = 0, sample_ids=None, nn: NearestNeighbor | None = None) -> PrivatizedBatch:
    """Text-to-text privatisation of a (batch, seq) id array.

    Noise is drawn for every non-special position from the stream of
    ``(config.seed, round_id, sample_id)`` whether or not the token is
    contributing, so exempting a token never shifts other tokens' draws.
    """
    ids = np.asarray(token_ids, dtype=np.int64)
    if ids.ndim == 1:
        ids = ids[None, :]
    if not config.enabled:
        return PrivatizedBatch(ids.copy(), np.zeros(ids.shape, dtype=bool))
    table = np.asarray(table, dtype=np.float64)
    d = table.shape[1]
    sample_ids = np.arange(len(ids)) if sample_ids is None else np.asarray(sample_ids)
    nn = nn or NearestNeighbor(table)
    protected = contributing.union if (contributing is not None and config.cti_enabled) else frozenset()
    prot_arr = np.fromiter(protected, dtype=np.int64) if protected else np.zeros(0, dtype=np.int64)
    out = ids.copy()
    vec_rows, vec_cols, vecs = [], [], []
    for i, row in enumerate(ids):
        pos = np.flatnonzero(~np.isin(row, SPECIAL_IDS))
        if pos.size == 0:
            continue
        rng = sample_rng(config.seed, round_id, int(sample_ids[i]))
        noise = sample_dx_noise(d, 1.0, rng, size=pos.size)  # unit rate, scaled below
        prot = np.isin(row[pos], prot_arr)
        eta = np.where(prot, config.eta * config.cti_eta_multiplier, config.eta)
        live = np.isfinite(eta)
        if not live.any():
            continue
        vecs.append(table[row[pos[live]]] + noise[live] / eta[live, None])
        vec_rows.append(np.full(live.sum(), i))
        vec_cols.append(pos[live])
    if vecs:
        new = nn.query(np.concatenate(vecs))
        out[np.concatenate(vec_rows), np.concatenate(vec_cols)] = new
    return PrivatizedBatch(out, out != ids)


def privatize_sequence(token_ids, table, config: PrivacyConfig, contributing: ContributingSet | None = None,
                       round_id: int = 0, sample_index: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Single sequence: returns (released embedding rows, released ids)."""
    batch = privatize_ids(np.asarray(token_ids)[None, :], table, config, contributing, round_id, [sample_index])
    ids = batch.token_ids[0]
    return np.asarray(table)[ids], ids
