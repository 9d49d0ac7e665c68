"""Config-driven experiment driver: single sessions, attack runs and sweeps."""

from __future__ import annotations

import copy
import csv
import json
import logging
import math
import re
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .attacks import AttackReport, ProbeConfig, aia_attack, eia_nearest_neighbor, eia_optimization, eia_union
from .data import Corpus, SynthSpec, load_tsv, synth_generate, split_corpus
from .model import PLM, BottomModel, PLMConfig, WarmupConfig, build_plm, pretrain_mlm
from .privatizer import PrivacyConfig
from .protocol import (C2V, MsgType, SessionConfig, SessionResult, batches, bottom_from_message, epoch_orders,
                       run_centralized, run_session)

log = logging.getLogger("splitpriv")

ATTACKS = ("eia_nn", "eia_union", "eia_opt", "aia")


class ExperimentError(ValueError):
    pass


# -- configuration ---------------------------------------------------------------

_COMMENT_RE = re.compile(r'"(?:\\.|[^"\\])*"|//[^\n]*|/\*.*?\*/|#[^\n]*', re.S)


def strip_json_comments(text: str) -> str:
    """Remove //, /* */ and # comments that are not inside string literals."""
    return _COMMENT_RE.sub(lambda m: m.group(0) if m.group(0).startswith('"') else "", text)


def load_json_config(path) -> dict:
    try:
        return json.loads(strip_json_comments(Path(path).read_text()))
    except json.JSONDecodeError as exc:
        raise ExperimentError(f"{path}: invalid JSON after comment stripping: {exc}") from None


@dataclass
class AttackOptions:
    eia_opt_samples: int = 32
    eia_opt_steps: int = 500
    aia_labeled: int = 128
    aia_targets: int = 500
    aia_shuffle_labels: bool = False


@dataclass
class ExperimentConfig:
    name: str = "synth"
    dataset: dict = field(default_factory=lambda: {"synth": {}})
    plm: dict = field(default_factory=dict)
    init: str = "random"                       # or "warmup"
    warmup: dict = field(default_factory=dict)
    session: dict = field(default_factory=dict)
    eta_grid: list = field(default_factory=lambda: [None])
    split_grid: list = field(default_factory=lambda: [0])
    cti_grid: list = field(default_factory=lambda: [False])
    frozen_grid: list = field(default_factory=lambda: [True])
    attacks: list = field(default_factory=lambda: ["eia_nn"])
    attack_options: dict = field(default_factory=dict)
    repetitions: int = 1
    seed: int = 0
    workers: int = 1
    spot_check: int = 3
    out: str = "runs"

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ExperimentError(f"unknown config keys {sorted(unknown)}")
        cfg = cls(**copy.deepcopy(d))
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_dict(load_json_config(path))

    def to_dict(self) -> dict:
        return asdict(self)

    def validate(self) -> None:
        for name in ("eta_grid", "split_grid", "cti_grid", "frozen_grid"):
            if not getattr(self, name):
                raise ExperimentError(f"{name} must be nonempty")
        if self.repetitions < 1:
            raise ExperimentError("repetitions must be >= 1")
        if self.init not in ("random", "warmup"):
            raise ExperimentError(f"init must be 'random' or 'warmup', got {self.init!r}")
        bad = set(self.attacks) - set(ATTACKS)
        if bad:
            raise ExperimentError(f"unknown attacks {sorted(bad)}; choose from {ATTACKS}")
        if not ({"synth", "tsv"} & set(self.dataset)):
            raise ExperimentError("dataset needs a 'synth' or 'tsv' entry")
        self.plm_config().validate()

    def plm_config(self) -> PLMConfig:
        d = dict(self.plm)
        if "synth" in self.dataset:
            spec = self.synth_spec()
            d.setdefault("vocab_size", spec.vocab_size)
            d.setdefault("num_classes", spec.num_classes)
        return PLMConfig.from_dict(d)

    def synth_spec(self) -> SynthSpec:
        return SynthSpec.from_dict(self.dataset.get("synth") or {})

    def attack_options_obj(self) -> AttackOptions:
        return AttackOptions(**self.attack_options)

    def session_config(self, *, split: int, frozen: bool, eta, cti: bool, seed: int) -> SessionConfig:
        base = dict(self.session)
        priv = dict(base.pop("privacy", {}) or {})
        priv.update(eta=eta, cti_enabled=cti, seed=seed)
        base.update(split=split, bottom_trainable=not frozen, shuffle_seed=seed, lora_seed=seed)
        s = SessionConfig.from_dict(base)
        s.privacy = PrivacyConfig.from_dict(priv)
        return s


def reference_page() -> str:
    """Markdown listing every configuration key with its default."""
    lines = ["# Configuration reference", "",
             "Experiment files are JSON; `//`, `/* */` and `#` comments are stripped before parsing.", ""]

    def table(title, obj):
        lines.extend([f"## {title}", "", "| key | default |", "|---|---|"])
        for f in fields(obj):
            v = getattr(obj, f.name)
            if hasattr(v, "to_dict"):
                v = v.to_dict()
            lines.append(f"| `{f.name}` | `{json.dumps(v, default=str)}` |")
        lines.append("")

    table("experiment (top level)", ExperimentConfig())
    table("dataset.synth", SynthSpec())
    table("plm", PLMConfig())
    table("warmup (used when init = \"warmup\")", WarmupConfig())
    table("session", SessionConfig())
    table("session.privacy", PrivacyConfig())
    table("attack_options", AttackOptions())
    return "\n".join(lines)


# -- datasets and models (cached per process) ----------------------------------------

_DATA_CACHE: dict = {}
_PLM_CACHE: dict = {}


def load_dataset(cfg: ExperimentConfig) -> dict[str, Corpus]:
    key = json.dumps(cfg.dataset, sort_keys=True)
    if key in _DATA_CACHE:
        return _DATA_CACHE[key]
    if "synth" in cfg.dataset:
        spec = cfg.synth_spec()
        sc = synth_generate(spec)
        total = sum(spec.sizes.values())
        parts = split_corpus(sc.corpus, [spec.sizes.get(k, 0) / total for k in ("train", "dev", "test")], spec.seed)
        out = dict(zip(("train", "dev", "test"), parts))
    else:
        t = cfg.dataset["tsv"]
        pc = cfg.plm_config()
        train = load_tsv(t["train"], "build", "train", pc.vocab_size, pc.max_seq_len, t.get("seq_len"),
                         num_classes=pc.num_classes)
        out = {"train": train}
        for split in ("dev", "test"):
            if split in t:
                out[split] = load_tsv(t[split], train.vocab, split, pc.vocab_size, pc.max_seq_len, train.seq_len,
                                      num_classes=pc.num_classes)
    _DATA_CACHE[key] = out
    return out


def pretrained_model(cfg: ExperimentConfig, train: Corpus) -> PLM:
    pc = cfg.plm_config()
    key = (json.dumps(pc.to_dict(), sort_keys=True), cfg.init, json.dumps(cfg.warmup, sort_keys=True),
           train.checksum())
    if key not in _PLM_CACHE:
        plm = build_plm(pc)
        if cfg.init == "warmup":
            pretrain_mlm(plm, train.ids, WarmupConfig(**cfg.warmup))
            for t in plm.params.values():
                t.requires_grad = False
        _PLM_CACHE[key] = plm
    return _PLM_CACHE[key]


# -- observations as seen by the vendor -------------------------------------------

@dataclass
class Observation:
    round: int
    sample_ids: np.ndarray
    reps: np.ndarray
    mask: np.ndarray


def vendor_observations(messages, session: SessionConfig, num_samples: int) -> tuple[BottomModel, list[Observation]]:
    """Reassemble the customer->vendor representations per round.

    In the trainable flow each epoch's batches are mapped back to sample ids by
    replaying the session's shuffle (the attacker is assumed able to link a
    sample's representations across epochs).
    """
    bottom = None
    rounds: dict[int, list] = {}
    orders = None
    for direction, msg in messages:
        if msg.msg_type == MsgType.BOTTOM_MODEL:
            bottom = bottom_from_message(msg)
        elif direction == C2V and msg.msg_type == MsgType.REP_BATCH_FULL:
            rounds[msg.meta["round"]] = [(np.asarray(msg.meta["sample_ids"]), msg.tensors[0], msg.mask)]
        elif direction == C2V and msg.msg_type == MsgType.REP_BATCH:
            if orders is None:
                orders = [batches(o, session.batch_size) for o in
                          epoch_orders(num_samples, session.epochs, session.shuffle_seed)]
            per_epoch = len(orders[0])
            epoch, step = msg.meta["epoch"], msg.meta["step"]
            ids = orders[epoch][step - epoch * per_epoch]
            rounds.setdefault(msg.meta["round"], []).append((ids, msg.tensors[0], msg.mask))
    if bottom is None:
        raise ExperimentError("transcript has no BOTTOM_MODEL message")
    obs = []
    for r in sorted(rounds):
        ids = np.concatenate([p[0] for p in rounds[r]])
        reps = np.concatenate([p[1] for p in rounds[r]])
        mask = np.concatenate([p[2] for p in rounds[r]])
        order = np.argsort(ids, kind="stable")
        obs.append(Observation(r, ids[order], reps[order], mask[order]))
    return bottom, obs


def run_attacks(attacks, bottom: BottomModel, observations: list[Observation], train: Corpus,
                opts: AttackOptions, seed: int = 0) -> dict[str, AttackReport]:
    """Run the requested attacks against the vendor's observations."""
    reports: dict[str, AttackReport] = {}
    if not observations:
        return reports
    first = observations[0]
    truth = train.ids[first.sample_ids]
    pos = bottom.params["embed.pos"].data
    table = bottom.token_table.data
    if bottom.split == 0 and ("eia_nn" in attacks or "eia_union" in attacks):
        per_round = [eia_nearest_neighbor(o.reps, table, train.ids[o.sample_ids], pos, sample_ids=o.sample_ids)
                     for o in (observations if "eia_union" in attacks else observations[:1])]
        if "eia_nn" in attacks:
            reports["eia_nn"] = per_round[0]
        if "eia_union" in attacks:
            reports["eia_union"] = eia_union(per_round)
    if "eia_opt" in attacks:
        rng = np.random.default_rng(seed)
        pick = np.sort(rng.choice(len(first.sample_ids), size=min(opts.eia_opt_samples, len(first.sample_ids)),
                                  replace=False))
        reports["eia_opt"] = eia_optimization(first.reps[pick], first.mask[pick], bottom, truth[pick],
                                              steps=opts.eia_opt_steps, sample_ids=first.sample_ids[pick])
    if "aia" in attacks and train.attrs is not None:
        attrs = train.attrs[first.sample_ids]
        rng = np.random.default_rng(seed + 7919)
        perm = rng.permutation(len(attrs))
        lab = perm[:opts.aia_labeled]
        tgt = perm[opts.aia_labeled:opts.aia_labeled + opts.aia_targets]
        y = attrs[lab]
        if opts.aia_shuffle_labels:
            y = rng.permutation(y)
        reports["aia"] = aia_attack(first.reps[lab], first.mask[lab], y, first.reps[tgt], first.mask[tgt],
                                    attrs[tgt], ProbeConfig(seed=seed))
    return reports


# -- cells and rows -------------------------------------------------------------

ROW_FIELDS = ["dataset", "s", "frozen", "eta", "cti", "UA", "EP_eia_nn", "EP_eia_union", "EP_eia_opt", "EP_aia",
              "seed", "wall_time", "status"]


@dataclass
class Cell:
    split: int
    frozen: bool
    eta: float | None
    cti: bool
    seed: int


def eta_label(eta) -> str:
    return "none" if eta is None or (isinstance(eta, float) and math.isinf(eta)) else f"{float(eta):g}"


def parse_eta(v):
    if v in (None, "", "none", "None", "inf"):
        return None
    return float(v)


def _fmt(x):
    return "" if x is None or (isinstance(x, float) and math.isnan(x)) else round(float(x), 4)


def run_cell(cfg: ExperimentConfig, cell: Cell, transport: str = "loopback", dump_dir=None,
             centralized: bool = False) -> tuple[dict, SessionResult | None, dict]:
    """One session (or oracle run) plus attacks; returns (row, session result, reports)."""
    t0 = time.perf_counter()
    data = load_dataset(cfg)
    train, dev = data["train"], data.get("dev")
    plm = pretrained_model(cfg, train)
    session = cfg.session_config(split=cell.split, frozen=cell.frozen, eta=cell.eta, cti=cell.cti, seed=cell.seed)
    evals = {"dev": dev} if dev is not None and len(dev) else {}
    row = {"dataset": cfg.name, "s": cell.split, "frozen": cell.frozen, "eta": eta_label(cell.eta),
           "cti": cell.cti, "seed": cell.seed, "status": "ok"}
    reports: dict[str, AttackReport] = {}
    result = None
    if centralized:
        c = run_centralized(plm, session, train, evals)
        row["UA"] = _fmt(100 * c.accuracy["dev"]) if evals else None
        row["losses"] = c.losses
    else:
        result = run_session(plm, session, train, evals, transport, dump_dir, keep_frames=dump_dir is None)
        row["UA"] = _fmt(100 * result.customer.accuracy["dev"]) if evals else None
        row["losses"] = result.customer.losses
        bottom, obs = vendor_observations(result.transcript.messages(), session, len(train))
        reports = run_attacks(cfg.attacks, bottom, obs, train, cfg.attack_options_obj(), cell.seed)
        result.transcript.frames = None  # release memory
    for a in ("eia_nn", "eia_union", "eia_opt", "aia"):
        row[f"EP_{a}"] = _fmt(100 * reports[a].empirical_privacy) if a in reports else None
    row["wall_time"] = round(time.perf_counter() - t0, 3)
    return row, result, reports


def cells(cfg: ExperimentConfig) -> list[Cell]:
    out = []
    for s in cfg.split_grid:
        for frozen in cfg.frozen_grid:
            for eta in cfg.eta_grid:
                for cti in cfg.cti_grid:
                    if cti and parse_eta(eta) is None:
                        continue  # CTI only matters when privatising
                    for r in range(cfg.repetitions):
                        out.append(Cell(int(s), bool(frozen), parse_eta(eta), bool(cti), cfg.seed + r))
    return out


def _cell_job(args):
    cfg_dict, cell = args
    cfg = ExperimentConfig.from_dict(cfg_dict)
    try:
        row, _, _ = run_cell(cfg, cell)
    except Exception as exc:  # partial failure: keep sweeping
        log.exception("cell %s failed", cell)
        row = {"dataset": cfg.name, "s": cell.split, "frozen": cell.frozen, "eta": eta_label(cell.eta),
               "cti": cell.cti, "seed": cell.seed, "status": f"failed: {exc}"}
    row.pop("losses", None)
    return row


def write_rows(path, rows: list[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=ROW_FIELDS, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if r.get(k) is None else r.get(k)) for k in ROW_FIELDS})


def read_rows(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            return []
        missing = set(ROW_FIELDS) - set(reader.fieldnames)
        if missing:
            raise ExperimentError(f"{path}: not a result table (missing columns {sorted(missing)})")
        return list(reader)


def _truthy(v) -> bool:
    return str(v).strip().lower() in ("true", "1", "yes")


def _num(v):
    try:
        return float(v)
    except (TypeError, ValueError):
        return None


def aggregate(rows: list[dict]) -> list[dict]:
    """Mean UA/EP per (dataset, s, frozen, eta, cti) over successful repetitions."""
    groups: dict[tuple, list[dict]] = {}
    for r in rows:
        if str(r.get("status", "ok")) != "ok":
            continue
        key = (r["dataset"], int(r["s"]), _truthy(r["frozen"]), str(r["eta"]), _truthy(r["cti"]))
        groups.setdefault(key, []).append(r)
    out = []
    for key, rs in groups.items():
        agg = dict(zip(("dataset", "s", "frozen", "eta", "cti"), key))
        agg["n"] = len(rs)
        for col in ("UA", "EP_eia_nn", "EP_eia_union", "EP_eia_opt", "EP_aia", "wall_time"):
            vals = [v for v in (_num(r.get(col)) for r in rs) if v is not None]
            agg[col] = float(np.mean(vals)) if vals else None
        out.append(agg)
    out.sort(key=lambda a: (a["dataset"], a["s"], not a["frozen"], a["cti"], _eta_sort(a["eta"])))
    return out


def _eta_sort(label: str) -> float:
    return math.inf if label == "none" else float(label)


def write_curves(path, agg: list[dict], dataset: str) -> None:
    """Whitespace-separated curve file (one block per series) for gnuplot."""
    lines = [f"# dataset {dataset}", "# eta UA EP_eia_nn EP_eia_union EP_eia_opt EP_aia"]
    series: dict[tuple, list[dict]] = {}
    for a in agg:
        if a["dataset"] == dataset and a["eta"] != "none":
            series.setdefault((a["s"], a["frozen"], a["cti"]), []).append(a)
    for (s, frozen, cti), rs in sorted(series.items()):
        lines.append(f"\n\n# s={s} frozen={frozen} cti={cti}")
        for a in sorted(rs, key=lambda a: _eta_sort(a["eta"])):
            vals = [a["eta"]] + ["nan" if a[c] is None else f"{a[c]:.4f}" for c in
                                 ("UA", "EP_eia_nn", "EP_eia_union", "EP_eia_opt", "EP_aia")]
            lines.append(" ".join(vals))
    Path(path).write_text("\n".join(lines) + "\n")


def sweep(cfg: ExperimentConfig, out_dir=None, workers: int | None = None) -> list[dict]:
    """Run every cell of the grid; write results.csv, summary.csv, curve files and a spot-check log."""
    out = Path(out_dir or cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    jobs = [(cfg.to_dict(), c) for c in cells(cfg)]
    workers = workers or cfg.workers
    t0 = time.perf_counter()
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            rows = list(pool.map(_cell_job, jobs))
    else:
        rows = []
        for j in jobs:
            rows.append(_cell_job(j))
            log.info("cell %s -> UA %s EP %s (%.1fs)", j[1], rows[-1].get("UA"), rows[-1].get("EP_eia_nn"),
                     rows[-1].get("wall_time") or 0)
    write_rows(out / "results.csv", rows)
    agg = aggregate(rows)
    _write_summary(out / "summary.csv", agg)
    for ds in sorted({a["dataset"] for a in agg}):
        write_curves(out / f"curves_{ds}.dat", agg, ds)
    checks = spot_check(cfg, rows, cfg.spot_check)
    (out / "spotcheck.json").write_text(json.dumps(checks, indent=1))
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=1))
    log.info("sweep of %d cells took %.1fs", len(rows), time.perf_counter() - t0)
    return rows


def _write_summary(path, agg: list[dict]) -> None:
    cols = ["dataset", "s", "frozen", "eta", "cti", "n", "UA", "EP_eia_nn", "EP_eia_union", "EP_eia_opt", "EP_aia",
            "wall_time"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=cols)
        w.writeheader()
        for a in agg:
            w.writerow({k: ("" if a.get(k) is None else (round(a[k], 4) if isinstance(a[k], float) else a[k]))
                        for k in cols})


_COMPARE = ("UA", "EP_eia_nn", "EP_eia_union", "EP_eia_opt", "EP_aia")


def spot_check(cfg: ExperimentConfig, rows: list[dict], k: int = 3) -> list[dict]:
    """Re-run up to ``k`` random successful rows from their seeds and compare metrics."""
    ok = [r for r in rows if r.get("status") == "ok"]
    if not ok or k <= 0:
        return []
    rng = np.random.default_rng(cfg.seed)
    picks = rng.choice(len(ok), size=min(k, len(ok)), replace=False)
    out = []
    for i in sorted(picks):
        r = ok[i]
        cell = Cell(int(r["s"]), _truthy(r["frozen"]), parse_eta(r["eta"]), _truthy(r["cti"]), int(r["seed"]))
        again, _, _ = run_cell(cfg, cell)
        same = all(str(_fmt(_num(r.get(c)))) == str(_fmt(_num(again.get(c)))) for c in _COMPARE)
        out.append({"cell": asdict(cell), "reproduced": same,
                    "original": {c: r.get(c) for c in _COMPARE}, "rerun": {c: again.get(c) for c in _COMPARE}})
        if not same:
            log.error("spot check failed for %s", cell)
    return out
