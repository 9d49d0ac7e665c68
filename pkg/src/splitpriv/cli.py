"""Command-line entry point: ``splitpriv <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import harness as H
from .attacks import reports_to_csv
from .protocol import ProtocolError, load_dumped_messages


def _load_cfg(args) -> H.ExperimentConfig:
    cfg = H.ExperimentConfig.load(args.config) if args.config else H.ExperimentConfig()
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    return cfg


def _first_cell(cfg: H.ExperimentConfig) -> H.Cell:
    return H.Cell(int(cfg.split_grid[0]), bool(cfg.frozen_grid[0]), H.parse_eta(cfg.eta_grid[0]),
                  bool(cfg.cti_grid[0]), cfg.seed)


def _write_row(out: Path, row: dict) -> None:
    H.write_rows(out / "row.csv", [row])
    (out / "row.json").write_text(json.dumps(row, indent=1))


def cmd_synth(args) -> int:
    cfg = _load_cfg(args)
    if "synth" not in cfg.dataset:
        raise H.ExperimentError("synth needs a dataset.synth section")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    data = H.load_dataset(cfg)
    for split, corpus in data.items():
        with open(out / f"{split}.tsv", "w", encoding="utf-8") as fh:
            for i in range(len(corpus)):
                toks = corpus.decode(corpus.ids[i])
                attr = f"{corpus.attrs[i]}\t" if corpus.attrs is not None else ""
                fh.write(f"{corpus.labels[i]}\t{attr}{' '.join(toks)}\n")
        corpus.save(out / f"{split}.spck")
    (out / "vocab.json").write_text(json.dumps(data["train"].vocab))
    print(f"wrote {', '.join(f'{k}={len(v)}' for k, v in data.items())} samples to {out}")
    return 0


def cmd_finetune(args, centralized: bool = False) -> int:
    cfg = _load_cfg(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cell = _first_cell(cfg)
    dump = out / "payloads" if getattr(args, "dump_payloads", False) else None
    row, result, reports = H.run_cell(cfg, cell, getattr(args, "transport", "loopback"), dump, centralized)
    losses = row.pop("losses", [])
    (out / "losses.json").write_text(json.dumps(losses))
    (out / "experiment.json").write_text(json.dumps(cfg.to_dict(), indent=1))
    session = cfg.session_config(split=cell.split, frozen=cell.frozen, eta=cell.eta, cti=cell.cti, seed=cell.seed)
    (out / "session.json").write_text(json.dumps(session.to_dict(), indent=1))
    if result is not None:
        result.vendor.plm.save(out / "model.spck", {"session": session.to_dict()})
        result.transcript.save(out / "transcript.jsonl")
        if result.customer.contributing is not None:
            result.customer.contributing.save(out / "contributing.json")
        for name, rep in reports.items():
            (out / f"attack_{name}.json").write_text(rep.to_json(per_sample=False))
    _write_row(out, row)
    print(",".join(f"{k}={row.get(k)}" for k in H.ROW_FIELDS))
    return 0


def cmd_attack(args) -> int:
    run_dir = Path(args.run_dir)
    dumps = run_dir / "payloads"
    if not dumps.is_dir() or not any(dumps.glob("*.bin")):
        raise H.ExperimentError(f"{dumps}: no payload dumps (run finetune with --dump-payloads)")
    cfg = H.ExperimentConfig.from_dict(json.loads((run_dir / "experiment.json").read_text()))
    from .protocol import SessionConfig
    session = SessionConfig.from_dict(json.loads((run_dir / "session.json").read_text()))
    train = H.load_dataset(cfg)["train"]
    bottom, obs = H.vendor_observations(load_dumped_messages(dumps), session, len(train))
    opts = cfg.attack_options_obj()
    if args.steps is not None:
        opts.eia_opt_steps = args.steps
    if args.samples is not None:
        opts.eia_opt_samples = args.samples
    if args.labeled is not None:
        opts.aia_labeled = args.labeled
    opts.aia_shuffle_labels = args.shuffle_labels
    reports = H.run_attacks(args.attack, bottom, obs, train, opts, session.shuffle_seed)
    if not reports:
        raise H.ExperimentError("none of the requested attacks applies to this transcript")
    out = Path(args.out or run_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for name, rep in reports.items():
        (out / f"attack_{name}.json").write_text(rep.to_json())
        rows.append(rep.csv_row(dataset=cfg.name, s=session.split, frozen=not session.bottom_trainable,
                                eta=H.eta_label(session.privacy.eta), cti=session.privacy.cti_enabled))
        print(f"{name}: X={rep.success_rate:.4f} EP={rep.empirical_privacy:.4f}")
    (out / "attacks.csv").write_text(reports_to_csv(rows))
    return 0


def cmd_sweep(args) -> int:
    cfg = _load_cfg(args)
    out = Path(args.out or cfg.out)
    rows = H.sweep(cfg, out, args.workers)
    from .report import build_report
    md, figs = build_report(out / "results.csv", out)
    failed = sum(r.get("status") != "ok" for r in rows)
    print(f"{len(rows)} rows ({failed} failed) -> {out / 'results.csv'}; report {md}")
    return 0


def cmd_report(args) -> int:
    from .report import build_report
    md, figs = build_report(args.csv, args.out or Path(args.csv).parent)
    print(f"wrote {md} and {len(figs)} figure(s)")
    return 0


def cmd_defaults(args) -> int:
    text = H.reference_page()
    if args.out:
        Path(args.out).write_text(text + "\n")
    else:
        print(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="splitpriv", description="Split-and-privatize fine-tuning and attack harness")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="cmd", required=True)

    def common(sp, seed=True):
        sp.add_argument("--config", help="experiment JSON (comments allowed)")
        sp.add_argument("--out", help="output directory")
        if seed:
            sp.add_argument("--seed", type=int, help="override the experiment seed")

    sp = sub.add_parser("finetune", help="run one two-party session and its attacks")
    common(sp)
    sp.add_argument("--transport", choices=("loopback", "tcp"), default="loopback")
    sp.add_argument("--dump-payloads", action="store_true", help="write raw frames for the attack command")
    sp.set_defaults(func=cmd_finetune, out_default="run")

    sp = sub.add_parser("centralized", help="single-process oracle baseline with the same seeds")
    common(sp)
    sp.set_defaults(func=lambda a: cmd_finetune(a, centralized=True), out_default="run-centralized")

    sp = sub.add_parser("attack", help="attack a finetune run's dumped payloads")
    sp.add_argument("run_dir")
    sp.add_argument("--attack", nargs="+", choices=H.ATTACKS, default=["eia_nn"])
    sp.add_argument("--out")
    sp.add_argument("--steps", type=int, help="EIA optimisation steps")
    sp.add_argument("--samples", type=int, help="EIA optimisation sample count")
    sp.add_argument("--labeled", type=int, help="AIA labelled sample count")
    sp.add_argument("--shuffle-labels", action="store_true", help="AIA chance-level control")
    sp.set_defaults(func=cmd_attack)

    sp = sub.add_parser("sweep", help="grid of sessions -> CSV, curves and report")
    common(sp)
    sp.add_argument("--workers", type=int)
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("report", help="markdown tables and figures from a results CSV")
    sp.add_argument("csv")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_report)

    sp = sub.add_parser("synth", help="write the synthetic corpus as TSV + cache")
    common(sp)
    sp.set_defaults(func=cmd_synth, out_default="data")

    sp = sub.add_parser("defaults", help="print the configuration reference page")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_defaults)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if getattr(args, "out", None) is None and hasattr(args, "out_default"):
        args.out = args.out_default
    try:
        return args.func(args)
    except (H.ExperimentError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ProtocolError as exc:
        print(f"party aborted: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
