"""Batch front end: `python -m app.cli {chainrec,construct,verify,export-grid} --config run.ini`.

Exit codes: 0 pass, 1 verification failed, 2 usage / config / IO error,
3 admission or construction failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from datetime import datetime
from pathlib import Path
from typing import Sequence

from app.baselyap import (
    LyapunovEvaluator,
    WendlandKernel,
    collocation_base,
    collocation_fit,
    fixture_base,
    grid_nodes,
    load_model,
    save_model,
)
from app.chainrec import RecurrentSet, chain_recurrent_set, export_cells
from app.config import (
    RunConfig,
    build_domain,
    build_field,
    build_g,
    build_neighborhood,
    build_region,
    construct_config,
    flow_config,
    load_config,
)
from app.construct import PrescribedEvaluator, construct_prescribed
from app.db import make_engine, make_session_factory
from app.errors import (
    AdmissionError,
    BracketError,
    CollocationError,
    ConfigError,
    ConstructionError,
    DomainExitError,
    SectionError,
    StackFormatError,
)
from app.init_db import init_db
from app.ledger import record_checks, record_run
from app.serialize import export_grid, load_stack, read_base_ref, save_stack
from app.system import prepare_system
from app.verify import VerificationReport, scale_violations, verify_report

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_VERIFY_FAILED = 1
EXIT_USAGE = 2
EXIT_CONSTRUCTION = 3

_CONSTRUCTION_ERRORS = (AdmissionError, ConstructionError, CollocationError, SectionError, BracketError, DomainExitError)

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def configure_logging(out_dir: Path, verbose: bool = False) -> None:
    handlers = [logging.StreamHandler(sys.stderr), logging.FileHandler(Path(out_dir) / "run.log", encoding="utf-8")]
    logging.basicConfig(level=logging.DEBUG if verbose else logging.INFO, format=LOG_FORMAT, handlers=handlers, force=True)


# ------------------------------------------------------------------ stages

def compute_recurrent(cfg: RunConfig) -> RecurrentSet:
    X = build_field(cfg)
    c = cfg.chain
    return chain_recurrent_set(X, c.h, c.T, c.epsilon, c.samples_per_cell, threads=cfg.run.threads)


def run_chainrec(cfg: RunConfig, out_dir: Path) -> dict:
    """Writes cells.txt and chainrec_summary.txt."""
    R = compute_recurrent(cfg)
    export_cells(R, out_dir / "cells.txt")
    info = R.summary()
    lines = [
        f"components {info['components']}",
        f"recurrent_cells {info['cells']}",
        f"grid_cells {R.grid.n_cells}",
        "sizes " + " ".join(str(s) for s in info["sizes"]),
        "morse_edges " + " ".join(f"{a}->{b}" for a, b in info["morse_edges"]),
    ]
    (out_dir / "chainrec_summary.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    logger.info("chain recurrence: %d components, %d recurrent cells", info["components"], info["cells"])
    return {"components": info["components"], "recurrent_cells": info["cells"]}


def _fit_base(cfg: RunConfig, R: RecurrentSet, out_dir: Path) -> tuple[LyapunovEvaluator, tuple[str, str]]:
    if cfg.base.mode == "fixture":
        name = cfg.base.fixture or cfg.system.name
        return fixture_base(name), ("fixture", name)
    X = build_field(cfg)
    margin = cfg.base.margin + cfg.chain.inflate_cells * cfg.chain.h
    nodes = grid_nodes(build_domain(cfg), cfg.base.spacing, X, avoid=R, margin=margin)
    model = collocation_fit(X, nodes, kernel=WendlandKernel(cfg.base.kernel, cfg.base.shape))
    save_model(model, out_dir / "base_model.txt")
    return collocation_base(model), ("collocation", "base_model.txt")


def _load_base(kind: str, ref: str, stack_path: Path) -> LyapunovEvaluator:
    if kind == "fixture":
        return fixture_base(ref)
    if kind == "collocation":
        return collocation_base(load_model(stack_path.parent / ref))
    raise StackFormatError(f"{stack_path}: unknown base kind {kind!r}")


def run_construct(cfg: RunConfig, out_dir: Path) -> dict:
    """Writes stack.txt, grid.txt and construction.txt (plus base_model.txt for a collocation base)."""
    X = build_field(cfg)
    R = compute_recurrent(cfg)
    K = build_region(cfg)
    g = build_g(cfg)
    U_K = build_neighborhood(cfg, K)
    base, base_ref = _fit_base(cfg, R, out_dir)

    tau_K = construct_prescribed(X, K, g, U_K, R, construct_config(cfg), base)
    plan = tau_K.plan
    save_stack(tau_K, out_dir / "stack.txt", base_ref)
    export_grid(tau_K, build_domain(cfg), cfg.export.grid, out_dir / "grid.txt", cfg.run.threads)

    scale = scale_violations(
        plan, tau_K.system.working, cfg.run.seed, flow_config(cfg), cfg.tolerances.samples, cfg.run.threads
    )
    worst = max(scale, default=float("-inf"))
    lines = [f"N {plan.N}", f"C {plan.scale!r}", f"base {base_ref[0]} {base_ref[1]}"]
    for mod in tau_K.modifications:
        lines.append(f"box {mod.k} level {mod.box.level!r} eps {mod.eps!r} patches {len(mod.cover)}")
    lines.append(f"scale_check worst {worst!r} {'passed' if worst < 0 else 'FAILED'}")
    (out_dir / "construction.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    logger.info("construct: N = %d, C = %.6g, C tau_dot' + N + 3 <= %.3g", plan.N, plan.scale, worst)
    return {"n_boxes": plan.N, "scale": plan.scale, "components": len(R.components), "recurrent_cells": len(R.cells)}


def load_prescribed(cfg: RunConfig, stack_path: Path) -> PrescribedEvaluator:
    stack_path = Path(stack_path)
    try:
        kind, ref = read_base_ref(stack_path)
    except OSError as exc:
        raise StackFormatError(f"cannot read stack {stack_path}: {exc}") from exc
    base = _load_base(kind, ref, stack_path)
    K = build_region(cfg)
    system = prepare_system(build_field(cfg), build_g(cfg), K, build_neighborhood(cfg, K), cfg.g.collar)
    return load_stack(stack_path, system, base, flow_config(cfg))


def run_verify(cfg: RunConfig, stack_path: Path, out_dir: Path) -> VerificationReport:
    tau_K = load_prescribed(cfg, stack_path)
    R = compute_recurrent(cfg)
    report = verify_report(
        tau_K,
        tau_K.system.raw,
        build_region(cfg),
        tau_K.system.g,
        seed=cfg.run.seed,
        tolerances=cfg.tolerances,
        recurrent=R,
        inflate=cfg.chain.inflate_cells * cfg.chain.h,
        threads=cfg.run.threads,
        cfg=flow_config(cfg),
    )
    report.write(out_dir)
    return report


def run_export_grid(cfg: RunConfig, stack_path: Path, out_dir: Path) -> Path:
    tau_K = load_prescribed(cfg, stack_path)
    return export_grid(tau_K, build_domain(cfg), cfg.export.grid, out_dir / "grid.txt", cfg.run.threads)


# -------------------------------------------------------------------- main

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="app.cli", description="Complete Lyapunov functions with a prescribed orbital derivative.")
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("chainrec", "construct", "verify", "export-grid"):
        s = sub.add_parser(name)
        s.add_argument("--config", type=Path, required=True, help="Run configuration (INI).")
        s.add_argument("--out", type=Path, default=Path("out"), help="Output directory (default: out).")
        s.add_argument("--seed", type=int, default=None, help="Override [run] seed.")
        s.add_argument("--threads", type=int, default=None, help="Override [run] threads.")
        s.add_argument("-v", "--verbose", action="store_true")
        if name in ("verify", "export-grid"):
            s.add_argument("--stack", type=Path, default=None, help="Stack file (default: OUT/stack.txt).")
    return p


def _record(out_dir: Path, command: str, cfg: RunConfig | None, code: int, message: str | None, summary: dict, report) -> None:
    engine = make_engine(out_dir)
    init_db(engine)
    Session = make_session_factory(engine)
    with Session() as session:
        run = record_run(
            session,
            command=command,
            config_digest=cfg.digest() if cfg is not None else "-",
            seed=cfg.run.seed if cfg is not None else 0,
            exit_code=code,
            message=message,
            summary=summary,
            started_at=datetime.utcnow(),
        )
        if report is not None:
            record_checks(session, run, report)


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    out_dir: Path = args.out
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        print(f"cannot create output directory {out_dir}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    configure_logging(out_dir, args.verbose)

    cfg = None
    summary: dict = {}
    report = None
    message = None
    try:
        cfg = load_config(args.config).with_overrides(args.seed, args.threads)
        stack = args.stack if getattr(args, "stack", None) is not None else out_dir / "stack.txt"
        if args.command == "chainrec":
            summary = run_chainrec(cfg, out_dir)
            code = EXIT_OK
        elif args.command == "construct":
            summary = run_construct(cfg, out_dir)
            code = EXIT_OK
        elif args.command == "verify":
            report = run_verify(cfg, stack, out_dir)
            print(report.summary())
            code = EXIT_OK if report.passed else EXIT_VERIFY_FAILED
        else:
            run_export_grid(cfg, stack, out_dir)
            code = EXIT_OK
    except _CONSTRUCTION_ERRORS as exc:
        logger.error("%s failed: %s", args.command, exc)
        message, code = str(exc), EXIT_CONSTRUCTION
    except (ConfigError, StackFormatError, OSError, ValueError) as exc:
        logger.error("%s: %s", args.command, exc)
        message, code = str(exc), EXIT_USAGE

    _record(out_dir, args.command, cfg, code, message, summary, report)
    return code


if __name__ == "__main__":
    raise SystemExit(main())
