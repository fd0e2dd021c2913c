"""Command-line entry points.

Subcommands: ``meta-train`` (run a trainer and write checkpoints),
``meta-test`` (evaluate a checkpoint over the scenario grid),
``gen-adv`` (batch FGSM export), ``gradcheck`` (run the oracle suite),
``report`` (re-render a report.json into csv files).

Exit codes: 0 ok, 1 runtime failure, 2 configuration problem,
3 data or checkpoint problem. ``ADML_THREADS`` caps evaluation workers.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from .adversarial import fgsm
from .autodiff import Tensor
from .config import RunConfig
from .errors import (
    AdmetaError,
    ConfigError,
    FormatError,
    GeometryError,
    IngestionError,
)
from .evaluation import scenario_grid
from .gradcheck import run_checks
from .metalearn import TrainerKind, meta_train
from .models import init_params
from .serialize import (
    atomic_write_bytes,
    load_checkpoint,
    save_checkpoint,
    save_sample,
)
from .tasks import sample_episode

__all__ = ["main"]


def _workers() -> int:
    raw = os.environ.get("ADML_THREADS", "")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def _fmt_eps(eps: float) -> str:
    return f"{eps:.10g}"


def _overrides(args) -> dict[str, str]:
    """Flag values expressed as raw config-file strings."""
    pairs = {
        "seed": ("seed", str),
        "out": ("out", str),
        "shots": ("shots", str),
        "ways": ("ways", str),
        "order": ("order", str),
        "eps": ("eps_test", str),
        "tasks": ("num_test_tasks", str),
    }
    out = {}
    for attr, (key, conv) in pairs.items():
        value = getattr(args, attr, None)
        if value is not None:
            out[key] = conv(value)
    return out


def _load_run_config(args, require_config: bool = True) -> RunConfig:
    if getattr(args, "config", None):
        return RunConfig.from_file(args.config, _overrides(args))
    if require_config:
        raise ConfigError("--config is required")
    raise ConfigError("no configuration available")


# -- result emission --------------------------------------------------------

_GRID_HEADER = "support,query,eps,mean_accuracy,ci_halfwidth"
_CURVES_HEADER = "support,query,eps,step,loss,top1"


def _write_results(outdir: Path, grid, ways: int, shots: int, num_tasks: int) -> None:
    grid_rows = []
    curve_rows = []
    for scenario, report in grid:
        grid_rows.append(
            {
                "support": scenario.support_mode,
                "query": scenario.query_mode,
                "eps": float(_fmt_eps(scenario.epsilon_test)),
                "mean_accuracy": float(f"{report.mean_accuracy:.4f}"),
                "ci_halfwidth": float(f"{report.ci_halfwidth:.4f}"),
            }
        )
        for step, (loss, top1) in enumerate(zip(report.loss_curve, report.top1_curve)):
            curve_rows.append(
                {
                    "support": scenario.support_mode,
                    "query": scenario.query_mode,
                    "eps": float(_fmt_eps(scenario.epsilon_test)),
                    "step": step,
                    "loss": float(f"{loss:.6f}"),
                    "top1": float(f"{top1:.6f}"),
                }
            )
    payload = {
        "ways": ways,
        "shots": shots,
        "num_tasks": num_tasks,
        "grid": grid_rows,
        "curves": curve_rows,
    }
    _render_csvs(outdir, payload)
    blob = json.dumps(payload, indent=2) + "\n"
    atomic_write_bytes(outdir / "report.json", blob.encode("utf-8"))


def _render_csvs(outdir: Path, payload: dict) -> None:
    grid_lines = [_GRID_HEADER]
    for row in payload["grid"]:
        grid_lines.append(
            f"{row['support']},{row['query']},{_fmt_eps(row['eps'])},"
            f"{row['mean_accuracy']:.4f},{row['ci_halfwidth']:.4f}"
        )
    curve_lines = [_CURVES_HEADER]
    for row in payload["curves"]:
        curve_lines.append(
            f"{row['support']},{row['query']},{_fmt_eps(row['eps'])},"
            f"{row['step']},{row['loss']:.6f},{row['top1']:.6f}"
        )
    atomic_write_bytes(
        outdir / "grid.csv", ("\n".join(grid_lines) + "\n").encode("utf-8")
    )
    atomic_write_bytes(
        outdir / "curves.csv", ("\n".join(curve_lines) + "\n").encode("utf-8")
    )


# -- commands ---------------------------------------------------------------


def cmd_meta_train(args) -> int:
    cfg = _load_run_config(args)
    source = cfg.build_source()
    train_src, _, _ = cfg.build_splits(source)
    spec = cfg.model_spec(source.geometry)
    attack = cfg.attack_for(source)
    mcfg = cfg.meta_config(attack)
    outdir = Path(cfg.out)
    outdir.mkdir(parents=True, exist_ok=True)
    echo = cfg.echo()
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    clock = [time.perf_counter()]

    def sink(episode: int, params, mean_loss: float) -> None:
        now = time.perf_counter()
        wall, clock[0] = now - clock[0], now
        print(f"episode={episode} mean_inner_loss={mean_loss:.6f} wall_time={wall:.3f}s")
        if cfg.checkpoint_every > 0 and (episode + 1) % cfg.checkpoint_every == 0:
            save_checkpoint(
                outdir / f"ckpt_{episode + 1:06d}.bin", params, episode + 1, echo
            )

    kind = TrainerKind.from_name(cfg.trainer)
    theta = meta_train(kind, spec, train_src, mcfg, rng, sink=sink)
    save_checkpoint(outdir / "ckpt_final.bin", theta, cfg.episodes, echo)
    print(f"wrote {outdir / 'ckpt_final.bin'}")
    return 0


def cmd_meta_test(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    if getattr(args, "config", None):
        cfg = RunConfig.from_file(args.config, _overrides(args))
    else:
        cfg = RunConfig.from_text(ckpt.config_echo, _overrides(args))
    source = cfg.build_source()
    _, _, test_src = cfg.build_splits(source)
    if test_src.num_classes == 0:
        raise ConfigError("test split has no classes")
    spec = cfg.model_spec(source.geometry)
    attack = cfg.attack_for(source)
    mcfg = cfg.meta_config(attack)
    outdir = Path(cfg.out)
    outdir.mkdir(parents=True, exist_ok=True)
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    grid = scenario_grid(
        spec, ckpt.params, test_src, cfg.shots, cfg.eps_test, mcfg,
        cfg.num_test_tasks, rng, workers=_workers(),
    )
    _write_results(outdir, grid, cfg.ways, cfg.shots, cfg.num_test_tasks)
    for scenario, report in grid:
        print(
            f"{scenario.support_mode}/{scenario.query_mode} "
            f"eps={_fmt_eps(scenario.epsilon_test)}: "
            f"{report.mean_accuracy:.4f} +- {report.ci_halfwidth:.4f}"
        )
    return 0


def cmd_gen_adv(args) -> int:
    if not args.config:
        raise ConfigError("--config is required")
    overrides = _overrides(args)
    overrides.pop("eps_test", None)
    if args.eps is not None:
        first = args.eps.split(",")[0].strip()
        overrides["eps_train"] = first
    cfg = RunConfig.from_file(args.config, overrides)
    source = cfg.build_source()
    train_src, _, _ = cfg.build_splits(source)
    spec = cfg.model_spec(source.geometry)
    attack = cfg.attack_for(source)
    if args.checkpoint:
        params = load_checkpoint(args.checkpoint).params
    else:
        params = init_params(spec, seed=cfg.seed)
    outdir = Path(cfg.out)
    (outdir / "samples").mkdir(parents=True, exist_ok=True)
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    num_tasks = args.tasks if args.tasks is not None else 1
    lines = []
    for t in range(num_tasks):
        ep = sample_episode(train_src, cfg.ways, cfg.shots, cfg.query_per_class, rng)
        adv_sup = fgsm(spec, params, Tensor(ep.support_x), ep.support_y, attack)
        adv_qry = fgsm(spec, params, Tensor(ep.query_x), ep.query_y, attack)
        for tag, data, labels in (
            ("s", adv_sup.data, ep.support_y),
            ("q", adv_qry.data, ep.query_y),
        ):
            for i in range(data.shape[0]):
                rel = f"samples/t{t:03d}_{tag}{i:03d}.bin"
                save_sample(outdir / rel, data[i])
                lines.append(f"task{t:03d}_class{int(labels[i])}\t{rel}")
    atomic_write_bytes(
        outdir / "manifest.tsv", ("\n".join(lines) + "\n").encode("utf-8")
    )
    print(f"wrote {len(lines)} adversarial samples under {outdir}")
    return 0


def cmd_gradcheck(args) -> int:
    results = run_checks(fault=args.inject_fault)
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{r.name:<22} max_err={r.max_err:.3e} tol={r.tol:.0e} {status}")
    failures = [r for r in results if not r.passed]
    if failures:
        print(f"FAILED: {failures[0].name}", file=sys.stderr)
        return 1
    print(f"all {len(results)} checks passed")
    return 0


def cmd_report(args) -> int:
    try:
        payload = json.loads(Path(args.report).read_text(encoding="utf-8"))
    except OSError as e:
        raise FormatError(f"cannot read report: {e}") from e
    except json.JSONDecodeError as e:
        raise FormatError(f"malformed report: {e}") from e
    outdir = Path(args.out) if args.out else Path(args.report).parent
    outdir.mkdir(parents=True, exist_ok=True)
    _render_csvs(outdir, payload)
    print(f"wrote {outdir / 'grid.csv'} and {outdir / 'curves.csv'}")
    return 0


# -- parser -----------------------------------------------------------------


def _add_common(p: argparse.ArgumentParser, with_config: bool = True) -> None:
    if with_config:
        p.add_argument("--config", help="path to a key = value config file")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--out", help="override the output directory")
    p.add_argument("--eps", help="comma-separated test budgets, e.g. 2,0.2")
    p.add_argument("--shots", type=int, help="support samples per class")
    p.add_argument("--ways", type=int, help="classes per episode")
    p.add_argument("--tasks", type=int, help="number of meta-test tasks")
    p.add_argument("--order", choices=("full", "first"), help="meta-gradient order")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="admeta",
        description="Adversarially robust meta-learning toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("meta-train", help="run a meta-trainer, write checkpoints")
    _add_common(p)
    p.set_defaults(func=cmd_meta_train)

    p = sub.add_parser("meta-test", help="evaluate a checkpoint on the scenario grid")
    p.add_argument("checkpoint", help="checkpoint file to evaluate")
    _add_common(p)
    p.set_defaults(func=cmd_meta_test)

    p = sub.add_parser("gen-adv", help="export FGSM adversarial samples")
    p.add_argument("checkpoint", nargs="?", help="optional checkpoint for the model")
    _add_common(p)
    p.set_defaults(func=cmd_gen_adv)

    p = sub.add_parser("gradcheck", help="run gradient and closed-form oracles")
    p.add_argument("--inject-fault", metavar="NAME", help="corrupt a backward rule (test fixture)")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("report", help="re-render report.json into csv files")
    p.add_argument("report", help="path to report.json")
    p.add_argument("--out", help="output directory (default: alongside the report)")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except (FormatError, IngestionError, GeometryError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return 3
    except AdmetaError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
