"""Command-line entry point: ``mimae {gen-data,pretrain,probe,mi-bench,plot}``.

Every subcommand reads ``--config FILE`` (optional) plus repeatable
``--set key=value`` overrides. On success a one-line JSON summary goes to
stdout and the exit code is 0. On failure a one-line JSON object
``{"error": ..., "kind": ..., "message": ...}`` goes to stderr with a
nonzero exit code (2 usage/config, 3 bad input file, 4 training diverged,
5 I/O, 1 anything else).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from mimae.errors import ConfigError, ContractError, FormatError, MimaeError, TrainingDiverged
from mimae.io.config import RunConfig, describe, dump_config, load_config

log = logging.getLogger("mimae")

EXIT_CODES = ((ConfigError, 2), (ContractError, 2), (FormatError, 3), (TrainingDiverged, 4), (OSError, 5))


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _emit(obj) -> None:
    sys.stdout.write(json.dumps(obj, sort_keys=True) + "\n")
    sys.stdout.flush()


def _dataset(cfg: RunConfig, key: str = "data_path"):
    from mimae.io.dataset import gen_synthetic, load_dataset

    path = getattr(cfg, key)
    if path:
        ds = load_dataset(path)
        if ds.shape != (cfg.channels, cfg.image_size, cfg.image_size):
            raise ContractError(f"{path}: images are {ds.shape} (C, H, W) but the config expects "
                                f"({cfg.channels}, {cfg.image_size}, {cfg.image_size})")
        return ds
    return gen_synthetic(cfg.synthetic_spec())


# ------------------------------------------------------------- commands
def cmd_gen_data(cfg: RunConfig) -> dict:
    from mimae.io.dataset import gen_synthetic, write_dataset

    ds = gen_synthetic(cfg.synthetic_spec())
    path = write_dataset(cfg.path("data_path", "data.mimds"), ds)
    counts = [int((ds.labels == c).sum()) for c in range(ds.label_count)]
    return {"command": "gen-data", "path": str(path), "images": len(ds), "class_counts": counts}


def cmd_pretrain(cfg: RunConfig) -> dict:
    from mimae.io.checkpoint import load_checkpoint
    from mimae.trainer import run_pretrain

    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ds = _dataset(cfg)
    probe_ds = _dataset(cfg, "probe_data_path") if cfg.probe_data_path else ds
    ckpt = out / "checkpoint.mimae"
    state = None
    if cfg.resume and ckpt.exists():
        state = load_checkpoint(ckpt)
        if state.train_config != cfg.train_config() or state.model_config != cfg.model_config():
            raise ConfigError(f"{ckpt}: checkpoint was written with a different configuration")
        log.info("resuming from %s at epoch %d", ckpt, state.epoch)
    (out / "config.txt").write_text(dump_config(cfg), encoding="utf-8")
    state = run_pretrain(cfg.model_config(), cfg.train_config(), ds, state=state, out_dir=out,
                         probe_dataset=probe_ds)
    last = state.history[-1] if state.history else {}
    return {"command": "pretrain", "out_dir": str(out), "epochs": state.epoch, "steps": state.global_step,
            "final_rec": last.get("rec"), "gate_epoch": state.gate_epoch,
            "metrics": str(out / "metrics.csv"), "checkpoint": str(ckpt)}


def cmd_probe(cfg: RunConfig) -> dict:
    from mimae.io.checkpoint import load_checkpoint
    from mimae.trainer import linear_probe

    ckpt = cfg.path("checkpoint", "checkpoint.mimae")
    state = load_checkpoint(ckpt)
    ds = _dataset(cfg, "probe_data_path" if cfg.probe_data_path else "data_path")
    acc = linear_probe(state.model, ds, test_fraction=cfg.probe_test_fraction, seed=cfg.seed,
                       epochs=cfg.probe_epochs, lr=cfg.probe_lr)
    result = {"command": "probe", "checkpoint": str(ckpt), "probe_acc": acc, "images": len(ds)}
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "probe.json").write_text(json.dumps(result, sort_keys=True) + "\n", encoding="utf-8")
    return result


def cmd_mi_bench(cfg: RunConfig) -> dict:
    from mimae.mi_verify import sandwich_report, write_report

    rows = sandwich_report(cfg.bench_rhos, dim=cfg.bench_dim, n=cfg.bench_samples, tau=cfg.bench_tau,
                           batch=cfg.bench_batch, delta=cfg.bench_delta, data_seed=cfg.data_seed,
                           train_seed=cfg.bench_seed)
    path = write_report(Path(cfg.out_dir) / "mi_bench.csv", rows)
    failures = [f for r in rows for f in r.failures()]
    return {"command": "mi-bench", "report": str(path), "rows": len(rows), "failures": failures}


def cmd_plot(cfg: RunConfig) -> dict:
    from mimae.io.plot import plot_metrics

    sources = [p.strip() for p in cfg.metrics_path.split(",") if p.strip()] or [cfg.path("metrics_path",
                                                                                        "metrics.csv")]
    written = plot_metrics(sources, cfg.path("plot_dir", "plots"), threshold=cfg.eps_l)
    return {"command": "plot", "files": [str(p) for p in written]}


COMMANDS = {
    "gen-data": (cmd_gen_data, "write the synthetic dataset (MIMDS1)"),
    "pretrain": (cmd_pretrain, "pretrain, writing metrics.csv and checkpoint.mimae to out_dir"),
    "probe": (cmd_probe, "linear-probe a checkpoint on a labelled dataset"),
    "mi-bench": (cmd_mi_bench, "InfoNCE / CLUB estimates against closed-form Gaussian MI"),
    "plot": (cmd_plot, "render metrics CSVs as SVG line charts"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mimae", description=__doc__.split("\n")[0],
                     epilog="Run 'mimae keys' to list every configuration key with its default.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, (_, helptext) in COMMANDS.items():
        p = sub.add_parser(name, help=helptext, description=helptext)
        p.add_argument("--config", metavar="PATH", help="key = value configuration file")
        p.add_argument("--set", metavar="KEY=VALUE", action="append", default=[], dest="overrides",
                       help="override one key (repeatable)")
        p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub.add_parser("keys", help="print every configuration key with its default")
    return parser


def _exit_code(exc: BaseException) -> int:
    for cls, code in EXIT_CODES:
        if isinstance(exc, cls):
            return code
    return 1


def _fail(kind: str, exc: BaseException, code: int) -> int:
    message = " ".join(str(exc).split()) or type(exc).__name__
    payload = {"error": type(exc).__name__, "kind": kind, "message": message}
    for attr in ("path", "offset", "key", "line"):
        value = getattr(exc, attr, None)
        if value is not None:
            payload[attr] = value
    sys.stderr.write(json.dumps(payload, sort_keys=True) + "\n")
    return code


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        return _fail("usage", exc, 2)
    if args.command == "keys":
        sys.stdout.write(describe())
        return 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.overrides)
        _emit(COMMANDS[args.command][0](cfg))
        return 0
    except (MimaeError, OSError, ValueError) as exc:
        code = _exit_code(exc)
        kind = {2: "config", 3: "format", 4: "diverged", 5: "io"}.get(code, "error")
        return _fail(kind, exc, code)
    except KeyboardInterrupt as exc:
        return _fail("interrupted", exc, 130)


if __name__ == "__main__":
    sys.exit(main())
