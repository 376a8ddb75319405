"""Command-line entry point.

Exit codes: 0 success, 2 I/O or parse failure, 3 validation failure
(bad config, bad data, incompatible checkpoint), 4 numeric failure.
Every command emits a run manifest: next to its primary output file, at
``--manifest`` when given, or as one JSON line on stderr otherwise.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import hashlib
import json
import logging
import os
import sys
import warnings
from pathlib import Path

from . import __version__
from .dataset import (
    DatasetError,
    ParseError,
    Schema,
    make_synthetic,
    parse_records,
    serialize,
    split_by_density,
)
from .diffcore import NonFiniteError
from .diffcore.params import CheckpointError
from .dyngraph import build_graph
from .harness import (
    ConfigError,
    ConfigMismatchError,
    GACLModel,
    GridWarning,
    MetricsReport,
    ModelConfig,
    NoEligibleTargets,
    baseline_global_mean,
    evaluate,
    load_config,
    predict_targets,
    reports_to_csv,
    run_ablation_suite,
    train,
)
from .harness.training import window_builder

EXIT_OK, EXIT_IO, EXIT_INVALID, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("gacl")


class UsageError(ValueError):
    """Arguments that are well-formed but inconsistent."""


def file_hash(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


class RunManifest:
    """What a command read, what it wrote and under which configuration."""

    def __init__(self, command: str):
        self.command = command
        self.config: dict | None = None
        self.config_hash: str | None = None
        self.inputs: dict[str, str] = {}
        self.outputs: list[str] = []
        self.started = _now()

    def add_input(self, path: str | Path) -> None:
        self.inputs[str(path)] = file_hash(path)

    def add_output(self, path: str | Path) -> None:
        self.outputs.append(str(path))

    def set_config(self, cfg: ModelConfig) -> None:
        self.config = cfg.to_dict()
        self.config_hash = cfg.config_hash()

    def to_dict(self) -> dict:
        return {
            "command": self.command,
            "config": self.config,
            "config_hash": self.config_hash,
            "inputs": self.inputs,
            "outputs": {p: file_hash(p) for p in self.outputs},
            "started": self.started,
            "finished": _now(),
            "version": __version__,
        }

    def emit(self, path: str | Path | None) -> None:
        payload = self.to_dict()
        if path is None:
            sys.stderr.write(json.dumps(payload, sort_keys=True) + "\n")
            return
        Path(path).write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n", encoding="utf-8")


# -- shared helpers -----------------------------------------------------------

def _write(path: str | Path | None, text: str, manifest: RunManifest) -> None:
    if path is None:
        sys.stdout.write(text)
        return
    Path(path).write_text(text, encoding="utf-8")
    manifest.add_output(path)


def _manifest_path(args) -> Path | None:
    if getattr(args, "manifest", None):
        return Path(args.manifest)
    out = getattr(args, "output", None)
    return Path(f"{out}.manifest.json") if out else None


def _load_dataset(args, manifest: RunManifest):
    manifest.add_input(args.dataset)
    return parse_records(args.dataset)


def _resolve_config(args, manifest: RunManifest) -> ModelConfig:
    """Defaults, then the config file, then command-line flags (flags win)."""
    if getattr(args, "config", None):
        manifest.add_input(args.config)
        cfg = load_config(args.config)
    else:
        cfg = ModelConfig()
    overrides = {}
    for flag, key in (("density", "density"), ("ablation", "ablation"), ("seed_split", "seed_split"),
                      ("seed_init", "seed_init"), ("seed_sample", "seed_sample"), ("workers", "workers"),
                      ("epochs", "epochs")):
        value = getattr(args, flag, None)
        if value is not None:
            overrides[key] = value
    try:
        cfg = cfg.replace(**overrides)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    cfg.validate(strict_grid=getattr(args, "strict_grid", False))
    manifest.set_config(cfg)
    return cfg


def _render_reports(reports, fmt: str) -> str:
    if fmt == "csv":
        return reports_to_csv(reports)
    if len(reports) == 1:
        return reports[0].to_json()
    return json.dumps([r.to_dict() for r in reports], sort_keys=True, indent=2) + "\n"


# -- commands -------------------------------------------------------------

def cmd_synth(args, manifest: RunManifest) -> int:
    ds = make_synthetic(args.users, args.services, args.slices, rank=args.rank, drift=args.drift,
                        noise=args.noise, seed=args.seed)
    _write(args.output, serialize(ds), manifest)
    return EXIT_OK


def cmd_ingest(args, manifest: RunManifest) -> int:
    columns = tuple(args.columns.split(",")) if args.columns else None
    schema = Schema(delimiter=args.delimiter, n_users=args.n_users, n_services=args.n_services,
                    n_slices=args.n_slices, **({"columns": columns} if columns else {}))
    manifest.add_input(args.input)
    ds = parse_records(args.input, schema)
    _write(args.output, serialize(ds), manifest)
    log.info("ingested %d records (%d users, %d services, %d slices)", len(ds), ds.n_users,
             ds.n_services, ds.n_slices)
    return EXIT_OK


def cmd_split(args, manifest: RunManifest) -> int:
    ds = _load_dataset(args, manifest)
    cfg = _resolve_config(args, manifest)
    split = split_by_density(ds, cfg.density, cfg.seed_split)
    _write(args.output, split.manifest_json(), manifest)
    return EXIT_OK


def cmd_train(args, manifest: RunManifest) -> int:
    ds = _load_dataset(args, manifest)
    cfg = _resolve_config(args, manifest)
    split = split_by_density(ds, cfg.density, cfg.seed_split)
    if args.resume:
        manifest.add_input(args.resume)
    result = train(cfg, split, resume=args.resume)
    out = Path(args.output)
    result.save(out)
    log_path = Path(f"{out}.log.jsonl")
    log_path.write_text(result.log_jsonl(), encoding="utf-8")
    for p in (out, Path(f"{out}.json"), log_path):
        manifest.add_output(p)
    log.info("trained %d epochs%s", result.epochs_run, " (early stop)" if result.stopped_early else "")
    return EXIT_OK


def _load_model(args, manifest: RunManifest):
    manifest.add_input(args.checkpoint)
    model, _, _ = GACLModel.load(args.checkpoint)
    manifest.set_config(model.config)
    return model


def _checked_config(args, model: GACLModel, manifest: RunManifest) -> ModelConfig | None:
    """The config the caller expects the checkpoint to match, if one was given."""
    if not (getattr(args, "config", None) or any(
            getattr(args, k, None) is not None for k in ("density", "ablation", "seed_split",
                                                          "seed_init", "seed_sample"))):
        return None
    base = load_config(args.config) if args.config else model.config
    if args.config:
        manifest.add_input(args.config)
    overrides = {k: getattr(args, k) for k in ("density", "ablation", "seed_split", "seed_init", "seed_sample")
                 if getattr(args, k, None) is not None}
    return base.replace(**overrides)


def cmd_evaluate(args, manifest: RunManifest) -> int:
    ds = _load_dataset(args, manifest)
    model = _load_model(args, manifest)
    expected = _checked_config(args, model, manifest)
    split = split_by_density(ds, model.config.density, model.config.seed_split)
    report = evaluate(model, split, expected, force=args.force, dataset_name=ds.name,
                      workers=args.workers or 1)
    _write(args.output, _render_reports([report], args.output_format), manifest)
    return EXIT_OK


def cmd_ablate(args, manifest: RunManifest) -> int:
    ds = _load_dataset(args, manifest)
    cfg = _resolve_config(args, manifest)
    split = split_by_density(ds, cfg.density, cfg.seed_split)
    reports = run_ablation_suite(cfg, split, dataset_name=ds.name)
    _write(args.output, _render_reports(reports, args.output_format), manifest)
    return EXIT_OK


def cmd_predict(args, manifest: RunManifest) -> int:
    ds = _load_dataset(args, manifest)
    model = _load_model(args, manifest)
    expected = _checked_config(args, model, manifest)
    if expected is not None and expected.config_hash() != model.config.config_hash() and not args.force:
        raise ConfigMismatchError("config does not match the checkpoint (use --force to override)")
    if (ds.n_users, ds.n_services) != (model.n_users, model.n_services):
        raise UsageError(f"dataset has {ds.n_users} users / {ds.n_services} services, checkpoint expects "
                         f"{model.n_users} / {model.n_services}")
    if not 0 <= args.user < model.n_users:
        raise UsageError(f"user {args.user} is outside 0..{model.n_users - 1}")
    if not 0 <= args.service < model.n_services:
        raise UsageError(f"service {args.service} is outside 0..{model.n_services - 1}")
    ws = model.config.ws
    if not ws <= args.slice <= ds.n_slices:
        raise UsageError(f"slice {args.slice} is outside the predictable range {ws}..{ds.n_slices}")
    split = split_by_density(ds, model.config.density, model.config.seed_split)
    graph = build_graph(split)
    pred = predict_targets(model, window_builder(model, graph), [(args.user, args.service, args.slice)])
    _write(args.output, f"{float(pred[0])!r}\n", manifest)
    return EXIT_OK


def cmd_baseline(args, manifest: RunManifest) -> int:
    ds = _load_dataset(args, manifest)
    cfg = _resolve_config(args, manifest)
    split = split_by_density(ds, cfg.density, cfg.seed_split)
    report = baseline_global_mean(split, ws=cfg.ws, dataset_name=ds.name)
    _write(args.output, _render_reports([report], args.output_format), manifest)
    return EXIT_OK


def cmd_report(args, manifest: RunManifest) -> int:
    """Merge saved report JSON files into one table."""
    reports = []
    for path in args.reports:
        manifest.add_input(path)
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        for item in data if isinstance(data, list) else [data]:
            reports.append(MetricsReport.from_dict(item))
    _write(args.output, _render_reports(reports, args.output_format), manifest)
    return EXIT_OK


# -- argument parsing -------------------------------------------------------

def _add_run_flags(p: argparse.ArgumentParser, training: bool = True) -> None:
    p.add_argument("--config", help="TOML or JSON file whose keys are ModelConfig fields")
    p.add_argument("--density", type=float)
    p.add_argument("--ablation", choices=["full", "t", "w", "tw"])
    p.add_argument("--seed-split", type=int, dest="seed_split")
    p.add_argument("--seed-init", type=int, dest="seed_init")
    p.add_argument("--seed-sample", type=int, dest="seed_sample")
    if training:
        p.add_argument("--epochs", type=int)
        p.add_argument("--strict-grid", action="store_true",
                       help="reject hyperparameters outside the experiment grid instead of warning")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gacl", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, func, help_text, output=True):
        p = sub.add_parser(name, help=help_text)
        p.set_defaults(func=func)
        if output:
            p.add_argument("-o", "--output", help="output file (stdout when omitted)")
        p.add_argument("--manifest", help="where to write the run manifest")
        p.add_argument("--workers", type=int, help="parallel workers (1 is the reproducible reference)")
        return p

    p = command("synth", cmd_synth, "write a synthetic low-rank dataset with temporal drift")
    p.add_argument("--users", type=int, default=5)
    p.add_argument("--services", type=int, default=8)
    p.add_argument("--slices", type=int, default=6)
    p.add_argument("--rank", type=int, default=2)
    p.add_argument("--drift", type=float, default=0.05)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)

    p = command("ingest", cmd_ingest, "validate a raw records file and write it in canonical form")
    p.add_argument("input")
    p.add_argument("--delimiter", help="column separator (default: any whitespace)")
    p.add_argument("--columns", help="column roles in file order, e.g. user,service,slice,value")
    p.add_argument("--n-users", type=int, dest="n_users")
    p.add_argument("--n-services", type=int, dest="n_services")
    p.add_argument("--n-slices", type=int, dest="n_slices")

    p = command("split", cmd_split, "write the train/test split manifest")
    p.add_argument("--dataset", required=True)
    _add_run_flags(p)

    p = command("train", cmd_train, "train a model and write a checkpoint")
    p.add_argument("--dataset", required=True)
    p.add_argument("--resume", help="checkpoint to continue from")
    _add_run_flags(p)
    p.set_defaults(output_required=True)

    for name, func, help_text in (("evaluate", cmd_evaluate, "score a checkpoint on the test split"),
                                  ("predict", cmd_predict, "predict one (user, service, slice) value")):
        p = command(name, func, help_text)
        p.add_argument("--dataset", required=True)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--force", action="store_true", help="proceed despite a config hash mismatch")
        _add_run_flags(p, training=False)
        if name == "evaluate":
            p.add_argument("--output-format", choices=["json", "csv"], default="json")
        else:
            p.add_argument("--user", type=int, required=True)
            p.add_argument("--service", type=int, required=True)
            p.add_argument("--slice", type=int, required=True)

    p = command("ablate", cmd_ablate, "train and score the full model and its three ablations")
    p.add_argument("--dataset", required=True)
    p.add_argument("--output-format", choices=["json", "csv"], default="csv")
    _add_run_flags(p)

    p = command("baseline", cmd_baseline, "score the global-mean baseline")
    p.add_argument("--dataset", required=True)
    p.add_argument("--output-format", choices=["json", "csv"], default="json")
    _add_run_flags(p)

    p = command("report", cmd_report, "merge saved report JSON files")
    p.add_argument("reports", nargs="+")
    p.add_argument("--output-format", choices=["json", "csv"], default="csv")
    return parser


def _configure_logging() -> None:
    level = os.environ.get("GACL_LOG", "error").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    logging.basicConfig(level=levels.get(level, logging.ERROR), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    if level != "debug":
        warnings.simplefilter("ignore", GridWarning)


def _fail(code: int, exc: BaseException) -> int:
    sys.stderr.write(f"gacl: error: {exc}\n")
    return code


def main(argv: list[str] | None = None) -> int:
    with warnings.catch_warnings():
        return _main(argv)


def _main(argv: list[str] | None) -> int:
    _configure_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "output_required", False) and not args.output:
        parser.error(f"{args.command} requires -o/--output")
    manifest = RunManifest(args.command)
    try:
        code = args.func(args, manifest)
    except ParseError as exc:
        return _fail(EXIT_IO, exc)
    except NonFiniteError as exc:
        return _fail(EXIT_NUMERIC, exc)
    except (DatasetError, ConfigError, ConfigMismatchError, CheckpointError, NoEligibleTargets,
            UsageError) as exc:
        return _fail(EXIT_INVALID, exc)
    except OSError as exc:
        return _fail(EXIT_IO, exc)
    except ValueError as exc:
        return _fail(EXIT_INVALID, exc)
    try:
        manifest.emit(_manifest_path(args))
    except OSError as exc:
        return _fail(EXIT_IO, exc)
    return code


if __name__ == "__main__":
    sys.exit(main())
