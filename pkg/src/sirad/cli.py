"""``sirad`` command line: synth, train, eval, score, render, ablate, gradcheck."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import harness
from .config import OUTPUT_ENV, Config, load_config, write_config
from .data import ConfigError, load_manifests, load_record, test_set
from .netpbm import NetpbmError
from .persist import CheckpointError, load_checkpoint
from .scoring import anomaly_maps
from .synth import SynthSpec, synth_benchmark
from .tensor import ShapeError
from .viz import normalize_maps, overlay_path, overlay_ppm

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_MISSING = 4
EXIT_DATA = 5
EXIT_CHECKPOINT = 6
EXIT_CHECK_FAILED = 7

EXIT_HELP = f"""\
exit codes:
  {EXIT_OK}  success
  {EXIT_INTERNAL}  internal error
  {EXIT_USAGE}  usage error (unknown flag, bad flag value)
  {EXIT_CONFIG}  config or manifest schema violation
  {EXIT_MISSING}  missing or unreadable file
  {EXIT_DATA}  malformed image data or shape mismatch
  {EXIT_CHECKPOINT}  malformed or incompatible checkpoint
  {EXIT_CHECK_FAILED}  gradcheck tolerance not met

errors are printed as one line on stderr:  sirad: error[<category>]: <message>
the default output root is ${OUTPUT_ENV}, or ./runs when unset
"""

log = logging.getLogger("sirad")


class CliError(Exception):
    def __init__(self, code: int, category: str, message: str):
        super().__init__(message)
        self.code, self.category = code, category


def _classify(exc: BaseException) -> CliError:
    if isinstance(exc, CliError):
        return exc
    if isinstance(exc, CheckpointError):
        return CliError(EXIT_CHECKPOINT, "checkpoint", str(exc))
    if isinstance(exc, ConfigError):
        return CliError(EXIT_CONFIG, "config", str(exc))
    if isinstance(exc, (NetpbmError, ShapeError)):
        return CliError(EXIT_DATA, "data", str(exc))
    if isinstance(exc, FileNotFoundError):
        name = exc.filename if exc.filename is not None else str(exc)
        return CliError(EXIT_MISSING, "missing", f"no such file: {name}")
    if isinstance(exc, OSError):
        return CliError(EXIT_MISSING, "io", str(exc))
    return CliError(EXIT_INTERNAL, "internal", f"{type(exc).__name__}: {exc}")


# ----------------------------------------------------------------------------
# argument parsing


def _csv_ints(text: str) -> list[int]:
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")
    if not values:
        raise argparse.ArgumentTypeError("expected at least one integer")
    return values


# flag dest -> Config field
OVERRIDES = {
    "seed": "seed",
    "image_size": "image_size",
    "channels": "channels",
    "loops": "loops",
    "iterations": "iterations",
    "batch_size": "batch_size",
    "lr": "learning_rate",
    "sigma": "sigma_smooth",
    "protocol": "protocol",
    "manifest": "manifests",
    "teacher_checkpoint": "teacher_checkpoint",
    "p_lo": "p_lo",
    "p_hi": "p_hi",
    "alpha": "alpha",
}


def _config_flags(p: argparse.ArgumentParser, with_ckpt: bool = False) -> None:
    g = p.add_argument_group("configuration (flags override the config file)")
    g.add_argument("--config", help="JSON config file")
    g.add_argument("--out", help="output directory")
    g.add_argument("--seed", type=int)
    g.add_argument("--image-size", type=int)
    g.add_argument("--channels", type=int)
    g.add_argument("--loops", type=int, help="refinement loops L")
    g.add_argument("--iterations", type=int)
    g.add_argument("--batch-size", type=int)
    g.add_argument("--lr", type=float, help="Adam learning rate")
    g.add_argument("--sigma", type=float, help="anomaly map smoothing sigma")
    g.add_argument("--protocol", help="e.g. one_shot_universal or k_shot_specialized:5")
    g.add_argument("--manifest", action="append", help="dataset manifest or benchmark.json (repeatable)")
    g.add_argument("--teacher-checkpoint", help="checkpoint holding teacher.* weights")
    g.add_argument("--p-lo", type=float)
    g.add_argument("--p-hi", type=float)
    g.add_argument("--alpha", type=float)
    if with_ckpt:
        g.add_argument("--ckpt", required=True, help="trained checkpoint")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sirad",
        description="Iterative feature-reconstruction anomaly detection.",
        epilog=EXIT_HELP,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    def add(name, help_text, **kw):
        return sub.add_parser(
            name, help=help_text, description=help_text, epilog=EXIT_HELP,
            formatter_class=argparse.RawDescriptionHelpFormatter, **kw,
        )

    p = add("synth", "write a seeded synthetic multi-domain benchmark")
    d = SynthSpec()
    p.add_argument("--out", required=True, help="benchmark directory")
    p.add_argument("--seed", type=int, default=d.seed)
    p.add_argument("--domains", type=int, default=d.domains)
    p.add_argument("--train-normals", type=int, default=d.train_normals)
    p.add_argument("--test-normals", type=int, default=d.test_normals)
    p.add_argument("--test-anoms", type=int, default=d.test_anoms)
    p.add_argument("--size", type=int, default=d.size)
    p.add_argument("--contrast", type=float, default=d.defect_contrast, help="defect contrast; 0 gives a negative control")
    p.add_argument("--radius", type=float, default=d.defect_radius, help="defect radius as a fraction of the side")
    p.add_argument("--noise", type=float, default=d.noise)
    p.add_argument("--max-shift", type=int, default=d.max_shift)
    p.add_argument("--fov", type=float, default=d.fov)

    _config_flags(add("train", "train per the protocol, evaluate, write reports and checkpoints"))
    _config_flags(add("eval", "re-evaluate a checkpoint on the configured test sets"), with_ckpt=True)

    p = add("score", "score one image with a checkpoint")
    _config_flags(p, with_ckpt=True)
    p.add_argument("--image", required=True, help="P5/P6 image")
    p.add_argument("--dump-maps", action="store_true", help="save per-loop and final maps as .npy")

    p = add("render", "write jet overlays for every test image")
    _config_flags(p, with_ckpt=True)
    p.add_argument("--domain", action="append", help="restrict to these domains (repeatable)")

    p = add("ablate", "loop-count ablation table")
    _config_flags(p)
    p.add_argument("--loop-values", type=_csv_ints, default=[1, 3, 5, 7], help="comma-separated L values")

    p = add("gradcheck", "finite-difference check of the training gradient")
    p.add_argument("--loop-values", type=_csv_ints, default=[1, 3])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=1e-4)
    return parser


# ----------------------------------------------------------------------------
# config resolution


def resolve_config(args, base: Config | None = None) -> Config:
    """Config file (else ``base``, else defaults), then explicit flags."""
    cfg = load_config(args.config) if args.config else (base or Config())
    kw = {}
    for dest, name in OVERRIDES.items():
        value = getattr(args, dest, None)
        if value is not None:
            kw[name] = [os.path.abspath(m) for m in value] if name == "manifests" else value
    if getattr(args, "out", None):
        kw["output_dir"] = args.out
    return cfg.with_overrides(**kw).validate()


def _ckpt_config(path) -> Config | None:
    doc = load_checkpoint(path).meta.get("config")
    return Config.from_document(doc) if doc else None


def _write_json(path: Path, doc) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


# ----------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    spec = SynthSpec(
        domains=args.domains,
        train_normals=args.train_normals,
        test_normals=args.test_normals,
        test_anoms=args.test_anoms,
        size=args.size,
        defect_contrast=args.contrast,
        defect_radius=args.radius,
        noise=args.noise,
        max_shift=args.max_shift,
        fov=args.fov,
        seed=args.seed,
    )
    manifests = synth_benchmark(spec, args.out)
    print(f"wrote {len(manifests)} domains to {args.out}: {', '.join(m.domain for m in manifests)}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    reports = harness.run_protocol(cfg, cfg.output_dir)
    for r in reports:
        print(f"[{r.doc['run']}]")
        print(r.table_text(), end="")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = resolve_config(args, _ckpt_config(args.ckpt))
    out = Path(cfg.output_dir)
    write_config(cfg, out)
    report = harness.evaluate_checkpoint(args.ckpt, cfg)
    report.write(out)
    print(report.table_text(), end="")
    return EXIT_OK


def _load_model(args, cfg: Config):
    _, state = harness.load_state(args.ckpt, cfg)
    return state.model


def cmd_score(args) -> int:
    cfg = resolve_config(args, _ckpt_config(args.ckpt))
    out = Path(cfg.output_dir)
    write_config(cfg, out)
    model = _load_model(args, cfg)
    rec = load_record(args.image, "-", "unknown", cfg.image_size, cfg.channels)
    res = anomaly_maps(model, rec.image, sigma=cfg.sigma_smooth)
    doc = {"image": os.path.abspath(args.image), "score": res.score, "scores": res.scores()}
    if args.dump_maps:
        for k, m in enumerate(res.per_loop_maps, start=1):
            np.save(out / f"{rec.sample_id}__loop{k}.npy", m)
        np.save(out / f"{rec.sample_id}__loopfinal.npy", res.final_map)
    _write_json(out / f"{rec.sample_id}.score.json", doc)
    print(json.dumps({"score": res.score}))
    return EXIT_OK


def cmd_render(args) -> int:
    cfg = resolve_config(args, _ckpt_config(args.ckpt))
    out = Path(cfg.output_dir)
    write_config(cfg, out)
    model = _load_model(args, cfg)
    spec = cfg.render_spec()
    manifests = load_manifests(cfg.manifests)
    wanted = set(args.domain or [m.domain for m in manifests])
    unknown = wanted - {m.domain for m in manifests}
    if unknown:
        raise ConfigError(f"unknown domains: {sorted(unknown)}")
    written = 0
    for m in manifests:
        if m.domain not in wanted:
            continue
        records, results = [], []
        for path, label in test_set(m):
            rec = load_record(path, m.domain, label, cfg.image_size, cfg.channels)
            records.append(rec)
            results.append(anomaly_maps(model, rec.image, sigma=cfg.sigma_smooth))
        # one normalization per dataset and map kind
        kinds = {str(k + 1): [r.per_loop_maps[k] for r in results] for k in range(model.loops)}
        kinds["final"] = [r.final_map for r in results]
        for which, maps in kinds.items():
            for rec, norm in zip(records, normalize_maps(maps, spec)):
                target = overlay_path(out, m.domain, rec.sample_id, which)
                target.parent.mkdir(parents=True, exist_ok=True)
                target.write_bytes(overlay_ppm(rec.image, norm, spec))
                written += 1
    print(f"wrote {written} overlays under {out}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = resolve_config(args)
    table = harness.loop_ablation(cfg, args.loop_values, cfg.output_dir)
    print(table.text(), end="")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    ok = True
    for L in args.loop_values:
        r = harness.grad_check(loops=L, seed=args.seed)
        passed = r.passed(args.tol)
        ok &= passed
        print(f"L={L}: max relative error {r.max_rel_error:.3e} over {r.checked} entries {'ok' if passed else 'FAIL'}")
    return EXIT_OK if ok else EXIT_CHECK_FAILED


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "score": cmd_score,
    "render": cmd_render,
    "ablate": cmd_ablate,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except KeyboardInterrupt:
        raise
    except Exception as exc:  # one line, categorised
        err = _classify(exc)
        if err.code == EXIT_INTERNAL:
            log.debug("internal error", exc_info=True)
        print(f"sirad: error[{err.category}]: {err}", file=sys.stderr)
        return err.code


if __name__ == "__main__":
    sys.exit(main())
