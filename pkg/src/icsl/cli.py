"""Command-line interface: ``icsl {synthgen,train,lodo,sweep,eval,plot}``.

Every command writes into ``--out``: a ``run_manifest.json`` (command line,
fully resolved config, package version, seed, timestamps, input fingerprint)
plus the command's own logs and reports.  Exit status is 0 on success, 2 for
configuration errors, 3 for data errors, 4 for numeric failures.
"""
from __future__ import annotations

import argparse
import dataclasses
import datetime as dt
import hashlib
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

from . import __version__
from .checkpoint import load_checkpoint, save_oracle_checkpoint
from .config import PROFILE_ENV, PROFILES, format_config, resolve_config, to_flat
from .data import SynthSpec, generate_synthetic, load_corpus, lodo_splits, save_corpus
from .errors import ConfigError, ICSLError
from .metrics import config_hash, evaluate
from .plot import plot_reports
from .trainer import SWEEP_PARAMETERS, run_lodo, run_split, run_sweep

log = logging.getLogger("icsl")

MANIFEST_NAME = "run_manifest.json"
RESOLVED_NAME = "resolved.cfg"


# --------------------------------------------------------------------------- #
# run bookkeeping

def fingerprint(root) -> str:
    """Content hash of every file under ``root`` except run bookkeeping files."""
    root = Path(root)
    h = hashlib.sha256()
    files = sorted(p for p in root.rglob("*") if p.is_file() and p.name not in (MANIFEST_NAME, RESOLVED_NAME))
    for p in files:
        h.update(p.relative_to(root).as_posix().encode() + b"\0")
        h.update(hashlib.sha256(p.read_bytes()).digest())
    return h.hexdigest()


@dataclasses.dataclass
class RunManifest:
    command: str
    argv: List[str]
    config: dict
    version: str
    seed: int
    started: str
    finished: str = ""
    data_fingerprint: str = ""
    status: str = "running"
    outputs: List[str] = dataclasses.field(default_factory=list)

    def write(self, out: Path) -> None:
        (out / MANIFEST_NAME).write_text(json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True))


def _now() -> str:
    return dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds")


def _prepare_out(out: Optional[str], force: bool) -> Path:
    if not out:
        raise ConfigError("--out is required")
    path = Path(out)
    if path.exists() and not path.is_dir():
        raise ConfigError(f"--out {path} exists and is not a directory")
    if path.exists() and any(path.iterdir()) and not force:
        raise ConfigError(f"output directory {path} is not empty; pass --force to reuse it")
    path.mkdir(parents=True, exist_ok=True)
    return path


def _config(args):
    overrides = {}
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    if args.seed is not None:
        overrides["seed"] = args.seed
    cfg = resolve_config(args.profile, args.config, overrides)
    if getattr(args, "ablate", None):
        cfg = cfg.ablate(*[c.strip() for c in args.ablate.split(",") if c.strip()])
    return cfg


def _load(args, cfg):
    if not args.data:
        raise ConfigError("--data is required")
    return load_corpus(args.data, {"image_size": cfg.image_size})


def _domain_ids(corpus, text: str) -> List[int]:
    names = {d.name: d.domain_id for d in corpus.domains}
    out = []
    for item in (t.strip() for t in text.split(",") if t.strip()):
        if item in names:
            out.append(names[item])
        elif item.isdigit() and int(item) in names.values():
            out.append(int(item))
        else:
            raise ConfigError(f"unknown domain {item!r}; domains are {sorted(names)}")
    return out


def _write_report(out: Path, stem: str, report) -> List[str]:
    (out / f"{stem}.json").write_text(report.to_json())
    (out / f"{stem}.tsv").write_text(report.table("dice") + report.table("asd"))
    return [f"{stem}.json", f"{stem}.tsv"]


# --------------------------------------------------------------------------- #
# commands

def cmd_synthgen(args, cfg, out: Path, manifest: RunManifest):
    spec = SynthSpec(n_domains=args.domains, samples_per_domain=args.samples,
                     image_size=args.size, seed=cfg.seed)
    corpus = generate_synthetic(spec)
    save_corpus(corpus, out)
    if args.oracle:
        # digests must match images as they are read back from PNG
        reloaded = load_corpus(out)
        samples = [s for d in reloaded.domains for s in d.train + d.test]
        save_oracle_checkpoint(args.oracle, samples, corpus.num_classes)
        manifest.outputs.append(str(args.oracle))
    manifest.data_fingerprint = fingerprint(out)
    manifest.outputs += [d.name for d in corpus.domains]
    print(f"wrote {len(corpus.domains)} domains x {args.samples} samples to {out}")


def cmd_train(args, cfg, out: Path, manifest: RunManifest):
    corpus = _load(args, cfg)
    manifest.data_fingerprint = fingerprint(args.data)
    splits = {s.held_out: s for s in lodo_splits(corpus)}
    key = _domain_ids(corpus, args.held_out)[0] if args.held_out else corpus.domain_ids[-1]
    result = run_split(corpus, splits[key], cfg, out)
    sub = f"split_{corpus.domain(key).name}"
    manifest.outputs += [sub]
    if result.held_in is not None:
        manifest.outputs += [f"{sub}/{n}" for n in _write_report(out / sub, "held_in", result.held_in)]
    print(result.report.table("dice"), end="")


def cmd_lodo(args, cfg, out: Path, manifest: RunManifest):
    corpus = _load(args, cfg)
    manifest.data_fingerprint = fingerprint(args.data)
    splits = _domain_ids(corpus, args.splits) if args.splits else None
    res = run_lodo(corpus, cfg, out, jobs=args.jobs, splits=splits)
    manifest.outputs += _write_report(out, "report", res.report)
    if res.report.failed:
        manifest.status = "partial"
    print(res.report.table("dice"), end="")
    print(res.report.table("asd"), end="")


def cmd_sweep(args, cfg, out: Path, manifest: RunManifest):
    corpus = _load(args, cfg)
    manifest.data_fingerprint = fingerprint(args.data)
    try:
        values = [float(v) for v in args.values.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"--values must be comma-separated numbers, got {args.values!r}") from None
    if not values:
        raise ConfigError("--values is empty")
    try:
        rows = run_sweep(corpus, cfg, args.parameter, values, out, jobs=args.jobs)
    except ValueError as exc:
        if isinstance(exc, ICSLError):
            raise
        raise ConfigError(str(exc)) from None
    report = {"kind": "sweep", "parameter": args.parameter, "config_hash": config_hash(to_flat(cfg)),
              "rows": rows}
    (out / "sweep.json").write_text(json.dumps(report, indent=2, sort_keys=True))
    cols = ["value", "dice", "asd"] + sorted(k for k in rows[0] if k.startswith("dice_"))
    lines = ["\t".join(cols)] + ["\t".join(
        "-" if r[c] is None else f"{r[c]:g}" if c == "value" else f"{r[c]:.2f}" for c in cols) for r in rows]
    (out / "sweep.tsv").write_text("\n".join(lines) + "\n")
    manifest.outputs += ["sweep.json", "sweep.tsv"]
    print("\n".join(lines))


def cmd_eval(args, cfg, out: Path, manifest: RunManifest):
    corpus = _load(args, cfg)
    manifest.data_fingerprint = fingerprint(args.data)
    model, _, ck = load_checkpoint(args.checkpoint)
    wanted = set(_domain_ids(corpus, args.domains)) if args.domains else None
    samples = []
    for d in corpus.domains:
        if wanted is not None and d.domain_id not in wanted:
            continue
        samples += {"test": d.test, "train": d.train, "all": d.train + d.test}[args.partition]
    names = {d.domain_id: d.name for d in corpus.domains}
    report = evaluate(model, samples, corpus.decomposition, names, config_hash(to_flat(cfg)))
    manifest.outputs += _write_report(out, "report", report)
    manifest.config["checkpoint"] = {"path": str(args.checkpoint), "kind": ck.get("kind")}
    print(report.table("dice"), end="")
    print(report.table("asd"), end="")


def cmd_plot(args, cfg, out: Path, manifest: RunManifest):
    written = plot_reports(args.reports, out)
    manifest.outputs += [p.name for p in written]
    for p in written:
        print(p)


COMMANDS = {"synthgen": cmd_synthgen, "train": cmd_train, "lodo": cmd_lodo,
            "sweep": cmd_sweep, "eval": cmd_eval, "plot": cmd_plot}


# --------------------------------------------------------------------------- #
# argument parsing

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    g = common.add_argument_group("global options")
    g.add_argument("--config", help="flat key = value config file")
    g.add_argument("--profile", choices=sorted(PROFILES),
                   help=f"named defaults (env {PROFILE_ENV}; default paper)")
    g.add_argument("--seed", type=int, help="overrides the config seed")
    g.add_argument("--out", help="run/output directory")
    g.add_argument("--force", action="store_true", help="allow a non-empty --out")
    g.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override (repeatable)")
    g.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="icsl", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synthgen", parents=[common], help="write a synthetic multi-domain corpus")
    p.add_argument("--domains", type=int, default=4)
    p.add_argument("--samples", type=int, default=60, help="samples per domain")
    p.add_argument("--size", type=int, default=96, help="image side in pixels")
    p.add_argument("--oracle", help="also write a ground-truth lookup checkpoint here")

    def data_cmd(name, help_):
        q = sub.add_parser(name, parents=[common], help=help_)
        q.add_argument("--data", required=True, help="corpus root directory")
        return q

    p = data_cmd("train", "train on all domains but one and evaluate on it")
    p.add_argument("--held-out", help="held-out domain (name or id; default: last)")
    p.add_argument("--ablate", help="comma list of sir,consist,adv to switch off")

    p = data_cmd("lodo", "leave-one-domain-out train/evaluate loop")
    p.add_argument("--ablate", help="comma list of sir,consist,adv to switch off")
    p.add_argument("--jobs", type=int, default=1, help="splits run in parallel processes")
    p.add_argument("--splits", help="comma list of held-out domains to run (default: all)")

    p = data_cmd("sweep", "one LODO run per hyper-parameter value")
    p.add_argument("--parameter", required=True, choices=SWEEP_PARAMETERS)
    p.add_argument("--values", required=True, help="comma-separated values")
    p.add_argument("--ablate", help="comma list of sir,consist,adv to switch off")
    p.add_argument("--jobs", type=int, default=1)

    p = data_cmd("eval", "score a checkpoint on a corpus")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--partition", choices=("test", "train", "all"), default="test")
    p.add_argument("--domains", help="comma list of domains (default: all)")

    p = sub.add_parser("plot", parents=[common], help="render report files to PNG")
    p.add_argument("reports", nargs="+", help="report.json or sweep.json files")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    manifest = out = None
    try:
        cfg = _config(args)
        out = _prepare_out(args.out, args.force)
        manifest = RunManifest(args.command, argv, to_flat(cfg), __version__, cfg.seed, _now())
        manifest.write(out)
        (out / RESOLVED_NAME).write_text(format_config(cfg))
        COMMANDS[args.command](args, cfg, out, manifest)
        if manifest.status == "running":
            manifest.status = "ok"
        return 0
    except ICSLError as exc:
        print(f"icsl {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        if manifest is not None:
            manifest.status = f"error: {type(exc).__name__}"
        return exc.exit_code
    finally:
        if manifest is not None:
            manifest.finished = _now()
            manifest.write(out)


if __name__ == "__main__":
    sys.exit(main())
