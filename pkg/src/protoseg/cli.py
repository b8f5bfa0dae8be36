"""Command line entry point: ``protoseg {synth,train,eval,inspect,replay}``.

Every command that writes a directory stages its files in a sibling
temporary directory and moves them into place only on success, together
with a ``manifest.txt`` (see :class:`RunManifest`).
"""

from __future__ import annotations

import argparse
import contextlib
import dataclasses
import hashlib
import math
import os
import shlex
import shutil
import sys
import tempfile
import time
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__, netpbm, ptns
from .encoder import EncoderConfig
from .episodes import (
    DatasetError,
    DatasetSplit,
    DirectoryLayout,
    SynthConfig,
    SyntheticSource,
    export_dataset,
    ingest_directory,
)
from .evaluate import EvalSettings, evaluate, grid
from .metrics import multi_run_report
from .protocore import COSINE_RAW, SOFTMAXED
from .refine import RefineConfig
from .trainer import TrainConfig, TrainingError, load_checkpoint, save_checkpoint, train

SEED_ENV = "PROTOSEG_SEED"
MANIFEST = "manifest.txt"


class CliError(Exception):
    pass


# -- config files ---------------------------------------------------------


def _parse_bool(text: str) -> bool:
    low = text.lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_ints(text: str) -> tuple[int, ...]:
    return tuple(int(t) for t in text.split(",") if t.strip())


# key -> (parser, where it goes)
TRAIN_KEYS = {
    "optimizer": str,
    "learning_rate": float,
    "momentum": float,
    "weight_decay": float,
    "lr_decay_factor": float,
    "decay_interval": int,
    "iterations": int,
    "hflip_augment": _parse_bool,
    "flip_prob": float,
    "n_ways": int,
    "k_shots": int,
    "n_queries": int,
    "temperature": float,
    "seed": int,
    "log_every": int,
    "encoder_widths": _parse_ints,
    "encoder_strides": _parse_ints,
    "encoder_dilations": _parse_ints,
    "image_size": int,
}


def _parse_jitter(text: str) -> float | None:
    if text.lower() == "none":
        return None
    value = float(text)
    if not (value >= 0 and math.isfinite(value)):
        raise argparse.ArgumentTypeError(f"hue jitter must be a finite value >= 0 or 'none', got {text!r}")
    return value


def parse_config(text: str, schema: dict, source: str = "<config>") -> dict:
    """Flat ``key = value`` lines; ``#`` starts a comment. Unknown keys,
    duplicate keys and unparsable values are errors."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        where = f"{source}:{lineno}"
        if not sep or not key:
            raise CliError(f"{where}: expected 'key = value'")
        if key not in schema:
            raise CliError(f"{where}: unknown key {key!r}")
        if key in out:
            raise CliError(f"{where}: duplicate key {key!r}")
        try:
            out[key] = schema[key](value)
        except ValueError as exc:
            raise CliError(f"{where}: bad value for {key}: {exc}") from None
    return out


def train_config_from(values: dict) -> tuple[TrainConfig, int | None]:
    values = dict(values)
    image_size = values.pop("image_size", None)
    enc = {}
    for name in ("widths", "strides", "dilations"):
        if f"encoder_{name}" in values:
            enc[name] = values.pop(f"encoder_{name}")
    try:
        encoder = EncoderConfig(**enc) if enc else EncoderConfig()
        return TrainConfig(encoder=encoder, **values), image_size or None
    except (TypeError, ValueError) as exc:
        raise CliError(f"invalid training configuration: {exc}") from None


def env_seed(default: int) -> int:
    text = os.environ.get(SEED_ENV)
    if text is None or text == "":
        return default
    try:
        return int(text)
    except ValueError:
        raise CliError(f"{SEED_ENV} must be an integer, got {text!r}") from None


# -- run manifests --------------------------------------------------------


def hash_inputs(paths: Sequence[Path]) -> str:
    """sha256 over (relative name, size, bytes) of every file under ``paths``."""
    h = hashlib.sha256()
    for root in paths:
        root = Path(root)
        files = [root] if root.is_file() else sorted(p for p in root.rglob("*") if p.is_file())
        for f in files:
            rel = f.name if f == root else f.relative_to(root).as_posix()
            data = f.read_bytes()
            h.update(f"{rel}\0{len(data)}\0".encode())
            h.update(data)
    return h.hexdigest()


@dataclass
class RunManifest:
    subcommand: str
    argv: list[str]
    config: dict[str, str] = field(default_factory=dict)
    seeds: dict[str, int] = field(default_factory=dict)
    inputs: list[str] = field(default_factory=list)
    outputs: list[str] = field(default_factory=list)
    input_hash: str = ""
    cwd: str = field(default_factory=os.getcwd)
    version: str = __version__

    def to_text(self) -> str:
        lines = [
            f"version={self.version}",
            f"subcommand={self.subcommand}",
            f"cwd={self.cwd}",
            f"argv={shlex.join(self.argv)}",
        ]
        lines += [f"config.{k}={v}" for k, v in self.config.items()]
        lines += [f"seed.{k}={v}" for k, v in self.seeds.items()]
        lines += [f"input={p}" for p in self.inputs]
        lines += [f"output={p}" for p in self.outputs]
        lines.append(f"input_sha256={self.input_hash}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "RunManifest":
        m = cls("", [])
        for line in text.splitlines():
            key, sep, value = line.partition("=")
            if not sep:
                continue
            if key == "version":
                m.version = value
            elif key == "subcommand":
                m.subcommand = value
            elif key == "cwd":
                m.cwd = value
            elif key == "argv":
                m.argv = shlex.split(value)
            elif key.startswith("config."):
                m.config[key[7:]] = value
            elif key.startswith("seed."):
                m.seeds[key[5:]] = int(value)
            elif key == "input":
                m.inputs.append(value)
            elif key == "output":
                m.outputs.append(value)
            elif key == "input_sha256":
                m.input_hash = value
        return m


def _config_strings(obj) -> dict[str, str]:
    out = {}
    for f in fields(obj):
        v = getattr(obj, f.name)
        if dataclasses.is_dataclass(v):
            out.update({f"{f.name}.{k}": s for k, s in _config_strings(v).items()})
        elif isinstance(v, tuple):
            out[f.name] = ",".join(map(str, v))
        else:
            out[f.name] = str(v)
    return out


@contextlib.contextmanager
def staged_output(out: Path):
    """Yield a staging directory; on success its entries replace those in ``out``."""
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    stage = Path(tempfile.mkdtemp(prefix=f".{out.name}.", dir=out.parent))
    try:
        yield stage
    except BaseException:
        shutil.rmtree(stage, ignore_errors=True)
        raise
    out.mkdir(exist_ok=True)
    for entry in sorted(stage.iterdir()):
        target = out / entry.name
        if target.is_dir() and not target.is_symlink():
            shutil.rmtree(target)
        elif target.exists():
            target.unlink()
        os.replace(entry, target)
    stage.rmdir()


def _write_manifest(stage: Path, manifest: RunManifest) -> None:
    manifest.outputs = sorted(p.relative_to(stage).as_posix() for p in stage.rglob("*") if p.is_file())
    manifest.outputs.append(MANIFEST)
    (stage / MANIFEST).write_text(manifest.to_text())


# -- data -----------------------------------------------------------------


def open_dataset(data: Path, fold: int, image_size: int | None = None):
    layout = DirectoryLayout(image_size=image_size)
    source = ingest_directory(data, layout)
    if source.folds is None:
        raise CliError(f"missing fold file: expected {Path(data) / layout.fold_file}")
    folds = set(source.folds.values())
    if fold not in folds:
        raise CliError(f"fold {fold} not in fold file (folds {sorted(folds)})")
    return source


# -- subcommands ----------------------------------------------------------


def cmd_synth(args) -> int:
    config = SynthConfig(image_size=args.size, num_classes=args.classes, hue_jitter=args.hue_jitter)
    seed = env_seed(args.seed)
    source = SyntheticSource(config, per_class=args.per_class, seed=seed)
    with staged_output(args.out) as stage:
        export_dataset(source, stage)
        manifest = RunManifest("synth", args.argv, _config_strings(config), {"seed": seed})
        manifest.config["per_class"] = str(args.per_class)
        _write_manifest(stage, manifest)
    print(f"wrote {config.num_classes} classes x {args.per_class} scenes to {args.out}")
    return 0


def cmd_train(args) -> int:
    values = {}
    if args.config is not None:
        values = parse_config(Path(args.config).read_text(), TRAIN_KEYS, str(args.config))
    config, image_size = train_config_from(values)
    config = replace(config, seed=env_seed(config.seed))
    if args.iterations is not None:
        config = replace(config, iterations=args.iterations)
    source = open_dataset(args.data, args.fold, image_size)
    split = DatasetSplit(source.folds, args.fold, "train")

    params = state = None
    start = 0
    if args.resume is not None:
        params, state, start, meta = load_checkpoint(args.resume)
        if params.config != config.encoder:
            raise CliError("checkpoint encoder does not match the configured encoder")
        if state is None or state.kind != config.optimizer:
            raise CliError("checkpoint has no matching optimizer state to resume from")

    inputs = [Path(args.data)] + ([Path(args.config)] if args.config else []) + ([Path(args.resume)] if args.resume else [])
    with staged_output(args.out) as stage:
        log = open(stage / "train_log.tsv", "w")
        log.write("iteration\tloss\tlr\n")

        def progress(it, loss, lr):
            log.write(f"{it}\t{loss:.6f}\t{lr:.6g}\n")
            log.flush()
            if not args.quiet:
                print(f"iter {it:6d}  loss {loss:.4f}  lr {lr:.2g}", file=sys.stderr)

        def checkpoint(it, p, s):
            save_checkpoint(stage / f"checkpoint_{it:06d}.ptns", p, s, it, {"fold": str(args.fold)})

        t0 = time.perf_counter()
        try:
            result = train(source, split, config, progress, params, state, start, checkpoint)
        finally:
            log.close()
        save_checkpoint(stage / "checkpoint.ptns", result.params, result.state, result.iteration, {"fold": str(args.fold)})
        manifest = RunManifest("train", args.argv, _config_strings(config), {"seed": config.seed})
        manifest.config["fold"] = str(args.fold)
        manifest.config["image_size"] = str(image_size or "native")
        manifest.config["resume_from"] = str(start)
        manifest.inputs = [str(p) for p in inputs]
        manifest.input_hash = hash_inputs(inputs)
        _write_manifest(stage, manifest)
    print(f"trained {result.iteration - start} iterations in {time.perf_counter() - t0:.1f}s -> {args.out}/checkpoint.ptns")
    return 0


def _parse_grid(tokens: Sequence[str]) -> tuple[list[int], list[int]]:
    axes = {"adapt": None, "fusion": None}
    for tok in tokens:
        key, sep, vals = tok.partition("=")
        if not sep or key not in axes:
            raise CliError(f"--grid expects adapt=a,b,... fusion=f,g,..., got {tok!r}")
        try:
            axes[key] = [int(v) for v in vals.split(",") if v]
        except ValueError:
            raise CliError(f"--grid values must be integers: {tok!r}") from None
    return axes["adapt"] or [0], axes["fusion"] or [0]


def _run_rows(label: dict, runs) -> list[list]:
    rows = [[*label.values(), "run", r.run, f"{r.mean_iou:.6f}", f"{r.binary_iou:.6f}"] for r in runs]
    rep = multi_run_report([{"mean_iou": r.mean_iou, "binary_iou": r.binary_iou} for r in runs])
    rows.append([*label.values(), "mean", "", f"{rep['mean_iou'].mean:.6f}", f"{rep['binary_iou'].mean:.6f}"])
    rows.append([*label.values(), "std", "", f"{rep['mean_iou'].std:.6f}", f"{rep['binary_iou'].std:.6f}"])
    return rows


def cmd_eval(args) -> int:
    source = open_dataset(args.data, args.fold, args.image_size)
    split = DatasetSplit(source.folds, args.fold, "test")
    if args.nway > len(split.test_classes):
        raise CliError(f"--nway {args.nway} exceeds the {len(split.test_classes)} classes of fold {args.fold}")
    params, _, _, _ = load_checkpoint(args.checkpoint)
    refine = RefineConfig(
        adapt_steps=args.adapt_steps,
        adapt_learning_rate=args.adapt_lr,
        fusion_steps=args.fusion_steps,
        omega_s=args.omega_s,
        omega_q=args.omega_q,
        selection_map=args.selection_map,
    )
    settings = EvalSettings(args.nway, args.kshot, args.queries, args.episodes, args.runs, env_seed(args.seed), refine)
    if args.dump_masks and args.grid:
        raise CliError("--dump-masks cannot be combined with --grid")

    header = ["fold", "nway", "kshot", "adapt_steps", "fusion_steps", "stat", "run", "mean_iou", "binary_iou"]
    rows = []
    base = {"fold": args.fold, "nway": args.nway, "kshot": args.kshot}
    if args.grid:
        adapt_values, fusion_values = _parse_grid(args.grid)
        for cell in grid(params, source, split, settings, adapt_values, fusion_values, jobs=args.jobs):
            label = {**base, "adapt_steps": cell["adapt_steps"], "fusion_steps": cell["fusion_steps"]}
            rows += _run_rows(label, cell["runs"])
    else:
        dump = None
        with contextlib.ExitStack() as stack:
            if args.dump_masks:
                dump = stack.enter_context(staged_output(Path(args.dump_masks)))
            runs = evaluate(params, source, split, settings, jobs=args.jobs, dump_dir=dump)
            if dump is not None:
                m = RunManifest("eval", args.argv, _config_strings(settings), {"seed": settings.seed})
                m.inputs = [str(args.data), str(args.checkpoint)]
                m.input_hash = hash_inputs([Path(args.data), Path(args.checkpoint)])
                _write_manifest(dump, m)
        rows = _run_rows({**base, "adapt_steps": refine.adapt_steps, "fusion_steps": refine.fusion_steps}, runs)

    text = ",".join(header) + "\n" + "".join(",".join(map(str, r)) + "\n" for r in rows)
    sys.stdout.write(text)
    for r in rows:
        if r[5] == "mean":
            std = next(x for x in rows if x[:5] == r[:5] and x[5] == "std")
            print(
                f"fold {r[0]} {r[1]}-way {r[2]}-shot adapt={r[3]} fusion={r[4]}: "
                f"mean-IoU {float(r[7]):.4f} ± {float(std[7]):.4f}  binary-IoU {float(r[8]):.4f} ± {float(std[8]):.4f}",
                file=sys.stderr,
            )
    if args.out is not None:
        with staged_output(args.out) as stage:
            (stage / "metrics.csv").write_text(text)
            m = RunManifest("eval", args.argv, _config_strings(settings), {"seed": settings.seed})
            m.config["fold"] = str(args.fold)
            m.inputs = [str(args.data), str(args.checkpoint)]
            m.input_hash = hash_inputs([Path(args.data), Path(args.checkpoint)])
            _write_manifest(stage, m)
    return 0


LEGEND_GREYS = (0, 255, 96, 160, 48, 208, 128, 224, 72)


def cmd_inspect(args) -> int:
    if args.checkpoint is not None:
        params, state, iteration, meta = load_checkpoint(args.checkpoint)
        cfg = params.config
        print(f"checkpoint {args.checkpoint}")
        print(f"blocks {cfg.depth}")
        for i, (k, b) in enumerate(zip(params.kernels, params.biases)):
            count = k.value.size + b.value.size
            print(
                f"  block{i}: kernel {'x'.join(map(str, k.shape))} bias {b.shape[0]} "
                f"stride {cfg.strides[i]} dilation {cfg.dilations[i]} params {count}"
            )
        print(f"parameters {params.num_parameters()}")
        print(f"iteration {iteration}")
        if state is not None:
            print(f"optimizer {state.kind} step {state.step}")
        for k in sorted(meta):
            if not k.startswith("encoder."):
                print(f"meta {k}={meta[k]}")
        return 0

    dump = Path(args.episode_dump)
    index = dump / "index.tsv"
    if not index.is_file():
        raise CliError(f"not an episode dump: missing {index}")
    out = Path(args.out) if args.out else dump / "rendered"
    class_map = {}
    cm = dump / "class_map.txt"
    if cm.is_file():
        for line in cm.read_text().splitlines():
            local, glob = line.split("\t")
            class_map[int(glob)] = int(local)
    with staged_output(out) as stage:
        seen = set()
        for line in index.read_text().splitlines():
            image_name, mask_name, ids = line.split("\t")
            mask = netpbm.read(dump / mask_name)
            present = sorted(set(np.unique(mask).tolist()) - {0, 255})
            listed = [int(i) for i in ids.split(",") if i]
            status = "ok" if present == listed else f"MISMATCH index={listed}"
            print(f"{mask_name}\tclasses={','.join(map(str, present))}\t{status}")
            seen.update(present)
            netpbm.write(stage / mask_name, _render(mask, class_map))
        for extra in sorted(dump.glob("query_*_*.pgm")):
            netpbm.write(stage / extra.name, _render(netpbm.read(extra), class_map))
        lines = ["grey\tclass\tmeaning", "0\t0\tbackground", "32\t255\tignore"]
        for g in sorted(seen):
            local = class_map.get(g, g)
            lines.append(f"{LEGEND_GREYS[local % len(LEGEND_GREYS)]}\t{g}\tepisode class {local}")
        (stage / "legend.txt").write_text("\n".join(lines) + "\n")
        _write_manifest(stage, RunManifest("inspect", args.argv, inputs=[str(dump)], input_hash=hash_inputs([dump])))
    print(f"rendered masks and legend.txt -> {out}")
    return 0


def _render(mask: np.ndarray, class_map: dict[int, int]) -> np.ndarray:
    out = np.zeros_like(mask)
    out[mask == 255] = 32
    for g in set(np.unique(mask).tolist()) - {0, 255}:
        out[mask == g] = LEGEND_GREYS[class_map.get(g, g) % len(LEGEND_GREYS)]
    return out


@contextlib.contextmanager
def _working_directory(path):
    before = os.getcwd()
    os.chdir(path)
    try:
        yield
    finally:
        os.chdir(before)


def cmd_replay(args) -> int:
    manifest = RunManifest.from_text(Path(args.manifest).read_text())
    if not manifest.argv:
        raise CliError(f"{args.manifest}: no argv recorded")
    with _working_directory(manifest.cwd):
        if manifest.inputs:
            now = hash_inputs([Path(p) for p in manifest.inputs])
            if now != manifest.input_hash:
                raise CliError("inputs changed since the manifest was written (sha256 differs)")
        env_override = {SEED_ENV: str(manifest.seeds["seed"])} if "seed" in manifest.seeds else {}
        old = {k: os.environ.get(k) for k in env_override}
        os.environ.update(env_override)
        try:
            return main(manifest.argv)
        finally:
            for k, v in old.items():
                if v is None:
                    os.environ.pop(k, None)
                else:
                    os.environ[k] = v


# -- argument parsing -----------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="protoseg", description="Few-shot segmentation with prototype refinement.")
    p.add_argument("--version", action="version", version=f"protoseg {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="render a synthetic shape dataset")
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--classes", type=int, default=8)
    s.add_argument("--per-class", type=int, default=200)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument(
        "--hue-jitter",
        type=_parse_jitter,
        default=SynthConfig().hue_jitter,
        metavar="SD|none",
        help="spread of fill hue around each class's hue; 'none' draws hues independently of class",
    )
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="episodic training on three folds")
    t.add_argument("--data", type=Path, required=True)
    t.add_argument("--fold", type=int, required=True, choices=range(4), metavar="{0..3}")
    t.add_argument("--config", type=Path)
    t.add_argument("--out", type=Path, required=True)
    t.add_argument("--resume", type=Path, help="checkpoint to continue from")
    t.add_argument("--iterations", type=int, help="override the configured iteration count")
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate on the held-out fold")
    e.add_argument("--data", type=Path, required=True)
    e.add_argument("--fold", type=int, required=True, choices=range(4), metavar="{0..3}")
    e.add_argument("--checkpoint", type=Path, required=True)
    e.add_argument("--nway", type=int, default=1)
    e.add_argument("--kshot", type=int, default=1)
    e.add_argument("--queries", type=int, default=1)
    e.add_argument("--episodes", type=int, default=1000)
    e.add_argument("--runs", type=int, default=5)
    e.add_argument("--seed", type=int, default=0)
    defaults = RefineConfig()
    e.add_argument("--adapt-steps", type=int, default=defaults.adapt_steps)
    e.add_argument("--adapt-lr", type=float, default=defaults.adapt_learning_rate)
    e.add_argument("--fusion-steps", type=int, default=defaults.fusion_steps)
    e.add_argument("--omega-s", type=float, default=defaults.omega_s)
    e.add_argument("--omega-q", type=float, default=defaults.omega_q)
    e.add_argument("--selection-map", choices=(SOFTMAXED, COSINE_RAW), default=defaults.selection_map)
    e.add_argument("--image-size", type=int)
    e.add_argument("--grid", nargs="+", metavar="AXIS=V,V")
    e.add_argument("--jobs", type=int, default=1)
    e.add_argument("--dump-masks", type=Path, metavar="DIR")
    e.add_argument("--out", type=Path, help="also write metrics.csv and a manifest here")
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("inspect", help="describe a checkpoint or render an episode dump")
    src = i.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint", type=Path)
    src.add_argument("--episode-dump", type=Path)
    i.add_argument("--out", type=Path, help="where to render an episode dump")
    i.set_defaults(func=cmd_inspect)

    r = sub.add_parser("replay", help="re-run the command recorded in a manifest")
    r.add_argument("manifest", type=Path)
    r.set_defaults(func=cmd_replay)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    args.argv = argv
    try:
        return args.func(args)
    except (CliError, DatasetError, ptns.FormatError, netpbm.NetpbmError, TrainingError, ValueError, OSError) as exc:
        print(f"protoseg {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
