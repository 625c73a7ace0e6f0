"""Command-line entry point: ``evtlab <subcommand> [flags]``.

Configuration is resolved in layers: built-in defaults, then a previous run's
``run_manifest.json`` (``--manifest``), then an INI file (``--config``), then
flags. Every run directory receives one ``run_manifest.json`` recording the
resolved configuration, so ``--manifest`` with a fresh ``--out`` repeats a run.
"""
from __future__ import annotations

import argparse
import dataclasses
import functools
import hashlib
import json
import os
import sys
import time
import traceback
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

from . import __version__
from . import datagen as dg
from . import evalkit as ek
from . import policy as pl
from . import selftest as st
from .config import ConfigError, dump_ini, parse_list, read_ini
from .tracksim import EmbodimentConfig, Scenario

OUT_ROOT_ENV = "EVTLAB_OUT_ROOT"
MANIFEST_NAME = "run_manifest.json"

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_CHECKPOINT = 4
EXIT_DATASET = 5
EXIT_DIVERGED = 6
EXIT_SELFTEST = 7
EXIT_OUTPUT = 8

EXIT_CODES = f"""exit codes:
  {EXIT_OK}  success
  {EXIT_INTERNAL}  unexpected internal error
  {EXIT_USAGE}  bad arguments (unknown flag, missing required input)
  {EXIT_CONFIG}  unreadable or invalid configuration
  {EXIT_CHECKPOINT}  incompatible or corrupt checkpoint
  {EXIT_DATASET}  unreadable dataset or dataset checksum mismatch
  {EXIT_DIVERGED}  training produced a non-finite value
  {EXIT_SELFTEST}  selftest reported a failure
  {EXIT_OUTPUT}  output directory not writable

environment:
  {OUT_ROOT_ENV}  root for run directories when --out is omitted (default ./runs)"""


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


# ------------------------------------------------------------------ configuration

_MODEL_KEYS = [f.name for f in dataclasses.fields(pl.ModelConfig)
               if f.name not in ("mask_h", "mask_w", "no_context", "no_lstm")]


def default_config() -> dict[str, dict]:
    """Every tunable with its default, grouped by section."""
    emb = dataclasses.asdict(EmbodimentConfig(mask_w=32, mask_h=32))
    model = dataclasses.asdict(pl.ModelConfig())
    return {
        "embodiment": emb,
        "scenario": dataclasses.asdict(Scenario()),
        "data": {"heights": dg.TRAIN_HEIGHTS, "v_max": dg.TRAIN_VMAX, "episodes_per_cell": 12,
                 "noise": 0.2, "target_speeds": (0.5, 1.0), "seed": 0},
        "model": {k: model[k] for k in _MODEL_KEYS},
        "train": dataclasses.asdict(pl.TrainConfig()),
        "eval": {"heights": ek.TEST_HEIGHTS, "speeds": ek.TEST_SPEEDS, "episodes": 10, "seed": 0},
    }


def _coerce_like(value, default, where: str):
    if isinstance(default, tuple):
        if isinstance(value, str):
            return tuple(parse_list(value))
        if isinstance(value, (list, tuple)):
            return tuple(float(v) for v in value)
    elif isinstance(default, bool):
        if isinstance(value, str):
            low = value.strip().lower()
            if low not in ("1", "0", "true", "false", "yes", "no", "on", "off"):
                raise ConfigError(f"{where}: expected a boolean, got {value!r}")
            return low in ("1", "true", "yes", "on")
        return bool(value)
    elif isinstance(default, int):
        return int(value)
    elif isinstance(default, float):
        return float(value)
    return str(value)


def merge(cfg: dict, layer: dict, source: str) -> None:
    """Overlay ``layer`` (section -> key -> value) onto ``cfg`` in place."""
    for section, values in layer.items():
        if section not in cfg:
            raise ConfigError(f"{source}: unknown section [{section}]")
        for key, value in values.items():
            if key not in cfg[section]:
                raise ConfigError(f"{source}: unknown key {key!r} in [{section}]")
            try:
                cfg[section][key] = _coerce_like(value, cfg[section][key], f"{source} [{section}] {key}")
            except ValueError as exc:
                raise ConfigError(f"{source}: bad value for [{section}] {key}: {exc}") from exc


def embodiment_base(cfg: dict) -> EmbodimentConfig:
    return _construct(EmbodimentConfig, cfg["embodiment"])


def scenario(cfg: dict) -> Scenario:
    return _construct(Scenario, cfg["scenario"])


def train_config(cfg: dict) -> pl.TrainConfig:
    return _construct(pl.TrainConfig, cfg["train"])


def model_config(cfg: dict, mask_h: int, mask_w: int) -> pl.ModelConfig:
    return _construct(pl.ModelConfig, dict(cfg["model"], mask_h=mask_h, mask_w=mask_w))


def _construct(cls, values: dict):
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {cls.__name__}: {exc}") from exc


def _jsonable(cfg: dict) -> dict:
    return {s: {k: list(v) if isinstance(v, tuple) else v for k, v in vals.items()} for s, vals in cfg.items()}


# ------------------------------------------------------------------ manifest

@dataclass
class RunManifest:
    command: list
    config: dict
    seeds: dict
    inputs: dict = field(default_factory=dict)
    dataset_sha256: Optional[str] = None
    checkpoints: dict = field(default_factory=dict)
    version: str = __version__
    duration_s: float = 0.0

    def write(self, out_dir: Path) -> Path:
        path = out_dir / MANIFEST_NAME
        path.write_text(json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True) + "\n")
        return path


def read_run_manifest(path) -> dict:
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read manifest {path}: {exc}") from exc
    if not isinstance(data, dict) or "config" not in data:
        raise ConfigError(f"{path} is not a run manifest")
    return data


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# ------------------------------------------------------------------ argument parsing

def _common(p: argparse.ArgumentParser, eval_flags: bool = False) -> None:
    p.add_argument("--config", help="INI file with per-module sections")
    p.add_argument("--manifest", help="run_manifest.json of a previous run to repeat")
    p.add_argument("--out", help=f"run directory (default ${OUT_ROOT_ENV}/<command>-<time>)")
    p.add_argument("--dump-config", action="store_true", help="print the resolved configuration and exit")
    if eval_flags:
        p.add_argument("--grid", help="INI file whose [grid] section lists heights and speeds")
        p.add_argument("--heights", help="comma-separated camera heights")
        p.add_argument("--speeds", help="comma-separated target speeds")
        p.add_argument("--episodes", type=int, help="episodes per grid cell")
        p.add_argument("--jobs", type=int, default=os.cpu_count() or 1, help="parallel rollout workers")
        p.add_argument("--traces", action="store_true", help="write per-episode JSONL traces")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="evtlab", description="Cross-embodiment active visual tracking: data, training, evaluation.",
        epilog=EXIT_CODES, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--version", action="version", version=f"evtlab {__version__}")
    parser.add_argument("--dump-config", action="store_true", help="print every default and exit")
    sub = parser.add_subparsers(dest="command", metavar="command")
    fmt = argparse.RawDescriptionHelpFormatter

    p = sub.add_parser("gen-data", help="generate an expert dataset", epilog=EXIT_CODES, formatter_class=fmt)
    _common(p)
    p.add_argument("--grid", help="INI file whose [grid] section lists heights and v_max")
    p.add_argument("--heights", help="comma-separated camera heights")
    p.add_argument("--v-max", help="comma-separated speed limits")
    p.add_argument("--episodes", type=int, help="episodes per embodiment cell")
    p.add_argument("--noise", type=float, help="exploration noise std on normalized actions")
    p.add_argument("--seed", type=int)

    p = sub.add_parser("train", help="train a policy offline", epilog=EXIT_CODES, formatter_class=fmt)
    _common(p)
    p.add_argument("--data", help="dataset file written by gen-data")
    p.add_argument("--ablate", choices=pl.ABLATIONS)
    p.add_argument("--seed", type=int)
    p.add_argument("--steps", type=int)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a grid", epilog=EXIT_CODES, formatter_class=fmt)
    _common(p, eval_flags=True)
    p.add_argument("--ckpt", help="policy checkpoint")
    p.add_argument("--seed", type=int)

    p = sub.add_parser("baseline", help="evaluate a hand-written baseline", epilog=EXIT_CODES, formatter_class=fmt)
    _common(p, eval_flags=True)
    p.add_argument("--type", choices=["pid"], default="pid")
    p.add_argument("--seed", type=int)

    p = sub.add_parser("ablate", help="train and evaluate ablation variants", epilog=EXIT_CODES,
                       formatter_class=fmt)
    _common(p, eval_flags=True)
    p.add_argument("--data", help="dataset file written by gen-data")
    p.add_argument("--all", action="store_true", help="all five variants")
    p.add_argument("--variants", help="comma-separated subset of: " + ", ".join(ek.VARIANT_ORDER))
    p.add_argument("--seed", type=int, help="training seed shared by every variant")
    p.add_argument("--eval-seed", type=int)
    p.add_argument("--steps", type=int)

    p = sub.add_parser("selftest", help="gradient checks and metric oracles", epilog=EXIT_CODES,
                       formatter_class=fmt)
    p.add_argument("--seed", type=int, default=0)
    return parser


def _grid_file(path: str) -> dict:
    sections = read_ini(path)
    if "grid" not in sections:
        raise ConfigError(f"{path}: missing [grid] section")
    return sections["grid"]


def resolve(args: argparse.Namespace) -> tuple[dict, dict]:
    """Return (config, inputs) after layering manifest, config file and flags."""
    cfg = default_config()
    inputs: dict = {}
    if getattr(args, "manifest", None):
        prior = read_run_manifest(args.manifest)
        if prior.get("command", [None])[0] != args.command:
            raise ConfigError(f"{args.manifest} records a {prior.get('command', ['?'])[0]!r} run, "
                              f"not {args.command!r}")
        merge(cfg, prior["config"], args.manifest)
        inputs.update(prior.get("inputs", {}))
        inputs["expect_dataset_sha256"] = prior.get("dataset_sha256")
    if getattr(args, "config", None):
        merge(cfg, read_ini(args.config), args.config)

    flags: dict[str, dict] = {}

    def put(section, key, value):
        if value is not None:
            flags.setdefault(section, {})[key] = value

    cmd = args.command
    if cmd == "gen-data":
        if args.grid:
            grid = _grid_file(args.grid)
            put("data", "heights", grid.get("heights"))
            put("data", "v_max", grid.get("v_max"))
        put("data", "heights", args.heights)
        put("data", "v_max", args.v_max)
        put("data", "episodes_per_cell", args.episodes)
        put("data", "noise", args.noise)
        put("data", "seed", args.seed)
    if cmd in ("eval", "baseline", "ablate"):
        if args.grid:
            grid = _grid_file(args.grid)
            put("eval", "heights", grid.get("heights"))
            put("eval", "speeds", grid.get("speeds"))
        put("eval", "heights", args.heights)
        put("eval", "speeds", args.speeds)
        put("eval", "episodes", args.episodes)
        put("eval", "seed", args.eval_seed if cmd == "ablate" else args.seed)
    if cmd in ("train", "ablate"):
        put("train", "seed", args.seed)
        put("train", "steps", args.steps)
        if args.data:
            inputs["data"] = os.path.abspath(args.data)
    if cmd == "train" and args.ablate:
        flags.setdefault("train", {}).update({a: a == args.ablate for a in pl.ABLATIONS})
    if cmd == "eval" and args.ckpt:
        inputs["ckpt"] = os.path.abspath(args.ckpt)
    if cmd == "baseline":
        inputs["type"] = args.type
    if cmd == "ablate":
        if args.all:
            inputs["variants"] = list(ek.VARIANT_ORDER)
        elif args.variants:
            names = [v.strip() for v in args.variants.split(",") if v.strip()]
            bad = [v for v in names if v not in ek.VARIANT_ORDER]
            if bad:
                raise CliError(EXIT_USAGE, f"unknown variants {bad}; choose from {list(ek.VARIANT_ORDER)}")
            inputs["variants"] = names
    merge(cfg, flags, "command line")
    return cfg, inputs


def _out_dir(args) -> Path:
    if args.out:
        out = Path(args.out)
    else:
        root = Path(os.environ.get(OUT_ROOT_ENV, "runs"))
        out = root / f"{args.command}-{time.strftime('%Y%m%d-%H%M%S')}"
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(EXIT_OUTPUT, f"cannot create output directory {out}: {exc}") from exc
    if (out / MANIFEST_NAME).exists():
        raise CliError(EXIT_OUTPUT, f"{out} already holds a run; choose a fresh --out")
    return out


# ------------------------------------------------------------------ subcommands

def _load_data(inputs: dict) -> tuple[list, str]:
    path = inputs.get("data")
    if not path:
        raise CliError(EXIT_USAGE, "--data is required")
    try:
        episodes = dg.load_dataset(path)
    except (OSError, dg.DatasetError) as exc:
        raise CliError(EXIT_DATASET, f"cannot load dataset {path}: {exc}") from exc
    sha = sha256_file(path)
    expect = inputs.get("expect_dataset_sha256")
    if expect and expect != sha:
        raise CliError(EXIT_DATASET, f"dataset {path} has sha256 {sha}, the manifest expects {expect}")
    if not episodes:
        raise CliError(EXIT_DATASET, f"dataset {path} holds no episodes")
    return episodes, sha


def _progress(row: dict) -> None:
    if row["step"] % 100 == 0:
        parts = " ".join(f"{k}={v:.4g}" for k, v in row.items() if k != "step")
        print(f"step {row['step']}: {parts}", file=sys.stderr, flush=True)


def cmd_gen_data(cfg: dict, inputs: dict, out: Path) -> dict:
    d = cfg["data"]
    base = embodiment_base(cfg)
    grid = dg.embodiment_grid(d["heights"], d["v_max"], base)
    path = out / "dataset.bin"
    man = dg.generate_dataset(grid, d["episodes_per_cell"], d["noise"], d["seed"], path,
                              scenario(cfg), d["target_speeds"])
    print(f"wrote {man.episode_count} episodes, {man.total_steps} steps, "
          f"mean reward {man.mean_reward:.4f}, {man.failures} failures -> {path}")
    return {"seeds": {"data": d["seed"]}, "dataset_sha256": sha256_file(path)}


def _train_one(cfg: dict, train_cfg: pl.TrainConfig, episodes: list, out: Path, root: Path) -> dict:
    h, w = episodes[0].masks.shape[1:]
    model = model_config(cfg, h, w)
    try:
        result = pl.train(episodes, train_cfg, model=model, out_dir=out, progress=_progress)
    except pl.TrainingDivergence as exc:
        raise CliError(EXIT_DIVERGED, str(exc)) from exc
    return {p.relative_to(root).as_posix(): sha256_file(p) for p in result.checkpoints}


def cmd_train(cfg: dict, inputs: dict, out: Path) -> dict:
    episodes, sha = _load_data(inputs)
    tcfg = train_config(cfg)
    ckpts = _train_one(cfg, tcfg, episodes, out, out)
    print(f"trained {tcfg.steps} steps ({tcfg.ablation or 'full'}) -> {out / 'final.bin'}")
    return {"seeds": {"train": tcfg.seed}, "dataset_sha256": sha, "checkpoints": ckpts}


def _evaluate(cfg: dict, factory, name: str, out: Path, args, stem: str) -> ek.GridReport:
    e = cfg["eval"]
    trace_dir = None
    if args.traces:
        trace_dir = out / "traces" / stem
        trace_dir.mkdir(parents=True, exist_ok=True)
    report = ek.run_grid(factory, e["heights"], e["speeds"], e["episodes"], e["seed"],
                         base=embodiment_base(cfg), scenario=scenario(cfg), name=name,
                         trace_dir=trace_dir, jobs=max(1, args.jobs))
    report.write(out, stem)
    return report


def _agent_factory(path: str, expect_hw: tuple[int, int]):
    try:
        lp = pl.load_policy(path)
    except pl.IncompatibleCheckpoint as exc:
        raise CliError(EXIT_CHECKPOINT, str(exc)) from exc
    if (lp.model.mask_h, lp.model.mask_w) != expect_hw:
        raise CliError(EXIT_CHECKPOINT, f"{path} expects {lp.model.mask_h}x{lp.model.mask_w} masks, "
                                        f"the evaluation renders {expect_hw[0]}x{expect_hw[1]}")
    return functools.partial(pl.Agent.from_checkpoint, str(path))


def cmd_eval(cfg: dict, inputs: dict, out: Path, args) -> dict:
    path = inputs.get("ckpt")
    if not path:
        raise CliError(EXIT_USAGE, "--ckpt is required")
    base = embodiment_base(cfg)
    factory = _agent_factory(path, (base.mask_h, base.mask_w))
    report = _evaluate(cfg, factory, Path(path).stem, out, args, "eval")
    print(report.to_text())
    return {"seeds": {"eval": cfg["eval"]["seed"]}, "checkpoints": {str(path): sha256_file(path)}}


def cmd_baseline(cfg: dict, inputs: dict, out: Path, args) -> dict:
    report = _evaluate(cfg, ek.PIDBaseline, "pid", out, args, "baseline_pid")
    print(report.to_text())
    return {"seeds": {"eval": cfg["eval"]["seed"]}}


def cmd_ablate(cfg: dict, inputs: dict, out: Path, args) -> dict:
    variants = inputs.get("variants")
    if not variants:
        raise CliError(EXIT_USAGE, "pass --all or --variants")
    episodes, sha = _load_data(inputs)
    base_train = train_config(cfg)
    base = embodiment_base(cfg)
    reports, ckpts = {}, {}
    for name in variants:
        tcfg = base_train.with_ablation(None if name == "full" else name)
        vdir = out / name
        print(f"training variant {name}", file=sys.stderr, flush=True)
        ckpts.update(_train_one(cfg, tcfg, episodes, vdir, out))
        factory = _agent_factory(str(vdir / "final.bin"), (base.mask_h, base.mask_w))
        reports[name] = _evaluate(cfg, factory, name, out, args, name)
    table = ek.ablation_report(reports)
    (out / "ablation.txt").write_text(table + "\n")
    print(table)
    return {"seeds": {"train": base_train.seed, "eval": cfg["eval"]["seed"]}, "dataset_sha256": sha,
            "checkpoints": ckpts}


def cmd_selftest(seed: int) -> int:
    results = st.run_all(seed)
    for r in results:
        print(f"{'PASS' if r.ok else 'FAIL'}  {r.name:28s} {r.detail}")
    failed = sum(not r.ok for r in results)
    print(f"{len(results) - failed}/{len(results)} checks passed")
    return EXIT_OK if failed == 0 else EXIT_SELFTEST


# ------------------------------------------------------------------ dispatch

def dispatch(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    if args.command is None:
        if args.dump_config:
            print(dump_ini(default_config()), end="")
            return EXIT_OK
        parser.print_help()
        return EXIT_USAGE
    if args.command == "selftest":
        return cmd_selftest(args.seed)
    try:
        cfg, inputs = resolve(args)
        if args.dump_config:
            print(dump_ini(cfg), end="")
            return EXIT_OK
        if args.command in ("train", "ablate") and not inputs.get("data"):
            raise CliError(EXIT_USAGE, f"{args.command}: --data is required")
        out = _out_dir(args)
        t0 = time.perf_counter()
        handlers = {
            "gen-data": lambda: cmd_gen_data(cfg, inputs, out),
            "train": lambda: cmd_train(cfg, inputs, out),
            "eval": lambda: cmd_eval(cfg, inputs, out, args),
            "baseline": lambda: cmd_baseline(cfg, inputs, out, args),
            "ablate": lambda: cmd_ablate(cfg, inputs, out, args),
        }
        info = handlers[args.command]()
        inputs.pop("expect_dataset_sha256", None)
        RunManifest(command=argv, config=_jsonable(cfg), inputs=inputs,
                    duration_s=round(time.perf_counter() - t0, 3), **info).write(out)
        return EXIT_OK
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, exc)
    except CliError as exc:
        return _fail(exc.code, exc)
    except pl.IncompatibleCheckpoint as exc:
        return _fail(EXIT_CHECKPOINT, exc)
    except dg.DatasetError as exc:
        return _fail(EXIT_DATASET, exc)
    except Exception as exc:  # noqa: BLE001 - report, keep the documented code
        traceback.print_exc()
        return _fail(EXIT_INTERNAL, exc)


def _fail(code: int, exc: Exception) -> int:
    print(f"evtlab: error: {exc}", file=sys.stderr)
    return code


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
