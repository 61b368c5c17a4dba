"""Command-line entry point: ``r2l {gen,train,eval,ablate,entropy}``.

Configuration is a YAML file with the sections ``dataset``, ``world``,
``traj``, ``arch``, ``train`` and ``eval`` (see ``DEFAULTS``). Command-line
flags override file values, which override the defaults. Every command
writes ``resolved_config.yaml`` next to its outputs.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import copy
import csv
import io
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path

import torch
import yaml

from r2l import tacma
from r2l.data import PlaceData
from r2l.infometrics import PHASES, EntropyReport, entropy_report
from r2l.net import ArchConfig, ArchMismatchError, NonFiniteLossError, load_checkpoint, save_checkpoint
from r2l.retrieval import EVAL_MODES, ProtocolError, evaluate
from r2l.worldgen import (DatasetConfig, TrajConfig, WorldConfig, build_dataset, corrupt_snow,
                          derive_seed, resolve_radar_kind)

log = logging.getLogger("r2l")

CONFIG_VERSION = 1

DEFAULTS: dict = {
    "version": CONFIG_VERSION,
    "seed": 0,
    "dataset": {"radar": "single_chip_radar", "probe_count": 64},
    "world": asdict(WorldConfig()),
    "traj": asdict(TrajConfig()),
    "arch": {k: v for k, v in asdict(ArchConfig()).items() if k != "grid"},
    "train": {
        k: (v.value if hasattr(v, "value") else v)
        for k, v in asdict(tacma.TrainConfig()).items() if k != "seed"
    },
    "eval": {"ks": [1, 5, 10, 20], "mode": "cross", "corrupt": None, "clutter": 500,
             "near_bias": 4.0, "snow_seed": 0},
}

# CSV schemas; the ``schema`` column of every emitted row carries the name/version
METRICS_SCHEMA = "r2l-metrics/1"
METRICS_COLUMNS = ("schema", "mode", "corrupt", "AR@1", "AR@5", "AR@10", "AR@20", "maxF1")
ABLATION_SCHEMA = "r2l-ablation/1"
ABLATION_COLUMNS = ("schema",) + tacma.ABLATION_COLUMNS
ENTROPY_SCHEMA = "r2l-entropy/1"
ENTROPY_COLUMNS = ("schema", "phase", "probe", "bins", "H(L)", "H(R)", "H(L|R)", "H(R|L)", "L|R>R|L")

CHECKPOINT_NAMES = {
    "radar-init": "radar-init.ckpt",
    "lidar-init": "lidar-init.ckpt",
    "radar-pre": "radar-pre.ckpt",
    "lidar-pre": "lidar-pre.ckpt",
    "radar-aligned": "radar-aligned.ckpt",
    "lidar-aligned": "lidar-aligned.ckpt",
}


class UsageError(Exception):
    """Invalid configuration or arguments (exit code 2)."""


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


def _merge(base: dict, over: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if k not in base:
            raise UsageError(f"unknown config key {path + k!r}")
        if isinstance(base[k], dict):
            if not isinstance(v, dict):
                raise UsageError(f"config key {path + k!r} must be a mapping")
            out[k] = _merge(base[k], v, f"{path}{k}.")
        else:
            out[k] = v
    return out


def load_config(path: str | None) -> dict:
    if not path:
        return copy.deepcopy(DEFAULTS)
    try:
        raw = yaml.safe_load(Path(path).read_text()) or {}
    except (OSError, yaml.YAMLError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise UsageError("config root must be a mapping")
    if raw.get("version", CONFIG_VERSION) != CONFIG_VERSION:
        raise UsageError(f"unsupported config version {raw.get('version')}")
    return _merge(DEFAULTS, raw)


def _set(cfg: dict, dotted: str, value) -> None:
    node = cfg
    *head, last = dotted.split(".")
    for k in head:
        node = node[k]
    node[last] = value


FLAG_KEYS = {
    "seed": "seed",
    "radar": "dataset.radar",
    "probe_count": "dataset.probe_count",
    "variant": None,
    "regime": "train.regime",
    "loss": "train.loss",
    "stage1_epochs": "train.stage1_epochs",
    "stage2_epochs": "train.stage2_epochs",
    "steps_per_epoch": "train.steps_per_epoch",
    "align_steps_per_epoch": "train.align_steps_per_epoch",
    "lr": "train.lr",
    "triplet_mode": "train.triplet_mode",
    "mode": "eval.mode",
    "corrupt": "eval.corrupt",
    "clutter": "eval.clutter",
    "near_bias": "eval.near_bias",
    "pool": "arch.pool",
}


def resolve(args: argparse.Namespace) -> dict:
    cfg = load_config(getattr(args, "config", None))
    for flag, key in FLAG_KEYS.items():
        value = getattr(args, flag, None)
        if key and value is not None:
            _set(cfg, key, value)
    for name in ("no_pce", "no_ld", "no_gd"):
        if getattr(args, name, False):
            cfg["arch"]["use_" + name[3:]] = False
    _validate(cfg)
    return cfg


def _validate(cfg: dict) -> None:
    try:
        cfg["dataset"]["radar"] = resolve_radar_kind(cfg["dataset"]["radar"])
        train_config(cfg)
        arch_config(cfg, (50, 225))
        dataset_config(cfg)
    except (ValueError, TypeError) as exc:
        raise UsageError(f"invalid config: {exc}") from exc
    ev = cfg["eval"]
    if ev["mode"] not in EVAL_MODES:
        raise UsageError(f"eval.mode must be one of {EVAL_MODES}")
    if ev["corrupt"] not in (None, "snow"):
        raise UsageError("eval.corrupt must be null or 'snow'")
    if int(ev["clutter"]) < 0:
        raise UsageError("eval.clutter must be >= 0")


def dataset_config(cfg: dict) -> DatasetConfig:
    world, traj = dict(cfg["world"]), dict(cfg["traj"])
    for k in ("extent", "segment_length", "circle_radius"):
        world[k] = tuple(float(v) for v in world[k])
    return DatasetConfig(radar=cfg["dataset"]["radar"], world_seed=int(cfg["seed"]), traj_seed=int(cfg["seed"]),
                         world=WorldConfig(**world), traj=TrajConfig(**traj),
                         probe_count=int(cfg["dataset"]["probe_count"]))


def train_config(cfg: dict) -> tacma.TrainConfig:
    return tacma.TrainConfig(seed=int(cfg["seed"]), **cfg["train"])


def arch_config(cfg: dict, grid: tuple[int, int]) -> ArchConfig:
    return ArchConfig(grid=tuple(grid), **cfg["arch"])


def write_resolved(cfg: dict, out_dir: Path) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "resolved_config.yaml"
    path.write_text(yaml.safe_dump(cfg, sort_keys=True))
    return path


# ---------------------------------------------------------------------------
# Output helpers
# ---------------------------------------------------------------------------


def _cell(v) -> str:
    if isinstance(v, float):
        return f"{v:.4f}"
    return "" if v is None else str(v)


def write_table(rows: list[dict], columns, csv_path: Path) -> tuple[Path, Path]:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n", extrasaction="ignore")
    w.writeheader()
    for r in rows:
        w.writerow({k: _cell(r.get(k)) for k in columns})
    csv_path.write_text(buf.getvalue())
    md_path = csv_path.with_suffix(".md")
    md_path.write_text(tacma.markdown_table(columns, [[_cell(r.get(k)) for k in columns] for r in rows]))
    return csv_path, md_path


def _data(manifest: str, cfg: dict) -> tuple[PlaceData, ArchConfig]:
    try:
        data = PlaceData.load(manifest)
    except FileNotFoundError as exc:
        raise UsageError(f"manifest not found: {manifest}") from exc
    return data, arch_config(cfg, data.spec.shape)


def _load_ckpt(ckpt_dir: Path, name: str, arch: ArchConfig):
    path = ckpt_dir / CHECKPOINT_NAMES[name]
    if not path.exists():
        raise FileNotFoundError(f"missing checkpoint {path}")
    return load_checkpoint(path, arch)


def _aligned_pair(ckpt_dir: Path, arch: ArchConfig):
    """Aligned branches, falling back to stage-1 ones for a frozen side."""
    def pick(mod):
        for name in (f"{mod}-aligned", f"{mod}-pre"):
            if (ckpt_dir / CHECKPOINT_NAMES[name]).exists():
                return _load_ckpt(ckpt_dir, name, arch)
        raise FileNotFoundError(f"no {mod} checkpoint in {ckpt_dir}")
    return pick("radar"), pick("lidar")


def snow_transform(cfg: dict):
    ev = cfg["eval"]
    if ev["corrupt"] != "snow":
        return None
    clutter, bias, seed = int(ev["clutter"]), float(ev["near_bias"]), int(ev["snow_seed"])

    def transform(cloud):
        return corrupt_snow(cloud, clutter, near_bias=bias, seed=derive_seed(seed, cloud.scan_id))
    return transform


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_gen(args, cfg) -> int:
    out = Path(args.out)
    manifest = build_dataset(dataset_config(cfg), out, threads=_threads())
    write_resolved(cfg, out)
    print(out / "manifest.json")
    log.info("%d scans written", len(manifest.scans))
    return 0


def cmd_train(args, cfg) -> int:
    data, arch = _data(args.manifest, cfg)
    out = Path(args.out)
    write_resolved(cfg, out)
    tc = train_config(cfg)
    variant = tacma.Variant(args.variant or "two_stage")
    train_log = tacma.TrainLog()
    written = []

    def save(branch, name):
        written.append(save_checkpoint(branch, out / CHECKPOINT_NAMES[name]))

    if variant == tacma.Variant.TWO_STAGE:
        radar, lidar, _ = tacma.pretrain_both(data, tc, arch, train_log)
        save(radar, "radar-pre")
        save(lidar, "lidar-pre")
        radar, lidar, _ = tacma.align(radar, lidar, data, tc, train_log)
    else:
        radar, lidar = tacma.init_branch("radar", arch, tc), tacma.init_branch("lidar", arch, tc)
        if variant == tacma.Variant.NO_PRETRAIN:
            radar, lidar, _ = tacma.align(radar, lidar, data, tc, train_log, cold_start=True)
        else:
            radar, lidar, _ = tacma.joint_optimize(radar, lidar, data, tc, train_log)
    if variant != tacma.Variant.TWO_STAGE or tc.regime != tacma.Regime.FROZEN_R:
        save(radar, "radar-aligned")
    if variant != tacma.Variant.TWO_STAGE or tc.regime != tacma.Regime.FROZEN_L:
        save(lidar, "lidar-aligned")
    (out / "train_log.csv").write_text(train_log.to_csv())
    for p in written:
        print(p)
    return 0


def cmd_eval(args, cfg) -> int:
    data, arch = _data(args.manifest, cfg)
    ckpt = Path(args.checkpoints)
    if args.stage == "pre":
        radar, lidar = _load_ckpt(ckpt, "radar-pre", arch), _load_ckpt(ckpt, "lidar-pre", arch)
    else:
        radar, lidar = _aligned_pair(ckpt, arch)
    ev = cfg["eval"]
    report = evaluate(radar, lidar, data, tuple(ev["ks"]), mode=ev["mode"], query_transform=snow_transform(cfg))
    row = {"schema": METRICS_SCHEMA, "mode": ev["mode"], "corrupt": ev["corrupt"] or "none", **report.row()}
    out = Path(args.out or ckpt)
    write_resolved(cfg, out)
    name = f"metrics_{ev['mode']}" + ("_snow" if ev["corrupt"] else "")
    csv_path, _ = write_table([row], METRICS_COLUMNS, out / f"{name}.csv")
    print(tacma.markdown_table(METRICS_COLUMNS, [[_cell(row.get(k)) for k in METRICS_COLUMNS]]), end="")
    print(csv_path)
    return 0


def cmd_ablate(args, cfg) -> int:
    data, arch = _data(args.manifest, cfg)
    out = Path(args.out)
    write_resolved(cfg, out)
    tc = train_config(cfg)
    grid = tacma.FULL_GRID if not args.cells else [tuple(c.split("/")) for c in args.cells]
    variants = () if args.no_variants else tuple(tacma.Variant)
    rows: list[dict] = []
    csv_path = out / "ablation.csv"

    def on_row(row):
        rows.append({"schema": ABLATION_SCHEMA, **row})
        write_table(rows, ABLATION_COLUMNS, csv_path)

    try:
        tacma.run_ablation(grid, data, tc, arch, variants, tuple(cfg["eval"]["ks"]), on_row=on_row)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    print(csv_path)
    failed = [r for r in rows if r.get("status") != "ok"]
    for r in failed:
        print(f"cell {r['variant']}/{r['regime']}/{r['loss']} {r['status']}", file=sys.stderr)
    return 1 if failed else 0


def reversal_annotation(reports: dict[str, EntropyReport]) -> str | None:
    """Checks whether H(L|R) > H(R|L) at init flips after pre-training."""
    if "init" not in reports or "post-pretrain" not in reports:
        return None
    init, pre = reports["init"], reports["post-pretrain"]
    ok = init.H_L_given_R > init.H_R_given_L and pre.H_L_given_R < pre.H_R_given_L
    return "reversal: " + ("pass" if ok else "fail")


def cmd_entropy(args, cfg) -> int:
    data, arch = _data(args.manifest, cfg)
    ckpt = Path(args.checkpoints) if args.checkpoints else None
    tc = train_config(cfg)
    rows = data.probe if len(data.probe) else data.train[:64]
    reports: dict[str, EntropyReport] = {}
    for phase in args.phases:
        if phase == "init":
            radar, lidar = tacma.init_branch("radar", arch, tc), tacma.init_branch("lidar", arch, tc)
        elif ckpt is None:
            raise UsageError(f"phase {phase} needs --checkpoints")
        elif phase == "post-pretrain":
            radar, lidar = _load_ckpt(ckpt, "radar-pre", arch), _load_ckpt(ckpt, "lidar-pre", arch)
        else:
            radar, lidar = _aligned_pair(ckpt, arch)
        r_cells = data.cells["radar"][rows]
        if args.identical:
            radar, r_cells = lidar, data.cells["lidar"][rows]
        reports[phase] = entropy_report(radar, lidar, r_cells, data.cells["lidar"][rows], phase,
                                        probe="probe" if len(data.probe) else "train[:64]")
    out_rows = []
    for phase, rep in reports.items():
        out_rows.append({"schema": ENTROPY_SCHEMA, "phase": phase, "probe": rep.probe, "bins": rep.bins,
                         "H(L)": rep.H_L, "H(R)": rep.H_R, "H(L|R)": rep.H_L_given_R, "H(R|L)": rep.H_R_given_L,
                         "L|R>R|L": rep.H_L_given_R > rep.H_R_given_L})
    out = Path(args.out or ckpt or ".")
    write_resolved(cfg, out)
    csv_path, _ = write_table(out_rows, ENTROPY_COLUMNS, out / "entropy.csv")
    print(tacma.markdown_table(ENTROPY_COLUMNS, [[_cell(r.get(k)) for k in ENTROPY_COLUMNS] for r in out_rows]), end="")
    note = reversal_annotation(reports)
    if note:
        print(note)
        (out / "entropy_annotation.txt").write_text(note + "\n")
    print(csv_path)
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def _threads() -> int | None:
    raw = os.environ.get("RLPR_THREADS")
    if not raw:
        return None
    try:
        n = int(raw)
    except ValueError as exc:
        raise UsageError(f"RLPR_THREADS must be an integer, got {raw!r}") from exc
    if n < 1:
        raise UsageError("RLPR_THREADS must be >= 1")
    return n


def _radar_choice(value: str) -> str:
    try:
        return resolve_radar_kind(value)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="r2l", description="Radar-to-LiDAR place recognition lab.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, manifest=True):
        sp.add_argument("--config", help="YAML config file")
        sp.add_argument("--seed", type=int)
        if manifest:
            sp.add_argument("--manifest", required=True, help="dataset directory or manifest.json")

    def training(sp):
        sp.add_argument("--regime", choices=[r.value for r in tacma.Regime])
        sp.add_argument("--loss", choices=[l.value for l in tacma.LossKind])
        sp.add_argument("--stage1-epochs", dest="stage1_epochs", type=int)
        sp.add_argument("--stage2-epochs", dest="stage2_epochs", type=int)
        sp.add_argument("--steps-per-epoch", dest="steps_per_epoch", type=int)
        sp.add_argument("--align-steps-per-epoch", dest="align_steps_per_epoch", type=int)
        sp.add_argument("--lr", type=float)
        sp.add_argument("--triplet-mode", dest="triplet_mode", choices=["hardest", "literal"])
        sp.add_argument("--pool", choices=["cap", "cmp"])
        sp.add_argument("--no-pce", dest="no_pce", action="store_true")
        sp.add_argument("--no-ld", dest="no_ld", action="store_true")
        sp.add_argument("--no-gd", dest="no_gd", action="store_true")

    g = sub.add_parser("gen", help="generate a synthetic dataset")
    common(g, manifest=False)
    g.add_argument("--radar", type=_radar_choice)
    g.add_argument("--probe-count", dest="probe_count", type=int)
    g.add_argument("--out", required=True)

    t = sub.add_parser("train", help="train one variant")
    common(t)
    training(t)
    t.add_argument("--variant", choices=[v.value for v in tacma.Variant])
    t.add_argument("--out", required=True)

    e = sub.add_parser("eval", help="evaluate checkpoints")
    common(e)
    e.add_argument("--pool", choices=["cap", "cmp"])
    e.add_argument("--no-pce", dest="no_pce", action="store_true")
    e.add_argument("--no-ld", dest="no_ld", action="store_true")
    e.add_argument("--no-gd", dest="no_gd", action="store_true")
    e.add_argument("--checkpoints", required=True, help="directory written by `train`")
    e.add_argument("--stage", choices=["pre", "aligned"], default="aligned")
    e.add_argument("--mode", choices=EVAL_MODES)
    e.add_argument("--corrupt", choices=["snow"])
    e.add_argument("--clutter", type=int)
    e.add_argument("--near-bias", dest="near_bias", type=float)
    e.add_argument("--out")

    a = sub.add_parser("ablate", help="regime x loss grid plus variant comparison")
    common(a)
    training(a)
    a.add_argument("--cells", nargs="*", help="subset of cells as regime/loss")
    a.add_argument("--no-variants", dest="no_variants", action="store_true")
    a.add_argument("--out", required=True)

    n = sub.add_parser("entropy", help="entropy trajectory on the probe set")
    common(n)
    n.add_argument("--checkpoints")
    n.add_argument("--phases", nargs="+", choices=list(PHASES), default=list(PHASES))
    n.add_argument("--identical", action="store_true", help="sanity check: LiDAR branch on both sides")
    n.add_argument("--out")
    return p


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate, "entropy": cmd_entropy}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        threads = _threads()
        if threads:
            torch.set_num_threads(threads)
        cfg = resolve(args)
        return COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        print(f"r2l: error: {exc}", file=sys.stderr)
        return 2
    except (ArchMismatchError, ProtocolError, NonFiniteLossError, FileNotFoundError, OSError, ValueError) as exc:
        print(f"r2l: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
