"""Two-stage training: per-modality pre-training, then cross-modal alignment.

Stage 1 trains each branch on its own modality with a lazy triplet loss and
mined hard negatives. Stage 2 aligns the branches on co-located pairs under
a freeze regime (radar frozen, LiDAR frozen, or both trainable) and one of
three losses (triplet, MSE, InfoNCE).
"""

from __future__ import annotations

import copy
import csv
import io
import logging
from dataclasses import asdict, dataclass, field, replace
from enum import Enum

import numpy as np
import torch

from r2l import objectives as obj
from r2l.data import PlaceData
from r2l.infometrics import EntropyReport, entropy_report
from r2l.net import ArchConfig, Branch, as_input, checkpoint_digest, encode, gradient, init_params
from r2l.retrieval import DEFAULT_KS, MetricsReport, evaluate
from r2l.worldgen import derive_seed

log = logging.getLogger(__name__)


class Regime(str, Enum):
    FROZEN_R = "frozen_r"
    FROZEN_L = "frozen_l"
    BOTH_TRAINABLE = "both_trainable"


class LossKind(str, Enum):
    TRIPLET = "triplet"
    MSE = "mse"
    INFONCE = "infonce"


class Variant(str, Enum):
    NO_PRETRAIN = "no_pretrain"
    JOINT_OPT = "joint_opt"
    TWO_STAGE = "two_stage"


FULL_GRID = tuple((r, l) for r in Regime for l in LossKind)


@dataclass(frozen=True)
class TrainConfig:
    stage1_epochs: int = 5
    stage2_epochs: int = 5
    steps_per_epoch: int = 50
    align_steps_per_epoch: int | None = 50
    batch_size: int = 12
    lr: float = 5e-5
    decay: float = 0.2
    margin: float = obj.MARGIN
    negatives: int = obj.NUM_NEGATIVES
    tau: float = obj.TEMPERATURE
    pool_size: int = 200
    triplet_mode: str = "hardest"
    seed: int = 0
    regime: Regime = Regime.FROZEN_R
    loss: LossKind = LossKind.INFONCE

    def __post_init__(self):
        object.__setattr__(self, "regime", Regime(self.regime))
        object.__setattr__(self, "loss", LossKind(self.loss))
        if self.align_steps_per_epoch is not None and self.align_steps_per_epoch < 1:
            raise ValueError("align_steps_per_epoch must be >= 1")
        if min(self.stage1_epochs, self.stage2_epochs, self.steps_per_epoch) < 0:
            raise ValueError("epoch and step counts must be >= 0")
        if self.batch_size < 1 or self.lr <= 0 or self.margin <= 0 or self.tau <= 0:
            raise ValueError("batch_size, lr, margin and tau must be positive")
        if not 0.0 <= self.decay < 1.0:
            raise ValueError("decay must lie in [0, 1)")

    def lr_at(self, epoch: int) -> float:
        return self.lr * (1.0 - self.decay) ** epoch


@dataclass
class TrainLog:
    rows: list[dict] = field(default_factory=list)

    def add(self, **row) -> None:
        self.rows.append(row)

    def losses(self, stage: str | None = None) -> list[float]:
        return [r["loss"] for r in self.rows if stage is None or r["stage"] == stage]

    def epoch_means(self, stage: str) -> list[float]:
        by_epoch: dict[int, list[float]] = {}
        for r in self.rows:
            if r["stage"] == stage:
                by_epoch.setdefault(r["epoch"], []).append(r["loss"])
        return [float(np.mean(v)) for _, v in sorted(by_epoch.items())]

    def to_csv(self) -> str:
        keys: list[str] = []
        for r in self.rows:
            keys += [k for k in r if k not in keys]
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=keys, lineterminator="\n")
        w.writeheader()
        w.writerows(self.rows)
        return buf.getvalue()


def _branch_seed(cfg: TrainConfig, modality: str) -> int:
    return derive_seed(cfg.seed, 1 if modality == "radar" else 2)


def init_branch(modality: str, arch: ArchConfig, cfg: TrainConfig) -> Branch:
    return init_params(_branch_seed(cfg, modality), arch, modality)


def _apply(optim: torch.optim.Optimizer, branches: list[Branch], grads: dict[str, torch.Tensor]) -> None:
    for b in branches:
        for n, p in b.named_parameters():
            p.grad = grads.get(f"{b.tag}.{n}")
    optim.step()


def _optimizer(branches: list[Branch], lr: float) -> torch.optim.Adam | None:
    params = [p for b in branches if not b.frozen for p in b.parameters()]
    return torch.optim.Adam(params, lr=lr) if params else None


def _set_lr(optim, lr: float) -> None:
    for g in optim.param_groups:
        g["lr"] = lr


class _TripletSampler:
    """Draws (query, positive, hard negatives) row triples for one modality."""

    def __init__(self, data: PlaceData, modality: str, cfg: TrainConfig, rng: np.random.Generator):
        self.rows = data.train
        self.cells = data.cells[modality][self.rows]
        self.positions = data.positions[self.rows]
        self.cfg = cfg
        self.rng = rng
        self.cache: np.ndarray | None = None

    def refresh(self, branch: Branch) -> None:
        self.cache = encode(branch, self.cells)["d_full"]

    def triple(self, q: int) -> np.ndarray:
        pos = obj.sample_positive(q, self.positions, self.rng)
        negs = obj.mine_hard_negatives(q, self.cache, self.positions, self.cfg.negatives,
                                       self.cfg.pool_size, self.rng)
        return np.r_[q, pos, negs]

    def loss(self, branch: Branch, idx: np.ndarray) -> torch.Tensor:
        d = branch(as_input(self.cells[idx], _dtype(branch))).d_full
        return obj.lazy_triplet_loss(d[0], d[1], d[2:], self.cfg.margin, self.cfg.triplet_mode)


def _dtype(branch: Branch) -> torch.dtype:
    return next(branch.parameters()).dtype


def pretrain_branch(data: PlaceData, modality: str, cfg: TrainConfig, arch: ArchConfig | None = None,
                    branch: Branch | None = None, train_log: TrainLog | None = None) -> tuple[Branch, TrainLog]:
    """Intra-modal place-recognition training of one branch."""
    if branch is None:
        branch = init_branch(modality, arch or ArchConfig.for_grid(*data.spec.shape), cfg)
    train_log = train_log if train_log is not None else TrainLog()
    if cfg.stage1_epochs == 0:
        return branch, train_log
    branch.frozen = False
    rng = np.random.default_rng(derive_seed(cfg.seed, 10, 1 if modality == "radar" else 2))
    sampler = _TripletSampler(data, modality, cfg, rng)
    optim = _optimizer([branch], cfg.lr)
    n = len(sampler.rows)
    for epoch in range(cfg.stage1_epochs):
        lr = cfg.lr_at(epoch)
        _set_lr(optim, lr)
        sampler.refresh(branch)
        queries = rng.permutation(n)[: cfg.steps_per_epoch] if cfg.steps_per_epoch <= n else rng.integers(0, n, cfg.steps_per_epoch)
        for step, q in enumerate(queries):
            idx = sampler.triple(int(q))
            loss, grads = gradient(lambda: sampler.loss(branch, idx), branch)
            _apply(optim, [branch], grads)
            train_log.add(stage=f"pretrain-{modality}", epoch=epoch, step=step, lr=lr, loss=float(loss))
        log.info("pretrain %s epoch %d mean loss %.4f", modality, epoch,
                 np.mean(train_log.losses(f"pretrain-{modality}")[-len(queries):]))
    return branch, train_log


def _freeze(regime: Regime, radar: Branch, lidar: Branch) -> None:
    radar.frozen = regime == Regime.FROZEN_R
    lidar.frozen = regime == Regime.FROZEN_L


def _alignment_loss(kind: LossKind, regime: Regime, dr, dl, cfg: TrainConfig) -> tuple[torch.Tensor, dict]:
    symmetric = regime == Regime.BOTH_TRAINABLE
    if kind == LossKind.INFONCE:
        l_loc, l_glob, total = obj.infonce_loss(dr.d_loc, dl.d_loc, dr.d_glob, dl.d_glob, cfg.tau, symmetric)
        return total, {"loss_loc": float(l_loc.detach()), "loss_glob": float(l_glob.detach())}
    if kind == LossKind.MSE:
        return obj.mse_loss((dr.d_loc, dl.d_loc), (dr.d_glob, dl.d_glob)), {}
    if kind == LossKind.TRIPLET:
        # in-batch cross-modal negatives; batch members are > 12 m apart by construction
        total = _inbatch_triplet(dr.d_full, dl.d_full, cfg)
        if symmetric:
            total = 0.5 * (total + _inbatch_triplet(dl.d_full, dr.d_full, cfg))
        return total, {}
    raise ValueError(f"unsupported loss {kind!r}")


def _inbatch_triplet(anchor: torch.Tensor, other: torch.Tensor, cfg: TrainConfig) -> torch.Tensor:
    N = len(anchor)
    with torch.no_grad():
        sims = anchor @ other.T
        sims.fill_diagonal_(-torch.inf)
        J = min(cfg.negatives, N - 1)
        neg_idx = torch.topk(sims, J, dim=1).indices
    return obj.lazy_triplet_loss(anchor, other, other[neg_idx], cfg.margin, cfg.triplet_mode)


def _one_pass(data: PlaceData, cfg: TrainConfig, rng: np.random.Generator) -> list[np.ndarray]:
    rows = data.train
    order = rng.permutation(len(rows))
    batches = obj.far_apart_batches(data.positions[rows], order, cfg.batch_size)
    return [rows[b] for b in batches if len(b) >= 2]


def _pair_batches(data: PlaceData, cfg: TrainConfig, rng: np.random.Generator) -> list[np.ndarray]:
    """One epoch of pair batches: a single pass, or ``align_steps_per_epoch``
    batches drawn from as many reshuffled passes as needed."""
    batches = _one_pass(data, cfg, rng)
    if cfg.align_steps_per_epoch is None:
        return batches
    while len(batches) < cfg.align_steps_per_epoch:
        batches += _one_pass(data, cfg, rng)
    return batches[: cfg.align_steps_per_epoch]


def _descriptors(branch: Branch, cells: np.ndarray, cached: dict | None, idx: np.ndarray):
    if cached is not None:
        return _CachedDescriptor(*(torch.from_numpy(cached[k][idx]) if k in cached else None
                                   for k in ("d_loc", "d_glob", "d_full")))
    return branch(as_input(cells[idx], _dtype(branch)))


@dataclass
class _CachedDescriptor:
    d_loc: torch.Tensor | None
    d_glob: torch.Tensor | None
    d_full: torch.Tensor


def align(radar: Branch, lidar: Branch, data: PlaceData, cfg: TrainConfig,
          train_log: TrainLog | None = None, cold_start: bool = False) -> tuple[Branch, Branch, TrainLog]:
    """Cross-modal alignment of two branches under ``cfg.regime`` and ``cfg.loss``.

    Parameters of a frozen branch are never touched, so its checkpoint stays
    byte-identical. ``cold_start`` only documents that the branches were not
    pre-trained.
    """
    regime, kind = Regime(cfg.regime), LossKind(cfg.loss)
    if (regime, kind) not in FULL_GRID:
        raise ValueError(f"unsupported regime/loss combination {regime}/{kind}")
    train_log = train_log if train_log is not None else TrainLog()
    _freeze(regime, radar, lidar)
    branches = [radar, lidar]
    optim = _optimizer(branches, cfg.lr)
    rng = np.random.default_rng(derive_seed(cfg.seed, 20))
    cache = {"radar": None, "lidar": None}
    if radar.frozen:
        cache["radar"] = encode(radar, data.cells["radar"])
    if lidar.frozen:
        cache["lidar"] = encode(lidar, data.cells["lidar"])

    for epoch in range(cfg.stage2_epochs):
        lr = cfg.lr_at(epoch)
        _set_lr(optim, lr)
        for step, idx in enumerate(_pair_batches(data, cfg, rng)):
            def loss_fn():
                dr = _descriptors(radar, data.cells["radar"], cache["radar"], idx)
                dl = _descriptors(lidar, data.cells["lidar"], cache["lidar"], idx)
                total, terms = _alignment_loss(kind, regime, dr, dl, cfg)
                loss_fn.terms = terms
                return total

            loss, grads = gradient(loss_fn, *branches)
            _apply(optim, branches, grads)
            train_log.add(stage="align", epoch=epoch, step=step, lr=lr, loss=float(loss),
                          cold_start=cold_start, **loss_fn.terms)
        log.info("align epoch %d mean loss %.4f", epoch, train_log.epoch_means("align")[-1])
    radar.frozen = lidar.frozen = False
    return radar, lidar, train_log


def _anchor(desc, detach: bool):
    if not detach:
        return desc
    return _CachedDescriptor(*(None if t is None else t.detach() for t in (desc.d_loc, desc.d_glob, desc.d_full)))


def joint_optimize(radar: Branch, lidar: Branch, data: PlaceData, cfg: TrainConfig,
                   train_log: TrainLog | None = None) -> tuple[Branch, Branch, TrainLog]:
    """Unimodal triplet losses and the alignment loss summed with equal weights.

    Runs ``stage2_epochs`` epochs of pair batches; every step adds one radar
    and one LiDAR triplet to the alignment batch. Both branches train, but
    the regime's anchor side gets no gradient from the alignment term.
    """
    train_log = train_log if train_log is not None else TrainLog()
    radar.frozen = lidar.frozen = False
    branches = [radar, lidar]
    optim = _optimizer(branches, cfg.lr)
    rng = np.random.default_rng(derive_seed(cfg.seed, 30))
    samplers = {
        "radar": _TripletSampler(data, "radar", cfg, rng),
        "lidar": _TripletSampler(data, "lidar", cfg, rng),
    }
    kind, regime = LossKind(cfg.loss), Regime(cfg.regime)
    for epoch in range(cfg.stage2_epochs):
        lr = cfg.lr_at(epoch)
        _set_lr(optim, lr)
        samplers["radar"].refresh(radar)
        samplers["lidar"].refresh(lidar)
        n = len(samplers["radar"].rows)
        for step, idx in enumerate(_pair_batches(data, cfg, rng)):
            tr = samplers["radar"].triple(int(rng.integers(n)))
            tl = samplers["lidar"].triple(int(rng.integers(n)))

            def loss_fn():
                dr = radar(as_input(data.cells["radar"][idx], _dtype(radar)))
                dl = lidar(as_input(data.cells["lidar"][idx], _dtype(lidar)))
                align_loss, _ = _alignment_loss(kind, regime, _anchor(dr, regime == Regime.FROZEN_R),
                                                _anchor(dl, regime == Regime.FROZEN_L), cfg)
                return samplers["radar"].loss(radar, tr) + samplers["lidar"].loss(lidar, tl) + align_loss

            loss, grads = gradient(loss_fn, *branches)
            _apply(optim, branches, grads)
            train_log.add(stage="joint", epoch=epoch, step=step, lr=lr, loss=float(loss))
        log.info("joint epoch %d mean loss %.4f", epoch, train_log.epoch_means("joint")[-1])
    return radar, lidar, train_log


@dataclass
class VariantResult:
    variant: Variant
    radar: Branch
    lidar: Branch
    report: MetricsReport
    log: TrainLog
    pretrained: tuple[Branch, Branch] | None = None


def pretrain_both(data: PlaceData, cfg: TrainConfig, arch: ArchConfig | None = None,
                  train_log: TrainLog | None = None) -> tuple[Branch, Branch, TrainLog]:
    arch = arch or ArchConfig.for_grid(*data.spec.shape)
    train_log = train_log if train_log is not None else TrainLog()
    radar, _ = pretrain_branch(data, "radar", cfg, arch, train_log=train_log)
    lidar, _ = pretrain_branch(data, "lidar", cfg, arch, train_log=train_log)
    return radar, lidar, train_log


def run_variant(variant: Variant | str, data: PlaceData, cfg: TrainConfig, arch: ArchConfig | None = None,
                Ks=DEFAULT_KS, pretrained: tuple[Branch, Branch] | None = None) -> VariantResult:
    """Train one pre-training variant end to end and evaluate it cross-modally.

    ``pretrained`` lets TWO_STAGE reuse existing stage-1 branches (they are
    copied, not modified).
    """
    variant = Variant(variant)
    arch = arch or ArchConfig.for_grid(*data.spec.shape)
    train_log = TrainLog()
    pre = None
    if variant == Variant.TWO_STAGE:
        if pretrained is None:
            radar, lidar, _ = pretrain_both(data, cfg, arch, train_log)
        else:
            radar, lidar = pretrained
        pre = (radar, lidar)
        radar, lidar = copy.deepcopy(radar), copy.deepcopy(lidar)
        radar, lidar, _ = align(radar, lidar, data, cfg, train_log)
    elif variant == Variant.NO_PRETRAIN:
        radar, lidar = init_branch("radar", arch, cfg), init_branch("lidar", arch, cfg)
        radar, lidar, _ = align(radar, lidar, data, cfg, train_log, cold_start=True)
    else:
        radar, lidar = init_branch("radar", arch, cfg), init_branch("lidar", arch, cfg)
        radar, lidar, _ = joint_optimize(radar, lidar, data, cfg, train_log)
    report = evaluate(radar, lidar, data, Ks)
    return VariantResult(variant, radar, lidar, report, train_log, pre)


# ---------------------------------------------------------------------------
# Ablation
# ---------------------------------------------------------------------------

ABLATION_COLUMNS = (
    "kind", "variant", "regime", "loss",
    "AR@1", "AR@5", "AR@10", "maxF1",
    "RPR@1", "LPR@1", "dRPR@1", "dLPR@1",
    "H(L)", "H(R)", "H(L|R)", "H(R|L)",
    "status",
)


@dataclass
class AblationReport:
    rows: list[dict] = field(default_factory=list)
    stage1_digests: tuple[str, str] | None = None
    cell_stage1_digests: list[tuple[str, str]] = field(default_factory=list)
    entropy: dict[str, EntropyReport] = field(default_factory=dict)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=ABLATION_COLUMNS, lineterminator="\n", extrasaction="ignore")
        w.writeheader()
        for r in self.rows:
            w.writerow({k: _fmt(r.get(k, "")) for k in ABLATION_COLUMNS})
        return buf.getvalue()

    def to_markdown(self) -> str:
        return markdown_table(ABLATION_COLUMNS, [[_fmt(r.get(k, "")) for k in ABLATION_COLUMNS] for r in self.rows])


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.4f}"
    if isinstance(v, Enum):
        return v.value
    return str(v)


def markdown_table(header, rows) -> str:
    lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    lines += ["| " + " | ".join(str(c) for c in row) + " |" for row in rows]
    return "\n".join(lines) + "\n"


def _entropy_row(rep: EntropyReport) -> dict:
    return {"H(L)": rep.H_L, "H(R)": rep.H_R, "H(L|R)": rep.H_L_given_R, "H(R|L)": rep.H_R_given_L}


def probe_entropy(radar: Branch, lidar: Branch, data: PlaceData, phase: str) -> EntropyReport:
    rows = data.probe if len(data.probe) else data.train[:64]
    return entropy_report(radar, lidar, data.cells["radar"][rows], data.cells["lidar"][rows], phase)


def run_ablation(grid, data: PlaceData, cfg: TrainConfig, arch: ArchConfig | None = None,
                 variants=(), Ks=DEFAULT_KS, on_row=None) -> AblationReport:
    """Train every (regime, loss) cell from one shared pair of stage-1 branches.

    ``variants`` optionally appends pre-training variant rows. ``on_row`` is
    called after each row (for incremental CSV output). A failing cell is
    recorded with its error in ``status`` and the remaining cells still run.
    """
    grid = [(Regime(r), LossKind(l)) for r, l in grid]
    if not grid and not variants:
        raise ValueError("empty ablation grid")
    arch = arch or ArchConfig.for_grid(*data.spec.shape)
    report = AblationReport()

    radar0, lidar0 = init_branch("radar", arch, cfg), init_branch("lidar", arch, cfg)
    report.entropy["init"] = probe_entropy(radar0, lidar0, data, "init")
    radar_pre, lidar_pre, _ = pretrain_both(data, cfg, arch)
    report.stage1_digests = (checkpoint_digest(radar_pre), checkpoint_digest(lidar_pre))
    report.entropy["post-pretrain"] = probe_entropy(radar_pre, lidar_pre, data, "post-pretrain")
    rpr_pre = evaluate(radar_pre, lidar_pre, data, Ks, mode="rpr").recall[1]
    lpr_pre = evaluate(radar_pre, lidar_pre, data, Ks, mode="lpr").recall[1]

    def emit(row):
        report.rows.append(row)
        if on_row:
            on_row(row)

    for regime, kind in grid:
        row = {"kind": "cell", "variant": Variant.TWO_STAGE.value, "regime": regime.value, "loss": kind.value}
        try:
            radar, lidar = copy.deepcopy(radar_pre), copy.deepcopy(lidar_pre)
            report.cell_stage1_digests.append((checkpoint_digest(radar), checkpoint_digest(lidar)))
            radar, lidar, _ = align(radar, lidar, data, replace(cfg, regime=regime, loss=kind))
            row.update(_metric_row(radar, lidar, data, Ks, rpr_pre, lpr_pre))
            ent = probe_entropy(radar, lidar, data, "post-align")
            report.entropy[f"post-align/{regime.value}/{kind.value}"] = ent
            row.update(_entropy_row(ent))
            row["status"] = "ok"
        except Exception as exc:  # noqa: BLE001 - recorded per cell
            log.exception("ablation cell %s/%s failed", regime.value, kind.value)
            row["status"] = f"failed: {exc}"
        emit(row)

    for variant in variants:
        variant = Variant(variant)
        row = {"kind": "variant", "variant": variant.value, "regime": cfg.regime.value, "loss": cfg.loss.value}
        try:
            res = run_variant(variant, data, cfg, arch, Ks,
                              pretrained=(radar_pre, lidar_pre) if variant == Variant.TWO_STAGE else None)
            row.update(_metric_row(res.radar, res.lidar, data, Ks, rpr_pre, lpr_pre, res.report))
            row.update(_entropy_row(probe_entropy(res.radar, res.lidar, data, "post-align")))
            row["status"] = "ok"
        except Exception as exc:  # noqa: BLE001
            log.exception("variant %s failed", variant.value)
            row["status"] = f"failed: {exc}"
        emit(row)
    return report


def _metric_row(radar, lidar, data, Ks, rpr_pre, lpr_pre, cross: MetricsReport | None = None) -> dict:
    cross = cross or evaluate(radar, lidar, data, Ks)
    rpr = evaluate(radar, lidar, data, Ks, mode="rpr").recall[1]
    lpr = evaluate(radar, lidar, data, Ks, mode="lpr").recall[1]
    row = {f"AR@{k}": cross.recall[k] for k in (1, 5, 10) if k in cross.recall}
    row.update({"maxF1": cross.max_f1, "RPR@1": rpr, "LPR@1": lpr,
                "dRPR@1": rpr - rpr_pre, "dLPR@1": lpr - lpr_pre})
    return row
