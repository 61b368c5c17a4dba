"""Dual-stream polar-BEV encoder.

Each modality branch is the same stack with its own parameters:

    counts -> log1p + standardise -> context gate -> two ResBlocks -> feature map
    feature map -> channel pooling -> linear                     -> local descriptor
    feature map -> transformer encoder -> soft VLAD -> linear     -> global descriptor

The context gate patchifies the grid, runs a shared diagonal state-space
layer along a range-major and an azimuth-major traversal, and turns the
concatenated features into a sigmoid importance map.

Tensors are channel-first internally (``B, C, H, W``).
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Iterable

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from r2l.bev import PolarBEV

CKPT_MAGIC = b"RLPRCKPT"
CKPT_VERSION = 1


class NonFiniteLossError(FloatingPointError):
    """Raised when a loss evaluates to NaN or infinity."""


class ArchMismatchError(ValueError):
    """Checkpoint was written for a different architecture."""


@dataclass(frozen=True)
class ArchConfig:
    grid: tuple[int, int] = (50, 225)  # (h_rng, w_azi)
    patch: tuple[int, int] = (5, 5)
    embed_dim: int = 16
    backbone: tuple[int, int] = (32, 64)
    attn_dim: int = 64
    heads: int = 4
    ff_dim: int = 128
    layers: int = 1
    vlad_clusters: int = 16
    desc_dim: int = 256
    pool: str = "cap"
    use_pce: bool = True
    use_ld: bool = True
    use_gd: bool = True
    pos_enc: bool = True

    def __post_init__(self):
        object.__setattr__(self, "grid", tuple(int(v) for v in self.grid))
        object.__setattr__(self, "patch", tuple(int(v) for v in self.patch))
        object.__setattr__(self, "backbone", tuple(int(v) for v in self.backbone))
        if self.pool not in ("cap", "cmp"):
            raise ValueError(f"pool must be 'cap' or 'cmp', got {self.pool!r}")
        if not (self.use_ld or self.use_gd):
            raise ValueError("at least one descriptor head must be enabled")
        if self.attn_dim % self.heads:
            raise ValueError("attn_dim must be divisible by heads")

    @property
    def patch_grid(self) -> tuple[int, int]:
        (h, w), (pr, pa) = self.grid, self.patch
        return (-(-h // pr), -(-w // pa))

    @property
    def feature_grid(self) -> tuple[int, int]:
        h, w = self.grid
        return (-(-(-(-h // 2)) // 2), -(-(-(-w // 2)) // 2))

    @property
    def full_dim(self) -> int:
        return self.desc_dim * (int(self.use_ld) + int(self.use_gd))

    def fingerprint(self) -> bytes:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).digest()

    @classmethod
    def for_grid(cls, h_rng: int, w_azi: int, **kw) -> "ArchConfig":
        return cls(grid=(h_rng, w_azi), **kw)


@dataclass
class Descriptor:
    d_loc: torch.Tensor | None
    d_glob: torch.Tensor | None
    d_full: torch.Tensor


# ---------------------------------------------------------------------------
# Blocks
# ---------------------------------------------------------------------------


class DiagonalSSM(nn.Module):
    """Per-channel linear recurrence behind a width-3 non-causal depthwise conv.

    ``h_t = a h_{t-1} + b u_t``, ``y_t = c h_t + d u_t`` where ``u`` is the
    conv output and ``a = exp(-softplus(lam))``. The recurrence is evaluated
    as a causal convolution with its impulse response ``a^k``.
    """

    def __init__(self, channels: int):
        super().__init__()
        self.conv_w = nn.Parameter(torch.zeros(channels, 3))
        self.conv_b = nn.Parameter(torch.zeros(channels))
        self.lam = nn.Parameter(torch.zeros(channels))
        self.b = nn.Parameter(torch.zeros(channels))
        self.c = nn.Parameter(torch.zeros(channels))
        self.d = nn.Parameter(torch.zeros(channels))

    def decay(self) -> torch.Tensor:
        return torch.exp(-F.softplus(self.lam))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # x: (B, T, C)
        T = x.shape[1]
        u = F.conv1d(x.transpose(1, 2), self.conv_w.unsqueeze(1), self.conv_b,
                     padding=1, groups=x.shape[2])  # (B, C, T)
        # impulse response a^k of the recurrence, applied as a causal FFT convolution
        log_a = -F.softplus(self.lam)
        k = torch.exp(torch.arange(T, dtype=x.dtype)[None, :] * log_a[:, None])  # (C, T)
        n = 2 * T
        h = torch.fft.irfft(torch.fft.rfft(u, n=n) * torch.fft.rfft(k, n=n), n=n)[..., :T]
        y = self.c[:, None] * self.b[:, None] * h + self.d[:, None] * u
        return y.transpose(1, 2)

    def reference(self, x: torch.Tensor) -> torch.Tensor:
        """Step-by-step recurrence; slow, used to check ``forward``."""
        u = F.conv1d(x.transpose(1, 2), self.conv_w.unsqueeze(1), self.conv_b,
                     padding=1, groups=x.shape[2]).transpose(1, 2)
        a = self.decay()
        h = torch.zeros_like(u[:, 0])
        ys = []
        for t in range(u.shape[1]):
            h = a * h + self.b * u[:, t]
            ys.append(self.c * h + self.d * u[:, t])
        return torch.stack(ys, dim=1)


class PolarContextEnhancer(nn.Module):
    def __init__(self, arch: ArchConfig):
        super().__init__()
        C = arch.embed_dim
        self.patch = arch.patch
        self.embed = nn.Conv2d(1, C, kernel_size=arch.patch, stride=arch.patch)
        self.ssm = DiagonalSSM(C)
        self.mix = nn.Conv2d(2 * C, C, 3, padding=1)
        self.out = nn.Conv2d(C, 1, 3, padding=1)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        B, _, h, w = x.shape
        pr, pa = self.patch
        xp = F.pad(x, (0, (-w) % pa, 0, (-h) % pr))
        z = self.embed(xp)  # (B, C, H, W)
        _, C, H, W = z.shape
        s_rng = z.permute(0, 2, 3, 1).reshape(B, H * W, C)  # row-major
        s_azi = z.permute(0, 3, 2, 1).reshape(B, W * H, C)  # column-major
        y_rng = self.ssm(s_rng).reshape(B, H, W, C).permute(0, 3, 1, 2)
        y_azi = self.ssm(s_azi).reshape(B, W, H, C).permute(0, 3, 2, 1)
        f = torch.cat([y_rng, y_azi], dim=1)
        imp = torch.sigmoid(self.out(F.gelu(self.mix(f))))  # (B, 1, H, W)
        imp = imp.repeat_interleave(pr, dim=2).repeat_interleave(pa, dim=3)[:, :, :h, :w]
        return x * imp, imp


class ResBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, c_out, 3, stride=2, padding=1)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, stride=1, padding=1)
        self.skip = nn.Conv2d(c_in, c_out, 1, stride=2)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.gelu(self.conv2(F.gelu(self.conv1(x))) + self.skip(x))


class Backbone(nn.Module):
    def __init__(self, arch: ArchConfig):
        super().__init__()
        c1, c2 = arch.backbone
        self.block1 = ResBlock(1, c1)
        self.block2 = ResBlock(c1, c2)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.block2(self.block1(x))


def attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Scaled dot-product attention; returns (output, row-stochastic weights)."""
    scores = q @ k.transpose(-2, -1) / math.sqrt(q.shape[-1])
    weights = torch.softmax(scores, dim=-1)
    return weights @ v, weights


class EncoderLayer(nn.Module):
    """Post-norm transformer encoder layer."""

    def __init__(self, dim: int, heads: int, ff_dim: int):
        super().__init__()
        self.heads = heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.o = nn.Linear(dim, dim)
        self.norm1 = nn.LayerNorm(dim)
        self.ff1 = nn.Linear(dim, ff_dim)
        self.ff2 = nn.Linear(ff_dim, dim)
        self.norm2 = nn.LayerNorm(dim)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        B, T, D = x.shape
        return x.reshape(B, T, self.heads, D // self.heads).transpose(1, 2)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        B, T, D = x.shape
        # fused kernel; numerically the same map as attention()
        out = F.scaled_dot_product_attention(self._split(self.q(x)), self._split(self.k(x)), self._split(self.v(x)))
        x = self.norm1(x + self.o(out.transpose(1, 2).reshape(B, T, D)))
        return self.norm2(x + self.ff2(F.gelu(self.ff1(x))))


class SoftVLAD(nn.Module):
    def __init__(self, dim: int, clusters: int):
        super().__init__()
        self.assign = nn.Linear(dim, clusters)
        self.centers = nn.Parameter(torch.zeros(clusters, dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # x: (B, T, D) -> (B, K * D), each cluster block unit-norm
        a = torch.softmax(self.assign(x), dim=-1)  # (B, T, K)
        v = a.transpose(1, 2) @ x - a.sum(1).unsqueeze(-1) * self.centers  # (B, K, D)
        v = v / torch.sqrt((v * v).sum(-1, keepdim=True) + 1e-12)
        return v.flatten(1)


def sinusoidal_positions(n: int, dim: int, dtype=torch.float32) -> torch.Tensor:
    pos = torch.arange(n, dtype=torch.float64)[:, None]
    freq = torch.exp(-math.log(10000.0) * torch.arange(0, dim, 2, dtype=torch.float64) / dim)
    pe = torch.zeros(n, dim, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(pos * freq)
    pe[:, 1::2] = torch.cos(pos * freq[: dim // 2])
    return pe.to(dtype)


class LocalHead(nn.Module):
    def __init__(self, arch: ArchConfig):
        super().__init__()
        hp, wp = arch.feature_grid
        self.pool = arch.pool
        self.proj = nn.Linear(hp * wp, arch.desc_dim)

    def forward(self, fm: torch.Tensor) -> torch.Tensor:
        if self.pool == "cap":
            pooled = fm.mean(dim=1)
        else:
            pooled = fm.max(dim=1).values
        return l2_normalize(self.proj(pooled.flatten(1)))


class GlobalHead(nn.Module):
    def __init__(self, arch: ArchConfig):
        super().__init__()
        c2 = arch.backbone[1]
        self.pos_enc = arch.pos_enc
        self.inp = nn.Linear(c2, arch.attn_dim)
        self.layers = nn.ModuleList(
            EncoderLayer(arch.attn_dim, arch.heads, arch.ff_dim) for _ in range(arch.layers)
        )
        self.vlad = SoftVLAD(arch.attn_dim, arch.vlad_clusters)
        self.proj = nn.Linear(arch.vlad_clusters * arch.attn_dim, arch.desc_dim)

    def forward(self, fm: torch.Tensor) -> torch.Tensor:
        tokens = self.inp(fm.flatten(2).transpose(1, 2))  # (B, H'W', dim)
        if self.pos_enc:
            tokens = tokens + sinusoidal_positions(tokens.shape[1], tokens.shape[2], tokens.dtype)
        for layer in self.layers:
            tokens = layer(tokens)
        return l2_normalize(self.proj(self.vlad(tokens)))


def l2_normalize(x: torch.Tensor) -> torch.Tensor:
    return x / x.norm(dim=-1, keepdim=True).clamp_min(1e-12)


class Branch(nn.Module):
    """One modality's full parameter set."""

    def __init__(self, arch: ArchConfig, tag: str = "lidar", seed: int = 0):
        super().__init__()
        self.arch = arch
        self.tag = tag
        self.seed = seed
        self.pce = PolarContextEnhancer(arch) if arch.use_pce else None
        self.backbone = Backbone(arch)
        self.local_head = LocalHead(arch) if arch.use_ld else None
        self.global_head = GlobalHead(arch) if arch.use_gd else None
        self._frozen = False

    @property
    def frozen(self) -> bool:
        return self._frozen

    @frozen.setter
    def frozen(self, value: bool) -> None:
        self._frozen = bool(value)
        for p in self.parameters():
            p.requires_grad_(not self._frozen)

    def feature_map(self, x: torch.Tensor) -> torch.Tensor:
        """Normalised grids (B, 1, h, w) -> feature maps (B, C', H', W')."""
        if self.pce is not None:
            x, _ = self.pce(x)
        return self.backbone(x)

    def forward(self, x: torch.Tensor) -> Descriptor:
        fm = self.feature_map(x)
        d_loc = self.local_head(fm) if self.local_head is not None else None
        d_glob = self.global_head(fm) if self.global_head is not None else None
        if d_loc is not None and d_glob is not None:
            d_full = torch.cat([d_loc, d_glob], dim=-1) / math.sqrt(2.0)
        else:
            d_full = d_loc if d_loc is not None else d_glob
        return Descriptor(d_loc, d_glob, d_full)


BranchParams = Branch


# ---------------------------------------------------------------------------
# Initialisation
# ---------------------------------------------------------------------------


def _fan_in(name: str, p: torch.Tensor) -> int:
    if p.ndim == 1:
        return 1
    return int(np.prod(p.shape[1:]))


def init_params(seed: int, arch: ArchConfig = ArchConfig(), tag: str = "lidar",
                dtype: torch.dtype = torch.float32) -> Branch:
    """Deterministic fan-in scaled uniform weights, zero biases, unit-sphere VLAD centres."""
    branch = Branch(arch, tag, seed).to(dtype)
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for name, p in branch.named_parameters():
            leaf = name.rsplit(".", 1)[-1]
            if leaf == "bias" or leaf == "conv_b":
                p.zero_()
            elif ".norm" in name:
                p.fill_(1.0)
            elif leaf == "centers":
                c = torch.randn(p.shape, generator=gen, dtype=torch.float64)
                p.copy_(c / c.norm(dim=-1, keepdim=True))
            elif leaf == "lam":
                a = torch.linspace(0.5, 0.98, p.numel(), dtype=torch.float64)
                p.copy_(torch.log(1.0 / a - 1.0))
            elif leaf == "b":
                a = torch.linspace(0.5, 0.98, p.numel(), dtype=torch.float64)
                p.copy_(torch.sqrt(1.0 - a * a))
            elif leaf == "d":
                p.fill_(1.0)
            else:
                fan = 3 if leaf == "conv_w" else _fan_in(name, p)
                if leaf == "c":
                    fan = 3
                bound = math.sqrt(3.0 / fan)
                p.copy_((torch.rand(p.shape, generator=gen, dtype=torch.float64) * 2 - 1) * bound)
    return branch


def param_count(branch: nn.Module) -> int:
    return sum(p.numel() for p in branch.parameters())


# ---------------------------------------------------------------------------
# Functional surface
# ---------------------------------------------------------------------------


def normalize_counts(cells: torch.Tensor) -> torch.Tensor:
    """log1p then per-grid standardisation over the last two axes."""
    x = torch.log1p(cells)
    mean = x.mean(dim=(-2, -1), keepdim=True)
    std = x.std(dim=(-2, -1), keepdim=True, unbiased=False)
    return (x - mean) / (std + 1e-6)


def as_input(bevs: Iterable[PolarBEV] | PolarBEV | np.ndarray, dtype=torch.float32) -> torch.Tensor:
    """Stack count grids into a normalised (B, 1, h, w) network input."""
    if isinstance(bevs, PolarBEV):
        bevs = [bevs]
    if isinstance(bevs, np.ndarray):
        cells = bevs if bevs.ndim == 3 else bevs[None]
    else:
        cells = np.stack([b.cells for b in bevs])
    t = torch.as_tensor(cells, dtype=dtype)
    if not torch.isfinite(t).all():
        raise ValueError("non-finite BEV input")
    return normalize_counts(t).unsqueeze(1)


def pce_forward(bev: PolarBEV | torch.Tensor, params: Branch, arch: ArchConfig | None = None):
    x = bev if isinstance(bev, torch.Tensor) else as_input(bev, _dtype(params))
    if params.pce is None:
        return x, torch.ones_like(x)
    return params.pce(x)


def ssm_scan(seq: torch.Tensor, ssm: DiagonalSSM) -> torch.Tensor:
    squeeze = seq.ndim == 2
    y = ssm(seq.unsqueeze(0) if squeeze else seq)
    return y[0] if squeeze else y


def backbone_forward(gated: torch.Tensor, params: Branch, arch: ArchConfig | None = None) -> torch.Tensor:
    return params.backbone(gated)


def local_descriptor(fm: torch.Tensor, params: Branch) -> torch.Tensor:
    return params.local_head(fm)


def global_descriptor(fm: torch.Tensor, params: Branch, arch: ArchConfig | None = None) -> torch.Tensor:
    return params.global_head(fm)


def forward(bev: PolarBEV | torch.Tensor, params: Branch, arch: ArchConfig | None = None) -> Descriptor:
    x = bev if isinstance(bev, torch.Tensor) else as_input(bev, _dtype(params))
    return params(x)


def _dtype(module: nn.Module) -> torch.dtype:
    return next(module.parameters()).dtype


@torch.no_grad()
def encode(branch: Branch, cells: np.ndarray, batch: int = 64) -> dict[str, np.ndarray]:
    """Descriptors for a stack of count grids, as float32 arrays per head."""
    was_training = branch.training
    branch.eval()
    out: dict[str, list] = {"d_loc": [], "d_glob": [], "d_full": []}
    for i in range(0, len(cells), batch):
        d = branch(as_input(cells[i:i + batch], _dtype(branch)))
        for k in out:
            v = getattr(d, k)
            if v is not None:
                out[k].append(v.float().numpy())
    branch.train(was_training)
    return {k: np.concatenate(v) for k, v in out.items() if v}


@torch.no_grad()
def feature_maps(branch: Branch, cells: np.ndarray, batch: int = 64) -> np.ndarray:
    """Backbone feature maps, channel-last (B, H', W', C')."""
    maps = []
    for i in range(0, len(cells), batch):
        fm = branch.feature_map(as_input(cells[i:i + batch], _dtype(branch)))
        maps.append(fm.permute(0, 2, 3, 1).double().numpy())
    return np.concatenate(maps)


def gradient(loss_fn: Callable[[], torch.Tensor], *branches: Branch) -> tuple[torch.Tensor, dict[str, torch.Tensor]]:
    """Reverse-mode gradients of ``loss_fn()`` for every unfrozen parameter.

    Frozen branches contribute no entries. Returns ``(loss, grads)`` keyed
    ``"<tag>.<param name>"``.
    """
    named = {}
    for i, b in enumerate(branches):
        if getattr(b, "frozen", False):
            continue
        tag = getattr(b, "tag", f"m{i}")
        for n, p in b.named_parameters():
            if p.requires_grad:
                named[f"{tag}.{n}"] = p
    loss = loss_fn()
    if not torch.isfinite(loss).all():
        raise NonFiniteLossError(f"loss is not finite: {loss.item()}")
    if not named:
        return loss.detach(), {}
    grads = torch.autograd.grad(loss, list(named.values()), allow_unused=True)
    return loss.detach(), {
        n: (g if g is not None else torch.zeros_like(p)) for (n, p), g in zip(named.items(), grads)
    }


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def encode_checkpoint(branch: Branch) -> bytes:
    tag = branch.tag.encode()
    parts = [
        CKPT_MAGIC,
        struct.pack("<H", CKPT_VERSION),
        branch.arch.fingerprint(),
        struct.pack("<B", len(tag)), tag,
        struct.pack("<Q", int(branch.seed)),
    ]
    params = list(branch.named_parameters())
    parts.append(struct.pack("<I", len(params)))
    for name, p in params:
        nb = name.encode()
        arr = p.detach().cpu().numpy().astype("<f4")
        parts += [struct.pack("<H", len(nb)), nb, struct.pack("<B", arr.ndim),
                  struct.pack(f"<{arr.ndim}I", *arr.shape), arr.tobytes()]
    return b"".join(parts)


def decode_checkpoint(blob: bytes, arch: ArchConfig) -> Branch:
    view = memoryview(blob)
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(view):
            raise ValueError("truncated checkpoint")
        out = bytes(view[pos:pos + n])
        pos += n
        return out

    if take(8) != CKPT_MAGIC:
        raise ValueError("not a checkpoint file (bad magic)")
    (version,) = struct.unpack("<H", take(2))
    if version != CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    if take(32) != arch.fingerprint():
        raise ArchMismatchError("checkpoint architecture fingerprint does not match")
    (tlen,) = struct.unpack("<B", take(1))
    tag = take(tlen).decode()
    (seed,) = struct.unpack("<Q", take(8))
    (count,) = struct.unpack("<I", take(4))
    branch = Branch(arch, tag, seed)
    params = dict(branch.named_parameters())
    if count != len(params):
        raise ArchMismatchError("checkpoint tensor count does not match architecture")
    with torch.no_grad():
        for _ in range(count):
            (nlen,) = struct.unpack("<H", take(2))
            name = take(nlen).decode()
            (ndim,) = struct.unpack("<B", take(1))
            dims = struct.unpack(f"<{ndim}I", take(4 * ndim))
            data = np.frombuffer(take(4 * int(np.prod(dims, dtype=np.int64))), dtype="<f4").reshape(dims)
            if name not in params or tuple(params[name].shape) != tuple(dims):
                raise ArchMismatchError(f"unexpected tensor {name} {dims}")
            params[name].copy_(torch.from_numpy(data.copy()))
    if pos != len(view):
        raise ValueError("trailing bytes in checkpoint")
    return branch


def save_checkpoint(branch: Branch, path: str | os.PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_checkpoint(branch))
    return path


def load_checkpoint(path: str | os.PathLike, arch: ArchConfig) -> Branch:
    return decode_checkpoint(Path(path).read_bytes(), arch)


def checkpoint_digest(branch: Branch) -> str:
    return hashlib.sha256(encode_checkpoint(branch)).hexdigest()
