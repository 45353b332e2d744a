"""UNet assemblies: physics-informed backbone, projection head, supervised baseline."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .fields import PackConfig


@dataclass(frozen=True)
class BackboneConfig:
    widths: tuple[int, ...] = (16, 32, 64, 128, 256)
    max_groups: int = 8
    lambda_b: float = PackConfig.lambda_b
    lambda_c: float = PackConfig.lambda_c
    out_scale: float = 1.0  # degC per unit of raw network output
    t0: float = PackConfig.t0
    dtype: str = "float32"

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if len(self.widths) != 5:
            raise ValueError("backbone needs exactly 5 encoder widths")
        _check_widths(self.widths, self.max_groups)

    @classmethod
    def from_pack(cls, pack: PackConfig, **kw) -> "BackboneConfig":
        return cls(lambda_b=pack.lambda_b, lambda_c=pack.lambda_c, t0=pack.t0, **kw)


@dataclass(frozen=True)
class HeadConfig:
    widths: tuple[int, ...] = (8, 16, 32, 64)
    max_groups: int = 8
    out_scale: float = 1.0
    t0: float = PackConfig.t0
    use_conductivity: bool = False
    lambda_b: float = PackConfig.lambda_b
    lambda_c: float = PackConfig.lambda_c
    dtype: str = "float32"

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if len(self.widths) != 4:
            raise ValueError("projection head needs exactly 4 level widths")
        _check_widths(self.widths, self.max_groups)

    @classmethod
    def from_pack(cls, pack: PackConfig, **kw) -> "HeadConfig":
        return cls(lambda_b=pack.lambda_b, lambda_c=pack.lambda_c, t0=pack.t0, **kw)


def _check_widths(widths, max_groups):
    for w in widths:
        if w <= 0 or w % groups_for(w, max_groups):
            raise ValueError(f"width {w} is not a positive multiple of its group count")


def groups_for(channels: int, max_groups: int = 8) -> int:
    return min(max_groups, channels)


@dataclass(eq=False)
class ModelParams:
    """Named parameters of one network plus the config/seed that produced them."""

    kind: str
    config: BackboneConfig | HeadConfig
    seed: int
    params: dict[str, Parameter] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name].tensor

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def count(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.tensor.grad = None

    def digest(self) -> str:
        h = hashlib.sha256()
        for name, p in self.params.items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()

    def state(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for k, p in self.params.items():
            p.tensor.data = np.array(state[k], dtype=p.data.dtype)

    def save(self, path) -> None:
        """Write ``path`` (PTMW) and a ``path.json`` sidecar with kind/config/seed."""
        path = Path(path)
        ad.write_ptmw({k: p.data for k, p in self.params.items()}, path)
        meta = {"kind": self.kind, "seed": self.seed, "config": asdict(self.config)}
        Path(str(path) + ".json").write_text(json.dumps(meta, indent=1) + "\n")


BUILDERS = {}


def load_model(path) -> ModelParams:
    path = Path(path)
    meta = json.loads(Path(str(path) + ".json").read_text())
    kind = meta["kind"]
    cfg_cls = HeadConfig if kind == "head" else BackboneConfig
    cfg = cfg_cls(**meta["config"])
    model = BUILDERS[kind](cfg, meta["seed"])
    arrays = ad.read_ptmw(path)
    if set(arrays) != set(model.params):
        raise ad.ParameterFormatError(f"{path}: parameter names do not match a {kind} network")
    for name, p in model.params.items():
        if arrays[name].shape != p.data.shape:
            raise ad.ParameterFormatError(f"{path}: shape mismatch for {name}")
    model.load_state(arrays)
    return model


class _Init:
    def __init__(self, seed: int, dtype: str):
        self.rng = np.random.default_rng(seed)
        self.dtype = np.dtype(dtype)
        self.params: dict[str, Parameter] = {}

    def _add(self, name, arr):
        self.params[name] = Parameter(name, Tensor(arr.astype(self.dtype)))

    def conv(self, name, cin, cout, k, zero=False):
        # He-uniform; zero-initialised output layers give identity-at-init
        if zero:
            w = np.zeros((cout, cin, k, k))
        else:
            bound = np.sqrt(6.0 / (cin * k * k))
            w = self.rng.uniform(-bound, bound, size=(cout, cin, k, k))
        self._add(f"{name}.weight", w)
        self._add(f"{name}.bias", np.zeros(cout))

    def norm(self, name, c):
        self._add(f"{name}.scale", np.ones(c))
        self._add(f"{name}.shift", np.zeros(c))


def build_backbone(config: BackboneConfig | None = None, seed: int = 0,
                   kind: str = "backbone") -> ModelParams:
    """Five-level UNet: encoder blocks of (conv3x3-GN-GELU)x2 + avgpool, mirrored decoder."""
    cfg = config or BackboneConfig()
    init = _Init(seed, cfg.dtype)
    cin = 1
    for lvl, c in enumerate(cfg.widths, 1):
        init.conv(f"enc{lvl}.conv1", cin, c, 3)
        init.norm(f"enc{lvl}.norm1", c)
        init.conv(f"enc{lvl}.conv2", c, c, 3)
        init.norm(f"enc{lvl}.norm2", c)
        cin = c
    below = cfg.widths[-1]
    for lvl in range(len(cfg.widths), 0, -1):
        c = cfg.widths[lvl - 1]
        init.conv(f"dec{lvl}.conv1", below + c, c, 3)
        init.norm(f"dec{lvl}.norm1", c)
        init.conv(f"dec{lvl}.conv2", c, c, 3)
        init.norm(f"dec{lvl}.norm2", c)
        below = c
    init.conv("out", cfg.widths[0], 1, 1, zero=True)
    return ModelParams(kind, cfg, seed, init.params)


def build_supervised_baseline(config: BackboneConfig | None = None, seed: int = 1) -> ModelParams:
    return build_backbone(config, seed, kind="supervised")


def build_head(config: HeadConfig | None = None, seed: int = 0) -> ModelParams:
    """Four-level UNet with one conv3x3-GN-ReLU block per level."""
    cfg = config or HeadConfig()
    init = _Init(seed, cfg.dtype)
    cin = 2 if cfg.use_conductivity else 1
    for lvl, c in enumerate(cfg.widths, 1):
        init.conv(f"enc{lvl}.conv", cin, c, 3)
        init.norm(f"enc{lvl}.norm", c)
        cin = c
    below = cfg.widths[-1]
    for lvl in range(len(cfg.widths) - 1, 0, -1):
        c = cfg.widths[lvl - 1]
        init.conv(f"dec{lvl}.conv", below + c, c, 3)
        init.norm(f"dec{lvl}.norm", c)
        below = c
    init.conv("out", cfg.widths[0], 1, 1, zero=True)
    return ModelParams("head", cfg, seed, init.params)


BUILDERS.update(backbone=build_backbone, supervised=build_supervised_baseline, head=build_head)


def _conv_norm_act(model, x, prefix, conv, norm, act):
    c = model[f"{prefix}.{conv}.weight"].shape[0]
    x = ad.conv2d(x, model[f"{prefix}.{conv}.weight"], model[f"{prefix}.{conv}.bias"])
    x = ad.group_norm(x, groups_for(c, model.config.max_groups),
                      model[f"{prefix}.{norm}.scale"], model[f"{prefix}.{norm}.shift"])
    return act(x)


def _pad_to_multiple(x: Tensor, mult: int):
    h, w = x.shape[2:]
    ph, pw = (-h) % mult, (-w) % mult
    if ph == 0 and pw == 0:
        return x, None
    top, left = ph // 2, pw // 2
    return ad.pad_reflect(x, top, ph - top, left, pw - left), (top, left, h, w)


def indicator(lam, lambda_b: float, lambda_c: float) -> np.ndarray:
    """Map conductivities onto a battery indicator in NCHW layout (battery -> 1)."""
    v = np.asarray(getattr(lam, "values", lam), dtype=np.float64)
    if v.ndim == 2:
        v = v[None, None]
    return (v - lambda_c) / (lambda_b - lambda_c)


def unet_raw(model: ModelParams, x: Tensor) -> Tensor:
    """Raw backbone-shaped UNet output (one channel, same size as ``x``)."""
    depth = len(model.config.widths)
    x, crop = _pad_to_multiple(x, 2 ** depth)
    skips = []
    for lvl in range(1, depth + 1):
        x = _conv_norm_act(model, x, f"enc{lvl}", "conv1", "norm1", ad.gelu)
        x = _conv_norm_act(model, x, f"enc{lvl}", "conv2", "norm2", ad.gelu)
        skips.append(x)
        x = ad.avg_pool2(x)
    for lvl in range(depth, 0, -1):
        x = ad.concat_channels(ad.bilinear_up2(x), skips[lvl - 1])
        x = _conv_norm_act(model, x, f"dec{lvl}", "conv1", "norm1", ad.gelu)
        x = _conv_norm_act(model, x, f"dec{lvl}", "conv2", "norm2", ad.gelu)
    x = ad.conv2d(x, model["out.weight"], model["out.bias"])
    if crop is not None:
        x = ad.crop(x, *crop)
    return x


def forward_backbone(model: ModelParams, lam) -> Tensor:
    """Temperature estimate in degC (float64, NCHW) from a conductivity map."""
    cfg = model.config
    x = Tensor(indicator(lam, cfg.lambda_b, cfg.lambda_c).astype(cfg.dtype))
    raw = ad.cast(unet_raw(model, x), np.float64)
    return ad.affine(raw, cfg.out_scale, cfg.t0)


def forward_head(model: ModelParams, t_hat, lam=None) -> Tensor:
    """Residual high-fidelity correction ``T~ = T^ + s * H((T^ - T0) / s)``."""
    cfg = model.config
    t_hat = ad.as_tensor(t_hat)
    if t_hat.data.ndim == 2:
        t_hat = Tensor(t_hat.data[None, None])
    u = (t_hat.data - cfg.t0) / cfg.out_scale
    if cfg.use_conductivity:
        if lam is None:
            raise ValueError("head configured with use_conductivity needs the conductivity map")
        u = np.concatenate([u, indicator(lam, cfg.lambda_b, cfg.lambda_c)], axis=1)
    x = Tensor(u.astype(cfg.dtype))
    depth = len(cfg.widths)
    x, crop = _pad_to_multiple(x, 2 ** (depth - 1))
    skips = []
    for lvl in range(1, depth + 1):
        x = _conv_norm_act(model, x, f"enc{lvl}", "conv", "norm", ad.relu)
        if lvl < depth:
            skips.append(x)
            x = ad.avg_pool2(x)
    for lvl in range(depth - 1, 0, -1):
        x = ad.concat_channels(ad.bilinear_up2(x), skips[lvl - 1])
        x = _conv_norm_act(model, x, f"dec{lvl}", "conv", "norm", ad.relu)
    x = ad.conv2d(x, model["out.weight"], model["out.bias"])
    if crop is not None:
        x = ad.crop(x, *crop)
    corr = ad.affine(ad.cast(x, np.float64), cfg.out_scale)
    return ad.add(t_hat, corr)
