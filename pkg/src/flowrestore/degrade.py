"""Seeded synthetic corruptions and the category mixture used to build training pairs.

Kinds are grouped into five categories sampled with fixed weights:

========== ====== ==========================================
category   weight kinds
========== ====== ==========================================
blur       0.30   gaussian_blur, motion_blur
noise      0.25   gaussian_noise, salt_pepper
compression 0.20  block_compress
weather    0.15   haze, rain
other      0.10   compound (gaussian blur followed by noise)
========== ====== ==========================================
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import fft, ndimage

from .errors import ConfigError
from .tensor import Tensor

CATEGORIES = ("blur", "noise", "compression", "weather", "other")

CATEGORY_OF = {
    "gaussian_blur": "blur",
    "motion_blur": "blur",
    "gaussian_noise": "noise",
    "salt_pepper": "noise",
    "block_compress": "compression",
    "haze": "weather",
    "rain": "weather",
    "compound": "other",
}

# inclusive bounds accepted by apply()
PARAM_LIMITS: dict[str, dict[str, tuple[float, float]]] = {
    "gaussian_blur": {"sigma": (0.0, 8.0)},
    "motion_blur": {"length": (1.0, 31.0), "angle": (-360.0, 360.0)},
    "gaussian_noise": {"sigma": (0.0, 1.0)},
    "salt_pepper": {"p": (0.0, 1.0)},
    "block_compress": {"q": (0.0, 2.0)},
    "haze": {"t0": (0.0, 1.0), "airlight": (0.0, 1.0)},
    "rain": {"density": (0.0, 0.5), "length": (1.0, 31.0), "angle": (-90.0, 90.0), "intensity": (0.0, 1.0)},
    "compound": {"sigma": (0.0, 8.0), "noise_sigma": (0.0, 1.0)},
}

DEFAULT_RANGES: dict[str, dict[str, list[float]]] = {
    "gaussian_blur": {"sigma": [0.5, 2.5]},
    "motion_blur": {"length": [3.0, 11.0], "angle": [0.0, 180.0]},
    "gaussian_noise": {"sigma": [0.02, 0.15]},
    "salt_pepper": {"p": [0.01, 0.1]},
    "block_compress": {"q": [0.05, 0.4]},
    "haze": {"t0": [0.4, 0.8], "airlight": [0.7, 1.0]},
    "rain": {"density": [0.005, 0.03], "length": [5.0, 15.0], "angle": [-30.0, 30.0], "intensity": [0.3, 0.8]},
    "compound": {"sigma": [0.5, 1.5], "noise_sigma": [0.02, 0.1]},
}


@dataclass(frozen=True)
class DegradationSpec:
    kind: str
    params: dict
    seed: int = 0

    @property
    def category(self) -> str:
        return CATEGORY_OF[self.kind]

    def validate(self) -> None:
        if self.kind not in PARAM_LIMITS:
            raise ConfigError(f"unknown degradation kind {self.kind!r}")
        limits = PARAM_LIMITS[self.kind]
        missing = set(limits) - set(self.params)
        extra = set(self.params) - set(limits)
        if missing or extra:
            raise ConfigError(f"{self.kind}: expected params {sorted(limits)}, got {sorted(self.params)}")
        for name, (lo, hi) in limits.items():
            v = self.params[name]
            if not (lo <= v <= hi) or math.isnan(v):
                raise ConfigError(f"{self.kind}.{name}={v} outside [{lo}, {hi}]")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be a 64-bit unsigned integer")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "params": dict(self.params), "seed": int(self.seed)}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> DegradationSpec:
        unknown = set(d) - {"kind", "params", "seed"}
        if unknown:
            raise ConfigError(f"unknown spec fields {sorted(unknown)}")
        return cls(kind=d["kind"], params={k: float(v) for k, v in d["params"].items()}, seed=int(d.get("seed", 0)))


# ---------------------------------------------------------------- kernels


def gaussian_kernel1d(sigma: float) -> np.ndarray:
    radius = math.ceil(3.0 * sigma)
    if radius == 0:
        return np.ones(1)
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def line_mask(length: float, angle_deg: float) -> np.ndarray:
    """Binary rasterized segment of the given length through the kernel centre."""
    half = max(0, math.ceil((length - 1) / 2))
    size = 2 * half + 1
    mask = np.zeros((size, size))
    theta = math.radians(angle_deg)
    n = max(2, 4 * size)
    for t in np.linspace(-(length - 1) / 2, (length - 1) / 2, n):
        r = int(round(half - t * math.sin(theta)))
        c = int(round(half + t * math.cos(theta)))
        mask[r, c] = 1.0
    return mask


def _per_plane(x: np.ndarray, fn) -> np.ndarray:
    out = np.empty_like(x)
    for n in range(x.shape[0]):
        for c in range(x.shape[1]):
            out[n, c] = fn(x[n, c])
    return out


def _gaussian_blur(x: np.ndarray, sigma: float) -> np.ndarray:
    k = gaussian_kernel1d(sigma)
    if k.size == 1:
        return x.copy()
    y = ndimage.correlate1d(x, k, axis=2, mode="mirror")
    return ndimage.correlate1d(y, k, axis=3, mode="mirror")


def _block_dct(x: np.ndarray, q: float) -> np.ndarray:
    n, c, h, w = x.shape
    ph, pw = (-h) % 8, (-w) % 8
    xp = np.pad(x, ((0, 0), (0, 0), (0, ph), (0, pw)), mode="edge")
    hb, wb = xp.shape[2] // 8, xp.shape[3] // 8
    blocks = xp.reshape(n, c, hb, 8, wb, 8)
    coef = fft.dctn(blocks, axes=(3, 5), norm="ortho")
    u = np.arange(8)
    step = q * (1.0 + u[:, None] + u[None, :])
    step = step[None, None, None, :, None, :]
    coef = np.round(coef / step) * step
    rec = fft.idctn(coef, axes=(3, 5), norm="ortho").reshape(xp.shape)
    return rec[:, :, :h, :w]


def apply(spec: DegradationSpec, clean: Tensor | np.ndarray) -> Tensor:
    """Apply one corruption to a ``(N, 3, H, W)`` frame in [0, 1]; output is clamped to [0, 1]."""
    spec.validate()
    x = clean.data if isinstance(clean, Tensor) else np.asarray(clean, dtype=np.float64)
    if x.ndim != 4:
        raise ConfigError(f"expected a (N, C, H, W) frame, got shape {x.shape}")
    p = spec.params
    rng = np.random.default_rng(spec.seed)
    kind = spec.kind

    if kind == "gaussian_blur":
        y = _gaussian_blur(x, p["sigma"])
    elif kind == "motion_blur":
        if p["length"] <= 1.0:
            y = x.copy()
        else:
            k = line_mask(p["length"], p["angle"])
            k /= k.sum()
            y = _per_plane(x, lambda a: ndimage.correlate(a, k, mode="mirror"))
    elif kind == "gaussian_noise":
        y = x + p["sigma"] * rng.standard_normal(x.shape) if p["sigma"] > 0 else x.copy()
    elif kind == "salt_pepper":
        y = x.copy()
        if p["p"] > 0:
            u = rng.random((x.shape[0], 1, x.shape[2], x.shape[3]))
            y = np.where(u < p["p"] / 2, 0.0, y)
            y = np.where((u >= p["p"] / 2) & (u < p["p"]), 1.0, y)
    elif kind == "block_compress":
        y = _block_dct(x, p["q"]) if p["q"] > 0 else x.copy()
    elif kind == "haze":
        y = x * p["t0"] + p["airlight"] * (1.0 - p["t0"])
    elif kind == "rain":
        if p["density"] == 0 or p["intensity"] == 0:
            y = x.copy()
        else:
            seeds = (rng.random((x.shape[0], x.shape[2], x.shape[3])) < p["density"]).astype(np.float64)
            mask = line_mask(p["length"], 90.0 + p["angle"])
            streak = np.stack([np.clip(ndimage.correlate(s, mask, mode="constant"), 0, 1) for s in seeds])
            y = x + p["intensity"] * streak[:, None]
    elif kind == "compound":
        y = _gaussian_blur(x, p["sigma"])
        if p["noise_sigma"] > 0:
            y = y + p["noise_sigma"] * rng.standard_normal(x.shape)
    else:  # pragma: no cover - validate() rejects unknown kinds
        raise ConfigError(kind)
    return Tensor(np.clip(y, 0.0, 1.0))


def identity_spec(kind: str) -> DegradationSpec:
    """A parameter setting under which ``kind`` leaves every frame unchanged."""
    table = {
        "gaussian_blur": {"sigma": 0.0},
        "motion_blur": {"length": 1.0, "angle": 0.0},
        "gaussian_noise": {"sigma": 0.0},
        "salt_pepper": {"p": 0.0},
        "block_compress": {"q": 0.0},
        "haze": {"t0": 1.0, "airlight": 0.5},
        "rain": {"density": 0.0, "length": 9.0, "angle": 0.0, "intensity": 0.5},
        "compound": {"sigma": 0.0, "noise_sigma": 0.0},
    }
    return DegradationSpec(kind, table[kind], seed=0)


# ---------------------------------------------------------------- mixture


def _default_weights() -> dict[str, float]:
    return {"blur": 0.30, "noise": 0.25, "compression": 0.20, "weather": 0.15, "other": 0.10}


def _default_kinds() -> dict[str, list[str]]:
    return {
        "blur": ["gaussian_blur", "motion_blur"],
        "noise": ["gaussian_noise", "salt_pepper"],
        "compression": ["block_compress"],
        "weather": ["haze", "rain"],
        "other": ["compound"],
    }


@dataclass
class MixtureConfig:
    weights: dict[str, float] = field(default_factory=_default_weights)
    kinds: dict[str, list[str]] = field(default_factory=_default_kinds)
    ranges: dict[str, dict[str, list[float]]] = field(default_factory=lambda: json.loads(json.dumps(DEFAULT_RANGES)))
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if set(self.weights) != set(CATEGORIES):
            raise ConfigError(f"mixture weights must name exactly {CATEGORIES}")
        if any(w < 0 for w in self.weights.values()):
            raise ConfigError("mixture weights must be non-negative")
        if abs(sum(self.weights.values()) - 1.0) > 1e-9:
            raise ConfigError(f"mixture weights sum to {sum(self.weights.values())}, not 1")
        for cat, kinds in self.kinds.items():
            if cat not in CATEGORIES:
                raise ConfigError(f"unknown category {cat!r}")
            for k in kinds:
                if CATEGORY_OF.get(k) != cat:
                    raise ConfigError(f"kind {k!r} does not belong to category {cat!r}")
        for cat in CATEGORIES:
            if self.weights[cat] > 0 and not self.kinds.get(cat):
                raise ConfigError(f"category {cat!r} has weight but no kinds")
        for kind, rng in self.ranges.items():
            if kind not in PARAM_LIMITS:
                raise ConfigError(f"range given for unknown kind {kind!r}")
            for name, bounds in rng.items():
                lo_lim, hi_lim = PARAM_LIMITS[kind].get(name, (None, None))
                if lo_lim is None:
                    raise ConfigError(f"unknown parameter {kind}.{name}")
                lo, hi = bounds
                if not (lo_lim <= lo <= hi <= hi_lim):
                    raise ConfigError(f"range {kind}.{name}={bounds} invalid or outside [{lo_lim}, {hi_lim}]")

    def to_dict(self) -> dict:
        return {"weights": dict(self.weights), "kinds": dict(self.kinds), "ranges": self.ranges, "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> MixtureConfig:
        unknown = set(d) - {"weights", "kinds", "ranges", "seed"}
        if unknown:
            raise ConfigError(f"unknown mixture keys {sorted(unknown)}")
        base = cls()
        ranges = base.ranges
        for kind, r in d.get("ranges", {}).items():
            ranges.setdefault(kind, {}).update(r)
        return cls(
            weights=d.get("weights", base.weights),
            kinds=d.get("kinds", base.kinds),
            ranges=ranges,
            seed=int(d.get("seed", 0)),
        )

    @classmethod
    def single(cls, kind: str, seed: int = 0, **params: float) -> MixtureConfig:
        """All weight on one kind with fixed parameter values."""
        cat = CATEGORY_OF[kind]
        weights = {c: (1.0 if c == cat else 0.0) for c in CATEGORIES}
        kinds = {c: ([kind] if c == cat else []) for c in CATEGORIES}
        mix = cls(weights=weights, kinds=kinds, seed=seed)
        mix.ranges[kind].update({k: [float(v), float(v)] for k, v in params.items()})
        mix.validate()
        return mix


def sample_spec(mix: MixtureConfig, rng: np.random.Generator) -> DegradationSpec:
    weights = np.array([mix.weights[c] for c in CATEGORIES])
    cat = CATEGORIES[int(rng.choice(len(CATEGORIES), p=weights / weights.sum()))]
    kinds = mix.kinds[cat]
    kind = kinds[int(rng.integers(len(kinds)))]
    params = {}
    for name in PARAM_LIMITS[kind]:
        lo, hi = mix.ranges[kind][name]
        params[name] = float(rng.uniform(lo, hi)) if hi > lo else float(lo)
    seed = int(rng.integers(0, 2**63))
    return DegradationSpec(kind, params, seed)


def spec_at(mix: MixtureConfig, index: int) -> DegradationSpec:
    """Counter-based draw: the spec for item ``index`` under ``mix.seed``."""
    return sample_spec(mix, np.random.default_rng([mix.seed, index]))


def make_pair(
    clean: Tensor, mix: MixtureConfig, rng: np.random.Generator
) -> tuple[Tensor, Tensor, DegradationSpec]:
    spec = sample_spec(mix, rng)
    return apply(spec, clean), clean, spec
