"""Unrolled end-to-end training, checkpoints and evaluation reports."""

from __future__ import annotations

import csv
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import degrade, nn
from . import tensor as T
from .data import AugmentSpec, Manifest, augment, load_image, read_manifest, sample_frames
from .errors import ConfigError, FormatError, NumericalError
from .flow import FieldToggles, SolverSettings, field_terms, restore_frame, to_image
from .metrics import FrameMetrics, MetricReport, psnr, ssim
from .tensor import Tensor

log = logging.getLogger(__name__)

MAGIC = b"UFR1"
FORMAT_VERSION = 1


@dataclass
class TrainConfig:
    """Optimisation settings.

    Desk-scale defaults; the reference full-scale protocol is batch 8,
    256x256 crops and 500 epochs at the same learning rate.
    """

    lr: float = 1e-4
    batch_size: int = 4
    iterations: int = 1000
    crop: int = 64
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    solver: SolverSettings = field(default_factory=SolverSettings)
    toggles: FieldToggles = field(default_factory=FieldToggles)
    seed: int = 0
    val_every: int = 100
    val_frames: int = 8
    min_rate: int = 3
    max_rate: int = 10

    def __post_init__(self):
        if not self.lr >= 0:
            raise ConfigError("lr must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.iterations < 0:
            raise ConfigError("iterations must be >= 0")
        if not 3 <= self.min_rate <= self.max_rate <= 10:
            raise ConfigError("frame rates must satisfy 3 <= min_rate <= max_rate <= 10")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["solver"] = self.solver.to_dict()
        d["toggles"] = self.toggles.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train keys {sorted(unknown)}")
        d = dict(d)
        if "solver" in d:
            d["solver"] = _strict(SolverSettings, d["solver"], "solver")
        if "toggles" in d:
            t = d["toggles"]
            d["toggles"] = FieldToggles.parse(t) if isinstance(t, str) else _strict(FieldToggles, t, "toggles")
        return cls(**d)


def _strict(cls, d: dict, what: str):
    unknown = set(d) - set(cls.__dataclass_fields__)
    if unknown:
        raise ConfigError(f"unknown {what} keys {sorted(unknown)}")
    return cls(**d)


@dataclass
class TrainState:
    arch: nn.ArchConfig
    config: TrainConfig
    params: nn.Params
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    iteration: int
    rng: np.random.Generator

    @classmethod
    def fresh(cls, arch: nn.ArchConfig, config: TrainConfig) -> TrainState:
        rng = np.random.default_rng(config.seed)
        params = nn.init_params(arch, rng)
        zeros = {k: np.zeros_like(p.data) for k, p in params.items()}
        return cls(arch, config, params, zeros, {k: z.copy() for k, z in zeros.items()}, 0, rng)


# ---------------------------------------------------------------- optimisation


def adam_update(state: TrainState) -> None:
    c = state.config
    state.iteration += 1
    t = state.iteration
    bc1 = 1.0 - c.beta1**t
    bc2 = 1.0 - c.beta2**t
    for name, p in state.params.items():
        g = p.grad
        m = state.m[name]
        v = state.v[name]
        m *= c.beta1
        m += (1.0 - c.beta1) * g
        v *= c.beta2
        v += (1.0 - c.beta2) * g * g
        p.data -= c.lr * (m / bc1) / (np.sqrt(v / bc2) + c.eps)


def _stack(frames: list[Tensor]) -> Tensor:
    return Tensor(np.concatenate([f.data for f in frames], axis=0))


def _diagnose(state: TrainState, degraded: Tensor) -> str:
    with T.no_grad(), np.errstate(all="ignore"):
        try:
            z = nn.prompt_generate(degraded, state.params, state.arch)
            anchor = nn.physics_unet_forward(degraded, z, state.params, state.arch)
        except NumericalError as exc:
            return f"backbone failed: {exc}"
        from .flow import FlowState

        fs = FlowState(degraded, anchor, anchor - degraded, 0, state.config.solver.dt)
        terms = field_terms(fs, z, state.config.toggles, state.params)
    mags = {k: float(np.max(np.abs(v.data))) for k, v in terms.items()}
    return f"term max-magnitudes at t=0: {mags}; |anchor|max={float(np.max(np.abs(anchor.data)))}"


def train_step(state: TrainState, batch: list[tuple[Tensor, Tensor]]) -> float:
    """One forward/backward/update on a batch of (degraded, clean) pairs; returns the mean l1."""
    if not batch:
        raise ValueError("empty batch")
    degraded = _stack([b[0] for b in batch])
    clean = _stack([b[1] for b in batch])
    try:
        x_out, _ = restore_frame(degraded, state.params, state.arch, state.config.solver, state.config.toggles)
        loss = T.l1_loss(x_out, clean)
    except NumericalError as exc:
        raise NumericalError(f"non-finite loss at iteration {state.iteration}: {exc}; {_diagnose(state, degraded)}")
    value = loss.item()
    if not math.isfinite(value):
        raise NumericalError(f"non-finite loss {value}; {_diagnose(state, degraded)}")
    for p in state.params.values():
        p.zero_grad()
    T.backward(loss)
    adam_update(state)
    for p in state.params.values():
        p.zero_grad()
    return value


# ---------------------------------------------------------------- checkpoints


def _rng_state_json(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def checkpoint_bytes(state: TrainState) -> bytes:
    header = {
        "format_version": FORMAT_VERSION,
        "arch": state.arch.to_dict(),
        "train": state.config.to_dict(),
        "horizon": state.config.solver.horizon,
        "toggles": state.config.toggles.to_dict(),
        "params": [[k, list(p.shape)] for k, p in state.params.items()],
        "iteration": state.iteration,
        "rng_state": _rng_state_json(state.rng),
    }
    hdr = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    chunks = [MAGIC, struct.pack("<IQ", FORMAT_VERSION, len(hdr)), hdr]
    for table in ({k: p.data for k, p in state.params.items()}, state.m, state.v):
        for k in state.params:
            chunks.append(np.ascontiguousarray(table[k], dtype="<f8").tobytes())
    return b"".join(chunks)


def save_checkpoint(state: TrainState, path: str | Path) -> None:
    Path(path).write_bytes(checkpoint_bytes(state))


def load_checkpoint(path: str | Path, expect_arch: nn.ArchConfig | None = None) -> TrainState:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic at byte 0)")
    if len(buf) < 16:
        raise FormatError(f"{path}: truncated checkpoint header")
    version, hlen = struct.unpack("<IQ", buf[4:16])
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    try:
        header = json.loads(buf[16 : 16 + hlen])
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: corrupt checkpoint header") from exc
    arch = nn.ArchConfig(**header["arch"])
    if expect_arch is not None and arch != expect_arch:
        raise ConfigError(f"checkpoint architecture {arch} does not match expected {expect_arch}")
    config = TrainConfig.from_dict(header["train"])
    template = nn.init_params(arch, np.random.default_rng(0))
    names = [n for n, _ in header["params"]]
    if names != list(template) or any(list(template[n].shape) != s for n, s in header["params"]):
        raise ConfigError(f"{path}: parameter layout does not match architecture {arch}")
    offset = 16 + hlen
    total = sum(p.size for p in template.values())
    if len(buf) != offset + 3 * total * 8:
        raise FormatError(f"{path}: payload is {len(buf) - offset} bytes, expected {3 * total * 8}")
    flat = np.frombuffer(buf, dtype="<f8", offset=offset).astype(np.float64)
    tables = []
    pos = 0
    for _ in range(3):
        table = {}
        for k, p in template.items():
            table[k] = flat[pos : pos + p.size].reshape(p.shape).copy()
            pos += p.size
        tables.append(table)
    params = {k: Tensor(a, requires_grad=True) for k, a in tables[0].items()}
    rng = np.random.default_rng()
    rng.bit_generator.state = header["rng_state"]
    return TrainState(arch, config, params, tables[1], tables[2], header["iteration"], rng)


# ---------------------------------------------------------------- data feeding


class FrameCache:
    def __init__(self, manifest: Manifest):
        self.manifest = manifest
        self._cache: dict[str, Tensor] = {}

    def get(self, rel: str) -> Tensor:
        if rel not in self._cache:
            self._cache[rel] = load_image(self.manifest.resolve(rel))
        return self._cache[rel]


def _train_order(manifest: Manifest, config: TrainConfig, rng: np.random.Generator) -> list[str]:
    frames = []
    for clip in manifest.split("train"):
        rate = int(rng.integers(config.min_rate, config.max_rate + 1))
        frames.extend(sample_frames(clip, rate, rng))
    order = rng.permutation(len(frames))
    return [frames[i] for i in order]


def eval_pairs(manifest: Manifest, split: str, mix: degrade.MixtureConfig, cache: FrameCache, limit: int | None = None):
    """Deterministic (frame_id, degraded, clean, spec) tuples for a split.

    Embedded manifest specs are replayed when present; otherwise item ``i``
    gets the counter-based draw ``spec_at(mix, i)``.
    """
    out = []
    index = 0
    for clip in manifest.split(split):
        for j, rel in enumerate(clip.frames):
            if limit is not None and len(out) >= limit:
                return out
            clean = cache.get(rel)
            if clip.specs is not None:
                spec = degrade.DegradationSpec.from_dict(clip.specs[j])
            else:
                spec = degrade.spec_at(mix, index)
            out.append((f"{clip.clip_id}/{j}", degrade.apply(spec, clean), clean, spec))
            index += 1
    return out


def restore_batch(state: TrainState, frames: list[Tensor], batch_size: int = 8) -> list[np.ndarray]:
    outs = []
    with T.no_grad():
        for i in range(0, len(frames), batch_size):
            chunk = _stack(frames[i : i + batch_size])
            x, _ = restore_frame(chunk, state.params, state.arch, state.config.solver, state.config.toggles)
            outs.extend(to_image(x)[k : k + 1] for k in range(x.shape[0]))
    return outs


def validate(state: TrainState, pairs) -> tuple[float, float]:
    restored = restore_batch(state, [p[1] for p in pairs])
    ps = [psnr(r, p[2]) for r, p in zip(restored, pairs)]
    ss = [ssim(r, p[2]) for r, p in zip(restored, pairs)]
    finite = [v for v in ps if math.isfinite(v)]
    return (float(np.mean(finite)) if finite else math.inf), float(np.mean(ss))


@dataclass
class TrainResult:
    state: TrainState
    curve: list[tuple[int, float, float | None, float | None]]
    best_path: Path | None
    last_path: Path | None


def train(
    manifest: Manifest | str | Path,
    mix: degrade.MixtureConfig,
    config: TrainConfig,
    arch: nn.ArchConfig = nn.ArchConfig(),
    out_dir: str | Path | None = None,
    state: TrainState | None = None,
) -> TrainResult:
    """Train from scratch (or resume ``state``) on the manifest's train split.

    Pairs are synthesized on the fly: every iteration samples frames, corrupts
    them with ``mix`` and applies a shared random crop/rotation/flip. With
    ``out_dir`` set, writes ``last.ufr``, ``best.ufr`` (highest validation
    PSNR), ``loss_curve.csv`` and the effective ``config.json``.
    """
    if not isinstance(manifest, Manifest):
        manifest = read_manifest(manifest)
    if not manifest.split("train"):
        raise ConfigError("manifest has no train clips")
    state = state or TrainState.fresh(arch, config)
    rng = state.rng
    cache = FrameCache(manifest)
    val = eval_pairs(manifest, "val", mix, cache, limit=config.val_frames) if manifest.split("val") else []
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(
            json.dumps({"arch": state.arch.to_dict(), "train": config.to_dict(), "mix": mix.to_dict()}, indent=2, sort_keys=True)
            + "\n"
        )
    curve: list[tuple[int, float, float | None, float | None]] = []
    best = -math.inf
    best_path = last_path = None
    order: list[str] = []
    while state.iteration < config.iterations:
        batch = []
        while len(batch) < config.batch_size:
            if not order:
                order = _train_order(manifest, config, rng)
            clean = cache.get(order.pop())
            degraded, clean, _ = degrade.make_pair(clean, mix, rng)
            aug = AugmentSpec.random(rng, clean.shape[2], clean.shape[3], config.crop)
            batch.append(augment((degraded, clean), aug))
        try:
            loss = train_step(state, batch)
        except NumericalError:
            if out is not None:
                save_checkpoint(state, out / "last.ufr")
            raise
        it = state.iteration
        vp = vs = None
        if val and (it % config.val_every == 0 or it == config.iterations):
            vp, vs = validate(state, val)
            if out is not None and vp > best:
                best = vp
                best_path = out / "best.ufr"
                save_checkpoint(state, best_path)
            log.info("iter %d  l1 %.5f  val psnr %.3f  ssim %.4f", it, loss, vp, vs)
        curve.append((it, loss, vp, vs))
    if out is not None:
        last_path = out / "last.ufr"
        save_checkpoint(state, last_path)
        if best_path is None:
            best_path = out / "best.ufr"
            save_checkpoint(state, best_path)
        write_curve(curve, out / "loss_curve.csv")
    return TrainResult(state, curve, best_path, last_path)


def write_curve(curve, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "train_l1", "val_psnr", "val_ssim"])
        for it, loss, vp, vs in curve:
            w.writerow([it, repr(loss), "" if vp is None else repr(vp), "" if vs is None else repr(vs)])


def evaluate(
    state: TrainState | str | Path,
    manifest: Manifest | str | Path,
    split: str = "test",
    mix: degrade.MixtureConfig | None = None,
    csv_path: str | Path | None = None,
    solver: SolverSettings | None = None,
    toggles: FieldToggles | None = None,
) -> MetricReport:
    """Per-frame PSNR/SSIM before and after restoration on one split."""
    if not isinstance(state, TrainState):
        state = load_checkpoint(state)
    if solver is not None or toggles is not None:
        cfg = replace(state.config, solver=solver or state.config.solver, toggles=toggles or state.config.toggles)
        state = replace(state, config=cfg)
    if not isinstance(manifest, Manifest):
        manifest = read_manifest(manifest)
    mix = mix or degrade.MixtureConfig()
    pairs = eval_pairs(manifest, split, mix, FrameCache(manifest))
    restored = restore_batch(state, [p[1] for p in pairs])
    rows = [
        FrameMetrics(
            frame_id=fid,
            task=spec.kind,
            psnr_in=psnr(deg, clean),
            psnr_out=psnr(out, clean),
            ssim_in=ssim(deg, clean),
            ssim_out=ssim(out, clean),
        )
        for (fid, deg, clean, spec), out in zip(pairs, restored)
    ]
    report = MetricReport(rows)
    if csv_path is not None:
        write_report(report, csv_path)
    return report


def write_report(report: MetricReport, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frame_id", "task", "psnr_in", "psnr_out", "ssim_in", "ssim_out"])
        for r in report.rows:
            w.writerow([r.frame_id, r.task, repr(r.psnr_in), repr(r.psnr_out), repr(r.ssim_in), repr(r.ssim_out)])
