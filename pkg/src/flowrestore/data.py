"""Image files, clip manifests, frame sampling, augmentation and a synthetic scene source."""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError
from .tensor import Tensor

SPLITS = ("train", "val", "test")
IMAGE_SUFFIXES = (".ppm", ".png")


# ---------------------------------------------------------------- PPM / PNG


def _read_token(buf: bytes, pos: int) -> tuple[bytes, int]:
    n = len(buf)
    while pos < n:
        ch = buf[pos : pos + 1]
        if ch == b"#":
            while pos < n and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif ch.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not buf[pos : pos + 1].isspace() and buf[pos : pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise FormatError(f"truncated PPM header at byte {start}")
    return buf[start:pos], pos


def decode_ppm(buf: bytes) -> np.ndarray:
    """Decode binary P6 with maxval 255 into an ``(H, W, 3)`` uint8 array."""
    if buf[:2] != b"P6":
        raise FormatError("not a binary PPM: expected magic 'P6' at byte 0")
    pos = 2
    values = []
    for name in ("width", "height", "maxval"):
        start = pos
        tok, pos = _read_token(buf, pos)
        if not tok.isdigit():
            raise FormatError(f"invalid PPM {name} {tok!r} at byte {start}")
        values.append(int(tok))
    width, height, maxval = values
    if maxval != 255:
        raise FormatError(f"unsupported PPM maxval {maxval}; only 255 is accepted")
    if width < 1 or height < 1:
        raise FormatError(f"invalid PPM size {width}x{height}")
    if pos >= len(buf) or not buf[pos : pos + 1].isspace():
        raise FormatError(f"missing whitespace after PPM header at byte {pos}")
    pos += 1
    need = width * height * 3
    have = len(buf) - pos
    if have < need:
        raise FormatError(f"truncated PPM payload: expected {need} bytes from byte {pos}, found {have}")
    return np.frombuffer(buf, dtype=np.uint8, count=need, offset=pos).reshape(height, width, 3)


def encode_ppm(pixels: np.ndarray) -> bytes:
    h, w, _ = pixels.shape
    return b"P6\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(pixels, dtype=np.uint8).tobytes()


def quantize(x: np.ndarray) -> np.ndarray:
    """Clamp to [0, 1] and round half away from zero onto 0..255."""
    return np.floor(np.clip(x, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def load_image(path: str | Path) -> Tensor:
    path = Path(path)
    if path.suffix.lower() == ".png":
        pixels = _load_png(path)
    else:
        pixels = decode_ppm(path.read_bytes())
    return Tensor(pixels.astype(np.float64).transpose(2, 0, 1)[None] / 255.0)


def save_image(x: Tensor | np.ndarray, path: str | Path) -> None:
    data = x.data if isinstance(x, Tensor) else np.asarray(x)
    if data.ndim == 4:
        if data.shape[0] != 1:
            raise ValueError("save_image writes a single frame; got batch of %d" % data.shape[0])
        data = data[0]
    pixels = quantize(data.transpose(1, 2, 0))
    path = Path(path)
    if path.suffix.lower() == ".png":
        _save_png(pixels, path)
    else:
        path.write_bytes(encode_ppm(pixels))


def _pil():
    try:
        from PIL import Image
    except ImportError as exc:
        raise FormatError("PNG support needs the optional 'png' extra (Pillow)") from exc
    return Image


def _load_png(path: Path) -> np.ndarray:
    with _pil().open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


def _save_png(pixels: np.ndarray, path: Path) -> None:
    _pil().fromarray(pixels, mode="RGB").save(path, format="PNG")


# ---------------------------------------------------------------- manifests


@dataclass
class ClipRecord:
    clip_id: str
    frames: list[str]
    fps: int
    split: str
    degraded: list[str] | None = None
    specs: list[dict] | None = None

    def to_dict(self) -> dict:
        out = {"clip_id": self.clip_id, "frames": self.frames, "fps": self.fps, "split": self.split}
        if self.degraded is not None:
            out["degraded"] = self.degraded
        if self.specs is not None:
            out["specs"] = self.specs
        return out


@dataclass
class Manifest:
    clips: list[ClipRecord]
    root: Path = field(default_factory=Path)

    def split(self, name: str) -> list[ClipRecord]:
        return [c for c in self.clips if c.split == name]

    def resolve(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else self.root / p


def _validate(clips: list[ClipRecord]) -> None:
    seen_ids = set()
    owner: dict[str, str] = {}
    for c in clips:
        if c.split not in SPLITS:
            raise FormatError(f"clip {c.clip_id!r}: split must be one of {SPLITS}, got {c.split!r}")
        if not c.frames:
            raise FormatError(f"clip {c.clip_id!r} has no frames")
        if c.fps < 1:
            raise FormatError(f"clip {c.clip_id!r}: fps must be >= 1")
        if c.clip_id in seen_ids:
            raise FormatError(f"duplicate clip_id {c.clip_id!r}")
        seen_ids.add(c.clip_id)
        for f in c.frames:
            if owner.setdefault(f, c.split) != c.split:
                raise FormatError(f"frame {f} appears in both {owner[f]} and {c.split} splits")
        for extra in (c.degraded, c.specs):
            if extra is not None and len(extra) != len(c.frames):
                raise FormatError(f"clip {c.clip_id!r}: degraded/specs length must match frames")


def read_manifest(path: str | Path, check_files: bool = True) -> Manifest:
    path = Path(path)
    clips = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                clips.append(
                    ClipRecord(
                        clip_id=str(rec["clip_id"]),
                        frames=list(rec["frames"]),
                        fps=int(rec["fps"]),
                        split=rec["split"],
                        degraded=rec.get("degraded"),
                        specs=rec.get("specs"),
                    )
                )
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise FormatError(f"{path}:{lineno}: bad manifest record ({exc})") from exc
    _validate(clips)
    manifest = Manifest(clips, root=path.parent)
    if check_files:
        for c in clips:
            for f in c.frames + (c.degraded or []):
                if not manifest.resolve(f).is_file():
                    raise FileNotFoundError(f"manifest {path}: missing frame {f}")
    return manifest


def write_manifest(clips: list[ClipRecord], path: str | Path) -> None:
    _validate(clips)
    with open(path, "w") as fh:
        for c in clips:
            fh.write(json.dumps(c.to_dict(), sort_keys=False) + "\n")


# ---------------------------------------------------------------- frame sampling


def sample_frames(record: ClipRecord, rate: int, rng: np.random.Generator) -> list[str]:
    """Pick ``rate`` frames per second of footage, evenly spaced with jitter.

    Each second is split into ``rate`` equal bins and one frame is drawn per
    bin, so the selection is ordered and duplicate-free. ``rate`` is capped at
    the clip fps (and at the frames left in a trailing partial second).
    """
    if not record.frames:
        raise ValueError(f"clip {record.clip_id!r} is empty")
    if not 3 <= rate <= 10:
        raise ConfigError(f"frame rate must be in [3, 10], got {rate}")
    n, fps = len(record.frames), record.fps
    picked = []
    for start in range(0, n, fps):
        count = min(fps, n - start)
        k = min(rate, count)
        jitter = rng.random(k)
        for j in range(k):
            picked.append(start + int(math.floor((j + jitter[j]) * count / k)))
    return [record.frames[i] for i in picked]


# ---------------------------------------------------------------- augmentation


@dataclass(frozen=True)
class AugmentSpec:
    crop: int = 64
    rotation: int = 0
    flip: bool = False
    top: int = 0
    left: int = 0

    def __post_init__(self):
        if self.rotation not in (0, 90, 180, 270):
            raise ConfigError(f"rotation must be a multiple of 90 degrees, got {self.rotation}")

    @classmethod
    def random(cls, rng: np.random.Generator, height: int, width: int, crop: int) -> AugmentSpec:
        if crop > min(height, width):
            raise ConfigError(f"crop {crop} larger than frame {height}x{width}")
        return cls(
            crop=crop,
            rotation=int(rng.integers(4)) * 90,
            flip=bool(rng.integers(2)),
            top=int(rng.integers(height - crop + 1)),
            left=int(rng.integers(width - crop + 1)),
        )


def apply_augment(x: np.ndarray, spec: AugmentSpec) -> np.ndarray:
    h, w = x.shape[-2:]
    if spec.crop > min(h, w) or spec.top + spec.crop > h or spec.left + spec.crop > w:
        raise ConfigError(f"crop {spec.crop} at ({spec.top}, {spec.left}) does not fit {h}x{w}")
    out = x[..., spec.top : spec.top + spec.crop, spec.left : spec.left + spec.crop]
    out = np.rot90(out, k=spec.rotation // 90, axes=(-2, -1))
    if spec.flip:
        out = out[..., ::-1]
    return np.ascontiguousarray(out)


def augment(pair: tuple[Tensor, Tensor], spec: AugmentSpec) -> tuple[Tensor, Tensor]:
    """Apply the same crop / rotation / flip to a (degraded, clean) pair."""
    degraded, clean = pair
    if degraded.shape != clean.shape:
        raise ConfigError("pair frames must share a shape")
    return Tensor(apply_augment(degraded.data, spec)), Tensor(apply_augment(clean.data, spec))


# ---------------------------------------------------------------- synthetic scenes


def _scene(rng: np.random.Generator, size: int):
    c0, c1 = rng.uniform(0.1, 0.9, size=(2, 3))
    angle = rng.uniform(0, 2 * np.pi)
    shapes = []
    for _ in range(int(rng.integers(3, 7))):
        shapes.append(
            dict(
                kind="rect" if rng.random() < 0.5 else "ellipse",
                cy=rng.uniform(0, size),
                cx=rng.uniform(0, size),
                ry=rng.uniform(size / 12, size / 4),
                rx=rng.uniform(size / 12, size / 4),
                color=rng.uniform(0.0, 1.0, size=3),
                vy=rng.uniform(-1.5, 1.5),
                vx=rng.uniform(-1.5, 1.5),
            )
        )
    return c0, c1, angle, shapes


def _render(scene, size: int, t: int) -> np.ndarray:
    c0, c1, angle, shapes = scene
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    ramp = (np.cos(angle) * xx + np.sin(angle) * yy) / size
    ramp = (ramp - ramp.min()) / max(ramp.max() - ramp.min(), 1e-9)
    img = c0[:, None, None] * (1 - ramp) + c1[:, None, None] * ramp
    for s in shapes:
        cy, cx = s["cy"] + s["vy"] * t, s["cx"] + s["vx"] * t
        if s["kind"] == "rect":
            mask = (np.abs(yy - cy) <= s["ry"]) & (np.abs(xx - cx) <= s["rx"])
        else:
            mask = ((yy - cy) / s["ry"]) ** 2 + ((xx - cx) / s["rx"]) ** 2 <= 1.0
        img = np.where(mask[None], s["color"][:, None, None], img)
    return np.clip(img, 0.0, 1.0)


def synthetic_clip(rng: np.random.Generator, frames: int, size: int = 64) -> list[np.ndarray]:
    """Frames ``(3, size, size)`` of a gradient backdrop with drifting flat shapes."""
    scene = _scene(rng, size)
    return [_render(scene, size, t) for t in range(frames)]


def write_synthetic_clips(
    out_dir: str | Path, clips: int, frames_per_clip: int, size: int = 64, seed: int = 0
) -> list[Path]:
    """Write clean clips as ``out_dir/clipNNN/fNNN.ppm``; returns the clip directories."""
    out = Path(out_dir)
    rng = np.random.default_rng(seed)
    dirs = []
    for i in range(clips):
        d = out / f"clip{i:03d}"
        d.mkdir(parents=True, exist_ok=True)
        for j, frame in enumerate(synthetic_clip(rng, frames_per_clip, size)):
            save_image(frame[None], d / f"f{j:03d}.ppm")
        dirs.append(d)
    return dirs


def discover_clips(clean_dir: str | Path) -> list[tuple[str, list[Path]]]:
    """Subdirectories become clips; loose image files become one-frame clips."""
    root = Path(clean_dir)
    if not root.is_dir():
        raise FileNotFoundError(f"clean directory {root} does not exist")
    clips = []
    for entry in sorted(os.listdir(root)):
        p = root / entry
        if p.is_dir():
            frames = sorted(f for f in p.iterdir() if f.suffix.lower() in IMAGE_SUFFIXES)
            if frames:
                clips.append((entry, frames))
        elif p.suffix.lower() in IMAGE_SUFFIXES:
            clips.append((p.stem, [p]))
    return clips
