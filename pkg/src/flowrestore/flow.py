"""Hamiltonian-style vector field and fixed-step Euler integration.

The field at step ``t`` (continuous time ``t * dt``) is

    f = P + exp(-rate * t * dt) * tanh(anchor - x_t) + field(z)

where ``P = anchor - x_in`` is fixed at the start of the trajectory, the
anchor is the backbone prediction, and ``anchor - x_t`` is the closed-form
negative gradient of ``0.5 * ||x_t - anchor||^2``. Each of the three terms and
the decay can be switched off for ablations.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from . import tensor as T
from .errors import ConfigError, NumericalError, ShapeError
from .tensor import Tensor

# np.tanh returns exactly +-1 once |arg| passes about 19; pull back by one ulp so the
# potential term stays strictly inside (-1, 1) as the field definition promises
_PULL_MAX = float(np.nextafter(1.0, 0.0))


@dataclass(frozen=True)
class FieldToggles:
    momentum: bool = True
    potential: bool = True
    decay: bool = True
    prompt: bool = True

    PRESETS = ("full", "simplified", "momentum-only", "no-momentum", "no-decay", "none")

    @classmethod
    def preset(cls, name: str) -> FieldToggles:
        """Named toggle sets; ``simplified`` drops momentum and decay."""
        table = {
            "full": cls(),
            "simplified": cls(momentum=False, decay=False),
            "momentum-only": cls(potential=False, prompt=False),
            "no-momentum": cls(momentum=False),
            "no-decay": cls(decay=False),
            "none": cls(momentum=False, potential=False, decay=False, prompt=False),
        }
        if name not in table:
            raise ConfigError(f"unknown toggle preset {name!r}; choose from {', '.join(table)}")
        return table[name]

    @classmethod
    def parse(cls, text: str) -> FieldToggles:
        """Accept a preset name or a comma list of enabled terms."""
        if text in cls.PRESETS:
            return cls.preset(text)
        names = {s.strip() for s in text.split(",") if s.strip()}
        unknown = names - {"momentum", "potential", "decay", "prompt"}
        if unknown:
            raise ConfigError(f"unknown field terms: {sorted(unknown)}")
        return cls(**{k: k in names for k in ("momentum", "potential", "decay", "prompt")})

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class SolverSettings:
    steps: int = 5
    dt: float = 0.2
    decay_rate: float = 1.0

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError("steps must be >= 1")
        if not self.dt > 0:
            raise ConfigError("dt must be > 0")
        if self.decay_rate < 0:
            raise ConfigError("decay_rate must be >= 0")

    @property
    def horizon(self) -> float:
        return self.steps * self.dt

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class FlowState:
    x_t: Tensor
    anchor: Tensor
    momentum: Tensor
    t: int = 0
    dt: float = 0.2
    steps: int = 5
    decay_rate: float = 1.0

    @property
    def time(self) -> float:
        return self.t * self.dt


@dataclass
class TraceStep:
    step: int
    time: float
    x: np.ndarray
    energy: float
    momentum_mag: float
    potential_mag: float
    prompt_mag: float
    l1_to_gt: float | None = None


@dataclass
class FlowTrace:
    steps: list[TraceStep] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.steps)

    def l1_curve(self) -> list[float | None]:
        return [s.l1_to_gt for s in self.steps]


def potential(x: Tensor, anchor: Tensor) -> Tensor:
    """``0.5 * sum((x - anchor)^2)``; gradient w.r.t. ``x`` is ``x - anchor``."""
    if x.shape != anchor.shape:
        raise ShapeError(f"potential shape mismatch {x.shape} vs {anchor.shape}")
    diff = T.sub(x, anchor)
    return T.scale(T.sum_all(T.mul(diff, diff)), 0.5)


def hamiltonian(x: Tensor, momentum: Tensor, anchor: Tensor) -> float:
    if momentum.shape != x.shape:
        raise ShapeError(f"momentum shape {momentum.shape} != state shape {x.shape}")
    kinetic = 0.5 * float(np.mean(momentum.data**2))
    diff = x.data - anchor.data
    return kinetic + 0.5 * float(np.sum(diff * diff))


def decay_scale(state: FlowState, toggles: FieldToggles) -> float:
    if not toggles.decay:
        return 1.0
    return T.exp_neg_scale(state.decay_rate, state.time)


def field_terms(
    state: FlowState, z: nn.PromptVector, toggles: FieldToggles, params: nn.Params
) -> dict[str, Tensor]:
    """Enabled field terms keyed by ``momentum``, ``potential`` and ``prompt``."""
    terms: dict[str, Tensor] = {}
    if toggles.momentum:
        terms["momentum"] = state.momentum
    if toggles.potential:
        pull = T.clamp(T.tanh(T.sub(state.anchor, state.x_t)), -_PULL_MAX, _PULL_MAX)
        terms["potential"] = T.scale(pull, decay_scale(state, toggles))
    if toggles.prompt:
        terms["prompt"] = nn.prompt_field(z, params, state.x_t.shape)
    return terms


def vector_field(state: FlowState, z: nn.PromptVector, toggles: FieldToggles, params: nn.Params) -> Tensor:
    terms = field_terms(state, z, toggles, params)
    if not terms:
        return Tensor(np.zeros(state.x_t.shape))
    total = None
    for name in ("momentum", "potential", "prompt"):
        if name in terms:
            total = terms[name] if total is None else T.add(total, terms[name])
    return total


def _mag(terms: dict[str, Tensor], name: str) -> float:
    return float(np.mean(np.abs(terms[name].data))) if name in terms else 0.0


def _record(state, z, toggles, params, target) -> TraceStep:
    terms = field_terms(state, z, toggles, params)
    l1 = None if target is None else float(np.mean(np.abs(state.x_t.data - target.data)))
    return TraceStep(
        step=state.t,
        time=state.time,
        x=state.x_t.data.copy(),
        energy=hamiltonian(state.x_t, state.momentum, state.anchor),
        momentum_mag=_mag(terms, "momentum"),
        potential_mag=_mag(terms, "potential"),
        prompt_mag=_mag(terms, "prompt"),
        l1_to_gt=l1,
    )


def euler_integrate(
    x_in: Tensor,
    anchor: Tensor,
    z: nn.PromptVector,
    solver: SolverSettings,
    toggles: FieldToggles,
    params: nn.Params,
    capture: bool = False,
    target: Tensor | None = None,
) -> tuple[Tensor, FlowTrace | None]:
    """Run ``solver.steps`` explicit Euler steps starting from ``x_in``.

    The loop is unrolled on the tape, so the result is differentiable with
    respect to everything upstream of ``anchor`` and ``z``. With ``capture``
    the trace holds ``steps + 1`` snapshots (step 0 is ``x_in``); ``target``
    adds the per-step l1 distance to ground truth.
    """
    if x_in.shape != anchor.shape:
        raise ShapeError(f"anchor shape {anchor.shape} != input shape {x_in.shape}")
    state = FlowState(
        x_t=x_in,
        anchor=anchor,
        momentum=T.sub(anchor, x_in),
        dt=solver.dt,
        steps=solver.steps,
        decay_rate=solver.decay_rate,
    )
    trace = FlowTrace() if capture else None
    with np.errstate(all="ignore"):
        for t in range(solver.steps):
            state.t = t
            if trace is not None:
                trace.steps.append(_record(state, z, toggles, params, target))
            try:
                f = vector_field(state, z, toggles, params)
                state.x_t = T.add(state.x_t, T.scale(f, solver.dt))
            except NumericalError as exc:
                raise NumericalError(f"state became non-finite at Euler step {t}: {exc}") from exc
        state.t = solver.steps
        if trace is not None:
            trace.steps.append(_record(state, z, toggles, params, target))
    return state.x_t, trace


def restore_frame(
    x_in: Tensor,
    params: nn.Params,
    config: nn.ArchConfig,
    solver: SolverSettings = SolverSettings(),
    toggles: FieldToggles = FieldToggles(),
    capture: bool = False,
    target: Tensor | None = None,
) -> tuple[Tensor, FlowTrace | None]:
    """Prompt, backbone anchor, then integrate the field from the degraded frame.

    The model sees pixels only. The returned state is not clamped; clamp with
    :func:`to_image` when exporting.
    """
    z = nn.prompt_generate(x_in, params, config)
    anchor = nn.physics_unet_forward(x_in, z, params, config)
    return euler_integrate(x_in, anchor, z, solver, toggles, params, capture=capture, target=target)


def to_image(x: Tensor | np.ndarray) -> np.ndarray:
    data = x.data if isinstance(x, Tensor) else x
    return np.clip(data, 0.0, 1.0)


TRACE_COLUMNS = ("step", "time", "H", "momentum_mag", "potential_mag", "prompt_mag", "l1_to_gt")


def export_trace(trace: FlowTrace, out_dir: str | Path, index: int = 0) -> list[Path]:
    """Write ``step_XX.ppm`` per snapshot (batch item ``index``) and ``trace.csv``."""
    from .data import save_image

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    width = max(2, len(str(len(trace) - 1)))
    written = []
    for s in trace.steps:
        path = out / f"step_{s.step:0{width}d}.ppm"
        save_image(to_image(s.x[index : index + 1]), path)
        written.append(path)
    with open(out / "trace.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRACE_COLUMNS)
        for s in trace.steps:
            writer.writerow(
                [
                    s.step,
                    repr(s.time),
                    repr(s.energy),
                    repr(s.momentum_mag),
                    repr(s.potential_mag),
                    repr(s.prompt_mag),
                    "" if s.l1_to_gt is None else repr(s.l1_to_gt),
                ]
            )
    written.append(out / "trace.csv")
    return written


def is_monotone_nonincreasing(values: list[float], tol: float = 0.0) -> bool:
    return all(b <= a + tol for a, b in zip(values, values[1:]) if not (math.isnan(a) or math.isnan(b)))
