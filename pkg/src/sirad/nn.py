"""Teacher encoder, up-then-down student decoder and the multi-loop loss."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import (
    ShapeError,
    Tape,
    Tensor,
    add,
    batch_weighted_mean,
    conv2d,
    conv_transpose2d,
    cosine_distance_map,
    leaky_relu,
    mean_all,
)

DEFAULT_WIDTHS = (16, 32, 64, 128)
TINY_WIDTHS = (2, 3, 4, 5)


def _he_normal(rng: np.random.Generator, shape: tuple[int, ...], fan_in: float) -> np.ndarray:
    return rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)


class TeacherEncoder:
    """Four stride-2 conv stages, frozen.

    Stage 3 gives the mid-level feature, stage 4 the compressed one, so an
    ``H x W`` input yields maps at ``H/8`` and ``H/16``.
    """

    stages = 4

    def __init__(self, in_channels: int, widths=DEFAULT_WIDTHS, rng: np.random.Generator | None = None):
        if len(widths) != self.stages:
            raise ValueError(f"teacher needs {self.stages} stage widths, got {widths}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_channels = int(in_channels)
        self.widths = tuple(int(w) for w in widths)
        self.params: dict[str, Tensor] = {}
        ci = self.in_channels
        for k, co in enumerate(self.widths, start=1):
            w = _he_normal(rng, (co, ci, 3, 3), ci * 9)
            b = rng.standard_normal(co) * 0.05
            self.params[f"stage{k}.weight"] = Tensor(w, name=f"stage{k}.weight")
            self.params[f"stage{k}.bias"] = Tensor(b, name=f"stage{k}.bias")
            ci = co

    def __call__(self, x: Tensor, slope: float) -> tuple[Tensor, Tensor]:
        feats = []
        h = x
        for k in range(1, self.stages + 1):
            h = conv2d(h, self.params[f"stage{k}.weight"], self.params[f"stage{k}.bias"], stride=2, padding=1)
            h = leaky_relu(h, slope)
            feats.append(h)
        return feats[2], feats[3]


class StudentDecoder:
    """Transposed-conv up path to the mid level, strided conv back down.

    The same weights serve every refinement loop, so the parameter count
    does not depend on the loop count.
    """

    def __init__(self, mid_channels: int, top_channels: int, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(1)
        c3, c4 = int(mid_channels), int(top_channels)
        self.mid_channels, self.top_channels = c3, c4
        shapes = {
            "up.weight": ((c4, c3, 4, 4), c4 * 4),  # stride 2: each output sees ci * (4/2)^2 taps
            "up.bias": ((c3,), None),
            "up_refine.weight": ((c3, c3, 3, 3), c3 * 9),
            "up_refine.bias": ((c3,), None),
            "down.weight": ((c4, c3, 3, 3), c3 * 9),
            "down.bias": ((c4,), None),
            "down_refine.weight": ((c4, c4, 3, 3), c4 * 9),
            "down_refine.bias": ((c4,), None),
        }
        self.params: dict[str, Tensor] = {}
        for name, (shape, fan_in) in shapes.items():
            data = np.zeros(shape) if fan_in is None else _he_normal(rng, shape, fan_in)
            self.params[name] = Tensor(data, requires_grad=True, name=name)

    def __call__(self, phi: Tensor, slope: float) -> tuple[Tensor, Tensor]:
        p = self.params
        if phi.data.ndim != 4 or phi.shape[1] != self.top_channels:
            raise ShapeError(f"decoder expects (n, {self.top_channels}, h, w) input, got {phi.shape}")
        h = leaky_relu(conv_transpose2d(phi, p["up.weight"], p["up.bias"], stride=2, padding=1), slope)
        f3 = conv2d(h, p["up_refine.weight"], p["up_refine.bias"], stride=1, padding=1)
        h = leaky_relu(conv2d(f3, p["down.weight"], p["down.bias"], stride=2, padding=1), slope)
        phi_s = conv2d(h, p["down_refine.weight"], p["down_refine.bias"], stride=1, padding=1)
        return f3, phi_s


@dataclass
class SirModel:
    teacher: TeacherEncoder
    student: StudentDecoder
    loops: int = 3
    eps: float = 1e-8
    slope: float = 0.1

    def __post_init__(self):
        if self.loops < 1:
            raise ValueError(f"loop count must be >= 1, got {self.loops}")

    @classmethod
    def create(
        cls,
        in_channels: int = 1,
        widths=DEFAULT_WIDTHS,
        loops: int = 3,
        eps: float = 1e-8,
        slope: float = 0.1,
        teacher_rng: np.random.Generator | None = None,
        student_rng: np.random.Generator | None = None,
    ) -> "SirModel":
        teacher = TeacherEncoder(in_channels, widths, teacher_rng)
        student = StudentDecoder(widths[2], widths[3], student_rng)
        return cls(teacher, student, loops=loops, eps=eps, slope=slope)

    def named_parameters(self) -> dict[str, Tensor]:
        out = {f"teacher.{k}": v for k, v in self.teacher.params.items()}
        out.update({f"student.{k}": v for k, v in self.student.params.items()})
        return out

    def student_parameters(self) -> dict[str, Tensor]:
        return {f"student.{k}": v for k, v in self.student.params.items()}


def teacher_forward(model: SirModel, x: Tensor) -> tuple[Tensor, Tensor]:
    """Mid-level and compressed teacher features, as constants."""
    if x.data.ndim != 4:
        raise ShapeError(f"expected (n, c, H, W) input, got {x.shape}")
    _, c, H, W = x.shape
    if H % 16 or W % 16:
        raise ShapeError(f"spatial extents must be divisible by 16, got {H}x{W}")
    if c != model.teacher.in_channels:
        raise ShapeError(f"teacher expects {model.teacher.in_channels} channels, got {c}")
    f3, phi = model.teacher(x.detach(), model.slope)
    return f3.detach(), phi.detach()


def loop_forward(model: SirModel, phi_t: Tensor) -> list[tuple[Tensor, Tensor]]:
    """Run the decoder ``model.loops`` times, feeding back its own top output.

    Loop 1 decodes the teacher feature; loop k > 1 decodes the student's
    compressed reconstruction from loop k - 1.
    """
    outputs = []
    h = phi_t
    for _ in range(model.loops):
        f3_s, phi_s = model.student(h, model.slope)
        outputs.append((f3_s, phi_s))
        h = phi_s
    return outputs


def reconstruction_loss(
    outputs: list[tuple[Tensor, Tensor]], f3_t: Tensor, phi_t: Tensor, eps: float = 1e-8, weights=None
) -> Tensor:
    """Sum over loops of the two mean cosine distances.

    ``weights`` (one per batch element, summing to one) lets a batch that
    repeats samples be evaluated on its distinct samples only.
    """
    reduce = mean_all if weights is None else (lambda m: batch_weighted_mean(m, weights))
    terms = []
    for f3_s, phi_s in outputs:
        terms.append(reduce(cosine_distance_map(f3_s, f3_t, eps)))
        terms.append(reduce(cosine_distance_map(phi_s, phi_t, eps)))
    return add(*terms)


def training_loss(model: SirModel, x: Tensor) -> Tensor:
    f3_t, phi_t = teacher_forward(model, x)
    return reconstruction_loss(loop_forward(model, phi_t), f3_t, phi_t, model.eps)


def loss_and_grads(model: SirModel, x: Tensor) -> tuple[float, dict[str, np.ndarray]]:
    """One forward/backward pass; gradients keyed by student parameter name."""
    params = model.student_parameters()
    with Tape() as tape:
        loss = training_loss(model, x)
    grads = tape.backward(loss, params.values())
    return loss.item(), {name: grads[p] for name, p in params.items()}
