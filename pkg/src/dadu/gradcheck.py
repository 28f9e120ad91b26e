"""Central finite-difference checks for every differentiable op, in float64.

Each check builds a scalar loss from a few float64 input tensors. The
analytic gradient from :func:`dadu.tensor.backward` is compared with
``(f(x + h) - f(x - h)) / 2h`` coordinate by coordinate. Ops that pick an
argmax get inputs with well-separated values so no perturbation flips a tie.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import tensor as T
from .attention import DabState, SamState, CamState, channel_attention, dab, spatial_attention
from .metrics import SupervisionWeights, deep_supervision_loss, dice_loss
from .network import DaduModel, ModelConfig
from .tensor import Tensor

STEP = 1e-4
TOLERANCE = 1e-3
# denominators below this are treated as this; keeps roundoff on ~0 gradients from dominating
ABS_FLOOR = 1e-6
MAX_SKIP_FRACTION = 0.75
F64 = np.float64


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    passed: bool
    worst: str = ""
    coords: int = 0
    skipped: int = 0


def _param(arr) -> Tensor:
    return Tensor(np.asarray(arr, dtype=F64), requires_grad=True)


def _weighted_sum(out: Tensor, weights: np.ndarray) -> Tensor:
    return T.sum_all(T.mul(out, Tensor(weights)))


def _spaced(rng: np.random.Generator, shape) -> np.ndarray:
    """Distinct values at least 0.01 apart, shuffled."""
    n = int(np.prod(shape))
    return (rng.permutation(n) * 0.01 - n * 0.005 + rng.uniform(0, 1e-3, n)).reshape(shape).astype(F64)


def gradient_check(loss_fn: Callable[[], Tensor], inputs: list[Tensor], name: str = "",
                   step: float = STEP, tol: float = TOLERANCE, max_coords: Optional[int] = None,
                   rng: Optional[np.random.Generator] = None, labels: Optional[list[str]] = None,
                   max_skip_fraction: float = MAX_SKIP_FRACTION) -> CheckResult:
    """Compare analytic and central-difference gradients of ``loss_fn`` w.r.t. ``inputs``.

    ``max_coords`` limits the coordinates probed per input (chosen with
    ``rng``); by default every coordinate is probed. A coordinate whose
    perturbation changes any relu mask or max selection is not differentiable
    over the probe interval and is skipped; more than ``max_skip_fraction``
    skipped coordinates fails the check.
    """
    for x in inputs:
        x.grad = None
    with T.record_branches() as base_branches, T.Tape() as tape:
        loss = loss_fn()
    base_branches = list(base_branches)
    T.backward(loss, tape)
    analytic = [np.zeros_like(x.data) if x.grad is None else x.grad.copy() for x in inputs]

    def probe():
        with T.record_branches() as branches:
            value = loss_fn().item()
        return value, branches == base_branches

    worst, worst_at, count, skipped = 0.0, "", 0, 0
    rng = rng or np.random.default_rng(0)
    for idx, (x, grad) in enumerate(zip(inputs, analytic)):
        flat = x.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        for i in coords:
            orig = flat[i]
            flat[i] = orig + step
            up, same_up = probe()
            flat[i] = orig - step
            down, same_down = probe()
            flat[i] = orig
            if not (same_up and same_down):
                skipped += 1
                continue
            numeric = (up - down) / (2 * step)
            a = grad.reshape(-1)[i]
            err = abs(a - numeric) / max(abs(a), abs(numeric), ABS_FLOOR)
            count += 1
            if err > worst:
                label = labels[idx] if labels else f"input{idx}"
                worst, worst_at = err, f"{label}[{i}] analytic={a:.6g} numeric={numeric:.6g}"
    passed = worst <= tol and skipped <= max_skip_fraction * (count + skipped)
    return CheckResult(name, float(worst), bool(passed), worst_at, count, skipped)


# ---------------------------------------------------------------------------
# Check definitions: each returns (loss_fn, inputs, labels)
# ---------------------------------------------------------------------------


def _late(name):
    """Look the op up at call time so a patched backward rule is what gets checked."""
    return lambda *args: getattr(T, name)(*args)


def _unary(op, shape, spaced=False, away_from_zero=False):
    def build(rng):
        data = _spaced(rng, shape) if spaced else rng.normal(size=shape)
        if away_from_zero:
            data = np.sign(data) * (np.abs(data) + 0.1)
        x = _param(data)
        out_shape = op(Tensor(x.data)).shape
        w = rng.normal(size=out_shape)
        return (lambda: _weighted_sum(op(x), w)), [x], ["x"]
    return build


def _conv(stride, padding, shape=(2, 3, 6, 6), kshape=(4, 3, 3, 3)):
    def build(rng):
        x, k, b = _param(rng.normal(size=shape)), _param(rng.normal(size=kshape) * 0.3), _param(rng.normal(size=kshape[0]))
        w = rng.normal(size=T.conv2d(Tensor(x.data), Tensor(k.data), stride=stride, padding=padding).shape)
        return (lambda: _weighted_sum(T.conv2d(x, k, b, stride=stride, padding=padding), w)), [x, k, b], ["x", "kernel", "bias"]
    return build


def _batchnorm(training):
    def build(rng):
        c = 3
        x = _param(rng.normal(size=(2, c, 4, 4)) * 2 + 1)
        gamma, beta = _param(rng.uniform(0.5, 1.5, c)), _param(rng.normal(size=c))
        rm, rv = rng.normal(size=c), rng.uniform(0.5, 2.0, c)
        w = rng.normal(size=x.shape)

        def fn():
            # fresh copies so repeated evaluation never sees drifting running stats
            return _weighted_sum(T.batchnorm2d(x, gamma, beta, rm.copy(), rv.copy(), training=training), w)
        return fn, [x, gamma, beta], ["x", "gamma", "beta"]
    return build


def _binary(op, sa, sb):
    def build(rng):
        a, b = _param(rng.normal(size=sa)), _param(rng.normal(size=sb))
        w = rng.normal(size=np.broadcast_shapes(sa, sb))
        return (lambda: _weighted_sum(op(a, b), w)), [a, b], ["a", "b"]
    return build


def _concat(rng):
    a, b = _param(rng.normal(size=(2, 1, 4, 4))), _param(rng.normal(size=(2, 2, 4, 4)))
    w = rng.normal(size=(2, 3, 4, 4))
    return (lambda: _weighted_sum(T.concat_channels([a, b]), w)), [a, b], ["a", "b"]


def _cam(rng):
    c = 3
    e, d = _param(_spaced(rng, (2, c, 4, 4))), _param(_spaced(rng, (2, c, 4, 4)))
    state = CamState(c, dtype=F64)
    state.channel_weights.data[...] = rng.uniform(0.05, 0.3, (1, c, 1, 1))
    w = rng.normal(size=(2, c, 1, 1))
    return (lambda: _weighted_sum(channel_attention(e, d, state), w)), \
        [e, d, state.channel_weights], ["enc", "dec", "channel_weights"]


def _sam_inputs(state):
    return [p for _, p in state.named_parameters()], [n for n, _ in state.named_parameters()]


def _sam(rng):
    c = 2
    e, d = _param(_spaced(rng, (1, c, 8, 8))), _param(_spaced(rng, (1, c, 8, 8)))
    state = SamState(c, rng, dtype=F64)
    w = rng.normal(size=(1, 1, 8, 8))
    params, names = _sam_inputs(state)
    return (lambda: _weighted_sum(spatial_attention(e, d, state), w)), [e, d] + params, ["enc", "dec"] + names


def _dab(rng):
    c = 2
    e, d = _param(_spaced(rng, (1, c, 6, 6))), _param(_spaced(rng, (1, c, 6, 6)))
    state = DabState(c, rng, dtype=F64)
    state.cam.channel_weights.data[...] = rng.uniform(0.05, 0.3, (1, c, 1, 1))
    w = rng.normal(size=(1, c, 6, 6))
    named = list(state.named_parameters())
    return (lambda: _weighted_sum(dab(e, d, state)[0], w)), \
        [e, d] + [p for _, p in named], ["enc", "dec"] + [n for n, _ in named]


def _random_onehot(rng, n, k, h, w):
    labels = rng.integers(0, k, size=(n, h, w))
    return Tensor((np.arange(k)[None, :, None, None] == labels[:, None]).astype(F64))


def _dice(rng):
    x = _param(rng.normal(size=(1, 2, 4, 4)))
    target = _random_onehot(rng, 1, 2, 4, 4)
    return (lambda: dice_loss(T.sigmoid(x), target)), [x], ["logits"]


def _deep_supervision(rng):
    parts = [_param(rng.normal(size=(1, 1, 1, 1))) for _ in range(4)]
    weights = SupervisionWeights(tuple(rng.uniform(0.1, 1.0, 3)))
    return (lambda: deep_supervision_loss(T.sigmoid(parts[0]), [T.sigmoid(p) for p in parts[1:]], weights)), \
        parts, ["main", "aux0", "aux1", "aux2"]


def _cam_sam_dice(rng):
    c = 2
    e, d = _param(_spaced(rng, (1, c, 4, 4))), _param(_spaced(rng, (1, c, 4, 4)))
    state = DabState(c, rng, dtype=F64)
    state.cam.channel_weights.data[...] = rng.uniform(0.05, 0.3, (1, c, 1, 1))
    target = _random_onehot(rng, 1, c, 4, 4)
    named = list(state.named_parameters())

    def fn():
        m_ch = channel_attention(e, d, state.cam)
        m_sp = spatial_attention(T.mul(m_ch, e), T.mul(m_ch, d), state.sam)
        return dice_loss(T.mul(m_sp, T.sigmoid(e)), target)
    return fn, [e, d] + [p for _, p in named], ["enc", "dec"] + [n for n, _ in named]


def _model(rng):
    cfg = ModelConfig(levels=2, base_channels=4, num_classes=3)
    model = DaduModel(cfg, seed=int(rng.integers(1 << 31)), dtype=F64)
    x = Tensor(rng.uniform(0, 1, size=(2, 1, 8, 8)))
    target = _random_onehot(rng, 2, 3, 8, 8)
    weights = SupervisionWeights.uniform(cfg.supervision_paths, 0.5)
    # edge maps are a stop-gradient input; hold them at their nominal value
    edges = model.forward(x, training=True).edges
    named = list(model.named_parameters())

    def fn():
        out = model.forward(x, training=True, edges=edges)
        return deep_supervision_loss(dice_loss(out.main, target),
                                     [dice_loss(a, target) for a in out.aux], weights)
    return fn, [p for _, p in named], [n for n, _ in named]


CHECKS: dict[str, tuple[Callable, Optional[int]]] = {
    "conv2d": (_conv(1, 1), None),
    "conv2d_strided": (_conv(2, 1, shape=(1, 2, 7, 7), kshape=(3, 2, 3, 3)), None),
    "conv2d_1x1": (_conv(1, 0, kshape=(4, 3, 1, 1)), None),
    "maxpool2d": (_unary(_late("maxpool2d"), (2, 2, 6, 6), spaced=True), None),
    "maxpool2d_odd": (_unary(_late("maxpool2d"), (1, 2, 5, 7), spaced=True), None),
    "global_avg_pool": (_unary(_late("global_avg_pool"), (2, 3, 5, 5)), None),
    "global_max_pool": (_unary(_late("global_max_pool"), (2, 3, 5, 5), spaced=True), None),
    "channelwise_avg": (_unary(_late("channelwise_avg"), (2, 3, 5, 5)), None),
    "channelwise_max": (_unary(_late("channelwise_max"), (2, 3, 5, 5), spaced=True), None),
    "batchnorm2d_train": (_batchnorm(True), None),
    "batchnorm2d_eval": (_batchnorm(False), None),
    "relu": (_unary(_late("relu"), (2, 3, 4, 4), away_from_zero=True), None),
    "sigmoid": (_unary(_late("sigmoid"), (2, 3, 4, 4)), None),
    "mul": (_binary(_late("mul"), (2, 3, 4, 4), (2, 3, 4, 4)), None),
    "mul_channel_broadcast": (_binary(_late("mul"), (2, 3, 1, 1), (2, 3, 4, 4)), None),
    "mul_spatial_broadcast": (_binary(_late("mul"), (2, 3, 4, 4), (2, 1, 4, 4)), None),
    "add": (_binary(_late("add"), (2, 3, 4, 4), (2, 3, 4, 4)), None),
    "add_broadcast": (_binary(_late("add"), (2, 3, 4, 4), (2, 1, 4, 4)), None),
    "concat_channels": (_concat, None),
    "slice_channels": (_unary(lambda x: T.slice_channels(x, 1, 3), (2, 4, 3, 3)), None),
    "upsample_bilinear": (_unary(_late("upsample_bilinear"), (1, 2, 4, 5)), None),
    "upsample_bilinear_x4": (_unary(lambda x: T.upsample_bilinear(x, 4), (1, 1, 3, 3)), None),
    "channel_attention": (_cam, None),
    "spatial_attention": (_sam, None),
    "dab": (_dab, None),
    "dice_loss": (_dice, None),
    "deep_supervision_loss": (_deep_supervision, None),
    "cam_sam_dice": (_cam_sam_dice, None),
    "model": (_model, 12),
}


def run_check(name: str, seed: int = 0) -> CheckResult:
    if name not in CHECKS:
        raise KeyError(f"unknown gradient check {name!r}; known: {', '.join(CHECKS)}")
    build, max_coords = CHECKS[name]
    rng = np.random.default_rng([seed, sum(name.encode())])
    fn, inputs, labels = build(rng)
    return gradient_check(fn, inputs, name, max_coords=max_coords, rng=rng, labels=labels)


def run_suite(names=None, seed: int = 0) -> list[CheckResult]:
    return [run_check(n, seed) for n in (names or list(CHECKS))]
