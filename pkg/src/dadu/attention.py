"""Channel attention, spatial attention and the dual attention block.

The block gates an encoder/decoder feature pair of identical shape
``[n, C, h, w]``:

* channel attention pools each side globally (mean + max), sums the four
  pooled vectors and squashes ``w_c * merged_c`` through a sigmoid, giving
  one gate per channel;
* spatial attention builds ``[avg, max, 1x1 conv]`` maps across channels for
  each side, runs each through its own 7x7 convolution and squashes the sum,
  giving one gate per pixel;
* the block output is ``m_sp * (m_ch * E + m_ch * D)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor


def _fan_in_uniform(rng: np.random.Generator, shape: tuple, dtype) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class CamState:
    """Learnable per-channel weights, stored as ``[1, C, 1, 1]`` and initialised to 1."""

    def __init__(self, channels: int, dtype=T.DEFAULT_DTYPE):
        self.channel_weights = Tensor(np.ones((1, channels, 1, 1), dtype=dtype), requires_grad=True)

    @property
    def channels(self) -> int:
        return self.channel_weights.shape[1]

    def named_parameters(self, prefix: str = ""):
        yield prefix + "channel_weights", self.channel_weights


class SamState:
    """1x1 and 7x7 kernels for the encoder and decoder sides (independent)."""

    def __init__(self, channels: int, rng: Optional[np.random.Generator] = None,
                 dtype=T.DEFAULT_DTYPE):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.channels = channels

        def param(arr):
            return Tensor(arr, requires_grad=True)

        self.conv1x1_enc = param(_fan_in_uniform(rng, (1, channels, 1, 1), dtype))
        self.conv1x1_enc_bias = param(np.zeros(1, dtype=dtype))
        self.conv7x7_enc = param(_fan_in_uniform(rng, (1, 3, 7, 7), dtype))
        self.conv7x7_enc_bias = param(np.zeros(1, dtype=dtype))
        self.conv1x1_dec = param(_fan_in_uniform(rng, (1, channels, 1, 1), dtype))
        self.conv1x1_dec_bias = param(np.zeros(1, dtype=dtype))
        self.conv7x7_dec = param(_fan_in_uniform(rng, (1, 3, 7, 7), dtype))
        self.conv7x7_dec_bias = param(np.zeros(1, dtype=dtype))

    _ORDER = ("conv1x1_enc", "conv1x1_enc_bias", "conv7x7_enc", "conv7x7_enc_bias",
              "conv1x1_dec", "conv1x1_dec_bias", "conv7x7_dec", "conv7x7_dec_bias")

    def named_parameters(self, prefix: str = ""):
        for name in self._ORDER:
            yield prefix + name, getattr(self, name)


class DabState:
    def __init__(self, channels: int, rng: Optional[np.random.Generator] = None,
                 dtype=T.DEFAULT_DTYPE):
        self.cam = CamState(channels, dtype)
        self.sam = SamState(channels, rng, dtype)

    @property
    def channels(self) -> int:
        return self.cam.channels

    def named_parameters(self, prefix: str = ""):
        yield from self.cam.named_parameters(prefix + "cam.")
        yield from self.sam.named_parameters(prefix + "sam.")


@dataclass
class AttentionMaps:
    m_ch: Tensor
    m_sp: Tensor


def _check_pair(a: Tensor, b: Tensor, what: str) -> None:
    if a.data.ndim != 4 or a.shape != b.shape:
        raise ShapeError(f"{what}: encoder/decoder features must share a rank-4 shape, got {a.shape} and {b.shape}")


def channel_attention(f_enc: Tensor, f_dec: Tensor, state: CamState) -> Tensor:
    """Per-channel gate ``sigmoid(w_c * (avg E + max E + avg D + max D))``, shape ``[n, C, 1, 1]``."""
    _check_pair(f_enc, f_dec, "channel_attention")
    if f_enc.shape[1] != state.channels:
        raise ShapeError(f"channel_attention: features have {f_enc.shape[1]} channels, state has {state.channels}")
    merged_enc = T.add(T.global_avg_pool(f_enc), T.global_max_pool(f_enc))
    merged_dec = T.add(T.global_avg_pool(f_dec), T.global_max_pool(f_dec))
    merged = T.add(merged_enc, merged_dec)
    return T.sigmoid(T.mul(merged, state.channel_weights))


def _side_map(f: Tensor, k1: Tensor, b1: Tensor, k7: Tensor, b7: Tensor) -> Tensor:
    stacked = T.concat_channels([T.channelwise_avg(f), T.channelwise_max(f), T.conv2d(f, k1, b1)])
    return T.conv2d(stacked, k7, b7, padding=3)


def spatial_attention(f_ch_enc: Tensor, f_ch_dec: Tensor, state: SamState) -> Tensor:
    """Per-pixel gate of shape ``[n, 1, h, w]``."""
    _check_pair(f_ch_enc, f_ch_dec, "spatial_attention")
    if f_ch_enc.shape[1] != state.channels:
        raise ShapeError(f"spatial_attention: features have {f_ch_enc.shape[1]} channels, state has {state.channels}")
    m_enc = _side_map(f_ch_enc, state.conv1x1_enc, state.conv1x1_enc_bias,
                      state.conv7x7_enc, state.conv7x7_enc_bias)
    m_dec = _side_map(f_ch_dec, state.conv1x1_dec, state.conv1x1_dec_bias,
                      state.conv7x7_dec, state.conv7x7_dec_bias)
    return T.sigmoid(T.add(m_enc, m_dec))


def dab(f_enc: Tensor, f_dec: Tensor, state: DabState,
        identity: bool = False) -> tuple[Tensor, AttentionMaps]:
    """Dual attention block.

    With ``identity=True`` both gates are replaced by ones, so the output is
    the plain sum ``f_enc + f_dec``. The network uses this for its no-attention
    ablation.
    """
    _check_pair(f_enc, f_dec, "dab")
    n, c, h, w = f_enc.shape
    if identity:
        dt = f_enc.dtype
        maps = AttentionMaps(Tensor(np.ones((n, c, 1, 1), dt)), Tensor(np.ones((n, 1, h, w), dt)))
        return T.add(f_enc, f_dec), maps
    m_ch = channel_attention(f_enc, f_dec, state.cam)
    ch_enc = T.mul(m_ch, f_enc)
    ch_dec = T.mul(m_ch, f_dec)
    m_sp = spatial_attention(ch_enc, ch_dec, state.sam)
    out = T.mul(m_sp, T.add(ch_enc, ch_dec))
    return out, AttentionMaps(m_ch, m_sp)
