"""Single-level 2-D Haar wavelet analysis and synthesis.

The transform is orthonormal: each 2x2 block contributes one coefficient per
band, scaled by 1/2, so that the squared norm of the input equals the sum of
squared norms of the four bands.  Feature-map distillation uses the three
detail bands (LH, HL, HH); the low-pass band LL is carried along so the
transform stays invertible.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor

from .errors import InputError


@dataclass
class WaveletBands:
    """The four sub-bands of a single-level Haar decomposition.

    Each band has shape (B, C, H/2, W/2) for a source of shape (B, C, H, W).
    """

    ll: Tensor
    lh: Tensor
    hl: Tensor
    hh: Tensor

    def __post_init__(self):
        shapes = {t.shape for t in (self.ll, self.lh, self.hl, self.hh)}
        if len(shapes) != 1:
            raise InputError(f"wavelet bands must share one shape, got {shapes}")

    @property
    def detail(self) -> Tensor:
        """LH, HL and HH stacked along a new leading axis."""
        return torch.stack([self.lh, self.hl, self.hh])


def haar_decompose(x: Tensor) -> WaveletBands:
    """Split a feature map into orthonormal Haar sub-bands.

    For a 2x2 block [[a, b], [c, d]] the coefficients are
    LL = (a+b+c+d)/2, LH = (a+b-c-d)/2, HL = (a-b+c-d)/2, HH = (a-b-c+d)/2.

    Args:
        x: Tensor of shape (..., H, W) with H and W even.

    Returns:
        WaveletBands with per-band shape (..., H/2, W/2).
    """
    h, w = x.shape[-2:]
    if h % 2 or w % 2:
        raise InputError(f"Haar decomposition needs even spatial dims, got {h}x{w}")
    a = x[..., 0::2, 0::2]
    b = x[..., 0::2, 1::2]
    c = x[..., 1::2, 0::2]
    d = x[..., 1::2, 1::2]
    return WaveletBands(
        ll=(a + b + c + d) / 2,
        lh=(a + b - c - d) / 2,
        hl=(a - b + c - d) / 2,
        hh=(a - b - c + d) / 2,
    )


def haar_reconstruct(bands: WaveletBands) -> Tensor:
    """Invert :func:`haar_decompose` exactly (up to float round-off).

    Args:
        bands: Sub-bands of a single-level decomposition.

    Returns:
        Tensor of shape (..., 2*H, 2*W) given per-band shape (..., H, W).
    """
    ll, lh, hl, hh = bands.ll, bands.lh, bands.hl, bands.hh
    a = (ll + lh + hl + hh) / 2
    b = (ll + lh - hl - hh) / 2
    c = (ll - lh + hl - hh) / 2
    d = (ll - lh - hl + hh) / 2
    top = torch.stack((a, b), dim=-1).flatten(-2)
    bottom = torch.stack((c, d), dim=-1).flatten(-2)
    return torch.stack((top, bottom), dim=-2).flatten(-3, -2)
