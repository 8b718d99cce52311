"""Rain prediction: learnable rain embeddings decoded to a per-view rain map.

The embedding for view i is ``[s; v_i; p_i]`` with a shared scene state ``s``
(128), a per-view state ``v_i`` (64) and fixed camera features ``p_i`` (16).
A three-layer MLP maps it to 1024 values, reshaped to a 32x32 feature map and
decoded by six 3x3 convolutions with nearest-neighbour 2x upsampling to a
nonnegative RGB map, center-cropped to the image size.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from . import dataset as ds

SCENE_DIM = 128
VIEW_DIM = 64
CAMERA_DIM = 16
LATENT_DIM = 1024
BASE_RES = 32
DECODER_CHANNELS = (1, 32, 32, 16, 16, 8, 3)
UPSAMPLE_SLOTS = (1, 3, 5)  # stage indices (0-based) that may be preceded by 2x upsampling


class DecoderConfigError(ValueError):
    pass


def camera_features(record: ds.CameraRecord, scene_radius: float) -> np.ndarray:
    """16 fixed numbers per camera: unit-box position (3), rotation columns (6), focal/aspect (2), zeros (5)."""
    rot = ds.euler_to_matrix(record.rotation_euler_deg)
    pos = np.asarray(record.position, dtype=np.float64) / (scene_radius if scene_radius > 0 else 1.0)
    focal = record.focal_length_mm / record.horizontal_aperture_mm
    aspect = record.vertical_aperture_mm / record.horizontal_aperture_mm
    out = np.zeros(CAMERA_DIM)
    out[0:3] = pos
    out[3:6] = rot[:, 0]
    out[6:9] = rot[:, 1]
    out[9] = focal
    out[10] = aspect
    return out


class RainEmbedding(nn.Module):
    """Scene state ``s``, view states ``v`` (learnable) and camera features ``p`` (frozen buffer)."""

    def __init__(self, camera_vectors: torch.Tensor, init_std: float = 0.01,
                 generator: torch.Generator | None = None):
        super().__init__()
        camera_vectors = torch.as_tensor(camera_vectors)
        n, dim = camera_vectors.shape
        if dim != CAMERA_DIM:
            raise ValueError(f"camera vectors must have {CAMERA_DIM} entries, got {dim}")
        dtype = camera_vectors.dtype
        self.scene_state = nn.Parameter(torch.randn(SCENE_DIM, generator=generator, dtype=dtype) * init_std)
        self.view_states = nn.Parameter(torch.randn(n, VIEW_DIM, generator=generator, dtype=dtype) * init_std)
        self.register_buffer("camera_vectors", camera_vectors.clone())

    @classmethod
    def from_cameras(cls, cameras: Sequence[ds.CameraRecord], init_std: float = 0.01,
                     generator: torch.Generator | None = None, dtype=torch.float32) -> "RainEmbedding":
        radius = max(float(np.linalg.norm(c.position)) for c in cameras)
        p = np.stack([camera_features(c, radius) for c in cameras])
        return cls(torch.as_tensor(p, dtype=dtype), init_std, generator)

    @property
    def n(self) -> int:
        return self.view_states.shape[0]


def assemble_embedding(embedding: RainEmbedding, view_index: int) -> torch.Tensor:
    if not 0 <= view_index < embedding.n:
        raise IndexError(f"view {view_index} out of range for {embedding.n} views")
    return torch.cat([embedding.scene_state, embedding.view_states[view_index],
                      embedding.camera_vectors[view_index]])


def upsample_count(h: int, w: int) -> int:
    """Number of 2x doublings from the 32x32 base needed to cover an h x w map."""
    need = max(h, w)
    k = max(0, math.ceil(math.log2(need / BASE_RES))) if need > BASE_RES else 0
    if k > len(UPSAMPLE_SLOTS):
        raise DecoderConfigError(
            f"{h}x{w} exceeds the decoder ladder maximum of {BASE_RES * 2 ** len(UPSAMPLE_SLOTS)}")
    return k


class RainPredictor(nn.Module):
    def __init__(self, hidden: int = 128, output_bias: float = -3.0, negative_slope: float = 0.2):
        super().__init__()
        in_dim = SCENE_DIM + VIEW_DIM + CAMERA_DIM
        self.mlp = nn.ModuleList([nn.Linear(in_dim, hidden), nn.Linear(hidden, hidden), nn.Linear(hidden, LATENT_DIM)])
        chans = DECODER_CHANNELS
        self.cnn = nn.ModuleList([nn.Conv2d(chans[k], chans[k + 1], 3, padding=1) for k in range(6)])
        self.negative_slope = negative_slope
        with torch.no_grad():
            self.cnn[-1].bias.fill_(output_bias)

    def latent(self, z: torch.Tensor) -> torch.Tensor:
        for k, layer in enumerate(self.mlp):
            z = layer(z)
            if k < len(self.mlp) - 1:
                z = F.leaky_relu(z, self.negative_slope)
        return z

    def decode(self, latent: torch.Tensor, h: int, w: int) -> torch.Tensor:
        """(..., 1024) latent -> (..., h, w, 3) nonnegative map."""
        k = upsample_count(h, w)
        slots = set(UPSAMPLE_SLOTS[len(UPSAMPLE_SLOTS) - k:])
        x = latent.reshape(-1, 1, BASE_RES, BASE_RES)
        for stage, conv in enumerate(self.cnn):
            if stage in slots:
                x = F.interpolate(x, scale_factor=2, mode="nearest")
            x = conv(x)
            x = F.leaky_relu(x, self.negative_slope) if stage < len(self.cnn) - 1 else F.softplus(x)
        size = BASE_RES * 2 ** k
        r0, c0 = (size - h) // 2, (size - w) // 2
        x = x[..., r0:r0 + h, c0:c0 + w]
        return x.permute(0, 2, 3, 1).reshape(*latent.shape[:-1], h, w, 3)

    def forward(self, z: torch.Tensor, h: int, w: int) -> torch.Tensor:
        return self.decode(self.latent(z), h, w)

    def mlp_parameters(self):
        return self.mlp.parameters()

    def cnn_parameters(self):
        return self.cnn.parameters()


@dataclass
class RainMap:
    values: torch.Tensor  # (h, w, 3)
    view_index: int


def predict_rain_map(params: RainPredictor, embedding: RainEmbedding, view_index: int, h: int, w: int) -> RainMap:
    z = assemble_embedding(embedding, view_index)
    return RainMap(params(z, h, w), view_index)


def crop_rain_patch(rain_map: RainMap | torch.Tensor, patch: ds.PatchSample) -> torch.Tensor:
    values = rain_map.values if isinstance(rain_map, RainMap) else rain_map
    r0, c0 = patch.top_left
    h, w = values.shape[:2]
    if r0 < 0 or c0 < 0 or r0 + patch.size > h or c0 + patch.size > w:
        raise IndexError(f"patch at {patch.top_left} of size {patch.size} leaves the {h}x{w} map")
    return values[r0:r0 + patch.size, c0:c0 + patch.size]
