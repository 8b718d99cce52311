"""Alternating optimization of the radiance field, rain predictor and rain embeddings.

Iterations are warm-up steps (field only, rays drawn across all views) for the
first ``warmup_fraction`` of ``total_iters`` and joint network steps afterwards.
An epoch is ``n`` joint steps (one expected visit per view); each epoch ends
with ``latent_updates_per_epoch`` Langevin updates of the scene and view states,
the first ``langevin_noisy_updates`` of them noisy. Latent updates do not count
toward ``total_iters``.

All randomness after initialization comes from one numpy ``Generator`` owned by
the state, so a run is reproducible from its seed and resumable from a
checkpoint.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from . import dataset as ds
from .dirgrad import DominantDirections, NoDominantDirectionError, estimate_angles
from .losses import LossWeights, loss_rec, total_loss
from .rainpred import RainEmbedding, RainPredictor, crop_rain_patch, predict_rain_map
from .renderer import EncodingConfig, NerfBackend, NerfParams, RadianceField, RenderConfig, render_batch

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    total_iters: int = 18000
    warmup_fraction: float = 0.5
    joint: bool = True  # False: every iteration is a warm-up step (plain field fitting)
    rays_per_batch: int = 4096
    patch_size: int = 64
    n_coarse: int = 64
    n_fine: int = 64
    pdf_floor: float = 1e-2
    lr_field_initial: float = 5e-4
    lr_field_joint: float = 1e-6
    lr_decay_iters: int | None = None  # warm-up lr reaches 0.1x initial after this many iterations
    lr_mlp: float = 1e-3
    lr_cnn: float = 1e-4
    latent_updates_per_epoch: int = 5
    langevin_noisy_updates: int = 2
    langevin_step: float = 1e-2
    langevin_temperature: float = 0.1
    angle_refresh_every: int = 200
    num_bins: int = 60
    k_angles: int = 1
    suppression: float = 50.0
    eps: float = 1e-6
    weights: LossWeights = LossWeights()
    field_depth: int = 4
    field_width: int = 128
    freqs_position: int = 8
    freqs_direction: int = 4
    embed_init_std: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.warmup_fraction < 1:
            raise ValueError("warmup_fraction must lie in (0, 1)")
        if self.patch_size ** 2 != self.rays_per_batch:
            raise ValueError("rays_per_batch must equal patch_size squared")
        rates = (self.lr_field_initial, self.lr_field_joint, self.lr_mlp, self.lr_cnn)
        if min(rates) <= 0:
            raise ValueError("learning rates must be positive")
        if self.total_iters < 0:
            raise ValueError("total_iters must be nonnegative")
        if isinstance(self.weights, dict):
            object.__setattr__(self, "weights", LossWeights(**self.weights))

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        """Reduced configuration that trains a small scene on one CPU core in minutes."""
        base = dict(total_iters=4000, rays_per_batch=576, patch_size=24, n_coarse=32, n_fine=32,
                    field_depth=4, field_width=64, freqs_position=6, freqs_direction=2, lr_field_joint=1e-4)
        base.update(overrides)
        return cls(**base)

    @property
    def warmup_iters(self) -> int:
        return self.total_iters if not self.joint else int(round(self.warmup_fraction * self.total_iters))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, values: dict) -> "TrainConfig":
        values = dict(values)
        if "weights" in values and isinstance(values["weights"], dict):
            values["weights"] = LossWeights(**values["weights"])
        return cls(**values)

    @classmethod
    def from_mapping(cls, values: dict[str, str], base: "TrainConfig | None" = None) -> "TrainConfig":
        """Build from flat key=value strings; ``lambda1``..``lambda4`` set the loss weights."""
        base = base or cls()
        known = {f.name: f for f in fields(cls)}
        weight_keys = {"lambda1": "likelihood", "lambda2": "reconstruction", "lambda3": "tv",
                       "lambda4": "gradient_rotation"}
        kwargs, weights = {}, asdict(base.weights)
        for key, raw in values.items():
            if key in weight_keys:
                weights[weight_keys[key]] = float(raw)
            elif key in known and key != "weights":
                current = getattr(base, key)
                if isinstance(current, bool):
                    kwargs[key] = str(raw).strip().lower() in ("1", "true", "yes", "on")
                elif isinstance(current, int):
                    kwargs[key] = int(float(raw))
                elif current is None:
                    kwargs[key] = None if str(raw).lower() in ("", "none") else int(float(raw))
                else:
                    kwargs[key] = float(raw)
            else:
                raise ValueError(f"unknown training key {key!r}")
        return replace(base, weights=LossWeights(**weights), **kwargs)


@dataclass
class TrainState:
    config: TrainConfig
    params: NerfParams
    predictor: RainPredictor
    embedding: RainEmbedding
    opt_field: torch.optim.Adam
    opt_predictor: torch.optim.Adam
    rng: np.random.Generator
    iter: int = 0
    history: list = field(default_factory=list)
    residual_cache: torch.Tensor | None = None
    cache: dict = field(default_factory=dict, repr=False)

    @property
    def render_config(self) -> RenderConfig:
        return self.render_config_for(None)

    def render_config_for(self, dataset: ds.SceneDataset | None) -> RenderConfig:
        near, far = dataset.near_far if dataset is not None else self.cache.get("near_far", ds.DEFAULT_NEAR_FAR)
        c = self.config
        return RenderConfig(near=near, far=far, n_coarse=c.n_coarse, n_fine=c.n_fine, pdf_floor=c.pdf_floor)


def build_modules(config: TrainConfig, camera_vectors: torch.Tensor):
    """Fresh networks, embedding and optimizers, initialized from ``config.seed``."""
    torch.manual_seed(config.seed)
    enc = EncodingConfig(config.freqs_position, config.freqs_direction, True)
    params = NerfParams(RadianceField(enc, config.field_depth, config.field_width),
                        RadianceField(enc, config.field_depth, config.field_width))
    predictor = RainPredictor()
    gen = torch.Generator().manual_seed(config.seed + 1)
    embedding = RainEmbedding(camera_vectors, config.embed_init_std, gen)
    opt_field = torch.optim.Adam(list(params.coarse.parameters()) + list(params.fine.parameters()),
                                 lr=config.lr_field_initial)
    opt_predictor = torch.optim.Adam([
        {"params": list(predictor.mlp_parameters()), "lr": config.lr_mlp},
        {"params": list(predictor.cnn_parameters()), "lr": config.lr_cnn},
    ])
    return params, predictor, embedding, opt_field, opt_predictor


def init_state(config: TrainConfig, dataset: ds.SceneDataset) -> TrainState:
    vectors = RainEmbedding.from_cameras(dataset.cameras).camera_vectors
    params, predictor, embedding, opt_f, opt_p = build_modules(config, vectors)
    state = TrainState(config, params, predictor, embedding, opt_f, opt_p, np.random.default_rng(config.seed))
    return state


# ---------------------------------------------------------------------------
# helpers


def _scene_tensors(state: TrainState, dataset: ds.SceneDataset):
    key = id(dataset)
    if state.cache.get("dataset_id") != key:
        origins, dirs = ds.all_rays(dataset)
        state.cache.update(
            dataset_id=key,
            origins=torch.as_tensor(origins, dtype=torch.float32),
            dirs=torch.as_tensor(dirs, dtype=torch.float32),
            images=torch.tensor(np.asarray(dataset.images), dtype=torch.float32),
            near_far=dataset.near_far,
        )
    return state.cache


def field_lr(config: TrainConfig, it: int) -> float:
    if it >= config.warmup_iters:
        return config.lr_field_joint
    decay = config.lr_decay_iters or config.total_iters or 1
    return config.lr_field_initial * 0.1 ** (it / decay)


def _set_lr(opt: torch.optim.Optimizer, lr: float) -> None:
    for group in opt.param_groups:
        group["lr"] = lr


def _check_finite(state: TrainState, value: torch.Tensor, what: str) -> None:
    if not torch.isfinite(value).all():
        raise TrainingDiverged(f"non-finite {what} at iteration {state.iter}")


def render_view(state: TrainState, dataset: ds.SceneDataset, view_index: int) -> np.ndarray:
    """Deterministic fine render of one full view (no rng consumed)."""
    t = _scene_tensors(state, dataset)
    backend = NerfBackend(state.render_config_for(dataset))
    return backend.render_image(state.params, t["origins"][view_index].numpy(), t["dirs"][view_index].numpy())


def refresh_residuals(state: TrainState, dataset: ds.SceneDataset) -> None:
    images = _scene_tensors(state, dataset)["images"]
    renders = torch.stack([torch.as_tensor(render_view(state, dataset, i), dtype=torch.float32)
                           for i in range(dataset.n)])
    state.residual_cache = images - renders


def patch_angles(state: TrainState, patch: ds.PatchSample) -> DominantDirections | None:
    if state.residual_cache is None:
        return None
    r0, c0 = patch.top_left
    res = state.residual_cache[patch.view_index, r0:r0 + patch.size, c0:c0 + patch.size]
    c = state.config
    try:
        return estimate_angles(res.numpy(), c.k_angles, c.suppression, c.num_bins)
    except NoDominantDirectionError:
        log.debug("no dominant direction for patch %s of view %d", patch.top_left, patch.view_index)
        return None


def _record(state: TrainState, stage: str, values: dict, angles: DominantDirections | None = None) -> None:
    row = {"iter": state.iter, "stage": stage, "ll": None, "rec": None, "tv": None, "agr": None, "total": None,
           "theta_deg": None}
    row.update(values)
    if angles is not None:
        row["theta_deg"] = ";".join(f"{math.degrees(a):.1f}" for a in angles.angles_rad)
    state.history.append(row)


def _patch_losses(state: TrainState, dataset: ds.SceneDataset, patch: ds.PatchSample, B_fine, B_coarse, R):
    I = torch.as_tensor(patch.target_pixels, dtype=B_fine.dtype)
    angles = patch_angles(state, patch)
    c = state.config
    breakdown = total_loss(I, B_fine, R, c.weights, angles, c.eps)
    loss = breakdown.total
    if B_coarse is not None:
        loss = loss + c.weights.reconstruction * loss_rec(I, B_coarse, R)
    return loss, breakdown


def _render_patch(state: TrainState, dataset: ds.SceneDataset, patch: ds.PatchSample, grad: bool):
    o = torch.as_tensor(patch.rays.origins, dtype=torch.float32)
    d = torch.as_tensor(patch.rays.directions, dtype=torch.float32)
    with torch.set_grad_enabled(grad):
        coarse, fine = render_batch(state.params.coarse, state.params.fine, o, d,
                                    state.render_config_for(dataset), state.rng)
    s = patch.size
    return fine.color.reshape(s, s, 3), coarse.color.reshape(s, s, 3)


# ---------------------------------------------------------------------------
# steps


def warmup_step(state: TrainState, dataset: ds.SceneDataset) -> TrainState:
    c = state.config
    t = _scene_tensors(state, dataset)
    n, h, w = dataset.n, *dataset.hw
    idx = torch.as_tensor(state.rng.integers(0, n * h * w, size=c.rays_per_batch))
    o = t["origins"].reshape(-1, 3)[idx]
    d = t["dirs"].reshape(-1, 3)[idx]
    target = t["images"].reshape(-1, 3)[idx]
    _set_lr(state.opt_field, field_lr(c, state.iter))
    coarse, fine = render_batch(state.params.coarse, state.params.fine, o, d, state.render_config_for(dataset),
                                state.rng)
    loss = torch.mean((coarse.color - target) ** 2) + torch.mean((fine.color - target) ** 2)
    _check_finite(state, loss, "warm-up loss")
    state.opt_field.zero_grad(set_to_none=True)
    loss.backward()
    state.opt_field.step()
    _record(state, "warmup", {"total": float(loss.detach())})
    return state


def joint_step(state: TrainState, dataset: ds.SceneDataset) -> TrainState:
    """One network update of field and predictor on a random patch; embeddings stay fixed."""
    c = state.config
    h, w = dataset.hw
    view = int(state.rng.integers(0, dataset.n))
    patch = ds.sample_patch(dataset, view, c.patch_size, state.rng)
    B_fine, B_coarse = _render_patch(state, dataset, patch, grad=True)
    state.embedding.requires_grad_(False)
    try:
        R = crop_rain_patch(predict_rain_map(state.predictor, state.embedding, view, h, w), patch)
        loss, parts = _patch_losses(state, dataset, patch, B_fine, B_coarse, R)
        _check_finite(state, loss, "joint loss")
        _set_lr(state.opt_field, c.lr_field_joint)
        state.opt_field.zero_grad(set_to_none=True)
        state.opt_predictor.zero_grad(set_to_none=True)
        loss.backward()
        state.opt_field.step()
        state.opt_predictor.step()
    finally:
        state.embedding.requires_grad_(True)
    _record(state, "joint", parts.as_floats(), parts.dominant_angles_used)
    return state


def langevin_update(state: TrainState, dataset: ds.SceneDataset, noisy: bool) -> TrainState:
    """Gradient step on (s, v_i) for a random patch, plus sqrt(2 eta) * tau Gaussian noise when ``noisy``."""
    c = state.config
    h, w = dataset.hw
    view = int(state.rng.integers(0, dataset.n))
    patch = ds.sample_patch(dataset, view, c.patch_size, state.rng)
    B_fine, _ = _render_patch(state, dataset, patch, grad=False)
    emb = state.embedding
    R = crop_rain_patch(predict_rain_map(state.predictor, emb, view, h, w), patch)
    _, parts = _patch_losses(state, dataset, patch, B_fine, None, R)
    _check_finite(state, parts.total, "latent loss")
    g_s, g_v = torch.autograd.grad(parts.total, [emb.scene_state, emb.view_states])
    eta = c.langevin_step
    with torch.no_grad():
        emb.scene_state -= eta * g_s
        emb.view_states[view] -= eta * g_v[view]
        if noisy:
            scale = math.sqrt(2.0 * eta) * c.langevin_temperature
            noise = state.rng.standard_normal(emb.scene_state.shape[0] + emb.view_states.shape[1])
            noise = torch.as_tensor(noise, dtype=emb.scene_state.dtype) * scale
            emb.scene_state += noise[:emb.scene_state.shape[0]]
            emb.view_states[view] += noise[emb.scene_state.shape[0]:]
    _record(state, "langevin" if noisy else "latent", parts.as_floats(), parts.dominant_angles_used)
    return state


def latent_round(state: TrainState, dataset: ds.SceneDataset) -> None:
    c = state.config
    for k in range(c.latent_updates_per_epoch):
        langevin_update(state, dataset, noisy=k < c.langevin_noisy_updates)


def train(config: TrainConfig, dataset: ds.SceneDataset, state: TrainState | None = None,
          out_dir: str | Path | None = None, checkpoint_every: int = 0,
          until: int | None = None, on_iter: Callable[[TrainState], None] | None = None) -> TrainState:
    """Run (or resume) training up to ``until`` (default ``config.total_iters``) iterations."""
    from .checkpoint import save_checkpoint

    state = state or init_state(config, dataset)
    if state.config != config:
        raise ValueError("state was built with a different configuration")
    stop = config.total_iters if until is None else min(until, config.total_iters)
    out = Path(out_dir) if out_dir is not None else None
    warm = config.warmup_iters
    try:
        while state.iter < stop:
            it = state.iter
            if it < warm:
                warmup_step(state, dataset)
            else:
                joint_index = it - warm
                if state.residual_cache is None or (config.angle_refresh_every > 0
                                                    and joint_index % config.angle_refresh_every == 0):
                    refresh_residuals(state, dataset)
                joint_step(state, dataset)
                if (joint_index + 1) % dataset.n == 0:
                    latent_round(state, dataset)
            state.iter = it + 1
            if state.iter % 100 == 0:
                last = state.history[-1]
                log.info("iter %d/%d stage=%s total=%.6g", state.iter, config.total_iters, last["stage"],
                         last["total"])
            if on_iter is not None:
                on_iter(state)
            if out is not None and checkpoint_every > 0 and state.iter % checkpoint_every == 0:
                save_checkpoint(state, out / f"checkpoint_{state.iter:06d}.rnsc")
    except TrainingDiverged:
        if out is not None:
            save_checkpoint(state, out / "diverged.rnsc")
        raise
    if out is not None:
        save_checkpoint(state, out / "checkpoint_final.rnsc")
        write_loss_csv(state.history, out / "losses.csv")
    return state


LOSS_COLUMNS = ("iter", "ll", "rec", "tv", "agr", "total", "theta_deg", "stage")


def write_loss_csv(history: list[dict], path: str | Path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(LOSS_COLUMNS)
        for row in history:
            writer.writerow(["" if row.get(k) is None else row[k] for k in LOSS_COLUMNS])


def predict_rain_maps(state: TrainState, dataset: ds.SceneDataset) -> np.ndarray:
    h, w = dataset.hw
    with torch.no_grad():
        return np.stack([predict_rain_map(state.predictor, state.embedding, i, h, w).values.double().numpy()
                         for i in range(dataset.n)])
