"""Losses, importance-sampled ray batches, and the optimization loop.

Per batch, half of the rays come from the eroded foreground, three
eighths from the near-silhouette band and one eighth from the background
(including padded off-image rays whose targets are exactly zero). The
color term is the HDR-compressing weighted L2 on tonemapped error; rays
whose pixel lies outside the object mask additionally contribute an L2
penalty on every density sampled along them.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field as dc_field
from typing import Callable, Optional

import numpy as np

from . import autodiff as ad
from . import dataset as ds
from . import field as fm
from . import render as vr
from .autodiff import Var
from .config import TrainConfig
from .errors import InvalidInputError, NumericalError


def tonemapped_loss(pred, target, eps: float = 1e-3, weight=None):
    """Sum over entries of ((pred - target) / (sg(pred) + eps))^2.

    The weight is a stop-gradient of the prediction: it compresses HDR
    error like a tonemap but is constant for the backward pass. Pass
    `weight` to reuse a frozen weight array (finite-difference oracles
    must hold it fixed while probing). Returns a float for plain arrays,
    a Var when `pred` is a graph node.
    """
    pred_v = pred if isinstance(pred, Var) else ad.constant(np.asarray(pred, dtype=np.float64))
    target_a = np.asarray(target.value if isinstance(target, Var) else target)
    if np.any(pred_v.value < 0) or np.any(target_a < 0):
        raise InvalidInputError("tonemapped loss requires non-negative HDR inputs")
    if weight is None:
        weight = 1.0 / (pred_v.value.astype(np.float64) + eps) ** 2
    diff = ad.sub(pred_v, ad.constant(target_a.astype(pred_v.dtype)))
    loss = ad.reduce_sum(ad.mul(ad.mul(diff, diff), ad.constant(weight.astype(pred_v.dtype))))
    return loss if isinstance(pred, Var) else float(loss.value)


def mask_loss(sigma):
    """Mean of sigma^2 over the supplied background-ray samples."""
    sigma_v = sigma if isinstance(sigma, Var) else ad.constant(np.asarray(sigma, dtype=np.float64))
    if np.any(sigma_v.value < 0):
        raise InvalidInputError("densities must be non-negative")
    n = sigma_v.value.size
    loss = ad.mul(ad.reduce_sum(ad.mul(sigma_v, sigma_v)), 1.0 / n)
    return loss if isinstance(sigma, Var) else float(loss.value)


def _masked_mean_square(sigma: Var, row_is_bg: np.ndarray) -> Var:
    """mask_loss restricted to rows flagged background, as a batch op:
    sigma is (B, N), the mean runs over the flagged rows' samples."""
    n_bg = int(row_is_bg.sum())
    if n_bg == 0:
        return ad.constant(np.zeros((), dtype=sigma.dtype))
    scale = (row_is_bg.astype(np.float64) / (n_bg * sigma.value.shape[1]))[:, None]
    return ad.reduce_sum(ad.mul(ad.mul(sigma, sigma), ad.constant(scale.astype(sigma.dtype))))


@dataclass
class RayBatch:
    origins: np.ndarray
    dirs: np.ndarray
    nears: np.ndarray
    fars: np.ndarray
    uv: np.ndarray
    targets: np.ndarray      # clamped at the HDR cutoff; zero off the object
    region: np.ndarray       # dataset label codes per ray
    omega: np.ndarray
    image_ids: np.ndarray
    is_object: np.ndarray    # pixel lies inside the foreground mask


@dataclass
class LossReport:
    step: int
    total: float
    color: float
    mask: float
    color_coarse: float
    color_fine: float
    mask_coarse: float
    mask_fine: float


@dataclass
class TrainState:
    step: int
    adam: ad.AdamState
    rng: np.random.Generator
    history: list = dc_field(default_factory=list)


def _fallback_entry(dataset: ds.OlatDataset, light_idx: int, label) -> int:
    """First train entry (same light preferred) whose pool is non-empty."""
    lens = dataset.pool_lens[label]
    same = [i for i in dataset.train_ids
            if dataset.entries[i].light_idx == light_idx
            and lens[dataset.entry_camkey[i]] > 0]
    if same:
        return same[0]
    any_ = [i for i in dataset.train_ids if lens[dataset.entry_camkey[i]] > 0]
    if any_:
        return any_[0]
    raise InvalidInputError(f"no training image has pixels in region {label!r}")


def sample_ray_batch(dataset: ds.OlatDataset, batch: int,
                     rng: np.random.Generator, cfg: Optional[TrainConfig] = None) -> RayBatch:
    """Exact 1/2 foreground, 3/8 near-silhouette, 1/8 background split.
    Background draws include padded off-image rays. Deterministic given rng."""
    if batch % 8 != 0:
        raise InvalidInputError(f"batch size must be divisible by 8, got {batch}")
    if not dataset.train_ids:
        raise InvalidInputError("dataset has no training images")
    counts = ((ds.FOREGROUND, batch // 2), (ds.SILHOUETTE, 3 * batch // 8),
              ("bg_union", batch // 8))
    train_ids = np.asarray(dataset.train_ids)

    eid_parts, pix_parts, region_parts = [], [], []
    h_img, w_img = dataset.mask_stack.shape[1:]
    for label, count in counts:
        eids = train_ids[rng.integers(0, len(train_ids), size=count)]
        u = rng.random(count)
        camkeys = dataset.entry_camkey[eids]
        lens = dataset.pool_lens[label][camkeys]
        for k in np.nonzero(lens == 0)[0]:  # documented fallback, rare
            eids[k] = _fallback_entry(dataset, dataset.entries[eids[k]].light_idx, label)
            camkeys[k] = dataset.entry_camkey[eids[k]]
            lens[k] = dataset.pool_lens[label][camkeys[k]]
        idx = (u * lens).astype(np.int64)
        pix = np.zeros((count, 2), dtype=np.int64)
        for ck in np.unique(camkeys):
            sel = camkeys == ck
            pix[sel] = dataset.pools[label][ck][idx[sel]]
        if label == "bg_union":
            inside = ((pix[:, 0] >= 0) & (pix[:, 0] < h_img)
                      & (pix[:, 1] >= 0) & (pix[:, 1] < w_img))
            region_parts.append(np.where(inside, ds.BACKGROUND, ds.PADDED).astype(np.uint8))
        else:
            region_parts.append(np.full(count, label, dtype=np.uint8))
        eid_parts.append(eids)
        pix_parts.append(pix)

    entry_ids = np.concatenate(eid_parts)
    pix = np.concatenate(pix_parts)  # (B, 2) as (row, col), possibly off-image
    region = np.concatenate(region_parts)
    uv = np.stack([pix[:, 1] + 0.5, pix[:, 0] + 0.5], axis=1)
    camkeys = dataset.entry_camkey[entry_ids]

    b = entry_ids.shape[0]
    dirs = np.zeros((b, 3))
    for ck in np.unique(camkeys):
        sel = camkeys == ck
        dirs[sel] = ds.backproject_dirs(dataset.cam_list[ck], uv[sel])
    origins = dataset.cam_centers[camkeys]
    if cfg is not None and cfg.near is not None and cfg.far is not None:
        nears = np.full(b, cfg.near)
        fars = np.full(b, cfg.far)
    else:
        nears = dataset.cam_near[camkeys]
        fars = dataset.cam_far[camkeys]
    omega = dataset.entry_omega[entry_ids]

    inside = ((pix[:, 0] >= 0) & (pix[:, 0] < h_img)
              & (pix[:, 1] >= 0) & (pix[:, 1] < w_img))
    rows = np.clip(pix[:, 0], 0, h_img - 1)
    cols = np.clip(pix[:, 1], 0, w_img - 1)
    is_object = inside & dataset.mask_stack[camkeys, rows, cols]
    targets = np.where(is_object[:, None],
                       np.clip(dataset.image_stack[entry_ids, rows, cols].astype(np.float64),
                               0.0, dataset.manifest.hdr_cutoff),
                       0.0)
    return RayBatch(origins=origins, dirs=dirs, nears=nears, fars=fars, uv=uv,
                    targets=targets, region=region, omega=omega,
                    image_ids=entry_ids, is_object=is_object)


def _arch_from_config(cfg: TrainConfig) -> fm.ArchConfig:
    return fm.ArchConfig(depth=cfg.depth, width=cfg.width, skip_layer=cfg.skip_layer,
                         head_width=cfg.head_width, l_pos=cfg.l_pos, l_dir=cfg.l_dir)


def train_step(params: fm.FieldParams, state: TrainState, dataset: ds.OlatDataset,
               cfg: TrainConfig, rcfg: vr.RenderConfig) -> LossReport:
    """One batch-sample -> render -> loss -> backward -> Adam iteration."""
    batch = sample_ray_batch(dataset, cfg.batch, state.rng, cfg)
    tape = ad.Tape()
    pvars = fm.wrap_params(params, tape)
    out = vr.render_rays(params, pvars, batch.origins, batch.dirs,
                         batch.nears, batch.fars, batch.omega, rcfg, state.rng)
    n_rays = cfg.batch
    color_c = ad.mul(tonemapped_loss(out["coarse_rgb"], batch.targets, cfg.eps_tonemap),
                     1.0 / n_rays)
    color_f = ad.mul(tonemapped_loss(out["fine_rgb"], batch.targets, cfg.eps_tonemap),
                     1.0 / n_rays)
    bg_rows = ~batch.is_object
    mask_c = _masked_mean_square(out["sigma_coarse"], bg_rows)
    mask_f = _masked_mean_square(out["sigma_fine"], bg_rows)
    color = ad.add(color_c, color_f)
    mask_term = ad.add(mask_c, mask_f)
    total = ad.add(color, ad.mul(mask_term, cfg.lambda_mask))

    if not np.isfinite(total.value):
        raise NumericalError(f"non-finite loss at step {state.step}")
    grads = ad.backward(tape, total)
    grads_by_name = {}
    for name, var in pvars.items():
        g = grads[var.node_id]
        if not np.all(np.isfinite(g)):
            ad.backward(tape, total, check_finite=True)  # identify the op
            raise NumericalError(f"non-finite gradient for '{name}' at step {state.step}")
        grads_by_name[name] = g

    if cfg.steps > 1:
        frac = state.step / (cfg.steps - 1)
    else:
        frac = 0.0
    lr_t = cfg.lr * (cfg.lr_final / cfg.lr) ** frac
    ad.adam_step(state.adam, params.tensors, grads_by_name, lr=lr_t)
    state.step += 1

    # report terms in float64 so the decomposition identities are exact
    cc, cf = float(color_c.value), float(color_f.value)
    mc, mf = float(mask_c.value), float(mask_f.value)
    color_v = cc + cf
    mask_v = mc + mf
    return LossReport(step=state.step, total=color_v + cfg.lambda_mask * mask_v,
                      color=color_v, mask=mask_v,
                      color_coarse=cc, color_fine=cf, mask_coarse=mc, mask_fine=mf)


def train(dataset: ds.OlatDataset, cfg: TrainConfig, out_dir: Optional[str] = None,
          callback: Optional[Callable[[LossReport], None]] = None
          ) -> tuple[fm.FieldParams, TrainState, list[LossReport]]:
    """Run cfg.steps optimization steps; checkpoints land in out_dir.

    On a non-finite loss the last good parameters are written out before
    NumericalError propagates.
    """
    arch = _arch_from_config(cfg)
    params = fm.init_params(cfg.seed, arch)
    adam = ad.AdamState.for_params(params.tensors, lr=cfg.lr)
    state = TrainState(step=0, adam=adam, rng=np.random.default_rng(cfg.seed))
    rcfg = vr.RenderConfig(n_coarse=cfg.n_coarse, n_fine=cfg.n_fine,
                           near=cfg.near, far=cfg.far)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)

    for _ in range(cfg.steps):
        try:
            report = train_step(params, state, dataset, cfg, rcfg)
        except NumericalError:
            if out_dir:
                fm.save_checkpoint(params, os.path.join(out_dir, "last_good.prtg"))
            raise
        state.history.append(report)
        if callback is not None:
            callback(report)
        if out_dir and cfg.ckpt_every > 0 and state.step % cfg.ckpt_every == 0:
            tag = f"ckpt_{state.step:06d}"
            fm.save_checkpoint(params, os.path.join(out_dir, tag + ".prtg"))
            fm.save_adam_state(state.adam, arch, os.path.join(out_dir, tag + ".adam.prtg"))
    if out_dir:
        fm.save_checkpoint(params, os.path.join(out_dir, "field.prtg"))
        fm.save_adam_state(state.adam, arch, os.path.join(out_dir, "field.adam.prtg"))
        write_loss_history(state.history, os.path.join(out_dir, "loss_history.csv"))
    return params, state, state.history


def write_loss_history(history: list[LossReport], path: str) -> None:
    with open(path, "w") as f:
        f.write("step,total,color,mask,color_coarse,color_fine,mask_coarse,mask_fine\n")
        for r in history:
            f.write(f"{r.step},{r.total!r},{r.color!r},{r.mask!r},"
                    f"{r.color_coarse!r},{r.color_fine!r},{r.mask_coarse!r},{r.mask_fine!r}\n")
