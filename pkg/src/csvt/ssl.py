"""Local-to-global self-distillation pretraining.

A student and an EMA teacher share the CSVT backbone plus a projection
head. The teacher sees the two global views; the student sees every view.
The loss is the cross-entropy between the centred, sharpened teacher
distribution and the student distribution over all pairs of distinct views.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .data import sample_crop_box
from .fileio import atomic_write_csv, atomic_write_text
from .model import CsvtConfig, CsvtModel, no_decay_names, trunc_normal
from .tensor import NonFiniteError, Tensor
from .tensor.checkpoint import save as save_checkpoint
from .tensor.image import bilinear_resize, gaussian_blur
from .tensor.optim import AdamW, clip_grad_norm, cosine_schedule, warmup_cosine

LAMBDA_START = 0.996
LOSS_LOG_HEADER = ("step", "epoch", "lr", "wd", "lambda", "loss", "teacher_entropy")


@dataclass
class SslConfig:
    epochs: int = 100
    batch_size: int = 64
    lr: float = 5e-4
    min_lr: float = 1e-6
    warmup_epochs: int = 10
    wd_start: float = 0.04
    wd_end: float = 0.4
    teacher_temp: float = 0.04
    student_temp: float = 0.1
    center_momentum: float = 0.9
    centering: bool = True
    local_views: int = 6
    global_size: int = 224
    local_size: int = 96
    global_scale: tuple = (0.5, 1.0)
    local_scale: tuple = (0.05, 0.5)
    head_hidden: int = 512
    head_bottleneck: int = 256
    head_out: int = 256
    clip_grad: float = 3.0
    # backbone output fed to the projection head: "mean" of the patch tokens
    # or the "cls" token
    pool: str = "mean"
    seed: int = 0

    def __post_init__(self):
        if self.pool not in ("mean", "cls"):
            raise ValueError(f"pool must be 'mean' or 'cls', got {self.pool!r}")


# -- augmentation ---------------------------------------------------------


@dataclass(frozen=True)
class ViewAugment:
    """Probabilities for one view's colour pipeline."""

    jitter_p: float = 0.8
    blur_p: float = 0.5
    solarize_p: float = 0.0
    jitter: float = 0.4
    sigma: tuple = (0.1, 2.0)
    solarize_threshold: float = 0.5


GLOBAL1 = ViewAugment(blur_p=1.0)
GLOBAL2 = ViewAugment(blur_p=0.1, solarize_p=0.2)
LOCAL = ViewAugment(blur_p=0.5)


def _gray(img: np.ndarray) -> np.ndarray:
    return (img @ np.array([0.299, 0.587, 0.114], dtype=img.dtype))[..., None]


def color_jitter(img: np.ndarray, rng, strength: float = 0.4) -> np.ndarray:
    """Brightness, contrast, then saturation, each scaled by U(1 - s, 1 + s)."""
    lo, hi = 1.0 - strength, 1.0 + strength
    img = np.clip(img * rng.uniform(lo, hi), 0, 1)
    m = _gray(img).mean()
    img = np.clip((img - m) * rng.uniform(lo, hi) + m, 0, 1)
    g = _gray(img)
    return np.clip((img - g) * rng.uniform(lo, hi) + g, 0, 1)


def solarize(img: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    return np.where(img >= threshold, 1.0 - img, img).astype(img.dtype)


def augment(image: np.ndarray, rng, params: ViewAugment = LOCAL) -> np.ndarray:
    """Colour jitter, Gaussian blur and solarisation, each gated by ``rng.random()``."""
    out = image
    if rng.random() < params.jitter_p:
        out = color_jitter(out, rng, params.jitter)
    if rng.random() < params.blur_p:
        out = gaussian_blur(out, rng.uniform(*params.sigma))
    if rng.random() < params.solarize_p:
        out = solarize(out, params.solarize_threshold)
    return np.clip(out, 0, 1).astype(image.dtype)


@dataclass
class CropSet:
    globals: list
    locals: list
    # (top, left, height, width) per view, globals first
    rects: list = field(default_factory=list)


def _draw_rect(h: int, w: int, rng, scale: tuple, upper_strict: bool,
               attempts: int = 100) -> tuple[int, int, int, int]:
    area = h * w
    lo, hi = scale
    for _ in range(attempts):
        rect = sample_crop_box(h, w, rng, scale)
        frac = rect[2] * rect[3] / area
        if frac >= lo and (frac < hi if upper_strict else frac <= hi):
            return rect
    raise RuntimeError(f"could not draw a crop covering {scale} of a {h}x{w} image")


def multi_crop(image: np.ndarray, rng, m: int = 6, global_size: int = 224, local_size: int = 96,
               global_scale=(0.5, 1.0), local_scale=(0.05, 0.5)) -> CropSet:
    """Two global views (>= 50% of the area) and ``m`` local views (< 50%).

    Rectangles violating the area bounds after rounding are redrawn. Every
    view is flipped horizontally with probability 0.5 and resized
    bilinearly.
    """
    h, w = image.shape[:2]
    if min(h, w) < global_size:
        raise ValueError(f"source {h}x{w} is smaller than the {global_size}px global view")
    crops = CropSet([], [], [])
    for i in range(2 + m):
        is_global = i < 2
        rect = _draw_rect(h, w, rng, global_scale if is_global else local_scale,
                          upper_strict=not is_global)
        top, left, ch, cw = rect
        size = global_size if is_global else local_size
        view = bilinear_resize(image[top:top + ch, left:left + cw], size, size)
        if rng.random() < 0.5:
            view = view[:, ::-1]
        (crops.globals if is_global else crops.locals).append(np.ascontiguousarray(view))
        crops.rects.append(rect)
    return crops


def make_views(image: np.ndarray, rng, cfg: SslConfig) -> list[np.ndarray]:
    crops = multi_crop(image, rng, cfg.local_views, cfg.global_size, cfg.local_size,
                       cfg.global_scale, cfg.local_scale)
    views = [augment(crops.globals[0], rng, GLOBAL1), augment(crops.globals[1], rng, GLOBAL2)]
    views += [augment(v, rng, LOCAL) for v in crops.locals]
    return views


# -- loss, EMA, schedules -------------------------------------------------


def _np_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def teacher_probs(teacher_logits, center, teacher_temp: float) -> np.ndarray:
    """Centred, sharpened teacher distribution; plain arrays, never on the tape."""
    z = teacher_logits.data if isinstance(teacher_logits, Tensor) else np.asarray(teacher_logits)
    return _np_softmax((z - center) / teacher_temp)


def distill_loss(teacher_logits, student_logits, center, teacher_temp: float,
                 student_temp: float) -> Tensor:
    """``-sum(P_teacher * log P_student)``, averaged over any leading axes."""
    pt = teacher_probs(teacher_logits, center, teacher_temp)
    ls = T.log_softmax(T.scale(student_logits, 1.0 / student_temp))
    ce = T.neg(T.sum(T.mul(Tensor(pt, dtype=ls.dtype), ls), axis=-1))
    return T.mean(ce)


def multi_view_loss(teacher_logits: Sequence, student_logits: Sequence[Tensor], center,
                    teacher_temp: float, student_temp: float) -> Tensor:
    """Mean distillation loss over (teacher view, student view) pairs.

    Student view ``i`` and teacher view ``i`` are the same crop, so those
    pairs are skipped.
    """
    terms = []
    for iq, tl in enumerate(teacher_logits):
        for v, sl in enumerate(student_logits):
            if v == iq:
                continue
            terms.append(distill_loss(tl, sl, center, teacher_temp, student_temp))
    if not terms:
        raise ValueError("no (teacher, student) view pairs")
    total = terms[0]
    for t in terms[1:]:
        total = T.add(total, t)
    return T.scale(total, 1.0 / len(terms))


def entropy(p: np.ndarray) -> float:
    p = np.asarray(p, dtype=np.float64)
    return float(-(p * np.log(np.clip(p, 1e-30, None))).sum())


def lambda_schedule(step: int, total: int, start: float = LAMBDA_START, end: float = 1.0) -> float:
    """Teacher momentum: cosine from ``start`` at step 0 to ``end`` at ``total``."""
    if step < 0 or step > total:
        raise ValueError(f"step {step} outside [0, {total}]")
    return cosine_schedule(start, end, step, total)


def ema_update(teacher: dict, student: dict, lam: float) -> dict:
    """In place ``teacher <- lam * teacher + (1 - lam) * student``."""
    if teacher.keys() != student.keys():
        raise ValueError("teacher and student parameter trees differ")
    for k, t in teacher.items():
        s = student[k]
        td = t.data if isinstance(t, Tensor) else t
        sd = s.data if isinstance(s, Tensor) else s
        if td.shape != sd.shape:
            raise ValueError(f"{k}: teacher {td.shape} vs student {sd.shape}")
        td *= td.dtype.type(lam)
        td += td.dtype.type(1.0 - lam) * sd
    return teacher


def center_update(center: np.ndarray, teacher_outputs: np.ndarray, momentum: float) -> np.ndarray:
    """EMA of the batch-mean teacher output (raw logits)."""
    out = np.asarray(teacher_outputs).reshape(-1, center.shape[-1])
    if len(out) == 0:
        raise ValueError("empty teacher batch")
    return momentum * center + (1.0 - momentum) * out.mean(axis=0)


# -- networks -------------------------------------------------------------


class ProjectionHead:
    """MLP (GELU) to an L2-normalised bottleneck, then a bias-free output layer.

    Output weight columns are normalised on use, so logits are cosines in
    [-1, 1] and the temperatures alone set the sharpness.
    """

    def __init__(self, in_dim: int, hidden: int, bottleneck: int, out_dim: int, seed: int = 0,
                 dtype=None):
        rng = np.random.default_rng(seed)
        dtype = dtype or T.get_dtype()

        def p(v):
            return Tensor(v, requires_grad=True, dtype=dtype)

        self.params = {
            "fc1.weight": p(trunc_normal(rng, (in_dim, hidden))),
            "fc1.bias": p(np.zeros(hidden)),
            "fc2.weight": p(trunc_normal(rng, (hidden, hidden))),
            "fc2.bias": p(np.zeros(hidden)),
            "fc3.weight": p(trunc_normal(rng, (hidden, bottleneck))),
            "fc3.bias": p(np.zeros(bottleneck)),
            "last.weight": p(trunc_normal(rng, (bottleneck, out_dim))),
        }

    def __call__(self, x: Tensor) -> Tensor:
        p = self.params
        x = T.gelu(T.linear(x, p["fc1.weight"], p["fc1.bias"]))
        x = T.gelu(T.linear(x, p["fc2.weight"], p["fc2.bias"]))
        x = T.l2_normalize(T.linear(x, p["fc3.weight"], p["fc3.bias"]), axis=-1)
        return T.matmul(x, T.l2_normalize(p["last.weight"], axis=0))


class SslNet:
    """Backbone plus projection head; parameters keyed ``backbone.*`` / ``proj.*``."""

    def __init__(self, backbone: CsvtModel, head: ProjectionHead, pool: str = "mean"):
        self.backbone = backbone
        self.head = head
        self.pool = pool

    @property
    def params(self) -> dict[str, Tensor]:
        out = {f"backbone.{k}": self.backbone.params[k] for k in self.backbone.backbone_names()}
        out.update({f"proj.{k}": v for k, v in self.head.params.items()})
        return out

    def features(self, images: np.ndarray, training: bool = True) -> Tensor:
        if self.pool == "cls":
            return self.backbone.forward_features(images, training)
        # forward_tokens always puts the class token first
        tokens = self.backbone.forward_tokens(images, training)
        return T.mean(T.getitem(tokens, (slice(None), slice(1, None))), axis=1)

    def __call__(self, images: np.ndarray, training: bool = True) -> Tensor:
        return self.head(self.features(images, training))

    def copy(self) -> "SslNet":
        head = ProjectionHead.__new__(ProjectionHead)
        head.params = {k: Tensor(v.data, requires_grad=v.requires_grad, dtype=v.dtype)
                       for k, v in self.head.params.items()}
        return SslNet(self.backbone.copy(), head, self.pool)


@dataclass
class SslState:
    student: SslNet
    teacher: SslNet
    center: np.ndarray
    cfg: SslConfig
    step: int = 0
    total_steps: int = 0
    log: list = field(default_factory=list)


def init_state(model_cfg: CsvtConfig, cfg: SslConfig) -> SslState:
    backbone = CsvtModel(model_cfg, seed=cfg.seed)
    head = ProjectionHead(model_cfg.embed_dim, cfg.head_hidden, cfg.head_bottleneck, cfg.head_out,
                          seed=cfg.seed + 1)
    student = SslNet(backbone, head, cfg.pool)
    teacher = student.copy()
    for p in teacher.params.values():
        p.requires_grad = False
    center = np.zeros(cfg.head_out, dtype=backbone.params["cls_token"].dtype)
    return SslState(student, teacher, center, cfg)


def _student_logits(net: SslNet, views: list[np.ndarray], n_global: int, b: int) -> list[Tensor]:
    """Forward global and local views as two batches; return one (B, K) tensor per view."""
    groups = [views[:n_global], views[n_global:]]
    per_view = []
    for group in groups:
        if not group:
            continue
        out = net(np.concatenate(group), training=True)
        per_view += [T.getitem(out, slice(i * b, (i + 1) * b)) for i in range(len(group))]
    return per_view


def _dump_diagnostics(path, state: SslState, info: dict) -> None:
    norms = {k: float(np.linalg.norm(p.data)) for k, p in state.student.params.items()}
    finite = {k: bool(np.isfinite(p.data).all()) for k, p in state.student.params.items()}
    payload = dict(info, center_norm=float(np.linalg.norm(state.center)),
                   param_norms=norms, param_finite=finite)
    atomic_write_text(path, json.dumps(payload, indent=2, default=str))


def ssl_checkpoint_tensors(state: SslState) -> dict[str, np.ndarray]:
    """Teacher backbone under canonical model names, plus head and centre."""
    bb = state.teacher.backbone
    out = {k: bb.params[k].data for k in bb.backbone_names()}
    out.update(bb.buffers)
    out.update({f"ssl.proj.{k}": v.data for k, v in state.teacher.head.params.items()})
    out["ssl.center"] = np.asarray(state.center)
    return out


def pretrain(images: np.ndarray, model_cfg: CsvtConfig, cfg: SslConfig, ckpt_path=None,
             log_path=None, state: SslState | None = None) -> SslState:
    """Run self-distillation on an unlabeled (N, H, W, 3) image array."""
    rng = np.random.default_rng(cfg.seed)
    state = state or init_state(model_cfg, cfg)
    student, teacher = state.student, state.teacher
    sparams = student.params
    tparams = teacher.params
    opt = AdamW(sparams, lr=cfg.lr, weight_decay=cfg.wd_start,
                no_decay=no_decay_names(sparams))
    n = len(images)
    b = min(cfg.batch_size, n)
    steps_per_epoch = n // b
    if steps_per_epoch == 0:
        raise ValueError("no images to pretrain on")
    total = cfg.epochs * steps_per_epoch
    warmup = min(cfg.warmup_epochs * steps_per_epoch, total)
    state.total_steps = total
    n_global = 2

    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        for it in range(steps_per_epoch):
            step = state.step
            idx = order[it * b:(it + 1) * b]
            per_image = [make_views(images[i], rng, cfg) for i in idx]
            views = [np.stack([pv[v] for pv in per_image]) for v in range(2 + cfg.local_views)]
            lr = warmup_cosine(step, total, warmup, cfg.lr, cfg.min_lr)
            wd = cosine_schedule(cfg.wd_start, cfg.wd_end, step, total)
            lam = lambda_schedule(step, total)

            with T.no_grad():
                t_out = teacher(np.concatenate(views[:n_global]), training=True).data
            t_logits = [t_out[i * b:(i + 1) * b] for i in range(n_global)]
            if cfg.centering and step == 0:
                # warm start: a zero centre lets the untrained teacher peak on
                # whatever dimensions all images share
                state.center = center_update(state.center, t_out, 0.0).astype(state.center.dtype)

            T.reset_tape()
            try:
                s_logits = _student_logits(student, views, n_global, b)
                loss = multi_view_loss(t_logits, s_logits, state.center,
                                       cfg.teacher_temp, cfg.student_temp)
                loss_value = float(loss.data)
                if not math.isfinite(loss_value):
                    raise NonFiniteError("loss is not finite")
                opt.zero_grad()
                T.backward(loss)
            except NonFiniteError as exc:
                if ckpt_path is not None:
                    _dump_diagnostics(Path(str(ckpt_path) + ".diag.json"), state,
                                      dict(step=step, epoch=epoch, lr=lr, wd=wd, error=str(exc)))
                raise RuntimeError(f"non-finite value at step {step}: {exc}") from exc
            if cfg.clip_grad:
                clip_grad_norm(sparams.values(), cfg.clip_grad)
            opt.lr, opt.weight_decay = lr, wd
            opt.step()
            ema_update(tparams, sparams, lam)

            pbar = teacher_probs(t_out, state.center, cfg.teacher_temp).mean(axis=0)
            if cfg.centering:
                state.center = center_update(state.center, t_out, cfg.center_momentum).astype(
                    state.center.dtype)
            state.log.append((step, epoch, lr, wd, lam, loss_value, entropy(pbar)))
            state.step += 1

    if log_path is not None:
        write_loss_log(log_path, state.log)
    if ckpt_path is not None:
        save_checkpoint(ckpt_path, ssl_checkpoint_tensors(state))
    return state


def write_loss_log(path, rows) -> None:
    atomic_write_csv(path, LOSS_LOG_HEADER,
                     [(s, e, repr(float(lr)), repr(float(wd)), repr(float(lam)), repr(float(l)),
                       repr(float(h))) for s, e, lr, wd, lam, l, h in rows])


def smoothed(values: Sequence[float], window: int) -> np.ndarray:
    """Trailing moving average with a ``window``-sample kernel (valid part only)."""
    v = np.asarray(values, dtype=np.float64)
    window = max(1, min(window, len(v)))
    c = np.cumsum(np.concatenate([[0.0], v]))
    return (c[window:] - c[:-window]) / window


def config_dict(cfg: SslConfig) -> dict:
    return asdict(cfg)
