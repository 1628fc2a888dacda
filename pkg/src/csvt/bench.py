"""Cost models and timing for channel attention vs token self-attention.

Conventions: one multiply-accumulate (MAC) is 2 FLOPs. Only matmul and
convolution MACs are counted; elementwise work (softmax, norms, biases) is
left out, as in the usual GMac figures.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from . import tensor as T
from .fileio import atomic_write_csv, atomic_write_text
from .model import CsvtConfig, CsvtModel, cba_forward, sa_forward
from .tensor import Tensor

VARIANTS = ("cba", "sa")
DEFAULT_SIZES = (224, 336, 448, 560, 672)


def _check(variant: str, n: int, d: int, h: int) -> None:
    if variant not in VARIANTS:
        raise ValueError(f"variant must be one of {VARIANTS}, got {variant!r}")
    if n < 1 or d < 1 or h < 1 or d % h:
        raise ValueError(f"invalid dims n={n} d={d} h={h}")


# -- analytic models ------------------------------------------------------


def attention_flops(variant: str, n: int, d: int, h: int) -> int:
    """FLOPs of the attention kernel alone (no projections).

    cba: per head 2*n*dh^2 for K^T Q plus 2*n*dh^2 for V A^T.
    sa:  per head 2*n^2*dh for Q K^T plus 2*n^2*dh for A V.
    """
    _check(variant, n, d, h)
    dh = d // h
    if variant == "cba":
        return h * (2 * n * dh * dh + 2 * n * dh * dh)
    return h * (2 * n * n * dh * 2)


def projection_flops(n: int, d: int) -> int:
    """Q, K, V and output projections: four n x d by d x d products."""
    return 4 * 2 * n * d * d


def flop_count(variant: str, n: int, d: int, h: int) -> int:
    """Attention-stage FLOPs: kernel plus the four projections."""
    return attention_flops(variant, n, d, h) + projection_flops(n, d)


def memory_model(variant: str, n: int, d: int, h: int, batch: int = 1) -> int:
    """Attention-matrix elements held per forward: h*dh^2 (cba) or h*n^2 (sa)."""
    _check(variant, n, d, h)
    dh = d // h
    per_sample = h * dh * dh if variant == "cba" else h * n * n
    return batch * per_sample


def stage_activation_elements(variant: str, n: int, d: int, h: int, batch: int = 1) -> int:
    """Output elements of every op in one attention call on (batch, n, d) tokens.

    Counts follow the op sequence of the attention kernels: 20 (cba) or 18
    (sa) token-sized tensors, 4 (cba) or 3 (sa) attention-sized ones, and
    3 h-sized temperature ops for cba.
    """
    _check(variant, n, d, h)
    tokens = batch * n * d
    attn = memory_model(variant, n, d, h, batch)
    if variant == "cba":
        return 20 * tokens + 4 * attn + 3 * h
    return 18 * tokens + 3 * attn


def model_macs(cfg: CsvtConfig, size: int | None = None, attention: str = "cba") -> int:
    """Matmul + convolution MACs of one full forward pass at ``size`` pixels."""
    size = size or cfg.image_size
    n = cfg.num_patches(size)
    d, h, f = cfg.embed_dim, cfg.num_heads, cfg.hidden_dim
    macs = n * cfg.patch_dim * d
    for i in range(cfg.num_layers):
        has_cls = (not cfg.use_class_token_in_last_block) or i == cfg.num_layers - 1
        t = n + 1 if has_cls else n
        macs += (attention_flops(attention, t, d, h) + projection_flops(t, d)) // 2
        macs += 2 * 9 * n * d      # two depthwise 3x3 convs, patch tokens only
        macs += 2 * t * d * f      # MLP
    macs += d * cfg.num_classes
    return macs


def model_gmac(cfg: CsvtConfig, size: int | None = None, attention: str = "cba") -> float:
    return model_macs(cfg, size, attention) / 1e9


# -- trace oracles --------------------------------------------------------


def traced_macs(records: Sequence[T.OpTrace]) -> int:
    """MACs implied by the shapes of recorded matmul and conv ops."""
    total = 0
    for r in records:
        if r.name == "matmul":
            total += math.prod(r.out_shape) * r.in_shapes[0][-1]
        elif r.name == "depthwise_conv3x3":
            total += math.prod(r.out_shape) * 9
    return total


def traced_elements(records: Sequence[T.OpTrace], names: Iterable[str] | None = None) -> int:
    names = set(names) if names is not None else None
    return sum(math.prod(r.out_shape) for r in records if names is None or r.name in names)


def trace_call(fn: Callable[[], object]) -> list[T.OpTrace]:
    with T.no_grad(), T.trace() as records:
        fn()
    return list(records)


def trace_model(model: CsvtModel, size: int, attention: str = "cba") -> list[T.OpTrace]:
    img = np.zeros((1, size, size, model.cfg.in_chans))
    kind = "channel" if attention == "cba" else "self"

    def run():
        tokens = model.forward_tokens(img, training=False, attention=kind)
        T.linear(T.getitem(tokens, (slice(None), 0)), model.params["head.weight"],
                 model.params["head.bias"])

    return trace_call(run)


# -- timing ---------------------------------------------------------------


def fit_slope(xs: Sequence[float], ys: Sequence[float]) -> float:
    """Least-squares slope of log(y) against log(x)."""
    xs, ys = np.asarray(xs, dtype=np.float64), np.asarray(ys, dtype=np.float64)
    if xs.size < 2 or xs.shape != ys.shape:
        raise ValueError("need at least two matching (x, y) points")
    if (xs <= 0).any() or (ys <= 0).any():
        raise ValueError("log-log fit needs positive values")
    return float(np.polyfit(np.log(xs), np.log(ys), 1)[0])


def time_call(fn: Callable[[], object], repeats: int = 5, warmup: int = 1) -> np.ndarray:
    """Wall-clock milliseconds of ``repeats`` calls after ``warmup`` discarded ones."""
    for _ in range(warmup):
        fn()
    out = np.empty(repeats)
    for i in range(repeats):
        t0 = time.perf_counter()
        fn()
        out[i] = (time.perf_counter() - t0) * 1e3
    return out


@dataclass
class ScalingRecord:
    variant: str
    input_size: int
    n: int
    d: int
    heads: int
    flops: int
    attention_flops: int
    attention_elements: int
    ms_mean: float = float("nan")
    ms_std: float = float("nan")

    @property
    def gmac(self) -> float:
        return self.flops / 2e9

    @property
    def stable(self) -> bool:
        return math.isnan(self.ms_mean) or self.ms_std / self.ms_mean < MAX_REL_STD


MAX_REL_STD = 0.25
CSV_HEADER = ("variant", "input_size", "n", "d", "heads", "flops", "gmac",
              "attention_flops", "attention_elements", "ms_mean", "ms_std")
FIT_HEADER = ("variant", "attention_flops_slope", "stage_flops_slope",
              "attention_elements_slope", "ms_slope")


@dataclass
class ScalingReport:
    records: list[ScalingRecord]
    repeats: int
    timed: bool = True
    notes: list[str] = field(default_factory=list)

    def select(self, variant: str) -> list[ScalingRecord]:
        return sorted((r for r in self.records if r.variant == variant), key=lambda r: r.n)

    def slopes(self, variant: str) -> dict[str, float]:
        rs = self.select(variant)
        ns = [r.n for r in rs]
        out = {
            "attention_flops": fit_slope(ns, [r.attention_flops for r in rs]),
            "stage_flops": fit_slope(ns, [r.flops for r in rs]),
            "attention_elements": (fit_slope(ns, [r.attention_elements for r in rs])
                                   if len({r.attention_elements for r in rs}) > 1 else 0.0),
            "ms": float("nan"),
        }
        if self.timed:
            out["ms"] = fit_slope(ns, [r.ms_mean for r in rs])
        return out

    def ratios(self) -> list[float]:
        """Measured sa/cba time ratio per input size, ascending size."""
        cba = {r.input_size: r.ms_mean for r in self.select("cba")}
        sa = {r.input_size: r.ms_mean for r in self.select("sa")}
        return [sa[s] / cba[s] for s in sorted(cba) if s in sa]

    @property
    def valid(self) -> bool:
        return all(r.stable for r in self.records)

    def rows(self) -> list[tuple]:
        def ms(v):
            return "" if math.isnan(v) else f"{v:.4f}"

        return [
            (r.variant, r.input_size, r.n, r.d, r.heads, r.flops, f"{r.gmac:.6f}",
             r.attention_flops, r.attention_elements, ms(r.ms_mean), ms(r.ms_std))
            for r in self.records
        ]

    def fit_rows(self) -> list[tuple]:
        out = []
        for v in VARIANTS:
            if not self.select(v):
                continue
            s = self.slopes(v)
            out.append((v, f"{s['attention_flops']:.6f}", f"{s['stage_flops']:.6f}",
                        f"{s['attention_elements']:.6f}",
                        "" if math.isnan(s["ms"]) else f"{s['ms']:.6f}"))
        return out

    def write_csv(self, path) -> None:
        atomic_write_csv(path, CSV_HEADER, self.rows())

    def write_fit_csv(self, path) -> None:
        atomic_write_csv(path, FIT_HEADER, self.fit_rows())

    def gnuplot_text(self) -> str:
        """Whitespace table: one line per size with both variants side by side."""
        cba = {r.input_size: r for r in self.select("cba")}
        sa = {r.input_size: r for r in self.select("sa")}
        lines = ["# size n cba_flops sa_flops cba_attn_elems sa_attn_elems cba_ms sa_ms"]
        for s in sorted(set(cba) & set(sa)):
            c, q = cba[s], sa[s]
            lines.append(f"{s} {c.n} {c.flops} {q.flops} {c.attention_elements} "
                         f"{q.attention_elements} {c.ms_mean:.4f} {q.ms_mean:.4f}")
        return "\n".join(lines) + "\n"

    def write_gnuplot(self, path) -> None:
        atomic_write_text(path, self.gnuplot_text())


def _stage_fn(variant: str, tokens: Tensor, params: dict) -> Callable[[], object]:
    stage = cba_forward if variant == "cba" else sa_forward

    def run():
        with T.no_grad():
            return stage(tokens, params)

    return run


def run_scaling(sizes: Sequence[int] = DEFAULT_SIZES, cfg: CsvtConfig | None = None,
                repeats: int = 5, warmup: int = 1, timing: bool = True,
                element_budget: int = 200_000_000, max_attempts: int = 3,
                seed: int = 0) -> ScalingReport:
    """Analytic costs plus single-thread timings of one attention stage per size.

    Both variants share the block weights and run on the same random tokens.
    A size is rejected (ValueError) when any variant's attention matrices
    would exceed ``element_budget`` elements. Timings with std/mean >= 0.25
    are repeated up to ``max_attempts`` times.
    """
    from .model import DESK_CONFIG

    cfg = cfg or DESK_CONFIG
    sizes = list(sizes)
    if len(sizes) < 4:
        raise ValueError("slope fits need at least 4 sizes")
    if repeats < 5:
        raise ValueError("repeats must be >= 5")
    d, h, p = cfg.embed_dim, cfg.num_heads, cfg.patch_size
    for s in sizes:
        if s % p:
            raise ValueError(f"size {s} is not divisible by patch size {p}")
        n = (s // p) ** 2
        worst = max(memory_model(v, n, d, h) for v in VARIANTS)
        if worst > element_budget:
            raise ValueError(f"size {s}: {worst} attention elements exceed budget {element_budget}")

    model = CsvtModel(cfg, seed=seed)
    params = model.block(0)
    rng = np.random.default_rng(seed)
    records, notes = [], []
    with threadpool_limits(limits=1):
        for s in sizes:
            n = (s // p) ** 2
            tokens = Tensor(rng.standard_normal((1, n, d)), dtype=T.get_dtype())
            for v in VARIANTS:
                rec = ScalingRecord(
                    v, s, n, d, h, flop_count(v, n, d, h), attention_flops(v, n, d, h),
                    memory_model(v, n, d, h),
                )
                if timing:
                    fn = _stage_fn(v, tokens, params)
                    for attempt in range(max_attempts):
                        ms = time_call(fn, repeats, warmup)
                        rec.ms_mean, rec.ms_std = float(ms.mean()), float(ms.std())
                        if rec.stable:
                            break
                        notes.append(f"{v}@{s}: std/mean {rec.ms_std / rec.ms_mean:.3f}, "
                                     f"rerun {attempt + 1}")
                records.append(rec)
    return ScalingReport(records, repeats, timing, notes)
