"""Channel-spatial attention vision transformer.

Each encoder block runs three residual stages, each closed by LayerNorm:

* channel attention over the d x d cross-covariance of L2-normalised keys
  and queries (linear in the number of tokens),
* a spatial interaction block of two 3x3 depthwise convolutions with batch
  norm and ReLU in between, operating on the patch grid,
* a two-layer ReLU MLP.

The class token is prepended only before the last block and bypasses that
block's spatial stage.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields, replace

import numpy as np

from . import tensor as T
from .tensor import DimensionError, Tensor


@dataclass(frozen=True)
class CsvtConfig:
    image_size: int = 224
    patch_size: int = 8
    embed_dim: int = 384
    num_layers: int = 12
    num_heads: int = 4
    mlp_ratio: int = 4
    num_classes: int = 4
    use_class_token_in_last_block: bool = True
    in_chans: int = 3

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, int) and not isinstance(v, bool) and v < 1:
                raise ValueError(f"{f.name} must be positive, got {v}")
        if self.image_size % self.patch_size:
            raise ValueError(
                f"image_size {self.image_size} is not divisible by patch_size {self.patch_size}"
            )
        if self.embed_dim % self.num_heads:
            raise ValueError(
                f"embed_dim {self.embed_dim} is not divisible by num_heads {self.num_heads}"
            )

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads

    @property
    def hidden_dim(self) -> int:
        return self.mlp_ratio * self.embed_dim

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.in_chans

    def num_patches(self, image_size: int | None = None) -> int:
        g = (image_size or self.image_size) // self.patch_size
        return g * g

    def to_dict(self) -> dict:
        return asdict(self)

    def with_(self, **kw) -> "CsvtConfig":
        return replace(self, **kw)


FULL_CONFIG = CsvtConfig()
DESK_CONFIG = CsvtConfig(image_size=64, embed_dim=64, num_layers=4, num_heads=2)


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal samples redrawn until they fall within two standard deviations."""
    z = rng.standard_normal(shape)
    bad = np.abs(z) > 2.0
    while bad.any():
        z[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(z) > 2.0
    return z * std


def no_decay_names(params: dict[str, Tensor]) -> list[str]:
    """Biases, norm gains, temperatures and tokens skip weight decay."""
    return [k for k, p in params.items() if p.ndim <= 1]


def block_shapes(cfg: CsvtConfig) -> dict[str, tuple]:
    d, h, f = cfg.embed_dim, cfg.num_heads, cfg.hidden_dim
    return {
        "wq": (d, d), "bq": (d,),
        "wk": (d, d), "bk": (d,),
        "wv": (d, d), "bv": (d,),
        "log_tau": (h,),
        "wout": (d, d), "bout": (d,),
        "ln1.gamma": (d,), "ln1.beta": (d,),
        "sib.conv1": (3, 3, d), "sib.conv1_bias": (d,),
        "sib.bn.gamma": (d,), "sib.bn.beta": (d,),
        "sib.conv2": (3, 3, d), "sib.conv2_bias": (d,),
        "ln2.gamma": (d,), "ln2.beta": (d,),
        "mlp.fc1": (d, f), "mlp.fc1_bias": (f,),
        "mlp.fc2": (f, d), "mlp.fc2_bias": (d,),
        "ln3.gamma": (d,), "ln3.beta": (d,),
    }


BUFFER_KEYS = ("sib.bn.running_mean", "sib.bn.running_var")


def _init_value(key: str, shape, rng) -> np.ndarray:
    leaf = key.rsplit(".", 1)[-1]
    if leaf == "gamma":
        return np.ones(shape)
    if leaf in ("beta", "log_tau") or leaf.endswith("bias") or key in ("bq", "bk", "bv", "bout"):
        return np.zeros(shape)
    if leaf in ("conv1", "conv2"):
        return trunc_normal(rng, shape, std=1.0 / 3.0)
    return trunc_normal(rng, shape, std=0.02)


# -- block stages ---------------------------------------------------------


def _split_heads(x: Tensor, h: int) -> Tensor:
    b, n, d = x.shape
    return T.transpose(T.reshape(x, (b, n, h, d // h)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    b, h, n, dh = x.shape
    return T.reshape(T.transpose(x, (0, 2, 1, 3)), (b, n, h * dh))


def _batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 2:
        return T.reshape(x, (1,) + x.shape), True
    if x.ndim != 3:
        raise DimensionError(f"expected (n, d) or (B, n, d) tokens, got {x.shape}")
    return x, False


def channel_attention(x: Tensor, p: dict, return_attention: bool = False):
    """Multi-head cross-covariance attention, without residual or norm.

    Per head: A = softmax_rows(K^T Q / tau) over column-normalised K and Q
    (a dh x dh matrix), and the head output is V A^T.
    """
    x, squeeze = _batched(x)
    h = p["log_tau"].shape[0]
    q = _split_heads(T.linear(x, p["wq"], p["bq"]), h)
    k = _split_heads(T.linear(x, p["wk"], p["bk"]), h)
    v = _split_heads(T.linear(x, p["wv"], p["bv"]), h)
    qh = T.l2_normalize_cols(q)
    kh = T.l2_normalize_cols(k)
    inv_tau = T.reshape(T.exp(T.neg(p["log_tau"])), (h, 1, 1))
    attn = T.softmax_rows(T.mul(T.matmul(T.swapaxes(kh), qh), inv_tau))
    out = T.linear(_merge_heads(T.matmul(v, T.swapaxes(attn))), p["wout"], p["bout"])
    if squeeze:
        out = T.reshape(out, out.shape[1:])
    return (out, attn) if return_attention else out


def cba_forward(x: Tensor, p: dict, return_attention: bool = False):
    """Channel-based attention stage: ``LayerNorm(attention(x) + x)``."""
    a = channel_attention(x, p, return_attention)
    attn = None
    if return_attention:
        a, attn = a
    out = T.layer_norm(T.add(a, x), p["ln1.gamma"], p["ln1.beta"])
    return (out, attn) if return_attention else out


def self_attention(x: Tensor, p: dict) -> Tensor:
    """Standard scaled dot-product attention over tokens (quadratic baseline)."""
    x, squeeze = _batched(x)
    h = p["log_tau"].shape[0]
    q = _split_heads(T.linear(x, p["wq"], p["bq"]), h)
    k = _split_heads(T.linear(x, p["wk"], p["bk"]), h)
    v = _split_heads(T.linear(x, p["wv"], p["bv"]), h)
    s = 1.0 / math.sqrt(q.shape[-1])
    attn = T.softmax_rows(T.scale(T.matmul(q, T.swapaxes(k)), s))
    out = T.linear(_merge_heads(T.matmul(attn, v)), p["wout"], p["bout"])
    return T.reshape(out, out.shape[1:]) if squeeze else out


def sa_forward(x: Tensor, p: dict) -> Tensor:
    return T.layer_norm(T.add(self_attention(x, p), x), p["ln1.gamma"], p["ln1.beta"])


def sib_pipeline(grid_x: Tensor, p: dict, training: bool) -> Tensor:
    """conv_dw -> BatchNorm -> ReLU -> conv_dw on (B, gh, gw, d)."""
    y = T.depthwise_conv3x3(grid_x, p["sib.conv1"], p["sib.conv1_bias"])
    y = T.batch_norm(
        y, p["sib.bn.gamma"], p["sib.bn.beta"],
        p["sib.bn.running_mean"], p["sib.bn.running_var"], training,
    )
    return T.depthwise_conv3x3(T.relu(y), p["sib.conv2"], p["sib.conv2_bias"])


def sib_forward(x: Tensor, grid: tuple[int, int], p: dict, training: bool = False,
                has_class_token: bool = False) -> Tensor:
    """Spatial interaction stage on the patch grid.

    A leading class token (``has_class_token``) is split off before the
    reshape and re-attached unchanged.
    """
    x, squeeze = _batched(x)
    gh, gw = grid
    cls = None
    if has_class_token:
        cls, x = T.getitem(x, (slice(None), slice(0, 1))), T.getitem(x, (slice(None), slice(1, None)))
    b, n, d = x.shape
    if n != gh * gw:
        raise DimensionError(f"{n} patch tokens do not fill a {gh}x{gw} grid")
    y = T.reshape(sib_pipeline(T.reshape(x, (b, gh, gw, d)), p, training), (b, n, d))
    out = T.layer_norm(T.add(x, y), p["ln2.gamma"], p["ln2.beta"])
    if cls is not None:
        out = T.concat([cls, out], axis=1)
    return T.reshape(out, out.shape[1:]) if squeeze else out


def mlp_forward(s: Tensor, p: dict) -> Tensor:
    """``LayerNorm(s + Fc2(ReLU(Fc1(s))))``."""
    hdn = T.relu(T.linear(s, p["mlp.fc1"], p["mlp.fc1_bias"]))
    y = T.linear(hdn, p["mlp.fc2"], p["mlp.fc2_bias"])
    return T.layer_norm(T.add(s, y), p["ln3.gamma"], p["ln3.beta"])


def block_forward(x: Tensor, grid, p: dict, training: bool = False,
                  has_class_token: bool = False, attention: str = "channel") -> Tensor:
    if attention == "channel":
        hp = cba_forward(x, p)
    elif attention == "self":
        hp = sa_forward(x, p)
    else:
        raise ValueError(f"unknown attention variant {attention!r}")
    s = sib_forward(hp, grid, p, training, has_class_token)
    return mlp_forward(s, p)


def patchify(images: np.ndarray, patch_size: int) -> np.ndarray:
    """(B, H, W, C) -> (B, n, p*p*C) with patches in row-major order."""
    b, hgt, wid, c = images.shape
    if hgt % patch_size or wid % patch_size:
        raise DimensionError(
            f"image size {hgt}x{wid} is not divisible by patch size {patch_size}"
        )
    gh, gw = hgt // patch_size, wid // patch_size
    x = images.reshape(b, gh, patch_size, gw, patch_size, c).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, gh * gw, patch_size * patch_size * c)


def patch_embed(images, weight: Tensor, bias: Tensor, patch_size: int) -> Tensor:
    """Linear projection of non-overlapping patches; no positional embedding."""
    images = np.asarray(images)
    single = images.ndim == 3
    if single:
        images = images[None]
    tokens = T.linear(Tensor(patchify(images, patch_size), dtype=weight.dtype), weight, bias)
    return T.reshape(tokens, tokens.shape[1:]) if single else tokens


# -- model ----------------------------------------------------------------


class CsvtModel:
    """Parameters, BN buffers and forward pass of one CSVT network."""

    def __init__(self, cfg: CsvtConfig, seed: int = 0, dtype=None):
        self.cfg = cfg
        dtype = dtype or T.get_dtype()
        rng = np.random.default_rng(seed)
        d = cfg.embed_dim
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}

        def add(name, value):
            self.params[name] = Tensor(value, requires_grad=True, dtype=dtype)

        add("patch_embed.weight", trunc_normal(rng, (cfg.patch_dim, d)))
        add("patch_embed.bias", np.zeros(d))
        for i in range(cfg.num_layers):
            for key, shape in block_shapes(cfg).items():
                add(f"block{i}.{key}", _init_value(key, shape, rng))
            self.buffers[f"block{i}.sib.bn.running_mean"] = np.zeros(d, dtype=dtype)
            self.buffers[f"block{i}.sib.bn.running_var"] = np.ones(d, dtype=dtype)
        add("cls_token", trunc_normal(rng, (d,)))
        add("head.weight", trunc_normal(rng, (d, cfg.num_classes)))
        add("head.bias", np.zeros(cfg.num_classes))

    # parameter bookkeeping

    def block(self, i: int) -> dict:
        pre = f"block{i}."
        p = {k[len(pre):]: v for k, v in self.params.items() if k.startswith(pre)}
        p.update({k[len(pre):]: v for k, v in self.buffers.items() if k.startswith(pre)})
        return p

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def backbone_names(self) -> list[str]:
        return [k for k in self.params if not k.startswith("head.")]

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {k: p.data for k, p in self.params.items()}
        out.update(self.buffers)
        return out

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True,
                        skip_prefixes: tuple = ()) -> list[str]:
        """Copy matching tensors in; raise with a full shape diff on mismatch.

        Returns the names that were absent from ``state`` (only allowed when
        ``strict`` is false).
        """
        own = self.state_dict()
        problems, missing = [], []
        for k, v in own.items():
            if k.startswith(skip_prefixes):
                continue
            if k not in state:
                missing.append(k)
            elif tuple(state[k].shape) != v.shape:
                problems.append(f"{k}: checkpoint {tuple(state[k].shape)} vs model {v.shape}")
        if strict:
            unexpected = [k for k in state if k not in own and not k.startswith(skip_prefixes)]
            problems += [f"{k}: missing from checkpoint" for k in missing]
            problems += [f"{k}: not a model tensor" for k in unexpected]
        if problems:
            raise ValueError("incompatible checkpoint:\n  " + "\n  ".join(problems))
        for k in own:
            if k in state and not k.startswith(skip_prefixes):
                if k in self.params:
                    self.params[k].data = state[k].astype(self.params[k].dtype).copy()
                else:
                    self.buffers[k] = state[k].astype(self.buffers[k].dtype).copy()
        return missing

    def copy(self) -> "CsvtModel":
        other = CsvtModel.__new__(CsvtModel)
        other.cfg = self.cfg
        other.params = {k: Tensor(p.data, requires_grad=p.requires_grad, dtype=p.dtype)
                        for k, p in self.params.items()}
        other.buffers = {k: v.copy() for k, v in self.buffers.items()}
        return other

    def astype(self, dtype) -> "CsvtModel":
        for p in self.params.values():
            p.data = p.data.astype(dtype)
        for k in self.buffers:
            self.buffers[k] = self.buffers[k].astype(dtype)
        return self

    # forward

    def forward_tokens(self, images, training: bool = False, attention: str = "channel") -> Tensor:
        """Final-block token embeddings, (B, 1 + n, d) with the class token first."""
        cfg = self.cfg
        images = np.asarray(images)
        if images.ndim == 3:
            images = images[None]
        gh, gw = images.shape[1] // cfg.patch_size, images.shape[2] // cfg.patch_size
        x = patch_embed(images, self.params["patch_embed.weight"],
                        self.params["patch_embed.bias"], cfg.patch_size)
        b = x.shape[0]
        cls = T.reshape(self.params["cls_token"], (1, 1, cfg.embed_dim))
        cls = T.mul(cls, Tensor(np.ones((b, 1, 1)), dtype=x.dtype))
        late = cfg.use_class_token_in_last_block
        if not late:
            x = T.concat([cls, x], axis=1)
        for i in range(cfg.num_layers):
            last = i == cfg.num_layers - 1
            if late and last:
                x = T.concat([cls, x], axis=1)
            x = block_forward(x, (gh, gw), self.block(i), training,
                              has_class_token=(not late) or last, attention=attention)
        return x

    def forward_features(self, images, training: bool = False) -> Tensor:
        """Class-token embedding after the last block, (B, d)."""
        return T.getitem(self.forward_tokens(images, training), (slice(None), 0))

    def forward(self, images, training: bool = False) -> Tensor:
        """Logits (B, num_classes), or (num_classes,) for a single (H, W, C) image."""
        single = np.asarray(images).ndim == 3
        logits = T.linear(self.forward_features(images, training),
                          self.params["head.weight"], self.params["head.bias"])
        return T.reshape(logits, logits.shape[1:]) if single else logits

    __call__ = forward


def model_forward(image, cfg: CsvtConfig, model: CsvtModel, training: bool = False) -> Tensor:
    if model.cfg != cfg:
        raise ValueError("model was built for a different configuration")
    return model.forward(image, training)


def analytic_param_count(cfg: CsvtConfig) -> int:
    """Closed-form parameter count of :class:`CsvtModel` for ``cfg``."""
    d, h, f = cfg.embed_dim, cfg.num_heads, cfg.hidden_dim
    per_block = (
        4 * (d * d + d)      # q, k, v, out projections
        + h                  # temperatures
        + 3 * 2 * d          # three LayerNorms
        + 2 * (9 * d + d)    # two depthwise convs with bias
        + 2 * d              # batch norm affine
        + (d * f + f) + (f * d + d)
    )
    return (
        cfg.patch_dim * d + d
        + cfg.num_layers * per_block
        + d
        + d * cfg.num_classes + cfg.num_classes
    )
