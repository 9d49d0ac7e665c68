"""Desk-scale encoder language model, bottom/top split and LoRA fine-tuning.

The model is a pre-LayerNorm transformer encoder: token + learned positional
embeddings, ``num_blocks`` encoder blocks, and a classification head that
normalises the CLS position and projects it to ``num_classes`` logits.
Parameters live in ordered dicts of :class:`~splitpriv.numerics.Tensor`.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import checkpoint
from . import numerics as nx
from .numerics import Graph, Tensor

PAD, UNK, CLS, SEP = 0, 1, 2, 3
SPECIAL_IDS = (PAD, CLS, SEP)


class ConfigError(ValueError):
    pass


class SplitError(ValueError):
    pass


class VocabError(ValueError):
    pass


@dataclass
class PLMConfig:
    vocab_size: int = 2000
    embed_dim: int = 64
    num_blocks: int = 8
    num_heads: int = 4
    ffn_dim: int = 128
    max_seq_len: int = 64
    num_classes: int = 2
    seed: int = 0
    init_std: float = 0.02
    # token embeddings get their own scale; see README "Embedding geometry"
    embed_std: float = 0.08

    def validate(self) -> None:
        if self.vocab_size < 4:
            raise ConfigError("vocab_size must be >= 4 (PAD, UNK, CLS, SEP are reserved)")
        if self.embed_dim <= 0 or self.num_heads <= 0 or self.embed_dim % self.num_heads:
            raise ConfigError("embed_dim must be a positive multiple of num_heads")
        if self.num_blocks < 0 or self.ffn_dim <= 0 or self.max_seq_len <= 0:
            raise ConfigError("num_blocks >= 0, ffn_dim > 0 and max_seq_len > 0 required")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PLMConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


def parameter_count(cfg: PLMConfig) -> int:
    d, f = cfg.embed_dim, cfg.ffn_dim
    per_block = 2 * d + 4 * (d * d + d) + 2 * d + (d * f + f) + (f * d + d)
    return (cfg.vocab_size * d + cfg.max_seq_len * d + cfg.num_blocks * per_block
            + 2 * d + d * cfg.num_classes + cfg.num_classes)


def _block_shapes(cfg: PLMConfig, i: int) -> list[tuple[str, tuple[int, ...], str]]:
    d, f = cfg.embed_dim, cfg.ffn_dim
    p = f"blocks.{i}."
    shapes = [(p + "ln1.gamma", (d,), "ones"), (p + "ln1.beta", (d,), "zeros")]
    for proj in "qkvo":
        shapes += [(p + f"attn.{proj}.w", (d, d), "normal"), (p + f"attn.{proj}.b", (d,), "zeros")]
    shapes += [(p + "ln2.gamma", (d,), "ones"), (p + "ln2.beta", (d,), "zeros"),
               (p + "ffn.w1", (d, f), "normal"), (p + "ffn.b1", (f,), "zeros"),
               (p + "ffn.w2", (f, d), "normal"), (p + "ffn.b2", (d,), "zeros")]
    return shapes


class PLM:
    """Full (unsplit) model: ``params`` maps names to tensors."""

    def __init__(self, config: PLMConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params

    def block_params(self, i: int) -> dict[str, Tensor]:
        p = f"blocks.{i}."
        return {k[len(p):]: v for k, v in self.params.items() if k.startswith(p)}

    def checksum(self) -> str:
        return params_checksum(self.params)

    def forward(self, ids, mask=None) -> Tensor:
        ids = np.asarray(ids)
        mask = ids != PAD if mask is None else mask
        h = embed(self.params["embed.token"], self.params["embed.pos"], ids)
        for i in range(self.config.num_blocks):
            h = encoder_block(h, mask, self.block_params(i), self.config.num_heads)
        return classify(h, self.params)

    def copy(self) -> "PLM":
        return PLM(PLMConfig(**asdict(self.config)),
                   {k: Tensor(v.data.copy(), name=k) for k, v in self.params.items()})

    def save(self, path, meta: dict | None = None) -> None:
        checkpoint.save(path, {k: v.data for k, v in self.params.items()},
                        {"config": self.config.to_dict(), **(meta or {})})

    @classmethod
    def load(cls, path) -> "PLM":
        tensors, meta = checkpoint.load(path)
        cfg = PLMConfig.from_dict(meta["config"])
        return cls(cfg, {k: Tensor(v, name=k) for k, v in tensors.items()})


def params_checksum(params: dict[str, Tensor]) -> str:
    h = hashlib.blake2b(digest_size=16)
    for name in sorted(params):
        h.update(name.encode())
        h.update(np.ascontiguousarray(params[name].data).tobytes())
    return h.hexdigest()


def build_plm(config: PLMConfig) -> PLM:
    """Seeded random initialisation; identical seeds give identical bytes."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    d = config.embed_dim
    shapes = [("embed.token", (config.vocab_size, d), "embed"),
              ("embed.pos", (config.max_seq_len, d), "normal")]
    for i in range(config.num_blocks):
        shapes += _block_shapes(config, i)
    shapes += [("head.ln.gamma", (d,), "ones"), ("head.ln.beta", (d,), "zeros"),
               ("head.w", (d, config.num_classes), "normal"), ("head.b", (config.num_classes,), "zeros")]
    params = {}
    for name, shape, kind in shapes:
        if kind == "ones":
            arr = np.ones(shape)
        elif kind == "zeros":
            arr = np.zeros(shape)
        else:
            std = config.embed_std if kind == "embed" else config.init_std
            arr = rng.normal(0.0, std, size=shape)
        params[name] = Tensor(arr.astype(np.float32), name=name)
    return PLM(config, params)


# -- forward building blocks -------------------------------------------------

def embed(table: Tensor, pos: Tensor, ids, grad_ids=None) -> Tensor:
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise VocabError(f"token id outside [0, {table.shape[0]})")
    return nx.embedding(table, pos, ids, grad_ids)


def _linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return nx.add_bias(nx.matmul(x, w), b)


def encoder_block(x: Tensor, mask, p: dict[str, Tensor], heads: int,
                  lora: dict[str, Tensor] | None = None, lora_scale: float = 1.0) -> Tensor:
    """Pre-LN block: x + attn(LN(x)), then + ffn(LN(.)).

    ``lora`` may hold ``q.A``, ``q.B``, ``v.A``, ``v.B`` low-rank factors added
    to the query and value projections.
    """
    d = x.shape[-1]
    h = nx.layer_norm(x, p["ln1.gamma"], p["ln1.beta"])
    q = _linear(h, p["attn.q.w"], p["attn.q.b"])
    k = _linear(h, p["attn.k.w"], p["attn.k.b"])
    v = _linear(h, p["attn.v.w"], p["attn.v.b"])
    if lora:
        q = nx.add(q, nx.scale(nx.matmul(nx.matmul(h, lora["q.A"]), lora["q.B"]), lora_scale))
        v = nx.add(v, nx.scale(nx.matmul(nx.matmul(h, lora["v.A"]), lora["v.B"]), lora_scale))
    qh, kh, vh = (nx.split_heads(t, heads) for t in (q, k, v))
    scores = nx.scale(nx.matmul(qh, nx.transpose_last(kh)), 1.0 / math.sqrt(d // heads))
    att = nx.softmax(scores, key_mask=mask, heads=heads)
    ctx = nx.merge_heads(nx.matmul(att, vh), heads)
    x = nx.add(x, _linear(ctx, p["attn.o.w"], p["attn.o.b"]))
    h2 = nx.layer_norm(x, p["ln2.gamma"], p["ln2.beta"])
    f = _linear(nx.gelu(_linear(h2, p["ffn.w1"], p["ffn.b1"])), p["ffn.w2"], p["ffn.b2"])
    return nx.add(x, f)


def classify(h: Tensor, params: dict[str, Tensor]) -> Tensor:
    cls = nx.select_position(h, 0)
    z = nx.layer_norm(cls, params["head.ln.gamma"], params["head.ln.beta"])
    return _linear(z, params["head.w"], params["head.b"])


# -- split -------------------------------------------------------------------

@dataclass
class BottomModel:
    config: PLMConfig
    split: int
    params: dict[str, Tensor]
    frozen: bool = True

    @property
    def token_table(self) -> Tensor:
        return self.params["embed.token"]

    def block_params(self, i: int) -> dict[str, Tensor]:
        p = f"blocks.{i}."
        return {k[len(p):]: v for k, v in self.params.items() if k.startswith(p)}

    def set_trainable(self, trainable: bool) -> None:
        self.frozen = not trainable
        for t in self.params.values():
            t.requires_grad = trainable


@dataclass
class LoraConfig:
    rank: int = 8
    alpha: float = 16.0
    seed: int = 0

    @property
    def scale(self) -> float:
        return self.alpha / self.rank


@dataclass
class TopModel:
    config: PLMConfig
    split: int
    params: dict[str, Tensor]
    lora: dict[str, Tensor] = field(default_factory=dict)
    lora_config: LoraConfig | None = None

    def block_params(self, i: int) -> dict[str, Tensor]:
        p = f"blocks.{i}."
        return {k[len(p):]: v for k, v in self.params.items() if k.startswith(p)}

    def block_lora(self, i: int) -> dict[str, Tensor]:
        p = f"blocks.{i}."
        return {k[len(p):]: v for k, v in self.lora.items() if k.startswith(p)}

    def trainable(self) -> dict[str, Tensor]:
        out = dict(self.lora)
        out["head.w"] = self.params["head.w"]
        out["head.b"] = self.params["head.b"]
        return out

    def decay_names(self) -> set[str]:
        return {k for k in self.trainable() if k.endswith((".A", ".B")) or k == "head.w"}


def split_model(plm: PLM, s: int, bottom_frozen: bool = True) -> tuple[BottomModel, TopModel]:
    """Partition parameters at block ``s``; tensors are shared, not copied."""
    L = plm.config.num_blocks
    if not 0 <= s <= L:
        raise SplitError(f"split position {s} outside [0, {L}]")
    bottom, top = {}, {}
    for name, t in plm.params.items():
        if name.startswith("embed."):
            bottom[name] = t
        elif name.startswith("blocks."):
            (bottom if int(name.split(".")[1]) < s else top)[name] = t
        else:
            top[name] = t
    b = BottomModel(plm.config, s, bottom)
    b.set_trainable(not bottom_frozen)
    return b, TopModel(plm.config, s, top)


def merge_split(bottom: BottomModel, top: TopModel) -> PLM:
    params = {}
    params.update(bottom.params)
    params.update(top.params)
    order = list(build_order(bottom.config))
    return PLM(bottom.config, {k: params[k] for k in order})


def build_order(cfg: PLMConfig):
    yield "embed.token"
    yield "embed.pos"
    for i in range(cfg.num_blocks):
        for name, _, _ in _block_shapes(cfg, i):
            yield name
    yield from ("head.ln.gamma", "head.ln.beta", "head.w", "head.b")


def attach_lora(top: TopModel, lcfg: LoraConfig | None = None) -> TopModel:
    """Add query/value adapters to every top block. B starts at zero."""
    lcfg = lcfg or LoraConfig()
    rng = np.random.default_rng(lcfg.seed)
    d = top.config.embed_dim
    bound = 1.0 / math.sqrt(d)
    top.lora = {}
    for i in range(top.split, top.config.num_blocks):
        for proj in "qv":
            a = rng.uniform(-bound, bound, size=(d, lcfg.rank)).astype(np.float32)
            top.lora[f"blocks.{i}.{proj}.A"] = Tensor(a, requires_grad=True, name=f"blocks.{i}.{proj}.A")
            top.lora[f"blocks.{i}.{proj}.B"] = Tensor(np.zeros((lcfg.rank, d), np.float32), requires_grad=True,
                                                      name=f"blocks.{i}.{proj}.B")
    top.lora_config = lcfg
    for name in ("head.w", "head.b"):
        top.params[name].requires_grad = True
    return top


def merge_lora(top: TopModel) -> dict[str, Tensor]:
    """Fold adapters into the base projections; returns new top parameters."""
    out = {k: Tensor(v.data.copy(), name=k) for k, v in top.params.items()}
    if not top.lora:
        return out
    sc = top.lora_config.scale
    for i in range(top.split, top.config.num_blocks):
        for proj in "qv":
            a = top.lora[f"blocks.{i}.{proj}.A"].data.astype(np.float64)
            b = top.lora[f"blocks.{i}.{proj}.B"].data.astype(np.float64)
            w = out[f"blocks.{i}.attn.{proj}.w"]
            w.data = (w.data.astype(np.float64) + sc * (a @ b)).astype(np.float32)
    return out


def forward_bottom(bottom: BottomModel, token_ids, grad_ids=None) -> Tensor:
    """Representation after the embedding layer and the first ``split`` blocks."""
    ids = np.asarray(token_ids)
    if ids.ndim != 2:
        raise nx.DimensionError(f"token ids must be (batch, seq), got {ids.shape}")
    h = embed(bottom.params["embed.token"], bottom.params["embed.pos"], ids, grad_ids)
    return run_bottom_blocks(bottom, h, ids != PAD)


def run_bottom_blocks(bottom: BottomModel, h: Tensor, mask) -> Tensor:
    for i in range(bottom.split):
        h = encoder_block(h, mask, bottom.block_params(i), bottom.config.num_heads)
    return h


def forward_top(top: TopModel, reps: Tensor, mask) -> Tensor:
    cfg = top.config
    if reps.data.ndim != 3 or reps.shape[-1] != cfg.embed_dim or reps.shape[1] > cfg.max_seq_len:
        raise nx.DimensionError(f"representation shape {reps.shape} does not fit model")
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != reps.shape[:2]:
        raise nx.DimensionError(f"mask shape {mask.shape} != {reps.shape[:2]}")
    h = reps
    sc = top.lora_config.scale if top.lora_config else 1.0
    for i in range(top.split, cfg.num_blocks):
        h = encoder_block(h, mask, top.block_params(i), cfg.num_heads, top.block_lora(i), sc)
    return classify(h, top.params)


# -- optimisation ------------------------------------------------------------

@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adamw_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState, lr: float,
               betas=(0.9, 0.999), weight_decay: float = 0.0, eps: float = 1e-8,
               decay: set[str] | None = None) -> dict[str, np.ndarray]:
    """One bias-corrected AdamW update, in place on ``params``.

    Weight decay is decoupled and only applied to names in ``decay``
    (all names when ``decay`` is None).
    """
    b1, b2 = betas
    state.t += 1
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        if weight_decay and (decay is None or name in decay):
            p -= np.float32(lr * weight_decay) * p
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype)
    return params


class AdamW:
    def __init__(self, params: dict[str, Tensor], betas=(0.9, 0.999), weight_decay: float = 0.01,
                 eps: float = 1e-8, decay: set[str] | None = None):
        self.params = params
        self.betas = betas
        self.weight_decay = weight_decay
        self.eps = eps
        self.decay = decay
        self.state = AdamState()

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def step(self, lr: float) -> None:
        arrays = {k: t.data for k, t in self.params.items()}
        grads = {k: t.grad for k, t in self.params.items() if t.grad is not None}
        adamw_step(arrays, grads, self.state, lr, self.betas, self.weight_decay, self.eps, self.decay)


def linear_lr(step: int, total_steps: int, base_lr: float = 3e-4) -> float:
    if total_steps <= 0:
        return base_lr
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return base_lr * (1.0 - step / total_steps)


# -- simulated pre-training -------------------------------------------------

@dataclass
class WarmupConfig:
    epochs: int = 1
    lr: float = 1e-3
    batch_size: int = 32
    mask_prob: float = 0.15
    seed: int = 0


def pretrain_mlm(plm: PLM, token_ids: np.ndarray, wcfg: WarmupConfig | None = None) -> list[float]:
    """Masked-token warm-up over a tokenised corpus.

    Masked positions are replaced with UNK and predicted through the (tied,
    fixed) token table. The token table itself stays fixed so the embedding
    geometry set at initialisation is kept; blocks and positions train.
    """
    wcfg = wcfg or WarmupConfig()
    rng = np.random.default_rng(wcfg.seed)
    ids_all = np.asarray(token_ids)
    table = plm.params["embed.token"]
    trainable = {k: t for k, t in plm.params.items() if k != "embed.token" and not k.startswith("head.w")
                 and not k.startswith("head.b")}
    for t in trainable.values():
        t.requires_grad = True
    opt = AdamW(trainable, weight_decay=0.0)
    out_w = Tensor(table.data.T.copy())
    losses = []
    n_batches = math.ceil(len(ids_all) / wcfg.batch_size)
    total = wcfg.epochs * n_batches
    step = 0
    for _ in range(wcfg.epochs):
        order = rng.permutation(len(ids_all))
        for bi in range(n_batches):
            batch = ids_all[order[bi * wcfg.batch_size:(bi + 1) * wcfg.batch_size]]
            content = batch > SEP
            pick = content & (rng.random(batch.shape) < wcfg.mask_prob)
            if not pick.any():
                step += 1
                continue
            rows, cols = np.nonzero(pick)
            inp = batch.copy()
            inp[pick] = UNK
            opt.zero_grad()
            with Graph() as g:
                h = embed(table, plm.params["embed.pos"], inp)
                for i in range(plm.config.num_blocks):
                    h = encoder_block(h, inp != PAD, plm.block_params(i), plm.config.num_heads)
                hm = nx.gather_positions(h, rows, cols)
                z = nx.layer_norm(hm, plm.params["head.ln.gamma"], plm.params["head.ln.beta"])
                loss = nx.cross_entropy(nx.matmul(z, out_w), batch[rows, cols])
                g.backward(loss)
            opt.step(linear_lr(step, total, wcfg.lr))
            losses.append(float(loss.data))
            step += 1
    for t in plm.params.values():
        t.requires_grad = False
        t.grad = None
    return losses
