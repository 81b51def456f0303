"""Tiny pre-norm causal transformer with injectable low-rank adapters.

Projection weights use the ``[d_out, d_in]`` layout, so an adapter pair
``A[r, d_in]``, ``B[d_out, r]`` plugs in next to its host projection as
``linear(linear(x, A), B) * alpha / r``.
"""
from __future__ import annotations

import copy
import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor

ATTN_PROJECTIONS = ("q", "k", "v", "o")
MLP_PROJECTIONS = ("up", "down")
IGNORE_INDEX = -100


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 12
    d_model: int = 128
    n_heads: int = 4
    d_ff: int = 256
    vocab_size: int = 64
    max_seq: int = 24
    seed: int = 0
    dtype: str = "float64"
    name: str = "desk"
    family: str = "desk"

    def __post_init__(self):
        if self.n_layers < 2:
            raise ValueError(f"n_layers must be >= 2, got {self.n_layers}")
        if self.d_model < 1 or self.n_heads < 1 or self.d_model % self.n_heads:
            raise ValueError(f"d_model {self.d_model} must be divisible by n_heads {self.n_heads}")
        if self.d_ff < 1:
            raise ValueError(f"d_ff must be positive, got {self.d_ff}")
        if self.vocab_size < 8:
            raise ValueError(f"vocab_size must be >= 8, got {self.vocab_size}")
        if self.max_seq < 1:
            raise ValueError(f"max_seq must be positive, got {self.max_seq}")
        if self.dtype not in ("float64", "float32"):
            raise ValueError(f"dtype must be float64 or float32, got {self.dtype!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown model config field(s): {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "ModelConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class LoraPlan:
    """Which layers get adapters, and with what ranks."""

    selected: tuple[int, ...]
    attn_rank: int = 16
    mlp_rank: int = 16
    alpha: float = 32.0
    attn_targets: tuple[str, ...] = ("q", "v", "o")
    mlp_targets: tuple[str, ...] = ("up", "down")

    def __post_init__(self):
        sel = tuple(sorted(set(int(s) for s in self.selected)))
        object.__setattr__(self, "selected", sel)
        object.__setattr__(self, "attn_targets", tuple(self.attn_targets))
        object.__setattr__(self, "mlp_targets", tuple(self.mlp_targets))
        if not sel:
            raise ValueError("plan must select at least one layer")
        if self.attn_rank < 1 or self.mlp_rank < 1:
            raise ValueError(f"ranks must be >= 1, got attn={self.attn_rank} mlp={self.mlp_rank}")
        if not self.attn_targets and not self.mlp_targets:
            raise ValueError("plan targets no projection at all")
        bad = [t for t in self.attn_targets if t not in ATTN_PROJECTIONS]
        bad += [t for t in self.mlp_targets if t not in MLP_PROJECTIONS]
        if bad:
            raise ValueError(f"unknown adapter target(s): {bad}")

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("selected", "attn_targets", "mlp_targets"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LoraPlan":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


class LoraAdapter:
    """Low-rank update ``(alpha / r) * B @ A`` attached to one projection."""

    def __init__(self, d_in: int, d_out: int, rank: int, alpha: float, host_module: str,
                 target: str, layer_id: int, rng: np.random.Generator, dtype):
        self.rank = rank
        self.alpha = float(alpha)
        self.host_module = host_module
        self.target = target
        self.layer_id = layer_id
        self.A = Parameter(rng.normal(0.0, 0.02, size=(rank, d_in)).astype(dtype), trainable=True,
                           layer_id=layer_id, name=f"layers.{layer_id}.lora_{target}.A")
        self.B = Parameter(np.zeros((d_out, rank), dtype=dtype), trainable=True,
                           layer_id=layer_id, name=f"layers.{layer_id}.lora_{target}.B")

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    def __call__(self, x: Tensor) -> Tensor:
        return ad.scale(ad.linear(ad.linear(x, self.A), self.B), self.scaling)

    def parameters(self) -> list[Parameter]:
        return [self.A, self.B]


class Block:
    def __init__(self, cfg: ModelConfig, layer_id: int, rng: np.random.Generator, dtype):
        d, f = cfg.d_model, cfg.d_ff
        self.layer_id = layer_id
        std_out = 1.0 / math.sqrt(2 * cfg.n_layers)

        def proj(name, d_out, d_in, extra=1.0):
            w = rng.normal(0.0, extra / math.sqrt(d_in), size=(d_out, d_in)).astype(dtype)
            return Parameter(w, layer_id=layer_id, name=f"layers.{layer_id}.{name}")

        self.attn_norm = Parameter(np.ones(d, dtype=dtype), layer_id=layer_id,
                                   name=f"layers.{layer_id}.attn_norm")
        self.weights = {
            "q": proj("q", d, d),
            "k": proj("k", d, d),
            "v": proj("v", d, d),
            "o": proj("o", d, d, std_out),
        }
        self.mlp_norm = Parameter(np.ones(d, dtype=dtype), layer_id=layer_id,
                                  name=f"layers.{layer_id}.mlp_norm")
        self.weights["up"] = proj("up", f, d)
        self.weights["down"] = proj("down", d, f, std_out)
        self.adapters: dict[str, LoraAdapter] = {}

    def _proj(self, name: str, x: Tensor) -> Tensor:
        out = ad.linear(x, self.weights[name])
        adapter = self.adapters.get(name)
        if adapter is not None:
            out = ad.add(out, adapter(x))
        return out

    def __call__(self, x: Tensor, n_heads: int) -> Tensor:
        h = ad.rms_norm(x, self.attn_norm)
        att = ad.causal_attention(self._proj("q", h), self._proj("k", h), self._proj("v", h), n_heads)
        x = ad.add(x, self._proj("o", att))
        h = ad.rms_norm(x, self.mlp_norm)
        return ad.add(x, self._proj("down", ad.gelu(self._proj("up", h))))

    def base_parameters(self) -> list[Parameter]:
        w = self.weights
        return [self.attn_norm, w["q"], w["k"], w["v"], w["o"], self.mlp_norm, w["up"], w["down"]]

    def named_parameters(self) -> Iterator[tuple[str, Parameter]]:
        for p in self.base_parameters():
            yield p.name, p
        for name in sorted(self.adapters):
            for p in self.adapters[name].parameters():
                yield p.name, p


class TransformerModel:
    def __init__(self, config: ModelConfig):
        self.config = config
        dtype = np.dtype(config.dtype)
        self.dtype = dtype
        rng = np.random.default_rng(config.seed)
        d = config.d_model
        self.tok_emb = Parameter(rng.normal(0.0, 1.0, size=(config.vocab_size, d)).astype(dtype),
                                 name="tok_emb")
        self.pos_emb = Parameter(rng.normal(0.0, 1.0, size=(config.max_seq, d)).astype(dtype),
                                 name="pos_emb")
        self.blocks = [Block(config, i, rng, dtype) for i in range(config.n_layers)]
        self.final_norm = Parameter(np.ones(d, dtype=dtype), name="final_norm")
        self.head = Parameter(rng.normal(0.0, 0.02, size=(config.vocab_size, d)).astype(dtype),
                              name="head")
        self.plan: LoraPlan | None = None

    @property
    def n_layers(self) -> int:
        return self.config.n_layers

    def embed(self, ids) -> Tensor:
        ids = np.asarray(ids)
        if ids.ndim != 2:
            raise ValueError(f"expected [batch, seq] token ids, got shape {ids.shape}")
        t = ids.shape[1]
        if t > self.config.max_seq:
            raise ValueError(f"sequence length {t} exceeds max_seq {self.config.max_seq}")
        return ad.add(ad.embedding(self.tok_emb, ids), self.pos_emb_slice(t))

    def run_layers(self, x: Tensor, start: int = 0, stop: int | None = None) -> Tensor:
        for block in self.blocks[start:stop]:
            x = block(x, self.config.n_heads)
        return x

    def logits_from(self, x: Tensor) -> Tensor:
        return ad.linear(ad.rms_norm(x, self.final_norm), self.head)

    def head_loss(self, x: Tensor, targets) -> Tensor:
        return ad.softmax_cross_entropy(self.logits_from(x), targets, IGNORE_INDEX)

    def forward(self, ids) -> Tensor:
        return self.logits_from(self.run_layers(self.embed(ids)))

    __call__ = forward

    def pos_emb_slice(self, t: int) -> Tensor:
        if t == self.config.max_seq:
            return self.pos_emb
        if self.pos_emb.trainable:
            # only trainable during base pretraining
            return ad.embedding(self.pos_emb, np.arange(t))
        return Tensor(self.pos_emb.data[:t])

    def loss(self, batch) -> Tensor:
        inputs, targets = batch
        return ad.softmax_cross_entropy(self.forward(inputs), targets, IGNORE_INDEX)

    def named_parameters(self) -> list[tuple[str, Parameter]]:
        out = [("tok_emb", self.tok_emb), ("pos_emb", self.pos_emb)]
        for block in self.blocks:
            out.extend(block.named_parameters())
        out += [("final_norm", self.final_norm), ("head", self.head)]
        return out

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def base_parameters(self) -> list[Parameter]:
        blocks = [p for b in self.blocks for p in b.base_parameters()]
        return [self.tok_emb, self.pos_emb, *blocks, self.final_norm, self.head]

    def adapter_parameters(self) -> list[Parameter]:
        return [p for b in self.blocks for a in b.adapters.values() for p in a.parameters()]

    def layer_parameters(self, layer_id: int) -> list[Parameter]:
        return [p for _, p in self.blocks[layer_id].named_parameters()]

    def adapters(self) -> list[LoraAdapter]:
        return [b.adapters[k] for b in self.blocks for k in sorted(b.adapters)]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def clone(self) -> "TransformerModel":
        return copy.deepcopy(self)


def build_model(config: ModelConfig) -> TransformerModel:
    """Deterministically initialised model; every parameter starts frozen.

    Projections draw from N(0, 1/fan_in), with the residual-writing ones
    (o, down) further scaled by 1/sqrt(2L). Embeddings are N(0, 1); the
    output head is N(0, 0.02^2) so an untrained model predicts near-uniformly.
    """
    return TransformerModel(config)


def _adapter_seed(seed: int, layer_id: int, target: str) -> np.random.Generator:
    # per-(layer, target) streams: an adapter's init does not depend on which
    # other layers were selected
    idx = (ATTN_PROJECTIONS + MLP_PROJECTIONS).index(target)
    return np.random.default_rng([seed, layer_id, idx])


def inject_lora(model: TransformerModel, plan: LoraPlan, seed: int | None = None) -> TransformerModel:
    """Attach adapters in place for every selected layer; returns ``model``."""
    if model.plan is not None or model.adapter_parameters():
        raise ValueError("model already carries LoRA adapters")
    L = model.n_layers
    out_of_range = [s for s in plan.selected if not 0 <= s < L]
    if out_of_range:
        raise ValueError(f"plan selects layer(s) {out_of_range} outside [0, {L})")
    seed = model.config.seed if seed is None else seed
    cfg = model.config
    dims = {"q": (cfg.d_model, cfg.d_model), "k": (cfg.d_model, cfg.d_model),
            "v": (cfg.d_model, cfg.d_model), "o": (cfg.d_model, cfg.d_model),
            "up": (cfg.d_model, cfg.d_ff), "down": (cfg.d_ff, cfg.d_model)}
    for p in model.base_parameters():
        p.trainable = False
    for layer in plan.selected:
        block = model.blocks[layer]
        for host, targets, rank in (("attention", plan.attn_targets, plan.attn_rank),
                                    ("mlp", plan.mlp_targets, plan.mlp_rank)):
            for target in targets:
                d_in, d_out = dims[target]
                block.adapters[target] = LoraAdapter(
                    d_in, d_out, rank, plan.alpha, host, target, layer,
                    _adapter_seed(seed, layer, target), model.dtype)
    model.plan = plan
    return model


def count_trainable(model: TransformerModel) -> int:
    return int(sum(p.size for p in model.parameters() if p.trainable))


def expected_adapter_params(config: ModelConfig, plan: LoraPlan) -> int:
    """Closed form: sum over adapters of r * (d_in + d_out)."""
    d, f = config.d_model, config.d_ff
    attn = sum(plan.attn_rank * (d + d) for _ in plan.attn_targets)
    mlp = sum(plan.mlp_rank * (d + f) for _ in plan.mlp_targets)
    return len(plan.selected) * (attn + mlp)


def parameter_hash(model: TransformerModel, include_adapters: bool = True) -> str:
    h = hashlib.sha256()
    params = model.named_parameters() if include_adapters else [
        (p.name, p) for p in model.base_parameters()]
    for name, p in params:
        h.update(name.encode())
        h.update(np.ascontiguousarray(p.data).tobytes())
    return h.hexdigest()


# --------------------------------------------------------------------------
# checkpoint file
#
#   bytes 0..7    magic b"SELORA01"
#   bytes 8..15   little-endian uint64 header length H
#   next H bytes  UTF-8 JSON {"config": {...}, "plan": {...}|null,
#                 "params": [{"name", "shape", "dtype", "offset", "nbytes"}]}
#   remainder     raw little-endian parameter data, offsets relative to here
# --------------------------------------------------------------------------

MAGIC = b"SELORA01"


def save_checkpoint(model: TransformerModel, path) -> None:
    entries, blobs, offset = [], [], 0
    for name, p in model.named_parameters():
        arr = np.ascontiguousarray(p.data, dtype=p.data.dtype.newbyteorder("<"))
        raw = arr.tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": arr.dtype.name,
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({
        "config": model.config.to_dict(),
        "plan": model.plan.to_dict() if model.plan else None,
        "params": entries,
    }, sort_keys=True).encode()
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for raw in blobs:
            fh.write(raw)
    tmp.replace(path)


def load_checkpoint(path) -> TransformerModel:
    blob = Path(path).read_bytes()
    if blob[:8] != MAGIC:
        raise ValueError(f"{path}: not a selora checkpoint")
    (hlen,) = struct.unpack("<Q", blob[8:16])
    header = json.loads(blob[16:16 + hlen])
    body = memoryview(blob)[16 + hlen:]
    model = build_model(ModelConfig.from_dict(header["config"]))
    if header["plan"] is not None:
        inject_lora(model, LoraPlan.from_dict(header["plan"]))
    params = dict(model.named_parameters())
    if set(params) != {e["name"] for e in header["params"]}:
        raise ValueError(f"{path}: parameter names do not match the stored config/plan")
    for e in header["params"]:
        raw = body[e["offset"]:e["offset"] + e["nbytes"]]
        arr = np.frombuffer(raw, dtype=np.dtype(e["dtype"]).newbyteorder("<")).reshape(e["shape"])
        p = params[e["name"]]
        if p.shape != arr.shape:
            raise ValueError(f"{path}: shape mismatch for {e['name']}")
        p.data = np.array(arr, dtype=p.data.dtype)
    return model
