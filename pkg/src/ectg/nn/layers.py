"""Standard layers on top of the tensor core: linear maps, embeddings,
layer norm, multi-head attention, pre-norm transformer blocks, and a GRU
cell.  Layers expose their trainables through params() so models can be
checkpointed by name."""

from __future__ import annotations

import numpy as np

from .tensor import (
    Tensor,
    add,
    layer_norm,
    masked_fill,
    matmul,
    mean_,
    mul,
    parameter,
    relu,
    reshape,
    sigmoid,
    softmax,
    sub,
    take_rows,
    tanh_,
    transpose,
)


def prefix_params(params: dict[str, Tensor], prefix: str) -> dict[str, Tensor]:
    return {f"{prefix}.{k}": v for k, v in params.items()}


def causal_mask(n: int) -> np.ndarray:
    """True above the diagonal = blocked future positions."""
    return np.triu(np.ones((n, n), dtype=bool), k=1)


class Linear:
    def __init__(self, rng, d_in: int, d_out: int, bias: bool = True):
        self.w = parameter(rng, (d_out, d_in))
        self.b = parameter(rng, (d_out,), scheme="zeros") if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim == 1:
            out = matmul(self.w, x)
        else:
            out = matmul(x, transpose(self.w))
        return add(out, self.b) if self.b is not None else out

    def params(self) -> dict[str, Tensor]:
        out = {"w": self.w}
        if self.b is not None:
            out["b"] = self.b
        return out


class Embedding:
    def __init__(self, rng, n: int, d: int):
        self.table = parameter(rng, (n, d))

    def __call__(self, ids) -> Tensor:
        return take_rows(self.table, ids)

    def params(self) -> dict[str, Tensor]:
        return {"table": self.table}


class LayerNorm:
    def __init__(self, rng, d: int, eps: float = 1e-5):
        self.gain = Tensor(np.ones(d), requires_grad=True)
        self.bias = parameter(rng, (d,), scheme="zeros")
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return add(mul(layer_norm(x, self.eps), self.gain), self.bias)

    def params(self) -> dict[str, Tensor]:
        return {"gain": self.gain, "bias": self.bias}


class FeedForward:
    def __init__(self, rng, d_model: int, d_hidden: int):
        self.lin1 = Linear(rng, d_model, d_hidden)
        self.lin2 = Linear(rng, d_hidden, d_model)

    def __call__(self, x: Tensor) -> Tensor:
        return self.lin2(relu(self.lin1(x)))

    def params(self) -> dict[str, Tensor]:
        return {**prefix_params(self.lin1.params(), "lin1"), **prefix_params(self.lin2.params(), "lin2")}


class MultiHeadAttention:
    """Scaled dot-product attention over unbatched (seq, d) inputs.

    Returns the projected output and the head-averaged attention matrix,
    which downstream copy mechanisms read as alignment weights.
    """

    def __init__(self, rng, d_model: int, n_heads: int):
        if d_model % n_heads:
            raise ValueError(f"d_model {d_model} not divisible by n_heads {n_heads}")
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.wq = Linear(rng, d_model, d_model, bias=False)
        self.wk = Linear(rng, d_model, d_model, bias=False)
        self.wv = Linear(rng, d_model, d_model, bias=False)
        self.wo = Linear(rng, d_model, d_model, bias=False)

    def __call__(self, query: Tensor, keyvalue: Tensor, mask: np.ndarray | None = None):
        lq, lk = query.shape[0], keyvalue.shape[0]
        h, dh = self.n_heads, self.d_head

        def split(t: Tensor, length: int) -> Tensor:
            return transpose(reshape(t, (length, h, dh)), (1, 0, 2))

        q = split(self.wq(query), lq)
        k = split(self.wk(keyvalue), lk)
        v = split(self.wv(keyvalue), lk)
        scores = mul(matmul(q, transpose(k, (0, 2, 1))), Tensor(1.0 / np.sqrt(dh)))
        if mask is not None:
            scores = masked_fill(scores, mask[None, :, :], -np.inf)
        attn = softmax(scores, axis=-1)
        ctx = matmul(attn, v)
        out = self.wo(reshape(transpose(ctx, (1, 0, 2)), (lq, h * dh)))
        attn_avg = mean_(attn, axis=0)
        return out, attn_avg

    def params(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for name, lin in (("wq", self.wq), ("wk", self.wk), ("wv", self.wv), ("wo", self.wo)):
            out.update(prefix_params(lin.params(), name))
        return out


class EncoderLayer:
    """Pre-norm self-attention block."""

    def __init__(self, rng, d_model: int, n_heads: int, d_ff: int):
        self.ln1 = LayerNorm(rng, d_model)
        self.attn = MultiHeadAttention(rng, d_model, n_heads)
        self.ln2 = LayerNorm(rng, d_model)
        self.ff = FeedForward(rng, d_model, d_ff)

    def __call__(self, x: Tensor, mask: np.ndarray | None = None) -> Tensor:
        normed = self.ln1(x)
        attn_out, _ = self.attn(normed, normed, mask)
        x = add(x, attn_out)
        return add(x, self.ff(self.ln2(x)))

    def params(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        out.update(prefix_params(self.ln1.params(), "ln1"))
        out.update(prefix_params(self.attn.params(), "attn"))
        out.update(prefix_params(self.ln2.params(), "ln2"))
        out.update(prefix_params(self.ff.params(), "ff"))
        return out


class DecoderLayer:
    """Pre-norm causal self-attention + cross-attention block."""

    def __init__(self, rng, d_model: int, n_heads: int, d_ff: int):
        self.ln1 = LayerNorm(rng, d_model)
        self.self_attn = MultiHeadAttention(rng, d_model, n_heads)
        self.ln2 = LayerNorm(rng, d_model)
        self.cross_attn = MultiHeadAttention(rng, d_model, n_heads)
        self.ln3 = LayerNorm(rng, d_model)
        self.ff = FeedForward(rng, d_model, d_ff)

    def __call__(self, x: Tensor, memory: Tensor, self_mask: np.ndarray | None):
        normed = self.ln1(x)
        attn_out, _ = self.self_attn(normed, normed, self_mask)
        x = add(x, attn_out)
        cross_out, cross_w = self.cross_attn(self.ln2(x), memory)
        x = add(x, cross_out)
        x = add(x, self.ff(self.ln3(x)))
        return x, cross_w

    def params(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        out.update(prefix_params(self.ln1.params(), "ln1"))
        out.update(prefix_params(self.self_attn.params(), "self_attn"))
        out.update(prefix_params(self.ln2.params(), "ln2"))
        out.update(prefix_params(self.cross_attn.params(), "cross_attn"))
        out.update(prefix_params(self.ln3.params(), "ln3"))
        out.update(prefix_params(self.ff.params(), "ff"))
        return out


class TransformerEncoder:
    def __init__(self, rng, d_model: int, n_heads: int, n_layers: int, d_ff: int | None = None):
        d_ff = d_ff or 4 * d_model
        self.layers = [EncoderLayer(rng, d_model, n_heads, d_ff) for _ in range(n_layers)]
        self.final_ln = LayerNorm(rng, d_model)

    def __call__(self, x: Tensor, mask: np.ndarray | None = None) -> Tensor:
        for layer in self.layers:
            x = layer(x, mask)
        return self.final_ln(x)

    def params(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for i, layer in enumerate(self.layers):
            out.update(prefix_params(layer.params(), f"layer{i}"))
        out.update(prefix_params(self.final_ln.params(), "final_ln"))
        return out


class TransformerDecoder:
    """Stack of decoder layers; exposes every layer's output so auxiliary
    heads can tap intermediate states, plus the last layer's head-averaged
    cross-attention."""

    def __init__(self, rng, d_model: int, n_heads: int, n_layers: int, d_ff: int | None = None):
        d_ff = d_ff or 4 * d_model
        self.layers = [DecoderLayer(rng, d_model, n_heads, d_ff) for _ in range(n_layers)]
        self.final_ln = LayerNorm(rng, d_model)

    def __call__(self, x: Tensor, memory: Tensor, causal: bool = True):
        mask = causal_mask(x.shape[0]) if causal else None
        layer_states: list[Tensor] = []
        cross_w = None
        for layer in self.layers:
            x, cross_w = layer(x, memory, mask)
            layer_states.append(x)
        return self.final_ln(x), cross_w, layer_states

    def params(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for i, layer in enumerate(self.layers):
            out.update(prefix_params(layer.params(), f"layer{i}"))
        out.update(prefix_params(self.final_ln.params(), "final_ln"))
        return out


class PositionEmbedding:
    def __init__(self, rng, max_len: int, d: int):
        self.max_len = max_len
        self.table = parameter(rng, (max_len, d))

    def __call__(self, length: int) -> Tensor:
        if length > self.max_len:
            raise ValueError(f"sequence length {length} exceeds positional table {self.max_len}")
        return take_rows(self.table, np.arange(length))

    def params(self) -> dict[str, Tensor]:
        return {"table": self.table}


class GRUCell:
    """Single-step GRU over 1-D vectors: h' = (1-z)*h + z*tanh(...)."""

    def __init__(self, rng, d_in: int, d_hidden: int):
        self.d_hidden = d_hidden
        self.wz = Linear(rng, d_in, d_hidden)
        self.uz = Linear(rng, d_hidden, d_hidden, bias=False)
        self.wr = Linear(rng, d_in, d_hidden)
        self.ur = Linear(rng, d_hidden, d_hidden, bias=False)
        self.wn = Linear(rng, d_in, d_hidden)
        self.un = Linear(rng, d_hidden, d_hidden, bias=False)

    def __call__(self, h: Tensor, x: Tensor) -> Tensor:
        z = sigmoid(add(self.wz(x), self.uz(h)))
        r = sigmoid(add(self.wr(x), self.ur(h)))
        n = tanh_(add(self.wn(x), self.un(mul(r, h))))
        one = Tensor(np.ones(self.d_hidden))
        return add(mul(sub(one, z), h), mul(z, n))

    def params(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for name, lin in (
            ("wz", self.wz), ("uz", self.uz),
            ("wr", self.wr), ("ur", self.ur),
            ("wn", self.wn), ("un", self.un),
        ):
            out.update(prefix_params(lin.params(), name))
        return out
