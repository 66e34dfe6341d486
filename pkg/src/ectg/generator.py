"""Response generation from context + predicted concepts.

The flat input sequence ([CLS] context utterances joined by [SEP], one
more [SEP], then the concept words) is re-encoded; a causal decoder with
cross-attention produces, per step, a gate-mixed distribution over the
base vocabulary extended with the source's out-of-vocabulary tokens:

    P(w) = P_copy * scatter(A_h) + (1 - P_copy) * P_gw

where A_h is the final-layer head-averaged cross-attention row and the
scatter routes each source position's mass to that token's extended id.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import nn
from .corpus import Vocab, BOS, EOS, CLS, SEP, UNK

logger = logging.getLogger(__name__)


@dataclass
class GeneratorInput:
    """Flattened source with copy bookkeeping.  ext_tokens are the source
    OOV strings in first-occurrence order; extended id = len(vocab) +
    index into ext_tokens."""

    ids: list[int]
    src_tokens: list[str]
    src_ext_ids: list[int]
    ext_tokens: list[str]
    vocab_size: int

    @property
    def ext_size(self) -> int:
        return self.vocab_size + len(self.ext_tokens)

    def ext_token(self, ext_id: int, vocab: Vocab) -> str:
        if ext_id < self.vocab_size:
            return vocab.token(ext_id)
        return self.ext_tokens[ext_id - self.vocab_size]

    def ext_lookup(self, token: str, vocab: Vocab) -> int:
        if token in vocab:
            return vocab.lookup(token)
        try:
            return self.vocab_size + self.ext_tokens.index(token)
        except ValueError:
            return UNK


def build_input(vocab: Vocab, context_tokens: list[list[str]], concepts: list[str], max_src_len: int = 256) -> GeneratorInput:
    """Assemble the source sequence.  Template:

        [CLS] u_1 [SEP] u_2 [SEP] ... u_n [SEP] c_1 ... c_m

    When over max_src_len, oldest utterances are dropped first (then the
    front of the sole remaining utterance); concepts are never dropped.
    """
    context = [list(t) for t in context_tokens]

    def total_len(ctx):
        return 1 + sum(len(u) + 1 for u in ctx) + len(concepts)

    while len(context) > 1 and total_len(context) > max_src_len:
        context = context[1:]
    if context and total_len(context) > max_src_len:
        overflow = total_len(context) - max_src_len
        context[0] = context[0][overflow:]

    tokens: list[str] = ["<cls>"]
    for utt in context:
        tokens.extend(utt)
        tokens.append("<sep>")
    tokens.extend(concepts)

    ids, ext_ids, ext_tokens = [], [], []
    ext_index: dict[str, int] = {}
    for tok in tokens:
        base = vocab.lookup(tok)
        ids.append(base)
        if tok in vocab:
            ext_ids.append(vocab.stoi[tok])
        else:
            if tok not in ext_index:
                ext_index[tok] = len(ext_tokens)
                ext_tokens.append(tok)
            ext_ids.append(len(vocab) + ext_index[tok])
    return GeneratorInput(ids=ids, src_tokens=tokens, src_ext_ids=ext_ids, ext_tokens=ext_tokens, vocab_size=len(vocab))


class ResponseGenerator:
    """Encoder/decoder with a shared token embedding (also used as the
    output projection) and a sigmoid copy gate."""

    def __init__(
        self,
        rng: np.random.Generator,
        vocab: Vocab,
        d_model: int = 128,
        n_heads: int = 4,
        max_src_len: int = 256,
        max_len: int = 32,
    ):
        self.vocab = vocab
        self.d_model = d_model
        self.token_emb = nn.Embedding(rng, len(vocab), d_model)
        self.enc_pos = nn.PositionEmbedding(rng, max_src_len, d_model)
        self.dec_pos = nn.PositionEmbedding(rng, max_len + 1, d_model)
        self.encoder = nn.TransformerEncoder(rng, d_model, n_heads, n_layers=2)
        self.decoder = nn.TransformerDecoder(rng, d_model, n_heads, n_layers=2)
        self.gate = nn.Linear(rng, d_model, 1)

    def params(self) -> dict[str, nn.Tensor]:
        out: dict[str, nn.Tensor] = {}
        out.update(nn.prefix_params(self.token_emb.params(), "token_emb"))
        out.update(nn.prefix_params(self.enc_pos.params(), "enc_pos"))
        out.update(nn.prefix_params(self.dec_pos.params(), "dec_pos"))
        out.update(nn.prefix_params(self.encoder.params(), "encoder"))
        out.update(nn.prefix_params(self.decoder.params(), "decoder"))
        out.update(nn.prefix_params(self.gate.params(), "gate"))
        return out


@dataclass
class CopyDistribution:
    attn: nn.Tensor       # (S,) source attention
    p_copy: nn.Tensor     # scalar gate in [0, 1]
    p_vocab: nn.Tensor    # (V,) generation distribution
    p_extended: nn.Tensor  # (V + n_oov,) final mixture


def mix_copy(attn: nn.Tensor, p_copy: nn.Tensor, p_vocab: nn.Tensor, src_ext_ids: list[int], ext_size: int) -> nn.Tensor:
    """The copy/generate mixture.  Copy mass scatters through the source
    position -> extended id map; generation mass covers the base vocab and
    leaves extended-only ids at exactly zero."""
    vocab_size = p_vocab.shape[0]
    gen_part = nn.mul(p_vocab, nn.sub(nn.Tensor(1.0), p_copy))
    if ext_size > vocab_size:
        gen_part = nn.concat([gen_part, nn.Tensor(np.zeros(ext_size - vocab_size))], axis=0)
    scatter = np.zeros((len(src_ext_ids), ext_size))
    for pos, ext_id in enumerate(src_ext_ids):
        scatter[pos, ext_id] = 1.0
    copy_part = nn.mul(nn.matmul(attn, nn.Tensor(scatter)), p_copy)
    return nn.add(gen_part, copy_part)


def encode_source(model: ResponseGenerator, gin: GeneratorInput) -> nn.Tensor:
    x = nn.take_rows(model.token_emb.table, gin.ids)
    x = nn.add(x, model.enc_pos(len(gin.ids)))
    return model.encoder(x)


def _decoder_pass(model: ResponseGenerator, gin: GeneratorInput, prefix_ids: list[int], H_ctx: nn.Tensor):
    """One causal pass over the prefix; returns per-position hidden states
    and cross-attention rows."""
    x = nn.take_rows(model.token_emb.table, prefix_ids)
    x = nn.add(x, model.dec_pos(len(prefix_ids)))
    states, cross_w, _ = model.decoder(x, H_ctx, causal=True)
    return states, cross_w


def _step_distribution(
    model: ResponseGenerator,
    gin: GeneratorInput,
    states: nn.Tensor,
    cross_w: nn.Tensor,
    t: int,
    force_copy: float | None,
) -> CopyDistribution:
    h_t = states[t]
    attn = cross_w[t]
    if force_copy is None:
        p_copy = nn.reshape(nn.sigmoid(model.gate(h_t)), ())
    else:
        p_copy = nn.Tensor(float(force_copy))
    logits = nn.matmul(model.token_emb.table, h_t)
    p_vocab = nn.softmax(logits)
    p_ext = mix_copy(attn, p_copy, p_vocab, gin.src_ext_ids, gin.ext_size)
    return CopyDistribution(attn=attn, p_copy=p_copy, p_vocab=p_vocab, p_extended=p_ext)


def decode_distribution(
    model: ResponseGenerator,
    gin: GeneratorInput,
    prefix_ext_ids: list[int],
    H_ctx: nn.Tensor | None = None,
    force_copy: float | None = None,
) -> CopyDistribution:
    """Next-token distribution after a generated prefix (extended ids;
    must start with BOS).  Copied OOV ids enter the decoder as UNK."""
    if not prefix_ext_ids or prefix_ext_ids[0] != BOS:
        raise ValueError("generation prefix must start with BOS")
    if H_ctx is None:
        H_ctx = encode_source(model, gin)
    base_ids = [i if i < gin.vocab_size else UNK for i in prefix_ext_ids]
    states, cross_w = _decoder_pass(model, gin, base_ids, H_ctx)
    return _step_distribution(model, gin, states, cross_w, len(base_ids) - 1, force_copy)


def generation_loss(
    model: ResponseGenerator,
    gin: GeneratorInput,
    reference_tokens: list[str],
    force_copy: float | None = None,
):
    """Teacher-forced mean NLL of the reference (targets live in the
    extended vocab, so copied OOV words are trainable targets).  Returns
    (loss, per-step CopyDistributions)."""
    if not reference_tokens:
        raise ValueError("empty reference response")
    targets = []
    for tok in reference_tokens:
        ext = gin.ext_lookup(tok, model.vocab)
        if ext == UNK and tok not in model.vocab:
            logger.warning("reference token %r not in extended vocab; using UNK", tok)
        targets.append(ext)
    targets.append(EOS)
    prefix = [BOS] + [t if t < gin.vocab_size else UNK for t in targets[:-1]]
    H_ctx = encode_source(model, gin)
    states, cross_w = _decoder_pass(model, gin, prefix, H_ctx)
    steps = [_step_distribution(model, gin, states, cross_w, t, force_copy) for t in range(len(prefix))]
    terms = [nn.neg(nn.log_(steps[t].p_extended[targets[t]])) for t in range(len(targets))]
    total = terms[0]
    for term in terms[1:]:
        total = nn.add(total, term)
    return nn.mul(total, nn.Tensor(1.0 / len(terms))), steps


def generate(
    model: ResponseGenerator,
    gin: GeneratorInput,
    max_len: int = 32,
    mode: str = "greedy",
    k: int = 5,
    rng: np.random.Generator | None = None,
    force_copy: float | None = None,
) -> list[str]:
    tokens, _ = generate_with_trace(model, gin, max_len=max_len, mode=mode, k=k, rng=rng, force_copy=force_copy)
    return tokens


def generate_with_trace(
    model: ResponseGenerator,
    gin: GeneratorInput,
    max_len: int = 32,
    mode: str = "greedy",
    k: int = 5,
    rng: np.random.Generator | None = None,
    force_copy: float | None = None,
) -> tuple[list[str], list[bool]]:
    """Autoregressive decode until EOS or max_len.  Returns the surface
    tokens and, per token, whether it was produced through an
    extended-vocabulary (copy-only) id."""
    if mode not in ("greedy", "top_k"):
        raise ValueError(f"unknown decoding mode {mode!r}")
    if mode == "top_k" and rng is None:
        raise ValueError("top_k decoding needs a seeded rng")
    H_ctx = encode_source(model, gin)
    prefix = [BOS]
    out_tokens: list[str] = []
    copied: list[bool] = []
    for _ in range(max_len):
        dist = decode_distribution(model, gin, prefix, H_ctx=H_ctx, force_copy=force_copy)
        probs = dist.p_extended.data
        if mode == "greedy":
            nxt = int(np.argmax(probs))
        else:
            top = np.argsort(-probs)[:k]
            p = probs[top] / probs[top].sum()
            nxt = int(rng.choice(top, p=p))
        if nxt == EOS:
            break
        prefix.append(nxt)
        out_tokens.append(gin.ext_token(nxt, model.vocab))
        copied.append(nxt >= gin.vocab_size)
    return out_tokens, copied
