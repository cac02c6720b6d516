"""Small transformer encoder-decoder trained with masked, label-smoothed NLL.

Label tokens have no embedding row of their own: they are embedded as the
mean of the embeddings of the speech units that pronounce them, the way a
subword tokenizer would build a word from pieces.  That is what lets a label the model never saw in training
still carry information when it appears in an option list.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import EmptyLossSupport, SchemaError, SequenceTooLong, VocabularyMismatch

DTYPE = torch.float64
DTYPES = {"float64": torch.float64, "float32": torch.float32}


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int = 64
    n_heads: int = 2
    n_enc_layers: int = 2
    n_dec_layers: int = 2
    ffn_width: int = 128
    max_len: int = 256
    label_smoothing: float = 0.1
    spell_labels: bool = True
    seed: int = 0
    dtype: str = "float32"
    positions: str = "rotary"
    init: str = "mimetic"
    loss_reduction: str = "sequence"

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise SchemaError("d_model must be divisible by n_heads")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise SchemaError("label_smoothing must lie in [0, 1)")
        if self.vocab_size < 1 or self.max_len < 2:
            raise SchemaError("vocab_size and max_len must be positive")
        if self.init not in ("mimetic", "default"):
            raise SchemaError("init must be 'mimetic' or 'default'")
        if self.positions not in ("rotary", "learned"):
            raise SchemaError("positions must be 'rotary' or 'learned'")
        if self.loss_reduction not in ("sequence", "token"):
            raise SchemaError("loss_reduction must be 'sequence' or 'token'")
        if self.dtype not in DTYPES:
            raise SchemaError(f"dtype must be one of {sorted(DTYPES)}")

    @property
    def torch_dtype(self) -> torch.dtype:
        return DTYPES[self.dtype]


def spelling_matrix(vocab) -> tuple[torch.Tensor, torch.Tensor]:
    """(V, V) pronunciation weights and a (V, 1) own-row mask.

    A label token has no embedding row of its own: it embeds as the mean of
    the embeddings of the acoustic units in its pronunciation.  Every other
    token keeps its own row.
    """
    from .tasks import pronounce

    n = len(vocab)
    spell = torch.zeros(n, n, dtype=DTYPE)
    own = torch.ones(n, 1, dtype=DTYPE)
    for lab in vocab.label_tokens:
        units = [u for u in pronounce(lab) if u in vocab.ids]
        if not units:
            continue
        i = vocab.id(lab)
        own[i] = 0.0
        for u in units:
            spell[i, vocab.id(u)] += 1.0 / len(units)
    return spell, own


def rotate(x: torch.Tensor, base: float = 10000.0) -> torch.Tensor:
    """Rotary position encoding over the last dim of (B, H, T, dh)."""
    T, dh = x.shape[-2], x.shape[-1]
    half = dh // 2
    freq = base ** (-torch.arange(half, dtype=x.dtype) / half)
    ang = torch.arange(T, dtype=x.dtype)[:, None] * freq[None]
    cos, sin = ang.cos(), ang.sin()
    a, b = x[..., :half], x[..., half : 2 * half]
    out = torch.cat([a * cos - b * sin, a * sin + b * cos], dim=-1)
    if dh % 2:
        out = torch.cat([out, x[..., -1:]], dim=-1)
    return out


class Attention(nn.Module):
    def __init__(self, d, n_heads, rotary=False):
        super().__init__()
        self.h = n_heads
        self.rotary = rotary
        self.q = nn.Linear(d, d)
        self.k = nn.Linear(d, d)
        self.v = nn.Linear(d, d)
        self.o = nn.Linear(d, d)

    def forward(self, x, mem, block):
        # block: bool (B or 1, Tq, Tk), True where attention is forbidden
        B, Tq, d = x.shape
        Tk = mem.shape[1]
        dh = d // self.h
        q = self.q(x).view(B, Tq, self.h, dh).transpose(1, 2)
        k = self.k(mem).view(B, Tk, self.h, dh).transpose(1, 2)
        v = self.v(mem).view(B, Tk, self.h, dh).transpose(1, 2)
        if self.rotary:
            q, k = rotate(q), rotate(k)
        out = F.scaled_dot_product_attention(q, k, v, attn_mask=~block[:, None])
        out = out.transpose(1, 2).reshape(B, Tq, d)
        return self.o(out)


class FeedForward(nn.Module):
    def __init__(self, d, width):
        super().__init__()
        self.up = nn.Linear(d, width)
        self.down = nn.Linear(width, d)

    def forward(self, x):
        return self.down(F.gelu(self.up(x)))


class EncoderLayer(nn.Module):
    def __init__(self, cfg):
        super().__init__()
        self.ln1 = nn.LayerNorm(cfg.d_model)
        self.att = Attention(cfg.d_model, cfg.n_heads, cfg.positions == "rotary")
        self.ln2 = nn.LayerNorm(cfg.d_model)
        self.ffn = FeedForward(cfg.d_model, cfg.ffn_width)

    def forward(self, x, block):
        h = self.ln1(x)
        x = x + self.att(h, h, block)
        return x + self.ffn(self.ln2(x))


class DecoderLayer(nn.Module):
    def __init__(self, cfg):
        super().__init__()
        self.ln1 = nn.LayerNorm(cfg.d_model)
        self.self_att = Attention(cfg.d_model, cfg.n_heads, cfg.positions == "rotary")
        self.ln2 = nn.LayerNorm(cfg.d_model)
        self.cross_att = Attention(cfg.d_model, cfg.n_heads)
        self.ln3 = nn.LayerNorm(cfg.d_model)
        self.ffn = FeedForward(cfg.d_model, cfg.ffn_width)

    def forward(self, x, mem, self_block, cross_block):
        h = self.ln1(x)
        x = x + self.self_att(h, h, self_block)
        x = x + self.cross_att(self.ln2(x), mem, cross_block)
        return x + self.ffn(self.ln3(x))


class Seq2Seq(nn.Module):
    def __init__(self, cfg: ModelConfig, spelling=None):
        super().__init__()
        self.cfg = cfg
        d = cfg.d_model
        gen = torch.Generator().manual_seed(cfg.seed)
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(cfg.seed)
            self.tok_emb = nn.Embedding(cfg.vocab_size, d, dtype=DTYPE)
            if cfg.positions == "learned":
                self.enc_pos = nn.Embedding(cfg.max_len, d, dtype=DTYPE)
                self.dec_pos = nn.Embedding(cfg.max_len, d, dtype=DTYPE)
            self.encoder = nn.ModuleList(EncoderLayer(cfg) for _ in range(cfg.n_enc_layers))
            self.decoder = nn.ModuleList(DecoderLayer(cfg) for _ in range(cfg.n_dec_layers))
            self.enc_ln = nn.LayerNorm(d, dtype=DTYPE)
            self.dec_ln = nn.LayerNorm(d, dtype=DTYPE)
            self.out = nn.Linear(d, cfg.vocab_size, dtype=DTYPE)
        if cfg.init == "mimetic":
            # query and key start equal so attention initially favours similar content
            for mod in self.modules():
                if isinstance(mod, Attention):
                    with torch.no_grad():
                        w = torch.randn(d, d, generator=gen, dtype=DTYPE) * d**-0.5
                        mod.q.weight.copy_(w)
                        mod.k.weight.copy_(w)
        tables = [self.tok_emb] + ([self.enc_pos, self.dec_pos] if cfg.positions == "learned" else [])
        for emb in tables:
            with torch.no_grad():
                emb.weight.normal_(0.0, d**-0.5, generator=gen)
        if spelling is None or not cfg.spell_labels:
            spell = torch.zeros(cfg.vocab_size, cfg.vocab_size, dtype=DTYPE)
            own = torch.ones(cfg.vocab_size, 1, dtype=DTYPE)
        else:
            spell, own = spelling
            if spell.shape != (cfg.vocab_size, cfg.vocab_size):
                raise SchemaError("spelling matrix does not match vocab_size")
            # spelled labels start with a zero output row: a label never used as a target
            # keeps the same row as every other such label, so none of them is favoured
            labels = own[:, 0] == 0
            with torch.no_grad():
                self.out.weight[labels] = 0.0
                self.out.bias[labels] = 0.0
        self.to(cfg.torch_dtype)
        self.register_buffer("spell", spell.to(cfg.torch_dtype), persistent=False)
        self.register_buffer("own", own.to(cfg.torch_dtype), persistent=False)

    def embedding_table(self):
        w = self.tok_emb.weight
        return w * self.own.to(w.dtype) + self.spell.to(w.dtype) @ w

    def embed(self, ids):
        return F.embedding(ids, self.embedding_table())

    def encode(self, enc, enc_pad):
        S = enc.shape[1]
        if S > self.cfg.max_len:
            raise SequenceTooLong(f"encoder input of length {S} exceeds max_len={self.cfg.max_len}")
        x = self.embed(enc)
        if self.cfg.positions == "learned":
            x = x + self.enc_pos.weight[:S]
        block = enc_pad[:, None, :].expand(-1, S, -1)
        for layer in self.encoder:
            x = layer(x, block)
        return self.enc_ln(x)

    def decode(self, mem, enc_pad, dec):
        return self.out(self.decode_hidden(mem, enc_pad, dec))

    def decode_hidden(self, mem, enc_pad, dec):
        T = dec.shape[1]
        if T > self.cfg.max_len:
            raise SequenceTooLong(f"decoder input of length {T} exceeds max_len={self.cfg.max_len}")
        x = self.embed(dec)
        if self.cfg.positions == "learned":
            x = x + self.dec_pos.weight[:T]
        causal = torch.ones(T, T, dtype=torch.bool).triu(1)[None]
        cross = enc_pad[:, None, :].expand(-1, T, -1)
        for layer in self.decoder:
            x = layer(x, mem, causal, cross)
        return self.dec_ln(x)

    def forward(self, enc, enc_pad, dec):
        return self.decode(self.encode(enc, enc_pad), enc_pad, dec)

    def logits(self, encoder_input, decoder_tokens) -> np.ndarray:
        """Logits (len(decoder_tokens), vocab_size) for a single example."""
        enc = torch.as_tensor([list(encoder_input)], dtype=torch.long)
        dec = torch.as_tensor([list(decoder_tokens)], dtype=torch.long)
        with torch.no_grad():
            out = self(enc, torch.zeros_like(enc, dtype=torch.bool), dec)
        return out[0].numpy()


def forward(model: Seq2Seq, encoder_input, decoder_tokens) -> np.ndarray:
    return model.logits(encoder_input, decoder_tokens)


def build_model(cfg: ModelConfig, vocab=None) -> Seq2Seq:
    return Seq2Seq(cfg, spelling_matrix(vocab) if vocab is not None else None)


# --- loss ---------------------------------------------------------------


def smoothed_nll_terms(logits: torch.Tensor, targets: torch.Tensor, eps: float) -> torch.Tensor:
    """Per-row (1-eps)*NLL(target) + eps*mean NLL over the vocabulary."""
    lp = torch.log_softmax(logits, dim=-1)
    nll = -lp.gather(-1, targets[:, None]).squeeze(-1)
    uniform = -lp.mean(dim=-1)
    return (1.0 - eps) * nll + eps * uniform


def smoothed_nll(logits: torch.Tensor, targets: torch.Tensor, mask: torch.Tensor, eps: float) -> torch.Tensor:
    """Mean over mask-true positions of (1-eps)*NLL(target) + eps*mean NLL over vocab.

    Positions outside the mask are dropped before any arithmetic, so their
    targets cannot influence the result.
    """
    mask = torch.as_tensor(mask, dtype=torch.bool)
    if not bool(mask.any()):
        raise EmptyLossSupport("loss mask selects no positions")
    logits = torch.as_tensor(logits)
    targets = torch.as_tensor(targets, dtype=torch.long)
    return smoothed_nll_terms(logits[mask], targets[mask], eps).mean()


loss = smoothed_nll


@dataclass
class Batch:
    enc: torch.Tensor
    enc_pad: torch.Tensor
    dec_in: torch.Tensor
    targets: torch.Tensor
    mask: torch.Tensor


def collate(seqs, pad_id: int) -> Batch:
    """Right-pad a list of TrainingSequence into teacher-forcing tensors."""
    B = len(seqs)
    S = max(len(s.encoder_input) for s in seqs)
    T = max(len(s.decoder_tokens) for s in seqs) - 1
    enc = torch.full((B, S), pad_id, dtype=torch.long)
    enc_pad = torch.ones((B, S), dtype=torch.bool)
    dec_in = torch.full((B, T), pad_id, dtype=torch.long)
    targets = torch.full((B, T), pad_id, dtype=torch.long)
    mask = torch.zeros((B, T), dtype=torch.bool)
    for b, s in enumerate(seqs):
        n = len(s.encoder_input)
        enc[b, :n] = torch.as_tensor(s.encoder_input)
        enc_pad[b, :n] = False
        toks = torch.as_tensor(s.decoder_tokens)
        m = len(toks) - 1
        dec_in[b, :m] = toks[:-1]
        targets[b, :m] = toks[1:]
        mask[b, :m] = torch.as_tensor(s.loss_mask[1:])
    return Batch(enc, enc_pad, dec_in, targets, mask)


def batch_loss(model: Seq2Seq, batch: Batch) -> torch.Tensor:
    if not bool(batch.mask.any()):
        raise EmptyLossSupport("loss mask selects no positions")
    hidden = model.decode_hidden(model.encode(batch.enc, batch.enc_pad), batch.enc_pad, batch.dec_in)
    # project only the supervised positions; the rest never reach the loss
    logits = model.out(hidden[batch.mask])
    terms = smoothed_nll_terms(logits, batch.targets[batch.mask], model.cfg.label_smoothing)
    if model.cfg.loss_reduction == "token":
        return terms.mean()
    # each sequence's own masked mean, then the mean over sequences, so a
    # one-token answer weighs as much as a long tag sequence
    counts = batch.mask.sum(dim=1)
    weights = (1.0 / counts.clamp(min=1).to(terms.dtype))[:, None].expand_as(batch.mask)[batch.mask]
    return (terms * weights).sum() / (counts > 0).sum()


def backward(model: Seq2Seq, batch: Batch) -> tuple[float, dict[str, torch.Tensor]]:
    """Loss value and the gradient of every named parameter."""
    model.zero_grad(set_to_none=False)
    value = batch_loss(model, batch)
    value.backward()
    grads = {}
    for name, p in model.named_parameters():
        grads[name] = p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p)
    return float(value.detach()), grads


class AdamW:
    """Adam with decoupled weight decay on matrix-shaped parameters."""

    def __init__(self, params, betas=(0.9, 0.99), eps=1e-6, weight_decay=0.01):
        self.params = list(params)
        self.b1, self.b2 = betas
        self.eps = eps
        self.wd = weight_decay
        self.t = 0
        self.m = [torch.zeros_like(p) for p in self.params]
        self.v = [torch.zeros_like(p) for p in self.params]

    @torch.no_grad()
    def step(self, lr: float):
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m.mul_(self.b1).add_(g, alpha=1.0 - self.b1)
            v.mul_(self.b2).addcmul_(g, g, value=1.0 - self.b2)
            if self.wd and p.dim() >= 2:
                p.mul_(1.0 - lr * self.wd)
            p.addcdiv_(m / c1, (v / c2).sqrt().add_(self.eps), value=-lr)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {"t": np.array(self.t)}
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            out[f"m{i}"] = m.numpy().copy()
            out[f"v{i}"] = v.numpy().copy()
        return out

    def load_arrays(self, arrays) -> None:
        self.t = int(arrays["t"])
        for i in range(len(self.params)):
            self.m[i] = torch.from_numpy(np.array(arrays[f"m{i}"]))
            self.v[i] = torch.from_numpy(np.array(arrays[f"v{i}"]))


# --- checkpoints ----------------------------------------------------------


def save_checkpoint(directory, model: Seq2Seq, vocab_hash: str, step: int, extra: dict | None = None, optimizer: AdamW | None = None) -> Path:
    """``header.json`` (config, vocabulary hash, step) + ``params.npz``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    header = {"model_config": asdict(model.cfg), "vocab_hash": vocab_hash, "step": int(step)}
    if extra:
        header.update(extra)
    arrays = {k: v.detach().numpy().copy() for k, v in model.state_dict().items()}
    np.savez(directory / "params.npz", **arrays)
    if optimizer is not None:
        np.savez(directory / "optimizer.npz", **optimizer.state_arrays())
    (directory / "header.json").write_text(json.dumps(header, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return directory


def read_header(directory) -> dict:
    path = Path(directory) / "header.json"
    if not path.exists():
        raise FileNotFoundError(path)
    return json.loads(path.read_text(encoding="utf-8"))


def load_checkpoint(directory, vocab) -> tuple[Seq2Seq, dict]:
    """Rebuild the model stored in ``directory``; refuses a different vocabulary."""
    directory = Path(directory)
    header = read_header(directory)
    if header.get("vocab_hash") != vocab.hash:
        raise VocabularyMismatch(
            f"checkpoint vocabulary {header.get('vocab_hash', '?')[:12]} != current {vocab.hash[:12]}"
        )
    cfg = ModelConfig(**header["model_config"])
    model = build_model(cfg, vocab)
    with np.load(directory / "params.npz") as arrays:
        state = {k: torch.from_numpy(np.array(arrays[k])) for k in arrays.files}
    model.load_state_dict(state)
    return model, header
