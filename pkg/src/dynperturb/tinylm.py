"""A tiny pre-norm decoder-only transformer with feed-forward activation hooks.

Intervention sites are the post-GELU feed-forward hidden units of every layer
at the final position of the sequence. All parameters are float64 so that the
finite-difference checks in the test suite are meaningful.
"""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import store

log = logging.getLogger(__name__)

DTYPE = torch.float64
PERTURB_TYPES = ("noise", "zero", "scale")


class InputError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 256
    context_len: int = 16
    n_layers: int = 2
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 128
    seed: int = 0

    def __post_init__(self):
        for name in ("vocab_size", "context_len", "n_layers", "d_model", "n_heads", "d_ff"):
            if getattr(self, name) < 1:
                raise InputError(f"{name} must be >= 1")
        if self.d_model % self.n_heads:
            raise InputError("d_model must be divisible by n_heads")


@dataclass(frozen=True)
class ActivationSite:
    layer: int
    neuron: int


@dataclass
class ActivationTrace:
    """Feed-forward hidden activations at the final position, one row per layer."""

    acts: torch.Tensor  # (n_layers, d_ff)

    @property
    def sigma(self) -> torch.Tensor:
        return self.acts.std(dim=1, unbiased=False)

    def layer(self, l: int) -> torch.Tensor:
        return self.acts[l]


def _noise_seed(rng_seed: int, layer: int) -> int:
    return int(np.random.SeedSequence([int(rng_seed) & 0xFFFFFFFF, layer]).generate_state(1)[0])


@dataclass
class Intervention:
    """Temporary edit of final-position feed-forward activations.

    ``strengths`` maps a layer index to a length-``d_ff`` vector in [0, 1]
    (zero means the neuron is untouched). ``sigma`` holds per-layer activation
    scales for the noise operator, normally taken from the unperturbed trace.
    """

    strengths: dict[int, torch.Tensor]
    kind: str
    magnitude: float
    rng_seed: int = 0
    sigma: torch.Tensor | None = None

    @classmethod
    def from_sites(cls, sites: dict[ActivationSite, float], d_ff: int, kind: str, magnitude: float, **kw):
        strengths: dict[int, torch.Tensor] = {}
        for site, s in sites.items():
            vec = strengths.setdefault(site.layer, torch.zeros(d_ff, dtype=DTYPE))
            vec[site.neuron] = s
        return cls(strengths, kind, magnitude, **kw)

    def sites(self) -> dict[ActivationSite, float]:
        out = {}
        for l, vec in sorted(self.strengths.items()):
            for i in torch.nonzero(vec).flatten().tolist():
                out[ActivationSite(l, i)] = float(vec[i])
        return out

    def validate(self, config: ModelConfig) -> None:
        if self.kind not in PERTURB_TYPES:
            raise InputError(f"unknown perturbation type {self.kind!r}")
        if not self.magnitude >= 0:
            raise InputError("magnitude must be >= 0")
        for l, vec in self.strengths.items():
            if not 0 <= l < config.n_layers:
                raise InputError(f"site layer {l} out of range")
            if vec.shape != (config.d_ff,):
                raise InputError(f"strength vector for layer {l} must have length {config.d_ff}")
            if bool(((vec < 0) | (vec > 1)).any()):
                raise InputError("strengths must lie in [0, 1]")

    def apply(self, layer: int, last: torch.Tensor) -> torch.Tensor:
        s = self.strengths.get(layer)
        if s is None or self.magnitude == 0 or not bool(s.any()):
            return last
        m = float(self.magnitude)
        if self.kind == "zero":
            return last * (1.0 - min(1.0, m) * s)
        if self.kind == "scale":
            return last * (1.0 + m * s)
        if self.sigma is None:
            sigma = last.std(dim=-1, unbiased=False, keepdim=True).detach()
        else:
            sigma = self.sigma[layer]
        gen = torch.Generator().manual_seed(_noise_seed(self.rng_seed, layer))
        g = torch.randn(last.shape[-1], generator=gen, dtype=DTYPE)
        return last + m * s * sigma * g


@dataclass
class Steering:
    """Additive steering: h <- h + coef * v_l at the final position."""

    vectors: dict[int, torch.Tensor]
    coef: float

    def validate(self, config: ModelConfig) -> None:
        for l, v in self.vectors.items():
            if not 0 <= l < config.n_layers or v.shape != (config.d_ff,):
                raise InputError(f"bad steering vector for layer {l}")

    def apply(self, layer: int, last: torch.Tensor) -> torch.Tensor:
        v = self.vectors.get(layer)
        if v is None or self.coef == 0:
            return last
        return last + self.coef * v


class LayerNorm(nn.Module):
    def __init__(self, d):
        super().__init__()
        self.gain = nn.Parameter(torch.ones(d, dtype=DTYPE))
        self.bias = nn.Parameter(torch.zeros(d, dtype=DTYPE))

    def forward(self, x):
        return F.layer_norm(x, x.shape[-1:], self.gain, self.bias, eps=1e-5)


class Block(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d, f = cfg.d_model, cfg.d_ff
        self.n_heads = cfg.n_heads
        self.ln1 = LayerNorm(d)
        self.qkv = nn.Linear(d, 3 * d, dtype=DTYPE)
        self.proj = nn.Linear(d, d, dtype=DTYPE)
        self.ln2 = LayerNorm(d)
        self.ff_in = nn.Linear(d, f, dtype=DTYPE)
        self.ff_out = nn.Linear(f, d, dtype=DTYPE)

    def attend(self, x):
        B, T, D = x.shape
        H = self.n_heads
        q, k, v = self.qkv(self.ln1(x)).split(D, dim=-1)
        q, k, v = (t.view(B, T, H, D // H).transpose(1, 2) for t in (q, k, v))
        att = (q @ k.transpose(-1, -2)) / math.sqrt(D // H)
        causal = torch.ones(T, T, dtype=torch.bool).tril()
        att = att.masked_fill(~causal, float("-inf")).softmax(dim=-1)
        y = (att @ v).transpose(1, 2).reshape(B, T, D)
        return x + self.proj(y)

    def hidden(self, x):
        return F.gelu(self.ff_in(self.ln2(x)))


EditFn = Callable[[int, torch.Tensor], torch.Tensor]


class TinyLM(nn.Module):
    def __init__(self, config: ModelConfig, init: bool = True):
        super().__init__()
        self.config = config
        c = config
        self.tok_emb = nn.Parameter(torch.zeros(c.vocab_size, c.d_model, dtype=DTYPE))
        self.pos_emb = nn.Parameter(torch.zeros(c.context_len, c.d_model, dtype=DTYPE))
        self.blocks = nn.ModuleList(Block(c) for _ in range(c.n_layers))
        self.ln_f = LayerNorm(c.d_model)
        if init:
            self._init_weights()

    def _init_weights(self):
        gen = torch.Generator().manual_seed(self.config.seed)
        with torch.no_grad():
            for name, p in self.named_parameters():
                if name.endswith("gain"):
                    p.fill_(1.0)
                elif name.endswith("bias") or name.endswith(".bias"):
                    p.zero_()
                else:
                    p.copy_(torch.randn(p.shape, generator=gen, dtype=DTYPE) * 0.02)
            # residual-output projections scaled down with depth
            for b in self.blocks:
                b.proj.weight.mul_(1 / math.sqrt(2 * self.config.n_layers))
                b.ff_out.weight.mul_(1 / math.sqrt(2 * self.config.n_layers))

    @classmethod
    def zeros(cls, config: ModelConfig) -> "TinyLM":
        m = cls(config, init=False)
        with torch.no_grad():
            for p in m.parameters():
                p.zero_()
        return m

    def run(self, idx: torch.Tensor, edit: EditFn | None = None):
        """Batched pass over ``idx`` (B, T).

        ``edit(layer, h_last)`` may replace the final-position feed-forward
        hidden activations (B, d_ff) of each layer. Returns logits (B, T, V),
        the final normalized hidden states (B, T, D) and the list of
        final-position activations actually used per layer.
        """
        B, T = idx.shape
        x = self.tok_emb[idx] + self.pos_emb[:T]
        used = []
        for l, blk in enumerate(self.blocks):
            x = blk.attend(x)
            h = blk.hidden(x)
            if edit is not None:
                last = edit(l, h[:, -1, :])
                h = torch.cat([h[:, :-1, :], last.unsqueeze(1)], dim=1)
            used.append(h[:, -1, :])
            x = x + blk.ff_out(h)
        hid = self.ln_f(x)
        logits = hid @ self.tok_emb.T
        return logits, hid, used

    def forward(self, idx: torch.Tensor) -> torch.Tensor:
        return self.run(idx)[0]


def check_tokens(model: TinyLM, tokens: Sequence[int]) -> torch.Tensor:
    c = model.config
    toks = [int(t) for t in tokens]
    if not toks:
        raise InputError("token sequence is empty")
    if len(toks) > c.context_len:
        raise InputError(f"sequence length {len(toks)} exceeds context_len {c.context_len}")
    if any(t < 0 or t >= c.vocab_size for t in toks):
        raise InputError(f"token id out of range [0, {c.vocab_size})")
    return torch.tensor([toks], dtype=torch.long)


@torch.no_grad()
def forward(model: TinyLM, tokens: Sequence[int], intervention=None) -> tuple[torch.Tensor, ActivationTrace]:
    """Next-token logits at the final position and the activation trace."""
    idx = check_tokens(model, tokens)
    edit = None
    if intervention is not None:
        intervention.validate(model.config)
        edit = intervention.apply
    logits, _, used = model.run(idx, edit)
    return logits[0, -1].clone(), ActivationTrace(torch.stack([u[0] for u in used]))


def forward_with_intervention(model: TinyLM, tokens, intervention) -> tuple[torch.Tensor, ActivationTrace]:
    return forward(model, tokens, intervention)


@torch.no_grad()
def generate_greedy(model: TinyLM, prompt: Sequence[int], max_new_tokens: int,
                    intervention=None, eos_token: int | None = None) -> list[int]:
    seq = [int(t) for t in prompt]
    check_tokens(model, seq)
    for _ in range(max_new_tokens):
        logits, _ = forward(model, seq, intervention)
        nxt = int(torch.argmax(logits))
        seq.append(nxt)
        if nxt == eos_token or len(seq) >= model.config.context_len:
            break
    return seq


@torch.no_grad()
def embed_input(model: TinyLM, tokens: Sequence[int]) -> torch.Tensor:
    idx = check_tokens(model, tokens)
    _, hid, _ = model.run(idx)
    return hid[0].mean(dim=0)


@torch.no_grad()
def sequence_logprob(model: TinyLM, tokens: Sequence[int]) -> float:
    if len(tokens) < 2:
        raise InputError("sequence_logprob needs at least 2 tokens")
    idx = check_tokens(model, tokens)
    logp = model(idx)[0, :-1].log_softmax(dim=-1)
    return float(logp.gather(1, idx[0, 1:, None]).mean())


@dataclass
class TrainSettings:
    steps: int = 1500
    lr: float = 3e-3
    betas: tuple[float, float] = (0.9, 0.98)
    weight_decay: float = 0.0
    eval_every: int = 100
    answer_position: int = 3
    act_l1: float = 0.0


@dataclass
class TrainResult:
    model: TinyLM
    history: list[tuple[int, float]] = field(default_factory=list)
    accuracy: float = 0.0


def lm_loss(model: TinyLM, batch: torch.Tensor) -> torch.Tensor:
    logits = model(batch[:, :-1])
    return F.cross_entropy(logits.reshape(-1, logits.shape[-1]), batch[:, 1:].reshape(-1))


def train_tiny_lm(corpus: Sequence[Sequence[int]], config: ModelConfig,
                  settings: TrainSettings | None = None,
                  reserved: tuple[int, int, int] | None = None) -> TrainResult:
    """Full-batch Adam on next-token cross-entropy over ``corpus``.

    ``reserved=(layer, start, stop)`` holds that block of feed-forward neurons
    at exactly zero (weights and gradients) so it can be planted later.
    """
    settings = settings or TrainSettings()
    if not corpus:
        raise InputError("corpus is empty")
    if len({len(s) for s in corpus}) != 1:
        raise InputError("corpus sequences must share one length")
    model = TinyLM(config)
    batch = torch.tensor([list(s) for s in corpus], dtype=torch.long)
    if batch.max() >= config.vocab_size or batch.shape[1] > config.context_len:
        raise InputError("corpus does not fit the model config")
    keep = {}
    if reserved is not None:
        l, a, b = reserved
        blk = model.blocks[l]
        with torch.no_grad():
            blk.ff_in.weight[a:b] = 0
            blk.ff_in.bias[a:b] = 0
            blk.ff_out.weight[:, a:b] = 0
        keep = {blk.ff_in.weight: (slice(a, b),), blk.ff_in.bias: (slice(a, b),),
                blk.ff_out.weight: (slice(None), slice(a, b))}
    opt = torch.optim.Adam(model.parameters(), lr=settings.lr, betas=settings.betas,
                           weight_decay=settings.weight_decay)
    history = []
    for step in range(settings.steps + 1):
        loss = lm_loss(model, batch)
        if not torch.isfinite(loss):
            raise TrainingError(f"pretraining diverged at step {step}: loss={float(loss.detach())}")
        if step % settings.eval_every == 0 or step == settings.steps:
            history.append((step, float(loss.detach())))
        if step == settings.steps:
            break
        opt.zero_grad()
        loss.backward()
        for p, sl in keep.items():
            p.grad[sl] = 0
        opt.step()
    model.eval()
    acc = answer_accuracy(model, batch, settings.answer_position)
    log.info("tinylm trained: loss %.4f, answer accuracy %.3f", history[-1][1], acc)
    return TrainResult(model, history, acc)


def plant_block(model: TinyLM, corpus: Sequence[Sequence[int]], reserved: tuple[int, int, int],
                settings: TrainSettings, seed: int = 0) -> TrainResult:
    """Train only the reserved final-layer neuron block on ``corpus``, in place.

    Everything upstream of the block is frozen, so the residual stream and the
    contribution of the other neurons are computed once.
    """
    l, a, b = reserved
    if l != model.config.n_layers - 1:
        raise InputError("the planted block must sit in the final layer")
    batch = torch.tensor([list(s) for s in corpus], dtype=torch.long)
    blk = model.blocks[l]
    idx = batch[:, :-1]
    with torch.no_grad():
        x = model.tok_emb[idx] + model.pos_emb[: idx.shape[1]]
        for blk_i in model.blocks[:l]:
            x = blk_i.attend(x)
            x = x + blk_i.ff_out(blk_i.hidden(x))
        x = blk.attend(x)
        z = blk.ln2(x)
        h = blk.hidden(x)
        h[..., a:b] = 0
        base = x + blk.ff_out(h)
    gen = torch.Generator().manual_seed(seed)
    w_in = (torch.randn(b - a, z.shape[-1], generator=gen, dtype=DTYPE) * 0.02).requires_grad_(True)
    b_in = torch.zeros(b - a, dtype=DTYPE, requires_grad=True)
    w_out = torch.zeros(z.shape[-1], b - a, dtype=DTYPE, requires_grad=True)
    opt = torch.optim.Adam([w_in, b_in, w_out], lr=settings.lr, betas=settings.betas)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=max(1, settings.steps))
    # only the answer prediction is fitted; the rest of the sequence is already learned
    pos = settings.answer_position - 1
    z, base = z[:, pos], base[:, pos]
    targets = batch[:, settings.answer_position]
    history = []
    for step in range(settings.steps + 1):
        act = F.gelu(z @ w_in.T + b_in)
        hid = model.ln_f(base + act @ w_out.T)
        logits = hid @ model.tok_emb.detach().T
        loss = F.cross_entropy(logits, targets)
        if settings.act_l1:
            loss = loss + settings.act_l1 * act.abs().sum(-1).mean()
        if not torch.isfinite(loss):
            raise TrainingError(f"planting diverged at step {step}: loss={float(loss.detach())}")
        if step % settings.eval_every == 0 or step == settings.steps:
            history.append((step, float(loss.detach())))
        if step == settings.steps:
            break
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
    with torch.no_grad():
        blk.ff_in.weight[a:b] = w_in
        blk.ff_in.bias[a:b] = b_in
        blk.ff_out.weight[:, a:b] = w_out
    model.zero_grad(set_to_none=True)
    model.eval()
    acc = answer_accuracy(model, batch, settings.answer_position)
    log.info("planted block %s: loss %.4f, answer accuracy %.3f", reserved, history[-1][1], acc)
    return TrainResult(model, history, acc)


@torch.no_grad()
def answer_accuracy(model: TinyLM, batch: torch.Tensor, pos: int) -> float:
    pred = model(batch[:, :pos])[:, -1].argmax(dim=-1)
    return float((pred == batch[:, pos]).double().mean())


def weights_checksum(model: TinyLM) -> str:
    h = hashlib.sha256()
    for name, p in sorted(model.state_dict().items()):
        h.update(name.encode())
        h.update(p.detach().cpu().numpy().tobytes())
    return h.hexdigest()


def save_weights(model: TinyLM, path) -> None:
    arrays = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    store.save_arrays(path, "tinylm", arrays, {"config": asdict(model.config)})


def load_weights(path) -> TinyLM:
    arrays, meta = store.load_arrays(path, kind="tinylm")
    model = TinyLM(ModelConfig(**meta["config"]), init=False)
    model.load_state_dict({k: torch.from_numpy(v) for k, v in arrays.items()})
    model.eval()
    return model
