"""Small post-LN transformer encoder-decoder with beam search and attention traces."""

from __future__ import annotations

import csv
import json
import logging
import math
import random
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigurationError, GradientCheckError, TrainingError

log = logging.getLogger(__name__)

CKPT_MAGIC = b"SAPCKPT\x00"
CKPT_VERSION = 1


@dataclass
class ModelConfig:
    vocab_size: int
    enc_layers: int = 2
    dec_layers: int = 2
    model_dim: int = 64
    heads: int = 4
    ffn_dim: int = 256
    dropout: float = 0.1
    tie_embeddings: bool = True
    label_smoothing: float = 0.1
    logit_scale: float = 0.5  # tied head only; keeps the initial loss near log |V|
    max_positions: int = 512
    pad_id: int = 0
    bos_id: int = 1
    eos_id: int = 2
    init_seed: int = 0  # weights never depend on ambient torch RNG state

    def __post_init__(self):
        if self.model_dim % self.heads:
            raise ConfigurationError("model_dim must be divisible by heads")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigurationError("dropout must be in [0, 1)")
        if self.enc_layers < 0 or self.dec_layers < 0:
            raise ConfigurationError("layer counts must be non-negative")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ConfigurationError("label_smoothing must be in [0, 1)")
        if self.logit_scale <= 0.0:
            raise ConfigurationError("logit_scale must be positive")

    @classmethod
    def paper_scale(cls, vocab_size: int, **kw) -> "ModelConfig":
        base = dict(enc_layers=6, dec_layers=6, model_dim=512, heads=8, ffn_dim=2048)
        base.update(kw)
        return cls(vocab_size, **base)


@dataclass
class TrainConfig:
    max_steps: int = 2000
    batch_tokens: int = 2048
    lr: float = 2e-3
    warmup_steps: int = 200
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9
    clip_norm: float = 1.0
    checkpoint_every: int = 250
    seed: int = 0

    def __post_init__(self):
        if self.max_steps < 0 or self.batch_tokens < 1 or self.checkpoint_every < 1:
            raise ConfigurationError("train counts must be positive")


def sinusoidal_table(n_pos: int, dim: int) -> torch.Tensor:
    pos = torch.arange(n_pos, dtype=torch.float64)[:, None]
    div = torch.exp(torch.arange(0, dim, 2, dtype=torch.float64) * (-math.log(10000.0) / dim))
    table = torch.zeros(n_pos, dim, dtype=torch.float64)
    table[:, 0::2] = torch.sin(pos * div)
    table[:, 1::2] = torch.cos(pos * div)[:, : dim // 2]
    return table


class MultiHeadAttention(nn.Module):
    def __init__(self, dim: int, heads: int, dropout: float):
        super().__init__()
        self.heads = heads
        self.head_dim = dim // heads
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(dim, dim)
        self.v_proj = nn.Linear(dim, dim)
        self.out_proj = nn.Linear(dim, dim)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x, mem, mask):
        """``mask`` is boolean, broadcastable to (B, H, Tq, Tk); True marks blocked keys."""
        b, tq, d = x.shape
        tk = mem.shape[1]
        q = self.q_proj(x).view(b, tq, self.heads, self.head_dim).transpose(1, 2)
        k = self.k_proj(mem).view(b, tk, self.heads, self.head_dim).transpose(1, 2)
        v = self.v_proj(mem).view(b, tk, self.heads, self.head_dim).transpose(1, 2)
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.head_dim)
        scores = scores.masked_fill(mask, float("-inf"))
        weights = torch.softmax(scores, dim=-1)
        out = (self.dropout(weights) @ v).transpose(1, 2).reshape(b, tq, d)
        return self.out_proj(out), weights


class FeedForward(nn.Module):
    # no dropout on the hidden activation; it dominated step time on CPU
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(F.relu(self.fc1(x)))


class EncoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.self_attn = MultiHeadAttention(cfg.model_dim, cfg.heads, cfg.dropout)
        self.ffn = FeedForward(cfg.model_dim, cfg.ffn_dim)
        self.norm1 = nn.LayerNorm(cfg.model_dim)
        self.norm2 = nn.LayerNorm(cfg.model_dim)
        self.dropout = nn.Dropout(cfg.dropout)

    def forward(self, x, mask):
        a, _ = self.self_attn(x, x, mask)
        x = self.norm1(x + self.dropout(a))
        return self.norm2(x + self.dropout(self.ffn(x)))


class DecoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.self_attn = MultiHeadAttention(cfg.model_dim, cfg.heads, cfg.dropout)
        self.cross_attn = MultiHeadAttention(cfg.model_dim, cfg.heads, cfg.dropout)
        self.ffn = FeedForward(cfg.model_dim, cfg.ffn_dim)
        self.norm1 = nn.LayerNorm(cfg.model_dim)
        self.norm2 = nn.LayerNorm(cfg.model_dim)
        self.norm3 = nn.LayerNorm(cfg.model_dim)
        self.dropout = nn.Dropout(cfg.dropout)

    def forward(self, y, mem, self_mask, mem_mask):
        a, w_self = self.self_attn(y, y, self_mask)
        y = self.norm1(y + self.dropout(a))
        c, w_cross = self.cross_attn(y, mem, mem_mask)
        y = self.norm2(y + self.dropout(c))
        return self.norm3(y + self.dropout(self.ffn(y))), w_self, w_cross


class TranslationModel(nn.Module):
    """Encoder-decoder over a shared source/target vocabulary.

    Models P(y_i | x, y_<i); the output projection is tied to the embedding
    table unless ``tie_embeddings`` is off.
    """

    def __init__(self, cfg: ModelConfig, tokenizer=None):
        super().__init__()
        self.config = cfg
        self.tokenizer = tokenizer
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(cfg.init_seed)
            self._build(cfg)

    def _build(self, cfg: ModelConfig):
        self.embedding = nn.Embedding(cfg.vocab_size, cfg.model_dim, padding_idx=cfg.pad_id)
        nn.init.normal_(self.embedding.weight, mean=0.0, std=cfg.model_dim ** -0.5)
        with torch.no_grad():
            self.embedding.weight[cfg.pad_id].zero_()
        self.register_buffer("positions", sinusoidal_table(cfg.max_positions, cfg.model_dim).float(),
                             persistent=False)
        self.encoder = nn.ModuleList(EncoderLayer(cfg) for _ in range(cfg.enc_layers))
        self.decoder = nn.ModuleList(DecoderLayer(cfg) for _ in range(cfg.dec_layers))
        self.output_bias = nn.Parameter(torch.zeros(cfg.vocab_size))
        if not cfg.tie_embeddings:
            self.output = nn.Linear(cfg.model_dim, cfg.vocab_size, bias=False)
        self.dropout = nn.Dropout(cfg.dropout)

    def _embed(self, ids):
        x = self.embedding(ids) * math.sqrt(self.config.model_dim)
        if ids.shape[1] > self.config.max_positions:
            raise ConfigurationError(f"sequence of length {ids.shape[1]} exceeds max_positions")
        x = x + self.positions[: ids.shape[1]].to(x.dtype)
        return self.dropout(x)

    def encode(self, src):
        mask = (src == self.config.pad_id)[:, None, None, :]
        x = self._embed(src)
        for layer in self.encoder:
            x = layer(x, mask)
        return x, mask

    def decode(self, tgt_in, memory, mem_mask, need_attn=False):
        t = tgt_in.shape[1]
        causal = torch.triu(torch.ones(t, t, dtype=torch.bool, device=tgt_in.device), 1)
        self_mask = causal[None, None] | (tgt_in == self.config.pad_id)[:, None, None, :]
        # a padded query row would otherwise see no keys at all
        self_mask = self_mask & ~torch.eye(t, dtype=torch.bool, device=tgt_in.device)[None, None]
        y = self._embed(tgt_in)
        self_w, cross_w = [], []
        for layer in self.decoder:
            y, ws, wc = layer(y, memory, self_mask, mem_mask)
            if need_attn:
                self_w.append(ws)
                cross_w.append(wc)
        if self.config.tie_embeddings:
            logits = (y * self.config.logit_scale) @ self.embedding.weight.t() + self.output_bias
        else:
            logits = self.output(y) + self.output_bias
        if need_attn:
            return logits, self_w, cross_w
        return logits

    def forward(self, src, tgt_in, need_attn=False):
        memory, mem_mask = self.encode(src)
        return self.decode(tgt_in, memory, mem_mask, need_attn)


# --- loss / batching ----------------------------------------------------------

def label_smoothed_nll(logits, target, smoothing: float, pad_id: int):
    """Returns (summed smoothed loss, summed nll, non-pad token count)."""
    lprobs = F.log_softmax(logits.float() if logits.dtype == torch.float16 else logits, dim=-1)
    mask = target != pad_id
    nll = -lprobs.gather(-1, target.unsqueeze(-1)).squeeze(-1)
    smooth = -lprobs.mean(dim=-1)
    loss = (1.0 - smoothing) * nll + smoothing * smooth
    return (loss * mask).sum(), (nll * mask).sum(), mask.sum()


def _pad(seqs, pad_id, dtype=torch.long):
    width = max(len(s) for s in seqs)
    out = torch.full((len(seqs), width), pad_id, dtype=dtype)
    for i, s in enumerate(seqs):
        if len(s):
            out[i, : len(s)] = torch.as_tensor(list(s), dtype=dtype)
    return out


def make_batch(examples, cfg: ModelConfig):
    src = _pad([list(s) + [cfg.eos_id] for s, _ in examples], cfg.pad_id)
    tgt_in = _pad([[cfg.bos_id] + list(t) for _, t in examples], cfg.pad_id)
    tgt_out = _pad([list(t) + [cfg.eos_id] for _, t in examples], cfg.pad_id)
    return src, tgt_in, tgt_out


def token_batches(examples, batch_tokens: int, rng: random.Random | None = None):
    """Group example indices into batches of roughly ``batch_tokens`` padded tokens."""
    order = list(range(len(examples)))
    if rng is not None:
        rng.shuffle(order)
    # sort within chunks so batches are length-homogeneous but still shuffled
    chunk = 100 * max(1, batch_tokens // 32)
    batches = []
    for c in range(0, len(order), chunk):
        part = sorted(order[c : c + chunk], key=lambda i: len(examples[i][0]) + len(examples[i][1]))
        cur, width = [], 0
        for i in part:
            w = max(len(examples[i][0]), len(examples[i][1])) + 1
            if cur and max(width, w) * (len(cur) + 1) > batch_tokens:
                batches.append(cur)
                cur, width = [], 0
            cur.append(i)
            width = max(width, w)
        if cur:
            batches.append(cur)
    if rng is not None:
        rng.shuffle(batches)
    return batches


def evaluate_loss(model: TranslationModel, examples, batch_tokens: int = 4096) -> float:
    if not examples:
        return float("nan")
    model.eval()
    total, count = 0.0, 0
    with torch.no_grad():
        for idx in token_batches(examples, batch_tokens):
            src, tin, tout = make_batch([examples[i] for i in idx], model.config)
            _, nll, n = label_smoothed_nll(model(src, tin), tout, 0.0, model.config.pad_id)
            total += float(nll)
            count += int(n)
    return total / max(count, 1)


@dataclass
class TrainResult:
    model: TranslationModel
    curve: list = field(default_factory=list)  # (step, loss, dev_loss)
    best_step: int = 0
    best_dev_loss: float = float("nan")

    def write_curve(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "loss", "dev_loss"])
            for step, loss, dev in self.curve:
                w.writerow([step, f"{loss:.6f}", "" if dev is None else f"{dev:.6f}"])


def train(model: TranslationModel, dataset: Sequence, cfg: TrainConfig,
          dev: Sequence = (), log_every: int = 100) -> TrainResult:
    """Train on (src_ids, tgt_ids) examples; returns the best checkpoint by dev loss.

    Without a dev set the final parameters are returned. Determinism requires
    a fixed seed and a fixed torch thread count.
    """
    if len(dataset) == 0:
        raise TrainingError("empty training dataset")
    torch.manual_seed(cfg.seed)
    rng = random.Random(cfg.seed)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr, betas=(cfg.beta1, cfg.beta2), eps=cfg.eps)
    warm = max(1, cfg.warmup_steps)
    sched = torch.optim.lr_scheduler.LambdaLR(
        opt, lambda s: min((s + 1) / warm, math.sqrt(warm / (s + 1)))
    )
    mc = model.config
    result = TrainResult(model)
    best_state, best_dev = None, float("inf")
    step, running, running_n = 0, 0.0, 0
    batches: list = []
    while step < cfg.max_steps:
        if not batches:
            batches = token_batches(dataset, cfg.batch_tokens, rng)
        batch_id = len(batches)
        idx = batches.pop()
        model.train()
        src, tin, tout = make_batch([dataset[i] for i in idx], mc)
        loss_sum, _, ntok = label_smoothed_nll(model(src, tin), tout, mc.label_smoothing, mc.pad_id)
        loss = loss_sum / ntok
        if not torch.isfinite(loss):
            raise TrainingError(f"non-finite loss at step {step} (batch {batch_id}, size {len(idx)})")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        if cfg.clip_norm > 0:
            nn.utils.clip_grad_norm_(model.parameters(), cfg.clip_norm)
        opt.step()
        sched.step()
        step += 1
        running += loss.item()
        running_n += 1
        if step % cfg.checkpoint_every == 0 or step == cfg.max_steps:
            dev_loss = evaluate_loss(model, dev) if dev else None
            result.curve.append((step, running / running_n, dev_loss))
            if step % log_every == 0 or step == cfg.max_steps:
                log.info("step %d loss %.4f dev %s", step, running / running_n, dev_loss)
            running, running_n = 0.0, 0
            if dev_loss is not None and dev_loss < best_dev:
                best_dev = dev_loss
                best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
                result.best_step = step
    if best_state is not None:
        model.load_state_dict(best_state)
        result.best_dev_loss = best_dev
    else:
        result.best_step = step
    model.eval()
    return result


# --- decoding -------------------------------------------------------------------

def _max_len(src_len: int, cfg: ModelConfig, max_len: int | None) -> int:
    limit = max_len if max_len is not None else 2 * src_len + 10
    return max(1, min(limit, cfg.max_positions - 1))


def _strip(seq, eos_id):
    out = []
    for t in seq:
        if t == eos_id:
            break
        out.append(int(t))
    return out


@torch.no_grad()
def greedy_decode(model: TranslationModel, sources: Sequence[Sequence[int]], max_len: int | None = None):
    """Batched greedy decoding; returns token lists without BOS/EOS."""
    cfg = model.config
    model.eval()
    if not sources:
        return []
    src = _pad([list(s) + [cfg.eos_id] for s in sources], cfg.pad_id)
    memory, mem_mask = model.encode(src)
    limit = _max_len(src.shape[1], cfg, max_len)
    ys = torch.full((len(sources), 1), cfg.bos_id, dtype=torch.long)
    done = torch.zeros(len(sources), dtype=torch.bool)
    for _ in range(limit):
        logits = model.decode(ys, memory, mem_mask)[:, -1]
        nxt = logits.argmax(-1)
        nxt = torch.where(done, torch.full_like(nxt, cfg.pad_id), nxt)
        ys = torch.cat([ys, nxt[:, None]], dim=1)
        done |= nxt == cfg.eos_id
        if bool(done.all()):
            break
    return [_strip([t for t in row[1:].tolist() if t != cfg.pad_id], cfg.eos_id) for row in ys]


@torch.no_grad()
def score(model: TranslationModel, sources, outputs, normalize: bool = True) -> list[float]:
    """Log-probability of each output (with EOS) given its source, optionally per token."""
    cfg = model.config
    model.eval()
    src, tin, tout = make_batch(list(zip(sources, outputs)), cfg)
    lprobs = F.log_softmax(model(src, tin), dim=-1)
    tok = lprobs.gather(-1, tout.unsqueeze(-1)).squeeze(-1)
    mask = tout != cfg.pad_id
    tot = (tok * mask).sum(-1)
    if normalize:
        tot = tot / mask.sum(-1)
    return [float(x) for x in tot]


@torch.no_grad()
def beam_decode(model: TranslationModel, sources: Sequence[Sequence[int]], beam: int = 4,
                max_len: int | None = None, include_greedy: bool = True):
    """Batched beam search ranked by per-token log-probability.

    The greedy hypothesis joins the final candidate set, so the returned
    output never scores below beam=1 under the same scorer.
    """
    if beam <= 1:
        return greedy_decode(model, sources, max_len)
    cfg = model.config
    model.eval()
    n = len(sources)
    if n == 0:
        return []
    src = _pad([list(s) + [cfg.eos_id] for s in sources], cfg.pad_id)
    memory, mem_mask = model.encode(src)
    limit = _max_len(src.shape[1], cfg, max_len)
    memory = memory.repeat_interleave(beam, dim=0)
    mem_mask = mem_mask.repeat_interleave(beam, dim=0)
    ys = torch.full((n * beam, 1), cfg.bos_id, dtype=torch.long)
    scores = torch.full((n, beam), float("-inf"), dtype=torch.float64)
    scores[:, 0] = 0.0
    finished: list[list[tuple[float, list[int]]]] = [[] for _ in range(n)]
    active = torch.ones(n, dtype=torch.bool)
    vocab = cfg.vocab_size
    for step in range(limit):
        lp = F.log_softmax(model.decode(ys, memory, mem_mask)[:, -1], dim=-1).double()
        lp[:, cfg.pad_id] = float("-inf")
        lp[:, cfg.bos_id] = float("-inf")
        cand = (scores[:, :, None] + lp.view(n, beam, vocab)).view(n, beam * vocab)
        top_s, top_i = cand.topk(2 * beam, dim=1)
        new_tokens = torch.full((n, beam), cfg.pad_id, dtype=torch.long)
        new_src = torch.zeros((n, beam), dtype=torch.long)
        new_scores = torch.full((n, beam), float("-inf"), dtype=torch.float64)
        length = step + 1
        for b in range(n):
            if not active[b]:
                continue
            k = 0
            for s, i in zip(top_s[b].tolist(), top_i[b].tolist()):
                if s == float("-inf"):
                    break
                origin, tok = divmod(i, vocab)
                if tok == cfg.eos_id:
                    if len(finished[b]) < beam:
                        prefix = ys[b * beam + origin, 1:].tolist()
                        finished[b].append((s / (length), prefix))
                    continue
                new_tokens[b, k] = tok
                new_src[b, k] = origin
                new_scores[b, k] = s
                k += 1
                if k == beam:
                    break
            if len(finished[b]) >= beam or k == 0:
                active[b] = False
        if not bool(active.any()):
            break
        rows = (torch.arange(n)[:, None] * beam + new_src).view(-1)
        ys = torch.cat([ys[rows], new_tokens.view(-1, 1)], dim=1)
        scores = torch.where(active[:, None], new_scores, torch.full_like(new_scores, float("-inf")))
    else:
        for b in range(n):
            if active[b]:
                for k in range(beam):
                    if scores[b, k] > float("-inf"):
                        hyp = ys[b * beam + k, 1:].tolist()
                        finished[b].append((float(scores[b, k]) / (len(hyp) + 1), hyp))
    outputs = []
    greedy = greedy_decode(model, sources, max_len) if include_greedy else [None] * n
    need_score = [i for i in range(n) if greedy[i] is not None]
    g_scores = score(model, [sources[i] for i in need_score], [greedy[i] for i in need_score]) if need_score else []
    g_map = dict(zip(need_score, g_scores))
    for b in range(n):
        cands = sorted(finished[b], key=lambda c: -c[0])
        best = cands[0] if cands else (float("-inf"), [])
        if b in g_map and g_map[b] > best[0] + 1e-9:
            best = (g_map[b], greedy[b])
        outputs.append(list(best[1]))
    return outputs


def translate_ids(model: TranslationModel, sources, beam: int = 4, max_len: int | None = None,
                  batch_size: int = 256):
    out = []
    for i in range(0, len(sources), batch_size):
        chunk = sources[i : i + batch_size]
        out.extend(beam_decode(model, chunk, beam, max_len) if beam > 1 else greedy_decode(model, chunk, max_len))
    return out


@dataclass
class AttentionTrace:
    self_attn: np.ndarray  # (dec_layers, heads, T, T)
    cross_attn: np.ndarray  # (dec_layers, heads, T, S)
    decoder_input: list  # BOS + output tokens, length T


@torch.no_grad()
def translate_with_attention(model: TranslationModel, source: Sequence[int], max_len: int | None = None):
    """Greedy translation plus decoder attention for every generated position.

    Position t of the trace is the decoder step that predicts output token t
    (the last position predicts EOS).
    """
    out = greedy_decode(model, [source], max_len)[0]
    cfg = model.config
    src = torch.tensor([list(source) + [cfg.eos_id]], dtype=torch.long)
    tin = torch.tensor([[cfg.bos_id] + out], dtype=torch.long)
    _, ws, wc = model(src, tin, need_attn=True)
    if ws:
        self_attn = torch.stack([w[0] for w in ws]).numpy()
        cross_attn = torch.stack([w[0] for w in wc]).numpy()
    else:
        t, s = tin.shape[1], src.shape[1]
        self_attn = np.zeros((0, cfg.heads, t, t), dtype=np.float32)
        cross_attn = np.zeros((0, cfg.heads, t, s), dtype=np.float32)
    return out, AttentionTrace(self_attn, cross_attn, tin[0].tolist())


# --- checkpoints -------------------------------------------------------------------

def save_checkpoint(model: TranslationModel, path, extra: dict | None = None):
    state = model.state_dict()
    names = sorted(state)
    header = {
        "format": "styleap-checkpoint",
        "version": CKPT_VERSION,
        "config": asdict(model.config),
        "tensors": [{"name": k, "shape": list(state[k].shape)} for k in names],
        "tokenizer": model.tokenizer.to_json() if model.tokenizer is not None else None,
        "extra": extra or {},
    }
    hb = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<II", CKPT_VERSION, len(hb)))
        fh.write(hb)
        for k in names:
            fh.write(state[k].detach().cpu().float().numpy().astype("<f4").tobytes())


def load_checkpoint(path) -> TranslationModel:
    from .corpus import TokenizerModel

    data = Path(path).read_bytes()
    if data[: len(CKPT_MAGIC)] != CKPT_MAGIC:
        raise ConfigurationError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack_from("<II", data, len(CKPT_MAGIC))
    if version != CKPT_VERSION:
        raise ConfigurationError(f"{path}: unsupported checkpoint version {version}")
    pos = len(CKPT_MAGIC) + 8
    header = json.loads(data[pos : pos + hlen].decode("utf-8"))
    pos += hlen
    tok = TokenizerModel.from_json(header["tokenizer"]) if header.get("tokenizer") else None
    model = TranslationModel(ModelConfig(**header["config"]), tok)
    state = {}
    for t in header["tensors"]:
        count = int(np.prod(t["shape"])) if t["shape"] else 1
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=pos).reshape(t["shape"])
        pos += 4 * count
        state[t["name"]] = torch.from_numpy(arr.astype(np.float32))
    if pos != len(data):
        raise ConfigurationError(f"{path}: trailing bytes in checkpoint")
    model.load_state_dict(state)
    model.checkpoint_extra = header.get("extra", {})
    model.eval()
    return model


# --- numerical validation ----------------------------------------------------------

def _fixed_batch(cfg: ModelConfig, seed: int, empty_source: bool = False):
    g = torch.Generator().manual_seed(seed)
    low = 3
    src = torch.randint(low, cfg.vocab_size, (3, 5), generator=g)
    tgt = torch.randint(low, cfg.vocab_size, (3, 4), generator=g)
    src_seqs = [[] for _ in range(3)] if empty_source else [src[i, : 5 - i].tolist() for i in range(3)]
    return make_batch([(s, tgt[i, : 4 - (i % 2)].tolist()) for i, s in enumerate(src_seqs)], cfg)


def gradient_check(model_config: ModelConfig, seed: int = 0, eps: float = 1e-6,
                   tolerance: float = 1e-4, empty_source: bool = False, raise_on_fail: bool = True):
    """Compare autograd gradients with central finite differences in float64.

    Relative error per tensor is ||g_a - g_fd|| / max(||g_a|| + ||g_fd||, 1e-5).
    The floor keeps structurally zero gradients (e.g. attention key biases)
    from turning finite-difference noise into a large ratio. Returns (max relative error, {tensor name: error}).
    """
    cfg = model_config
    if cfg.model_dim > 8 or cfg.enc_layers > 1 or cfg.dec_layers > 1:
        raise ConfigurationError("gradient_check expects a tiny config (dim <= 8, <= 1 layer)")
    torch.manual_seed(seed)
    model = TranslationModel(cfg).double()
    model.eval()
    # perturb the defaults so LayerNorm affine terms and biases carry real gradient
    with torch.no_grad():
        g = torch.Generator().manual_seed(seed + 1)
        for p in model.parameters():
            p.add_(0.1 * torch.randn(p.shape, generator=g, dtype=p.dtype))
    src, tin, tout = _fixed_batch(cfg, seed, empty_source)

    def loss_fn():
        s, _, n = label_smoothed_nll(model(src, tin), tout, cfg.label_smoothing, cfg.pad_id)
        return s / n

    model.zero_grad()
    loss = loss_fn()
    loss.backward()
    errors = {}
    for name, p in model.named_parameters():
        analytic = p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p)
        if not torch.all(torch.isfinite(analytic)):
            raise GradientCheckError(name, float("inf"), tolerance)
        numeric = torch.zeros_like(p)
        flat = p.data.view(-1)
        nflat = numeric.view(-1)
        with torch.no_grad():
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + eps
                up = loss_fn().item()
                flat[i] = orig - eps
                down = loss_fn().item()
                flat[i] = orig
                nflat[i] = (up - down) / (2 * eps)
        denom = max(float(analytic.norm() + numeric.norm()), 1e-5)
        errors[name] = float((analytic - numeric).norm()) / denom
    worst_name = max(errors, key=errors.get)
    worst = errors[worst_name]
    if raise_on_fail and worst >= tolerance:
        raise GradientCheckError(worst_name, worst, tolerance)
    return worst, errors
