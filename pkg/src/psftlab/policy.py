"""Autoregressive token policies, token batches, sampling and checkpoints."""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from psftlab import autodiff as ad
from psftlab import kernels
from psftlab.rng import stream


class ChecksumError(Exception):
    """Checkpoint bytes do not match their recorded digest."""


@dataclass(frozen=True)
class VocabSpec:
    size: int = 32
    pad: int = 0
    bos: int = 1
    eos: int = 2

    def __post_init__(self):
        if self.size < 1:
            raise ValueError("vocab size must be positive")
        specials = (self.pad, self.bos, self.eos)
        if len(set(specials)) != 3:
            raise ValueError("pad, bos and eos must be distinct")
        if any(s < 0 or s >= self.size for s in specials):
            raise ValueError("special ids must lie in [0, size)")


@dataclass(frozen=True)
class PolicyConfig:
    arch: str = "transformer"
    vocab_size: int = 32
    layers: int = 2
    heads: int = 4
    d_model: int = 32
    d_ff: int = 128
    max_seq_len: int = 64
    init_scale: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.arch not in ("bigram", "transformer"):
            raise ValueError(f"unknown arch {self.arch!r}")
        if self.vocab_size < 1 or self.max_seq_len < 1:
            raise ValueError("vocab_size and max_seq_len must be positive")
        if self.arch == "transformer" and self.d_model % self.heads:
            raise ValueError("d_model must be divisible by heads")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class TokenBatch:
    """Right-padded (prompt, response) rows.

    ``response_mask[b, t]`` is true exactly on response tokens of row ``b``
    (including the terminating eos); prompt and pad positions are false.
    """

    tokens: np.ndarray
    prompt_len: np.ndarray
    response_mask: np.ndarray

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        self.prompt_len = np.asarray(self.prompt_len, dtype=np.int64)
        self.response_mask = np.asarray(self.response_mask, dtype=bool)
        if self.tokens.ndim != 2 or self.response_mask.shape != self.tokens.shape:
            raise ValueError("tokens and response_mask must be matching B x T arrays")
        if self.prompt_len.shape != (self.tokens.shape[0],):
            raise ValueError("prompt_len must have one entry per row")
        if self.tokens.shape[0] and not self.response_mask.any(axis=1).all():
            raise ValueError("every row needs at least one response token")
        cols = np.arange(self.tokens.shape[1])[None, :]
        if np.any(self.response_mask & (cols < self.prompt_len[:, None])):
            raise ValueError("response_mask covers prompt positions")

    @classmethod
    def from_pairs(cls, prompts, responses, pad: int = 0) -> "TokenBatch":
        if len(prompts) != len(responses):
            raise ValueError("prompts and responses differ in length")
        rows = [list(p) + list(r) for p, r in zip(prompts, responses)]
        width = max(len(r) for r in rows)
        tokens = np.full((len(rows), width), pad, dtype=np.int64)
        mask = np.zeros((len(rows), width), dtype=bool)
        for i, (p, r) in enumerate(zip(prompts, responses)):
            tokens[i, : len(p) + len(r)] = rows[i]
            mask[i, len(p): len(p) + len(r)] = True
        return cls(tokens, np.array([len(p) for p in prompts]), mask)

    @classmethod
    def from_sequences(cls, seqs, pad: int = 0) -> "TokenBatch":
        """``seqs`` are (prompt, response) pairs."""
        return cls.from_pairs([s[0] for s in seqs], [s[1] for s in seqs], pad)

    def __len__(self):
        return self.tokens.shape[0]

    @property
    def n_response_tokens(self) -> int:
        return int(self.response_mask.sum())

    def take(self, rows) -> "TokenBatch":
        rows = np.asarray(rows)
        lens = np.where(self.response_mask[rows].any(axis=0))[0]
        width = int(lens.max()) + 1 if lens.size else self.tokens.shape[1]
        return TokenBatch(self.tokens[rows, :width], self.prompt_len[rows],
                          self.response_mask[rows, :width])

    def responses(self):
        return [self.tokens[b, self.response_mask[b]].tolist() for b in range(len(self))]

    def prompts(self):
        return [self.tokens[b, : self.prompt_len[b]].tolist() for b in range(len(self))]

    def validate(self, vocab_size: int, max_seq_len: int | None = None):
        if self.tokens.size and (self.tokens.min() < 0 or self.tokens.max() >= vocab_size):
            raise ValueError("token id outside the vocabulary")
        if max_seq_len is not None and self.tokens.shape[1] > max_seq_len:
            raise ValueError(
                f"sequence length {self.tokens.shape[1]} exceeds max_seq_len {max_seq_len}")


def _param_shapes(cfg: PolicyConfig):
    V = cfg.vocab_size
    if cfg.arch == "bigram":
        return {"table": (V, V)}
    d, f = cfg.d_model, cfg.d_ff
    shapes = {"tok_emb": (V, d), "pos_emb": (cfg.max_seq_len, d)}
    for i in range(cfg.layers):
        p = f"h{i}."
        shapes.update({
            p + "ln1.g": (d,), p + "ln1.b": (d,),
            p + "attn.wq": (d, d), p + "attn.wk": (d, d), p + "attn.wv": (d, d),
            p + "attn.wo": (d, d), p + "attn.bo": (d,),
            p + "ln2.g": (d,), p + "ln2.b": (d,),
            p + "mlp.w1": (d, f), p + "mlp.b1": (f,),
            p + "mlp.w2": (f, d), p + "mlp.b2": (d,),
        })
    shapes.update({"ln_f.g": (d,), "ln_f.b": (d,), "head.w": (d, V), "head.b": (V,)})
    return shapes


def init_params(cfg: PolicyConfig) -> dict:
    rng = stream(cfg.seed, "init")
    params = {}
    for name, shape in _param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "g":
            params[name] = np.ones(shape)
        elif leaf in ("b", "bo", "b1", "b2"):
            params[name] = np.zeros(shape)
        else:
            params[name] = rng.normal(0.0, 1.0, size=shape) * cfg.init_scale
    return params


class Policy:
    """Trainable policy pi_theta over a fixed vocabulary."""

    frozen = False

    def __init__(self, config: PolicyConfig, params: dict | None = None):
        self.config = config
        arrays = init_params(config) if params is None else params
        shapes = _param_shapes(config)
        if set(arrays) != set(shapes):
            raise ValueError("parameter names do not match the config")
        self.params = {}
        for name in shapes:
            arr = np.array(arrays[name], dtype=np.float64)
            if arr.shape != shapes[name]:
                raise ValueError(f"{name}: shape {arr.shape} != {shapes[name]}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name}: non-finite values")
            self.params[name] = ad.Tensor(arr, requires_grad=not self.frozen)
            if self.frozen:
                self.params[name].data.flags.writeable = False
        self._causal = {}

    # -- bookkeeping --------------------------------------------------

    @property
    def vocab_size(self):
        return self.config.vocab_size

    def num_params(self) -> int:
        return int(np.sum([t.data.size for t in self.params.values()]))

    def state_dict(self) -> dict:
        return {k: t.data.copy() for k, t in self.params.items()}

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def snapshot(self) -> "PolicySnapshot":
        return PolicySnapshot(self.config, self.state_dict())

    def clone(self) -> "Policy":
        return Policy(self.config, self.state_dict())

    # -- forward ------------------------------------------------------

    def logits(self, tokens) -> ad.Tensor:
        """Next-token logits: row t scores token t+1 given tokens[:t+1]."""
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.shape[1] > self.config.max_seq_len:
            raise ValueError(
                f"sequence length {tokens.shape[1]} exceeds max_seq_len {self.config.max_seq_len}")
        if self.config.arch == "bigram":
            return ad.embedding(self.params["table"], tokens)
        return self._transformer(tokens)

    def _causal_mask(self, T):
        m = self._causal.get(T)
        if m is None:
            m = np.triu(np.full((T, T), -1e9), k=1)
            self._causal[T] = m
        return m

    def _transformer(self, tokens):
        cfg, P = self.config, self.params
        B, T = tokens.shape
        H, d = cfg.heads, cfg.d_model
        dh = d // H
        x = ad.embedding(P["tok_emb"], tokens) + ad.embedding(P["pos_emb"], np.arange(T))
        mask = self._causal_mask(T)
        scale = 1.0 / np.sqrt(dh)
        for i in range(cfg.layers):
            p = f"h{i}."
            h = ad.layer_norm(x, P[p + "ln1.g"], P[p + "ln1.b"])
            q = ad.transpose(ad.reshape(h @ P[p + "attn.wq"], (B, T, H, dh)), (0, 2, 1, 3))
            k = ad.transpose(ad.reshape(h @ P[p + "attn.wk"], (B, T, H, dh)), (0, 2, 3, 1))
            v = ad.transpose(ad.reshape(h @ P[p + "attn.wv"], (B, T, H, dh)), (0, 2, 1, 3))
            att = ad.softmax((q @ k) * scale + mask)
            y = ad.reshape(ad.transpose(att @ v, (0, 2, 1, 3)), (B, T, d))
            x = x + (y @ P[p + "attn.wo"] + P[p + "attn.bo"])
            h = ad.layer_norm(x, P[p + "ln2.g"], P[p + "ln2.b"])
            x = x + (ad.gelu(h @ P[p + "mlp.w1"] + P[p + "mlp.b1"]) @ P[p + "mlp.w2"]
                     + P[p + "mlp.b2"])
        x = ad.layer_norm(x, P["ln_f.g"], P["ln_f.b"])
        return x @ P["head.w"] + P["head.b"]

    def next_token_logp(self, batch: TokenBatch) -> ad.Tensor:
        """B x T x V log-distributions aligned with ``batch.tokens``.

        Slice t is log pi(. | tokens[:t]); slice 0 has no context and is zero.
        """
        batch.validate(self.vocab_size, self.config.max_seq_len)
        lsm = ad.log_softmax(self.logits(batch.tokens[:, :-1]))
        return ad.pad_front(lsm, axis=1)

    def forward(self, batch: TokenBatch):
        """Returns (aligned log-distributions, per-token log-probs B x T)."""
        lsm = self.next_token_logp(batch)
        return lsm, ad.gather(lsm, batch.tokens)

    def log_prob(self, batch: TokenBatch) -> ad.Tensor:
        return self.forward(batch)[1]

    def entropy(self, batch: TokenBatch):
        """Per-position entropy (B x T, nats; zero at t=0) and its masked mean."""
        with ad.no_grad():
            lsm = self.next_token_logp(batch)
        return token_entropy(lsm.data, batch)


def token_entropy(lsm: np.ndarray, batch: TokenBatch):
    B, T, V = lsm.shape
    h = kernels.row_entropy(np.ascontiguousarray(lsm.reshape(-1, V))).reshape(B, T)
    h[:, 0] = 0.0
    np.clip(h, 0.0, None, out=h)
    mask = batch.response_mask
    return h, float(h[mask].sum() / mask.sum())


class PolicySnapshot(Policy):
    """Frozen copy of a policy: read-only parameters, never receives gradients."""

    frozen = True

    def snapshot(self):
        return self

    def zero_grad(self):
        pass


def same_params(a: Policy, b: Policy) -> bool:
    return a.params.keys() == b.params.keys() and all(
        np.array_equal(a.params[k].data, b.params[k].data) for k in a.params)


# -- sampling ----------------------------------------------------------

def sample(policy: Policy, prompts, max_new: int, temperature: float = 1.0,
           seed: int = 0, stream_name: str = "sample", eos: int = 2,
           pad: int = 0) -> TokenBatch:
    """Ancestral sampling until eos or ``max_new`` tokens.

    ``temperature == 0`` selects argmax decoding. One uniform per row is drawn
    at every step whether or not the row has finished, so the random stream
    consumed depends only on (batch size, steps).
    """
    if temperature < 0:
        raise ValueError("temperature must be >= 0")
    if max_new < 1:
        raise ValueError("max_new must be >= 1")
    B = len(prompts)
    lens = np.array([len(p) for p in prompts], dtype=np.int64)
    if lens.min() < 1:
        raise ValueError("prompts must be non-empty")
    width = int(lens.max()) + max_new
    tokens = np.full((B, width), pad, dtype=np.int64)
    for b, p in enumerate(prompts):
        tokens[b, : len(p)] = p
    start = lens.copy()
    done = np.zeros(B, dtype=bool)
    rng = stream(seed, stream_name)
    rows = np.arange(B)
    for _ in range(max_new):
        cur = int(lens.max())
        with ad.no_grad():
            lg = policy.logits(tokens[:, :cur]).data
        last = np.ascontiguousarray(lg[rows, lens - 1])
        u = rng.random(B)
        if temperature == 0:
            nxt = last.argmax(axis=1)
        else:
            probs = kernels.softmax(np.ascontiguousarray(last / temperature))
            nxt = kernels.categorical(probs, u)
        active = ~done
        tokens[rows[active], lens[active]] = nxt[active]
        lens[active] += 1
        done |= active & (nxt == eos)
        if done.all():
            break
    width = int(lens.max())
    tokens = tokens[:, :width]
    cols = np.arange(width)[None, :]
    mask = (cols >= start[:, None]) & (cols < lens[:, None])
    return TokenBatch(tokens, start, mask)


# -- checkpoints -------------------------------------------------------

MAGIC = b"PSFTCKPT"
FORMAT_VERSION = 1


def save_checkpoint(policy: Policy, path, meta: dict | None = None) -> str:
    """Write ``policy`` to ``path``; returns the hex digest.

    Layout: MAGIC | u32 version | u64 header length | JSON header | float64
    little-endian payload | 32-byte SHA-256 of everything before it.
    """
    arrays, payload, offset = [], [], 0
    for name, t in policy.params.items():
        raw = np.ascontiguousarray(t.data, dtype="<f8").tobytes()
        arrays.append({"name": name, "shape": list(t.shape), "dtype": "<f8",
                       "offset": offset, "nbytes": len(raw)})
        payload.append(raw)
        offset += len(raw)
    header = {"format": "psftlab-checkpoint", "version": FORMAT_VERSION,
              "config": policy.config.to_dict(), "arrays": arrays, "meta": meta or {}}
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    body = MAGIC + struct.pack("<IQ", FORMAT_VERSION, len(hbytes)) + hbytes + b"".join(payload)
    digest = hashlib.sha256(body).digest()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(body + digest)
    return digest.hex()


def read_checkpoint(path):
    """Returns (config, arrays, meta); raises ChecksumError on corruption."""
    blob = Path(path).read_bytes()
    if len(blob) < len(MAGIC) + 12 + 32 or not blob.startswith(MAGIC):
        raise ChecksumError(f"{path}: not a checkpoint")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise ChecksumError(f"{path}: checksum mismatch")
    version, hlen = struct.unpack_from("<IQ", body, len(MAGIC))
    if version != FORMAT_VERSION:
        raise ChecksumError(f"{path}: unsupported version {version}")
    start = len(MAGIC) + 12
    header = json.loads(body[start: start + hlen])
    base = start + hlen
    arrays = {}
    for a in header["arrays"]:
        buf = body[base + a["offset"]: base + a["offset"] + a["nbytes"]]
        arrays[a["name"]] = np.frombuffer(buf, dtype=a["dtype"]).reshape(a["shape"]).astype(np.float64)
    return PolicyConfig.from_dict(header["config"]), arrays, header.get("meta", {})


def load_checkpoint(path) -> Policy:
    cfg, arrays, _ = read_checkpoint(path)
    return Policy(cfg, arrays)
