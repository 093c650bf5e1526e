"""Synthetic two-domain corpora, the verifiable reward task, and DPO pairs.

Vocabulary (32 ids)::

    0 pad   1 bos   2 eos   3..12 digits 0..9
    13 TGT  14 SEP  15 STEP 16 ALT      (domain A markers / thinking tokens)
    17 BQ   18..31 domain-B symbols

Domain A ("arithmetic"): prompt ``bos TGT t SEP``, response = a free digit
(two with probability ``p_two_free``, off by default), an optional thinking
token (STEP or ALT), a closing digit, eos. The digits of a correct response
sum to ``t`` mod 10. The pretraining variant rarely thinks and closes
correctly only ``correct`` of the time; the expert variant always closes
correctly and thinks often.

Domain B ("general"): prompt ``bos BQ``, response = a walk on a fixed sparse
Markov chain over the B symbols, then eos.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from psftlab import autodiff as ad
from psftlab.policy import PolicyConfig, TokenBatch
from psftlab.rng import stream

log = logging.getLogger(__name__)

V = 32
PAD, BOS, EOS = 0, 1, 2
DIGITS = tuple(range(3, 13))
TGT, SEP, STEP, ALT = 13, 14, 15, 16
THINK_TOKENS = (STEP, ALT)
BQ = 17
B_SYMBOLS = tuple(range(18, 32))

DIGIT_OF = {tok: i for i, tok in enumerate(DIGITS)}


def digit_token(d: int) -> int:
    return DIGITS[d % 10]


@dataclass(frozen=True)
class ArithSpec:
    """One domain-A generative regime."""

    p_two_free: float = 0.0
    think: tuple = (0.95, 0.05, 0.0)  # none, STEP, ALT
    correct: float = 0.8
    digit_skew: float = 0.0  # free digit d has weight exp(-skew * d)

    def digit_probs(self):
        w = np.exp(-self.digit_skew * np.arange(10))
        return w / w.sum()


@dataclass(frozen=True)
class TeacherSpec:
    plain: ArithSpec = ArithSpec()
    expert: ArithSpec = ArithSpec(think=(0.3, 0.4, 0.3), correct=1.0,
                                  digit_skew=0.15)
    chain_seed: int = 7
    chain_out_degree: int = 3
    chain_min_len: int = 3
    chain_max_len: int = 10
    chain_stop: float = 0.25
    pretrain_mix: float = 0.5  # fraction of domain-A sequences in pretraining

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for k in ("plain", "expert"):
            if isinstance(d.get(k), dict):
                sub = dict(d[k])
                sub["think"] = tuple(sub["think"])
                d[k] = ArithSpec(**sub)
        return cls(**d)


# -- domain A ------------------------------------------------------------

def arith_prompt(t: int):
    return [BOS, TGT, digit_token(t), SEP]


def _arith_support(spec: ArithSpec, t: int):
    """All (response, probability) pairs for target ``t``."""
    dp = spec.digit_probs()
    out = []
    for k, pk in ((1, 1 - spec.p_two_free), (2, spec.p_two_free)):
        if pk == 0:
            continue
        for free in np.ndindex(*(10,) * k):
            pf = pk * float(np.prod(dp[list(free)]))
            s = int(np.sum(free))
            for think, pt in zip((None, STEP, ALT), spec.think):
                if pt == 0:
                    continue
                head = [digit_token(d) for d in free] + ([think] if think else [])
                want = (t - s) % 10
                for c in range(10):
                    pc = spec.correct * (c == want) + (1 - spec.correct) / 10
                    if pc == 0:
                        continue
                    out.append((tuple(head + [digit_token(c), EOS]), pf * pt * pc))
    return out


@lru_cache(maxsize=8)
def _arith_trie(spec: ArithSpec):
    """prefix (prompt + partial response) -> next-token distribution."""
    mass = {}
    for t in range(10):
        prompt = tuple(arith_prompt(t))
        for resp, p in _arith_support(spec, t):
            p = p / 10.0
            seq = prompt + resp
            for i in range(len(prompt), len(seq)):
                key = seq[:i]
                mass.setdefault(key, np.zeros(V))[seq[i]] += p
    return {k: v / v.sum() for k, v in mass.items()}


def sample_arith(spec: ArithSpec, rng: np.random.Generator, t: int | None = None):
    if t is None:
        t = int(rng.integers(10))
    k = 2 if rng.random() < spec.p_two_free else 1
    free = rng.choice(10, size=k, p=spec.digit_probs())
    think = rng.choice(3, p=np.asarray(spec.think) / np.sum(spec.think))
    want = (t - int(free.sum())) % 10
    c = want if rng.random() < spec.correct else int(rng.integers(10))
    resp = [digit_token(d) for d in free]
    if think:
        resp.append(THINK_TOKENS[think - 1])
    resp += [digit_token(c), EOS]
    return arith_prompt(t), resp


def is_arith(prompt, response) -> bool:
    """Format check for domain A (correctness not required)."""
    if len(prompt) != 4 or prompt[0] != BOS or prompt[1] != TGT or prompt[3] != SEP:
        return False
    if prompt[2] not in DIGIT_OF:
        return False
    r = list(response)
    if len(r) < 3 or r[-1] != EOS or r[-2] not in DIGIT_OF:
        return False
    body = r[:-2]
    if body and body[-1] in THINK_TOKENS:
        body = body[:-1]
    return 1 <= len(body) <= 2 and all(x in DIGIT_OF for x in body)


# -- domain B ------------------------------------------------------------

@lru_cache(maxsize=8)
def _chain(seed: int, out_degree: int):
    rng = stream(seed, "chain")
    n = len(B_SYMBOLS)
    trans = np.zeros((n, n))
    for i in range(n):
        succ = rng.choice(n, size=out_degree, replace=False)
        trans[i, succ] = rng.dirichlet(np.ones(out_degree))
    start = rng.dirichlet(np.ones(n))
    return start, trans


def chain_next_dist(spec: TeacherSpec, response_prefix) -> np.ndarray:
    start, trans = _chain(spec.chain_seed, spec.chain_out_degree)
    out = np.zeros(V)
    n = len(response_prefix)
    if n == 0:
        out[list(B_SYMBOLS)] = start
        return out
    if n >= spec.chain_max_len:
        out[EOS] = 1.0
        return out
    stop = spec.chain_stop if n >= spec.chain_min_len else 0.0
    out[EOS] = stop
    row = trans[B_SYMBOLS.index(response_prefix[-1])]
    out[list(B_SYMBOLS)] = (1 - stop) * row
    return out


def sample_chain(spec: TeacherSpec, rng: np.random.Generator):
    resp = []
    while True:
        p = chain_next_dist(spec, resp)
        tok = int(rng.choice(V, p=p))
        resp.append(tok)
        if tok == EOS:
            return [BOS, BQ], resp


def is_chain(spec: TeacherSpec, prompt, response) -> bool:
    if list(prompt) != [BOS, BQ]:
        return False
    r = list(response)
    if not r or r[-1] != EOS or not spec.chain_min_len <= len(r) - 1 <= spec.chain_max_len:
        return False
    for i in range(len(r) - 1):
        if r[i] not in B_SYMBOLS or chain_next_dist(spec, r[:i])[r[i]] == 0:
            return False
    return True


# -- teacher -------------------------------------------------------------

class Teacher:
    """Exact next-token distributions of both generative processes.

    ``regime`` selects which domain-A process answers domain-A prefixes
    ("expert" or "plain"). ``domain`` ("arith" or "chain") restricts the
    teacher to one process, which then gives zero mass (before smoothing) to
    the other domain's sequences. Implements the ``log_prob`` /
    ``next_token_logp`` surface of a policy so it can be evaluated like one.
    """

    def __init__(self, spec: TeacherSpec = TeacherSpec(), regime: str = "expert",
                 smoothing: float = 0.0, domain: str | None = None):
        if domain not in (None, "arith", "chain"):
            raise ValueError(f"unknown domain {domain!r}")
        self.spec = spec
        self.arith = spec.expert if regime == "expert" else spec.plain
        self.smoothing = smoothing
        self.domain = domain
        self.config = PolicyConfig(arch="bigram", vocab_size=V, max_seq_len=64)

    vocab_size = V

    def next_dist(self, prompt, response_prefix) -> np.ndarray:
        prompt, response_prefix = list(prompt), list(response_prefix)
        use_chain = self.domain == "chain" or (self.domain is None and prompt[:2] == [BOS, BQ])
        if use_chain:
            if all(t in B_SYMBOLS for t in response_prefix):
                p = chain_next_dist(self.spec, response_prefix)
            else:
                p = np.zeros(V)
        else:
            p = _arith_trie(self.arith).get(tuple(prompt + response_prefix))
            if p is None:
                p = np.zeros(V)
        if self.smoothing:
            p = (1 - self.smoothing) * p + self.smoothing / V
        return p

    def sequence_logp(self, prompt, response) -> float:
        total = 0.0
        for i, tok in enumerate(response):
            p = self.next_dist(prompt, response[:i])[tok]
            total += math.log(p) if p > 0 else -math.inf
        return total

    def next_token_logp(self, batch: TokenBatch) -> ad.Tensor:
        B, T = batch.tokens.shape
        out = np.zeros((B, T, V))
        with np.errstate(divide="ignore"):
            for b in range(B):
                pl = int(batch.prompt_len[b])
                row = batch.tokens[b]
                prompt = row[:pl].tolist()
                for t in range(pl, T):
                    if not batch.response_mask[b, t]:
                        continue
                    out[b, t] = np.log(self.next_dist(prompt, row[pl:t].tolist()))
        return ad.Tensor(out)

    def forward(self, batch):
        lsm = self.next_token_logp(batch)
        return lsm, ad.gather(lsm, batch.tokens)

    def log_prob(self, batch):
        return self.forward(batch)[1]

    def entropy_rate(self, domain: str = "arith") -> float:
        """Expected per-response-token entropy (nats) under this teacher."""
        if domain == "arith":
            return _arith_entropy_rate(self.arith)
        return _chain_entropy_rate(self.spec)


def _entropy(p):
    p = p[p > 0]
    return float(-(p * np.log(p)).sum())


def _arith_entropy_rate(spec: ArithSpec) -> float:
    trie = _arith_trie(spec)
    # E[sum_t H_t] / E[n_tokens]: weight each prefix by its reach probability
    reach = {}
    for t in range(10):
        prompt = tuple(arith_prompt(t))
        for resp, p in _arith_support(spec, t):
            seq = prompt + resp
            for i in range(len(prompt), len(seq)):
                reach[seq[:i]] = reach.get(seq[:i], 0.0) + p / 10.0
    tot_h = sum(w * _entropy(trie[k]) for k, w in reach.items())
    tot_n = sum(reach.values())
    return tot_h / tot_n


def _chain_entropy_rate(spec: TeacherSpec) -> float:
    start, trans = _chain(spec.chain_seed, spec.chain_out_degree)
    n = len(B_SYMBOLS)
    # state distribution over the last symbol, per response length
    tot_h = tot_n = 0.0
    h0 = _entropy(chain_next_dist(spec, []))
    tot_h += h0
    tot_n += 1.0
    dist = start.copy()
    alive = 1.0
    for length in range(1, spec.chain_max_len + 1):
        for i in range(n):
            w = alive * dist[i]
            if w == 0:
                continue
            p = chain_next_dist(spec, [B_SYMBOLS[i]] * length)
            tot_h += w * _entropy(p)
            tot_n += w
        stop = spec.chain_stop if length >= spec.chain_min_len else 0.0
        if length >= spec.chain_max_len:
            break
        alive *= 1 - stop
        dist = dist @ trans
    return tot_h / tot_n


# -- corpora -------------------------------------------------------------

@dataclass
class Corpus:
    name: str
    domain: str
    seed: int
    sequences: list = field(default_factory=list)  # (prompt, response) pairs

    def __len__(self):
        return len(self.sequences)

    def batch(self, rows=None) -> TokenBatch:
        seqs = self.sequences if rows is None else [self.sequences[i] for i in rows]
        return TokenBatch.from_sequences(seqs, pad=PAD)

    def save(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as f:
            for p, r in self.sequences:
                f.write(" ".join(map(str, list(p) + list(r))) + "\n")
        meta = {"name": self.name, "domain": self.domain, "seed": self.seed,
                "size": len(self), "prompt_lens": [len(p) for p, _ in self.sequences]}
        path.with_suffix(".meta.json").write_text(json.dumps(meta, indent=1))

    @classmethod
    def load(cls, path):
        path = Path(path)
        meta = json.loads(path.with_suffix(".meta.json").read_text())
        seqs = []
        with open(path) as f:
            for line, pl in zip(f, meta["prompt_lens"]):
                toks = [int(x) for x in line.split()]
                seqs.append((toks[:pl], toks[pl:]))
        if len(seqs) != meta["size"]:
            raise ValueError(f"{path}: expected {meta['size']} sequences, found {len(seqs)}")
        return cls(meta["name"], meta["domain"], meta["seed"], seqs)


@dataclass(frozen=True)
class CorpusSizes:
    pretrain: int = 4096
    expert_train: int = 1024
    indomain_eval: int = 256
    ood_eval: int = 256
    rl_prompts: int = 64
    dpo_train: int = 256
    dpo_eval: int = 128

    def to_dict(self):
        return asdict(self)


# disjoint generator streams per split
_SPLIT_STREAMS = {"pretrain": 0, "expert_train": 1, "indomain_eval": 2, "ood_eval": 3}


def gen_corpora(spec: TeacherSpec = TeacherSpec(), sizes: CorpusSizes = CorpusSizes(),
                seed: int = 0) -> dict:
    for k, v in sizes.to_dict().items():
        if v <= 0:
            raise ValueError(f"size {k} must be positive")
    out = {}
    rng = stream(seed, "corpus", _SPLIT_STREAMS["pretrain"])
    pre = []
    for _ in range(sizes.pretrain):
        if rng.random() < spec.pretrain_mix:
            pre.append(sample_arith(spec.plain, rng))
        else:
            pre.append(sample_chain(spec, rng))
    out["pretrain"] = Corpus("pretrain", "mixture", seed, pre)
    rng = stream(seed, "corpus", _SPLIT_STREAMS["expert_train"])
    out["expert_train"] = Corpus("expert_train", "arith-expert", seed,
                                 [sample_arith(spec.expert, rng) for _ in range(sizes.expert_train)])
    rng = stream(seed, "corpus", _SPLIT_STREAMS["indomain_eval"])
    out["indomain_eval"] = Corpus("indomain_eval", "arith-expert", seed,
                                  [sample_arith(spec.expert, rng) for _ in range(sizes.indomain_eval)])
    rng = stream(seed, "corpus", _SPLIT_STREAMS["ood_eval"])
    out["ood_eval"] = Corpus("ood_eval", "chain", seed,
                             [sample_chain(spec, rng) for _ in range(sizes.ood_eval)])
    return out


def domain_of(spec: TeacherSpec, prompt, response) -> str | None:
    if is_arith(prompt, response):
        return "arith"
    if is_chain(spec, prompt, response):
        return "chain"
    return None


# -- reward task -----------------------------------------------------------

@dataclass(frozen=True)
class RewardTask:
    """Digits of the completion must sum to the prompt's target modulo 10.

    Completions may interleave thinking tokens (STEP/ALT) but must contain at
    least one digit, no other tokens, and end with eos.
    """

    allowed_markers: tuple = THINK_TOKENS

    def prompts(self, n: int, seed: int):
        rng = stream(seed, "rl_prompts")
        return [arith_prompt(int(t)) for t in rng.integers(10, size=n)]

    def target(self, prompt) -> int:
        return DIGIT_OF[prompt[2]]

    def verify(self, prompt, completion) -> int:
        return reward(prompt, completion, self)


def reward(prompt, completion, task: RewardTask = RewardTask()) -> int:
    try:
        if len(prompt) < 3 or prompt[1] != TGT or prompt[2] not in DIGIT_OF:
            return 0
        t = DIGIT_OF[prompt[2]]
        comp = list(completion)
        if not comp or comp[-1] != EOS:
            return 0
        digits = []
        for tok in comp[:-1]:
            if tok in DIGIT_OF:
                digits.append(DIGIT_OF[tok])
            elif tok not in task.allowed_markers:
                return 0
        if not digits:
            return 0
        return int(sum(digits) % 10 == t)
    except (TypeError, IndexError, KeyError):
        return 0


# -- preference pairs ------------------------------------------------------

@dataclass
class PairCorpus:
    prompts: list
    chosen: list
    rejected: list
    chosen_score: list
    rejected_score: list
    resamples: int = 0

    def __len__(self):
        return len(self.prompts)

    def batches(self, rows=None):
        idx = range(len(self)) if rows is None else rows
        p = [self.prompts[i] for i in idx]
        return (TokenBatch.from_pairs(p, [self.chosen[i] for i in idx], PAD),
                TokenBatch.from_pairs(p, [self.rejected[i] for i in idx], PAD))

    def save(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as f:
            for i in range(len(self)):
                f.write(json.dumps({"prompt": self.prompts[i], "chosen": self.chosen[i],
                                    "rejected": self.rejected[i],
                                    "chosen_score": self.chosen_score[i],
                                    "rejected_score": self.rejected_score[i]}) + "\n")

    @classmethod
    def load(cls, path):
        rows = [json.loads(line) for line in Path(path).read_text().splitlines() if line]
        return cls([r["prompt"] for r in rows], [r["chosen"] for r in rows],
                   [r["rejected"] for r in rows], [r["chosen_score"] for r in rows],
                   [r["rejected_score"] for r in rows])


def gen_dpo_pairs(spec: TeacherSpec = TeacherSpec(), size: int = 256, seed: int = 0,
                  split: str = "train", max_resample: int = 100) -> PairCorpus:
    """Two completions per prompt from the noisy plain process, ranked by the
    (smoothed) expert teacher's log-likelihood; ties are resampled."""
    if size <= 0:
        raise ValueError("size must be positive")
    rng = stream(seed, "dpo_pairs", split)
    judge = Teacher(spec, "expert", smoothing=1e-3)
    out = PairCorpus([], [], [], [], [])
    for _ in range(size):
        t = int(rng.integers(10))
        for attempt in range(max_resample):
            p, a = sample_arith(spec.plain, rng, t)
            _, b = sample_arith(spec.plain, rng, t)
            sa, sb = judge.sequence_logp(p, a), judge.sequence_logp(p, b)
            if sa != sb:
                break
            out.resamples += 1
        else:
            raise RuntimeError("could not break a teacher-score tie")
        if sa < sb:
            a, b, sa, sb = b, a, sb, sa
        out.prompts.append(p)
        out.chosen.append(a)
        out.rejected.append(b)
        out.chosen_score.append(sa)
        out.rejected_score.append(sb)
    if out.resamples:
        log.info("gen_dpo_pairs: resampled %d tied pairs", out.resamples)
    return out
