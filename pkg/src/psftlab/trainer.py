"""Optimisation loops and the run-directory writer."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from psftlab import autodiff as ad
from psftlab import objectives as obj
from psftlab.objectives import ObjectiveConfig
from psftlab.optim import Adam
from psftlab.policy import Policy, TokenBatch, save_checkpoint, sample, token_entropy
from psftlab.rng import stream
from psftlab.tasks import EOS, PAD, Corpus, PairCorpus, RewardTask, arith_prompt

log = logging.getLogger(__name__)

LOG_SCHEMA_VERSION = 1
METHODS = ("pretrain", "sft", "sft_kl", "psft", "grpo", "dpo")
REFRESH = ("per_train_batch", "per_step", "per_epoch")

DEFAULT_LR = {"pretrain": 1e-3, "sft": 1e-3, "sft_kl": 1e-3, "psft": 3e-4,
              "grpo": 3e-4, "dpo": 1e-4}
DEFAULT_WD = {"pretrain": 0.0, "sft": 0.1, "sft_kl": 0.1, "psft": 0.1, "grpo": 0.0, "dpo": 0.0}
# (train_batch, mini_batch); for grpo both count prompts, each with rollout_n samples
DEFAULT_BATCH = {"pretrain": (128, 16), "sft": (128, 16), "sft_kl": (128, 16),
                 "psft": (128, 16), "grpo": (16, 4), "dpo": (32, 32)}


@dataclass(frozen=True)
class TrainConfig:
    method: str = "psft"
    train_batch: int | None = None  # None: per-method default
    mini_batch: int | None = None
    lr: float | None = None
    weight_decay: float | None = None
    epochs: int = 10
    warmup_epochs: int = 1
    snapshot_refresh: str = "per_train_batch"
    seed: int = 0
    objective: ObjectiveConfig = ObjectiveConfig()
    eval_every: int = 0  # optimizer steps between evals; 0 = epoch ends only
    ratio_histogram: bool = False  # add full ratio histograms to clip events
    # RL stage
    rollout_n: int = 8
    iterations: int = 150
    max_new_tokens: int = 8
    temperature: float = 1.0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        tb, mb = DEFAULT_BATCH[self.method]
        if self.train_batch is None:
            object.__setattr__(self, "train_batch", tb)
        if self.mini_batch is None:
            object.__setattr__(self, "mini_batch", min(mb, self.train_batch))
        if self.mini_batch < 1 or self.train_batch < 1:
            raise ValueError("batch sizes must be >= 1")
        if self.train_batch % self.mini_batch:
            raise ValueError("train_batch must be divisible by mini_batch")
        if self.snapshot_refresh not in REFRESH:
            raise ValueError(f"snapshot_refresh must be one of {REFRESH}")
        if self.warmup_epochs < 0 or self.epochs < 0:
            raise ValueError("epochs and warmup_epochs must be >= 0")
        if self.rollout_n < 2:
            raise ValueError("rollout_n must be >= 2")

    @property
    def effective_lr(self) -> float:
        return DEFAULT_LR[self.method] if self.lr is None else self.lr

    @property
    def effective_weight_decay(self) -> float:
        return DEFAULT_WD[self.method] if self.weight_decay is None else self.weight_decay

    def to_dict(self):
        d = asdict(self)
        d["objective"] = self.objective.to_dict()
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if isinstance(d.get("objective"), dict):
            d["objective"] = ObjectiveConfig.from_dict(d["objective"])
        return cls(**d)


@dataclass
class RunLogRecord:
    step: int
    epoch: int
    method: str
    loss: float
    mean_entropy: float
    grad_norm: float
    clip_fraction: float
    eval: dict | None = None
    extra: dict = field(default_factory=dict)
    wallclock: float = 0.0

    def to_json(self) -> str:
        d = asdict(self)
        d.pop("wallclock")
        d["schema"] = LOG_SCHEMA_VERSION
        return json.dumps(d, sort_keys=True)


@dataclass
class RunResult:
    policy: Policy
    records: list
    evals: list = field(default_factory=list)  # (step, epoch, metrics)
    clip_log: list = field(default_factory=list)
    info: dict = field(default_factory=dict)


class RunWriter:
    """Streams a run's artifacts into ``root/run_id``.

    Deterministic files: ``log.jsonl``, ``clip_events.jsonl``, ``metrics.csv``,
    ``epoch_{k}.ckpt``. Wallclock goes to ``timing.jsonl`` so the rest can be
    compared byte for byte across replays.
    """

    def __init__(self, run_dir):
        self.dir = Path(run_dir)
        self.dir.mkdir(parents=True, exist_ok=True)
        self._log = open(self.dir / "log.jsonl", "w")
        self._timing = open(self.dir / "timing.jsonl", "w")
        self._clips = None

    def record(self, rec: RunLogRecord):
        self._log.write(rec.to_json() + "\n")
        self._timing.write(json.dumps({"step": rec.step, "wallclock": rec.wallclock}) + "\n")

    def clip_event(self, entry: dict):
        if self._clips is None:
            self._clips = open(self.dir / "clip_events.jsonl", "w")
        self._clips.write(json.dumps(entry, sort_keys=True) + "\n")

    def checkpoint(self, policy: Policy, epoch: int):
        save_checkpoint(policy, self.dir / f"epoch_{epoch}.ckpt", {"epoch": epoch})

    def metrics(self, evals):
        write_metrics_csv(self.dir / "metrics.csv", evals)

    def close(self):
        for f in (self._log, self._timing, self._clips):
            if f is not None:
                f.close()


def write_metrics_csv(path, evals):
    keys = sorted({k for _, _, m in evals for k in m})
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step", "epoch"] + keys)
        for step, epoch, m in evals:
            w.writerow([step, epoch] + [repr(float(m[k])) if k in m else "" for k in keys])


# -- evaluation -------------------------------------------------------------

def _nll_and_entropy(policy, corpus: Corpus, chunk: int = 256):
    tot_nll = tot_h = 0.0
    n = 0
    for i in range(0, len(corpus), chunk):
        batch = corpus.batch(range(i, min(i + chunk, len(corpus))))
        with ad.no_grad():
            lsm, logp = policy.forward(batch)
        mask = batch.response_mask
        h, _ = token_entropy(lsm.data, batch)
        tot_nll -= float(logp.data[mask].sum())
        tot_h += float(h[mask].sum())
        n += int(mask.sum())
    return tot_nll / n, tot_h / n


def task_accuracy(policy, task: RewardTask, prompts, temperature=0.0, samples=1,
                  seed=0, max_new=8):
    rows = [p for p in prompts for _ in range(samples)]
    out = sample(policy, rows, max_new, temperature, seed=seed, stream_name="eval",
                 eos=EOS, pad=PAD)
    return float(np.mean([task.verify(p, r) for p, r in zip(out.prompts(), out.responses())]))


def evaluate(policy, eval_sets: dict) -> dict:
    """Deterministic metrics.

    ``eval_sets`` may hold ``indomain`` and ``ood`` corpora and a ``task``
    (RewardTask) for greedy accuracy over every target, plus sampled accuracy
    (``sample_k`` draws per target, fixed seed).
    """
    m = {}
    if "indomain" in eval_sets:
        m["indomain_nll"], m["indomain_entropy"] = _nll_and_entropy(policy, eval_sets["indomain"])
    if "ood" in eval_sets:
        m["ood_nll"], m["ood_entropy"] = _nll_and_entropy(policy, eval_sets["ood"])
    task = eval_sets.get("task")
    if task is not None:
        prompts = [arith_prompt(t) for t in range(10)]
        m["indomain_acc"] = task_accuracy(policy, task, prompts)
        k = eval_sets.get("sample_k", 16)
        if k:
            m["indomain_sample_acc"] = task_accuracy(policy, task, prompts, 1.0, k,
                                                     seed=eval_sets.get("seed", 0))
    return m


# -- supervised loops -------------------------------------------------------

def _epoch_order(seed: int, epoch: int, n: int):
    return stream(seed, "shuffle", epoch).permutation(n)


def _emit(writer, result, rec):
    result.records.append(rec)
    if writer is not None:
        writer.record(rec)


def _do_eval(policy, eval_sets, result, step, epoch, writer):
    if not eval_sets:
        return None
    m = evaluate(policy, eval_sets)
    result.evals.append((step, epoch, m))
    return m


def run_finetune(policy: Policy, corpus: Corpus, cfg: TrainConfig, eval_sets=None,
                 writer: RunWriter | None = None, ref: Policy | None = None) -> RunResult:
    """SFT / SFT-KL / PSFT (and plain pretraining) over ``corpus``.

    PSFT runs ``warmup_epochs`` epochs of SFT first; afterwards the old policy
    is re-snapshotted at every ``snapshot_refresh`` boundary. SFT-KL's
    reference is the policy as passed in, fixed for the run.
    """
    if cfg.method not in ("sft", "sft_kl", "psft", "pretrain"):
        raise ValueError(f"run_finetune does not handle method {cfg.method!r}")
    if len(corpus) == 0:
        raise ValueError("empty corpus")
    if cfg.train_batch > len(corpus):
        raise ValueError("train_batch exceeds corpus size")
    oc = cfg.objective
    opt = Adam(policy.params, cfg.effective_lr, weight_decay=cfg.effective_weight_decay)
    if cfg.method == "sft_kl":
        ref = ref if ref is not None else policy.snapshot()
    result = RunResult(policy, [])
    n_train = len(corpus) // cfg.train_batch
    per_train = cfg.train_batch // cfg.mini_batch
    t0 = time.perf_counter()
    step = 0
    _do_eval(policy, eval_sets, result, 0, 0, writer)
    snap = None
    for epoch in range(1, cfg.epochs + 1):
        order = _epoch_order(cfg.seed, epoch, len(corpus))
        proximal = cfg.method == "psft" and epoch > cfg.warmup_epochs
        if proximal and cfg.snapshot_refresh == "per_epoch":
            snap = policy.snapshot()
        for tb in range(n_train):
            rows = order[tb * cfg.train_batch:(tb + 1) * cfg.train_batch]
            if proximal and cfg.snapshot_refresh == "per_train_batch":
                snap = policy.snapshot()
            for mb in range(per_train):
                batch = corpus.batch(rows[mb * cfg.mini_batch:(mb + 1) * cfg.mini_batch])
                if proximal and cfg.snapshot_refresh == "per_step":
                    snap = policy.snapshot()
                graph = ad.Graph()
                with graph:
                    if proximal:
                        out = obj.psft_loss(policy, snap, batch, oc.epsilon)
                    elif cfg.method == "sft_kl":
                        out = obj.sft_kl_loss(policy, ref, batch, oc.kl_coef, oc.kl_direction)
                    else:
                        out = obj.sft_loss(policy, batch)
                opt.zero_grad()
                ad.backward(graph, out.loss)
                gnorm = opt.grad_norm()
                opt.step()
                step += 1
                extra = {k: v for k, v in out.extras.items() if isinstance(v, float)}
                if cfg.method == "psft":
                    extra["proximal"] = proximal
                    entry = _clip_entry(step, epoch, batch, out, proximal,
                                        cfg.ratio_histogram)
                    result.clip_log.append(entry)
                    if writer is not None:
                        writer.clip_event(entry)
                metrics = None
                if cfg.eval_every and step % cfg.eval_every == 0:
                    metrics = _do_eval(policy, eval_sets, result, step, epoch, writer)
                elif not cfg.eval_every and tb == n_train - 1 and mb == per_train - 1:
                    metrics = _do_eval(policy, eval_sets, result, step, epoch, writer)
                rec = RunLogRecord(step, epoch, cfg.method, out.value, out.mean_entropy,
                                   gnorm, out.clip_fraction, metrics, extra,
                                   time.perf_counter() - t0)
                _emit(writer, result, rec)
        if writer is not None:
            writer.checkpoint(policy, epoch)
    if writer is not None:
        writer.metrics(result.evals)
    return result


RATIO_BINS = np.array([0.0, 0.5, 0.8, 0.9, 1.0, 1.1, 1.2, 1.28, 1.4, 2.0, np.inf])


def _clip_entry(step, epoch, batch: TokenBatch, out, proximal, histogram=False):
    toks = batch.tokens[batch.response_mask]
    ids, counts = np.unique(toks, return_counts=True)
    clipped = out.clipped_tokens(batch.tokens) if proximal else []
    entry = {"step": step, "epoch": epoch,
             "clipped": [[int(t), float(r)] for t, r in clipped],
             "totals": {str(int(i)): int(c) for i, c in zip(ids, counts)}}
    if histogram:
        h, _ = np.histogram(out.ratios[batch.response_mask], RATIO_BINS)
        entry["ratio_hist"] = h.tolist()
    return entry


def run_pretrain(policy: Policy, corpus: Corpus, cfg: TrainConfig, eval_sets=None,
                 writer=None) -> RunResult:
    return run_finetune(policy, corpus, replace(cfg, method="pretrain"), eval_sets, writer)


# -- RL ----------------------------------------------------------------------

def run_rl(policy: Policy, reward_task: RewardTask, cfg: TrainConfig, prompts=None,
           eval_sets=None, writer: RunWriter | None = None) -> RunResult:
    """GRPO-style RL with asymmetric PPO clipping and no KL term.

    Each iteration samples ``rollout_n`` completions for ``train_batch``
    prompts at ``temperature``, normalises rewards within each group, drops
    zero-variance groups, and takes mini-batch steps (``mini_batch`` prompts'
    worth of rollouts each) against the iteration-start snapshot.
    """
    oc = cfg.objective
    if prompts is None:
        prompts = reward_task.prompts(64, cfg.seed)
    opt = Adam(policy.params, cfg.effective_lr, weight_decay=cfg.effective_weight_decay)
    result = RunResult(policy, [], info={"skipped_iterations": 0, "iteration_reward": [],
                                         "iteration_entropy": []})
    t0 = time.perf_counter()
    step = 0
    G = cfg.rollout_n
    _do_eval(policy, eval_sets, result, 0, 0, writer)
    for it in range(1, cfg.iterations + 1):
        pick = stream(cfg.seed, "rl_batch", it).integers(len(prompts), size=cfg.train_batch)
        rows = [prompts[i] for i in pick for _ in range(G)]
        snap = policy.snapshot()
        roll = sample(snap, rows, cfg.max_new_tokens, cfg.temperature, seed=cfg.seed,
                      stream_name=f"rollout/{it}", eos=EOS, pad=PAD)
        rewards = np.array([reward_task.verify(p, r)
                            for p, r in zip(roll.prompts(), roll.responses())], dtype=float)
        _, roll_h = snap.entropy(roll)
        result.info["iteration_reward"].append(float(rewards.mean()))
        result.info["iteration_entropy"].append(roll_h)
        adv, kept = obj.grpo_advantages(rewards.reshape(-1, G), oc.advantage_std_floor)
        if not kept.any():
            log.warning("rl iteration %d: every group has zero reward variance; skipped", it)
            result.info["skipped_iterations"] += 1
            continue
        keep_rows = np.where(np.repeat(kept, G))[0]
        seq_adv = adv.reshape(-1)
        order = stream(cfg.seed, "rl_shuffle", it).permutation(keep_rows)
        mb_size = cfg.mini_batch * G
        for s in range(0, len(order), mb_size):
            idx = np.sort(order[s:s + mb_size])
            batch = roll.take(idx)
            graph = ad.Graph()
            with graph:
                out = obj.ppo_clip_loss(policy, snap, batch, seq_adv[idx],
                                        oc.clip_low, oc.clip_high)
            opt.zero_grad()
            ad.backward(graph, out.loss)
            gnorm = opt.grad_norm()
            opt.step()
            step += 1
            extra = {"iteration": it, "reward_mean": float(rewards.mean()),
                     "kept_groups": int(kept.sum()), "rollout_entropy": roll_h}
            rec = RunLogRecord(step, it, cfg.method, out.value, out.mean_entropy, gnorm,
                               out.clip_fraction, None, extra, time.perf_counter() - t0)
            _emit(writer, result, rec)
        if cfg.eval_every and it % cfg.eval_every == 0 and eval_sets:
            m = _do_eval(policy, eval_sets, result, step, it, writer)
            if result.records and result.records[-1].step == step:
                result.records[-1].eval = m
    if eval_sets and (not cfg.eval_every or cfg.iterations % cfg.eval_every):
        _do_eval(policy, eval_sets, result, step, cfg.iterations, writer)
    if writer is not None:
        writer.checkpoint(policy, 1)
        writer.metrics(result.evals)
    return result


# -- DPO ---------------------------------------------------------------------

def dpo_margin(policy, ref, pairs: PairCorpus, beta: float) -> dict:
    chosen, rejected = pairs.batches()
    with ad.no_grad():
        out = obj.dpo_loss(policy, ref, chosen, rejected, beta)
    c, r = out.extras["chosen_reward"], out.extras["rejected_reward"]
    return {"dpo_loss": out.value, "chosen_reward": float(c.mean()),
            "rejected_reward": float(r.mean()), "margin": float((c - r).mean()),
            "pair_accuracy": out.extras["accuracy"]}


def run_dpo(policy: Policy, pairs: PairCorpus, cfg: TrainConfig, eval_pairs=None,
            eval_sets=None, writer: RunWriter | None = None) -> RunResult:
    """DPO against a frozen copy of the incoming policy."""
    if len(pairs) == 0:
        raise ValueError("empty pair corpus")
    beta = cfg.objective.dpo_beta
    ref = policy.snapshot()
    opt = Adam(policy.params, cfg.effective_lr, weight_decay=cfg.effective_weight_decay)
    result = RunResult(policy, [], info={"reference": ref})
    t0 = time.perf_counter()
    step = 0
    n_batches = max(1, len(pairs) // cfg.train_batch)
    for epoch in range(1, cfg.epochs + 1):
        order = _epoch_order(cfg.seed, epoch, len(pairs))
        for b in range(n_batches):
            rows = order[b * cfg.train_batch:(b + 1) * cfg.train_batch]
            chosen, rejected = pairs.batches(rows)
            graph = ad.Graph()
            with graph:
                out = obj.dpo_loss(policy, ref, chosen, rejected, beta)
            opt.zero_grad()
            ad.backward(graph, out.loss)
            gnorm = opt.grad_norm()
            opt.step()
            step += 1
            extra = {"chosen_reward": float(out.extras["chosen_reward"].mean()),
                     "rejected_reward": float(out.extras["rejected_reward"].mean()),
                     "pair_accuracy": out.extras["accuracy"]}
            rec = RunLogRecord(step, epoch, cfg.method, out.value, out.mean_entropy, gnorm,
                               0.0, None, extra, time.perf_counter() - t0)
            _emit(writer, result, rec)
        if writer is not None:
            writer.checkpoint(policy, epoch)
    metrics = {}
    if eval_pairs is not None:
        metrics.update({f"heldout_{k}": v for k, v in dpo_margin(policy, ref, eval_pairs, beta).items()})
    if eval_sets:
        metrics.update(evaluate(policy, eval_sets))
    if metrics:
        result.evals.append((step, cfg.epochs, metrics))
    if writer is not None:
        writer.metrics(result.evals)
    return result
