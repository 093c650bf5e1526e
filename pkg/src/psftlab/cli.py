"""``psftlab`` command-line entry point.

Every run lives in ``<out-root>/<run-id>`` and starts with ``config.json``,
the fully merged configuration (defaults < ``--config`` file < flags).
``psftlab --replay DIR`` re-executes that file into a fresh run directory.

Exit codes: 0 ok, 2 config error, 3 missing or unreadable input, 4 runtime
failure. Failures print a one-line JSON error record to stderr (and to
``error.json`` when the run directory already exists).
"""

import argparse
import csv
import copy
import hashlib
import json
import logging
import math
import os
import sys
import time
from dataclasses import fields
from pathlib import Path

import numpy as np

from psftlab import diagnostics, tasks, trainer
from psftlab.objectives import ObjectiveConfig
from psftlab.policy import ChecksumError, Policy, PolicyConfig, load_checkpoint, save_checkpoint
from psftlab.tasks import CorpusSizes, PairCorpus, RewardTask, TeacherSpec
from psftlab.trainer import DEFAULT_BATCH, DEFAULT_LR, DEFAULT_WD, RunWriter, TrainConfig

ENV_OUT_ROOT = "PSFTLAB_OUT"
DEFAULT_OUT_ROOT = "runs"
EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_RUNTIME = 0, 2, 3, 4
COMMANDS = ("gen-data", "pretrain", "finetune", "rl", "dpo", "eval", "report", "sweep")
PAIRED_METHODS = ("sft", "sft_kl", "psft")
SPLITS = ("pretrain", "expert_train", "indomain_eval", "ood_eval")

log = logging.getLogger("psftlab")


class ConfigError(Exception):
    exit_code = EXIT_CONFIG


class MissingInput(Exception):
    exit_code = EXIT_MISSING


def _names(cls):
    return {f.name for f in fields(cls)}


TRAIN_KEYS = _names(TrainConfig) - {"objective"}
SCHEMA = {
    "command": None, "run_id": None, "out_root": None, "init": None, "init_sha256": None,
    "paired": None, "eval_sample_k": None,
    "policy": _names(PolicyConfig),
    "train": TRAIN_KEYS,
    "objective": _names(ObjectiveConfig),
    "data": {"seed": None, "dir": None, "sizes": _names(CorpusSizes), "teacher": None},
    "sweep": {"param": None, "values": None},
    "report": {"run": None, "smooth": None, "top_k": None},
}
METHOD_FOR = {"pretrain": "pretrain", "finetune": "psft", "sweep": "psft", "rl": "grpo",
              "dpo": "dpo"}


def default_config(command: str) -> dict:
    train = {f.name: f.default for f in fields(TrainConfig) if f.name != "objective"}
    train["method"] = METHOD_FOR.get(command, "psft")
    return {
        "command": command, "run_id": None, "out_root": None, "init": None,
        "init_sha256": None, "paired": False, "eval_sample_k": 16,
        "policy": PolicyConfig().to_dict(),
        "train": train,
        "objective": ObjectiveConfig().to_dict(),
        "data": {"seed": 0, "dir": None, "sizes": CorpusSizes().to_dict(),
                 "teacher": TeacherSpec().to_dict()},
        "sweep": {"param": None, "values": []},
        "report": {"run": None, "smooth": None, "top_k": 5},
    }


def check_keys(cfg: dict, schema=SCHEMA, where="config"):
    if not isinstance(cfg, dict):
        raise ConfigError(f"{where}: expected an object")
    unknown = sorted(set(cfg) - set(schema))
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {unknown}")
    for k, sub in schema.items():
        if k in cfg and sub is not None and cfg[k] is not None:
            check_keys(cfg[k], {n: None for n in sub} if isinstance(sub, set) else sub,
                       f"{where}.{k}")


def merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k != "teacher":
            out[k] = merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


# -- config objects ------------------------------------------------------------

def _build(what, fn):
    try:
        return fn()
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid {what}: {e}") from None


def train_config(cfg) -> TrainConfig:
    objective = _build("objective", lambda: ObjectiveConfig.from_dict(cfg["objective"]))
    return _build("train", lambda: TrainConfig(objective=objective, **cfg["train"]))


def policy_config(cfg) -> PolicyConfig:
    return _build("policy", lambda: PolicyConfig.from_dict(cfg["policy"]))


def teacher_spec(cfg) -> TeacherSpec:
    return _build("data.teacher", lambda: TeacherSpec.from_dict(cfg["data"]["teacher"]))


def corpus_sizes(cfg) -> CorpusSizes:
    return _build("data.sizes", lambda: CorpusSizes(**cfg["data"]["sizes"]))


# -- inputs --------------------------------------------------------------------

def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def load_init(cfg, required=True):
    path = cfg.get("init")
    if path is None:
        if required:
            raise MissingInput(f"{cfg['command']} requires --init <checkpoint>")
        return None
    p = Path(path)
    if not p.is_file():
        raise MissingInput(f"checkpoint not found: {path}")
    digest = sha256_file(p)
    if cfg.get("init_sha256") and cfg["init_sha256"] != digest:
        raise MissingInput(f"checkpoint {path} differs from the recorded sha256")
    cfg["init"] = str(p.resolve())
    cfg["init_sha256"] = digest
    try:
        return load_checkpoint(p)
    except ChecksumError as e:
        raise MissingInput(str(e)) from None


def load_data(cfg) -> dict:
    """Corpora, DPO pairs and RL prompts, from ``data.dir`` or regenerated."""
    d, spec, sizes = cfg["data"], teacher_spec(cfg), corpus_sizes(cfg)
    seed = d["seed"]
    if d.get("dir"):
        root = Path(d["dir"])
        try:
            data = {s: tasks.Corpus.load(root / f"{s}.txt") for s in SPLITS}
            data["dpo_train"] = PairCorpus.load(root / "dpo_train.jsonl")
            data["dpo_eval"] = PairCorpus.load(root / "dpo_eval.jsonl")
            data["rl_prompts"] = json.loads((root / "rl_prompts.json").read_text())
        except FileNotFoundError as e:
            raise MissingInput(f"data directory incomplete: {e.filename}") from None
        return data
    data = tasks.gen_corpora(spec, sizes, seed)
    data["dpo_train"] = tasks.gen_dpo_pairs(spec, sizes.dpo_train, seed, "train")
    data["dpo_eval"] = tasks.gen_dpo_pairs(spec, sizes.dpo_eval, seed, "eval")
    data["rl_prompts"] = RewardTask().prompts(sizes.rl_prompts, seed)
    return data


def eval_sets(cfg, data, seed):
    return {"indomain": data["indomain_eval"], "ood": data["ood_eval"], "task": RewardTask(),
            "sample_k": cfg["eval_sample_k"], "seed": seed}


# -- run directory ---------------------------------------------------------------

def out_root(cfg) -> Path:
    return Path(cfg.get("out_root") or os.environ.get(ENV_OUT_ROOT) or DEFAULT_OUT_ROOT)


def open_run_dir(cfg) -> Path:
    if not cfg.get("run_id"):
        cfg["run_id"] = f"{cfg['command']}-{time.strftime('%Y%m%d-%H%M%S')}-{os.getpid()}"
    if "/" in cfg["run_id"] or cfg["run_id"] in (".", ".."):
        raise ConfigError(f"invalid run_id {cfg['run_id']!r}")
    cfg["out_root"] = str(out_root(cfg))
    run_dir = out_root(cfg) / cfg["run_id"]
    if run_dir.exists():
        raise ConfigError(f"run directory {run_dir} already exists; refusing to overwrite")
    run_dir.mkdir(parents=True)
    return run_dir


def echo_config(run_dir: Path, cfg: dict):
    (run_dir / "config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# -- commands --------------------------------------------------------------------

def cmd_gen_data(cfg, run_dir):
    data = load_data({**cfg, "data": {**cfg["data"], "dir": None}})
    for s in SPLITS:
        data[s].save(run_dir / f"{s}.txt")
    data["dpo_train"].save(run_dir / "dpo_train.jsonl")
    data["dpo_eval"].save(run_dir / "dpo_eval.jsonl")
    _write_json(run_dir / "rl_prompts.json", data["rl_prompts"])
    return {s: len(data[s]) for s in SPLITS + ("dpo_train", "dpo_eval", "rl_prompts")}


def _finish(writer, policy, run_dir):
    writer.close()
    save_checkpoint(policy, run_dir / "final.ckpt", {"final": True})


def _final_metrics(result):
    return result.evals[-1][2] if result.evals else {}


def cmd_pretrain(cfg, run_dir):
    tc = train_config(cfg)
    data = load_data(cfg)
    policy = Policy(policy_config(cfg))
    writer = RunWriter(run_dir)
    res = trainer.run_pretrain(policy, data["pretrain"], tc, eval_sets(cfg, data, tc.seed), writer)
    _finish(writer, res.policy, run_dir)
    return _final_metrics(res)


def _finetune_one(cfg, tc, base, data, run_dir):
    writer = RunWriter(run_dir)
    res = trainer.run_finetune(base.clone(), data["expert_train"], tc,
                               eval_sets(cfg, data, tc.seed), writer, ref=base.snapshot())
    _finish(writer, res.policy, run_dir)
    return res


def summarize(res) -> dict:
    """Final metrics plus OOD degradation and run-level clip statistics."""
    first, last = res.evals[0][2], res.evals[-1][2]
    out = dict(last)
    if "ood_nll" in first:
        out["ood_nll_delta"] = last["ood_nll"] - first["ood_nll"]
    if res.records:
        out["final_train_entropy"] = res.records[-1].mean_entropy
        out["mean_clip_fraction"] = float(np.mean([r.clip_fraction for r in res.records]))
    return out


def write_table(path, rows: list, first: str):
    keys = sorted({k for r in rows for k in r if k != first})
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow([first] + keys)
        for r in rows:
            w.writerow([r[first]] + [repr(r[k]) if isinstance(r.get(k), float) else r.get(k, "")
                                     for k in keys])


def cmd_finetune(cfg, run_dir):
    base = load_init(cfg)
    data = load_data(cfg)
    if not cfg.get("paired"):
        tc = train_config(cfg)
        if tc.method not in PAIRED_METHODS:
            raise ConfigError(f"finetune method must be one of {PAIRED_METHODS}")
        return summarize(_finetune_one(cfg, tc, base, data, run_dir))
    rows = []
    for m in PAIRED_METHODS:
        sub = merge(cfg, {"train": {"method": m, "lr": cfg["train"]["lr"]}})
        res = _finetune_one(sub, train_config(sub), base, data, run_dir / m)
        rows.append({"method": m, **summarize(res)})
    write_table(run_dir / "report.csv", rows, "method")
    return {r["method"]: r for r in rows}


def _sweep_value(param, raw):
    if param in ("epsilon",) and str(raw).lower() == "inf":
        return math.inf
    for conv in (int, float):
        try:
            return conv(raw)
        except ValueError:
            pass
    return raw


def cmd_sweep(cfg, run_dir):
    param, values = cfg["sweep"]["param"], cfg["sweep"]["values"]
    section = "objective" if param in SCHEMA["objective"] else "train" if param in TRAIN_KEYS else None
    if section is None:
        raise ConfigError(f"cannot sweep unknown parameter {param!r}")
    if not values:
        raise ConfigError("sweep needs --values")
    base = load_init(cfg)
    data = load_data(cfg)
    rows = []
    for raw in values:
        v = _sweep_value(param, raw)
        sub = merge(cfg, {section: {param: "inf" if v == math.inf else v}})
        tc = train_config(sub)
        res = _finetune_one(sub, tc, base, data, run_dir / f"{param}={raw}")
        rows.append({param: str(raw), **summarize(res)})
    write_table(run_dir / "comparison.csv", rows, param)
    return {"runs": len(rows)}


def cmd_rl(cfg, run_dir):
    policy = load_init(cfg)
    tc = train_config(cfg)
    if tc.method != "grpo":
        raise ConfigError("rl runs method 'grpo'")
    data = load_data(cfg)
    writer = RunWriter(run_dir)
    res = trainer.run_rl(policy, RewardTask(), tc, data["rl_prompts"],
                         {"task": RewardTask(), "sample_k": cfg["eval_sample_k"], "seed": tc.seed},
                         writer)
    _finish(writer, res.policy, run_dir)
    _write_json(run_dir / "rl_curve.json", {"reward": res.info["iteration_reward"],
                                            "entropy": res.info["iteration_entropy"],
                                            "skipped": res.info["skipped_iterations"]})
    return _final_metrics(res)


def cmd_dpo(cfg, run_dir):
    policy = load_init(cfg)
    tc = train_config(cfg)
    if tc.method != "dpo":
        raise ConfigError("dpo runs method 'dpo'")
    data = load_data(cfg)
    writer = RunWriter(run_dir)
    res = trainer.run_dpo(policy, data["dpo_train"], tc, data["dpo_eval"],
                          eval_sets(cfg, data, tc.seed), writer)
    _finish(writer, res.policy, run_dir)
    return _final_metrics(res)


def cmd_eval(cfg, run_dir):
    policy = load_init(cfg, required=False)
    if policy is None:
        policy = Policy(policy_config(cfg))
    data = load_data(cfg)
    m = trainer.evaluate(policy, eval_sets(cfg, data, cfg["train"]["seed"]))
    trainer.write_metrics_csv(run_dir / "metrics.csv", [(0, 0, m)])
    _write_json(run_dir / "metrics.json", m)
    return m


def cmd_report(cfg, run_dir):
    src = cfg["report"]["run"]
    if not src or not (Path(src) / "log.jsonl").is_file():
        raise MissingInput(f"report needs --run <dir with log.jsonl>, got {src!r}")
    src = Path(src)
    logs = diagnostics.load_jsonl(src / "log.jsonl")
    window = cfg["report"]["smooth"]
    for q in diagnostics.QUANTITIES:
        diagnostics.trace_export(logs, q, window, run_dir / f"trace_{q}.csv")
    out = {"records": len(logs)}
    clip_path = src / "clip_events.jsonl"
    if clip_path.is_file():
        events = diagnostics.load_jsonl(clip_path)
        k = cfg["report"]["top_k"]
        overall = diagnostics.clip_report(events, top_k=k)
        per_epoch = {str(e): r.to_dict()
                     for e, r in diagnostics.clip_reports_by_epoch(events, k).items()}
        _write_json(run_dir / "clip_report.json", {"overall": overall.to_dict(),
                                                    "per_epoch": per_epoch})
        out["clip_fraction"] = overall.total_fraction
        out["top_clipped"] = overall.top_ids()
    return out


NEEDS_INIT = ("finetune", "sweep", "rl", "dpo")
HANDLERS = {"gen-data": cmd_gen_data, "pretrain": cmd_pretrain, "finetune": cmd_finetune,
            "rl": cmd_rl, "dpo": cmd_dpo, "eval": cmd_eval, "report": cmd_report,
            "sweep": cmd_sweep}


def execute(cfg: dict) -> tuple[Path, dict]:
    """Validate, open the run directory, echo the config, run the command."""
    check_keys(cfg)
    if cfg["command"] not in HANDLERS:
        raise ConfigError(f"unknown command {cfg['command']!r}")
    # fail on bad values before touching the filesystem
    train_config(cfg), policy_config(cfg), teacher_spec(cfg), corpus_sizes(cfg)
    if cfg["command"] in NEEDS_INIT and cfg["init"] is None:
        raise MissingInput(f"{cfg['command']} requires --init <checkpoint>")
    if cfg["command"] == "report":
        src = cfg["report"]["run"]
        if not src or not (Path(src) / "log.jsonl").is_file():
            raise MissingInput(f"report needs --run <dir with log.jsonl>, got {src!r}")
    if cfg["init"] is not None and not Path(cfg["init"]).is_file():
        raise MissingInput(f"checkpoint not found: {cfg['init']}")
    if cfg["data"]["dir"] is not None and not Path(cfg["data"]["dir"]).is_dir():
        raise MissingInput(f"data directory not found: {cfg['data']['dir']}")
    run_dir = open_run_dir(cfg)
    try:
        result = HANDLERS[cfg["command"]](cfg, run_dir)
    except Exception as e:
        e.run_dir = run_dir
        raise
    finally:
        echo_config(run_dir, cfg)
    return run_dir, result


# -- argument parsing --------------------------------------------------------------

def _d(value):
    return f" (default: {value})"


def _flag(p, name, dest, typ, default, help_, **kw):
    p.add_argument(name, dest=dest, type=typ, default=None,
                   help=help_ + ("" if default is argparse.SUPPRESS else _d(default)), **kw)


_TD, _OD, _PD = TrainConfig(), ObjectiveConfig(), PolicyConfig()
_LR_HELP = ", ".join(f"{k} {v:g}" for k, v in DEFAULT_LR.items())
_WD_HELP = ", ".join(f"{k} {v:g}" for k, v in DEFAULT_WD.items())
_BATCH_HELP = ", ".join(f"{k} {v[0]}/{v[1]}" for k, v in DEFAULT_BATCH.items())

# dest -> (section, key)
FLAG_TARGETS = {
    "run_id": (None, "run_id"), "out_root": (None, "out_root"), "init": (None, "init"),
    "eval_sample_k": (None, "eval_sample_k"),
    "data_dir": ("data", "dir"), "data_seed": ("data", "seed"),
    "method": ("train", "method"), "epochs": ("train", "epochs"),
    "train_batch": ("train", "train_batch"), "mini_batch": ("train", "mini_batch"),
    "lr": ("train", "lr"), "weight_decay": ("train", "weight_decay"),
    "warmup_epochs": ("train", "warmup_epochs"), "snapshot_refresh": ("train", "snapshot_refresh"),
    "eval_every": ("train", "eval_every"), "rollout_n": ("train", "rollout_n"),
    "iterations": ("train", "iterations"), "max_new_tokens": ("train", "max_new_tokens"),
    "temperature": ("train", "temperature"), "ratio_histogram": ("train", "ratio_histogram"),
    "epsilon": ("objective", "epsilon"), "clip_low": ("objective", "clip_low"),
    "clip_high": ("objective", "clip_high"), "kl_coef": ("objective", "kl_coef"),
    "kl_direction": ("objective", "kl_direction"), "beta": ("objective", "dpo_beta"),
    "arch": ("policy", "arch"), "layers": ("policy", "layers"), "heads": ("policy", "heads"),
    "d_model": ("policy", "d_model"), "d_ff": ("policy", "d_ff"),
    "max_seq_len": ("policy", "max_seq_len"), "init_scale": ("policy", "init_scale"),
    "param": ("sweep", "param"), "run": ("report", "run"), "smooth": ("report", "smooth"),
    "top_k": ("report", "top_k"),
}


def _epsilon(s):
    return "inf" if s.strip().lower() == "inf" else float(s)


def _common(p):
    _flag(p, "--config", "config", str, argparse.SUPPRESS,
          "JSON config file; flags override its values")
    _flag(p, "--run-id", "run_id", str, "<command>-<timestamp>-<pid>",
          "run directory name under the output root; never overwritten")
    _flag(p, "--out-root", "out_root", str, f"${ENV_OUT_ROOT} or ./{DEFAULT_OUT_ROOT}",
          "output root directory")
    _flag(p, "--seed", "seed", int, 0, "policy-init and training seed")
    _flag(p, "--data", "data_dir", str, "regenerate in memory",
          "data directory written by gen-data")
    _flag(p, "--data-seed", "data_seed", int, 0, "seed for generated corpora")


def _policy_flags(p):
    _flag(p, "--arch", "arch", str, _PD.arch, "policy architecture",
          choices=("transformer", "bigram"))
    _flag(p, "--layers", "layers", int, _PD.layers, "transformer blocks")
    _flag(p, "--heads", "heads", int, _PD.heads, "attention heads")
    _flag(p, "--d-model", "d_model", int, _PD.d_model, "residual width")
    _flag(p, "--d-ff", "d_ff", int, _PD.d_ff, "MLP hidden width")
    _flag(p, "--max-seq-len", "max_seq_len", int, _PD.max_seq_len, "context length")
    _flag(p, "--init-scale", "init_scale", float, _PD.init_scale,
          "std of Gaussian weight init (0 gives a uniform policy)")


def _train_flags(p, epochs=True):
    if epochs:
        _flag(p, "--epochs", "epochs", int, _TD.epochs, "passes over the training set")
    _flag(p, "--train-batch", "train_batch", int, _BATCH_HELP.replace("/", " mini "),
          "examples (RL: prompts) per snapshot/train batch")
    _flag(p, "--mini-batch", "mini_batch", int, "per method, see --train-batch",
          "examples (RL: prompts) per optimizer step")
    _flag(p, "--lr", "lr", float, _LR_HELP, "Adam learning rate")
    _flag(p, "--weight-decay", "weight_decay", float, _WD_HELP, "decoupled weight decay")
    _flag(p, "--eval-every", "eval_every", int, _TD.eval_every,
          "optimizer steps between evals (0: end of each epoch)")
    _flag(p, "--sample-k", "eval_sample_k", int, 16, "samples per target for sampled accuracy")


def _init_flag(p, required_hint=True):
    _flag(p, "--init", "init", str, "none" if not required_hint else argparse.SUPPRESS,
          "input checkpoint" + (" (required)" if required_hint else ""))


def _finetune_flags(p):
    _init_flag(p)
    _flag(p, "--method", "method", str, "psft", "objective", choices=PAIRED_METHODS)
    _flag(p, "--warmup-epochs", "warmup_epochs", int, _TD.warmup_epochs,
          "PSFT: leading epochs of plain SFT")
    _flag(p, "--snapshot-refresh", "snapshot_refresh", str, _TD.snapshot_refresh,
          "PSFT: when the old policy is re-snapshotted", choices=trainer.REFRESH)
    _flag(p, "--epsilon", "epsilon", _epsilon, _OD.epsilon, "PSFT clip width; 'inf' disables")
    _flag(p, "--kl-coef", "kl_coef", float, _OD.kl_coef, "SFT-KL penalty weight")
    _flag(p, "--kl-direction", "kl_direction", str, _OD.kl_direction,
          "SFT-KL direction: forward is KL(pi || ref)", choices=("forward", "reverse"))
    p.add_argument("--ratio-histogram", dest="ratio_histogram", action="store_const",
                   const=True, default=None,
                   help="log full importance-ratio histograms in clip events (default: off)")
    _train_flags(p)


class _Parser(argparse.ArgumentParser):
    """Usage errors become ConfigError so they get a JSON error record."""

    def error(self, message):
        raise ConfigError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="psftlab", description=__doc__.split("\n")[0])
    ap.add_argument("--replay", metavar="RUN_DIR", default=None,
                    help="re-run the config.json of RUN_DIR into a new run directory")
    ap.add_argument("--replay-id", default=None,
                    help="run id for --replay (default: <original>-replay)")
    ap.add_argument("--out-root", dest="replay_out_root", default=None,
                    help="output root for --replay (default: the original's)")
    ap.add_argument("-v", "--verbose", action="store_true", help="info-level logging")
    sub = ap.add_subparsers(dest="command", metavar="COMMAND")

    p = sub.add_parser("gen-data", help="write all corpora, DPO pairs and RL prompts")
    _common(p)

    p = sub.add_parser("pretrain", help="train a base policy on the two-domain mixture")
    _common(p)
    _policy_flags(p)
    _train_flags(p)

    p = sub.add_parser("finetune", help="SFT / SFT-KL / PSFT on the expert corpus")
    _common(p)
    _finetune_flags(p)
    p.add_argument("--paired", action="store_const", const=True, default=None,
                   help="run sft, sft_kl and psft from the same checkpoint and data order, "
                        "plus a combined report.csv (default: off)")

    p = sub.add_parser("sweep", help="PSFT fine-tuning across a grid of one parameter")
    _common(p)
    _finetune_flags(p)
    _flag(p, "--param", "param", str, "epsilon", "parameter to sweep")
    p.add_argument("--values", default=None,
                   help="comma-separated values (default: 0.1,0.2,0.28,0.4,inf)")

    p = sub.add_parser("rl", help="GRPO-style RL on the verifiable arithmetic reward")
    _common(p)
    _init_flag(p)
    _train_flags(p, epochs=False)
    _flag(p, "--rollout-n", "rollout_n", int, _TD.rollout_n, "rollouts per prompt")
    _flag(p, "--iterations", "iterations", int, _TD.iterations, "RL iterations")
    _flag(p, "--max-new-tokens", "max_new_tokens", int, _TD.max_new_tokens, "rollout length cap")
    _flag(p, "--temperature", "temperature", float, _TD.temperature, "rollout temperature")
    _flag(p, "--clip-low", "clip_low", float, _OD.clip_low, "PPO lower clip")
    _flag(p, "--clip-high", "clip_high", float, _OD.clip_high, "PPO upper clip")

    p = sub.add_parser("dpo", help="DPO on teacher-ranked preference pairs")
    _common(p)
    _init_flag(p)
    _train_flags(p)
    _flag(p, "--beta", "beta", float, _OD.dpo_beta, "DPO temperature")

    p = sub.add_parser("eval", help="deterministic metrics for a checkpoint or fresh init")
    _common(p)
    _init_flag(p, required_hint=False)
    _policy_flags(p)
    _flag(p, "--sample-k", "eval_sample_k", int, 16, "samples per target for sampled accuracy")

    p = sub.add_parser("report", help="clip reports and CSV traces for a finished run")
    _common(p)
    _flag(p, "--run", "run", str, argparse.SUPPRESS, "run directory to analyse (required)")
    _flag(p, "--smooth", "smooth", int, "none", "centered moving-average window")
    _flag(p, "--top-k", "top_k", int, 5, "clipped tokens to list")
    return ap


def config_from_args(args) -> dict:
    cfg = default_config(args.command)
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise MissingInput(f"config file not found: {path}")
        try:
            file_cfg = json.loads(path.read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from None
        check_keys(file_cfg)
        if file_cfg.get("command", args.command) != args.command:
            raise ConfigError(f"config is for {file_cfg['command']!r}, not {args.command!r}")
        cfg = merge(cfg, file_cfg)
    over = {}
    for dest, (section, key) in FLAG_TARGETS.items():
        v = getattr(args, dest, None)
        if v is None:
            continue
        if section is None:
            over[key] = v
        else:
            over.setdefault(section, {})[key] = v
    if getattr(args, "seed", None) is not None:
        over.setdefault("policy", {})["seed"] = args.seed
        over.setdefault("train", {})["seed"] = args.seed
    if getattr(args, "paired", None):
        over["paired"] = True
    if args.command == "sweep":
        vals = args.values.split(",") if args.values else None
        if vals is not None:
            over.setdefault("sweep", {})["values"] = [v.strip() for v in vals]
    cfg = merge(cfg, over)
    if args.command == "sweep":
        cfg["sweep"]["param"] = cfg["sweep"]["param"] or "epsilon"
        cfg["sweep"]["values"] = cfg["sweep"]["values"] or ["0.1", "0.2", "0.28", "0.4", "inf"]
    return cfg


def replay_config(run_dir, run_id=None, root=None) -> dict:
    path = Path(run_dir) / "config.json"
    if not path.is_file():
        raise MissingInput(f"no config.json in {run_dir}")
    cfg = json.loads(path.read_text())
    check_keys(cfg)
    cfg["run_id"] = run_id or f"{cfg['run_id']}-replay"
    if root is not None:
        cfg["out_root"] = root
    return cfg


def _error_record(exc, code, run_dir=None):
    rec = {"status": "error", "exit_code": code, "error": type(exc).__name__,
           "message": str(exc)}
    print(json.dumps(rec, sort_keys=True), file=sys.stderr)
    if run_dir is not None and Path(run_dir).is_dir():
        _write_json(Path(run_dir) / "error.json", rec)
    return code


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    return obj


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:  # --help
        return EXIT_OK if e.code == 0 else EXIT_CONFIG
    except ConfigError as e:
        parser.print_usage(sys.stderr)
        return _error_record(e, e.exit_code)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.replay:
            cfg = replay_config(args.replay, args.replay_id, args.replay_out_root)
        elif args.command is None:
            parser.print_usage(sys.stderr)
            raise ConfigError("no command given")
        else:
            cfg = config_from_args(args)
        run_dir, result = execute(cfg)
    except (ConfigError, MissingInput) as e:
        return _error_record(e, e.exit_code, getattr(e, "run_dir", None))
    except Exception as e:  # noqa: BLE001 - every other failure is a runtime error
        log.debug("runtime failure", exc_info=True)
        return _error_record(e, EXIT_RUNTIME, getattr(e, "run_dir", None))
    print(json.dumps({"status": "ok", "run_dir": str(run_dir), "result": _jsonable(result)},
                     sort_keys=True))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
