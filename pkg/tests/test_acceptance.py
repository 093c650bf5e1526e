"""Acceptance criteria, one test each, every one reporting a PASS/FAIL line.

Criteria 1-4 are exact properties of the objectives. Criteria 5-8 and 10 read
the shared five-seed experiments (``experiments`` session fixture). Criterion 9
replays CLI runs from their echoed configs.
"""

import json
import math
import time

import numpy as np
import pytest

from psftlab import cli
from psftlab import diagnostics as dg
from psftlab import objectives as obj
from psftlab.tasks import ALT, STEP

from conftest import (ACCEPTANCE, OBJECTIVES, gradcheck, loss_grad, objective_instance,
                      perturbed, random_batch, tiny_transformer)
from experiments import epoch_means
from test_objectives import grad_logp_oracle, hand_set

EPS = 0.28


def report(n, passed, detail):
    ACCEPTANCE[n] = (bool(passed), detail)
    print(f"criterion {n}: {'PASS' if passed else 'FAIL'}  {detail}")
    assert passed, detail


# -- exact properties -----------------------------------------------------------

def test_criterion_01_gradchecks():
    t0 = time.perf_counter()
    errors = []
    for kind in OBJECTIVES:
        for seed in range(16):
            arch = "transformer" if seed % 4 == 3 else "bigram"
            pol, fn = objective_instance(kind, seed, arch)
            errors.append(gradcheck(pol, fn, np.random.default_rng(seed), max_coords=4))
    dt = time.perf_counter() - t0
    worst = max(errors)
    report(1, len(errors) >= 100 and worst < 1e-4 and dt < 60,
           f"{len(errors)} instances, worst rel err {worst:.2e}, {dt:.1f}s")


def test_criterion_02_per_token_isolation():
    ratios = [0.4, 0.72, 0.9, 1.0, 1.2799, 1.2801, 1.5, 3.0]
    pol, snap, batch, a = hand_set(ratios)
    _, grads = loss_grad(pol, lambda p: obj.psft_loss(p, snap, batch, EPS))
    g = grads["table"]
    n = len(ratios)
    worst = 0.0
    zero_iff = True
    for i, r in enumerate(ratios):
        c = i + 1
        contrib = -n * g[c]  # token i alone owns table row c
        if r > 1 + EPS:
            zero_iff &= bool(np.all(contrib == 0.0))
        else:
            zero_iff &= bool(np.any(contrib != 0.0))
            worst = max(worst, np.max(np.abs(contrib - r * grad_logp_oracle(pol, c, a)[c])))
    report(2, zero_iff and worst <= 1e-12,
           f"zero exactly iff r > 1+eps: {zero_iff}, max |contribution - r grad log pi| {worst:.1e}")


def _max_abs_diff(a, b):
    return max(abs(a[0] - b[0]), max(np.max(np.abs(a[1][k] - b[1][k])) for k in a[1]))


def test_criterion_03_equivalences():
    rng = np.random.default_rng(3)
    checks = {}
    worst_lower = 0.0
    for seed in range(5):
        pol = tiny_transformer(seed=seed)
        batch = random_batch(rng, 7)
        snap = pol.snapshot()
        checks.setdefault("a", True)
        # values differ (-1 against the NLL); gradients must not
        ga = loss_grad(pol, lambda p: obj.psft_loss(p, snap, batch, EPS))[1]
        gb = loss_grad(pol, lambda p: obj.sft_loss(p, batch))[1]
        checks["a"] &= all(np.array_equal(ga[k], gb[k]) for k in ga)
        noisy = perturbed(pol, rng, 0.3)
        checks.setdefault("b", True)
        checks["b"] &= _max_abs_diff(
            loss_grad(pol, lambda p: obj.ppo_clip_loss(p, noisy, batch, 1.0, EPS, EPS)),
            loss_grad(pol, lambda p: obj.psft_loss(p, noisy, batch, EPS))) == 0.0
        ones = np.ones(batch.tokens.shape)
        checks.setdefault("c", True)
        checks["c"] &= _max_abs_diff(loss_grad(pol, lambda p: obj.pg_loss(p, batch, ones)),
                                     loss_grad(pol, lambda p: obj.sft_loss(p, batch))) == 0.0
        base = loss_grad(pol, lambda p: obj.psft_loss(p, noisy, batch, EPS))
        for lower in (-2.0, 0.0, 0.5, 0.9):
            worst_lower = max(worst_lower, _max_abs_diff(
                base, loss_grad(pol, lambda p: obj.psft_loss(p, noisy, batch, EPS, lower=lower))))
    checks["d"] = worst_lower <= 1e-15
    report(3, all(checks.values()),
           " ".join(f"({k}) {'ok' if v else 'broken'}" for k, v in sorted(checks.items()))
           + f", lower-bound drift {worst_lower:.1e}")


def test_criterion_04_clip_monotonicity():
    rng = np.random.default_rng(4)
    pol = tiny_transformer(seed=4)
    batch = random_batch(rng, 7, B=8, max_resp=6)
    snap = perturbed(pol, rng, 0.3)
    fracs = [obj.psft_loss(pol, snap, batch, e).clip_fraction for e in (0.1, 0.2, 0.28, 0.4)]
    at_inf = obj.psft_loss(pol, snap, batch, math.inf).clip_fraction
    mono = all(x >= y for x, y in zip(fracs, fracs[1:]))
    report(4, mono and at_inf == 0.0 and fracs[0] > 0,
           f"clip fractions {[round(f, 4) for f in fracs]}, at inf {at_inf}")


# -- desk-scale analogs -----------------------------------------------------------

def _final(result, key):
    return result.evals[-1][2][key]


@pytest.mark.slow
def test_criterion_05_entropy(experiments):
    runs = experiments.runs
    sft_h = np.mean([_final(r.finetune["sft"], "indomain_entropy") for r in runs])
    psft_h = np.mean([_final(r.finetune["psft"], "indomain_entropy") for r in runs])
    sft_mono, psft_band = [], []
    for r in runs:
        s = epoch_means(r.finetune["sft"])
        sft_mono.append(bool(np.all(np.diff(s) <= 0)))
        p = epoch_means(r.finetune["psft"])
        level = p[1]  # first epoch after the one-epoch warm-up
        psft_band.append(bool(np.all(np.abs(p[1:] - level) <= 0.5 * level)))
    secs = experiments.seconds["pretrain+finetune"]
    report(5, psft_h - sft_h >= 0.05 and all(sft_mono) and all(psft_band) and secs <= 900,
           f"final entropy PSFT {psft_h:.3f} vs SFT {sft_h:.3f} (margin {psft_h - sft_h:.3f}), "
           f"SFT nonincreasing {sum(sft_mono)}/5, PSFT within 50% {sum(psft_band)}/5, {secs:.0f}s")


def _matched_sft_eval(sft, target_nll):
    """SFT eval (after the first epoch) whose in-domain NLL is closest to ``target_nll``."""
    return min(sft.evals[1:], key=lambda e: abs(e[2]["indomain_nll"] - target_nll))[2]


@pytest.mark.slow
def test_criterion_06_generalization(experiments):
    wins, matched, lines = 0, 0, []
    for r in experiments.runs:
        sft, psft = r.finetune["sft"], r.finetune["psft"]
        start = sft.evals[0][2]["ood_nll"]
        p_end = psft.evals[-1][2]
        s_end = _matched_sft_eval(sft, p_end["indomain_nll"])
        gap = abs(s_end["indomain_nll"] - p_end["indomain_nll"]) / p_end["indomain_nll"]
        d_sft, d_psft = s_end["ood_nll"] - start, p_end["ood_nll"] - start
        ok_match = gap <= 0.05
        matched += ok_match
        wins += ok_match and d_sft > d_psft
        lines.append(f"{d_sft:.2f}/{d_psft:.2f}")
    secs = experiments.seconds["pretrain+finetune"]
    report(6, wins >= 4 and secs <= 900,
           f"OOD degradation SFT/PSFT per seed {lines}, SFT worse in {wins}/5 "
           f"(matched within 5% in {matched}/5)")


@pytest.mark.slow
def test_criterion_07_rl_headroom(experiments):
    runs = experiments.runs
    final = {m: [np.mean(r.rl[m].info["iteration_reward"][-10:]) for r in runs]
             for m in ("sft", "psft")}
    wins = sum(p >= s for p, s in zip(final["psft"], final["sft"]))
    ent = {m: np.mean([r.rl[m].info["iteration_entropy"] for r in runs], axis=0)
           for m in ("sft", "psft")}
    higher = ent["psft"] > ent["sft"]
    secs = experiments.seconds["rl"]
    report(7, wins >= 4 and bool(np.all(higher)) and secs <= 1200,
           f"final reward PSFT >= SFT in {wins}/5 "
           f"({np.mean(final['psft']):.3f} vs {np.mean(final['sft']):.3f}), "
           f"PSFT entropy higher in {int(higher.sum())}/{higher.size} iterations, {secs:.0f}s")


@pytest.mark.slow
def test_criterion_08_dpo(experiments):
    margins = [(_final(r.dpo["psft"], "heldout_margin"), _final(r.dpo["sft"], "heldout_margin"))
               for r in experiments.runs]
    wins = sum(p > s for p, s in margins)
    report(8, wins >= 4, f"held-out margin PSFT > SFT in {wins}/5: "
           + ", ".join(f"{p:.4f}/{s:.4f}" for p, s in margins))


def _run_files(d):
    return sorted(p.name for p in d.iterdir()
                  if p.suffix in (".jsonl", ".ckpt", ".csv", ".json")
                  and p.name not in ("timing.jsonl", "config.json"))


def test_criterion_09_determinism(tmp_path, capsys):
    conf = tmp_path / "small.json"
    conf.write_text(json.dumps({
        "policy": {"layers": 1, "heads": 2, "d_model": 16, "d_ff": 32, "max_seq_len": 16},
        "data": {"sizes": {"pretrain": 128, "expert_train": 64, "indomain_eval": 32,
                           "ood_eval": 32, "rl_prompts": 8, "dpo_train": 16, "dpo_eval": 8}},
        "train": {"epochs": 2, "train_batch": 32, "mini_batch": 8},
        "eval_sample_k": 2,
    }))
    common = ["--config", str(conf), "--out-root", str(tmp_path)]
    init = str(tmp_path / "base" / "final.ckpt")
    runs = {
        "base": ["pretrain", *common, "--run-id", "base", "--epochs", "1"],
        "sft": ["finetune", *common, "--run-id", "sft", "--init", init, "--method", "sft"],
        "psft": ["finetune", *common, "--run-id", "psft", "--init", init, "--method", "psft",
                 "--warmup-epochs", "1"],
        "sftkl": ["finetune", *common, "--run-id", "sftkl", "--init", init, "--method", "sft_kl"],
        "rl": ["rl", *common, "--run-id", "rl", "--init", init, "--iterations", "2",
               "--train-batch", "4", "--mini-batch", "2", "--rollout-n", "4"],
        "dpo": ["dpo", *common, "--run-id", "dpo", "--init", init, "--epochs", "1",
                "--train-batch", "8", "--mini-batch", "8"],
    }
    identical, compared = True, 0
    for name, argv in runs.items():
        assert cli.main(argv) == 0, name
        assert cli.main(["--replay", str(tmp_path / name)]) == 0, name
        orig, again = tmp_path / name, tmp_path / f"{name}-replay"
        files = _run_files(orig)
        identical &= files == _run_files(again)
        for f in files:
            compared += 1
            identical &= (orig / f).read_bytes() == (again / f).read_bytes()
    capsys.readouterr()
    report(9, identical and compared > 0,
           f"{len(runs)} runs replayed, {compared} log/checkpoint files byte-identical: {identical}")


@pytest.mark.slow
def test_criterion_10_clipped_tokens(experiments):
    hits, lines = 0, []
    for r in experiments.runs:
        reps = dg.clip_reports_by_epoch(r.clip_log)
        ok = False
        for t in (STEP, ALT):
            rates = [reps[e].rates.get(t, 0.0) for e in (1, 2, 3)]
            if t in reps[3].top_ids() and rates[0] <= rates[1] <= rates[2]:
                ok = True
        hits += ok
        lines.append("ALT " + "/".join(f"{reps[e].rates.get(ALT, 0.0):.3f}" for e in (1, 2, 3)))
    report(10, hits >= 3, f"step token top-5 at epoch 3 with nondecreasing rate in {hits}/5 "
           f"seeds; ALT clip rate by epoch {lines}")
