import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from psftlab import autodiff as ad
from psftlab.policy import Policy, PolicyConfig, TokenBatch

settings.register_profile(
    "default", max_examples=60, deadline=None,
    suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

H = 1e-5
RTOL = 1e-4


def bigram(V=5, seed=0, scale=1.0):
    return Policy(PolicyConfig(arch="bigram", vocab_size=V, init_scale=scale, seed=seed))


def tiny_transformer(V=7, seed=0, scale=0.5):
    return Policy(PolicyConfig(vocab_size=V, layers=1, heads=2, d_model=8, d_ff=16,
                               max_seq_len=10, init_scale=scale, seed=seed))


def random_batch(rng, V, B=3, max_prompt=3, max_resp=4):
    prompts = [rng.integers(1, V, size=rng.integers(1, max_prompt + 1)).tolist()
               for _ in range(B)]
    resps = [rng.integers(1, V, size=rng.integers(1, max_resp + 1)).tolist()
             for _ in range(B)]
    return TokenBatch.from_pairs(prompts, resps)


def perturbed(policy, rng, noise):
    """Frozen copy of ``policy`` with Gaussian noise added to every parameter."""
    state = {k: v + noise * rng.standard_normal(v.shape) for k, v in policy.state_dict().items()}
    return Policy(policy.config, state).snapshot()


def loss_grad(policy, fn):
    """(loss value, {name: gradient}) of ``fn(policy)`` (a LossOutput)."""
    graph = ad.Graph()
    policy.zero_grad()
    with graph:
        out = fn(policy)
    ad.backward(graph, out.loss)
    grads = {k: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
             for k, t in policy.params.items()}
    policy.zero_grad()
    return out.value, grads


def gradcheck(policy, fn, rng=None, max_coords=None, h=H):
    """Largest relative error between analytic and central-difference gradients.

    The error is ``max|a - n| / max(max|a|, max|n|, 1e-8)`` over the checked
    coordinates; all coordinates unless ``max_coords`` caps them per tensor.
    """
    _, grads = loss_grad(policy, fn)
    worst_num = worst_ana = worst_diff = 0.0
    for name, t in policy.params.items():
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            idx = rng.choice(flat.size, size=max_coords, replace=False)
        g = grads[name].reshape(-1)
        for i in idx:
            old = flat[i]
            flat[i] = old + h
            with ad.no_grad():
                up = fn(policy).value
            flat[i] = old - h
            with ad.no_grad():
                down = fn(policy).value
            flat[i] = old
            num = (up - down) / (2 * h)
            worst_diff = max(worst_diff, abs(num - g[i]))
            worst_num = max(worst_num, abs(num))
            worst_ana = max(worst_ana, abs(g[i]))
    return worst_diff / max(worst_num, worst_ana, 1e-8)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


OBJECTIVES = ("sft", "pg", "ppo_clip", "psft", "sft_kl_forward", "sft_kl_reverse", "dpo")


def _far_from(values, bounds, margin=1e-3):
    return all(np.min(np.abs(values - b)) > margin for b in bounds)


def objective_instance(kind, seed, arch="bigram"):
    """(policy, fn) for a random small instance of one objective.

    Snapshots are noisy copies of the policy so ratios spread on both sides
    of the clip bounds; instances with a ratio within 1e-3 of a bound are
    redrawn, since finite differences straddling a kink are meaningless.
    """
    from psftlab import objectives as obj

    for attempt in range(50):
        rng = np.random.default_rng([seed, attempt])
        V = int(rng.integers(4, 8))
        if arch == "bigram":
            pol = bigram(V=V, seed=int(rng.integers(1 << 30)), scale=float(rng.uniform(0.3, 1.5)))
        else:
            pol = tiny_transformer(V=V, seed=int(rng.integers(1 << 30)))
        batch = random_batch(rng, V)
        snap = perturbed(pol, rng, 0.4 if arch == "bigram" else 0.2)
        if kind == "sft":
            return pol, lambda p: obj.sft_loss(p, batch)
        if kind == "pg":
            adv = rng.normal(size=batch.tokens.shape)
            return pol, lambda p: obj.pg_loss(p, batch, adv)
        if kind.startswith("sft_kl"):
            direction = kind.rsplit("_", 1)[1]
            return pol, lambda p: obj.sft_kl_loss(p, snap, batch, 0.5, direction)
        if kind == "dpo":
            rejected = TokenBatch.from_pairs(
                batch.prompts(), [rng.integers(1, V, size=rng.integers(1, 5)).tolist()
                                  for _ in range(len(batch))])
            beta = float(rng.uniform(0.01, 1.0))
            return pol, lambda p: obj.dpo_loss(p, snap, batch, rejected, beta)
        with ad.no_grad():
            r = obj.importance_ratios(pol, snap, batch)[0].data[batch.response_mask]
        if kind == "psft":
            if _far_from(r, (0.72, 1.28)):
                return pol, lambda p: obj.psft_loss(p, snap, batch, 0.28)
        elif kind == "ppo_clip":
            if _far_from(r, (0.8, 1.28)):
                adv = rng.choice([-1.0, 1.0], size=len(batch)) * rng.uniform(0.2, 2, size=len(batch))
                return pol, lambda p: obj.ppo_clip_loss(p, snap, batch, adv, 0.2, 0.28)
        else:
            raise ValueError(kind)
    raise RuntimeError("no kink-free instance found")


# -- shared desk-scale experiments and the acceptance report --------------------

ACCEPTANCE = {}  # criterion number -> (passed, detail)


@pytest.fixture(scope="session")
def experiments():
    from experiments import run_all

    return run_all(log=lambda msg: None)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
