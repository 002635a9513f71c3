"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The end-to-end criteria share one run of the default three-seed experiment.
Expect roughly 10 minutes on one CPU core for the whole file.
"""

import math
import time

import numpy as np
import pytest

from blora import tensor as T
from blora.adapter import IsotropicPrior, kl_elementwise, sample_delta
from blora.checkpoint import load_checkpoint, load_model, save_checkpoint
from blora.config import RunConfig, from_pairs, parse_text
from blora.evaluation import EvalReport, make_report
from blora.experiment import beta_sweep, build_suite, run_experiment
from blora.gradcheck import numeric_gradient, relative_error
from blora.model import FrozenModel, attach_adapters
from blora.sparsity import adaptive_sparsity, hoyer, thresh_sparsity, top_energy
from blora.tensor import RandomStream, Tensor
from blora.training import blora_loss

from test_adapter import fixed_adapter, mc_kl
from test_cli_io import TINY_RUN
from test_model import TINY, perturb, toy_batch
from test_sparsity import ref_adaptive, ref_hoyer, ref_thresh, ref_top

PRIMITIVE_TOL = 1e-6
END_TO_END_TOL = 1e-4


def _op_error(build, arrays, rng):
    """Worst relative error of tape vs central differences for sum(R * build(*xs))."""
    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = build(*leaves)
    R = rng.normal(size=out.shape)
    grads = T.backward(T.sum_all(T.mul(out, Tensor(R))), leaves)
    worst = 0.0
    for i, a in enumerate(arrays):
        def f(x, i=i):
            xs = [Tensor(b) for b in arrays]
            xs[i] = Tensor(x)
            with T.no_grad():
                return float((build(*xs).data * R).sum())
        worst = max(worst, relative_error(grads[i], numeric_gradient(f, a.copy(), 1e-5)))
    return worst


def _primitive_cases(rng):
    n = rng.normal
    relu_in = n(size=(4, 5))
    relu_in[np.abs(relu_in) < 1e-3] = 0.5
    ids = np.array([[0, 2, 2], [4, 1, 0]])
    mask = np.tril(np.ones((4, 4), dtype=bool))
    prior = IsotropicPrior(0.0, 0.3)
    return {
        "add": (T.add, [n(size=(3, 4)), n(size=(3, 4))]),
        "add_broadcast": (T.add, [n(size=(2, 3, 4)), n(size=(4,))]),
        "sub": (T.sub, [n(size=(3, 4)), n(size=(3, 4))]),
        "mul": (T.mul, [n(size=(3, 4)), n(size=(3, 4))]),
        "scale": (lambda x: T.scale(x, -1.7), [n(size=(3, 4))]),
        "add_scalar": (lambda x: T.add_scalar(x, 0.3), [n(size=(5,))]),
        "matmul": (T.matmul, [n(size=(3, 4)), n(size=(4, 5))]),
        "matmul_batched": (T.matmul, [n(size=(3, 2, 4)), n(size=(3, 4, 5))]),
        "transpose": (lambda x: T.transpose(x, (1, 0, 2)), [n(size=(2, 3, 4))]),
        "reshape": (lambda x: T.reshape(x, (4, 3)), [n(size=(3, 4))]),
        "exp": (T.exp, [n(size=(3, 4))]),
        "square": (T.square, [n(size=(3, 4))]),
        "relu": (T.relu, [relu_in]),
        "softmax": (T.softmax_rows, [3 * n(size=(4, 6))]),
        "softmax_masked": (lambda x: T.softmax_rows(x, mask), [n(size=(2, 4, 4))]),
        "layer_norm": (T.layer_norm, [2 * n(size=(2, 3, 6)) + 1, n(size=(6,)), n(size=(6,))]),
        "embedding": (lambda t: T.embedding(t, ids), [n(size=(5, 3))]),
        "cross_entropy": (lambda x: T.cross_entropy(x, [2, 0, 0, 5], pad_id=0), [n(size=(4, 6))]),
        "sum": (T.sum_all, [n(size=(3, 4))]),
        "concat": (lambda a, b: T.concat([a, b], axis=1), [n(size=(2, 3)), n(size=(2, 2))]),
        "kl_elementwise": (lambda m, s: kl_elementwise(m, s, prior),
                           [n(size=(3, 4)), rng.uniform(-3, 0, size=(3, 4))]),
    }


def _end_to_end_error(rng):
    model = FrozenModel.initialize(TINY, RandomStream(1))
    ads = attach_adapters(model, 2, None, RandomStream(0))
    perturb(ads, rng)
    batch = toy_batch(TINY, rng)
    prior = IsotropicPrior(0.0, 0.5)
    leaves = [p for pid in sorted(ads) for p in ads[pid].parameters()]
    for p in leaves:
        p.requires_grad = True
    loss, _ = blora_loss(model, ads, batch, prior, 0.7, RandomStream(77))
    grads = T.backward(loss, leaves)

    def value(_):
        with T.no_grad():
            return blora_loss(model, ads, batch, prior, 0.7, RandomStream(77))[0].item()

    analytic, numeric = [], []
    for p, g in zip(leaves, grads):
        idx = rng.choice(p.size, size=min(5, p.size), replace=False)
        numeric.append(numeric_gradient(value, p.data, 1e-5, indices=idx).reshape(-1)[idx])
        analytic.append(g.reshape(-1)[idx])
    return sum(len(a) for a in analytic), relative_error(np.concatenate(analytic), np.concatenate(numeric))


def test_criterion_1_gradients(criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    errors = {name: _op_error(build, arrays, rng) for name, (build, arrays) in _primitive_cases(rng).items()}
    worst_name = max(errors, key=errors.get)
    n_checked, e2e = _end_to_end_error(np.random.default_rng(5))
    elapsed = time.perf_counter() - t0
    ok = (errors[worst_name] < PRIMITIVE_TOL and e2e < END_TO_END_TOL
          and n_checked >= 100 and elapsed < 60)
    criterion(1, "gradient correctness", ok,
              f"{len(errors)} primitives, worst {worst_name} {errors[worst_name]:.1e} (< 1e-6); "
              f"end-to-end {e2e:.1e} on {n_checked} params (< 1e-4); {elapsed:.1f}s")


def test_criterion_2_kl_oracle(criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst, n = 0.0, 0
    while n < 20:
        sigma_p = rng.uniform(0.005, 0.5)
        mu = rng.uniform(-2, 2) * sigma_p
        sigma = sigma_p * rng.uniform(0.5, 2.0)
        closed = kl_elementwise(Tensor([mu]), Tensor([math.log(sigma)]), IsotropicPrior(0, sigma_p)).item()
        # relative error is ill-posed near KL = 0, where MC noise dominates
        if closed < 0.2:
            continue
        worst = max(worst, abs(mc_kl(mu, sigma, sigma_p, seed=n) - closed) / closed)
        n += 1
    at_prior = [kl_elementwise(Tensor([0.0]), Tensor([math.log(s)]), IsotropicPrior(0, s)).item()
                for s in (0.01, 0.3, 2.0)]
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-2 and all(v == 0.0 for v in at_prior) and elapsed < 60
    criterion(2, "KL closed form vs Monte Carlo", ok,
              f"worst rel err {worst:.2e} over {n} triples at 1e6 draws; at prior {at_prior}; {elapsed:.1f}s")


def test_criterion_3_reparameterization_moments(criterion):
    n = 100_000
    cases = [  # (a_mu, a_sigma, b_mu, b_sigma)
        (0.0, 1.0, 1.0, math.exp(-50)),
        (0.7, 0.4, -1.3, 0.25),
        (-0.2, 0.9, 0.5, 0.6),
    ]
    details, ok = [], True
    for k, (am, asd, bm, bsd) in enumerate(cases):
        ad = fixed_adapter([[am]], [[bm]], a_ls=[[math.log(asd)]], b_ls=[[math.log(bsd)]])
        stream = RandomStream(100 + k)
        with T.no_grad():
            x = np.array([sample_delta(ad, stream).data[0, 0] for _ in range(n)])
        mean = am * bm
        # product of independent Gaussians
        var = (am**2 + asd**2) * (bm**2 + bsd**2) - mean**2
        m4 = ((x - x.mean()) ** 4).mean()
        se_mean = math.sqrt(var / n)
        se_var = math.sqrt((m4 - var**2) / n)
        z_mean = abs(x.mean() - mean) / se_mean
        z_var = abs(x.var() - var) / se_var
        ok &= z_mean < 3 and z_var < 3
        details.append(f"z(mean)={z_mean:.2f} z(var)={z_var:.2f}")
    criterion(3, "reparameterization moments", ok, "; ".join(details) + " (< 3 SE at 1e5 draws)")


def test_criterion_4_sparsity_oracles(criterion):
    rng = np.random.default_rng(11)
    exact = True
    for _ in range(50):
        w, b = rng.normal(size=(10, 10)) * 0.01, rng.normal(size=(10, 10)) * 0.01
        exact &= thresh_sparsity(w, 1e-3) == ref_thresh(w, 1e-3)
        exact &= adaptive_sparsity(w, b, 0.5) == ref_adaptive(w, b, 0.5)
        exact &= top_energy(w, 0.01) == pytest.approx(ref_top(w, 0.01), rel=1e-12, abs=0)
        exact &= hoyer(w) == pytest.approx(ref_hoyer(w), rel=1e-12, abs=1e-15)
    h = hoyer([3.0, 1.0, 1.0, 1.0])
    hoyer_ok = abs(h - (2 - math.sqrt(3))) < 1e-12
    worst_scale = 0.0
    for _ in range(100):
        w = rng.normal(size=int(rng.integers(2, 60)))
        c = 10 ** rng.uniform(-6, 6)
        worst_scale = max(worst_scale, abs(hoyer(c * w) - hoyer(w)))
    ok = exact and hoyer_ok and worst_scale < 1e-12
    criterion(4, "sparsity oracles", ok,
              f"brute-force match on 50 random 10x10 pairs: {exact}; "
              f"hoyer([3,1,1,1]) err {abs(h - (2 - math.sqrt(3))):.1e}; "
              f"worst scale drift {worst_scale:.1e} over 100 pairs")


def test_criterion_5_delta_arithmetic(criterion):
    base = make_report(0.30, {"avg": 11.06})
    adapted = make_report(0.10, {"avg": 33.78}, base=base)
    ok = abs(adapted.delta - 22.72) < 1e-9
    criterion(5, "backward delta accounting", ok, f"11.06 -> 33.78 gives delta {adapted.delta:+.2f}")


# -- end-to-end experiment -------------------------------------------------


@pytest.fixture(scope="module")
def experiment(tmp_path_factory):
    out = tmp_path_factory.mktemp("acceptance")
    run = RunConfig()
    t0 = time.perf_counter()
    summary = run_experiment(run, out)
    return run, summary, time.perf_counter() - t0, out


def _rel_reduction(new, old):
    return (old - new) / old


def test_criterion_6_forgetting(experiment, criterion):
    run, summary, elapsed, _ = experiment
    seeds = summary["seeds"]
    rep = {k: [EvalReport.from_dict(s["reports"][k]) for s in seeds] for k in ("base", "lora", "blora")}
    pre = max(max(s["pretrain_backward_ter"].values()) for s in seeds)
    base_cs = min(r.in_domain_ter for r in rep["base"])
    cut = {m: min(_rel_reduction(a.in_domain_ter, b.in_domain_ter) for a, b in zip(rep[m], rep["base"]))
           for m in ("lora", "blora")}
    smaller_every_seed = all(b.delta < l.delta for b, l in zip(rep["blora"], rep["lora"]))
    mean_l = np.mean([r.delta for r in rep["lora"]])
    mean_b = np.mean([r.delta for r in rep["blora"]])
    delta_cut = _rel_reduction(mean_b, mean_l) if mean_l > 0 else float("-inf")
    ind_l = np.mean([r.in_domain_ter for r in rep["lora"]])
    ind_b = np.mean([r.in_domain_ter for r in rep["blora"]])
    gap = abs(ind_b - ind_l) / ind_l
    checks = {
        "pretrain": pre < 0.05,
        "base_cs": base_cs > 0.20,
        "a": min(cut.values()) >= 0.30,
        "b": smaller_every_seed and delta_cut >= 0.40,
        "c": gap <= 0.25,
        "runtime": elapsed < 20 * 60,
    }
    failed = [k for k, v in checks.items() if not v]
    criterion(6, "end-to-end forgetting experiment", not failed,
              f"worst pretrain backward TER {100 * pre:.2f}% (< 5); min base cs TER {100 * base_cs:.2f}% (> 20); "
              f"(a) min in-domain cut lora {100 * cut['lora']:.1f}% blora {100 * cut['blora']:.1f}% (>= 30); "
              f"(b) blora delta smaller every seed {smaller_every_seed}, mean delta "
              f"{100 * mean_l:.2f} -> {100 * mean_b:.2f} = {100 * delta_cut:.1f}% cut (>= 40); "
              f"(c) in-domain lora {100 * ind_l:.2f}% blora {100 * ind_b:.2f}% gap {100 * gap:.0f}% (<= 25); "
              f"runtime {elapsed:.0f}s (< 1200); failed: {failed or 'none'}")


def test_criterion_7_sparsity_direction(experiment, criterion):
    _, summary, _, _ = experiment
    keys = ("thresh", "adaptive", "top_energy", "hoyer")
    avg = {m: {k: np.mean([s["sparsity"][m]["average"][k] for s in summary["seeds"]]) for k in keys}
           for m in ("lora", "blora")}
    exceeds = {k: avg["blora"][k] > avg["lora"][k] for k in keys}
    ratio = avg["blora"]["thresh"] / avg["lora"]["thresh"] if avg["lora"]["thresh"] > 0 else float("inf")
    ok = all(exceeds.values()) and ratio >= 5
    criterion(7, "sparsity direction", ok,
              ", ".join(f"{k} lora {avg['lora'][k]:.4f} blora {avg['blora'][k]:.4f}" for k in keys)
              + f"; thresh ratio {ratio:.1f}x (>= 5)")


def test_criterion_8_beta_shrinkage(experiment, criterion):
    run, _, _, out = experiment
    seed = run.seeds[0]
    model, _ = load_model(out / f"seed{seed}" / "base.blra")
    norms = beta_sweep(model, build_suite(run, seed), run, seed, betas=(0.0, 0.5, 5.0, 50.0))
    betas = sorted(norms)
    monotone = all(norms[b] <= 1.05 * norms[a] for a, b in zip(betas, betas[1:]))
    ratio = norms[50.0] / norms[0.0]
    ok = monotone and ratio < 0.1
    criterion(8, "beta shrinkage", ok,
              ", ".join(f"beta={b:g}: {norms[b]:.4f}" for b in betas)
              + f"; non-increasing within 5%: {monotone}; beta=50 / beta=0 = {ratio:.3f} (< 0.1)")


def test_criterion_9_determinism(tmp_path, criterion):
    run = from_pairs(parse_text(TINY_RUN))
    for name in ("a", "b"):
        run_experiment(run, tmp_path / name)
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*")
                   if p.is_file() and p.name != "summary.md")
    same = all((tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes() for f in files)
    n_ckpt = sum(f.suffix == ".blra" for f in files)

    rng = np.random.default_rng(9)
    tensors = {f"t{i}": rng.normal(size=rng.integers(1, 6, size=int(rng.integers(0, 4))))
               for i in range(20)}
    save_checkpoint(tmp_path / "rt.blra", tensors, {"seed": 1})
    back, _ = load_checkpoint(tmp_path / "rt.blra")
    exact = all(np.array_equal(back[k], v.astype(np.float32)) and back[k].dtype == np.float32
                for k, v in tensors.items())
    ok = same and n_ckpt >= 3 and exact
    criterion(9, "determinism and persistence", ok,
              f"{len(files)} files ({n_ckpt} checkpoints) bit-identical across two runs: {same}; "
              f"f32 round trip exact on 20 tensors: {exact}")
