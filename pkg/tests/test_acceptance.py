"""Acceptance suite: one or more tests per criterion, each reporting a PASS/FAIL line.

The strategy comparison (criteria 5 to 8) trains every strategy on the default
suite for three seeds and takes roughly a quarter of an hour on one core.
Run ``pytest -s tests/test_acceptance.py`` to watch the verdicts as they come.
"""

import time

import numpy as np
import pytest

from clwf.bench import ALL_STRATEGIES, BenchConfig, run_bench
from clwf.checkpoint import load_checkpoint, save_checkpoint
from clwf.ewc import EwcState, FisherDiagonal, estimate_fisher, ewc_penalty, important_fraction
from clwf.factorized import FactorizedLinear, param_overhead
from clwf.gradcheck import grad_check
from clwf.model import ModelConfig, ToyEncoderClassifier
from clwf.tasks import GenConfig, generate_suite, load_task, save_task
from clwf.tensor import Tensor
from clwf.trainer import Strategy, TrainPlan, continual_step, run_steps, start_continual, train_initial, with_plan
from oracles import dense_reference

SEEDS = (0, 1, 2)

# Small end-to-end configuration for the structural criteria.
SMALL_GEN = GenConfig(d_in=8, n_train=64, n_dev=32, n_test=32)
SMALL_MODEL = ModelConfig(d_in=8, d_model=12, n_blocks=1, n_classes=10, k=2)
SMALL_PLAN = TrainPlan(
    steps_initial=40, steps_per_iteration=30, batch_size=8, warmup_steps=10, checkpoint_every=10,
    average_last_n=3, fisher_max_samples=16, ewc_lambda0=10.0, ewc_decay_interval=20, seed=13,
)


@pytest.fixture(scope="module")
def small_suite():
    return generate_suite(4, [2, 1, 1, 1], 21, SMALL_GEN)


@pytest.fixture(scope="module")
def small_initial(small_suite):
    return train_initial(small_suite, SMALL_PLAN, SMALL_MODEL)


@pytest.fixture(scope="module")
def bench(tmp_path_factory):
    out = tmp_path_factory.mktemp("bench")
    t0 = time.perf_counter()
    results, summary = run_bench(BenchConfig(seeds=SEEDS), out)
    return results, summary, time.perf_counter() - t0, out


# ----------------------------------------------------------------- 1. gradients


def test_c01_gradient_correctness(verdict):
    t0 = time.perf_counter()
    result = grad_check(seed=0, instances=100, d_model=16, n_blocks=2, k=2, eps=1e-5)
    seconds = time.perf_counter() - t0
    roles = {"W_S", "r_m", "v_m", "r_b", "v_b"}
    covered = roles <= {c.split("/", 1)[1] for c in result.by_check if c.startswith("layer/")}
    covered = covered and {"model", "ewc"} <= set(result.by_check)
    ok = result.max_rel_error <= 1e-4 and seconds < 60 and covered
    verdict(1, ok, f"max rel err {result.max_rel_error:.2e} over {result.coordinates} coords in {seconds:.1f}s")
    assert covered
    assert result.max_rel_error <= 1e-4
    assert seconds < 60


# ----------------------------------------------------------------- 2. dense equivalence


def test_c02_dense_equivalence(verdict):
    rng = np.random.default_rng(2)
    layer = FactorizedLinear(7, 9, 3, name="fl", rng=rng)
    layer.shared_bias.data = rng.normal(size=9)
    for task in ("a", "b", "c"):
        layer.add_task(task, 0.5, rng)
    layer_err = 0.0
    for task in ("a", "b", "c", None):
        dense = layer.dense_weight(task)
        for _ in range(100):
            x = rng.normal(size=(1, 7))
            got = layer.forward(Tensor(x), task).data
            layer_err = max(layer_err, float(np.max(np.abs(got - (x @ dense.T + layer.shared_bias.data)))))

    model_err = 0.0
    for attention in (False, True):
        cfg = ModelConfig(d_in=6, d_model=16, n_blocks=2, n_classes=5, k=2, use_attention=attention)
        model = ToyEncoderClassifier(cfg, seed=4)
        for task in ("a", "b"):
            model.add_language(task, 0.3, rng)
        model.add_language("plain", factorized=False)
        x = rng.normal(size=(100, 4, 6))
        for task in ("a", "b", "plain"):
            model_err = max(model_err, float(np.max(np.abs(model.logits(x, task) - dense_reference(model, x, task)))))
    ok = layer_err <= 1e-10 and model_err <= 1e-9
    verdict(2, ok, f"layer max abs diff {layer_err:.1e} (<=1e-10), model {model_err:.1e} (<=1e-9)")
    assert layer_err <= 1e-10
    assert model_err <= 1e-9


# ----------------------------------------------------------------- 3. Fisher oracle


def test_c03_fisher_oracle(verdict):
    cfg = ModelConfig(d_in=5, d_model=8, n_blocks=1, n_classes=4, k=2)
    model = ToyEncoderClassifier(cfg, seed=0)
    model.add_language("a", 0.1, np.random.default_rng(0))
    rng = np.random.default_rng(1)
    samples = [(rng.normal(size=(3, 5)), int(rng.integers(4))) for _ in range(50)]
    shared = list(model.shared_parameters())
    model.set_trainable(set(shared))

    def grad_fn(sample):
        return model.loss_and_grads(sample[0][None], np.array([sample[1]]), "a")[1]

    per_sample = [grad_fn(s) for s in samples]
    order = np.random.default_rng(5).permutation(len(samples))
    brute_err = perm_err = 0.0
    for estimator in ("variance", "mean_square"):
        fisher = estimate_fisher(grad_fn, samples, shared, estimator)
        shuffled = estimate_fisher(grad_fn, [samples[i] for i in order], shared, estimator)
        for name in shared:
            g = np.stack([p[name] for p in per_sample])
            expected = g.var(axis=0) if estimator == "variance" else (g**2).mean(axis=0)
            brute_err = max(brute_err, float(np.max(np.abs(fisher.values[name] - expected))))
            perm_err = max(perm_err, float(np.max(np.abs(fisher.values[name] - shuffled.values[name]))))
    ok = brute_err <= 1e-10 and perm_err <= 1e-12
    verdict(3, ok, f"brute-force diff {brute_err:.1e} (<=1e-10), permutation diff {perm_err:.1e} (<=1e-12)")
    assert brute_err <= 1e-10
    assert perm_err <= 1e-12


# ----------------------------------------------------------------- 4. frozen isolation


def test_c04_frozen_has_zero_forgetting(verdict, small_suite, small_initial):
    state = small_initial
    checked = 0
    ok = True
    for group in small_suite.groups()[1:]:
        shared = {n: t.data.tobytes() for n, t in state.model.shared_parameters().items()}
        preds = {
            (task, split): state.model.predict(small_suite.dataset(task, split).x, task).tobytes()
            for task in state.model.tasks for split in ("dev", "test")
        }
        new = continual_step(state, small_suite, group, Strategy.WF_FROZEN)
        ok &= all(new.model.named_parameters()[n].data.tobytes() == b for n, b in shared.items())
        for task in state.model.tasks:
            for split in ("dev", "test"):
                ok &= new.model.predict(small_suite.dataset(task, split).x, task).tobytes() == preds[task, split]
                checked += 1
        state = new
    verdict(4, ok, f"shared weights and {checked} old-task prediction sets bitwise unchanged over 3 iterations")
    assert ok


# ----------------------------------------------------------------- 5-8. strategy comparison


def test_c05_degradation_ordering(verdict, bench):
    _, summary, seconds, _ = bench
    deg = summary["mean_old_group_degradation"]
    v, e, w, f = deg["vanilla"], deg["ewc"], deg["wf_ewc"], deg["wf_frozen"]
    ordering = v >= e >= w >= 0.0 and f == 0.0
    collapse = v >= 2 * w
    ok = ordering and collapse and seconds < 30 * 60
    detail = ", ".join(f"{s} {100 * deg[s]:.1f}%" for s in ALL_STRATEGIES)
    verdict(5, ok, f"mean degradation over seeds {list(SEEDS)}: {detail}; bench {seconds / 60:.1f} min")
    assert ordering
    assert collapse
    assert seconds < 30 * 60


def test_c06_forward_transfer(verdict, bench):
    _, summary, _, _ = bench
    per_seed = [(r["seed"], r["new_error"]["wf_ewc"], r["joint_new_error"]) for r in summary["per_seed"]]
    mean_ewc = summary["mean_new_group_error"]["wf_ewc"]
    mean_joint = summary["mean_joint_new_error"]
    ok = mean_ewc <= 1.25 * mean_joint
    rows = ", ".join(f"seed {s}: {a:.3f} vs {j:.3f}" for s, a, j in per_seed)
    verdict(6, ok, f"wf_ewc new-group error {mean_ewc:.3f} vs joint {mean_joint:.3f} (bound {1.25 * mean_joint:.3f}); {rows}")
    assert ok


def test_c07_importance_direction(verdict, bench):
    results, _, _, _ = bench
    rising = [r.importance["wf_ewc"] for r in results]
    ok = all(fr[1] > fr[0] for fr in rising)
    # raw fractions recorded by the comparison must never fall either
    raw_ok = True
    for r in results:
        for s in ALL_STRATEGIES:
            raw = [i["fraction"] for i in sorted(r.report.importance, key=lambda i: i["iteration"])
                   if i["strategy"] == s and not i["normalize"]]
            raw_ok &= all(b >= a for a, b in zip(raw, raw[1:]))
    text = ", ".join(f"{fr[0]:.3f}->{fr[1]:.3f}" for fr in rising)
    verdict(7, ok and raw_ok, f"normalized fraction at tau 0.25 per seed: {text}")
    assert ok
    assert raw_ok


def test_c07_raw_fraction_nondecreasing(verdict, small_suite, small_initial):
    ok = True
    for strategy in (Strategy.WF_EWC, Strategy.EWC, Strategy.VANILLA):
        state = small_initial
        history = [important_fraction(state.ewc.fisher_sum, 0.25, normalize=False)]
        for group in small_suite.groups()[1:]:
            state = continual_step(state, small_suite, group, strategy)
            history.append(important_fraction(state.ewc.fisher_sum, 0.25, normalize=False))
        ok &= all(b >= a for a, b in zip(history, history[1:]))
    verdict(7, ok, "unnormalized fraction nondecreasing over 4 iterations for three strategies")
    assert ok


def test_c08_parameter_accounting(verdict, bench):
    results, _, _, _ = bench
    model = ToyEncoderClassifier(ModelConfig(), seed=0)
    model.add_language("a")
    before = model.num_parameters()
    model.add_language("b")
    expected = sum(2 * layer.k * (layer.d_in + layer.d_out) for layer in model.factorized_layers())
    grown = model.num_parameters() - before
    per_matrix = param_overhead(8, 1024, 1024).fraction_of_dense
    params = results[0].report.meta["parameters"]
    documented = params["reference_whole_model_overhead"] == 0.007 and "1%" in params["note"]
    ok = grown == expected and per_matrix == 0.03125 and documented
    verdict(8, ok, f"add_language grew by {grown} (expected {expected}); k=8 D=1024 overhead {100 * per_matrix:.3f}%; "
                   f"desk per-language overhead {100 * params['overhead_per_language']:.1f}% recorded next to the 0.7% context")
    assert grown == expected
    assert per_matrix == 0.03125
    assert documented


# ----------------------------------------------------------------- 9. determinism and persistence


def test_c09_determinism_and_persistence(verdict, tmp_path, small_suite, small_initial):
    first = save_checkpoint(small_initial, tmp_path / "a")
    second = save_checkpoint(train_initial(small_suite, SMALL_PLAN, SMALL_MODEL), tmp_path / "b")
    same_hash = first == second

    straight = start_continual(small_initial, small_suite.groups()[1], Strategy.WF_EWC)
    run_steps(straight, small_suite, 11)
    save_checkpoint(straight, tmp_path / "mid")
    resumed = load_checkpoint(tmp_path / "mid")
    run_steps(straight, small_suite, 1)
    run_steps(resumed, small_suite, 1)
    resume_err = max(
        float(np.max(np.abs(resumed.model.named_parameters()[n].data - t.data)))
        for n, t in straight.model.named_parameters().items()
    )

    ds = small_suite.dataset("lang01", "train")
    save_task(ds, tmp_path / "d.clwf")
    save_task(load_task(tmp_path / "d.clwf"), tmp_path / "e.clwf")
    round_trip = (tmp_path / "d.clwf").read_bytes() == (tmp_path / "e.clwf").read_bytes()

    ok = same_hash and resume_err <= 1e-6 and round_trip
    verdict(9, ok, f"hashes equal {same_hash}, resume diff {resume_err:.1e} (<=1e-6), dataset bytes equal {round_trip}")
    assert same_hash
    assert resume_err <= 1e-6
    assert round_trip


# ----------------------------------------------------------------- 10. EWC identities


def test_c10_ewc_identities(verdict, small_suite, small_initial):
    ewc = small_initial.ewc
    at_anchor = {n: t.data.copy() for n, t in small_initial.model.shared_parameters().items()}
    state = EwcState(FisherDiagonal(ewc.fisher_sum.values, 1, ewc.fisher_sum.estimator), ewc.anchor, ewc.schedule, 1)
    penalty = ewc_penalty(at_anchor, state, 123.0)
    zero_at_anchor = penalty.loss == 0.0 and all(not np.any(g) for g in penalty.grads.values())

    zero = with_plan(small_initial, ewc_lambda0=0.0)
    a = start_continual(zero, small_suite.groups()[1], Strategy.WF_EWC)
    b = start_continual(zero, small_suite.groups()[1], Strategy.WF_FINETUNE)
    identical = True
    for _ in range(SMALL_PLAN.steps_per_iteration):
        run_steps(a, small_suite, 1)
        run_steps(b, small_suite, 1)
        identical &= all(
            b.model.named_parameters()[n].data.tobytes() == t.data.tobytes() for n, t in a.model.named_parameters().items()
        )
    ok = zero_at_anchor and identical
    verdict(10, ok, f"penalty and gradient exactly zero at anchor {zero_at_anchor}; "
                    f"lambda=0 matches finetune for {SMALL_PLAN.steps_per_iteration} steps {identical}")
    assert zero_at_anchor
    assert identical
