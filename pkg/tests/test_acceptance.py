"""Acceptance criteria, each at its stated tolerance.

Every test records one PASS/FAIL line; conftest prints them in the terminal
summary. The training criteria share one session fixture that trains the toy
architecture on the default benchmark: VPE with augmentation, the plain VAE
baseline and VPE without augmentation, three seeds each (about half an hour
on one core). Training uses the default schedule: lr 1e-4, batch 128.
"""

import time

import numpy as np
import pytest

from vpe.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from vpe.cli import classify_export, write_embeddings
from vpe.data.benchmark import generate_benchmark
from vpe.data.loader import load_dataset
from vpe.model import VPE, VpeConfig, kl_divergence, loss_gradient_check
from vpe.nn import (BatchNorm2d, Conv2d, LeakyReLU, Linear, Reshape, Sigmoid, UpConv2d, Upsample2x,
                    gradient_check, init_params)
from vpe.oneshot import SupportSet, brute_force_nn_oracle, classify, evaluate, score
from vpe.retrieval import evaluate_retrieval, pr_auc
from vpe.train import TrainConfig, smoothed, train

SEEDS = (0, 1, 2)
ITERATIONS = 2000
RESULTS: list[str] = []


def record(criterion: int, ok: bool, detail: str) -> None:
    line = f"criterion {criterion}: {'PASS' if ok else 'FAIL'}  {detail}"
    RESULTS.append(line)
    print(line)
    assert ok, line


def unseen_accuracy(model, dataset) -> float:
    return evaluate(model, dataset, "unseen").accuracy


def untrained_encoder(seed=0):
    """Randomly initialised weights, batch norm at its initial statistics (mean 0, variance 1).

    No data touches the model. Batch norm refuses eval mode until statistics
    exist, so the initial ones are accepted explicitly.
    """
    model = VPE(VpeConfig.toy(), seed=seed)
    for bn in model.batchnorms():
        bn.tracked = True
    return model


@pytest.fixture(scope="session")
def bench(tmp_path_factory):
    root = tmp_path_factory.mktemp("default_bench")
    generate_benchmark(root)
    return load_dataset(root, 16)


@pytest.fixture(scope="session")
def runs(bench):
    """{(variant, seed): (state, seconds)} for the three variants and three seeds."""
    variants = {"vpe_aug": ("prototype", True), "vae": ("self", True), "vpe_noaug": ("prototype", False)}
    out = {}
    for name, (mode, aug) in variants.items():
        for seed in SEEDS:
            t0 = time.perf_counter()
            state = train(bench, VpeConfig.toy(target_mode=mode),
                          TrainConfig(iterations=ITERATIONS, seed=seed, augment=aug, log_every=0))
            out[name, seed] = state, time.perf_counter() - t0
    return out


class TestOracles:
    def test_1_gradient_correctness(self):
        t0 = time.perf_counter()
        rng = np.random.default_rng(0)

        def seeded(layer):
            layer.astype(np.float64)
            init_params([layer], 0)
            for p in layer.params():   # move off the trivial init (zero bias, unit gamma)
                p.value[...] += 0.1 * rng.standard_normal(p.value.shape)
            return layer

        cases = {
            "conv": (seeded(Conv2d("c", 3, 4, 3, 2, 1)), (2, 3, 8, 8)),
            "conv7": (seeded(Conv2d("c7", 3, 4, 7, 2, 3)), (2, 3, 9, 9)),
            "upconv": (seeded(UpConv2d("u", 3, 2)), (2, 3, 4, 4)),
            "linear": (seeded(Linear("fc", 12, 5)), (4, 12)),
            "batchnorm": (seeded(BatchNorm2d("bn", 3)), (4, 3, 3, 3)),
            "leaky_relu": (LeakyReLU(0.2), (2, 3, 4, 4)),
            "upsample": (Upsample2x(), (2, 3, 3, 3)),
            "sigmoid": (Sigmoid(), (2, 3, 4, 4)),
            "reshape": (Reshape((12,)), (2, 3, 2, 2)),
        }
        errors = {name: gradient_check(layer, shape, max_coords=60).max_error
                  for name, (layer, shape) in cases.items()}
        errors["vpe_loss"] = loss_gradient_check(VpeConfig.toy(), seed=0, batch=2,
                                                 max_coords=20).max_error
        worst = max(errors, key=errors.get)
        elapsed = time.perf_counter() - t0
        record(1, errors[worst] < 1e-4 and elapsed < 300,
               f"max relative error {errors[worst]:.2e} ({worst}) over {len(errors)} checks, "
               f"{elapsed:.0f}s")

    def test_2_kl_oracle(self):
        exact_ok = (kl_divergence(np.zeros((1, 300)), np.zeros((1, 300)))[0] == 0.0
                    and kl_divergence(np.ones((1, 300)), np.zeros((1, 300)))[0] == 150.0)
        rng = np.random.default_rng(0)
        worst = 0.0
        for _ in range(20):
            d = 8
            mu, lv = rng.normal(0, 1, d), rng.uniform(-2, 1, d)
            sigma = np.exp(0.5 * lv)
            total = 0.0
            for _chunk in range(10):   # 1e6 samples in chunks
                z = mu + sigma * rng.standard_normal((100_000, d))
                log_q = -0.5 * (((z - mu) / sigma) ** 2 + lv).sum(axis=1)
                log_p = -0.5 * (z ** 2).sum(axis=1)
                total += (log_q - log_p).sum()
            mc = total / 1_000_000
            closed = kl_divergence(mu[None], lv[None])[0]
            worst = max(worst, abs(closed - mc) / closed)
        record(2, exact_ok and worst < 0.01,
               f"exact values {'ok' if exact_ok else 'WRONG'}, worst Monte-Carlo rel. diff {worst:.2e}")

    def test_3_metric_oracles(self):
        rng = np.random.default_rng(0)
        support = SupportSet.from_pairs(range(50), rng.standard_normal((50, 64)))
        q = rng.standard_normal((1000, 64))
        agree = classify(q, support).tolist() == brute_force_nn_oracle(q, support)

        worst = 0.0
        for _ in range(100):
            rel = rng.random(50) < rng.uniform(0.05, 0.6)
            rel[rng.integers(50)] = True
            total, area, prev = rel.sum(), 0.0, 0.0
            for k in range(1, 51):
                hits = rel[:k].sum()
                area += (hits / total - prev) * hits / k
                prev = hits / total
            worst = max(worst, abs(pr_auc(rel) - area))
        perfect = pr_auc(np.array([True] * 5 + [False] * 45))
        record(3, agree and worst <= 1e-9 and perfect == 1.0,
               f"classify==oracle {agree}, PR-AUC max diff {worst:.1e}, perfect={perfect!r}")


@pytest.mark.slow
class TestTraining:
    def test_4_training_sanity(self, runs):
        ratios, finite, slowest = [], True, 0.0
        for (name, seed), (state, secs) in runs.items():
            tr = np.array(state.trace)
            finite &= bool(np.isfinite(tr[:, 1:]).all())
            slowest = max(slowest, secs)
            if name == "vpe_aug":
                first, last = smoothed(state.trace)
                ratios.append(last / first)
        record(4, finite and max(ratios) <= 0.5 and slowest < 1800,
               f"smoothed loss ratio {', '.join(f'{r:.3f}' for r in ratios)} (<= 0.5), "
               f"finite={finite}, slowest run {slowest:.0f}s")

    def test_5_oneshot_effectiveness(self, runs, bench):
        rows, passes = [], 0
        for seed in SEEDS:
            vpe = unseen_accuracy(runs["vpe_aug", seed][0].model, bench)
            vae = unseen_accuracy(runs["vae", seed][0].model, bench)
            ok = vpe >= 0.30 and vpe - vae >= 0.10
            passes += ok
            rows.append(f"seed {seed}: {vpe:.3f} vs VAE {vae:.3f}")
        record(5, passes >= 2, f"{passes}/3 seeds pass ({'; '.join(rows)})")

    def test_6_augmentation_effect(self, runs, bench):
        aug = [unseen_accuracy(runs["vpe_aug", s][0].model, bench) for s in SEEDS]
        plain = [unseen_accuracy(runs["vpe_noaug", s][0].model, bench) for s in SEEDS]
        passes = sum(a >= b for a, b in zip(aug, plain))
        record(6, passes >= 2,
               f"{passes}/3 seeds aug >= no-aug (aug {np.round(aug, 3).tolist()}, "
               f"no-aug {np.round(plain, 3).tolist()}; means {np.mean(aug):.3f} vs {np.mean(plain):.3f})")

    def test_7_retrieval(self, runs, bench):
        trained = runs["vpe_aug", 0][0].model
        fresh = untrained_encoder(seed=0)
        rep = evaluate_retrieval(trained, bench, "unseen", top_k=20)
        base = evaluate_retrieval(fresh, bench, "unseen", top_k=20)
        labels = sorted(rep.averages)
        protos = bench.prototypes(labels).reshape(len(labels), -1).astype(np.float64)
        own = 0
        for i, label in enumerate(labels):
            d = ((protos - rep.averages[label].reshape(-1)) ** 2).sum(axis=1)
            own += int(np.argmin(d) == i)
        frac = own / len(labels)
        gain = rep.mean_auc - base.mean_auc
        record(7, gain >= 0.2 and frac >= 0.8,
               f"PR-AUC {rep.mean_auc:.3f} vs untrained {base.mean_auc:.3f} (gain {gain:.3f}); "
               f"top-20 average nearest own prototype for {own}/{len(labels)} classes")

    def test_8_persistence(self, runs, bench, tmp_path):
        state = runs["vpe_aug", 0][0]
        path = tmp_path / "m.vpec"
        save_checkpoint(path, Checkpoint(state.model, state.adam, state.iteration, 0, state.rng_state))
        ck = load_checkpoint(path)
        a, b = state.model.state_dict(), ck.model.state_dict()
        params_ok = a.keys() == b.keys() and all(
            np.array_equal(a[k].astype(np.float32), b[k]) for k in a)
        again = tmp_path / "again.vpec"
        save_checkpoint(again, ck)
        bytes_ok = path.read_bytes() == again.read_bytes()

        labels = bench.class_labels("unseen")
        items = bench.query_items("unseen")
        emb = ck.model.embed(bench.images(items)).astype(np.float64)
        proto = ck.model.embed(bench.prototypes(labels)).astype(np.float64)
        csv_path = tmp_path / "emb.csv"
        ids = [it.item_id for it in items] + [f"{l}/prototype.png" for l in labels]
        write_embeddings(csv_path, ids, [it.label for it in items] + list(labels),
                         np.concatenate([emb, proto]))
        direct = score([it.item_id for it in items], emb, [it.label for it in items],
                       SupportSet.from_pairs(labels, proto), "unseen")
        reloaded = classify_export(csv_path, "unseen")
        same = direct.rows == reloaded.rows
        record(8, params_ok and bytes_ok and same,
               f"parameters bit-exact {params_ok}, re-save identical {bytes_ok}, "
               f"reloaded decisions identical {same} ({len(direct.rows)} queries)")
