"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest -s tests/test_acceptance.py`` to see the lines inline; they
also appear in captured output on failure.
"""
import math
import os
import time
from types import SimpleNamespace

import numpy as np
import pytest

from conftest import TINY
from xai_kit import tensor as T
from xai_kit.cam import CamConfig, faster_score_cam, grad_cam, score_cam, smoothgrad, vanilla_saliency
from xai_kit.data import DatasetSplit, load_dataset, split_dataset
from xai_kit.errors import BadMagicError, ShapeMismatchError, TruncatedPayloadError
from xai_kit.lime import fit_surrogate, mask_distances, sample_masks
from xai_kit.losses import ClassWeights, log_loss, weighted_log_loss
from xai_kit.metrics import ConfusionMatrix, metrics_from_confusion, roc_auc
from xai_kit.model import ModelConfig, build_model, load_checkpoint, save_checkpoint
from xai_kit.synthetic import square_dataset
from xai_kit.training import Adam, TrainConfig, evaluate, stack, train, train_step

SMALL = ModelConfig(28, 28, 3, (16, 8), 3, 16, 0.25, 2)


def verdict(n, ok, detail, elapsed, budget):
    in_time = elapsed < budget
    status = "PASS" if ok and in_time else "FAIL"
    print(f"CRITERION {n}: {status} {detail} ({elapsed:.2f}s, budget {budget:g}s)")
    assert ok, detail
    assert in_time, f"took {elapsed:.2f}s, budget {budget}s"


def top_decile_iou(values, box):
    k = math.ceil(0.1 * values.size)
    top = values >= np.sort(values.ravel())[-k]
    square = np.zeros_like(top)
    t, l, b, r = box
    square[t:b, l:r] = True
    return float((top & square).sum() / (top | square).sum())


def test_criterion_01_metric_reconstruction():
    start = time.perf_counter()
    rows = {
        "inception": (ConfusionMatrix(148, 2, 0, 150), (0.9933, 1.0, 0.9867, 0.9933, 1.0)),
        "cs-cnn": (ConfusionMatrix(16, 0, 2, 8), (0.9231, 0.8889, 1.0, 0.9412, 0.8)),
    }
    got = {}
    ok = True
    for name, (cm, want) in rows.items():
        m = metrics_from_confusion(cm)
        got[name] = (m.accuracy, m.precision, m.recall, m.f1, m.specificity)
        ok &= all(abs(g - w) < 1e-4 for g, w in zip(got[name], want))
    detail = "; ".join(f"{k}=" + ",".join(f"{v:.4f}" for v in vals) for k, vals in got.items())
    verdict(1, ok, detail, time.perf_counter() - start, 1)


def test_criterion_02_split_reconstruction():
    start = time.perf_counter()

    def fake(n_pos, n_neg):
        return [SimpleNamespace(label=1, source_path=f"yes/{i:05d}.jpg") for i in range(n_pos)] + \
               [SimpleNamespace(label=0, source_path=f"no/{i:05d}.jpg") for i in range(n_neg)]

    def counts(split, label):
        return tuple(sum(s.label == label for s in part) for part in (split.train, split.validation, split.test))

    br35h = split_dataset(fake(1500, 1500), seed=0)
    btd = split_dataset(fake(155, 98), seed=0)
    got = [counts(br35h, 1), counts(br35h, 0), counts(btd, 1), counts(btd, 0)]
    want = [(1200, 150, 150), (1200, 150, 150), (124, 15, 16), (78, 10, 10)]
    verdict(2, got == want, f"counts {got}", time.perf_counter() - start, 1)


def test_criterion_03_gradient_suite():
    start = time.perf_counter()
    worst = 0.0
    for seed in range(5):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(2, 2, 6, 6))
        k = rng.normal(size=(3, 2, 3, 3))
        b = rng.normal(size=3)
        worst = max(
            worst,
            T.parameters_grad_check(lambda n: (T.conv2d(n[0], n[1], n[2]) * 0.1).sum(), [x, k, b]),
            T.grad_check(lambda n: (T.maxpool2d(n) * T.maxpool2d(n)).sum(), x),
            T.grad_check(lambda n: T.log(T.softmax(n)).sum() * 0.3, rng.normal(size=(3, 4))),
            T.parameters_grad_check(lambda n: (T.dense(n[0], n[1], n[2]) * T.dense(n[0], n[1], n[2])).sum(),
                                    [rng.normal(size=(3, 12)), rng.normal(size=(12, 4)), rng.normal(size=4)]),
            T.grad_check(lambda n: T.relu(n).mean() + T.clip(n, -0.5, 0.5).sum(), rng.normal(size=(4, 5)) + 0.01),
        )
        model = build_model(TINY, seed, np.float64)
        images = rng.uniform(size=(3, 3, 16, 16))
        labels = np.array([1, 0, 1])
        names = list(model.params)

        def loss(nodes):
            out = model.forward_graph(images, param_nodes=dict(zip(names, nodes)))
            return weighted_log_loss(labels, T.take(out.probs, 1, axis=1), ClassWeights(1.7, 0.6))

        worst = max(worst, T.parameters_grad_check(loss, [model.params[k] for k in names]))
    verdict(3, worst < 1e-4, f"worst relative error {worst:.2e}", time.perf_counter() - start, 60)


def test_criterion_04_loss_identities():
    start = time.perf_counter()
    rng = np.random.default_rng(4)
    mismatches = 0
    for _ in range(1000):
        n = int(rng.integers(1, 20))
        labels = rng.integers(0, 2, size=n)
        probs = rng.uniform(0, 1, size=n)
        mismatches += weighted_log_loss(labels, probs, ClassWeights(1.0, 1.0)) != log_loss(labels, probs)

    images, targets = stack(square_dataset(6, 6, seed=5)[0])
    m1, m2 = build_model(SMALL, 2), build_model(SMALL, 2)
    l1, _ = train_step(m1, Adam(1e-3), images, targets, None, [0, 1])
    l2, _ = train_step(m2, Adam(1e-3), images, targets, ClassWeights(1.0, 1.0), [0, 1])
    step_same = l1 == l2 and all(m1.params[k].tobytes() == m2.params[k].tobytes() for k in m1.params)
    verdict(4, mismatches == 0 and step_same,
            f"loss mismatches {mismatches}/1000, unit-weight step bit-identical {step_same}",
            time.perf_counter() - start, 10)


def test_criterion_05_xai_degeneracies():
    start = time.perf_counter()
    cfg = ModelConfig(32, 32, 3, (4, 6), 3, 8, 0.25, 2)
    model = build_model(cfg, 0, np.float64)
    image = np.random.default_rng(5).uniform(size=(3, 32, 32))

    sal = vanilla_saliency(model, image, 1)
    sg = smoothgrad(model, image, 1, CamConfig(smoothgrad_sigma_fraction=0.0))
    smooth_ok = np.array_equal(sal.values, sg.values)

    full = score_cam(model, image, 1)
    fast = faster_score_cam(model, image, 1, top_k=6)
    score_ok = np.array_equal(full.values, fast.values)

    neg = build_model(ModelConfig(32, 32, 3, (4,), 3, 8, 0.0, 2), 0, np.float64)
    for k in ("conv1.weight", "dense1.weight"):
        neg.params[k] = np.abs(neg.params[k])
    neg.params["dense2.weight"][:, 1] = -np.abs(neg.params["dense2.weight"][:, 1])
    hm = grad_cam(neg, image + 0.1, 1)
    zero_ok = bool(np.all(hm.values == 0))

    verdict(5, smooth_ok and score_ok and zero_ok,
            f"smoothgrad(0)==saliency {smooth_ok}, faster(all)==score-cam {score_ok}, negative grad-cam zero {zero_ok}",
            time.perf_counter() - start, 30)


def test_criterion_06_lime_oracle():
    start = time.perf_counter()
    rng = np.random.default_rng(6)
    beta = rng.normal(size=8)
    z = sample_masks(300, 8, 6)
    y = 0.3 + z @ beta
    d = mask_distances(z)
    exact = fit_surrogate(z, y, d, 0.25 * math.sqrt(8), 0.0)
    err = float(np.abs(exact.coefficients - beta).max())

    noisy = z @ beta + 0.05 * rng.normal(size=300)
    norms = [float(np.linalg.norm(fit_surrogate(z, noisy, d, 0.25 * math.sqrt(8), lam).coefficients))
             for lam in (0.0, 0.1, 1.0, 10.0)]
    monotone = all(b <= a for a, b in zip(norms, norms[1:]))
    verdict(6, err < 1e-6 and monotone,
            f"max coefficient error {err:.1e}, norms " + ",".join(f"{v:.4f}" for v in norms),
            time.perf_counter() - start, 10)


def test_criterion_07_localization():
    start = time.perf_counter()
    train_set, _ = square_dataset(200, 200, seed=1, background=0.05)
    val_set, _ = square_dataset(25, 25, seed=2, background=0.05)
    test_set, boxes = square_dataset(50, 50, seed=3, background=0.05)
    model, _ = train(build_model(SMALL, 0), DatasetSplit(train_set, val_set, test_set),
                     TrainConfig(epochs=10, batch_size=20, learning_rate=1e-3, seed=0))
    accuracy = evaluate(model, test_set)[1].accuracy
    positives = [(s, b) for s, b in zip(test_set, boxes) if s.label == 1][:10]
    ious = [top_decile_iou(grad_cam(model, s.pixels, 1).values, b) for s, b in positives]
    median = float(np.median(ious))
    verdict(7, accuracy >= 0.95 and median >= 0.5, f"test accuracy {accuracy:.4f}, median IoU {median:.4f}",
            time.perf_counter() - start, 300)


def test_criterion_08_cost_sensitivity():
    start = time.perf_counter()
    train_set, _ = square_dataset(40, 400, seed=11)
    val_set, _ = square_dataset(5, 50, seed=12)
    test_set, _ = square_dataset(20, 200, seed=13)
    split = DatasetSplit(train_set, val_set, test_set)
    recall = {False: [], True: []}
    accuracy = {False: [], True: []}
    for seed in range(5):
        for cs in (False, True):
            model, _ = train(build_model(SMALL, seed), split,
                             TrainConfig(epochs=6, batch_size=20, learning_rate=1e-3, cost_sensitive=cs, seed=seed))
            m = evaluate(model, test_set)[1]
            recall[cs].append(m.recall)
            accuracy[cs].append(m.accuracy)
    std_recall, cs_recall = np.mean(recall[False]), np.mean(recall[True])
    drop = np.mean(accuracy[False]) - np.mean(accuracy[True])
    verdict(8, cs_recall > std_recall and drop <= 0.05,
            f"mean recall standard {std_recall:.4f} cost-sensitive {cs_recall:.4f}, accuracy drop {drop * 100:.2f} points",
            time.perf_counter() - start, 600)


def test_criterion_09_real_data_soft_target():
    if not os.environ.get("XAI_KIT_BTD_DIR"):
        print("CRITERION 9: SKIP XAI_KIT_BTD_DIR is not set; BTD images are not bundled")
        pytest.skip("set XAI_KIT_BTD_DIR to the BTD directory with yes/ and no/")
    start = time.perf_counter()
    samples = load_dataset(os.environ["XAI_KIT_BTD_DIR"])
    split = split_dataset(samples, seed=0)
    cs_acc, cs_recall, std_recall = [], [], []
    for seed in range(5):
        for cs in (False, True):
            model, _ = train(build_model(ModelConfig(), seed), split,
                             TrainConfig(epochs=35, batch_size=50, learning_rate=2e-5, cost_sensitive=cs, seed=seed))
            m = evaluate(model, split.test)[1]
            if cs:
                cs_acc.append(m.accuracy)
                cs_recall.append(m.recall)
            else:
                std_recall.append(m.recall)
    acc, rec, base = float(np.median(cs_acc)), float(np.median(cs_recall)), float(np.median(std_recall))
    verdict(9, acc >= 0.75 and rec >= base,
            f"median cost-sensitive accuracy {acc:.4f}, recall {rec:.4f} vs standard {base:.4f}",
            time.perf_counter() - start, 3600)


def test_criterion_10_roc_suite():
    start = time.perf_counter()
    separated = roc_auc([0, 0, 1, 1], [0.1, 0.2, 0.8, 0.9]).auc
    constant = roc_auc([0, 1, 0, 1], [0.5] * 4).auc
    pairwise = roc_auc([0, 0, 1, 1], [0.1, 0.4, 0.35, 0.8]).auc
    rng = np.random.default_rng(10)
    worst = 0.0
    for _ in range(100):
        labels = np.r_[0, 1, rng.integers(0, 2, size=30)]
        scores = rng.uniform(0.01, 1, size=32)
        base = roc_auc(labels, scores).auc
        for transformed in (np.exp(3 * scores), scores ** 3, 1 / (1 + np.exp(-scores)), 2 * scores - 7):
            worst = max(worst, abs(roc_auc(labels, transformed).auc - base))
    ok = separated == 1.0 and constant == 0.5 and pairwise == 0.75 and worst <= 1e-12
    verdict(10, ok, f"separated {separated}, constant {constant}, pairwise {pairwise}, invariance gap {worst:.1e}",
            time.perf_counter() - start, 5)


def test_criterion_11_persistence(tmp_path):
    start = time.perf_counter()
    model = build_model(TINY, 9)
    path = tmp_path / "m.ckpt"
    save_checkpoint(model, path)
    back = load_checkpoint(path)
    exact = back.config == model.config and all(back.params[k].tobytes() == model.params[k].tobytes()
                                                 for k in model.params)
    data = path.read_bytes()
    raised = {}
    cases = {
        "bad magic": (b"NOPE" + data[4:], BadMagicError),
        "truncation": (data[:-7], TruncatedPayloadError),
        "shape mismatch": (data.replace(b'"dense_units": 4', b'"dense_units": 5'), ShapeMismatchError),
    }
    for name, (blob, error) in cases.items():
        bad = tmp_path / f"{name.replace(' ', '_')}.ckpt"
        bad.write_bytes(blob)
        try:
            load_checkpoint(bad)
            raised[name] = False
        except error:
            raised[name] = True
        except Exception:
            raised[name] = False
    verdict(11, exact and all(raised.values()), f"round-trip bit-exact {exact}, errors {raised}",
            time.perf_counter() - start, 5)
