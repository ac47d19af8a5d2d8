"""Built-in invariant suites behind the `selftest` subcommand.

Each suite returns (ok, detail) and is independently timed.  The
gradient suites compare every analytic gradient against central finite
differences; one suite deliberately corrupts the softmax backward rule
through a test hook to prove the checker would notice a broken rule.
"""

from __future__ import annotations

import itertools
import time
from typing import Callable, Dict, List, Sequence, Tuple

import numpy as np

from . import tensor as T
from .data import TASK_BINARY, TASK_MULTICLASS, make_synthetic
from .metrics import PredictionSet, cd_grouping, friedman_test, macro_f1, nemenyi_cd, roc_auc
from .model import (
    ModelConfig,
    forward,
    forward_patches,
    init_params,
)
from .rng import Rng
from .tensor import Tape, Tensor, backward
from .train import TrainProtocol, cross_entropy, run_protocol

FD_STEP = 1e-5
FD_RTOL = 1e-4
FD_ATOL = 1e-8


def fd_gradient(loss_fn: Callable[[], Tensor], leaf: Tensor) -> np.ndarray:
    """Central finite differences of loss_fn w.r.t. every entry of leaf."""
    out = np.zeros_like(leaf.data)
    flat = leaf.data.reshape(-1)
    grad = out.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + FD_STEP
        up = loss_fn().item()
        flat[i] = keep - FD_STEP
        down = loss_fn().item()
        flat[i] = keep
        grad[i] = (up - down) / (2.0 * FD_STEP)
    return out


def gradient_mismatch(analytic: np.ndarray, fd: np.ndarray) -> float:
    """Worst elementwise excess over rtol*scale + atol; <= 0 means agreement."""
    scale = np.maximum(np.abs(analytic), np.abs(fd))
    return float((np.abs(analytic - fd) - (FD_RTOL * scale + FD_ATOL)).max())


def check_gradients(
    loss_fn: Callable[[], Tensor], leaves: Sequence[Tuple[str, Tensor]]
) -> Tuple[bool, str]:
    """Backward once, then finite-difference every leaf; report the worst."""
    for _, leaf in leaves:
        leaf.zero_grad()
    with Tape() as tape:
        loss = loss_fn()
    backward(loss, tape)
    worst_name, worst = "", -np.inf
    for name, leaf in leaves:
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
        excess = gradient_mismatch(analytic, fd_gradient(loss_fn, leaf))
        if excess > worst:
            worst_name, worst = name, excess
        leaf.zero_grad()
    ok = worst <= 0.0
    return ok, f"worst {worst_name}: excess {worst:.3g}"


# ---------------------------------------------------------------------------
# suites


def _random_tensor(rng: Rng, shape, requires_grad=True) -> Tensor:
    flat = np.array(rng.normal_list(int(np.prod(shape)))).reshape(shape)
    return Tensor(flat, requires_grad=requires_grad)


def suite_op_gradients() -> Tuple[bool, str]:
    rng = Rng(11)
    a = _random_tensor(rng, (3, 4))
    b = _random_tensor(rng, (3, 4))
    w = _random_tensor(rng, (4, 3))
    bias = _random_tensor(rng, (4,))
    gain = _random_tensor(rng, (4,))
    cases: List[Tuple[str, Callable[[], Tensor], List[Tuple[str, Tensor]]]] = [
        ("matmul", lambda: T.sum_all(T.matmul(a, w)), [("a", a), ("w", w)]),
        ("transpose", lambda: T.sum_all(T.mul(T.transpose(a), T.transpose(a))), [("a", a)]),
        ("add", lambda: T.sum_all(T.mul(T.add(a, b), T.add(a, b))), [("a", a), ("b", b)]),
        ("add-bias", lambda: T.sum_all(T.mul(T.add(a, bias), T.add(a, bias))), [("a", a), ("bias", bias)]),
        ("mul", lambda: T.sum_all(T.mul(T.mul(a, b), b)), [("a", a), ("b", b)]),
        ("scale", lambda: T.sum_all(T.scale(T.mul(a, a), -1.7)), [("a", a)]),
        ("relu", lambda: T.sum_all(T.mul(T.relu(a), T.relu(a))), [("a", a)]),
        ("gelu", lambda: T.sum_all(T.mul(T.gelu(a), b)), [("a", a), ("b", b)]),
        ("reshape", lambda: T.sum_all(T.mul(T.reshape(a, (4, 3)), T.reshape(b, (4, 3)))), [("a", a), ("b", b)]),
        ("concat_rows", lambda: T.sum_all(T.mul(T.concat_rows([a, b]), T.concat_rows([b, a]))), [("a", a), ("b", b)]),
        ("concat_cols", lambda: T.sum_all(T.mul(T.concat_cols([a, b]), T.concat_cols([b, a]))), [("a", a), ("b", b)]),
        ("slice_rows", lambda: T.sum_all(T.mul(T.slice_rows(a, 1, 3), T.slice_rows(b, 0, 2))), [("a", a), ("b", b)]),
        ("slice_cols", lambda: T.sum_all(T.mul(T.slice_cols(a, 1, 4), T.slice_cols(b, 0, 3))), [("a", a), ("b", b)]),
        ("permute_rows", lambda: T.sum_all(T.mul(T.permute_rows(a, [2, 0, 1]), b)), [("a", a)]),
        ("mean_rows", lambda: T.sum_all(T.mul(T.mean_rows(a), bias)), [("a", a), ("bias", bias)]),
        ("max_rows", lambda: T.sum_all(T.mul(T.max_rows(a), bias)), [("a", a)]),
        ("softmax", lambda: T.sum_all(T.mul(T.softmax(a, axis=1), b)), [("a", a)]),
        ("log_softmax", lambda: T.sum_all(T.mul(T.log_softmax(a, axis=1), b)), [("a", a)]),
        ("pick_rows", lambda: T.sum_all(T.mul(T.pick_rows(a, [1, 3, 0]), T.pick_rows(b, [1, 3, 0]))), [("a", a), ("b", b)]),
        ("layer_norm", lambda: T.sum_all(T.mul(T.layer_norm(a, gain, bias), b)), [("a", a), ("gain", gain), ("bias", bias)]),
        ("cross_entropy", lambda: cross_entropy(T.matmul(a, w), [0, 2, 1]), [("a", a), ("w", w)]),
    ]
    for name, fn, leaves in cases:
        ok, detail = check_gradients(fn, leaves)
        if not ok:
            return False, f"{name}: {detail}"
    return True, f"{len(cases)} ops within {FD_RTOL} relative"


def toy_config(**overrides) -> ModelConfig:
    base = dict(
        input_size=8,
        channels=1,
        patch_size=4,
        unit_dims=(8, 4),
        mlp_dims=(8, 4),
        heads=2,
        num_classes=2,
    )
    base.update(overrides)
    return ModelConfig(**base)


def suite_model_gradient() -> Tuple[bool, str]:
    config = toy_config()
    params = init_params(config, Rng(5))
    image = np.array(Rng(17).uniform_list(8 * 8)).reshape(8, 8, 1)

    def loss_fn() -> Tensor:
        logits = forward(Tensor(image), params, config)
        return cross_entropy(T.reshape(logits, (1, 2)), [1])

    leaves = list(params.named_tensors())
    ok, detail = check_gradients(loss_fn, leaves)
    n = sum(t.size for _, t in leaves)
    return ok, f"{n} parameters incl. zero-init res_proj; {detail}"


def suite_gradient_detector() -> Tuple[bool, str]:
    """The checker must notice a corrupted softmax backward rule."""
    rng = Rng(23)
    a = _random_tensor(rng, (3, 4))
    b = _random_tensor(rng, (3, 4), requires_grad=False)
    fn = lambda: T.sum_all(T.mul(T.softmax(a, axis=1), b))
    original = T._SOFTMAX_GRAD_SCALE
    try:
        T._SOFTMAX_GRAD_SCALE = 1.05
        ok_corrupt, _ = check_gradients(fn, [("a", a)])
    finally:
        T._SOFTMAX_GRAD_SCALE = original
    ok_clean, _ = check_gradients(fn, [("a", a)])
    if not ok_clean:
        return False, "clean softmax failed its own gradient check"
    if ok_corrupt:
        return False, "corrupted softmax slipped past the gradient check"
    return True, "corruption detected, clean rule passes"


def suite_permutation_invariance() -> Tuple[bool, str]:
    worst = 0.0
    for pooling in ("gap", "max", "attention", "cls"):
        config = toy_config(pooling=pooling)
        params = init_params(config, Rng(7))
        patches = _random_tensor(Rng(29), (4, config.patch_dim), requires_grad=False)
        base = forward_patches(patches, params, config).data
        for perm in itertools.permutations(range(4)):
            shuffled = Tensor(patches.data[list(perm)])
            dev = float(np.abs(forward_patches(shuffled, params, config).data - base).max())
            worst = max(worst, dev)
    ok = worst <= 1e-9
    return ok, f"max logit deviation {worst:.3g} over 24 perms x 4 poolings"


def suite_positional_sensitivity() -> Tuple[bool, str]:
    config = toy_config(use_positional=True)
    params = init_params(config, Rng(7))
    patches = _random_tensor(Rng(29), (4, config.patch_dim), requires_grad=False)
    base = forward_patches(patches, params, config).data
    best = 0.0
    for perm in itertools.permutations(range(4)):
        shuffled = Tensor(patches.data[list(perm)])
        dev = float(np.abs(forward_patches(shuffled, params, config).data - base).max())
        best = max(best, dev)
    ok = best > 1e-6
    return ok, f"largest permutation effect {best:.3g}"


def suite_zero_init_identity() -> Tuple[bool, str]:
    config = toy_config()  # widths (8, 4): second block changes width
    params = init_params(config, Rng(13))
    patches = _random_tensor(Rng(31), (4, config.patch_dim), requires_grad=False)
    with_res = forward_patches(patches, params, config).data
    ablated = ModelConfig(
        **{**_config_dict(config), "use_adaptive_residual": False}
    )
    without = forward_patches(patches, params, ablated).data
    dev = float(np.abs(with_res - without).max())
    return dev <= 1e-12, f"residual term at init contributes {dev:.3g}"


def _config_dict(config: ModelConfig) -> dict:
    import json

    return json.loads(config.to_json())


def _brute_macro_f1(labels, hat, k) -> float:
    total = 0.0
    for cls in range(k):
        tp = sum(1 for y, p in zip(labels, hat) if y == cls and p == cls)
        fp = sum(1 for y, p in zip(labels, hat) if y != cls and p == cls)
        fn = sum(1 for y, p in zip(labels, hat) if y == cls and p != cls)
        total += (2 * tp / (2 * tp + fp + fn)) if (2 * tp + fp + fn) else 0.0
    return total / k


def _brute_auc(labels, scores) -> float:
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


def suite_metric_oracles() -> Tuple[bool, str]:
    rng = Rng(41)
    for trial in range(200):
        n = 2 + rng.below(11)
        k = 2 + rng.below(3)
        labels = [rng.below(k) for _ in range(n)]
        raw = np.array(rng.uniform_list(n * k)).reshape(n, k)
        # quantized scores so ties actually occur
        raw = np.rint(raw * 4.0) + 1.0
        scores = raw / raw.sum(axis=1, keepdims=True)
        kind = TASK_BINARY if k == 2 else TASK_MULTICLASS
        pred = PredictionSet(scores=scores, labels=np.array(labels), task_kind=kind)
        hat = np.argmax(scores, axis=1)
        if macro_f1(pred) != _brute_macro_f1(labels, hat, k):
            return False, f"macro_f1 mismatch on trial {trial}"
        if k == 2 and 0 < sum(labels) < n:
            if roc_auc(pred) != _brute_auc(labels, list(scores[:, 1])):
                return False, f"roc_auc mismatch on trial {trial}"
    return True, "macro_f1 and roc_auc match brute force on 200 instances"


def suite_rank_stats() -> Tuple[bool, str]:
    ranks = np.tile(np.array([[1.0], [2.0], [3.0]]), (1, 4))
    stat, p = friedman_test(ranks)
    if stat != 8.0:
        return False, f"fixture statistic {stat} != 8"
    if not 0.0 <= p <= 1.0:
        return False, f"fixture p-value {p} outside [0, 1]"
    for k, n in ((5, 7), (15, 7)):
        got = nemenyi_cd(k, n)
        want = {5: 2.728, 15: 3.391}[k] * np.sqrt(k * (k + 1) / (6.0 * n))
        if abs(got - want) > 1e-9:
            return False, f"nemenyi_cd({k},{n}) off by {abs(got - want):.3g}"
    groups = cd_grouping([1.0, 1.4, 3.0], 0.5)
    if groups != [[0, 1], [2]]:
        return False, f"cd_grouping fixture gave {groups}"
    return True, "Friedman fixture, CD hand values, grouping fixture all agree"


def suite_determinism() -> Tuple[bool, str]:
    split = make_synthetic(2, 12, 8, "patch-histogram", seed=3)
    config = toy_config(channels=3)
    protocol = TrainProtocol(shots_per_class=4, epochs=2, seed=3)
    first = run_protocol(split, split, config, protocol, "selftest")
    second = run_protocol(split, split, config, protocol, "selftest")
    same = (
        first.epoch_losses == second.epoch_losses
        and first.train_metrics == second.train_metrics
        and first.test_metrics == second.test_metrics
    )
    return same, "two identical runs produced bitwise-equal records" if same else "records differ"


ALL_SUITES = [
    ("permutation-invariance", suite_permutation_invariance),
    ("positional-sensitivity", suite_positional_sensitivity),
    ("zero-init-identity", suite_zero_init_identity),
    ("op-gradients", suite_op_gradients),
    ("model-gradient", suite_model_gradient),
    ("gradient-detector", suite_gradient_detector),
    ("metric-oracles", suite_metric_oracles),
    ("rank-stats", suite_rank_stats),
    ("determinism", suite_determinism),
]


def run_selftest(write=print) -> bool:
    all_ok = True
    width = max(len(name) for name, _ in ALL_SUITES)
    for name, fn in ALL_SUITES:
        started = time.perf_counter()
        try:
            ok, detail = fn()
        except Exception as exc:  # a crashed suite is a failed suite
            ok, detail = False, f"crashed: {exc!r}"
        elapsed = time.perf_counter() - started
        all_ok &= ok
        status = "PASS" if ok else "FAIL"
        write(f"{status}  {name:<{width}}  {elapsed:7.2f}s  {detail}")
    write(("all suites passed" if all_ok else "some suites FAILED"))
    return all_ok
