"""Finite-difference check of every differentiable operation, loss and the network."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .. import arraydiff as ad
from .. import memory as mem
from .. import objective as obj
from ..arraydiff import Tensor, grad_check
from ..network import NetConfig, StageNetwork

TOLERANCE = 1e-4


@dataclass
class GradResult:
    name: str
    error: float
    seconds: float

    @property
    def ok(self) -> bool:
        return self.error <= TOLERANCE


def _weighted(rng: np.random.Generator, op: Callable[[Tensor], Tensor]) -> Callable[[Tensor], Tensor]:
    """Reduce a tensor-valued op to a scalar with fixed random weights."""
    cache: dict[tuple, np.ndarray] = {}

    def fn(x: Tensor) -> Tensor:
        out = op(x)
        if out.shape not in cache:
            cache[out.shape] = rng.normal(size=out.shape)
        return ad.sum(ad.mul(out, Tensor(cache[out.shape])))

    return fn


def op_cases(seed: int = 0) -> list[tuple[str, Callable, np.ndarray]]:
    rng = np.random.default_rng(seed)
    n = lambda *shape: rng.normal(size=shape)  # noqa: E731
    img = n(2, 6, 8)
    other = n(2, 6, 8)
    kern = n(3, 2, 3, 3)
    row = n(1, 6, 1)
    a, b = n(3, 4), n(4, 5)
    pos = rng.uniform(0.5, 2.0, size=(2, 6, 8))
    w = lambda op: _weighted(np.random.default_rng(seed + 1), op)  # noqa: E731
    T = Tensor
    cases = [
        ("add", w(lambda x: ad.add(x, T(other))), img),
        ("add/broadcast", w(lambda x: ad.add(T(img), x)), row),
        ("sub", w(lambda x: ad.sub(T(other), x)), img),
        ("mul", w(lambda x: ad.mul(x, T(other))), img),
        ("mul/broadcast", w(lambda x: ad.mul(T(img), x)), row),
        ("div/numerator", w(lambda x: ad.div(x, T(pos))), img),
        ("div/denominator", w(lambda x: ad.div(T(img), x)), pos),
        ("scale", w(lambda x: ad.scale(x, -2.5)), img),
        ("add_scalar", w(lambda x: ad.add_scalar(x, 0.7)), img),
        ("relu", w(ad.relu), img),
        ("sigmoid", w(ad.sigmoid), img),
        ("sqrt", w(ad.sqrt), pos),
        ("abs", w(ad.absolute), img),
        ("square", w(ad.square), img),
        ("sum/axis", w(lambda x: ad.sum(x, axis=1)), img),
        ("mean", lambda x: ad.mean(ad.square(x)), img),
        ("l2_norm", w(lambda x: ad.l2_norm(x, axis=0)), img),
        ("reshape", w(lambda x: ad.reshape(x, (6, 16))), img),
        ("transpose", w(lambda x: ad.transpose(x, (2, 0, 1))), img),
        ("concat_channels", w(lambda x: ad.concat_channels(x, T(other), x)), img),
        ("matmul/left", w(lambda x: ad.matmul(x, T(b))), a),
        ("matmul/right", w(lambda x: ad.matmul(T(a), x)), b),
        ("softmax/axis1", w(lambda x: ad.softmax(x, axis=1)), a),
        ("softmax/axis0", w(lambda x: ad.softmax(x, axis=0)), a),
        ("conv2d/input/zero", w(lambda x: ad.conv2d(x, T(kern), "zero")), img),
        ("conv2d/input/replicate", w(lambda x: ad.conv2d(x, T(kern), "replicate")), img),
        ("conv2d/kernel/zero", w(lambda k: ad.conv2d(T(img), k, "zero")), kern),
        ("conv2d/kernel/replicate", w(lambda k: ad.conv2d(T(img), k, "replicate")), kern),
        ("conv2d/1x1", w(lambda k: ad.conv2d(T(img), k)), n(4, 2, 1, 1)),
        ("avg_pool2", w(ad.avg_pool2), img),
        ("upsample2", w(ad.upsample2), img),
        ("laplacian/replicate", w(lambda x: ad.laplacian(x, "replicate")), img),
        ("laplacian/zero", w(lambda x: ad.laplacian(x, "zero")), img),
    ]
    q, m = n(5, 4), n(6, 4)
    simplex = rng.dirichlet(np.ones(6), size=5)
    bank_cfg = mem.MemoryConfig(P=2, I=2, S=1, N_c=2, C=4, B=2)
    part = mem.init_bank(bank_cfg, seed).part_metric.data
    cases += [
        ("address/queries", w(lambda x: mem.address(x, T(m))), q),
        ("address/metric", w(lambda x: mem.address(T(q), x)), m),
        ("read/weights", w(lambda x: mem.read(ad.softmax(x, axis=1), T(m))), n(5, 6)),
        ("read/metric", w(lambda x: mem.read(T(simplex), x)), m),
        ("summarize", w(lambda x: mem.summarize(x, 3, alpha=0.8)), m),
        (
            "hierarchical_read/part_metric",
            w(lambda x: ad.concat(list(mem.hierarchical_read(T(q), mem.PrototypeBank(bank_cfg, x))), axis=0)),
            part,
        ),
        (
            "hierarchical_read/queries",
            w(lambda x: ad.concat(list(mem.hierarchical_read(x, mem.PrototypeBank(bank_cfg, T(part)))), axis=0)),
            q,
        ),
    ]
    y3 = rng.uniform(size=(3, 8, 8))
    x3 = rng.uniform(size=(3, 8, 8))
    neg3 = rng.uniform(size=(3, 8, 8))
    cases += [
        ("charbonnier", lambda x: obj.charbonnier(x, T(np.zeros_like(x3)), 1e-3), x3),
        ("charbonnier/pair", lambda x: obj.charbonnier(x, T(y3), 1e-3), x3),
        ("edge_loss", lambda x: obj.edge_loss(x, T(y3), 1e-3), x3),
        ("contrastive/anchor", lambda x: obj.contrastive_loss(x, T(y3), T(neg3)), x3),
        ("contrastive/negative", lambda x: obj.contrastive_loss(T(x3), T(y3), x), neg3),
    ]
    return cases


def network_cases(seed: int = 0, samples: int = 6):
    """(name, fn, x, samples) for the 3x8x8 network: every parameter group plus the input."""
    rng = np.random.default_rng(seed)
    cfg = NetConfig.tiny(channels=4, P=2, I=2, S=1, N_c=1, B=2)
    net = StageNetwork.init(cfg, seed)
    img = rng.uniform(size=(3, 8, 8))
    clean = rng.uniform(size=(3, 8, 8))
    loss_cfg = obj.LossConfig()

    def squared(n: StageNetwork, x) -> Tensor:
        total = None
        for est in n.forward(x):
            t = ad.sum(ad.square(ad.sub(est, Tensor(clean))))
            total = t if total is None else ad.add(total, t)
        return total

    cases = []
    for name in net.params:
        def fn(value, name=name):
            return squared(net.with_parameter(name, value), img)

        cases.append((f"network/{name}", fn, net.params[name].data, samples))
    cases.append(("network/input", lambda x: squared(net, x), img, None))
    cases.append(
        (
            "total_loss/input",
            lambda x: obj.total_loss(net.forward(x), clean, img, net, loss_cfg),
            img,
            24,
        )
    )
    cases.append(
        (
            "recon_loss/part_metric",
            lambda v: obj.recon_loss(clean, net.with_parameter("memory.part_metric", v)),
            net.params["memory.part_metric"].data,
            None,
        )
    )
    for name in ("s2.enc1.w", "s3.head.w", "memory.part_metric"):
        cases.append(
            (
                f"total_loss/{name}",
                lambda v, name=name: obj.total_loss(
                    net.with_parameter(name, v).forward(img), clean, img, net.with_parameter(name, v), loss_cfg
                ),
                net.params[name].data,
                samples,
            )
        )
    return cases


def run_suite(seed: int = 0, include_network: bool = True) -> list[GradResult]:
    results = []
    for name, fn, x in op_cases(seed):
        t0 = time.perf_counter()
        err = grad_check(fn, x)
        results.append(GradResult(name, err, time.perf_counter() - t0))
    if include_network:
        for name, fn, x, samples in network_cases(seed):
            t0 = time.perf_counter()
            err = grad_check(fn, x, samples=samples, seed=seed)
            results.append(GradResult(name, err, time.perf_counter() - t0))
    return results
