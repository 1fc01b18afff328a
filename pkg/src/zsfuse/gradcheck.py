"""Finite-difference verification of every differentiable block, at 64-bit precision."""

from __future__ import annotations

import time
from collections.abc import Callable
from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T
from .alignment import UNLABELED, loss_seen, loss_total, loss_unseen, similarity_matrix
from .backbones import box_filter3x3
from .sgvf import init_sgvf, sgvf_forward
from .svfe import apply_svfe, init_svfe
from .synthscene import SceneSpec, generate_scene
from .tensor import Tensor, grad_check_params
from .trainer import ABLATIONS, init_model, scene_loss

TOLERANCE = 1e-4


@dataclass
class BlockResult:
    name: str
    max_rel_error: float
    seconds: float

    @property
    def ok(self) -> bool:
        return bool(np.isfinite(self.max_rel_error)) and self.max_rel_error <= TOLERANCE


def _leaf(rng, *shape, positive=False):
    x = rng.standard_normal(shape)
    if positive:
        x = np.abs(x) + 0.5
    return Tensor(x, requires_grad=True)


def _probe(rng, shape):
    return Tensor(rng.standard_normal(shape))


def _contract(y: Tensor, R: Tensor) -> Tensor:
    return T.reduce_sum(T.mul(y, R))


def _op_cases(rng) -> dict[str, tuple[Callable[[], Tensor], list[Tensor]]]:
    a, b = _leaf(rng, 3, 4), _leaf(rng, 3, 4)
    p = _leaf(rng, 3, 4, positive=True)
    m1, m2 = _leaf(rng, 2, 3, 4), _leaf(rng, 2, 4, 5)
    w, bias = _leaf(rng, 4, 5), _leaf(rng, 5)
    gamma, beta = _leaf(rng, 4), _leaf(rng, 4)
    img = _leaf(rng, 5, 6, 2)
    idx = np.array([[0, 2], [1, 1], [2, 0]])
    wts = rng.random((3, 2))
    R34, R35 = _probe(rng, (3, 4)), _probe(rng, (3, 5))

    cases = {
        "add": (lambda: _contract(T.add(a, b), R34), [a, b]),
        "sub": (lambda: _contract(T.sub(a, b), R34), [a, b]),
        "mul": (lambda: _contract(T.mul(a, b), R34), [a, b]),
        "neg": (lambda: _contract(T.neg(a), R34), [a]),
        "scale": (lambda: _contract(T.scale(a, -2.5), R34), [a]),
        "relu": (lambda: _contract(T.relu(a), R34), [a]),
        "exp": (lambda: _contract(T.exp(a), R34), [a]),
        "log": (lambda: _contract(T.log(p), R34), [p]),
        "matmul": (lambda: _contract(T.matmul(m1, m2), _probe(np.random.default_rng(1), (2, 3, 5))), [m1, m2]),
        "affine": (lambda: _contract(T.affine(a, w, bias), R35), [a, w, bias]),
        "transpose": (lambda: _contract(T.transpose(a), _probe(np.random.default_rng(2), (4, 3))), [a]),
        "reshape": (lambda: _contract(T.reshape(a, (2, 6)), _probe(np.random.default_rng(3), (2, 6))), [a]),
        "concat": (lambda: _contract(T.concat([a, b], axis=1), _probe(np.random.default_rng(4), (3, 8))), [a, b]),
        "stack": (lambda: _contract(T.stack([a, b], axis=0), _probe(np.random.default_rng(5), (2, 3, 4))), [a, b]),
        "index_select": (lambda: _contract(T.index_select(a, [3, 0, 3], axis=1),
                                           _probe(np.random.default_rng(6), (3, 3))), [a]),
        "gather_rows": (lambda: _contract(T.gather_rows(a, [2, 2, 0]), R34), [a]),
        "weighted_gather_rows": (lambda: _contract(T.weighted_gather_rows(a, idx, wts), R34), [a]),
        "reduce_sum": (lambda: _contract(T.reduce_sum(a, axis=0), _probe(np.random.default_rng(7), (4,))), [a]),
        "reduce_mean": (lambda: _contract(T.reduce_mean(a, axis=1, keepdims=True),
                                          _probe(np.random.default_rng(8), (3, 1))), [a]),
        "softmax": (lambda: _contract(T.softmax(a, axis=1), R34), [a]),
        "log_softmax": (lambda: _contract(T.log_softmax(a, axis=0), R34), [a]),
        "logsumexp": (lambda: _contract(T.logsumexp(a, axis=1), _probe(np.random.default_rng(9), (3,))), [a]),
        "layer_norm": (lambda: _contract(T.layer_norm(a, gamma, beta), R34), [a, gamma, beta]),
        "l2_normalize": (lambda: _contract(T.l2_normalize(a, axis=1), R34), [a]),
        "box_filter3x3": (lambda: _contract(box_filter3x3(img), _probe(np.random.default_rng(10), (5, 6, 2))), [img]),
    }
    return {f"tensor.{k}": v for k, v in cases.items()}


def _model_cases(rng, d=16, heads=4, C=5, n_pts=8) -> dict[str, tuple[Callable[[], Tensor], list[Tensor]]]:
    cases = {}
    q, kv = _leaf(rng, n_pts, d), _leaf(rng, C, d)
    mha = nn.init_mha(rng, d, heads)
    R = _probe(rng, (n_pts, d))
    mask = np.array([True, False, True, True, False])

    def mha_loss():
        out, _ = nn.mha(mha, q, kv, kv, key_mask=mask)
        return _contract(out, R)

    cases["mha"] = (mha_loss, [q, kv] + [t for _, t in nn.named_parameters(mha)])

    td = nn.init_td(rng, d, heads, 2 * d)
    cases["td"] = (lambda: _contract(nn.td(td, q, kv, kv), R), [q, kv] + [t for _, t in nn.named_parameters(td)])

    F_s, F_l, F_i = _leaf(rng, C, d), _leaf(rng, n_pts, d), _leaf(rng, n_pts, d)
    valid = np.array([True, True, False, True, True, False, True, True])
    svfe = init_svfe(rng, d, heads, 2 * d)
    Rs = _probe(rng, (C, d))

    def svfe_loss():
        F_es, F_el, F_ei = apply_svfe(svfe, F_s, F_l, F_i, valid)
        return T.add(T.add(_contract(F_es, Rs), _contract(F_el, R)), _contract(F_ei, R))

    cases["svfe"] = (svfe_loss, [F_s, F_l, F_i] + [t for _, t in nn.named_parameters(svfe)])

    sgvf = init_sgvf(rng, d, heads)
    cases["sgvf"] = (lambda: _contract(sgvf_forward(sgvf, F_s, F_l, F_i, valid), R),
                     [F_s, F_l, F_i] + [t for _, t in nn.named_parameters(sgvf)])

    S = _leaf(rng, n_pts, C)
    labels = np.array([0, 1, 2, UNLABELED, 0, UNLABELED, 2, 1])
    seen = np.array([True, True, True, False, False])
    cases["loss_seen"] = (lambda: loss_seen(S, labels, 0.5), [S])
    cases["loss_unseen"] = (lambda: loss_unseen(S, labels, seen, 0.5), [S])

    def combined():
        Sc = similarity_matrix(F_l, F_s, "cosine")
        return loss_total(loss_seen(Sc, labels, 0.5), loss_unseen(Sc, labels, seen, 0.5))

    cases["loss_cosine"] = (combined, [F_l, F_s])
    return cases


def tiny_spec() -> SceneSpec:
    return SceneSpec(class_names=("road", "car", "person", "truck", "bicyclist"), unseen=(3, 4),
                     points_per_class=(3, 4), attr_channels=2, image_height=6, image_width=8, focal=5.0,
                     embed_dim=12, image_only_pairs=((3, 1), (4, 2)))


def _end_to_end_cases(seed: int, ablations=ABLATIONS) -> dict[str, tuple[Callable[[], Tensor], list[Tensor]]]:
    spec = tiny_spec()
    vocab = spec.vocabulary()
    scene = generate_scene(spec, seed)
    cases = {}
    for abl in ablations:
        model = init_model(spec.attr_channels, spec.image_channels, spec.embed_dim, abl, seed, dim=16, heads=4,
                           td_hidden=32, dtype=np.float64)

        def loss(model=model, abl=abl):
            return scene_loss(model, scene, vocab, abl, 0.5)[0]

        name = "end_to_end" if abl == "full" else f"end_to_end.{abl}"
        cases[name] = (loss, [t for _, t in model.named_parameters()])
    return cases


def run_suite(seed: int = 0, h: float = 1e-5, max_coords: int = 6,
              only: Callable[[str], bool] | None = None) -> list[BlockResult]:
    rng = np.random.default_rng(seed)
    cases = {**_op_cases(rng), **_model_cases(rng), **_end_to_end_cases(seed)}
    results = []
    for name, (fn, params) in cases.items():
        if only is not None and not only(name):
            continue
        t0 = time.perf_counter()
        err = grad_check_params(fn, params, h=h, max_coords=max_coords, seed=seed)
        results.append(BlockResult(name, err, time.perf_counter() - t0))
    return results
