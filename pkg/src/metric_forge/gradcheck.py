"""Finite-difference oracle for the analytic gradients.

A :class:`GradProblem` bundles continuous inputs, a function returning
``(value, {name: grad})`` and any frozen discrete state (mining masks, top-K
selections). :func:`check_problem` compares the analytic gradients against
central differences; :func:`check_all` runs a registry over several seeds.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .core import EmbeddingBatch, l2_normalize_rows
from .errors import NonFiniteLoss
from . import pair_losses as pl
from . import proxy_losses as px
from . import regularizers as rg

DEFAULT_H = 1e-6
ABS_FLOOR = 1e-8


def finite_diff(loss_fn: Callable[..., float], inputs: Sequence[np.ndarray], h: float = DEFAULT_H) -> list:
    """Central-difference gradient of ``loss_fn(*inputs)`` for every input.

    Raises:
        NonFiniteLoss: if the loss is not finite at a perturbed point.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    work = [np.array(x, dtype=np.float64, copy=True) for x in inputs]
    grads = []
    for x in work:
        g = np.zeros_like(x)
        flat, gflat = x.reshape(-1), g.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + h
            up = float(loss_fn(*work))
            flat[k] = orig - h
            down = float(loss_fn(*work))
            flat[k] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise NonFiniteLoss(f"loss not finite when perturbing coordinate {k}")
            gflat[k] = (up - down) / (2.0 * h)
        grads.append(g)
    return grads


@dataclass
class GradReport:
    name: str
    seed: int | None
    max_abs_error: float
    max_rel_error: float
    worst_coordinate: tuple | None
    passed: bool
    h: float
    tolerance: float
    excluded: int = 0
    note: str = ""

    def row(self) -> str:
        worst = "-" if self.worst_coordinate is None else "%s[%d,%d]" % self.worst_coordinate
        status = "ok" if self.passed else "FAIL"
        return f"{self.name:<22} {str(self.seed):>4} {self.max_rel_error:10.3e} {self.max_abs_error:10.3e} {worst:<18} {status}"


@dataclass
class GradProblem:
    """Inputs plus a value-and-gradient function for one loss instance.

    ``value_and_grad(**inputs)`` returns ``(value, {name: grad})``.
    ``hinge_rows(**inputs)`` (optional) returns ``(hinge_args, {name: rows})``
    pairs; rows tied to a hinge argument within ``10 h`` of its kink are
    excluded from the comparison.
    """

    name: str
    inputs: dict
    value_and_grad: Callable
    hinge_rows: Callable | None = None

    def value(self, *arrays) -> float:
        return self.value_and_grad(**dict(zip(self.inputs, arrays)))[0]


def compare(
    analytic: Mapping[str, np.ndarray],
    numeric: Mapping[str, np.ndarray],
    tolerance: float,
    h: float = DEFAULT_H,
    name: str = "",
    seed=None,
    exclude: Mapping[str, set] | None = None,
) -> GradReport:
    """Build a report from matching analytic and numeric gradient blocks.

    For each block the relative error is ``max|a - n| / max(|a|, |n|, 1e-8)``
    with ``|.|`` the largest magnitude in the block, so central-difference
    roundoff on coordinates many orders below the block scale is not
    mistaken for a wrong gradient. A block whose analytic and numeric
    entries are all below ``1e-8`` passes outright. The worst coordinate is
    the one with the largest absolute error.
    """
    exclude = exclude or {}
    max_abs = max_rel = 0.0
    worst = None
    n_excluded = 0
    for key, a in analytic.items():
        a = np.atleast_2d(np.asarray(a, dtype=np.float64))
        n = np.atleast_2d(np.asarray(numeric[key], dtype=np.float64))
        if a.shape != n.shape:
            raise ValueError(f"gradient block {key!r}: shape {a.shape} vs {n.shape}")
        keep = np.ones(a.shape, dtype=bool)
        for r in exclude.get(key, ()):
            keep[r] = False
        n_excluded += int((~keep).sum())
        if not keep.any():
            continue
        err = np.where(keep, np.abs(a - n), 0.0)
        scale = max(np.abs(a[keep]).max(), np.abs(n[keep]).max())
        rel = 0.0 if scale < ABS_FLOOR else float(err.max()) / max(scale, ABS_FLOOR)
        max_abs = max(max_abs, float(err.max()))
        if worst is None or rel > max_rel:
            max_rel = max(max_rel, rel)
            r, c = np.unravel_index(int(np.argmax(err)), err.shape)
            worst = (key, int(r), int(c))
    note = f"{n_excluded} coordinates near a hinge kink excluded" if n_excluded else ""
    return GradReport(name, seed, max_abs, max_rel, worst, max_rel <= tolerance, h, tolerance, n_excluded, note)


def check_problem(problem: GradProblem, tolerance: float = 1e-4, h: float = DEFAULT_H, seed=None) -> GradReport:
    """Compare a problem's analytic gradients to central differences."""
    names = list(problem.inputs)
    arrays = [problem.inputs[k] for k in names]
    _, analytic = problem.value_and_grad(**problem.inputs)
    numeric = dict(zip(names, finite_diff(problem.value, arrays, h)))
    exclude: dict[str, set] = {}
    if problem.hinge_rows is not None:
        for arg, rows in problem.hinge_rows(**problem.inputs):
            if abs(arg) <= 10 * h:
                for key, rr in rows.items():
                    exclude.setdefault(key, set()).update(int(r) for r in rr)
    return compare({k: analytic[k] for k in names}, numeric, tolerance, h, problem.name, seed, exclude)


def check_all(
    losses: Mapping[str, Callable[[np.random.Generator], GradProblem]],
    seeds: Sequence[int],
    tolerance: float = 1e-4,
    h: float = DEFAULT_H,
) -> list[GradReport]:
    """Run every registered problem builder once per seed.

    Failures (including exceptions raised while checking) are reported,
    never raised.
    """
    reports = []
    for name, build in losses.items():
        for seed in seeds:
            try:
                problem = build(np.random.default_rng(seed))
                report = check_problem(problem, tolerance, h, seed)
                report.name = name
            except Exception as exc:  # reported, not thrown
                report = GradReport(name, seed, np.inf, np.inf, None, False, h, tolerance, note=repr(exc))
            reports.append(report)
    return reports


def format_table(reports: Sequence[GradReport]) -> str:
    header = f"{'loss':<22} {'seed':>4} {'max_rel':>10} {'max_abs':>10} {'worst':<18} status"
    return "\n".join([header] + [r.row() for r in reports])


# -- registry ----------------------------------------------------------------


def _unit(rng, n, d):
    return l2_normalize_rows(rng.standard_normal((n, d)))


def _balanced_labels(rng, n_classes, per_class):
    return rng.permutation(np.repeat(np.arange(n_classes), per_class))


def _vector_problem(name, fn, n_args, d=5, unit=True, **kw):
    def build(rng):
        vecs = _unit(rng, n_args, d) if unit else rng.standard_normal((n_args, d))
        keys = ["f_a", "f_p", "f_n"][:n_args] if n_args == 3 else ["f_i", "f_j"]
        inputs = {k: vecs[i] for i, k in enumerate(keys)}

        def vg(**xs):
            out = fn(*[xs[k] for k in keys], **kw)
            return out.value, {k: out.grad_embeddings[i] for i, k in enumerate(keys)}

        def hinge(**xs):
            out = fn(*[xs[k] for k in keys], **kw)
            return [(a, {k: [0] for k in keys}) for a in out.aux.get("hinge_args", [])]

        return GradProblem(name, inputs, vg, hinge)

    return build


def _contrastive(rng):
    same = bool(rng.integers(2))
    build = _vector_problem("contrastive", pl.contrastive_loss, 2, unit=False, same_class=same, alpha=4.0)
    return build(rng)


def _batch_problem(name, fn, labels_fn, d=6, proxies=None, hinge_fn=None):
    """Problem over an embedding batch (and optionally proxies)."""

    def build(rng):
        labels = labels_fn(rng)
        f = _unit(rng, len(labels), d)
        inputs = {"embeddings": f}
        if proxies is not None:
            inputs["proxies"] = proxies(rng, d)
        state = fn.prepare(f, labels, inputs.get("proxies")) if hasattr(fn, "prepare") else None

        def vg(**xs):
            out = fn(EmbeddingBatch(xs["embeddings"], labels), xs.get("proxies"), state)
            grads = {"embeddings": out.grad_embeddings}
            if "proxies" in xs:
                grads["proxies"] = out.grad_proxies
            return out.value, grads

        hinge = None
        if hinge_fn is not None:

            def hinge(**xs):
                return hinge_fn(xs["embeddings"], labels)

        return GradProblem(name, inputs, vg, hinge)

    return build


class _Frozen:
    """Adapter: freeze discrete state at the base point, then evaluate."""

    def __init__(self, prepare, call):
        self.prepare = prepare
        self._call = call

    def __call__(self, batch, proxies, state):
        return self._call(batch, proxies, state)


def _triplet_hinges(f, labels, alpha=0.5, gamma=None):
    a, p, n = pl.triplet_indices(labels)
    d = ((f[:, None] - f[None]) ** 2).sum(-1)
    args = d[a, p] - d[a, n] + alpha
    if gamma is not None:
        u, v = f[n] - f[a], f[p] - f[a]
        cos = (u * v).sum(-1) / np.linalg.norm(u, axis=-1) / np.linalg.norm(v, axis=-1)
        args = args + gamma * cos
    return [(x, {"embeddings": [i, j, k]}) for x, i, j, k in zip(args, a, p, n)]


def _ms_state(f, labels, _p):
    s = f @ f.T
    masks = pl.ms_mine(s, labels, 0.1)
    return masks, rg.hardest_positives(s, masks)


def _proxy_set(m=1, c=5):
    def make(rng, d):
        return px.init_proxies(c, d, m, rng).vectors

    return make


def _ps(vectors, m=1):
    c = vectors.shape[0] // m
    return px.ProxySet(vectors, np.repeat(np.arange(c), m), normalized=False)


def _lang_problem(rng):
    n = 6
    s_i = rng.uniform(-1, 1, (n, n))
    s_l = rng.uniform(-1, 1, (n, n))

    def vg(s_image):
        out = rg.language_distill_loss(s_image, s_l, 1.0)
        return out.value, {"s_image": out.grad_embeddings}

    return GradProblem("language_distill", {"s_image": s_i}, vg)


def _combined_problem(rng):
    labels = _balanced_labels(rng, 3, 3)
    f = _unit(rng, len(labels), 6)
    table = rg.synthetic_label_table(3, 8, seed=int(rng.integers(1 << 30)))
    masks = pl.ms_mine(f @ f.T, labels, 0.1)

    def vg(embeddings):
        batch = EmbeddingBatch(embeddings, labels)
        dml = pl.ms_loss(batch, masks, 2.0, 10.0, 0.5, check=False)
        lang = rg.language_loss_on_batch(batch, table, 1.0)
        out = rg.combine_with_language(dml, lang, 0.7)
        return out.value, {"embeddings": out.grad_embeddings}

    return GradProblem("ms+language", {"embeddings": f}, vg)


def default_registry() -> dict[str, Callable[[np.random.Generator], GradProblem]]:
    """Problem builders for every loss variant in the library."""
    two_per_class = lambda rng: _balanced_labels(rng, 3, 3)  # noqa: E731
    reg = {
        "contrastive": _contrastive,
        "triplet_euclidean": _vector_problem("triplet_euclidean", pl.triplet_loss_euclidean, 3, alpha=0.5),
        "triplet_cosine": _vector_problem(
            "triplet_cosine", pl.triplet_loss_cosine, 3, alpha=0.3, check=False
        ),
        "triplet_batch": _batch_problem(
            "triplet_batch",
            lambda b, p, s: pl.batch_triplet_loss(b, 0.5),
            two_per_class,
            hinge_fn=_triplet_hinges,
        ),
        "npair": _batch_problem(
            "npair",
            lambda b, p, s: pl.npair_loss(b, check=False),
            lambda rng: rng.permutation(np.repeat(np.arange(4), 2)),
        ),
        "ms": _batch_problem(
            "ms",
            _Frozen(_ms_state, lambda b, p, s: pl.ms_loss(b, s[0], 2.0, 50.0, 0.5, check=False)),
            lambda rng: _balanced_labels(rng, 2, 4),
            d=4,
        ),
        "nca": _batch_problem("nca", lambda b, p, s: px.nca_loss(b), two_per_class),
        "proxynca": _batch_problem(
            "proxynca", lambda b, p, s: px.proxynca_loss(b, _ps(p)), lambda rng: rng.integers(0, 5, 6), proxies=_proxy_set()
        ),
        "proxynca_pp": _batch_problem(
            "proxynca_pp",
            lambda b, p, s: px.proxynca_pp_loss(b, _ps(p), 0.5),
            lambda rng: rng.integers(0, 5, 6),
            proxies=_proxy_set(),
        ),
        "proxy_anchor": _batch_problem(
            "proxy_anchor",
            lambda b, p, s: px.proxy_anchor_loss(b, _ps(p), 32.0, 0.1),
            lambda rng: rng.integers(0, 5, 6),
            proxies=_proxy_set(),
        ),
        "proxygml": _batch_problem(
            "proxygml",
            _Frozen(
                lambda f, y, p: px.proxygml_select((f @ p.T).T, y, np.repeat(np.arange(3), 2), px.ProxyGmlConfig(3, 0.3, 2)),
                lambda b, p, s: px.proxygml_loss(b, _ps(p, 2), px.ProxyGmlConfig(3, 0.3, 2), selection=s),
            ),
            lambda rng: rng.integers(0, 3, 6),
            proxies=_proxy_set(m=2, c=3),
        ),
        "directed_triplet": _vector_problem("directed_triplet", rg.directed_triplet_loss, 3, alpha=0.5, gamma=1.0),
        "directed_triplet_batch": _batch_problem(
            "directed_triplet_batch",
            lambda b, p, s: rg.batch_directed_triplet_loss(b, 0.5, 1.0),
            two_per_class,
            hinge_fn=lambda f, y: _triplet_hinges(f, y, 0.5, 1.0),
        ),
        "directed_ms": _batch_problem(
            "directed_ms",
            _Frozen(
                _ms_state,
                lambda b, p, s: rg.directed_ms_loss(b, s[0], 2.0, 50.0, 0.5, 1.0, hardest=s[1], check=False),
            ),
            lambda rng: _balanced_labels(rng, 2, 4),
            d=4,
        ),
        "directed_proxynca": _batch_problem(
            "directed_proxynca",
            lambda b, p, s: rg.directed_proxynca_loss(b, _ps(p), 1.0),
            lambda rng: rng.integers(0, 5, 6),
            proxies=_proxy_set(),
        ),
        "language_distill": _lang_problem,
        "ms+language": _combined_problem,
    }
    return reg


def corrupt(build: Callable, scale: float = 1.5, block: str | None = None, index=(0, 0)):
    """Wrap a problem builder so one analytic gradient coordinate is wrong.

    Used for fault injection: the checker must flag ``index`` of ``block``.
    """

    def wrapped(rng):
        problem = build(rng)
        inner = problem.value_and_grad
        key = block or next(iter(problem.inputs))

        def vg(**xs):
            value, grads = inner(**xs)
            grads = {k: np.array(v, dtype=np.float64, copy=True) for k, v in grads.items()}
            g = np.atleast_2d(grads[key])
            g[index] = g[index] * scale + 1.0
            grads[key] = g.reshape(np.shape(grads[key]))
            return value, grads

        return GradProblem(problem.name, problem.inputs, vg, problem.hinge_rows)

    return wrapped
