"""Self-verification suites: gradient checks, independent oracles, and
algebraic identities.  The oracles here deliberately share no code with the
paths they check (naive looped convolution, straight-from-the-equations
metrics)."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor
from .blocks import (EATBlock, GLIConfig, MDMSA, MSA, MSAConfig, MSRA,
                     MSRAConfig, gli_param_formula, wom_weights)
from .backbone import build_model, count_params_flops, micro_spec
from .gradcheck import grad_check
from .training import ConfusionCounts, compute_metrics, cross_entropy


@dataclass
class CheckResult:
    suite: str
    name: str
    passed: bool
    max_err: float
    detail: str = ""


# -- independent oracles ---------------------------------------------------------


def naive_conv2d(x: np.ndarray, w: np.ndarray, b: np.ndarray | None = None,
                 stride: int = 1, padding: int = 0, dilation: int = 1,
                 groups: int = 1) -> np.ndarray:
    """Direct six-loop convolution; the reference for the im2col path."""
    B, C, H, W = x.shape
    Co, Ci, kh, kw = w.shape
    assert Ci * groups == C
    Ho = (H + 2 * padding - dilation * (kh - 1) - 1) // stride + 1
    Wo = (W + 2 * padding - dilation * (kw - 1) - 1) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    out = np.zeros((B, Co, Ho, Wo), dtype=x.dtype)
    cog = Co // groups
    for bb in range(B):
        for co in range(Co):
            g = co // cog
            for oy in range(Ho):
                for ox in range(Wo):
                    acc = 0.0
                    for ci in range(Ci):
                        for ky in range(kh):
                            for kx in range(kw):
                                iy = oy * stride + ky * dilation
                                ix = ox * stride + kx * dilation
                                acc += (xp[bb, g * Ci + ci, iy, ix]
                                        * w[co, ci, ky, kx])
                    out[bb, co, oy, ox] = acc
    if b is not None:
        out += b.reshape(1, Co, 1, 1)
    return out


def metrics_reference(matrix: np.ndarray) -> dict:
    """Plain-python evaluation of the accuracy/recall/precision/F1 equations."""
    k = matrix.shape[0]
    total = int(matrix.sum())
    acc = (sum(int(matrix[i, i]) for i in range(k)) / total) if total else 0.0
    precisions, recalls, f1s, supports = [], [], [], []
    for c in range(k):
        tp = int(matrix[c, c])
        fp = sum(int(matrix[r, c]) for r in range(k)) - tp
        fn = sum(int(matrix[c, r]) for r in range(k)) - tp
        p = tp / (tp + fp) if tp + fp > 0 else 0.0
        r = tp / (tp + fn) if tp + fn > 0 else 0.0
        f1 = 2 * p * r / (p + r) if p + r > 0 else 0.0
        precisions.append(p)
        recalls.append(r)
        f1s.append(f1)
        supports.append(tp + fn)
    tot_sup = sum(supports)
    wts = [s / tot_sup for s in supports] if tot_sup else [0.0] * k
    return {
        "accuracy": acc,
        "macro_precision": math.fsum(precisions) / k,
        "macro_recall": math.fsum(recalls) / k,
        "macro_f1": math.fsum(f1s) / k,
        "weighted_precision": math.fsum(w * p for w, p in zip(wts, precisions)),
        "weighted_recall": math.fsum(w * r for w, r in zip(wts, recalls)),
        "weighted_f1": math.fsum(w * f for w, f in zip(wts, f1s)),
        "per_class_precision": precisions,
        "per_class_recall": recalls,
        "per_class_f1": f1s,
    }


# -- suites ------------------------------------------------------------------------


def _result(suite, name, err, tol, detail=""):
    return CheckResult(suite, name, bool(err < tol), float(err), detail)


def suite_gradcheck(quick: bool = False) -> list[CheckResult]:
    """Per-op finite-difference checks, then the exhaustive micro-model sweep."""
    T.set_precision(64)
    rng = np.random.default_rng(11)
    results = []

    def op_check(name, build, tol=1e-6):
        f, params = build(rng)
        rep = grad_check(f, params, h=1e-5, tol=tol)
        results.append(_result("gradcheck", name, rep.max_rel_err, tol,
                               detail=rep.worst().name))

    def make_conv(rng):
        x = Tensor(rng.standard_normal((2, 4, 6, 6)), requires_grad=True)
        w = Tensor(rng.standard_normal((4, 2, 3, 3)) * 0.5, requires_grad=True)
        b = Tensor(rng.standard_normal(4) * 0.1, requires_grad=True)
        return (lambda: (T.conv2d(x, w, b, stride=2, padding=1, groups=2)
                         ** 2).sum(),
                {"x": x, "w": w, "b": b})

    def make_linear(rng):
        x = Tensor(rng.standard_normal((3, 5)), requires_grad=True)
        w = Tensor(rng.standard_normal((4, 5)) * 0.5, requires_grad=True)
        b = Tensor(rng.standard_normal(4) * 0.1, requires_grad=True)
        return lambda: (T.linear(x, w, b) ** 2).sum(), {"x": x, "w": w, "b": b}

    def make_layernorm(rng):
        x = Tensor(rng.standard_normal((3, 6)), requires_grad=True)
        g = Tensor(rng.standard_normal(6), requires_grad=True)
        b = Tensor(rng.standard_normal(6), requires_grad=True)
        return (lambda: (T.layer_norm(x, g, b) ** 3).sum(),
                {"x": x, "gamma": g, "beta": b})

    def make_softmax(rng):
        x = Tensor(rng.standard_normal((4, 5)), requires_grad=True)
        c = Tensor(rng.standard_normal((4, 5)))
        return lambda: (T.softmax(x, axis=-1) * c).sum(), {"x": x}

    def make_gelu(rng):
        x = Tensor(np.array([-2.0, -0.5, 0.5, 2.0, 0.37, -1.2]),
                   requires_grad=True)
        return lambda: (T.gelu(x) ** 2).sum(), {"x": x}

    def make_bilinear(rng):
        x = Tensor(rng.standard_normal((1, 2, 5, 5)), requires_grad=True)
        # keep fractional parts well off the integer lattice, where the
        # interpolation kernel has corners and central differences lie
        base = rng.integers(0, 4, size=(1, 7, 2)).astype(float)
        coords = Tensor(base + rng.uniform(0.2, 0.8, size=(1, 7, 2)),
                        requires_grad=True)
        return (lambda: (T.bilinear_sample(x, coords) ** 2).sum(),
                {"x": x, "coords": coords})

    def make_attention(rng):
        msa = MSA(MSAConfig(embed_dim=6, heads=2), rng)
        x = Tensor(rng.standard_normal((2, 5, 6)), requires_grad=True)
        params = dict(msa.named_parameters())
        params["x"] = x
        return lambda: (msa.forward(x) ** 2).sum(), params

    op_check("conv2d", make_conv)
    op_check("linear", make_linear)
    op_check("layer_norm", make_layernorm)
    op_check("softmax", make_softmax)
    op_check("gelu", make_gelu)
    op_check("bilinear_sample", make_bilinear)
    op_check("attention", make_attention)

    # negative control: a deliberately corrupted gradient rule must be caught
    xbad = Tensor(rng.standard_normal(5), requires_grad=True)

    def corrupted():
        out = T.mul(xbad, xbad)
        orig = out._backward

        def bad_backward(g):
            xbad._accumulate(3.0 * g * xbad.data)  # wrong factor on purpose

        out._backward = bad_backward
        return out.sum()

    rep = grad_check(corrupted, {"x": xbad}, h=1e-5, tol=1e-6)
    results.append(CheckResult("gradcheck", "corrupted-rule-detected",
                               rep.max_rel_err > 1e-2, rep.max_rel_err))

    if not quick:
        model = build_model(micro_spec(), seed=5)
        rng2 = np.random.default_rng(7)
        images = Tensor(rng2.uniform(0, 1, size=(2, 3, 16, 16)))
        labels = np.array([0, 2])

        def loss_fn():
            return cross_entropy(model.forward(images), labels)

        rep = grad_check(loss_fn, dict(model.named_parameters()),
                         h=1e-5, tol=1e-4)
        results.append(_result("gradcheck", "micro-model-all-params",
                               rep.max_rel_err, 1e-4, detail=rep.worst().name))
    return results


def suite_oracle(n_metric_trials: int = 100) -> list[CheckResult]:
    T.set_precision(64)
    rng = np.random.default_rng(3)
    results = []
    worst = 0.0
    for k in (1, 2, 3):
        for stride in (1, 2, 3):
            for dilation in (1, 2, 3):
                for groups in (1, 2):
                    C = 4
                    x = rng.standard_normal((2, C, 8, 8))
                    w = rng.standard_normal((4, C // groups, k, k))
                    b = rng.standard_normal(4)
                    pad = dilation * (k - 1) // 2
                    ref = naive_conv2d(x, w, b, stride, pad, dilation, groups)
                    got = T.conv2d(Tensor(x), Tensor(w), Tensor(b),
                                   stride=stride, padding=pad,
                                   dilation=dilation, groups=groups).data
                    worst = max(worst, float(np.abs(ref - got).max()))
    results.append(_result("oracle", "conv2d-vs-naive", worst, 1e-12))

    worst = 0.0
    exact = True
    for _ in range(n_metric_trials):
        k = int(rng.integers(2, 8))
        m = rng.integers(0, 30, size=(k, k)).astype(np.int64)
        ref = metrics_reference(m)
        rep = compute_metrics(ConfusionCounts(m))
        pairs = [
            (ref["accuracy"], rep.accuracy),
            (ref["macro_precision"], rep.macro_precision),
            (ref["macro_recall"], rep.macro_recall),
            (ref["macro_f1"], rep.macro_f1),
            (ref["weighted_f1"], rep.weighted_f1),
        ]
        pairs += list(zip(ref["per_class_precision"],
                          [c.precision for c in rep.per_class]))
        pairs += list(zip(ref["per_class_recall"],
                          [c.recall for c in rep.per_class]))
        pairs += list(zip(ref["per_class_f1"], [c.f1 for c in rep.per_class]))
        for a, b in pairs:
            if a != b:
                exact = False
            worst = max(worst, abs(a - b))
    results.append(CheckResult("oracle", "metrics-vs-reference", exact, worst))
    return results


def suite_identity() -> list[CheckResult]:
    T.set_precision(64)
    rng = np.random.default_rng(17)
    results = []

    cfg = MSAConfig(embed_dim=8, heads=2)
    md = MDMSA(cfg, rng)
    x = Tensor(rng.standard_normal((2, 16, 8)))
    plain = md._attend(x, x)  # the vanilla-MSA path on the same parameters
    deformed, _ = md.forward(x, hw=(4, 4), modulation_override=1.0)
    results.append(_result("identity", "mdmsa-zeroed-equals-msa",
                           float(np.abs(plain.data - deformed.data).max()), 1e-6))
    off, _ = md.forward(x, hw=(4, 4), deform_enabled=False)
    bitwise = np.array_equal(plain.data, off.data)
    results.append(CheckResult("identity", "mdmsa-disabled-bitwise", bitwise,
                               0.0 if bitwise else float("inf")))

    block = EATBlock(
        MSRAConfig(in_channels=8, out_channels=8),
        GLIConfig(channels=8, split_ratio=0.5, heads=2),
        hidden_ratio=2.0, rng=rng)
    # zero every branch exit so each residual reduces to the identity
    for layer in (block.msra.fusion, block.gli.fusion, block.ffn.fc2):
        layer.weight.data[:] = 0.0
        layer.bias.data[:] = 0.0
    xin = Tensor(rng.standard_normal((2, 8, 6, 6)))
    out = block.forward(xin)
    results.append(_result("identity", "zero-branch-block-identity",
                           float(np.abs(out.data - xin.data).max()), 1e-12))
    return results


def suite_wom() -> list[CheckResult]:
    T.set_precision(64)
    rng = np.random.default_rng(23)
    results = []
    a = rng.standard_normal(5) * 3
    w = wom_weights(Tensor(a)).data
    pos = bool(np.all(w > 0))
    sum_err = abs(w.sum() - 1.0)
    shift = wom_weights(Tensor(a + 7.3)).data
    shift_err = float(np.abs(w - shift).max())
    results.append(CheckResult("wom", "weights-positive", pos,
                               0.0 if pos else 1.0))
    results.append(_result("wom", "weights-sum-to-one", sum_err, 1e-12))
    results.append(_result("wom", "shift-invariance", shift_err, 1e-12))

    cfg = MSRAConfig(in_channels=4, out_channels=4,
                     branch_specs=((3, 1, 1), (3, 1, 1), (3, 1, 1)))
    msra = MSRA(cfg, rng)
    for br in msra.branches[1:]:
        br.weight.data[:] = msra.branches[0].weight.data
        br.bias.data[:] = msra.branches[0].bias.data
    x = Tensor(rng.standard_normal((2, 4, 8, 8)))
    base = msra.forward(x).data
    worst = 0.0
    for _ in range(4):
        msra.alphas.data[:] = rng.standard_normal(3) * 4
        worst = max(worst, float(np.abs(msra.forward(x).data - base).max()))
    results.append(_result("wom", "msra-identical-branches-alpha-independent",
                           worst, 1e-10))
    return results


def suite_params() -> list[CheckResult]:
    T.set_precision(64)
    results = []
    model = build_model(micro_spec(), seed=1)
    report = count_params_flops(model)
    oracle = sum(p.data.size for _, p in model.named_parameters())
    ok = report.total_params == oracle
    results.append(CheckResult("params", "self-report-equals-enumeration", ok,
                               abs(report.total_params - oracle)))
    got = gli_param_formula(64, 32, 3)
    results.append(CheckResult("params", "gli-formula-64-32-3", got == 5600,
                               abs(got - 5600), detail=str(got)))
    deltas = [r for r in report.rows if r.gli_formula is not None]
    results.append(CheckResult("params", "gli-deltas-reported",
                               len(deltas) == 4, 0.0,
                               detail=",".join(str(r.gli_delta) for r in deltas)))
    return results


SUITES = {
    "gradcheck": suite_gradcheck,
    "oracle": suite_oracle,
    "identity": suite_identity,
    "wom": suite_wom,
    "params": suite_params,
}


def run_suites(names=None) -> list[CheckResult]:
    names = list(names) if names else list(SUITES)
    results = []
    for name in names:
        if name not in SUITES:
            raise ValueError(f"unknown suite {name!r}; have {sorted(SUITES)}")
        results.extend(SUITES[name]())
    return results
