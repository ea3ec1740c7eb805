import numpy as np

from symphony_moe.graph import AdjacencyState
from symphony_moe.layer import ExpertSet, MoELayer, RoutingMode, mse_loss
from symphony_moe.router import RouterParams, topk_margin
from symphony_moe.theory import random_sinkhorn_adjacency

FD_STEP = 1e-5


def random_layer(rng, mode="Baseline", kind="linear", renormalize=False, n=4, d=3, m=4, h=5, out=2, k=2,
                 aux_weight=0.01):
    experts = ExpertSet.init(m, d, h, out, rng)
    experts.b1[...] = rng.normal(0, 0.3, size=experts.b1.shape)
    experts.b2[...] = rng.normal(0, 0.3, size=experts.b2.shape)
    router = RouterParams.init(kind, m, d, rng, scale=1.0)
    if kind == "linear":
        router.b[...] = rng.normal(0, 0.5, size=m)
    adj = None
    if RoutingMode(mode) is RoutingMode.SYMPHONY:
        adj = AdjacencyState.from_matrix(random_sinkhorn_adjacency(m, rng), frozen=True)
    layer = MoELayer(experts, router, k, mode, adj, renormalize, aux_weight)
    return layer, rng.normal(size=(n, d)), rng.normal(size=(n, out))


def away_from_kinks(layer, x, tol=1e-3) -> bool:
    """TopK margins of the routing gate and every used ReLU pre-activation exceed ``tol``."""
    out = layer.forward(x)
    if layer.k < layer.n_experts and topk_margin(out.smoothed_gates, layer.k).min() <= tol:
        return False
    for entry in layer._cache["experts"]:
        if entry is not None and np.abs(entry[2]).min() <= tol:
            return False
    return True


def total_loss(layer, x, target):
    out = layer.forward(x)
    return mse_loss(out.y, target)[0] + layer.aux_weight * out.aux_loss


def fd_relative_error(layer, x, target, h=FD_STEP) -> float:
    """Worst per-array relative error (infinity norms) of analytic vs. central-difference gradients."""
    out = layer.forward(x)
    _, dy = mse_loss(out.y, target)
    grads, dx = layer.backward(dy)
    arrays = dict(layer.parameters())
    arrays["x"] = x
    analytic = dict(grads)
    analytic["x"] = dx
    worst = 0.0
    for name, arr in arrays.items():
        num = np.zeros_like(arr)
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = arr[i]
            arr[i] = old + h
            up = total_loss(layer, x, target)
            arr[i] = old - h
            down = total_loss(layer, x, target)
            arr[i] = old
            num[i] = (up - down) / (2 * h)
        scale = max(np.abs(num).max(), np.abs(analytic[name]).max(), 1e-8)
        worst = max(worst, float(np.abs(num - analytic[name]).max() / scale))
    return worst


def gradient_instances(mode, count, seed=0, **kw):
    """Yield ``count`` random (layer, x, target) instances away from TopK ties and ReLU kinks."""
    rng = np.random.default_rng(seed)
    made = 0
    while made < count:
        layer, x, t = random_layer(rng, mode=mode, **kw)
        if away_from_kinks(layer, x):
            made += 1
            yield layer, x, t


# --- acceptance verdict lines ----------------------------------------------

VERDICTS: dict[int, str] = {}


def record_verdict(number: int, ok: bool, detail: str) -> None:
    VERDICTS[number] = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    print(VERDICTS[number])


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(VERDICTS):
        terminalreporter.write_line(VERDICTS[n])
