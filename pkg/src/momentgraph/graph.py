"""Word-conditioned visual graph.

Word nodes are fused with their word-specific video summaries once; frame
nodes are then refined T times by attention-weighted messages from those
fused word nodes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from . import tensor as T


@dataclass
class WcvgTrace:
    s_prime: list = field(default_factory=list)
    a_l: list = field(default_factory=list)
    a_frame: list = field(default_factory=list)
    V: list = field(default_factory=list)

    def __len__(self):
        return len(self.s_prime)


def init_wcvg_params(store, cfg):
    H = cfg.hidden
    store.uniform("wcvg.W1", (2 * H, H), 2 * H)
    store.uniform("wcvg.b1", (H,), 2 * H)
    names = ["wcvg.W2"] if cfg.tied_iterations else [f"wcvg.W2.{t}" for t in range(cfg.T)]
    for name in names:
        store.uniform(name, (2 * H, H), 2 * H)
        store.uniform(name.replace("W2", "b2"), (H,), 2 * H)


def _w2_names(params, t):
    if "wcvg.W2" in params:
        return "wcvg.W2", "wcvg.b2"
    return f"wcvg.W2.{t}", f"wcvg.b2.{t}"


def _match(x, ref):
    return x if x.shape == ref.shape else T.broadcast_to(x, ref.shape)


def build_visual_semantic_nodes(W, f, params):
    """w'_j = ReLU(W1 [w_j ; f_j] + b1)."""
    joint = T.concat([_match(W, f), f], axis=-1)
    return T.relu(T.matmul(joint, params["wcvg.W1"]) + params["wcvg.b1"])


def message_passing_step(V_prev, w_prime, params, t=0, trace=None):
    s_prime = T.cosine_matrix(V_prev, w_prime)
    a_l = T.row_softmax(s_prime, "rows")
    message = T.matmul(a_l, w_prime)
    W2, b2 = _w2_names(params, t)
    V_next = T.matmul(T.concat([_match(V_prev, message), message], axis=-1), params[W2]) + params[b2]
    if trace is not None:
        trace.s_prime.append(s_prime)
        trace.a_l.append(a_l)
        with T.no_grad():
            trace.a_frame.append(T.row_softmax(s_prime.detach(), "cols"))
        trace.V.append(V_next)
    return V_next


def run_wcvg(V0, W, f, params, iterations):
    """Returns (V^T, trace); zero iterations hand back V0 itself."""
    trace = WcvgTrace()
    if iterations == 0:
        return V0, trace
    w_prime = build_visual_semantic_nodes(W, f, params)
    V = V0
    for t in range(iterations):
        V = message_passing_step(V, w_prime, params, t, trace)
    return V, trace
