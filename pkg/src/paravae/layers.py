"""Differentiable layers: embeddings, LSTM stacks, the Gaussian head, KL."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Node
from .errors import EmptySequenceError, ShapeMismatchError

GATES = ("i", "f", "o", "g")


def xavier_uniform(rng, fan_in, fan_out):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def init_lstm_cell(rng, input_dim, hidden_dim, prefix=""):
    """Xavier-uniform weights, forget bias 1.0, other biases zero."""
    out = {}
    for gate in GATES:
        out[f"{prefix}W_{gate}"] = xavier_uniform(rng, input_dim, hidden_dim)
    for gate in GATES:
        out[f"{prefix}U_{gate}"] = xavier_uniform(rng, hidden_dim, hidden_dim)
    for gate in GATES:
        bias = np.ones(hidden_dim) if gate == "f" else np.zeros(hidden_dim)
        out[f"{prefix}b_{gate}"] = bias
    return out


def init_lstm_stack(rng, input_dim, hidden_dim, num_layers, prefix=""):
    out = {}
    for layer in range(num_layers):
        in_dim = input_dim if layer == 0 else hidden_dim
        out.update(init_lstm_cell(rng, in_dim, hidden_dim, f"{prefix}l{layer}."))
    return out


def init_linear(rng, in_dim, out_dim, prefix=""):
    return {f"{prefix}W": xavier_uniform(rng, in_dim, out_dim), f"{prefix}b": np.zeros(out_dim)}


def init_gaussian_head(rng, in_dim, latent_dim, prefix=""):
    return {
        f"{prefix}W_mu": xavier_uniform(rng, in_dim, latent_dim),
        f"{prefix}b_mu": np.zeros(latent_dim),
        f"{prefix}W_logvar": xavier_uniform(rng, in_dim, latent_dim),
        f"{prefix}b_logvar": np.zeros(latent_dim),
    }


def embed(table: Node, tokens) -> Node:
    """Gather rows of ``table``; ``tokens`` may be any integer array."""
    return ad.embedding(table, np.asarray(tokens, dtype=np.int64))


def linear(params, x: Node, prefix="") -> Node:
    return ad.matmul(x, params[f"{prefix}W"]) + params[f"{prefix}b"]


class LstmCell:
    """One LSTM layer with its gate blocks concatenated in [i, f, o, g] order.

    The concatenation happens once per tape, so unrolling over time costs two
    matmuls per step instead of eight.
    """

    def __init__(self, params, prefix=""):
        w = [params[f"{prefix}W_{g}"] for g in GATES]
        u = [params[f"{prefix}U_{g}"] for g in GATES]
        b = [params[f"{prefix}b_{g}"] for g in GATES]
        shapes = {x.shape for x in w}, {x.shape for x in u}, {x.shape for x in b}
        if any(len(s) != 1 for s in shapes):
            raise ShapeMismatchError("LSTM gate blocks must share identical shapes")
        self.input_dim, self.hidden_dim = w[0].shape
        if u[0].shape != (self.hidden_dim, self.hidden_dim) or b[0].shape != (self.hidden_dim,):
            raise ShapeMismatchError("LSTM recurrent weights/biases do not match hidden size")
        self.W = ad.concat(w)
        self.U = ad.concat(u)
        self.b = ad.concat(b)

    def step(self, x: Node, h: Node, c: Node):
        if x.shape[-1] != self.input_dim:
            raise ShapeMismatchError(f"LSTM input width {x.shape[-1]} != {self.input_dim}")
        if h.shape[-1] != self.hidden_dim or c.shape != h.shape:
            raise ShapeMismatchError("LSTM state does not match hidden size")
        H = self.hidden_dim
        gates = ad.matmul(x, self.W) + ad.matmul(h, self.U) + self.b
        i = ad.sigmoid(ad.slice_(gates, 0, H))
        f = ad.sigmoid(ad.slice_(gates, H, 2 * H))
        o = ad.sigmoid(ad.slice_(gates, 2 * H, 3 * H))
        g = ad.tanh(ad.slice_(gates, 3 * H, 4 * H))
        c_new = f * c + i * g
        h_new = o * ad.tanh(c_new)
        return h_new, c_new


def lstm_cell_step(params, x: Node, h: Node, c: Node, prefix=""):
    """Single LSTM step: returns ``(h', c')``."""
    return LstmCell(params, prefix).step(x, h, c)


def stack_cells(params, num_layers, prefix=""):
    return [LstmCell(params, f"{prefix}l{k}.") for k in range(num_layers)]


def zero_state(tape, cells, batch_shape):
    return [
        (tape.constant(np.zeros(batch_shape + (c.hidden_dim,))),
         tape.constant(np.zeros(batch_shape + (c.hidden_dim,))))
        for c in cells
    ]


def lstm_encode(cells, inputs, init_state=None, lengths=None):
    """Unroll a stack of cells over ``inputs`` (one node per time step).

    ``lengths`` (batched inputs only) freezes each row's state once its
    sequence has ended, so padded rows end in the same state as an unpadded
    run.  Returns ``(top_layer_outputs, final_state)`` with
    ``final_state[layer] == (h, c)``.
    """
    if not inputs:
        raise EmptySequenceError("cannot encode an empty sequence")
    tape = inputs[0].tape
    batch_shape = inputs[0].shape[:-1]
    state = list(init_state) if init_state is not None else zero_state(tape, cells, batch_shape)
    if len(state) != len(cells):
        raise ShapeMismatchError(f"expected {len(cells)} initial states, got {len(state)}")
    if lengths is not None:
        lengths = np.asarray(lengths)
    outputs = []
    for t, x in enumerate(inputs):
        on = off = None
        if lengths is not None and (lengths <= t).any():
            keep = np.repeat((lengths > t).astype(np.float64)[:, None], cells[0].hidden_dim, 1)
            on, off = tape.constant(keep), tape.constant(1.0 - keep)
        layer_input = x
        for k, cell in enumerate(cells):
            h, c = state[k]
            h_new, c_new = cell.step(layer_input, h, c)
            if on is not None:
                h_new = h_new * on + h * off
                c_new = c_new * on + c * off
            state[k] = (h_new, c_new)
            layer_input = h_new
        outputs.append(layer_input)
    return outputs, state


def gaussian_head(params, x: Node, prefix=""):
    """Mean and log-variance of the diagonal Gaussian posterior."""
    mu = ad.matmul(x, params[f"{prefix}W_mu"]) + params[f"{prefix}b_mu"]
    logvar = ad.matmul(x, params[f"{prefix}W_logvar"]) + params[f"{prefix}b_logvar"]
    return mu, logvar


@dataclass
class LatentCode:
    z: Node
    mu: Node
    logvar: Node


def reparameterize(mu: Node, logvar: Node, noise) -> LatentCode:
    """z = mu + exp(logvar / 2) * noise, with ``noise`` held constant."""
    if mu.shape != logvar.shape:
        raise ShapeMismatchError(f"mu {mu.shape} and logvar {logvar.shape} differ")
    eps = noise if isinstance(noise, Node) else mu.tape.constant(noise)
    if eps.shape != mu.shape:
        raise ShapeMismatchError(f"noise shape {eps.shape} != {mu.shape}")
    std = ad.exp(ad.scale(logvar, 0.5))
    return LatentCode(z=mu + std * eps, mu=mu, logvar=logvar)


def kl_gaussian(mu: Node, logvar: Node) -> Node:
    """KL(N(mu, exp(logvar)) || N(0, I)) summed over all entries."""
    if mu.shape != logvar.shape:
        raise ShapeMismatchError(f"mu {mu.shape} and logvar {logvar.shape} differ")
    minus_one = mu.tape.constant(-np.ones(mu.shape))
    inner = mu * mu + ad.exp(logvar) - logvar + minus_one
    return ad.scale(ad.sum_(inner), 0.5)
