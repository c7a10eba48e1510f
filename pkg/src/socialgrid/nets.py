"""Agent network: shared conv+FC+LSTM trunk with policy, value, and
state-prediction heads.

Layer sizes (21x21x3 observations, 7 actions):

  trunk:  Conv(3->32, 3x3, s3) -> Conv(32->64, 3x3, s1) -> Conv(64->64, 3x3, s1)
          -> flatten 576 -> FC 576->192 (tanh) -> LSTM 192->192
  value:  FC 192->64 -> 64->64 -> 64->1   (tanh hidden layers, linear output)
  policy: FC 192->64 -> 64->64 -> 64->7   (tanh hidden layers, softmax over logits)
  aux:    concat(emb, one-hot action) 199 -> FC 199->576 (tanh) -> reshape 64x3x3
          -> DeConv(64->64, s1) -> DeConv(64->32, s1) -> DeConv(32->3, s3)

Convolutions and transposed convolutions use leaky ReLU. With the aux head
present the network has exactly 668,555 trainable parameters; the LSTM uses
two bias vectors. Weights initialize uniform in +-1/sqrt(fan_in), biases to
zero except the forget-gate bias at +1.

AuxPred and AuxRec share this architecture; only the regression target
differs (next observation vs current observation). NoAux builds no aux head.
"""

from enum import Enum

import numpy as np

from . import autodiff as ad
from .gridworld import N_ACTIONS, OBS_SIZE

__all__ = ["AuxMode", "AgentNetwork", "HiddenState", "build_network",
           "sample_action", "one_hot", "obs_to_chw",
           "EXPECTED_PARAM_COUNT_AUX", "EXPECTED_PARAM_COUNT_NOAUX"]

EMBED = 192
FLAT = 576  # 64 * 3 * 3 after the conv stack

EXPECTED_PARAM_COUNT_AUX = 668555
EXPECTED_PARAM_COUNT_NOAUX = 497096


class AuxMode(str, Enum):
    PRED = "pred"   # predict the next observation
    REC = "rec"     # reconstruct the current observation
    NONE = "none"   # no auxiliary head


def obs_to_chw(obs):
    """(..., 21, 21, 3) float image -> contiguous (..., 3, 21, 21)."""
    return np.ascontiguousarray(np.moveaxis(np.asarray(obs), -1, -3))


def one_hot(actions, n=N_ACTIONS):
    actions = np.asarray(actions, dtype=np.intp)
    out = np.zeros(actions.shape + (n,))
    np.put_along_axis(out, actions[..., None], 1.0, axis=-1)
    return out


class HiddenState:
    """LSTM carry (h, c); zeros at episode start."""

    __slots__ = ("h", "c")

    def __init__(self, h=None, c=None, batch=None):
        shape = (EMBED,) if batch is None else (batch, EMBED)
        self.h = np.zeros(shape) if h is None else h
        self.c = np.zeros(shape) if c is None else c


class AgentNetwork:
    """Initialization is variance-preserving: He-uniform (sqrt(6/fan_in)) for
    the leaky-ReLU conv/deconv layers, Glorot uniform for tanh FC layers,
    U(+-1/sqrt(hidden)) for the LSTM. Biases start at zero except the
    forget gate at +1."""

    def __init__(self, mode, rng):
        self.mode = AuxMode(mode)
        self._params = {}
        rng = rng or np.random.default_rng(0)

        def he(name, shape, fan_in):
            self._bounded(rng, name, shape, np.sqrt(6.0 / fan_in))

        def glorot(name, shape, fan_in, fan_out):
            self._bounded(rng, name, shape, np.sqrt(6.0 / (fan_in + fan_out)))

        he("conv1_k", (32, 3, 3, 3), 3 * 9)
        self._zeros("conv1_b", (32,))
        he("conv2_k", (64, 32, 3, 3), 32 * 9)
        self._zeros("conv2_b", (64,))
        he("conv3_k", (64, 64, 3, 3), 64 * 9)
        self._zeros("conv3_b", (64,))
        glorot("fc_W", (EMBED, FLAT), FLAT, EMBED)
        self._zeros("fc_b", (EMBED,))
        self._bounded(rng, "lstm_Wih", (4 * EMBED, EMBED), 1.0 / np.sqrt(EMBED))
        self._bounded(rng, "lstm_Whh", (4 * EMBED, EMBED), 1.0 / np.sqrt(EMBED))
        b_ih = np.zeros(4 * EMBED)
        b_ih[EMBED:2 * EMBED] = 1.0  # forget-gate bias
        self._params["lstm_bih"] = ad.parameter(b_ih, name="lstm_bih")
        self._zeros("lstm_bhh", (4 * EMBED,))

        for head in ("value", "policy"):
            out = 1 if head == "value" else N_ACTIONS
            glorot(f"{head}_W1", (64, EMBED), EMBED, 64)
            self._zeros(f"{head}_b1", (64,))
            glorot(f"{head}_W2", (64, 64), 64, 64)
            self._zeros(f"{head}_b2", (64,))
            glorot(f"{head}_W3", (out, 64), 64, out)
            self._zeros(f"{head}_b3", (out,))

        if self.mode != AuxMode.NONE:
            glorot("aux_W", (FLAT, EMBED + N_ACTIONS), EMBED + N_ACTIONS, FLAT)
            self._zeros("aux_b", (FLAT,))
            he("deconv1_k", (64, 64, 3, 3), 64 * 9)
            self._zeros("deconv1_b", (64,))
            he("deconv2_k", (64, 32, 3, 3), 64 * 9)
            self._zeros("deconv2_b", (32,))
            he("deconv3_k", (32, 3, 3, 3), 32 * 9)
            self._zeros("deconv3_b", (3,))

    def _bounded(self, rng, name, shape, bound):
        self._params[name] = ad.parameter(rng.uniform(-bound, bound, size=shape),
                                          name=name)

    def _zeros(self, name, shape):
        self._params[name] = ad.parameter(np.zeros(shape), name=name)

    # -- parameter access ---------------------------------------------------

    def parameters(self):
        """(name, Tensor) pairs in declaration order."""
        return list(self._params.items())

    def param_list(self):
        return list(self._params.values())

    def param(self, name):
        return self._params[name]

    @property
    def param_count(self):
        return sum(p.size for p in self._params.values())

    def trainable_subset(self, include_heads=("value", "policy", "aux")):
        """Parameters of the trunk plus the named heads (for BC: trunk+policy)."""
        keep = []
        for name, p in self._params.items():
            head = name.split("_")[0]
            if head in ("conv1", "conv2", "conv3", "fc", "lstm"):
                keep.append(p)
            elif head in ("value", "policy"):
                if head in include_heads:
                    keep.append(p)
            elif "aux" in include_heads:
                keep.append(p)
        return keep

    def descriptor(self):
        return {"mode": self.mode.value,
                "params": [[n, list(p.shape)] for n, p in self.parameters()]}

    # -- forward ------------------------------------------------------------

    def trunk_forward(self, obs, hidden):
        """obs (B,3,21,21) or (3,21,21) -> (embedding, new HiddenState)."""
        P = self._params
        x = ad.constant(obs) if not isinstance(obs, ad.Tensor) else obs
        if x.data.shape[-3:] != (3, OBS_SIZE, OBS_SIZE):
            raise ValueError(f"expected (...,3,{OBS_SIZE},{OBS_SIZE}), got {x.data.shape}")
        single = x.data.ndim == 3
        x = ad.leaky_relu(ad.conv2d_forward(x, P["conv1_k"], P["conv1_b"], stride=3))
        x = ad.leaky_relu(ad.conv2d_forward(x, P["conv2_k"], P["conv2_b"], stride=1))
        x = ad.leaky_relu(ad.conv2d_forward(x, P["conv3_k"], P["conv3_b"], stride=1))
        x = ad.reshape(x, (FLAT,) if single else (x.data.shape[0], FLAT))
        x = ad.tanh(ad.linear_forward(x, P["fc_W"], P["fc_b"]))
        h = hidden.h if isinstance(hidden.h, ad.Tensor) else ad.constant(hidden.h)
        c = hidden.c if isinstance(hidden.c, ad.Tensor) else ad.constant(hidden.c)
        h_new, c_new = ad.lstm_step(x, h, c, P["lstm_Wih"], P["lstm_Whh"],
                                    P["lstm_bih"], P["lstm_bhh"])
        return h_new, HiddenState(h_new, c_new)

    def _mlp(self, head, emb):
        P = self._params
        x = ad.tanh(ad.linear_forward(emb, P[f"{head}_W1"], P[f"{head}_b1"]))
        x = ad.tanh(ad.linear_forward(x, P[f"{head}_W2"], P[f"{head}_b2"]))
        return ad.linear_forward(x, P[f"{head}_W3"], P[f"{head}_b3"])

    def policy_logits(self, emb):
        return self._mlp("policy", emb)

    def value(self, emb):
        out = self._mlp("value", emb)
        shape = () if out.data.ndim == 1 else (out.data.shape[0],)
        return ad.reshape(out, shape)

    def aux_forward(self, emb, actions):
        """Decode a (B,3,21,21) image from the embedding and the one-hot action."""
        if self.mode == AuxMode.NONE:
            raise RuntimeError("auxiliary head not built in NoAux mode")
        P = self._params
        oh = ad.constant(one_hot(actions))
        x = ad.concat([emb, oh], axis=-1)
        x = ad.tanh(ad.linear_forward(x, P["aux_W"], P["aux_b"]))
        single = x.data.ndim == 1
        x = ad.reshape(x, (64, 3, 3) if single else (x.data.shape[0], 64, 3, 3))
        x = ad.leaky_relu(ad.deconv2d_forward(x, P["deconv1_k"], P["deconv1_b"], stride=1))
        x = ad.leaky_relu(ad.deconv2d_forward(x, P["deconv2_k"], P["deconv2_b"], stride=1))
        x = ad.leaky_relu(ad.deconv2d_forward(x, P["deconv3_k"], P["deconv3_b"], stride=3))
        return x

    # -- raw state ------------------------------------------------------------

    def get_flat(self):
        return np.concatenate([p.data.reshape(-1) for p in self._params.values()])

    def set_flat(self, flat):
        i = 0
        for p in self._params.values():
            n = p.size
            p.data[...] = flat[i:i + n].reshape(p.shape)
            i += n
        if i != flat.size:
            raise ValueError("flat parameter vector has the wrong length")

    def snapshot(self):
        return {n: p.data.copy() for n, p in self._params.items()}

    def restore(self, snap):
        for n, p in self._params.items():
            p.data[...] = snap[n]


def build_network(mode, rng=None):
    """Allocate a fresh network; the aux-mode parameter count is asserted."""
    net = AgentNetwork(mode, rng)
    if net.mode != AuxMode.NONE:
        assert net.param_count == EXPECTED_PARAM_COUNT_AUX, net.param_count
    return net


def sample_action(logits, rng, greedy=False):
    """Categorical draw from softmax(logits); returns (action, log_prob)."""
    z = logits.data if isinstance(logits, ad.Tensor) else np.asarray(logits)
    if z.shape != (N_ACTIONS,):
        raise ValueError(f"expected {N_ACTIONS} logits, got {z.shape}")
    if not np.all(np.isfinite(z)):
        raise ValueError("non-finite logits")
    z = z - z.max()
    logp = z - np.log(np.exp(z).sum())
    if greedy:
        a = int(np.argmax(z))
    else:
        p = np.exp(logp)
        a = int(np.searchsorted(np.cumsum(p), rng.random(), side="right"))
        a = min(a, N_ACTIONS - 1)
    return a, float(logp[a])
