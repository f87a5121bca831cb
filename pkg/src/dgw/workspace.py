"""Two-branch debiasing workspace model.

``e = [phi_i(x); phi_b(x)]`` feeds two independent workspace branches. Each
branch tokenizes ``e`` into ``L`` attribute tokens, extracts ``C`` concept
slots with slot attention (ASA), broadcasts the slots back onto the tokens
with cross attention (CA), and decodes a tentative feature ``e_tilde``.
Training mixes ``e`` with ``e_tilde``; prediction uses ``psi_i(e)`` only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .numcore import ContractError, ParamStore, Tensor

BRANCHES = ("i", "b")
ENCODER_HIDDEN = 100


@dataclass(frozen=True)
class ModelDims:
    """Sizes of every learnable block."""

    num_classes: int = 5
    side: int = 16
    feat_dim: int = 32  # D, both encoder halves together
    num_tokens: int = 8  # L
    num_slots: int = 2  # C
    slot_dim: int = 8  # d
    iters: int = 2  # T
    hidden: int = ENCODER_HIDDEN

    def __post_init__(self):
        if self.feat_dim % 2:
            raise ContractError(f"feature dim must be even, got {self.feat_dim}")
        if min(self.num_tokens, self.num_slots, self.slot_dim, self.iters) < 1:
            raise ContractError("L, C, d and T must all be >= 1")

    @property
    def in_dim(self) -> int:
        return 3 * self.side * self.side

    @property
    def half(self) -> int:
        return self.feat_dim // 2


@dataclass
class AttentionRecord:
    """Attention maps of one branch for one forward pass.

    ``a_asa`` is ``(B, C, L)`` after row renormalization and ``a_ca`` is
    ``(B, L, C)``. ``ca_logits`` keeps the pre-softmax scores so the entropy
    penalty can use a stable log-softmax.
    """

    a_asa: Tensor
    a_ca: Tensor
    ca_logits: Tensor
    branch_tag: str


def _uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    out = nc.matmul(x, w)
    return nc.add_rowvec(out, b) if b is not None else out


class DgwModel:
    """Encoders, two workspace branches and two classifiers in one ParamStore.

    Parameter names are dotted paths; everything under ``dgw_i.``/``dgw_b.``
    belongs to the workspace learning-rate group.
    """

    def __init__(self, dims: ModelDims, seed: int = 0):
        self.dims = dims
        self.params = ParamStore(seed)
        rng = nc.make_rng(seed, nc.STREAM_INIT)
        self._init_encoders(rng)
        for br in BRANCHES:
            self._init_branch(f"dgw_{br}", rng)
        self._init_classifiers(rng)

    # ------------------------------------------------------------ init

    def _dense(self, name: str, rng, fan_in: int, fan_out: int, bias: bool = True, zero: bool = False):
        shape = (fan_in, fan_out)
        self.params.add(f"{name}.w", np.zeros(shape) if zero else _uniform(rng, fan_in, shape))
        if bias:
            self.params.add(f"{name}.b", np.zeros(fan_out) if zero else _uniform(rng, fan_in, fan_out))

    def _init_encoders(self, rng):
        dm = self.dims
        widths = [dm.in_dim, dm.hidden, dm.hidden, dm.hidden, dm.half]
        for br in BRANCHES:
            for j in range(4):
                self._dense(f"phi_{br}.l{j}", rng, widths[j], widths[j + 1])

    def _init_branch(self, pre: str, rng):
        dm = self.dims
        L, C, d, D = dm.num_tokens, dm.num_slots, dm.slot_dim, dm.feat_dim
        self._dense(f"{pre}.attr_enc", rng, D, L * d)
        self.params.add(f"{pre}.slots_mu", 0.1 * rng.standard_normal((C, d)))
        self.params.add(f"{pre}.slots_log_std", np.full((C, d), -1.0))
        for proj in ("q", "k", "v"):
            self._dense(f"{pre}.asa.{proj}", rng, d, d, bias=False)
        for gate in ("z", "r", "h"):
            self.params.add(f"{pre}.gru.w_{gate}", _uniform(rng, d, (d, d)))
            self.params.add(f"{pre}.gru.u_{gate}", _uniform(rng, d, (d, d)))
            self.params.add(f"{pre}.gru.b_{gate}", _uniform(rng, d, d))
        self.params.add(f"{pre}.slot_pos", np.zeros((C, d)))
        for proj in ("q", "k", "v"):
            self._dense(f"{pre}.ca.{proj}", rng, d, d, bias=False)
        self.params.add(f"{pre}.attr_dec.w", _uniform(rng, L * d, (L * d, D)))
        self.params.add(f"{pre}.attr_dec.b", np.zeros(D))

    def _init_classifiers(self, rng):
        dm = self.dims
        for br in BRANCHES:
            self._dense(f"psi_{br}.l0", rng, dm.feat_dim, 2 * dm.half)
            self._dense(f"psi_{br}.l1", rng, 2 * dm.half, dm.num_classes)

    def p(self, name: str) -> Tensor:
        return self.params[name]

    def group_of(self, name: str) -> str:
        return "dgw" if name.startswith("dgw_") else "main"

    def branch_param_names(self, br: str) -> list[str]:
        """Names of phi, dgw and psi parameters that belong to branch ``br``."""
        prefixes = (f"phi_{br}.", f"dgw_{br}.", f"psi_{br}.")
        return [n for n in self.params.names() if n.startswith(prefixes)]

    # ------------------------------------------------------------ encoders

    def _check_input(self, x) -> Tensor:
        x = nc.as_tensor(x)
        if x.ndim != 2 or x.shape[1] != self.dims.in_dim:
            raise ContractError(
                f"input must be (batch, {self.dims.in_dim}) for side {self.dims.side}, got {x.shape}")
        return x

    def encoder(self, br: str, x: Tensor, keep_hidden: bool = False):
        h = x
        hidden = []
        for j in range(4):
            h = linear(h, self.p(f"phi_{br}.l{j}.w"), self.p(f"phi_{br}.l{j}.b"))
            if j < 3:
                h = nc.relu(h)
                hidden.append(h)
        return (h, hidden) if keep_hidden else h

    def encode(self, x) -> Tensor:
        """``e = [phi_i(x); phi_b(x)]`` with shape ``(batch, D)``."""
        x = self._check_input(x)
        return nc.concat([self.encoder("i", x), self.encoder("b", x)], axis=1)

    def classify(self, br: str, e: Tensor) -> Tensor:
        h = nc.relu(linear(e, self.p(f"psi_{br}.l0.w"), self.p(f"psi_{br}.l0.b")))
        return linear(h, self.p(f"psi_{br}.l1.w"), self.p(f"psi_{br}.l1.b"))

    # ------------------------------------------------------------ workspace

    def tokenize(self, br: str, e: Tensor) -> Tensor:
        dm = self.dims
        pre = f"dgw_{br}"
        flat = linear(e, self.p(f"{pre}.attr_enc.w"), self.p(f"{pre}.attr_enc.b"))
        return nc.layer_norm(nc.reshape(flat, (e.shape[0], dm.num_tokens, dm.slot_dim)))

    def gru(self, br: str, h: Tensor, u: Tensor) -> Tensor:
        pre = f"dgw_{br}.gru"
        P = self.p

        def gate(g, state):
            return nc.add_rowvec(nc.matmul(u, P(f"{pre}.w_{g}")) + nc.matmul(state, P(f"{pre}.u_{g}")),
                                 P(f"{pre}.b_{g}"))

        z = nc.sigmoid(gate("z", h))
        r = nc.sigmoid(gate("r", h))
        h_new = nc.tanh(gate("h", r * h))
        return h + z * (h_new - h)

    def asa_forward(self, br: str, E: Tensor, rng: np.random.Generator):
        """Slot attention over tokens ``E`` of shape ``(B, L, d)``.

        Returns the final slots ``(B, C, d)`` and the last iteration's
        renormalized attention ``(B, C, L)``.
        """
        dm = self.dims
        pre = f"dgw_{br}"
        B = E.shape[0]
        S = nc.sample_gaussian(self.p(f"{pre}.slots_mu"), self.p(f"{pre}.slots_log_std"), rng,
                               (B, dm.num_slots, dm.slot_dim))
        k = nc.matmul(E, self.p(f"{pre}.asa.k.w"))
        v = nc.matmul(E, self.p(f"{pre}.asa.v.w"))
        kT = nc.transpose(k)
        inv_sqrt_d = 1.0 / math.sqrt(dm.slot_dim)
        A = None
        for _ in range(dm.iters):
            S = nc.layer_norm(S)
            q = nc.matmul(S, self.p(f"{pre}.asa.q.w"))
            A = nc.softmax(nc.scale(nc.matmul(q, kT), inv_sqrt_d), axis=1)
            A = A / nc.reduce_sum(A, axis=2, keepdims=True)
            U = nc.matmul(A, v)
            S = self.gru(br, S, U)
        return S, A

    def ca_forward(self, br: str, E: Tensor, S: Tensor):
        """Tokens attend over position-embedded slots.

        Returns updated tokens ``(B, L, d)``, the attention ``(B, L, C)`` and
        its logits.
        """
        dm = self.dims
        pre = f"dgw_{br}"
        S_hat = S + self.p(f"{pre}.slot_pos")
        q = nc.matmul(E, self.p(f"{pre}.ca.q.w"))
        k = nc.matmul(S_hat, self.p(f"{pre}.ca.k.w"))
        v = nc.matmul(S_hat, self.p(f"{pre}.ca.v.w"))
        logits = nc.scale(nc.matmul(q, nc.transpose(k)), 1.0 / math.sqrt(dm.slot_dim))
        A = nc.softmax(logits, axis=-1)
        return nc.matmul(A, v), A, logits

    def dgw_update(self, br: str, e: Tensor, rng: np.random.Generator):
        """Workspace pass of branch ``br``: ``(B, D) -> (B, D)`` plus attention."""
        dm = self.dims
        pre = f"dgw_{br}"
        E = self.tokenize(br, e)
        S, a_asa = self.asa_forward(br, E, rng)
        E_upd, a_ca, logits = self.ca_forward(br, E, S)
        flat = nc.reshape(E_upd, (e.shape[0], dm.num_tokens * dm.slot_dim))
        e_tilde = linear(flat, self.p(f"{pre}.attr_dec.w"), self.p(f"{pre}.attr_dec.b"))
        tag = "intrinsic" if br == "i" else "bias"
        return e_tilde, AttentionRecord(a_asa, a_ca, logits, tag)

    # ------------------------------------------------------------ wiring

    def detach_half(self, e: Tensor, keep: str) -> Tensor:
        """Cut the gradient path of the half of ``e`` not owned by ``keep``."""
        h = self.dims.half
        e_i, e_b = nc.split(e, [h, h], axis=1)
        if keep == "i":
            return nc.concat([e_i, nc.stop_gradient(e_b)], axis=1)
        return nc.concat([nc.stop_gradient(e_i), e_b], axis=1)

    def branch_views(self, e: Tensor, alpha: float, rng: np.random.Generator):
        """Mixed, branch-isolated features for both classifiers."""
        out, recs = {}, {}
        for br in BRANCHES:
            own = self.detach_half(e, br)
            e_tilde, rec = self.dgw_update(br, own, rng)
            out[br] = mix(own, e_tilde, alpha)
            recs[br] = rec
        return out["i"], out["b"], recs["i"], recs["b"]

    def forward_train(self, x, rng: np.random.Generator, alpha: float | None = None,
                      beta: float = 0.2):
        """Encode and run both workspace branches.

        One mixing coefficient is drawn from ``rng`` unless ``alpha`` is given.
        Returns ``(e, e_bar_i, e_bar_b, rec_i, rec_b, alpha)``.
        """
        e = self.encode(x)
        if alpha is None:
            alpha = nc.sample_beta(beta, rng)
        e_bar_i, e_bar_b, rec_i, rec_b = self.branch_views(e, alpha, rng)
        return e, e_bar_i, e_bar_b, rec_i, rec_b, alpha

    def predict(self, x) -> np.ndarray:
        """Intrinsic-classifier logits on the unmixed feature; no workspace, no rng."""
        e = self.encode(x)
        return self.classify("i", e).data.copy()

    def hidden_activations(self, br: str, x) -> list[np.ndarray]:
        """Post-ReLU activations of the three hidden layers of encoder ``br``."""
        _, hidden = self.encoder(br, self._check_input(x), keep_hidden=True)
        return [h.data.copy() for h in hidden]


def mix(a: Tensor, b: Tensor, alpha: float) -> Tensor:
    """``alpha * a + (1 - alpha) * b``."""
    if not 0.0 <= alpha <= 1.0:
        raise ContractError(f"mixing coefficient must lie in [0, 1], got {alpha}")
    return nc.scale(a, alpha) + nc.scale(b, 1.0 - alpha)


def swap_permute(e: Tensor, y: np.ndarray, perm: np.ndarray, half: int):
    """Shuffle the bias half of ``e`` across the batch.

    Returns ``(e_swap, y_tilde)`` where ``y_tilde = y[perm]`` labels the moved
    bias features.
    """
    perm = np.asarray(perm)
    n = e.shape[0]
    if perm.shape != (n,) or not np.array_equal(np.sort(perm), np.arange(n)):
        raise ContractError(f"perm must be a permutation of {n} batch indices")
    e_i, e_b = nc.split(e, [half, e.shape[1] - half], axis=1)
    return nc.concat([e_i, nc.take_rows(e_b, perm)], axis=1), np.asarray(y)[perm]
